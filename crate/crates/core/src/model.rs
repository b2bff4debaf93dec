//! The aggregate network and its prediction heads.
//!
//! A forward pass turns a query row, its shots and the dataset context into
//! one set of tokens:
//!
//! 1. every atom of the query (observed ones with their values, the rest
//!    with the missing token) and every atom of every shot is embedded;
//! 2. the query and each shot run through the instance block stack,
//!    attending only within themselves;
//! 3. context text becomes one token per chunk;
//! 4. each token is concatenated with a learned type tag (query, shot,
//!    context), projected back to width `d` and the whole set runs through
//!    the aggregate block stack;
//! 5. the output token of each target atom feeds the mixture head
//!    (continuous) or the category head (categorical).
//!
//! Targets are located by origin, never by position, and no positional
//! information enters anywhere, so predictions are invariant to the order
//! of atoms, shots and context chunks.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use setinfer_numerics::checkpoint::{round_to_f32, Checkpoint};
use setinfer_numerics::{Graph, ParamId, ParamStore, Tensor, Var};

use crate::dist::{Categorical, Gmm, Predictive, PredictiveDistribution, TargetPrediction};
use crate::encoder::{atom_embed, layer_norm_affine, set_stack, AtomParams, AtomValue, SetBlockParams};
use crate::schema::{FeatureType, Instance, Schema, Value};
use crate::semantic::{embed_schema, ChoicePooling, SemanticParams, TextCache};
use crate::text::{build_encoder, EncoderConfig};
use crate::{Error, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextMode {
    /// The whole context string is one token.
    #[default]
    Single,
    /// One token per sentence.
    Sentences,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Model width.
    pub d: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Instance block stack depth.
    pub layers: usize,
    /// Aggregate block stack depth.
    pub aggregate_layers: usize,
    pub d_tag: usize,
    /// Mixture components of the continuous head.
    pub components: usize,
    /// Sinusoid frequencies `2^j·π`, `j < n_freq`, for continuous values.
    pub n_freq: usize,
    /// Lower bound on mixture scales, in normalised units.
    pub sigma_floor: f64,
    pub choice_pooling: ChoicePooling,
    pub context: ContextMode,
    pub text: EncoderConfig,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 128,
            heads: 4,
            ffn_mult: 4,
            layers: 8,
            aggregate_layers: 2,
            d_tag: 16,
            components: 10,
            n_freq: 8,
            sigma_floor: 1e-3,
            choice_pooling: ChoicePooling::Attention,
            context: ContextMode::Single,
            text: EncoderConfig::default(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Model(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("width {} must be a positive multiple of heads {}", self.d, self.heads));
        }
        if self.ffn_mult == 0 || self.d_tag == 0 || self.components == 0 {
            return bad("ffn_mult, d_tag and components must be positive".into());
        }
        if self.n_freq == 0 || self.n_freq > 40 {
            return bad(format!("n_freq must be in 1..=40, got {}", self.n_freq));
        }
        if !(self.sigma_floor > 0.0) {
            return bad("sigma_floor must be positive".into());
        }
        self.text.validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    pub fn digest_bytes(&self) -> [u8; 32] {
        Sha256::digest(self.to_json().as_bytes()).into()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        hex::encode(self.digest_bytes())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadParams {
    /// `[d, 3I]`: logits, means, raw scales.
    pub gmm_w: ParamId,
    pub gmm_b: ParamId,
    /// `[d, d]`
    pub cat_w: ParamId,
    pub cat_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub semantic: SemanticParams,
    pub atom: AtomParams,
    pub instance: Vec<SetBlockParams>,
    pub ctx_w: ParamId,
    pub ctx_b: ParamId,
    /// `[3, d_tag]`: query, shot, context.
    pub tags: ParamId,
    pub tag_w: ParamId,
    pub tag_b: ParamId,
    pub aggregate: Vec<SetBlockParams>,
    pub out_g: ParamId,
    pub out_b: ParamId,
    pub head: HeadParams,
}

/// Information type of a token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Query = 0,
    Shot = 1,
    Context = 2,
}

/// One prediction request.
#[derive(Clone, Copy, Debug)]
pub struct Query<'a> {
    pub schema: &'a Schema,
    pub instance: &'a Instance,
    pub shots: &'a [Instance],
    pub targets: &'a [String],
}

/// Head outputs on the tape for one target.
#[derive(Clone, Copy, Debug)]
pub enum HeadOutput {
    /// `[1, I]` log weights, means and scales.
    Gmm { log_w: Var, mu: Var, sigma: Var },
    /// `[1, K]`
    Categorical { logits: Var },
}

/// Anything that produces predictive distributions for queries.
pub trait Predictor: Sync {
    fn predict(&self, query: &Query) -> Result<PredictiveDistribution>;
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub ids: ModelParams,
    text: Arc<TextCache>,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            ids: self.ids.clone(),
            text: self.text.clone(),
        }
    }
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("scalars", &self.params.num_scalars())
            .finish()
    }
}

struct Init {
    rng: ChaCha8Rng,
    store: ParamStore,
}

impl Init {
    fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::Model(e.to_string()))?;
        let data = (0..rows * cols).map(|_| dist.sample(&mut self.rng)).collect();
        Ok(self.store.insert(name, Tensor::matrix(rows, cols, data)?)?)
    }

    fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        self.normal(name, fan_in, fan_out, (1.0 / fan_in as f64).sqrt())
    }

    fn fill(&mut self, name: &str, cols: usize, value: f64) -> Result<ParamId> {
        Ok(self.store.insert(name, Tensor::full(&[1, cols], value))?)
    }

    fn block(&mut self, prefix: &str, d: usize, mult: usize, depth: usize) -> Result<SetBlockParams> {
        let out_std = (1.0 / d as f64).sqrt() / (2.0 * depth.max(1) as f64).sqrt();
        Ok(SetBlockParams {
            ln1_g: self.fill(&format!("{prefix}.ln1.g"), d, 1.0)?,
            ln1_b: self.fill(&format!("{prefix}.ln1.b"), d, 0.0)?,
            wq: self.weight(&format!("{prefix}.wq"), d, d)?,
            wk: self.weight(&format!("{prefix}.wk"), d, d)?,
            wv: self.weight(&format!("{prefix}.wv"), d, d)?,
            wo: self.normal(&format!("{prefix}.wo"), d, d, out_std)?,
            ln2_g: self.fill(&format!("{prefix}.ln2.g"), d, 1.0)?,
            ln2_b: self.fill(&format!("{prefix}.ln2.b"), d, 0.0)?,
            ff1_w: self.weight(&format!("{prefix}.ff1.w"), d, mult * d)?,
            ff1_b: self.fill(&format!("{prefix}.ff1.b"), mult * d, 0.0)?,
            ff2_w: self.normal(&format!("{prefix}.ff2.w"), mult * d, d, out_std / (mult as f64).sqrt())?,
            ff2_b: self.fill(&format!("{prefix}.ff2.b"), d, 0.0)?,
        })
    }
}

/// `softplus⁻¹(y)`.
fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

fn context_chunks(context: &str, mode: ContextMode) -> Vec<String> {
    let keep = |s: &str| !crate::text::normalize_text(s).is_empty();
    match mode {
        ContextMode::Single => {
            if keep(context) {
                vec![context.to_string()]
            } else {
                Vec::new()
            }
        }
        ContextMode::Sentences => context
            .split(['.', '!', '?', ';', '\n'])
            .map(str::trim)
            .filter(|s| keep(s))
            .map(str::to_string)
            .collect(),
    }
}

fn atom_value(schema: &Schema, feature: &str, v: &Value) -> Result<AtomValue> {
    let slot = schema.position(feature).ok_or_else(|| Error::UnknownFeature(feature.to_string()))?;
    let spec = &schema.features[slot];
    spec.check_value(v)?;
    Ok(match *v {
        Value::Continuous { norm, .. } => AtomValue::Continuous(norm),
        Value::Category(index) => AtomValue::Category { slot, index },
    })
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let text = Arc::new(TextCache::new(build_encoder(&config.text)?));
        let (d, dt, i) = (config.d, config.text.d_text, config.components);
        let mut it = Init {
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
            store: ParamStore::new(),
        };
        let semantic = SemanticParams {
            proj_w: it.weight("sem.proj.w", dt, d)?,
            proj_b: it.fill("sem.proj.b", d, 0.0)?,
            type_emb: it.normal("sem.type", 2, d, 0.5)?,
            pool_seed: it.normal("sem.pool.seed", 1, d, 0.5)?,
            pool_wk: it.weight("sem.pool.wk", d, d)?,
            pool_wv: it.weight("sem.pool.wv", d, d)?,
        };
        let atom = AtomParams {
            val_w: it.weight("atom.val.w", 2 * config.n_freq, d)?,
            val_b: it.fill("atom.val.b", d, 0.0)?,
            missing: it.normal("atom.missing", 1, d, 1.0)?,
            gate_w: it.weight("atom.gate.w", d, d)?,
            gate_b: it.fill("atom.gate.b", d, 0.0)?,
            mlp1_w: it.weight("atom.mlp1.w", 2 * d, d)?,
            mlp1_b: it.fill("atom.mlp1.b", d, 0.0)?,
            mlp2_w: it.weight("atom.mlp2.w", d, d)?,
            mlp2_b: it.fill("atom.mlp2.b", d, 0.0)?,
        };
        let instance = (0..config.layers)
            .map(|l| it.block(&format!("enc.{l}"), d, config.ffn_mult, config.layers))
            .collect::<Result<Vec<_>>>()?;
        let ctx_w = it.weight("ctx.w", dt, d)?;
        let ctx_b = it.fill("ctx.b", d, 0.0)?;
        let tags = it.normal("agg.tags", 3, config.d_tag, 1.0)?;
        let tag_w = it.weight("agg.in.w", d + config.d_tag, d)?;
        let tag_b = it.fill("agg.in.b", d, 0.0)?;
        let aggregate = (0..config.aggregate_layers)
            .map(|l| it.block(&format!("agg.{l}"), d, config.ffn_mult, config.aggregate_layers))
            .collect::<Result<Vec<_>>>()?;
        let out_g = it.fill("agg.out.g", d, 1.0)?;
        let out_b = it.fill("agg.out.b", d, 0.0)?;
        let gmm_w = it.normal("head.gmm.w", d, 3 * i, 0.1 / (d as f64).sqrt())?;
        let mut bias = vec![0.0; 3 * i];
        for k in 0..i {
            bias[i + k] = if i == 1 { 0.5 } else { 0.05 + 0.9 * k as f64 / (i - 1) as f64 };
            bias[2 * i + k] = inv_softplus(0.1 - config.sigma_floor);
        }
        let gmm_b = it.store.insert("head.gmm.b", Tensor::row(bias))?;
        let head = HeadParams {
            gmm_w,
            gmm_b,
            cat_w: it.weight("head.cat.w", d, d)?,
            cat_b: it.fill("head.cat.b", d, 0.0)?,
        };
        Ok(Self {
            config,
            params: it.store,
            ids: ModelParams {
                semantic,
                atom,
                instance,
                ctx_w,
                ctx_b,
                tags,
                tag_w,
                tag_b,
                aggregate,
                out_g,
                out_b,
                head,
            },
            text,
        })
    }

    pub fn text(&self) -> &TextCache {
        &self.text
    }

    /// Check targets, atoms and shots against the schema.
    pub fn validate_query(&self, q: &Query) -> Result<()> {
        if q.targets.is_empty() {
            return Err(Error::Model("no targets requested".into()));
        }
        q.instance.validate()?;
        for a in &q.instance.atoms {
            q.schema.require(&a.feature)?;
        }
        for t in q.targets {
            q.schema.require(t)?;
            if q.instance.is_observed(t) {
                return Err(Error::TargetObserved(t.clone()));
            }
        }
        for (s, shot) in q.shots.iter().enumerate() {
            if !shot.is_fully_observed() {
                return Err(Error::Model(format!("shot {s} is not fully observed")));
            }
            shot.validate()?;
        }
        Ok(())
    }

    /// Aggregate output tokens `[T, d]` for the query's targets.
    pub fn target_embeddings(&self, g: &mut Graph, q: &Query) -> Result<(Var, Vec<Option<Var>>)> {
        self.validate_query(q)?;
        let cfg = &self.config;
        let features: Vec<&_> = q.schema.features.iter().collect();
        let sem = embed_schema(g, &self.ids.semantic, &self.text, &features, cfg.choice_pooling)?;

        let mut slots = Vec::new();
        let mut values = Vec::new();
        let mut groups = Vec::new();
        let mut origin: BTreeMap<&str, usize> = BTreeMap::new();
        for a in &q.instance.atoms {
            let slot = q.schema.position(&a.feature).expect("validated");
            let v = match (&a.value, q.instance.is_observed(&a.feature)) {
                (Some(v), true) => atom_value(q.schema, &a.feature, v)?,
                _ => AtomValue::Missing,
            };
            origin.insert(a.feature.as_str(), slots.len());
            slots.push(slot);
            values.push(v);
            groups.push(0);
        }
        for t in q.targets {
            if !origin.contains_key(t.as_str()) {
                origin.insert(t.as_str(), slots.len());
                slots.push(q.schema.position(t).expect("validated"));
                values.push(AtomValue::Missing);
                groups.push(0);
            }
        }
        for (s, shot) in q.shots.iter().enumerate() {
            for a in &shot.atoms {
                let v = a.value.as_ref().expect("shots are fully observed");
                slots.push(q.schema.position(&a.feature).expect("validated"));
                values.push(atom_value(q.schema, &a.feature, v)?);
                groups.push(s + 1);
            }
        }

        let feats = g.select_rows(sem.features, &slots)?;
        let atoms = atom_embed(g, &self.ids.atom, feats, &values, cfg.n_freq, &sem.categories)?;
        let encoded = set_stack(g, &self.ids.instance, atoms, cfg.heads, Some(&groups))?;

        let mut kinds: Vec<usize> = groups
            .iter()
            .map(|&k| if k == 0 { TokenKind::Query } else { TokenKind::Shot } as usize)
            .collect();
        let chunks = context_chunks(&q.schema.context, cfg.context);
        let tokens = if chunks.is_empty() {
            encoded
        } else {
            let refs: Vec<&str> = chunks.iter().map(String::as_str).collect();
            let x = g.constant(self.text.matrix(&refs)?);
            let w = g.param(self.ids.ctx_w);
            let b = g.param(self.ids.ctx_b);
            let ctx = g.linear(x, w, b)?;
            kinds.extend(std::iter::repeat_n(TokenKind::Context as usize, chunks.len()));
            g.concat_rows(&[encoded, ctx])?
        };
        let tags = g.param(self.ids.tags);
        let tags = g.select_rows(tags, &kinds)?;
        let tagged = g.concat_cols(&[tokens, tags])?;
        let w = g.param(self.ids.tag_w);
        let b = g.param(self.ids.tag_b);
        let x = g.linear(tagged, w, b)?;
        let x = set_stack(g, &self.ids.aggregate, x, cfg.heads, None)?;
        let x = layer_norm_affine(g, x, self.ids.out_g, self.ids.out_b)?;
        let rows: Vec<usize> = q.targets.iter().map(|t| origin[t.as_str()]).collect();
        let h = g.select_rows(x, &rows)?;
        let tables = q
            .targets
            .iter()
            .map(|t| sem.categories[q.schema.position(t).expect("validated")])
            .collect();
        Ok((h, tables))
    }

    /// Head outputs for every target, in target order.
    pub fn forward(&self, g: &mut Graph, q: &Query) -> Result<Vec<HeadOutput>> {
        let (h, tables) = self.target_embeddings(g, q)?;
        let mut out = Vec::with_capacity(q.targets.len());
        for (k, t) in q.targets.iter().enumerate() {
            let spec = q.schema.require(t)?;
            let row = if q.targets.len() == 1 { h } else { g.select_rows(h, &[k])? };
            out.push(match spec.ftype {
                FeatureType::Continuous => gmm_head(g, &self.ids.head, row, self.config.components, self.config.sigma_floor)?,
                FeatureType::Categorical => {
                    let table = tables[k].ok_or_else(|| Error::Model(format!("`{t}` has no category table")))?;
                    HeadOutput::Categorical {
                        logits: categorical_head(g, &self.ids.head, row, table)?,
                    }
                }
            });
        }
        Ok(out)
    }

    /// Negated sum of per-target log-likelihoods of `truth`, on the tape.
    pub fn nll(&self, g: &mut Graph, q: &Query, truth: &[Value]) -> Result<Var> {
        if truth.len() != q.targets.len() {
            return Err(Error::Model(format!("{} truth values for {} targets", truth.len(), q.targets.len())));
        }
        let heads = self.forward(g, q)?;
        let mut terms = Vec::with_capacity(heads.len());
        for ((h, t), v) in heads.iter().zip(q.targets).zip(truth) {
            let spec = q.schema.require(t)?;
            spec.check_value(v)?;
            terms.push(head_log_likelihood(g, h, v).map_err(|e| match e {
                Error::InvalidValue { msg, .. } => Error::InvalidValue {
                    feature: t.clone(),
                    msg,
                },
                e => e,
            })?);
        }
        let ll = if terms.len() == 1 { terms[0] } else { g.concat_rows(&terms)? };
        let s = g.sum(ll);
        Ok(g.neg(s))
    }

    /// Narrow every parameter to the nearest `f32`.
    pub fn round_params_f32(&mut self) {
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            round_to_f32(self.params.get_mut(id));
        }
    }

    /// SHA-256 over parameter names, shapes and exact values.
    pub fn param_digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.params.iter() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in t.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            digest: self.config.digest_bytes(),
            header: self.config.to_json(),
            tensors: self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    /// Rebuild a model from a checkpoint; the header must hash to the
    /// stored digest and every parameter must be present with its shape.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_str(&ck.header)?;
        if config.digest_bytes() != ck.digest {
            return Err(Error::DigestMismatch {
                expected: config.digest(),
                found: hex::encode(ck.digest),
            });
        }
        let mut model = Model::new(config)?;
        let ids: Vec<ParamId> = model.params.ids().collect();
        for id in ids {
            let name = model.params.name(id).to_string();
            let t = ck
                .tensor(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if t.shape() != model.params.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    model.params.get(id).shape()
                )));
            }
            *model.params.get_mut(id) = t.clone();
        }
        if ck.tensors.len() != model.params.len() {
            return Err(Error::Checkpoint("checkpoint has unexpected parameters".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        Ok(self.to_checkpoint().save_atomic(path)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Load and require the given config digest.
    pub fn load_expecting(path: &std::path::Path, expected: &ModelConfig) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        if ck.digest != expected.digest_bytes() {
            return Err(Error::DigestMismatch {
                expected: expected.digest(),
                found: hex::encode(ck.digest),
            });
        }
        Self::from_checkpoint(&ck)
    }
}

impl Predictor for Model {
    fn predict(&self, q: &Query) -> Result<PredictiveDistribution> {
        let mut g = Graph::new(&self.params);
        let heads = self.forward(&mut g, q)?;
        let targets = heads
            .iter()
            .zip(q.targets)
            .map(|(h, t)| {
                let dist = match *h {
                    HeadOutput::Gmm { log_w, mu, sigma } => Predictive::Gmm(Gmm {
                        weights: g.value(log_w).data().iter().map(|x| x.exp()).collect(),
                        means: g.value(mu).data().to_vec(),
                        scales: g.value(sigma).data().to_vec(),
                    }),
                    HeadOutput::Categorical { logits } => Predictive::Categorical(Categorical {
                        logits: g.value(logits).data().to_vec(),
                    }),
                };
                Ok(TargetPrediction {
                    feature: q.schema.require(t)?.clone(),
                    dist,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PredictiveDistribution { targets })
    }
}

/// Mixture head on `h: [1, d]`: log weights by log-softmax, scales by
/// softplus plus `floor`.
pub fn gmm_head(g: &mut Graph, p: &HeadParams, h: Var, components: usize, floor: f64) -> Result<HeadOutput> {
    let i = components;
    let w = g.param(p.gmm_w);
    let b = g.param(p.gmm_b);
    let out = g.linear(h, w, b)?;
    let logits = g.slice_cols(out, 0, i)?;
    let log_w = g.log_softmax(logits)?;
    let mu = g.slice_cols(out, i, 2 * i)?;
    let raw = g.slice_cols(out, 2 * i, 3 * i)?;
    let sp = g.softplus(raw);
    let sigma = g.add_scalar(sp, floor);
    Ok(HeadOutput::Gmm { log_w, mu, sigma })
}

/// Category head: logits are dot products of `W·h + b` with each row of
/// the category table `[K, d]`.
pub fn categorical_head(g: &mut Graph, p: &HeadParams, h: Var, table: Var) -> Result<Var> {
    let w = g.param(p.cat_w);
    let b = g.param(p.cat_b);
    let e = g.linear(h, w, b)?;
    Ok(g.matmul_t(e, table)?)
}

/// Log-likelihood `[1, 1]` of one value under a head output.
pub fn head_log_likelihood(g: &mut Graph, head: &HeadOutput, v: &Value) -> Result<Var> {
    match (*head, *v) {
        (HeadOutput::Gmm { log_w, mu, sigma }, Value::Continuous { norm, .. }) => {
            if !(0.0..=1.0).contains(&norm) {
                return Err(Error::InvalidValue {
                    feature: String::new(),
                    msg: format!("normalised value {norm} is outside [0, 1]"),
                });
            }
            let x = g.constant(Tensor::scalar(norm));
            let neg_mu = g.neg(mu);
            let diff = g.add(neg_mu, x)?;
            let z = g.div(diff, sigma)?;
            let z2 = g.mul(z, z)?;
            let half = g.scale(z2, -0.5);
            let ls = g.log(sigma);
            let t = g.sub(log_w, ls)?;
            let t = g.add(t, half)?;
            let t = g.add_scalar(t, -LN_SQRT_2PI);
            Ok(g.logsumexp(t)?)
        }
        (HeadOutput::Categorical { logits }, Value::Category(i)) => {
            let k = g.shape(logits).1;
            if i >= k {
                return Err(Error::InvalidValue {
                    feature: String::new(),
                    msg: format!("category index {i} out of range for {k} choices"),
                });
            }
            let ls = g.log_softmax(logits)?;
            Ok(g.pick(ls, i)?)
        }
        _ => Err(Error::InvalidValue {
            feature: String::new(),
            msg: "value type does not match the prediction head".into(),
        }),
    }
}
