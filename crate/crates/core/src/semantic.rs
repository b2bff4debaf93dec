//! Feature embeddings grounded in metadata.
//!
//! `embed(f) = P·desc(f) + type(f) + [categorical]·pool({P·choice(c)})`,
//! where `P` is one shared affine map from text space to model width and
//! `pool` is attention pooling with a single learned seed (or a plain sum).
//! Text vectors are inputs: no gradient reaches the encoder.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use setinfer_numerics::{Graph, ParamId, Tensor, Var};

use crate::schema::{FeatureSpec, FeatureType};
use crate::text::TextEncoder;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChoicePooling {
    #[default]
    Attention,
    Sum,
}

/// Parameter handles for the feature embedding.
#[derive(Clone, Copy, Debug)]
pub struct SemanticParams {
    /// `[d_text, d]`
    pub proj_w: ParamId,
    /// `[1, d]`
    pub proj_b: ParamId,
    /// `[2, d]`, row 0 categorical, row 1 continuous.
    pub type_emb: ParamId,
    /// `[1, d]`
    pub pool_seed: ParamId,
    /// `[d, d]`
    pub pool_wk: ParamId,
    /// `[d, d]`
    pub pool_wv: ParamId,
}

/// Memoising wrapper around a text encoder. Safe for concurrent readers.
pub struct TextCache {
    encoder: Box<dyn TextEncoder>,
    cache: RwLock<HashMap<String, Arc<Vec<f64>>>>,
}

impl TextCache {
    pub fn new(encoder: Box<dyn TextEncoder>) -> Self {
        Self {
            encoder,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim()
    }

    pub fn get(&self, text: &str) -> Result<Arc<Vec<f64>>> {
        if let Some(v) = self.cache.read().expect("text cache poisoned").get(text) {
            return Ok(v.clone());
        }
        let v = Arc::new(self.encoder.encode(text)?.vector);
        self.cache
            .write()
            .expect("text cache poisoned")
            .insert(text.to_string(), v.clone());
        Ok(v)
    }

    /// Rows of the returned matrix are the embeddings of `texts`, in order.
    pub fn matrix(&self, texts: &[&str]) -> Result<Tensor> {
        let d = self.dim();
        let mut data = Vec::with_capacity(texts.len() * d);
        for t in texts {
            data.extend_from_slice(&self.get(t)?);
        }
        Ok(Tensor::matrix(texts.len(), d, data)?)
    }
}

/// Graph handles for a list of features.
#[derive(Clone, Debug)]
pub struct SchemaEmbedding {
    /// `[M, d]`, one row per feature in input order.
    pub features: Var,
    /// Per feature: projected category embeddings `[K, d]` for categorical
    /// features, in `choices` order.
    pub categories: Vec<Option<Var>>,
}

fn project(g: &mut Graph, p: &SemanticParams, text: Tensor) -> Result<Var> {
    let x = g.constant(text);
    let w = g.param(p.proj_w);
    let b = g.param(p.proj_b);
    Ok(g.linear(x, w, b)?)
}

/// Pool projected category embeddings `[K, d]` into `[1, d]`.
pub fn pool_choices(g: &mut Graph, p: &SemanticParams, cats: Var, pooling: ChoicePooling) -> Result<Var> {
    match pooling {
        ChoicePooling::Sum => Ok(g.sum_rows(cats)),
        ChoicePooling::Attention => {
            let (_, d) = g.shape(cats);
            let wk = g.param(p.pool_wk);
            let wv = g.param(p.pool_wv);
            let seed = g.param(p.pool_seed);
            let k = g.matmul(cats, wk)?;
            let v = g.matmul(cats, wv)?;
            let s = g.matmul_t(seed, k)?;
            let s = g.scale(s, 1.0 / (d as f64).sqrt());
            let a = g.softmax(s)?;
            Ok(g.matmul(a, v)?)
        }
    }
}

/// Projected per-category embeddings `[K, d]` and their pooled summary.
pub fn embed_choices(
    g: &mut Graph,
    p: &SemanticParams,
    text: &TextCache,
    spec: &FeatureSpec,
    pooling: ChoicePooling,
) -> Result<(Var, Var)> {
    if spec.choices.is_empty() {
        return Err(Error::InvalidFeature {
            feature: spec.id.clone(),
            msg: "no choices to embed".into(),
        });
    }
    let names: Vec<&str> = spec.choices.iter().map(String::as_str).collect();
    let cats = project(g, p, text.matrix(&names)?)?;
    let pooled = pool_choices(g, p, cats, pooling)?;
    Ok((cats, pooled))
}

/// Embed every feature in `features`; description projections are batched.
pub fn embed_schema(
    g: &mut Graph,
    p: &SemanticParams,
    text: &TextCache,
    features: &[&FeatureSpec],
    pooling: ChoicePooling,
) -> Result<SchemaEmbedding> {
    if features.is_empty() {
        return Err(Error::Model("no features to embed".into()));
    }
    let descs: Vec<&str> = features.iter().map(|f| f.desc.as_str()).collect();
    let desc = project(g, p, text.matrix(&descs)?)?;
    let type_rows: Vec<usize> = features
        .iter()
        .map(|f| match f.ftype {
            FeatureType::Categorical => 0,
            FeatureType::Continuous => 1,
        })
        .collect();
    let types = g.param(p.type_emb);
    let types = g.select_rows(types, &type_rows)?;
    let mut out = g.add(desc, types)?;
    let mut categories = Vec::with_capacity(features.len());
    let mut pooled_rows = Vec::with_capacity(features.len());
    let d = g.shape(out).1;
    let mut any_cat = false;
    for f in features {
        if f.ftype == FeatureType::Categorical {
            let (cats, pooled) = embed_choices(g, p, text, f, pooling)?;
            categories.push(Some(cats));
            pooled_rows.push(pooled);
            any_cat = true;
        } else {
            categories.push(None);
            pooled_rows.push(g.constant(Tensor::zeros(&[1, d])));
        }
    }
    if any_cat {
        let choices = g.concat_rows(&pooled_rows)?;
        out = g.add(out, choices)?;
    }
    Ok(SchemaEmbedding {
        features: out,
        categories,
    })
}

/// Embedding of a single feature, `[1, d]`.
pub fn embed_feature(
    g: &mut Graph,
    p: &SemanticParams,
    text: &TextCache,
    spec: &FeatureSpec,
    pooling: ChoicePooling,
) -> Result<Var> {
    Ok(embed_schema(g, p, text, &[spec], pooling)?.features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{EncoderConfig, HashedEncoder};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use setinfer_numerics::ParamStore;

    const D: usize = 12;

    fn setup(zero: bool) -> (ParamStore, SemanticParams, TextCache) {
        let cfg = EncoderConfig {
            d_text: 16,
            ..EncoderConfig::default()
        };
        let text = TextCache::new(Box::new(HashedEncoder::new(cfg).unwrap()));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamStore::new();
        let mut mk = |name: &str, r: usize, c: usize| {
            let data = (0..r * c)
                .map(|_| if zero { 0.0 } else { rng.random_range(-0.5..0.5) })
                .collect();
            ps.insert(name, Tensor::matrix(r, c, data).unwrap()).unwrap()
        };
        let p = SemanticParams {
            proj_w: mk("w", 16, D),
            proj_b: mk("b", 1, D),
            type_emb: mk("t", 2, D),
            pool_seed: mk("s", 1, D),
            pool_wk: mk("k", D, D),
            pool_wv: mk("v", D, D),
        };
        (ps, p, text)
    }

    fn values(g: &Graph, v: Var) -> Vec<f64> {
        g.value(v).data().to_vec()
    }

    #[test]
    fn continuous_has_no_choice_term() {
        let (ps, p, text) = setup(false);
        let spec = FeatureSpec::continuous("age", "age in years", 0.0, 100.0);
        let mut g = Graph::new(&ps);
        let e = embed_feature(&mut g, &p, &text, &spec, ChoicePooling::Attention).unwrap();
        let got = values(&g, e);
        let t = text.get("age in years").unwrap();
        let (w, b, ty) = (ps.get(p.proj_w), ps.get(p.proj_b), ps.get(p.type_emb));
        for j in 0..D {
            let proj: f64 = (0..16).map(|i| t[i] * w.get(i, j)).sum::<f64>() + b.get(0, j);
            assert!((got[j] - (proj + ty.get(1, j))).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_params_give_zero_vector() {
        let (ps, p, text) = setup(true);
        let spec = FeatureSpec::continuous("bmi", "body mass index", 10.0, 50.0);
        let mut g = Graph::new(&ps);
        let e = embed_feature(&mut g, &p, &text, &spec, ChoicePooling::Attention).unwrap();
        assert!(values(&g, e).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn choice_order_does_not_matter() {
        let (ps, p, text) = setup(false);
        for pooling in [ChoicePooling::Attention, ChoicePooling::Sum] {
            let a = FeatureSpec::categorical("c", "blood type", &["a", "b", "ab", "o"]);
            let b = FeatureSpec::categorical("c", "blood type", &["o", "ab", "a", "b"]);
            let mut g = Graph::new(&ps);
            let ea = embed_feature(&mut g, &p, &text, &a, pooling).unwrap();
            let eb = embed_feature(&mut g, &p, &text, &b, pooling).unwrap();
            for (x, y) in values(&g, ea).iter().zip(values(&g, eb)) {
                assert!((x - y).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn singleton_pool_is_value_transform() {
        let (ps, p, text) = setup(false);
        let spec = FeatureSpec::categorical("c", "colour", &["red"]);
        let mut g = Graph::new(&ps);
        let (cats, pooled) = embed_choices(&mut g, &p, &text, &spec, ChoicePooling::Attention).unwrap();
        let expected = g.value(cats).matmul(ps.get(p.pool_wv)).unwrap();
        for (x, y) in values(&g, pooled).iter().zip(expected.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_metadata_identical_embedding() {
        let (ps, p, text) = setup(false);
        let a = FeatureSpec::categorical("smoker", "current smoker", &["no", "yes"]);
        let b = FeatureSpec::categorical("renamed", "current smoker", &["no", "yes"]);
        let mut g = Graph::new(&ps);
        let s = embed_schema(&mut g, &p, &text, &[&a, &b], ChoicePooling::Attention).unwrap();
        let v = g.value(s.features);
        assert_eq!(v.row_slice(0), v.row_slice(1));
    }
}
