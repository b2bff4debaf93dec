//! Few-shot masked training.
//!
//! Each step draws `B` bundles with replacement, one row per bundle, an
//! observed subset of that row and a set of complete shot rows from the
//! same bundle. The loss is the mean over bundles of the negated sum of
//! log-likelihoods of every unobserved value. Gradients of all `B` terms
//! are accumulated before one Adam update.
//!
//! # Config file
//!
//! TOML or JSON with any subset of the keys of [`TrainConfig`]:
//! `batch_size`, `steps`, `lr`, `warmup`, `smax`, `seed`, `log_every`,
//! `val_every`, `val_fraction`, `val_rows`, `precision` (`"f64"` or
//! `"f32"`), `ema_decay`.
//!
//! # Curve log
//!
//! One JSON object per line: `{"step": 100, "loss": 1.23, "val_nll": 0.98}`
//! where `loss` is the mean step loss since the previous record and
//! `val_nll` is present only on validation steps.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use setinfer_numerics::{Adam, AdamConfig, Graph, ParamStore};

use crate::model::{Model, ModelConfig, Query};
use crate::schema::{sample_mask, sample_shot_indices, DatasetBundle, Instance, Value};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Parameters stay in 64-bit.
    #[default]
    F64,
    /// Parameters are narrowed to `f32` after every update.
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    /// Linear warmup length in steps; 0 disables it.
    pub warmup: usize,
    pub smax: usize,
    pub seed: u64,
    pub log_every: usize,
    /// Validation cadence in steps; 0 validates only at the end.
    pub val_every: usize,
    pub val_fraction: f64,
    /// Cap on validation rows per bundle.
    pub val_rows: usize,
    pub precision: Precision,
    /// Decay of the exponential moving average of parameters used for
    /// validation and as the final model; 0 disables averaging.
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            steps: 5000,
            lr: 3e-4,
            warmup: 0,
            smax: 5,
            seed: 0,
            log_every: 100,
            val_every: 500,
            val_fraction: 0.15,
            val_rows: 200,
            precision: Precision::F64,
            ema_decay: 0.995,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Model("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Model("lr must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Model("ema_decay must be in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Model("val_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }

    fn lr_at(&self, step: u64) -> f64 {
        if self.warmup == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup as f64).min(1.0)
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    pub step: u64,
    pub rng: ChaCha8Rng,
    /// Parameter moving average, when enabled.
    pub ema: Option<ParamStore>,
}

impl TrainState {
    pub fn new(model: Model, cfg: &TrainConfig) -> Self {
        let adam = Adam::new(
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
            &model.params,
        );
        Self {
            adam,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            ema: (cfg.ema_decay > 0.0).then(|| model.params.clone()),
            model,
        }
    }

    /// The model with averaged parameters when averaging is enabled.
    pub fn averaged_model(&self) -> Model {
        let mut m = self.model.clone();
        if let Some(ema) = &self.ema {
            m.params = ema.clone();
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_nll: Option<f64>,
}

/// One sampled training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub bundle: usize,
    pub row: usize,
    pub observed: BTreeSet<String>,
    pub shots: Vec<usize>,
}

/// Draw bundle, row, mask and shots.
pub fn draw_sample<R: Rng + ?Sized>(collection: &[DatasetBundle], smax: usize, rng: &mut R) -> Result<Sample> {
    if collection.is_empty() {
        return Err(Error::Dataset("empty training collection".into()));
    }
    let bundle = rng.random_range(0..collection.len());
    let b = &collection[bundle];
    if b.rows.len() < smax + 1 {
        return Err(Error::Dataset(format!(
            "bundle `{}` has {} rows, needs at least {}",
            b.name(),
            b.rows.len(),
            smax + 1
        )));
    }
    let row = rng.random_range(0..b.rows.len());
    let observed = sample_mask(&b.rows[row], rng)?;
    let shots = sample_shot_indices(b.rows.len(), Some(row), rng, smax)?;
    Ok(Sample {
        bundle,
        row,
        observed,
        shots,
    })
}

/// Query, targets and truth values for a sample: every unobserved atom
/// with a value is a target.
pub fn sample_parts(b: &DatasetBundle, s: &Sample) -> (Instance, Vec<String>, Vec<Value>, Vec<Instance>) {
    let row = &b.rows[s.row];
    let query = row.with_observed(s.observed.clone());
    let (targets, truth): (Vec<String>, Vec<Value>) = row
        .atoms
        .iter()
        .filter(|a| !s.observed.contains(&a.feature))
        .filter_map(|a| a.value.map(|v| (a.feature.clone(), v)))
        .unzip();
    let shots = s
        .shots
        .iter()
        .map(|&i| Instance::fully_observed(b.rows[i].atoms.clone()))
        .collect();
    (query, targets, truth, shots)
}

/// One optimiser update. Returns the step loss.
pub fn train_step(state: &mut TrainState, collection: &[DatasetBundle], cfg: &TrainConfig) -> Result<f64> {
    let samples = (0..cfg.batch_size)
        .map(|_| draw_sample(collection, cfg.smax, &mut state.rng))
        .collect::<Result<Vec<_>>>()?;
    let (loss, grads) = {
        let mut g = Graph::new(&state.model.params);
        let mut terms = Vec::with_capacity(samples.len());
        for s in &samples {
            let b = &collection[s.bundle];
            let (query, targets, truth, shots) = sample_parts(b, s);
            let q = Query {
                schema: &b.schema,
                instance: &query,
                shots: &shots,
                targets: &targets,
            };
            let nll = state.model.nll(&mut g, &q, &truth)?;
            if !g.value(nll).data()[0].is_finite() {
                return Err(Error::NonFiniteLoss {
                    bundle: b.name().to_string(),
                    observed: s.observed.iter().cloned().collect(),
                    shots: s.shots.clone(),
                });
            }
            terms.push(nll);
        }
        let all = g.concat_rows(&terms)?;
        let total = g.sum(all);
        let loss = g.scale(total, 1.0 / samples.len() as f64);
        (g.value(loss).data()[0], g.backward(loss)?)
    };
    state.adam.config.lr = cfg.lr_at(state.step);
    state.adam.step(&mut state.model.params, &grads)?;
    if cfg.precision == Precision::F32 {
        state.model.round_params_f32();
    }
    if let Some(ema) = &mut state.ema {
        // Incremental form: an average equal to the parameters stays exactly
        // equal, so a zero learning rate leaves the model bit-identical.
        let rate = 1.0 - cfg.ema_decay;
        for id in state.model.params.ids() {
            let src = state.model.params.get(id).data();
            for (e, &p) in ema.get_mut(id).data_mut().iter_mut().zip(src) {
                *e += rate * (p - *e);
            }
        }
    }
    state.step += 1;
    Ok(loss)
}

/// Deterministic row split: `(train, validation)`.
pub fn split_bundle(b: &DatasetBundle, val_fraction: f64, seed: u64) -> (DatasetBundle, DatasetBundle) {
    let mut idx: Vec<usize> = (0..b.rows.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (b.rows.len() as f64 * val_fraction).round() as usize;
    let (val, train) = idx.split_at(n_val);
    let mut train = train.to_vec();
    let mut val = val.to_vec();
    train.sort_unstable();
    val.sort_unstable();
    (b.with_rows(&train), b.with_rows(&val))
}

/// Observed set used to score a validation row: everything except the
/// designated targets when the bundle has any, otherwise a seeded random
/// mask.
fn validation_mask<R: Rng + ?Sized>(b: &DatasetBundle, row: &Instance, rng: &mut R) -> Result<BTreeSet<String>> {
    if b.target_ids.is_empty() {
        sample_mask(row, rng)
    } else {
        Ok(row
            .atoms
            .iter()
            .filter(|a| a.value.is_some() && !b.target_ids.contains(&a.feature))
            .map(|a| a.feature.clone())
            .collect())
    }
}

/// Mean zero-shot NLL per row over validation bundles, with masks fixed by
/// `seed`.
pub fn validation_nll(model: &Model, bundles: &[DatasetBundle], seed: u64, max_rows: usize) -> Result<f64> {
    use crate::model::Predictor;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut n = 0usize;
    for b in bundles {
        for row in b.rows.iter().take(max_rows) {
            let observed = validation_mask(b, row, &mut rng)?;
            let query = row.with_observed(observed.clone());
            let (targets, truth): (Vec<String>, Vec<Value>) = row
                .atoms
                .iter()
                .filter(|a| !observed.contains(&a.feature))
                .filter_map(|a| a.value.map(|v| (a.feature.clone(), v)))
                .unzip();
            if targets.is_empty() {
                continue;
            }
            let pred = model.predict(&Query {
                schema: &b.schema,
                instance: &query,
                shots: &[],
                targets: &targets,
            })?;
            total -= pred.log_likelihood(&truth)?.total;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Eval("no validation rows".into()));
    }
    Ok(total / n as f64)
}

#[derive(Clone, Debug)]
pub struct FitOutput {
    /// Final model: averaged parameters when averaging is enabled.
    pub model: Model,
    pub state: TrainState,
    pub curve: Vec<CurvePoint>,
    pub validation: Vec<DatasetBundle>,
}

/// Split every bundle, train for `cfg.steps` and validate periodically.
pub fn fit(model: Model, collection: &[DatasetBundle], cfg: &TrainConfig) -> Result<FitOutput> {
    cfg.validate()?;
    if collection.is_empty() {
        return Err(Error::Dataset("empty training collection".into()));
    }
    let (train, validation): (Vec<_>, Vec<_>) = collection
        .iter()
        .enumerate()
        .map(|(i, b)| split_bundle(b, cfg.val_fraction, cfg.seed.wrapping_add(i as u64)))
        .unzip();
    let mut state = TrainState::new(model, cfg);
    let curve = run_steps(&mut state, &train, &validation, cfg, |_| {})?;
    Ok(FitOutput {
        model: state.averaged_model(),
        state,
        curve,
        validation,
    })
}

/// Run `cfg.steps` updates; `on_point` sees each curve record as it is made.
pub fn run_steps(
    state: &mut TrainState,
    train: &[DatasetBundle],
    validation: &[DatasetBundle],
    cfg: &TrainConfig,
    mut on_point: impl FnMut(&CurvePoint),
) -> Result<Vec<CurvePoint>> {
    let mut curve = Vec::new();
    let mut acc = 0.0;
    let mut count = 0usize;
    let has_val = validation.iter().any(|b| !b.rows.is_empty());
    for i in 1..=cfg.steps {
        acc += train_step(state, train, cfg)?;
        count += 1;
        let log = cfg.log_every > 0 && i % cfg.log_every == 0;
        let val = has_val && ((cfg.val_every > 0 && i % cfg.val_every == 0) || i == cfg.steps);
        if log || val || i == cfg.steps {
            let val_nll = if val {
                Some(validation_nll(&state.averaged_model(), validation, cfg.seed ^ 0x7661_6c69, cfg.val_rows)?)
            } else {
                None
            };
            let p = CurvePoint {
                step: state.step,
                loss: acc / count as f64,
                val_nll,
            };
            on_point(&p);
            curve.push(p);
            acc = 0.0;
            count = 0;
        }
    }
    Ok(curve)
}

/// Continue training on a single bundle. The model must have been built
/// with `expected`.
pub fn finetune(model: Model, expected: &ModelConfig, bundle: &DatasetBundle, cfg: &TrainConfig) -> Result<FitOutput> {
    if model.config.digest() != expected.digest() {
        return Err(Error::DigestMismatch {
            expected: expected.digest(),
            found: model.config.digest(),
        });
    }
    fit(model, std::slice::from_ref(bundle), cfg)
}

pub fn write_curve(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in curve {
        serde_json::to_writer(&mut f, p)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_generate, GeneratorSpec};

    pub(crate) fn tiny_model(seed: u64) -> Model {
        Model::new(ModelConfig {
            d: 16,
            heads: 2,
            layers: 1,
            aggregate_layers: 1,
            components: 3,
            n_freq: 4,
            init_seed: seed,
            text: crate::text::EncoderConfig {
                d_text: 16,
                ..Default::default()
            },
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn collection() -> Vec<DatasetBundle> {
        vec![
            synth_generate(&GeneratorSpec::by_name("mixed", 40).unwrap(), 1).unwrap(),
            synth_generate(&GeneratorSpec::by_name("categorical-bayes-net", 40).unwrap(), 2).unwrap(),
        ]
    }

    #[test]
    fn frozen_model_same_rng_same_loss() {
        let cfg = TrainConfig {
            lr: 0.0,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let data = collection();
        let mut a = TrainState::new(tiny_model(0), &cfg);
        let mut b = a.clone();
        let la = train_step(&mut a, &data, &cfg).unwrap();
        let lb = train_step(&mut b, &data, &cfg).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.model.param_digest(), tiny_model(0).param_digest());
    }

    #[test]
    fn loss_matches_hand_assembled_likelihood() {
        use crate::model::Predictor;
        let cfg = TrainConfig {
            lr: 0.0,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let data = collection();
        let mut state = TrainState::new(tiny_model(1), &cfg);
        let mut rng = state.rng.clone();
        let loss = train_step(&mut state, &data, &cfg).unwrap();
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            let s = draw_sample(&data, cfg.smax, &mut rng).unwrap();
            let b = &data[s.bundle];
            let (query, targets, truth, shots) = sample_parts(b, &s);
            let pred = state
                .model
                .predict(&Query {
                    schema: &b.schema,
                    instance: &query,
                    shots: &shots,
                    targets: &targets,
                })
                .unwrap();
            total -= pred.log_likelihood(&truth).unwrap().total;
        }
        assert!((loss - total / cfg.batch_size as f64).abs() < 1e-10);
    }

    #[test]
    fn zero_steps_leave_model_unchanged() {
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let out = fit(tiny_model(2), &collection(), &cfg).unwrap();
        assert!(out.curve.is_empty());
        assert_eq!(out.state.model.param_digest(), tiny_model(2).param_digest());
    }

    #[test]
    fn finetune_checks_digest() {
        let cfg = TrainConfig {
            steps: 1,
            ..TrainConfig::default()
        };
        let other = tiny_model(9).config;
        let data = collection();
        assert!(matches!(
            finetune(tiny_model(3), &other, &data[0], &cfg),
            Err(Error::DigestMismatch { .. })
        ));
        let lr0 = TrainConfig {
            steps: 2,
            lr: 0.0,
            ..TrainConfig::default()
        };
        let m = tiny_model(3);
        let out = finetune(m.clone(), &m.config, &data[0], &lr0).unwrap();
        assert_eq!(out.state.model.param_digest(), m.param_digest());
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let b = &collection()[0];
        let (t1, v1) = split_bundle(b, 0.15, 4);
        let (t2, v2) = split_bundle(b, 0.15, 4);
        assert_eq!(t1, t2);
        assert_eq!(v1, v2);
        assert_eq!(t1.rows.len() + v1.rows.len(), b.rows.len());
        assert_eq!(v1.rows.len(), 6);
    }

    #[test]
    fn too_few_rows_is_an_error() {
        let b = synth_generate(&GeneratorSpec::by_name("mixed", 3).unwrap(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(draw_sample(&[b], 5, &mut rng).is_err());
    }
}
