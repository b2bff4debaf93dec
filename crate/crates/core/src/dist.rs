//! Predictive distributions produced by the prediction heads.
//!
//! Continuous targets live in normalised `[0, 1]` space as Gaussian
//! mixtures; raw-space densities pick up the Jacobian `1 / (max − min)`.
//! Categorical targets carry logits over the feature's choices.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::schema::{FeatureSpec, Value};
use crate::{Error, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Points of the grid used for KL divergences between continuous targets.
pub const KL_GRID: usize = 1025;

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let l = logsumexp(xs);
    xs.iter().map(|x| (x - l).exp()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gmm {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Gmm {
    pub fn log_density(&self, v: f64) -> f64 {
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .zip(&self.scales)
            .map(|((w, m), s)| {
                let z = (v - m) / s;
                w.ln() - 0.5 * z * z - s.ln() - LN_SQRT_2PI
            })
            .collect();
        logsumexp(&terms)
    }

    pub fn density(&self, v: f64) -> f64 {
        self.log_density(v).exp()
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }

    pub fn variance(&self) -> f64 {
        let mu = self.mean();
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.scales)
            .map(|((w, m), s)| w * (s * s + (m - mu) * (m - mu)))
            .sum()
    }

    /// One draw, not clamped.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let z: f64 = StandardNormal.sample(rng);
        self.means[k] + self.scales[k] * z
    }

    /// Trapezoid mass on `[0, 1]` with `n` grid points.
    pub fn grid_mass(&self, n: usize) -> f64 {
        let h = 1.0 / (n - 1) as f64;
        (0..n)
            .map(|i| {
                let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                w * self.density(i as f64 * h)
            })
            .sum::<f64>()
            * h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Categorical {
    pub logits: Vec<f64>,
}

impl Categorical {
    pub fn probs(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    pub fn log_prob(&self, index: usize) -> f64 {
        self.logits[index] - logsumexp(&self.logits)
    }

    /// Most probable index; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &l) in self.logits.iter().enumerate() {
            if l > self.logits[best] {
                best = i;
            }
        }
        best
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let p = self.probs();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                return i;
            }
        }
        // Rounding left `acc` short of `u`: fall back to the last index with mass.
        p.iter().rposition(|&x| x > 0.0).unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Predictive {
    Gmm(Gmm),
    Categorical(Categorical),
}

/// Draws from one predictive; continuous draws are clamped to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub values: Vec<Value>,
    pub clamp_rate: f64,
}

impl Predictive {
    /// Log-likelihood of a value in normalised space.
    pub fn log_likelihood(&self, spec: &FeatureSpec, value: &Value) -> Result<f64> {
        let bad = |msg: String| Error::InvalidValue {
            feature: spec.id.clone(),
            msg,
        };
        match (self, value) {
            (Predictive::Gmm(g), Value::Continuous { norm, .. }) => {
                if !(0.0..=1.0).contains(norm) {
                    return Err(bad(format!("normalised value {norm} is outside [0, 1]")));
                }
                Ok(g.log_density(*norm))
            }
            (Predictive::Categorical(c), Value::Category(i)) => {
                if *i >= c.logits.len() {
                    return Err(bad(format!("category index {i} out of range")));
                }
                Ok(c.log_prob(*i))
            }
            _ => Err(bad("value type does not match the prediction head".into())),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, spec: &FeatureSpec, rng: &mut R, n: usize) -> Result<Samples> {
        if n == 0 {
            return Err(Error::Sampling("need at least one sample".into()));
        }
        match self {
            Predictive::Categorical(c) => Ok(Samples {
                values: (0..n).map(|_| Value::Category(c.sample(rng))).collect(),
                clamp_rate: 0.0,
            }),
            Predictive::Gmm(g) => {
                let mut clamped = 0usize;
                let values = (0..n)
                    .map(|_| {
                        let v = g.sample(rng);
                        let c = v.clamp(0.0, 1.0);
                        if c != v {
                            clamped += 1;
                        }
                        Value::Continuous {
                            raw: spec.denormalize(c),
                            norm: c,
                        }
                    })
                    .collect();
                Ok(Samples {
                    values,
                    clamp_rate: clamped as f64 / n as f64,
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetPrediction {
    pub feature: FeatureSpec,
    pub dist: Predictive,
}

impl TargetPrediction {
    /// Log density at a raw value, in raw units.
    pub fn log_density_raw(&self, raw: f64) -> Result<f64> {
        match &self.dist {
            Predictive::Gmm(g) => {
                let (lo, hi) = self.feature.range.ok_or_else(|| Error::Model("continuous target without range".into()))?;
                Ok(g.log_density((raw - lo) / (hi - lo)) - (hi - lo).ln())
            }
            Predictive::Categorical(_) => Err(Error::InvalidValue {
                feature: self.feature.id.clone(),
                msg: "raw density requested for a categorical target".into(),
            }),
        }
    }

    /// Point prediction: the mode for categories, the mean (raw units) for
    /// continuous targets.
    pub fn point(&self) -> Value {
        match &self.dist {
            Predictive::Categorical(c) => Value::Category(c.argmax()),
            Predictive::Gmm(g) => {
                let m = g.mean();
                Value::Continuous {
                    raw: self.feature.denormalize(m),
                    norm: m,
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    pub targets: Vec<TargetPrediction>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogLikelihood {
    pub per_target: Vec<f64>,
    pub total: f64,
}

impl PredictiveDistribution {
    pub fn get(&self, id: &str) -> Option<&TargetPrediction> {
        self.targets.iter().find(|t| t.feature.id == id)
    }

    /// Per-target log-likelihoods of `truth` (same order as the targets)
    /// and their sum.
    pub fn log_likelihood(&self, truth: &[Value]) -> Result<LogLikelihood> {
        if truth.len() != self.targets.len() {
            return Err(Error::Model(format!(
                "{} truth values for {} targets",
                truth.len(),
                self.targets.len()
            )));
        }
        let per_target = self
            .targets
            .iter()
            .zip(truth)
            .map(|(t, v)| t.dist.log_likelihood(&t.feature, v))
            .collect::<Result<Vec<_>>>()?;
        let total = per_target.iter().sum();
        Ok(LogLikelihood { per_target, total })
    }
}

/// Points of the raw-unit density grid in a [`Summary`].
pub const SUMMARY_GRID: usize = 65;

/// Display-ready view of one target's predictive distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Summary {
    Categorical {
        feature_id: String,
        choices: Vec<String>,
        probs: Vec<f64>,
        mode: String,
    },
    Gmm {
        feature_id: String,
        /// Mixture in normalised units.
        weights: Vec<f64>,
        means: Vec<f64>,
        scales: Vec<f64>,
        mean_raw: f64,
        sd_raw: f64,
        /// Equispaced raw values over the feature range.
        grid_raw: Vec<f64>,
        /// Density per raw unit at `grid_raw`.
        density_raw: Vec<f64>,
    },
}

impl TargetPrediction {
    pub fn summary(&self) -> Summary {
        let f = &self.feature;
        match &self.dist {
            Predictive::Categorical(c) => Summary::Categorical {
                feature_id: f.id.clone(),
                choices: f.choices.clone(),
                probs: c.probs(),
                mode: f.choices.get(c.argmax()).cloned().unwrap_or_default(),
            },
            Predictive::Gmm(g) => {
                let span = f.span();
                let h = 1.0 / (SUMMARY_GRID - 1) as f64;
                let norm: Vec<f64> = (0..SUMMARY_GRID).map(|i| i as f64 * h).collect();
                Summary::Gmm {
                    feature_id: f.id.clone(),
                    weights: g.weights.clone(),
                    means: g.means.clone(),
                    scales: g.scales.clone(),
                    mean_raw: f.denormalize(g.mean()),
                    sd_raw: g.variance().sqrt() * span,
                    grid_raw: norm.iter().map(|&v| f.denormalize(v)).collect(),
                    density_raw: norm.iter().map(|&v| g.density(v) / span).collect(),
                }
            }
        }
    }
}

impl PredictiveDistribution {
    pub fn summaries(&self) -> Vec<Summary> {
        self.targets.iter().map(TargetPrediction::summary).collect()
    }
}

/// `KL(p ‖ q)` for probability vectors; terms with `p = 0` vanish.
pub fn kl_categorical(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum()
}

/// Composite Simpson weights on `n` (odd) equispaced points over `[0, 1]`.
pub fn simpson_weights(n: usize) -> Vec<f64> {
    assert!(n >= 3 && n % 2 == 1, "Simpson needs an odd number of points");
    let h = 1.0 / (n - 1) as f64;
    (0..n)
        .map(|i| {
            let c = if i == 0 || i == n - 1 {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            c * h / 3.0
        })
        .collect()
}

/// `KL(p ‖ q)` between the two mixtures truncated to `[0, 1]`, by Simpson
/// quadrature on [`KL_GRID`] points. Both densities are renormalised on the
/// grid first, so the result is a divergence between proper distributions.
pub fn kl_gmm_grid(p: &Gmm, q: &Gmm) -> f64 {
    let w = simpson_weights(KL_GRID);
    let h = 1.0 / (KL_GRID - 1) as f64;
    let lp: Vec<f64> = (0..KL_GRID).map(|i| p.log_density(i as f64 * h)).collect();
    let lq: Vec<f64> = (0..KL_GRID).map(|i| q.log_density(i as f64 * h)).collect();
    let log_mass = |l: &[f64]| {
        let terms: Vec<f64> = l.iter().zip(&w).map(|(x, wi)| x + wi.ln()).collect();
        logsumexp(&terms)
    };
    let (zp, zq) = (log_mass(&lp), log_mass(&lq));
    lp.iter()
        .zip(&lq)
        .zip(&w)
        .map(|((a, b), wi)| {
            let pa = (a - zp).exp();
            if pa == 0.0 {
                0.0
            } else {
                wi * pa * ((a - zp) - (b - zq))
            }
        })
        .sum()
}

/// `KL(p ‖ q)` for two predictives of the same kind.
pub fn kl(p: &Predictive, q: &Predictive) -> Result<f64> {
    match (p, q) {
        (Predictive::Categorical(a), Predictive::Categorical(b)) => Ok(kl_categorical(&a.probs(), &b.probs())),
        (Predictive::Gmm(a), Predictive::Gmm(b)) => Ok(kl_gmm_grid(a, b)),
        _ => Err(Error::Model("KL between different distribution kinds".into())),
    }
}
