//! Greedy cost-aware feature acquisition.
//!
//! A session holds the values acquired so far for one target. Each
//! suggestion scores every affordable candidate by estimated mutual
//! information with the target divided by its cost:
//!
//! `I(v_c; y | obs) = E_{v ~ p(v_c | obs)} KL(p(y | obs ∪ {v}) ‖ p(y | obs))`
//!
//! The expectation is exact for categorical candidates (one term per
//! choice) and a Monte Carlo average over `n_v` mixture draws for
//! continuous ones. Ties go to the lowest feature id. A `Stop` suggestion
//! terminates the session.
//!
//! # Session log
//!
//! One JSON object per acquisition:
//! `{"step": 1, "feature_id": "x1", "mi_estimate": 0.69, "cost": 1.0, "prediction": {...}}`
//! where `prediction` is the target's [`Summary`] after the acquisition and
//! `mi_estimate` is null for acquisitions that were not suggested.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{kl, Predictive, PredictiveDistribution, Summary};
use crate::eval::{metric_f1, metric_rmse};
use crate::model::{Predictor, Query};
use crate::schema::{Atom, DatasetBundle, FeatureType, Instance, Schema, Value};
use crate::{Error, Result};

/// Estimates below this are numerical noise around zero.
pub const MI_FLOOR: f64 = 1e-9;

/// Budget slack absorbing floating-point drift in cost sums.
const BUDGET_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AfaError {
    #[error("session is terminated")]
    Terminated,
    #[error("feature `{0}` is already acquired")]
    AlreadyAcquired(String),
    #[error("feature `{feature}` costs {cost} but only {remaining} of the budget remains")]
    InsufficientBudget { feature: String, cost: f64, remaining: f64 },
    #[error("feature `{0}` is the acquisition target")]
    IsTarget(String),
    #[error("invalid acquisition config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AfaConfig {
    pub target: String,
    pub budget: f64,
    /// Candidate draws for continuous candidates.
    #[serde(default = "default_n_v")]
    pub n_v: usize,
    /// Stop when the best score falls below this.
    #[serde(default = "default_epsilon")]
    pub epsilon_mi: f64,
}

fn default_n_v() -> usize {
    32
}

fn default_epsilon() -> f64 {
    1e-3
}

impl AfaConfig {
    pub fn new(target: &str, budget: f64) -> Self {
        Self {
            target: target.to_string(),
            budget,
            n_v: default_n_v(),
            epsilon_mi: default_epsilon(),
        }
    }

    pub fn validate(&self) -> Result<(), AfaError> {
        if !(self.budget >= 0.0) || !self.budget.is_finite() {
            return Err(AfaError::Config(format!("budget must be finite and >= 0, got {}", self.budget)));
        }
        if !(self.epsilon_mi >= 0.0) {
            return Err(AfaError::Config("epsilon_mi must be >= 0".into()));
        }
        if self.n_v == 0 {
            return Err(AfaError::Config("n_v must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Active,
    Terminated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Every remaining candidate costs more than the remaining budget.
    Budget,
    /// No unacquired candidates are left.
    AllAcquired,
    /// The best score is below the threshold.
    LowInformation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "lowercase")]
pub enum Suggestion {
    Acquire {
        feature_id: String,
        /// Estimated information divided by cost.
        score: f64,
        mi_estimate: f64,
        cost: f64,
    },
    Stop {
        reason: StopReason,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    pub feature_id: String,
    pub mi_estimate: Option<f64>,
    pub cost: f64,
    pub prediction: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AfaSession {
    pub schema: Schema,
    pub config: AfaConfig,
    /// Acquired values in acquisition order.
    pub acquired: Vec<(String, Value)>,
    pub remaining: f64,
    pub history: Vec<HistoryEntry>,
    pub phase: Phase,
    /// Complete example rows passed to every prediction.
    #[serde(skip)]
    pub shots: Vec<Instance>,
    /// Negative information estimates clamped to zero.
    pub negative_clamps: usize,
    pub last_suggestion: Option<Suggestion>,
}

impl AfaSession {
    pub fn new(schema: Schema, config: AfaConfig) -> Result<Self> {
        config.validate()?;
        schema.require(&config.target)?;
        Ok(Self {
            remaining: config.budget,
            schema,
            config,
            acquired: Vec::new(),
            history: Vec::new(),
            phase: Phase::Active,
            shots: Vec::new(),
            negative_clamps: 0,
            last_suggestion: None,
        })
    }

    pub fn with_shots(mut self, shots: Vec<Instance>) -> Self {
        self.shots = shots;
        self
    }

    pub fn is_acquired(&self, id: &str) -> bool {
        self.acquired.iter().any(|(f, _)| f == id)
    }

    /// Every schema feature as an atom; acquired ones observed.
    pub fn instance(&self) -> Instance {
        self.instance_with(None)
    }

    fn instance_with(&self, extra: Option<(&str, Value)>) -> Instance {
        let mut atoms = Vec::with_capacity(self.schema.features.len());
        let mut observed = std::collections::BTreeSet::new();
        for f in &self.schema.features {
            let v = self
                .acquired
                .iter()
                .find(|(id, _)| *id == f.id)
                .map(|(_, v)| *v)
                .or_else(|| extra.filter(|(id, _)| *id == f.id).map(|(_, v)| v));
            if v.is_some() {
                observed.insert(f.id.clone());
            }
            atoms.push(Atom {
                feature: f.id.clone(),
                value: v,
            });
        }
        Instance { atoms, observed }
    }

    /// Unacquired features other than the target, in id order.
    pub fn candidates(&self) -> Vec<&str> {
        let mut c: Vec<&str> = self
            .schema
            .features
            .iter()
            .map(|f| f.id.as_str())
            .filter(|id| *id != self.config.target && !self.is_acquired(id))
            .collect();
        c.sort_unstable();
        c
    }

    fn predict_targets(&self, model: &dyn Predictor, instance: &Instance, targets: &[String]) -> Result<PredictiveDistribution> {
        model.predict(&Query {
            schema: &self.schema,
            instance,
            shots: &self.shots,
            targets,
        })
    }

    /// Current predictive distribution of the target.
    pub fn predict_target(&self, model: &dyn Predictor) -> Result<PredictiveDistribution> {
        self.predict_targets(model, &self.instance(), std::slice::from_ref(&self.config.target))
    }

    /// Sum of the costs of acquired features.
    pub fn spent(&self) -> f64 {
        self.history.iter().map(|h| h.cost).sum()
    }

    /// Σ costs of acquired features ≤ initial budget.
    pub fn budget_respected(&self) -> bool {
        self.spent() <= self.config.budget + BUDGET_SLACK
    }
}

fn target_dist(p: &PredictiveDistribution) -> &Predictive {
    &p.targets[0].dist
}

/// Estimated `I(v_c; y | obs)` in nats, clamped at zero.
pub fn estimate_mi<R: Rng + ?Sized>(
    session: &mut AfaSession,
    candidate: &str,
    model: &dyn Predictor,
    rng: &mut R,
) -> Result<f64> {
    let target = session.config.target.clone();
    if candidate == target {
        return Err(AfaError::IsTarget(candidate.to_string()).into());
    }
    let spec = session.schema.require(candidate)?.clone();
    if session.is_acquired(candidate) {
        return Err(AfaError::AlreadyAcquired(candidate.to_string()).into());
    }
    if session.is_acquired(&target) {
        return Err(Error::TargetObserved(target));
    }
    let base = session.instance();
    let both = [target.clone(), candidate.to_string()];
    let joint = session.predict_targets(model, &base, &both)?;
    let prior = target_dist(&joint).clone();
    let cand = &joint.targets[1].dist;
    let targets = std::slice::from_ref(&target);
    let mut mi = 0.0;
    match (spec.ftype, cand) {
        (FeatureType::Categorical, Predictive::Categorical(c)) => {
            for (k, pk) in c.probs().into_iter().enumerate() {
                if pk == 0.0 {
                    continue;
                }
                let inst = session.instance_with(Some((candidate, Value::Category(k))));
                let post = session.predict_targets(model, &inst, targets)?;
                mi += pk * kl(target_dist(&post), &prior)?;
            }
        }
        (FeatureType::Continuous, Predictive::Gmm(_)) => {
            let draws = cand.sample(&spec, rng, session.config.n_v)?;
            for v in &draws.values {
                let inst = session.instance_with(Some((candidate, *v)));
                let post = session.predict_targets(model, &inst, targets)?;
                mi += kl(target_dist(&post), &prior)?;
            }
            mi /= draws.values.len() as f64;
        }
        _ => return Err(Error::Model(format!("head kind does not match feature `{candidate}`"))),
    }
    if mi < 0.0 {
        if mi < -MI_FLOOR {
            log::debug!("clamping information estimate {mi} for `{candidate}`");
        }
        session.negative_clamps += 1;
        mi = 0.0;
    }
    Ok(mi)
}

/// Best affordable candidate by information per unit cost, or `Stop`.
pub fn suggest_next<R: Rng + ?Sized>(session: &mut AfaSession, model: &dyn Predictor, rng: &mut R) -> Result<Suggestion> {
    if session.phase == Phase::Terminated {
        return Err(AfaError::Terminated.into());
    }
    let candidates: Vec<String> = session.candidates().into_iter().map(str::to_string).collect();
    let affordable: Vec<String> = candidates
        .iter()
        .filter(|c| session.schema.feature(c).is_some_and(|f| f.cost <= session.remaining + BUDGET_SLACK))
        .cloned()
        .collect();
    let stop = |session: &mut AfaSession, reason| {
        let s = Suggestion::Stop { reason };
        session.phase = Phase::Terminated;
        session.last_suggestion = Some(s.clone());
        Ok(s)
    };
    if candidates.is_empty() {
        return stop(session, StopReason::AllAcquired);
    }
    if affordable.is_empty() {
        return stop(session, StopReason::Budget);
    }
    let mut best: Option<(String, f64, f64, f64)> = None;
    for c in &affordable {
        let mi = estimate_mi(session, c, model, rng)?;
        let cost = session.schema.require(c)?.cost;
        let score = if cost > 0.0 {
            mi / cost
        } else if mi > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        if best.as_ref().is_none_or(|b| score > b.1) {
            best = Some((c.clone(), score, mi, cost));
        }
    }
    let (feature_id, score, mi_estimate, cost) = best.expect("at least one affordable candidate");
    if score < session.config.epsilon_mi {
        return stop(session, StopReason::LowInformation);
    }
    let s = Suggestion::Acquire {
        feature_id,
        score,
        mi_estimate,
        cost,
    };
    session.last_suggestion = Some(s.clone());
    Ok(s)
}

/// Record a value for `feature` and charge its cost.
pub fn acquire<'s>(session: &'s mut AfaSession, feature: &str, value: Value, model: &dyn Predictor) -> Result<&'s HistoryEntry> {
    if session.phase == Phase::Terminated {
        return Err(AfaError::Terminated.into());
    }
    if feature == session.config.target {
        return Err(AfaError::IsTarget(feature.to_string()).into());
    }
    let spec = session.schema.require(feature)?;
    if session.is_acquired(feature) {
        return Err(AfaError::AlreadyAcquired(feature.to_string()).into());
    }
    spec.check_value(&value)?;
    let cost = spec.cost;
    if cost > session.remaining + BUDGET_SLACK {
        return Err(AfaError::InsufficientBudget {
            feature: feature.to_string(),
            cost,
            remaining: session.remaining,
        }
        .into());
    }
    let mi_estimate = match &session.last_suggestion {
        Some(Suggestion::Acquire {
            feature_id,
            mi_estimate,
            ..
        }) if feature_id == feature => Some(*mi_estimate),
        _ => None,
    };
    session.acquired.push((feature.to_string(), value));
    session.remaining = (session.remaining - cost).max(0.0);
    session.last_suggestion = None;
    let prediction = session.predict_target(model)?.targets[0].summary();
    session.history.push(HistoryEntry {
        step: session.history.len() + 1,
        feature_id: feature.to_string(),
        mi_estimate,
        cost,
        prediction,
    });
    Ok(session.history.last().expect("just pushed"))
}

pub fn write_session_log(path: &std::path::Path, session: &AfaSession) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for h in &session.history {
        serde_json::to_writer(&mut f, h)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Number of acquisitions made.
    pub step: usize,
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AfaCurve {
    pub target: String,
    /// `"f1"` for categorical targets, `"rmse"` for continuous ones.
    pub metric: String,
    pub points: Vec<CurvePoint>,
    pub rows: usize,
    /// Acquisition order per row.
    pub orders: Vec<Vec<String>>,
}

/// Run acquisition on every row of `bundle` (up to `max_rows`), reading
/// true values from the row, and score the target prediction after each
/// step. Rows that stop early keep their last prediction for later steps.
pub fn run_batch_afa<R: Rng + ?Sized>(
    bundle: &DatasetBundle,
    model: &dyn Predictor,
    cfg: &AfaConfig,
    rng: &mut R,
    max_rows: usize,
) -> Result<AfaCurve> {
    let spec = bundle.schema.require(&cfg.target)?.clone();
    let mut per_row: Vec<Vec<Value>> = Vec::new();
    let mut truths = Vec::new();
    let mut orders = Vec::new();
    for (r, row) in bundle.rows.iter().take(max_rows).enumerate() {
        let truth = row.value_of(&cfg.target).ok_or_else(|| Error::Row {
            row: r,
            feature: cfg.target.clone(),
            msg: "target value missing".into(),
        })?;
        let mut session = AfaSession::new(bundle.schema.clone(), cfg.clone())?;
        let mut preds = vec![session.predict_target(model)?.targets[0].point()];
        let mut order = Vec::new();
        while let Suggestion::Acquire { feature_id, .. } = suggest_next(&mut session, model, rng)? {
            let v = row.value_of(&feature_id).ok_or_else(|| Error::Row {
                row: r,
                feature: feature_id.clone(),
                msg: "value missing for acquisition".into(),
            })?;
            let entry = acquire(&mut session, &feature_id, v, model)?;
            preds.push(summary_point(&entry.prediction, &spec));
            order.push(feature_id);
        }
        debug_assert!(session.budget_respected());
        truths.push(truth);
        per_row.push(preds);
        orders.push(order);
    }
    if per_row.is_empty() {
        return Err(Error::Eval("no rows for acquisition".into()));
    }
    let steps = per_row.iter().map(Vec::len).max().unwrap_or(1);
    let mut points = Vec::with_capacity(steps);
    for k in 0..steps {
        let at: Vec<Value> = per_row.iter().map(|p| p[k.min(p.len() - 1)]).collect();
        let metric = match spec.ftype {
            FeatureType::Categorical => {
                let p: Vec<usize> = at.iter().map(category).collect();
                let t: Vec<usize> = truths.iter().map(category).collect();
                metric_f1(&p, &t)?
            }
            FeatureType::Continuous => {
                let p: Vec<f64> = at.iter().map(raw).collect();
                let t: Vec<f64> = truths.iter().map(raw).collect();
                metric_rmse(&p, &t)?
            }
        };
        points.push(CurvePoint { step: k, metric });
    }
    Ok(AfaCurve {
        target: cfg.target.clone(),
        metric: match spec.ftype {
            FeatureType::Categorical => "f1",
            FeatureType::Continuous => "rmse",
        }
        .into(),
        points,
        rows: per_row.len(),
        orders,
    })
}

fn category(v: &Value) -> usize {
    match v {
        Value::Category(i) => *i,
        Value::Continuous { .. } => usize::MAX,
    }
}

fn raw(v: &Value) -> f64 {
    match v {
        Value::Continuous { raw, .. } => *raw,
        Value::Category(i) => *i as f64,
    }
}

fn summary_point(s: &Summary, spec: &crate::FeatureSpec) -> Value {
    match s {
        Summary::Categorical { probs, .. } => {
            let mut best = 0;
            for (i, p) in probs.iter().enumerate() {
                if *p > probs[best] {
                    best = i;
                }
            }
            Value::Category(best)
        }
        Summary::Gmm { mean_raw, .. } => Value::Continuous {
            raw: *mean_raw,
            norm: spec.normalize(*mean_raw).0,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{Categorical, TargetPrediction};
    use crate::synth::{synth_generate, GeneratorSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Target distribution ignores the evidence; candidates are uniform.
    struct Constant;

    impl Predictor for Constant {
        fn predict(&self, q: &Query) -> Result<PredictiveDistribution> {
            Ok(PredictiveDistribution {
                targets: q
                    .targets
                    .iter()
                    .map(|t| {
                        let f = q.schema.require(t).unwrap().clone();
                        let dist = match f.ftype {
                            FeatureType::Categorical => Predictive::Categorical(Categorical {
                                logits: vec![0.0; f.choices.len()],
                            }),
                            FeatureType::Continuous => Predictive::Gmm(crate::dist::Gmm {
                                weights: vec![1.0],
                                means: vec![0.5],
                                scales: vec![0.2],
                            }),
                        };
                        TargetPrediction { feature: f, dist }
                    })
                    .collect(),
            })
        }
    }

    fn copy_schema() -> Schema {
        synth_generate(&GeneratorSpec::by_name("categorical-bayes-net", 10).unwrap(), 0)
            .unwrap()
            .schema
    }

    #[test]
    fn constant_model_gives_zero_information() {
        let mut s = AfaSession::new(copy_schema(), AfaConfig::new("y", 3.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for c in ["x1", "x2"] {
            assert_eq!(estimate_mi(&mut s, c, &Constant, &mut rng).unwrap(), 0.0);
        }
        let mixed = synth_generate(&GeneratorSpec::by_name("mixed", 10).unwrap(), 0).unwrap().schema;
        let mut s = AfaSession::new(mixed, AfaConfig::new("y", 3.0)).unwrap();
        assert_eq!(estimate_mi(&mut s, "age", &Constant, &mut rng).unwrap(), 0.0);
        // Zero information everywhere: stop.
        assert_eq!(
            suggest_next(&mut s, &Constant, &mut rng).unwrap(),
            Suggestion::Stop {
                reason: StopReason::LowInformation
            }
        );
        assert!(matches!(
            suggest_next(&mut s, &Constant, &mut rng),
            Err(Error::Acquisition(AfaError::Terminated))
        ));
    }

    #[test]
    fn ties_go_to_lowest_id() {
        let mut cfg = AfaConfig::new("y", 3.0);
        cfg.epsilon_mi = 0.0;
        let mut s = AfaSession::new(copy_schema(), cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        match suggest_next(&mut s, &Constant, &mut rng).unwrap() {
            Suggestion::Acquire { feature_id, .. } => assert_eq!(feature_id, "x1"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_budget_stops_immediately() {
        let mut s = AfaSession::new(copy_schema(), AfaConfig::new("y", 0.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            suggest_next(&mut s, &Constant, &mut rng).unwrap(),
            Suggestion::Stop {
                reason: StopReason::Budget
            }
        );
        assert!(s.acquired.is_empty());
        assert_eq!(s.predict_target(&Constant).unwrap().targets.len(), 1);
    }

    #[test]
    fn budget_accounting() {
        let mut s = AfaSession::new(copy_schema(), AfaConfig::new("y", 1.0)).unwrap();
        acquire(&mut s, "x1", Value::Category(1), &Constant).unwrap();
        assert_eq!(s.remaining, 0.0);
        assert_eq!(s.phase, Phase::Active);
        assert!(matches!(
            acquire(&mut s, "x1", Value::Category(0), &Constant),
            Err(Error::Acquisition(AfaError::AlreadyAcquired(_)))
        ));
        assert!(matches!(
            acquire(&mut s, "x2", Value::Category(0), &Constant),
            Err(Error::Acquisition(AfaError::InsufficientBudget { .. }))
        ));
        assert!(matches!(
            acquire(&mut s, "y", Value::Category(0), &Constant),
            Err(Error::Acquisition(AfaError::IsTarget(_)))
        ));
        assert!(s.budget_respected());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            suggest_next(&mut s, &Constant, &mut rng).unwrap(),
            Suggestion::Stop { .. }
        ));
    }

    #[test]
    fn acquiring_everything() {
        let mut s = AfaSession::new(copy_schema(), AfaConfig::new("y", 10.0)).unwrap();
        acquire(&mut s, "x1", Value::Category(1), &Constant).unwrap();
        acquire(&mut s, "x2", Value::Category(0), &Constant).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            suggest_next(&mut s, &Constant, &mut rng).unwrap(),
            Suggestion::Stop {
                reason: StopReason::AllAcquired
            }
        );
        let inst = s.instance();
        assert_eq!(inst.observed.len(), 2);
        assert_eq!(s.history.len(), 2);
        assert!(s.history.iter().all(|h| h.mi_estimate.is_none()));
    }

    #[test]
    fn uniform_stub_curve_is_chance() {
        let b = synth_generate(&GeneratorSpec::by_name("categorical-bayes-net", 40).unwrap(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let curve = run_batch_afa(&b, &Constant, &AfaConfig::new("y", 2.0), &mut rng, 40).unwrap();
        assert_eq!(curve.points.len(), 1);
        assert!(curve.points.len() <= b.features().len());
        // Every prediction is class 0: macro F1 averages class 0's F1 with 0.
        let n0 = b.rows.iter().filter(|r| r.value_of("y") == Some(Value::Category(0))).count() as f64;
        let f1_0 = 2.0 * n0 / (n0 + 40.0);
        assert!((curve.points[0].metric - f1_0 / 2.0).abs() < 1e-12);
    }
}
