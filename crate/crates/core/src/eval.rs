//! Metrics, the few-shot evaluation protocol and plain plot output.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{Predictor, Query};
use crate::schema::{DatasetBundle, FeatureType, Instance, Value};
use crate::{Error, Result};

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a == 0 {
        return Err(Error::Eval("metric of an empty sample".into()));
    }
    if a != b {
        return Err(Error::Eval(format!("{a} predictions for {b} truths")));
    }
    Ok(())
}

/// Macro F1 over the classes present in either argument. A class with no
/// true and no predicted positives cannot occur; one with zero precision
/// and recall scores 0.
pub fn metric_f1(preds: &[usize], truths: &[usize]) -> Result<f64> {
    check_lengths(preds.len(), truths.len())?;
    let classes: BTreeSet<usize> = preds.iter().chain(truths).copied().collect();
    let mut total = 0.0;
    for &c in &classes {
        let tp = preds.iter().zip(truths).filter(|(p, t)| **p == c && **t == c).count() as f64;
        let fp = preds.iter().zip(truths).filter(|(p, t)| **p == c && **t != c).count() as f64;
        let fn_ = preds.iter().zip(truths).filter(|(p, t)| **p != c && **t == c).count() as f64;
        // F1 = 2TP / (2TP + FP + FN); the denominator is positive for present classes.
        total += 2.0 * tp / (2.0 * tp + fp + fn_);
    }
    Ok(total / classes.len() as f64)
}

/// Root mean squared error in the units of the inputs.
pub fn metric_rmse(preds: &[f64], truths: &[f64]) -> Result<f64> {
    check_lengths(preds.len(), truths.len())?;
    let sse: f64 = preds.iter().zip(truths).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sse / preds.len() as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetMetric {
    pub feature_id: String,
    /// `"f1"` (macro) or `"rmse"` (raw units).
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    /// Mean over test rows of the summed target NLL.
    pub nll: f64,
    pub targets: Vec<TargetMetric>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub shots: usize,
    pub seeds: Vec<u64>,
    pub config_digest: String,
    pub test_rows: usize,
    pub per_seed: Vec<SeedMetrics>,
    /// Elementwise mean of `per_seed`; its `seed` field is 0.
    pub mean: SeedMetrics,
}

impl EvalReport {
    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_pretty()? + "\n")?;
        Ok(())
    }
}

/// Exactly `s` distinct fully observed rows of `train`.
fn exact_shots(train: &[Instance], s: usize, rng: &mut ChaCha8Rng) -> Vec<Instance> {
    rand::seq::index::sample(rng, train.len(), s)
        .into_iter()
        .map(|i| Instance::fully_observed(train[i].atoms.clone()))
        .collect()
}

/// Score `test` rows with every non-target feature observed and `shots`
/// fresh demonstrations per row from `train`, once per seed.
pub fn eval_few_shot(
    model: &dyn Predictor,
    train: &DatasetBundle,
    test: &DatasetBundle,
    shots: usize,
    seeds: &[u64],
    config_digest: &str,
) -> Result<EvalReport> {
    let targets = test.target_ids.clone();
    if targets.is_empty() {
        return Err(Error::Eval(format!("bundle `{}` has no designated targets", test.name())));
    }
    if seeds.is_empty() {
        return Err(Error::Eval("at least one seed is required".into()));
    }
    if shots > train.rows.len() {
        return Err(Error::Eval(format!(
            "{shots} shots requested but the train split has {} rows",
            train.rows.len()
        )));
    }
    if test.rows.is_empty() {
        return Err(Error::Eval("empty test split".into()));
    }
    let specs = targets
        .iter()
        .map(|t| test.schema.require(t).cloned())
        .collect::<Result<Vec<_>>>()?;
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut nll = 0.0;
        let mut points: Vec<Vec<Value>> = vec![Vec::new(); targets.len()];
        let mut truths: Vec<Vec<Value>> = vec![Vec::new(); targets.len()];
        for (r, row) in test.rows.iter().enumerate() {
            let truth = targets
                .iter()
                .map(|t| {
                    row.value_of(t).ok_or_else(|| Error::Row {
                        row: r,
                        feature: t.clone(),
                        msg: "target value missing".into(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let observed = row
                .atoms
                .iter()
                .filter(|a| a.value.is_some() && !targets.contains(&a.feature))
                .map(|a| a.feature.clone())
                .collect();
            let query = row.with_observed(observed);
            let demos = exact_shots(&train.rows, shots, &mut rng);
            let pred = model.predict(&Query {
                schema: &test.schema,
                instance: &query,
                shots: &demos,
                targets: &targets,
            })?;
            nll -= pred.log_likelihood(&truth)?.total;
            for (k, t) in pred.targets.iter().enumerate() {
                points[k].push(t.point());
                truths[k].push(truth[k]);
            }
        }
        let metrics = specs
            .iter()
            .enumerate()
            .map(|(k, f)| target_metric(f, &points[k], &truths[k]))
            .collect::<Result<Vec<_>>>()?;
        per_seed.push(SeedMetrics {
            seed,
            nll: nll / test.rows.len() as f64,
            targets: metrics,
        });
    }
    let n = per_seed.len() as f64;
    let mean = SeedMetrics {
        seed: 0,
        nll: per_seed.iter().map(|s| s.nll).sum::<f64>() / n,
        targets: (0..targets.len())
            .map(|k| TargetMetric {
                value: per_seed.iter().map(|s| s.targets[k].value).sum::<f64>() / n,
                ..per_seed[0].targets[k].clone()
            })
            .collect(),
    };
    Ok(EvalReport {
        dataset: test.name().to_string(),
        shots,
        seeds: seeds.to_vec(),
        config_digest: config_digest.to_string(),
        test_rows: test.rows.len(),
        per_seed,
        mean,
    })
}

fn target_metric(f: &crate::FeatureSpec, preds: &[Value], truths: &[Value]) -> Result<TargetMetric> {
    let (metric, value) = match f.ftype {
        FeatureType::Categorical => {
            let idx = |v: &Value| match v {
                Value::Category(i) => Ok(*i),
                _ => Err(Error::Eval(format!("non-categorical value for `{}`", f.id))),
            };
            let p = preds.iter().map(idx).collect::<Result<Vec<_>>>()?;
            let t = truths.iter().map(idx).collect::<Result<Vec<_>>>()?;
            ("f1", metric_f1(&p, &t)?)
        }
        FeatureType::Continuous => {
            let raw = |v: &Value| match v {
                Value::Continuous { raw, .. } => Ok(*raw),
                _ => Err(Error::Eval(format!("non-continuous value for `{}`", f.id))),
            };
            let p = preds.iter().map(raw).collect::<Result<Vec<_>>>()?;
            let t = truths.iter().map(raw).collect::<Result<Vec<_>>>()?;
            ("rmse", metric_rmse(&p, &t)?)
        }
    };
    Ok(TargetMetric {
        feature_id: f.id.clone(),
        metric: metric.into(),
        value,
    })
}

/// One `{"step": k, "metric": m}` object per line.
pub fn write_metric_curve(path: &Path, points: &[(usize, f64)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for &(step, metric) in points {
        serde_json::to_writer(&mut f, &serde_json::json!({ "step": step, "metric": metric }))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Static line chart. Axes span the data with a small margin.
pub fn render_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h, m) = (640.0, 400.0, 60.0);
    let all: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let (mut x0, mut x1, mut y0, mut y1) = (0.0, 1.0, 0.0, 1.0);
    if !all.is_empty() {
        x0 = all.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        x1 = all.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        y0 = all.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        y1 = all.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-6);
    y0 -= pad;
    y1 += pad;
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} V{} H{}" fill="none" stroke="black"/>"#,
        h - m,
        w - m
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            sx(fx),
            h - m + 18.0,
            tick(fx)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
            m - 6.0,
            sy(fy) + 4.0,
            tick(fy)
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, w / 2.0, h - 16.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        escape(y_label)
    );
    for (k, ser) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        for p in &pts {
            let (cx, cy) = p.split_once(',').expect("formatted pair");
            let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#);
        }
        let ly = m + 16.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" fill="{color}">{}</text>"#,
            w - m - 120.0,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{Categorical, Gmm, Predictive, PredictiveDistribution, TargetPrediction};
    use crate::synth::{synth_generate, GeneratorSpec};

    #[test]
    fn f1_hand_computed() {
        // Class 1: P = 1/2, R = 1, F1 = 2/3. Class 0: F1 = 0.
        assert!((metric_f1(&[1, 1, 1, 1], &[1, 0, 1, 0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(metric_f1(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert!(metric_f1(&[], &[]).is_err());
        assert!(metric_f1(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn rmse_hand_computed() {
        assert_eq!(metric_rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(metric_rmse(&[2.5, -1.0, 8.0], &[1.5, -2.0, 7.0]).unwrap(), 1.0);
        assert!(metric_rmse(&[], &[]).is_err());
    }

    /// Predicts the truth, read back from the first shot-free row lookup.
    struct Oracle(DatasetBundle);

    impl Predictor for Oracle {
        fn predict(&self, q: &Query) -> Result<PredictiveDistribution> {
            let row = self
                .0
                .rows
                .iter()
                .find(|r| {
                    q.instance
                        .observed
                        .iter()
                        .all(|f| r.value_of(f) == q.instance.value_of(f))
                        && q.targets.iter().all(|t| q.instance.value_of(t) == r.value_of(t))
                })
                .expect("row");
            let targets = q
                .targets
                .iter()
                .map(|t| {
                    let f = q.schema.require(t).unwrap().clone();
                    let dist = match row.value_of(t).unwrap() {
                        Value::Category(i) => {
                            let mut logits = vec![-30.0; f.choices.len()];
                            logits[i] = 0.0;
                            Predictive::Categorical(Categorical { logits })
                        }
                        Value::Continuous { norm, .. } => Predictive::Gmm(Gmm {
                            weights: vec![1.0],
                            means: vec![norm],
                            scales: vec![0.01],
                        }),
                    };
                    TargetPrediction { feature: f, dist }
                })
                .collect();
            Ok(PredictiveDistribution { targets })
        }
    }

    #[test]
    fn perfect_predictor_scores_one() {
        for family in ["categorical-bayes-net", "linear-gaussian"] {
            let mut b = synth_generate(&GeneratorSpec::by_name(family, 30).unwrap(), 1).unwrap();
            // Keep rows unique so the oracle lookup is exact.
            b.target_ids = vec!["y".into()];
            let test = b.with_rows(&[0]);
            let report = eval_few_shot(&Oracle(test.clone()), &b, &test, 3, &[0, 1, 2], "d").unwrap();
            assert_eq!(report.per_seed.len(), 3);
            let m = &report.mean.targets[0];
            match m.metric.as_str() {
                "f1" => assert_eq!(m.value, 1.0),
                _ => assert!(m.value < 1e-9),
            }
        }
    }

    #[test]
    fn too_many_shots_is_an_error() {
        let mut b = synth_generate(&GeneratorSpec::by_name("xor-style", 4).unwrap(), 1).unwrap();
        b.target_ids = vec!["y".into()];
        let e = eval_few_shot(&Oracle(b.clone()), &b, &b, 5, &[0], "d");
        assert!(matches!(e, Err(Error::Eval(_))));
    }

    #[test]
    fn svg_is_well_formed() {
        let svg = render_svg(
            "F1 <by> step",
            "step",
            "F1",
            &[Series {
                label: "copy".into(),
                points: vec![(0.0, 0.5), (1.0, 1.0)],
            }],
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("&lt;by&gt;"));
        assert_eq!(svg.matches("<circle").count(), 2);
    }
}
