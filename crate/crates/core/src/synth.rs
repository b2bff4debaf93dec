//! Synthetic dataset families with known generative processes.
//!
//! Every family exposes its ground truth through [`ground_truth`], so tests
//! can compare learned conditionals and acquisition scores with exact
//! values. Descriptions come from fixed word banks: the same role in the
//! same family always gets the same description, whatever the seed.
//!
//! | family                 | process                                                     |
//! |------------------------|-------------------------------------------------------------|
//! | `linear-gaussian`      | `x ~ U(0, 1)`, `y = slope·x + intercept + N(0, noise²)`      |
//! | `categorical-bayes-net`| binary net; `copy`: `y` fair, `x1 = y`, `x2` fair and independent; `noisy`: `x_i = y` flipped with probability `flips[i]`; `random`: `noisy` with seeded prior, flips and descriptions |
//! | `xor-style`            | `x1, x2` fair bits, `y = x1 ⊕ x2` flipped with probability `noise` |
//! | `mixed`                | `age ~ U(18, 90)`, `income = [age > 54]` flipped w.p. 0.1, `spend = 100 + 200·age_n + 150·income + N(0, 20²)` |

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::schema::{Atom, DatasetBundle, FeatureSpec, Instance, Schema, Value};
use crate::{Error, Result};

pub const BINARY: [&str; 2] = ["no", "yes"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NetKind {
    Copy,
    Noisy { prior: f64, flips: Vec<f64> },
    Random { n_features: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum Family {
    LinearGaussian {
        slope: f64,
        intercept: f64,
        noise: f64,
        theme: usize,
    },
    CategoricalBayesNet {
        net: NetKind,
    },
    XorStyle {
        noise: f64,
    },
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    #[serde(flatten)]
    pub family: Family,
    pub rows: usize,
    /// Prepended to every feature id (descriptions are unchanged).
    #[serde(default)]
    pub id_prefix: String,
}

pub const FAMILIES: [&str; 4] = ["linear-gaussian", "categorical-bayes-net", "xor-style", "mixed"];

impl GeneratorSpec {
    /// Default parameters for a family name. `categorical-bayes-net`
    /// defaults to the copy net.
    pub fn by_name(name: &str, rows: usize) -> Result<Self> {
        let family = match name {
            "linear-gaussian" => Family::LinearGaussian {
                slope: 1.0,
                intercept: 0.0,
                noise: 0.1,
                theme: 0,
            },
            "categorical-bayes-net" | "copy" => Family::CategoricalBayesNet { net: NetKind::Copy },
            "random-bayes-net" => Family::CategoricalBayesNet {
                net: NetKind::Random { n_features: 4 },
            },
            "xor-style" => Family::XorStyle { noise: 0.0 },
            "mixed" => Family::Mixed,
            other => return Err(Error::UnknownFamily(other.to_string())),
        };
        Ok(Self {
            family,
            rows,
            id_prefix: String::new(),
        })
    }

    pub fn family_name(&self) -> &'static str {
        match self.family {
            Family::LinearGaussian { .. } => "linear-gaussian",
            Family::CategoricalBayesNet { .. } => "categorical-bayes-net",
            Family::XorStyle { .. } => "xor-style",
            Family::Mixed => "mixed",
        }
    }

    pub fn with_prefix(mut self, prefix: &str) -> Self {
        self.id_prefix = prefix.to_string();
        self
    }
}

const LG_THEMES: [(&str, &str, &str); 4] = [
    (
        "hours of daily physical activity",
        "cardiovascular fitness score",
        "Wellness study relating daily activity to measured fitness.",
    ),
    (
        "average nightly sleep duration",
        "next day reaction speed",
        "Sleep laboratory log of rest and alertness.",
    ),
    (
        "monthly fertilizer applied per hectare",
        "seasonal crop yield",
        "Agricultural trial plots with varying fertilizer.",
    ),
    (
        "weekly advertising spend",
        "store foot traffic index",
        "Retail marketing records by store and week.",
    ),
];

const ADJECTIVES: [&str; 24] = [
    "coastal", "northern", "urban", "rural", "alpine", "desert", "river", "harbor", "forest", "valley",
    "island", "prairie", "canyon", "meadow", "glacier", "tropical", "volcanic", "marsh", "tundra",
    "savanna", "orchard", "vineyard", "mining", "fishing",
];

const NOUNS: [&str; 24] = [
    "rainfall", "pollen", "traffic", "vaccination", "broadband", "library", "ferry", "market",
    "clinic", "school", "bakery", "pharmacy", "stadium", "airport", "museum", "factory", "harvest",
    "tourism", "wildfire", "drought", "election", "festival", "railway", "warehouse",
];

const QUALIFIERS: [&str; 8] = [
    "alert raised", "record high", "inspection passed", "permit issued", "survey flagged",
    "sensor tripped", "report filed", "quota exceeded",
];

fn binary_spec(id: String, desc: String) -> FeatureSpec {
    FeatureSpec {
        id,
        desc,
        ftype: crate::FeatureType::Categorical,
        choices: BINARY.iter().map(|s| s.to_string()).collect(),
        range: None,
        cost: 1.0,
    }
}

/// Binary variables with conditional probability tables.
#[derive(Clone, Debug, PartialEq)]
pub struct BayesNet {
    pub ids: Vec<String>,
    pub descs: Vec<String>,
    pub context: String,
    /// Parents of each node, all with smaller index.
    pub parents: Vec<Vec<usize>>,
    /// `P(node = 1 | parent assignment)`, parent assignments in binary order
    /// with the first parent as most significant bit.
    pub cpt: Vec<Vec<f64>>,
}

impl BayesNet {
    fn p_one(&self, node: usize, assignment: &[usize]) -> f64 {
        let mut k = 0;
        for &p in &self.parents[node] {
            k = 2 * k + assignment[p];
        }
        self.cpt[node][k]
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let mut a = vec![0; self.ids.len()];
        for i in 0..self.ids.len() {
            a[i] = usize::from(rng.random::<f64>() < self.p_one(i, &a));
        }
        a
    }

    /// Exact joint by enumeration.
    pub fn joint(&self) -> DiscreteJoint {
        let n = self.ids.len();
        let mut probs = vec![0.0; 1 << n];
        let mut a = vec![0; n];
        for (code, p) in probs.iter_mut().enumerate() {
            for (i, ai) in a.iter_mut().enumerate() {
                *ai = (code >> (n - 1 - i)) & 1;
            }
            *p = (0..n)
                .map(|i| {
                    let q = self.p_one(i, &a);
                    if a[i] == 1 {
                        q
                    } else {
                        1.0 - q
                    }
                })
                .product();
        }
        DiscreteJoint {
            ids: self.ids.clone(),
            cards: vec![2; n],
            probs,
        }
    }
}

/// Exact joint distribution over a few discrete variables, row-major with
/// the first variable most significant.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteJoint {
    pub ids: Vec<String>,
    pub cards: Vec<usize>,
    pub probs: Vec<f64>,
}

impl DiscreteJoint {
    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    fn decode(&self, mut code: usize) -> Vec<usize> {
        let mut out = vec![0; self.cards.len()];
        for i in (0..self.cards.len()).rev() {
            out[i] = code % self.cards[i];
            code /= self.cards[i];
        }
        out
    }

    /// Marginal over `vars`, keyed by their joint assignment.
    pub fn marginal(&self, vars: &[usize]) -> std::collections::BTreeMap<Vec<usize>, f64> {
        let mut m = std::collections::BTreeMap::new();
        for (code, &p) in self.probs.iter().enumerate() {
            let a = self.decode(code);
            let key: Vec<usize> = vars.iter().map(|&v| a[v]).collect();
            *m.entry(key).or_insert(0.0) += p;
        }
        m
    }

    /// Entropy in nats of the marginal over `vars`.
    pub fn entropy(&self, vars: &[usize]) -> f64 {
        self.marginal(vars)
            .values()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }

    /// `I(a; b | given)` in nats.
    pub fn conditional_mi(&self, a: &[usize], b: &[usize], given: &[usize]) -> f64 {
        let cat = |xs: &[&[usize]]| -> Vec<usize> { xs.iter().flat_map(|x| x.iter().copied()).collect() };
        self.entropy(&cat(&[a, given])) + self.entropy(&cat(&[b, given]))
            - self.entropy(&cat(&[a, b, given]))
            - self.entropy(given)
    }

    pub fn mutual_information(&self, a: &[usize], b: &[usize]) -> f64 {
        self.conditional_mi(a, b, &[])
    }

    /// `P(target | evidence)` as a probability vector.
    pub fn conditional(&self, target: usize, evidence: &[(usize, usize)]) -> Vec<f64> {
        let mut out = vec![0.0; self.cards[target]];
        for (code, &p) in self.probs.iter().enumerate() {
            let a = self.decode(code);
            if evidence.iter().all(|&(v, x)| a[v] == x) {
                out[a[target]] += p;
            }
        }
        let z: f64 = out.iter().sum();
        out.iter().map(|x| x / z).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearGaussianTruth {
    pub slope: f64,
    pub intercept: f64,
    pub noise: f64,
    pub x: FeatureSpec,
    pub y: FeatureSpec,
}

impl LinearGaussianTruth {
    /// Mean and standard deviation of `y | x` in normalised `y` units.
    pub fn conditional_normalized(&self, x_raw: f64) -> (f64, f64) {
        let (lo, hi) = self.y.range.expect("continuous target");
        let mean = self.slope * x_raw + self.intercept;
        ((mean - lo) / (hi - lo), self.noise / (hi - lo))
    }

    /// Expected negative log density of `y | x` in normalised units, which
    /// does not depend on `x`: `½·ln(2πs²) + ½`.
    pub fn oracle_conditional_nll(&self) -> f64 {
        let s = self.noise / self.y.span();
        0.5 * (2.0 * std::f64::consts::PI * s * s).ln() + 0.5
    }

    /// Negative log density of `y | x` in normalised `y` units.
    pub fn conditional_nll(&self, x_raw: f64, y_raw: f64) -> f64 {
        let (m, s) = self.conditional_normalized(x_raw);
        let (lo, hi) = self.y.range.unwrap();
        let z = ((y_raw - lo) / (hi - lo) - m) / s;
        0.5 * z * z + s.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GroundTruth {
    LinearGaussian(LinearGaussianTruth),
    Discrete(BayesNet),
    Mixed,
}

fn prefixed(prefix: &str, id: &str) -> String {
    format!("{prefix}{id}")
}

fn linear_gaussian_specs(slope: f64, intercept: f64, noise: f64, theme: usize, prefix: &str) -> (FeatureSpec, FeatureSpec, &'static str) {
    let (xd, yd, ctx) = LG_THEMES[theme % LG_THEMES.len()];
    let lo = intercept.min(slope + intercept) - 5.0 * noise;
    let hi = intercept.max(slope + intercept) + 5.0 * noise;
    (
        FeatureSpec::continuous(&prefixed(prefix, "x"), xd, 0.0, 1.0),
        FeatureSpec::continuous(&prefixed(prefix, "y"), yd, lo, hi),
        ctx,
    )
}

fn build_net(kind: &NetKind, seed: u64, prefix: &str) -> Result<BayesNet> {
    let p = |id: &str| prefixed(prefix, id);
    match kind {
        NetKind::Copy => Ok(BayesNet {
            ids: vec![p("y"), p("x1"), p("x2")],
            descs: vec![
                "customer renewed subscription".into(),
                "renewal flag recorded by billing".into(),
                "customer birth month is even".into(),
            ],
            context: "Subscription renewals with a billing system flag.".into(),
            parents: vec![vec![], vec![0], vec![]],
            cpt: vec![vec![0.5], vec![0.0, 1.0], vec![0.5]],
        }),
        NetKind::Noisy { prior, flips } => {
            if flips.is_empty() || flips.len() > 8 {
                return Err(Error::Dataset("noisy net needs 1..=8 children".into()));
            }
            let mut ids = vec![p("y")];
            let mut descs = vec!["equipment failure reported".to_string()];
            let mut parents = vec![vec![]];
            let mut cpt = vec![vec![*prior]];
            for (i, f) in flips.iter().enumerate() {
                ids.push(p(&format!("x{}", i + 1)));
                descs.push(format!("{} {}", NOUNS[i % NOUNS.len()], QUALIFIERS[i % QUALIFIERS.len()]));
                parents.push(vec![0]);
                cpt.push(vec![*f, 1.0 - f]);
            }
            Ok(BayesNet {
                ids,
                descs,
                context: "Maintenance log with noisy indicators of failure.".into(),
                parents,
                cpt,
            })
        }
        NetKind::Random { n_features } => {
            if *n_features == 0 || *n_features > 8 {
                return Err(Error::Dataset("random net needs 1..=8 features".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e65_7473);
            let prior = rng.random_range(0.3..0.7);
            // Evenly spaced flip levels, shuffled, so MI values are well separated.
            let mut flips: Vec<f64> = (0..*n_features)
                .map(|i| 0.03 + 0.44 * i as f64 / (*n_features as f64 - 1.0).max(1.0))
                .collect();
            flips.shuffle(&mut rng);
            let place = ADJECTIVES[rng.random_range(0..ADJECTIVES.len())];
            let mut nouns: Vec<&str> = NOUNS.to_vec();
            nouns.shuffle(&mut rng);
            let target_noun = nouns[0];
            let mut ids = vec![p("y")];
            let mut descs = vec![format!("{place} {target_noun} disruption this week")];
            let mut parents = vec![vec![]];
            let mut cpt = vec![vec![prior]];
            for (i, f) in flips.iter().enumerate() {
                ids.push(p(&format!("x{}", i + 1)));
                let q = QUALIFIERS[rng.random_range(0..QUALIFIERS.len())];
                descs.push(format!("{place} {} {q}", nouns[i + 1]));
                parents.push(vec![0]);
                cpt.push(vec![*f, 1.0 - f]);
            }
            Ok(BayesNet {
                ids,
                descs,
                context: format!("Weekly {place} {target_noun} monitoring panel."),
                parents,
                cpt,
            })
        }
    }
}

fn xor_net(noise: f64, prefix: &str) -> BayesNet {
    let p = |id: &str| prefixed(prefix, id);
    BayesNet {
        ids: vec![p("x1"), p("x2"), p("y")],
        descs: vec![
            "first coin shows heads".into(),
            "second coin shows heads".into(),
            "the two coins disagree".into(),
        ],
        context: "Paired coin tosses and whether they match.".into(),
        parents: vec![vec![], vec![], vec![0, 1]],
        cpt: vec![vec![0.5], vec![0.5], vec![noise, 1.0 - noise, 1.0 - noise, noise]],
    }
}

/// Parameters of the generator for `(spec, seed)`.
pub fn ground_truth(spec: &GeneratorSpec, seed: u64) -> Result<GroundTruth> {
    Ok(match &spec.family {
        Family::LinearGaussian {
            slope,
            intercept,
            noise,
            theme,
        } => {
            let (x, y, _) = linear_gaussian_specs(*slope, *intercept, *noise, *theme, &spec.id_prefix);
            GroundTruth::LinearGaussian(LinearGaussianTruth {
                slope: *slope,
                intercept: *intercept,
                noise: *noise,
                x,
                y,
            })
        }
        Family::CategoricalBayesNet { net } => GroundTruth::Discrete(build_net(net, seed, &spec.id_prefix)?),
        Family::XorStyle { noise } => GroundTruth::Discrete(xor_net(*noise, &spec.id_prefix)),
        Family::Mixed => GroundTruth::Mixed,
    })
}

fn net_bundle(net: &BayesNet, name: String, rows: usize, rng: &mut ChaCha8Rng, target: &str) -> DatasetBundle {
    let features: Vec<FeatureSpec> = net
        .ids
        .iter()
        .zip(&net.descs)
        .map(|(id, d)| binary_spec(id.clone(), d.clone()))
        .collect();
    let rows = (0..rows)
        .map(|_| {
            let a = net.sample(rng);
            Instance::fully_observed(
                net.ids
                    .iter()
                    .zip(a)
                    .map(|(id, v)| Atom {
                        feature: id.clone(),
                        value: Some(Value::Category(v)),
                    })
                    .collect(),
            )
        })
        .collect();
    DatasetBundle {
        schema: Schema {
            name,
            context: net.context.clone(),
            features,
        },
        rows,
        target_ids: vec![target.to_string()],
    }
}

/// Draw a bundle. Identical `(spec, seed)` always gives an identical bundle.
pub fn synth_generate(spec: &GeneratorSpec, seed: u64) -> Result<DatasetBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let name = format!("{}{}-{seed}", spec.id_prefix, spec.family_name());
    let target = prefixed(&spec.id_prefix, "y");
    match (&spec.family, ground_truth(spec, seed)?) {
        (Family::LinearGaussian { .. }, GroundTruth::LinearGaussian(t)) => {
            let (_, _, ctx) = match spec.family {
                Family::LinearGaussian {
                    slope,
                    intercept,
                    noise,
                    theme,
                } => linear_gaussian_specs(slope, intercept, noise, theme, &spec.id_prefix),
                _ => unreachable!(),
            };
            let eps = Normal::new(0.0, t.noise).map_err(|e| Error::Dataset(e.to_string()))?;
            let rows = (0..spec.rows)
                .map(|_| {
                    let x: f64 = rng.random();
                    let y = t.slope * x + t.intercept + eps.sample(&mut rng);
                    Instance::fully_observed(vec![
                        Atom {
                            feature: t.x.id.clone(),
                            value: Some(t.x.continuous_value(x).0),
                        },
                        Atom {
                            feature: t.y.id.clone(),
                            value: Some(t.y.continuous_value(y).0),
                        },
                    ])
                })
                .collect();
            Ok(DatasetBundle {
                schema: Schema {
                    name,
                    context: ctx.to_string(),
                    features: vec![t.x.clone(), t.y.clone()],
                },
                rows,
                target_ids: vec![target],
            })
        }
        (_, GroundTruth::Discrete(net)) => Ok(net_bundle(&net, name, spec.rows, &mut rng, &target)),
        (Family::Mixed, _) => {
            let p = |id: &str| prefixed(&spec.id_prefix, id);
            let age = FeatureSpec::continuous(&p("age"), "customer age in years", 18.0, 90.0);
            let income = FeatureSpec::categorical(&p("income"), "household income bracket", &["low", "high"]);
            let spend = FeatureSpec::continuous(&p("y"), "monthly spending in dollars", 0.0, 600.0);
            let eps = Normal::new(0.0, 20.0).unwrap();
            let rows = (0..spec.rows)
                .map(|_| {
                    let a_n: f64 = rng.random();
                    let mut hi = a_n > 0.5;
                    if rng.random::<f64>() < 0.1 {
                        hi = !hi;
                    }
                    let s = 100.0 + 200.0 * a_n + if hi { 150.0 } else { 0.0 } + eps.sample(&mut rng);
                    Instance::fully_observed(vec![
                        Atom {
                            feature: age.id.clone(),
                            value: Some(age.continuous_value(age.denormalize(a_n)).0),
                        },
                        Atom {
                            feature: income.id.clone(),
                            value: Some(Value::Category(usize::from(hi))),
                        },
                        Atom {
                            feature: spend.id.clone(),
                            value: Some(spend.continuous_value(s).0),
                        },
                    ])
                })
                .collect();
            Ok(DatasetBundle {
                schema: Schema {
                    name,
                    context: "Retail customers with age, income bracket and spending.".into(),
                    features: vec![age, income, spend],
                },
                rows,
                target_ids: vec![target],
            })
        }
        _ => unreachable!("family and ground truth disagree"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bundle() {
        for fam in FAMILIES {
            let spec = GeneratorSpec::by_name(fam, 50).unwrap();
            assert_eq!(synth_generate(&spec, 7).unwrap(), synth_generate(&spec, 7).unwrap());
            assert_ne!(synth_generate(&spec, 7).unwrap().rows, synth_generate(&spec, 8).unwrap().rows);
        }
        assert!(matches!(GeneratorSpec::by_name("nope", 1), Err(Error::UnknownFamily(_))));
    }

    #[test]
    fn copy_net_information() {
        let spec = GeneratorSpec::by_name("categorical-bayes-net", 10).unwrap();
        let GroundTruth::Discrete(net) = ground_truth(&spec, 0).unwrap() else { panic!() };
        let j = net.joint();
        let (y, x1, x2) = (0, 1, 2);
        let hy = j.entropy(&[y]);
        assert!((hy - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((j.mutual_information(&[y], &[x1]) - hy).abs() < 1e-12);
        assert!(j.mutual_information(&[y], &[x2]).abs() < 1e-12);
    }

    #[test]
    fn xor_information() {
        let spec = GeneratorSpec::by_name("xor-style", 10).unwrap();
        let GroundTruth::Discrete(net) = ground_truth(&spec, 0).unwrap() else { panic!() };
        let j = net.joint();
        assert!(j.mutual_information(&[2], &[0]).abs() < 1e-12);
        // One bit, in nats.
        assert!((j.mutual_information(&[2], &[0, 1]) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn linear_gaussian_oracle() {
        let spec = GeneratorSpec::by_name("linear-gaussian", 10).unwrap();
        let GroundTruth::LinearGaussian(t) = ground_truth(&spec, 0).unwrap() else { panic!() };
        assert_eq!(t.y.range, Some((-0.5, 1.5)));
        let (m, s) = t.conditional_normalized(0.5);
        assert!((m - 0.5).abs() < 1e-12);
        assert!((s - 0.05).abs() < 1e-12);
        // p(y | x) = N(x, 0.1²) in raw units: expected NLL in normalised units.
        let expected = 0.5 * (2.0 * std::f64::consts::PI * 0.05f64.powi(2)).ln() + 0.5;
        assert!((t.oracle_conditional_nll() - expected).abs() < 1e-12);
    }

    #[test]
    fn prefix_renames_ids_only() {
        let a = synth_generate(&GeneratorSpec::by_name("mixed", 5).unwrap(), 1).unwrap();
        let b = synth_generate(&GeneratorSpec::by_name("mixed", 5).unwrap().with_prefix("z_"), 1).unwrap();
        for (fa, fb) in a.features().iter().zip(b.features()) {
            assert_eq!(fb.id, format!("z_{}", fa.id));
            assert_eq!(fa.desc, fb.desc);
        }
    }

    #[test]
    fn random_nets_have_separated_information() {
        for seed in 0..10 {
            let spec = GeneratorSpec::by_name("random-bayes-net", 10).unwrap();
            let GroundTruth::Discrete(net) = ground_truth(&spec, seed).unwrap() else { panic!() };
            let j = net.joint();
            let mut mis: Vec<f64> = (1..5).map(|i| j.mutual_information(&[0], &[i])).collect();
            mis.sort_by(f64::total_cmp);
            for w in mis.windows(2) {
                assert!(w[1] - w[0] > 0.02, "seed {seed}: {mis:?}");
            }
        }
    }
}
