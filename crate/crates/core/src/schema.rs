//! Feature metadata, dataset bundles and the samplers used for training.
//!
//! # Dataset file
//!
//! A bundle is stored as one JSON object:
//!
//! ```json
//! {
//!   "name": "clinic",
//!   "context": "Outpatient visits at a rural clinic.",
//!   "features": [
//!     {"id": "age", "desc": "patient age in years", "type": "continuous", "range": [0, 100]},
//!     {"id": "smoker", "desc": "current smoker", "type": "categorical",
//!      "choices": ["no", "yes"], "cost": 2.0}
//!   ],
//!   "rows": [{"values": {"age": 42, "smoker": "no"}}],
//!   "targets": ["smoker"]
//! }
//! ```
//!
//! `cost` defaults to 1.0 and `targets` to empty. Categorical values are
//! category strings, continuous values are raw numbers; a feature absent
//! from a row's `values` is missing for that row. Continuous values are
//! normalised with the declared range and clamped to `[0, 1]`, keeping the
//! raw value.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureType {
    Categorical,
    Continuous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub id: String,
    pub desc: String,
    #[serde(rename = "type")]
    pub ftype: FeatureType,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub choices: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<(f64, f64)>,
    #[serde(default = "default_cost", skip_serializing_if = "is_default_cost")]
    pub cost: f64,
}

fn default_cost() -> f64 {
    1.0
}

fn is_default_cost(c: &f64) -> bool {
    *c == 1.0
}

impl FeatureSpec {
    pub fn continuous(id: &str, desc: &str, min: f64, max: f64) -> Self {
        Self {
            id: id.into(),
            desc: desc.into(),
            ftype: FeatureType::Continuous,
            choices: Vec::new(),
            range: Some((min, max)),
            cost: 1.0,
        }
    }

    pub fn categorical(id: &str, desc: &str, choices: &[&str]) -> Self {
        Self {
            id: id.into(),
            desc: desc.into(),
            ftype: FeatureType::Categorical,
            choices: choices.iter().map(|c| c.to_string()).collect(),
            range: None,
            cost: 1.0,
        }
    }

    pub fn with_cost(mut self, cost: f64) -> Self {
        self.cost = cost;
        self
    }

    fn invalid(&self, msg: impl Into<String>) -> Error {
        Error::InvalidFeature {
            feature: self.id.clone(),
            msg: msg.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(self.invalid("empty id"));
        }
        if self.desc.trim().is_empty() {
            return Err(self.invalid("missing description"));
        }
        if !(self.cost >= 0.0 && self.cost.is_finite()) {
            return Err(self.invalid(format!("cost must be a non-negative number, got {}", self.cost)));
        }
        match self.ftype {
            FeatureType::Categorical => {
                if self.choices.is_empty() {
                    return Err(self.invalid("categorical feature without choices"));
                }
                let mut seen = BTreeSet::new();
                for c in &self.choices {
                    if c.trim().is_empty() {
                        return Err(self.invalid("empty category string"));
                    }
                    if !seen.insert(c) {
                        return Err(self.invalid(format!("duplicate category `{c}`")));
                    }
                }
                if self.range.is_some() {
                    return Err(self.invalid("categorical feature with a range"));
                }
            }
            FeatureType::Continuous => match self.range {
                Some((lo, hi)) if lo.is_finite() && hi.is_finite() && lo < hi => {}
                Some((lo, hi)) => return Err(self.invalid(format!("range ({lo}, {hi}) needs min < max"))),
                None => return Err(self.invalid("continuous feature without a range")),
            },
        }
        Ok(())
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.choices.iter().position(|c| c == name)
    }

    /// `max - min` of the normalisation range (1.0 for categorical).
    pub fn span(&self) -> f64 {
        self.range.map_or(1.0, |(lo, hi)| hi - lo)
    }

    /// Normalised value and whether it was clamped.
    pub fn normalize(&self, raw: f64) -> (f64, bool) {
        let (lo, hi) = self.range.unwrap_or((0.0, 1.0));
        let x = (raw - lo) / (hi - lo);
        let c = x.clamp(0.0, 1.0);
        (c, c != x)
    }

    pub fn denormalize(&self, norm: f64) -> f64 {
        let (lo, hi) = self.range.unwrap_or((0.0, 1.0));
        lo + norm * (hi - lo)
    }

    /// Build a value from its raw JSON form.
    pub fn value_from_json(&self, raw: &serde_json::Value) -> Result<(Value, bool)> {
        let err = |msg: String| Error::InvalidValue {
            feature: self.id.clone(),
            msg,
        };
        match self.ftype {
            FeatureType::Categorical => {
                let s = raw
                    .as_str()
                    .ok_or_else(|| err(format!("expected a category string, got {raw}")))?;
                let idx = self
                    .category_index(s)
                    .ok_or_else(|| err(format!("`{s}` is not one of {:?}", self.choices)))?;
                Ok((Value::Category(idx), false))
            }
            FeatureType::Continuous => {
                let x = raw
                    .as_f64()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| err(format!("expected a finite number, got {raw}")))?;
                Ok(self.continuous_value(x))
            }
        }
    }

    pub fn continuous_value(&self, raw: f64) -> (Value, bool) {
        let (norm, clamped) = self.normalize(raw);
        (Value::Continuous { raw, norm }, clamped)
    }

    pub fn value_to_json(&self, v: &Value) -> serde_json::Value {
        match v {
            Value::Category(i) => serde_json::Value::String(self.choices[*i].clone()),
            Value::Continuous { raw, .. } => serde_json::json!(raw),
        }
    }

    /// Check that `v` fits this feature's type and vocabulary.
    pub fn check_value(&self, v: &Value) -> Result<()> {
        let bad = |msg: &str| Error::InvalidValue {
            feature: self.id.clone(),
            msg: msg.into(),
        };
        match (self.ftype, v) {
            (FeatureType::Categorical, Value::Category(i)) if *i < self.choices.len() => Ok(()),
            (FeatureType::Categorical, Value::Category(_)) => Err(bad("category index out of range")),
            (FeatureType::Continuous, Value::Continuous { norm, .. }) if (0.0..=1.0).contains(norm) => Ok(()),
            (FeatureType::Continuous, Value::Continuous { .. }) => Err(bad("normalized value outside [0, 1]")),
            _ => Err(bad("value type does not match feature type")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Value {
    /// Index into the feature's `choices`.
    Category(usize),
    /// Raw value and its clamped normalisation to `[0, 1]`.
    Continuous { raw: f64, norm: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Atom {
    pub feature: String,
    /// `None` when the value is unknown (an inference-time target).
    pub value: Option<Value>,
}

/// A row: an unordered set of atoms plus the subset that is observed.
///
/// Atom order carries no meaning; it is kept only so callers can map model
/// outputs back to inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub atoms: Vec<Atom>,
    pub observed: BTreeSet<String>,
}

impl Instance {
    /// Every atom with a value is observed.
    pub fn fully_observed(atoms: Vec<Atom>) -> Self {
        let observed = atoms
            .iter()
            .filter(|a| a.value.is_some())
            .map(|a| a.feature.clone())
            .collect();
        Self { atoms, observed }
    }

    pub fn with_observed(&self, observed: BTreeSet<String>) -> Self {
        Self {
            atoms: self.atoms.clone(),
            observed,
        }
    }

    pub fn atom(&self, feature: &str) -> Option<&Atom> {
        self.atoms.iter().find(|a| a.feature == feature)
    }

    pub fn value_of(&self, feature: &str) -> Option<Value> {
        self.atom(feature).and_then(|a| a.value)
    }

    pub fn is_observed(&self, feature: &str) -> bool {
        self.observed.contains(feature)
    }

    pub fn unobserved(&self) -> Vec<&str> {
        self.atoms
            .iter()
            .filter(|a| !self.observed.contains(&a.feature))
            .map(|a| a.feature.as_str())
            .collect()
    }

    pub fn is_fully_observed(&self) -> bool {
        self.atoms
            .iter()
            .all(|a| a.value.is_some() && self.observed.contains(&a.feature))
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Observed ⊆ atoms with values; no duplicate feature ids.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for a in &self.atoms {
            if !seen.insert(a.feature.as_str()) {
                return Err(Error::Dataset(format!("duplicate atom for feature `{}`", a.feature)));
            }
        }
        for o in &self.observed {
            match self.atom(o) {
                Some(a) if a.value.is_some() => {}
                Some(_) => return Err(Error::Dataset(format!("observed feature `{o}` has no value"))),
                None => return Err(Error::Dataset(format!("observed feature `{o}` is not an atom"))),
            }
        }
        Ok(())
    }
}

/// Schema-level view of a dataset: everything except the rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub name: String,
    pub context: String,
    pub features: Vec<FeatureSpec>,
}

impl Schema {
    pub fn feature(&self, id: &str) -> Option<&FeatureSpec> {
        self.features.iter().find(|f| f.id == id)
    }

    pub fn require(&self, id: &str) -> Result<&FeatureSpec> {
        self.feature(id).ok_or_else(|| Error::UnknownFeature(id.to_string()))
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.features.iter().position(|f| f.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for f in &self.features {
            f.validate()?;
            if !seen.insert(f.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate feature id `{}`", f.id)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub schema: Schema,
    pub rows: Vec<Instance>,
    pub target_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadWarning {
    pub row: usize,
    pub feature: String,
    pub message: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct FileBundle {
    name: String,
    context: String,
    features: Vec<FeatureSpec>,
    rows: Vec<FileRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    targets: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct FileRow {
    values: RowValues,
}

/// Row values in file order; unlike a map, duplicate keys are preserved so
/// they can be rejected.
#[derive(Clone, Debug)]
struct RowValues(Vec<(String, serde_json::Value)>);

impl Serialize for RowValues {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut m = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            m.serialize_entry(k, v)?;
        }
        m.end()
    }
}

impl<'de> Deserialize<'de> for RowValues {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = RowValues;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map of feature id to value")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<RowValues, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, serde_json::Value>()? {
                    out.push((k, v));
                }
                Ok(RowValues(out))
            }
        }
        d.deserialize_map(V)
    }
}

impl DatasetBundle {
    pub fn name(&self) -> &str {
        &self.schema.name
    }

    pub fn features(&self) -> &[FeatureSpec] {
        &self.schema.features
    }

    /// Parse and validate a bundle from its JSON text.
    pub fn from_json_str(text: &str) -> Result<(Self, Vec<LoadWarning>)> {
        let file: FileBundle = serde_json::from_str(text)?;
        let schema = Schema {
            name: file.name,
            context: file.context,
            features: file.features,
        };
        schema.validate()?;
        let mut warnings = Vec::new();
        let mut rows = Vec::with_capacity(file.rows.len());
        for (ri, row) in file.rows.into_iter().enumerate() {
            let mut atoms: Vec<Option<Value>> = vec![None; schema.features.len()];
            let mut present = vec![false; schema.features.len()];
            for (fid, raw) in row.values.0 {
                let pos = schema.position(&fid).ok_or_else(|| Error::Row {
                    row: ri,
                    feature: fid.clone(),
                    msg: "unknown feature id".into(),
                })?;
                if present[pos] {
                    return Err(Error::Row {
                        row: ri,
                        feature: fid,
                        msg: "duplicate value".into(),
                    });
                }
                present[pos] = true;
                if raw.is_null() {
                    continue;
                }
                let spec = &schema.features[pos];
                let (value, clamped) = spec.value_from_json(&raw).map_err(|e| Error::Row {
                    row: ri,
                    feature: fid.clone(),
                    msg: match e {
                        Error::InvalidValue { msg, .. } => msg,
                        other => other.to_string(),
                    },
                })?;
                if clamped {
                    let message = format!("value {raw} outside range {:?}; clamped", spec.range.unwrap());
                    log::warn!("row {ri}, feature `{fid}`: {message}");
                    warnings.push(LoadWarning {
                        row: ri,
                        feature: fid,
                        message,
                    });
                }
                atoms[pos] = Some(value);
            }
            // Atoms follow schema order regardless of file order.
            let atoms = schema
                .features
                .iter()
                .zip(atoms)
                .filter_map(|(f, v)| {
                    v.map(|v| Atom {
                        feature: f.id.clone(),
                        value: Some(v),
                    })
                })
                .collect();
            rows.push(Instance::fully_observed(atoms));
        }
        for t in &file.targets {
            schema.require(t)?;
        }
        Ok((
            Self {
                schema,
                rows,
                target_ids: file.targets,
            },
            warnings,
        ))
    }

    pub fn to_json_string(&self) -> Result<String> {
        let rows = self
            .rows
            .iter()
            .map(|inst| {
                let values = inst
                    .atoms
                    .iter()
                    .filter_map(|a| {
                        let spec = self.schema.feature(&a.feature)?;
                        a.value.map(|v| (a.feature.clone(), spec.value_to_json(&v)))
                    })
                    .collect();
                FileRow {
                    values: RowValues(values),
                }
            })
            .collect();
        let file = FileBundle {
            name: self.schema.name.clone(),
            context: self.schema.context.clone(),
            features: self.schema.features.clone(),
            rows,
            targets: self.target_ids.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    /// Subset of rows by index, sharing the schema.
    pub fn with_rows(&self, idx: &[usize]) -> Self {
        Self {
            schema: self.schema.clone(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            target_ids: self.target_ids.clone(),
        }
    }
}

pub fn load_dataset(path: &Path) -> Result<DatasetBundle> {
    Ok(load_dataset_with_warnings(path)?.0)
}

pub fn load_dataset_with_warnings(path: &Path) -> Result<(DatasetBundle, Vec<LoadWarning>)> {
    DatasetBundle::from_json_str(&std::fs::read_to_string(path)?)
}

#[derive(Deserialize)]
struct Sidecar {
    name: String,
    context: String,
    features: Vec<FeatureSpec>,
    #[serde(default)]
    targets: Vec<String>,
}

/// Load a CSV whose header row names feature ids, with the schema in a
/// sidecar JSON file (`name`, `context`, `features`, optional `targets`).
/// Empty cells are missing values; continuous cells must parse as numbers.
pub fn load_csv(csv_path: &Path, sidecar_path: &Path) -> Result<(DatasetBundle, Vec<LoadWarning>)> {
    let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path)?)?;
    let mut reader = csv::Reader::from_path(csv_path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let specs: Vec<FeatureSpec> = sidecar.features.clone();
    let mut rows = Vec::new();
    for (ri, rec) in reader.records().enumerate() {
        let rec = rec?;
        let mut values = Vec::new();
        for (col, cell) in header.iter().zip(rec.iter()) {
            let cell = cell.trim();
            if cell.is_empty() {
                continue;
            }
            let raw = match specs.iter().find(|f| &f.id == col).map(|f| f.ftype) {
                Some(FeatureType::Continuous) => match cell.parse::<f64>() {
                    Ok(x) => serde_json::json!(x),
                    Err(_) => {
                        return Err(Error::Row {
                            row: ri,
                            feature: col.clone(),
                            msg: format!("malformed number `{cell}`"),
                        })
                    }
                },
                _ => serde_json::Value::String(cell.to_string()),
            };
            values.push((col.clone(), raw));
        }
        rows.push(FileRow {
            values: RowValues(values),
        });
    }
    let file = FileBundle {
        name: sidecar.name,
        context: sidecar.context,
        features: sidecar.features,
        rows,
        targets: sidecar.targets,
    };
    DatasetBundle::from_json_str(&serde_json::to_string(&file)?)
}

/// Distribution over observed subsets, `P(o | e)`.
pub trait MaskSampler {
    fn sample<R: Rng + ?Sized>(&self, instance: &Instance, rng: &mut R) -> Result<BTreeSet<String>>;
}

/// Size uniform on `{0, …, M−1}`, then a uniform subset of that size. At
/// least one atom always stays unobserved.
#[derive(Clone, Copy, Debug, Default)]
pub struct UniformSizeMask;

impl MaskSampler for UniformSizeMask {
    fn sample<R: Rng + ?Sized>(&self, instance: &Instance, rng: &mut R) -> Result<BTreeSet<String>> {
        let candidates: Vec<&Atom> = instance.atoms.iter().filter(|a| a.value.is_some()).collect();
        let m = candidates.len();
        if m == 0 {
            return Err(Error::Sampling("cannot mask an instance with no atoms".into()));
        }
        let size = rng.random_range(0..m);
        let picked = sample_indices(rng, m, size);
        Ok(picked.into_iter().map(|i| candidates[i].feature.clone()).collect())
    }
}

/// Observed subset drawn with [`UniformSizeMask`].
pub fn sample_mask<R: Rng + ?Sized>(instance: &Instance, rng: &mut R) -> Result<BTreeSet<String>> {
    UniformSizeMask.sample(instance, rng)
}

/// Shot count uniform on `{0, …, smax}`, then that many distinct row indices
/// from `0..n_rows` excluding `exclude`.
pub fn sample_shot_indices<R: Rng + ?Sized>(
    n_rows: usize,
    exclude: Option<usize>,
    rng: &mut R,
    smax: usize,
) -> Result<Vec<usize>> {
    let available = n_rows - usize::from(exclude.is_some_and(|e| e < n_rows));
    if available < smax {
        return Err(Error::Sampling(format!(
            "need {smax} shot rows but only {available} are available"
        )));
    }
    let s = rng.random_range(0..=smax);
    let picked = sample_indices(rng, available, s);
    Ok(picked
        .into_iter()
        .map(|i| match exclude {
            Some(e) if i >= e => i + 1,
            _ => i,
        })
        .collect())
}

/// Fully observed shots from `rows`, never including `rows[exclude]`.
pub fn sample_shots<R: Rng + ?Sized>(
    rows: &[Instance],
    exclude: Option<usize>,
    rng: &mut R,
    smax: usize,
) -> Result<Vec<Instance>> {
    let idx = sample_shot_indices(rows.len(), exclude, rng, smax)?;
    Ok(idx
        .into_iter()
        .map(|i| Instance::fully_observed(rows[i].atoms.clone()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const MINIMAL: &str = r#"{
        "name": "tiny", "context": "one feature",
        "features": [{"id": "x", "desc": "a reading", "type": "continuous", "range": [0, 10]}],
        "rows": [{"values": {"x": 5}}]
    }"#;

    #[test]
    fn minimal_bundle() {
        let (b, w) = DatasetBundle::from_json_str(MINIMAL).unwrap();
        assert_eq!(b.features().len(), 1);
        assert_eq!(b.rows.len(), 1);
        assert!(w.is_empty());
        assert_eq!(
            b.rows[0].value_of("x"),
            Some(Value::Continuous { raw: 5.0, norm: 0.5 })
        );
    }

    #[test]
    fn out_of_range_clamps_with_warning() {
        let text = MINIMAL.replace("\"x\": 5", "\"x\": -3");
        let (b, w) = DatasetBundle::from_json_str(&text).unwrap();
        assert_eq!(b.rows[0].value_of("x"), Some(Value::Continuous { raw: -3.0, norm: 0.0 }));
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].row, 0);
    }

    #[test]
    fn load_errors_name_row_and_feature() {
        let unknown = MINIMAL.replace("{\"x\": 5}", "{\"x\": 5, \"q\": 1}");
        let err = DatasetBundle::from_json_str(&unknown).unwrap_err();
        assert!(matches!(&err, Error::Row { row: 0, feature, .. } if feature == "q"), "{err}");

        let malformed = MINIMAL.replace("\"x\": 5", "\"x\": \"five\"");
        let err = DatasetBundle::from_json_str(&malformed).unwrap_err();
        assert!(matches!(&err, Error::Row { row: 0, feature, .. } if feature == "x"), "{err}");

        let cat = r#"{"name": "c", "context": "c",
            "features": [{"id": "s", "desc": "smoker", "type": "categorical", "choices": ["no", "yes"]}],
            "rows": [{"values": {"s": "yes"}}, {"values": {"s": "maybe"}}]}"#;
        let err = DatasetBundle::from_json_str(cat).unwrap_err();
        assert!(matches!(&err, Error::Row { row: 1, feature, .. } if feature == "s"), "{err}");

        let dup = MINIMAL.replace("{\"x\": 5}", "{\"x\": 5, \"x\": 6}");
        assert!(DatasetBundle::from_json_str(&dup).is_err());

        let no_desc = MINIMAL.replace("a reading", " ");
        assert!(DatasetBundle::from_json_str(&no_desc).is_err());
    }

    #[test]
    fn feature_invariants() {
        assert!(FeatureSpec::categorical("a", "d", &[]).validate().is_err());
        assert!(FeatureSpec::categorical("a", "d", &["x", "x"]).validate().is_err());
        assert!(FeatureSpec::continuous("a", "d", 1.0, 1.0).validate().is_err());
        assert!(FeatureSpec::continuous("a", "d", 0.0, 1.0).with_cost(-1.0).validate().is_err());
        assert!(FeatureSpec::continuous("a", "d", 0.0, 1.0).validate().is_ok());
    }

    fn instance(m: usize) -> Instance {
        Instance::fully_observed(
            (0..m)
                .map(|i| Atom {
                    feature: format!("f{i}"),
                    value: Some(Value::Category(0)),
                })
                .collect(),
        )
    }

    #[test]
    fn mask_single_atom_is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            assert!(sample_mask(&instance(1), &mut rng).unwrap().is_empty());
        }
        assert!(sample_mask(&instance(0), &mut rng).is_err());
    }

    #[test]
    fn shots_exclude_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            assert!(sample_shot_indices(6, Some(2), &mut rng, 0).unwrap().is_empty());
            let idx = sample_shot_indices(6, Some(2), &mut rng, 5).unwrap();
            assert!(!idx.contains(&2));
            assert!(idx.iter().all(|&i| i < 6));
        }
        assert!(sample_shot_indices(5, Some(2), &mut rng, 5).is_err());
    }
}
