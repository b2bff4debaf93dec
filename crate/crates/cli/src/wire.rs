//! JSON shapes of the HTTP service.
//!
//! Values travel in raw form: category names as strings, continuous values
//! as numbers in the feature's own units.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value as Json};

use setinfer_core::afa::{AfaConfig, AfaSession, HistoryEntry, Phase, Suggestion};
use setinfer_core::dist::Summary;
use setinfer_core::{Atom, Error, Instance, Schema, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquiredWire {
    pub feature_id: String,
    pub value: Json,
}

/// Full view of one acquisition session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionWire {
    pub session_id: String,
    pub schema_name: String,
    pub config: AfaConfig,
    pub remaining: f64,
    pub phase: Phase,
    pub acquired: Vec<AcquiredWire>,
    pub history: Vec<HistoryEntry>,
    pub negative_clamps: usize,
    /// Pending suggestion; `null` right after a value that was not suggested.
    pub suggestion: Option<Suggestion>,
    /// Current predictive distribution of the target.
    pub prediction: Summary,
}

impl SessionWire {
    pub fn from_session(session_id: &str, session: &AfaSession, prediction: Summary) -> Self {
        let acquired = session
            .acquired
            .iter()
            .map(|(id, v)| AcquiredWire {
                feature_id: id.clone(),
                value: session
                    .schema
                    .feature(id)
                    .map(|f| f.value_to_json(v))
                    .unwrap_or(Json::Null),
            })
            .collect();
        Self {
            session_id: session_id.to_string(),
            schema_name: session.schema.name.clone(),
            config: session.config.clone(),
            remaining: session.remaining,
            phase: session.phase,
            acquired,
            history: session.history.clone(),
            negative_clamps: session.negative_clamps,
            suggestion: session.last_suggestion.clone(),
            prediction,
        }
    }

    /// Rebuild the session this view was taken from.
    pub fn to_session(&self, schema: &Schema) -> Result<AfaSession, Error> {
        if schema.name != self.schema_name {
            return Err(Error::Dataset(format!(
                "session belongs to schema `{}`, not `{}`",
                self.schema_name, schema.name
            )));
        }
        let mut s = AfaSession::new(schema.clone(), self.config.clone())?;
        for a in &self.acquired {
            let (v, _) = schema.require(&a.feature_id)?.value_from_json(&a.value)?;
            s.acquired.push((a.feature_id.clone(), v));
        }
        s.remaining = self.remaining;
        s.phase = self.phase;
        s.history = self.history.clone();
        s.negative_clamps = self.negative_clamps;
        s.last_suggestion = self.suggestion.clone();
        Ok(s)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    /// Name of a schema served by `GET /v1/schemas`.
    #[serde(default)]
    pub dataset: Option<String>,
    /// Inline schema; used when `dataset` is absent.
    #[serde(default)]
    pub schema: Option<Schema>,
    pub target: String,
    pub budget: f64,
    #[serde(default)]
    pub n_v: Option<usize>,
    #[serde(default)]
    pub epsilon_mi: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitValue {
    pub feature_id: String,
    pub value: Json,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    #[serde(default)]
    pub dataset: Option<String>,
    #[serde(default)]
    pub schema: Option<Schema>,
    /// Feature id to raw value.
    #[serde(default)]
    pub observed: Map<String, Json>,
    pub targets: Vec<String>,
    /// Complete example rows, feature id to raw value.
    #[serde(default)]
    pub shots: Vec<Map<String, Json>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub targets: Vec<Summary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemaList {
    pub schemas: Vec<Schema>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    /// Offending field or feature id, when there is one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

/// Parse raw values into an instance whose atoms follow schema order, so
/// the key order of `values` never reaches the model. Out-of-range values
/// are rejected rather than clamped.
pub fn instance_from_map(schema: &Schema, values: &Map<String, Json>) -> Result<Instance, Error> {
    for k in values.keys() {
        schema.require(k)?;
    }
    let mut atoms = Vec::new();
    for f in &schema.features {
        let Some(raw) = values.get(&f.id) else { continue };
        if raw.is_null() {
            continue;
        }
        let (v, clamped) = f.value_from_json(raw)?;
        if clamped {
            return Err(Error::InvalidValue {
                feature: f.id.clone(),
                msg: format!("{raw} is outside the range {:?}", f.range.unwrap_or((0.0, 1.0))),
            });
        }
        atoms.push(Atom {
            feature: f.id.clone(),
            value: Some(v),
        });
    }
    Ok(Instance::fully_observed(atoms))
}

/// Query instance over every schema feature, observed where `values` has
/// a value; the rest enter as unobserved atoms, as in a session.
pub fn query_from_map(schema: &Schema, values: &Map<String, Json>) -> Result<Instance, Error> {
    let known = instance_from_map(schema, values)?;
    let atoms = schema
        .features
        .iter()
        .map(|f| Atom {
            feature: f.id.clone(),
            value: known.value_of(&f.id),
        })
        .collect();
    Ok(Instance {
        atoms,
        observed: known.observed,
    })
}

/// Parse one raw value for `feature`, rejecting out-of-range numbers.
pub fn value_from_wire(schema: &Schema, feature: &str, raw: &Json) -> Result<Value, Error> {
    let mut m = Map::new();
    m.insert(feature.to_string(), raw.clone());
    let inst = instance_from_map(schema, &m)?;
    inst.value_of(feature).ok_or_else(|| Error::InvalidValue {
        feature: feature.to_string(),
        msg: "value is null".into(),
    })
}
