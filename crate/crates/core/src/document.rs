//! Experiment documents: an [`ExperimentConfig`] plus optional `sweep` and
//! `report` sections, as stored in the JSON preset files.
//!
//! ```json
//! {
//!   "name": "bw",
//!   "scenario": { "layout": { "kind": "highway_drop", "num_lanes": 3,
//!                 "lane_width_m": 4.0, "segment_length_m": 500.0,
//!                 "vehicle_density_per_m": 0.02 }, "n_anchors": 4 },
//!   "method": "tdoa",
//!   "channel": "highway-like",
//!   "sweep": { "axis": "bandwidth_hz", "values": [20e6, 40e6, 100e6] },
//!   "report": { "availability_thresholds_m": [1.0] }
//! }
//! ```
//!
//! `channel` may name a shipped fragment instead of spelling out a
//! [`ChannelModel`]. Unknown keys anywhere in the document are rejected with
//! their dotted path.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::channel::ChannelModel;
use crate::harness::{apply_axis, default_psl_table, sweep, ExperimentConfig, PslRequirement, SweepAxis, SweepPoint};
use crate::{Error, Result};

/// Shipped experiment presets, by name.
pub const PRESETS: [(&str, &str); 4] = [
    ("fig3-bandwidth-sweep", include_str!("../../../presets/fig3-bandwidth-sweep.json")),
    ("fig3-anchor-sweep", include_str!("../../../presets/fig3-anchor-sweep.json")),
    ("fig3-sync-onoff", include_str!("../../../presets/fig3-sync-onoff.json")),
    ("drift-robustness", include_str!("../../../presets/drift-robustness.json")),
];

/// Shipped channel fragments, by name.
pub const CHANNEL_FRAGMENTS: [(&str, &str); 2] = [
    ("highway-like", include_str!("../../../presets/highway-like.json")),
    ("urban-grid-like", include_str!("../../../presets/urban-grid-like.json")),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

pub fn channel_fragment(name: &str) -> Result<ChannelModel> {
    let text = CHANNEL_FRAGMENTS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| *text)
        .ok_or_else(|| Error::Config(format!("unknown channel fragment `{name}`")))?;
    typed(serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?, "channel")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisValues {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    /// Outer axis; the inner sweep is repeated at each of its values.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub by: Option<AxisValues>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSpec {
    pub availability_thresholds_m: Vec<f64>,
    /// Requirements to check; the default PSL table when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psl: Option<Vec<PslRequirement>>,
}

impl Default for ReportSpec {
    fn default() -> Self {
        Self {
            availability_thresholds_m: vec![0.5, 1.0, 1.5, 3.0],
            psl: None,
        }
    }
}

impl ReportSpec {
    pub fn requirements(&self) -> Vec<PslRequirement> {
        self.psl.clone().unwrap_or_else(default_psl_table)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigDocument {
    pub experiment: ExperimentConfig,
    pub sweep: Option<SweepSpec>,
    pub report: ReportSpec,
}

/// Sweep results at one value of the outer axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGroup {
    pub by: Option<(SweepAxis, f64)>,
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
}

fn typed<T: serde::de::DeserializeOwned>(value: Value, prefix: &str) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let msg = e.inner().to_string();
        let at = match (prefix.is_empty(), path == ".") {
            (true, true) => String::new(),
            (true, false) => path,
            (false, true) => prefix.to_string(),
            (false, false) => format!("{prefix}.{path}"),
        };
        if let Some(name) = msg.strip_prefix("unknown field `").and_then(|r| r.split('`').next()) {
            let key = if at == name || at.ends_with(&format!(".{name}")) {
                at
            } else if at.is_empty() {
                name.to_string()
            } else {
                format!("{at}.{name}")
            };
            Error::Config(format!("unknown key `{key}`"))
        } else if at.is_empty() {
            Error::Config(msg)
        } else {
            Error::Config(format!("`{at}`: {msg}"))
        }
    })
}

impl ConfigDocument {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        Self::from_value(value)
    }

    /// Parses a document name from [`PRESETS`] or, failing that, JSON text.
    pub fn from_preset_or_json(name_or_text: &str) -> Result<Self> {
        match preset(name_or_text) {
            Some(text) => Self::from_json(text),
            None => Self::from_json(name_or_text),
        }
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let Value::Object(mut map) = value else {
            return Err(Error::Config("document must be a JSON object".into()));
        };
        let sweep = match map.remove("sweep") {
            None | Some(Value::Null) => None,
            Some(v) => Some(typed::<SweepSpec>(v, "sweep")?),
        };
        let report = match map.remove("report") {
            None | Some(Value::Null) => ReportSpec::default(),
            Some(v) => typed(v, "report")?,
        };
        if let Some(Value::String(name)) = map.get("channel") {
            let fragment = channel_fragment(name)?;
            map.insert("channel".into(), serde_json::to_value(fragment).expect("channel serializes"));
        }
        let experiment: ExperimentConfig = typed(Value::Object(map), "")?;
        experiment.validate()?;
        if let Some(s) = &sweep {
            let outers: Vec<Option<(SweepAxis, f64)>> = match &s.by {
                Some(by) => by.values.iter().map(|v| Some((by.axis, *v))).collect(),
                None => vec![None],
            };
            if s.values.is_empty() || outers.is_empty() {
                return Err(Error::Config("sweep values must not be empty".into()));
            }
            for outer in outers {
                let base = match outer {
                    Some((axis, v)) => apply_axis(&experiment, axis, v)?,
                    None => experiment.clone(),
                };
                for v in &s.values {
                    apply_axis(&base, s.axis, *v)?;
                }
            }
        }
        Ok(Self {
            experiment,
            sweep,
            report,
        })
    }

    /// Fully expanded document, defaults included.
    pub fn to_value(&self) -> Value {
        let mut map = match serde_json::to_value(&self.experiment).expect("config serializes") {
            Value::Object(m) => m,
            _ => unreachable!("experiment serializes to an object"),
        };
        if let Some(s) = &self.sweep {
            map.insert("sweep".into(), serde_json::to_value(s).expect("sweep serializes"));
        }
        map.insert("report".into(), serde_json::to_value(&self.report).expect("report serializes"));
        Value::Object(map)
    }

    /// Applies `key=value` overrides. Each key is a dotted path that must
    /// already exist in the expanded document.
    pub fn with_overrides(&self, overrides: &[(String, Value)]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc = self.to_value();
        for (key, value) in overrides {
            let mut cur = &mut doc;
            for part in key.split('.') {
                cur = match cur {
                    Value::Object(m) => m.get_mut(part),
                    Value::Array(a) => part.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
                    _ => None,
                }
                .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
            }
            *cur = value.clone();
        }
        Self::from_value(doc)
    }

    pub fn run_sweep(&self, workers: usize) -> Result<Vec<SweepGroup>> {
        let s = self
            .sweep
            .as_ref()
            .ok_or_else(|| Error::Usage("document has no sweep section".into()))?;
        let outers: Vec<Option<(SweepAxis, f64)>> = match &s.by {
            Some(by) => by.values.iter().map(|v| Some((by.axis, *v))).collect(),
            None => vec![None],
        };
        outers
            .into_iter()
            .map(|by| {
                let base = match by {
                    Some((axis, v)) => apply_axis(&self.experiment, axis, v)?,
                    None => self.experiment.clone(),
                };
                Ok(SweepGroup {
                    by,
                    axis: s.axis,
                    points: sweep(&base, s.axis, &s.values, workers)?,
                })
            })
            .collect()
    }
}

/// Splits `key=value`; the value is read as JSON, or as a string when it is
/// not valid JSON.
pub fn parse_override(arg: &str) -> Result<(String, Value)> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override `{arg}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Usage(format!("override `{arg}` has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}
