//! Experiment and sweep configuration files.
//!
//! Configs are JSON. Any field can be overridden before deserialization
//! with a dotted path (`gpu.compute_capacity=2e6`); the right-hand side is
//! parsed as JSON and falls back to a plain string.

use std::path::{Path, PathBuf};

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use crate::engine::sharing::SharingDiscipline;
use crate::engine::RunSetup;
use crate::error::{Error, Result};
use crate::gpu::{CostModel, GpuSpec};
use crate::scheduler::SchedulerConfig;
use crate::workload::{self, Request, WorkloadSpec};

pub const OUTPUT_DIR_ENV: &str = "SPLITSIM_OUTPUT_DIR";

/// Where requests come from: a generator spec or a trace file.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum WorkloadSource {
    Trace { trace: PathBuf },
    Generated(WorkloadSpec),
}

impl<'de> Deserialize<'de> for WorkloadSource {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct TraceOnly {
            trace: PathBuf,
        }
        let v = Value::deserialize(d)?;
        if v.get("trace").is_some() {
            TraceOnly::deserialize(v)
                .map(|t| WorkloadSource::Trace { trace: t.trace })
                .map_err(D::Error::custom)
        } else {
            WorkloadSpec::deserialize(v)
                .map(WorkloadSource::Generated)
                .map_err(D::Error::custom)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub workload: WorkloadSource,
    #[serde(default)]
    pub gpu: GpuSpec,
    #[serde(default)]
    pub cost: CostModel,
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub discipline: SharingDiscipline,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub emit_event_log: bool,
    /// Overrides `workload.seed` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ExperimentConfig {
    pub fn new(workload: WorkloadSpec, scheduler: SchedulerConfig) -> Self {
        ExperimentConfig {
            workload: WorkloadSource::Generated(workload),
            gpu: GpuSpec::default(),
            cost: CostModel::default(),
            scheduler,
            discipline: SharingDiscipline::default(),
            output_dir: None,
            emit_event_log: false,
            seed: None,
        }
    }

    pub fn from_json_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut v: Value = serde_json::from_str(text).map_err(|e| Error::config("<root>", e.to_string()))?;
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        from_value(v)
    }

    /// Loads a config file. Relative trace paths are resolved against the
    /// file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json_str(&text, overrides)?;
        if let WorkloadSource::Trace { trace } = &mut cfg.workload {
            if trace.is_relative() {
                if let Some(dir) = path.parent() {
                    *trace = dir.join(&*trace);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn setup(&self) -> RunSetup<'_> {
        RunSetup {
            gpu: &self.gpu,
            cost: &self.cost,
            scheduler: &self.scheduler,
            discipline: &self.discipline,
        }
    }

    /// Checks every sub-config without touching the filesystem.
    pub fn validate(&self) -> Result<()> {
        if let WorkloadSource::Generated(spec) = &self.workload {
            spec.validate()?;
        }
        self.setup().validate()
    }

    /// Materializes the request stream.
    pub fn requests(&self) -> Result<Vec<Request>> {
        match &self.workload {
            WorkloadSource::Generated(spec) => {
                let mut spec = spec.clone();
                if let Some(seed) = self.seed {
                    spec.seed = seed;
                }
                workload::generate(&spec)
            }
            WorkloadSource::Trace { trace } => {
                let text = std::fs::read_to_string(trace).map_err(|e| {
                    Error::config("workload.trace", format!("cannot read {}: {e}", trace.display()))
                })?;
                workload::parse_trace(&text)
            }
        }
    }

    /// `output_dir`, else `$SPLITSIM_OUTPUT_DIR`.
    pub fn resolved_output_dir(&self) -> Result<PathBuf> {
        if let Some(d) = &self.output_dir {
            return Ok(d.clone());
        }
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(d) if !d.is_empty() => Ok(PathBuf::from(d)),
            _ => Err(Error::config(
                "output_dir",
                format!("not set in config and {OUTPUT_DIR_ENV} is empty"),
            )),
        }
    }
}

/// A parameter sweep: `base` run once per entry of `values` at `axis`,
/// optionally for several named variants (each a set of overrides).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub base: Value,
    pub axis: String,
    pub values: Vec<Value>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub variants: Vec<Variant>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    #[serde(default)]
    pub set: serde_json::Map<String, Value>,
}

/// One fully resolved sweep point.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub variant: String,
    pub value: Value,
    pub config: Result<ExperimentConfig, String>,
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec: SweepSpec = from_value(
            serde_json::from_str(&text).map_err(|e| Error::config("<root>", e.to_string()))?,
        )?;
        if let Some(dir) = path.parent() {
            if let Some(t) = spec.base.pointer_mut("/workload/trace") {
                if let Some(s) = t.as_str().map(PathBuf::from).filter(|p| p.is_relative()) {
                    *t = Value::String(dir.join(s).to_string_lossy().into_owned());
                }
            }
        }
        Ok(spec)
    }

    /// Structural checks, plus a check that the base config itself parses.
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::config("values", "must not be empty"));
        }
        if self.axis.is_empty() || self.axis.split('.').any(str::is_empty) {
            return Err(Error::config("axis", format!("`{}` is not a dotted field path", self.axis)));
        }
        for v in &self.values {
            if !(v.is_number() || v.is_string()) {
                return Err(Error::config("values", format!("{v} is neither a number nor an enum name")));
            }
        }
        let base: ExperimentConfig = from_value(self.base.clone())?;
        base.validate()?;
        match lookup(&self.base, &self.axis) {
            None | Some(Value::Null | Value::Number(_) | Value::String(_)) => {}
            Some(other) => {
                return Err(Error::config(
                    "axis",
                    format!("`{}` is a {} field, not numeric or enum", self.axis, json_kind(other)),
                ))
            }
        }
        let mut names = std::collections::HashSet::new();
        for v in &self.variants {
            if v.name.is_empty() || !names.insert(&v.name) {
                return Err(Error::config("variants", format!("variant name `{}` empty or repeated", v.name)));
            }
        }
        Ok(())
    }

    /// Expands the sweep into points, variant-major and in `values` order.
    pub fn points(&self) -> Vec<SweepPoint> {
        let default_variant = [Variant {
            name: "base".into(),
            set: Default::default(),
        }];
        let variants: &[Variant] = if self.variants.is_empty() {
            &default_variant
        } else {
            &self.variants
        };
        let mut out = Vec::with_capacity(variants.len() * self.values.len());
        for var in variants {
            for value in &self.values {
                let config = (|| {
                    let mut v = self.base.clone();
                    for (path, x) in &var.set {
                        set_path(&mut v, path, x.clone())?;
                    }
                    set_path(&mut v, &self.axis, value.clone())?;
                    let cfg: ExperimentConfig = from_value(v)?;
                    cfg.validate()?;
                    Ok::<_, Error>(cfg)
                })()
                .map_err(|e| e.to_string());
                out.push(SweepPoint {
                    variant: var.name.clone(),
                    value: value.clone(),
                    config,
                });
            }
        }
        out
    }
}

fn json_kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "list",
        Value::Object(_) => "object",
    }
}

/// Deserializes with the failing field's dotted path in the error.
pub fn from_value<T: serde::de::DeserializeOwned>(v: Value) -> Result<T> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "<root>".to_string() } else { path };
        Error::config(field, e.into_inner().to_string())
    })
}

/// Applies one `path=value` override.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like `path=value`"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    set_path(root, path.trim(), value)
}

/// Sets a dotted path, creating intermediate objects as needed.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(Error::config(path, "empty path segment"));
    }
    let mut cur = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
        let Value::Object(map) = cur else {
            return Err(Error::config(
                segments[..i].join("."),
                format!("is a {}, cannot set `{seg}` inside it", json_kind(cur)),
            ));
        };
        if i + 1 == segments.len() {
            map.insert(seg.to_string(), value);
            return Ok(());
        }
        cur = map.entry(seg.to_string()).or_insert(Value::Null);
    }
    unreachable!("loop returns on the last segment")
}

pub fn lookup<'v>(root: &'v Value, path: &str) -> Option<&'v Value> {
    path.split('.').try_fold(root, |v, seg| v.get(seg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    const MINIMAL: &str = r#"{
        "workload": {"n_requests": 4, "input_tokens": 32, "output_tokens": [1, 8]},
        "scheduler": {"policy": "continuous_batching"}
    }"#;

    #[test]
    fn defaults_fill_in() {
        let cfg = ExperimentConfig::from_json_str(MINIMAL, &[]).unwrap();
        assert_eq!(cfg.gpu, GpuSpec::default());
        assert_eq!(cfg.discipline, SharingDiscipline::MpsConcurrent);
        assert!(!cfg.emit_event_log);
        cfg.validate().unwrap();
        assert_eq!(cfg.requests().unwrap().len(), 4);
    }

    #[test]
    fn round_trip_is_idempotent() {
        let cfg = ExperimentConfig::from_json_str(MINIMAL, &["discipline.mode=time_sliced".into()]).unwrap();
        let once = cfg.to_json();
        let again = ExperimentConfig::from_json_str(&once, &[]).unwrap().to_json();
        assert_eq!(once, again);
    }

    #[test]
    fn overrides_parse_json_then_string() {
        let cfg = ExperimentConfig::from_json_str(
            MINIMAL,
            &[
                "gpu.compute_capacity=2e6".into(),
                "scheduler.policy=pipelined_splitwiser".into(),
                "scheduler.P=4".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.gpu.compute_capacity, 2e6);
        assert_eq!(cfg.scheduler.p, 4);
    }

    #[test]
    fn errors_name_the_field() {
        let err = ExperimentConfig::from_json_str(MINIMAL, &["gpu.compute_capacity=\"fast\"".into()]).unwrap_err();
        match err {
            Error::Config { field, .. } => assert_eq!(field, "gpu.compute_capacity"),
            e => panic!("{e}"),
        }
        let err = ExperimentConfig::from_json_str(MINIMAL, &["gpu.compute_capacity=-1".into()])
            .unwrap()
            .validate()
            .unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "gpu.compute_capacity"));
        assert!(ExperimentConfig::from_json_str(MINIMAL, &["nonsense".into()]).is_err());
    }

    #[test]
    fn missing_trace_names_field() {
        let cfg = ExperimentConfig::from_json_str(
            r#"{"workload": {"trace": "/no/such/file.csv"}, "scheduler": {"policy": "sequential"}}"#,
            &[],
        )
        .unwrap();
        let err = cfg.requests().unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("workload.trace"));
    }

    #[test]
    fn set_path_creates_and_rejects() {
        let mut v = json!({"a": {"b": 1}});
        set_path(&mut v, "a.c.d", json!(2)).unwrap();
        assert_eq!(v, json!({"a": {"b": 1, "c": {"d": 2}}}));
        assert!(set_path(&mut v, "a.b.x", json!(3)).is_err());
        assert!(set_path(&mut v, "a..b", json!(3)).is_err());
    }

    #[test]
    fn sweep_expands_in_order() {
        let spec = SweepSpec {
            base: serde_json::from_str(MINIMAL).unwrap(),
            axis: "workload.n_requests".into(),
            values: vec![json!(10), json!(20), json!(40)],
            variants: vec![
                Variant {
                    name: "sp".into(),
                    set: Default::default(),
                },
                Variant {
                    name: "mps2".into(),
                    set: json!({"scheduler.policy": "multi_instance"}).as_object().unwrap().clone(),
                },
            ],
        };
        spec.validate().unwrap();
        let pts = spec.points();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[0].variant, "sp");
        assert_eq!(pts[2].value, json!(40));
        assert_eq!(pts[3].variant, "mps2");
        let cfg = pts[4].config.as_ref().unwrap();
        assert_eq!(cfg.scheduler.n_instances(), 2);
        assert!(matches!(&cfg.workload, WorkloadSource::Generated(w) if w.n_requests == 20));
    }

    #[test]
    fn sweep_axis_must_be_scalar() {
        let spec = SweepSpec {
            base: serde_json::from_str(MINIMAL).unwrap(),
            axis: "gpu".into(),
            values: vec![json!(1)],
            variants: vec![],
        };
        let mut spec2 = spec.clone();
        spec2.base = json!({"workload": {"n_requests": 1, "input_tokens": 1, "output_tokens": 1}, "scheduler": {"policy": "sequential"}, "gpu": {}});
        assert!(spec2.validate().is_err());
        let mut empty = spec;
        empty.values.clear();
        assert!(empty.validate().is_err());
    }
}
