//! Event-log records and their `time_s,kind,detail` CSV encoding.
//!
//! The log is lossless: a metrics report rebuilt from it is identical to
//! the one produced during the run. Floats are written with the shortest
//! representation that parses back exactly.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::engine::event::TaskId;
use crate::error::{Error, Result};
use crate::gpu::PhaseKind;
use crate::workload::RequestId;

pub const EVENT_LOG_HEADER: &str = "time_s,kind,detail";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    /// First record of every run: device capacities and per-instance KV
    /// capacity in blocks.
    Begin {
        t: f64,
        compute_capacity: f64,
        mem_bandwidth: f64,
        kv_capacity: Vec<u64>,
        prompt_emits_first_token: bool,
    },
    Arrival {
        t: f64,
        id: RequestId,
        instance: usize,
        input_tokens: u32,
        output_tokens: u32,
    },
    TaskStart {
        t: f64,
        task: TaskId,
        instance: usize,
        phase: PhaseKind,
        batch: Vec<RequestId>,
        compute_demand: f64,
        mem_demand: f64,
        duration_alone_s: f64,
    },
    TaskComplete {
        t: f64,
        task: TaskId,
    },
    QuantumExpiry {
        t: f64,
        instance: usize,
    },
    /// KV blocks held by an instance after a change.
    Kv {
        t: f64,
        instance: usize,
        blocks: u64,
    },
    /// Device share used by an instance after a rate change.
    Util {
        t: f64,
        instance: usize,
        compute_pct: f64,
        mem_pct: f64,
    },
}

impl Record {
    pub fn time(&self) -> f64 {
        match *self {
            Record::Begin { t, .. }
            | Record::Arrival { t, .. }
            | Record::TaskStart { t, .. }
            | Record::TaskComplete { t, .. }
            | Record::QuantumExpiry { t, .. }
            | Record::Kv { t, .. }
            | Record::Util { t, .. } => t,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Record::Begin { .. } => "begin",
            Record::Arrival { .. } => "arrival",
            Record::TaskStart { .. } => "task_start",
            Record::TaskComplete { .. } => "task_complete",
            Record::QuantumExpiry { .. } => "quantum_expiry",
            Record::Kv { .. } => "kv",
            Record::Util { .. } => "util",
        }
    }

    pub fn to_csv_line(&self) -> String {
        let mut d = String::new();
        match self {
            Record::Begin {
                compute_capacity,
                mem_bandwidth,
                kv_capacity,
                prompt_emits_first_token,
                ..
            } => {
                let caps: Vec<String> = kv_capacity.iter().map(u64::to_string).collect();
                let _ = write!(
                    d,
                    "compute_capacity={compute_capacity:?};mem_bandwidth={mem_bandwidth:?};kv_capacity={};prompt_emits_first_token={prompt_emits_first_token}",
                    caps.join(" ")
                );
            }
            Record::Arrival {
                id,
                instance,
                input_tokens,
                output_tokens,
                ..
            } => {
                let _ = write!(d, "id={id};instance={instance};input_tokens={input_tokens};output_tokens={output_tokens}");
            }
            Record::TaskStart {
                task,
                instance,
                phase,
                batch,
                compute_demand,
                mem_demand,
                duration_alone_s,
                ..
            } => {
                let ids: Vec<String> = batch.iter().map(u64::to_string).collect();
                let _ = write!(
                    d,
                    "task={task};instance={instance};phase={};batch={};compute_demand={compute_demand:?};mem_demand={mem_demand:?};duration_alone_s={duration_alone_s:?}",
                    phase.as_str(),
                    ids.join(" ")
                );
            }
            Record::TaskComplete { task, .. } => {
                let _ = write!(d, "task={task}");
            }
            Record::QuantumExpiry { instance, .. } => {
                let _ = write!(d, "instance={instance}");
            }
            Record::Kv {
                instance, blocks, ..
            } => {
                let _ = write!(d, "instance={instance};blocks={blocks}");
            }
            Record::Util {
                instance,
                compute_pct,
                mem_pct,
                ..
            } => {
                let _ = write!(d, "instance={instance};compute_pct={compute_pct:?};mem_pct={mem_pct:?}");
            }
        }
        format!("{:?},{},{}", self.time(), self.kind(), d)
    }

    pub fn parse_csv_line(line: &str, line_no: usize) -> Result<Record> {
        let bad = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        let mut parts = line.splitn(3, ',');
        let (Some(t), Some(kind), Some(detail)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad("expected `time_s,kind,detail`".into()));
        };
        let t: f64 = t.parse().map_err(|e| bad(format!("time `{t}`: {e}")))?;
        let fields = Fields::parse(detail).map_err(&bad)?;
        let rec = match kind {
            "begin" => Record::Begin {
                t,
                compute_capacity: fields.num("compute_capacity").map_err(&bad)?,
                mem_bandwidth: fields.num("mem_bandwidth").map_err(&bad)?,
                kv_capacity: fields.list("kv_capacity").map_err(&bad)?,
                prompt_emits_first_token: fields.num("prompt_emits_first_token").map_err(&bad)?,
            },
            "arrival" => Record::Arrival {
                t,
                id: fields.num("id").map_err(&bad)?,
                instance: fields.num("instance").map_err(&bad)?,
                input_tokens: fields.num("input_tokens").map_err(&bad)?,
                output_tokens: fields.num("output_tokens").map_err(&bad)?,
            },
            "task_start" => Record::TaskStart {
                t,
                task: fields.num("task").map_err(&bad)?,
                instance: fields.num("instance").map_err(&bad)?,
                phase: fields.get("phase").map_err(&bad)?.parse().map_err(|e: Error| bad(e.to_string()))?,
                batch: fields.list("batch").map_err(&bad)?,
                compute_demand: fields.num("compute_demand").map_err(&bad)?,
                mem_demand: fields.num("mem_demand").map_err(&bad)?,
                duration_alone_s: fields.num("duration_alone_s").map_err(&bad)?,
            },
            "task_complete" => Record::TaskComplete {
                t,
                task: fields.num("task").map_err(&bad)?,
            },
            "quantum_expiry" => Record::QuantumExpiry {
                t,
                instance: fields.num("instance").map_err(&bad)?,
            },
            "kv" => Record::Kv {
                t,
                instance: fields.num("instance").map_err(&bad)?,
                blocks: fields.num("blocks").map_err(&bad)?,
            },
            "util" => Record::Util {
                t,
                instance: fields.num("instance").map_err(&bad)?,
                compute_pct: fields.num("compute_pct").map_err(&bad)?,
                mem_pct: fields.num("mem_pct").map_err(&bad)?,
            },
            other => return Err(bad(format!("unknown record kind `{other}`"))),
        };
        Ok(rec)
    }
}

struct Fields<'a>(Vec<(&'a str, &'a str)>);

impl<'a> Fields<'a> {
    fn parse(detail: &'a str) -> std::result::Result<Self, String> {
        let mut out = Vec::new();
        for kv in detail.split(';').filter(|s| !s.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| format!("field `{kv}` is not key=value"))?;
            out.push((k, v));
        }
        Ok(Fields(out))
    }

    fn get(&self, key: &str) -> std::result::Result<&'a str, String> {
        self.0
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| format!("missing field `{key}`"))
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> std::result::Result<T, String>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.get(key)?;
        v.parse().map_err(|e| format!("field `{key}`=`{v}`: {e}"))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> std::result::Result<Vec<T>, String>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)?
            .split_whitespace()
            .map(|v| v.parse().map_err(|e| format!("field `{key}` item `{v}`: {e}")))
            .collect()
    }
}

pub fn write_event_log(records: &[Record]) -> String {
    let mut s = String::with_capacity(64 * (records.len() + 1));
    s.push_str(EVENT_LOG_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.to_csv_line());
        s.push('\n');
    }
    s
}

pub fn parse_event_log(text: &str) -> Result<Vec<Record>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == EVENT_LOG_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header `{EVENT_LOG_HEADER}`"),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| Record::parse_csv_line(l.trim_end(), i + 1))
        .collect()
}
