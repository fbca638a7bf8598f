//! Discrete-event simulator for LLM inference on one shared GPU.
//!
//! Requests are split into a compute-heavy prompt phase and a
//! memory-bound token phase. Schedulers decide which phases run, and a
//! sharing discipline decides how concurrent phases divide the device.

pub mod config;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod gpu;
pub mod metrics;
pub mod scheduler;
pub mod workload;

pub use config::{ExperimentConfig, SweepSpec, WorkloadSource};
pub use engine::sharing::SharingDiscipline;
pub use engine::{run, run_logged, RunSetup};
pub use error::{Error, Result};
pub use gpu::{CostModel, GpuSpec, KvBlockPool, PhaseKind, PhaseTask};
pub use metrics::MetricsReport;
pub use scheduler::{InnerPolicy, PolicyKind, SchedulerConfig};
pub use workload::{Arrival, Request, RequestId, TokenCount, WorkloadSpec};
