//! Host side of the system: transfer costs and data movement, buffer
//! allocation, redistribution between DPUs and the transfer/execution
//! timeline.

pub mod cost;
pub mod session;
pub mod timeline;
pub mod transfer;

pub use cost::HostCostModel;
pub use session::{LaunchRecord, OpCounts, Route, Session, SessionOptions, TransferMode};
pub use timeline::{check_timeline, run_pipeline, schedule, EventKind, SchedMode, Stage, Task, Timeline, TimelineEvent};
pub use transfer::{Direction, Fragment, TransferDescriptor, TransferKind};
