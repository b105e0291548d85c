//! Split-federated training: client and server steps, synchronization,
//! scheduling and traffic accounting.

pub mod client;
pub mod message;
pub mod overhead;
pub mod run;
pub mod server;
pub mod sync;

pub use client::{client_step_backward, client_step_forward, ClientState};
pub use message::{Direction, LedgerRow, Message, MessageKind, TrafficLedger, BYTES_PER_ELEMENT};
pub use overhead::{argmin_cut, overhead_curve, OverheadRow};
pub use run::{is_sync_step, run_experiment, RunReport, Schedule, Simulation, TraceRow, TrainingConfig};
pub use server::{server_step, ServerState};
pub use sync::{sync_momentum_aligned, sync_online, Consensus, SyncScheme};
