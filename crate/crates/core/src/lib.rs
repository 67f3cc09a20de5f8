//! Marlin: cluster coordination through per-node system-table logs and a
//! conditional-append commit protocol.

pub mod commit;
pub mod log_store;
pub mod node;
pub mod sim;
pub mod state;
pub mod types;
pub mod verifier;

pub use types::*;
