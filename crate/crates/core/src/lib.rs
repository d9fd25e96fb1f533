//! Flow-matching generative flow networks on small grid DAGs, with
//! meta-learning (plain and personalized) across related tasks.

pub mod env;
pub mod error;
pub mod flownet;
pub mod meta;
pub mod metrics;
pub mod objective;
pub mod oracle;
pub mod pmeta;
pub mod synthetic;
pub mod harness;
pub mod plot;
pub mod theory;

pub use env::{Action, EnvKind, State, Task, TaskParams, TaskSpec};
pub use error::{Error, Result};
pub use flownet::{FlowNet, ParamVector};
