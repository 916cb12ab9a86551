//! Streaming influence maximization for keyword subscriptions.
//!
//! Actions `u_e responded at t_e to u_r's activity at t_r` arrive as a
//! stream. Each subscription is a keyword set; the users whose profile
//! contains it are its candidates. For every subscription the engine keeps a
//! size-`k` user set of near-maximal time-decayed coverage, sharing all
//! candidate sets across subscriptions in one prefix tree.

pub mod engine;
pub mod error;
pub mod influence;
pub mod io;
pub mod oracle;
pub mod prefix_tree;
pub mod sieve;
pub mod types;

pub use engine::{
    drive, Cadence, Catalog, Engine, EngineConfig, EngineStats, RebaseSchedule, ResultRecord, StreamEngine,
    Subscription, UserProfile,
};
pub use error::{Error, Result};
pub use prefix_tree::Pruning;
pub use types::{Action, QueryId, SubscriptionId, Timestamp, UserId};
