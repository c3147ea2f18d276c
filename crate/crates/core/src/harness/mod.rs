//! Evaluation protocols, the scripted baseline and the comparison
//! experiments built on them.

pub mod eval;
pub mod experiments;
pub mod objects;
pub mod scripted;
pub mod stats;

pub use eval::{evaluate, EvalProtocol, EvalReport, TrialRecord};
pub use objects::{generate_object_set, ObjectSet};
pub use scripted::{scripted_baseline, ScriptedParams};
pub use stats::{wilson_interval, RateSummary};
