//! Learning multi-fingered grasping policies by contextual policy search.
//!
//! The crate bundles a quasi-static hand/object simulator ([`world`]), the
//! sixteen-joint hand kinematics ([`hand`]), bounding-box keypoint context
//! ([`object`]), fingertip demonstrations and grasp styles ([`demos`]), the
//! four-term grasp reward ([`rewards`]), a Gaussian MLP policy ([`policy`]),
//! PPO training with domain randomization ([`ppo`]), CMA-ES adaptation of the
//! keypoint context ([`adapt`]) and evaluation protocols ([`harness`]).

pub mod adapt;
pub mod cma;
pub mod config;
pub mod demos;
pub mod error;
pub mod geometry;
pub mod hand;
pub mod harness;
pub mod nn;
pub mod object;
pub mod policy;
pub mod ppo;
pub mod rewards;
pub mod rollout;
pub mod world;

pub use error::{Error, Result};
pub use geometry::Pose;
pub use hand::{forward_kinematics, Finger, FingertipSet, HandModel, HandState, JointVector};
pub use object::{compute_keypoints, Keypoints, ObjectKind, ObjectSpec};
pub use world::{Action, SimParams, WorldState};
