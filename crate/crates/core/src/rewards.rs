//! The four grasp reward terms (palm approach, demonstration tracking, lift
//! bonus, fingertip contact) and their weighted sum.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::hand::{FingertipSet, NUM_FINGERS};
use crate::object::Keypoints;

/// Top-face offset above the estimated center used when the context is a bare
/// center pose: half of the mid-range training object height.
pub const POSE_CONTEXT_TOP_OFFSET: f64 = 0.0375;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    /// Palm approach sharpness (1/m).
    pub w1: f64,
    /// Fingertip tracking sharpness (1/m).
    pub w2: f64,
    /// Lift bonus.
    pub w3: f64,
    /// Mixing coefficients for (pos, hand, lift, contact).
    pub mix: [f64; 4],
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            w1: 20.0,
            w2: 5.0,
            w3: 2.0,
            mix: [1.0, 1.0, 1.0, 0.5],
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> crate::Result<()> {
        let all = [self.w1, self.w2, self.w3, self.mix[0], self.mix[1], self.mix[2], self.mix[3]];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(crate::Error::input("reward weights must be finite and >= 0"));
        }
        Ok(())
    }

    /// Largest per-step contribution of each term.
    pub fn term_maxima(&self) -> [f64; 4] {
        [
            self.mix[0],
            self.mix[1],
            self.mix[2] * self.w3,
            self.mix[3] * NUM_FINGERS as f64,
        ]
    }
}

/// Switches for the comparison variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Zero the contact entries of the observation.
    pub no_contact: bool,
    /// Drop the demonstration-tracking term from the reward.
    pub no_demo: bool,
    /// Replace the keypoint context with a center pose vector.
    pub pose_context: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_pos: f64,
    pub r_hand: f64,
    pub r_lift: f64,
    pub r_contact: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn terms(&self) -> [f64; 4] {
        [self.r_pos, self.r_hand, self.r_lift, self.r_contact]
    }
}

/// exp(−w1·‖palm − κ_offset‖) with κ_offset the top-face keypoint mean.
pub fn r_pos(palm: &Vector3<f64>, keypoints: &Keypoints, w1: f64) -> f64 {
    r_pos_to(palm, &keypoints.top_face_center(), w1)
}

fn r_pos_to(palm: &Vector3<f64>, target: &Vector3<f64>, w1: f64) -> f64 {
    (-w1 * (palm - target).norm()).exp()
}

/// exp(−w2·Σ‖tip − demo tip‖) over the fingers selected by `mask`.
pub fn r_hand(
    tips: &FingertipSet,
    demo_tips: &[Vector3<f64>; NUM_FINGERS],
    mask: &[bool; NUM_FINGERS],
    w2: f64,
) -> f64 {
    let err: f64 = (0..NUM_FINGERS)
        .filter(|&i| mask[i])
        .map(|i| (tips.tips[i] - demo_tips[i]).norm())
        .sum();
    (-w2 * err).exp()
}

/// w3 while the object is strictly above its start height.
pub fn r_lift(object_height: f64, start_height: f64, w3: f64) -> f64 {
    if object_height > start_height {
        w3
    } else {
        0.0
    }
}

/// Number of fingertips touching the object.
pub fn r_contact(contacts: &[bool; NUM_FINGERS]) -> f64 {
    contacts.iter().filter(|&&c| c).count() as f64
}

/// Per-step quantities the reward depends on.
#[derive(Clone, Copy, Debug)]
pub struct RewardInputs {
    pub palm_position: Vector3<f64>,
    pub tips: FingertipSet,
    pub contacts: [bool; NUM_FINGERS],
    pub object_height: f64,
    pub start_height: f64,
}

/// Weighted sum of the four terms. `demo_tips` must be in the same frame as
/// `inputs.tips`.
pub fn total_reward(
    inputs: &RewardInputs,
    context: &Keypoints,
    demo_tips: &[Vector3<f64>; NUM_FINGERS],
    weights: &RewardWeights,
    flags: AblationFlags,
) -> RewardBreakdown {
    let target = if flags.pose_context {
        context.centroid() + Vector3::z() * POSE_CONTEXT_TOP_OFFSET
    } else {
        context.top_face_center()
    };
    let r_pos = r_pos_to(&inputs.palm_position, &target, weights.w1);
    let r_hand = r_hand(&inputs.tips, demo_tips, &[true; NUM_FINGERS], weights.w2);
    let r_lift = r_lift(inputs.object_height, inputs.start_height, weights.w3);
    let r_contact = r_contact(&inputs.contacts);
    let hand_mix = if flags.no_demo { 0.0 } else { weights.mix[1] };
    let total = weights.mix[0] * r_pos + hand_mix * r_hand + weights.mix[2] * r_lift + weights.mix[3] * r_contact;
    RewardBreakdown {
        r_pos,
        r_hand,
        r_lift,
        r_contact,
        total,
    }
}
