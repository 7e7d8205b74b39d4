//! Comparison policies: the hand-crafted frontal-viewpoint controller, the
//! sequential single-target wrapper, and the mean-pooling ablation of the
//! attention network.

use crate::env::{ActionBounds, TargetObservation, ViewpointAction};
use crate::geom::Vec2;
use crate::policy::{PolicyOutput, PolicyParams, Pooling};

/// Sequential focus over unclassified targets, nearest first. The focus is
/// re-evaluated only when it becomes classified (or disappears); ties break
/// toward the lowest index.
#[derive(Debug, Clone, Default)]
pub struct SequentialPlan {
    focus: Option<usize>,
}

impl SequentialPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.focus = None;
    }

    /// Current focus target, if any unclassified target exists.
    pub fn update(&mut self, obs: &[TargetObservation]) -> Option<usize> {
        if let Some(f) = self.focus {
            if f < obs.len() && !obs[f].classified {
                return self.focus;
            }
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, o) in obs.iter().enumerate() {
            if o.classified {
                continue;
            }
            let d = o.rel_position.norm();
            match best {
                Some((_, bd)) if d >= bd => {}
                _ => best = Some((i, d)),
            }
        }
        self.focus = best.map(|(i, _)| i);
        self.focus
    }
}

/// Desired viewpoint for one target, in the drone body frame: 2 m in front of
/// the face, camera turned onto the target.
pub fn desired_viewpoint(o: &TargetObservation) -> (Vec2, f64) {
    // A world direction at angle (yaw + rel_facing) has body-frame
    // coordinates (-sin rel_facing, cos rel_facing).
    let facing_dir = Vec2::new(-o.rel_facing.sin(), o.rel_facing.cos());
    let desired_pos = o.rel_position + facing_dir * 2.0;
    let bearing = (-o.rel_position.x).atan2(o.rel_position.y);
    (desired_pos, bearing)
}

/// Hand-crafted policy: clamped step toward 2 m in front of the focus target
/// while pointing the camera at it. Zero action when everything is
/// classified.
pub fn handcrafted_action(
    obs: &[TargetObservation],
    plan: &mut SequentialPlan,
    bounds: &ActionBounds,
) -> ViewpointAction {
    let Some(focus) = plan.update(obs) else {
        return ViewpointAction::default();
    };
    let (desired_pos, bearing) = desired_viewpoint(&obs[focus]);
    bounds.clamp(&ViewpointAction {
        delta_position: desired_pos,
        delta_yaw: bearing,
    })
}

/// Mean-pooling ablation forward pass. The trunk is the same self-attention
/// block; only the aggregation differs.
pub fn deepsets_forward(obs: &[TargetObservation], params: &PolicyParams) -> PolicyOutput {
    assert_eq!(
        params.pooling,
        Pooling::Mean,
        "deepsets forward requires mean pooling parameters"
    );
    params.forward(obs).0
}

/// Single-target wrapper: feed only the focus target's observation through
/// the policy network. Returns the network output and the focus index; the
/// caller fuses measurements of every target regardless.
pub fn single_target_forward(
    obs: &[TargetObservation],
    plan: &mut SequentialPlan,
    params: &PolicyParams,
) -> Option<(PolicyOutput, usize)> {
    let focus = plan.update(obs)?;
    let single = [obs[focus]];
    Some((params.forward(&single).0, focus))
}
