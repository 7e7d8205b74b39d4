//! The episodic decision process: viewpoint actions in, observation sets and
//! rewards out.
//!
//! Each high-level step the drone moves to the commanded viewpoint (teleport
//! transition during training, MPC tracking at test time), the targets
//! advance, every target is observed, measurements are fused into the
//! beliefs, and the reward combines the entropy drop, classification events,
//! completion, a time penalty, and an action magnitude penalty.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::belief::{
    conflate, entropy_nats, normalized_entropy, update_status, Belief, ClassificationStatus,
};
use crate::config::{
    CameraModel, EpisodeConfig, MpcConfig, ObservationLaw, RewardWeights, SocialForcesConfig,
    TrainingSchedule, WorldConfig,
};
use crate::geom::{wrap_angle, Vec2, Vec3};
use crate::mpc::{MpcTracker, ViewpointTarget};
use crate::sensor::{observe_scene, ClassProbability};
use crate::world::{
    sample_arena_point, step_drone_firstorder, step_targets_cv, step_targets_social,
    drone_step_detail, DroneState, TargetState,
};
use crate::config::DynamicsMode;

/// What the policy sees of one target, expressed in the drone body frame
/// (+y forward, +x right).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetObservation {
    pub rel_position: Vec2,
    pub rel_velocity: Vec2,
    /// Target facing relative to the drone yaw, radians.
    pub rel_facing: f64,
    /// Normalized entropy of the fused belief, in [0, 1].
    pub belief_entropy: f64,
    /// Normalized entropy of the latest measurement, in [0, 1].
    pub measurement_entropy: f64,
    pub classified: bool,
}

/// Viewpoint displacement in the drone body frame plus a yaw increment.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ViewpointAction {
    pub delta_position: Vec2,
    pub delta_yaw: f64,
}

/// Per-axis action bounds: the farthest the drone can travel in one
/// high-level period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionBounds {
    pub pos: f64,
    pub yaw: f64,
}

impl ActionBounds {
    pub fn from_world(cfg: &WorldConfig) -> Self {
        Self {
            pos: cfg.drone_v_max * cfg.tau_h,
            yaw: cfg.drone_yaw_rate_max * cfg.tau_h,
        }
    }

    pub fn clamp(&self, a: &ViewpointAction) -> ViewpointAction {
        ViewpointAction {
            delta_position: Vec2::new(
                a.delta_position.x.clamp(-self.pos, self.pos),
                a.delta_position.y.clamp(-self.pos, self.pos),
            ),
            delta_yaw: a.delta_yaw.clamp(-self.yaw, self.yaw),
        }
    }
}

/// Rotate a world-frame vector into the drone body frame (+y forward).
pub fn world_to_frame(v: Vec2, yaw: f64) -> Vec2 {
    let (s, c) = yaw.sin_cos();
    Vec2::new(v.x * s - v.y * c, v.x * c + v.y * s)
}

/// Rotate a body-frame vector back into the world frame.
pub fn frame_to_world(v: Vec2, yaw: f64) -> Vec2 {
    let (s, c) = yaw.sin_cos();
    Vec2::new(v.x * s + v.y * c, -v.x * c + v.y * s)
}

/// Full simulator state of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeState {
    pub targets: Vec<TargetState>,
    pub goals: Vec<Vec2>,
    pub drone: DroneState,
    pub beliefs: Vec<Belief>,
    pub statuses: Vec<ClassificationStatus>,
    pub last_measurements: Vec<ClassProbability>,
    pub last_visibility: Vec<bool>,
    pub step_index: usize,
    /// Targets that latched classified with a wrong argmax class.
    pub misclassified: usize,
}

impl EpisodeState {
    pub fn num_targets(&self) -> usize {
        self.targets.len()
    }

    pub fn num_classified(&self) -> usize {
        self.statuses.iter().filter(|s| s.classified).count()
    }

    pub fn all_classified(&self) -> bool {
        self.statuses.iter().all(|s| s.classified)
    }

    /// Sample a fresh episode: non-overlapping targets, randomized classes,
    /// velocities, static subset, a random drone pose, and beliefs warmed by
    /// zero to two synthetic measurements toward the true class.
    pub fn sample(
        episode: &EpisodeConfig,
        world: &WorldConfig,
        law: &ObservationLaw,
        rng: &mut ChaCha8Rng,
    ) -> EpisodeState {
        let mut m = rng.gen_range(episode.num_targets.0..=episode.num_targets.1);
        let r = world.target_radius;

        // Non-overlapping placement with bounded retries; shrink the count
        // when the arena cannot host it.
        let mut positions: Vec<Vec2> = Vec::with_capacity(m);
        let mut attempts = 0usize;
        while positions.len() < m {
            let candidate = sample_arena_point(world, rng);
            let clear = positions
                .iter()
                .all(|p| (*p - candidate).norm() >= 2.0 * r + 1e-6);
            if clear {
                positions.push(candidate);
            }
            attempts += 1;
            if attempts > 200 * m.max(1) && positions.len() < m {
                log::warn!(
                    "placement failed after {attempts} attempts; shrinking targets {m} -> {}",
                    positions.len()
                );
                m = positions.len().max(1);
            }
        }
        m = positions.len();

        let static_fraction =
            rng.gen_range(episode.static_fraction.0..=episode.static_fraction.1);
        let n_static = (static_fraction * m as f64).round() as usize;
        let mut order: Vec<usize> = (0..m).collect();
        for i in (1..m).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut is_static = vec![false; m];
        for &idx in order.iter().take(n_static) {
            is_static[idx] = true;
        }

        // Per-axis normal speeds scaled so the mean speed matches the config,
        // then clipped at the cap.
        let axis_std = world.target_speed_mean * (2.0 / std::f64::consts::PI).sqrt();
        let normal = Normal::new(0.0, axis_std).expect("valid std");
        let mut targets = Vec::with_capacity(m);
        for i in 0..m {
            let mut velocity = if is_static[i] {
                Vec2::ZERO
            } else {
                Vec2::new(normal.sample(rng), normal.sample(rng))
            };
            let speed = velocity.norm();
            if speed > world.target_speed_cap {
                velocity = velocity * (world.target_speed_cap / speed);
            }
            let facing = if is_static[i] || velocity.norm() < 1e-9 {
                wrap_angle(rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI))
            } else {
                velocity.angle()
            };
            targets.push(TargetState {
                position: positions[i],
                velocity,
                facing,
                class_id: rng.gen_range(0..law.num_classes),
                is_static: is_static[i],
            });
        }

        let goals: Vec<Vec2> = (0..m).map(|_| sample_arena_point(world, rng)).collect();

        let drone = DroneState::at_rest(
            Vec3::new(
                rng.gen_range(0.0..world.arena_width),
                rng.gen_range(0.0..world.arena_height),
                world.drone_altitude,
            ),
            wrap_angle(rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)),
        );

        // Belief randomization: a handful of moderate synthetic measurements
        // toward the true class; two at strength 0.8 stay below b_max.
        let mut beliefs = Vec::with_capacity(m);
        for t in &targets {
            let mut b = Belief::uniform(law.num_classes);
            let k = rng.gen_range(0..=2);
            for _ in 0..k {
                let p_true: f64 = rng.gen_range(0.5..0.8);
                let rest = (1.0 - p_true) / (law.num_classes as f64 - 1.0);
                let mut probs = vec![rest; law.num_classes];
                probs[t.class_id] = p_true;
                b = conflate(&b, &ClassProbability::new(probs));
            }
            beliefs.push(b);
        }

        let statuses = vec![ClassificationStatus::new(episode.b_max); m];
        EpisodeState {
            targets,
            goals,
            drone,
            beliefs,
            statuses,
            last_measurements: vec![ClassProbability::uniform(law.num_classes); m],
            last_visibility: vec![false; m],
            step_index: 0,
            misclassified: 0,
        }
    }
}

/// One observation entry per target, kinematics rotated into the drone frame.
pub fn build_observation(state: &EpisodeState) -> Vec<TargetObservation> {
    let yaw = state.drone.yaw;
    let drone_xy = state.drone.position.xy();
    state
        .targets
        .iter()
        .enumerate()
        .map(|(j, t)| TargetObservation {
            rel_position: world_to_frame(t.position - drone_xy, yaw),
            rel_velocity: world_to_frame(t.velocity, yaw),
            rel_facing: wrap_angle(t.facing - yaw),
            belief_entropy: normalized_entropy(&state.beliefs[j].probs),
            measurement_entropy: normalized_entropy(&state.last_measurements[j].probs),
            classified: state.statuses[j].classified,
        })
        .collect()
}

/// Signed contributions of the five reward terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardTerms {
    pub entropy: f64,
    pub classified: f64,
    pub completion: f64,
    pub time: f64,
    pub action: f64,
}

impl RewardTerms {
    pub fn total(&self) -> f64 {
        self.entropy + self.classified + self.completion - self.time - self.action
    }
}

/// Reward for the transition `prev -> next` under action `action`:
/// entropy decrease summed over targets (in nats), per-target classification
/// bonuses, a completion bonus, and time plus action-magnitude penalties.
pub fn compute_reward(
    prev: &EpisodeState,
    action: &ViewpointAction,
    next: &EpisodeState,
    w: &RewardWeights,
) -> RewardTerms {
    debug_assert_eq!(prev.targets.len(), next.targets.len());
    let m = next.targets.len();
    let mut entropy_drop = 0.0;
    let mut flips = 0.0;
    for j in 0..m {
        entropy_drop += entropy_nats(&prev.beliefs[j].probs) - entropy_nats(&next.beliefs[j].probs);
        flips += (next.statuses[j].classified as i32 - prev.statuses[j].classified as i32) as f64;
    }
    let complete = next.statuses.iter().all(|s| s.classified);
    RewardTerms {
        entropy: w.w_entropy * entropy_drop,
        classified: w.w_classified * flips,
        completion: if complete && m > 0 { w.w_complete } else { 0.0 },
        time: w.w_time,
        action: w.w_action * (action.delta_position.norm() + action.delta_yaw.abs()),
    }
}

/// How the drone reaches the commanded viewpoint.
#[derive(Debug, Clone)]
pub enum TransitionMode {
    /// Training transition: the drone arrives exactly (first-order motion at
    /// the exact command).
    Teleport,
    /// Test transition: receding-horizon tracking at the low-level rate.
    Mpc(MpcConfig),
}

/// Everything returned by one environment step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub observation: Vec<TargetObservation>,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Debug, Clone)]
pub struct StepInfo {
    pub reward_terms: RewardTerms,
    pub newly_classified: usize,
    pub all_classified: bool,
    pub visible: Vec<bool>,
    /// Distance between the commanded viewpoint and the pose actually
    /// reached; zero under the teleport transition.
    pub tracking_error: f64,
}

/// Episodic environment owning its RNG stream, state and transition mode.
pub struct Env {
    pub world: WorldConfig,
    pub social: SocialForcesConfig,
    pub camera: CameraModel,
    pub law: ObservationLaw,
    pub reward: RewardWeights,
    pub episode: EpisodeConfig,
    pub bounds: ActionBounds,
    transition: TransitionMode,
    tracker: Option<MpcTracker>,
    timeout_steps: usize,
    rng: ChaCha8Rng,
    state: EpisodeState,
}

impl Env {
    pub fn new(
        world: WorldConfig,
        social: SocialForcesConfig,
        camera: CameraModel,
        law: ObservationLaw,
        reward: RewardWeights,
        episode: EpisodeConfig,
        transition: TransitionMode,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = EpisodeState::sample(&episode, &world, &law, &mut rng);
        let tracker = match &transition {
            TransitionMode::Teleport => None,
            TransitionMode::Mpc(cfg) => Some(MpcTracker::new(cfg.clone())),
        };
        let bounds = ActionBounds::from_world(&world);
        let timeout_steps = episode.timeout_steps(&world);
        Self {
            world,
            social,
            camera,
            law,
            reward,
            episode,
            bounds,
            transition,
            tracker,
            timeout_steps,
            rng,
            state,
        }
    }

    pub fn state(&self) -> &EpisodeState {
        &self.state
    }

    /// Replace the episode state wholesale; a hook for constructing specific
    /// scenarios in tests and diagnostics.
    pub fn set_state(&mut self, state: EpisodeState) {
        self.state = state;
    }

    pub fn timeout_steps(&self) -> usize {
        self.timeout_steps
    }

    /// Restart the RNG stream; the next reset is fully determined by `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// Curriculum hook: adjust the target-count range for upcoming resets.
    pub fn set_num_targets(&mut self, range: (usize, usize)) {
        self.episode.num_targets = range;
    }

    pub fn reset(&mut self) -> Vec<TargetObservation> {
        self.state = EpisodeState::sample(&self.episode, &self.world, &self.law, &mut self.rng);
        if let Some(tracker) = &mut self.tracker {
            tracker.reset();
        }
        build_observation(&self.state)
    }

    /// Apply one viewpoint action over a high-level period.
    pub fn step(&mut self, action: &ViewpointAction) -> StepOutcome {
        let clamped = self.bounds.clamp(action);
        let prev = self.state.clone();
        let substeps = self.world.substeps();

        let world_delta = frame_to_world(clamped.delta_position, self.state.drone.yaw);
        let mut tracking_error = 0.0;
        match &self.transition {
            TransitionMode::Teleport => {
                // First-order motion at the exact command reaches the clamped
                // viewpoint by construction.
                let v_cmd = Vec3::from_xy(world_delta / self.world.tau_h, 0.0);
                let yaw_cmd = clamped.delta_yaw / self.world.tau_h;
                self.state.drone = step_drone_firstorder(
                    &self.state.drone,
                    v_cmd,
                    yaw_cmd,
                    &self.world,
                    self.world.tau_h,
                );
                self.advance_targets(substeps);
            }
            TransitionMode::Mpc(_) => {
                let target_xy = Vec2::new(
                    (self.state.drone.position.x + world_delta.x).clamp(0.0, self.world.arena_width),
                    (self.state.drone.position.y + world_delta.y)
                        .clamp(0.0, self.world.arena_height),
                );
                let viewpoint = ViewpointTarget {
                    position: Vec3::from_xy(target_xy, self.world.drone_altitude),
                    yaw: wrap_angle(self.state.drone.yaw + clamped.delta_yaw),
                };
                let mut tracker = self.tracker.take().expect("tracker present in MPC mode");
                for _ in 0..substeps {
                    let u = tracker.track(&self.state.drone, &viewpoint, &self.world);
                    let (next, _) =
                        drone_step_detail(&self.state.drone, &u, &self.world, self.world.tau_l);
                    self.state.drone = next;
                    self.advance_targets(1);
                }
                self.tracker = Some(tracker);
                tracking_error =
                    (self.state.drone.position - viewpoint.position).norm();
            }
        }

        let scene = observe_scene(
            &self.state.drone,
            &self.state.targets,
            &self.camera,
            &self.world,
            &self.law,
        );
        for j in 0..self.state.targets.len() {
            let was_classified = self.state.statuses[j].classified;
            self.state.beliefs[j] = conflate(&self.state.beliefs[j], &scene.probs[j]);
            self.state.statuses[j] = update_status(&self.state.beliefs[j], self.state.statuses[j]);
            if !was_classified
                && self.state.statuses[j].classified
                && self.state.beliefs[j].argmax() != self.state.targets[j].class_id
            {
                self.state.misclassified += 1;
            }
        }
        self.state.last_measurements = scene.probs;
        self.state.last_visibility = scene.visible.clone();
        self.state.step_index += 1;

        let terms = compute_reward(&prev, &clamped, &self.state, &self.reward);
        let newly = self.state.num_classified() - prev.num_classified();
        let all = self.state.all_classified();
        let done = all || self.state.step_index >= self.timeout_steps;

        StepOutcome {
            observation: build_observation(&self.state),
            reward: terms.total(),
            done,
            info: StepInfo {
                reward_terms: terms,
                newly_classified: newly,
                all_classified: all,
                visible: scene.visible,
                tracking_error,
            },
        }
    }

    fn advance_targets(&mut self, substeps: usize) {
        for _ in 0..substeps {
            match self.episode.dynamics {
                DynamicsMode::Cv => {
                    self.state.targets =
                        step_targets_cv(&self.state.targets, &self.world, self.world.tau_l);
                }
                DynamicsMode::Social => {
                    let (targets, goals) = step_targets_social(
                        &self.state.targets,
                        &self.state.goals,
                        &self.social,
                        &self.world,
                        self.world.tau_l,
                        &mut self.rng,
                    );
                    self.state.targets = targets;
                    self.state.goals = goals;
                }
            }
        }
    }
}

/// Episode configuration in force at a given point of the curriculum.
pub fn curriculum_phase(
    base: &EpisodeConfig,
    schedule: &TrainingSchedule,
    global_step: u64,
) -> EpisodeConfig {
    let mut cfg = base.clone();
    cfg.num_targets = schedule.phase_targets(global_step);
    cfg
}
