//! Configuration types for the simulator, sensor model, training and control
//! stacks, plus the JSON config file that bundles them.
//!
//! Every struct carries embedded defaults so an empty config file (or none at
//! all) yields the standard setup: a 50x50 m arena stepped at 0.25 s, cylinder
//! targets of 0.6 m radius and 1.8 m height, a 400 px pinhole camera, and the
//! standard PPO hyperparameters.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse config file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Arena geometry, timing and kinematic limits.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub arena_width: f64,
    pub arena_height: f64,
    /// High-level (measurement / policy) period in seconds.
    pub tau_h: f64,
    /// Low-level (controller) period in seconds. Must divide `tau_h`.
    pub tau_l: f64,
    pub target_radius: f64,
    pub target_height: f64,
    pub target_speed_mean: f64,
    pub target_speed_cap: f64,
    /// Drone speed limit per axis, m/s.
    pub drone_v_max: f64,
    /// Drone yaw rate limit, rad/s.
    pub drone_yaw_rate_max: f64,
    pub drone_altitude: f64,
    /// When false the drone's z coordinate stays pinned to `drone_altitude`.
    pub allow_z: bool,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            arena_width: 50.0,
            arena_height: 50.0,
            tau_h: 0.25,
            tau_l: 0.05,
            target_radius: 0.6,
            target_height: 1.8,
            target_speed_mean: 1.0,
            target_speed_cap: 1.5,
            drone_v_max: 2.0,
            drone_yaw_rate_max: 60f64.to_radians(),
            drone_altitude: 2.0,
            allow_z: false,
        }
    }
}

impl WorldConfig {
    /// Number of low-level steps per high-level step.
    pub fn substeps(&self) -> usize {
        (self.tau_h / self.tau_l).round() as usize
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.tau_h > self.tau_l && self.tau_l > 0.0) {
            return Err(ConfigError::Invalid(
                "tau_h must exceed tau_l and both must be positive".into(),
            ));
        }
        let n = self.tau_h / self.tau_l;
        if (n - n.round()).abs() > 1e-9 {
            return Err(ConfigError::Invalid(
                "tau_h must be an integer multiple of tau_l".into(),
            ));
        }
        for (name, v) in [
            ("arena_width", self.arena_width),
            ("arena_height", self.arena_height),
            ("target_radius", self.target_radius),
            ("target_height", self.target_height),
            ("drone_altitude", self.drone_altitude),
        ] {
            if v <= 0.0 {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Parameters of the social-forces pedestrian dynamics used at test time.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SocialForcesConfig {
    /// Relaxation gain toward the desired velocity, 1/s.
    pub goal_attraction_gain: f64,
    pub target_repulsion_strength: f64,
    pub repulsion_range: f64,
    pub wall_repulsion_strength: f64,
    pub desired_speed: f64,
    /// Goals closer than this are resampled uniformly in the arena.
    pub goal_resample_radius: f64,
}

impl Default for SocialForcesConfig {
    fn default() -> Self {
        Self {
            goal_attraction_gain: 1.0,
            target_repulsion_strength: 2.0,
            repulsion_range: 2.0,
            wall_repulsion_strength: 2.0,
            desired_speed: 1.0,
            goal_resample_radius: 0.5,
        }
    }
}

/// Synthetic pinhole camera, mounted forward-looking at the drone yaw with a
/// fixed downward pitch.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraModel {
    pub focal_px: f64,
    pub image_width: f64,
    pub image_height: f64,
    /// Downward pitch of the optical axis, radians.
    pub pitch: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            focal_px: 400.0,
            image_width: 640.0,
            image_height: 480.0,
            pitch: 30f64.to_radians(),
        }
    }
}

/// Constants of the synthetic classifier probability law.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ObservationLaw {
    pub num_classes: usize,
    /// True-class probability floor before skew decay.
    pub p_floor: f64,
    /// True-class probability ceiling.
    pub p_ceil: f64,
    /// Linear gain on area / area_ref.
    pub area_gain: f64,
    /// Projected area, px^2, at which the area bonus saturates.
    pub area_ref: f64,
    /// Exponential decay rate in skew.
    pub skew_decay: f64,
    /// Multiplicative penalty when the trapezoid does not fit in the image.
    pub frame_penalty: f64,
}

impl Default for ObservationLaw {
    fn default() -> Self {
        Self {
            num_classes: 2,
            p_floor: 0.5,
            p_ceil: 0.95,
            area_gain: 0.45,
            area_ref: 6000.0,
            skew_decay: 2.0,
            frame_penalty: 0.2,
        }
    }
}

/// Weights of the five reward terms.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub w_entropy: f64,
    pub w_classified: f64,
    pub w_complete: f64,
    pub w_time: f64,
    pub w_action: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            w_entropy: 1.0,
            w_classified: 5.0,
            w_complete: 100.0,
            w_time: 0.3,
            w_action: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DynamicsMode {
    /// Constant velocity with elastic rebounds.
    Cv,
    /// Social-forces pedestrian dynamics.
    Social,
}

impl std::str::FromStr for DynamicsMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cv" => Ok(DynamicsMode::Cv),
            "social" => Ok(DynamicsMode::Social),
            other => Err(format!("unknown dynamics mode '{other}' (expected cv|social)")),
        }
    }
}

impl std::fmt::Display for DynamicsMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DynamicsMode::Cv => write!(f, "cv"),
            DynamicsMode::Social => write!(f, "social"),
        }
    }
}

/// Per-episode settings: timeout, target counts and dynamics.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    /// Episode timeout in seconds.
    pub timeout: f64,
    /// Belief threshold above which a target latches to classified.
    pub b_max: f64,
    /// Inclusive range the target count is sampled from.
    pub num_targets: (usize, usize),
    /// Inclusive range the static fraction is sampled from.
    pub static_fraction: (f64, f64),
    pub dynamics: DynamicsMode,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            timeout: 100.0,
            b_max: 0.95,
            num_targets: (1, 12),
            static_fraction: (0.0, 0.5),
            dynamics: DynamicsMode::Cv,
        }
    }
}

impl EpisodeConfig {
    /// Episode length in high-level steps.
    pub fn timeout_steps(&self, world: &WorldConfig) -> usize {
        (self.timeout / world.tau_h).round() as usize
    }

    pub fn with_num_targets(mut self, lo: usize, hi: usize) -> Self {
        self.num_targets = (lo, hi);
        self
    }
}

/// Network sizing and input conditioning for the attention policy.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub d_h: usize,
    pub d_enc: usize,
    pub heads: usize,
    /// Scale applied to relative position features before the first layer.
    pub input_scale: f64,
    pub log_std_init: f64,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            d_h: 16,
            d_enc: 64,
            heads: 4,
            input_scale: 0.1,
            log_std_init: -0.5,
            log_std_min: -5.0,
            log_std_max: 2.0,
        }
    }
}

/// PPO hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoHyperparams {
    pub gae_lambda: f64,
    pub gamma: f64,
    pub steps_per_update: usize,
    pub epochs_per_update: usize,
    pub minibatch_size: usize,
    pub clip_param: f64,
    pub kl_target: f64,
    pub learning_rate: f64,
    pub kl_coeff_init: f64,
    pub value_loss_coeff: f64,
    pub entropy_coeff: f64,
    pub grad_clip: f64,
}

impl Default for PpoHyperparams {
    fn default() -> Self {
        Self {
            gae_lambda: 0.95,
            gamma: 0.99,
            steps_per_update: 16000,
            epochs_per_update: 30,
            minibatch_size: 256,
            clip_param: 0.3,
            kl_target: 0.01,
            learning_rate: 3e-4,
            kl_coeff_init: 0.2,
            value_loss_coeff: 1.0,
            entropy_coeff: 0.001,
            grad_clip: 0.1,
        }
    }
}

/// Two-phase curriculum: train broad, then fine-tune on fewer targets.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSchedule {
    /// Total environment steps.
    pub budget: u64,
    /// Step at which phase 2 starts; defaults to 75% of the budget.
    pub phase_boundary: Option<u64>,
    pub phase1_targets: (usize, usize),
    pub phase2_targets: (usize, usize),
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        Self {
            budget: 400_000,
            phase_boundary: None,
            phase1_targets: (1, 12),
            phase2_targets: (1, 6),
        }
    }
}

impl TrainingSchedule {
    pub fn boundary(&self) -> u64 {
        self.phase_boundary.unwrap_or(self.budget / 4 * 3)
    }

    /// Target-count range in force at `global_step`.
    pub fn phase_targets(&self, global_step: u64) -> (usize, usize) {
        if global_step < self.boundary() {
            self.phase1_targets
        } else {
            self.phase2_targets
        }
    }
}

/// Receding-horizon controller settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    pub horizon: usize,
    /// Stage cost weight on the input norm.
    pub w_input: f64,
    /// Terminal cost weight on the normalized state error.
    pub w_terminal: f64,
    /// Acceleration box, +-m/s^2 per linear axis.
    pub accel_limit: f64,
    /// Yaw acceleration box, +-rad/s^2.
    pub yaw_accel_limit: f64,
    pub max_iterations: usize,
    pub step_size: f64,
    pub grad_tolerance: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            w_input: 0.01,
            w_terminal: 10.0,
            accel_limit: 4.0,
            yaw_accel_limit: 4.0,
            max_iterations: 60,
            step_size: 0.5,
            grad_tolerance: 1e-6,
        }
    }
}

/// Top-level bundle loaded from the JSON config file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub world: WorldConfig,
    pub social_forces: SocialForcesConfig,
    pub camera: CameraModel,
    pub observation: ObservationLaw,
    pub episode: EpisodeConfig,
    pub reward: RewardWeights,
    pub policy: PolicyConfig,
    pub ppo: PpoHyperparams,
    pub training: TrainingSchedule,
    pub mpc: MpcConfig,
}

impl SimConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)?;
        let cfg: SimConfig = serde_json::from_str(&text)?;
        cfg.world.validate()?;
        Ok(cfg)
    }
}
