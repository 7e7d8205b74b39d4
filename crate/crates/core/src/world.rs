//! Target and drone kinematics.
//!
//! Targets are cylinders moving in the plane: either constant-velocity with
//! elastic rebounds off each other and the walls, or driven by social-forces
//! pedestrian dynamics. The drone follows first-order velocity control during
//! training and a clamped double integrator under the MPC tracker at test
//! time. All stepping is pure state-in/state-out.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{SocialForcesConfig, WorldConfig};
use crate::geom::{wrap_angle, Vec2, Vec3};

const SPEED_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("control input outside the admissible box: {0:?}")]
    InputOutsideBox([f64; 4]),
}

/// One cylinder target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetState {
    pub position: Vec2,
    pub velocity: Vec2,
    /// Direction of the class-bearing front face, radians in (-pi, pi].
    pub facing: f64,
    pub class_id: usize,
    pub is_static: bool,
}

/// Drone pose and rates. z stays at the configured altitude unless the world
/// config unlocks it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DroneState {
    pub position: Vec3,
    pub yaw: f64,
    pub velocity: Vec3,
    pub yaw_rate: f64,
}

impl DroneState {
    pub fn at_rest(position: Vec3, yaw: f64) -> Self {
        Self {
            position,
            yaw,
            velocity: Vec3::ZERO,
            yaw_rate: 0.0,
        }
    }
}

/// Admissible acceleration box for the double-integrator input.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct InputBox {
    pub accel: f64,
    pub yaw_accel: f64,
}

impl InputBox {
    pub fn contains(&self, u: &[f64; 4]) -> bool {
        u[0].abs() <= self.accel + 1e-12
            && u[1].abs() <= self.accel + 1e-12
            && u[2].abs() <= self.accel + 1e-12
            && u[3].abs() <= self.yaw_accel + 1e-12
    }

    pub fn project(&self, u: &mut [f64; 4]) {
        u[0] = u[0].clamp(-self.accel, self.accel);
        u[1] = u[1].clamp(-self.accel, self.accel);
        u[2] = u[2].clamp(-self.accel, self.accel);
        u[3] = u[3].clamp(-self.yaw_accel, self.yaw_accel);
    }
}

fn reflect_off_walls(t: &mut TargetState, cfg: &WorldConfig) {
    let r = cfg.target_radius;
    let (lo_x, hi_x) = (r, cfg.arena_width - r);
    let (lo_y, hi_y) = (r, cfg.arena_height - r);
    if t.position.x < lo_x {
        t.position.x = lo_x + (lo_x - t.position.x);
        t.velocity.x = t.velocity.x.abs();
    } else if t.position.x > hi_x {
        t.position.x = hi_x - (t.position.x - hi_x);
        t.velocity.x = -t.velocity.x.abs();
    }
    if t.position.y < lo_y {
        t.position.y = lo_y + (lo_y - t.position.y);
        t.velocity.y = t.velocity.y.abs();
    } else if t.position.y > hi_y {
        t.position.y = hi_y - (t.position.y - hi_y);
        t.velocity.y = -t.velocity.y.abs();
    }
    t.position.x = t.position.x.clamp(lo_x, hi_x);
    t.position.y = t.position.y.clamp(lo_y, hi_y);
}

/// Resolve pairwise overlaps sequentially in index order: separate positions
/// along the contact normal, then exchange the normal velocity components of
/// an equal-mass elastic contact. Contacts with a static target reflect the
/// mover instead so static targets never move.
fn resolve_collisions(targets: &mut [TargetState], cfg: &WorldConfig) {
    let n = targets.len();
    let min_dist = 2.0 * cfg.target_radius;
    for i in 0..n {
        for j in (i + 1)..n {
            let delta = targets[j].position - targets[i].position;
            let dist = delta.norm();
            if dist >= min_dist {
                continue;
            }
            let normal = if dist > 1e-12 {
                delta / dist
            } else {
                Vec2::new(1.0, 0.0)
            };
            let overlap = min_dist - dist;
            match (targets[i].is_static, targets[j].is_static) {
                (false, false) => {
                    targets[i].position += normal * (-overlap * 0.5);
                    targets[j].position += normal * (overlap * 0.5);
                    let vi_n = targets[i].velocity.dot(normal);
                    let vj_n = targets[j].velocity.dot(normal);
                    // Exchange only if approaching, to avoid re-colliding a
                    // separating pair.
                    if vi_n - vj_n > 0.0 {
                        targets[i].velocity += normal * (vj_n - vi_n);
                        targets[j].velocity += normal * (vi_n - vj_n);
                    }
                }
                (false, true) => {
                    targets[i].position += normal * (-overlap);
                    let v_n = targets[i].velocity.dot(normal);
                    if v_n > 0.0 {
                        targets[i].velocity += normal * (-2.0 * v_n);
                    }
                }
                (true, false) => {
                    targets[j].position += normal * overlap;
                    let v_n = targets[j].velocity.dot(normal);
                    if v_n < 0.0 {
                        targets[j].velocity += normal * (-2.0 * v_n);
                    }
                }
                (true, true) => {}
            }
        }
    }
    for t in targets.iter_mut() {
        if !t.is_static {
            let r = cfg.target_radius;
            t.position.x = t.position.x.clamp(r, cfg.arena_width - r);
            t.position.y = t.position.y.clamp(r, cfg.arena_height - r);
        }
    }
}

fn update_facing(targets: &mut [TargetState]) {
    for t in targets.iter_mut() {
        if !t.is_static && t.velocity.norm() > SPEED_EPS {
            t.facing = t.velocity.angle();
        }
    }
}

/// Advance constant-velocity targets by `dt`, rebounding elastically off
/// each other and the walls.
pub fn step_targets_cv(targets: &[TargetState], cfg: &WorldConfig, dt: f64) -> Vec<TargetState> {
    debug_assert!(dt > 0.0);
    let mut out = targets.to_vec();
    for t in out.iter_mut() {
        if t.is_static {
            continue;
        }
        t.position += t.velocity * dt;
        reflect_off_walls(t, cfg);
    }
    resolve_collisions(&mut out, cfg);
    update_facing(&mut out);
    out
}

/// Advance targets under social-forces dynamics: relaxation toward the goal
/// velocity, exponential pairwise and wall repulsion, speed capped at the
/// configured limit. Goals within the resample radius are redrawn uniformly
/// in the arena.
pub fn step_targets_social<R: Rng>(
    targets: &[TargetState],
    goals: &[Vec2],
    sf: &SocialForcesConfig,
    cfg: &WorldConfig,
    dt: f64,
    rng: &mut R,
) -> (Vec<TargetState>, Vec<Vec2>) {
    debug_assert!(dt > 0.0);
    debug_assert_eq!(targets.len(), goals.len());
    let mut out = targets.to_vec();
    let mut new_goals = goals.to_vec();
    let r = cfg.target_radius;
    let diameter = 2.0 * r;

    for i in 0..out.len() {
        if out[i].is_static {
            continue;
        }
        let pos = out[i].position;
        let to_goal = new_goals[i] - pos;
        let desired = to_goal.normalized_or_zero(1e-9) * sf.desired_speed;
        let mut accel = (desired - out[i].velocity) * sf.goal_attraction_gain;

        for j in 0..out.len() {
            if i == j {
                continue;
            }
            let away = pos - out[j].position;
            let dist = away.norm();
            if dist < 1e-9 {
                continue;
            }
            let magnitude =
                sf.target_repulsion_strength * ((diameter - dist) / sf.repulsion_range).exp();
            accel += (away / dist) * magnitude;
        }

        let wall_gaps = [
            (pos.x, Vec2::new(1.0, 0.0)),
            (cfg.arena_width - pos.x, Vec2::new(-1.0, 0.0)),
            (pos.y, Vec2::new(0.0, 1.0)),
            (cfg.arena_height - pos.y, Vec2::new(0.0, -1.0)),
        ];
        for (gap, inward) in wall_gaps {
            let magnitude = sf.wall_repulsion_strength * ((r - gap) / sf.repulsion_range).exp();
            accel += inward * magnitude;
        }

        out[i].velocity += accel * dt;
        let speed = out[i].velocity.norm();
        if speed > cfg.target_speed_cap {
            out[i].velocity = out[i].velocity * (cfg.target_speed_cap / speed);
        }
        let step = out[i].velocity * dt;
        out[i].position += step;
        reflect_off_walls(&mut out[i], cfg);

        if (new_goals[i] - out[i].position).norm() < sf.goal_resample_radius {
            new_goals[i] = sample_arena_point(cfg, rng);
        }
    }
    resolve_collisions(&mut out, cfg);
    update_facing(&mut out);
    (out, new_goals)
}

/// Uniform point inside the arena with a radius margin off the walls.
pub fn sample_arena_point<R: Rng>(cfg: &WorldConfig, rng: &mut R) -> Vec2 {
    let r = cfg.target_radius;
    Vec2::new(
        rng.gen_range(r..cfg.arena_width - r),
        rng.gen_range(r..cfg.arena_height - r),
    )
}

/// First-order drone motion: commands are clamped to the per-axis limits and
/// integrated directly. Used as the training-time transition.
pub fn step_drone_firstorder(
    d: &DroneState,
    v_cmd: Vec3,
    yaw_cmd: f64,
    cfg: &WorldConfig,
    dt: f64,
) -> DroneState {
    debug_assert!(dt > 0.0);
    let v = Vec3::new(
        v_cmd.x.clamp(-cfg.drone_v_max, cfg.drone_v_max),
        v_cmd.y.clamp(-cfg.drone_v_max, cfg.drone_v_max),
        if cfg.allow_z {
            v_cmd.z.clamp(-cfg.drone_v_max, cfg.drone_v_max)
        } else {
            0.0
        },
    );
    let yaw_rate = yaw_cmd.clamp(-cfg.drone_yaw_rate_max, cfg.drone_yaw_rate_max);
    let mut position = d.position + v * dt;
    position.x = position.x.clamp(0.0, cfg.arena_width);
    position.y = position.y.clamp(0.0, cfg.arena_height);
    if !cfg.allow_z {
        position.z = cfg.drone_altitude;
    }
    DroneState {
        position,
        yaw: wrap_angle(d.yaw + yaw_rate * dt),
        velocity: v,
        yaw_rate,
    }
}

/// Which state components passed through the clamps unclamped in one
/// double-integrator step. Needed by the MPC adjoint.
#[derive(Debug, Clone, Copy)]
pub struct StepMasks {
    /// vx, vy, vz, yaw_rate free (not saturated).
    pub vel_free: [bool; 4],
    /// x, y free (not clamped to the arena walls).
    pub pos_free: [bool; 2],
}

/// Double-integrator step shared by the public dynamics and the MPC solver:
/// accelerate, clamp rates, integrate, clamp position to the arena.
pub(crate) fn drone_step_detail(
    x: &DroneState,
    u: &[f64; 4],
    cfg: &WorldConfig,
    dt: f64,
) -> (DroneState, StepMasks) {
    let vmax = cfg.drone_v_max;
    let wmax = cfg.drone_yaw_rate_max;
    let raw = [
        x.velocity.x + u[0] * dt,
        x.velocity.y + u[1] * dt,
        if cfg.allow_z {
            x.velocity.z + u[2] * dt
        } else {
            0.0
        },
        x.yaw_rate + u[3] * dt,
    ];
    let clamped = [
        raw[0].clamp(-vmax, vmax),
        raw[1].clamp(-vmax, vmax),
        raw[2].clamp(-vmax, vmax),
        raw[3].clamp(-wmax, wmax),
    ];
    let vel_free = [
        raw[0] == clamped[0],
        raw[1] == clamped[1],
        cfg.allow_z && raw[2] == clamped[2],
        raw[3] == clamped[3],
    ];
    let mut position = x.position + Vec3::new(clamped[0], clamped[1], clamped[2]) * dt;
    let pos_free = [
        position.x > 0.0 && position.x < cfg.arena_width,
        position.y > 0.0 && position.y < cfg.arena_height,
    ];
    position.x = position.x.clamp(0.0, cfg.arena_width);
    position.y = position.y.clamp(0.0, cfg.arena_height);
    if !cfg.allow_z {
        position.z = cfg.drone_altitude;
    }
    let next = DroneState {
        position,
        yaw: wrap_angle(x.yaw + clamped[3] * dt),
        velocity: Vec3::new(clamped[0], clamped[1], clamped[2]),
        yaw_rate: clamped[3],
    };
    (next, StepMasks { vel_free, pos_free })
}

/// Test-time drone dynamics: double integrator on (x, y, z, yaw) with
/// per-axis rate clamps. Rejects inputs outside the admissible box.
pub fn drone_dynamics_f(
    x: &DroneState,
    u: [f64; 4],
    input_box: &InputBox,
    cfg: &WorldConfig,
    dt: f64,
) -> Result<DroneState, WorldError> {
    if !input_box.contains(&u) {
        return Err(WorldError::InputOutsideBox(u));
    }
    Ok(drone_step_detail(x, &u, cfg, dt).0)
}
