//! Synthetic pinhole "black-box" classifier.
//!
//! A target is visible when the segment from the drone to its center hits no
//! other target cylinder and the center projects inside the image. The class
//! information sits on the front face of the cylinder; its projected
//! trapezoid's area and skew drive the probability the classifier assigns to
//! the true class. Nothing outside this module reads area or skew: the rest
//! of the stack treats the returned distributions as a black box.

use serde::{Deserialize, Serialize};

use crate::config::{CameraModel, ObservationLaw, WorldConfig};
use crate::geom::{Vec2, Vec3};
use crate::world::{DroneState, TargetState};

const MIN_DEPTH: f64 = 1e-9;

/// Probability vector over classes produced by one observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProbability {
    pub probs: Vec<f64>,
}

impl ClassProbability {
    pub fn new(probs: Vec<f64>) -> Self {
        let sum: f64 = probs.iter().sum();
        debug_assert!((sum - 1.0).abs() < 1e-9, "probabilities sum to {sum}");
        debug_assert!(probs.iter().all(|&p| (0.0..=1.0 + 1e-12).contains(&p)));
        Self { probs }
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self {
            probs: vec![1.0 / num_classes as f64; num_classes],
        }
    }

    pub fn is_uniform(&self) -> bool {
        let u = 1.0 / self.probs.len() as f64;
        self.probs.iter().all(|&p| (p - u).abs() < 1e-12)
    }
}

/// Projection of the front face of one target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrapezoidProjection {
    /// Image-plane corners in pixels: bottom and top of each silhouette edge.
    pub corners: [[f64; 2]; 4],
    /// Projected area in px^2 by the shoelace formula; zero for a back-facing
    /// front.
    pub area: f64,
    /// 1 - max(0, cos(angle between facing and target-to-drone direction)).
    pub skew: f64,
    pub fits_in_image: bool,
}

/// Camera basis derived from the drone pose: forward along yaw pitched down,
/// image u to the right, v downward.
struct CameraView {
    origin: Vec3,
    right: Vec3,
    down: Vec3,
    forward: Vec3,
    focal: f64,
    cx: f64,
    cy: f64,
    width: f64,
    height: f64,
}

impl CameraView {
    fn new(drone: &DroneState, cam: &CameraModel) -> Self {
        let (sy, cy_) = drone.yaw.sin_cos();
        let (sp, cp) = cam.pitch.sin_cos();
        Self {
            origin: drone.position,
            forward: Vec3::new(cy_ * cp, sy * cp, -sp),
            right: Vec3::new(sy, -cy_, 0.0),
            down: Vec3::new(-sp * cy_, -sp * sy, -cp),
            focal: cam.focal_px,
            cx: cam.image_width / 2.0,
            cy: cam.image_height / 2.0,
            width: cam.image_width,
            height: cam.image_height,
        }
    }

    /// Project a world point; None when it lies on or behind the image plane.
    fn project(&self, p: Vec3) -> Option<[f64; 2]> {
        let d = p - self.origin;
        let depth = d.dot(self.forward);
        if depth <= MIN_DEPTH {
            return None;
        }
        Some([
            self.focal * d.dot(self.right) / depth + self.cx,
            self.focal * d.dot(self.down) / depth + self.cy,
        ])
    }

    fn in_bounds(&self, uv: [f64; 2]) -> bool {
        uv[0] >= 0.0 && uv[0] <= self.width && uv[1] >= 0.0 && uv[1] <= self.height
    }
}

/// Visibility test: the 3D sight line from the drone to the target center must
/// clear every other cylinder (2D segment-vs-circle with a height gate) and
/// the center must project inside the image bounds.
pub fn is_visible(
    drone: &DroneState,
    target: &TargetState,
    others: &[TargetState],
    cam: &CameraModel,
    world: &WorldConfig,
) -> bool {
    let view = CameraView::new(drone, cam);
    let center = Vec3::from_xy(target.position, world.target_height / 2.0);
    match view.project(center) {
        Some(uv) if view.in_bounds(uv) => {}
        _ => return false,
    }

    let a = drone.position.xy();
    let b = target.position;
    let ab = b - a;
    let len_sq = ab.norm_sq();
    for other in others {
        // Skip degenerate occluders coincident with the target itself.
        if (other.position - target.position).norm_sq() < 1e-18 {
            continue;
        }
        let s = if len_sq > 1e-18 {
            ((other.position - a).dot(ab) / len_sq).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let closest = a + ab * s;
        if (other.position - closest).norm() < world.target_radius {
            let sight_z = drone.position.z + s * (center.z - drone.position.z);
            if sight_z < world.target_height {
                return false;
            }
        }
    }
    true
}

fn shoelace_area(pts: &[[f64; 2]]) -> f64 {
    let n = pts.len();
    let mut acc = 0.0;
    for i in 0..n {
        let j = (i + 1) % n;
        acc += pts[i][0] * pts[j][1] - pts[j][0] * pts[i][1];
    }
    acc.abs() / 2.0
}

/// Project the front face of a target cylinder. The face is the diametral
/// rectangle spanning the forward half of the cylinder; its silhouette edges
/// are the vertical edges at +-90 degrees from the facing direction, so the
/// projected image is a trapezoid.
pub fn project_front_face(
    drone: &DroneState,
    target: &TargetState,
    cam: &CameraModel,
    world: &WorldConfig,
) -> TrapezoidProjection {
    let view = CameraView::new(drone, cam);
    let facing = Vec2::from_angle(target.facing);
    let to_drone = (drone.position.xy() - target.position).normalized_or_zero(1e-12);
    let cos_view = facing.dot(to_drone);
    let skew = 1.0 - cos_view.max(0.0);

    let lateral = facing.perp() * world.target_radius;
    let e1 = target.position + lateral;
    let e2 = target.position - lateral;
    let solids = [
        Vec3::from_xy(e1, 0.0),
        Vec3::from_xy(e1, world.target_height),
        Vec3::from_xy(e2, world.target_height),
        Vec3::from_xy(e2, 0.0),
    ];

    let mut corners = [[0.0; 2]; 4];
    let mut all_projected = true;
    let mut fits = true;
    for (slot, p) in corners.iter_mut().zip(solids) {
        match view.project(p) {
            Some(uv) => {
                fits &= view.in_bounds(uv);
                *slot = uv;
            }
            None => {
                all_projected = false;
                fits = false;
            }
        }
    }

    let area = if cos_view <= 0.0 || !all_projected {
        0.0
    } else {
        shoelace_area(&corners)
    };

    TrapezoidProjection {
        corners,
        area,
        skew,
        fits_in_image: fits,
    }
}

/// Map a projection to a class distribution: the true-class probability grows
/// linearly with area up to a reference, decays exponentially with skew, and
/// is penalized multiplicatively when the trapezoid does not fit the image.
/// Anything below chance collapses to the uniform distribution.
pub fn observe_class(
    tp: &TrapezoidProjection,
    true_class: usize,
    law: &ObservationLaw,
) -> ClassProbability {
    let c = law.num_classes;
    debug_assert!(c >= 2);
    debug_assert!(true_class < c);
    let base = (law.p_floor + law.area_gain * (tp.area / law.area_ref).min(1.0))
        .clamp(law.p_floor, law.p_ceil);
    let frame = if tp.fits_in_image {
        1.0
    } else {
        law.frame_penalty
    };
    let p_true = base * (-law.skew_decay * tp.skew).exp() * frame;
    if p_true < 1.0 / c as f64 {
        return ClassProbability::uniform(c);
    }
    let rest = (1.0 - p_true) / (c as f64 - 1.0);
    let mut probs = vec![rest; c];
    probs[true_class] = p_true;
    ClassProbability::new(probs)
}

/// Measurement and visibility for every target in one frame.
#[derive(Debug, Clone)]
pub struct SceneObservation {
    pub probs: Vec<ClassProbability>,
    pub visible: Vec<bool>,
}

/// Observe every target: visible ones through the classifier law, occluded or
/// out-of-view ones as exactly uniform.
pub fn observe_scene(
    drone: &DroneState,
    targets: &[TargetState],
    cam: &CameraModel,
    world: &WorldConfig,
    law: &ObservationLaw,
) -> SceneObservation {
    let mut probs = Vec::with_capacity(targets.len());
    let mut visible = Vec::with_capacity(targets.len());
    for (j, target) in targets.iter().enumerate() {
        let mut others: Vec<TargetState> = Vec::with_capacity(targets.len().saturating_sub(1));
        others.extend(targets.iter().enumerate().filter(|(k, _)| *k != j).map(|(_, t)| *t));
        let vis = is_visible(drone, target, &others, cam, world);
        visible.push(vis);
        if vis {
            let tp = project_front_face(drone, target, cam, world);
            probs.push(observe_class(&tp, target.class_id, law));
        } else {
            probs.push(ClassProbability::uniform(law.num_classes));
        }
    }
    SceneObservation { probs, visible }
}

/// Spec-facing convenience: just the per-target distributions.
pub fn observe_all(
    drone: &DroneState,
    targets: &[TargetState],
    cam: &CameraModel,
    world: &WorldConfig,
    law: &ObservationLaw,
) -> Vec<ClassProbability> {
    observe_scene(drone, targets, cam, world, law).probs
}

/// One row of the sensor debug dump.
#[derive(Debug, Clone, Copy)]
pub struct SensorDebugRow {
    pub target: usize,
    pub visible: bool,
    pub area: f64,
    pub skew: f64,
    pub p_true: f64,
}

/// Per-target (area, skew, p_true) rows for offline inspection.
pub fn debug_rows(
    drone: &DroneState,
    targets: &[TargetState],
    cam: &CameraModel,
    world: &WorldConfig,
    law: &ObservationLaw,
) -> Vec<SensorDebugRow> {
    let scene = observe_scene(drone, targets, cam, world, law);
    targets
        .iter()
        .enumerate()
        .map(|(j, t)| {
            let tp = project_front_face(drone, t, cam, world);
            SensorDebugRow {
                target: j,
                visible: scene.visible[j],
                area: tp.area,
                skew: tp.skew,
                p_true: scene.probs[j].probs[t.class_id],
            }
        })
        .collect()
}
