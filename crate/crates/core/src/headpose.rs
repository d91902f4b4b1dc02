//! Metric head translation from monocular landmarks.
//!
//! The rotation comes from the landmark provider and is reused unchanged.
//! Translation starts at a fixed depth with the nose pinned to its observed
//! pixel, then the depth is refined by radial votes: each landmark reports
//! whether the observed face is dilated (nearer) or contracted (farther)
//! relative to the current projection. After each depth update the XY
//! translation is rescaled by similar triangles so the nose stays pinned.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, CameraIntrinsics, FacePoints3D, GeometryError, LandmarkFrame};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoseError {
    #[error("rotation is not orthonormal with det 1 (orthogonality error {ortho:.3e}, det {det:.6})")]
    NotARotation { ortho: f64, det: f64 },
    #[error("translation must be finite")]
    NonFiniteTranslation,
    #[error("invalid solver config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Rigid head pose: face frame to camera frame, translation in cm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl HeadPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, PoseError> {
        check_rotation(&rotation)?;
        if !translation.iter().all(|c| c.is_finite()) {
            return Err(PoseError::NonFiniteTranslation);
        }
        Ok(Self { rotation, translation })
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// `[R | t]` flattened row-major into 12 values: the 9 rotation entries
    /// followed by the translation.
    pub fn flatten(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = self.rotation[(r, c)];
            }
        }
        out[9..].copy_from_slice(self.translation.as_slice());
        out
    }
}

pub fn check_rotation(r: &Matrix3<f64>) -> Result<(), PoseError> {
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = r.determinant();
    if !(ortho <= 1e-6 && (det - 1.0).abs() <= 1e-6) {
        return Err(PoseError::NotARotation { ortho, det });
    }
    Ok(())
}

/// How the per-landmark votes turn into a depth step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// Votes are unit vectors: the step is `beta` times the mean vote, so it
    /// never exceeds `beta` cm regardless of how far off the depth is.
    UnitVotes,
    /// Votes carry their pixel residual, converted to centimetres of depth
    /// through similar triangles (`z / mean observed radius`). A full step
    /// (`beta = 1`) is a first-order estimate of the remaining depth error.
    DepthScaled,
    /// Least-squares scale of the projected points about the pinned nose:
    /// `ε = Σ d·c / Σ ‖c‖²` with `c = projected − nose`, giving
    /// `z ← z / (1 + ε)`. Its fixed point is the reprojection optimum.
    #[default]
    ScaleFit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Initial depth, cm.
    pub z0: f64,
    pub beta: f64,
    /// Clip bound on a single depth step, cm.
    pub delta_max: f64,
    /// Stop once `|z_update|` falls below this, cm.
    pub z_stop: f64,
    pub max_iters: usize,
    pub step_rule: StepRule,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            z0: 60.0,
            beta: 1.0,
            delta_max: 5.0,
            z_stop: 1e-3,
            max_iters: 10,
            step_rule: StepRule::ScaleFit,
        }
    }
}

impl SolverConfig {
    pub fn depth_scaled() -> Self {
        Self { step_rule: StepRule::DepthScaled, z_stop: 0.25, ..Self::default() }
    }

    /// The literal unit-vote rule with its original step scale of 0.1.
    pub fn unit_votes() -> Self {
        Self { beta: 0.1, step_rule: StepRule::UnitVotes, z_stop: 0.25, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), PoseError> {
        let positive = [self.z0, self.beta, self.delta_max, self.z_stop]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if !positive || self.max_iters == 0 {
            return Err(PoseError::InvalidConfig("all parameters must be positive".into()));
        }
        if self.z_stop >= self.delta_max {
            return Err(PoseError::InvalidConfig(format!(
                "z_stop ({}) must be below delta_max ({})",
                self.z_stop, self.delta_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub pose: HeadPose,
    pub iterations: usize,
    pub final_z_update: f64,
    pub initial_reprojection_rmse: f64,
    pub final_reprojection_rmse: f64,
    pub converged: bool,
}

/// Translation with depth `z` whose projected nose lands on `nose_uv`.
///
/// `t.z = z`; the transformed nose `R p_nose + t` is placed on the nose ray
/// at its own depth, so `t = ray(u, v) * (z + (R p)_z) - R p`.
pub fn pinned_translation(
    nose_uv: Vector2<f64>,
    nose_model: &Vector3<f64>,
    rotation: &Matrix3<f64>,
    k: &CameraIntrinsics,
    z: f64,
) -> Vector3<f64> {
    let rp = rotation * nose_model;
    let nose_cam = k.unproject(nose_uv.x, nose_uv.y, z + rp.z);
    Vector3::new(nose_cam.x - rp.x, nose_cam.y - rp.y, z)
}

pub fn init_translation(
    frame: &LandmarkFrame,
    metric_points: &FacePoints3D,
    rotation: &Matrix3<f64>,
    k: &CameraIntrinsics,
    cfg: &SolverConfig,
) -> Result<Vector3<f64>, PoseError> {
    let nose = frame.topology().nose_idx;
    let model = metric_points
        .points
        .get(nose)
        .ok_or_else(|| GeometryError::InvalidInput("nose landmark missing".into()))?;
    Ok(pinned_translation(frame.uv(nose), model, rotation, k, cfg.z0))
}

/// One radial depth step from matched observed/projected landmarks.
///
/// `c_i` is the outward direction of each projected point from the
/// projected centroid; `sign(v_i . c_i) > 0` means the observed face is
/// larger than the projection, which yields a negative (nearer) update.
/// `depth` is the current translation depth; only [`StepRule::DepthScaled`]
/// reads it.
pub fn radial_step(
    observed: &[Vector2<f64>],
    projected: &[Vector2<f64>],
    cfg: &SolverConfig,
    depth: f64,
) -> f64 {
    let n = observed.len().min(projected.len());
    if n == 0 {
        return 0.0;
    }
    let centroid_proj = projected[..n].iter().sum::<Vector2<f64>>() / n as f64;
    let mut votes = 0.0;
    let mut any = false;
    for (obs, proj) in observed[..n].iter().zip(&projected[..n]) {
        let d = obs - proj;
        let len = d.norm();
        if !(len > 1e-9) {
            continue;
        }
        any = true;
        let dc = d.dot(&(proj - centroid_proj));
        let sign = if dc > 0.0 {
            1.0
        } else if dc < 0.0 {
            -1.0
        } else {
            0.0
        };
        votes += match cfg.step_rule {
            StepRule::UnitVotes => sign,
            // Radial votes have no scale-fit form; callers dispatch through
            // `depth_step`.
            StepRule::DepthScaled | StepRule::ScaleFit => sign * len,
        };
    }
    if !any {
        return 0.0;
    }
    let raw = match cfg.step_rule {
        StepRule::UnitVotes => cfg.beta * votes / n as f64,
        StepRule::DepthScaled | StepRule::ScaleFit => {
            let centroid_obs = observed[..n].iter().sum::<Vector2<f64>>() / n as f64;
            let spread: f64 = observed[..n].iter().map(|o| (o - centroid_obs).norm()).sum();
            if !(spread > 0.0) {
                return 0.0;
            }
            cfg.beta * depth * votes / spread
        }
    };
    (-raw).clamp(-cfg.delta_max, cfg.delta_max)
}

/// Depth step of [`StepRule::ScaleFit`]; `anchor` is the pinned nose pixel.
pub fn scale_fit_step(
    observed: &[Vector2<f64>],
    projected: &[Vector2<f64>],
    anchor: Vector2<f64>,
    cfg: &SolverConfig,
    depth: f64,
) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (obs, proj) in observed.iter().zip(projected) {
        let c = proj - anchor;
        num += (obs - proj).dot(&c);
        den += c.norm_squared();
    }
    if !(den > 0.0) {
        return 0.0;
    }
    let eps = num / den;
    if !(1.0 + eps > 0.0) {
        return -cfg.delta_max;
    }
    (cfg.beta * (depth / (1.0 + eps) - depth)).clamp(-cfg.delta_max, cfg.delta_max)
}

/// Dispatches on [`SolverConfig::step_rule`].
pub fn depth_step(
    observed: &[Vector2<f64>],
    projected: &[Vector2<f64>],
    nose_uv: Vector2<f64>,
    cfg: &SolverConfig,
    depth: f64,
) -> f64 {
    match cfg.step_rule {
        StepRule::ScaleFit => scale_fit_step(observed, projected, nose_uv, cfg, depth),
        StepRule::UnitVotes | StepRule::DepthScaled => radial_step(observed, projected, cfg, depth),
    }
}

pub fn reprojection_rmse(observed: &[Vector2<f64>], projected: &[Vector2<f64>]) -> f64 {
    let n = observed.len().min(projected.len());
    if n == 0 {
        return 0.0;
    }
    let ss: f64 = observed.iter().zip(projected).map(|(o, p)| (o - p).norm_squared()).sum();
    (ss / n as f64).sqrt()
}

/// Reprojection RMSE of `metric_points` at the nose-pinned translation with
/// depth `z`. Shared by the solver diagnostics and depth-grid searches.
pub fn pinned_rmse(
    frame: &LandmarkFrame,
    metric_points: &FacePoints3D,
    rotation: &Matrix3<f64>,
    k: &CameraIntrinsics,
    z: f64,
) -> Result<f64, PoseError> {
    let nose = frame.topology().nose_idx;
    let t = pinned_translation(frame.uv(nose), &metric_points.points[nose], rotation, k, z);
    let pose = HeadPose::new(*rotation, t)?;
    let proj = geometry::project(metric_points, k, &pose)?;
    Ok(reprojection_rmse(&frame.uvs(), &proj))
}

/// Exhaustive search over nose-pinned depths `lo, lo + step, ..., hi`.
/// Returns the depth with the lowest reprojection RMSE and that RMSE.
pub fn depth_grid_search(
    frame: &LandmarkFrame,
    metric_points: &FacePoints3D,
    rotation: &Matrix3<f64>,
    k: &CameraIntrinsics,
    (lo, hi): (f64, f64),
    step: f64,
) -> Result<(f64, f64), PoseError> {
    if !(step > 0.0) || !(lo > 0.0) || !(hi >= lo) {
        return Err(PoseError::InvalidConfig(format!("depth grid [{lo}, {hi}] step {step}")));
    }
    let n = ((hi - lo) / step).round() as usize;
    let mut best = (f64::NAN, f64::INFINITY);
    for i in 0..=n {
        let z = lo + i as f64 * step;
        if let Ok(r) = pinned_rmse(frame, metric_points, rotation, k, z) {
            if r < best.1 {
                best = (z, r);
            }
        }
    }
    if !best.1.is_finite() {
        return Err(PoseError::InvalidConfig("no grid depth projects in front of the camera".into()));
    }
    Ok(best)
}

/// Iterative radial refinement of the metric translation.
///
/// Degenerate inputs (points behind the camera, collapsed faces) end the
/// iteration early with `converged = false` rather than failing, as long as
/// an initial pose could be formed.
pub fn solve_translation(
    frame: &LandmarkFrame,
    metric_points: &FacePoints3D,
    rotation: &Matrix3<f64>,
    k: &CameraIntrinsics,
    cfg: &SolverConfig,
) -> Result<SolveReport, PoseError> {
    cfg.validate()?;
    check_rotation(rotation)?;
    k.validate()?;
    if metric_points.len() != frame.len() {
        return Err(GeometryError::InvalidInput(format!(
            "{} metric points for {} landmarks",
            metric_points.len(),
            frame.len()
        ))
        .into());
    }
    let observed = frame.uvs();
    let nose = frame.topology().nose_idx;
    let nose_uv = frame.uv(nose);
    let nose_model = metric_points.points[nose];

    let mut t = init_translation(frame, metric_points, rotation, k, cfg)?;
    let mut pose = HeadPose::new(*rotation, t)?;
    let mut projected = match geometry::project(metric_points, k, &pose) {
        Ok(p) => p,
        Err(_) => {
            return Ok(SolveReport {
                pose,
                iterations: 0,
                final_z_update: 0.0,
                initial_reprojection_rmse: f64::NAN,
                final_reprojection_rmse: f64::NAN,
                converged: false,
            })
        }
    };
    let initial_rmse = reprojection_rmse(&observed, &projected);
    let mut iterations = 0;
    let mut z_update = 0.0;
    let mut converged = false;

    while iterations < cfg.max_iters {
        iterations += 1;
        z_update = depth_step(&observed, &projected, nose_uv, cfg, t.z);
        let z_next = t.z + z_update;
        if !(z_next > 0.0) {
            break;
        }
        t = pinned_translation(nose_uv, &nose_model, rotation, k, z_next);
        pose = HeadPose::new(*rotation, t)?;
        projected = match geometry::project(metric_points, k, &pose) {
            Ok(p) => p,
            Err(_) => break,
        };
        if z_update.abs() < cfg.z_stop {
            converged = true;
            break;
        }
    }

    let final_rmse = match geometry::project(metric_points, k, &pose) {
        Ok(p) => reprojection_rmse(&observed, &p),
        Err(_) => f64::NAN,
    };
    Ok(SolveReport {
        pose,
        iterations,
        final_z_update: z_update,
        initial_reprojection_rmse: initial_rmse,
        final_reprojection_rmse: final_rmse,
        converged: converged && final_rmse.is_finite(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring(n: usize, radius: f64, center: Vector2<f64>) -> Vec<Vector2<f64>> {
        (0..n)
            .map(|i| {
                let a = i as f64 / n as f64 * std::f64::consts::TAU;
                center + Vector2::new(a.cos(), a.sin()) * radius
            })
            .collect()
    }

    #[test]
    fn zero_residual_gives_zero_step() {
        let p = ring(12, 40.0, Vector2::new(300.0, 200.0));
        for cfg in [SolverConfig::depth_scaled(), SolverConfig::unit_votes()] {
            assert_eq!(radial_step(&p, &p, &cfg, 60.0), 0.0);
        }
    }

    #[test]
    fn dilated_observation_moves_nearer() {
        let c = Vector2::new(300.0, 200.0);
        let proj = ring(12, 40.0, c);
        let obs: Vec<_> = proj.iter().map(|p| c + (p - c) * 1.1).collect();
        let cfg = SolverConfig::unit_votes();
        let step = radial_step(&obs, &proj, &cfg, 60.0);
        assert!((step + cfg.beta).abs() < 1e-12, "all 12 points vote, step {step}");

        // One point at the centroid has no residual and abstains.
        let mut proj2 = proj.clone();
        proj2.push(c);
        let mut obs2 = obs.clone();
        obs2.push(c);
        let step = radial_step(&obs2, &proj2, &cfg, 60.0);
        assert!((step + cfg.beta * 12.0 / 13.0).abs() < 1e-12);

        // Depth-scaled: a 5% dilation at 60 cm means the face is at 60/1.05.
        let obs: Vec<_> = proj.iter().map(|p| c + (p - c) * 1.05).collect();
        let cfg = SolverConfig::depth_scaled();
        let step = radial_step(&obs, &proj, &cfg, 60.0);
        assert!((step - (60.0 / 1.05 - 60.0)).abs() < 1e-9, "step {step}");
    }

    #[test]
    fn step_is_clipped() {
        let c = Vector2::new(0.0, 0.0);
        let proj = ring(8, 1.0, c);
        let obs: Vec<_> = proj.iter().map(|p| p * 1e6).collect();
        for cfg in [
            SolverConfig::depth_scaled(),
            SolverConfig { beta: 1e3, ..SolverConfig::unit_votes() },
        ] {
            let s = radial_step(&obs, &proj, &cfg, 60.0);
            assert!(s.abs() <= cfg.delta_max + 1e-12);
            let s = radial_step(&proj, &obs, &cfg, 60.0);
            assert!(s.abs() <= cfg.delta_max + 1e-12);
        }
    }

    #[test]
    fn scale_fit_inverts_a_dilation() {
        let nose = Vector2::new(310.0, 190.0);
        let proj = ring(12, 40.0, Vector2::new(300.0, 200.0));
        let cfg = SolverConfig::default();
        assert_eq!(scale_fit_step(&proj, &proj, nose, &cfg, 60.0), 0.0);
        let obs: Vec<_> = proj.iter().map(|p| nose + (p - nose) * 1.05).collect();
        let step = scale_fit_step(&obs, &proj, nose, &cfg, 60.0);
        assert!((step - (60.0 / 1.05 - 60.0)).abs() < 1e-9, "step {step}");
        let obs: Vec<_> = proj.iter().map(|p| nose + (p - nose) * 0.5).collect();
        assert_eq!(scale_fit_step(&obs, &proj, nose, &cfg, 60.0), cfg.delta_max);
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        let bad = SolverConfig { z_stop: 6.0, ..SolverConfig::default() };
        assert!(bad.validate().is_err());
        let bad = SolverConfig { max_iters: 0, ..SolverConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn rejects_non_rotation() {
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(matches!(
            HeadPose::new(m, Vector3::zeros()),
            Err(PoseError::NotARotation { .. })
        ));
    }

    #[test]
    fn pinned_translation_centred_nose() {
        let k = CameraIntrinsics::new(800.0, 800.0, 320.0, 240.0).unwrap();
        let r = *nalgebra::Rotation3::from_euler_angles(0.1, -0.2, 0.3).matrix();
        let nose = Vector3::new(0.5, -0.3, 0.2);
        let t = pinned_translation(Vector2::new(320.0, 240.0), &nose, &r, &k, 60.0);
        let rp = r * nose;
        assert!((t.x + rp.x).abs() < 1e-12 && (t.y + rp.y).abs() < 1e-12);
        let cam = r * nose + t;
        let uv = k.project_point(&cam);
        assert!((uv - Vector2::new(320.0, 240.0)).norm() < 1e-9);
    }
}
