//! Pinhole camera math: intrinsics, projection, reprojection of UVZ
//! landmarks, nose-centred normalization and iris-based metric scaling.
//!
//! Conventions: camera frame is x right, y down, z forward (cm for metric
//! quantities). Landmark `z` values are *relative* depths that are
//! proportional to true depth with an unknown global scale, so
//! [`reproject`] recovers the face shape up to scale. [`normalize_face`]
//! removes that scale and [`estimate_face_scale`] puts a metric one back.

use std::sync::Arc;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::headpose::HeadPose;
use crate::preprocess::ScreenSpec;

/// Standard human iris diameter used for metric scaling, in cm.
pub const IRIS_DIAMETER_CM: f64 = 1.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("degenerate face: left and right landmarks coincide")]
    DegenerateFace,
    #[error("degenerate iris: measured diameter {0} px")]
    DegenerateIris(f64),
    #[error("point {index} is behind the camera (z = {z})")]
    BehindCamera { index: usize, z: f64 },
    #[error("unit mismatch: expected {expected:?}, got {actual:?}")]
    UnitMismatch { expected: PointUnit, actual: PointUnit },
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Pinhole intrinsics `K`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    /// Canonical intrinsics for when none are known: focal length equal to
    /// the image width in pixels, principal point at the image centre.
    pub fn default_for_image(width: u32, height: u32) -> Self {
        let w = f64::from(width);
        Self {
            fx: w,
            fy: w,
            cx: w / 2.0,
            cy: f64::from(height) / 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx.is_finite() && self.fx > 0.0 && self.fy.is_finite() && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(
                "principal point must be finite".into(),
            ));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Projects a camera-frame point. Caller guarantees `p.z > 0`.
    #[inline]
    pub fn project_point(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Back-projects pixel `(u, v)` to the camera-frame point at depth `z`.
    #[inline]
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }
}

/// Landmark indices the geometry and preprocessing code needs.
///
/// The topology is data: the 468-point MediaPipe mesh and the synthetic
/// 31-point mesh both load through this record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LandmarkTopology {
    pub nose_idx: usize,
    pub left_idx: usize,
    pub right_idx: usize,
    /// Iris ring landmarks, ordered around the ring so that `i` and
    /// `i + len/2` are opposite each other.
    pub left_iris: Vec<usize>,
    pub right_iris: Vec<usize>,
    /// Eye contour `p1..p6`: corners at `p1`, `p4`; `p2`/`p6` and `p3`/`p5`
    /// are the upper/lower lid pairs.
    pub left_eye_ring: [usize; 6],
    pub right_eye_ring: [usize; 6],
    /// Eye corners ordered from image-left to image-right in an upright
    /// frontal view: `[right_outer, right_inner, left_inner, left_outer]`.
    pub eye_corner_idxs: [usize; 4],
}

impl LandmarkTopology {
    /// MediaPipe face-mesh defaults for the nose and face-edge landmarks;
    /// eye and iris indices follow the refined 478-point mesh.
    pub fn mediapipe() -> Self {
        Self {
            nose_idx: 4,
            left_idx: 356,
            right_idx: 127,
            left_iris: vec![474, 475, 476, 477],
            right_iris: vec![469, 470, 471, 472],
            left_eye_ring: [263, 387, 385, 362, 380, 373],
            right_eye_ring: [33, 160, 158, 133, 153, 144],
            eye_corner_idxs: [33, 133, 362, 263],
        }
    }

    /// Smallest landmark count that resolves every index.
    pub fn required_points(&self) -> usize {
        self.all_indices().max().map_or(0, |m| m + 1)
    }

    fn all_indices(&self) -> impl Iterator<Item = usize> + '_ {
        [self.nose_idx, self.left_idx, self.right_idx]
            .into_iter()
            .chain(self.left_iris.iter().copied())
            .chain(self.right_iris.iter().copied())
            .chain(self.left_eye_ring)
            .chain(self.right_eye_ring)
            .chain(self.eye_corner_idxs)
    }

    pub fn validate(&self, n_points: usize) -> Result<()> {
        if let Some(bad) = self.all_indices().find(|&i| i >= n_points) {
            return Err(GeometryError::InvalidTopology(format!(
                "index {bad} out of range for {n_points} landmarks"
            )));
        }
        fn distinct(name: &str, idx: &[usize]) -> Result<()> {
            for (a, x) in idx.iter().enumerate() {
                if idx[a + 1..].contains(x) {
                    return Err(GeometryError::InvalidTopology(format!(
                        "{name} repeats index {x}"
                    )));
                }
            }
            Ok(())
        }
        for (name, iris) in [("left_iris", &self.left_iris), ("right_iris", &self.right_iris)] {
            if iris.len() < 2 || iris.len() % 2 != 0 {
                return Err(GeometryError::InvalidTopology(format!(
                    "{name} needs an even number (>= 2) of ring landmarks, got {}",
                    iris.len()
                )));
            }
            distinct(name, iris)?;
        }
        distinct("left_eye_ring", &self.left_eye_ring)?;
        distinct("right_eye_ring", &self.right_eye_ring)?;
        distinct("eye_corner_idxs", &self.eye_corner_idxs)?;
        distinct("nose/left/right", &[self.nose_idx, self.left_idx, self.right_idx])?;
        Ok(())
    }
}

/// One frame of image-plane landmarks `(u px, v px, z relative)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkFrame {
    points: Vec<Vector3<f64>>,
    topology: Arc<LandmarkTopology>,
}

impl LandmarkFrame {
    pub fn new(points: Vec<Vector3<f64>>, topology: Arc<LandmarkTopology>) -> Result<Self> {
        if points.len() < 7 {
            return Err(GeometryError::InvalidInput(format!(
                "need at least 7 landmarks, got {}",
                points.len()
            )));
        }
        topology.validate(points.len())?;
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(GeometryError::InvalidInput(format!(
                "landmark {i} has a non-finite coordinate"
            )));
        }
        Ok(Self { points, topology })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn topology(&self) -> &LandmarkTopology {
        &self.topology
    }

    pub fn topology_arc(&self) -> &Arc<LandmarkTopology> {
        &self.topology
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    #[inline]
    pub fn uv(&self, i: usize) -> Vector2<f64> {
        self.points[i].xy()
    }

    pub fn uvs(&self) -> Vec<Vector2<f64>> {
        self.points.iter().map(|p| p.xy()).collect()
    }

    /// Applies a 2D similarity/affine map to the `(u, v)` coordinates,
    /// leaving relative depth untouched.
    pub fn map_uv(&self, f: impl Fn(Vector2<f64>) -> Vector2<f64>) -> Self {
        let points = self
            .points
            .iter()
            .map(|p| {
                let q = f(p.xy());
                Vector3::new(q.x, q.y, p.z)
            })
            .collect();
        Self { points, topology: Arc::clone(&self.topology) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PointUnit {
    /// Reprojected with relative depth: true shape up to an unknown scale.
    RelativeReprojected,
    /// Nose at origin, left-right distance 1.
    Normalized,
    /// Centimetres.
    MetricCm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FacePoints3D {
    pub points: Vec<Vector3<f64>>,
    pub unit: PointUnit,
}

impl FacePoints3D {
    pub fn new(points: Vec<Vector3<f64>>, unit: PointUnit) -> Self {
        Self { points, unit }
    }

    fn expect(&self, unit: PointUnit) -> Result<()> {
        if self.unit == unit {
            Ok(())
        } else {
            Err(GeometryError::UnitMismatch { expected: unit, actual: self.unit })
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// `X = (u - cx) z / fx`, `Y = (v - cy) z / fy`, `Z = z`.
pub fn reproject(frame: &LandmarkFrame, k: &CameraIntrinsics) -> Result<FacePoints3D> {
    k.validate()?;
    let points = frame.points.iter().map(|p| k.unproject(p.x, p.y, p.z)).collect();
    Ok(FacePoints3D::new(points, PointUnit::RelativeReprojected))
}

/// Rigidly transforms `points` by `pose` and projects them through `k`.
pub fn project(
    points: &FacePoints3D,
    k: &CameraIntrinsics,
    pose: &HeadPose,
) -> Result<Vec<Vector2<f64>>> {
    points.expect(PointUnit::MetricCm)?;
    project_raw(&points.points, k, pose)
}

/// [`project`] without the unit check, for camera-frame geometry that is
/// not a metric face (e.g. round-trip checks on reprojected points).
pub fn project_raw(
    points: &[Vector3<f64>],
    k: &CameraIntrinsics,
    pose: &HeadPose,
) -> Result<Vec<Vector2<f64>>> {
    let r = pose.rotation();
    let t = pose.translation();
    points
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let c = r * p + t;
            if !(c.z > 0.0) {
                return Err(GeometryError::BehindCamera { index, z: c.z });
            }
            Ok(k.project_point(&c))
        })
        .collect()
}

/// `x_F = (x_R - x_nose) / ||x_left - x_right||`.
pub fn normalize_face(points: &FacePoints3D, topo: &LandmarkTopology) -> Result<FacePoints3D> {
    points.expect(PointUnit::RelativeReprojected)?;
    topo.validate(points.len())?;
    let nose = points.points[topo.nose_idx];
    let width = (points.points[topo.left_idx] - points.points[topo.right_idx]).norm();
    if !(width > 0.0) || !width.is_finite() {
        return Err(GeometryError::DegenerateFace);
    }
    let normalized = points.points.iter().map(|p| (p - nose) / width).collect();
    Ok(FacePoints3D::new(normalized, PointUnit::Normalized))
}

/// Mean pixel diameter of one iris: average length of its opposing
/// ring-landmark pairs.
pub fn iris_diameter_px(frame: &LandmarkFrame, iris: &[usize]) -> f64 {
    let half = iris.len() / 2;
    let sum: f64 = (0..half)
        .map(|i| (frame.uv(iris[i]) - frame.uv(iris[i + half])).norm())
        .sum();
    sum / half as f64
}

/// Face width in pixels between the leftmost and rightmost landmarks.
pub fn face_width_px(frame: &LandmarkFrame, topo: &LandmarkTopology) -> f64 {
    (frame.uv(topo.left_idx) - frame.uv(topo.right_idx)).norm()
}

/// Metric face width `alpha * d_w / d_iris` in cm. Multiplying normalized
/// points by this gives centimetres.
pub fn estimate_face_scale(
    frame: &LandmarkFrame,
    topo: &LandmarkTopology,
    alpha_cm: f64,
) -> Result<f64> {
    topo.validate(frame.len())?;
    let d_iris =
        0.5 * (iris_diameter_px(frame, &topo.left_iris) + iris_diameter_px(frame, &topo.right_iris));
    if !(d_iris > 0.0) || !d_iris.is_finite() {
        return Err(GeometryError::DegenerateIris(d_iris));
    }
    Ok(alpha_cm * face_width_px(frame, topo) / d_iris)
}

/// Scales normalized points to centimetres.
pub fn scale_to_metric(points: &FacePoints3D, scale_cm: f64) -> Result<FacePoints3D> {
    points.expect(PointUnit::Normalized)?;
    Ok(FacePoints3D::new(
        points.points.iter().map(|p| p * scale_cm).collect(),
        PointUnit::MetricCm,
    ))
}

/// Full chain from a landmark frame to metric face-frame points:
/// reproject, normalize, iris scale, then undo the camera-frame rotation
/// with `Rᵀ` so the result can be posed by `[R | t]`.
pub fn metric_face_points(
    frame: &LandmarkFrame,
    k: &CameraIntrinsics,
    rotation: &Matrix3<f64>,
    alpha_cm: f64,
) -> Result<FacePoints3D> {
    let topo = frame.topology();
    let normalized = normalize_face(&reproject(frame, k)?, topo)?;
    let scale = estimate_face_scale(frame, topo, alpha_cm)?;
    let rt = rotation.transpose();
    Ok(FacePoints3D::new(
        normalized.points.iter().map(|p| rt * (p * scale)).collect(),
        PointUnit::MetricCm,
    ))
}

/// Point-of-gaze error in centimetres between two normalized gaze vectors.
pub fn pog_error_cm(g_pred: [f64; 2], g_true: [f64; 2], screen: &ScreenSpec) -> f64 {
    let dx = (g_pred[0] - g_true[0]) * screen.width_cm;
    let dy = (g_pred[1] - g_true[1]) * screen.height_cm;
    dx.hypot(dy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn k600() -> CameraIntrinsics {
        CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0).unwrap()
    }

    fn tiny_topology() -> Arc<LandmarkTopology> {
        Arc::new(LandmarkTopology {
            nose_idx: 0,
            left_idx: 1,
            right_idx: 2,
            left_iris: vec![3, 4],
            right_iris: vec![5, 6],
            left_eye_ring: [7, 8, 9, 10, 11, 12],
            right_eye_ring: [13, 14, 15, 16, 17, 18],
            eye_corner_idxs: [13, 16, 10, 7],
        })
    }

    fn frame_from(points: Vec<Vector3<f64>>) -> LandmarkFrame {
        LandmarkFrame::new(points, tiny_topology()).unwrap()
    }

    fn random_points(seed: u64, n: usize) -> Vec<Vector3<f64>> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(0.0..640.0),
                    rng.random_range(0.0..480.0),
                    rng.random_range(0.5..2.0),
                )
            })
            .collect()
    }

    #[test]
    fn reproject_principal_point_ray() {
        let mut pts = random_points(1, 19);
        pts[0] = Vector3::new(320.0, 240.0, 5.0);
        pts[1] = Vector3::new(320.0 + 600.0, 240.0, 2.0);
        let r = reproject(&frame_from(pts), &k600()).unwrap();
        assert!((r.points[0] - Vector3::new(0.0, 0.0, 5.0)).norm() < 1e-12);
        assert!((r.points[1] - Vector3::new(2.0, 0.0, 2.0)).norm() < 1e-12);
    }

    #[test]
    fn reproject_rejects_non_finite() {
        let mut pts = random_points(2, 19);
        pts[3].x = f64::NAN;
        assert!(matches!(
            LandmarkFrame::new(pts, tiny_topology()),
            Err(GeometryError::InvalidInput(_))
        ));
    }

    #[test]
    fn project_optical_axis() {
        let pose = HeadPose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 60.0)).unwrap();
        let pts = FacePoints3D::new(
            vec![Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)],
            PointUnit::MetricCm,
        );
        let uv = project(&pts, &k600(), &pose).unwrap();
        assert!((uv[0] - Vector2::new(320.0, 240.0)).norm() < 1e-12);
        assert!((uv[1] - Vector2::new(330.0, 240.0)).norm() < 1e-12);
    }

    #[test]
    fn project_behind_camera() {
        let pose = HeadPose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 1.0)).unwrap();
        let pts = FacePoints3D::new(vec![Vector3::new(0.0, 0.0, -2.0)], PointUnit::MetricCm);
        assert!(matches!(
            project(&pts, &k600(), &pose),
            Err(GeometryError::BehindCamera { index: 0, .. })
        ));
    }

    #[test]
    fn project_matches_matrix_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let k = CameraIntrinsics::new(910.0, 880.0, 301.0, 255.0).unwrap();
        for _ in 0..50 {
            let rot = nalgebra::Rotation3::from_euler_angles(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-3.0..3.0),
            );
            let t = Vector3::new(
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(40.0..80.0),
            );
            let pose = HeadPose::new(*rot.matrix(), t).unwrap();
            let pts: Vec<_> = (0..10)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(-8.0..8.0),
                        rng.random_range(-8.0..8.0),
                        rng.random_range(-4.0..4.0),
                    )
                })
                .collect();
            let uv = project(&FacePoints3D::new(pts.clone(), PointUnit::MetricCm), &k, &pose).unwrap();
            // 3x4 projection matrix K [R | t] applied to homogeneous points.
            let km = k.matrix();
            let mut rt = nalgebra::Matrix3x4::<f64>::zeros();
            rt.fixed_view_mut::<3, 3>(0, 0).copy_from(rot.matrix());
            rt.set_column(3, &t);
            let p = km * rt;
            for (x, got) in pts.iter().zip(&uv) {
                let h = p * nalgebra::Vector4::new(x.x, x.y, x.z, 1.0);
                let want = Vector2::new(h.x / h.z, h.y / h.z);
                assert!((want - got).norm() < 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn reproject_project_round_trip(seed in 0u64..10_000) {
            let frame = frame_from(random_points(seed, 19));
            let k = k600();
            let rel = reproject(&frame, &k).unwrap();
            let identity = HeadPose::new(Matrix3::identity(), Vector3::zeros()).unwrap();
            let uv = project_raw(&rel.points, &k, &identity).unwrap();
            for (i, q) in uv.iter().enumerate() {
                prop_assert!((q - frame.uv(i)).norm() < 1e-9);
            }
        }

        #[test]
        fn normalize_is_similarity_invariant(
            seed in 0u64..10_000,
            scale in 0.1f64..20.0,
            tx in -50.0f64..50.0,
            ty in -50.0f64..50.0,
            tz in -50.0f64..50.0,
        ) {
            let frame = frame_from(random_points(seed, 19));
            let rel = reproject(&frame, &k600()).unwrap();
            let base = normalize_face(&rel, frame.topology()).unwrap();
            let shift = Vector3::new(tx, ty, tz);
            let moved = FacePoints3D::new(
                rel.points.iter().map(|p| p * scale + shift).collect(),
                PointUnit::RelativeReprojected,
            );
            let out = normalize_face(&moved, frame.topology()).unwrap();
            for (a, b) in base.points.iter().zip(&out.points) {
                prop_assert!((a - b).norm() < 1e-9);
            }
            let topo = frame.topology();
            prop_assert!(out.points[topo.nose_idx].norm() < 1e-9);
            prop_assert!(((out.points[topo.left_idx] - out.points[topo.right_idx]).norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn face_scale_is_pixel_scale_invariant(seed in 0u64..10_000, s in 0.2f64..5.0) {
            let frame = frame_from(random_points(seed, 19));
            let topo = frame.topology().clone();
            let Ok(a) = estimate_face_scale(&frame, &topo, IRIS_DIAMETER_CM) else { return Ok(()) };
            let scaled = frame.map_uv(|p| p * s);
            let b = estimate_face_scale(&scaled, &topo, IRIS_DIAMETER_CM).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }

        #[test]
        fn pog_error_is_a_metric(
            a in prop::array::uniform2(-0.5f64..0.5),
            b in prop::array::uniform2(-0.5f64..0.5),
            c in prop::array::uniform2(-0.5f64..0.5),
        ) {
            let screen = ScreenSpec::new(1920, 1080, 34.4, 19.4).unwrap();
            let ab = pog_error_cm(a, b, &screen);
            prop_assert!((ab - pog_error_cm(b, a, &screen)).abs() < 1e-12);
            prop_assert!(ab <= pog_error_cm(a, c, &screen) + pog_error_cm(c, b, &screen) + 1e-12);
        }
    }

    #[test]
    fn normalize_rejects_coincident_edges() {
        let mut pts = random_points(3, 19);
        pts[2] = pts[1];
        let rel = reproject(&frame_from(pts), &k600()).unwrap();
        assert_eq!(normalize_face(&rel, &tiny_topology()), Err(GeometryError::DegenerateFace));
    }

    #[test]
    fn face_scale_direct_substitution() {
        // Face width 120 px, both irises 12 px.
        let mut pts = random_points(4, 19);
        pts[1] = Vector3::new(380.0, 200.0, 1.0);
        pts[2] = Vector3::new(260.0, 200.0, 1.0);
        pts[3] = Vector3::new(340.0, 190.0, 1.0);
        pts[4] = Vector3::new(352.0, 190.0, 1.0);
        pts[5] = Vector3::new(280.0, 190.0, 1.0);
        pts[6] = Vector3::new(280.0, 202.0, 1.0);
        let frame = frame_from(pts.clone());
        let s = estimate_face_scale(&frame, &tiny_topology(), 1.2).unwrap();
        assert!((s - 12.0).abs() < 1e-12);

        // Width equal to iris diameter gives alpha back.
        pts[1] = Vector3::new(272.0, 200.0, 1.0);
        let frame = frame_from(pts);
        let s = estimate_face_scale(&frame, &tiny_topology(), 1.2).unwrap();
        assert!((s - 1.2).abs() < 1e-12);
    }

    #[test]
    fn face_scale_rejects_zero_iris() {
        let mut pts = random_points(5, 19);
        pts[4] = pts[3];
        pts[6] = pts[5];
        let frame = frame_from(pts);
        assert!(matches!(
            estimate_face_scale(&frame, &tiny_topology(), 1.2),
            Err(GeometryError::DegenerateIris(_))
        ));
    }

    #[test]
    fn pog_error_examples() {
        let screen = ScreenSpec::new(1920, 1080, 30.0, 20.0).unwrap();
        assert_eq!(pog_error_cm([0.1, -0.2], [0.1, -0.2], &screen), 0.0);
        assert!((pog_error_cm([0.5, 0.0], [0.0, 0.0], &screen) - 15.0).abs() < 1e-12);
        assert!((pog_error_cm([0.1, 0.1], [0.0, 0.0], &screen) - 13f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn default_intrinsics_rule() {
        let k = CameraIntrinsics::default_for_image(1280, 720);
        assert_eq!((k.fx, k.fy, k.cx, k.cy), (1280.0, 1280.0, 640.0, 360.0));
    }

    #[test]
    fn topology_validation() {
        let topo = tiny_topology();
        assert!(topo.validate(19).is_ok());
        assert!(topo.validate(18).is_err());
        let mut bad = (*topo).clone();
        bad.left_iris = vec![3, 4, 5];
        assert!(bad.validate(19).is_err());
        assert_eq!(LandmarkTopology::mediapipe().required_points(), 478);
    }
}
