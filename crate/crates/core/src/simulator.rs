//! Synthetic faces with known metric geometry, pose, camera and gaze.
//!
//! The canonical mesh lives in a face frame aligned with the camera axes
//! (x towards image right, y down, z away from the camera) with the nose tip
//! at the origin. Eyes and face edges sit on the plane `z = EYE_PLANE_Z`,
//! which is also where the procedural texture is painted.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{denormalize_gaze, DatasetWriter, Splits, WriterSample};
use crate::geometry::{metric_face_points, CameraIntrinsics, GeometryError, LandmarkFrame, LandmarkTopology, IRIS_DIAMETER_CM};
use crate::headpose::{depth_grid_search, solve_translation, HeadPose, PoseError, SolverConfig};
use crate::preprocess::{eye_patch_homography, EyePatch, Image, PatchConfig, PreprocessError, ScreenSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("face behind camera: landmark {index} at depth {z:.3} cm")]
    BehindCamera { index: usize, z: f64 },
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error("writing dataset: {0}")]
    Emit(String),
}

pub type Result<T> = std::result::Result<T, SimError>;

pub const EYE_PLANE_Z: f64 = 3.0;
pub const NOSE: usize = 0;
pub const RIGHT_EDGE: usize = 3;
pub const LEFT_EDGE: usize = 4;
const RIGHT_RING: usize = 5;
const LEFT_RING: usize = 11;
const RIGHT_IRIS: usize = 17;
const LEFT_IRIS: usize = 21;
pub const MESH_POINTS: usize = 31;

/// Canonical synthetic face geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFaceSpec {
    pub face_width_cm: f64,
    pub iris_diameter_cm: f64,
    /// Eye centres (right, left) in the eye plane.
    pub eye_centres: [[f64; 2]; 2],
    pub eye_width_cm: f64,
    /// Half-height of the open lid aperture.
    pub lid_open_cm: f64,
    pub lid_closed_cm: f64,
    pub topology: LandmarkTopology,
}

impl Default for SyntheticFaceSpec {
    fn default() -> Self {
        Self {
            face_width_cm: 14.0,
            iris_diameter_cm: IRIS_DIAMETER_CM,
            eye_centres: [[-3.2, -2.5], [3.2, -2.5]],
            eye_width_cm: 3.0,
            lid_open_cm: 0.45,
            lid_closed_cm: 0.03,
            topology: Self::topology(),
        }
    }
}

impl SyntheticFaceSpec {
    /// Index layout of the 31-point mesh.
    pub fn topology() -> LandmarkTopology {
        LandmarkTopology {
            nose_idx: NOSE,
            left_idx: LEFT_EDGE,
            right_idx: RIGHT_EDGE,
            left_iris: (LEFT_IRIS..LEFT_IRIS + 4).collect(),
            right_iris: (RIGHT_IRIS..RIGHT_IRIS + 4).collect(),
            left_eye_ring: std::array::from_fn(|i| LEFT_RING + i),
            right_eye_ring: std::array::from_fn(|i| RIGHT_RING + i),
            eye_corner_idxs: [RIGHT_RING, RIGHT_RING + 3, LEFT_RING + 3, LEFT_RING],
        }
    }

    /// Face-frame landmarks in cm for a given iris offset (cm, in the eye
    /// plane) and lid state.
    pub fn landmarks(&self, iris_offset: [f64; 2], closed: bool) -> Vec<Vector3<f64>> {
        let z = EYE_PLANE_Z;
        let half_w = 0.5 * self.face_width_cm;
        let mut p = vec![Vector3::zeros(); MESH_POINTS];
        p[NOSE] = Vector3::new(0.0, 0.0, 0.0);
        p[1] = Vector3::new(0.0, -3.0, 1.2);
        p[2] = Vector3::new(0.0, 7.5, 2.0);
        p[RIGHT_EDGE] = Vector3::new(-half_w, -2.2, z);
        p[LEFT_EDGE] = Vector3::new(half_w, -2.2, z);
        let h = if closed { self.lid_closed_cm } else { self.lid_open_cm };
        let a = 0.5 * self.eye_width_cm;
        let r = 0.5 * self.iris_diameter_cm;
        for (eye, (ring, iris)) in [(RIGHT_RING, RIGHT_IRIS), (LEFT_RING, LEFT_IRIS)].into_iter().enumerate() {
            let [cx, cy] = self.eye_centres[eye];
            // p1 is the outer corner: image-left for the right eye,
            // image-right for the left eye.
            let s = if eye == 0 { 1.0 } else { -1.0 };
            let ring_pts = [
                (cx - s * a, cy),
                (cx - s * a / 3.0, cy - h),
                (cx + s * a / 3.0, cy - h),
                (cx + s * a, cy),
                (cx + s * a / 3.0, cy + h),
                (cx - s * a / 3.0, cy + h),
            ];
            for (i, (x, y)) in ring_pts.into_iter().enumerate() {
                p[ring + i] = Vector3::new(x, y, z);
            }
            let (ix, iy) = (cx + iris_offset[0], cy + iris_offset[1]);
            for (i, (dx, dy)) in [(r, 0.0), (0.0, r), (-r, 0.0), (0.0, -r)].into_iter().enumerate() {
                p[iris + i] = Vector3::new(ix + dx, iy + dy, z);
            }
        }
        p[25] = Vector3::new(-4.2, -4.3, 2.8);
        p[26] = Vector3::new(-2.2, -4.5, 2.6);
        p[27] = Vector3::new(2.2, -4.5, 2.6);
        p[28] = Vector3::new(4.2, -4.3, 2.8);
        p[29] = Vector3::new(-4.5, 2.0, 2.5);
        p[30] = Vector3::new(4.5, 2.0, 2.5);
        p
    }
}

/// Colours of one synthetic person.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub skin: [f32; 3],
    pub iris: [f32; 3],
    pub brow: [f32; 3],
}

impl Appearance {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA11CE);
        let tone: f32 = rng.random_range(0.55..0.75);
        let iris_hue: f32 = rng.random_range(0.0..1.0);
        Self {
            skin: [tone, tone * 0.78, tone * 0.62],
            iris: [0.12 + 0.12 * iris_hue, 0.12 + 0.08 * (1.0 - iris_hue), 0.08 + 0.12 * iris_hue],
            brow: [tone * 0.3, tone * 0.22, tone * 0.18],
        }
    }
}

/// One synthetic capture.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub face: Arc<SyntheticFaceSpec>,
    pub pose: HeadPose,
    pub camera: CameraIntrinsics,
    pub image_size: (usize, usize),
    pub screen: ScreenSpec,
    pub gaze: [f64; 2],
    pub iris_offset: [f64; 2],
    pub noise_sigma_px: f64,
    pub closed: bool,
    pub appearance: Appearance,
    /// Seeds the landmark noise.
    pub noise_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub gaze: [f64; 2],
    pub iris_offset: [f64; 2],
    pub closed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedScene {
    pub frame: LandmarkFrame,
    pub image: Image,
    pub truth: GroundTruth,
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn mix(a: [f32; 3], b: [f32; 3], t: f64) -> [f32; 3] {
    let t = t as f32;
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// Face-plane colour at `(x, y)` cm.
fn shade(face: &SyntheticFaceSpec, app: &Appearance, iris_offset: [f64; 2], closed: bool, x: f64, y: f64) -> [f32; 3] {
    // Vertical shading gradient and a faint horizontal one.
    let g = 1.0 - 0.025 * (y + 2.5) + 0.01 * x;
    let mut c = app.skin.map(|v| (v as f64 * g).clamp(0.0, 1.0) as f32);
    let a = 0.5 * face.eye_width_cm;
    let h = if closed { face.lid_closed_cm } else { face.lid_open_cm };
    let r = 0.5 * face.iris_diameter_cm;
    for [cx, cy] in face.eye_centres {
        // Brow band above each eye.
        let bx = (x - cx) / (0.55 * face.eye_width_cm);
        let by = (y - (cy - 1.9)) / 0.28;
        let brow = 1.0 - smoothstep(0.8, 1.0, (bx * bx + by * by).sqrt());
        c = mix(c, app.brow, 0.9 * brow);
        // Dark lid-crease ring around the aperture.
        let ex = (x - cx) / a;
        let ey = (y - cy) / (h + 0.18);
        let crease = 1.0 - smoothstep(0.9, 1.1, (ex * ex + ey * ey).sqrt());
        c = mix(c, app.skin.map(|v| v * 0.6), 0.6 * crease);
        // Lid aperture: a lens shape through the corners.
        let t = ((x - cx) / a).abs();
        if t >= 1.0 {
            continue;
        }
        let half = h * (1.0 - t * t);
        let inside = 1.0 - smoothstep(half - 0.04, half + 0.02, (y - cy).abs());
        if inside <= 0.0 {
            continue;
        }
        let mut e = [0.93f32, 0.92, 0.9];
        let (ix, iy) = (cx + iris_offset[0], cy + iris_offset[1]);
        let d = ((x - ix).powi(2) + (y - iy).powi(2)).sqrt();
        e = mix(e, app.iris, 1.0 - smoothstep(r - 0.05, r + 0.02, d));
        // Limbal ring and pupil.
        e = mix(e, [0.05, 0.05, 0.06], 0.5 * (1.0 - smoothstep(0.04, 0.08, (d - r + 0.04).abs())));
        e = mix(e, [0.02, 0.02, 0.02], 1.0 - smoothstep(0.2, 0.26, d));
        c = mix(c, e, inside);
    }
    c
}

/// Landmarks, frame image and ground truth for a scene.
pub fn render_scene(scene: &SyntheticScene) -> Result<RenderedScene> {
    let face = &scene.face;
    let (w, h) = scene.image_size;
    if w == 0 || h == 0 {
        return Err(SimError::InvalidScene("empty image".into()));
    }
    if !(scene.noise_sigma_px >= 0.0 && scene.noise_sigma_px.is_finite()) {
        return Err(SimError::InvalidScene(format!("noise sigma {}", scene.noise_sigma_px)));
    }
    scene.camera.validate()?;
    let r = *scene.pose.rotation();
    let t = *scene.pose.translation();
    let model = face.landmarks(scene.iris_offset, scene.closed);
    let mut rng = ChaCha8Rng::seed_from_u64(scene.noise_seed);
    let noise = Normal::new(0.0, scene.noise_sigma_px.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut points = Vec::with_capacity(model.len());
    for (index, p) in model.iter().enumerate() {
        let c = r * p + t;
        if !(c.z > 0.0) {
            return Err(SimError::BehindCamera { index, z: c.z });
        }
        let uv = scene.camera.project_point(&c);
        let (du, dv) = if scene.noise_sigma_px > 0.0 { (noise.sample(&mut rng), noise.sample(&mut rng)) } else { (0.0, 0.0) };
        // Relative depth: proportional to camera depth, unit scale at the nose plane.
        points.push(Vector3::new(uv.x + du, uv.y + dv, c.z / t.z));
    }
    let frame = LandmarkFrame::new(points, Arc::new(face.topology.clone()))?;

    // Paint only the bounding box of the face landmarks (plus a margin);
    // everything the eye-strip sampler can reach lies inside it.
    let clean: Vec<Vector2<f64>> = model.iter().map(|p| scene.camera.project_point(&(r * p + t))).collect();
    let margin = 0.25 * (clean[LEFT_EDGE] - clean[RIGHT_EDGE]).norm();
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for q in &clean {
        x0 = x0.min(q.x);
        y0 = y0.min(q.y);
        x1 = x1.max(q.x);
        y1 = y1.max(q.y);
    }
    let clampi = |v: f64, hi: usize| (v.max(0.0) as usize).min(hi);
    let (px0, py0) = (clampi(x0 - margin, w), clampi(y0 - margin, h));
    let (px1, py1) = (clampi(x1 + margin + 1.0, w), clampi(y1 + margin + 1.0, h));
    let mut image = Image::new(w, h);
    let normal = r * Vector3::z();
    let plane_point = r * Vector3::new(0.0, 0.0, EYE_PLANE_Z) + t;
    let plane_d = normal.dot(&plane_point);
    let rt = r.transpose();
    for py in py0..py1 {
        for px in px0..px1 {
            let d = scene.camera.unproject(px as f64, py as f64, 1.0);
            let denom = normal.dot(&d);
            if denom.abs() < 1e-12 {
                continue;
            }
            let hit = d * (plane_d / denom);
            let q = rt * (hit - t);
            image.set_pixel(px, py, shade(face, &scene.appearance, scene.iris_offset, scene.closed, q.x, q.y));
        }
    }

    let mut rotation = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            rotation[i * 3 + j] = r[(i, j)];
        }
    }
    Ok(RenderedScene {
        frame,
        image,
        truth: GroundTruth {
            rotation,
            translation: [t.x, t.y, t.z],
            gaze: scene.gaze,
            iris_offset: scene.iris_offset,
            closed: scene.closed,
        },
    })
}

/// `Rz(roll) · Ry(yaw) · Rx(pitch)`, angles in radians.
pub fn rotation_from_angles(yaw: f64, pitch: f64, roll: f64) -> Matrix3<f64> {
    (Rotation3::from_axis_angle(&Vector3::z_axis(), roll)
        * Rotation3::from_axis_angle(&Vector3::y_axis(), yaw)
        * Rotation3::from_axis_angle(&Vector3::x_axis(), pitch))
    .into_inner()
}

/// Ranges for randomly drawn head poses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRanges {
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub roll_deg: f64,
    pub depth_cm: (f64, f64),
    pub x_cm: f64,
    pub y_cm: f64,
}

impl Default for PoseRanges {
    fn default() -> Self {
        Self { yaw_deg: 8.0, pitch_deg: 8.0, roll_deg: 12.0, depth_cm: (45.0, 75.0), x_cm: 8.0, y_cm: 5.0 }
    }
}

impl PoseRanges {
    pub fn sample(&self, rng: &mut impl Rng) -> Result<HeadPose> {
        let sym = |rng: &mut dyn rand::RngCore, a: f64| if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
        let yaw = sym(rng, self.yaw_deg).to_radians();
        let pitch = sym(rng, self.pitch_deg).to_radians();
        let roll = sym(rng, self.roll_deg).to_radians();
        let z = rng.random_range(self.depth_cm.0..=self.depth_cm.1);
        let x = sym(rng, self.x_cm);
        let y = sym(rng, self.y_cm);
        Ok(HeadPose::new(rotation_from_angles(yaw, pitch, roll), Vector3::new(x, y, z))?)
    }
}

pub fn default_camera() -> (CameraIntrinsics, (usize, usize)) {
    (CameraIntrinsics::default_for_image(1280, 720), (1280, 720))
}

/// Head-pose benchmark scenes without eye appearance variation.
pub fn pose_scenes(n: usize, noise_sigma_px: f64, seed: u64) -> Result<Vec<SyntheticScene>> {
    let face = Arc::new(SyntheticFaceSpec::default());
    let (camera, image_size) = default_camera();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ranges = PoseRanges::default();
    (0..n)
        .map(|i| {
            Ok(SyntheticScene {
                face: face.clone(),
                pose: ranges.sample(&mut rng)?,
                camera,
                image_size,
                screen: ScreenSpec::laptop(),
                gaze: [0.0, 0.0],
                iris_offset: [0.0, 0.0],
                noise_sigma_px,
                closed: false,
                appearance: Appearance::from_seed(0),
                noise_seed: seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
            })
        })
        .collect()
}

/// Solver output next to ground truth and the depth-grid optimum for one
/// scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseTrial {
    pub true_t: [f64; 3],
    pub est_t: [f64; 3],
    pub iterations: usize,
    pub converged: bool,
    pub rmse: f64,
    pub oracle_z: f64,
    pub oracle_rmse: f64,
}

impl PoseTrial {
    pub fn z_error(&self) -> f64 {
        (self.est_t[2] - self.true_t[2]).abs()
    }

    pub fn xy_error(&self) -> f64 {
        ((self.est_t[0] - self.true_t[0]).powi(2) + (self.est_t[1] - self.true_t[1]).powi(2)).sqrt()
    }
}

/// Depth-grid bounds and resolution of the pose oracle, cm.
pub const ORACLE_DEPTH_RANGE: (f64, f64) = (30.0, 90.0);
pub const ORACLE_DEPTH_STEP: f64 = 0.05;

/// Renders `n` pose scenes and solves each with the true rotation, as a
/// landmark provider would supply it.
pub fn pose_trials(n: usize, noise_sigma_px: f64, seed: u64, solver: &SolverConfig) -> Result<Vec<PoseTrial>> {
    pose_scenes(n, noise_sigma_px, seed)?
        .iter()
        .map(|scene| {
            let r = render_scene(scene)?;
            let rot = *scene.pose.rotation();
            let metric = metric_face_points(&r.frame, &scene.camera, &rot, scene.face.iris_diameter_cm)?;
            let rep = solve_translation(&r.frame, &metric, &rot, &scene.camera, solver)?;
            let (oracle_z, oracle_rmse) =
                depth_grid_search(&r.frame, &metric, &rot, &scene.camera, ORACLE_DEPTH_RANGE, ORACLE_DEPTH_STEP)?;
            let t = rep.pose.translation();
            Ok(PoseTrial {
                true_t: r.truth.translation,
                est_t: [t.x, t.y, t.z],
                iterations: rep.iterations,
                converged: rep.converged,
                rmse: rep.final_reprojection_rmse,
                oracle_z,
                oracle_rmse,
            })
        })
        .collect()
}

/// Per-person gaze behaviour: the eyes follow a shared base mapping, and the
/// person's apparent gaze is then distorted by a gain and an offset that the
/// eye appearance cannot reveal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticUser {
    pub id: String,
    pub gain: [f64; 2],
    pub bias: [f64; 2],
    pub appearance_seed: u64,
    /// Seeds pose, gaze targets, blinks and noise of this user's captures.
    pub scene_seed: u64,
}

/// Iris offset (cm) per unit of normalized gaze.
pub const IRIS_GAIN_CM: [f64; 2] = [1.2, 0.8];
/// Contribution of head yaw / pitch (radians) to gaze.
pub const POSE_GAZE_COUPLING: [f64; 2] = [0.3, 0.3];

fn yaw_pitch(r: &Matrix3<f64>) -> (f64, f64) {
    // Face-frame forward axis in camera coordinates.
    let f = r * Vector3::z();
    (f.x.atan2(f.z), (-f.y).atan2(f.z))
}

impl SyntheticUser {
    pub fn new(id: impl Into<String>, seed: u64) -> Self {
        let id = id.into();
        let mut h: u64 = 0xcbf29ce484222325;
        for b in id.bytes() {
            h = (h ^ u64::from(b)).wrapping_mul(0x100000001b3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h ^ seed);
        let mut bias = || {
            let m: f64 = rng.random_range(0.06..0.14);
            if rng.random_bool(0.5) { m } else { -m }
        };
        let bias = [bias(), bias()];
        let gain = [rng.random_range(0.85..1.15), rng.random_range(0.85..1.15)];
        Self { id, gain, bias, appearance_seed: rng.random(), scene_seed: rng.random() }
    }

    /// Base (person-independent) gaze implied by an iris offset and pose.
    pub fn base_gaze(iris_offset: [f64; 2], pose: &HeadPose) -> [f64; 2] {
        let (yaw, pitch) = yaw_pitch(pose.rotation());
        [
            iris_offset[0] / IRIS_GAIN_CM[0] + POSE_GAZE_COUPLING[0] * yaw,
            iris_offset[1] / IRIS_GAIN_CM[1] - POSE_GAZE_COUPLING[1] * pitch,
        ]
    }

    pub fn gaze(&self, iris_offset: [f64; 2], pose: &HeadPose) -> [f64; 2] {
        let b = Self::base_gaze(iris_offset, pose);
        [self.gain[0] * b[0] + self.bias[0], self.gain[1] * b[1] + self.bias[1]]
    }

    /// Iris offset that makes this user look at `gaze`.
    pub fn iris_for(&self, gaze: [f64; 2], pose: &HeadPose) -> [f64; 2] {
        let (yaw, pitch) = yaw_pitch(pose.rotation());
        let bx = (gaze[0] - self.bias[0]) / self.gain[0];
        let by = (gaze[1] - self.bias[1]) / self.gain[1];
        [
            IRIS_GAIN_CM[0] * (bx - POSE_GAZE_COUPLING[0] * yaw),
            IRIS_GAIN_CM[1] * (by + POSE_GAZE_COUPLING[1] * pitch),
        ]
    }
}

/// Settings shared by every capture of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptureConfig {
    pub noise_sigma_px: f64,
    pub patch: PatchConfig,
    pub screen: ScreenSpec,
    pub pose: PoseRanges,
    /// Fraction of random captures taken with closed eyes.
    pub blink_rate: f64,
    /// Gaze targets are drawn from `[-gaze_extent, gaze_extent]²`.
    pub gaze_extent: f64,
}

impl Default for CaptureConfig {
    fn default() -> Self {
        Self {
            noise_sigma_px: 0.0,
            patch: PatchConfig::reduced(),
            screen: ScreenSpec::laptop(),
            pose: PoseRanges::default(),
            blink_rate: 0.0,
            gaze_extent: 0.45,
        }
    }
}

/// One rendered capture reduced to what a dataset stores.
#[derive(Debug, Clone, PartialEq)]
pub struct SimSample {
    pub id: String,
    pub user_id: String,
    pub timestamp: f64,
    pub frame: LandmarkFrame,
    pub patch: EyePatch,
    pub truth: GroundTruth,
}

/// 3×3 calibration targets.
pub fn dot_grid(extent: f64) -> Vec<[f64; 2]> {
    let v = [-extent, 0.0, extent];
    v.iter().flat_map(|&y| v.iter().map(move |&x| [x, y])).collect()
}

fn capture(
    user: &SyntheticUser,
    face: &Arc<SyntheticFaceSpec>,
    cfg: &CaptureConfig,
    gaze: [f64; 2],
    closed: bool,
    rng: &mut ChaCha8Rng,
    index: usize,
) -> Result<SimSample> {
    let (camera, image_size) = default_camera();
    let pose = cfg.pose.sample(rng)?;
    let scene = SyntheticScene {
        face: face.clone(),
        pose,
        camera,
        image_size,
        screen: cfg.screen,
        gaze,
        iris_offset: user.iris_for(gaze, &pose),
        noise_sigma_px: cfg.noise_sigma_px,
        closed,
        appearance: Appearance::from_seed(user.appearance_seed),
        noise_seed: rng.random(),
    };
    let r = render_scene(&scene)?;
    let patch = eye_patch_homography(&r.image, &r.frame, &cfg.patch, index as u64)?;
    Ok(SimSample {
        id: format!("{}-{index:05}", user.id),
        user_id: user.id.clone(),
        timestamp: index as f64 / 30.0,
        frame: r.frame,
        patch,
        truth: r.truth,
    })
}

/// `n` captures with gaze targets spread over the screen.
pub fn make_user_dataset(user: &SyntheticUser, n: usize, cfg: &CaptureConfig) -> Result<Vec<SimSample>> {
    if n == 0 {
        return Err(SimError::InvalidScene("dataset needs at least one sample".into()));
    }
    let face = Arc::new(SyntheticFaceSpec::default());
    let mut rng = ChaCha8Rng::seed_from_u64(user.scene_seed);
    let e = cfg.gaze_extent;
    (0..n)
        .map(|i| {
            let gaze = [rng.random_range(-e..=e), rng.random_range(-e..=e)];
            let closed = cfg.blink_rate > 0.0 && rng.random_bool(cfg.blink_rate.min(1.0));
            capture(user, &face, cfg, gaze, closed, &mut rng, i)
        })
        .collect()
}

/// The nine dot-grid calibration captures followed by `n_random` free-viewing
/// captures, all open-eyed unless `cfg.blink_rate` says otherwise for the
/// random part.
pub fn make_calibrated_user(user: &SyntheticUser, n_random: usize, cfg: &CaptureConfig) -> Result<Vec<SimSample>> {
    let face = Arc::new(SyntheticFaceSpec::default());
    let mut rng = ChaCha8Rng::seed_from_u64(user.scene_seed ^ 0xD07);
    let mut out = Vec::with_capacity(9 + n_random);
    for (i, g) in dot_grid(0.4).into_iter().enumerate() {
        out.push(capture(user, &face, cfg, g, false, &mut rng, i)?);
    }
    let e = cfg.gaze_extent;
    for i in 0..n_random {
        let gaze = [rng.random_range(-e..=e), rng.random_range(-e..=e)];
        let closed = cfg.blink_rate > 0.0 && rng.random_bool(cfg.blink_rate.min(1.0));
        out.push(capture(user, &face, cfg, gaze, closed, &mut rng, 9 + i)?);
    }
    Ok(out)
}

/// A whole synthetic dataset: who, how many captures and which split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDatasetSpec {
    pub users: Vec<SyntheticUser>,
    /// Random captures per user, after the nine dot-grid captures.
    pub samples_per_user: usize,
    pub splits: Splits,
    pub capture: CaptureConfig,
}

impl SynthDatasetSpec {
    /// `n_train + n_val + n_test` users named `u00`, `u01`, ...
    pub fn with_users(n_train: usize, n_val: usize, n_test: usize, samples_per_user: usize, seed: u64) -> Self {
        let users: Vec<SyntheticUser> =
            (0..n_train + n_val + n_test).map(|i| SyntheticUser::new(format!("u{i:02}"), seed)).collect();
        let ids: Vec<String> = users.iter().map(|u| u.id.clone()).collect();
        Self {
            splits: Splits {
                train: ids[..n_train].to_vec(),
                val: ids[n_train..n_train + n_val].to_vec(),
                test: ids[n_train + n_val..].to_vec(),
            },
            users,
            samples_per_user,
            capture: CaptureConfig::default(),
        }
    }

    /// The bundled benchmark: eight users, six for training and two for
    /// validation, reduced-size patches.
    pub fn bundled(seed: u64) -> Self {
        Self::with_users(6, 2, 0, 151, seed)
    }
}

/// Renders every user and writes a manifest + containers into `dir`.
pub fn emit_dataset(dir: &Path, spec: &SynthDatasetSpec) -> Result<PathBuf> {
    let (camera, (w, h)) = default_camera();
    let mut writer = DatasetWriter::new(
        SyntheticFaceSpec::topology(),
        Some(camera),
        [w as u32, h as u32],
        spec.capture.screen,
        spec.capture.patch,
        spec.splits.clone(),
    );
    for user in &spec.users {
        for s in make_calibrated_user(user, spec.samples_per_user, &spec.capture)? {
            let gaze_px = denormalize_gaze(s.truth.gaze, &spec.capture.screen).map_err(|e| SimError::Emit(e.to_string()))?;
            writer
                .push(WriterSample {
                    id: s.id,
                    user_id: s.user_id,
                    timestamp: s.timestamp,
                    frame: &s.frame,
                    patch: &s.patch,
                    gaze_px,
                    rotation: s.truth.rotation,
                    truth: Some(s.truth),
                })
                .map_err(|e| SimError::Emit(e.to_string()))?;
        }
    }
    writer.write(dir).map_err(|e| SimError::Emit(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{estimate_face_scale, metric_face_points};
    use crate::headpose::{solve_translation, SolverConfig};
    use crate::preprocess::{build_weight_grid, frame_ears, grid_cell};

    fn frontal(z: f64) -> SyntheticScene {
        let (camera, image_size) = default_camera();
        SyntheticScene {
            face: Arc::new(SyntheticFaceSpec::default()),
            pose: HeadPose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, z)).unwrap(),
            camera,
            image_size,
            screen: ScreenSpec::laptop(),
            gaze: [0.0; 2],
            iris_offset: [0.0; 2],
            noise_sigma_px: 0.0,
            closed: false,
            appearance: Appearance::from_seed(3),
            noise_seed: 0,
        }
    }

    #[test]
    fn topology_is_valid() {
        SyntheticFaceSpec::topology().validate(MESH_POINTS).unwrap();
    }

    #[test]
    fn frontal_scale_is_exact() {
        let r = render_scene(&frontal(60.0)).unwrap();
        let s = estimate_face_scale(&r.frame, r.frame.topology(), IRIS_DIAMETER_CM).unwrap();
        assert!((s - 14.0).abs() < 0.01, "scale {s}");
    }

    #[test]
    fn noise_free_pose_recovered() {
        for scene in pose_scenes(10, 0.0, 5).unwrap() {
            let r = render_scene(&scene).unwrap();
            let rot = *scene.pose.rotation();
            let metric = metric_face_points(&r.frame, &scene.camera, &rot, IRIS_DIAMETER_CM).unwrap();
            let rep = solve_translation(&r.frame, &metric, &rot, &scene.camera, &SolverConfig::default()).unwrap();
            let t = scene.pose.translation();
            assert!((rep.pose.translation().z - t.z).abs() < 1.0, "{} vs {}", rep.pose.translation().z, t.z);
        }
    }

    #[test]
    fn eye_aspect_ratios() {
        let r = render_scene(&frontal(60.0)).unwrap();
        let (l, rr) = frame_ears(&r.frame).unwrap();
        assert!((l - 0.3).abs() < 1e-9 && (rr - 0.3).abs() < 1e-9);
        let mut s = frontal(60.0);
        s.closed = true;
        let r = render_scene(&s).unwrap();
        let (l, rr) = frame_ears(&r.frame).unwrap();
        assert!(l < 0.05 && rr < 0.05);
    }

    #[test]
    fn behind_camera_rejected() {
        let s = frontal(-2.0);
        assert!(matches!(render_scene(&s), Err(SimError::BehindCamera { .. })));
    }

    #[test]
    fn deterministic() {
        let mut s = frontal(55.0);
        s.noise_sigma_px = 1.0;
        s.noise_seed = 9;
        let a = render_scene(&s).unwrap();
        let b = render_scene(&s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gaze_mapping_round_trips() {
        let u = SyntheticUser::new("u1", 4);
        let pose = HeadPose::new(rotation_from_angles(0.1, -0.05, 0.2), Vector3::new(1.0, 2.0, 60.0)).unwrap();
        let g = [0.3, -0.2];
        let back = u.gaze(u.iris_for(g, &pose), &pose);
        assert!((back[0] - g[0]).abs() < 1e-12 && (back[1] - g[1]).abs() < 1e-12);
    }

    #[test]
    fn users_differ_only_in_iris() {
        let a = SyntheticUser::new("a", 1);
        let mut b = a.clone();
        b.bias = [-a.bias[0], a.bias[1]];
        let cfg = CaptureConfig::default();
        let da = make_user_dataset(&a, 3, &cfg).unwrap();
        let db = make_user_dataset(&b, 3, &cfg).unwrap();
        for (x, y) in da.iter().zip(&db) {
            assert_eq!(x.truth.gaze, y.truth.gaze);
            assert_ne!(x.truth.iris_offset, y.truth.iris_offset);
            assert_eq!(x.truth.translation, y.truth.translation);
            // Landmarks agree everywhere except the iris rings.
            for i in 0..MESH_POINTS {
                if !(RIGHT_IRIS..LEFT_IRIS + 4).contains(&i) {
                    assert_eq!(x.frame.points()[i], y.frame.points()[i]);
                }
            }
            assert_ne!(x.patch.pixels, y.patch.pixels);
        }
    }

    #[test]
    fn label_coverage() {
        let u = SyntheticUser::new("cov", 0);
        let cfg = CaptureConfig { patch: PatchConfig { height: 8, width: 32, quad_height_factor: 0.35 }, ..Default::default() };
        let d = make_user_dataset(&u, 200, &cfg).unwrap();
        let cells: std::collections::HashSet<_> = d.iter().map(|s| grid_cell(s.truth.gaze).0).collect();
        assert!(cells.len() >= 30, "{} cells", cells.len());
        let labels: Vec<_> = d.iter().map(|s| s.truth.gaze).collect();
        build_weight_grid(&labels).unwrap();
        assert_eq!(make_user_dataset(&u, 1, &cfg).unwrap().len(), 1);
    }

    #[test]
    fn patch_carries_iris_signal() {
        let cfg = PatchConfig::reduced();
        let mut s = frontal(60.0);
        let base = render_scene(&s).unwrap();
        s.iris_offset = [0.5, 0.0];
        let moved = render_scene(&s).unwrap();
        let pa = eye_patch_homography(&base.image, &base.frame, &cfg, 0).unwrap();
        let pb = eye_patch_homography(&moved.image, &moved.frame, &cfg, 0).unwrap();
        let diff: f64 = pa.pixels.iter().zip(&pb.pixels).map(|(a, b)| f64::from((a - b).abs())).sum();
        assert!(diff / pa.pixels.len() as f64 > 0.01, "mean abs diff {}", diff / pa.pixels.len() as f64);
        assert!(pa.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
