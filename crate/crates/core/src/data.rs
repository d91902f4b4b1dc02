//! Dataset manifests, sample containers and gaze label conversion.
//!
//! A dataset is a directory holding `manifest.json` plus binary tensor
//! containers (see [`crate::nn::container`]). The manifest lists every
//! container with its sha256; samples refer to rows of container tensors.
//!
//! ```json
//! {
//!   "version": 1,
//!   "topology": { "nose_idx": 0, ... },
//!   "intrinsics": { "fx": 1280, "fy": 1280, "cx": 640, "cy": 360 },
//!   "image_size": [1280, 720],
//!   "screen": { "width_px": 1920, "height_px": 1080, "width_cm": 34.4, "height_cm": 19.4 },
//!   "patch": { "height": 32, "width": 128, "quad_height_factor": 0.35 },
//!   "splits": { "train": ["u00"], "val": ["u01"], "test": ["u02"] },
//!   "files": { "patches.eytc": "<sha256>", "landmarks.eytc": "<sha256>" },
//!   "samples": [{
//!     "id": "u00-00000", "user_id": "u00", "timestamp": 0.0,
//!     "landmarks": { "file": "landmarks.eytc", "tensor": "landmarks", "index": 0 },
//!     "patch": { "kind": "patch", "file": "patches.eytc", "tensor": "patches", "index": 0 },
//!     "gaze_px": [960.0, 540.0],
//!     "rotation": [1, 0, 0, 0, 1, 0, 0, 0, 1]
//!   }]
//! }
//! ```
//!
//! `landmarks` may instead be an inline `[[u, v, z], ...]` array, and `patch`
//! may be `{"kind": "image", ...}` pointing at an `H x W x 3` frame that is
//! cropped on load. `intrinsics` may be omitted at either level.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::warn;
use nalgebra::{Matrix3, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blazegaze::train::TrainSample;
use crate::blazegaze::{pose_features, BlazeGazeModel};
use crate::geometry::{metric_face_points, CameraIntrinsics, LandmarkFrame, LandmarkTopology, IRIS_DIAMETER_CM};
use crate::headpose::{solve_translation, HeadPose, SolveReport, SolverConfig};
use crate::meta::HeadSample;
use crate::nn::container::{Container, DType};
use crate::nn::Tensor;
use crate::preprocess::{
    blink_gate, eye_patch_homography, frame_ears, EyePatch, Image, PatchConfig, ScreenSpec, DEFAULT_BLINK_THRESHOLD,
};
use crate::simulator::GroundTruth;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("schema violation at {pointer}: {message}")]
    Schema { pointer: String, message: String },
    #[error("unsupported manifest version {0}")]
    Version(u32),
    #[error("integrity: {0}")]
    Integrity(String),
    #[error("invalid manifest: {0}")]
    Invalid(String),
    #[error("screen has zero resolution")]
    ZeroResolution,
    #[error("container {file}: {message}")]
    Container { file: String, message: String },
}

pub type Result<T> = std::result::Result<T, DataError>;

fn pointer_of(path: &serde_path_to_error::Path, prefix: &str) -> String {
    use serde_path_to_error::Segment;
    let mut p = prefix.to_string();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => p.push_str(&format!("/{index}")),
            Segment::Map { key } => p.push_str(&format!("/{}", key.replace('~', "~0").replace('/', "~1"))),
            Segment::Enum { variant } => p.push_str(&format!("/{variant}")),
            Segment::Unknown => p.push_str("/?"),
        }
    }
    if p.is_empty() {
        p.push('/');
    }
    p
}

fn from_value<T: DeserializeOwned>(v: serde_json::Value, prefix: &str) -> Result<T> {
    serde_path_to_error::deserialize(v)
        .map_err(|e| DataError::Schema { pointer: pointer_of(e.path(), prefix), message: e.inner().to_string() })
}

/// A row (or the whole) of a tensor stored in a container file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRef {
    pub file: String,
    pub tensor: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LandmarkSource {
    Inline(Vec<[f64; 3]>),
    File(TensorRef),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PatchSource {
    /// A pre-cropped `H x W x 3` patch.
    Patch(TensorRef),
    /// A full `H x W x 3` frame, cropped with the sample's landmarks.
    Image(TensorRef),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub user_id: String,
    pub timestamp: f64,
    pub landmarks: LandmarkSource,
    pub patch: PatchSource,
    pub gaze_px: [f64; 2],
    /// Row-major head rotation from the landmark provider.
    pub rotation: [f64; 9],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intrinsics: Option<CameraIntrinsics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<GroundTruth>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    #[serde(default)]
    pub train: Vec<String>,
    #[serde(default)]
    pub val: Vec<String>,
    #[serde(default)]
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Splits {
    pub fn users(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for u in self.train.iter().chain(&self.val).chain(&self.test) {
            if u.is_empty() {
                return Err(DataError::Invalid("empty user id in splits".into()));
            }
            if !seen.insert(u) {
                return Err(DataError::Invalid(format!("user {u} appears in more than one split")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    version: u32,
    topology: LandmarkTopology,
    #[serde(default)]
    intrinsics: Option<CameraIntrinsics>,
    image_size: [u32; 2],
    screen: ScreenSpec,
    #[serde(default)]
    patch: Option<PatchConfig>,
    #[serde(default)]
    splits: Splits,
    #[serde(default)]
    files: BTreeMap<String, String>,
    samples: Vec<serde_json::Value>,
}

/// A sample that could not be used, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedSample {
    pub index: usize,
    pub id: Option<String>,
    pub reason: String,
}

/// A validated dataset. Read-only after load.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub version: u32,
    pub topology: Arc<LandmarkTopology>,
    pub intrinsics: CameraIntrinsics,
    /// True when the manifest had no intrinsics and the image-size default
    /// was substituted.
    pub intrinsics_defaulted: bool,
    pub image_size: [u32; 2],
    pub screen: ScreenSpec,
    pub patch: PatchConfig,
    pub splits: Splits,
    pub files: BTreeMap<String, String>,
    /// Valid entries, sorted by user id then timestamp.
    pub samples: Vec<SampleEntry>,
    /// Entries rejected at load time.
    pub skipped: Vec<SkippedSample>,
    containers: HashMap<String, Arc<Container>>,
}

fn check_ref(r: &TensorRef, containers: &HashMap<String, Arc<Container>>, what: &str) -> std::result::Result<(), String> {
    let c = containers.get(&r.file).ok_or_else(|| format!("{what} refers to unlisted file {}", r.file))?;
    let t = c.get(&r.tensor).ok_or_else(|| format!("{what}: no tensor {} in {}", r.tensor, r.file))?;
    if let Some(i) = r.index {
        if t.shape().is_empty() || i >= t.shape()[0] {
            return Err(format!("{what}: index {i} out of range for {}{:?}", r.tensor, t.shape()));
        }
    }
    Ok(())
}

fn validate_entry(
    e: &SampleEntry,
    topo: &LandmarkTopology,
    containers: &HashMap<String, Arc<Container>>,
) -> std::result::Result<(), String> {
    if e.id.is_empty() || e.user_id.is_empty() {
        return Err("empty sample or user id".into());
    }
    if !e.timestamp.is_finite() || e.gaze_px.iter().chain(&e.rotation).any(|v| !v.is_finite()) {
        return Err("non-finite timestamp, gaze or rotation".into());
    }
    match &e.landmarks {
        LandmarkSource::Inline(p) => {
            if p.len() < topo.required_points() {
                return Err(format!("{} landmarks, topology needs {}", p.len(), topo.required_points()));
            }
            if p.iter().flatten().any(|v| !v.is_finite()) {
                return Err("non-finite landmark".into());
            }
        }
        LandmarkSource::File(r) => check_ref(r, containers, "landmarks")?,
    }
    match &e.patch {
        PatchSource::Patch(r) | PatchSource::Image(r) => check_ref(r, containers, "patch")?,
    }
    if let Some(k) = &e.intrinsics {
        k.validate().map_err(|err| err.to_string())?;
    }
    Ok(())
}

// Hash comparison is on the file bytes; a mismatch means the listed file was
// modified or replaced after the manifest was written.
fn load_containers(root: &Path, files: &BTreeMap<String, String>) -> Result<HashMap<String, Arc<Container>>> {
    let mut out = HashMap::new();
    for (name, expected) in files {
        if Path::new(name).components().any(|c| !matches!(c, std::path::Component::Normal(_))) {
            return Err(DataError::Invalid(format!("file name {name} must be a plain relative path")));
        }
        let path = root.join(name);
        let bytes = std::fs::read(&path).map_err(|source| DataError::Io { path: path.clone(), source })?;
        let actual = crate::nn::container::sha256_hex(&bytes);
        if !actual.eq_ignore_ascii_case(expected) {
            return Err(DataError::Integrity(format!("{name}: sha256 {actual} does not match manifest {expected}")));
        }
        let c = Container::from_bytes(&bytes)
            .map_err(|e| DataError::Container { file: name.clone(), message: e.to_string() })?;
        out.insert(name.clone(), Arc::new(c));
    }
    Ok(out)
}

/// Reads and validates `path` (a manifest file or a dataset directory).
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = std::fs::read_to_string(&file).map_err(|source| DataError::Io { path: file.clone(), source })?;
    let raw: ManifestFile = serde_path_to_error::deserialize(&mut serde_json::Deserializer::from_str(&text))
        .map_err(|e| DataError::Schema { pointer: pointer_of(e.path(), ""), message: e.inner().to_string() })?;
    if raw.version != MANIFEST_VERSION {
        return Err(DataError::Version(raw.version));
    }
    raw.topology.validate(raw.topology.required_points()).map_err(|e| DataError::Invalid(e.to_string()))?;
    raw.screen.validate().map_err(|e| DataError::Invalid(e.to_string()))?;
    raw.splits.validate()?;
    if raw.image_size.contains(&0) {
        return Err(DataError::Invalid("image size has a zero extent".into()));
    }
    let (intrinsics, intrinsics_defaulted) = match raw.intrinsics {
        Some(k) => {
            k.validate().map_err(|e| DataError::Invalid(e.to_string()))?;
            (k, false)
        }
        None => (CameraIntrinsics::default_for_image(raw.image_size[0], raw.image_size[1]), true),
    };
    let containers = load_containers(&root, &raw.files)?;

    let mut samples = Vec::with_capacity(raw.samples.len());
    let mut skipped = Vec::new();
    let mut ids = BTreeSet::new();
    for (index, v) in raw.samples.into_iter().enumerate() {
        let id = v.get("id").and_then(|x| x.as_str()).map(str::to_string);
        let parsed = from_value::<SampleEntry>(v, &format!("/samples/{index}"))
            .map_err(|e| e.to_string())
            .and_then(|e| validate_entry(&e, &raw.topology, &containers).map(|_| e))
            .and_then(|e| if ids.insert(e.id.clone()) { Ok(e) } else { Err(format!("duplicate sample id {}", e.id)) });
        match parsed {
            Ok(e) => samples.push(e),
            Err(reason) => {
                warn!("skipping sample {index} ({}): {reason}", id.as_deref().unwrap_or("?"));
                skipped.push(SkippedSample { index, id, reason });
            }
        }
    }
    samples.sort_by(|a, b| a.user_id.cmp(&b.user_id).then(a.timestamp.total_cmp(&b.timestamp)));

    Ok(DatasetManifest {
        root,
        version: raw.version,
        topology: Arc::new(raw.topology),
        intrinsics,
        intrinsics_defaulted,
        image_size: raw.image_size,
        screen: raw.screen,
        patch: raw.patch.unwrap_or_default(),
        splits: raw.splits,
        files: raw.files,
        samples,
        skipped,
        containers,
    })
}

/// `px / resolution − 0.5` per axis. Out-of-range results are clamped and
/// flagged.
pub fn normalize_gaze(px: [f64; 2], screen: &ScreenSpec) -> Result<([f64; 2], bool)> {
    if screen.width_px == 0 || screen.height_px == 0 {
        return Err(DataError::ZeroResolution);
    }
    let raw = [px[0] / f64::from(screen.width_px) - 0.5, px[1] / f64::from(screen.height_px) - 0.5];
    let g = raw.map(|v| v.clamp(-0.5, 0.5));
    Ok((g, g != raw))
}

pub fn denormalize_gaze(g: [f64; 2], screen: &ScreenSpec) -> Result<[f64; 2]> {
    if screen.width_px == 0 || screen.height_px == 0 {
        return Err(DataError::ZeroResolution);
    }
    Ok([(g[0] + 0.5) * f64::from(screen.width_px), (g[1] + 0.5) * f64::from(screen.height_px)])
}

/// A sample ready for training or evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct GazeSample {
    pub id: String,
    pub user_id: String,
    pub timestamp: f64,
    pub patch: EyePatch,
    /// Cached encoder output, if one has been attached.
    pub embedding: Option<Vec<f64>>,
    pub pose: HeadPose,
    pub pose_report: SolveReport,
    pub gaze: [f64; 2],
    pub gaze_clamped: bool,
    pub weight: f64,
    pub ears: (f64, f64),
    /// Closed-eye frame according to the EAR gate.
    pub blink: bool,
    pub frame: LandmarkFrame,
    pub truth: Option<GroundTruth>,
}

impl GazeSample {
    pub fn pose_features(&self) -> [f64; crate::blazegaze::POSE_DIM] {
        pose_features(&self.pose)
    }

    pub fn to_train_sample(&self) -> TrainSample {
        TrainSample { patch: self.patch.to_chw(), pose: self.pose_features(), gaze: self.gaze, weight: self.weight }
    }

    /// Head-level sample; `z` overrides any cached embedding.
    pub fn to_head_sample(&self, z: Vec<f64>) -> HeadSample {
        HeadSample { z, pose: self.pose_features(), gaze: self.gaze, weight: self.weight }
    }
}

/// Options for turning manifest entries into [`GazeSample`]s.
#[derive(Debug, Clone, PartialEq)]
pub struct IterOptions {
    pub solver: SolverConfig,
    pub iris_diameter_cm: f64,
    pub blink_threshold: f64,
}

impl Default for IterOptions {
    fn default() -> Self {
        Self { solver: SolverConfig::default(), iris_diameter_cm: IRIS_DIAMETER_CM, blink_threshold: DEFAULT_BLINK_THRESHOLD }
    }
}

impl DatasetManifest {
    fn row(&self, r: &TensorRef) -> std::result::Result<(Vec<usize>, &[f64]), String> {
        let c = self.containers.get(&r.file).ok_or_else(|| format!("unlisted file {}", r.file))?;
        let t = c.get(&r.tensor).ok_or_else(|| format!("no tensor {}", r.tensor))?;
        match r.index {
            None => Ok((t.shape().to_vec(), t.data())),
            Some(i) => {
                let shape = t.shape()[1..].to_vec();
                let n: usize = shape.iter().product();
                Ok((shape, &t.data()[i * n..(i + 1) * n]))
            }
        }
    }

    fn frame_for(&self, e: &SampleEntry) -> std::result::Result<LandmarkFrame, String> {
        let points: Vec<Vector3<f64>> = match &e.landmarks {
            LandmarkSource::Inline(p) => p.iter().map(|q| Vector3::new(q[0], q[1], q[2])).collect(),
            LandmarkSource::File(r) => {
                let (shape, data) = self.row(r)?;
                if shape.len() != 2 || shape[1] != 3 {
                    return Err(format!("landmark tensor row has shape {shape:?}, expected [N, 3]"));
                }
                data.chunks_exact(3).map(|q| Vector3::new(q[0], q[1], q[2])).collect()
            }
        };
        LandmarkFrame::new(points, self.topology.clone()).map_err(|e| e.to_string())
    }

    fn patch_for(&self, e: &SampleEntry, frame: &LandmarkFrame, frame_id: u64) -> std::result::Result<EyePatch, String> {
        let (is_image, r) = match &e.patch {
            PatchSource::Patch(r) => (false, r),
            PatchSource::Image(r) => (true, r),
        };
        let (shape, data) = self.row(r)?;
        if shape.len() != 3 || shape[2] != 3 {
            return Err(format!("{} tensor has shape {shape:?}, expected [H, W, 3]", if is_image { "image" } else { "patch" }));
        }
        let pixels: Vec<f32> = data.iter().map(|&v| v as f32).collect();
        if is_image {
            let image = Image { width: shape[1], height: shape[0], data: pixels };
            eye_patch_homography(&image, frame, &self.patch, frame_id).map_err(|e| e.to_string())
        } else {
            if shape[0] != self.patch.height || shape[1] != self.patch.width {
                return Err(format!("patch is {}x{}, manifest declares {}x{}", shape[0], shape[1], self.patch.height, self.patch.width));
            }
            Ok(EyePatch { height: shape[0], width: shape[1], pixels, frame_id })
        }
    }

    /// Builds one sample: landmarks, eye patch, metric head pose (rotation
    /// from the manifest, translation solved from the landmarks), normalized
    /// gaze and blink state. Weight is 1; callers attach grid weights.
    pub fn sample(&self, index: usize, opts: &IterOptions) -> std::result::Result<GazeSample, SkippedSample> {
        let e = &self.samples[index];
        let skip = |reason: String| SkippedSample { index, id: Some(e.id.clone()), reason };
        let frame = self.frame_for(e).map_err(skip)?;
        let patch = self.patch_for(e, &frame, index as u64).map_err(skip)?;
        let r = Matrix3::from_row_slice(&e.rotation);
        let k = e.intrinsics.unwrap_or(self.intrinsics);
        let metric = metric_face_points(&frame, &k, &r, opts.iris_diameter_cm).map_err(|err| skip(err.to_string()))?;
        let report = solve_translation(&frame, &metric, &r, &k, &opts.solver).map_err(|err| skip(err.to_string()))?;
        let (gaze, gaze_clamped) = normalize_gaze(e.gaze_px, &self.screen).map_err(|err| skip(err.to_string()))?;
        let ears = frame_ears(&frame).map_err(|err| skip(err.to_string()))?;
        Ok(GazeSample {
            id: e.id.clone(),
            user_id: e.user_id.clone(),
            timestamp: e.timestamp,
            patch,
            embedding: None,
            pose: report.pose,
            pose_report: report,
            gaze,
            gaze_clamped,
            weight: 1.0,
            ears,
            blink: blink_gate(ears.0, ears.1, opts.blink_threshold),
            frame,
            truth: e.truth,
        })
    }

    /// Streams samples in manifest order. Failures are yielded as
    /// [`SkippedSample`] so one bad entry never stops iteration.
    pub fn iter<'a>(&'a self, opts: &'a IterOptions) -> impl Iterator<Item = std::result::Result<GazeSample, SkippedSample>> + 'a {
        (0..self.samples.len()).map(move |i| self.sample(i, opts))
    }

    /// Collects the usable samples of the listed users (all users when
    /// `users` is `None`), logging every skip.
    pub fn load_samples(&self, users: Option<&[String]>, opts: &IterOptions) -> (Vec<GazeSample>, Vec<SkippedSample>) {
        let wanted: Option<BTreeSet<&str>> = users.map(|u| u.iter().map(String::as_str).collect());
        let mut ok = Vec::new();
        let mut skipped = Vec::new();
        for i in 0..self.samples.len() {
            if let Some(w) = &wanted {
                if !w.contains(self.samples[i].user_id.as_str()) {
                    continue;
                }
            }
            match self.sample(i, opts) {
                Ok(s) => ok.push(s),
                Err(s) => {
                    warn!("skipping sample {} ({}): {}", s.index, s.id.as_deref().unwrap_or("?"), s.reason);
                    skipped.push(s);
                }
            }
        }
        (ok, skipped)
    }

    pub fn split_samples(&self, split: Split, opts: &IterOptions) -> (Vec<GazeSample>, Vec<SkippedSample>) {
        self.load_samples(Some(self.splits.users(split)), opts)
    }

    /// Distinct user ids in iteration order.
    pub fn user_ids(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.samples {
            if out.last() != Some(&s.user_id) {
                out.push(s.user_id.clone());
            }
        }
        out
    }
}

/// Groups samples by user id, preserving order within each user.
pub fn by_user(samples: &[GazeSample]) -> BTreeMap<String, Vec<&GazeSample>> {
    let mut m: BTreeMap<String, Vec<&GazeSample>> = BTreeMap::new();
    for s in samples {
        m.entry(s.user_id.clone()).or_default().push(s);
    }
    m
}

/// Writes a dataset directory: builds container files from row tensors and
/// records their hashes in the manifest.
#[derive(Debug, Clone)]
pub struct DatasetWriter {
    pub topology: LandmarkTopology,
    pub intrinsics: Option<CameraIntrinsics>,
    pub image_size: [u32; 2],
    pub screen: ScreenSpec,
    pub patch: PatchConfig,
    pub splits: Splits,
    landmarks: Vec<f64>,
    patches: Vec<f64>,
    n_points: Option<usize>,
    entries: Vec<SampleEntry>,
}

/// Row-level input to [`DatasetWriter::push`].
#[derive(Debug, Clone, PartialEq)]
pub struct WriterSample<'a> {
    pub id: String,
    pub user_id: String,
    pub timestamp: f64,
    pub frame: &'a LandmarkFrame,
    pub patch: &'a EyePatch,
    pub gaze_px: [f64; 2],
    pub rotation: [f64; 9],
    pub truth: Option<GroundTruth>,
}

const LANDMARKS_FILE: &str = "landmarks.eytc";
const PATCHES_FILE: &str = "patches.eytc";

impl DatasetWriter {
    pub fn new(
        topology: LandmarkTopology,
        intrinsics: Option<CameraIntrinsics>,
        image_size: [u32; 2],
        screen: ScreenSpec,
        patch: PatchConfig,
        splits: Splits,
    ) -> Self {
        Self {
            topology,
            intrinsics,
            image_size,
            screen,
            patch,
            splits,
            landmarks: Vec::new(),
            patches: Vec::new(),
            n_points: None,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, s: WriterSample<'_>) -> Result<()> {
        let n = *self.n_points.get_or_insert(s.frame.len());
        if s.frame.len() != n {
            return Err(DataError::Invalid(format!("sample {} has {} landmarks, expected {n}", s.id, s.frame.len())));
        }
        if s.patch.height != self.patch.height || s.patch.width != self.patch.width {
            return Err(DataError::Invalid(format!("sample {} patch size differs from the manifest", s.id)));
        }
        let index = self.entries.len();
        self.landmarks.extend(s.frame.points().iter().flat_map(|p| [p.x, p.y, p.z]));
        self.patches.extend(s.patch.pixels.iter().map(|&v| f64::from(v)));
        self.entries.push(SampleEntry {
            id: s.id,
            user_id: s.user_id,
            timestamp: s.timestamp,
            landmarks: LandmarkSource::File(TensorRef {
                file: LANDMARKS_FILE.into(),
                tensor: "landmarks".into(),
                index: Some(index),
            }),
            patch: PatchSource::Patch(TensorRef { file: PATCHES_FILE.into(), tensor: "patches".into(), index: Some(index) }),
            gaze_px: s.gaze_px,
            rotation: s.rotation,
            intrinsics: None,
            truth: s.truth,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Writes containers and `manifest.json` into `dir`; returns the
    /// manifest path.
    pub fn write(self, dir: &Path) -> Result<PathBuf> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| DataError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let n = self.entries.len();
        let p = self.n_points.unwrap_or(0);
        let container_err = |file: &str| {
            let file = file.to_string();
            move |e: crate::nn::NnError| DataError::Container { file, message: e.to_string() }
        };
        let mut files = BTreeMap::new();
        let mut lm = Container::new(serde_json::json!({ "kind": "landmarks" }));
        lm.push("landmarks", DType::F64, Tensor::from_vec(&[n, p, 3], self.landmarks).map_err(container_err(LANDMARKS_FILE))?);
        files.insert(LANDMARKS_FILE.to_string(), lm.write_file(&dir.join(LANDMARKS_FILE)).map_err(container_err(LANDMARKS_FILE))?);
        let mut pc = Container::new(serde_json::json!({ "kind": "patches" }));
        let shape = [n, self.patch.height, self.patch.width, 3];
        pc.push("patches", DType::F32, Tensor::from_vec(&shape, self.patches).map_err(container_err(PATCHES_FILE))?);
        files.insert(PATCHES_FILE.to_string(), pc.write_file(&dir.join(PATCHES_FILE)).map_err(container_err(PATCHES_FILE))?);

        let raw = ManifestFile {
            version: MANIFEST_VERSION,
            topology: self.topology,
            intrinsics: self.intrinsics,
            image_size: self.image_size,
            screen: self.screen,
            patch: Some(self.patch),
            splits: self.splits,
            files,
            samples: self
                .entries
                .iter()
                .map(|e| serde_json::to_value(e).expect("sample entries serialize"))
                .collect(),
        };
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&raw).expect("manifest serializes");
        std::fs::write(&path, text).map_err(io(&path))?;
        Ok(path)
    }
}

/// Encoder outputs keyed by sample id, tied to one encoder checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    pub encoder_hash: String,
    pub embeddings: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingCache {
    pub fn build(model: &BlazeGazeModel, samples: &[GazeSample]) -> std::result::Result<Self, crate::blazegaze::BlazeGazeError> {
        let mut embeddings = BTreeMap::new();
        for s in samples {
            embeddings.insert(s.id.clone(), model.embed(&s.patch.to_chw())?);
        }
        Ok(Self { encoder_hash: model.encoder_hash(), embeddings })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let ids: Vec<&String> = self.embeddings.keys().collect();
        let dim = self.embeddings.values().next().map_or(0, Vec::len);
        let data: Vec<f64> = self.embeddings.values().flatten().copied().collect();
        let file = path.display().to_string();
        let cerr = |e: crate::nn::NnError| DataError::Container { file: file.clone(), message: e.to_string() };
        let mut c = Container::new(serde_json::json!({ "kind": "embeddings", "encoder_hash": self.encoder_hash, "ids": ids }));
        c.push("embeddings", DType::F64, Tensor::from_vec(&[ids.len(), dim], data).map_err(cerr)?);
        c.write_file(path).map_err(cerr)
    }

    /// Loads a cache, returning `None` when it was built by a different
    /// encoder than `encoder_hash`.
    pub fn load(path: &Path, encoder_hash: &str) -> Result<Option<Self>> {
        let file = path.display().to_string();
        let cerr = |message: String| DataError::Container { file: file.clone(), message };
        let (c, _) = Container::read_file(path).map_err(|e| cerr(e.to_string()))?;
        let stored = c.metadata.get("encoder_hash").and_then(|v| v.as_str()).ok_or_else(|| cerr("missing encoder_hash".into()))?;
        if stored != encoder_hash {
            return Ok(None);
        }
        let ids: Vec<String> = serde_json::from_value(c.metadata.get("ids").cloned().unwrap_or_default())
            .map_err(|e| cerr(format!("ids: {e}")))?;
        let t = c.get("embeddings").ok_or_else(|| cerr("missing embeddings tensor".into()))?;
        if t.shape().len() != 2 || t.shape()[0] != ids.len() {
            return Err(cerr(format!("embeddings shape {:?} for {} ids", t.shape(), ids.len())));
        }
        let dim = t.shape()[1];
        let embeddings = ids.into_iter().zip(t.data().chunks(dim.max(1))).map(|(id, z)| (id, z.to_vec())).collect();
        Ok(Some(Self { encoder_hash: stored.to_string(), embeddings }))
    }

    /// Attaches cached embeddings; returns how many samples had no entry.
    pub fn attach(&self, samples: &mut [GazeSample]) -> usize {
        let mut missing = 0;
        for s in samples {
            match self.embeddings.get(&s.id) {
                Some(z) => s.embedding = Some(z.clone()),
                None => missing += 1,
            }
        }
        missing
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        let s = ScreenSpec::laptop();
        assert_eq!(normalize_gaze([960.0, 540.0], &s).unwrap(), ([0.0, 0.0], false));
        assert_eq!(normalize_gaze([0.0, 0.0], &s).unwrap(), ([-0.5, -0.5], false));
        let (g, clamped) = normalize_gaze([2500.0, -10.0], &s).unwrap();
        assert_eq!(g, [0.5, -0.5]);
        assert!(clamped);
        let z = ScreenSpec { width_px: 0, ..s };
        assert!(matches!(normalize_gaze([1.0, 1.0], &z), Err(DataError::ZeroResolution)));
    }

    #[test]
    fn denormalize_inverts() {
        let s = ScreenSpec::laptop();
        for px in [[0.0, 0.0], [123.4, 987.6], [1919.0, 1.0]] {
            let (g, _) = normalize_gaze(px, &s).unwrap();
            let back = denormalize_gaze(g, &s).unwrap();
            assert!((back[0] - px[0]).abs() < 1e-9 && (back[1] - px[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn pointer_escaping() {
        let v = serde_json::json!({ "id": "a", "user_id": 3 });
        let e = from_value::<SampleEntry>(v, "/samples/7").unwrap_err();
        match e {
            DataError::Schema { pointer, .. } => assert_eq!(pointer, "/samples/7/user_id"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn splits_must_be_disjoint() {
        let s = Splits { train: vec!["a".into()], val: vec!["a".into()], test: vec![] };
        assert!(s.validate().is_err());
    }
}
