//! Network inputs: homography-normalized eye strips, eye-aspect-ratio blink
//! gating and the inverse-frequency sample-weight grid over gaze labels.

use nalgebra::{Matrix3, SMatrix, SVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::LandmarkFrame;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreprocessError {
    #[error("degenerate eye: corner distance is zero")]
    DegenerateEye,
    #[error("degenerate quad: corners are collinear or coincide")]
    DegenerateQuad,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, PreprocessError>;

/// Display resolution and physical size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScreenSpec {
    pub width_px: u32,
    pub height_px: u32,
    pub width_cm: f64,
    pub height_cm: f64,
}

impl ScreenSpec {
    pub fn new(width_px: u32, height_px: u32, width_cm: f64, height_cm: f64) -> Result<Self> {
        let s = Self { width_px, height_px, width_cm, height_cm };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_px == 0
            || self.height_px == 0
            || !(self.width_cm > 0.0 && self.height_cm > 0.0)
            || !(self.width_cm.is_finite() && self.height_cm.is_finite())
        {
            return Err(PreprocessError::InvalidInput(format!("invalid screen {self:?}")));
        }
        Ok(())
    }

    /// 15.6" 1080p laptop panel.
    pub fn laptop() -> Self {
        Self { width_px: 1920, height_px: 1080, width_cm: 34.4, height_cm: 19.4 }
    }
}

/// Eye aspect ratio `(|p2-p6| + |p3-p5|) / (2 |p1-p4|)`.
pub fn ear(ring: &[Vector2<f64>; 6]) -> Result<f64> {
    let horizontal = (ring[0] - ring[3]).norm();
    if !(horizontal > 0.0) {
        return Err(PreprocessError::DegenerateEye);
    }
    Ok(((ring[1] - ring[5]).norm() + (ring[2] - ring[4]).norm()) / (2.0 * horizontal))
}

pub const DEFAULT_BLINK_THRESHOLD: f64 = 0.2;

/// `true` means suppress: the mean EAR is strictly below `threshold`.
pub fn blink_gate(left_ear: f64, right_ear: f64, threshold: f64) -> bool {
    0.5 * (left_ear + right_ear) < threshold
}

/// Left and right EAR for a landmark frame.
pub fn frame_ears(frame: &LandmarkFrame) -> Result<(f64, f64)> {
    let topo = frame.topology();
    let ring = |idx: &[usize; 6]| -> [Vector2<f64>; 6] { idx.map(|i| frame.uv(i)) };
    Ok((ear(&ring(&topo.left_eye_ring))?, ear(&ring(&topo.right_eye_ring))?))
}

/// An RGB raster, row-major, interleaved, values in `[0, 1]`. Pixel
/// `(x, y)` covers the continuous location `(x, y)` at its centre.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// Bilinear sample; zero outside the pixel-centre grid.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> [f32; 3] {
        if !(x >= 0.0 && y >= 0.0) || x > (self.width - 1) as f64 || y > (self.height - 1) as f64 {
            return [0.0; 3];
        }
        let x0 = (x.floor() as usize).min(self.width - 1);
        let y0 = (y.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = (x - x0 as f64) as f32;
        let fy = (y - y0 as f64) as f32;
        let (a, b, c, d) = (self.pixel(x0, y0), self.pixel(x1, y0), self.pixel(x0, y1), self.pixel(x1, y1));
        let mut out = [0.0f32; 3];
        for ch in 0..3 {
            let top = a[ch] + (b[ch] - a[ch]) * fx;
            let bottom = c[ch] + (d[ch] - c[ch]) * fx;
            out[ch] = top + (bottom - top) * fy;
        }
        out
    }
}

/// Planar projective map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(pub Matrix3<f64>);

impl Homography {
    /// Exact four-point DLT with `h33 = 1`.
    pub fn from_correspondences(src: &[Vector2<f64>; 4], dst: &[Vector2<f64>; 4]) -> Result<Self> {
        if quad_is_degenerate(src) || quad_is_degenerate(dst) {
            return Err(PreprocessError::DegenerateQuad);
        }
        let mut a = SMatrix::<f64, 8, 8>::zeros();
        let mut b = SVector::<f64, 8>::zeros();
        for i in 0..4 {
            let (x, y) = (src[i].x, src[i].y);
            let (u, v) = (dst[i].x, dst[i].y);
            let r = 2 * i;
            a.row_mut(r).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
            a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
            b[r] = u;
            b[r + 1] = v;
        }
        let h = a.lu().solve(&b).ok_or(PreprocessError::DegenerateQuad)?;
        Ok(Self(Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0)))
    }

    #[inline]
    pub fn apply(&self, p: Vector2<f64>) -> Vector2<f64> {
        let q = self.0 * Vector3::new(p.x, p.y, 1.0);
        Vector2::new(q.x / q.z, q.y / q.z)
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self.0.try_inverse().ok_or(PreprocessError::DegenerateQuad)?;
        Ok(Self(inv / inv[(2, 2)]))
    }
}

fn quad_is_degenerate(q: &[Vector2<f64>; 4]) -> bool {
    let scale = (0..4)
        .flat_map(|i| (0..4).map(move |j| (i, j)))
        .map(|(i, j)| (q[i] - q[j]).norm_squared())
        .fold(0.0, f64::max);
    if !(scale > 0.0) {
        return true;
    }
    for skip in 0..4 {
        let p: Vec<_> = (0..4).filter(|&i| i != skip).map(|i| q[i]).collect();
        let area = (p[1] - p[0]).perp(&(p[2] - p[0])).abs();
        if area <= 1e-9 * scale {
            return true;
        }
    }
    false
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub height: usize,
    pub width: usize,
    /// Strip half-height as a fraction of the outer-corner distance.
    pub quad_height_factor: f64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self { height: 128, width: 512, quad_height_factor: 0.35 }
    }
}

impl PatchConfig {
    pub fn reduced() -> Self {
        Self { height: 32, width: 128, ..Self::default() }
    }
}

/// Both-eyes strip, `height x width x 3`, row-major RGB in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EyePatch {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub frame_id: u64,
}

impl EyePatch {
    /// Channel-major copy (`3 x H x W`) for the network.
    pub fn to_chw(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = f64::from(px[c]);
            }
        }
        out
    }
}

/// Source quad in image coordinates, ordered top-left, top-right,
/// bottom-right, bottom-left in patch orientation.
pub fn eye_strip_quad(frame: &LandmarkFrame, quad_height_factor: f64) -> [Vector2<f64>; 4] {
    let c = frame.topology().eye_corner_idxs;
    let a = frame.uv(c[0]);
    let b = frame.uv(c[3]);
    let axis = b - a;
    // Image y points down, so this perpendicular points towards the chin.
    let down = Vector2::new(-axis.y, axis.x) * quad_height_factor;
    [a - down, b - down, b + down, a + down]
}

/// Homography from the source eye quad to patch coordinates, where the
/// patch spans `[0, W] x [0, H]`.
pub fn patch_homography(frame: &LandmarkFrame, cfg: &PatchConfig) -> Result<Homography> {
    let src = eye_strip_quad(frame, cfg.quad_height_factor);
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let dst = [
        Vector2::new(0.0, 0.0),
        Vector2::new(w, 0.0),
        Vector2::new(w, h),
        Vector2::new(0.0, h),
    ];
    Homography::from_correspondences(&src, &dst)
}

pub fn eye_patch_homography(
    image: &Image,
    frame: &LandmarkFrame,
    cfg: &PatchConfig,
    frame_id: u64,
) -> Result<EyePatch> {
    let to_source = patch_homography(frame, cfg)?.inverse()?;
    let mut pixels = Vec::with_capacity(cfg.height * cfg.width * 3);
    for row in 0..cfg.height {
        for col in 0..cfg.width {
            let p = to_source.apply(Vector2::new(col as f64 + 0.5, row as f64 + 0.5));
            pixels.extend_from_slice(&image.sample_bilinear(p.x, p.y));
        }
    }
    Ok(EyePatch { height: cfg.height, width: cfg.width, pixels, frame_id })
}

/// Grid side for the inverse-frequency weights.
pub const WEIGHT_GRID: usize = 30;

/// Cell containing `g`, half-open bins except the closed last bin. The flag
/// is set when `g` had to be clamped into `[-0.5, 0.5]²`.
pub fn grid_cell(g: [f64; 2]) -> ((usize, usize), bool) {
    let mut clamped = false;
    let mut axis = |v: f64| -> usize {
        if !(-0.5..=0.5).contains(&v) {
            clamped = true;
        }
        let pos = ((v + 0.5) * WEIGHT_GRID as f64).floor();
        if pos.is_nan() {
            clamped = true;
            return 0;
        }
        (pos.max(0.0) as usize).min(WEIGHT_GRID - 1)
    };
    let cell = (axis(g[0]), axis(g[1]));
    (cell, clamped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleWeightGrid {
    /// Row-major over `(x bin, y bin)`: index `x * 30 + y`.
    pub cells: Vec<f64>,
    pub counts: Vec<u32>,
    pub samples: usize,
}

pub fn build_weight_grid(labels: &[[f64; 2]]) -> Result<SampleWeightGrid> {
    if labels.is_empty() {
        return Err(PreprocessError::InvalidInput("no gaze labels".into()));
    }
    let mut counts = vec![0u32; WEIGHT_GRID * WEIGHT_GRID];
    for g in labels {
        if !(g[0].is_finite() && g[1].is_finite()) {
            return Err(PreprocessError::InvalidInput(format!("non-finite gaze {g:?}")));
        }
        let ((x, y), _) = grid_cell(*g);
        counts[x * WEIGHT_GRID + y] += 1;
    }
    let raw: Vec<f64> = counts.iter().map(|&c| 1.0 / f64::from(c.max(1))).collect();
    let occupied: Vec<usize> = (0..counts.len()).filter(|&i| counts[i] > 0).collect();
    let mean = occupied.iter().map(|&i| raw[i]).sum::<f64>() / occupied.len() as f64;
    let mut cells: Vec<f64> = raw.iter().map(|w| w / mean).collect();
    let max_seen = occupied.iter().map(|&i| cells[i]).fold(0.0, f64::max);
    for (w, &c) in cells.iter_mut().zip(&counts) {
        if c == 0 {
            *w = max_seen;
        }
    }
    Ok(SampleWeightGrid { cells, counts, samples: labels.len() })
}

impl SampleWeightGrid {
    /// Weight for `g` and whether `g` was clamped into range.
    pub fn weight_for(&self, g: [f64; 2]) -> (f64, bool) {
        let ((x, y), clamped) = grid_cell(g);
        (self.cells[x * WEIGHT_GRID + y], clamped)
    }

    /// All-ones grid, for unweighted training.
    pub fn uniform() -> Self {
        Self {
            cells: vec![1.0; WEIGHT_GRID * WEIGHT_GRID],
            counts: vec![0; WEIGHT_GRID * WEIGHT_GRID],
            samples: 0,
        }
    }
}
