//! The gaze network: a BlazeBlock encoder producing a flat embedding, a
//! mirrored upsampling decoder used only during representation training, and
//! a small MLP head mapping embedding plus head pose to normalized gaze.

pub mod gradcheck;
pub mod loss;
pub mod train;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::headpose::HeadPose;
use crate::nn::container::{self, Container, DType};
use crate::nn::{
    BlazeBlock, BlazeBlockSpec, Cache, Conv2d, ConvTranspose2d, Dense, Layer, NnError, Sequential, Tensor,
};

pub use loss::{
    consistency_grad, consistency_loss, gaze_grad, gaze_loss, reconstruction_grad, reconstruction_loss,
    LossTerms, LossWeights,
};
pub use train::{
    batch_gradients, batch_loss, train_stage1, EpochRecord, ModelGradients, Split, Stage1Config, Stage1Outcome,
    TrainSample,
};

pub const POSE_DIM: usize = 12;
pub const EMBEDDING_DIM: usize = 512;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BlazeGazeError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String, last_good: Box<BlazeGazeModel> },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, BlazeGazeError>;

/// Network shape. Everything needed to rebuild an untrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub patch_height: usize,
    pub patch_width: usize,
    pub stem_channels: usize,
    pub blocks: Vec<BlazeBlockSpec>,
    /// Channels of the final 1×1 projection; flattened to form the embedding.
    pub embed_channels: usize,
    /// Output channels of each stride-2 upsampling stage except the last,
    /// which always emits 3.
    pub decoder_channels: Vec<usize>,
    pub head_hidden: Vec<usize>,
}

impl ArchConfig {
    /// 128×512 patches.
    pub fn full() -> Self {
        use BlazeBlockSpec as B;
        Self {
            patch_height: 128,
            patch_width: 512,
            stem_channels: 24,
            blocks: vec![
                B::single(24, 24, 1),
                B::single(24, 32, 2),
                B::single(32, 48, 1),
                B::single(48, 64, 2),
                B::single(64, 64, 1),
                B::double(64, 32, 96, 2),
                B::double(96, 32, 96, 1),
                B::double(96, 48, 128, 2),
                B::double(128, 48, 128, 1),
                B::double(128, 48, 128, 1),
                B::double(128, 64, 160, 1),
                B::double(160, 64, 160, 1),
                B::double(160, 48, 160, 1),
            ],
            embed_channels: 8,
            decoder_channels: vec![48, 32, 24, 16],
            head_hidden: vec![16, 16],
        }
    }

    /// 32×128 patches with a narrower ladder, for fast training.
    pub fn reduced() -> Self {
        use BlazeBlockSpec as B;
        Self {
            patch_height: 32,
            patch_width: 128,
            stem_channels: 12,
            blocks: vec![
                B::single(12, 16, 1),
                B::single(16, 24, 2),
                B::single(24, 24, 1),
                B::double(24, 16, 32, 2),
                B::double(32, 16, 32, 1),
            ],
            embed_channels: 8,
            decoder_channels: vec![24, 16],
            head_hidden: vec![16, 16],
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [3, self.patch_height, self.patch_width]
    }

    fn downsample_factor(&self) -> usize {
        2 * self.blocks.iter().map(|b| b.stride).product::<usize>()
    }

    /// Spatial extent of the encoder's final feature map.
    pub fn latent_hw(&self) -> (usize, usize) {
        let f = self.downsample_factor();
        (self.patch_height / f, self.patch_width / f)
    }

    pub fn embedding_dim(&self) -> usize {
        let (h, w) = self.latent_hw();
        self.embed_channels * h * w
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.downsample_factor();
        if self.patch_height % f != 0 || self.patch_width % f != 0 || self.patch_height < f || self.patch_width < f {
            return Err(BlazeGazeError::Config(format!(
                "patch {}x{} not divisible by the encoder's downsampling factor {f}",
                self.patch_height, self.patch_width
            )));
        }
        let mut c = self.stem_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.in_channels != c {
                return Err(BlazeGazeError::Config(format!("block {i} expects {} channels, gets {c}", b.in_channels)));
            }
            c = b.out_channels;
        }
        // Decoder stages: one stride-2 upsampling per encoder downsampling.
        let stages = f.trailing_zeros() as usize;
        if self.decoder_channels.len() + 1 != stages {
            return Err(BlazeGazeError::Config(format!(
                "decoder needs {} intermediate widths for {stages} upsampling stages, got {}",
                stages - 1,
                self.decoder_channels.len()
            )));
        }
        if self.embed_channels == 0 || self.stem_channels == 0 || self.head_hidden.contains(&0) {
            return Err(BlazeGazeError::Config("zero-width layer".into()));
        }
        Ok(())
    }
}

/// Z-scoring constants for the 12-value flattened pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseNormalizer {
    pub mean: [f64; POSE_DIM],
    pub std: [f64; POSE_DIM],
}

impl Default for PoseNormalizer {
    fn default() -> Self {
        Self { mean: [0.0; POSE_DIM], std: [1.0; POSE_DIM] }
    }
}

impl PoseNormalizer {
    /// Spread below this is treated as constant.
    pub const MIN_STD: f64 = 1e-3;

    pub fn fit(poses: &[[f64; POSE_DIM]]) -> Self {
        if poses.is_empty() {
            return Self::default();
        }
        let n = poses.len() as f64;
        let mut mean = [0.0; POSE_DIM];
        let mut std = [0.0; POSE_DIM];
        for p in poses {
            for k in 0..POSE_DIM {
                mean[k] += p[k] / n;
            }
        }
        for p in poses {
            for k in 0..POSE_DIM {
                std[k] += (p[k] - mean[k]).powi(2) / n;
            }
        }
        std.iter_mut().for_each(|s| *s = s.sqrt().max(Self::MIN_STD));
        Self { mean, std }
    }

    pub fn apply(&self, pose: &[f64; POSE_DIM]) -> [f64; POSE_DIM] {
        std::array::from_fn(|k| (pose[k] - self.mean[k]) / self.std[k])
    }
}

pub fn pose_features(pose: &HeadPose) -> [f64; POSE_DIM] {
    pose.flatten()
}

/// Encoder, decoder and gaze head together with the pose normalizer.
#[derive(Debug, Clone, PartialEq)]
pub struct BlazeGazeModel {
    pub arch: ArchConfig,
    pub encoder: Sequential,
    pub decoder: Sequential,
    pub head: Sequential,
    pub pose_norm: PoseNormalizer,
}

/// Builds the gaze head for a given embedding length.
pub fn build_head(embedding_dim: usize, hidden: &[usize], rng: &mut impl rand::Rng) -> Result<Sequential> {
    let mut layers = Vec::new();
    let mut width = embedding_dim + POSE_DIM;
    for &h in hidden {
        layers.push(Layer::Dense(Dense::new(width, h, rng)?));
        layers.push(Layer::Relu);
        width = h;
    }
    layers.push(Layer::Dense(Dense::new(width, 2, rng)?));
    Ok(Sequential::new(layers))
}

/// Concatenation of the embedding and the normalized pose.
pub fn head_input(z: &[f64], pose_norm: &PoseNormalizer, pose: &[f64; POSE_DIM]) -> Tensor {
    let mut v = Vec::with_capacity(z.len() + POSE_DIM);
    v.extend_from_slice(z);
    v.extend_from_slice(&pose_norm.apply(pose));
    Tensor::vector(v)
}

impl BlazeGazeModel {
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut enc = vec![
            Layer::Conv2d(Conv2d::new(3, arch.stem_channels, 5, 2, 2, true, &mut rng)?),
            Layer::Relu,
        ];
        for spec in &arch.blocks {
            enc.push(Layer::Blaze(Box::new(BlazeBlock::new(*spec, &mut rng)?)));
        }
        let last = arch.blocks.last().map_or(arch.stem_channels, |b| b.out_channels);
        enc.push(Layer::Conv2d(Conv2d::new(last, arch.embed_channels, 1, 1, 0, true, &mut rng)?));
        let dim = arch.embedding_dim();
        enc.push(Layer::Reshape(vec![dim]));

        let (lh, lw) = arch.latent_hw();
        let mut dec = vec![Layer::Reshape(vec![arch.embed_channels, lh, lw])];
        let mut c = arch.embed_channels;
        for &out in &arch.decoder_channels {
            dec.push(Layer::ConvTranspose(ConvTranspose2d::new(c, out, 4, 2, 1, true, &mut rng)?));
            dec.push(Layer::Relu);
            c = out;
        }
        dec.push(Layer::ConvTranspose(ConvTranspose2d::new(c, 3, 4, 2, 1, true, &mut rng)?));
        dec.push(Layer::Sigmoid);

        let head = build_head(dim, &arch.head_hidden, &mut rng)?;
        Ok(Self {
            arch,
            encoder: Sequential::new(enc),
            decoder: Sequential::new(dec),
            head,
            pose_norm: PoseNormalizer::default(),
        })
    }

    fn check_patch(&self, patch: &[f64]) -> Result<Tensor> {
        let shape = self.arch.input_shape();
        Tensor::from_vec(&shape, patch.to_vec()).map_err(|_| {
            BlazeGazeError::Shape(format!("patch has {} values, model expects {:?}", patch.len(), shape))
        })
    }

    pub fn embed(&self, patch: &[f64]) -> Result<Vec<f64>> {
        let x = self.check_patch(patch)?;
        Ok(self.encoder.forward(&x)?.into_data())
    }

    pub fn reconstruct(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.decoder.forward(&Tensor::vector(z.to_vec()))?.into_data())
    }

    pub fn gaze_from_embedding(&self, z: &[f64], pose: &[f64; POSE_DIM]) -> Result<[f64; 2]> {
        predict_head(&self.head, &self.pose_norm, z, pose)
    }

    pub fn predict(&self, patch: &[f64], pose: &[f64; POSE_DIM]) -> Result<[f64; 2]> {
        let z = self.embed(patch)?;
        self.gaze_from_embedding(&z, pose)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p.extend(self.head.params_mut());
        p
    }

    /// Parameters of the deployed network (encoder and gaze head).
    pub fn inference_param_count(&self) -> usize {
        self.encoder.param_count() + self.head.param_count()
    }

    pub fn total_param_count(&self) -> usize {
        self.inference_param_count() + self.decoder.param_count()
    }

    /// MACs of one encoder + head forward pass.
    pub fn inference_macs(&self) -> Result<u64> {
        let shape = self.arch.input_shape();
        Ok(self.encoder.macs(&shape)? + self.head.macs(&[self.arch.embedding_dim() + POSE_DIM])?)
    }

    pub fn encoder_hash(&self) -> String {
        container::params_hash(&self.encoder.params())
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, seq) in [("encoder.", &self.encoder), ("decoder.", &self.decoder), ("head.", &self.head)] {
            out.extend(seq.param_names(prefix).into_iter().zip(seq.params()));
        }
        out
    }

    pub fn to_container(&self, extra: serde_json::Value) -> Container {
        let meta = serde_json::json!({
            "kind": "blazegaze",
            "arch": self.arch,
            "pose_norm": self.pose_norm,
            "encoder_hash": self.encoder_hash(),
            "extra": extra,
        });
        let mut c = Container::new(meta);
        for (name, t) in self.named_params() {
            c.push(name, DType::F64, t.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let bad = |m: &str| BlazeGazeError::Checkpoint(m.to_string());
        if c.metadata.get("kind").and_then(|k| k.as_str()) != Some("blazegaze") {
            return Err(bad("not a blazegaze checkpoint"));
        }
        let arch: ArchConfig = serde_json::from_value(c.metadata["arch"].clone())
            .map_err(|e| BlazeGazeError::Checkpoint(format!("arch: {e}")))?;
        let pose_norm: PoseNormalizer = serde_json::from_value(c.metadata["pose_norm"].clone())
            .map_err(|e| BlazeGazeError::Checkpoint(format!("pose_norm: {e}")))?;
        let mut model = Self::new(arch, 0)?;
        model.pose_norm = pose_norm;
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        if names.len() != c.entries.len() {
            return Err(bad("tensor count does not match architecture"));
        }
        for (dst, name) in model.params_mut().into_iter().zip(&names) {
            let src = c.get(name).ok_or_else(|| BlazeGazeError::Checkpoint(format!("missing tensor {name}")))?;
            if src.shape() != dst.shape() {
                return Err(BlazeGazeError::Checkpoint(format!("tensor {name} has shape {:?}", src.shape())));
            }
            *dst = src.clone();
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<String> {
        Ok(self.to_container(extra).write_file(path)?)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let (c, hash) = Container::read_file(path)?;
        Ok((Self::from_container(&c)?, hash))
    }
}

/// Gaze head forward for a single sample.
pub fn predict_head(head: &Sequential, norm: &PoseNormalizer, z: &[f64], pose: &[f64; POSE_DIM]) -> Result<[f64; 2]> {
    let y = head.forward(&head_input(z, norm, pose))?;
    Ok([y.data()[0], y.data()[1]])
}

/// Head forward keeping caches, for gradient computation.
pub fn head_forward_train(
    head: &Sequential,
    norm: &PoseNormalizer,
    z: &[f64],
    pose: &[f64; POSE_DIM],
) -> Result<([f64; 2], Vec<Cache>)> {
    let (y, caches) = head.forward_train(&head_input(z, norm, pose))?;
    Ok(([y.data()[0], y.data()[1]], caches))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid_and_embed_to_512() {
        for arch in [ArchConfig::full(), ArchConfig::reduced()] {
            arch.validate().unwrap();
            assert_eq!(arch.embedding_dim(), EMBEDDING_DIM);
        }
    }

    #[test]
    fn full_model_parameter_count_in_range() {
        let m = BlazeGazeModel::new(ArchConfig::full(), 0).unwrap();
        let n = m.inference_param_count();
        assert!((120_000..=200_000).contains(&n), "{n} parameters");
    }

    #[test]
    fn reduced_shapes() {
        let m = BlazeGazeModel::new(ArchConfig::reduced(), 1).unwrap();
        let patch = vec![0.5; 3 * 32 * 128];
        let z = m.embed(&patch).unwrap();
        assert_eq!(z.len(), 512);
        let r = m.reconstruct(&z).unwrap();
        assert_eq!(r.len(), patch.len());
        assert!(r.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(m.predict(&patch[..10], &[0.0; 12]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = BlazeGazeModel::new(ArchConfig::reduced(), 2).unwrap();
        m.pose_norm.mean[11] = 60.0;
        let c = m.to_container(serde_json::json!({"note": 1}));
        let bytes = c.to_bytes().unwrap();
        let back = BlazeGazeModel::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn pose_normalizer_floors_std() {
        let mut a = [0.0; 12];
        a[11] = 50.0;
        let mut b = a;
        b[11] = 70.0;
        let n = PoseNormalizer::fit(&[a, b]);
        assert_eq!(n.mean[11], 60.0);
        assert_eq!(n.std[11], 10.0);
        assert_eq!(n.std[0], PoseNormalizer::MIN_STD);
        assert_eq!(n.apply(&b)[11], 1.0);
    }
}
