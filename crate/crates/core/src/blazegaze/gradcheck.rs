//! Finite-difference checks for the stage-1 losses and the composed model.

use rand::Rng;

use super::loss::{consistency_grad, consistency_loss, gaze_grad, gaze_loss, reconstruction_grad, reconstruction_loss};
use super::train::{batch_gradients, batch_loss, TrainSample};
use super::{head_input, ArchConfig, BlazeGazeModel, LossWeights, Result, POSE_DIM};
use crate::nn::Tensor;
use crate::nn::gradcheck::{numeric_grad, numeric_grad_smooth, randomize, CheckReport};
use crate::nn::BlazeBlockSpec;

/// An encoder small enough to probe every parameter: 8×16 input, two
/// blocks (one of each kind, one strided), 2×4×2 embedding.
pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        patch_height: 8,
        patch_width: 16,
        stem_channels: 4,
        blocks: vec![BlazeBlockSpec::single(4, 4, 1), BlazeBlockSpec::double(4, 3, 6, 2)],
        embed_channels: 2,
        decoder_channels: vec![4],
        head_hidden: vec![5, 4],
    }
}

fn report(name: &str, analytic: &[f64], numeric: &[Option<f64>]) -> CheckReport {
    let mut r = CheckReport::new();
    r.record(name, analytic, numeric);
    r
}

/// Activation pattern of encoder, decoder and head over a whole batch.
fn model_pattern(m: &BlazeGazeModel, batch: &[&TrainSample]) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for s in batch {
        let x = Tensor::from_vec(&m.arch.input_shape(), s.patch.clone())?;
        out.extend(m.encoder.activation_pattern(&x)?);
        let z = m.encoder.forward(&x)?;
        out.extend(m.decoder.activation_pattern(&z)?);
        out.extend(m.head.activation_pattern(&head_input(z.data(), &m.pose_norm, &s.pose))?);
    }
    Ok(out)
}

/// Gradients of the three stage-1 losses with respect to their inputs, on a
/// random batch of `b` samples.
pub fn check_losses(b: usize, dim: usize, eps: f64, rng: &mut impl Rng) -> Result<CheckReport> {
    let mut uni = |n: usize, lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(lo..hi)).collect() };
    let target = uni(3 * dim, 0.0, 1.0);
    let recon = uni(3 * dim, 0.0, 1.0);
    let flat_pred = uni(2 * b, -0.5, 0.5);
    let flat_truth = uni(2 * b, -0.5, 0.5);
    let w = uni(b, 0.2, 3.0);
    let flat_z = uni(b * dim, -1.0, 1.0);
    let pairs = |v: &[f64]| -> Vec<[f64; 2]> { v.chunks(2).map(|c| [c[0], c[1]]).collect() };
    let rows = |v: &[f64]| -> Vec<Vec<f64>> { v.chunks(dim).map(<[f64]>::to_vec).collect() };
    let truth = pairs(&flat_truth);
    let all: Vec<usize> = (0..3 * dim).collect();

    let mut out = report(
        "reconstruction",
        &reconstruction_grad(&target, &recon)?,
        &numeric_grad_smooth(
            |p| {
                let mut r = recon.clone();
                p(&mut r);
                reconstruction_loss(&target, &r).unwrap_or(f64::NAN)
            },
            &all,
            eps,
        ),
    );

    let g: Vec<f64> = gaze_grad(&pairs(&flat_pred), &truth, &w)?.into_iter().flatten().collect();
    let idx: Vec<usize> = (0..2 * b).collect();
    let numeric = numeric_grad_smooth(
        |p| {
            let mut v = flat_pred.clone();
            p(&mut v);
            gaze_loss(&pairs(&v), &truth, &w).unwrap_or(f64::NAN)
        },
        &idx,
        eps,
    );
    out.merge(report("gaze", &g, &numeric));

    let g: Vec<f64> = consistency_grad(&rows(&flat_z), &truth, &w, 1e-8)?.into_iter().flatten().collect();
    let idx: Vec<usize> = (0..b * dim).collect();
    let numeric = numeric_grad_smooth(
        |p| {
            let mut v = flat_z.clone();
            p(&mut v);
            consistency_loss(&rows(&v), &truth, &w, 1e-8).unwrap_or(f64::NAN)
        },
        &idx,
        eps,
    );
    out.merge(report("consistency", &g, &numeric));
    Ok(out)
}

/// A random batch matching `arch`.
pub fn random_batch(arch: &ArchConfig, b: usize, rng: &mut impl Rng) -> Vec<TrainSample> {
    let n: usize = arch.input_shape().iter().product();
    (0..b)
        .map(|_| TrainSample {
            patch: (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
            pose: std::array::from_fn::<f64, POSE_DIM, _>(|_| rng.random_range(-1.0..1.0)),
            gaze: [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)],
            weight: rng.random_range(0.5..2.0),
        })
        .collect()
}

/// Total stage-1 objective gradient of a model with randomized parameters
/// against central differences on up to `limit` coordinates per tensor.
pub fn check_model(
    arch: ArchConfig,
    batch_size: usize,
    weights: &LossWeights,
    eps: f64,
    limit: usize,
    rng: &mut impl Rng,
) -> Result<CheckReport> {
    let mut model = BlazeGazeModel::new(arch, rng.random())?;
    randomize(model.params_mut(), 0.5, rng);
    let data = random_batch(&model.arch, batch_size, rng);
    let batch: Vec<&TrainSample> = data.iter().collect();
    let (_, grads) = batch_gradients(&model, &batch, weights, 1e-8)?;
    let grads = grads.into_flat();
    let names: Vec<String> = model
        .encoder
        .param_names("encoder.")
        .into_iter()
        .chain(model.decoder.param_names("decoder."))
        .chain(model.head.param_names("head."))
        .collect();
    let base = model_pattern(&model, &batch)?;
    let mut out = CheckReport::new();
    for (p, name) in names.iter().enumerate() {
        let n = grads[p].len();
        let idx: Vec<usize> = if n <= limit { (0..n).collect() } else { (0..limit).map(|_| rng.random_range(0..n)).collect() };
        let numeric = numeric_grad(
            |perturb| {
                let mut m = model.clone();
                perturb(m.params_mut()[p].data_mut());
                match (batch_loss(&m, &batch, weights, 1e-8), model_pattern(&m, &batch)) {
                    (Ok(t), Ok(pat)) => (t.total, pat),
                    _ => (f64::NAN, Vec::new()),
                }
            },
            &base,
            &idx,
            eps,
        );
        let analytic: Vec<f64> = idx.iter().map(|&i| grads[p].data()[i]).collect();
        out.merge(report(name, &analytic, &numeric));
    }
    Ok(out)
}
