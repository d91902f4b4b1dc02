use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{
    consistency_grad, consistency_loss, gaze_grad, gaze_loss, reconstruction_grad, reconstruction_loss, LossTerms,
    LossWeights,
};
use super::{head_forward_train, predict_head, BlazeGazeError, BlazeGazeModel, PoseNormalizer, Result, POSE_DIM};
use crate::nn::{Optimizer, OptimizerKind, Tensor};

/// One training example: CHW patch in [0, 1], flattened pose, normalized
/// gaze label and sample weight.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub patch: Vec<f64>,
    pub pose: [f64; POSE_DIM],
    pub gaze: [f64; 2],
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay: f64,
    pub weights: LossWeights,
    pub consistency_eps: f64,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            lr: 1e-3,
            decay: 0.95,
            weights: LossWeights::default(),
            consistency_eps: 1e-8,
            seed: 0,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) || !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(BlazeGazeError::Config(format!("invalid stage-1 settings {self:?}")));
        }
        if !(self.consistency_eps > 0.0) {
            return Err(BlazeGazeError::Config("consistency eps must be positive".into()));
        }
        Ok(())
    }
}

/// Gradients for every model parameter, split by sub-network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients {
    pub encoder: Vec<Tensor>,
    pub decoder: Vec<Tensor>,
    pub head: Vec<Tensor>,
}

impl ModelGradients {
    pub fn zeros(model: &BlazeGazeModel) -> Self {
        Self { encoder: model.encoder.zero_grads(), decoder: model.decoder.zero_grads(), head: model.head.zero_grads() }
    }

    /// In [`BlazeGazeModel::params`] order.
    pub fn into_flat(self) -> Vec<Tensor> {
        let mut v = self.encoder;
        v.extend(self.decoder);
        v.extend(self.head);
        v
    }
}

fn check_sample(model: &BlazeGazeModel, s: &TrainSample) -> Result<Tensor> {
    let shape = model.arch.input_shape();
    Tensor::from_vec(&shape, s.patch.clone())
        .map_err(|_| BlazeGazeError::Shape(format!("patch has {} values, model expects {shape:?}", s.patch.len())))
}

fn terms(
    weights: &LossWeights,
    batch: &[&TrainSample],
    zs: &[Vec<f64>],
    recons: &[Vec<f64>],
    preds: &[[f64; 2]],
    eps: f64,
) -> Result<LossTerms> {
    let b = batch.len() as f64;
    let mut rec = 0.0;
    for (s, r) in batch.iter().zip(recons) {
        rec += reconstruction_loss(&s.patch, r)? / b;
    }
    let truth: Vec<[f64; 2]> = batch.iter().map(|s| s.gaze).collect();
    let w: Vec<f64> = batch.iter().map(|s| s.weight).collect();
    let gaze = gaze_loss(preds, &truth, &w)?;
    let cons = if batch.len() >= 2 { consistency_loss(zs, &truth, &w, eps)? } else { 0.0 };
    Ok(LossTerms::combine(weights, rec, gaze, cons))
}

/// Batch objective without gradients.
pub fn batch_loss(model: &BlazeGazeModel, batch: &[&TrainSample], weights: &LossWeights, eps: f64) -> Result<LossTerms> {
    let mut zs = Vec::with_capacity(batch.len());
    let mut recons = Vec::with_capacity(batch.len());
    let mut preds = Vec::with_capacity(batch.len());
    for s in batch {
        let z = model.encoder.forward(&check_sample(model, s)?)?;
        recons.push(model.decoder.forward(&z)?.into_data());
        preds.push(predict_head(&model.head, &model.pose_norm, z.data(), &s.pose)?);
        zs.push(z.into_data());
    }
    terms(weights, batch, &zs, &recons, &preds, eps)
}

/// Batch objective and its exact gradient with respect to every parameter.
pub fn batch_gradients(
    model: &BlazeGazeModel,
    batch: &[&TrainSample],
    weights: &LossWeights,
    eps: f64,
) -> Result<(LossTerms, ModelGradients)> {
    let mut enc_caches = Vec::with_capacity(batch.len());
    let mut dec_caches = Vec::with_capacity(batch.len());
    let mut head_caches = Vec::with_capacity(batch.len());
    let mut zs = Vec::with_capacity(batch.len());
    let mut recons = Vec::with_capacity(batch.len());
    let mut preds = Vec::with_capacity(batch.len());
    for s in batch {
        let (z, ec) = model.encoder.forward_train(&check_sample(model, s)?)?;
        let (r, dc) = model.decoder.forward_train(&z)?;
        let (p, hc) = head_forward_train(&model.head, &model.pose_norm, z.data(), &s.pose)?;
        enc_caches.push(ec);
        dec_caches.push(dc);
        head_caches.push(hc);
        zs.push(z.into_data());
        recons.push(r.into_data());
        preds.push(p);
    }
    let loss = terms(weights, batch, &zs, &recons, &preds, eps)?;

    let b = batch.len() as f64;
    let truth: Vec<[f64; 2]> = batch.iter().map(|s| s.gaze).collect();
    let w: Vec<f64> = batch.iter().map(|s| s.weight).collect();
    let g_pred = gaze_grad(&preds, &truth, &w)?;
    let g_cons = if batch.len() >= 2 && weights.beta_c != 0.0 {
        Some(consistency_grad(&zs, &truth, &w, eps)?)
    } else {
        None
    };

    let mut grads = ModelGradients::zeros(model);
    let dim = zs[0].len();
    for i in 0..batch.len() {
        let mut gz = vec![0.0; dim];
        if weights.beta_r != 0.0 {
            let mut g = reconstruction_grad(&batch[i].patch, &recons[i])?;
            g.iter_mut().for_each(|v| *v *= weights.beta_r / b);
            let shape = model.arch.input_shape();
            let gin = model.decoder.backward(&dec_caches[i], &Tensor::from_vec(&shape, g)?, &mut grads.decoder);
            gz.iter_mut().zip(gin.data()).for_each(|(a, v)| *a += v);
        }
        if weights.beta_g != 0.0 {
            let g = Tensor::vector(vec![weights.beta_g * g_pred[i][0], weights.beta_g * g_pred[i][1]]);
            let gin = model.head.backward(&head_caches[i], &g, &mut grads.head);
            gz.iter_mut().zip(&gin.data()[..dim]).for_each(|(a, v)| *a += v);
        }
        if let Some(gc) = &g_cons {
            gz.iter_mut().zip(&gc[i]).for_each(|(a, v)| *a += weights.beta_c * v);
        }
        model.encoder.backward(&enc_caches[i], &Tensor::vector(gz), &mut grads.encoder);
    }
    Ok((loss, grads))
}

/// Mean loss over fixed-order batches, weighted by batch size.
fn evaluate(model: &BlazeGazeModel, data: &[TrainSample], cfg: &Stage1Config) -> Result<LossTerms> {
    let mut acc = LossTerms::default();
    let n = data.len() as f64;
    for chunk in data.chunks(cfg.batch_size) {
        let refs: Vec<&TrainSample> = chunk.iter().collect();
        let t = batch_loss(model, &refs, &cfg.weights, cfg.consistency_eps)?;
        let f = chunk.len() as f64 / n;
        acc.total += f * t.total;
        acc.reconstruction += f * t.reconstruction;
        acc.gaze += f * t.gaze;
        acc.consistency += f * t.consistency;
    }
    Ok(acc)
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    #[serde(flatten)]
    pub loss: LossTerms,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Outcome {
    /// Model with the lowest validation loss (training loss if there is no
    /// validation split), epoch 0 included.
    pub model: BlazeGazeModel,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
}

impl Stage1Outcome {
    pub fn val_curve(&self) -> Vec<f64> {
        self.log.iter().filter(|r| r.split == Split::Val).map(|r| r.loss.total).collect()
    }
}

/// Joint training of encoder, decoder and head with Adam and per-epoch
/// exponential decay. Epoch 0 is the untrained model. The pose normalizer is
/// fitted to the training split.
pub fn train_stage1(
    mut model: BlazeGazeModel,
    train: &[TrainSample],
    val: &[TrainSample],
    cfg: &Stage1Config,
) -> Result<Stage1Outcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(BlazeGazeError::Config("empty training split".into()));
    }
    let poses: Vec<[f64; POSE_DIM]> = train.iter().map(|s| s.pose).collect();
    model.pose_norm = PoseNormalizer::fit(&poses);
    let mut opt = Optimizer::new(OptimizerKind::adam(cfg.lr))?.with_decay(cfg.decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::new();

    let select = |m: &BlazeGazeModel, log: &mut Vec<EpochRecord>, epoch: usize, lr: f64, train_loss: LossTerms| {
        log.push(EpochRecord { epoch, split: Split::Train, loss: train_loss, lr });
        if val.is_empty() {
            return Ok::<f64, BlazeGazeError>(train_loss.total);
        }
        let v = evaluate(m, val, cfg)?;
        log.push(EpochRecord { epoch, split: Split::Val, loss: v, lr });
        Ok(v.total)
    };

    let initial = evaluate(&model, train, cfg)?;
    let mut best_score = select(&model, &mut log, 0, opt.current_lr(), initial)?;
    let mut best = model.clone();
    let mut best_epoch = 0;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let lr = opt.current_lr();
        let mut acc = LossTerms::default();
        let n = train.len() as f64;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = batch_gradients(&model, &batch, &cfg.weights, cfg.consistency_eps)?;
            if !loss.total.is_finite() {
                return Err(BlazeGazeError::Diverged {
                    epoch,
                    reason: "non-finite loss".into(),
                    last_good: Box::new(best),
                });
            }
            if let Err(e) = opt.step(model.params_mut(), &grads.into_flat()) {
                return Err(BlazeGazeError::Diverged { epoch, reason: e.to_string(), last_good: Box::new(best) });
            }
            let f = chunk.len() as f64 / n;
            acc.total += f * loss.total;
            acc.reconstruction += f * loss.reconstruction;
            acc.gaze += f * loss.gaze;
            acc.consistency += f * loss.consistency;
        }
        opt.end_epoch();
        let score = select(&model, &mut log, epoch, lr, acc)?;
        log::debug!("stage1 epoch {epoch}: train {:.6} score {score:.6}", acc.total);
        if !score.is_finite() {
            return Err(BlazeGazeError::Diverged {
                epoch,
                reason: "non-finite validation loss".into(),
                last_good: Box::new(best),
            });
        }
        if score < best_score {
            best_score = score;
            best = model.clone();
            best_epoch = epoch;
        }
    }
    Ok(Stage1Outcome { model: best, best_epoch, log })
}
