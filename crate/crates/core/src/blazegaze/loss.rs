//! Reconstruction, weighted gaze and embedding-consistency losses with their
//! gradients with respect to the network outputs.

use serde::{Deserialize, Serialize};

use super::{BlazeGazeError, Result};

/// Relative weights of the three stage-1 objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta_r: f64,
    pub beta_g: f64,
    pub beta_c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { beta_r: 1.0, beta_g: 1.0, beta_c: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.beta_r, self.beta_g, self.beta_c];
        if all.iter().any(|b| !b.is_finite() || *b < 0.0) || all.iter().all(|b| *b == 0.0) {
            return Err(BlazeGazeError::Config(format!("loss weights must be non-negative and not all zero: {self:?}")));
        }
        Ok(())
    }
}

/// Per-term batch losses and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub reconstruction: f64,
    pub gaze: f64,
    pub consistency: f64,
}

impl LossTerms {
    pub fn combine(weights: &LossWeights, reconstruction: f64, gaze: f64, consistency: f64) -> Self {
        Self {
            total: weights.beta_r * reconstruction + weights.beta_g * gaze + weights.beta_c * consistency,
            reconstruction,
            gaze,
            consistency,
        }
    }
}

fn check_len(context: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(BlazeGazeError::Shape(format!("{context}: {a} vs {b}")));
    }
    Ok(())
}

/// Mean squared pixel difference.
pub fn reconstruction_loss(target: &[f64], recon: &[f64]) -> Result<f64> {
    check_len("reconstruction", target.len(), recon.len())?;
    if target.is_empty() {
        return Err(BlazeGazeError::Shape("reconstruction of an empty patch".into()));
    }
    Ok(target.iter().zip(recon).map(|(t, r)| (r - t) * (r - t)).sum::<f64>() / target.len() as f64)
}

/// Gradient of [`reconstruction_loss`] with respect to `recon`.
pub fn reconstruction_grad(target: &[f64], recon: &[f64]) -> Result<Vec<f64>> {
    check_len("reconstruction", target.len(), recon.len())?;
    let s = 2.0 / target.len() as f64;
    Ok(target.iter().zip(recon).map(|(t, r)| s * (r - t)).collect())
}

fn check_gaze(pred: &[[f64; 2]], truth: &[[f64; 2]], weights: &[f64]) -> Result<()> {
    check_len("gaze prediction/label", pred.len(), truth.len())?;
    check_len("gaze prediction/weight", pred.len(), weights.len())?;
    if pred.is_empty() {
        return Err(BlazeGazeError::Shape("empty gaze batch".into()));
    }
    let finite = pred.iter().chain(truth).flatten().chain(weights).all(|v| v.is_finite());
    if !finite {
        return Err(BlazeGazeError::NonFinite("gaze loss input".into()));
    }
    Ok(())
}

/// `(1/B) Σ w_i ‖pred_i − truth_i‖²`.
pub fn gaze_loss(pred: &[[f64; 2]], truth: &[[f64; 2]], weights: &[f64]) -> Result<f64> {
    check_gaze(pred, truth, weights)?;
    let sum: f64 = pred
        .iter()
        .zip(truth)
        .zip(weights)
        .map(|((p, t), w)| w * ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2)))
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Gradient of [`gaze_loss`] with respect to each prediction.
pub fn gaze_grad(pred: &[[f64; 2]], truth: &[[f64; 2]], weights: &[f64]) -> Result<Vec<[f64; 2]>> {
    check_gaze(pred, truth, weights)?;
    let s = 2.0 / pred.len() as f64;
    Ok(pred
        .iter()
        .zip(truth)
        .zip(weights)
        .map(|((p, t), w)| [s * w * (p[0] - t[0]), s * w * (p[1] - t[1])])
        .collect())
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn gaze_targets(g: &[[f64; 2]], eps: f64) -> Vec<f64> {
    let b = g.len();
    let mut d = vec![0.0; b * b];
    let mut max: f64 = 0.0;
    for i in 0..b {
        for j in 0..b {
            let v = ((g[i][0] - g[j][0]).powi(2) + (g[i][1] - g[j][1]).powi(2)).sqrt();
            d[i * b + j] = v;
            max = max.max(v);
        }
    }
    d.iter_mut().for_each(|v| *v /= max + eps);
    d
}

fn check_consistency(z: &[Vec<f64>], g: &[[f64; 2]], w: &[f64]) -> Result<()> {
    check_len("consistency embedding/gaze", z.len(), g.len())?;
    check_len("consistency embedding/weight", z.len(), w.len())?;
    if z.len() < 2 {
        return Err(BlazeGazeError::Shape("consistency loss needs at least two samples".into()));
    }
    let dim = z[0].len();
    if z.iter().any(|v| v.len() != dim) {
        return Err(BlazeGazeError::Shape("consistency embeddings differ in length".into()));
    }
    Ok(())
}

/// `(1/B²) Σ_ij w_i w_j (‖z_i − z_j‖ − δ_ij)²` with
/// `δ_ij = ‖g_i − g_j‖ / (max_kl ‖g_k − g_l‖ + eps)`.
pub fn consistency_loss(z: &[Vec<f64>], g: &[[f64; 2]], w: &[f64], eps: f64) -> Result<f64> {
    check_consistency(z, g, w)?;
    let b = z.len();
    let delta = gaze_targets(g, eps);
    let mut sum = 0.0;
    for i in 0..b {
        for j in 0..b {
            let r = euclid(&z[i], &z[j]) - delta[i * b + j];
            sum += w[i] * w[j] * r * r;
        }
    }
    Ok(sum / (b * b) as f64)
}

/// Gradient of [`consistency_loss`] with respect to each embedding. Pairs
/// with coincident embeddings contribute the zero subgradient.
pub fn consistency_grad(z: &[Vec<f64>], g: &[[f64; 2]], w: &[f64], eps: f64) -> Result<Vec<Vec<f64>>> {
    check_consistency(z, g, w)?;
    let b = z.len();
    let delta = gaze_targets(g, eps);
    let s = 4.0 / (b * b) as f64;
    let mut grads = vec![vec![0.0; z[0].len()]; b];
    for i in 0..b {
        for j in (i + 1)..b {
            let d = euclid(&z[i], &z[j]);
            if d == 0.0 {
                continue;
            }
            // Both ordered pairs (i, j) and (j, i) share one distance.
            let c = s * w[i] * w[j] * (d - delta[i * b + j]) / d;
            for k in 0..z[i].len() {
                let diff = c * (z[i][k] - z[j][k]);
                grads[i][k] += diff;
                grads[j][k] -= diff;
            }
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reconstruction_examples() {
        let a = vec![0.2, 0.4, 0.9];
        assert_eq!(reconstruction_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(reconstruction_loss(&[0.0; 6], &[1.0; 6]).unwrap(), 1.0);
        assert!(reconstruction_loss(&a, &a[..2]).is_err());
    }

    #[test]
    fn gaze_examples() {
        let p = [[0.1, -0.2], [0.3, 0.0]];
        assert_eq!(gaze_loss(&p, &p, &[1.0, 3.0]).unwrap(), 0.0);
        let l = gaze_loss(&[[0.1, 0.0]], &[[0.0, 0.0]], &[2.0]).unwrap();
        assert!((l - 0.02).abs() < 1e-15);
        assert!(gaze_loss(&[[f64::NAN, 0.0]], &[[0.0, 0.0]], &[1.0]).is_err());
    }

    #[test]
    fn consistency_examples() {
        let z = vec![vec![0.5, 0.5]; 3];
        let g = [[0.1, 0.1]; 3];
        assert_eq!(consistency_loss(&z, &g, &[1.0; 3], 1e-8).unwrap(), 0.0);

        // Two samples: δ₁₂ = 1/(1 + ε); set ‖z₁ − z₂‖ to exactly that.
        let eps = 1e-8;
        let g = [[0.0, 0.0], [0.5, 0.0]];
        let d = 0.5 / (0.5 + eps);
        let z = vec![vec![0.0, 0.0], vec![d, 0.0]];
        assert_eq!(consistency_loss(&z, &g, &[0.7, 2.0], eps).unwrap(), 0.0);
        assert!(consistency_loss(&z[..1], &g[..1], &[1.0], eps).is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { beta_r: 0.0, beta_g: 0.0, beta_c: 0.0 }.validate().is_err());
        assert!(LossWeights { beta_r: -1.0, ..Default::default() }.validate().is_err());
    }
}
