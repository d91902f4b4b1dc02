//! Central finite-difference gradient checks.
//!
//! Every check contracts the output with a random cotangent `r`, so the
//! scalar under test is `Σ r ⊙ f(x)`, and reports the relative error
//! `‖analytic − numeric‖ / (‖analytic‖ + ‖numeric‖)` per tensor.
//!
//! ReLU and max-pool make networks piecewise smooth. A coordinate whose
//! `±eps` probe changes the activation pattern straddles a kink, where the
//! central difference does not estimate the derivative; such coordinates are
//! counted in [`CheckReport::skipped`] and left out of the error.

use rand::Rng;

use super::{Layer, Result, Sequential, Tensor};

pub const DEFAULT_EPS: f64 = 1e-4;

/// Worst per-tensor relative error, with the tensor that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
    pub skipped: usize,
}

impl CheckReport {
    pub fn new() -> Self {
        Self { max_rel_error: 0.0, worst: String::new(), checked: 0, skipped: 0 }
    }

    /// Adds one tensor's comparison; `None` entries in `numeric` are kinks.
    pub fn record(&mut self, name: &str, analytic: &[f64], numeric: &[Option<f64>]) {
        let (a, n): (Vec<f64>, Vec<f64>) =
            analytic.iter().zip(numeric).filter_map(|(a, n)| n.map(|n| (*a, n))).unzip();
        let e = rel_error(&a, &n);
        self.checked += a.len();
        self.skipped += analytic.len() - a.len();
        if e > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(e);
            self.worst = name.to_string();
        }
    }

    pub fn merge(&mut self, other: CheckReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if other.max_rel_error > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na + nb < 1e-12 {
        0.0
    } else {
        diff / (na + nb)
    }
}

fn contract(y: &Tensor, r: &Tensor) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Coordinates to probe: all of them, or `limit` drawn at random.
fn coords(n: usize, limit: Option<usize>, rng: &mut impl Rng) -> Vec<usize> {
    match limit {
        Some(k) if k < n => (0..k).map(|_| rng.random_range(0..n)).collect(),
        _ => (0..n).collect(),
    }
}

impl Default for CheckReport {
    fn default() -> Self {
        Self::new()
    }
}

/// Central difference along `coords`. `f` applies the given perturbation to
/// its own copy of the buffer and returns the scalar plus the activation
/// pattern; coordinates whose pattern departs from `base` come back `None`.
pub fn numeric_grad(
    mut f: impl FnMut(&mut dyn FnMut(&mut [f64])) -> (f64, Vec<u64>),
    base: &[u64],
    coords: &[usize],
    eps: f64,
) -> Vec<Option<f64>> {
    coords
        .iter()
        .map(|&i| {
            let (up, pu) = f(&mut |b: &mut [f64]| b[i] += eps);
            let (down, pd) = f(&mut |b: &mut [f64]| b[i] -= eps);
            (pu == base && pd == base).then(|| (up - down) / (2.0 * eps))
        })
        .collect()
}

/// [`numeric_grad`] for a smooth scalar function.
pub fn numeric_grad_smooth(
    mut f: impl FnMut(&mut dyn FnMut(&mut [f64])) -> f64,
    coords: &[usize],
    eps: f64,
) -> Vec<Option<f64>> {
    numeric_grad(|p| (f(p), Vec::new()), &[], coords, eps)
}

fn probe(net: &Sequential, x: &Tensor, r: &Tensor) -> (f64, Vec<u64>) {
    match (net.forward(x), net.activation_pattern(x)) {
        (Ok(y), Ok(p)) => (contract(&y, r), p),
        _ => (f64::NAN, Vec::new()),
    }
}

/// Checks a network's input and parameter gradients at `x`.
pub fn check_sequential(net: &Sequential, x: &Tensor, eps: f64, limit: Option<usize>, rng: &mut impl Rng) -> Result<CheckReport> {
    let (y, caches) = net.forward_train(x)?;
    let r = Tensor::from_vec(y.shape(), (0..y.len()).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let mut grads = net.zero_grads();
    let gin = net.backward(&caches, &r, &mut grads);
    let base = net.activation_pattern(x)?;
    let mut report = CheckReport::new();

    let idx = coords(x.len(), limit, rng);
    let numeric = numeric_grad(
        |perturb| {
            let mut xp = x.clone();
            perturb(xp.data_mut());
            probe(net, &xp, &r)
        },
        &base,
        &idx,
        eps,
    );
    let analytic: Vec<f64> = idx.iter().map(|&i| gin.data()[i]).collect();
    report.record("input", &analytic, &numeric);

    let names = net.param_names("");
    for (p, name) in names.iter().enumerate() {
        let n = net.params()[p].len();
        let idx = coords(n, limit, rng);
        let numeric = numeric_grad(
            |perturb| {
                let mut np = net.clone();
                perturb(np.params_mut()[p].data_mut());
                probe(&np, x, &r)
            },
            &base,
            &idx,
            eps,
        );
        let analytic: Vec<f64> = idx.iter().map(|&i| grads[p].data()[i]).collect();
        report.record(name, &analytic, &numeric);
    }
    Ok(report)
}

/// [`check_sequential`] for a single layer.
pub fn check_layer(layer: Layer, x: &Tensor, eps: f64, rng: &mut impl Rng) -> Result<CheckReport> {
    check_sequential(&Sequential::new(vec![layer]), x, eps, None, rng)
}

/// Sets every parameter to uniform noise in `[-scale, scale]`, so biases
/// and zero-initialized weights are exercised too.
pub fn randomize(params: Vec<&mut Tensor>, scale: f64, rng: &mut impl Rng) {
    for p in params {
        p.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
    }
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches")
}
