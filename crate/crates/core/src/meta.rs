//! First-order MAML over the gaze head: inner-loop SGD adaptation on a
//! user's support set, an outer Adam update from query gradients taken at the
//! adapted weights, and test-time personalization with support growth.
//!
//! The encoder never appears here; samples carry precomputed embeddings.

use rand::seq::{index, IndexedRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::blazegaze::{gaze_grad, gaze_loss, head_forward_train, BlazeGazeError, PoseNormalizer, POSE_DIM};
use crate::nn::container::{self, Container, DType};
use crate::nn::{NnError, Optimizer, OptimizerKind, Sequential, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetaError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] BlazeGazeError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, MetaError>;

/// Embedding-level sample consumed by the gaze head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSample {
    pub z: Vec<f64>,
    pub pose: [f64; POSE_DIM],
    pub gaze: [f64; 2],
    pub weight: f64,
}

impl HeadSample {
    fn digest_into(&self, h: &mut Sha256) {
        h.update((self.z.len() as u64).to_le_bytes());
        for v in self.z.iter().chain(&self.pose).chain(&self.gaze).chain(std::iter::once(&self.weight)) {
            h.update(v.to_le_bytes());
        }
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        self.digest_into(&mut h);
        hex::encode(h.finalize())
    }
}

pub fn support_hash(samples: &[HeadSample]) -> String {
    let mut h = Sha256::new();
    h.update((samples.len() as u64).to_le_bytes());
    for s in samples {
        s.digest_into(&mut h);
    }
    hex::encode(h.finalize())
}

/// A user's support and query sets, drawn disjointly.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub user_id: String,
    pub support: Vec<HeadSample>,
    pub query: Vec<HeadSample>,
}

/// All samples of one user, from which tasks are drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct UserPool {
    pub user_id: String,
    pub samples: Vec<HeadSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub meta_steps: usize,
    pub inner_steps: usize,
    pub k: usize,
    pub l: usize,
    pub tasks_per_step: usize,
    /// Largest support set kept by personalization; older samples are evicted.
    pub max_support: usize,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_lr: 1e-5,
            outer_lr: 1e-3,
            meta_steps: 1000,
            inner_steps: 5,
            k: 9,
            l: 100,
            tasks_per_step: 1,
            max_support: 64,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.inner_lr.is_finite()
            && self.inner_lr >= 0.0
            && self.outer_lr.is_finite()
            && self.outer_lr >= 0.0
            && self.k >= 1
            && self.l >= 1
            && self.tasks_per_step >= 1
            && self.max_support >= 1;
        if !ok {
            return Err(MetaError::Config(format!("invalid meta settings {self:?}")));
        }
        Ok(())
    }
}

/// Weighted gaze loss of `head` over `samples` and its parameter gradient.
pub fn head_loss_and_grad(
    head: &Sequential,
    norm: &PoseNormalizer,
    samples: &[HeadSample],
) -> Result<(f64, Vec<Tensor>)> {
    if samples.is_empty() {
        return Err(MetaError::InvalidInput("empty sample set".into()));
    }
    let mut preds = Vec::with_capacity(samples.len());
    let mut caches = Vec::with_capacity(samples.len());
    for s in samples {
        let (p, c) = head_forward_train(head, norm, &s.z, &s.pose)?;
        preds.push(p);
        caches.push(c);
    }
    let truth: Vec<[f64; 2]> = samples.iter().map(|s| s.gaze).collect();
    let w: Vec<f64> = samples.iter().map(|s| s.weight).collect();
    let loss = gaze_loss(&preds, &truth, &w)?;
    let g = gaze_grad(&preds, &truth, &w)?;
    let mut grads = head.zero_grads();
    for (c, gi) in caches.iter().zip(&g) {
        head.backward(c, &Tensor::vector(gi.to_vec()), &mut grads);
    }
    Ok((loss, grads))
}

pub fn head_loss(head: &Sequential, norm: &PoseNormalizer, samples: &[HeadSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(MetaError::InvalidInput("empty sample set".into()));
    }
    let mut preds = Vec::with_capacity(samples.len());
    for s in samples {
        preds.push(crate::blazegaze::predict_head(head, norm, &s.z, &s.pose)?);
    }
    let truth: Vec<[f64; 2]> = samples.iter().map(|s| s.gaze).collect();
    let w: Vec<f64> = samples.iter().map(|s| s.weight).collect();
    Ok(gaze_loss(&preds, &truth, &w)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adapted {
    pub head: Sequential,
    /// Support loss before each step and after the last one.
    pub losses: Vec<f64>,
    /// Set when adaptation stopped on a non-finite loss; `head` is then the
    /// unadapted input.
    pub diagnostic: Option<String>,
}

/// `steps` SGD updates with rate `alpha` on the support loss, starting from
/// a copy of `head`.
pub fn inner_adapt(
    head: &Sequential,
    norm: &PoseNormalizer,
    support: &[HeadSample],
    alpha: f64,
    steps: usize,
) -> Result<Adapted> {
    if support.is_empty() {
        return Err(MetaError::InvalidInput("empty support set".into()));
    }
    let mut adapted = head.clone();
    let mut opt = Optimizer::new(OptimizerKind::Sgd { lr: alpha })?;
    let mut losses = Vec::with_capacity(steps + 1);
    let abort = |reason: String, losses: Vec<f64>| Adapted { head: head.clone(), losses, diagnostic: Some(reason) };
    for step in 0..steps {
        let (loss, grads) = head_loss_and_grad(&adapted, norm, support)?;
        losses.push(loss);
        if !loss.is_finite() {
            return Ok(abort(format!("non-finite support loss at inner step {step}"), losses));
        }
        if let Err(e) = opt.step(adapted.params_mut(), &grads) {
            return Ok(abort(format!("inner step {step}: {e}"), losses));
        }
    }
    let last = head_loss(&adapted, norm, support)?;
    losses.push(last);
    if !last.is_finite() {
        return Ok(abort("non-finite support loss after adaptation".into(), losses));
    }
    Ok(Adapted { head: adapted, losses, diagnostic: None })
}

/// One first-order meta-update. Returns the meta-loss, the sum over tasks of
/// each task's query loss at its adapted weights.
pub fn meta_step(
    head: &mut Sequential,
    opt: &mut Optimizer,
    norm: &PoseNormalizer,
    tasks: &[Task],
    cfg: &MetaConfig,
) -> Result<f64> {
    if tasks.is_empty() {
        return Err(MetaError::InvalidInput("empty task batch".into()));
    }
    let mut total = head.zero_grads();
    let mut meta_loss = 0.0;
    for task in tasks {
        let adapted = inner_adapt(head, norm, &task.support, cfg.inner_lr, cfg.inner_steps)?;
        if let Some(d) = adapted.diagnostic {
            return Err(MetaError::InvalidInput(format!("task {}: {d}", task.user_id)));
        }
        let (loss, grads) = head_loss_and_grad(&adapted.head, norm, &task.query)?;
        meta_loss += loss;
        crate::nn::accumulate(&mut total, &grads);
    }
    opt.step(head.params_mut(), &total)?;
    Ok(meta_loss)
}

/// Draws a task with `k` support and up to `l` query samples, disjoint.
pub fn sample_task(pool: &UserPool, k: usize, l: usize, rng: &mut impl Rng) -> Result<Task> {
    let n = pool.samples.len();
    if n < k + 1 {
        return Err(MetaError::InvalidInput(format!(
            "user {} has {n} samples, needs at least {}",
            pool.user_id,
            k + 1
        )));
    }
    let take = (k + l).min(n);
    let idx = index::sample(rng, n, take).into_vec();
    Ok(Task {
        user_id: pool.user_id.clone(),
        support: idx[..k].iter().map(|&i| pool.samples[i].clone()).collect(),
        query: idx[k..].iter().map(|&i| pool.samples[i].clone()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaOutcome {
    pub head: Sequential,
    pub meta_losses: Vec<f64>,
}

/// Stage-2 training: the head alone is updated; embeddings are frozen inputs.
pub fn meta_train(init: &Sequential, norm: &PoseNormalizer, users: &[UserPool], cfg: &MetaConfig) -> Result<MetaOutcome> {
    cfg.validate()?;
    if users.is_empty() {
        return Err(MetaError::InvalidInput("no meta-training users".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head = init.clone();
    let mut opt = Optimizer::new(OptimizerKind::adam(cfg.outer_lr))?;
    let mut meta_losses = Vec::with_capacity(cfg.meta_steps);
    for _ in 0..cfg.meta_steps {
        let mut tasks = Vec::with_capacity(cfg.tasks_per_step);
        for _ in 0..cfg.tasks_per_step {
            let user = users.choose(&mut rng).expect("non-empty");
            tasks.push(sample_task(user, cfg.k, cfg.l, &mut rng)?);
        }
        meta_losses.push(meta_step(&mut head, &mut opt, norm, &tasks, cfg)?);
    }
    Ok(MetaOutcome { head, meta_losses })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Parameter hash of the meta-trained head adaptation started from.
    pub meta_hash: String,
    pub support_hash: String,
    pub support_size: usize,
    pub inner_steps: usize,
    pub inner_lr: f64,
    /// Samples dropped by the support cap over the head's lifetime.
    pub evicted: usize,
    pub diagnostic: Option<String>,
}

/// Adapted head plus the support set and provenance that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonalizedHead {
    pub head: Sequential,
    pub support: Vec<HeadSample>,
    pub provenance: Provenance,
}

/// Adapts `meta` to a user's calibration samples.
pub fn personalize(
    meta: &Sequential,
    norm: &PoseNormalizer,
    support: &[HeadSample],
    cfg: &MetaConfig,
) -> Result<PersonalizedHead> {
    personalize_inner(meta, norm, support.to_vec(), 0, cfg)
}

fn personalize_inner(
    meta: &Sequential,
    norm: &PoseNormalizer,
    support: Vec<HeadSample>,
    evicted: usize,
    cfg: &MetaConfig,
) -> Result<PersonalizedHead> {
    cfg.validate()?;
    if support.is_empty() {
        return Err(MetaError::InvalidInput("empty support set".into()));
    }
    if support.len() > cfg.max_support {
        return Err(MetaError::InvalidInput(format!(
            "support of {} exceeds the cap of {}",
            support.len(),
            cfg.max_support
        )));
    }
    let adapted = inner_adapt(meta, norm, &support, cfg.inner_lr, cfg.inner_steps)?;
    if let Some(d) = &adapted.diagnostic {
        log::warn!("personalization fell back to the meta head: {d}");
    }
    Ok(PersonalizedHead {
        head: adapted.head,
        provenance: Provenance {
            meta_hash: container::params_hash(&meta.params()),
            support_hash: support_hash(&support),
            support_size: support.len(),
            inner_steps: cfg.inner_steps,
            inner_lr: cfg.inner_lr,
            evicted,
            diagnostic: adapted.diagnostic,
        },
        support,
    })
}

/// Re-personalizes from `meta` on the union of the existing support and
/// `new_samples`. Exact duplicates are kept once; beyond the cap the oldest
/// samples are evicted.
pub fn append_calibration(
    current: &PersonalizedHead,
    meta: &Sequential,
    norm: &PoseNormalizer,
    new_samples: &[HeadSample],
    cfg: &MetaConfig,
) -> Result<PersonalizedHead> {
    if current.provenance.meta_hash != container::params_hash(&meta.params()) {
        return Err(MetaError::InvalidInput("meta head does not match the head's provenance".into()));
    }
    let mut seen = std::collections::HashSet::new();
    let mut union = Vec::with_capacity(current.support.len() + new_samples.len());
    for s in current.support.iter().chain(new_samples) {
        if seen.insert(s.content_hash()) {
            union.push(s.clone());
        }
    }
    let overflow = union.len().saturating_sub(cfg.max_support);
    if overflow > 0 {
        log::info!("support cap {} reached, evicting {overflow} oldest samples", cfg.max_support);
        union.drain(..overflow);
    }
    if union == current.support && overflow == 0 {
        return Ok(current.clone());
    }
    personalize_inner(meta, norm, union, current.provenance.evicted + overflow, cfg)
}

impl PersonalizedHead {
    pub fn predict(&self, norm: &PoseNormalizer, s: &HeadSample) -> Result<[f64; 2]> {
        Ok(crate::blazegaze::predict_head(&self.head, norm, &s.z, &s.pose)?)
    }

    pub fn to_container(&self, norm: &PoseNormalizer) -> Result<Container> {
        let support: Vec<serde_json::Value> = self
            .support
            .iter()
            .map(|s| serde_json::json!({"pose": s.pose, "gaze": s.gaze, "weight": s.weight}))
            .collect();
        let mut c = Container::new(serde_json::json!({
            "kind": "personalized_head",
            "provenance": self.provenance,
            "pose_norm": norm,
            "support": support,
        }));
        for (name, t) in self.head.param_names("head.").into_iter().zip(self.head.params()) {
            c.push(name, DType::F64, t.clone());
        }
        if let Some(first) = self.support.first() {
            let dim = first.z.len();
            let flat: Vec<f64> = self.support.iter().flat_map(|s| s.z.iter().copied()).collect();
            c.push("support.z", DType::F64, Tensor::from_vec(&[self.support.len(), dim], flat)?);
        }
        Ok(c)
    }

    /// Restores a head saved by [`PersonalizedHead::to_container`]; `shape`
    /// supplies the layer structure (the meta head it was adapted from).
    pub fn from_container(c: &Container, shape: &Sequential) -> Result<(Self, PoseNormalizer)> {
        let bad = |m: String| MetaError::InvalidInput(format!("personalized head container: {m}"));
        if c.metadata.get("kind").and_then(|k| k.as_str()) != Some("personalized_head") {
            return Err(bad("wrong kind".into()));
        }
        let provenance: Provenance =
            serde_json::from_value(c.metadata["provenance"].clone()).map_err(|e| bad(e.to_string()))?;
        let norm: PoseNormalizer =
            serde_json::from_value(c.metadata["pose_norm"].clone()).map_err(|e| bad(e.to_string()))?;
        let mut head = shape.clone();
        let names = head.param_names("head.");
        for (dst, name) in head.params_mut().into_iter().zip(&names) {
            let src = c.get(name).ok_or_else(|| bad(format!("missing {name}")))?;
            if src.shape() != dst.shape() {
                return Err(bad(format!("{name} has shape {:?}", src.shape())));
            }
            *dst = src.clone();
        }
        #[derive(Deserialize)]
        struct Meta {
            pose: [f64; POSE_DIM],
            gaze: [f64; 2],
            weight: f64,
        }
        let metas: Vec<Meta> = serde_json::from_value(c.metadata["support"].clone()).map_err(|e| bad(e.to_string()))?;
        let mut support = Vec::with_capacity(metas.len());
        if !metas.is_empty() {
            let z = c.get("support.z").ok_or_else(|| bad("missing support.z".into()))?;
            if z.shape().len() != 2 || z.shape()[0] != metas.len() {
                return Err(bad("support.z does not match the support list".into()));
            }
            let dim = z.shape()[1];
            for (i, m) in metas.into_iter().enumerate() {
                support.push(HeadSample {
                    z: z.data()[i * dim..(i + 1) * dim].to_vec(),
                    pose: m.pose,
                    gaze: m.gaze,
                    weight: m.weight,
                });
            }
        }
        if support_hash(&support) != provenance.support_hash {
            return Err(bad("support hash mismatch".into()));
        }
        Ok((Self { head, support, provenance }, norm))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blazegaze::build_head;

    fn setup(seed: u64) -> (Sequential, PoseNormalizer, Vec<HeadSample>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = build_head(6, &[16, 16], &mut rng).unwrap();
        let samples = (0..12)
            .map(|_| HeadSample {
                z: (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
                pose: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
                gaze: [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)],
                weight: rng.random_range(0.5..2.0),
            })
            .collect();
        (head, PoseNormalizer::default(), samples)
    }

    #[test]
    fn zero_rate_is_identity_and_input_untouched() {
        let (head, norm, s) = setup(1);
        let before = container::params_hash(&head.params());
        let a = inner_adapt(&head, &norm, &s[..9], 0.0, 5).unwrap();
        assert_eq!(a.head, head);
        let b = inner_adapt(&head, &norm, &s[..9], 1e-2, 5).unwrap();
        assert_ne!(b.head, head);
        assert_eq!(container::params_hash(&head.params()), before);
    }

    #[test]
    fn zero_residual_support_is_a_fixed_point() {
        let (head, norm, mut s) = setup(2);
        for x in &mut s {
            x.gaze = crate::blazegaze::predict_head(&head, &norm, &x.z, &x.pose).unwrap();
        }
        let a = inner_adapt(&head, &norm, &s, 0.1, 5).unwrap();
        assert_eq!(a.head, head);
    }

    #[test]
    fn inner_steps_reduce_support_loss() {
        let (head, norm, s) = setup(3);
        let a = inner_adapt(&head, &norm, &s, 1e-2, 5).unwrap();
        assert!(a.losses.last().unwrap() < &a.losses[0], "{:?}", a.losses);
        assert_eq!(a.losses.len(), 6);
    }

    #[test]
    fn non_finite_loss_returns_input() {
        let (head, norm, mut s) = setup(4);
        s[0].z[0] = f64::INFINITY;
        let a = inner_adapt(&head, &norm, &s, 1e-2, 3).unwrap();
        assert_eq!(a.head, head);
        assert!(a.diagnostic.is_some());
    }

    #[test]
    fn duplicates_match_reweighted_dedup_for_one_step() {
        let (head, norm, s) = setup(5);
        let dup = vec![s[0].clone(), s[0].clone(), s[1].clone()];
        let mut a = s[0].clone();
        a.weight *= 2.0 * 2.0 / 3.0;
        let mut b = s[1].clone();
        b.weight *= 2.0 / 3.0;
        let x = inner_adapt(&head, &norm, &dup, 1e-2, 1).unwrap().head;
        let y = inner_adapt(&head, &norm, &[a, b], 1e-2, 1).unwrap().head;
        for (p, q) in x.params().iter().zip(y.params()) {
            for (u, v) in p.data().iter().zip(q.data()) {
                assert!((u - v).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn meta_loss_is_permutation_invariant() {
        let (head, norm, s) = setup(6);
        let t1 = Task { user_id: "a".into(), support: s[..3].to_vec(), query: s[3..6].to_vec() };
        let t2 = Task { user_id: "b".into(), support: s[6..9].to_vec(), query: s[9..].to_vec() };
        let cfg = MetaConfig { inner_lr: 1e-2, ..Default::default() };
        let run = |tasks: &[Task]| {
            let mut h = head.clone();
            let mut opt = Optimizer::new(OptimizerKind::adam(1e-3)).unwrap();
            meta_step(&mut h, &mut opt, &norm, tasks, &cfg).unwrap()
        };
        let a = run(&[t1.clone(), t2.clone()]);
        let b = run(&[t2, t1]);
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn personalize_and_append() {
        let (head, norm, s) = setup(7);
        let cfg = MetaConfig { inner_lr: 1e-2, max_support: 10, ..Default::default() };
        assert!(personalize(&head, &norm, &[], &cfg).is_err());
        let one = personalize(&head, &norm, &s[..1], &cfg).unwrap();
        assert_eq!(one.provenance.support_size, 1);

        let p = personalize(&head, &norm, &s[..9], &cfg).unwrap();
        let same = append_calibration(&p, &head, &norm, &[], &cfg).unwrap();
        assert_eq!(same, p);
        let again = append_calibration(&p, &head, &norm, &s[..9], &cfg).unwrap();
        assert_eq!(again.head, p.head);
        assert_eq!(again.provenance.support_hash, p.provenance.support_hash);

        let grown = append_calibration(&p, &head, &norm, &s[9..], &cfg).unwrap();
        assert_eq!(grown.support.len(), 10);
        assert_eq!(grown.provenance.evicted, 2);
        assert_eq!(grown.support[0], s[2]);
        // Re-adaptation starts from the meta head, not from the previous one.
        let direct = personalize(&head, &norm, &s[2..12], &cfg).unwrap();
        assert_eq!(grown.head, direct.head);
    }

    #[test]
    fn personalized_head_round_trip() {
        let (head, norm, s) = setup(8);
        let cfg = MetaConfig { inner_lr: 1e-2, ..Default::default() };
        let p = personalize(&head, &norm, &s[..9], &cfg).unwrap();
        let c = p.to_container(&norm).unwrap();
        let bytes = c.to_bytes().unwrap();
        let (back, n2) = PersonalizedHead::from_container(&Container::from_bytes(&bytes).unwrap(), &head).unwrap();
        assert_eq!(back, p);
        assert_eq!(n2, norm);
    }

    #[test]
    fn task_sampling_is_disjoint() {
        let (_, _, s) = setup(9);
        let pool = UserPool { user_id: "u".into(), samples: s };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = sample_task(&pool, 4, 100, &mut rng).unwrap();
        assert_eq!(t.support.len(), 4);
        assert_eq!(t.query.len(), 8);
        for q in &t.query {
            assert!(!t.support.contains(q));
        }
        assert!(sample_task(&pool, 12, 1, &mut rng).is_err());
    }
}
