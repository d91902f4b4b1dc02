use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use eyetrack::blazegaze::train::{train_stage1, Split as LogSplit, TrainSample};
use eyetrack::blazegaze::{predict_head, BlazeGazeModel, PoseNormalizer};
use eyetrack::data::{load_manifest, DatasetManifest, EmbeddingCache, GazeSample, Split};
use eyetrack::geometry::pog_error_cm;
use eyetrack::meta::{append_calibration, head_loss, meta_train, personalize, HeadSample, PersonalizedHead, UserPool};
use eyetrack::nn::container::{params_hash, Container, DType};
use eyetrack::nn::Sequential;
use eyetrack::preprocess::build_weight_grid;
use eyetrack::simulator::emit_dataset;
use eyetrack::HeadPose;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::record::RunRecord;
use crate::svg::{self, ChartKind, Series};

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], record: &mut RunRecord) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    record.output(path)
}

fn write_json(path: &Path, value: &impl Serialize, record: &mut RunRecord) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    record.output(path)
}

fn open_manifest(data: &Path, record: &mut RunRecord) -> Result<DatasetManifest> {
    let m = load_manifest(data).with_context(|| format!("loading dataset {}", data.display()))?;
    record.input(data)?;
    if !m.skipped.is_empty() {
        record.metric("manifest_skipped", m.skipped.len());
    }
    Ok(m)
}

fn load_model(path: &Path, record: &mut RunRecord) -> Result<BlazeGazeModel> {
    let (model, _) = BlazeGazeModel::load(path).with_context(|| format!("loading model {}", path.display()))?;
    record.input(path)?;
    Ok(model)
}

/// Open-eye frames, in iteration order.
fn open_frames(samples: Vec<GazeSample>) -> Vec<GazeSample> {
    samples.into_iter().filter(|s| !s.blink).collect()
}

/// Sets inverse-frequency weights from the labels of `reference`.
fn apply_weight_grid(reference: &[GazeSample], targets: &mut [&mut Vec<GazeSample>]) -> Result<()> {
    let labels: Vec<[f64; 2]> = reference.iter().map(|s| s.gaze).collect();
    let grid = build_weight_grid(&labels)?;
    for set in targets.iter_mut() {
        for s in set.iter_mut() {
            s.weight = grid.weight_for(s.gaze).0;
        }
    }
    Ok(())
}

/// Attaches embeddings, reusing and extending the cache at `cache` if given.
fn attach_embeddings(
    model: &BlazeGazeModel,
    samples: &mut [GazeSample],
    cache: Option<&Path>,
    record: &mut RunRecord,
) -> Result<()> {
    let hash = model.encoder_hash();
    let mut store = match cache {
        Some(p) if p.exists() => EmbeddingCache::load(p, &hash)?.unwrap_or_else(|| {
            log::info!("embedding cache {} is stale, rebuilding", p.display());
            EmbeddingCache { encoder_hash: hash.clone(), embeddings: BTreeMap::new() }
        }),
        _ => EmbeddingCache { encoder_hash: hash.clone(), embeddings: BTreeMap::new() },
    };
    let mut added = 0;
    record.time("embed", || -> Result<()> {
        for s in samples.iter() {
            if !store.embeddings.contains_key(&s.id) {
                store.embeddings.insert(s.id.clone(), model.embed(&s.patch.to_chw())?);
                added += 1;
            }
        }
        Ok(())
    })?;
    store.attach(samples);
    if let Some(p) = cache {
        if added > 0 {
            store.save(p)?;
        }
        record.input(p)?;
    }
    Ok(())
}

fn head_sample(s: &GazeSample) -> Result<HeadSample> {
    let z = s.embedding.clone().with_context(|| format!("sample {} has no embedding", s.id))?;
    Ok(s.to_head_sample(z))
}

fn check_patch(model: &BlazeGazeModel, m: &DatasetManifest) -> Result<()> {
    let (h, w) = (model.arch.patch_height, model.arch.patch_width);
    ensure!(
        (m.patch.height, m.patch.width) == (h, w),
        "model expects {h}x{w} patches but the dataset has {}x{}",
        m.patch.height,
        m.patch.width
    );
    Ok(())
}

pub fn synth(cfg: &Config, out: &Path, record: &mut RunRecord) -> Result<()> {
    create_dir(out)?;
    let spec = cfg.synth.spec();
    let manifest = record.time("render", || emit_dataset(out, &spec))?;
    for f in ["landmarks.eytc", "patches.eytc"] {
        record.output(&out.join(f))?;
    }
    record.output(&manifest)?;
    record.metric("users", spec.users.len());
    record.metric("samples", spec.users.len() * (9 + spec.samples_per_user));
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseRow {
    pub id: String,
    pub user_id: String,
    pub timestamp: f64,
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub iterations: usize,
    pub converged: bool,
    pub rmse_px: f64,
}

pub fn pose(cfg: &Config, data: &Path, out: &Path, record: &mut RunRecord) -> Result<()> {
    let m = open_manifest(data, record)?;
    let opts = cfg.iter_options();
    let mut rows = Vec::new();
    let mut z_errs = Vec::new();
    let mut skipped = 0;
    record.time("solve", || {
        for r in m.iter(&opts) {
            match r {
                Ok(s) => {
                    let t = s.pose.translation();
                    if let Some(truth) = &s.truth {
                        z_errs.push((t.z - truth.translation[2]).abs());
                    }
                    rows.push(PoseRow {
                        id: s.id.clone(),
                        user_id: s.user_id.clone(),
                        timestamp: s.timestamp,
                        tx: t.x,
                        ty: t.y,
                        tz: t.z,
                        iterations: s.pose_report.iterations,
                        converged: s.pose_report.converged,
                        rmse_px: s.pose_report.final_reprojection_rmse,
                    });
                }
                Err(e) => {
                    log::warn!("skipping sample {}: {}", e.index, e.reason);
                    skipped += 1;
                }
            }
        }
    });
    ensure!(!rows.is_empty(), "no frame could be solved");
    write_csv(out, &rows, record)?;
    let n = rows.len() as f64;
    record.metric("frames", rows.len());
    record.metric("skipped", skipped);
    record.metric("mean_iterations", rows.iter().map(|r| r.iterations as f64).sum::<f64>() / n);
    record.metric("converged_fraction", rows.iter().filter(|r| r.converged).count() as f64 / n);
    if let Some(m) = mean(&z_errs) {
        record.metric("mean_abs_z_err_cm", m);
        record.metric("max_abs_z_err_cm", z_errs.iter().copied().fold(0.0, f64::max));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub split: String,
    pub total: f64,
    pub reconstruction: f64,
    pub gaze: f64,
    pub consistency: f64,
    pub lr: f64,
}

pub fn pretrain(cfg: &Config, data: &Path, out: &Path, record: &mut RunRecord) -> Result<()> {
    let m = open_manifest(data, record)?;
    let opts = cfg.iter_options();
    let (mut train, _) = record.time("load", || m.split_samples(Split::Train, &opts));
    let (mut val, _) = record.time("load", || m.split_samples(Split::Val, &opts));
    train = open_frames(train);
    val = open_frames(val);
    ensure!(!train.is_empty(), "the training split has no usable frames");
    let reference = train.clone();
    apply_weight_grid(&reference, &mut [&mut train, &mut val])?;
    let model = BlazeGazeModel::new(cfg.model.arch.arch(), cfg.model.seed)?;
    check_patch(&model, &m)?;
    let tr: Vec<TrainSample> = train.iter().map(GazeSample::to_train_sample).collect();
    let va: Vec<TrainSample> = val.iter().map(GazeSample::to_train_sample).collect();
    let outcome = record.time("train", || train_stage1(model, &tr, &va, &cfg.stage1))?;

    create_dir(out)?;
    let rows: Vec<LogRow> = outcome
        .log
        .iter()
        .map(|r| LogRow {
            epoch: r.epoch,
            split: match r.split {
                LogSplit::Train => "train".into(),
                LogSplit::Val => "val".into(),
            },
            total: r.loss.total,
            reconstruction: r.loss.reconstruction,
            gaze: r.loss.gaze,
            consistency: r.loss.consistency,
            lr: r.lr,
        })
        .collect();
    write_csv(&out.join("train_log.csv"), &rows, record)?;
    let jsonl: String = outcome.log.iter().map(|r| serde_json::to_string(r).map(|s| s + "\n")).collect::<Result<_, _>>()?;
    let log_path = out.join("train_log.jsonl");
    std::fs::write(&log_path, jsonl)?;
    record.output(&log_path)?;
    let ckpt = out.join("stage1.eytc");
    outcome.model.save(&ckpt, serde_json::json!({ "best_epoch": outcome.best_epoch, "train_frames": tr.len() }))?;
    record.output(&ckpt)?;

    let curve = if va.is_empty() {
        rows.iter().filter(|r| r.split == "train").map(|r| r.total).collect::<Vec<_>>()
    } else {
        outcome.val_curve()
    };
    record.metric("train_frames", tr.len());
    record.metric("val_frames", va.len());
    record.metric("best_epoch", outcome.best_epoch);
    record.metric("epoch0_loss", curve[0]);
    if let Some(&l) = curve.get(1) {
        record.metric("epoch1_loss", l);
    }
    record.metric("final_loss", *curve.last().expect("epoch 0 is always logged"));
    record.metric("best_loss", curve.iter().copied().fold(f64::INFINITY, f64::min));
    Ok(())
}

const META_HEAD: &str = "meta_head";

fn save_meta_head(head: &Sequential, norm: &PoseNormalizer, encoder_hash: &str, path: &Path) -> Result<()> {
    let mut c = Container::new(serde_json::json!({
        "kind": META_HEAD,
        "encoder_hash": encoder_hash,
        "pose_norm": norm,
    }));
    for (name, t) in head.param_names("head.").into_iter().zip(head.params()) {
        c.push(name, DType::F64, t.clone());
    }
    c.write_file(path)?;
    Ok(())
}

/// A meta head, a personalized head, or the model's own head.
enum LoadedHead {
    Plain(Sequential),
    Personalized(PersonalizedHead),
}

impl LoadedHead {
    fn head(&self) -> &Sequential {
        match self {
            LoadedHead::Plain(h) => h,
            LoadedHead::Personalized(p) => &p.head,
        }
    }
}

fn load_head(path: Option<&Path>, model: &BlazeGazeModel, record: &mut RunRecord) -> Result<LoadedHead> {
    let Some(path) = path else { return Ok(LoadedHead::Plain(model.head.clone())) };
    let (c, _) = Container::read_file(path).with_context(|| format!("loading head {}", path.display()))?;
    record.input(path)?;
    let kind = c.metadata.get("kind").and_then(|k| k.as_str()).unwrap_or_default().to_string();
    let norm: PoseNormalizer = serde_json::from_value(c.metadata["pose_norm"].clone()).context("head pose_norm")?;
    ensure!(norm == model.pose_norm, "head {} was trained with a different pose normalizer than the model", path.display());
    match kind.as_str() {
        META_HEAD => {
            let stored = c.metadata.get("encoder_hash").and_then(|v| v.as_str()).unwrap_or_default();
            ensure!(stored == model.encoder_hash(), "head {} belongs to a different encoder", path.display());
            let mut head = model.head.clone();
            let names = head.param_names("head.");
            for (dst, name) in head.params_mut().into_iter().zip(&names) {
                let src = c.get(name).with_context(|| format!("head {} lacks {name}", path.display()))?;
                ensure!(src.shape() == dst.shape(), "head tensor {name} has shape {:?}", src.shape());
                *dst = src.clone();
            }
            Ok(LoadedHead::Plain(head))
        }
        "personalized_head" => Ok(LoadedHead::Personalized(PersonalizedHead::from_container(&c, &model.head)?.0)),
        "blazegaze" => Ok(LoadedHead::Plain(BlazeGazeModel::from_container(&c)?.head)),
        other => bail!("{} is not a gaze head (kind `{other}`)", path.display()),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MetaLogRow {
    step: usize,
    meta_loss: f64,
}

pub fn metatrain(
    cfg: &Config,
    data: &Path,
    model_path: &Path,
    out: &Path,
    cache: Option<&Path>,
    record: &mut RunRecord,
) -> Result<()> {
    let m = open_manifest(data, record)?;
    let model = load_model(model_path, record)?;
    check_patch(&model, &m)?;
    let opts = cfg.iter_options();
    let (train, _) = record.time("load", || m.split_samples(Split::Train, &opts));
    let mut train = open_frames(train);
    ensure!(!train.is_empty(), "the training split has no usable frames");
    let reference = train.clone();
    apply_weight_grid(&reference, &mut [&mut train])?;
    attach_embeddings(&model, &mut train, cache, record)?;
    let mut pools: Vec<UserPool> = Vec::new();
    for s in &train {
        if pools.last().map(|p| p.user_id.as_str()) != Some(s.user_id.as_str()) {
            pools.push(UserPool { user_id: s.user_id.clone(), samples: Vec::new() });
        }
        pools.last_mut().expect("just pushed").samples.push(head_sample(s)?);
    }
    let outcome = record.time("meta_train", || meta_train(&model.head, &model.pose_norm, &pools, &cfg.meta))?;
    create_dir(out)?;
    let rows: Vec<MetaLogRow> =
        outcome.meta_losses.iter().enumerate().map(|(i, &l)| MetaLogRow { step: i + 1, meta_loss: l }).collect();
    write_csv(&out.join("meta_log.csv"), &rows, record)?;
    let head_path = out.join("meta_head.eytc");
    save_meta_head(&outcome.head, &model.pose_norm, &model.encoder_hash(), &head_path)?;
    record.output(&head_path)?;
    let window = (rows.len() / 10).clamp(1, 50);
    let avg = |r: &[MetaLogRow]| r.iter().map(|x| x.meta_loss).sum::<f64>() / r.len().max(1) as f64;
    record.metric("users", pools.len());
    record.metric("first_meta_loss_mean", avg(&rows[..window.min(rows.len())]));
    record.metric("last_meta_loss_mean", avg(&rows[rows.len().saturating_sub(window)..]));
    record.metric("meta_head_hash", params_hash(&outcome.head.params()));
    Ok(())
}

pub struct AdaptArgs<'a> {
    pub data: &'a Path,
    pub model: &'a Path,
    pub head: Option<&'a Path>,
    pub user: &'a str,
    pub k: usize,
    pub from: usize,
    pub append: Option<&'a Path>,
    pub out: &'a Path,
    pub cache: Option<&'a Path>,
}

pub fn adapt(cfg: &Config, a: &AdaptArgs, record: &mut RunRecord) -> Result<()> {
    let m = open_manifest(a.data, record)?;
    let model = load_model(a.model, record)?;
    check_patch(&model, &m)?;
    let LoadedHead::Plain(meta) = load_head(a.head, &model, record)? else {
        bail!("--head must be a meta-trained head; pass a personalized head with --append");
    };
    let opts = cfg.iter_options();
    let (samples, _) = m.load_samples(Some(&[a.user.to_string()]), &opts);
    ensure!(!samples.is_empty(), "no usable frames for user `{}`", a.user);
    let open = open_frames(samples);
    ensure!(a.k >= 1, "--k must be at least 1");
    ensure!(
        a.from + a.k <= open.len(),
        "user `{}` has {} open-eye frames, cannot take {} from index {}",
        a.user,
        open.len(),
        a.k,
        a.from
    );
    let mut support: Vec<GazeSample> = open[a.from..a.from + a.k].to_vec();
    attach_embeddings(&model, &mut support, a.cache, record)?;
    let heads: Vec<HeadSample> = support.iter().map(head_sample).collect::<Result<_>>()?;
    let personalized = match a.append {
        Some(prev) => {
            let LoadedHead::Personalized(p) = load_head(Some(prev), &model, record)? else {
                bail!("{} is not a personalized head", prev.display());
            };
            append_calibration(&p, &meta, &model.pose_norm, &heads, &cfg.meta)?
        }
        None => personalize(&meta, &model.pose_norm, &heads, &cfg.meta)?,
    };
    personalized.to_container(&model.pose_norm)?.write_file(a.out)?;
    record.output(a.out)?;
    record.metric("support_size", personalized.provenance.support_size);
    record.metric("evicted", personalized.provenance.evicted);
    record.metric("support_loss_before", head_loss(&meta, &model.pose_norm, &personalized.support)?);
    record.metric("support_loss_after", head_loss(&personalized.head, &model.pose_norm, &personalized.support)?);
    record.metric("provenance", &personalized.provenance);
    Ok(())
}

pub struct EvalArgs<'a> {
    pub data: &'a Path,
    pub model: Option<&'a Path>,
    pub head: Option<&'a Path>,
    pub poses: Option<&'a Path>,
    pub out: &'a Path,
    pub cache: Option<&'a Path>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRow {
    pub id: String,
    pub user_id: String,
    pub timestamp: f64,
    pub ear_left: f64,
    pub ear_right: f64,
    /// `gated`, `support` or `scored`.
    pub role: String,
    pub pog_cm: Option<f64>,
    pub z_err_cm: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UserRow {
    pub user_id: String,
    pub frames: usize,
    pub gated: usize,
    pub support: usize,
    pub scored: usize,
    pub mean_pog_cm: Option<f64>,
    pub median_pog_cm: Option<f64>,
    pub mean_abs_z_cm: Option<f64>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) })
}

fn read_poses(path: &Path, record: &mut RunRecord) -> Result<BTreeMap<String, [f64; 3]>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading poses {}", path.display()))?;
    let mut out = BTreeMap::new();
    for row in r.deserialize::<PoseRow>() {
        let row = row.with_context(|| format!("parsing {}", path.display()))?;
        out.insert(row.id, [row.tx, row.ty, row.tz]);
    }
    record.input(path)?;
    Ok(out)
}

pub fn eval(cfg: &Config, a: &EvalArgs, record: &mut RunRecord) -> Result<()> {
    let m = open_manifest(a.data, record)?;
    let opts = cfg.iter_options();
    let users: Option<Vec<String>> = cfg.eval.split.split().map(|s| m.splits.users(s).to_vec());
    let (mut samples, skipped) = record.time("load", || m.load_samples(users.as_deref(), &opts));
    ensure!(!samples.is_empty(), "no usable frames to evaluate");
    record.metric("skipped", skipped.len());
    if let Some(p) = a.poses {
        let poses = read_poses(p, record)?;
        for s in &mut samples {
            let t = poses.get(&s.id).with_context(|| format!("{} has no row for {}", p.display(), s.id))?;
            s.pose = HeadPose::new(*s.pose.rotation(), (*t).into())?;
        }
    }
    let model = a.model.map(|p| load_model(p, record)).transpose()?;
    if let Some(model) = &model {
        check_patch(model, &m)?;
    }
    let head = match &model {
        Some(model) => Some(load_head(a.head, model, record)?),
        None if a.head.is_some() => bail!("--head needs --model"),
        None => None,
    };
    ensure!(!cfg.eval.adapt || model.is_some(), "eval.adapt needs --model");

    let mut by_user: BTreeMap<String, Vec<GazeSample>> = BTreeMap::new();
    for s in samples {
        by_user.entry(s.user_id.clone()).or_default().push(s);
    }
    let mut sample_rows = Vec::new();
    let mut user_rows = Vec::new();
    let started = Instant::now();
    for (user, frames) in &mut by_user {
        frames.sort_by(|x, y| x.timestamp.total_cmp(&y.timestamp).then_with(|| x.id.cmp(&y.id)));
        let open_idx: Vec<usize> = (0..frames.len()).filter(|&i| !frames[i].blink).collect();
        let support_idx: Vec<usize> = open_idx.iter().copied().take(cfg.eval.support_k).collect();
        let scored_idx: Vec<usize> = open_idx.iter().copied().skip(cfg.eval.support_k).collect();
        let mut user_head: Option<Sequential> = None;
        if let (Some(model), Some(head)) = (&model, &head) {
            let mut needed: Vec<GazeSample> = open_idx.iter().map(|&i| frames[i].clone()).collect();
            attach_embeddings(model, &mut needed, a.cache, record)?;
            for (&i, s) in open_idx.iter().zip(needed) {
                frames[i].embedding = s.embedding;
            }
            user_head = Some(if cfg.eval.adapt && !support_idx.is_empty() {
                let support: Vec<HeadSample> = support_idx.iter().map(|&i| head_sample(&frames[i])).collect::<Result<_>>()?;
                personalize(head.head(), &model.pose_norm, &support, &cfg.meta)?.head
            } else {
                head.head().clone()
            });
        }
        let (mut pogs, mut zs) = (Vec::new(), Vec::new());
        for (i, s) in frames.iter().enumerate() {
            let role = if s.blink {
                "gated"
            } else if support_idx.contains(&i) {
                "support"
            } else {
                "scored"
            };
            let (mut pog, mut zerr) = (None, None);
            if role == "scored" {
                if let (Some(model), Some(h)) = (&model, &user_head) {
                    let z = s.embedding.as_ref().with_context(|| format!("sample {} has no embedding", s.id))?;
                    let pred = predict_head(h, &model.pose_norm, z, &s.pose_features())?;
                    let e = pog_error_cm(pred, s.gaze, &m.screen);
                    pogs.push(e);
                    pog = Some(e);
                }
                if let Some(t) = &s.truth {
                    let e = (s.pose.translation().z - t.translation[2]).abs();
                    zs.push(e);
                    zerr = Some(e);
                }
            }
            sample_rows.push(SampleRow {
                id: s.id.clone(),
                user_id: user.clone(),
                timestamp: s.timestamp,
                ear_left: s.ears.0,
                ear_right: s.ears.1,
                role: role.into(),
                pog_cm: pog,
                z_err_cm: zerr,
            });
        }
        user_rows.push(UserRow {
            user_id: user.clone(),
            frames: frames.len(),
            gated: frames.len() - open_idx.len(),
            support: support_idx.len(),
            scored: scored_idx.len(),
            mean_pog_cm: mean(&pogs),
            median_pog_cm: median(&pogs),
            mean_abs_z_cm: mean(&zs),
        });
    }
    record.timings.insert("score".into(), started.elapsed().as_secs_f64());

    create_dir(a.out)?;
    write_csv(&a.out.join("samples.csv"), &sample_rows, record)?;
    write_csv(&a.out.join("per_user.csv"), &user_rows, record)?;
    let all_pog: Vec<f64> = sample_rows.iter().filter_map(|r| r.pog_cm).collect();
    let all_z: Vec<f64> = sample_rows.iter().filter_map(|r| r.z_err_cm).collect();
    let user_pog: Vec<f64> = user_rows.iter().filter_map(|r| r.mean_pog_cm).collect();
    let summary = serde_json::json!({
        "users": user_rows.len(),
        "frames": sample_rows.len(),
        "gated": sample_rows.iter().filter(|r| r.role == "gated").count(),
        "support": sample_rows.iter().filter(|r| r.role == "support").count(),
        "scored": sample_rows.iter().filter(|r| r.role == "scored").count(),
        "mean_pog_cm": mean(&all_pog),
        "mean_user_pog_cm": mean(&user_pog),
        "median_pog_cm": median(&all_pog),
        "mean_abs_z_cm": mean(&all_z),
        "adapted": cfg.eval.adapt,
    });
    write_json(&a.out.join("summary.json"), &summary, record)?;
    if let serde_json::Value::Object(o) = summary {
        for (k, v) in o {
            record.metric(&k, v);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub arch: String,
    pub params: usize,
    pub total_params: usize,
    pub macs: u64,
    pub flops: u64,
    pub iters: usize,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn bench(cfg: &Config, out: &Path, record: &mut RunRecord) -> Result<()> {
    let arch = cfg.bench.arch.arch();
    let model = BlazeGazeModel::new(arch.clone(), cfg.model.seed)?;
    let n: usize = arch.input_shape().iter().product();
    let patch: Vec<f64> = (0..n).map(|i| ((i * 7919) % 1000) as f64 / 1000.0).collect();
    let pose = [0.0; 12];
    ensure!(cfg.bench.iters >= 1, "bench.iters must be at least 1");
    for _ in 0..cfg.bench.warmup {
        model.predict(&patch, &pose)?;
    }
    let mut ms = Vec::with_capacity(cfg.bench.iters);
    for _ in 0..cfg.bench.iters {
        let t = Instant::now();
        std::hint::black_box(model.predict(std::hint::black_box(&patch), &pose)?);
        ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    ms.sort_by(f64::total_cmp);
    let macs = model.inference_macs()?;
    let row = BenchRow {
        arch: serde_json::to_value(cfg.bench.arch)?.as_str().unwrap_or_default().to_string(),
        params: model.inference_param_count(),
        total_params: model.total_param_count(),
        macs,
        flops: 2 * macs,
        iters: cfg.bench.iters,
        p50_ms: percentile(&ms, 50.0),
        p95_ms: percentile(&ms, 95.0),
    };
    write_csv(out, std::slice::from_ref(&row), record)?;
    record.metric("params", row.params);
    record.metric("flops", row.flops);
    record.metric("p50_ms", row.p50_ms);
    record.metric("p95_ms", row.p95_ms);
    Ok(())
}

pub struct ReportArgs<'a> {
    pub csv: &'a [PathBuf],
    pub x: &'a str,
    pub y: &'a [String],
    pub filter: &'a [String],
    pub kind: ChartKind,
    pub title: &'a str,
    pub out: &'a Path,
}

pub fn report(a: &ReportArgs, record: &mut RunRecord) -> Result<()> {
    let filters: Vec<(&str, &str)> = a
        .filter
        .iter()
        .map(|f| f.split_once('=').with_context(|| format!("filter `{f}` is not column=value")))
        .collect::<Result<_>>()?;
    let mut series = Vec::new();
    for path in a.csv {
        let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
        let headers = r.headers()?.clone();
        let col = |name: &str| {
            headers.iter().position(|h| h == name).with_context(|| format!("{} has no column `{name}`", path.display()))
        };
        let xi = col(a.x)?;
        let yis: Vec<usize> = a.y.iter().map(|y| col(y)).collect::<Result<_>>()?;
        let fis: Vec<(usize, &str)> = filters.iter().map(|(c, v)| col(c).map(|i| (i, *v))).collect::<Result<_>>()?;
        let mut points: Vec<Vec<(String, f64)>> = vec![Vec::new(); yis.len()];
        for row in r.records() {
            let row = row?;
            if fis.iter().any(|&(i, v)| row.get(i) != Some(v)) {
                continue;
            }
            for (k, &yi) in yis.iter().enumerate() {
                let raw = row.get(yi).unwrap_or_default();
                if raw.is_empty() {
                    continue;
                }
                let y: f64 = raw.parse().with_context(|| format!("{}: `{raw}` in column `{}` is not a number", path.display(), a.y[k]))?;
                points[k].push((row.get(xi).unwrap_or_default().to_string(), y));
            }
        }
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        for (k, p) in points.into_iter().enumerate() {
            let label = if a.csv.len() > 1 { format!("{stem}:{}", a.y[k]) } else { a.y[k].clone() };
            series.push(Series { label, points: p });
        }
        record.input(path)?;
    }
    let svg = svg::render(a.kind, a.title, a.x, &series)?;
    std::fs::write(a.out, svg).with_context(|| format!("writing {}", a.out.display()))?;
    record.output(a.out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 10.0);
        assert_eq!(percentile(&v, 95.0), 19.0);
        assert_eq!(percentile(&[3.0], 95.0), 3.0);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
