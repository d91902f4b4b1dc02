//! Run configuration: a TOML file merged with `--set table.key=value`
//! overrides. Keys that do not map onto a field are rejected.

use std::path::Path;

use anyhow::{bail, Context, Result};
use eyetrack::blazegaze::gradcheck::tiny_arch;
use eyetrack::blazegaze::train::Stage1Config;
use eyetrack::blazegaze::ArchConfig;
use eyetrack::data::{IterOptions, Split};
use eyetrack::meta::MetaConfig;
use eyetrack::simulator::{CaptureConfig, SynthDatasetSpec};
use eyetrack::{PatchConfig, SolverConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub train_users: usize,
    pub val_users: usize,
    pub test_users: usize,
    /// Random captures per user after the nine calibration dots.
    pub samples_per_user: usize,
    pub seed: u64,
    pub noise_sigma_px: f64,
    pub blink_rate: f64,
    pub patch_height: usize,
    pub patch_width: usize,
    pub gaze_extent: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let bundled = SynthDatasetSpec::bundled(7);
        let c = CaptureConfig::default();
        Self {
            train_users: bundled.splits.train.len(),
            val_users: bundled.splits.val.len(),
            test_users: bundled.splits.test.len(),
            samples_per_user: bundled.samples_per_user,
            seed: 7,
            noise_sigma_px: c.noise_sigma_px,
            blink_rate: c.blink_rate,
            patch_height: c.patch.height,
            patch_width: c.patch.width,
            gaze_extent: c.gaze_extent,
        }
    }
}

impl SynthConfig {
    pub fn spec(&self) -> SynthDatasetSpec {
        let mut spec =
            SynthDatasetSpec::with_users(self.train_users, self.val_users, self.test_users, self.samples_per_user, self.seed);
        spec.capture = CaptureConfig {
            noise_sigma_px: self.noise_sigma_px,
            blink_rate: self.blink_rate,
            gaze_extent: self.gaze_extent,
            patch: PatchConfig { height: self.patch_height, width: self.patch_width, ..PatchConfig::reduced() },
            ..CaptureConfig::default()
        };
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub iris_diameter_cm: f64,
    pub blink_threshold: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let o = IterOptions::default();
        Self { iris_diameter_cm: o.iris_diameter_cm, blink_threshold: o.blink_threshold }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchPreset {
    /// 128×512 input, the deployed size.
    Full,
    /// 32×128 input.
    Reduced,
    /// 8×16 input, for smoke tests.
    Tiny,
}

impl ArchPreset {
    pub fn arch(self) -> ArchConfig {
        match self {
            ArchPreset::Full => ArchConfig::full(),
            ArchPreset::Reduced => ArchConfig::reduced(),
            ArchPreset::Tiny => tiny_arch(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: ArchPreset,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { arch: ArchPreset::Reduced, seed: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    All,
    Train,
    Val,
    Test,
}

impl EvalSplit {
    pub fn split(self) -> Option<Split> {
        match self {
            EvalSplit::All => None,
            EvalSplit::Train => Some(Split::Train),
            EvalSplit::Val => Some(Split::Val),
            EvalSplit::Test => Some(Split::Test),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: EvalSplit,
    /// The first `support_k` open-eye frames of each user are calibration
    /// samples and are never scored.
    pub support_k: usize,
    /// Personalize the head on the support frames before scoring.
    pub adapt: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { split: EvalSplit::Val, support_k: 0, adapt: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub arch: ArchPreset,
    pub warmup: usize,
    pub iters: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { arch: ArchPreset::Full, warmup: 3, iters: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub solver: SolverConfig,
    pub model: ModelConfig,
    pub stage1: Stage1Config,
    pub meta: MetaConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Config {
    pub fn iter_options(&self) -> IterOptions {
        IterOptions {
            solver: self.solver,
            iris_diameter_cm: self.data.iris_diameter_cm,
            blink_threshold: self.data.blink_threshold,
        }
    }

    /// Reads `file` (if any), applies `overrides` and validates the result.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>().with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Config = toml::Value::Table(table.clone()).try_into().context("invalid configuration")?;
        let resolved = toml::Value::try_from(&cfg).context("serializing configuration")?;
        if let Some(key) = unknown_key(&toml::Value::Table(table), &resolved, "") {
            bail!("unknown configuration key `{key}`");
        }
        cfg.solver.validate()?;
        cfg.stage1.validate()?;
        cfg.meta.validate()?;
        Ok(cfg)
    }
}

fn apply_override(table: &mut toml::Table, o: &str) -> Result<()> {
    let (path, raw) = o.split_once('=').with_context(|| format!("override `{o}` is not key=value"))?;
    let value = parse_value(raw.trim());
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("override `{o}` has an empty key");
    }
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().with_context(|| format!("override `{o}`: `{k}` is not a table"))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// First key present in `given` but absent from the fully resolved config.
fn unknown_key(given: &toml::Value, resolved: &toml::Value, prefix: &str) -> Option<String> {
    let (toml::Value::Table(g), toml::Value::Table(r)) = (given, resolved) else { return None };
    for (k, v) in g {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match r.get(k) {
            None => return Some(path),
            Some(rv) => {
                if let Some(bad) = unknown_key(v, rv, &path) {
                    return Some(bad);
                }
            }
        }
    }
    None
}
