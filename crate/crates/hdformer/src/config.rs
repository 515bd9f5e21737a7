//! Flat TOML experiment configuration with command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use hdformer_core::encoder::{EncoderConfig, Scope};
use hdformer_core::metrics::Aggregation;
use hdformer_core::model::ModelConfig;
use hdformer_core::moe::{default_patch_sizes, GateInput};
use hdformer_core::optim::OptimizerKind;
use hdformer_core::signal::{segment_len, ClassParams, TARGET_FS};
use hdformer_core::train::{SplitFractions, TrainConfig};

use crate::error::{CliError, Result};
use crate::io::DType;

/// Every configurable key with its default. Field names are the file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RawConfig {
    pub seed: u64,
    pub out_dir: String,
    /// Empty means `<out_dir>/data/manifest.csv`.
    pub manifest: String,

    pub n_subjects: usize,
    pub duration_s: f64,
    pub fs: u32,
    pub neg_rate_bpm: f64,
    pub neg_hrv: f64,
    pub neg_noise: f64,
    pub pos_rate_bpm: f64,
    pub pos_hrv: f64,
    pub pos_noise: f64,

    pub denoise_window: usize,
    pub segment_s: f64,

    pub base_width: usize,
    /// `moe`, `single:<size>` or a comma list of sizes such as `T/2,T,2T`.
    pub experts: String,
    pub k: usize,
    pub scope: String,
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    pub window: usize,
    pub shift: bool,
    pub merge_stages: Vec<usize>,
    pub mlp_ratio: usize,
    pub head_hidden: usize,
    pub gate_input: String,

    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: String,
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub grad_clip: f64,
    pub checkpoint_dtype: String,

    pub threshold: f64,
    pub aggregation: String,
    /// `train`, `val`, `test` or `all`.
    pub eval_split: String,

    pub stats_k: Vec<usize>,
    pub stats_block: usize,
    pub stats_budget: usize,
}

impl Default for RawConfig {
    fn default() -> Self {
        let enc = EncoderConfig::toy();
        let train = TrainConfig::default();
        RawConfig {
            seed: 42,
            out_dir: "out".into(),
            manifest: String::new(),
            n_subjects: 40,
            duration_s: 600.0,
            fs: TARGET_FS as u32,
            neg_rate_bpm: ClassParams::NEGATIVE.rate_bpm,
            neg_hrv: ClassParams::NEGATIVE.hrv,
            neg_noise: ClassParams::NEGATIVE.noise,
            pos_rate_bpm: ClassParams::POSITIVE.rate_bpm,
            pos_hrv: ClassParams::POSITIVE.hrv,
            pos_noise: ClassParams::POSITIVE.noise,
            denoise_window: hdformer_core::signal::DEFAULT_DENOISE_WINDOW,
            segment_s: hdformer_core::signal::DEFAULT_SEGMENT_SECONDS,
            base_width: hdformer_core::tsa::DEFAULT_BASE_WIDTH,
            experts: "moe".into(),
            k: 4,
            scope: enc.scope.name().into(),
            depth: enc.depth,
            d_model: enc.d_model,
            heads: enc.heads,
            window: enc.window,
            shift: enc.shift,
            merge_stages: enc.merge_stages,
            mlp_ratio: enc.mlp_ratio,
            head_hidden: 16,
            gate_input: GateInput::Summary.name().into(),
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            optimizer: train.optimizer.name().into(),
            train_frac: train.split.train,
            val_frac: train.split.val,
            test_frac: train.split.test,
            grad_clip: train.grad_clip,
            checkpoint_dtype: "f64".into(),
            threshold: 0.5,
            aggregation: Aggregation::MeanScore.name().into(),
            eval_split: "test".into(),
            stats_k: vec![2, 3, 4, 5],
            stats_block: 64,
            stats_budget: 32,
        }
    }
}

/// Keys that shape the model and must come from the checkpoint at evaluation time.
pub const MODEL_KEYS: &[&str] = &[
    "segment_s",
    "base_width",
    "experts",
    "k",
    "scope",
    "depth",
    "d_model",
    "heads",
    "window",
    "shift",
    "merge_stages",
    "mlp_ratio",
    "head_hidden",
    "gate_input",
];

fn default_table() -> toml::Table {
    toml::Table::try_from(RawConfig::default()).expect("defaults serialise")
}

/// Parses an override value as TOML, falling back to a bare string.
pub fn parse_value(text: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

/// Applies `key=value` overrides to `table`.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override `{o}` is not key=value")))?;
        table.insert(k.trim().to_string(), parse_value(v.trim()));
    }
    Ok(())
}

/// Converts a table to [`RawConfig`], reporting every unknown key and every mistyped value.
pub fn raw_from_table(table: &toml::Table) -> Result<RawConfig> {
    let defaults = default_table();
    let mut problems = Vec::new();
    for (k, v) in table {
        if !defaults.contains_key(k) {
            problems.push(format!("unknown key `{k}`"));
            continue;
        }
        let mut probe = defaults.clone();
        probe.insert(k.clone(), v.clone());
        if let Err(e) = probe.try_into::<RawConfig>() {
            problems.push(format!("key `{k}`: {}", e.message().trim()));
        }
    }
    if !problems.is_empty() {
        return Err(CliError::Config(problems.join("; ")));
    }
    table
        .clone()
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))
}

/// Reads an optional config file, then applies overrides.
pub fn load_raw(path: Option<&Path>, overrides: &[String]) -> Result<RawConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            text.parse::<toml::Table>()
                .map_err(|e| CliError::Config(format!("{}: {}", p.display(), e.message())))?
        }
        None => toml::Table::new(),
    };
    apply_overrides(&mut table, overrides)?;
    raw_from_table(&table)
}

/// Parses one expert size: an integer, `T`, `nT` or `T/n`.
pub fn parse_patch_size(token: &str, base_width: usize) -> Option<usize> {
    let t = token.trim();
    if let Ok(n) = t.parse::<usize>() {
        return Some(n);
    }
    if t == "T" {
        return Some(base_width);
    }
    if let Some(div) = t.strip_prefix("T/") {
        let d: usize = div.parse().ok()?;
        return (d > 0 && base_width.is_multiple_of(d)).then(|| base_width / d);
    }
    let mul: usize = t.strip_suffix('T')?.parse().ok()?;
    Some(mul * base_width)
}

/// Expands the `experts` key into patch sizes.
pub fn parse_experts(spec: &str, base_width: usize) -> std::result::Result<Vec<usize>, String> {
    let spec = spec.trim();
    if spec == "moe" {
        return Ok(default_patch_sizes(base_width));
    }
    let list = spec.strip_prefix("single:").unwrap_or(spec);
    let sizes: Vec<usize> = list
        .split(',')
        .map(|t| parse_patch_size(t, base_width).filter(|&d| d > 0).ok_or_else(|| format!("invalid expert size `{t}`")))
        .collect::<std::result::Result<_, _>>()?;
    if spec.starts_with("single:") && sizes.len() != 1 {
        return Err(format!("`{spec}` must name exactly one size"));
    }
    Ok(sizes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Val,
    Test,
    All,
}

impl EvalSplit {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(EvalSplit::Train),
            "val" => Some(EvalSplit::Val),
            "test" => Some(EvalSplit::Test),
            "all" => Some(EvalSplit::All),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub duration_s: f64,
    pub fs: u32,
    pub negative: ClassParams,
    pub positive: ClassParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatsConfig {
    pub ks: Vec<usize>,
    pub block: usize,
    pub budget: usize,
}

/// A validated experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub raw: RawConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub manifest: PathBuf,
    pub synth: SynthConfig,
    pub denoise_window: usize,
    pub segment_s: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub checkpoint_dtype: DType,
    pub threshold: f64,
    pub aggregation: Aggregation,
    pub eval_split: EvalSplit,
    pub stats: StatsConfig,
}

impl ExperimentConfig {
    /// Checks every cross-module constraint, listing all violations in one error.
    pub fn from_raw(raw: RawConfig) -> Result<Self> {
        let mut problems = Vec::new();
        let mut bad = |msg: String| problems.push(msg);

        let negative = ClassParams {
            rate_bpm: raw.neg_rate_bpm,
            hrv: raw.neg_hrv,
            noise: raw.neg_noise,
        };
        let positive = ClassParams {
            rate_bpm: raw.pos_rate_bpm,
            hrv: raw.pos_hrv,
            noise: raw.pos_noise,
        };
        for (name, p) in [("negative", negative), ("positive", positive)] {
            if let Err(e) = p.validate() {
                bad(format!("{name} class: {e}"));
            }
        }
        if raw.n_subjects < 2 {
            bad(format!("n_subjects {} must be at least 2 (one per class)", raw.n_subjects));
        }
        if raw.fs == 0 {
            bad("fs must be positive".into());
        }
        if !(raw.duration_s > 0.0 && raw.duration_s.is_finite()) {
            bad(format!("duration_s {} must be positive", raw.duration_s));
        }
        if !(raw.segment_s > 0.0 && raw.segment_s.is_finite()) {
            bad(format!("segment_s {} must be positive", raw.segment_s));
        } else if raw.segment_s > raw.duration_s {
            bad(format!(
                "segment_s {} exceeds duration_s {}: records would yield no segments",
                raw.segment_s, raw.duration_s
            ));
        }
        if raw.denoise_window == 0 || raw.denoise_window.is_multiple_of(2) {
            bad(format!("denoise_window {} must be odd and positive", raw.denoise_window));
        }
        if !(0.0..=1.0).contains(&raw.threshold) {
            bad(format!("threshold {} must lie in [0, 1]", raw.threshold));
        }

        let scope = Scope::parse(&raw.scope);
        if scope.is_none() {
            bad(format!("unknown scope `{}` (expected global or windowed)", raw.scope));
        }
        let gate_input = GateInput::parse(&raw.gate_input);
        if gate_input.is_none() {
            bad(format!("unknown gate_input `{}` (expected summary or raw)", raw.gate_input));
        }
        let optimizer = OptimizerKind::parse(&raw.optimizer);
        if optimizer.is_none() {
            bad(format!("unknown optimizer `{}` (expected adam or sgd_momentum)", raw.optimizer));
        }
        let aggregation = Aggregation::parse(&raw.aggregation);
        if aggregation.is_none() {
            bad(format!("unknown aggregation `{}` (expected mean_score or majority_vote)", raw.aggregation));
        }
        let eval_split = EvalSplit::parse(&raw.eval_split);
        if eval_split.is_none() {
            bad(format!("unknown eval_split `{}`", raw.eval_split));
        }
        let checkpoint_dtype = match raw.checkpoint_dtype.as_str() {
            "f64" => Some(DType::F64),
            "f32" => Some(DType::F32),
            other => {
                bad(format!("unknown checkpoint_dtype `{other}` (expected f64 or f32)"));
                None
            }
        };
        if raw.stats_k.is_empty() || raw.stats_k.contains(&0) {
            bad("stats_k must list positive square sizes".into());
        }
        if raw.stats_block == 0 || raw.stats_budget == 0 {
            bad("stats_block and stats_budget must be positive".into());
        }
        let patch_sizes = parse_experts(&raw.experts, raw.base_width).unwrap_or_else(|e| {
            bad(e);
            Vec::new()
        });

        let seg_len = if raw.segment_s > 0.0 && raw.segment_s.is_finite() {
            segment_len(raw.segment_s)
        } else {
            0
        };
        let model = ModelConfig {
            segment_len: seg_len,
            base_width: raw.base_width,
            patch_sizes,
            k: raw.k,
            encoder: EncoderConfig {
                scope: scope.unwrap_or(Scope::Windowed),
                depth: raw.depth,
                d_model: raw.d_model,
                heads: raw.heads,
                window: raw.window,
                shift: raw.shift,
                merge_stages: raw.merge_stages.clone(),
                mlp_ratio: raw.mlp_ratio,
            },
            head_hidden: raw.head_hidden,
            gate_input: gate_input.unwrap_or(GateInput::Summary),
        };
        let experts_ok = !model.patch_sizes.is_empty();
        for p in model.problems() {
            // A malformed `experts` key is already reported above.
            if experts_ok || !p.contains("patch size is required") {
                bad(p);
            }
        }
        let train = TrainConfig {
            epochs: raw.epochs,
            batch_size: raw.batch_size,
            learning_rate: raw.learning_rate,
            optimizer: optimizer.unwrap_or(OptimizerKind::Adam),
            seed: raw.seed,
            split: SplitFractions {
                train: raw.train_frac,
                val: raw.val_frac,
                test: raw.test_frac,
            },
            grad_clip: raw.grad_clip,
        };
        for p in train.problems() {
            bad(p);
        }

        if !problems.is_empty() {
            return Err(CliError::Config(problems.join("; ")));
        }
        let out_dir = PathBuf::from(&raw.out_dir);
        let manifest = if raw.manifest.is_empty() {
            out_dir.join("data").join("manifest.csv")
        } else {
            PathBuf::from(&raw.manifest)
        };
        Ok(ExperimentConfig {
            seed: raw.seed,
            out_dir,
            manifest,
            synth: SynthConfig {
                n_subjects: raw.n_subjects,
                duration_s: raw.duration_s,
                fs: raw.fs,
                negative,
                positive,
            },
            denoise_window: raw.denoise_window,
            segment_s: raw.segment_s,
            model,
            train,
            checkpoint_dtype: checkpoint_dtype.unwrap(),
            threshold: raw.threshold,
            aggregation: aggregation.unwrap(),
            eval_split: eval_split.unwrap(),
            stats: StatsConfig {
                ks: raw.stats_k.clone(),
                block: raw.stats_block,
                budget: raw.stats_budget,
            },
            raw,
        })
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        Self::from_raw(load_raw(path, overrides)?)
    }

    /// The model-shaping keys as TOML, stored in checkpoints.
    pub fn model_toml(&self) -> String {
        let full = toml::Table::try_from(&self.raw).expect("config serialises");
        let mut t = toml::Table::new();
        for &k in MODEL_KEYS {
            t.insert(k.to_string(), full[k].clone());
        }
        t.insert("seed".into(), full["seed"].clone());
        toml::to_string(&t).expect("table serialises")
    }

    /// Replaces the model-shaping keys with those stored in a checkpoint.
    pub fn with_model_from(&self, metadata: &str) -> Result<Self> {
        let stored: toml::Table = metadata
            .parse()
            .map_err(|e: toml::de::Error| CliError::Data(format!("checkpoint metadata: {}", e.message())))?;
        let mut t = toml::Table::try_from(&self.raw).expect("config serialises");
        for &k in MODEL_KEYS {
            let v = stored
                .get(k)
                .ok_or_else(|| CliError::Data(format!("checkpoint metadata lacks `{k}`")))?;
            t.insert(k.to_string(), v.clone());
        }
        Self::from_raw(raw_from_table(&t)?)
    }
}
