//! Run configuration: `key=value` files plus `--set` overrides, validated
//! against a closed schema.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mmvd_core::codec::CodecConfig;
use mmvd_core::control::TaskMixture;
use mmvd_core::model::ModelConfig;
use mmvd_core::sampler::SamplerConfig;
use mmvd_core::scene::DatasetConfig;
use mmvd_core::train::TrainConfig;
use mmvd_core::vocab;

use crate::CliError;

/// Content of the edges slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgesSlot {
    Edges,
    /// Downsampled-then-upsampled rgb, for super-resolution.
    LowresRgb,
}

impl FromStr for EdgesSlot {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "edges" => Ok(Self::Edges),
            "lowres_rgb" => Ok(Self::LowresRgb),
            _ => Err(format!("expected edges or lowres_rgb, got {s:?}")),
        }
    }
}

impl std::fmt::Display for EdgesSlot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Edges => "edges",
            Self::LowresRgb => "lowres_rgb",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // dataset
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub codec_fh: usize,
    pub codec_fw: usize,
    pub codec_ft: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub data_seed: u64,
    // model
    pub model_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub caption_len: usize,
    pub use_modality_embedding: bool,
    pub use_msph: bool,
    pub init_seed: u64,
    // training
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub stage: u8,
    pub task_mixture: TaskMixture,
    pub amcs: bool,
    pub t_floor: f64,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub checkpoint_every: usize,
    // sampling and evaluation
    pub sample_steps: usize,
    pub sample_seed: u64,
    pub eval_split: String,
    pub eval_samples: usize,
    // ablation and applications
    pub ablate_steps: usize,
    pub edges_slot: EdgesSlot,
    pub sr_factor: usize,
    pub adapt_steps: usize,
    pub adapt_lr: f64,
    // paths
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            frames: 8,
            height: 32,
            width: 32,
            codec_fh: 4,
            codec_fw: 4,
            codec_ft: 2,
            n_train: 64,
            n_eval: 16,
            data_seed: 1,
            model_dim: 256,
            depth: 4,
            heads: 4,
            caption_len: 9,
            use_modality_embedding: true,
            use_msph: true,
            init_seed: 0,
            lr: t.lr,
            steps: t.steps,
            batch_size: t.batch_size,
            seed: t.seed,
            stage: 0,
            task_mixture: TaskMixture::UNIFORM,
            amcs: true,
            t_floor: t.t_floor,
            clip_norm: t.clip_norm,
            weight_decay: t.weight_decay,
            checkpoint_every: 500,
            sample_steps: 50,
            sample_seed: 0,
            eval_split: "eval".into(),
            eval_samples: 0,
            ablate_steps: 0,
            edges_slot: EdgesSlot::Edges,
            sr_factor: 4,
            adapt_steps: 300,
            adapt_lr: 2e-4,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

/// Every accepted key, in serialization order.
pub const KEYS: &[&str] = &[
    "frames",
    "height",
    "width",
    "codec_fh",
    "codec_fw",
    "codec_ft",
    "n_train",
    "n_eval",
    "data_seed",
    "model_dim",
    "depth",
    "heads",
    "caption_len",
    "use_modality_embedding",
    "use_msph",
    "init_seed",
    "lr",
    "steps",
    "batch_size",
    "seed",
    "stage",
    "task_mixture",
    "amcs",
    "t_floor",
    "clip_norm",
    "weight_decay",
    "checkpoint_every",
    "sample_steps",
    "sample_seed",
    "eval_split",
    "eval_samples",
    "ablate_steps",
    "edges_slot",
    "sr_factor",
    "adapt_steps",
    "adapt_lr",
    "data_dir",
    "out_dir",
];

fn parse<V: FromStr>(key: &str, raw: &str) -> Result<V, CliError>
where
    V::Err: Display,
{
    raw.trim()
        .parse()
        .map_err(|e| CliError::Validation(format!("{key}={raw}: {e}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), CliError> {
        let raw = raw.trim();
        match key {
            "frames" => self.frames = parse(key, raw)?,
            "height" => self.height = parse(key, raw)?,
            "width" => self.width = parse(key, raw)?,
            "codec_fh" => self.codec_fh = parse(key, raw)?,
            "codec_fw" => self.codec_fw = parse(key, raw)?,
            "codec_ft" => self.codec_ft = parse(key, raw)?,
            "n_train" => self.n_train = parse(key, raw)?,
            "n_eval" => self.n_eval = parse(key, raw)?,
            "data_seed" => self.data_seed = parse(key, raw)?,
            "model_dim" => self.model_dim = parse(key, raw)?,
            "depth" => self.depth = parse(key, raw)?,
            "heads" => self.heads = parse(key, raw)?,
            "caption_len" => self.caption_len = parse(key, raw)?,
            "use_modality_embedding" => self.use_modality_embedding = parse(key, raw)?,
            "use_msph" => self.use_msph = parse(key, raw)?,
            "init_seed" => self.init_seed = parse(key, raw)?,
            "lr" => self.lr = parse(key, raw)?,
            "steps" => self.steps = parse(key, raw)?,
            "batch_size" => self.batch_size = parse(key, raw)?,
            "seed" => self.seed = parse(key, raw)?,
            "stage" => self.stage = parse(key, raw)?,
            "task_mixture" => self.task_mixture = parse(key, raw)?,
            "amcs" => self.amcs = parse(key, raw)?,
            "t_floor" => self.t_floor = parse(key, raw)?,
            "clip_norm" => self.clip_norm = parse(key, raw)?,
            "weight_decay" => self.weight_decay = parse(key, raw)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, raw)?,
            "sample_steps" => self.sample_steps = parse(key, raw)?,
            "sample_seed" => self.sample_seed = parse(key, raw)?,
            "eval_split" => self.eval_split = raw.to_string(),
            "eval_samples" => self.eval_samples = parse(key, raw)?,
            "ablate_steps" => self.ablate_steps = parse(key, raw)?,
            "edges_slot" => self.edges_slot = parse(key, raw)?,
            "sr_factor" => self.sr_factor = parse(key, raw)?,
            "adapt_steps" => self.adapt_steps = parse(key, raw)?,
            "adapt_lr" => self.adapt_lr = parse(key, raw)?,
            "data_dir" => self.data_dir = PathBuf::from(raw),
            "out_dir" => self.out_dir = PathBuf::from(raw),
            _ => return Err(CliError::Validation(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "frames" => self.frames.to_string(),
            "height" => self.height.to_string(),
            "width" => self.width.to_string(),
            "codec_fh" => self.codec_fh.to_string(),
            "codec_fw" => self.codec_fw.to_string(),
            "codec_ft" => self.codec_ft.to_string(),
            "n_train" => self.n_train.to_string(),
            "n_eval" => self.n_eval.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "model_dim" => self.model_dim.to_string(),
            "depth" => self.depth.to_string(),
            "heads" => self.heads.to_string(),
            "caption_len" => self.caption_len.to_string(),
            "use_modality_embedding" => self.use_modality_embedding.to_string(),
            "use_msph" => self.use_msph.to_string(),
            "init_seed" => self.init_seed.to_string(),
            "lr" => self.lr.to_string(),
            "steps" => self.steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "seed" => self.seed.to_string(),
            "stage" => self.stage.to_string(),
            "task_mixture" => self.task_mixture.to_string(),
            "amcs" => self.amcs.to_string(),
            "t_floor" => self.t_floor.to_string(),
            "clip_norm" => self.clip_norm.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "sample_steps" => self.sample_steps.to_string(),
            "sample_seed" => self.sample_seed.to_string(),
            "eval_split" => self.eval_split.clone(),
            "eval_samples" => self.eval_samples.to_string(),
            "ablate_steps" => self.ablate_steps.to_string(),
            "edges_slot" => self.edges_slot.to_string(),
            "sr_factor" => self.sr_factor.to_string(),
            "adapt_steps" => self.adapt_steps.to_string(),
            "adapt_lr" => self.adapt_lr.to_string(),
            "data_dir" => self.data_dir.display().to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            _ => return None,
        })
    }

    /// Parses `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Validation(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Defaults, then the optional file, then overrides (later wins).
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Validation(format!("--set expects key=value, got {o:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        KEYS.iter()
            .map(|&k| (k.to_string(), self.get(k).expect("schema key")))
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Rebuilds a config from `entries`, ignoring keys outside the schema.
    pub fn from_entries(entries: &[(String, String)]) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (k, v) in entries {
            if KEYS.contains(&k.as_str()) {
                cfg.set(k, v)?;
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let v = |e: String| CliError::Validation(e);
        self.dataset().validate().map_err(|e| v(e.to_string()))?;
        self.model_config().validate().map_err(|e| v(e.to_string()))?;
        self.train_config().validate().map_err(|e| v(e.to_string()))?;
        self.sampler_config().validate().map_err(|e| v(e.to_string()))?;
        if self.caption_len > u8::MAX as usize {
            return Err(v("caption_len too large".into()));
        }
        if self.stage > 2 {
            return Err(v(format!("stage must be 0, 1 or 2, got {}", self.stage)));
        }
        if !matches!(self.eval_split.as_str(), "train" | "eval") {
            return Err(v(format!("eval_split must be train or eval, got {}", self.eval_split)));
        }
        if self.sr_factor == 0 || !self.height.is_multiple_of(self.sr_factor) || !self.width.is_multiple_of(self.sr_factor) {
            return Err(v(format!("sr_factor {} must divide the frame size", self.sr_factor)));
        }
        if !(self.adapt_lr > 0.0) {
            return Err(v("adapt_lr must be positive".into()));
        }
        Ok(())
    }

    pub fn codec(&self) -> CodecConfig {
        CodecConfig {
            fh: self.codec_fh,
            fw: self.codec_fw,
            ft: self.codec_ft,
        }
    }

    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            frames: self.frames,
            height: self.height,
            width: self.width,
            codec: self.codec(),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let codec = self.codec();
        ModelConfig {
            model_dim: self.model_dim,
            depth: self.depth,
            heads: self.heads,
            latent_channels: codec.channels(),
            grid: [
                self.frames / codec.ft.max(1),
                self.height / codec.fh.max(1),
                self.width / codec.fw.max(1),
            ],
            caption_len: self.caption_len,
            vocab_size: vocab::SIZE,
            use_modality_embedding: self.use_modality_embedding,
            use_msph: self.use_msph,
        }
    }

    /// Effective task mixture: stage presets win, then the ablation flag.
    pub fn mixture(&self) -> TaskMixture {
        match self.stage {
            1 => TaskMixture::T2V_ONLY,
            2 => TaskMixture::UNIFORM,
            _ if !self.amcs => TaskMixture::T2V_ONLY,
            _ => self.task_mixture,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            steps: self.steps,
            batch_size: self.batch_size,
            seed: self.seed,
            mixture: self.mixture(),
            t_floor: self.t_floor,
            clip_norm: self.clip_norm,
            weight_decay: self.weight_decay,
            ..TrainConfig::default()
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.sample_steps,
            t_floor: self.t_floor,
        }
    }

    pub fn split_dir(&self, split: &str) -> PathBuf {
        self.data_dir.join(split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip_and_overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# comment\nsteps = 10\nlr=0.001 # inline\n").unwrap();
        assert_eq!((cfg.steps, cfg.lr), (10, 1e-3));
        let back = RunConfig::from_entries(&cfg.entries()).unwrap();
        assert_eq!(back, cfg);
        let mut parsed = RunConfig::default();
        parsed.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(parsed, cfg);
        let o = RunConfig::load(None, &["steps=3".into(), "steps=4".into()]).unwrap();
        assert_eq!(o.steps, 4);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(
            RunConfig::load(None, &["bogus=1".into()]),
            Err(CliError::Validation(_))
        ));
        assert!(RunConfig::load(None, &["heads=3".into()]).is_err());
        assert!(RunConfig::load(None, &["width=30".into()]).is_err());
        assert!(RunConfig::load(None, &["stage=3".into()]).is_err());
        assert!(RunConfig::load(None, &["steps".into()]).is_err());
    }

    #[test]
    fn presets() {
        let mut cfg = RunConfig::default();
        cfg.stage = 1;
        assert_eq!(cfg.mixture(), TaskMixture::T2V_ONLY);
        cfg.stage = 0;
        cfg.amcs = false;
        assert_eq!(cfg.mixture(), TaskMixture::T2V_ONLY);
        assert_eq!(RunConfig::default().model_config(), ModelConfig::toy());
    }
}
