//! Pipeline commands. Each returns its primary results so that tests can
//! inspect them without parsing output files.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use mmvd_core::checkpoint::{model_checkpoint, model_entries, restore_model, Checkpoint};
use mmvd_core::codec::{decode_video, encode, encode_video};
use mmvd_core::control::{assign_roles, Role, TaskKind, TaskMixture};
use mmvd_core::dataset::{read_dataset, write_dataset};
use mmvd_core::metrics::{
    composite_score, depth_metrics, edge_f1, fg_agreement, psnr, seg_miou, MetricReport, SampleMetrics,
};
use mmvd_core::model::OmniDiT;
use mmvd_core::sampler::{sample, SamplerConfig};
use mmvd_core::scene::{check_consistency, render, sample_scene, MultiModalVideo};
use mmvd_core::tensor::Tensor;
use mmvd_core::train::{Adam, Example, Trainer};
use mmvd_core::{vocab, Modality};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{EdgesSlot, RunConfig};
use crate::imaging::{lowres_rgb, save_grids};
use crate::CliError;

pub const CHECKPOINT: &str = "checkpoint.ovdf";
pub const TRAIN_LOG: &str = "train_log.txt";
pub const METRICS_LOG: &str = "metrics.log";
const STEP_KEY: &str = "train_step";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Scene seed of sample `index` in `split`.
pub fn scene_seed(data_seed: u64, split: &str, index: usize) -> u64 {
    let offset = if split == "train" { 0 } else { 500_000 };
    data_seed * 1_000_000 + offset + index as u64
}

pub struct GenSummary {
    pub train_manifest: PathBuf,
    pub eval_manifest: PathBuf,
}

/// Renders `n_train` and `n_eval` scenes, re-checking every one.
pub fn gen_data(cfg: &RunConfig) -> Result<GenSummary, CliError> {
    let dc = cfg.dataset();
    let mut manifests = Vec::new();
    for (split, n) in [("train", cfg.n_train), ("eval", cfg.n_eval)] {
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let seed = scene_seed(cfg.data_seed, split, i);
            let spec = sample_scene(seed, &dc).map_err(|e| CliError::Validation(e.to_string()))?;
            let video = render(&spec);
            check_consistency(&spec, &video)
                .map_err(|e| CliError::Runtime(format!("scene {seed} failed its re-check: {e}")))?;
            samples.push((seed, video));
        }
        manifests.push(write_dataset(&cfg.split_dir(split), &samples)?);
        info!("wrote {n} {split} samples");
    }
    let eval_manifest = manifests.pop().expect("two splits");
    let train_manifest = manifests.pop().expect("two splits");
    Ok(GenSummary {
        train_manifest,
        eval_manifest,
    })
}

/// Loads a split and checks it against the configured dimensions.
pub fn load_split(cfg: &RunConfig, split: &str) -> Result<Vec<MultiModalVideo>, CliError> {
    let samples = read_dataset(&cfg.split_dir(split))?;
    if samples.is_empty() {
        return Err(CliError::Validation(format!("split {split} is empty")));
    }
    let videos: Vec<MultiModalVideo> = samples.into_iter().map(|(_, v)| v).collect();
    for v in &videos {
        check_dims(cfg, v)?;
    }
    Ok(videos)
}

fn check_dims(cfg: &RunConfig, v: &MultiModalVideo) -> Result<(), CliError> {
    if (v.frames, v.height, v.width) != (cfg.frames, cfg.height, cfg.width) {
        return Err(CliError::Validation(format!(
            "sample is {}x{}x{}, config expects {}x{}x{}",
            v.frames, v.height, v.width, cfg.frames, cfg.height, cfg.width
        )));
    }
    Ok(())
}

/// Latents of every modality; with a repurposed edges slot the fourth
/// latent carries low-resolution rgb instead.
pub fn encode_example(cfg: &RunConfig, v: &MultiModalVideo) -> Result<Example<f32>, CliError> {
    let mut ex = Example::encode(v, &cfg.codec())?;
    if cfg.edges_slot == EdgesSlot::LowresRgb {
        ex.latents[Modality::Edges.index()] = lowres_latent(cfg, v)?;
    }
    Ok(ex)
}

fn lowres_latent(cfg: &RunConfig, v: &MultiModalVideo) -> Result<Tensor<f32>, CliError> {
    let color = Tensor::new(&[v.frames, v.height, v.width, 3], lowres_rgb(v, cfg.sr_factor))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(encode(&color, &cfg.codec())?)
}

fn checkpoint_extra(cfg: &RunConfig, step: usize) -> Vec<(String, String)> {
    let model_keys: Vec<String> = model_entries(&cfg.model_config()).into_iter().map(|(k, _)| k).collect();
    let mut extra: Vec<(String, String)> = cfg
        .entries()
        .into_iter()
        .filter(|(k, _)| !model_keys.contains(k))
        .collect();
    extra.push((STEP_KEY.to_string(), step.to_string()));
    extra
}

fn save_trainer(path: &Path, cfg: &RunConfig, tr: &Trainer<f32>) -> Result<(), CliError> {
    let aux = tr.adam.to_records(tr.model.params());
    model_checkpoint(&tr.model, &checkpoint_extra(cfg, tr.step), &aux)?.save(path)?;
    Ok(())
}

/// Model plus the run configuration recorded in its checkpoint.
pub struct Loaded {
    pub model: OmniDiT<f32>,
    pub cfg: RunConfig,
    pub checkpoint: Checkpoint,
}

pub fn load_model(path: &Path) -> Result<Loaded, CliError> {
    let checkpoint = Checkpoint::load(path)?;
    let (model, _) = restore_model(&checkpoint, None)?;
    let cfg = RunConfig::from_entries(&checkpoint.config)?;
    Ok(Loaded { model, cfg, checkpoint })
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub step: usize,
    pub losses: Vec<f64>,
}

/// Trains until `cfg.steps` total steps, optionally resuming a checkpoint.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome, CliError> {
    let videos = load_split(cfg, "train")?;
    let data = videos
        .iter()
        .map(|v| encode_example(cfg, v))
        .collect::<Result<Vec<_>, _>>()?;
    let tc = cfg.train_config();
    let mut trainer = match resume {
        None => Trainer::new(OmniDiT::init(cfg.model_config(), cfg.init_seed)?, tc)?,
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let (model, aux) = restore_model(&ck, Some(&cfg.model_config()))?;
            let step: usize = ck
                .get(STEP_KEY)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| CliError::Validation(format!("{} has no {STEP_KEY}", path.display())))?;
            let adam = Adam::from_records(model.params(), &aux, step as u64)
                .ok_or_else(|| CliError::Validation(format!("{} lacks optimizer state", path.display())))?;
            Trainer::resume(model, tc, adam, step)?
        }
    };
    fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let log_path = cfg.out_dir.join(TRAIN_LOG);
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    let ck_path = cfg.out_dir.join(CHECKPOINT);
    let mut losses = Vec::new();
    while trainer.step < cfg.steps {
        let stats = trainer.train_step(&data)?;
        writeln!(log, "{}", stats.log_line()).map_err(io_err(&log_path))?;
        losses.push(stats.loss);
        if trainer.step % 50 == 0 {
            info!("step {} loss {:.4}", trainer.step, stats.loss);
        }
        if cfg.checkpoint_every > 0 && trainer.step % cfg.checkpoint_every == 0 {
            save_trainer(&ck_path, cfg, &trainer)?;
        }
    }
    save_trainer(&ck_path, cfg, &trainer)?;
    Ok(TrainOutcome {
        checkpoint: ck_path,
        log: log_path,
        step: trainer.step,
        losses,
    })
}

/// Runs the sampler for `task`, conditioning on `cond` where the task
/// requires it, and decodes the result.
pub fn generate(
    model: &OmniDiT<f32>,
    cfg: &RunConfig,
    task: TaskKind,
    cond: Option<&MultiModalVideo>,
    caption: &[u8],
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<MultiModalVideo, CliError> {
    let roles = assign_roles(task);
    let needs = roles.conditioning().next().is_some();
    let slots: Vec<Option<Tensor<f32>>> = match (needs, cond) {
        (false, _) => vec![None; Modality::COUNT],
        (true, None) => {
            return Err(CliError::Validation(format!("task {task} needs a condition sample")));
        }
        (true, Some(v)) => {
            check_dims(cfg, v)?;
            let ex = encode_example(cfg, v)?;
            ex.latents
                .into_iter()
                .zip(Modality::ALL)
                .map(|(l, m)| (roles.role(m) == Role::Conditioning).then_some(l))
                .collect()
        }
    };
    if caption.len() > cfg.caption_len {
        return Err(CliError::Validation(format!(
            "caption has {} tokens, the model takes {}",
            caption.len(),
            cfg.caption_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = model.config().latent_shape();
    let out = sample(model, task, &slots, &shape, caption, sampler, &mut rng)?;
    Ok(decode_video(&out, &cfg.codec(), caption.to_vec())?)
}

pub enum Condition {
    None,
    Dataset { split: String, index: usize },
    File(PathBuf),
}

impl Condition {
    fn load(&self, cfg: &RunConfig) -> Result<Option<MultiModalVideo>, CliError> {
        match self {
            Condition::None => Ok(None),
            Condition::File(p) => Ok(Some(mmvd_core::dataset::read_sample(p)?)),
            Condition::Dataset { split, index } => {
                let videos = load_split(cfg, split)?;
                let n = videos.len();
                videos
                    .into_iter()
                    .nth(*index)
                    .map(Some)
                    .ok_or_else(|| CliError::Validation(format!("split {split} has {n} samples, asked for {index}")))
            }
        }
    }
}

pub fn tokenize_caption(text: &str) -> Result<Vec<u8>, CliError> {
    vocab::tokenize(text).map_err(CliError::Validation)
}

pub struct SampleOutput {
    pub video: MultiModalVideo,
    pub files: Vec<PathBuf>,
}

/// Samples one video and writes it plus per-modality PNG grids.
pub fn sample_cmd(
    cfg: &RunConfig,
    checkpoint: &Path,
    task: TaskKind,
    condition: &Condition,
    caption: Option<&str>,
    out: &Path,
) -> Result<SampleOutput, CliError> {
    let loaded = load_model(checkpoint)?;
    let cond = condition.load(cfg)?;
    if task == TaskKind::T2V && cond.is_some() {
        return Err(CliError::Validation("t2v takes no condition sample".into()));
    }
    if task != TaskKind::T2V && cond.is_none() {
        return Err(CliError::Validation(format!("task {task} needs --sample or --condition")));
    }
    let caption = match (caption, &cond) {
        (Some(text), _) => tokenize_caption(text)?,
        (None, Some(v)) => v.caption.clone(),
        (None, None) => return Err(CliError::Validation("t2v needs --caption".into())),
    };
    let video = generate(
        &loaded.model,
        &loaded.cfg,
        task,
        cond.as_ref(),
        &caption,
        &cfg.sampler_config(),
        cfg.sample_seed,
    )?;
    let files = write_output(&video, out)?;
    Ok(SampleOutput { video, files })
}

fn write_output(video: &MultiModalVideo, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    mmvd_core::dataset::write_sample(out, video)?;
    let mut files = vec![out.to_path_buf()];
    files.extend(save_grids(video, &out.with_extension("")).map_err(|e| CliError::Runtime(e.to_string()))?);
    Ok(files)
}

/// Metrics of every modality `task` generates; t2v adds the depth/seg
/// foreground agreement of the generated stack.
pub fn sample_metrics(task: TaskKind, pred: &MultiModalVideo, gt: &MultiModalVideo) -> Result<SampleMetrics, CliError> {
    let roles = assign_roles(task);
    let generated = |m: Modality| roles.role(m) == Role::Generation;
    let mut s = SampleMetrics::default();
    if generated(Modality::Depth) {
        let (absrel, delta1) = depth_metrics(&pred.depth_f32(), &gt.depth_f32())?;
        s.absrel = Some(absrel);
        s.delta1 = Some(delta1);
    }
    if generated(Modality::Seg) {
        s.miou = Some(seg_miou(&pred.seg, &gt.seg)?);
    }
    if generated(Modality::Edges) {
        s.edge_f1 = Some(edge_f1(&pred.edges, &gt.edges, gt.frames, gt.height, gt.width, 1)?);
    }
    if generated(Modality::Rgb) {
        s.psnr = Some(psnr(&pred.rgb_f32(), &gt.rgb_f32())?);
    }
    if task == TaskKind::T2V {
        s.fg_agreement = Some(fg_agreement(&pred.depth_f32(), &pred.seg)?);
    }
    Ok(s)
}

/// Where evaluation predictions come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Model,
    /// Predictions are the ground truth itself.
    Oracle,
}

/// Samples every evaluation video with `task` and scores it.
pub fn evaluate(
    model: &OmniDiT<f32>,
    model_cfg: &RunConfig,
    cfg: &RunConfig,
    task: TaskKind,
    mode: EvalMode,
) -> Result<MetricReport, CliError> {
    let mut videos = load_split(cfg, &cfg.eval_split)?;
    if cfg.eval_samples > 0 {
        videos.truncate(cfg.eval_samples);
    }
    let mut per = Vec::with_capacity(videos.len());
    for (i, gt) in videos.iter().enumerate() {
        let pred = match mode {
            EvalMode::Oracle => gt.clone(),
            EvalMode::Model => {
                let cond = (task != TaskKind::T2V).then_some(gt);
                let seed = cfg.sample_seed.wrapping_add(i as u64);
                generate(model, model_cfg, task, cond, &gt.caption, &cfg.sampler_config(), seed)?
            }
        };
        per.push(sample_metrics(task, &pred, gt)?);
    }
    let report = MetricReport::aggregate(task.name(), &per);
    report.check().map_err(CliError::Runtime)?;
    Ok(report)
}

pub fn eval_cmd(cfg: &RunConfig, checkpoint: &Path, task: TaskKind, mode: EvalMode) -> Result<MetricReport, CliError> {
    let loaded = load_model(checkpoint)?;
    let report = evaluate(&loaded.model, &loaded.cfg, cfg, task, mode)?;
    fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let path = cfg.out_dir.join(METRICS_LOG);
    report.append_to(&path).map_err(io_err(&path))?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub checkpoint: PathBuf,
    /// rgb-conditioned understanding.
    pub understanding: MetricReport,
    /// depth-conditioned generation.
    pub generation: MetricReport,
    pub composite: f64,
}

pub const VARIANTS: [&str; 4] = ["full", "no_modality_embedding", "no_amcs", "no_msph"];

pub fn variant_config(cfg: &RunConfig, variant: &str) -> RunConfig {
    let mut v = cfg.clone();
    match variant {
        "no_modality_embedding" => v.use_modality_embedding = false,
        "no_amcs" => v.amcs = false,
        "no_msph" => v.use_msph = false,
        _ => {}
    }
    if cfg.ablate_steps > 0 {
        v.steps = cfg.ablate_steps;
    }
    v.out_dir = cfg.out_dir.join("ablate").join(variant);
    v
}

/// Trains the full model and the three ablations with one budget and seed,
/// then scores each.
pub fn ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>, CliError> {
    let mut rows = Vec::new();
    for variant in VARIANTS {
        let vcfg = variant_config(cfg, variant);
        info!("ablation variant {variant}: {} steps", vcfg.steps);
        let outcome = train(&vcfg, None)?;
        let loaded = load_model(&outcome.checkpoint)?;
        let understanding = evaluate(&loaded.model, &loaded.cfg, cfg, TaskKind::CondRgb, EvalMode::Model)?;
        let generation = evaluate(&loaded.model, &loaded.cfg, cfg, TaskKind::CondDepth, EvalMode::Model)?;
        let composite = composite_score(
            understanding.absrel.unwrap_or(1.0),
            understanding.miou.unwrap_or(0.0),
            understanding.edge_f1.unwrap_or(0.0),
            generation.psnr.unwrap_or(0.0),
        );
        rows.push(AblationRow {
            variant: variant.to_string(),
            checkpoint: outcome.checkpoint,
            understanding,
            generation,
            composite,
        });
    }
    let path = cfg.out_dir.join("ablate").join("table.txt");
    fs::write(&path, ablation_table(&rows)).map_err(io_err(&path))?;
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:<24}{:>9}{:>9}{:>9}{:>9}{:>9}{:>11}\n",
        "variant", "absrel", "delta1", "miou", "edge_f1", "psnr", "composite"
    );
    for r in rows {
        let u = &r.understanding;
        s.push_str(&format!(
            "{:<24}{:>9.4}{:>9.4}{:>9.4}{:>9.4}{:>9.2}{:>11.4}\n",
            r.variant,
            u.absrel.unwrap_or(f64::NAN),
            u.delta1.unwrap_or(f64::NAN),
            u.miou.unwrap_or(f64::NAN),
            u.edge_f1.unwrap_or(f64::NAN),
            r.generation.psnr.unwrap_or(f64::NAN),
            r.composite
        ));
    }
    s
}

pub struct StyleOutput {
    /// rgb-conditioned understanding of the source.
    pub estimated: MultiModalVideo,
    /// depth-conditioned generation from the estimated depth.
    pub restyled: MultiModalVideo,
    pub files: Vec<PathBuf>,
}

/// Estimates depth from the source rgb, then regenerates the video from
/// that depth under a new caption.
pub fn v2v_style(
    cfg: &RunConfig,
    checkpoint: &Path,
    source: &Condition,
    caption: &str,
    out_dir: &Path,
) -> Result<StyleOutput, CliError> {
    let loaded = load_model(checkpoint)?;
    let src = source
        .load(cfg)?
        .ok_or_else(|| CliError::Validation("v2v-style needs --sample or --condition".into()))?;
    let tokens = tokenize_caption(caption)?;
    let sampler = cfg.sampler_config();
    let estimated = generate(
        &loaded.model,
        &loaded.cfg,
        TaskKind::CondRgb,
        Some(&src),
        &src.caption,
        &sampler,
        cfg.sample_seed,
    )?;
    let restyled = generate(
        &loaded.model,
        &loaded.cfg,
        TaskKind::CondDepth,
        Some(&estimated),
        &tokens,
        &sampler,
        cfg.sample_seed.wrapping_add(1),
    )?;
    let mut files = write_output(&estimated, &out_dir.join("estimated.ommv"))?;
    files.extend(write_output(&restyled, &out_dir.join("restyled.ommv"))?);
    Ok(StyleOutput {
        estimated,
        restyled,
        files,
    })
}

pub struct AdaptOutcome {
    pub checkpoint: PathBuf,
    pub psnr_model: f64,
    pub psnr_bicubic: f64,
}

/// Fine-tunes a base checkpoint with the edges slot carrying low-resolution
/// rgb, then compares super-resolved rgb against bicubic upsampling.
pub fn adapt_sr(cfg: &RunConfig, base: &Path, out: &Path) -> Result<AdaptOutcome, CliError> {
    let loaded = load_model(base)?;
    let mut acfg = loaded.cfg.clone();
    acfg.edges_slot = EdgesSlot::LowresRgb;
    acfg.sr_factor = cfg.sr_factor;
    acfg.lr = cfg.adapt_lr;
    acfg.adapt_steps = cfg.adapt_steps;
    acfg.adapt_lr = cfg.adapt_lr;
    acfg.seed = cfg.seed;
    acfg.stage = 0;
    acfg.task_mixture = TaskMixture::new([0.0, 0.0, 0.0, 0.0, 1.0]).expect("valid mixture");
    acfg.amcs = true;
    acfg.data_dir = cfg.data_dir.clone();
    acfg.validate()?;

    let videos = load_split(&acfg, "train")?;
    let data = videos
        .iter()
        .map(|v| encode_example(&acfg, v))
        .collect::<Result<Vec<_>, _>>()?;
    let mut trainer = Trainer::new(loaded.model, acfg.train_config())?;
    for _ in 0..cfg.adapt_steps {
        trainer.train_step(&data)?;
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    model_checkpoint(&trainer.model, &checkpoint_extra(&acfg, trainer.step), &Default::default())?.save(out)?;

    let mut eval_videos = load_split(&acfg, &cfg.eval_split)?;
    if cfg.eval_samples > 0 {
        eval_videos.truncate(cfg.eval_samples);
    }
    let (mut pm, mut pb) = (0.0, 0.0);
    for (i, gt) in eval_videos.iter().enumerate() {
        let pred = generate(
            &trainer.model,
            &acfg,
            TaskKind::CondEdges,
            Some(gt),
            &gt.caption,
            &cfg.sampler_config(),
            cfg.sample_seed.wrapping_add(i as u64),
        )?;
        pm += psnr(&pred.rgb_f32(), &gt.rgb_f32())?;
        pb += psnr(&lowres_rgb(gt, acfg.sr_factor), &gt.rgb_f32())?;
    }
    let n = eval_videos.len() as f64;
    Ok(AdaptOutcome {
        checkpoint: out.to_path_buf(),
        psnr_model: pm / n,
        psnr_bicubic: pb / n,
    })
}

/// Re-encodes a decoded video's conditioning planes, for passthrough checks.
pub fn encoded_planes(cfg: &RunConfig, v: &MultiModalVideo) -> Result<Vec<Tensor<f32>>, CliError> {
    Ok(encode_video(v, &cfg.codec())?)
}
