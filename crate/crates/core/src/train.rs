//! Role-masked denoising objective and the optimizer loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::codec::{encode_video, CodecConfig, CodecError};
use crate::control::{assign_roles, blend, loss_mask, sample_task, ControlError, TaskKind, TaskMixture};
use crate::model::{ModelError, OmniDiT};
use crate::scene::MultiModalVideo;
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, TensorError, Var};
use crate::Modality;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite loss {loss} at step {step}")]
    NonFinite { step: usize, loss: f64 },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mixture: TaskMixture,
    pub t_floor: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            steps: 2000,
            batch_size: 2,
            seed: 0,
            mixture: TaskMixture::UNIFORM,
            t_floor: 0.02,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.t_floor > 0.0 && self.t_floor < 1.0) {
            return bad("t_floor must lie in (0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam moments must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) || self.weight_decay < 0.0 {
            return bad("adam_eps must be positive and weight_decay non-negative");
        }
        Ok(())
    }
}

/// Encoded per-modality latents of one video plus its caption.
#[derive(Clone, Debug, PartialEq)]
pub struct Example<T> {
    pub latents: Vec<Tensor<T>>,
    pub caption: Vec<u8>,
}

impl<T: Scalar> Example<T> {
    pub fn encode(video: &MultiModalVideo, codec: &CodecConfig) -> Result<Self> {
        Ok(Self {
            latents: encode_video(video, codec)?,
            caption: video.caption.clone(),
        })
    }
}

pub fn standard_normal<T: Scalar>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::new(shape, data).expect("positive extents")
}

/// Mean over generation modalities of the per-modality mean squared error.
pub fn masked_mse<T: Scalar>(
    g: &mut Graph<T>,
    preds: &[Var],
    targets: &[Tensor<T>],
    mask: [f64; 4],
) -> Result<Var> {
    let active: f64 = mask.iter().sum();
    if active == 0.0 {
        return Err(ControlError::NoGeneration.into());
    }
    let mut total: Option<Var> = None;
    for ((&p, target), w) in preds.iter().zip(targets).zip(mask) {
        if w == 0.0 {
            continue;
        }
        let t = g.constant(target.clone());
        let d = g.sub(p, t)?;
        let sq = g.mul(d, d)?;
        let mse = g.mean(sq);
        let term = g.scale(mse, T::of(w / active));
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok(total.expect("at least one active modality"))
}

/// What one batch element was trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct ElementDraw {
    pub task: TaskKind,
    pub t: f64,
}

/// Builds the batch loss: per element a task, `t ~ U(t_floor, 1]`, fresh
/// noise per modality, role blend, forward, masked mse; averaged over the
/// batch.
pub fn batch_loss<T: Scalar>(
    model: &OmniDiT<T>,
    g: &mut Graph<T>,
    batch: &[&Example<T>],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(Var, Vec<ElementDraw>)> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut total: Option<Var> = None;
    let mut draws = Vec::with_capacity(batch.len());
    for ex in batch {
        let task = sample_task(rng, &cfg.mixture);
        let u: f64 = rng.random();
        let t = 1.0 - (1.0 - cfg.t_floor) * u;
        let roles = assign_roles(task);
        let mut eps = Vec::with_capacity(Modality::COUNT);
        let mut blended = Vec::with_capacity(Modality::COUNT);
        for (x, &m) in ex.latents.iter().zip(Modality::ALL.iter()) {
            let e = standard_normal::<T>(rng, x.shape());
            blended.push(blend(x, &e, T::of(t), roles.role(m))?);
            eps.push(e);
        }
        let preds = model.predict(g, &blended, &roles, t, &ex.caption)?;
        let l = masked_mse(g, &preds, &eps, loss_mask(&roles))?;
        let l = g.scale(l, T::of(1.0 / batch.len() as f64));
        total = Some(match total {
            None => l,
            Some(acc) => g.add(acc, l)?,
        });
        draws.push(ElementDraw { task, t });
    }
    Ok((total.expect("non-empty batch"), draws))
}

/// Adaptive-moment optimizer state with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Clips the global gradient norm to `clip_norm`, then applies one
    /// update. Returns the pre-clip norm.
    pub fn update(&mut self, params: &mut ParamStore<T>, cfg: &TrainConfig) -> f64 {
        let norm = params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data())
            .map(|&v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt();
        let clip = if norm > cfg.clip_norm {
            cfg.clip_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (tb1, tb2, tclip) = (T::of(b1), T::of(b2), T::of(clip));
        let (one_b1, one_b2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let step = T::of(cfg.lr / c1);
        let inv_c2 = T::of(1.0 / c2);
        let eps = T::of(cfg.adam_eps);
        let decay = T::of(1.0 - cfg.lr * cfg.weight_decay);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(grad) = p.grad.as_ref() else {
                continue;
            };
            let w = p.value.data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..w.len() {
                let gi = grad.data()[i] * tclip;
                m[i] = tb1 * m[i] + one_b1 * gi;
                v[i] = tb2 * v[i] + one_b2 * gi * gi;
                w[i] = w[i] * decay - step * m[i] / ((v[i] * inv_c2).sqrt() + eps);
            }
        }
        norm
    }

    /// Moments as named records (`optim.m.<param>`, `optim.v.<param>`).
    pub fn to_records(&self, params: &ParamStore<T>) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (kind, moments) in [("m", &self.m), ("v", &self.v)] {
            for (p, mt) in params.iter().zip(moments) {
                out.insert(format!("optim.{kind}.{}", p.name), mt.clone())
                    .expect("parameter names are unique");
            }
        }
        out
    }

    pub fn from_records(params: &ParamStore<T>, records: &ParamStore<T>, t: u64) -> Option<Self> {
        let fetch = |kind: &str| -> Option<Vec<Tensor<T>>> {
            params
                .iter()
                .map(|p| {
                    let id = records.lookup(&format!("optim.{kind}.{}", p.name))?;
                    let v = records.value(id);
                    (v.shape() == p.value.shape()).then(|| v.clone())
                })
                .collect()
        };
        Some(Self {
            m: fetch("m")?,
            v: fetch("v")?,
            t,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    /// Draw counts per [`TaskKind::NAMED`] entry.
    pub task_counts: [usize; 5],
}

impl StepStats {
    /// `step,loss,task_counts` log line, counts joined by `:`.
    pub fn log_line(&self) -> String {
        let counts: Vec<String> = self.task_counts.iter().map(|c| c.to_string()).collect();
        format!("{},{:.6},{}", self.step, self.loss, counts.join(":"))
    }
}

/// Per-step randomness derived from `(seed, step)`, so a resumed run draws
/// the same batches and noise as an uninterrupted one.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

pub struct Trainer<T> {
    pub model: OmniDiT<T>,
    pub cfg: TrainConfig,
    pub adam: Adam<T>,
    pub step: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: OmniDiT<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(model.params());
        Ok(Self {
            model,
            cfg,
            adam,
            step: 0,
        })
    }

    pub fn resume(model: OmniDiT<T>, cfg: TrainConfig, adam: Adam<T>, step: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            model,
            cfg,
            adam,
            step,
        })
    }

    /// One optimizer step on a batch drawn (with replacement) from `data`.
    pub fn train_step(&mut self, data: &[Example<T>]) -> Result<StepStats> {
        if data.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let mut rng = step_rng(self.cfg.seed, self.step);
        let batch: Vec<&Example<T>> = (0..self.cfg.batch_size)
            .map(|_| &data[rng.random_range(0..data.len())])
            .collect();
        let mut g = Graph::new();
        let (loss, draws) = batch_loss(&self.model, &mut g, &batch, &self.cfg, &mut rng)?;
        let value = g.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(TrainError::NonFinite {
                step: self.step,
                loss: value,
            });
        }
        let params = self.model.params_mut();
        params.zero_grad();
        g.backward_into(loss, params)?;
        drop(g);
        let grad_norm = self.adam.update(params, &self.cfg);
        let mut task_counts = [0; 5];
        for d in &draws {
            if let Some(i) = d.task.named_index() {
                task_counts[i] += 1;
            }
        }
        let stats = StepStats {
            step: self.step,
            loss: value,
            grad_norm,
            task_counts,
        };
        self.step += 1;
        Ok(stats)
    }
}
