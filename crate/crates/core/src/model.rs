//! Multi-modal diffusion transformer.
//!
//! Per-modality latents are concatenated along channels, embedded per latent
//! cell, prefixed with caption tokens and run through a trunk of attention
//! blocks with timestep modulation. Output heads map trunk features back to
//! one noise prediction per modality.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::control::{apply_role_embedding, RoleAssignment, RoleEmbeddings};
use crate::modality::Modality;
use crate::tensor::{sinusoidal, Graph, ParamId, ParamStore, Scalar, Tensor, TensorError, Var};
use crate::vocab;

const INIT_STD: f64 = 0.02;
const MLP_RATIO: usize = 4;
/// Scales `t` in `[0, 1]` before the sinusoidal time embedding.
const TIME_SCALE: f64 = 1000.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("caption has {got} tokens, capacity is {max}")]
    TokenOverflow { got: usize, max: usize },
    #[error("token id {0} outside the vocabulary")]
    BadToken(u8),
    #[error("timestep {0} outside [0, 1]")]
    TimeRange(f64),
    #[error("invalid model config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub model_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Latent channels per modality.
    pub latent_channels: usize,
    /// Latent grid `(F, H, W)`.
    pub grid: [usize; 3],
    pub caption_len: usize,
    pub vocab_size: usize,
    pub use_modality_embedding: bool,
    pub use_msph: bool,
}

impl ModelConfig {
    /// Desk-scale default: 32x32x8 video through a (4,4,2) codec.
    pub fn toy() -> Self {
        Self {
            model_dim: 256,
            depth: 4,
            heads: 4,
            latent_channels: 96,
            grid: [4, 8, 8],
            caption_len: 9,
            vocab_size: vocab::SIZE,
            use_modality_embedding: true,
            use_msph: true,
        }
    }

    /// Small enough for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            model_dim: 16,
            depth: 1,
            heads: 2,
            latent_channels: 12,
            grid: [2, 2, 2],
            caption_len: 3,
            vocab_size: vocab::SIZE,
            use_modality_embedding: true,
            use_msph: true,
        }
    }

    pub fn modalities(&self) -> usize {
        Modality::COUNT
    }

    pub fn cells(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn latent_shape(&self) -> [usize; 4] {
        let [f, h, w] = self.grid;
        [f, h, w, self.latent_channels]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.model_dim == 0 || self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            ));
        }
        if !self.model_dim.is_multiple_of(2) {
            return bad(format!("model_dim {} must be even", self.model_dim));
        }
        if self.latent_channels == 0 || self.grid.contains(&0) || self.caption_len == 0 {
            return bad("zero-sized latent grid, channels or caption".into());
        }
        if self.vocab_size != vocab::SIZE {
            return bad(format!("vocab_size must be {}", vocab::SIZE));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.model_dim;
        let c = self.latent_channels;
        let m = self.modalities();
        let linear = |i: usize, o: usize| i * o + o;
        let block = 2 * 2 * d
            + linear(d, 3 * d)
            + linear(d, d)
            + linear(d, MLP_RATIO * d)
            + linear(MLP_RATIO * d, d)
            + linear(d, 6 * d);
        let heads = if self.use_msph {
            m * linear(d, c)
        } else {
            linear(d, m * c)
        };
        2 * c
            + linear(m * c, d)
            + self.vocab_size * d
            + 2 * linear(d, d)
            + self.depth * block
            + 2 * d
            + linear(d, 2 * d)
            + heads
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: Norm,
    qkv: Linear,
    out: Linear,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
    ada: Linear,
}

#[derive(Clone, Debug)]
enum Heads {
    PerModality(Vec<Linear>),
    Shared(Linear),
}

#[derive(Clone, Debug)]
struct Layout {
    role_generation: ParamId,
    role_conditioning: ParamId,
    token_embed: Linear,
    caption_table: ParamId,
    time_fc1: Linear,
    time_fc2: Linear,
    blocks: Vec<Block>,
    final_ln: Norm,
    final_ada: Linear,
    heads: Heads,
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

struct Builder<'a, T> {
    store: ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    // when absent, every tensor is zero-filled (used to allocate for loading)
    random: bool,
}

impl<T: Scalar> Builder<'_, T> {
    fn tensor(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let data: Vec<T> = match init {
            Init::Normal if self.random => (0..n).map(|_| T::of(normal.sample(self.rng))).collect(),
            Init::Ones => vec![T::one(); n],
            _ => vec![T::zero(); n],
        };
        self.store
            .insert(name, Tensor::new(shape, data).expect("positive extents"))
            .expect("unique names")
    }

    fn linear(&mut self, name: &str, i: usize, o: usize, zero: bool) -> Linear {
        let init = if zero { Init::Zeros } else { Init::Normal };
        Linear {
            weight: self.tensor(format!("{name}.weight"), &[i, o], init),
            bias: self.tensor(format!("{name}.bias"), &[o], Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gamma: self.tensor(format!("{name}.gamma"), &[d], Init::Ones),
            beta: self.tensor(format!("{name}.beta"), &[d], Init::Zeros),
        }
    }
}

fn build_layout<T: Scalar>(cfg: &ModelConfig, rng: &mut ChaCha8Rng, random: bool) -> (ParamStore<T>, Layout) {
    let d = cfg.model_dim;
    let c = cfg.latent_channels;
    let m = cfg.modalities();
    let mut b = Builder {
        store: ParamStore::new(),
        rng,
        random,
    };
    let role_generation = b.tensor("role_embedding.generation".into(), &[c], Init::Normal);
    let role_conditioning = b.tensor("role_embedding.conditioning".into(), &[c], Init::Normal);
    let token_embed = b.linear("token_embed", m * c, d, false);
    let caption_table = b.tensor("caption_table".into(), &[cfg.vocab_size, d], Init::Normal);
    let time_fc1 = b.linear("time_mlp.fc1", d, d, false);
    let time_fc2 = b.linear("time_mlp.fc2", d, d, false);
    let blocks = (0..cfg.depth)
        .map(|i| {
            let p = format!("blocks.{i}");
            Block {
                ln1: b.norm(&format!("{p}.ln1"), d),
                qkv: b.linear(&format!("{p}.attn.qkv"), d, 3 * d, false),
                out: b.linear(&format!("{p}.attn.out"), d, d, false),
                ln2: b.norm(&format!("{p}.ln2"), d),
                fc1: b.linear(&format!("{p}.mlp.fc1"), d, MLP_RATIO * d, false),
                fc2: b.linear(&format!("{p}.mlp.fc2"), MLP_RATIO * d, d, false),
                ada: b.linear(&format!("{p}.modulation"), d, 6 * d, false),
            }
        })
        .collect();
    let final_ln = b.norm("final.ln", d);
    let final_ada = b.linear("final.modulation", d, 2 * d, false);
    let heads = if cfg.use_msph {
        Heads::PerModality(
            Modality::ALL
                .iter()
                .map(|md| b.linear(&format!("heads.{}", md.name()), d, c, true))
                .collect(),
        )
    } else {
        Heads::Shared(b.linear("head", d, m * c, true))
    };
    (
        b.store,
        Layout {
            role_generation,
            role_conditioning,
            token_embed,
            caption_table,
            time_fc1,
            time_fc2,
            blocks,
            final_ln,
            final_ada,
            heads,
        },
    )
}

/// The denoising network and its parameters.
#[derive(Clone, Debug)]
pub struct OmniDiT<T> {
    cfg: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
    positions: Tensor<T>,
}

fn positional_table<T: Scalar>(cfg: &ModelConfig) -> Tensor<T> {
    // caption slots first, at positions N..N+L; video cells at 0..N
    let n = cfg.cells();
    let mut data = Vec::with_capacity((n + cfg.caption_len) * cfg.model_dim);
    for slot in 0..cfg.caption_len {
        data.extend(sinusoidal::<T>((n + slot) as f64, cfg.model_dim));
    }
    for cell in 0..n {
        data.extend(sinusoidal::<T>(cell as f64, cfg.model_dim));
    }
    Tensor::new(&[cfg.caption_len + n, cfg.model_dim], data).expect("sized above")
}

impl<T: Scalar> OmniDiT<T> {
    /// Deterministic initialization: scaled normal (std 0.02) linear weights,
    /// zero biases, zero output heads, unit layer-norm scales.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, layout) = build_layout(&cfg, &mut rng, true);
        let positions = positional_table(&cfg);
        Ok(Self {
            cfg,
            params,
            layout,
            positions,
        })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(cfg: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (template, layout) = build_layout::<T>(&cfg, &mut rng, false);
        if template.len() != params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameters, got {}",
                template.len(),
                params.len()
            )));
        }
        for (want, got) in template.iter().zip(params.iter()) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(ModelError::Config(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    got.name,
                    got.value.shape(),
                    want.name,
                    want.value.shape()
                )));
            }
        }
        let positions = positional_table(&cfg);
        Ok(Self {
            cfg,
            params,
            layout,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    /// Parameter ids of the output head(s) serving modality `m`. With a
    /// shared head this is the shared head itself.
    pub fn head_params(&self, m: Modality) -> Vec<ParamId> {
        match &self.layout.heads {
            Heads::PerModality(hs) => vec![hs[m.index()].weight, hs[m.index()].bias],
            Heads::Shared(h) => vec![h.weight, h.bias],
        }
    }

    pub fn role_embedding_params(&self) -> [ParamId; 2] {
        [self.layout.role_generation, self.layout.role_conditioning]
    }

    pub fn role_embeddings(&self, g: &mut Graph<T>) -> RoleEmbeddings {
        RoleEmbeddings {
            generation: g.param(&self.params, self.layout.role_generation),
            conditioning: g.param(&self.params, self.layout.role_conditioning),
        }
    }

    /// Concatenates per-modality latents `(F, H, W, C)` along channels in
    /// rgb, depth, seg, edges order.
    pub fn build_input(&self, g: &mut Graph<T>, latents: &[Var]) -> Result<Var> {
        if latents.len() != self.cfg.modalities() {
            return Err(ModelError::Config(format!(
                "expected {} modality latents, got {}",
                self.cfg.modalities(),
                latents.len()
            )));
        }
        let want = self.cfg.latent_shape();
        for &l in latents {
            if g.shape(l) != want {
                return Err(TensorError::ShapeMismatch {
                    op: "build_input",
                    lhs: want.to_vec(),
                    rhs: g.shape(l).to_vec(),
                }
                .into());
            }
        }
        Ok(g.concat(latents, 3)?)
    }

    /// Role embeddings (when enabled) added to each already-blended latent,
    /// then fused.
    pub fn prepare_input(
        &self,
        g: &mut Graph<T>,
        blended: &[Tensor<T>],
        roles: &RoleAssignment,
    ) -> Result<Var> {
        let emb = self.role_embeddings(g);
        let mut vars = Vec::with_capacity(blended.len());
        for (x, &m) in blended.iter().zip(Modality::ALL.iter()) {
            let v = g.constant(x.clone());
            vars.push(apply_role_embedding(
                g,
                v,
                roles.role(m),
                &emb,
                self.cfg.use_modality_embedding,
            )?);
        }
        self.build_input(g, &vars)
    }

    fn linear(&self, g: &mut Graph<T>, x: Var, l: Linear) -> Result<Var> {
        let w = g.param(&self.params, l.weight);
        let b = g.param(&self.params, l.bias);
        let y = g.matmul(x, w)?;
        Ok(g.add(y, b)?)
    }

    fn norm(&self, g: &mut Graph<T>, x: Var, n: Norm) -> Result<Var> {
        let gamma = g.param(&self.params, n.gamma);
        let beta = g.param(&self.params, n.beta);
        Ok(g.layer_norm(x, gamma, beta)?)
    }

    /// `x * (1 + scale) + shift`, modulation vectors of shape `(D)`.
    fn modulate(g: &mut Graph<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let s = g.add_scalar(scale, T::one());
        let y = g.mul(x, s)?;
        Ok(g.add(y, shift)?)
    }

    fn attention(&self, g: &mut Graph<T>, x: Var, blk: &Block) -> Result<Var> {
        let heads = self.cfg.heads;
        let dh = self.cfg.model_dim / heads;
        let qkv = self.linear(g, x, blk.qkv)?;
        let parts = g.split(qkv, 1, 3 * heads)?;
        let inv = T::of(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (q, k, v) = (parts[h], parts[heads + h], parts[2 * heads + h]);
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, inv);
            let p = g.softmax(scores);
            outs.push(g.matmul(p, v)?);
        }
        let o = g.concat(&outs, 1)?;
        self.linear(g, o, blk.out)
    }

    /// Noise predictions, one `(F, H, W, C)` tensor per modality.
    pub fn forward(&self, g: &mut Graph<T>, fused: Var, t: f64, caption: &[u8]) -> Result<Vec<Var>> {
        let cfg = &self.cfg;
        if !(0.0..=1.0).contains(&t) {
            return Err(ModelError::TimeRange(t));
        }
        if caption.len() > cfg.caption_len {
            return Err(ModelError::TokenOverflow {
                got: caption.len(),
                max: cfg.caption_len,
            });
        }
        if let Some(&bad) = caption.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(ModelError::BadToken(bad));
        }
        let (d, n, m, c) = (cfg.model_dim, cfg.cells(), cfg.modalities(), cfg.latent_channels);
        let fused_shape = g.shape(fused).to_vec();
        let want = [cfg.grid[0], cfg.grid[1], cfg.grid[2], m * c];
        if fused_shape != want {
            return Err(TensorError::ShapeMismatch {
                op: "forward",
                lhs: want.to_vec(),
                rhs: fused_shape,
            }
            .into());
        }
        let l = &self.layout;

        let cells = g.reshape(fused, &[n, m * c])?;
        let video = self.linear(g, cells, l.token_embed)?;
        let mut ids: Vec<usize> = caption.iter().map(|&t| t as usize).collect();
        ids.resize(cfg.caption_len, vocab::PAD as usize);
        let table = g.param(&self.params, l.caption_table);
        let text = g.gather(table, &ids)?;
        let seq = g.concat(&[text, video], 0)?;
        let pos = g.constant(self.positions.clone());
        let mut x = g.add(seq, pos)?;

        let temb = Tensor::new(&[1, d], sinusoidal::<T>(t * TIME_SCALE, d))?;
        let temb = g.constant(temb);
        let h = self.linear(g, temb, l.time_fc1)?;
        let h = g.gelu(h);
        let cond = self.linear(g, h, l.time_fc2)?;
        let cond = g.gelu(cond);

        for blk in &l.blocks {
            let modv = self.linear(g, cond, blk.ada)?;
            let modv = g.reshape(modv, &[6 * d])?;
            let mp = g.split(modv, 0, 6)?;
            let h = self.norm(g, x, blk.ln1)?;
            let h = Self::modulate(g, h, mp[0], mp[1])?;
            let a = self.attention(g, h, blk)?;
            let a = g.mul(a, mp[2])?;
            x = g.add(x, a)?;
            let h = self.norm(g, x, blk.ln2)?;
            let h = Self::modulate(g, h, mp[3], mp[4])?;
            let h = self.linear(g, h, blk.fc1)?;
            let h = g.gelu(h);
            let h = self.linear(g, h, blk.fc2)?;
            let h = g.mul(h, mp[5])?;
            x = g.add(x, h)?;
        }

        let video = g.slice(x, 0, cfg.caption_len, n)?;
        let modv = self.linear(g, cond, l.final_ada)?;
        let modv = g.reshape(modv, &[2 * d])?;
        let mp = g.split(modv, 0, 2)?;
        let h = self.norm(g, video, l.final_ln)?;
        let h = Self::modulate(g, h, mp[0], mp[1])?;

        let shape = cfg.latent_shape();
        let outs = match &l.heads {
            Heads::PerModality(hs) => hs
                .iter()
                .map(|&hd| {
                    let y = self.linear(g, h, hd)?;
                    Ok(g.reshape(y, &shape)?)
                })
                .collect::<Result<Vec<_>>>()?,
            Heads::Shared(hd) => {
                let y = self.linear(g, h, *hd)?;
                g.split(y, 1, m)?
                    .into_iter()
                    .map(|p| Ok(g.reshape(p, &shape)?))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        Ok(outs)
    }

    /// Blended latents in, noise predictions out.
    pub fn predict(
        &self,
        g: &mut Graph<T>,
        blended: &[Tensor<T>],
        roles: &RoleAssignment,
        t: f64,
        caption: &[u8],
    ) -> Result<Vec<Var>> {
        let fused = self.prepare_input(g, blended, roles)?;
        self.forward(g, fused, t, caption)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{assign_roles, TaskKind};

    fn tiny_inputs(cfg: &ModelConfig, seed: u64) -> Vec<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        (0..4)
            .map(|_| {
                let shape = cfg.latent_shape();
                let n = shape.iter().product();
                Tensor::new(&shape, (0..n).map(|_| normal.sample(&mut rng)).collect()).unwrap()
            })
            .collect()
    }

    #[test]
    fn output_shapes_and_zero_heads() {
        let cfg = ModelConfig::tiny();
        let model = OmniDiT::<f64>::init(cfg.clone(), 1).unwrap();
        let mut g = Graph::inference();
        let roles = assign_roles(TaskKind::T2V);
        let outs = model
            .predict(&mut g, &tiny_inputs(&cfg, 2), &roles, 0.5, &[1, 9, 13])
            .unwrap();
        assert_eq!(outs.len(), 4);
        for o in outs {
            assert_eq!(g.shape(o), cfg.latent_shape());
            assert!(g.value(o).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = OmniDiT::<f32>::init(ModelConfig::tiny(), 5).unwrap();
        let b = OmniDiT::<f32>::init(ModelConfig::tiny(), 5).unwrap();
        assert_eq!(a.params(), b.params());
        for m in Modality::ALL {
            for id in a.head_params(m) {
                assert!(a.params().value(id).data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn rejects_bad_requests() {
        let cfg = ModelConfig::tiny();
        let model = OmniDiT::<f64>::init(cfg.clone(), 1).unwrap();
        let roles = assign_roles(TaskKind::T2V);
        let x = tiny_inputs(&cfg, 0);
        let mut g = Graph::inference();
        assert_eq!(
            model.predict(&mut g, &x, &roles, 0.5, &[1, 2, 3, 4]).unwrap_err(),
            ModelError::TokenOverflow { got: 4, max: 3 }
        );
        assert!(matches!(
            model.predict(&mut g, &x, &roles, 1.5, &[1]),
            Err(ModelError::TimeRange(_))
        ));
        assert!(matches!(
            model.predict(&mut g, &x, &roles, 0.5, &[200]),
            Err(ModelError::BadToken(200))
        ));
        let mut bad = ModelConfig::tiny();
        bad.heads = 3;
        assert!(OmniDiT::<f64>::init(bad, 0).is_err());
    }

    #[test]
    fn param_count_matches_store() {
        for msph in [true, false] {
            let mut cfg = ModelConfig::tiny();
            cfg.use_msph = msph;
            let m = OmniDiT::<f32>::init(cfg.clone(), 0).unwrap();
            assert_eq!(m.params().numel(), cfg.param_count());
        }
    }
}
