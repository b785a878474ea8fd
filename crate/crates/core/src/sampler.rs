//! Deterministic Euler sampling on recovered clean latents.

use rand::Rng;

use crate::control::{assign_roles, ControlError, Role, RoleAssignment, TaskKind};
use crate::model::{ModelError, OmniDiT};
use crate::tensor::{Graph, Scalar, Tensor, TensorError};
use crate::train::standard_normal;
use crate::Modality;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SampleError {
    #[error("{modality} is {role:?} but a condition was {state}")]
    Condition {
        modality: Modality,
        role: Role,
        state: &'static str,
    },
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, SampleError>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub t_floor: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            t_floor: 0.02,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(SampleError::Config("steps must be at least 1".into()));
        }
        if !(self.t_floor > 0.0 && self.t_floor < 1.0) {
            return Err(SampleError::Config("t_floor must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// `t_k = t_start + (1 - t_start)·k/N`, k = 0..=N.
    pub fn grid(&self, t_start: f64) -> Vec<f64> {
        let n = self.steps;
        (0..=n)
            .map(|k| {
                if k == n {
                    1.0
                } else {
                    t_start + (1.0 - t_start) * k as f64 / n as f64
                }
            })
            .collect()
    }
}

/// Anything that maps blended latents to per-modality noise predictions.
pub trait Denoiser<T> {
    fn denoise(&self, x: &[Tensor<T>], roles: &RoleAssignment, t: f64, caption: &[u8]) -> Result<Vec<Tensor<T>>>;
}

impl<T: Scalar> Denoiser<T> for OmniDiT<T> {
    fn denoise(&self, x: &[Tensor<T>], roles: &RoleAssignment, t: f64, caption: &[u8]) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::inference();
        let outs = self.predict(&mut g, x, roles, t, caption)?;
        Ok(outs.into_iter().map(|v| g.value(v).clone()).collect())
    }
}

/// `x̂0 = (x_t − (1 − t)·ε̂) / max(t, t_floor)`.
pub fn recover_x0<T: Scalar>(x_t: &Tensor<T>, eps_hat: &Tensor<T>, t: f64, t_floor: f64) -> Result<Tensor<T>> {
    if x_t.shape() != eps_hat.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "recover_x0",
            lhs: x_t.shape().to_vec(),
            rhs: eps_hat.shape().to_vec(),
        }
        .into());
    }
    let s = T::of(1.0 - t);
    let d = T::of(t.max(t_floor));
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&x, &e)| (x - s * e) / d)
        .collect();
    Ok(Tensor::new(x_t.shape(), data)?)
}

fn check_conditions<T>(roles: &RoleAssignment, cond: &[Option<Tensor<T>>]) -> Result<()> {
    if cond.len() != Modality::COUNT {
        return Err(SampleError::Config(format!(
            "expected {} condition slots, got {}",
            Modality::COUNT,
            cond.len()
        )));
    }
    for (&m, c) in Modality::ALL.iter().zip(cond) {
        let role = roles.role(m);
        match (role, c.is_some()) {
            (Role::Conditioning, false) => {
                return Err(SampleError::Condition {
                    modality: m,
                    role,
                    state: "missing",
                })
            }
            (Role::Generation, true) => {
                return Err(SampleError::Condition {
                    modality: m,
                    role,
                    state: "supplied",
                })
            }
            _ => {}
        }
    }
    Ok(())
}

/// Generates every generation modality of `task` from pure noise at t = 0,
/// holding `cond` (one slot per modality, `Some` exactly for conditioning
/// modalities) clean throughout.
pub fn sample<T: Scalar, D: Denoiser<T>>(
    denoiser: &D,
    task: TaskKind,
    cond: &[Option<Tensor<T>>],
    latent_shape: &[usize],
    caption: &[u8],
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Tensor<T>>> {
    let roles = assign_roles(task);
    check_conditions(&roles, cond)?;
    let init = Modality::ALL
        .iter()
        .map(|&m| match roles.role(m) {
            Role::Generation => standard_normal(rng, latent_shape),
            Role::Conditioning => Tensor::zeros(latent_shape),
        })
        .collect();
    sample_from(denoiser, &roles, cond, init, 0.0, caption, cfg)
}

/// Integrates from `t_start` to 1 starting at state `init` for the
/// generation modalities.
pub fn sample_from<T: Scalar, D: Denoiser<T>>(
    denoiser: &D,
    roles: &RoleAssignment,
    cond: &[Option<Tensor<T>>],
    init: Vec<Tensor<T>>,
    t_start: f64,
    caption: &[u8],
    cfg: &SamplerConfig,
) -> Result<Vec<Tensor<T>>> {
    cfg.validate()?;
    check_conditions(roles, cond)?;
    if !(0.0..1.0).contains(&t_start) {
        return Err(SampleError::Config(format!("t_start {t_start} outside [0, 1)")));
    }
    let mut state = init;
    if state.len() != Modality::COUNT {
        return Err(SampleError::Config("initial state needs one latent per modality".into()));
    }
    let grid = cfg.grid(t_start);
    for k in 0..cfg.steps {
        for (s, c) in state.iter_mut().zip(cond) {
            if let Some(c) = c {
                *s = c.clone();
            }
        }
        let (t, dt) = (grid[k], grid[k + 1] - grid[k]);
        let eps_hat = denoiser.denoise(&state, roles, t, caption)?;
        for (i, &m) in Modality::ALL.iter().enumerate() {
            if roles.role(m) == Role::Conditioning {
                continue;
            }
            let x0 = recover_x0(&state[i], &eps_hat[i], t, cfg.t_floor)?;
            let step = T::of(dt);
            for ((s, &x), &e) in state[i].data_mut().iter_mut().zip(x0.data()).zip(eps_hat[i].data()) {
                *s += step * (x - e);
            }
        }
    }
    for (s, c) in state.iter_mut().zip(cond) {
        if let Some(c) = c {
            *s = c.clone();
        }
    }
    Ok(state)
}
