//! Adaptive modality control: which modalities are generated and which are
//! held clean as conditions, and how each role enters the network.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::modality::Modality;
use crate::tensor::{Graph, Result as TResult, Scalar, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Generation,
    Conditioning,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ControlError {
    #[error("role assignment has no generation modality")]
    NoGeneration,
    #[error("invalid task mixture: {0}")]
    Mixture(String),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Role per modality, indexed by [`Modality::index`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RoleAssignment([Role; 4]);

impl RoleAssignment {
    pub fn new(roles: [Role; 4]) -> Result<Self, ControlError> {
        if roles.iter().all(|&r| r == Role::Conditioning) {
            return Err(ControlError::NoGeneration);
        }
        Ok(Self(roles))
    }

    pub fn role(&self, m: Modality) -> Role {
        self.0[m.index()]
    }

    pub fn roles(&self) -> [Role; 4] {
        self.0
    }

    pub fn conditioning(&self) -> impl Iterator<Item = Modality> + '_ {
        Modality::ALL
            .into_iter()
            .filter(|&m| self.role(m) == Role::Conditioning)
    }

    pub fn generation(&self) -> impl Iterator<Item = Modality> + '_ {
        Modality::ALL
            .into_iter()
            .filter(|&m| self.role(m) == Role::Generation)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    T2V,
    CondRgb,
    CondDepth,
    CondSeg,
    CondEdges,
    Custom(RoleAssignment),
}

impl TaskKind {
    /// The five named tasks in mixture order.
    pub const NAMED: [TaskKind; 5] = [
        TaskKind::T2V,
        TaskKind::CondRgb,
        TaskKind::CondDepth,
        TaskKind::CondSeg,
        TaskKind::CondEdges,
    ];

    pub fn conditioned_on(m: Modality) -> TaskKind {
        match m {
            Modality::Rgb => TaskKind::CondRgb,
            Modality::Depth => TaskKind::CondDepth,
            Modality::Seg => TaskKind::CondSeg,
            Modality::Edges => TaskKind::CondEdges,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::T2V => "t2v",
            TaskKind::CondRgb => "rgb",
            TaskKind::CondDepth => "depth",
            TaskKind::CondSeg => "seg",
            TaskKind::CondEdges => "edges",
            TaskKind::Custom(_) => "custom",
        }
    }

    /// Position in [`TaskKind::NAMED`], `None` for custom tasks.
    pub fn named_index(&self) -> Option<usize> {
        TaskKind::NAMED.iter().position(|t| t == self)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = ControlError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::NAMED
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| ControlError::UnknownTask(s.to_string()))
    }
}

pub fn assign_roles(task: TaskKind) -> RoleAssignment {
    use Role::*;
    let cond = |m: Modality| {
        let mut r = [Generation; 4];
        r[m.index()] = Conditioning;
        RoleAssignment(r)
    };
    match task {
        TaskKind::T2V => RoleAssignment([Generation; 4]),
        TaskKind::CondRgb => cond(Modality::Rgb),
        TaskKind::CondDepth => cond(Modality::Depth),
        TaskKind::CondSeg => cond(Modality::Seg),
        TaskKind::CondEdges => cond(Modality::Edges),
        TaskKind::Custom(r) => r,
    }
}

/// Noise blend for generation modalities, `(1 - t)·eps + t·x`; conditioning
/// modalities pass through untouched.
pub fn blend<T: Scalar>(x: &Tensor<T>, eps: &Tensor<T>, t: T, role: Role) -> Result<Tensor<T>, ControlError> {
    if x.shape() != eps.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "blend",
            lhs: x.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        }
        .into());
    }
    if !(T::zero()..=T::one()).contains(&t) {
        return Err(ControlError::Mixture(format!("t = {t:?} outside [0, 1]")));
    }
    Ok(match role {
        Role::Conditioning => x.clone(),
        Role::Generation => {
            let s = T::one() - t;
            let data = x
                .data()
                .iter()
                .zip(eps.data())
                .map(|(&xv, &ev)| s * ev + t * xv)
                .collect();
            Tensor::new(x.shape(), data).expect("same shape")
        }
    })
}

/// Learned role vectors: one for generation, one for conditioning, shared
/// by all modalities.
#[derive(Clone, Copy, Debug)]
pub struct RoleEmbeddings {
    pub generation: Var,
    pub conditioning: Var,
}

/// Adds the role's embedding over every latent cell of `x` (shape
/// `(..., C)`). With `enabled == false` returns `x` itself.
pub fn apply_role_embedding<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    role: Role,
    emb: &RoleEmbeddings,
    enabled: bool,
) -> TResult<Var> {
    if !enabled {
        return Ok(x);
    }
    let e = match role {
        Role::Generation => emb.generation,
        Role::Conditioning => emb.conditioning,
    };
    let c = *g.shape(x).last().unwrap();
    if g.shape(e) != [c] {
        return Err(TensorError::ShapeMismatch {
            op: "role_embedding",
            lhs: g.shape(x).to_vec(),
            rhs: g.shape(e).to_vec(),
        });
    }
    g.add(x, e)
}

/// 1 for generation modalities, 0 for conditioning ones.
pub fn loss_mask(roles: &RoleAssignment) -> [f64; 4] {
    roles
        .roles()
        .map(|r| if r == Role::Generation { 1.0 } else { 0.0 })
}

/// Categorical distribution over [`TaskKind::NAMED`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskMixture([f64; 5]);

impl TaskMixture {
    pub const UNIFORM: TaskMixture = TaskMixture([0.2; 5]);
    pub const T2V_ONLY: TaskMixture = TaskMixture([1.0, 0.0, 0.0, 0.0, 0.0]);

    pub fn new(p: [f64; 5]) -> Result<Self, ControlError> {
        if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
            return Err(ControlError::Mixture(format!("negative or non-finite entry in {p:?}")));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(ControlError::Mixture(format!("probabilities sum to {s}")));
        }
        Ok(Self(p))
    }

    pub fn probs(&self) -> [f64; 5] {
        self.0
    }
}

impl FromStr for TaskMixture {
    type Err = ControlError;

    /// `p_t2v,p_rgb,p_depth,p_seg,p_edges`
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| ControlError::Mixture(format!("{s:?}: {e}")))?;
        let arr: [f64; 5] = parts
            .try_into()
            .map_err(|v: Vec<f64>| ControlError::Mixture(format!("expected 5 entries, got {}", v.len())))?;
        TaskMixture::new(arr)
    }
}

impl fmt::Display for TaskMixture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|p| p.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

/// One categorical draw; consumes exactly one uniform from `rng`.
pub fn sample_task(rng: &mut impl Rng, mixture: &TaskMixture) -> TaskKind {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in mixture.0.iter().enumerate() {
        if p > 0.0 {
            last = i;
            acc += p;
            if u < acc {
                return TaskKind::NAMED[i];
            }
        }
    }
    TaskKind::NAMED[last]
}
