//! Representation alignment: projection heads into a shared latent space and
//! the scaled cosine error between the two projections.
//!
//! Input tokens go through a single linear layer `q`, encoder outputs through
//! a two-layer MLP `g` (Linear → ReLU → Linear). The per-node residual
//! `(1 − cos(q(x_i), g(h_i)))^γ` is both the training loss (averaged over all
//! nodes) and the patch anomaly score.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{dot, relu, xavier_uniform_init, DenseMatrix, Real};

/// Norms below this are treated as dead activations.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Scaled cosine error with the configured γ.
    Sce,
    /// Mean squared difference over latent dimensions.
    Mse,
    /// Plain cosine error, i.e. SCE with γ = 1.
    Cosine,
}

impl Objective {
    pub fn code(self) -> u8 {
        match self {
            Objective::Sce => 0,
            Objective::Mse => 1,
            Objective::Cosine => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Objective::Sce),
            1 => Some(Objective::Mse),
            2 => Some(Objective::Cosine),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Objective::Sce => "sce",
            Objective::Mse => "mse",
            Objective::Cosine => "cosine",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sce" => Ok(Objective::Sce),
            "mse" => Ok(Objective::Mse),
            "cosine" | "cos" => Ok(Objective::Cosine),
            other => Err(Error::config(format!("unknown objective '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub latent_dim: usize,
    pub gamma: f64,
    pub g_hidden_dim: usize,
    pub objective: Objective,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            latent_dim: 256,
            gamma: 2.0,
            g_hidden_dim: 256,
            objective: Objective::Sce,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 1 || self.g_hidden_dim < 1 {
            return Err(Error::config(
                "latent and hidden head widths must be positive",
            ));
        }
        if !(self.gamma >= 1.0 && self.gamma.is_finite()) {
            return Err(Error::config(format!(
                "gamma must be >= 1, got {}",
                self.gamma
            )));
        }
        Ok(())
    }

    /// The exponent actually applied to the cosine error.
    pub fn effective_gamma(&self) -> f64 {
        match self.objective {
            Objective::Cosine => 1.0,
            _ => self.gamma,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHeads<T> {
    /// `f × D`.
    pub q_weight: DenseMatrix<T>,
    pub q_bias: Vec<T>,
    /// `hidden × F`.
    pub g_w1: DenseMatrix<T>,
    pub g_b1: Vec<T>,
    /// `f × hidden`.
    pub g_w2: DenseMatrix<T>,
    pub g_b2: Vec<T>,
}

impl<T: Real> ProjectionHeads<T> {
    /// Xavier weights, zero biases.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        encoded_dim: usize,
        cfg: &AlignConfig,
        rng: &mut R,
    ) -> Self {
        let f = cfg.latent_dim;
        let hidden = cfg.g_hidden_dim;
        Self {
            q_weight: xavier_uniform_init(f, input_dim, rng),
            q_bias: vec![T::zero(); f],
            g_w1: xavier_uniform_init(hidden, encoded_dim, rng),
            g_b1: vec![T::zero(); hidden],
            g_w2: xavier_uniform_init(f, hidden, rng),
            g_b2: vec![T::zero(); f],
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &DenseMatrix<T>| DenseMatrix::zeros(m.rows(), m.cols());
        Self {
            q_weight: z(&self.q_weight),
            q_bias: vec![T::zero(); self.q_bias.len()],
            g_w1: z(&self.g_w1),
            g_b1: vec![T::zero(); self.g_b1.len()],
            g_w2: z(&self.g_w2),
            g_b2: vec![T::zero(); self.g_b2.len()],
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.q_weight.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.q_weight.rows();
        let ok = self.q_bias.len() == f
            && self.g_w2.rows() == f
            && self.g_b2.len() == f
            && self.g_b1.len() == self.g_w1.rows()
            && self.g_w2.cols() == self.g_w1.rows();
        if !ok {
            return Err(Error::dim("projection head shapes are inconsistent"));
        }
        Ok(())
    }
}

/// `z = q_weight · x + q_bias`.
pub fn project_input<T: Real>(x: &[T], heads: &ProjectionHeads<T>) -> Result<Vec<T>> {
    let mut z = crate::nn::linear(x, &heads.q_weight)?;
    for (v, &b) in z.iter_mut().zip(&heads.q_bias) {
        *v += b;
    }
    Ok(z)
}

/// `z̃ = g_w2 · ReLU(g_w1 · h + g_b1) + g_b2`.
pub fn project_encoded<T: Real>(h: &[T], heads: &ProjectionHeads<T>) -> Result<Vec<T>> {
    let mut hidden = crate::nn::linear(h, &heads.g_w1)?;
    for (v, &b) in hidden.iter_mut().zip(&heads.g_b1) {
        *v = relu(*v + b);
    }
    let mut z = crate::nn::linear(&hidden, &heads.g_w2)?;
    for (v, &b) in z.iter_mut().zip(&heads.g_b2) {
        *v += b;
    }
    Ok(z)
}

/// Row-wise [`project_input`] over an `N × D` matrix.
pub fn project_inputs<T: Real>(
    x: &DenseMatrix<T>,
    heads: &ProjectionHeads<T>,
) -> Result<DenseMatrix<T>> {
    let mut z = x.matmul_transposed(&heads.q_weight)?;
    z.add_row_vector(&heads.q_bias);
    Ok(z)
}

/// Intermediates of the `g` head kept for backward.
#[derive(Debug, Clone)]
pub struct EncodedProjection<T> {
    pub hidden_pre: DenseMatrix<T>,
    pub hidden: DenseMatrix<T>,
    pub latent: DenseMatrix<T>,
}

/// Row-wise [`project_encoded`] over an `N × F` matrix.
pub fn project_encoded_rows<T: Real>(
    h: &DenseMatrix<T>,
    heads: &ProjectionHeads<T>,
) -> Result<EncodedProjection<T>> {
    let mut hidden_pre = h.matmul_transposed(&heads.g_w1)?;
    hidden_pre.add_row_vector(&heads.g_b1);
    let hidden = hidden_pre.map(relu);
    let mut latent = hidden.matmul_transposed(&heads.g_w2)?;
    latent.add_row_vector(&heads.g_b2);
    Ok(EncodedProjection {
        hidden_pre,
        hidden,
        latent,
    })
}

/// Scaled cosine error of one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeSce<T> {
    pub value: T,
    pub cosine: T,
    /// Set when either norm fell below [`NORM_FLOOR`]; the cosine is then taken as 0.
    pub degenerate: bool,
}

pub fn sce_per_node<T: Real>(z: &[T], z_tilde: &[T], gamma: f64) -> NodeSce<T> {
    debug_assert_eq!(z.len(), z_tilde.len());
    let cross = dot(z, z_tilde);
    let (nz, nt) = (dot(z, z).sqrt(), dot(z_tilde, z_tilde).sqrt());
    let floor = T::lit(NORM_FLOOR);
    if nz < floor || nt < floor {
        return NodeSce {
            value: T::one(),
            cosine: T::zero(),
            degenerate: true,
        };
    }
    let cosine = (cross / (nz * nt)).max(-T::one()).min(T::one());
    NodeSce {
        value: (T::one() - cosine).powf(T::lit(gamma)),
        cosine,
        degenerate: false,
    }
}

fn check_pair<T: Real>(z: &DenseMatrix<T>, z_tilde: &DenseMatrix<T>) -> Result<()> {
    if z.shape() != z_tilde.shape() || z.rows() == 0 {
        return Err(Error::dim(format!(
            "latent matrices {:?} and {:?} must match and be non-empty",
            z.shape(),
            z_tilde.shape()
        )));
    }
    Ok(())
}

/// Mean of [`sce_per_node`] over all rows.
pub fn sce_loss<T: Real>(z: &DenseMatrix<T>, z_tilde: &DenseMatrix<T>, gamma: f64) -> Result<T> {
    check_pair(z, z_tilde)?;
    let total = (0..z.rows())
        .map(|i| sce_per_node(z.row(i), z_tilde.row(i), gamma).value)
        .fold(T::zero(), |a, b| a + b);
    Ok(total / T::lit(z.rows() as f64))
}

/// Per-node residual under the chosen objective; this is the patch score.
pub fn node_residual<T: Real>(z: &[T], z_tilde: &[T], cfg: &AlignConfig) -> T {
    match cfg.objective {
        Objective::Mse => {
            let sq = z
                .iter()
                .zip(z_tilde)
                .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
            sq / T::lit(z.len() as f64)
        }
        _ => sce_per_node(z, z_tilde, cfg.effective_gamma()).value,
    }
}

/// Loss and its gradients with respect to both latent matrices.
#[derive(Debug, Clone)]
pub struct LossGrad<T> {
    pub loss: T,
    pub grad_z: DenseMatrix<T>,
    pub grad_z_tilde: DenseMatrix<T>,
    pub degenerate_nodes: usize,
}

pub fn objective_loss_grad<T: Real>(
    z: &DenseMatrix<T>,
    z_tilde: &DenseMatrix<T>,
    cfg: &AlignConfig,
) -> Result<LossGrad<T>> {
    check_pair(z, z_tilde)?;
    let (n, f) = z.shape();
    let inv_n = T::one() / T::lit(n as f64);
    let mut grad_z = DenseMatrix::zeros(n, f);
    let mut grad_z_tilde = DenseMatrix::zeros(n, f);
    let mut loss = T::zero();
    let mut degenerate_nodes = 0;

    match cfg.objective {
        Objective::Mse => {
            let scale = T::lit(2.0 / f as f64) * inv_n;
            for i in 0..n {
                let mut sq = T::zero();
                for k in 0..f {
                    let d = z.get(i, k) - z_tilde.get(i, k);
                    sq += d * d;
                    grad_z.set(i, k, scale * d);
                    grad_z_tilde.set(i, k, -scale * d);
                }
                loss += sq / T::lit(f as f64);
            }
        }
        Objective::Sce | Objective::Cosine => {
            let gamma = cfg.effective_gamma();
            let floor = T::lit(NORM_FLOOR);
            for i in 0..n {
                let (a, b) = (z.row(i), z_tilde.row(i));
                let (mut dot, mut na, mut nb) = (T::zero(), T::zero(), T::zero());
                for (&x, &y) in a.iter().zip(b) {
                    dot += x * y;
                    na += x * x;
                    nb += y * y;
                }
                let (na, nb) = (na.sqrt(), nb.sqrt());
                if na < floor || nb < floor {
                    degenerate_nodes += 1;
                    loss += T::one();
                    continue;
                }
                let cosine = dot / (na * nb);
                let gap = (T::one() - cosine).max(T::zero());
                loss += gap.powf(T::lit(gamma));
                // d/dc (1 - c)^γ = -γ (1 - c)^(γ-1)
                let dc = if gamma == 1.0 {
                    -T::one()
                } else {
                    -T::lit(gamma) * gap.powf(T::lit(gamma - 1.0))
                } * inv_n;
                let inv = T::one() / (na * nb);
                let (ca, cb) = (cosine / (na * na), cosine / (nb * nb));
                for (k, g) in grad_z.row_mut(i).iter_mut().enumerate() {
                    *g = dc * (b[k] * inv - ca * a[k]);
                }
                for (k, g) in grad_z_tilde.row_mut(i).iter_mut().enumerate() {
                    *g = dc * (a[k] * inv - cb * b[k]);
                }
            }
        }
    }
    Ok(LossGrad {
        loss: loss * inv_n,
        grad_z,
        grad_z_tilde,
        degenerate_nodes,
    })
}

/// Backward through both heads: returns the head gradients and `d H`.
pub fn heads_backward<T: Real>(
    inputs: &DenseMatrix<T>,
    encoded: &DenseMatrix<T>,
    projection: &EncodedProjection<T>,
    heads: &ProjectionHeads<T>,
    grad_z: &DenseMatrix<T>,
    grad_z_tilde: &DenseMatrix<T>,
) -> Result<(ProjectionHeads<T>, DenseMatrix<T>)> {
    let q_weight = grad_z.transposed_matmul(inputs)?;
    let q_bias = grad_z.sum_rows();

    let g_w2 = grad_z_tilde.transposed_matmul(&projection.hidden)?;
    let g_b2 = grad_z_tilde.sum_rows();
    let mut grad_hidden = grad_z_tilde.matmul(&heads.g_w2)?;
    for (g, &p) in grad_hidden
        .data_mut()
        .iter_mut()
        .zip(projection.hidden_pre.data())
    {
        if p <= T::zero() {
            *g = T::zero();
        }
    }
    let g_w1 = grad_hidden.transposed_matmul(encoded)?;
    let g_b1 = grad_hidden.sum_rows();
    let grad_encoded = grad_hidden.matmul(&heads.g_w1)?;
    Ok((
        ProjectionHeads {
            q_weight,
            q_bias,
            g_w1,
            g_b1,
            g_w2,
            g_b2,
        },
        grad_encoded,
    ))
}
