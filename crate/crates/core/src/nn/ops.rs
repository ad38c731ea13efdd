use rand::distr::{Distribution, Uniform};
use rand::Rng;

use crate::error::{Error, Result};

use super::{DenseMatrix, Real};

/// Inner product with eight independent partial sums, so the loop vectorizes.
/// The summation order is fixed, so results are reproducible.
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let mut chunks_a = a.chunks_exact(8);
    let mut chunks_b = b.chunks_exact(8);
    for (ca, cb) in (&mut chunks_a).zip(&mut chunks_b) {
        for l in 0..8 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in chunks_a.remainder().iter().zip(chunks_b.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `weight · input` with no bias.
pub fn linear<T: Real>(input: &[T], weight: &DenseMatrix<T>) -> Result<Vec<T>> {
    if input.len() != weight.cols() {
        return Err(Error::dim(format!(
            "linear: input has {} features, weight expects {}",
            input.len(),
            weight.cols()
        )));
    }
    Ok((0..weight.rows())
        .map(|k| dot(weight.row(k), input))
        .collect())
}

/// Gradients of [`linear`] given the upstream gradient: `(d input, d weight)`.
pub fn linear_backward<T: Real>(
    input: &[T],
    weight: &DenseMatrix<T>,
    grad_out: &[T],
) -> Result<(Vec<T>, DenseMatrix<T>)> {
    if input.len() != weight.cols() || grad_out.len() != weight.rows() {
        return Err(Error::dim("linear_backward: shape mismatch"));
    }
    let mut grad_in = vec![T::zero(); input.len()];
    let mut grad_w = DenseMatrix::zeros(weight.rows(), weight.cols());
    for (k, &g) in grad_out.iter().enumerate() {
        for (l, &x) in input.iter().enumerate() {
            grad_in[l] += g * weight.get(k, l);
            grad_w.set(k, l, g * x);
        }
    }
    Ok((grad_in, grad_w))
}

#[inline]
pub fn leaky_relu<T: Real>(x: T, slope: T) -> T {
    if x >= T::zero() {
        x
    } else {
        slope * x
    }
}

#[inline]
pub fn leaky_relu_grad<T: Real>(x: T, slope: T) -> T {
    if x >= T::zero() {
        T::one()
    } else {
        slope
    }
}

/// ELU with unit alpha.
#[inline]
pub fn elu<T: Real>(x: T) -> T {
    if x >= T::zero() {
        x
    } else {
        x.exp_m1()
    }
}

/// ELU derivative expressed through the activation's output: 1 on the
/// positive branch, `exp(x) = out + 1` on the negative one.
#[inline]
pub fn elu_grad_from_output<T: Real>(pre: T, out: T) -> T {
    if pre >= T::zero() {
        T::one()
    } else {
        out + T::one()
    }
}

#[inline]
pub fn relu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// Softmax over one node's neighborhood logits, max-subtracted.
pub fn neighborhood_softmax<T: Real>(logits: &[T]) -> Result<Vec<T>> {
    if logits.is_empty() {
        return Err(Error::dim("softmax over an empty neighborhood"));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// In-place max-subtracted softmax. The slice must be non-empty.
#[inline]
pub fn softmax_in_place<T: Real>(values: &mut [T]) {
    let max = values.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = T::one() / total;
    for v in values.iter_mut() {
        *v *= inv;
    }
}

/// Backward pass of softmax: `dlogit_j = α_j (dα_j − Σ_k α_k dα_k)`.
pub fn softmax_backward<T: Real>(alpha: &[T], grad_alpha: &[T]) -> Vec<T> {
    let dot = dot(alpha, grad_alpha);
    alpha
        .iter()
        .zip(grad_alpha)
        .map(|(&a, &g)| a * (g - dot))
        .collect()
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    Ok(())
}

/// Per-element inverted-dropout multipliers: 0 with probability `rate`,
/// `1 / (1 - rate)` otherwise. Draws one uniform per element.
pub fn sample_dropout_scales<T: Real, R: Rng + ?Sized>(
    len: usize,
    rate: f64,
    rng: &mut R,
) -> Result<Vec<T>> {
    check_rate(rate)?;
    let keep = T::lit(1.0 / (1.0 - rate));
    Ok((0..len)
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect())
}

/// Inverted dropout. Identity when not training or when `rate == 0`
/// (no random draws are consumed in that case).
pub fn inverted_dropout<T: Real, R: Rng + ?Sized>(
    weights: &[T],
    rate: f64,
    rng: &mut R,
    training: bool,
) -> Result<Vec<T>> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(weights.to_vec());
    }
    let scales: Vec<T> = sample_dropout_scales(weights.len(), rate, rng)?;
    Ok(weights.iter().zip(&scales).map(|(&w, &s)| w * s).collect())
}

/// Glorot/Xavier uniform initialization on `±sqrt(6 / (rows + cols))`.
pub fn xavier_uniform_init<T: Real, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> DenseMatrix<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    DenseMatrix::from_fn(rows, cols, |_, _| T::lit(dist.sample(rng)))
}
