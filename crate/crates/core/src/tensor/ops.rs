//! Eager tensor operations and their derivative kernels.
//!
//! Everything here is a pure function of its inputs. The tape and the
//! symbolic layer backward passes both call into these kernels, which keeps
//! their results bit-identical whenever they perform the same sequence of
//! operations.

use super::gemm::gemm;
use super::{Result, Tensor, TensorError};

/// Batch-norm running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;
/// Batch-norm variance epsilon.
pub const BN_EPS: f64 = 1e-5;

fn expect_rank(t: &Tensor, rank: usize, op: &'static str) -> Result<()> {
    if t.rank() != rank {
        return Err(TensorError::Input {
            op,
            msg: format!("expected rank {rank}, got shape {:?}", t.shape()),
        });
    }
    Ok(())
}

/// `(batch, channels, spatial)` view of a tensor laid out as `[N, C, ...]`.
pub(crate) fn channel_layout(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    if t.rank() < 2 {
        return Err(TensorError::Input {
            op,
            msg: format!("expected [N, C, ...], got shape {:?}", t.shape()),
        });
    }
    let s = t.shape();
    Ok((s[0], s[1], s[2..].iter().product()))
}

/// Standard matrix product of `[m×k]` and `[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "matmul")?;
    expect_rank(b, 2, "matmul")?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(TensorError::Shape {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Gradients of `matmul` with respect to both operands.
pub fn matmul_backward(a: &Tensor, b: &Tensor, dy: &Tensor) -> (Tensor, Tensor) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut da = vec![0.0; m * k];
    gemm(m, n, k, dy.data(), false, b.data(), true, &mut da, false);
    let mut db = vec![0.0; k * n];
    gemm(k, m, n, a.data(), true, dy.data(), false, &mut db, false);
    (Tensor::from_parts(vec![m, k], da), Tensor::from_parts(vec![k, n], db))
}

/// Fully connected map `x·wᵀ + b` with `x: [N×n]`, `w: [m×n]`, `b: [m]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    expect_rank(x, 2, "linear")?;
    expect_rank(w, 2, "linear")?;
    let (rows, n) = (x.shape()[0], x.shape()[1]);
    let m = w.shape()[0];
    if w.shape()[1] != n {
        return Err(TensorError::Shape {
            op: "linear",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; rows * m];
    gemm(rows, n, m, x.data(), false, w.data(), true, &mut out, false);
    if let Some(b) = b {
        if b.shape() != [m] {
            return Err(TensorError::Shape {
                op: "linear bias",
                lhs: vec![m],
                rhs: b.shape().to_vec(),
            });
        }
        for row in out.chunks_exact_mut(m) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![rows, m], out))
}

/// `dy · w`, the input gradient of [`linear`].
pub fn linear_grad_input(dy: &Tensor, w: &Tensor) -> Tensor {
    let (rows, m) = (dy.shape()[0], dy.shape()[1]);
    let n = w.shape()[1];
    let mut out = vec![0.0; rows * n];
    gemm(rows, m, n, dy.data(), false, w.data(), false, &mut out, false);
    Tensor::from_parts(vec![rows, n], out)
}

/// `dyᵀ · x`, the weight gradient of [`linear`].
pub fn linear_grad_weight(dy: &Tensor, x: &Tensor) -> Tensor {
    let (rows, m) = (dy.shape()[0], dy.shape()[1]);
    let n = x.shape()[1];
    let mut out = vec![0.0; m * n];
    gemm(m, rows, n, dy.data(), true, x.data(), false, &mut out, false);
    Tensor::from_parts(vec![m, n], out)
}

/// Per-channel sums of a `[N, C, ...]` tensor: the gradient of a channel bias.
pub fn channel_sums(dy: &Tensor) -> Tensor {
    let (n, c, s) = channel_layout(dy, "channel_sums").expect("rank >= 2");
    let mut out = vec![0.0; c];
    for sample in dy.data().chunks_exact(c * s) {
        for (ch, plane) in sample.chunks_exact(s).enumerate() {
            out[ch] += plane.iter().sum::<f64>();
        }
    }
    let _ = n;
    Tensor::from_parts(vec![c], out)
}

/// Adds `b[c]` to every element of channel `c` of a `[N, C, ...]` tensor.
pub fn add_channel_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, c, s) = channel_layout(x, "add_channel_bias")?;
    if b.shape() != [c] {
        return Err(TensorError::Shape {
            op: "add_channel_bias",
            lhs: x.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = x.to_vec();
    for sample in out.chunks_exact_mut(c * s) {
        for (plane, bv) in sample.chunks_exact_mut(s).zip(b.data()) {
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

fn zip_with(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    a.check_same_shape(b, op)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

/// Elementwise (Hadamard) product.
pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "hadamard", |x, y| x * y)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "add", |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "sub", |x, y| x - y)
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    a.map(|v| v * s)
}

/// `x ∘ x`.
pub fn square(x: &Tensor) -> Tensor {
    x.map(|v| v * v)
}

/// In-place `acc += t`; shapes must already agree.
pub(crate) fn accumulate(acc: &mut Vec<f64>, t: &Tensor) {
    debug_assert_eq!(acc.len(), t.len());
    for (a, v) in acc.iter_mut().zip(t.data()) {
        *a += v;
    }
}

/// Row-wise self outer product: `[N×n] -> [N×n²]`, `z[r, i·n+k] = x[r,i]·x[r,k]`.
pub fn row_outer(x: &Tensor) -> Result<Tensor> {
    expect_rank(x, 2, "row_outer")?;
    let (rows, n) = (x.shape()[0], x.shape()[1]);
    let mut out = Vec::with_capacity(rows * n * n);
    for row in x.data().chunks_exact(n) {
        for &xi in row {
            out.extend(row.iter().map(|&xk| xi * xk));
        }
    }
    Ok(Tensor::from_parts(vec![rows, n * n], out))
}

/// Input gradient of [`row_outer`]: `dx_i = Σ_k (dz[i,k] + dz[k,i]) · x_k`.
pub fn row_outer_backward(x: &Tensor, dz: &Tensor) -> Tensor {
    let (rows, n) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        let xr = &x.data()[r * n..(r + 1) * n];
        let dzr = &dz.data()[r * n * n..(r + 1) * n * n];
        let dxr = &mut out[r * n..(r + 1) * n];
        for i in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += (dzr[i * n + k] + dzr[k * n + i]) * xr[k];
            }
            dxr[i] = acc;
        }
    }
    Tensor::from_parts(vec![rows, n], out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// ReLU gradient expressed through the forward output.
pub fn relu_backward(out: &Tensor, dy: &Tensor) -> Tensor {
    let data = out
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&o, &g)| if o > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_parts(dy.shape().to_vec(), data)
}

/// Which statistics batch-norm standardizes with.
#[derive(Debug, Clone, Copy)]
pub enum BnStats<'a> {
    /// Statistics of the current batch (training mode).
    Batch,
    /// Accumulated running statistics (evaluation mode).
    Running { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug, Clone)]
pub struct BatchNormOutput {
    pub y: Tensor,
    /// Standardized input, kept for the backward pass.
    pub x_hat: Tensor,
    /// Per-channel `1/sqrt(var + eps)`.
    pub inv_std: Tensor,
    /// Per-channel mean used for standardization.
    pub mean: Vec<f64>,
    /// Per-channel biased variance used for standardization.
    pub var: Vec<f64>,
    /// Number of elements each channel statistic was taken over.
    pub count: usize,
}

/// Per-channel standardization followed by the affine map `gamma·x̂ + beta`.
pub fn batchnorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64, stats: BnStats<'_>) -> Result<BatchNormOutput> {
    let (n, c, s) = channel_layout(x, "batchnorm")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(TensorError::Shape {
            op: "batchnorm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    if !(eps > 0.0) {
        return Err(TensorError::Input {
            op: "batchnorm",
            msg: format!("eps must be positive, got {eps}"),
        });
    }
    let count = n * s;
    let (mean, var) = match stats {
        BnStats::Batch => {
            let mut mean = vec![0.0; c];
            for sample in x.data().chunks_exact(c * s) {
                for (ch, plane) in sample.chunks_exact(s).enumerate() {
                    mean[ch] += plane.iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            let mut var = vec![0.0; c];
            for sample in x.data().chunks_exact(c * s) {
                for (ch, plane) in sample.chunks_exact(s).enumerate() {
                    var[ch] += plane.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count as f64);
            (mean, var)
        }
        BnStats::Running { mean, var } => {
            if mean.len() != c || var.len() != c {
                return Err(TensorError::Shape {
                    op: "batchnorm running stats",
                    lhs: vec![c],
                    rhs: vec![mean.len()],
                });
            }
            (mean.to_vec(), var.to_vec())
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut x_hat = x.to_vec();
    let mut y = vec![0.0; x.len()];
    for (xs, ys) in x_hat.chunks_exact_mut(c * s).zip(y.chunks_exact_mut(c * s)) {
        for ch in 0..c {
            let (g, b, m, is) = (gamma.data()[ch], beta.data()[ch], mean[ch], inv_std[ch]);
            for (xv, yv) in xs[ch * s..(ch + 1) * s].iter_mut().zip(&mut ys[ch * s..(ch + 1) * s]) {
                *xv = (*xv - m) * is;
                *yv = g * *xv + b;
            }
        }
    }
    Ok(BatchNormOutput {
        y: Tensor::from_parts(x.shape().to_vec(), y),
        x_hat: Tensor::from_parts(x.shape().to_vec(), x_hat),
        inv_std: Tensor::from_parts(vec![c], inv_std),
        mean,
        var,
        count,
    })
}

/// Gradients `(dx, dgamma, dbeta)` of training-mode batch-norm.
pub fn batchnorm_backward(dy: &Tensor, x_hat: &Tensor, inv_std: &Tensor, gamma: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, c, s) = channel_layout(dy, "batchnorm_backward").expect("rank >= 2");
    let m = (n * s) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (dys, xs) in dy.data().chunks_exact(c * s).zip(x_hat.data().chunks_exact(c * s)) {
        for ch in 0..c {
            let r = ch * s..(ch + 1) * s;
            for (g, xh) in dys[r.clone()].iter().zip(&xs[r]) {
                dbeta[ch] += g;
                dgamma[ch] += g * xh;
            }
        }
    }
    let mut dx = vec![0.0; dy.len()];
    for ((dxs, dys), xs) in dx
        .chunks_exact_mut(c * s)
        .zip(dy.data().chunks_exact(c * s))
        .zip(x_hat.data().chunks_exact(c * s))
    {
        for ch in 0..c {
            let k = gamma.data()[ch] * inv_std.data()[ch] / m;
            let r = ch * s..(ch + 1) * s;
            for ((o, g), xh) in dxs[r.clone()].iter_mut().zip(&dys[r.clone()]).zip(&xs[r]) {
                *o = k * (m * g - dbeta[ch] - xh * dgamma[ch]);
            }
        }
    }
    (
        Tensor::from_parts(dy.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    )
}

/// Running mean/variance tracked by a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Exponential update with the unbiased batch variance.
    pub fn update(&mut self, out: &BatchNormOutput, momentum: f64) {
        let unbias = if out.count > 1 {
            out.count as f64 / (out.count - 1) as f64
        } else {
            1.0
        };
        for ch in 0..self.mean.len() {
            self.mean[ch] = (1.0 - momentum) * self.mean[ch] + momentum * out.mean[ch];
            self.var[ch] = (1.0 - momentum) * self.var[ch] + momentum * out.var[ch] * unbias;
        }
    }
}

/// Mean softmax cross-entropy over the batch, plus the softmax probabilities.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    expect_rank(logits, 2, "softmax_cross_entropy")?;
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(TensorError::Input {
            op: "softmax_cross_entropy",
            msg: format!("{} labels for a batch of {n}", labels.len()),
        });
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(TensorError::Input {
            op: "softmax_cross_entropy",
            msg: format!("label {l} at position {i} is outside [0, {k})"),
        });
    }
    let mut probs = Vec::with_capacity(n * k);
    let mut loss = 0.0;
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[label];
        probs.extend(row.iter().map(|v| (v - lse).exp()));
    }
    Ok((loss / n as f64, Tensor::from_parts(vec![n, k], probs)))
}

/// Logit gradient of the mean cross-entropy, scaled by the upstream gradient.
pub fn softmax_cross_entropy_backward(probs: &Tensor, labels: &[usize], upstream: f64) -> Tensor {
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    let s = upstream / n as f64;
    let mut out = probs.to_vec();
    for (row, &label) in out.chunks_exact_mut(k).zip(labels) {
        row[label] -= 1.0;
        row.iter_mut().for_each(|v| *v *= s);
    }
    Tensor::from_parts(vec![n, k], out)
}

/// Index of the largest entry of each row.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let k = *t.shape().last().unwrap_or(&1);
    t.data()
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (i, &v)| {
                        if v > best.1 {
                            (i, v)
                        } else {
                            best
                        }
                    },
                )
                .0
        })
        .collect()
}
