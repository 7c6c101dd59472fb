//! Exact polynomial recovery for scalar activation-free quadratic nets.

use super::forward::forward;
use super::{Activation, LayerKind, LayerParams, QuadraticLayerSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest held-out residual, relative to the output scale, accepted as exact.
pub const PROBE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct PolyFit {
    /// Monomial coefficients in ascending order, `coeffs[k]` for `x^k`.
    pub coeffs: Vec<f64>,
    /// Degree bound `2^L` the fit was made at.
    pub degree_bound: usize,
    /// Max held-out error divided by `max(1, max |output|)`.
    pub residual: f64,
}

impl PolyFit {
    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }
}

fn chebyshev(m: usize) -> Vec<f64> {
    (0..m)
        .map(|k| ((2 * k + 1) as f64 * std::f64::consts::PI / (2 * m) as f64).cos())
        .collect()
}

fn evaluate(net: &[(QuadraticLayerSpec, LayerParams)], xs: &[f64]) -> Result<Vec<f64>> {
    let mut h = Tensor::new([xs.len(), 1], xs.to_vec())?;
    for (spec, params) in net {
        h = forward(spec, params, &h)?.0;
    }
    Ok(h.to_vec())
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty");
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Interpolates a scalar-in, scalar-out net of `L` quadratic FC layers at
/// `2^L + 1` Chebyshev nodes and checks the fit at `2^L` further nodes.
///
/// Each layer at most doubles the polynomial degree, so an exact fit
/// certifies degree `<= 2^L`.
pub fn polynomial_degree_probe(net: &[(QuadraticLayerSpec, LayerParams)]) -> Result<PolyFit> {
    let depth = net.len();
    if depth == 0 || depth > 4 {
        return Err(Error::Input(format!("probe needs 1 to 4 layers, got {depth}")));
    }
    for (i, (spec, _)) in net.iter().enumerate() {
        if spec.kind != LayerKind::Fc || spec.batchnorm || spec.activation != Activation::None {
            return Err(Error::Input(format!(
                "layer {i}: probe needs plain fc layers without batch-norm or activation"
            )));
        }
    }
    if net[0].0.inputs != 1 || net[depth - 1].0.outputs != 1 {
        return Err(Error::Input("probe needs a scalar input and a scalar output".into()));
    }
    let degree = 1usize << depth;
    let fit_x = chebyshev(degree + 1);
    let fit_y = evaluate(net, &fit_x)?;
    let vander: Vec<Vec<f64>> = fit_x
        .iter()
        .map(|&x| (0..=degree).map(|k| x.powi(k as i32)).collect())
        .collect();
    let coeffs = solve(vander, fit_y.clone());
    let held_x = chebyshev(degree);
    let held_y = evaluate(net, &held_x)?;
    let scale = fit_y.iter().chain(&held_y).fold(1.0f64, |m, v| m.max(v.abs()));
    let fit = PolyFit {
        coeffs,
        degree_bound: degree,
        residual: 0.0,
    };
    let residual = held_x
        .iter()
        .zip(&held_y)
        .map(|(&x, &y)| (fit.eval(x) - y).abs())
        .fold(0.0f64, f64::max)
        / scale;
    if !(residual <= PROBE_TOLERANCE) {
        return Err(Error::DegreeViolation {
            residual,
            tolerance: PROBE_TOLERANCE,
        });
    }
    Ok(PolyFit { residual, ..fit })
}
