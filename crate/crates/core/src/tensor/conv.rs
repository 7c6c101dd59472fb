//! 2-D convolution through im2col, with grouped (depthwise) support.
//!
//! Layouts: input `[N, C, H, W]`, weight `[F, C/g, r, r]`, output
//! `[N, F, Ho, Wo]`. Columns are `[N, C·r², Ho·Wo]`; the rows belonging to
//! group `g` are the contiguous block `g·K .. (g+1)·K` with `K = (C/g)·r²`.

use super::gemm::gemm;
use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let g = Self {
            in_channels,
            out_channels,
            height,
            width,
            kernel,
            stride,
            padding,
            groups,
        };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TensorError::Input { op: "conv2d", msg });
        if [
            self.in_channels,
            self.out_channels,
            self.height,
            self.width,
            self.kernel,
            self.stride,
            self.groups,
        ]
        .contains(&0)
        {
            return bad(format!("zero-sized geometry {self:?}"));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return bad(format!(
                "groups {} must divide in_channels {} and out_channels {}",
                self.groups, self.in_channels, self.out_channels
            ));
        }
        if self.kernel > self.height + 2 * self.padding || self.kernel > self.width + 2 * self.padding {
            return bad(format!(
                "kernel {} exceeds padded input {}x{}",
                self.kernel,
                self.height + 2 * self.padding,
                self.width + 2 * self.padding
            ));
        }
        Ok(())
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Output positions per channel.
    pub fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Receptive-field size of one filter: `(C/g)·r²`.
    pub fn patch_len(&self) -> usize {
        self.in_channels / self.groups * self.kernel * self.kernel
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel,
            self.kernel,
        ]
    }

    pub fn output_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.out_channels, self.out_height(), self.out_width()]
    }

    pub fn cols_shape(&self, batch: usize) -> [usize; 3] {
        [batch, self.in_channels * self.kernel * self.kernel, self.positions()]
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.in_channels || s[2] != self.height || s[3] != self.width {
            return Err(TensorError::Shape {
                op: "conv2d input",
                lhs: vec![0, self.in_channels, self.height, self.width],
                rhs: s.to_vec(),
            });
        }
        Ok(s[0])
    }

    fn check_weight(&self, w: &Tensor) -> Result<()> {
        if w.shape() != self.weight_shape() {
            return Err(TensorError::Shape {
                op: "conv2d weight",
                lhs: self.weight_shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Input pixel read by column row `(c, ki, kj)` at output `(oi, oj)`, if not padding.
    #[inline]
    fn source(&self, ki: usize, kj: usize, oi: usize, oj: usize) -> Option<(usize, usize)> {
        let i = (oi * self.stride + ki).checked_sub(self.padding)?;
        let j = (oj * self.stride + kj).checked_sub(self.padding)?;
        (i < self.height && j < self.width).then_some((i, j))
    }
}

/// Unfolds every receptive field into a column.
pub fn im2col(x: &Tensor, g: &ConvGeometry) -> Result<Tensor> {
    let n = g.check_input(x)?;
    let (c, h, w, r) = (g.in_channels, g.height, g.width, g.kernel);
    let (ho, wo) = (g.out_height(), g.out_width());
    let p = ho * wo;
    let rows = c * r * r;
    let mut cols = vec![0.0; n * rows * p];
    for (sample, out) in x.data().chunks_exact(c * h * w).zip(cols.chunks_exact_mut(rows * p)) {
        for ch in 0..c {
            let plane = &sample[ch * h * w..(ch + 1) * h * w];
            for ki in 0..r {
                for kj in 0..r {
                    let row = (ch * r + ki) * r + kj;
                    let dst = &mut out[row * p..(row + 1) * p];
                    for oi in 0..ho {
                        for oj in 0..wo {
                            if let Some((i, j)) = g.source(ki, kj, oi, oj) {
                                dst[oi * wo + oj] = plane[i * w + j];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(g.cols_shape(n).to_vec(), cols))
}

/// Adjoint of [`im2col`]: scatters (sums) columns back onto the input grid.
pub fn col2im(cols: &Tensor, g: &ConvGeometry) -> Result<Tensor> {
    let n = cols.shape().first().copied().unwrap_or(0);
    if cols.shape() != g.cols_shape(n) {
        return Err(TensorError::Shape {
            op: "col2im",
            lhs: g.cols_shape(n).to_vec(),
            rhs: cols.shape().to_vec(),
        });
    }
    let (c, h, w, r) = (g.in_channels, g.height, g.width, g.kernel);
    let (ho, wo) = (g.out_height(), g.out_width());
    let p = ho * wo;
    let rows = c * r * r;
    let mut x = vec![0.0; n * c * h * w];
    for (src, sample) in cols.data().chunks_exact(rows * p).zip(x.chunks_exact_mut(c * h * w)) {
        for ch in 0..c {
            let plane = &mut sample[ch * h * w..(ch + 1) * h * w];
            for ki in 0..r {
                for kj in 0..r {
                    let row = (ch * r + ki) * r + kj;
                    let s = &src[row * p..(row + 1) * p];
                    for oi in 0..ho {
                        for oj in 0..wo {
                            if let Some((i, j)) = g.source(ki, kj, oi, oj) {
                                plane[i * w + j] += s[oi * wo + oj];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, h, w], x))
}

/// Convolution of pre-unfolded columns with `w`, plus an optional per-filter bias.
pub fn conv2d_from_cols(cols: &Tensor, w: &Tensor, b: Option<&Tensor>, g: &ConvGeometry) -> Result<Tensor> {
    g.check_weight(w)?;
    let n = cols.shape().first().copied().unwrap_or(0);
    if cols.shape() != g.cols_shape(n) {
        return Err(TensorError::Shape {
            op: "conv2d cols",
            lhs: g.cols_shape(n).to_vec(),
            rhs: cols.shape().to_vec(),
        });
    }
    if let Some(b) = b {
        if b.shape() != [g.out_channels] {
            return Err(TensorError::Shape {
                op: "conv2d bias",
                lhs: vec![g.out_channels],
                rhs: b.shape().to_vec(),
            });
        }
    }
    let (k, p) = (g.patch_len(), g.positions());
    let fg = g.out_channels / g.groups;
    let rows = g.in_channels * g.kernel * g.kernel;
    let mut out = vec![0.0; n * g.out_channels * p];
    for (cs, os) in cols
        .data()
        .chunks_exact(rows * p)
        .zip(out.chunks_exact_mut(g.out_channels * p))
    {
        for grp in 0..g.groups {
            gemm(
                fg,
                k,
                p,
                &w.data()[grp * fg * k..(grp + 1) * fg * k],
                false,
                &cs[grp * k * p..(grp + 1) * k * p],
                false,
                &mut os[grp * fg * p..(grp + 1) * fg * p],
                false,
            );
        }
        if let Some(b) = b {
            for (plane, bv) in os.chunks_exact_mut(p).zip(b.data()) {
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(Tensor::from_parts(g.output_shape(n).to_vec(), out))
}

/// Full convolution; returns the output together with the columns it used.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, g: &ConvGeometry) -> Result<(Tensor, Tensor)> {
    let cols = im2col(x, g)?;
    let out = conv2d_from_cols(&cols, w, b, g)?;
    Ok((out, cols))
}

fn check_grad(dy: &Tensor, g: &ConvGeometry) -> Result<usize> {
    let n = dy.shape().first().copied().unwrap_or(0);
    if dy.shape() != g.output_shape(n) {
        return Err(TensorError::Shape {
            op: "conv2d backward",
            lhs: g.output_shape(n).to_vec(),
            rhs: dy.shape().to_vec(),
        });
    }
    Ok(n)
}

/// Weight gradient `Σ_n dy_n · cols_nᵀ`, per group.
pub fn conv2d_backward_weight(cols: &Tensor, dy: &Tensor, g: &ConvGeometry) -> Result<Tensor> {
    let n = check_grad(dy, g)?;
    let (k, p) = (g.patch_len(), g.positions());
    let fg = g.out_channels / g.groups;
    let rows = g.in_channels * g.kernel * g.kernel;
    let mut dw = vec![0.0; g.out_channels * k];
    for (cs, ds) in cols
        .data()
        .chunks_exact(rows * p)
        .zip(dy.data().chunks_exact(g.out_channels * p))
        .take(n)
    {
        for grp in 0..g.groups {
            gemm(
                fg,
                p,
                k,
                &ds[grp * fg * p..(grp + 1) * fg * p],
                false,
                &cs[grp * k * p..(grp + 1) * k * p],
                true,
                &mut dw[grp * fg * k..(grp + 1) * fg * k],
                true,
            );
        }
    }
    Ok(Tensor::from_parts(g.weight_shape().to_vec(), dw))
}

/// Input gradient: `col2im(wᵀ · dy)` per sample and group.
pub fn conv2d_backward_input(dy: &Tensor, w: &Tensor, g: &ConvGeometry) -> Result<Tensor> {
    let n = check_grad(dy, g)?;
    g.check_weight(w)?;
    let (k, p) = (g.patch_len(), g.positions());
    let fg = g.out_channels / g.groups;
    let rows = g.in_channels * g.kernel * g.kernel;
    let mut dcols = vec![0.0; n * rows * p];
    for (ds, cs) in dy
        .data()
        .chunks_exact(g.out_channels * p)
        .zip(dcols.chunks_exact_mut(rows * p))
    {
        for grp in 0..g.groups {
            gemm(
                k,
                fg,
                p,
                &w.data()[grp * fg * k..(grp + 1) * fg * k],
                true,
                &ds[grp * fg * p..(grp + 1) * fg * p],
                false,
                &mut cs[grp * k * p..(grp + 1) * k * p],
                false,
            );
        }
    }
    col2im(&Tensor::from_parts(g.cols_shape(n).to_vec(), dcols), g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_size_formula() {
        let g = ConvGeometry::new(3, 8, 32, 32, 3, 2, 1, 1).unwrap();
        assert_eq!((g.out_height(), g.out_width()), (16, 16));
        let g = ConvGeometry::new(1, 1, 5, 7, 3, 1, 0, 1).unwrap();
        assert_eq!((g.out_height(), g.out_width()), (3, 5));
    }

    #[test]
    fn invalid_geometry() {
        assert!(ConvGeometry::new(3, 4, 8, 8, 3, 1, 1, 2).is_err());
        assert!(ConvGeometry::new(2, 2, 2, 2, 5, 1, 0, 1).is_err());
        assert!(ConvGeometry::new(2, 2, 2, 2, 1, 0, 0, 1).is_err());
    }

    #[test]
    fn one_by_one_kernel_is_channel_mix() {
        let g = ConvGeometry::new(2, 1, 2, 2, 1, 1, 0, 1).unwrap();
        let x = Tensor::new([1, 2, 2, 2], (1..=8).map(f64::from).collect()).unwrap();
        let w = Tensor::new([1, 2, 1, 1], vec![1.0, 10.0]).unwrap();
        let (y, _) = conv2d(&x, &w, None, &g).unwrap();
        assert_eq!(y.data(), &[51.0, 62.0, 73.0, 84.0]);
    }

    #[test]
    fn wrong_input_shape_is_reported() {
        let g = ConvGeometry::new(2, 1, 4, 4, 3, 1, 1, 1).unwrap();
        let err = im2col(&Tensor::zeros(&[1, 3, 4, 4]), &g).unwrap_err();
        assert!(err.to_string().contains("[1, 3, 4, 4]"));
    }
}
