//! Raw kernels on flat row-major buffers. Reductions run in a fixed order so
//! results are bitwise reproducible.

/// `(m,k) @ (k,n)`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `(m,k) @ (n,k)^T`.
pub(crate) fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// `(k,m)^T @ (k,n)`.
pub(crate) fn matmul_at_b(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// Unrolls image `b` of `x` into `(C*k*k, OH*OW)` columns; padding reads as zero.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, b: usize) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let positions = oh * ow;
    let mut cols = vec![0.0; g.patch_len() * positions];
    let img = &x[b * g.channels * g.height * g.width..(b + 1) * g.channels * g.height * g.width];
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        dst[oy * ow + ox] =
                            img[(c * g.height + iy as usize) * g.width + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back into image `b` of `dx`.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, b: usize, dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let positions = oh * ow;
    let img = &mut dx[b * g.channels * g.height * g.width..(b + 1) * g.channels * g.height * g.width];
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        img[(c * g.height + iy as usize) * g.width + ix as usize] +=
                            src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let positions = g.out_h() * g.out_w();
    let mut out = Vec::with_capacity(g.batch * g.filters * positions);
    for b in 0..g.batch {
        let cols = im2col(x, g, b);
        let mut y = matmul(w, &cols, g.filters, g.patch_len(), positions);
        for f in 0..g.filters {
            for v in &mut y[f * positions..(f + 1) * positions] {
                *v += bias[f];
            }
        }
        out.extend_from_slice(&y);
    }
    out
}

/// Returns `(dx, dw, dbias)` for upstream gradient `gy` of shape `(B,F,OH,OW)`.
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let positions = g.out_h() * g.out_w();
    let plen = g.patch_len();
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.filters];
    for b in 0..g.batch {
        let gb = &gy[b * g.filters * positions..(b + 1) * g.filters * positions];
        let cols = im2col(x, g, b);
        let dwb = matmul_a_bt(gb, &cols, g.filters, positions, plen);
        for (acc, v) in dw.iter_mut().zip(&dwb) {
            *acc += v;
        }
        for f in 0..g.filters {
            db[f] += gb[f * positions..(f + 1) * positions].iter().sum::<f64>();
        }
        let dcols = matmul_at_b(w, gb, g.filters, plen, positions);
        col2im(&dcols, g, b, &mut dx);
    }
    (dx, dw, db)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(width).zip(out.chunks_mut(width)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.5).collect();
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect();
        let want = naive(&a, &b, 2, 3, 4);
        assert_eq!(matmul(&a, &b, 2, 3, 4), want);
        let bt = transpose(&b, 3, 4);
        let got = matmul_a_bt(&a, &bt, 2, 3, 4);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
        let at = transpose(&a, 2, 3);
        let got = matmul_at_b(&at, &b, 3, 2, 4);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.2] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
