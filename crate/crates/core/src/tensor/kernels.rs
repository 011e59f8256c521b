//! Raw `f64` kernels behind the differentiable ops: im2col convolution and
//! batch-norm statistics. No graph bookkeeping here.

/// Output extent of a convolution axis, or `None` when the padded input is
/// smaller than the kernel.
pub(crate) fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub fn cols_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    pub fn out_spatial(&self) -> usize {
        self.oh * self.ow
    }
}

/// y += a * x
#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += a * xi;
    }
}

/// Dot product with four accumulators so LLVM can vectorize the reduction.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s += a[j] * b[j];
    }
    s
}

/// Unfold one sample (cin, h, w) into a (cin*kh*kw) x (oh*ow) matrix.
pub(crate) fn im2col(sample: &[f64], d: &ConvDims, cols: &mut [f64]) {
    let m = d.out_spatial();
    debug_assert_eq!(cols.len(), d.cols_rows() * m);
    for c in 0..d.cin {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = ((c * d.kh + ki) * d.kw + kj) * m;
                for oy in 0..d.oh {
                    let iy = (oy * d.sh + ki) as isize - d.ph as isize;
                    let dst = &mut cols[row + oy * d.ow..row + (oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &sample[(c * d.h + iy as usize) * d.w..(c * d.h + iy as usize + 1) * d.w];
                    if d.sw == 1 {
                        // Valid input columns for this kernel offset form one
                        // contiguous span; copy it and zero the padded edges.
                        let lo = (d.pw as isize - kj as isize).max(0) as usize;
                        let hi_excl =
                            ((d.w as isize + d.pw as isize - kj as isize).min(d.ow as isize)).max(0) as usize;
                        dst[..lo.min(d.ow)].fill(0.0);
                        if hi_excl > lo {
                            let src_lo = (lo + kj) - d.pw;
                            dst[lo..hi_excl].copy_from_slice(&src[src_lo..src_lo + (hi_excl - lo)]);
                        }
                        if hi_excl < d.ow {
                            dst[hi_excl..].fill(0.0);
                        }
                    } else {
                        for ox in 0..d.ow {
                            let ix = (ox * d.sw + kj) as isize - d.pw as isize;
                            dst[ox] = if ix >= 0 && ix < d.w as isize {
                                src[ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the column matrix back onto one (cin, h, w) sample.
pub(crate) fn col2im_add(cols: &[f64], d: &ConvDims, sample: &mut [f64]) {
    let m = d.out_spatial();
    for c in 0..d.cin {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = ((c * d.kh + ki) * d.kw + kj) * m;
                for oy in 0..d.oh {
                    let iy = (oy * d.sh + ki) as isize - d.ph as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * d.ow..row + (oy + 1) * d.ow];
                    let base = (c * d.h + iy as usize) * d.w;
                    for ox in 0..d.ow {
                        let ix = (ox * d.sw + kj) as isize - d.pw as isize;
                        if ix >= 0 && ix < d.w as isize {
                            sample[base + ix as usize] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution over a batch. `weight` is (cout, cin, kh, kw) and the
/// result is (n, cout, oh, ow).
pub(crate) fn conv2d_forward(input: &[f64], weight: &[f64], bias: &[f64], d: &ConvDims) -> Vec<f64> {
    let m = d.out_spatial();
    let k = d.cols_rows();
    let mut cols = vec![0.0; k * m];
    let mut out = vec![0.0; d.n * d.cout * m];
    let in_stride = d.cin * d.h * d.w;
    for s in 0..d.n {
        im2col(&input[s * in_stride..(s + 1) * in_stride], d, &mut cols);
        let out_s = &mut out[s * d.cout * m..(s + 1) * d.cout * m];
        for oc in 0..d.cout {
            let orow = &mut out_s[oc * m..(oc + 1) * m];
            orow.fill(bias[oc]);
            let wrow = &weight[oc * k..(oc + 1) * k];
            for r in 0..k {
                axpy(orow, wrow[r], &cols[r * m..(r + 1) * m]);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Backward convolution: gradients w.r.t. input (optional), weight and bias.
pub(crate) fn conv2d_backward(
    input: &[f64],
    weight: &[f64],
    gout: &[f64],
    d: &ConvDims,
    need_input: bool,
) -> ConvGrads {
    let m = d.out_spatial();
    let k = d.cols_rows();
    let in_stride = d.cin * d.h * d.w;
    let mut cols = vec![0.0; k * m];
    let mut gcols = vec![0.0; k * m];
    let mut gweight = vec![0.0; weight.len()];
    let mut gbias = vec![0.0; d.cout];
    let mut ginput = if need_input {
        Some(vec![0.0; d.n * in_stride])
    } else {
        None
    };
    for s in 0..d.n {
        im2col(&input[s * in_stride..(s + 1) * in_stride], d, &mut cols);
        let gout_s = &gout[s * d.cout * m..(s + 1) * d.cout * m];
        for oc in 0..d.cout {
            let grow = &gout_s[oc * m..(oc + 1) * m];
            gbias[oc] += grow.iter().sum::<f64>();
            let gwrow = &mut gweight[oc * k..(oc + 1) * k];
            for r in 0..k {
                gwrow[r] += dot(grow, &cols[r * m..(r + 1) * m]);
            }
        }
        if let Some(gin) = ginput.as_mut() {
            gcols.fill(0.0);
            for oc in 0..d.cout {
                let grow = &gout_s[oc * m..(oc + 1) * m];
                let wrow = &weight[oc * k..(oc + 1) * k];
                for r in 0..k {
                    axpy(&mut gcols[r * m..(r + 1) * m], wrow[r], grow);
                }
            }
            col2im_add(&gcols, d, &mut gin[s * in_stride..(s + 1) * in_stride]);
        }
    }
    ConvGrads {
        input: ginput,
        weight: gweight,
        bias: gbias,
    }
}

pub(crate) struct BnForward {
    pub y: Vec<f64>,
    pub x_hat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Training-mode batch norm over (N, C, H, W) with population variance.
pub(crate) fn bn_train_forward(
    x: &[f64],
    n: usize,
    c: usize,
    spatial: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> BnForward {
    let m = (n * spatial) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut sum = 0.0;
        for s in 0..n {
            let base = (s * c + ch) * spatial;
            sum += x[base..base + spatial].iter().sum::<f64>();
        }
        mean[ch] = sum / m;
        let mu = mean[ch];
        let mut sq = 0.0;
        for s in 0..n {
            let base = (s * c + ch) * spatial;
            for &v in &x[base..base + spatial] {
                let d = v - mu;
                sq += d * d;
            }
        }
        var[ch] = sq / m;
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut x_hat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * spatial;
            let (mu, is, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for i in base..base + spatial {
                let xh = (x[i] - mu) * is;
                x_hat[i] = xh;
                y[i] = g * xh + b;
            }
        }
    }
    BnForward {
        y,
        x_hat,
        inv_std,
        mean,
        var,
    }
}

pub(crate) struct BnGrads {
    pub input: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Backward pass matching `bn_train_forward`.
pub(crate) fn bn_train_backward(
    gy: &[f64],
    x_hat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    n: usize,
    c: usize,
    spatial: usize,
) -> BnGrads {
    let m = (n * spatial) as f64;
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * spatial;
            let mut sg = 0.0;
            let mut sb = 0.0;
            for i in base..base + spatial {
                sg += gy[i] * x_hat[i];
                sb += gy[i];
            }
            ggamma[ch] += sg;
            gbeta[ch] += sb;
        }
    }
    let mut gx = vec![0.0; gy.len()];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * spatial;
            let scale = gamma[ch] * inv_std[ch];
            let mean_g = gbeta[ch] / m;
            let mean_gxh = ggamma[ch] / m;
            for i in base..base + spatial {
                gx[i] = scale * (gy[i] - mean_g - x_hat[i] * mean_gxh);
            }
        }
    }
    BnGrads {
        input: gx,
        gamma: ggamma,
        beta: gbeta,
    }
}

/// Eval-mode batch norm using running statistics; returns the output and the
/// per-channel `1/sqrt(running_var + eps)` used by the backward pass.
pub(crate) fn bn_eval_forward(
    x: &[f64],
    n: usize,
    c: usize,
    spatial: usize,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>) {
    let inv_std: Vec<f64> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut y = vec![0.0; x.len()];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * spatial;
            let (mu, is, g, b) = (running_mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for i in base..base + spatial {
                y[i] = g * (x[i] - mu) * is + b;
            }
        }
    }
    (y, inv_std)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_out_dim_formula() {
        assert_eq!(conv_out_dim(128, 5, 1, 2), Some(128));
        assert_eq!(conv_out_dim(1025, 6, 1, 2), Some(1024));
        assert_eq!(conv_out_dim(128, 4, 2, 1), Some(64));
        assert_eq!(conv_out_dim(1024, 2, 1, 1), Some(1025));
        assert_eq!(conv_out_dim(2, 5, 1, 0), None);
    }

    #[test]
    fn im2col_col2im_are_adjoint_on_ones() {
        // col2im(im2col(x)) counts how many kernel positions touch each input
        // cell; verify against a brute-force count.
        let d = ConvDims {
            n: 1,
            cin: 2,
            h: 5,
            w: 4,
            cout: 1,
            kh: 3,
            kw: 2,
            sh: 2,
            sw: 1,
            ph: 1,
            pw: 1,
            oh: conv_out_dim(5, 3, 2, 1).unwrap(),
            ow: conv_out_dim(4, 2, 1, 1).unwrap(),
        };
        let x: Vec<f64> = (0..d.cin * d.h * d.w).map(|i| i as f64 * 0.1 + 1.0).collect();
        let mut cols = vec![0.0; d.cols_rows() * d.out_spatial()];
        im2col(&x, &d, &mut cols);
        let mut back = vec![0.0; x.len()];
        // Replace unfolded values with 1 where they came from a real cell.
        let ones: Vec<f64> = cols.iter().map(|&v| if v != 0.0 { v / v } else { 0.0 }).collect();
        col2im_add(&ones, &d, &mut back);
        for c in 0..d.cin {
            for y in 0..d.h {
                for xw in 0..d.w {
                    let mut count = 0.0;
                    for oy in 0..d.oh {
                        for ox in 0..d.ow {
                            for ki in 0..d.kh {
                                for kj in 0..d.kw {
                                    let iy = (oy * d.sh + ki) as isize - d.ph as isize;
                                    let ix = (ox * d.sw + kj) as isize - d.pw as isize;
                                    if iy == y as isize && ix == xw as isize {
                                        count += 1.0;
                                    }
                                }
                            }
                        }
                    }
                    assert_eq!(back[(c * d.h + y) * d.w + xw], count);
                }
            }
        }
    }
}
