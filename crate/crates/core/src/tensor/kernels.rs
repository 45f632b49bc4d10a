//! Forward and adjoint kernels for the spatial operators.

use rayon::prelude::*;

use super::Scalar;

/// Geometry of a 2-D convolution over an NCHW batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<F: Scalar>(x: &[F], g: &ConvGeom, cols: &mut [F]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize { F::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Weight and bias gradient contributions of one batch item.
type GradPair<F> = (Option<Vec<F>>, Option<Vec<F>>);

fn col2im<F: Scalar>(cols: &[F], g: &ConvGeom, dx: &mut [F]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<F: Scalar>(x: &[F], w: &[F], g: &ConvGeom) -> Vec<F> {
    let (k, p) = (g.k(), g.p());
    let in_item = g.cin * g.h * g.w;
    let mut out = vec![F::zero(); g.n * g.cout * p];
    out.par_chunks_mut(g.cout * p).zip(x.par_chunks(in_item)).for_each(|(o, xi)| {
        if g.is_pointwise() {
            F::gemm(false, false, g.cout, k, p, F::one(), w, xi, F::zero(), o);
        } else {
            let mut cols = vec![F::zero(); k * p];
            im2col(xi, g, &mut cols);
            F::gemm(false, false, g.cout, k, p, F::one(), w, &cols, F::zero(), o);
        }
    });
    out
}

/// Returns `(dx, dw)`; each is computed only when requested.
pub(crate) fn conv2d_backward<F: Scalar>(x: &[F], w: &[F], dout: &[F], g: &ConvGeom, need_dx: bool, need_dw: bool) -> (Option<Vec<F>>, Option<Vec<F>>) {
    let (k, p) = (g.k(), g.p());
    let in_item = g.cin * g.h * g.w;
    let out_item = g.cout * p;
    let per_item: Vec<GradPair<F>> = x
        .par_chunks(in_item)
        .zip(dout.par_chunks(out_item))
        .map(|(xi, di)| {
            let cols_buf;
            let cols: &[F] = if g.is_pointwise() {
                xi
            } else {
                let mut buf = vec![F::zero(); k * p];
                im2col(xi, g, &mut buf);
                cols_buf = buf;
                &cols_buf
            };
            let dw = need_dw.then(|| {
                let mut dw = vec![F::zero(); g.cout * k];
                F::gemm(false, true, g.cout, p, k, F::one(), di, cols, F::zero(), &mut dw);
                dw
            });
            let dx = need_dx.then(|| {
                let mut dcols = vec![F::zero(); k * p];
                F::gemm(true, false, k, g.cout, p, F::one(), w, di, F::zero(), &mut dcols);
                if g.is_pointwise() {
                    dcols
                } else {
                    let mut dx = vec![F::zero(); in_item];
                    col2im(&dcols, g, &mut dx);
                    dx
                }
            });
            (dx, dw)
        })
        .collect();

    // fixed-order reduction keeps results independent of thread scheduling
    let mut dx_all = need_dx.then(|| Vec::with_capacity(g.n * in_item));
    let mut dw_all = need_dw.then(|| vec![F::zero(); g.cout * k]);
    for (dx, dw) in per_item {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
        if let (Some(all), Some(dw)) = (dw_all.as_mut(), dw) {
            for (a, b) in all.iter_mut().zip(dw) {
                *a = *a + b;
            }
        }
    }
    (dx_all, dw_all)
}

/// Per-plane statistics for instance normalization: returns the normalized
/// values and one inverse standard deviation per plane.
pub(crate) fn instance_norm_forward<F: Scalar>(x: &[F], plane: usize, eps: F) -> (Vec<F>, Vec<F>) {
    let mut y = vec![F::zero(); x.len()];
    let mut inv_stds = Vec::with_capacity(x.len() / plane);
    let s = F::from_usize(plane).unwrap();
    for (xp, yp) in x.chunks(plane).zip(y.chunks_mut(plane)) {
        let mean = xp.iter().copied().sum::<F>() / s;
        let var = xp.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / s;
        let inv_std = F::one() / (var + eps).sqrt();
        for (o, &v) in yp.iter_mut().zip(xp) {
            *o = (v - mean) * inv_std;
        }
        inv_stds.push(inv_std);
    }
    (y, inv_stds)
}

pub(crate) fn instance_norm_backward<F: Scalar>(y: &[F], inv_stds: &[F], dy: &[F], plane: usize) -> Vec<F> {
    let mut dx = vec![F::zero(); y.len()];
    let s = F::from_usize(plane).unwrap();
    for (((yp, dyp), dxp), &inv_std) in y.chunks(plane).zip(dy.chunks(plane)).zip(dx.chunks_mut(plane)).zip(inv_stds) {
        let sum_dy = dyp.iter().copied().sum::<F>();
        let sum_dy_y = dyp.iter().zip(yp).map(|(&a, &b)| a * b).sum::<F>();
        for ((o, &g), &yv) in dxp.iter_mut().zip(dyp).zip(yp) {
            *o = inv_std / s * (s * g - sum_dy - yv * sum_dy_y);
        }
    }
    dx
}

pub(crate) fn upsample2x_forward<F: Scalar>(x: &[F], planes: usize, h: usize, w: usize) -> Vec<F> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![F::zero(); planes * h2 * w2];
    for (xp, op) in x.chunks(h * w).zip(out.chunks_mut(h2 * w2)) {
        for oy in 0..h2 {
            let src = &xp[(oy / 2) * w..(oy / 2 + 1) * w];
            for (ox, o) in op[oy * w2..(oy + 1) * w2].iter_mut().enumerate() {
                *o = src[ox / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<F: Scalar>(dy: &[F], planes: usize, h: usize, w: usize) -> Vec<F> {
    let w2 = 2 * w;
    let mut dx = vec![F::zero(); planes * h * w];
    for (dp, xp) in dy.chunks(4 * h * w).zip(dx.chunks_mut(h * w)) {
        for y in 0..h {
            for x in 0..w {
                let base = 2 * y * w2 + 2 * x;
                xp[y * w + x] = dp[base] + dp[base + 1] + dp[base + w2] + dp[base + w2 + 1];
            }
        }
    }
    dx
}

pub(crate) fn mean_pool_forward<F: Scalar>(x: &[F], planes: usize, h: usize, w: usize, k: usize) -> Vec<F> {
    let (ho, wo) = (h / k, w / k);
    let area = F::from_usize(k * k).unwrap();
    let mut out = vec![F::zero(); planes * ho * wo];
    for (xp, op) in x.chunks(h * w).zip(out.chunks_mut(ho * wo)) {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = F::zero();
                for dy in 0..k {
                    let row = &xp[(oy * k + dy) * w + ox * k..(oy * k + dy) * w + ox * k + k];
                    acc = acc + row.iter().copied().sum::<F>();
                }
                op[oy * wo + ox] = acc / area;
            }
        }
    }
    out
}

pub(crate) fn mean_pool_backward<F: Scalar>(dy: &[F], planes: usize, h: usize, w: usize, k: usize) -> Vec<F> {
    let (ho, wo) = (h / k, w / k);
    let area = F::from_usize(k * k).unwrap();
    let mut dx = vec![F::zero(); planes * h * w];
    for (dp, xp) in dy.chunks(ho * wo).zip(dx.chunks_mut(h * w)) {
        for y in 0..h {
            for x in 0..w {
                xp[y * w + x] = dp[(y / k) * wo + x / k] / area;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution used as an independent reference.
    fn conv_naive(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.n * g.cout * g.ho * g.wo];
        for n in 0..g.n {
            for co in 0..g.cout {
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let mut acc = 0.0;
                        for ci in 0..g.cin {
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    acc += x[((n * g.cin + ci) * g.h + iy as usize) * g.w + ix as usize] * w[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                                }
                            }
                        }
                        out[((n * g.cout + co) * g.ho + oy) * g.wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (2, 1, 4), (1, 0, 1), (2, 0, 2)] {
            let (h, w) = (7, 6);
            let ho = (h + 2 * pad - k) / stride + 1;
            let wo = (w + 2 * pad - k) / stride + 1;
            let g = ConvGeom {
                n: 2,
                cin: 3,
                h,
                w,
                cout: 4,
                kh: k,
                kw: k,
                stride,
                pad,
                ho,
                wo,
            };
            let x: Vec<f64> = (0..2 * 3 * h * w).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let wt: Vec<f64> = (0..4 * 3 * k * k).map(|i| ((i * 13 % 7) as f64) * 0.25 - 0.7).collect();
            let fast = conv2d_forward(&x, &wt, &g);
            let slow = conv_naive(&x, &wt, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad} k {k}");
            }
        }
    }

    #[test]
    fn upsample_adjoint_sums_blocks() {
        let x = vec![1.0f64, 2.0, 3.0, 4.0];
        let y = upsample2x_forward(&x, 1, 2, 2);
        assert_eq!(y[0..4], [1.0, 1.0, 2.0, 2.0]);
        let dx = upsample2x_backward(&[1.0; 16], 1, 2, 2);
        assert_eq!(dx, vec![4.0; 4]);
    }
}
