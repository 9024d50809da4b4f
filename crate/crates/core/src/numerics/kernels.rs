//! Raw loops behind the spatial graph operations. Everything here works on
//! row-major slices in `[H, W, C]` layout and knows nothing about the graph.

#[inline]
fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in acc.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Input pixel feeding output `(oy, ox)` through tap `(ky, kx)`, if inside the image.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad)?;
        (iy < self.h && ix < self.w).then_some(iy * self.w + ix)
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], wt: &[f64], b: &[f64]) -> Vec<f64> {
    let (ci, co, k) = (g.cin, g.cout, g.k);
    let mut out = vec![0.0; g.oh * g.ow * co];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let o = &mut out[(oy * g.ow + ox) * co..][..co];
            o.copy_from_slice(b);
            for ky in 0..k {
                for kx in 0..k {
                    let Some(src) = g.source(oy, ox, ky, kx) else { continue };
                    let xin = &x[src * ci..][..ci];
                    let wk = &wt[(ky * k + kx) * ci * co..][..ci * co];
                    for (c, &xv) in xin.iter().enumerate() {
                        axpy(o, xv, &wk[c * co..][..co]);
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_weight, grad_bias)`; the input gradient is skipped when not needed.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    wt: &[f64],
    go: &[f64],
    need_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (ci, co, k) = (g.cin, g.cout, g.k);
    let mut gx = need_input.then(|| vec![0.0; g.h * g.w * ci]);
    let mut gw = vec![0.0; wt.len()];
    let mut gb = vec![0.0; co];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let gout = &go[(oy * g.ow + ox) * co..][..co];
            axpy(&mut gb, 1.0, gout);
            for ky in 0..k {
                for kx in 0..k {
                    let Some(src) = g.source(oy, ox, ky, kx) else { continue };
                    let base = (ky * k + kx) * ci * co;
                    let xin = &x[src * ci..][..ci];
                    for (c, &xv) in xin.iter().enumerate() {
                        axpy(&mut gw[base + c * co..][..co], xv, gout);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let wk = &wt[base..][..ci * co];
                        let gxin = &mut gx[src * ci..][..ci];
                        for (c, gv) in gxin.iter_mut().enumerate() {
                            *gv += dot(gout, &wk[c * co..][..co]);
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Per-channel `k×k` convolution with stride 1. Weight layout `[k, k, C]`.
pub(crate) fn depthwise_forward(g: &ConvGeom, x: &[f64], wt: &[f64], b: &[f64]) -> Vec<f64> {
    let (c, k) = (g.cin, g.k);
    let mut out = vec![0.0; g.oh * g.ow * c];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let o = &mut out[(oy * g.ow + ox) * c..][..c];
            o.copy_from_slice(b);
            for ky in 0..k {
                for kx in 0..k {
                    let Some(src) = g.source(oy, ox, ky, kx) else { continue };
                    let xin = &x[src * c..][..c];
                    let wk = &wt[(ky * k + kx) * c..][..c];
                    for ((o, xv), wv) in o.iter_mut().zip(xin).zip(wk) {
                        *o += xv * wv;
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward(
    g: &ConvGeom,
    x: &[f64],
    wt: &[f64],
    go: &[f64],
    need_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (c, k) = (g.cin, g.k);
    let mut gx = need_input.then(|| vec![0.0; g.h * g.w * c]);
    let mut gw = vec![0.0; wt.len()];
    let mut gb = vec![0.0; c];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let gout = &go[(oy * g.ow + ox) * c..][..c];
            axpy(&mut gb, 1.0, gout);
            for ky in 0..k {
                for kx in 0..k {
                    let Some(src) = g.source(oy, ox, ky, kx) else { continue };
                    let base = (ky * k + kx) * c;
                    let xin = &x[src * c..][..c];
                    for ch in 0..c {
                        gw[base + ch] += xin[ch] * gout[ch];
                    }
                    if let Some(gx) = gx.as_mut() {
                        for ch in 0..c {
                            gx[src * c + ch] += wt[base + ch] * gout[ch];
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Stride-2, 2×2 transposed convolution: every input pixel scatters into its own 2×2 cell.
pub(crate) fn deconv2_forward(h: usize, w: usize, ci: usize, co: usize, x: &[f64], wt: &[f64], b: &[f64]) -> Vec<f64> {
    let ow = 2 * w;
    let mut out = vec![0.0; 4 * h * w * co];
    for y in 0..h {
        for xx in 0..w {
            let xin = &x[(y * w + xx) * ci..][..ci];
            for a in 0..2 {
                for bb in 0..2 {
                    let o = &mut out[((2 * y + a) * ow + 2 * xx + bb) * co..][..co];
                    o.copy_from_slice(b);
                    let wk = &wt[(a * 2 + bb) * ci * co..][..ci * co];
                    for (c, &xv) in xin.iter().enumerate() {
                        axpy(o, xv, &wk[c * co..][..co]);
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn deconv2_backward(
    h: usize,
    w: usize,
    ci: usize,
    co: usize,
    x: &[f64],
    wt: &[f64],
    go: &[f64],
    need_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let ow = 2 * w;
    let mut gx = need_input.then(|| vec![0.0; h * w * ci]);
    let mut gw = vec![0.0; wt.len()];
    let mut gb = vec![0.0; co];
    for y in 0..h {
        for xx in 0..w {
            let src = y * w + xx;
            for a in 0..2 {
                for bb in 0..2 {
                    let gout = &go[((2 * y + a) * ow + 2 * xx + bb) * co..][..co];
                    axpy(&mut gb, 1.0, gout);
                    let base = (a * 2 + bb) * ci * co;
                    for c in 0..ci {
                        axpy(&mut gw[base + c * co..][..co], x[src * ci + c], gout);
                    }
                    if let Some(gx) = gx.as_mut() {
                        for c in 0..ci {
                            gx[src * ci + c] += dot(gout, &wt[base + c * co..][..co]);
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// 2×2 mean pooling over the two leading axes; `inner` is the product of the rest.
pub(crate) fn avg_pool2_forward(h: usize, w: usize, inner: usize, x: &[f64]) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow * inner];
    for y in 0..oh {
        for xx in 0..ow {
            let o = &mut out[(y * ow + xx) * inner..][..inner];
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let s = &x[((2 * y + dy) * w + 2 * xx + dx) * inner..][..inner];
                axpy(o, 0.25, s);
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward(h: usize, w: usize, inner: usize, go: &[f64]) -> Vec<f64> {
    let ow = w / 2;
    let mut gx = vec![0.0; h * w * inner];
    for y in 0..h {
        for xx in 0..w {
            let gs = &go[((y / 2) * ow + xx / 2) * inner..][..inner];
            let d = &mut gx[(y * w + xx) * inner..][..inner];
            axpy(d, 0.25, gs);
        }
    }
    gx
}

/// `[m, k] × [k, n]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let o = &mut out[i * n..][..n];
        for (p, &av) in a[i * k..][..k].iter().enumerate() {
            axpy(o, av, &b[p * n..][..n]);
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}
