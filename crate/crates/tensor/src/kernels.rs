//! Raw forward/backward loops over row-major buffers. Shapes are validated by
//! the graph layer before these are called.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.kw) / self.stride + 1
    }

    /// Output columns `ow` whose input column `ow*stride + k - padding` lies
    /// inside `[0, w)`.
    fn valid_cols(&self, k: usize) -> (usize, usize) {
        let ow_n = self.out_w();
        let lo = if k >= self.padding {
            0
        } else {
            (self.padding - k).div_ceil(self.stride)
        };
        // largest ow with ow*stride + k - padding <= w - 1
        let lim = self.w + self.padding;
        let hi = if lim > k {
            ((lim - k - 1) / self.stride + 1).min(ow_n)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn input_row(&self, oh: usize, k: usize) -> Option<usize> {
        let r = oh * self.stride + k;
        if r < self.padding || r - self.padding >= self.h {
            None
        } else {
            Some(r - self.padding)
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], k: &[f64], bias: &[f64]) -> Vec<f64> {
    let (oh_n, ow_n) = (g.out_h(), g.out_w());
    let plane = oh_n * ow_n;
    let mut out = vec![0.0; g.batch * g.cout * plane];
    for b in 0..g.batch {
        for co in 0..g.cout {
            let o = &mut out[(b * g.cout + co) * plane..][..plane];
            o.iter_mut().for_each(|v| *v = bias[co]);
            for ci in 0..g.cin {
                let xin = &x[(b * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = k[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                        let (lo, hi) = g.valid_cols(kx);
                        for oh in 0..oh_n {
                            let Some(ih) = g.input_row(oh, ky) else { continue };
                            let orow = &mut o[oh * ow_n..][..ow_n];
                            let xrow = &xin[ih * g.w..][..g.w];
                            for ow in lo..hi {
                                orow[ow] += wv * xrow[ow * g.stride + kx - g.padding];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (grad_input, grad_kernel, grad_bias).
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    k: &[f64],
    gout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh_n, ow_n) = (g.out_h(), g.out_w());
    let plane = oh_n * ow_n;
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gb = vec![0.0; g.cout];
    for b in 0..g.batch {
        for co in 0..g.cout {
            let go = &gout[(b * g.cout + co) * plane..][..plane];
            gb[co] += go.iter().sum::<f64>();
            for ci in 0..g.cin {
                let base = (b * g.cin + ci) * g.h * g.w;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let kidx = ((co * g.cin + ci) * g.kh + ky) * g.kw + kx;
                        let wv = k[kidx];
                        let (lo, hi) = g.valid_cols(kx);
                        let mut acc = 0.0;
                        for oh in 0..oh_n {
                            let Some(ih) = g.input_row(oh, ky) else { continue };
                            let grow = &go[oh * ow_n..][..ow_n];
                            let row = base + ih * g.w;
                            for ow in lo..hi {
                                let iw = ow * g.stride + kx - g.padding;
                                acc += grow[ow] * x[row + iw];
                                gx[row + iw] += wv * grow[ow];
                            }
                        }
                        gk[kidx] += acc;
                    }
                }
            }
        }
    }
    (gx, gk, gb)
}

/// Per-channel spatial convolution, one `[1,kh,kw]` filter per channel, no bias.
pub(crate) fn depthwise_forward(g: &ConvGeom, x: &[f64], k: &[f64]) -> Vec<f64> {
    let (oh_n, ow_n) = (g.out_h(), g.out_w());
    let plane = oh_n * ow_n;
    let mut out = vec![0.0; g.batch * g.cin * plane];
    for b in 0..g.batch {
        for c in 0..g.cin {
            let o = &mut out[(b * g.cin + c) * plane..][..plane];
            let xin = &x[(b * g.cin + c) * g.h * g.w..][..g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = k[(c * g.kh + ky) * g.kw + kx];
                    let (lo, hi) = g.valid_cols(kx);
                    for oh in 0..oh_n {
                        let Some(ih) = g.input_row(oh, ky) else { continue };
                        let orow = &mut o[oh * ow_n..][..ow_n];
                        let xrow = &xin[ih * g.w..][..g.w];
                        for ow in lo..hi {
                            orow[ow] += wv * xrow[ow * g.stride + kx - g.padding];
                        }
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
    k: &[f64],
    gout: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (oh_n, ow_n) = (g.out_h(), g.out_w());
    let plane = oh_n * ow_n;
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    for b in 0..g.batch {
        for c in 0..g.cin {
            let go = &gout[(b * g.cin + c) * plane..][..plane];
            let base = (b * g.cin + c) * g.h * g.w;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let kidx = (c * g.kh + ky) * g.kw + kx;
                    let wv = k[kidx];
                    let (lo, hi) = g.valid_cols(kx);
                    let mut acc = 0.0;
                    for oh in 0..oh_n {
                        let Some(ih) = g.input_row(oh, ky) else { continue };
                        let grow = &go[oh * ow_n..][..ow_n];
                        let row = base + ih * g.w;
                        for ow in lo..hi {
                            let iw = ow * g.stride + kx - g.padding;
                            acc += grow[ow] * x[row + iw];
                            gx[row + iw] += wv * grow[ow];
                        }
                    }
                    gk[kidx] += acc;
                }
            }
        }
    }
    (gx, gk)
}

/// 2x2 max pool, stride 2. Returns values and the flat input index of each max.
pub(crate) fn maxpool2_forward(bc: usize, h: usize, w: usize, x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(bc * oh * ow);
    let mut arg = Vec::with_capacity(bc * oh * ow);
    for p in 0..bc {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if x[idx] > x[best] || x[idx].is_nan() {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample2_forward(bc: usize, h: usize, w: usize, x: &[f64]) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; bc * oh * ow];
    for p in 0..bc {
        for i in 0..oh {
            for j in 0..ow {
                out[(p * oh + i) * ow + j] = x[(p * h + i / 2) * w + j / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(bc: usize, h: usize, w: usize, gout: &[f64]) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut gx = vec![0.0; bc * h * w];
    for p in 0..bc {
        for i in 0..oh {
            for j in 0..ow {
                gx[(p * h + i / 2) * w + j / 2] += gout[(p * oh + i) * ow + j];
            }
        }
    }
    gx
}
