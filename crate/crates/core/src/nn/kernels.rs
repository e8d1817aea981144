//! Raw forward/backward kernels on flat row-major buffers.

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Output columns `[lo, hi)` whose input column `ow*stride + kw - pad` is in bounds.
    #[inline]
    fn col_range(&self, kw: usize) -> (usize, usize) {
        let lo = if self.pad > kw { (self.pad - kw).div_ceil(self.stride) } else { 0 };
        let hi = if self.w + self.pad > kw {
            ((self.w - 1 + self.pad - kw) / self.stride + 1).min(self.ow)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    #[inline]
    fn in_row(&self, oh: usize, kh: usize) -> Option<usize> {
        let ih = (oh * self.stride + kh) as isize - self.pad as isize;
        (ih >= 0 && (ih as usize) < self.h).then_some(ih as usize)
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], weight: &[f64], bias: &[f64], out: &mut [f64]) {
    let (in_plane, out_plane, k) = (g.h * g.w, g.oh * g.ow, g.kernel);
    let col_ranges: Vec<(usize, usize)> = (0..k).map(|kw| g.col_range(kw)).collect();
    for n in 0..g.batch {
        for oc in 0..g.out_ch {
            let o = &mut out[(n * g.out_ch + oc) * out_plane..][..out_plane];
            o.fill(bias[oc]);
            for ic in 0..g.in_ch {
                let xi = &x[(n * g.in_ch + ic) * in_plane..][..in_plane];
                let wk = &weight[(oc * g.in_ch + ic) * k * k..][..k * k];
                for kh in 0..k {
                    for oh in 0..g.oh {
                        let Some(ih) = g.in_row(oh, kh) else { continue };
                        let xrow = &xi[ih * g.w..][..g.w];
                        let orow = &mut o[oh * g.ow..][..g.ow];
                        for (kw, &(lo, hi)) in col_ranges.iter().enumerate() {
                            let wv = wk[kh * k + kw];
                            for ow in lo..hi {
                                orow[ow] += wv * xrow[ow * g.stride + kw - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight and bias gradients, and the input gradient when `dx` is given.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    mut dx: Option<&mut [f64]>,
) {
    let (in_plane, out_plane, k) = (g.h * g.w, g.oh * g.ow, g.kernel);
    let col_ranges: Vec<(usize, usize)> = (0..k).map(|kw| g.col_range(kw)).collect();
    for n in 0..g.batch {
        for oc in 0..g.out_ch {
            let d = &dy[(n * g.out_ch + oc) * out_plane..][..out_plane];
            db[oc] += d.iter().sum::<f64>();
            for ic in 0..g.in_ch {
                let base = (n * g.in_ch + ic) * in_plane;
                let xi = &x[base..][..in_plane];
                let wbase = (oc * g.in_ch + ic) * k * k;
                for kh in 0..k {
                    for oh in 0..g.oh {
                        let Some(ih) = g.in_row(oh, kh) else { continue };
                        let drow = &d[oh * g.ow..][..g.ow];
                        let xrow = &xi[ih * g.w..][..g.w];
                        for (kw, &(lo, hi)) in col_ranges.iter().enumerate() {
                            let mut acc = 0.0;
                            for ow in lo..hi {
                                acc += drow[ow] * xrow[ow * g.stride + kw - g.pad];
                            }
                            dw[wbase + kh * k + kw] += acc;
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let dxrow = &mut dx[base + ih * g.w..][..g.w];
                            for (kw, &(lo, hi)) in col_ranges.iter().enumerate() {
                                let wv = weight[wbase + kh * k + kw];
                                for ow in lo..hi {
                                    dxrow[ow * g.stride + kw - g.pad] += wv * drow[ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn dense_forward(batch: usize, input: usize, output: usize, x: &[f64], weight: &[f64], bias: &[f64], out: &mut [f64]) {
    for n in 0..batch {
        let xr = &x[n * input..][..input];
        for o in 0..output {
            let wr = &weight[o * input..][..input];
            out[n * output + o] = bias[o] + wr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward(
    batch: usize,
    input: usize,
    output: usize,
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    mut dx: Option<&mut [f64]>,
) {
    for n in 0..batch {
        let xr = &x[n * input..][..input];
        for o in 0..output {
            let g = dy[n * output + o];
            db[o] += g;
            let dwr = &mut dw[o * input..][..input];
            for (d, &xv) in dwr.iter_mut().zip(xr) {
                *d += g * xv;
            }
            if let Some(dx) = dx.as_deref_mut() {
                let wr = &weight[o * input..][..input];
                let dxr = &mut dx[n * input..][..input];
                for (d, &wv) in dxr.iter_mut().zip(wr) {
                    *d += g * wv;
                }
            }
        }
    }
}

pub(crate) fn maxpool_forward(planes: usize, h: usize, w: usize, x: &[f64], out: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..planes {
        let xi = &x[p * h * w..][..h * w];
        for i in 0..oh {
            for j in 0..ow {
                let (r, c) = (2 * i, 2 * j);
                let m = xi[r * w + c]
                    .max(xi[r * w + c + 1])
                    .max(xi[(r + 1) * w + c])
                    .max(xi[(r + 1) * w + c + 1]);
                out[p * oh * ow + i * ow + j] = m;
            }
        }
    }
}

/// Routes each output gradient to the first maximal input of its window.
pub(crate) fn maxpool_backward(planes: usize, h: usize, w: usize, x: &[f64], dy: &[f64], dx: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let (r, c) = (2 * i, 2 * j);
                let cands = [r * w + c, r * w + c + 1, (r + 1) * w + c, (r + 1) * w + c + 1];
                let mut best = cands[0];
                for &q in &cands[1..] {
                    if x[base + q] > x[base + best] {
                        best = q;
                    }
                }
                dx[base + best] += dy[p * oh * ow + i * ow + j];
            }
        }
    }
}
