//! Channels-last "same" convolution kernels, stride 1.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvDims {
    pub height: usize,
    pub width: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl ConvDims {
    fn pad(&self) -> isize {
        (self.k as isize - 1) / 2
    }

    /// Visits every (output pixel, kernel tap, input pixel) triple inside the
    /// zero-padded window, in a fixed order.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let pad = self.pad();
        let (h, w, k) = (self.height as isize, self.width as isize, self.k as isize);
        for oy in 0..h {
            for ox in 0..w {
                let out_pix = (oy * w + ox) as usize;
                for ky in 0..k {
                    let iy = oy + ky - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = ox + kx - pad;
                        if ix < 0 || ix >= w {
                            continue;
                        }
                        f(out_pix, (ky * k + kx) as usize, (iy * w + ix) as usize);
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(dims: ConvDims, input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let ConvDims { c_in, c_out, .. } = dims;
    let mut out = vec![0.0; dims.height * dims.width * c_out];
    for px in out.chunks_exact_mut(c_out) {
        px.copy_from_slice(bias);
    }
    dims.for_each_tap(|out_pix, tap, in_pix| {
        let x = &input[in_pix * c_in..(in_pix + 1) * c_in];
        let o = &mut out[out_pix * c_out..(out_pix + 1) * c_out];
        for (ci, &xv) in x.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let row = &kernel[(tap * c_in + ci) * c_out..(tap * c_in + ci + 1) * c_out];
            for (ov, &kv) in o.iter_mut().zip(row) {
                *ov += xv * kv;
            }
        }
    });
    out
}

/// Returns (grad_input, grad_kernel, grad_bias); each is only computed when requested.
pub(crate) fn backward(
    dims: ConvDims,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    want: [bool; 3],
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let ConvDims { c_in, c_out, .. } = dims;
    let mut g_in = want[0].then(|| vec![0.0; input.len()]);
    let mut g_k = want[1].then(|| vec![0.0; kernel.len()]);
    let g_b = want[2].then(|| {
        let mut b = vec![0.0; c_out];
        for px in grad_out.chunks_exact(c_out) {
            b.iter_mut().zip(px).for_each(|(a, g)| *a += g);
        }
        b
    });
    if g_in.is_some() || g_k.is_some() {
        dims.for_each_tap(|out_pix, tap, in_pix| {
            let g = &grad_out[out_pix * c_out..(out_pix + 1) * c_out];
            for ci in 0..c_in {
                let krange = (tap * c_in + ci) * c_out..(tap * c_in + ci + 1) * c_out;
                if let Some(gi) = g_in.as_mut() {
                    let row = &kernel[krange.clone()];
                    let dot: f64 = row.iter().zip(g).map(|(a, b)| a * b).sum();
                    gi[in_pix * c_in + ci] += dot;
                }
                if let Some(gk) = g_k.as_mut() {
                    let xv = input[in_pix * c_in + ci];
                    if xv != 0.0 {
                        for (a, &b) in gk[krange].iter_mut().zip(g) {
                            *a += xv * b;
                        }
                    }
                }
            }
        });
    }
    (g_in, g_k, g_b)
}
