//! Small dense kernels shared by the public ops and the training engine.
//! Planar layouts throughout: `data[c * n + i]` for channel `c`, pixel `i`.

/// Softmax over channels at every pixel of a K×N planar array.
pub fn softmax_channels(logits: &[f64], k: usize) -> Vec<f64> {
    let n = logits.len() / k;
    let mut out = vec![0.0; logits.len()];
    for i in 0..n {
        let mut m = f64::NEG_INFINITY;
        for c in 0..k {
            m = m.max(logits[c * n + i]);
        }
        let mut s = 0.0;
        for c in 0..k {
            let e = (logits[c * n + i] - m).exp();
            out[c * n + i] = e;
            s += e;
        }
        for c in 0..k {
            out[c * n + i] /= s;
        }
    }
    out
}

/// Log-softmax over channels at every pixel of a K×N planar array.
pub fn log_softmax_channels(logits: &[f64], k: usize) -> Vec<f64> {
    let n = logits.len() / k;
    let mut out = vec![0.0; logits.len()];
    for i in 0..n {
        let mut m = f64::NEG_INFINITY;
        for c in 0..k {
            m = m.max(logits[c * n + i]);
        }
        let mut s = 0.0;
        for c in 0..k {
            s += (logits[c * n + i] - m).exp();
        }
        let lse = m + s.ln();
        for c in 0..k {
            out[c * n + i] = logits[c * n + i] - lse;
        }
    }
    out
}

/// Softmax of a plain vector.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = values.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Dense affine map applied per pixel: `out[o][i] = Σ_j w[o][j] · in[j][i] + b[o]`.
///
/// `inputs` lists planar blocks that are concatenated along channels.
pub fn affine_pixels(
    weight: &[f64],
    bias: &[f64],
    inputs: &[&[f64]],
    in_channels: &[usize],
    n: usize,
) -> Vec<f64> {
    let out_dim = bias.len();
    let in_dim: usize = in_channels.iter().sum();
    debug_assert_eq!(weight.len(), out_dim * in_dim);
    let mut out = vec![0.0; out_dim * n];
    for o in 0..out_dim {
        let row = &weight[o * in_dim..(o + 1) * in_dim];
        let dst = &mut out[o * n..(o + 1) * n];
        dst.iter_mut().for_each(|d| *d = bias[o]);
        let mut j = 0;
        for (block, &cb) in inputs.iter().zip(in_channels) {
            for c in 0..cb {
                let wv = row[j];
                j += 1;
                if wv == 0.0 {
                    continue;
                }
                let src = &block[c * n..(c + 1) * n];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wv * s;
                }
            }
        }
    }
    out
}

/// Backward of [`affine_pixels`]: accumulates weight/bias gradients and
/// returns input gradients for the requested blocks.
#[allow(clippy::too_many_arguments)]
pub fn affine_pixels_backward(
    weight: &[f64],
    inputs: &[&[f64]],
    in_channels: &[usize],
    n: usize,
    grad_out: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    want_input_grads: bool,
) -> Vec<Vec<f64>> {
    let out_dim = grad_bias.len();
    let in_dim: usize = in_channels.iter().sum();
    for o in 0..out_dim {
        let g = &grad_out[o * n..(o + 1) * n];
        grad_bias[o] += g.iter().sum::<f64>();
        let mut j = 0;
        for (block, &cb) in inputs.iter().zip(in_channels) {
            for c in 0..cb {
                let src = &block[c * n..(c + 1) * n];
                grad_weight[o * in_dim + j] += g.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                j += 1;
            }
        }
    }
    if !want_input_grads {
        return Vec::new();
    }
    let mut grads: Vec<Vec<f64>> = in_channels.iter().map(|&cb| vec![0.0; cb * n]).collect();
    for o in 0..out_dim {
        let g = &grad_out[o * n..(o + 1) * n];
        let mut j = 0;
        for (gb, &cb) in grads.iter_mut().zip(in_channels) {
            for c in 0..cb {
                let wv = weight[o * in_dim + j];
                j += 1;
                if wv == 0.0 {
                    continue;
                }
                for (d, s) in gb[c * n..(c + 1) * n].iter_mut().zip(g) {
                    *d += wv * s;
                }
            }
        }
    }
    grads
}

/// Up to four bilinear taps for one output pixel.
#[derive(Debug, Clone, Copy)]
pub struct Taps {
    pub idx: [usize; 4],
    pub wt: [f64; 4],
    pub len: usize,
}

/// Bilinear taps sampling an H×W grid at (sx, sy) after clamping to the grid.
pub fn bilinear_taps(sx: f64, sy: f64, h: usize, w: usize) -> Taps {
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let x0 = x0 as usize;
    let y0 = y0 as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let cand = [
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ];
    let mut taps = Taps {
        idx: [0; 4],
        wt: [0.0; 4],
        len: 0,
    };
    for (i, wt) in cand {
        if wt != 0.0 {
            taps.idx[taps.len] = i;
            taps.wt[taps.len] = wt;
            taps.len += 1;
        }
    }
    taps
}

/// Per-pixel taps for a backward warp along an interleaved H×W×2 flow.
pub fn flow_taps(flow: &[f32], h: usize, w: usize) -> Vec<Taps> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = x as f64 + flow[2 * i] as f64;
            let sy = y as f64 + flow[2 * i + 1] as f64;
            out.push(bilinear_taps(sx, sy, h, w));
        }
    }
    out
}

/// Gathers every channel of a planar C×N array through `taps`.
pub fn gather(src: &[f64], channels: usize, taps: &[Taps]) -> Vec<f64> {
    let n = taps.len();
    let mut out = vec![0.0; channels * n];
    for c in 0..channels {
        let plane = &src[c * n..(c + 1) * n];
        let dst = &mut out[c * n..(c + 1) * n];
        for (d, t) in dst.iter_mut().zip(taps) {
            let mut acc = plane[t.idx[0]] * t.wt[0];
            for k in 1..t.len {
                acc += plane[t.idx[k]] * t.wt[k];
            }
            *d = acc;
        }
    }
    out
}

/// Adjoint of [`gather`]: scatters `grad` back onto the source grid.
pub fn scatter(grad: &[f64], channels: usize, taps: &[Taps]) -> Vec<f64> {
    let n = taps.len();
    let mut out = vec![0.0; channels * n];
    for c in 0..channels {
        let g = &grad[c * n..(c + 1) * n];
        let dst = &mut out[c * n..(c + 1) * n];
        for (gv, t) in g.iter().zip(taps) {
            for k in 0..t.len {
                dst[t.idx[k]] += gv * t.wt[k];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = vec![1.0, -2.0, 0.5, 3.0, 0.0, 0.0];
        let p = softmax_channels(&logits, 3);
        for i in 0..2 {
            let s: f64 = (0..3).map(|c| p[c * 2 + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let lp = log_softmax_channels(&logits, 3);
        for (a, b) in p.iter().zip(&lp) {
            assert!((a.ln() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn scatter_is_adjoint_of_gather() {
        let (h, w) = (4, 5);
        let flow: Vec<f32> = (0..h * w * 2).map(|i| ((i * 7) % 11) as f32 * 0.37 - 1.8).collect();
        let taps = flow_taps(&flow, h, w);
        let x: Vec<f64> = (0..2 * h * w).map(|i| ((i * 5) % 13) as f64 - 6.0).collect();
        let y: Vec<f64> = (0..2 * h * w).map(|i| ((i * 3) % 7) as f64 * 0.5).collect();
        let ax = gather(&x, 2, &taps);
        let aty = scatter(&y, 2, &taps);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn affine_backward_matches_definition() {
        let n = 3;
        let a = vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0];
        let b = vec![0.25, -0.75, 1.5];
        let w = vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6];
        let bias = vec![0.01, -0.02];
        let out = affine_pixels(&w, &bias, &[&a, &b], &[2, 1], n);
        assert!((out[0] - (0.1 * 1.0 + 0.2 * 1.0 + 0.3 * 0.25 + 0.01)).abs() < 1e-12);
        let g = vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        let mut gw = vec![0.0; 6];
        let mut gb = vec![0.0; 2];
        let gi = affine_pixels_backward(&w, &[&a, &b], &[2, 1], n, &g, &mut gw, &mut gb, true);
        assert_eq!(gb, vec![1.0, 1.0]);
        assert_eq!(gw, vec![1.0, -1.0, 0.25, 3.0, 2.0, 1.5]);
        assert_eq!(gi[1], vec![0.3, 0.0, -0.6]);
    }
}
