//! Photometric augmentation applied to target frames: Gaussian blur and
//! color jitter, shared across the frames of a stack.

use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::tensor::FrameStack;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Probability that a stack is augmented at all.
    pub probability: f64,
    pub blur_kernel_sizes: Vec<usize>,
    pub blur_sigma: [f64; 2],
    pub jitter_gain: [f64; 2],
    pub jitter_shift: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            probability: 0.8,
            blur_kernel_sizes: vec![3, 5, 7],
            blur_sigma: [0.15, 1.15],
            jitter_gain: [0.75, 1.25],
            jitter_shift: [-0.1, 0.1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlurParams {
    pub kernel_size: usize,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterParams {
    pub gain: [f64; 3],
    pub shift: [f64; 3],
}

/// One concrete draw of the augmentation operator.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugmentParams {
    pub blur: Option<BlurParams>,
    pub jitter: Option<JitterParams>,
}

/// Draws augmentation parameters. `None` is the unchanged branch.
///
/// Inside the augmented branch one of {blur, jitter, both} is chosen uniformly.
pub fn sample_params(rng: &mut Rng, cfg: &AugmentConfig) -> Option<AugmentParams> {
    if !cfg.enabled || !rng.bernoulli(cfg.probability) {
        return None;
    }
    let which = rng.below(3);
    let blur = (which != 1 && !cfg.blur_kernel_sizes.is_empty()).then(|| {
        let kernel_size = cfg.blur_kernel_sizes[rng.below(cfg.blur_kernel_sizes.len() as u64) as usize];
        BlurParams {
            kernel_size,
            sigma: rng.uniform(cfg.blur_sigma[0], cfg.blur_sigma[1]),
        }
    });
    let jitter = (which != 0).then(|| {
        let mut gain = [0.0; 3];
        let mut shift = [0.0; 3];
        for c in 0..3 {
            gain[c] = rng.uniform(cfg.jitter_gain[0], cfg.jitter_gain[1]);
            shift[c] = rng.uniform(cfg.jitter_shift[0], cfg.jitter_shift[1]);
        }
        JitterParams { gain, shift }
    });
    Some(AugmentParams { blur, jitter })
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Separable blur of one H×W plane with edge-clamp padding.
fn blur_plane(plane: &[f32], h: usize, w: usize, kernel: &[f64]) -> Vec<f32> {
    let half = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let xx = (x as isize + i as isize - half).clamp(0, w as isize - 1) as usize;
                acc += k * plane[y * w + xx] as f64;
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let yy = (y as isize + i as isize - half).clamp(0, h as isize - 1) as usize;
                acc += k * tmp[yy * w + x];
            }
            out[y * w + x] = acc as f32;
        }
    }
    out
}

/// Applies fixed parameters to every frame of the stack (blur, then jitter).
pub fn apply_params(frames: &FrameStack, params: &AugmentParams) -> FrameStack {
    let (t, c, h, w) = (frames.len(), frames.channels(), frames.height(), frames.width());
    let plane = h * w;
    let mut data = frames.data().to_vec();
    if let Some(b) = params.blur {
        let kernel = gaussian_kernel(b.kernel_size, b.sigma);
        for p in data.chunks_exact_mut(plane) {
            let blurred = blur_plane(p, h, w, &kernel);
            p.copy_from_slice(&blurred);
        }
    }
    if let Some(j) = params.jitter {
        for (pi, p) in data.chunks_exact_mut(plane).enumerate() {
            let ch = (pi % c).min(2);
            let (g, s) = (j.gain[ch], j.shift[ch]);
            for v in p.iter_mut() {
                *v = ((*v as f64) * g + s).clamp(0.0, 1.0) as f32;
            }
        }
    }
    FrameStack::from_vec(t, c, h, w, data).expect("shape preserved")
}

/// The augmentation operator: with probability `cfg.probability` blur and/or
/// jitter with freshly drawn parameters, otherwise the input unchanged.
pub fn augment(rng: &mut Rng, frames: &FrameStack, cfg: &AugmentConfig) -> FrameStack {
    match sample_params(rng, cfg) {
        Some(p) => apply_params(frames, &p),
        None => frames.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(values: impl Fn(usize) -> f32, t: usize) -> FrameStack {
        let n = t * 3 * 5 * 6;
        FrameStack::from_vec(t, 3, 5, 6, (0..n).map(values).collect()).unwrap()
    }

    #[test]
    fn identity_branch() {
        let cfg = AugmentConfig {
            probability: 0.0,
            ..Default::default()
        };
        let fs = stack(|i| (i % 7) as f32 / 7.0, 2);
        assert_eq!(augment(&mut Rng::new(1), &fs, &cfg), fs);
    }

    #[test]
    fn blur_of_constant_is_constant() {
        let fs = stack(|_| 0.37, 2);
        for (k, s) in [(3, 0.15), (5, 0.6), (7, 1.15)] {
            let out = apply_params(
                &fs,
                &AugmentParams {
                    blur: Some(BlurParams {
                        kernel_size: k,
                        sigma: s,
                    }),
                    jitter: None,
                },
            );
            assert_eq!(out, fs);
        }
    }

    #[test]
    fn jitter_clamps() {
        let fs = stack(|_| 0.95, 1);
        let out = apply_params(
            &fs,
            &AugmentParams {
                blur: None,
                jitter: Some(JitterParams {
                    gain: [1.0; 3],
                    shift: [0.1; 3],
                }),
            },
        );
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn preserves_shape_range_and_is_reproducible() {
        let cfg = AugmentConfig {
            probability: 1.0,
            ..Default::default()
        };
        let fs = stack(|i| ((i * 37) % 101) as f32 / 100.0, 2);
        for seed in 0..50 {
            let a = augment(&mut Rng::new(seed), &fs, &cfg);
            let b = augment(&mut Rng::new(seed), &fs, &cfg);
            assert_eq!(a, b);
            assert_eq!(a.tensor().shape(), fs.tensor().shape());
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn frames_share_parameters() {
        let cfg = AugmentConfig {
            probability: 1.0,
            ..Default::default()
        };
        let fs = stack(|i| ((i * 13) % 29) as f32 / 29.0, 2);
        for seed in 0..20 {
            let params = sample_params(&mut Rng::new(seed), &cfg).unwrap();
            let whole = augment(&mut Rng::new(seed), &fs, &cfg);
            for i in 0..2 {
                let single = FrameStack::from_frames(&[&fs.frame_tensor(i)]).unwrap();
                let alone = apply_params(&single, &params);
                assert_eq!(alone.frame(0), whole.frame(i));
            }
        }
    }

    #[test]
    fn sampled_ranges() {
        let cfg = AugmentConfig::default();
        let mut rng = Rng::new(11);
        let mut applied = 0;
        for _ in 0..2000 {
            if let Some(p) = sample_params(&mut rng, &cfg) {
                applied += 1;
                assert!(p.blur.is_some() || p.jitter.is_some());
                if let Some(b) = p.blur {
                    assert!([3, 5, 7].contains(&b.kernel_size));
                    assert!((0.15..=1.15).contains(&b.sigma));
                }
                if let Some(j) = p.jitter {
                    assert!(j.gain.iter().all(|g| (0.75..=1.25).contains(g)));
                    assert!(j.shift.iter().all(|s| (-0.1..=0.1).contains(s)));
                }
            }
        }
        let rate = applied as f64 / 2000.0;
        assert!((rate - 0.8).abs() < 0.04, "{rate}");
    }
}
