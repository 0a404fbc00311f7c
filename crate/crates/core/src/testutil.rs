//! Shared helpers for unit tests: seeded random tensors and naive loop oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub fn rand_tensor(dims: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    Tensor::new(
        dims.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

/// Same-padded grouped cross-correlation by direct summation.
pub fn naive_conv(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, groups: usize) -> Vec<f64> {
    let (b, cin, h, wd) = x.shape().bchw("t").unwrap();
    let (cout, cin_g, k, _) = w.shape().bchw("t").unwrap();
    let cout_g = cout / groups;
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; b * cout * h * wd];
    for bi in 0..b {
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = bias.map_or(0.0, |b| b.data()[o]);
                    for ci in 0..cin_g {
                        let i = (o / cout_g) * cin_g + ci;
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - pad;
                                let sx = xx as isize + kx as isize - pad;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                acc += w.data()[((o * cin_g + ci) * k + ky) * k + kx]
                                    * x.data()
                                        [((bi * cin + i) * h + sy as usize) * wd + sx as usize];
                            }
                        }
                    }
                    out[((bi * cout + o) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    out
}

/// Channel layer norm over axis 1 of `[B, C, H, W]` with biased variance.
pub fn naive_layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Vec<f64> {
    let (b, c, h, w) = x.shape().bchw("t").unwrap();
    let p = h * w;
    let mut out = vec![0.0; x.numel()];
    for bi in 0..b {
        for px in 0..p {
            let at = |ch: usize| (bi * c + ch) * p + px;
            let mean = (0..c).map(|ch| x.data()[at(ch)]).sum::<f64>() / c as f64;
            let var = (0..c)
                .map(|ch| (x.data()[at(ch)] - mean).powi(2))
                .sum::<f64>()
                / c as f64;
            for ch in 0..c {
                out[at(ch)] = (x.data()[at(ch)] - mean) / (var + eps).sqrt() * gamma.data()[ch]
                    + beta.data()[ch];
            }
        }
    }
    out
}

pub fn t(dims: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(dims.to_vec(), data).unwrap()
}
