use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::phantom::smooth_field;
use super::Volume;
use crate::error::{Error, Result};
use crate::field::FieldStrength;

/// Knobs of the low-field simulation. Noise is a fraction of the remapped
/// signal's nominal [0, 1] range.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradeParams {
    pub remap_tau_ms: f64,
    pub blur_sigma: f64,
    pub noise_frac: f64,
    /// Peak relative swing of the multiplicative bias field; 0 means no bias.
    pub bias_strength: f64,
}

impl DegradeParams {
    pub fn for_field(field: FieldStrength) -> Self {
        match field {
            FieldStrength::T1_5 => DegradeParams {
                remap_tau_ms: 1000.0,
                blur_sigma: 1.4,
                noise_frac: 0.03,
                bias_strength: 0.1,
            },
            FieldStrength::T3 => DegradeParams {
                remap_tau_ms: 1000.0,
                blur_sigma: 0.8,
                noise_frac: 0.015,
                bias_strength: 0.1,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.remap_tau_ms > 0.0
            && self.blur_sigma >= 0.0
            && self.noise_frac >= 0.0
            && (0.0..1.0).contains(&self.bias_strength);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(
                "degrade",
                format!("invalid parameters {self:?}"),
            ))
        }
    }
}

/// T1 map to T1-weighted-like signal: long T1 becomes dark. Strictly decreasing.
pub fn contrast_remap(t1_ms: f64, tau_ms: f64) -> f64 {
    (-t1_ms.max(0.0) / tau_ms).exp()
}

/// In-place separable Gaussian blur of one H×W plane, mirror boundaries.
pub fn gaussian_blur_plane(plane: &mut [f64], h: usize, w: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = taps.iter().sum();
    let mirror = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        // Repeated reflection handles radii wider than the image.
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n {
                i = 2 * n - i - 1;
            } else {
                return i as usize;
            }
        }
    };
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * plane[r * w + mirror(c as isize + k as isize - radius, w)])
                .sum::<f64>()
                / norm;
        }
    }
    for r in 0..h {
        for c in 0..w {
            plane[r * w + c] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * tmp[mirror(r as isize + k as isize - radius, h) * w + c])
                .sum::<f64>()
                / norm;
        }
    }
}

/// Simulated input scan at `field` from a phantom T1 map, default knobs.
pub fn degrade(y: &Volume, field: FieldStrength, seed: u64) -> Result<(Volume, DegradeParams)> {
    let params = DegradeParams::for_field(field);
    let x = degrade_with(y, &params, seed)?;
    Ok((x, params))
}

/// Contrast remap, in-plane blur, multiplicative bias field, additive noise.
pub fn degrade_with(y: &Volume, params: &DegradeParams, seed: u64) -> Result<Volume> {
    params.validate()?;
    let dims = y.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data: Vec<f64> = y
        .data()
        .iter()
        .map(|&t| contrast_remap(t, params.remap_tau_ms))
        .collect();
    for plane in data.chunks_mut(dims.plane()) {
        gaussian_blur_plane(plane, dims.h, dims.w, params.blur_sigma);
    }
    if params.bias_strength > 0.0 {
        let bias = smooth_field(&mut rng, dims, 3, 1.0);
        for (v, b) in data.iter_mut().zip(bias) {
            *v *= 1.0 + params.bias_strength * b;
        }
    }
    if params.noise_frac > 0.0 {
        let normal = Normal::new(0.0, params.noise_frac)
            .map_err(|e| Error::invalid("degrade", e.to_string()))?;
        for v in data.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let mut x = Volume::new(dims, data)?;
    x.spacing = y.spacing;
    Ok(x)
}
