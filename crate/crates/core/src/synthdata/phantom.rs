use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dims3, Volume};
use crate::error::{Error, Result};

/// Tissue classes with their T1 value bands in ms (high-field, MP2RAGE-like).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tissue {
    WhiteMatter,
    GrayMatter,
    Csf,
    Lesion,
}

impl Tissue {
    pub const BANDS: [Tissue; 3] = [Tissue::WhiteMatter, Tissue::GrayMatter, Tissue::Csf];

    pub fn t1_range_ms(self) -> (f64, f64) {
        match self {
            Tissue::WhiteMatter => (1100.0, 1200.0),
            Tissue::GrayMatter => (1850.0, 1950.0),
            Tissue::Csf => (3700.0, 3900.0),
            Tissue::Lesion => (2600.0, 2800.0),
        }
    }
}

/// Background is white-matter-like tissue modulated by a smooth field.
pub const BACKGROUND_T1_MS: f64 = 1150.0;
pub const BACKGROUND_SWING_MS: f64 = 80.0;
const EDGE_SOFTNESS: f64 = 0.04;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomParams {
    /// 0 gives a pure smooth background; 1 gives 20 ellipsoids and 4 lesions.
    pub complexity: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams { complexity: 0.5 }
    }
}

impl PhantomParams {
    pub fn ellipsoid_count(&self) -> usize {
        if self.complexity <= 0.0 {
            0
        } else {
            5 + (15.0 * self.complexity).round() as usize
        }
    }

    pub fn lesion_count(&self) -> usize {
        (4.0 * self.complexity).round() as usize
    }
}

/// Sum of random low-frequency cosines, scaled to peak amplitude 1.
pub(crate) fn smooth_field(
    rng: &mut ChaCha8Rng,
    dims: Dims3,
    terms: usize,
    max_cycles: f64,
) -> Vec<f64> {
    let waves: Vec<([f64; 3], f64, f64)> = (0..terms)
        .map(|_| {
            let f = [
                rng.random_range(0.0..max_cycles * 0.5),
                rng.random_range(0.0..max_cycles),
                rng.random_range(0.0..max_cycles),
            ];
            (
                f,
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.5..1.0),
            )
        })
        .collect();
    let norm: f64 = waves
        .iter()
        .map(|w| w.2)
        .sum::<f64>()
        .max(f64::MIN_POSITIVE);
    let mut out = Vec::with_capacity(dims.numel());
    for z in 0..dims.d {
        let pz = (z as f64 + 0.5) / dims.d as f64;
        for y in 0..dims.h {
            let py = (y as f64 + 0.5) / dims.h as f64;
            for x in 0..dims.w {
                let px = (x as f64 + 0.5) / dims.w as f64;
                let s: f64 = waves
                    .iter()
                    .map(|(f, phase, amp)| {
                        amp * (2.0 * PI * (f[0] * pz + f[1] * py + f[2] * px) + phase).cos()
                    })
                    .sum();
                out.push(s / norm);
            }
        }
    }
    out
}

struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
    angle: f64,
    value: f64,
}

impl Ellipsoid {
    fn random(rng: &mut ChaCha8Rng, tissue: Tissue, size: (f64, f64)) -> Self {
        let (lo, hi) = tissue.t1_range_ms();
        Ellipsoid {
            center: [
                rng.random_range(0.2..0.8),
                rng.random_range(0.15..0.85),
                rng.random_range(0.15..0.85),
            ],
            semi: [
                rng.random_range(0.25..0.7),
                rng.random_range(size.0..size.1),
                rng.random_range(size.0..size.1),
            ],
            angle: rng.random_range(0.0..PI),
            value: rng.random_range(lo..hi),
        }
    }

    /// Soft membership weight in [0, 1] at normalized coordinates.
    fn weight(&self, p: [f64; 3]) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let dy = p[1] - self.center[1];
        let dx = p[2] - self.center[2];
        let u = c * dy + s * dx;
        let v = -s * dy + c * dx;
        let dz = p[0] - self.center[0];
        let r =
            ((dz / self.semi[0]).powi(2) + (u / self.semi[1]).powi(2) + (v / self.semi[2]).powi(2))
                .sqrt();
        1.0 / (1.0 + ((r - 1.0) / EDGE_SOFTNESS).exp())
    }
}

/// Procedural T1-map phantom in ms.
///
/// Smooth white-matter background, then tissue ellipsoids cycling through the
/// white/gray/CSF bands, then small lesion blobs. Pure function of `seed`.
pub fn gen_phantom(seed: u64, dims: Dims3, params: &PhantomParams) -> Result<Volume> {
    if dims.d == 0 || dims.h == 0 || dims.w == 0 || dims.h % 4 != 0 || dims.w % 4 != 0 {
        return Err(Error::invalid(
            "gen_phantom",
            format!("dims {dims} need nonzero depth and height/width divisible by 4"),
        ));
    }
    if !(0.0..=1.0).contains(&params.complexity) {
        return Err(Error::invalid(
            "gen_phantom",
            format!("complexity {} outside [0, 1]", params.complexity),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data: Vec<f64> = smooth_field(&mut rng, dims, 6, 1.5)
        .into_iter()
        .map(|f| BACKGROUND_T1_MS + BACKGROUND_SWING_MS * f)
        .collect();

    let first_band = rng.random_range(0..3);
    let mut shapes: Vec<Ellipsoid> = (0..params.ellipsoid_count())
        .map(|i| Ellipsoid::random(&mut rng, Tissue::BANDS[(first_band + i) % 3], (0.08, 0.25)))
        .collect();
    shapes.extend((0..params.lesion_count()).map(|_| {
        let mut e = Ellipsoid::random(&mut rng, Tissue::Lesion, (0.02, 0.045));
        e.semi[0] = e.semi[0].min(0.3);
        e
    }));

    let mut i = 0;
    for z in 0..dims.d {
        let pz = (z as f64 + 0.5) / dims.d as f64;
        for y in 0..dims.h {
            let py = (y as f64 + 0.5) / dims.h as f64;
            for x in 0..dims.w {
                let p = [pz, py, (x as f64 + 0.5) / dims.w as f64];
                for e in &shapes {
                    let w = e.weight(p);
                    data[i] += w * (e.value - data[i]);
                }
                i += 1;
            }
        }
    }
    Volume::new(dims, data)
}
