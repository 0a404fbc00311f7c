use std::fmt;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::flops::{flops, BlockDims, BlockKind};
use crate::error::{Error, Result};
use crate::nn::{self, mdta_forward, spatial_attention, MdtaParams, SpatialAttnParams};
use crate::par;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tower {
    Mdta,
    Spatial,
}

impl Tower {
    pub fn name(self) -> &'static str {
        match self {
            Tower::Mdta => "mdta",
            Tower::Spatial => "spatial_attention",
        }
    }
}

impl fmt::Display for Tower {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingSpec {
    pub channels: usize,
    pub heads: usize,
    /// Blocks stacked per tower.
    pub depth: usize,
    pub mdta_sizes: Vec<(usize, usize)>,
    pub spatial_sizes: Vec<(usize, usize)>,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for ScalingSpec {
    fn default() -> Self {
        ScalingSpec {
            channels: 16,
            heads: 1,
            depth: 1,
            mdta_sizes: vec![(32, 48), (64, 96), (128, 192), (256, 384)],
            spatial_sizes: vec![(16, 24), (32, 48), (48, 72), (64, 96)],
            repeats: 3,
            warmup: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimingPoint {
    pub tower: &'static str,
    pub h: usize,
    pub w: usize,
    pub pixels: usize,
    pub macs: u64,
    pub median_seconds: f64,
    pub repeats: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingReport {
    pub points: Vec<TimingPoint>,
    pub mdta_exponent: Option<f64>,
    pub spatial_exponent: Option<f64>,
}

pub const SCALING_HEADER: [&str; 7] = [
    "tower",
    "h",
    "w",
    "pixels",
    "macs",
    "median_seconds",
    "repeats",
];

impl ScalingReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)?;
        w.write_record(SCALING_HEADER)?;
        for p in &self.points {
            w.serialize(p)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 || xs.iter().chain(ys).any(|&v| !(v > 0.0)) {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

enum TowerParams {
    Mdta(Vec<MdtaParams>),
    Spatial(Vec<SpatialAttnParams>),
}

impl TowerParams {
    fn new(tower: Tower, spec: &ScalingSpec) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let (c, heads) = (spec.channels, spec.heads);
        Ok(match tower {
            Tower::Mdta => TowerParams::Mdta(
                (0..spec.depth)
                    .map(|_| MdtaParams::init(c, heads, &mut rng))
                    .collect::<Result<_>>()?,
            ),
            Tower::Spatial => TowerParams::Spatial(
                (0..spec.depth)
                    .map(|_| SpatialAttnParams::init(c, heads, &mut rng))
                    .collect::<Result<_>>()?,
            ),
        })
    }

    fn forward(&self, x: &Tensor) -> Result<u64> {
        let mut tape = Tape::inference();
        let mut f = tape.constant(x.clone());
        match self {
            TowerParams::Mdta(blocks) => {
                for b in blocks {
                    let p = nn::constants(&mut tape, b);
                    f = mdta_forward(&mut tape, &f, &p)?;
                }
            }
            TowerParams::Spatial(blocks) => {
                for b in blocks {
                    let p = nn::constants(&mut tape, b);
                    f = spatial_attention(&mut tape, &f, &p)?;
                }
            }
        }
        Ok(tape.macs())
    }
}

/// Wall seconds of each of `spec.repeats` forwards, after `warmup` discarded
/// runs, plus the MAC count of one forward.
pub fn time_tower(tower: Tower, spec: &ScalingSpec, h: usize, w: usize) -> Result<(Vec<f64>, u64)> {
    if spec.repeats == 0 {
        return Err(Error::invalid(
            "bench_scaling",
            "repeats must be at least 1",
        ));
    }
    let params = TowerParams::new(tower, spec)?;
    let x = Tensor::full([1, spec.channels, h, w], 0.1)?;
    for _ in 0..spec.warmup {
        params.forward(&x)?;
    }
    let mut times = Vec::with_capacity(spec.repeats);
    let mut macs = 0;
    for _ in 0..spec.repeats {
        let t0 = Instant::now();
        macs = params.forward(&x)?;
        times.push(t0.elapsed().as_secs_f64());
    }
    Ok((times, macs))
}

/// Median seconds per forward of one tower at `h`×`w`.
pub fn bench_tower(tower: Tower, spec: &ScalingSpec, h: usize, w: usize) -> Result<TimingPoint> {
    let (times, macs) = time_tower(tower, spec, h, w)?;
    let kind = match tower {
        Tower::Mdta => BlockKind::Mdta,
        Tower::Spatial => BlockKind::SpatialAttention,
    };
    let expected =
        spec.depth as u64 * flops(kind, BlockDims::new(spec.channels, h, w, spec.heads, 2.66))?;
    debug_assert_eq!(macs, expected);
    Ok(TimingPoint {
        tower: tower.name(),
        h,
        w,
        pixels: h * w,
        macs,
        median_seconds: median(&times),
        repeats: spec.repeats,
    })
}

/// Relative change of the median when a run of `repeats` samples is
/// extended to `2 * repeats`.
pub fn repeat_stability(tower: Tower, spec: &ScalingSpec, h: usize, w: usize) -> Result<f64> {
    let doubled = ScalingSpec {
        repeats: 2 * spec.repeats,
        ..spec.clone()
    };
    let (times, _) = par::with_threads(1, || time_tower(tower, &doubled, h, w))?;
    let (half, full) = (median(&times[..spec.repeats]), median(&times));
    Ok((full - half).abs() / half)
}

fn exponent(points: &[TimingPoint]) -> Option<f64> {
    let xs: Vec<f64> = points.iter().map(|p| p.pixels as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.median_seconds).collect();
    loglog_slope(&xs, &ys)
}

/// Times both towers across their resolution lists on a single thread and
/// fits the empirical scaling exponent in pixel count.
pub fn bench_scaling(spec: &ScalingSpec) -> Result<ScalingReport> {
    par::with_threads(1, || {
        let run = |tower, sizes: &[(usize, usize)]| -> Result<Vec<TimingPoint>> {
            sizes
                .iter()
                .map(|&(h, w)| bench_tower(tower, spec, h, w))
                .collect()
        };
        let mdta = run(Tower::Mdta, &spec.mdta_sizes)?;
        let spatial = run(Tower::Spatial, &spec.spatial_sizes)?;
        let (mdta_exponent, spatial_exponent) = (exponent(&mdta), exponent(&spatial));
        let mut points = mdta;
        points.extend(spatial);
        Ok(ScalingReport {
            points,
            mdta_exponent,
            spatial_exponent,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_and_slope() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.7)).collect();
        assert!((loglog_slope(&xs, &ys).unwrap() - 1.7).abs() < 1e-12);
        assert!(loglog_slope(&[1.0], &[1.0]).is_none());
        assert!(loglog_slope(&[1.0, 2.0], &[0.0, 1.0]).is_none());
    }

    #[test]
    fn tiny_sweep_reports_every_point() {
        let spec = ScalingSpec {
            channels: 4,
            mdta_sizes: vec![(8, 8), (8, 16)],
            spatial_sizes: vec![(4, 4), (4, 8)],
            repeats: 1,
            ..ScalingSpec::default()
        };
        let r = bench_scaling(&spec).unwrap();
        assert_eq!(r.points.len(), 4);
        assert!(r
            .points
            .iter()
            .all(|p| p.median_seconds > 0.0 && p.macs > 0));
        assert_eq!(r.points[1].macs, 2 * r.points[0].macs);
        let dir = tempfile::tempdir().unwrap();
        r.write(&dir.path().join("s.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(bench_scaling(&ScalingSpec { repeats: 0, ..spec }).is_err());
    }
}
