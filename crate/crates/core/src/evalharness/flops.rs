//! Closed-form multiply-accumulate counts.
//!
//! Only the products inside convolutions, matrix products and attention are
//! counted; normalization, activations and elementwise ops are not. The same
//! convention is used by the tape's instrumented counter.

use std::fmt;

use crate::error::Result;
use crate::model::ModelConfig;
use crate::nn::gdfn_hidden;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Mdta,
    Gdfn,
    SpatialAttention,
    /// 3×3 conv C → C/2 then pixel-unshuffle.
    Downsample,
    /// 3×3 conv C → 2C then pixel-shuffle.
    Upsample,
}

impl BlockKind {
    pub const ALL: [BlockKind; 5] = [
        BlockKind::Mdta,
        BlockKind::Gdfn,
        BlockKind::SpatialAttention,
        BlockKind::Downsample,
        BlockKind::Upsample,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Mdta => "mdta",
            BlockKind::Gdfn => "gdfn",
            BlockKind::SpatialAttention => "spatial_attention",
            BlockKind::Downsample => "downsample",
            BlockKind::Upsample => "upsample",
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Block geometry: `c` channels on an `h`×`w` grid, batch 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockDims {
    pub c: u64,
    pub h: u64,
    pub w: u64,
    pub heads: u64,
    pub expansion: f64,
}

impl BlockDims {
    pub fn new(c: usize, h: usize, w: usize, heads: usize, expansion: f64) -> Self {
        BlockDims {
            c: c as u64,
            h: h as u64,
            w: w as u64,
            heads: heads as u64,
            expansion,
        }
    }
}

/// MACs of one block. `heads` must divide `c`.
pub fn flops(kind: BlockKind, d: BlockDims) -> Result<u64> {
    let (c, n) = (d.c, d.h * d.w);
    Ok(match kind {
        // qkv 1x1 + depthwise 3x3, q·kᵀ and attn·v per head, output 1x1
        BlockKind::Mdta => 3 * c * c * n + 27 * c * n + 2 * n * c * c / d.heads + c * c * n,
        BlockKind::Gdfn => {
            let h = gdfn_hidden(d.c as usize, d.expansion)? as u64;
            2 * h * c * n + 18 * h * n + h * c * n
        }
        BlockKind::SpatialAttention => 4 * c * c * n + 2 * c * n * n,
        BlockKind::Downsample => 9 * (c / 2) * c * n,
        BlockKind::Upsample => 9 * 2 * c * c * n,
    })
}

/// One line of a whole-model breakdown.
#[derive(Clone, Debug, PartialEq)]
pub struct FlopEntry {
    pub stage: String,
    pub kind: &'static str,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub macs: u64,
}

/// Per-stage MAC counts of the full network on a 1×`h`×`w` input.
pub fn model_flops(cfg: &ModelConfig, h: usize, w: usize) -> Result<Vec<FlopEntry>> {
    cfg.validate()?;
    let ch = cfg.level_channels();
    let g = cfg.gdfn_expansion;
    let res = |l: usize| (h >> l, w >> l);
    let mut out = Vec::new();
    let mut push =
        |stage: String, kind: &'static str, c: usize, (hh, ww): (usize, usize), macs: u64| {
            out.push(FlopEntry {
                stage,
                kind,
                c,
                h: hh,
                w: ww,
                macs,
            });
        };
    let conv = |cout: usize, cin: usize, k: usize, (hh, ww): (usize, usize)| {
        (cout * cin * k * k * hh * ww) as u64
    };
    let block = |c: usize, heads: usize, (hh, ww): (usize, usize)| -> Result<u64> {
        let d = BlockDims::new(c, hh, ww, heads, g);
        Ok(flops(BlockKind::Mdta, d)? + flops(BlockKind::Gdfn, d)?)
    };

    push(
        "intro".into(),
        "conv3x3",
        ch[0],
        res(0),
        conv(ch[0], cfg.in_channels, 3, res(0)),
    );
    for l in 0..3 {
        for i in 0..cfg.encoder_blocks[l] {
            push(
                format!("encoder{l}.{i}"),
                "restormer_block",
                ch[l],
                res(l),
                block(ch[l], cfg.heads[l], res(l))?,
            );
        }
        if l < 2 {
            let d = BlockDims::new(ch[l], res(l).0, res(l).1, 1, g);
            push(
                format!("down{l}"),
                "downsample",
                ch[l],
                res(l),
                flops(BlockKind::Downsample, d)?,
            );
        }
    }
    for i in 0..cfg.bottleneck_channel_blocks {
        push(
            format!("bottleneck.{i}"),
            "restormer_block",
            ch[2],
            res(2),
            block(ch[2], cfg.bottleneck_heads, res(2))?,
        );
    }
    for i in 0..cfg.bottleneck_spatial_blocks {
        let d = BlockDims::new(ch[2], res(2).0, res(2).1, cfg.bottleneck_heads, g);
        push(
            format!("spatial.{i}"),
            "spatial_attention",
            ch[2],
            res(2),
            flops(BlockKind::SpatialAttention, d)?,
        );
    }
    for (k, level) in [2usize, 1, 0].into_iter().enumerate() {
        let c = ch[level];
        if k > 0 {
            let below = res(level + 1);
            let d = BlockDims::new(2 * c, below.0, below.1, 1, g);
            push(
                format!("up{level}"),
                "upsample",
                2 * c,
                below,
                flops(BlockKind::Upsample, d)?,
            );
            push(
                format!("fuse{level}"),
                "conv1x1",
                c,
                res(level),
                conv(c, 2 * c, 1, res(level)),
            );
        }
        for i in 0..cfg.decoder_blocks[k] {
            push(
                format!("decoder{level}.{i}"),
                "restormer_block",
                c,
                res(level),
                block(c, cfg.heads[level], res(level))?,
            );
        }
    }
    push(
        "output".into(),
        "conv3x3",
        cfg.out_channels,
        res(0),
        conv(cfg.out_channels, ch[0], 3, res(0)),
    );
    Ok(out)
}

pub fn total_flops(entries: &[FlopEntry]) -> u64 {
    entries.iter().map(|e| e.macs).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, Model};
    use crate::nn::{self, *};
    use crate::tensor::{Tape, Tensor};
    use crate::testutil::rand_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn counted(f: impl FnOnce(&mut Tape) -> Result<()>) -> u64 {
        let mut tape = Tape::inference();
        f(&mut tape).unwrap();
        tape.macs()
    }

    #[test]
    fn mdta_doubles_exactly_with_area() {
        for (c, heads) in [(8, 1), (48, 1), (96, 2), (192, 4)] {
            let a = flops(BlockKind::Mdta, BlockDims::new(c, 32, 48, heads, 2.66)).unwrap();
            let b = flops(BlockKind::Mdta, BlockDims::new(c, 64, 48, heads, 2.66)).unwrap();
            assert_eq!(b, 2 * a);
        }
    }

    #[test]
    fn spatial_ratio_tends_to_four() {
        let f = |h, w| {
            flops(
                BlockKind::SpatialAttention,
                BlockDims::new(64, h, w, 1, 2.66),
            )
            .unwrap() as f64
        };
        let r = f(64, 128) / f(64, 64);
        assert!(r > 3.5 && r < 4.0, "{r}");
        let mut prev = 0.0;
        for s in [8, 16, 32, 64, 128] {
            let r = f(2 * s, s) / f(s, s);
            assert!(r > prev && r < 4.0);
            prev = r;
        }
    }

    #[test]
    fn spatial_to_mdta_ratio_grows_linearly_in_area() {
        let ratio = |h, w| {
            let d = BlockDims::new(32, h, w, 2, 2.66);
            flops(BlockKind::SpatialAttention, d).unwrap() as f64
                / flops(BlockKind::Mdta, d).unwrap() as f64
        };
        let (r1, r2, r3) = (ratio(16, 16), ratio(32, 32), ratio(64, 64));
        // ratio = (a + b·n) / k, so successive differences scale with n.
        assert!(((r3 - r2) / (r2 - r1) - 4.0).abs() < 1e-9);
    }

    #[test]
    fn formulas_match_instrumented_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (c, h, w, heads, g) = (8, 12, 16, 2, 2.66);
        let d = BlockDims::new(c, h, w, heads, g);
        let x = rand_tensor(&[1, c, h, w], 1);

        let p = MdtaParams::init(c, heads, &mut rng).unwrap();
        let m = counted(|t| {
            let (pv, xv) = (nn::constants(t, &p), t.constant(x.clone()));
            mdta_forward(t, &xv, &pv).map(|_| ())
        });
        assert_eq!(m, flops(BlockKind::Mdta, d).unwrap());

        let p = GdfnParams::init(c, g, &mut rng).unwrap();
        let m = counted(|t| {
            let (pv, xv) = (nn::constants(t, &p), t.constant(x.clone()));
            gdfn_forward(t, &xv, &pv).map(|_| ())
        });
        assert_eq!(m, flops(BlockKind::Gdfn, d).unwrap());

        let p = SpatialAttnParams::init(c, heads, &mut rng).unwrap();
        let m = counted(|t| {
            let (pv, xv) = (nn::constants(t, &p), t.constant(x.clone()));
            spatial_attention(t, &xv, &pv).map(|_| ())
        });
        assert_eq!(m, flops(BlockKind::SpatialAttention, d).unwrap());

        let p = ResampleParams::init(Direction::Down, c, &mut rng).unwrap();
        let m = counted(|t| {
            let (pv, xv) = (nn::constants(t, &p), t.constant(x.clone()));
            downsample(t, &xv, &pv).map(|_| ())
        });
        assert_eq!(m, flops(BlockKind::Downsample, d).unwrap());

        let p = ResampleParams::init(Direction::Up, c, &mut rng).unwrap();
        let m = counted(|t| {
            let (pv, xv) = (nn::constants(t, &p), t.constant(x.clone()));
            upsample(t, &xv, &pv).map(|_| ())
        });
        assert_eq!(m, flops(BlockKind::Upsample, d).unwrap());
    }

    #[test]
    fn model_total_matches_instrumented_forward() {
        let cfg = ModelConfig::toy();
        let model = Model::new(cfg.clone(), 3).unwrap();
        let (h, w) = (16, 24);
        let m = counted(|t| {
            let p = nn::constants(t, &model.params);
            let x = t.constant(Tensor::zeros([1, 1, h, w]).unwrap());
            forward(t, &p, &x).map(|_| ())
        });
        let entries = model_flops(&cfg, h, w).unwrap();
        assert_eq!(total_flops(&entries), m);
        assert!(entries.iter().all(|e| e.macs > 0));
        assert_eq!(
            entries
                .iter()
                .filter(|e| e.kind == "spatial_attention")
                .count(),
            1
        );
    }
}
