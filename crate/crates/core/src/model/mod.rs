//! The full encoder-decoder network.
//!
//! Layout for the default config (channels at each resolution):
//!
//! ```text
//! input 1 -> conv3x3 -> 48 -> enc0 (48) -> down -> enc1 (96) -> down -> enc2 (192)
//!   -> bottleneck channel blocks + spatial attention (192)
//!   -> dec0 (192) -> up, concat enc1, 1x1 fuse -> dec1 (96)
//!   -> up, concat enc0, 1x1 fuse -> dec2 (48) -> conv3x3 + bias -> tanh -> 1
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{join, parse_array3, parse_value, ConfigSection};
use crate::error::{Error, Result};
use crate::nn::{
    self, downsample, gdfn_hidden, init_conv, restormer_block, spatial_attention, upsample,
    Direction, ParamTree, ResampleParams, RestormerBlock, SpatialAttnParams,
};
use crate::tensor::{Tape, Tensor, Var};

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
    OptimizerState, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

/// The parameter budget the default bottleneck depth is tuned toward.
pub const PARAM_BUDGET: usize = 10_500_000;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub encoder_blocks: [usize; 3],
    pub bottleneck_channel_blocks: usize,
    pub bottleneck_spatial_blocks: usize,
    /// Deepest level first.
    pub decoder_blocks: [usize; 3],
    pub heads: [usize; 3],
    pub bottleneck_heads: usize,
    pub gdfn_expansion: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            out_channels: 1,
            base_channels: 48,
            encoder_blocks: [1, 2, 2],
            // Closest depth to PARAM_BUDGET: 16 blocks give 10,727,539 scalars, 15 give 10,270,593.
            bottleneck_channel_blocks: 16,
            bottleneck_spatial_blocks: 1,
            decoder_blocks: [2, 2, 1],
            heads: [1, 2, 4],
            bottleneck_heads: 4,
            gdfn_expansion: 2.66,
        }
    }
}

impl ModelConfig {
    /// Small config for smoke runs: base 8, one block per level.
    pub fn toy() -> Self {
        ModelConfig {
            base_channels: 8,
            encoder_blocks: [1, 1, 1],
            bottleneck_channel_blocks: 1,
            decoder_blocks: [1, 1, 1],
            heads: [1, 2, 4],
            bottleneck_heads: 4,
            ..ModelConfig::default()
        }
    }

    pub fn level_channels(&self) -> [usize; 3] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("in_channels and out_channels must be >= 1".into());
        }
        if self.base_channels == 0 {
            return bad("base_channels must be >= 1".into());
        }
        for (level, (&c, &h)) in self.level_channels().iter().zip(&self.heads).enumerate() {
            if h == 0 || c % h != 0 {
                return bad(format!(
                    "level {level}: {c} channels not divisible by {h} heads"
                ));
            }
        }
        let deep = self.level_channels()[2];
        if self.bottleneck_heads == 0 || deep % self.bottleneck_heads != 0 {
            return bad(format!(
                "bottleneck: {deep} channels not divisible by {} heads",
                self.bottleneck_heads
            ));
        }
        if !(self.gdfn_expansion > 0.0 && self.gdfn_expansion.is_finite()) {
            return bad(format!(
                "gdfn_expansion {} must be positive",
                self.gdfn_expansion
            ));
        }
        gdfn_hidden(self.base_channels, self.gdfn_expansion)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(())
    }

    /// Checks that `[B, in_channels, H, W]` is a valid input.
    pub fn check_input(&self, dims: &[usize]) -> Result<()> {
        match dims {
            [_, c, h, w] if *c == self.in_channels && h % 4 == 0 && w % 4 == 0 => Ok(()),
            [_, c, h, w] if *c == self.in_channels => Err(Error::InvalidShape {
                dims: dims.to_vec(),
                reason: format!("spatial dims {h}x{w} must be divisible by 4"),
            }),
            _ => Err(Error::InvalidShape {
                dims: dims.to_vec(),
                reason: format!("expected [B, {}, H, W]", self.in_channels),
            }),
        }
    }
}

impl ConfigSection for ModelConfig {
    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("in_channels", self.in_channels.to_string()),
            ("out_channels", self.out_channels.to_string()),
            ("base_channels", self.base_channels.to_string()),
            ("encoder_blocks", join(&self.encoder_blocks)),
            (
                "bottleneck_channel_blocks",
                self.bottleneck_channel_blocks.to_string(),
            ),
            (
                "bottleneck_spatial_blocks",
                self.bottleneck_spatial_blocks.to_string(),
            ),
            ("decoder_blocks", join(&self.decoder_blocks)),
            ("heads", join(&self.heads)),
            ("bottleneck_heads", self.bottleneck_heads.to_string()),
            ("gdfn_expansion", self.gdfn_expansion.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        const INT: &str = "non-negative integer";
        match key {
            "in_channels" => self.in_channels = parse_value(key, value, INT)?,
            "out_channels" => self.out_channels = parse_value(key, value, INT)?,
            "base_channels" => self.base_channels = parse_value(key, value, INT)?,
            "encoder_blocks" => self.encoder_blocks = parse_array3(key, value)?,
            "bottleneck_channel_blocks" => {
                self.bottleneck_channel_blocks = parse_value(key, value, INT)?
            }
            "bottleneck_spatial_blocks" => {
                self.bottleneck_spatial_blocks = parse_value(key, value, INT)?
            }
            "decoder_blocks" => self.decoder_blocks = parse_array3(key, value)?,
            "heads" => self.heads = parse_array3(key, value)?,
            "bottleneck_heads" => self.bottleneck_heads = parse_value(key, value, INT)?,
            "gdfn_expansion" => self.gdfn_expansion = parse_value(key, value, "float")?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// One decoder level. The deepest level has no upsample and no skip fuse.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLevel<T = Tensor> {
    pub up: Option<ResampleParams<T>>,
    /// `[C, 2C, 1, 1]` reducing the concatenated skip back to the level width.
    pub fuse: Option<T>,
    pub blocks: Vec<RestormerBlock<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub intro: T,
    pub encoder: Vec<Vec<RestormerBlock<T>>>,
    pub downs: Vec<ResampleParams<T>>,
    pub bottleneck: Vec<RestormerBlock<T>>,
    pub spatial: Vec<SpatialAttnParams<T>>,
    pub decoder: Vec<DecoderLevel<T>>,
    pub out_w: T,
    pub out_b: T,
}

impl<T> ParamTree<T> for ModelParams<T> {
    type Mapped<U> = ModelParams<U>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}intro.w"), &self.intro);
        for (l, blocks) in self.encoder.iter().enumerate() {
            for (i, b) in blocks.iter().enumerate() {
                b.visit(&format!("{prefix}enc{l}.b{i}."), f);
            }
            if let Some(d) = self.downs.get(l) {
                d.visit(&format!("{prefix}down{l}."), f);
            }
        }
        for (i, b) in self.bottleneck.iter().enumerate() {
            b.visit(&format!("{prefix}bott.b{i}."), f);
        }
        for (i, s) in self.spatial.iter().enumerate() {
            s.visit(&format!("{prefix}bott.sa{i}."), f);
        }
        for (l, d) in self.decoder.iter().enumerate() {
            if let Some(up) = &d.up {
                up.visit(&format!("{prefix}dec{l}.up."), f);
            }
            if let Some(fuse) = &d.fuse {
                f(format!("{prefix}dec{l}.fuse"), fuse);
            }
            for (i, b) in d.blocks.iter().enumerate() {
                b.visit(&format!("{prefix}dec{l}.b{i}."), f);
            }
        }
        f(format!("{prefix}out.w"), &self.out_w);
        f(format!("{prefix}out.b"), &self.out_b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(format!("{prefix}intro.w"), &mut self.intro);
        let downs = &mut self.downs;
        for (l, blocks) in self.encoder.iter_mut().enumerate() {
            for (i, b) in blocks.iter_mut().enumerate() {
                b.visit_mut(&format!("{prefix}enc{l}.b{i}."), f);
            }
            if let Some(d) = downs.get_mut(l) {
                d.visit_mut(&format!("{prefix}down{l}."), f);
            }
        }
        for (i, b) in self.bottleneck.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}bott.b{i}."), f);
        }
        for (i, s) in self.spatial.iter_mut().enumerate() {
            s.visit_mut(&format!("{prefix}bott.sa{i}."), f);
        }
        for (l, d) in self.decoder.iter_mut().enumerate() {
            if let Some(up) = &mut d.up {
                up.visit_mut(&format!("{prefix}dec{l}.up."), f);
            }
            if let Some(fuse) = &mut d.fuse {
                f(format!("{prefix}dec{l}.fuse"), fuse);
            }
            for (i, b) in d.blocks.iter_mut().enumerate() {
                b.visit_mut(&format!("{prefix}dec{l}.b{i}."), f);
            }
        }
        f(format!("{prefix}out.w"), &mut self.out_w);
        f(format!("{prefix}out.b"), &mut self.out_b);
    }

    fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(String, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<ModelParams<U>, E> {
        // Same order as `visit`.
        let intro = f(format!("{prefix}intro.w"), &self.intro)?;
        let mut encoder = Vec::with_capacity(self.encoder.len());
        let mut downs = Vec::with_capacity(self.downs.len());
        for (l, blocks) in self.encoder.iter().enumerate() {
            let mapped = blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.try_map(&format!("{prefix}enc{l}.b{i}."), f))
                .collect::<std::result::Result<Vec<_>, E>>()?;
            encoder.push(mapped);
            if let Some(d) = self.downs.get(l) {
                downs.push(d.try_map(&format!("{prefix}down{l}."), f)?);
            }
        }
        let bottleneck = self
            .bottleneck
            .iter()
            .enumerate()
            .map(|(i, b)| b.try_map(&format!("{prefix}bott.b{i}."), f))
            .collect::<std::result::Result<Vec<_>, E>>()?;
        let spatial = self
            .spatial
            .iter()
            .enumerate()
            .map(|(i, s)| s.try_map(&format!("{prefix}bott.sa{i}."), f))
            .collect::<std::result::Result<Vec<_>, E>>()?;
        let mut decoder = Vec::with_capacity(self.decoder.len());
        for (l, d) in self.decoder.iter().enumerate() {
            let up =
                d.up.as_ref()
                    .map(|u| u.try_map(&format!("{prefix}dec{l}.up."), f))
                    .transpose()?;
            let fuse = d
                .fuse
                .as_ref()
                .map(|w| f(format!("{prefix}dec{l}.fuse"), w))
                .transpose()?;
            let blocks = d
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.try_map(&format!("{prefix}dec{l}.b{i}."), f))
                .collect::<std::result::Result<Vec<_>, E>>()?;
            decoder.push(DecoderLevel { up, fuse, blocks });
        }
        Ok(ModelParams {
            intro,
            encoder,
            downs,
            bottleneck,
            spatial,
            decoder,
            out_w: f(format!("{prefix}out.w"), &self.out_w)?,
            out_b: f(format!("{prefix}out.b"), &self.out_b)?,
        })
    }
}

/// Initializes every parameter from a ChaCha8 stream seeded with `seed`.
pub fn build(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ch = config.level_channels();
    let g = config.gdfn_expansion;
    let blocks =
        |n: usize, c: usize, heads: usize, rng: &mut ChaCha8Rng| -> Result<Vec<RestormerBlock>> {
            (0..n)
                .map(|_| RestormerBlock::init(c, heads, g, rng))
                .collect()
        };

    let intro = init_conv(ch[0], config.in_channels, 3, &mut rng)?;
    let mut encoder = Vec::new();
    let mut downs = Vec::new();
    for l in 0..3 {
        encoder.push(blocks(
            config.encoder_blocks[l],
            ch[l],
            config.heads[l],
            &mut rng,
        )?);
        if l < 2 {
            downs.push(ResampleParams::init(Direction::Down, ch[l], &mut rng)?);
        }
    }
    let bottleneck = blocks(
        config.bottleneck_channel_blocks,
        ch[2],
        config.bottleneck_heads,
        &mut rng,
    )?;
    let spatial = (0..config.bottleneck_spatial_blocks)
        .map(|_| SpatialAttnParams::init(ch[2], config.bottleneck_heads, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut decoder = Vec::new();
    for (d, level) in [2usize, 1, 0].into_iter().enumerate() {
        let c = ch[level];
        let (up, fuse) = if d == 0 {
            (None, None)
        } else {
            (
                Some(ResampleParams::init(Direction::Up, 2 * c, &mut rng)?),
                Some(init_conv(c, 2 * c, 1, &mut rng)?),
            )
        };
        let b = blocks(config.decoder_blocks[d], c, config.heads[level], &mut rng)?;
        decoder.push(DecoderLevel {
            up,
            fuse,
            blocks: b,
        });
    }
    let out_w = init_conv(config.out_channels, ch[0], 3, &mut rng)?;
    let out_b = Tensor::zeros(vec![config.out_channels])?;
    Ok(ModelParams {
        intro,
        encoder,
        downs,
        bottleneck,
        spatial,
        decoder,
        out_w,
        out_b,
    })
}

fn run_blocks(tape: &mut Tape, mut x: Var, blocks: &[RestormerBlock<Var>]) -> Result<Var> {
    for b in blocks {
        x = restormer_block(tape, &x, b)?;
    }
    Ok(x)
}

/// Differentiable forward pass; `x` is `[B, in_channels, H, W]` with `H`, `W`
/// divisible by 4. Output values lie in `(-1, 1)`.
pub fn forward(tape: &mut Tape, params: &ModelParams<Var>, x: &Var) -> Result<Var> {
    let (_, cin, h, w) = x.shape().bchw("model")?;
    if params.intro.dims()[1] != cin {
        return Err(Error::InvalidShape {
            dims: x.dims().to_vec(),
            reason: format!("model expects {} input channels", params.intro.dims()[1]),
        });
    }
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::InvalidShape {
            dims: x.dims().to_vec(),
            reason: format!("spatial dims {h}x{w} must be divisible by 4"),
        });
    }
    let mut f = tape.conv2d(x, &params.intro, None, 1)?;
    let mut skips = Vec::new();
    for (l, blocks) in params.encoder.iter().enumerate() {
        f = run_blocks(tape, f, blocks)?;
        if let Some(d) = params.downs.get(l) {
            skips.push(f.clone());
            f = downsample(tape, &f, d)?;
        }
    }
    f = run_blocks(tape, f, &params.bottleneck)?;
    for s in &params.spatial {
        f = spatial_attention(tape, &f, s)?;
    }
    for level in &params.decoder {
        if let (Some(up), Some(fuse)) = (&level.up, &level.fuse) {
            let skip = skips
                .pop()
                .ok_or_else(|| Error::invalid("model", "more decoder levels than skips"))?;
            let u = upsample(tape, &f, up)?;
            let cat = tape.concat(&[&u, &skip], 1)?;
            f = tape.conv2d(&cat, fuse, None, 1)?;
        }
        f = run_blocks(tape, f, &level.blocks)?;
    }
    let out = tape.conv2d(&f, &params.out_w, Some(&params.out_b), 1)?;
    tape.tanh(&out)
}

/// A config together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = build(&config, seed)?;
        Ok(Model { config, params })
    }

    /// Forward without gradient tracking.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.config.check_input(x.dims())?;
        let mut tape = Tape::inference();
        let p = nn::constants(&mut tape, &self.params);
        let xv = tape.constant(x.clone());
        forward(&mut tape, &p, &xv).map(Var::into_tensor)
    }

    pub fn num_params(&self) -> usize {
        nn::scalar_count(&self.params)
    }
}

// ---- closed-form parameter accounting ----

fn mdta_count(c: usize, heads: usize) -> usize {
    2 * c + 3 * c * c + 27 * c + c * c + heads
}

fn gdfn_count(c: usize, g: f64) -> Result<usize> {
    let h = gdfn_hidden(c, g)?;
    Ok(2 * c + 2 * h * c + 18 * h + h * c)
}

fn block_count(c: usize, heads: usize, g: f64) -> Result<usize> {
    Ok(mdta_count(c, heads) + gdfn_count(c, g)?)
}

/// Scalar count derived from the config alone.
pub fn count_params(config: &ModelConfig) -> Result<usize> {
    config.validate()?;
    let ch = config.level_channels();
    let g = config.gdfn_expansion;
    let mut n = 9 * config.in_channels * ch[0];
    for l in 0..3 {
        n += config.encoder_blocks[l] * block_count(ch[l], config.heads[l], g)?;
    }
    // Downsamples: 3x3 conv C -> C/2 at levels 0 and 1.
    n += 9 * ch[0] * (ch[0] / 2) + 9 * ch[1] * (ch[1] / 2);
    n += config.bottleneck_channel_blocks * block_count(ch[2], config.bottleneck_heads, g)?;
    n += config.bottleneck_spatial_blocks * (2 * ch[2] + 4 * ch[2] * ch[2]);
    for (d, level) in [2usize, 1, 0].into_iter().enumerate() {
        let c = ch[level];
        if d > 0 {
            n += 9 * (2 * c) * (4 * c) + 2 * c * c;
        }
        n += config.decoder_blocks[d] * block_count(c, config.heads[level], g)?;
    }
    n += 9 * ch[0] * config.out_channels + config.out_channels;
    Ok(n)
}

/// Bottleneck depth in `0..=max_blocks` whose total lands closest to `budget`.
pub fn closest_bottleneck_depth(
    config: &ModelConfig,
    budget: usize,
    max_blocks: usize,
) -> Result<usize> {
    let mut best = (usize::MAX, 0);
    for n in 0..=max_blocks {
        let total = count_params(&ModelConfig {
            bottleneck_channel_blocks: n,
            ..config.clone()
        })?;
        let gap = total.abs_diff(budget);
        if gap < best.0 {
            best = (gap, n);
        }
    }
    Ok(best.1)
}
