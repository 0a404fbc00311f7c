//! Restormer building blocks: channel attention (MDTA), the gated feed-forward
//! network (GDFN), bottleneck spatial attention and pixel-(un)shuffle resampling.
//!
//! Parameter structs are generic over their leaf type so the same layout holds
//! plain [`Tensor`]s for storage and [`Var`]s during a forward pass.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};


pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const L2_EPS: f64 = 1e-12;

/// A named, ordered tree of parameter leaves.
pub trait ParamTree<T> {
    type Mapped<U>;

    /// Visits every leaf in a fixed order, naming it `prefix + path`.
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T));

    fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(String, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<Self::Mapped<U>, E>;
}

/// Places every tensor on the tape as a constant.
pub fn constants<P: ParamTree<Tensor>>(tape: &mut Tape, p: &P) -> P::Mapped<Var> {
    let mapped: std::result::Result<_, std::convert::Infallible> =
        p.try_map("", &mut |_, t| Ok(tape.constant(t.clone())));
    match mapped {
        Ok(m) => m,
        Err(never) => match never {},
    }
}

/// Places every tensor on the tape as a gradient-tracked leaf.
pub fn leaves<P: ParamTree<Tensor>>(tape: &mut Tape, p: &P) -> P::Mapped<Var> {
    let mapped: std::result::Result<_, std::convert::Infallible> =
        p.try_map("", &mut |_, t| Ok(tape.leaf(t.clone())));
    match mapped {
        Ok(m) => m,
        Err(never) => match never {},
    }
}

/// `(name, tensor)` pairs in visiting order.
pub fn named_tensors<'a, P: ParamTree<Tensor>>(
    p: &'a P,
    prefix: &str,
) -> Vec<(String, &'a Tensor)> {
    let mut out = Vec::new();
    p.visit(prefix, &mut |name, t| out.push((name, t)));
    out
}

pub fn scalar_count<P: ParamTree<Tensor>>(p: &P) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, t| n += t.numel());
    n
}

/// Generates a parameter struct plus name-aware visitors over its tensor fields.
/// Fields before the `;` are plain metadata copied across `try_map`.
macro_rules! param_struct {
    (
        $(#[$meta:meta])*
        $name:ident { $($mfield:ident: $mty:ty,)* ; $($(#[$fmeta:meta])* $field:ident,)* }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T = Tensor> {
            $(pub $mfield: $mty,)*
            $($(#[$fmeta])* pub $field: T,)*
        }

        impl<T> ParamTree<T> for $name<T> {
            type Mapped<U> = $name<U>;

            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
                $(f(format!("{prefix}{}", stringify!($field)), &self.$field);)*
            }

            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
                $(f(format!("{prefix}{}", stringify!($field)), &mut self.$field);)*
            }

            fn try_map<U, E>(
                &self,
                prefix: &str,
                f: &mut dyn FnMut(String, &T) -> std::result::Result<U, E>,
            ) -> std::result::Result<$name<U>, E> {
                Ok($name {
                    $($mfield: self.$mfield.clone(),)*
                    $($field: f(format!("{prefix}{}", stringify!($field)), &self.$field)?,)*
                })
            }
        }
    };
}

param_struct! {
    /// Multi-Dconv head transposed attention.
    MdtaParams {
        heads: usize,
        ;
        norm_gamma,
        norm_beta,
        /// `[3C, C, 1, 1]`
        qkv_pw,
        /// `[3C, 1, 3, 3]`
        qkv_dw,
        /// `[C, C, 1, 1]`
        out_pw,
        /// `[heads]`
        temperature,
    }
}

param_struct! {
    /// Gated-Dconv feed-forward network.
    GdfnParams {
        ;
        norm_gamma,
        norm_beta,
        /// `[2h, C, 1, 1]`
        expand_pw,
        /// `[2h, 1, 3, 3]`
        expand_dw,
        /// `[C, h, 1, 1]`
        project_pw,
    }
}

param_struct! {
    /// Multi-head self-attention over the pixel axis.
    SpatialAttnParams {
        heads: usize,
        ;
        norm_gamma,
        norm_beta,
        q_pw,
        k_pw,
        v_pw,
        out_pw,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Down,
    Up,
}

param_struct! {
    /// 3x3 conv followed by pixel-(un)shuffle with factor 2.
    ResampleParams {
        direction: Direction,
        ;
        conv,
    }
}

/// A channel-attention block followed by a gated feed-forward block.
#[derive(Clone, Debug, PartialEq)]
pub struct RestormerBlock<T = Tensor> {
    pub mdta: MdtaParams<T>,
    pub gdfn: GdfnParams<T>,
}

impl<T> ParamTree<T> for RestormerBlock<T> {
    type Mapped<U> = RestormerBlock<U>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.mdta.visit(&format!("{prefix}mdta."), f);
        self.gdfn.visit(&format!("{prefix}gdfn."), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        self.mdta.visit_mut(&format!("{prefix}mdta."), f);
        self.gdfn.visit_mut(&format!("{prefix}gdfn."), f);
    }

    fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(String, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<RestormerBlock<U>, E> {
        Ok(RestormerBlock {
            mdta: self.mdta.try_map(&format!("{prefix}mdta."), f)?,
            gdfn: self.gdfn.try_map(&format!("{prefix}gdfn."), f)?,
        })
    }
}

/// A flat list of leaves named by index.
impl<T> ParamTree<T> for Vec<T> {
    type Mapped<U> = Vec<U>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (i, t) in self.iter().enumerate() {
            f(format!("{prefix}{i}"), t);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        for (i, t) in self.iter_mut().enumerate() {
            f(format!("{prefix}{i}"), t);
        }
    }

    fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(String, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<Vec<U>, E> {
        self.iter()
            .enumerate()
            .map(|(i, t)| f(format!("{prefix}{i}"), t))
            .collect()
    }
}

/// Hidden width `ceil(gamma * c)`, tolerant of products like `2.66 * 50`
/// landing a hair above an integer.
pub fn gdfn_hidden(channels: usize, expansion: f64) -> Result<usize> {
    if !(expansion > 0.0 && expansion.is_finite()) {
        return Err(Error::invalid(
            "gdfn",
            format!("expansion {expansion} must be positive"),
        ));
    }
    let h = (expansion * channels as f64 - 1e-9).ceil().max(0.0) as usize;
    if h == 0 {
        return Err(Error::invalid("gdfn", "hidden width is zero"));
    }
    Ok(h)
}

// ---- initialization ----

/// Kaiming-uniform with leaky-ReLU slope `sqrt(5)`: `U(-b, b)` with
/// `b = 1 / sqrt(fan_in)`, so std is `1 / sqrt(3 fan_in)`.
///
/// The ReLU gain (`b = sqrt(6 / fan_in)`) compounds through the residual
/// branches and saturates the tanh head of an untrained network.
pub fn kaiming_uniform<R: Rng + ?Sized>(
    dims: &[usize],
    fan_in: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist =
        Uniform::new_inclusive(-bound, bound).map_err(|e| Error::invalid("init", e.to_string()))?;
    let n: usize = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

/// Conv weight `[cout, cin/groups, k, k]` with fan-in `cin/groups * k * k`.
pub fn init_conv<R: Rng + ?Sized>(
    cout: usize,
    cin_per_group: usize,
    k: usize,
    rng: &mut R,
) -> Result<Tensor> {
    kaiming_uniform(&[cout, cin_per_group, k, k], cin_per_group * k * k, rng)
}

fn check_heads(op: &'static str, c: usize, heads: usize) -> Result<()> {
    if heads == 0 || c % heads != 0 {
        return Err(Error::invalid(
            op,
            format!("{c} channels not divisible by {heads} heads"),
        ));
    }
    Ok(())
}

impl MdtaParams {
    pub fn init<R: Rng + ?Sized>(c: usize, heads: usize, rng: &mut R) -> Result<Self> {
        check_heads("mdta", c, heads)?;
        Ok(MdtaParams {
            heads,
            norm_gamma: Tensor::ones(vec![c])?,
            norm_beta: Tensor::zeros(vec![c])?,
            qkv_pw: init_conv(3 * c, c, 1, rng)?,
            qkv_dw: init_conv(3 * c, 1, 3, rng)?,
            out_pw: init_conv(c, c, 1, rng)?,
            temperature: Tensor::ones(vec![heads])?,
        })
    }
}

impl GdfnParams {
    pub fn init<R: Rng + ?Sized>(c: usize, expansion: f64, rng: &mut R) -> Result<Self> {
        let h = gdfn_hidden(c, expansion)?;
        Ok(GdfnParams {
            norm_gamma: Tensor::ones(vec![c])?,
            norm_beta: Tensor::zeros(vec![c])?,
            expand_pw: init_conv(2 * h, c, 1, rng)?,
            expand_dw: init_conv(2 * h, 1, 3, rng)?,
            project_pw: init_conv(c, h, 1, rng)?,
        })
    }
}

impl RestormerBlock {
    pub fn init<R: Rng + ?Sized>(
        c: usize,
        heads: usize,
        expansion: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(RestormerBlock {
            mdta: MdtaParams::init(c, heads, rng)?,
            gdfn: GdfnParams::init(c, expansion, rng)?,
        })
    }
}

impl SpatialAttnParams {
    pub fn init<R: Rng + ?Sized>(c: usize, heads: usize, rng: &mut R) -> Result<Self> {
        check_heads("spatial_attention", c, heads)?;
        Ok(SpatialAttnParams {
            heads,
            norm_gamma: Tensor::ones(vec![c])?,
            norm_beta: Tensor::zeros(vec![c])?,
            q_pw: init_conv(c, c, 1, rng)?,
            k_pw: init_conv(c, c, 1, rng)?,
            v_pw: init_conv(c, c, 1, rng)?,
            out_pw: init_conv(c, c, 1, rng)?,
        })
    }
}

impl ResampleParams {
    pub fn init<R: Rng + ?Sized>(direction: Direction, c: usize, rng: &mut R) -> Result<Self> {
        let cout = match direction {
            Direction::Down if c % 2 != 0 => {
                return Err(Error::invalid(
                    "downsample",
                    format!("odd channel count {c}"),
                ))
            }
            Direction::Down => c / 2,
            Direction::Up => 2 * c,
        };
        Ok(ResampleParams {
            direction,
            conv: init_conv(cout, c, 3, rng)?,
        })
    }
}

// ---- forwards ----

fn channels_of(op: &'static str, x: &Var, gamma: &Var) -> Result<(usize, usize, usize, usize)> {
    let dims = x.shape().bchw(op)?;
    if gamma.dims() != [dims.1] {
        return Err(Error::ShapeMismatch {
            op,
            lhs: x.dims().to_vec(),
            rhs: gamma.dims().to_vec(),
        });
    }
    Ok(dims)
}

/// Returns the block output and the `[B, heads, C/heads, C/heads]` attention map.
pub fn mdta_with_attention(tape: &mut Tape, x: &Var, p: &MdtaParams<Var>) -> Result<(Var, Var)> {
    let (b, c, h, w) = channels_of("mdta", x, &p.norm_gamma)?;
    check_heads("mdta", c, p.heads)?;
    if p.temperature.dims() != [p.heads] {
        return Err(Error::invalid(
            "mdta",
            "temperature length differs from head count",
        ));
    }
    let d = c / p.heads;
    let n = tape.layer_norm(x, &p.norm_gamma, &p.norm_beta, LAYER_NORM_EPS)?;
    let qkv = tape.conv2d(&n, &p.qkv_pw, None, 1)?;
    let qkv = tape.conv2d(&qkv, &p.qkv_dw, None, 3 * c)?;
    let split = |tape: &mut Tape, i: usize| -> Result<Var> {
        let s = tape.slice(&qkv, 1, i * c, c)?;
        tape.reshape(&s, &[b, p.heads, d, h * w])
    };
    let (q, k, v) = (split(tape, 0)?, split(tape, 1)?, split(tape, 2)?);
    let q = tape.l2_normalize(&q, 3, L2_EPS)?;
    let k = tape.l2_normalize(&k, 3, L2_EPS)?;
    let kt = tape.transpose(&k, 2, 3)?;
    let scores = tape.matmul(&q, &kt)?;
    let scores = tape.scale_axis(&scores, &p.temperature, 1)?;
    let attn = tape.softmax(&scores, 3)?;
    let out = tape.matmul(&attn, &v)?;
    let out = tape.reshape(&out, &[b, c, h, w])?;
    let out = tape.conv2d(&out, &p.out_pw, None, 1)?;
    Ok((tape.add(x, &out)?, attn))
}

pub fn mdta_forward(tape: &mut Tape, x: &Var, p: &MdtaParams<Var>) -> Result<Var> {
    mdta_with_attention(tape, x, p).map(|(y, _)| y)
}

pub fn gdfn_forward(tape: &mut Tape, x: &Var, p: &GdfnParams<Var>) -> Result<Var> {
    channels_of("gdfn", x, &p.norm_gamma)?;
    let two_h = p.expand_pw.dims()[0];
    if two_h % 2 != 0 || p.expand_dw.dims()[0] != two_h {
        return Err(Error::invalid(
            "gdfn",
            "expansion convs must have an even, matching width",
        ));
    }
    let n = tape.layer_norm(x, &p.norm_gamma, &p.norm_beta, LAYER_NORM_EPS)?;
    let e = tape.conv2d(&n, &p.expand_pw, None, 1)?;
    let e = tape.conv2d(&e, &p.expand_dw, None, two_h)?;
    let p1 = tape.slice(&e, 1, 0, two_h / 2)?;
    let p2 = tape.slice(&e, 1, two_h / 2, two_h / 2)?;
    let gate = tape.gelu(&p1)?;
    let g = tape.mul(&gate, &p2)?;
    let out = tape.conv2d(&g, &p.project_pw, None, 1)?;
    tape.add(x, &out)
}

pub fn restormer_block(tape: &mut Tape, x: &Var, p: &RestormerBlock<Var>) -> Result<Var> {
    if p.mdta.norm_gamma.dims() != p.gdfn.norm_gamma.dims() {
        return Err(Error::ShapeMismatch {
            op: "restormer_block",
            lhs: p.mdta.norm_gamma.dims().to_vec(),
            rhs: p.gdfn.norm_gamma.dims().to_vec(),
        });
    }
    let y = mdta_forward(tape, x, &p.mdta)?;
    gdfn_forward(tape, &y, &p.gdfn)
}

pub fn spatial_attention(tape: &mut Tape, x: &Var, p: &SpatialAttnParams<Var>) -> Result<Var> {
    let (b, c, h, w) = channels_of("spatial_attention", x, &p.norm_gamma)?;
    check_heads("spatial_attention", c, p.heads)?;
    let (d, t) = (c / p.heads, h * w);
    let n = tape.layer_norm(x, &p.norm_gamma, &p.norm_beta, LAYER_NORM_EPS)?;
    let tokens = |tape: &mut Tape, wt: &Var| -> Result<Var> {
        let y = tape.conv2d(&n, wt, None, 1)?;
        let y = tape.reshape(&y, &[b, p.heads, d, t])?;
        let y = tape.permute(&y, &[0, 1, 3, 2])?;
        tape.reshape(&y, &[b * p.heads, t, d])
    };
    let q = tokens(tape, &p.q_pw)?;
    let k = tokens(tape, &p.k_pw)?;
    let v = tokens(tape, &p.v_pw)?;
    let o = tape.attention(&q, &k, &v, 1.0 / (d as f64).sqrt())?;
    let o = tape.reshape(&o, &[b, p.heads, t, d])?;
    let o = tape.permute(&o, &[0, 1, 3, 2])?;
    let o = tape.reshape(&o, &[b, c, h, w])?;
    let o = tape.conv2d(&o, &p.out_pw, None, 1)?;
    tape.add(x, &o)
}

pub fn downsample(tape: &mut Tape, x: &Var, p: &ResampleParams<Var>) -> Result<Var> {
    let (_, c, h, w) = x.shape().bchw("downsample")?;
    if p.direction != Direction::Down {
        return Err(Error::invalid(
            "downsample",
            "parameters are for upsampling",
        ));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(
            "downsample",
            format!("spatial dims {h}x{w} must be even"),
        ));
    }
    if c % 2 != 0 {
        return Err(Error::invalid(
            "downsample",
            format!("odd channel count {c}"),
        ));
    }
    let y = tape.conv2d(x, &p.conv, None, 1)?;
    tape.pixel_unshuffle(&y, 2)
}

pub fn upsample(tape: &mut Tape, x: &Var, p: &ResampleParams<Var>) -> Result<Var> {
    let (_, c, _, _) = x.shape().bchw("upsample")?;
    if p.direction != Direction::Up {
        return Err(Error::invalid(
            "upsample",
            "parameters are for downsampling",
        ));
    }
    if c % 2 != 0 {
        return Err(Error::invalid("upsample", format!("odd channel count {c}")));
    }
    let y = tape.conv2d(x, &p.conv, None, 1)?;
    tape.pixel_shuffle(&y, 2)
}
