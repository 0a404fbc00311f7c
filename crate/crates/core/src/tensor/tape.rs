use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::{check_finite, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value produced on a [`Tape`].
///
/// A `Var` whose slot is `None` is a constant: gradients never flow into it.
/// Vars must only be passed to the tape that created them.
#[derive(Clone, Debug)]
pub struct Var {
    value: Arc<Tensor>,
    slot: Option<usize>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &Shape {
        self.value.shape()
    }

    pub fn dims(&self) -> &[usize] {
        self.value.dims()
    }

    pub fn requires_grad(&self) -> bool {
        self.slot.is_some()
    }

    pub fn into_tensor(self) -> Tensor {
        Arc::try_unwrap(self.value).unwrap_or_else(|arc| (*arc).clone())
    }
}

type Slot = Option<usize>;

#[derive(Debug)]
enum Op {
    Add(Slot, Slot),
    Sub(Slot, Slot),
    Mul {
        a: Slot,
        b: Slot,
        av: Arc<Tensor>,
        bv: Arc<Tensor>,
    },
    ScalarMul(Slot, f64),
    ScalarAdd(Slot),
    Abs {
        a: Slot,
        av: Arc<Tensor>,
    },
    Sum {
        a: Slot,
        n: usize,
    },
    Mean {
        a: Slot,
        n: usize,
    },
    MatMul {
        a: Slot,
        b: Slot,
        av: Arc<Tensor>,
        bv: Arc<Tensor>,
        m: usize,
        k: usize,
        p: usize,
    },
    Conv2d {
        x: Slot,
        w: Slot,
        bias: Slot,
        xv: Arc<Tensor>,
        wv: Arc<Tensor>,
        geom: ConvGeom,
    },
    PixelUnshuffle {
        x: Slot,
        b: usize,
        c: usize,
        h: usize,
        w: usize,
        r: usize,
    },
    PixelShuffle {
        x: Slot,
        c: usize,
        h: usize,
        w: usize,
        r: usize,
    },
    LayerNorm {
        x: Slot,
        gamma: Slot,
        beta: Slot,
        gv: Arc<Tensor>,
        xhat: Vec<f64>,
        inv: Vec<f64>,
        b: usize,
        c: usize,
        p: usize,
    },
    Softmax {
        x: Slot,
        y: Arc<Tensor>,
        a: usize,
        inner: usize,
    },
    Gelu {
        x: Slot,
        xv: Arc<Tensor>,
    },
    Tanh {
        x: Slot,
        y: Arc<Tensor>,
    },
    L2Normalize {
        x: Slot,
        y: Arc<Tensor>,
        norms: Vec<f64>,
        a: usize,
        inner: usize,
        eps: f64,
    },
    Reshape(Slot),
    Permute {
        x: Slot,
        in_dims: Vec<usize>,
        axes: Vec<usize>,
    },
    Concat {
        inputs: Vec<Slot>,
        outer: usize,
        sizes: Vec<usize>,
        inner: usize,
    },
    Slice {
        x: Slot,
        outer: usize,
        axis_len: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    ScaleAxis {
        x: Slot,
        s: Slot,
        xv: Arc<Tensor>,
        sv: Arc<Tensor>,
        a: usize,
        inner: usize,
    },
    Attention {
        q: Slot,
        k: Slot,
        v: Slot,
        qv: Arc<Tensor>,
        kv: Arc<Tensor>,
        vv: Arc<Tensor>,
        out: Arc<Tensor>,
        lse: Vec<f64>,
        n: usize,
        t: usize,
        d: usize,
        scale: f64,
    },
}

#[derive(Debug)]
struct Node {
    out: usize,
    op: Op,
}

/// Append-only record of executed ops.
///
/// Constructed with [`Tape::new`] it records every op that touches a tracked
/// value; [`Tape::inference`] builds a tape that records nothing, so
/// intermediate values are freed as soon as their `Var`s drop.
#[derive(Debug)]
pub struct Tape {
    grad_enabled: bool,
    slot_shapes: Vec<Shape>,
    is_leaf: Vec<bool>,
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    macs: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            grad_enabled: true,
            slot_shapes: Vec::new(),
            is_leaf: Vec::new(),
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            macs: 0,
        }
    }

    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Multiply-accumulates performed by convolutions, matmuls and attention.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn reset_macs(&mut self) {
        self.macs = 0;
    }

    /// Number of recorded op nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn new_slot(&mut self, shape: &Shape, leaf: bool) -> usize {
        self.slot_shapes.push(shape.clone());
        self.is_leaf.push(leaf);
        self.leaf_grads.push(None);
        self.slot_shapes.len() - 1
    }

    /// A value that requires gradients (when the tape records).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let slot = self
            .grad_enabled
            .then(|| self.new_slot(value.shape(), true));
        Var {
            value: Arc::new(value),
            slot,
        }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        Var {
            value: Arc::new(value),
            slot: None,
        }
    }

    fn emit(
        &mut self,
        op_name: &'static str,
        value: Tensor,
        inputs: &[Slot],
        op: impl FnOnce() -> Op,
    ) -> Result<Var> {
        self.emit_arc(op_name, Arc::new(value), inputs, op)
    }

    fn emit_arc(
        &mut self,
        op_name: &'static str,
        value: Arc<Tensor>,
        inputs: &[Slot],
        op: impl FnOnce() -> Op,
    ) -> Result<Var> {
        check_finite(op_name, value.data())?;
        let slot = if self.grad_enabled && inputs.iter().any(Option::is_some) {
            let out = self.new_slot(value.shape(), false);
            self.nodes.push(Node { out, op: op() });
            Some(out)
        } else {
            None
        };
        Ok(Var { value, slot })
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: &Var) -> Option<Tensor> {
        let slot = v.slot?;
        let g = self.leaf_grads.get(slot)?.as_ref()?;
        Tensor::from_shape(self.slot_shapes[slot].clone(), g.clone()).ok()
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- elementwise ----

    fn same_shape(op: &'static str, a: &Var, b: &Var) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.dims().to_vec(),
                rhs: b.dims().to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(a: &Var, b: &Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = a
            .value
            .data()
            .iter()
            .zip(b.value.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::from_shape(a.shape().clone(), data).expect("same shape")
    }

    fn map(a: &Var, f: impl Fn(f64) -> f64) -> Tensor {
        let data = a.value.data().iter().map(|x| f(*x)).collect();
        Tensor::from_shape(a.shape().clone(), data).expect("same shape")
    }

    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Self::same_shape("add", a, b)?;
        let out = Self::zip_map(a, b, |x, y| x + y);
        self.emit("add", out, &[a.slot, b.slot], || Op::Add(a.slot, b.slot))
    }

    pub fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Self::same_shape("sub", a, b)?;
        let out = Self::zip_map(a, b, |x, y| x - y);
        self.emit("sub", out, &[a.slot, b.slot], || Op::Sub(a.slot, b.slot))
    }

    pub fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Self::same_shape("mul", a, b)?;
        let out = Self::zip_map(a, b, |x, y| x * y);
        self.emit("mul", out, &[a.slot, b.slot], || Op::Mul {
            a: a.slot,
            b: b.slot,
            av: a.value.clone(),
            bv: b.value.clone(),
        })
    }

    pub fn scalar_mul(&mut self, a: &Var, s: f64) -> Result<Var> {
        let out = Self::map(a, |x| x * s);
        self.emit("scalar_mul", out, &[a.slot], || Op::ScalarMul(a.slot, s))
    }

    pub fn scalar_add(&mut self, a: &Var, s: f64) -> Result<Var> {
        let out = Self::map(a, |x| x + s);
        self.emit("scalar_add", out, &[a.slot], || Op::ScalarAdd(a.slot))
    }

    /// `|x|`, with subgradient 0 at 0.
    pub fn abs(&mut self, a: &Var) -> Result<Var> {
        let out = Self::map(a, f64::abs);
        self.emit("abs", out, &[a.slot], || Op::Abs {
            a: a.slot,
            av: a.value.clone(),
        })
    }

    pub fn gelu(&mut self, x: &Var) -> Result<Var> {
        let out = Self::map(x, kernels::gelu);
        self.emit("gelu", out, &[x.slot], || Op::Gelu {
            x: x.slot,
            xv: x.value.clone(),
        })
    }

    /// Hyperbolic tangent rounded toward zero, so results stay strictly
    /// inside `(-1, 1)` even where the nearest double would be `+-1`.
    pub fn tanh(&mut self, x: &Var) -> Result<Var> {
        const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;
        let out = Arc::new(Self::map(x, |v| v.tanh().clamp(-BELOW_ONE, BELOW_ONE)));
        let y = out.clone();
        self.emit_arc("tanh", out, &[x.slot], || Op::Tanh { x: x.slot, y })
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: &Var) -> Result<Var> {
        let s = a.value.data().iter().sum::<f64>();
        let n = a.value.numel();
        self.emit("sum", Tensor::scalar(s), &[a.slot], || Op::Sum {
            a: a.slot,
            n,
        })
    }

    pub fn mean(&mut self, a: &Var) -> Result<Var> {
        let n = a.value.numel();
        let s = a.value.data().iter().sum::<f64>() / n as f64;
        self.emit("mean", Tensor::scalar(s), &[a.slot], || Op::Mean {
            a: a.slot,
            n,
        })
    }

    // ---- linear algebra ----

    /// `[..., m, k] x [..., k, p] -> [..., m, p]` with identical leading dims.
    pub fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (ad, bd) = (a.dims(), b.dims());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: ad.to_vec(),
            rhs: bd.to_vec(),
        };
        if ad.len() < 2 || ad.len() != bd.len() || ad[..ad.len() - 2] != bd[..bd.len() - 2] {
            return Err(mismatch());
        }
        let nd = ad.len();
        let (m, k, k2, p) = (ad[nd - 2], ad[nd - 1], bd[nd - 2], bd[nd - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let n: usize = ad[..nd - 2].iter().product();
        let data = kernels::matmul_forward(a.value.data(), b.value.data(), n, m, k, p);
        let mut dims = ad.to_vec();
        dims[nd - 1] = p;
        self.macs += (n * m * k * p) as u64;
        self.emit(
            "matmul",
            Tensor::new(dims, data)?,
            &[a.slot, b.slot],
            || Op::MatMul {
                a: a.slot,
                b: b.slot,
                av: a.value.clone(),
                bv: b.value.clone(),
                m,
                k,
                p,
            },
        )
    }

    /// Grouped, same-padded 2-D cross-correlation with stride 1.
    ///
    /// `x: [B, Cin, H, W]`, `w: [Cout, Cin/groups, k, k]` with `k` in `{1, 3}`.
    pub fn conv2d(&mut self, x: &Var, w: &Var, bias: Option<&Var>, groups: usize) -> Result<Var> {
        let (b, cin, h, wd) = x.shape().bchw("conv2d")?;
        let (cout, cin_g, kh, kw) = w.shape().bchw("conv2d")?;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(Error::invalid(
                "conv2d",
                format!(
                    "input {:?} and weight {:?} are inconsistent with groups={groups}",
                    x.dims(),
                    w.dims()
                ),
            ));
        }
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel must be 1x1 or 3x3, got {kh}x{kw}"),
            ));
        }
        if let Some(bias) = bias {
            if bias.dims() != [cout] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: bias.dims().to_vec(),
                    rhs: vec![cout],
                });
            }
        }
        let geom = ConvGeom {
            batch: b,
            cin,
            cout,
            h,
            w: wd,
            k: kh,
            groups,
        };
        let data = kernels::conv2d_forward(
            x.value.data(),
            w.value.data(),
            bias.map(|v| v.value.data()),
            geom,
        );
        self.macs += geom.macs();
        let bslot = bias.and_then(|v| v.slot);
        self.emit(
            "conv2d",
            Tensor::new(vec![b, cout, h, wd], data)?,
            &[x.slot, w.slot, bslot],
            || Op::Conv2d {
                x: x.slot,
                w: w.slot,
                bias: bslot,
                xv: x.value.clone(),
                wv: w.value.clone(),
                geom,
            },
        )
    }

    /// Scaled dot-product attention over `[..., T, d]` query/key/value tensors.
    pub fn attention(&mut self, q: &Var, k: &Var, v: &Var, scale: f64) -> Result<Var> {
        Self::same_shape("attention", q, k)?;
        Self::same_shape("attention", q, v)?;
        let dims = q.dims();
        if dims.len() < 2 {
            return Err(Error::invalid("attention", "inputs must be at least 2-D"));
        }
        let nd = dims.len();
        let (t, d) = (dims[nd - 2], dims[nd - 1]);
        let n = q.value.numel() / (t * d);
        let (out, lse) = kernels::attention_forward(
            q.value.data(),
            k.value.data(),
            v.value.data(),
            n,
            t,
            d,
            scale,
        );
        self.macs += 2 * (n * t * t * d) as u64;
        let out = Arc::new(Tensor::new(dims.to_vec(), out)?);
        let saved = out.clone();
        self.emit_arc("attention", out, &[q.slot, k.slot, v.slot], || {
            Op::Attention {
                q: q.slot,
                k: k.slot,
                v: v.slot,
                qv: q.value.clone(),
                kv: k.value.clone(),
                vv: v.value.clone(),
                out: saved,
                lse,
                n,
                t,
                d,
                scale,
            }
        })
    }

    // ---- normalization ----

    /// Normalizes each `[b, :, h, w]` channel vector, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm", "eps must be positive"));
        }
        if x.dims().len() < 2 {
            return Err(Error::invalid(
                "layer_norm",
                "input must have a channel axis",
            ));
        }
        let (b, c, p) = x.shape().split_at_axis(1);
        if gamma.dims() != [c] || beta.dims() != [c] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: x.dims().to_vec(),
                rhs: gamma.dims().to_vec(),
            });
        }
        let (y, xhat, inv) = kernels::layer_norm_forward(
            x.value.data(),
            gamma.value.data(),
            beta.value.data(),
            b,
            c,
            p,
            eps,
        );
        self.emit(
            "layer_norm",
            Tensor::from_shape(x.shape().clone(), y)?,
            &[x.slot, gamma.slot, beta.slot],
            || Op::LayerNorm {
                x: x.slot,
                gamma: gamma.slot,
                beta: beta.slot,
                gv: gamma.value.clone(),
                xhat,
                inv,
                b,
                c,
                p,
            },
        )
    }

    pub fn softmax(&mut self, x: &Var, axis: usize) -> Result<Var> {
        x.shape().check_axis("softmax", axis)?;
        let (_, a, inner) = x.shape().split_at_axis(axis);
        let y = Arc::new(Tensor::from_shape(
            x.shape().clone(),
            kernels::softmax_forward(x.value.data(), a, inner),
        )?);
        let saved = y.clone();
        self.emit_arc("softmax", y, &[x.slot], || Op::Softmax {
            x: x.slot,
            y: saved,
            a,
            inner,
        })
    }

    /// Divides each lane along `axis` by `max(||lane||_2, eps)`.
    pub fn l2_normalize(&mut self, x: &Var, axis: usize, eps: f64) -> Result<Var> {
        x.shape().check_axis("l2_normalize", axis)?;
        if eps <= 0.0 {
            return Err(Error::invalid("l2_normalize", "eps must be positive"));
        }
        let (outer, a, inner) = x.shape().split_at_axis(axis);
        let (y, norms) = kernels::l2_normalize_forward(x.value.data(), outer, a, inner, eps);
        let y = Arc::new(Tensor::from_shape(x.shape().clone(), y)?);
        let saved = y.clone();
        self.emit_arc("l2_normalize", y, &[x.slot], || Op::L2Normalize {
            x: x.slot,
            y: saved,
            norms,
            a,
            inner,
            eps,
        })
    }

    /// Multiplies `x` by `s[i]` at index `i` along `axis`.
    pub fn scale_axis(&mut self, x: &Var, s: &Var, axis: usize) -> Result<Var> {
        x.shape().check_axis("scale_axis", axis)?;
        let (_, a, inner) = x.shape().split_at_axis(axis);
        if s.dims() != [a] {
            return Err(Error::ShapeMismatch {
                op: "scale_axis",
                lhs: x.dims().to_vec(),
                rhs: s.dims().to_vec(),
            });
        }
        let sv = s.value.data();
        let data = x
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * sv[(i / inner) % a])
            .collect();
        self.emit(
            "scale_axis",
            Tensor::from_shape(x.shape().clone(), data)?,
            &[x.slot, s.slot],
            || Op::ScaleAxis {
                x: x.slot,
                s: s.slot,
                xv: x.value.clone(),
                sv: s.value.clone(),
                a,
                inner,
            },
        )
    }

    // ---- structural ----

    pub fn pixel_unshuffle(&mut self, x: &Var, r: usize) -> Result<Var> {
        let (b, c, h, w) = x.shape().bchw("pixel_unshuffle")?;
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(Error::invalid(
                "pixel_unshuffle",
                format!("spatial dims {h}x{w} are not divisible by {r}"),
            ));
        }
        let data = kernels::pixel_unshuffle(x.value.data(), c, h, w, r);
        self.emit(
            "pixel_unshuffle",
            Tensor::new(vec![b, c * r * r, h / r, w / r], data)?,
            &[x.slot],
            || Op::PixelUnshuffle {
                x: x.slot,
                b,
                c,
                h,
                w,
                r,
            },
        )
    }

    pub fn pixel_shuffle(&mut self, x: &Var, r: usize) -> Result<Var> {
        let (b, c, h, w) = x.shape().bchw("pixel_shuffle")?;
        if r == 0 || c % (r * r) != 0 {
            return Err(Error::invalid(
                "pixel_shuffle",
                format!("{c} channels are not divisible by {r}^2"),
            ));
        }
        let data = kernels::pixel_shuffle(x.value.data(), b, c, h, w, r);
        self.emit(
            "pixel_shuffle",
            Tensor::new(vec![b, c / (r * r), h * r, w * r], data)?,
            &[x.slot],
            || Op::PixelShuffle {
                x: x.slot,
                c,
                h,
                w,
                r,
            },
        )
    }

    pub fn reshape(&mut self, x: &Var, dims: &[usize]) -> Result<Var> {
        let t = (*x.value).clone().reshaped(dims.to_vec())?;
        self.emit("reshape", t, &[x.slot], || Op::Reshape(x.slot))
    }

    /// Reorders axes; output axis `k` is input axis `axes[k]`.
    pub fn permute(&mut self, x: &Var, axes: &[usize]) -> Result<Var> {
        let nd = x.dims().len();
        let mut seen = vec![false; nd];
        if axes.len() != nd
            || axes
                .iter()
                .any(|&a| a >= nd || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::invalid(
                "permute",
                format!("{axes:?} is not a permutation of {nd} axes"),
            ));
        }
        let data = kernels::permute(x.value.data(), x.dims(), axes);
        let dims: Vec<usize> = axes.iter().map(|&a| x.dims()[a]).collect();
        self.emit("permute", Tensor::new(dims, data)?, &[x.slot], || {
            Op::Permute {
                x: x.slot,
                in_dims: x.dims().to_vec(),
                axes: axes.to_vec(),
            }
        })
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: &Var, a0: usize, a1: usize) -> Result<Var> {
        let nd = x.dims().len();
        if a0 >= nd || a1 >= nd {
            return Err(Error::invalid(
                "transpose",
                format!("axes ({a0}, {a1}) out of range for {nd}-D tensor"),
            ));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(a0, a1);
        self.permute(x, &axes)
    }

    pub fn concat(&mut self, xs: &[&Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        first.shape().check_axis("concat", axis)?;
        let (outer, _, inner) = first.shape().split_at_axis(axis);
        let mut sizes = Vec::with_capacity(xs.len());
        for x in xs {
            let (d0, d1) = (first.dims(), x.dims());
            let compatible = d0.len() == d1.len()
                && d0
                    .iter()
                    .zip(d1)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: d0.to_vec(),
                    rhs: d1.to_vec(),
                });
            }
            sizes.push(d1[axis]);
        }
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (x, &s) in xs.iter().zip(&sizes) {
                data.extend_from_slice(&x.value.data()[o * s * inner..(o + 1) * s * inner]);
            }
        }
        let mut dims = first.dims().to_vec();
        dims[axis] = total;
        let slots: Vec<Slot> = xs.iter().map(|x| x.slot).collect();
        self.emit("concat", Tensor::new(dims, data)?, &slots, || Op::Concat {
            inputs: slots.clone(),
            outer,
            sizes,
            inner,
        })
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: &Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        x.shape().check_axis("slice", axis)?;
        let (outer, axis_len, inner) = x.shape().split_at_axis(axis);
        if len == 0 || start + len > axis_len {
            return Err(Error::invalid(
                "slice",
                format!(
                    "range {start}..{} out of bounds for axis of length {axis_len}",
                    start + len
                ),
            ));
        }
        let src = x.value.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut dims = x.dims().to_vec();
        dims[axis] = len;
        self.emit("slice", Tensor::new(dims, data)?, &[x.slot], || Op::Slice {
            x: x.slot,
            outer,
            axis_len,
            start,
            len,
            inner,
        })
    }

    // ---- backward ----

    /// Reverse-mode pass from a scalar `loss`, accumulating into leaf grads.
    pub fn backward(&mut self, loss: &Var) -> Result<()> {
        if loss.value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss.dims().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.slot_shapes.len()];
        if let Some(s) = loss.slot {
            grads[s] = Some(vec![1.0]);
        }
        for node in self.nodes.iter().rev() {
            let Some(g) = grads[node.out].take() else {
                continue;
            };
            for (slot, contrib) in node.op.vjp(&g) {
                accumulate(&mut grads[slot], contrib);
            }
        }
        for slot in 0..self.slot_shapes.len() {
            if !self.is_leaf[slot] {
                continue;
            }
            let g = grads[slot]
                .take()
                .unwrap_or_else(|| vec![0.0; self.slot_shapes[slot].numel()]);
            accumulate(&mut self.leaf_grads[slot], g);
        }
        Ok(())
    }
}

fn accumulate(dst: &mut Option<Vec<f64>>, src: Vec<f64>) {
    match dst {
        Some(d) => d.iter_mut().zip(&src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src),
    }
}

fn push(out: &mut Vec<(usize, Vec<f64>)>, slot: Slot, g: impl FnOnce() -> Vec<f64>) {
    if let Some(s) = slot {
        out.push((s, g()));
    }
}

impl Op {
    /// Vector-Jacobian products for every tracked input.
    fn vjp(&self, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let mut out = Vec::with_capacity(3);
        match self {
            Op::Add(a, b) => {
                push(&mut out, *a, || g.to_vec());
                push(&mut out, *b, || g.to_vec());
            }
            Op::Sub(a, b) => {
                push(&mut out, *a, || g.to_vec());
                push(&mut out, *b, || g.iter().map(|v| -v).collect());
            }
            Op::Mul { a, b, av, bv } => {
                push(&mut out, *a, || {
                    g.iter().zip(bv.data()).map(|(g, y)| g * y).collect()
                });
                push(&mut out, *b, || {
                    g.iter().zip(av.data()).map(|(g, x)| g * x).collect()
                });
            }
            Op::ScalarMul(a, s) => push(&mut out, *a, || g.iter().map(|v| v * s).collect()),
            Op::ScalarAdd(a) => push(&mut out, *a, || g.to_vec()),
            Op::Abs { a, av } => push(&mut out, *a, || {
                g.iter()
                    .zip(av.data())
                    .map(|(g, x)| {
                        if *x > 0.0 {
                            *g
                        } else if *x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect()
            }),
            Op::Sum { a, n } => push(&mut out, *a, || vec![g[0]; *n]),
            Op::Mean { a, n } => push(&mut out, *a, || vec![g[0] / *n as f64; *n]),
            Op::MatMul {
                a,
                b,
                av,
                bv,
                m,
                k,
                p,
                ..
            } => {
                if a.is_some() || b.is_some() {
                    let (da, db) = kernels::matmul_backward(av.data(), bv.data(), g, *m, *k, *p);
                    push(&mut out, *a, || da);
                    push(&mut out, *b, || db);
                }
            }
            Op::Conv2d {
                x,
                w,
                bias,
                xv,
                wv,
                geom,
            } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(xv.data(), wv.data(), g, *geom, bias.is_some());
                push(&mut out, *x, || dx);
                push(&mut out, *w, || dw);
                if let Some(db) = db {
                    push(&mut out, *bias, || db);
                }
            }
            Op::PixelUnshuffle { x, b, c, h, w, r } => push(&mut out, *x, || {
                kernels::pixel_shuffle(g, *b, c * r * r, h / r, w / r, *r)
            }),
            Op::PixelShuffle { x, c, h, w, r } => push(&mut out, *x, || {
                kernels::pixel_unshuffle(g, c / (r * r), h * r, w * r, *r)
            }),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                gv,
                xhat,
                inv,
                b,
                c,
                p,
            } => {
                let (dx, dg, db) =
                    kernels::layer_norm_backward(xhat, inv, gv.data(), g, *b, *c, *p);
                push(&mut out, *x, || dx);
                push(&mut out, *gamma, || dg);
                push(&mut out, *beta, || db);
            }
            Op::Softmax { x, y, a, inner } => push(&mut out, *x, || {
                kernels::softmax_backward(y.data(), g, *a, *inner)
            }),
            Op::Gelu { x, xv } => push(&mut out, *x, || {
                g.iter()
                    .zip(xv.data())
                    .map(|(g, x)| g * kernels::gelu_grad(*x))
                    .collect()
            }),
            Op::Tanh { x, y } => push(&mut out, *x, || {
                g.iter()
                    .zip(y.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect()
            }),
            Op::L2Normalize {
                x,
                y,
                norms,
                a,
                inner,
                eps,
            } => push(&mut out, *x, || {
                kernels::l2_normalize_backward(y.data(), norms, g, *a, *inner, *eps)
            }),
            Op::Reshape(x) => push(&mut out, *x, || g.to_vec()),
            Op::Permute { x, in_dims, axes } => push(&mut out, *x, || {
                let out_dims: Vec<usize> = axes.iter().map(|&a| in_dims[a]).collect();
                let mut inverse = vec![0; axes.len()];
                for (k, &a) in axes.iter().enumerate() {
                    inverse[a] = k;
                }
                kernels::permute(g, &out_dims, &inverse)
            }),
            Op::Concat {
                inputs,
                outer,
                sizes,
                inner,
            } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (slot, &s) in inputs.iter().zip(sizes) {
                    push(&mut out, *slot, || {
                        let mut d = Vec::with_capacity(outer * s * inner);
                        for o in 0..*outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g[base..base + s * inner]);
                        }
                        d
                    });
                    offset += s;
                }
            }
            Op::Slice {
                x,
                outer,
                axis_len,
                start,
                len,
                inner,
            } => push(&mut out, *x, || {
                let mut d = vec![0.0; outer * axis_len * inner];
                for o in 0..*outer {
                    let dst = (o * axis_len + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                d
            }),
            Op::ScaleAxis {
                x,
                s,
                xv,
                sv,
                a,
                inner,
            } => {
                let svals = sv.data();
                push(&mut out, *x, || {
                    g.iter()
                        .enumerate()
                        .map(|(i, g)| g * svals[(i / inner) % a])
                        .collect()
                });
                push(&mut out, *s, || {
                    let mut ds = vec![0.0; *a];
                    for (i, (g, x)) in g.iter().zip(xv.data()).enumerate() {
                        ds[(i / inner) % a] += g * x;
                    }
                    ds
                });
            }
            Op::Attention {
                q,
                k,
                v,
                qv,
                kv,
                vv,
                out: o,
                lse,
                n,
                t,
                d,
                scale,
            } => {
                let (dq, dk, dv) = kernels::attention_backward(
                    qv.data(),
                    kv.data(),
                    vv.data(),
                    o.data(),
                    lse,
                    g,
                    *n,
                    *t,
                    *d,
                    *scale,
                );
                push(&mut out, *q, || dq);
                push(&mut out, *k, || dk);
                push(&mut out, *v, || dv);
            }
        }
        out
    }
}
