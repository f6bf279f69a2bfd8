//! Minimal layer graph with hand-derived backpropagation.
//!
//! The graph is generic over the scalar type: training and inference run in
//! `f32`, while gradient verification instantiates the identical code in
//! `f64` so central finite differences are meaningful. All parameters of a
//! network live in one flat vector; each node owns a contiguous slice of it,
//! which keeps the optimizer, the EMA copy, per-sample gradients, and the
//! checkpoint layout trivial.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub trait Scalar:
    Float + FromPrimitive + std::iter::Sum + Debug + Send + Sync + 'static
{
}
impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline]
pub fn sc<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("scalar conversion")
}

/// Channel-major activation dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Dims { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One computation node. Parameterized nodes consume a slice of the flat
/// parameter vector in traversal order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Node {
    Conv {
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Dense {
        input: usize,
        output: usize,
    },
    Relu,
    MaxPool2,
    GlobalAvgPool,
    /// Per-sample, per-channel normalization over spatial positions with a
    /// learned scale and shift. Chosen over cross-batch statistics so every
    /// sample's gradient is self-contained (a requirement of the per-sample
    /// clipping defense) and so batch composition cannot perturb replay.
    ChannelNorm {
        channels: usize,
    },
    Residual {
        main: Vec<Node>,
        shortcut: Vec<Node>,
    },
}

impl Node {
    fn param_len(&self) -> usize {
        match self {
            Node::Conv { in_c, out_c, k, .. } => out_c * in_c * k * k + out_c,
            Node::Dense { input, output } => output * input + output,
            Node::ChannelNorm { channels } => 2 * channels,
            Node::Residual { main, shortcut } => {
                seq_param_len(main) + seq_param_len(shortcut)
            }
            _ => 0,
        }
    }

    fn out_dims(&self, din: Dims) -> Result<Dims> {
        match self {
            Node::Conv { in_c, out_c, k, stride, pad } => {
                if din.c != *in_c {
                    return Err(Error::Shape(format!(
                        "conv expects {in_c} input channels, got {}",
                        din.c
                    )));
                }
                if din.h + 2 * pad < *k || din.w + 2 * pad < *k || *stride == 0 {
                    return Err(Error::Shape("conv kernel exceeds padded input".into()));
                }
                Ok(Dims::new(
                    *out_c,
                    (din.h + 2 * pad - k) / stride + 1,
                    (din.w + 2 * pad - k) / stride + 1,
                ))
            }
            Node::Dense { input, output } => {
                if din.len() != *input {
                    return Err(Error::Shape(format!(
                        "dense expects {input} inputs, got {}",
                        din.len()
                    )));
                }
                Ok(Dims::new(*output, 1, 1))
            }
            Node::Relu => Ok(din),
            Node::MaxPool2 => {
                if din.h < 2 || din.w < 2 {
                    return Err(Error::Shape("maxpool needs at least 2x2 input".into()));
                }
                Ok(Dims::new(din.c, din.h / 2, din.w / 2))
            }
            Node::GlobalAvgPool => Ok(Dims::new(din.c, 1, 1)),
            Node::ChannelNorm { channels } => {
                if din.c != *channels {
                    return Err(Error::Shape(format!(
                        "norm expects {channels} channels, got {}",
                        din.c
                    )));
                }
                Ok(din)
            }
            Node::Residual { main, shortcut } => {
                let dm = seq_out_dims(main, din)?;
                let ds = seq_out_dims(shortcut, din)?;
                if dm != ds {
                    return Err(Error::Shape(format!(
                        "residual branches disagree: {dm:?} vs {ds:?}"
                    )));
                }
                Ok(dm)
            }
        }
    }
}

fn seq_param_len(nodes: &[Node]) -> usize {
    nodes.iter().map(Node::param_len).sum()
}

fn seq_out_dims(nodes: &[Node], mut dims: Dims) -> Result<Dims> {
    for n in nodes {
        dims = n.out_dims(dims)?;
    }
    Ok(dims)
}

/// Named slice of the flat parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Activation cache written by the forward pass and consumed in reverse by
/// the backward pass. A non-recording tape turns forward into pure inference.
pub struct Tape<T> {
    record: bool,
    vals: Vec<Vec<T>>,
    idx: Vec<Vec<u32>>,
}

impl<T> Tape<T> {
    pub fn recording() -> Self {
        Tape { record: true, vals: Vec::new(), idx: Vec::new() }
    }

    pub fn disabled() -> Self {
        Tape { record: false, vals: Vec::new(), idx: Vec::new() }
    }

    fn push_vals(&mut self, v: Vec<T>) {
        if self.record {
            self.vals.push(v);
        }
    }

    fn pop_vals(&mut self) -> Vec<T> {
        self.vals.pop().expect("tape value underflow")
    }

    fn push_idx(&mut self, v: Vec<u32>) {
        if self.record {
            self.idx.push(v);
        }
    }

    fn pop_idx(&mut self) -> Vec<u32> {
        self.idx.pop().expect("tape index underflow")
    }
}

/// A full network: input dimensions plus the node sequence ending in logits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Net {
    pub input: Dims,
    pub nodes: Vec<Node>,
}

impl Net {
    pub fn new(input: Dims, nodes: Vec<Node>) -> Result<Self> {
        let net = Net { input, nodes };
        net.out_dims()?;
        Ok(net)
    }

    pub fn out_dims(&self) -> Result<Dims> {
        seq_out_dims(&self.nodes, self.input)
    }

    pub fn param_count(&self) -> usize {
        seq_param_len(&self.nodes)
    }

    pub fn param_layout(&self) -> Vec<ParamEntry> {
        let mut out = Vec::new();
        let mut offset = 0usize;
        let mut layer = 0usize;
        layout_seq(&self.nodes, &mut offset, &mut layer, &mut out);
        out
    }

    /// He-normal weights, zero biases, unit scales. Draw order follows the
    /// parameter layout so initialization is a pure function of the rng.
    ///
    /// The last dense layer is reset to zero after drawing: logits of a fresh
    /// model are exactly zero, so it scores every class equally and confidence
    /// gates see uniform posteriors until the head has taken a step.
    pub fn init<T: Scalar>(&self, rng: &mut impl Rng) -> Vec<T> {
        let mut theta = vec![T::zero(); self.param_count()];
        let mut offset = 0usize;
        init_seq(&self.nodes, &mut theta, &mut offset, rng);
        if let Some(head) = self
            .param_layout()
            .iter()
            .rev()
            .find(|e| e.name.ends_with(".dense.weight"))
        {
            for slot in &mut theta[head.offset..head.offset + head.len] {
                *slot = T::zero();
            }
        }
        theta
    }

    /// Forward pass to logits. `tape` must be recording when a backward pass
    /// will follow.
    pub fn forward<T: Scalar>(&self, theta: &[T], x: &[T], tape: &mut Tape<T>) -> Vec<T> {
        assert_eq!(theta.len(), self.param_count(), "parameter vector length");
        assert_eq!(x.len(), self.input.len(), "input length");
        let (out, _) = fwd_seq(&self.nodes, theta, 0, self.input, x.to_vec(), tape);
        out
    }

    /// Backward pass from logit gradients; accumulates into `dtheta` and
    /// consumes the tape of the matching forward call.
    pub fn backward<T: Scalar>(
        &self,
        theta: &[T],
        dlogits: Vec<T>,
        tape: &mut Tape<T>,
        dtheta: &mut [T],
    ) {
        assert_eq!(dtheta.len(), self.param_count(), "gradient vector length");
        let _ = bwd_seq(&self.nodes, theta, 0, self.input, dlogits, tape, dtheta);
    }
}

fn layout_seq(nodes: &[Node], offset: &mut usize, layer: &mut usize, out: &mut Vec<ParamEntry>) {
    for node in nodes {
        match node {
            Node::Conv { in_c, out_c, k, .. } => {
                let wlen = out_c * in_c * k * k;
                out.push(ParamEntry {
                    name: format!("layer{}.conv.weight", layer),
                    offset: *offset,
                    len: wlen,
                });
                out.push(ParamEntry {
                    name: format!("layer{}.conv.bias", layer),
                    offset: *offset + wlen,
                    len: *out_c,
                });
                *offset += wlen + out_c;
                *layer += 1;
            }
            Node::Dense { input, output } => {
                let wlen = output * input;
                out.push(ParamEntry {
                    name: format!("layer{}.dense.weight", layer),
                    offset: *offset,
                    len: wlen,
                });
                out.push(ParamEntry {
                    name: format!("layer{}.dense.bias", layer),
                    offset: *offset + wlen,
                    len: *output,
                });
                *offset += wlen + output;
                *layer += 1;
            }
            Node::ChannelNorm { channels } => {
                out.push(ParamEntry {
                    name: format!("layer{}.norm.scale", layer),
                    offset: *offset,
                    len: *channels,
                });
                out.push(ParamEntry {
                    name: format!("layer{}.norm.shift", layer),
                    offset: *offset + channels,
                    len: *channels,
                });
                *offset += 2 * channels;
                *layer += 1;
            }
            Node::Residual { main, shortcut } => {
                layout_seq(main, offset, layer, out);
                layout_seq(shortcut, offset, layer, out);
            }
            _ => {}
        }
    }
}

fn init_seq<T: Scalar>(nodes: &[Node], theta: &mut [T], offset: &mut usize, rng: &mut impl Rng) {
    for node in nodes {
        match node {
            Node::Conv { in_c, out_c, k, .. } => {
                let wlen = out_c * in_c * k * k;
                let std = (2.0 / (in_c * k * k) as f64).sqrt();
                for i in 0..wlen {
                    let z: f64 = StandardNormal.sample(rng);
                    theta[*offset + i] = sc(z * std);
                }
                // biases stay zero
                *offset += wlen + out_c;
            }
            Node::Dense { input, output } => {
                let wlen = output * input;
                let std = (2.0 / *input as f64).sqrt();
                for i in 0..wlen {
                    let z: f64 = StandardNormal.sample(rng);
                    theta[*offset + i] = sc(z * std);
                }
                *offset += wlen + output;
            }
            Node::ChannelNorm { channels } => {
                for i in 0..*channels {
                    theta[*offset + i] = T::one();
                }
                *offset += 2 * channels;
            }
            Node::Residual { main, shortcut } => {
                init_seq(main, theta, offset, rng);
                init_seq(shortcut, theta, offset, rng);
            }
            _ => {}
        }
    }
}

/// Valid output index range for one kernel tap: source = out * stride + k_off
/// must land inside `[0, limit)`.
#[inline]
fn tap_range(limit: usize, k_off: isize, stride: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if k_off >= 0 {
        0
    } else {
        ((-k_off) + s - 1) / s
    };
    let hi_src = limit as isize - 1 - k_off;
    if hi_src < 0 {
        return (1, 0); // empty
    }
    let hi = (hi_src / s).min(out_len as isize - 1);
    if hi < lo {
        (1, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

fn fwd_seq<T: Scalar>(
    nodes: &[Node],
    theta: &[T],
    mut offset: usize,
    mut dims: Dims,
    mut x: Vec<T>,
    tape: &mut Tape<T>,
) -> (Vec<T>, Dims) {
    for node in nodes {
        let plen = node.param_len();
        x = fwd_node(node, theta, offset, dims, x, tape);
        dims = node.out_dims(dims).expect("dims validated at construction");
        offset += plen;
    }
    (x, dims)
}

fn fwd_node<T: Scalar>(
    node: &Node,
    theta: &[T],
    offset: usize,
    din: Dims,
    x: Vec<T>,
    tape: &mut Tape<T>,
) -> Vec<T> {
    match node {
        Node::Conv { in_c, out_c, k, stride, pad } => {
            let dout = node.out_dims(din).unwrap();
            let (oh, ow) = (dout.h, dout.w);
            let (ih, iw) = (din.h, din.w);
            let wlen = out_c * in_c * k * k;
            let wts = &theta[offset..offset + wlen];
            let bias = &theta[offset + wlen..offset + wlen + out_c];
            let mut out = vec![T::zero(); out_c * oh * ow];
            for oc in 0..*out_c {
                let oplane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
                for v in oplane.iter_mut() {
                    *v = bias[oc];
                }
                for ic in 0..*in_c {
                    let iplane = &x[ic * ih * iw..(ic + 1) * ih * iw];
                    for ky in 0..*k {
                        let y_off = ky as isize - *pad as isize;
                        let (oy_lo, oy_hi) = tap_range(ih, y_off, *stride, oh);
                        for kx in 0..*k {
                            let x_off = kx as isize - *pad as isize;
                            let (ox_lo, ox_hi) = tap_range(iw, x_off, *stride, ow);
                            if oy_lo > oy_hi || ox_lo > ox_hi {
                                continue;
                            }
                            let wv = wts[((oc * in_c + ic) * k + ky) * k + kx];
                            let n = ox_hi - ox_lo + 1;
                            for oy in oy_lo..=oy_hi {
                                let iy = (oy * stride) as isize + y_off;
                                let irow = iy as usize * iw;
                                let orow = oy * ow;
                                if *stride == 1 {
                                    let i0 = (irow as isize + ox_lo as isize + x_off) as usize;
                                    let dst = &mut oplane[orow + ox_lo..orow + ox_lo + n];
                                    let src = &iplane[i0..i0 + n];
                                    for (d, &s) in dst.iter_mut().zip(src) {
                                        *d = *d + wv * s;
                                    }
                                } else {
                                    for ox in ox_lo..=ox_hi {
                                        let ix = (ox * stride) as isize + x_off;
                                        oplane[orow + ox] =
                                            oplane[orow + ox] + wv * iplane[irow + ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            tape.push_vals(x);
            out
        }
        Node::Dense { input, output } => {
            let wts = &theta[offset..offset + output * input];
            let bias = &theta[offset + output * input..offset + output * input + output];
            let mut out = vec![T::zero(); *output];
            for o in 0..*output {
                let row = &wts[o * input..(o + 1) * input];
                let mut acc = bias[o];
                for (w, v) in row.iter().zip(&x) {
                    acc = acc + *w * *v;
                }
                out[o] = acc;
            }
            tape.push_vals(x);
            out
        }
        Node::Relu => {
            let out: Vec<T> = x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
            tape.push_vals(x);
            out
        }
        Node::MaxPool2 => {
            let dout = node.out_dims(din).unwrap();
            let (oh, ow) = (dout.h, dout.w);
            let (ih, iw) = (din.h, din.w);
            let mut out = vec![T::zero(); din.c * oh * ow];
            let mut arg = vec![0u32; din.c * oh * ow];
            for c in 0..din.c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut best_i = 0u32;
                        // ties keep the first element in scan order
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let iy = oy * 2 + dy;
                                let ix = ox * 2 + dx;
                                let idx = (c * ih + iy) * iw + ix;
                                if x[idx] > best {
                                    best = x[idx];
                                    best_i = idx as u32;
                                }
                            }
                        }
                        let o = (c * oh + oy) * ow + ox;
                        out[o] = best;
                        arg[o] = best_i;
                    }
                }
            }
            tape.push_idx(arg);
            out
        }
        Node::GlobalAvgPool => {
            let plane = din.h * din.w;
            let inv = sc::<T>(1.0 / plane as f64);
            (0..din.c)
                .map(|c| {
                    let mut acc = T::zero();
                    for &v in &x[c * plane..(c + 1) * plane] {
                        acc = acc + v;
                    }
                    acc * inv
                })
                .collect()
        }
        Node::ChannelNorm { channels } => {
            let plane = din.h * din.w;
            let eps = sc::<T>(1e-5);
            let inv_n = sc::<T>(1.0 / plane as f64);
            let scale = &theta[offset..offset + channels];
            let shift = &theta[offset + channels..offset + 2 * channels];
            let mut out = vec![T::zero(); x.len()];
            let mut stats = vec![T::zero(); 2 * channels];
            for c in 0..*channels {
                let xs = &x[c * plane..(c + 1) * plane];
                let mut mean = T::zero();
                for &v in xs {
                    mean = mean + v;
                }
                mean = mean * inv_n;
                let mut var = T::zero();
                for &v in xs {
                    let d = v - mean;
                    var = var + d * d;
                }
                var = var * inv_n;
                let inv_std = (var + eps).sqrt().recip();
                stats[c] = mean;
                stats[channels + c] = inv_std;
                let os = &mut out[c * plane..(c + 1) * plane];
                for (o, &v) in os.iter_mut().zip(xs) {
                    *o = scale[c] * (v - mean) * inv_std + shift[c];
                }
            }
            tape.push_vals(x);
            tape.push_vals(stats);
            out
        }
        Node::Residual { main, shortcut } => {
            let main_off = offset;
            let short_off = offset + seq_param_len(main);
            tape.push_vals(x.clone());
            let (ym, _) = fwd_seq(main, theta, main_off, din, x.clone(), tape);
            let (ys, _) = fwd_seq(shortcut, theta, short_off, din, x, tape);
            ym.iter().zip(&ys).map(|(&a, &b)| a + b).collect()
        }
    }
}

fn bwd_seq<T: Scalar>(
    nodes: &[Node],
    theta: &[T],
    offset0: usize,
    dims0: Dims,
    dout: Vec<T>,
    tape: &mut Tape<T>,
    dtheta: &mut [T],
) -> Vec<T> {
    // Recompute each node's parameter offset and input dims, then walk back.
    let mut meta = Vec::with_capacity(nodes.len());
    let mut offset = offset0;
    let mut dims = dims0;
    for node in nodes {
        meta.push((offset, dims));
        offset += node.param_len();
        dims = node.out_dims(dims).expect("dims validated at construction");
    }
    let mut grad = dout;
    for (node, &(off, din)) in nodes.iter().zip(&meta).rev() {
        grad = bwd_node(node, theta, off, din, grad, tape, dtheta);
    }
    grad
}

fn bwd_node<T: Scalar>(
    node: &Node,
    theta: &[T],
    offset: usize,
    din: Dims,
    dout: Vec<T>,
    tape: &mut Tape<T>,
    dtheta: &mut [T],
) -> Vec<T> {
    match node {
        Node::Conv { in_c, out_c, k, stride, pad } => {
            let x = tape.pop_vals();
            let do_dims = node.out_dims(din).unwrap();
            let (oh, ow) = (do_dims.h, do_dims.w);
            let (ih, iw) = (din.h, din.w);
            let wlen = out_c * in_c * k * k;
            let wts = &theta[offset..offset + wlen];
            let mut dx = vec![T::zero(); x.len()];
            for oc in 0..*out_c {
                let dplane = &dout[oc * oh * ow..(oc + 1) * oh * ow];
                let mut db = T::zero();
                for &g in dplane {
                    db = db + g;
                }
                dtheta[offset + wlen + oc] = dtheta[offset + wlen + oc] + db;
                for ic in 0..*in_c {
                    let iplane = &x[ic * ih * iw..(ic + 1) * ih * iw];
                    let dxplane = &mut dx[ic * ih * iw..(ic + 1) * ih * iw];
                    for ky in 0..*k {
                        let y_off = ky as isize - *pad as isize;
                        let (oy_lo, oy_hi) = tap_range(ih, y_off, *stride, oh);
                        for kx in 0..*k {
                            let x_off = kx as isize - *pad as isize;
                            let (ox_lo, ox_hi) = tap_range(iw, x_off, *stride, ow);
                            if oy_lo > oy_hi || ox_lo > ox_hi {
                                continue;
                            }
                            let widx = ((oc * in_c + ic) * k + ky) * k + kx;
                            let wv = wts[widx];
                            let mut dw = T::zero();
                            let n = ox_hi - ox_lo + 1;
                            for oy in oy_lo..=oy_hi {
                                let iy = ((oy * stride) as isize + y_off) as usize;
                                let irow = iy * iw;
                                let orow = oy * ow;
                                if *stride == 1 {
                                    let i0 = (irow as isize + ox_lo as isize + x_off) as usize;
                                    let g_row = &dplane[orow + ox_lo..orow + ox_lo + n];
                                    let x_row = &iplane[i0..i0 + n];
                                    let dx_row = &mut dxplane[i0..i0 + n];
                                    for ((&g, &xv), dxv) in
                                        g_row.iter().zip(x_row).zip(dx_row)
                                    {
                                        dw = dw + g * xv;
                                        *dxv = *dxv + g * wv;
                                    }
                                } else {
                                    for ox in ox_lo..=ox_hi {
                                        let ix = ((ox * stride) as isize + x_off) as usize;
                                        let g = dplane[orow + ox];
                                        dw = dw + g * iplane[irow + ix];
                                        dxplane[irow + ix] = dxplane[irow + ix] + g * wv;
                                    }
                                }
                            }
                            dtheta[offset + widx] = dtheta[offset + widx] + dw;
                        }
                    }
                }
            }
            dx
        }
        Node::Dense { input, output } => {
            let x = tape.pop_vals();
            let wts = &theta[offset..offset + output * input];
            let mut dx = vec![T::zero(); *input];
            for o in 0..*output {
                let g = dout[o];
                let row = &wts[o * input..(o + 1) * input];
                let drow = &mut dtheta[offset + o * input..offset + (o + 1) * input];
                for (d, &xv) in drow.iter_mut().zip(&x) {
                    *d = *d + g * xv;
                }
                for (d, &wv) in dx.iter_mut().zip(row) {
                    *d = *d + g * wv;
                }
                let bi = offset + output * input + o;
                dtheta[bi] = dtheta[bi] + g;
            }
            dx
        }
        Node::Relu => {
            let x = tape.pop_vals();
            x.iter()
                .zip(&dout)
                .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                .collect()
        }
        Node::MaxPool2 => {
            let arg = tape.pop_idx();
            let mut dx = vec![T::zero(); din.len()];
            for (o, &src) in arg.iter().enumerate() {
                dx[src as usize] = dx[src as usize] + dout[o];
            }
            dx
        }
        Node::GlobalAvgPool => {
            let plane = din.h * din.w;
            let inv = sc::<T>(1.0 / plane as f64);
            let mut dx = vec![T::zero(); din.len()];
            for c in 0..din.c {
                let g = dout[c] * inv;
                for v in &mut dx[c * plane..(c + 1) * plane] {
                    *v = g;
                }
            }
            dx
        }
        Node::ChannelNorm { channels } => {
            let stats = tape.pop_vals();
            let x = tape.pop_vals();
            let plane = din.h * din.w;
            let inv_n = sc::<T>(1.0 / plane as f64);
            let scale = &theta[offset..offset + channels];
            let mut dx = vec![T::zero(); x.len()];
            for c in 0..*channels {
                let mean = stats[c];
                let inv_std = stats[channels + c];
                let xs = &x[c * plane..(c + 1) * plane];
                let gs = &dout[c * plane..(c + 1) * plane];
                let mut dscale = T::zero();
                let mut dshift = T::zero();
                let mut gmean = T::zero();
                let mut gxhat_mean = T::zero();
                for (&v, &g) in xs.iter().zip(gs) {
                    let xhat = (v - mean) * inv_std;
                    dscale = dscale + g * xhat;
                    dshift = dshift + g;
                    gmean = gmean + g;
                    gxhat_mean = gxhat_mean + g * xhat;
                }
                gmean = gmean * inv_n;
                gxhat_mean = gxhat_mean * inv_n;
                dtheta[offset + c] = dtheta[offset + c] + dscale;
                dtheta[offset + channels + c] = dtheta[offset + channels + c] + dshift;
                let a = scale[c] * inv_std;
                let ds = &mut dx[c * plane..(c + 1) * plane];
                for ((d, &v), &g) in ds.iter_mut().zip(xs).zip(gs) {
                    let xhat = (v - mean) * inv_std;
                    *d = a * (g - gmean - xhat * gxhat_mean);
                }
            }
            dx
        }
        Node::Residual { main, shortcut } => {
            let main_off = offset;
            let short_off = offset + seq_param_len(main);
            // forward pushed: input, main entries, shortcut entries
            let ds = bwd_seq(shortcut, theta, short_off, din, dout.clone(), tape, dtheta);
            let dm = bwd_seq(main, theta, main_off, din, dout, tape, dtheta);
            let _input = tape.pop_vals();
            dm.iter().zip(&ds).map(|(&a, &b)| a + b).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn tiny_net() -> Net {
        Net::new(
            Dims::new(2, 4, 4),
            vec![
                Node::Conv { in_c: 2, out_c: 3, k: 3, stride: 1, pad: 1 },
                Node::Relu,
                Node::MaxPool2,
                Node::Dense { input: 3 * 2 * 2, output: 3 },
            ],
        )
        .unwrap()
    }

    /// Net exercising every node kind, small enough for finite differences.
    fn full_net() -> Net {
        Net::new(
            Dims::new(2, 4, 4),
            vec![
                Node::Conv { in_c: 2, out_c: 3, k: 3, stride: 1, pad: 1 },
                Node::Residual {
                    main: vec![
                        Node::ChannelNorm { channels: 3 },
                        Node::Relu,
                        Node::Conv { in_c: 3, out_c: 3, k: 3, stride: 1, pad: 1 },
                    ],
                    shortcut: vec![],
                },
                Node::Residual {
                    main: vec![
                        Node::ChannelNorm { channels: 3 },
                        Node::Relu,
                        Node::Conv { in_c: 3, out_c: 4, k: 3, stride: 2, pad: 1 },
                    ],
                    shortcut: vec![Node::Conv { in_c: 3, out_c: 4, k: 1, stride: 2, pad: 0 }],
                },
                Node::MaxPool2,
                Node::GlobalAvgPool,
                Node::Dense { input: 4, output: 3 },
            ],
        )
        .unwrap()
    }

    fn loss_at<T: Scalar>(net: &Net, theta: &[T], x: &[T], target: usize) -> T {
        let mut tape = Tape::disabled();
        let logits = net.forward(theta, x, &mut tape);
        // softmax cross-entropy against a hard target
        let mx = logits.iter().cloned().fold(T::neg_infinity(), T::max);
        let z: T = logits.iter().map(|&l| (l - mx).exp()).sum();
        -(logits[target] - mx - z.ln())
    }

    fn analytic_grad(net: &Net, theta: &[f64], x: &[f64], target: usize) -> Vec<f64> {
        let mut tape = Tape::recording();
        let logits = net.forward(theta, x, &mut tape);
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|&l| (l - mx).exp()).sum();
        let p: Vec<f64> = logits.iter().map(|&l| (l - mx).exp() / z).collect();
        let dlogits: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(i, &pi)| pi - f64::from(i == target))
            .collect();
        let mut grad = vec![0.0; net.param_count()];
        net.backward(theta, dlogits, &mut tape, &mut grad);
        grad
    }

    fn check_gradients(net: &Net) {
        assert!(net.param_count() <= 1000, "keep finite differences cheap");
        let mut rng = stream(11, "gradcheck").rng(&[0]);
        let theta: Vec<f64> = net.init(&mut rng);
        let x: Vec<f64> = (0..net.input.len())
            .map(|i| ((i * 37 % 17) as f64) / 17.0 - 0.3)
            .collect();
        let target = 1usize;
        let analytic = analytic_grad(net, &theta, &x, target);
        let eps = 1e-6;
        let mut worst = 0.0f64;
        for i in 0..theta.len() {
            let mut tp = theta.clone();
            tp[i] += eps;
            let up = loss_at(net, &tp, &x, target);
            tp[i] = theta[i] - eps;
            let dn = loss_at(net, &tp, &x, target);
            let fd = (up - dn) / (2.0 * eps);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-6);
            worst = worst.max((analytic[i] - fd).abs() / denom);
        }
        assert!(worst <= 1e-4, "max relative gradient error {worst}");
    }

    #[test]
    fn gradients_match_finite_differences_tiny() {
        check_gradients(&tiny_net());
    }

    #[test]
    fn gradients_match_finite_differences_all_node_kinds() {
        check_gradients(&full_net());
    }

    #[test]
    fn layout_is_contiguous_and_complete() {
        let net = full_net();
        let layout = net.param_layout();
        let mut expect = 0usize;
        for e in &layout {
            assert_eq!(e.offset, expect, "{}", e.name);
            expect += e.len;
        }
        assert_eq!(expect, net.param_count());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let net = tiny_net();
        let a: Vec<f32> = net.init(&mut stream(5, "init").rng(&[0]));
        let b: Vec<f32> = net.init(&mut stream(5, "init").rng(&[0]));
        let c: Vec<f32> = net.init(&mut stream(6, "init").rng(&[0]));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn fresh_model_logits_are_zero() {
        let net = tiny_net();
        let theta: Vec<f64> = net.init(&mut stream(7, "init").rng(&[0]));
        let x: Vec<f64> = (0..net.input.len()).map(|i| (i as f64).sin()).collect();
        let out = net.forward(&theta, &x, &mut Tape::disabled());
        assert!(out.iter().all(|&v| v == 0.0), "{out:?}");
    }

    #[test]
    fn maxpool_ties_take_first_in_scan_order() {
        let net = Net::new(Dims::new(1, 2, 2), vec![Node::MaxPool2]).unwrap();
        let mut tape = Tape::recording();
        let out = net.forward(&[], &[1.0f64, 1.0, 1.0, 1.0], &mut tape);
        assert_eq!(out, vec![1.0]);
        let mut grad: Vec<f64> = vec![];
        // all ties: gradient must flow to index 0 only
        let dx_expected = vec![1.0, 0.0, 0.0, 0.0];
        let dx = super::bwd_seq(
            &net.nodes,
            &[],
            0,
            net.input,
            vec![1.0],
            &mut tape,
            &mut grad,
        );
        assert_eq!(dx, dx_expected);
    }

    #[test]
    fn mismatched_dims_rejected_at_construction() {
        assert!(Net::new(
            Dims::new(3, 8, 8),
            vec![Node::Conv { in_c: 2, out_c: 4, k: 3, stride: 1, pad: 1 }],
        )
        .is_err());
        assert!(Net::new(
            Dims::new(3, 8, 8),
            vec![Node::Dense { input: 100, output: 4 }],
        )
        .is_err());
        assert!(Net::new(
            Dims::new(3, 8, 8),
            vec![Node::Residual {
                main: vec![Node::Conv { in_c: 3, out_c: 4, k: 3, stride: 1, pad: 1 }],
                shortcut: vec![],
            }],
        )
        .is_err());
    }
}
