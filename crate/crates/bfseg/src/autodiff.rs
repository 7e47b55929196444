//! Reverse-mode differentiation over f64 tensor grids.
//!
//! A [`Tape`] records a DAG of tensor operations, evaluating each node
//! eagerly. [`Tape::backward`] propagates cotangents seeded at any set of
//! nodes back to the leaves, which is how loss layers inject their analytic
//! gradients without the tape knowing anything about losses.
//!
//! The op set is exactly what the segmentation network needs: 2-D
//! convolution (im2col + matrix multiply), bilinear upsampling with
//! half-pixel centers, pointwise activations, addition, and channel
//! concatenation. Everything is f64 and bitwise deterministic: fixed loop
//! orders, no threading.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView1, ArrayView3, ArrayView4, Ix1, Ix3, Ix4};
use serde::{Deserialize, Serialize};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Pointwise nonlinearity applied to decoder/encoder features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// x * sigmoid(x); smooth, fixes 0, the default.
    Silu,
    /// Pass-through, used to probe linearity of the decoder.
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Silu => x * sigmoid(x),
            Activation::Identity => x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Identity => 1.0,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Activate {
        input: Var,
        kind: Activation,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    ConcatChannels {
        parts: Vec<Var>,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Recorded computation; values are available immediately after each call.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn leaf3(&mut self, value: Array3<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn value3(&self, v: Var) -> ArrayView3<'_, f64> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("node is not a 3-d tensor")
    }

    /// `input` is [C_in, H, W]; `weight` [C_out, C_in, kh, kw]; `bias` [C_out].
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let out = {
            let x = self.value3(input);
            let w = self.nodes[weight.0]
                .value
                .view()
                .into_dimensionality::<Ix4>()
                .expect("conv weight is not 4-d");
            let b = self.nodes[bias.0]
                .value
                .view()
                .into_dimensionality::<Ix1>()
                .expect("conv bias is not 1-d");
            conv2d_forward(&x, &w, &b, stride, pad)
        };
        self.push(
            out.into_dyn(),
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
        )
    }

    /// Bilinear upsampling by an integer factor, half-pixel centers, edges clamped.
    pub fn upsample(&mut self, input: Var, factor: usize) -> Var {
        let out = upsample_forward(&self.value3(input), factor);
        self.push(out.into_dyn(), Op::Upsample { input, factor })
    }

    pub fn activate(&mut self, input: Var, kind: Activation) -> Var {
        let out = self.nodes[input.0].value.mapv(|x| kind.apply(x));
        self.push(out, Op::Activate { input, kind })
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Var {
        assert_eq!(
            self.nodes[lhs.0].value.shape(),
            self.nodes[rhs.0].value.shape(),
            "add operands must have identical shapes"
        );
        let out = &self.nodes[lhs.0].value + &self.nodes[rhs.0].value;
        self.push(out, Op::Add { lhs, rhs })
    }

    /// Concatenates [C_i, H, W] tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<ArrayView3<'_, f64>> = parts.iter().map(|&p| self.value3(p)).collect();
        let (_, h, w) = views[0].dim();
        let total: usize = views.iter().map(|v| v.dim().0).sum();
        let mut out = Array3::zeros((total, h, w));
        let mut offset = 0;
        for v in &views {
            let c = v.dim().0;
            assert_eq!((v.dim().1, v.dim().2), (h, w), "spatial sizes must match");
            out.slice_mut(ndarray::s![offset..offset + c, .., ..])
                .assign(v);
            offset += c;
        }
        self.push(
            out.into_dyn(),
            Op::ConcatChannels {
                parts: parts.to_vec(),
            },
        )
    }

    /// Propagates the seeded cotangents down to every reachable node.
    ///
    /// Each seed must match its node's shape. Seeds at the same node add up.
    pub fn backward(&self, seeds: Vec<(Var, ArrayD<f64>)>) -> Gradients {
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut highest = 0;
        for (v, seed) in seeds {
            assert_eq!(
                seed.shape(),
                self.nodes[v.0].value.shape(),
                "seed shape must match node shape"
            );
            accumulate(&mut grads[v.0], seed);
            highest = highest.max(v.0);
        }
        for id in (0..=highest).rev() {
            if grads[id].is_none() {
                continue;
            }
            // Parents always precede their consumers on the tape.
            let (before, rest) = grads.split_at_mut(id);
            let g = rest[0].as_ref().expect("checked above");
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let x = self.value3(*input);
                    let w = self.nodes[weight.0]
                        .value
                        .view()
                        .into_dimensionality::<Ix4>()
                        .expect("conv weight is not 4-d");
                    let gout = g
                        .view()
                        .into_dimensionality::<Ix3>()
                        .expect("conv output grad is not 3-d");
                    let (dx, dw, db) = conv2d_backward(&x, &w, &gout, *stride, *pad);
                    accumulate(&mut before[input.0], dx.into_dyn());
                    accumulate(&mut before[weight.0], dw.into_dyn());
                    accumulate(&mut before[bias.0], db.into_dyn());
                }
                Op::Upsample { input, factor } => {
                    let gout = g
                        .view()
                        .into_dimensionality::<Ix3>()
                        .expect("upsample output grad is not 3-d");
                    let dx = upsample_backward(&gout, self.value3(*input).dim(), *factor);
                    accumulate(&mut before[input.0], dx.into_dyn());
                }
                Op::Activate { input, kind } => {
                    let x = &self.nodes[input.0].value;
                    let mut dx = g.clone();
                    dx.zip_mut_with(x, |gi, &xi| *gi *= kind.derivative(xi));
                    accumulate(&mut before[input.0], dx);
                }
                Op::Add { lhs, rhs } => {
                    accumulate(&mut before[lhs.0], g.clone());
                    accumulate(&mut before[rhs.0], g.clone());
                }
                Op::ConcatChannels { parts } => {
                    let gout = g
                        .view()
                        .into_dimensionality::<Ix3>()
                        .expect("concat output grad is not 3-d");
                    let mut offset = 0;
                    for part in parts {
                        let c = self.nodes[part.0].value.shape()[0];
                        let piece = gout
                            .slice(ndarray::s![offset..offset + c, .., ..])
                            .to_owned();
                        accumulate(&mut before[part.0], piece.into_dyn());
                        offset += c;
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(slot: &mut Option<ArrayD<f64>>, contribution: ArrayD<f64>) {
    match slot {
        Some(acc) => *acc += &contribution,
        None => *slot = Some(contribution),
    }
}

/// Cotangents produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// None when no gradient reached the node.
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        self.grads[v.0].take()
    }
}

fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

fn im2col(
    x: &ArrayView3<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (cin, h, w) = x.dim();
    let mut cols = Array2::zeros((cin * kh * kw, ho * wo));
    for c in 0..cin {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (c * kh + dy) * kw + dx;
                for oy in 0..ho {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[(row, oy * wo + ox)] = x[(c, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &Array2<f64>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array3<f64> {
    let mut out = Array3::zeros((cin, h, w));
    for c in 0..cin {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (c * kh + dy) * kw + dx;
                for oy in 0..ho {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[(c, iy as usize, ix as usize)] += cols[(row, oy * wo + ox)];
                    }
                }
            }
        }
    }
    out
}

fn conv2d_forward(
    x: &ArrayView3<'_, f64>,
    w: &ArrayView4<'_, f64>,
    b: &ArrayView1<'_, f64>,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (cin, h, width) = x.dim();
    let (cout, cin2, kh, kw) = w.dim();
    assert_eq!(cin, cin2, "conv input channels do not match weight");
    assert_eq!(b.len(), cout);
    let ho = conv_out_len(h, kh, stride, pad);
    let wo = conv_out_len(width, kw, stride, pad);
    let k = cin * kh * kw;
    let cols = im2col(x, kh, kw, stride, pad, ho, wo);
    let wmat = w.to_shape((cout, k)).expect("weight is contiguous");
    let mut out = Array2::zeros((cout, ho * wo));
    general_mat_mul(1.0, &wmat, &cols, 0.0, &mut out);
    for (c, mut row) in out.outer_iter_mut().enumerate() {
        row += b[c];
    }
    out.into_shape_with_order((cout, ho, wo))
        .expect("conv output reshape")
}

fn conv2d_backward(
    x: &ArrayView3<'_, f64>,
    w: &ArrayView4<'_, f64>,
    gout: &ArrayView3<'_, f64>,
    stride: usize,
    pad: usize,
) -> (Array3<f64>, Array4Owned, Array1<f64>) {
    let (cin, h, width) = x.dim();
    let (cout, _, kh, kw) = w.dim();
    let (gcout, ho, wo) = gout.dim();
    assert_eq!(gcout, cout);
    let k = cin * kh * kw;
    let n = ho * wo;
    let cols = im2col(x, kh, kw, stride, pad, ho, wo);
    let gmat = gout.to_shape((cout, n)).expect("grad is contiguous");

    let db = gmat.sum_axis(ndarray::Axis(1));

    let mut dw_mat = Array2::zeros((cout, k));
    general_mat_mul(1.0, &gmat, &cols.t(), 0.0, &mut dw_mat);
    let dw = dw_mat
        .into_shape_with_order((cout, cin, kh, kw))
        .expect("weight grad reshape");

    let wmat = w.to_shape((cout, k)).expect("weight is contiguous");
    let mut dcols = Array2::zeros((k, n));
    general_mat_mul(1.0, &wmat.t(), &gmat, 0.0, &mut dcols);
    let dx = col2im(&dcols, cin, h, width, kh, kw, stride, pad, ho, wo);

    (dx, dw, db)
}

type Array4Owned = ndarray::Array4<f64>;

#[derive(Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

/// Source taps for 1-D bilinear interpolation with half-pixel centers.
fn lerp_table(n_in: usize, factor: usize) -> Vec<Tap> {
    (0..n_in * factor)
        .map(|j| {
            let s = (j as f64 + 0.5) / factor as f64 - 0.5;
            let base = s.floor();
            let frac = s - base;
            let i0 = (base as isize).clamp(0, n_in as isize - 1) as usize;
            let i1 = (base as isize + 1).clamp(0, n_in as isize - 1) as usize;
            Tap {
                i0,
                i1,
                w0: 1.0 - frac,
                w1: frac,
            }
        })
        .collect()
}

fn upsample_forward(x: &ArrayView3<'_, f64>, factor: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let ty = lerp_table(h, factor);
    let tx = lerp_table(w, factor);
    let mut out = Array3::zeros((c, h * factor, w * factor));
    for ch in 0..c {
        for (oy, rowtap) in ty.iter().enumerate() {
            for (ox, coltap) in tx.iter().enumerate() {
                let top = coltap.w0 * x[(ch, rowtap.i0, coltap.i0)]
                    + coltap.w1 * x[(ch, rowtap.i0, coltap.i1)];
                let bottom = coltap.w0 * x[(ch, rowtap.i1, coltap.i0)]
                    + coltap.w1 * x[(ch, rowtap.i1, coltap.i1)];
                out[(ch, oy, ox)] = rowtap.w0 * top + rowtap.w1 * bottom;
            }
        }
    }
    out
}

fn upsample_backward(
    gout: &ArrayView3<'_, f64>,
    in_dim: (usize, usize, usize),
    factor: usize,
) -> Array3<f64> {
    let (c, h, w) = in_dim;
    let ty = lerp_table(h, factor);
    let tx = lerp_table(w, factor);
    let mut dx = Array3::zeros((c, h, w));
    for ch in 0..c {
        for (oy, rowtap) in ty.iter().enumerate() {
            for (ox, coltap) in tx.iter().enumerate() {
                let g = gout[(ch, oy, ox)];
                dx[(ch, rowtap.i0, coltap.i0)] += g * rowtap.w0 * coltap.w0;
                dx[(ch, rowtap.i0, coltap.i1)] += g * rowtap.w0 * coltap.w1;
                dx[(ch, rowtap.i1, coltap.i0)] += g * rowtap.w1 * coltap.w0;
                dx[(ch, rowtap.i1, coltap.i1)] += g * rowtap.w1 * coltap.w1;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Scalar head for gradient checks: sum(coef * output).
    fn dotted<F>(build: F, coef: &ArrayD<f64>) -> (f64, Vec<ArrayD<f64>>)
    where
        F: Fn(&mut Tape) -> (Vec<Var>, Var),
    {
        let mut tape = Tape::new();
        let (leaves, out) = build(&mut tape);
        let value = (tape.value(out) * coef).sum();
        let mut grads = tape.backward(vec![(out, coef.clone())]);
        let leaf_grads = leaves
            .iter()
            .map(|&v| grads.take(v).expect("leaf gradient"))
            .collect();
        (value, leaf_grads)
    }

    /// Central finite differences of the dotted head w.r.t. every leaf element.
    fn check_against_fd<F>(inputs: &[ArrayD<f64>], coef: &ArrayD<f64>, build: F, tol: f64)
    where
        F: Fn(&mut Tape, &[ArrayD<f64>]) -> (Vec<Var>, Var),
    {
        let wrap = |vals: &[ArrayD<f64>]| {
            let vals = vals.to_vec();
            dotted(|tape| build(tape, &vals), coef)
        };
        let (_, analytic) = wrap(inputs);
        let h = 1e-6;
        for (which, input) in inputs.iter().enumerate() {
            for idx in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[which].as_slice_mut().unwrap()[idx] += h;
                let mut minus = inputs.to_vec();
                minus[which].as_slice_mut().unwrap()[idx] -= h;
                let fd = (wrap(&plus).0 - wrap(&minus).0) / (2.0 * h);
                let an = analytic[which].as_slice().unwrap()[idx];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((fd - an) / denom).abs() < tol,
                    "input {which} elem {idx}: fd={fd} analytic={an}"
                );
            }
        }
    }

    #[test]
    fn conv_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(stride, pad, kh) in &[(1usize, 1usize, 3usize), (2, 1, 3), (1, 0, 1)] {
            let x = random_array(&mut rng, &[2, 6, 6]);
            let w = random_array(&mut rng, &[3, 2, kh, kh]);
            let b = random_array(&mut rng, &[3]);
            let ho = conv_out_len(6, kh, stride, pad);
            let coef = random_array(&mut rng, &[3, ho, ho]);
            check_against_fd(
                &[x, w, b],
                &coef,
                |tape, vals| {
                    let xi = tape.leaf(vals[0].clone());
                    let wi = tape.leaf(vals[1].clone());
                    let bi = tape.leaf(vals[2].clone());
                    let out = tape.conv2d(xi, wi, bi, stride, pad);
                    (vec![xi, wi, bi], out)
                },
                1e-7,
            );
        }
    }

    #[test]
    fn upsample_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for factor in [2usize, 4, 8] {
            let x = random_array(&mut rng, &[2, 3, 4]);
            let coef = random_array(&mut rng, &[2, 3 * factor, 4 * factor]);
            check_against_fd(
                &[x],
                &coef,
                |tape, vals| {
                    let xi = tape.leaf(vals[0].clone());
                    let out = tape.upsample(xi, factor);
                    (vec![xi], out)
                },
                1e-7,
            );
        }
    }

    #[test]
    fn activation_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for kind in [Activation::Silu, Activation::Relu, Activation::Identity] {
            // Keep relu inputs away from the kink.
            let x = random_array(&mut rng, &[1, 4, 4]).mapv(|v| {
                if v.abs() < 0.05 {
                    v + 0.1
                } else {
                    v
                }
            });
            let coef = random_array(&mut rng, &[1, 4, 4]);
            check_against_fd(
                &[x],
                &coef,
                |tape, vals| {
                    let xi = tape.leaf(vals[0].clone());
                    let out = tape.activate(xi, kind);
                    (vec![xi], out)
                },
                1e-6,
            );
        }
    }

    #[test]
    fn add_and_concat_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = random_array(&mut rng, &[2, 3, 3]);
        let b = random_array(&mut rng, &[2, 3, 3]);
        let c = random_array(&mut rng, &[1, 3, 3]);
        let coef = random_array(&mut rng, &[5, 3, 3]);
        check_against_fd(
            &[a, b, c],
            &coef,
            |tape, vals| {
                let ai = tape.leaf(vals[0].clone());
                let bi = tape.leaf(vals[1].clone());
                let ci = tape.leaf(vals[2].clone());
                let sum = tape.add(ai, bi);
                let out = tape.concat_channels(&[sum, ai, ci]);
                (vec![ai, bi, ci], out)
            },
            1e-8,
        );
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x + x; dy/dx = 2 everywhere.
        let mut tape = Tape::new();
        let x = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 2, 2]), 3.0));
        let y = tape.add(x, x);
        let seed = ArrayD::from_elem(IxDyn(&[1, 2, 2]), 1.0);
        let grads = tape.backward(vec![(y, seed)]);
        assert!(grads.get(x).unwrap().iter().all(|&g| g == 2.0));
    }

    #[test]
    fn upsample_is_exact_on_constants() {
        // Interpolating a constant grid reproduces the constant at every tap.
        let x = Array3::from_elem((1, 3, 5), 0.625);
        let out = upsample_forward(&x.view(), 4);
        assert!(out.iter().all(|&v| v == 0.625));
    }

    #[test]
    fn conv_identity_weights_pass_through() {
        let mut tape = Tape::new();
        let x = tape.leaf3(Array3::from_shape_fn((3, 4, 4), |(c, y, x)| {
            (c * 16 + y * 4 + x) as f64
        }));
        let mut w = ndarray::Array4::zeros((3, 3, 1, 1));
        for c in 0..3 {
            w[(c, c, 0, 0)] = 1.0;
        }
        let wv = tape.leaf(w.into_dyn());
        let bv = tape.leaf(Array1::zeros(3).into_dyn());
        let y = tape.conv2d(x, wv, bv, 1, 0);
        assert_eq!(tape.value(y), tape.value(x));
    }
}
