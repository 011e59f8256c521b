//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! The op set is intentionally small: exactly the layers the separation
//! network needs (strided 2-d convolution, batch normalization, leaky ReLU,
//! nearest-neighbour 2x upsampling, channel concatenation, the mean-L1
//! loss) plus a few glue ops for loss combination and tests. Tensors are
//! row-major, values and gradients are `f64`, and the graph is a plain
//! backward tape over reference-counted nodes. Single-threaded by design;
//! identical inputs produce bit-identical outputs and gradients.

mod init;
mod kernels;
mod optim;

pub mod gradcheck;

pub use init::kaiming_uniform;
pub use optim::{adam_step, sgd_step, zero_grad, AdamState, Optimizer, SgdState};

use crate::error::{Error, Result};
use kernels::{ConvDims, ConvGrads};
use std::cell::{Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

/// Forward-pass mode for layers whose behaviour differs between training
/// and inference (batch normalization).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A shared handle to one node of the computation graph.
///
/// Cloning is cheap (reference count); all handles see the same data and
/// gradient. Leaf tensors created with [`Tensor::with_grad`] accumulate
/// gradients across [`backward`] calls until [`Tensor::zero_grad`].
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    needs_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Conv2d {
        input: Tensor,
        weight: Tensor,
        bias: Tensor,
        dims: ConvDims,
    },
    BatchNormTrain {
        input: Tensor,
        gamma: Tensor,
        beta: Tensor,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        input: Tensor,
        gamma: Tensor,
        beta: Tensor,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LeakyRelu {
        input: Tensor,
        alpha: f64,
    },
    Upsample2x {
        input: Tensor,
    },
    ConcatChannels {
        a: Tensor,
        b: Tensor,
    },
    L1Loss {
        pred: Tensor,
        target: Tensor,
    },
    Sum {
        input: Tensor,
    },
    Add {
        a: Tensor,
        b: Tensor,
    },
    Scale {
        input: Tensor,
        factor: f64,
    },
}

impl Op {
    fn parents(&self) -> Vec<Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => vec![input.clone(), weight.clone(), bias.clone()],
            Op::BatchNormTrain {
                input, gamma, beta, ..
            }
            | Op::BatchNormEval {
                input, gamma, beta, ..
            } => vec![input.clone(), gamma.clone(), beta.clone()],
            Op::LeakyRelu { input, .. }
            | Op::Upsample2x { input }
            | Op::Sum { input }
            | Op::Scale { input, .. } => vec![input.clone()],
            Op::ConcatChannels { a, b } | Op::Add { a, b } => vec![a.clone(), b.clone()],
            Op::L1Loss { pred, target } => vec![pred.clone(), target.clone()],
        }
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn new(shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Tensor {
        let needs_grad = requires_grad || op.parents().iter().any(|p| p.needs_grad());
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape,
                data,
                grad: None,
                requires_grad,
                needs_grad,
                op,
            })),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if numel_of(shape) != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Tensor::new(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(shape.to_vec(), vec![0.0; numel_of(shape)], Op::Leaf, false)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::new(shape.to_vec(), vec![value; numel_of(shape)], Op::Leaf, false)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::full(&[1], value)
    }

    /// Mark this leaf as a trainable parameter and return it.
    pub fn with_grad(self) -> Tensor {
        {
            let mut inner = self.inner.borrow_mut();
            inner.requires_grad = true;
            inner.needs_grad = true;
        }
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn needs_grad(&self) -> bool {
        self.inner.borrow().needs_grad
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    /// Borrow the raw values (row-major).
    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// The single value of a one-element tensor. Panics otherwise.
    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() on non-scalar tensor");
        inner.data[0]
    }

    /// Replace the values in place; the shape must not change.
    pub fn set_data(&self, data: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.data.len(), data.len(), "set_data length mismatch");
        inner.data.copy_from_slice(data);
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Run one in-place parameter update given the stored gradient.
    pub(crate) fn apply_step(&self, f: impl FnOnce(&mut [f64], &[f64])) -> Result<()> {
        let mut borrow = self.inner.borrow_mut();
        let inner = &mut *borrow;
        match inner.grad.as_ref() {
            Some(g) => {
                f(&mut inner.data, g);
                Ok(())
            }
            None => Err(Error::MissingGradient(format!("{:?}", inner.shape))),
        }
    }

    fn ptr(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    fn accumulate_into_grad(&self, delta: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        let n = inner.data.len();
        let grad = inner.grad.get_or_insert_with(|| vec![0.0; n]);
        for (g, d) in grad.iter_mut().zip(delta.iter()) {
            *g += d;
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

fn expect_rank4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::InvalidInput(format!(
            "{what} must be rank 4, got shape {s:?}"
        )));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// Parameters of one convolution layer (cross-correlation semantics).
///
/// Kernel sizes follow the (time, frequency) axis order of the activations,
/// i.e. `weight` is (out_ch, in_ch, k_h, k_w) applied over (frames, bins).
pub struct Conv2dParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2dParams {
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        conv2d(input, &self.weight, &self.bias, self.stride, self.padding)
    }
}

/// Batch-norm parameters plus running statistics.
///
/// `gamma`/`beta` are trainable; the running mean and (population) variance
/// are updated by an exponential moving average on every training-mode
/// forward and consumed in eval mode.
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: RefCell<Vec<f64>>,
    pub running_var: RefCell<Vec<f64>>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormParams {
    pub fn new(channels: usize) -> BatchNormParams {
        BatchNormParams {
            gamma: Tensor::full(&[channels], 1.0).with_grad(),
            beta: Tensor::zeros(&[channels]).with_grad(),
            running_mean: RefCell::new(vec![0.0; channels]),
            running_var: RefCell::new(vec![1.0; channels]),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }
}

/// Strided 2-d cross-correlation with zero padding.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor> {
    let [n, cin, h, w] = expect_rank4(input, "conv2d input")?;
    let [cout, wcin, kh, kw] = expect_rank4(weight, "conv2d weight")?;
    if wcin != cin {
        return Err(Error::ChannelCount {
            expected: wcin,
            got: cin,
        });
    }
    if bias.shape() != vec![cout] {
        return Err(Error::ShapeMismatch(format!(
            "conv2d bias shape {:?} does not match {} output channels",
            bias.shape(),
            cout
        )));
    }
    let oh = kernels::conv_out_dim(h, kh, stride.0, padding.0).ok_or_else(|| {
        Error::InvalidInput(format!(
            "conv2d: padded height {} smaller than kernel {}",
            h + 2 * padding.0,
            kh
        ))
    })?;
    let ow = kernels::conv_out_dim(w, kw, stride.1, padding.1).ok_or_else(|| {
        Error::InvalidInput(format!(
            "conv2d: padded width {} smaller than kernel {}",
            w + 2 * padding.1,
            kw
        ))
    })?;
    let dims = ConvDims {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        sh: stride.0,
        sw: stride.1,
        ph: padding.0,
        pw: padding.1,
        oh,
        ow,
    };
    let out = kernels::conv2d_forward(&input.data(), &weight.data(), &bias.data(), &dims);
    Ok(Tensor::new(
        vec![n, cout, oh, ow],
        out,
        Op::Conv2d {
            input: input.clone(),
            weight: weight.clone(),
            bias: bias.clone(),
            dims,
        },
        false,
    ))
}

/// Batch normalization over (N, H, W) per channel.
///
/// Training mode normalizes with batch statistics and updates the running
/// stats; eval mode applies the running stats as a fixed affine map.
pub fn batch_norm(input: &Tensor, params: &BatchNormParams, mode: Mode) -> Result<Tensor> {
    let [n, c, h, w] = expect_rank4(input, "batch_norm input")?;
    if c != params.channels() {
        return Err(Error::ChannelCount {
            expected: params.channels(),
            got: c,
        });
    }
    let spatial = h * w;
    match mode {
        Mode::Train => {
            if n * spatial < 2 {
                return Err(Error::InvalidInput(
                    "batch_norm train mode needs at least 2 values per channel".into(),
                ));
            }
            let fwd = kernels::bn_train_forward(
                &input.data(),
                n,
                c,
                spatial,
                &params.gamma.data(),
                &params.beta.data(),
                params.eps,
            );
            {
                let mut rm = params.running_mean.borrow_mut();
                let mut rv = params.running_var.borrow_mut();
                let mom = params.momentum;
                for ch in 0..c {
                    rm[ch] = (1.0 - mom) * rm[ch] + mom * fwd.mean[ch];
                    rv[ch] = (1.0 - mom) * rv[ch] + mom * fwd.var[ch];
                }
            }
            Ok(Tensor::new(
                vec![n, c, h, w],
                fwd.y,
                Op::BatchNormTrain {
                    input: input.clone(),
                    gamma: params.gamma.clone(),
                    beta: params.beta.clone(),
                    x_hat: fwd.x_hat,
                    inv_std: fwd.inv_std,
                },
                false,
            ))
        }
        Mode::Eval => {
            let rm = params.running_mean.borrow().clone();
            let rv = params.running_var.borrow();
            let (y, inv_std) = kernels::bn_eval_forward(
                &input.data(),
                n,
                c,
                spatial,
                &params.gamma.data(),
                &params.beta.data(),
                &rm,
                &rv,
                params.eps,
            );
            Ok(Tensor::new(
                vec![n, c, h, w],
                y,
                Op::BatchNormEval {
                    input: input.clone(),
                    gamma: params.gamma.clone(),
                    beta: params.beta.clone(),
                    mean: rm,
                    inv_std,
                },
                false,
            ))
        }
    }
}

/// max(x, alpha*x); the subgradient at 0 is the negative-side slope.
pub fn leaky_relu(input: &Tensor, alpha: f64) -> Tensor {
    let data: Vec<f64> = input
        .data()
        .iter()
        .map(|&x| if x > 0.0 { x } else { alpha * x })
        .collect();
    Tensor::new(
        input.shape(),
        data,
        Op::LeakyRelu {
            input: input.clone(),
            alpha,
        },
        false,
    )
}

/// max(x, 0); the subgradient at 0 is 0.
pub fn relu(input: &Tensor) -> Tensor {
    leaky_relu(input, 0.0)
}

/// Nearest-neighbour upsampling by 2 in both spatial axes.
pub fn nn_upsample2x(input: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = expect_rank4(input, "nn_upsample2x input")?;
    let src = input.data();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * oh * ow];
    for nc in 0..n * c {
        let sbase = nc * h * w;
        let obase = nc * oh * ow;
        for y in 0..oh {
            let srow = sbase + (y / 2) * w;
            let orow = obase + y * ow;
            for x in 0..ow {
                out[orow + x] = src[srow + x / 2];
            }
        }
    }
    drop(src);
    Ok(Tensor::new(
        vec![n, c, oh, ow],
        out,
        Op::Upsample2x {
            input: input.clone(),
        },
        false,
    ))
}

/// Concatenate along the channel axis; `a` occupies the first channels.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [na, ca, ha, wa] = expect_rank4(a, "concat_channels lhs")?;
    let [nb, cb, hb, wb] = expect_rank4(b, "concat_channels rhs")?;
    if na != nb || ha != hb || wa != wb {
        return Err(Error::InvalidInput(format!(
            "concat_channels spatial mismatch: ({na},{ha},{wa}) vs ({nb},{hb},{wb})"
        )));
    }
    let (da, db) = (a.data(), b.data());
    let block_a = ca * ha * wa;
    let block_b = cb * hb * wb;
    let mut out = vec![0.0; na * (block_a + block_b)];
    for s in 0..na {
        let dst = &mut out[s * (block_a + block_b)..(s + 1) * (block_a + block_b)];
        dst[..block_a].copy_from_slice(&da[s * block_a..(s + 1) * block_a]);
        dst[block_a..].copy_from_slice(&db[s * block_b..(s + 1) * block_b]);
    }
    drop(da);
    drop(db);
    Ok(Tensor::new(
        vec![na, ca + cb, ha, wa],
        out,
        Op::ConcatChannels {
            a: a.clone(),
            b: b.clone(),
        },
        false,
    ))
}

/// Mean absolute difference over all elements, as a scalar tensor.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "l1_loss: pred {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let (p, t) = (pred.data(), target.data());
    let n = p.len() as f64;
    let sum: f64 = p.iter().zip(t.iter()).map(|(a, b)| (a - b).abs()).sum();
    drop(p);
    drop(t);
    Ok(Tensor::new(
        vec![1],
        vec![sum / n],
        Op::L1Loss {
            pred: pred.clone(),
            target: target.clone(),
        },
        false,
    ))
}

/// Sum of all elements, as a scalar tensor.
pub fn sum_all(input: &Tensor) -> Tensor {
    let s: f64 = input.data().iter().sum();
    Tensor::new(
        vec![1],
        vec![s],
        Op::Sum {
            input: input.clone(),
        },
        false,
    )
}

/// Elementwise sum of two same-shape tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "add: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| x + y)
        .collect();
    Ok(Tensor::new(
        a.shape(),
        data,
        Op::Add {
            a: a.clone(),
            b: b.clone(),
        },
        false,
    ))
}

/// Multiply every element by a constant.
pub fn scale(input: &Tensor, factor: f64) -> Tensor {
    let data: Vec<f64> = input.data().iter().map(|x| x * factor).collect();
    Tensor::new(
        input.shape(),
        data,
        Op::Scale {
            input: input.clone(),
            factor,
        },
        false,
    )
}

struct GradSink {
    grads: HashMap<usize, Vec<f64>>,
}

impl GradSink {
    fn slot(&mut self, t: &Tensor) -> &mut Vec<f64> {
        let n = t.numel();
        self.grads.entry(t.ptr()).or_insert_with(|| vec![0.0; n])
    }

    fn add_full(&mut self, t: &Tensor, delta: &[f64]) {
        let slot = self.slot(t);
        for (g, d) in slot.iter_mut().zip(delta.iter()) {
            *g += d;
        }
    }

    fn take(&mut self, t: &Tensor) -> Option<Vec<f64>> {
        self.grads.remove(&t.ptr())
    }
}

/// Post-order over the subgraph reachable from `root` (parents first).
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<usize> = HashSet::new();
    visited.insert(root.ptr());
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    while let Some((node, idx)) = stack.pop() {
        let parents = node.inner.borrow().op.parents();
        if idx < parents.len() {
            stack.push((node.clone(), idx + 1));
            let p = parents[idx].clone();
            if p.needs_grad() && visited.insert(p.ptr()) {
                stack.push((p, 0));
            }
        } else {
            order.push(node);
        }
    }
    order
}

/// Reverse-mode differentiation from a scalar loss.
///
/// Accumulates `d loss / d leaf` into the gradient buffer of every reachable
/// leaf with `requires_grad`; repeated calls keep accumulating until the
/// leaves are cleared with [`Tensor::zero_grad`].
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::InvalidInput(format!(
            "backward expects a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    let order = topo_order(loss);
    let mut sink = GradSink {
        grads: HashMap::new(),
    };
    sink.add_full(loss, &[1.0]);
    for node in order.iter().rev() {
        let Some(gout) = sink.take(node) else {
            continue;
        };
        propagate(node, &gout, &mut sink)?;
        if node.requires_grad() {
            node.accumulate_into_grad(&gout);
        }
    }
    Ok(())
}

fn propagate(node: &Tensor, gout: &[f64], sink: &mut GradSink) -> Result<()> {
    let inner = node.inner.borrow();
    match &inner.op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            weight,
            bias,
            dims,
        } => {
            let need_input = input.needs_grad();
            let ConvGrads {
                input: ginput,
                weight: gweight,
                bias: gbias,
            } = kernels::conv2d_backward(&input.data(), &weight.data(), gout, dims, need_input);
            if let Some(gi) = ginput {
                sink.add_full(input, &gi);
            }
            if weight.needs_grad() {
                sink.add_full(weight, &gweight);
            }
            if bias.needs_grad() {
                sink.add_full(bias, &gbias);
            }
        }
        Op::BatchNormTrain {
            input,
            gamma,
            beta,
            x_hat,
            inv_std,
        } => {
            let shape = input.shape();
            let (n, c, spatial) = (shape[0], shape[1], shape[2] * shape[3]);
            let grads =
                kernels::bn_train_backward(gout, x_hat, inv_std, &gamma.data(), n, c, spatial);
            if input.needs_grad() {
                sink.add_full(input, &grads.input);
            }
            if gamma.needs_grad() {
                sink.add_full(gamma, &grads.gamma);
            }
            if beta.needs_grad() {
                sink.add_full(beta, &grads.beta);
            }
        }
        Op::BatchNormEval {
            input,
            gamma,
            beta,
            mean,
            inv_std,
        } => {
            let shape = input.shape();
            let (n, c, spatial) = (shape[0], shape[1], shape[2] * shape[3]);
            let x = input.data();
            let g = gamma.data();
            let mut gx = vec![0.0; x.len()];
            let mut gg = vec![0.0; c];
            let mut gb = vec![0.0; c];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * spatial;
                    let scale = g[ch] * inv_std[ch];
                    for i in base..base + spatial {
                        gx[i] = gout[i] * scale;
                        gg[ch] += gout[i] * (x[i] - mean[ch]) * inv_std[ch];
                        gb[ch] += gout[i];
                    }
                }
            }
            drop(x);
            drop(g);
            if input.needs_grad() {
                sink.add_full(input, &gx);
            }
            if gamma.needs_grad() {
                sink.add_full(gamma, &gg);
            }
            if beta.needs_grad() {
                sink.add_full(beta, &gb);
            }
        }
        Op::LeakyRelu { input, alpha } => {
            if input.needs_grad() {
                let x = input.data();
                let gin: Vec<f64> = gout
                    .iter()
                    .zip(x.iter())
                    .map(|(&g, &v)| if v > 0.0 { g } else { g * alpha })
                    .collect();
                drop(x);
                sink.add_full(input, &gin);
            }
        }
        Op::Upsample2x { input } => {
            if input.needs_grad() {
                let shape = input.shape();
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let (oh, ow) = (2 * h, 2 * w);
                let mut gin = vec![0.0; n * c * h * w];
                for nc in 0..n * c {
                    let obase = nc * oh * ow;
                    let ibase = nc * h * w;
                    for y in 0..oh {
                        let irow = ibase + (y / 2) * w;
                        let orow = obase + y * ow;
                        for x in 0..ow {
                            gin[irow + x / 2] += gout[orow + x];
                        }
                    }
                }
                sink.add_full(input, &gin);
            }
        }
        Op::ConcatChannels { a, b } => {
            let sa = a.shape();
            let sb = b.shape();
            let (n, block_a, block_b) = (sa[0], sa[1] * sa[2] * sa[3], sb[1] * sb[2] * sb[3]);
            if a.needs_grad() {
                let mut ga = vec![0.0; n * block_a];
                for s in 0..n {
                    let src = &gout[s * (block_a + block_b)..s * (block_a + block_b) + block_a];
                    ga[s * block_a..(s + 1) * block_a].copy_from_slice(src);
                }
                sink.add_full(a, &ga);
            }
            if b.needs_grad() {
                let mut gb = vec![0.0; n * block_b];
                for s in 0..n {
                    let src = &gout
                        [s * (block_a + block_b) + block_a..(s + 1) * (block_a + block_b)];
                    gb[s * block_b..(s + 1) * block_b].copy_from_slice(src);
                }
                sink.add_full(b, &gb);
            }
        }
        Op::L1Loss { pred, target } => {
            let g = gout[0];
            let p = pred.data();
            let t = target.data();
            let inv_n = 1.0 / p.len() as f64;
            let sign = |d: f64| {
                if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            };
            if pred.needs_grad() {
                let gp: Vec<f64> = p
                    .iter()
                    .zip(t.iter())
                    .map(|(&a, &b)| g * inv_n * sign(a - b))
                    .collect();
                sink.add_full(pred, &gp);
            }
            if target.needs_grad() {
                let gt: Vec<f64> = p
                    .iter()
                    .zip(t.iter())
                    .map(|(&a, &b)| -g * inv_n * sign(a - b))
                    .collect();
                sink.add_full(target, &gt);
            }
            drop(p);
            drop(t);
        }
        Op::Sum { input } => {
            if input.needs_grad() {
                let gin = vec![gout[0]; input.numel()];
                sink.add_full(input, &gin);
            }
        }
        Op::Add { a, b } => {
            if a.needs_grad() {
                sink.add_full(a, gout);
            }
            if b.needs_grad() {
                sink.add_full(b, gout);
            }
        }
        Op::Scale { input, factor } => {
            if input.needs_grad() {
                let gin: Vec<f64> = gout.iter().map(|g| g * factor).collect();
                sink.add_full(input, &gin);
            }
        }
    }
    Ok(())
}
