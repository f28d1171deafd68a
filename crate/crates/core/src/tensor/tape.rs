use rand::Rng;

use super::conv::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Train/eval switch for batch normalization and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel running statistics carried by a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

pub const BN_EPS: f64 = 1e-5;
/// Weight of the old running value in each update.
pub const BN_MOMENTUM: f64 = 0.9;

enum Op<T> {
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Reshape(Var),
    Relu6(Var),
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Conv {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Matmul(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Softmax {
        input: Var,
        axis: usize,
    },
    SplitHeads {
        input: Var,
        heads: usize,
    },
    MergeHeads {
        input: Var,
        heads: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
    op: Option<Op<T>>,
}

/// Arena of recorded values with a reverse pass over them.
///
/// Nodes are appended in execution order, so index order is a topological
/// order and the reverse pass simply walks indices downwards. Operations
/// whose inputs carry no gradient are evaluated but not recorded.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    kinks: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            kinks: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node, including leaves and their gradients.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.kinks = 0;
    }

    /// Hash of which linear piece every ReLU6 input fell on so far.
    ///
    /// Two evaluations with equal signatures ran through the same
    /// piecewise-linear regime.
    pub fn kink_signature(&self) -> u64 {
        self.kinks
    }

    /// Number of nodes holding a recorded operation.
    pub fn recorded_ops(&self) -> usize {
        self.nodes.iter().filter(|n| n.op.is_some()).count()
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: requires_grad.then_some(op),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y).map_err(|_| {
            Error::shape("add", self.shape(a), self.shape(b))
        })?;
        Ok(self.push(out, &[a, b], Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y).map_err(|_| {
            Error::shape("mul", self.shape(a), self.shape(b))
        })?;
        Ok(self.push(out, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, &[a], Op::Scale(a, s))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, &[a], Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, &[a], Op::Reshape(a)))
    }

    /// `[N,D,H,W,C] → [N, D·H·W, C]`, sequence index `d·H·W + h·W + w`.
    pub fn unfold(&mut self, x: Var) -> Result<Var> {
        let [n, d, h, w, c] = self.value(x).dims5()?;
        self.reshape(x, &[n, d * h * w, c])
    }

    /// Inverse of [`Tape::unfold`].
    pub fn fold(&mut self, x: Var, dims: (usize, usize, usize)) -> Result<Var> {
        let &[n, l, c] = self.shape(x) else {
            return Err(Error::invalid(
                "fold",
                format!("expected [N, L, C], got {:?}", self.shape(x)),
            ));
        };
        let (d, h, w) = dims;
        if d * h * w != l {
            return Err(Error::invalid(
                "fold",
                format!("dims {d}×{h}×{w} do not cover sequence length {l}"),
            ));
        }
        self.reshape(x, &[n, d, h, w, c])
    }

    pub fn relu6(&mut self, x: Var) -> Var {
        let six = T::lit(6.0);
        let xs = self.value(x);
        let mut h = self.kinks;
        for &v in xs.data() {
            let piece = if v <= T::zero() { 1 } else if v >= six { 2 } else { 3 };
            h = (h ^ piece).wrapping_mul(0x0100_0000_01b3);
        }
        let out = xs.map(|v| v.max(T::zero()).min(six));
        self.kinks = h;
        self.push(out, &[x], Op::Relu6(x))
    }

    /// Inverted dropout; identity in eval mode or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout", format!("p = {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let xs = self.value(x);
        let data = xs.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(xs.shape(), data)?;
        Ok(self.push(out, &[x], Op::Dropout { input: x, mask }))
    }

    fn check_conv_operands(
        &self,
        op: &'static str,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        kernel_in_axis: usize,
    ) -> Result<([usize; 5], [usize; 5])> {
        let xd = self.value(x).dims5()?;
        let kd = match self.shape(kernel) {
            &[a, b, c, d, e] if a == b && b == c => [a, b, c, d, e],
            other => {
                return Err(Error::invalid(
                    op,
                    format!("kernel must be k×k×k×I×O, got {other:?}"),
                ))
            }
        };
        if kd[kernel_in_axis] != xd[4] {
            return Err(Error::shape(op, self.shape(x), self.shape(kernel)));
        }
        if let Some(b) = bias {
            let out_c = kd[7 - kernel_in_axis];
            if self.shape(b) != [out_c] {
                return Err(Error::shape(op, self.shape(kernel), self.shape(b)));
            }
        }
        Ok((xd, kd))
    }

    /// Channels-last 3D correlation with kernel `[k,k,k,Cin,Cout]`, `k ∈ {1, 3}`.
    pub fn conv3d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let ([n, d, h, w, cin], [k, _, _, _, cout]) =
            self.check_conv_operands("conv3d", x, kernel, bias, 3)?;
        if k != 1 && k != 3 {
            return Err(Error::invalid("conv3d", format!("kernel size {k} not in {{1, 3}}")));
        }
        let geom = ConvGeom::new(n, [d, h, w], cin, cout, k, stride, padding)?;
        let data = conv::conv_forward(
            self.value(x).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let [od, oh, ow] = geom.output;
        let out = Tensor::new(&[n, od, oh, ow, cout], data)?;
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        Ok(self.push(
            out,
            &inputs,
            Op::Conv {
                input: x,
                kernel,
                bias,
                geom,
            },
        ))
    }

    /// Stride-2 transposed convolution with kernel `[3,3,3,Cout,Cin]`.
    ///
    /// Realised as the adjoint of a stride-2, padding-1 `conv3d` whose
    /// kernel is the same array read as `[3,3,3,Cin',Cout']`; output
    /// padding 1 makes the output extent exactly twice the input's.
    pub fn deconv3d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let ([n, d, h, w, cin], [k, _, _, cout, _]) =
            self.check_conv_operands("deconv3d", x, kernel, bias, 4)?;
        if stride != 2 || k != 3 {
            return Err(Error::invalid(
                "deconv3d",
                format!("only 3³ stride-2 doubling is supported, got k={k}, stride={stride}"),
            ));
        }
        let geom = ConvGeom::new(n, [2 * d, 2 * h, 2 * w], cout, cin, 3, 2, 1)?;
        if geom.output != [d, h, w] {
            return Err(Error::invalid(
                "deconv3d",
                format!("output extent does not double {:?}", [d, h, w]),
            ));
        }
        let data = conv::conv_transpose_forward(
            self.value(x).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let out = Tensor::new(&[n, 2 * d, 2 * h, 2 * w, cout], data)?;
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        Ok(self.push(
            out,
            &inputs,
            Op::ConvTranspose {
                input: x,
                kernel,
                bias,
                geom,
            },
        ))
    }

    /// Per-channel batch normalization over every axis but the last.
    ///
    /// In train mode the batch statistics normalize the input and `stats`
    /// is updated in place; in eval mode `stats` is used as is.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: Mode,
    ) -> Result<Var> {
        let xs = self.value(x);
        let c = *xs.shape().last().unwrap_or(&0);
        for (v, name) in [(gamma, "gamma"), (beta, "beta")] {
            if self.shape(v) != [c] {
                return Err(Error::invalid(
                    "batchnorm",
                    format!("{name} shape {:?} does not match {c} channels", self.shape(v)),
                ));
            }
        }
        if stats.mean.shape() != [c] || stats.var.shape() != [c] {
            return Err(Error::invalid("batchnorm", "running statistics shape mismatch"));
        }
        let m = xs.len() / c.max(1);
        let eps = T::lit(BN_EPS);
        let (mean, var) = if mode == Mode::Train {
            let mut mean = vec![T::zero(); c];
            for row in xs.data().chunks_exact(c) {
                for (a, &v) in mean.iter_mut().zip(row) {
                    *a += v;
                }
            }
            let inv_m = T::one() / T::from_usize_lossy(m);
            mean.iter_mut().for_each(|a| *a *= inv_m);
            let mut var = vec![T::zero(); c];
            for row in xs.data().chunks_exact(c) {
                for ((a, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                    *a += (v - mu) * (v - mu);
                }
            }
            var.iter_mut().for_each(|a| *a *= inv_m);
            (mean, var)
        } else {
            (stats.mean.data().to_vec(), stats.var.data().to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xs.len());
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.data().chunks_exact(c) {
            for j in 0..c {
                let nv = (row[j] - mean[j]) * inv_std[j];
                xhat.push(nv);
                out.push(nv * gs[j] + bs[j]);
            }
        }
        let out = Tensor::new(xs.shape(), out)?;
        if mode == Mode::Train {
            let mom = T::lit(BN_MOMENTUM);
            let one_m = T::one() - mom;
            for j in 0..c {
                let rm = &mut stats.mean.data_mut()[j];
                *rm = mom * *rm + one_m * mean[j];
                let rv = &mut stats.var.data_mut()[j];
                *rv = mom * *rv + one_m * var[j];
            }
        }
        Ok(self.push(
            out,
            &[x, gamma, beta],
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (&[m, k], &[k2, n]) = (self.shape(a), self.shape(b)) else {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        };
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k,
            1,
            self.value(b).data(),
            n,
            1,
            T::zero(),
            &mut out,
            n,
            1,
        );
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push(out, &[a, b], Op::Matmul(a, b)))
    }

    /// Batched product `a[B,m,k] · b[B,k,n]`, or `a · bᵀ` with `b[B,n,k]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (&[ba, m, k], &[bb, r, s]) = (self.shape(a), self.shape(b)) else {
            return Err(Error::shape("bmm", self.shape(a), self.shape(b)));
        };
        let (kb, n) = if trans_b { (s, r) } else { (r, s) };
        if ba != bb || k != kb {
            return Err(Error::shape("bmm", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); ba * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
        for i in 0..ba {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &ad[i * m * k..(i + 1) * m * k],
                k,
                1,
                &bd[i * k * n..(i + 1) * k * n],
                rsb,
                csb,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                n,
                1,
            );
        }
        let out = Tensor::new(&[ba, m, n], out)?;
        Ok(self.push(out, &[a, b], Op::Bmm { a, b, trans_b }))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let out = softmax_values(self.value(x).data(), &shape, axis);
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, &[x], Op::Softmax { input: x, axis }))
    }

    /// `[N, L, C] → [N·heads, L, C/heads]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let &[n, l, c] = self.shape(x) else {
            return Err(Error::invalid("split_heads", "expected [N, L, C]"));
        };
        if heads == 0 || c % heads != 0 {
            return Err(Error::invalid(
                "split_heads",
                format!("{c} channels not divisible by {heads} heads"),
            ));
        }
        let dh = c / heads;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..n {
            for p in 0..l {
                for hd in 0..heads {
                    let s = (b * l + p) * c + hd * dh;
                    let t = ((b * heads + hd) * l + p) * dh;
                    out[t..t + dh].copy_from_slice(&src[s..s + dh]);
                }
            }
        }
        let out = Tensor::new(&[n * heads, l, dh], out)?;
        Ok(self.push(out, &[x], Op::SplitHeads { input: x, heads }))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let &[nh, l, dh] = self.shape(x) else {
            return Err(Error::invalid("merge_heads", "expected [N·heads, L, C/heads]"));
        };
        if heads == 0 || nh % heads != 0 {
            return Err(Error::invalid("merge_heads", "batch not divisible by heads"));
        }
        let out = merge_heads_values(self.value(x).data(), nh / heads, heads, l, dh);
        let out = Tensor::new(&[nh / heads, l, dh * heads], out)?;
        Ok(self.push(out, &[x], Op::MergeHeads { input: x, heads }))
    }

    /// Mean voxel cross-entropy of class-last `logits` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let Some((&c, lead)) = shape.split_last() else {
            return Err(Error::invalid("cross_entropy", "logits must have a class axis"));
        };
        let voxels: usize = lead.iter().product();
        if labels.len() != voxels {
            return Err(Error::invalid(
                "cross_entropy",
                format!("{} labels for {voxels} voxels of logits {shape:?}", labels.len()),
            ));
        }
        if let Some(i) = labels.iter().position(|&l| l >= c) {
            return Err(Error::LabelOutOfRange {
                label: labels[i],
                coord: unravel(i, lead),
                classes: c,
            });
        }
        let probs = softmax_values(self.value(logits).data(), &shape, shape.len() - 1);
        let mut total = 0.0f64;
        for (v, &l) in labels.iter().enumerate() {
            // log-softmax directly for the stability of tiny probabilities
            let row = &self.value(logits).data()[v * c..(v + 1) * c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&z| (z - mx).exp()).sum::<T>().ln();
            total += (lse - row[l]).as_f64();
        }
        let loss = Tensor::scalar(T::lit(total / voxels.max(1) as f64));
        Ok(self.push(
            loss,
            &[logits],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse pass from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n_elems = self.value(loss).len();
        if n_elems != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &self.nodes[i].op {
                None => match &mut self.nodes[i].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                },
                Some(op) => {
                    for (v, dv) in self.vjp(op, &self.nodes[i].value, &g)? {
                        if !self.nodes[v.0].requires_grad {
                            continue;
                        }
                        match &mut grads[v.0] {
                            Some(acc) => acc.add_assign(&dv),
                            slot @ None => *slot = Some(dv),
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn vjp(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let like = |v: Var, data: Vec<T>| Tensor::new(self.shape(v), data);
        Ok(match op {
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(self.value(*b), |x, y| x * y)?),
                (*b, g.zip_map(self.value(*a), |x, y| x * y)?),
            ],
            Op::Scale(a, s) => vec![(*a, g.map(|x| x * *s))],
            Op::Sum(a) => vec![(*a, Tensor::full(self.shape(*a), g.item()))],
            Op::Reshape(a) => vec![(*a, g.clone().reshape(self.shape(*a))?)],
            Op::Relu6(a) => {
                let six = T::lit(6.0);
                let data = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| if x > T::zero() && x < six { gv } else { T::zero() })
                    .collect();
                vec![(*a, like(*a, data)?)]
            }
            Op::Dropout { input, mask } => {
                let data = g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                vec![(*input, like(*input, data)?)]
            }
            Op::Conv {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (dx, dk, db) = conv::conv_backward(
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g.data(),
                    geom,
                    self.needs(*input),
                );
                let mut out = vec![(*kernel, like(*kernel, dk)?)];
                if let Some(dx) = dx {
                    out.push((*input, like(*input, dx)?));
                }
                if let Some(b) = bias {
                    out.push((*b, like(*b, db)?));
                }
                out
            }
            Op::ConvTranspose {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (dx, dk, db) = conv::conv_transpose_backward(
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g.data(),
                    geom,
                    self.needs(*input),
                );
                let mut out = vec![(*kernel, like(*kernel, dk)?)];
                if let Some(dx) = dx {
                    out.push((*input, like(*input, dx)?));
                }
                if let Some(b) = bias {
                    out.push((*b, like(*b, db)?));
                }
                out
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let gs = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (grow, xrow) in g.data().chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        dgamma[j] += grow[j] * xrow[j];
                        dbeta[j] += grow[j];
                    }
                }
                let mut dx = Vec::with_capacity(xhat.len());
                if *batch_stats {
                    let m = T::from_usize_lossy(xhat.len() / c);
                    // dxhat = g·γ;  dx = inv_std/M · (M·dxhat − Σdxhat − x̂·Σ(dxhat·x̂))
                    for (grow, xrow) in g.data().chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            let dxhat = grow[j] * gs[j];
                            let corr = gs[j] * dbeta[j] + xrow[j] * gs[j] * dgamma[j];
                            dx.push(inv_std[j] / m * (m * dxhat - corr));
                        }
                    }
                } else {
                    for grow in g.data().chunks_exact(c) {
                        for j in 0..c {
                            dx.push(grow[j] * gs[j] * inv_std[j]);
                        }
                    }
                }
                vec![
                    (*input, like(*input, dx)?),
                    (*gamma, like(*gamma, dgamma)?),
                    (*beta, like(*beta, dbeta)?),
                ]
            }
            Op::Matmul(a, b) => {
                let (&[m, k], &[_, n]) = (self.shape(*a), self.shape(*b)) else {
                    unreachable!("matmul operands validated in forward")
                };
                let mut da = vec![T::zero(); m * k];
                let mut db = vec![T::zero(); k * n];
                // da = g·bᵀ, db = aᵀ·g
                T::gemm(m, n, k, T::one(), g.data(), n, 1, self.value(*b).data(), 1, n, T::zero(), &mut da, k, 1);
                T::gemm(k, m, n, T::one(), self.value(*a).data(), 1, k, g.data(), n, 1, T::zero(), &mut db, n, 1);
                vec![(*a, like(*a, da)?), (*b, like(*b, db)?)]
            }
            Op::Bmm { a, b, trans_b } => {
                let &[batch, m, k] = self.shape(*a) else {
                    unreachable!("bmm operands validated in forward")
                };
                let n = g.shape()[2];
                let (ad, bd, gd) = (self.value(*a).data(), self.value(*b).data(), g.data());
                let mut da = vec![T::zero(); batch * m * k];
                let mut db = vec![T::zero(); batch * k * n];
                for i in 0..batch {
                    let ai = &ad[i * m * k..(i + 1) * m * k];
                    let bi = &bd[i * k * n..(i + 1) * k * n];
                    let gi = &gd[i * m * n..(i + 1) * m * n];
                    let dai = &mut da[i * m * k..(i + 1) * m * k];
                    let dbi = &mut db[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        // out = a·bᵀ with b[n,k]: da = g·b, db = gᵀ·a
                        T::gemm(m, n, k, T::one(), gi, n, 1, bi, k, 1, T::zero(), dai, k, 1);
                        T::gemm(n, m, k, T::one(), gi, 1, n, ai, k, 1, T::zero(), dbi, k, 1);
                    } else {
                        T::gemm(m, n, k, T::one(), gi, n, 1, bi, 1, n, T::zero(), dai, k, 1);
                        T::gemm(k, m, n, T::one(), ai, 1, k, gi, n, 1, T::zero(), dbi, n, 1);
                    }
                }
                vec![(*a, like(*a, da)?), (*b, like(*b, db)?)]
            }
            Op::Softmax { input, axis } => {
                let (outer, len, inner) = axis_split(self.shape(*input), *axis);
                let yv = out.data();
                let mut dx = vec![T::zero(); yv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: T = (0..len).map(|j| g.data()[idx(j)] * yv[idx(j)]).sum();
                        for j in 0..len {
                            dx[idx(j)] = yv[idx(j)] * (g.data()[idx(j)] - dot);
                        }
                    }
                }
                vec![(*input, like(*input, dx)?)]
            }
            Op::SplitHeads { input, heads } => {
                let &[n, l, c] = self.shape(*input) else {
                    unreachable!("split_heads operand validated in forward")
                };
                let dx = merge_heads_values(g.data(), n, *heads, l, c / heads);
                vec![(*input, like(*input, dx)?)]
            }
            Op::MergeHeads { input, heads } => {
                let &[nh, l, dh] = self.shape(*input) else {
                    unreachable!("merge_heads operand validated in forward")
                };
                let (n, c) = (nh / heads, dh * heads);
                let mut dx = vec![T::zero(); g.len()];
                for b in 0..n {
                    for p in 0..l {
                        for hd in 0..*heads {
                            let s = (b * l + p) * c + hd * dh;
                            let t = ((b * heads + hd) * l + p) * dh;
                            dx[t..t + dh].copy_from_slice(&g.data()[s..s + dh]);
                        }
                    }
                }
                vec![(*input, like(*input, dx)?)]
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = *self.shape(*logits).last().expect("class axis");
                let scale = g.item() / T::from_usize_lossy(labels.len().max(1));
                let mut dx = probs.clone();
                for (v, &l) in labels.iter().enumerate() {
                    dx[v * c + l] -= T::one();
                }
                dx.iter_mut().for_each(|x| *x *= scale);
                vec![(*logits, like(*logits, dx)?)]
            }
        })
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_values<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mx = (0..len).map(|j| x[idx(j)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..len {
                let e = (x[idx(j)] - mx).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[idx(j)] /= total;
            }
        }
    }
    out
}

fn merge_heads_values<T: Scalar>(x: &[T], n: usize, heads: usize, l: usize, dh: usize) -> Vec<T> {
    let c = dh * heads;
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for p in 0..l {
            for hd in 0..heads {
                let s = ((b * heads + hd) * l + p) * dh;
                let t = (b * l + p) * c + hd * dh;
                out[t..t + dh].copy_from_slice(&x[s..s + dh]);
            }
        }
    }
    out
}

fn unravel(mut i: usize, shape: &[usize]) -> Vec<usize> {
    let mut coord = vec![0; shape.len()];
    for (slot, &ext) in coord.iter_mut().zip(shape).rev() {
        *slot = i % ext;
        i /= ext;
    }
    coord
}
