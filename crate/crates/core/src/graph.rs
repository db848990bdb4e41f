//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in execution
//! order, so the node list is topologically sorted by construction and
//! [`Graph::backward`] is a single reverse sweep. Nodes whose inputs carry no
//! gradient are stored as plain values; a graph created with
//! [`Graph::no_grad`] therefore records nothing but values.

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which vector norm a reduction computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Norm {
    L1,
    L2,
}

/// Batch-norm statistics source.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, S> {
    /// Normalize with the batch's own moments.
    Train { eps: S },
    /// Normalize with externally tracked moments.
    Eval { mean: &'a [S], var: &'a [S], eps: S },
}

/// Per-channel moments observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    /// Unbiased variance, as used for running-statistic updates.
    pub var_unbiased: Vec<S>,
}

#[derive(Clone, Debug)]
enum Op<S: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Relu(Var),
    Square(Var),
    Abs(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    SumPerSample(Var),
    MeanAxis1(Var),
    MulPerSample(Var, Var),
    DivPerSample(Var, Var),
    DivScalar(Var, Var),
    NormPerSample(Var, Norm),
    ReduceNorm(Var, Norm),
    LogSoftmax(Var, S),
    Softmax(Var, S),
    Pick(Var, Vec<usize>),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        /// Unfolded input, kept only when the weight needs a gradient.
        col: Option<Vec<S>>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<S>,
        inv_std: Vec<S>,
        train: bool,
    },
    GlobalAvgPool(Var),
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    ShortcutPad {
        x: Var,
        stride: usize,
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Recording of a computation, owning every intermediate value.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    grad_enabled: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn sign<S: Scalar>(v: S) -> S {
    if v > S::zero() {
        S::one()
    } else if v < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

/// `(N, per-sample size)` of a tensor whose leading axis is the batch.
fn batch_split(shape: &[usize]) -> Result<(usize, usize)> {
    match shape.split_first() {
        Some((&n, rest)) => Ok((n, rest.iter().product())),
        None => Err(Error::Dimension(
            "expected a batched tensor, got a scalar".into(),
        )),
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that only evaluates: no node ever requires a gradient.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes that carry a backward rule.
    pub fn recorded_ops(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .count()
    }

    /// Adds an input. It participates in differentiation iff the tensor
    /// has `requires_grad` set and the graph is recording.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let requires_grad = t.requires_grad() && self.grad_enabled;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        let mut t = t;
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> Result<S> {
        self.value(v).item()
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(what, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(
        &mut self,
        what: &str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        self.same_shape(what, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, op, &[a, b]))
    }

    fn map(&mut self, a: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let t = self.value(a).map(f);
        self.push(t, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(
            a,
            |x| if x > S::zero() { x } else { S::zero() },
            Op::Relu(a),
        )
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    /// `|x|`, with subgradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, |x| x.exp(), Op::Exp(a))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::Dimension("mean of an empty tensor".into()));
        }
        let s = self.value(a).sum() / S::of(n as f64);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), &[a]))
    }

    /// `[N, ...] -> [N]`, summing each sample.
    pub fn sum_per_sample(&mut self, a: Var) -> Result<Var> {
        let (n, m) = batch_split(self.shape(a))?;
        let data = if m == 0 {
            vec![S::zero(); n]
        } else {
            self.data(a)
                .chunks(m)
                .map(|c| c.iter().copied().sum())
                .collect()
        };
        let t = Tensor::new(&[n], data)?;
        Ok(self.push(t, Op::SumPerSample(a), &[a]))
    }

    /// `[N, C, ...] -> [N, ...]`, averaging over the channel axis.
    pub fn mean_axis1(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 || shape[1] == 0 {
            return Err(Error::Dimension(format!(
                "mean over axis 1 of shape {shape:?}"
            )));
        }
        let (n, c) = (shape[0], shape[1]);
        let r: usize = shape[2..].iter().product();
        let inv = S::one() / S::of(c as f64);
        let src = self.data(a);
        let mut out = vec![S::zero(); n * r];
        for i in 0..n {
            let dst = &mut out[i * r..(i + 1) * r];
            for ch in 0..c {
                let s = &src[(i * c + ch) * r..(i * c + ch + 1) * r];
                dst.iter_mut().zip(s).for_each(|(d, &v)| *d += v);
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let mut out_shape = vec![n];
        out_shape.extend_from_slice(&shape[2..]);
        let t = Tensor::new(&out_shape, out)?;
        Ok(self.push(t, Op::MeanAxis1(a), &[a]))
    }

    fn per_sample_check(&self, x: Var, s: Var) -> Result<(usize, usize)> {
        let (n, m) = batch_split(self.shape(x))?;
        if self.shape(s) != [n] {
            return Err(shape_err("per-sample factor", self.shape(x), self.shape(s)));
        }
        Ok((n, m))
    }

    /// `x[n, ...] * s[n]`.
    pub fn mul_per_sample(&mut self, x: Var, s: Var) -> Result<Var> {
        let (_, m) = self.per_sample_check(x, s)?;
        let sv = self.data(s);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv[i / m])
            .collect();
        let t = Tensor::new(self.shape(x), data)?;
        Ok(self.push(t, Op::MulPerSample(x, s), &[x, s]))
    }

    /// `x[n, ...] / d[n]`.
    pub fn div_per_sample(&mut self, x: Var, d: Var) -> Result<Var> {
        let (_, m) = self.per_sample_check(x, d)?;
        let dv = self.data(d);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v / dv[i / m])
            .collect();
        let t = Tensor::new(self.shape(x), data)?;
        Ok(self.push(t, Op::DivPerSample(x, d), &[x, d]))
    }

    /// Divides every element by a one-element node.
    pub fn div_scalar(&mut self, x: Var, d: Var) -> Result<Var> {
        let dv = self.item(d)?;
        let t = self.value(x).map(|v| v / dv);
        Ok(self.push(t, Op::DivScalar(x, d), &[x, d]))
    }

    /// Per-sample vector norm, `[N, ...] -> [N]`.
    pub fn norm_per_sample(&mut self, x: Var, p: Norm) -> Result<Var> {
        let (n, m) = batch_split(self.shape(x))?;
        let data = if m == 0 {
            vec![S::zero(); n]
        } else {
            self.data(x).chunks(m).map(|c| norm_of(c, p)).collect()
        };
        let t = Tensor::new(&[n], data)?;
        Ok(self.push(t, Op::NormPerSample(x, p), &[x]))
    }

    /// Norm over all elements. Subgradient 0 at non-differentiable points.
    pub fn reduce_norm(&mut self, x: Var, p: Norm) -> Result<Var> {
        if self.value(x).numel() == 0 {
            return Err(Error::Dimension("norm of an empty tensor".into()));
        }
        let v = norm_of(self.data(x), p);
        Ok(self.push(Tensor::scalar(v), Op::ReduceNorm(x, p), &[x]))
    }

    fn rows(&self, x: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(x) {
            [n, k] if *k > 0 => Ok((*n, *k)),
            s => Err(Error::Dimension(format!(
                "{what} expects [N, K>0], got {s:?}"
            ))),
        }
    }

    fn check_temperature(t: S) -> Result<()> {
        if !(t > S::zero()) || !t.is_finite() {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {t}"
            )));
        }
        Ok(())
    }

    /// Row-wise `log softmax(x / t)`.
    pub fn log_softmax(&mut self, x: Var, t: S) -> Result<Var> {
        Self::check_temperature(t)?;
        let (_, k) = self.rows(x, "log_softmax")?;
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(k) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            row.iter_mut().for_each(|v| *v = (*v - max) / t);
            let lse = row.iter().map(|&v| v.exp()).sum::<S>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::new(self.shape(x), out)?;
        Ok(self.push(out, Op::LogSoftmax(x, t), &[x]))
    }

    /// Row-wise `softmax(x / t)`, max-subtracted.
    pub fn softmax(&mut self, x: Var, t: S) -> Result<Var> {
        Self::check_temperature(t)?;
        let (_, k) = self.rows(x, "softmax")?;
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(k) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            row.iter_mut().for_each(|v| *v = ((*v - max) / t).exp());
            let z: S = row.iter().copied().sum();
            row.iter_mut().for_each(|v| *v /= z);
        }
        let out = Tensor::new(self.shape(x), out)?;
        Ok(self.push(out, Op::Softmax(x, t), &[x]))
    }

    /// `out[n] = x[n, labels[n]]`.
    pub fn pick(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.rows(x, "pick")?;
        if labels.len() != n {
            return Err(Error::Dimension(format!(
                "{} labels for {n} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index(format!("label {bad} outside [0, {k})")));
        }
        let src = self.data(x);
        let data = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| src[i * k + l])
            .collect();
        let t = Tensor::new(&[n], data)?;
        Ok(self.push(t, Op::Pick(x, labels.to_vec()), &[x]))
    }

    /// 2-D cross-correlation, NCHW input and `[K, C, kh, kw]` weight.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be positive".into()));
        }
        let (xs, ws) = (self.shape(x), self.shape(w));
        let ([n, c, h, wd], [k, wc, kh, kw]) = (xs, ws) else {
            return Err(shape_err(
                "conv2d expects input [N,C,H,W] and weight [K,C,kh,kw]",
                xs,
                ws,
            ));
        };
        let (n, c, h, wd, k, wc, kh, kw) = (*n, *c, *h, *wd, *k, *wc, *kh, *kw);
        if c != wc || kh > h + 2 * pad || kw > wd + 2 * pad || kh == 0 || kw == 0 {
            return Err(shape_err("conv2d input vs weight", xs, ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [k] {
                return Err(shape_err("conv2d bias", self.shape(b), &[k]));
            }
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            k,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let col = kernels::im2col(self.data(x), &geom);
        let out = kernels::conv2d_forward(&col, self.data(w), b.map(|b| self.data(b)), &geom);
        let t = Tensor::new(&[n, k, geom.ho, geom.wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let col = (self.grad_enabled && self.nodes[w.0].requires_grad).then_some(col);
        Ok(self.push(t, Op::Conv2d { x, w, b, geom, col }, &inputs))
    }

    /// Per-channel batch normalization with affine `gamma`/`beta`.
    ///
    /// In train mode the batch moments are returned so the caller can
    /// maintain running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, S>,
    ) -> Result<(Var, Option<BatchStats<S>>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::Dimension(format!(
                "batch_norm expects [N,C,...], got {xs:?}"
            )));
        }
        let (n, c) = (xs[0], xs[1]);
        let r: usize = xs[2..].iter().product();
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(shape_err("batch_norm affine", self.shape(p), &[c]));
            }
        }
        let src = self.data(x);
        let (mean, var, eps, stats) = match mode {
            BnMode::Train { eps } => {
                let m = n * r;
                if m == 0 {
                    return Err(Error::Dimension(
                        "batch_norm in train mode needs N*H*W >= 1".into(),
                    ));
                }
                let mut mean = vec![S::zero(); c];
                let mut var = vec![S::zero(); c];
                for ch in 0..c {
                    let mut s = S::zero();
                    for i in 0..n {
                        s += src[(i * c + ch) * r..(i * c + ch + 1) * r]
                            .iter()
                            .copied()
                            .sum();
                    }
                    let mu = s / S::of(m as f64);
                    let mut ss = S::zero();
                    for i in 0..n {
                        for &v in &src[(i * c + ch) * r..(i * c + ch + 1) * r] {
                            ss += (v - mu) * (v - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = ss / S::of(m as f64);
                }
                let unbiased = if m > 1 {
                    var.iter()
                        .map(|&v| v * S::of(m as f64) / S::of((m - 1) as f64))
                        .collect()
                } else {
                    var.clone()
                };
                let stats = BatchStats {
                    mean: mean.clone(),
                    var_unbiased: unbiased,
                };
                (mean, var, eps, Some(stats))
            }
            BnMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Dimension(format!(
                        "batch_norm running stats of length {}/{} for {c} channels",
                        mean.len(),
                        var.len()
                    )));
                }
                (mean.to_vec(), var.to_vec(), eps, None)
            }
        };
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.data(gamma), self.data(beta));
        let mut out = vec![S::zero(); src.len()];
        for i in 0..n {
            for ch in 0..c {
                let (scale, shift) = (
                    gv[ch] * inv_std[ch],
                    bv[ch] - gv[ch] * inv_std[ch] * mean[ch],
                );
                let base = (i * c + ch) * r;
                for j in base..base + r {
                    out[j] = src[j] * scale + shift;
                }
            }
        }
        let t = Tensor::new(&xs, out)?;
        let train = stats.is_some();
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            mean,
            inv_std,
            train,
        };
        Ok((self.push(t, op, &[x, gamma, beta]), stats))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [n, c, h, w] = xs[..] else {
            return Err(Error::Dimension(format!(
                "global_avg_pool expects [N,C,H,W], got {xs:?}"
            )));
        };
        if h * w == 0 {
            return Err(Error::Dimension("global_avg_pool over an empty map".into()));
        }
        let inv = S::one() / S::of((h * w) as f64);
        let data = self
            .data(x)
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<S>() * inv)
            .collect();
        let t = Tensor::new(&[n, c], data)?;
        Ok(self.push(t, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let (n, m) = batch_split(self.shape(x))?;
        self.reshape(x, &[n, m])
    }

    /// Fully connected layer: `x W^T + b` with `W: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let ([n, i], [o, wi]) = (xs, ws) else {
            return Err(shape_err(
                "linear expects input [N,in] and weight [out,in]",
                xs,
                ws,
            ));
        };
        let (n, i, o) = (*n, *i, *o);
        if i != *wi {
            return Err(shape_err("linear input vs weight", xs, ws));
        }
        let mut out = vec![S::zero(); n * o];
        if let Some(b) = b {
            let bv = self.data(b);
            if bv.len() != o || self.shape(b).len() != 1 {
                return Err(shape_err("linear bias", self.shape(b), &[o]));
            }
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bv);
            }
        }
        S::gemm(
            n,
            i,
            o,
            S::one(),
            self.data(x),
            (i as isize, 1),
            self.data(w),
            (1, i as isize),
            S::one(),
            &mut out,
            (o as isize, 1),
        );
        let t = Tensor::new(&[n, o], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(t, Op::Linear { x, w, b }, &inputs))
    }

    /// Parameter-free residual shortcut: spatial subsampling by `stride`
    /// followed by zero channels appended up to `out_channels`.
    pub fn shortcut_pad(&mut self, x: Var, stride: usize, out_channels: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [n, c, h, w] = xs[..] else {
            return Err(Error::Dimension(format!(
                "shortcut expects [N,C,H,W], got {xs:?}"
            )));
        };
        if stride == 0 || out_channels < c {
            return Err(Error::Parameter(format!(
                "shortcut from {c} to {out_channels} channels with stride {stride}"
            )));
        }
        let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
        let src = self.data(x);
        let mut out = vec![S::zero(); n * out_channels * ho * wo];
        for i in 0..n {
            for ch in 0..c {
                for y in 0..ho {
                    for z in 0..wo {
                        out[((i * out_channels + ch) * ho + y) * wo + z] =
                            src[((i * c + ch) * h + y * stride) * w + z * stride];
                    }
                }
            }
        }
        let t = Tensor::new(&[n, out_channels, ho, wo], out)?;
        Ok(self.push(t, Op::ShortcutPad { x, stride }, &[x]))
    }

    /// Back-propagates from a one-element `loss`, accumulating into the
    /// gradient buffers of every leaf that requires a gradient.
    ///
    /// Calling it again (on this or another loss of the same graph) adds to
    /// the existing leaf gradients; nothing is reset implicitly.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                if self.nodes[i].requires_grad {
                    self.nodes[i].value.accumulate_grad(&g)?;
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Vec<S>>], v: Var, g: Vec<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let out = self.nodes[i].value.data();
        match &self.nodes[i].op {
            Op::Leaf => unreachable!("leaves are handled by the caller"),
            Op::Add(a, b) => {
                self.send(grads, *a, g.to_vec());
                self.send(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, g.to_vec());
                self.send(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                if self.wants(*a) {
                    self.send(grads, *a, g.iter().zip(bv).map(|(&g, &y)| g * y).collect());
                }
                if self.wants(*b) {
                    self.send(grads, *b, g.iter().zip(av).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Scale(a, c) => self.send(grads, *a, g.iter().map(|&v| v * *c).collect()),
            Op::AddScalar(a) => self.send(grads, *a, g.to_vec()),
            Op::Relu(a) => {
                let av = self.data(*a);
                let ga = g
                    .iter()
                    .zip(av)
                    .map(|(&g, &x)| if x > S::zero() { g } else { S::zero() })
                    .collect();
                self.send(grads, *a, ga);
            }
            Op::Square(a) => {
                let two = S::of(2.0);
                let ga = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(&g, &x)| two * x * g)
                    .collect();
                self.send(grads, *a, ga);
            }
            Op::Abs(a) => {
                let ga = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(&g, &x)| sign(x) * g)
                    .collect();
                self.send(grads, *a, ga);
            }
            Op::Exp(a) => self.send(grads, *a, g.iter().zip(out).map(|(&g, &y)| g * y).collect()),
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.send(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.send(grads, *a, vec![g[0] / S::of(n as f64); n]);
            }
            Op::SumPerSample(a) => {
                let m = self.value(*a).numel() / g.len().max(1);
                let ga = (0..self.value(*a).numel()).map(|j| g[j / m]).collect();
                self.send(grads, *a, ga);
            }
            Op::MeanAxis1(a) => {
                let shape = self.shape(*a);
                let (n, c) = (shape[0], shape[1]);
                let r: usize = shape[2..].iter().product();
                let inv = S::one() / S::of(c as f64);
                let mut ga = vec![S::zero(); n * c * r];
                for i in 0..n {
                    for ch in 0..c {
                        let dst = &mut ga[(i * c + ch) * r..(i * c + ch + 1) * r];
                        dst.iter_mut()
                            .zip(&g[i * r..(i + 1) * r])
                            .for_each(|(d, &v)| *d = v * inv);
                    }
                }
                self.send(grads, *a, ga);
            }
            Op::MulPerSample(x, s) => {
                let (xv, sv) = (self.data(*x), self.data(*s));
                let m = xv.len() / sv.len().max(1);
                if self.wants(*x) {
                    self.send(
                        grads,
                        *x,
                        g.iter().enumerate().map(|(j, &g)| g * sv[j / m]).collect(),
                    );
                }
                if self.wants(*s) {
                    let gs = (0..sv.len())
                        .map(|n| (n * m..(n + 1) * m).map(|j| g[j] * xv[j]).sum())
                        .collect();
                    self.send(grads, *s, gs);
                }
            }
            Op::DivPerSample(x, d) => {
                let (xv, dv) = (self.data(*x), self.data(*d));
                let m = xv.len() / dv.len().max(1);
                if self.wants(*x) {
                    self.send(
                        grads,
                        *x,
                        g.iter().enumerate().map(|(j, &g)| g / dv[j / m]).collect(),
                    );
                }
                if self.wants(*d) {
                    let gd = (0..dv.len())
                        .map(|n| {
                            let s: S = (n * m..(n + 1) * m).map(|j| g[j] * xv[j]).sum();
                            -s / (dv[n] * dv[n])
                        })
                        .collect();
                    self.send(grads, *d, gd);
                }
            }
            Op::DivScalar(x, d) => {
                let (xv, dv) = (self.data(*x), self.data(*d)[0]);
                if self.wants(*x) {
                    self.send(grads, *x, g.iter().map(|&g| g / dv).collect());
                }
                if self.wants(*d) {
                    let s: S = g.iter().zip(xv).map(|(&g, &x)| g * x).sum();
                    self.send(grads, *d, vec![-s / (dv * dv)]);
                }
            }
            Op::NormPerSample(x, p) => {
                let xv = self.data(*x);
                let m = xv.len() / out.len().max(1);
                let ga = xv
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| g[j / m] * norm_grad(v, out[j / m], *p))
                    .collect();
                self.send(grads, *x, ga);
            }
            Op::ReduceNorm(x, p) => {
                let ga = self
                    .data(*x)
                    .iter()
                    .map(|&v| g[0] * norm_grad(v, out[0], *p))
                    .collect();
                self.send(grads, *x, ga);
            }
            Op::LogSoftmax(x, t) => {
                let k = self.shape(*x)[1];
                let mut ga = vec![S::zero(); g.len()];
                for ((dst, gr), lp) in ga.chunks_mut(k).zip(g.chunks(k)).zip(out.chunks(k)) {
                    let total: S = gr.iter().copied().sum();
                    for j in 0..k {
                        dst[j] = (gr[j] - lp[j].exp() * total) / *t;
                    }
                }
                self.send(grads, *x, ga);
            }
            Op::Softmax(x, t) => {
                let k = self.shape(*x)[1];
                let mut ga = vec![S::zero(); g.len()];
                for ((dst, gr), p) in ga.chunks_mut(k).zip(g.chunks(k)).zip(out.chunks(k)) {
                    let dot: S = gr.iter().zip(p).map(|(&a, &b)| a * b).sum();
                    for j in 0..k {
                        dst[j] = p[j] * (gr[j] - dot) / *t;
                    }
                }
                self.send(grads, *x, ga);
            }
            Op::Pick(x, labels) => {
                let k = self.shape(*x)[1];
                let mut ga = vec![S::zero(); self.value(*x).numel()];
                for (n, &l) in labels.iter().enumerate() {
                    ga[n * k + l] = g[n];
                }
                self.send(grads, *x, ga);
            }
            Op::Conv2d { x, w, b, geom, col } => {
                let want = (
                    self.wants(*x),
                    self.wants(*w),
                    b.is_some_and(|b| self.wants(b)),
                );
                let empty = [];
                let col = col.as_deref().unwrap_or(&empty);
                let cg = kernels::conv2d_backward(col, self.data(*w), g, geom, want);
                if let Some(gx) = cg.input {
                    self.send(grads, *x, gx);
                }
                if let Some(gw) = cg.weight {
                    self.send(grads, *w, gw);
                }
                if let (Some(b), Some(gb)) = (b, cg.bias) {
                    self.send(grads, *b, gb);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let shape = self.shape(*x);
                let (n, c) = (shape[0], shape[1]);
                let r: usize = shape[2..].iter().product();
                let xv = self.data(*x);
                let gv = self.data(*gamma);
                let mut sum_g = vec![S::zero(); c];
                let mut sum_gx = vec![S::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * r;
                        for j in base..base + r {
                            let xhat = (xv[j] - mean[ch]) * inv_std[ch];
                            sum_g[ch] += g[j];
                            sum_gx[ch] += g[j] * xhat;
                        }
                    }
                }
                if self.wants(*x) {
                    let m = S::of((n * r) as f64);
                    let mut gx = vec![S::zero(); xv.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let k = gv[ch] * inv_std[ch];
                            let base = (i * c + ch) * r;
                            for j in base..base + r {
                                gx[j] = if *train {
                                    let xhat = (xv[j] - mean[ch]) * inv_std[ch];
                                    k * (g[j] - sum_g[ch] / m - xhat * sum_gx[ch] / m)
                                } else {
                                    k * g[j]
                                };
                            }
                        }
                    }
                    self.send(grads, *x, gx);
                }
                self.send(grads, *gamma, sum_gx);
                self.send(grads, *beta, sum_g);
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.shape(*x);
                let hw = shape[2] * shape[3];
                let inv = S::one() / S::of(hw as f64);
                let ga = (0..self.value(*x).numel())
                    .map(|j| g[j / hw] * inv)
                    .collect();
                self.send(grads, *x, ga);
            }
            Op::Reshape(x) => self.send(grads, *x, g.to_vec()),
            Op::Linear { x, w, b } => {
                let (n, i) = (self.shape(*x)[0], self.shape(*x)[1]);
                let o = self.shape(*w)[0];
                if self.wants(*x) {
                    let mut gx = vec![S::zero(); n * i];
                    S::gemm(
                        n,
                        o,
                        i,
                        S::one(),
                        g,
                        (o as isize, 1),
                        self.data(*w),
                        (i as isize, 1),
                        S::zero(),
                        &mut gx,
                        (i as isize, 1),
                    );
                    self.send(grads, *x, gx);
                }
                if self.wants(*w) {
                    let mut gw = vec![S::zero(); o * i];
                    S::gemm(
                        o,
                        n,
                        i,
                        S::one(),
                        g,
                        (1, o as isize),
                        self.data(*x),
                        (i as isize, 1),
                        S::zero(),
                        &mut gw,
                        (i as isize, 1),
                    );
                    self.send(grads, *w, gw);
                }
                if let Some(b) = b {
                    let mut gb = vec![S::zero(); o];
                    for row in g.chunks(o) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    self.send(grads, *b, gb);
                }
            }
            Op::ShortcutPad { x, stride } => {
                let xs = self.shape(*x);
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let os = self.nodes[i].value.shape();
                let (oc, ho, wo) = (os[1], os[2], os[3]);
                let mut gx = vec![S::zero(); n * c * h * w];
                for s in 0..n {
                    for ch in 0..c {
                        for y in 0..ho {
                            for z in 0..wo {
                                gx[((s * c + ch) * h + y * stride) * w + z * stride] =
                                    g[((s * oc + ch) * ho + y) * wo + z];
                            }
                        }
                    }
                }
                self.send(grads, *x, gx);
            }
        }
    }
}

fn norm_of<S: Scalar>(v: &[S], p: Norm) -> S {
    match p {
        Norm::L1 => v.iter().map(|x| x.abs()).sum(),
        Norm::L2 => v.iter().map(|&x| x * x).sum::<S>().sqrt(),
    }
}

fn norm_grad<S: Scalar>(x: S, norm: S, p: Norm) -> S {
    match p {
        Norm::L1 => sign(x),
        Norm::L2 if norm > S::zero() => x / norm,
        Norm::L2 => S::zero(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph<f64>, shape: &[usize], vals: &[f64]) -> Var {
        g.leaf(Tensor::from_f64(shape, vals).unwrap().with_requires_grad())
    }

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 2], &[1., -2., 3., 0.5]);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn sum_of_squares_gives_2x() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[3], &[1., -2., 3.]);
        let sq = g.square(x);
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2., -4., 6.]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2], &[1., 2.]);
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2., 2.]);
    }

    #[test]
    fn fan_out_sums_contributions() {
        // f = sum(x * x + 3x) via two consumers of x.
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2], &[1., -1.]);
        let xx = g.mul(x, x).unwrap();
        let x3 = g.scale(x, 3.0);
        let y = g.add(xx, x3).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[5., 1.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2], &[1., 2.]);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_never_get_gradients() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2], &[1., 2.]);
        let c = g.constant(
            Tensor::from_f64(&[2], &[3., 4.])
                .unwrap()
                .with_requires_grad(),
        );
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3., 4.]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn no_grad_graph_records_nothing() {
        let mut g = Graph::<f32>::no_grad();
        let x = g.leaf(Tensor::ones(&[1, 1, 3, 3]).with_requires_grad());
        let w = g.leaf(Tensor::ones(&[1, 1, 3, 3]).with_requires_grad());
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[9.0]);
        assert_eq!(g.recorded_ops(), 0);
        assert!(!g.requires_grad(y));
    }

    #[test]
    fn conv_of_ones_is_nine() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::<f32>::new();
        let vals: Vec<f64> = (0..18).map(|v| v as f64 * 0.25 - 2.0).collect();
        let xt = Tensor::from_f64(&[2, 1, 3, 3], &vals).unwrap();
        let x = g.constant(xt.clone());
        let w = g.constant(Tensor::ones(&[1, 1, 1, 1]));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y).data(), xt.data());
    }

    #[test]
    fn conv_shape_errors_name_both_shapes() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones(&[1, 2, 3, 3]));
        let w = g.constant(Tensor::ones(&[1, 3, 3, 3]));
        let err = g.conv2d(x, w, None, 1, 0).unwrap_err().to_string();
        assert!(
            err.contains("[1, 2, 3, 3]") && err.contains("[1, 3, 3, 3]"),
            "{err}"
        );
        let big = g.constant(Tensor::ones(&[1, 2, 5, 5]));
        assert!(g.conv2d(x, big, None, 1, 0).is_err());
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(g.softmax(x, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(g.log_softmax(x, -1.0), Err(Error::Parameter(_))));
        let p = g.softmax(x, 1.0).unwrap();
        assert_eq!(g.value(p).data(), &[0.5, 0.5]);
    }

    #[test]
    fn l2_norm_subgradient_at_origin_is_zero() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[3], &[0., 0., 0.]);
        let n = g.reduce_norm(x, Norm::L2).unwrap();
        g.backward(n).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0., 0., 0.]);
        let mut g = Graph::new();
        let x = leaf(&mut g, &[3], &[0., 2., -1.]);
        let n = g.reduce_norm(x, Norm::L1).unwrap();
        g.backward(n).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0., 1., -1.]);
    }

    #[test]
    fn batch_norm_zero_gamma_returns_beta() {
        let mut g = Graph::<f64>::new();
        let vals: Vec<f64> = (0..16).map(|v| (v as f64).sin()).collect();
        let x = g.constant(Tensor::from_f64(&[2, 2, 2, 2], &vals).unwrap());
        let gamma = g.constant(Tensor::zeros(&[2]));
        let beta = g.constant(Tensor::from_f64(&[2], &[0.5, -1.5]).unwrap());
        let (y, stats) = g
            .batch_norm(x, gamma, beta, BnMode::Train { eps: 1e-5 })
            .unwrap();
        assert!(stats.is_some());
        let out = g.value(y).data();
        for i in 0..2 {
            assert!(out[i * 8..i * 8 + 4].iter().all(|&v| v == 0.5));
            assert!(out[i * 8 + 4..i * 8 + 8].iter().all(|&v| v == -1.5));
        }
    }

    #[test]
    fn shortcut_pads_channels_and_subsamples() {
        let mut g = Graph::<f32>::new();
        let vals: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let x = g.constant(Tensor::from_f64(&[1, 1, 4, 4], &vals).unwrap());
        let y = g.shortcut_pad(x, 2, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 2, 2]);
        assert_eq!(g.value(y).data(), &[0., 2., 8., 10., 0., 0., 0., 0.]);
    }
}
