//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! Operations append nodes to a [`Tape`]; every node only refers to nodes
//! recorded before it, so walking the tape from the end visits nodes in
//! reverse topological order. [`Tape::backward`] consumes the tape and
//! writes parameter gradients into a [`ParameterStore`].

use super::activation::{leaky_relu, sigmoid, softmax_rows, tanh, Activation, LEAKY_RELU_SLOPE};
use super::{Matrix, ParamId, ParameterStore, Rng};
use crate::error::{Error, Result};

/// Smallest probability fed to `ln` in the cross-entropy.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulNt(Var, Var),
    /// x · wᵀ + bias, bias broadcast over rows
    Affine(Var, Var, Var),
    Add(Var, Var),
    /// x (n×m) + bias (1×m) broadcast over rows
    AddRow(Var, Var),
    /// x (n×m) with row i scaled by s (n×1)
    ScaleRows(Var, Var),
    /// x (n×m) with column j scaled by s (m×1)
    ScaleCols(Var, Var),
    /// Elementwise product with a constant mask.
    MulConst(Var, Matrix),
    /// Inverted dropout; `kept` marks surviving entries, scaled by `scale`.
    Dropout {
        x: Var,
        kept: Vec<bool>,
        scale: f64,
    },
    Scale(Var, f64),
    Act(Var, Activation),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    /// Batch norm, optional dropout and an elementwise activation fused
    /// into one node.
    HiddenBlock {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
        kept: Option<Vec<bool>>,
        scale: f64,
        act: Activation,
    },
    Sum(Var),
    WeightedCe {
        probs: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    /// Whether any parameter feeds this node.
    needs_grad: bool,
}

impl Op {
    fn operands(&self) -> [Option<Var>; 3] {
        match self {
            Op::Input | Op::Param(_) => [None; 3],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::ScaleRows(a, b)
            | Op::ScaleCols(a, b) => [Some(*a), Some(*b), None],
            Op::Dropout { x, .. } => [Some(*x), None, None],
            Op::MulConst(x, _) | Op::Scale(x, _) | Op::Act(x, _) | Op::Sum(x) => {
                [Some(*x), None, None]
            }
            Op::BatchNorm { x, gamma, beta, .. } => [Some(*x), Some(*gamma), Some(*beta)],
            Op::Affine(x, w, b) => [Some(*x), Some(*w), Some(*b)],
            Op::HiddenBlock { x, gamma, beta, .. } => [Some(*x), Some(*gamma), Some(*beta)],
            Op::WeightedCe { probs, .. } => [Some(*probs), None, None],
        }
    }
}

/// Survivor flags for inverted dropout at rate `p`.
fn dropout_keep(len: usize, p: f64, rng: &mut Rng) -> Vec<bool> {
    // Each 64-bit draw yields two 32-bit uniforms.
    let cutoff = (p * 4_294_967_296.0).round() as u64;
    let mut kept = vec![false; len];
    for pair in kept.chunks_mut(2) {
        let bits = rng.next_u64();
        pair[0] = bits & 0xFFFF_FFFF >= cutoff;
        if let Some(second) = pair.get_mut(1) {
            *second = bits >> 32 >= cutoff;
        }
    }
    kept
}

/// Per-column mean and biased variance.
pub fn column_moments(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let (n, c) = x.shape();
    let mut mean = vec![0.0; c];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; c];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n as f64);
    (mean, var)
}

/// Normalisation statistics for [`Tape::hidden_block`].
#[derive(Clone, Copy, Debug)]
pub struct BlockNorm<'a> {
    pub mean: &'a [f64],
    pub var: &'a [f64],
    pub eps: f64,
    /// True when `mean`/`var` are the statistics of this very batch, so
    /// gradients flow through them.
    pub batch_stats: bool,
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut sums = Matrix::zeros(1, g.cols());
    for i in 0..g.rows() {
        for (d, v) in sums.as_mut_slice().iter_mut().zip(g.row(i)) {
            *d += v;
        }
    }
    sums
}

/// Batch statistics produced by a training-mode batch-norm node.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.as_slice()[0]
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let needs_grad = matches!(op, Op::Param(_))
            || op
                .operands()
                .iter()
                .flatten()
                .any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(out, Op::MatMulNt(a, b)))
    }

    /// `x · wᵀ + b` as one node.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = self.value(x).affine(self.value(w), self.value(b))?;
        Ok(self.push(out, Op::Affine(x, w, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::Shape {
                op: "add_row",
                left: xv.shape(),
                right: bv.shape(),
            });
        }
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(bv.as_slice()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        if sv.cols() != 1 || sv.rows() != xv.rows() {
            return Err(Error::Shape {
                op: "scale_rows",
                left: xv.shape(),
                right: sv.shape(),
            });
        }
        let mut out = xv.clone();
        for i in 0..out.rows() {
            let f = sv.as_slice()[i];
            out.row_mut(i).iter_mut().for_each(|v| *v *= f);
        }
        Ok(self.push(out, Op::ScaleRows(x, s)))
    }

    pub fn scale_cols(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        if sv.cols() != 1 || sv.rows() != xv.cols() {
            return Err(Error::Shape {
                op: "scale_cols",
                left: xv.shape(),
                right: sv.shape(),
            });
        }
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for (v, f) in out.row_mut(i).iter_mut().zip(sv.as_slice()) {
                *v *= f;
            }
        }
        Ok(self.push(out, Op::ScaleCols(x, s)))
    }

    pub fn mul_const(&mut self, x: Var, mask: Matrix) -> Result<Var> {
        let out = self.value(x).zip_map(&mask, |a, b| a * b)?;
        Ok(self.push(out, Op::MulConst(x, mask)))
    }

    /// Inverted dropout: zeroes each entry with probability `p` and scales
    /// the survivors by `1/(1-p)`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::precondition(format!(
                "dropout rate {p} outside [0, 1)"
            )));
        }
        let scale = 1.0 / (1.0 - p);
        let mut out = self.value(x).clone();
        let kept = dropout_keep(out.len(), p, rng);
        for (v, &k) in out.as_mut_slice().iter_mut().zip(&kept) {
            *v *= scale * f64::from(u8::from(k));
        }
        Ok(self.push(out, Op::Dropout { x, kept, scale }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let xv = self.value(x);
        let out = match kind {
            Activation::LeakyRelu => xv.map(leaky_relu),
            Activation::Tanh => xv.map(tanh),
            Activation::Sigmoid => xv.map(sigmoid),
            Activation::SoftmaxRows => {
                if xv.cols() == 0 {
                    return Err(Error::precondition("softmax over zero columns"));
                }
                softmax_rows(xv)
            }
        };
        Ok(self.push(out, Op::Act(x, kind)))
    }

    /// Batch normalisation using the statistics of the batch itself.
    ///
    /// Returns the output node and the batch mean / biased variance so the
    /// caller can update running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let xv = self.value(x);
        if xv.rows() == 0 {
            return Err(Error::precondition("batch norm over an empty batch"));
        }
        let (mean, var) = column_moments(xv);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.batch_norm_with(x, gamma, beta, &mean, inv_std, true)?;
        Ok((out, BatchStats { mean, var }))
    }

    /// Batch normalisation with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.batch_norm_with(x, gamma, beta, mean, inv_std, false)
    }

    fn batch_norm_with(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        batch_stats: bool,
    ) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let c = xv.cols();
        for (op, m) in [("batch_norm gamma", gv), ("batch_norm beta", bv)] {
            if m.shape() != (1, c) {
                return Err(Error::Shape {
                    op,
                    left: xv.shape(),
                    right: m.shape(),
                });
            }
        }
        if mean.len() != c || inv_std.len() != c {
            return Err(Error::Shape {
                op: "batch_norm stats",
                left: xv.shape(),
                right: (1, mean.len()),
            });
        }
        let (gs, bs) = (gv.as_slice(), bv.as_slice());
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - mean[j]) * inv_std[j] * gs[j] + bs[j];
            }
        }
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
                batch_stats,
            },
        ))
    }

    /// `act(dropout(batch_norm(x)))` as a single node; equivalent to
    /// chaining the separate operations, with fewer passes over the data.
    pub fn hidden_block(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        norm: BlockNorm<'_>,
        dropout: Option<(f64, &mut Rng)>,
        act: Activation,
    ) -> Result<Var> {
        if act == Activation::SoftmaxRows {
            return Err(Error::precondition(
                "hidden block needs an elementwise activation",
            ));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let (n, c) = xv.shape();
        if gv.shape() != (1, c)
            || bv.shape() != (1, c)
            || norm.mean.len() != c
            || norm.var.len() != c
        {
            return Err(Error::Shape {
                op: "hidden_block",
                left: xv.shape(),
                right: gv.shape(),
            });
        }
        let inv_std: Vec<f64> = norm
            .var
            .iter()
            .map(|v| 1.0 / (v + norm.eps).sqrt())
            .collect();
        let (kept, scale) = match dropout {
            Some((p, rng)) if p > 0.0 => {
                if p >= 1.0 {
                    return Err(Error::precondition(format!(
                        "dropout rate {p} outside [0, 1)"
                    )));
                }
                (Some(dropout_keep(n * c, p, rng)), 1.0 / (1.0 - p))
            }
            _ => (None, 1.0),
        };
        let mut out = xv.clone();
        let block = BlockConstants {
            mean: norm.mean,
            inv_std: &inv_std,
            gamma: gv.as_slice(),
            beta: bv.as_slice(),
            kept: kept.as_deref(),
            scale,
        };
        match act {
            Activation::LeakyRelu => block.apply(&mut out, leaky_relu),
            Activation::Tanh => block.apply(&mut out, tanh),
            Activation::Sigmoid => block.apply(&mut out, sigmoid),
            Activation::SoftmaxRows => unreachable!("rejected above"),
        }
        Ok(self.push(
            out,
            Op::HiddenBlock {
                x,
                gamma,
                beta,
                mean: norm.mean.to_vec(),
                inv_std,
                batch_stats: norm.batch_stats,
                kept,
                scale,
                act,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        self.push(Matrix::from_raw(1, 1, vec![total]), Op::Sum(x))
    }

    /// Class-weighted mean negative log-likelihood of row-stochastic `probs`,
    /// normalised by the sum of the applied weights.
    pub fn weighted_cross_entropy(
        &mut self,
        probs: Var,
        labels: &[usize],
        class_weights: &[f64],
    ) -> Result<Var> {
        let value = weighted_cross_entropy_value(self.value(probs), labels, class_weights)?;
        Ok(self.push(
            Matrix::from_raw(1, 1, vec![value]),
            Op::WeightedCe {
                probs,
                labels: labels.to_vec(),
                weights: class_weights.to_vec(),
            },
        ))
    }

    /// Propagates d`loss` back through the tape and overwrites the gradients
    /// in `store`. Parameters not reached by `loss` end up with zero gradient.
    pub fn backward(&mut self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        if self.consumed {
            return Err(Error::usage("backward called twice on the same tape"));
        }
        if loss.0 >= self.nodes.len() || self.value(loss).shape() != (1, 1) {
            return Err(Error::usage(
                "backward requires a scalar loss recorded on this tape",
            ));
        }
        self.consumed = true;
        store.zero_grad();

        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let wants = |v: &Var| self.nodes[v.0].needs_grad;
            let mut acc = |v: Var, d: Matrix| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => store.grad_mut(*id).add_assign(&g),
                Op::MatMul(a, b) => {
                    if wants(a) {
                        acc(*a, g.matmul_nt(&self.nodes[b.0].value)?);
                    }
                    if wants(b) {
                        acc(*b, self.nodes[a.0].value.matmul_tn(&g)?);
                    }
                }
                Op::MatMulNt(a, b) => {
                    if wants(a) {
                        acc(*a, g.matmul(&self.nodes[b.0].value)?);
                    }
                    if wants(b) {
                        acc(*b, g.matmul_tn(&self.nodes[a.0].value)?);
                    }
                }
                Op::Affine(x, w, b) => {
                    if wants(x) {
                        acc(*x, g.matmul(&self.nodes[w.0].value)?);
                    }
                    if wants(w) {
                        acc(*w, g.matmul_tn(&self.nodes[x.0].value)?);
                    }
                    if wants(b) {
                        acc(*b, column_sums(&g));
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::AddRow(x, bias) => {
                    acc(*bias, column_sums(&g));
                    acc(*x, g);
                }
                Op::ScaleRows(x, s) => {
                    let xv = &self.nodes[x.0].value;
                    let sv = &self.nodes[s.0].value;
                    let mut ds = Matrix::zeros(sv.rows(), 1);
                    let mut dx = g.clone();
                    for i in 0..g.rows() {
                        ds.as_mut_slice()[i] =
                            g.row(i).iter().zip(xv.row(i)).map(|(a, b)| a * b).sum();
                        let f = sv.as_slice()[i];
                        dx.row_mut(i).iter_mut().for_each(|v| *v *= f);
                    }
                    acc(*x, dx);
                    acc(*s, ds);
                }
                Op::ScaleCols(x, s) => {
                    let xv = &self.nodes[x.0].value;
                    let sv = &self.nodes[s.0].value;
                    let mut ds = Matrix::zeros(sv.rows(), 1);
                    let mut dx = g.clone();
                    for i in 0..g.rows() {
                        for (j, (d, gv)) in dx.row_mut(i).iter_mut().zip(g.row(i)).enumerate() {
                            ds.as_mut_slice()[j] += gv * xv[(i, j)];
                            *d *= sv.as_slice()[j];
                        }
                    }
                    acc(*x, dx);
                    acc(*s, ds);
                }
                Op::MulConst(x, mask) => acc(*x, g.zip_map(mask, |a, b| a * b)?),
                Op::Dropout { x, kept, scale } => {
                    let mut dx = g;
                    for (d, &k) in dx.as_mut_slice().iter_mut().zip(kept) {
                        *d *= scale * f64::from(u8::from(k));
                    }
                    acc(*x, dx);
                }
                Op::Scale(x, f) => acc(*x, g.map(|v| v * f)),
                Op::Act(x, kind) => {
                    let out = &node.value;
                    let dx = match kind {
                        Activation::LeakyRelu => {
                            let xv = &self.nodes[x.0].value;
                            g.zip_map(xv, |d, v| if v >= 0.0 { d } else { d * LEAKY_RELU_SLOPE })?
                        }
                        Activation::Tanh => g.zip_map(out, |d, y| d * (1.0 - y * y))?,
                        Activation::Sigmoid => g.zip_map(out, |d, y| d * y * (1.0 - y))?,
                        Activation::SoftmaxRows => {
                            let mut dx = g.clone();
                            for i in 0..g.rows() {
                                let dot: f64 =
                                    g.row(i).iter().zip(out.row(i)).map(|(a, b)| a * b).sum();
                                for (d, y) in dx.row_mut(i).iter_mut().zip(out.row(i)) {
                                    *d = y * (*d - dot);
                                }
                            }
                            dx
                        }
                    };
                    acc(*x, dx);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                    batch_stats,
                } => {
                    let xv = &self.nodes[x.0].value;

                    let gv = self.nodes[gamma.0].value.as_slice();
                    let (n, c) = g.shape();
                    let mut dgamma = Matrix::zeros(1, c);
                    let mut dbeta = Matrix::zeros(1, c);
                    for i in 0..n {
                        let (gr, xr) = (g.row(i), xv.row(i));
                        for j in 0..c {
                            let nr = (xr[j] - mean[j]) * inv_std[j];
                            dgamma.as_mut_slice()[j] += gr[j] * nr;
                            dbeta.as_mut_slice()[j] += gr[j];
                        }
                    }
                    let mut dx = g.clone();
                    if *batch_stats {
                        // dx = inv_std/n · (n·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
                        let nf = n as f64;
                        let coef: Vec<(f64, f64, f64)> = (0..c)
                            .map(|j| {
                                let gam = gv[j];
                                // γ·inv_std factors out of every term.
                                (
                                    inv_std[j] * gam,
                                    dbeta.as_slice()[j] / nf,
                                    dgamma.as_slice()[j] / nf,
                                )
                            })
                            .collect();
                        for i in 0..n {
                            let xr = xv.row(i);
                            for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                                let (scale, mean_d, mean_dx) = coef[j];
                                let nr = (xr[j] - mean[j]) * inv_std[j];
                                *d = scale * (*d - mean_d - nr * mean_dx);
                            }
                        }
                    } else {
                        for i in 0..n {
                            for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                                *d *= gv[j] * inv_std[j];
                            }
                        }
                    }
                    acc(*x, dx);
                    acc(*gamma, dgamma);
                    acc(*beta, dbeta);
                }
                Op::HiddenBlock {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                    batch_stats,
                    kept,
                    scale,
                    act,
                } => {
                    let xv = &self.nodes[x.0].value;
                    let gv = self.nodes[gamma.0].value.as_slice();
                    let (n, c) = g.shape();
                    // dz: gradient at the batch-norm output.
                    let mut dz = g;
                    let mut dgamma = Matrix::zeros(1, c);
                    let mut dbeta = Matrix::zeros(1, c);
                    let block = BlockConstants {
                        mean,
                        inv_std,
                        gamma: gv,
                        beta: &[],
                        kept: kept.as_deref(),
                        scale: *scale,
                    };
                    let sums = (dgamma.as_mut_slice(), dbeta.as_mut_slice());
                    match act {
                        Activation::LeakyRelu => {
                            block.pull_back(&mut dz, &node.value, xv, sums, |y| {
                                if y >= 0.0 {
                                    1.0
                                } else {
                                    LEAKY_RELU_SLOPE
                                }
                            })
                        }
                        Activation::Tanh => {
                            block.pull_back(&mut dz, &node.value, xv, sums, |y| 1.0 - y * y)
                        }
                        Activation::Sigmoid => {
                            block.pull_back(&mut dz, &node.value, xv, sums, |y| y * (1.0 - y))
                        }
                        Activation::SoftmaxRows => unreachable!("hidden blocks are elementwise"),
                    }
                    if wants(x) {
                        let nf = n as f64;
                        let k: Vec<f64> = (0..c).map(|j| inv_std[j] * gv[j]).collect();
                        if *batch_stats {
                            let mean_d: Vec<f64> =
                                dbeta.as_slice().iter().map(|v| v / nf).collect();
                            let mean_dx: Vec<f64> =
                                dgamma.as_slice().iter().map(|v| v / nf).collect();
                            for i in 0..n {
                                let xr = xv.row(i);
                                for (j, d) in dz.row_mut(i).iter_mut().enumerate() {
                                    let xhat = (xr[j] - mean[j]) * inv_std[j];
                                    *d = k[j] * (*d - mean_d[j] - xhat * mean_dx[j]);
                                }
                            }
                        } else {
                            for i in 0..n {
                                dz.row_mut(i)
                                    .iter_mut()
                                    .zip(&k)
                                    .for_each(|(d, kj)| *d *= kj);
                            }
                        }
                        acc(*x, dz);
                    }
                    acc(*gamma, dgamma);
                    acc(*beta, dbeta);
                }
                Op::Sum(x) => {
                    let (r, c) = self.nodes[x.0].value.shape();
                    acc(*x, Matrix::filled(r, c, g.as_slice()[0]));
                }
                Op::WeightedCe {
                    probs,
                    labels,
                    weights,
                } => {
                    let pv = &self.nodes[probs.0].value;
                    let total: f64 = labels.iter().map(|&y| weights[y]).sum();
                    let upstream = g.as_slice()[0];
                    let mut dp = Matrix::zeros(pv.rows(), pv.cols());
                    for (i, &y) in labels.iter().enumerate() {
                        let p = pv[(i, y)];
                        if p > LOG_CLAMP {
                            dp[(i, y)] = -upstream * weights[y] / (total * p);
                        }
                    }
                    acc(*probs, dp);
                }
            }
        }
        Ok(())
    }
}

/// Per-column batch-norm constants and dropout mask of a hidden block.
struct BlockConstants<'a> {
    mean: &'a [f64],
    inv_std: &'a [f64],
    gamma: &'a [f64],
    beta: &'a [f64],
    kept: Option<&'a [bool]>,
    scale: f64,
}

impl BlockConstants<'_> {
    fn apply(&self, out: &mut Matrix, f: impl Fn(f64) -> f64) {
        let c = out.cols();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                let mut z = (*v - self.mean[j]) * self.inv_std[j] * self.gamma[j] + self.beta[j];
                if let Some(kept) = self.kept {
                    z *= self.scale * f64::from(u8::from(kept[i * c + j]));
                }
                *v = f(z);
            }
        }
    }

    /// Turns the output gradient into the batch-norm output gradient in
    /// place and accumulates the γ and β gradients.
    fn pull_back(
        &self,
        dz: &mut Matrix,
        out: &Matrix,
        x: &Matrix,
        (dgamma, dbeta): (&mut [f64], &mut [f64]),
        deriv: impl Fn(f64) -> f64,
    ) {
        let c = dz.cols();
        for i in 0..dz.rows() {
            let (yr, xr) = (out.row(i), x.row(i));
            let row = dz.row_mut(i);
            for j in 0..c {
                let mut d = row[j] * deriv(yr[j]);
                if let Some(kept) = self.kept {
                    d *= self.scale * f64::from(u8::from(kept[i * c + j]));
                }
                row[j] = d;
                dgamma[j] += d * (xr[j] - self.mean[j]) * self.inv_std[j];
                dbeta[j] += d;
            }
        }
    }
}

/// Forward value of the class-weighted cross-entropy.
pub fn weighted_cross_entropy_value(
    probs: &Matrix,
    labels: &[usize],
    class_weights: &[f64],
) -> Result<f64> {
    if labels.len() != probs.rows() {
        return Err(Error::Shape {
            op: "weighted_cross_entropy",
            left: probs.shape(),
            right: (labels.len(), 1),
        });
    }
    if class_weights.len() != probs.cols() {
        return Err(Error::Shape {
            op: "weighted_cross_entropy weights",
            left: probs.shape(),
            right: (1, class_weights.len()),
        });
    }
    if labels.is_empty() {
        return Err(Error::precondition("cross-entropy of an empty batch"));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= probs.cols() {
            return Err(Error::precondition(format!(
                "label {y} at row {i} is out of range for {} classes",
                probs.cols()
            )));
        }
        let w = class_weights[y];
        num += w * -probs[(i, y)].max(LOG_CLAMP).ln();
        den += w;
    }
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradient_check;
    use crate::numerics::Rng;

    fn random(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.uniform_range(-1.0, 1.0))
    }

    #[test]
    fn sum_gives_all_ones() {
        let mut store = ParameterStore::new();
        let w = store.add(
            "w",
            Matrix::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]).unwrap(),
        );
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let loss = tape.sum(wv);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(w), &Matrix::filled(2, 2, 1.0));
    }

    #[test]
    fn masked_sum_gives_mask() {
        let mut store = ParameterStore::new();
        let value = Matrix::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]).unwrap();
        let w = store.add("w", value.clone());
        let unused = store.add("unused", Matrix::filled(1, 1, 9.0));
        store.grad_mut(unused).as_mut_slice()[0] = 4.0;
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let mask = Matrix::from_rows(&[vec![2.0, 0.0], vec![-1.0, 0.25]]).unwrap();
        let masked = tape.mul_const(wv, mask.clone()).unwrap();
        let half = tape.scale(masked, 0.5);
        let loss = tape.sum(half);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(w), &mask.map(|v| 0.5 * v));
        assert_eq!(store.grad(unused).as_slice(), &[0.0]);
    }

    #[test]
    fn second_backward_is_usage_error() {
        let mut store = ParameterStore::new();
        let w = store.add("w", Matrix::filled(1, 1, 2.0));
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let loss = tape.sum(wv);
        tape.backward(loss, &mut store).unwrap();
        assert!(matches!(
            tape.backward(loss, &mut store),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut store = ParameterStore::new();
        let w = store.add("w", Matrix::zeros(2, 2));
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        assert!(matches!(
            tape.backward(wv, &mut store),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn weighted_ce_reference_value() {
        let probs = Matrix::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        let v = weighted_cross_entropy_value(&probs, &[0, 1], &[1.0, 3.0]).unwrap();
        let expected = (-(0.9f64.ln()) - 3.0 * 0.8f64.ln()) / 4.0;
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.19369).abs() < 1e-5);
    }

    /// Every primitive, checked against central differences on random input.
    #[test]
    fn primitives_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = Rng::new(seed);
            let mut store = ParameterStore::new();
            let a = store.add("a", random(4, 3, &mut rng));
            let b = store.add("b", random(3, 5, &mut rng));
            let c = store.add("c", random(5, 3, &mut rng));
            let bias = store.add("bias", random(1, 5, &mut rng));
            let srow = store.add("srow", random(4, 1, &mut rng));
            let scol = store.add("scol", random(5, 1, &mut rng));
            let gamma = store.add("gamma", random(1, 5, &mut rng));
            let beta = store.add("beta", random(1, 5, &mut rng));
            let w2 = store.add("w2", random(3, 5, &mut rng));
            let b2 = store.add("b2", random(1, 3, &mut rng));
            let mask = random(4, 5, &mut rng);
            let labels = vec![0, 2, 1, 2];
            let weights = vec![1.0, 2.0, 0.5];
            let err = gradient_check(&mut store, 1e-5, |p, t| {
                let (a, b, c) = (t.param(p, a), t.param(p, b), t.param(p, c));
                let ab = t.matmul(a, b)?;
                let ac = t.matmul_nt(a, c)?;
                let z = t.add(ab, ac)?;
                let bias = t.param(p, bias);
                let z = t.add_row(z, bias)?;
                let sr = t.param(p, srow);
                let z = t.scale_rows(z, sr)?;
                let sc = t.param(p, scol);
                let z = t.scale_cols(z, sc)?;
                let (g, be) = (t.param(p, gamma), t.param(p, beta));
                let (z, _) = t.batch_norm_train(z, g, be, 1e-5)?;
                let z = t.mul_const(z, mask.clone())?;
                let z = t.dropout(z, 0.3, &mut Rng::new(9))?;
                let h1 = t.activation(z, Activation::LeakyRelu)?;
                let h2 = t.activation(z, Activation::Tanh)?;
                let h3 = t.activation(z, Activation::Sigmoid)?;
                let h = t.add(h1, h2)?;
                let h = t.add(h, h3)?;
                let z = t.matmul(h, c)?;
                let (w2, b2) = (t.param(p, w2), t.param(p, b2));
                let z2 = t.affine(h, w2, b2)?;
                let z = t.add(z, z2)?;
                let z = t.scale(z, 0.7);
                let probs = t.activation(z, Activation::SoftmaxRows)?;
                let ce = t.weighted_cross_entropy(probs, &labels, &weights)?;
                let sc2 = t.param(p, scol);
                let reg = t.sum(sc2);
                let reg = t.scale(reg, 0.1);
                t.add(ce, reg)
            })
            .unwrap();
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
    }

    /// The fused block must agree with the chain of separate operations.
    #[test]
    fn hidden_block_matches_separate_ops() {
        for (batch_stats, act) in [
            (true, Activation::LeakyRelu),
            (false, Activation::Tanh),
            (true, Activation::Sigmoid),
        ] {
            let mut rng = Rng::new(5);
            let mut store = ParameterStore::new();
            let x = store.add("x", random(6, 4, &mut rng));
            let gamma = store.add("gamma", random(1, 4, &mut rng));
            let beta = store.add("beta", random(1, 4, &mut rng));
            let w = random(6, 4, &mut rng);
            let running = (vec![0.1, -0.2, 0.3, 0.0], vec![1.5, 0.5, 2.0, 1.0]);
            let chained = |p: &ParameterStore, t: &mut Tape| -> Result<Var> {
                let (xv, g, b) = (t.param(p, x), t.param(p, gamma), t.param(p, beta));
                let z = if batch_stats {
                    t.batch_norm_train(xv, g, b, 1e-5)?.0
                } else {
                    t.batch_norm_eval(xv, g, b, &running.0, &running.1, 1e-5)?
                };
                let z = t.dropout(z, 0.25, &mut Rng::new(2))?;
                let z = t.activation(z, act)?;
                let z = t.mul_const(z, w.clone())?;
                Ok(t.sum(z))
            };
            let fused = |p: &ParameterStore, t: &mut Tape| -> Result<Var> {
                let (xv, g, b) = (t.param(p, x), t.param(p, gamma), t.param(p, beta));
                let (mean, var) = if batch_stats {
                    column_moments(p.value(x))
                } else {
                    running.clone()
                };
                let norm = BlockNorm {
                    mean: &mean,
                    var: &var,
                    eps: 1e-5,
                    batch_stats,
                };
                let z = t.hidden_block(xv, g, b, norm, Some((0.25, &mut Rng::new(2))), act)?;
                let z = t.mul_const(z, w.clone())?;
                Ok(t.sum(z))
            };
            let mut grads = Vec::new();
            for f in [
                &chained as &dyn Fn(&ParameterStore, &mut Tape) -> Result<Var>,
                &fused,
            ] {
                let mut t = Tape::new();
                let loss = f(&store, &mut t).unwrap();
                let value = t.scalar(loss);
                t.backward(loss, &mut store).unwrap();
                grads.push((value, [x, gamma, beta].map(|id| store.grad(id).clone())));
            }
            assert!((grads[0].0 - grads[1].0).abs() < 1e-12);
            for k in 0..3 {
                assert!(grads[0].1[k].max_abs_diff(&grads[1].1[k]).unwrap() < 1e-12);
            }
            let err = gradient_check(&mut store, 1e-5, fused).unwrap();
            assert!(err <= 1e-6, "{err}");
        }
    }

    #[test]
    fn eval_batch_norm_matches_finite_differences() {
        let mut rng = Rng::new(11);
        let mut store = ParameterStore::new();
        let x = store.add("x", random(6, 3, &mut rng));
        let gamma = store.add("gamma", random(1, 3, &mut rng));
        let beta = store.add("beta", random(1, 3, &mut rng));
        let w = random(6, 3, &mut rng);
        let err = gradient_check(&mut store, 1e-5, |p, t| {
            let (xv, g, b) = (t.param(p, x), t.param(p, gamma), t.param(p, beta));
            let y = t.batch_norm_eval(xv, g, b, &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0], 1e-5)?;
            let y = t.mul_const(y, w.clone())?;
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }
}
