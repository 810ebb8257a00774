//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Every value on the tape is a 2-D matrix; scalars are `1 × 1`. A forward pass
//! records nodes in creation order, so reverse iteration over the node list is a
//! valid topological order for the backward sweep. Nodes whose ancestors contain
//! no trainable leaf are never visited by the backward pass.

use ndarray::{s, Array1, Array2, Axis, Zip};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    CausalSoftmax {
        x: Var,
        scale: f64,
    },
    MeanRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Array2<f64>,
        count: usize,
    },
    TokenLogProb {
        logits: Var,
        targets: Vec<usize>,
        inv_temp: f64,
        probs: Array2<f64>,
    },
    BceLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    Mse {
        x: Var,
        targets: Array2<f64>,
    },
    ClippedSurrogate {
        logp: Var,
        old: Vec<f64>,
        adv: Vec<f64>,
        clip: f64,
    },
    KlK3 {
        logp: Var,
        reference: Vec<f64>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
    connected: bool,
}

impl Grads {
    /// Gradient of the loss with respect to `v`, if `v` lies on a trainable path.
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`, zeros of the given shape when unreached.
    pub fn wrt_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.wrt(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }

    /// False when the loss did not depend on any trainable leaf; every gradient is then zero.
    pub fn connected(&self) -> bool {
        self.connected
    }
}

fn softmax_row_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax of `x`.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        softmax_row_in_place(row.as_slice_mut().expect("standard layout"));
    }
    out
}

/// Row-wise log-softmax of `x`.
pub fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Layer normalization without gain/bias; returns `(xhat, inv_std)`.
pub(crate) fn normalize_rows(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let cols = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv = Array1::zeros(x.nrows());
    for (mut row, inv_std) in xhat.rows_mut().into_iter().zip(inv.iter_mut()) {
        let mean = row.sum() / cols;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
        let s = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * s);
        *inv_std = s;
    }
    (xhat, inv)
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
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

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf holding a trainable parameter.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Array2<f64>, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).dim(), self.value(b).dim());
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                va.dim(),
                vb.dim()
            )));
        }
        let out = va.dot(vb);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.ncols() {
            return Err(Error::Shape(format!(
                "matmul_t {:?} x {:?}ᵀ",
                va.dim(),
                vb.dim()
            )));
        }
        let out = va.dot(&vb.t());
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        let out = self.value(a) + self.value(b);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "sub")?;
        let out = self.value(a) - self.value(b);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Adds the `1 × c` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.nrows() != 1 || vb.ncols() != va.ncols() {
            return Err(Error::Shape(format!(
                "add_row {:?} + {:?}",
                va.dim(),
                vb.dim()
            )));
        }
        let out = va + vb;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::AddRow(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        let out = self.value(a) * self.value(b);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// Row-wise layer normalization with `1 × c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).ncols();
        for p in [gain, bias] {
            if self.value(p).dim() != (1, cols) {
                return Err(Error::Shape(format!(
                    "layer_norm parameter {:?} for width {cols}",
                    self.value(p).dim()
                )));
            }
        }
        let (xhat, inv_std) = normalize_rows(self.value(x));
        let out = &xhat * self.value(gain) + self.value(bias);
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.nrows()) {
            return Err(Error::Shape(format!(
                "gather row {bad} from table with {} rows",
                t.nrows()
            )));
        }
        let out = t.select(Axis(0), ids);
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if start + len > v.ncols() {
            return Err(Error::Shape(format!(
                "slice_cols {start}..{} of {}",
                start + len,
                v.ncols()
            )));
        }
        let out = v.slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if start + len > v.nrows() {
            return Err(Error::Shape(format!(
                "slice_rows {start}..{} of {}",
                start + len,
                v.nrows()
            )));
        }
        let out = v.slice(s![start..start + len, ..]).to_owned();
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).nrows();
        if parts.iter().any(|p| self.value(*p).nrows() != rows) {
            return Err(Error::Shape("concat_cols row mismatch".into()));
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Softmax over `scale · x` with causal masking: query row `i` sees key columns
    /// `j ≤ i + (cols − rows)`.
    pub fn causal_softmax(&mut self, x: Var, scale: f64) -> Var {
        let out = causal_softmax_value(self.value(x), scale);
        let rg = self.rg(&[x]);
        self.push(out, Op::CausalSoftmax { x, scale }, rg)
    }

    /// Column-wise mean, producing a `1 × c` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = v.mean_axis(Axis(0)).expect("nonempty").insert_axis(Axis(0));
        let rg = self.rg(&[x]);
        self.push(out, Op::MeanRows(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    /// Mean token cross-entropy; rows with `None` targets are masked out.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let l = self.value(logits);
        if l.nrows() != targets.len() {
            return Err(Error::Shape(format!(
                "cross_entropy: {} rows vs {} targets",
                l.nrows(),
                targets.len()
            )));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Empty("every target position is masked".into()));
        }
        let probs = softmax_rows(l);
        let logp = log_softmax_rows(l);
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= l.ncols() {
                    return Err(Error::Shape(format!("target {t} for {} classes", l.ncols())));
                }
                total -= logp[[i, t]];
            }
        }
        let out = Array2::from_elem((1, 1), total / count as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Per-row log-probability of `targets` under `softmax(logits / temperature)`, as a column.
    pub fn token_logprob(&mut self, logits: Var, targets: &[usize], temperature: f64) -> Result<Var> {
        let l = self.value(logits);
        if l.nrows() != targets.len() {
            return Err(Error::Shape(format!(
                "token_logprob: {} rows vs {} targets",
                l.nrows(),
                targets.len()
            )));
        }
        let inv_temp = policy_inv_temp(temperature);
        let scaled = l * inv_temp;
        let probs = softmax_rows(&scaled);
        let logp = log_softmax_rows(&scaled);
        let out = Array2::from_shape_fn((targets.len(), 1), |(i, _)| logp[[i, targets[i]]]);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::TokenLogProb {
                logits,
                targets: targets.to_vec(),
                inv_temp,
                probs,
            },
            rg,
        ))
    }

    /// Mean soft-target binary cross-entropy of `sigmoid(logits)` against `targets`.
    pub fn bce_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let l = self.value(logits);
        if l.len() != targets.len() || l.ncols() != 1 {
            return Err(Error::Shape(format!(
                "bce_logits: {:?} vs {} targets",
                l.dim(),
                targets.len()
            )));
        }
        let total: f64 = l
            .iter()
            .zip(targets)
            .map(|(&z, &f)| softplus(z) - f * z)
            .sum();
        let out = Array2::from_elem((1, 1), total / targets.len() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Mean squared error against constant targets.
    pub fn mse(&mut self, x: Var, targets: Array2<f64>) -> Result<Var> {
        let v = self.value(x);
        if v.dim() != targets.dim() {
            return Err(Error::Shape(format!(
                "mse {:?} vs {:?}",
                v.dim(),
                targets.dim()
            )));
        }
        let n = v.len() as f64;
        let total: f64 = Zip::from(v).and(&targets).fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b));
        let out = Array2::from_elem((1, 1), total / n);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Mse { x, targets }, rg))
    }

    /// Mean over tokens of `min(ρ·A, clip(ρ, 1−ε, 1+ε)·A)` with `ρ = exp(logp − old)`.
    pub fn clipped_surrogate(&mut self, logp: Var, old: &[f64], adv: &[f64], clip: f64) -> Result<Var> {
        let lp = self.value(logp);
        if lp.len() != old.len() || old.len() != adv.len() || old.is_empty() {
            return Err(Error::Shape(format!(
                "clipped_surrogate lengths {} / {} / {}",
                lp.len(),
                old.len(),
                adv.len()
            )));
        }
        let value = crate::rl::ppo_surrogate(lp.as_slice().expect("column"), old, adv, clip)?;
        let out = Array2::from_elem((1, 1), value);
        let rg = self.rg(&[logp]);
        Ok(self.push(
            out,
            Op::ClippedSurrogate {
                logp,
                old: old.to_vec(),
                adv: adv.to_vec(),
                clip,
            },
            rg,
        ))
    }

    /// Mean of the non-negative estimator `exp(r) − r − 1`, `r = reference − logp`, of KL(π ‖ π_ref).
    pub fn kl_k3(&mut self, logp: Var, reference: &[f64]) -> Result<Var> {
        let lp = self.value(logp);
        if lp.len() != reference.len() || reference.is_empty() {
            return Err(Error::Shape("kl_k3 length mismatch".into()));
        }
        let total: f64 = lp
            .iter()
            .zip(reference)
            .map(|(&l, &r)| {
                let d = r - l;
                d.exp() - d - 1.0
            })
            .sum();
        let out = Array2::from_elem((1, 1), total / reference.len() as f64);
        let rg = self.rg(&[logp]);
        Ok(self.push(
            out,
            Op::KlK3 {
                logp,
                reference: reference.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<f64>>> = (0..n).map(|_| None).collect();
        let connected = self.nodes[loss.0].requires_grad;
        if !connected {
            return Grads { grads, connected };
        }
        grads[loss.0] = Some(Array2::ones(self.nodes[loss.0].value.dim()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads, connected }
    }

    fn propagate(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[idx];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if rg(*a) {
                    accumulate(&mut grads[a.0], g.dot(&self.value(*b).t()));
                }
                if rg(*b) {
                    accumulate(&mut grads[b.0], self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if rg(*a) {
                    accumulate(&mut grads[a.0], g.dot(self.value(*b)));
                }
                if rg(*b) {
                    accumulate(&mut grads[b.0], g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if rg(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if rg(*b) {
                    accumulate(&mut grads[b.0], -g);
                }
            }
            Op::AddRow(a, b) => {
                if rg(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if rg(*b) {
                    accumulate(&mut grads[b.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    accumulate(&mut grads[a.0], g * self.value(*b));
                }
                if rg(*b) {
                    accumulate(&mut grads[b.0], g * self.value(*a));
                }
            }
            Op::Scale(a, c) => accumulate(&mut grads[a.0], g * *c),
            Op::Gelu(a) => {
                let mut d = self.value(*a).mapv(gelu_grad);
                d *= g;
                accumulate(&mut grads[a.0], d);
            }
            Op::Tanh(a) => {
                let mut d = node.value.mapv(|y| 1.0 - y * y);
                d *= g;
                accumulate(&mut grads[a.0], d);
            }
            Op::Sigmoid(a) => {
                let mut d = node.value.mapv(|y| y * (1.0 - y));
                d *= g;
                accumulate(&mut grads[a.0], d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                if rg(*gain) {
                    accumulate(
                        &mut grads[gain.0],
                        (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                }
                if rg(*bias) {
                    accumulate(&mut grads[bias.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if rg(*x) {
                    let dxhat = g * self.value(*gain);
                    let cols = xhat.ncols() as f64;
                    let mut dx = Array2::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let h = xhat.row(r);
                        let m1 = dh.sum() / cols;
                        let m2 = dh.dot(&h) / cols;
                        let s = inv_std[r];
                        for c in 0..xhat.ncols() {
                            dx[[r, c]] = s * (dh[c] - m1 - h[c] * m2);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let mut d = Array2::zeros(t.dim());
                for (r, &id) in ids.iter().enumerate() {
                    let mut row = d.row_mut(id);
                    row += &g.row(r);
                }
                accumulate(&mut grads[table.0], d);
            }
            Op::SliceCols { x, start } => {
                let mut d = Array2::zeros(self.value(*x).dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                accumulate(&mut grads[x.0], d);
            }
            Op::SliceRows { x, start } => {
                let mut d = Array2::zeros(self.value(*x).dim());
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                accumulate(&mut grads[x.0], d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    if rg(*p) {
                        accumulate(&mut grads[p.0], g.slice(s![.., offset..offset + w]).to_owned());
                    }
                    offset += w;
                }
            }
            Op::CausalSoftmax { x, scale } => {
                let p = &node.value;
                let mut d = p * g;
                for (mut drow, prow) in d.rows_mut().into_iter().zip(p.rows()) {
                    let dot: f64 = drow.sum();
                    // drow currently holds p ⊙ g; subtract p · Σ(p ⊙ g)
                    Zip::from(&mut drow).and(&prow).for_each(|dv, &pv| *dv -= pv * dot);
                }
                d *= *scale;
                accumulate(&mut grads[x.0], d);
            }
            Op::MeanRows(x) => {
                let v = self.value(*x);
                let n = v.nrows() as f64;
                let row = g.row(0).mapv(|e| e / n);
                let d = Array2::from_shape_fn(v.dim(), |(_, c)| row[c]);
                accumulate(&mut grads[x.0], d);
            }
            Op::Sum(x) => {
                let d = Array2::from_elem(self.value(*x).dim(), g[[0, 0]]);
                accumulate(&mut grads[x.0], d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let scale = g[[0, 0]] / *count as f64;
                let mut d = Array2::zeros(probs.dim());
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let mut row = d.row_mut(i);
                        row.assign(&probs.row(i));
                        row[t] -= 1.0;
                        row *= scale;
                    }
                }
                accumulate(&mut grads[logits.0], d);
            }
            Op::TokenLogProb {
                logits,
                targets,
                inv_temp,
                probs,
            } => {
                let mut d = Array2::zeros(probs.dim());
                for (i, &t) in targets.iter().enumerate() {
                    let gi = g[[i, 0]] * inv_temp;
                    let mut row = d.row_mut(i);
                    row.assign(&probs.row(i));
                    row *= -gi;
                    row[t] += gi;
                }
                accumulate(&mut grads[logits.0], d);
            }
            Op::BceLogits { logits, targets } => {
                let n = targets.len() as f64;
                let l = self.value(*logits);
                let d = Array2::from_shape_fn(l.dim(), |(i, _)| {
                    g[[0, 0]] * (sigmoid(l[[i, 0]]) - targets[i]) / n
                });
                accumulate(&mut grads[logits.0], d);
            }
            Op::Mse { x, targets } => {
                let n = targets.len() as f64;
                let d = (self.value(*x) - targets) * (2.0 * g[[0, 0]] / n);
                accumulate(&mut grads[x.0], d);
            }
            Op::ClippedSurrogate {
                logp,
                old,
                adv,
                clip,
            } => {
                let lp = self.value(*logp);
                let n = old.len() as f64;
                let d = Array2::from_shape_fn(lp.dim(), |(i, j)| {
                    let k = i * lp.ncols() + j;
                    let ratio = (lp[[i, j]] - old[k]).exp();
                    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
                    // d/dlogp of the unclipped branch is ratio·A; the clipped branch is flat
                    // outside the trust region.
                    let unclipped_active =
                        ratio * adv[k] <= clipped * adv[k] || (ratio - clipped).abs() == 0.0;
                    if unclipped_active {
                        g[[0, 0]] * ratio * adv[k] / n
                    } else {
                        0.0
                    }
                });
                accumulate(&mut grads[logp.0], d);
            }
            Op::KlK3 { logp, reference } => {
                let lp = self.value(*logp);
                let n = reference.len() as f64;
                let d = Array2::from_shape_fn(lp.dim(), |(i, j)| {
                    let k = i * lp.ncols() + j;
                    let r = reference[k] - lp[[i, j]];
                    g[[0, 0]] * (1.0 - r.exp()) / n
                });
                accumulate(&mut grads[logp.0], d);
            }
        }
    }
}

/// `1/temperature` for a policy at `temperature`; temperature 0 scores under the raw logits.
pub(crate) fn policy_inv_temp(temperature: f64) -> f64 {
    if temperature > 0.0 {
        1.0 / temperature
    } else {
        1.0
    }
}

pub(crate) fn causal_softmax_value(x: &Array2<f64>, scale: f64) -> Array2<f64> {
    let (rows, cols) = x.dim();
    let offset = cols - rows;
    let mut out = Array2::zeros((rows, cols));
    for i in 0..rows {
        let visible = (i + offset + 1).min(cols);
        let mut buf: Vec<f64> = x.row(i).iter().take(visible).map(|v| v * scale).collect();
        softmax_row_in_place(&mut buf);
        for (j, p) in buf.into_iter().enumerate() {
            out[[i, j]] = p;
        }
    }
    out
}

/// Named collection of parameter matrices in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Array2<f64>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &Array2<f64> {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Array2<f64> {
        &mut self.values[i]
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Places every parameter on the tape.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|v| tape.leaf(v.clone(), trainable))
            .collect()
    }

    /// Gradients for `bound` (as returned by [`ParamSet::bind`]), zeros where unreached.
    pub fn collect_grads(&self, grads: &Grads, bound: &[Var]) -> Vec<Array2<f64>> {
        bound
            .iter()
            .zip(&self.values)
            .map(|(v, p)| grads.wrt_or_zeros(*v, p.dim()))
            .collect()
    }

    /// Flat scalar view used by finite-difference checks.
    pub fn scalar(&self, flat: usize) -> f64 {
        let (i, j) = self.locate(flat);
        self.values[i].as_slice().expect("standard layout")[j]
    }

    pub fn set_scalar(&mut self, flat: usize, value: f64) {
        let (i, j) = self.locate(flat);
        self.values[i].as_slice_mut().expect("standard layout")[j] = value;
    }

    fn locate(&self, mut flat: usize) -> (usize, usize) {
        for (i, v) in self.values.iter().enumerate() {
            if flat < v.len() {
                return (i, flat);
            }
            flat -= v.len();
        }
        panic!("flat index out of range");
    }
}

/// Flattens per-parameter gradients in [`ParamSet`] order.
pub fn flatten(grads: &[Array2<f64>]) -> Vec<f64> {
    grads
        .iter()
        .flat_map(|g| g.iter().cloned().collect::<Vec<_>>())
        .collect()
}

/// Central finite difference of `f` at flat coordinate `coord` of `params`.
pub fn central_difference(
    params: &mut ParamSet,
    coord: usize,
    step: f64,
    mut f: impl FnMut(&ParamSet) -> f64,
) -> f64 {
    let orig = params.scalar(coord);
    params.set_scalar(coord, orig + step);
    let plus = f(params);
    params.set_scalar(coord, orig - step);
    let minus = f(params);
    params.set_scalar(coord, orig);
    (plus - minus) / (2.0 * step)
}

/// Relative error between an analytic and a numeric derivative. The denominator is
/// floored at `1e-6` so coordinates with vanishing gradients are judged on absolute error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}
