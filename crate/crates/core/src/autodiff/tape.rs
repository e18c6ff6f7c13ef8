use super::error::AdError;
use super::math::{
    col2im_acc, conv_out_dim, im2col, matmul, matmul_abt_acc, matmul_acc, matmul_atb_acc,
};
use super::PROB_EPS;

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// One recorded operation. Each variant stores whatever forward context its
/// backward rule needs; parent ids always precede the node itself, so the
/// tape is topologically ordered by construction.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        c: f64,
    },
    /// `[n,k] + [k]`, bias broadcast over rows.
    AddRowBias {
        x: NodeId,
        bias: NodeId,
    },
    /// `[n,c,h,w] + [c]`, bias broadcast over each channel plane.
    AddChannelBias {
        x: NodeId,
        bias: NodeId,
    },
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    MaxPool2d {
        x: NodeId,
        size: usize,
        stride: usize,
        argmax: Vec<usize>,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    Sum {
        x: NodeId,
    },
    Mean {
        x: NodeId,
    },
    /// Pick `indices` out of the flattened parent.
    Gather {
        x: NodeId,
        indices: Vec<usize>,
    },
    /// Stack equal-length flat parents into a `[rows.len(), row_len]` matrix.
    ConcatRows {
        rows: Vec<NodeId>,
        row_len: usize,
    },
    /// Identity forward; backward multiplies the upstream gradient by
    /// `-coefficient` before it reaches the parent.
    GradReverse {
        x: NodeId,
        coefficient: f64,
    },
    /// Identity forward; no gradient flows to the parent.
    Detach {
        x: NodeId,
    },
    /// Scalar `-sum(d*ln(p) + (1-d)*ln(1-p))` with `p` clamped to
    /// `[PROB_EPS, 1-PROB_EPS]` before the logs.
    Bce {
        pred: NodeId,
        label: NodeId,
    },
    /// As `Bce` but against plain-data labels with a per-element mask.
    BceMasked {
        pred: NodeId,
        labels: Vec<f64>,
        mask: Vec<f64>,
    },
    /// Scalar sum of 0.5*x^2 (|x|<1) else |x|-0.5 over x = pred - target.
    SmoothL1 {
        pred: NodeId,
        target: NodeId,
    },
    /// Scalar sum over rows of `logsumexp(row) - row[class]`; softmax
    /// probabilities are saved at forward time for the backward rule.
    SoftmaxCrossEntropy {
        logits: NodeId,
        classes: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// How `grad_reverse` is realized on a tape.
///
/// `Reverse` is the production behaviour. The other two modes exist for
/// finite-difference oracles. A reversal is not the true derivative of its
/// forward pass, so numeric differentiation needs two auxiliary evaluations:
/// `Identity` passes gradients through unscaled, and `Replay` substitutes
/// reversal inputs with previously recorded baseline values so the branch is
/// genuinely constant under perturbation. The reversed gradient of a loss
/// then equals `(1+c)*FD(Replay) - c*FD(Identity)` for every parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GrlMode {
    #[default]
    Reverse,
    Identity,
    Replay,
}

/// Ordered record of executed operations plus their values and gradients.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grl_mode: GrlMode,
    grl_record: bool,
    grl_recorded: Vec<Vec<f64>>,
    grl_replay: Vec<Vec<f64>>,
    grl_replay_next: usize,
}

fn bce_elem(p: f64, d: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(d * p.ln() + (1.0 - d) * (1.0 - p).ln())
}

/// d/dp of `bce_elem`; zero where the clamp is active.
fn bce_dpred(p: f64, d: f64) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        return 0.0;
    }
    (p - d) / (p * (1.0 - p))
}

fn bce_dlabel(p: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(p.ln() - (1.0 - p).ln())
}

fn smooth_l1_elem(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_deriv(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    /// Forward value of a scalar node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].values.len(), 1);
        self.nodes[id.0].values[0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, shape: &[usize], values: &[f64], requires_grad: bool) -> NodeId {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        self.push(shape.to_vec(), values.to_vec(), requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, shape: &[usize], values: &[f64]) -> NodeId {
        self.leaf(shape, values, false)
    }

    pub fn scalar_constant(&mut self, v: f64) -> NodeId {
        self.leaf(&[1], &[v], false)
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Op) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            shape,
            values,
            requires_grad,
            grad: None,
            op,
        });
        id
    }

    fn push_checked(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        values: Vec<f64>,
        requires_grad: bool,
        op: Op,
    ) -> Result<NodeId, AdError> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(AdError::NonFinite { op: op_name });
        }
        Ok(self.push(shape, values, requires_grad, op))
    }

    fn same_shape(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(), AdError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(AdError::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.same_shape("add", a, b)?;
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push_checked("add", self.nodes[a.0].shape.clone(), values, rg, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.same_shape("sub", a, b)?;
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push_checked("sub", self.nodes[a.0].shape.clone(), values, rg, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.same_shape("mul", a, b)?;
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push_checked("mul", self.nodes[a.0].shape.clone(), values, rg, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, AdError> {
        let values: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x * c).collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked("scale", self.nodes[a.0].shape.clone(), values, rg, Op::Scale { a, c })
    }

    /// `[n,k] + [k]` row-broadcast bias.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, AdError> {
        let xs = self.nodes[x.0].shape.clone();
        let bs = self.nodes[bias.0].shape.clone();
        if xs.len() != 2 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(AdError::ShapeMismatch {
                op: "add_row_bias",
                lhs: xs,
                rhs: bs,
            });
        }
        let k = xs[1];
        let bvals = &self.nodes[bias.0].values;
        let values: Vec<f64> = self.nodes[x.0]
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| v + bvals[i % k])
            .collect();
        let rg = self.nodes[x.0].requires_grad || self.nodes[bias.0].requires_grad;
        self.push_checked("add_row_bias", xs, values, rg, Op::AddRowBias { x, bias })
    }

    /// `[n,c,h,w] + [c]` channel-broadcast bias.
    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, AdError> {
        let xs = self.nodes[x.0].shape.clone();
        let bs = self.nodes[bias.0].shape.clone();
        if xs.len() != 4 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(AdError::ShapeMismatch {
                op: "add_channel_bias",
                lhs: xs,
                rhs: bs,
            });
        }
        let (c, hw) = (xs[1], xs[2] * xs[3]);
        let bvals = &self.nodes[bias.0].values;
        let values: Vec<f64> = self.nodes[x.0]
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| v + bvals[(i / hw) % c])
            .collect();
        let rg = self.nodes[x.0].requires_grad || self.nodes[bias.0].requires_grad;
        self.push_checked("add_channel_bias", xs, values, rg, Op::AddChannelBias { x, bias })
    }

    /// `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let values = matmul(&self.nodes[a.0].values, &self.nodes[b.0].values, m, k, n);
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push_checked("matmul", vec![m, n], values, rg, Op::Matmul { a, b })
    }

    /// Cross-correlation of `x: [n,cin,h,w]` with `w: [cout,cin,kh,kw]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, AdError> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(AdError::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        if stride == 0 {
            return Err(AdError::InvalidArgument {
                op: "conv2d",
                msg: "stride must be positive".into(),
            });
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < ws[2] || wd + 2 * pad < ws[3] {
            return Err(AdError::InvalidArgument {
                op: "conv2d",
                msg: format!("kernel {}x{} larger than padded input {}x{}", kh, kw, h + 2 * pad, wd + 2 * pad),
            });
        }
        let oh = conv_out_dim(h, kh, stride, pad);
        let ow = conv_out_dim(wd, kw, stride, pad);
        let ck = cin * kh * kw;
        let mut values = vec![0.0; n * cout * oh * ow];
        for s in 0..n {
            let xs_slice = &self.nodes[x.0].values[s * cin * h * wd..(s + 1) * cin * h * wd];
            let col = im2col(xs_slice, cin, h, wd, kh, kw, stride, pad);
            let out = &mut values[s * cout * oh * ow..(s + 1) * cout * oh * ow];
            matmul_acc(&self.nodes[w.0].values, &col, out, cout, ck, oh * ow);
        }
        let rg = self.nodes[x.0].requires_grad || self.nodes[w.0].requires_grad;
        self.push_checked(
            "conv2d",
            vec![n, cout, oh, ow],
            values,
            rg,
            Op::Conv2d { x, w, stride, pad },
        )
    }

    /// Max pooling over `[n,c,h,w]` with square window `size` and `stride`.
    pub fn max_pool2d(&mut self, x: NodeId, size: usize, stride: usize) -> Result<NodeId, AdError> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 4 {
            return Err(AdError::InvalidArgument {
                op: "max_pool2d",
                msg: format!("expected 4-d input, got {:?}", xs),
            });
        }
        if size == 0 || stride == 0 || xs[2] < size || xs[3] < size {
            return Err(AdError::InvalidArgument {
                op: "max_pool2d",
                msg: "window must be positive and fit inside the input".into(),
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let oh = (h - size) / stride + 1;
        let ow = (w - size) / stride + 1;
        let src = &self.nodes[x.0].values;
        let mut values = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; n * c * oh * ow];
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for ky in 0..size {
                        for kx in 0..size {
                            let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                            if src[idx] > best {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = plane * oh * ow + oy * ow + ox;
                    values[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push_checked(
            "max_pool2d",
            vec![n, c, oh, ow],
            values,
            rg,
            Op::MaxPool2d { x, size, stride, argmax },
        )
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        let values: Vec<f64> = self.nodes[x.0].values.iter().map(|v| v.max(0.0)).collect();
        let rg = self.nodes[x.0].requires_grad;
        self.push_checked("relu", self.nodes[x.0].shape.clone(), values, rg, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        let values: Vec<f64> = self.nodes[x.0]
            .values
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let rg = self.nodes[x.0].requires_grad;
        self.push_checked("sigmoid", self.nodes[x.0].shape.clone(), values, rg, Op::Sigmoid { x })
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, AdError> {
        if shape.iter().product::<usize>() != self.nodes[x.0].values.len() {
            return Err(AdError::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let values = self.nodes[x.0].values.clone();
        let rg = self.nodes[x.0].requires_grad;
        self.push_checked("reshape", shape.to_vec(), values, rg, Op::Reshape { x })
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        let total: f64 = self.nodes[x.0].values.iter().sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push_checked("sum", vec![1], vec![total], rg, Op::Sum { x })
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        let n = self.nodes[x.0].values.len();
        if n == 0 {
            return Err(AdError::InvalidArgument {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let total: f64 = self.nodes[x.0].values.iter().sum::<f64>() / n as f64;
        let rg = self.nodes[x.0].requires_grad;
        self.push_checked("mean", vec![1], vec![total], rg, Op::Mean { x })
    }

    /// Select `indices` out of the flattened parent into a `[len]` vector.
    pub fn gather(&mut self, x: NodeId, indices: Vec<usize>) -> Result<NodeId, AdError> {
        let n = self.nodes[x.0].values.len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(AdError::InvalidArgument {
                op: "gather",
                msg: format!("index {} out of bounds for length {}", bad, n),
            });
        }
        let values: Vec<f64> = indices.iter().map(|&i| self.nodes[x.0].values[i]).collect();
        let rg = self.nodes[x.0].requires_grad;
        let len = indices.len();
        self.push_checked("gather", vec![len], values, rg, Op::Gather { x, indices })
    }

    /// Stack equal-length flat nodes into a `[rows, row_len]` matrix.
    pub fn concat_rows(&mut self, rows: &[NodeId]) -> Result<NodeId, AdError> {
        if rows.is_empty() {
            return Err(AdError::InvalidArgument {
                op: "concat_rows",
                msg: "need at least one row".into(),
            });
        }
        let row_len = self.nodes[rows[0].0].values.len();
        let mut values = Vec::with_capacity(rows.len() * row_len);
        let mut rg = false;
        for &r in rows {
            if self.nodes[r.0].values.len() != row_len {
                return Err(AdError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![row_len],
                    rhs: self.nodes[r.0].shape.clone(),
                });
            }
            values.extend_from_slice(&self.nodes[r.0].values);
            rg |= self.nodes[r.0].requires_grad;
        }
        self.push_checked(
            "concat_rows",
            vec![rows.len(), row_len],
            values,
            rg,
            Op::ConcatRows { rows: rows.to_vec(), row_len },
        )
    }

    /// Gradient reversal: identity forward; the upstream gradient is
    /// multiplied by `-coefficient` on the way down.
    pub fn grad_reverse(&mut self, x: NodeId, coefficient: f64) -> Result<NodeId, AdError> {
        if !(coefficient > 0.0) {
            return Err(AdError::NonPositiveCoefficient(coefficient));
        }
        if self.grl_record {
            self.grl_recorded.push(self.nodes[x.0].values.clone());
        }
        match self.grl_mode {
            GrlMode::Reverse => {
                let values = self.nodes[x.0].values.clone();
                let rg = self.nodes[x.0].requires_grad;
                self.push_checked(
                    "grad_reverse",
                    self.nodes[x.0].shape.clone(),
                    values,
                    rg,
                    Op::GradReverse { x, coefficient },
                )
            }
            GrlMode::Identity => self.scale(x, 1.0),
            GrlMode::Replay => {
                let i = self.grl_replay_next;
                if i >= self.grl_replay.len() {
                    return Err(AdError::InvalidArgument {
                        op: "grad_reverse",
                        msg: "replay mode exhausted its recorded values".into(),
                    });
                }
                self.grl_replay_next += 1;
                let frozen = self.grl_replay[i].clone();
                if frozen.len() != self.nodes[x.0].values.len() {
                    return Err(AdError::InvalidArgument {
                        op: "grad_reverse",
                        msg: "recorded value length does not match reversal input".into(),
                    });
                }
                let shape = self.nodes[x.0].shape.clone();
                Ok(self.push(shape, frozen, false, Op::Leaf))
            }
        }
    }

    /// See [`GrlMode`]; production graphs leave the default in place.
    pub fn set_grl_mode(&mut self, mode: GrlMode) {
        self.grl_mode = mode;
    }

    /// Record the input values of every `grad_reverse` call, in call order,
    /// for later use with [`GrlMode::Replay`].
    pub fn record_grl_inputs(&mut self, on: bool) {
        self.grl_record = on;
    }

    pub fn recorded_grl_inputs(&self) -> &[Vec<f64>] {
        &self.grl_recorded
    }

    /// Provide the frozen values consumed, in call order, by
    /// [`GrlMode::Replay`].
    pub fn preload_grl_inputs(&mut self, values: Vec<Vec<f64>>) {
        self.grl_replay = values;
        self.grl_replay_next = 0;
    }

    /// Identity forward with the gradient path severed.
    pub fn detach(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        let values = self.nodes[x.0].values.clone();
        self.push_checked(
            "detach",
            self.nodes[x.0].shape.clone(),
            values,
            false,
            Op::Detach { x },
        )
    }

    /// Summed binary cross-entropy of probabilities against labels.
    pub fn binary_cross_entropy(&mut self, pred: NodeId, label: NodeId) -> Result<NodeId, AdError> {
        self.same_shape("binary_cross_entropy", pred, label)?;
        let total: f64 = self.nodes[pred.0]
            .values
            .iter()
            .zip(&self.nodes[label.0].values)
            .map(|(&p, &d)| bce_elem(p, d))
            .sum();
        let rg = self.nodes[pred.0].requires_grad || self.nodes[label.0].requires_grad;
        self.push_checked("binary_cross_entropy", vec![1], vec![total], rg, Op::Bce { pred, label })
    }

    /// Summed per-element BCE against plain-data labels, weighted by `mask`.
    /// Masked-out elements contribute neither loss nor gradient.
    pub fn bce_masked(
        &mut self,
        pred: NodeId,
        labels: Vec<f64>,
        mask: Vec<f64>,
    ) -> Result<NodeId, AdError> {
        let n = self.nodes[pred.0].values.len();
        if labels.len() != n || mask.len() != n {
            return Err(AdError::ShapeMismatch {
                op: "bce_masked",
                lhs: vec![n],
                rhs: vec![labels.len(), mask.len()],
            });
        }
        let total: f64 = self.nodes[pred.0]
            .values
            .iter()
            .zip(labels.iter().zip(mask.iter()))
            .map(|(&p, (&d, &m))| if m == 0.0 { 0.0 } else { m * bce_elem(p, d) })
            .sum();
        let rg = self.nodes[pred.0].requires_grad;
        self.push_checked("bce_masked", vec![1], vec![total], rg, Op::BceMasked { pred, labels, mask })
    }

    /// Summed smooth-L1 of `pred - target`.
    pub fn smooth_l1(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId, AdError> {
        self.same_shape("smooth_l1", pred, target)?;
        let total: f64 = self.nodes[pred.0]
            .values
            .iter()
            .zip(&self.nodes[target.0].values)
            .map(|(&p, &t)| smooth_l1_elem(p - t))
            .sum();
        let rg = self.nodes[pred.0].requires_grad || self.nodes[target.0].requires_grad;
        self.push_checked("smooth_l1", vec![1], vec![total], rg, Op::SmoothL1 { pred, target })
    }

    /// Summed softmax cross-entropy of `[n,k]` logits against class indices.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        classes: &[usize],
    ) -> Result<NodeId, AdError> {
        let shape = self.nodes[logits.0].shape.clone();
        if shape.len() != 2 || shape[0] != classes.len() {
            return Err(AdError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: shape,
                rhs: vec![classes.len()],
            });
        }
        let (n, k) = (shape[0], shape[1]);
        if let Some(&bad) = classes.iter().find(|&&c| c >= k) {
            return Err(AdError::InvalidArgument {
                op: "softmax_cross_entropy",
                msg: format!("class {} out of range for {} logits", bad, k),
            });
        }
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for i in 0..n {
            let row = &self.nodes[logits.0].values[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &z in row {
                denom += (z - max).exp();
            }
            let lse = max + denom.ln();
            total += lse - row[classes[i]];
            for (j, &z) in row.iter().enumerate() {
                probs[i * k + j] = (z - lse).exp();
            }
        }
        let rg = self.nodes[logits.0].requires_grad;
        self.push_checked(
            "softmax_cross_entropy",
            vec![1],
            vec![total],
            rg,
            Op::SoftmaxCrossEntropy { logits, classes: classes.to_vec(), probs },
        )
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate additively into
    /// every node reachable through grad-requiring edges; each reachable node
    /// is visited exactly once.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), AdError> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(AdError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }

        // Mark nodes reachable from the loss through grad-requiring parents.
        let mut reachable = vec![false; self.nodes.len()];
        let mut stack = vec![loss.0];
        reachable[loss.0] = true;
        while let Some(i) = stack.pop() {
            let mut visit = |p: NodeId, reachable: &mut Vec<bool>, stack: &mut Vec<usize>| {
                if self.nodes[p.0].requires_grad && !reachable[p.0] {
                    reachable[p.0] = true;
                    stack.push(p.0);
                }
            };
            match &self.nodes[i].op {
                Op::Leaf | Op::Detach { .. } => {}
                Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } | Op::Matmul { a, b } => {
                    visit(*a, &mut reachable, &mut stack);
                    visit(*b, &mut reachable, &mut stack);
                }
                Op::Scale { a, .. } => visit(*a, &mut reachable, &mut stack),
                Op::AddRowBias { x, bias } | Op::AddChannelBias { x, bias } => {
                    visit(*x, &mut reachable, &mut stack);
                    visit(*bias, &mut reachable, &mut stack);
                }
                Op::Conv2d { x, w, .. } => {
                    visit(*x, &mut reachable, &mut stack);
                    visit(*w, &mut reachable, &mut stack);
                }
                Op::MaxPool2d { x, .. }
                | Op::Relu { x }
                | Op::Sigmoid { x }
                | Op::Reshape { x }
                | Op::Sum { x }
                | Op::Mean { x }
                | Op::Gather { x, .. }
                | Op::GradReverse { x, .. } => visit(*x, &mut reachable, &mut stack),
                Op::ConcatRows { rows, .. } => {
                    for &r in rows {
                        visit(r, &mut reachable, &mut stack);
                    }
                }
                Op::Bce { pred, label } => {
                    visit(*pred, &mut reachable, &mut stack);
                    visit(*label, &mut reachable, &mut stack);
                }
                Op::BceMasked { pred, .. } => visit(*pred, &mut reachable, &mut stack),
                Op::SmoothL1 { pred, target } => {
                    visit(*pred, &mut reachable, &mut stack);
                    visit(*target, &mut reachable, &mut stack);
                }
                Op::SoftmaxCrossEntropy { logits, .. } => visit(*logits, &mut reachable, &mut stack),
            }
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if reachable[i] && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.values.len()]);
            }
        }
        if let Some(g) = self.nodes[loss.0].grad.as_mut() {
            g[0] += 1.0;
        }

        for i in (0..self.nodes.len()).rev() {
            if !reachable[i] {
                continue;
            }
            self.backprop_node(i)?;
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize) -> Result<(), AdError> {
        // Take the node's gradient out to satisfy the borrow checker while
        // we mutate the parents' gradients.
        let g = match self.nodes[i].grad.take() {
            Some(g) => g,
            None => return Ok(()),
        };
        let op = self.nodes[i].op.clone();
        match &op {
            Op::Leaf | Op::Detach { .. } => {}
            Op::Add { a, b } => {
                self.acc_grad(*a, |dst| {
                    for (d, gv) in dst.iter_mut().zip(&g) {
                        *d += gv;
                    }
                });
                self.acc_grad(*b, |dst| {
                    for (d, gv) in dst.iter_mut().zip(&g) {
                        *d += gv;
                    }
                });
            }
            Op::Sub { a, b } => {
                self.acc_grad(*a, |dst| {
                    for (d, gv) in dst.iter_mut().zip(&g) {
                        *d += gv;
                    }
                });
                self.acc_grad(*b, |dst| {
                    for (d, gv) in dst.iter_mut().zip(&g) {
                        *d -= gv;
                    }
                });
            }
            Op::Mul { a, b } => {
                let av = self.nodes[a.0].values.clone();
                let bv = self.nodes[b.0].values.clone();
                self.acc_grad(*a, |dst| {
                    for ((d, gv), bvv) in dst.iter_mut().zip(&g).zip(&bv) {
                        *d += gv * bvv;
                    }
                });
                self.acc_grad(*b, |dst| {
                    for ((d, gv), avv) in dst.iter_mut().zip(&g).zip(&av) {
                        *d += gv * avv;
                    }
                });
            }
            Op::Scale { a, c } => {
                let c = *c;
                self.acc_grad(*a, |dst| {
                    for (d, gv) in dst.iter_mut().zip(&g) {
                        *d += c * gv;
                    }
                });
            }
            Op::AddRowBias { x, bias } => {
                let k = self.nodes[bias.0].values.len();
                self.acc_grad(*x, |dst| {
                    for (d, gv) in dst.iter_mut().zip(&g) {
                        *d += gv;
                    }
                });
                self.acc_grad(*bias, |dst| {
                    for (i, gv) in g.iter().enumerate() {
                        dst[i % k] += gv;
                    }
                });
            }
            Op::AddChannelBias { x, bias } => {
                let xs = self.nodes[x.0].shape.clone();
                let (c, hw) = (xs[1], xs[2] * xs[3]);
                self.acc_grad(*x, |dst| {
                    for (d, gv) in dst.iter_mut().zip(&g) {
                        *d += gv;
                    }
                });
                self.acc_grad(*bias, |dst| {
                    for (i, gv) in g.iter().enumerate() {
                        dst[(i / hw) % c] += gv;
                    }
                });
            }
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let av = self.nodes[a.0].values.clone();
                let bv = self.nodes[b.0].values.clone();
                self.acc_grad(*a, |dst| matmul_abt_acc(&g, &bv, dst, m, k, n));
                self.acc_grad(*b, |dst| matmul_atb_acc(&av, &g, dst, m, k, n));
            }
            Op::Conv2d { x, w, stride, pad } => {
                let xs = self.nodes[x.0].shape.clone();
                let ws = self.nodes[w.0].shape.clone();
                let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
                let oh = conv_out_dim(h, kh, *stride, *pad);
                let ow = conv_out_dim(wd, kw, *stride, *pad);
                let ck = cin * kh * kw;
                let xv = self.nodes[x.0].values.clone();
                let wv = self.nodes[w.0].values.clone();
                let x_rg = self.nodes[x.0].grad.is_some();
                let w_rg = self.nodes[w.0].grad.is_some();
                let mut dw = vec![0.0; wv.len()];
                let mut dx = vec![0.0; xv.len()];
                for s in 0..n {
                    let g_s = &g[s * cout * oh * ow..(s + 1) * cout * oh * ow];
                    if w_rg {
                        let col = im2col(
                            &xv[s * cin * h * wd..(s + 1) * cin * h * wd],
                            cin, h, wd, kh, kw, *stride, *pad,
                        );
                        // dW += G · colᵀ
                        matmul_abt_acc(g_s, &col, &mut dw, cout, ck, oh * ow);
                    }
                    if x_rg {
                        // dcol = Wᵀ · G, folded back onto the input
                        let mut dcol = vec![0.0; ck * oh * ow];
                        matmul_atb_acc(&wv, g_s, &mut dcol, cout, ck, oh * ow);
                        col2im_acc(
                            &dcol,
                            &mut dx[s * cin * h * wd..(s + 1) * cin * h * wd],
                            cin, h, wd, kh, kw, *stride, *pad,
                        );
                    }
                }
                if w_rg {
                    self.acc_grad(*w, |dst| {
                        for (d, v) in dst.iter_mut().zip(&dw) {
                            *d += v;
                        }
                    });
                }
                if x_rg {
                    self.acc_grad(*x, |dst| {
                        for (d, v) in dst.iter_mut().zip(&dx) {
                            *d += v;
                        }
                    });
                }
            }
            Op::MaxPool2d { x, argmax, .. } => {
                self.acc_grad(*x, |dst| {
                    for (o, &src_idx) in argmax.iter().enumerate() {
                        dst[src_idx] += g[o];
                    }
                });
            }
            Op::Relu { x } => {
                let xv = self.nodes[x.0].values.clone();
                self.acc_grad(*x, |dst| {
                    for ((d, gv), xvv) in dst.iter_mut().zip(&g).zip(&xv) {
                        if *xvv > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Sigmoid { x } => {
                let yv = self.nodes[i].values.clone();
                self.acc_grad(*x, |dst| {
                    for ((d, gv), y) in dst.iter_mut().zip(&g).zip(&yv) {
                        *d += gv * y * (1.0 - y);
                    }
                });
            }
            Op::Reshape { x } => {
                self.acc_grad(*x, |dst| {
                    for (d, gv) in dst.iter_mut().zip(&g) {
                        *d += gv;
                    }
                });
            }
            Op::Sum { x } => {
                let gv = g[0];
                self.acc_grad(*x, |dst| {
                    for d in dst.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::Mean { x } => {
                let n = self.nodes[x.0].values.len() as f64;
                let gv = g[0] / n;
                self.acc_grad(*x, |dst| {
                    for d in dst.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::Gather { x, indices } => {
                self.acc_grad(*x, |dst| {
                    for (o, &src_idx) in indices.iter().enumerate() {
                        dst[src_idx] += g[o];
                    }
                });
            }
            Op::ConcatRows { rows, row_len } => {
                for (r, &row) in rows.iter().enumerate() {
                    let seg = &g[r * row_len..(r + 1) * row_len];
                    self.acc_grad(row, |dst| {
                        for (d, gv) in dst.iter_mut().zip(seg) {
                            *d += gv;
                        }
                    });
                }
            }
            Op::GradReverse { x, coefficient } => {
                let c = -*coefficient;
                self.acc_grad(*x, |dst| {
                    for (d, gv) in dst.iter_mut().zip(&g) {
                        *d += c * gv;
                    }
                });
            }
            Op::Bce { pred, label } => {
                let gv = g[0];
                let pv = self.nodes[pred.0].values.clone();
                let dv = self.nodes[label.0].values.clone();
                self.acc_grad(*pred, |dst| {
                    for ((d, &p), &lab) in dst.iter_mut().zip(&pv).zip(&dv) {
                        *d += gv * bce_dpred(p, lab);
                    }
                });
                self.acc_grad(*label, |dst| {
                    for (d, &p) in dst.iter_mut().zip(&pv) {
                        *d += gv * bce_dlabel(p);
                    }
                });
            }
            Op::BceMasked { pred, labels, mask } => {
                let gv = g[0];
                let pv = self.nodes[pred.0].values.clone();
                self.acc_grad(*pred, |dst| {
                    for (((d, &p), &lab), &m) in
                        dst.iter_mut().zip(&pv).zip(labels).zip(mask)
                    {
                        if m != 0.0 {
                            *d += gv * m * bce_dpred(p, lab);
                        }
                    }
                });
            }
            Op::SmoothL1 { pred, target } => {
                let gv = g[0];
                let pv = self.nodes[pred.0].values.clone();
                let tv = self.nodes[target.0].values.clone();
                self.acc_grad(*pred, |dst| {
                    for ((d, &p), &t) in dst.iter_mut().zip(&pv).zip(&tv) {
                        *d += gv * smooth_l1_deriv(p - t);
                    }
                });
                self.acc_grad(*target, |dst| {
                    for ((d, &p), &t) in dst.iter_mut().zip(&pv).zip(&tv) {
                        *d -= gv * smooth_l1_deriv(p - t);
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, classes, probs } => {
                let gv = g[0];
                let k = self.nodes[logits.0].shape[1];
                self.acc_grad(*logits, |dst| {
                    for (row, &cls) in classes.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == cls { 1.0 } else { 0.0 };
                            dst[row * k + j] += gv * (probs[row * k + j] - onehot);
                        }
                    }
                });
            }
        }
        // Restore this node's gradient so callers can inspect it.
        self.nodes[i].grad = Some(g);
        Ok(())
    }

    fn acc_grad<F: FnOnce(&mut [f64])>(&mut self, id: NodeId, f: F) {
        if let Some(grad) = self.nodes[id.0].grad.as_mut() {
            f(grad);
        }
    }
}
