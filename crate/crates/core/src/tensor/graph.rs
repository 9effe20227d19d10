use std::borrow::Cow;
use std::collections::BTreeMap;

use super::kernels::{self, axis_split, strides};
use super::{Result, Tensor, TensorError};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// How a loss op combines its per-position terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf { name: Option<String> },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    Relu { a: usize },
    Gelu { a: usize },
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Bmm { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize },
    Reshape { a: usize },
    Permute { a: usize, axes: Vec<usize> },
    Softmax { a: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Conv1d { x: usize, w: usize, b: usize, cin: usize, cout: usize, k: usize, len: usize },
    CrossEntropy { logits: usize, classes: usize, labels: Vec<usize>, mask: Vec<bool>, scale: f64, probs: Vec<f64> },
    BceWithLogits { logits: usize, width: usize, targets: Vec<f64>, mask: Vec<bool>, scale: f64 },
    SquaredError { pred: usize, target: Vec<f64> },
    Sum { a: usize },
    MeanAxis { a: usize, axis: usize },
    MaskedMeanRows { a: usize, mask: Vec<bool>, count: usize },
    Narrow { a: usize, axis: usize, start: usize },
    Concat { inputs: Vec<usize>, axis: usize },
}

struct Node<'p> {
    value: Cow<'p, [f64]>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to named leaves.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    by_name: BTreeMap<String, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.by_name.get(name).map(Vec::as_slice)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.by_name.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }
}

/// A single forward pass recorded for reverse-mode differentiation.
///
/// Leaves may borrow their values (`'p`), so parameters are not copied onto
/// the tape. Nodes are appended in evaluation order, which is already a
/// topological order, so `backward` is a single reverse sweep.
#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

fn check_finite(op: &'static str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Numerically stable `ln(1 + e^z) - y z`.
fn bce_term(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, [f64]>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'p> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("graph node shape is consistent")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Owned input that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(Cow::Owned(t.into_data()), shape, Op::Leaf { name: None }, false)
    }

    /// Borrowed input that receives no gradient (e.g. a frozen weight).
    pub fn frozen(&mut self, t: &'p Tensor) -> Var {
        self.push(Cow::Borrowed(t.data()), t.shape().to_vec(), Op::Leaf { name: None }, false)
    }

    /// Borrowed trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: &str, t: &'p Tensor) -> Var {
        self.push(
            Cow::Borrowed(t.data()),
            t.shape().to_vec(),
            Op::Leaf {
                name: Some(name.to_string()),
            },
            true,
        )
    }

    /// Owned trainable leaf; its gradient is reported under `name`.
    pub fn variable(&mut self, name: &str, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(
            Cow::Owned(t.into_data()),
            shape,
            Op::Leaf {
                name: Some(name.to_string()),
            },
            true,
        )
    }

    fn rg(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn unary(&mut self, op: &'static str, a: Var, f: impl Fn(f64) -> f64, make: Op) -> Result<Var> {
        let n = self.node(a);
        let out: Vec<f64> = n.value.iter().map(|&x| f(x)).collect();
        check_finite(op, &out)?;
        let shape = n.shape.clone();
        let rg = self.rg(&[a.0]);
        Ok(self.push(Cow::Owned(out), shape, make, rg))
    }

    /// Broadcast layout for binary ops: the smaller operand must match a
    /// trailing suffix of the larger one. Returns (big, small) indices.
    fn broadcast_pair(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        let (big, small) = if sa.len() >= sb.len() { (a.0, b.0) } else { (b.0, a.0) };
        let (bs, ss) = (&self.nodes[big].shape, &self.nodes[small].shape);
        if bs.ends_with(ss) {
            Ok((big, small))
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            })
        }
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, make: Op) -> Result<Var> {
        let (big, small) = self.broadcast_pair(op, a, b)?;
        let bv = &self.nodes[big].value;
        let sv = &self.nodes[small].value;
        let period = sv.len().max(1);
        let out: Vec<f64> = bv
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = sv[i % period];
                if big == a.0 {
                    f(x, y)
                } else {
                    f(y, x)
                }
            })
            .collect();
        check_finite(op, &out)?;
        let shape = self.nodes[big].shape.clone();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Cow::Owned(out), shape, make, rg))
    }

    /// Elementwise sum; `b` may broadcast over leading dims of `a` or vice versa.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    /// Elementwise product with trailing-dim broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * factor, Op::Scale { a: a.0, factor })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu { a: a.0 })
    }

    /// GELU, tanh form: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, gelu, Op::Gelu { a: a.0 })
    }

    /// `a[..., k] · b[k, n] -> [..., n]`; leading dims of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.node(a).shape.clone(), self.node(b).shape.clone());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let k = sb[0];
        let n = sb[1];
        let m = sa[..sa.len() - 1].iter().product();
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(&self.node(a).value, &self.node(b).value, &mut out, m, k, n);
        check_finite("matmul", &out)?;
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Cow::Owned(out), shape, Op::Matmul { a: a.0, b: b.0, m, k, n }, rg))
    }

    /// Batched product `a[B, m, k] · b[B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.node(a).shape.clone(), self.node(b).shape.clone());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (&self.node(a).value, &self.node(b).value);
            for i in 0..batch {
                kernels::matmul_acc(
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        check_finite("bmm", &out)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Cow::Owned(out), vec![batch, m, n], Op::Bmm { a: a.0, b: b.0, batch, m, k, n }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.node(a).value.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.node(a).shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.node(a).value.to_vec();
        let rg = self.rg(&[a.0]);
        Ok(self.push(Cow::Owned(value), shape.to_vec(), Op::Reshape { a: a.0 }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.node(a).shape.clone();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(TensorError::InvalidArgument(format!(
                "permutation {axes:?} for shape {shape:?}"
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&i| shape[i]).collect();
        let out = permute_data(&self.node(a).value, &shape, axes);
        let rg = self.rg(&[a.0]);
        Ok(self.push(
            Cow::Owned(out),
            out_shape,
            Op::Permute {
                a: a.0,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.node(a).shape.clone();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = &self.node(a).value;
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(x[base + j * inner]);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (x[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= sum;
                }
            }
        }
        check_finite("softmax", &out)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(Cow::Owned(out), shape, Op::Softmax { a: a.0, axis }, rg))
    }

    /// Normalises the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias` (both shaped like the last axis).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.node(x).shape.clone();
        let d = *shape.last().unwrap_or(&0);
        if d < 2 {
            return Err(TensorError::InvalidShape(format!("layer_norm needs last dim >= 2, got {shape:?}")));
        }
        for p in [gain, bias] {
            if self.node(p).shape != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.node(p).shape.clone(),
                });
            }
        }
        let rows = self.node(x).value.len() / d;
        let xv = &self.node(x).value;
        let (g, b) = (&self.node(gain).value, &self.node(bias).value);
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        check_finite("layer_norm", &out)?;
        let rg = self.rg(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            Cow::Owned(out),
            shape,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Same-padded 1-D cross-correlation: `x[cin, len]`, `w[cout, cin, k]`,
    /// `b[cout]` -> `[cout, len]`. `k` must be odd.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (
            self.node(x).shape.clone(),
            self.node(w).shape.clone(),
            self.node(b).shape.clone(),
        );
        if sx.len() != 2 || sw.len() != 3 || sw[1] != sx[0] || sb != [sw[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (cin, len, cout, k) = (sx[0], sx[1], sw[0], sw[2]);
        if k % 2 == 0 {
            return Err(TensorError::InvalidArgument(format!("conv1d kernel length must be odd, got {k}")));
        }
        if len == 0 {
            return Err(TensorError::InvalidShape("conv1d input has zero length".into()));
        }
        let out = kernels::conv1d_forward(
            &self.node(x).value,
            &self.node(w).value,
            &self.node(b).value,
            cin,
            cout,
            k,
            len,
        );
        check_finite("conv1d", &out)?;
        let rg = self.rg(&[x.0, w.0, b.0]);
        Ok(self.push(
            Cow::Owned(out),
            vec![cout, len],
            Op::Conv1d {
                x: x.0,
                w: w.0,
                b: b.0,
                cin,
                cout,
                k,
                len,
            },
            rg,
        ))
    }

    /// Cross-entropy of `logits[T, C]` against `labels`, counting only rows
    /// where `mask` is true. Labels at masked-out rows are never read.
    pub fn masked_cross_entropy(&mut self, logits: Var, labels: &[usize], mask: &[bool], reduction: Reduction) -> Result<Var> {
        let shape = self.node(logits).shape.clone();
        if shape.len() != 2 || labels.len() != shape[0] || mask.len() != shape[0] {
            return Err(TensorError::InvalidShape(format!(
                "cross entropy: logits {shape:?}, {} labels, {} mask entries",
                labels.len(),
                mask.len()
            )));
        }
        let (rows, classes) = (shape[0], shape[1]);
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::EmptyMask);
        }
        let z = &self.node(logits).value;
        let mut probs = vec![0.0; rows * classes];
        let mut total = 0.0;
        for t in 0..rows {
            if !mask[t] {
                continue;
            }
            let y = labels[t];
            if y >= classes {
                return Err(TensorError::InvalidArgument(format!("label {y} at row {t} outside 0..{classes}")));
            }
            let row = &z[t * classes..(t + 1) * classes];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (c, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[t * classes + c] = e;
                sum += e;
            }
            for c in 0..classes {
                probs[t * classes + c] /= sum;
            }
            total += sum.ln() + mx - row[y];
        }
        let scale = match reduction {
            Reduction::Mean => 1.0 / count as f64,
            Reduction::Sum => 1.0,
        };
        let loss = total * scale;
        check_finite("masked_cross_entropy", &[loss])?;
        let rg = self.rg(&[logits.0]);
        Ok(self.push(
            Cow::Owned(vec![loss]),
            Vec::new(),
            Op::CrossEntropy {
                logits: logits.0,
                classes,
                labels: labels.to_vec(),
                mask: mask.to_vec(),
                scale,
                probs,
            },
            rg,
        ))
    }

    /// Sigmoid binary cross-entropy of `logits[T, K]` against `targets[T, K]`
    /// over rows where `mask` is true.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], mask: &[bool], reduction: Reduction) -> Result<Var> {
        let shape = self.node(logits).shape.clone();
        let rows = if shape.is_empty() { 1 } else { shape[0] };
        let n = self.node(logits).value.len();
        if mask.len() != rows || targets.len() != n || n % rows.max(1) != 0 {
            return Err(TensorError::InvalidShape(format!(
                "bce: logits {shape:?}, {} targets, {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let width = n / rows;
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::EmptyMask);
        }
        let z = &self.node(logits).value;
        let mut total = 0.0;
        for t in 0..rows {
            if mask[t] {
                for j in t * width..(t + 1) * width {
                    total += bce_term(z[j], targets[j]);
                }
            }
        }
        let scale = match reduction {
            Reduction::Mean => 1.0 / (count * width) as f64,
            Reduction::Sum => 1.0,
        };
        let loss = total * scale;
        check_finite("bce_with_logits", &[loss])?;
        let rg = self.rg(&[logits.0]);
        Ok(self.push(
            Cow::Owned(vec![loss]),
            Vec::new(),
            Op::BceWithLogits {
                logits: logits.0,
                width,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                scale,
            },
            rg,
        ))
    }

    /// `sum((pred - target)^2)`.
    pub fn squared_error(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let p = &self.node(pred).value;
        if p.len() != target.len() {
            return Err(TensorError::InvalidShape(format!(
                "squared_error: {} predictions, {} targets",
                p.len(),
                target.len()
            )));
        }
        let loss: f64 = p.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
        check_finite("squared_error", &[loss])?;
        let rg = self.rg(&[pred.0]);
        Ok(self.push(
            Cow::Owned(vec![loss]),
            Vec::new(),
            Op::SquaredError {
                pred: pred.0,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.node(a).value.iter().sum();
        check_finite("sum", &[s])?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(Cow::Owned(vec![s]), Vec::new(), Op::Sum { a: a.0 }, rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a).value.len();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean over `axis`; the axis is removed from the output shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.node(a).shape.clone();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument(format!("mean axis {axis} for shape {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = &self.node(a).value;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &x[(o * len + j) * inner..(o * len + j + 1) * inner];
                add_into(&mut out[o * inner..(o + 1) * inner], src);
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(&[a.0]);
        Ok(self.push(Cow::Owned(out), out_shape, Op::MeanAxis { a: a.0, axis }, rg))
    }

    /// Mean of the rows of `a[T, D]` selected by `mask`, giving `[D]`.
    pub fn masked_mean_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let shape = self.node(a).shape.clone();
        if shape.len() != 2 || mask.len() != shape[0] {
            return Err(TensorError::InvalidShape(format!(
                "masked_mean_rows: input {shape:?}, mask of {}",
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::EmptyMask);
        }
        let d = shape[1];
        let x = &self.node(a).value;
        let mut out = vec![0.0; d];
        for (t, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            add_into(&mut out, &x[t * d..(t + 1) * d]);
        }
        let inv = 1.0 / count as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(&[a.0]);
        Ok(self.push(
            Cow::Owned(out),
            vec![d],
            Op::MaskedMeanRows {
                a: a.0,
                mask: mask.to_vec(),
                count,
            },
            rg,
        ))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.node(a).shape.clone();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::InvalidArgument(format!(
                "narrow axis {axis} [{start}, {}) of shape {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let x = &self.node(a).value;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[a.0]);
        Ok(self.push(Cow::Owned(out), out_shape, Op::Narrow { a: a.0, axis, start }, rg))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat of zero tensors".into()))?;
        let base_shape = self.node(*first).shape.clone();
        if axis >= base_shape.len() {
            return Err(TensorError::InvalidArgument(format!("concat axis {axis} for shape {base_shape:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = &self.node(*v).shape;
            let compatible = s.len() == base_shape.len()
                && s.iter().zip(&base_shape).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base_shape.clone(),
                    rhs: s.clone(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let n = self.node(*v);
                let chunk = n.shape[axis] * inner;
                out.extend_from_slice(&n.value[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut out_shape = base_shape;
        out_shape[axis] = total;
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Cow::Owned(out), out_shape, Op::Concat { inputs: ids, axis }, rg))
    }

    /// Reverse sweep from a scalar `loss`. Every named trainable leaf gets an
    /// entry, zero-filled when the loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = self.node(loss);
        if ln.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf { .. } = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }

        let mut out = Gradients::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { name: Some(name) } = &node.op {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                match out.by_name.get_mut(name) {
                    Some(existing) => add_into(existing, &g),
                    None => {
                        out.by_name.insert(name.clone(), g);
                    }
                }
            }
        }
        Ok(out)
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let acc = |grads: &mut [Option<Vec<f64>>], j: usize, delta: Vec<f64>| match &mut grads[j] {
            Some(existing) => add_into(existing, &delta),
            slot => *slot = Some(delta),
        };
        let val = |j: usize| -> &[f64] { &self.nodes[j].value };

        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add { a, b } | Op::Mul { a, b } => {
                let is_mul = matches!(node.op, Op::Mul { .. });
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if !self.wants(this) {
                        continue;
                    }
                    let n_this = self.nodes[this].value.len();
                    let n_other = self.nodes[other].value.len();
                    let mut d = vec![0.0; n_this];
                    for (idx, &gv) in g.iter().enumerate() {
                        let local = if is_mul { val(other)[idx % n_other.max(1)] } else { 1.0 };
                        d[idx % n_this] += gv * local;
                    }
                    acc(grads, this, d);
                }
            }
            Op::Scale { a, factor } => {
                acc(grads, *a, g.iter().map(|v| v * factor).collect());
            }
            Op::Relu { a } => {
                let x = val(*a);
                acc(grads, *a, g.iter().zip(x).map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 }).collect());
            }
            Op::Gelu { a } => {
                let x = val(*a);
                acc(grads, *a, g.iter().zip(x).map(|(gv, &xv)| gv * gelu_grad(xv)).collect());
            }
            Op::Matmul { a, b, m, k, n } => {
                if self.wants(*a) {
                    let mut d = vec![0.0; m * k];
                    kernels::matmul_nt_acc(g, val(*b), &mut d, *m, *n, *k);
                    acc(grads, *a, d);
                }
                if self.wants(*b) {
                    let mut d = vec![0.0; k * n];
                    kernels::matmul_tn_acc(val(*a), g, &mut d, *m, *k, *n);
                    acc(grads, *b, d);
                }
            }
            Op::Bmm { a, b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.wants(*a) {
                    let mut d = vec![0.0; batch * m * k];
                    for s in 0..*batch {
                        kernels::matmul_nt_acc(
                            &g[s * m * n..(s + 1) * m * n],
                            &val(*b)[s * k * n..(s + 1) * k * n],
                            &mut d[s * m * k..(s + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    acc(grads, *a, d);
                }
                if self.wants(*b) {
                    let mut d = vec![0.0; batch * k * n];
                    for s in 0..*batch {
                        kernels::matmul_tn_acc(
                            &val(*a)[s * m * k..(s + 1) * m * k],
                            &g[s * m * n..(s + 1) * m * n],
                            &mut d[s * k * n..(s + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    acc(grads, *b, d);
                }
            }
            Op::Reshape { a } => acc(grads, *a, g.to_vec()),
            Op::Permute { a, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                acc(grads, *a, permute_data(g, &node.shape, &inverse));
            }
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                let y = &node.value;
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dotp = 0.0;
                        for j in 0..len {
                            dotp += g[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..len {
                            let idx = base + j * inner;
                            d[idx] = y[idx] * (g[idx] - dotp);
                        }
                    }
                }
                acc(grads, *a, d);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = *node.shape.last().unwrap();
                let rows = rstd.len();
                let gv = val(*gain);
                if self.wants(*gain) {
                    let mut dg = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    acc(grads, *gain, dg);
                }
                if self.wants(*bias) {
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        add_into(&mut db, &g[r * d..(r + 1) * d]);
                    }
                    acc(grads, *bias, db);
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; rows * d];
                    let inv_d = 1.0 / d as f64;
                    for r in 0..rows {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * d + j];
                        }
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            dx[r * d + j] = rstd[r] * (dh - inv_d * sum_dh - xhat[r * d + j] * inv_d * sum_dh_h);
                        }
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::Conv1d { x, w, b, cin, cout, k, len } => {
                let mut dx = self.wants(*x).then(|| vec![0.0; cin * len]);
                let mut dw = self.wants(*w).then(|| vec![0.0; cout * cin * k]);
                let mut db = self.wants(*b).then(|| vec![0.0; *cout]);
                kernels::conv1d_backward(
                    val(*x),
                    val(*w),
                    g,
                    *cin,
                    *cout,
                    *k,
                    *len,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(d) = dx {
                    acc(grads, *x, d);
                }
                if let Some(d) = dw {
                    acc(grads, *w, d);
                }
                if let Some(d) = db {
                    acc(grads, *b, d);
                }
            }
            Op::CrossEntropy {
                logits,
                classes,
                labels,
                mask,
                scale,
                probs,
            } => {
                let mut d = vec![0.0; probs.len()];
                let s = g[0] * scale;
                for (t, &m) in mask.iter().enumerate() {
                    if !m {
                        continue;
                    }
                    for c in 0..*classes {
                        let onehot = if c == labels[t] { 1.0 } else { 0.0 };
                        d[t * classes + c] = s * (probs[t * classes + c] - onehot);
                    }
                }
                acc(grads, *logits, d);
            }
            Op::BceWithLogits {
                logits,
                width,
                targets,
                mask,
                scale,
            } => {
                let z = val(*logits);
                let mut d = vec![0.0; z.len()];
                let s = g[0] * scale;
                for (t, &m) in mask.iter().enumerate() {
                    if m {
                        for j in t * width..(t + 1) * width {
                            d[j] = s * (sigmoid(z[j]) - targets[j]);
                        }
                    }
                }
                acc(grads, *logits, d);
            }
            Op::SquaredError { pred, target } => {
                let p = val(*pred);
                acc(grads, *pred, p.iter().zip(target).map(|(a, b)| 2.0 * (a - b) * g[0]).collect());
            }
            Op::Sum { a } => {
                acc(grads, *a, vec![g[0]; self.nodes[*a].value.len()]);
            }
            Op::MeanAxis { a, axis } => {
                let shape = &self.nodes[*a].shape;
                let (outer, len, inner) = axis_split(shape, *axis);
                let inv = 1.0 / len as f64;
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            d[(o * len + j) * inner + i] = g[o * inner + i] * inv;
                        }
                    }
                }
                acc(grads, *a, d);
            }
            Op::MaskedMeanRows { a, mask, count } => {
                let dim = g.len();
                let inv = 1.0 / *count as f64;
                let mut d = vec![0.0; mask.len() * dim];
                for (t, &m) in mask.iter().enumerate() {
                    if m {
                        for j in 0..dim {
                            d[t * dim + j] = g[j] * inv;
                        }
                    }
                }
                acc(grads, *a, d);
            }
            Op::Narrow { a, axis, start } => {
                let in_shape = &self.nodes[*a].shape;
                let (outer, full, inner) = axis_split(in_shape, *axis);
                let len = node.shape[*axis];
                let mut d = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                acc(grads, *a, d);
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(&node.shape, *axis);
                let mut offset = 0;
                for &j in inputs {
                    let len = self.nodes[j].shape[*axis];
                    if self.wants(j) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g[base..base + len * inner]);
                        }
                        acc(grads, j, d);
                    }
                    offset += len;
                }
            }
        }
    }
}

fn permute_data(x: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&i| shape[i]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&i| in_strides[i]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..x.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(x[off]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut g = Graph::new();
        let eye = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let x = g.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y), &[1., 2., 3., 4., 5., 6.]);

        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2, 1], &[1., 1.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[3., 7.]);
        assert_eq!(g.shape(c), &[2, 1]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn relu_and_gelu_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1., 0., 2.]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r), &[0., 0., 2.]);
        let z = g.constant(t(&[1], &[0.0]));
        let ge = g.gelu(z).unwrap();
        assert_eq!(g.value(ge), &[0.0]);
    }

    #[test]
    fn broadcast_add_over_leading_dims() {
        let mut g = Graph::new();
        let a = g.variable("a", t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = g.variable("b", t(&[3], &[10., 20., 30.]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c), &[11., 22., 33., 14., 25., 36.]);
        let s = g.sum(c).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("b").unwrap(), &[2., 2., 2.]);
        let bad = g.constant(Tensor::zeros(&[2]));
        assert!(g.add(a, bad).is_err());
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0., 0., 0.]));
        let s = g.softmax(x, 0).unwrap();
        for v in g.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(&[2], &[1000., 0.]));
        let s = g.softmax(x, 0).unwrap();
        assert!((g.value(s)[0] - 1.0).abs() < 1e-12);
        assert!(g.value(s)[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_on_middle_axis_sums_to_one() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(|i| ((i * 7) % 11) as f64 * 0.3 - 1.0).collect();
        let x = g.constant(t(&[2, 3, 4], &data));
        let s = g.softmax(x, 1).unwrap();
        let v = g.value(s);
        for o in 0..2 {
            for i in 0..4 {
                let sum: f64 = (0..3).map(|j| v[o * 12 + j * 4 + i]).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_closed_form() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[1., 2., 3.]));
        let gain = g.constant(t(&[3], &[1., 1., 1.]));
        let bias = g.constant(t(&[3], &[0., 0., 0.]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        let expect = [-1.2247, 0.0, 1.2247];
        for (a, b) in g.value(y).iter().zip(expect) {
            assert!((a - b).abs() < 1e-3);
        }
        let c = g.constant(t(&[4], &[5., 5., 5., 5.]));
        let gain4 = g.constant(Tensor::full(&[4], 1.0));
        let bias4 = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(c, gain4, bias4, 1e-5).unwrap();
        assert!(g.value(y).iter().all(|&v| v == 0.0));
        let one = g.constant(t(&[1], &[1.0]));
        let g1 = g.constant(t(&[1], &[1.0]));
        let b1 = g.constant(t(&[1], &[0.0]));
        assert!(g.layer_norm(one, g1, b1, 1e-5).is_err());
    }

    #[test]
    fn conv1d_identity_and_box() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3], &[1., 2., 3.]));
        let w = g.constant(t(&[1, 1, 3], &[0., 1., 0.]));
        let b = g.constant(t(&[1], &[0.]));
        let y = g.conv1d(x, w, b).unwrap();
        assert_eq!(g.value(y), &[1., 2., 3.]);
        let w = g.constant(t(&[1, 1, 3], &[1., 1., 1.]));
        let y = g.conv1d(x, w, b).unwrap();
        assert_eq!(g.value(y), &[3., 6., 5.]);
        let w = g.constant(Tensor::zeros(&[1, 1, 2]));
        assert!(g.conv1d(x, w, b).is_err());
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[4, 5]));
        let l = g.masked_cross_entropy(logits, &[0, 1, 2, 3], &[true; 4], Reduction::Mean).unwrap();
        assert!((g.scalar(l) - 5f64.ln()).abs() < 1e-12);

        let mut onehot = vec![-20.0; 10];
        onehot[1] = 20.0;
        onehot[5 + 3] = 20.0;
        let logits = g.constant(t(&[2, 5], &onehot));
        let l = g.masked_cross_entropy(logits, &[1, 3], &[true, true], Reduction::Mean).unwrap();
        assert!(g.scalar(l) < 1e-6);

        assert!(matches!(
            g.masked_cross_entropy(logits, &[1, 3], &[false, false], Reduction::Mean),
            Err(TensorError::EmptyMask)
        ));
    }

    #[test]
    fn cross_entropy_gradient_zero_at_masked_rows() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..15).map(|i| (i as f64 * 0.37).sin()).collect();
        let z = g.variable("z", t(&[3, 5], &data));
        let l = g.masked_cross_entropy(z, &[2, 99, 4], &[true, false, true], Reduction::Sum).unwrap();
        let grads = g.backward(l).unwrap();
        let d = grads.get("z").unwrap();
        assert!(d[5..10].iter().all(|&v| v == 0.0));
        assert!(d[0..5].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn sum_gradient_is_ones_and_disconnected_is_zero() {
        let mut g = Graph::new();
        let x = g.variable("x", t(&[2, 2], &[1., -2., 3., 0.5]));
        let _unused = g.variable("unused", t(&[3], &[1., 2., 3.]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("x").unwrap(), &[1.; 4]);
        assert_eq!(grads.get("unused").unwrap(), &[0.; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.variable("x", Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn permute_narrow_concat_roundtrip() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = g.constant(t(&[2, 3, 4], &data));
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        assert_eq!(g.value(p)[1], 4.0);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back), &data[..]);
        let a = g.narrow(x, 2, 0, 1).unwrap();
        let b = g.narrow(x, 2, 1, 3).unwrap();
        let c = g.concat(&[a, b], 2).unwrap();
        assert_eq!(g.value(c), &data[..]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[f64::MAX]));
        assert!(matches!(g.scale(x, 10.0), Err(TensorError::NonFinite { .. })));
    }
}
