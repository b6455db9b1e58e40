use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use super::{Buffer, Result, SeededRng, Tensor, TensorError};

type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Buffer>>>;

struct OpRecord {
    name: &'static str,
    parents: Vec<Var>,
    backward: BackwardFn,
}

struct Node {
    tape: u64,
    index: usize,
    value: Tensor,
    requires_grad: bool,
    op: Option<OpRecord>,
    grad: RefCell<Option<Buffer>>,
}

/// Handle to a value produced on a [`Tape`].
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.0.value.data()
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Name of the op that produced this value, `None` for leaves.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.op.as_ref().map(|op| op.name)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Tensor> {
        self.0
            .grad
            .borrow()
            .as_ref()
            .map(|g| Tensor::from_buffer(self.shape().to_vec(), g.clone()))
    }

    /// Gradient of a leaf, zeros when nothing reached it.
    pub fn grad_or_zeros(&self) -> Vec<f64> {
        self.0
            .grad
            .borrow()
            .as_ref()
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; self.value().numel()])
    }

    /// Runs `f` on the leaf gradient without copying it.
    pub fn with_grad<R>(&self, f: impl FnOnce(Option<&[f64]>) -> R) -> R {
        let g = self.0.grad.borrow();
        f(g.as_deref())
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("op", &self.op_name())
            .field("requires_grad", &self.0.requires_grad)
            .field("value", &self.0.value)
            .finish()
    }
}

thread_local! {
    static NEXT_TAPE: Cell<u64> = const { Cell::new(1) };
}

/// Records differentiable operations in execution order.
///
/// A recording tape keeps every value that needs a gradient alive until it is
/// dropped; a non-recording tape keeps nothing, so intermediates are freed as
/// soon as their handles go out of scope.
pub struct Tape {
    id: u64,
    recording: bool,
    nodes: RefCell<Vec<Var>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    pub fn no_grad() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(recording: bool) -> Self {
        let id = NEXT_TAPE.with(|c| {
            let id = c.get();
            c.set(id + 1);
            id
        });
        Tape {
            id,
            recording,
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Operation names in recorded order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes
            .borrow()
            .iter()
            .map(|v| v.op_name().unwrap_or("leaf"))
            .collect()
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Option<OpRecord>) -> Var {
        if !requires_grad {
            return Var(Rc::new(Node {
                tape: 0,
                index: usize::MAX,
                value,
                requires_grad: false,
                op: None,
                grad: RefCell::new(None),
            }));
        }
        let mut nodes = self.nodes.borrow_mut();
        let var = Var(Rc::new(Node {
            tape: self.id,
            index: nodes.len(),
            value,
            requires_grad: true,
            op,
            grad: RefCell::new(None),
        }));
        nodes.push(var.clone());
        var
    }

    /// Leaf that receives a gradient when the tape records.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, self.recording, None)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, false, None)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self, v: &Var) -> Var {
        self.constant(v.value().clone())
    }

    fn record(
        &self,
        name: &'static str,
        value: Tensor,
        parents: Vec<Var>,
        backward: impl Fn(&[f64], &[bool]) -> Vec<Option<Buffer>> + 'static,
    ) -> Var {
        let needs_grad = self.recording && parents.iter().any(|p| p.requires_grad());
        if !needs_grad {
            return self.push(value, false, None);
        }
        debug_assert!(parents
            .iter()
            .all(|p| !p.requires_grad() || p.0.tape == self.id));
        let op = OpRecord {
            name,
            parents,
            backward: Box::new(backward),
        };
        self.push(value, true, Some(op))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls; callers reset them between optimizer steps.
    pub fn backward(&self, loss: &Var) -> Result<()> {
        if loss.value().numel() != 1 {
            return Err(TensorError::NotScalar(loss.shape().to_vec()));
        }
        if !loss.requires_grad() {
            return Ok(());
        }
        if loss.0.tape != self.id {
            return Err(TensorError::NotOnTape);
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Buffer>> = (0..=loss.0.index).map(|_| None).collect();
        grads[loss.0.index] = Some(Buffer::new(vec![1.0]));
        for i in (0..=loss.0.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i].0;
            match &node.op {
                None => {
                    let mut slot = node.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(g.iter()).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(op) => {
                    let needs: Vec<bool> = op.parents.iter().map(Var::requires_grad).collect();
                    let parent_grads = (op.backward)(&g, &needs);
                    drop(g);
                    for (parent, pg) in op.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        let j = parent.0.index;
                        match grads[j].as_mut() {
                            Some(acc) => {
                                acc.iter_mut().zip(pg.iter()).for_each(|(a, b)| *a += b)
                            }
                            None => grads[j] = Some(pg),
                        }
                    }
                }
            }
        }
        Ok(())
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, p) = (sa[0], sa[1], sb[1]);
        let mut out = Buffer::zeros(m * p);
        gemm_nn(a.data(), b.data(), &mut out, m, k, p);
        let value = Tensor::from_buffer(vec![m, p], out);
        let (av, bv) = (a.value().clone(), b.value().clone());
        Ok(self.record("matmul", value, vec![a.clone(), b.clone()], move |g, needs| {
            let ga = needs[0].then(|| {
                let mut ga = Buffer::zeros(m * k);
                gemm_nt(g, bv.data(), &mut ga, m, p, k);
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = Buffer::zeros(k * p);
                gemm_tn(av.data(), g, &mut gb, k, m, p);
                gb
            });
            vec![ga, gb]
        }))
    }

    /// Batched `a[g×m×k] · b[g×k×n]`.
    pub fn bmm(&self, a: &Var, b: &Var) -> Result<Var> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", sa, sb));
        }
        let (groups, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = Buffer::zeros(groups * m * n);
        for g in 0..groups {
            gemm_nn(
                &a.data()[g * m * k..(g + 1) * m * k],
                &b.data()[g * k * n..(g + 1) * k * n],
                &mut out[g * m * n..(g + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::from_buffer(vec![groups, m, n], out);
        let (av, bv) = (a.value().clone(), b.value().clone());
        Ok(self.record("bmm", value, vec![a.clone(), b.clone()], move |go, needs| {
            let ga = needs[0].then(|| {
                let mut ga = Buffer::zeros(groups * m * k);
                for g in 0..groups {
                    gemm_nt(
                        &go[g * m * n..(g + 1) * m * n],
                        &bv.data()[g * k * n..(g + 1) * k * n],
                        &mut ga[g * m * k..(g + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = Buffer::zeros(groups * k * n);
                for g in 0..groups {
                    gemm_tn(
                        &av.data()[g * m * k..(g + 1) * m * k],
                        &go[g * m * n..(g + 1) * m * n],
                        &mut gb[g * k * n..(g + 1) * k * n],
                        k,
                        m,
                        n,
                    );
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    /// Batched `a[g×m×k] · b[g×n×k]ᵀ`.
    pub fn bmm_nt(&self, a: &Var, b: &Var) -> Result<Var> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(shape_err("bmm_nt", sa, sb));
        }
        let (groups, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = Buffer::zeros(groups * m * n);
        for g in 0..groups {
            gemm_nt(
                &a.data()[g * m * k..(g + 1) * m * k],
                &b.data()[g * n * k..(g + 1) * n * k],
                &mut out[g * m * n..(g + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::from_buffer(vec![groups, m, n], out);
        let (av, bv) = (a.value().clone(), b.value().clone());
        Ok(self.record("bmm_nt", value, vec![a.clone(), b.clone()], move |go, needs| {
            let ga = needs[0].then(|| {
                let mut ga = Buffer::zeros(groups * m * k);
                for g in 0..groups {
                    gemm_nn(
                        &go[g * m * n..(g + 1) * m * n],
                        &bv.data()[g * n * k..(g + 1) * n * k],
                        &mut ga[g * m * k..(g + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = Buffer::zeros(groups * n * k);
                for g in 0..groups {
                    gemm_tn(
                        &go[g * m * n..(g + 1) * m * n],
                        &av.data()[g * m * k..(g + 1) * m * k],
                        &mut gb[g * n * k..(g + 1) * n * k],
                        n,
                        m,
                        k,
                    );
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    pub fn transpose(&self, a: &Var) -> Result<Var> {
        let s = a.shape();
        if s.len() != 2 {
            return Err(shape_err("transpose", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let map: Vec<usize> = (0..r * c).map(|o| (o % r) * c + o / r).collect();
        self.permute(a, vec![c, r], Rc::new(map))
    }

    // ---- element-wise ---------------------------------------------------

    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("add", a, b)?;
        let out: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_buffer(a.shape().to_vec(), Buffer::new(out));
        Ok(self.record("add", value, vec![a.clone(), b.clone()], |g, needs| {
            vec![
                needs[0].then(|| Buffer::new(g.to_vec())),
                needs[1].then(|| Buffer::new(g.to_vec())),
            ]
        }))
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("sub", a, b)?;
        let out: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::from_buffer(a.shape().to_vec(), Buffer::new(out));
        Ok(self.record("sub", value, vec![a.clone(), b.clone()], |g, needs| {
            vec![
                needs[0].then(|| Buffer::new(g.to_vec())),
                needs[1].then(|| Buffer::new(g.iter().map(|v| -v).collect())),
            ]
        }))
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("mul", a, b)?;
        let out: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_buffer(a.shape().to_vec(), Buffer::new(out));
        let (av, bv) = (a.value().clone(), b.value().clone());
        Ok(self.record("mul", value, vec![a.clone(), b.clone()], move |g, needs| {
            vec![
                needs[0].then(|| Buffer::new(g.iter().zip(bv.data()).map(|(g, y)| g * y).collect())),
                needs[1].then(|| Buffer::new(g.iter().zip(av.data()).map(|(g, x)| g * x).collect())),
            ]
        }))
    }

    pub fn scale(&self, a: &Var, c: f64) -> Var {
        let out: Vec<f64> = a.data().iter().map(|x| x * c).collect();
        let value = Tensor::from_buffer(a.shape().to_vec(), Buffer::new(out));
        self.record("scale", value, vec![a.clone()], move |g, _| {
            vec![Some(Buffer::new(g.iter().map(|v| v * c).collect()))]
        })
    }

    /// `a[..×c] + bias[c]`, broadcasting over rows.
    pub fn add_row(&self, a: &Var, bias: &Var) -> Result<Var> {
        let c = bias.value().numel();
        if c == 0 || a.shape().last() != Some(&c) {
            return Err(shape_err("add_row", a.shape(), bias.shape()));
        }
        let mut out = Buffer::new(a.data().to_vec());
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(bias.data()).for_each(|(x, b)| *x += b);
        }
        let value = Tensor::from_buffer(a.shape().to_vec(), out);
        Ok(self.record("add_row", value, vec![a.clone(), bias.clone()], move |g, needs| {
            let gb = needs[1].then(|| {
                let mut gb = Buffer::zeros(c);
                for row in g.chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                gb
            });
            vec![needs[0].then(|| Buffer::new(g.to_vec())), gb]
        }))
    }

    /// Element-wise square root. The subgradient at zero is taken as zero.
    pub fn sqrt(&self, a: &Var) -> Result<Var> {
        if let Some((index, &value)) = a.data().iter().enumerate().find(|(_, v)| **v < 0.0) {
            return Err(TensorError::Domain {
                op: "sqrt",
                index,
                value,
            });
        }
        let out = Tensor::from_buffer(
            a.shape().to_vec(),
            Buffer::new(a.data().iter().map(|v| v.sqrt()).collect()),
        );
        let saved = out.clone();
        Ok(self.record("sqrt", out, vec![a.clone()], move |g, _| {
            let gx = g
                .iter()
                .zip(saved.data())
                .map(|(g, y)| if *y == 0.0 { 0.0 } else { g / (2.0 * y) })
                .collect();
            vec![Some(Buffer::new(gx))]
        }))
    }

    pub fn tanh(&self, a: &Var) -> Var {
        let out = Tensor::from_buffer(
            a.shape().to_vec(),
            Buffer::new(a.data().iter().map(|v| v.tanh()).collect()),
        );
        let saved = out.clone();
        self.record("tanh", out, vec![a.clone()], move |g, _| {
            let gx = g
                .iter()
                .zip(saved.data())
                .map(|(g, y)| g * (1.0 - y * y))
                .collect();
            vec![Some(Buffer::new(gx))]
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: &Var) -> Var {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const K: f64 = 0.044_715;
        let out: Vec<f64> = a
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (C * (x + K * x * x * x)).tanh()))
            .collect();
        let value = Tensor::from_buffer(a.shape().to_vec(), Buffer::new(out));
        let input = a.value().clone();
        self.record("gelu", value, vec![a.clone()], move |g, _| {
            let gx = g
                .iter()
                .zip(input.data())
                .map(|(g, &x)| {
                    let u = C * (x + K * x * x * x);
                    let t = u.tanh();
                    let du = C * (1.0 + 3.0 * K * x * x);
                    g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                })
                .collect();
            vec![Some(Buffer::new(gx))]
        })
    }

    /// Inverted dropout: zero each entry with probability `rate`, scale
    /// survivors by `1/(1-rate)`. The mask is drawn from `rng` in row-major
    /// order. Rate zero returns the input unchanged.
    pub fn dropout(&self, a: &Var, rate: f64, rng: &mut SeededRng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Param {
                op: "dropout",
                detail: format!("rate must be in [0, 1), got {rate}"),
            });
        }
        if rate == 0.0 {
            return Ok(a.clone());
        }
        let keep = 1.0 / (1.0 - rate);
        let mask = Buffer::new(
            (0..a.value().numel())
                .map(|_| if rng.next_f64() < rate { 0.0 } else { keep })
                .collect(),
        );
        let out: Vec<f64> = a.data().iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
        let value = Tensor::from_buffer(a.shape().to_vec(), Buffer::new(out));
        Ok(self.record("dropout", value, vec![a.clone()], move |g, _| {
            vec![Some(Buffer::new(
                g.iter().zip(mask.iter()).map(|(g, m)| g * m).collect(),
            ))]
        }))
    }

    // ---- row-wise reductions -------------------------------------------

    /// Softmax over the last dimension, max-subtracted.
    pub fn softmax_rows(&self, a: &Var) -> Result<Var> {
        let c = last_dim("softmax_rows", a)?;
        let mut out = Buffer::new(a.data().to_vec());
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let value = Tensor::from_buffer(a.shape().to_vec(), out);
        let saved = value.clone();
        Ok(self.record("softmax_rows", value, vec![a.clone()], move |g, _| {
            vec![Some(softmax_backward(g, saved.data(), c))]
        }))
    }

    /// Softmax over the last dimension restricted to unmasked columns.
    ///
    /// `key_mask[b * cols + j]` tells whether column `j` is visible to rows of
    /// group `b`, where each group spans `rows_per_group` consecutive rows.
    /// Masked columns get exactly zero probability; a row with no visible
    /// column is all zeros.
    pub fn masked_softmax(
        &self,
        a: &Var,
        key_mask: Rc<[bool]>,
        rows_per_group: usize,
    ) -> Result<Var> {
        let c = last_dim("masked_softmax", a)?;
        let rows = a.value().numel() / c;
        if rows_per_group == 0 || !rows.is_multiple_of(rows_per_group) || key_mask.len() != rows / rows_per_group * c
        {
            return Err(shape_err("masked_softmax", a.shape(), &[key_mask.len()]));
        }
        let mut out = Buffer::new(a.data().to_vec());
        for (r, row) in out.chunks_mut(c).enumerate() {
            let mask = &key_mask[(r / rows_per_group) * c..(r / rows_per_group + 1) * c];
            let max = row
                .iter()
                .zip(mask)
                .filter(|(_, m)| **m)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                row.iter_mut().for_each(|v| *v = 0.0);
                continue;
            }
            let mut sum = 0.0;
            for (v, m) in row.iter_mut().zip(mask) {
                *v = if *m { (*v - max).exp() } else { 0.0 };
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let value = Tensor::from_buffer(a.shape().to_vec(), out);
        let saved = value.clone();
        Ok(self.record("masked_softmax", value, vec![a.clone()], move |g, _| {
            vec![Some(softmax_backward(g, saved.data(), c))]
        }))
    }

    pub fn log_softmax_rows(&self, a: &Var) -> Result<Var> {
        let c = last_dim("log_softmax_rows", a)?;
        let mut out = Buffer::new(a.data().to_vec());
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::from_buffer(a.shape().to_vec(), out);
        let saved = value.clone();
        Ok(self.record("log_softmax_rows", value, vec![a.clone()], move |g, _| {
            let mut gx = Buffer::zeros(g.len());
            for ((gr, yr), out) in g.chunks(c).zip(saved.data().chunks(c)).zip(gx.chunks_mut(c)) {
                let total: f64 = gr.iter().sum();
                for ((o, g), y) in out.iter_mut().zip(gr).zip(yr) {
                    *o = g - y.exp() * total;
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Layer normalization over the last dimension with learned gain and bias.
    pub fn layer_norm(&self, x: &Var, gain: &Var, bias: &Var, eps: f64) -> Result<Var> {
        let c = last_dim("layer_norm", x)?;
        if gain.value().numel() != c || bias.value().numel() != c {
            return Err(shape_err("layer_norm", x.shape(), gain.shape()));
        }
        let rows = x.value().numel() / c;
        let mut xhat = Buffer::zeros(rows * c);
        let mut inv_std = Buffer::zeros(rows);
        let mut out = Buffer::zeros(rows * c);
        for r in 0..rows {
            let row = &x.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gain.data()[j] + bias.data()[j];
            }
        }
        let value = Tensor::from_buffer(x.shape().to_vec(), out);
        let gv = gain.value().clone();
        Ok(self.record(
            "layer_norm",
            value,
            vec![x.clone(), gain.clone(), bias.clone()],
            move |g, needs| {
                let gx = needs[0].then(|| {
                    let mut gx = Buffer::zeros(rows * c);
                    let mut dxhat = vec![0.0; c];
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for j in 0..c {
                            dxhat[j] = gr[j] * gv.data()[j];
                            sum_d += dxhat[j];
                            sum_dh += dxhat[j] * hr[j];
                        }
                        let k = inv_std[r] / c as f64;
                        for j in 0..c {
                            gx[r * c + j] = k * (c as f64 * dxhat[j] - sum_d - hr[j] * sum_dh);
                        }
                    }
                    gx
                });
                let gg = needs[1].then(|| {
                    let mut gg = Buffer::zeros(c);
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                    gg
                });
                let gb = needs[2].then(|| {
                    let mut gb = Buffer::zeros(c);
                    for gr in g.chunks(c) {
                        gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                    gb
                });
                vec![gx, gg, gb]
            },
        ))
    }

    /// Scales each row of a 2-D tensor to unit L2 norm.
    pub fn normalize_rows(&self, a: &Var) -> Result<Var> {
        let c = last_dim("normalize_rows", a)?;
        let rows = a.value().numel() / c;
        let mut norms = Vec::with_capacity(rows);
        let mut out = Buffer::zeros(rows * c);
        for r in 0..rows {
            let row = &a.data()[r * c..(r + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(TensorError::Degenerate {
                    op: "normalize_rows",
                    row: r,
                });
            }
            norms.push(n);
            for j in 0..c {
                out[r * c + j] = row[j] / n;
            }
        }
        let value = Tensor::from_buffer(a.shape().to_vec(), out);
        let saved = value.clone();
        Ok(self.record("normalize_rows", value, vec![a.clone()], move |g, _| {
            let mut gx = Buffer::zeros(g.len());
            for r in 0..rows {
                let y = &saved.data()[r * c..(r + 1) * c];
                let gr = &g[r * c..(r + 1) * c];
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    gx[r * c + j] = (gr[j] - y[j] * dot) / norms[r];
                }
            }
            vec![Some(gx)]
        }))
    }

    pub fn sum(&self, a: &Var) -> Var {
        let value = Tensor::scalar(a.data().iter().sum());
        let n = a.value().numel();
        self.record("sum", value, vec![a.clone()], move |g, _| {
            vec![Some(Buffer::new(vec![g[0]; n]))]
        })
    }

    pub fn mean(&self, a: &Var) -> Var {
        let n = a.value().numel();
        let value = Tensor::scalar(a.data().iter().sum::<f64>() / n as f64);
        self.record("mean", value, vec![a.clone()], move |g, _| {
            vec![Some(Buffer::new(vec![g[0] / n as f64; n]))]
        })
    }

    /// Diagonal of a square matrix.
    pub fn diag(&self, a: &Var) -> Result<Var> {
        let s = a.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(shape_err("diag", s, s));
        }
        let n = s[0];
        let map: Vec<usize> = (0..n).map(|i| i * n + i).collect();
        self.gather(a, vec![n], Rc::new(map), "diag")
    }

    // ---- indexing and layout -------------------------------------------

    /// Rows `idx` of a 2-D tensor, stacked. Gradients scatter-add back.
    pub fn gather_rows(&self, src: &Var, idx: &[usize]) -> Result<Var> {
        let s = src.shape();
        if s.len() != 2 {
            return Err(shape_err("gather_rows", s, &[idx.len()]));
        }
        let (rows, c) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Index {
                op: "gather_rows",
                index: bad,
                len: rows,
            });
        }
        let mut map = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            map.extend(i * c..(i + 1) * c);
        }
        self.gather(src, vec![idx.len(), c], Rc::new(map), "gather_rows")
    }

    /// `out[i] = a[map[i]]`; backward scatter-adds.
    fn gather(&self, a: &Var, shape: Vec<usize>, map: Rc<Vec<usize>>, name: &'static str) -> Result<Var> {
        let out: Vec<f64> = map.iter().map(|&i| a.data()[i]).collect();
        let value = Tensor::from_buffer(shape, Buffer::new(out));
        let n = a.value().numel();
        Ok(self.record(name, value, vec![a.clone()], move |g, _| {
            let mut gx = Buffer::zeros(n);
            for (o, &i) in map.iter().enumerate() {
                gx[i] += g[o];
            }
            vec![Some(gx)]
        }))
    }

    /// Bijective re-layout: `out[i] = a[map[i]]`.
    pub fn permute(&self, a: &Var, shape: Vec<usize>, map: Rc<Vec<usize>>) -> Result<Var> {
        let n = a.value().numel();
        if map.len() != n || shape.iter().product::<usize>() != n {
            return Err(shape_err("permute", a.shape(), &shape));
        }
        let out: Vec<f64> = map.iter().map(|&i| a.data()[i]).collect();
        let value = Tensor::from_buffer(shape, Buffer::new(out));
        Ok(self.record("permute", value, vec![a.clone()], move |g, _| {
            let mut gx = Buffer::zeros(n);
            for (o, &i) in map.iter().enumerate() {
                gx[i] = g[o];
            }
            vec![Some(gx)]
        }))
    }

    /// Same payload, new shape.
    pub fn reshape(&self, a: &Var, shape: Vec<usize>) -> Result<Var> {
        let value = a.value().reshaped(shape)?;
        Ok(self.record("reshape", value, vec![a.clone()], |g, _| {
            vec![Some(Buffer::new(g.to_vec()))]
        }))
    }

    /// Stacks tensors along the first dimension.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::Param {
            op: "concat_rows",
            detail: "no inputs".into(),
        })?;
        let tail = &first.shape()[1.min(first.shape().len())..];
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            if p.shape().is_empty() || &p.shape()[1..] != tail {
                return Err(shape_err("concat_rows", first.shape(), p.shape()));
            }
            rows += p.shape()[0];
            out.extend_from_slice(p.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        let sizes: Vec<usize> = parts.iter().map(|p| p.value().numel()).collect();
        let value = Tensor::from_buffer(shape, Buffer::new(out));
        Ok(self.record("concat_rows", value, parts.to_vec(), move |g, needs| {
            let mut offset = 0;
            sizes
                .iter()
                .zip(needs)
                .map(|(&n, &need)| {
                    let part = need.then(|| Buffer::new(g[offset..offset + n].to_vec()));
                    offset += n;
                    part
                })
                .collect()
        }))
    }

    /// Takes `value` as the forward result while routing gradients to
    /// `source` unchanged.
    pub fn straight_through(&self, source: &Var, value: Tensor) -> Result<Var> {
        if source.shape() != value.shape() {
            return Err(shape_err("straight_through", source.shape(), value.shape()));
        }
        Ok(self.record("straight_through", value, vec![source.clone()], |g, _| {
            vec![Some(Buffer::new(g.to_vec()))]
        }))
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn same_shape(op: &'static str, a: &Var, b: &Var) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn last_dim(op: &'static str, a: &Var) -> Result<usize> {
    match a.shape().last() {
        Some(&c) if c > 0 => Ok(c),
        _ => Err(shape_err(op, a.shape(), &[])),
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

fn softmax_backward(g: &[f64], y: &[f64], c: usize) -> Buffer {
    let mut gx = Buffer::zeros(g.len());
    for ((gr, yr), out) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
        for ((o, g), y) in out.iter_mut().zip(gr).zip(yr) {
            *o = y * (g - dot);
        }
    }
    gx
}

/// `out[m×n] += a[m×k] · b[k×n]`
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`
fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for l in 0..k {
        let brow = &b[l * n..(l + 1) * n];
        for i in 0..m {
            let av = a[l * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
