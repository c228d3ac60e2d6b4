//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation whose inputs carry a node id. Values are
//! shared through `Rc`, so a no-grad tape records nothing and intermediates are
//! dropped as soon as the caller lets go of them.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// A value flowing through a computation, optionally tracked by a tape.
#[derive(Clone, Debug)]
pub struct Var {
    value: Rc<Tensor>,
    node: Option<NodeId>,
}

impl Var {
    /// An untracked value; gradients never flow into it.
    pub fn constant(value: Tensor) -> Var {
        Var {
            value: Rc::new(value),
            node: None,
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }
}

/// Everything a backward rule may look at.
pub struct BackwardCtx<'a> {
    pub inputs: &'a [Rc<Tensor>],
    /// `needs[i]` is false when input `i` is untracked; rules may skip it.
    pub needs: &'a [bool],
    pub output: &'a Tensor,
    pub grad: &'a Tensor,
}

pub trait BackwardRule {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian product: one entry per input, `None` where not needed.
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>>;
}

struct Record {
    output: NodeId,
    input_nodes: Vec<Option<NodeId>>,
    inputs: Vec<Rc<Tensor>>,
    value: Rc<Tensor>,
    rule: Box<dyn BackwardRule>,
}

pub struct Tape {
    records: RefCell<Vec<Record>>,
    leaves: RefCell<Vec<NodeId>>,
    next_node: Cell<NodeId>,
    recording: bool,
    /// Running hash of every rectifier's on/off pattern.
    relu_pattern: Cell<u64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            records: RefCell::new(Vec::new()),
            leaves: RefCell::new(Vec::new()),
            next_node: Cell::new(0),
            recording: true,
            relu_pattern: Cell::new(0xcbf2_9ce4_8422_2325),
        }
    }

    /// A tape that never records; every result is a constant.
    pub fn no_grad() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    /// Hash of which rectifier inputs were positive so far. Two evaluations
    /// with equal signatures took the same linear piece of the network.
    pub fn relu_signature(&self) -> u64 {
        self.relu_pattern.get()
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.records.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn fresh_node(&self) -> NodeId {
        let id = self.next_node.get();
        self.next_node.set(id + 1);
        id
    }

    /// A differentiable leaf. On a no-grad tape this is a constant.
    pub fn leaf(&self, value: Tensor) -> Var {
        if !self.recording {
            return Var::constant(value);
        }
        let id = self.fresh_node();
        self.leaves.borrow_mut().push(id);
        Var {
            value: Rc::new(value),
            node: Some(id),
        }
    }

    /// Record `output = rule(inputs)`. Untracked when no input is tracked.
    pub fn record(&self, rule: impl BackwardRule + 'static, inputs: &[&Var], output: Tensor) -> Var {
        let tracked = self.recording && inputs.iter().any(|v| v.node.is_some());
        if !tracked {
            return Var::constant(output);
        }
        let id = self.fresh_node();
        let value = Rc::new(output);
        self.records.borrow_mut().push(Record {
            output: id,
            input_nodes: inputs.iter().map(|v| v.node).collect(),
            inputs: inputs.iter().map(|v| Rc::clone(&v.value)).collect(),
            value: Rc::clone(&value),
            rule: Box::new(rule),
        });
        Var { value, node: Some(id) }
    }

    /// Populate d(loss)/d(leaf) for every leaf on this tape.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if loss.value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        let n = self.next_node.get();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        let mut is_leaf = vec![false; n];
        for &l in self.leaves.borrow().iter() {
            is_leaf[l] = true;
        }
        let Some(root) = loss.node else {
            return Ok(Gradients { grads });
        };
        grads[root] = Some(Tensor::ones(loss.shape()));

        let records = self.records.borrow();
        for rec in records.iter().rev() {
            let Some(grad) = grads[rec.output].take() else {
                continue;
            };
            let needs: Vec<bool> = rec.input_nodes.iter().map(|n| n.is_some()).collect();
            let ctx = BackwardCtx {
                inputs: &rec.inputs,
                needs: &needs,
                output: &rec.value,
                grad: &grad,
            };
            let input_grads = rec.rule.backward(&ctx);
            debug_assert_eq!(input_grads.len(), rec.inputs.len(), "{}", rec.rule.name());
            for (node, g) in rec.input_nodes.iter().zip(input_grads) {
                let (Some(node), Some(g)) = (node, g) else {
                    continue;
                };
                accumulate(&mut grads[*node], g);
            }
        }
        for (g, leaf) in grads.iter_mut().zip(&is_leaf) {
            if !leaf {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        v.node.and_then(|n| self.grads.get(n)).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`, zero when `v` is unreachable from the loss.
    pub fn wrt(&self, v: &Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    /// `max(a, 0)`; the right operand is ignored.
    MaxWithZero,
}

pub enum Operand<'a> {
    Var(&'a Var),
    Scalar(f64),
}

struct AddRule;
struct SubRule;
struct MulRule;
struct ScaleRule(f64);
struct ShiftRule;
struct ReluRule;
struct SigmoidRule;
struct SumRule;

impl BackwardRule for AddRule {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]
    }
}

impl BackwardRule for SubRule {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        vec![Some(ctx.grad.clone()), Some(ctx.grad.map(|g| -g))]
    }
}

impl BackwardRule for MulRule {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let (a, b) = (&ctx.inputs[0], &ctx.inputs[1]);
        let times = |other: &Tensor| {
            let data = ctx.grad.data().iter().zip(other.data()).map(|(g, o)| g * o).collect();
            Tensor::new(ctx.grad.shape(), data).expect("same shape")
        };
        vec![ctx.needs[0].then(|| times(b)), ctx.needs[1].then(|| times(a))]
    }
}

impl BackwardRule for ScaleRule {
    fn name(&self) -> &'static str {
        "mul_scalar"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let s = self.0;
        vec![Some(ctx.grad.map(|g| g * s))]
    }
}

impl BackwardRule for ShiftRule {
    fn name(&self) -> &'static str {
        "add_scalar"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        vec![Some(ctx.grad.clone())]
    }
}

impl BackwardRule for ReluRule {
    fn name(&self) -> &'static str {
        "max_with_zero"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let data = ctx
            .grad
            .data()
            .iter()
            .zip(ctx.output.data())
            .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
            .collect();
        vec![Some(Tensor::new(ctx.grad.shape(), data).expect("same shape"))]
    }
}

impl BackwardRule for SigmoidRule {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let data = ctx
            .grad
            .data()
            .iter()
            .zip(ctx.output.data())
            .map(|(g, y)| g * y * (1.0 - y))
            .collect();
        vec![Some(Tensor::new(ctx.grad.shape(), data).expect("same shape"))]
    }
}

impl BackwardRule for SumRule {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::full(ctx.inputs[0].shape(), ctx.grad.item()))]
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

impl Tape {
    pub fn elementwise(&self, kind: ElementwiseKind, a: &Var, b: Operand<'_>) -> Result<Var> {
        match (kind, b) {
            (ElementwiseKind::MaxWithZero, _) => Ok(self.relu(a)),
            (kind, Operand::Var(b)) => {
                let op = match kind {
                    ElementwiseKind::Add => "add",
                    ElementwiseKind::Sub => "sub",
                    _ => "mul",
                };
                a.value.same_shape(&b.value, op)?;
                Ok(match kind {
                    ElementwiseKind::Add => self.record(AddRule, &[a, b], zip_with(&a.value, &b.value, |x, y| x + y)),
                    ElementwiseKind::Sub => self.record(SubRule, &[a, b], zip_with(&a.value, &b.value, |x, y| x - y)),
                    _ => self.record(MulRule, &[a, b], zip_with(&a.value, &b.value, |x, y| x * y)),
                })
            }
            (ElementwiseKind::Add, Operand::Scalar(s)) => Ok(self.add_scalar(a, s)),
            (ElementwiseKind::Sub, Operand::Scalar(s)) => Ok(self.add_scalar(a, -s)),
            (ElementwiseKind::Mul, Operand::Scalar(s)) => Ok(self.mul_scalar(a, s)),
        }
    }

    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Add, a, Operand::Var(b))
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Sub, a, Operand::Var(b))
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Mul, a, Operand::Var(b))
    }

    pub fn mul_scalar(&self, a: &Var, s: f64) -> Var {
        self.record(ScaleRule(s), &[a], a.value.map(|v| v * s))
    }

    pub fn add_scalar(&self, a: &Var, s: f64) -> Var {
        self.record(ShiftRule, &[a], a.value.map(|v| v + s))
    }

    pub fn relu(&self, a: &Var) -> Var {
        let mut h = self.relu_pattern.get();
        for v in a.value.data() {
            h = (h ^ u64::from(*v > 0.0)).wrapping_mul(0x0100_0000_01b3);
        }
        self.relu_pattern.set(h);
        self.record(ReluRule, &[a], a.value.map(|v| v.max(0.0)))
    }

    pub fn sigmoid(&self, a: &Var) -> Var {
        self.record(SigmoidRule, &[a], a.value.map(|v| 1.0 / (1.0 + (-v).exp())))
    }

    pub fn sum(&self, a: &Var) -> Var {
        self.record(SumRule, &[a], Tensor::scalar(a.value.sum()))
    }

    pub fn mean(&self, a: &Var) -> Var {
        let s = self.sum(a);
        self.mul_scalar(&s, 1.0 / a.value.numel() as f64)
    }
}

// ---------------------------------------------------------------------------
// Finite-difference checking

/// Largest `|analytic - central difference| / max(1, |analytic|)` over every
/// coordinate of every input.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::invalid(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    check_scalar(&out)?;
    let grads = tape.backward(&out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(v)).collect();
    drop(grads);

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::no_grad();
        let vars: Vec<Var> = xs.iter().map(|t| Var::constant(t.clone())).collect();
        let y = f(&tape, &vars)?;
        check_scalar(&y)?;
        Ok(y.value().item())
    };

    let mut worst = 0.0_f64;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, g) in analytic.iter().enumerate() {
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + step;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = orig - step;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = g.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Single-input form of [`finite_diff_check_many`].
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&Tape, &Var) -> Result<Var>,
{
    finite_diff_check_many(|tape, xs| f(tape, &xs[0]), std::slice::from_ref(x), step)
}

fn check_scalar(v: &Var) -> Result<()> {
    if v.value().numel() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    if !v.value().item().is_finite() {
        return Err(Error::NonFinite("objective evaluated to a non-finite value".into()));
    }
    Ok(())
}
