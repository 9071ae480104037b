//! A minimal scalar reverse-mode tape.
//!
//! The trainer itself uses hand-written batched backward passes; the tape
//! exists to state the straight-through rules in one place and to check those
//! passes against on small expressions.

use std::cell::RefCell;
use std::ops::{Add, Mul, Neg, Sub};

use crate::cyclic::CyclicSpec;
use crate::fxp::{QuantKind, QuantScheme};

/// Backward rule attached to a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    Leaf,
    Add,
    Sub,
    Mul,
    Neg,
    Scale,
    Square,
    Relu,
    /// Rounding with an identity (straight-through) gradient inside the clamp range.
    Ste,
    Cyclic,
    Hinge,
}

#[derive(Debug, Clone, Copy)]
struct Node {
    rule: Rule,
    parents: [usize; 2],
    partials: [f64; 2],
    arity: usize,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// A scalar on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Value<'t> {
    tape: &'t Tape,
    index: usize,
    value: f64,
}

/// Gradients of one output with respect to every node.
#[derive(Debug, Clone)]
pub struct Gradients(Vec<f64>);

impl Gradients {
    pub fn wrt(&self, v: Value<'_>) -> f64 {
        self.0[v.index]
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: f64, rule: Rule, parents: &[(usize, f64)]) -> Value<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let mut node = Node {
            rule,
            parents: [0; 2],
            partials: [0.0; 2],
            arity: parents.len(),
        };
        for (k, &(p, d)) in parents.iter().enumerate() {
            node.parents[k] = p;
            node.partials[k] = d;
        }
        nodes.push(node);
        Value {
            tape: self,
            index: nodes.len() - 1,
            value,
        }
    }

    pub fn var(&self, value: f64) -> Value<'_> {
        self.push(value, Rule::Leaf, &[])
    }

    pub fn backward(&self, out: Value<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut g = vec![0.0; nodes.len()];
        g[out.index] = 1.0;
        for i in (0..=out.index).rev() {
            let n = nodes[i];
            for k in 0..n.arity {
                g[n.parents[k]] += g[i] * n.partials[k];
            }
        }
        Gradients(g)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<'t> Value<'t> {
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn rule(&self) -> Rule {
        self.tape.nodes.borrow()[self.index].rule
    }

    fn unary(self, value: f64, rule: Rule, d: f64) -> Value<'t> {
        self.tape.push(value, rule, &[(self.index, d)])
    }

    pub fn scale(self, k: f64) -> Value<'t> {
        self.unary(self.value * k, Rule::Scale, k)
    }

    pub fn square(self) -> Value<'t> {
        self.unary(self.value * self.value, Rule::Square, 2.0 * self.value)
    }

    pub fn relu(self) -> Value<'t> {
        let on = self.value > 0.0;
        self.unary(if on { self.value } else { 0.0 }, Rule::Relu, on as u8 as f64)
    }

    /// Uniform quantize-dequantize; see [`ste_quantize`].
    pub fn ste(self, scheme: &QuantScheme) -> Value<'t> {
        let (v, d) = ste_quantize(self.value, scheme);
        self.unary(v, Rule::Ste, d)
    }

    pub fn cyclic(self, spec: &CyclicSpec) -> Value<'t> {
        self.unary(spec.apply(self.value), Rule::Cyclic, spec.derivative(self.value))
    }

    /// `max(|x| - edge, 0)` with subgradient 0 at the hinge.
    pub fn hinge(self, edge: f64) -> Value<'t> {
        let excess = self.value.abs() - edge;
        if excess > 0.0 {
            self.unary(excess, Rule::Hinge, self.value.signum())
        } else {
            self.unary(0.0, Rule::Hinge, 0.0)
        }
    }

    pub fn sum(values: &[Value<'t>]) -> Option<Value<'t>> {
        let mut it = values.iter().copied();
        let first = it.next()?;
        Some(it.fold(first, |acc, v| acc + v))
    }
}

impl<'t> Add for Value<'t> {
    type Output = Value<'t>;

    fn add(self, rhs: Self) -> Self::Output {
        self.tape
            .push(self.value + rhs.value, Rule::Add, &[(self.index, 1.0), (rhs.index, 1.0)])
    }
}

impl<'t> Sub for Value<'t> {
    type Output = Value<'t>;

    fn sub(self, rhs: Self) -> Self::Output {
        self.tape
            .push(self.value - rhs.value, Rule::Sub, &[(self.index, 1.0), (rhs.index, -1.0)])
    }
}

impl<'t> Mul for Value<'t> {
    type Output = Value<'t>;

    fn mul(self, rhs: Self) -> Self::Output {
        self.tape.push(
            self.value * rhs.value,
            Rule::Mul,
            &[(self.index, rhs.value), (rhs.index, self.value)],
        )
    }
}

impl<'t> Neg for Value<'t> {
    type Output = Value<'t>;

    fn neg(self) -> Self::Output {
        self.unary(-self.value, Rule::Neg, -1.0)
    }
}

/// Quantize-dequantize `Δ · clamp(round(x / Δ))` and its straight-through
/// derivative: 1 while `x / Δ` lies inside the clamp range, 0 outside.
///
/// Non-uniform schemes are treated as their `[-1, 1]` code range.
pub fn ste_quantize(x: f64, scheme: &QuantScheme) -> (f64, f64) {
    let step = scheme.step_size();
    let (lo, hi) = scheme.range();
    let r = x / step;
    let q = r.round().clamp(lo as f64, hi as f64);
    let q = match scheme.kind() {
        QuantKind::Binary if q == 0.0 => 1.0,
        _ => q,
    };
    let inside = r >= lo as f64 && r <= hi as f64;
    (q * step, inside as u8 as f64)
}
