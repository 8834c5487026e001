//! Scalar reverse-mode tape.
//!
//! Each arithmetic operation on a [`Var`] records one node holding the local
//! partial derivatives with respect to its (at most two) parents. A backward
//! sweep over the node list then accumulates adjoints. Values live inside the
//! `Var` handles, so nodes store only the adjacency data.

use std::cell::RefCell;

use crate::scalar::Scalar;

#[derive(Clone, Copy)]
struct Node {
    da: f64,
    db: f64,
    a: u32,
    b: u32,
}

/// Records the computation graph for one gradient evaluation.
///
/// A tape is single-threaded; reuse it across evaluations via [`Tape::clear`]
/// to keep the node allocation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Drop all nodes but keep the allocation.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
    }

    /// Create an input variable. Its adjoint is read off the gradient vector
    /// at the returned node index.
    pub fn var(&self, value: f64) -> Var<'_> {
        let index = self.push(Node {
            da: 0.0,
            db: 0.0,
            a: 0,
            b: 0,
        });
        Var {
            tape: self,
            value,
            index,
        }
    }

    fn push(&self, node: Node) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        assert!(index < u32::MAX as usize, "tape overflow");
        nodes.push(node);
        index as u32
    }

    /// Adjoints of every node with respect to `output`. Entry `i` is
    /// d(output)/d(node i); input variables are at the indices returned by
    /// [`Tape::var`].
    pub fn gradient(&self, output: Var<'_>) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        assert!(
            std::ptr::eq(output.tape, self),
            "gradient: output from a different tape"
        );
        let mut grads = vec![0.0_f64; nodes.len()];
        grads[output.index as usize] = 1.0;
        for (i, node) in nodes.iter().enumerate().rev() {
            let g = grads[i];
            if g == 0.0 {
                continue;
            }
            if node.da != 0.0 {
                grads[node.a as usize] += node.da * g;
            }
            if node.db != 0.0 {
                grads[node.b as usize] += node.db * g;
            }
        }
        grads
    }
}

/// A value recorded on a [`Tape`]. Cheap to copy; arithmetic on it both
/// computes the `f64` result and appends a node to the tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    value: f64,
    index: u32,
}

impl<'t> Var<'t> {
    /// Node index on the owning tape.
    pub fn index(self) -> u32 {
        self.index
    }

    fn unary(self, value: f64, da: f64) -> Var<'t> {
        let index = self.tape.push(Node {
            da,
            db: 0.0,
            a: self.index,
            b: self.index,
        });
        Var {
            tape: self.tape,
            value,
            index,
        }
    }

    fn binary(self, rhs: Var<'t>, value: f64, da: f64, db: f64) -> Var<'t> {
        debug_assert!(std::ptr::eq(self.tape, rhs.tape), "vars from different tapes");
        let index = self.tape.push(Node {
            da,
            db,
            a: self.index,
            b: rhs.index,
        });
        Var {
            tape: self.tape,
            value,
            index,
        }
    }
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.value)
    }
}

impl<'t> std::ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.value + rhs.value, 1.0, 1.0)
    }
}

impl<'t> std::ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.value - rhs.value, 1.0, -1.0)
    }
}

impl<'t> std::ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.value * rhs.value, rhs.value, self.value)
    }
}

impl<'t> std::ops::Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let inv = 1.0 / rhs.value;
        self.binary(rhs, self.value * inv, inv, -self.value * inv * inv)
    }
}

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(-self.value, -1.0)
    }
}

impl<'t> std::ops::Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.unary(self.value + rhs, 1.0)
    }
}

impl<'t> std::ops::Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.unary(self.value - rhs, 1.0)
    }
}

impl<'t> std::ops::Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.unary(self.value * rhs, rhs)
    }
}

impl<'t> std::ops::Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Var<'t> {
        self.unary(self.value / rhs, 1.0 / rhs)
    }
}

impl<'t> Scalar for Var<'t> {
    fn val(self) -> f64 {
        self.value
    }

    fn lit(self, value: f64) -> Self {
        // A constant node: no parents, so backward never reaches it.
        self.tape.var(value)
    }

    fn exp(self) -> Self {
        let value = self.value.exp();
        self.unary(value, value)
    }

    fn ln(self) -> Self {
        self.unary(self.value.ln(), 1.0 / self.value)
    }

    fn sqrt(self) -> Self {
        let value = self.value.sqrt();
        self.unary(value, 0.5 / value)
    }

    fn powi(self, n: i32) -> Self {
        let value = self.value.powi(n);
        self.unary(value, f64::from(n) * self.value.powi(n - 1))
    }
}
