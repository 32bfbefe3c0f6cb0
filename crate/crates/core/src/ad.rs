//! Tape-based reverse-mode differentiation.
//!
//! A [`Var`] is a primal value plus an index into a thread-local tape. Each
//! arithmetic operation appends one node holding at most two parent indices
//! and the local partial derivatives. [`value_and_gradient`] opens a session,
//! runs a closure over leaf variables and sweeps the tape backwards.
//!
//! Sessions are strictly per thread and must not nest. Constants (frozen
//! parameters, data) never touch the tape.

use std::cell::{Cell, RefCell};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, Sub, SubAssign};

use num_traits::{Num, One, Zero};

use crate::scalar::Real;

const NONE: u32 = u32::MAX;
const LEAF: u32 = u32::MAX - 1;
// a == WIDE: parents live in `links[b .. b + da as usize]`
const WIDE: u32 = u32::MAX - 2;

#[derive(Clone, Copy)]
struct Node {
    a: u32,
    b: u32,
    da: f64,
    db: f64,
}

#[derive(Default)]
struct Tape {
    nodes: Vec<Node>,
    links: Vec<(u32, f64)>,
}

impl Tape {
    fn clear(&mut self) {
        self.nodes.clear();
        self.links.clear();
    }
}

thread_local! {
    static TAPE: RefCell<Tape> = RefCell::new(Tape::default());
    static ACTIVE: Cell<bool> = const { Cell::new(false) };
}

/// Scalar tracked on the reverse-mode tape.
#[derive(Clone, Copy, Debug)]
pub struct Var {
    val: f64,
    idx: u32,
}

impl Var {
    /// A value that is not differentiated.
    #[inline]
    pub fn constant(val: f64) -> Self {
        Var { val, idx: NONE }
    }

    #[inline]
    pub fn is_constant(&self) -> bool {
        self.idx == NONE
    }

    #[inline]
    fn push(val: f64, a: u32, da: f64, b: u32, db: f64) -> Self {
        if a == NONE && b == NONE {
            return Var::constant(val);
        }
        let idx = TAPE.with(|t| {
            let mut t = t.borrow_mut();
            let i = t.nodes.len();
            assert!(i < WIDE as usize, "reverse-mode tape overflow");
            t.nodes.push(Node { a, b, da, db });
            i as u32
        });
        Var { val, idx }
    }

    /// Records a node with an arbitrary number of `(parent, partial)` links.
    fn push_wide(val: f64, links: impl Iterator<Item = (Var, f64)>) -> Self {
        TAPE.with(|t| {
            let mut t = t.borrow_mut();
            let start = t.links.len();
            for (v, d) in links {
                if !v.is_constant() {
                    t.links.push((v.idx, d));
                }
            }
            let len = t.links.len() - start;
            if len == 0 {
                return Var::constant(val);
            }
            let i = t.nodes.len();
            assert!(i < WIDE as usize, "reverse-mode tape overflow");
            t.nodes.push(Node { a: WIDE, b: start as u32, da: len as f64, db: 0.0 });
            Var { val, idx: i as u32 }
        })
    }

    #[inline]
    fn unary(self, val: f64, d: f64) -> Self {
        Var::push(val, self.idx, d, NONE, 0.0)
    }
}

/// Number of nodes currently recorded on this thread's tape.
pub fn tape_len() -> usize {
    TAPE.with(|t| t.borrow().nodes.len())
}

struct Session;

impl Session {
    fn open() -> Self {
        ACTIVE.with(|a| {
            assert!(!a.get(), "nested reverse-mode sessions are not supported");
            a.set(true);
        });
        TAPE.with(|t| t.borrow_mut().clear());
        Session
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        TAPE.with(|t| t.borrow_mut().clear());
        ACTIVE.with(|a| a.set(false));
    }
}

/// Evaluates `f` at `x` and returns its value together with the gradient.
///
/// Coordinates with `active[i] == false` enter `f` as constants and receive
/// an exactly zero gradient.
pub fn value_and_gradient<E>(
    x: &[f64],
    active: &[bool],
    f: impl FnOnce(&[Var]) -> Result<Var, E>,
) -> Result<(f64, Vec<f64>), E> {
    assert_eq!(x.len(), active.len());
    let _session = Session::open();
    let leaves: Vec<Var> = x
        .iter()
        .zip(active)
        .map(|(&v, &on)| {
            if on {
                Var::push(v, LEAF, 0.0, NONE, 0.0)
            } else {
                Var::constant(v)
            }
        })
        .collect();
    let out = f(&leaves)?;
    let mut grad = vec![0.0; x.len()];
    if out.is_constant() {
        return Ok((out.val, grad));
    }
    TAPE.with(|t| {
        let t = t.borrow();
        let mut adj = vec![0.0f64; t.nodes.len()];
        adj[out.idx as usize] = 1.0;
        for i in (0..t.nodes.len()).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            let n = t.nodes[i];
            if n.a == WIDE {
                let start = n.b as usize;
                for &(p, d) in &t.links[start..start + n.da as usize] {
                    adj[p as usize] += g * d;
                }
                continue;
            }
            if n.a < WIDE {
                adj[n.a as usize] += g * n.da;
            }
            if n.b < WIDE {
                adj[n.b as usize] += g * n.db;
            }
        }
        for (gi, leaf) in grad.iter_mut().zip(&leaves) {
            if !leaf.is_constant() {
                *gi = adj[leaf.idx as usize];
            }
        }
    });
    Ok((out.val, grad))
}

impl PartialEq for Var {
    fn eq(&self, other: &Self) -> bool {
        self.val == other.val
    }
}

impl PartialOrd for Var {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        self.val.partial_cmp(&other.val)
    }
}

impl Add for Var {
    type Output = Var;
    #[inline]
    fn add(self, rhs: Var) -> Var {
        if rhs.is_constant() && rhs.val == 0.0 {
            return self;
        }
        if self.is_constant() && self.val == 0.0 {
            return rhs;
        }
        Var::push(self.val + rhs.val, self.idx, 1.0, rhs.idx, 1.0)
    }
}

impl Sub for Var {
    type Output = Var;
    #[inline]
    fn sub(self, rhs: Var) -> Var {
        if rhs.is_constant() && rhs.val == 0.0 {
            return self;
        }
        Var::push(self.val - rhs.val, self.idx, 1.0, rhs.idx, -1.0)
    }
}

impl Mul for Var {
    type Output = Var;
    #[inline]
    fn mul(self, rhs: Var) -> Var {
        if (self.is_constant() && self.val == 0.0) || (rhs.is_constant() && rhs.val == 0.0) {
            return Var::constant(0.0);
        }
        Var::push(self.val * rhs.val, self.idx, rhs.val, rhs.idx, self.val)
    }
}

impl Div for Var {
    type Output = Var;
    #[inline]
    fn div(self, rhs: Var) -> Var {
        let inv = 1.0 / rhs.val;
        let q = self.val * inv;
        Var::push(q, self.idx, inv, rhs.idx, -q * inv)
    }
}

impl Rem for Var {
    type Output = Var;
    fn rem(self, rhs: Var) -> Var {
        // d(a mod b)/da = 1 away from discontinuities; only needed for trait completeness
        let r = self.val % rhs.val;
        let k = (self.val / rhs.val).trunc();
        Var::push(r, self.idx, 1.0, rhs.idx, -k)
    }
}

impl Neg for Var {
    type Output = Var;
    #[inline]
    fn neg(self) -> Var {
        self.unary(-self.val, -1.0)
    }
}

impl AddAssign for Var {
    fn add_assign(&mut self, rhs: Var) {
        *self = *self + rhs;
    }
}

impl SubAssign for Var {
    fn sub_assign(&mut self, rhs: Var) {
        *self = *self - rhs;
    }
}

impl MulAssign for Var {
    fn mul_assign(&mut self, rhs: Var) {
        *self = *self * rhs;
    }
}

impl DivAssign for Var {
    fn div_assign(&mut self, rhs: Var) {
        *self = *self / rhs;
    }
}

impl Zero for Var {
    fn zero() -> Self {
        Var::constant(0.0)
    }
    fn is_zero(&self) -> bool {
        self.val == 0.0
    }
}

impl One for Var {
    fn one() -> Self {
        Var::constant(1.0)
    }
}

impl Num for Var {
    type FromStrRadixErr = num_traits::ParseFloatError;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(Var::constant)
    }
}

impl Sum for Var {
    fn sum<I: Iterator<Item = Var>>(iter: I) -> Var {
        iter.fold(Var::zero(), |acc, x| acc + x)
    }
}

impl Real for Var {
    #[inline]
    fn from_f64(v: f64) -> Self {
        Var::constant(v)
    }
    #[inline]
    fn value(self) -> f64 {
        self.val
    }
    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }
    fn ln(self) -> Self {
        self.unary(self.val.ln(), 1.0 / self.val)
    }
    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        self.unary(s, 0.5 / s)
    }
    fn tanh(self) -> Self {
        let t = self.val.tanh();
        self.unary(t, 1.0 - t * t)
    }
    fn abs(self) -> Self {
        let d = if self.val >= 0.0 { 1.0 } else { -1.0 };
        self.unary(self.val.abs(), d)
    }
    fn powi(self, n: i32) -> Self {
        let d = if n == 0 { 0.0 } else { n as f64 * self.val.powi(n - 1) };
        self.unary(self.val.powi(n), d)
    }

    fn dot(a: &[Self], b: &[Self]) -> Self {
        let val = a.iter().zip(b).map(|(x, y)| x.val * y.val).sum();
        let links = a.iter().zip(b).flat_map(|(&x, &y)| [(x, y.val), (y, x.val)]);
        Var::push_wide(val, links)
    }

    fn gauss_factor(scale: Self, log_offset: Self, m: &[Self], c: &[Self], e: &[Self]) -> Self {
        let mut s = 0.0;
        for ((mi, ci), ei) in m.iter().zip(c).zip(e) {
            let r = mi.val - ci.val;
            s += ei.val * r * r;
        }
        let ex = (log_offset.val - s).exp();
        let f = scale.val * ex;
        let per_dim = m.iter().zip(c).zip(e).flat_map(|((&mi, &ci), &ei)| {
            let r = mi.val - ci.val;
            let dm = -2.0 * f * ei.val * r;
            [(mi, dm), (ci, -dm), (ei, -f * r * r)]
        });
        Var::push_wide(f, [(scale, ex), (log_offset, f)].into_iter().chain(per_dim))
    }
}
