//! Ordered weighted averaging primitives.
//!
//! A linguistic quantifier `Q: [0,1] -> [0,1]` (monotone, `Q(0) = 0`,
//! `Q(1) = 1`) turns rank positions into weights through
//! `w_i = Q(i/n) - Q((i-1)/n)`. The IOWA operator then sorts its arguments by
//! an auxiliary order-inducing value and takes the weighted sum in that order.
//!
//! Segments of zero length (`a == b`, `b == c`) are evaluated as
//! right-continuous steps. `Q(0) = 0` and `Q(1) = 1` hold for every valid
//! parameter set, including `a == b == 0`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{FlError, Result};
use crate::model::ParamVector;

/// A monotone map from the unit interval onto itself.
pub trait Quantifier {
    fn eval(&self, x: f64) -> f64;
}

impl<F: Fn(f64) -> f64> Quantifier for F {
    fn eval(&self, x: f64) -> f64 {
        self(x)
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(FlError::InvalidQuantifier(format!(
            "{name} = {v} is outside [0, 1]"
        )));
    }
    Ok(())
}

/// The two-parameter quantifier `Q_{a,b}`: zero up to `a`, linear on
/// `[a, b]`, one from `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StandardQuantifier {
    a: f64,
    b: f64,
}

impl StandardQuantifier {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        check_unit("a", a)?;
        check_unit("b", b)?;
        if a > b {
            return Err(FlError::InvalidQuantifier(format!(
                "a = {a} must not exceed b = {b}"
            )));
        }
        Ok(Self { a, b })
    }

    /// "At least 80%": `Q_{0, 0.8}`.
    pub fn at_least_80() -> Self {
        Self { a: 0.0, b: 0.8 }
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }
}

impl Quantifier for StandardQuantifier {
    fn eval(&self, x: f64) -> f64 {
        let (a, b) = (self.a, self.b);
        if x <= 0.0 {
            0.0
        } else if x >= 1.0 || x >= b {
            1.0
        } else if x < a {
            0.0
        } else {
            // a <= x < b, so b > a
            ((x - a) / (b - a)).clamp(0.0, 1.0)
        }
    }
}

/// Parameters `(a, b, c, y_b)` of the four-piece dynamic quantifier.
///
/// `b` marks the top share of clients that jointly receive weight `y_b`;
/// `c` is the share of clients kept at all, everything ranked past `c` gets
/// zero weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantifierParams {
    a: f64,
    b: f64,
    c: f64,
    y_b: f64,
}

impl QuantifierParams {
    pub fn new(a: f64, b: f64, c: f64, y_b: f64) -> Result<Self> {
        check_unit("a", a)?;
        check_unit("b", b)?;
        check_unit("c", c)?;
        check_unit("y_b", y_b)?;
        if !(a <= b && b <= c) {
            return Err(FlError::InvalidQuantifier(format!(
                "expected a <= b <= c, got a = {a}, b = {b}, c = {c}"
            )));
        }
        Ok(Self { a, b, c, y_b })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn y_b(&self) -> f64 {
        self.y_b
    }
}

impl Quantifier for QuantifierParams {
    fn eval(&self, x: f64) -> f64 {
        let QuantifierParams { a, b, c, y_b } = *self;
        let q = if x <= 0.0 {
            0.0
        } else if x >= 1.0 || x >= c {
            1.0
        } else if x < a {
            0.0
        } else if x < b {
            (x - a) / (b - a) * y_b
        } else {
            (x - b) / (c - b) * (1.0 - y_b) + y_b
        };
        q.clamp(0.0, 1.0)
    }
}

/// Evaluates `Q_{a,b}(x)`.
pub fn q_standard(x: f64, a: f64, b: f64) -> Result<f64> {
    Ok(StandardQuantifier::new(a, b)?.eval(x))
}

/// Evaluates `Q_{a,b,c,y_b}(x)`.
pub fn q_dynamic(x: f64, p: &QuantifierParams) -> Result<f64> {
    // Re-validate: the fields are private but the struct is deserializable.
    let p = QuantifierParams::new(p.a, p.b, p.c, p.y_b)?;
    Ok(p.eval(x))
}

/// Normalized non-negative aggregation weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    /// Validates non-negativity and unit sum.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(FlError::EmptyAggregation);
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(FlError::InvalidQuantifier(format!("negative or non-finite weight {w}")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(FlError::InvalidQuantifier(format!("weights sum to {sum}")));
        }
        Ok(Self(weights))
    }

    /// `(1/n, ..., 1/n)`.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(FlError::EmptyAggregation);
        }
        Ok(Self(vec![1.0 / n as f64; n]))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for WeightVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// `w_i = Q(i/n) - Q((i-1)/n)` for `i = 1..=n`.
pub fn weights_from_quantifier<Q: Quantifier + ?Sized>(n: usize, q: &Q) -> Result<WeightVector> {
    if n == 0 {
        return Err(FlError::EmptyAggregation);
    }
    let nf = n as f64;
    let mut prev = q.eval(0.0);
    let weights = (1..=n)
        .map(|i| {
            let cur = q.eval(i as f64 / nf);
            // clamp absorbs sub-ulp non-monotonicity across piece boundaries
            let w = (cur - prev).max(0.0);
            prev = cur;
            w
        })
        .collect();
    WeightVector::new(weights)
}

/// One argument of an IOWA aggregation: the order-inducing value, a stable
/// identifier used to break ties, and the vector being aggregated.
#[derive(Debug, Clone, Copy)]
pub struct InducedArg<'a> {
    pub inducing: f64,
    pub id: usize,
    pub value: &'a ParamVector,
}

impl<'a> InducedArg<'a> {
    pub fn new(inducing: f64, id: usize, value: &'a ParamVector) -> Self {
        Self { inducing, id, value }
    }
}

/// Positions of `keys` sorted by inducing value descending, ties by id
/// ascending.
pub fn induced_order(keys: &[(f64, usize)]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&i, &j| {
        let (ui, ii) = keys[i];
        let (uj, ij) = keys[j];
        match uj.total_cmp(&ui) {
            Ordering::Equal => ii.cmp(&ij),
            o => o,
        }
    });
    idx
}

/// `sum_i w_i * v_sigma(i)`, where `sigma` orders the arguments by inducing
/// value. Accumulation runs in rank order.
pub fn iowa_aggregate(args: &[InducedArg<'_>], weights: &WeightVector) -> Result<ParamVector> {
    if args.is_empty() {
        return Err(FlError::EmptyAggregation);
    }
    if args.len() != weights.len() {
        return Err(FlError::Arity {
            expected: weights.len(),
            found: args.len(),
        });
    }
    let first = args[0].value;
    for arg in &args[1..] {
        first.check_same_shape(arg.value)?;
    }
    let keys: Vec<(f64, usize)> = args.iter().map(|a| (a.inducing, a.id)).collect();
    let order = induced_order(&keys);
    let ordered: Vec<&ParamVector> = order.iter().map(|&i| args[i].value).collect();
    Ok(weighted_sum(&ordered, weights.as_slice()))
}

/// Rank-order weighted sum; callers guarantee equal shapes and lengths.
pub(crate) fn weighted_sum(vectors: &[&ParamVector], coefficients: &[f64]) -> ParamVector {
    let mut out = vec![0.0; vectors[0].len()];
    for (v, &w) in vectors.iter().zip(coefficients) {
        for (acc, x) in out.iter_mut().zip(v.values()) {
            *acc += w * x;
        }
    }
    vectors[0].with_values(out)
}
