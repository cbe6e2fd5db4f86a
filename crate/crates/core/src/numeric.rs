//! Scalar arithmetic backends for potentials.
//!
//! The protocol's update rule only ever adds potentials and divides them by
//! the epoch's mixing divisor `d`, so every value that can appear within an
//! epoch is exactly `N / d^e` for a big integer `N` and the number of rounds
//! elapsed `e`. [`ExactScalar`] keeps that form verbatim (no GCD reduction),
//! which makes every threshold and range comparison in the protocol sharp.
//! [`FloatScalar`] is the fast backend for larger networks; its comparisons
//! take an absolute tolerance that widens the accepting side of each test.

use std::cmp::Ordering;
use std::fmt;

use num_bigint::BigUint;
use num_traits::{ToPrimitive, Zero};
use serde::Serialize;
use thiserror::Error;

/// Default absolute tolerance for float-backend threshold comparisons.
pub const DEFAULT_FLOAT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("scalar base must be at least 2, got {0}")]
    BadBase(u32),
    #[error("scalar bases differ: {0} vs {1}")]
    BaseMismatch(u32, u32),
    #[error("divisor {divisor} does not match scalar base {base}")]
    DivisorMismatch { divisor: u32, base: u32 },
    #[error("subtraction result would be negative")]
    NegativeResult,
    #[error("float scalar must be finite, got {0}")]
    NotFinite(f64),
}

/// Which arithmetic a run uses. One backend per run, end to end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "tag")]
pub enum Backend {
    Exact,
    Float64 { tolerance: f64 },
}

impl Backend {
    pub fn float64() -> Self {
        Backend::Float64 {
            tolerance: DEFAULT_FLOAT_TOLERANCE,
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Backend::Exact => write!(f, "exact"),
            Backend::Float64 { .. } => write!(f, "float64"),
        }
    }
}

/// Exact nonnegative rational of the form `numerator / base^denominator_log`.
///
/// Kept unreduced: the protocol divides only by the epoch's `d`, so scalars
/// of one epoch share exponents and add by plain integer addition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExactScalar {
    num: BigUint,
    exp: u64,
    base: u32,
}

impl ExactScalar {
    pub fn new(num: BigUint, exp: u64, base: u32) -> Result<Self, NumericError> {
        if base < 2 {
            return Err(NumericError::BadBase(base));
        }
        Ok(ExactScalar { num, exp, base })
    }

    pub fn zero(base: u32) -> Self {
        ExactScalar {
            num: BigUint::zero(),
            exp: 0,
            base,
        }
    }

    pub fn one(base: u32) -> Self {
        ExactScalar {
            num: BigUint::from(1u32),
            exp: 0,
            base,
        }
    }

    pub fn from_integer(v: u64, base: u32) -> Self {
        ExactScalar {
            num: BigUint::from(v),
            exp: 0,
            base,
        }
    }

    pub fn numerator(&self) -> &BigUint {
        &self.num
    }

    pub fn exponent(&self) -> u64 {
        self.exp
    }

    pub fn base(&self) -> u32 {
        self.base
    }

    pub fn is_zero(&self) -> bool {
        self.num.is_zero()
    }

    fn check_base(&self, other: &Self) -> Result<(), NumericError> {
        if self.base != other.base {
            Err(NumericError::BaseMismatch(self.base, other.base))
        } else {
            Ok(())
        }
    }

    /// Numerator rescaled to a target exponent `exp >= self.exp`.
    fn num_at(&self, exp: u64) -> BigUint {
        debug_assert!(exp >= self.exp);
        if exp == self.exp || self.num.is_zero() {
            self.num.clone()
        } else {
            &self.num * pow_base(self.base, exp - self.exp)
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self, NumericError> {
        self.check_base(other)?;
        let exp = self.exp.max(other.exp);
        Ok(ExactScalar {
            num: self.num_at(exp) + other.num_at(exp),
            exp,
            base: self.base,
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self, NumericError> {
        self.check_base(other)?;
        let exp = self.exp.max(other.exp);
        let a = self.num_at(exp);
        let b = other.num_at(exp);
        if a < b {
            return Err(NumericError::NegativeResult);
        }
        Ok(ExactScalar {
            num: a - b,
            exp,
            base: self.base,
        })
    }

    /// Division by the base: the exponent ticks up, the numerator is kept.
    pub fn div_base(&self, d: u32) -> Result<Self, NumericError> {
        if d != self.base {
            return Err(NumericError::DivisorMismatch {
                divisor: d,
                base: self.base,
            });
        }
        Ok(ExactScalar {
            num: self.num.clone(),
            exp: self.exp + 1,
            base: self.base,
        })
    }

    pub fn mul_small(&self, m: u32) -> Self {
        ExactScalar {
            num: &self.num * m,
            exp: self.exp,
            base: self.base,
        }
    }

    /// True rational ordering; representations may differ in exponent.
    pub fn compare(&self, other: &Self) -> Result<Ordering, NumericError> {
        self.check_base(other)?;
        if self.exp == other.exp {
            return Ok(self.num.cmp(&other.num));
        }
        let exp = self.exp.max(other.exp);
        Ok(self.num_at(exp).cmp(&other.num_at(exp)))
    }

    /// Ordering against the plain rational `num/den`.
    pub fn cmp_ratio(&self, num: u64, den: u64) -> Ordering {
        let lhs = &self.num * den;
        let rhs = BigUint::from(num) * pow_base(self.base, self.exp);
        lhs.cmp(&rhs)
    }

    /// Value equality against 1, independent of representation.
    pub fn is_one(&self) -> bool {
        self.cmp_ratio(1, 1) == Ordering::Equal
    }

    /// `"N/b^e"` form; plain `"N"` when the exponent is zero.
    pub fn ratio_string(&self) -> String {
        if self.exp == 0 {
            self.num.to_string()
        } else {
            format!("{}/{}^{}", self.num, self.base, self.exp)
        }
    }

    /// Decimal with up to 30 significant digits (exact when shorter).
    pub fn decimal_string(&self) -> String {
        decimal_of_ratio(&self.num, &pow_base(self.base, self.exp), 30)
    }

    pub fn to_f64(&self) -> f64 {
        if self.num.is_zero() {
            return 0.0;
        }
        let log2 = log2_big(&self.num) - self.exp as f64 * (self.base as f64).log2();
        log2.exp2()
    }
}

/// Finite binary64 scalar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FloatScalar {
    value: f64,
}

impl FloatScalar {
    pub fn new(value: f64) -> Result<Self, NumericError> {
        if !value.is_finite() {
            return Err(NumericError::NotFinite(value));
        }
        Ok(FloatScalar { value })
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn add(&self, other: &Self) -> Self {
        FloatScalar {
            value: self.value + other.value,
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        FloatScalar {
            value: self.value - other.value,
        }
    }

    pub fn div_base(&self, d: u32) -> Self {
        FloatScalar {
            value: self.value / d as f64,
        }
    }

    pub fn mul_small(&self, m: u32) -> Self {
        FloatScalar {
            value: self.value * m as f64,
        }
    }

    /// Ordering with absolute tolerance: values within `tol` are equal.
    pub fn compare(&self, other: &Self, tol: f64) -> Ordering {
        compare_f64(self.value, other.value, tol)
    }
}

fn compare_f64(a: f64, b: f64, tol: f64) -> Ordering {
    if (a - b).abs() <= tol {
        Ordering::Equal
    } else if a < b {
        Ordering::Less
    } else {
        Ordering::Greater
    }
}

/// Rendered scalar for traces and reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ScalarRepr {
    Exact { ratio: String, decimal: String },
    Float { value: f64 },
}

impl ScalarRepr {
    /// The decimal column form: 30 significant digits for exact scalars,
    /// 17 for floats.
    pub fn csv_cell(&self) -> String {
        match self {
            ScalarRepr::Exact { decimal, .. } => decimal.clone(),
            ScalarRepr::Float { value } => format!("{:.16e}", value),
        }
    }
}

/// Arithmetic context a run is generic over: the operations the protocol and
/// engine need, specialized per backend. The context owns the epoch's divisor
/// `d` (the exact scalar base) and, for floats, the comparison tolerance.
pub trait PotentialMath: Clone {
    type S: Clone + fmt::Debug;

    fn base(&self) -> u32;

    /// The same backend retargeted at a new epoch's divisor.
    fn for_divisor(&self, d: u32) -> Self;

    fn zero(&self) -> Self::S;
    fn one(&self) -> Self::S;
    fn is_zero(&self, s: &Self::S) -> bool;

    /// One application of the round update for a node with `inbox_len`
    /// neighbors, all of them normal: `phi*(d-m)/d + sum(inbox)/d`. This is
    /// the fused form of add/div_base and must agree with them exactly.
    fn mix<'a, I>(&self, own: &Self::S, inbox: I, inbox_len: u32) -> Self::S
    where
        I: Iterator<Item = &'a Self::S>,
        Self::S: 'a;

    /// Leader consumption support: `rho += phi`, rebasing as needed.
    fn accumulate(&self, rho: &mut Self::S, phi: &Self::S);

    /// Ordering of a scalar against `num/den`, tolerance-widened on floats.
    fn cmp_ratio(&self, s: &Self::S, num: u64, den: u64) -> Ordering;

    /// Ordering of two scalars, tolerance-widened on floats.
    fn compare(&self, a: &Self::S, b: &Self::S) -> Ordering;

    /// Exact numerator/exponent view, when the backend has one. Lets
    /// instrumentation and the matrix oracle work on raw integers.
    fn exact_view<'a>(&self, s: &'a Self::S) -> Option<(&'a BigUint, u64)>;

    fn approx_f64(&self, s: &Self::S) -> f64;

    fn render(&self, s: &Self::S) -> ScalarRepr;
}

/// Exact backend context for one epoch's divisor.
#[derive(Debug, Clone, Copy)]
pub struct ExactCtx {
    pub d: u32,
}

impl PotentialMath for ExactCtx {
    type S = ExactScalar;

    fn base(&self) -> u32 {
        self.d
    }

    fn for_divisor(&self, d: u32) -> Self {
        ExactCtx { d }
    }

    fn zero(&self) -> ExactScalar {
        ExactScalar::zero(self.d)
    }

    fn one(&self) -> ExactScalar {
        ExactScalar::one(self.d)
    }

    fn is_zero(&self, s: &ExactScalar) -> bool {
        s.is_zero()
    }

    fn mix<'a, I>(&self, own: &ExactScalar, inbox: I, inbox_len: u32) -> ExactScalar
    where
        I: Iterator<Item = &'a ExactScalar>,
    {
        debug_assert!(inbox_len < self.d);
        // zero is exponent-free (0/d^a equals 0/d^b), which matters for the
        // leader right after consuming its potential; every nonzero operand
        // must be in lockstep
        let mut exp = (!own.num.is_zero()).then_some(own.exp);
        let mut acc = &own.num * (self.d - inbox_len);
        for m in inbox {
            if !m.num.is_zero() {
                match exp {
                    None => exp = Some(m.exp),
                    Some(e) => debug_assert_eq!(m.exp, e, "lockstep exponents diverged"),
                }
            }
            acc += &m.num;
        }
        ExactScalar {
            num: acc,
            exp: exp.unwrap_or(own.exp) + 1,
            base: self.d,
        }
    }

    fn accumulate(&self, rho: &mut ExactScalar, phi: &ExactScalar) {
        debug_assert!(phi.exp >= rho.exp);
        if rho.num.is_zero() {
            *rho = phi.clone();
            return;
        }
        let shifted = rho.num_at(phi.exp);
        rho.num = shifted + &phi.num;
        rho.exp = phi.exp;
    }

    fn cmp_ratio(&self, s: &ExactScalar, num: u64, den: u64) -> Ordering {
        s.cmp_ratio(num, den)
    }

    fn compare(&self, a: &ExactScalar, b: &ExactScalar) -> Ordering {
        a.compare(b).expect("one run uses one base")
    }

    fn exact_view<'a>(&self, s: &'a ExactScalar) -> Option<(&'a BigUint, u64)> {
        Some((&s.num, s.exp))
    }

    fn approx_f64(&self, s: &ExactScalar) -> f64 {
        s.to_f64()
    }

    fn render(&self, s: &ExactScalar) -> ScalarRepr {
        ScalarRepr::Exact {
            ratio: s.ratio_string(),
            decimal: s.decimal_string(),
        }
    }
}

/// Float backend context.
#[derive(Debug, Clone, Copy)]
pub struct FloatCtx {
    pub d: u32,
    pub tolerance: f64,
}

impl PotentialMath for FloatCtx {
    type S = FloatScalar;

    fn base(&self) -> u32 {
        self.d
    }

    fn for_divisor(&self, d: u32) -> Self {
        FloatCtx { d, tolerance: self.tolerance }
    }

    fn zero(&self) -> FloatScalar {
        FloatScalar { value: 0.0 }
    }

    fn one(&self) -> FloatScalar {
        FloatScalar { value: 1.0 }
    }

    fn is_zero(&self, s: &FloatScalar) -> bool {
        s.value == 0.0
    }

    fn mix<'a, I>(&self, own: &FloatScalar, inbox: I, inbox_len: u32) -> FloatScalar
    where
        I: Iterator<Item = &'a FloatScalar>,
    {
        debug_assert!(inbox_len < self.d);
        let mut acc = own.value * (self.d - inbox_len) as f64;
        for m in inbox {
            acc += m.value;
        }
        FloatScalar {
            value: acc / self.d as f64,
        }
    }

    fn accumulate(&self, rho: &mut FloatScalar, phi: &FloatScalar) {
        rho.value += phi.value;
    }

    fn cmp_ratio(&self, s: &FloatScalar, num: u64, den: u64) -> Ordering {
        compare_f64(s.value, num as f64 / den as f64, self.tolerance)
    }

    fn compare(&self, a: &FloatScalar, b: &FloatScalar) -> Ordering {
        compare_f64(a.value, b.value, self.tolerance)
    }

    fn exact_view<'a>(&self, _s: &'a FloatScalar) -> Option<(&'a BigUint, u64)> {
        None
    }

    fn approx_f64(&self, s: &FloatScalar) -> f64 {
        s.value
    }

    fn render(&self, s: &FloatScalar) -> ScalarRepr {
        ScalarRepr::Float { value: s.value }
    }
}

/// `base^exp` as a big integer.
pub fn pow_base(base: u32, exp: u64) -> BigUint {
    num_traits::Pow::pow(&BigUint::from(base), exp)
}

/// Approximate log2 of a positive big integer.
pub fn log2_big(x: &BigUint) -> f64 {
    let bits = x.bits();
    if bits <= 53 {
        return (x.to_u64().unwrap() as f64).log2();
    }
    let top = (x >> (bits - 53)).to_u64().unwrap();
    (bits - 53) as f64 + (top as f64).log2()
}

fn pow10(e: u64) -> BigUint {
    num_traits::Pow::pow(&BigUint::from(10u32), e)
}

/// Decimal rendering of `num/den` with up to `sig` significant digits
/// (half-up rounding; exact when the expansion terminates sooner). Values
/// outside a readable magnitude range use scientific notation.
pub fn decimal_of_ratio(num: &BigUint, den: &BigUint, sig: u32) -> String {
    assert!(!den.is_zero() && sig > 0);
    if num.is_zero() {
        return "0".to_string();
    }
    // Scale so the integer quotient carries a couple of guard digits.
    let est = ((num.bits() as i64 - den.bits() as i64) as f64 * std::f64::consts::LOG10_2)
        .floor() as i64;
    let shift = sig as i64 + 2 - est;
    let q = if shift >= 0 {
        num * pow10(shift as u64) / den
    } else {
        num / (den * pow10((-shift) as u64))
    };
    let mut digits: Vec<u8> = q.to_string().into_bytes();
    // value = 0.digits * 10^(len - shift)
    let mut point = digits.len() as i64 - shift;
    if digits.len() > sig as usize {
        let keep = sig as usize;
        let round_up = digits[keep] >= b'5';
        digits.truncate(keep);
        if round_up {
            let mut i = keep;
            loop {
                if i == 0 {
                    digits.insert(0, b'1');
                    point += 1;
                    break;
                }
                i -= 1;
                if digits[i] == b'9' {
                    digits[i] = b'0';
                } else {
                    digits[i] += 1;
                    break;
                }
            }
        }
    }
    while digits.len() > 1 && *digits.last().unwrap() == b'0' {
        digits.pop();
    }
    let digits = String::from_utf8(digits).unwrap();
    format_pointed(&digits, point)
}

/// Lay out `0.digits * 10^point` as a plain or scientific decimal string.
fn format_pointed(digits: &str, point: i64) -> String {
    let n = digits.len() as i64;
    if point > 0 && point <= 21 {
        if point >= n {
            let mut s = digits.to_string();
            s.extend(std::iter::repeat('0').take((point - n) as usize));
            s
        } else {
            format!("{}.{}", &digits[..point as usize], &digits[point as usize..])
        }
    } else if point <= 0 && point > -6 {
        let zeros: String = std::iter::repeat('0').take((-point) as usize).collect();
        format!("0.{}{}", zeros, digits)
    } else if n == 1 {
        format!("{}e{}", digits, point - 1)
    } else {
        format!("{}.{}e{}", &digits[..1], &digits[1..], point - 1)
    }
}
