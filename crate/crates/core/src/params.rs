//! Per-estimate protocol schedule.
//!
//! For an estimate `k` and accuracy exponent `epsilon` the protocol runs an
//! epoch of `p` phases, each `r` communication rounds, with mixing divisor
//! `d` and phase-one alarm threshold `tau`:
//!
//! ```text
//! d = ceil(k^(1+eps))
//! p = ceil( (2+eps) * k^(1+eps) / (1 - 1/k) * ln k )
//! r = ceil( (4 + 2*eps + max{0, -2*ln(k^eps - 1)/ln k}) * d * k^(2+2*eps) * ln k )
//! tau = (d-1)/d
//! ```
//!
//! The default policy picks `eps = log_k 2` per epoch, which makes
//! `k^(1+eps) = 2k` exactly and zeroes the max term; those identities are
//! used directly instead of floating powers. The ceilings mix irrational
//! logarithms with integers, so they are evaluated in 192-fractional-bit
//! fixed point over big integers, with exact-integer shortcuts where the
//! power is provably integral and a hard error if a value sits too close to
//! an integer boundary for the error budget to decide the ceiling.

use num_bigint::{BigInt, BigUint};
use num_integer::{gcd, Integer};
use num_rational::Ratio;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("estimate k must be at least 2, got {0}")]
    SmallK(u64),
    #[error("network size n must be at least 2, got {0}")]
    SmallN(u64),
    #[error("epsilon must be a finite real in [{min}, {max}], got {got}")]
    BadEpsilon { got: f64, min: f64, max: f64 },
    #[error("parameter {what} at k={k} exceeds the supported schedule size")]
    Oversized { k: u64, what: &'static str },
    #[error(
        "parameter {what} at k={k} lands too close to an integer boundary \
         for the working precision to decide the ceiling"
    )]
    AmbiguousCeiling { k: u64, what: &'static str },
}

/// How epsilon is chosen per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum EpsilonPolicy {
    /// `eps = log_k 2`, re-evaluated at every estimate.
    Auto,
    /// One fixed positive real for all epochs.
    Fixed(f64),
}

pub const MAX_EPSILON: f64 = 32.0;
pub const MIN_EPSILON: f64 = 1e-12;
const MAX_D: u64 = 1 << 20;
const MAX_P: u64 = 1 << 32;
const MAX_R: u64 = 1 << 48;

/// The four schedule values for one epoch, plus the inputs that produced
/// them. Pure function of `(k, epsilon)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProtocolParams {
    pub k: u64,
    /// Display value of epsilon (`ln 2 / ln k` under the auto policy).
    pub epsilon: f64,
    pub d: u32,
    pub p: u64,
    pub r: u64,
    /// Exact alarm threshold `(d-1)/d`.
    pub tau: Ratio<u64>,
}

impl ProtocolParams {
    /// Communication rounds in the epoch (excludes dissemination).
    pub fn phase_rounds(&self) -> u64 {
        self.p * self.r
    }

    /// Total rounds the epoch consumes: `p*r` plus `k` dissemination rounds.
    pub fn epoch_rounds(&self) -> u64 {
        self.p * self.r + self.k
    }
}

/// `log_k 2`, the epsilon that makes `k^eps = 2` exactly.
pub fn default_epsilon(k: u64) -> Result<f64, ParamError> {
    if k < 2 {
        return Err(ParamError::SmallK(k));
    }
    Ok(std::f64::consts::LN_2 / (k as f64).ln())
}

/// Schedule under a policy.
pub fn params_for(k: u64, policy: EpsilonPolicy) -> Result<ProtocolParams, ParamError> {
    match policy {
        EpsilonPolicy::Auto => compute_params_auto(k),
        EpsilonPolicy::Fixed(eps) => compute_params(k, eps),
    }
}

/// Schedule under the auto policy, using the `k^(1+eps) = 2k` identity.
pub fn compute_params_auto(k: u64) -> Result<ProtocolParams, ParamError> {
    if k < 2 {
        return Err(ParamError::SmallK(k));
    }
    let d = 2 * k;
    if d > MAX_D {
        return Err(ParamError::Oversized { k, what: "d" });
    }
    // (2+eps)*ln k = ln(2k^2), so p = ceil(2k^2 * ln(2k^2) / (k-1)) and,
    // with the max term exactly zero, r = ceil(16k^3 * ln(2k^2)).
    let l = Fx::from_u64(2 * k * k).ln();
    let p_num = &l.0 * (2 * k * k);
    let p = ceil_div_guarded(&p_num, &(BigInt::from(k - 1) << FRAC), k, "p")?;
    let r_num = &l.0 * (16 * k * k * k);
    let r = ceil_div_guarded(&r_num, &(BigInt::one() << FRAC), k, "r")?;
    finish_params(k, default_epsilon(k)?, d, p, r)
}

/// Schedule for an explicit epsilon.
pub fn compute_params(k: u64, epsilon: f64) -> Result<ProtocolParams, ParamError> {
    if k < 2 {
        return Err(ParamError::SmallK(k));
    }
    if !epsilon.is_finite() || epsilon < MIN_EPSILON || epsilon > MAX_EPSILON {
        return Err(ParamError::BadEpsilon {
            got: epsilon,
            min: MIN_EPSILON,
            max: MAX_EPSILON,
        });
    }
    // epsilon as the exact binary rational a/2^s the float denotes
    let (a, s) = f64_to_ratio(epsilon);
    let pow2s = BigUint::one() << s;

    let ln_k = Fx::from_u64(k).ln();
    let eps_fx = Fx::from_big(BigInt::from(a.clone()), s);

    // k^(1+eps), exactly when it is an integer power, else in fixed point
    let kpe_exponent = (&pow2s + &a, pow2s.clone());
    let kpe_exact = detect_power(k, &kpe_exponent.0, &kpe_exponent.1);
    let (d, kpe_fx) = match &kpe_exact {
        Some(m) => {
            let d = m
                .to_u64()
                .filter(|&v| v <= MAX_D)
                .ok_or(ParamError::Oversized { k, what: "d" })?;
            (d, Fx::from_u64(d))
        }
        None => {
            let one_plus_eps = eps_fx.add(&Fx::from_u64(1));
            let fx = one_plus_eps.mul(&ln_k).exp();
            let d = fx.ceil_guarded(k, "d")?;
            if d > MAX_D {
                return Err(ParamError::Oversized { k, what: "d" });
            }
            (d, fx)
        }
    };

    // p = ceil((2+eps) * k^(1+eps) * ln k * k/(k-1))
    let two_plus_eps = eps_fx.add(&Fx::from_u64(2));
    let p_fx = two_plus_eps.mul(&kpe_fx).mul(&ln_k).mul_u64(k);
    let p = ceil_div_guarded(&p_fx.0, &(BigInt::from(k - 1) << FRAC), k, "p")?;

    // k^(2+2eps) = (k^(1+eps))^2, again exactly when integral
    let k22_exponent = ((&pow2s + &a) * 2u32, pow2s.clone());
    let k22_fx = match detect_power(k, &k22_exponent.0, &k22_exponent.1) {
        Some(m) => Fx::from_bigint(BigInt::from(m)),
        None => eps_fx
            .add(&Fx::from_u64(1))
            .mul(&ln_k)
            .mul_u64(2)
            .exp(),
    };

    let max_term = max_term(k, &a, s, &eps_fx, &ln_k)?;
    // r = ceil((4 + 2eps + max_term) * d * k^(2+2eps) * ln k)
    let factor = eps_fx.mul_u64(2).add(&Fx::from_u64(4)).add(&max_term);
    let r_fx = factor.mul(&k22_fx).mul(&ln_k).mul_u64(d);
    let r = ceil_div_guarded(&r_fx.0, &(BigInt::one() << FRAC), k, "r")?;

    finish_params(k, epsilon, d, p, r)
}

/// `max{0, -2*ln(k^eps - 1)/ln k}`, exactly zero whenever `k^eps >= 2`.
fn max_term(
    k: u64,
    a: &BigUint,
    s: usize,
    eps_fx: &Fx,
    ln_k: &Fx,
) -> Result<Fx, ParamError> {
    if let Some(m) = detect_power(k, a, &(BigUint::one() << s)) {
        // k^eps is the integer m >= 2, so k^eps - 1 >= 1 and the term
        // never goes positive.
        debug_assert!(m >= BigUint::from(2u32));
        return Ok(Fx::zero());
    }
    let a_fx = eps_fx.mul(ln_k).exp(); // k^eps
    let am1 = a_fx.sub(&Fx::from_u64(1));
    if am1.0 <= (BigInt::one() << (FRAC - 100)) {
        // k^eps hugs 1; ln(k^eps - 1) is numerically out of reach and the
        // schedule would be astronomically long anyway.
        return Err(ParamError::Oversized { k, what: "r" });
    }
    if am1.0 >= BigInt::one() << FRAC {
        return Ok(Fx::zero());
    }
    Ok(am1.ln().neg().mul_u64(2).div(ln_k))
}

fn finish_params(
    k: u64,
    epsilon: f64,
    d: u64,
    p: u64,
    r: u64,
) -> Result<ProtocolParams, ParamError> {
    if p > MAX_P {
        return Err(ParamError::Oversized { k, what: "p" });
    }
    if r > MAX_R {
        return Err(ParamError::Oversized { k, what: "r" });
    }
    Ok(ProtocolParams {
        k,
        epsilon,
        d: d as u32,
        p,
        r,
        tau: Ratio::new_raw(d - 1, d),
    })
}

/// Closed-form total round count: `sum_{k=2..=n} (p_k * r_k + k)`.
pub fn total_rounds(n: u64, policy: EpsilonPolicy) -> Result<u64, ParamError> {
    if n < 2 {
        return Err(ParamError::SmallN(n));
    }
    let mut total: u128 = 0;
    for k in 2..=n {
        let params = params_for(k, policy)?;
        total += params.epoch_rounds() as u128;
        if total > u64::MAX as u128 {
            return Err(ParamError::Oversized {
                k,
                what: "total_rounds",
            });
        }
    }
    Ok(total as u64)
}

/// The exact binary rational `a / 2^s` (in lowest terms) a positive finite
/// f64 denotes.
fn f64_to_ratio(v: f64) -> (BigUint, usize) {
    debug_assert!(v.is_finite() && v > 0.0);
    let mut x = v;
    let mut s = 0usize;
    while x.fract() != 0.0 {
        x *= 2.0;
        s += 1;
    }
    let mut a = BigUint::from(x as u64);
    // reduce the power of two
    while s > 0 && a.is_even() {
        a >>= 1;
        s -= 1;
    }
    (a, s)
}

/// `k^(num/den)` when it is provably an integer, for tractable exponents.
/// A floor nth-root certifies both directions: either the root reproduces
/// the power exactly or the value lies strictly between consecutive integer
/// powers.
fn detect_power(k: u64, num: &BigUint, den: &BigUint) -> Option<BigUint> {
    let g = gcd(num.clone(), den.clone());
    let num = num / &g;
    let den = den / &g;
    let den32 = den.to_u32()?;
    let num32 = num.to_u32()?;
    if den32 > 256 || num32 > 2048 {
        return None;
    }
    let t = num_traits::Pow::pow(&BigUint::from(k), num32);
    if den32 == 1 {
        return Some(t);
    }
    let root = t.nth_root(den32);
    if num_traits::Pow::pow(&root, den32) == t {
        Some(root)
    } else {
        None
    }
}

const FRAC: usize = 192;
const GUARD_BITS: usize = 100;

/// Fixed-point real with 192 fractional bits over a big integer.
#[derive(Clone, Debug)]
struct Fx(BigInt);

impl Fx {
    fn zero() -> Self {
        Fx(BigInt::zero())
    }

    fn from_u64(v: u64) -> Self {
        Fx(BigInt::from(v) << FRAC)
    }

    fn from_bigint(v: BigInt) -> Self {
        Fx(v << FRAC)
    }

    /// `v / 2^shift` taken exactly.
    fn from_big(v: BigInt, shift: usize) -> Self {
        debug_assert!(shift <= FRAC);
        Fx(v << (FRAC - shift))
    }

    fn add(&self, o: &Fx) -> Fx {
        Fx(&self.0 + &o.0)
    }

    fn sub(&self, o: &Fx) -> Fx {
        Fx(&self.0 - &o.0)
    }

    fn neg(&self) -> Fx {
        Fx(-&self.0)
    }

    fn mul(&self, o: &Fx) -> Fx {
        Fx((&self.0 * &o.0) >> FRAC)
    }

    fn mul_u64(&self, v: u64) -> Fx {
        Fx(&self.0 * v)
    }

    fn mul_i64(&self, v: i64) -> Fx {
        Fx(&self.0 * v)
    }

    fn div(&self, o: &Fx) -> Fx {
        Fx((&self.0 << FRAC) / &o.0)
    }

    fn div_small(&self, v: u64) -> Fx {
        Fx(&self.0 / v)
    }

    fn is_zero(&self) -> bool {
        self.0.is_zero()
    }

    /// Natural logarithm of a positive value: split off the power of two,
    /// then `ln m = 2 atanh((m-1)/(m+1))` on the mantissa in [1, 2).
    fn ln(&self) -> Fx {
        assert!(self.0.is_positive(), "ln of a non-positive value");
        let bits = self.0.bits() as i64;
        let j = bits - 1 - FRAC as i64;
        let m = if j >= 0 {
            Fx(&self.0 >> (j as usize))
        } else {
            Fx(&self.0 << ((-j) as usize))
        };
        let one = Fx::from_u64(1);
        let t = m.sub(&one).div(&m.add(&one));
        let tsq = t.mul(&t);
        let mut term = t;
        let mut sum = Fx::zero();
        let mut i = 0u64;
        while !term.is_zero() {
            sum = sum.add(&term.div_small(2 * i + 1));
            term = term.mul(&tsq);
            i += 1;
        }
        sum.mul_u64(2).add(&ln2().mul_i64(j))
    }

    /// Exponential: reduce by multiples of ln 2, Taylor series on the rest.
    fn exp(&self) -> Fx {
        let ln2 = ln2();
        let mut q: i64 = (self.div(&ln2).0 >> FRAC)
            .to_i64()
            .expect("exp argument out of range");
        let mut rem = self.sub(&ln2.mul_i64(q));
        while rem.0.is_negative() {
            q -= 1;
            rem = rem.add(&ln2);
        }
        while rem.0 >= ln2.0 {
            q += 1;
            rem = rem.sub(&ln2);
        }
        let mut term = Fx::from_u64(1);
        let mut sum = Fx::from_u64(1);
        let mut i = 1u64;
        while !term.is_zero() {
            term = term.mul(&rem).div_small(i);
            sum = sum.add(&term);
            i += 1;
        }
        if q >= 0 {
            Fx(sum.0 << (q as usize))
        } else {
            Fx(sum.0 >> ((-q) as usize))
        }
    }

    /// Ceiling of a positive value, refusing to answer when the value is
    /// within 2^-100 of an integer (far beyond the series' error budget,
    /// so a legitimate input never trips this).
    fn ceil_guarded(&self, k: u64, what: &'static str) -> Result<u64, ParamError> {
        ceil_div_guarded(&self.0, &(BigInt::one() << FRAC), k, what)
    }

    #[cfg(test)]
    fn to_f64(&self) -> f64 {
        let neg = self.0.is_negative();
        let mag = self.0.magnitude();
        if mag.is_zero() {
            return 0.0;
        }
        let v = crate::numeric::log2_big(mag).exp2() / (2f64).powi(FRAC as i32);
        if neg {
            -v
        } else {
            v
        }
    }
}

fn ln2() -> Fx {
    use std::sync::OnceLock;
    static LN2: OnceLock<BigInt> = OnceLock::new();
    Fx(LN2
        .get_or_init(|| {
            // 2 atanh(1/3)
            let t = Fx::from_u64(1).div_small(3);
            let tsq = t.mul(&t);
            let mut term = t;
            let mut sum = Fx::zero();
            let mut i = 0u64;
            while !term.is_zero() {
                sum = sum.add(&term.div_small(2 * i + 1));
                term = term.mul(&tsq);
                i += 1;
            }
            sum.mul_u64(2).0
        })
        .clone())
}

/// `ceil(num/den)` for positive operands, erroring when `num/den` is within
/// 2^-100 of an integer.
fn ceil_div_guarded(
    num: &BigInt,
    den: &BigInt,
    k: u64,
    what: &'static str,
) -> Result<u64, ParamError> {
    debug_assert!(num.is_positive() && den.is_positive());
    let (q, rem) = num.div_rem(den);
    let guard = den >> GUARD_BITS;
    if rem <= guard || rem >= den - &guard {
        return Err(ParamError::AmbiguousCeiling { k, what });
    }
    (q + 1u32)
        .to_u64()
        .ok_or(ParamError::Oversized { k, what })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_epsilon_examples() {
        assert_eq!(default_epsilon(2).unwrap(), 1.0);
        assert_eq!(default_epsilon(4).unwrap(), 0.5);
        assert!((default_epsilon(3).unwrap() - 0.630930).abs() < 1e-6);
        assert_eq!(default_epsilon(1), Err(ParamError::SmallK(1)));
    }

    #[test]
    fn auto_schedule_table() {
        // frozen against an independent 60-digit evaluation of the formulas
        let expect = [
            (2u64, 4u32, 17u64, 267u64),
            (3, 6, 27, 1249),
            (4, 8, 37, 3549),
            (5, 10, 49, 7825),
            (6, 12, 62, 14781),
            (7, 14, 75, 25163),
            (8, 16, 89, 39748),
            (9, 18, 104, 59342),
            (10, 20, 118, 84774),
        ];
        for (k, d, p, r) in expect {
            let got = compute_params_auto(k).unwrap();
            assert_eq!((got.d, got.p, got.r), (d, p, r), "k={k}");
            assert_eq!(got.tau, Ratio::new_raw(2 * k - 1, 2 * k));
        }
    }

    #[test]
    fn auto_d_is_twice_k() {
        for k in 2..=64 {
            let p = compute_params_auto(k).unwrap();
            assert_eq!(u64::from(p.d), 2 * k);
        }
    }

    #[test]
    fn fixed_epsilon_schedules() {
        // frozen against the same independent evaluator
        let cases = [
            (2u64, 1.0, 4u32, 17u64, 267u64),
            (3, 1.0, 9, 45, 4806),
            (4, 1.0, 16, 89, 34070),
            (2, 0.5, 3, 10, 126),
            (3, 0.5, 6, 22, 991),
            (2, 2.0, 8, 45, 2840),
            (5, 2.0, 125, 1006, 25147468),
            (10, 1.0, 100, 768, 13815511),
        ];
        for (k, eps, d, p, r) in cases {
            let got = compute_params(k, eps).unwrap();
            assert_eq!((got.d, got.p, got.r), (d, p, r), "k={k} eps={eps}");
        }
    }

    #[test]
    fn auto_matches_explicit_epsilon_at_k2() {
        // log_2 2 = 1, so the two paths must agree exactly
        let auto = compute_params_auto(2).unwrap();
        let fixed = compute_params(2, 1.0).unwrap();
        assert_eq!((auto.d, auto.p, auto.r, auto.tau), (fixed.d, fixed.p, fixed.r, fixed.tau));
    }

    #[test]
    fn epsilon_validation() {
        for bad in [0.0, -1.0, f64::NAN, f64::INFINITY, 33.0] {
            assert!(matches!(
                compute_params(3, bad),
                Err(ParamError::BadEpsilon { .. })
            ));
        }
    }

    #[test]
    fn total_rounds_table() {
        let t = |n| total_rounds(n, EpsilonPolicy::Auto).unwrap();
        assert_eq!(t(2), 4541);
        assert_eq!(t(3), 38267);
        assert_eq!(t(4), 169584);
        assert_eq!(t(5), 553014);
        assert_eq!(t(6), 1469442);
        assert_eq!(t(7), 3356674);
        assert_eq!(t(8), 6894254);
        assert_eq!(total_rounds(1, EpsilonPolicy::Auto), Err(ParamError::SmallN(1)));
    }

    #[test]
    fn total_rounds_monotone() {
        let mut prev = 0;
        for n in 2..=64 {
            let t = total_rounds(n, EpsilonPolicy::Auto).unwrap();
            assert!(t > prev);
            prev = t;
        }
    }

    #[test]
    fn growth_envelope() {
        // total_rounds(n) <= 300 n^5 ln^2 n over the tested range; the
        // ratio peaks just above 295 at n=2
        for n in 2..=64u64 {
            let t = total_rounds(n, EpsilonPolicy::Auto).unwrap() as f64;
            let nf = n as f64;
            let bound = 300.0 * nf.powi(5) * nf.ln() * nf.ln();
            assert!(t <= bound, "n={n}: {t} > {bound}");
        }
    }

    #[test]
    fn params_are_pure_functions() {
        let a = compute_params(5, 0.75).unwrap();
        let b = compute_params(5, 0.75).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn f64_ratio_roundtrip() {
        for v in [1.0, 0.5, 0.75, 2.0, 0.630929753571457_5] {
            let (a, s) = f64_to_ratio(v);
            let back = a.to_f64().unwrap() / (2f64).powi(s as i32);
            assert_eq!(back, v);
        }
    }

    #[test]
    fn detect_power_certifies_both_ways() {
        use num_bigint::BigUint;
        let b = |v: u32| BigUint::from(v);
        // 4^(3/2) = 8
        assert_eq!(detect_power(4, &b(3), &b(2)), Some(b(8)));
        // 8^(4/3) = 16
        assert_eq!(detect_power(8, &b(4), &b(3)), Some(b(16)));
        // 2^(3/2) is not an integer
        assert_eq!(detect_power(2, &b(3), &b(2)), None);
        // integer exponent
        assert_eq!(detect_power(3, &b(2), &b(1)), Some(b(9).into()));
    }

    #[test]
    fn fx_ln_exp_consistency() {
        // ln against a frozen reference (the f64 view is ~1e-14 accurate)
        let ln2_v = ln2().to_f64();
        assert!((ln2_v - 0.6931471805599453).abs() < 1e-13);
        let ln3 = Fx::from_u64(3).ln().to_f64();
        assert!((ln3 - 1.0986122886681098).abs() < 1e-13);
        // exp(ln(x)) = x to far beyond f64 precision
        for v in [2u64, 10, 1249, 8192] {
            let x = Fx::from_u64(v);
            let roundtrip = x.ln().exp();
            let diff = roundtrip.sub(&x);
            assert!(diff.0.magnitude().bits() as i64 <= (FRAC as i64) - 150, "v={v}");
        }
        // exp of a negative argument
        let e = Fx::from_u64(3).div_small(4).neg().exp().to_f64();
        assert!((e - 0.4723665527410147).abs() < 1e-13);
    }

    #[test]
    fn ambiguous_ceiling_is_refused() {
        // 6/3 = 2 exactly: the ceiling cannot be decided from an inexact value
        let num = BigInt::from(6) << FRAC;
        let den = BigInt::from(3) << FRAC;
        assert!(matches!(
            ceil_div_guarded(&num, &den, 9, "p"),
            Err(ParamError::AmbiguousCeiling { .. })
        ));
        // an offset comfortably above the 2^-100 guard rounds normally
        let num = (BigInt::from(7) << FRAC) + (BigInt::one() << 120);
        assert_eq!(ceil_div_guarded(&num, &(BigInt::one() << FRAC), 9, "p").unwrap(), 8);
    }
}
