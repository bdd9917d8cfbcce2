//! Normalized application utility functions.
//!
//! Two families are supported. Sigmoidal-like utilities model real time traffic with an
//! inflection point at `b`; logarithmic utilities model delay tolerant traffic and reach 1 at
//! `r_max`. Both satisfy `U(0) = 0`, are strictly increasing, and have a strictly decreasing
//! log-derivative, which is what the price search relies on.
//!
//! The sigmoid is evaluated in factored form, in the log domain. `e^{ab}` is never formed, so
//! parameters with `a * b` in the hundreds evaluate without overflow.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Raw parameters of a utility function, as exchanged between UEs and eNodeBs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum UtilityParams<T> {
    Sigmoidal { a: T, b: T },
    Logarithmic { k: T, r_max: T },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind<T> {
    Sigmoidal {
        a: T,
        b: T,
        // ln(1 - d) = ln sigma(ab); the normalization constant is c = 1 / (1 - d).
        ln_one_minus_d: T,
        // d = sigma(-ab), may underflow to zero.
        d: T,
    },
    Logarithmic {
        k: T,
        r_max: T,
        // ln(1 + k r_max)
        norm: T,
        ln_norm: T,
    },
}

/// A validated utility function. The derived normalization constants are computed once at
/// construction and cannot be set directly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtilityFunction<T> {
    kind: Kind<T>,
}

/// ln(1 + e^z) without overflow.
fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

/// ln(1 - e^{-z}) for z > 0, accurate at both ends.
fn ln_one_minus_exp_neg<T: Scalar>(z: T) -> T {
    if z > T::LN_2() {
        (-(-z).exp()).ln_1p()
    } else {
        (-(-z).exp_m1()).ln()
    }
}

/// ln sigma(z) = -softplus(-z).
fn ln_sigmoid<T: Scalar>(z: T) -> T {
    -softplus(-z)
}

fn positive_finite<T: Scalar>(x: T) -> bool {
    x.is_finite() && x > T::zero()
}

impl<T: Scalar> UtilityFunction<T> {
    pub fn sigmoidal(a: T, b: T) -> Result<Self> {
        if !positive_finite(a) || !positive_finite(b) {
            return Err(Error::InvalidUtility(format!(
                "sigmoidal requires a > 0 and b > 0, got a={a}, b={b}"
            )));
        }
        let ab = a * b;
        Ok(Self {
            kind: Kind::Sigmoidal {
                a,
                b,
                ln_one_minus_d: ln_sigmoid(ab),
                d: ln_sigmoid(-ab).exp(),
            },
        })
    }

    pub fn logarithmic(k: T, r_max: T) -> Result<Self> {
        if !positive_finite(k) || !positive_finite(r_max) {
            return Err(Error::InvalidUtility(format!(
                "logarithmic requires k > 0 and r_max > 0, got k={k}, r_max={r_max}"
            )));
        }
        let norm = (k * r_max).ln_1p();
        Ok(Self {
            kind: Kind::Logarithmic {
                k,
                r_max,
                norm,
                ln_norm: norm.ln(),
            },
        })
    }

    pub fn from_params(params: UtilityParams<T>) -> Result<Self> {
        match params {
            UtilityParams::Sigmoidal { a, b } => Self::sigmoidal(a, b),
            UtilityParams::Logarithmic { k, r_max } => Self::logarithmic(k, r_max),
        }
    }

    pub fn params(&self) -> UtilityParams<T> {
        match self.kind {
            Kind::Sigmoidal { a, b, .. } => UtilityParams::Sigmoidal { a, b },
            Kind::Logarithmic { k, r_max, .. } => UtilityParams::Logarithmic { k, r_max },
        }
    }

    pub fn is_sigmoidal(&self) -> bool {
        matches!(self.kind, Kind::Sigmoidal { .. })
    }

    /// Characteristic rate of the curve: the inflection point `b` or the saturation rate `r_max`.
    pub fn scale(&self) -> T {
        match self.kind {
            Kind::Sigmoidal { b, .. } => b,
            Kind::Logarithmic { r_max, .. } => r_max,
        }
    }

    /// `U(r) = sigma(a(r - b)) * (1 - e^{-ar})`, which follows from `c = 1 / sigma(ab)` and
    /// `d = sigma(-ab)`. Returns the logs of the two factors; both stay accurate from `r = 0`
    /// through the saturated region where `U` rounds to 1.
    fn sigmoid_log_factors(a: T, b: T, r: T) -> (T, T) {
        (ln_sigmoid(a * (r - b)), ln_one_minus_exp_neg(a * r))
    }

    fn check_rate(op: &'static str, r: T, strict: bool) -> Result<()> {
        let ok = if strict {
            r > T::zero()
        } else {
            r >= T::zero()
        };
        if ok && !r.is_nan() {
            Ok(())
        } else {
            let bound = if strict { "r > 0" } else { "r >= 0" };
            Err(Error::domain(op, format!("{bound} required, got r={r}")))
        }
    }

    /// Utility of rate `r`. Logarithmic utilities are not clamped above `r_max`.
    pub fn evaluate(&self, r: T) -> Result<T> {
        Self::check_rate("evaluate", r, false)?;
        Ok(self.evaluate_unchecked(r))
    }

    pub(crate) fn evaluate_unchecked(&self, r: T) -> T {
        match self.kind {
            Kind::Sigmoidal { a, b, .. } => {
                let (ln_sig, ln_ramp) = Self::sigmoid_log_factors(a, b, r);
                (ln_sig + ln_ramp).exp()
            }
            Kind::Logarithmic { k, norm, .. } => (k * r).ln_1p() / norm,
        }
    }

    /// Natural log of the utility; requires `r > 0`.
    pub fn log_utility(&self, r: T) -> Result<T> {
        Self::check_rate("log_utility", r, true)?;
        Ok(self.log_utility_unchecked(r))
    }

    pub(crate) fn log_utility_unchecked(&self, r: T) -> T {
        match self.kind {
            Kind::Sigmoidal { a, b, .. } => {
                let (ln_sig, ln_ramp) = Self::sigmoid_log_factors(a, b, r);
                ln_sig + ln_ramp
            }
            Kind::Logarithmic { k, ln_norm, .. } => (k * r).ln_1p().ln() - ln_norm,
        }
    }

    /// d/dr ln U(r); strictly positive and strictly decreasing on (0, inf).
    pub fn d_log_utility(&self, r: T) -> Result<T> {
        Self::check_rate("d_log_utility", r, true)?;
        Ok(self.d_log_utility_unchecked(r))
    }

    pub(crate) fn d_log_utility_unchecked(&self, r: T) -> T {
        match self.kind {
            Kind::Sigmoidal { a, b, .. } => {
                // derivative of the two log factors; expm1 overflowing to inf makes the ramp term 0
                a * ln_sigmoid(a * (b - r)).exp() + a / (a * r).exp_m1()
            }
            Kind::Logarithmic { k, .. } => {
                let kr = k * r;
                k / ((T::one() + kr) * kr.ln_1p())
            }
        }
    }

    /// Rate at which the log-derivative equals `p`, searched above from `10 * scale`.
    pub fn rate_at_price(&self, p: T) -> Result<T> {
        self.rate_at_price_within(p, self.scale())
    }

    /// As [`rate_at_price`](Self::rate_at_price), with the initial upper bound set to
    /// `10 * max(scale, hint)` (the solver passes the cell capacity).
    pub fn rate_at_price_within(&self, p: T, hint: T) -> Result<T> {
        if !(p > T::zero()) || !p.is_finite() {
            return Err(Error::domain(
                "rate_at_price",
                format!("price must be positive and finite, got p={p}"),
            ));
        }
        Ok(self.rate_at_price_unchecked(p, hint))
    }

    pub(crate) fn rate_at_price_unchecked(&self, p: T, hint: T) -> T {
        let two = lit::<T>(2.0);
        let ten = lit::<T>(10.0);
        let mut lo = lit::<T>(1e-9);
        let mut hi = ten * self.scale().max(hint);

        while self.d_log_utility_unchecked(hi) > p {
            let next = hi * two;
            if !next.is_finite() {
                return hi;
            }
            hi = next;
        }
        while self.d_log_utility_unchecked(lo) < p {
            let next = lo / two;
            if !(next > T::zero()) {
                return lo;
            }
            hi = lo;
            lo = next;
        }

        // Bisect to full precision: stop once the midpoint is no longer strictly inside.
        loop {
            let mid = lo + (hi - lo) / two;
            if mid <= lo || mid >= hi {
                return mid;
            }
            if self.d_log_utility_unchecked(mid) > p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }

    /// Smallest rate reaching utility `target` (0 < target < 1), by closed-form inversion.
    pub fn min_rate_for_utility(&self, target: T) -> Result<T> {
        if !(target > T::zero() && target < T::one()) {
            return Err(Error::domain(
                "min_rate_for_utility",
                format!("target must lie in (0, 1), got {target}"),
            ));
        }
        Ok(match self.kind {
            Kind::Sigmoidal {
                a,
                b,
                ln_one_minus_d,
                d,
            } => {
                // sigma(x) = t + d (1 - t); 1 - sigma(x) = (1 - t)(1 - d)
                let s = target + d * (T::one() - target);
                let x = s.ln() - (-target).ln_1p() - ln_one_minus_d;
                (b + x / a).max(T::zero())
            }
            Kind::Logarithmic { k, norm, .. } => (target * norm).exp_m1() / k,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_sigmoid(a: f64, b: f64, r: f64) -> f64 {
        let e = (a * b).exp();
        let c = (1.0 + e) / e;
        let d = 1.0 / (1.0 + e);
        c * (1.0 / (1.0 + (-a * (r - b)).exp()) - d)
    }

    fn central_diff(u: &UtilityFunction<f64>, r: f64) -> f64 {
        let h = 1e-6 * r.max(1.0);
        (u.log_utility(r + h).unwrap() - u.log_utility(r - h).unwrap()) / (2.0 * h)
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(UtilityFunction::<f64>::sigmoidal(0.0, 1.0).is_err());
        assert!(UtilityFunction::<f64>::sigmoidal(1.0, -2.0).is_err());
        assert!(UtilityFunction::<f64>::logarithmic(1.0, 0.0).is_err());
        assert!(UtilityFunction::<f64>::logarithmic(f64::NAN, 10.0).is_err());
        assert!(
            UtilityFunction::<f64>::from_params(UtilityParams::Logarithmic {
                k: -1.0,
                r_max: 10.0
            })
            .is_err()
        );
    }

    #[test]
    fn logarithmic_endpoints() {
        let u = UtilityFunction::<f64>::logarithmic(0.5, 100.0).unwrap();
        assert_eq!(u.evaluate(0.0).unwrap(), 0.0);
        assert!((u.evaluate(100.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(u.log_utility(100.0).unwrap().abs() < 1e-15);
        // no clamping past r_max
        assert!(u.evaluate(200.0).unwrap() > 1.0);
    }

    #[test]
    fn sigmoid_at_inflection() {
        let u = UtilityFunction::<f64>::sigmoidal(3.0, 20.0).unwrap();
        let e = 60f64.exp();
        let closed = (e - 1.0) / (2.0 * e);
        let v = u.evaluate(20.0).unwrap();
        assert!((v - closed).abs() < 1e-15);
        assert!((v - naive_sigmoid(3.0, 20.0, 20.0)).abs() < 1e-15);
        assert!((u.log_utility(20.0).unwrap() - 0.5f64.ln()).abs() < 1e-14);
        assert_eq!(u.evaluate(0.0).unwrap(), 0.0);
    }

    #[test]
    fn sigmoid_matches_naive_formula() {
        for &(a, b) in &[
            (3.0, 20.0),
            (1.0, 30.0),
            (5.0, 10.0),
            (0.1, 5.0),
            (0.5, 3.0),
        ] {
            let u = UtilityFunction::<f64>::sigmoidal(a, b).unwrap();
            for i in 1..200 {
                let r = i as f64 * 0.37;
                let want = naive_sigmoid(a, b, r);
                let got = u.evaluate(r).unwrap();
                assert!(
                    (got - want).abs() <= 1e-12 * want.max(1e-3),
                    "a={a} b={b} r={r}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn d_log_utility_examples() {
        let lg = UtilityFunction::<f64>::logarithmic(0.5, 100.0).unwrap();
        // k / ((1 + k r) ln(1 + k r)) at r = 12.2829
        let d = lg.d_log_utility(12.2829).unwrap();
        assert!((d - 0.035_613_830_155_224_42).abs() < 1e-12);
        assert!((d - central_diff(&lg, 12.2829)).abs() / d < 1e-5);

        let sg = UtilityFunction::<f64>::sigmoidal(3.0, 20.0).unwrap();
        let d = sg.d_log_utility(20.0).unwrap();
        let e = 60f64.exp();
        assert!((d - 3.0 * (1.0 + e) / (2.0 * (e - 1.0))).abs() < 1e-14);
        assert!((d - 1.5).abs() < 1e-14);
        assert!((d - central_diff(&sg, 20.0)).abs() / d < 1e-5);
    }

    #[test]
    fn rate_at_price_examples() {
        let sg = UtilityFunction::<f64>::sigmoidal(3.0, 20.0).unwrap();
        assert!((sg.rate_at_price(1.5).unwrap() - 20.0).abs() < 1e-6);
        let lg = UtilityFunction::<f64>::logarithmic(0.5, 100.0).unwrap();
        assert!((lg.rate_at_price(0.035614).unwrap() - 12.2829).abs() < 1e-3);
    }

    #[test]
    fn min_rate_examples() {
        let lg = UtilityFunction::<f64>::logarithmic(0.5, 100.0).unwrap();
        let r = lg.min_rate_for_utility(0.5).unwrap();
        assert!((r - 12.282_856_857_085_7).abs() < 1e-4);
        assert!((lg.evaluate(r).unwrap() - 0.5).abs() < 1e-12);

        let sg = UtilityFunction::<f64>::sigmoidal(3.0, 20.0).unwrap();
        let r = sg.min_rate_for_utility(0.8).unwrap();
        assert!((r - 20.462_098_120_373_3).abs() < 1e-4);
        assert!((sg.evaluate(r).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn domain_errors() {
        let u = UtilityFunction::<f64>::logarithmic(0.5, 100.0).unwrap();
        assert!(matches!(u.evaluate(-1.0), Err(Error::Domain { .. })));
        assert!(u.log_utility(0.0).is_err());
        assert!(u.d_log_utility(-0.5).is_err());
        assert!(u.rate_at_price(0.0).is_err());
        assert!(u.rate_at_price(f64::NAN).is_err());
        assert!(u.min_rate_for_utility(0.0).is_err());
        assert!(u.min_rate_for_utility(1.0).is_err());
    }

    #[test]
    fn large_ab_is_stable() {
        let u = UtilityFunction::<f64>::sigmoidal(7.0, 100.0).unwrap();
        for &r in &[1e-6, 1.0, 50.0, 99.0, 100.0, 101.0, 1e4] {
            let v = u.evaluate(r).unwrap();
            assert!(v.is_finite() && (0.0..=1.0).contains(&v));
            assert!(u.log_utility(r).unwrap().is_finite());
            assert!(u.d_log_utility(r).unwrap() >= 0.0);
        }
        assert!((u.evaluate(100.0).unwrap() - 0.5).abs() < 1e-12);
        assert!((u.d_log_utility(100.0).unwrap() - 3.5).abs() < 1e-12);
    }

    #[test]
    fn works_in_f32() {
        let u = UtilityFunction::<f32>::logarithmic(0.5, 100.0).unwrap();
        let r = u.min_rate_for_utility(0.5).unwrap();
        assert!((r - 12.282_857).abs() < 1e-3);
        let s = UtilityFunction::<f32>::sigmoidal(3.0, 20.0).unwrap();
        assert!((s.rate_at_price(1.5).unwrap() - 20.0).abs() < 1e-3);
    }
}
