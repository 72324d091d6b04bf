//! Box-Cox family transforms, their standardized variants, inverses and the
//! bias-corrected back-transform used to define usual intake.
//!
//! The standardized transform is
//! `g_tr(y) = sqrt(2) * (g(y, lambda) - mu) / sigma`,
//! where `g` is the Box-Cox transform and `(mu, sigma)` are fixed
//! standardization constants computed once from the (nonzero) data. The
//! bias-corrected back-transform `g_star` adds a half-variance times the
//! second derivative of the inverse, which turns a within-person error
//! variance into a correction of the conditional mean on the original scale.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Per-component transform: Box-Cox power plus standardization constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub lambda: f64,
    pub mu: f64,
    pub sigma: f64,
}

impl TransformSpec {
    pub fn new(lambda: f64, mu: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() || !lambda.is_finite() || !mu.is_finite() {
            return Err(Error::validation(format!(
                "invalid transform spec: lambda={lambda}, mu={mu}, sigma={sigma}"
            )));
        }
        Ok(TransformSpec { lambda, mu, sigma })
    }

    /// Identity standardization: `g_tr == g`.
    pub fn plain(lambda: f64) -> Self {
        TransformSpec {
            lambda,
            mu: 0.0,
            sigma: std::f64::consts::SQRT_2,
        }
    }

    /// Standardized transform of a positive amount.
    pub fn g_tr(&self, y: f64) -> Result<f64> {
        Ok(std::f64::consts::SQRT_2 * (g(y, self.lambda)? - self.mu) / self.sigma)
    }

    /// Argument of the power in the inverse: `1 + lambda*(mu + sigma*z/sqrt(2))`
    /// for `lambda != 0`; for `lambda == 0` the exponent `mu + sigma*z/sqrt(2)`.
    fn inner(&self, z: f64) -> f64 {
        self.mu + self.sigma * z / std::f64::consts::SQRT_2
    }

    /// Inverse of `g_tr`.
    pub fn g_tr_inv(&self, z: f64) -> Result<f64> {
        let h = self.inner(z);
        if self.lambda == 0.0 {
            Ok(h.exp())
        } else {
            let arg = 1.0 + self.lambda * h;
            if arg <= 0.0 {
                return Err(Error::TransformDomain {
                    z,
                    msg: format!("1 + lambda*h = {arg} <= 0 (lambda = {})", self.lambda),
                });
            }
            Ok(arg.powf(1.0 / self.lambda))
        }
    }

    /// Inverse with the configured clamping policy: out-of-domain arguments are
    /// floored at a small positive value and the event is counted.
    pub fn g_tr_inv_clamped(&self, z: f64, floor: f64, clamped: &mut u64) -> f64 {
        if self.lambda == 0.0 {
            return self.inner(z).exp();
        }
        let arg = 1.0 + self.lambda * self.inner(z);
        let arg = if arg <= floor {
            *clamped += 1;
            floor
        } else {
            arg
        };
        arg.powf(1.0 / self.lambda)
    }

    /// Second derivative of `g_tr_inv` with respect to `z`.
    pub fn d2_g_tr_inv(&self, z: f64) -> Result<f64> {
        let s2 = self.sigma * self.sigma / 2.0;
        if self.lambda == 0.0 {
            Ok(s2 * self.g_tr_inv(z)?)
        } else {
            let arg = 1.0 + self.lambda * self.inner(z);
            if arg <= 0.0 {
                return Err(Error::TransformDomain {
                    z,
                    msg: format!("1 + lambda*h = {arg} <= 0 (lambda = {})", self.lambda),
                });
            }
            Ok(s2 * (1.0 - self.lambda) * arg.powf(-2.0 + 1.0 / self.lambda))
        }
    }

    /// Bias-corrected back-transform:
    /// `g_tr_inv(v) + 0.5 * var * d2_g_tr_inv(v)`.
    pub fn g_star(&self, v: f64, var: f64) -> Result<f64> {
        debug_assert!(var >= 0.0);
        Ok(self.g_tr_inv(v)? + 0.5 * var * self.d2_g_tr_inv(v)?)
    }

    /// `g_star` with the clamping policy applied to both terms.
    pub fn g_star_clamped(&self, v: f64, var: f64, floor: f64, clamped: &mut u64) -> f64 {
        if self.lambda == 0.0 {
            let base = self.inner(v).exp();
            return base + 0.5 * var * (self.sigma * self.sigma / 2.0) * base;
        }
        let arg = 1.0 + self.lambda * self.inner(v);
        let arg = if arg <= floor {
            *clamped += 1;
            floor
        } else {
            arg
        };
        let s2 = self.sigma * self.sigma / 2.0;
        arg.powf(1.0 / self.lambda)
            + 0.5 * var * s2 * (1.0 - self.lambda) * arg.powf(-2.0 + 1.0 / self.lambda)
    }
}

/// Box-Cox transform: `log(y)` at `lambda == 0`, else `(y^lambda - 1)/lambda`.
pub fn g(y: f64, lambda: f64) -> Result<f64> {
    if !(y > 0.0) {
        return Err(Error::validation(format!(
            "Box-Cox transform requires y > 0, got {y}"
        )));
    }
    if lambda == 0.0 {
        Ok(y.ln())
    } else {
        Ok((y.powf(lambda) - 1.0) / lambda)
    }
}

/// Default floor for the Box-Cox argument when clamping.
pub const DOMAIN_FLOOR: f64 = 1e-8;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn g_identity_point() {
        for lam in [0.0, 0.25, 0.5, 1.0, -0.5] {
            assert_eq!(g(1.0, lam).unwrap(), 0.0);
        }
    }

    #[test]
    fn g_log_and_power() {
        assert_relative_eq!(g(std::f64::consts::E, 0.0).unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(g(4.0, 0.5).unwrap(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn g_domain_error() {
        assert!(g(0.0, 0.5).is_err());
        assert!(g(-1.0, 0.0).is_err());
    }

    #[test]
    fn g_tr_reduces_to_g() {
        let t = TransformSpec::plain(0.5);
        assert_relative_eq!(t.g_tr(4.0).unwrap(), g(4.0, 0.5).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn g_tr_centering() {
        // mu equals g(y, lambda) at y = e, lambda = 0.
        let t = TransformSpec::new(0.0, 1.0, 1.0).unwrap();
        assert_relative_eq!(t.g_tr(std::f64::consts::E).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn round_trip() {
        for lam in [0.0, 0.25, 0.5, 1.0] {
            let t = TransformSpec::new(lam, 0.3, 1.7).unwrap();
            let mut y = 0.1;
            while y <= 10.0 {
                let z = t.g_tr(y).unwrap();
                assert_relative_eq!(t.g_tr_inv(z).unwrap(), y, epsilon = 1e-10);
                y += 0.3;
            }
        }
    }

    #[test]
    fn g_tr_inv_values() {
        let t = TransformSpec::new(0.0, 0.0, 1.0).unwrap();
        assert_relative_eq!(t.g_tr_inv(0.0).unwrap(), 1.0, epsilon = 1e-12);
        let t = TransformSpec::new(1.0, 0.0, 1.0).unwrap();
        assert_relative_eq!(
            t.g_tr_inv(std::f64::consts::SQRT_2).unwrap(),
            2.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn g_tr_inv_domain_error() {
        let t = TransformSpec::new(1.0, 0.0, 1.0).unwrap();
        assert!(t.g_tr_inv(-10.0).is_err());
        let mut n = 0;
        let v = t.g_tr_inv_clamped(-10.0, DOMAIN_FLOOR, &mut n);
        assert_eq!(n, 1);
        assert!(v > 0.0 && v <= 1e-7);
    }

    #[test]
    fn d2_zero_at_lambda_one() {
        let t = TransformSpec::new(1.0, 0.4, 2.0).unwrap();
        for z in [-0.5, 0.0, 2.0] {
            assert_eq!(t.d2_g_tr_inv(z).unwrap(), 0.0);
        }
    }

    #[test]
    fn d2_hand_value() {
        let t = TransformSpec::plain(0.0);
        // (sigma^2/2) * exp(0) = 1 with sigma = sqrt(2).
        assert_relative_eq!(t.d2_g_tr_inv(0.0).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn d2_matches_finite_differences() {
        let h = 1e-4;
        for lam in [0.0, 0.25, 0.5, 1.0] {
            let t = TransformSpec::new(lam, 0.2, 1.3).unwrap();
            let mut z = -1.0;
            while z <= 1.5 {
                let fd = (t.g_tr_inv(z + h).unwrap() - 2.0 * t.g_tr_inv(z).unwrap()
                    + t.g_tr_inv(z - h).unwrap())
                    / (h * h);
                let d2 = t.d2_g_tr_inv(z).unwrap();
                assert_relative_eq!(d2, fd, epsilon = 1e-6, max_relative = 1e-6);
                z += 0.25;
            }
        }
    }

    #[test]
    fn g_star_cases() {
        let t = TransformSpec::plain(0.0);
        // No correction at zero variance.
        assert_relative_eq!(
            t.g_star(0.3, 0.0).unwrap(),
            t.g_tr_inv(0.3).unwrap(),
            epsilon = 1e-12
        );
        // 1 + 0.5 * 2 * 1 = 2.
        assert_relative_eq!(t.g_star(0.0, 2.0).unwrap(), 2.0, epsilon = 1e-12);
        // lambda = 1 has zero second derivative.
        let t1 = TransformSpec::new(1.0, 0.0, 1.0).unwrap();
        assert_relative_eq!(
            t1.g_star(0.5, 5.0).unwrap(),
            t1.g_tr_inv(0.5).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn monotone_and_dominating() {
        for lam in [0.0, 0.5, 1.0] {
            let t = TransformSpec::new(lam, 0.1, 1.1).unwrap();
            let mut prev = t.g_tr_inv(-1.0).unwrap();
            let mut z = -0.9;
            while z <= 2.0 {
                let v = t.g_tr_inv(z).unwrap();
                assert!(v > prev);
                // g_star >= g_tr_inv for lambda <= 1.
                assert!(t.g_star(z, 0.7).unwrap() >= v - 1e-12);
                prev = v;
                z += 0.1;
            }
        }
    }
}
