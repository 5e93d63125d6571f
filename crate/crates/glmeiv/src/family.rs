//! Exponential-family kernels for the Gaussian, Poisson and negative
//! binomial (fixed size) responses, each paired with its usual link.

use crate::error::{domain, Result};
use statrs::function::gamma::ln_gamma;
use std::f64::consts::PI;

pub const MU_MIN: f64 = 1e-300;
pub const MU_MAX: f64 = 1e300;

/// Response family. Gaussian uses the identity link and unit variance;
/// the count families use the log link.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Family {
    Gaussian,
    Poisson,
    NegativeBinomial { size: f64 },
}

/// Per-observation quantities needed by the score and information.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Components {
    pub mu: f64,
    /// h'(l)
    pub delta: f64,
    /// h''(l)
    pub delta_prime: f64,
    pub var: f64,
    /// y - mu
    pub resid: f64,
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl Family {
    pub fn negative_binomial(size: f64) -> Result<Self> {
        if !(size.is_finite() && size > 0.0) {
            return domain(format!("negative binomial size must be positive, got {size}"));
        }
        Ok(Family::NegativeBinomial { size })
    }

    /// Parse `gaussian`, `poisson` or `nb`/`negative_binomial`.
    pub fn from_name(name: &str, size: Option<f64>) -> Result<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(Family::Gaussian),
            "poisson" => Ok(Family::Poisson),
            "nb" | "negbin" | "negative_binomial" | "negative-binomial" => {
                Family::negative_binomial(size.unwrap_or(20.0))
            }
            other => domain(format!("unknown family '{other}'")),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Poisson => "poisson",
            Family::NegativeBinomial { .. } => "nb",
        }
    }

    pub fn size(&self) -> Option<f64> {
        match self {
            Family::NegativeBinomial { size } => Some(*size),
            _ => None,
        }
    }

    pub fn is_count(&self) -> bool {
        !matches!(self, Family::Gaussian)
    }

    /// True when the link is canonical, so that h' = 1 and h'' = 0.
    pub fn is_canonical(&self) -> bool {
        !matches!(self, Family::NegativeBinomial { .. })
    }

    pub fn linkinv(&self, x: f64) -> f64 {
        match self {
            Family::Gaussian => x,
            _ => x.exp(),
        }
    }

    pub fn link(&self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => mu,
            _ => mu.ln(),
        }
    }

    pub fn variance(&self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::Poisson => mu,
            Family::NegativeBinomial { size } => mu + mu * mu / size,
        }
    }

    pub fn mu_eta(&self, x: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            _ => x.exp(),
        }
    }

    pub fn skewness(&self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => 0.0,
            Family::Poisson => mu.powf(-0.5),
            Family::NegativeBinomial { size: s } => {
                (2.0 * mu + s) / ((s * mu).sqrt() * (mu + s).sqrt())
            }
        }
    }

    pub fn mu_eta_prime(&self, x: f64) -> f64 {
        match self {
            Family::Gaussian => 0.0,
            _ => x.exp(),
        }
    }

    /// First derivative of the canonical parameter in the linear component.
    pub fn h_prime(&self, l: f64) -> f64 {
        let mu = self.linkinv(l);
        self.mu_eta(l) / self.variance(mu)
    }

    /// Second derivative of the canonical parameter in the linear component.
    pub fn h_double_prime(&self, l: f64) -> f64 {
        let mu = self.linkinv(l);
        let v = self.variance(mu);
        let hp = self.mu_eta(l) / v;
        (self.mu_eta_prime(l) - v.powf(1.5) * self.skewness(mu) * hp * hp) / v
    }

    pub fn components(&self, y: f64, l: f64) -> Components {
        let l = self.clamp_linear(l);
        let mu = self.linkinv(l);
        let (delta, delta_prime) = if self.is_canonical() {
            (1.0, 0.0)
        } else {
            (self.h_prime(l), self.h_double_prime(l))
        };
        Components {
            mu,
            delta,
            delta_prime,
            var: self.variance(mu),
            resid: y - mu,
        }
    }

    fn clamp_linear(&self, l: f64) -> f64 {
        if self.is_count() {
            l.clamp(MU_MIN.ln(), MU_MAX.ln())
        } else {
            l
        }
    }

    /// The part of the log density that does not depend on the mean.
    pub fn log_carrier(&self, y: f64) -> f64 {
        match self {
            Family::Gaussian => -0.5 * (2.0 * PI).ln() - 0.5 * y * y,
            Family::Poisson => -ln_gamma(y + 1.0),
            Family::NegativeBinomial { size: s } => {
                ln_gamma(y + s) - ln_gamma(*s) - ln_gamma(y + 1.0)
            }
        }
    }

    /// The mean-dependent part of the log density, in terms of the linear
    /// component. Stable for any finite `l`.
    pub fn log_kernel(&self, y: f64, l: f64) -> f64 {
        match self {
            Family::Gaussian => y * l - 0.5 * l * l,
            Family::Poisson => y * l - l.exp(),
            Family::NegativeBinomial { size: s } => {
                let ls = s.ln();
                let lse = log_add_exp(ls, l);
                let r = l - ls;
                let tail = if r < 0.0 { s * r.exp().ln_1p() } else { s * (lse - ls) };
                let head = if y == 0.0 { 0.0 } else { y * (l - lse) };
                head - tail
            }
        }
    }

    /// `log_kernel(y, l0 + delta) - log_kernel(y, l0)` given `mu0 = linkinv(l0)`
    /// and `exp_delta = exp(delta)`.
    pub fn kernel_shift(&self, y: f64, l0: f64, mu0: f64, delta: f64, exp_delta: f64) -> f64 {
        match self {
            Family::Gaussian => y * delta - l0 * delta - 0.5 * delta * delta,
            Family::Poisson => y * delta - mu0 * (exp_delta - 1.0),
            Family::NegativeBinomial { size: s } => {
                let ratio = if mu0.is_finite() {
                    ((s + mu0 * exp_delta) / (s + mu0)).ln()
                } else {
                    delta
                };
                y * delta - (y + s) * ratio
            }
        }
    }

    pub fn log_density_linear(&self, y: f64, l: f64) -> f64 {
        self.log_carrier(y) + self.log_kernel(y, l)
    }

    /// Log density at mean `mu`. Count means are clamped into
    /// [`MU_MIN`, `MU_MAX`]; the second value reports whether that happened.
    pub fn log_density_clamped(&self, y: f64, mu: f64) -> Result<(f64, bool)> {
        if y.is_nan() || mu.is_nan() {
            return domain("NaN passed to log density");
        }
        if !self.is_count() {
            return Ok((self.log_density_linear(y, mu), false));
        }
        if y < 0.0 {
            return domain(format!("negative count {y}"));
        }
        if mu <= 0.0 {
            return domain(format!("non-positive mean {mu} for {} family", self.name()));
        }
        let clamped = !(MU_MIN..=MU_MAX).contains(&mu);
        let mu = mu.clamp(MU_MIN, MU_MAX);
        Ok((self.log_density_linear(y, mu.ln()), clamped))
    }

    pub fn log_density(&self, y: f64, mu: f64) -> Result<f64> {
        self.log_density_clamped(y, mu).map(|r| r.0)
    }

    /// Working weight mu_eta^2 / V at linear component `l`.
    pub fn working_weight(&self, l: f64) -> f64 {
        let l = self.clamp_linear(l);
        let me = self.mu_eta(l);
        me * me / self.variance(self.linkinv(l))
    }

    /// Mean-scale starting value for IRLS.
    pub fn initial_mean(&self, y: f64) -> f64 {
        match self {
            Family::Gaussian => y,
            _ => y + 0.5,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-5 * (1.0 + x.abs());
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    // canonical parameter written out directly, independent of the kernel table
    fn canonical(fam: &Family, l: f64) -> f64 {
        match fam {
            Family::NegativeBinomial { size } => l - (size + l.exp()).ln(),
            _ => l,
        }
    }

    #[test]
    fn table_values() {
        let nb = Family::negative_binomial(4.0).unwrap();
        let mu = 3.0f64;
        assert!((nb.variance(mu) - (3.0 + 9.0 / 4.0)).abs() < 1e-14);
        let sk = (2.0 * 3.0 + 4.0) / (12.0f64.sqrt() * 7.0f64.sqrt());
        assert!((nb.skewness(mu) - sk).abs() < 1e-14);
        assert_eq!(Family::Gaussian.variance(7.0), 1.0);
        assert!((Family::Poisson.skewness(4.0) - 0.5).abs() < 1e-15);
        assert_eq!(Family::Poisson.mu_eta(0.3), 0.3f64.exp());
    }

    #[test]
    fn h_derivatives_match_finite_differences() {
        for fam in [Family::Gaussian, Family::Poisson, Family::NegativeBinomial { size: 3.5 }] {
            for &l in &[-3.0, -0.2, 0.0, 1.1, 2.5] {
                let d1 = fd(|t| canonical(&fam, t), l);
                assert!((fam.h_prime(l) - d1).abs() < 1e-7, "{fam:?} h' at {l}");
                let d2 = fd(|t| fam.h_prime(t), l);
                assert!((fam.h_double_prime(l) - d2).abs() < 1e-7, "{fam:?} h'' at {l}");
            }
        }
    }

    #[test]
    fn densities_match_closed_forms() {
        let nb = Family::negative_binomial(2.5).unwrap();
        let (y, mu, s) = (4.0f64, 1.7f64, 2.5f64);
        let direct = ln_gamma(y + s) - ln_gamma(s) - ln_gamma(y + 1.0)
            + s * (s / (s + mu)).ln()
            + y * (mu / (s + mu)).ln();
        assert!((nb.log_density(y, mu).unwrap() - direct).abs() < 1e-12);
        let pois = y * mu.ln() - mu - ln_gamma(y + 1.0);
        assert!((Family::Poisson.log_density(y, mu).unwrap() - pois).abs() < 1e-12);
        let g = -0.5 * (2.0 * PI).ln() - 0.5 * (1.2f64 - 0.4).powi(2);
        assert!((Family::Gaussian.log_density(1.2, 0.4).unwrap() - g).abs() < 1e-14);
    }

    #[test]
    fn domain_errors_and_clamping() {
        assert!(Family::Poisson.log_density(-1.0, 1.0).is_err());
        assert!(Family::Poisson.log_density(1.0, 0.0).is_err());
        assert!(Family::negative_binomial(0.0).is_err());
        assert!(Family::Gaussian.log_density(-3.0, -2.0).is_ok());
        let (v, clamped) = Family::Poisson.log_density_clamped(2.0, 1e-320).unwrap();
        assert!(clamped && v.is_finite());
    }

    #[test]
    fn nb_kernel_stable_at_extremes() {
        let nb = Family::negative_binomial(10.0).unwrap();
        for &l in &[-800.0, -50.0, 50.0, 800.0] {
            let v = nb.log_density_linear(3.0, l);
            assert!(!v.is_nan());
        }
        assert!(nb.log_density_linear(0.0, -800.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn kernel_shift_is_a_difference(y in 0u32..40, l0 in -5.0f64..5.0, delta in -3.0f64..3.0) {
            for fam in [Family::Gaussian, Family::Poisson, Family::NegativeBinomial { size: 2.0 }] {
                let y = y as f64;
                let direct = fam.log_kernel(y, l0 + delta) - fam.log_kernel(y, l0);
                let fast = fam.kernel_shift(y, l0, fam.linkinv(l0), delta, delta.exp());
                prop_assert!((direct - fast).abs() < 1e-9 * (1.0 + direct.abs()));
            }
        }

        #[test]
        fn count_densities_sum_to_one(l in -2.0f64..3.0, s in 0.5f64..50.0) {
            for fam in [Family::Poisson, Family::NegativeBinomial { size: s }] {
                let total: f64 = (0..6000).map(|y| fam.log_density_linear(y as f64, l).exp()).sum();
                prop_assert!((total - 1.0).abs() < 1e-9, "{:?} total {}", fam, total);
            }
        }

        #[test]
        fn nb_approaches_poisson(y in 0u32..=50, mu in 0.01f64..20.0) {
            let nb = Family::NegativeBinomial { size: 1e6 };
            let a = nb.log_density(y as f64, mu).unwrap();
            let b = Family::Poisson.log_density(y as f64, mu).unwrap();
            prop_assert!((a - b).abs() <= 1e-4 * b.abs().max(1.0));
        }

        #[test]
        fn nb_second_derivative_formula(l in -4.0f64..4.0, s in 0.1f64..100.0) {
            let fam = Family::NegativeBinomial { size: s };
            let mu = l.exp();
            let closed = -mu * s / (s + mu).powi(2);
            prop_assert!((fam.h_double_prime(l) - closed).abs() < 1e-10 * (1.0 + closed.abs()));
        }
    }
}
