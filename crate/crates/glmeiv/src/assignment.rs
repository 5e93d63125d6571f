//! Perturbation assignment: thresholding (with its large-sample theory),
//! Bayes-optimal thresholds, and assignment by a gRNA-only mixture.

use crate::design::DesignMatrix;
use crate::em::{fit_accelerated, Dataset, EmFit, EmOptions, Flag, Response};
use crate::error::{domain, Error, Result};
use crate::family::Family;
use crate::glm::{fit_weighted_glm, GlmFit, IrlsOptions};
use crate::louis::Wald;
use libm::erfc;
use std::f64::consts::{PI, SQRT_2};

/// log of the standard normal CDF, accurate far into the lower tail.
pub fn log_norm_cdf(x: f64) -> f64 {
    if x < -30.0 {
        let x2 = x * x;
        let series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2) + 105.0 / (x2 * x2 * x2 * x2);
        -0.5 * x2 - (-x).ln() - 0.5 * (2.0 * PI).ln() + series.ln()
    } else {
        (0.5 * erfc(-x / SQRT_2)).ln()
    }
}

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Gaussian working model behind the thresholding analysis:
/// `g = b0 + b1 p + N(0, 1)` with `p ~ Bernoulli(pi)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdModel {
    pub beta0_g: f64,
    pub beta1_g: f64,
    pub pi: f64,
}

impl ThresholdModel {
    pub fn new(beta0_g: f64, beta1_g: f64, pi: f64) -> Result<Self> {
        if !(pi > 0.0 && pi < 1.0) {
            return domain(format!("pi = {pi} outside (0, 1)"));
        }
        if !(beta0_g.is_finite() && beta1_g.is_finite()) {
            return domain("gRNA coefficients must be finite");
        }
        Ok(ThresholdModel { beta0_g, beta1_g, pi })
    }

    /// Attenuation factor: the thresholding estimator converges to
    /// `gamma(c) * beta1_m`.
    pub fn attenuation(&self, c: f64) -> f64 {
        let (b0, b1, pi) = (self.beta0_g, self.beta1_g, self.pi);
        // Work with whichever tails are small to keep precision for extreme c.
        if c > b0 + b1 / 2.0 {
            let lw = log_norm_cdf(b0 + b1 - c);
            let lz = log_norm_cdf(b0 - c);
            let r = (lz - lw).exp();
            let e = (1.0 - pi) * lz.exp() + pi * lw.exp();
            pi * (1.0 - pi) * (1.0 - r) / (((1.0 - pi) * r + pi) * (1.0 - e))
        } else {
            let lw = log_norm_cdf(c - b0 - b1);
            let lz = log_norm_cdf(c - b0);
            let r = (lw - lz).exp();
            let one_minus_e = (1.0 - pi) * lz.exp() + pi * lw.exp();
            pi * (1.0 - pi) * (1.0 - r) / ((1.0 - one_minus_e) * ((1.0 - pi) + pi * r))
        }
    }

    /// Relative attenuation bias `1 - gamma(c)`.
    pub fn bias(&self, c: f64) -> f64 {
        1.0 - self.attenuation(c)
    }

    /// Bayes-optimal decision boundary for the Gaussian working model.
    pub fn bayes_threshold(&self) -> f64 {
        gaussian_bayes_threshold(self.beta0_g, self.beta0_g + self.beta1_g, self.pi)
    }
}

/// Large-sample mean and variance of the no-intercept thresholding estimator
/// `sum(m p_hat) / sum(p_hat)` when `m = beta_m p + N(0, 1)` and
/// `g = beta_g p + N(0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BiasVariance {
    pub limit: f64,
    pub avar: f64,
}

pub fn bv_decomposition(beta_m: f64, beta_g: f64, pi: f64, c: f64) -> Result<BiasVariance> {
    if !(pi > 0.0 && pi < 1.0) {
        return domain(format!("pi = {pi} outside (0, 1)"));
    }
    let omega = norm_cdf(beta_g - c);
    let zeta = norm_cdf(-c);
    let e = zeta * (1.0 - pi) + omega * pi;
    if !(e > 0.0) {
        return domain("threshold so large that no cell is ever selected");
    }
    let l = beta_m * omega * pi / e;
    let avar = (beta_m * omega * pi * (beta_m - 2.0 * l) + e * (1.0 + l * l)) / (e * e);
    Ok(BiasVariance { limit: l, avar })
}

pub fn gaussian_bayes_threshold(mu0: f64, mu1: f64, pi: f64) -> f64 {
    (mu0 + mu1) / 2.0 + ((1.0 - pi) / pi).ln() / (mu1 - mu0)
}

/// Count above which the posterior of perturbation exceeds 1/2, given the
/// two class means. Assumes `mu1 > mu0`.
pub fn bayes_threshold(family: &Family, mu0: f64, mu1: f64, pi: f64) -> Result<f64> {
    if !(pi > 0.0 && pi < 1.0) {
        return domain(format!("pi = {pi} outside (0, 1)"));
    }
    if mu1 == mu0 {
        return domain("equal class means leave nothing to separate");
    }
    if !(mu1 > mu0) {
        return domain("perturbed mean must exceed the unperturbed mean");
    }
    let lp = pi.ln() - (1.0 - pi).ln();
    Ok(match family {
        Family::Gaussian => gaussian_bayes_threshold(mu0, mu1, pi),
        Family::Poisson => {
            if mu0 <= 0.0 {
                return domain("Poisson means must be positive");
            }
            (mu1 - mu0 - lp) / (mu1.ln() - mu0.ln())
        }
        Family::NegativeBinomial { size: s } => {
            if mu0 <= 0.0 {
                return domain("negative binomial means must be positive");
            }
            (s * ((mu1 + s).ln() - (mu0 + s).ln()) - lp)
                / ((mu1 * (mu0 + s)).ln() - (mu0 * (mu1 + s)).ln())
        }
    })
}

/// Mean of the cell-specific Bayes boundaries implied by fitted gRNA
/// coefficients `[b0, b1, gamma...]` and the covariates and offsets of each cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CovariateThreshold {
    pub threshold: f64,
    pub min: f64,
    pub max: f64,
    /// Cells whose perturbed mean does not exceed the unperturbed one.
    pub excluded: usize,
}

pub fn cell_bayes_thresholds(
    family: &Family,
    beta_g: &[f64],
    pi: f64,
    design: &DesignMatrix,
    offsets: &[f64],
) -> Result<Vec<Option<f64>>> {
    if beta_g.len() != design.ncols() + 1 {
        return Err(Error::Dimension("gRNA coefficients do not match the design".into()));
    }
    if !(pi > 0.0 && pi < 1.0) {
        return domain(format!("pi = {pi} outside (0, 1)"));
    }
    let nu: Vec<f64> = std::iter::once(beta_g[0]).chain(beta_g[2..].iter().copied()).collect();
    let l0 = design.linear_predictor(&nu.into(), offsets);
    Ok(l0
        .iter()
        .map(|&l| bayes_threshold(family, family.linkinv(l), family.linkinv(l + beta_g[1]), pi).ok())
        .map(|c| c.filter(|c| c.is_finite()))
        .collect())
}

pub fn covariate_bayes_threshold(
    family: &Family,
    beta_g: &[f64],
    pi: f64,
    design: &DesignMatrix,
    offsets: &[f64],
) -> Result<CovariateThreshold> {
    let cells = cell_bayes_thresholds(family, beta_g, pi, design, offsets)?;
    let kept: Vec<f64> = cells.iter().flatten().copied().collect();
    if kept.is_empty() {
        return domain("no cell has a perturbed mean above its unperturbed mean");
    }
    Ok(CovariateThreshold {
        threshold: kept.iter().sum::<f64>() / kept.len() as f64,
        min: kept.iter().copied().fold(f64::INFINITY, f64::min),
        max: kept.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        excluded: cells.len() - kept.len(),
    })
}

/// Assign `p_hat = 1` when `g >= c` (ties go to perturbed).
pub fn threshold_assign(g: &[f64], thresholds: &[f64]) -> Vec<f64> {
    g.iter()
        .zip(thresholds.iter().cycle())
        .map(|(gi, c)| if gi >= c { 1.0 } else { 0.0 })
        .collect()
}

#[derive(Clone, Debug)]
pub struct ThresholdFit {
    pub fit: GlmFit,
    pub wald: Wald,
    pub n_assigned: usize,
}

/// Regress the gene response on the covariates and the imputed perturbation
/// indicator; Wald inference uses the GLM Fisher information.
pub fn thresholded_regression(data: &Dataset, p_hat: &[f64], level: f64) -> Result<ThresholdFit> {
    let r = &data.responses[0];
    if p_hat.len() != data.n() {
        return Err(Error::Dimension("assignment vector has wrong length".into()));
    }
    let n_assigned = p_hat.iter().filter(|&&p| p > 0.5).count();
    if n_assigned == 0 || n_assigned == data.n() {
        return domain("thresholding assigned every cell to the same class");
    }
    let x = data.design.insert_column(1, p_hat, "perturbation")?;
    let ones = vec![1.0; data.n()];
    let fit = fit_weighted_glm(&r.y, &x, &r.family, &ones, &r.offsets, &IrlsOptions::default())?;
    let se = fit.std_errors()?;
    let wald = Wald::new(fit.coefficients[1], se[1], level)?;
    Ok(ThresholdFit { fit, wald, n_assigned })
}

#[derive(Clone, Debug)]
pub struct MixtureAssignment {
    pub fit: EmFit,
    pub probabilities: Vec<f64>,
    pub assignments: Vec<bool>,
    /// Nonconvergence or an unidentified perturbation class, if any.
    pub flags: Vec<Flag>,
}

/// Fit the gRNA-only latent model and assign each cell to its more probable class.
pub fn mixture_assign(
    g: &[f64],
    design: &DesignMatrix,
    offsets: &[f64],
    family: Family,
    opts: &EmOptions,
) -> Result<MixtureAssignment> {
    let data = Dataset::new(
        design.clone(),
        vec![Response { name: "g".into(), y: g.to_vec(), offsets: offsets.to_vec(), family }],
    )?;
    let fit = fit_accelerated(&data, opts)?;
    let probabilities = fit.memberships.clone();
    let assignments = probabilities.iter().map(|&t| t > 0.5).collect();
    let flags = fit
        .flags
        .iter()
        .filter(|f| matches!(f, Flag::NotConverged | Flag::Unidentified | Flag::PiDegenerate))
        .cloned()
        .collect();
    Ok(MixtureAssignment { fit, probabilities, assignments, flags })
}

/// Balanced accuracy of boolean assignments against the truth.
pub fn balanced_accuracy(pred: &[bool], truth: &[bool]) -> f64 {
    let (mut tp, mut p, mut tn, mut nn) = (0usize, 0usize, 0usize, 0usize);
    for (&a, &t) in pred.iter().zip(truth) {
        if t {
            p += 1;
            tp += a as usize;
        } else {
            nn += 1;
            tn += (!a) as usize;
        }
    }
    0.5 * (tp as f64 / p.max(1) as f64 + tn as f64 / nn.max(1) as f64)
}
