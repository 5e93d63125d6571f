//! Weighted GLM fitting by iteratively reweighted least squares, plus the
//! closed-form intercept-with-offset fits and negative binomial size
//! estimation.

use crate::design::DesignMatrix;
use crate::error::{domain, Error, Result};
use crate::family::Family;
use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::digamma;

#[derive(Clone, Debug)]
pub struct IrlsOptions {
    /// Sup-norm of the weighted score at which iteration stops.
    pub tol: f64,
    pub max_iter: usize,
    /// Rows whose prior weight falls below this are dropped.
    pub weight_floor: f64,
    pub max_halvings: usize,
    /// Warm start; when absent the fit starts from mu = y + 0.5.
    pub start: Option<DVector<f64>>,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        IrlsOptions {
            tol: 1e-10,
            max_iter: 50,
            weight_floor: 1e-12,
            max_halvings: 10,
            start: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GlmFit {
    pub coefficients: DVector<f64>,
    pub names: Vec<String>,
    pub iterations: usize,
    pub converged: bool,
    /// Weighted log likelihood including constant terms.
    pub log_likelihood: f64,
    pub score_norm: f64,
    /// X' W X at the returned coefficients.
    pub fisher: DMatrix<f64>,
}

impl GlmFit {
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        self.fisher
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| Error::Numerical("Fisher information is not positive definite".into()))
    }

    pub fn std_errors(&self) -> Result<Vec<f64>> {
        let cov = self.covariance()?;
        Ok((0..cov.nrows()).map(|i| cov[(i, i)].sqrt()).collect())
    }
}

struct State {
    eta: Vec<f64>,
    kernel: f64,
}

fn evaluate(
    x: &DesignMatrix,
    beta: &DVector<f64>,
    y: &[f64],
    w: &[f64],
    offsets: &[f64],
    family: &Family,
) -> State {
    let eta = x.linear_predictor(beta, offsets);
    let kernel = y
        .iter()
        .zip(w)
        .zip(&eta)
        .filter(|((_, &wi), _)| wi > 0.0)
        .map(|((&yi, &wi), &e)| wi * family.log_kernel(yi, e))
        .sum();
    State { eta, kernel }
}

/// Accumulates X'WX and X'Wz with working weights and responses taken from
/// the current linear predictor. Returns the score sup-norm as well.
fn normal_equations(
    x: &DesignMatrix,
    y: &[f64],
    w: &[f64],
    offsets: &[f64],
    eta: &[f64],
    family: &Family,
) -> (DMatrix<f64>, DVector<f64>, f64) {
    let n = x.nrows();
    let p = x.ncols();
    let mut ww = vec![0.0; n];
    let mut wz = vec![0.0; n];
    let mut ws = vec![0.0; n];
    for i in 0..n {
        if w[i] == 0.0 {
            continue;
        }
        let c = family.components(y[i], eta[i]);
        let me = if family.is_count() { c.mu } else { 1.0 };
        let wi = w[i] * me * me / c.var;
        ww[i] = wi;
        wz[i] = wi * (eta[i] - offsets[i] + c.resid / me);
        ws[i] = w[i] * c.resid * c.delta;
    }
    let mut xtwx = DMatrix::zeros(p, p);
    let mut xtwz = DVector::zeros(p);
    let mut score = DVector::<f64>::zeros(p);
    for j in 0..p {
        let cj = x.column(j);
        xtwz[j] = cj.iter().zip(&wz).map(|(a, b)| a * b).sum();
        score[j] = cj.iter().zip(&ws).map(|(a, b)| a * b).sum();
        for k in 0..=j {
            let ck = x.column(k);
            let v: f64 = cj.iter().zip(ck).zip(&ww).map(|((a, b), c)| a * b * c).sum();
            xtwx[(j, k)] = v;
            xtwx[(k, j)] = v;
        }
    }
    (xtwx, xtwz, score.amax())
}

fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    a.clone().cholesky().map(|c| c.solve(b))
}

/// Fit a GLM with prior weights and offsets by IRLS with step halving.
pub fn fit_weighted_glm(
    y: &[f64],
    x: &DesignMatrix,
    family: &Family,
    weights: &[f64],
    offsets: &[f64],
    opts: &IrlsOptions,
) -> Result<GlmFit> {
    let n = x.nrows();
    if y.len() != n || weights.len() != n || offsets.len() != n {
        return Err(Error::Dimension(format!(
            "response {}, weights {}, offsets {} for {} design rows",
            y.len(),
            weights.len(),
            offsets.len(),
            n
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return domain("weights must be finite and non-negative");
    }
    if y.iter().chain(offsets).any(|v| !v.is_finite()) {
        return domain("response and offsets must be finite");
    }
    if family.is_count() && y.iter().any(|&v| v < 0.0) {
        return domain("negative count in response");
    }
    let w: Vec<f64> = weights
        .iter()
        .map(|&wi| if wi < opts.weight_floor { 0.0 } else { wi })
        .collect();
    if family.is_count() && y.iter().zip(&w).all(|(yi, wi)| *yi == 0.0 || *wi == 0.0) {
        return domain("all weighted responses are zero; the fit is degenerate");
    }
    let bad = x.collinear_columns(&w, opts.weight_floor);
    if !bad.is_empty() {
        return Err(Error::RankDeficient(bad));
    }

    let p = x.ncols();
    let (mut beta, mut state) = match &opts.start {
        Some(b) if b.len() == p => {
            let st = evaluate(x, b, y, &w, offsets, family);
            (b.clone(), st)
        }
        _ => {
            let eta: Vec<f64> = y.iter().map(|&yi| family.link(family.initial_mean(yi))).collect();
            let (a, rhs, _) = normal_equations(x, y, &w, offsets, &eta, family);
            let b = solve_spd(&a, &rhs)
                .ok_or_else(|| Error::RankDeficient(x.names().to_vec()))?;
            let st = evaluate(x, &b, y, &w, offsets, family);
            (b, st)
        }
    };

    let mut iterations = 0;
    let mut converged = false;
    let (mut fisher, mut rhs, mut score) = normal_equations(x, y, &w, offsets, &state.eta, family);
    while iterations < opts.max_iter {
        if score < opts.tol {
            converged = true;
            break;
        }
        iterations += 1;
        let target = match solve_spd(&fisher, &rhs) {
            Some(t) => t,
            None => return Err(Error::Numerical("working information is singular".into())),
        };
        let mut step = target - &beta;
        let mut cand = &beta + &step;
        let mut cand_state = evaluate(x, &cand, y, &w, offsets, family);
        let mut halvings = 0;
        while !(cand_state.kernel >= state.kernel - 1e-12 * state.kernel.abs())
            && halvings < opts.max_halvings
        {
            step *= 0.5;
            cand = &beta + &step;
            cand_state = evaluate(x, &cand, y, &w, offsets, family);
            halvings += 1;
        }
        let rel = step.amax() / (1.0 + beta.amax());
        beta = cand;
        state = cand_state;
        let ne = normal_equations(x, y, &w, offsets, &state.eta, family);
        fisher = ne.0;
        rhs = ne.1;
        score = ne.2;
        // a step at machine precision means the score is as small as it gets
        if rel < 1e-13 {
            converged = true;
            break;
        }
    }
    if !converged && score < opts.tol {
        converged = true;
    }
    let carrier: f64 = y
        .iter()
        .zip(&w)
        .filter(|(_, &wi)| wi > 0.0)
        .map(|(&yi, &wi)| wi * family.log_carrier(yi))
        .sum();
    Ok(GlmFit {
        coefficients: beta,
        names: x.names().to_vec(),
        iterations,
        converged,
        log_likelihood: state.kernel + carrier,
        score_norm: score,
        fisher,
    })
}

/// Closed-form weighted fit of `y ~ 1 + offset(o)`. The negative binomial
/// family uses the Poisson solution, which is exact only as the size grows.
pub fn fit_intercept_plus_offset(
    y: &[f64],
    offsets: &[f64],
    weights: &[f64],
    family: &Family,
) -> Result<f64> {
    if y.len() != offsets.len() || y.len() != weights.len() {
        return Err(Error::Dimension("intercept fit inputs differ in length".into()));
    }
    let means: Vec<f64> = if family.is_count() {
        offsets.iter().map(|o| o.exp()).collect()
    } else {
        Vec::new()
    };
    intercept_from_means(y, offsets, &means, weights, family)
}

/// As [`fit_intercept_plus_offset`] with `exp(offsets)` supplied for the
/// count families.
pub(crate) fn intercept_from_means(
    y: &[f64],
    offsets: &[f64],
    exp_offsets: &[f64],
    weights: &[f64],
    family: &Family,
) -> Result<f64> {
    let sw: f64 = weights.iter().sum();
    if !(sw > 0.0) {
        return domain("weights sum to zero");
    }
    match family {
        Family::Gaussian => {
            let s: f64 = y
                .iter()
                .zip(offsets)
                .zip(weights)
                .map(|((yi, oi), wi)| wi * (yi - oi))
                .sum();
            Ok(s / sw)
        }
        _ => {
            let num: f64 = y.iter().zip(weights).map(|(yi, wi)| wi * yi).sum();
            let den: f64 = exp_offsets.iter().zip(weights).map(|(ei, wi)| wi * ei).sum();
            if !(num > 0.0) {
                return domain("weighted count total is zero");
            }
            Ok(num.ln() - den.ln())
        }
    }
}

#[derive(Clone, Debug)]
pub struct NbSizeFit {
    pub size: f64,
    pub fit: GlmFit,
    pub effectively_poisson: bool,
    pub rounds: usize,
}

pub const NB_SIZE_MIN: f64 = 1e-2;
pub const NB_SIZE_MAX: f64 = 1e6;

fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 20.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let x2 = 1.0 / (x * x);
    acc + 1.0 / x + x2 / 2.0
        + (1.0 / x) * x2 * (1.0 / 6.0 - x2 * (1.0 / 30.0 - x2 * (1.0 / 42.0 - x2 / 30.0)))
}

/// Profile log likelihood in log(size) and its first two derivatives.
fn size_profile(y: &[f64], mu: &[f64], theta: f64) -> (f64, f64, f64) {
    let s = theta.exp();
    let fam = Family::NegativeBinomial { size: s };
    let (dg_s, tg_s) = (digamma(s), trigamma(s));
    let mut f = 0.0;
    let mut d1 = 0.0;
    let mut d2 = 0.0;
    for (&yi, &mi) in y.iter().zip(mu) {
        f += fam.log_density_linear(yi, mi.ln());
        let sm = s + mi;
        d1 += digamma(yi + s) - dg_s + (s / sm).ln() + (mi - yi) / sm;
        d2 += trigamma(yi + s) - tg_s + 1.0 / s - 1.0 / sm - (mi - yi) / (sm * sm);
    }
    (f, s * d1, s * d1 + s * s * d2)
}

fn newton_log_size(y: &[f64], mu: &[f64], start: f64) -> f64 {
    let (lo, hi) = (NB_SIZE_MIN.ln(), NB_SIZE_MAX.ln());
    let mut theta = start.clamp(lo, hi);
    let (mut f, mut g, mut h) = size_profile(y, mu, theta);
    for _ in 0..100 {
        let mut step = if h < 0.0 { -g / h } else { g.signum() };
        step = step.clamp(-2.0, 2.0);
        let mut accepted = false;
        for _ in 0..30 {
            let cand = (theta + step).clamp(lo, hi);
            let (fc, gc, hc) = size_profile(y, mu, cand);
            if fc >= f - 1e-12 * f.abs() {
                let moved = (cand - theta).abs();
                theta = cand;
                f = fc;
                g = gc;
                h = hc;
                accepted = moved > 0.0;
                break;
            }
            step *= 0.5;
        }
        if !accepted || step.abs() < 1e-10 {
            break;
        }
    }
    theta
}

/// Estimate the negative binomial size by alternating IRLS for the
/// coefficients with Newton steps on log(size).
pub fn estimate_nb_size(y: &[f64], x: &DesignMatrix, offsets: &[f64]) -> Result<NbSizeFit> {
    let ones = vec![1.0; y.len()];
    let opts = IrlsOptions::default();
    let pois = fit_weighted_glm(y, x, &Family::Poisson, &ones, offsets, &opts)?;
    let mu: Vec<f64> = x
        .linear_predictor(&pois.coefficients, offsets)
        .iter()
        .map(|e| e.exp())
        .collect();
    let num: f64 = mu.iter().map(|m| m * m).sum();
    let den: f64 = y.iter().zip(&mu).map(|(yi, mi)| (yi - mi).powi(2) - mi).sum();
    let mut theta = if den > 0.0 { (num / den).ln() } else { NB_SIZE_MAX.ln() };
    theta = theta.clamp(NB_SIZE_MIN.ln(), NB_SIZE_MAX.ln());
    let mut fit = pois;
    let mut rounds = 0;
    for _ in 0..50 {
        rounds += 1;
        let fam = Family::NegativeBinomial { size: theta.exp() };
        let o = IrlsOptions { start: Some(fit.coefficients.clone()), ..IrlsOptions::default() };
        fit = fit_weighted_glm(y, x, &fam, &ones, offsets, &o)?;
        let mu: Vec<f64> = x
            .linear_predictor(&fit.coefficients, offsets)
            .iter()
            .map(|e| e.exp())
            .collect();
        let next = newton_log_size(y, &mu, theta);
        let done = (next - theta).abs() < 1e-8;
        theta = next;
        if done {
            break;
        }
    }
    let size = theta.exp();
    let fam = Family::NegativeBinomial { size };
    let o = IrlsOptions { start: Some(fit.coefficients.clone()), ..IrlsOptions::default() };
    fit = fit_weighted_glm(y, x, &fam, &ones, offsets, &o)?;
    Ok(NbSizeFit {
        size,
        fit,
        effectively_poisson: size >= NB_SIZE_MAX * (1.0 - 1e-9),
        rounds,
    })
}
