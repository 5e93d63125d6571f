//! EM for the latent-perturbation model. The engine handles any number of
//! responses sharing one binary latent variable; a gene/gRNA pair uses two,
//! the gRNA-only mixture uses one.

use crate::design::DesignMatrix;
use crate::error::{Error, Result};
use crate::family::Family;
use crate::glm::{fit_intercept_plus_offset, fit_weighted_glm, intercept_from_means, IrlsOptions};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;

pub const MEMBERSHIP_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct Response {
    pub name: String,
    pub y: Vec<f64>,
    pub offsets: Vec<f64>,
    pub family: Family,
}

/// Responses observed on the same cells, plus the shared covariate design
/// (intercept first, no perturbation column).
#[derive(Clone, Debug)]
pub struct Dataset {
    pub design: DesignMatrix,
    pub responses: Vec<Response>,
    carrier: f64,
}

impl Dataset {
    pub fn new(design: DesignMatrix, responses: Vec<Response>) -> Result<Self> {
        let n = design.nrows();
        if responses.is_empty() {
            return Err(Error::Dimension("at least one response is required".into()));
        }
        for r in &responses {
            if r.y.len() != n || r.offsets.len() != n {
                return Err(Error::Dimension(format!(
                    "response '{}' has {} values and {} offsets for {n} cells",
                    r.name,
                    r.y.len(),
                    r.offsets.len()
                )));
            }
            if r.offsets.iter().any(|o| !o.is_finite()) {
                return Err(Error::Domain(format!("non-finite offset in '{}'", r.name)));
            }
            if r.family.is_count() && r.y.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                return Err(Error::Domain(format!("invalid count in '{}'", r.name)));
            }
        }
        let carrier = responses
            .iter()
            .map(|r| r.y.iter().map(|&v| r.family.log_carrier(v)).sum::<f64>())
            .sum();
        Ok(Dataset { design, responses, carrier })
    }

    /// Gene (`m`) and gRNA (`g`) responses for one pair.
    #[allow(clippy::too_many_arguments)]
    pub fn pair(
        m: Vec<f64>,
        g: Vec<f64>,
        design: DesignMatrix,
        offsets_m: Vec<f64>,
        offsets_g: Vec<f64>,
        family_m: Family,
        family_g: Family,
    ) -> Result<Self> {
        Dataset::new(
            design,
            vec![
                Response { name: "m".into(), y: m, offsets: offsets_m, family: family_m },
                Response { name: "g".into(), y: g, offsets: offsets_g, family: family_g },
            ],
        )
    }

    pub fn n(&self) -> usize {
        self.design.nrows()
    }

    /// Number of coefficients per response, perturbation effect included.
    pub fn d(&self) -> usize {
        self.design.ncols() + 1
    }

    pub fn k(&self) -> usize {
        self.responses.len()
    }

    /// Error if some count response is zero in every cell.
    pub fn check_nondegenerate(&self) -> Result<()> {
        match self.responses.iter().find(|r| r.family.is_count() && r.y.iter().all(|&v| v == 0.0)) {
            Some(r) => Err(Error::Domain(format!("response '{}' is zero in every cell", r.name))),
            None => Ok(()),
        }
    }

    /// Design with the perturbation indicator fixed at `p` in column 1.
    pub fn augmented(&self, p: f64) -> DesignMatrix {
        let col = vec![p; self.n()];
        self.design.insert_column(1, &col, "perturbation").expect("length matches")
    }

    fn base(&self, k: usize, beta: &DVector<f64>) -> Vec<f64> {
        let r = &self.responses[k];
        self.design.linear_predictor(&drop_effect(beta), &r.offsets)
    }
}

/// Coefficients without the perturbation effect, i.e. `[b0, gamma...]`.
pub fn drop_effect(beta: &DVector<f64>) -> DVector<f64> {
    beta.clone().remove_row(1)
}

/// Coefficients `[b0, b1, gamma...]` built from the nuisance part and an effect.
pub fn with_effect(nuisance: &DVector<f64>, b1: f64) -> DVector<f64> {
    nuisance.clone().insert_row(1, b1)
}

/// Mixing proportion and one coefficient vector `[b0, b1, gamma...]` per response.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub pi: f64,
    pub betas: Vec<DVector<f64>>,
}

impl Params {
    pub fn pair(pi: f64, beta_m: DVector<f64>, beta_g: DVector<f64>) -> Self {
        Params { pi, betas: vec![beta_m, beta_g] }
    }

    pub fn beta_m(&self) -> &DVector<f64> {
        &self.betas[0]
    }

    pub fn beta_g(&self) -> &DVector<f64> {
        &self.betas[self.betas.len() - 1]
    }

    /// Relabel so that the perturbed class is the minority.
    pub fn label_swapped(&self) -> Params {
        let betas = self
            .betas
            .iter()
            .map(|b| {
                let mut s = b.clone();
                s[0] = b[0] + b[1];
                s[1] = -b[1];
                s
            })
            .collect();
        Params { pi: 1.0 - self.pi, betas }
    }

    /// `[pi, beta_1..., beta_K...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = vec![self.pi];
        for b in &self.betas {
            v.extend(b.iter());
        }
        v
    }

    pub fn from_flat(flat: &[f64], k: usize) -> Params {
        let d = (flat.len() - 1) / k;
        let betas = (0..k)
            .map(|j| DVector::from_column_slice(&flat[1 + j * d..1 + (j + 1) * d]))
            .collect();
        Params { pi: flat[0], betas }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Flag {
    NotConverged,
    /// The mixing proportion collapsed to 0 or 1.
    PiDegenerate,
    /// Near-tied restarts disagree on the effect by more than 0.1.
    RestartDisagreement,
    LikelihoodDecreased,
    InnerIrlsNotConverged,
    EffectivelyPoisson,
    LabelSwapped,
    /// The mixture barely improves on the covariate-only fit, so the
    /// perturbation class is not identified.
    Unidentified,
    /// Fewer than ten cells' worth of posterior mass in the perturbed class.
    SmallPerturbedClass,
}

impl fmt::Display for Flag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Flag::NotConverged => "not_converged",
            Flag::PiDegenerate => "pi_degenerate",
            Flag::RestartDisagreement => "restart_disagreement",
            Flag::LikelihoodDecreased => "likelihood_decreased",
            Flag::InnerIrlsNotConverged => "irls_not_converged",
            Flag::EffectivelyPoisson => "effectively_poisson",
            Flag::LabelSwapped => "label_swapped",
            Flag::Unidentified => "unidentified",
            Flag::SmallPerturbedClass => "small_perturbed_class",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug)]
pub struct EmOptions {
    /// Relative change in log likelihood at which EM stops.
    pub tol: f64,
    pub max_iter: usize,
    pub restarts: usize,
    /// Random effects are drawn from U(-2 scale, 2 scale).
    pub start_scale: f64,
    pub pi_start: (f64, f64),
    pub seed: u64,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            tol: 1e-7,
            max_iter: 100,
            restarts: 15,
            start_scale: 1.0,
            pi_start: (0.001, 0.45),
            seed: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EmFit {
    pub params: Params,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Posterior probability of perturbation for each cell.
    pub memberships: Vec<f64>,
    pub trace: Vec<f64>,
    pub n_glm_fits: usize,
    /// Restarts that produced a usable solution.
    pub restarts_used: usize,
    pub flags: Vec<Flag>,
}

impl EmFit {
    fn flag(&mut self, f: Flag) {
        if !self.flags.contains(&f) {
            self.flags.push(f);
        }
    }
}

#[derive(Clone, Debug)]
pub struct EStep {
    pub t1: Vec<f64>,
    pub log_likelihood: f64,
}

/// Linear components of the unperturbed class, kept with quantities that
/// stay fixed while only the perturbation effects change.
struct Base {
    l0: Vec<Vec<f64>>,
    mu0: Vec<Vec<f64>>,
    kernel: Vec<f64>,
}

impl Base {
    fn new(data: &Dataset, l0: Vec<Vec<f64>>) -> Base {
        let n = data.n();
        let mut kernel = vec![0.0; n];
        let mut mu0 = Vec::with_capacity(data.k());
        for (r, l) in data.responses.iter().zip(&l0) {
            for i in 0..n {
                kernel[i] += r.family.log_kernel(r.y[i], l[i]);
            }
            mu0.push(l.iter().map(|&v| r.family.linkinv(v)).collect());
        }
        Base { l0, mu0, kernel }
    }
}

/// E step given the unperturbed linear components and the effects that
/// shift them in the perturbed class.
fn estep_core(data: &Dataset, pi: f64, base: &Base, shifts: &[f64]) -> EStep {
    let n = data.n();
    let (lp0, lp1) = ((1.0 - pi).ln(), pi.ln());
    let exps: Vec<f64> = shifts.iter().map(|d| d.exp()).collect();
    let mut t1 = vec![0.0; n];
    let mut ll = data.carrier;
    for (i, t) in t1.iter_mut().enumerate() {
        let mut s = 0.0;
        for (k, r) in data.responses.iter().enumerate() {
            s += r.family.kernel_shift(r.y[i], base.l0[k][i], base.mu0[k][i], shifts[k], exps[k]);
        }
        // log odds of the perturbed class
        let z = lp1 - lp0 + s;
        if z > 0.0 {
            let e = (-z).exp();
            *t = 1.0 / (1.0 + e);
            ll += base.kernel[i] + lp1 + s + e.ln_1p();
        } else {
            let e = z.exp();
            *t = e / (1.0 + e);
            ll += base.kernel[i] + lp0 + e.ln_1p();
        }
    }
    EStep { t1, log_likelihood: ll }
}

fn bases_for(params: &Params, data: &Dataset) -> (Vec<Vec<f64>>, Vec<f64>) {
    let bases = (0..data.k()).map(|k| data.base(k, &params.betas[k])).collect();
    let shifts = params.betas.iter().map(|b| b[1]).collect();
    (bases, shifts)
}

fn full_estep(params: &Params, data: &Dataset) -> EStep {
    let (bases, shifts) = bases_for(params, data);
    estep_core(data, params.pi, &Base::new(data, bases), &shifts)
}

fn check_params(params: &Params, data: &Dataset) -> Result<()> {
    if params.betas.len() != data.k() {
        return Err(Error::Dimension(format!(
            "{} coefficient vectors for {} responses",
            params.betas.len(),
            data.k()
        )));
    }
    for b in &params.betas {
        if b.len() != data.d() {
            return Err(Error::Dimension(format!(
                "coefficient vector of length {} for d = {}",
                b.len(),
                data.d()
            )));
        }
    }
    if !(params.pi > 0.0 && params.pi < 1.0) {
        return Err(Error::Domain(format!("mixing proportion {} outside (0, 1)", params.pi)));
    }
    Ok(())
}

pub fn e_step(params: &Params, data: &Dataset) -> Result<EStep> {
    check_params(params, data)?;
    let es = full_estep(params, data);
    if !es.log_likelihood.is_finite() {
        let (bases, shifts) = bases_for(params, data);
        let bad = (0..data.n()).find(|&i| {
            data.responses.iter().enumerate().any(|(k, r)| {
                !(r.family.log_kernel(r.y[i], bases[k][i]).is_finite()
                    && r.family.log_kernel(r.y[i], bases[k][i] + shifts[k]).is_finite())
            })
        });
        return Err(Error::Numerical(match bad {
            Some(i) => format!("non-finite log density at cell {i}"),
            None => "non-finite log likelihood".into(),
        }));
    }
    Ok(es)
}

/// Marginal log likelihood, computed by log-sum-exp over the two components.
pub fn log_likelihood(params: &Params, data: &Dataset) -> Result<f64> {
    e_step(params, data).map(|e| e.log_likelihood)
}

/// Expected complete-data log likelihood at `params` with memberships `t1`.
pub fn q_function(params: &Params, t1: &[f64], data: &Dataset) -> Result<f64> {
    check_params(params, data)?;
    let (bases, shifts) = bases_for(params, data);
    let (lp0, lp1) = ((1.0 - params.pi).ln(), params.pi.ln());
    let mut q = data.carrier;
    for (i, &t) in t1.iter().enumerate() {
        let mut a0 = lp0;
        let mut a1 = lp1;
        for (k, r) in data.responses.iter().enumerate() {
            a0 += r.family.log_kernel(r.y[i], bases[k][i]);
            a1 += r.family.log_kernel(r.y[i], bases[k][i] + shifts[k]);
        }
        q += (1.0 - t) * a0 + t * a1;
    }
    Ok(q)
}

/// Row-doubled problem used by the M step: cells under p = 0 then p = 1.
struct Doubled {
    design: DesignMatrix,
    y: Vec<Vec<f64>>,
    offsets: Vec<Vec<f64>>,
}

impl Doubled {
    fn new(data: &Dataset) -> Doubled {
        let design = data.augmented(0.0).stack(&data.augmented(1.0)).expect("same width");
        let twice = |v: &[f64]| [v, v].concat();
        Doubled {
            design,
            y: data.responses.iter().map(|r| twice(&r.y)).collect(),
            offsets: data.responses.iter().map(|r| twice(&r.offsets)).collect(),
        }
    }
}

fn clamped(t1: &[f64]) -> Vec<f64> {
    t1.iter().map(|t| t.clamp(MEMBERSHIP_CLAMP, 1.0 - MEMBERSHIP_CLAMP)).collect()
}

fn m_step_doubled(
    t1: &[f64],
    data: &Dataset,
    doubled: &Doubled,
    warm: Option<&Params>,
) -> Result<(Params, bool)> {
    let tc = clamped(t1);
    let pi = tc.iter().sum::<f64>() / tc.len() as f64;
    let w: Vec<f64> = tc.iter().map(|t| 1.0 - t).chain(tc.iter().copied()).collect();
    let mut betas = Vec::with_capacity(data.k());
    let mut all_converged = true;
    for (k, r) in data.responses.iter().enumerate() {
        let opts = IrlsOptions {
            start: warm.map(|p| p.betas[k].clone()),
            ..IrlsOptions::default()
        };
        let fit = fit_weighted_glm(&doubled.y[k], &doubled.design, &r.family, &w, &doubled.offsets[k], &opts)?;
        all_converged &= fit.converged;
        betas.push(fit.coefficients);
    }
    Ok((Params { pi, betas }, all_converged))
}

/// One M step: the mixing proportion is the mean membership and each
/// response gets a weighted GLM on the row-doubled design.
pub fn m_step(t1: &[f64], data: &Dataset, warm: Option<&Params>) -> Result<Params> {
    if t1.len() != data.n() {
        return Err(Error::Dimension("membership vector has wrong length".into()));
    }
    m_step_doubled(t1, data, &Doubled::new(data), warm).map(|r| r.0)
}

fn relative_change(prev: f64, cur: f64) -> f64 {
    (cur - prev).abs() / (cur.abs() + 1.0)
}

const PI_DEGENERATE: f64 = 1e-10;
const MIN_CLASS_MASS: f64 = 10.0;

/// Minimum log-likelihood gain of the mixture over the covariate-only fit
/// below which the fit is flagged as unidentified.
pub const UNIDENTIFIED_GAIN: f64 = 5.0;

/// EM from a single starting point.
pub fn run_em(start: &Params, data: &Dataset, opts: &EmOptions) -> Result<EmFit> {
    check_params(start, data)?;
    let doubled = Doubled::new(data);
    let mut params = start.clone();
    let mut es = e_step(&params, data)?;
    let mut fit = EmFit {
        params: params.clone(),
        log_likelihood: es.log_likelihood,
        iterations: 0,
        converged: false,
        memberships: Vec::new(),
        trace: vec![es.log_likelihood],
        n_glm_fits: 0,
        restarts_used: 1,
        flags: Vec::new(),
    };
    for it in 1..=opts.max_iter {
        let (next, inner_ok) = m_step_doubled(&es.t1, data, &doubled, Some(&params))?;
        fit.n_glm_fits += data.k();
        fit.iterations = it;
        if !inner_ok {
            fit.flag(Flag::InnerIrlsNotConverged);
        }
        if next.pi < PI_DEGENERATE || next.pi > 1.0 - PI_DEGENERATE {
            fit.flag(Flag::PiDegenerate);
            params = next;
            params.pi = params.pi.clamp(PI_DEGENERATE, 1.0 - PI_DEGENERATE);
            es = e_step(&params, data)?;
            fit.trace.push(es.log_likelihood);
            break;
        }
        let prev = es.log_likelihood;
        params = next;
        es = e_step(&params, data)?;
        fit.trace.push(es.log_likelihood);
        if es.log_likelihood < prev - 1e-8 * (1.0 + prev.abs()) {
            fit.flag(Flag::LikelihoodDecreased);
        }
        if relative_change(prev, es.log_likelihood) < opts.tol {
            fit.converged = true;
            break;
        }
    }
    if !fit.converged {
        fit.flag(Flag::NotConverged);
    }
    let mut t1 = es.t1;
    let mass: f64 = t1.iter().sum();
    if mass.min(data.n() as f64 - mass) < MIN_CLASS_MASS {
        fit.flag(Flag::SmallPerturbedClass);
    }
    if params.pi > 0.5 {
        params = params.label_swapped();
        t1.iter_mut().for_each(|t| *t = 1.0 - *t);
        fit.flag(Flag::LabelSwapped);
    }
    fit.params = params;
    fit.log_likelihood = es.log_likelihood;
    fit.memberships = t1;
    Ok(fit)
}

/// Covariate-only fits for each response with unit weights.
#[derive(Clone, Debug)]
pub struct Pilot {
    /// `[b0, gamma...]` for each response.
    pub nuisance: Vec<DVector<f64>>,
    /// Fitted linear predictor, offsets included, for each response.
    pub fitted: Vec<Vec<f64>>,
    /// Summed log likelihood of the pilot fits.
    pub log_likelihood: f64,
}

pub fn pilot_nuisance(data: &Dataset) -> Result<Pilot> {
    let ones = vec![1.0; data.n()];
    let mut nuisance = Vec::new();
    let mut fitted = Vec::new();
    let mut log_likelihood = 0.0;
    for r in &data.responses {
        let fit = fit_weighted_glm(&r.y, &data.design, &r.family, &ones, &r.offsets, &IrlsOptions::default())?;
        fitted.push(data.design.linear_predictor(&fit.coefficients, &r.offsets));
        log_likelihood += fit.log_likelihood;
        nuisance.push(fit.coefficients);
    }
    Ok(Pilot { nuisance, fitted, log_likelihood })
}

/// Result of EM on the model whose nuisance part is frozen at the pilot fit.
#[derive(Clone, Debug)]
pub struct ReducedFit {
    pub pi: f64,
    pub effects: Vec<f64>,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub fn run_reduced_em(
    data: &Dataset,
    fitted: &[Vec<f64>],
    pi0: f64,
    effects0: &[f64],
    opts: &EmOptions,
) -> Result<ReducedFit> {
    let mut pi = pi0;
    let mut effects = effects0.to_vec();
    let base = Base::new(data, fitted.to_vec());
    let mut es = estep_core(data, pi, &base, &effects);
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=opts.max_iter {
        iterations = it;
        let tc = clamped(&es.t1);
        pi = tc.iter().sum::<f64>() / tc.len() as f64;
        if pi < PI_DEGENERATE || pi > 1.0 - PI_DEGENERATE {
            // the boundary is a fixed point
            converged = true;
            break;
        }
        for (k, r) in data.responses.iter().enumerate() {
            effects[k] = intercept_from_means(&r.y, &fitted[k], &base.mu0[k], &tc, &r.family)?;
        }
        let prev = es.log_likelihood;
        es = estep_core(data, pi, &base, &effects);
        if relative_change(prev, es.log_likelihood) < opts.tol {
            converged = true;
            break;
        }
    }
    if pi > 0.5 {
        pi = 1.0 - pi;
        effects.iter_mut().for_each(|e| *e = -*e);
    }
    Ok(ReducedFit { pi, effects, log_likelihood: es.log_likelihood, iterations, converged })
}

fn random_start(rng: &mut ChaCha8Rng, k: usize, opts: &EmOptions) -> (f64, Vec<f64>) {
    let pi = rng.gen_range(opts.pi_start.0..opts.pi_start.1);
    let s = 2.0 * opts.start_scale;
    let effects = (0..k).map(|_| rng.gen_range(-s..s)).collect();
    (pi, effects)
}

/// Whether near-tied candidates disagree on the first response's effect.
fn disagreement(cands: &[(f64, f64)]) -> bool {
    let best = cands.iter().cloned().fold((f64::NEG_INFINITY, 0.0), |a, c| if c.0 > a.0 { c } else { a });
    cands
        .iter()
        .filter(|c| c.0 >= best.0 - 1.0)
        .any(|c| (c.1 - best.1).abs() > 0.1)
}

/// Pilot fits, reduced EM from random restarts, then full EM from the
/// best reduced solution.
pub fn fit_accelerated(data: &Dataset, opts: &EmOptions) -> Result<EmFit> {
    data.check_nondegenerate()?;
    let pilot = pilot_nuisance(data)?;
    fit_accelerated_with_pilot(data, &pilot, opts)
}

pub fn fit_accelerated_with_pilot(data: &Dataset, pilot: &Pilot, opts: &EmOptions) -> Result<EmFit> {
    data.check_nondegenerate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<ReducedFit> = None;
    let mut cands = Vec::new();
    for _ in 0..opts.restarts.max(1) {
        let (pi0, e0) = random_start(&mut rng, data.k(), opts);
        let r = run_reduced_em(data, &pilot.fitted, pi0, &e0, opts)?;
        if !(r.converged && r.log_likelihood.is_finite()) {
            continue;
        }
        cands.push((r.log_likelihood, r.effects[0]));
        if best.as_ref().map_or(true, |b| r.log_likelihood > b.log_likelihood) {
            best = Some(r);
        }
    }
    let best = best.ok_or_else(|| Error::Numerical("reduced EM did not converge from any restart around the pilot fit; use the vanilla fit instead".into()))?;
    let pi = best.pi.clamp(1e-6, 0.5);
    let start = Params {
        pi,
        betas: pilot
            .nuisance
            .iter()
            .zip(&best.effects)
            .map(|(nu, &e)| with_effect(nu, e))
            .collect(),
    };
    let mut fit = run_em(&start, data, opts)?;
    fit.n_glm_fits += data.k();
    fit.restarts_used = cands.len();
    if disagreement(&cands) {
        fit.flag(Flag::RestartDisagreement);
    }
    if fit.log_likelihood - pilot.log_likelihood < UNIDENTIFIED_GAIN {
        fit.flag(Flag::Unidentified);
    }
    Ok(fit)
}

/// Full EM from random starts; nuisance intercepts start at the closed-form
/// intercept-only solution and covariate effects at zero.
pub fn fit_vanilla(data: &Dataset, opts: &EmOptions) -> Result<EmFit> {
    data.check_nondegenerate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let ones = vec![1.0; data.n()];
    let intercepts: Vec<f64> = data
        .responses
        .iter()
        .map(|r| fit_intercept_plus_offset(&r.y, &r.offsets, &ones, &r.family))
        .collect::<Result<_>>()?;
    let d = data.d();
    let mut best: Option<EmFit> = None;
    let mut total_fits = 0;
    let mut cands = Vec::new();
    for _ in 0..opts.restarts.max(1) {
        let (pi0, e0) = random_start(&mut rng, data.k(), opts);
        let betas = intercepts
            .iter()
            .zip(&e0)
            .map(|(&b0, &b1)| {
                let mut b = DVector::zeros(d);
                b[0] = b0;
                b[1] = b1;
                b
            })
            .collect();
        let fit = match run_em(&Params { pi: pi0, betas }, data, opts) {
            Ok(f) => f,
            Err(Error::RankDeficient(_)) | Err(Error::Numerical(_)) => continue,
            Err(e) => return Err(e),
        };
        total_fits += fit.n_glm_fits;
        cands.push((fit.log_likelihood, fit.params.betas[0][1]));
        if best.as_ref().map_or(true, |b| fit.log_likelihood > b.log_likelihood) {
            best = Some(fit);
        }
    }
    let mut fit = best.ok_or_else(|| Error::Numerical("every EM restart failed".into()))?;
    fit.n_glm_fits = total_fits;
    fit.restarts_used = cands.len();
    if disagreement(&cands) {
        fit.flag(Flag::RestartDisagreement);
    }
    Ok(fit)
}
