//! Synthetic screens: data generation, method evaluation and the
//! contamination experiment.

use crate::assignment::{covariate_bayes_threshold, mixture_assign, threshold_assign, thresholded_regression};
use crate::design::DesignMatrix;
use crate::em::{fit_accelerated, fit_vanilla, Dataset, EmOptions, Response};
use crate::error::{Error, Result};
use crate::family::Family;
use crate::glm::estimate_nb_size;
use crate::louis::{louis_information, Wald};
use crate::zero_inflated::{fit_zi, zi_information};
use rayon::prelude::*;
use std::time::Instant;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Gene,
    Grna,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Covariate {
    Bernoulli(f64),
    Uniform(f64, f64),
    Normal(f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub n: usize,
    pub pi: f64,
    /// `[b0, b1, gamma...]`
    pub beta_m: Vec<f64>,
    pub beta_g: Vec<f64>,
    pub family_m: Family,
    pub family_g: Family,
    pub covariates: Vec<Covariate>,
    /// Poisson means of the library sizes; their logs become offsets.
    pub depth_mean_m: f64,
    pub depth_mean_g: f64,
    pub depth_as_offset: bool,
    /// Unperturbed cells have exactly zero gRNA counts.
    pub zero_inflated: bool,
    pub doublet_fraction: f64,
    pub doublet_target: Target,
    /// Effect of an unobserved U(0, 1) cell-cycle score on one modality.
    pub hidden_effect: Option<(Target, f64)>,
    pub n_sim: usize,
    pub seed: u64,
}

pub const MAIN_DEPTH_M: f64 = 10000.0;
pub const MAIN_DEPTH_G: f64 = 5000.0;

impl Scenario {
    /// Count-data scenario with one Bernoulli(1/2) batch covariate and the
    /// given gRNA fold change.
    pub fn main_text(n: usize, grna_fold: f64, family_m: Family, family_g: Family) -> Scenario {
        Scenario {
            n,
            pi: 0.02,
            beta_m: vec![0.01f64.ln(), 0.25f64.ln(), 0.9f64.ln()],
            beta_g: vec![5e-3f64.ln(), grna_fold.ln(), 1.1f64.ln()],
            family_m,
            family_g,
            covariates: vec![Covariate::Bernoulli(0.5)],
            depth_mean_m: MAIN_DEPTH_M,
            depth_mean_g: MAIN_DEPTH_G,
            depth_as_offset: true,
            zero_inflated: false,
            doublet_fraction: 0.0,
            doublet_target: Target::Grna,
            hidden_effect: None,
            n_sim: 1,
            seed: 1,
        }
    }

    /// Unit-variance Gaussian responses with no offsets.
    pub fn gaussian(n: usize, grna_effect: f64) -> Scenario {
        Scenario {
            n,
            pi: 0.05,
            beta_m: vec![1.0, -4.0, 0.5],
            beta_g: vec![-1.0, grna_effect, 0.5],
            family_m: Family::Gaussian,
            family_g: Family::Gaussian,
            covariates: vec![Covariate::Bernoulli(0.5)],
            depth_mean_m: 1.0,
            depth_mean_g: 1.0,
            depth_as_offset: false,
            zero_inflated: false,
            doublet_fraction: 0.0,
            doublet_target: Target::Grna,
            hidden_effect: None,
            n_sim: 1,
            seed: 1,
        }
    }

    pub fn d(&self) -> usize {
        self.covariates.len() + 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n == 0 {
            return bad("n must be positive");
        }
        if !(0.0..=0.5).contains(&self.pi) {
            return bad("pi must lie in [0, 1/2]");
        }
        if self.n_sim == 0 {
            return bad("n_sim must be positive");
        }
        if self.beta_m.len() != self.d() || self.beta_g.len() != self.d() {
            return Err(Error::Config(format!(
                "coefficient vectors must have length {} (2 + covariates)",
                self.d()
            )));
        }
        if !(0.0..0.5).contains(&self.doublet_fraction) {
            return bad("doublet fraction must lie in [0, 1/2)");
        }
        if self.depth_as_offset && !(self.depth_mean_m > 0.0 && self.depth_mean_g > 0.0) {
            return bad("depth means must be positive");
        }
        Ok(())
    }
}

/// A generated replicate together with its hidden truth.
#[derive(Clone, Debug)]
pub struct SimData {
    pub dataset: Dataset,
    pub perturbed: Vec<bool>,
    pub hidden: Option<Vec<f64>>,
    pub covariates: Vec<Vec<f64>>,
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finaliser applied to a combination of the two keys
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random stream for one (seed, replicate, cell) key.
pub fn cell_rng(seed: u64, replicate: u64, cell: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, replicate));
    rng.set_stream(cell);
    rng
}

/// Draw one observation with linear component `l`.
pub fn draw(family: &Family, l: f64, rng: &mut impl Rng) -> f64 {
    match family {
        Family::Gaussian => l + Normal::new(0.0, 1.0).unwrap().sample(rng),
        Family::Poisson => draw_poisson(l.exp(), rng),
        Family::NegativeBinomial { size } => {
            let mu = l.exp();
            let lam = Gamma::new(*size, mu / size).unwrap().sample(rng);
            draw_poisson(lam, rng)
        }
    }
}

fn draw_poisson(mu: f64, rng: &mut impl Rng) -> f64 {
    if mu <= 0.0 {
        0.0
    } else {
        Poisson::new(mu).unwrap().sample(rng)
    }
}

fn draw_covariate(c: &Covariate, rng: &mut impl Rng) -> f64 {
    match c {
        Covariate::Bernoulli(p) => (rng.gen::<f64>() < *p) as u8 as f64,
        Covariate::Uniform(a, b) => rng.gen_range(*a..*b),
        Covariate::Normal(m, s) => m + s * Normal::new(0.0, 1.0).unwrap().sample(rng),
    }
}

fn linear(beta: &[f64], p: bool, z: &[f64], offset: f64) -> f64 {
    let mut l = beta[0] + offset + if p { beta[1] } else { 0.0 };
    for (b, zj) in beta[2..].iter().zip(z) {
        l += b * zj;
    }
    l
}

const MAX_LINEAR: f64 = 700.0;

/// Replicate `replicate` of the scenario under its own seed.
pub fn generate_dataset(s: &Scenario, replicate: u64) -> Result<SimData> {
    generate(s, s.seed, replicate)
}

pub fn generate(s: &Scenario, seed: u64, replicate: u64) -> Result<SimData> {
    s.validate()?;
    let n = s.n;
    let q = s.covariates.len();
    let mut perturbed = vec![false; n];
    let mut covs = vec![vec![0.0; n]; q];
    let mut off_m = vec![0.0; n];
    let mut off_g = vec![0.0; n];
    let mut m = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut hidden = s.hidden_effect.map(|_| vec![0.0; n]);
    let mut z = vec![0.0; q];
    for i in 0..n {
        let mut rng = cell_rng(seed, replicate, i as u64);
        let p = rng.gen::<f64>() < s.pi;
        perturbed[i] = p;
        for (j, c) in s.covariates.iter().enumerate() {
            z[j] = draw_covariate(c, &mut rng);
            covs[j][i] = z[j];
        }
        if s.depth_as_offset {
            off_m[i] = draw_poisson(s.depth_mean_m, &mut rng).max(1.0).ln();
            off_g[i] = draw_poisson(s.depth_mean_g, &mut rng).max(1.0).ln();
        }
        let mut lm = linear(&s.beta_m, p, &z, off_m[i]);
        let mut lg = linear(&s.beta_g, p, &z, off_g[i]);
        if let (Some((target, effect)), Some(h)) = (s.hidden_effect, hidden.as_mut()) {
            let u: f64 = rng.gen();
            h[i] = u;
            match target {
                Target::Gene => lm += effect * u,
                Target::Grna => lg += effect * u,
            }
        }
        if lm > MAX_LINEAR || lg > MAX_LINEAR {
            return Err(Error::Config(format!("cell {i}: mean overflows (linear component above {MAX_LINEAR})")));
        }
        m[i] = draw(&s.family_m, lm, &mut rng);
        g[i] = if s.zero_inflated && !p { 0.0 } else { draw(&s.family_g, lg, &mut rng) };
    }
    let n_doublets = (s.doublet_fraction * n as f64).round() as usize;
    if n_doublets > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ 0xD0B1_E7, replicate));
        let idx = rand::seq::index::sample(&mut rng, n, n_doublets);
        let target = match s.doublet_target {
            Target::Gene => &mut m,
            Target::Grna => &mut g,
        };
        for i in idx.iter() {
            target[i] *= 2.0;
        }
    }
    let named: Vec<(String, Vec<f64>)> = covs
        .iter()
        .enumerate()
        .map(|(j, c)| (format!("z{}", j + 1), c.clone()))
        .collect();
    let design = DesignMatrix::with_intercept(n, &named)?;
    let dataset = Dataset::new(
        design,
        vec![
            Response { name: "m".into(), y: m, offsets: off_m, family: s.family_m },
            Response { name: "g".into(), y: g, offsets: off_g, family: s.family_g },
        ],
    )?;
    Ok(SimData { dataset, perturbed, hidden, covariates: covs })
}

/// Regenerate gRNA counts with part of the perturbation effect moved into
/// the background: `b0 + eps b1` and `(1 - eps) b1`. Memberships, covariates,
/// offsets and gene counts are kept. The random stream depends on
/// `(seed, replicate)` only, so levels of `eps` share their draws.
pub fn inject_excess_contamination(
    data: &Dataset,
    perturbed: &[bool],
    beta_g: &[f64],
    eps: f64,
    seed: u64,
    replicate: u64,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::Config(format!("contamination level {eps} outside [0, 1]")));
    }
    if beta_g.len() != data.d() || perturbed.len() != data.n() {
        return Err(Error::Dimension("contamination inputs do not match the data".into()));
    }
    let mut b = beta_g.to_vec();
    b[0] = beta_g[0] + eps * beta_g[1];
    b[1] = (1.0 - eps) * beta_g[1];
    let gi = data.k() - 1;
    let resp = &data.responses[gi];
    let x = data.design.matrix();
    let mut out = data.clone();
    let mut g = vec![0.0; data.n()];
    for (i, gv) in g.iter_mut().enumerate() {
        let mut rng = cell_rng(mix(seed, 0xC0_17A9), replicate, i as u64);
        let mut l = b[0] + resp.offsets[i] + if perturbed[i] { b[1] } else { 0.0 };
        for j in 1..x.ncols() {
            l += b[j + 1] * x[(i, j)];
        }
        *gv = draw(&resp.family, l, &mut rng);
    }
    let mut responses = out.responses.clone();
    responses[gi].y = g;
    out = Dataset::new(out.design.clone(), responses)?;
    Ok(out)
}

/// How the thresholding method picks its cutoff.
#[derive(Clone, Debug, PartialEq)]
pub enum Cutoff {
    /// Cell-specific Bayes boundary under the true gRNA model.
    Bayes,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Method {
    Accelerated,
    Vanilla,
    Thresholding(Cutoff),
    /// gRNA-only mixture assignment followed by regression on the assignments.
    Mixture,
    ZeroInflated,
}

impl Method {
    pub fn id(&self) -> String {
        match self {
            Method::Accelerated => "glmeiv_accelerated".into(),
            Method::Vanilla => "glmeiv_vanilla".into(),
            Method::Thresholding(Cutoff::Bayes) => "thresholding_bayes".into(),
            Method::Thresholding(Cutoff::Fixed(c)) => format!("thresholding_{c}"),
            Method::Mixture => "mixture_assignment".into(),
            Method::ZeroInflated => "glmeiv_zero_inflated".into(),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        Ok(match s {
            "glmeiv_accelerated" | "accelerated" => Method::Accelerated,
            "glmeiv_vanilla" | "vanilla" => Method::Vanilla,
            "thresholding_bayes" | "thresholding" => Method::Thresholding(Cutoff::Bayes),
            "mixture_assignment" | "mixture" => Method::Mixture,
            "glmeiv_zero_inflated" | "zero_inflated" => Method::ZeroInflated,
            other => match other.strip_prefix("thresholding_").map(str::parse::<f64>) {
                Some(Ok(c)) => Method::Thresholding(Cutoff::Fixed(c)),
                _ => return Err(Error::Config(format!("unknown method '{other}'"))),
            },
        })
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub em: EmOptions,
    pub level: f64,
    /// Estimate the gene NB size before fitting instead of using the truth.
    pub estimate_size: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { em: EmOptions::default(), level: 0.95, estimate_size: false }
    }
}

/// One method applied to one replicate.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodEstimate {
    pub estimate: f64,
    pub wald: Wald,
    pub converged: bool,
    pub n_glm_fits: usize,
    pub seconds: f64,
}

/// Apply one method to a generated replicate and estimate the gene effect.
pub fn run_method(method: &Method, scenario: &Scenario, sim: &SimData, opts: &EvalOptions) -> Result<MethodEstimate> {
    let data = &sim.dataset;
    let start = Instant::now();
    let (wald, converged, n_glm_fits) = match method {
        Method::Accelerated | Method::Vanilla => {
            let fit = if *method == Method::Accelerated {
                fit_accelerated(data, &opts.em)?
            } else {
                fit_vanilla(data, &opts.em)?
            };
            let w = louis_information(&fit.params, data)?.wald(&fit.params, 0, 1, opts.level)?;
            (w, fit.converged, fit.n_glm_fits)
        }
        Method::Thresholding(cut) => {
            let g = &data.responses[1];
            let thresholds = match cut {
                Cutoff::Bayes => vec![
                    covariate_bayes_threshold(&scenario.family_g, &scenario.beta_g, scenario.pi, &data.design, &g.offsets)?
                        .threshold,
                ],
                Cutoff::Fixed(c) => vec![*c],
            };
            let tf = thresholded_regression(data, &threshold_assign(&g.y, &thresholds), opts.level)?;
            (tf.wald, tf.fit.converged, 1)
        }
        Method::Mixture => {
            let g = &data.responses[1];
            let ma = mixture_assign(&g.y, &data.design, &g.offsets, g.family, &opts.em)?;
            let p_hat: Vec<f64> = ma.assignments.iter().map(|&a| a as u8 as f64).collect();
            let tf = thresholded_regression(data, &p_hat, opts.level)?;
            (tf.wald, tf.fit.converged && ma.fit.converged, ma.fit.n_glm_fits + 1)
        }
        Method::ZeroInflated => {
            let fit = fit_zi(data, &opts.em)?;
            let info = zi_information(&fit.params, data)?;
            let cov = info.covariance()?;
            let w = Wald::new(fit.params.beta_m[1], cov[(2, 2)].sqrt(), opts.level)?;
            (w, fit.converged, fit.n_glm_fits)
        }
    };
    Ok(MethodEstimate {
        estimate: wald.estimate,
        wald,
        converged,
        n_glm_fits,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Aggregate performance of one method over the replicates of a scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    /// Free-form scenario coordinates, e.g. `grna_fold=2.5`.
    pub scenario: String,
    pub n_sim: usize,
    pub n_converged: usize,
    pub mean_estimate: f64,
    /// `mean(estimate) - truth` on the log fold-change scale.
    pub bias: f64,
    pub mse: f64,
    pub coverage: f64,
    pub ci_width: f64,
    pub rejection_probability: f64,
    pub mean_runtime: f64,
    pub mean_glm_fits: f64,
}

impl MetricsRow {
    pub const HEADER: [&'static str; 12] = [
        "method",
        "scenario",
        "n_sim",
        "n_converged",
        "mean_estimate",
        "bias",
        "mse",
        "coverage",
        "ci_width",
        "rejection_probability",
        "mean_runtime",
        "mean_glm_fits",
    ];

    pub fn record(&self) -> Vec<String> {
        vec![
            self.method.clone(),
            self.scenario.clone(),
            self.n_sim.to_string(),
            self.n_converged.to_string(),
            self.mean_estimate.to_string(),
            self.bias.to_string(),
            self.mse.to_string(),
            self.coverage.to_string(),
            self.ci_width.to_string(),
            self.rejection_probability.to_string(),
            self.mean_runtime.to_string(),
            self.mean_glm_fits.to_string(),
        ]
    }

    /// Aggregate successful, converged estimates against the true effect.
    pub fn aggregate(method: &str, scenario: &str, truth: f64, results: &[Result<MethodEstimate>], alpha: f64) -> MetricsRow {
        let ok: Vec<&MethodEstimate> = results.iter().filter_map(|r| r.as_ref().ok()).filter(|e| e.converged).collect();
        let k = ok.len() as f64;
        let mean = |f: &dyn Fn(&MethodEstimate) -> f64| ok.iter().map(|e| f(e)).sum::<f64>() / k;
        MetricsRow {
            method: method.to_string(),
            scenario: scenario.to_string(),
            n_sim: results.len(),
            n_converged: ok.len(),
            mean_estimate: mean(&|e| e.estimate),
            bias: mean(&|e| e.estimate) - truth,
            mse: mean(&|e| (e.estimate - truth).powi(2)),
            coverage: mean(&|e| (e.wald.ci_lo <= truth && truth <= e.wald.ci_hi) as u8 as f64),
            ci_width: mean(&|e| e.wald.ci_hi - e.wald.ci_lo),
            rejection_probability: mean(&|e| (e.wald.p_value < alpha) as u8 as f64),
            mean_runtime: mean(&|e| e.seconds),
            mean_glm_fits: mean(&|e| e.n_glm_fits as f64),
        }
    }
}

/// Replicate with the gene NB size replaced by its estimate when requested.
fn prepared(scenario: &Scenario, replicate: u64, opts: &EvalOptions) -> Result<SimData> {
    let mut sim = generate_dataset(scenario, replicate)?;
    if opts.estimate_size && matches!(scenario.family_m, Family::NegativeBinomial { .. }) {
        let r = &sim.dataset.responses[0];
        let fit = estimate_nb_size(&r.y, &sim.dataset.design, &r.offsets)?;
        let mut responses = sim.dataset.responses.clone();
        responses[0].family = Family::negative_binomial(fit.size)?;
        sim.dataset = Dataset::new(sim.dataset.design.clone(), responses)?;
    }
    Ok(sim)
}

/// Per-replicate estimates for every method, indexed `[method][replicate]`.
pub fn replicate_estimates(
    scenario: &Scenario,
    methods: &[Method],
    opts: &EvalOptions,
) -> Result<Vec<Vec<Result<MethodEstimate>>>> {
    scenario.validate()?;
    if methods.is_empty() {
        return Err(Error::Config("no methods requested".into()));
    }
    let per_rep: Vec<Vec<Result<MethodEstimate>>> = (0..scenario.n_sim as u64)
        .into_par_iter()
        .map(|rep| match prepared(scenario, rep, opts) {
            Ok(sim) => methods.iter().map(|m| run_method(m, scenario, &sim, opts)).collect(),
            Err(e) => methods.iter().map(|_| Err(Error::Numerical(e.to_string()))).collect(),
        })
        .collect();
    let mut out: Vec<Vec<Result<MethodEstimate>>> = methods.iter().map(|_| Vec::new()).collect();
    for rep in per_rep {
        for (j, r) in rep.into_iter().enumerate() {
            out[j].push(r);
        }
    }
    Ok(out)
}

/// Run every method on `n_sim` replicates and aggregate one row per method.
pub fn evaluate_methods(scenario: &Scenario, methods: &[Method], label: &str, opts: &EvalOptions) -> Result<Vec<MetricsRow>> {
    let est = replicate_estimates(scenario, methods, opts)?;
    let alpha = 1.0 - opts.level;
    Ok(methods
        .iter()
        .zip(&est)
        .map(|(m, r)| MetricsRow::aggregate(&m.id(), label, scenario.beta_m[1], r, alpha))
        .collect())
}

/// Relative estimate change of one method at one contamination level.
#[derive(Clone, Debug, PartialEq)]
pub struct RecRow {
    pub method: String,
    pub epsilon: f64,
    pub mean_estimate: f64,
    /// `(mean(eps) - mean(0)) / |mean(0)|`.
    pub rec: f64,
    pub n_ok: usize,
}

/// Contamination experiment on one pair: at each level, `b` synthetic gRNA
/// vectors are drawn from `beta_g` with excess contamination and each method
/// is refit; estimates are averaged per level before the relative change
/// against the first level.
pub fn contamination_rec(
    sim: &SimData,
    beta_g: &[f64],
    scenario: &Scenario,
    grid: &[f64],
    b: usize,
    methods: &[Method],
    opts: &EvalOptions,
) -> Result<Vec<RecRow>> {
    if grid.is_empty() || b == 0 || methods.is_empty() {
        return Err(Error::Config("contamination experiment needs levels, replicates and methods".into()));
    }
    let cells: Vec<(usize, usize)> = (0..grid.len()).flat_map(|l| (0..b).map(move |r| (l, r))).collect();
    let est: Vec<Vec<Option<f64>>> = cells
        .par_iter()
        .map(|&(l, r)| {
            let data = match inject_excess_contamination(&sim.dataset, &sim.perturbed, beta_g, grid[l], scenario.seed, r as u64) {
                Ok(d) => d,
                Err(_) => return vec![None; methods.len()],
            };
            let rep = SimData { dataset: data, ..sim.clone() };
            methods
                .iter()
                .map(|m| run_method(m, scenario, &rep, opts).ok().filter(|e| e.converged).map(|e| e.estimate))
                .collect()
        })
        .collect();
    let mut rows = Vec::new();
    for (j, m) in methods.iter().enumerate() {
        let mut base = f64::NAN;
        for (l, &eps) in grid.iter().enumerate() {
            let v: Vec<f64> = (0..b).filter_map(|r| est[l * b + r][j]).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            if l == 0 {
                base = mean;
            }
            rows.push(RecRow {
                method: m.id(),
                epsilon: eps,
                mean_estimate: mean,
                rec: (mean - base) / base.abs(),
                n_ok: v.len(),
            });
        }
    }
    Ok(rows)
}

/// Confusion-matrix summary of binary assignments.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Classification {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub sensitivity: f64,
    pub specificity: f64,
    pub balanced_accuracy: f64,
}

pub fn classification_metrics(assigned: &[bool], truth: &[bool]) -> Result<Classification> {
    if assigned.len() != truth.len() {
        return Err(Error::Dimension("assignment and truth lengths differ".into()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&a, &t) in assigned.iter().zip(truth) {
        match (a, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    if tp + fn_ == 0 || tn + fp == 0 {
        return Err(Error::Domain("truth contains a single class".into()));
    }
    let sensitivity = tp as f64 / (tp + fn_) as f64;
    let specificity = tn as f64 / (tn + fp) as f64;
    Ok(Classification {
        tp,
        fp,
        tn,
        fn_,
        sensitivity,
        specificity,
        balanced_accuracy: 0.5 * (sensitivity + specificity),
    })
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_per_key() {
        let s = Scenario::main_text(500, 2.0, Family::Poisson, Family::Poisson);
        let a = generate(&s, 7, 3).unwrap();
        let b = generate(&s, 7, 3).unwrap();
        let c = generate(&s, 7, 4).unwrap();
        assert_eq!(a.dataset.responses[0].y, b.dataset.responses[0].y);
        assert_ne!(a.dataset.responses[0].y, c.dataset.responses[0].y);
    }

    #[test]
    fn zero_inflated_background_is_zero() {
        let mut s = Scenario::main_text(2000, 3.0, Family::Poisson, Family::Poisson);
        s.zero_inflated = true;
        let d = generate(&s, 1, 0).unwrap();
        for (g, p) in d.dataset.responses[1].y.iter().zip(&d.perturbed) {
            if !p {
                assert_eq!(*g, 0.0);
            }
        }
    }

    #[test]
    fn doublets_double_counts() {
        let mut s = Scenario::main_text(1000, 3.0, Family::Poisson, Family::Poisson);
        let base = generate(&s, 5, 0).unwrap();
        s.doublet_fraction = 0.1;
        let dbl = generate(&s, 5, 0).unwrap();
        let g0 = &base.dataset.responses[1].y;
        let g1 = &dbl.dataset.responses[1].y;
        let changed = g0.iter().zip(g1).filter(|(a, b)| a != b).count();
        assert!(changed <= 100 && changed > 80);
        assert!(g0.iter().zip(g1).all(|(a, b)| *b == *a || *b == 2.0 * *a));
    }

    #[test]
    fn confusion_metrics() {
        let n = 1000;
        let truth: Vec<bool> = (0..n).map(|i| i < 137).collect();
        let assigned: Vec<bool> = (0..n).map(|i| i < 141).collect();
        let c = classification_metrics(&assigned, &truth).unwrap();
        assert_eq!(c.sensitivity, 1.0);
        assert!((c.specificity - (1.0 - 4.0 / (n - 137) as f64)).abs() < 1e-15);
        let flipped: Vec<bool> = truth.iter().map(|t| !t).collect();
        let c = classification_metrics(&flipped, &truth).unwrap();
        assert_eq!((c.sensitivity, c.specificity), (0.0, 0.0));
        assert!(classification_metrics(&truth, &vec![true; n]).is_err());
    }

    #[test]
    fn spearman_handles_ties() {
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        let r = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]);
        assert!(r > 0.9 && r < 1.0);
    }

    #[test]
    fn method_ids_round_trip() {
        for m in [
            Method::Accelerated,
            Method::Vanilla,
            Method::Thresholding(Cutoff::Bayes),
            Method::Thresholding(Cutoff::Fixed(3.0)),
            Method::Mixture,
            Method::ZeroInflated,
        ] {
            assert_eq!(m.id().parse::<Method>().unwrap(), m);
        }
        assert!("nonsense".parse::<Method>().is_err());
    }

    #[test]
    fn zero_pi_has_no_perturbed_cells() {
        let mut s = Scenario::main_text(500, 2.0, Family::Poisson, Family::Poisson);
        s.pi = 0.0;
        assert!(generate(&s, 1, 0).unwrap().perturbed.iter().all(|p| !p));
    }

    #[test]
    fn overflowing_means_are_rejected() {
        let mut s = Scenario::main_text(10, 2.0, Family::Poisson, Family::Poisson);
        s.beta_m[0] = 800.0;
        assert!(matches!(generate(&s, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn hidden_covariate_is_withheld() {
        let mut s = Scenario::main_text(100, 2.0, Family::Poisson, Family::Poisson);
        s.hidden_effect = Some((Target::Gene, 1.0));
        let d = generate(&s, 1, 0).unwrap();
        assert_eq!(d.dataset.design.ncols(), 2);
        assert_eq!(d.hidden.unwrap().len(), 100);
    }

    #[test]
    fn fold_change_in_grna_means() {
        let s = Scenario::main_text(100_000, 3.0, Family::Poisson, Family::Poisson);
        let d = generate(&s, 2, 0).unwrap();
        let g = &d.dataset.responses[1].y;
        let mean = |want: bool| {
            let v: Vec<f64> = g.iter().zip(&d.perturbed).filter(|(_, &p)| p == want).map(|(x, _)| *x).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let ratio = mean(true) / mean(false);
        assert!((ratio / 3.0 - 1.0).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn contamination_is_validated_and_reproducible() {
        let s = Scenario::main_text(2000, 4.0, Family::Poisson, Family::Poisson);
        let d = generate(&s, 3, 0).unwrap();
        assert!(inject_excess_contamination(&d.dataset, &d.perturbed, &s.beta_g, 1.5, 1, 0).is_err());
        let same = inject_excess_contamination(&d.dataset, &d.perturbed, &s.beta_g, 0.3, 1, 0).unwrap();
        let again = inject_excess_contamination(&d.dataset, &d.perturbed, &s.beta_g, 0.3, 1, 0).unwrap();
        assert_eq!(same.responses[1].y, again.responses[1].y);
        assert_eq!(same.responses[0].y, d.dataset.responses[0].y);
    }

    #[test]
    fn metrics_aggregate_skips_failures() {
        let w = Wald::new(1.0, 0.1, 0.95).unwrap();
        let e = MethodEstimate { estimate: 1.0, wald: w, converged: true, n_glm_fits: 3, seconds: 0.5 };
        let rs = vec![Ok(e.clone()), Err(Error::Numerical("x".into())), Ok(MethodEstimate { estimate: 1.2, ..e })];
        let row = MetricsRow::aggregate("m", "s", 1.1, &rs, 0.05);
        assert_eq!((row.n_sim, row.n_converged), (3, 2));
        assert!((row.bias - 0.0).abs() < 1e-12);
        assert!(row.mse >= row.bias * row.bias);
        assert_eq!(row.rejection_probability, 1.0);
    }
}
