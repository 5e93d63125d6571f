//! Batch analysis of many gene/gRNA pairs: nuisance fits computed once per
//! feature and stored on disk, then reused by every pair that needs them.

use crate::assignment::{covariate_bayes_threshold, threshold_assign, thresholded_regression};
use crate::design::DesignMatrix;
use crate::em::{fit_accelerated_with_pilot, fit_vanilla, Dataset, EmOptions, Flag, Pilot};
use crate::error::{Error, Result};
use crate::family::Family;
use crate::glm::{estimate_nb_size, fit_weighted_glm, IrlsOptions};
use crate::io::{parse_key_values, CountMatrix, Covariates, PairSpec};
use crate::louis::{louis_information, Wald};
use crate::simulate::{Covariate, EvalOptions, Method, Scenario, Target};
use crate::zero_inflated::{fit_zi, zi_information};
use nalgebra::DVector;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Vanilla,
    Accelerated,
    ZeroInflated,
}

impl Mode {
    pub fn method_id(&self) -> &'static str {
        match self {
            Mode::Vanilla => "glmeiv_vanilla",
            Mode::Accelerated => "glmeiv_accelerated",
            Mode::ZeroInflated => "glmeiv_zero_inflated",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThresholdSpec {
    Fixed(f64),
    /// Cell-specific Bayes boundary from the pair's fitted gRNA model.
    Bayes,
    /// One threshold for all pairs: the median of per-pair Bayes thresholds.
    DatasetWide,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub family_m: String,
    pub family_g: String,
    pub nb_size: Option<f64>,
    pub nb_size_known: bool,
    pub mode: Mode,
    pub threshold: ThresholdSpec,
    pub restarts: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub level: f64,
    /// Drop cells whose covariate exceeds the bound.
    pub qc_max: Vec<(String, f64)>,
    /// Skip genes whose mean count falls below this floor.
    pub min_gene_mean: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            family_m: "poisson".into(),
            family_g: "poisson".into(),
            nb_size: None,
            nb_size_known: false,
            mode: Mode::Accelerated,
            threshold: ThresholdSpec::Bayes,
            restarts: 15,
            tol: 1e-7,
            max_iter: 100,
            level: 0.95,
            qc_max: Vec::new(),
            min_gene_mean: 0.0,
        }
    }
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value '{v}' for '{key}'")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean '{v}' for '{key}'"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str, file: &str) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        let mut known = None;
        for (k, v) in parse_key_values(text, file)? {
            match k.as_str() {
                "family_m" => c.family_m = v,
                "family_g" => c.family_g = v,
                "nb_size" => c.nb_size = Some(value(&k, &v)?),
                "nb_size_known" => known = Some(boolean(&k, &v)?),
                "mode" => {
                    c.mode = match v.as_str() {
                        "vanilla" => Mode::Vanilla,
                        "accelerated" => Mode::Accelerated,
                        "zero_inflated" => Mode::ZeroInflated,
                        _ => return Err(Error::Config(format!("unknown mode '{v}'"))),
                    }
                }
                "threshold" => {
                    c.threshold = match v.as_str() {
                        "bayes" => ThresholdSpec::Bayes,
                        "dataset-wide" | "dataset_wide" => ThresholdSpec::DatasetWide,
                        _ => ThresholdSpec::Fixed(value(&k, &v)?),
                    }
                }
                "restarts" => c.restarts = value(&k, &v)?,
                "tol" => c.tol = value(&k, &v)?,
                "max_iter" => c.max_iter = value(&k, &v)?,
                "level" => c.level = value(&k, &v)?,
                "min_gene_mean" => c.min_gene_mean = value(&k, &v)?,
                _ => match k.strip_prefix("qc_max.") {
                    Some(col) => c.qc_max.push((col.to_string(), value(&k, &v)?)),
                    None => return Err(Error::Config(format!("unknown config key '{k}'"))),
                },
            }
        }
        c.nb_size_known = known.unwrap_or(c.nb_size.is_some());
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        Family::from_name(&self.family_m, self.nb_size)?;
        Family::from_name(&self.family_g, self.nb_size)?;
        if self.nb_size_known && self.nb_size.is_none() {
            return Err(Error::Config("nb_size_known is set but nb_size is missing".into()));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 || self.restarts == 0 {
            return Err(Error::Config("tol, max_iter and restarts must be positive".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config("level must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn em_options(&self, seed: u64) -> EmOptions {
        EmOptions { tol: self.tol, max_iter: self.max_iter, restarts: self.restarts, seed, ..EmOptions::default() }
    }

    fn is_nb(name: &str) -> bool {
        matches!(Family::from_name(name, Some(1.0)), Ok(Family::NegativeBinomial { .. }))
    }
}

/// Row-aligned inputs after QC.
#[derive(Clone, Debug)]
pub struct Inputs {
    pub genes: CountMatrix,
    pub grnas: CountMatrix,
    pub design: DesignMatrix,
    pub offsets_m: Vec<f64>,
    pub offsets_g: Vec<f64>,
}

fn log_library(m: &CountMatrix) -> Vec<f64> {
    m.library_sizes().iter().map(|s| s.max(1.0).ln()).collect()
}

impl Inputs {
    /// Check alignment, apply the covariate filters and work out offsets
    /// (given columns, or log library sizes).
    pub fn new(genes: CountMatrix, grnas: CountMatrix, cov: Covariates, cfg: &RunConfig) -> Result<Inputs> {
        if genes.n_cells != grnas.n_cells || genes.n_cells != cov.n_cells {
            return Err(Error::Dimension(format!(
                "inputs are not aligned on cells: {} genes rows, {} gRNA rows, {} covariate rows",
                genes.n_cells, grnas.n_cells, cov.n_cells
            )));
        }
        let mut keep: Vec<usize> = (0..cov.n_cells).collect();
        for (col, max) in &cfg.qc_max {
            let v = cov.column(col).ok_or_else(|| Error::Config(format!("QC column '{col}' not in covariates")))?;
            keep.retain(|&i| v[i] <= *max);
        }
        let full = keep.len() == cov.n_cells;
        let off_m = cov.offset_m.clone().unwrap_or_else(|| log_library(&genes));
        let off_g = cov.offset_g.clone().unwrap_or_else(|| log_library(&grnas));
        let pick = |v: &Vec<f64>| keep.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        let (genes, grnas, cov) =
            if full { (genes, grnas, cov) } else { (genes.select_cells(&keep), grnas.select_cells(&keep), cov.select_cells(&keep)) };
        Ok(Inputs { design: cov.design()?, genes, grnas, offsets_m: pick(&off_m), offsets_g: pick(&off_g) })
    }

    pub fn n_cells(&self) -> usize {
        self.design.nrows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Modality {
    Gene,
    Grna,
}

impl Modality {
    fn as_str(&self) -> &'static str {
        match self {
            Modality::Gene => "gene",
            Modality::Grna => "grna",
        }
    }
}

/// Covariate-only fit of one feature.
#[derive(Clone, Debug, PartialEq)]
pub struct StoreEntry {
    pub feature: String,
    pub modality: Modality,
    pub family: Family,
    pub effectively_poisson: bool,
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub log_likelihood: f64,
    /// Fitted linear predictor, offsets included.
    pub fitted: Vec<f64>,
}

impl StoreEntry {
    fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["field", "index", "name", "value"])?;
        let size = self.family.size().map_or(String::new(), |s| s.to_string());
        w.write_record(["feature", "0", "", self.feature.as_str()])?;
        w.write_record(["modality", "0", "", self.modality.as_str()])?;
        w.write_record(["family", "0", self.family.name(), size.as_str()])?;
        w.write_record(["effectively_poisson", "0", "", if self.effectively_poisson { "true" } else { "false" }])?;
        w.write_record(["log_likelihood", "0", "", &self.log_likelihood.to_string()])?;
        for (j, (n, c)) in self.names.iter().zip(&self.coefficients).enumerate() {
            w.write_record(["coefficient", &j.to_string(), n, &c.to_string()])?;
        }
        for (i, f) in self.fitted.iter().enumerate() {
            w.write_record(["fitted", &i.to_string(), "", &f.to_string()])?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    fn from_csv(path: &Path) -> Result<StoreEntry> {
        let bad = |m: &str| Error::Parse { file: path.display().to_string(), msg: m.to_string() };
        let mut rdr = csv::Reader::from_path(path)?;
        let mut e = StoreEntry {
            feature: String::new(),
            modality: Modality::Gene,
            family: Family::Poisson,
            effectively_poisson: false,
            names: Vec::new(),
            coefficients: Vec::new(),
            log_likelihood: f64::NAN,
            fitted: Vec::new(),
        };
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 4 {
                return Err(bad("rows need four fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad("non-numeric value"));
            match &rec[0] {
                "feature" => e.feature = rec[3].to_string(),
                "modality" => e.modality = if &rec[3] == "grna" { Modality::Grna } else { Modality::Gene },
                "family" => e.family = Family::from_name(&rec[2], if rec[3].is_empty() { None } else { Some(num(&rec[3])?) })?,
                "effectively_poisson" => e.effectively_poisson = &rec[3] == "true",
                "log_likelihood" => e.log_likelihood = num(&rec[3])?,
                "coefficient" => {
                    e.names.push(rec[2].to_string());
                    e.coefficients.push(num(&rec[3])?);
                }
                "fitted" => e.fitted.push(num(&rec[3])?),
                _ => return Err(bad("unknown field")),
            }
        }
        Ok(e)
    }
}

/// On-disk store of nuisance fits under a directory named by a hash of
/// everything the fits depend on apart from the feature counts.
#[derive(Clone, Debug)]
pub struct Store {
    pub dir: PathBuf,
}

fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect()
}

fn hash_floats(h: &mut Sha256, v: &[f64]) {
    h.update((v.len() as u64).to_le_bytes());
    for x in v {
        h.update(x.to_bits().to_le_bytes());
    }
}

impl Store {
    pub fn open(root: &Path, inputs: &Inputs, cfg: &RunConfig) -> Result<Store> {
        let mut h = Sha256::new();
        let x = inputs.design.matrix();
        hash_floats(&mut h, x.as_slice());
        for n in inputs.design.names() {
            h.update(n.as_bytes());
            h.update([0]);
        }
        hash_floats(&mut h, &inputs.offsets_m);
        hash_floats(&mut h, &inputs.offsets_g);
        let fam = format!("{}|{}|{:?}|{}", cfg.family_m, cfg.family_g, cfg.nb_size, cfg.nb_size_known);
        h.update(fam.as_bytes());
        let dir = root.join(&hex::encode(h.finalize())[..16]);
        fs::create_dir_all(&dir)?;
        Ok(Store { dir })
    }

    pub fn path(&self, modality: Modality, id: &str, counts: &[f64]) -> PathBuf {
        let mut h = Sha256::new();
        h.update(id.as_bytes());
        hash_floats(&mut h, counts);
        let tag = &hex::encode(h.finalize())[..12];
        self.dir.join(format!("{}_{}_{}.csv", modality.as_str(), sanitize(id), tag))
    }

    pub fn write(&self, entry: &StoreEntry, counts: &[f64]) -> Result<()> {
        let path = self.path(entry.modality, &entry.feature, counts);
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, entry.to_csv()?)?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    pub fn read(&self, modality: Modality, id: &str, counts: &[f64]) -> Result<StoreEntry> {
        let path = self.path(modality, id, counts);
        if !path.exists() {
            return Err(Error::Config(format!("no precomputed entry for {} '{id}'", modality.as_str())));
        }
        StoreEntry::from_csv(&path)
    }

    pub fn contains(&self, modality: Modality, id: &str, counts: &[f64]) -> bool {
        self.path(modality, id, counts).exists()
    }
}

/// Covariate-only regression of one feature; NB sizes are estimated here
/// unless the configuration fixes them.
pub fn nuisance_fit(
    y: &[f64],
    modality: Modality,
    feature: &str,
    inputs: &Inputs,
    cfg: &RunConfig,
) -> Result<StoreEntry> {
    let (name, offsets) = match modality {
        Modality::Gene => (&cfg.family_m, &inputs.offsets_m),
        Modality::Grna => (&cfg.family_g, &inputs.offsets_g),
    };
    let x = &inputs.design;
    let (family, fit, effectively_poisson) = if RunConfig::is_nb(name) && !cfg.nb_size_known {
        let nb = estimate_nb_size(y, x, offsets)?;
        if nb.effectively_poisson {
            let ones = vec![1.0; y.len()];
            let f = fit_weighted_glm(y, x, &Family::Poisson, &ones, offsets, &IrlsOptions::default())?;
            (Family::Poisson, f, true)
        } else {
            (Family::negative_binomial(nb.size)?, nb.fit, false)
        }
    } else {
        let family = Family::from_name(name, cfg.nb_size)?;
        let ones = vec![1.0; y.len()];
        (family, fit_weighted_glm(y, x, &family, &ones, offsets, &IrlsOptions::default())?, false)
    };
    Ok(StoreEntry {
        feature: feature.to_string(),
        modality,
        family,
        effectively_poisson,
        names: fit.names.clone(),
        fitted: x.linear_predictor(&fit.coefficients, offsets),
        coefficients: fit.coefficients.iter().copied().collect(),
        log_likelihood: fit.log_likelihood,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrecomputeReport {
    /// Nuisance regressions executed.
    pub fitted: usize,
    /// Entries already present and reused.
    pub skipped: usize,
    pub failed: Vec<(String, String)>,
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

fn referenced(pairs: &[PairSpec]) -> Vec<(Modality, String)> {
    let mut set = BTreeSet::new();
    for p in pairs {
        set.insert((Modality::Gene, p.gene_id.clone()));
        set.insert((Modality::Grna, p.grna_id.clone()));
    }
    set.into_iter().collect()
}

fn counts<'a>(inputs: &'a Inputs, modality: Modality, id: &str) -> Option<&'a [f64]> {
    match modality {
        Modality::Gene => inputs.genes.get(id),
        Modality::Grna => inputs.grnas.get(id),
    }
}

/// Fit every gene and gRNA referenced by the pairs, once. Fits run in
/// parallel; entries are written afterwards from this thread only.
pub fn precompute_all(
    inputs: &Inputs,
    pairs: &[PairSpec],
    store: &Store,
    cfg: &RunConfig,
    workers: usize,
    force: bool,
) -> Result<PrecomputeReport> {
    let mut report = PrecomputeReport::default();
    let mut todo = Vec::new();
    for (m, id) in referenced(pairs) {
        match counts(inputs, m, &id) {
            None => report.failed.push((id.clone(), format!("{} '{id}' not in the count matrix", m.as_str()))),
            Some(y) if !force && store.contains(m, &id, y) => report.skipped += 1,
            Some(y) => todo.push((m, id, y)),
        }
    }
    let fits: Vec<Result<StoreEntry>> =
        pool(workers)?.install(|| todo.par_iter().map(|(m, id, y)| nuisance_fit(y, *m, id, inputs, cfg)).collect());
    report.fitted = fits.len();
    for ((_, id, y), r) in todo.iter().zip(fits) {
        match r {
            Ok(e) => store.write(&e, y)?,
            Err(e) => report.failed.push((id.clone(), e.to_string())),
        }
    }
    Ok(report)
}

/// Seed for one pair, independent of its position in the list.
pub fn pair_seed(seed: u64, gene: &str, grna: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(gene.as_bytes());
    h.update([0]);
    h.update(grna.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairResult {
    pub gene_id: String,
    pub grna_id: String,
    pub method: String,
    pub wald: Option<Wald>,
    pub converged: bool,
    pub flags: Vec<String>,
    pub n_glm_fits: usize,
    pub ms_elapsed: f64,
    pub error: Option<String>,
}

impl PairResult {
    pub const HEADER: [&'static str; 13] = [
        "gene_id",
        "grna_id",
        "method",
        "estimate",
        "fold_change",
        "se",
        "ci_lo",
        "ci_hi",
        "p_value",
        "converged",
        "flags",
        "n_glm_fits",
        "ms_elapsed",
    ];

    fn failed(pair: &PairSpec, method: &str, err: &Error, start: Instant) -> PairResult {
        PairResult {
            gene_id: pair.gene_id.clone(),
            grna_id: pair.grna_id.clone(),
            method: method.to_string(),
            wald: None,
            converged: false,
            flags: vec!["error".into()],
            n_glm_fits: 0,
            ms_elapsed: start.elapsed().as_secs_f64() * 1e3,
            error: Some(err.to_string()),
        }
    }

    pub fn is_error(&self) -> bool {
        self.error.is_some()
    }

    pub fn record(&self) -> Vec<String> {
        let f = |g: fn(&Wald) -> f64| self.wald.as_ref().map_or(String::new(), |w| g(w).to_string());
        let mut flags = self.flags.join(";");
        if let Some(e) = &self.error {
            flags = format!("{flags}:{}", e.replace([',', '\n'], " "));
        }
        vec![
            self.gene_id.clone(),
            self.grna_id.clone(),
            self.method.clone(),
            f(|w| w.estimate),
            f(|w| w.estimate.exp()),
            f(|w| w.se),
            f(|w| w.ci_lo),
            f(|w| w.ci_hi),
            f(|w| w.p_value),
            self.converged.to_string(),
            flags,
            self.n_glm_fits.to_string(),
            format!("{:.3}", self.ms_elapsed),
        ]
    }
}

pub fn write_results(path: &Path, rows: &[PairResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(PairResult::HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

/// Pair data and pilot assembled from the store.
pub fn load_pair(inputs: &Inputs, store: &Store, pair: &PairSpec) -> Result<(Dataset, Pilot, Vec<String>)> {
    let missing = |m: &str, id: &str| Error::Config(format!("{m} '{id}' not in the count matrix"));
    let m = inputs.genes.get(&pair.gene_id).ok_or_else(|| missing("gene", &pair.gene_id))?;
    let g = inputs.grnas.get(&pair.grna_id).ok_or_else(|| missing("gRNA", &pair.grna_id))?;
    let em = store.read(Modality::Gene, &pair.gene_id, m)?;
    let eg = store.read(Modality::Grna, &pair.grna_id, g)?;
    let mut flags = Vec::new();
    if em.effectively_poisson || eg.effectively_poisson {
        flags.push(Flag::EffectivelyPoisson.to_string());
    }
    let data = Dataset::pair(
        m.to_vec(),
        g.to_vec(),
        inputs.design.clone(),
        inputs.offsets_m.clone(),
        inputs.offsets_g.clone(),
        em.family,
        eg.family,
    )?;
    let pilot = Pilot {
        nuisance: vec![DVector::from_vec(em.coefficients), DVector::from_vec(eg.coefficients)],
        fitted: vec![em.fitted, eg.fitted],
        log_likelihood: em.log_likelihood + eg.log_likelihood,
    };
    Ok((data, pilot, flags))
}

/// Fitted gRNA model of a pair, kept for the thresholding comparison.
#[derive(Clone, Debug)]
struct GrnaModel {
    beta_g: Vec<f64>,
    pi: f64,
}

fn glmeiv_pair(
    inputs: &Inputs,
    store: &Store,
    pair: &PairSpec,
    cfg: &RunConfig,
    seed: u64,
) -> (PairResult, Option<(Dataset, Option<GrnaModel>)>) {
    let start = Instant::now();
    let method = cfg.mode.method_id();
    let run = || -> Result<(PairResult, Dataset, Option<GrnaModel>)> {
        let (data, pilot, mut flags) = load_pair(inputs, store, pair)?;
        let mean_m = data.responses[0].y.iter().sum::<f64>() / data.n() as f64;
        if mean_m < cfg.min_gene_mean {
            return Err(Error::Config(format!("gene mean {mean_m} below min_gene_mean")));
        }
        let opts = cfg.em_options(pair_seed(seed, &pair.gene_id, &pair.grna_id));
        let (wald, converged, fits, model, em_flags) = match cfg.mode {
            Mode::Accelerated | Mode::Vanilla => {
                let fit = if cfg.mode == Mode::Accelerated {
                    fit_accelerated_with_pilot(&data, &pilot, &opts)?
                } else {
                    fit_vanilla(&data, &opts)?
                };
                let w = louis_information(&fit.params, &data)?.wald(&fit.params, 0, 1, cfg.level)?;
                let model = GrnaModel { beta_g: fit.params.betas[1].iter().copied().collect(), pi: fit.params.pi };
                (w, fit.converged, fit.n_glm_fits, Some(model), fit.flags)
            }
            Mode::ZeroInflated => {
                let fit = fit_zi(&data, &opts)?;
                let cov = zi_information(&fit.params, &data)?.covariance()?;
                let w = Wald::new(fit.params.beta_m[1], cov[(2, 2)].sqrt(), cfg.level)?;
                (w, fit.converged, fit.n_glm_fits, None, fit.flags)
            }
        };
        flags.extend(em_flags.iter().map(|f| f.to_string()));
        let row = PairResult {
            gene_id: pair.gene_id.clone(),
            grna_id: pair.grna_id.clone(),
            method: method.to_string(),
            wald: Some(wald),
            converged,
            flags,
            n_glm_fits: fits,
            ms_elapsed: start.elapsed().as_secs_f64() * 1e3,
            error: None,
        };
        Ok((row, data, model))
    };
    match run() {
        Ok((row, data, model)) => (row, Some((data, model))),
        Err(e) => (PairResult::failed(pair, method, &e, start), None),
    }
}

fn bayes_cut(data: &Dataset, model: &GrnaModel) -> Result<f64> {
    let g = &data.responses[1];
    Ok(covariate_bayes_threshold(&g.family, &model.beta_g, model.pi, &data.design, &g.offsets)?.threshold)
}

/// Bayes threshold from the element-wise median gRNA coefficients and the
/// median mixing proportion of up to `DATASET_WIDE_PAIRS` fitted pairs.
fn dataset_wide_threshold(inputs: &Inputs, fitted: &[(&Dataset, &GrnaModel)]) -> Result<f64> {
    let fitted = &fitted[..fitted.len().min(DATASET_WIDE_PAIRS)];
    let Some(&(first, _)) = fitted.first() else {
        return Err(Error::Numerical("no pair yielded a gRNA fit".into()));
    };
    let d = fitted[0].1.beta_g.len();
    let beta_g: Vec<f64> =
        (0..d).map(|j| median(&mut fitted.iter().map(|(_, m)| m.beta_g[j]).collect::<Vec<_>>())).collect();
    let pi = median(&mut fitted.iter().map(|(_, m)| m.pi).collect::<Vec<_>>());
    let mut family = first.responses[1].family;
    if let Family::NegativeBinomial { .. } = family {
        let mut sizes: Vec<f64> = fitted
            .iter()
            .filter_map(|(data, _)| match data.responses[1].family {
                Family::NegativeBinomial { size } => Some(size),
                _ => None,
            })
            .collect();
        family = Family::NegativeBinomial { size: median(&mut sizes) };
    }
    Ok(covariate_bayes_threshold(&family, &beta_g, pi, &inputs.design, &inputs.offsets_g)?.threshold)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

pub const DATASET_WIDE_PAIRS: usize = 200;

fn threshold_pair(
    pair: &PairSpec,
    prepared: &Option<(Dataset, Option<GrnaModel>)>,
    spec: ThresholdSpec,
    dataset_wide: Option<f64>,
    cfg: &RunConfig,
) -> PairResult {
    let start = Instant::now();
    let method = "thresholding";
    let run = || -> Result<PairResult> {
        let Some((data, model)) = prepared else {
            return Err(Error::Config("pair data unavailable".into()));
        };
        let thresholds = match (spec, model) {
            (ThresholdSpec::Fixed(c), _) => vec![c],
            (ThresholdSpec::DatasetWide, _) => {
                vec![dataset_wide.ok_or_else(|| Error::Numerical("no converged pair yielded a Bayes threshold".into()))?]
            }
            (ThresholdSpec::Bayes, Some(m)) => vec![bayes_cut(data, m)?],
            // unperturbed cells have no reads under the zero-inflated model
            (ThresholdSpec::Bayes, None) => vec![1.0],
        };
        let p_hat = threshold_assign(&data.responses[1].y, &thresholds);
        let tf = thresholded_regression(data, &p_hat, cfg.level)?;
        Ok(PairResult {
            gene_id: pair.gene_id.clone(),
            grna_id: pair.grna_id.clone(),
            method: method.to_string(),
            wald: Some(tf.wald),
            converged: tf.fit.converged,
            flags: Vec::new(),
            n_glm_fits: 1,
            ms_elapsed: start.elapsed().as_secs_f64() * 1e3,
            error: None,
        })
    };
    run().unwrap_or_else(|e| PairResult::failed(pair, method, &e, start))
}

/// GLM-EIV and thresholding rows for every pair, in pair order. A failing
/// pair yields error rows and never stops the batch.
pub fn analyze_pairs(
    inputs: &Inputs,
    pairs: &[PairSpec],
    store: &Store,
    cfg: &RunConfig,
    workers: usize,
    seed: u64,
) -> Result<Vec<PairResult>> {
    let pool = pool(workers)?;
    let first: Vec<(PairResult, Option<(Dataset, Option<GrnaModel>)>)> =
        pool.install(|| pairs.par_iter().map(|p| glmeiv_pair(inputs, store, p, cfg, seed)).collect());
    let dataset_wide = match (cfg.threshold, cfg.mode) {
        // unperturbed cells have no reads under the zero-inflated model
        (ThresholdSpec::DatasetWide, Mode::ZeroInflated) => Some(1.0),
        (ThresholdSpec::DatasetWide, _) => {
            let fitted: Vec<(&Dataset, &GrnaModel)> = first
                .iter()
                .filter_map(|(r, prep)| match prep {
                    Some((d, Some(m))) if r.converged => Some((d, m)),
                    _ => None,
                })
                .collect();
            dataset_wide_threshold(inputs, &fitted).ok()
        }
        _ => None,
    };
    let second: Vec<PairResult> = pool.install(|| {
        pairs
            .par_iter()
            .zip(first.par_iter())
            .map(|(p, (_, prep))| threshold_pair(p, prep, cfg.threshold, dataset_wide, cfg))
            .collect()
    });
    let mut rows = Vec::with_capacity(2 * pairs.len());
    for ((r, _), t) in first.into_iter().zip(second) {
        rows.push(r);
        rows.push(t);
    }
    Ok(rows)
}

/// Parsed simulation study: scenarios (one per grid point), methods and
/// fitting options.
#[derive(Clone, Debug)]
pub struct Study {
    pub scenarios: Vec<(String, Scenario)>,
    pub methods: Vec<Method>,
    pub eval: EvalOptions,
}

fn list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|t| value(key, t.trim())).collect()
}

fn covariates(v: &str) -> Result<Vec<Covariate>> {
    if v.trim().is_empty() || v.trim() == "none" {
        return Ok(Vec::new());
    }
    v.split(';')
        .map(|c| {
            let parts: Vec<&str> = c.trim().split(':').collect();
            let num = |i: usize| -> Result<f64> {
                parts.get(i).ok_or_else(|| Error::Config(format!("covariate '{c}' lacks parameters")))?.parse().map_err(|_| Error::Config(format!("bad covariate '{c}'")))
            };
            match parts[0] {
                "bernoulli" => Ok(Covariate::Bernoulli(num(1)?)),
                "uniform" => Ok(Covariate::Uniform(num(1)?, num(2)?)),
                "normal" => Ok(Covariate::Normal(num(1)?, num(2)?)),
                other => Err(Error::Config(format!("unknown covariate kind '{other}'"))),
            }
        })
        .collect()
}

fn target(v: &str) -> Result<Target> {
    match v {
        "gene" => Ok(Target::Gene),
        "grna" => Ok(Target::Grna),
        _ => Err(Error::Config(format!("unknown target '{v}'"))),
    }
}

impl Study {
    /// Parse a scenario file. `preset` (main_text or gaussian) supplies the
    /// starting values; `grna_fold` may list several values, each giving one
    /// scenario.
    pub fn parse(text: &str, file: &str) -> Result<Study> {
        let kv = parse_key_values(text, file)?;
        let get = |k: &str| kv.iter().find(|(e, _)| e == k).map(|(_, v)| v.as_str());
        let n: usize = get("n").map_or(Ok(25_000), |v| value("n", v))?;
        let size = get("nb_size").map(|v| value("nb_size", v)).transpose()?;
        let fm = Family::from_name(get("family_m").unwrap_or("poisson"), size)?;
        let fg = Family::from_name(get("family_g").unwrap_or("poisson"), size)?;
        let mut s = match get("preset").unwrap_or("main_text") {
            "main_text" => Scenario::main_text(n, 2.0, fm, fg),
            "gaussian" => Scenario::gaussian(n, 2.0),
            other => return Err(Error::Config(format!("unknown preset '{other}'"))),
        };
        let mut folds = None;
        let mut eval = EvalOptions::default();
        let mut methods = vec![Method::Accelerated, Method::Thresholding(crate::simulate::Cutoff::Bayes)];
        for (k, v) in &kv {
            match k.as_str() {
                "n" | "preset" | "nb_size" | "family_m" | "family_g" => {}
                "pi" => s.pi = value(k, v)?,
                "beta_m" => s.beta_m = list(k, v)?,
                "beta_g" => s.beta_g = list(k, v)?,
                "covariates" => s.covariates = covariates(v)?,
                "depth_mean_m" => s.depth_mean_m = value(k, v)?,
                "depth_mean_g" => s.depth_mean_g = value(k, v)?,
                "depth_as_offset" => s.depth_as_offset = boolean(k, v)?,
                "zero_inflated" => s.zero_inflated = boolean(k, v)?,
                "doublet_fraction" => s.doublet_fraction = value(k, v)?,
                "doublet_target" => s.doublet_target = target(v)?,
                "hidden_effect" => {
                    let (t, e) = v.split_once(':').ok_or_else(|| Error::Config("hidden_effect is target:effect".into()))?;
                    s.hidden_effect = Some((target(t.trim())?, value(k, e.trim())?));
                }
                "n_sim" => s.n_sim = value(k, v)?,
                "seed" => s.seed = value(k, v)?,
                "grna_fold" => folds = Some(list(k, v)?),
                "methods" => methods = v.split(',').map(|m| m.trim().parse()).collect::<Result<_>>()?,
                "estimate_size" => eval.estimate_size = boolean(k, v)?,
                "restarts" => eval.em.restarts = value(k, v)?,
                "tol" => eval.em.tol = value(k, v)?,
                "max_iter" => eval.em.max_iter = value(k, v)?,
                "level" => eval.level = value(k, v)?,
                _ => return Err(Error::Config(format!("unknown scenario key '{k}'"))),
            }
        }
        let scenarios = match folds {
            None => vec![(format!("grna_effect={}", s.beta_g.get(1).copied().unwrap_or(f64::NAN)), s)],
            Some(fs) => fs
                .iter()
                .map(|&f| {
                    let mut c = s.clone();
                    if c.beta_g.len() > 1 {
                        c.beta_g[1] = if c.family_g.is_count() { f.ln() } else { f };
                    }
                    (format!("grna_fold={f}"), c)
                })
                .collect(),
        };
        for (_, sc) in &scenarios {
            sc.validate()?;
        }
        Ok(Study { scenarios, methods, eval })
    }
}

/// Small synthetic screen: `n_genes` genes and `n_grnas` gRNAs on `n` cells,
/// one batch covariate and depth offsets. Pair `(gene_j, grna_j)` for
/// `j < n_grnas` carries a 4-fold decrease; the remaining pairs are nulls.
pub fn synthetic_screen(n: usize, n_genes: usize, n_grnas: usize, seed: u64) -> Result<(CountMatrix, CountMatrix, Covariates, Vec<PairSpec>)> {
    use crate::simulate::{cell_rng, draw};
    use rand::Rng;
    let base = Scenario::main_text(n, 20.0, Family::Poisson, Family::Poisson);
    let mut batch = vec![0.0; n];
    let mut off_m = vec![0.0; n];
    let mut off_g = vec![0.0; n];
    let mut perturbed = vec![vec![false; n]; n_grnas];
    for i in 0..n {
        let mut rng = cell_rng(seed, u64::MAX, i as u64);
        batch[i] = (rng.gen::<f64>() < 0.5) as u8 as f64;
        off_m[i] = rand_distr::Distribution::sample(&rand_distr::Poisson::new(base.depth_mean_m).unwrap(), &mut rng).max(1.0).ln();
        off_g[i] = rand_distr::Distribution::sample(&rand_distr::Poisson::new(base.depth_mean_g).unwrap(), &mut rng).max(1.0).ln();
        for p in perturbed.iter_mut() {
            p[i] = rng.gen::<f64>() < base.pi;
        }
    }
    let mut genes = Vec::new();
    for j in 0..n_genes {
        let effect = if j < n_grnas { base.beta_m[1] } else { 0.0 };
        let target = &perturbed[j % n_grnas.max(1)];
        let col = (0..n)
            .map(|i| {
                let mut rng = cell_rng(seed, j as u64, i as u64);
                let l = base.beta_m[0] + off_m[i] + base.beta_m[2] * batch[i] + if target[i] { effect } else { 0.0 };
                draw(&Family::Poisson, l, &mut rng)
            })
            .collect();
        genes.push(col);
    }
    let mut grnas = Vec::new();
    for (r, target) in perturbed.iter().enumerate() {
        let col = (0..n)
            .map(|i| {
                let mut rng = cell_rng(seed, (1 << 32) + r as u64, i as u64);
                let l = base.beta_g[0] + off_g[i] + base.beta_g[2] * batch[i] + if target[i] { base.beta_g[1] } else { 0.0 };
                draw(&Family::Poisson, l, &mut rng)
            })
            .collect();
        grnas.push(col);
    }
    let gene_ids: Vec<String> = (0..n_genes).map(|j| format!("gene{j}")).collect();
    let grna_ids: Vec<String> = (0..n_grnas).map(|r| format!("grna{r}")).collect();
    let pairs = (0..n_genes)
        .map(|j| PairSpec {
            gene_id: gene_ids[j].clone(),
            grna_id: grna_ids[j % n_grnas.max(1)].clone(),
            label: Some(if j < n_grnas { crate::io::PairLabel::PositiveControl } else { crate::io::PairLabel::NegativeControl }),
        })
        .collect();
    let cov = Covariates {
        names: vec!["batch".into()],
        values: vec![batch],
        offset_m: Some(off_m),
        offset_g: Some(off_g),
        n_cells: n,
    };
    Ok((CountMatrix::new(gene_ids, genes, n)?, CountMatrix::new(grna_ids, grnas, n)?, cov, pairs))
}
