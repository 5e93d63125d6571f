use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use glmeiv::assignment::{bv_decomposition, mixture_assign, ThresholdModel};
use glmeiv::em::{e_step, fit_accelerated_with_pilot, fit_vanilla, run_reduced_em};
use glmeiv::io::{self, read_counts, read_covariates, read_pairs, write_table, PairSpec};
use glmeiv::louis::louis_information;
use glmeiv::pipeline::{
    analyze_pairs, load_pair, pair_seed, precompute_all, synthetic_screen, write_results, Inputs, Mode, RunConfig,
    Store, Study,
};
use glmeiv::simulate::{evaluate_methods, MetricsRow};
use glmeiv::Family;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "glmeiv-kit", version, about = "Latent-perturbation GLMs for single-cell CRISPR screens")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a simulation study from a scenario file and write metrics CSV.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit one pair and print diagnostics.
    FitPair {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        gene: String,
        #[arg(long)]
        grna: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Precompute nuisance fits, then analyze every pair.
    Pipeline {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Precompute store root; defaults to `glmeiv-store` next to --out.
        #[arg(long)]
        store: Option<PathBuf>,
        /// Refit store entries that already exist.
        #[arg(long)]
        force: bool,
    },
    /// Dump the thresholding bias/variance theory over a grid as CSV.
    ThresholdTheory {
        /// Comma-separated gRNA effects.
        #[arg(long, default_value = "0.5,1,2,3")]
        beta1_g: String,
        #[arg(long, default_value = "0.05,0.25,0.5")]
        pi: String,
        #[arg(long, default_value_t = 0.0)]
        beta0_g: f64,
        /// Gene effect used for the limit and asymptotic variance.
        #[arg(long, default_value_t = 1.0)]
        beta_m: f64,
        #[arg(long, default_value_t = -2.0)]
        c_min: f64,
        #[arg(long, default_value_t = 5.0)]
        c_max: f64,
        #[arg(long, default_value_t = 71)]
        c_steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Assign perturbations with the gRNA-only mixture and write a per-cell CSV.
    Assign {
        #[arg(long)]
        grnas: PathBuf,
        #[arg(long)]
        grna_names: Option<PathBuf>,
        #[arg(long)]
        covariates: PathBuf,
        /// Restrict to one gRNA.
        #[arg(long)]
        grna: Option<String>,
        #[arg(long, default_value = "poisson")]
        family: String,
        #[arg(long)]
        nb_size: Option<f64>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a small synthetic screen (matrices, covariates, pairs, config).
    Synthesize {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 5000)]
        cells: usize,
        #[arg(long, default_value_t = 10)]
        genes: usize,
        #[arg(long, default_value_t = 5)]
        grnas: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Gene counts, cells by genes (.mtx or dense CSV).
    #[arg(long)]
    genes: PathBuf,
    #[arg(long)]
    gene_names: Option<PathBuf>,
    /// gRNA counts, cells by gRNAs.
    #[arg(long)]
    grnas: PathBuf,
    #[arg(long)]
    grna_names: Option<PathBuf>,
    #[arg(long)]
    covariates: PathBuf,
}

fn config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(RunConfig::parse(&text, &p.display().to_string())?)
        }
    }
}

fn inputs(d: &DataArgs, cfg: &RunConfig) -> Result<Inputs> {
    let genes = read_counts(&d.genes, d.gene_names.as_deref())?;
    let grnas = read_counts(&d.grnas, d.grna_names.as_deref())?;
    let cov = read_covariates(&d.covariates)?;
    Ok(Inputs::new(genes, grnas, cov, cfg)?)
}

fn list(s: &str) -> Result<Vec<f64>> {
    s.split(',').map(|t| t.trim().parse::<f64>().with_context(|| format!("bad number '{t}'"))).collect()
}

fn simulate(scenario: &Path, out: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(scenario)?;
    let study = Study::parse(&text, &scenario.display().to_string())?;
    let mut rows = Vec::new();
    for (label, s) in &study.scenarios {
        for r in evaluate_methods(s, &study.methods, label, &study.eval)? {
            eprintln!("{label} {}: bias {:.4} coverage {:.3}", r.method, r.bias, r.coverage);
            rows.push(r.record());
        }
    }
    write_table(out, &MetricsRow::HEADER, &rows)?;
    Ok(())
}

fn fit_pair(d: &DataArgs, gene: &str, grna: &str, cfg_path: Option<&Path>, seed: u64) -> Result<()> {
    let cfg = config(cfg_path)?;
    let inp = inputs(d, &cfg)?;
    let dir = tempdir_store()?;
    let store = Store::open(&dir, &inp, &cfg)?;
    let pair = PairSpec { gene_id: gene.into(), grna_id: grna.into(), label: None };
    let rep = precompute_all(&inp, std::slice::from_ref(&pair), &store, &cfg, 1, true)?;
    if let Some((id, e)) = rep.failed.first() {
        bail!("nuisance fit for '{id}' failed: {e}");
    }
    let (data, pilot, flags) = load_pair(&inp, &store, &pair)?;
    let opts = cfg.em_options(pair_seed(seed, gene, grna));
    println!("cells: {}  covariates: {:?}", data.n(), data.design.names());
    for (r, nu) in data.responses.iter().zip(&pilot.nuisance) {
        println!("{} family {}  pilot nuisance {:?}", r.name, r.family.name(), nu.as_slice());
    }
    if cfg.mode == Mode::ZeroInflated {
        let fit = glmeiv::zero_inflated::fit_zi(&data, &opts)?;
        let cov = glmeiv::zero_inflated::zi_information(&fit.params, &data)?.covariance()?;
        println!("log-likelihood trace: {:?}", fit.trace);
        println!("pi {}  beta_m {:?}  beta_gz {:?}", fit.params.pi, fit.params.beta_m.as_slice(), fit.params.beta_gz.as_slice());
        println!("effect {} (se {})  converged {}  fits {}", fit.params.beta_m[1], cov[(2, 2)].sqrt(), fit.converged, fit.n_glm_fits);
        return Ok(());
    }
    let r = run_reduced_em(&data, &pilot.fitted, 0.1, &[0.0, 1.0], &opts)?;
    println!("reduced EM from (0.1, 0, 1): pi {} effects {:?} in {} iterations", r.pi, r.effects, r.iterations);
    let fit = if cfg.mode == Mode::Vanilla { fit_vanilla(&data, &opts)? } else { fit_accelerated_with_pilot(&data, &pilot, &opts)? };
    println!("log-likelihood trace: {:?}", fit.trace);
    println!("pi {}", fit.params.pi);
    let info = louis_information(&fit.params, &data)?;
    let se = info.std_errors()?;
    for (k, r) in data.responses.iter().enumerate() {
        let names = std::iter::once("(intercept)".to_string())
            .chain(std::iter::once("perturbation".to_string()))
            .chain(data.design.names()[1..].iter().cloned());
        for (j, name) in names.enumerate() {
            println!("  {}:{:<14} {:>12.6} se {:.6}", r.name, name, fit.params.betas[k][j], se[info.index(k, j)]);
        }
    }
    let w = info.wald(&fit.params, 0, 1, cfg.level)?;
    println!(
        "gene effect {:.6}  fold change {:.4}  CI [{:.4}, {:.4}]  p {:.3e}",
        w.estimate,
        w.estimate.exp(),
        w.ci_lo.exp(),
        w.ci_hi.exp(),
        w.p_value
    );
    let t = e_step(&fit.params, &data)?.t1;
    println!("cells with membership > 0.5: {}", t.iter().filter(|&&x| x > 0.5).count());
    let all: Vec<String> = flags.into_iter().chain(fit.flags.iter().map(|f| f.to_string())).collect();
    println!("converged {}  iterations {}  GLM fits {}  flags {:?}", fit.converged, fit.iterations, fit.n_glm_fits, all);
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}

fn tempdir_store() -> Result<PathBuf> {
    let dir = std::env::temp_dir().join(format!("glmeiv-fit-pair-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

#[allow(clippy::too_many_arguments)]
fn pipeline(
    d: &DataArgs,
    pairs: &Path,
    cfg_path: Option<&Path>,
    out: &Path,
    workers: usize,
    seed: u64,
    store_root: Option<&Path>,
    force: bool,
) -> Result<ExitCode> {
    let cfg = config(cfg_path)?;
    let inp = inputs(d, &cfg)?;
    let pairs = read_pairs(pairs)?;
    let root = match store_root {
        Some(p) => p.to_path_buf(),
        None => out.parent().unwrap_or(Path::new(".")).join("glmeiv-store"),
    };
    let store = Store::open(&root, &inp, &cfg)?;
    let rep = precompute_all(&inp, &pairs, &store, &cfg, workers, force)?;
    eprintln!(
        "precompute: {} fitted, {} reused, {} failed (store {})",
        rep.fitted,
        rep.skipped,
        rep.failed.len(),
        store.dir.display()
    );
    let rows = analyze_pairs(&inp, &pairs, &store, &cfg, workers, seed)?;
    write_results(out, &rows)?;
    let errors = rows.iter().filter(|r| r.is_error()).count();
    eprintln!("{} pairs analyzed, {} error rows", pairs.len(), errors);
    Ok(if errors > 0 { ExitCode::from(2) } else { ExitCode::SUCCESS })
}

#[allow(clippy::too_many_arguments)]
fn theory(b1s: &str, pis: &str, b0: f64, beta_m: f64, c_min: f64, c_max: f64, steps: usize, out: Option<&Path>) -> Result<()> {
    if steps < 2 {
        bail!("--c-steps must be at least 2");
    }
    let header = ["beta1_g", "pi", "c", "beta0_g", "gamma", "b", "l", "avar"];
    let mut rows = Vec::new();
    for b1 in list(b1s)? {
        for pi in list(pis)? {
            let m = ThresholdModel::new(b0, b1, pi)?;
            for s in 0..steps {
                let c = c_min + (c_max - c_min) * s as f64 / (steps - 1) as f64;
                let gamma = m.attenuation(c);
                // the bias/variance model has no gRNA intercept, so shift the threshold
                let (l, avar) = match bv_decomposition(beta_m, b1, pi, c - b0) {
                    Ok(bv) => (bv.limit.to_string(), bv.avar.to_string()),
                    Err(_) => (String::new(), String::new()),
                };
                rows.push(vec![
                    b1.to_string(),
                    pi.to_string(),
                    c.to_string(),
                    b0.to_string(),
                    gamma.to_string(),
                    (1.0 - gamma).to_string(),
                    l,
                    avar,
                ]);
            }
        }
    }
    write_table(out, &header, &rows)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn assign(
    grnas: &Path,
    names: Option<&Path>,
    covariates: &Path,
    only: Option<&str>,
    family: &str,
    size: Option<f64>,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let g = read_counts(grnas, names)?;
    let cov = read_covariates(covariates)?;
    if cov.n_cells != g.n_cells {
        bail!("{} covariate rows for {} cells", cov.n_cells, g.n_cells);
    }
    let family = Family::from_name(family, size)?;
    let design = cov.design()?;
    let offsets = cov
        .offset_g
        .clone()
        .unwrap_or_else(|| g.library_sizes().iter().map(|s| s.max(1.0).ln()).collect());
    let ids: Vec<String> = match only {
        Some(id) => vec![id.to_string()],
        None => g.features.clone(),
    };
    let mut rows = Vec::new();
    for id in ids {
        let y = g.get(&id).with_context(|| format!("gRNA '{id}' not found"))?;
        let opts = glmeiv::em::EmOptions { seed: pair_seed(seed, "", &id), ..Default::default() };
        let a = mixture_assign(y, &design, &offsets, family, &opts)?;
        let flags: Vec<String> = a.flags.iter().map(|f| f.to_string()).collect();
        eprintln!(
            "{id}: pi {:.4}, {} cells assigned{}",
            a.fit.params.pi,
            a.assignments.iter().filter(|&&x| x).count(),
            if flags.is_empty() { String::new() } else { format!(" [{}]", flags.join(";")) }
        );
        for (i, (p, z)) in a.probabilities.iter().zip(&a.assignments).enumerate() {
            rows.push(vec![i.to_string(), id.clone(), p.to_string(), (*z as u8).to_string()]);
        }
    }
    write_table(out, &["cell", "grna_id", "probability", "assigned"], &rows)?;
    Ok(())
}

fn synthesize(dir: &Path, cells: usize, genes: usize, grnas: usize, seed: u64) -> Result<()> {
    if grnas == 0 || genes == 0 {
        bail!("need at least one gene and one gRNA");
    }
    std::fs::create_dir_all(dir)?;
    let (gm, rm, cov, pairs) = synthetic_screen(cells, genes, grnas, seed)?;
    io::write_matrix_market(&dir.join("genes.mtx"), &gm)?;
    io::write_names(&dir.join("genes.names"), &gm.features)?;
    io::write_matrix_market(&dir.join("grnas.mtx"), &rm)?;
    io::write_names(&dir.join("grnas.names"), &rm.features)?;
    io::write_covariates(&dir.join("covariates.csv"), &cov)?;
    io::write_pairs(&dir.join("pairs.csv"), &pairs)?;
    std::fs::write(
        dir.join("run.cfg"),
        "family_m = poisson\nfamily_g = poisson\nmode = accelerated\nthreshold = bayes\nrestarts = 15\n",
    )?;
    eprintln!("wrote synthetic screen to {}", dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Simulate { scenario, out } => simulate(&scenario, out.as_deref())?,
        Cmd::FitPair { data, gene, grna, config, seed } => fit_pair(&data, &gene, &grna, config.as_deref(), seed)?,
        Cmd::Pipeline { data, pairs, config, out, workers, seed, store, force } => {
            return pipeline(&data, &pairs, config.as_deref(), &out, workers, seed, store.as_deref(), force)
        }
        Cmd::ThresholdTheory { beta1_g, pi, beta0_g, beta_m, c_min, c_max, c_steps, out } => {
            theory(&beta1_g, &pi, beta0_g, beta_m, c_min, c_max, c_steps, out.as_deref())?
        }
        Cmd::Assign { grnas, grna_names, covariates, grna, family, nb_size, seed, out } => assign(
            &grnas,
            grna_names.as_deref(),
            &covariates,
            grna.as_deref(),
            &family,
            nb_size,
            seed,
            out.as_deref(),
        )?,
        Cmd::Synthesize { out_dir, cells, genes, grnas, seed } => synthesize(&out_dir, cells, genes, grnas, seed)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
