//! Variant in which unperturbed cells carry no gRNA reads at all, so any
//! positive gRNA count marks a cell as perturbed.

use crate::design::DesignMatrix;
use crate::em::{drop_effect, Dataset, EStep, EmOptions, Flag};
use crate::error::{Error, Result};
use crate::glm::{fit_weighted_glm, IrlsOptions};
use crate::louis::{add_outer, cell_terms, InfoMatrix};
use nalgebra::{DMatrix, DVector};

#[derive(Clone, Debug, PartialEq)]
pub struct ZiParams {
    pub pi: f64,
    /// `[b0, b1, gamma...]`
    pub beta_m: DVector<f64>,
    /// `[b0, gamma...]` for perturbed cells
    pub beta_gz: DVector<f64>,
}

impl ZiParams {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = vec![self.pi];
        v.extend(self.beta_m.iter());
        v.extend(self.beta_gz.iter());
        v
    }

    pub fn from_flat(flat: &[f64]) -> ZiParams {
        let d = flat.len() / 2;
        ZiParams {
            pi: flat[0],
            beta_m: DVector::from_column_slice(&flat[1..1 + d]),
            beta_gz: DVector::from_column_slice(&flat[1 + d..]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ZiFit {
    pub params: ZiParams,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub memberships: Vec<f64>,
    pub trace: Vec<f64>,
    pub n_glm_fits: usize,
    pub flags: Vec<Flag>,
}

fn check(params: &ZiParams, data: &Dataset) -> Result<()> {
    if data.k() != 2 {
        return Err(Error::Dimension("zero-inflated model needs gene and gRNA responses".into()));
    }
    if params.beta_m.len() != data.d() || params.beta_gz.len() != data.d() - 1 {
        return Err(Error::Dimension("zero-inflated coefficient lengths do not match design".into()));
    }
    if !(params.pi > 0.0 && params.pi < 1.0) {
        return Err(Error::Domain(format!("mixing proportion {} outside (0, 1)", params.pi)));
    }
    let g = &data.responses[1];
    if !g.family.is_count() {
        return Err(Error::Config("zero-inflated gRNA model requires a count family".into()));
    }
    Ok(())
}

pub fn zi_e_step(params: &ZiParams, data: &Dataset) -> Result<EStep> {
    check(params, data)?;
    let (rm, rg) = (&data.responses[0], &data.responses[1]);
    let lm0 = data.design.linear_predictor(&drop_effect(&params.beta_m), &rm.offsets);
    let lgz = data.design.linear_predictor(&params.beta_gz, &rg.offsets);
    let b1 = params.beta_m[1];
    let (lp0, lp1) = ((1.0 - params.pi).ln(), params.pi.ln());
    let mut ll = 0.0;
    let mut t1 = vec![0.0; data.n()];
    for i in 0..data.n() {
        let m = rm.y[i];
        let g = rg.y[i];
        let a1 = lp1
            + rm.family.log_density_linear(m, lm0[i] + b1)
            + rg.family.log_density_linear(g, lgz[i]);
        if g >= 1.0 {
            t1[i] = 1.0;
            ll += a1;
        } else {
            let a0 = lp0 + rm.family.log_density_linear(m, lm0[i]);
            let z = a1 - a0;
            let mx = a0.max(a1);
            ll += mx + (-(a1 - a0).abs()).exp().ln_1p();
            t1[i] = if z > 0.0 {
                1.0 / (1.0 + (-z).exp())
            } else {
                let e = z.exp();
                e / (1.0 + e)
            };
        }
    }
    Ok(EStep { t1, log_likelihood: ll })
}

pub fn zi_log_likelihood(params: &ZiParams, data: &Dataset) -> Result<f64> {
    zi_e_step(params, data).map(|e| e.log_likelihood)
}

fn stacked(data: &Dataset) -> (DesignMatrix, Vec<f64>, Vec<f64>) {
    let r = &data.responses[0];
    let x = data.augmented(0.0).stack(&data.augmented(1.0)).expect("same width");
    (x, [&r.y[..], &r.y[..]].concat(), [&r.offsets[..], &r.offsets[..]].concat())
}

fn zi_m_step_with(
    t1: &[f64],
    data: &Dataset,
    doubled: &(DesignMatrix, Vec<f64>, Vec<f64>),
    warm: Option<&ZiParams>,
) -> Result<(ZiParams, bool)> {
    let tc: Vec<f64> = t1
        .iter()
        .map(|t| t.clamp(crate::em::MEMBERSHIP_CLAMP, 1.0 - crate::em::MEMBERSHIP_CLAMP))
        .collect();
    let pi = tc.iter().sum::<f64>() / tc.len() as f64;
    let w: Vec<f64> = tc.iter().map(|t| 1.0 - t).chain(tc.iter().copied()).collect();
    let rm = &data.responses[0];
    let rg = &data.responses[1];
    let om = IrlsOptions { start: warm.map(|p| p.beta_m.clone()), ..IrlsOptions::default() };
    let fm = fit_weighted_glm(&doubled.1, &doubled.0, &rm.family, &w, &doubled.2, &om)?;
    let og = IrlsOptions { start: warm.map(|p| p.beta_gz.clone()), ..IrlsOptions::default() };
    let fg = fit_weighted_glm(&rg.y, &data.design, &rg.family, &tc, &rg.offsets, &og)?;
    Ok((
        ZiParams { pi, beta_m: fm.coefficients, beta_gz: fg.coefficients },
        fm.converged && fg.converged,
    ))
}

pub fn zi_m_step(t1: &[f64], data: &Dataset, warm: Option<&ZiParams>) -> Result<ZiParams> {
    zi_m_step_with(t1, data, &stacked(data), warm).map(|r| r.0)
}

pub fn run_zi_em(start: &ZiParams, data: &Dataset, opts: &EmOptions) -> Result<ZiFit> {
    check(start, data)?;
    let doubled = stacked(data);
    let mut params = start.clone();
    let mut es = zi_e_step(&params, data)?;
    let mut fit = ZiFit {
        params: params.clone(),
        log_likelihood: es.log_likelihood,
        iterations: 0,
        converged: false,
        memberships: Vec::new(),
        trace: vec![es.log_likelihood],
        n_glm_fits: 0,
        flags: Vec::new(),
    };
    for it in 1..=opts.max_iter {
        let (next, ok) = zi_m_step_with(&es.t1, data, &doubled, Some(&params))?;
        fit.n_glm_fits += 2;
        fit.iterations = it;
        if !ok && !fit.flags.contains(&Flag::InnerIrlsNotConverged) {
            fit.flags.push(Flag::InnerIrlsNotConverged);
        }
        let prev = es.log_likelihood;
        params = next;
        es = zi_e_step(&params, data)?;
        fit.trace.push(es.log_likelihood);
        if (es.log_likelihood - prev).abs() / (es.log_likelihood.abs() + 1.0) < opts.tol {
            fit.converged = true;
            break;
        }
    }
    if !fit.converged {
        fit.flags.push(Flag::NotConverged);
    }
    fit.params = params;
    fit.log_likelihood = es.log_likelihood;
    fit.memberships = es.t1;
    Ok(fit)
}

/// Start from memberships that mark exactly the cells with gRNA reads.
pub fn fit_zi(data: &Dataset, opts: &EmOptions) -> Result<ZiFit> {
    data.check_nondegenerate()?;
    if data.k() != 2 {
        return Err(Error::Dimension("zero-inflated model needs gene and gRNA responses".into()));
    }
    let t0: Vec<f64> = data.responses[1].y.iter().map(|&g| if g >= 1.0 { 1.0 } else { 0.0 }).collect();
    if t0.iter().all(|&t| t == 0.0) {
        return Err(Error::Domain("no cell has gRNA reads".into()));
    }
    let start = zi_m_step(&t0, data, None)?;
    let mut fit = run_zi_em(&start, data, opts)?;
    fit.n_glm_fits += 2;
    Ok(fit)
}

/// Observed information in the layout `(pi | beta_m | beta_gz)`.
pub fn zi_information(params: &ZiParams, data: &Dataset) -> Result<InfoMatrix> {
    let t1 = zi_e_step(params, data)?.t1;
    let d = data.d();
    let dim = 2 * d;
    let pi = params.pi;
    let a = 1.0 / pi + 1.0 / (1.0 - pi);
    let (rm, rg) = (&data.responses[0], &data.responses[1]);
    let lm0 = data.design.linear_predictor(&drop_effect(&params.beta_m), &rm.offsets);
    let lgz = data.design.linear_predictor(&params.beta_gz, &rg.offsets);
    let x = data.design.matrix();
    let mut info = DMatrix::zeros(dim, dim);
    let mut xt = [vec![0.0; d], vec![0.0; d]];
    let mut xi = vec![0.0; d - 1];
    let mut um = vec![0.0; d];
    let mut i_pi = 0.0;
    let (om, og) = (1, 1 + d);
    for i in 0..data.n() {
        let t = [1.0 - t1[i], t1[i]];
        for c in 0..d - 1 {
            xi[c] = x[(i, c)];
        }
        for (s, v) in xt.iter_mut().enumerate() {
            v[0] = xi[0];
            v[1] = s as f64;
            v[2..].copy_from_slice(&xi[1..]);
        }
        let sc = t[1] / pi - t[0] / (1.0 - pi);
        i_pi += sc * sc;
        let ct = cell_terms(&rm.family, rm.y[i], lm0[i], params.beta_m[1]);
        for c in 0..d {
            um[c] = t[0] * ct.dh[0] * xt[0][c] + t[1] * ct.dh[1] * xt[1][c];
        }
        // gene block and its pi column, as in the standard model
        for s in 0..2 {
            add_outer(&mut info, om, om, &xt[s], &xt[s], t[s] * ct.curv[s]);
        }
        add_outer(&mut info, om, om, &um, &um, 1.0);
        let w = a * t[0] * t[1];
        for c in 0..d {
            info[(om + c, 0)] += w * (ct.dh[0] * xt[0][c] - ct.dh[1] * xt[1][c]);
        }
        // gRNA block from the single perturbed-class density
        let cg = rg.family.components(rg.y[i], lgz[i]);
        let dhg = cg.delta * cg.resid;
        let curv = cg.delta * cg.delta * cg.var - cg.delta_prime * cg.resid;
        add_outer(&mut info, og, og, &xi, &xi, t[1] * curv - t[1] * t[0] * dhg * dhg);
        // cross block: covariance of the two score contributions
        let mut v = um.clone();
        for c in 0..d {
            v[c] -= ct.dh[1] * xt[1][c];
        }
        add_outer(&mut info, og, om, &xi, &v, t[1] * dhg);
        for c in 0..d - 1 {
            info[(og + c, 0)] -= w * dhg * xi[c];
        }
    }
    info[(0, 0)] = i_pi;
    for r in 0..dim {
        for c in r + 1..dim {
            info[(r, c)] = info[(c, r)];
        }
    }
    Ok(InfoMatrix { matrix: info, d, k: 2 })
}
