//! Observed information of the marginal likelihood via Louis's identity,
//! and Wald inference on a perturbation effect.

use crate::em::{e_step, Dataset, Params};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};
use libm::erfc;

/// Observed information with blocks ordered `(pi | beta_1 | ... | beta_K)`.
#[derive(Clone, Debug)]
pub struct InfoMatrix {
    pub matrix: DMatrix<f64>,
    /// Coefficients per response.
    pub d: usize,
    pub k: usize,
}

impl InfoMatrix {
    /// Position of coefficient `j` of response `k`.
    pub fn index(&self, k: usize, j: usize) -> usize {
        1 + k * self.d + j
    }

    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        self.matrix
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| Error::Numerical("observed information is not positive definite".into()))
    }

    pub fn std_errors(&self) -> Result<Vec<f64>> {
        let c = self.covariance()?;
        Ok((0..c.nrows()).map(|i| c[(i, i)].sqrt()).collect())
    }

    /// Wald summary for coefficient `j` of response `k`.
    pub fn wald(&self, params: &Params, k: usize, j: usize, level: f64) -> Result<Wald> {
        let cov = self.covariance()?;
        let idx = self.index(k, j);
        Wald::new(params.betas[k][j], cov[(idx, idx)].sqrt(), level)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Wald {
    pub estimate: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub z: f64,
    pub p_value: f64,
}

impl Wald {
    pub fn new(estimate: f64, se: f64, level: f64) -> Result<Wald> {
        if !(se.is_finite() && se > 0.0) {
            return Err(Error::Numerical(format!("standard error {se} is not usable")));
        }
        let q = Normal::new(0.0, 1.0).unwrap().inverse_cdf(0.5 + level / 2.0);
        let z = estimate / se;
        Ok(Wald {
            estimate,
            se,
            ci_lo: estimate - q * se,
            ci_hi: estimate + q * se,
            z,
            p_value: erfc(z.abs() / std::f64::consts::SQRT_2),
        })
    }
}

pub(crate) fn add_outer(m: &mut DMatrix<f64>, r0: usize, c0: usize, a: &[f64], b: &[f64], s: f64) {
    if s == 0.0 {
        return;
    }
    for (i, ai) in a.iter().enumerate() {
        let sa = s * ai;
        for (j, bj) in b.iter().enumerate() {
            m[(r0 + i, c0 + j)] += sa * bj;
        }
    }
}

/// Per-cell, per-class derivative terms of one response.
pub(crate) struct CellTerms {
    /// Delta * H in classes 0 and 1.
    pub dh: [f64; 2],
    /// Delta^2 V - Delta' H - (Delta H)^2 in classes 0 and 1.
    pub curv: [f64; 2],
}

pub(crate) fn cell_terms(family: &crate::family::Family, y: f64, l0: f64, b1: f64) -> CellTerms {
    let mut dh = [0.0; 2];
    let mut curv = [0.0; 2];
    for s in 0..2 {
        let c = family.components(y, l0 + s as f64 * b1);
        let v = c.delta * c.resid;
        dh[s] = v;
        curv[s] = c.delta * c.delta * c.var - c.delta_prime * c.resid - v * v;
    }
    CellTerms { dh, curv }
}

/// Observed information at `params` (normally the MLE).
pub fn louis_information(params: &Params, data: &Dataset) -> Result<InfoMatrix> {
    let t1 = e_step(params, data)?.t1;
    let k = data.k();
    let d = data.d();
    let dim = 1 + k * d;
    let pi = params.pi;
    let a = 1.0 / pi + 1.0 / (1.0 - pi);
    let x = data.design.matrix();
    let bases: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            let nu = crate::em::drop_effect(&params.betas[j]);
            data.design.linear_predictor(&nu, &data.responses[j].offsets)
        })
        .collect();
    let mut info = DMatrix::zeros(dim, dim);
    let mut xt = [vec![0.0; d], vec![0.0; d]];
    let mut u = vec![vec![0.0; d]; k];
    let mut terms: Vec<CellTerms> = Vec::with_capacity(k);
    let mut i_pi = 0.0;
    for i in 0..data.n() {
        let t = [1.0 - t1[i], t1[i]];
        for (s, v) in xt.iter_mut().enumerate() {
            v[0] = x[(i, 0)];
            v[1] = s as f64;
            for j in 1..d - 1 {
                v[j + 1] = x[(i, j)];
            }
        }
        let sc = t[1] / pi - t[0] / (1.0 - pi);
        i_pi += sc * sc;
        terms.clear();
        for (j, r) in data.responses.iter().enumerate() {
            let ct = cell_terms(&r.family, r.y[i], bases[j][i], params.betas[j][1]);
            for (c, uc) in u[j].iter_mut().enumerate() {
                *uc = t[0] * ct.dh[0] * xt[0][c] + t[1] * ct.dh[1] * xt[1][c];
            }
            terms.push(ct);
        }
        for j in 0..k {
            let oj = 1 + j * d;
            for s in 0..2 {
                add_outer(&mut info, oj, oj, &xt[s], &xt[s], t[s] * terms[j].curv[s]);
            }
            add_outer(&mut info, oj, oj, &u[j], &u[j], 1.0);
            for l in 0..j {
                let ol = 1 + l * d;
                add_outer(&mut info, oj, ol, &u[j], &u[l], 1.0);
                for s in 0..2 {
                    let c = -t[s] * terms[j].dh[s] * terms[l].dh[s];
                    add_outer(&mut info, oj, ol, &xt[s], &xt[s], c);
                }
            }
            let w = a * t[0] * t[1];
            for c in 0..d {
                info[(oj + c, 0)] += w * (terms[j].dh[0] * xt[0][c] - terms[j].dh[1] * xt[1][c]);
            }
        }
    }
    info[(0, 0)] = i_pi;
    // fill the upper triangle from the lower one
    for r in 0..dim {
        for c in r + 1..dim {
            info[(r, c)] = info[(c, r)];
        }
    }
    Ok(InfoMatrix { matrix: info, d, k })
}

/// Score of the marginal log likelihood in the same layout.
pub fn marginal_score(params: &Params, data: &Dataset) -> Result<DVector<f64>> {
    let t1 = e_step(params, data)?.t1;
    let k = data.k();
    let d = data.d();
    let pi = params.pi;
    let x = data.design.matrix();
    let mut g = DVector::zeros(1 + k * d);
    for (j, r) in data.responses.iter().enumerate() {
        let nu = crate::em::drop_effect(&params.betas[j]);
        let base = data.design.linear_predictor(&nu, &r.offsets);
        for i in 0..data.n() {
            let ct = cell_terms(&r.family, r.y[i], base[i], params.betas[j][1]);
            let w0 = (1.0 - t1[i]) * ct.dh[0];
            let w1 = t1[i] * ct.dh[1];
            let o = 1 + j * d;
            g[o] += (w0 + w1) * x[(i, 0)];
            g[o + 1] += w1;
            for c in 1..d - 1 {
                g[o + c + 1] += (w0 + w1) * x[(i, c)];
            }
        }
    }
    g[0] = t1.iter().map(|t| t / pi - (1.0 - t) / (1.0 - pi)).sum();
    Ok(g)
}
