//! Unit-level nested-error model `y = Xβ + u_d + e`: ML variance components
//! by Fisher scoring, GLS β, BLUP random effects, EBLUP area means and the
//! Prasad–Rao MSE approximation.
//!
//! Within a domain the covariance is `D + σ²_u 11ᵀ` with `D` diagonal, so all
//! traces, solves and determinants are O(n_d). The same engine serves the
//! linkage-adjusted fit, where `D` carries an extra per-unit variance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ols, spd_inverse, DiagPlusRankOne};

pub const VARIANCE_FLOOR: f64 = 1e-10;

/// Sample units plus per-domain population information.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitSample {
    pub y: Vec<f64>,
    /// Row-major `n × p`.
    pub x: Vec<f64>,
    pub p: usize,
    pub domains: Vec<usize>,
    /// `N_d`.
    pub pop_sizes: Vec<f64>,
    /// Row-major `D × p` population covariate means.
    pub pop_means: Vec<f64>,
    pub covariate_names: Vec<String>,
}

impl UnitSample {
    pub fn new(
        y: Vec<f64>,
        x: Vec<f64>,
        domains: Vec<usize>,
        pop_sizes: Vec<f64>,
        pop_means: Vec<f64>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        let p = covariate_names.len();
        let nd = pop_sizes.len();
        if nd == 0 {
            return Err(Error::InvalidInput("at least one domain is required".into()));
        }
        if x.len() != n * p || domains.len() != n || pop_means.len() != nd * p {
            return Err(Error::InvalidInput("unit sample dimensions are inconsistent".into()));
        }
        if let Some(&d) = domains.iter().find(|&&d| d >= nd) {
            return Err(Error::InvalidInput(format!("unit domain {} outside 1..={nd}", d + 1)));
        }
        if y.iter().chain(&x).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite value in unit data".into()));
        }
        Ok(Self {
            y,
            x,
            p,
            domains,
            pop_sizes,
            pop_means,
            covariate_names,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n_domains(&self) -> usize {
        self.pop_sizes.len()
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    pub fn pop_mean_row(&self, d: usize) -> &[f64] {
        &self.pop_means[d * self.p..(d + 1) * self.p]
    }

    /// Unit indices per domain.
    pub fn blocks(&self) -> Vec<Vec<usize>> {
        let mut b = vec![Vec::new(); self.n_domains()];
        for (i, &d) in self.domains.iter().enumerate() {
            b[d].push(i);
        }
        b
    }

    pub fn domain_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_domains()];
        for &d in &self.domains {
            c[d] += 1;
        }
        c
    }

    /// Sample means of y and x per domain (zeros where `n_d = 0`).
    pub fn domain_means(&self) -> (Vec<f64>, Vec<f64>) {
        let nd = self.n_domains();
        let p = self.p;
        let mut ybar = vec![0.0; nd];
        let mut xbar = vec![0.0; nd * p];
        let counts = self.domain_counts();
        for i in 0..self.n() {
            let d = self.domains[i];
            ybar[d] += self.y[i];
            for k in 0..p {
                xbar[d * p + k] += self.x[i * p + k];
            }
        }
        for d in 0..nd {
            if counts[d] > 0 {
                let c = counts[d] as f64;
                ybar[d] /= c;
                for k in 0..p {
                    xbar[d * p + k] /= c;
                }
            }
        }
        (ybar, xbar)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MseComponents {
    pub g1: f64,
    pub g2: f64,
    /// `None` when the Fisher information is singular.
    pub g3: Option<f64>,
    pub mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedFit {
    pub beta: Vec<f64>,
    /// `(XᵀV⁻¹X)⁻¹`, row-major `p × p`.
    pub beta_cov: Vec<f64>,
    pub sigma2_u: f64,
    pub sigma2_e: f64,
    pub u_hat: Vec<f64>,
    pub area_pred: Vec<f64>,
    pub mse: Vec<MseComponents>,
    /// Expected information for `(σ²_e, σ²_u)`.
    pub fisher_info: [[f64; 2]; 2],
    pub loglik: f64,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// A variance component ended at the floor.
    pub floor_active: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitOptions {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_tol() -> f64 {
    1e-10
}
fn default_max_iter() -> usize {
    500
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol: default_tol(),
            max_iter: default_max_iter(),
        }
    }
}

/// Gaussian model `y ~ N(Mβ, Σ)`, Σ block-diagonal with blocks
/// `diag(σ²_e + extra_i) + σ²_u 11ᵀ`. The extra term is held fixed.
pub(crate) struct VcEngine<'a> {
    pub y: &'a [f64],
    pub design: &'a [f64],
    pub p: usize,
    pub blocks: &'a [Vec<usize>],
    pub extra: Option<&'a [f64]>,
    pub names: &'a [String],
}

pub(crate) struct Moments {
    pub score: [f64; 2],
    pub info: [[f64; 2]; 2],
    pub loglik: f64,
}

impl<'a> VcEngine<'a> {
    pub fn block_cov(&self, d: usize, s2e: f64, s2u: f64) -> DiagPlusRankOne {
        let diag = self.blocks[d]
            .iter()
            .map(|&i| s2e + self.extra.map_or(0.0, |e| e[i]))
            .collect();
        DiagPlusRankOne::new(diag, s2u)
    }

    fn gather(&self, d: usize, v: &[f64]) -> Vec<f64> {
        self.blocks[d].iter().map(|&i| v[i]).collect()
    }

    fn gather_rows(&self, d: usize) -> Vec<f64> {
        let p = self.p;
        self.blocks[d]
            .iter()
            .flat_map(|&i| self.design[i * p..(i + 1) * p].iter().copied())
            .collect()
    }

    /// GLS β and its covariance `(MᵀΣ⁻¹M)⁻¹`.
    pub fn gls(&self, s2e: f64, s2u: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let p = self.p;
        let mut a = DMatrix::zeros(p, p);
        let mut b = DVector::zeros(p);
        for d in 0..self.blocks.len() {
            if self.blocks[d].is_empty() {
                continue;
            }
            let cov = self.block_cov(d, s2e, s2u);
            let (ad, bd) = cov.gls_terms(&self.gather_rows(d), p, &self.gather(d, self.y));
            a += ad;
            b += bd;
        }
        let inv = spd_inverse(&a, self.names)?;
        Ok((&inv * b, inv))
    }

    pub fn residuals(&self, beta: &DVector<f64>) -> Vec<f64> {
        let p = self.p;
        (0..self.y.len())
            .map(|i| {
                let row = &self.design[i * p..(i + 1) * p];
                self.y[i] - row.iter().zip(beta.iter()).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    pub fn loglik(&self, beta: &DVector<f64>, s2e: f64, s2u: f64) -> f64 {
        let r = self.residuals(beta);
        let n = self.y.len() as f64;
        let mut s = -0.5 * n * (2.0 * std::f64::consts::PI).ln();
        for d in 0..self.blocks.len() {
            if self.blocks[d].is_empty() {
                continue;
            }
            let cov = self.block_cov(d, s2e, s2u);
            let rd = self.gather(d, &r);
            s -= 0.5 * (cov.log_det() + cov.quad(&rd));
        }
        s
    }

    /// Score and expected information in `(σ²_e, σ²_u)` at fixed β.
    pub fn moments(&self, beta: &DVector<f64>, s2e: f64, s2u: f64) -> Moments {
        let r = self.residuals(beta);
        let n = self.y.len() as f64;
        let mut score = [0.0; 2];
        let mut info = [[0.0; 2]; 2];
        let mut loglik = -0.5 * n * (2.0 * std::f64::consts::PI).ln();
        for d in 0..self.blocks.len() {
            if self.blocks[d].is_empty() {
                continue;
            }
            let cov = self.block_cov(d, s2e, s2u);
            let rd = self.gather(d, &r);
            let sr = cov.solve(&rd);
            let one_sr: f64 = sr.iter().sum();
            score[0] += -0.5 * cov.trace_inv() + 0.5 * sr.iter().map(|v| v * v).sum::<f64>();
            score[1] += -0.5 * cov.ones_inv_ones() + 0.5 * one_sr * one_sr;
            info[0][0] += 0.5 * cov.frob_inv_sq();
            let s1 = cov.ones_inv_ones();
            info[1][1] += 0.5 * s1 * s1;
            info[0][1] += 0.5 * cov.norm_inv_ones_sq();
            loglik -= 0.5 * (cov.log_det() + rd.iter().zip(&sr).map(|(a, b)| a * b).sum::<f64>());
        }
        info[1][0] = info[0][1];
        Moments { score, info, loglik }
    }

    /// One Fisher-scoring step at fixed β with step halving; never lowers
    /// the log-likelihood.
    pub fn scoring_step(&self, beta: &DVector<f64>, s2e: f64, s2u: f64) -> (f64, f64, f64) {
        let m = self.moments(beta, s2e, s2u);
        let det = m.info[0][0] * m.info[1][1] - m.info[0][1] * m.info[1][0];
        let (de, du) = if det > 1e-300 * m.info[0][0].abs().max(1.0) {
            (
                (m.info[1][1] * m.score[0] - m.info[0][1] * m.score[1]) / det,
                (m.info[0][0] * m.score[1] - m.info[1][0] * m.score[0]) / det,
            )
        } else {
            (
                m.score[0] / m.info[0][0].max(1e-300),
                m.score[1] / m.info[1][1].max(1e-300),
            )
        };
        let mut step = 1.0;
        for _ in 0..40 {
            let ne = (s2e + step * de).max(VARIANCE_FLOOR);
            let nu = (s2u + step * du).max(VARIANCE_FLOOR);
            let ll = self.loglik(beta, ne, nu);
            if ll >= m.loglik - 1e-12 * m.loglik.abs() {
                return (ne, nu, ll);
            }
            step *= 0.5;
        }
        (s2e, s2u, m.loglik)
    }

    /// Alternates GLS β and scoring steps from the given start.
    pub fn fit(&self, mut s2e: f64, mut s2u: f64, opts: &FitOptions) -> Result<VcFit> {
        let (mut beta, _) = self.gls(s2e, s2u)?;
        let mut trace = vec![self.loglik(&beta, s2e, s2u)];
        let mut converged = false;
        let mut iterations = 0;
        for it in 1..=opts.max_iter {
            iterations = it;
            let (ne, nu, _) = self.scoring_step(&beta, s2e, s2u);
            let (nb, _) = self.gls(ne, nu)?;
            let mut change = rel_change(s2e, ne).max(rel_change(s2u, nu));
            for k in 0..self.p {
                change = change.max(rel_change(beta[k], nb[k]));
            }
            s2e = ne;
            s2u = nu;
            beta = nb;
            trace.push(self.loglik(&beta, s2e, s2u));
            if change < opts.tol {
                converged = true;
                break;
            }
        }
        let (beta, cov) = self.gls(s2e, s2u)?;
        let m = self.moments(&beta, s2e, s2u);
        Ok(VcFit {
            beta,
            beta_cov: cov,
            s2e,
            s2u,
            info: m.info,
            loglik: m.loglik,
            trace,
            iterations,
            converged,
        })
    }

    /// `σ²_u 1ᵀΣ_d⁻¹ r_d` per domain (0 for empty domains).
    pub fn random_effects(&self, beta: &DVector<f64>, s2e: f64, s2u: f64) -> Vec<f64> {
        let r = self.residuals(beta);
        (0..self.blocks.len())
            .map(|d| {
                if self.blocks[d].is_empty() {
                    0.0
                } else {
                    s2u * self.block_cov(d, s2e, s2u).ones_inv(&self.gather(d, &r))
                }
            })
            .collect()
    }
}

fn rel_change(old: f64, new: f64) -> f64 {
    (new - old).abs() / old.abs().max(new.abs()).max(VARIANCE_FLOOR)
}

pub(crate) struct VcFit {
    pub beta: DVector<f64>,
    pub beta_cov: DMatrix<f64>,
    pub s2e: f64,
    pub s2u: f64,
    pub info: [[f64; 2]; 2],
    pub loglik: f64,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Moment-type starting values: pooled within-domain residual variance and
/// the excess variance of domain mean residuals.
pub(crate) fn initial_components(sample: &UnitSample, beta: &DVector<f64>) -> (f64, f64) {
    let nd = sample.n_domains();
    let p = sample.p;
    let counts = sample.domain_counts();
    let mut sum = vec![0.0; nd];
    let mut sq = vec![0.0; nd];
    let mut tot = 0.0;
    for i in 0..sample.n() {
        let fit: f64 = sample.x_row(i).iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
        let r = sample.y[i] - fit;
        sum[sample.domains[i]] += r;
        sq[sample.domains[i]] += r * r;
        tot += r * r;
    }
    let n = sample.n() as f64;
    let s2 = (tot / (n - p as f64).max(1.0)).max(VARIANCE_FLOOR);
    let (mut within, mut dfw) = (0.0, 0.0);
    let (mut between, mut nb, mut inv_n) = (0.0, 0.0, 0.0);
    for d in 0..nd {
        if counts[d] == 0 {
            continue;
        }
        let c = counts[d] as f64;
        let m = sum[d] / c;
        within += sq[d] - c * m * m;
        dfw += c - 1.0;
        between += m * m;
        nb += 1.0;
        inv_n += 1.0 / c;
    }
    let s2e = if dfw > 0.0 { (within / dfw).max(0.01 * s2) } else { s2 };
    let s2u = if nb > 0.0 {
        (between / nb - s2e * inv_n / nb).max(0.05 * s2)
    } else {
        0.05 * s2
    };
    (s2e, s2u)
}

/// ML fit of the nested-error model.
pub fn fit_ml(sample: &UnitSample, opts: &FitOptions) -> Result<MixedFit> {
    let n = sample.n();
    let p = sample.p;
    if n <= p + 2 {
        return Err(Error::InvalidInput(format!(
            "need more than p + 2 = {} units, got {n}",
            p + 2
        )));
    }
    let counts = sample.domain_counts();
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::InvalidInput("at least two sampled domains are required".into()));
    }
    let beta0 = ols(&sample.x, p, &sample.y, &sample.covariate_names)?;
    let (s2e0, s2u0) = initial_components(sample, &beta0);
    let blocks = sample.blocks();
    let engine = VcEngine {
        y: &sample.y,
        design: &sample.x,
        p,
        blocks: &blocks,
        extra: None,
        names: &sample.covariate_names,
    };
    let vc = engine.fit(s2e0, s2u0, opts)?;
    let beta: Vec<f64> = vc.beta.iter().copied().collect();
    let u_hat = blup_random_effects(&beta, vc.s2u, vc.s2e, sample);
    let area_pred = eblup_area_means(&beta, &u_hat, sample)?;
    let mut fit = MixedFit {
        beta,
        beta_cov: vc.beta_cov.transpose().iter().copied().collect(),
        sigma2_u: vc.s2u,
        sigma2_e: vc.s2e,
        u_hat,
        area_pred,
        mse: Vec::new(),
        fisher_info: vc.info,
        loglik: vc.loglik,
        loglik_trace: vc.trace,
        iterations: vc.iterations,
        converged: vc.converged,
        floor_active: vc.s2u <= VARIANCE_FLOOR || vc.s2e <= VARIANCE_FLOOR,
    };
    fit.mse = prasad_rao_mse(&fit, sample);
    Ok(fit)
}

/// Shrinkage factor `φ_d = σ²_u / (σ²_u + σ²_e / n_d)`; 0 when `n_d = 0`.
pub fn shrinkage(s2u: f64, s2e: f64, n_d: usize) -> f64 {
    if n_d == 0 {
        0.0
    } else {
        s2u / (s2u + s2e / n_d as f64)
    }
}

/// `û_d = φ_d (ȳ_d − x̄_dᵀβ)`, zero for unsampled domains.
pub fn blup_random_effects(beta: &[f64], s2u: f64, s2e: f64, sample: &UnitSample) -> Vec<f64> {
    let (ybar, xbar) = sample.domain_means();
    let counts = sample.domain_counts();
    let p = sample.p;
    (0..sample.n_domains())
        .map(|d| {
            if counts[d] == 0 {
                return 0.0;
            }
            let xb: f64 = (0..p).map(|k| xbar[d * p + k] * beta[k]).sum();
            shrinkage(s2u, s2e, counts[d]) * (ybar[d] - xb)
        })
        .collect()
}

/// EBLUP of the finite-population domain means:
/// `(1/N_d)[Σ_s y + (N_d X̄_d − n_d x̄_d)ᵀβ + (N_d − n_d)û_d]`.
pub fn eblup_area_means(beta: &[f64], u_hat: &[f64], sample: &UnitSample) -> Result<Vec<f64>> {
    let (ybar, xbar) = sample.domain_means();
    let counts = sample.domain_counts();
    let p = sample.p;
    (0..sample.n_domains())
        .map(|d| {
            let big_n = sample.pop_sizes[d];
            let n = counts[d] as f64;
            if !(big_n >= n) || big_n <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "domain {}: population size {big_n} is below sample size {n}",
                    d + 1
                )));
            }
            let xm = sample.pop_mean_row(d);
            let mut total = n * ybar[d];
            for k in 0..p {
                total += (big_n * xm[k] - n * xbar[d * p + k]) * beta[k];
            }
            total += (big_n - n) * u_hat[d];
            Ok(total / big_n)
        })
        .collect()
}

/// `g1 + g2 + 2 g3` with the ML variance-component covariance from the
/// inverse expected information.
pub fn prasad_rao_mse(fit: &MixedFit, sample: &UnitSample) -> Vec<MseComponents> {
    let p = sample.p;
    let (_, xbar) = sample.domain_means();
    let counts = sample.domain_counts();
    let cov = DMatrix::from_row_slice(p, p, &fit.beta_cov);
    let inf = fit.fisher_info;
    let det = inf[0][0] * inf[1][1] - inf[0][1] * inf[1][0];
    let vc_cov = (det > 1e-12 * (inf[0][0] * inf[1][1]).abs()).then(|| {
        // (σ²_e, σ²_u) order
        let v_ee = inf[1][1] / det;
        let v_uu = inf[0][0] / det;
        let c_eu = -inf[0][1] / det;
        (v_ee, v_uu, c_eu)
    });
    let (s2e, s2u) = (fit.sigma2_e, fit.sigma2_u);
    (0..sample.n_domains())
        .map(|d| {
            let nd = counts[d];
            let phi = shrinkage(s2u, s2e, nd);
            let g1 = (1.0 - phi) * s2u;
            let xm = sample.pop_mean_row(d);
            let a = DVector::from_iterator(p, (0..p).map(|k| xm[k] - phi * xbar[d * p + k]));
            let g2 = (a.transpose() * &cov * &a)[0].max(0.0);
            let g3 = if nd == 0 {
                Some(0.0)
            } else {
                vc_cov.map(|(v_ee, v_uu, c_eu)| {
                    let n = nd as f64;
                    let lead = 1.0 / (n * n * (s2u + s2e / n).powi(3));
                    (lead * (s2e * s2e * v_uu + s2u * s2u * v_ee - 2.0 * s2e * s2u * c_eu)).max(0.0)
                })
            };
            MseComponents {
                g1,
                g2,
                g3,
                mse: g3.map(|g| g1 + g2 + 2.0 * g),
            }
        })
        .collect()
}
