//! Nested-error model fitted to linked data `(y*, X)` under exchangeable
//! within-domain linkage errors.
//!
//! Within domain `d` the observed response is a random permutation of the
//! true one with `E(A_d) = G_d = (λ_d − γ_d)I + γ_d 11ᵀ`. G is never formed
//! for fitting; `apply_g` works on the domain sums.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datamodel::{MatchMatrix, RecordFile, TruthDeck};
use crate::error::{Error, Result};
use crate::linalg::{collinear_columns, ols, DiagPlusRankOne};
use crate::sae_core::{
    eblup_area_means, initial_components, FitOptions, UnitSample, VcEngine, VARIANCE_FLOOR,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkErrorSpec {
    pub lambda: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Linked-sample size per domain.
    pub n: Vec<usize>,
    /// Domains whose λ was defaulted to 1 because nothing was audited.
    pub unaudited: Vec<bool>,
}

impl LinkErrorSpec {
    /// λ_d in (0, 1]; forced to 1 where `n_d ≤ 1`.
    pub fn new(lambda: Vec<f64>, n: Vec<usize>) -> Result<Self> {
        if lambda.len() != n.len() {
            return Err(Error::InvalidInput("λ and domain sizes differ in length".into()));
        }
        let mut lam = lambda;
        let mut gamma = vec![0.0; n.len()];
        for d in 0..n.len() {
            if !(lam[d] > 0.0 && lam[d] <= 1.0) {
                return Err(Error::InvalidInput(format!(
                    "domain {}: λ = {} outside (0, 1]",
                    d + 1,
                    lam[d]
                )));
            }
            if n[d] <= 1 {
                lam[d] = 1.0;
            } else {
                gamma[d] = (1.0 - lam[d]) / (n[d] - 1) as f64;
            }
        }
        let unaudited = vec![false; n.len()];
        Ok(Self {
            lambda: lam,
            gamma,
            n,
            unaudited,
        })
    }

    /// No linkage error anywhere.
    pub fn exact(n: Vec<usize>) -> Self {
        Self::new(vec![1.0; n.len()], n).expect("λ = 1 is valid")
    }

    pub fn n_domains(&self) -> usize {
        self.lambda.len()
    }
}

/// Dense `G_d` per domain.
pub fn build_g(spec: &LinkErrorSpec) -> Vec<DMatrix<f64>> {
    (0..spec.n_domains())
        .map(|d| {
            let n = spec.n[d];
            let (l, g) = (spec.lambda[d], spec.gamma[d]);
            DMatrix::from_fn(n, n, |i, k| if i == k { l } else { g })
        })
        .collect()
}

/// `G v` for a vector ordered by `blocks`. G is symmetric, so this is also `Gᵀv`.
pub fn apply_g(spec: &LinkErrorSpec, blocks: &[Vec<usize>], v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for (d, b) in blocks.iter().enumerate() {
        let s: f64 = b.iter().map(|&i| v[i]).sum();
        let (l, g) = (spec.lambda[d], spec.gamma[d]);
        for &i in b {
            out[i] = (l - g) * v[i] + g * s;
        }
    }
    out
}

fn apply_g_rows(spec: &LinkErrorSpec, blocks: &[Vec<usize>], x: &[f64], p: usize) -> Vec<f64> {
    let n = x.len() / p.max(1);
    let mut out = vec![0.0; x.len()];
    for k in 0..p {
        let col: Vec<f64> = (0..n).map(|i| x[i * p + k]).collect();
        let gc = apply_g(spec, blocks, &col);
        for i in 0..n {
            out[i * p + k] = gc[i];
        }
    }
    out
}

/// λ̂_d as the share of audited links in d that are correct. A link is
/// audited when its file-1 record appears in the truth deck.
pub fn estimate_lambda(
    links: &MatchMatrix,
    audit: &TruthDeck,
    dom1: &[usize],
    n_domains: usize,
) -> Result<LinkErrorSpec> {
    let mut n = vec![0usize; n_domains];
    let mut audited = vec![0usize; n_domains];
    let mut correct = vec![0usize; n_domains];
    for (j, j2) in links.links() {
        let d = dom1[j];
        n[d] += 1;
        if let Some(t) = audit.true_partner(j) {
            audited[d] += 1;
            if t == j2 {
                correct[d] += 1;
            }
        }
    }
    let mut lambda = vec![1.0; n_domains];
    let mut unaudited = vec![false; n_domains];
    for d in 0..n_domains {
        if audited[d] == 0 {
            unaudited[d] = n[d] > 0;
            continue;
        }
        let raw = correct[d] as f64 / audited[d] as f64;
        let lo = if n[d] >= 2 { 1.0 / n[d] as f64 + 1e-6 } else { 1.0 };
        lambda[d] = raw.clamp(lo.min(1.0), 1.0);
    }
    let mut spec = LinkErrorSpec::new(lambda, n)?;
    spec.unaudited = unaudited;
    Ok(spec)
}

/// How the permutation variance `Var(A_d f_d)` enters Σ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceForm {
    /// Exact diagonal under the exchangeable model at finite `n_d`.
    #[default]
    Exact,
    /// `(1−λ)(λ(f_i − f̄)² + f̄⁽²⁾ − f̄²)`, the large-`n_d` limit.
    LargeSample,
}

/// Diagonal of `Ṽ` at fitted values `f = Xβ`, floored at 0.
pub fn v_tilde(spec: &LinkErrorSpec, blocks: &[Vec<usize>], f: &[f64], form: VarianceForm) -> Vec<f64> {
    let mut out = vec![0.0; f.len()];
    for (d, b) in blocks.iter().enumerate() {
        let nd = b.len();
        if nd < 2 || spec.lambda[d] >= 1.0 {
            continue;
        }
        let (l, g) = (spec.lambda[d], spec.gamma[d]);
        let s: f64 = b.iter().map(|&i| f[i]).sum();
        let s2: f64 = b.iter().map(|&i| f[i] * f[i]).sum();
        let (m1, m2) = (s / nd as f64, s2 / nd as f64);
        for &i in b {
            let fi = f[i];
            let v = match form {
                VarianceForm::Exact => {
                    let mean = l * fi + g * (s - fi);
                    l * fi * fi + g * (s2 - fi * fi) - mean * mean
                }
                VarianceForm::LargeSample => (1.0 - l) * (l * (fi - m1).powi(2) + m2 - m1 * m1),
            };
            out[i] = v.max(0.0);
        }
    }
    out
}

/// Per-domain Σ_d = σ²_u 11ᵀ + σ²_e I + Ṽ_d.
pub fn build_sigma(
    spec: &LinkErrorSpec,
    sample: &UnitSample,
    beta: &[f64],
    sigma2_u: f64,
    sigma2_e: f64,
    form: VarianceForm,
) -> Vec<DiagPlusRankOne> {
    let blocks = sample.blocks();
    let f = fitted(sample, beta);
    let vt = v_tilde(spec, &blocks, &f, form);
    blocks
        .iter()
        .map(|b| DiagPlusRankOne::new(b.iter().map(|&i| sigma2_e + vt[i]).collect(), sigma2_u))
        .collect()
}

fn fitted(sample: &UnitSample, beta: &[f64]) -> Vec<f64> {
    (0..sample.n())
        .map(|i| sample.x_row(i).iter().zip(beta).map(|(a, b)| a * b).sum())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdjustedOptions {
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub variance_form: VarianceForm,
}

impl Default for AdjustedOptions {
    fn default() -> Self {
        Self {
            fit: FitOptions::default(),
            variance_form: VarianceForm::Exact,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustedFit {
    pub beta_r: Vec<f64>,
    pub beta_blue: Vec<f64>,
    /// `(XᵀGᵀΣ⁻¹GX)⁻¹`, row-major.
    pub beta_cov: Vec<f64>,
    pub sigma2_u: f64,
    pub sigma2_e: f64,
    /// Diagonal of Ṽ per unit at the final β.
    pub v_tilde: Vec<f64>,
    pub u_hat: Vec<f64>,
    pub area_pred: Vec<f64>,
    pub fisher_info: [[f64; 2]; 2],
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub floor_active: bool,
}

/// Ratio-type estimator `(XᵀV⁻¹GX)⁻¹XᵀV⁻¹y*` with the naive V.
pub fn ratio_estimator(
    sample: &UnitSample,
    spec: &LinkErrorSpec,
    sigma2_u: f64,
    sigma2_e: f64,
) -> Result<Vec<f64>> {
    let p = sample.p;
    let blocks = sample.blocks();
    let gx = apply_g_rows(spec, &blocks, &sample.x, p);
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut b = DVector::<f64>::zeros(p);
    for blk in &blocks {
        if blk.is_empty() {
            continue;
        }
        let v = DiagPlusRankOne::new(vec![sigma2_e; blk.len()], sigma2_u);
        let yd: Vec<f64> = blk.iter().map(|&i| sample.y[i]).collect();
        let vy = v.solve(&yd);
        for l in 0..p {
            let col: Vec<f64> = blk.iter().map(|&i| gx[i * p + l]).collect();
            let vc = v.solve(&col);
            for k in 0..p {
                a[(k, l)] += blk.iter().zip(&vc).map(|(&i, w)| sample.x[i * p + k] * w).sum::<f64>();
            }
        }
        for k in 0..p {
            b[k] += blk.iter().zip(&vy).map(|(&i, w)| sample.x[i * p + k] * w).sum::<f64>();
        }
    }
    let bad = collinear_columns(&(a.transpose() * &a));
    if !bad.is_empty() {
        return Err(Error::SingularDesign {
            columns: bad
                .iter()
                .map(|&k| sample.covariate_names.get(k).cloned().unwrap_or_else(|| format!("x{k}")))
                .collect(),
        });
    }
    let sol = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Numerical("ratio estimator system is singular".into()))?;
    Ok(sol.iter().copied().collect())
}

/// `β̃_BLUE = (XᵀGᵀΣ⁻¹GX)⁻¹XᵀGᵀΣ⁻¹y*` with Σ built at `beta_current`.
/// Returns the estimate and its covariance (row-major).
pub fn blue(
    sample: &UnitSample,
    spec: &LinkErrorSpec,
    beta_current: &[f64],
    sigma2_u: f64,
    sigma2_e: f64,
    form: VarianceForm,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let blocks = sample.blocks();
    let gx = apply_g_rows(spec, &blocks, &sample.x, sample.p);
    let vt = v_tilde(spec, &blocks, &fitted(sample, beta_current), form);
    let engine = VcEngine {
        y: &sample.y,
        design: &gx,
        p: sample.p,
        blocks: &blocks,
        extra: Some(&vt),
        names: &sample.covariate_names,
    };
    let (b, cov) = engine.gls(sigma2_e, sigma2_u)?;
    Ok((b.iter().copied().collect(), cov.transpose().iter().copied().collect()))
}

/// Adjusted ML fit: β̃_R initialiser, then alternating Σ(β) rebuilds, BLUE
/// β and scoring steps on `(σ²_e, σ²_u)` under `y* ~ N(GXβ, Σ)`.
pub fn fit_adjusted(sample: &UnitSample, spec: &LinkErrorSpec, opts: &AdjustedOptions) -> Result<AdjustedFit> {
    let n = sample.n();
    let p = sample.p;
    if spec.n_domains() != sample.n_domains() {
        return Err(Error::InvalidInput("link-error spec and sample disagree on D".into()));
    }
    if sample.domain_counts() != spec.n {
        return Err(Error::InvalidInput("link-error spec sizes differ from the linked sample".into()));
    }
    if n <= p + 2 {
        return Err(Error::InvalidInput(format!("need more than p + 2 = {} units, got {n}", p + 2)));
    }
    let blocks = sample.blocks();
    let gx = apply_g_rows(spec, &blocks, &sample.x, p);
    let beta_ols = ols(&gx, p, &sample.y, &sample.covariate_names)?;
    let (mut s2e, mut s2u) = initial_components(
        &UnitSample {
            x: gx.clone(),
            ..sample.clone()
        },
        &beta_ols,
    );
    let beta_r = ratio_estimator(sample, spec, s2u, s2e)?;
    let mut beta = DVector::from_vec(beta_r.clone());
    let form = opts.variance_form;
    fn engine_at<'a>(s: &'a UnitSample, gx: &'a [f64], blocks: &'a [Vec<usize>], vt: &'a [f64]) -> VcEngine<'a> {
        VcEngine {
            y: &s.y,
            design: gx,
            p: s.p,
            blocks,
            extra: Some(vt),
            names: &s.covariate_names,
        }
    }
    let mut vt = v_tilde(spec, &blocks, &fitted(sample, beta.as_slice()), form);
    let mut trace = vec![engine_at(sample, &gx, &blocks, &vt).loglik(&beta, s2e, s2u)];
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=opts.fit.max_iter {
        iterations = it;
        let engine = engine_at(sample, &gx, &blocks, &vt);
        let (ne, nu, _) = engine.scoring_step(&beta, s2e, s2u);
        let (nb, _) = engine.gls(ne, nu)?;
        let mut change = rel(s2e, ne).max(rel(s2u, nu));
        for k in 0..p {
            change = change.max(rel(beta[k], nb[k]));
        }
        s2e = ne;
        s2u = nu;
        beta = nb;
        vt = v_tilde(spec, &blocks, &fitted(sample, beta.as_slice()), form);
        trace.push(engine_at(sample, &gx, &blocks, &vt).loglik(&beta, s2e, s2u));
        if change < opts.fit.tol {
            converged = true;
            break;
        }
    }
    let engine = engine_at(sample, &gx, &blocks, &vt);
    let (beta, cov) = engine.gls(s2e, s2u)?;
    let m = engine.moments(&beta, s2e, s2u);
    let u_hat = engine.random_effects(&beta, s2e, s2u);
    let beta_blue: Vec<f64> = beta.iter().copied().collect();
    let area_pred = adjusted_eblup(&beta_blue, &u_hat, sample)?;
    Ok(AdjustedFit {
        beta_r,
        beta_blue,
        beta_cov: cov.transpose().iter().copied().collect(),
        sigma2_u: s2u,
        sigma2_e: s2e,
        v_tilde: vt,
        u_hat,
        area_pred,
        fisher_info: m.info,
        loglik_trace: trace,
        iterations,
        converged,
        floor_active: s2u <= VARIANCE_FLOOR || s2e <= VARIANCE_FLOOR,
    })
}

fn rel(old: f64, new: f64) -> f64 {
    (new - old).abs() / old.abs().max(new.abs()).max(VARIANCE_FLOOR)
}

/// Adjusted EBLUP of the domain means. Because G preserves domain sums the
/// sampled part of `GXβ` totals `Σ_s x_iᵀβ`, so the population-total
/// shortcut reduces to the unadjusted formula with the adjusted β and û.
pub fn adjusted_eblup(beta_blue: &[f64], u_hat: &[f64], sample: &UnitSample) -> Result<Vec<f64>> {
    eblup_area_means(beta_blue, u_hat, sample)
}

/// Unit sample of linked pairs: the response from the file-1 record, an
/// intercept plus the covariates from its file-2 partner, and the file-1
/// domain. `pop_cov_means` is `D × q` without the intercept column.
pub fn assemble_pairs(
    f1: &RecordFile,
    f2: &RecordFile,
    pairs: impl IntoIterator<Item = (usize, usize)>,
    pop_sizes: &[f64],
    pop_cov_means: &[f64],
) -> Result<UnitSample> {
    let y1 = f1
        .response()
        .ok_or_else(|| Error::InvalidInput("file 1 carries no response column".into()))?;
    let q = f2.n_covariates();
    if q == 0 {
        return Err(Error::InvalidInput("file 2 carries no covariates".into()));
    }
    let nd = pop_sizes.len();
    if pop_cov_means.len() != nd * q {
        return Err(Error::InvalidInput("population covariate means have the wrong shape".into()));
    }
    let (mut y, mut x, mut dom) = (Vec::new(), Vec::new(), Vec::new());
    for (j, j2) in pairs {
        y.push(y1[j]);
        x.push(1.0);
        x.extend_from_slice(f2.covariate_row(j2).expect("covariates present"));
        dom.push(f1.domain(j));
    }
    let mut names = vec!["(Intercept)".to_string()];
    names.extend(f2.covariate_names().iter().cloned());
    let means = (0..nd)
        .flat_map(|d| std::iter::once(1.0).chain(pop_cov_means[d * q..(d + 1) * q].iter().copied()))
        .collect();
    UnitSample::new(y, x, dom, pop_sizes.to_vec(), means, names)
}

/// [`assemble_pairs`] over the links of a matching.
pub fn assemble_linked(
    f1: &RecordFile,
    f2: &RecordFile,
    links: &MatchMatrix,
    pop_sizes: &[f64],
    pop_cov_means: &[f64],
) -> Result<UnitSample> {
    assemble_pairs(f1, f2, links.links(), pop_sizes, pop_cov_means)
}
