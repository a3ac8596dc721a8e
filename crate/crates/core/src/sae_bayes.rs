//! Hierarchical Bayes unit-level model: flat prior on β, inverse gamma on
//! σ²_e, and either a uniform prior on σ_u or an inverse gamma on σ²_u.
//!
//! The Gibbs sampler works on per-domain sufficient statistics, so a sweep
//! costs O(D p²) regardless of the number of units. Each sweep draws β with
//! the random effects integrated out, then u, σ²_e and σ²_u.
//!
//! Linked data enter in two ways. Without feedback the linkage chain runs on
//! key fields alone and a short warm-started Gibbs run is attached to every
//! retained matching. With feedback the regression likelihood of each
//! candidate pair joins the acceptance ratio of the matching moves.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{KeyFieldSchema, RecordFile};
use crate::error::{Error, Result};
use crate::linalg::{collinear_columns, ols};
use crate::linkage_bayes::{run_mcmc_coupled, CPrior, Coupling, LinkageConfig, LinkagePosterior};
use crate::rng::{derive_seed, rng_from_seed, SimRng};
use crate::sae_core::{initial_components, shrinkage, UnitSample};
use crate::sae_linked::assemble_pairs;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SigmaUPrior {
    /// σ_u uniform on (0, U]. `None` means 10⁶ times the sample SD of y.
    Uniform { upper: Option<f64> },
    /// σ²_u ~ IG(a, b).
    InvGamma { a: f64, b: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaePrior {
    #[serde(default = "default_ig")]
    pub a_e: f64,
    #[serde(default = "default_ig")]
    pub b_e: f64,
    #[serde(default = "default_sigma_u")]
    pub sigma_u: SigmaUPrior,
}

fn default_ig() -> f64 {
    0.01
}

fn default_sigma_u() -> SigmaUPrior {
    SigmaUPrior::Uniform { upper: None }
}

impl Default for SaePrior {
    fn default() -> Self {
        Self {
            a_e: default_ig(),
            b_e: default_ig(),
            sigma_u: default_sigma_u(),
        }
    }
}

impl SaePrior {
    pub fn validate(&self) -> Result<()> {
        if !(self.a_e > 0.0 && self.b_e > 0.0) {
            return Err(Error::Config("σ²_e prior needs a_e, b_e > 0".into()));
        }
        match self.sigma_u {
            SigmaUPrior::Uniform { upper: Some(u) } if !(u > 0.0) => {
                Err(Error::Config("σ_u upper bound must be positive".into()))
            }
            SigmaUPrior::InvGamma { a, b } if !(a > 0.0 && b > 0.0) => {
                Err(Error::Config("σ²_u prior needs a, b > 0".into()))
            }
            _ => Ok(()),
        }
    }

    fn resolve(&self, y: &[f64]) -> Resolved {
        let su = match self.sigma_u {
            SigmaUPrior::Uniform { upper } => {
                let u = upper.unwrap_or_else(|| {
                    let n = y.len() as f64;
                    let m = y.iter().sum::<f64>() / n;
                    let sd = (y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
                    1e6 * sd.max(f64::MIN_POSITIVE)
                });
                ResolvedU::Uniform(u)
            }
            SigmaUPrior::InvGamma { a, b } => ResolvedU::InvGamma(a, b),
        };
        Resolved {
            a_e: self.a_e,
            b_e: self.b_e,
            u: su,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum ResolvedU {
    Uniform(f64),
    InvGamma(f64, f64),
}

#[derive(Debug, Clone, Copy)]
struct Resolved {
    a_e: f64,
    b_e: f64,
    u: ResolvedU,
}

/// Posterior draws, stored flat (`draw × p`, `draw × D`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaePosterior {
    pub p: usize,
    pub n_domains: usize,
    pub covariate_names: Vec<String>,
    pub beta: Vec<f64>,
    pub sigma2_u: Vec<f64>,
    pub sigma2_e: Vec<f64>,
    pub u: Vec<f64>,
    /// `μ_d = X̄_dᵀβ + u_d` per draw.
    pub mu: Vec<f64>,
    /// Index of the linkage draw each SAE draw was attached to.
    pub c_id: Option<Vec<usize>>,
    pub warnings: Vec<String>,
}

impl SaePosterior {
    fn new(p: usize, n_domains: usize, names: Vec<String>) -> Self {
        Self {
            p,
            n_domains,
            covariate_names: names,
            beta: Vec::new(),
            sigma2_u: Vec::new(),
            sigma2_e: Vec::new(),
            u: Vec::new(),
            mu: Vec::new(),
            c_id: None,
            warnings: Vec::new(),
        }
    }

    pub fn n_draws(&self) -> usize {
        self.sigma2_e.len()
    }

    fn push(&mut self, st: &SaeState, pop_means: &[f64]) {
        self.beta.extend_from_slice(&st.beta);
        self.sigma2_u.push(st.s2u);
        self.sigma2_e.push(st.s2e);
        self.u.extend_from_slice(&st.u);
        for d in 0..self.n_domains {
            let xb: f64 = (0..self.p).map(|k| pop_means[d * self.p + k] * st.beta[k]).sum();
            self.mu.push(xb + st.u[d]);
        }
    }

    fn column_stats(v: &[f64], width: usize) -> (Vec<f64>, Vec<f64>) {
        let n = v.len() / width.max(1);
        let mut mean = vec![0.0; width];
        for r in 0..n {
            for k in 0..width {
                mean[k] += v[r * width + k] / n as f64;
            }
        }
        let mut var = vec![0.0; width];
        for r in 0..n {
            for k in 0..width {
                var[k] += (v[r * width + k] - mean[k]).powi(2) / (n as f64 - 1.0).max(1.0);
            }
        }
        (mean, var.into_iter().map(f64::sqrt).collect())
    }

    pub fn beta_mean(&self) -> Vec<f64> {
        Self::column_stats(&self.beta, self.p).0
    }

    pub fn beta_sd(&self) -> Vec<f64> {
        Self::column_stats(&self.beta, self.p).1
    }

    pub fn mu_mean(&self) -> Vec<f64> {
        Self::column_stats(&self.mu, self.n_domains).0
    }

    pub fn mu_sd(&self) -> Vec<f64> {
        Self::column_stats(&self.mu, self.n_domains).1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct SaeState {
    pub beta: Vec<f64>,
    pub u: Vec<f64>,
    pub s2e: f64,
    pub s2u: f64,
}

/// Per-domain sufficient statistics.
struct Stats {
    p: usize,
    n: Vec<f64>,
    sy: Vec<f64>,
    syy: Vec<f64>,
    sx: Vec<f64>,
    sxy: Vec<f64>,
    sxx: Vec<f64>,
}

impl Stats {
    fn new(p: usize, nd: usize) -> Self {
        Self {
            p,
            n: vec![0.0; nd],
            sy: vec![0.0; nd],
            syy: vec![0.0; nd],
            sx: vec![0.0; nd * p],
            sxy: vec![0.0; nd * p],
            sxx: vec![0.0; nd * p * p],
        }
    }

    fn add(&mut self, y: f64, x: &[f64], d: usize) {
        let p = self.p;
        self.n[d] += 1.0;
        self.sy[d] += y;
        self.syy[d] += y * y;
        for k in 0..p {
            self.sx[d * p + k] += x[k];
            self.sxy[d * p + k] += x[k] * y;
            for l in 0..p {
                self.sxx[(d * p + k) * p + l] += x[k] * x[l];
            }
        }
    }

    fn from_sample(s: &UnitSample) -> Self {
        let mut st = Self::new(s.p, s.n_domains());
        for i in 0..s.n() {
            st.add(s.y[i], s.x_row(i), s.domains[i]);
        }
        st
    }

    fn n_domains(&self) -> usize {
        self.n.len()
    }

    fn total_n(&self) -> f64 {
        self.n.iter().sum()
    }
}

fn inv_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    let g: f64 = Gamma::new(shape, 1.0 / rate).expect("valid gamma").sample(rng);
    1.0 / g
}

/// β | σ²_e, σ²_u with u integrated out: `N(GLS, (XᵀV⁻¹X)⁻¹)`.
fn draw_beta_stats<R: Rng + ?Sized>(st: &Stats, s2e: f64, s2u: f64, rng: &mut R) -> Result<Vec<f64>> {
    let p = st.p;
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut b = DVector::<f64>::zeros(p);
    for d in 0..st.n_domains() {
        if st.n[d] == 0.0 {
            continue;
        }
        let c = s2u / (s2e + st.n[d] * s2u);
        for k in 0..p {
            b[k] += (st.sxy[d * p + k] - c * st.sx[d * p + k] * st.sy[d]) / s2e;
            for l in 0..p {
                a[(k, l)] += (st.sxx[(d * p + k) * p + l] - c * st.sx[d * p + k] * st.sx[d * p + l]) / s2e;
            }
        }
    }
    let chol = match a.clone().cholesky() {
        Some(c) if collinear_columns(&a).is_empty() => c,
        _ => {
            let bad = collinear_columns(&a);
            return Err(Error::SingularDesign {
                columns: bad.iter().map(|k| format!("x{k}")).collect(),
            });
        }
    };
    let mean = chol.solve(&b);
    let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let w = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    Ok((mean + w).iter().copied().collect())
}

/// Log density of τ = log σ_u under the uniform prior on σ_u.
fn log_tau_density(tau: f64, nd: f64, s: f64) -> f64 {
    -(nd - 1.0) * tau - 0.5 * s * (-2.0 * tau).exp()
}

/// Slice sampler on τ ≤ log U with stepping out.
fn slice_tau<R: Rng + ?Sized>(tau0: f64, upper: f64, nd: f64, s: f64, rng: &mut R) -> f64 {
    let f = |t: f64| log_tau_density(t, nd, s);
    let level = f(tau0) + rng.random::<f64>().ln();
    let w = 1.0;
    let mut lo = tau0 - w * rng.random::<f64>();
    let mut hi = (lo + w).min(upper);
    for _ in 0..100 {
        if f(lo) <= level {
            break;
        }
        lo -= w;
    }
    for _ in 0..100 {
        if hi >= upper || f(hi) <= level {
            break;
        }
        hi = (hi + w).min(upper);
    }
    loop {
        let t = lo + (hi - lo) * rng.random::<f64>();
        if f(t) > level {
            return t;
        }
        if t < tau0 {
            lo = t;
        } else {
            hi = t;
        }
        if hi - lo < 1e-14 {
            return tau0;
        }
    }
}

fn sweep<R: Rng + ?Sized>(st: &Stats, prior: &Resolved, s: &mut SaeState, rng: &mut R) -> Result<()> {
    let p = st.p;
    let nd = st.n_domains();
    s.beta = draw_beta_stats(st, s.s2e, s.s2u, rng)?;
    for d in 0..nd {
        let xb: f64 = (0..p).map(|k| st.sx[d * p + k] * s.beta[k]).sum();
        let (mean, var) = if st.n[d] > 0.0 {
            let phi = shrinkage(s.s2u, s.s2e, st.n[d] as usize);
            (phi * (st.sy[d] - xb) / st.n[d], (1.0 - phi) * s.s2u)
        } else {
            (0.0, s.s2u)
        };
        s.u[d] = mean + var.sqrt() * rng.sample::<f64, _>(StandardNormal);
    }
    let mut sse = 0.0;
    for d in 0..nd {
        if st.n[d] == 0.0 {
            continue;
        }
        let u = s.u[d];
        let mut bxy = 0.0;
        let mut bx = 0.0;
        let mut bxxb = 0.0;
        for k in 0..p {
            bxy += s.beta[k] * st.sxy[d * p + k];
            bx += s.beta[k] * st.sx[d * p + k];
            for l in 0..p {
                bxxb += s.beta[k] * st.sxx[(d * p + k) * p + l] * s.beta[l];
            }
        }
        sse += st.syy[d] - 2.0 * bxy - 2.0 * u * st.sy[d] + bxxb + 2.0 * u * bx + st.n[d] * u * u;
    }
    let sse = sse.max(0.0);
    s.s2e = inv_gamma(prior.a_e + 0.5 * st.total_n(), prior.b_e + 0.5 * sse, rng);
    let ss: f64 = s.u.iter().map(|u| u * u).sum();
    s.s2u = match prior.u {
        ResolvedU::InvGamma(a, b) => inv_gamma(a + 0.5 * nd as f64, b + 0.5 * ss, rng),
        ResolvedU::Uniform(upper) => {
            // σ²_u | u is IG((D−1)/2, S/2) truncated to (0, U²]
            let shape = 0.5 * (nd as f64 - 1.0);
            let mut out = None;
            for _ in 0..64 {
                let v = inv_gamma(shape, 0.5 * ss.max(1e-300), rng);
                if v <= upper * upper {
                    out = Some(v);
                    break;
                }
            }
            out.unwrap_or_else(|| {
                let tau0 = (0.5 * s.s2u.ln()).min(upper.ln());
                let t = slice_tau(tau0, upper.ln(), nd as f64, ss, rng);
                (2.0 * t).exp()
            })
        }
    };
    Ok(())
}

fn initial_state(sample: &UnitSample) -> Result<SaeState> {
    let beta = ols(&sample.x, sample.p, &sample.y, &sample.covariate_names)?;
    let (s2e, s2u) = initial_components(sample, &beta);
    let b: Vec<f64> = beta.iter().copied().collect();
    let u = crate::sae_core::blup_random_effects(&b, s2u, s2e, sample);
    Ok(SaeState { beta: b, u, s2e, s2u })
}

fn check_domains(nd: usize, prior: &SaePrior, warnings: &mut Vec<String>) -> Result<()> {
    if nd < 2 {
        return Err(Error::InvalidInput("the Bayesian model needs at least two domains".into()));
    }
    if matches!(prior.sigma_u, SigmaUPrior::Uniform { .. }) && nd <= 3 {
        warnings.push(format!(
            "uniform prior on σ_u with only {nd} domains: the posterior may be improper"
        ));
    }
    Ok(())
}

/// Gibbs sampler on fully linked data.
pub fn gibbs_sae(sample: &UnitSample, prior: &SaePrior, n_burn: usize, n_draws: usize, seed: u64) -> Result<SaePosterior> {
    prior.validate()?;
    let nd = sample.n_domains();
    let mut post = SaePosterior::new(sample.p, nd, sample.covariate_names.clone());
    check_domains(nd, prior, &mut post.warnings)?;
    let resolved = prior.resolve(&sample.y);
    let stats = Stats::from_sample(sample);
    let mut state = initial_state(sample)?;
    let mut rng = rng_from_seed(seed);
    for it in 0..n_burn + n_draws {
        sweep(&stats, &resolved, &mut state, &mut rng)?;
        if it >= n_burn {
            post.push(&state, &sample.pop_means);
        }
    }
    Ok(post)
}

/// One draw of β from its conditional given `(σ²_e, σ²_u)` with u
/// integrated out. Exposed for checking the sampler against closed forms.
pub fn draw_beta(sample: &UnitSample, s2e: f64, s2u: f64, rng: &mut SimRng) -> Result<Vec<f64>> {
    draw_beta_stats(&Stats::from_sample(sample), s2e, s2u, rng)
}

/// The two files and population information a linked analysis needs.
#[derive(Debug, Clone, Copy)]
pub struct LinkedInput<'a> {
    /// Carries the response.
    pub f1: &'a RecordFile,
    /// Carries the covariates.
    pub f2: &'a RecordFile,
    pub n_domains: usize,
    pub schema: &'a [KeyFieldSchema],
    pub pop_sizes: &'a [f64],
    /// `D × q`, without the intercept column.
    pub pop_cov_means: &'a [f64],
}

impl LinkedInput<'_> {
    fn sample(&self, forward: &[Option<u32>]) -> Result<UnitSample> {
        assemble_pairs(
            self.f1,
            self.f2,
            forward.iter().enumerate().filter_map(|(i, j)| j.map(|j| (i, j as usize))),
            self.pop_sizes,
            self.pop_cov_means,
        )
    }

    fn names(&self) -> Vec<String> {
        let mut n = vec!["(Intercept)".to_string()];
        n.extend(self.f2.covariate_names().iter().cloned());
        n
    }
}

fn constrained(cfg: &LinkageConfig) -> LinkageConfig {
    let mut c = cfg.clone();
    c.constrained_subset = true;
    c
}

/// Key-fields-only linkage; `inner_len` warm-started SAE sweeps are run on
/// each retained matching and the last state is kept.
pub fn run_nonfeedback(
    input: &LinkedInput<'_>,
    prior: &SaePrior,
    linkage_cfg: &LinkageConfig,
    inner_len: usize,
    seed: u64,
) -> Result<(SaePosterior, LinkagePosterior)> {
    prior.validate()?;
    if inner_len == 0 {
        return Err(Error::Config("inner Gibbs length must be at least 1".into()));
    }
    let cfg = constrained(linkage_cfg);
    let nd = input.n_domains;
    let mut post = SaePosterior::new(input.f2.n_covariates() + 1, nd, input.names());
    check_domains(nd, prior, &mut post.warnings)?;
    let y = input
        .f1
        .response()
        .ok_or_else(|| Error::InvalidInput("file 1 carries no response column".into()))?;
    let resolved = prior.resolve(y);
    let mut link_rng = rng_from_seed(derive_seed(seed, 0));
    let mut sae_rng = rng_from_seed(derive_seed(seed, 1));
    let mut state: Option<SaeState> = None;
    let mut ids = Vec::new();
    let t = input.f1.len();
    let link_post = run_mcmc_coupled(
        input.f1,
        input.f2,
        nd,
        input.schema,
        &CPrior::point_mass(t, t),
        &cfg,
        &mut link_rng,
        &mut crate::linkage_bayes::NoCoupling,
        |s, _| {
            let sample = input.sample(s.forward)?;
            let st = match state.as_mut() {
                Some(st) => st,
                None => state.insert(initial_state(&sample)?),
            };
            let stats = Stats::from_sample(&sample);
            for _ in 0..inner_len {
                sweep(&stats, &resolved, st, &mut sae_rng)?;
            }
            ids.push(ids.len());
            post.push(st, &sample.pop_means);
            Ok(())
        },
    )?;
    post.c_id = Some(ids);
    Ok((post, link_post))
}

/// Fixed regression parameters for the feedback chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeParams {
    pub beta: Vec<f64>,
    pub u: Vec<f64>,
    pub sigma2_e: f64,
    pub sigma2_u: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackOptions {
    /// Scales the regression term in the matching moves; 0 switches the
    /// feedback off.
    #[serde(default = "one")]
    pub weight: f64,
    /// Hold the regression parameters at these values instead of sampling.
    #[serde(default)]
    pub fixed: Option<SaeParams>,
}

fn one() -> f64 {
    1.0
}

impl Default for FeedbackOptions {
    fn default() -> Self {
        Self {
            weight: 1.0,
            fixed: None,
        }
    }
}

struct Feedback<'a> {
    input: &'a LinkedInput<'a>,
    y: &'a [f64],
    prior: Resolved,
    weight: f64,
    fixed: bool,
    state: Option<SaeState>,
    pop_means: Vec<f64>,
}

impl Feedback<'_> {
    fn fitted(&self, st: &SaeState, j: usize) -> f64 {
        let x = self.input.f2.covariate_row(j).expect("covariates present");
        st.beta[0] + x.iter().zip(&st.beta[1..]).map(|(a, b)| a * b).sum::<f64>()
    }
}

impl Coupling for Feedback<'_> {
    fn init(&mut self, forward: &[Option<u32>]) -> Result<()> {
        let sample = self.input.sample(forward)?;
        self.pop_means = sample.pop_means.clone();
        if !self.fixed {
            self.state = Some(initial_state(&sample)?);
        }
        Ok(())
    }

    fn log_lik(&self, i: usize, j: usize) -> f64 {
        if self.weight == 0.0 {
            return 0.0;
        }
        let st = self.state.as_ref().expect("initialised");
        let r = self.y[i] - self.fitted(st, j) - st.u[self.input.f1.domain(i)];
        -self.weight * r * r / (2.0 * st.s2e)
    }

    fn update(&mut self, forward: &[Option<u32>], rng: &mut SimRng) -> Result<()> {
        if self.fixed {
            return Ok(());
        }
        let sample = self.input.sample(forward)?;
        let stats = Stats::from_sample(&sample);
        sweep(&stats, &self.prior, self.state.as_mut().expect("initialised"), rng)
    }
}

/// Joint chain over the matching and the SAE parameters.
pub fn run_feedback(
    input: &LinkedInput<'_>,
    prior: &SaePrior,
    linkage_cfg: &LinkageConfig,
    opts: &FeedbackOptions,
    seed: u64,
) -> Result<(SaePosterior, LinkagePosterior)> {
    prior.validate()?;
    let cfg = constrained(linkage_cfg);
    let nd = input.n_domains;
    let mut post = SaePosterior::new(input.f2.n_covariates() + 1, nd, input.names());
    check_domains(nd, prior, &mut post.warnings)?;
    let y = input
        .f1
        .response()
        .ok_or_else(|| Error::InvalidInput("file 1 carries no response column".into()))?;
    let mut coupling = Feedback {
        input,
        y,
        prior: prior.resolve(y),
        weight: opts.weight,
        fixed: opts.fixed.is_some(),
        state: opts.fixed.as_ref().map(|f| SaeState {
            beta: f.beta.clone(),
            u: f.u.clone(),
            s2e: f.sigma2_e,
            s2u: f.sigma2_u,
        }),
        pop_means: Vec::new(),
    };
    if let Some(f) = &opts.fixed {
        if f.beta.len() != post.p || f.u.len() != nd || !(f.sigma2_e > 0.0) {
            return Err(Error::Config("fixed regression parameters have the wrong shape".into()));
        }
    }
    let mut rng = rng_from_seed(seed);
    let t = input.f1.len();
    let link_post = run_mcmc_coupled(
        input.f1,
        input.f2,
        nd,
        input.schema,
        &CPrior::point_mass(t, t),
        &cfg,
        &mut rng,
        &mut coupling,
        |_, c| {
            post.push(c.state.as_ref().expect("initialised"), &c.pop_means);
            Ok(())
        },
    )?;
    Ok((post, link_post))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::Normal;

    fn simulate(seed: u64, sizes: &[usize], beta: [f64; 2], su: f64, se: f64) -> UnitSample {
        let mut rng = rng_from_seed(seed);
        let z = Normal::new(0.0, 1.0).unwrap();
        let (mut y, mut x, mut dom) = (vec![], vec![], vec![]);
        for (d, &n) in sizes.iter().enumerate() {
            let u = su * z.sample(&mut rng);
            for _ in 0..n {
                let xi = 10.0 + 3.0 * z.sample(&mut rng);
                y.push(beta[0] + beta[1] * xi + u + se * z.sample(&mut rng));
                x.extend([1.0, xi]);
                dom.push(d);
            }
        }
        let nd = sizes.len();
        UnitSample::new(
            y,
            x,
            dom,
            vec![1000.0; nd],
            (0..nd).flat_map(|_| [1.0, 10.0]).collect(),
            vec!["c".into(), "x".into()],
        )
        .unwrap()
    }

    #[test]
    fn draws_are_valid_and_mu_is_deterministic() {
        let s = simulate(1, &[5, 8, 12, 3, 20], [2.0, 0.5], 1.0, 1.0);
        let post = gibbs_sae(&s, &SaePrior::default(), 200, 500, 9).unwrap();
        assert_eq!(post.n_draws(), 500);
        assert!(post.sigma2_e.iter().all(|&v| v > 0.0 && v.is_finite()));
        for r in 0..post.n_draws() {
            for d in 0..5 {
                let b = &post.beta[r * 2..r * 2 + 2];
                let mu = b[0] + 10.0 * b[1] + post.u[r * 5 + d];
                assert!((mu - post.mu[r * 5 + d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gelman_bound_is_respected() {
        let s = simulate(2, &[6, 6, 6, 6], [1.0, 1.0], 2.0, 0.5);
        let prior = SaePrior {
            sigma_u: SigmaUPrior::Uniform { upper: Some(0.3) },
            ..SaePrior::default()
        };
        let post = gibbs_sae(&s, &prior, 100, 400, 3).unwrap();
        assert!(post.sigma2_u.iter().all(|&v| v > 0.0 && v.sqrt() <= 0.3 + 1e-12));
    }

    #[test]
    fn few_domains_warn() {
        let s = simulate(3, &[10, 10, 10], [1.0, 1.0], 1.0, 1.0);
        let post = gibbs_sae(&s, &SaePrior::default(), 10, 10, 1).unwrap();
        assert_eq!(post.warnings.len(), 1);
        let one = simulate(3, &[10], [1.0, 1.0], 1.0, 1.0);
        assert!(gibbs_sae(&one, &SaePrior::default(), 10, 10, 1).is_err());
    }

    #[test]
    fn reproducible() {
        let s = simulate(4, &[5, 9, 7, 11], [1.0, 2.0], 1.0, 1.0);
        let a = gibbs_sae(&s, &SaePrior::default(), 50, 100, 77).unwrap();
        let b = gibbs_sae(&s, &SaePrior::default(), 50, 100, 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn slice_sampler_targets_tau_density() {
        // unbounded above in practice: compare with the IG((D−1)/2, S/2) mean
        let (nd, s) = (8.0, 5.0);
        let mut rng = rng_from_seed(5);
        let mut tau = 0.0;
        let mut acc = 0.0;
        let n = 200_000;
        for _ in 0..n {
            tau = slice_tau(tau, 50.0, nd, s, &mut rng);
            acc += (2.0 * tau).exp();
        }
        let want = 0.5 * s / (0.5 * (nd - 1.0) - 1.0);
        assert!((acc / n as f64 - want).abs() < 0.03 * want, "{} vs {want}", acc / n as f64);
    }
}
