//! One replication: sample, link both ways, fit every configured estimator.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::population::{generate_population, Population, PopulationSpec};
use super::report::{aggregate, ReplicationReport};
use crate::datamodel::{link_error_rates, LinkErrorRates, MatchMatrix, RecordFile, TruthDeck};
use crate::error::{Error, Result};
use crate::linkage_bayes::{point_estimate, select_keys, LinkageConfig};
use crate::linkage_fs::{self, FsConfig};
use crate::rng::{derive_seed, rng_from_seed};
use crate::sae_bayes::{gibbs_sae, run_feedback, run_nonfeedback, FeedbackOptions, LinkedInput, SaePosterior, SaePrior};
use crate::sae_core::{eblup_area_means, fit_ml, FitOptions, UnitSample};
use crate::sae_linked::{adjusted_eblup, assemble_linked, assemble_pairs, estimate_lambda, fit_adjusted, AdjustedOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Estimator {
    A,
    B,
    C,
    D,
    #[serde(rename = "A*")]
    AStar,
    #[serde(rename = "C*")]
    CStar,
    E,
    F,
    #[serde(rename = "sample-mean")]
    SampleMean,
}

impl Estimator {
    pub const ALL: [Estimator; 9] = [
        Estimator::A,
        Estimator::B,
        Estimator::C,
        Estimator::D,
        Estimator::AStar,
        Estimator::CStar,
        Estimator::E,
        Estimator::F,
        Estimator::SampleMean,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Estimator::A => "Estimates A",
            Estimator::B => "Estimates B",
            Estimator::C => "Estimates C",
            Estimator::D => "Estimates D",
            Estimator::AStar => "Estimates A*",
            Estimator::CStar => "Estimates C*",
            Estimator::E => "Estimates E",
            Estimator::F => "Estimates F",
            Estimator::SampleMean => "Sample mean",
        }
    }

    pub fn is_bayesian(self) -> bool {
        matches!(self, Estimator::AStar | Estimator::CStar | Estimator::E | Estimator::F)
    }

    /// Fits a regression (every estimator but the sample mean).
    pub fn has_coefficients(self) -> bool {
        self != Estimator::SampleMean
    }
}

/// MCMC budgets for the Bayesian estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BayesBudget {
    pub linkage_burn: usize,
    pub linkage_draws: usize,
    pub linkage_thin: usize,
    pub inner_len: usize,
    pub sae_burn: usize,
    pub sae_draws: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    0.1
}

impl Default for BayesBudget {
    fn default() -> Self {
        Self {
            linkage_burn: 500,
            linkage_draws: 2000,
            linkage_thin: 10,
            inner_len: 100,
            sae_burn: 500,
            sae_draws: 2000,
            epsilon: default_epsilon(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default)]
    pub population: PopulationSpec,
    pub replications: usize,
    pub n_sample: usize,
    #[serde(default = "all_estimators")]
    pub estimators: Vec<Estimator>,
    #[serde(default = "default_threshold")]
    pub fs_threshold: f64,
    #[serde(default)]
    pub bayes: BayesBudget,
    #[serde(default)]
    pub prior: SaePrior,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub adjusted: AdjustedOptions,
}

fn all_estimators() -> Vec<Estimator> {
    Estimator::ALL.to_vec()
}

fn default_threshold() -> f64 {
    0.5
}

impl SimulationConfig {
    pub fn new(population: PopulationSpec, replications: usize, n_sample: usize) -> Self {
        Self {
            population,
            replications,
            n_sample,
            estimators: all_estimators(),
            fs_threshold: default_threshold(),
            bayes: BayesBudget::default(),
            prior: SaePrior::default(),
            fit: FitOptions::default(),
            adjusted: AdjustedOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.population.validate()?;
        self.prior.validate()?;
        if self.replications == 0 {
            return Err(Error::Config("at least one replication is required".into()));
        }
        if self.n_sample == 0 || self.n_sample > self.population.total_size() {
            return Err(Error::Config(format!(
                "sample size {} must lie in 1..={}",
                self.n_sample,
                self.population.total_size()
            )));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("no estimators selected".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(e) = self.estimators.iter().find(|e| !seen.insert(**e)) {
            return Err(Error::Config(format!("estimator {} listed twice", e.label())));
        }
        if !(self.fs_threshold > 0.0 && self.fs_threshold < 1.0) {
            return Err(Error::Config("fs_threshold must lie in (0, 1)".into()));
        }
        let b = &self.bayes;
        if b.linkage_thin == 0 || b.inner_len == 0 || b.linkage_draws == 0 || b.sae_draws == 0 {
            return Err(Error::Config("Bayesian budgets need positive draws, thinning and inner length".into()));
        }
        Ok(())
    }

    fn linkage_config(&self) -> LinkageConfig {
        let mut c = LinkageConfig::new(self.population.linkage_keys.clone());
        c.n_burn = self.bayes.linkage_burn;
        c.n_draws = self.bayes.linkage_draws;
        c.thin = self.bayes.linkage_thin;
        c.epsilon = self.bayes.epsilon;
        c.constrained_subset = true;
        c
    }
}

/// Results of one replication, indexed like `SimulationConfig::estimators`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RepOutcome {
    pub coef: Vec<Option<Vec<f64>>>,
    pub posterior_sd: Vec<Option<Vec<f64>>>,
    /// Per-domain predictions; `None` where the estimator is undefined.
    pub area: Vec<Option<Vec<Option<f64>>>>,
    pub sample_sizes: Vec<usize>,
    pub fs_rates: Option<LinkErrorRates>,
    pub bayes_rates: Option<LinkErrorRates>,
    pub errors: Vec<(Estimator, String)>,
}

/// Fixed per-run quantities shared by all replications.
struct Context<'a> {
    cfg: &'a SimulationConfig,
    pop: &'a Population,
    pop_sizes: Vec<f64>,
    pop_x: Vec<f64>,
}

struct Cell {
    coef: Vec<f64>,
    posterior_sd: Option<Vec<f64>>,
    area: Vec<Option<f64>>,
}

impl Cell {
    fn frequentist(beta: Vec<f64>, area: Vec<f64>) -> Self {
        Self {
            coef: beta,
            posterior_sd: None,
            area: area.into_iter().map(Some).collect(),
        }
    }

    fn bayesian(post: &SaePosterior) -> Self {
        Self {
            coef: post.beta_mean(),
            posterior_sd: Some(post.beta_sd()),
            area: post.mu_mean().into_iter().map(Some).collect(),
        }
    }
}

fn eblup_cell(sample: &UnitSample, opts: &FitOptions) -> Result<Cell> {
    let fit = fit_ml(sample, opts)?;
    let area = eblup_area_means(&fit.beta, &fit.u_hat, sample)?;
    Ok(Cell::frequentist(fit.beta, area))
}

fn sample_mean_cell(y: &[f64], dom: &[usize], nd: usize) -> Cell {
    let mut s = vec![0.0; nd];
    let mut n = vec![0usize; nd];
    for (v, &d) in y.iter().zip(dom) {
        s[d] += v;
        n[d] += 1;
    }
    Cell {
        coef: Vec::new(),
        posterior_sd: None,
        area: s.iter().zip(&n).map(|(&a, &k)| (k > 0).then(|| a / k as f64)).collect(),
    }
}

/// Sampled perturbed records (with the response) and their truth deck
/// against the register.
fn draw_sample(pop: &Population, n: usize, seed: u64) -> Result<(RecordFile, TruthDeck, Vec<usize>)> {
    let mut rng = rng_from_seed(seed);
    let mut rows = index::sample(&mut rng, pop.perturbed.len(), n).into_vec();
    rows.sort_unstable();
    let sample = pop.perturbed.subset(&rows);
    let truth = TruthDeck::from_pairs(
        rows.iter().enumerate().map(|(i, &r)| (i, r)),
        sample.domains(),
        pop.register.domains(),
    )?;
    Ok((sample, truth, rows))
}

fn run_one(ctx: &Context<'_>, seed: u64) -> Result<RepOutcome> {
    let cfg = ctx.cfg;
    let pop = ctx.pop;
    let nd = pop.n_domains();
    let (sample, truth, rows) = draw_sample(pop, cfg.n_sample, derive_seed(seed, 0))?;
    let y = sample.response().expect("perturbed file carries the response");
    let wants = |e: Estimator| cfg.estimators.contains(&e);
    let mut cells: Vec<(Estimator, Result<Cell>)> = Vec::new();
    let mut out = RepOutcome {
        sample_sizes: sample.records_by_domain(nd).iter().map(Vec::len).collect(),
        ..RepOutcome::default()
    };

    let true_pairs = || rows.iter().enumerate().map(|(i, &r)| (i, r));
    let assemble = |pairs: Vec<(usize, usize)>| assemble_pairs(&sample, &pop.register, pairs, &ctx.pop_sizes, &ctx.pop_x);

    if wants(Estimator::A) {
        cells.push((Estimator::A, assemble(true_pairs().collect()).and_then(|s| eblup_cell(&s, &cfg.fit))));
    }
    if wants(Estimator::AStar) {
        let r = assemble(true_pairs().collect()).and_then(|s| {
            gibbs_sae(&s, &cfg.prior, cfg.bayes.sae_burn, cfg.bayes.sae_draws, derive_seed(seed, 1))
        });
        cells.push((Estimator::AStar, r.map(|p| Cell::bayesian(&p))));
    }
    if wants(Estimator::SampleMean) {
        cells.push((Estimator::SampleMean, Ok(sample_mean_cell(y, sample.domains(), nd))));
    }

    let fs_needed = [Estimator::B, Estimator::C, Estimator::D].into_iter().any(wants);
    if fs_needed {
        let mut fs_cfg = FsConfig::new(cfg.population.linkage_keys.clone());
        fs_cfg.threshold = cfg.fs_threshold;
        match linkage_fs::link(&sample, &pop.register, nd, &fs_cfg) {
            Ok(fs) => {
                out.fs_rates = Some(link_error_rates(&fs.links, &truth)?);
                let links = &fs.links;
                if wants(Estimator::B) {
                    let pairs = links.links().map(|(i, _)| (i, rows[i])).collect();
                    cells.push((Estimator::B, assemble(pairs).and_then(|s| eblup_cell(&s, &cfg.fit))));
                }
                let naive = assemble_linked(&sample, &pop.register, links, &ctx.pop_sizes, &ctx.pop_x);
                if wants(Estimator::C) {
                    let r = naive.as_ref().map_err(clone_err).and_then(|s| eblup_cell(s, &cfg.fit));
                    cells.push((Estimator::C, r));
                }
                if wants(Estimator::D) {
                    let r = naive.as_ref().map_err(clone_err).and_then(|s| adjusted_cell(s, links, &truth, &sample, nd, &cfg.adjusted));
                    cells.push((Estimator::D, r));
                }
            }
            Err(e) => {
                for est in [Estimator::B, Estimator::C, Estimator::D] {
                    if wants(est) {
                        cells.push((est, Err(clone_err(&e))));
                    }
                }
            }
        }
    }

    let schema = select_keys(&cfg.population.key_schema(), &cfg.population.linkage_keys)?;
    let input = LinkedInput {
        f1: &sample,
        f2: &pop.register,
        n_domains: nd,
        schema: &schema,
        pop_sizes: &ctx.pop_sizes,
        pop_cov_means: &ctx.pop_x,
    };
    let link_cfg = cfg.linkage_config();
    if wants(Estimator::E) || wants(Estimator::CStar) {
        match run_nonfeedback(&input, &cfg.prior, &link_cfg, cfg.bayes.inner_len, derive_seed(seed, 2)) {
            Ok((post, link)) => {
                let est = point_estimate(&link);
                out.bayes_rates = Some(link_error_rates(&est, &truth)?);
                if wants(Estimator::CStar) {
                    let r = assemble_linked(&sample, &pop.register, &est, &ctx.pop_sizes, &ctx.pop_x).and_then(|s| {
                        gibbs_sae(&s, &cfg.prior, cfg.bayes.sae_burn, cfg.bayes.sae_draws, derive_seed(seed, 3))
                    });
                    cells.push((Estimator::CStar, r.map(|p| Cell::bayesian(&p))));
                }
                if wants(Estimator::E) {
                    cells.push((Estimator::E, Ok(Cell::bayesian(&post))));
                }
            }
            Err(e) => {
                for est in [Estimator::CStar, Estimator::E] {
                    if wants(est) {
                        cells.push((est, Err(clone_err(&e))));
                    }
                }
            }
        }
    }
    if wants(Estimator::F) {
        let r = run_feedback(&input, &cfg.prior, &link_cfg, &FeedbackOptions::default(), derive_seed(seed, 4));
        cells.push((Estimator::F, r.map(|(p, _)| Cell::bayesian(&p))));
    }

    for &est in &cfg.estimators {
        let cell = cells.iter().position(|(e, _)| *e == est).map(|k| cells.swap_remove(k).1);
        match cell {
            Some(Ok(c)) => {
                out.coef.push(est.has_coefficients().then_some(c.coef));
                out.posterior_sd.push(c.posterior_sd);
                out.area.push(Some(c.area));
            }
            Some(Err(e)) => {
                out.errors.push((est, e.to_string()));
                out.coef.push(None);
                out.posterior_sd.push(None);
                out.area.push(None);
            }
            None => unreachable!("every configured estimator yields a cell"),
        }
    }
    Ok(out)
}

fn adjusted_cell(
    s: &UnitSample,
    links: &MatchMatrix,
    truth: &TruthDeck,
    sample: &RecordFile,
    nd: usize,
    opts: &AdjustedOptions,
) -> Result<Cell> {
    let spec = estimate_lambda(links, truth, sample.domains(), nd)?;
    let fit = fit_adjusted(s, &spec, opts)?;
    let area = adjusted_eblup(&fit.beta_blue, &fit.u_hat, s)?;
    Ok(Cell::frequentist(fit.beta_blue, area))
}

/// Errors are not `Clone`; one failed step feeds several estimators.
fn clone_err(e: &Error) -> Error {
    Error::Numerical(e.to_string())
}

/// Population from `derive_seed(seed, 0)`, replication `r` from
/// `derive_seed(seed, r + 1)`; results are independent of thread count.
pub fn run_replications(cfg: &SimulationConfig, seed: u64) -> Result<ReplicationReport> {
    cfg.validate()?;
    let pop = generate_population(&cfg.population, derive_seed(seed, 0))?;
    run_on_population(cfg, &pop, seed)
}

/// As [`run_replications`] on an already generated population.
pub fn run_on_population(cfg: &SimulationConfig, pop: &Population, seed: u64) -> Result<ReplicationReport> {
    cfg.validate()?;
    let ctx = Context {
        cfg,
        pop,
        pop_sizes: pop.domain_sizes(),
        pop_x: pop.area_mean_x(),
    };
    let outcomes: Vec<RepOutcome> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| run_one(&ctx, derive_seed(seed, r as u64 + 1)))
        .collect::<Result<_>>()?;
    aggregate(cfg, pop, &outcomes)
}

/// Runs a single replication and returns its raw outcome.
pub fn run_single(cfg: &SimulationConfig, pop: &Population, seed: u64, replication: usize) -> Result<RepOutcome> {
    cfg.validate()?;
    let ctx = Context {
        cfg,
        pop,
        pop_sizes: pop.domain_sizes(),
        pop_x: pop.area_mean_x(),
    };
    run_one(&ctx, derive_seed(seed, replication as u64 + 1))
}
