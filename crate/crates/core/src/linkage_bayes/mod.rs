//! Bayesian record linkage with a hit-and-miss measurement model.
//!
//! Observed key values are noisy copies of latent true values: with
//! probability ν_l the observation equals the truth, otherwise it is uniform
//! over the k_l categories. True values are independent across fields with
//! frequencies θ_l, and a linked pair shares a single true value. The chain
//! alternates Metropolis moves on the matching matrix C (with the true values
//! integrated out) and Gibbs draws of the true values, ν and θ.

mod model;
mod sampler;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::datamodel::{greedy_match, KeyFieldSchema, MatchMatrix, RecordFile, ScoredPair};
use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, SimRng};

pub(crate) use model::KeyData;
use model::{gibbs_params, FieldLik};
pub(crate) use sampler::Chain;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitMissParams {
    pub nu: Vec<f64>,
    pub theta: Vec<Vec<f64>>,
}

impl HitMissParams {
    /// ν = `nu0` for every field, θ = smoothed observed frequencies.
    fn initial(data: &KeyData, nu0: f64) -> Self {
        let theta = data
            .all_counts
            .iter()
            .map(|c| {
                let tot: u64 = c[1..].iter().sum();
                let k = c.len() - 1;
                c[1..]
                    .iter()
                    .map(|&x| (x as f64 + 1.0) / (tot as f64 + k as f64))
                    .collect()
            })
            .collect();
        Self {
            nu: vec![nu0; data.h],
            theta,
        }
    }
}

/// Beta prior on each ν_l and symmetric Dirichlet on each θ_l.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    #[serde(default = "one")]
    pub nu_a: f64,
    #[serde(default = "one")]
    pub nu_b: f64,
    #[serde(default = "one")]
    pub theta_alpha: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            nu_a: 1.0,
            nu_b: 1.0,
            theta_alpha: 1.0,
        }
    }
}

/// Two-stage prior on C: `p(t)` over the number of links, then uniform over
/// the admissible matchings with t links.
#[derive(Debug, Clone, PartialEq)]
pub struct CPrior {
    pub p_t: Vec<f64>,
}

impl CPrior {
    pub fn uniform(t_max: usize) -> Self {
        Self {
            p_t: vec![1.0 / (t_max + 1) as f64; t_max + 1],
        }
    }

    pub fn point_mass(t: usize, t_max: usize) -> Self {
        let mut p_t = vec![0.0; t_max + 1];
        p_t[t] = 1.0;
        Self { p_t }
    }

    pub fn from_weights(w: Vec<f64>) -> Result<Self> {
        let s: f64 = w.iter().sum();
        if !(s > 0.0) || w.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(Error::InvalidInput("prior weights on t must be nonnegative with positive sum".into()));
        }
        Ok(Self {
            p_t: w.into_iter().map(|x| x / s).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkageConfig {
    pub key_fields: Vec<String>,
    #[serde(default)]
    pub hyper: Hyperparams,
    #[serde(default = "default_burn")]
    pub n_burn: usize,
    #[serde(default = "default_draws")]
    pub n_draws: usize,
    #[serde(default = "default_thin")]
    pub thin: usize,
    /// Every file-1 record is linked (file 1 is a subset of file 2).
    #[serde(default)]
    pub constrained_subset: bool,
    /// Weight of the uniform component in the constrained proposal.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Metropolis moves per iteration of the unconstrained kernel
    /// (default: one per file-1 record).
    #[serde(default)]
    pub moves_per_iter: Option<usize>,
    /// Holds ν fixed at these values instead of sampling it.
    #[serde(default)]
    pub fixed_nu: Option<Vec<f64>>,
    #[serde(default = "default_nu0")]
    pub nu_init: f64,
    #[serde(default)]
    pub store_draws: bool,
}

fn default_burn() -> usize {
    5000
}
fn default_draws() -> usize {
    10000
}
fn default_thin() -> usize {
    1
}
fn default_epsilon() -> f64 {
    0.1
}
fn default_nu0() -> f64 {
    0.9
}

impl LinkageConfig {
    pub fn new(key_fields: Vec<String>) -> Self {
        Self {
            key_fields,
            hyper: Hyperparams::default(),
            n_burn: default_burn(),
            n_draws: default_draws(),
            thin: default_thin(),
            constrained_subset: false,
            epsilon: default_epsilon(),
            moves_per_iter: None,
            fixed_nu: None,
            nu_init: default_nu0(),
            store_draws: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::Config("epsilon must lie in (0, 1]".into()));
        }
        let h = &self.hyper;
        if !(h.nu_a > 0.0 && h.nu_b > 0.0 && h.theta_alpha > 0.0) {
            return Err(Error::Config("hyperparameters must be positive".into()));
        }
        if let Some(nu) = &self.fixed_nu {
            if nu.len() != self.key_fields.len() || nu.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
                return Err(Error::Config("fixed_nu needs one value in (0,1) per key field".into()));
            }
        }
        if !(self.nu_init > 0.0 && self.nu_init < 1.0) {
            return Err(Error::Config("nu_init must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairProb {
    pub j: usize,
    pub j2: usize,
    pub prob: f64,
}

#[derive(Debug, Clone)]
pub struct LinkagePosterior {
    /// Pairs visited at least once, ordered by `(j, j')`.
    pub pair_probs: Vec<PairProb>,
    pub n_samples: usize,
    pub draws: Option<Vec<MatchMatrix>>,
    pub nu_trace: Vec<Vec<f64>>,
    pub t_trace: Vec<usize>,
    pub theta_mean: Vec<Vec<f64>>,
    pub acceptance_rate: f64,
    pub dom1: Vec<usize>,
    pub dom2: Vec<usize>,
}

impl LinkagePosterior {
    pub fn prob(&self, j: usize, j2: usize) -> f64 {
        self.pair_probs
            .binary_search_by(|p| (p.j, p.j2).cmp(&(j, j2)))
            .map(|k| self.pair_probs[k].prob)
            .unwrap_or(0.0)
    }
}

/// `ν·1[w = w̃] + (1 − ν)/k`; a missing observation contributes 1.
pub fn hit_miss_lik(w: Option<u16>, w_true: u16, nu: f64, k: u16) -> f64 {
    match w {
        None => 1.0,
        Some(w) => nu * (w == w_true) as u8 as f64 + (1.0 - nu) / k as f64,
    }
}

/// Log-probability of the true values under independent fields: unlinked
/// records of both files contribute their own θ factor, a linked pair one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrueLik {
    Log(f64),
    /// A linked pair has different true values: probability zero.
    Impossible { j: usize, j2: usize },
}

pub fn joint_true_lik(
    w1: &[Vec<u16>],
    w2: &[Vec<u16>],
    c: &MatchMatrix,
    theta: &[Vec<f64>],
) -> TrueLik {
    let lp = |row: &[u16]| -> f64 {
        row.iter()
            .enumerate()
            .map(|(l, &v)| theta[l][v as usize - 1].ln())
            .sum()
    };
    let mut s = 0.0;
    for (j, row) in w1.iter().enumerate() {
        match c.partner_of(j) {
            None => s += lp(row),
            Some(j2) => {
                if w2[j2] != *row {
                    return TrueLik::Impossible { j, j2 };
                }
                s += lp(row);
            }
        }
    }
    for (j2, row) in w2.iter().enumerate() {
        if c.partner_of_col(j2).is_none() {
            s += lp(row);
        }
    }
    TrueLik::Log(s)
}

/// Selects the named key fields from a schema, in order.
pub fn select_keys(schema: &[KeyFieldSchema], names: &[String]) -> Result<Vec<KeyFieldSchema>> {
    names
        .iter()
        .map(|n| {
            schema
                .iter()
                .find(|k| &k.name == n)
                .cloned()
                .ok_or_else(|| Error::InvalidInput(format!("key field `{n}` not in schema")))
        })
        .collect()
}

/// Per-iteration view handed to [`run_chain`] observers.
pub struct ChainState<'s> {
    pub forward: &'s [Option<u32>],
    pub params: &'s HitMissParams,
}

/// Extra model coupled to the matching (the feedback strategy). The chain
/// adds `log_lik(i, j)` to the acceptance ratio of any move linking `i` to
/// `j` and calls `update` once per iteration after the linkage parameters.
pub(crate) trait Coupling {
    fn init(&mut self, forward: &[Option<u32>]) -> Result<()>;
    fn log_lik(&self, i: usize, j: usize) -> f64;
    fn update(&mut self, forward: &[Option<u32>], rng: &mut SimRng) -> Result<()>;
}

pub(crate) struct NoCoupling;

impl Coupling for NoCoupling {
    fn init(&mut self, _: &[Option<u32>]) -> Result<()> {
        Ok(())
    }
    fn log_lik(&self, _: usize, _: usize) -> f64 {
        0.0
    }
    fn update(&mut self, _: &[Option<u32>], _: &mut SimRng) -> Result<()> {
        Ok(())
    }
}

/// Runs the linkage chain and calls `on_draw` for every retained state.
///
/// An iteration is one kernel pass over C followed by the (W̃, ν, θ) Gibbs
/// step. The constrained kernel is a systematic scan over file-1 records.
pub(crate) fn run_chain<C: Coupling>(
    data: &KeyData,
    keys: &[KeyFieldSchema],
    prior: &CPrior,
    cfg: &LinkageConfig,
    rng: &mut SimRng,
    coupling: &mut C,
    mut on_draw: impl FnMut(&ChainState<'_>, &C) -> Result<()>,
) -> Result<f64> {
    cfg.validate()?;
    debug_assert_eq!(keys.len(), data.h);
    let mut params = HitMissParams::initial(data, cfg.nu_init);
    if let Some(nu) = &cfg.fixed_nu {
        params.nu = nu.clone();
    }
    let lik = FieldLik::new(params);
    let mut chain = if cfg.constrained_subset {
        Chain::constrained(data, lik, cfg.epsilon)?
    } else {
        Chain::unconstrained(data, lik, prior)?
    };
    coupling.init(&chain.forward)?;
    let moves = cfg.moves_per_iter.unwrap_or(data.n1.max(1));
    let mut changed = Vec::new();
    let total = cfg.n_burn + cfg.n_draws * cfg.thin;
    for it in 0..total {
        if cfg.constrained_subset {
            let c = &*coupling;
            chain.constrained_sweep(rng, |i, j| c.log_lik(i, j), &mut changed);
        } else {
            chain.unconstrained_moves(moves, rng);
        }
        gibbs_params(data, &chain.forward, &mut chain.lik, &cfg.hyper, cfg.fixed_nu.is_none(), rng);
        coupling.update(&chain.forward, rng)?;
        if it >= cfg.n_burn && (it - cfg.n_burn + 1) % cfg.thin == 0 {
            on_draw(
                &ChainState {
                    forward: &chain.forward,
                    params: &chain.lik.params,
                },
                coupling,
            )?;
        }
    }
    Ok(acc_rate(chain.stats))
}

fn acc_rate(s: sampler::MoveStats) -> f64 {
    if s.proposed == 0 {
        0.0
    } else {
        s.accepted as f64 / s.proposed as f64
    }
}

/// Full sampler: Monte Carlo pair probabilities plus ν / T traces.
pub fn run_mcmc(
    f1: &RecordFile,
    f2: &RecordFile,
    n_domains: usize,
    schema: &[KeyFieldSchema],
    prior: &CPrior,
    cfg: &LinkageConfig,
    seed: u64,
) -> Result<LinkagePosterior> {
    let mut rng = rng_from_seed(seed);
    run_mcmc_coupled(f1, f2, n_domains, schema, prior, cfg, &mut rng, &mut NoCoupling, |_, _| Ok(()))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn run_mcmc_coupled<C: Coupling>(
    f1: &RecordFile,
    f2: &RecordFile,
    n_domains: usize,
    schema: &[KeyFieldSchema],
    prior: &CPrior,
    cfg: &LinkageConfig,
    rng: &mut SimRng,
    coupling: &mut C,
    mut on_draw: impl FnMut(&ChainState<'_>, &C) -> Result<()>,
) -> Result<LinkagePosterior> {
    let keys = select_keys(schema, &cfg.key_fields)?;
    let data = KeyData::new(f1, f2, n_domains, &keys)?;
    let prior = if cfg.constrained_subset {
        CPrior::point_mass(data.n1.min(data.n2), data.n1.min(data.n2))
    } else {
        prior.clone()
    };
    let mut counts: HashMap<(u32, u32), u32> = HashMap::new();
    let mut nu_trace = Vec::new();
    let mut t_trace = Vec::new();
    let mut theta_sum: Vec<Vec<f64>> = data.cards.iter().map(|&k| vec![0.0; k]).collect();
    let mut draws = cfg.store_draws.then(Vec::new);
    let mut n = 0usize;
    let acceptance_rate = run_chain(&data, &keys, &prior, cfg, rng, coupling, |s, c| {
        n += 1;
        let mut t = 0;
        for (j, p) in s.forward.iter().enumerate() {
            if let Some(j2) = p {
                *counts.entry((j as u32, *j2)).or_insert(0) += 1;
                t += 1;
            }
        }
        t_trace.push(t);
        nu_trace.push(s.params.nu.clone());
        for (acc, th) in theta_sum.iter_mut().zip(&s.params.theta) {
            for (a, v) in acc.iter_mut().zip(th) {
                *a += v;
            }
        }
        if let Some(d) = draws.as_mut() {
            d.push(MatchMatrix::from_forward(s.forward, data.n2));
        }
        on_draw(s, c)
    })?;
    let mut pair_probs: Vec<PairProb> = counts
        .into_iter()
        .map(|((j, j2), c)| PairProb {
            j: j as usize,
            j2: j2 as usize,
            prob: c as f64 / n.max(1) as f64,
        })
        .collect();
    pair_probs.sort_by_key(|p| (p.j, p.j2));
    for th in &mut theta_sum {
        for v in th.iter_mut() {
            *v /= n.max(1) as f64;
        }
    }
    Ok(LinkagePosterior {
        pair_probs,
        n_samples: n,
        draws,
        nu_trace,
        t_trace,
        theta_mean: theta_sum,
        acceptance_rate,
        dom1: data.dom1.clone(),
        dom2: data.dom2.clone(),
    })
}

/// Pairs with posterior probability ≥ ½, made one-to-one greedily.
pub fn point_estimate(post: &LinkagePosterior) -> MatchMatrix {
    let scored = post
        .pair_probs
        .iter()
        .map(|p| ScoredPair {
            j: p.j,
            j2: p.j2,
            score: p.prob,
        })
        .collect();
    greedy_match(scored, 0.5, &post.dom1, &post.dom2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rf(keys: Vec<Option<u16>>, h: usize, domains: Vec<usize>) -> RecordFile {
        let n = domains.len();
        RecordFile::new(
            (0..n).map(|i| format!("r{i}")).collect(),
            (0..h).map(|l| format!("k{l}")).collect(),
            keys,
            domains,
        )
        .unwrap()
    }

    fn schema(cards: &[u16]) -> Vec<KeyFieldSchema> {
        cards
            .iter()
            .enumerate()
            .map(|(l, &k)| KeyFieldSchema::new(format!("k{l}"), k))
            .collect()
    }

    fn names(h: usize) -> Vec<String> {
        (0..h).map(|l| format!("k{l}")).collect()
    }

    #[test]
    fn hit_miss_examples() {
        assert!((hit_miss_lik(Some(3), 3, 0.95, 10) - 0.955).abs() < 1e-12);
        assert!((hit_miss_lik(Some(2), 3, 0.95, 10) - 0.005).abs() < 1e-12);
        assert_eq!(hit_miss_lik(None, 3, 0.95, 10), 1.0);
    }

    #[test]
    fn joint_true_lik_examples() {
        let theta = vec![vec![0.25, 0.75], vec![0.5, 0.5]];
        let w1 = vec![vec![1, 2]];
        let w2 = vec![vec![1, 2], vec![2, 1]];
        let d1 = [0];
        let d2 = [0, 0];
        let single = (0.25f64 * 0.5).ln();
        let other = (0.75f64 * 0.5).ln();
        match joint_true_lik(&w1, &w2, &MatchMatrix::empty(1, 2), &theta) {
            TrueLik::Log(v) => assert!((v - (2.0 * single + other)).abs() < 1e-12),
            t => panic!("{t:?}"),
        }
        let c = MatchMatrix::from_pairs([(0, 0)], &d1, &d2).unwrap();
        match joint_true_lik(&w1, &w2, &c, &theta) {
            TrueLik::Log(v) => assert!((v - (single + other)).abs() < 1e-12),
            t => panic!("{t:?}"),
        }
        let bad = MatchMatrix::from_pairs([(0, 1)], &d1, &d2).unwrap();
        assert_eq!(joint_true_lik(&w1, &w2, &bad, &theta), TrueLik::Impossible { j: 0, j2: 1 });
    }

    #[test]
    fn point_estimate_rules() {
        let post = LinkagePosterior {
            pair_probs: vec![
                PairProb { j: 0, j2: 0, prob: 0.6 },
                PairProb { j: 0, j2: 1, prob: 0.7 },
                PairProb { j: 1, j2: 1, prob: 0.55 },
                PairProb { j: 2, j2: 2, prob: 0.4 },
            ],
            n_samples: 10,
            draws: None,
            nu_trace: vec![],
            t_trace: vec![],
            theta_mean: vec![],
            acceptance_rate: 0.0,
            dom1: vec![0; 3],
            dom2: vec![0; 3],
        };
        let m = point_estimate(&post);
        assert_eq!(m.links().collect::<Vec<_>>(), vec![(0, 1)]);
    }

    #[test]
    fn constrained_draws_are_permutations() {
        let keys = vec![
            Some(1), Some(2), Some(2), Some(1), Some(1), Some(1), Some(2), Some(2),
        ];
        let f = rf(keys, 2, vec![0, 0, 1, 1]);
        let mut cfg = LinkageConfig::new(names(2));
        cfg.constrained_subset = true;
        cfg.n_burn = 50;
        cfg.n_draws = 300;
        cfg.store_draws = true;
        let post = run_mcmc(&f, &f, 2, &schema(&[2, 2]), &CPrior::uniform(4), &cfg, 5).unwrap();
        for d in post.draws.as_ref().unwrap() {
            assert_eq!(d.len(), 4);
            assert!(d.check(f.domains(), f.domains()).is_ok());
        }
    }

    #[test]
    fn constrained_infeasible_block_errors() {
        let f1 = rf(vec![Some(1), Some(2)], 1, vec![0, 0]);
        let f2 = rf(vec![Some(1), Some(2)], 1, vec![0, 1]);
        let mut cfg = LinkageConfig::new(names(1));
        cfg.constrained_subset = true;
        let r = run_mcmc(&f1, &f2, 2, &schema(&[3]), &CPrior::uniform(2), &cfg, 1);
        assert!(matches!(r, Err(Error::Infeasible(_))));
    }

    #[test]
    fn unconstrained_draws_respect_blocks() {
        let keys: Vec<Option<u16>> = (0..12).map(|i| Some((i % 3 + 1) as u16)).collect();
        let f1 = rf(keys[..6].to_vec(), 1, vec![0, 1, 0, 1, 0, 1]);
        let f2 = rf(keys[6..].to_vec(), 1, vec![1, 1, 0, 0, 0, 1]);
        let mut cfg = LinkageConfig::new(names(1));
        cfg.n_burn = 10;
        cfg.n_draws = 500;
        cfg.store_draws = true;
        let post = run_mcmc(&f1, &f2, 2, &schema(&[3]), &CPrior::uniform(6), &cfg, 11).unwrap();
        for d in post.draws.as_ref().unwrap() {
            assert!(d.check(f1.domains(), f2.domains()).is_ok());
        }
        for p in &post.pair_probs {
            assert!(p.prob >= 0.0 && p.prob <= 1.0);
        }
    }

    #[test]
    fn duplicated_files_recover_identity() {
        // 6 distinct records, error-free copies, ν held near 1
        let keys: Vec<Option<u16>> = (0..6)
            .flat_map(|i| [Some((i % 3 + 1) as u16), Some((i / 3 + 1) as u16)])
            .collect();
        let f = rf(keys, 2, vec![0; 6]);
        let mut cfg = LinkageConfig::new(names(2));
        cfg.fixed_nu = Some(vec![0.999, 0.999]);
        cfg.n_burn = 500;
        cfg.n_draws = 3000;
        let post = run_mcmc(&f, &f, 1, &schema(&[3, 2]), &CPrior::uniform(6), &cfg, 2).unwrap();
        for j in 0..6 {
            assert!(post.prob(j, j) > 0.9, "pair {j}: {}", post.prob(j, j));
        }
        let est = point_estimate(&post);
        assert_eq!(est.links().collect::<Vec<_>>(), (0..6).map(|j| (j, j)).collect::<Vec<_>>());
    }

    #[test]
    fn reproducible_given_seed() {
        let keys: Vec<Option<u16>> = (0..8).map(|i| Some((i % 4 + 1) as u16)).collect();
        let f = rf(keys, 1, vec![0; 8]);
        let mut cfg = LinkageConfig::new(names(1));
        cfg.n_burn = 20;
        cfg.n_draws = 100;
        let a = run_mcmc(&f, &f, 1, &schema(&[4]), &CPrior::uniform(8), &cfg, 77).unwrap();
        let b = run_mcmc(&f, &f, 1, &schema(&[4]), &CPrior::uniform(8), &cfg, 77).unwrap();
        assert_eq!(a.pair_probs, b.pair_probs);
        assert_eq!(a.nu_trace, b.nu_trace);
    }
}
