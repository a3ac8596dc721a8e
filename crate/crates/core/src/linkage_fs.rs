//! Fellegi–Sunter linkage: agreement vectors under domain blocking, EM for the
//! two-component Bernoulli mixture, likelihood-ratio scoring and thresholded
//! one-to-one link decisions.
//!
//! Agreement vectors are bitmasks (bit `l` set iff field `l` agrees), so EM
//! runs on pattern counts rather than on individual pairs.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{greedy_match, MatchMatrix, RecordFile, ScoredPair};
use crate::error::{Error, Result};

pub const PROB_EPS: f64 = 1e-6;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComparisonVector {
    pub j: u32,
    pub j2: u32,
    /// Bit `l` is `q_l`.
    pub q: u32,
}

impl ComparisonVector {
    pub fn agrees(&self, l: usize) -> bool {
        self.q >> l & 1 == 1
    }

    pub fn to_vec(&self, h: usize) -> Vec<u8> {
        (0..h).map(|l| (self.q >> l & 1) as u8).collect()
    }
}

/// Resolves key-field names to column indices in both files.
pub fn key_columns(f1: &RecordFile, f2: &RecordFile, names: &[String]) -> Result<Vec<(usize, usize)>> {
    if names.is_empty() {
        return Err(Error::InvalidInput("no key fields selected".into()));
    }
    if names.len() > 31 {
        return Err(Error::InvalidInput("at most 31 key fields are supported".into()));
    }
    names
        .iter()
        .map(|n| match (f1.field_index(n), f2.field_index(n)) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(Error::InvalidInput(format!("key field `{n}` not present in both files"))),
        })
        .collect()
}

/// Agreement bitmask of one pair: bit set iff both values are present and equal.
pub fn agreement(f1: &RecordFile, j: usize, f2: &RecordFile, j2: usize, cols: &[(usize, usize)]) -> u32 {
    let mut q = 0u32;
    for (l, &(a, b)) in cols.iter().enumerate() {
        if let (Some(x), Some(y)) = (f1.key(j, a), f2.key(j2, b)) {
            if x == y {
                q |= 1 << l;
            }
        }
    }
    q
}

/// One comparison per within-domain pair, ordered by domain, then `j`, then `j'`.
pub fn build_comparisons(
    f1: &RecordFile,
    f2: &RecordFile,
    key_fields: &[String],
    n_domains: usize,
) -> Result<Vec<ComparisonVector>> {
    let cols = key_columns(f1, f2, key_fields)?;
    let b1 = f1.records_by_domain(n_domains);
    let b2 = f2.records_by_domain(n_domains);
    let blocks: Vec<Vec<ComparisonVector>> = (0..n_domains)
        .into_par_iter()
        .map(|d| {
            let mut out = Vec::with_capacity(b1[d].len() * b2[d].len());
            for &j in &b1[d] {
                for &j2 in &b2[d] {
                    out.push(ComparisonVector {
                        j: j as u32,
                        j2: j2 as u32,
                        q: agreement(f1, j, f2, j2, &cols),
                    });
                }
            }
            out
        })
        .collect();
    Ok(blocks.concat())
}

/// Sufficient statistics for EM: how many pairs show each agreement pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternCounts {
    pub h: usize,
    pub counts: BTreeMap<u32, f64>,
}

impl PatternCounts {
    pub fn from_comparisons(h: usize, comps: &[ComparisonVector]) -> Self {
        let mut counts = BTreeMap::new();
        for c in comps {
            *counts.entry(c.q).or_insert(0.0) += 1.0;
        }
        Self { h, counts }
    }

    pub fn total(&self) -> f64 {
        self.counts.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FsModel {
    pub m: Vec<f64>,
    pub u: Vec<f64>,
    pub zeta: f64,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Set when every comparison shows the same pattern.
    pub degenerate: bool,
}

impl FsModel {
    pub fn new(m: Vec<f64>, u: Vec<f64>, zeta: f64) -> Self {
        Self {
            m: m.into_iter().map(clamp_prob).collect(),
            u: u.into_iter().map(clamp_prob).collect(),
            zeta: clamp_prob(zeta),
            loglik_trace: Vec::new(),
            iterations: 0,
            converged: false,
            degenerate: false,
        }
    }

    /// m = 0.9, u = 0.1, ζ = min(N1, N2) / |pairs|.
    pub fn initial(h: usize, n1: usize, n2: usize, n_pairs: usize) -> Self {
        let zeta = if n_pairs == 0 {
            0.5
        } else {
            n1.min(n2) as f64 / n_pairs as f64
        };
        Self::new(vec![0.9; h], vec![0.1; h], zeta)
    }

    pub fn h(&self) -> usize {
        self.m.len()
    }

    fn log_components(&self, q: u32) -> (f64, f64) {
        let (mut lm, mut lu) = (0.0, 0.0);
        for l in 0..self.h() {
            if q >> l & 1 == 1 {
                lm += self.m[l].ln();
                lu += self.u[l].ln();
            } else {
                lm += (1.0 - self.m[l]).ln();
                lu += (1.0 - self.u[l]).ln();
            }
        }
        (lm, lu)
    }

    /// `log ψ(q)`.
    pub fn log_likelihood_ratio(&self, q: u32) -> f64 {
        let (lm, lu) = self.log_components(q);
        lm - lu
    }

    /// Mixture log-likelihood of the pattern counts.
    pub fn loglik(&self, counts: &PatternCounts) -> f64 {
        let (lz, l1z) = (self.zeta.ln(), (1.0 - self.zeta).ln());
        counts
            .counts
            .iter()
            .map(|(&q, &n)| {
                let (lm, lu) = self.log_components(q);
                n * log_add(lz + lm, l1z + lu)
            })
            .sum()
    }

    /// Posterior match probability of a pair with pattern `q`.
    pub fn match_prob(&self, q: u32) -> f64 {
        posterior_from_log_psi(self.log_likelihood_ratio(q), self.zeta)
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `ψ = Π m^q(1−m)^(1−q) / Π u^q(1−u)^(1−q)` for a 0/1 vector `q`.
pub fn likelihood_ratio(q: &[u8], model: &FsModel) -> f64 {
    let mask = q
        .iter()
        .enumerate()
        .fold(0u32, |acc, (l, &v)| if v != 0 { acc | 1 << l } else { acc });
    model.log_likelihood_ratio(mask).exp()
}

/// `ζψ / (1 − ζ + ζψ)`.
pub fn posterior_match_prob(psi: f64, zeta: f64) -> f64 {
    posterior_from_log_psi(psi.ln(), zeta)
}

fn posterior_from_log_psi(log_psi: f64, zeta: f64) -> f64 {
    // 1 / (1 + (1−ζ)/(ζψ)), stable for extreme ψ
    let t = (1.0 - zeta).ln() - zeta.ln() - log_psi;
    if t > 0.0 {
        let e = (-t).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + t.exp())
    }
}

/// EM for the mixture on pattern counts.
///
/// Each M-step is projected onto `[ε, 1−ε]`; the per-coordinate objectives
/// are concave, so the projection keeps the log-likelihood nondecreasing.
pub fn fit_em(counts: &PatternCounts, init: &FsModel, tol: f64, max_iter: usize) -> Result<FsModel> {
    let total = counts.total();
    if total <= 0.0 {
        return Err(Error::InvalidInput("EM needs at least one comparison".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidInput("EM tolerance must be positive".into()));
    }
    if init.h() != counts.h {
        return Err(Error::InvalidInput(format!(
            "model has {} fields, comparisons have {}",
            init.h(),
            counts.h
        )));
    }
    let h = counts.h;
    let mut model = FsModel::new(init.m.clone(), init.u.clone(), init.zeta);
    model.degenerate = counts.counts.len() == 1;
    let mut ll = model.loglik(counts);
    model.loglik_trace.push(ll);

    for it in 1..=max_iter {
        let (lz, l1z) = (model.zeta.ln(), (1.0 - model.zeta).ln());
        let mut g_sum = 0.0;
        let mut m_num = vec![0.0; h];
        let mut u_num = vec![0.0; h];
        for (&q, &n) in &counts.counts {
            let (lm, lu) = model.log_components(q);
            let a = lz + lm;
            let b = l1z + lu;
            let g = (a - log_add(a, b)).exp();
            g_sum += n * g;
            for l in 0..h {
                if q >> l & 1 == 1 {
                    m_num[l] += n * g;
                    u_num[l] += n * (1.0 - g);
                }
            }
        }
        let non = total - g_sum;
        for l in 0..h {
            model.m[l] = clamp_prob(if g_sum > 0.0 { m_num[l] / g_sum } else { model.m[l] });
            model.u[l] = clamp_prob(if non > 0.0 { u_num[l] / non } else { model.u[l] });
        }
        model.zeta = clamp_prob(g_sum / total);
        let new_ll = model.loglik(counts);
        model.loglik_trace.push(new_ll);
        model.iterations = it;
        let rel = (new_ll - ll).abs() / ll.abs().max(f64::MIN_POSITIVE);
        ll = new_ll;
        if rel < tol {
            model.converged = true;
            break;
        }
    }
    Ok(model)
}

/// Scores every comparison and keeps those with posterior ≥ `min_score`.
pub fn score_pairs(comps: &[ComparisonVector], model: &FsModel, min_score: f64) -> Vec<ScoredPair> {
    let probs: BTreeMap<u32, f64> = comps
        .iter()
        .map(|c| c.q)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .map(|q| (q, model.match_prob(q)))
        .collect();
    comps
        .iter()
        .filter_map(|c| {
            let s = probs[&c.q];
            (s >= min_score).then_some(ScoredPair {
                j: c.j as usize,
                j2: c.j2 as usize,
                score: s,
            })
        })
        .collect()
}

/// Pairs with score ≥ `threshold`, made one-to-one greedily by descending
/// score with `(j, j')` tie-breaking.
pub fn decide_links(scored: Vec<ScoredPair>, threshold: f64, dom1: &[usize], dom2: &[usize]) -> MatchMatrix {
    greedy_match(scored, threshold, dom1, dom2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FsConfig {
    pub key_fields: Vec<String>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_threshold() -> f64 {
    0.5
}
fn default_tol() -> f64 {
    1e-6
}
fn default_max_iter() -> usize {
    1000
}

impl FsConfig {
    pub fn new(key_fields: Vec<String>) -> Self {
        Self {
            key_fields,
            threshold: default_threshold(),
            tol: default_tol(),
            max_iter: default_max_iter(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FsResult {
    pub model: FsModel,
    pub links: MatchMatrix,
    /// Declared links with their posterior scores, ordered by `j`.
    pub scores: Vec<ScoredPair>,
    pub n_comparisons: usize,
}

/// Comparisons, EM fit, scoring and one-to-one decision in one call.
pub fn link(f1: &RecordFile, f2: &RecordFile, n_domains: usize, cfg: &FsConfig) -> Result<FsResult> {
    let comps = build_comparisons(f1, f2, &cfg.key_fields, n_domains)?;
    if comps.is_empty() {
        return Err(Error::InvalidInput("no within-domain pairs to compare".into()));
    }
    let h = cfg.key_fields.len();
    let counts = PatternCounts::from_comparisons(h, &comps);
    let init = FsModel::initial(h, f1.len(), f2.len(), comps.len());
    let model = fit_em(&counts, &init, cfg.tol, cfg.max_iter)?;
    let scored = score_pairs(&comps, &model, cfg.threshold);
    let links = decide_links(scored.clone(), cfg.threshold, f1.domains(), f2.domains());
    let mut scores: Vec<ScoredPair> = scored
        .into_iter()
        .filter(|p| links.contains(p.j, p.j2))
        .collect();
    scores.sort_by_key(|p| p.j);
    Ok(FsResult {
        model,
        links,
        scores,
        n_comparisons: comps.len(),
    })
}
