//! Metropolis moves on the matching matrix with the true values integrated
//! out of the acceptance ratio.
//!
//! Two kernels share the state:
//! - unconstrained: add / delete / switch within a uniformly chosen block,
//!   under the two-stage prior `p(C) = p(t) / |C^(t)|`;
//! - constrained: every file-1 record is linked; a systematic scan proposes a
//!   new partner for each record, either a free register record (the old one
//!   is released) or one held by another record (the two are swapped).

use std::collections::HashMap;

use rand::Rng;

use super::model::{FieldLik, KeyData};
use super::CPrior;
use crate::error::{Error, Result};

/// A set of indices supporting O(1) insert, remove and uniform choice.
#[derive(Debug, Clone, Default)]
struct IndexedSet {
    items: Vec<u32>,
    pos: HashMap<u32, usize>,
}

impl IndexedSet {
    fn insert(&mut self, x: u32) {
        if !self.pos.contains_key(&x) {
            self.pos.insert(x, self.items.len());
            self.items.push(x);
        }
    }

    fn remove(&mut self, x: u32) {
        if let Some(p) = self.pos.remove(&x) {
            let last = self.items.pop().expect("non-empty");
            if p < self.items.len() {
                self.items[p] = last;
                self.pos.insert(last, p);
            }
        }
    }

    fn len(&self) -> usize {
        self.items.len()
    }

    fn choose<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        self.items[rng.random_range(0..self.items.len())]
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct MoveStats {
    pub proposed: u64,
    pub accepted: u64,
}

pub(crate) struct Chain<'a> {
    pub data: &'a KeyData,
    pub lik: FieldLik,
    pub forward: Vec<Option<u32>>,
    pub backward: Vec<Option<u32>>,
    pub stats: MoveStats,
    blocks2: Vec<Vec<u32>>,
    // unconstrained bookkeeping
    free1: Vec<IndexedSet>,
    free2: Vec<IndexedSet>,
    linked1: Vec<IndexedSet>,
    active_blocks: Vec<usize>,
    log_pt: Vec<f64>,
    log_count: Vec<f64>,
    t: usize,
    // constrained proposal
    candidates: Vec<Vec<u32>>,
    epsilon: f64,
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `log |C^(t)|` for t = 0..=t_max: block-diagonal one-to-one matrices with
/// exactly t links, as a convolution over blocks of `C(n1,t)·C(n2,t)·t!`.
pub(crate) fn log_config_counts(sizes: &[(usize, usize)], t_max: usize) -> Vec<f64> {
    let mut acc = vec![f64::NEG_INFINITY; t_max + 1];
    acc[0] = 0.0;
    let mut reach = 0usize;
    // log-factorial table shared across blocks
    let n_max = sizes.iter().map(|&(a, b)| a.max(b)).max().unwrap_or(0);
    let mut lf = vec![0.0; n_max + 1];
    for i in 1..=n_max {
        lf[i] = lf[i - 1] + (i as f64).ln();
    }
    let lb = |n: usize, k: usize| lf[n] - lf[k] - lf[n - k];
    for &(n1, n2) in sizes {
        let m = n1.min(n2);
        let block: Vec<f64> = (0..=m).map(|t| lb(n1, t) + lb(n2, t) + lf[t]).collect();
        let new_reach = (reach + m).min(t_max);
        let mut next = vec![f64::NEG_INFINITY; t_max + 1];
        for (s, &a) in acc.iter().enumerate().take(reach + 1) {
            if a == f64::NEG_INFINITY {
                continue;
            }
            for (t, &b) in block.iter().enumerate() {
                if s + t > t_max {
                    break;
                }
                next[s + t] = log_add(next[s + t], a + b);
            }
        }
        acc = next;
        reach = new_reach;
    }
    acc
}

impl<'a> Chain<'a> {
    fn empty(data: &'a KeyData, lik: FieldLik) -> Self {
        let mut blocks2 = vec![Vec::new(); data.n_domains];
        for (j, &d) in data.dom2.iter().enumerate() {
            blocks2[d].push(j as u32);
        }
        Self {
            data,
            lik,
            forward: vec![None; data.n1],
            backward: vec![None; data.n2],
            stats: MoveStats::default(),
            blocks2,
            free1: Vec::new(),
            free2: Vec::new(),
            linked1: Vec::new(),
            active_blocks: Vec::new(),
            log_pt: Vec::new(),
            log_count: Vec::new(),
            t: 0,
            candidates: Vec::new(),
            epsilon: 1.0,
        }
    }

    fn link(&mut self, i: usize, j: usize) {
        self.forward[i] = Some(j as u32);
        self.backward[j] = Some(i as u32);
    }

    /// Unconstrained chain started from links between records agreeing on
    /// every key field (first free candidate in index order).
    pub fn unconstrained(data: &'a KeyData, lik: FieldLik, prior: &CPrior) -> Result<Self> {
        let mut ch = Self::empty(data, lik);
        let nd = data.n_domains;
        ch.free1 = vec![IndexedSet::default(); nd];
        ch.free2 = vec![IndexedSet::default(); nd];
        ch.linked1 = vec![IndexedSet::default(); nd];
        for i in 0..data.n1 {
            let d = data.dom1[i];
            let full = ch.blocks2[d].iter().copied().find(|&j| {
                ch.backward[j as usize].is_none() && data.agreement(i, j as usize) == data.h
            });
            if let Some(j) = full {
                ch.link(i, j as usize);
            }
        }
        let mut n1b = vec![0usize; nd];
        for i in 0..data.n1 {
            let d = data.dom1[i];
            n1b[d] += 1;
            if ch.forward[i].is_some() {
                ch.linked1[d].insert(i as u32);
            } else {
                ch.free1[d].insert(i as u32);
            }
        }
        for j in 0..data.n2 {
            if ch.backward[j].is_none() {
                ch.free2[data.dom2[j]].insert(j as u32);
            }
        }
        let sizes: Vec<(usize, usize)> = (0..nd).map(|d| (n1b[d], ch.blocks2[d].len())).collect();
        ch.active_blocks = (0..nd).filter(|&d| sizes[d].0 > 0 && sizes[d].1 > 0).collect();
        let t_max = data.n1.min(data.n2);
        if prior.p_t.len() != t_max + 1 {
            return Err(Error::InvalidInput(format!(
                "prior on t has {} entries, expected {}",
                prior.p_t.len(),
                t_max + 1
            )));
        }
        ch.log_count = log_config_counts(&sizes, t_max);
        ch.log_pt = prior.p_t.iter().map(|p| p.ln()).collect();
        ch.t = ch.forward.iter().filter(|p| p.is_some()).count();
        if !(ch.log_pt[ch.t] + ch.log_count[ch.t]).is_finite() {
            // start from the empty matching if the greedy start has no prior mass
            for i in 0..data.n1 {
                if let Some(j) = ch.forward[i].take() {
                    let d = data.dom1[i];
                    ch.backward[j as usize] = None;
                    ch.linked1[d].remove(i as u32);
                    ch.free1[d].insert(i as u32);
                    ch.free2[d].insert(j);
                }
            }
            ch.t = 0;
            if !(ch.log_pt[0]).is_finite() {
                return Err(Error::InvalidInput(
                    "prior on t gives zero mass to the starting matching".into(),
                ));
            }
        }
        Ok(ch)
    }

    /// Constrained chain: every file-1 record linked, started greedily by
    /// best key agreement.
    pub fn constrained(data: &'a KeyData, lik: FieldLik, epsilon: f64) -> Result<Self> {
        let mut ch = Self::empty(data, lik);
        let nd = data.n_domains;
        let mut n1b = vec![0usize; nd];
        for &d in &data.dom1 {
            n1b[d] += 1;
        }
        for d in 0..nd {
            if n1b[d] > ch.blocks2[d].len() {
                return Err(Error::Infeasible(format!(
                    "domain {} has {} file-1 records but only {} file-2 records",
                    d + 1,
                    n1b[d],
                    ch.blocks2[d].len()
                )));
            }
        }
        ch.candidates = candidate_sets(data, &ch.blocks2);
        ch.epsilon = epsilon.clamp(1e-6, 1.0);
        for i in 0..data.n1 {
            let d = data.dom1[i];
            let pick = |list: &[u32], ch: &Self| {
                let mut best: Option<(usize, u32)> = None;
                for &j in list {
                    if ch.backward[j as usize].is_some() {
                        continue;
                    }
                    let a = data.agreement(i, j as usize);
                    if best.is_none_or(|(b, _)| a > b) {
                        best = Some((a, j));
                    }
                }
                best
            };
            let best = pick(&ch.candidates[i], &ch).or_else(|| pick(&ch.blocks2[d], &ch));
            let (_, j) = best.expect("feasibility checked");
            ch.link(i, j as usize);
        }
        ch.t = data.n1;
        Ok(ch)
    }

    #[inline]
    fn lp(&self, i: usize, j: usize) -> f64 {
        self.lik.log_pair_rows(self.data.a_row(i), self.data.b_row(j))
    }

    #[inline]
    fn ls1(&self, i: usize) -> f64 {
        self.lik.log_single_row(self.data.a_row(i))
    }

    #[inline]
    fn ls2(&self, j: usize) -> f64 {
        self.lik.log_single_row(self.data.b_row(j))
    }

    /// `n` unconstrained Metropolis moves.
    pub fn unconstrained_moves<R: Rng + ?Sized>(&mut self, n: usize, rng: &mut R) {
        if self.active_blocks.is_empty() {
            return;
        }
        for _ in 0..n {
            let b = self.active_blocks[rng.random_range(0..self.active_blocks.len())];
            let r: f64 = rng.random();
            self.stats.proposed += 1;
            let accepted = if r < 0.3 {
                self.try_add(b, rng)
            } else if r < 0.6 {
                self.try_delete(b, rng)
            } else {
                self.try_switch(b, rng)
            };
            if accepted {
                self.stats.accepted += 1;
            }
        }
    }

    fn prior_step(&self, from: usize, to: usize) -> f64 {
        (self.log_pt[to] - self.log_count[to]) - (self.log_pt[from] - self.log_count[from])
    }

    fn try_add<R: Rng + ?Sized>(&mut self, b: usize, rng: &mut R) -> bool {
        let (u1, u2) = (self.free1[b].len(), self.free2[b].len());
        if u1 == 0 || u2 == 0 || self.t + 1 >= self.log_pt.len() {
            return false;
        }
        let i = self.free1[b].choose(rng) as usize;
        let j = self.free2[b].choose(rng) as usize;
        let tb = self.linked1[b].len();
        let log_r = self.lp(i, j) - self.ls1(i) - self.ls2(j)
            + self.prior_step(self.t, self.t + 1)
            + ((u1 * u2) as f64 / (tb + 1) as f64).ln();
        if accept(log_r, rng) {
            self.link(i, j);
            self.free1[b].remove(i as u32);
            self.free2[b].remove(j as u32);
            self.linked1[b].insert(i as u32);
            self.t += 1;
            true
        } else {
            false
        }
    }

    fn try_delete<R: Rng + ?Sized>(&mut self, b: usize, rng: &mut R) -> bool {
        let tb = self.linked1[b].len();
        if tb == 0 {
            return false;
        }
        let (u1, u2) = (self.free1[b].len(), self.free2[b].len());
        let i = self.linked1[b].choose(rng) as usize;
        let j = self.forward[i].expect("linked") as usize;
        let log_r = self.ls1(i) + self.ls2(j) - self.lp(i, j)
            + self.prior_step(self.t, self.t - 1)
            + (tb as f64 / ((u1 + 1) * (u2 + 1)) as f64).ln();
        if accept(log_r, rng) {
            self.forward[i] = None;
            self.backward[j] = None;
            self.linked1[b].remove(i as u32);
            self.free1[b].insert(i as u32);
            self.free2[b].insert(j as u32);
            self.t -= 1;
            true
        } else {
            false
        }
    }

    fn try_switch<R: Rng + ?Sized>(&mut self, b: usize, rng: &mut R) -> bool {
        let tb = self.linked1[b].len();
        let n2b = self.blocks2[b].len();
        if tb == 0 || n2b < 2 {
            return false;
        }
        let i = self.linked1[b].choose(rng) as usize;
        let j = self.forward[i].expect("linked") as usize;
        // uniform over the block's file-2 records other than j
        let mut k = rng.random_range(0..n2b - 1);
        if self.blocks2[b][k] as usize == j {
            k = n2b - 1;
        }
        let j3 = self.blocks2[b][k] as usize;
        match self.backward[j3] {
            None => {
                let log_r = self.lp(i, j3) + self.ls2(j) - self.lp(i, j) - self.ls2(j3);
                if accept(log_r, rng) {
                    self.backward[j] = None;
                    self.link(i, j3);
                    self.free2[b].remove(j3 as u32);
                    self.free2[b].insert(j as u32);
                    return true;
                }
            }
            Some(i4) => {
                let i4 = i4 as usize;
                let log_r = self.lp(i, j3) + self.lp(i4, j) - self.lp(i, j) - self.lp(i4, j3);
                if accept(log_r, rng) {
                    self.link(i, j3);
                    self.link(i4, j);
                    return true;
                }
            }
        }
        false
    }

    fn proposal_prob(&self, i: usize, j: u32) -> f64 {
        let d = self.data.dom1[i];
        let n2b = self.blocks2[d].len() as f64;
        let cand = &self.candidates[i];
        if cand.is_empty() {
            return 1.0 / n2b;
        }
        let inside = cand.binary_search(&j).is_ok() as u8 as f64;
        self.epsilon / n2b + (1.0 - self.epsilon) * inside / cand.len() as f64
    }

    /// One systematic scan of the constrained kernel. `extra(i, j)` is an
    /// additional log-likelihood of linking `i` to `j` (zero without feedback).
    /// Returns the indices of file-1 records whose partner changed.
    pub fn constrained_sweep<R, F>(&mut self, rng: &mut R, extra: F, changed: &mut Vec<usize>)
    where
        R: Rng + ?Sized,
        F: Fn(usize, usize) -> f64,
    {
        changed.clear();
        for i in 0..self.data.n1 {
            let d = self.data.dom1[i];
            let j = self.forward[i].expect("constrained chain links every record") as usize;
            let cand = &self.candidates[i];
            let jn = if cand.is_empty() || rng.random::<f64>() < self.epsilon {
                let bl = &self.blocks2[d];
                bl[rng.random_range(0..bl.len())]
            } else {
                cand[rng.random_range(0..cand.len())]
            } as usize;
            if jn == j {
                continue;
            }
            self.stats.proposed += 1;
            let hastings = (self.proposal_prob(i, j as u32) / self.proposal_prob(i, jn as u32)).ln();
            match self.backward[jn] {
                None => {
                    let log_r = self.lp(i, jn) + self.ls2(j) - self.lp(i, j) - self.ls2(jn)
                        + extra(i, jn)
                        - extra(i, j)
                        + hastings;
                    if accept(log_r, rng) {
                        self.backward[j] = None;
                        self.link(i, jn);
                        self.stats.accepted += 1;
                        changed.push(i);
                    }
                }
                Some(i2) => {
                    let i2 = i2 as usize;
                    let log_r = self.lp(i, jn) + self.lp(i2, j) - self.lp(i, j) - self.lp(i2, jn)
                        + extra(i, jn)
                        + extra(i2, j)
                        - extra(i, j)
                        - extra(i2, jn)
                        + hastings;
                    if accept(log_r, rng) {
                        self.link(i, jn);
                        self.link(i2, j);
                        self.stats.accepted += 1;
                        changed.push(i);
                        changed.push(i2);
                    }
                }
            }
        }
    }
}

#[inline]
fn accept<R: Rng + ?Sized>(log_r: f64, rng: &mut R) -> bool {
    log_r >= 0.0 || rng.random::<f64>().ln() < log_r
}

/// For each file-1 record, the sorted same-block file-2 records agreeing on
/// at least `h − 1` key fields.
fn candidate_sets(data: &KeyData, blocks2: &[Vec<u32>]) -> Vec<Vec<u32>> {
    let h = data.h;
    let mut out = vec![Vec::new(); data.n1];
    if h == 1 {
        // every record agrees on at least zero fields: plain uniform proposal
        return out;
    }
    let mut blocks1 = vec![Vec::new(); data.n_domains];
    for (i, &d) in data.dom1.iter().enumerate() {
        blocks1[d].push(i);
    }
    for d in 0..data.n_domains {
        if blocks1[d].is_empty() {
            continue;
        }
        let mut index: Vec<HashMap<Vec<u16>, Vec<u32>>> = vec![HashMap::new(); h];
        for &j in &blocks2[d] {
            let row = data.b_row(j as usize);
            for (skip, map) in index.iter_mut().enumerate() {
                if let Some(key) = leave_one_out(row, skip) {
                    map.entry(key).or_default().push(j);
                }
            }
        }
        for &i in &blocks1[d] {
            let row = data.a_row(i);
            let mut set: Vec<u32> = Vec::new();
            for (skip, map) in index.iter().enumerate() {
                if let Some(key) = leave_one_out(row, skip) {
                    if let Some(v) = map.get(&key) {
                        set.extend_from_slice(v);
                    }
                }
            }
            set.sort_unstable();
            set.dedup();
            out[i] = set;
        }
    }
    out
}

fn leave_one_out(row: &[u16], skip: usize) -> Option<Vec<u16>> {
    let key: Vec<u16> = row
        .iter()
        .enumerate()
        .filter(|&(l, _)| l != skip)
        .map(|(_, &v)| v)
        .collect();
    (!key.contains(&0)).then_some(key)
}
