//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use linksae::datamodel::RecordFile;
use nalgebra::{DMatrix, DVector};

pub fn record_file(keys: &[Vec<Option<u16>>], domains: &[usize]) -> RecordFile {
    let h = keys.first().map(|r| r.len()).unwrap_or(0);
    RecordFile::new(
        (0..keys.len()).map(|i| format!("r{i}")).collect(),
        (0..h).map(|l| format!("k{l}")).collect(),
        keys.iter().flatten().copied().collect(),
        domains.to_vec(),
    )
    .unwrap()
}

/// Every one-to-one partial map from `n1` rows into `n2` columns.
pub fn all_matchings(n1: usize, n2: usize) -> Vec<Vec<Option<usize>>> {
    let mut out = Vec::new();
    let mut cur = vec![None; n1];
    fn rec(i: usize, n2: usize, cur: &mut Vec<Option<usize>>, out: &mut Vec<Vec<Option<usize>>>) {
        if i == cur.len() {
            out.push(cur.clone());
            return;
        }
        cur[i] = None;
        rec(i + 1, n2, cur, out);
        for c in 0..n2 {
            if cur[..i].contains(&Some(c)) {
                continue;
            }
            cur[i] = Some(c);
            rec(i + 1, n2, cur, out);
        }
        cur[i] = None;
    }
    rec(0, n2, &mut cur, &mut out);
    out
}

/// Exact posterior over matchings of a single block when every key field is
/// binary, ν ~ Beta(1,1) and θ ~ Dir(1,1) per field and `p_t` is the prior on
/// the number of links. ν and θ are integrated on a midpoint grid; the true
/// values are summed explicitly.
///
/// `extra(m)` multiplies the key likelihood (1 for key-only posteriors).
pub fn exact_linkage_posterior(
    w1: &[Vec<Option<u16>>],
    w2: &[Vec<Option<u16>>],
    p_t: &[f64],
    extra: impl Fn(&[Option<usize>]) -> f64,
) -> Vec<(Vec<Option<usize>>, f64)> {
    let h = w1[0].len();
    let configs = all_matchings(w1.len(), w2.len());
    let mut n_with_t = vec![0usize; p_t.len()];
    for c in &configs {
        n_with_t[c.iter().flatten().count()] += 1;
    }
    let grid = 600;
    let hm = |obs: Option<u16>, truth: u16, nu: f64| match obs {
        None => 1.0,
        Some(w) => nu * if w == truth { 1.0 } else { 0.0 } + (1.0 - nu) / 2.0,
    };
    let mut weights = Vec::new();
    for c in &configs {
        let t = c.iter().flatten().count();
        let mut w = p_t[t] / n_with_t[t] as f64;
        for l in 0..h {
            let mut integral = 0.0;
            for a in 0..grid {
                let nu = (a as f64 + 0.5) / grid as f64;
                for b in 0..grid {
                    let th1 = (b as f64 + 0.5) / grid as f64;
                    let theta = [th1, 1.0 - th1];
                    let mut lik = 1.0;
                    for (i, r) in w1.iter().enumerate() {
                        let mut s = 0.0;
                        for v in 1..=2u16 {
                            let mut term = theta[v as usize - 1] * hm(r[l], v, nu);
                            if let Some(j) = c[i] {
                                term *= hm(w2[j][l], v, nu);
                            }
                            s += term;
                        }
                        lik *= s;
                    }
                    for (j, r) in w2.iter().enumerate() {
                        if c.contains(&Some(j)) {
                            continue;
                        }
                        let s: f64 = (1..=2u16).map(|v| theta[v as usize - 1] * hm(r[l], v, nu)).sum();
                        lik *= s;
                    }
                    integral += lik;
                }
            }
            w *= integral / (grid * grid) as f64;
        }
        w *= extra(c);
        weights.push(w);
    }
    let z: f64 = weights.iter().sum();
    configs.into_iter().zip(weights).map(|(c, w)| (c, w / z)).collect()
}

/// Gaussian log-density.
pub fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean).powi(2) / var)
}

/// Nested-error log-likelihood evaluated with dense matrices.
pub fn dense_loglik(y: &[f64], x: &DMatrix<f64>, domains: &[usize], beta: &DVector<f64>, s2e: f64, s2u: f64) -> f64 {
    let n = y.len();
    let mut v = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for k in 0..n {
            if domains[i] == domains[k] {
                v[(i, k)] += s2u;
            }
        }
        v[(i, i)] += s2e;
    }
    let r = DVector::from_column_slice(y) - x * beta;
    let chol = v.clone().cholesky().unwrap();
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let quad = r.dot(&chol.solve(&r));
    -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad)
}

/// Dense GLS β for given variance components.
pub fn dense_gls(y: &[f64], x: &DMatrix<f64>, domains: &[usize], s2e: f64, s2u: f64) -> DVector<f64> {
    let n = y.len();
    let mut v = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for k in 0..n {
            if domains[i] == domains[k] {
                v[(i, k)] += s2u;
            }
        }
        v[(i, i)] += s2e;
    }
    let vi = v.try_inverse().unwrap();
    let a = x.transpose() * &vi * x;
    let b = x.transpose() * &vi * DVector::from_column_slice(y);
    a.try_inverse().unwrap() * b
}

/// Random permutation with `P(π(i) = i) = λ` and every other target equally
/// likely: the identity with probability λ, otherwise a uniform derangement.
/// Returns π with `(A f)_i = f[π(i)]`.
pub fn mixture_permutation<R: rand::Rng>(n: usize, lambda: f64, rng: &mut R) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    if n < 2 || rng.random::<f64>() < lambda {
        return p;
    }
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &v)| i != v) {
            return p;
        }
    }
}

/// Permutation fixing exactly `n − m` uniformly chosen positions and
/// deranging the other `m`; exchangeable with `λ = 1 − m/n`.
pub fn partial_derangement<R: rand::Rng>(n: usize, m: usize, rng: &mut R) -> Vec<usize> {
    use rand::seq::{index::sample, SliceRandom};
    let mut p: Vec<usize> = (0..n).collect();
    if m < 2 {
        return p;
    }
    let moved: Vec<usize> = sample(rng, n, m).into_vec();
    let mut targets = moved.clone();
    loop {
        targets.shuffle(rng);
        if moved.iter().zip(&targets).all(|(a, b)| a != b) {
            break;
        }
    }
    for (a, b) in moved.iter().zip(&targets) {
        p[*a] = *b;
    }
    p
}

/// Profile ML by repeated grid refinement over (log σ²_e, log σ²_u), β
/// profiled out by dense GLS.
pub fn grid_ml(y: &[f64], x: &DMatrix<f64>, domains: &[usize]) -> (DVector<f64>, f64, f64) {
    let prof = |le: f64, lu: f64| {
        let (se, su) = (le.exp(), lu.exp());
        let b = dense_gls(y, x, domains, se, su);
        dense_loglik(y, x, domains, &b, se, su)
    };
    let (mut ce, mut cu) = (0.0f64, 0.0f64);
    let mut half = 7.0f64;
    let k = 20;
    for _ in 0..30 {
        let mut best = (f64::NEG_INFINITY, ce, cu);
        for a in -k..=k {
            for b in -k..=k {
                let le = ce + half * a as f64 / k as f64;
                let lu = cu + half * b as f64 / k as f64;
                let v = prof(le, lu);
                if v > best.0 {
                    best = (v, le, lu);
                }
            }
        }
        ce = best.1;
        cu = best.2;
        half /= 3.0;
    }
    let (se, su) = (ce.exp(), cu.exp());
    (dense_gls(y, x, domains, se, su), se, su)
}
