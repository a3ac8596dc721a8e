//! Hit-and-miss measurement model with the true values integrated out, and
//! the Gibbs updates of (W̃, ν, θ) given a matching.

use rand::Rng;
use rand_distr::{Beta, Binomial, Distribution, Gamma};

use crate::datamodel::{KeyFieldSchema, RecordFile};
use crate::error::{Error, Result};

use super::{HitMissParams, Hyperparams};

/// Selected key fields of both files, recoded as `0` = missing, `1..=k`.
#[derive(Debug, Clone)]
pub(crate) struct KeyData {
    pub h: usize,
    pub cards: Vec<usize>,
    pub a: Vec<u16>,
    pub b: Vec<u16>,
    pub n1: usize,
    pub n2: usize,
    pub dom1: Vec<usize>,
    pub dom2: Vec<usize>,
    pub n_domains: usize,
    /// Per field, observed-value counts over both files (index 0 = missing).
    pub all_counts: Vec<Vec<u64>>,
}

impl KeyData {
    pub fn new(f1: &RecordFile, f2: &RecordFile, n_domains: usize, keys: &[KeyFieldSchema]) -> Result<Self> {
        if keys.is_empty() {
            return Err(Error::InvalidInput("no key fields selected".into()));
        }
        let h = keys.len();
        let mut cols = Vec::with_capacity(h);
        for k in keys {
            match (f1.field_index(&k.name), f2.field_index(&k.name)) {
                (Some(a), Some(b)) => cols.push((a, b)),
                _ => {
                    return Err(Error::InvalidInput(format!(
                        "key field `{}` not present in both files",
                        k.name
                    )))
                }
            }
        }
        let cards: Vec<usize> = keys.iter().map(|k| k.cardinality as usize).collect();
        let recode = |file: &RecordFile, side: usize| -> Result<Vec<u16>> {
            let mut out = Vec::with_capacity(file.len() * h);
            for r in 0..file.len() {
                for (l, &(ca, cb)) in cols.iter().enumerate() {
                    let c = if side == 0 { ca } else { cb };
                    match file.key(r, c) {
                        None => out.push(0),
                        Some(v) if v >= 1 && (v as usize) <= cards[l] => out.push(v),
                        Some(v) => {
                            return Err(Error::InvalidInput(format!(
                                "record {} has code {v} outside 1..={} in `{}`",
                                file.ids()[r],
                                cards[l],
                                keys[l].name
                            )))
                        }
                    }
                }
            }
            Ok(out)
        };
        let a = recode(f1, 0)?;
        let b = recode(f2, 1)?;
        for (name, dom) in [("file 1", f1.domains()), ("file 2", f2.domains())] {
            if dom.iter().any(|&d| d >= n_domains) {
                return Err(Error::InvalidInput(format!("{name} has a domain outside 1..={n_domains}")));
            }
        }
        let mut all_counts: Vec<Vec<u64>> = cards.iter().map(|&k| vec![0; k + 1]).collect();
        for codes in [&a, &b] {
            for row in codes.chunks(h) {
                for l in 0..h {
                    all_counts[l][row[l] as usize] += 1;
                }
            }
        }
        Ok(Self {
            h,
            cards,
            a,
            b,
            n1: f1.len(),
            n2: f2.len(),
            dom1: f1.domains().to_vec(),
            dom2: f2.domains().to_vec(),
            n_domains,
            all_counts,
        })
    }

    #[inline]
    pub fn a_row(&self, i: usize) -> &[u16] {
        &self.a[i * self.h..(i + 1) * self.h]
    }

    #[inline]
    pub fn b_row(&self, j: usize) -> &[u16] {
        &self.b[j * self.h..(j + 1) * self.h]
    }

    /// Number of fields on which two records agree (both present and equal).
    pub fn agreement(&self, i: usize, j: usize) -> usize {
        self.a_row(i)
            .iter()
            .zip(self.b_row(j))
            .filter(|(&x, &y)| x != 0 && x == y)
            .count()
    }
}

/// ν, θ plus the per-field quantities the move ratios need.
#[derive(Debug, Clone)]
pub(crate) struct FieldLik {
    pub params: HitMissParams,
    /// `(1 − ν_l) / k_l`.
    c: Vec<f64>,
    /// `log(ν θ(w) + c)`, index 0 (missing) = 0.
    log_single: Vec<Vec<f64>>,
}

impl FieldLik {
    pub fn new(params: HitMissParams) -> Self {
        let mut s = Self {
            c: Vec::new(),
            log_single: Vec::new(),
            params,
        };
        s.refresh();
        s
    }

    pub fn refresh(&mut self) {
        let p = &self.params;
        self.c = p
            .nu
            .iter()
            .zip(&p.theta)
            .map(|(&nu, th)| (1.0 - nu) / th.len() as f64)
            .collect();
        self.log_single = p
            .nu
            .iter()
            .zip(&p.theta)
            .zip(&self.c)
            .map(|((&nu, th), &c)| {
                std::iter::once(0.0)
                    .chain(th.iter().map(|&t| (nu * t + c).ln()))
                    .collect()
            })
            .collect();
    }

    #[inline]
    pub fn log_single_row(&self, row: &[u16]) -> f64 {
        row.iter()
            .enumerate()
            .map(|(l, &w)| self.log_single[l][w as usize])
            .sum()
    }

    /// `log Σ_w̃ θ(w̃) h(x|w̃) h(y|w̃)` summed over fields.
    #[inline]
    pub fn log_pair_rows(&self, x: &[u16], y: &[u16]) -> f64 {
        let mut s = 0.0;
        for l in 0..x.len() {
            let (xv, yv) = (x[l] as usize, y[l] as usize);
            if xv == 0 {
                s += self.log_single[l][yv];
            } else if yv == 0 {
                s += self.log_single[l][xv];
            } else {
                let nu = self.params.nu[l];
                let c = self.c[l];
                let th = &self.params.theta[l];
                let (tx, ty) = (th[xv - 1], th[yv - 1]);
                let mut v = nu * c * (tx + ty) + c * c;
                if xv == yv {
                    v += nu * nu * tx;
                }
                s += v.ln();
            }
        }
        s
    }
}

/// Draws `(W̃, z)` given the matching, then `ν | z` and `θ | W̃`.
///
/// Singletons are handled in aggregate by observed value: hits are binomial,
/// and every miss (or missing observation) draws its true value from θ.
pub(crate) fn gibbs_params<R: Rng + ?Sized>(
    data: &KeyData,
    forward: &[Option<u32>],
    lik: &mut FieldLik,
    hyper: &Hyperparams,
    update_nu: bool,
    rng: &mut R,
) {
    let h = data.h;
    for l in 0..h {
        let k = data.cards[l];
        let nu = lik.params.nu[l];
        let c = (1.0 - nu) / k as f64;
        let theta = lik.params.theta[l].clone();

        // singleton observed counts = all records minus linked ones
        let mut single: Vec<u64> = data.all_counts[l].clone();
        let mut ent = vec![0u64; k];
        let (mut hits, mut misses) = (0u64, 0u64);
        let mut pool = 0u64;
        for (i, p) in forward.iter().enumerate() {
            let Some(j) = *p else { continue };
            let x = data.a[i * h + l] as usize;
            let y = data.b[j as usize * h + l] as usize;
            single[x] -= 1;
            single[y] -= 1;
            match (x, y) {
                (0, 0) => pool += 1,
                (0, w) | (w, 0) => {
                    let tw = nu * theta[w - 1];
                    if rng.random::<f64>() * (tw + c) < tw {
                        ent[w - 1] += 1;
                        hits += 1;
                    } else {
                        misses += 1;
                        pool += 1;
                    }
                }
                (x, y) => {
                    let (tx, ty) = (theta[x - 1], theta[y - 1]);
                    let w11 = if x == y { nu * nu * tx } else { 0.0 };
                    let w10 = nu * tx * c;
                    let w01 = nu * ty * c;
                    let w00 = c * c;
                    let r = rng.random::<f64>() * (w11 + w10 + w01 + w00);
                    if r < w11 {
                        ent[x - 1] += 1;
                        hits += 2;
                    } else if r < w11 + w10 {
                        ent[x - 1] += 1;
                        hits += 1;
                        misses += 1;
                    } else if r < w11 + w10 + w01 {
                        ent[y - 1] += 1;
                        hits += 1;
                        misses += 1;
                    } else {
                        pool += 1;
                        misses += 2;
                    }
                }
            }
        }
        pool += single[0];
        for w in 1..=k {
            let n = single[w];
            if n == 0 {
                continue;
            }
            let tw = nu * theta[w - 1];
            let hw = binomial(n, tw / (tw + c), rng);
            ent[w - 1] += hw;
            hits += hw;
            misses += n - hw;
            pool += n - hw;
        }
        multinomial_add(pool, &theta, &mut ent, rng);

        if update_nu {
            let beta = Beta::new(hyper.nu_a + hits as f64, hyper.nu_b + misses as f64)
                .expect("positive Beta parameters");
            lik.params.nu[l] = beta.sample(rng).clamp(1e-12, 1.0 - 1e-12);
        }
        lik.params.theta[l] = dirichlet(
            &ent.iter().map(|&e| hyper.theta_alpha + e as f64).collect::<Vec<_>>(),
            rng,
        );
    }
    lik.refresh();
}

pub(crate) fn binomial<R: Rng + ?Sized>(n: u64, p: f64, rng: &mut R) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("valid binomial").sample(rng)
}

/// Adds a Multinomial(n, p) draw to `out` via sequential binomials.
pub(crate) fn multinomial_add<R: Rng + ?Sized>(n: u64, p: &[f64], out: &mut [u64], rng: &mut R) {
    let mut left = n;
    let mut mass = 1.0;
    for (w, &pw) in p.iter().enumerate() {
        if left == 0 {
            break;
        }
        if w + 1 == p.len() {
            out[w] += left;
            break;
        }
        let q = if mass > 0.0 { (pw / mass).clamp(0.0, 1.0) } else { 1.0 };
        let x = binomial(left, q, rng);
        out[w] += x;
        left -= x;
        mass -= pw;
    }
}

/// Dirichlet draw by normalised gammas; sums to 1 up to rounding.
pub(crate) fn dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    let mut g: Vec<f64> = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("positive shape").sample(rng).max(1e-300))
        .collect();
    let s: f64 = g.iter().sum();
    for v in &mut g {
        *v /= s;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn pair_term_matches_explicit_sum() {
        let params = HitMissParams {
            nu: vec![0.7],
            theta: vec![vec![0.2, 0.5, 0.3]],
        };
        let lik = FieldLik::new(params.clone());
        let hm = |w: usize, t: usize| 0.7 * (w == t) as u8 as f64 + 0.3 / 3.0;
        for x in 0..=3u16 {
            for y in 0..=3u16 {
                let mut want = 0.0;
                for t in 1..=3usize {
                    let fx = if x == 0 { 1.0 } else { hm(x as usize, t) };
                    let fy = if y == 0 { 1.0 } else { hm(y as usize, t) };
                    want += params.theta[0][t - 1] * fx * fy;
                }
                let got = lik.log_pair_rows(&[x], &[y]).exp();
                assert!((got - want).abs() < 1e-14, "{x} {y}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn multinomial_conserves_total() {
        let mut rng = rng_from_seed(3);
        let mut out = vec![0u64; 4];
        multinomial_add(1000, &[0.1, 0.2, 0.3, 0.4], &mut out, &mut rng);
        assert_eq!(out.iter().sum::<u64>(), 1000);
    }

    #[test]
    fn dirichlet_sums_to_one() {
        let mut rng = rng_from_seed(9);
        let d = dirichlet(&[1.0, 2.0, 0.5, 7.0], &mut rng);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
