mod common;

use common::{dense_gls, exact_linkage_posterior, log_normal_pdf, record_file};
use linksae::datamodel::{KeyFieldSchema, MatchMatrix, RecordFile};
use linksae::linalg::ols;
use linksae::linkage_bayes::{LinkageConfig, LinkagePosterior};
use linksae::rng::rng_from_seed;
use linksae::sae_bayes::{
    draw_beta, gibbs_sae, run_feedback, run_nonfeedback, FeedbackOptions, LinkedInput, SaeParams, SaePrior,
    SigmaUPrior,
};
use linksae::sae_core::UnitSample;
use linksae::sae_linked::assemble_linked;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;

fn sim_sample(seed: u64, sizes: &[usize], beta: [f64; 2], su: f64, se: f64) -> UnitSample {
    let mut rng = rng_from_seed(seed);
    let z = Normal::new(0.0, 1.0).unwrap();
    let (mut y, mut x, mut dom) = (vec![], vec![], vec![]);
    for (d, &n) in sizes.iter().enumerate() {
        let u = su * z.sample(&mut rng);
        for _ in 0..n {
            let xi = 15.0 + 5.0 * z.sample(&mut rng) + d as f64 * 0.2;
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
        sizes.iter().map(|&n| (n * 25 + 10) as f64).collect(),
        (0..nd).flat_map(|d| [1.0, 15.0 + d as f64 * 0.2]).collect(),
        vec!["(Intercept)".into(), "x".into()],
    )
    .unwrap()
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

#[test]
fn beta_draws_match_closed_form_conditional() {
    let s = sim_sample(5, &[4, 9, 6, 12, 3], [1.0, 0.5], 1.0, 1.5);
    let (s2e, s2u) = (2.0, 0.8);
    let x = DMatrix::from_row_slice(s.n(), 2, &s.x);
    let mean = dense_gls(&s.y, &x, &s.domains, s2e, s2u);
    let mut v = DMatrix::<f64>::zeros(s.n(), s.n());
    for i in 0..s.n() {
        for k in 0..s.n() {
            if s.domains[i] == s.domains[k] {
                v[(i, k)] += s2u;
            }
        }
        v[(i, i)] += s2e;
    }
    let cov = (x.transpose() * v.try_inverse().unwrap() * &x).try_inverse().unwrap();
    let mut rng = rng_from_seed(6);
    let n = 10_000;
    let draws: Vec<Vec<f64>> = (0..n).map(|_| draw_beta(&s, s2e, s2u, &mut rng).unwrap()).collect();
    for k in 0..2 {
        let col: Vec<f64> = draws.iter().map(|d| d[k]).collect();
        let (m, _) = mean_sd(&col);
        let se = (cov[(k, k)] / n as f64).sqrt();
        assert!((m - mean[k]).abs() < 4.0 * se, "mean {k}: {m} vs {}", mean[k]);
        for l in 0..2 {
            let c: f64 = draws.iter().map(|d| (d[k] - mean[k]) * (d[l] - mean[l])).sum::<f64>() / n as f64;
            let scale = (cov[(k, k)] * cov[(l, l)]).sqrt();
            assert!((c - cov[(k, l)]).abs() < 0.05 * scale, "cov ({k},{l}): {c} vs {}", cov[(k, l)]);
        }
    }
}

#[test]
fn vanishing_random_effect_gives_ols() {
    let s = sim_sample(7, &[10, 15, 8, 20, 12], [2.0, 0.7], 0.0, 1.0);
    let prior = SaePrior {
        sigma_u: SigmaUPrior::Uniform { upper: Some(1e-6) },
        ..SaePrior::default()
    };
    let post = gibbs_sae(&s, &prior, 500, 4000, 21).unwrap();
    let b_ols = ols(&s.x, 2, &s.y, &s.covariate_names).unwrap();
    let mean = post.beta_mean();
    let sd = post.beta_sd();
    for k in 0..2 {
        assert!((mean[k] - b_ols[k]).abs() < 4.0 * sd[k] / (4000f64).sqrt(), "{k}: {} vs {}", mean[k], b_ols[k]);
    }
}

#[test]
fn recovers_true_coefficients_on_table_sized_domains() {
    let sizes = [107, 88, 92, 92, 11, 10, 4, 12, 18, 18, 4, 16, 9, 107, 110, 87, 87, 130];
    let truth = [3.576, 0.538];
    let s = sim_sample(1913, &sizes, truth, 1.5, 3.0);
    let post = gibbs_sae(&s, &SaePrior::default(), 500, 3000, 99).unwrap();
    let (m, sd) = (post.beta_mean(), post.beta_sd());
    for k in 0..2 {
        assert!((m[k] - truth[k]).abs() < 3.0 * sd[k], "β{k}: {} ± {} vs {}", m[k], sd[k], truth[k]);
    }
}

/// Two files whose keys identify every record exactly.
fn unique_key_files(seed: u64, n_dom: usize, per: usize, beta: [f64; 2]) -> (RecordFile, RecordFile, Vec<KeyFieldSchema>) {
    let mut rng = rng_from_seed(seed);
    let z = Normal::new(0.0, 1.0).unwrap();
    let mut keys = Vec::new();
    let mut dom = Vec::new();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for d in 0..n_dom {
        let u = 0.8 * z.sample(&mut rng);
        for i in 0..per {
            let id = (d * per + i) as u16;
            keys.push(vec![Some(1 + id % 40), Some(1 + id / 40), Some(1 + (id * 7) % 40)]);
            dom.push(d);
            let xi = 5.0 + 2.0 * z.sample(&mut rng);
            x.push(xi);
            y.push(beta[0] + beta[1] * xi + u + z.sample(&mut rng));
        }
    }
    let f1 = record_file(&keys, &dom).with_response(y).unwrap();
    let f2 = record_file(&keys, &dom).with_covariates(vec!["x".into()], x).unwrap();
    let schema = vec![
        KeyFieldSchema::new("k0", 40),
        KeyFieldSchema::new("k1", 40),
        KeyFieldSchema::new("k2", 40),
    ];
    (f1, f2, schema)
}

fn names3() -> Vec<String> {
    vec!["k0".into(), "k1".into(), "k2".into()]
}

#[test]
fn nonfeedback_collapses_to_fixed_linkage() {
    let (n_dom, per) = (5, 12);
    let (f1, f2, schema) = unique_key_files(3, n_dom, per, [1.0, 0.8]);
    let pop_sizes = vec![100.0; n_dom];
    let pop_x = vec![5.0; n_dom];
    let truth = MatchMatrix::from_pairs((0..f1.len()).map(|j| (j, j)), f1.domains(), f2.domains()).unwrap();
    let sample = assemble_linked(&f1, &f2, &truth, &pop_sizes, &pop_x).unwrap();
    let direct = gibbs_sae(&sample, &SaePrior::default(), 500, 3000, 1).unwrap();

    let input = LinkedInput {
        f1: &f1,
        f2: &f2,
        n_domains: n_dom,
        schema: &schema,
        pop_sizes: &pop_sizes,
        pop_cov_means: &pop_x,
    };
    let mut cfg = LinkageConfig::new(names3());
    cfg.n_burn = 100;
    cfg.n_draws = 3000;
    cfg.thin = 1;
    let (nf100, link) = run_nonfeedback(&input, &SaePrior::default(), &cfg, 100, 2).unwrap();
    assert!(link.pair_probs.iter().all(|p| p.j != p.j2 || p.prob > 0.99));
    let (nf1, _) = run_nonfeedback(&input, &SaePrior::default(), &cfg, 1, 3).unwrap();

    let (m0, s0) = (direct.beta_mean(), direct.beta_sd());
    for post in [&nf100, &nf1] {
        let (m, s) = (post.beta_mean(), post.beta_sd());
        for k in 0..2 {
            // generous allowance for autocorrelation of the L = 1 chain
            let mc = 6.0 * s0[k] / (3000f64).sqrt();
            assert!((m[k] - m0[k]).abs() < mc, "β{k}: {} vs {}", m[k], m0[k]);
            assert!((s[k] / s0[k] - 1.0).abs() < 0.15, "sd β{k}: {} vs {}", s[k], s0[k]);
        }
    }
}

fn pair_prob(post: &LinkagePosterior, j: usize, j2: usize) -> f64 {
    post.prob(j, j2)
}

/// Four well-identified domains plus one domain holding two records with
/// identical keys in both files; swapping them breaks a steep regression.
fn confusable_files() -> (RecordFile, RecordFile, Vec<KeyFieldSchema>) {
    let mut rng = rng_from_seed(17);
    let z = Normal::new(0.0, 1.0).unwrap();
    let mut keys = Vec::new();
    let mut dom = Vec::new();
    let mut x = Vec::new();
    let mut y = Vec::new();
    // domain 0: records 0 and 1 share keys
    keys.push(vec![Some(1), Some(1), Some(1)]);
    keys.push(vec![Some(1), Some(1), Some(1)]);
    dom.extend([0, 0]);
    x.extend([0.0, 1.0]);
    for d in 1..5 {
        for i in 0..8 {
            let id = (d * 8 + i) as u16;
            keys.push(vec![Some(2 + id % 30), Some(2 + (id / 30) % 30), Some(2 + (id * 7) % 30)]);
            dom.push(d);
            x.push(rng.random::<f64>() * 2.0);
        }
    }
    for &xi in &x {
        y.push(1.0 + 10.0 * xi + 0.01 * z.sample(&mut rng));
    }
    let f1 = record_file(&keys, &dom).with_response(y).unwrap();
    let f2 = record_file(&keys, &dom).with_covariates(vec!["x".into()], x).unwrap();
    let schema = (0..3).map(|l| KeyFieldSchema::new(format!("k{l}"), 32)).collect();
    (f1, f2, schema)
}

#[test]
fn feedback_resolves_confusable_pair() {
    let (f1, f2, schema) = confusable_files();
    let pop_sizes = vec![50.0; 5];
    let pop_x = vec![1.0; 5];
    let input = LinkedInput {
        f1: &f1,
        f2: &f2,
        n_domains: 5,
        schema: &schema,
        pop_sizes: &pop_sizes,
        pop_cov_means: &pop_x,
    };
    let mut cfg = LinkageConfig::new(names3());
    cfg.n_burn = 500;
    cfg.n_draws = 4000;
    let prior = SaePrior::default();
    let (_, fb) = run_feedback(&input, &prior, &cfg, &FeedbackOptions::default(), 5).unwrap();
    let (_, keys_only) = run_nonfeedback(&input, &prior, &cfg, 5, 6).unwrap();
    let p_fb = pair_prob(&fb, 0, 0);
    let p_key = pair_prob(&keys_only, 0, 0);
    println!("feedback {p_fb:.3}, keys only {p_key:.3}");
    assert!(p_fb >= 0.9);
    assert!((p_key - 0.5).abs() < 0.1);

    // weight 0: same linkage marginal as the key-only chain
    let off = FeedbackOptions {
        weight: 0.0,
        fixed: None,
    };
    let (_, fb0) = run_feedback(&input, &prior, &cfg, &off, 7).unwrap();
    assert!((pair_prob(&fb0, 0, 0) - p_key).abs() < 0.06, "{} vs {p_key}", pair_prob(&fb0, 0, 0));
}

#[test]
fn feedback_with_fixed_parameters_matches_enumeration() {
    let w1 = vec![vec![Some(1), Some(1)], vec![Some(2), Some(1)], vec![Some(1), Some(2)]];
    let w2 = vec![
        vec![Some(1), Some(1)],
        vec![Some(2), Some(2)],
        vec![Some(1), Some(2)],
        vec![Some(1), Some(2)],
    ];
    let d1 = [0, 0, 1];
    let d2 = [0, 0, 0, 1];
    let y = [0.1, 1.2, 0.4];
    let x = [0.0, 1.0, 2.0, 0.5];
    let (b0, b1, s2e) = (0.0, 1.0, 0.5);
    let f1 = record_file(&w1, &d1).with_response(y.to_vec()).unwrap();
    let f2 = record_file(&w2, &d2).with_covariates(vec!["x".into()], x.to_vec()).unwrap();
    let schema = vec![KeyFieldSchema::new("k0", 2), KeyFieldSchema::new("k1", 2)];
    let exact = exact_linkage_posterior(&w1, &w2, &[0.0, 0.0, 0.0, 1.0], |c| {
        let mut lp = 0.0;
        for (i, j) in c.iter().enumerate() {
            let Some(j) = *j else { return 0.0 };
            if d1[i] != d2[j] {
                return 0.0;
            }
            lp += log_normal_pdf(y[i], b0 + b1 * x[j], s2e);
        }
        lp.exp()
    });
    let pop_sizes = vec![10.0, 10.0];
    let pop_x = vec![1.0, 1.0];
    let input = LinkedInput {
        f1: &f1,
        f2: &f2,
        n_domains: 2,
        schema: &schema,
        pop_sizes: &pop_sizes,
        pop_cov_means: &pop_x,
    };
    let mut cfg = LinkageConfig::new(vec!["k0".into(), "k1".into()]);
    cfg.n_burn = 1000;
    cfg.n_draws = 100_000;
    cfg.store_draws = true;
    let opts = FeedbackOptions {
        weight: 1.0,
        fixed: Some(SaeParams {
            beta: vec![b0, b1],
            u: vec![0.0, 0.0],
            sigma2_e: s2e,
            sigma2_u: 1.0,
        }),
    };
    let (_, link) = run_feedback(&input, &SaePrior::default(), &cfg, &opts, 31).unwrap();
    let draws = link.draws.as_ref().unwrap();
    let mut freq: HashMap<Vec<Option<usize>>, f64> = HashMap::new();
    for d in draws {
        let key: Vec<Option<usize>> = (0..3).map(|j| d.partner_of(j)).collect();
        *freq.entry(key).or_insert(0.0) += 1.0 / draws.len() as f64;
    }
    let tv: f64 = 0.5
        * exact
            .iter()
            .map(|(c, p)| (freq.get(c).copied().unwrap_or(0.0) - p).abs())
            .sum::<f64>();
    assert!(tv < 0.03, "total variation {tv}");
}

#[test]
fn posterior_mean_is_stable_under_reseeding() {
    let s = sim_sample(8, &[6, 7, 8, 9, 10], [0.5, 1.5], 1.0, 1.0);
    let a = gibbs_sae(&s, &SaePrior::default(), 200, 3000, 1).unwrap();
    let b = gibbs_sae(&s, &SaePrior::default(), 200, 3000, 2).unwrap();
    let (ma, sa) = (a.beta_mean(), a.beta_sd());
    let mb = b.beta_mean();
    for k in 0..2 {
        assert!((ma[k] - mb[k]).abs() < 6.0 * sa[k] / (3000f64).sqrt());
    }
}
