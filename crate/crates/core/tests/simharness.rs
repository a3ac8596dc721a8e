use linksae::simharness::*;

fn small_spec() -> PopulationSpec {
    PopulationSpec {
        domain_sizes: vec![220, 150, 300, 180, 90, 260],
        ..PopulationSpec::default()
    }
}

fn budget() -> BayesBudget {
    BayesBudget {
        linkage_burn: 50,
        linkage_draws: 50,
        linkage_thin: 2,
        inner_len: 10,
        sae_burn: 300,
        sae_draws: 1500,
        epsilon: 0.1,
    }
}

#[test]
fn clean_keys_make_every_linked_estimator_collapse() {
    let mut spec = small_spec().without_perturbation();
    spec.unique_keys = true;
    let mut cfg = SimulationConfig::new(spec, 1, 400);
    cfg.bayes = budget();
    let pop = generate_population(&cfg.population, 3).unwrap();
    let out = run_single(&cfg, &pop, 21, 0).unwrap();
    assert!(out.errors.is_empty(), "{:?}", out.errors);
    let fs = out.fs_rates.unwrap();
    assert_eq!(fs.false_link_rate, 0.0);
    assert_eq!(fs.missed_link_rate, 0.0);
    let idx = |e: Estimator| cfg.estimators.iter().position(|&x| x == e).unwrap();

    let a = idx(Estimator::A);
    for e in [Estimator::B, Estimator::C, Estimator::D] {
        let k = idx(e);
        for (x, y) in out.coef[k].as_ref().unwrap().iter().zip(out.coef[a].as_ref().unwrap()) {
            assert!((x - y).abs() < 1e-8, "{e:?} coefficient {x} vs {y}");
        }
        for (x, y) in out.area[k].as_ref().unwrap().iter().zip(out.area[a].as_ref().unwrap()) {
            assert!((x.unwrap() - y.unwrap()).abs() < 1e-8, "{e:?} area");
        }
    }

    let s = idx(Estimator::AStar);
    let (ref_mean, ref_sd) = (out.coef[s].clone().unwrap(), out.posterior_sd[s].clone().unwrap());
    for e in [Estimator::CStar, Estimator::E, Estimator::F] {
        let k = idx(e);
        for (i, x) in out.coef[k].as_ref().unwrap().iter().enumerate() {
            assert!((x - ref_mean[i]).abs() < 3.0 * ref_sd[i], "{e:?} beta[{i}] {x} vs {}", ref_mean[i]);
        }
    }
}

#[test]
fn reports_do_not_depend_on_thread_count() {
    let mut cfg = SimulationConfig::new(small_spec(), 4, 250);
    cfg.bayes = BayesBudget {
        sae_burn: 50,
        sae_draws: 100,
        ..budget()
    };
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let two = rayon::ThreadPoolBuilder::new().num_threads(2).build().unwrap();
    let r1 = one.install(|| run_replications(&cfg, 99)).unwrap();
    let r2 = two.install(|| run_replications(&cfg, 99)).unwrap();
    assert_eq!(serde_json::to_string(&r1).unwrap(), serde_json::to_string(&r2).unwrap());
    let r3 = run_replications(&cfg, 100).unwrap();
    assert_ne!(r1.coef(Estimator::A).unwrap().mean, r3.coef(Estimator::A).unwrap().mean);
}

#[test]
fn report_rows_follow_the_estimator_list() {
    let mut cfg = SimulationConfig::new(small_spec(), 5, 60);
    cfg.estimators = vec![Estimator::A, Estimator::C, Estimator::SampleMean];
    let rep = run_replications(&cfg, 4).unwrap();
    assert_eq!(rep.replications, 5);
    assert_eq!(rep.truth_beta, vec![3.576, 0.538]);
    assert_eq!(rep.area_truth.len(), 6);
    assert!(rep.coef(Estimator::SampleMean).is_none());
    assert!(rep.coef(Estimator::E).is_none());
    let sm = rep.area(Estimator::SampleMean).unwrap();
    assert!(sm.n_domains_used <= 6);
    let a = rep.area(Estimator::A).unwrap();
    assert_eq!(a.n_domains_used, 6);
    // per-replication ARB, averaged, bounds the ARB of the averaged predictions
    let preds: Vec<f64> = a.mean_by_domain.iter().map(|m| m.unwrap()).collect();
    let arb_of_mean = compute_arb(&preds, &rep.area_truth).unwrap();
    assert!(a.arb >= arb_of_mean - 1e-12);
    let avg: f64 = rep.avg_sample_sizes.iter().sum();
    assert!((avg - 60.0).abs() < 1e-9);
    let text = rep.to_text();
    assert!(text.contains("Sample mean"));
    let dir = tempfile::tempdir().unwrap();
    rep.write_csv(dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("areas.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn naive_slope_is_attenuated_by_false_links() {
    let mut cfg = SimulationConfig::new(PopulationSpec::default(), 6, 1000);
    cfg.estimators = vec![Estimator::A, Estimator::C, Estimator::D];
    let rep = run_replications(&cfg, 8).unwrap();
    let fl = rep.linkage_row("Fellegi").unwrap().false_link_rate;
    assert!(fl > 0.05, "false-link rate {fl}");
    let a = rep.coef(Estimator::A).unwrap().mean[1];
    let c = rep.coef(Estimator::C).unwrap().mean[1];
    let d = rep.coef(Estimator::D).unwrap().mean[1];
    assert!(c < 0.95 * a, "C slope {c} vs A {a}");
    assert!((d - a).abs() < (c - a).abs(), "D slope {d} vs C {c}");
}
