use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn linksae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_linksae"))
        .args(args)
        .env_remove("LINKSAE_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

/// A 4-domain population written by `generate`, with a sample of 120.
fn generated(dir: &Path) -> std::path::PathBuf {
    let cfg = write(
        dir,
        "gen.toml",
        r#"
sample_size = 120
[population]
domain_sizes = [60, 45, 80, 50]
linkage_keys = ["day", "year", "gender"]
truth = { beta0 = 3.576, beta1 = 0.538, sigma_u = 1.5, sigma_e = 3.0 }
covariate = { log_mean = 2.9, log_mean_spread = 0.6, log_sd = 0.5 }
[[population.key_fields]]
name = "gender"
cardinality = 2
levels = ["M", "F"]
typo_prob = 0.02
missing_prob = 0.02
[[population.key_fields]]
name = "day"
cardinality = 31
typo_prob = 0.02
missing_prob = 0.02
[[population.key_fields]]
name = "year"
cardinality = 101
offset = 1912
typo_prob = 0.02
missing_prob = 0.02
"#,
    );
    let out = dir.join("gen");
    ok(&linksae(&["generate", "--config", &cfg, "--seed", "5", "--out", out.to_str().unwrap()]));
    out
}

#[test]
fn pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let g = generated(dir);
    for f in ["register.csv", "register.toml", "sample.csv", "perturbed.toml", "truth.csv", "population.csv", "manifest.json"] {
        assert!(g.join(f).is_file(), "{f}");
    }
    let files = format!(
        r#"
[file1]
data = "gen/sample.csv"
schema = "gen/perturbed.toml"
[file2]
data = "gen/register.csv"
schema = "gen/register.toml"
"#
    );

    let fs_cfg = write(dir, "fs.toml", &format!("output_dir = \"fs\"\ntruth = \"gen/truth.csv\"\n{files}\n[fs]\nkey_fields = [\"day\", \"year\", \"gender\"]\n"));
    ok(&linksae(&["link-fs", "--config", &fs_cfg]));
    let rates: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("fs/rates.json")).unwrap()).unwrap();
    assert!(rates["n_declared"].as_u64().unwrap() > 60);

    let fit_cfg = write(
        dir,
        "fit.toml",
        r#"
output_dir = "fit"
population = "gen/population.csv"
domain_prefix = "Area"
[linked]
links = "fs/links.csv"
[linked.file1]
data = "gen/sample.csv"
schema = "gen/perturbed.toml"
[linked.file2]
data = "gen/register.csv"
schema = "gen/register.toml"
"#,
    );
    ok(&linksae(&["sae-fit", "--config", &fit_cfg]));
    let areas = fs::read_to_string(dir.join("fit/areas.csv")).unwrap();
    assert!(areas.starts_with("domain,n_d,u_hat,prediction,g1,g2,g3,mse"));
    assert_eq!(areas.lines().count(), 5);

    let audit = dir.join("gen/truth.csv").display().to_string();
    let adj_out = dir.join("adj").display().to_string();
    ok(&linksae(&["sae-fit", "--config", &fit_cfg, "--adjusted", "--audit-file", &audit, "--out", &adj_out]));
    assert!(fs::read_to_string(dir.join("adj/areas.csv")).unwrap().contains("lambda"));

    let bayes_cfg = write(
        dir,
        "bayes.toml",
        &format!(
            "output_dir = \"hb\"\npopulation = \"gen/population.csv\"\ndomain_prefix = \"Area\"\nn_burn = 50\nn_draws = 100\ninner_len = 5\n{files}\n[linkage]\nkey_fields = [\"day\", \"year\", \"gender\"]\nn_burn = 20\nn_draws = 40\n"
        ),
    );
    ok(&linksae(&["sae-bayes", "--config", &bayes_cfg, "--strategy", "nonfeedback", "--seed", "3"]));
    let draws = fs::read_to_string(dir.join("hb/draws.csv")).unwrap();
    assert_eq!(draws.lines().count(), 41);
    assert!(dir.join("hb/pair_probs.csv").is_file());
    let fb_out = dir.join("fb").display().to_string();
    ok(&linksae(&["sae-bayes", "--config", &bayes_cfg, "--strategy", "feedback", "--seed", "3", "--out", &fb_out]));

    let lb_cfg = write(
        dir,
        "lb.toml",
        &format!("output_dir = \"lb\"\nseed = 9\ntruth = \"gen/truth.csv\"\n{files}\n[linkage]\nkey_fields = [\"day\", \"year\", \"gender\"]\nconstrained_subset = true\nn_burn = 20\nn_draws = 50\n"),
    );
    ok(&linksae(&["link-bayes", "--config", &lb_cfg]));
    assert!(dir.join("lb/links.csv").is_file() && dir.join("lb/rates.json").is_file());
}

const SIM: &str = r#"
seed = 11
[simulation]
replications = 3
n_sample = 150
estimators = ["A", "B", "C", "D", "A*", "C*", "E", "F", "sample-mean"]
bayes = { linkage_burn = 20, linkage_draws = 20, linkage_thin = 2, inner_len = 5, sae_burn = 50, sae_draws = 100 }
[simulation.population]
domain_sizes = [300, 200, 250, 120, 90]
linkage_keys = ["day", "year", "gender"]
truth = { beta0 = 3.576, beta1 = 0.538, sigma_u = 1.5, sigma_e = 3.0 }
covariate = { log_mean = 2.9, log_mean_spread = 0.6, log_sd = 0.5 }
[[simulation.population.key_fields]]
name = "gender"
cardinality = 2
typo_prob = 0.01
missing_prob = 0.01
[[simulation.population.key_fields]]
name = "day"
cardinality = 31
typo_prob = 0.01
missing_prob = 0.01
[[simulation.population.key_fields]]
name = "year"
cardinality = 101
typo_prob = 0.01
missing_prob = 0.01
"#;

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn simulate_is_byte_identical_and_reportable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "sim.toml", SIM);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&linksae(&["simulate", "--config", &cfg, "--seed", "42", "--out", a.to_str().unwrap()]));
    ok(&linksae(&["--threads", "1", "simulate", "--config", &cfg, "--seed", "42", "--out", b.to_str().unwrap()]));
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    let rep = linksae(&["report", "--dir", a.to_str().unwrap()]);
    ok(&rep);
    let text = String::from_utf8(rep.stdout).unwrap();
    assert!(text.contains("Population") && text.contains("3.576") && text.contains("0.538"));
    assert!(text.contains("Estimates A ") && text.contains("Sample mean") && text.contains("ARB"));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 42);
    assert_eq!(manifest["subcommand"], "simulate");
}

#[test]
fn every_subcommand_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let g = generated(dir);
    let g2 = dir.join("gen2");
    let cfg = dir.join("gen.toml").display().to_string();
    ok(&linksae(&["generate", "--config", &cfg, "--seed", "5", "--out", g2.to_str().unwrap()]));
    assert_eq!(dir_bytes(&g), dir_bytes(&g2));

    let files = "[file1]\ndata = \"gen/sample.csv\"\nschema = \"gen/perturbed.toml\"\n[file2]\ndata = \"gen/register.csv\"\nschema = \"gen/register.toml\"\n";
    let lb = write(dir, "lb.toml", &format!("{files}[linkage]\nkey_fields = [\"day\", \"year\", \"gender\"]\nn_burn = 10\nn_draws = 30\n"));
    let hb = write(
        dir,
        "hb.toml",
        &format!("population = \"gen/population.csv\"\ndomain_prefix = \"Area\"\nn_burn = 10\nn_draws = 30\ninner_len = 3\n{files}[linkage]\nkey_fields = [\"day\", \"year\", \"gender\"]\nn_burn = 10\nn_draws = 20\n"),
    );
    let fsc = write(dir, "fs.toml", &format!("{files}[fs]\nkey_fields = [\"day\", \"year\", \"gender\"]\n"));
    for (sub, cfg, extra) in [
        ("link-fs", &fsc, vec![]),
        ("link-bayes", &lb, vec![]),
        ("sae-bayes", &hb, vec!["--strategy", "feedback"]),
    ] {
        let run = |name: &str| {
            let out = dir.join(format!("{sub}-{name}"));
            let mut args = vec![sub, "--config", cfg.as_str(), "--seed", "8", "--out", out.to_str().unwrap()];
            args.extend(extra.iter().copied());
            ok(&linksae(&args));
            dir_bytes(&out)
        };
        assert_eq!(run("x"), run("y"), "{sub}");
    }
}

fn error_json(out: &Output) -> serde_json::Value {
    let err = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(err.lines().last().unwrap()).unwrap_or_else(|_| panic!("not JSON: {err}"))
}

#[test]
fn failures_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let out = linksae(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "usage");

    let cfg = write(dir, "bad.toml", "seed = 1\nreplicas = 3\n[simulation]\nreplications = 1\nn_sample = 10\n");
    let out = linksae(&["simulate", "--config", &cfg, "--out", dir.join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let e = error_json(&out);
    assert_eq!(e["error"], "config");
    assert!(e["message"].as_str().unwrap().contains("replicas"));

    let cfg = write(dir, "fit.toml", "population = \"nowhere/pop.csv\"\nunits = \"u.csv\"\n");
    let out = linksae(&["sae-fit", "--config", &cfg, "--out", dir.join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    assert!(error_json(&out)["message"].as_str().unwrap().contains("nowhere/pop.csv"));

    // a singular design is a computation failure
    fs::write(dir.join("pop.csv"), "domain,N_d,x\n1,50,2\n2,50,2\n3,50,2\n").unwrap();
    let mut units = String::from("domain,y,x\n");
    for d in 1..=3 {
        for i in 0..5 {
            units.push_str(&format!("{d},{},2\n", i as f64 + d as f64));
        }
    }
    fs::write(dir.join("u.csv"), units).unwrap();
    let cfg = write(dir, "fit2.toml", "population = \"pop.csv\"\nunits = \"u.csv\"\n");
    let out = linksae(&["sae-fit", "--config", &cfg, "--out", dir.join("o2").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(5));
    assert_eq!(error_json(&out)["error"], "computation");
}

#[test]
fn output_directory_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "g.toml", "output_dir = \"from_config\"\n[population]\ndomain_sizes = [20, 20]\nlinkage_keys = [\"day\"]\ntruth = { beta0 = 1.0, beta1 = 1.0, sigma_u = 1.0, sigma_e = 1.0 }\ncovariate = { log_mean = 1.0, log_mean_spread = 0.0, log_sd = 0.3 }\n[[population.key_fields]]\nname = \"day\"\ncardinality = 31\n");
    let env_dir = tmp.path().join("from_env");
    let out = Command::new(env!("CARGO_BIN_EXE_linksae"))
        .args(["generate", "--config", &cfg])
        .env("LINKSAE_OUT_DIR", &env_dir)
        .output()
        .unwrap();
    ok(&out);
    assert!(env_dir.join("register.csv").is_file());
    assert!(!tmp.path().join("from_config").exists());
    ok(&linksae(&["generate", "--config", &cfg]));
    assert!(tmp.path().join("from_config/register.csv").is_file());
}
