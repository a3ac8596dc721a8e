use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{
    self, FileInput, GenerateConfig, LinkBayesConfig, LinkFsConfig, LinkedFiles, SaeBayesConfig, SaeFitConfig,
    SimulateConfig, Strategy,
};
use super::{write_manifest, Manifest, RunCtx};
use crate::datamodel::{link_error_rates, validate_file, MatchMatrix, RecordFile, TruthDeck};
use crate::error::{Error, Result};
use crate::io::{
    fmt_f64, links_to_matrix, read_lambda, read_links, read_population, read_record_file, read_units,
    write_links, write_population, write_record_file, writer, FileSchema, LinkRow, PopulationTable,
};
use crate::linkage_bayes::{point_estimate, run_mcmc, select_keys, CPrior, LinkagePosterior};
use crate::linkage_fs;
use crate::rng::{derive_seed, rng_from_seed};
use crate::sae_bayes::{gibbs_sae, run_feedback, run_nonfeedback, FeedbackOptions, LinkedInput, SaePosterior};
use crate::sae_core::{eblup_area_means, fit_ml, prasad_rao_mse, UnitSample};
use crate::sae_linked::{
    adjusted_eblup, assemble_linked, estimate_lambda, fit_adjusted, AdjustedOptions, LinkErrorSpec,
};
use crate::simharness::{
    generate_population, run_replications, ReplicationReport, COVARIATE_NAME, DOMAIN_PREFIX, RESPONSE_NAME,
};

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// Writes a header and rows of preformatted cells.
fn write_table(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::Numerical(format!("serializing {}: {e}", path.display())))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Reads and validates a record file against its sidecar.
fn read_file(input: &FileInput) -> Result<(RecordFile, FileSchema)> {
    let schema = FileSchema::load(&input.schema)?;
    let file = read_record_file(&input.data, &schema)?;
    let report = validate_file(&file, &schema.key_schema(), schema.n_domains);
    if !report.is_empty() {
        let shown: Vec<String> = report.iter().take(5).map(|v| v.to_string()).collect();
        return Err(Error::parse(
            &input.data,
            format!("{} invalid entries: {}", report.len(), shown.join("; ")),
        ));
    }
    Ok((file, schema))
}

fn read_pair(f1: &FileInput, f2: &FileInput) -> Result<(RecordFile, FileSchema, RecordFile, FileSchema)> {
    let (a, sa) = read_file(f1)?;
    let (b, sb) = read_file(f2)?;
    if sa.n_domains != sb.n_domains {
        return Err(Error::Config(format!(
            "the two files declare {} and {} domains",
            sa.n_domains, sb.n_domains
        )));
    }
    Ok((a, sa, b, sb))
}

fn read_truth(path: &Path, f1: &RecordFile, f2: &RecordFile) -> Result<TruthDeck> {
    Ok(TruthDeck::new(links_to_matrix(&read_links(path)?, f1, f2)?))
}

fn link_rows(links: &MatchMatrix, f1: &RecordFile, f2: &RecordFile, score: impl Fn(usize, usize) -> f64) -> Vec<LinkRow> {
    links
        .links()
        .map(|(j, j2)| LinkRow {
            id1: f1.ids()[j].clone(),
            id2: f2.ids()[j2].clone(),
            score: score(j, j2),
        })
        .collect()
}

pub(super) fn link_fs(cfg_path: &Path, ctx: &RunCtx) -> Result<()> {
    let loaded = config::load::<LinkFsConfig>(cfg_path)?;
    let c = &loaded.config;
    let out = ctx.output_dir(c.output_dir.as_deref())?;
    let (f1, s1, f2, _) = read_pair(&c.file1, &c.file2)?;
    log::info!("linking {} x {} records", f1.len(), f2.len());
    let res = linkage_fs::link(&f1, &f2, s1.n_domains, &c.fs)?;
    let score = |j: usize, j2: usize| {
        res.scores
            .binary_search_by_key(&j, |p| p.j)
            .ok()
            .map(|k| res.scores[k])
            .filter(|p| p.j2 == j2)
            .map_or(f64::NAN, |p| p.score)
    };
    write_links(&out.join("links.csv"), &link_rows(&res.links, &f1, &f2, score))?;
    write_json(&out.join("model.json"), &res.model)?;
    let mut outputs = vec!["links.csv".to_string(), "model.json".to_string()];
    if let Some(t) = &c.truth {
        let truth = read_truth(t, &f1, &f2)?;
        write_json(&out.join("rates.json"), &link_error_rates(&res.links, &truth)?)?;
        outputs.push("rates.json".into());
    }
    write_manifest(
        &out,
        &Manifest {
            tool: "linksae",
            version: env!("CARGO_PKG_VERSION"),
            subcommand: "link-fs",
            seed: None,
            config_text: &loaded.text,
            config: c,
            outputs,
            warnings: Vec::new(),
        },
    )
}

fn write_pair_probs(path: &Path, post: &LinkagePosterior, f1: &RecordFile, f2: &RecordFile) -> Result<()> {
    write_table(
        path,
        &["id1", "id2", "prob"],
        post.pair_probs
            .iter()
            .map(|p| vec![f1.ids()[p.j].clone(), f2.ids()[p.j2].clone(), fmt_f64(p.prob)]),
    )
}

#[derive(Serialize)]
struct LinkageSummary<'a> {
    n_samples: usize,
    acceptance_rate: f64,
    nu_mean: Vec<f64>,
    t_mean: f64,
    theta_mean: &'a [Vec<f64>],
}

fn linkage_summary(post: &LinkagePosterior) -> LinkageSummary<'_> {
    let n = post.nu_trace.len().max(1) as f64;
    let h = post.nu_trace.first().map_or(0, Vec::len);
    LinkageSummary {
        n_samples: post.n_samples,
        acceptance_rate: post.acceptance_rate,
        nu_mean: (0..h).map(|l| post.nu_trace.iter().map(|v| v[l]).sum::<f64>() / n).collect(),
        t_mean: post.t_trace.iter().sum::<usize>() as f64 / post.t_trace.len().max(1) as f64,
        theta_mean: &post.theta_mean,
    }
}

fn write_linkage_outputs(
    out: &Path,
    post: &LinkagePosterior,
    f1: &RecordFile,
    f2: &RecordFile,
    outputs: &mut Vec<String>,
) -> Result<MatchMatrix> {
    write_pair_probs(&out.join("pair_probs.csv"), post, f1, f2)?;
    let est = point_estimate(post);
    write_links(&out.join("links.csv"), &link_rows(&est, f1, f2, |j, j2| post.prob(j, j2)))?;
    let h = post.nu_trace.first().map_or(0, Vec::len);
    let mut header = vec!["draw".to_string(), "t".to_string()];
    header.extend((0..h).map(|l| format!("nu_{}", l + 1)));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_table(
        &out.join("trace.csv"),
        &header_refs,
        post.t_trace.iter().zip(&post.nu_trace).enumerate().map(|(i, (t, nu))| {
            let mut r = vec![i.to_string(), t.to_string()];
            r.extend(nu.iter().map(|&v| fmt_f64(v)));
            r
        }),
    )?;
    write_json(&out.join("linkage_summary.json"), &linkage_summary(post))?;
    outputs.extend(["pair_probs.csv", "links.csv", "trace.csv", "linkage_summary.json"].map(String::from));
    Ok(est)
}

pub(super) fn link_bayes(cfg_path: &Path, ctx: &RunCtx) -> Result<()> {
    let loaded = config::load::<LinkBayesConfig>(cfg_path)?;
    let c = &loaded.config;
    let seed = ctx.seed(c.seed);
    let out = ctx.output_dir(c.output_dir.as_deref())?;
    let (f1, s1, f2, _) = read_pair(&c.file1, &c.file2)?;
    let schema = select_keys(&s1.key_schema(), &c.linkage.key_fields)?;
    let t_max = f1.len().min(f2.len());
    let prior = match &c.t_prior {
        None => CPrior::uniform(t_max),
        Some(w) if w.len() == t_max + 1 => CPrior::from_weights(w.clone()).map_err(|e| Error::Config(e.to_string()))?,
        Some(w) => {
            return Err(Error::Config(format!("t_prior has {} weights, expected {}", w.len(), t_max + 1)));
        }
    };
    log::info!("sampling matchings for {} x {} records", f1.len(), f2.len());
    let post = run_mcmc(&f1, &f2, s1.n_domains, &schema, &prior, &c.linkage, seed)?;
    let mut outputs = Vec::new();
    let est = write_linkage_outputs(&out, &post, &f1, &f2, &mut outputs)?;
    if let Some(t) = &c.truth {
        let truth = read_truth(t, &f1, &f2)?;
        write_json(&out.join("rates.json"), &link_error_rates(&est, &truth)?)?;
        outputs.push("rates.json".into());
    }
    write_manifest(
        &out,
        &Manifest {
            tool: "linksae",
            version: env!("CARGO_PKG_VERSION"),
            subcommand: "link-bayes",
            seed: Some(seed),
            config_text: &loaded.text,
            config: c,
            outputs,
            warnings: Vec::new(),
        },
    )
}

/// Unit sample from a `domain, y, x...` table.
fn units_sample(path: &Path, pop: &PopulationTable, prefix: &str, intercept: bool) -> Result<UnitSample> {
    let t = read_units(path, prefix)?;
    if t.covariate_names != pop.covariate_names {
        return Err(Error::Config(format!(
            "unit covariates {:?} do not match population columns {:?}",
            t.covariate_names, pop.covariate_names
        )));
    }
    let nd = pop.n_domains();
    if let Some(&d) = t.domains.iter().find(|&&d| d >= nd) {
        return Err(Error::parse(path, format!("domain {} exceeds the {nd} population domains", d + 1)));
    }
    let q = t.covariate_names.len();
    let lead = usize::from(intercept);
    let mut x = Vec::with_capacity(t.y.len() * (q + lead));
    for i in 0..t.y.len() {
        if intercept {
            x.push(1.0);
        }
        x.extend_from_slice(&t.x[i * q..(i + 1) * q]);
    }
    let mut names = Vec::new();
    if intercept {
        names.push("(Intercept)".to_string());
    }
    names.extend(t.covariate_names.iter().cloned());
    let means = (0..nd)
        .flat_map(|d| {
            let mut row = if intercept { vec![1.0] } else { Vec::new() };
            row.extend_from_slice(pop.xbar_row(d));
            row
        })
        .collect();
    UnitSample::new(t.y, x, t.domains, pop.sizes.clone(), means, names)
}

struct Linked {
    f1: RecordFile,
    f2: RecordFile,
    links: MatchMatrix,
    sample: UnitSample,
}

fn linked_sample(l: &LinkedFiles, pop: &PopulationTable) -> Result<Linked> {
    let (f1, s1, f2, _) = read_pair(&l.file1, &l.file2)?;
    if s1.n_domains != pop.n_domains() {
        return Err(Error::Config("files and population table disagree on the number of domains".into()));
    }
    if f2.covariate_names() != pop.covariate_names.as_slice() {
        return Err(Error::Config(format!(
            "file-2 covariates {:?} do not match population columns {:?}",
            f2.covariate_names(),
            pop.covariate_names
        )));
    }
    let links = links_to_matrix(&read_links(&l.links)?, &f1, &f2)?;
    let sample = assemble_linked(&f1, &f2, &links, &pop.sizes, &pop.xbar)?;
    Ok(Linked { f1, f2, links, sample })
}

pub(super) struct SaeFitFlags {
    pub adjusted: bool,
    pub lambda_file: Option<PathBuf>,
    pub audit_file: Option<PathBuf>,
}

pub(super) fn sae_fit(cfg_path: &Path, ctx: &RunCtx, flags: SaeFitFlags) -> Result<()> {
    let loaded = config::load::<SaeFitConfig>(cfg_path)?;
    let mut c = loaded.config.clone();
    c.adjusted |= flags.adjusted;
    if flags.lambda_file.is_some() {
        c.lambda_file = flags.lambda_file;
        c.audit_file = None;
    }
    if flags.audit_file.is_some() {
        c.audit_file = flags.audit_file;
        c.lambda_file = None;
    }
    for p in c.lambda_file.iter().chain(&c.audit_file) {
        if !p.is_file() {
            return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found")));
        }
    }
    let out = ctx.output_dir(c.output_dir.as_deref())?;
    let pop = read_population(&c.population, &c.domain_prefix)?;
    let (sample, linked) = match (&c.units, &c.linked) {
        (Some(u), None) => (units_sample(u, &pop, &c.domain_prefix, c.intercept)?, None),
        (None, Some(l)) => {
            let lk = linked_sample(l, &pop)?;
            (lk.sample.clone(), Some(lk))
        }
        _ => return Err(Error::Config("set exactly one of `units` and `linked`".into())),
    };
    let nd = pop.n_domains();
    let labels: Vec<String> = (0..nd).map(|d| format!("{}{}", c.domain_prefix, d + 1)).collect();
    let counts = sample.domain_counts();
    let outputs = vec!["coefficients.csv".to_string(), "components.csv".to_string(), "areas.csv".to_string()];

    if c.adjusted {
        let spec = match (&c.lambda_file, &c.audit_file) {
            (Some(p), _) => LinkErrorSpec::new(read_lambda(p, nd, &c.domain_prefix)?, counts.clone())?,
            (None, Some(p)) => {
                let lk = linked
                    .as_ref()
                    .ok_or_else(|| Error::Config("an audit file needs `linked` input".into()))?;
                let audit = read_truth(p, &lk.f1, &lk.f2)?;
                estimate_lambda(&lk.links, &audit, lk.f1.domains(), nd)?
            }
            (None, None) => return Err(Error::Config("the adjusted fit needs a lambda file or an audit file".into())),
        };
        let opts = AdjustedOptions {
            fit: c.fit,
            variance_form: c.variance_form,
        };
        let fit = fit_adjusted(&sample, &spec, &opts)?;
        let area = adjusted_eblup(&fit.beta_blue, &fit.u_hat, &sample)?;
        let p = sample.p;
        write_table(
            &out.join("coefficients.csv"),
            &["term", "estimate", "se", "ratio_estimate"],
            (0..p).map(|k| {
                vec![
                    sample.covariate_names[k].clone(),
                    fmt_f64(fit.beta_blue[k]),
                    fmt_f64(fit.beta_cov[k * p + k].sqrt()),
                    fmt_f64(fit.beta_r[k]),
                ]
            }),
        )?;
        write_table(
            &out.join("components.csv"),
            &["parameter", "value"],
            [
                vec!["sigma2_u".into(), fmt_f64(fit.sigma2_u)],
                vec!["sigma2_e".into(), fmt_f64(fit.sigma2_e)],
                vec!["loglik".into(), fmt_f64(fit.loglik_trace.last().copied().unwrap_or(f64::NAN))],
                vec!["iterations".into(), fit.iterations.to_string()],
                vec!["converged".into(), fit.converged.to_string()],
            ],
        )?;
        write_table(
            &out.join("areas.csv"),
            &["domain", "n_d", "lambda", "u_hat", "prediction"],
            (0..nd).map(|d| {
                vec![
                    labels[d].clone(),
                    counts[d].to_string(),
                    fmt_f64(spec.lambda[d]),
                    fmt_f64(fit.u_hat[d]),
                    fmt_f64(area[d]),
                ]
            }),
        )?;
    } else {
        let fit = fit_ml(&sample, &c.fit)?;
        let area = eblup_area_means(&fit.beta, &fit.u_hat, &sample)?;
        let mse = prasad_rao_mse(&fit, &sample);
        let p = sample.p;
        write_table(
            &out.join("coefficients.csv"),
            &["term", "estimate", "se"],
            (0..p).map(|k| {
                vec![
                    sample.covariate_names[k].clone(),
                    fmt_f64(fit.beta[k]),
                    fmt_f64(fit.beta_cov[k * p + k].sqrt()),
                ]
            }),
        )?;
        write_table(
            &out.join("components.csv"),
            &["parameter", "value"],
            [
                vec!["sigma2_u".into(), fmt_f64(fit.sigma2_u)],
                vec!["sigma2_e".into(), fmt_f64(fit.sigma2_e)],
                vec!["loglik".into(), fmt_f64(fit.loglik)],
                vec!["iterations".into(), fit.iterations.to_string()],
                vec!["converged".into(), fit.converged.to_string()],
            ],
        )?;
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        write_table(
            &out.join("areas.csv"),
            &["domain", "n_d", "u_hat", "prediction", "g1", "g2", "g3", "mse"],
            (0..nd).map(|d| {
                vec![
                    labels[d].clone(),
                    counts[d].to_string(),
                    fmt_f64(fit.u_hat[d]),
                    fmt_f64(area[d]),
                    fmt_f64(mse[d].g1),
                    fmt_f64(mse[d].g2),
                    opt(mse[d].g3),
                    opt(mse[d].mse),
                ]
            }),
        )?;
    }
    write_manifest(
        &out,
        &Manifest {
            tool: "linksae",
            version: env!("CARGO_PKG_VERSION"),
            subcommand: "sae-fit",
            seed: None,
            config_text: &loaded.text,
            config: &c,
            outputs,
            warnings: Vec::new(),
        },
    )
}

fn write_posterior(out: &Path, post: &SaePosterior, labels: &[String], outputs: &mut Vec<String>) -> Result<()> {
    let p = post.p;
    let nd = post.n_domains;
    let mut header: Vec<String> = vec!["draw".into()];
    header.extend(post.covariate_names.iter().cloned());
    header.extend(["sigma2_u".to_string(), "sigma2_e".to_string()]);
    header.extend(labels.iter().map(|l| format!("u_{l}")));
    if post.c_id.is_some() {
        header.push("linkage_draw".into());
    }
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_table(
        &out.join("draws.csv"),
        &refs,
        (0..post.n_draws()).map(|r| {
            let mut row = vec![r.to_string()];
            row.extend(post.beta[r * p..(r + 1) * p].iter().map(|&v| fmt_f64(v)));
            row.push(fmt_f64(post.sigma2_u[r]));
            row.push(fmt_f64(post.sigma2_e[r]));
            row.extend(post.u[r * nd..(r + 1) * nd].iter().map(|&v| fmt_f64(v)));
            if let Some(c) = &post.c_id {
                row.push(c[r].to_string());
            }
            row
        }),
    )?;
    let stat = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt())
    };
    let (bm, bs) = (post.beta_mean(), post.beta_sd());
    let mut rows: Vec<Vec<String>> = (0..p)
        .map(|k| vec![post.covariate_names[k].clone(), fmt_f64(bm[k]), fmt_f64(bs[k])])
        .collect();
    for (name, v) in [("sigma2_u", &post.sigma2_u), ("sigma2_e", &post.sigma2_e)] {
        let (m, s) = stat(v);
        rows.push(vec![name.into(), fmt_f64(m), fmt_f64(s)]);
    }
    write_table(&out.join("summary.csv"), &["parameter", "mean", "sd"], rows)?;
    let (mm, ms) = (post.mu_mean(), post.mu_sd());
    write_table(
        &out.join("areas.csv"),
        &["domain", "mean", "sd"],
        (0..nd).map(|d| vec![labels[d].clone(), fmt_f64(mm[d]), fmt_f64(ms[d])]),
    )?;
    outputs.extend(["draws.csv", "summary.csv", "areas.csv"].map(String::from));
    Ok(())
}

pub(super) fn sae_bayes(cfg_path: &Path, ctx: &RunCtx, strategy: Option<Strategy>) -> Result<()> {
    let loaded = config::load::<SaeBayesConfig>(cfg_path)?;
    let mut c = loaded.config.clone();
    if strategy.is_some() {
        c.strategy = strategy;
    }
    let strategy = c
        .strategy
        .ok_or_else(|| Error::Config("no strategy: pass --strategy or set `strategy`".into()))?;
    let seed = ctx.seed(c.seed);
    let out = ctx.output_dir(c.output_dir.as_deref())?;
    let pop = read_population(&c.population, &c.domain_prefix)?;
    let nd = pop.n_domains();
    let labels: Vec<String> = (0..nd).map(|d| format!("{}{}", c.domain_prefix, d + 1)).collect();
    let mut outputs = Vec::new();
    let post = match strategy {
        Strategy::FixedC => {
            let sample = match (&c.units, &c.linked) {
                (Some(u), None) => units_sample(u, &pop, &c.domain_prefix, c.intercept)?,
                (None, Some(l)) => linked_sample(l, &pop)?.sample,
                _ => return Err(Error::Config("fixed-C needs exactly one of `units` and `linked`".into())),
            };
            gibbs_sae(&sample, &c.prior, c.n_burn, c.n_draws, seed)?
        }
        Strategy::Feedback | Strategy::Nonfeedback => {
            let (Some(fi1), Some(fi2)) = (&c.file1, &c.file2) else {
                return Err(Error::Config("linkage strategies need `file1` and `file2`".into()));
            };
            let lc = c
                .linkage
                .as_ref()
                .ok_or_else(|| Error::Config("linkage strategies need a [linkage] section".into()))?;
            let (f1, s1, f2, _) = read_pair(fi1, fi2)?;
            if f2.covariate_names() != pop.covariate_names.as_slice() {
                return Err(Error::Config("file-2 covariates do not match the population columns".into()));
            }
            let schema = select_keys(&s1.key_schema(), &lc.key_fields)?;
            let input = LinkedInput {
                f1: &f1,
                f2: &f2,
                n_domains: nd,
                schema: &schema,
                pop_sizes: &pop.sizes,
                pop_cov_means: &pop.xbar,
            };
            let (post, link) = if strategy == Strategy::Feedback {
                let opts = FeedbackOptions {
                    weight: c.feedback_weight,
                    fixed: None,
                };
                run_feedback(&input, &c.prior, lc, &opts, seed)?
            } else {
                run_nonfeedback(&input, &c.prior, lc, c.inner_len, seed)?
            };
            write_linkage_outputs(&out, &link, &f1, &f2, &mut outputs)?;
            post
        }
    };
    write_posterior(&out, &post, &labels, &mut outputs)?;
    write_manifest(
        &out,
        &Manifest {
            tool: "linksae",
            version: env!("CARGO_PKG_VERSION"),
            subcommand: "sae-bayes",
            seed: Some(seed),
            config_text: &loaded.text,
            config: &c,
            outputs,
            warnings: post.warnings.clone(),
        },
    )
}

pub(super) fn simulate(cfg_path: &Path, ctx: &RunCtx) -> Result<()> {
    let loaded = config::load::<SimulateConfig>(cfg_path)?;
    let c = &loaded.config;
    c.simulation.validate()?;
    let seed = ctx.seed(c.seed);
    let out = ctx.output_dir(c.output_dir.as_deref())?;
    log::info!(
        "{} replications of n = {} on {} domains",
        c.simulation.replications,
        c.simulation.n_sample,
        c.simulation.population.n_domains()
    );
    let report = run_replications(&c.simulation, seed)?;
    write_json(&out.join("report.json"), &report)?;
    fs::write(out.join("report.txt"), report.to_text()).map_err(|e| Error::io(out.join("report.txt"), e))?;
    report.write_csv(&out)?;
    write_manifest(
        &out,
        &Manifest {
            tool: "linksae",
            version: env!("CARGO_PKG_VERSION"),
            subcommand: "simulate",
            seed: Some(seed),
            config_text: &loaded.text,
            config: c,
            outputs: ["report.json", "report.txt", "coefficients.csv", "areas.csv", "linkage.csv"]
                .map(String::from)
                .to_vec(),
            warnings: Vec::new(),
        },
    )
}

pub(super) fn report(dir: &Path) -> Result<()> {
    let path = dir.join("report.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let report: ReplicationReport = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))?;
    print!("{}", report.to_text());
    Ok(())
}

pub(super) fn generate(cfg_path: &Path, ctx: &RunCtx) -> Result<()> {
    let loaded = config::load::<GenerateConfig>(cfg_path)?;
    let c = &loaded.config;
    let seed = ctx.seed(c.seed);
    let out = ctx.output_dir(c.output_dir.as_deref())?;
    let spec = &c.population;
    let pop = generate_population(spec, derive_seed(seed, 0))?;
    let reg_schema = spec.file_schema(None, &[COVARIATE_NAME]);
    let pert_schema = spec.file_schema(Some(RESPONSE_NAME), &[]);
    write_record_file(&out.join("register.csv"), &pop.register, &reg_schema)?;
    reg_schema.save(&out.join("register.toml"))?;
    pert_schema.save(&out.join("perturbed.toml"))?;
    write_population(
        &out.join("population.csv"),
        &PopulationTable {
            sizes: pop.domain_sizes(),
            xbar: pop.area_mean_x(),
            covariate_names: vec![COVARIATE_NAME.into()],
        },
        DOMAIN_PREFIX,
    )?;
    let mut outputs: Vec<String> = ["register.csv", "register.toml", "perturbed.toml", "population.csv"]
        .map(String::from)
        .to_vec();
    let id_rows = |f: &RecordFile| -> Vec<LinkRow> {
        f.ids()
            .iter()
            .map(|id| LinkRow {
                id1: id.clone(),
                id2: id.clone(),
                score: 1.0,
            })
            .collect()
    };
    match c.sample_size {
        None => {
            write_record_file(&out.join("perturbed.csv"), &pop.perturbed, &pert_schema)?;
            write_links(&out.join("truth.csv"), &id_rows(&pop.perturbed))?;
            outputs.extend(["perturbed.csv", "truth.csv"].map(String::from));
        }
        Some(n) => {
            if n == 0 || n > pop.perturbed.len() {
                return Err(Error::Config(format!("sample_size must lie in 1..={}", pop.perturbed.len())));
            }
            let mut rng = rng_from_seed(derive_seed(seed, 1));
            let mut rows = rand::seq::index::sample(&mut rng, pop.perturbed.len(), n).into_vec();
            rows.sort_unstable();
            let s = pop.perturbed.subset(&rows);
            write_record_file(&out.join("sample.csv"), &s, &pert_schema)?;
            write_links(&out.join("truth.csv"), &id_rows(&s))?;
            outputs.extend(["sample.csv", "truth.csv"].map(String::from));
        }
    }
    let area_truth: Vec<Vec<String>> = pop
        .area_mean_y()
        .iter()
        .enumerate()
        .map(|(d, y)| vec![format!("{DOMAIN_PREFIX}{}", d + 1), fmt_f64(*y), fmt_f64(pop.area_effects[d])])
        .collect();
    write_table(&out.join("area_truth.csv"), &["domain", "mean_y", "u"], area_truth)?;
    outputs.push("area_truth.csv".into());
    write_manifest(
        &out,
        &Manifest {
            tool: "linksae",
            version: env!("CARGO_PKG_VERSION"),
            subcommand: "generate",
            seed: Some(seed),
            config_text: &loaded.text,
            config: c,
            outputs,
            warnings: Vec::new(),
        },
    )
}
