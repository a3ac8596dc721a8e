//! Aggregation over replications and table output.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::population::{Population, DOMAIN_PREFIX};
use super::replicate::{Estimator, RepOutcome, SimulationConfig};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, writer};

/// `(1/D) Σ |Ŷ_d − Y_d| / Y_d`.
pub fn compute_arb(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::InvalidInput("predictions and truths must be nonempty and of equal length".into()));
    }
    if let Some(d) = truth.iter().position(|&y| y == 0.0) {
        return Err(Error::InvalidInput(format!("true area mean of domain {} is zero", d + 1)));
    }
    Ok(pred.iter().zip(truth).map(|(p, y)| (p - y).abs() / y).sum::<f64>() / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefRow {
    pub estimator: Estimator,
    pub mean: Vec<f64>,
    /// Spread of the point estimates over replications (divisor R).
    pub sd: Vec<f64>,
    /// Posterior SD averaged over replications (Bayesian rows).
    pub posterior_sd: Option<Vec<f64>>,
    pub n_ok: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaRow {
    pub estimator: Estimator,
    pub arb: f64,
    /// Mean over domains of the per-domain SD (divisor R).
    pub sd: f64,
    /// Mean over domains of the per-domain MSE.
    pub mse: f64,
    pub mean_by_domain: Vec<Option<f64>>,
    pub sd_by_domain: Vec<Option<f64>>,
    pub mse_by_domain: Vec<Option<f64>>,
    /// Domains entering ARB, SD and MSE.
    pub n_domains_used: usize,
    pub n_ok: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkageRow {
    pub linker: String,
    pub false_link_rate: f64,
    pub missed_link_rate: f64,
    pub declared: f64,
    pub n_ok: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub replications: usize,
    pub n_sample: usize,
    pub covariate_names: Vec<String>,
    pub truth_beta: Vec<f64>,
    pub population_sizes: Vec<f64>,
    pub avg_sample_sizes: Vec<f64>,
    pub area_truth: Vec<f64>,
    pub coefficients: Vec<CoefRow>,
    pub areas: Vec<AreaRow>,
    pub linkage: Vec<LinkageRow>,
    /// Failed cells per estimator.
    pub failures: Vec<(Estimator, usize)>,
    pub first_errors: Vec<(Estimator, String)>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

pub(crate) fn aggregate(cfg: &SimulationConfig, pop: &Population, reps: &[RepOutcome]) -> Result<ReplicationReport> {
    let nd = pop.n_domains();
    let truth = pop.area_mean_y();
    let r = reps.len() as f64;
    let mut coefficients = Vec::new();
    let mut areas = Vec::new();
    let mut failures = Vec::new();
    let mut first_errors = Vec::new();
    for (k, &est) in cfg.estimators.iter().enumerate() {
        let errs: Vec<&String> = reps
            .iter()
            .flat_map(|o| o.errors.iter().filter(|(e, _)| *e == est).map(|(_, m)| m))
            .collect();
        if !errs.is_empty() {
            failures.push((est, errs.len()));
            first_errors.push((est, errs[0].clone()));
        }
        if est.has_coefficients() {
            let ok: Vec<&Vec<f64>> = reps.iter().filter_map(|o| o.coef[k].as_ref()).collect();
            if !ok.is_empty() {
                let p = ok[0].len();
                let (mut mean, mut sd) = (vec![0.0; p], vec![0.0; p]);
                for c in 0..p {
                    let col: Vec<f64> = ok.iter().map(|b| b[c]).collect();
                    (mean[c], sd[c]) = mean_sd(&col);
                }
                let psd: Vec<&Vec<f64>> = reps.iter().filter_map(|o| o.posterior_sd[k].as_ref()).collect();
                let posterior_sd = (!psd.is_empty()).then(|| {
                    (0..p)
                        .map(|c| psd.iter().map(|s| s[c]).sum::<f64>() / psd.len() as f64)
                        .collect()
                });
                coefficients.push(CoefRow {
                    estimator: est,
                    mean,
                    sd,
                    posterior_sd,
                    n_ok: ok.len(),
                });
            }
        }
        let ok: Vec<&Vec<Option<f64>>> = reps.iter().filter_map(|o| o.area[k].as_ref()).collect();
        let mut mean_by = vec![None; nd];
        let mut sd_by = vec![None; nd];
        let mut mse_by = vec![None; nd];
        for d in 0..nd {
            let v: Vec<f64> = ok.iter().filter_map(|a| a[d]).collect();
            if v.is_empty() {
                continue;
            }
            let (m, s) = mean_sd(&v);
            mean_by[d] = Some(m);
            sd_by[d] = Some(s);
            mse_by[d] = Some(v.iter().map(|x| (x - truth[d]).powi(2)).sum::<f64>() / v.len() as f64);
        }
        let used: Vec<usize> = (0..nd).filter(|&d| mean_by[d].is_some()).collect();
        if !used.is_empty() {
            let pred: Vec<f64> = used.iter().map(|&d| mean_by[d].unwrap()).collect();
            let tr: Vec<f64> = used.iter().map(|&d| truth[d]).collect();
            let avg = |v: &[Option<f64>]| used.iter().map(|&d| v[d].unwrap()).sum::<f64>() / used.len() as f64;
            areas.push(AreaRow {
                estimator: est,
                arb: compute_arb(&pred, &tr)?,
                sd: avg(&sd_by),
                mse: avg(&mse_by),
                mean_by_domain: mean_by,
                sd_by_domain: sd_by,
                mse_by_domain: mse_by,
                n_domains_used: used.len(),
                n_ok: ok.len(),
            });
        }
    }
    let mut linkage = Vec::new();
    for (name, pick) in [
        ("Fellegi-Sunter", (|o: &RepOutcome| o.fs_rates) as fn(&RepOutcome) -> _),
        ("Bayesian (point estimate)", |o: &RepOutcome| o.bayes_rates),
    ] {
        let v: Vec<_> = reps.iter().filter_map(pick).collect();
        if v.is_empty() {
            continue;
        }
        let n = v.len() as f64;
        linkage.push(LinkageRow {
            linker: name.into(),
            false_link_rate: v.iter().map(|x| x.false_link_rate).sum::<f64>() / n,
            missed_link_rate: v.iter().map(|x| x.missed_link_rate).sum::<f64>() / n,
            declared: v.iter().map(|x| x.n_declared as f64).sum::<f64>() / n,
            n_ok: v.len(),
        });
    }
    let mut avg_sample_sizes = vec![0.0; nd];
    for o in reps {
        for d in 0..nd {
            avg_sample_sizes[d] += o.sample_sizes[d] as f64 / r;
        }
    }
    let t = cfg.population.truth;
    Ok(ReplicationReport {
        replications: reps.len(),
        n_sample: cfg.n_sample,
        covariate_names: vec!["(Intercept)".into(), super::population::COVARIATE_NAME.into()],
        truth_beta: vec![t.beta0, t.beta1],
        population_sizes: pop.domain_sizes(),
        avg_sample_sizes,
        area_truth: truth,
        coefficients,
        areas,
        linkage,
        failures,
        first_errors,
    })
}

impl ReplicationReport {
    pub fn coef(&self, est: Estimator) -> Option<&CoefRow> {
        self.coefficients.iter().find(|c| c.estimator == est)
    }

    pub fn area(&self, est: Estimator) -> Option<&AreaRow> {
        self.areas.iter().find(|a| a.estimator == est)
    }

    pub fn linkage_row(&self, linker_prefix: &str) -> Option<&LinkageRow> {
        self.linkage.iter().find(|l| l.linker.starts_with(linker_prefix))
    }

    /// Human-readable tables: domain sizes, coefficients, area predictions
    /// and the linkage operating point.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Population and sample size in the domains");
        let _ = writeln!(s, "{:<10}{:>18}{:>22}", "Domain", "Population size", "Average sample size");
        for d in 0..self.population_sizes.len() {
            let _ = writeln!(
                s,
                "{:<10}{:>18}{:>22.1}",
                format!("{DOMAIN_PREFIX}{}", d + 1),
                self.population_sizes[d],
                self.avg_sample_sizes[d]
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "Regression coefficients: mean and SD over {} replicated samples of size {}",
            self.replications, self.n_sample
        );
        let _ = writeln!(s, "{:<16}{:>11}{:>14}{:>11}{:>11}", "Estimates", "Intercept", "Sd Intercept", "Slope", "Sd Slope");
        let _ = writeln!(
            s,
            "{:<16}{:>11.3}{:>14}{:>11.3}{:>11}",
            "Population", self.truth_beta[0], "---", self.truth_beta[1], "---"
        );
        for c in &self.coefficients {
            let _ = writeln!(
                s,
                "{:<16}{:>11.3}{:>14.3}{:>11.3}{:>11.3}",
                c.estimator.label(),
                c.mean[0],
                c.sd[0],
                c.mean[1],
                c.sd[1]
            );
        }
        let bayes: Vec<&CoefRow> = self.coefficients.iter().filter(|c| c.posterior_sd.is_some()).collect();
        if !bayes.is_empty() {
            let _ = writeln!(s);
            let _ = writeln!(s, "Posterior SDs, averaged over replications");
            let _ = writeln!(s, "{:<16}{:>11}{:>11}", "Estimates", "Intercept", "Slope");
            for c in bayes {
                let p = c.posterior_sd.as_ref().unwrap();
                let _ = writeln!(s, "{:<16}{:>11.3}{:>11.3}", c.estimator.label(), p[0], p[1]);
            }
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "Area predictions");
        let _ = writeln!(s, "{:<16}{:>9}{:>9}{:>9}", "Estimates", "ARB", "SD", "MSE");
        for a in &self.areas {
            let _ = writeln!(s, "{:<16}{:>9.3}{:>9.3}{:>9.3}", a.estimator.label(), a.arb, a.sd, a.mse);
        }
        if !self.linkage.is_empty() {
            let _ = writeln!(s);
            let _ = writeln!(s, "Linkage operating point");
            let _ = writeln!(s, "{:<28}{:>12}{:>12}{:>12}", "Linker", "False link", "Missed link", "Declared");
            for l in &self.linkage {
                let _ = writeln!(
                    s,
                    "{:<28}{:>12.3}{:>12.3}{:>12.1}",
                    l.linker, l.false_link_rate, l.missed_link_rate, l.declared
                );
            }
        }
        if !self.failures.is_empty() {
            let _ = writeln!(s);
            let _ = writeln!(s, "Failed cells");
            for ((e, n), (_, msg)) in self.failures.iter().zip(&self.first_errors) {
                let _ = writeln!(s, "{:<16}{:>6}  first: {msg}", e.label(), n);
            }
        }
        s
    }

    /// `coefficients.csv`, `areas.csv` and `linkage.csv` in `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        let csv_err = |p: &Path, e: csv::Error| Error::io(p, std::io::Error::other(e.to_string()));
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();

        let path = dir.join("coefficients.csv");
        let mut w = writer(&path)?;
        w.write_record([
            "estimator",
            "intercept",
            "sd_intercept",
            "slope",
            "sd_slope",
            "posterior_sd_intercept",
            "posterior_sd_slope",
            "n_ok",
        ])
        .map_err(|e| csv_err(&path, e))?;
        w.write_record([
            "Population".to_string(),
            fmt_f64(self.truth_beta[0]),
            String::new(),
            fmt_f64(self.truth_beta[1]),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
        ])
        .map_err(|e| csv_err(&path, e))?;
        for c in &self.coefficients {
            let p = c.posterior_sd.as_ref();
            w.write_record([
                c.estimator.label().to_string(),
                fmt_f64(c.mean[0]),
                fmt_f64(c.sd[0]),
                fmt_f64(c.mean[1]),
                fmt_f64(c.sd[1]),
                opt(p.map(|v| v[0])),
                opt(p.map(|v| v[1])),
                c.n_ok.to_string(),
            ])
            .map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join("areas.csv");
        let mut w = writer(&path)?;
        w.write_record(["estimator", "arb", "sd", "mse", "n_domains_used", "n_ok"])
            .map_err(|e| csv_err(&path, e))?;
        for a in &self.areas {
            w.write_record([
                a.estimator.label().to_string(),
                fmt_f64(a.arb),
                fmt_f64(a.sd),
                fmt_f64(a.mse),
                a.n_domains_used.to_string(),
                a.n_ok.to_string(),
            ])
            .map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join("linkage.csv");
        let mut w = writer(&path)?;
        w.write_record(["linker", "false_link_rate", "missed_link_rate", "declared", "n_ok"])
            .map_err(|e| csv_err(&path, e))?;
        for l in &self.linkage {
            w.write_record([
                l.linker.clone(),
                fmt_f64(l.false_link_rate),
                fmt_f64(l.missed_link_rate),
                fmt_f64(l.declared),
                l.n_ok.to_string(),
            ])
            .map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }
}
