//! Synthetic register and perturbed copy.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{KeyCode, KeyFieldSchema, RecordFile, TruthDeck};
use crate::error::{Error, Result};
use crate::io::{FileSchema, KeyColumn};
use crate::rng::{derive_seed, rng_from_seed};

/// Population sizes of the 18 areas of the reference study.
pub const DEFAULT_DOMAIN_SIZES: [usize; 18] = [
    2880, 2302, 2443, 2404, 314, 255, 113, 296, 488, 490, 106, 421, 231, 2840, 2915, 2325, 2354, 3448,
];

pub const RESPONSE_NAME: &str = "consumption";
pub const COVARIATE_NAME: &str = "income";
pub const DOMAIN_PREFIX: &str = "Area";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyFieldSpec {
    pub name: String,
    pub cardinality: u16,
    #[serde(default)]
    pub typo_prob: f64,
    #[serde(default)]
    pub missing_prob: f64,
    /// Integer encoding on disk: value = code + offset.
    #[serde(default)]
    pub offset: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<String>>,
}

impl KeyFieldSpec {
    fn new(name: &str, cardinality: u16, p: f64) -> Self {
        Self {
            name: name.into(),
            cardinality,
            typo_prob: p,
            missing_prob: p,
            offset: 0,
            levels: None,
        }
    }
}

/// `y = β0 + β1 x + u_d + e`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionTruth {
    pub beta0: f64,
    pub beta1: f64,
    pub sigma_u: f64,
    pub sigma_e: f64,
}

/// Log-normal covariate; the log-mean of domain `d` is
/// `log_mean + log_mean_spread · (d/(D−1) − ½)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateSpec {
    pub log_mean: f64,
    pub log_mean_spread: f64,
    pub log_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSpec {
    pub domain_sizes: Vec<usize>,
    pub key_fields: Vec<KeyFieldSpec>,
    /// Subset of `key_fields` used for linkage.
    pub linkage_keys: Vec<String>,
    pub truth: RegressionTruth,
    pub covariate: CovariateSpec,
    /// Draw the linkage-key combinations without replacement within each
    /// domain, so no two register records in a domain share them.
    #[serde(default)]
    pub unique_keys: bool,
}

impl Default for PopulationSpec {
    fn default() -> Self {
        let p = 0.01;
        let mut gender = KeyFieldSpec::new("gender", 2, p);
        gender.levels = Some(vec!["M".into(), "F".into()]);
        let mut year = KeyFieldSpec::new("year", 101, p);
        year.offset = 1912;
        Self {
            domain_sizes: DEFAULT_DOMAIN_SIZES.to_vec(),
            key_fields: vec![gender, KeyFieldSpec::new("day", 31, p), KeyFieldSpec::new("month", 12, p), year],
            linkage_keys: vec!["day".into(), "year".into(), "gender".into()],
            truth: RegressionTruth {
                beta0: 3.576,
                beta1: 0.538,
                sigma_u: 1.5,
                sigma_e: 3.0,
            },
            covariate: CovariateSpec {
                log_mean: 2.9,
                log_mean_spread: 0.6,
                log_sd: 0.5,
            },
            unique_keys: false,
        }
    }
}

impl PopulationSpec {
    pub fn n_domains(&self) -> usize {
        self.domain_sizes.len()
    }

    pub fn total_size(&self) -> usize {
        self.domain_sizes.iter().sum()
    }

    /// Same spec with every typo and missing probability set to zero.
    pub fn without_perturbation(mut self) -> Self {
        for k in &mut self.key_fields {
            k.typo_prob = 0.0;
            k.missing_prob = 0.0;
        }
        self
    }

    pub fn key_schema(&self) -> Vec<KeyFieldSchema> {
        self.key_fields
            .iter()
            .map(|k| KeyFieldSchema::new(k.name.clone(), k.cardinality))
            .collect()
    }

    /// On-disk layout of a generated file.
    pub fn file_schema(&self, response: Option<&str>, covariates: &[&str]) -> FileSchema {
        FileSchema {
            id_column: "id".into(),
            domain_column: "domain".into(),
            domain_prefix: DOMAIN_PREFIX.into(),
            n_domains: self.n_domains(),
            response: response.map(str::to_string),
            covariates: covariates.iter().map(|s| s.to_string()).collect(),
            missing_tokens: vec![String::new(), "-".into(), "NA".into()],
            keys: self
                .key_fields
                .iter()
                .map(|k| KeyColumn {
                    name: k.name.clone(),
                    cardinality: k.cardinality,
                    missing_allowed: true,
                    levels: k.levels.clone(),
                    offset: k.offset,
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.domain_sizes.is_empty() || self.domain_sizes.iter().any(|&n| n == 0) {
            return bad("every domain needs at least one population unit".into());
        }
        if self.key_fields.is_empty() {
            return bad("at least one key field is required".into());
        }
        for k in &self.key_fields {
            if k.cardinality < 2 {
                return bad(format!("key field `{}` needs at least two categories", k.name));
            }
            for (what, p) in [("typo", k.typo_prob), ("missing", k.missing_prob)] {
                if !(0.0..=1.0).contains(&p) {
                    return bad(format!("{what} probability of `{}` must lie in [0, 1]", k.name));
                }
            }
            if let Some(levels) = &k.levels {
                if levels.len() != k.cardinality as usize {
                    return bad(format!("key field `{}` lists {} levels for cardinality {}", k.name, levels.len(), k.cardinality));
                }
            }
        }
        crate::datamodel::validate_schema(&self.key_schema())?;
        if self.linkage_keys.is_empty() {
            return bad("no linkage keys".into());
        }
        for name in &self.linkage_keys {
            if !self.key_fields.iter().any(|k| &k.name == name) {
                return bad(format!("linkage key `{name}` is not a key field"));
            }
        }
        let t = &self.truth;
        if !(t.sigma_u >= 0.0 && t.sigma_e >= 0.0 && t.beta0.is_finite() && t.beta1.is_finite()) {
            return bad("regression truth needs finite coefficients and nonnegative SDs".into());
        }
        let c = &self.covariate;
        if !(c.log_sd >= 0.0 && c.log_mean.is_finite() && c.log_mean_spread.is_finite()) {
            return bad("covariate parameters must be finite with log_sd ≥ 0".into());
        }
        if self.unique_keys {
            let combos: f64 = self.linkage_field_indices().iter().map(|&l| self.key_fields[l].cardinality as f64).product();
            if let Some(&n) = self.domain_sizes.iter().find(|&&n| n as f64 > combos) {
                return bad(format!("unique keys impossible: a domain of {n} units exceeds {combos} key combinations"));
            }
        }
        Ok(())
    }

    fn linkage_field_indices(&self) -> Vec<usize> {
        self.linkage_keys
            .iter()
            .filter_map(|n| self.key_fields.iter().position(|k| &k.name == n))
            .collect()
    }
}

/// Register with the covariate, perturbed copy with the response, and the
/// identity pairing between them.
#[derive(Debug, Clone)]
pub struct Population {
    pub register: RecordFile,
    pub perturbed: RecordFile,
    pub truth: TruthDeck,
    pub area_effects: Vec<f64>,
}

impl Population {
    pub fn n_domains(&self) -> usize {
        self.area_effects.len()
    }

    pub fn domain_sizes(&self) -> Vec<f64> {
        let mut n = vec![0.0; self.n_domains()];
        for &d in self.register.domains() {
            n[d] += 1.0;
        }
        n
    }

    fn domain_average(&self, v: impl Iterator<Item = f64>) -> Vec<f64> {
        let n = self.domain_sizes();
        let mut s = vec![0.0; n.len()];
        for (x, &d) in v.zip(self.register.domains()) {
            s[d] += x;
        }
        s.iter().zip(&n).map(|(a, b)| a / b).collect()
    }

    /// True area means of the response.
    pub fn area_mean_y(&self) -> Vec<f64> {
        self.domain_average(self.perturbed.response().expect("response").iter().copied())
    }

    /// Area means of the covariate (without intercept).
    pub fn area_mean_x(&self) -> Vec<f64> {
        self.domain_average((0..self.register.len()).map(|j| self.register.covariate_row(j).expect("covariate")[0]))
    }

    pub fn covariate(&self, j: usize) -> f64 {
        self.register.covariate_row(j).expect("covariate")[0]
    }
}

/// Uniformly random category different from `v`.
fn typo<R: Rng + ?Sized>(v: u16, k: u16, rng: &mut R) -> u16 {
    let w = rng.random_range(1..k);
    if w >= v {
        w + 1
    } else {
        w
    }
}

pub fn generate_population(spec: &PopulationSpec, seed: u64) -> Result<Population> {
    spec.validate()?;
    let nd = spec.n_domains();
    let h = spec.key_fields.len();
    let n: usize = spec.total_size();
    let cards: Vec<u16> = spec.key_fields.iter().map(|k| k.cardinality).collect();
    let link_idx = spec.linkage_field_indices();

    // separate streams so toggling perturbation leaves keys and outcomes unchanged
    let mut key_rng = rng_from_seed(derive_seed(seed, 0));
    let mut out_rng = rng_from_seed(derive_seed(seed, 1));
    let mut pert_rng = rng_from_seed(derive_seed(seed, 2));

    let mut domains = Vec::with_capacity(n);
    let mut keys: Vec<u16> = Vec::with_capacity(n * h);
    for (d, &nd_size) in spec.domain_sizes.iter().enumerate() {
        let combos: Option<Vec<usize>> = spec.unique_keys.then(|| {
            let total: usize = link_idx.iter().map(|&l| cards[l] as usize).product();
            index::sample(&mut key_rng, total, nd_size).into_vec()
        });
        for r in 0..nd_size {
            domains.push(d);
            let mut row: Vec<u16> = cards.iter().map(|&k| key_rng.random_range(1..=k)).collect();
            if let Some(c) = &combos {
                let mut code = c[r];
                for &l in &link_idx {
                    row[l] = (code % cards[l] as usize) as u16 + 1;
                    code /= cards[l] as usize;
                }
            }
            keys.extend(row);
        }
    }

    let t = spec.truth;
    let cv = spec.covariate;
    let z = Normal::new(0.0, 1.0).expect("unit normal");
    let area_effects: Vec<f64> = (0..nd).map(|_| t.sigma_u * z.sample(&mut out_rng)).collect();
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for &d in &domains {
        let shift = if nd > 1 { d as f64 / (nd - 1) as f64 - 0.5 } else { 0.0 };
        let ln = LogNormal::new(cv.log_mean + cv.log_mean_spread * shift, cv.log_sd)
            .map_err(|e| Error::Config(format!("covariate distribution: {e}")))?;
        let xi = ln.sample(&mut out_rng);
        x.push(xi);
        y.push(t.beta0 + t.beta1 * xi + area_effects[d] + t.sigma_e * z.sample(&mut out_rng));
    }

    let mut pert: Vec<KeyCode> = Vec::with_capacity(n * h);
    for row in keys.chunks(h) {
        for (l, &v) in row.iter().enumerate() {
            let f = &spec.key_fields[l];
            let mut w = v;
            if pert_rng.random::<f64>() < f.typo_prob {
                w = typo(w, f.cardinality, &mut pert_rng);
            }
            pert.push(if pert_rng.random::<f64>() < f.missing_prob { None } else { Some(w) });
        }
    }

    let ids: Vec<String> = (0..n).map(|j| format!("U{:06}", j + 1)).collect();
    let names: Vec<String> = spec.key_fields.iter().map(|k| k.name.clone()).collect();
    let register = RecordFile::new(ids.clone(), names.clone(), keys.into_iter().map(Some).collect(), domains.clone())?
        .with_covariates(vec![COVARIATE_NAME.into()], x)?;
    let perturbed = RecordFile::new(ids, names, pert, domains.clone())?.with_response(y)?;
    let truth = TruthDeck::from_pairs((0..n).map(|j| (j, j)), &domains, &domains)?;
    Ok(Population {
        register,
        perturbed,
        truth,
        area_effects,
    })
}
