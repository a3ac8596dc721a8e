//! Shared domain types: record files, key-field schemas, matching matrices
//! and ground-truth link decks.
//!
//! Domains are stored 0-based (`0..n_domains`); text files use `1..=D`.
//! Key values are category codes `1..=k` with `None` as the MISSING sentinel.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Category code of a key field; `None` is MISSING.
pub type KeyCode = Option<u16>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyFieldSchema {
    pub name: String,
    pub cardinality: u16,
    #[serde(default = "default_true")]
    pub missing_allowed: bool,
}

fn default_true() -> bool {
    true
}

impl KeyFieldSchema {
    pub fn new(name: impl Into<String>, cardinality: u16) -> Self {
        Self {
            name: name.into(),
            cardinality,
            missing_allowed: true,
        }
    }
}

/// Checks the schema-level invariants: cardinality ≥ 2 and unique names.
pub fn validate_schema(schema: &[KeyFieldSchema]) -> Result<()> {
    let mut seen = HashSet::new();
    for field in schema {
        if field.cardinality < 2 {
            return Err(Error::InvalidInput(format!(
                "key field `{}` has cardinality {} (must be at least 2)",
                field.name, field.cardinality
            )));
        }
        if !seen.insert(field.name.as_str()) {
            return Err(Error::InvalidInput(format!(
                "duplicate key field name `{}`",
                field.name
            )));
        }
    }
    Ok(())
}

/// A table of units: ids, categorical key fields, a domain label and
/// optional response / covariate columns.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordFile {
    ids: Vec<String>,
    field_names: Vec<String>,
    keys: Vec<KeyCode>,
    domains: Vec<usize>,
    response: Option<Vec<f64>>,
    covariate_names: Vec<String>,
    covariates: Option<Vec<f64>>,
}

impl RecordFile {
    /// `keys` is row-major, `ids.len() × field_names.len()`.
    pub fn new(
        ids: Vec<String>,
        field_names: Vec<String>,
        keys: Vec<KeyCode>,
        domains: Vec<usize>,
    ) -> Result<Self> {
        let n = ids.len();
        if keys.len() != n * field_names.len() {
            return Err(Error::InvalidInput(format!(
                "key matrix has {} entries, expected {} records x {} fields",
                keys.len(),
                n,
                field_names.len()
            )));
        }
        if domains.len() != n {
            return Err(Error::InvalidInput(format!(
                "domain column has {} entries, expected {n}",
                domains.len()
            )));
        }
        Ok(Self {
            ids,
            field_names,
            keys,
            domains,
            response: None,
            covariate_names: Vec::new(),
            covariates: None,
        })
    }

    pub fn with_response(mut self, y: Vec<f64>) -> Result<Self> {
        if y.len() != self.len() {
            return Err(Error::InvalidInput(format!(
                "response has {} values for {} records",
                y.len(),
                self.len()
            )));
        }
        self.response = Some(y);
        Ok(self)
    }

    /// `values` is row-major, `len() × names.len()`.
    pub fn with_covariates(mut self, names: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.len() * names.len() {
            return Err(Error::InvalidInput(format!(
                "covariate matrix has {} entries, expected {} x {}",
                values.len(),
                self.len(),
                names.len()
            )));
        }
        self.covariate_names = names;
        self.covariates = Some(values);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn field_names(&self) -> &[String] {
        &self.field_names
    }

    pub fn n_fields(&self) -> usize {
        self.field_names.len()
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.field_names.iter().position(|f| f == name)
    }

    pub fn key(&self, record: usize, field: usize) -> KeyCode {
        self.keys[record * self.field_names.len() + field]
    }

    pub fn key_row(&self, record: usize) -> &[KeyCode] {
        let h = self.field_names.len();
        &self.keys[record * h..(record + 1) * h]
    }

    pub fn domains(&self) -> &[usize] {
        &self.domains
    }

    pub fn domain(&self, record: usize) -> usize {
        self.domains[record]
    }

    pub fn response(&self) -> Option<&[f64]> {
        self.response.as_deref()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn covariate_row(&self, record: usize) -> Option<&[f64]> {
        let p = self.covariate_names.len();
        self.covariates
            .as_ref()
            .map(|c| &c[record * p..(record + 1) * p])
    }

    /// Record indices grouped by domain.
    pub fn records_by_domain(&self, n_domains: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); n_domains];
        for (i, &d) in self.domains.iter().enumerate() {
            if d < n_domains {
                out[d].push(i);
            }
        }
        out
    }

    /// Keeps only the listed records, in the given order.
    pub fn subset(&self, rows: &[usize]) -> RecordFile {
        let h = self.n_fields();
        let p = self.n_covariates();
        let mut keys = Vec::with_capacity(rows.len() * h);
        for &r in rows {
            keys.extend_from_slice(self.key_row(r));
        }
        RecordFile {
            ids: rows.iter().map(|&r| self.ids[r].clone()).collect(),
            field_names: self.field_names.clone(),
            keys,
            domains: rows.iter().map(|&r| self.domains[r]).collect(),
            response: self
                .response
                .as_ref()
                .map(|y| rows.iter().map(|&r| y[r]).collect()),
            covariate_names: self.covariate_names.clone(),
            covariates: self.covariates.as_ref().map(|c| {
                let mut out = Vec::with_capacity(rows.len() * p);
                for &r in rows {
                    out.extend_from_slice(&c[r * p..(r + 1) * p]);
                }
                out
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Violation {
    BadCategory {
        row: usize,
        id: String,
        field: String,
        code: u16,
        cardinality: u16,
    },
    MissingNotAllowed {
        row: usize,
        id: String,
        field: String,
    },
    DuplicateId {
        id: String,
        rows: Vec<usize>,
    },
    BadDomain {
        row: usize,
        id: String,
        domain: usize,
        n_domains: usize,
    },
    UnknownField {
        field: String,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::BadCategory {
                row,
                id,
                field,
                code,
                cardinality,
            } => write!(
                f,
                "row {row} (id {id}): field `{field}` has code {code} outside 1..={cardinality}"
            ),
            Violation::MissingNotAllowed { row, id, field } => {
                write!(f, "row {row} (id {id}): field `{field}` is missing")
            }
            Violation::DuplicateId { id, rows } => {
                write!(f, "duplicate id {id} on rows {rows:?}")
            }
            Violation::BadDomain {
                row,
                id,
                domain,
                n_domains,
            } => write!(
                f,
                "row {row} (id {id}): domain {} outside 1..={n_domains}",
                domain + 1
            ),
            Violation::UnknownField { field } => {
                write!(f, "schema field `{field}` is not present in the file")
            }
        }
    }
}

/// Lists every invariant violation of `file`; empty iff the file is valid.
pub fn validate_file(
    file: &RecordFile,
    schema: &[KeyFieldSchema],
    n_domains: usize,
) -> Vec<Violation> {
    let mut out = Vec::new();

    let mut rows_by_id: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (row, id) in file.ids.iter().enumerate() {
        rows_by_id.entry(id.as_str()).or_default().push(row);
    }
    for (id, rows) in rows_by_id {
        if rows.len() > 1 {
            out.push(Violation::DuplicateId {
                id: id.to_string(),
                rows,
            });
        }
    }

    let columns: Vec<Option<usize>> = schema
        .iter()
        .map(|s| file.field_index(&s.name))
        .collect();
    for (s, col) in schema.iter().zip(&columns) {
        if col.is_none() {
            out.push(Violation::UnknownField {
                field: s.name.clone(),
            });
        }
    }

    for row in 0..file.len() {
        for (s, col) in schema.iter().zip(&columns) {
            let Some(col) = *col else { continue };
            match file.key(row, col) {
                None if !s.missing_allowed => out.push(Violation::MissingNotAllowed {
                    row,
                    id: file.ids[row].clone(),
                    field: s.name.clone(),
                }),
                Some(code) if code == 0 || code > s.cardinality => {
                    out.push(Violation::BadCategory {
                        row,
                        id: file.ids[row].clone(),
                        field: s.name.clone(),
                        code,
                        cardinality: s.cardinality,
                    })
                }
                _ => {}
            }
        }
        let d = file.domains[row];
        if d >= n_domains {
            out.push(Violation::BadDomain {
                row,
                id: file.ids[row].clone(),
                domain: d,
                n_domains,
            });
        }
    }
    out
}

/// Two record files sharing a domain partition of size `n_domains`.
#[derive(Debug, Clone)]
pub struct FilePair {
    pub file1: RecordFile,
    pub file2: RecordFile,
    pub n_domains: usize,
}

impl FilePair {
    /// Rejects the pair when either file has a record outside `0..n_domains`.
    pub fn new(file1: RecordFile, file2: RecordFile, n_domains: usize) -> Result<Self> {
        if n_domains == 0 {
            return Err(Error::InvalidInput("at least one domain is required".into()));
        }
        for (name, file) in [("file 1", &file1), ("file 2", &file2)] {
            if let Some((row, &d)) = file.domains.iter().enumerate().find(|(_, &d)| d >= n_domains)
            {
                return Err(Error::InvalidInput(format!(
                    "{name} record {} (row {row}) has domain {} outside 1..={n_domains}",
                    file.ids[row],
                    d + 1
                )));
            }
        }
        Ok(Self {
            file1,
            file2,
            n_domains,
        })
    }
}

/// A one-to-one, block-diagonal 0/1 matching matrix between two files,
/// stored as partial maps in both directions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchMatrix {
    forward: Vec<Option<u32>>,
    backward: Vec<Option<u32>>,
}

impl MatchMatrix {
    pub fn empty(n1: usize, n2: usize) -> Self {
        Self {
            forward: vec![None; n1],
            backward: vec![None; n2],
        }
    }

    /// Builds a matrix from `(j, j')` pairs, enforcing one-to-one links and
    /// equal domains (`dom1[j] == dom2[j']`).
    pub fn from_pairs(
        pairs: impl IntoIterator<Item = (usize, usize)>,
        dom1: &[usize],
        dom2: &[usize],
    ) -> Result<Self> {
        let mut m = Self::empty(dom1.len(), dom2.len());
        for (j, j2) in pairs {
            if j >= dom1.len() || j2 >= dom2.len() {
                return Err(Error::MatchConstraint(format!(
                    "pair ({j}, {j2}) out of range for files of size {} and {}",
                    dom1.len(),
                    dom2.len()
                )));
            }
            if dom1[j] != dom2[j2] {
                return Err(Error::MatchConstraint(format!(
                    "pair ({j}, {j2}) links domain {} to domain {}",
                    dom1[j] + 1,
                    dom2[j2] + 1
                )));
            }
            if let Some(prev) = m.forward[j] {
                return Err(Error::MatchConstraint(format!(
                    "record {j} of file 1 linked to both {prev} and {j2}"
                )));
            }
            if let Some(prev) = m.backward[j2] {
                return Err(Error::MatchConstraint(format!(
                    "record {j2} of file 2 linked to both {prev} and {j}"
                )));
            }
            m.forward[j] = Some(j2 as u32);
            m.backward[j2] = Some(j as u32);
        }
        Ok(m)
    }

    /// Builds from a forward map without re-checking domains; used by samplers
    /// whose moves preserve the constraints by construction.
    pub(crate) fn from_forward(forward: &[Option<u32>], n2: usize) -> Self {
        let mut backward = vec![None; n2];
        for (j, p) in forward.iter().enumerate() {
            if let Some(j2) = p {
                debug_assert!(backward[*j2 as usize].is_none());
                backward[*j2 as usize] = Some(j as u32);
            }
        }
        Self {
            forward: forward.to_vec(),
            backward,
        }
    }

    pub fn n1(&self) -> usize {
        self.forward.len()
    }

    pub fn n2(&self) -> usize {
        self.backward.len()
    }

    /// Number of links T.
    pub fn len(&self) -> usize {
        self.forward.iter().filter(|p| p.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.iter().all(|p| p.is_none())
    }

    pub fn partner_of(&self, j: usize) -> Option<usize> {
        self.forward[j].map(|x| x as usize)
    }

    pub fn partner_of_col(&self, j2: usize) -> Option<usize> {
        self.backward[j2].map(|x| x as usize)
    }

    pub fn contains(&self, j: usize, j2: usize) -> bool {
        self.forward.get(j).copied().flatten() == Some(j2 as u32)
    }

    /// Links in increasing order of the file-1 index.
    pub fn links(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.forward
            .iter()
            .enumerate()
            .filter_map(|(j, p)| p.map(|j2| (j, j2 as usize)))
    }

    /// Re-checks one-to-one and block-diagonal structure.
    pub fn check(&self, dom1: &[usize], dom2: &[usize]) -> Result<()> {
        if dom1.len() != self.n1() || dom2.len() != self.n2() {
            return Err(Error::MatchConstraint("file sizes do not match".into()));
        }
        let rebuilt = Self::from_pairs(self.links(), dom1, dom2)?;
        if rebuilt != *self {
            return Err(Error::MatchConstraint(
                "forward and backward maps disagree".into(),
            ));
        }
        Ok(())
    }
}

/// Ground-truth co-reference pairs, one-to-one and within domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TruthDeck(MatchMatrix);

impl TruthDeck {
    pub fn new(links: MatchMatrix) -> Self {
        Self(links)
    }

    pub fn from_pairs(
        pairs: impl IntoIterator<Item = (usize, usize)>,
        dom1: &[usize],
        dom2: &[usize],
    ) -> Result<Self> {
        MatchMatrix::from_pairs(pairs, dom1, dom2).map(Self)
    }

    pub fn links(&self) -> &MatchMatrix {
        &self.0
    }

    pub fn contains(&self, j: usize, j2: usize) -> bool {
        self.0.contains(j, j2)
    }

    pub fn true_partner(&self, j: usize) -> Option<usize> {
        self.0.partner_of(j)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkErrorRates {
    pub false_link_rate: f64,
    pub missed_link_rate: f64,
    pub n_declared: usize,
    /// Set when no links were declared and the false-link rate is reported as 0.
    pub no_declared_links: bool,
}

/// False links over declared links and missed links over true links.
pub fn link_error_rates(est: &MatchMatrix, truth: &TruthDeck) -> Result<LinkErrorRates> {
    if truth.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    if est.n1() != truth.links().n1() || est.n2() != truth.links().n2() {
        return Err(Error::InvalidInput(
            "estimated and true links refer to different file pairs".into(),
        ));
    }
    let n_declared = est.len();
    let correct = est.links().filter(|&(j, j2)| truth.contains(j, j2)).count();
    let false_links = n_declared - correct;
    let missed = truth.len() - correct;
    Ok(LinkErrorRates {
        false_link_rate: if n_declared == 0 {
            0.0
        } else {
            false_links as f64 / n_declared as f64
        },
        missed_link_rate: missed as f64 / truth.len() as f64,
        n_declared,
        no_declared_links: n_declared == 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPair {
    pub j: usize,
    pub j2: usize,
    pub score: f64,
}

/// Keeps pairs with `score >= threshold` and, when `one_to_one`, resolves
/// conflicts greedily by descending score (ties by `(j, j')`).
///
/// Cross-domain pairs are dropped. Without `one_to_one` the result cannot be
/// a [`MatchMatrix`], so the accepted pairs are returned as a list.
pub fn threshold_pairs(
    mut pairs: Vec<ScoredPair>,
    threshold: f64,
    one_to_one: bool,
    dom1: &[usize],
    dom2: &[usize],
) -> Vec<ScoredPair> {
    pairs.retain(|p| p.score >= threshold && dom1[p.j] == dom2[p.j2]);
    pairs.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.j.cmp(&b.j))
            .then(a.j2.cmp(&b.j2))
    });
    if !one_to_one {
        return pairs;
    }
    let mut used1 = vec![false; dom1.len()];
    let mut used2 = vec![false; dom2.len()];
    pairs
        .into_iter()
        .filter(|p| {
            if used1[p.j] || used2[p.j2] {
                false
            } else {
                used1[p.j] = true;
                used2[p.j2] = true;
                true
            }
        })
        .collect()
}

/// Greedy one-to-one resolution of thresholded pairs into a [`MatchMatrix`].
pub fn greedy_match(
    pairs: Vec<ScoredPair>,
    threshold: f64,
    dom1: &[usize],
    dom2: &[usize],
) -> MatchMatrix {
    let kept = threshold_pairs(pairs, threshold, true, dom1, dom2);
    let mut forward = vec![None; dom1.len()];
    for p in kept {
        forward[p.j] = Some(p.j2 as u32);
    }
    MatchMatrix::from_forward(&forward, dom2.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn file(ids: &[&str], keys: Vec<KeyCode>, h: usize, domains: Vec<usize>) -> RecordFile {
        let names = (0..h).map(|l| format!("k{l}")).collect();
        RecordFile::new(ids.iter().map(|s| s.to_string()).collect(), names, keys, domains).unwrap()
    }

    fn schema(cards: &[u16]) -> Vec<KeyFieldSchema> {
        cards
            .iter()
            .enumerate()
            .map(|(l, &k)| KeyFieldSchema::new(format!("k{l}"), k))
            .collect()
    }

    #[test]
    fn code_outside_cardinality_is_one_violation() {
        let f = file(&["a", "b"], vec![Some(5), Some(1)], 1, vec![0, 0]);
        let report = validate_file(&f, &schema(&[3]), 1);
        assert_eq!(report.len(), 1);
        assert!(matches!(report[0], Violation::BadCategory { code: 5, .. }));
    }

    #[test]
    fn valid_file_has_empty_report() {
        let f = file(&["a", "b"], vec![Some(3), None], 1, vec![0, 1]);
        assert!(validate_file(&f, &schema(&[3]), 2).is_empty());
    }

    #[test]
    fn duplicate_id_is_named() {
        let f = file(&["a", "a"], vec![Some(1), Some(2)], 1, vec![0, 0]);
        let report = validate_file(&f, &schema(&[3]), 1);
        assert_eq!(report.len(), 1);
        match &report[0] {
            Violation::DuplicateId { id, rows } => {
                assert_eq!(id, "a");
                assert_eq!(rows, &vec![0, 1]);
            }
            v => panic!("unexpected {v:?}"),
        }
    }

    #[test]
    fn domain_out_of_range_and_forbidden_missing() {
        let mut s = schema(&[3]);
        s[0].missing_allowed = false;
        let f = file(&["a", "b"], vec![None, Some(1)], 1, vec![0, 4]);
        let report = validate_file(&f, &s, 2);
        assert_eq!(report.len(), 2);
        assert!(report
            .iter()
            .any(|v| matches!(v, Violation::MissingNotAllowed { row: 0, .. })));
        assert!(report
            .iter()
            .any(|v| matches!(v, Violation::BadDomain { row: 1, domain: 4, .. })));
    }

    #[test]
    fn schema_rejects_low_cardinality_and_duplicates() {
        assert!(validate_schema(&schema(&[1])).is_err());
        let s = vec![KeyFieldSchema::new("a", 2), KeyFieldSchema::new("a", 3)];
        assert!(validate_schema(&s).is_err());
        assert!(validate_schema(&schema(&[2, 31, 101])).is_ok());
    }

    #[test]
    fn file_pair_rejects_unknown_domain() {
        let f1 = file(&["a"], vec![Some(1)], 1, vec![0]);
        let f2 = file(&["b"], vec![Some(1)], 1, vec![3]);
        assert!(FilePair::new(f1.clone(), f2, 2).is_err());
        assert!(FilePair::new(f1.clone(), f1, 2).is_ok());
    }

    #[test]
    fn from_pairs_enforces_constraints() {
        let d1 = [0, 0, 1];
        let d2 = [0, 1, 1];
        assert!(MatchMatrix::from_pairs([(0, 0), (2, 1)], &d1, &d2).is_ok());
        // cross-domain
        assert!(MatchMatrix::from_pairs([(0, 1)], &d1, &d2).is_err());
        // row used twice
        assert!(MatchMatrix::from_pairs([(2, 1), (2, 2)], &d1, &d2).is_err());
        // column used twice
        assert!(MatchMatrix::from_pairs([(0, 0), (1, 0)], &d1, &d2).is_err());
    }

    #[test]
    fn error_rates_identity() {
        let d: Vec<usize> = vec![0; 10];
        let truth = TruthDeck::from_pairs((0..10).map(|j| (j, j)), &d, &d).unwrap();
        let r = link_error_rates(truth.links(), &truth).unwrap();
        assert_eq!((r.false_link_rate, r.missed_link_rate, r.n_declared), (0.0, 0.0, 10));
    }

    #[test]
    fn error_rates_constructed_operating_point() {
        // 1000 true links; 957 declared of which 134 point at the wrong record.
        let n = 1000;
        let d1 = vec![0; n];
        let d2 = vec![0; n + 200];
        let truth = TruthDeck::from_pairs((0..n).map(|j| (j, j)), &d1, &d2).unwrap();
        let pairs = (0..957).map(|j| if j < 134 { (j, n + j) } else { (j, j) });
        let est = MatchMatrix::from_pairs(pairs, &d1, &d2).unwrap();
        let r = link_error_rates(&est, &truth).unwrap();
        assert_eq!(r.n_declared, 957);
        assert!((r.false_link_rate - 134.0 / 957.0).abs() < 1e-15);
        assert!((r.false_link_rate - 0.1400).abs() < 5e-5);
        assert!((r.missed_link_rate - 0.1770).abs() < 1e-12);
    }

    #[test]
    fn error_rates_empty_estimate_and_empty_truth() {
        let d = vec![0; 3];
        let truth = TruthDeck::from_pairs([(0, 0)], &d, &d).unwrap();
        let r = link_error_rates(&MatchMatrix::empty(3, 3), &truth).unwrap();
        assert!(r.no_declared_links);
        assert_eq!((r.false_link_rate, r.missed_link_rate, r.n_declared), (0.0, 1.0, 0));
        let empty = TruthDeck::new(MatchMatrix::empty(3, 3));
        assert!(matches!(
            link_error_rates(&MatchMatrix::empty(3, 3), &empty),
            Err(Error::NoGroundTruth)
        ));
    }

    #[test]
    fn greedy_keeps_best_pair_per_record() {
        let d = vec![0; 3];
        let pairs = vec![
            ScoredPair { j: 0, j2: 0, score: 0.8 },
            ScoredPair { j: 0, j2: 1, score: 0.9 },
            ScoredPair { j: 1, j2: 2, score: 0.3 },
        ];
        let m = greedy_match(pairs, 0.5, &d, &d);
        assert_eq!(m.links().collect::<Vec<_>>(), vec![(0, 1)]);
    }

    #[test]
    fn greedy_ties_break_lexicographically() {
        let d = vec![0; 3];
        let pairs = vec![
            ScoredPair { j: 1, j2: 0, score: 0.7 },
            ScoredPair { j: 0, j2: 1, score: 0.7 },
            ScoredPair { j: 0, j2: 0, score: 0.7 },
        ];
        let m = greedy_match(pairs, 0.5, &d, &d);
        assert_eq!(m.links().collect::<Vec<_>>(), vec![(0, 0)]);
    }

    proptest! {
        #[test]
        fn greedy_output_satisfies_invariants(
            raw in proptest::collection::vec((0usize..12, 0usize..15, 0.0f64..1.0), 0..80),
            seed in 0u64..1000,
        ) {
            let dom1: Vec<usize> = (0..12).map(|j| (j + seed as usize) % 3).collect();
            let dom2: Vec<usize> = (0..15).map(|j| j % 3).collect();
            let pairs = raw.into_iter().map(|(j, j2, score)| ScoredPair { j, j2, score }).collect();
            let m = greedy_match(pairs, 0.5, &dom1, &dom2);
            prop_assert!(m.check(&dom1, &dom2).is_ok());
        }

        #[test]
        fn from_pairs_never_builds_an_invalid_matrix(
            raw in proptest::collection::vec((0usize..8, 0usize..8), 0..20),
        ) {
            let dom1: Vec<usize> = (0..8).map(|j| j % 2).collect();
            let dom2: Vec<usize> = (0..8).map(|j| (j / 4) % 2).collect();
            if let Ok(m) = MatchMatrix::from_pairs(raw, &dom1, &dom2) {
                prop_assert!(m.check(&dom1, &dom2).is_ok());
            }
        }

        #[test]
        fn identical_estimate_has_zero_error(n in 1usize..40) {
            let d: Vec<usize> = (0..n).map(|j| j % 4).collect();
            let truth = TruthDeck::from_pairs((0..n).map(|j| (j, j)), &d, &d).unwrap();
            let r = link_error_rates(truth.links(), &truth).unwrap();
            prop_assert_eq!(r.false_link_rate, 0.0);
            prop_assert_eq!(r.missed_link_rate, 0.0);
        }
    }
}
