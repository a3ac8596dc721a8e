//! Delimited-text readers and writers for record files, link lists and
//! per-domain tables, plus the TOML schema sidecar describing key fields.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{KeyCode, KeyFieldSchema, MatchMatrix, RecordFile};
use crate::error::{Error, Result};

/// How a key column's raw text maps to category codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyColumn {
    pub name: String,
    pub cardinality: u16,
    #[serde(default = "yes")]
    pub missing_allowed: bool,
    /// Category labels; code = position + 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<String>>,
    /// Integer columns: code = value − offset.
    #[serde(default)]
    pub offset: i64,
}

fn yes() -> bool {
    true
}

impl KeyColumn {
    pub fn schema(&self) -> KeyFieldSchema {
        KeyFieldSchema {
            name: self.name.clone(),
            cardinality: self.cardinality,
            missing_allowed: self.missing_allowed,
        }
    }

    fn decode(&self, raw: &str) -> std::result::Result<u16, String> {
        if let Some(levels) = &self.levels {
            return levels
                .iter()
                .position(|l| l == raw)
                .map(|p| p as u16 + 1)
                .ok_or_else(|| format!("unknown level `{raw}` for `{}`", self.name));
        }
        let v: i64 = raw
            .parse()
            .map_err(|_| format!("`{raw}` is not an integer code for `{}`", self.name))?;
        let code = v - self.offset;
        u16::try_from(code).map_err(|_| format!("value {v} out of range for `{}`", self.name))
    }

    pub fn encode(&self, code: KeyCode) -> String {
        match code {
            None => String::new(),
            Some(c) => match &self.levels {
                Some(levels) => levels
                    .get(c as usize - 1)
                    .cloned()
                    .unwrap_or_else(|| c.to_string()),
                None => (c as i64 + self.offset).to_string(),
            },
        }
    }
}

/// Sidecar describing the layout of a record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSchema {
    #[serde(default = "default_id")]
    pub id_column: String,
    #[serde(default = "default_domain")]
    pub domain_column: String,
    /// Prefix stripped from domain labels (`Area7` → 7).
    #[serde(default)]
    pub domain_prefix: String,
    pub n_domains: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default = "default_missing")]
    pub missing_tokens: Vec<String>,
    #[serde(rename = "key")]
    pub keys: Vec<KeyColumn>,
}

fn default_id() -> String {
    "id".into()
}
fn default_domain() -> String {
    "domain".into()
}
fn default_missing() -> Vec<String> {
    vec![String::new(), "-".into(), "NA".into()]
}

impl FileSchema {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn key_schema(&self) -> Vec<KeyFieldSchema> {
        self.keys.iter().map(KeyColumn::schema).collect()
    }

    pub fn key(&self, name: &str) -> Option<&KeyColumn> {
        self.keys.iter().find(|k| k.name == name)
    }

    pub fn domain_label(&self, d: usize) -> String {
        format!("{}{}", self.domain_prefix, d + 1)
    }

    fn parse_domain(&self, raw: &str) -> std::result::Result<usize, String> {
        let s = raw.trim();
        let s = s.strip_prefix(self.domain_prefix.as_str()).unwrap_or(s);
        match s.parse::<usize>() {
            Ok(d) if d >= 1 => Ok(d - 1),
            _ => Err(format!("bad domain label `{raw}`")),
        }
    }
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

pub fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn header_index(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::parse(path, format!("missing column `{name}`")))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::parse(path, e.to_string())
}

/// Reads a record file; key values are decoded per the schema, missing tokens
/// become `None`. Range checks are left to [`crate::datamodel::validate_file`].
pub fn read_record_file(path: &Path, schema: &FileSchema) -> Result<RecordFile> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let id_col = header_index(&headers, &schema.id_column, path)?;
    let dom_col = header_index(&headers, &schema.domain_column, path)?;
    let key_cols = schema
        .keys
        .iter()
        .map(|k| header_index(&headers, &k.name, path))
        .collect::<Result<Vec<_>>>()?;
    let y_col = schema
        .response
        .as_ref()
        .map(|r| header_index(&headers, r, path))
        .transpose()?;
    let x_cols = schema
        .covariates
        .iter()
        .map(|c| header_index(&headers, c, path))
        .collect::<Result<Vec<_>>>()?;

    let mut ids = Vec::new();
    let mut keys = Vec::new();
    let mut domains = Vec::new();
    let mut y = Vec::new();
    let mut x = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let at = |c: usize| rec.get(c).unwrap_or("");
        let line_err = |m: String| Error::parse(path, format!("data row {}: {m}", row + 1));
        ids.push(at(id_col).to_string());
        domains.push(schema.parse_domain(at(dom_col)).map_err(line_err)?);
        for (k, &c) in schema.keys.iter().zip(&key_cols) {
            let raw = at(c);
            if schema.missing_tokens.iter().any(|t| t == raw) {
                keys.push(None);
            } else {
                keys.push(Some(k.decode(raw).map_err(line_err)?));
            }
        }
        if let Some(c) = y_col {
            y.push(parse_f64(at(c)).map_err(line_err)?);
        }
        for &c in &x_cols {
            x.push(parse_f64(at(c)).map_err(line_err)?);
        }
    }
    let names = schema.keys.iter().map(|k| k.name.clone()).collect();
    let mut file = RecordFile::new(ids, names, keys, domains)?;
    if y_col.is_some() {
        file = file.with_response(y)?;
    }
    if !x_cols.is_empty() {
        file = file.with_covariates(schema.covariates.clone(), x)?;
    }
    Ok(file)
}

fn parse_f64(raw: &str) -> std::result::Result<f64, String> {
    raw.parse::<f64>()
        .map_err(|_| format!("`{raw}` is not a number"))
}

/// Writes a record file using the schema's column names and encodings.
pub fn write_record_file(path: &Path, file: &RecordFile, schema: &FileSchema) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec![schema.id_column.clone()];
    header.extend(schema.keys.iter().map(|k| k.name.clone()));
    header.push(schema.domain_column.clone());
    if let Some(r) = &schema.response {
        header.push(r.clone());
    }
    header.extend(schema.covariates.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    let cols: Vec<usize> = schema
        .keys
        .iter()
        .map(|k| {
            file.field_index(&k.name)
                .ok_or_else(|| Error::InvalidInput(format!("file has no key field `{}`", k.name)))
        })
        .collect::<Result<_>>()?;
    for i in 0..file.len() {
        let mut row = vec![file.ids()[i].clone()];
        for (k, &c) in schema.keys.iter().zip(&cols) {
            row.push(k.encode(file.key(i, c)));
        }
        row.push(schema.domain_label(file.domain(i)));
        if schema.response.is_some() {
            let y = file
                .response()
                .ok_or_else(|| Error::InvalidInput("file has no response column".into()))?;
            row.push(fmt_f64(y[i]));
        }
        if !schema.covariates.is_empty() {
            let x = file
                .covariate_row(i)
                .ok_or_else(|| Error::InvalidInput("file has no covariates".into()))?;
            row.extend(x.iter().map(|&v| fmt_f64(v)));
        }
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Shortest round-trip representation; deterministic across runs.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkRow {
    pub id1: String,
    pub id2: String,
    pub score: f64,
}

pub fn write_links(path: &Path, rows: &[LinkRow]) -> Result<()> {
    let mut w = writer(path)?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_links(path: &Path) -> Result<Vec<LinkRow>> {
    let mut rdr = reader(path)?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| csv_err(path, e)))
        .collect()
}

/// Resolves id pairs against two files into a validated [`MatchMatrix`].
pub fn links_to_matrix(rows: &[LinkRow], f1: &RecordFile, f2: &RecordFile) -> Result<MatchMatrix> {
    let idx1: HashMap<&str, usize> = f1.ids().iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let idx2: HashMap<&str, usize> = f2.ids().iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut pairs = Vec::with_capacity(rows.len());
    for r in rows {
        let j = *idx1
            .get(r.id1.as_str())
            .ok_or_else(|| Error::InvalidInput(format!("unknown file-1 id `{}`", r.id1)))?;
        let j2 = *idx2
            .get(r.id2.as_str())
            .ok_or_else(|| Error::InvalidInput(format!("unknown file-2 id `{}`", r.id2)))?;
        pairs.push((j, j2));
    }
    MatchMatrix::from_pairs(pairs, f1.domains(), f2.domains())
}

/// Per-domain population totals: `N_d` and covariate means `X̄_d`.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationTable {
    pub sizes: Vec<f64>,
    /// Row-major `D × p`.
    pub xbar: Vec<f64>,
    pub covariate_names: Vec<String>,
}

impl PopulationTable {
    pub fn n_domains(&self) -> usize {
        self.sizes.len()
    }

    pub fn p(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn xbar_row(&self, d: usize) -> &[f64] {
        let p = self.p();
        &self.xbar[d * p..(d + 1) * p]
    }
}

/// Reads `domain, N_d, <covariate means...>`. Domains must be `1..=D` in
/// any order without gaps.
pub fn read_population(path: &Path, domain_prefix: &str) -> Result<PopulationTable> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.len() < 2 {
        return Err(Error::parse(path, "expected columns domain, N_d, xbar..."));
    }
    let names: Vec<String> = headers.iter().skip(2).map(str::to_string).collect();
    let p = names.len();
    let mut rows: Vec<(usize, f64, Vec<f64>)> = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let err = |m: String| Error::parse(path, format!("data row {}: {m}", row + 1));
        let label = rec.get(0).unwrap_or("");
        let d = label
            .strip_prefix(domain_prefix)
            .unwrap_or(label)
            .parse::<usize>()
            .ok()
            .filter(|&d| d >= 1)
            .ok_or_else(|| err(format!("bad domain label `{label}`")))?;
        let n = parse_f64(rec.get(1).unwrap_or("")).map_err(err)?;
        let xs = (0..p)
            .map(|k| parse_f64(rec.get(k + 2).unwrap_or("")).map_err(err))
            .collect::<Result<Vec<_>>>()?;
        rows.push((d - 1, n, xs));
    }
    rows.sort_by_key(|r| r.0);
    for (i, r) in rows.iter().enumerate() {
        if r.0 != i {
            return Err(Error::parse(path, format!("domain {} missing or repeated", i + 1)));
        }
    }
    Ok(PopulationTable {
        sizes: rows.iter().map(|r| r.1).collect(),
        xbar: rows.iter().flat_map(|r| r.2.iter().copied()).collect(),
        covariate_names: names,
    })
}

pub fn write_population(path: &Path, table: &PopulationTable, domain_prefix: &str) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["domain".to_string(), "N_d".to_string()];
    header.extend(table.covariate_names.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for d in 0..table.n_domains() {
        let mut row = vec![format!("{domain_prefix}{}", d + 1), fmt_f64(table.sizes[d])];
        row.extend(table.xbar_row(d).iter().map(|&v| fmt_f64(v)));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Unit-level data: `domain, y, x1..xp`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitTable {
    pub domains: Vec<usize>,
    pub y: Vec<f64>,
    pub x: Vec<f64>,
    pub covariate_names: Vec<String>,
}

pub fn read_units(path: &Path, domain_prefix: &str) -> Result<UnitTable> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.len() < 2 {
        return Err(Error::parse(path, "expected columns domain, y, x..."));
    }
    let names: Vec<String> = headers.iter().skip(2).map(str::to_string).collect();
    let p = names.len();
    let mut out = UnitTable {
        domains: Vec::new(),
        y: Vec::new(),
        x: Vec::new(),
        covariate_names: names,
    };
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let err = |m: String| Error::parse(path, format!("data row {}: {m}", row + 1));
        let label = rec.get(0).unwrap_or("");
        let d = label
            .strip_prefix(domain_prefix)
            .unwrap_or(label)
            .parse::<usize>()
            .ok()
            .filter(|&d| d >= 1)
            .ok_or_else(|| err(format!("bad domain label `{label}`")))?;
        out.domains.push(d - 1);
        out.y.push(parse_f64(rec.get(1).unwrap_or("")).map_err(err)?);
        for k in 0..p {
            out.x.push(parse_f64(rec.get(k + 2).unwrap_or("")).map_err(err)?);
        }
    }
    Ok(out)
}

pub fn write_units(path: &Path, t: &UnitTable, domain_prefix: &str) -> Result<()> {
    let mut w = writer(path)?;
    let p = t.covariate_names.len();
    let mut header = vec!["domain".to_string(), "y".to_string()];
    header.extend(t.covariate_names.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for i in 0..t.y.len() {
        let mut row = vec![format!("{domain_prefix}{}", t.domains[i] + 1), fmt_f64(t.y[i])];
        row.extend(t.x[i * p..(i + 1) * p].iter().map(|&v| fmt_f64(v)));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `domain, lambda`.
pub fn read_lambda(path: &Path, n_domains: usize, domain_prefix: &str) -> Result<Vec<f64>> {
    let mut rdr = reader(path)?;
    let mut out = vec![None; n_domains];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let err = |m: String| Error::parse(path, format!("data row {}: {m}", row + 1));
        let label = rec.get(0).unwrap_or("");
        let d = label
            .strip_prefix(domain_prefix)
            .unwrap_or(label)
            .parse::<usize>()
            .ok()
            .filter(|&d| d >= 1 && d <= n_domains)
            .ok_or_else(|| err(format!("bad domain label `{label}`")))?;
        out[d - 1] = Some(parse_f64(rec.get(1).unwrap_or("")).map_err(err)?);
    }
    out.into_iter()
        .enumerate()
        .map(|(d, v)| v.ok_or_else(|| Error::parse(path, format!("no lambda for domain {}", d + 1))))
        .collect()
}
