use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Which side of `label_threshold` counts as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Below,
    Above,
}

/// Column roles for a CSV file, read from `key = value` lines:
///
/// ```text
/// label = Financial Distress
/// categorical = Company,Time,x80
/// drop = Amount
/// label_threshold = -0.5
/// label_positive = below
/// ```
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Schema {
    pub label: String,
    pub categorical: Vec<String>,
    pub drop: Vec<String>,
    /// Binarizes a continuous label column.
    pub label_threshold: Option<f64>,
    pub label_positive: Option<Polarity>,
}

impl Schema {
    pub fn new(label: impl Into<String>) -> Self {
        Schema {
            label: label.into(),
            ..Default::default()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Schema::default();
        let names = |v: &str| -> Vec<String> {
            v.split(',').map(str::trim).filter(|c| !c.is_empty()).map(String::from).collect()
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                line: i as u64 + 1,
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got `{line}`")))?;
            let v = v.trim();
            match k.trim() {
                "label" => s.label = v.to_string(),
                "categorical" => s.categorical = names(v),
                "drop" => s.drop = names(v),
                "label_threshold" => {
                    s.label_threshold = Some(v.parse().map_err(|_| err(format!("bad threshold `{v}`")))?)
                }
                "label_positive" => {
                    s.label_positive = Some(match v {
                        "below" => Polarity::Below,
                        "above" => Polarity::Above,
                        _ => return Err(err(format!("label_positive must be below or above, got `{v}`"))),
                    })
                }
                other => return Err(err(format!("unknown schema key `{other}`"))),
            }
        }
        if s.label.is_empty() {
            return Err(Error::Config("schema does not name a label column".into()));
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "label={}", self.label);
        let _ = writeln!(s, "categorical={}", self.categorical.join(","));
        let _ = writeln!(s, "drop={}", self.drop.join(","));
        if let Some(t) = self.label_threshold {
            let _ = writeln!(s, "label_threshold={t:e}");
        }
        if let Some(p) = self.label_positive {
            let _ = writeln!(s, "label_positive={}", if p == Polarity::Below { "below" } else { "above" });
        }
        s
    }

    fn binarize(&self, raw: &str) -> std::result::Result<f64, String> {
        let v: f64 = raw
            .trim()
            .parse()
            .map_err(|_| format!("label `{raw}` is not numeric"))?;
        match self.label_threshold {
            Some(t) => {
                let pos = match self.label_positive.unwrap_or(Polarity::Above) {
                    Polarity::Below => v < t,
                    Polarity::Above => v > t,
                };
                Ok(if pos { 1.0 } else { 0.0 })
            }
            None if v == 0.0 || v == 1.0 => Ok(v),
            None => Err(format!("label `{raw}` is not 0/1 and no label_threshold is set")),
        }
    }
}

/// An encoded feature matrix with binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<f64>,
    pub feature_names: Vec<String>,
    /// Columns subject to z-scoring (raw numeric inputs, not one-hot indicators).
    pub numeric: Vec<bool>,
    /// SHA-256 over the source bytes and the schema.
    pub fingerprint: [u8; 32],
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<f64>, feature_names: Vec<String>, numeric: Vec<bool>) -> Result<Self> {
        let (n, d) = features.shape();
        if n == 0 || d == 0 {
            return Err(Error::Data(format!("dataset must be non-empty, got {n} x {d}")));
        }
        if labels.len() != n || feature_names.len() != d || numeric.len() != d {
            return Err(Error::Data(format!(
                "{n} x {d} features with {} labels, {} names, {} numeric flags",
                labels.len(),
                feature_names.len(),
                numeric.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::Data(format!("label {bad} is not binary")));
        }
        features.ensure_finite("Dataset::new")?;
        let mut ds = Dataset {
            features,
            labels,
            feature_names,
            numeric,
            fingerprint: [0; 32],
        };
        ds.fingerprint = ds.content_hash();
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1.0).count()
    }

    pub fn fingerprint_hex(&self) -> String {
        hex::encode(self.fingerprint)
    }

    pub fn labels_tensor(&self) -> Tensor {
        Tensor::from_vec(self.len(), 1, self.labels.clone()).expect("label column")
    }

    /// Row subset; the fingerprint is derived from the parent's.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let mut h = Sha256::new();
        h.update(self.fingerprint);
        for &r in rows {
            h.update((r as u64).to_le_bytes());
        }
        Dataset {
            features: self.features.select_rows(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            feature_names: self.feature_names.clone(),
            numeric: self.numeric.clone(),
            fingerprint: h.finalize().into(),
        }
    }

    fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.len() as u64).to_le_bytes());
        h.update((self.dim() as u64).to_le_bytes());
        for v in self.features.data().iter().chain(&self.labels) {
            h.update(v.to_le_bytes());
        }
        for name in &self.feature_names {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
        }
        h.finalize().into()
    }
}

enum ColumnRole {
    Numeric,
    Categorical,
    Label,
    Dropped,
}

/// Reads a CSV with a header row and encodes it per `schema`.
///
/// Categorical columns expand in place into one indicator column per level,
/// levels in sorted order. Normalization happens later, once the train fold
/// is known (see [`super::prepare`]).
pub fn load_csv(path: &Path, schema: &Schema) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    load_csv_bytes(&bytes, schema)
}

pub fn load_csv_bytes(bytes: &[u8], schema: &Schema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Data(format!("cannot read header: {e}")))?
        .iter()
        .map(String::from)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::Data("empty file".into()));
    }
    let find = |name: &str| header.iter().position(|h| h == name);
    if find(&schema.label).is_none() {
        return Err(Error::Data(format!("label column `{}` not found in header", schema.label)));
    }
    for c in schema.categorical.iter().chain(&schema.drop) {
        if find(c).is_none() {
            return Err(Error::Data(format!("schema column `{c}` not found in header")));
        }
    }
    let roles: Vec<ColumnRole> = header
        .iter()
        .map(|h| {
            if *h == schema.label {
                ColumnRole::Label
            } else if schema.drop.contains(h) {
                ColumnRole::Dropped
            } else if schema.categorical.contains(h) {
                ColumnRole::Categorical
            } else {
                ColumnRole::Numeric
            }
        })
        .collect();

    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut lines: Vec<u64> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::Parse {
                line,
                message: e.to_string(),
            }
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, got {}", header.len(), rec.len()),
            });
        }
        rows.push(rec.iter().map(String::from).collect());
        lines.push(line);
    }
    if rows.is_empty() {
        return Err(Error::Data("file has a header but no rows".into()));
    }

    let mut levels: HashMap<usize, Vec<String>> = HashMap::new();
    for (j, role) in roles.iter().enumerate() {
        if let ColumnRole::Categorical = role {
            let set: BTreeSet<&str> = rows.iter().map(|r| r[j].as_str()).collect();
            levels.insert(j, set.into_iter().map(String::from).collect());
        }
    }

    let mut names = Vec::new();
    let mut numeric = Vec::new();
    for (j, role) in roles.iter().enumerate() {
        match role {
            ColumnRole::Numeric => {
                names.push(header[j].clone());
                numeric.push(true);
            }
            ColumnRole::Categorical => {
                for lvl in &levels[&j] {
                    names.push(format!("{}={lvl}", header[j]));
                    numeric.push(false);
                }
            }
            ColumnRole::Label | ColumnRole::Dropped => {}
        }
    }
    let d = names.len();
    if d == 0 {
        return Err(Error::Data("schema leaves no feature columns".into()));
    }

    let label_col = find(&schema.label).expect("checked above");
    let mut data = Vec::with_capacity(rows.len() * d);
    let mut labels = Vec::with_capacity(rows.len());
    for (row, &line) in rows.iter().zip(&lines) {
        for (j, role) in roles.iter().enumerate() {
            match role {
                ColumnRole::Numeric => {
                    let v: f64 = row[j].parse().map_err(|_| Error::Parse {
                        line,
                        message: format!("column `{}`: `{}` is not a number", header[j], row[j]),
                    })?;
                    if !v.is_finite() {
                        return Err(Error::Parse {
                            line,
                            message: format!("column `{}` is not finite", header[j]),
                        });
                    }
                    data.push(v);
                }
                ColumnRole::Categorical => {
                    data.extend(levels[&j].iter().map(|l| if *l == row[j] { 1.0 } else { 0.0 }));
                }
                ColumnRole::Label | ColumnRole::Dropped => {}
            }
        }
        labels.push(schema.binarize(&row[label_col]).map_err(|message| Error::Parse { line, message })?);
    }
    let features = Tensor::from_vec(rows.len(), d, data)?;
    let mut ds = Dataset::new(features, labels, names, numeric)?;
    let mut h = Sha256::new();
    h.update(bytes);
    h.update(schema.canonical().as_bytes());
    ds.fingerprint = h.finalize().into();
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_expands_in_place() {
        let csv = "a,color,y\n1.5,red,1\n2.5,blue,0\n-1,red,1\n";
        let mut schema = Schema::new("y");
        schema.categorical = vec!["color".into()];
        let ds = load_csv_bytes(csv.as_bytes(), &schema).unwrap();
        assert_eq!(ds.feature_names, ["a", "color=blue", "color=red"]);
        assert_eq!(ds.numeric, [true, false, false]);
        assert_eq!(ds.features.row(1), &[2.5, 1.0, 0.0]);
        assert_eq!(ds.labels, [1.0, 0.0, 1.0]);
    }

    #[test]
    fn bad_rows_report_line_numbers() {
        let csv = "a,y\n1,0\nx,1\n";
        match load_csv_bytes(csv.as_bytes(), &Schema::new("y")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(load_csv_bytes(b"a,b\n1,2\n", &Schema::new("y")), Err(Error::Data(_))));
        assert!(matches!(load_csv_bytes(b"", &Schema::new("y")), Err(Error::Data(_))));
        assert!(load_csv_bytes(b"a,y\n1,0.5\n", &Schema::new("y")).is_err());
    }

    #[test]
    fn threshold_binarizes() {
        let s = Schema::parse("label = t\nlabel_threshold = -0.5\nlabel_positive = below\ndrop = id\n").unwrap();
        let ds = load_csv_bytes(b"id,x,t\n1,0,-0.7\n2,0,0.3\n", &s).unwrap();
        assert_eq!(ds.labels, [1.0, 0.0]);
        assert_eq!(ds.dim(), 1);
    }

    #[test]
    fn schema_round_trip() {
        let s = Schema::parse("label=y\ncategorical=a, b\ndrop=c\nlabel_threshold=2\nlabel_positive=above\n").unwrap();
        assert_eq!(Schema::parse(&s.canonical()).unwrap(), s);
        assert!(Schema::parse("categorical=a\n").is_err());
    }
}
