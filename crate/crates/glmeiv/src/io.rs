//! Readers for count matrices, covariates, pair lists and key=value files.

use crate::design::DesignMatrix;
use crate::error::{Error, Result};
use std::collections::HashMap;
use std::fs;
use std::path::Path;

fn parse_err<T>(path: &Path, msg: impl Into<String>) -> Result<T> {
    Err(Error::Parse { file: path.display().to_string(), msg: msg.into() })
}

/// Cells-by-features counts, stored one dense column per feature.
#[derive(Clone, Debug, PartialEq)]
pub struct CountMatrix {
    pub features: Vec<String>,
    pub columns: Vec<Vec<f64>>,
    pub n_cells: usize,
    index: HashMap<String, usize>,
}

impl CountMatrix {
    pub fn new(features: Vec<String>, columns: Vec<Vec<f64>>, n_cells: usize) -> Result<Self> {
        if features.len() != columns.len() {
            return Err(Error::Dimension("feature names and columns differ in number".into()));
        }
        if let Some(c) = columns.iter().find(|c| c.len() != n_cells) {
            return Err(Error::Dimension(format!("column of length {} for {n_cells} cells", c.len())));
        }
        let mut index = HashMap::new();
        for (j, f) in features.iter().enumerate() {
            if index.insert(f.clone(), j).is_some() {
                return Err(Error::Config(format!("duplicate feature id '{f}'")));
            }
        }
        Ok(CountMatrix { features, columns, n_cells, index })
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index.get(id).map(|&j| &self.columns[j][..])
    }

    /// Per-cell totals over all features.
    pub fn library_sizes(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.n_cells];
        for c in &self.columns {
            for (a, b) in s.iter_mut().zip(c) {
                *a += b;
            }
        }
        s
    }

    pub fn select_cells(&self, keep: &[usize]) -> CountMatrix {
        let columns = self.columns.iter().map(|c| keep.iter().map(|&i| c[i]).collect()).collect();
        CountMatrix { features: self.features.clone(), columns, n_cells: keep.len(), index: self.index.clone() }
    }
}

fn default_names(k: usize) -> Vec<String> {
    (1..=k).map(|j| format!("feature_{j}")).collect()
}

/// First whitespace- or tab-separated field of each non-empty line.
pub fn read_names(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split('\t').next().unwrap_or("").trim().to_string())
        .collect())
}

/// Matrix Market coordinate file with cells as rows and features as columns.
pub fn read_matrix_market(path: &Path, names: Option<Vec<String>>) -> Result<CountMatrix> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("").to_ascii_lowercase();
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() < 5 || h[0] != "%%matrixmarket" || h[1] != "matrix" || h[2] != "coordinate" {
        return parse_err(path, "expected a '%%MatrixMarket matrix coordinate' header");
    }
    let pattern = h[3] == "pattern";
    if !matches!(h[3], "integer" | "real" | "pattern") || h[4] != "general" {
        return parse_err(path, format!("unsupported field/symmetry '{} {}'", h[3], h[4]));
    }
    let mut body = lines.filter(|l| !l.starts_with('%') && !l.trim().is_empty());
    let dims: Vec<usize> = match body.next() {
        Some(l) => l.split_whitespace().map(|t| t.parse()).collect::<std::result::Result<_, _>>().or_else(|_| parse_err(path, "bad size line"))?,
        None => return parse_err(path, "missing size line"),
    };
    if dims.len() != 3 {
        return parse_err(path, "size line needs rows, columns and entries");
    }
    let (n, k, nnz) = (dims[0], dims[1], dims[2]);
    let mut columns = vec![vec![0.0; n]; k];
    let mut seen = 0;
    for (ln, l) in body.enumerate() {
        let t: Vec<&str> = l.split_whitespace().collect();
        let want = if pattern { 2 } else { 3 };
        if t.len() != want {
            return parse_err(path, format!("entry {} has {} fields", ln + 1, t.len()));
        }
        let (i, j): (usize, usize) = match (t[0].parse(), t[1].parse()) {
            (Ok(i), Ok(j)) if i >= 1 && i <= n && j >= 1 && j <= k => (i, j),
            _ => return parse_err(path, format!("entry {} has an invalid index", ln + 1)),
        };
        let v: f64 = if pattern {
            1.0
        } else {
            t[2].parse().or_else(|_| parse_err(path, format!("entry {} has an invalid value", ln + 1)))?
        };
        columns[j - 1][i - 1] += v;
        seen += 1;
    }
    if seen != nnz {
        return parse_err(path, format!("header announces {nnz} entries, found {seen}"));
    }
    let features = match names {
        Some(v) if v.len() != k => return parse_err(path, format!("{} feature names for {k} columns", v.len())),
        Some(v) => v,
        None => default_names(k),
    };
    CountMatrix::new(features, columns, n)
}

fn is_id_column(name: &str) -> bool {
    matches!(name.to_ascii_lowercase().as_str(), "cell" | "cell_id" | "barcode")
}

/// Headered dense CSV: one row per cell, one column per feature.
pub fn read_dense_csv(path: &Path) -> Result<CountMatrix> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let skip = header.first().map_or(false, |h| is_id_column(h)) as usize;
    let features: Vec<String> = header[skip..].to_vec();
    let mut columns = vec![Vec::new(); features.len()];
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (j, col) in columns.iter_mut().enumerate() {
            let v: f64 = rec
                .get(j + skip)
                .and_then(|s| s.trim().parse().ok())
                .map_or_else(|| parse_err(path, format!("row {} column '{}' is not numeric", r + 1, features[j])), Ok)?;
            col.push(v);
        }
    }
    let n = columns.first().map_or(0, |c| c.len());
    CountMatrix::new(features, columns, n)
}

/// Dispatch on extension: `.mtx` is Matrix Market, anything else dense CSV.
pub fn read_counts(path: &Path, names: Option<&Path>) -> Result<CountMatrix> {
    if path.extension().map_or(false, |e| e == "mtx") {
        let names = names.map(read_names).transpose()?;
        read_matrix_market(path, names)
    } else {
        let m = read_dense_csv(path)?;
        match names.map(read_names).transpose()? {
            Some(v) if v.len() != m.n_features() => parse_err(path, "feature names do not match the columns"),
            Some(v) => CountMatrix::new(v, m.columns, m.n_cells),
            None => Ok(m),
        }
    }
}

/// Per-cell covariates. Columns `offset_m` and `offset_g` hold offsets; an
/// optional leading id column is ignored; everything else enters the design.
#[derive(Clone, Debug)]
pub struct Covariates {
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub offset_m: Option<Vec<f64>>,
    pub offset_g: Option<Vec<f64>>,
    pub n_cells: usize,
}

impl Covariates {
    pub fn design(&self) -> Result<DesignMatrix> {
        let cols: Vec<(String, Vec<f64>)> = self.names.iter().cloned().zip(self.values.iter().cloned()).collect();
        DesignMatrix::with_intercept(self.n_cells, &cols)
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|j| &self.values[j][..])
    }

    pub fn select_cells(&self, keep: &[usize]) -> Covariates {
        let pick = |c: &Vec<f64>| keep.iter().map(|&i| c[i]).collect::<Vec<f64>>();
        Covariates {
            names: self.names.clone(),
            values: self.values.iter().map(pick).collect(),
            offset_m: self.offset_m.as_ref().map(pick),
            offset_g: self.offset_g.as_ref().map(pick),
            n_cells: keep.len(),
        }
    }
}

pub fn read_covariates(path: &Path) -> Result<Covariates> {
    let m = read_dense_csv(path)?;
    let mut cov = Covariates { names: Vec::new(), values: Vec::new(), offset_m: None, offset_g: None, n_cells: m.n_cells };
    for (name, col) in m.features.into_iter().zip(m.columns) {
        match name.as_str() {
            "offset_m" => cov.offset_m = Some(col),
            "offset_g" => cov.offset_g = Some(col),
            _ => {
                cov.names.push(name);
                cov.values.push(col);
            }
        }
    }
    Ok(cov)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairLabel {
    Cis,
    PositiveControl,
    NegativeControl,
}

impl PairLabel {
    pub fn parse(s: &str) -> Option<PairLabel> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "cis" => Some(PairLabel::Cis),
            "positive_control" | "positive" => Some(PairLabel::PositiveControl),
            "negative_control" | "negative" => Some(PairLabel::NegativeControl),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PairLabel::Cis => "cis",
            PairLabel::PositiveControl => "positive_control",
            PairLabel::NegativeControl => "negative_control",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSpec {
    pub gene_id: String,
    pub grna_id: String,
    pub label: Option<PairLabel>,
}

/// Headered CSV with gene and gRNA id columns and an optional label.
pub fn read_pairs(path: &Path) -> Result<Vec<PairSpec>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let mut out = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() < 2 {
            return parse_err(path, format!("row {} needs a gene and a gRNA id", r + 1));
        }
        let label = match rec.get(2).map(str::trim).filter(|s| !s.is_empty()) {
            None => None,
            Some(s) => Some(PairLabel::parse(s).map_or_else(|| parse_err(path, format!("row {}: unknown label '{s}'", r + 1)), Ok)?),
        };
        out.push(PairSpec { gene_id: rec[0].trim().to_string(), grna_id: rec[1].trim().to_string(), label });
    }
    Ok(out)
}

pub fn write_pairs(path: &Path, pairs: &[PairSpec]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["gene_id", "grna_id", "label"])?;
    for p in pairs {
        w.write_record([p.gene_id.as_str(), p.grna_id.as_str(), p.label.map_or("", |l| l.as_str())])?;
    }
    w.flush()?;
    Ok(())
}

/// Ordered `key = value` entries; `#` starts a comment.
pub fn parse_key_values(text: &str, file: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse { file: file.into(), msg: format!("line {}: expected key = value", ln + 1) });
        };
        let k = k.trim().to_string();
        if out.iter().any(|(e, _)| *e == k) {
            return Err(Error::Parse { file: file.into(), msg: format!("line {}: duplicate key '{k}'", ln + 1) });
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

/// Write cells-by-features counts as a Matrix Market coordinate file.
pub fn write_matrix_market(path: &Path, m: &CountMatrix) -> Result<()> {
    use std::io::Write;
    let mut entries = Vec::new();
    for (j, c) in m.columns.iter().enumerate() {
        for (i, &v) in c.iter().enumerate() {
            if v != 0.0 {
                entries.push((i + 1, j + 1, v));
            }
        }
    }
    entries.sort_by_key(|e| (e.1, e.0));
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "%%MatrixMarket matrix coordinate integer general")?;
    writeln!(f, "{} {} {}", m.n_cells, m.n_features(), entries.len())?;
    for (i, j, v) in entries {
        writeln!(f, "{i} {j} {v}")?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_names(path: &Path, names: &[String]) -> Result<()> {
    fs::write(path, names.join("\n") + "\n")?;
    Ok(())
}

pub fn write_covariates(path: &Path, cov: &Covariates) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = cov.names.iter().map(String::as_str).collect();
    if cov.offset_m.is_some() {
        header.push("offset_m");
    }
    if cov.offset_g.is_some() {
        header.push("offset_g");
    }
    w.write_record(&header)?;
    for i in 0..cov.n_cells {
        let mut row: Vec<String> = cov.values.iter().map(|c| c[i].to_string()).collect();
        if let Some(o) = &cov.offset_m {
            row.push(o[i].to_string());
        }
        if let Some(o) = &cov.offset_g {
            row.push(o[i].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Write a headered table to `path`, or to stdout when `path` is `None`.
pub fn write_table(path: Option<&Path>, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let sink: Box<dyn std::io::Write> = match path {
        Some(p) => Box::new(fs::File::create(p)?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_market_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = CountMatrix::new(
            vec!["a".into(), "b".into()],
            vec![vec![0.0, 3.0, 1.0], vec![2.0, 0.0, 0.0]],
            3,
        )
        .unwrap();
        let p = dir.path().join("x.mtx");
        write_matrix_market(&p, &m).unwrap();
        let names = dir.path().join("x.names");
        write_names(&names, &m.features).unwrap();
        assert_eq!(read_counts(&p, Some(&names)).unwrap(), m);
        assert_eq!(m.library_sizes(), vec![2.0, 3.0, 1.0]);
    }

    #[test]
    fn matrix_market_rejects_bad_counts() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.mtx");
        fs::write(&p, "%%MatrixMarket matrix coordinate integer general\n2 2 2\n1 1 4\n").unwrap();
        assert!(matches!(read_counts(&p, None), Err(Error::Parse { .. })));
        fs::write(&p, "%%MatrixMarket matrix coordinate integer general\n2 2 1\n3 1 4\n").unwrap();
        assert!(read_counts(&p, None).is_err());
    }

    #[test]
    fn covariates_split_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        fs::write(&p, "cell,batch,offset_m\nc1,0,1.5\nc2,1,2.5\n").unwrap();
        let c = read_covariates(&p).unwrap();
        assert_eq!(c.names, vec!["batch"]);
        assert_eq!(c.offset_m, Some(vec![1.5, 2.5]));
        assert!(c.offset_g.is_none());
        assert_eq!(c.design().unwrap().ncols(), 2);
    }

    #[test]
    fn pairs_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        fs::write(&p, "gene_id,grna_id,label\ng1,r1,cis\ng2,r1,\ng3,r2,negative-control\n").unwrap();
        let v = read_pairs(&p).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v[1].label, None);
        assert_eq!(v[2].label, Some(PairLabel::NegativeControl));
        fs::write(&p, "gene_id,grna_id,label\ng1,r1,bogus\n").unwrap();
        assert!(read_pairs(&p).is_err());
    }

    #[test]
    fn key_values() {
        let kv = parse_key_values("# c\nmode = vanilla\n\ntol=1e-6 # inline\n", "f").unwrap();
        assert_eq!(kv, vec![("mode".into(), "vanilla".into()), ("tol".into(), "1e-6".into())]);
        assert!(parse_key_values("a=1\na=2\n", "f").is_err());
        assert!(parse_key_values("novalue\n", "f").is_err());
    }
}
