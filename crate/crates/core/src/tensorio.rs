//! Named matrix bundles and tabular reports.
//!
//! A bundle is a directory holding a human-readable `manifest.json` and one
//! raw `<name>.bin` file per matrix. Payloads are row-major little-endian and
//! carry no shape information; the manifest is the only source of shapes.

use std::fmt;
use std::fs;
use std::path::{Component, Path};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::Matrix;

pub const MANIFEST_FILE: &str = "manifest.json";

/// On-disk element type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(Error::UnsupportedFormat(format!("dtype {other:?}"))),
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        })
    }
}

/// One named matrix of a bundle.
///
/// Values are always held in `f64`. An `f32` entry holds values that are
/// exactly representable in `f32`, so writing it never loses information.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleEntry {
    name: String,
    dtype: Dtype,
    matrix: Matrix,
}

impl BundleEntry {
    pub fn f64(name: impl Into<String>, matrix: Matrix) -> Result<Self> {
        Self::new(name.into(), Dtype::F64, matrix)
    }

    /// Builds an `f32` entry, rounding every value to single precision.
    pub fn f32(name: impl Into<String>, matrix: Matrix) -> Result<Self> {
        let narrowed = matrix.map(|v| v as f32 as f64);
        Self::new(name.into(), Dtype::F32, narrowed)
    }

    fn new(name: String, dtype: Dtype, matrix: Matrix) -> Result<Self> {
        validate_name(&name)?;
        ensure!(
            matrix.nrows() > 0 && matrix.ncols() > 0,
            "matrix {name:?} has empty shape {}x{}",
            matrix.nrows(),
            matrix.ncols()
        );
        Ok(Self {
            name,
            dtype,
            matrix,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> Matrix {
        self.matrix
    }

    fn file_name(&self) -> String {
        format!("{}.bin", self.name)
    }

    fn encode(&self) -> Vec<u8> {
        let (rows, cols) = self.matrix.shape();
        let mut out = Vec::with_capacity(rows * cols * self.dtype.size());
        for r in 0..rows {
            for c in 0..cols {
                let v = self.matrix[(r, c)];
                match self.dtype {
                    Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
                    Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                }
            }
        }
        out
    }
}

/// Names double as file stems, so they are restricted to a portable alphabet.
fn validate_name(name: &str) -> Result<()> {
    ensure!(!name.is_empty(), "matrix name is empty");
    ensure!(
        !name.starts_with('.'),
        "matrix name {name:?} must not start with '.'"
    );
    ensure!(
        name.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.')),
        "matrix name {name:?} contains characters outside [A-Za-z0-9_.-]"
    );
    Ok(())
}

/// Ordered collection of uniquely named matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatrixBundle {
    entries: Vec<BundleEntry>,
}

impl MatrixBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: BundleEntry) -> Result<()> {
        ensure!(
            self.get(entry.name()).is_none(),
            "duplicate matrix name {:?}",
            entry.name()
        );
        self.entries.push(entry);
        Ok(())
    }

    /// Appends an `f64` matrix.
    pub fn insert(&mut self, name: impl Into<String>, matrix: Matrix) -> Result<()> {
        self.push(BundleEntry::f64(name, matrix)?)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entry(name).map(BundleEntry::matrix)
    }

    pub fn entry(&self, name: &str) -> Option<&BundleEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn entries(&self) -> &[BundleEntry] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    layout: String,
    entries: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    rows: usize,
    cols: usize,
    dtype: String,
    file: String,
}

const LAYOUT: &str = "row-major-le";

/// Writes `bundle` into the directory `path`, creating it if needed.
pub fn write_bundle(path: impl AsRef<Path>, bundle: &MatrixBundle) -> Result<()> {
    let dir = path.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut manifest = Manifest {
        layout: LAYOUT.to_string(),
        entries: Vec::with_capacity(bundle.len()),
    };
    for entry in bundle.entries() {
        let file = entry.file_name();
        let file_path = dir.join(&file);
        fs::write(&file_path, entry.encode()).map_err(|e| Error::io(&file_path, e))?;
        manifest.entries.push(ManifestEntry {
            name: entry.name.clone(),
            rows: entry.matrix.nrows(),
            cols: entry.matrix.ncols(),
            dtype: entry.dtype.to_string(),
            file,
        });
    }

    let manifest_path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))
}

/// Reads a bundle previously written by [`write_bundle`].
///
/// `f32` payloads are widened to `f64`.
pub fn read_bundle(path: impl AsRef<Path>) -> Result<MatrixBundle> {
    let dir = path.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::NotFound(manifest_path));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Corruption(format!("{}: {e}", manifest_path.display())))?;
    if manifest.layout != LAYOUT {
        return Err(Error::UnsupportedFormat(format!(
            "layout {:?}",
            manifest.layout
        )));
    }

    let mut bundle = MatrixBundle::new();
    for item in manifest.entries {
        let dtype = Dtype::parse(&item.dtype)?;
        if item.rows == 0 || item.cols == 0 {
            return Err(Error::Corruption(format!(
                "entry {:?} declares empty shape {}x{}",
                item.name, item.rows, item.cols
            )));
        }
        let file_path = data_path(dir, &item.file)?;
        let bytes = fs::read(&file_path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(file_path.clone()),
            _ => Error::io(&file_path, e),
        })?;
        let expected = item
            .rows
            .checked_mul(item.cols)
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| Error::Corruption(format!("entry {:?} shape overflows", item.name)))?;
        if bytes.len() != expected {
            return Err(Error::Corruption(format!(
                "{}: expected {expected} bytes for {}x{} {dtype}, found {}",
                file_path.display(),
                item.rows,
                item.cols,
                bytes.len()
            )));
        }
        let values: Vec<f64> = match dtype {
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect(),
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
                .collect(),
        };
        let matrix = Matrix::from_row_slice(item.rows, item.cols, &values);
        let entry = BundleEntry::new(item.name, dtype, matrix)
            .map_err(|e| Error::Corruption(e.to_string()))?;
        bundle
            .push(entry)
            .map_err(|e| Error::Corruption(e.to_string()))?;
    }
    Ok(bundle)
}

/// Data files must sit directly inside the bundle directory.
fn data_path(dir: &Path, file: &str) -> Result<std::path::PathBuf> {
    let rel = Path::new(file);
    let mut components = rel.components();
    match (components.next(), components.next()) {
        (Some(Component::Normal(_)), None) => Ok(dir.join(rel)),
        _ => Err(Error::Corruption(format!(
            "data file {file:?} is not a plain file name"
        ))),
    }
}

/// What a [`Report`] describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportKind {
    Spectra,
    Ranks,
    Projections,
    Metrics,
}

/// A single cell of a report record.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Num(f64),
    Text(String),
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Num(x) => Some(*x),
            Value::Text(_) => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(i) => write!(f, "{i}"),
            Value::Num(x) => write!(f, "{x}"),
            Value::Text(s) => f.write_str(s),
        }
    }
}

impl From<f64> for Value {
    /// Non-finite numbers have no JSON encoding and are stored as text.
    fn from(x: f64) -> Self {
        if x.is_finite() {
            Value::Num(x)
        } else {
            Value::Text(x.to_string())
        }
    }
}

impl From<usize> for Value {
    fn from(i: usize) -> Self {
        Value::Int(i as i64)
    }
}

impl From<i64> for Value {
    fn from(i: i64) -> Self {
        Value::Int(i)
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Text(s.to_string())
    }
}

impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::Text(s)
    }
}

/// Ordered key/value map.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Record {
    fields: Vec<(String, Value)>,
}

impl Record {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builder-style insert. Replaces an existing key in place.
    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.set(key, value);
        self
    }

    pub fn set(&mut self, key: &str, value: impl Into<Value>) {
        let value = value.into();
        match self.fields.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.fields.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn fields(&self) -> &[(String, Value)] {
        &self.fields
    }
}

impl Serialize for Record {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = serializer.serialize_map(Some(self.fields.len()))?;
        for (k, v) in &self.fields {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

/// Output encoding of a [`Report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Csv,
    Json,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

/// A list of records with a kind tag, serializable as flat CSV or structured JSON.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub kind: ReportKind,
    pub records: Vec<Record>,
}

impl Report {
    pub fn new(kind: ReportKind) -> Self {
        Self {
            kind,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, record: Record) {
        self.records.push(record);
    }

    /// Union of record keys in order of first appearance.
    pub fn columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = Vec::new();
        for rec in &self.records {
            for (k, _) in rec.fields() {
                if !cols.iter().any(|c| c == k) {
                    cols.push(k.clone());
                }
            }
        }
        cols
    }

    /// Header row first; keys missing from a record become empty cells.
    pub fn to_csv(&self) -> Result<String> {
        let cols = self.columns();
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(&cols)?;
        for rec in &self.records {
            let row: Vec<String> = cols
                .iter()
                .map(|c| rec.get(c).map(ToString::to_string).unwrap_or_default())
                .collect();
            writer.write_record(&row)?;
        }
        let bytes = writer
            .into_inner()
            .map_err(|e| Error::Numeric(format!("csv flush: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        match format {
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Json => self.to_json(),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.render(format)?).map_err(|e| Error::io(path, e))
    }
}
