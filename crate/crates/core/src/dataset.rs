//! Extracted emission records: persistence, loading, splitting and
//! descriptive statistics.
//!
//! Two on-disk formats are supported. CSV is the interchange format, with the
//! header [`CSV_HEADER`] on the first line and optional `#` comment lines after
//! the data. The binary format is a fixed-width little-endian layout:
//!
//! ```text
//! magic    4 bytes  "NMRE"
//! version  u8       1
//! extraction_version u32
//! descriptor_len u32, descriptor utf-8 bytes
//! count    u64
//! records  count × 52 bytes:
//!          v f64, a f64, grade f64, temp f64, humidity f64,
//!          vehicle_type u8, fuel u8, age u16, co2_g f64
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factors::{FactorGrid, FactorVector, Fuel, VehicleType};

pub const CSV_HEADER: &str =
    "speed_mps,accel_mps2,grade_pct,temp_f,humidity_pct,vehicle_type,fuel,age_year,co2_g";
pub const BINARY_MAGIC: &[u8; 4] = b"NMRE";
pub const BINARY_VERSION: u8 = 1;
const RECORD_BYTES: usize = 52;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("duplicate record key {key} (second occurrence in {path})")]
    Conflict { key: String, path: String },
    #[error("{0} expected grid cells are missing")]
    Gaps(u64),
    #[error("{0}")]
    Format(String),
    #[error("empty dataset")]
    Empty,
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    BadFractions((f64, f64)),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One extracted data point: the grams emitted while applying `a` at `v` for one step under `x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmissionRecord {
    pub v: f64,
    pub a: f64,
    pub x: FactorVector,
    pub e: f64,
}

/// Bitwise identity of a record's inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RecordKey {
    v: u64,
    a: u64,
    grade: u64,
    temp: u64,
    humidity: u64,
    vtype: u8,
    fuel: u8,
    age: i32,
}

impl RecordKey {
    pub fn of(v: f64, a: f64, x: &FactorVector) -> Self {
        // +0.0 and -0.0 are the same cell
        let bits = |f: f64| (f + 0.0).to_bits();
        Self {
            v: bits(v),
            a: bits(a),
            grade: bits(x.grade),
            temp: bits(x.temp),
            humidity: bits(x.humidity),
            vtype: x.vtype.code(),
            fuel: x.fuel.code(),
            age: x.age,
        }
    }
}

impl EmissionRecord {
    pub fn key(&self) -> RecordKey {
        RecordKey::of(self.v, self.a, &self.x)
    }

    fn describe(&self) -> String {
        format!(
            "(v={}, a={}, grade={}, temp={}, humidity={}, {}, {}, {})",
            self.v, self.a, self.x.grade, self.x.temp, self.x.humidity, self.x.vtype, self.x.fuel, self.x.age
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub descriptor: String,
    pub extraction_version: u32,
}

/// A set of records with unique keys.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetPartition {
    records: Vec<EmissionRecord>,
    pub provenance: Provenance,
}

impl DatasetPartition {
    pub fn new(records: Vec<EmissionRecord>, provenance: Provenance) -> Result<Self, DatasetError> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.key()) {
                return Err(DatasetError::Conflict {
                    key: r.describe(),
                    path: provenance.descriptor.clone(),
                });
            }
        }
        Ok(Self { records, provenance })
    }

    /// Skips the duplicate check; callers guarantee uniqueness.
    pub(crate) fn from_unique(records: Vec<EmissionRecord>, provenance: Provenance) -> Self {
        Self { records, provenance }
    }

    pub fn records(&self) -> &[EmissionRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<EmissionRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records matching `pred`, keeping provenance.
    pub fn filter(&self, pred: impl Fn(&EmissionRecord) -> bool) -> Self {
        Self {
            records: self.records.iter().copied().filter(|r| pred(r)).collect(),
            provenance: self.provenance.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Binary,
}

impl Format {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("nmre") | Some("bin") => Format::Binary,
            _ => Format::Csv,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Binary => "nmre",
        }
    }
}

fn encode_csv(p: &DatasetPartition, comments: &[String]) -> String {
    let mut out = String::with_capacity(64 * (p.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in &p.records {
        // `{}` on f64 prints the shortest string that parses back to the same bits.
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.v, r.a, r.x.grade, r.x.temp, r.x.humidity, r.x.vtype, r.x.fuel, r.x.age, r.e
        );
    }
    let _ = writeln!(out, "# provenance: {}", p.provenance.descriptor);
    let _ = writeln!(out, "# extraction_version: {}", p.provenance.extraction_version);
    for c in comments {
        let _ = writeln!(out, "# {c}");
    }
    out
}

fn encode_binary(p: &DatasetPartition) -> Vec<u8> {
    let desc = p.provenance.descriptor.as_bytes();
    let mut out = Vec::with_capacity(25 + desc.len() + RECORD_BYTES * p.len());
    out.extend_from_slice(BINARY_MAGIC);
    out.push(BINARY_VERSION);
    out.extend_from_slice(&p.provenance.extraction_version.to_le_bytes());
    out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    out.extend_from_slice(desc);
    out.extend_from_slice(&(p.len() as u64).to_le_bytes());
    for r in &p.records {
        for f in [r.v, r.a, r.x.grade, r.x.temp, r.x.humidity] {
            out.extend_from_slice(&f.to_le_bytes());
        }
        out.push(r.x.vtype.code());
        out.push(r.x.fuel.code());
        out.extend_from_slice(&(r.x.age as u16).to_le_bytes());
        out.extend_from_slice(&r.e.to_le_bytes());
    }
    out
}

/// Writes atomically through a sibling temp file; nothing is left behind on failure.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<u64, DatasetError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let tmp = path.with_extension(format!(
        "{}.partial",
        path.extension().and_then(|e| e.to_str()).unwrap_or("tmp")
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(source) = result {
        let _ = fs::remove_file(&tmp);
        return Err(DatasetError::Io {
            path: path.display().to_string(),
            source,
        });
    }
    Ok(bytes.len() as u64)
}

/// Writes `p` in the format implied by the extension of `path`. Returns bytes written.
pub fn write_partition(p: &DatasetPartition, path: &Path) -> Result<u64, DatasetError> {
    write_partition_with(p, path, Format::from_path(path), &[])
}

/// Like [`write_partition`] with an explicit format; `comments` are appended to
/// CSV output as `#` lines and ignored for binary output.
pub fn write_partition_with(
    p: &DatasetPartition,
    path: &Path,
    format: Format,
    comments: &[String],
) -> Result<u64, DatasetError> {
    match format {
        Format::Csv => write_atomic(path, encode_csv(p, comments).as_bytes()),
        Format::Binary => write_atomic(path, &encode_binary(p)),
    }
}

fn parse_csv(text: &str, path: &str) -> Result<DatasetPartition, DatasetError> {
    let perr = |line: usize, message: String| DatasetError::Parse {
        path: path.to_string(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == CSV_HEADER => {}
        Some((_, h)) => return Err(perr(1, format!("unexpected header `{h}`"))),
        None => return Err(perr(1, "missing header".into())),
    }
    let mut records = Vec::new();
    let mut provenance = Provenance::default();
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            let comment = comment.trim();
            if let Some(d) = comment.strip_prefix("provenance:") {
                provenance.descriptor = d.trim().to_string();
            } else if let Some(v) = comment.strip_prefix("extraction_version:") {
                provenance.extraction_version = v.trim().parse().unwrap_or(0);
            }
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(perr(lineno, format!("expected 9 fields, found {}", f.len())));
        }
        let num = |k: usize| {
            f[k].trim()
                .parse::<f64>()
                .map_err(|e| perr(lineno, format!("field {}: {e}", k + 1)))
        };
        let vtype: VehicleType = f[5].trim().parse().map_err(|e| perr(lineno, format!("{e}")))?;
        let fuel: Fuel = f[6].trim().parse().map_err(|e| perr(lineno, format!("{e}")))?;
        let age: i32 = f[7]
            .trim()
            .parse()
            .map_err(|e| perr(lineno, format!("field 8: {e}")))?;
        records.push(EmissionRecord {
            v: num(0)?,
            a: num(1)?,
            x: FactorVector {
                grade: num(2)?,
                temp: num(3)?,
                humidity: num(4)?,
                vtype,
                fuel,
                age,
            },
            e: num(8)?,
        });
    }
    Ok(DatasetPartition::from_unique(records, provenance))
}

fn parse_binary(bytes: &[u8], path: &str) -> Result<DatasetPartition, DatasetError> {
    let bad = |m: &str| DatasetError::Format(format!("{path}: {m}"));
    let mut cur = bytes;
    let mut take = |n: usize| -> Result<&[u8], DatasetError> {
        if cur.len() < n {
            return Err(bad("truncated file"));
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };
    if take(4)? != BINARY_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = take(1)?[0];
    if version != BINARY_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    let extraction_version = u32_at(take(4)?);
    let desc_len = u32_at(take(4)?) as usize;
    let descriptor = String::from_utf8(take(desc_len)?.to_vec()).map_err(|_| bad("descriptor is not utf-8"))?;
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let f64_at = |b: &[u8], o: usize| f64::from_le_bytes(b[o..o + 8].try_into().unwrap());
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let r = take(RECORD_BYTES)?;
        let vtype = VehicleType::from_code(r[40]).ok_or_else(|| bad(&format!("record {i}: bad vehicle type")))?;
        let fuel = Fuel::from_code(r[41]).ok_or_else(|| bad(&format!("record {i}: bad fuel")))?;
        let age = u16::from_le_bytes([r[42], r[43]]) as i32;
        records.push(EmissionRecord {
            v: f64_at(r, 0),
            a: f64_at(r, 8),
            x: FactorVector {
                grade: f64_at(r, 16),
                temp: f64_at(r, 24),
                humidity: f64_at(r, 32),
                vtype,
                fuel,
                age,
            },
            e: f64_at(r, 44),
        });
    }
    if !cur.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok(DatasetPartition::from_unique(
        records,
        Provenance {
            descriptor,
            extraction_version,
        },
    ))
}

/// Reads one partition file, detecting the format from its first bytes.
pub fn read_partition(path: &Path) -> Result<DatasetPartition, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let name = path.display().to_string();
    let p = if bytes.starts_with(BINARY_MAGIC) {
        parse_binary(&bytes, &name)?
    } else {
        let text = std::str::from_utf8(&bytes).map_err(|_| DatasetError::Format(format!("{name}: not utf-8")))?;
        parse_csv(text, &name)?
    };
    DatasetPartition::new(p.records, p.provenance).map_err(|e| match e {
        DatasetError::Conflict { key, .. } => DatasetError::Conflict { key, path: name },
        other => other,
    })
}

/// Grid cells a load is expected to cover.
#[derive(Debug, Clone)]
pub struct ExpectedCells {
    pub grid: FactorGrid,
    pub scenarios: std::ops::Range<usize>,
}

impl ExpectedCells {
    fn total(&self) -> u64 {
        self.grid.dynamics_count() as u64 * self.scenarios.len() as u64
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub tolerate_gaps: bool,
    pub expected: Option<ExpectedCells>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub files: usize,
    pub records: usize,
    /// Expected grid cells with no record; zero when no expectation was declared.
    pub gaps: u64,
}

/// Merges partition files. Directories are expanded to the partition files they contain.
pub fn load(paths: &[PathBuf], opts: &LoadOptions) -> Result<(DatasetPartition, LoadReport), DatasetError> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            files.extend(partition_files(p)?);
        } else {
            files.push(p.clone());
        }
    }
    let mut records = Vec::new();
    let mut seen: HashMap<RecordKey, usize> = HashMap::new();
    let mut descriptors = Vec::new();
    let mut version = 0;
    for (fi, path) in files.iter().enumerate() {
        let part = read_partition(path)?;
        for r in part.records() {
            if seen.insert(r.key(), fi).is_some() {
                return Err(DatasetError::Conflict {
                    key: r.describe(),
                    path: path.display().to_string(),
                });
            }
        }
        version = version.max(part.provenance.extraction_version);
        descriptors.push(part.provenance.descriptor.clone());
        records.extend(part.into_records());
    }

    let mut gaps = 0;
    if let Some(exp) = &opts.expected {
        let mut present = 0u64;
        for s in exp.scenarios.clone() {
            let Some(x) = exp.grid.scenario(s) else { continue };
            present += exp
                .grid
                .dynamics()
                .filter(|d| seen.contains_key(&RecordKey::of(d.v, d.a, &x)))
                .count() as u64;
        }
        gaps = exp.total() - present;
        if gaps > 0 && !opts.tolerate_gaps {
            return Err(DatasetError::Gaps(gaps));
        }
    }

    let report = LoadReport {
        files: files.len(),
        records: records.len(),
        gaps,
    };
    let provenance = Provenance {
        descriptor: descriptors.join("; "),
        extraction_version: version,
    };
    Ok((DatasetPartition::from_unique(records, provenance), report))
}

/// Partition files (`.csv`, `.nmre`) directly inside `dir`, sorted by name.
pub fn partition_files(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("csv") | Some("nmre")))
        .collect();
    out.sort();
    Ok(out)
}

/// Destination for per-scenario partitions written by the extraction.
pub trait PartitionSink: Sync {
    fn contains(&self, scenario: usize) -> Result<bool, DatasetError>;
    fn put(&self, scenario: usize, partition: &DatasetPartition) -> Result<u64, DatasetError>;
}

/// One file per scenario under a directory.
#[derive(Debug, Clone)]
pub struct DirectorySink {
    pub dir: PathBuf,
    pub format: Format,
    pub comments: Vec<String>,
}

impl DirectorySink {
    pub fn new(dir: impl Into<PathBuf>, format: Format) -> Self {
        Self {
            dir: dir.into(),
            format,
            comments: Vec::new(),
        }
    }

    pub fn path_for(&self, scenario: usize) -> PathBuf {
        self.dir
            .join(format!("scenario_{scenario:05}.{}", self.format.extension()))
    }
}

impl PartitionSink for DirectorySink {
    fn contains(&self, scenario: usize) -> Result<bool, DatasetError> {
        Ok(self.path_for(scenario).is_file())
    }

    fn put(&self, scenario: usize, partition: &DatasetPartition) -> Result<u64, DatasetError> {
        write_partition_with(partition, &self.path_for(scenario), self.format, &self.comments)
    }
}

/// In-memory sink, mostly for tests and desk-scale pipelines.
#[derive(Debug, Default)]
pub struct MemorySink {
    parts: Mutex<BTreeMap<usize, DatasetPartition>>,
}

impl MemorySink {
    pub fn get(&self, scenario: usize) -> Option<DatasetPartition> {
        self.parts.lock().unwrap().get(&scenario).cloned()
    }

    /// Concatenation of all partitions in scenario order.
    pub fn merged(&self) -> DatasetPartition {
        let parts = self.parts.lock().unwrap();
        let records = parts.values().flat_map(|p| p.records().iter().copied()).collect();
        DatasetPartition::from_unique(
            records,
            Provenance {
                descriptor: format!("{} scenarios", parts.len()),
                extraction_version: parts.values().map(|p| p.provenance.extraction_version).max().unwrap_or(0),
            },
        )
    }
}

impl PartitionSink for MemorySink {
    fn contains(&self, scenario: usize) -> Result<bool, DatasetError> {
        Ok(self.parts.lock().unwrap().contains_key(&scenario))
    }

    fn put(&self, scenario: usize, partition: &DatasetPartition) -> Result<u64, DatasetError> {
        self.parts.lock().unwrap().insert(scenario, partition.clone());
        Ok(partition.len() as u64)
    }
}

/// Mean emission per value of one factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub value: String,
    pub mean: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub records: usize,
    pub curves: BTreeMap<String, Vec<CurvePoint>>,
    /// Largest over smallest cell mean, per factor.
    pub ratios: BTreeMap<String, f64>,
}

/// Order-independent mean: values are summed in sorted order.
fn stable_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

type Cell = (f64, String, Vec<f64>);

pub fn summarize(p: &DatasetPartition) -> Result<SummaryStats, DatasetError> {
    if p.is_empty() {
        return Err(DatasetError::Empty);
    }
    let factors: [(&str, fn(&EmissionRecord) -> (f64, String)); 7] = [
        ("grade", |r| (r.x.grade, format!("{}", r.x.grade))),
        ("temperature", |r| (r.x.temp, format!("{}", r.x.temp))),
        ("humidity", |r| (r.x.humidity, format!("{}", r.x.humidity))),
        ("temperature_humidity", |r| {
            (r.x.temp * 1000.0 + r.x.humidity, format!("{}-{}", r.x.temp, r.x.humidity))
        }),
        ("age", |r| (r.x.age as f64, r.x.age.to_string())),
        ("vehicle_type", |r| (r.x.vtype.code() as f64, r.x.vtype.to_string())),
        ("fuel", |r| (r.x.fuel.code() as f64, r.x.fuel.to_string())),
    ];
    let mut curves = BTreeMap::new();
    let mut ratios = BTreeMap::new();
    for (name, key) in factors {
        let mut cells: HashMap<u64, Cell> = HashMap::new();
        for r in p.records() {
            let (order, label) = key(r);
            cells
                .entry(order.to_bits())
                .or_insert_with(|| (order, label, Vec::new()))
                .2
                .push(r.e);
        }
        let mut points: Vec<(f64, CurvePoint)> = cells
            .into_values()
            .map(|(order, value, mut es)| {
                let count = es.len();
                (
                    order,
                    CurvePoint {
                        value,
                        mean: stable_mean(&mut es),
                        count,
                    },
                )
            })
            .collect();
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let points: Vec<CurvePoint> = points.into_iter().map(|(_, c)| c).collect();
        let max = points.iter().map(|c| c.mean).fold(f64::NEG_INFINITY, f64::max);
        let min = points.iter().map(|c| c.mean).fold(f64::INFINITY, f64::min);
        ratios.insert(name.to_string(), max / min);
        curves.insert(name.to_string(), points);
    }
    Ok(SummaryStats {
        records: p.len(),
        curves,
        ratios,
    })
}

/// Deterministic shuffled split into `(train, test)`.
pub fn split(
    p: &DatasetPartition,
    fractions: (f64, f64),
    seed: u64,
) -> Result<(DatasetPartition, DatasetPartition), DatasetError> {
    let (ft, fv) = fractions;
    if !(ft >= 0.0 && fv >= 0.0 && ((ft + fv) - 1.0).abs() <= 1e-9) {
        return Err(DatasetError::BadFractions(fractions));
    }
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((p.len() as f64) * ft).round() as usize;
    let n_train = n_train.min(p.len());
    let pick = |ids: &[usize]| {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        DatasetPartition::from_unique(
            ids.into_iter().map(|i| p.records[i]).collect(),
            p.provenance.clone(),
        )
    };
    Ok((pick(&idx[..n_train]), pick(&idx[n_train..])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::extract_scenario;
    use crate::oracle::OpModeTable;

    fn sample(n: usize) -> DatasetPartition {
        let x = FactorVector::new(5.0, 60.0, 68.0, VehicleType::PassengerTruck, Fuel::Diesel, 2012).unwrap();
        let records = (0..n)
            .map(|i| EmissionRecord {
                v: i as f64 * 0.5,
                a: 0.1 * (i % 7) as f64,
                x,
                e: 1.0 / 3.0 + i as f64,
            })
            .collect();
        DatasetPartition::new(records, Provenance::default()).unwrap()
    }

    #[test]
    fn csv_and_binary_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (p, _) = extract_scenario(&FactorGrid::default(), 7, &OpModeTable::default(), 5, None).unwrap();
        for name in ["s.csv", "s.nmre"] {
            let path = dir.path().join(name);
            let bytes = write_partition(&p, &path).unwrap();
            assert_eq!(bytes, fs::metadata(&path).unwrap().len());
            let back = read_partition(&path).unwrap();
            assert_eq!(back.len(), 4791);
            assert_eq!(back, p);
        }
        let text = fs::read_to_string(dir.path().join("s.csv")).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
    }

    #[test]
    fn empty_partition_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        write_partition(&DatasetPartition::default(), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 1);
        assert_eq!(read_partition(&path).unwrap().len(), 0);
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(
            &path,
            format!("{CSV_HEADER}\n1,0,0,60,50,passenger_car,gasoline,2019,1.5\n1,0,0,60,xx,passenger_car,gasoline,2019,1.5\n"),
        )
        .unwrap();
        match read_partition(&path) {
            Err(DatasetError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn load_merges_and_detects_conflicts() {
        let dir = tempfile::tempdir().unwrap();
        let grid = FactorGrid::default();
        let t = OpModeTable::default();
        let (a, _) = extract_scenario(&grid, 0, &t, 5, None).unwrap();
        let (b, _) = extract_scenario(&grid, 1, &t, 5, None).unwrap();
        write_partition(&a, &dir.path().join("a.csv")).unwrap();
        write_partition(&b, &dir.path().join("b.nmre")).unwrap();
        let (merged, report) = load(&[dir.path().to_path_buf()], &LoadOptions::default()).unwrap();
        assert_eq!(merged.len(), 2 * 4791);
        assert_eq!(report.files, 2);
        write_partition(&a, &dir.path().join("c.csv")).unwrap();
        assert!(matches!(
            load(&[dir.path().to_path_buf()], &LoadOptions::default()),
            Err(DatasetError::Conflict { .. })
        ));
    }

    #[test]
    fn gaps_tolerated_or_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let grid = FactorGrid::default();
        let (p, _) = extract_scenario(&grid, 2, &OpModeTable::default(), 5, None).unwrap();
        let mut recs = p.records().to_vec();
        recs.drain(100..110);
        let cut = DatasetPartition::new(recs.clone(), p.provenance.clone()).unwrap();
        let path = dir.path().join("cut.csv");
        write_partition(&cut, &path).unwrap();
        let expected = ExpectedCells {
            grid: grid.clone(),
            scenarios: 2..3,
        };
        let strict = LoadOptions {
            tolerate_gaps: false,
            expected: Some(expected.clone()),
        };
        assert!(matches!(load(&[path.clone()], &strict), Err(DatasetError::Gaps(10))));
        let lenient = LoadOptions {
            tolerate_gaps: true,
            expected: Some(expected),
        };
        let (loaded, report) = load(&[path], &lenient).unwrap();
        assert_eq!(report.gaps, 10);
        assert_eq!(loaded.records(), &recs[..]);
    }

    #[test]
    fn duplicate_keys_rejected() {
        let p = sample(3);
        let mut recs = p.records().to_vec();
        recs.push(recs[0]);
        assert!(DatasetPartition::new(recs, Provenance::default()).is_err());
    }

    #[test]
    fn summarize_single_record() {
        let s = summarize(&sample(1)).unwrap();
        for (name, c) in &s.curves {
            assert_eq!(c.len(), 1, "{name}");
        }
        assert!(s.ratios.values().all(|&r| r == 1.0));
        assert!(matches!(summarize(&DatasetPartition::default()), Err(DatasetError::Empty)));
    }

    #[test]
    fn summarize_grade_and_age_ratios() {
        let grid = FactorGrid::default();
        let t = OpModeTable::default();
        let mut records = Vec::new();
        // one class, mild weather, every grade at two model years
        let per_class = 11 * 11 * 21;
        let per_age = 11 * 21;
        let idxs = [0usize, 10].into_iter().flat_map(|age| {
            (0..11usize).map(move |g| per_class + age * per_age + g * 21 + 15)
        });
        for idx in idxs {
            records.extend(extract_scenario(&grid, idx, &t, 5, None).unwrap().0.into_records());
        }
        let p = DatasetPartition::new(records, Provenance::default()).unwrap();
        let s = summarize(&p).unwrap();
        assert_eq!(s.curves["grade"].len(), 11);
        let g = s.ratios["grade"];
        assert!((2.0..=5.0).contains(&g), "grade ratio {g}");
        let a = s.ratios["age"];
        assert!((1.0..=1.3).contains(&a), "age ratio {a}");
    }

    #[test]
    fn split_properties() {
        let p = sample(10_000);
        let (tr, te) = split(&p, (0.8, 0.2), 3).unwrap();
        assert_eq!((tr.len(), te.len()), (8000, 2000));
        let (tr2, te2) = split(&p, (0.8, 0.2), 3).unwrap();
        assert_eq!(tr, tr2);
        assert_eq!(te, te2);
        let keys: HashSet<_> = tr.records().iter().map(|r| r.key()).collect();
        assert!(te.records().iter().all(|r| !keys.contains(&r.key())));
        let (all, none) = split(&p, (1.0, 0.0), 1).unwrap();
        assert_eq!(all.len(), 10_000);
        assert!(none.is_empty());
        assert!(split(&p, (0.7, 0.2), 1).is_err());
        assert!(split(&p, (1.2, -0.2), 1).is_err());
    }

    #[test]
    fn directory_sink_is_resumable() {
        let dir = tempfile::tempdir().unwrap();
        let sink = DirectorySink::new(dir.path(), Format::Binary);
        assert!(!sink.contains(4).unwrap());
        sink.put(4, &sample(5)).unwrap();
        assert!(sink.contains(4).unwrap());
        assert_eq!(partition_files(dir.path()).unwrap().len(), 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn formats_roundtrip_bits(es in prop::collection::vec(1e-6..1e3f64, 1..60)) {
                let x = FactorVector::new(-15.0, 28.1996, 80.2873, VehicleType::TransitBus, Fuel::Diesel, 2016).unwrap();
                let recs: Vec<_> = es.iter().enumerate().map(|(i, &e)| EmissionRecord { v: i as f64 * 0.37, a: -0.1, x, e }).collect();
                let p = DatasetPartition::new(recs, Provenance { descriptor: "prop".into(), extraction_version: 1 }).unwrap();
                let dir = tempfile::tempdir().unwrap();
                for name in ["p.csv", "p.nmre"] {
                    let path = dir.path().join(name);
                    write_partition(&p, &path).unwrap();
                    prop_assert_eq!(&read_partition(&path).unwrap(), &p);
                }
            }

            #[test]
            fn summarize_is_permutation_invariant(seed in 0u64..1000) {
                let p = sample(200);
                let mut recs = p.records().to_vec();
                recs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                let q = DatasetPartition::new(recs, Provenance::default()).unwrap();
                prop_assert_eq!(summarize(&p).unwrap(), summarize(&q).unwrap());
            }
        }
    }
}
