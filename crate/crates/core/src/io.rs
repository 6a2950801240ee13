//! On-disk formats.
//!
//! Slice sets (`.gpss`, little-endian):
//!
//! ```text
//! magic "GPSS" | u32 version = 1
//! u32 function_id | u32 dimension | u32 instance_id | u32 repetition
//! u32 ambient dimension | u32 k | u32 r
//! k times: f64 scale | f64 range | f64 iqr | r*r f64 values | r*r u8 mask (0/1)
//! ```
//!
//! Checkpoints (`.gpck`, little-endian):
//!
//! ```text
//! magic "GPCK" | u32 version = 1
//! u64 manifest length | manifest JSON (UTF-8)
//! 32-byte RNG seed | u64 RNG stream | u128 RNG word position
//! u32 tensor count, then per tensor:
//!   u32 name length | name (UTF-8) | u32 rank | rank x u64 extents | f64 data
//! ```
//!
//! Performance CSVs are UTF-8 with a header line. Runs format:
//! `function_id,dimension,instance_id,algorithm,evaluations,success`
//! (`success` is `0`/`1`/`true`/`false`). ERT format:
//! `function_id,dimension,algorithm,ert,finite_flag` (`finite_flag = 0`
//! marks an algorithm that never reached the target; `ert` is then ignored).

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{Report, SweepCell};
use crate::labels::{ErtRecord, RunRecord};
use crate::model::{Ablation, Architecture, ModelParams};
use crate::probing::{DatapointId, Slice, SliceSet};

const SLICE_MAGIC: &[u8; 4] = b"GPSS";
const CHECKPOINT_MAGIC: &[u8; 4] = b"GPCK";
const FORMAT_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.at)))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn finish(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.bytes.len() - self.at)));
        }
        Ok(())
    }
}

fn expect_header(r: &mut Reader<'_>, magic: &[u8; 4]) -> Result<()> {
    if r.take(4)? != magic {
        return Err(Error::Format(format!("bad magic, expected {:?}", String::from_utf8_lossy(magic))));
    }
    let v = r.u32()?;
    if v != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {v}")));
    }
    Ok(())
}

pub fn encode_slice_set(set: &SliceSet) -> Result<Vec<u8>> {
    let r = set.resolution();
    if set.slices.iter().any(|s| s.resolution != r || s.values.len() != r * r || s.mask.len() != r * r) {
        return Err(Error::Shape("slices of one set must share a resolution".into()));
    }
    let mut out = Vec::with_capacity(36 + set.len() * (24 + 9 * r * r));
    out.extend_from_slice(SLICE_MAGIC);
    for v in [
        FORMAT_VERSION,
        set.id.function_id,
        set.id.dimension,
        set.id.instance_id,
        set.id.repetition,
        set.dimension as u32,
        set.len() as u32,
        r as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in &set.slices {
        for v in [s.scale, s.range, s.iqr].iter().chain(&s.values) {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        out.extend(s.mask.iter().map(|&m| m as u8));
    }
    Ok(out)
}

pub fn decode_slice_set(bytes: &[u8]) -> Result<SliceSet> {
    let mut r = Reader { bytes, at: 0 };
    expect_header(&mut r, SLICE_MAGIC)?;
    let id = DatapointId {
        function_id: r.u32()?,
        dimension: r.u32()?,
        instance_id: r.u32()?,
        repetition: r.u32()?,
    };
    let dimension = r.u32()? as usize;
    let k = r.u32()? as usize;
    let res = r.u32()? as usize;
    let mut slices = Vec::with_capacity(k.min(1 << 16));
    for _ in 0..k {
        let scale = r.f64()?;
        let range = r.f64()?;
        let iqr = r.f64()?;
        let values = (0..res * res).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let mask = r
            .take(res * res)?
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Format(format!("mask byte {other} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        slices.push(Slice {
            resolution: res,
            values,
            mask,
            scale,
            range,
            iqr,
        });
    }
    r.finish()?;
    Ok(SliceSet { id, dimension, slices })
}

pub fn slice_file_name(id: &DatapointId) -> String {
    format!(
        "f{:02}_d{:02}_i{:02}_r{:02}.gpss",
        id.function_id, id.dimension, id.instance_id, id.repetition
    )
}

pub fn write_slice_set(path: &Path, set: &SliceSet) -> Result<()> {
    write_bytes(path, &encode_slice_set(set)?)
}

pub fn read_slice_set(path: &Path) -> Result<SliceSet> {
    decode_slice_set(&read_bytes(path)?)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Manifest stored with a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub n_algorithms: usize,
    pub resolution: usize,
    pub slices: usize,
    pub ablation: Ablation,
    pub seed: u64,
}

/// Serialisable position of a ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: ModelManifest,
    pub rng: RngState,
    pub params: ModelParams,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    if ck.manifest.n_algorithms != ck.params.architecture.n_algorithms || ck.manifest.ablation != ck.params.architecture.ablation {
        return Err(Error::Input("checkpoint manifest disagrees with the parameters".into()));
    }
    let manifest = serde_json::to_vec(&ck.manifest).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(ck.params.data.len() * 8 + 4096);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&ck.rng.seed);
    out.extend_from_slice(&ck.rng.stream.to_le_bytes());
    out.extend_from_slice(&ck.rng.word_pos.to_le_bytes());
    let layout = ck.params.layout();
    out.extend_from_slice(&(layout.len() as u32).to_le_bytes());
    for spec in &layout {
        out.extend_from_slice(&(spec.name.len() as u32).to_le_bytes());
        out.extend_from_slice(spec.name.as_bytes());
        out.extend_from_slice(&(spec.shape.len() as u32).to_le_bytes());
        for &e in &spec.shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in &ck.params.data[spec.range()] {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, at: 0 };
    expect_header(&mut r, CHECKPOINT_MAGIC)?;
    let len = r.u64()? as usize;
    let manifest: ModelManifest = serde_json::from_slice(r.take(len)?).map_err(|e| Error::Format(e.to_string()))?;
    let rng = RngState {
        seed: r.take(32)?.try_into().expect("32 bytes"),
        stream: r.u64()?,
        word_pos: r.u128()?,
    };
    let architecture = Architecture {
        n_algorithms: manifest.n_algorithms,
        ablation: manifest.ablation,
    };
    let layout = architecture.layout();
    let count = r.u32()? as usize;
    if count != layout.len() {
        return Err(Error::Format(format!("{count} tensors, architecture has {}", layout.len())));
    }
    let mut data = Vec::with_capacity(architecture.parameter_count());
    for spec in &layout {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|e| Error::Format(e.to_string()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        if name != spec.name || shape != spec.shape {
            return Err(Error::Format(format!(
                "tensor {name} {shape:?} where {} {:?} was expected",
                spec.name, spec.shape
            )));
        }
        for _ in 0..spec.len() {
            data.push(r.f64()?);
        }
    }
    r.finish()?;
    Ok(Checkpoint {
        manifest,
        rng,
        params: ModelParams::from_data(architecture, data)?,
    })
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
        _ => Error::Ingest {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        },
    }
}

/// Column positions of `names` in the header, by exact name.
fn header_columns(path: &Path, header: &csv::StringRecord, names: &[&str]) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| {
            header.iter().position(|h| h == *n).ok_or_else(|| Error::Ingest {
                path: path.to_path_buf(),
                line: 1,
                message: format!("missing column `{n}` (header: {})", header.iter().collect::<Vec<_>>().join(",")),
            })
        })
        .collect()
}

struct Row<'a> {
    path: &'a Path,
    line: u64,
    record: &'a csv::StringRecord,
}

impl Row<'_> {
    fn field(&self, col: usize, name: &str) -> Result<&str> {
        self.record.get(col).ok_or_else(|| self.error(format!("missing field `{name}`")))
    }
    fn parse<T: std::str::FromStr>(&self, col: usize, name: &str) -> Result<T> {
        let raw = self.field(col, name)?;
        raw.parse()
            .map_err(|_| self.error(format!("field `{name}` has invalid value `{raw}`")))
    }
    fn flag(&self, col: usize, name: &str) -> Result<bool> {
        match self.field(col, name)?.to_ascii_lowercase().as_str() {
            "1" | "true" => Ok(true),
            "0" | "false" => Ok(false),
            raw => Err(self.error(format!("field `{name}` must be 0/1/true/false, got `{raw}`"))),
        }
    }
    fn error(&self, message: String) -> Error {
        Error::Ingest {
            path: self.path.to_path_buf(),
            line: self.line,
            message,
        }
    }
}

fn for_each_row(path: &Path, names: &[&str], mut f: impl FnMut(&Row<'_>, &[usize]) -> Result<()>) -> Result<()> {
    let mut rdr = csv_reader(path)?;
    let header = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let cols = header_columns(path, &header, names)?;
    let mut record = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {
                let line = record.position().map_or(0, |p| p.line());
                f(&Row { path, line, record: &record }, &cols)?;
            }
            Err(e) => return Err(csv_error(path, e)),
        }
    }
    Ok(())
}

pub fn read_runs_csv(path: &Path) -> Result<Vec<RunRecord>> {
    let names = ["function_id", "dimension", "instance_id", "algorithm", "evaluations", "success"];
    let mut out = Vec::new();
    for_each_row(path, &names, |row, c| {
        let evaluations: u64 = row.parse(c[4], names[4])?;
        if evaluations == 0 {
            return Err(row.error("evaluations must be >= 1".into()));
        }
        out.push(RunRecord {
            function_id: row.parse(c[0], names[0])?,
            dimension: row.parse(c[1], names[1])?,
            instance_id: row.parse(c[2], names[2])?,
            algorithm: row.field(c[3], names[3])?.to_string(),
            evaluations,
            success: row.flag(c[5], names[5])?,
        });
        Ok(())
    })?;
    if out.is_empty() {
        return Err(Error::Data(format!("{}: no runs", path.display())));
    }
    Ok(out)
}

pub fn read_ert_csv(path: &Path) -> Result<Vec<ErtRecord>> {
    let names = ["function_id", "dimension", "algorithm", "ert", "finite_flag"];
    let mut out = Vec::new();
    for_each_row(path, &names, |row, c| {
        let finite = row.flag(c[4], names[4])?;
        let ert = if finite {
            let v: f64 = row.parse(c[3], names[3])?;
            if !(v.is_finite() && v > 0.0) {
                return Err(row.error(format!("finite ERT must be positive, got {v}")));
            }
            Some(v)
        } else {
            None
        };
        out.push(ErtRecord {
            function_id: row.parse(c[0], names[0])?,
            dimension: row.parse(c[1], names[1])?,
            algorithm: row.field(c[2], names[2])?.to_string(),
            ert,
        });
        Ok(())
    })?;
    if out.is_empty() {
        return Err(Error::Data(format!("{}: no ERT rows", path.display())));
    }
    Ok(out)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<fs::File>>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

fn write_rows<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv_writer(path)?;
    let fail = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
    w.write_record(header).map_err(fail)?;
    for row in rows {
        w.write_record(row.into_iter().collect::<Vec<_>>()).map_err(fail)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_ert_csv(path: &Path, records: &[ErtRecord]) -> Result<()> {
    write_rows(
        path,
        &["function_id", "dimension", "algorithm", "ert", "finite_flag"],
        records.iter().map(|r| {
            vec![
                r.function_id.to_string(),
                r.dimension.to_string(),
                r.algorithm.clone(),
                r.ert.map_or_else(|| "0".to_string(), |v| v.to_string()),
                (r.ert.is_some() as u8).to_string(),
            ]
        }),
    )
}

pub fn write_runs_csv(path: &Path, runs: &[RunRecord]) -> Result<()> {
    write_rows(
        path,
        &["function_id", "dimension", "instance_id", "algorithm", "evaluations", "success"],
        runs.iter().map(|r| {
            vec![
                r.function_id.to_string(),
                r.dimension.to_string(),
                r.instance_id.to_string(),
                r.algorithm.clone(),
                r.evaluations.to_string(),
                (r.success as u8).to_string(),
            ]
        }),
    )
}

fn cell_dimension(d: Option<u32>) -> String {
    d.map_or_else(|| "all".to_string(), |d| d.to_string())
}

/// Summary table: one row per (group, dimension) cell.
pub fn write_summary_csv(path: &Path, report: &Report) -> Result<()> {
    let header = [
        "group", "dimension", "count", "sbs_mean", "sbs_median", "sbs_p90", "selector_mean", "selector_median",
        "selector_p90", "closure_mean", "closure_median", "closure_p90", "accuracy",
    ];
    write_rows(
        path,
        &header,
        report.cells.iter().map(|c| {
            vec![
                c.group.clone(),
                cell_dimension(c.dimension),
                c.count.to_string(),
                c.sbs.mean.to_string(),
                c.sbs.median.to_string(),
                c.sbs.p90.to_string(),
                c.selector.mean.to_string(),
                c.selector.median.to_string(),
                c.selector.p90.to_string(),
                c.closure.mean.to_string(),
                c.closure.median.to_string(),
                c.closure.p90.to_string(),
                c.accuracy.to_string(),
            ]
        }),
    )
}

pub fn write_quadrants_csv(path: &Path, report: &Report) -> Result<()> {
    write_rows(
        path,
        &["threshold", "value", "neither", "sbs_only", "both", "selector_only", "total"],
        report.quadrants.iter().map(|q| {
            vec![
                q.threshold_name.clone(),
                q.threshold.to_string(),
                q.counts.neither.to_string(),
                q.counts.sbs_only.to_string(),
                q.counts.both.to_string(),
                q.counts.selector_only.to_string(),
                q.counts.total().to_string(),
            ]
        }),
    )
}

pub fn write_records_csv(path: &Path, report: &Report) -> Result<()> {
    write_rows(
        path,
        &["function_id", "dimension", "instance_id", "repetition", "fold", "chosen", "vbs", "selector_relert", "sbs_relert"],
        report.records.iter().map(|r| {
            vec![
                r.id.function_id.to_string(),
                r.id.dimension.to_string(),
                r.id.instance_id.to_string(),
                r.id.repetition.to_string(),
                r.fold.to_string(),
                report.algorithms[r.chosen].clone(),
                report.algorithms[r.vbs].clone(),
                r.selector_relert.to_string(),
                r.sbs_relert.to_string(),
            ]
        }),
    )
}

/// Long-format heatmap grid of a budget sweep.
pub fn write_sweep_csv(path: &Path, cells: &[SweepCell]) -> Result<()> {
    write_rows(
        path,
        &["k", "r", "evaluations", "mean_probe_seconds", "mean", "median", "p90", "accuracy"],
        cells.iter().map(|c| {
            vec![
                c.slices.to_string(),
                c.resolution.to_string(),
                c.evaluations_per_datapoint.to_string(),
                c.mean_probe_seconds.to_string(),
                c.summary.mean.to_string(),
                c.summary.median.to_string(),
                c.summary.p90.to_string(),
                c.accuracy.to_string(),
            ]
        }),
    )
}

/// Appends one line to a text file, creating it when absent.
pub fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bbob::make_instance;
    use crate::model::init_parameters;
    use crate::probing::build_probe_set;
    use crate::seed::stream;

    #[test]
    fn slice_set_round_trip_is_bit_exact() {
        let set = build_probe_set(&make_instance(7, 3, 2).unwrap(), 5, 8, 4).unwrap();
        let bytes = encode_slice_set(&set).unwrap();
        assert_eq!(bytes.len(), 36 + 5 * (24 + 9 * 64));
        let back = decode_slice_set(&bytes).unwrap();
        assert_eq!(back, set);
        assert!(decode_slice_set(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_slice_set(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        use rand::RngCore;
        let params = init_parameters(5, 2).unwrap();
        let mut rng = stream(17);
        rng.next_u64();
        let ck = Checkpoint {
            manifest: ModelManifest {
                n_algorithms: 5,
                resolution: 8,
                slices: 32,
                ablation: Ablation::default(),
                seed: 2,
            },
            rng: RngState::capture(&rng),
            params,
        };
        let back = decode_checkpoint(&encode_checkpoint(&ck).unwrap()).unwrap();
        assert_eq!(back, ck);
        let mut restored = back.rng.restore();
        assert_eq!(restored.next_u64(), rng.next_u64());
    }

    #[test]
    fn csv_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("runs.csv");
        fs::write(
            &p,
            "function_id,dimension,instance_id,algorithm,evaluations,success\n1,2,1,a,10,1\n1,2,1,b,ten,0\n",
        )
        .unwrap();
        match read_runs_csv(&p) {
            Err(Error::Ingest { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("evaluations"));
            }
            other => panic!("{other:?}"),
        }
        fs::write(&p, "function_id,dimension\n1,2\n").unwrap();
        assert!(matches!(read_runs_csv(&p), Err(Error::Ingest { line: 1, .. })));
    }

    #[test]
    fn ert_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ert.csv");
        let recs = vec![
            ErtRecord { function_id: 1, dimension: 2, algorithm: "a".into(), ert: Some(123.25) },
            ErtRecord { function_id: 1, dimension: 2, algorithm: "b".into(), ert: None },
        ];
        write_ert_csv(&p, &recs).unwrap();
        assert_eq!(read_ert_csv(&p).unwrap(), recs);
    }
}
