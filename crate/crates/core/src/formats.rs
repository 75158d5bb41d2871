//! Wire formats: the framed `SDEU` binary layout for sample sets and paths,
//! NDJSON for small cases, and the length-prefixed training-record stream.
//!
//! Binary frame, all little-endian:
//!
//! | bytes  | field                      |
//! |--------|----------------------------|
//! | 0..4   | magic `SDEU`               |
//! | 4..8   | version (u32, currently 1) |
//! | 8..12  | S (u32)                    |
//! | 12..16 | H (u32)                    |
//! | 16..20 | D (u32)                    |
//! | 20..24 | zero padding               |
//! | 24..32 | dt (f64)                   |
//! | 32..   | S·H·D f64 values, row-major `S × H × D` |
//!
//! A path frame is a sample frame with `S = 1, H = n_steps`, followed by a
//! regime trailer: a u32 length (0 or `n_steps`) and that many u8 regimes.

use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulator::{PathMatrix, SampleSet};
use crate::universe::SdeSystemSpec;

pub const MAGIC: [u8; 4] = *b"SDEU";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;

/// Reader that tracks its absolute byte offset so framing errors can say
/// where the data went wrong.
pub struct FrameReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    /// Fills `buf` completely. Returns `Ok(false)` on a clean end of input
    /// before the first byte when `eof_ok` is set.
    fn fill(&mut self, buf: &mut [u8], what: &str, eof_ok: bool) -> Result<bool> {
        let mut got = 0;
        while got < buf.len() {
            match self.inner.read(&mut buf[got..]) {
                Ok(0) => {
                    if got == 0 && eof_ok {
                        return Ok(false);
                    }
                    return Err(Error::format(
                        self.offset,
                        format!("unexpected end of data reading {what} ({got} of {} bytes)", buf.len()),
                    ));
                }
                Ok(n) => {
                    got += n;
                    self.offset += n as u64;
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(true)
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b, what, false)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_f64s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        const CHUNK: usize = 1 << 16;
        let mut out = Vec::with_capacity(count.min(CHUNK));
        let mut buf = vec![0u8; 8 * count.min(CHUNK)];
        let mut left = count;
        while left > 0 {
            let n = left.min(CHUNK);
            self.fill(&mut buf[..8 * n], what, false)?;
            out.extend(buf[..8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())));
            left -= n;
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Header {
    s: u32,
    h: u32,
    d: u32,
    dt: f64,
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidParameter(format!("{what} = {v} does not fit in u32")))
}

fn write_header<W: Write>(w: &mut W, h: Header) -> Result<()> {
    let mut b = [0u8; HEADER_LEN];
    b[0..4].copy_from_slice(&MAGIC);
    b[4..8].copy_from_slice(&VERSION.to_le_bytes());
    b[8..12].copy_from_slice(&h.s.to_le_bytes());
    b[12..16].copy_from_slice(&h.h.to_le_bytes());
    b[16..20].copy_from_slice(&h.d.to_le_bytes());
    b[24..32].copy_from_slice(&h.dt.to_le_bytes());
    w.write_all(&b)?;
    Ok(())
}

fn read_header<R: Read>(r: &mut FrameReader<R>, eof_ok: bool) -> Result<Option<Header>> {
    let start = r.offset();
    let mut b = [0u8; HEADER_LEN];
    if !r.fill(&mut b, "frame header", eof_ok)? {
        return Ok(None);
    }
    if b[0..4] != MAGIC {
        return Err(Error::format(start, format!("bad magic {:?}", &b[0..4])));
    }
    let word = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().unwrap());
    if word(4) != VERSION {
        return Err(Error::format(start + 4, format!("unsupported version {}", word(4))));
    }
    if word(20) != 0 {
        return Err(Error::format(start + 20, "non-zero header padding"));
    }
    let dt = f64::from_le_bytes(b[24..32].try_into().unwrap());
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::format(start + 24, format!("dt must be positive and finite, got {dt}")));
    }
    Ok(Some(Header { s: word(8), h: word(12), d: word(16), dt }))
}

fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 * values.len().min(1 << 16));
    for chunk in values.chunks(1 << 16) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn write_sample_set<W: Write>(w: &mut W, set: &SampleSet) -> Result<()> {
    write_header(
        w,
        Header {
            s: to_u32(set.n_samples, "S")?,
            h: to_u32(set.horizon, "H")?,
            d: to_u32(set.dims, "D")?,
            dt: set.dt,
        },
    )?;
    write_f64s(w, &set.values)
}

fn payload_len(h: Header, at: u64) -> Result<usize> {
    (h.s as usize)
        .checked_mul(h.h as usize)
        .and_then(|v| v.checked_mul(h.d as usize))
        .ok_or_else(|| Error::format(at, "payload size overflows"))
}

fn read_sample_set_opt<R: Read>(r: &mut FrameReader<R>, eof_ok: bool) -> Result<Option<SampleSet>> {
    let at = r.offset();
    let Some(h) = read_header(r, eof_ok)? else {
        return Ok(None);
    };
    let values = r.read_f64s(payload_len(h, at)?, "payload")?;
    Ok(Some(SampleSet {
        n_samples: h.s as usize,
        horizon: h.h as usize,
        dims: h.d as usize,
        values,
        dt: h.dt,
    }))
}

pub fn read_sample_set<R: Read>(r: &mut FrameReader<R>) -> Result<SampleSet> {
    Ok(read_sample_set_opt(r, false)?.expect("eof not accepted"))
}

pub fn encode_sample_set(set: &SampleSet) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * set.values.len());
    write_sample_set(&mut out, set)?;
    Ok(out)
}

/// Decodes exactly one frame; trailing bytes are an error.
pub fn decode_sample_set(bytes: &[u8]) -> Result<SampleSet> {
    let mut r = FrameReader::new(bytes);
    let set = read_sample_set(&mut r)?;
    if (r.offset() as usize) != bytes.len() {
        return Err(Error::format(r.offset(), "trailing bytes after frame"));
    }
    Ok(set)
}

pub fn save_sample_set(path: &Path, set: &SampleSet) -> Result<()> {
    let mut w = io::BufWriter::new(std::fs::File::create(path)?);
    write_sample_set(&mut w, set)?;
    w.flush()?;
    Ok(())
}

pub fn load_sample_set(path: &Path) -> Result<SampleSet> {
    decode_sample_set(&std::fs::read(path)?)
}

pub fn write_path_matrix<W: Write>(w: &mut W, path: &PathMatrix) -> Result<()> {
    write_header(
        w,
        Header {
            s: 1,
            h: to_u32(path.n_steps, "T")?,
            d: to_u32(path.dims, "D")?,
            dt: path.dt,
        },
    )?;
    write_f64s(w, &path.values)?;
    match &path.regime_trace {
        None => w.write_all(&0u32.to_le_bytes())?,
        Some(trace) => {
            if trace.len() != path.n_steps {
                return Err(Error::DimensionMismatch(format!(
                    "regime trace has {} entries for {} steps",
                    trace.len(),
                    path.n_steps
                )));
            }
            w.write_all(&to_u32(trace.len(), "regime trace")?.to_le_bytes())?;
            w.write_all(trace)?;
        }
    }
    Ok(())
}

pub fn read_path_matrix<R: Read>(r: &mut FrameReader<R>) -> Result<PathMatrix> {
    let at = r.offset();
    let h = read_header(r, false)?.expect("eof not accepted");
    if h.s != 1 {
        return Err(Error::format(at + 8, format!("path frame must have S = 1, got {}", h.s)));
    }
    let values = r.read_f64s(payload_len(h, at)?, "path payload")?;
    let trailer_at = r.offset();
    let n = r.read_u32("regime trace length")? as usize;
    let regime_trace = match n {
        0 => None,
        n if n == h.h as usize => {
            let mut trace = vec![0u8; n];
            r.fill(&mut trace, "regime trace", false)?;
            Some(trace)
        }
        n => {
            return Err(Error::format(
                trailer_at,
                format!("regime trace length {n} is neither 0 nor {}", h.h),
            ))
        }
    };
    Ok(PathMatrix {
        n_steps: h.h as usize,
        dims: h.d as usize,
        values,
        dt: h.dt,
        regime_trace,
    })
}

pub fn encode_path_matrix(path: &PathMatrix) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_path_matrix(&mut out, path)?;
    Ok(out)
}

pub fn decode_path_matrix(bytes: &[u8]) -> Result<PathMatrix> {
    let mut r = FrameReader::new(bytes);
    let p = read_path_matrix(&mut r)?;
    if (r.offset() as usize) != bytes.len() {
        return Err(Error::format(r.offset(), "trailing bytes after frame"));
    }
    Ok(p)
}

// NDJSON: a header object, then one line per sample (an H × D array) or per
// step (`{"x": [...], "regime": r}`).

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum NdjsonHeader {
    SampleSet { n_samples: usize, horizon: usize, dims: usize, dt: f64 },
    PathMatrix { n_steps: usize, dims: usize, dt: f64, has_regimes: bool },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NdjsonStep {
    x: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    regime: Option<u8>,
}

fn require_finite(values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidParameter("NDJSON cannot carry non-finite values".into()))
    }
}

pub fn sample_set_to_ndjson(set: &SampleSet) -> Result<String> {
    require_finite(&set.values)?;
    let header = NdjsonHeader::SampleSet {
        n_samples: set.n_samples,
        horizon: set.horizon,
        dims: set.dims,
        dt: set.dt,
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    for s in 0..set.n_samples {
        let rows: Vec<&[f64]> = set.path(s).chunks(set.dims.max(1)).collect();
        out.push_str(&serde_json::to_string(&rows)?);
        out.push('\n');
    }
    Ok(out)
}

fn ndjson_err(line: usize, message: impl Into<String>) -> Error {
    Error::format(line as u64, format!("NDJSON line {line}: {}", message.into()))
}

pub fn sample_set_from_ndjson(text: &str) -> Result<SampleSet> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| ndjson_err(0, "missing header"))?;
    let NdjsonHeader::SampleSet { n_samples, horizon, dims, dt } = serde_json::from_str(first)? else {
        return Err(ndjson_err(0, "header is not a sample_set"));
    };
    let mut set = SampleSet::zeros(0, horizon, dims, dt);
    set.n_samples = n_samples;
    set.values.reserve(n_samples * horizon * dims);
    let mut count = 0;
    for (i, line) in lines {
        let rows: Vec<Vec<f64>> = serde_json::from_str(line)?;
        if rows.len() != horizon || rows.iter().any(|r| r.len() != dims) {
            return Err(ndjson_err(i, format!("expected {horizon} rows of {dims} values")));
        }
        rows.iter().for_each(|r| set.values.extend_from_slice(r));
        count += 1;
    }
    if count != n_samples {
        return Err(ndjson_err(count, format!("expected {n_samples} samples, found {count}")));
    }
    Ok(set)
}

pub fn path_matrix_to_ndjson(path: &PathMatrix) -> Result<String> {
    require_finite(&path.values)?;
    let header = NdjsonHeader::PathMatrix {
        n_steps: path.n_steps,
        dims: path.dims,
        dt: path.dt,
        has_regimes: path.regime_trace.is_some(),
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    for k in 0..path.n_steps {
        let step = NdjsonStep {
            x: path.row(k).to_vec(),
            regime: path.regime_trace.as_ref().map(|t| t[k]),
        };
        out.push_str(&serde_json::to_string(&step)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn path_matrix_from_ndjson(text: &str) -> Result<PathMatrix> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| ndjson_err(0, "missing header"))?;
    let NdjsonHeader::PathMatrix { n_steps, dims, dt, has_regimes } = serde_json::from_str(first)? else {
        return Err(ndjson_err(0, "header is not a path_matrix"));
    };
    let mut values = Vec::with_capacity(n_steps * dims);
    let mut trace = Vec::new();
    for (i, line) in lines {
        let step: NdjsonStep = serde_json::from_str(line)?;
        if step.x.len() != dims || step.regime.is_some() != has_regimes {
            return Err(ndjson_err(i, "step does not match header"));
        }
        values.extend_from_slice(&step.x);
        trace.extend(step.regime);
    }
    if values.len() != n_steps * dims {
        return Err(ndjson_err(values.len() / dims.max(1), format!("expected {n_steps} steps")));
    }
    Ok(PathMatrix {
        n_steps,
        dims,
        values,
        dt,
        regime_trace: has_regimes.then_some(trace),
    })
}

/// One unit of the procedural training stream.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingRecord {
    pub system_spec: SdeSystemSpec,
    pub history: PathMatrix,
    pub future_branches: SampleSet,
}

impl TrainingRecord {
    pub fn check(&self) -> Result<()> {
        let d = self.system_spec.dims();
        if self.history.dims != d || self.future_branches.dims != d {
            return Err(Error::DimensionMismatch(format!(
                "spec has D={d}, history D={}, branches D={}",
                self.history.dims, self.future_branches.dims
            )));
        }
        Ok(())
    }
}

/// Record layout: u64 length of the system spec JSON, the JSON bytes, a path frame
/// for the history, then a sample frame for the branches.
pub fn write_training_record<W: Write>(w: &mut W, rec: &TrainingRecord) -> Result<()> {
    rec.check()?;
    let json = rec.system_spec.to_json()?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(json.as_bytes())?;
    write_path_matrix(w, &rec.history)?;
    write_sample_set(w, &rec.future_branches)
}

/// Reads the next record, or `None` at a clean end of stream.
pub fn read_training_record<R: Read>(r: &mut FrameReader<R>) -> Result<Option<TrainingRecord>> {
    let mut len = [0u8; 8];
    if !r.fill(&mut len, "record length", true)? {
        return Ok(None);
    }
    let len = u64::from_le_bytes(len);
    let json_at = r.offset();
    // Spec documents are a few kilobytes; a huge prefix means corrupt framing.
    if len > 1 << 30 {
        return Err(Error::format(json_at - 8, format!("implausible spec length {len}")));
    }
    let mut json = vec![0u8; len as usize];
    r.fill(&mut json, "spec JSON", false)?;
    let text = std::str::from_utf8(&json).map_err(|e| Error::format(json_at, e.to_string()))?;
    let system_spec = SdeSystemSpec::from_json(text).map_err(|e| Error::format(json_at, e.to_string()))?;
    let history = read_path_matrix(r)?;
    let future_branches = read_sample_set(r)?;
    let rec = TrainingRecord {
        system_spec,
        history,
        future_branches,
    };
    rec.check()?;
    Ok(Some(rec))
}

pub fn read_training_records<R: Read>(r: R) -> Result<Vec<TrainingRecord>> {
    let mut fr = FrameReader::new(r);
    let mut out = Vec::new();
    while let Some(rec) = read_training_record(&mut fr)? {
        out.push(rec);
    }
    Ok(out)
}
