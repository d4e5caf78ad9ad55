//! Feature archives and synthetic feature sets.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! "OGCD" | version: u8 = 1 | header_len: u32 | header: JSON (header_len bytes)
//! payload: count * dim values (f32 or f64, row-major)
//! ids:     count * u64
//! labels:  count * u32                      (if has_labels)
//! uris:    count * (len: u32, UTF-8 bytes)  (if has_uris)
//! ```
//!
//! The same container (magic, version, JSON header, raw payload) also holds
//! fitted classifier parameters; see [`write_container`].

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::types::{ClassId, FeatureSet};

pub const MAGIC: &[u8; 4] = b"OGCD";
pub const VERSION: u8 = 1;
const PREAMBLE: usize = 4 + 1 + 4;
const CSV_MAX_ROWS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureArchiveHeader {
    pub version: u32,
    pub count: usize,
    pub dim: usize,
    pub dtype: Dtype,
    pub has_labels: bool,
    pub has_uris: bool,
    #[serde(default)]
    pub has_ids: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<BTreeMap<ClassId, String>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

/// Write a generic container: magic, version, JSON header, then `payload`.
pub fn write_container(path: &Path, header: &impl Serialize, payload: &[u8]) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

/// Parsed container: the JSON header, the raw body and the body's file offset.
pub struct Container {
    pub header: serde_json::Value,
    pub body: Vec<u8>,
    pub body_offset: u64,
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = fs::read(path)?;
    parse_container(bytes)
}

fn parse_container(mut bytes: Vec<u8>) -> Result<Container> {
    if bytes.len() < PREAMBLE {
        return Err(Error::Truncated {
            offset: 0,
            expected: PREAMBLE as u64,
            found: bytes.len() as u64,
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "missing OGCD magic bytes".into(),
        });
    }
    if bytes[4] != VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {}", bytes[4]),
        });
    }
    let hlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    if bytes.len() < PREAMBLE + hlen {
        return Err(Error::Truncated {
            offset: PREAMBLE as u64,
            expected: hlen as u64,
            found: (bytes.len() - PREAMBLE) as u64,
        });
    }
    let header = serde_json::from_slice(&bytes[PREAMBLE..PREAMBLE + hlen]).map_err(|e| Error::Format {
        offset: PREAMBLE as u64,
        message: format!("malformed header JSON: {e}"),
    })?;
    let body = bytes.split_off(PREAMBLE + hlen);
    Ok(Container {
        header,
        body,
        body_offset: (PREAMBLE + hlen) as u64,
    })
}

/// Little-endian cursor that reports absolute file offsets on failure.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: u64,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if left < n {
            return Err(Error::Truncated {
                offset: self.base + self.pos as u64,
                expected: n as u64,
                found: left as u64,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn offset(&self) -> u64 {
        self.base + self.pos as u64
    }
}

pub fn read_archive(path: &Path) -> Result<FeatureSet> {
    read_archive_with_header(path).map(|(fs, _)| fs)
}

/// Read a binary archive, or a CSV file when the path ends in `.csv`.
pub fn read_archive_with_header(path: &Path) -> Result<(FeatureSet, FeatureArchiveHeader)> {
    let bytes = fs::read(path)?;
    if !bytes.starts_with(MAGIC) && path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        let fs = parse_csv(&bytes)?;
        let header = header_for(&fs, Dtype::F64);
        return Ok((fs, header));
    }
    let c = parse_container(bytes)?;
    let header: FeatureArchiveHeader = serde_json::from_value(c.header).map_err(|e| Error::Format {
        offset: PREAMBLE as u64,
        message: format!("header is not a feature archive header: {e}"),
    })?;
    if header.version != 1 {
        return Err(Error::Format {
            offset: PREAMBLE as u64,
            message: format!("unsupported header version {}", header.version),
        });
    }
    if header.dim == 0 {
        return Err(Error::Format {
            offset: PREAMBLE as u64,
            message: "dim must be at least 1".into(),
        });
    }
    let n = header.count;
    let mut cur = Cursor {
        bytes: &c.body,
        pos: 0,
        base: c.body_offset,
    };
    let values = n
        .checked_mul(header.dim)
        .ok_or_else(|| Error::Format {
            offset: PREAMBLE as u64,
            message: "count * dim overflows".into(),
        })?;
    let raw = cur.take(values * header.dtype.width())?;
    let data: Vec<f64> = match header.dtype {
        Dtype::F64 => raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect(),
        Dtype::F32 => raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
    };
    let ids: Vec<u64> = if header.has_ids {
        cur.take(n * 8)?
            .chunks_exact(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
            .collect()
    } else {
        (0..n as u64).collect()
    };
    let labels = if header.has_labels {
        Some(
            cur.take(n * 4)?
                .chunks_exact(4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        )
    } else {
        None
    };
    let uris = if header.has_uris {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
            let at = cur.offset();
            let s = std::str::from_utf8(cur.take(len)?).map_err(|_| Error::Format {
                offset: at,
                message: "URI is not valid UTF-8".into(),
            })?;
            out.push(s.to_owned());
        }
        Some(out)
    } else {
        None
    };
    if cur.pos != c.body.len() {
        return Err(Error::Format {
            offset: cur.offset(),
            message: format!(
                "{} trailing bytes after the declared {n} x {} payload",
                c.body.len() - cur.pos,
                header.dim
            ),
        });
    }
    let fs = FeatureSet::new(data, header.dim, ids, labels, uris).map_err(|e| Error::Format {
        offset: c.body_offset,
        message: e.to_string(),
    })?;
    Ok((fs, header))
}

fn header_for(fs: &FeatureSet, dtype: Dtype) -> FeatureArchiveHeader {
    FeatureArchiveHeader {
        version: 1,
        count: fs.len(),
        dim: fs.dim(),
        dtype,
        has_labels: fs.labels().is_some(),
        has_uris: fs.uris().is_some(),
        has_ids: true,
        class_names: None,
        metadata: BTreeMap::new(),
    }
}

pub fn write_archive(fs: &FeatureSet, path: &Path, dtype: Dtype) -> Result<()> {
    write_archive_with(fs, path, dtype, None, BTreeMap::new())
}

pub fn write_archive_with(
    fs: &FeatureSet,
    path: &Path,
    dtype: Dtype,
    class_names: Option<BTreeMap<ClassId, String>>,
    metadata: BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    let mut header = header_for(fs, dtype);
    header.class_names = class_names;
    header.metadata = metadata;
    let mut body = Vec::with_capacity(fs.data().len() * dtype.width() + fs.len() * 12);
    match dtype {
        Dtype::F64 => fs.data().iter().for_each(|v| body.extend_from_slice(&v.to_le_bytes())),
        Dtype::F32 => fs
            .data()
            .iter()
            .for_each(|v| body.extend_from_slice(&(*v as f32).to_le_bytes())),
    }
    fs.ids().iter().for_each(|id| body.extend_from_slice(&id.to_le_bytes()));
    if let Some(labels) = fs.labels() {
        labels.iter().for_each(|l| body.extend_from_slice(&l.to_le_bytes()));
    }
    if let Some(uris) = fs.uris() {
        for u in uris {
            body.extend_from_slice(&(u.len() as u32).to_le_bytes());
            body.extend_from_slice(u.as_bytes());
        }
    }
    write_container(path, &header, &body)
}

/// CSV with header `id[,label],f0,...,f{D-1}`; at most 10k rows.
fn parse_csv(bytes: &[u8]) -> Result<FeatureSet> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| Error::Format {
            offset: 0,
            message: format!("unreadable CSV header: {e}"),
        })?
        .clone();
    if headers.get(0) != Some("id") {
        return Err(Error::Format {
            offset: 0,
            message: "CSV header must start with `id`".into(),
        });
    }
    let has_labels = headers.get(1) == Some("label");
    let first_feature = if has_labels { 2 } else { 1 };
    let dim = headers.len().saturating_sub(first_feature);
    if dim == 0 {
        return Err(Error::Format {
            offset: 0,
            message: "CSV has no feature columns".into(),
        });
    }
    let mut data = Vec::new();
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Format {
            offset: e.position().map_or(0, |p| p.byte()),
            message: format!("bad CSV record: {e}"),
        })?;
        let offset = record.position().map_or(0, |p| p.byte());
        let bad = |what: &str| Error::Format {
            offset,
            message: format!("cannot parse {what}"),
        };
        if ids.len() == CSV_MAX_ROWS {
            return Err(Error::Format {
                offset,
                message: format!("CSV input is limited to {CSV_MAX_ROWS} rows"),
            });
        }
        ids.push(record[0].parse::<u64>().map_err(|_| bad("id"))?);
        if has_labels {
            labels.push(record[1].parse::<ClassId>().map_err(|_| bad("label"))?);
        }
        for f in first_feature..headers.len() {
            data.push(record[f].parse::<f64>().map_err(|_| bad("feature value"))?);
        }
    }
    FeatureSet::new(data, dim, ids, has_labels.then_some(labels), None).map_err(|e| Error::Format {
        offset: 0,
        message: e.to_string(),
    })
}

pub fn write_csv(fs: &FeatureSet, path: &Path) -> Result<()> {
    if fs.len() > CSV_MAX_ROWS {
        return invalid(format!("CSV output is limited to {CSV_MAX_ROWS} rows"));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    let mut header = vec!["id".to_string()];
    if fs.labels().is_some() {
        header.push("label".into());
    }
    header.extend((0..fs.dim()).map(|d| format!("f{d}")));
    w.write_record(&header).map_err(|e| Error::Io(e.into()))?;
    for (i, row) in fs.rows().enumerate() {
        let mut rec = vec![fs.ids()[i].to_string()];
        if let Some(l) = fs.labels() {
            rec.push(l[i].to_string());
        }
        // `{:?}` prints the shortest representation that round-trips exactly.
        rec.extend(row.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

/// Isotropic Gaussian blobs around uniformly drawn centroids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub centroid_scale: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.dim == 0 {
            return invalid("blobs need at least one class and one dimension");
        }
        if !(self.centroid_scale > 0.0 && self.centroid_scale.is_finite()) {
            return invalid("centroid_scale must be positive");
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return invalid("noise_sigma must be positive");
        }
        Ok(())
    }

    pub fn separation_ratio(&self) -> f64 {
        self.centroid_scale / self.noise_sigma
    }

    /// Archive metadata describing how the set was generated.
    pub fn metadata(&self) -> BTreeMap<String, serde_json::Value> {
        let mut m = BTreeMap::new();
        m.insert("generator".into(), "blobs".into());
        m.insert("separation_ratio".into(), self.separation_ratio().into());
        m.insert("blob_spec".into(), serde_json::to_value(self).expect("plain struct"));
        m
    }
}

/// Labels are `1..=num_classes`, rows are grouped by class, ids are `0..N`.
pub fn generate_blobs(spec: &BlobSpec) -> Result<FeatureSet> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let uniform = Uniform::new_inclusive(-spec.centroid_scale, spec.centroid_scale)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let centroids: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| (0..spec.dim).map(|_| uniform.sample(rng.inner_mut())).collect())
        .collect();
    let n = spec.num_classes * spec.per_class;
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for (c, centre) in centroids.iter().enumerate() {
        for _ in 0..spec.per_class {
            data.extend(centre.iter().map(|m| m + noise.sample(rng.inner_mut())));
            labels.push(c as ClassId + 1);
        }
    }
    FeatureSet::new(data, spec.dim, (0..n as u64).collect(), Some(labels), None)
}
