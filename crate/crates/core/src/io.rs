//! File formats: dataset CSVs, metric tables and the binary model container.
//!
//! Floats are written with Rust's shortest round-trip formatting, so reading
//! a file back reproduces every value bit for bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::model::{Centers, MtlModel, TaskHead};
use crate::nncore::{Activation, Dense, DenseNet};

/// Writes `bytes` to a temporary file next to `path` and renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Serializes rows of string cells as CSV.
pub fn csv_bytes<I, R>(header: &[String], rows: I) -> Vec<u8>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(row.into_iter().collect::<Vec<_>>())
            .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn dataset_header(d: usize) -> Vec<String> {
    (1..=d).map(|j| format!("x{j}")).chain(["y".to_string()]).collect()
}

/// Writes a dataset with header `x1,...,xd,y`.
pub fn write_dataset_csv(path: &Path, x: &Array2<f64>, y: &Array1<f64>) -> Result<()> {
    let rows = x.rows().into_iter().zip(y).map(|(row, &yi)| {
        row.iter()
            .map(|&v| fmt_f64(v))
            .chain([fmt_f64(yi)])
            .collect::<Vec<_>>()
    });
    write_atomic(path, &csv_bytes(&dataset_header(x.ncols()), rows))
}

/// Reads a `x1,...,xd,y` dataset. `expected_d`, when given, pins the
/// feature count.
pub fn read_dataset_csv(path: &Path, expected_d: Option<usize>) -> Result<(Array2<f64>, Array1<f64>)> {
    let schema = |detail: String| Error::Schema {
        file: path.to_path_buf(),
        detail,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => schema(format!("{other:?}")),
    })?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| schema(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.last().map(String::as_str) != Some("y") {
        return Err(schema("missing `y` column (must be last)".into()));
    }
    let d = header.len() - 1;
    for (j, name) in header[..d].iter().enumerate() {
        if *name != format!("x{}", j + 1) {
            return Err(schema(format!("column {} is `{name}`, expected `x{}`", j + 1, j + 1)));
        }
    }
    if let Some(expected) = expected_d {
        if d != expected {
            return Err(schema(format!("{d} feature columns, expected {expected}")));
        }
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| schema(e.to_string()))?;
        if record.len() != d + 1 {
            return Err(schema(format!("row {} has {} fields, expected {}", line + 1, record.len(), d + 1)));
        }
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| schema(format!("row {}, column `{}`: `{cell}` is not a number", line + 1, header[j])))?;
            if !v.is_finite() {
                return Err(schema(format!("row {}, column `{}`: non-finite value", line + 1, header[j])));
            }
            if j < d {
                xs.push(v);
            } else {
                ys.push(v);
            }
        }
    }
    let n = ys.len();
    let x = Array2::from_shape_vec((n, d), xs).expect("row-major fill");
    Ok((x, Array1::from(ys)))
}

// ---------------------------------------------------------------------------
// binary model container
//
//   magic      8 bytes  "DUALMTL\0"
//   version    u32 LE
//   desc_len   u32 LE
//   desc       desc_len bytes of UTF-8 JSON (architecture descriptor)
//   n_params   u64 LE
//   params     n_params × f64 LE
//   crc32      u32 LE over every preceding byte
//
// Parameter order: shared encoder (if any), task-specific encoders in task
// order (each layer: weight row-major, then bias), then per task alpha and
// beta, then alpha_bar and beta_bar.
// ---------------------------------------------------------------------------

pub const MODEL_MAGIC: &[u8; 8] = b"DUALMTL\0";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDescriptor {
    activation: Activation,
    /// Layer sizes including the input dimension.
    shared: Option<Vec<usize>>,
    specific: Vec<usize>,
    tasks: usize,
}

fn push_net(out: &mut Vec<f64>, net: &DenseNet) {
    out.extend(net.flat_params());
}

pub fn encode_model(model: &MtlModel) -> Vec<u8> {
    let desc = ModelDescriptor {
        activation: model.specifics[0].activation(),
        shared: model.shared.as_ref().map(DenseNet::dims),
        specific: model.specifics[0].dims(),
        tasks: model.tasks(),
    };
    let desc = serde_json::to_vec(&desc).expect("descriptor serializes");

    let mut params = Vec::new();
    if let Some(net) = &model.shared {
        push_net(&mut params, net);
    }
    for net in &model.specifics {
        push_net(&mut params, net);
    }
    for head in &model.heads {
        params.extend(head.alpha.iter());
        params.extend(head.beta.iter());
    }
    params.extend(model.centers.alpha_bar.iter());
    params.extend(model.centers.beta_bar.iter());

    let mut out = Vec::with_capacity(32 + desc.len() + 8 * params.len());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    out.extend_from_slice(&desc);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in &params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::ModelFormat("unexpected end of data".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn net_from_params(dims: &[usize], activation: Activation, params: &mut std::slice::Iter<'_, f64>) -> Result<DenseNet> {
    if dims.len() < 2 {
        return Err(Error::ModelFormat("network needs at least one layer".into()));
    }
    let layers = dims
        .windows(2)
        .map(|w| {
            let mut layer = Dense::zeros(w[0], w[1]);
            for slot in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                *slot = *params.next().ok_or_else(|| Error::ModelFormat("too few parameters".into()))?;
            }
            Ok(layer)
        })
        .collect::<Result<Vec<_>>>()?;
    DenseNet::from_layers(layers, activation)
}

fn take_vec(len: usize, params: &mut std::slice::Iter<'_, f64>) -> Result<Array1<f64>> {
    (0..len)
        .map(|_| params.next().copied().ok_or_else(|| Error::ModelFormat("too few parameters".into())))
        .collect::<Result<Vec<_>>>()
        .map(Array1::from)
}

pub fn decode_model(bytes: &[u8]) -> Result<MtlModel> {
    if bytes.len() < MODEL_MAGIC.len() + 4 {
        return Err(Error::ModelFormat("file too short".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::ModelFormat("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body };
    if r.take(8)? != MODEL_MAGIC {
        return Err(Error::ModelFormat("bad magic".into()));
    }
    let version = r.u32()?;
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::ModelFormat(format!("unsupported format version {version}")));
    }
    let desc_len = r.u32()? as usize;
    let desc: ModelDescriptor = serde_json::from_slice(r.take(desc_len)?)
        .map_err(|e| Error::ModelFormat(format!("descriptor: {e}")))?;
    let n_params = r.u64()? as usize;
    let raw = r.take(n_params.checked_mul(8).ok_or_else(|| Error::ModelFormat("size overflow".into()))?)?;
    if !r.buf.is_empty() {
        return Err(Error::ModelFormat("trailing bytes".into()));
    }
    let params: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut it = params.iter();
    let shared = desc
        .shared
        .as_deref()
        .map(|dims| net_from_params(dims, desc.activation, &mut it))
        .transpose()?;
    let specifics = (0..desc.tasks)
        .map(|_| net_from_params(&desc.specific, desc.activation, &mut it))
        .collect::<Result<Vec<_>>>()?;
    let q = *desc.specific.last().unwrap();
    let p = desc.shared.as_ref().map_or(0, |d| *d.last().unwrap());
    let heads = (0..desc.tasks)
        .map(|_| {
            Ok(TaskHead {
                alpha: take_vec(q, &mut it)?,
                beta: take_vec(p, &mut it)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let centers = Centers {
        alpha_bar: take_vec(q, &mut it)?,
        beta_bar: take_vec(p, &mut it)?,
    };
    if it.next().is_some() {
        return Err(Error::ModelFormat("too many parameters".into()));
    }
    let model = MtlModel {
        shared,
        specifics,
        heads,
        centers,
    };
    model.validate()?;
    Ok(model)
}

pub fn save_model(path: &Path, model: &MtlModel) -> Result<()> {
    write_atomic(path, &encode_model(model))
}

pub fn load_model(path: &Path) -> Result<MtlModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}
