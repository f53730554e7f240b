//! Model serialization: a self-describing binary container holding the
//! architecture, the user-id mapping, the originating training config, and
//! every parameter as a named `(shape, raw 64-bit little-endian)` buffer.
//! Round trips are bit-exact. Also the bare matrix format the embedding
//! exporter writes.
//!
//! Writes go through a temp file in the target directory followed by a
//! rename, so a crash never leaves a half-written checkpoint behind.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{stream_rng, Real, Tensor};
use crate::seq2seq::{Model, ModelShape};
use crate::trajdata::UserVocab;
use crate::training::TrainConfig;

const MAGIC: &[u8; 8] = b"TRJREPCK";
const FORMAT_VERSION: u32 = 1;

/// Everything in a checkpoint besides the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub shape: ModelShape,
    pub n_segments: usize,
    /// Raw-to-dense user-id mapping the model was trained under.
    pub users: UserVocab,
    /// The pretraining config, when the producer recorded one.
    pub train_config: Option<TrainConfig>,
}

#[derive(Serialize, Deserialize)]
struct MetaJson {
    shape: ModelShape,
    n_segments: usize,
    users: Vec<i64>,
    train_config: Option<TrainConfig>,
}

fn bad(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::integrity(format!("checkpoint {}: {msg}", path.display()))
}

/// Serializes the model with its user mapping and (optionally) the config
/// that produced it. The vocabulary must be exactly as large as the model's
/// user table.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &Model,
    users: &UserVocab,
    train_config: Option<&TrainConfig>,
) -> Result<()> {
    let path = path.as_ref();
    if users.len() != model.n_users() {
        return Err(Error::validation(format!(
            "user vocabulary has {} entries but the model's table has {} rows",
            users.len(),
            model.n_users()
        )));
    }
    let meta = MetaJson {
        shape: model.shape(),
        n_segments: model.seq.vocab().n_segments,
        users: users.original_ids().to_vec(),
        train_config: train_config.cloned(),
    };
    let meta_bytes =
        serde_json::to_vec(&meta).map_err(|e| bad(path, format!("cannot encode header: {e}")))?;

    let params = model.params();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(p.value.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(p.value.cols() as u64).to_le_bytes());
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f64).to_le_bytes());
        }
    }
    atomic_write(path, &out)
}

/// Restores a model bit-exactly, along with the metadata block. Any
/// structural defect (bad magic, unknown version, truncation, parameter
/// set mismatch) is an integrity error naming the file.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, CheckpointMeta)> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    let mut r = Reader { path, buf: &buf, at: 0 };

    if r.bytes(8)? != MAGIC {
        return Err(bad(path, "not a checkpoint file (bad magic)"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(bad(
            path,
            format!("format version {version} (this build reads {FORMAT_VERSION})"),
        ));
    }
    let meta_len = r.length()?;
    let meta: MetaJson = serde_json::from_slice(r.bytes(meta_len)?)
        .map_err(|e| bad(path, format!("malformed header: {e}")))?;

    // The weights overwrite every value, so the init stream is arbitrary.
    let mut scratch_rng = stream_rng(0, 0);
    let mut model = Model::new(&meta.shape, meta.n_segments, meta.users.len(), &mut scratch_rng)?;
    let mut params = model.params_mut();
    let index: HashMap<String, usize> = params
        .iter()
        .enumerate()
        .map(|(i, p)| (p.name.clone(), i))
        .collect();
    let mut filled = vec![false; params.len()];

    let count = r.length()?;
    if count != params.len() {
        return Err(bad(
            path,
            format!("{count} stored parameters, model defines {}", params.len()),
        ));
    }
    for _ in 0..count {
        let name_len = r.length()?;
        let name = std::str::from_utf8(r.bytes(name_len)?)
            .map_err(|_| bad(path, "parameter name is not UTF-8"))?
            .to_owned();
        let rows = r.length()?;
        let cols = r.length()?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| bad(path, format!("parameter {name}: dimension overflow")))?;
        let data = r.reals(n)?;
        let &i = index
            .get(&name)
            .ok_or_else(|| bad(path, format!("unknown parameter {name}")))?;
        if filled[i] {
            return Err(bad(path, format!("duplicate parameter {name}")));
        }
        let expect = [params[i].value.rows(), params[i].value.cols()];
        if [rows, cols] != expect {
            return Err(bad(
                path,
                format!("parameter {name}: stored {rows}x{cols}, model wants {}x{}", expect[0], expect[1]),
            ));
        }
        params[i].value = Tensor::new(rows, cols, data);
        filled[i] = true;
    }
    r.done()?;
    drop(params);

    let users = UserVocab::from_original(meta.users);
    Ok((
        model,
        CheckpointMeta {
            shape: meta.shape,
            n_segments: meta.n_segments,
            users,
            train_config: meta.train_config,
        },
    ))
}

/// Writes an `n × d` matrix: `n` and `d` as 64-bit little-endian counts,
/// then the values row-major as 64-bit floats (the embedding export
/// format).
pub fn write_matrix(path: impl AsRef<Path>, m: &Tensor) -> Result<()> {
    let mut out = Vec::with_capacity(16 + m.data().len() * 8);
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for &v in m.data() {
        out.extend_from_slice(&(v as f64).to_le_bytes());
    }
    atomic_write(path.as_ref(), &out)
}

/// Reads a matrix written by [`write_matrix`].
pub fn read_matrix(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    let mut r = Reader { path, buf: &buf, at: 0 };
    let rows = r.length()?;
    let cols = r.length()?;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| bad(path, "dimension overflow"))?;
    let data = r.reals(n)?;
    r.done()?;
    Ok(Tensor::new(rows, cols, data))
}

/// Write-temp-rename so readers never observe a partial file.
fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::validation(format!("{} has no file name", path.display())))?;
    let mut tmp_name = name.to_owned();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let io = |e| Error::io(tmp.clone(), e);
    let mut f = std::fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.to_path_buf(), e))
}

/// Bounds-checked little-endian cursor; every failure is an integrity
/// error carrying the byte offset.
struct Reader<'a> {
    path: &'a Path,
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            bad(
                self.path,
                format!("truncated: wanted {n} bytes at offset {}", self.at),
            )
        })?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    /// A u64 count that must fit in usize.
    fn length(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.bytes(8)?.try_into().unwrap());
        usize::try_from(v)
            .map_err(|_| bad(self.path, format!("count {v} does not fit this platform")))
    }

    fn reals(&mut self, n: usize) -> Result<Vec<Real>> {
        let byte_len = n
            .checked_mul(8)
            .ok_or_else(|| bad(self.path, "buffer length overflow"))?;
        let raw = self.bytes(byte_len)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Real)
            .collect())
    }

    fn done(&self) -> Result<()> {
        if self.at == self.buf.len() {
            Ok(())
        } else {
            Err(bad(
                self.path,
                format!("{} trailing bytes after offset {}", self.buf.len() - self.at, self.at),
            ))
        }
    }
}
