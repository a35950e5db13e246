//! Binary file formats.
//!
//! * model files (`DRQM`): K, D, M, w, gamma and an f32 codebook
//! * code files (`DRQC`): packed codes plus reconstruction norms
//! * head files (`DRQH`): refinement head parameters
//! * fvecs vectors and the matching label sidecar
//!
//! Everything is little-endian. The magic-tagged formats end with a CRC32 of
//! all preceding bytes; a mismatch is reported as [`Error::Format`].
//! Writes go to a temporary file in the target directory that is then
//! renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use tempfile::NamedTempFile;

use crate::codes::{bits_for, pack_into, packed_len, unpack_codes};
use crate::data::FeatureMatrix;
use crate::error::{domain, format, Error, Result};
use crate::index::EncodedDatabase;
use crate::quant::{Codebook, RqModel};
use crate::train::RefinementHead;

pub const MODEL_MAGIC: &[u8; 4] = b"DRQM";
pub const CODES_MAGIC: &[u8; 4] = b"DRQC";
pub const HEAD_MAGIC: &[u8; 4] = b"DRQH";
pub const FORMAT_VERSION: u16 = 1;

/// Size of the code-file header: magic, version, N, M, K.
pub const CODES_HEADER_LEN: usize = 4 + 2 + 8 + 4 + 4;
const CRC_LEN: usize = 4;

/// Writes `bytes` to `path` through a temporary sibling file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file().set_permissions(fs::Permissions::from_mode(0o644))?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn append_crc(mut bytes: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    bytes
}

/// Splits off and verifies the trailing checksum.
fn check_crc<'a>(bytes: &'a [u8], what: &str) -> Result<&'a [u8]> {
    if bytes.len() < CRC_LEN {
        return format(format!("{what} file is truncated"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - CRC_LEN);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return format(format!("{what} file failed its CRC check"));
    }
    Ok(body)
}

/// Cursor over a byte slice with little-endian readers.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return format(format!("{} file is truncated", self.what));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return format(format!("not a {} file (bad magic)", self.what));
        }
        let version = self.u16()?;
        if version != FORMAT_VERSION {
            return format(format!("unsupported {} file version {version}", self.what));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return format(format!(
                "{} file has {} unexpected trailing bytes",
                self.what,
                self.bytes.len() - self.pos
            ));
        }
        Ok(())
    }
}

fn as_u32(v: usize, name: &str) -> Result<u32> {
    u32::try_from(v).or_else(|_| domain(format!("{name} = {v} does not fit in 32 bits")))
}

// ---- model files ----

pub fn model_to_bytes(model: &RqModel) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(34 + model.k() * model.dim() * 4 + CRC_LEN);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&as_u32(model.k(), "K")?.to_le_bytes());
    out.extend_from_slice(&as_u32(model.dim(), "D")?.to_le_bytes());
    out.extend_from_slice(&as_u32(model.levels(), "M")?.to_le_bytes());
    out.extend_from_slice(&model.scale().to_le_bytes());
    out.extend_from_slice(&model.gamma().to_le_bytes());
    for &v in model.codebook().as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(append_crc(out))
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<RqModel> {
    let body = check_crc(bytes, "model")?;
    let mut r = Reader::new(body, "model");
    r.header(MODEL_MAGIC)?;
    let k = r.u32()? as usize;
    let d = r.u32()? as usize;
    let m = r.u32()? as usize;
    let w = r.f64()?;
    let gamma = r.f64()?;
    let expected = k
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .filter(|&n| n == body.len() - r.pos);
    if expected.is_none() {
        return format(format!("model file size does not match K={k}, D={d}"));
    }
    let mut data = Vec::with_capacity(k * d);
    for _ in 0..k * d {
        data.push(f64::from(r.f32()?));
    }
    r.finish()?;
    let codebook = Codebook::new(data, d).map_err(|e| Error::Format(format!("model codebook: {e}")))?;
    RqModel::new(codebook, w, gamma, m).map_err(|e| Error::Format(format!("model header: {e}")))
}

pub fn save_model(path: &Path, model: &RqModel) -> Result<()> {
    write_atomic(path, &model_to_bytes(model)?)
}

pub fn load_model(path: &Path) -> Result<RqModel> {
    model_from_bytes(&fs::read(path)?)
}

// ---- code files ----

/// Raw contents of a code file.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeFile {
    pub levels: usize,
    pub k: usize,
    /// `N x levels`, row-major
    pub codes: Vec<u32>,
    pub recon_sq_norms: Vec<f32>,
}

impl CodeFile {
    pub fn len(&self) -> usize {
        self.recon_sq_norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recon_sq_norms.is_empty()
    }
}

/// Total byte length of a code file holding `n` codes.
pub fn code_file_len(n: usize, levels: usize, k: usize) -> Result<usize> {
    Ok(CODES_HEADER_LEN + n * packed_len(levels, k)? + 4 * n + CRC_LEN)
}

pub fn codes_to_bytes(db: &EncodedDatabase) -> Result<Vec<u8>> {
    let (n, levels, k) = (db.len(), db.levels(), db.model().k());
    let bits = bits_for(k)?;
    let mut out = Vec::with_capacity(code_file_len(n, levels, k)?);
    out.extend_from_slice(CODES_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&as_u32(levels, "M")?.to_le_bytes());
    out.extend_from_slice(&as_u32(k, "K")?.to_le_bytes());
    for i in 0..n {
        pack_into(db.item_codes(i), k, bits, &mut out)?;
    }
    for &v in db.recon_sq_norms() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(append_crc(out))
}

pub fn codes_from_bytes(bytes: &[u8]) -> Result<CodeFile> {
    let body = check_crc(bytes, "code")?;
    let mut r = Reader::new(body, "code");
    r.header(CODES_MAGIC)?;
    let n = r.u64()?;
    let levels = r.u32()? as usize;
    let k = r.u32()? as usize;
    if levels == 0 {
        return format("code file has zero levels");
    }
    let record = packed_len(levels, k).map_err(|e| Error::Format(format!("code header: {e}")))?;
    let n = usize::try_from(n).or_else(|_| format("code count does not fit in memory"))?;
    let expected = n
        .checked_mul(record + 4)
        .and_then(|v| v.checked_add(CODES_HEADER_LEN + CRC_LEN));
    if expected != Some(bytes.len()) {
        return format(format!(
            "code file is {} bytes, expected {} for N={n}, M={levels}, K={k}",
            bytes.len(),
            expected.map_or_else(|| "an overflowing size".to_string(), |v| v.to_string())
        ));
    }
    let mut codes = Vec::with_capacity(n * levels);
    for _ in 0..n {
        let seq = unpack_codes(r.take(record)?, k, levels)?;
        if let Some(bad) = seq.indices().iter().find(|&&b| b as usize >= k) {
            return format(format!("code index {bad} out of range for K={k}"));
        }
        codes.extend_from_slice(seq.indices());
    }
    let mut recon_sq_norms = Vec::with_capacity(n);
    for _ in 0..n {
        recon_sq_norms.push(r.f32()?);
    }
    r.finish()?;
    Ok(CodeFile {
        levels,
        k,
        codes,
        recon_sq_norms,
    })
}

pub fn save_codes(path: &Path, db: &EncodedDatabase) -> Result<()> {
    write_atomic(path, &codes_to_bytes(db)?)
}

pub fn read_code_file(path: &Path) -> Result<CodeFile> {
    codes_from_bytes(&fs::read(path)?)
}

/// Rebuilds a searchable database from a code file and the model it was
/// encoded with.
///
/// The model's level count is replaced by the file's. Norms are recomputed
/// in 64-bit and checked against the stored values.
pub fn database_from_code_file(file: CodeFile, model: &RqModel) -> Result<EncodedDatabase> {
    if file.k != model.k() {
        return domain(format!("code file has K={}, model has K={}", file.k, model.k()));
    }
    let model = model.with_levels(file.levels)?;
    let db = EncodedDatabase::from_codes(&model, file.codes, None)?;
    for (i, (&stored, &fresh)) in file.recon_sq_norms.iter().zip(db.recon_sq_norms()).enumerate() {
        let stored = f64::from(stored);
        if (stored - fresh).abs() > 1e-5 * fresh.abs().max(1.0) {
            return domain(format!(
                "stored norm of item {i} ({stored}) disagrees with the model ({fresh}); \
                 was the code file written with a different model?"
            ));
        }
    }
    Ok(db)
}

pub fn load_codes(path: &Path, model: &RqModel) -> Result<EncodedDatabase> {
    database_from_code_file(read_code_file(path)?, model)
}

// ---- refinement head files ----

pub fn head_to_bytes(head: &RefinementHead) -> Result<Vec<u8>> {
    let (a, b) = head.widths();
    let mut out = Vec::with_capacity(18 + head.params().len() * 8 + CRC_LEN);
    out.extend_from_slice(HEAD_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&as_u32(head.in_dim(), "input dimension")?.to_le_bytes());
    out.extend_from_slice(&as_u32(a, "head width")?.to_le_bytes());
    out.extend_from_slice(&as_u32(b, "head width")?.to_le_bytes());
    for &v in head.params() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(append_crc(out))
}

pub fn head_from_bytes(bytes: &[u8]) -> Result<RefinementHead> {
    let body = check_crc(bytes, "head")?;
    let mut r = Reader::new(body, "head");
    r.header(HEAD_MAGIC)?;
    let in_dim = r.u32()? as usize;
    let a = r.u32()? as usize;
    let b = r.u32()? as usize;
    let count = (body.len() - r.pos) / 8;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        params.push(r.f64()?);
    }
    r.finish()?;
    RefinementHead::from_params(in_dim, a, b, params).map_err(|e| Error::Format(format!("head file: {e}")))
}

pub fn save_head(path: &Path, head: &RefinementHead) -> Result<()> {
    write_atomic(path, &head_to_bytes(head)?)
}

pub fn load_head(path: &Path) -> Result<RefinementHead> {
    head_from_bytes(&fs::read(path)?)
}

// ---- fvecs and labels ----

/// Encodes rows as fvecs records (values narrowed to f32).
pub fn fvecs_to_bytes(features: &FeatureMatrix) -> Result<Vec<u8>> {
    let d = i32::try_from(features.dim()).or_else(|_| domain("dimension does not fit in i32"))?;
    let mut out = Vec::with_capacity(features.rows() * (4 + 4 * features.dim()));
    for row in features.iter_rows() {
        out.extend_from_slice(&d.to_le_bytes());
        for &v in row {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses fvecs records. An empty input needs `expected_dim` to know its
/// dimension; otherwise every record must match it when given.
pub fn fvecs_from_bytes(bytes: &[u8], expected_dim: Option<usize>) -> Result<FeatureMatrix> {
    if bytes.is_empty() {
        return match expected_dim {
            Some(d) => FeatureMatrix::empty(d),
            None => format("empty vector file has no dimension"),
        };
    }
    let mut r = Reader::new(bytes, "vector");
    let mut dim = None;
    let mut data = Vec::new();
    while r.pos < bytes.len() {
        let d = r.u32()? as i32;
        if d <= 0 {
            return format(format!("vector record has non-positive dimension {d}"));
        }
        let d = d as usize;
        match dim {
            None => {
                if let Some(e) = expected_dim {
                    if e != d {
                        return domain(format!("vectors have dimension {d}, expected {e}"));
                    }
                }
                let record = 4 + 4 * d;
                if bytes.len() % record != 0 {
                    return format(format!(
                        "vector file length {} is not a multiple of the {record}-byte record",
                        bytes.len()
                    ));
                }
                data.reserve(bytes.len() / record * d);
                dim = Some(d);
            }
            Some(prev) if prev != d => {
                return format(format!("vector records mix dimensions {prev} and {d}"));
            }
            Some(_) => {}
        }
        for _ in 0..d {
            data.push(f64::from(r.f32()?));
        }
    }
    FeatureMatrix::new(data, dim.unwrap_or(0))
}

pub fn write_fvecs(path: &Path, features: &FeatureMatrix) -> Result<()> {
    write_atomic(path, &fvecs_to_bytes(features)?)
}

pub fn read_fvecs(path: &Path, expected_dim: Option<usize>) -> Result<FeatureMatrix> {
    fvecs_from_bytes(&fs::read(path)?, expected_dim)
}

pub fn labels_to_bytes(sets: &[Vec<i64>]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for set in sets {
        let count = i32::try_from(set.len()).or_else(|_| domain("label set too large"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for &l in set {
            let l = i32::try_from(l).or_else(|_| domain(format!("label {l} does not fit in i32")))?;
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn labels_from_bytes(bytes: &[u8]) -> Result<Vec<Vec<i64>>> {
    let mut r = Reader::new(bytes, "label");
    let mut sets = Vec::new();
    while r.pos < bytes.len() {
        let count = r.u32()? as i32;
        if count < 0 {
            return format(format!("negative label count {count}"));
        }
        let mut set = Vec::with_capacity(count as usize);
        for _ in 0..count {
            set.push(i64::from(r.u32()? as i32));
        }
        sets.push(set);
    }
    Ok(sets)
}

pub fn write_labels(path: &Path, sets: &[Vec<i64>]) -> Result<()> {
    write_atomic(path, &labels_to_bytes(sets)?)
}

pub fn read_labels(path: &Path) -> Result<Vec<Vec<i64>>> {
    labels_from_bytes(&fs::read(path)?)
}

/// Label sets of `features`, one per row, if it carries labels.
pub fn label_sets(features: &FeatureMatrix) -> Option<Vec<Vec<i64>>> {
    (0..features.rows())
        .map(|i| features.label_set(i).map(<[i64]>::to_vec))
        .collect()
}
