//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "EFV2"
//! version u32      currently 1
//! step    u64      number of optimizer steps taken
//! rng     u32 len + blob (the run's base seed, 8 bytes)
//! records repeated to EOF:
//!   name length u64, UTF-8 name,
//!   dtype tag u8 (1 = f32, 2 = f64),
//!   rank u64, dims rank x u64,
//!   payload: product(dims) scalars, little-endian
//! ```
//!
//! Saving writes to a temporary file in the target directory and renames it
//! into place, so a crash mid-write never corrupts an existing checkpoint.
//! Loading validates every length before trusting it; a truncated or
//! malformed file produces an error naming the path and leaves the file
//! untouched.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar};

const MAGIC: &[u8; 4] = b"EFV2";
const VERSION: u32 = 1;

/// Largest element count accepted for a single record (1 GiB of f64s); a
/// corrupt length field fails fast instead of attempting the allocation.
const MAX_RECORD_LEN: u64 = 1 << 27;

/// One named state blob: a parameter, an optimizer slot, an EMA shadow, a
/// batch-norm statistic, or a trainer scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<u64>,
    /// Raw little-endian payload, kept as bytes so round trips are byte-exact.
    pub bytes: Vec<u8>,
}

impl Record {
    pub fn from_scalars<T: Scalar>(name: impl Into<String>, dims: Vec<u64>, values: &[T]) -> Record {
        debug_assert_eq!(dims.iter().product::<u64>() as usize, values.len());
        let mut bytes = Vec::with_capacity(values.len() * T::DTYPE.size_bytes());
        for &v in values {
            v.write_le(&mut bytes);
        }
        Record { name: name.into(), dtype: T::DTYPE, dims, bytes }
    }

    /// Decode the payload; the requested scalar type must match the stored
    /// dtype (checkpoints are precision-exact, never silently converted).
    pub fn to_scalars<T: Scalar>(&self) -> Result<Vec<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::CheckpointMismatch(format!(
                "record {} holds {} but {} was requested",
                self.name,
                self.dtype,
                T::DTYPE
            )));
        }
        let size = self.dtype.size_bytes();
        Ok(self.bytes.chunks_exact(size).map(T::read_le).collect())
    }

    pub fn num_elements(&self) -> u64 {
        self.dims.iter().product()
    }
}

/// Full training state at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub step: u64,
    pub seed: u64,
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn new(step: u64, seed: u64) -> Checkpoint {
        Checkpoint { version: VERSION, step, seed, records: Vec::new() }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, dims: Vec<u64>, values: &[T]) {
        self.records.push(Record::from_scalars(name, dims, values));
    }

    pub fn find(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    /// Look up a record or fail with its name (for mandatory state).
    pub fn require(&self, name: &str) -> Result<&Record> {
        self.find(name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing record {name}")))
    }

    fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.records.iter().map(|r| r.bytes.len() + r.name.len() + 64).sum();
        let mut out = Vec::with_capacity(32 + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&8u32.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u64).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.dtype.tag());
            out.extend_from_slice(&(r.dims.len() as u64).to_le_bytes());
            for &d in &r.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&r.bytes);
        }
        out
    }

    /// Atomic save: temp file in the destination directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&self.to_bytes())?;
        tmp.flush()?;
        tmp.persist(path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            detail: format!("could not replace file: {}", e.error),
        })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            detail: format!("read failed: {e}"),
        })?;
        parse(&bytes).map_err(|detail| Error::Checkpoint { path: path.to_path_buf(), detail })
    }
}

/// Cursor over the raw bytes; every take is bounds-checked so a truncated
/// file reports exactly what was being read when the bytes ran out.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        if self.bytes.len() - self.pos < n {
            return Err(format!(
                "truncated while reading {what}: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn parse(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(format!("bad magic {magic:02x?}, expected {MAGIC:02x?}"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(format!("unsupported version {version}, expected {VERSION}"));
    }
    let step = r.u64("step")?;
    let rng_len = r.u32("rng blob length")?;
    if rng_len != 8 {
        return Err(format!("rng blob length {rng_len}, expected 8"));
    }
    let seed = u64::from_le_bytes(r.take(8, "rng blob")?.try_into().unwrap());
    let mut records = Vec::new();
    while !r.done() {
        let name_len = r.u64("record name length")?;
        if name_len > 4096 {
            return Err(format!("record name length {name_len} is implausible"));
        }
        let name = std::str::from_utf8(r.take(name_len as usize, "record name")?)
            .map_err(|e| format!("record name is not UTF-8: {e}"))?
            .to_string();
        let tag = r.take(1, "dtype tag")?[0];
        let dtype = DType::from_tag(tag).ok_or(format!("unknown dtype tag {tag} in record {name}"))?;
        let rank = r.u64("rank")?;
        if rank > 8 {
            return Err(format!("record {name} has implausible rank {rank}"));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        let mut len: u64 = 1;
        for _ in 0..rank {
            let d = r.u64("dim")?;
            len = len
                .checked_mul(d)
                .filter(|&l| l <= MAX_RECORD_LEN)
                .ok_or(format!("record {name} payload length overflows"))?;
            dims.push(d);
        }
        let payload = r.take(len as usize * dtype.size_bytes(), "payload")?;
        records.push(Record { name, dtype, dims, bytes: payload.to_vec() });
    }
    Ok(Checkpoint { version, step, seed, records })
}

/// Path for the checkpoint written at `step` under `dir`.
pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:08}.efv2"))
}
