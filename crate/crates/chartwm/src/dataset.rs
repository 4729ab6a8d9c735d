//! The on-disk trajectory dataset: magic `CSTJ0001`, little-endian.
//!
//! Layout:
//!
//! ```text
//! magic            8 bytes  "CSTJ0001"
//! B, M, N_sub      u32 each
//! N_traj           u32
//! per trajectory:
//!   T_plus_1       u32
//!   timestamps     f64 * T_plus_1
//!   positions      f32 * T_plus_1 * 3
//!   CSI            f32 * T_plus_1 * B * M * N_sub * 2   (re, im interleaved)
//! ```
//!
//! Timestamps round-trip bit-exactly (f64); positions and CSI are stored at
//! f32 precision. Actions are never stored — they are a pure function of
//! positions and timestamps and are recomputed on load, so a dataset edited
//! on disk can never carry stale velocities.
//!
//! Parsing happens on a byte slice with bounds checks before every
//! allocation, and header counts are sanity-capped so corrupt files fail
//! with a typed error instead of an OOM — this function is also the fuzz
//! entry point for the format.

use std::path::Path;

use crate::error::DataError;
use crate::sim::{actions_from_positions, CsiSnapshot, TrajectoryRecord};

pub const DATASET_MAGIC: &[u8; 8] = b"CSTJ0001";

/// Caps on header-declared counts; far beyond any desk-scale run but small
/// enough to keep a hostile header from requesting terabytes.
const MAX_DIM: u64 = 1 << 20;
const MAX_TRAJ: u64 = 1 << 20;
const MAX_SNAPSHOTS: u64 = 1 << 24;

/// A dataset: shared antenna-grid dimensions plus the trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub b: usize,
    pub m: usize,
    pub n_sub: usize,
    pub trajectories: Vec<TrajectoryRecord>,
}

impl Dataset {
    /// Complex entries per snapshot.
    pub fn entries(&self) -> usize {
        self.b * self.m * self.n_sub
    }

    /// Total snapshot count across trajectories.
    pub fn total_snapshots(&self) -> usize {
        self.trajectories.iter().map(|t| t.snapshots.len()).sum()
    }
}

/// Serialize a dataset to bytes. Fails on an empty trajectory list or any
/// snapshot whose channel tensor disagrees with the header dimensions.
pub fn serialize_dataset(ds: &Dataset) -> Result<Vec<u8>, DataError> {
    if ds.trajectories.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let entries = ds.entries();
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    for v in [ds.b as u32, ds.m as u32, ds.n_sub as u32, ds.trajectories.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (i, traj) in ds.trajectories.iter().enumerate() {
        let t_plus_1 = traj.snapshots.len();
        if t_plus_1 == 0 {
            return Err(DataError::Implausible {
                field: "T_plus_1".to_string(),
                value: 0,
                context: format!("trajectory {i}"),
            });
        }
        out.extend_from_slice(&(t_plus_1 as u32).to_le_bytes());
        for s in &traj.snapshots {
            out.extend_from_slice(&s.t.to_le_bytes());
        }
        for s in &traj.snapshots {
            for ax in 0..3 {
                out.extend_from_slice(&(s.pos[ax] as f32).to_le_bytes());
            }
        }
        for s in &traj.snapshots {
            if s.h.len() != entries * 2 {
                return Err(DataError::TensorShape {
                    name: format!("trajectory {i} CSI"),
                    got: vec![s.h.len()],
                    expected: vec![entries * 2],
                });
            }
            for &v in &s.h {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Cursor over a byte slice: every read is bounds-checked and errors carry
/// what was being read when the data ran out.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8], DataError> {
        if self.buf.len() - self.pos < n {
            return Err(DataError::Truncated { context: context.to_string() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, context: &str) -> Result<u32, DataError> {
        let b = self.take(4, context)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self, context: &str) -> Result<f64, DataError> {
        let b = self.take(8, context)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32(&mut self, context: &str) -> Result<f32, DataError> {
        let b = self.take(4, context)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Parse a dataset from bytes (the inverse of [`serialize_dataset`]).
/// Actions are recomputed from the stored positions and timestamps.
pub fn parse_dataset(bytes: &[u8]) -> Result<Dataset, DataError> {
    let mut r = Reader::new(bytes);
    let magic = r.take(8, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(DataError::BadMagic {
            expected: String::from_utf8_lossy(DATASET_MAGIC).into_owned(),
            got: format!("{:02x?}", magic),
        });
    }
    let b = r.u32("B")? as u64;
    let m = r.u32("M")? as u64;
    let n_sub = r.u32("N_sub")? as u64;
    let n_traj = r.u32("N_traj")? as u64;
    for (field, value, cap) in
        [("B", b, MAX_DIM), ("M", m, MAX_DIM), ("N_sub", n_sub, MAX_DIM), ("N_traj", n_traj, MAX_TRAJ)]
    {
        if value == 0 || value > cap {
            return Err(DataError::Implausible {
                field: field.to_string(),
                value,
                context: "dataset header".to_string(),
            });
        }
    }
    let entries = b
        .checked_mul(m)
        .and_then(|x| x.checked_mul(n_sub))
        .filter(|&e| e <= MAX_DIM)
        .ok_or(DataError::Implausible {
            field: "B*M*N_sub".to_string(),
            value: u64::MAX,
            context: "dataset header".to_string(),
        })? as usize;

    let mut trajectories = Vec::new();
    for ti in 0..n_traj {
        let context = format!("trajectory {ti}");
        let t_plus_1 = r.u32(&context)? as u64;
        if t_plus_1 == 0 || t_plus_1 > MAX_SNAPSHOTS {
            return Err(DataError::Implausible {
                field: "T_plus_1".to_string(),
                value: t_plus_1,
                context,
            });
        }
        // One up-front size check per trajectory so a lying header cannot
        // trigger a huge reservation before the data proves it is there.
        let need = t_plus_1 * 8 + t_plus_1 * 3 * 4 + t_plus_1 * entries as u64 * 2 * 4;
        if (r.buf.len() - r.pos) as u64 > u64::MAX - need
            || (r.buf.len() - r.pos) < usize::try_from(need).unwrap_or(usize::MAX)
        {
            return Err(DataError::Truncated { context });
        }
        let t_plus_1 = t_plus_1 as usize;
        let mut timestamps = Vec::with_capacity(t_plus_1);
        for _ in 0..t_plus_1 {
            timestamps.push(r.f64(&context)?);
        }
        let mut positions = Vec::with_capacity(t_plus_1);
        for _ in 0..t_plus_1 {
            let mut p = [0.0_f64; 3];
            for ax in &mut p {
                *ax = r.f32(&context)? as f64;
            }
            positions.push(p);
        }
        let mut snapshots = Vec::with_capacity(t_plus_1);
        for si in 0..t_plus_1 {
            let mut h = Vec::with_capacity(entries * 2);
            for _ in 0..entries * 2 {
                h.push(r.f32(&context)? as f64);
            }
            snapshots.push(CsiSnapshot { h, pos: positions[si], t: timestamps[si] });
        }
        let actions = if t_plus_1 >= 2 {
            actions_from_positions(&positions, &timestamps).map_err(|e| {
                DataError::Config(format!("{context}: stored trajectory is inconsistent: {e}"))
            })?
        } else {
            Vec::new()
        };
        trajectories.push(TrajectoryRecord { snapshots, actions });
    }
    if !r.done() {
        return Err(DataError::Implausible {
            field: "trailing bytes".to_string(),
            value: (r.buf.len() - r.pos) as u64,
            context: "after last trajectory".to_string(),
        });
    }
    Ok(Dataset { b: b as usize, m: m as usize, n_sub: n_sub as usize, trajectories })
}

/// Write a dataset atomically: serialize, write to a sibling temp file, then
/// rename over the destination.
pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let bytes = serialize_dataset(ds)?;
    atomic_write(path, &bytes)
}

/// Read and parse a dataset file.
pub fn read_dataset(path: &Path) -> Result<Dataset, DataError> {
    let bytes = std::fs::read(path)?;
    parse_dataset(&bytes)
}

/// Write `bytes` to `path` via a temp file + rename in the same directory,
/// so readers never observe a half-written artifact.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let stem = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{stem}.tmp-{}", std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        DataError::Io(e)
    })
}
