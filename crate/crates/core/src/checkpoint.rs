//! Binary checkpoints of solver states.
//!
//! Layout (little-endian): magic `BFC1`, `u32` dimension, one `u32` point
//! count per axis, one `f64` box length per axis, `f64` time, `u32` field
//! count, then each field as a row-major `f64` array in the order
//! `c⁺, u⁺₁..u⁺_N, c⁻, u⁻₁..u⁻_N`.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::grid::{Grid, GridError};
use crate::solver::{SolverError, State};

pub const MAGIC: &[u8; 4] = b"BFC1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic {0:?})")]
    Magic([u8; 4]),
    #[error("corrupt header: {0}")]
    Header(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    State(#[from] SolverError),
}

/// Grid geometry and state read back from a checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub points: Vec<usize>,
    pub lengths: Vec<f64>,
    pub state: State,
}

impl Checkpoint {
    /// Rebuild the grid with the given dealiasing fraction.
    pub fn grid(&self, dealias: f64) -> Result<Grid, GridError> {
        Grid::new(self.points.clone(), self.lengths.clone(), dealias)
    }
}

pub fn write_to<W: Write>(mut w: W, grid: &Grid, state: &State) -> Result<(), CheckpointError> {
    state.check_shape(grid)?;
    w.write_all(MAGIC)?;
    w.write_all(&(grid.dims() as u32).to_le_bytes())?;
    for &n in grid.points() {
        w.write_all(&(n as u32).to_le_bytes())?;
    }
    for &l in grid.lengths() {
        w.write_all(&l.to_le_bytes())?;
    }
    w.write_all(&state.time.to_le_bytes())?;
    let fields = state.fields();
    w.write_all(&(fields.len() as u32).to_le_bytes())?;
    for f in fields {
        let mut buf = Vec::with_capacity(8 * f.len());
        for v in f {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn read_from<R: Read>(mut r: R) -> Result<Checkpoint, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Magic(magic));
    }
    let dims = read_u32(&mut r)? as usize;
    if !(1..=3).contains(&dims) {
        return Err(CheckpointError::Header(format!("dimension {dims}")));
    }
    let points = (0..dims).map(|_| read_u32(&mut r).map(|n| n as usize)).collect::<io::Result<Vec<_>>>()?;
    let lengths = (0..dims).map(|_| read_f64(&mut r)).collect::<io::Result<Vec<_>>>()?;
    let time = read_f64(&mut r)?;
    let count = read_u32(&mut r)? as usize;
    if count != 2 * dims + 2 {
        return Err(CheckpointError::Header(format!("{count} fields for dimension {dims}")));
    }
    let len = points.iter().try_fold(1usize, |acc, &n| acc.checked_mul(n));
    let len = len.ok_or_else(|| CheckpointError::Header("grid size overflows".into()))?;
    let mut fields = Vec::with_capacity(count);
    let mut buf = vec![0u8; 8 * len];
    for _ in 0..count {
        r.read_exact(&mut buf)?;
        fields.push(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect());
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(CheckpointError::Header("trailing bytes".into()));
    }
    let state = State::from_fields(fields, time)?;
    Ok(Checkpoint { points, lengths, state })
}

pub fn save(path: &Path, grid: &Grid, state: &State) -> Result<(), CheckpointError> {
    write_to(BufWriter::new(File::create(path)?), grid, state)
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    read_from(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (Grid, State) {
        let g = Grid::new(vec![32, 16], vec![3.0, 1.5], 2.0 / 3.0).unwrap();
        let mut s = State::zeros(&g);
        for m in 0..g.len() {
            s.c_plus[m] = (m as f64).sin();
            s.c_minus[m] = -1e-300 * m as f64;
            s.u_plus[0][m] = m as f64;
            s.u_plus[1][m] = f64::MIN_POSITIVE;
            s.u_minus[1][m] = 0.1 * m as f64;
        }
        s.time = 12.5;
        (g, s)
    }

    #[test]
    fn round_trip_is_exact() {
        let (g, s) = sample();
        let mut bytes = Vec::new();
        write_to(&mut bytes, &g, &s).unwrap();
        assert_eq!(bytes.len(), 4 + 4 + 2 * 4 + 2 * 8 + 8 + 4 + 6 * 8 * 512);
        let cp = read_from(bytes.as_slice()).unwrap();
        assert_eq!(cp.points, vec![32, 16]);
        assert_eq!(cp.lengths, vec![3.0, 1.5]);
        assert_eq!(cp.state, s);
    }

    #[test]
    fn file_round_trip() {
        let (g, s) = sample();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("state.bfc");
        save(&p, &g, &s).unwrap();
        let cp = load(&p).unwrap();
        assert_eq!(cp.state, s);
        assert_eq!(cp.grid(2.0 / 3.0).unwrap().points(), g.points());
    }

    #[test]
    fn rejects_bad_input() {
        let (g, s) = sample();
        let mut bytes = Vec::new();
        write_to(&mut bytes, &g, &s).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_from(bad.as_slice()), Err(CheckpointError::Magic(_))));
        assert!(matches!(read_from(&bytes[..bytes.len() - 3]), Err(CheckpointError::Io(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(read_from(long.as_slice()), Err(CheckpointError::Header(_))));
        let other = Grid::cubic(2, 16, 1.0, 2.0 / 3.0).unwrap();
        assert!(write_to(Vec::new(), &other, &s).is_err());
    }
}
