//! On-disk formats: trajectory norm tables, binary field dumps and JSON.
//!
//! Field dump layout (little-endian):
//!
//! ```text
//! magic      8 bytes  "SNLSFLD\0"
//! version    u32      1
//! dim        u32
//! n          u32      points per axis
//! reserved   u32      0
//! half_width f64      L, the torus is [−L, L)^d
//! frames     u64
//! frame*     f64 t, then n^d complex values as (re, im) f64 pairs, row-major
//! ```

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::spectral::{ComplexField, Grid};
use crate::trajectory::Trajectory;

pub const FIELD_MAGIC: &[u8; 8] = b"SNLSFLD\0";
pub const FIELD_VERSION: u32 = 1;

pub const TRAJECTORY_HEADER: &str = "t,norm_h,norm_lr";

/// `t, ‖u‖_H, ‖u‖_{L^r}` per step, 17 significant digits.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let mut out = String::with_capacity(64 * (traj.n_steps() + 2));
    out.push_str(TRAJECTORY_HEADER);
    out.push('\n');
    for (j, (h, r)) in traj.h_norms().iter().zip(traj.r_norms()).enumerate() {
        out.push_str(&format!("{:.16e},{:.16e},{:.16e}\n", traj.time(j), h, r));
    }
    out
}

/// Writes every `stride`-th stored field (and always the last).
pub fn write_field_dump(w: &mut impl Write, traj: &Trajectory, stride: usize) -> Result<()> {
    if stride == 0 {
        return Err(Error::param("stride", "must be ≥ 1"));
    }
    let frames: Vec<(f64, &ComplexField)> = if traj.is_full() {
        let n = traj.n_steps();
        let mut idx: Vec<usize> = (0..=n).step_by(stride).collect();
        if idx.last() != Some(&n) {
            idx.push(n);
        }
        idx.into_iter().map(|j| (traj.time(j), &traj.fields()[j])).collect()
    } else {
        vec![(0.0, traj.initial()), (traj.horizon(), traj.terminal())]
    };
    let grid = traj.grid();
    let mut w = BufWriter::new(w);
    w.write_all(FIELD_MAGIC)?;
    for v in [FIELD_VERSION, grid.dim() as u32, grid.n_per_dim() as u32, 0] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&grid.half_width().to_le_bytes())?;
    w.write_all(&(frames.len() as u64).to_le_bytes())?;
    for (t, f) in frames {
        w.write_all(&t.to_le_bytes())?;
        for z in f.data() {
            w.write_all(&z.re.to_le_bytes())?;
            w.write_all(&z.im.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Reads a dump back as `(grid, [(t, field)])`.
pub fn read_field_dump(r: &mut impl Read) -> Result<(Grid, Vec<(f64, ComplexField)>)> {
    if &take::<8>(r)? != FIELD_MAGIC {
        return Err(Error::Precondition("not a field dump (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(r)?);
    if version != FIELD_VERSION {
        return Err(Error::Precondition(format!("unsupported field dump version {version}")));
    }
    let dim = u32::from_le_bytes(take(r)?) as usize;
    let n = u32::from_le_bytes(take(r)?) as usize;
    let _reserved = u32::from_le_bytes(take(r)?);
    let half_width = f64::from_le_bytes(take(r)?);
    let frames = u64::from_le_bytes(take(r)?);
    let grid = Grid::new(dim, n, half_width)?;
    let mut out = Vec::with_capacity(frames as usize);
    for _ in 0..frames {
        let t = f64::from_le_bytes(take(r)?);
        let mut data = Vec::with_capacity(grid.len());
        for _ in 0..grid.len() {
            let re = f64::from_le_bytes(take(r)?);
            let im = f64::from_le_bytes(take(r)?);
            data.push(Complex64::new(re, im));
        }
        out.push((t, ComplexField::from_vec(grid, data)?));
    }
    Ok((grid, out))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Precondition(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}
