//! Flat binary slope snapshots: a fixed header (rows, cols as u64; then
//! cell_size, incline_deg, repose_deg, max_stable_deg as f64) followed by the
//! row-major f64 heights. All values little-endian.

use std::io::{Read, Write};

use super::{MaterialParams, SlopeState};
use crate::error::{Error, Result};
use crate::grid::Grid;

pub fn write_snapshot<W: Write>(state: &SlopeState, mut w: W) -> Result<()> {
    w.write_all(&(state.rows() as u64).to_le_bytes())?;
    w.write_all(&(state.cols() as u64).to_le_bytes())?;
    w.write_all(&state.cell_size().to_le_bytes())?;
    w.write_all(&state.incline_deg().to_le_bytes())?;
    w.write_all(&state.material().repose_deg.to_le_bytes())?;
    w.write_all(&state.material().max_stable_deg.to_le_bytes())?;
    for &h in state.heights().as_slice() {
        w.write_all(&h.to_le_bytes())?;
    }
    Ok(())
}

/// Read a snapshot back. The header carries only the angles, so the
/// remaining material constants come from `material`; its repose and
/// max-stable fields are overwritten by the stored values.
pub fn read_snapshot<R: Read>(mut r: R, material: MaterialParams) -> Result<SlopeState> {
    let rows = read_u64(&mut r)? as usize;
    let cols = read_u64(&mut r)? as usize;
    if rows == 0 || cols == 0 || rows.saturating_mul(cols) > 64_000_000 {
        return Err(Error::Format(format!(
            "implausible snapshot dimensions {rows}x{cols}"
        )));
    }
    let cell_size = read_f64(&mut r)?;
    let incline_deg = read_f64(&mut r)?;
    let repose_deg = read_f64(&mut r)?;
    let max_stable_deg = read_f64(&mut r)?;
    let mut heights = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        heights.push(read_f64(&mut r)?);
    }
    let material = MaterialParams {
        repose_deg,
        max_stable_deg,
        ..material
    };
    SlopeState::from_parts(Grid::from_vec(rows, cols, heights)?, cell_size, incline_deg, material)
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::ExcavationAction;
    use crate::geom::Vec2;

    #[test]
    fn snapshot_round_trip() {
        let mut state = SlopeState::init_slope(18.0, 24, 24, 0.5, 5.0).unwrap();
        state
            .excavate(&ExcavationAction {
                index: 0,
                center: Vec2::new(6.0, 3.0),
                footprint_side: 6.0,
            })
            .unwrap();
        let mut buf = Vec::new();
        write_snapshot(&state, &mut buf).unwrap();
        let loaded = read_snapshot(buf.as_slice(), MaterialParams::default()).unwrap();
        assert_eq!(loaded.heights(), state.heights());
        assert_eq!(loaded.incline_deg(), state.incline_deg());
        assert_eq!(loaded.cell_size(), state.cell_size());
    }

    #[test]
    fn truncated_snapshot_is_rejected() {
        let state = SlopeState::init_slope(18.0, 8, 8, 0.5, 5.0).unwrap();
        let mut buf = Vec::new();
        write_snapshot(&state, &mut buf).unwrap();
        buf.truncate(buf.len() - 4);
        assert!(read_snapshot(buf.as_slice(), MaterialParams::default()).is_err());
    }
}
