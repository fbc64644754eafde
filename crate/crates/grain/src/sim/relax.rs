//! Hysteretic avalanche relaxation.
//!
//! Two thresholds drive the cascade: a resting cell fails once its effective
//! gradient exceeds tan(θ_m); a failing (active) cell keeps shedding material
//! until every outgoing drop is at most tan(θ_r). A shedding cell transfers
//! `relax_fraction` of the height excess over the repose gradient toward each
//! neighbor that sits below repose relative to it (diagonals scaled by their
//! center distance), so avalanche lobes spread laterally as well as
//! downslope. With the fraction capped at 0.5 a transfer can never invert
//! the local drop, every transfer strictly lowers potential energy, and the
//! loop terminates.
//!
//! Sweeps run in row-major order over the cells whose gradients may have
//! changed since they were last examined (a transfer only disturbs the cells
//! involved and their neighbors).

use super::{FlowField, SlopeState};
use crate::error::{Error, Result};
use crate::geom::Vec2;

/// Hard cap on relaxation sweeps; exceeding it signals bad parameters.
const MAX_SWEEPS: usize = 1_000_000;

/// Gradients within this margin of a threshold count as at the threshold.
/// Matches the stability tolerance: after relax every previously active cell
/// sits at or below tan(θ_r) + 1e-6.
pub(crate) const GRAD_EPS: f64 = 1e-6;

const DIAG: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Neighbor offsets in tie-break order: downslope, the downslope diagonals,
/// the sides, the upslope diagonals, upslope.
const OFFSETS: [(isize, isize); 8] = [
    (1, 0),
    (1, 1),
    (1, -1),
    (0, 1),
    (0, -1),
    (-1, 1),
    (-1, -1),
    (-1, 0),
];

/// Unit direction on the slope plane per neighbor slot.
const DIRS: [Vec2; 8] = [
    Vec2 { x: 0.0, y: 1.0 },
    Vec2 { x: DIAG, y: DIAG },
    Vec2 { x: -DIAG, y: DIAG },
    Vec2 { x: 1.0, y: 0.0 },
    Vec2 { x: -1.0, y: 0.0 },
    Vec2 { x: DIAG, y: -DIAG },
    Vec2 { x: -DIAG, y: -DIAG },
    Vec2 { x: 0.0, y: -1.0 },
];

/// Center distance per neighbor slot, in cells.
const DIST_CELLS: [f64; 8] = [
    1.0,
    std::f64::consts::SQRT_2,
    std::f64::consts::SQRT_2,
    1.0,
    1.0,
    std::f64::consts::SQRT_2,
    std::f64::consts::SQRT_2,
    1.0,
];

/// Sign of the base-plane contribution per neighbor slot (downslope rows sit
/// lower by tan(Φ)·cell).
const BASE_SIGN: [f64; 8] = [1.0, 1.0, 1.0, 0.0, 0.0, -1.0, -1.0, -1.0];

impl SlopeState {
    /// Relax the bed until no active cell exceeds the repose gradient.
    /// Returns the volumetric flux of all transfers. Calling `relax` on an
    /// already-relaxed bed returns a zero field.
    pub fn relax(&mut self) -> Result<FlowField> {
        let (rows, cols) = (self.rows(), self.cols());
        let mut flow = FlowField::zeros(rows, cols);
        let tan_m = self.material().tan_max_stable();
        let tan_r = self.material().tan_repose();
        let cell = self.cell_size();
        let cell_area = cell * cell;
        let fraction = self.material().relax_fraction;

        // Fresh failures anywhere in the bed join the cells already marked
        // active by the caller (e.g. the excavation footprint).
        for r in 0..rows {
            for c in 0..cols {
                if self.max_drop(r, c) > tan_m + GRAD_EPS {
                    self.activate(r, c);
                }
            }
        }

        let mut dirty: Vec<usize> = self.active.clone();
        let mut dirty_mask = vec![false; rows * cols];
        for &idx in &dirty {
            dirty_mask[idx] = true;
        }

        let mut drops = [0.0f64; 8];
        let mut sweeps = 0usize;
        while !dirty.is_empty() {
            sweeps += 1;
            if sweeps > MAX_SWEEPS {
                self.clear_active();
                return Err(Error::Divergence(format!(
                    "relaxation exceeded {MAX_SWEEPS} sweeps"
                )));
            }

            dirty.sort_unstable();
            dirty.dedup();
            let worklist = std::mem::take(&mut dirty);
            for &idx in &worklist {
                dirty_mask[idx] = false;
            }

            for idx in worklist {
                let (r, c) = (idx / cols, idx % cols);
                let valid = self.drops_into(r, c, &mut drops);

                let mut qualifying = 0usize;
                for k in 0..8 {
                    if valid & (1 << k) != 0 && drops[k] > tan_r + GRAD_EPS {
                        qualifying += 1;
                    }
                }
                if qualifying == 0 {
                    continue;
                }

                // Amounts are computed against the pre-transfer heights. The
                // per-neighbor fraction is divided by the qualifying count so
                // the cell sheds at most `fraction` of its largest excess,
                // and the total debit is clamped to the column height.
                let share = fraction / qualifying as f64;
                let mut amounts = [0.0f64; 8];
                let mut total = 0.0;
                for k in 0..8 {
                    if valid & (1 << k) != 0 && drops[k] > tan_r + GRAD_EPS {
                        amounts[k] = share * (drops[k] - tan_r) * DIST_CELLS[k] * cell;
                        total += amounts[k];
                    }
                }
                let available = self.height(r, c);
                if total <= 0.0 || available <= 0.0 {
                    continue;
                }
                let scale = if total > available { available / total } else { 1.0 };

                let mut debited = 0.0;
                for k in 0..8 {
                    if amounts[k] == 0.0 {
                        continue;
                    }
                    let nr = (r as isize + OFFSETS[k].0) as usize;
                    let nc = (c as isize + OFFSETS[k].1) as usize;
                    let amount = amounts[k] * scale;
                    debited += amount;
                    *self.heights.at_mut(nr, nc) += amount;
                    let moved = DIRS[k].scale(amount * cell_area);
                    flow.add(r, c, moved);
                    flow.add(nr, nc, moved);
                }
                *self.heights.at_mut(r, c) -= debited;
                // Every height change lies in the 3x3 block around the
                // source, so the 5x5 block covers all affected gradients.
                self.mark_disturbed(r, c, tan_m, &mut dirty, &mut dirty_mask);
            }
        }

        self.clear_active();
        Ok(flow)
    }

    /// Fill `out` with one-sided drops to the 8 neighbors; bit k of the
    /// return value marks slot k as in-bounds.
    #[inline]
    fn drops_into(&self, r: usize, c: usize, out: &mut [f64; 8]) -> u8 {
        let cols = self.cols();
        let rows = self.rows();
        let h = self.heights.as_slice();
        let idx = r * cols + c;
        let h0 = h[idx];
        let tc = self.tan_incline * self.cell_size();
        let inv_cell = 1.0 / self.cell_size();
        let inv_diag = inv_cell * DIAG;

        if r >= 1 && r + 1 < rows && c >= 1 && c + 1 < cols {
            // Interior: all 8 neighbors exist.
            let dn = idx + cols;
            let up = idx - cols;
            out[0] = (h0 - h[dn] + tc) * inv_cell;
            out[1] = (h0 - h[dn + 1] + tc) * inv_diag;
            out[2] = (h0 - h[dn - 1] + tc) * inv_diag;
            out[3] = (h0 - h[idx + 1]) * inv_cell;
            out[4] = (h0 - h[idx - 1]) * inv_cell;
            out[5] = (h0 - h[up + 1] - tc) * inv_diag;
            out[6] = (h0 - h[up - 1] - tc) * inv_diag;
            out[7] = (h0 - h[up] - tc) * inv_cell;
            return 0xff;
        }

        let mut valid = 0u8;
        for (k, &(dr, dc)) in OFFSETS.iter().enumerate() {
            let nr = r as isize + dr;
            let nc = c as isize + dc;
            if nr < 0 || nc < 0 || nr >= rows as isize || nc >= cols as isize {
                continue;
            }
            let nidx = nr as usize * cols + nc as usize;
            let inv = if dr != 0 && dc != 0 { inv_diag } else { inv_cell };
            out[k] = (h0 - h[nidx] + BASE_SIGN[k] * tc) * inv;
            valid |= 1 << k;
        }
        valid
    }

    /// Largest one-sided drop at a cell (0 when every neighbor is higher).
    #[inline]
    pub(super) fn max_drop(&self, r: usize, c: usize) -> f64 {
        let mut drops = [0.0f64; 8];
        let valid = self.drops_into(r, c, &mut drops);
        let mut best = 0.0f64;
        for k in 0..8 {
            if valid & (1 << k) != 0 && drops[k] > best {
                best = drops[k];
            }
        }
        best
    }

    /// Steepest one-sided descent over the 4 axial neighbors, for the public
    /// effective-gradient operation.
    pub(super) fn steepest(&self, r: usize, c: usize) -> Option<(Vec2, f64)> {
        let mut drops = [0.0f64; 8];
        let valid = self.drops_into(r, c, &mut drops);
        let mut best: Option<(Vec2, f64)> = None;
        // Axial slots: downslope, right, left, up.
        for k in [0usize, 3, 4, 7] {
            if valid & (1 << k) != 0 && drops[k] > best.map_or(0.0, |b| b.1) {
                best = Some((DIRS[k], drops[k]));
            }
        }
        best
    }

    /// A shed from `(row, col)` changes heights only inside the 3x3 block
    /// around it, so gradients change only inside the 5x5 block: re-examine
    /// active cells there next sweep, and activate resting ones that now
    /// exceed the failure gradient.
    fn mark_disturbed(
        &mut self,
        row: usize,
        col: usize,
        tan_m: f64,
        dirty: &mut Vec<usize>,
        dirty_mask: &mut [bool],
    ) {
        let (rows, cols) = (self.rows(), self.cols());
        let r0 = row.saturating_sub(2);
        let r1 = (row + 2).min(rows - 1);
        let c0 = col.saturating_sub(2);
        let c1 = (col + 2).min(cols - 1);
        for nr in r0..=r1 {
            for nc in c0..=c1 {
                let idx = nr * cols + nc;
                if dirty_mask[idx] {
                    continue;
                }
                if self.active_mask.get(nr, nc) {
                    dirty_mask[idx] = true;
                    dirty.push(idx);
                } else if self.max_drop(nr, nc) > tan_m + GRAD_EPS {
                    self.activate(nr, nc);
                    dirty_mask[idx] = true;
                    dirty.push(idx);
                }
            }
        }
    }
}
