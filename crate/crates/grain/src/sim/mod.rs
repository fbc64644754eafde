//! Mass-conserving heightfield simulator of an inclined granular bed.
//!
//! The bed is a row-major grid of material depths (cm above the tank floor)
//! on a plane inclined by `incline_deg`. Excavations scoop material out of a
//! square leg footprint and dump it just downslope; the resulting
//! oversteepened cells relax through a two-angle hysteretic avalanche rule
//! (cells fail above the static angle, keep flowing until they drop below
//! the dynamic repose angle). Obstacles ride the surface passively and are
//! advected by the volumetric flux the avalanche produces under their
//! footprint.

mod actions;
pub mod relax;
mod snapshot;

pub use actions::{action_grid, ACTIONS_ACROSS, ACTIONS_ALONG};
pub use snapshot::{read_snapshot, write_snapshot};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::grid::Grid;

/// Steepest permitted incline for the trackway hardware.
pub const MAX_INCLINE_DEG: f64 = 35.0;

/// Material and interaction constants for one bed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialParams {
    /// Dynamic repose angle θ_r (deg): flowing cells settle at this gradient.
    pub repose_deg: f64,
    /// Static failure angle θ_m (deg): resting cells fail above this gradient.
    pub max_stable_deg: f64,
    /// Fraction of the excess height moved per relaxation sweep.
    pub relax_fraction: f64,
    /// Depth of material removed by one excavation cycle (cm).
    pub scoop_depth: f64,
    /// Obstacle transport gain: displacement (cm) per unit mean flux (cm^3).
    pub transport_gain: f64,
}

impl Default for MaterialParams {
    fn default() -> Self {
        MaterialParams {
            repose_deg: 20.0,
            max_stable_deg: 21.5,
            relax_fraction: 0.5,
            scoop_depth: 2.0,
            transport_gain: 0.65,
        }
    }
}

impl MaterialParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.repose_deg > 0.0 && self.repose_deg < 90.0) {
            return Err(Error::Config(format!(
                "repose_deg must be in (0, 90), got {}",
                self.repose_deg
            )));
        }
        if self.max_stable_deg <= self.repose_deg {
            return Err(Error::Config(format!(
                "max_stable_deg ({}) must exceed repose_deg ({}) for a hysteresis band",
                self.max_stable_deg, self.repose_deg
            )));
        }
        if !(self.relax_fraction > 0.0 && self.relax_fraction <= 0.5) {
            return Err(Error::Config(format!(
                "relax_fraction must be in (0, 0.5], got {}",
                self.relax_fraction
            )));
        }
        if self.scoop_depth <= 0.0 || self.transport_gain <= 0.0 {
            return Err(Error::Config(
                "scoop_depth and transport_gain must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn tan_repose(&self) -> f64 {
        self.repose_deg.to_radians().tan()
    }

    pub fn tan_max_stable(&self) -> f64 {
        self.max_stable_deg.to_radians().tan()
    }
}

/// Per-cell volumetric flux accumulated over one operation (cm^3, signed by
/// direction on the slope plane). Both the donor and the receiver of a
/// transfer record the moved volume along the transfer direction.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    flux: Grid<Vec2>,
}

impl FlowField {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        FlowField {
            flux: Grid::filled(rows, cols, Vec2::ZERO),
        }
    }

    pub fn rows(&self) -> usize {
        self.flux.rows()
    }

    pub fn cols(&self) -> usize {
        self.flux.cols()
    }

    pub fn get(&self, row: usize, col: usize) -> Vec2 {
        self.flux.get(row, col)
    }

    pub(crate) fn add(&mut self, row: usize, col: usize, v: Vec2) {
        *self.flux.at_mut(row, col) += v;
    }

    pub fn merge(&mut self, other: &FlowField) {
        for (i, v) in other.flux.as_slice().iter().enumerate() {
            self.flux.as_mut_slice()[i] += *v;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.flux
            .as_slice()
            .iter()
            .all(|v| v.x == 0.0 && v.y == 0.0)
    }

    /// Sum of |flux| over all cells.
    pub fn total_magnitude(&self) -> f64 {
        self.flux.as_slice().iter().map(|v| v.norm()).sum()
    }

    /// Sum of |flux| over cells strictly below `row` (downslope of it).
    pub fn magnitude_below_row(&self, row: usize) -> f64 {
        let mut total = 0.0;
        for r in (row + 1)..self.flux.rows() {
            for c in 0..self.flux.cols() {
                total += self.flux.get(r, c).norm();
            }
        }
        total
    }
}

/// Rigid obstacle profile used by the depth renderer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObstacleShape {
    /// Hemispherical cap (the training obstacle).
    Hemisphere,
    /// Flat-topped disk standing in for the cuboid.
    FlatDisk,
    /// Five-pointed star mask with a spherical profile.
    Star,
}

/// Rigid body riding the granular surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub id: u32,
    /// Center on the slope plane (cm).
    pub pos: Vec2,
    /// Footprint radius (cm).
    pub radius: f64,
    /// Mass relative to the reference obstacle.
    pub mass_ratio: f64,
    /// Flow-coupling multiplier in (0, 2].
    pub shape_coupling: f64,
    pub shape: ObstacleShape,
}

impl Obstacle {
    /// The 5 cm diameter hemisphere used for data collection.
    pub fn reference(id: u32, pos: Vec2) -> Self {
        Obstacle {
            id,
            pos,
            radius: 2.5,
            mass_ratio: 1.0,
            shape_coupling: 1.0,
            shape: ObstacleShape::Hemisphere,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.radius <= 0.0 || self.mass_ratio <= 0.0 {
            return Err(Error::Config(format!(
                "obstacle {}: radius and mass_ratio must be positive",
                self.id
            )));
        }
        if !(self.shape_coupling > 0.0 && self.shape_coupling <= 2.0) {
            return Err(Error::Config(format!(
                "obstacle {}: shape_coupling must be in (0, 2], got {}",
                self.id, self.shape_coupling
            )));
        }
        Ok(())
    }

    /// Grid cells whose centers lie inside the footprint disk.
    pub fn footprint_cells(&self, rows: usize, cols: usize, cell_size: f64) -> Vec<(usize, usize)> {
        footprint_disk_cells(self.pos, self.radius, rows, cols, cell_size)
    }

    /// Height of the rigid cap above the local surface at a planar offset
    /// from the obstacle center, or 0 outside the solid.
    pub fn cap_height(&self, offset: Vec2) -> f64 {
        let d = offset.norm();
        if d > self.radius {
            return 0.0;
        }
        match self.shape {
            ObstacleShape::Hemisphere => (self.radius * self.radius - d * d).sqrt(),
            ObstacleShape::FlatDisk => self.radius,
            ObstacleShape::Star => {
                if star_mask_contains(offset, self.radius) {
                    (self.radius * self.radius - d * d).sqrt()
                } else {
                    0.0
                }
            }
        }
    }
}

/// Cells whose centers lie within `radius` of `center`.
pub fn footprint_disk_cells(
    center: Vec2,
    radius: f64,
    rows: usize,
    cols: usize,
    cell_size: f64,
) -> Vec<(usize, usize)> {
    let mut cells = Vec::new();
    let r_lo = (((center.y - radius) / cell_size - 0.5).ceil().max(0.0)) as usize;
    let r_hi = ((center.y + radius) / cell_size - 0.5).floor();
    let c_lo = (((center.x - radius) / cell_size - 0.5).ceil().max(0.0)) as usize;
    let c_hi = ((center.x + radius) / cell_size - 0.5).floor();
    if r_hi < 0.0 || c_hi < 0.0 {
        return cells;
    }
    let r_hi = (r_hi as usize).min(rows.saturating_sub(1));
    let c_hi = (c_hi as usize).min(cols.saturating_sub(1));
    for r in r_lo..=r_hi {
        for c in c_lo..=c_hi {
            let cc = cell_center(r, c, cell_size);
            if cc.distance(center) <= radius {
                cells.push((r, c));
            }
        }
    }
    cells
}

/// Membership test for a regular five-pointed star inscribed in the disk of
/// radius `radius`, one point aimed upslope.
fn star_mask_contains(offset: Vec2, radius: f64) -> bool {
    let d = offset.norm();
    if d <= radius * 0.38 {
        return true;
    }
    if d > radius {
        return false;
    }
    // Boundary radius varies with angle between an outer point and the inner
    // pentagon vertex; fold the angle into one of the 5 symmetric sectors.
    let inner = radius * 0.38;
    let theta = offset.y.atan2(offset.x) + std::f64::consts::FRAC_PI_2; // 0 at the upslope point
    let sector = std::f64::consts::TAU / 5.0;
    let mut a = theta.rem_euclid(sector);
    if a > sector / 2.0 {
        a = sector - a;
    }
    // Linear interpolation of the star edge between outer point (a = 0) and
    // inner vertex (a = sector/2) in polar form.
    let t = a / (sector / 2.0);
    let edge = radius + (inner - radius) * t;
    d <= edge
}

#[inline]
pub fn cell_center(row: usize, col: usize, cell_size: f64) -> Vec2 {
    Vec2::new((col as f64 + 0.5) * cell_size, (row as f64 + 0.5) * cell_size)
}

/// Cell containing a planar position, clamped to the grid.
#[inline]
pub fn cell_of(pos: Vec2, rows: usize, cols: usize, cell_size: f64) -> (usize, usize) {
    let r = (pos.y / cell_size).floor().max(0.0) as usize;
    let c = (pos.x / cell_size).floor().max(0.0) as usize;
    (r.min(rows - 1), c.min(cols - 1))
}

/// One leg excavation: a full rotation cycle abstracted to a square scoop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExcavationAction {
    /// Position in the discrete action grid.
    pub index: usize,
    /// Scoop center on the slope plane (cm).
    pub center: Vec2,
    /// Side of the square footprint (cm); the leg diameter.
    pub footprint_side: f64,
}

/// The simulated granular slope.
#[derive(Debug, Clone, PartialEq)]
pub struct SlopeState {
    heights: Grid<f64>,
    cell_size: f64,
    incline_deg: f64,
    tan_incline: f64,
    material: MaterialParams,
    /// Base-plane elevation at each row's cell centers.
    row_base: Vec<f64>,
    /// Cells currently failing; empty between public calls.
    active: Vec<usize>,
    active_mask: Grid<bool>,
}

impl SlopeState {
    /// Fresh uniform bed with default material parameters. The bed is
    /// relaxed before returning, so the state invariants hold even when the
    /// incline exceeds the static failure angle.
    pub fn init_slope(
        incline_deg: f64,
        rows: usize,
        cols: usize,
        cell_size: f64,
        fill_depth: f64,
    ) -> Result<Self> {
        Self::with_material(
            incline_deg,
            rows,
            cols,
            cell_size,
            fill_depth,
            MaterialParams::default(),
        )
    }

    pub fn with_material(
        incline_deg: f64,
        rows: usize,
        cols: usize,
        cell_size: f64,
        fill_depth: f64,
        material: MaterialParams,
    ) -> Result<Self> {
        if !(0.0..=MAX_INCLINE_DEG).contains(&incline_deg) {
            return Err(Error::Config(format!(
                "incline_deg must be in [0, {MAX_INCLINE_DEG}], got {incline_deg}"
            )));
        }
        if rows == 0 || cols == 0 {
            return Err(Error::Config("grid dimensions must be positive".into()));
        }
        if cell_size <= 0.0 || fill_depth <= 0.0 {
            return Err(Error::Config(
                "cell_size and fill_depth must be positive".into(),
            ));
        }
        material.validate()?;
        let mut state = SlopeState {
            heights: Grid::filled(rows, cols, fill_depth),
            cell_size,
            incline_deg,
            tan_incline: incline_deg.to_radians().tan(),
            material,
            row_base: base_table(rows, cell_size, incline_deg),
            active: Vec::new(),
            active_mask: Grid::filled(rows, cols, false),
        };
        // A uniform bed steeper than the failure angle settles here instead
        // of on the first excavation.
        state.relax()?;
        Ok(state)
    }

    /// Rebuild a state from raw parts (snapshot loading, tests).
    pub fn from_parts(
        heights: Grid<f64>,
        cell_size: f64,
        incline_deg: f64,
        material: MaterialParams,
    ) -> Result<Self> {
        material.validate()?;
        if cell_size <= 0.0 {
            return Err(Error::Config("cell_size must be positive".into()));
        }
        let rows = heights.rows();
        let cols = heights.cols();
        Ok(SlopeState {
            heights,
            cell_size,
            incline_deg,
            tan_incline: incline_deg.to_radians().tan(),
            material,
            row_base: base_table(rows, cell_size, incline_deg),
            active: Vec::new(),
            active_mask: Grid::filled(rows, cols, false),
        })
    }

    pub fn rows(&self) -> usize {
        self.heights.rows()
    }

    pub fn cols(&self) -> usize {
        self.heights.cols()
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn incline_deg(&self) -> f64 {
        self.incline_deg
    }

    pub fn material(&self) -> &MaterialParams {
        &self.material
    }

    pub fn heights(&self) -> &Grid<f64> {
        &self.heights
    }

    pub fn height(&self, row: usize, col: usize) -> f64 {
        self.heights.get(row, col)
    }

    pub fn set_height(&mut self, row: usize, col: usize, h: f64) {
        self.heights.set(row, col, h.max(0.0));
    }

    /// Trackway extent (cm): `(across, along)`.
    pub fn extent(&self) -> Vec2 {
        Vec2::new(
            self.cols() as f64 * self.cell_size,
            self.rows() as f64 * self.cell_size,
        )
    }

    pub fn total_volume(&self) -> f64 {
        self.heights.sum() * self.cell_size * self.cell_size
    }

    /// Surface elevation (material + base plane) at a cell center.
    #[inline]
    pub fn elevation(&self, row: usize, col: usize) -> f64 {
        self.heights.get(row, col) + self.row_base[row]
    }

    /// Steepest one-sided descent of the effective surface at a cell,
    /// as a vector pointing toward the steepest of the 4 neighbors with
    /// magnitude equal to the drop rate. Zero when no neighbor is lower.
    pub fn effective_gradient(&self, row: usize, col: usize) -> Result<Vec2> {
        self.heights.check_bounds(row, col)?;
        Ok(self.steepest(row, col).map_or(Vec2::ZERO, |(dir, drop)| dir.scale(drop)))
    }

    /// Remove a scoop of material from the action footprint, deposit it in a
    /// two-cell band immediately downslope, and relax the disturbed bed.
    /// Returns the combined excavation + avalanche flux.
    pub fn excavate(&mut self, action: &ExcavationAction) -> Result<FlowField> {
        let (rows, cols) = (self.rows(), self.cols());
        let half = action.footprint_side / 2.0;
        let (r_range, c_range) = cell_range_in_rect(
            action.center,
            half,
            rows,
            cols,
            self.cell_size,
        );
        let (r0, r1) = match r_range {
            Some(r) => r,
            None => {
                return Err(Error::InvalidAction(format!(
                    "footprint at ({}, {}) lies outside the grid",
                    action.center.x, action.center.y
                )))
            }
        };
        let (c0, c1) = match c_range {
            Some(c) => c,
            None => {
                return Err(Error::InvalidAction(format!(
                    "footprint at ({}, {}) lies outside the grid",
                    action.center.x, action.center.y
                )))
            }
        };

        let mut flow = FlowField::zeros(rows, cols);
        let cell_area = self.cell_size * self.cell_size;
        let down = Vec2::new(0.0, 1.0);

        // Scoop: remove up to scoop_depth from every footprint cell.
        let mut removed_volume = 0.0;
        for r in r0..=r1 {
            for c in c0..=c1 {
                let h = self.heights.get(r, c);
                let take = self.material.scoop_depth.min(h);
                if take > 0.0 {
                    self.heights.set(r, c, h - take);
                    let vol = take * cell_area;
                    removed_volume += vol;
                    flow.add(r, c, down.scale(vol));
                }
                self.activate(r, c);
            }
        }

        // Deposit band: two rows immediately downslope, same columns. A
        // footprint flush with the bottom wall deposits back onto its own
        // last row so no material leaves the tank.
        let mut band: Vec<(usize, usize)> = Vec::new();
        for r in (r1 + 1)..=(r1 + 2).min(rows - 1) {
            for c in c0..=c1 {
                band.push((r, c));
            }
        }
        if band.is_empty() {
            band.extend((c0..=c1).map(|c| (r1, c)));
        }
        let per_cell_volume = removed_volume / band.len() as f64;
        let per_cell_height = per_cell_volume / cell_area;
        for &(r, c) in &band {
            *self.heights.at_mut(r, c) += per_cell_height;
            flow.add(r, c, down.scale(per_cell_volume));
            self.activate(r, c);
        }

        let avalanche = self.relax()?;
        flow.merge(&avalanche);
        Ok(flow)
    }

    /// Advect obstacles with a flow field: displacement is the mean flux
    /// under the footprint disk scaled by the transport gain, the shape
    /// coupling, and the inverse mass ratio. Positions are clamped to keep
    /// the footprint inside the trackway and overlaps are resolved by
    /// pushing the later obstacle out along the line of centers.
    pub fn transport_obstacles(&self, obstacles: &[Obstacle], flow: &FlowField) -> Vec<Obstacle> {
        let mut moved: Vec<Obstacle> = obstacles.to_vec();
        for ob in &mut moved {
            let cells = ob.footprint_cells(self.rows(), self.cols(), self.cell_size);
            if cells.is_empty() {
                continue;
            }
            let mut mean = Vec2::ZERO;
            for &(r, c) in &cells {
                mean += flow.get(r, c);
            }
            mean = mean.scale(1.0 / cells.len() as f64);
            let factor = self.material.transport_gain * ob.shape_coupling / ob.mass_ratio;
            ob.pos = ob.pos + mean.scale(factor);
            ob.pos = self.clamp_obstacle(ob.pos, ob.radius);
        }
        self.resolve_overlaps(&mut moved);
        moved
    }

    fn clamp_obstacle(&self, pos: Vec2, radius: f64) -> Vec2 {
        let ext = self.extent();
        pos.clamp_rect(
            Vec2::new(radius, radius),
            Vec2::new(ext.x - radius, ext.y - radius),
        )
    }

    fn resolve_overlaps(&self, obstacles: &mut [Obstacle]) {
        let mut order: Vec<usize> = (0..obstacles.len()).collect();
        order.sort_by_key(|&i| obstacles[i].id);
        for _pass in 0..16 {
            let mut any = false;
            for oi in 0..order.len() {
                for oj in (oi + 1)..order.len() {
                    let (i, j) = (order[oi], order[oj]);
                    let min_dist = obstacles[i].radius + obstacles[j].radius;
                    let delta = obstacles[j].pos - obstacles[i].pos;
                    let dist = delta.norm();
                    if dist >= min_dist {
                        continue;
                    }
                    // Later id is projected out along the line of centers; a
                    // coincident pair is pushed straight downslope.
                    let dir = if dist > 1e-12 {
                        delta.scale(1.0 / dist)
                    } else {
                        Vec2::new(0.0, 1.0)
                    };
                    let pos = obstacles[i].pos + dir.scale(min_dist);
                    obstacles[j].pos = self.clamp_obstacle(pos, obstacles[j].radius);
                    any = true;
                }
            }
            if !any {
                break;
            }
        }
    }

    /// Ground-truth one-step transition: excavate, then advect the obstacles
    /// with the accumulated flux.
    pub fn step(
        &mut self,
        obstacles: &[Obstacle],
        action: &ExcavationAction,
    ) -> Result<(Vec<Obstacle>, FlowField)> {
        let flow = self.excavate(action)?;
        let moved = self.transport_obstacles(obstacles, &flow);
        Ok((moved, flow))
    }

    fn activate(&mut self, row: usize, col: usize) {
        if !self.active_mask.get(row, col) {
            self.active_mask.set(row, col, true);
            self.active.push(row * self.cols() + col);
        }
    }

    fn clear_active(&mut self) {
        for &idx in &self.active {
            let (r, c) = (idx / self.cols(), idx % self.cols());
            self.active_mask.set(r, c, false);
        }
        self.active.clear();
    }
}

/// Base-plane elevation above the downslope edge, per row of cell centers.
fn base_table(rows: usize, cell_size: f64, incline_deg: f64) -> Vec<f64> {
    let tan = incline_deg.to_radians().tan();
    let along = rows as f64 * cell_size;
    (0..rows)
        .map(|r| tan * (along - (r as f64 + 0.5) * cell_size))
        .collect()
}

/// Inclusive cell index ranges whose centers fall inside the axis-aligned
/// square `center ± half`, or `None` per axis when no centers do.
#[allow(clippy::type_complexity)]
fn cell_range_in_rect(
    center: Vec2,
    half: f64,
    rows: usize,
    cols: usize,
    cell_size: f64,
) -> (Option<(usize, usize)>, Option<(usize, usize)>) {
    let axis = |lo: f64, hi: f64, n: usize| -> Option<(usize, usize)> {
        let first = ((lo / cell_size) - 0.5).ceil().max(0.0);
        let last = ((hi / cell_size) - 0.5).floor();
        if last < 0.0 || first > (n - 1) as f64 || first > last {
            return None;
        }
        Some((first as usize, (last as f64).min((n - 1) as f64) as usize))
    };
    (
        axis(center.y - half, center.y + half, rows),
        axis(center.x - half, center.x + half, cols),
    )
}
