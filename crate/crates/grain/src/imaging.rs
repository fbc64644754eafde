//! The three spatially aligned image inputs of the dynamics model — the
//! overhead depth image, the frame-to-frame depth change, and the white
//! square encoding of the excavation action — plus the masking used to make
//! multi-obstacle scenes resemble the single-obstacle training data.
//!
//! Images share the simulation grid: pixel (i, j) is cell (row i, col j).
//! Depth is camera-style, in cm: larger values are farther from the camera.

use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::grid::Grid;
use crate::sim::{cell_of, ExcavationAction, Obstacle, SlopeState};

/// Fixed overhead camera height above the tank floor (cm). Only depth
/// differences matter downstream, so the constant is arbitrary.
pub const CAMERA_HEIGHT_CM: f64 = 100.0;

/// Overhead depth image (cm).
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub pixels: Grid<f64>,
}

/// Signed depth change between consecutive frames (cm).
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaImage {
    pub pixels: Grid<f64>,
}

/// Binary action encoding: one white (255) axis-aligned square on black.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionImage {
    pub pixels: Grid<u8>,
}

/// The observation pair the planner and model consume at each step.
#[derive(Debug, Clone)]
pub struct Observation {
    pub depth: DepthImage,
    pub delta: DeltaImage,
}

/// Render the overhead depth image: camera height minus surface elevation,
/// where the surface includes the base plane, the granular bed, and each
/// obstacle's rigid cap profile on top of the local surface.
pub fn render_depth(state: &SlopeState, obstacles: &[Obstacle]) -> DepthImage {
    let rows = state.rows();
    let cols = state.cols();
    let cell = state.cell_size();
    let mut pixels = Grid::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            pixels.set(r, c, CAMERA_HEIGHT_CM - state.elevation(r, c));
        }
    }
    for ob in obstacles {
        for (r, c) in ob.footprint_cells(rows, cols, cell) {
            let offset = crate::sim::cell_center(r, c, cell) - ob.pos;
            let cap = ob.cap_height(offset);
            if cap > 0.0 {
                pixels.set(r, c, CAMERA_HEIGHT_CM - (state.elevation(r, c) + cap));
            }
        }
    }
    DepthImage { pixels }
}

/// Frame difference `x_t - x_prev`; all zeros at the first step of a trial.
pub fn delta_depth(x_t: &DepthImage, x_prev: Option<&DepthImage>, t: usize) -> Result<DeltaImage> {
    let rows = x_t.pixels.rows();
    let cols = x_t.pixels.cols();
    if t == 0 {
        return Ok(DeltaImage {
            pixels: Grid::zeros(rows, cols),
        });
    }
    let prev = x_prev.ok_or_else(|| {
        Error::ShapeMismatch("delta_depth requires the previous frame when t > 0".into())
    })?;
    if !x_t.pixels.same_shape(&prev.pixels) {
        return Err(Error::ShapeMismatch(format!(
            "depth frames {}x{} vs {}x{}",
            rows,
            cols,
            prev.pixels.rows(),
            prev.pixels.cols()
        )));
    }
    let mut pixels = Grid::zeros(rows, cols);
    for (i, out) in pixels.as_mut_slice().iter_mut().enumerate() {
        *out = x_t.pixels.as_slice()[i] - prev.pixels.as_slice()[i];
    }
    Ok(DeltaImage { pixels })
}

/// White square of side `footprint_side / cell_size` pixels centered on the
/// action pixel and clamped to the image: `start = max(0, center - side/2)`,
/// `end = min(dim, center + side/2)`, all integer arithmetic, end exclusive.
pub fn action_image(
    action: &ExcavationAction,
    rows: usize,
    cols: usize,
    cell_size: f64,
) -> Result<ActionImage> {
    let extent = Vec2::new(cols as f64 * cell_size, rows as f64 * cell_size);
    if action.center.x < 0.0
        || action.center.y < 0.0
        || action.center.x >= extent.x
        || action.center.y >= extent.y
    {
        return Err(Error::InvalidAction(format!(
            "action center ({}, {}) maps outside the {}x{} image",
            action.center.x, action.center.y, rows, cols
        )));
    }
    let (cr, cc) = cell_of(action.center, rows, cols, cell_size);
    let side = (action.footprint_side / cell_size).round() as usize;
    let half = side / 2;

    let mut pixels = Grid::filled(rows, cols, 0u8);
    let r_start = cr.saturating_sub(half);
    let r_end = (cr + half).min(rows);
    let c_start = cc.saturating_sub(half);
    let c_end = (cc + half).min(cols);
    for r in r_start..r_end {
        for c in c_start..c_end {
            pixels.set(r, c, 255);
        }
    }
    Ok(ActionImage { pixels })
}

/// Pixel window side for masking an obstacle: three times its radius.
pub fn mask_window_side(radius: f64, cell_size: f64) -> usize {
    (3.0 * radius / cell_size).round() as usize
}

/// Replace every non-selected obstacle's pixels with the mean of a window
/// (side 3x its radius, clamped to the image) centered on it. The mean is
/// taken over all window pixels of the *input* image, obstacle pixels
/// included; the selected obstacle and all non-obstacle pixels pass through.
pub fn mask_depth(
    x: &DepthImage,
    obstacles: &[Obstacle],
    selected: u32,
    cell_size: f64,
) -> Result<DepthImage> {
    if !obstacles.iter().any(|o| o.id == selected) {
        return Err(Error::UnknownObstacle(selected));
    }
    let rows = x.pixels.rows();
    let cols = x.pixels.cols();
    let cell = cell_size;
    let mut out = x.clone();
    for ob in obstacles.iter().filter(|o| o.id != selected) {
        let (cr, cc) = cell_of(ob.pos, rows, cols, cell);
        let half = mask_window_side(ob.radius, cell) / 2;
        let r_start = cr.saturating_sub(half);
        let r_end = (cr + half).min(rows);
        let c_start = cc.saturating_sub(half);
        let c_end = (cc + half).min(cols);
        if r_start >= r_end || c_start >= c_end {
            continue;
        }
        let mut sum = 0.0;
        for r in r_start..r_end {
            for c in c_start..c_end {
                sum += x.pixels.get(r, c);
            }
        }
        let avg = sum / ((r_end - r_start) * (c_end - c_start)) as f64;
        for (r, c) in ob.footprint_cells(rows, cols, cell) {
            if r >= r_start && r < r_end && c >= c_start && c < c_end {
                out.pixels.set(r, c, avg);
            }
        }
    }
    Ok(out)
}

/// Zero the pixels belonging to any non-selected obstacle's footprint at the
/// current positions and, when given, at the previous-frame positions.
pub fn mask_delta(
    dx: &DeltaImage,
    obstacles: &[Obstacle],
    selected: u32,
    prev_positions: Option<&[Vec2]>,
    cell_size: f64,
) -> Result<DeltaImage> {
    if !obstacles.iter().any(|o| o.id == selected) {
        return Err(Error::UnknownObstacle(selected));
    }
    if let Some(prev) = prev_positions {
        if prev.len() != obstacles.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} previous positions for {} obstacles",
                prev.len(),
                obstacles.len()
            )));
        }
    }
    let rows = dx.pixels.rows();
    let cols = dx.pixels.cols();
    let cell = cell_size;
    let mut out = dx.clone();
    for (k, ob) in obstacles.iter().enumerate() {
        if ob.id == selected {
            continue;
        }
        for (r, c) in ob.footprint_cells(rows, cols, cell) {
            out.pixels.set(r, c, 0.0);
        }
        if let Some(prev) = prev_positions {
            let at_prev = Obstacle {
                pos: prev[k],
                ..*ob
            };
            for (r, c) in at_prev.footprint_cells(rows, cols, cell) {
                out.pixels.set(r, c, 0.0);
            }
        }
    }
    Ok(out)
}

/// Export a float image as binary 8-bit PGM, min-max normalized per image.
/// The normalization bounds go to a `<path>.bounds.txt` sidecar; a constant
/// image maps to all zeros.
pub fn write_pgm<P: AsRef<std::path::Path>>(path: P, pixels: &Grid<f64>) -> Result<()> {
    let path = path.as_ref();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in pixels.as_slice() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    let mut data = Vec::with_capacity(64 + pixels.as_slice().len());
    data.extend_from_slice(format!("P5\n{} {}\n255\n", pixels.cols(), pixels.rows()).as_bytes());
    for &v in pixels.as_slice() {
        let g = if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        };
        data.push(g);
    }
    std::fs::write(path, data)?;
    let sidecar = path.with_extension(format!(
        "{}bounds.txt",
        path.extension()
            .map(|e| format!("{}.", e.to_string_lossy()))
            .unwrap_or_default()
    ));
    std::fs::write(sidecar, format!("{lo} {hi}\n"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{action_grid, ObstacleShape};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn flat_state() -> SlopeState {
        SlopeState::init_slope(0.0, 40, 40, 0.5, 10.0).unwrap()
    }

    /// Reference for the action encoding: decide every pixel independently
    /// from the clamped rectangle bounds.
    fn action_image_reference(
        action: &ExcavationAction,
        rows: usize,
        cols: usize,
        cell_size: f64,
    ) -> Grid<u8> {
        let (cr, cc) = cell_of(action.center, rows, cols, cell_size);
        let side = (action.footprint_side / cell_size).round() as isize;
        let half = side / 2;
        let r_lo = (cr as isize - half).max(0);
        let r_hi = (cr as isize + half).min(rows as isize);
        let c_lo = (cc as isize - half).max(0);
        let c_hi = (cc as isize + half).min(cols as isize);
        let mut g = Grid::filled(rows, cols, 0u8);
        for r in 0..rows as isize {
            for c in 0..cols as isize {
                if r >= r_lo && r < r_hi && c >= c_lo && c < c_hi {
                    g.set(r as usize, c as usize, 255);
                }
            }
        }
        g
    }

    #[test]
    fn flat_bed_renders_constant() {
        let state = flat_state();
        let img = render_depth(&state, &[]);
        let first = img.pixels.get(0, 0);
        assert!(img.pixels.as_slice().iter().all(|&v| v == first));
        assert_eq!(first, CAMERA_HEIGHT_CM - 10.0);
    }

    #[test]
    fn hemisphere_apex_is_one_radius_nearer() {
        let state = flat_state();
        // Center on a cell center so the apex lands on a pixel exactly.
        let ob = Obstacle::reference(0, Vec2::new(10.25, 10.25));
        let img = render_depth(&state, &[ob]);
        let (r, c) = cell_of(ob.pos, 40, 40, 0.5);
        let bg = img.pixels.get(0, 0);
        assert!((bg - img.pixels.get(r, c) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn raising_one_cell_changes_exactly_that_pixel() {
        let mut state = flat_state();
        let before = render_depth(&state, &[]);
        state.set_height(7, 9, 11.0);
        let after = render_depth(&state, &[]);
        for r in 0..40 {
            for c in 0..40 {
                let d = after.pixels.get(r, c) - before.pixels.get(r, c);
                if (r, c) == (7, 9) {
                    assert!((d + 1.0).abs() < 1e-12);
                } else {
                    assert_eq!(d, 0.0);
                }
            }
        }
    }

    #[test]
    fn delta_is_zero_at_step_zero() {
        let state = flat_state();
        let x = render_depth(&state, &[]);
        let d = delta_depth(&x, None, 0).unwrap();
        assert!(d.pixels.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn delta_of_identical_frames_is_zero_and_antisymmetric() {
        let mut state = flat_state();
        let a = render_depth(&state, &[]);
        state.set_height(3, 3, 12.0);
        let b = render_depth(&state, &[]);
        let zero = delta_depth(&a, Some(&a), 1).unwrap();
        assert!(zero.pixels.as_slice().iter().all(|&v| v == 0.0));
        let ab = delta_depth(&a, Some(&b), 1).unwrap();
        let ba = delta_depth(&b, Some(&a), 1).unwrap();
        for (x, y) in ab.pixels.as_slice().iter().zip(ba.pixels.as_slice()) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn delta_shape_mismatch_errors() {
        let a = DepthImage {
            pixels: Grid::zeros(4, 4),
        };
        let b = DepthImage {
            pixels: Grid::zeros(4, 5),
        };
        assert!(delta_depth(&a, Some(&b), 1).is_err());
        assert!(delta_depth(&a, None, 1).is_err());
    }

    #[test]
    fn interior_action_square_has_full_area() {
        let action = ExcavationAction {
            index: 0,
            center: Vec2::new(30.0, 30.0),
            footprint_side: 6.0,
        };
        let img = action_image(&action, 120, 120, 0.5).unwrap();
        let white = img.pixels.as_slice().iter().filter(|&&v| v == 255).count();
        assert_eq!(white, 144);
    }

    #[test]
    fn corner_action_square_is_clipped() {
        let action = ExcavationAction {
            index: 0,
            center: Vec2::new(0.1, 0.1),
            footprint_side: 6.0,
        };
        let img = action_image(&action, 120, 120, 0.5).unwrap();
        let white = img.pixels.as_slice().iter().filter(|&&v| v == 255).count();
        assert_eq!(white, 36);
    }

    #[test]
    fn action_center_outside_grid_errors() {
        let action = ExcavationAction {
            index: 0,
            center: Vec2::new(70.0, 10.0),
            footprint_side: 6.0,
        };
        assert!(action_image(&action, 120, 120, 0.5).is_err());
    }

    #[test]
    fn action_image_matches_reference_for_grid_and_random_centers() {
        let mut rng = StdRng::seed_from_u64(7);
        let mut actions = action_grid(120, 120, 0.5, 6.0);
        for _ in 0..200 {
            actions.push(ExcavationAction {
                index: 0,
                center: Vec2::new(rng.gen_range(0.0..60.0), rng.gen_range(0.0..60.0)),
                footprint_side: 6.0,
            });
        }
        for action in &actions {
            let img = action_image(action, 120, 120, 0.5).unwrap();
            let reference = action_image_reference(action, 120, 120, 0.5);
            assert_eq!(img.pixels, reference, "mismatch at {:?}", action.center);
        }
    }

    #[test]
    fn masking_with_single_obstacle_is_identity() {
        let state = flat_state();
        let ob = Obstacle::reference(3, Vec2::new(10.0, 10.0));
        let x = render_depth(&state, &[ob]);
        let masked = mask_depth(&x, &[ob], 3, 0.5).unwrap();
        assert_eq!(masked.pixels, x.pixels);
    }

    #[test]
    fn mask_depth_unknown_id_errors() {
        let state = flat_state();
        let ob = Obstacle::reference(0, Vec2::new(10.0, 10.0));
        let x = render_depth(&state, &[ob]);
        assert!(mask_depth(&x, &[ob], 9, 0.5).is_err());
    }

    // Window-mean value on a synthetic scene: constant background, one
    // non-selected obstacle whose pixels are exactly 1 cm nearer. The masked
    // value is the window mean including the obstacle's own pixels.
    #[test]
    fn mask_depth_writes_the_window_mean() {
        let rows = 40;
        let cols = 40;
        let c_bg = 90.0;
        let selected = Obstacle::reference(0, Vec2::new(5.0, 5.0));
        let other = Obstacle::reference(1, Vec2::new(12.25, 12.25));
        let mut pixels = Grid::filled(rows, cols, c_bg);
        let p_cells = other.footprint_cells(rows, cols, 0.5);
        for &(r, c) in &p_cells {
            pixels.set(r, c, c_bg - 1.0);
        }
        let x = DepthImage { pixels };

        let masked = mask_depth(&x, &[selected, other], 0, 0.5).unwrap();

        let side = mask_window_side(2.5, 0.5);
        let half = side / 2;
        let (cr, cc) = cell_of(other.pos, rows, cols, 0.5);
        let n_window = ((cr + half).min(rows) - (cr - half)) * ((cc + half).min(cols) - (cc - half));
        let n_p = p_cells.len();
        let expected = (c_bg * (n_window - n_p) as f64 + (c_bg - 1.0) * n_p as f64) / n_window as f64;

        let mut changed = 0;
        for r in 0..rows {
            for c in 0..cols {
                let v = masked.pixels.get(r, c);
                if p_cells.contains(&(r, c)) {
                    assert!((v - expected).abs() < 1e-12, "pixel ({r},{c}) = {v}, want {expected}");
                    changed += 1;
                } else {
                    assert_eq!(v, x.pixels.get(r, c), "untouched pixel ({r},{c}) changed");
                }
            }
        }
        assert_eq!(changed, n_p);
    }

    #[test]
    fn mask_depth_changes_only_non_selected_obstacle_pixels() {
        let mut state = flat_state();
        state.set_height(20, 20, 12.0);
        let obstacles = vec![
            Obstacle::reference(0, Vec2::new(6.0, 6.0)),
            Obstacle::reference(1, Vec2::new(14.0, 9.0)),
            Obstacle {
                shape: ObstacleShape::Star,
                ..Obstacle::reference(2, Vec2::new(9.0, 16.0))
            },
        ];
        let x = render_depth(&state, &obstacles);
        let masked = mask_depth(&x, &obstacles, 1, 0.5).unwrap();
        let mut allowed = std::collections::HashSet::new();
        for ob in obstacles.iter().filter(|o| o.id != 1) {
            allowed.extend(ob.footprint_cells(40, 40, 0.5));
        }
        for r in 0..40 {
            for c in 0..40 {
                if masked.pixels.get(r, c) != x.pixels.get(r, c) {
                    assert!(allowed.contains(&(r, c)), "pixel ({r},{c}) outside obstacle sets changed");
                }
            }
        }
    }

    #[test]
    fn mask_delta_zeroes_both_footprints_of_a_moved_obstacle() {
        let rows = 40;
        let cols = 40;
        let mut pixels = Grid::filled(rows, cols, 0.5);
        let dx = DeltaImage { pixels: pixels.clone() };
        let selected = Obstacle::reference(0, Vec2::new(5.0, 5.0));
        let other = Obstacle::reference(1, Vec2::new(14.0, 14.0));
        let prev = vec![Vec2::new(5.0, 5.0), Vec2::new(11.0, 11.0)];

        let masked = mask_delta(&dx, &[selected, other], 0, Some(&prev), 0.5).unwrap();

        let mut zeroed = std::collections::HashSet::new();
        zeroed.extend(other.footprint_cells(rows, cols, 0.5));
        zeroed.extend(
            Obstacle { pos: prev[1], ..other }.footprint_cells(rows, cols, 0.5),
        );
        for r in 0..rows {
            for c in 0..cols {
                let v = masked.pixels.get(r, c);
                if zeroed.contains(&(r, c)) {
                    assert_eq!(v, 0.0);
                } else {
                    assert_eq!(v, 0.5);
                }
            }
        }
        // K = 1 leaves the image untouched; zero input stays zero.
        let lone = mask_delta(&dx, &[selected], 0, None, 0.5).unwrap();
        assert_eq!(lone.pixels, dx.pixels);
        pixels.as_mut_slice().fill(0.0);
        let zero = mask_delta(&DeltaImage { pixels }, &[selected, other], 0, None, 0.5).unwrap();
        assert!(zero.pixels.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aligned_dimensions_across_producers() {
        let state = SlopeState::init_slope(18.0, 120, 120, 0.5, 10.0).unwrap();
        let x = render_depth(&state, &[]);
        let d = delta_depth(&x, None, 0).unwrap();
        let a = action_image(&action_grid(120, 120, 0.5, 6.0)[0], 120, 120, 0.5).unwrap();
        assert!(x.pixels.same_shape(&d.pixels));
        assert!(x.pixels.same_shape(&a.pixels));
    }

    #[test]
    fn pgm_export_writes_header_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let mut g = Grid::zeros(4, 6);
        g.set(0, 0, -2.0);
        g.set(3, 5, 6.0);
        write_pgm(&path, &g).unwrap();
        let data = std::fs::read(&path).unwrap();
        assert!(data.starts_with(b"P5\n6 4\n255\n"));
        assert_eq!(data.len(), b"P5\n6 4\n255\n".len() + 24);
        let sidecar = std::fs::read_to_string(dir.path().join("img.pgm.bounds.txt")).unwrap();
        assert_eq!(sidecar.trim(), "-2 6");
    }
}
