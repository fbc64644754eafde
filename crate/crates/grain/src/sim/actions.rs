//! The discrete excavation action grid: 5 locations across-slope by 3 rows
//! along-slope, confined to the upslope half of the trackway so excavations
//! can push obstacles downslope. Row 0 is nearest the top edge.

use super::ExcavationAction;
use crate::geom::Vec2;

pub const ACTIONS_ACROSS: usize = 5;
pub const ACTIONS_ALONG: usize = 3;

/// Build the 15-location action grid for a trackway of `cols x rows` cells.
/// Locations are evenly spaced with a half-footprint margin from the side
/// walls and from the top edge / mid-line of the trackway. Index is
/// row-major: `index = row * 5 + col`.
pub fn action_grid(rows: usize, cols: usize, cell_size: f64, footprint_side: f64) -> Vec<ExcavationAction> {
    let across = cols as f64 * cell_size;
    let along = rows as f64 * cell_size;
    let margin = footprint_side / 2.0;

    let xs: Vec<f64> = (0..ACTIONS_ACROSS)
        .map(|i| margin + i as f64 * (across - 2.0 * margin) / (ACTIONS_ACROSS - 1) as f64)
        .collect();
    let ys: Vec<f64> = (0..ACTIONS_ALONG)
        .map(|j| margin + j as f64 * (along / 2.0 - 2.0 * margin) / (ACTIONS_ALONG - 1) as f64)
        .collect();

    let mut actions = Vec::with_capacity(ACTIONS_ACROSS * ACTIONS_ALONG);
    for (row, &y) in ys.iter().enumerate() {
        for (col, &x) in xs.iter().enumerate() {
            actions.push(ExcavationAction {
                index: row * ACTIONS_ACROSS + col,
                center: Vec2::new(x, y),
                footprint_side,
            });
        }
    }
    actions
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_grid_layout() {
        let actions = action_grid(120, 120, 0.5, 6.0);
        assert_eq!(actions.len(), 15);
        // Half-footprint margin from the side walls.
        assert_eq!(actions[0].center, Vec2::new(3.0, 3.0));
        assert_eq!(actions[4].center, Vec2::new(57.0, 3.0));
        // All rows stay in the upslope half.
        assert!(actions.iter().all(|a| a.center.y <= 30.0));
        // Row-major indexing, row 0 nearest the top.
        assert_eq!(actions[7].index, 7);
        assert_eq!(actions[7].center.x, 30.0);
        assert!(actions[12].center.y > actions[7].center.y);
    }
}
