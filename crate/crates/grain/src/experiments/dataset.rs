//! Transition dataset: generation protocol and the versioned binary format.
//!
//! One record is a single excavation on a fresh or evolving bed: the two
//! observation images before the action, the action, and the tracked
//! obstacle position before and after. A trial is 10 consecutive
//! excavations on one bed; the collection totals 100 trials in three
//! groups: 36 repeat one excavation location with varying obstacle starts,
//! 30 share one obstacle start with varying excavation locations, and 34
//! vary both.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::grid::Grid;
use crate::imaging::{delta_depth, render_depth, DeltaImage, DepthImage};
use crate::sim::{action_grid, Obstacle, SlopeState};

pub const TRIALS_FIXED_ACTION: usize = 36;
pub const TRIALS_FIXED_OBSTACLE: usize = 30;
pub const TRIALS_VARY_BOTH: usize = 34;
pub const TRIALS_TOTAL: usize = 100;
pub const STEPS_PER_TRIAL: usize = 10;

const MAGIC: &[u8; 8] = b"GRAINDAT";
const VERSION: u32 = 1;

/// One (observation, action, outcome) tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord {
    pub trial: u32,
    pub step: u8,
    pub action_index: u8,
    pub action_center: Vec2,
    pub s_t: Vec2,
    pub s_next: Vec2,
    /// Depth image before the action (cm), stored at f32 precision.
    pub depth: Grid<f32>,
    /// Depth change against the previous step (cm); all zero at step 0.
    pub delta: Grid<f32>,
}

impl TransitionRecord {
    pub fn depth_image(&self) -> DepthImage {
        DepthImage {
            pixels: to_f64(&self.depth),
        }
    }

    pub fn delta_image(&self) -> DeltaImage {
        DeltaImage {
            pixels: to_f64(&self.delta),
        }
    }
}

fn to_f64(g: &Grid<f32>) -> Grid<f64> {
    Grid::from_vec(
        g.rows(),
        g.cols(),
        g.as_slice().iter().map(|&v| v as f64).collect(),
    )
    .expect("shape preserved")
}

fn to_f32(g: &Grid<f64>) -> Grid<f32> {
    Grid::from_vec(
        g.rows(),
        g.cols(),
        g.as_slice().iter().map(|&v| v as f32).collect(),
    )
    .expect("shape preserved")
}

/// Simulation parameters the generator needs.
#[derive(Debug, Clone, Copy)]
pub struct GenParams {
    pub incline_deg: f64,
    pub rows: usize,
    pub cols: usize,
    pub cell_size: f64,
    pub fill_depth: f64,
    pub material: crate::sim::MaterialParams,
    pub leg_side: f64,
}

impl GenParams {
    pub fn standard() -> Self {
        GenParams {
            incline_deg: 18.0,
            rows: 120,
            cols: 120,
            cell_size: 0.5,
            fill_depth: 10.0,
            material: crate::sim::MaterialParams::default(),
            leg_side: 6.0,
        }
    }

    fn fresh_bed(&self) -> Result<SlopeState> {
        SlopeState::with_material(
            self.incline_deg,
            self.rows,
            self.cols,
            self.cell_size,
            self.fill_depth,
            self.material,
        )
    }

    pub fn extent(&self) -> Vec2 {
        Vec2::new(
            self.cols as f64 * self.cell_size,
            self.rows as f64 * self.cell_size,
        )
    }
}

/// Sample a reference-obstacle start: uniform over the lower two-thirds of
/// the trackway, one footprint diameter clear of every wall.
pub fn sample_obstacle_start(rng: &mut ChaCha8Rng, extent: Vec2, radius: f64) -> Result<Vec2> {
    let margin = 2.0 * radius;
    let y_lo = (extent.y / 3.0).max(margin);
    for _ in 0..100 {
        let pos = Vec2::new(
            rng.gen_range(margin..extent.x - margin),
            rng.gen_range(y_lo..extent.y - margin),
        );
        if pos.x >= margin && pos.y >= y_lo {
            return Ok(pos);
        }
    }
    Err(Error::Config("obstacle placement failed after 100 attempts".into()))
}

/// Run the full collection protocol: 100 trials of 10 excavations with the
/// 36/30/34 composition, each on a freshly smoothed bed with one reference
/// obstacle. Fully determined by the seed.
pub fn gen_dataset(params: &GenParams, seed: u64) -> Result<Vec<TransitionRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let actions = action_grid(params.rows, params.cols, params.cell_size, params.leg_side);
    let extent = params.extent();

    // Group-level shared values.
    let shared_action = actions[rng.gen_range(0..actions.len())];
    let shared_start = sample_obstacle_start(&mut rng, extent, 2.5)?;

    let mut records = Vec::with_capacity(TRIALS_TOTAL * STEPS_PER_TRIAL);
    for trial in 0..TRIALS_TOTAL as u32 {
        let group = trial_group(trial as usize);
        let start = match group {
            TrialGroup::FixedObstacle => shared_start,
            _ => sample_obstacle_start(&mut rng, extent, 2.5)?,
        };

        let mut state = params.fresh_bed()?;
        let mut obstacles = vec![Obstacle::reference(0, start)];
        let mut prev_depth: Option<DepthImage> = None;
        for step in 0..STEPS_PER_TRIAL {
            let action = match group {
                TrialGroup::FixedAction => shared_action,
                _ => actions[rng.gen_range(0..actions.len())],
            };
            let depth = render_depth(&state, &obstacles);
            let delta = delta_depth(&depth, prev_depth.as_ref(), step)?;
            let s_t = obstacles[0].pos;
            let (moved, _) = state.step(&obstacles, &action)?;
            obstacles = moved;
            records.push(TransitionRecord {
                trial,
                step: step as u8,
                action_index: action.index as u8,
                action_center: action.center,
                s_t,
                s_next: obstacles[0].pos,
                depth: to_f32(&depth.pixels),
                delta: to_f32(&delta.pixels),
            });
            prev_depth = Some(depth);
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialGroup {
    FixedAction,
    FixedObstacle,
    VaryBoth,
}

/// Group membership by trial index: the first 36 share an excavation
/// location, the next 30 share an obstacle start, the rest vary both.
pub fn trial_group(trial: usize) -> TrialGroup {
    if trial < TRIALS_FIXED_ACTION {
        TrialGroup::FixedAction
    } else if trial < TRIALS_FIXED_ACTION + TRIALS_FIXED_OBSTACLE {
        TrialGroup::FixedObstacle
    } else {
        TrialGroup::VaryBoth
    }
}

/// Split trial ids into train/validation by trial (never by transition):
/// a seeded shuffle of the distinct ids, with 10% (at least one) held out.
pub fn split_trials(records: &[TransitionRecord], seed: u64) -> (Vec<u32>, Vec<u32>) {
    let mut ids: Vec<u32> = records.iter().map(|r| r.trial).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_val = (ids.len() / 10).max(1);
    let val = ids[..n_val].to_vec();
    let train = ids[n_val..].to_vec();
    (train, val)
}

/// Write the versioned binary dataset: magic, version, record count, grid
/// dims, cell size, then per record the metadata and both f32 image planes.
pub fn write_dataset<W: Write>(records: &[TransitionRecord], cell_size: f64, mut w: W) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Config("refusing to write an empty dataset".into()));
    }
    let rows = records[0].depth.rows();
    let cols = records[0].depth.cols();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    w.write_all(&(rows as u32).to_le_bytes())?;
    w.write_all(&(cols as u32).to_le_bytes())?;
    w.write_all(&(cell_size as f32).to_le_bytes())?;
    for r in records {
        if r.depth.rows() != rows || r.depth.cols() != cols || !r.depth.same_shape(&r.delta) {
            return Err(Error::ShapeMismatch("inconsistent record dimensions".into()));
        }
        w.write_all(&r.trial.to_le_bytes())?;
        w.write_all(&[r.step, r.action_index])?;
        for v in [
            r.action_center.x,
            r.action_center.y,
            r.s_t.x,
            r.s_t.y,
            r.s_next.x,
            r.s_next.y,
        ] {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        for &v in r.depth.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
        for &v in r.delta.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read a dataset written by `write_dataset`. Returns the records and the
/// stored cell size.
pub fn read_dataset<R: Read>(mut r: R) -> Result<(Vec<TransitionRecord>, f64)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let rows = read_u32(&mut r)? as usize;
    let cols = read_u32(&mut r)? as usize;
    let cell_size = read_f32(&mut r)? as f64;
    if rows == 0 || cols == 0 || count == 0 || rows * cols > 16_000_000 {
        return Err(Error::Format("implausible dataset header".into()));
    }
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let trial = read_u32(&mut r)?;
        let mut two = [0u8; 2];
        r.read_exact(&mut two)?;
        let mut meta = [0.0f32; 6];
        for m in meta.iter_mut() {
            *m = read_f32(&mut r)?;
        }
        let mut depth = vec![0.0f32; rows * cols];
        read_f32_slice(&mut r, &mut depth)?;
        let mut delta = vec![0.0f32; rows * cols];
        read_f32_slice(&mut r, &mut delta)?;
        records.push(TransitionRecord {
            trial,
            step: two[0],
            action_index: two[1],
            action_center: Vec2::new(meta[0] as f64, meta[1] as f64),
            s_t: Vec2::new(meta[2] as f64, meta[3] as f64),
            s_next: Vec2::new(meta[4] as f64, meta[5] as f64),
            depth: Grid::from_vec(rows, cols, depth)?,
            delta: Grid::from_vec(rows, cols, delta)?,
        });
    }
    Ok((records, cell_size))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(f32::from_le_bytes(buf))
}

fn read_f32_slice<R: Read>(r: &mut R, out: &mut [f32]) -> Result<()> {
    let mut buf = vec![0u8; out.len() * 4];
    r.read_exact(&mut buf)?;
    for (i, chunk) in buf.chunks_exact(4).enumerate() {
        out[i] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params() -> GenParams {
        GenParams {
            rows: 40,
            cols: 40,
            cell_size: 1.5,
            ..GenParams::standard()
        }
    }

    #[test]
    fn dataset_has_the_protocol_composition() {
        let params = small_params();
        let records = gen_dataset(&params, 42).unwrap();
        assert_eq!(records.len(), TRIALS_TOTAL * STEPS_PER_TRIAL);

        let zero_delta = records
            .iter()
            .filter(|r| r.delta.as_slice().iter().all(|&v| v == 0.0))
            .count();
        assert_eq!(zero_delta, TRIALS_TOTAL, "one all-zero delta per trial (t = 0)");
        assert!(records.iter().all(|r| (r.step == 0) == r.delta.as_slice().iter().all(|&v| v == 0.0)));

        // Fixed-action group: every record shares one action location.
        let fixed_action: Vec<_> = records
            .iter()
            .filter(|r| (r.trial as usize) < TRIALS_FIXED_ACTION)
            .collect();
        assert!(fixed_action.iter().all(|r| r.action_index == fixed_action[0].action_index));
        let starts: std::collections::HashSet<_> = fixed_action
            .iter()
            .filter(|r| r.step == 0)
            .map(|r| format!("{:?}", r.s_t))
            .collect();
        assert_eq!(starts.len(), TRIALS_FIXED_ACTION, "distinct starts in the fixed-action group");

        // Fixed-obstacle group: every trial starts at one shared position.
        let fixed_obstacle: Vec<_> = records
            .iter()
            .filter(|r| {
                let t = r.trial as usize;
                t >= TRIALS_FIXED_ACTION && t < TRIALS_FIXED_ACTION + TRIALS_FIXED_OBSTACLE && r.step == 0
            })
            .collect();
        assert!(fixed_obstacle.iter().all(|r| r.s_t == fixed_obstacle[0].s_t));
    }

    #[test]
    fn dataset_generation_is_deterministic() {
        let params = small_params();
        let a = gen_dataset(&params, 7).unwrap();
        let b = gen_dataset(&params, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dataset_round_trips_through_the_binary_format() {
        let params = small_params();
        let records: Vec<_> = gen_dataset(&params, 3).unwrap().into_iter().take(25).collect();
        let mut buf = Vec::new();
        write_dataset(&records, params.cell_size, &mut buf).unwrap();
        let (loaded, cell) = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(cell, params.cell_size as f32 as f64);
        assert_eq!(loaded.len(), records.len());
        // Positions survive the f32 narrowing they were written with.
        for (a, b) in loaded.iter().zip(&records) {
            assert_eq!(a.trial, b.trial);
            assert_eq!(a.depth, b.depth);
            assert!((a.s_next.x - b.s_next.x).abs() < 1e-5);
        }
    }

    #[test]
    fn corrupt_header_is_rejected() {
        let mut buf = b"GRAINDATxxxx".to_vec();
        buf.extend_from_slice(&[0u8; 32]);
        assert!(read_dataset(buf.as_slice()).is_err());
        assert!(read_dataset(b"NOTMAGIC".as_slice()).is_err());
    }

    #[test]
    fn trial_split_separates_train_and_validation() {
        let params = small_params();
        let records = gen_dataset(&params, 5).unwrap();
        let (train, val) = split_trials(&records, 11);
        assert_eq!(train.len() + val.len(), TRIALS_TOTAL);
        assert_eq!(val.len(), TRIALS_TOTAL / 10);
        for id in &val {
            assert!(!train.contains(id));
        }
        let (train2, val2) = split_trials(&records, 11);
        assert_eq!((train, val), (train2, val2));
    }
}
