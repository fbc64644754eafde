//! The evaluation protocol: dataset generation, the six task families, the
//! closed-loop trial runner for every method, the 15-action prediction
//! probe, and the aggregate tables.

pub mod dataset;
pub mod report;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::imaging::{delta_depth, render_depth, DepthImage};
use crate::model::TrainedModel;
use crate::planner::{
    check_termination, greedy_multi, BaselinePolicy, DynamicsModel, Termination,
};
use crate::sim::{action_grid, ExcavationAction, Obstacle, ObstacleShape, SlopeState};
use dataset::GenParams;

/// Final distance below this radius counts the obstacle as at its target.
pub const SUCCESS_RADIUS_CM: f64 = 2.5;
/// Hard cap on excavations per trial.
pub const EXCAVATION_CAP: usize = 30;

/// The evaluated task families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskFamily {
    /// One obstacle, one target.
    SingleSingle,
    /// One obstacle, a second target after the first is reached.
    SingleSequential,
    /// Four obstacles, four targets.
    Multi,
    /// One star-shaped obstacle at twice the reference mass.
    Unseen,
    /// Three obstacles, actions restricted to the two front-leg locations.
    TwoLeg,
    /// Four mixed obstacles: star, half-mass cuboid, quadruple-mass
    /// hemisphere, and the reference.
    MultiUnseen,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 6] = [
        TaskFamily::SingleSingle,
        TaskFamily::SingleSequential,
        TaskFamily::Multi,
        TaskFamily::Unseen,
        TaskFamily::TwoLeg,
        TaskFamily::MultiUnseen,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TaskFamily::SingleSingle => "single_single",
            TaskFamily::SingleSequential => "single_sequential",
            TaskFamily::Multi => "multi",
            TaskFamily::Unseen => "unseen",
            TaskFamily::TwoLeg => "two_leg",
            TaskFamily::MultiUnseen => "multi_unseen",
        }
    }

    pub fn parse(name: &str) -> Result<TaskFamily> {
        TaskFamily::ALL
            .into_iter()
            .find(|f| f.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown task {name}")))
    }
}

/// Manipulation methods under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Grain,
    VectorAblation,
    Baseline,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Grain, Method::VectorAblation, Method::Baseline];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Grain => "grain",
            Method::VectorAblation => "vector",
            Method::Baseline => "baseline",
        }
    }

    pub fn parse(name: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown method {name}")))
    }

    pub fn is_learning(&self) -> bool {
        !matches!(self, Method::Baseline)
    }
}

/// One sampled task instance: obstacles, per-obstacle targets, optional
/// second-stage targets, and the candidate action set.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub family: TaskFamily,
    pub obstacles: Vec<Obstacle>,
    pub targets: Vec<Vec2>,
    pub second_targets: Option<Vec<Vec2>>,
    pub actions: Vec<ExcavationAction>,
}

impl TaskSpec {
    /// The targets the trial is ultimately scored against.
    pub fn final_targets(&self) -> &[Vec2] {
        self.second_targets.as_deref().unwrap_or(&self.targets)
    }
}

/// Obstacle presets used by the unseen-obstacle tasks.
fn star_obstacle(id: u32, pos: Vec2) -> Obstacle {
    Obstacle {
        mass_ratio: 2.0,
        shape_coupling: 0.8,
        shape: ObstacleShape::Star,
        ..Obstacle::reference(id, pos)
    }
}

fn cuboid_half(id: u32, pos: Vec2) -> Obstacle {
    Obstacle {
        mass_ratio: 0.5,
        shape_coupling: 0.9,
        shape: ObstacleShape::FlatDisk,
        ..Obstacle::reference(id, pos)
    }
}

fn hemisphere_heavy(id: u32, pos: Vec2) -> Obstacle {
    Obstacle {
        mass_ratio: 4.0,
        ..Obstacle::reference(id, pos)
    }
}

/// Sample a solvable task instance. Obstacles start inside the avalanche
/// reach of the action rows; targets sit a few centimeters downslope of
/// their obstacle (avalanches cannot push material upslope) with modest
/// lateral offsets, pairwise separated by more than two success radii.
pub fn sample_task(family: TaskFamily, gen: &GenParams, seed: u64) -> Result<TaskSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let actions = action_grid(gen.rows, gen.cols, gen.cell_size, gen.leg_side);
    let extent = gen.extent();

    let sample_downslope_target = |rng: &mut ChaCha8Rng, pos: Vec2, mass: f64| -> Vec2 {
        let reach = 4.0 + 12.0 / mass.max(1.0);
        let dy = rng.gen_range(5.0..reach.max(6.0));
        let dx = rng.gen_range(-2.0..2.0);
        Vec2::new(
            (pos.x + dx).clamp(4.0, extent.x - 4.0),
            (pos.y + dy).min(extent.y - 4.0),
        )
    };

    type Make = fn(u32, Vec2) -> Obstacle;
    let place_many = |rng: &mut ChaCha8Rng,
                      specs: &[Make],
                      x_lo: f64,
                      x_hi: f64|
     -> Result<(Vec<Obstacle>, Vec<Vec2>)> {
        'attempt: for _ in 0..100 {
            let mut obstacles: Vec<Obstacle> = Vec::new();
            let mut targets: Vec<Vec2> = Vec::new();
            for (k, make) in specs.iter().enumerate() {
                let pos = Vec2::new(rng.gen_range(x_lo..x_hi), rng.gen_range(26.0..40.0));
                let ob = make(k as u32, pos);
                if obstacles
                    .iter()
                    .any(|o| o.pos.distance(pos) < o.radius + ob.radius + 2.0)
                {
                    continue 'attempt;
                }
                let target = sample_downslope_target(rng, pos, ob.mass_ratio);
                if targets
                    .iter()
                    .any(|t| t.distance(target) <= 2.0 * SUCCESS_RADIUS_CM + 0.5)
                {
                    continue 'attempt;
                }
                obstacles.push(ob);
                targets.push(target);
            }
            return Ok((obstacles, targets));
        }
        Err(Error::Config("task placement failed after 100 attempts".into()))
    };

    let reference_make: Make = Obstacle::reference;

    let (obstacles, targets, second_targets, task_actions) = match family {
        TaskFamily::SingleSingle | TaskFamily::Unseen => {
            let make: Make = if family == TaskFamily::Unseen {
                star_obstacle
            } else {
                reference_make
            };
            let (obstacles, targets) = place_many(&mut rng, &[make], 10.0, 50.0)?;
            (obstacles, targets, None, actions.clone())
        }
        TaskFamily::SingleSequential => {
            let (obstacles, targets) = place_many(&mut rng, &[reference_make], 10.0, 50.0)?;
            let q = vec![Vec2::new(
                (targets[0].x + rng.gen_range(-2.0..2.0)).clamp(4.0, extent.x - 4.0),
                (targets[0].y + rng.gen_range(4.0..8.0)).min(extent.y - 3.0),
            )];
            (obstacles, targets, Some(q), actions.clone())
        }
        TaskFamily::Multi => {
            let (obstacles, targets) = place_many(&mut rng, &[reference_make; 4], 8.0, 52.0)?;
            (obstacles, targets, None, actions.clone())
        }
        TaskFamily::MultiUnseen => {
            let specs: [Make; 4] = [star_obstacle, cuboid_half, hemisphere_heavy, reference_make];
            let (obstacles, targets) = place_many(&mut rng, &specs, 8.0, 52.0)?;
            (obstacles, targets, None, actions.clone())
        }
        TaskFamily::TwoLeg => {
            // Two front legs parked at the middle-row outer grid locations.
            let legs = [actions[6], actions[8]];
            let mut obstacles: Vec<Obstacle> = Vec::new();
            let mut targets: Vec<Vec2> = Vec::new();
            for k in 0..3u32 {
                let mut placed = false;
                for _ in 0..100 {
                    let leg = legs[rng.gen_range(0..2)];
                    let pos = Vec2::new(
                        (leg.center.x + rng.gen_range(-5.0..5.0)).clamp(6.0, extent.x - 6.0),
                        rng.gen_range(26.0..38.0),
                    );
                    if obstacles
                        .iter()
                        .any(|o| o.pos.distance(pos) < 2.0 * SUCCESS_RADIUS_CM + 2.0)
                    {
                        continue;
                    }
                    let target = sample_downslope_target(&mut rng, pos, 1.0);
                    if targets
                        .iter()
                        .any(|t| t.distance(target) <= 2.0 * SUCCESS_RADIUS_CM + 0.5)
                    {
                        continue;
                    }
                    obstacles.push(Obstacle::reference(k, pos));
                    targets.push(target);
                    placed = true;
                    break;
                }
                if !placed {
                    return Err(Error::Config("two-leg placement failed".into()));
                }
            }
            let restricted = vec![actions[6], actions[8]];
            (obstacles, targets, None, restricted)
        }
    };

    Ok(TaskSpec {
        family,
        obstacles,
        targets,
        second_targets,
        actions: task_actions,
    })
}

/// One executed excavation in a trial trace.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub step: usize,
    pub action_index: usize,
    /// Masked per-obstacle predictions for the chosen action (empty for the
    /// baseline, which predicts nothing).
    pub predictions: Vec<Vec2>,
    /// Positions after the excavation.
    pub positions: Vec<Vec2>,
    /// Per-obstacle projected-movement scores (empty for the baseline).
    pub scores: Vec<f64>,
    pub best_score: Option<f64>,
}

/// Outcome of one closed-loop trial.
#[derive(Debug, Clone)]
pub struct TrialResult {
    pub task: TaskFamily,
    pub method: Method,
    pub seed: u64,
    pub steps: Vec<StepTrace>,
    pub final_distances: Vec<f64>,
    pub success: bool,
    /// Mean prediction error against realized positions (cm); absent for
    /// the baseline.
    pub mae_pred_cm: Option<f64>,
    /// Mean final distance to the stage targets (cm).
    pub mae_final_cm: f64,
    pub excavations: usize,
    pub termination: &'static str,
}

/// Mean Euclidean distance over prediction/truth pairs (cm).
pub fn eval_mae(pairs: &[(Vec2, Vec2)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Config("eval_mae over an empty list".into()));
    }
    Ok(pairs.iter().map(|(a, b)| a.distance(*b)).sum::<f64>() / pairs.len() as f64)
}

/// Models available to the trial runner.
pub struct MethodModels<'a> {
    pub grain: Option<&'a TrainedModel>,
    pub vector: Option<&'a TrainedModel>,
}

impl<'a> MethodModels<'a> {
    fn for_method(&self, method: Method) -> Result<&'a TrainedModel> {
        match method {
            Method::Grain => self.grain,
            Method::VectorAblation => self.vector,
            Method::Baseline => None,
        }
        .ok_or_else(|| Error::Config(format!("no model loaded for method {}", method.name())))
    }
}

/// Run one closed-loop manipulation trial: observe, select an excavation,
/// apply it to the simulator, repeat until a termination rule fires, every
/// target is reached, or the excavation cap runs out.
pub fn run_trial(
    gen: &GenParams,
    task: &TaskSpec,
    method: Method,
    models: &MethodModels,
    seed: u64,
) -> Result<TrialResult> {
    let mut state = SlopeState::with_material(
        gen.incline_deg,
        gen.rows,
        gen.cols,
        gen.cell_size,
        gen.fill_depth,
        gen.material,
    )?;
    let mut obstacles = task.obstacles.clone();
    let mut stage_targets: &[Vec2] = &task.targets;
    let mut on_second_stage = task.second_targets.is_none();

    let mut baseline = BaselinePolicy::new(obstacles.len(), SUCCESS_RADIUS_CM, seed);
    let model = if method.is_learning() {
        Some(models.for_method(method)?)
    } else {
        None
    };

    let mut steps: Vec<StepTrace> = Vec::new();
    let mut best_scores: Vec<f64> = Vec::new();
    let mut positions_history = vec![obstacles.iter().map(|o| o.pos).collect::<Vec<_>>()];
    let mut prev_positions: Option<Vec<Vec2>> = None;
    let mut prev_depth: Option<DepthImage> = None;
    let mut pred_pairs: Vec<(Vec2, Vec2)> = Vec::new();
    let mut termination = "cap";

    let mut t = 0usize;
    while t < EXCAVATION_CAP {
        // Stage handling: once every obstacle is at its target, either
        // advance to the second-stage targets or finish.
        let all_at_target = obstacles
            .iter()
            .zip(stage_targets)
            .all(|(o, &tg)| o.pos.distance(tg) < SUCCESS_RADIUS_CM);
        if all_at_target {
            if !on_second_stage {
                stage_targets = task.second_targets.as_deref().expect("stage exists");
                on_second_stage = true;
                // Fresh stage: reset the stall window and score history.
                best_scores.clear();
                positions_history = vec![obstacles.iter().map(|o| o.pos).collect()];
                baseline = BaselinePolicy::new(obstacles.len(), SUCCESS_RADIUS_CM, seed ^ 0x9e37);
                continue;
            }
            termination = "targets_reached";
            break;
        }

        let depth = render_depth(&state, &obstacles);
        let delta = delta_depth(&depth, prev_depth.as_ref(), t)?;

        let (action, trace_pred, trace_scores, best) = if let Some(model) = model {
            let plan = match greedy_multi(
                model,
                &depth,
                &delta,
                &obstacles,
                stage_targets,
                SUCCESS_RADIUS_CM,
                &task.actions,
                prev_positions.as_deref(),
            ) {
                Ok(plan) => plan,
                Err(Error::NothingToDo) => {
                    termination = "targets_reached";
                    break;
                }
                Err(e) => return Err(e),
            };
            best_scores.push(plan.best_score());
            if plan.best_score() <= 0.0 {
                termination = "no_improvement";
                break;
            }
            (
                plan.action,
                plan.predictions.iter().map(|p| p.pos).collect::<Vec<_>>(),
                plan.obstacle_scores.clone(),
                Some(plan.best_score()),
            )
        } else {
            match baseline.next_action(&obstacles, stage_targets, &task.actions) {
                Some(a) => (a, Vec::new(), Vec::new(), None),
                None => {
                    termination = "baseline_done";
                    break;
                }
            }
        };

        prev_positions = Some(obstacles.iter().map(|o| o.pos).collect());
        let (moved, _) = state.step(&obstacles, &action)?;
        obstacles = moved;
        prev_depth = Some(depth);

        let realized: Vec<Vec2> = obstacles.iter().map(|o| o.pos).collect();
        for (pred, real) in trace_pred.iter().zip(&realized) {
            pred_pairs.push((*pred, *real));
        }
        steps.push(StepTrace {
            step: t,
            action_index: action.index,
            predictions: trace_pred,
            positions: realized.clone(),
            scores: trace_scores,
            best_score: best,
        });
        positions_history.push(realized);
        t += 1;

        match check_termination(&best_scores, &positions_history) {
            Termination::Continue => {}
            Termination::StopNoImprovement => {
                termination = "no_improvement";
                break;
            }
            Termination::StopStalled => {
                termination = "stalled";
                break;
            }
        }
    }

    // Score against the last-stage targets whether or not the trial got
    // there: an unfinished sequential trial is judged on its q targets.
    let final_targets = task.final_targets();
    let final_distances: Vec<f64> = obstacles
        .iter()
        .zip(final_targets)
        .map(|(o, &tg)| o.pos.distance(tg))
        .collect();
    let success = final_distances.iter().all(|&d| d < SUCCESS_RADIUS_CM);
    let mae_final_cm = final_distances.iter().sum::<f64>() / final_distances.len() as f64;
    let mae_pred_cm = if method.is_learning() && !pred_pairs.is_empty() {
        Some(eval_mae(&pred_pairs)?)
    } else {
        None
    };

    Ok(TrialResult {
        task: task.family,
        method,
        seed,
        steps,
        final_distances,
        success,
        mae_pred_cm,
        mae_final_cm,
        excavations: t,
        termination,
    })
}

/// Per-action outcome of the 15-action prediction probe.
#[derive(Debug, Clone)]
pub struct ProbeRow {
    pub action_index: usize,
    pub predicted: Vec2,
    pub actual: Vec2,
    pub error_cm: f64,
}

/// Probe a model on an undisturbed bed: one obstacle, each action evaluated
/// from identical initial conditions (bed and obstacle reset between
/// actions). Returns per-action rows and the mean error.
pub fn probe_15_actions<M: DynamicsModel>(
    model: &M,
    gen: &GenParams,
    obstacle_pos: Vec2,
) -> Result<(Vec<ProbeRow>, f64)> {
    let base = SlopeState::with_material(
        gen.incline_deg,
        gen.rows,
        gen.cols,
        gen.cell_size,
        gen.fill_depth,
        gen.material,
    )?;
    let obstacle = Obstacle::reference(0, obstacle_pos);
    let depth = render_depth(&base, &[obstacle]);
    let delta = delta_depth(&depth, None, 0)?;
    let actions = action_grid(gen.rows, gen.cols, gen.cell_size, gen.leg_side);

    let mut rows = Vec::with_capacity(actions.len());
    let mut total = 0.0;
    for action in &actions {
        let predicted = model
            .predict_all(&depth, &delta, action, &[obstacle], None)?
            .pop()
            .expect("one obstacle")
            .pos;
        let mut sim = base.clone();
        let (moved, _) = sim.step(&[obstacle], action)?;
        let actual = moved[0].pos;
        let error_cm = predicted.distance(actual);
        total += error_cm;
        rows.push(ProbeRow {
            action_index: action.index,
            predicted,
            actual,
            error_cm,
        });
    }
    let mae = total / rows.len() as f64;
    Ok((rows, mae))
}

/// Curated solvable single-obstacle instances for the oracle-planner check:
/// starts inside the reachable band, targets a straight-ish shot downslope.
pub fn curated_solvable_instances(n: usize, seed: u64) -> Vec<(Vec2, Vec2)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let start = Vec2::new(rng.gen_range(14.0..46.0), rng.gen_range(27.0..38.0));
            let target = Vec2::new(
                start.x + rng.gen_range(-1.5..1.5),
                start.y + rng.gen_range(6.0..12.0),
            );
            (start, target)
        })
        .collect()
}

/// Run `trials_per_cell` seeded trials for every (task, method) pair.
/// Seeds are paired across methods: trial i of every method shares one task
/// instance.
pub fn task_suite(
    gen: &GenParams,
    models: &MethodModels,
    families: &[TaskFamily],
    methods: &[Method],
    trials_per_cell: usize,
    base_seed: u64,
) -> Result<Vec<TrialResult>> {
    let mut results = Vec::new();
    for &family in families {
        for &method in methods {
            for i in 0..trials_per_cell {
                let seed = trial_seed(base_seed, family, i);
                let task = sample_task(family, gen, seed)?;
                results.push(run_trial(gen, &task, method, models, seed)?);
            }
        }
    }
    Ok(results)
}

/// Seed for trial `i` of a family: shared by every method so comparisons
/// are paired.
pub fn trial_seed(base_seed: u64, family: TaskFamily, i: usize) -> u64 {
    base_seed
        .wrapping_add((i as u64 + 1).wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(family.name().len() as u64)
}

#[cfg(test)]
mod tests;
