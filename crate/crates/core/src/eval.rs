//! Experiment drivers: the demo-count × representation grid and the
//! intermediate-placement study.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use thiserror::Error;

use crate::arm::JointConfig;
use crate::dataset::{build_windows_tagged, subsample_train, write_atomic, DatasetError, Episode, Representation, SplitSpec, WindowSample};
use crate::expert::demo_seeds;
use crate::policy::{report_mse, sample_ids, train, Policy, PolicyConfig, PolicyError};
use crate::rollout::{rollout, FailureReason, PolicyController, ROLLOUT_STEPS};
use crate::scene::{home_visibility, is_partially_visible, make_intermediate_scene, make_training_scene, SceneSpec, Side, SideLabel};

pub const DEMO_COUNTS: [usize; 6] = [2, 4, 8, 16, 32, 64];
pub const GENERALIZATION_AZIMUTHS: [f64; 6] = [-0.40, -0.30, -0.20, 0.20, 0.30, 0.40];
/// L∞ distance over the arm joints below which a final pose counts as a
/// demonstrated terminal configuration.
pub const NEAR_DEMO_TOL: f64 = 0.1;
/// Default cap on optimizer steps per grid cell.
pub const GRID_STEP_CAP: usize = 2000;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("invalid grid config: {0}")]
    Config(String),
}

#[derive(Debug, Clone)]
pub struct GridConfig {
    pub demo_counts: Vec<usize>,
    /// Template for every cell; the representation is set per cell.
    pub policy: PolicyConfig,
    pub subsample_seed: u64,
    pub rollouts: usize,
    pub rollout_seed: u64,
    pub steps: usize,
    pub jobs: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            demo_counts: DEMO_COUNTS.to_vec(),
            policy: PolicyConfig {
                max_steps: Some(GRID_STEP_CAP),
                ..PolicyConfig::default()
            },
            subsample_seed: 1,
            rollouts: 5,
            rollout_seed: 1001,
            steps: ROLLOUT_STEPS,
            jobs: 1,
        }
    }
}

/// Rollout scenes shared by every grid cell: sides alternate starting left.
pub fn eval_scenes(seed: u64, n: usize) -> Vec<SceneSpec> {
    (0..n)
        .map(|k| {
            let side = if k % 2 == 0 { Side::Left } else { Side::Right };
            make_training_scene(side, demo_seeds(seed, k).0).expect("training bands are valid")
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub demo_count: usize,
    pub representation: Representation,
    pub train_ids: Vec<usize>,
    pub train_samples: usize,
    /// Episode id and frame index of every training sample, in order.
    pub sample_ids: Vec<(usize, usize)>,
    pub train_mse: f64,
    pub test_mse: f64,
    pub outcomes: Vec<Option<FailureReason>>,
    pub best_epoch: usize,
    pub steps: u64,
    pub error: Option<String>,
}

impl CellResult {
    pub fn successes(&self) -> usize {
        self.outcomes.iter().filter(|o| o.is_none()).count()
    }
}

#[derive(Debug, Clone)]
pub struct EvalGrid {
    pub split: SplitSpec,
    pub cells: Vec<CellResult>,
    pub rollouts: usize,
}

impl EvalGrid {
    pub fn cell(&self, demo_count: usize, repr: Representation) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.demo_count == demo_count && c.representation == repr)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("demo_count,representation,train_mse_e3,test_mse_e3,successes\n");
        for c in &self.cells {
            if c.error.is_some() {
                let _ = writeln!(s, "{},{},,,", c.demo_count, c.representation);
            } else {
                let _ = writeln!(
                    s,
                    "{},{},{:.2},{:.2},{}",
                    c.demo_count,
                    c.representation,
                    c.train_mse * 1e3,
                    c.test_mse * 1e3,
                    c.successes()
                );
            }
        }
        s
    }

    /// Side-by-side table in the layout of the paper's results table.
    pub fn to_text(&self) -> String {
        let mut counts: Vec<usize> = self.cells.iter().map(|c| c.demo_count).collect();
        counts.dedup();
        let mut s = String::new();
        let _ = writeln!(s, "{:>10} | {:^27} | {:^27}", "", "Delta", "Position");
        let _ = writeln!(
            s,
            "{:>10} | {:>8} {:>8} {:>9} | {:>8} {:>8} {:>9}",
            "Demo Count", "Train", "Test", "Success", "Train", "Test", "Success"
        );
        let _ = writeln!(s, "{}", "-".repeat(70));
        for n in counts {
            let _ = write!(s, "{n:>10}");
            for repr in [Representation::Delta, Representation::Absolute] {
                match self.cell(n, repr) {
                    Some(c) if c.error.is_none() => {
                        let _ = write!(
                            s,
                            " | {:>8.2} {:>8.2} {:>9}",
                            c.train_mse * 1e3,
                            c.test_mse * 1e3,
                            format!("{}/{}", c.successes(), self.rollouts)
                        );
                    }
                    _ => {
                        let _ = write!(s, " | {:>8} {:>8} {:>9}", "error", "-", "-");
                    }
                }
            }
            s.push('\n');
        }
        s.push_str("MSE values scaled by 10^3.\n");
        s
    }
}

fn windows<'a>(pool: &'a [Episode], ids: &[usize], h: usize) -> Result<Vec<WindowSample<'a>>, DatasetError> {
    let mut out = Vec::new();
    for &i in ids {
        out.extend(build_windows_tagged(&pool[i], i, h)?);
    }
    Ok(out)
}

pub fn checkpoint_name(repr: Representation, demo_count: usize) -> String {
    format!("{repr}_{demo_count:02}.abcw")
}

/// Trains and evaluates every (demo count, representation) cell. Cell
/// failures are recorded in the cell; `out_dir` receives checkpoints, logs
/// and the grid files.
pub fn run_grid(pool: &[Episode], split: &SplitSpec, cfg: &GridConfig, out_dir: Option<&Path>) -> Result<EvalGrid, EvalError> {
    if cfg.jobs == 0 {
        return Err(EvalError::Config("jobs must be at least 1".into()));
    }
    cfg.policy.validate()?;
    let h = cfg.policy.history;
    let val = windows(pool, &split.val_ids, h)?;
    let test = windows(pool, &split.test_ids, h)?;
    let scenes = eval_scenes(cfg.rollout_seed, cfg.rollouts);

    let mut subs = Vec::new();
    for &n in &cfg.demo_counts {
        let sub = subsample_train(split, n, cfg.subsample_seed)?;
        let samples = windows(pool, &sub.train_ids, h)?;
        subs.push((n, sub.train_ids, samples));
    }
    let jobs: Vec<(usize, Representation)> = (0..subs.len())
        .flat_map(|i| [(i, Representation::Delta), (i, Representation::Absolute)])
        .collect();

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir.join("cells"))?;
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CellResult>>> = Mutex::new(vec![None; jobs.len()]);
    std::thread::scope(|s| {
        for _ in 0..cfg.jobs.min(jobs.len()) {
            s.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(i, repr)) = jobs.get(j) else { break };
                let (n, ids, samples) = &subs[i];
                let cell = run_cell(*n, repr, ids, samples, &val, &test, &scenes, cfg, out_dir);
                results.lock().expect("no worker panics while holding the lock")[j] = Some(cell);
            });
        }
    });
    let cells: Vec<CellResult> = results
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|c| c.expect("every job ran"))
        .collect();
    let grid = EvalGrid {
        split: split.clone(),
        cells,
        rollouts: cfg.rollouts,
    };
    if let Some(dir) = out_dir {
        write_atomic(&dir.join("grid.csv"), grid.to_csv().as_bytes())?;
        write_atomic(&dir.join("grid.txt"), grid.to_text().as_bytes())?;
    }
    Ok(grid)
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    n: usize,
    repr: Representation,
    ids: &[usize],
    samples: &[WindowSample],
    val: &[WindowSample],
    test: &[WindowSample],
    scenes: &[SceneSpec],
    cfg: &GridConfig,
    out_dir: Option<&Path>,
) -> CellResult {
    let mut cell = CellResult {
        demo_count: n,
        representation: repr,
        train_ids: ids.to_vec(),
        train_samples: samples.len(),
        sample_ids: sample_ids(samples).iter().map(|s| (s.episode, s.t)).collect(),
        train_mse: f64::NAN,
        test_mse: f64::NAN,
        outcomes: Vec::new(),
        best_epoch: 0,
        steps: 0,
        error: None,
    };
    let run = || -> Result<_, EvalError> {
        let pcfg = PolicyConfig {
            representation: repr,
            ..cfg.policy.clone()
        };
        let trained = train(&pcfg, samples, val)?;
        let train_mse = report_mse(&trained.policy, samples)?.mse;
        let test_mse = report_mse(&trained.policy, test)?.mse;
        let mut outcomes = Vec::new();
        for scene in scenes {
            let r = rollout(&mut PolicyController::new(&trained.policy), scene, cfg.steps)?;
            outcomes.push(r.verdict.reason);
        }
        if let Some(dir) = out_dir {
            let name = checkpoint_name(repr, n);
            let meta = vec![
                ("demo_count".to_string(), n.to_string()),
                ("best_epoch".to_string(), trained.best_epoch.to_string()),
            ];
            trained.policy.save(&dir.join("cells").join(&name), &meta)?;
            write_atomic(
                &dir.join("cells").join(name.replace(".abcw", ".log")),
                trained.log_text().as_bytes(),
            )?;
        }
        Ok((trained.best_epoch, trained.steps, train_mse, test_mse, outcomes))
    };
    match run() {
        Ok((best_epoch, steps, train_mse, test_mse, outcomes)) => {
            log::info!(
                "cell {n} {repr}: train {:.2} test {:.2} successes {}/{}",
                train_mse * 1e3,
                test_mse * 1e3,
                outcomes.iter().filter(|o| o.is_none()).count(),
                outcomes.len()
            );
            cell.best_epoch = best_epoch;
            cell.steps = steps;
            cell.train_mse = train_mse;
            cell.test_mse = test_mse;
            cell.outcomes = outcomes;
        }
        Err(e) => {
            log::error!("cell {n} {repr} failed: {e}");
            cell.error = Some(e.to_string());
        }
    }
    cell
}

/// Final arm configurations of a set of demonstrations, split by side.
#[derive(Debug, Clone, Default)]
pub struct Terminals {
    pub left: Vec<JointConfig>,
    pub right: Vec<JointConfig>,
}

impl Terminals {
    pub fn from_episodes<'a>(eps: impl IntoIterator<Item = &'a Episode>) -> Self {
        let mut t = Terminals::default();
        for ep in eps {
            let q = *ep.joints.last().expect("validated episodes are non-empty");
            match ep.side() {
                SideLabel::Left => t.left.push(q),
                SideLabel::Right => t.right.push(q),
                SideLabel::Intermediate => {}
            }
        }
        t
    }

    /// L∞ distance over the arm joints to the nearest left and right terminal.
    pub fn distances(&self, q: &JointConfig) -> (f64, f64) {
        let nearest = |set: &[JointConfig]| set.iter().map(|t| q.arm_distance_linf(t)).fold(f64::INFINITY, f64::min);
        (nearest(&self.left), nearest(&self.right))
    }
}

#[derive(Debug, Clone)]
pub struct GenFailure {
    pub scene_seed: u64,
    pub reason: FailureReason,
    pub dist_left: f64,
    pub dist_right: f64,
}

impl GenFailure {
    pub fn near_demo(&self) -> bool {
        self.dist_left.min(self.dist_right) <= NEAR_DEMO_TOL
    }
}

#[derive(Debug, Clone)]
pub struct GenCell {
    pub azimuth: f64,
    pub representation: Representation,
    /// Why the azimuth was not run, if it was skipped.
    pub skipped: Option<String>,
    pub successes: usize,
    pub trials: usize,
    pub failures: Vec<GenFailure>,
}

#[derive(Debug, Clone)]
pub struct GenTable {
    pub cells: Vec<GenCell>,
}

impl GenTable {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>8} {:>9} {:>8} {:>11} {:>30}",
            "azimuth", "model", "success", "near_demo", "failures (reason dL dR)"
        );
        for c in &self.cells {
            let model = match c.representation {
                Representation::Delta => "delta",
                Representation::Absolute => "position",
            };
            if let Some(why) = &c.skipped {
                let _ = writeln!(s, "{:>8.2} {model:>9} skipped: {why}", c.azimuth);
                continue;
            }
            let near = c.failures.iter().filter(|f| f.near_demo()).count();
            let details: Vec<String> = c
                .failures
                .iter()
                .map(|f| format!("{} {:.2} {:.2}", f.reason, f.dist_left, f.dist_right))
                .collect();
            let _ = writeln!(
                s,
                "{:>8.2} {model:>9} {:>8} {:>11} {}",
                c.azimuth,
                format!("{}/{}", c.successes, c.trials),
                format!("{}/{}", near, c.failures.len()),
                details.join("; ")
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("azimuth,representation,skipped,successes,trials,failures,near_demo_failures\n");
        for c in &self.cells {
            let near = c.failures.iter().filter(|f| f.near_demo()).count();
            let _ = writeln!(
                s,
                "{:.2},{},{},{},{},{},{}",
                c.azimuth,
                c.representation,
                c.skipped.is_some(),
                c.successes,
                c.trials,
                c.failures.len(),
                near
            );
        }
        s
    }
}

/// Scenes for one azimuth, or the reason the azimuth cannot be used.
pub fn generalization_scenes(azimuth: f64, seed: u64, trials: usize) -> Result<Vec<SceneSpec>, String> {
    let stream_base = (azimuth * 1000.0).round() as i64 as u64;
    (0..trials)
        .map(|k| {
            let s = demo_seeds(seed ^ stream_base, k).0;
            let scene = make_intermediate_scene(azimuth, s).map_err(|e| e.to_string())?;
            let vis = home_visibility(&scene);
            if is_partially_visible(vis) {
                Ok(scene)
            } else {
                Err(format!("scene seed {s}: visible fraction {vis:.3} at home pose is not partial"))
            }
        })
        .collect()
}

/// Runs each policy on seeded intermediate placements. Azimuths whose scenes
/// are not partially visible at the home pose are skipped and flagged.
pub fn run_generalization(
    policies: &[&Policy],
    terminals: &Terminals,
    azimuths: &[f64],
    trials: usize,
    seed: u64,
    steps: usize,
) -> Result<GenTable, EvalError> {
    let mut cells = Vec::new();
    for &az in azimuths {
        let scenes = generalization_scenes(az, seed, trials);
        for policy in policies {
            let repr = policy.config.representation;
            let scenes = match &scenes {
                Ok(s) => s,
                Err(why) => {
                    cells.push(GenCell {
                        azimuth: az,
                        representation: repr,
                        skipped: Some(why.clone()),
                        successes: 0,
                        trials: 0,
                        failures: Vec::new(),
                    });
                    continue;
                }
            };
            let mut cell = GenCell {
                azimuth: az,
                representation: repr,
                skipped: None,
                successes: 0,
                trials: scenes.len(),
                failures: Vec::new(),
            };
            for scene in scenes {
                let r = rollout(&mut PolicyController::new(policy), scene, steps)?;
                match r.verdict.reason {
                    None => cell.successes += 1,
                    Some(reason) => {
                        let (dist_left, dist_right) = terminals.distances(&r.final_joints());
                        cell.failures.push(GenFailure {
                            scene_seed: scene.seed,
                            reason,
                            dist_left,
                            dist_right,
                        });
                    }
                }
            }
            cells.push(cell);
        }
    }
    Ok(GenTable { cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arm::JointConfig;
    use crate::dataset::make_splits;
    use crate::expert::{gen_demo_set, ExpertConfig};

    #[test]
    fn eval_scenes_alternate_sides() {
        let s = eval_scenes(1001, 5);
        let sides: Vec<SideLabel> = s.iter().map(|s| s.side_label).collect();
        use SideLabel::*;
        assert_eq!(sides, [Left, Right, Left, Right, Left]);
        assert_eq!(eval_scenes(1001, 5), s);
    }

    #[test]
    fn near_zero_azimuth_is_skipped() {
        assert!(generalization_scenes(0.05, 1, 5).is_err());
        for az in GENERALIZATION_AZIMUTHS {
            let s = generalization_scenes(az, 1, 5).unwrap();
            assert_eq!(s.len(), 5);
            assert!(s.iter().all(|s| (s.plant_azimuth - az).abs() <= 0.03 + 1e-12));
        }
    }

    #[test]
    fn terminal_distances() {
        let mut t = Terminals::default();
        t.left.push(JointConfig([0.25, 0.0, 0.0, 0.5, 0.0, 0.0]));
        t.right.push(JointConfig([-0.25, 0.0, 0.0, 0.5, 0.0, 0.0]));
        let q = JointConfig([0.2, 0.0, 0.0, 0.45, 0.0, 1.0]);
        let (l, r) = t.distances(&q);
        assert!((l - 0.05).abs() < 1e-12);
        assert!((r - 0.45).abs() < 1e-12);
        let f = GenFailure {
            scene_seed: 0,
            reason: FailureReason::NoClose,
            dist_left: l,
            dist_right: r,
        };
        assert!(f.near_demo());
    }

    #[test]
    fn tiny_grid_shape_and_parity() {
        let pool = gen_demo_set(20, 3, &ExpertConfig::default()).unwrap();
        let split = make_splits(&pool, 3).unwrap();
        let cfg = GridConfig {
            demo_counts: vec![2, 4],
            policy: PolicyConfig {
                history: 2,
                channels: vec![2, 2, 2, 2],
                feature_dim: 4,
                hidden_dim: 4,
                epochs: 1,
                max_steps: Some(2),
                ..PolicyConfig::default()
            },
            rollouts: 2,
            steps: 3,
            ..GridConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let grid = run_grid(&pool, &split, &cfg, Some(dir.path())).unwrap();
        assert_eq!(grid.cells.len(), 4);
        for n in [2, 4] {
            let d = grid.cell(n, Representation::Delta).unwrap();
            let a = grid.cell(n, Representation::Absolute).unwrap();
            assert!(d.error.is_none() && a.error.is_none());
            assert_eq!(d.sample_ids, a.sample_ids);
            assert_eq!(d.train_ids.len(), n);
            assert_eq!(d.outcomes.len(), 2);
        }
        let csv = std::fs::read_to_string(dir.path().join("grid.csv")).unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert!(dir.path().join("cells").join("absolute_04.abcw").exists());
        assert!(grid.to_text().contains("Position"));
    }
}
