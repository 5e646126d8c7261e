use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use abc_core::arm::JointConfig;
use abc_core::dataset::{
    build_windows_tagged, episode_path, load_pool, subsample_train, write_atomic, write_episode, Episode, Representation, SplitSpec,
    WindowSample,
};
use abc_core::eval::{run_generalization, run_grid, GridConfig, Terminals, DEMO_COUNTS, GENERALIZATION_AZIMUTHS, GRID_STEP_CAP};
use abc_core::expert::{demo_seeds, demo_side, gen_demo, ExpertConfig};
use abc_core::metadata;
use abc_core::policy::{report_mse, train, Policy, PolicyConfig};
use abc_core::render::Frame;
use abc_core::rollout::{judge_episode, rollout, PolicyController, ROLLOUT_STEPS};
use abc_core::scene::{home_visibility, is_partially_visible, make_intermediate_scene, make_training_scene, Side};
use abc_core::sim::World;
use abc_core::teleop::TeleopServer;

const CONFIG_ECHO: &str = "run_config.txt";

#[derive(Parser)]
#[command(name = "abc", version, about = "Active-perception behavior cloning in a simulated arm workcell")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scripted expert demonstrations.
    GenDemos(GenDemosArgs),
    /// Train one policy on a demo-count subset of the training split.
    Train(TrainArgs),
    /// Train and evaluate every demo-count × representation cell.
    EvalGrid(EvalGridArgs),
    /// Run one closed-loop rollout of a checkpoint.
    Rollout(RolloutArgs),
    /// Compare two checkpoints on intermediate plant placements.
    Generalize(GeneralizeArgs),
    /// Serve the teleoperation websocket protocol.
    TeleopServe(TeleopArgs),
    /// Render one frame for a scene and joint configuration.
    DumpFrame(DumpFrameArgs),
}

#[derive(Args)]
struct GenDemosArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Seed for the train/val/test split written alongside the pool.
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long = "H", default_value_t = 20)]
    history: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    /// Cap on optimizer steps per trained model.
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
}

impl ModelArgs {
    fn config(&self, repr: Representation) -> PolicyConfig {
        PolicyConfig {
            representation: repr,
            history: self.history,
            lr: self.lr,
            batch_size: self.batch,
            epochs: self.epochs,
            max_steps: self.max_steps,
            seed: self.seed,
            ..PolicyConfig::default()
        }
    }

    fn echo(&self) -> Vec<(String, String)> {
        pairs(&[
            ("H", self.history.to_string()),
            ("seed", self.seed.to_string()),
            ("epochs", self.epochs.to_string()),
            ("max_steps", self.max_steps.map_or("none".into(), |s| s.to_string())),
            ("lr", self.lr.to_string()),
            ("batch", self.batch.to_string()),
        ])
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    demos: usize,
    #[arg(long)]
    repr: Representation,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 1)]
    subsample_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalGridArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_delimiter = ',', default_values_t = DEMO_COUNTS)]
    demo_counts: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    subsample_seed: u64,
    #[arg(long, default_value_t = 5)]
    rollouts: usize,
    #[arg(long, default_value_t = 1001)]
    rollout_seed: u64,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Train every cell for the full epoch budget instead of the default step cap.
    #[arg(long, conflicts_with = "max_steps")]
    no_step_cap: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Intermediate plant azimuth in radians; overrides --side.
    #[arg(long, allow_hyphen_values = true)]
    azimuth: Option<f64>,
    #[arg(long, default_value = "left")]
    side: Side,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = ROLLOUT_STEPS)]
    steps: usize,
    /// Directory for the trace episode and the config echo.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GeneralizeArgs {
    #[arg(long)]
    ckpt_delta: PathBuf,
    #[arg(long)]
    ckpt_pos: PathBuf,
    /// Dataset whose training split supplies the demonstrated terminal poses.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 64)]
    demos: usize,
    #[arg(long, default_value_t = 1)]
    subsample_seed: u64,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = GENERALIZATION_AZIMUTHS)]
    azimuths: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = 2002)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TeleopArgs {
    #[arg(long, default_value_t = 8765)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DumpFrameArgs {
    #[arg(long, default_value = "left")]
    side: Side,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Six comma-separated joint values; defaults to the home pose.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    joints: Option<Vec<f64>>,
    /// Output file; `.ppm` gets a header, anything else raw RGB bytes.
    #[arg(long)]
    out: PathBuf,
}

/// Invalid flag combinations found after parsing.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn pairs(items: &[(&str, String)]) -> Vec<(String, String)> {
    items.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn write_echo(dir: &Path, command: &str, mut items: Vec<(String, String)>) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    items.insert(0, ("command".into(), command.into()));
    write_atomic(&dir.join(CONFIG_ECHO), metadata::encode(&items).as_bytes())?;
    Ok(())
}

fn load_split(data: &Path, pool: &[Episode]) -> Result<SplitSpec> {
    let path = data.join("splits.txt");
    if path.exists() {
        let text = fs::read_to_string(&path)?;
        Ok(SplitSpec::from_text(&text)?)
    } else {
        bail!(
            "{} is missing; regenerate the dataset with gen-demos (pool of {} episodes)",
            path.display(),
            pool.len()
        )
    }
}

fn windows<'a>(pool: &'a [Episode], ids: &[usize], h: usize) -> Result<Vec<WindowSample<'a>>> {
    let mut out = Vec::new();
    for &i in ids {
        out.extend(build_windows_tagged(&pool[i], i, h)?);
    }
    Ok(out)
}

fn gen_demos(a: GenDemosArgs) -> Result<()> {
    if a.n == 0 || !a.n.is_multiple_of(2) {
        return Err(usage(format!("--n must be even and positive, got {}", a.n)));
    }
    let split_seed = a.split_seed.unwrap_or(a.seed);
    write_echo(
        &a.out,
        "gen-demos",
        pairs(&[
            ("n", a.n.to_string()),
            ("seed", a.seed.to_string()),
            ("split_seed", split_seed.to_string()),
        ]),
    )?;
    let cfg = ExpertConfig::default();
    let mut manifest = String::from("id,side,scene_seed,expert_seed,azimuth,range,height\n");
    let mut sides = Vec::new();
    for i in 0..a.n {
        let ep = gen_demo(a.seed, i, &cfg).with_context(|| format!("demonstration {i}"))?;
        let verdict = judge_episode(&ep);
        if !verdict.success {
            bail!("expert self-check failed on demonstration {i}: {verdict}");
        }
        let (scene_seed, expert_seed) = demo_seeds(a.seed, i);
        let s = &ep.meta.scene;
        manifest.push_str(&format!(
            "{i},{},{scene_seed},{expert_seed},{},{},{}\n",
            demo_side_label(i),
            s.plant_azimuth,
            s.plant_range,
            s.plant_height
        ));
        write_episode(&ep, &episode_path(&a.out, i))?;
        sides.push(ep.side());
    }
    write_atomic(&a.out.join("manifest.csv"), manifest.as_bytes())?;
    match abc_core::dataset::make_splits_from_sides(&sides, split_seed) {
        Ok(split) => write_atomic(&a.out.join("splits.txt"), split.to_text().as_bytes())?,
        Err(e) => log::warn!("no splits written: {e}"),
    }
    println!("wrote {} episodes to {}", a.n, a.out.join("pool").display());
    Ok(())
}

fn demo_side_label(i: usize) -> &'static str {
    match demo_side(i) {
        Side::Left => "left",
        Side::Right => "right",
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = a.model.config(a.repr);
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    if a.demos == 0 || !a.demos.is_multiple_of(2) {
        return Err(usage(format!("--demos must be even and positive, got {}", a.demos)));
    }
    let mut echo = pairs(&[
        ("data", a.data.display().to_string()),
        ("demos", a.demos.to_string()),
        ("repr", a.repr.to_string()),
        ("subsample_seed", a.subsample_seed.to_string()),
    ]);
    echo.extend(a.model.echo());

    let pool = load_pool(&a.data)?;
    let split = load_split(&a.data, &pool)?;
    let sub = subsample_train(&split, a.demos, a.subsample_seed).map_err(|e| usage(e.to_string()))?;
    write_echo(&a.out, "train", echo)?;
    let train_set = windows(&pool, &sub.train_ids, cfg.history)?;
    let val = windows(&pool, &split.val_ids, cfg.history)?;
    let trained = train(&cfg, &train_set, &val)?;
    let meta = pairs(&[
        ("demo_count", a.demos.to_string()),
        ("best_epoch", trained.best_epoch.to_string()),
        (
            "train_ids",
            sub.train_ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","),
        ),
    ]);
    trained.policy.save(&a.out.join("policy.abcw"), &meta)?;
    write_atomic(&a.out.join("train_log.csv"), trained.log_text().as_bytes())?;
    let train_mse = report_mse(&trained.policy, &train_set)?;
    let val_mse = report_mse(&trained.policy, &val)?;
    println!(
        "trained {} on {} demos ({} samples, {} steps, best epoch {})",
        a.repr,
        a.demos,
        train_set.len(),
        trained.steps,
        trained.best_epoch
    );
    println!("train MSE {train_mse} val MSE {val_mse} (x10^3)");
    Ok(())
}

fn cmd_eval_grid(mut a: EvalGridArgs) -> Result<()> {
    if !a.no_step_cap && a.model.max_steps.is_none() {
        a.model.max_steps = Some(GRID_STEP_CAP);
    }
    let policy = a.model.config(Representation::Delta);
    policy.validate().map_err(|e| usage(e.to_string()))?;
    if a.jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    if a.demo_counts.iter().any(|&n| n == 0 || n % 2 != 0) {
        return Err(usage("demo counts must be even and positive"));
    }
    let mut echo = pairs(&[
        ("data", a.data.display().to_string()),
        (
            "demo_counts",
            a.demo_counts.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(","),
        ),
        ("subsample_seed", a.subsample_seed.to_string()),
        ("rollouts", a.rollouts.to_string()),
        ("rollout_seed", a.rollout_seed.to_string()),
        ("jobs", a.jobs.to_string()),
    ]);
    echo.extend(a.model.echo());
    write_echo(&a.out, "eval-grid", echo)?;

    let pool = load_pool(&a.data)?;
    let split = load_split(&a.data, &pool)?;
    let cfg = GridConfig {
        demo_counts: a.demo_counts,
        policy,
        subsample_seed: a.subsample_seed,
        rollouts: a.rollouts,
        rollout_seed: a.rollout_seed,
        steps: ROLLOUT_STEPS,
        jobs: a.jobs,
    };
    let grid = run_grid(&pool, &split, &cfg, Some(&a.out))?;
    print!("{}", grid.to_text());
    for c in grid.cells.iter().filter(|c| c.error.is_some()) {
        eprintln!(
            "cell {} {} failed: {}",
            c.demo_count,
            c.representation,
            c.error.as_deref().unwrap_or("")
        );
    }
    Ok(())
}

fn cmd_rollout(a: RolloutArgs) -> Result<()> {
    let scene = match a.azimuth {
        Some(az) => {
            let s = make_intermediate_scene(az, a.seed).map_err(|e| usage(e.to_string()))?;
            let vis = home_visibility(&s);
            if !is_partially_visible(vis) {
                return Err(usage(format!(
                    "plant at azimuth {az} is not partially visible at home (fraction {vis:.3})"
                )));
            }
            s
        }
        None => make_training_scene(a.side, a.seed)?,
    };
    write_echo(
        &a.out,
        "rollout",
        pairs(&[
            ("ckpt", a.ckpt.display().to_string()),
            ("azimuth", a.azimuth.map_or("none".into(), |v| v.to_string())),
            ("side", a.side.to_string()),
            ("seed", a.seed.to_string()),
            ("steps", a.steps.to_string()),
        ]),
    )?;
    let (policy, _) = Policy::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let r = rollout(&mut PolicyController::new(&policy), &scene, a.steps)?;
    println!("t,q0,q1,q2,q3,q4,q5,centering_error_px");
    for (t, q) in r.joints.iter().enumerate() {
        let e = r.centering_error_px[t].map_or("none".into(), |e| format!("{e:.2}"));
        let qs: Vec<String> = q.0.iter().map(|v| format!("{v:.4}")).collect();
        println!("{t},{},{e}", qs.join(","));
    }
    println!("close events: {:?}", r.gripper_close_events);
    println!("verdict: {}", r.verdict);
    write_episode(&r.to_episode(), &a.out.join("trace.abc1"))?;
    Ok(())
}

fn cmd_generalize(a: GeneralizeArgs) -> Result<()> {
    let (delta, _) = Policy::load(&a.ckpt_delta)?;
    let (pos, _) = Policy::load(&a.ckpt_pos)?;
    if delta.config.representation != Representation::Delta || pos.config.representation != Representation::Absolute {
        return Err(usage("--ckpt-delta must be a delta model and --ckpt-pos an absolute one"));
    }
    let pool = load_pool(&a.data)?;
    let split = load_split(&a.data, &pool)?;
    let sub = subsample_train(&split, a.demos, a.subsample_seed).map_err(|e| usage(e.to_string()))?;
    write_echo(
        &a.out,
        "generalize",
        pairs(&[
            ("ckpt_delta", a.ckpt_delta.display().to_string()),
            ("ckpt_pos", a.ckpt_pos.display().to_string()),
            ("data", a.data.display().to_string()),
            ("demos", a.demos.to_string()),
            ("subsample_seed", a.subsample_seed.to_string()),
            ("azimuths", a.azimuths.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")),
            ("trials", a.trials.to_string()),
            ("seed", a.seed.to_string()),
        ]),
    )?;
    let terminals = Terminals::from_episodes(sub.train_ids.iter().map(|&i| &pool[i]));
    let table = run_generalization(&[&delta, &pos], &terminals, &a.azimuths, a.trials, a.seed, ROLLOUT_STEPS)?;
    write_atomic(&a.out.join("generalization.csv"), table.to_csv().as_bytes())?;
    write_atomic(&a.out.join("generalization.txt"), table.to_text().as_bytes())?;
    print!("{}", table.to_text());
    Ok(())
}

fn cmd_teleop(a: TeleopArgs) -> Result<()> {
    write_echo(
        &a.out,
        "teleop-serve",
        pairs(&[("host", a.host.clone()), ("port", a.port.to_string())]),
    )?;
    let server = TeleopServer::bind((a.host.as_str(), a.port), &a.out).with_context(|| format!("binding {}:{}", a.host, a.port))?;
    println!("teleop server listening on ws://{}", server.local_addr()?);
    server.serve()?;
    Ok(())
}

fn cmd_dump_frame(a: DumpFrameArgs) -> Result<()> {
    let q = match &a.joints {
        None => JointConfig::HOME,
        Some(v) if v.len() == 6 => JointConfig::new([v[0], v[1], v[2], v[3], v[4], v[5]]).map_err(|e| usage(e.to_string()))?,
        Some(v) => return Err(usage(format!("--joints needs 6 values, got {}", v.len()))),
    };
    let scene = make_training_scene(a.side, a.seed)?;
    let frame: Frame = World::new(&scene).observe(&q)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let bytes = if a.out.extension().is_some_and(|e| e == "ppm") {
        let mut buf = Vec::new();
        frame.write_ppm(&mut buf)?;
        buf
    } else {
        frame.as_bytes().to_vec()
    };
    write_atomic(&a.out, &bytes)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let result = match cli.command {
        Command::GenDemos(a) => gen_demos(a),
        Command::Train(a) => cmd_train(a),
        Command::EvalGrid(a) => cmd_eval_grid(a),
        Command::Rollout(a) => cmd_rollout(a),
        Command::Generalize(a) => cmd_generalize(a),
        Command::TeleopServe(a) => cmd_teleop(a),
        Command::DumpFrame(a) => cmd_dump_frame(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
