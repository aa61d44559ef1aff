use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use quadamp::checkpoint::Checkpoint;
use quadamp::config::TrainConfig;
use quadamp::eval::{
    classify_gait, evaluate_sinusoid, evaluate_tracking, gait_diagram, run_rollout, EvalOptions, PolicyActor, SinusoidSpec, TABLE_SPEEDS,
};
use quadamp::kinematics::Morphology;
use quadamp::mocap::{generate_procedural_gait, GaitKind, MotionClip, ReferenceDataset};
use quadamp::rewards::{CommandTarget, RewardMode};
use quadamp::sim::{self, EpisodeParams};
use quadamp::trainer::{joint_state_at_rest, load_dataset, reference_start, train, Trainer};

#[derive(Parser)]
#[command(name = "quadamp", version, about = "Adversarial motion priors for a planar quadruped")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and write metrics.csv plus checkpoints.
    Train(TrainArgs),
    /// Measure speed tracking and cost of transport at fixed commands.
    EvalTracking(TrackingArgs),
    /// Track a sinusoidal velocity command.
    EvalSinusoid(SinusoidArgs),
    /// Extract a gait diagram from a policy rollout or a clip and classify it.
    Gait(GaitArgs),
    /// Write procedural reference clips.
    GenData(GenDataArgs),
    /// Fill joint angles of a keypoint-only clip by inverse kinematics.
    Retarget(RetargetArgs),
    /// Serve a policy over websocket for interactive teleoperation.
    Teleop(TeleopArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training config; overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "desk", value_parser = ["desk", "full"])]
    preset: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mode: Option<RewardMode>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Print every Nth iteration.
    #[arg(long, default_value_t = 10)]
    log_every: u64,
}

#[derive(Args)]
struct TrackingArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = TABLE_SPEEDS)]
    speeds: Vec<f64>,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(3..))]
    rollouts: u64,
    /// Seconds per rollout.
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sample episode parameters instead of using nominal ones.
    #[arg(long)]
    randomize: bool,
    /// Sample actions instead of acting with the policy mean.
    #[arg(long)]
    stochastic: bool,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SinusoidArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    mean: f64,
    #[arg(long, default_value_t = 0.4)]
    amplitude: f64,
    #[arg(long, default_value_t = 0.0)]
    yaw_amplitude: f64,
    #[arg(long, default_value_t = 5.0)]
    period: f64,
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    stochastic: bool,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct GaitArgs {
    #[arg(long, conflicts_with = "clip", required_unless_present = "clip")]
    ckpt: Option<PathBuf>,
    /// Analyse a reference clip instead of a policy.
    #[arg(long)]
    clip: Option<PathBuf>,
    #[arg(long, default_value_t = 0.8)]
    speed: f64,
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    stochastic: bool,
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values = ["pace", "trot", "canter", "turn-in-place"])]
    gaits: Vec<GaitKind>,
    #[arg(long, default_value_t = 1.1)]
    duration: f64,
    #[arg(long, default_value_t = 30.0)]
    fps: f64,
}

#[derive(Args)]
struct RetargetArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TeleopArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = quadamp_teleop::DEFAULT_ADDR)]
    addr: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train(a),
        Command::EvalTracking(a) => cmd_eval_tracking(a),
        Command::EvalSinusoid(a) => cmd_eval_sinusoid(a),
        Command::Gait(a) => cmd_gait(a),
        Command::GenData(a) => cmd_gen_data(a),
        Command::Retarget(a) => cmd_retarget(a),
        Command::Teleop(a) => cmd_teleop(a),
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

fn write_output(path: &Option<PathBuf>, text: &str) -> Result<()> {
    if let Some(path) = path {
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::preset(&a.preset).expect("clap restricts preset names"),
    };
    if let Some(mode) = a.mode {
        config.reward_mode = mode;
    }
    if let Some(n) = a.iterations {
        config.ppo.iterations = n;
    }
    if let Some(seed) = a.seed {
        config.ppo.seed = seed;
    }
    let mut trainer = Trainer::new(config)?;
    let every = a.log_every.max(1);
    let summary = train(&mut trainer, &a.out, |m| {
        if m.iteration % every == 0 || m.iteration == 1 {
            println!(
                "iter {:>5}  task {:.3}  style {:.3}  D(real) {:+.2}  D(fake) {:+.2}  kl {:.4}  lr {:.1e}  track err {:.3}",
                m.iteration, m.mean_task_reward, m.mean_style_reward, m.disc_real_score, m.disc_fake_score, m.kl, m.lr, m.tracking_error
            );
        }
    })?;
    println!("metrics: {}", summary.metrics_path.display());
    if let Some(last) = summary.checkpoints.last() {
        println!("checkpoint: {}", last.display());
    }
    Ok(())
}

fn cmd_eval_tracking(a: TrackingArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let dataset = load_dataset(&ckpt.config)?;
    let actor = PolicyActor::from_checkpoint(&ckpt, a.stochastic);
    let opts = EvalOptions { rollouts: a.rollouts as usize, duration: a.duration, seed: a.seed, randomize: a.randomize };
    let report = evaluate_tracking(&actor, &ckpt.config, &dataset, &a.speeds, &opts)?;
    print!("{}", report.to_text());
    write_output(&a.csv, &report.to_csv())
}

fn rest_state(config: &TrainConfig) -> sim::SimState {
    let (base, joints) = joint_state_at_rest(&config.morphology);
    sim::reset_from_reference(&config.morphology, &config.sim, &base, &joints)
}

fn cmd_eval_sinusoid(a: SinusoidArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let actor = PolicyActor::from_checkpoint(&ckpt, a.stochastic);
    let spec = SinusoidSpec { mean_vx: a.mean, amplitude_vx: a.amplitude, amplitude_yaw: a.yaw_amplitude, period: a.period, duration: a.duration };
    let trace = evaluate_sinusoid(&actor, &ckpt.config, rest_state(&ckpt.config), &spec, a.seed)?;
    println!(
        "{} samples over {:.2} s, rms linear error {:.4} m/s, rms angular error {:.4} rad/s",
        trace.time.len(),
        trace.time.len() as f64 / ckpt.config.sim.policy_hz as f64,
        trace.rms_linear,
        trace.rms_angular
    );
    write_output(&a.csv, &trace.to_csv())
}

fn cmd_gait(a: GaitArgs) -> Result<()> {
    let (contacts, dt, duration) = match (&a.ckpt, &a.clip) {
        (Some(path), _) => {
            let ckpt = load_checkpoint(path)?;
            let config = &ckpt.config;
            let dataset = load_dataset(config)?;
            let actor = PolicyActor::from_checkpoint(&ckpt, a.stochastic);
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(a.seed);
            let start = reference_start(&config.morphology, &config.sim, &dataset, &mut rng);
            let trace = run_rollout(&actor, config, &EpisodeParams::nominal(&config.sim), start, a.duration, &mut rng, |_| {
                CommandTarget::forward(a.speed)
            })?;
            if trace.terminated {
                eprintln!("warning: the robot fell after {:.2} s", trace.time.last().copied().unwrap_or(0.0));
            }
            let dt = config.sim.policy_dt();
            let duration = trace.contacts.len() as f64 * dt;
            (trace.contacts, dt, duration)
        }
        (None, Some(path)) => {
            let morph = Morphology::default();
            let clip = MotionClip::load(path, &morph)?;
            (clip.contacts(1e-9), 1.0 / clip.fps, clip.duration())
        }
        (None, None) => bail!("either --ckpt or --clip is required"),
    };
    let diagram = gait_diagram(&contacts, dt)?;
    print!("{}", diagram.to_text());
    println!("gait: {}", classify_gait(&diagram).name());
    write_output(&a.svg, &diagram.to_svg(duration))
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let morph = Morphology::default();
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for gait in &a.gaits {
        let clip = generate_procedural_gait(*gait, gait.default_speed(), a.duration, a.fps, &morph)?;
        let path = a.out.join(format!("{}.json", gait.name()));
        clip.save(&path).with_context(|| format!("writing {}", path.display()))?;
        println!("{} ({} frames)", path.display(), clip.len());
    }
    // Sanity check that the directory loads as a dataset.
    ReferenceDataset::load_dir(&a.out, &morph)?;
    Ok(())
}

fn cmd_retarget(a: RetargetArgs) -> Result<()> {
    let clip = MotionClip::load(&a.input, &Morphology::default())?;
    clip.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{}: {} frames at {} fps -> {}", clip.name, clip.len(), clip.fps, a.out.display());
    Ok(())
}

fn cmd_teleop(a: TeleopArgs) -> Result<()> {
    let runtime = tokio::runtime::Runtime::new()?;
    eprintln!("serving {} on ws://{}", a.ckpt.display(), a.addr);
    runtime.block_on(quadamp_teleop::serve(&a.ckpt, a.addr.as_str()))?;
    Ok(())
}
