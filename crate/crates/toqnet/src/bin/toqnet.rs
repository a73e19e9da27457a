//! Single-binary workflow: data generation, training, evaluation,
//! generalization sweeps, formula compilation/verification, and numeric
//! self-checks. All randomness flows from `--seed`; reruns with
//! identical flags produce identical output files.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use toqnet::compiler::{self, CompileMode};
use toqnet::logic;
use toqnet::model::{self, Extractor, ModelConfig, ModelParams};
use toqnet::synth::{self, ClassKind, ScenarioConfig, Warp};
use toqnet::train::{self, SplitSpec, TrainConfig, TrainState};

#[derive(Parser)]
#[command(name = "toqnet", version, about = "Temporal and object quantification networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset (JSONL).
    Generate(GenerateArgs),
    /// Train a model on a dataset; writes the best-validation checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset; writes a metrics report.
    Eval(EvalArgs),
    /// Evaluate one checkpoint across transformed test sets.
    Sweep(SweepArgs),
    /// Compile a formula to exact network weights.
    Compile(CompileArgs),
    /// Check a compiled formula against the logic oracle over traces.
    Verify(VerifyArgs),
    /// Finite-difference check of model gradients on random configs.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ClassFlag {
    Chase,
    Pass,
    Scatter,
    Guard,
}

impl From<ClassFlag> for ClassKind {
    fn from(c: ClassFlag) -> ClassKind {
        match c {
            ClassFlag::Chase => ClassKind::Chase,
            ClassFlag::Pass => ClassKind::Pass,
            ClassFlag::Scatter => ClassKind::Scatter,
            ClassFlag::Guard => ClassKind::Guard,
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 6)]
    entities: usize,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, value_enum, value_delimiter = ',',
          default_values_t = [ClassFlag::Chase, ClassFlag::Pass, ClassFlag::Scatter, ClassFlag::Guard])]
    classes: Vec<ClassFlag>,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeFlag {
    Hard,
    Soft,
}

#[derive(Args)]
struct ModelFlags {
    #[arg(long, default_value_t = 3)]
    k_rrl: usize,
    #[arg(long, default_value_t = 4)]
    l_trl: usize,
    #[arg(long, default_value_t = 16)]
    rrl_dim: usize,
    #[arg(long, default_value_t = 48)]
    trl_dim: usize,
    #[arg(long, value_delimiter = ',', default_values_t = ["speed".to_string(), "accel".to_string(), "dist".to_string()])]
    properties: Vec<String>,
    #[arg(long, default_value_t = 5)]
    thresholds_per_property: usize,
}

impl ModelFlags {
    fn config(&self, classes: usize) -> ModelConfig {
        ModelConfig {
            k_rrl: self.k_rrl,
            l_trl: self.l_trl,
            rrl_dim: self.rrl_dim,
            trl_dim: self.trl_dim,
            classes,
            properties: self.properties.clone(),
            thresholds_per_property: self.thresholds_per_property,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long)]
    history: Option<PathBuf>,
    /// Save the full optimizer state here for later --resume.
    #[arg(long)]
    state_out: Option<PathBuf>,
    /// Resume from a saved optimizer state instead of a fresh model.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0.002)]
    lr: f64,
    /// Stop after this many epochs while keeping the full-length
    /// schedules; pair with --state-out and later --resume.
    #[arg(long)]
    stop_after: Option<usize>,
    #[command(flatten)]
    model: ModelFlags,
    /// Hold these class labels out to --fewshot-k training examples; runs
    /// the few-shot protocol and writes its report next to the checkpoint.
    #[arg(long, value_delimiter = ',')]
    fewshot_classes: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    fewshot_k: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 6)]
    entities: usize,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    #[arg(long, value_enum, value_delimiter = ',',
          default_values_t = [ClassFlag::Chase, ClassFlag::Pass, ClassFlag::Scatter, ClassFlag::Guard])]
    classes: Vec<ClassFlag>,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Extra entity counts to test, e.g. 3,10.
    #[arg(long, value_delimiter = ',', default_values_t = [3usize, 10])]
    sweep_entities: Vec<usize>,
    /// Time-stretch factors to test on the base entity count.
    #[arg(long, value_delimiter = ',', default_values_t = [2u32])]
    sweep_stretch: Vec<u32>,
    /// Frame-drop factors to test.
    #[arg(long, value_delimiter = ',')]
    sweep_compress: Vec<u32>,
    /// Position scale factors to test.
    #[arg(long, value_delimiter = ',')]
    sweep_scale: Vec<f64>,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct CompileArgs {
    #[arg(short = 'f', long)]
    formula: String,
    #[arg(long, value_enum, default_value_t = ModeFlag::Hard)]
    mode: ModeFlag,
    #[arg(long, default_value_t = compiler::DEFAULT_GAIN)]
    gain: f64,
    #[arg(long, default_value_t = 3)]
    k_rrl: usize,
    #[arg(long, default_value_t = 4)]
    l_trl: usize,
    /// Standard checkpoint path (loadable by `eval`).
    #[arg(short, long)]
    output: PathBuf,
    /// Compiled artifact with the channel map; defaults to OUTPUT.map.json.
    #[arg(long)]
    artifact: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(short = 'f', long)]
    formula: String,
    #[arg(long, value_enum, default_value_t = ModeFlag::Hard)]
    mode: ModeFlag,
    #[arg(long, default_value_t = compiler::DEFAULT_GAIN)]
    gain: f64,
    #[arg(long, default_value_t = 3)]
    k_rrl: usize,
    #[arg(long, default_value_t = 4)]
    l_trl: usize,
    #[arg(long = "T", default_value_t = 4)]
    t_len: usize,
    #[arg(long, default_value_t = 1)]
    entities: usize,
    /// Sample budget when the trace space exceeds 2^20.
    #[arg(long, default_value_t = 10_000)]
    limit: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Number of random model/input configs.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// Coordinates sampled per config.
    #[arg(long, default_value_t = 10)]
    samples: usize,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Test fixture: offset analytic gradients so the check must fail.
    #[arg(long, hide = true, default_value_t = 0.0)]
    corrupt: f64,
}

#[derive(Debug)]
enum CliError {
    /// Bad input or config: exit 1.
    Validation(String),
    /// Everything else: exit 2.
    Internal(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Internal(m) => write!(f, "{m}"),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn validation(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

fn write_json<T: Serialize>(path: &PathBuf, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(internal)?;
    std::fs::write(path, text + "\n").map_err(internal)
}

fn main() -> ExitCode {
    if let Ok(n) = std::env::var("TOQNET_THREADS") {
        if let Ok(n) = n.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Compile(a) => cmd_compile(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Internal(m)) => {
            eprintln!("internal error: {m}");
            ExitCode::from(2)
        }
    }
}

// ---------------------------------------------------------------------------

fn scenario(
    seed: u64,
    entities: usize,
    frames: usize,
    per_class: usize,
    classes: &[ClassFlag],
    noise: f64,
) -> ScenarioConfig {
    ScenarioConfig {
        n_entities: entities,
        t_len: frames,
        classes: classes.iter().map(|&c| c.into()).collect(),
        per_class,
        noise_std: noise,
        seed,
    }
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let cfg = scenario(a.seed, a.entities, a.frames, a.per_class, &a.classes, a.noise);
    let ds = synth::generate(&cfg).map_err(validation)?;
    synth::save(&ds, &a.output).map_err(internal)?;
    let audit = synth::audit(&ds);
    let mut counts = std::collections::BTreeMap::new();
    for item in &ds.items {
        *counts.entry(item.class_name.clone()).or_insert(0usize) += 1;
    }
    println!(
        "wrote {} trajectories to {} (resamples: {})",
        ds.items.len(),
        a.output.display(),
        ds.header.resamples
    );
    for (name, n) in counts {
        println!("  {name}: {n}");
    }
    println!(
        "audit: {}/{} satisfy their class formula",
        audit.passed, audit.total
    );
    Ok(())
}

fn load_dataset(path: &PathBuf) -> Result<synth::Dataset> {
    synth::load(path).map_err(validation)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let n_classes = ds.header.config.classes.len();
    let cfg = TrainConfig {
        lr0: a.lr,
        batch_size: a.batch,
        epochs: a.epochs,
        seed: a.seed,
        ..TrainConfig::default()
    };

    let state = if let Some(resume) = &a.resume {
        let mut st = TrainState::load(resume).map_err(validation)?;
        let split = train::split_dataset(&ds.items, &SplitSpec::default(), st.config.seed)
            .map_err(validation)?;
        let until = a.stop_after.unwrap_or(st.config.epochs);
        train::run_epochs_until(&mut st, &ds.items, &split.train, &split.val, until)
            .map_err(train_err)?;
        st
    } else if !a.fewshot_classes.is_empty() {
        let spec = SplitSpec {
            fewshot_classes: a.fewshot_classes.clone(),
            fewshot_k: a.fewshot_k,
            ..SplitSpec::default()
        };
        let params = init_model(&a.model, n_classes, &ds, a.seed)?;
        let (report, st) =
            train::fewshot_protocol(&ds.items, &spec, params, cfg).map_err(train_err)?;
        let report_path = a.output.with_extension("fewshot.json");
        write_json(&report_path, &report)?;
        println!(
            "few-shot macro: regular {:.4}, few-shot {:.4}, full {:.4} (report: {})",
            report.regular_macro,
            report.fewshot_macro,
            report.full_macro,
            report_path.display()
        );
        st
    } else {
        let split = train::split_dataset(&ds.items, &SplitSpec::default(), a.seed)
            .map_err(validation)?;
        let params = init_model(&a.model, n_classes, &ds, a.seed)?;
        let mut st = TrainState::new(params, cfg).map_err(validation)?;
        let until = a.stop_after.unwrap_or(st.config.epochs);
        train::run_epochs_until(&mut st, &ds.items, &split.train, &split.val, until)
            .map_err(train_err)?;
        st
    };

    model::save_checkpoint(&state.best_params, &a.output).map_err(internal)?;
    if let Some(h) = &a.history {
        std::fs::write(h, train::history_csv(&state.history)).map_err(internal)?;
    }
    if let Some(s) = &a.state_out {
        state.save(s).map_err(internal)?;
    }
    let last = state.history.last();
    println!(
        "trained {} epochs; best val loss {:.4} at epoch {:?}; last val macro {:.4}",
        state.epoch,
        state.best_val_loss,
        state.best_epoch,
        last.map(|r| r.val_macro).unwrap_or(f64::NAN)
    );
    println!("checkpoint: {}", a.output.display());
    Ok(())
}

fn train_err(e: train::TrainError) -> CliError {
    match e {
        train::TrainError::NanLoss { .. } => internal(e),
        other => validation(other),
    }
}

fn init_model(
    flags: &ModelFlags,
    n_classes: usize,
    ds: &synth::Dataset,
    seed: u64,
) -> Result<ModelParams> {
    let cfg = flags.config(n_classes);
    let ext = model::fit_kinematic_extractor(&cfg, &ds.items, 1.0).map_err(validation)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x6f71_6e65_7462_696e);
    ModelParams::init(cfg, Extractor::Kinematic(ext), &mut rng).map_err(validation)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let params = model::load_checkpoint(&a.checkpoint).map_err(validation)?;
    let report = train::evaluate(&params, &ds.items).map_err(train_err)?;
    println!(
        "macro accuracy {:.4} over {} examples",
        report.macro_acc, report.n_examples
    );
    if !report.absent_classes.is_empty() {
        println!("absent classes (excluded): {:?}", report.absent_classes);
    }
    if let Some(o) = &a.output {
        write_json(o, &report)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    transform: String,
    macro_acc: f64,
    /// (acc - baseline)/baseline.
    relative_drop: f64,
}

#[derive(Serialize)]
struct SweepReport {
    schema: String,
    baseline: f64,
    rows: Vec<SweepRow>,
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let params = model::load_checkpoint(&a.checkpoint).map_err(validation)?;
    let eval_ds = |ds: &synth::Dataset| -> Result<f64> {
        Ok(train::evaluate(&params, &ds.items).map_err(train_err)?.macro_acc)
    };
    // Fresh test seeds distinct from any training seed derived from the
    // same base.
    let test_seed = |salt: u64| a.seed.wrapping_mul(0x9e37_79b9).wrapping_add(salt) | 1;

    let base_cfg = scenario(test_seed(0), a.entities, a.frames, a.per_class, &a.classes, a.noise);
    let base_ds = synth::generate(&base_cfg).map_err(validation)?;
    let baseline = eval_ds(&base_ds)?;

    let mut rows = Vec::new();
    let mut push = |name: String, acc: f64| {
        rows.push(SweepRow {
            transform: name,
            macro_acc: acc,
            relative_drop: (acc - baseline) / baseline,
        });
    };

    for (i, &n) in a.sweep_entities.iter().enumerate() {
        let cfg = scenario(test_seed(1 + i as u64), n, a.frames, a.per_class, &a.classes, a.noise);
        let ds = synth::generate(&cfg).map_err(validation)?;
        push(format!("entities={n}"), eval_ds(&ds)?);
    }
    for &k in &a.sweep_stretch {
        let ds = synth::warp(&base_ds, Warp::Stretch(k)).map_err(validation)?;
        push(format!("stretch({k})"), eval_ds(&ds)?);
    }
    for &k in &a.sweep_compress {
        let ds = synth::warp(&base_ds, Warp::Compress(k)).map_err(validation)?;
        push(format!("compress({k})"), eval_ds(&ds)?);
    }
    for &c in &a.sweep_scale {
        let ds = synth::warp(&base_ds, Warp::Scale(c)).map_err(validation)?;
        push(format!("scale({c})"), eval_ds(&ds)?);
    }

    println!("{:<16} {:>10} {:>10}", "transform", "macro", "drop");
    println!("{:<16} {:>10.4} {:>10}", "baseline", baseline, "-");
    for r in &rows {
        println!(
            "{:<16} {:>10.4} {:>9.1}%",
            r.transform,
            r.macro_acc,
            100.0 * r.relative_drop
        );
    }
    if let Some(o) = &a.output {
        write_json(
            o,
            &SweepReport {
                schema: "toqnet-sweep-v1".into(),
                baseline,
                rows,
            },
        )?;
    }
    Ok(())
}

fn parse_formula(src: &str) -> Result<logic::Formula> {
    logic::parse(src).map_err(validation)
}

fn compile_cfg(k_rrl: usize, l_trl: usize) -> ModelConfig {
    ModelConfig {
        k_rrl,
        l_trl,
        rrl_dim: 8,
        trl_dim: 8,
        classes: 2,
        properties: vec![],
        thresholds_per_property: 1,
    }
}

fn mode_of(flag: ModeFlag, gain: f64) -> CompileMode {
    match flag {
        ModeFlag::Hard => CompileMode::Hard,
        ModeFlag::Soft => CompileMode::Soft { gain },
    }
}

fn cmd_compile(a: CompileArgs) -> Result<()> {
    let f = parse_formula(&a.formula)?;
    let net = compiler::compile(&f, &compile_cfg(a.k_rrl, a.l_trl), mode_of(a.mode, a.gain))
        .map_err(validation)?;
    model::save_checkpoint(&net.params, &a.output).map_err(internal)?;
    let artifact = a
        .artifact
        .clone()
        .unwrap_or_else(|| a.output.with_extension("map.json"));
    write_json(&artifact, &net)?;
    println!(
        "compiled `{}` ({} channels); checkpoint {}, channel map {}",
        net.formula,
        net.channel_map.len(),
        a.output.display(),
        artifact.display()
    );
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> Result<()> {
    let f = parse_formula(&a.formula)?;
    let net = compiler::compile(&f, &compile_cfg(a.k_rrl, a.l_trl), mode_of(a.mode, a.gain))
        .map_err(validation)?;
    let report = compiler::verify(&net, &f, a.t_len, a.entities, a.limit, a.seed)
        .map_err(internal)?;
    println!(
        "{} traces, {} mismatches, max deviation {:.3e}",
        report.traces, report.mismatches, report.max_dev
    );
    if let Some(o) = &a.output {
        write_json(o, &report)?;
    }
    if report.mismatches > 0 && matches!(a.mode, ModeFlag::Hard) {
        return Err(CliError::Validation(format!(
            "{} mismatches against the oracle (first witness: trace {})",
            report.mismatches,
            report.witness.unwrap_or(0)
        )));
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut worst = 0.0f64;
    let mut worst_desc = String::new();
    for i in 0..a.seeds {
        let seed = a.seed.wrapping_add(i);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        use rand::Rng;
        let n = rng.gen_range(2..=4usize);
        let t = rng.gen_range(4..=8usize);
        let k = rng.gen_range(1..=3usize);
        let l = rng.gen_range(1..=3usize);
        let ds = synth::generate(&ScenarioConfig {
            n_entities: n,
            t_len: t.max(8),
            classes: vec![ClassKind::Chase, ClassKind::Guard],
            per_class: 1,
            noise_std: 0.1,
            seed,
        })
        .map_err(internal)?;
        let mut items = ds.items.clone();
        for item in &mut items {
            // Shorten to the sampled length; kinematics only need T >= 2.
            item.traj.positions.truncate(t);
            item.traj.t_len = t;
        }
        let cfg = ModelConfig {
            k_rrl: k,
            l_trl: l,
            rrl_dim: 4,
            trl_dim: 4,
            classes: 2,
            properties: vec!["speed".into(), "dist".into()],
            thresholds_per_property: 2,
        };
        let ext = model::fit_kinematic_extractor(&cfg, &items, 1.0).map_err(internal)?;
        let params = ModelParams::init(cfg, Extractor::Kinematic(ext), &mut rng)
            .map_err(internal)?;
        let item = &items[rng.gen_range(0..items.len())];
        let rep = model::gradient_check_with(
            &params,
            &model::ModelInput::Trajectory(&item.traj),
            item.label,
            a.samples,
            a.h,
            &mut rng,
            a.corrupt,
        )
        .map_err(internal)?;
        if rep.max_rel_err > worst {
            worst = rep.max_rel_err;
            worst_desc = format!(
                "seed {seed} (T={t} N={n} K={k} L={l}), param {} coord {}",
                rep.worst_param, rep.worst_coord
            );
        }
    }
    println!(
        "{} configs x {} coords: worst relative error {:.3e}",
        a.seeds, a.samples, worst
    );
    if worst > a.tolerance {
        return Err(CliError::Validation(format!(
            "gradient check failed: {worst:.3e} > {:.1e} at {worst_desc}",
            a.tolerance
        )));
    }
    println!("pass (tolerance {:.1e})", a.tolerance);
    Ok(())
}
