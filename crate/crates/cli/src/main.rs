use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use nonsing::attack::{pgd, AttackConfig, AttackMode};
use nonsing::bounds::{
    margin_bound_all_pairs, margin_bound_single_layer, MarginBoundReport, PerturbationBudget,
};
use nonsing::eval::{linspace, run_grid_observed, GridSpec};
use nonsing::mnist::{self, Dataset, Split};
use nonsing::network::Mlp;
use nonsing::trainer::{accuracy, train_observed, Regime, TrainConfig, MNIST_DIMS};
use nonsing::verify::{verify_bound, BoundKind, VerifyOptions};

#[derive(Parser, Debug)]
#[command(
    name = "nonsing",
    version,
    about = "Train, attack and certify ReLU MLPs under joint input-weight perturbations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network under one of the five regimes.
    Train(TrainArgs),
    /// Run PGD against every example of a dataset.
    Attack(AttackArgs),
    /// Accuracy under joint PGD over an (eps_x, eps_w) grid.
    EvalGrid(EvalGridArgs),
    /// Margin bounds for every class pair at one input.
    Bound(BoundArgs),
    /// Check the margin bounds against sampled and optimized perturbations.
    VerifyBound(VerifyArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
struct DataArgs {
    /// Image and label IDX files.
    #[arg(long, num_args = 2, value_names = ["IMAGES", "LABELS"])]
    data: Option<Vec<PathBuf>>,
    /// Directory with the four canonical IDX files; defaults to $MNIST_DIR or ./data/mnist.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Defaults to train for `train`, test otherwise.
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    /// Keep only the first N examples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
enum SplitArg {
    Train,
    Test,
}

impl DataArgs {
    fn with_default_split(mut self, split: SplitArg) -> Self {
        self.split.get_or_insert(split);
        self
    }

    fn split(&self) -> SplitArg {
        self.split.unwrap_or(SplitArg::Test)
    }

    fn paths(&self) -> Vec<PathBuf> {
        match &self.data {
            Some(paths) => paths.clone(),
            None => {
                let dir = self
                    .data_dir
                    .clone()
                    .unwrap_or_else(|| mnist::data_dir("data/mnist"));
                let (images, labels) = match self.split() {
                    SplitArg::Train => (mnist::TRAIN_IMAGES, mnist::TRAIN_LABELS),
                    SplitArg::Test => (mnist::TEST_IMAGES, mnist::TEST_LABELS),
                };
                vec![dir.join(images), dir.join(labels)]
            }
        }
    }

    fn load(&self) -> Result<Dataset> {
        let paths = self.paths();
        let split = match self.split() {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        };
        let data = mnist::load_pair(&paths[0], &paths[1], split)?;
        Ok(match self.limit {
            Some(n) => data.head(n)?,
            None => data,
        })
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum RegimeArg {
    Standard,
    WeightPerturb,
    At,
    AtBeta,
    Jiwp,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::Standard => Regime::Standard,
            RegimeArg::WeightPerturb => Regime::WeightPerturb,
            RegimeArg::At => Regime::At,
            RegimeArg::AtBeta => Regime::AtBeta,
            RegimeArg::Jiwp => Regime::Jiwp,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ModeArg {
    InputOnly,
    WeightOnly,
    Joint,
}

impl From<ModeArg> for AttackMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::InputOnly => AttackMode::InputOnly,
            ModeArg::WeightOnly => AttackMode::WeightOnly,
            ModeArg::Joint => AttackMode::Joint,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "standard")]
    regime: RegimeArg,
    /// Defaults to the regime's preset.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    eps_train_x: Option<f64>,
    #[arg(long)]
    eps_train_w: Option<f64>,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 50)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Inner PGD steps for adversarial regimes.
    #[arg(long, default_value_t = 10)]
    inner_steps: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Debug)]
struct AttackArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value = "joint")]
    mode: ModeArg,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 0.0)]
    eps_x: f64,
    #[arg(long, default_value_t = 0.0)]
    eps_w: f64,
    #[arg(long, default_value_t = 0.01)]
    step_x: f64,
    #[arg(long, default_value_t = 0.0005)]
    step_w: f64,
    /// `none`, or `LO,HI`.
    #[arg(long, default_value = "0,1")]
    input_clamp: String,
    /// JSON lines output; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Debug)]
struct EvalGridArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 0.30)]
    eps_x_max: f64,
    #[arg(long, default_value_t = 0.030)]
    eps_w_max: f64,
    #[arg(long, default_value_t = 7)]
    grid_steps: usize,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    attack_steps: usize,
    #[arg(long, default_value_t = 0.01)]
    step_x: f64,
    #[arg(long, default_value_t = 0.0005)]
    step_w: f64,
    /// CSV output; the summary goes to `<out>.summary.json`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Debug, Clone, Serialize)]
struct BudgetArgs {
    #[arg(long)]
    input_index: usize,
    #[arg(long, default_value_t = 0.0)]
    eps_x: f64,
    #[arg(long, default_value_t = 0.0)]
    eps_w: f64,
    /// Perturb only this layer (1-based) and the input.
    #[arg(long)]
    layer: Option<usize>,
}

impl BudgetArgs {
    fn budget(&self, depth: usize) -> Result<PerturbationBudget> {
        Ok(match self.layer {
            Some(n) => PerturbationBudget::single_layer(depth, n, self.eps_w, self.eps_x)?,
            None => PerturbationBudget::uniform(self.eps_x, self.eps_w, depth)?,
        })
    }
}

#[derive(Args, Debug)]
struct BoundArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    budget: BudgetArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    budget: BudgetArgs,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    ascent_steps: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Serialize)]
struct RunManifest<'a, C: Serialize> {
    subcommand: &'a str,
    config: C,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    tool_version: &'static str,
}

fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

fn write_manifest<C: Serialize>(
    subcommand: &str,
    config: C,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
) -> Result<()> {
    let Some(primary) = outputs.first() else {
        return Ok(());
    };
    let path = manifest_path(primary);
    let manifest = RunManifest {
        subcommand,
        config,
        seed,
        inputs,
        outputs: outputs.clone(),
        tool_version: env!("CARGO_PKG_VERSION"),
    };
    write_json(&path, &manifest)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    Ok(())
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn parse_clamp(text: &str) -> Result<Option<(f64, f64)>> {
    if text == "none" {
        return Ok(None);
    }
    let Some((lo, hi)) = text.split_once(',') else {
        bail!("input clamp must be `none` or `LO,HI`, got {text:?}");
    };
    Ok(Some((lo.trim().parse()?, hi.trim().parse()?)))
}

fn load_model(path: &Path) -> Result<Mlp> {
    Mlp::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn pick_input(data: &Dataset, index: usize) -> Result<&mnist::Example> {
    data.examples().get(index).with_context(|| {
        format!(
            "input index {index} out of range for {} examples",
            data.len()
        )
    })
}

fn train(args: TrainArgs) -> Result<()> {
    let regime = Regime::from(args.regime);
    let preset = match regime {
        Regime::Standard => TrainConfig::standard(),
        Regime::WeightPerturb => TrainConfig::weight_perturb(),
        Regime::At => TrainConfig::at(),
        Regime::AtBeta => TrainConfig::at_beta_2(),
        Regime::Jiwp => TrainConfig::jiwp(),
    };
    let budget = &preset.loss_cfg.budget;
    let mut cfg = TrainConfig::for_regime(
        regime,
        args.alpha.unwrap_or(preset.loss_cfg.alpha),
        args.beta.unwrap_or(preset.loss_cfg.beta),
        args.eps_train_x.unwrap_or(budget.eps_x),
        args.eps_train_w.unwrap_or(budget.eps(1)),
        MNIST_DIMS.to_vec(),
    )?;
    cfg.epochs = args.epochs;
    cfg.batch_size = args.batch_size;
    cfg.adam.learning_rate = args.lr;
    cfg.seed = args.seed;
    cfg.inner_attack.steps = args.inner_steps;
    cfg.inner_attack.step_x =
        nonsing::trainer::inner_step(cfg.inner_attack.eps_x, args.inner_steps);
    cfg.inner_attack.step_w =
        nonsing::trainer::inner_step(cfg.inner_attack.eps_w, args.inner_steps);
    cfg.validate()?;

    let data_args = args.data.clone().with_default_split(SplitArg::Train);
    let data = data_args.load()?;
    let mut metrics = args
        .metrics
        .as_deref()
        .map(|p| output(Some(p)))
        .transpose()?;
    let net = train_observed(&data, &cfg, |m| {
        if let Some(w) = metrics.as_mut() {
            let line = serde_json::to_string(m).expect("metrics serialize");
            let _ = writeln!(w, "{line}");
        }
    })?;
    if let Some(w) = metrics.as_mut() {
        w.flush()?;
    }
    net.save(&args.out)?;
    eprintln!("training accuracy {:.4}", accuracy(&net, &data));

    let mut outputs = vec![args.out.clone()];
    outputs.extend(args.metrics.clone());
    write_manifest("train", &cfg, Some(cfg.seed), data_args.paths(), outputs)
}

#[derive(Serialize)]
struct AttackLine {
    index: usize,
    label: usize,
    clean_pred: usize,
    attacked_pred: usize,
    final_loss: f64,
}

fn attack(args: AttackArgs) -> Result<()> {
    let net = load_model(&args.model)?;
    let data = args.data.load()?;
    let cfg = AttackConfig {
        steps: args.steps,
        step_x: args.step_x,
        step_w: args.step_w,
        eps_x: args.eps_x,
        eps_w: args.eps_w,
        mode: args.mode.into(),
        input_clamp: parse_clamp(&args.input_clamp)?,
    };
    cfg.validate()?;
    let mut out = output(args.out.as_deref())?;
    for (index, ex) in data.examples().iter().enumerate() {
        let res = pgd(&net, &ex.x, ex.label, &cfg)?;
        let line = AttackLine {
            index,
            label: ex.label,
            clean_pred: res.clean_prediction,
            attacked_pred: res.attacked_prediction,
            final_loss: res.final_loss,
        };
        writeln!(out, "{}", serde_json::to_string(&line)?)?;
    }
    out.flush()?;
    let mut inputs = vec![args.model.clone()];
    inputs.extend(args.data.paths());
    write_manifest("attack", &cfg, None, inputs, args.out.into_iter().collect())
}

fn summary_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".summary.json");
    PathBuf::from(name)
}

fn eval_grid(args: EvalGridArgs) -> Result<()> {
    let net = load_model(&args.model)?;
    let data = args.data.load()?;
    let spec = GridSpec {
        eps_x_values: linspace(args.eps_x_max, args.grid_steps),
        eps_w_values: linspace(args.eps_w_max, args.grid_steps),
        attack: AttackConfig {
            steps: args.attack_steps,
            step_x: args.step_x,
            step_w: args.step_w,
            mode: AttackMode::Joint,
            ..AttackConfig::default()
        },
        sample_count: args.samples,
        seed: args.seed,
    };
    let result = run_grid_observed(&net, &data, &spec, |c| {
        log::info!(
            "eps_x={} eps_w={} accuracy={:.4}",
            c.eps_x,
            c.eps_w,
            c.accuracy
        );
    })?;

    let mut csv = csv::Writer::from_path(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    csv.write_record(["eps_x", "eps_w", "accuracy"])?;
    for c in &result.cells {
        csv.serialize((c.eps_x, c.eps_w, c.accuracy))?;
    }
    csv.flush()?;

    #[derive(Serialize)]
    struct Summary<'a> {
        auc: f64,
        spec: &'a GridSpec,
    }
    let summary = summary_path(&args.out);
    write_json(
        &summary,
        &Summary {
            auc: result.auc,
            spec: &spec,
        },
    )?;
    println!("auc {:.4}", result.auc);

    let mut inputs = vec![args.model.clone()];
    inputs.extend(args.data.paths());
    write_manifest(
        "eval-grid",
        &spec,
        Some(spec.seed),
        inputs,
        vec![args.out, summary],
    )
}

#[derive(Serialize)]
struct SingleLayerReport {
    class_i: usize,
    class_j: usize,
    layer: usize,
    margin: f64,
    upper_bound: f64,
}

fn bound(args: BoundArgs) -> Result<()> {
    let net = load_model(&args.model)?;
    let data = args.data.load()?;
    let ex = pick_input(&data, args.budget.input_index)?;
    let budget = args.budget.budget(net.depth())?;
    let reports: Vec<MarginBoundReport> = margin_bound_all_pairs(&net, &ex.x, &budget)?;
    let mut out = output(args.out.as_deref())?;
    match args.budget.layer {
        None => serde_json::to_writer_pretty(&mut out, &reports)?,
        Some(n) => {
            let single = reports
                .iter()
                .map(|r| {
                    let b = &args.budget;
                    Ok(SingleLayerReport {
                        class_i: r.class_i,
                        class_j: r.class_j,
                        layer: n,
                        margin: r.margin,
                        upper_bound: margin_bound_single_layer(
                            &net, &ex.x, n, b.eps_w, b.eps_x, r.class_i, r.class_j,
                        )?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            serde_json::to_writer_pretty(&mut out, &single)?
        }
    }
    writeln!(out)?;
    out.flush()?;
    let mut inputs = vec![args.model.clone()];
    inputs.extend(args.data.paths());
    write_manifest(
        "bound",
        (&args.budget, &budget),
        None,
        inputs,
        args.out.into_iter().collect(),
    )
}

/// Returns whether the bound held.
fn verify(args: VerifyArgs) -> Result<bool> {
    let net = load_model(&args.model)?;
    let data = args.data.load()?;
    let ex = pick_input(&data, args.budget.input_index)?;
    let budget = args.budget.budget(net.depth())?;
    let opts = VerifyOptions {
        samples: args.samples,
        seed: args.seed,
        ascent_steps: args.ascent_steps,
        kind: args
            .budget
            .layer
            .map_or(BoundKind::Joint, BoundKind::SingleLayer),
        ..VerifyOptions::default()
    };
    let report = verify_bound(&net, &ex.x, &budget, &opts)?;
    let mut out = output(args.out.as_deref())?;
    serde_json::to_writer_pretty(&mut out, &report)?;
    writeln!(out)?;
    out.flush()?;
    if let Some(v) = &report.first_violation {
        eprintln!(
            "{} violations; first: {}",
            report.violation_count,
            serde_json::to_string(v)?
        );
    }
    let mut inputs = vec![args.model.clone()];
    inputs.extend(args.data.paths());
    write_manifest(
        "verify-bound",
        &opts,
        Some(opts.seed),
        inputs,
        args.out.into_iter().collect(),
    )?;
    Ok(report.passed())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(a) => train(a).map(|_| true),
        Command::Attack(a) => attack(a).map(|_| true),
        Command::EvalGrid(a) => eval_grid(a).map(|_| true),
        Command::Bound(a) => bound(a).map(|_| true),
        Command::VerifyBound(a) => verify(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
