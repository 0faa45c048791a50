use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cit::data::{is_missing, load_csv, parse_cell, Cell, MissingPolicy, Schema};
use cit::estimators::{EstimatorConfig, EstimatorKind, ModelSpecs, NuisanceScope, VarianceMethod, DEFAULT_EPSILON};
use cit::glm::DesignSpec;
use cit::pipeline::{fit, FitOptions};
use cit::prune::DEFAULT_LAMBDA;
use cit::select::{bootstrap_effects, SelectOptions};
use cit::simulate::{run_experiment, AlgoConfig, ExperimentSummary, RunOptions, SimDesign};
use cit::tree::{GrowConfig, Tree};
use cit::{CitError, ErrorClass};

#[derive(Parser)]
#[command(name = "cit", version, about = "Causal interaction trees for subgroup treatment effects")]
struct Cli {
    /// Worker threads [default: available parallelism]
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Grow, prune and select a tree from a CSV file
    Fit(FitArgs),
    /// Append predicted effects and terminal ids to a CSV file
    Predict(PredictArgs),
    /// Run replicated simulation experiments
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Input CSV with a header row
    #[arg(long)]
    data: PathBuf,
    /// JSON schema declaring covariates, treatment and outcome columns
    #[arg(long)]
    schema: PathBuf,
    /// Node effect estimator: ipw, g or dr
    #[arg(long)]
    estimator: EstimatorKind,
    /// Propensity model, e.g. "x1 + x2" (required by ipw and dr) [default: none]
    #[arg(long)]
    propensity_spec: Option<String>,
    /// Outcome model, e.g. "A + x1 + A:x2" (required by g and dr) [default: none]
    #[arg(long)]
    outcome_spec: Option<String>,
    /// Data used to fit nuisance models: whole, parent or child
    #[arg(long, default_value_t = NuisanceScope::Parent)]
    scope: NuisanceScope,
    /// Variance method: pooled-sandwich, per-child-sandwich or influence [default: by estimator and scope]
    #[arg(long)]
    variance: Option<VarianceMethod>,
    /// Penalty per internal node in the split complexity
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    /// Share of rows used to grow the tree
    #[arg(long, default_value_t = 0.8)]
    train_frac: f64,
    /// Minimum number of rows in each child
    #[arg(long, default_value_t = 30)]
    min_node: usize,
    /// Minimum number of rows per treatment arm in each child
    #[arg(long, default_value_t = 10)]
    min_per_arm: usize,
    /// Maximum tree depth
    #[arg(long, default_value_t = 10)]
    max_depth: usize,
    /// Propensity truncation level
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    /// Seed for the train/validation split and bootstrap
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Bootstrap replicates for terminal effect intervals (0 disables)
    #[arg(long, default_value_t = 0)]
    bootstrap: usize,
    /// Bootstrap interval level
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Score validation splits with the growth-time models instead of refitting
    #[arg(long)]
    reuse_fits: bool,
    /// Fail on missing cells instead of dropping those rows
    #[arg(long)]
    reject_missing: bool,
    /// Output directory for artifacts
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    /// Tree written by `cit fit`
    #[arg(long)]
    tree: PathBuf,
    /// CSV holding the tree's covariate columns
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Data-generating design: homog, heterog, binary-mixed or binary-mixed-homog
    #[arg(long)]
    setting: String,
    /// Algorithm, e.g. "dr,prop=true,out=mis-func,scope=parent"; repeat for several
    #[arg(long, required = true)]
    algo: Vec<String>,
    /// Replications per algorithm
    #[arg(long, default_value_t = 200)]
    reps: usize,
    /// Master seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training rows per replicate
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Record mean wall-clock fit time per algorithm
    #[arg(long)]
    timing: bool,
    /// Also write the summary JSON to this file [default: none]
    #[arg(long)]
    json: Option<PathBuf>,
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Fit => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global().expect("thread pool is configured once");
    }
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Simulate(a) => cmd_simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}

fn flag_spec(text: Option<&str>, flag: &str, treatment: &str) -> Result<Option<DesignSpec>, CitError> {
    text.map(|t| DesignSpec::parse(t, treatment).map_err(|e| CitError::Config(format!("{flag}: {e}")))).transpose()
}

fn cmd_fit(a: FitArgs) -> Result<(), CitError> {
    let schema = Schema::from_json_file(&a.schema)?;
    let specs = ModelSpecs {
        propensity: flag_spec(a.propensity_spec.as_deref(), "--propensity-spec", &schema.treatment)?,
        outcome: flag_spec(a.outcome_spec.as_deref(), "--outcome-spec", &schema.treatment)?,
    };
    if a.estimator.needs_propensity() && specs.propensity.is_none() {
        return Err(CitError::Config(format!("--propensity-spec is required with --estimator {}", a.estimator)));
    }
    if a.estimator.needs_outcome() && specs.outcome.is_none() {
        return Err(CitError::Config(format!("--outcome-spec is required with --estimator {}", a.estimator)));
    }
    let mut estimator = EstimatorConfig::new(a.estimator, a.scope, specs);
    if let Some(v) = a.variance {
        estimator.variance = v;
    }
    estimator.epsilon = a.epsilon;
    let config = GrowConfig {
        estimator,
        min_node: a.min_node,
        min_per_arm: a.min_per_arm,
        max_depth: a.max_depth,
        seed: a.seed,
    };
    config.validate()?;
    if !(a.lambda >= 0.0 && a.lambda.is_finite()) {
        return Err(CitError::Config(format!("--lambda must be a non-negative number, got {}", a.lambda)));
    }
    let policy = if a.reject_missing { MissingPolicy::Reject } else { MissingPolicy::DropRows };
    let (data, dropped) = load_csv(&a.data, &schema, policy)?;
    if dropped > 0 {
        eprintln!("dropped {dropped} rows with missing values");
    }
    let options = FitOptions {
        lambda: a.lambda,
        train_frac: a.train_frac,
        select: SelectOptions { reuse_training_fits: a.reuse_fits },
    };
    let result = fit(&data, &config, &options)?;

    fs::create_dir_all(&a.out)?;
    write_artifact(&a.out, "tree.json", &result.tree.to_json()?)?;
    write_artifact(&a.out, "tree.txt", &result.tree.to_text())?;
    write_artifact(&a.out, "selection.json", &result.selection_json()?)?;
    write_artifact(&a.out, "sequence.json", &result.sequence.to_json()?)?;
    let boot = if a.bootstrap > 0 {
        let b = bootstrap_effects(&result.tree, &data, a.bootstrap, a.level, a.seed)?;
        write_artifact(&a.out, "bootstrap.json", &serde_json::to_string_pretty(&b)?)?;
        Some(b)
    } else {
        None
    };

    let mut out = io::stdout().lock();
    writeln!(out, "{:>6} {:>7} {:>10} {:>10} {:>10}{}", "node", "n", "effect", "mu1", "mu0", if boot.is_some() { "      lower      upper" } else { "" })?;
    for id in result.tree.terminal_ids() {
        let node = result.tree.node(id);
        write!(out, "{:>6} {:>7} {:>10.4} {:>10.4} {:>10.4}", id, node.n, node.effect.effect, node.effect.mu1, node.effect.mu0)?;
        if let Some(b) = &boot {
            let t = b.terminals.iter().find(|t| t.id == id).expect("every terminal has an interval");
            write!(out, " {:>10.4} {:>10.4}", t.lower, t.upper)?;
        }
        writeln!(out)?;
    }
    Ok(())
}

fn write_artifact(dir: &Path, name: &str, text: &str) -> Result<(), CitError> {
    let mut body = text.to_string();
    if !body.ends_with('\n') {
        body.push('\n');
    }
    fs::write(dir.join(name), body)?;
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<(), CitError> {
    let text = fs::read_to_string(&a.tree)?;
    let tree = Tree::from_json(&text).map_err(|e| CitError::Config(format!("--tree: {e}")))?;
    let schema = &tree.schema;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(&a.data)?;
    let header = rdr.headers()?.clone();
    let positions: Vec<usize> = schema
        .columns
        .iter()
        .map(|c| {
            header
                .iter()
                .position(|h| h.trim() == c.name)
                .ok_or_else(|| CitError::Data(format!("--data is missing covariate column {:?} used by the tree", c.name)))
        })
        .collect::<Result<_, _>>()?;

    let mut wtr = csv::Writer::from_writer(io::BufWriter::new(io::stdout().lock()));
    let mut out_header = header.clone();
    out_header.push_field("effect");
    out_header.push_field("terminal_id");
    wtr.write_record(&out_header)?;
    let mut cells = vec![Cell::Num(0.0); schema.columns.len()];
    let mut record = csv::StringRecord::new();
    let mut row = 0usize;
    while rdr.read_record(&mut record)? {
        for ((spec, &pos), cell) in schema.columns.iter().zip(&positions).zip(cells.iter_mut()) {
            let raw = record.get(pos).unwrap_or("");
            if is_missing(raw) {
                return Err(CitError::MissingValue { row, column: spec.name.clone() });
            }
            *cell = match parse_cell(spec, raw, row) {
                Ok(c) => c,
                // Unseen levels are routed to the larger child.
                Err(CitError::UnseenLevel { .. }) => Cell::Level(u32::MAX),
                Err(e) => return Err(e),
            };
        }
        let id = tree.route(|j| cells[j]);
        let mut fields = record.clone();
        fields.push_field(&tree.node(id).effect.effect.to_string());
        fields.push_field(&id.to_string());
        wtr.write_record(&fields)?;
        row += 1;
    }
    wtr.flush()?;
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> Result<(), CitError> {
    let design: SimDesign = a.setting.parse()?;
    let algos: Vec<AlgoConfig> = a.algo.iter().map(|s| AlgoConfig::parse(s)).collect::<Result<_, _>>()?;
    let opts = RunOptions { timing: a.timing };
    let summaries = algos
        .iter()
        .map(|algo| run_experiment(design, algo, a.reps, a.n, a.seed, opts))
        .collect::<Result<Vec<_>, _>>()?;
    let json = serde_json::to_string_pretty(&summaries)?;
    if let Some(path) = &a.json {
        fs::write(path, format!("{json}\n"))?;
    }
    let mut out = io::stdout().lock();
    writeln!(out, "{json}")?;
    writeln!(out)?;
    write!(out, "{}", ExperimentSummary::table(&summaries))?;
    Ok(())
}
