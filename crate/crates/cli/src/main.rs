mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sprayopt::acquisition::QualityOutput;
use sprayopt::api::CreateCampaign;
use sprayopt::campaign::write_proposal_csv;
use sprayopt::optimizer::{
    fit_output_model, output_dataset, parse_history_csv, run_simulated_campaign, write_batches_csv,
    write_experiments_csv, write_history_csv, CampaignTrace, EvaluatedExperiment, ModelConfig,
};
use sprayopt::oracle::{DesignPoint, EquipmentState};
use sprayopt::process::ControllableInputs;
use sprayopt_client::{Client, ClientError, Results};

use config::AppConfig;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] sprayopt::Error),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("{0}")]
    Usage(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn category(&self) -> &str {
        match self {
            CliError::Core(e) => e.category(),
            CliError::Client(e) => e.category(),
            CliError::Usage(_) => "invalid-argument",
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "sprayopt",
    version,
    about = "Constrained batch Bayesian optimization of plasma-spray parameters"
)]
struct Cli {
    /// JSON config with sections domain_bounds, constraints, cost, optimizer, oracle, paths.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed-loop campaign against the simulated process.
    Simulate(SimulateArgs),
    /// Simulated campaigns over initialization sizes, batch sizes and seeds.
    Sweep(SweepArgs),
    /// Fit the quality-output models on one experiment table and score them on another.
    Fit(FitArgs),
    /// Measure the simulated process and write an experiment table.
    Sample(SampleArgs),
    /// Drive a campaign on a running service.
    Campaign {
        /// Service URL; overrides paths.server_url.
        #[arg(long)]
        server: Option<String>,
        #[command(subcommand)]
        action: CampaignCommand,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Leading points of the initialization design to measure.
    #[arg(long, default_value_t = 86)]
    n_init: usize,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    pi: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, default_value = "trace.json")]
    out: PathBuf,
    /// Per-candidate acquisition values and constraint predictions; defaults next to --out.
    #[arg(long)]
    batches_csv: Option<PathBuf>,
    /// Per-experiment measurements; defaults next to --out.
    #[arg(long)]
    experiments_csv: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [10, 40, 86])]
    n_init: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [5, 10])]
    batch_size: Vec<usize>,
    /// Seeds 0..N per cell.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value = "sweep.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    validate: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-row predictions of every model.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Leading design points to measure; all when absent.
    #[arg(long)]
    n_init: Option<usize>,
    /// Repeat the most frequent design setting this many times instead of the design.
    #[arg(long)]
    baseline_repeats: Option<usize>,
    /// Session voltage offset in V.
    #[arg(long, default_value_t = 0.0)]
    offset: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum CampaignCommand {
    /// Create a campaign from the config; prints its id.
    New {
        #[arg(long)]
        id: Option<String>,
        /// Experiment table to start from; the simulated initialization otherwise.
        #[arg(long)]
        initial: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        init_seed: u64,
    },
    /// Record the gun ignition of a new session; prints the voltage offset.
    Ignite {
        #[arg(long)]
        id: String,
        /// Ignite at this history entry's setting.
        #[arg(long, conflicts_with = "setting", default_value_t = 0)]
        history_index: usize,
        /// Six comma-separated controllable inputs instead of a history entry.
        #[arg(long)]
        setting: Option<String>,
        /// Measured ignition voltage V_b.
        #[arg(long)]
        voltage: f64,
        #[arg(long)]
        revision: Option<u64>,
    },
    /// Propose the next batch; writes the proposal CSV.
    Propose {
        #[arg(long)]
        id: String,
        #[arg(long)]
        revision: Option<u64>,
        /// Proposal CSV path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mark a pending candidate as not run.
    Drop {
        #[arg(long)]
        id: String,
        #[arg(long)]
        index: usize,
        #[arg(long)]
        revision: Option<u64>,
    },
    /// Submit a results CSV; prints one report line per row.
    Ingest {
        #[arg(long)]
        id: String,
        #[arg(long)]
        file: PathBuf,
        #[arg(long)]
        revision: Option<u64>,
    },
    /// Preview the incumbent and next batch a results CSV would give, without storing it.
    Whatif {
        #[arg(long)]
        id: String,
        #[arg(long)]
        file: PathBuf,
    },
    /// Phase, revision and incumbent; the whole state with --full.
    Status {
        #[arg(long)]
        id: String,
        #[arg(long)]
        full: bool,
    },
    /// Stop the campaign; prints the final incumbent.
    Finish {
        #[arg(long)]
        id: String,
        #[arg(long)]
        revision: Option<u64>,
    },
    /// Campaign ids on the service.
    List,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = AppConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate(args) => simulate(&config, args),
        Command::Sweep(args) => sweep(&config, args),
        Command::Fit(args) => fit(&config, args),
        Command::Sample(args) => sample(&config, args),
        Command::Campaign { server, action } => {
            let url = server.unwrap_or_else(|| config.paths.server_url.clone());
            runtime()?.block_on(campaign(&config, Client::new(url), action))
        }
        Command::Serve { addr } => {
            tracing_subscriber::fmt()
                .with_env_filter(
                    tracing_subscriber::EnvFilter::try_from_default_env()
                        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
                )
                .with_writer(std::io::stderr)
                .init();
            let service = sprayopt_service::ServiceConfig {
                data_dir: config.paths.data_dir.clone(),
                defaults: config.campaign(),
            };
            runtime()?.block_on(async move {
                let listener = tokio::net::TcpListener::bind(&addr).await?;
                sprayopt_service::serve(listener, service).await
            })?;
            Ok(())
        }
    }
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Runtime::new()?)
}

fn initialization(
    config: &AppConfig,
    n_init: usize,
    seed: u64,
) -> Result<Vec<EvaluatedExperiment>> {
    let design = config.design()?;
    if n_init == 0 || n_init > design.len() {
        return Err(CliError::Usage(format!(
            "--n-init must be between 1 and the design size {}",
            design.len()
        )));
    }
    Ok(config.oracle()?.generate_initialization(
        &design[..n_init],
        &EquipmentState::default(),
        seed,
    )?)
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
    out.with_file_name(format!("{stem}.{suffix}"))
}

fn simulate(config: &AppConfig, args: SimulateArgs) -> Result<()> {
    let mut settings = config.simulation();
    if let Some(b) = args.batch_size {
        settings.optimizer.batch_size = b;
    }
    if let Some(pi) = args.pi {
        settings.optimizer.pi = pi;
    }
    if let Some(eps) = args.epsilon {
        settings.optimizer.epsilon = eps;
    }
    let init = initialization(config, args.n_init, args.seed)?;
    let trace = run_simulated_campaign(&init, &config.oracle()?, &settings, args.seed)?;

    std::fs::write(&args.out, trace.to_json()?)?;
    let batches = args
        .batches_csv
        .unwrap_or_else(|| sibling(&args.out, "batches.csv"));
    write_batches_csv(&trace, std::fs::File::create(&batches)?)?;
    let experiments = args
        .experiments_csv
        .unwrap_or_else(|| sibling(&args.out, "experiments.csv"));
    write_experiments_csv(&trace, std::fs::File::create(&experiments)?)?;
    println!("{}", summary_line(&trace));
    Ok(())
}

fn summary_line(trace: &CampaignTrace) -> String {
    let stop = trace.stopping_batch().map_or_else(
        || format!("stopped at the batch limit after {}", trace.batches.len()),
        |b| format!("terminated after batch {b}"),
    );
    let first = trace.first_feasible_batch().map_or_else(
        || "no feasible result".to_string(),
        |b| format!("first feasible in batch {b}"),
    );
    format!(
        "seed {}: {stop}, {} evaluations, {first}, incumbent cost {:.3}",
        trace.seed,
        trace.evaluations(),
        trace.final_incumbent().cost
    )
}

fn sweep(config: &AppConfig, args: SweepArgs) -> Result<()> {
    if args.seeds == 0 || args.n_init.is_empty() || args.batch_size.is_empty() {
        return Err(CliError::Usage(
            "sweep needs at least one seed, N_init and batch size".into(),
        ));
    }
    let oracle = config.oracle()?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(&args.out)?);
    writeln!(
        out,
        "n_init,batch_size,seed,min_cost,found_feasible,stopping_batch,evaluations,terminated"
    )?;
    println!("n_init,batch_size,median_min_cost,median_stopping_batch,median_evaluations");
    for &bs in &args.batch_size {
        for &n in &args.n_init {
            let mut settings = config.simulation();
            settings.optimizer.batch_size = bs;
            let (mut costs, mut stops, mut evals) = (Vec::new(), Vec::new(), Vec::new());
            for seed in 0..args.seeds {
                let init = initialization(config, n, seed)?;
                let t = run_simulated_campaign(&init, &oracle, &settings, seed)?;
                let inc = t.final_incumbent();
                writeln!(
                    out,
                    "{n},{bs},{seed},{},{},{},{},{}",
                    inc.cost,
                    inc.point.is_some(),
                    t.batches.len(),
                    t.evaluations(),
                    t.terminated
                )?;
                costs.push(inc.cost);
                stops.push(t.batches.len() as f64);
                evals.push(t.evaluations() as f64);
            }
            println!(
                "{n},{bs},{:.3},{},{}",
                median(costs),
                median(stops),
                median(evals)
            );
        }
    }
    out.flush()?;
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn read_history(config: &AppConfig, path: &Path) -> Result<Vec<EvaluatedExperiment>> {
    Ok(parse_history_csv(
        &std::fs::read_to_string(path)?,
        &config.constraints,
        &config.cost,
    )?)
}

fn fit(config: &AppConfig, args: FitArgs) -> Result<()> {
    let train = read_history(config, &args.train)?;
    let validate = read_history(config, &args.validate)?;
    if validate.is_empty() {
        return Err(CliError::Usage("validation table is empty".into()));
    }
    let hybrid = ModelConfig {
        hybrid_microhardness: true,
        ..config.optimizer.model.clone()
    };
    let zero = ModelConfig {
        hybrid_microhardness: false,
        ..config.optimizer.model.clone()
    };
    let variants = [
        (QualityOutput::Microhardness, "hybrid", &hybrid),
        (QualityOutput::Microhardness, "zero", &zero),
        (QualityOutput::Porosity, "zero", &zero),
    ];
    let mut columns = Vec::new();
    println!("output,mean_function,n_train,n_validate,rmse,r2");
    for (output, label, model) in variants {
        let data = output_dataset(&train, output)?;
        let gp = fit_output_model(&data, output, &config.domain_bounds, model, args.seed)?;
        let truth: Vec<f64> = validate
            .iter()
            .map(|e| {
                e.measurements
                    .get(output)
                    .expect("constrained outputs are always measured")
            })
            .collect();
        let mut preds = Vec::with_capacity(validate.len());
        for e in &validate {
            preds.push(gp.posterior(&e.x.features())?);
        }
        let n = truth.len() as f64;
        let mean = truth.iter().sum::<f64>() / n;
        let ss_res: f64 = truth
            .iter()
            .zip(&preds)
            .map(|(y, p)| (y - p.mean).powi(2))
            .sum();
        let ss_tot: f64 = truth.iter().map(|y| (y - mean).powi(2)).sum();
        let r2 = if ss_tot > 0.0 {
            1.0 - ss_res / ss_tot
        } else {
            f64::NAN
        };
        println!(
            "{output},{label},{},{},{:.6},{:.6}",
            train.len(),
            validate.len(),
            (ss_res / n).sqrt(),
            r2
        );
        columns.push((format!("{output}_{label}"), truth, preds));
    }
    if let Some(path) = args.predictions {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header: Vec<String> = columns
            .iter()
            .flat_map(|(name, _, _)| {
                [
                    format!("{name}_measured"),
                    format!("{name}_mean"),
                    format!("{name}_sd"),
                ]
            })
            .collect();
        writeln!(out, "row,{}", header.join(","))?;
        for i in 0..validate.len() {
            let cells: Vec<String> = columns
                .iter()
                .flat_map(|(_, y, p)| {
                    [
                        y[i].to_string(),
                        p[i].mean.to_string(),
                        p[i].std_dev().to_string(),
                    ]
                })
                .collect();
            writeln!(out, "{i},{}", cells.join(","))?;
        }
        out.flush()?;
    }
    Ok(())
}

/// Most frequent design setting, the first such on ties.
fn baseline(design: &[DesignPoint]) -> Option<DesignPoint> {
    let count = |p: &DesignPoint| design.iter().filter(|q| *q == p).count();
    design
        .iter()
        .fold(None, |best: Option<&DesignPoint>, p| match best {
            Some(b) if count(b) >= count(p) => Some(b),
            _ => Some(p),
        })
        .cloned()
}

fn sample(config: &AppConfig, args: SampleArgs) -> Result<()> {
    let design = config.design()?;
    let points = match (args.baseline_repeats, args.n_init) {
        (Some(_), Some(_)) => {
            return Err(CliError::Usage(
                "--baseline-repeats and --n-init exclude each other".into(),
            ))
        }
        (Some(k), None) => {
            vec![baseline(&design).ok_or_else(|| CliError::Usage("design is empty".into()))?; k]
        }
        (None, Some(n)) if n >= 1 && n <= design.len() => design[..n].to_vec(),
        (None, Some(_)) => {
            return Err(CliError::Usage(format!(
                "--n-init must be between 1 and {}",
                design.len()
            )))
        }
        (None, None) => design,
    };
    let state = EquipmentState {
        voltage_offset: args.offset,
        ignition_noise_sd: config.oracle.voltage_reading_sd,
    };
    let experiments = config
        .oracle()?
        .generate_initialization(&points, &state, args.seed)?;
    write_history_csv(&experiments, std::fs::File::create(&args.out)?)?;
    println!(
        "{} experiments, {} feasible",
        experiments.len(),
        experiments.iter().filter(|e| e.feasible).count()
    );
    Ok(())
}

fn parse_setting(text: &str) -> Result<ControllableInputs> {
    let values: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CliError::Usage(format!("--setting: {e}")))?;
    let arr: [f64; 6] = values.try_into().map_err(|v: Vec<f64>| {
        CliError::Usage(format!("--setting needs 6 values, got {}", v.len()))
    })?;
    Ok(ControllableInputs::from_array(arr))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

async fn campaign(config: &AppConfig, client: Client, action: CampaignCommand) -> Result<()> {
    match action {
        CampaignCommand::New {
            id,
            initial,
            init_seed,
        } => {
            let initial = initial.map(|p| read_history(config, &p)).transpose()?;
            let req = CreateCampaign {
                id,
                config: Some(config.campaign()),
                initial,
                init_seed,
            };
            let created = client.create(&req).await?;
            println!("{}", created.data.id);
        }
        CampaignCommand::Ignite {
            id,
            history_index,
            setting,
            voltage,
            revision,
        } => {
            let x = match setting {
                Some(s) => parse_setting(&s)?,
                None => {
                    let view = client.get(&id).await?;
                    let history = &view.data.state.history;
                    history
                        .get(history_index)
                        .ok_or_else(|| {
                            CliError::Usage(format!("history has {} entries", history.len()))
                        })?
                        .x
                        .controllable
                }
            };
            let started = client.ignite(&id, x, voltage, revision).await?;
            println!(
                "session {} delta_b {} revision {}",
                started.data.session_id, started.data.delta_b, started.revision
            );
        }
        CampaignCommand::Propose { id, revision, out } => {
            let batch = client.propose(&id, revision).await?;
            match out {
                Some(path) => write_proposal_csv(&batch.data, std::fs::File::create(path)?)?,
                None => write_proposal_csv(&batch.data, std::io::stdout().lock())?,
            }
            eprintln!("batch {} revision {}", batch.data.batch_id, batch.revision);
        }
        CampaignCommand::Drop {
            id,
            index,
            revision,
        } => {
            let r = client.drop_candidate(&id, index, revision).await?;
            println!("phase {:?} revision {}", r.data.phase, r.revision);
        }
        CampaignCommand::Ingest { id, file, revision } => {
            let text = std::fs::read_to_string(file)?;
            match client.ingest(&id, &Results::Csv(text), revision).await {
                Ok(r) => {
                    print_report(&r.data);
                    eprintln!("phase {:?} revision {}", r.data.phase, r.revision);
                }
                Err(e) => {
                    if let Some(report) = e.report() {
                        print_report(report);
                    }
                    return Err(e.into());
                }
            }
        }
        CampaignCommand::Whatif { id, file } => {
            let text = std::fs::read_to_string(file)?;
            let r = client.what_if(&id, &Results::Csv(text)).await?;
            print_json(&r.data)?;
        }
        CampaignCommand::Status { id, full } => {
            let view = client.get(&id).await?;
            if full {
                print_json(&view.data)?;
            } else {
                let s = &view.data.state;
                print_json(&serde_json::json!({
                    "id": s.id,
                    "revision": s.revision,
                    "phase": s.phase,
                    "experiments": s.history.len(),
                    "batches": s.trace.len(),
                    "pending_batch": s.pending_batch.as_ref().map(|p| p.batch_id),
                    "voltage_offset": s.session.as_ref().map(|x| x.voltage_offset),
                    "incumbent": view.data.incumbent,
                }))?;
            }
        }
        CampaignCommand::Finish { id, revision } => {
            let r = client.finish(&id, revision).await?;
            print_json(&r.data)?;
        }
        CampaignCommand::List => {
            for id in client.list().await? {
                println!("{id}");
            }
        }
    }
    Ok(())
}

fn print_report(report: &sprayopt::campaign::IngestReport) {
    println!("line,candidate_index,status,message");
    for r in &report.rows {
        let idx = r.candidate_index.map_or(String::new(), |i| i.to_string());
        let status = serde_json::to_value(r.status)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        let msg = r.message.as_deref().unwrap_or("").replace('"', "'");
        println!("{},{idx},{status},\"{msg}\"", r.line);
    }
}
