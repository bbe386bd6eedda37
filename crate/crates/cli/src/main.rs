use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use blrhac::adapt::{
    curves_csv, nonstationary_experiment, stationary_experiment, AgentFactory, AgentKind, Protocol,
};
use blrhac::config::RunConfig;
use blrhac::io::{read_dataset, read_population, write_dataset, write_json};
use blrhac::manifest::RunManifest;
use blrhac::nn::flops::{count_flops, FlopMode, FlopSubject};
use blrhac::nn::{Checkpoint, Family, Model, OptimizerKind, ThetaEstimate};
use blrhac::population::{demonstrations_for, sample_population, DemonstrationDataset};
use blrhac::pretrain::{default_grid, evaluate_zero_shot, sweep, sweep_table_csv, train, SweepRow};
use blrhac::{EnvName, EnvironmentSpec, Error, Population, Split};

#[derive(Parser)]
#[command(
    name = "blrhac",
    version,
    about = "Collaborative placement: data, pretraining, adaptation, serving"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Environment preset, or `custom` with --objects/--locations.
    #[arg(long, global = true)]
    env: Option<EnvName>,
    #[arg(long, global = true)]
    objects: Option<usize>,
    #[arg(long, global = true)]
    locations: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker thread cap for sweeps and adaptation runs.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Clone, Default)]
struct ModelFlags {
    #[arg(long)]
    family: Option<Family>,
    /// Direct action logits instead of the weight-matrix head.
    #[arg(long)]
    no_prior: bool,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// History window length in steps.
    #[arg(long)]
    history: Option<usize>,
}

#[derive(Args, Clone, Default)]
struct TrainFlags {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    optimizer: Option<Opt>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Opt {
    Sgd,
    Adam,
}

#[derive(Args, Clone, Default)]
struct DataFlags {
    /// Directory holding population.json and demos-*.ndjson; regenerated
    /// from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum FlopAgent {
    Linear,
    BlrHac,
    Transformer,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a preference population.
    GenPop,
    /// Sample a population and roll out expert demonstrations.
    GenDemos,
    /// Train one model with early stopping.
    Pretrain {
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        data: DataFlags,
    },
    /// Train every family and head across the learning-rate grid.
    Sweep {
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        data: DataFlags,
    },
    /// Score a checkpoint (or the zero estimate) on the test split.
    EvalZeroShot {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        data: DataFlags,
    },
    /// Run an adaptation protocol for one or more agents.
    Adapt {
        #[arg(long, value_parser = parse_protocol, default_value = "stationary")]
        protocol: Protocol,
        /// Repeatable; defaults to every agent the inputs allow.
        #[arg(long = "agent", value_parser = parse_agent)]
        agents: Vec<AgentKind>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[command(flatten)]
        data: DataFlags,
    },
    /// Report analytic compute per proposal and per update.
    Flops {
        #[arg(long, value_enum, default_value = "linear")]
        agent: FlopAgent,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Start the collaboration service.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Directory scanned for checkpoint files.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        /// Population whose test split feeds simulated leaders.
        #[arg(long)]
        population: Option<PathBuf>,
    },
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_agent(s: &str) -> Result<AgentKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn resolve_config(c: &Common) -> blrhac::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::desk(c.seed.unwrap_or(0)),
    };
    if let Some(seed) = c.seed {
        cfg.set_seed(seed);
    }
    match c.env {
        Some(EnvName::Custom) => {
            let o = c.objects.unwrap_or(cfg.env.num_objects);
            let l = c.locations.unwrap_or(cfg.env.num_locations);
            cfg.env = EnvironmentSpec::custom(o, l)?;
        }
        Some(name) => {
            if c.objects.is_some() || c.locations.is_some() {
                return Err(Error::Config(
                    "--objects/--locations only apply to --env custom".into(),
                ));
            }
            cfg.env = EnvironmentSpec::preset(name)?;
        }
        None => {}
    }
    if c.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    cfg.adapt.experiment.jobs = c.jobs;
    cfg.validate()?;
    Ok(cfg)
}

fn apply_model(cfg: &mut RunConfig, m: &ModelFlags) -> blrhac::Result<()> {
    if let Some(f) = m.family {
        cfg.model.family = f;
    }
    if m.no_prior {
        cfg.model.with_prior = false;
    }
    if let Some(h) = m.hidden {
        cfg.model.hidden_dim = h;
    }
    if let Some(l) = m.layers {
        cfg.model.num_layers = l;
    }
    if let Some(h) = m.heads {
        cfg.model.num_heads = h;
    }
    if let Some(k) = m.history {
        cfg.model.history_len = k;
    }
    cfg.validate()
}

fn apply_train(cfg: &mut RunConfig, t: &TrainFlags) -> blrhac::Result<()> {
    if let Some(lr) = t.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(e) = t.epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(b) = t.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(p) = t.patience {
        cfg.train.early_stop_patience = p;
    }
    if let Some(o) = t.optimizer {
        cfg.train.optimizer = match o {
            Opt::Sgd => OptimizerKind::Sgd,
            Opt::Adam => OptimizerKind::Adam,
        };
    }
    cfg.validate()
}

struct Data {
    population: Population,
    train: DemonstrationDataset,
    eval: DemonstrationDataset,
    test: DemonstrationDataset,
}

fn dataset_name(split: Split) -> String {
    format!("demos-{}.ndjson", split.as_str())
}

fn load_data(
    cfg: &RunConfig,
    flags: &DataFlags,
    manifest: &mut RunManifest,
) -> blrhac::Result<Data> {
    match &flags.data {
        Some(dir) => {
            let pop_path = dir.join("population.json");
            let population = read_population(&pop_path)?;
            if population.spec != cfg.env {
                return Err(Error::Config(
                    "data directory was generated for a different environment".into(),
                ));
            }
            manifest.inputs.push(pop_path.display().to_string());
            let mut load = |split| -> blrhac::Result<DemonstrationDataset> {
                let p = dir.join(dataset_name(split));
                manifest.inputs.push(p.display().to_string());
                read_dataset(&p, split, &population)
            };
            let train = load(Split::Train)?;
            let eval = load(Split::Eval)?;
            let test = load(Split::Test)?;
            Ok(Data {
                population,
                train,
                eval,
                test,
            })
        }
        None => {
            let population = sample_population(&cfg.population, &cfg.env)?;
            Ok(Data {
                train: demonstrations_for(&population, Split::Train)?,
                eval: demonstrations_for(&population, Split::Eval)?,
                test: demonstrations_for(&population, Split::Test)?,
                population,
            })
        }
    }
}

struct Out<'a> {
    dir: &'a Path,
    manifest: RunManifest,
}

impl Out<'_> {
    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> blrhac::Result<()> {
        write_json(self.dir.join(name), value)?;
        self.manifest.outputs.push(name.to_string());
        Ok(())
    }

    fn text(&mut self, name: &str, text: &str) -> blrhac::Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::Config(format!("{}: {e}", parent.display())))?;
        }
        std::fs::write(&path, text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        self.manifest.outputs.push(name.to_string());
        Ok(())
    }

    fn dataset(&mut self, ds: &DemonstrationDataset) -> blrhac::Result<()> {
        let name = dataset_name(ds.split);
        write_dataset(self.dir.join(&name), ds)?;
        self.manifest.outputs.push(name);
        Ok(())
    }
}

fn checkpoint_name(ck: &Checkpoint) -> String {
    let s = ck.model.spec();
    format!(
        "{}-{}.json",
        s.family,
        if s.with_prior { "prior" } else { "noprior" }
    )
}

#[derive(Serialize)]
struct SweepFile<'a> {
    table: &'a [SweepRow],
    trials: &'a [SweepRow],
}

#[derive(Serialize)]
struct FlopReport {
    agent: &'static str,
    env: EnvironmentSpec,
    inference: u64,
    update: u64,
}

fn run(cli: Cli) -> blrhac::Result<()> {
    let mut cfg = resolve_config(&cli.common)?;
    let started = Instant::now();
    let command = match &cli.command {
        Command::GenPop => "gen-pop",
        Command::GenDemos => "gen-demos",
        Command::Pretrain { .. } => "pretrain",
        Command::Sweep { .. } => "sweep",
        Command::EvalZeroShot { .. } => "eval-zero-shot",
        Command::Adapt { .. } => "adapt",
        Command::Flops { .. } => "flops",
        Command::Serve { .. } => "serve",
    };

    if let Command::Serve {
        host,
        port,
        checkpoints,
        population,
    } = &cli.command
    {
        let addr: SocketAddr = format!("{host}:{port}")
            .parse()
            .map_err(|e| Error::Config(format!("bad bind address: {e}")))?;
        let leaders = match population {
            Some(p) => read_population(p)?.test,
            None => sample_population(&cfg.population, &cfg.env)?.test,
        };
        let svc = blrhac_service::ServiceConfig {
            checkpoint_dir: checkpoints.clone(),
            leaders,
        };
        // session work already runs on the blocking pool
        let rt = tokio::runtime::Builder::new_current_thread()
            .enable_all()
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        return rt
            .block_on(blrhac_service::serve(addr, svc))
            .map_err(|e| Error::Config(format!("server failed: {e}")));
    }

    // flags are applied before the manifest snapshots the config
    match &cli.command {
        Command::Pretrain { model, train, .. } | Command::Sweep { model, train, .. } => {
            apply_model(&mut cfg, model)?;
            apply_train(&mut cfg, train)?;
        }
        Command::Flops { model, .. } => apply_model(&mut cfg, model)?,
        Command::Adapt {
            episodes, alpha, ..
        } => {
            if let Some(e) = episodes {
                cfg.adapt.experiment.episodes = *e;
            }
            if let Some(a) = alpha {
                cfg.adapt.alpha = *a;
            }
            cfg.validate()?;
        }
        _ => {}
    }

    let mut out = Out {
        dir: &cli.common.out,
        manifest: RunManifest::new(command, &cfg),
    };
    let env = cfg.env;

    match &cli.command {
        Command::GenPop => {
            let pop = sample_population(&cfg.population, &env)?;
            out.json("population.json", &pop.to_file())?;
        }
        Command::GenDemos => {
            let pop = sample_population(&cfg.population, &env)?;
            out.json("population.json", &pop.to_file())?;
            for split in Split::ALL {
                let ds = demonstrations_for(&pop, split)?;
                info!(
                    "{}: {} episodes, {} steps",
                    split.as_str(),
                    ds.episodes.len(),
                    ds.num_steps()
                );
                out.dataset(&ds)?;
            }
        }
        Command::Pretrain { data, .. } => {
            let d = load_data(&cfg, data, &mut out.manifest)?;
            let model = Model::new(cfg.model.to_spec(&env), cfg.seed)?;
            let ck = train(model, &d.train, &d.eval, &cfg.train)?;
            let test = evaluate_zero_shot(&ck.model, &d.test, &env)?;
            let name = checkpoint_name(&ck);
            out.json(&name, &ck.to_file())?;
            out.json("pretrain-report.json", &test)?;
        }
        Command::Sweep { data, .. } => {
            let d = load_data(&cfg, data, &mut out.manifest)?;
            let base = cfg.model.to_spec(&env);
            let mut cells = default_grid(&env, &base, &cfg.train, &cfg.sweep.learning_rates);
            cells.retain(|c| cfg.sweep.families.contains(&c.model.family));
            let res = sweep(&cells, &d.train, &d.eval, Some(&d.test), cli.common.jobs)?;
            out.text("sweep.csv", &sweep_table_csv(&res.table)?)?;
            out.json(
                "sweep.json",
                &SweepFile {
                    table: &res.table,
                    trials: &res.trials,
                },
            )?;
            for ck in res.best.values() {
                let name = format!("checkpoints/{}", checkpoint_name(ck));
                out.json(&name, &ck.to_file())?;
            }
        }
        Command::EvalZeroShot { checkpoint, data } => {
            let d = load_data(&cfg, data, &mut out.manifest)?;
            let report = match checkpoint {
                Some(p) => {
                    out.manifest.inputs.push(p.display().to_string());
                    let ck = Checkpoint::load(p)?;
                    if ck.model.env() != &env {
                        return Err(Error::Config(
                            "checkpoint environment differs from --env".into(),
                        ));
                    }
                    evaluate_zero_shot(&ck.model, &d.test, &env)?
                }
                None => evaluate_zero_shot(&ThetaEstimate::zeros(&env), &d.test, &env)?,
            };
            out.json("eval-zero-shot.json", &report)?;
        }
        Command::Adapt {
            protocol,
            agents,
            checkpoint,
            data,
            ..
        } => {
            let d = load_data(&cfg, data, &mut out.manifest)?;
            let ck = match checkpoint {
                Some(p) => {
                    out.manifest.inputs.push(p.display().to_string());
                    let ck = Checkpoint::load(p)?;
                    if ck.model.env() != &env {
                        return Err(Error::Config(
                            "checkpoint environment differs from --env".into(),
                        ));
                    }
                    Some(ck)
                }
                None => None,
            };
            let kinds: Vec<AgentKind> = if agents.is_empty() {
                match &ck {
                    Some(c) => AgentKind::ALL
                        .into_iter()
                        .filter(|k| *k != AgentKind::BlrHac || c.model.spec().with_prior)
                        .filter(|k| {
                            *k != AgentKind::OnlineTransformer
                                || c.model.spec().family == Family::CausalTransformer
                        })
                        .collect(),
                    None => vec![AgentKind::LinearScratch],
                }
            } else {
                agents.clone()
            };
            let mut curves = Vec::new();
            for kind in kinds {
                let factory = match (kind, &ck) {
                    (AgentKind::LinearScratch, _) => AgentFactory::LinearScratch {
                        alpha: cfg.adapt.alpha,
                    },
                    (_, None) => {
                        return Err(Error::Config(format!("agent {kind} needs --checkpoint")))
                    }
                    (AgentKind::BlrHac, Some(c)) => {
                        AgentFactory::blr_hac(&c.model, cfg.adapt.alpha)?
                    }
                    (AgentKind::OnlineTransformer, Some(c)) => AgentFactory::OnlineTransformer {
                        model: c.model.clone(),
                        cfg: cfg.adapt.transformer,
                    },
                };
                let exp = &cfg.adapt.experiment;
                let curve = match protocol {
                    Protocol::Stationary => {
                        stationary_experiment(&factory, &d.population.test, &env, exp)?
                    }
                    Protocol::Nonstationary => {
                        nonstationary_experiment(&factory, &d.population.test, &env, exp)?
                    }
                };
                info!("{kind}: {:?}", curve.per_episode_accuracy);
                curves.push(curve);
            }
            out.text(&format!("curves-{protocol}.csv"), &curves_csv(&curves)?)?;
            out.json(&format!("curves-{protocol}.json"), &curves)?;
        }
        Command::Flops { agent, .. } => {
            let plan = cfg.adapt.transformer.plan;
            let spec = cfg.model.to_spec(&env);
            let (name, subject) = match agent {
                FlopAgent::Linear => ("linear", FlopSubject::LinearPolicy),
                FlopAgent::BlrHac => ("blr_hac", FlopSubject::LinearPolicy),
                FlopAgent::Transformer => ("transformer", FlopSubject::Model(&spec)),
            };
            let report = FlopReport {
                agent: name,
                env,
                inference: count_flops(subject, FlopMode::Inference, &env, plan),
                update: count_flops(subject, FlopMode::Update, &env, plan),
            };
            out.json("flops.json", &report)?;
        }
        Command::Serve { .. } => unreachable!("handled above"),
    }

    out.manifest.duration_secs = started.elapsed().as_secs_f64();
    out.manifest.write(out.dir)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
