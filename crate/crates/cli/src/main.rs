use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rdar_core::driving;
use rdar_core::evaluation::{self, EvalCorpus, Selector};
use rdar_core::model::{checkpoint, Architecture, ModelParams};
use rdar_core::rng::{self, tag};
use rdar_core::scenario::{self, CorpusEntry, ScenarioSpec, Template};
use rdar_core::scene::to_ego_frame;
use rdar_core::sim::{self, TraceRecord};
use rdar_core::trainer::{self, TrainerConfig};
use rdar_core::RdarError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Parser, Debug)]
#[command(name = "rdar", version, about = "Reward-driven agent relevance: generate, train, evaluate")]
struct Cli {
    /// JSON run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (RDAR_OUT overrides)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the available cores
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Base trainer settings
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate scenario files
    Gen(GenArgs),
    /// Train a relevance model
    Train(TrainArgs),
    /// Closed-loop evaluation of one selector
    Eval(EvalArgs),
    /// Evaluate selectors over several k
    Sweep(SweepArgs),
    /// Render per-step relevance SVGs
    Viz(VizArgs),
    /// Trace the unfiltered driving policy on one scenario
    PolicyProbe(ProbeArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    template: Option<Template>,
    #[arg(long)]
    count: Option<usize>,
    /// Write the held-out evaluation corpus instead
    #[arg(long)]
    eval: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    arch: Option<Architecture>,
}

#[derive(Args, Debug)]
struct CorpusArgs {
    /// corpus.json written by `gen`; defaults to the held-out corpus
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    selector: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[command(flatten)]
    corpus: CorpusArgs,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Comma-separated selector names
    #[arg(long, value_delimiter = ',')]
    selector: Option<Vec<String>>,
    /// Comma-separated k values
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    #[command(flatten)]
    corpus: CorpusArgs,
}

#[derive(Args, Debug)]
struct ScenarioArgs {
    /// Scenario JSON file
    #[arg(long, conflicts_with_all = ["template", "scenario_seed"])]
    scenario: Option<PathBuf>,
    #[arg(long)]
    template: Option<Template>,
    #[arg(long)]
    scenario_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct VizArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    arch: Option<Architecture>,
    #[command(flatten)]
    scenario: ScenarioArgs,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ScenarioSettings {
    template: Option<Template>,
    count: usize,
    n_agents_min: usize,
    n_agents_max: usize,
}

impl Default for ScenarioSettings {
    fn default() -> Self {
        ScenarioSettings {
            template: None,
            count: 10,
            n_agents_min: 6,
            n_agents_max: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalSettings {
    per_template: usize,
    n_agents_min: usize,
    n_agents_max: usize,
    selector: String,
    k: usize,
    sweep_selectors: Vec<String>,
    k_values: Vec<usize>,
    checkpoint: Option<PathBuf>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            per_template: 500,
            n_agents_min: 6,
            n_agents_max: 16,
            selector: "none".into(),
            k: 4,
            sweep_selectors: vec!["rdar".into(), "closest".into(), "random".into()],
            k_values: vec![2, 4, 8, 16],
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
enum Preset {
    /// Trainer settings as documented
    #[default]
    Default,
    /// Settings that learn within a desk-scale budget
    Desk,
}

impl Preset {
    fn trainer(self) -> TrainerConfig {
        match self {
            Preset::Default => TrainerConfig::default(),
            Preset::Desk => TrainerConfig::desk(),
        }
    }
}

/// Post-training checkpoint choice on the validation corpus; off when
/// `per_template` is 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ValidationSettings {
    per_template: usize,
    k: usize,
}

impl Default for ValidationSettings {
    fn default() -> Self {
        ValidationSettings { per_template: 0, k: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    /// Base trainer settings that `trainer` fields override.
    preset: Preset,
    seed: u64,
    out: PathBuf,
    workers: Option<usize>,
    scenario: ScenarioSettings,
    trainer: TrainerConfig,
    validation: ValidationSettings,
    evaluation: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: Preset::Default,
            seed: 0,
            out: PathBuf::from("rdar_out"),
            workers: None,
            scenario: ScenarioSettings::default(),
            trainer: TrainerConfig::default(),
            validation: ValidationSettings::default(),
            evaluation: EvalSettings::default(),
        }
    }
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    RdarError::Config(msg.into()).into()
}

impl RunConfig {
    fn validate(&self) -> Result<()> {
        let agents = |lo: usize, hi: usize, what: &str| -> Result<()> {
            if lo < scenario::MIN_AGENTS || lo > hi || hi > rdar_core::scene::N_MAX {
                return Err(config_error(format!("{what}: agent count range must lie within [4, 32]")));
            }
            Ok(())
        };
        agents(self.scenario.n_agents_min, self.scenario.n_agents_max, "scenario")?;
        agents(self.evaluation.n_agents_min, self.evaluation.n_agents_max, "evaluation")?;
        if self.scenario.count == 0 {
            return Err(config_error("scenario.count must be at least 1"));
        }
        if self.evaluation.per_template == 0 {
            return Err(config_error("evaluation.per_template must be at least 1"));
        }
        if self.evaluation.k == 0 || self.evaluation.k_values.iter().any(|&k| k == 0) {
            return Err(config_error("k must be at least 1"));
        }
        if self.evaluation.k_values.is_empty() || self.evaluation.sweep_selectors.is_empty() {
            return Err(config_error("sweeps need at least one selector and one k"));
        }
        for s in std::iter::once(&self.evaluation.selector).chain(&self.evaluation.sweep_selectors) {
            if !["none", "closest", "random", "attribution", "rdar"].contains(&s.as_str()) {
                return Err(config_error(format!("unknown selector '{s}'")));
            }
        }
        if self.validation.k == 0 {
            return Err(config_error("validation.k must be at least 1"));
        }
        if self.workers == Some(0) {
            return Err(config_error("workers must be at least 1"));
        }
        self.trainer.validate()?;
        Ok(())
    }
}

/// Overlays `top` on `base`, recursing into objects.
fn merge(base: &mut serde_json::Value, top: serde_json::Value) {
    match (base, top) {
        (serde_json::Value::Object(b), serde_json::Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

/// Merges the config file, flags and environment into one validated
/// configuration.
fn resolve(cli: &Cli) -> Result<RunConfig> {
    let file: serde_json::Value = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| config_error(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", p.display())))?
        }
        None => serde_json::json!({}),
    };
    let preset = match (cli.preset, file.get("preset")) {
        (Some(p), _) => p,
        (None, Some(v)) => serde_json::from_value(v.clone()).map_err(|e| config_error(format!("preset: {e}")))?,
        (None, None) => Preset::Default,
    };
    let mut base = serde_json::to_value(RunConfig {
        preset,
        trainer: preset.trainer(),
        ..RunConfig::default()
    })?;
    merge(&mut base, file);
    base["preset"] = serde_json::to_value(preset)?;
    let mut cfg: RunConfig = serde_json::from_value(base).map_err(|e| config_error(format!("config: {e}")))?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.trainer.seed = cfg.seed;
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(o) = std::env::var_os("RDAR_OUT") {
        cfg.out = PathBuf::from(o);
    }
    if cli.workers.is_some() {
        cfg.workers = cli.workers;
    }
    match &cli.command {
        Command::Gen(a) => {
            if a.template.is_some() {
                cfg.scenario.template = a.template;
            }
            if let Some(c) = a.count {
                cfg.scenario.count = c;
            }
        }
        Command::Train(a) => {
            if let Some(arch) = a.arch {
                cfg.trainer.architecture = arch;
            }
        }
        Command::Eval(a) => {
            if let Some(s) = &a.selector {
                cfg.evaluation.selector = s.clone();
            }
            if let Some(k) = a.k {
                cfg.evaluation.k = k;
            }
            if let Some(c) = &a.corpus.checkpoint {
                cfg.evaluation.checkpoint = Some(c.clone());
            }
        }
        Command::Sweep(a) => {
            if let Some(s) = &a.selector {
                cfg.evaluation.sweep_selectors = s.clone();
            }
            if let Some(k) = &a.k {
                cfg.evaluation.k_values = k.clone();
            }
            if let Some(c) = &a.corpus.checkpoint {
                cfg.evaluation.checkpoint = Some(c.clone());
            }
        }
        Command::Viz(_) | Command::PolicyProbe(_) => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn workers(cfg: &RunConfig) -> usize {
    cfg.workers
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

fn write(path: &Path, bytes: &[u8], outputs: &mut Vec<PathBuf>) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    outputs.push(path.to_path_buf());
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    tool_version: &'a str,
    seed: u64,
    config_sha256: String,
    /// Hash over the names and bytes of every output, in name order.
    content_version: String,
    outputs: Vec<String>,
    config: &'a RunConfig,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_manifest(cfg: &RunConfig, command: &str, outputs: &[PathBuf]) -> Result<()> {
    let config_sha256 = hex(&Sha256::digest(serde_json::to_vec(cfg)?));
    let mut names: Vec<(String, &PathBuf)> = outputs
        .iter()
        .map(|p| (p.strip_prefix(&cfg.out).unwrap_or(p).to_string_lossy().replace('\\', "/"), p))
        .collect();
    names.sort();
    let mut h = Sha256::new();
    for (name, path) in &names {
        let bytes = fs::read(path)?;
        h.update(format!("{name} {}\0", bytes.len()));
        h.update(&bytes);
    }
    let manifest = Manifest {
        command,
        tool_version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        config_sha256,
        content_version: hex(&h.finalize())[..16].to_string(),
        outputs: names.into_iter().map(|(n, _)| n).collect(),
        config: cfg,
    };
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

fn cmd_gen(cfg: &RunConfig, args: &GenArgs) -> Result<Vec<PathBuf>> {
    let mut outputs = Vec::new();
    let mut entries: Vec<CorpusEntry> = if args.eval {
        scenario::eval_corpus(cfg.evaluation.per_template, (cfg.evaluation.n_agents_min, cfg.evaluation.n_agents_max))
    } else {
        let templates = match cfg.scenario.template {
            Some(t) => vec![t],
            None => Template::ALL.to_vec(),
        };
        (0..cfg.scenario.count as u64)
            .map(|i| {
                let seed = rng::mix(cfg.seed, &[tag::CORPUS, i]);
                CorpusEntry {
                    seed,
                    template: templates[i as usize % templates.len()],
                    n_agents: scenario::draw_n_agents(seed, cfg.scenario.n_agents_min, cfg.scenario.n_agents_max),
                    path: None,
                }
            })
            .collect()
    };
    for (i, e) in entries.iter_mut().enumerate() {
        let name = format!("scenarios/{:05}_{}.json", i, e.template);
        write(&cfg.out.join(&name), e.build()?.to_json()?.as_bytes(), &mut outputs)?;
        e.path = Some(name);
    }
    write(&cfg.out.join("corpus.json"), &serde_json::to_vec_pretty(&entries)?, &mut outputs)?;
    Ok(outputs)
}

fn cmd_train(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let out = trainer::train(&cfg.trainer, Some(&cfg.out))?;
    let mut outputs = out.checkpoints.clone();
    outputs.push(cfg.out.join("train_log.jsonl"));
    let v = &cfg.validation;
    if v.per_template > 0 {
        let candidates = out
            .checkpoints
            .iter()
            .map(|p| checkpoint::load(p).map(Arc::new))
            .collect::<rdar_core::Result<Vec<_>>>()?;
        let n = workers(cfg);
        let corpus = EvalCorpus::build(
            &scenario::validation_corpus(v.per_template, (cfg.evaluation.n_agents_min, cfg.evaluation.n_agents_max)),
            n,
        )?;
        let (best, mut reports) = evaluation::select_checkpoint(&candidates, v.k, &corpus, n)?;
        for (r, p) in reports.iter_mut().zip(&out.checkpoints) {
            r.selector = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
        }
        let best_path = cfg.out.join("checkpoints/best.rdar");
        checkpoint::save(&candidates[best], &best_path)?;
        outputs.push(best_path);
        let mut csv = Vec::new();
        evaluation::write_csv(&mut csv, &reports)?;
        write(&cfg.out.join("validation.csv"), &csv, &mut outputs)?;
        eprintln!("best checkpoint: {}", out.checkpoints[best].display());
    }
    let last = out.log.last();
    eprintln!(
        "trained {} updates; final mean episode reward {:.3}",
        out.log.len(),
        last.map_or(f64::NAN, |r| r.mean_episode_reward)
    );
    Ok(outputs)
}

fn load_corpus(cfg: &RunConfig, path: Option<&Path>) -> Result<Vec<ScenarioSpec>> {
    match path {
        None => scenario::eval_corpus(cfg.evaluation.per_template, (cfg.evaluation.n_agents_min, cfg.evaluation.n_agents_max))
            .iter()
            .map(|e| e.build().map_err(Into::into))
            .collect(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| config_error(format!("cannot read corpus {}: {e}", p.display())))?;
            let entries: Vec<CorpusEntry> =
                serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", p.display())))?;
            let base = p.parent().unwrap_or(Path::new("."));
            entries
                .iter()
                .map(|e| match &e.path {
                    Some(rel) => {
                        let f = base.join(rel);
                        let text = fs::read_to_string(&f)
                            .map_err(|err| config_error(format!("cannot read scenario {}: {err}", f.display())))?;
                        Ok(ScenarioSpec::from_json(&text)?)
                    }
                    None => Ok(e.build()?),
                })
                .collect()
        }
    }
}

fn load_params(path: Option<&PathBuf>) -> Result<Option<Arc<ModelParams>>> {
    path.map(|p| checkpoint::load(p).map(Arc::new).map_err(Into::into)).transpose()
}

fn emit_reports(cfg: &RunConfig, stem: &str, reports: &[evaluation::MetricsReport]) -> Result<Vec<PathBuf>> {
    let mut outputs = Vec::new();
    let mut csv = Vec::new();
    evaluation::write_csv(&mut csv, reports)?;
    write(&cfg.out.join(format!("{stem}.csv")), &csv, &mut outputs)?;
    let mut json = Vec::new();
    evaluation::write_json(&mut json, reports)?;
    write(&cfg.out.join(format!("{stem}.json")), &json, &mut outputs)?;
    print!("{}", String::from_utf8_lossy(&csv));
    Ok(outputs)
}

fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<Vec<PathBuf>> {
    let ev = &cfg.evaluation;
    let params = load_params(ev.checkpoint.as_ref())?;
    let selector = Selector::parse(&ev.selector, cfg.seed, params)?;
    let n = workers(cfg);
    let corpus = EvalCorpus::from_specs(load_corpus(cfg, args.corpus.corpus.as_deref())?, n)?;
    let run = evaluation::run_closed_loop(&selector, ev.k, &corpus, n)?;
    emit_reports(cfg, "metrics", &[run.report])
}

fn cmd_sweep(cfg: &RunConfig, args: &SweepArgs) -> Result<Vec<PathBuf>> {
    let ev = &cfg.evaluation;
    let params = load_params(ev.checkpoint.as_ref())?;
    let selectors = ev
        .sweep_selectors
        .iter()
        .map(|s| Selector::parse(s, cfg.seed, params.clone()))
        .collect::<rdar_core::Result<Vec<_>>>()?;
    let n = workers(cfg);
    let corpus = EvalCorpus::from_specs(load_corpus(cfg, args.corpus.corpus.as_deref())?, n)?;
    let table = evaluation::k_sweep(&selectors, &ev.k_values, &corpus, n)?;
    emit_reports(cfg, "sweep", &table)
}

fn scenario_from(args: &ScenarioArgs, cfg: &RunConfig) -> Result<ScenarioSpec> {
    if let Some(p) = &args.scenario {
        let text = fs::read_to_string(p).map_err(|e| config_error(format!("cannot read {}: {e}", p.display())))?;
        return Ok(ScenarioSpec::from_json(&text)?);
    }
    let template = args
        .template
        .ok_or_else(|| config_error("give --scenario, or --template with --scenario-seed"))?;
    let seed = args.scenario_seed.unwrap_or(cfg.seed);
    let n = scenario::draw_n_agents(seed, cfg.scenario.n_agents_min, cfg.scenario.n_agents_max);
    Ok(scenario::generate(seed, template, n)?)
}

fn cmd_viz(cfg: &RunConfig, args: &VizArgs) -> Result<Vec<PathBuf>> {
    let params = checkpoint::load(&args.checkpoint)?;
    if let Some(a) = args.arch {
        if a != params.arch {
            return Err(config_error(format!("checkpoint holds {}, not {a}", params.arch)));
        }
    }
    let spec = scenario_from(&args.scenario, cfg)?;
    let frames = evaluation::relevance_frames(&params, &spec, args.k.unwrap_or(cfg.evaluation.k))?;
    let mut outputs = Vec::new();
    for (t, svg) in frames.iter().enumerate() {
        write(&cfg.out.join(format!("frames/step_{t:03}.svg")), svg.as_bytes(), &mut outputs)?;
    }
    Ok(outputs)
}

#[derive(Serialize)]
struct ProbeLine<'a> {
    #[serde(flatten)]
    trace: &'a TraceRecord,
    probs: [f64; sim::N_ACTIONS],
    speed: f64,
}

fn cmd_probe(cfg: &RunConfig, args: &ProbeArgs) -> Result<Vec<PathBuf>> {
    let spec = scenario_from(&args.scenario, cfg)?;
    let mut scene = spec.initial_scene();
    let mut lines = Vec::new();
    loop {
        let dist = driving::policy_distribution(&to_ego_frame(&scene));
        let action = dist.argmax();
        let out = sim::step(&scene, action, &spec)?;
        let rec = TraceRecord::new(&scene, action, &out)?;
        lines.push(serde_json::to_string(&ProbeLine {
            trace: &rec,
            probs: dist.probs,
            speed: scene.ego.speed,
        })?);
        scene = out.next_scene;
        if out.done {
            break;
        }
    }
    let mut outputs = Vec::new();
    write(&cfg.out.join("policy_probe.jsonl"), (lines.join("\n") + "\n").as_bytes(), &mut outputs)?;
    Ok(outputs)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli)?;
    let (name, outputs) = match &cli.command {
        Command::Gen(a) => ("gen", cmd_gen(&cfg, a)?),
        Command::Train(_) => ("train", cmd_train(&cfg)?),
        Command::Eval(a) => ("eval", cmd_eval(&cfg, a)?),
        Command::Sweep(a) => ("sweep", cmd_sweep(&cfg, a)?),
        Command::Viz(a) => ("viz", cmd_viz(&cfg, a)?),
        Command::PolicyProbe(a) => ("policy-probe", cmd_probe(&cfg, a)?),
    };
    write_manifest(&cfg, name, &outputs)
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain()
        .any(|c| c.downcast_ref::<RdarError>().is_some_and(RdarError::is_config))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_config_error(&e) { 1 } else { 2 })
        }
    }
}
