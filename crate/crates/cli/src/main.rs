use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use culture_probe::features::{self, FeatureError, FeatureSet};
use culture_probe::intervention::{self, InterventionError, Mode, DEFAULT_LAMBDA};
use culture_probe::layer_enhancer::{
    self, EnhancerError, EnhancerModel, EnhancerTrainConfig, ToyPipeline, ToyPipelineSpec,
};
use culture_probe::layer_scan::{self, LayerScanResult, ScanError, SelectionRule};
use culture_probe::neuron_scan::{self, NeuronError, NeuronReport, SelectionPolicy, DEFAULT_BETA};
use culture_probe::optim::AdamWConfig;
use culture_probe::report::{self, Format, ReportError};
use culture_probe::synth_fixtures::{self, FixtureError, PlantSpec};
use culture_probe::topk_sae::{self, SaeError, SaeTrainConfig, DEFAULT_HIDDEN, DEFAULT_LEARNING_RATE};
use culture_probe::trace_store::{self, StoreError};

const SEED_ENV: &str = "CULTURE_PROBE_SEED";

#[derive(Debug, Parser)]
#[command(name = "culture-probe", version, about = "Locate and amplify culture-sensitive layers and neurons", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", content = "args", rename_all = "kebab-case")]
enum Command {
    /// Synthetic fixtures with planted ground truth
    #[command(subcommand)]
    Fixtures(FixturesCommand),
    /// Per-layer Delta CA curve and sensitive-layer selection
    ScanLayers(ScanLayersArgs),
    /// Modifier-to-noun attention features at one layer
    Features(FeaturesArgs),
    /// Train a Top-K sparse autoencoder
    TrainSae(TrainSaeArgs),
    /// Score SAE latents per culture and select culture neurons
    ScanNeurons(ScanNeuronsArgs),
    /// Mask selected and random neurons and measure planted energy
    ValidateMask(ValidateMaskArgs),
    /// Scale selected latents and decode
    #[command(visible_alias = "intervene")]
    Amplify(AmplifyArgs),
    /// Train the residual layer enhancer against a frozen pipeline
    TrainEnhancer(TrainEnhancerArgs),
    /// Render result files as CSV, SVG or JSON
    Report(ReportArgs),
    /// Re-run a command from its saved config file
    #[serde(skip)]
    Rerun(RerunArgs),
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum FixturesCommand {
    /// Write a planted trace bundle from a JSON spec
    Make(FixturesMakeArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct FixturesMakeArgs {
    /// Fixture spec (JSON)
    #[arg(long)]
    spec: PathBuf,
    /// Trace bundle to write
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth JSON to write
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Feature container from the spec's sparse dataset
    #[arg(long)]
    features: Option<PathBuf>,
    /// Overrides the spec seeds
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct ScanLayersArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = SelectionRule::default().margin_factor)]
    margin_factor: f64,
    #[arg(long, default_value_t = SelectionRule::default().min_peak_fraction)]
    min_peak_fraction: f64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct FeaturesArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Layer to read
    #[arg(long, conflicts_with = "layers", required_unless_present = "layers")]
    layer: Option<usize>,
    /// Layer scan result; its top layer is used
    #[arg(long)]
    layers: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum SaeInit {
    /// Decoder bias at the data mean
    Data,
    Random,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct TrainSaeArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_HIDDEN)]
    d_hidden: usize,
    /// Active latents per row; defaults to d_hidden / 32
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_LEARNING_RATE)]
    lr: f64,
    #[arg(long, default_value_t = 5000)]
    steps: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, value_enum, default_value_t = SaeInit::Data)]
    init: SaeInit,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct ScanNeuronsArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    sae: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Activation threshold
    #[arg(long, default_value_t = 0.0)]
    epsilon: f64,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
    #[arg(long, default_value_t = SelectionPolicy::default().max_candidates)]
    max_candidates: usize,
    #[arg(long, default_value_t = SelectionPolicy::default().elbow_ratio)]
    elbow_ratio: f64,
    #[arg(long, default_value_t = SelectionPolicy::default().fixed_k)]
    fixed_k: usize,
    #[arg(long, default_value_t = SelectionPolicy::default().noun_fraction)]
    noun_fraction: f64,
    #[arg(long, default_value_t = SelectionPolicy::default().tail_floor)]
    tail_floor: f64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct ValidateMaskArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    sae: PathBuf,
    #[arg(long)]
    neurons: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Seeds the random comparison sets
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ModeArg {
    Amplify,
    Mask,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct AmplifyArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    sae: PathBuf,
    /// Neuron scan result supplying the latent set
    #[arg(long, required_unless_present = "neuron_set")]
    neurons: Option<PathBuf>,
    /// Explicit latent indices instead of a scan result
    #[arg(long, value_delimiter = ',', conflicts_with = "neurons")]
    neuron_set: Option<Vec<usize>>,
    /// Restrict to these cultures (repeatable); default is all
    #[arg(long)]
    culture: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Amplify)]
    mode: ModeArg,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    /// Lambdas for a planted-energy sweep, comma separated
    #[arg(long, value_delimiter = ',', requires = "sweep_out")]
    sweep: Option<Vec<f64>>,
    #[arg(long, requires = "sweep")]
    sweep_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum PipelineKind {
    Toy,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct TrainEnhancerArgs {
    #[arg(long, value_enum, default_value_t = PipelineKind::Toy)]
    pipeline: PipelineKind,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = layer_enhancer::DEFAULT_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = layer_enhancer::DEFAULT_LR)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 16)]
    d: usize,
    /// Bottleneck width; defaults to d / 4
    #[arg(long)]
    d_mid: Option<usize>,
    #[arg(long, default_value_t = 6)]
    n_tokens: usize,
    #[arg(long, default_value_t = 4)]
    n_layers: usize,
    #[arg(long, default_value_t = 1, conflicts_with = "layers")]
    host_layer: usize,
    /// Layer scan result; hosts the enhancer at its top layer
    #[arg(long)]
    layers: Option<PathBuf>,
    /// Training prompts
    #[arg(long, default_value_t = 8)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct ReportArgs {
    /// Result JSON files
    inputs: Vec<PathBuf>,
    #[arg(long, value_enum)]
    format: FormatArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum FormatArg {
    Csv,
    Svg,
    Json,
}

#[derive(Debug, Clone, Args)]
struct RerunArgs {
    /// A `<out>.config.json` written by an earlier run
    config: PathBuf,
}

/// Resolved configuration saved beside every output.
#[derive(Debug, Serialize, Deserialize)]
struct RunConfig {
    tool: String,
    version: String,
    #[serde(flatten)]
    run: Command,
}

/// Bad input or usage, reported with exit code 2.
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

fn is_validation(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        if e.is::<UsageError>() || e.is::<serde_json::Error>() || e.is::<ReportError>() || e.is::<ScanError>() {
            return true;
        }
        if e.is::<NeuronError>() || e.is::<FixtureError>() {
            return true;
        }
        if let Some(e) = e.downcast_ref::<StoreError>() {
            return e.is_validation();
        }
        if let Some(e) = e.downcast_ref::<SaeError>() {
            return e.is_validation();
        }
        if let Some(e) = e.downcast_ref::<FeatureError>() {
            return e.is_validation();
        }
        if let Some(e) = e.downcast_ref::<InterventionError>() {
            return e.is_validation();
        }
        if let Some(e) = e.downcast_ref::<EnhancerError>() {
            return e.is_validation();
        }
        false
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(2),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { 2 } else { 1 })
        }
    }
}

fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn apply_seed(cmd: &mut Command, seed: u64) {
    match cmd {
        Command::Fixtures(FixturesCommand::Make(a)) => a.seed = Some(seed),
        Command::TrainSae(a) => a.seed = seed,
        Command::ValidateMask(a) => a.seed = seed,
        Command::TrainEnhancer(a) => a.seed = seed,
        _ => {}
    }
}

fn run(mut cmd: Command) -> Result<()> {
    if let Command::Rerun(a) = &cmd {
        let text = read_text(&a.config)?;
        let cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", a.config.display()))?;
        if matches!(cfg.run, Command::Rerun(_)) {
            bail!(usage("a config cannot re-run another config"));
        }
        cmd = cfg.run;
    }
    if let Some(seed) = seed_override()? {
        apply_seed(&mut cmd, seed);
    }
    let out = match &cmd {
        Command::Fixtures(FixturesCommand::Make(a)) => fixtures_make(a)?,
        Command::ScanLayers(a) => scan_layers(a)?,
        Command::Features(a) => extract_features(a)?,
        Command::TrainSae(a) => train_sae(a)?,
        Command::ScanNeurons(a) => scan_neurons(a)?,
        Command::ValidateMask(a) => validate_mask(a)?,
        Command::Amplify(a) => amplify(a)?,
        Command::TrainEnhancer(a) => train_enhancer(a)?,
        Command::Report(a) => render_report(a)?,
        Command::Rerun(_) => unreachable!("resolved above"),
    };
    let cfg = RunConfig { tool: "culture-probe".into(), version: env!("CARGO_PKG_VERSION").into(), run: cmd };
    write_json(&sibling(&out, "config.json"), &cfg)
}

// ---------------------------------------------------------------------------
// I/O helpers
// ---------------------------------------------------------------------------

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".");
    name.push(suffix);
    path.with_file_name(name)
}

fn check_input(path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!(usage(format!("input {} does not exist", path.display())));
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    check_input(path)?;
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    check_input(path)?;
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

/// Writes through a temporary file in the same directory, then renames.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = sibling(path, &format!("tmp-{}", std::process::id()));
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming {} to {}", tmp.display(), path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn load_features(path: &Path) -> Result<FeatureSet> {
    features::decode_features(&read_bytes(path)?).with_context(|| format!("loading {}", path.display()))
}

fn load_sae(path: &Path) -> Result<topk_sae::SaeModel> {
    topk_sae::decode_sae(&read_bytes(path)?).with_context(|| format!("loading {}", path.display()))
}

fn top_layer(path: &Path) -> Result<(usize, usize)> {
    let scan: LayerScanResult = read_json(path)?;
    let layer = scan
        .top_layer()
        .ok_or_else(|| usage(format!("{} has no layers", path.display())))?;
    Ok((layer, scan.delta_ca.len()))
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn fixtures_make(a: &FixturesMakeArgs) -> Result<PathBuf> {
    let mut spec: PlantSpec = read_json(&a.spec)?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
        if let Some(sparse) = spec.sae_dataset.as_mut() {
            sparse.seed = seed;
        }
    }
    let (bundle, truth) = synth_fixtures::make_planted_traces(&spec)?;
    write_atomic(&a.out, &bundle.to_bytes()?)?;
    if let Some(path) = &a.truth {
        write_json(path, &truth)?;
    }
    if let Some(path) = &a.features {
        let sparse = spec
            .sae_dataset
            .as_ref()
            .ok_or_else(|| usage("--features needs a spec with an sae_dataset section"))?;
        let ds = synth_fixtures::make_sparse_dataset(sparse, &spec.cultures)?;
        write_atomic(path, &features::encode_features(&features::from_sparse(&ds))?)?;
    }
    println!(
        "wrote {} ({} layers, {} pairs, planted layer {})",
        a.out.display(),
        spec.n_layers,
        spec.n_pairs,
        truth.planted_layer
    );
    Ok(a.out.clone())
}

fn scan_layers(a: &ScanLayersArgs) -> Result<PathBuf> {
    let bundle = trace_store::TraceBundle::from_bytes(&read_bytes(&a.traces)?)
        .with_context(|| format!("loading {}", a.traces.display()))?;
    let rule = SelectionRule { margin_factor: a.margin_factor, min_peak_fraction: a.min_peak_fraction };
    let result = layer_scan::scan_layers(&bundle, &rule)?;
    write_json(&a.out, &result)?;
    println!("sensitive layers {:?}{}", result.sensitive_layers, if result.fallback { " (fallback)" } else { "" });
    Ok(a.out.clone())
}

fn extract_features(a: &FeaturesArgs) -> Result<PathBuf> {
    let bundle = trace_store::TraceBundle::from_bytes(&read_bytes(&a.traces)?)
        .with_context(|| format!("loading {}", a.traces.display()))?;
    let layer = match (a.layer, &a.layers) {
        (Some(l), _) => l,
        (None, Some(p)) => top_layer(p)?.0,
        (None, None) => bail!(usage("one of --layer or --layers is required")),
    };
    let fs = features::from_traces(&bundle, layer)?;
    write_atomic(&a.out, &features::encode_features(&fs)?)?;
    println!("wrote {} rows x {} features from layer {layer}", fs.data.nrows(), fs.d_in());
    Ok(a.out.clone())
}

#[derive(Serialize)]
struct SaeSummary {
    d_in: usize,
    d_hidden: usize,
    k: usize,
    relative_mse: f64,
    exact_k_fraction: f64,
    losses: Vec<f64>,
}

fn train_sae(a: &TrainSaeArgs) -> Result<PathBuf> {
    let fs = load_features(&a.features)?;
    let k = a.k.unwrap_or_else(|| topk_sae::default_k(a.d_hidden));
    let data = fs.data.view();
    let init = match a.init {
        SaeInit::Data => topk_sae::init_sae_for_data(&data, a.d_hidden, k, a.seed)?,
        SaeInit::Random => topk_sae::init_sae(fs.d_in(), a.d_hidden, k, a.seed)?,
    };
    let cfg = SaeTrainConfig {
        learning_rate: a.lr,
        steps: a.steps,
        batch_size: a.batch_size,
        weight_decay: a.weight_decay,
        seed: a.seed,
        ..Default::default()
    };
    let (model, losses) = topk_sae::train(&init, &data, &cfg)?;
    let relative_mse = model.relative_mse(&data)?;
    let active = model.encode_sparse(&data)?;
    let exact = active.iter().filter(|s| s.len() == k).count();
    write_atomic(&a.out, &topk_sae::encode_sae(&model)?)?;
    let summary = SaeSummary {
        d_in: model.d_in,
        d_hidden: model.d_hidden,
        k,
        relative_mse,
        exact_k_fraction: exact as f64 / active.len().max(1) as f64,
        losses,
    };
    write_json(&sibling(&a.out, "train.json"), &summary)?;
    println!("relative mse {relative_mse:.4}, exact-k rows {exact}/{}", active.len());
    Ok(a.out.clone())
}

fn scan_neurons(a: &ScanNeuronsArgs) -> Result<PathBuf> {
    let fs = load_features(&a.features)?;
    let model = load_sae(&a.sae)?;
    if fs.cultures().is_empty() {
        bail!(usage(format!("{} has no culture labels", a.features.display())));
    }
    let policy = SelectionPolicy {
        max_candidates: a.max_candidates,
        elbow_ratio: a.elbow_ratio,
        fixed_k: a.fixed_k,
        noun_fraction: a.noun_fraction,
        tail_floor: a.tail_floor,
    };
    let z = model.encode(&fs.data.view())?;
    let reports = neuron_scan::scan_feature_set(&z.view(), &fs, a.epsilon, a.beta, &policy)?;
    write_json(&a.out, &reports)?;
    for r in &reports {
        let flag = if r.diagnostics.fallback { " (fallback)" } else { "" };
        println!("{}: {:?}{flag}", r.culture_label, r.selected);
    }
    Ok(a.out.clone())
}

fn validate_mask(a: &ValidateMaskArgs) -> Result<PathBuf> {
    let fs = load_features(&a.features)?;
    let model = load_sae(&a.sae)?;
    let reports: Vec<NeuronReport> = read_json(&a.neurons)?;
    let v = intervention::validate_masking(&model, &fs, &reports, a.seed)?;
    write_json(&a.out, &v)?;
    for (name, value) in v.report.rows() {
        println!("{name}: {value}");
    }
    Ok(a.out.clone())
}

fn amplify(a: &AmplifyArgs) -> Result<PathBuf> {
    let fs = load_features(&a.features)?;
    let model = load_sae(&a.sae)?;
    let mut per_culture: Vec<(String, Vec<usize>)> = Vec::new();
    if let Some(set) = &a.neuron_set {
        per_culture.push((a.culture.first().cloned().unwrap_or_default(), set.clone()));
    } else if let Some(path) = &a.neurons {
        let reports: Vec<NeuronReport> = read_json(path)?;
        for c in &a.culture {
            if !reports.iter().any(|r| &r.culture_label == c) {
                bail!(usage(format!("culture {c:?} not in {}", path.display())));
            }
        }
        for r in reports {
            if a.culture.is_empty() || a.culture.contains(&r.culture_label) {
                per_culture.push((r.culture_label, r.selected));
            }
        }
    }
    let mut set: Vec<usize> = per_culture.iter().flat_map(|(_, s)| s.iter().copied()).collect();
    set.sort_unstable();
    set.dedup();
    let lambda = match a.mode {
        ModeArg::Amplify => a.lambda,
        ModeArg::Mask => -1.0,
    };
    let cfg = intervention::InterventionConfig {
        mode: match a.mode {
            ModeArg::Amplify => Mode::Amplify,
            ModeArg::Mask => Mode::Mask,
        },
        neuron_set: set.clone(),
        lambda: Some(lambda),
        seed: 0,
    };
    let out = intervention::apply(&model, &fs.data.view().into_dyn(), &cfg)?;
    let out = out.into_dimensionality::<ndarray::Ix2>().expect("two-dimensional features");
    write_atomic(&a.out, &features::encode_features(&fs.with_data(out))?)?;
    if let (Some(lambdas), Some(path)) = (&a.sweep, &a.sweep_out) {
        let sweeps = per_culture
            .iter()
            .map(|(c, s)| intervention::lambda_sweep(&model, &fs, c, s, lambdas))
            .collect::<Result<Vec<_>, _>>()?;
        write_json(path, &sweeps)?;
    }
    println!("scaled {} latents by {}", set.len(), 1.0 + lambda);
    Ok(a.out.clone())
}

#[derive(Serialize)]
struct EnhancerSummary {
    pipeline: ToyPipelineSpec,
    d_mid: usize,
    initial_loss: f64,
    final_loss: f64,
    backbone_digest_before: String,
    backbone_digest_after: String,
    losses: Vec<f64>,
}

fn train_enhancer(a: &TrainEnhancerArgs) -> Result<PathBuf> {
    let (host_layer, n_layers) = match &a.layers {
        Some(p) => top_layer(p)?,
        None => (a.host_layer, a.n_layers),
    };
    let spec = ToyPipelineSpec { d: a.d, n_tokens: a.n_tokens, n_layers, host_layer, grid: (16, 16), seed: a.seed };
    let pipe = ToyPipeline::build(spec)?;
    let d_mid = a.d_mid.unwrap_or_else(|| EnhancerModel::default_d_mid(a.d));
    let init = EnhancerModel::init(a.d, d_mid, culture_probe::numeric::derive_seed(a.seed, &[1]))?;
    let task = synth_fixtures::make_enhancer_task(&pipe, &init, a.samples, culture_probe::numeric::derive_seed(a.seed, &[2]))?;
    let before = pipe.digest();
    let cfg = EnhancerTrainConfig {
        steps: a.steps,
        optimizer: AdamWConfig { learning_rate: a.lr, weight_decay: a.weight_decay, ..Default::default() },
        seed: a.seed,
    };
    let outcome = layer_enhancer::train_enhancer(&pipe, &init, &task.samples, &cfg)?;
    let after = pipe.digest();
    write_atomic(&a.out, &layer_enhancer::encode_enhancer(&outcome.model, Some(spec))?)?;
    println!(
        "loss {:.6} -> {:.6} over {} steps at host layer {host_layer}",
        outcome.initial_loss, outcome.final_loss, a.steps
    );
    let summary = EnhancerSummary {
        pipeline: spec,
        d_mid,
        initial_loss: outcome.initial_loss,
        final_loss: outcome.final_loss,
        backbone_digest_before: before,
        backbone_digest_after: after,
        losses: outcome.losses,
    };
    write_json(&sibling(&a.out, "train.json"), &summary)?;
    Ok(a.out.clone())
}

fn render_report(a: &ReportArgs) -> Result<PathBuf> {
    if a.inputs.is_empty() {
        bail!(usage("report needs at least one result file"));
    }
    let mut parsed = Vec::new();
    for p in &a.inputs {
        let text = read_text(p)?;
        parsed.push(report::parse_result(&p.display().to_string(), &text)?);
    }
    let format = match a.format {
        FormatArg::Csv => Format::Csv,
        FormatArg::Svg => Format::Svg,
        FormatArg::Json => Format::Json,
    };
    let rendered = report::render(&parsed, format)?;
    write_atomic(&a.out, rendered.as_bytes())?;
    println!("wrote {}", a.out.display());
    Ok(a.out.clone())
}
