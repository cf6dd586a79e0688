use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fnirs_gaf::eval::{CvReport, CvSummary};
use fnirs_gaf::features::{permutation_importance, select_channel, write_importance_csv, FeatureTable};
use fnirs_gaf::gaf::{GafKind, Signal};
use fnirs_gaf::ingest::{load_recording_dir, synthesize_recording, write_recording_dir, IngestError};
use fnirs_gaf::nn::{save_model, train_logreg, Knn, NetworkSpec, NnError, TrainConfig};
use fnirs_gaf::pipeline::{
    build_feature_table, classify, cnn_cv, encode_images, feature_cv, fit_cnn, read_epoch_dir, read_image_dir,
    run_pipeline, write_epoch_dir, write_image_dir, Baseline, ErrorClass, PipelineConfig, PipelineError,
    StageError, AUTO_CHANNEL,
};
use fnirs_gaf::preprocess::{preprocess_recording, BeerLambertCoefficients};
use fnirs_gaf::rng::derive_seed;
use fnirs_gaf::SynthesisConfig;
use serde_json::json;

#[derive(Parser)]
#[command(name = "fnirs-gaf", version, about = "fNIRS task classification with GASF images and a CNN")]
struct Cli {
    /// Pipeline config (TOML); subcommand flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write labelled synthetic recordings.
    Synth(SynthArgs),
    /// Recording checks.
    #[command(subcommand)]
    Ingest(IngestCommand),
    /// Optical density to baseline-corrected epochs.
    #[command(subcommand)]
    Preprocess(PreprocessCommand),
    /// Windowed-mean features and permutation importance.
    #[command(subcommand)]
    Features(FeaturesCommand),
    /// Gramian angular field images.
    #[command(subcommand)]
    Gaf(GafCommand),
    /// Train a CNN on an image directory.
    Train(TrainArgs),
    /// Cross-validation.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Predict the task of saved epochs.
    Classify(ClassifyArgs),
    /// Every stage from one config.
    #[command(subcommand)]
    Pipeline(PipelineCommand),
}

#[derive(Args)]
struct SynthArgs {
    /// Trials per class and recording.
    #[arg(long, default_value_t = 30)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    subjects: usize,
    /// Channels; the first four carry the task response.
    #[arg(long, default_value_t = 16)]
    channels: usize,
    /// MI, MA and IS response gains of the first four channels; the other
    /// channels get 0.15 times these.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = [1.0, -1.0, 0.0])]
    gains: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    noise_sd: f64,
    #[arg(long, default_value_t = 0.5)]
    drift: f64,
    #[arg(long, default_value_t = 13.3)]
    rate: f64,
}

#[derive(Subcommand)]
enum IngestCommand {
    /// Load and check every recording in a directory.
    Validate { dir: PathBuf },
}

#[derive(Subcommand)]
enum PreprocessCommand {
    Run(PreprocessArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    filter_low: Option<f64>,
    #[arg(long)]
    filter_high: Option<f64>,
    #[arg(long)]
    order: Option<usize>,
    /// Beer-Lambert coefficient table (JSON).
    #[arg(long)]
    coeffs: Option<PathBuf>,
}

#[derive(Subcommand)]
enum FeaturesCommand {
    /// One feature row per epoch.
    Extract {
        #[arg(long)]
        epochs: PathBuf,
    },
    /// Rank features by permutation importance and pick a channel.
    Importance {
        #[arg(long)]
        features: PathBuf,
        #[arg(long, value_enum, default_value_t = ModelArg::Logreg)]
        model: ModelArg,
        #[arg(long)]
        repeats: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Logreg,
    Knn,
}

impl From<ModelArg> for Baseline {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Logreg => Baseline::Logreg,
            ModelArg::Knn => Baseline::Knn,
        }
    }
}

#[derive(Subcommand)]
enum GafCommand {
    Encode(GafArgs),
}

#[derive(Args)]
struct GafArgs {
    #[arg(long)]
    epochs: PathBuf,
    #[arg(long)]
    channel: Option<String>,
    #[arg(long)]
    kind: Option<GafKind>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    signal: Option<Signal>,
    /// Encode `[-5, 25] s` instead of `[0, 25] s`.
    #[arg(long)]
    full_window: bool,
}

#[derive(Args)]
struct NetArgs {
    /// Network spec (TOML).
    #[arg(long)]
    net: Option<PathBuf>,
    /// Training config (TOML).
    #[arg(long)]
    train: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    images: PathBuf,
    #[command(flatten)]
    net: NetArgs,
}

#[derive(Args)]
struct CvArgs {
    #[arg(long)]
    k: Option<usize>,
    /// Plain instead of stratified folds.
    #[arg(long)]
    no_stratify: bool,
    /// Pool every sample instead of running CV within each subject.
    #[arg(long)]
    pooled: bool,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Feature-baseline cross-validation.
    Cv {
        #[arg(long)]
        features: PathBuf,
        #[arg(long, value_enum, default_value_t = ModelArg::Logreg)]
        model: ModelArg,
        #[command(flatten)]
        cv: CvArgs,
    },
    /// CNN cross-validation on an image directory.
    CvCnn {
        #[arg(long)]
        images: PathBuf,
        #[command(flatten)]
        net: NetArgs,
        #[command(flatten)]
        cv: CvArgs,
    },
}

#[derive(Args)]
struct ClassifyArgs {
    /// Weights written by `train` or `pipeline run`.
    #[arg(long)]
    model: PathBuf,
    /// Epoch CSV, or a directory of epochs with its manifest.
    epochs: PathBuf,
}

#[derive(Subcommand)]
enum PipelineCommand {
    Run {
        #[arg(long = "in")]
        input: Option<PathBuf>,
    },
}

/// Error with the exit-code class attached.
struct Failure {
    class: ErrorClass,
    message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure {
            class: e.class(),
            message: error_chain(&e),
        }
    }
}

fn error_chain(e: &dyn std::error::Error) -> String {
    let mut msg = e.to_string();
    let mut src = e.source();
    while let Some(s) = src {
        let text = s.to_string();
        if !msg.contains(&text) {
            msg.push_str(": ");
            msg.push_str(&text);
        }
        src = s.source();
    }
    msg
}

fn config_failure(message: impl Into<String>) -> Failure {
    Failure {
        class: ErrorClass::Config,
        message: message.into(),
    }
}

fn stage<E: Into<StageError>>(name: &'static str) -> impl Fn(E) -> Failure {
    move |e| e.into().at(name).into()
}

type Result<T> = std::result::Result<T, Failure>;

struct Ctx {
    cfg: PipelineConfig,
    seed: u64,
    out: Option<PathBuf>,
}

impl Ctx {
    fn out(&self, what: &str) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| config_failure(format!("--out is required ({what})")))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.class.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let ctx = Ctx {
        seed: cli.seed.unwrap_or(cfg.seed),
        out: cli.out.clone(),
        cfg,
    };
    match cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::Ingest(IngestCommand::Validate { dir }) => ingest_validate(&dir),
        Command::Preprocess(PreprocessCommand::Run(a)) => preprocess(&ctx, a),
        Command::Features(FeaturesCommand::Extract { epochs }) => features_extract(&ctx, &epochs),
        Command::Features(FeaturesCommand::Importance { features, model, repeats }) => {
            features_importance(&ctx, &features, model.into(), repeats)
        }
        Command::Gaf(GafCommand::Encode(a)) => gaf_encode(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Eval(EvalCommand::Cv { features, model, cv }) => eval_cv(&ctx, &features, model.into(), cv),
        Command::Eval(EvalCommand::CvCnn { images, net, cv }) => eval_cv_cnn(&ctx, &images, net, cv),
        Command::Classify(a) => classify_cmd(a),
        Command::Pipeline(PipelineCommand::Run { input }) => pipeline_run(&ctx, input),
    }
}

fn synth(ctx: &Ctx, a: SynthArgs) -> Result<()> {
    let out = ctx.out("directory for the recordings")?;
    if a.subjects == 0 || a.channels == 0 {
        return Err(config_failure("--subjects and --channels must be at least 1"));
    }
    if a.gains.len() != 3 {
        return Err(config_failure("--gains takes three values: MI,MA,IS"));
    }
    let strength = |c: usize| if c < 4 { 1.0 } else { 0.15 };
    let mut base = SynthesisConfig::default();
    for (task, gains) in base.class_response_gains.iter_mut() {
        let g = a.gains[task.index()];
        *gains = (0..a.channels).map(|c| g * strength(c)).collect();
    }
    let recs = (0..a.subjects)
        .map(|s| {
            synthesize_recording(&SynthesisConfig {
                subject_id: format!("S{:02}", s + 1),
                sample_rate_hz: a.rate,
                n_trials_per_class: a.trials,
                noise_sd: a.noise_sd,
                drift_amplitude: a.drift,
                seed: derive_seed(ctx.seed, s as u64),
                ..base.clone()
            })
        })
        .collect::<std::result::Result<Vec<_>, IngestError>>()
        .map_err(|e| match e {
            IngestError::InvalidConfig(m) => config_failure(m),
            e => stage("synth")(e),
        })?;
    let manifest = write_recording_dir(&recs, out).map_err(stage("synth"))?;
    println!("wrote {} recordings to {}", manifest.recordings.len(), out.display());
    Ok(())
}

fn ingest_validate(dir: &Path) -> Result<()> {
    let recs = load_recording_dir(dir).map_err(stage("ingest"))?;
    if recs.is_empty() {
        return Err(StageError::Data(format!("no recordings in {}", dir.display())).at("ingest").into());
    }
    for r in &recs {
        println!(
            "{}: {} channels, {} samples at {} Hz, {} trials",
            r.subject_id,
            r.channels.len(),
            r.len(),
            r.sample_rate_hz,
            r.markers.len()
        );
    }
    println!("ok: {} recordings", recs.len());
    Ok(())
}

fn preprocess(ctx: &Ctx, a: PreprocessArgs) -> Result<()> {
    let out = ctx.out("directory for the epochs")?;
    let input = a.input.unwrap_or_else(|| ctx.cfg.input_dir.clone());
    let mut filter = ctx.cfg.preprocess.filter;
    filter.passband_low_hz = a.filter_low.unwrap_or(filter.passband_low_hz);
    filter.passband_high_hz = a.filter_high.unwrap_or(filter.passband_high_hz);
    filter.order = a.order.unwrap_or(filter.order);
    let coeff = match a.coeffs.or_else(|| ctx.cfg.preprocess.coefficients.clone()) {
        Some(p) => {
            let text = std::fs::read_to_string(&p).map_err(|e| config_failure(format!("{}: {e}", p.display())))?;
            BeerLambertCoefficients::from_json(&text).map_err(|e| config_failure(format!("{}: {e}", p.display())))?
        }
        None => BeerLambertCoefficients::standard(),
    };
    let recs = load_recording_dir(&input).map_err(stage("ingest"))?;
    let mut epochs = Vec::new();
    for r in &recs {
        epochs.extend(preprocess_recording(r, &coeff, &filter).map_err(stage("preprocess"))?);
    }
    write_epoch_dir(&epochs, out, true).map_err(|e| e.at("preprocess"))?;
    println!("wrote {} epochs from {} recordings to {}", epochs.len(), recs.len(), out.display());
    Ok(())
}

fn features_extract(ctx: &Ctx, epochs: &Path) -> Result<()> {
    let out = ctx.out("features CSV")?;
    let epochs = read_epoch_dir(epochs).map_err(|e| e.at("features"))?;
    let table = build_feature_table(&epochs).map_err(stage("features"))?;
    table.write_csv(out).map_err(stage("features"))?;
    println!("wrote {} rows x {} features to {}", table.rows.len(), table.names.len(), out.display());
    Ok(())
}

fn features_importance(ctx: &Ctx, features: &Path, model: Baseline, repeats: Option<usize>) -> Result<()> {
    let out = ctx.out("importance CSV")?;
    let table = FeatureTable::read_csv(features).map_err(stage("features"))?;
    let y = table.label_indices();
    let repeats = repeats.unwrap_or(ctx.cfg.features.importance_repeats);
    let lr = &ctx.cfg.features.logreg;
    let report = match model {
        Baseline::Logreg => {
            let m = train_logreg(&table.rows, &y, lr.l2, lr.learning_rate, lr.epochs).map_err(stage("features"))?;
            permutation_importance(&m, &table.rows, &y, &table.names, repeats, ctx.seed)
        }
        Baseline::Knn => {
            let m = Knn::fit(&table.rows, &y, ctx.cfg.features.knn_k).map_err(stage("features"))?;
            permutation_importance(&m, &table.rows, &y, &table.names, repeats, ctx.seed)
        }
    }
    .map_err(stage("features"))?;
    write_importance_csv(&report, out).map_err(stage("features"))?;
    let channel = select_channel(&report).map_err(stage("features"))?;
    for name in report.ranking.iter().take(5) {
        let f = report.get(name).expect("ranked feature");
        println!("{name}\t{:.4} +/- {:.4}", f.mean, f.std);
    }
    println!("selected channel: {channel}");
    Ok(())
}

fn gaf_encode(ctx: &Ctx, a: GafArgs) -> Result<()> {
    let out = ctx.out("image directory")?;
    let mut settings = ctx.cfg.gaf.settings.clone();
    settings.kind = a.kind.unwrap_or(settings.kind);
    settings.size = a.size.unwrap_or(settings.size);
    settings.signal = a.signal.unwrap_or(settings.signal);
    settings.full_window |= a.full_window;
    if settings.size == 0 {
        return Err(config_failure("--size must be at least 1"));
    }
    let channel = a.channel.unwrap_or_else(|| ctx.cfg.gaf.channel.clone());
    if channel == AUTO_CHANNEL {
        return Err(config_failure("gaf encode needs --channel (run `features importance` to choose one)"));
    }
    let epochs = read_epoch_dir(&a.epochs).map_err(|e| e.at("gaf"))?;
    let images = encode_images(&epochs, &channel, &settings).map_err(stage("gaf"))?;
    write_image_dir(&images, &channel, &settings, out, true).map_err(|e| e.at("gaf"))?;
    println!("wrote {} {}x{} images of {channel} to {}", images.len(), settings.size, settings.size, out.display());
    Ok(())
}

fn load_net(ctx: &Ctx, a: &NetArgs, size: usize) -> Result<(NetworkSpec, TrainConfig)> {
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| config_failure(format!("{}: {e}", p.display())));
    let nn_cfg = |p: &Path, e: NnError| config_failure(format!("{}: {e}", p.display()));
    let spec = match a.net.as_ref().or(ctx.cfg.model.network_file.as_ref()) {
        Some(p) => NetworkSpec::from_toml(&read(p)?).map_err(|e| nn_cfg(p, e))?,
        None => ctx.cfg.model.network.clone().unwrap_or_else(|| NetworkSpec::default_architecture(size)),
    };
    let train = match a.train.as_ref().or(ctx.cfg.model.train_file.as_ref()) {
        Some(p) => TrainConfig::from_toml(&read(p)?).map_err(|e| nn_cfg(p, e))?,
        None => ctx.cfg.model.train.clone(),
    };
    spec.validate().map_err(|e| config_failure(e.to_string()))?;
    if spec.input_shape != [1, size, size] {
        return Err(config_failure(format!(
            "network input shape {:?} does not match {size}x{size} images",
            spec.input_shape
        )));
    }
    Ok((spec, train))
}

fn image_size(images: &[fnirs_gaf::pipeline::ImageSample], dir: &Path) -> Result<usize> {
    let size = images
        .first()
        .map(|s| s.image.size)
        .ok_or_else(|| StageError::Data(format!("no images in {}", dir.display())).at("train"))?;
    if images.iter().any(|s| s.image.size != size) {
        return Err(StageError::Data(format!("images in {} differ in size", dir.display())).at("train").into());
    }
    Ok(size)
}

fn train_cmd(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let out = ctx.out("model weights file")?;
    let images = read_image_dir(&a.images).map_err(|e| e.at("train"))?;
    let size = image_size(&images, &a.images)?;
    let (spec, train) = load_net(ctx, &a.net, size)?;
    let inputs: Vec<&[f64]> = images.iter().map(|s| s.image.matrix.as_slice()).collect();
    let labels: Vec<usize> = images.iter().map(|s| s.task.index()).collect();
    let (net, history) = fit_cnn(&spec, &train, &inputs, &labels, ctx.seed).map_err(stage("train"))?;
    let manifest_path = a.images.join(fnirs_gaf::pipeline::MANIFEST_FILE);
    let extras = match std::fs::read_to_string(&manifest_path) {
        Ok(text) => {
            let m: serde_json::Value = serde_json::from_str(&text).unwrap_or_default();
            json!({ "channel": m["channel"], "gaf": m["settings"] })
        }
        Err(_) => json!({}),
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| stage("train")(StageError::Io { path: dir.into(), source: e }))?;
    }
    save_model(&net, out, extras).map_err(stage("train"))?;
    let last = history.epochs.last();
    println!(
        "trained {} epochs (best {}), train accuracy {:.4}; wrote {}",
        history.epochs.len(),
        history.best_epoch,
        last.map_or(0.0, |e| e.train_accuracy),
        out.display()
    );
    Ok(())
}

fn echo_config(ctx: &Ctx, extra: serde_json::Value) -> serde_json::Value {
    json!({ "pipeline": ctx.cfg, "command": extra })
}

fn finish_cv(ctx: &Ctx, model: &str, k: usize, stratified: bool, cv: &CvArgs, summary: CvSummary, echo: serde_json::Value) -> Result<()> {
    let report = CvReport::new(model, k, stratified, ctx.seed, echo, summary);
    let path = cv.report.clone().or_else(|| ctx.out.clone());
    match path {
        Some(p) => {
            report.write(&p).map_err(stage("eval"))?;
            println!("wrote {}", p.display());
        }
        None => print!("{}", report.to_json()),
    }
    let s = &report.summary;
    eprintln!(
        "{model}: pooled accuracy {:.4}, macro accuracy {:.4}, micro AUROC {:.4}",
        s.pooled.accuracy, s.macro_accuracy, s.pooled.micro_auroc
    );
    Ok(())
}

fn eval_cv(ctx: &Ctx, features: &Path, model: Baseline, cv: CvArgs) -> Result<()> {
    let table = FeatureTable::read_csv(features).map_err(stage("eval"))?;
    let k = cv.k.unwrap_or(ctx.cfg.eval.k);
    let stratified = ctx.cfg.eval.stratified && !cv.no_stratify;
    let f = &ctx.cfg.features;
    let summary = if cv.pooled {
        let labels = table.label_indices();
        let mut single = table.clone();
        single.subject_ids = vec!["all".into(); labels.len()];
        feature_cv(&single, model, &f.logreg, f.knn_k, k, stratified, ctx.seed)
    } else {
        feature_cv(&table, model, &f.logreg, f.knn_k, k, stratified, ctx.seed)
    }
    .map_err(stage("eval"))?;
    let echo = echo_config(ctx, json!({ "features": features, "pooled": cv.pooled }));
    finish_cv(ctx, model.name(), k, stratified, &cv, summary, echo)
}

fn eval_cv_cnn(ctx: &Ctx, images_dir: &Path, net: NetArgs, cv: CvArgs) -> Result<()> {
    let mut images = read_image_dir(images_dir).map_err(|e| e.at("eval"))?;
    let size = image_size(&images, images_dir)?;
    let (spec, train) = load_net(ctx, &net, size)?;
    let k = cv.k.unwrap_or(ctx.cfg.eval.k);
    let stratified = ctx.cfg.eval.stratified && !cv.no_stratify;
    if cv.pooled {
        images.iter_mut().for_each(|s| s.subject_id = "all".into());
    }
    let summary = cnn_cv(&images, &spec, &train, k, stratified, ctx.seed).map_err(stage("eval"))?;
    let echo = echo_config(
        ctx,
        json!({ "images": images_dir, "network": spec, "train": train, "pooled": cv.pooled }),
    );
    finish_cv(ctx, "cnn", k, stratified, &cv, summary, echo)
}

fn classify_cmd(a: ClassifyArgs) -> Result<()> {
    let preds = classify(&a.model, &a.epochs).map_err(|e| e.at("classify"))?;
    for p in &preds {
        let expected = p.expected.map_or(String::new(), |t| format!(" expected={t}"));
        println!(
            "{}#{} {} MI={:.6} MA={:.6} IS={:.6}{expected}",
            if p.subject_id.is_empty() { "epoch" } else { &p.subject_id },
            p.trial_index,
            p.predicted,
            p.probabilities[0],
            p.probabilities[1],
            p.probabilities[2],
        );
    }
    Ok(())
}

fn pipeline_run(ctx: &Ctx, input: Option<PathBuf>) -> Result<()> {
    let mut cfg = ctx.cfg.clone();
    cfg.seed = ctx.seed;
    if let Some(out) = &ctx.out {
        cfg.output_dir = out.clone();
    }
    if let Some(input) = input {
        cfg.input_dir = input;
    }
    let resolved = cfg.validate()?;
    let outcome = run_pipeline(&resolved)?;
    println!(
        "{} epochs from {} recordings, channel {}",
        outcome.n_epochs, outcome.n_recordings, outcome.channel
    );
    println!(
        "cnn: pooled accuracy {:.4}, macro accuracy {:.4}, micro AUROC {:.4}",
        outcome.cnn.pooled.accuracy, outcome.cnn.macro_accuracy, outcome.cnn.pooled.micro_auroc
    );
    for (b, s) in &outcome.baselines {
        println!("{}: pooled accuracy {:.4}, macro accuracy {:.4}", b.name(), s.pooled.accuracy, s.macro_accuracy);
    }
    println!("report: {}", outcome.report_path.display());
    Ok(())
}
