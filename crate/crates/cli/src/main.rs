use clap::{Args, Parser, Subcommand, ValueEnum};
use lipnovo::assign::Cost;
use lipnovo::evalx::{self, Bin, EvalReport, Tolerances};
use lipnovo::infer::{self, PredictionRecord, SearchConfig};
use lipnovo::io_util::write_atomic;
use lipnovo::msio::{self, Manifest, PreprocessConfig, SynthParams, SynthRecord};
use lipnovo::neural::{MemoryMode, ModelConfig};
use lipnovo::train::{self, Checkpoint, LogRecord, Outputs, TrainConfig};
use lipnovo::{Error, ErrorClass, Scalar};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "lipnovo", version, about = "De novo peptide sequencing from MS/MS spectra")]
struct Cli {
    /// Seed for every random choice; overrides config-file seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML file with [synth], [model], [train], [preprocess], [search] and [eval] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic annotated dataset (MGF files plus manifest).
    Synth(SynthArgs),
    /// Train a model from a dataset manifest.
    Train(TrainArgs),
    /// Decode spectra with a trained checkpoint.
    Predict(PredictArgs),
    /// Score predictions against annotated spectra.
    Evaluate(EvalArgs),
    /// Missing-ratio stratified metrics and the precision-coverage curve.
    Analyze(EvalArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of PSMs.
    #[arg(long)]
    n: Option<usize>,
    /// Probability that each theoretical peak is dropped.
    #[arg(long)]
    missing: Option<f64>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    ptm_prob: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
enum Profile {
    Desk,
    Full,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
enum Dtype {
    F32,
    F64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset manifest (TOML).
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for checkpoints and the metrics log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "desk")]
    profile: Profile,
    /// Drop the imputation module and the theoretical-spectrum loss.
    #[arg(long)]
    ablated: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long, value_enum, default_value = "f32")]
    dtype: Dtype,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Spectra to decode.
    #[arg(long)]
    mgf: PathBuf,
    /// Prediction file (tab-separated).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    beam: Option<usize>,
    /// Greedy decoding (beam width 1).
    #[arg(long)]
    greedy: bool,
    /// Decode with the theoretical spectrum of the annotation as memory.
    #[arg(long)]
    oracle: bool,
    /// Skip the imputation module and attend to observed peaks only.
    #[arg(long, conflicts_with = "oracle")]
    no_imputation: bool,
    #[arg(long)]
    max_len: Option<usize>,
    /// Precursor tolerance in ppm.
    #[arg(long)]
    ppm: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    predictions: PathBuf,
    /// Annotated spectra (raw, as written by `synth`).
    #[arg(long)]
    mgf: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated missing-ratio bin edges, e.g. "0,0.2,0.4,0.6,1".
    #[arg(long)]
    bins: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SearchSection {
    beam_width: usize,
    max_len: usize,
    precursor_ppm: f64,
    mass_cutoff: bool,
}

impl Default for SearchSection {
    fn default() -> Self {
        let d = SearchConfig::default();
        Self { beam_width: d.beam_width, max_len: d.max_len, precursor_ppm: d.precursor_ppm, mass_cutoff: d.mass_cutoff }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalSection {
    bins: String,
    aa_tol: f64,
    prefix_tol: f64,
    presence_tol: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            bins: "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1".into(),
            aa_tol: evalx::DEFAULT_AA_TOL,
            prefix_tol: evalx::DEFAULT_PREFIX_TOL,
            presence_tol: msio::DEFAULT_PRESENCE_TOL,
        }
    }
}

/// An error plus the exit class it reports as.
struct Fail {
    err: Error,
    class: ErrorClass,
}

impl<E: Into<Error>> From<E> for Fail {
    fn from(e: E) -> Self {
        let err = e.into();
        Fail { class: err.class(), err }
    }
}

/// Failures while training or decoding are runtime errors whatever their cause.
fn runtime(err: Error) -> Fail {
    match err {
        Error::Config(_) => Fail::from(err),
        err => Fail { err, class: ErrorClass::Runtime },
    }
}

type Out<T> = std::result::Result<T, Fail>;

/// Wraps errors from reading the input `path`: I/O failures there are data
/// errors and name the file.
fn input(path: &Path) -> impl Fn(Error) -> Fail + '_ {
    move |err| match err {
        Error::Io(e) => Fail {
            err: Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))),
            class: ErrorClass::Data,
        },
        err => Fail::from(err),
    }
}

fn config_err(m: impl Into<String>) -> Fail {
    Fail::from(Error::Config(m.into()))
}

struct ConfigFile(toml::Table);

impl ConfigFile {
    fn load(path: Option<&Path>) -> Out<Self> {
        let Some(p) = path else { return Ok(Self(toml::Table::new())) };
        let text = std::fs::read_to_string(p).map_err(|e| input(p)(e.into()))?;
        let table = text.parse::<toml::Table>().map_err(|e| config_err(format!("{}: {e}", p.display())))?;
        Ok(Self(table))
    }

    /// `base` with the keys of table `[name]` laid over it.
    fn section<T: Serialize + DeserializeOwned>(&self, name: &str, base: T) -> Out<T> {
        let Some(over) = self.0.get(name) else { return Ok(base) };
        let over = over.as_table().ok_or_else(|| config_err(format!("[{name}] must be a table")))?;
        let mut merged = toml::Table::try_from(&base).map_err(|e| config_err(e.to_string()))?;
        for (k, v) in over {
            merged.insert(k.clone(), v.clone());
        }
        merged.try_into().map_err(|e: toml::de::Error| config_err(format!("[{name}]: {e}")))
    }

    fn seed(&self) -> Option<u64> {
        self.0.get("seed").and_then(|v| v.as_integer()).map(|s| s as u64)
    }
}

fn cmd_synth(a: &SynthArgs, file: &ConfigFile, seed: Option<u64>) -> Out<Vec<PathBuf>> {
    let mut p = file.section("synth", SynthParams::default())?;
    if let Some(n) = a.n {
        p.n_psms = n;
    }
    if let Some(m) = a.missing {
        p.missing_ratio = m;
    }
    if let Some(v) = a.min_len {
        p.min_len = v;
    }
    if let Some(v) = a.max_len {
        p.max_len = v;
    }
    if let Some(v) = a.ptm_prob {
        p.ptm_prob = v;
    }
    let seed = seed.or(file.seed()).unwrap_or(0);
    let split = msio::synth_dataset(&p, seed)?;
    Ok(msio::write_split(&a.out, &split, Some(SynthRecord { seed, params: p }))?)
}

fn cmd_train(a: &TrainArgs, file: &ConfigFile, seed: Option<u64>) -> Out<Vec<PathBuf>> {
    let (mbase, tbase) = match a.profile {
        Profile::Desk => (ModelConfig::desk(), TrainConfig::desk()),
        Profile::Full => (ModelConfig::full(), TrainConfig::full()),
    };
    let mut model = file.section("model", mbase)?;
    if a.ablated {
        model = model.ablated();
    }
    let mut tc = file.section("train", tbase)?;
    if let Some(s) = seed.or(file.seed()) {
        tc.seed = s;
    }
    if let Some(v) = a.epochs {
        tc.epochs = v;
    }
    if let Some(v) = a.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = a.lr {
        tc.peak_lr = v;
    }
    if let Some(v) = a.warmup {
        tc.warmup_steps = v;
    }
    model.validate()?;
    tc.validate()?;
    let pre = file.section("preprocess", PreprocessConfig::default())?;
    let manifest = Manifest::load(&a.manifest).map_err(input(&a.manifest))?;
    let (split, skipped) = manifest.read().map_err(input(&a.manifest))?;
    if !skipped.is_empty() {
        eprintln!("{}", serde_json::json!({"warning": "skipped malformed records", "count": skipped.len()}));
    }
    let (tr, _) = train::to_examples(&split.train, &pre);
    let (va, _) = train::to_examples(&split.validation, &pre);
    let outputs = Outputs { dir: Some(a.out.clone()) };
    let progress = |r: &LogRecord| {
        if let LogRecord::Epoch { .. } = r {
            if let Ok(line) = serde_json::to_string(r) {
                eprintln!("{line}");
            }
        }
    };
    match a.dtype {
        Dtype::F32 => run_train::<f32>(&tc, &model, &tr, &va, &outputs, progress)?,
        Dtype::F64 => run_train::<f64>(&tc, &model, &tr, &va, &outputs, progress)?,
    }
    let resolved = a.out.join("resolved_config.toml");
    #[derive(Serialize)]
    struct Resolved<'a> {
        model: &'a ModelConfig,
        train: &'a TrainConfig,
        preprocess: &'a PreprocessConfig,
    }
    let body = toml::to_string(&Resolved { model: &model, train: &tc, preprocess: &pre })
        .map_err(|e| config_err(e.to_string()))?;
    write_atomic(&resolved, |w| Ok(w.write_all(body.as_bytes())?))?;
    Ok(vec![outputs.best().expect("dir"), outputs.last().expect("dir"), outputs.metrics().expect("dir"), resolved])
}

fn run_train<T: Scalar + Cost>(
    tc: &TrainConfig,
    model: &ModelConfig,
    tr: &[lipnovo::neural::TrainingExample],
    va: &[lipnovo::neural::TrainingExample],
    outputs: &Outputs,
    progress: impl FnMut(&LogRecord),
) -> Out<()> {
    train::train::<T>(tc, model, tr, va, outputs, progress).map_err(runtime)?;
    Ok(())
}

fn cmd_predict(a: &PredictArgs, file: &ConfigFile) -> Out<Vec<PathBuf>> {
    let s = file.section("search", SearchSection::default())?;
    let mut cfg = SearchConfig { beam_width: s.beam_width, max_len: s.max_len, precursor_ppm: s.precursor_ppm, mass_cutoff: s.mass_cutoff };
    if let Some(b) = a.beam {
        cfg.beam_width = b;
    }
    if a.greedy {
        cfg.beam_width = 1;
    }
    if let Some(m) = a.max_len {
        cfg.max_len = m;
    }
    if let Some(p) = a.ppm {
        cfg.precursor_ppm = p;
    }
    if cfg.beam_width == 0 {
        return Err(config_err("beam width must be at least 1"));
    }
    let pre = file.section("preprocess", PreprocessConfig::default())?;
    let bytes = std::fs::read(&a.checkpoint).map_err(|e| input(&a.checkpoint)(e.into()))?;
    let preds = if train::stored_dtype(&bytes)? == "f64" {
        predict_with::<f64>(&bytes, a, &cfg, &pre)?
    } else {
        predict_with::<f32>(&bytes, a, &cfg, &pre)?
    };
    write_atomic(&a.out, |w| infer::write_predictions(&preds, w))?;
    Ok(vec![a.out.clone()])
}

fn predict_with<T: Scalar + Cost>(bytes: &[u8], a: &PredictArgs, cfg: &SearchConfig, pre: &PreprocessConfig) -> Out<Vec<PredictionRecord>> {
    let model = Checkpoint::<T>::from_bytes(bytes).and_then(Checkpoint::into_model).map_err(runtime)?;
    let contents = msio::read_mgf(&a.mgf).map_err(input(&a.mgf))?;
    if !contents.skipped.is_empty() {
        eprintln!("{}", serde_json::json!({"warning": "skipped malformed records", "count": contents.skipped.len()}));
    }
    let mut out = Vec::with_capacity(contents.records.len());
    let mut empty = 0usize;
    for r in &contents.records {
        let Some(spec) = msio::preprocess(&r.spectrum, pre) else {
            empty += 1;
            continue;
        };
        let rec = if a.oracle {
            let truth = r
                .peptide
                .as_ref()
                .ok_or_else(|| Error::Domain(format!("--oracle needs an annotation for {}", r.source_id)))?;
            if truth.len() < 2 {
                return Err(Fail::from(Error::Domain(format!("--oracle needs peptides of length >= 2 ({})", r.source_id))));
            }
            infer::decode(&model, &spec, &r.source_id, MemoryMode::Oracle(truth), cfg)
        } else if a.no_imputation {
            infer::decode(&model, &spec, &r.source_id, MemoryMode::Observed, cfg)
        } else {
            infer::decode(&model, &spec, &r.source_id, MemoryMode::Imputed, cfg)
        };
        out.push(rec.map_err(runtime)?);
    }
    if empty > 0 {
        eprintln!("{}", serde_json::json!({"warning": "spectra without peaks after preprocessing", "count": empty}));
    }
    Ok(out)
}

fn load_eval(a: &EvalArgs, file: &ConfigFile) -> Out<(EvalReport, EvalSection)> {
    let e = file.section("eval", EvalSection::default())?;
    let bins: Vec<Bin> = evalx::parse_bin_edges(a.bins.as_deref().unwrap_or(&e.bins))?;
    let f = std::fs::File::open(&a.predictions).map_err(|e| input(&a.predictions)(e.into()))?;
    let preds = infer::read_predictions(std::io::BufReader::new(f)).map_err(input(&a.predictions))?;
    let truth = msio::read_mgf(&a.mgf).map_err(input(&a.mgf))?;
    let pairs = evalx::join(&preds, &truth.records);
    let tol = Tolerances { aa: e.aa_tol, prefix: e.prefix_tol };
    let report = evalx::evaluate(&pairs, &bins, &tol, e.presence_tol)?;
    Ok((report, e))
}

fn cmd_evaluate(a: &EvalArgs, file: &ConfigFile) -> Out<Vec<PathBuf>> {
    let (report, _) = load_eval(a, file)?;
    let text = a.out.join("report.txt");
    let metrics = a.out.join("metrics.tsv");
    let bins = a.out.join("bins.tsv");
    write_atomic(&text, |w| Ok(w.write_all(report.to_text().as_bytes())?))?;
    write_atomic(&metrics, |w| report.write_metrics_tsv(w))?;
    write_atomic(&bins, |w| report.write_bins_tsv(w))?;
    print!("{}", report.to_text());
    Ok(vec![text, metrics, bins])
}

fn cmd_analyze(a: &EvalArgs, file: &ConfigFile) -> Out<Vec<PathBuf>> {
    let (report, _) = load_eval(a, file)?;
    let bins = a.out.join("stratified.tsv");
    let curve = a.out.join("curve.csv");
    write_atomic(&bins, |w| report.write_bins_tsv(w))?;
    write_atomic(&curve, |w| report.write_curve_csv(w))?;
    Ok(vec![bins, curve])
}

fn run(cli: &Cli) -> Out<Vec<PathBuf>> {
    let file = ConfigFile::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, &file, cli.seed),
        Command::Train(a) => cmd_train(a, &file, cli.seed),
        Command::Predict(a) => cmd_predict(a, &file),
        Command::Evaluate(a) => cmd_evaluate(a, &file),
        Command::Analyze(a) => cmd_analyze(a, &file),
    }
}

fn fail(kind: &str, code: u8, message: &str) -> ExitCode {
    eprintln!("{}", serde_json::json!({"error": kind, "exit_code": code, "message": message}));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            return fail("usage", 1, first.trim_start_matches("error: "));
        }
    };
    match run(&cli) {
        Ok(paths) => {
            let paths: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
            println!("{}", serde_json::json!({ "artifacts": paths }));
            ExitCode::SUCCESS
        }
        Err(Fail { err, class }) => match class {
            ErrorClass::Usage => fail("usage", 1, &err.to_string()),
            ErrorClass::Data => fail("data", 2, &err.to_string()),
            ErrorClass::Runtime => fail("runtime", 3, &err.to_string()),
        },
    }
}
