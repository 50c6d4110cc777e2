//! Command-line surface: corpus generation, training, evaluation, unpaired
//! sweeps and alignment export. Each command works inside its own output
//! directory.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};

use crate::align::{extract_durations, format_durations, monotonicity};
use crate::config::{parse_list, ConfigError, KeyValueConfig};
use crate::metrics::EvalReport;
use crate::models::{GenItem, Generator, GeneratorKind, ModelError};
use crate::svg;
use crate::synth::{make_corpus, CorpusConfig, Dataset, SynthError};
use crate::train::{self, DualConfig, TrainError, TrainMode, TrainOutcome};
use crate::vocab::TokenMode;

pub const CONFIG_SNAPSHOT: &str = "config.cfg";
pub const OVERRIDES_FILE: &str = "overrides.cfg";
pub const DATA_REF_FILE: &str = "data.txt";
pub const EVAL_FILE: &str = "eval.csv";
pub const ALIGNMENT_DIR: &str = "alignments";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_SVG: &str = "sweep.svg";
pub const THREADS_ENV: &str = "DUALLAB_THREADS";

/// Failure of a command, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("training aborted: {0}")]
    Abort(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Abort(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(format!("config: {e}"))
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if matches!(e, TrainError::NonFinite { .. }) || e.non_finite_op().is_some() {
            CliError::Abort(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "duallab",
    version,
    about = "Reader/generator dual training on synthetic lip traces"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus.
    GenData(GenDataArgs),
    /// Train a reader and a generator.
    Train(TrainArgs),
    /// Evaluate trained runs on the eval split.
    Eval(EvalArgs),
    /// Train at several unpaired fractions and plot the trend.
    SweepUnpaired(SweepArgs),
    /// Write durations and heat maps from an attention generator.
    ExportAlignments(ExportArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub paired_fraction: Option<f64>,
    #[arg(long)]
    pub utterances: Option<usize>,
    #[arg(long)]
    pub token_mode: Option<TokenMode>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub mode: Option<TrainMode>,
    #[arg(long)]
    pub generator: Option<GeneratorKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// One or more run directories; two or more print a comparison table.
    #[arg(long, required = true)]
    pub run: Vec<PathBuf>,
    /// Corpus directory; defaults to the one recorded in the run.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Share of the training utterances used as unpaired data.
    #[arg(long, default_value = "0,0.3,0.6,0.9")]
    pub fractions: String,
    #[arg(long)]
    pub generator: Option<GeneratorKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of eval sentences to export; 0 exports all.
    #[arg(long, default_value_t = 0)]
    pub limit: usize,
}

/// Parses arguments and runs the command; returns the process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => cmd_gen_data(&a).map(|c| print!("{c}")),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => {
            let (csv, table) = cmd_eval(&a)?;
            match &a.out {
                Some(p) => std::fs::write(p, &csv)?,
                None => print!("{csv}"),
            }
            eprint!("{table}");
            Ok(())
        }
        Command::SweepUnpaired(a) => cmd_sweep_unpaired(&a).map(|r| eprint!("{}", r.table())),
        Command::ExportAlignments(a) => {
            cmd_export_alignments(&a).map(|n| eprintln!("exported {n} sentences"))
        }
    }
}

fn read_config<C: KeyValueConfig>(path: Option<&Path>) -> Result<(C, String)> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            Ok((C::parse(&text)?, text))
        }
        None => {
            let c = C::default();
            let text = c.render();
            Ok((c, text))
        }
    }
}

/// Writes the corpus and returns the split summary.
pub fn cmd_gen_data(args: &GenDataArgs) -> Result<String> {
    let (mut cfg, _) = read_config::<CorpusConfig>(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(f) = args.paired_fraction {
        cfg.paired_fraction = f;
    }
    if let Some(n) = args.utterances {
        cfg.utterances = n;
    }
    if let Some(m) = args.token_mode {
        cfg.token_mode = m;
    }
    cfg.validate()
        .map_err(|e| CliError::Usage(format!("config: {e}")))?;
    let corpus = make_corpus(&cfg)?;
    corpus.write(&args.out)?;
    Ok(format!(
        "wrote {} utterances ({} speakers, {} tokens) to {}\n{}",
        corpus.utterances.len(),
        cfg.speakers,
        cfg.token_mode,
        args.out.display(),
        corpus.split_counts()
    ))
}

/// A training run's directory: config snapshot, overrides, corpus
/// reference, checkpoints and logs.
#[derive(Clone, Debug)]
pub struct RunDirectory {
    pub path: PathBuf,
}

impl RunDirectory {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Creates the directory and records how the run was configured.
    pub fn create(path: &Path, config_text: &str, overrides: &str, data: &Path) -> Result<Self> {
        std::fs::create_dir_all(path)?;
        let run = Self::new(path);
        std::fs::write(run.file(CONFIG_SNAPSHOT), config_text)?;
        std::fs::write(run.file(OVERRIDES_FILE), overrides)?;
        let data = std::fs::canonicalize(data).unwrap_or_else(|_| data.to_path_buf());
        std::fs::write(run.file(DATA_REF_FILE), format!("{}\n", data.display()))?;
        Ok(run)
    }

    /// Snapshot with the overrides applied.
    pub fn config(&self) -> Result<DualConfig> {
        let text = std::fs::read_to_string(self.file(CONFIG_SNAPSHOT)).map_err(|e| {
            CliError::Data(format!("{}: {e}", self.file(CONFIG_SNAPSHOT).display()))
        })?;
        let mut cfg = DualConfig::parse(&text)?;
        if let Ok(o) = std::fs::read_to_string(self.file(OVERRIDES_FILE)) {
            cfg.apply(&o)?;
        }
        Ok(cfg)
    }

    pub fn data_dir(&self) -> Result<PathBuf> {
        let text = std::fs::read_to_string(self.file(DATA_REF_FILE))
            .map_err(|e| CliError::Data(format!("{}: {e}", self.file(DATA_REF_FILE).display())))?;
        Ok(PathBuf::from(text.trim()))
    }

    pub fn metrics_csv(&self) -> Result<String> {
        Ok(std::fs::read_to_string(self.file(train::METRICS_FILE))?)
    }

    pub fn label(&self) -> String {
        match self.config() {
            Ok(c) => format!("{}-{}", c.mode, c.generator.kind),
            Err(_) => self.path.display().to_string(),
        }
    }
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

/// Overrides in config-file syntax.
fn overrides(
    mode: Option<TrainMode>,
    generator: Option<GeneratorKind>,
    seed: Option<u64>,
    extra: &[(&str, String)],
) -> String {
    let mut s = String::new();
    if let Some(m) = mode {
        s.push_str(&format!("mode = {m}\n"));
    }
    if let Some(g) = generator {
        s.push_str(&format!("generator.kind = {g}\n"));
    }
    if let Some(seed) = seed {
        s.push_str(&format!("seed = {seed}\n"));
    }
    for (k, v) in extra {
        s.push_str(&format!("{k} = {v}\n"));
    }
    s
}

/// Trains inside a fresh run directory.
pub fn train_in(
    run_path: &Path,
    config_text: &str,
    overrides: &str,
    data_dir: &Path,
    quiet: bool,
) -> Result<(RunDirectory, TrainOutcome)> {
    let mut cfg = DualConfig::parse(config_text)?;
    cfg.apply(overrides)?;
    let data = load_dataset(data_dir)?;
    let run = RunDirectory::create(run_path, config_text, overrides, data_dir)?;
    let outcome = train::train_run(&cfg, &data, Some(&run.path), |r| {
        if !quiet {
            eprintln!("{}", train::describe(r));
        }
    })?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    let mut report = outcome.best_eval.report.clone();
    report.label = run.label();
    std::fs::write(run.file(EVAL_FILE), EvalReport::csv(&[report]))?;
    if cfg.generator.kind == GeneratorKind::Attention {
        export_alignments(&outcome.best_generator, &data, &run.file(ALIGNMENT_DIR), 0)?;
    }
    Ok((run, outcome))
}

pub fn cmd_train(args: &TrainArgs) -> Result<(RunDirectory, TrainOutcome)> {
    let (_, text) = read_config::<DualConfig>(args.config.as_deref())?;
    let o = overrides(args.mode, args.generator, args.seed, &[]);
    train_in(&args.out, &text, &o, &args.data, args.quiet)
}

/// Evaluates every run; returns the CSV and a terminal table.
pub fn cmd_eval(args: &EvalArgs) -> Result<(String, String)> {
    let mut reports = Vec::new();
    for path in &args.run {
        let run = RunDirectory::new(path);
        let cfg = run.config()?;
        let (reader, generator) = train::load_checkpoints(&run.path)?;
        let data_dir = match &args.data {
            Some(d) => d.clone(),
            None => run.data_dir()?,
        };
        let data = load_dataset(&data_dir)?;
        let eval = train::eval_split(&data, cfg.eval_limit);
        let summary = train::evaluate(&reader, &generator, &eval, &run.label())?;
        reports.push(summary.report);
    }
    let modes: Vec<TokenMode> = reports.iter().map(|r| r.mode).collect();
    if modes.windows(2).any(|w| w[0] != w[1]) {
        return Err(CliError::Usage("runs use different token modes".into()));
    }
    Ok((EvalReport::csv(&reports), EvalReport::table(&reports)))
}

/// Writes `{id}.dur`, `{id}.svg` and an index with monotonicity flags for
/// eval sentences. Returns the number of sentences written.
pub fn export_alignments(
    generator: &Generator,
    data: &Dataset,
    out: &Path,
    limit: usize,
) -> Result<usize> {
    if generator.kind() != GeneratorKind::Attention {
        return Err(CliError::Usage(
            "alignment export needs an attention generator".into(),
        ));
    }
    std::fs::create_dir_all(out)?;
    let eval = train::eval_split(data, limit);
    let vocab = &generator.vocab;
    let mut index = String::from("id,tokens,frames,monotone,violations,duration_total\n");
    for u in &eval {
        let text = u.text.as_ref().expect("eval text");
        let trace = u.trace.as_ref().expect("eval trace");
        let guide = trace.frame(0).to_vec();
        let g = generator.generate(&[GenItem {
            text,
            durations: None,
            guide: &guide,
            target: None,
        }])?;
        let a = g[0].alignment.as_ref().expect("attention alignment");
        let durs = extract_durations(a);
        let mono = monotonicity(a);
        std::fs::write(
            out.join(format!("{}.dur", u.id)),
            format_durations(vocab, text, &durs) + "\n",
        )?;
        let labels: Vec<String> = text
            .0
            .iter()
            .map(|&t| vocab.export_symbol(t).to_string())
            .collect();
        let title = format!(
            "{} ({})",
            u.id,
            if mono.is_monotone {
                "monotone"
            } else {
                "not monotone"
            }
        );
        std::fs::write(
            out.join(format!("{}.svg", u.id)),
            svg::alignment_heat_map(&title, a, &labels),
        )?;
        index.push_str(&format!(
            "{},{},{},{},{},{}\n",
            u.id,
            a.tokens(),
            a.frames(),
            mono.is_monotone,
            mono.violations,
            durs.total()
        ));
    }
    std::fs::write(out.join("index.csv"), index)?;
    Ok(eval.len())
}

pub fn cmd_export_alignments(args: &ExportArgs) -> Result<usize> {
    let run = RunDirectory::new(&args.run);
    let generator = Generator::load(&run.path, train::GENERATOR_CKPT)?;
    if generator.kind() != GeneratorKind::Attention {
        return Err(CliError::Usage(format!(
            "{} was trained with the {} generator; alignments need attention",
            run.path.display(),
            generator.kind()
        )));
    }
    let data_dir = match &args.data {
        Some(d) => d.clone(),
        None => run.data_dir()?,
    };
    export_alignments(&generator, &load_dataset(&data_dir)?, &args.out, args.limit)
}

/// One sweep point.
#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub fraction: f64,
    pub result: std::result::Result<EvalReport, String>,
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("unpaired_fraction,status,cer,wer,mean_l1,mean_psnr\n");
        for p in &self.points {
            match &p.result {
                Ok(r) => s.push_str(&format!(
                    "{},ok,{:.6},{:.6},{:.6},{:.4}\n",
                    p.fraction, r.unit_error, r.wer, r.mean_l1, r.mean_psnr
                )),
                Err(e) => s.push_str(&format!(
                    "{},failed: {},,,,\n",
                    p.fraction,
                    e.replace(',', ";")
                )),
            }
        }
        s
    }

    pub fn table(&self) -> String {
        let ok: Vec<EvalReport> = self
            .points
            .iter()
            .filter_map(|p| p.result.clone().ok())
            .collect();
        let mut s = EvalReport::table(&ok);
        for p in &self.points {
            if let Err(e) = &p.result {
                s.push_str(&format!("fraction {} failed: {e}\n", p.fraction));
            }
        }
        s
    }

    pub fn svg(&self) -> String {
        let pick = |f: fn(&EvalReport) -> f64| -> Vec<(f64, f64)> {
            self.points
                .iter()
                .filter_map(|p| p.result.as_ref().ok().map(|r| (p.fraction, f(r))))
                .collect()
        };
        svg::line_plot(
            "eval error and generator L1 vs unpaired data",
            "unpaired fraction",
            &[
                svg::Series {
                    name: "error rate".into(),
                    points: pick(|r| r.unit_error),
                },
                svg::Series {
                    name: "L1".into(),
                    points: pick(|r| r.mean_l1),
                },
            ],
        )
    }
}

/// Worker limit from `--jobs`, capped by the environment.
pub fn worker_count(jobs: usize) -> usize {
    let cap = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0);
    let jobs = jobs.max(1);
    cap.map_or(jobs, |c| jobs.min(c))
}

pub fn cmd_sweep_unpaired(args: &SweepArgs) -> Result<SweepReport> {
    let fractions: Vec<f64> =
        parse_list(&args.fractions).map_err(|e| CliError::Usage(format!("--fractions: {e}")))?;
    if fractions.is_empty() || fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(CliError::Usage(
            "--fractions must be values in [0,1]".into(),
        ));
    }
    let (_, text) = read_config::<DualConfig>(args.config.as_deref())?;
    let data = load_dataset(&args.data)?;
    let c = data.counts();
    let training = (c.paired + c.text_only + c.lip_only) as f64;
    let available = (c.text_only + c.lip_only) as f64 / training.max(1.0);
    if let Some(max) = fractions.iter().copied().reduce(f64::max) {
        if max > available + 1e-9 {
            return Err(CliError::Data(format!(
                "corpus offers an unpaired fraction of {available:.3}, sweep asks for {max}"
            )));
        }
    }
    std::fs::create_dir_all(&args.out)?;
    let results: Mutex<Vec<Option<SweepPoint>>> = Mutex::new(vec![None; fractions.len()]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..worker_count(args.jobs).min(fractions.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&f) = fractions.get(i) else { break };
                let mode = if f == 0.0 {
                    TrainMode::Baseline
                } else {
                    TrainMode::Dual
                };
                let o = overrides(
                    Some(mode),
                    args.generator,
                    args.seed,
                    &[("unpaired_fraction", (f / available).min(1.0).to_string())],
                );
                let dir = args.out.join(format!("fraction_{f:.2}"));
                let result = train_in(&dir, &text, &o, &args.data, args.quiet)
                    .map(|(_, out)| {
                        let mut r = out.best_eval.report;
                        r.label = format!("unpaired {f}");
                        r
                    })
                    .map_err(|e| e.to_string());
                results.lock().expect("sweep results")[i] = Some(SweepPoint {
                    fraction: f,
                    result,
                });
            });
        }
    });
    let points = results
        .into_inner()
        .expect("sweep results")
        .into_iter()
        .map(|p| p.expect("every fraction ran"))
        .collect();
    let report = SweepReport { points };
    std::fs::write(args.out.join(SWEEP_CSV), report.csv())?;
    std::fs::write(args.out.join(SWEEP_SVG), report.svg())?;
    Ok(report)
}
