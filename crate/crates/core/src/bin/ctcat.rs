use std::error::Error;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ctcat::io::enrollment::{enroll, read_te_rows};
use ctcat::metrics::MetricsError;
use ctcat::pipeline::{detect_file, load_detector, run_manifest, write_trial_scores, EvalOptions, EvalReport};
use ctcat::selftest::{run_aligner_suite, run_ctc_suite};
use ctcat::synth::{synth, AlignmentSpec};
use ctcat::{EnrollmentOptions, Level, Vocabulary, DEFAULT_LAMBDA};

const EXIT_FAILURE: u8 = 1;
const EXIT_DATA: u8 = 3;
const EXIT_DEGENERATE: u8 = 4;

#[derive(Parser)]
#[command(name = "ctcat", version, about = "Streaming text-enrolled keyword spotting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build an enrollment document from keyword text and token embeddings.
    Enroll(EnrollArgs),
    /// Score every frame of a stream against an enrollment.
    Detect(DetectArgs),
    /// Score a manifest of trials and report AUC and EER.
    Eval(EvalArgs),
    /// Generate a synthetic stream from an alignment spec.
    Synth(SynthArgs),
    /// Check the streaming aligner against the exhaustive reference kernels.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct EnrollArgs {
    #[arg(long)]
    text: String,
    /// Token embeddings, one row per keyword token (comma or whitespace separated).
    #[arg(long)]
    te: PathBuf,
    #[arg(long, default_value = "phrase")]
    level: Level,
    #[arg(long, default_value_t = DEFAULT_LAMBDA, allow_negative_numbers = true)]
    lambda: f64,
    #[arg(long)]
    out: PathBuf,
    /// Pool a space into the word before it instead of dropping it.
    #[arg(long)]
    include_spaces: bool,
    #[arg(long)]
    normalize_ctc: bool,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    stream: PathBuf,
    #[arg(long)]
    enrollment: PathBuf,
    /// Per-frame score table (CSV); `-` for stdout.
    #[arg(long)]
    out: PathBuf,
    /// Divide the CTC score by the path length.
    #[arg(long)]
    normalize_ctc: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// CSV with columns trial_id,stream_path,enrollment_path,label.
    #[arg(long)]
    manifest: PathBuf,
    /// Per-trial score table (CSV).
    #[arg(long)]
    out: PathBuf,
    /// Also write the metrics report here.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    streams_dir: Option<PathBuf>,
    #[arg(long)]
    enrollments_dir: Option<PathBuf>,
    /// Drop trials that fail instead of aborting.
    #[arg(long)]
    skip_bad: bool,
    #[arg(long)]
    normalize_ctc: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Alignment spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    te: PathBuf,
    /// Overrides the seed in the spec.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth sidecar; defaults to `<out>.truth.json`.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 1000)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum Failure {
    Data(Box<dyn Error>),
    Degenerate(MetricsError),
    SelfTest,
}

impl<E: Error + 'static> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Data(Box::new(e))
    }
}

fn open_out(path: &Path) -> io::Result<Box<dyn Write>> {
    if path == Path::new("-") {
        Ok(Box::new(BufWriter::new(io::stdout().lock())))
    } else {
        Ok(Box::new(BufWriter::new(File::create(path)?)))
    }
}

fn cmd_enroll(vocab: &Vocabulary, a: EnrollArgs) -> Result<(), Failure> {
    let rows = read_te_rows(&a.te)?;
    let options = EnrollmentOptions {
        include_spaces: a.include_spaces,
        normalize_ctc: a.normalize_ctc,
    };
    let (enrollment, doc) = enroll(vocab, &a.text, rows, a.level, a.lambda, options)?;
    doc.write(&a.out)?;
    log::info!(
        "enrolled {:?}: U = {}, D = {}, {} group(s)",
        doc.keyword,
        doc.u,
        doc.d,
        enrollment.groups().len()
    );
    Ok(())
}

fn cmd_detect(vocab: &Vocabulary, a: DetectArgs) -> Result<(), Failure> {
    let mut detector = load_detector(vocab, &a.enrollment, a.normalize_ctc)?;
    let (summary, mut out) = detect_file(&mut detector, &a.stream, open_out(&a.out)?)?;
    out.flush()?;
    match summary.best {
        Some(b) => eprintln!("frames: {}  best t: {}  z: {}  valid: {}", summary.frames, b.t, b.z, b.valid),
        None => eprintln!("frames: 0"),
    }
    Ok(())
}

fn cmd_eval(vocab: &Vocabulary, a: EvalArgs) -> Result<(), Failure> {
    let options = EvalOptions {
        streams_dir: a.streams_dir,
        enrollments_dir: a.enrollments_dir,
        skip_bad: a.skip_bad,
        normalize_ctc: a.normalize_ctc,
    };
    let run = run_manifest(vocab, &a.manifest, &options)?;
    write_trial_scores(open_out(&a.out)?, &run.results)?.flush()?;
    let report = EvalReport::from_run(&run).map_err(|e| match e {
        e @ MetricsError::DegenerateTrialSet { .. } => Failure::Degenerate(e),
        e => Failure::from(e),
    })?;
    let text = report.render();
    print!("{text}");
    if let Some(path) = a.report {
        fs::write(path, &text)?;
    }
    Ok(())
}

fn cmd_synth(vocab: &Vocabulary, a: SynthArgs) -> Result<(), Failure> {
    let mut spec = AlignmentSpec::from_json(&fs::read_to_string(&a.spec)?)?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let rows = read_te_rows(&a.te)?;
    let (stream, truth) = synth(vocab, &spec, &rows)?;
    stream.write_path(&a.out)?;
    let truth_path = a.truth.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".truth.json");
        p.into()
    });
    fs::write(truth_path, truth.to_json())?;
    Ok(())
}

fn cmd_selftest(a: SelftestArgs) -> Result<(), Failure> {
    let aligner = run_aligner_suite(a.instances, a.seed);
    println!("aligner vs brute force: {aligner}");
    for f in aligner.failures.iter().take(10) {
        println!("  {f}");
    }
    let ctc = run_ctc_suite(a.instances, a.seed.wrapping_add(1));
    println!("ctc forward vs enumeration: {ctc}");
    for f in ctc.failures.iter().take(10) {
        println!("  {f}");
    }
    if aligner.passed() && ctc.passed() {
        println!("selftest passed");
        Ok(())
    } else {
        Err(Failure::SelfTest)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CTCAT_LOG", "warn")).init();
    let cli = Cli::parse();
    let vocab = Vocabulary::english();
    let result = match cli.command {
        Command::Enroll(a) => cmd_enroll(&vocab, a),
        Command::Detect(a) => cmd_detect(&vocab, a),
        Command::Eval(a) => cmd_eval(&vocab, a),
        Command::Synth(a) => cmd_synth(&vocab, a),
        Command::Selftest(a) => cmd_selftest(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_DATA)
        }
        Err(Failure::Degenerate(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_DEGENERATE)
        }
        Err(Failure::SelfTest) => {
            eprintln!("error: selftest failed");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}
