//! `xis2` command-line driver.
//!
//! Exit status: 0 on success, 1 for runtime and data errors, 2 for usage and
//! configuration errors.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use xis2::dataio::{self, read_tensor, write_tensor};
use xis2::discriminator::Band;
use xis2::eval;
use xis2::frontend::{g2p_expand, parse_score, split_note_frames, G2PTable};
use xis2::generator::DurationMode;
use xis2::numerics::Tensor;
use xis2::trainer::{TrainConfig, TrainedModel, Trainer, G2P_FILE};

const SEED_VAR: &str = "XIS2_SEED";

#[derive(Parser)]
#[command(name = "xis2", version, about = "GAN-based singing voice acoustic model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic training corpus.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        items: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// G2P table (JSON); the built-in table when omitted.
        #[arg(long)]
        g2p: Option<PathBuf>,
    },
    /// Train a model on a corpus.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// TOML training configuration; defaults apply to omitted keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Use plain FFT blocks instead of ConvFFT.
        #[arg(long)]
        no_convfft: bool,
        /// Drop the segment discriminators.
        #[arg(long)]
        no_sd: bool,
        /// Drop the detail discriminators.
        #[arg(long)]
        no_dd: bool,
    },
    /// Synthesize acoustic frames for a score.
    Synth {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        score: PathBuf,
        /// Mel output; V/UV and logF0 are written next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Durations::Given)]
        durations: Durations,
    },
    /// Evaluate a model on a held-out corpus and print metrics as JSON.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Render a mel tensor as a PPM heatmap.
    PlotMel {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = BandArg::Full)]
        band: BandArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Durations {
    /// Split each note evenly over its phonemes.
    Given,
    /// Use the model's duration predictor.
    Predicted,
}

#[derive(Clone, Copy, ValueEnum)]
enum BandArg {
    Low,
    Mid,
    High,
    Full,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<xis2::Error> for Failure {
    fn from(e: xis2::Error) -> Self {
        match e {
            xis2::Error::Config(_) => Failure::Usage(e.to_string()),
            xis2::Error::Io { ref path, ref source } if source.kind() == std::io::ErrorKind::NotFound => {
                Failure::Runtime(format!("{}: no such file", path.display()))
            }
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenCorpus { out, items, seed, g2p } => gen_corpus(&out, items as usize, seed, g2p.as_deref()),
        Command::Train {
            corpus,
            config,
            out,
            no_convfft,
            no_sd,
            no_dd,
        } => train(&corpus, config.as_deref(), &out, no_convfft, no_sd, no_dd),
        Command::Synth {
            model,
            score,
            out,
            durations,
        } => synth(&model, &score, &out, durations),
        Command::Eval { model, corpus } => evaluate(&model, &corpus),
        Command::PlotMel { input, out, band } => plot_mel(&input, &out, band),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn corpus_table(dir: &Path) -> Result<G2PTable, Failure> {
    let path = dir.join(G2P_FILE);
    Ok(if path.exists() { G2PTable::load(&path)? } else { G2PTable::builtin() })
}

fn write_file(path: &Path, bytes: &[u8]) -> CmdResult {
    std::fs::write(path, bytes).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn gen_corpus(out: &Path, items: usize, seed: u64, g2p: Option<&Path>) -> CmdResult {
    let table = match g2p {
        Some(p) => G2PTable::load(p)?,
        None => G2PTable::builtin(),
    };
    let corpus = dataio::synth_corpus(items, seed, &table)?;
    dataio::save_corpus(out, &corpus).map_err(runtime)?;
    write_file(&out.join(G2P_FILE), table.to_json().as_bytes())?;
    println!("wrote {} items to {}", corpus.len(), out.display());
    Ok(())
}

// Errors while writing output are runtime failures even when the library
// reports them as configuration problems.
fn runtime(e: xis2::Error) -> Failure {
    match Failure::from(e) {
        Failure::Usage(m) => Failure::Runtime(m),
        f => f,
    }
}

fn train(corpus: &Path, config: Option<&Path>, out: &Path, no_convfft: bool, no_sd: bool, no_dd: bool) -> CmdResult {
    let mut cfg = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::from(xis2::Error::Io {
                path: path.to_path_buf(),
                source: e,
            }))?;
            TrainConfig::from_toml(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Ok(seed) = std::env::var(SEED_VAR) {
        cfg.seed = seed
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("{SEED_VAR}={seed:?} is not an unsigned integer")))?;
    }
    cfg.use_convfft &= !no_convfft;
    cfg.use_sd &= !no_sd;
    cfg.use_dd &= !no_dd;

    let table = corpus_table(corpus)?;
    let items = dataio::load_corpus(corpus, &table).map_err(runtime)?;
    if items.is_empty() {
        return Err(Failure::Runtime(format!("{}: corpus has no items", corpus.display())));
    }
    let mut trainer = Trainer::new(cfg, table)?;
    let stdout = std::io::stdout();
    let summary = trainer
        .train(&items, out, |_, report| {
            let _ = writeln!(
                stdout.lock(),
                "step {} total_g {:.4} total_d {:.4} mel {:.4}",
                report.step,
                report.total_g,
                report.total_d,
                report.mel
            );
            Ok(())
        })
        .map_err(runtime)?;
    println!("trained {} steps; checkpoint in {}", summary.steps, out.join("checkpoint").display());
    Ok(())
}

fn synth(model: &Path, score: &Path, out: &Path, durations: Durations) -> CmdResult {
    let m = TrainedModel::load(model).map_err(runtime)?;
    let score = parse_score(score, &m.table).map_err(runtime)?;
    let frames = match durations {
        Durations::Given => split_note_frames(&score, &m.table).map_err(runtime)?,
        Durations::Predicted => m.generator.predict_frames(&m.params, &g2p_expand(&score, &m.table)?)?,
    };
    let acoustic = m
        .generator
        .generate(&m.params, &score, &m.table, DurationMode::TeacherForced(&frames))
        .map_err(runtime)?;
    let (vuv_path, logf0_path) = sibling_paths(out);
    write_tensor(out, &acoustic.mel).map_err(runtime)?;
    write_tensor(&vuv_path, &acoustic.vuv).map_err(runtime)?;
    write_tensor(&logf0_path, &acoustic.logf0).map_err(runtime)?;
    println!("T={}", acoustic.frames());
    Ok(())
}

/// `dir/name.xten` → `dir/name.vuv.xten`, `dir/name.logf0.xten`, with a
/// trailing `.mel` in the name replaced.
fn sibling_paths(mel: &Path) -> (PathBuf, PathBuf) {
    let stem = mel.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let base = stem.strip_suffix(".mel").unwrap_or(stem);
    let base = if base == "mel" { String::new() } else { format!("{base}.") };
    (
        mel.with_file_name(format!("{base}vuv.xten")),
        mel.with_file_name(format!("{base}logf0.xten")),
    )
}

fn evaluate(model: &Path, corpus: &Path) -> CmdResult {
    let m = TrainedModel::load(model).map_err(runtime)?;
    let items = dataio::load_corpus(corpus, &m.table).map_err(runtime)?;
    if items.is_empty() {
        return Err(Failure::Runtime(format!("{}: corpus has no items", corpus.display())));
    }
    let metrics = eval::evaluate(&m.generator, &m.params, &m.table, &items).map_err(runtime)?;
    println!("{}", serde_json::to_string_pretty(&metrics).expect("metrics serialize"));
    Ok(())
}

fn plot_mel(input: &Path, out: &Path, band: BandArg) -> CmdResult {
    let mel = read_tensor(input).map_err(runtime)?;
    if mel.rank() != 2 {
        return Err(Failure::Runtime(format!("{}: expected a [T, bins] tensor, got {:?}", input.display(), mel.shape())));
    }
    let bins = mel.shape()[1];
    let (lo, hi) = match band {
        BandArg::Low => Band::Low.range(),
        BandArg::Mid => Band::Mid.range(),
        BandArg::High => Band::High.range(),
        BandArg::Full => (0, bins),
    };
    if hi > bins {
        return Err(Failure::Runtime(format!("band needs {hi} bins, tensor has {bins}")));
    }
    write_file(out, &render_ppm(&mel, lo, hi))
}

/// Grayscale P6 image of `mel[:, lo..hi]`: one column per frame, the highest
/// bin in the top row. Values are scaled to the crop's own range.
fn render_ppm(mel: &Tensor<f32>, lo: usize, hi: usize) -> Vec<u8> {
    let frames = mel.shape()[0];
    let crop = |t: usize| &mel.row(t)[lo..hi];
    let (min, max) = (0..frames)
        .flat_map(|t| crop(t).iter().copied())
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let span = max - min;
    let mut img = format!("P6\n{frames} {}\n255\n", hi - lo).into_bytes();
    for bin in (0..hi - lo).rev() {
        for t in 0..frames {
            let v = crop(t)[bin];
            let level = if span > 0.0 { ((v - min) / span * 255.0).round() as u8 } else { 128 };
            img.extend_from_slice(&[level; 3]);
        }
    }
    img
}
