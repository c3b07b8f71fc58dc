use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nsf_core::datagen::{BlurProfile, SynthConfig};
use nsf_core::dataset::{read_collection, sequence_name, write_dataset};
use nsf_core::detector::{classify, Detector};
use nsf_core::harness::{self, gradsuite, pipeline, QuintupleSource, Settings};
use nsf_core::hybformer::{HybFormer, Variant};
use nsf_core::{CoreError, Result};
use nsf_tensor::io::{load_checkpoint, save_checkpoint};

#[derive(Parser)]
#[command(name = "nsf", version, about = "Video deblurring with nearest sharp frames")]
struct Cli {
    /// `key = value` settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` setting.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic labeled sequences to `--out/seq_NNN/`.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Also synthesize events.csv.
        #[arg(long)]
        events: bool,
    },
    /// Train the sharp/blurry detector.
    TrainDetector {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Contrastive weight; overrides `lambda`.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Per-frame sharpness of one sequence as `index,o,label`.
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the restorer.
    TrainDeblur {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// self_only, self_plus_global, cross_only or full; overrides `variant`.
        #[arg(long)]
        variant: Option<String>,
        /// Detector checkpoint; quintuples then come from its labels.
        #[arg(long)]
        detector: Option<PathBuf>,
        /// Train with the event branch.
        #[arg(long)]
        events: bool,
    },
    /// Restore every frame of a sequence.
    Deblur {
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Search ranges; several values run a sweep into `--out/nN/`.
        #[arg(long, value_delimiter = ',')]
        n: Vec<usize>,
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Score restored frames against a sequence's ground truth.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        restored: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of the engine ops and the restorer loss.
    Gradcheck {
        /// Entries probed per restorer parameter tensor.
        #[arg(long, default_value_t = 4)]
        samples: usize,
    },
}

fn settings(cli: &Cli) -> Result<Settings> {
    let mut s = match &cli.config {
        Some(p) => Settings::parse(&fs::read_to_string(p).map_err(|e| CoreError::io(p, e))?)?,
        None => Settings::default(),
    };
    if let Some(seed) = cli.seed {
        s.train.seed = seed;
    }
    s.train.validate()?;
    Ok(s)
}

fn log_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("log.csv")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CoreError::io(path, e))
}

fn save(path: &Path, store: &nsf_tensor::ParamStore) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    }
    Ok(save_checkpoint(path, store)?)
}

fn load_detector(path: &Path) -> Result<Detector> {
    Detector::from_store(&load_checkpoint(path)?)
}

fn run(cli: Cli) -> Result<()> {
    let s = settings(&cli)?;
    let t = &s.train;
    match cli.command {
        Command::Synth { out, events } => {
            let profile = BlurProfile::by_name(&t.profile)?;
            for i in 0..s.synth.sequences {
                let mut c = SynthConfig::new(s.synth.height, s.synth.width, s.synth.frames, profile.clone(), t.seed + i as u64);
                c.events = events || s.synth.events;
                c.contrast = s.synth.contrast;
                let (seq, ev) = c.generate()?;
                write_dataset(&out.join(sequence_name(i)), &seq, ev.as_ref())?;
            }
            println!("wrote {} sequences to {}", s.synth.sequences, out.display());
        }
        Command::TrainDetector { data, out, lambda } => {
            let mut cfg = t.clone();
            if let Some(l) = lambda {
                cfg.lambda = l;
            }
            let seqs: Vec<_> = read_collection(&data)?.into_iter().map(|(s, _)| s).collect();
            let (det, log) = harness::train_detector(&cfg, &seqs)?;
            save(&out, &det.to_store())?;
            write_text(&log_path(&out), &log.to_csv())?;
            if let Some(e) = log.epochs.last() {
                println!("epoch {} loss {:.4} accuracy {:.3}", e.epoch, e.mean_loss, e.accuracy);
            }
        }
        Command::Detect { model, data, eps, out } => {
            let det = load_detector(&model)?;
            let video = pipeline::read_video(&data)?;
            let probs = harness::detect(&det, &video.frames)?;
            let labels = classify(&probs, eps.unwrap_or(t.eps));
            let mut text = String::from("index,o,label\n");
            for (i, (o, l)) in probs.iter().zip(&labels).enumerate() {
                text += &format!("{i},{o},{l}\n");
            }
            write_text(&out, &text)?;
        }
        Command::TrainDeblur { data, out, variant, detector, events } => {
            let mut cfg = t.clone();
            if let Some(v) = variant {
                cfg.model.variant = Variant::parse(&v)?;
            }
            cfg.model.events |= events;
            if detector.is_some() {
                cfg.quintuples = QuintupleSource::Detector;
            }
            let det = detector.as_deref().map(load_detector).transpose()?;
            let coll = read_collection(&data)?;
            let seqs: Vec<_> = coll.iter().map(|(s, _)| s.clone()).collect();
            let labels = harness::train::quintuple_labels(&cfg, &seqs, det.as_ref())?;
            let samples = harness::collect_samples(&coll, &labels, cfg.search_range, cfg.model.events)?;
            let (model, log) = harness::train_deblur(&cfg, &samples)?;
            save(&out, &model.to_store())?;
            write_text(&log_path(&out), &log.to_csv())?;
            if let Some(e) = log.epochs.last() {
                println!("epoch {} L1 {:.5}", e.epoch, e.mean_loss);
            }
        }
        Command::Deblur { detector, model, data, out, n, eps } => {
            let det = load_detector(&detector)?;
            let model = HybFormer::from_store(&load_checkpoint(&model)?)?;
            let video = pipeline::read_video(&data)?;
            let ns = if n.is_empty() { vec![t.search_range] } else { n };
            let runs = harness::run_pipeline(&det, &model, &video, &out, &ns, eps.unwrap_or(t.eps))?;
            for r in &runs {
                match r.means() {
                    Some((p, q)) => println!("n = {}: {} frames, PSNR {p:.3} dB, SSIM {q:.4}", r.n, r.restored.len()),
                    None => println!("n = {}: {} frames", r.n, r.restored.len()),
                }
            }
        }
        Command::Eval { data, restored, out } => {
            let rows = harness::evaluate(&data, &restored)?;
            pipeline::write_metrics(&out, &rows)?;
            let n = rows.len().max(1) as f64;
            println!("PSNR {:.3} dB, SSIM {:.4}", rows.iter().map(|r| r.psnr).sum::<f64>() / n, rows.iter().map(|r| r.ssim).sum::<f64>() / n);
        }
        Command::Gradcheck { samples } => {
            let mut cases = gradsuite::op_suite()?;
            cases.push(gradsuite::end_to_end(samples, t.seed)?);
            let mut failed = 0;
            for c in &cases {
                let verdict = if c.passed() { "ok" } else { "FAIL" };
                println!("{verdict:4} {:<28} {:.3e}", c.name, c.max_rel_error);
                failed += usize::from(!c.passed());
            }
            if failed > 0 {
                return Err(CoreError::Tensor(nsf_tensor::TensorError::Numeric(format!("{failed} gradient checks above {:e}", gradsuite::TOLERANCE))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
