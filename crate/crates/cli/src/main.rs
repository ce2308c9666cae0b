use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::warn;

use gestcall::announce::{Receiver, DEFAULT_PORT};
use gestcall::classifier::{load_model, nn_match, save_model, train, ExemplarDb, Mlp, TrainConfig};
use gestcall::features::FEATURE_LEN;
use gestcall::imaging::{load_pnm, save_pnm, Image};
use gestcall::overlay::draw_overlay;
use gestcall::pipeline::{analyze_frame, classify_frame, AnalysisConfig, GestureRegistry, Thresholds, WRONG_GESTURE};
use gestcall::segmentation::SkinModel;
use gestcall::synth::{generate_corpus, read_corpus, write_corpus, CORPUS_CLASSES};

mod run;

#[derive(Parser)]
#[command(name = "gestcall", version, about = "Hand-gesture need announcement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a labelled synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        per_class: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value = "320x240", value_parser = parse_size)]
        size: (usize, usize),
    },
    /// Train the network on a corpus directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value_t = 32)]
        hidden: usize,
        #[command(flatten)]
        skin: SkinArg,
    },
    /// Print classification accuracy on a corpus directory.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Use the orientation-histogram nearest-neighbour matcher instead.
        #[arg(long)]
        baseline: bool,
        #[command(flatten)]
        skin: SkinArg,
    },
    /// Classify one frame.
    Classify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        gestures: Option<PathBuf>,
        #[command(flatten)]
        skin: SkinArg,
    },
    /// Detect fingertips and write a debug overlay.
    Detect {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        overlay: PathBuf,
        #[command(flatten)]
        skin: SkinArg,
    },
    /// Process a directory of frames as a stream and announce gestures.
    Run(run::RunArgs),
    /// Receive, log and print announcements.
    Receive {
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value = "0.0.0.0")]
        bind: String,
    },
}

#[derive(Args, Clone)]
pub struct SkinArg {
    /// Skin model file; the built-in model when omitted.
    #[arg(long = "skin")]
    path: Option<PathBuf>,
}

impl SkinArg {
    pub fn load(&self) -> Result<SkinModel> {
        match &self.path {
            None => Ok(SkinModel::default()),
            Some(p) => read_text(p)?.parse().with_context(|| format!("parsing {}", p.display())),
        }
    }
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WxH")?;
    let w: usize = w.parse().map_err(|_| format!("bad width '{w}'"))?;
    let h: usize = h.parse().map_err(|_| format!("bad height '{h}'"))?;
    if w == 0 || h == 0 {
        return Err("size must be nonzero".into());
    }
    Ok((w, h))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    load_pnm(&bytes).with_context(|| format!("decoding {}", path.display()))
}

pub fn read_model(path: &Path) -> Result<Mlp> {
    load_model(&read_text(path)?).with_context(|| format!("loading model {}", path.display()))
}

pub fn read_registry(path: Option<&Path>) -> Result<GestureRegistry> {
    match path {
        None => Ok(GestureRegistry::default()),
        Some(p) => read_text(p)?.parse().with_context(|| format!("parsing {}", p.display())),
    }
}

fn exemplar_path(model: &Path) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(".exemplars");
    PathBuf::from(s)
}

fn init_logging() {
    let level = std::env::var("GC_LOG_LEVEL").unwrap_or_else(|_| "info".to_string());
    env_logger::Builder::new().parse_filters(&level).format_timestamp(None).init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Synth { out, per_class, seed, size } => {
            if per_class == 0 {
                bail!("--per-class must be at least 1");
            }
            let samples = generate_corpus(seed, per_class, size.0, size.1)?;
            write_corpus(&out, &samples)?;
            println!("wrote {} frames to {}", samples.len(), out.display());
        }
        Command::Train { data, model, seed, epochs, lr, hidden, skin } => {
            cmd_train(&data, &model, seed, epochs, lr, hidden, &skin.load()?)?;
        }
        Command::Eval { data, model, baseline, skin } => {
            let acc = cmd_eval(&data, &model, baseline, &skin.load()?)?;
            println!("accuracy {acc:.4}");
        }
        Command::Classify { model, image, gestures, skin } => {
            let net = read_model(&model)?;
            let registry = read_registry(gestures.as_deref())?;
            let frame = read_image(&image)?;
            let th = Thresholds::default();
            match classify_frame(&net, &skin.load()?, &frame, &AnalysisConfig::default())? {
                None => println!("no-hand"),
                Some((pose, conf, _)) => match registry.for_pose(pose) {
                    Some(g) if conf >= th.conf_reject => println!("{} {} {conf:.3}", g.id, g.name),
                    _ => println!("{WRONG_GESTURE}"),
                },
            }
        }
        Command::Detect { image, overlay, skin } => {
            let frame = read_image(&image)?;
            match analyze_frame(&skin.load()?, &frame, &AnalysisConfig::default())? {
                None => {
                    fs::write(&overlay, save_pnm(&frame.to_rgb()))?;
                    println!("no-hand");
                }
                Some(a) => {
                    fs::write(&overlay, save_pnm(&draw_overlay(&frame, &a.geometry)))
                        .with_context(|| format!("writing {}", overlay.display()))?;
                    println!("tips {}", a.geometry.fingertips.len());
                    for t in &a.geometry.fingertips {
                        println!("{:.2} {:.2}", t.r, t.theta);
                    }
                }
            }
        }
        Command::Run(args) => return run::run(args),
        Command::Receive { port, log, bind } => {
            let rx = Receiver { bind: format!("{bind}:{port}"), ..Receiver::new(port, log) };
            rx.start()?.wait();
        }
    }
    Ok(ExitCode::SUCCESS)
}

type LabeledFeatures = Vec<(Vec<f64>, usize)>;

/// Feature vectors and histograms of every corpus frame that contains a hand.
fn corpus_features(dir: &Path, skin: &SkinModel) -> Result<(LabeledFeatures, ExemplarDb)> {
    let entries = read_corpus(dir).with_context(|| format!("reading corpus {}", dir.display()))?;
    let cfg = AnalysisConfig::default();
    let mut data = Vec::with_capacity(entries.len());
    let mut db = ExemplarDb::default();
    for e in &entries {
        match analyze_frame(skin, &e.sample.image, &cfg)? {
            Some(a) => {
                data.push((a.features.values.to_vec(), e.sample.label));
                db.push(a.histogram, e.sample.label);
            }
            None => {
                warn!("{}: no hand found", e.file_name);
            }
        }
    }
    Ok((data, db))
}

fn cmd_train(
    data: &Path,
    model: &Path,
    seed: u64,
    epochs: Option<usize>,
    lr: Option<f64>,
    hidden: usize,
    skin: &SkinModel,
) -> Result<()> {
    let (samples, db) = corpus_features(data, skin)?;
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        seed,
        epochs: epochs.unwrap_or(defaults.epochs),
        learning_rate: lr.unwrap_or(defaults.learning_rate),
        ..defaults
    };
    let out = train(&samples, &[FEATURE_LEN, hidden, CORPUS_CLASSES], &cfg)?;
    fs::write(model, save_model(&out.net)).with_context(|| format!("writing {}", model.display()))?;
    fs::write(exemplar_path(model), db.to_text())?;
    let correct = samples.iter().filter(|(x, l)| out.net.predict(x).map(|p| p.0 == *l).unwrap_or(false)).count();
    println!(
        "epochs {} loss {:.6} accuracy {:.4}",
        out.epoch_losses.len(),
        out.epoch_losses.last().copied().unwrap_or(f64::NAN),
        correct as f64 / samples.len().max(1) as f64
    );
    Ok(())
}

fn cmd_eval(data: &Path, model: &Path, baseline: bool, skin: &SkinModel) -> Result<f64> {
    let entries = read_corpus(data).with_context(|| format!("reading corpus {}", data.display()))?;
    if entries.is_empty() {
        bail!("corpus {} is empty", data.display());
    }
    let cfg = AnalysisConfig::default();
    let net = if baseline { None } else { Some(read_model(model)?) };
    let db = if baseline {
        let p = exemplar_path(model);
        Some(ExemplarDb::from_text(&read_text(&p)?).with_context(|| format!("loading {}", p.display()))?)
    } else {
        None
    };
    let mut correct = 0;
    for e in &entries {
        let Some(a) = analyze_frame(skin, &e.sample.image, &cfg)? else { continue };
        let predicted = match (&net, &db) {
            (Some(net), _) => net.predict(a.features.as_slice())?.0,
            (None, Some(db)) => nn_match(db, &a.histogram)?.0,
            (None, None) => unreachable!(),
        };
        if predicted == e.sample.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / entries.len() as f64)
}
