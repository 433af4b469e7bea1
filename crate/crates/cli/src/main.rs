use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use loopvox::audio::decode_wav_named;
use loopvox::dataset::{generate_synthetic, Split, SynthSpec, MANIFEST_FILE};
use loopvox::identification::format_report;
use loopvox::pipeline::{
    checkpoint_speakers, evaluate_checkpoint, identify_clip, load_examples, preprocess_manifest, train_run, RunPaths,
};
use loopvox::training::format_log;
use loopvox::{Checkpoint, Error, Manifest, Result, RunConfig};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "loopvox", version, about = "Speaker identification on looped mel-spectrogram images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-speaker corpus and its manifest.
    Synth {
        #[arg(long, default_value_t = 8)]
        speakers: usize,
        #[arg(long, default_value_t = 40)]
        utts: usize,
        #[arg(long, default_value_t = 1.5)]
        min_dur: f64,
        #[arg(long, default_value_t = 6.0)]
        max_dur: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute feature images for every manifest entry into a cache directory.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train a model; writes checkpoint, epoch log and config into the run directory.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate checkpoints on a split and write the report table.
    Eval {
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        /// Feature cache per checkpoint, in the same order.
        #[arg(long, required = true, num_args = 1..)]
        cache: Vec<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Identify the speaker of one WAV file.
    Identify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        wav: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Base config file (key=value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    geometry: Option<String>,
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    net: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    min_epochs: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Any other config key, as key=value. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let flags: [(&str, Option<String>); 11] = [
            ("geometry", self.geometry.clone()),
            ("duration_s", self.duration.map(|v| v.to_string())),
            ("loss", self.loss.clone()),
            ("scale", self.scale.map(|v| v.to_string())),
            ("margin", self.margin.map(|v| v.to_string())),
            ("net_preset", self.net.clone()),
            ("seed", self.seed.map(|v| v.to_string())),
            ("lr0", self.lr0.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("min_epochs", self.min_epochs.map(|v| v.to_string())),
            ("max_epochs", self.max_epochs.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got {kv:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    if !path.is_file() {
        return Err(Error::Config(format!(
            "manifest {} not found (create one with `loopvox synth`)",
            path.display()
        )));
    }
    Manifest::load(path)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            speakers,
            utts,
            min_dur,
            max_dur,
            seed,
            out,
        } => {
            let spec = SynthSpec {
                num_speakers: speakers,
                utterances_per_speaker: utts,
                duration_range_s: (min_dur, max_dur),
                seed,
            };
            spec.validate()?;
            let m = generate_synthetic(&spec, &out)?;
            println!("{}\t{} utterances", out.join(MANIFEST_FILE).display(), m.len());
        }
        Command::Preprocess { manifest, cache, config } => {
            let cfg = config.resolve()?;
            let m = load_manifest(&manifest)?;
            let s = preprocess_manifest(&m, &manifest, &cache, &cfg)?;
            println!(
                "written {}\tfresh {}\tskipped {}",
                s.written,
                s.fresh,
                s.skipped.len()
            );
        }
        Command::Train {
            manifest,
            cache,
            run_dir,
            config,
        } => {
            let cfg = config.resolve()?;
            let m = load_manifest(&manifest)?;
            let speakers = m.speakers();
            let train = load_examples(&m, &cache, Split::Train, &speakers)?;
            let val = load_examples(&m, &cache, Split::Val, &speakers)?;
            let (outcome, ck) = train_run(&cfg, &speakers, &train, &val)?;
            fs::create_dir_all(&run_dir)?;
            let paths = RunPaths::new(&run_dir);
            ck.save(&paths.checkpoint)?;
            fs::write(&paths.log, format_log(&outcome.records))?;
            cfg.save(&paths.config)?;
            println!(
                "{}\tbest epoch {}\tval_loss {}",
                paths.checkpoint.display(),
                outcome.best_epoch,
                outcome.best_val_loss
            );
        }
        Command::Eval {
            checkpoint,
            manifest,
            cache,
            split,
            out,
        } => {
            if cache.len() != checkpoint.len() {
                return Err(Error::Config("pass one --cache per --checkpoint".into()));
            }
            let split: Split = split.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
            let m = load_manifest(&manifest)?;
            let mut rows = Vec::new();
            let mut confusion = String::new();
            for (ck_path, cache_dir) in checkpoint.iter().zip(&cache) {
                let ck = Checkpoint::load(ck_path)?;
                let test = load_examples(&m, cache_dir, split, &checkpoint_speakers(&ck)?)?;
                let report = evaluate_checkpoint(&ck, &test)?;
                confusion.push_str(&format!("# {}\n{}", ck_path.display(), report.confusion.to_tsv()));
                rows.push(report.row);
            }
            let text = format_report(&rows);
            fs::write(&out, &text)?;
            fs::write(out.with_extension("confusion.tsv"), confusion)?;
            print!("{text}");
        }
        Command::Identify { checkpoint, wav } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let bytes = fs::read(&wav)?;
            let clip = decode_wav_named(&bytes, &wav.display().to_string())?;
            let (speaker, score) = identify_clip(&ck, &clip)?;
            println!("{speaker}\t{score:.6}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 1 } else { 2 })
        }
    }
}
