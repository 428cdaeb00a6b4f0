//! `trimat`: train, evaluate and probe the trimap-token matting model.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use trimat_core::checkpoint::Checkpoint;
use trimat_core::config::RunConfig;
use trimat_core::data::{synth_dataset, write_corpus, CorpusManifest, FloatImage, SynthSpec};
use trimat_core::netpbm;
use trimat_core::pipeline::{self, AttentionRequest, EvalOptions, InferOptions};
use trimat_core::train::{self, trace_csv, Control};
use trimat_core::trimap::{Trimap, BACKGROUND, FOREGROUND, UNKNOWN};
use trimat_core::{Error, Result};

#[derive(Parser)]
#[command(name = "trimat", version, about = "Trimap-token guided image matting")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set optim.lr=1e-3` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Directory for every emitted artifact.
    #[arg(
        long,
        env = "TRIMAT_OUT_DIR",
        default_value = "trimat-out",
        global = true
    )]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from the configured corpus; writes checkpoints and a loss trace.
    Train,
    /// Score a checkpoint on a corpus; writes per-sample CSV and a Markdown summary.
    Eval(EvalArgs),
    /// Predict an alpha matte for one image.
    Infer(InferArgs),
    /// Dump per-head attention heatmaps for one query point.
    AttnViz(AttnArgs),
    /// Write a synthetic corpus with a manifest.
    SynthData(SynthArgs),
}

#[derive(Args)]
struct EvalArgs {
    /// Trained model; not needed with `--oracle`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Corpus manifest; defaults to the configured data source.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Score the ground truth against itself.
    #[arg(long)]
    oracle: bool,
    /// Score every pixel instead of the unknown region.
    #[arg(long)]
    whole_image: bool,
    /// Known-foreground fraction below which a sample counts as transparent.
    #[arg(long, default_value_t = 0.05)]
    tt_threshold: f64,
    /// Force alpha to 1 on known foreground and 0 on known background.
    #[arg(long)]
    clamp_known: bool,
    /// Also write each prediction as an 8-bit PGM.
    #[arg(long)]
    save_predictions: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    trimap: PathBuf,
    /// Output PGM; defaults to `<out-dir>/alpha.pgm`.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Force alpha to 1 on known foreground and 0 on known background.
    #[arg(long)]
    clamp_known: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClassArg {
    Background,
    Unknown,
    Foreground,
}

impl ClassArg {
    fn class(self) -> u8 {
        match self {
            ClassArg::Background => BACKGROUND,
            ClassArg::Unknown => UNKNOWN,
            ClassArg::Foreground => FOREGROUND,
        }
    }
}

#[derive(Args)]
struct AttnArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    trimap: PathBuf,
    /// Query point as `row,col` in image pixels.
    #[arg(long, value_parser = parse_point)]
    point: (usize, usize),
    #[arg(long, default_value_t = 1)]
    stage: usize,
    #[arg(long, default_value_t = 0)]
    block: usize,
    /// Rewrite the query's trimap class before the pass.
    #[arg(long, value_enum)]
    substitute_class: Option<ClassArg>,
    /// File name prefix inside the output directory.
    #[arg(long, default_value = "attn")]
    prefix: String,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tt_ratio: Option<f64>,
    #[arg(long, default_value = "train")]
    split: String,
}

fn parse_point(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected row,col")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v}: {e}"));
    Ok((p(a)?, p(b)?))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run_train(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let samples = cfg.data.load_samples(cfg.train.seed)?;
    ensure_dir(&cli.out_dir)?;
    write_text(&cli.out_dir.join("config.toml"), &cfg.to_toml())?;
    let every = cfg.train.checkpoint_every;
    let total = cfg.train.steps;
    let outcome = train::train(&cfg, &samples, None, |step, params, row| {
        let done = step + 1;
        if every > 0 && done % every == 0 && done < total {
            Checkpoint {
                config: cfg.clone(),
                step: done as u64,
                params: params.clone(),
            }
            .save(&cli.out_dir.join(format!("step_{done:06}.ckpt")))?;
        }
        if done % 50 == 0 || done == total {
            eprintln!(
                "step {done}/{total} loss {:.5} lr {:.3e}",
                row.total, row.lr
            );
        }
        Ok(Control::Continue)
    })?;
    write_text(
        &cli.out_dir.join("loss_trace.csv"),
        &trace_csv(&outcome.trace),
    )?;
    let final_path = cli.out_dir.join("final.ckpt");
    Checkpoint {
        config: cfg,
        step: outcome.steps_run as u64,
        params: outcome.params,
    }
    .save(&final_path)?;
    println!("{}", final_path.display());
    Ok(())
}

fn run_eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let (model_cfg, params) = match (&a.checkpoint, a.oracle) {
        (Some(p), _) => {
            let ck = Checkpoint::load(p)?;
            (ck.config.model, ck.params)
        }
        (None, true) => (cfg.model.clone(), Default::default()),
        (None, false) => {
            return Err(Error::Argument(
                "--checkpoint is required unless --oracle".into(),
            ))
        }
    };
    let samples = match &a.corpus {
        Some(m) => {
            CorpusManifest::read(m)?.load(m.parent().unwrap_or(Path::new(".")), cfg.train.seed)?
        }
        None => cfg.data.load_samples(cfg.train.seed)?,
    };
    let opts = EvalOptions {
        whole_image: a.whole_image,
        tt_threshold: a.tt_threshold,
        oracle: a.oracle,
        infer: InferOptions {
            clamp_known: a.clamp_known,
        },
    };
    let (report, preds) = pipeline::evaluate(&model_cfg, &params, &samples, opts)?;
    ensure_dir(&cli.out_dir)?;
    write_text(&cli.out_dir.join("metrics.csv"), &report.to_csv())?;
    let md = report.to_markdown();
    write_text(&cli.out_dir.join("summary.md"), &md)?;
    if a.save_predictions {
        let dir = cli.out_dir.join("predictions");
        ensure_dir(&dir)?;
        for (s, p) in samples.iter().zip(&preds) {
            netpbm::write(
                &dir.join(format!("{}.pgm", s.id)),
                &pipeline::alpha_to_pgm(p),
            )?;
        }
    }
    print!("{md}");
    Ok(())
}

fn read_pair(image: &Path, trimap: &Path) -> Result<(FloatImage, Trimap)> {
    let img = FloatImage::read(image)?;
    if img.channels != 3 {
        return Err(Error::Format(format!(
            "{}: expected an RGB (P6) image",
            image.display()
        )));
    }
    Ok((img, Trimap::read_pgm(trimap)?))
}

fn run_infer(cli: &Cli, a: &InferArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (img, tri) = read_pair(&a.image, &a.trimap)?;
    let alpha = pipeline::predict(
        &ck.config.model,
        &ck.params,
        &img,
        &tri,
        InferOptions {
            clamp_known: a.clamp_known,
        },
    )?;
    let out = match &a.output {
        Some(p) => p.clone(),
        None => {
            ensure_dir(&cli.out_dir)?;
            cli.out_dir.join("alpha.pgm")
        }
    };
    netpbm::write(&out, &pipeline::alpha_to_pgm(&alpha))?;
    println!("{}", out.display());
    Ok(())
}

fn run_attn(cli: &Cli, a: &AttnArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (img, tri) = read_pair(&a.image, &a.trimap)?;
    let req = AttentionRequest {
        y: a.point.0,
        x: a.point.1,
        stage: a.stage,
        block: a.block,
        substitute: a.substitute_class.map(ClassArg::class),
    };
    let maps = pipeline::attention_heatmaps(&ck.config.model, &ck.params, &img, &tri, &req)?;
    ensure_dir(&cli.out_dir)?;
    for (h, m) in maps.iter().enumerate() {
        let path = cli.out_dir.join(format!("{}_head{h}.pgm", a.prefix));
        netpbm::write(&path, m)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn run_synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let base = cfg.data.synth;
    let spec = SynthSpec {
        count: a.count.unwrap_or(base.count),
        size: a.size.unwrap_or(base.size),
        seed: a.seed.unwrap_or(base.seed),
        tt_ratio: a.tt_ratio.unwrap_or(base.tt_ratio),
    };
    let samples = synth_dataset(&spec)?;
    let manifest = write_corpus(&cli.out_dir, &samples, &a.split)?;
    println!("{}", manifest.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train => run_train(&cli),
        Command::Eval(a) => run_eval(&cli, a),
        Command::Infer(a) => run_infer(&cli, a),
        Command::AttnViz(a) => run_attn(&cli, a),
        Command::SynthData(a) => run_synth(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
