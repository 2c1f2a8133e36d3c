use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use scoresing::error::Error as CoreError;
use scoresing::numerics::RngState;
use scoresing::pipeline::eval::baselines;
use scoresing::pipeline::{
    apply_overrides, evaluate_checkpoint, plot, run_ablation, train_stage1, train_stage2, AblationConfig, Checkpoint,
    EvalOptions, PlotTracks, ScoreInputs, TrainConfig,
};
use scoresing::score::store::{read_split, write_corpus};
use scoresing::score::{generate_corpus, parse_score, CorpusConfig};

#[derive(Parser)]
#[command(name = "scoresing", version, about = "Word-level singing synthesis from music scores")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set model.sigma=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load<T: Default + Serialize + DeserializeOwned>(&self) -> Result<T> {
        let base = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).map_err(|e| CoreError::Config(format!("{}: {e}", p.display())))?
            }
            None => T::default(),
        };
        Ok(apply_overrides(&base, &self.set)?)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus and write it to disk.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run stage 1 or stage 2 training from a train config.
    Train {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Synthesize tracks for one score; prints JSON.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        score: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Skip the post-net and return the coarse spectral frames.
        #[arg(long)]
        no_refine: bool,
        /// Use the score's ground-truth word durations when it has them.
        #[arg(long)]
        gt_durations: bool,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Score a checkpoint on a corpus split; prints the EvalReport as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        no_refine: bool,
        /// Lay frames out with predicted instead of reference word durations.
        #[arg(long)]
        predicted_durations: bool,
        /// Also print the coarse-output report and the reference baselines.
        #[arg(long)]
        detail: bool,
    },
    /// Train every variant over several seeds and print the comparison table.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Write the mean table as markdown here as well.
        #[arg(long)]
        markdown: Option<PathBuf>,
    },
    /// Render the JSON printed by `infer` as SVG.
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        svg: PathBuf,
        #[arg(long)]
        title: Option<String>,
    },
}

#[derive(Serialize, serde::Deserialize)]
struct InferOutput {
    f0: Vec<f32>,
    unvoiced: Vec<bool>,
    spectral: Vec<Vec<f32>>,
    word_durations: Vec<usize>,
    predicted_word_durations: Vec<usize>,
}

impl InferOutput {
    fn tracks(&self, title: Option<String>) -> Result<PlotTracks> {
        let dim = self.spectral.first().map_or(0, Vec::len);
        let flat: Vec<f32> = self.spectral.iter().flatten().copied().collect();
        if flat.len() != dim * self.spectral.len() {
            bail!("ragged spectral rows");
        }
        let spectral = (dim > 0)
            .then(|| scoresing::numerics::Tensor::new(vec![self.spectral.len(), dim], flat))
            .transpose()?;
        Ok(PlotTracks {
            f0: Some(self.f0.clone()),
            unvoiced: Some(self.unvoiced.clone()),
            spectral,
            title,
        })
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenCorpus { out, seed, cfg } => {
            let cfg: CorpusConfig = cfg.load()?;
            let songs = generate_corpus(&cfg, &RngState::new(seed))?;
            write_corpus(&out, seed, &cfg, songs)?;
            eprintln!("wrote {} songs to {}", cfg.songs, out.display());
        }
        Cmd::Train { seed, out, cfg } => {
            let mut cfg: TrainConfig = cfg.load()?;
            cfg.seed = seed;
            cfg.validate()?;
            let train = read_split(&cfg.corpus, "train")?;
            let log = |r: &scoresing::pipeline::LogRow| {
                eprintln!("{}", serde_json::to_string(r).unwrap_or_default());
            };
            let ck = if cfg.stage == 1 {
                train_stage1(&cfg, &train, log)?.0
            } else {
                let init = cfg.init_checkpoint.as_ref().context("stage 2 needs init_checkpoint")?;
                let init = Checkpoint::load(init)?;
                train_stage2(&cfg, &init, &train, log)?.0
            };
            ck.save(&out)?;
        }
        Cmd::Infer {
            checkpoint,
            score,
            seed,
            no_refine,
            gt_durations,
            svg,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let text = fs::read_to_string(&score).with_context(|| format!("reading {}", score.display()))?;
            let score = parse_score(&text)?;
            let spans = if gt_durations {
                Some(score.gt_durations().context("the score has no ground-truth durations")?)
            } else {
                None
            };
            let inputs = ScoreInputs::new(&score)?;
            let model = ck.build()?;
            let inf = model.infer(&ck.params, &ck.f0_stats, &inputs, spans.as_deref(), !no_refine, &RngState::new(seed))?;
            let out = InferOutput {
                spectral: (0..inf.frames()).map(|t| inf.spectral().row(t).to_vec()).collect(),
                f0: inf.f0,
                unvoiced: inf.unvoiced,
                word_durations: inf.word_durations,
                predicted_word_durations: inf.predicted_word_durations,
            };
            if let Some(path) = svg {
                write_file(&path, &plot(&out.tracks(None)?)?)?;
            }
            print_json(&out)?;
        }
        Cmd::Eval {
            checkpoint,
            corpus,
            split,
            seed,
            no_refine,
            predicted_durations,
            detail,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let songs = read_split(&corpus, &split)?;
            let opts = EvalOptions {
                gt_durations: !predicted_durations,
                refine: !no_refine,
                seed,
            };
            let ev = evaluate_checkpoint(&ck, &songs, opts)?;
            if detail {
                print_json(&json!({
                    "report": ev.report,
                    "coarse": ev.coarse,
                    "baselines": baselines(&songs)?,
                }))?;
            } else {
                print_json(&ev.report)?;
            }
        }
        Cmd::Ablate { cfg, markdown } => {
            let cfg: AblationConfig = cfg.load()?;
            let train = read_split(&cfg.train.corpus, "train")?;
            let test = read_split(&cfg.train.corpus, "test")?;
            let table = run_ablation(&cfg, &train, &test)?;
            if let Some(path) = markdown {
                write_file(&path, &table.to_markdown())?;
            }
            print_json(&json!({
                "rows": table.rows,
                "means": table.means,
                "directions": table.directions(),
            }))?;
        }
        Cmd::Plot { input, svg, title } => {
            let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let out: InferOutput = serde_json::from_str(&text).map_err(|e| CoreError::Config(format!("{}: {e}", input.display())))?;
            write_file(&svg, &plot(&out.tracks(title)?)?)?;
        }
    }
    Ok(())
}

fn fail(kind: &str, message: String) -> ExitCode {
    eprintln!("{}", json!({"error": {"kind": kind, "message": message}}));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim_end().to_string()),
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.downcast_ref::<CoreError>().map_or("cli", CoreError::kind), format!("{e:#}")),
    }
}
