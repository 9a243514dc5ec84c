//! `xbt`: generate synthetic corpora, train projections, evaluate and sweep.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use xbt_core::checkpoint::Checkpoint;
use xbt_core::config::RunConfig;
use xbt_core::data::{read_corpus_dir, synth_generate, write_atomic, write_corpus_dir};
use xbt_core::eval::RetrievalReport;
use xbt_core::optim::FreezingPolicy;
use xbt_core::pipeline::{
    ablate, cross_r1, evaluate_model, parse_seeds, run_continual_pipeline, run_pipeline_on, Sweep,
};
use xbt_core::training::{init_adapters, run_direct, run_text_pretrain, run_xbt, TrainLog};
use xbt_core::{Result, XbtError};

#[derive(Parser)]
#[command(
    name = "xbt",
    version,
    about = "Cross-modal backward-compatible embedding training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    FullTune,
    LoraOnly,
    Base,
}

impl From<Policy> for FreezingPolicy {
    fn from(p: Policy) -> Self {
        match p {
            Policy::FullTune => FreezingPolicy::FullTune,
            Policy::LoraOnly => FreezingPolicy::LoraOnly,
            Policy::Base => FreezingPolicy::Base,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic old/new corpus to a directory.
    GenSynth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Text-only pretraining of the projection.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines training log; defaults to `<out>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Cross-modal fine-tuning of a pretrained projection.
    TrainXbt {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint written by `pretrain`.
        #[arg(long)]
        phi: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Direct baseline trained against the old model's other modality.
    TrainDirect {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "base")]
        policy: Policy,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; writes JSON and a CSV next to it.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Head-to-head cross-modal R@1 of an XBT and a direct checkpoint.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        xbt: PathBuf,
        #[arg(long)]
        direct: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain, fine-tune, baseline and evaluate in one go.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus directory; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "base")]
        baseline: Policy,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep one setting over several seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=v1,v2,...` with key one of sigma, n_pretrain_texts, n_pairs.
        #[arg(long)]
        sweep: String,
        /// `a..b` (inclusive) or a comma list.
        #[arg(long, default_value = "0..4")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Chain several encoder generations, each stage mapping into the first.
    Continual {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        generations: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(err: &XbtError) -> u8 {
    match err {
        XbtError::Config(_) | XbtError::Argument(_) | XbtError::Shape { .. } => 2,
        XbtError::Io { .. } | XbtError::Format { .. } | XbtError::Json(_) => 3,
        XbtError::Numeric(_) => 4,
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| XbtError::Io {
        path: dir.into(),
        source: e,
    })
}

fn append_log(path: &Path, log: &TrainLog) -> Result<()> {
    let mut line = serde_json::to_string(log)?;
    line.push('\n');
    let io = |e| XbtError::Io {
        path: path.into(),
        source: e,
    };
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io)?;
    file.write_all(line.as_bytes()).map_err(io)
}

fn log_path(out: &Path, log: Option<PathBuf>) -> PathBuf {
    log.unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".log.jsonl");
        PathBuf::from(s)
    })
}

/// Writes `report` as JSON at `out` and as CSV beside it.
fn write_report(out: &Path, report: &RetrievalReport) -> Result<()> {
    write_atomic(out, report.to_json()?.as_bytes())?;
    write_atomic(&out.with_extension("csv"), report.to_csv().as_bytes())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let manifest = write_corpus_dir(&out, &synth_generate(&cfg.synthetic)?)?;
            println!(
                "wrote {} embedding files and {} pairing files to {}",
                manifest.embedding_files.len(),
                manifest.pairing_files.len(),
                out.display()
            );
        }
        Command::Pretrain {
            config,
            data,
            out,
            log,
        } => {
            let cfg = load_config(config.as_deref())?;
            let corpus = read_corpus_dir(&data)?;
            let (phi, opt, tlog) = run_text_pretrain(
                &cfg.train,
                &corpus.new_gen().pretrain_text,
                &corpus.old().pretrain_text,
            )?;
            Checkpoint {
                stage: "pretrain".into(),
                config: cfg.train.clone(),
                phi,
                adapters: None,
                optimizer: Some(xbt_core::checkpoint::OptimizerSnapshot::of(&opt)),
            }
            .save(&out)?;
            append_log(&log_path(&out, log), &tlog)?;
            println!(
                "pretrain: {} steps, final loss {:.6}",
                tlog.steps.len(),
                tlog.final_loss().unwrap_or(f64::NAN)
            );
        }
        Command::TrainXbt {
            config,
            data,
            phi,
            out,
            log,
        } => {
            let cfg = load_config(config.as_deref())?;
            let phi = phi.ok_or_else(|| {
                XbtError::Config(
                    "XBT requires pretrained φ: pass --phi with a checkpoint from `xbt pretrain`"
                        .into(),
                )
            })?;
            let corpus = read_corpus_dir(&data)?;
            let pre = Checkpoint::load(&phi)?;
            let mut train = cfg.train.clone();
            train.policy = FreezingPolicy::Xbt;
            let pairs = &corpus.new_gen().train;
            let adapters = init_adapters(&train, pairs.dim())?;
            let (model, opt, tlog) = run_xbt(&train, pre.phi, pairs, adapters)?;
            Checkpoint::from_model("xbt", &train, &model, Some(&opt)).save(&out)?;
            append_log(&log_path(&out, log), &tlog)?;
            println!(
                "train-xbt: {} steps, final loss {:.6}",
                tlog.steps.len(),
                tlog.final_loss().unwrap_or(f64::NAN)
            );
        }
        Command::TrainDirect {
            config,
            data,
            policy,
            out,
            log,
        } => {
            let cfg = load_config(config.as_deref())?;
            let corpus = read_corpus_dir(&data)?;
            let mut train = cfg.train.clone();
            train.policy = policy.into();
            let (model, opt, tlog) = run_direct(
                &train,
                &corpus.new_gen().train,
                &corpus.old().train,
                train.policy,
            )?;
            Checkpoint::from_model("direct", &train, &model, Some(&opt)).save(&out)?;
            append_log(&log_path(&out, log), &tlog)?;
            println!(
                "train-direct ({}): {} steps, final loss {:.6}",
                train.policy,
                tlog.steps.len(),
                tlog.final_loss().unwrap_or(f64::NAN)
            );
        }
        Command::Eval {
            config,
            ckpt,
            data,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let corpus = read_corpus_dir(&data)?;
            let model = Checkpoint::load(&ckpt)?.model()?;
            let report =
                RetrievalReport::new(cfg.effective_json(), evaluate_model(&cfg, &corpus, &model)?);
            write_report(&out, &report)?;
            let (t, i) = cross_r1(&report.evaluation);
            println!(
                "cross R@1 text->image {t:.2} image->text {i:.2}; eq2 all true: {}",
                report.evaluation.eq2_verdicts.all_true()
            );
        }
        Command::Compare {
            config,
            data,
            xbt,
            direct,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let corpus = read_corpus_dir(&data)?;
            let xe = evaluate_model(&cfg, &corpus, &Checkpoint::load(&xbt)?.model()?)?;
            let de = evaluate_model(&cfg, &corpus, &Checkpoint::load(&direct)?.model()?)?;
            let (xt, xi) = cross_r1(&xe);
            let (dt, di) = cross_r1(&de);
            let xbt_ahead = xt > dt || xi > di;
            write_json(
                &out,
                &json!({
                    "config": cfg.effective_json(),
                    "xbt": {"cross_r1_text_to_image": xt, "cross_r1_image_to_text": xi,
                            "eq2_verdicts": xe.eq2_verdicts},
                    "direct": {"cross_r1_text_to_image": dt, "cross_r1_image_to_text": di,
                               "eq2_verdicts": de.eq2_verdicts},
                    "xbt_ahead": xbt_ahead,
                }),
            )?;
            println!("xbt {xt:.2}/{xi:.2} vs direct {dt:.2}/{di:.2}; xbt ahead: {xbt_ahead}");
        }
        Command::Run {
            config,
            data,
            baseline,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let corpus = match data {
                Some(d) => read_corpus_dir(&d)?,
                None => synth_generate(&cfg.synthetic)?,
            };
            let res = run_pipeline_on(&cfg, &corpus, Some(baseline.into()))?;
            create_dir(&out)?;
            write_report(&out.join("report.json"), &res.report)?;
            let logs = out.join("train.log.jsonl");
            append_log(&logs, &res.pretrain_log)?;
            append_log(&logs, &res.xbt_log)?;
            if let Some(b) = &res.baseline {
                write_report(&out.join("baseline_report.json"), &b.report)?;
                append_log(&logs, &b.log)?;
            }
            let (t, i) = cross_r1(&res.report.evaluation);
            println!(
                "cross R@1 text->image {t:.2} image->text {i:.2}; eq2 all true: {}",
                res.report.evaluation.eq2_verdicts.all_true()
            );
        }
        Command::Ablate {
            config,
            sweep,
            seeds,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let sweep: Sweep = sweep.parse()?;
            let seeds = parse_seeds(&seeds)?;
            let (runs, rows) = ablate(&cfg, &sweep, &seeds)?;
            create_dir(&out)?;
            for r in &runs {
                let name = format!("{}={}_seed{}.json", sweep.key, r.value, r.seed);
                write_report(&out.join(name), &r.report)?;
            }
            write_json(
                &out.join("summary.json"),
                &json!({"key": sweep.key, "rows": rows}),
            )?;
            let mut csv = String::from(
                "value,mean_cross_r1_text_to_image,mean_cross_r1_image_to_text,seeds\n",
            );
            for r in &rows {
                csv.push_str(&format!(
                    "{},{:.4},{:.4},{}\n",
                    r.value, r.mean_cross_r1_t2i, r.mean_cross_r1_i2t, r.seeds
                ));
            }
            write_atomic(&out.join("summary.csv"), csv.as_bytes())?;
            print!("{}={}\n{csv}", sweep.key, sweep.values.len());
        }
        Command::Continual {
            config,
            generations,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let (results, reports) = run_continual_pipeline(&cfg, generations)?;
            create_dir(&out)?;
            let logs = out.join("train.log.jsonl");
            for (res, rep) in results.iter().zip(&reports) {
                write_report(
                    &out.join(format!("stage{}_report.json", rep.stage)),
                    &rep.report,
                )?;
                Checkpoint::from_model(
                    &format!("stage{}", res.stage),
                    &cfg.train,
                    &res.model,
                    Some(&res.optimizer),
                )
                .save(&out.join(format!("stage{}.xbtc", res.stage)))?;
                append_log(&logs, &res.pretrain_log)?;
                append_log(&logs, &res.xbt_log)?;
                let (t, i) = cross_r1(&rep.report.evaluation);
                let mut line = format!(
                    "stage {}: cross R@1 text->image {t:.2} image->text {i:.2}; eq2@1 {}",
                    rep.stage,
                    rep.report.evaluation.eq2_verdicts.holds_at(1)
                );
                if let Some(prev) = &rep.previous_stage {
                    write_report(
                        &out.join(format!("stage{}_vs_prev_report.json", rep.stage)),
                        prev,
                    )?;
                    line.push_str(&format!(
                        "; vs previous stage eq2@1 {}",
                        prev.evaluation.eq2_verdicts.holds_at(1)
                    ));
                }
                println!("{line}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
