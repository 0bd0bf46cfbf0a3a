//! `ipl-lab`: synthetic-task iterative pseudo-labeling from the command line.
//! Every run writes its fully-resolved config next to its outputs, and all
//! outputs are deterministic functions of (config, seeds), independent of the
//! worker-thread count.

mod config_io;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use ipl_core::am::load_checkpoint;
use ipl_core::config::RunConfig;
use ipl_core::corpus::{read_dataset, synth_dataset, write_dataset_with_config, Dataset, Source};
use ipl_core::decoder::{decode_batch, tune_decode_params, Lexicon};
use ipl_core::eval::{
    evaluate, harness_ablation, harness_finetune_vs_scratch, harness_lm_corpora, harness_rounds,
    harness_lm_weight_sweep, harness_subset, train_task_lm, Csv, DecodeSpec, HiddenRefs,
    RefSource,
};
use ipl_core::ipl::{run_ipl, run_scratch_rounds, IplResources};
use ipl_core::lm::{perplexity, read_arpa, train_ngram, write_arpa, NGramLM};
use ipl_core::corpus::TextCorpus;

#[derive(Parser, Debug)]
#[command(
    name = "ipl-lab",
    about = "Iterative pseudo-labeling on a synthetic CTC speech task",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON config merged over built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. --set ipl.rounds=4 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker threads for decoding and evaluation (fallback: IPL_LAB_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Labeled,
    Unlabeled,
    Dev,
    Test,
}

impl SplitArg {
    fn source(self) -> Source {
        match self {
            SplitArg::Labeled => Source::Labeled,
            SplitArg::Unlabeled => Source::Unlabeled,
            SplitArg::Dev => Source::Dev,
            SplitArg::Test => Source::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EvalMode {
    Greedy,
    Beam,
    BeamRescore,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum HarnessName {
    Ablation,
    Subset,
    FinetuneVsScratch,
    Rounds,
    LmCorpora,
    LmWeightSweep,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset and write it to --out.
    SynthData,
    /// Train an n-gram LM (from --text, or from the task's word chain) and
    /// write ARPA to --out/lm.arpa.
    LmTrain {
        /// UTF-8 text, one pre-normalized sentence per line.
        #[arg(long)]
        text: Option<PathBuf>,
    },
    /// Perplexity of an ARPA LM on a text file.
    LmPpl {
        #[arg(long)]
        lm: PathBuf,
        #[arg(long)]
        text: PathBuf,
    },
    /// Beam-decode a split; emits decode.tsv as `<id>\t<score>\t<words>`.
    Decode {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        lm: PathBuf,
        #[arg(long)]
        rescore_lm: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Random-search decode-weight tuning on the dev split; emits tune.csv.
    TuneDecode {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        lm: PathBuf,
    },
    /// Supervised training on the labeled split only.
    TrainSupervised {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Full iterative pseudo-labeling run.
    IplRun {
        #[arg(long)]
        data: Option<PathBuf>,
        /// ARPA LM for decoding; trained from the task's word chain if absent.
        #[arg(long)]
        lm: Option<PathBuf>,
        #[arg(long)]
        rescore_lm: Option<PathBuf>,
    },
    /// From-scratch pseudo-labeling rounds baseline.
    ScratchRounds {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        lm: Option<PathBuf>,
        #[arg(long)]
        rescore_lm: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a split; emits eval.tsv.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "greedy")]
        mode: EvalMode,
        #[arg(long)]
        lm: Option<PathBuf>,
        #[arg(long)]
        rescore_lm: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "dev")]
        split: SplitArg,
    },
    /// Experiment harness; writes one CSV per experiment.
    Harness {
        #[arg(value_enum)]
        name: HarnessName,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let help = config_io::config_key_help();
    let cmd = Cli::command().after_long_help(help.clone()).after_help(help);
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };

    let config = match config_io::load_config(cli.config.as_deref(), &cli.sets) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e:#}");
            return ExitCode::from(2);
        }
    };

    let threads = cli
        .threads
        .or_else(|| {
            std::env::var("IPL_LAB_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool");

    match pool.install(|| dispatch(&cli, &config)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if is_config_error(&e) {
                eprintln!("config error: {e:#}");
                ExitCode::from(2)
            } else {
                eprintln!("error: {e:#}");
                ExitCode::FAILURE
            }
        }
    }
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|cause| {
        matches!(
            cause.downcast_ref::<ipl_core::Error>(),
            Some(ipl_core::Error::InvalidConfig { .. })
        )
    })
}

fn prepare_out(out: &Path, config: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.json"), config.to_json_pretty())
        .with_context(|| "writing config echo")?;
    Ok(())
}

fn load_or_synth(config: &RunConfig, data: Option<&Path>) -> Result<(Dataset, Option<HiddenRefs>)> {
    match data {
        Some(dir) => {
            let dataset = read_dataset(dir)?;
            let hidden = HiddenRefs::load(dir).ok();
            Ok((dataset, hidden))
        }
        None => {
            let bundle = synth_dataset(&config.synth, config.seeds.data)?;
            Ok((bundle.dataset, Some(bundle.hidden_refs)))
        }
    }
}

fn load_or_train_lm(
    config: &RunConfig,
    path: Option<&Path>,
    order: usize,
    out: &Path,
    file_name: &str,
) -> Result<NGramLM> {
    match path {
        Some(p) => Ok(read_arpa(p)?),
        None => {
            let lm = train_task_lm(config, order)?;
            write_arpa(&lm, &out.join(file_name))?;
            Ok(lm)
        }
    }
}

fn read_text_corpus(path: &Path) -> Result<TextCorpus> {
    let raw = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(TextCorpus::new(
        raw.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                (
                    format!("line-{i:05}"),
                    l.split_whitespace().map(str::to_string).collect(),
                )
            })
            .collect(),
    ))
}

fn dispatch(cli: &Cli, config: &RunConfig) -> Result<()> {
    let out = &cli.out;
    match &cli.command {
        Command::SynthData => {
            prepare_out(out, config)?;
            let bundle = synth_dataset(&config.synth, config.seeds.data)?;
            write_dataset_with_config(
                &bundle.dataset,
                Some(&bundle.hidden_refs),
                out,
                Some(&config.synth),
            )?;
            println!(
                "wrote dataset to {}: {} labeled / {} unlabeled / {} dev / {} test, vocab {}",
                out.display(),
                bundle.dataset.labeled.len(),
                bundle.dataset.unlabeled.len(),
                bundle.dataset.dev.len(),
                bundle.dataset.test.len(),
                bundle.dataset.vocabulary.words().len()
            );
            Ok(())
        }
        Command::LmTrain { text } => {
            prepare_out(out, config)?;
            let corpus = match text {
                Some(path) => read_text_corpus(path)?,
                None => ipl_core::corpus::synth_text(
                    &config.synth,
                    config.seeds.data,
                    config.lm.corpus_sentences,
                    config.synth.words_per_utterance,
                    config.seeds.text,
                )?,
            };
            let lm = train_ngram(&corpus, config.lm.order, config.lm.vocab_cap)?;
            let path = out.join("lm.arpa");
            write_arpa(&lm, &path)?;
            println!(
                "trained {}-gram on {} sentences ({} words), vocab {} -> {}",
                config.lm.order,
                corpus.documents.len(),
                corpus.word_count,
                lm.words().len(),
                path.display()
            );
            Ok(())
        }
        Command::LmPpl { lm, text } => {
            prepare_out(out, config)?;
            let lm = read_arpa(lm)?;
            let corpus = read_text_corpus(text)?;
            let sentences: Vec<Vec<String>> =
                corpus.sentences().map(|s| s.to_vec()).collect();
            let ppl = perplexity(&lm, &sentences);
            println!("perplexity {ppl}");
            fs::write(out.join("ppl.txt"), format!("{ppl}\n"))
                .with_context(|| "writing ppl.txt")?;
            Ok(())
        }
        Command::Decode {
            data,
            ckpt,
            lm,
            rescore_lm,
            split,
        } => {
            prepare_out(out, config)?;
            let (dataset, _) = load_or_synth(config, Some(data))?;
            let (model, _) = load_checkpoint(ckpt)?;
            let lm = read_arpa(lm)?;
            let rescore = rescore_lm.as_deref().map(read_arpa).transpose()?;
            let lexicon = Lexicon::from_vocabulary(&dataset.vocabulary);
            let params = config.decode.params();
            let outcomes = decode_batch(
                &model,
                dataset.split(split.source()),
                &lexicon,
                &lm,
                &params,
                rescore
                    .as_ref()
                    .map(|lm2| (lm2, params.lm_weight, params.word_score)),
            )?;
            let mut tsv = String::new();
            for o in &outcomes {
                match &o.hypothesis {
                    Some(h) => tsv.push_str(&format!(
                        "{}\t{}\t{}\n",
                        o.utterance_id,
                        h.total,
                        h.words.join(" ")
                    )),
                    None => tsv.push_str(&format!("{}\t-inf\t\n", o.utterance_id)),
                }
            }
            fs::write(out.join("decode.tsv"), tsv).with_context(|| "writing decode.tsv")?;
            println!("decoded {} utterances -> {}", outcomes.len(), out.join("decode.tsv").display());
            Ok(())
        }
        Command::TuneDecode { data, ckpt, lm } => {
            prepare_out(out, config)?;
            let (dataset, _) = load_or_synth(config, Some(data))?;
            let (model, _) = load_checkpoint(ckpt)?;
            let lm = read_arpa(lm)?;
            let lexicon = Lexicon::from_vocabulary(&dataset.vocabulary);
            let budget = config.ipl.tune_budget.max(1);
            let outcome = tune_decode_params(
                &model,
                &lm,
                &lexicon,
                &dataset.dev,
                &config.decode.params(),
                budget,
                &config.decode.tune_ranges,
                config.seeds.run,
            )?;
            let mut csv = String::from("alpha,beta,dev_wer\n");
            for row in &outcome.table {
                csv.push_str(&format!("{},{},{}\n", row.lm_weight, row.word_score, row.dev_wer));
            }
            fs::write(out.join("tune.csv"), csv).with_context(|| "writing tune.csv")?;
            println!(
                "best: lm_weight {} word_score {} -> {}",
                outcome.params.lm_weight,
                outcome.params.word_score,
                out.join("tune.csv").display()
            );
            Ok(())
        }
        Command::TrainSupervised { data } => {
            prepare_out(out, config)?;
            let (dataset, _) = load_or_synth(config, data.as_deref())?;
            let mut cfg = config.clone();
            cfg.ipl.rounds = 0;
            cfg.ipl.use_lm_decoding = false;
            cfg.ipl.use_rescoring = false;
            let lexicon = Lexicon::from_vocabulary(&dataset.vocabulary);
            let res = IplResources {
                lexicon: &lexicon,
                lm: None,
                rescore_lm: None,
            };
            let (_, _, record) = run_ipl(&dataset, &cfg, res, Some(out))?;
            println!("final greedy dev WER {}", record.final_dev_wer_greedy);
            Ok(())
        }
        Command::IplRun {
            data,
            lm,
            rescore_lm,
        } => {
            prepare_out(out, config)?;
            let (dataset, _) = load_or_synth(config, data.as_deref())?;
            let lexicon = Lexicon::from_vocabulary(&dataset.vocabulary);
            let lm = if config.ipl.use_lm_decoding {
                Some(load_or_train_lm(config, lm.as_deref(), config.lm.order, out, "lm.arpa")?)
            } else {
                None
            };
            let rescore = if config.ipl.use_rescoring {
                Some(load_or_train_lm(
                    config,
                    rescore_lm.as_deref(),
                    config.lm.rescore_order,
                    out,
                    "rescore_lm.arpa",
                )?)
            } else {
                None
            };
            let res = IplResources {
                lexicon: &lexicon,
                lm: lm.as_ref(),
                rescore_lm: rescore.as_ref(),
            };
            let (_, _, record) = run_ipl(&dataset, config, res, Some(out))?;
            println!("final greedy dev WER {}", record.final_dev_wer_greedy);
            Ok(())
        }
        Command::ScratchRounds {
            data,
            lm,
            rescore_lm,
        } => {
            prepare_out(out, config)?;
            let (dataset, _) = load_or_synth(config, data.as_deref())?;
            let lexicon = Lexicon::from_vocabulary(&dataset.vocabulary);
            let lm = if config.ipl.use_lm_decoding {
                Some(load_or_train_lm(config, lm.as_deref(), config.lm.order, out, "lm.arpa")?)
            } else {
                None
            };
            let rescore = if config.ipl.use_rescoring {
                Some(load_or_train_lm(
                    config,
                    rescore_lm.as_deref(),
                    config.lm.rescore_order,
                    out,
                    "rescore_lm.arpa",
                )?)
            } else {
                None
            };
            let res = IplResources {
                lexicon: &lexicon,
                lm: lm.as_ref(),
                rescore_lm: rescore.as_ref(),
            };
            let (_, _, record) = run_scratch_rounds(&dataset, config, res, Some(out))?;
            println!("final greedy dev WER {}", record.final_dev_wer_greedy);
            Ok(())
        }
        Command::Eval {
            data,
            ckpt,
            mode,
            lm,
            rescore_lm,
            split,
        } => {
            prepare_out(out, config)?;
            let (dataset, hidden) = load_or_synth(config, Some(data))?;
            let (model, _) = load_checkpoint(ckpt)?;
            let lexicon = Lexicon::from_vocabulary(&dataset.vocabulary);
            let params = config.decode.params();
            let lm = lm.as_deref().map(read_arpa).transpose()?;
            let rescore = rescore_lm.as_deref().map(read_arpa).transpose()?;
            let spec = match mode {
                EvalMode::Greedy => DecodeSpec::Greedy,
                EvalMode::Beam => DecodeSpec::Beam {
                    lm: lm.as_ref().ok_or_else(|| anyhow!("--mode beam needs --lm"))?,
                    params,
                },
                EvalMode::BeamRescore => DecodeSpec::BeamRescore {
                    lm: lm.as_ref().ok_or_else(|| anyhow!("--mode beam-rescore needs --lm"))?,
                    params,
                    rescore_lm: rescore
                        .as_ref()
                        .ok_or_else(|| anyhow!("--mode beam-rescore needs --rescore-lm"))?,
                    rescore_weight: params.lm_weight,
                    rescore_word_score: params.word_score,
                },
            };
            let refs = match split {
                SplitArg::Unlabeled => RefSource::Hidden(
                    hidden
                        .as_ref()
                        .ok_or_else(|| anyhow!("no hidden_refs.tsv next to the dataset"))?,
                ),
                _ => RefSource::Transcripts,
            };
            let report = evaluate(&model, dataset.split(split.source()), &lexicon, &spec, &refs)?;
            fs::write(out.join("eval.tsv"), report.to_tsv()).with_context(|| "writing eval.tsv")?;
            let agg = report.aggregate;
            println!(
                "WER {} (S={} D={} I={} over {} reference words)",
                agg.wer, agg.substitutions, agg.deletions, agg.insertions, agg.ref_words
            );
            Ok(())
        }
        Command::Harness { name, data } => {
            prepare_out(out, config)?;
            let (dataset, hidden) = load_or_synth(config, data.as_deref())?;
            let run = |csv: Csv| -> Result<()> {
                let path = csv.write_to(out)?;
                println!("wrote {} ({} rows)", path.display(), csv.rows.len());
                Ok(())
            };
            let need_hidden = || {
                hidden
                    .as_ref()
                    .ok_or_else(|| anyhow!("harness lm-corpora needs hidden references"))
            };
            match name {
                HarnessName::Ablation => run(harness_ablation(&dataset, config)?),
                HarnessName::Subset => run(harness_subset(&dataset, config)?),
                HarnessName::FinetuneVsScratch => {
                    run(harness_finetune_vs_scratch(&dataset, config)?)
                }
                HarnessName::Rounds => run(harness_rounds(&dataset, config)?),
                HarnessName::LmCorpora => {
                    run(harness_lm_corpora(&dataset, need_hidden()?, config)?)
                }
                HarnessName::LmWeightSweep => run(harness_lm_weight_sweep(&dataset, config)?),
                HarnessName::All => {
                    run(harness_ablation(&dataset, config)?)?;
                    run(harness_subset(&dataset, config)?)?;
                    run(harness_finetune_vs_scratch(&dataset, config)?)?;
                    run(harness_rounds(&dataset, config)?)?;
                    run(harness_lm_corpora(&dataset, need_hidden()?, config)?)?;
                    run(harness_lm_weight_sweep(&dataset, config)?)
                }
            }
        }
    }
}
