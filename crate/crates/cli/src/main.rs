use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use fbilm::bilm::{evaluate_mlm_loss, pretrain_lm, BiLm, CorruptionRates};
use fbilm::gradcheck::multimodal_grad_check;
use fbilm::harness::attention::dump_attention;
use fbilm::harness::checkpoint::{load_checkpoint, save_checkpoint, Model};
use fbilm::harness::config::RunConfig;
use fbilm::harness::data::{load_instances, DataDir, Datasets, FEATURES};
use fbilm::harness::features::load_features;
use fbilm::harness::grid::{orderings, run_grid, write_csv, GridInputs, GridSpec};
use fbilm::harness::metrics::{chunk_means, MetricsReport};
use fbilm::synth::{Split, World};
use fbilm::tasks::{evaluate, finetune, take_fraction, top_answers, AnswerVocabulary, TaskInstance, TaskKind};
use fbilm::{Error, FrozenVlm, Result, Variant, Vocabulary};

#[derive(Parser)]
#[command(name = "fbilm", version, about = "Frozen bidirectional LM with visual prompts: data, training, evaluation")]
struct Cli {
    /// Run configuration (JSON). Missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream; overrides the config.
    #[arg(long, global = true, env = "FBLM_SEED")]
    seed: Option<u64>,
    /// Where to write the metrics JSON (default: `<out_dir>/<command>-<hash>.json`).
    #[arg(long, global = true)]
    metrics: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus, caption pairs, QA splits and features.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the language model on the text corpus.
    PretrainText {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train projection, adapters and norms on caption pairs.
    TrainCrossmodal {
        #[arg(long)]
        data: PathBuf,
        /// Pretrained language-model checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Zero-shot or finetuned evaluation on a QA dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long)]
        no_video: bool,
        #[arg(long)]
        no_subtitles: bool,
        /// Drop the prompt text after the mask.
        #[arg(long)]
        no_suffix: bool,
    },
    /// Finetune projection, adapters and norms on a share of a QA split.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Write the head-averaged attention map of one instance as CSV.
    DumpAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        features: FeatureArgs,
        /// Also write a copy with every query row divided by its maximum.
        #[arg(long)]
        renormalized: bool,
    },
    /// Count trainable parameters by group.
    ParamReport {
        /// Multimodal checkpoint; without it a fresh model of the configured
        /// size is counted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        variant: Option<Variant>,
        /// Vocabulary size for the fresh model.
        #[arg(long, default_value_t = 512)]
        vocab_size: usize,
    },
    /// Finite-difference check of the multimodal gradients in f64.
    GradCheck {
        #[arg(long, default_value_t = 100)]
        probes: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Run the ablation grid and write one CSV row per cell.
    Grid {
        #[arg(long)]
        data: PathBuf,
        /// Pretrained language-model checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only the zero-shot, full-modality cells.
        #[arg(long)]
        zero_shot: bool,
    },
}

#[derive(Args)]
struct TaskArgs {
    #[arg(long)]
    task: Option<TaskKind>,
    /// QA file whose gold answers form the open-ended answer vocabulary
    /// (default: the `train` sibling of the dataset).
    #[arg(long)]
    answers: Option<PathBuf>,
    #[command(flatten)]
    features: FeatureArgs,
}

#[derive(Args)]
struct FeatureArgs {
    /// Feature file (default: `features.fbft` beside the dataset).
    #[arg(long)]
    features: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let started = Instant::now();
    let (name, mut report, code) = match cli.command {
        Command::GenData { out } => gen_data(&mut cfg, &out)?,
        Command::PretrainText { data, out, steps } => {
            if let Some(s) = steps {
                cfg.pretrain.steps = s;
            }
            pretrain_text(&mut cfg, &data, &out)?
        }
        Command::TrainCrossmodal {
            data,
            checkpoint,
            out,
            variant,
            steps,
        } => {
            if let Some(v) = variant {
                cfg.variant = v;
            }
            if let Some(s) = steps {
                cfg.crossmodal.steps = s;
            }
            train_crossmodal_cmd(&cfg, &data, &checkpoint, &out)?
        }
        Command::Eval {
            checkpoint,
            dataset,
            task,
            no_video,
            no_subtitles,
            no_suffix,
        } => {
            cfg.prompt.use_video &= !no_video;
            cfg.prompt.use_subtitles &= !no_subtitles;
            cfg.prompt.suffix &= !no_suffix;
            if let Some(t) = task.task {
                cfg.task = t;
            }
            eval_cmd(&cfg, &checkpoint, &dataset, &task)?
        }
        Command::Finetune {
            checkpoint,
            train,
            out,
            task,
            fraction,
        } => {
            if let Some(t) = task.task {
                cfg.task = t;
            }
            if let Some(f) = fraction {
                cfg.fraction = f;
            }
            cfg.validate()?;
            finetune_cmd(&cfg, &checkpoint, &train, &out, &task)?
        }
        Command::DumpAttention {
            checkpoint,
            dataset,
            index,
            layer,
            out,
            features,
            renormalized,
        } => {
            let (vlm, vocab) = load_vlm(&checkpoint, cfg.variant)?;
            let insts = load_dataset(&dataset, &features, vlm.lm_config.prompt_len)?;
            let inst = insts
                .get(index)
                .ok_or_else(|| Error::Config(format!("index {index} beyond {} instances", insts.len())))?;
            let m = dump_attention(&vlm, &vocab, inst, &cfg.prompt, layer, &out, renormalized)?;
            println!("wrote {}×{} attention map to {}", m.size(), m.size(), out.display());
            ("dump-attention", MetricsReport::new("dump-attention", cfg.hash()), ExitCode::SUCCESS)
        }
        Command::ParamReport {
            checkpoint,
            variant,
            vocab_size,
        } => {
            if let Some(v) = variant {
                cfg.variant = v;
            }
            let vlm = match checkpoint {
                Some(p) => load_vlm(&p, cfg.variant)?.0,
                None => {
                    let lm_cfg = fbilm::BiLmConfig {
                        vocab_size,
                        ..cfg.bilm.clone()
                    };
                    FrozenVlm::from_lm(BiLm::new(lm_cfg, cfg.seed)?, cfg.fusion.clone(), cfg.variant, cfg.seed)?
                }
            };
            let r = vlm.trainable_param_report();
            println!("{}", serde_json::to_string_pretty(&r)?);
            let mut m = MetricsReport::new(format!("param-report-{}", vlm.variant), cfg.hash());
            m.param_report = Some(r);
            ("param-report", m, ExitCode::SUCCESS)
        }
        Command::GradCheck { probes, tolerance } => {
            let r = multimodal_grad_check(probes, tolerance, cfg.seed)?;
            println!(
                "grad-check: {} probes ({} straddling a ReLU kink, not scored), max relative error {:.3e} (tolerance {tolerance:.0e}): {}",
                r.probes.len() - r.kinks,
                r.kinks,
                r.max_rel_error,
                if r.passed { "pass" } else { "FAIL" }
            );
            let code = if r.passed { ExitCode::SUCCESS } else { ExitCode::from(2) };
            ("grad-check", MetricsReport::new("grad-check", cfg.hash()), code)
        }
        Command::Grid {
            data,
            checkpoint,
            out,
            zero_shot,
        } => grid_cmd(&cfg, &data, &checkpoint, &out, zero_shot)?,
    };
    report.wall_clock_seconds = started.elapsed().as_secs_f64();
    let path = match cli.metrics {
        Some(p) => p,
        None => {
            std::fs::create_dir_all(&cfg.paths.out_dir)?;
            cfg.paths.out_dir.join(format!("{name}-{}.json", &report.config_hash[..12]))
        }
    };
    report.save(&path)?;
    Ok(code)
}

type Outcome = (&'static str, MetricsReport, ExitCode);

fn gen_data(cfg: &mut RunConfig, out: &Path) -> Result<Outcome> {
    cfg.world.seed = cfg.seed;
    let world = World::new(cfg.world.clone())?;
    let data = Datasets::generate(&world);
    data.save(out, &cfg.world)?;
    println!(
        "wrote {} sentences, {} pairs and {} QA files to {}",
        data.corpus.len(),
        data.pairs.len(),
        data.qa.len(),
        out.display()
    );
    Ok(("gen-data", MetricsReport::new("gen-data", cfg.hash()), ExitCode::SUCCESS))
}

fn pretrain_text(cfg: &mut RunConfig, data: &Path, out: &Path) -> Result<Outcome> {
    let dir = DataDir::open(data)?;
    let corpus = dir.corpus()?;
    let vocab = Vocabulary::build(&corpus, 1)?;
    cfg.bilm.vocab_size = vocab.len();
    let res = pretrain_lm(&corpus, &vocab, cfg.bilm.clone(), &cfg.pretrain, &cfg.adam, cfg.seed)?;
    let held = &corpus[..corpus.len().min(1000)];
    let loss = evaluate_mlm_loss(&res.model, &vocab, held, &CorruptionRates::default(), cfg.seed)?;
    println!("pretrained {} steps, held-in MLM loss {loss:.4}", res.losses.len());
    save_checkpoint(out, &Model::Text(res.model), &vocab)?;
    let mut m = MetricsReport::new("pretrain-text", cfg.hash());
    m.epoch_losses = chunk_means(&res.losses, 10);
    Ok(("pretrain-text", m, ExitCode::SUCCESS))
}

fn load_lm(path: &Path) -> Result<(BiLm, Vocabulary)> {
    match load_checkpoint(path)? {
        (Model::Text(lm), v) => Ok((lm, v)),
        (Model::Multimodal(_), _) => Err(Error::Config(format!(
            "{} is a multimodal checkpoint; expected a pretrained language model",
            path.display()
        ))),
    }
}

/// A multimodal checkpoint, or a language model wrapped with freshly
/// initialized (identity) fusion modules.
fn load_vlm(path: &Path, variant: Variant) -> Result<(FrozenVlm, Vocabulary)> {
    match load_checkpoint(path)? {
        (Model::Multimodal(m), v) => Ok((m, v)),
        (Model::Text(lm), v) => {
            let fusion = RunConfig::default().fusion;
            Ok((FrozenVlm::from_lm(lm, fusion, variant, 0)?, v))
        }
    }
}

fn train_crossmodal_cmd(cfg: &RunConfig, data: &Path, checkpoint: &Path, out: &Path) -> Result<Outcome> {
    let dir = DataDir::open(data)?;
    let feats = dir.features()?;
    let pairs = dir.pairs(&feats)?;
    let (lm, vocab) = load_lm(checkpoint)?;
    let (model, losses) = fbilm::harness::grid::crossmodal_model(cfg, &lm, &vocab, &pairs, cfg.variant)?;
    let r = model.trainable_param_report();
    println!(
        "trained {} ({} steps), final loss {:.4}, {} trainable parameters",
        cfg.variant,
        losses.len(),
        losses.last().copied().unwrap_or(f32::NAN),
        r.trainable
    );
    save_checkpoint(out, &Model::Multimodal(model), &vocab)?;
    let mut m = MetricsReport::new(format!("train-crossmodal-{}", cfg.variant), cfg.hash());
    m.epoch_losses = chunk_means(&losses, cfg.crossmodal.epochs.max(1));
    m.param_report = Some(r);
    Ok(("train-crossmodal", m, ExitCode::SUCCESS))
}

fn load_dataset(path: &Path, args: &FeatureArgs, frames: usize) -> Result<Vec<TaskInstance>> {
    let fpath = match &args.features {
        Some(p) => p.clone(),
        None => path.with_file_name(FEATURES),
    };
    load_instances(path, &load_features(&fpath, frames)?)
}

fn answer_vocab(
    args: &TaskArgs,
    dataset: &Path,
    cfg: &RunConfig,
    model: &FrozenVlm,
    vocab: &Vocabulary,
    data: &[TaskInstance],
) -> Result<AnswerVocabulary> {
    let source = match &args.answers {
        Some(p) => p.clone(),
        None => {
            let name = dataset.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            dataset.with_file_name(name.replace("test", "train"))
        }
    };
    let pool = if source.as_path() == dataset {
        data.to_vec()
    } else {
        load_dataset(&source, &args.features, model.lm_config.prompt_len)?
    };
    let mut answers = top_answers(&pool, cfg.answer_vocab_size);
    if answers.len() < 2 {
        answers = fbilm::synth::World::answer_lexicon();
    }
    AnswerVocabulary::build(&answers, model, vocab)
}

fn check_kind(data: &[TaskInstance], kind: TaskKind) -> Result<()> {
    match data.iter().find(|i| i.kind != kind) {
        Some(i) => Err(Error::Config(format!(
            "instance {} is {}, expected {}",
            i.id,
            i.kind.short_name(),
            kind.short_name()
        ))),
        None => Ok(()),
    }
}

fn eval_cmd(cfg: &RunConfig, checkpoint: &Path, dataset: &Path, args: &TaskArgs) -> Result<Outcome> {
    let (model, vocab) = load_vlm(checkpoint, cfg.variant)?;
    let data = load_dataset(dataset, &args.features, model.lm_config.prompt_len)?;
    check_kind(&data, cfg.task)?;
    let answers = answer_vocab(args, dataset, cfg, &model, &vocab, &data)?;
    let r = evaluate(&data, &model, &answers, &vocab, &cfg.prompt)?;
    println!("accuracy {:.4} ({}/{})", r.accuracy, r.correct, r.total);
    for (t, (a, n)) in &r.per_type {
        println!("  {t}: {a:.4} ({n})");
    }
    let mut m = MetricsReport::new(format!("eval-{}", cfg.task.short_name()), cfg.hash()).with_eval(&r)?;
    m.param_report = Some(model.trainable_param_report());
    Ok(("eval", m, ExitCode::SUCCESS))
}

fn finetune_cmd(cfg: &RunConfig, checkpoint: &Path, train: &Path, out: &Path, args: &TaskArgs) -> Result<Outcome> {
    let (mut model, vocab) = load_vlm(checkpoint, cfg.variant)?;
    let data = load_dataset(train, &args.features, model.lm_config.prompt_len)?;
    check_kind(&data, cfg.task)?;
    let answers = answer_vocab(args, train, cfg, &model, &vocab, &data)?;
    let subset = if cfg.fraction == 0.0 {
        Vec::new()
    } else {
        take_fraction(&data, cfg.fraction, cfg.seed)?
    };
    let losses = finetune(&mut model, &subset, &answers, &vocab, &cfg.finetune, &cfg.prompt, &cfg.adam, cfg.seed)?;
    println!("finetuned on {} of {} instances ({} steps)", subset.len(), data.len(), losses.len());
    save_checkpoint(out, &Model::Multimodal(model), &vocab)?;
    let mut m = MetricsReport::new(format!("finetune-{}-{}", cfg.task.short_name(), cfg.fraction), cfg.hash());
    m.epoch_losses = chunk_means(&losses, cfg.finetune.epochs.max(1));
    Ok(("finetune", m, ExitCode::SUCCESS))
}

fn grid_cmd(cfg: &RunConfig, data: &Path, checkpoint: &Path, out: &Path, zero_shot: bool) -> Result<Outcome> {
    let dir = DataDir::open(data)?;
    let feats = dir.features()?;
    let pairs = dir.pairs(&feats)?;
    let train = dir.qa(cfg.task, Split::Train, &feats)?;
    let test = dir.qa(cfg.task, Split::Test, &feats)?;
    let (lm, vocab) = load_lm(checkpoint)?;
    let spec = if zero_shot { GridSpec::zero_shot() } else { GridSpec::default() };
    let rows = run_grid(
        cfg,
        &spec,
        &GridInputs {
            lm: &lm,
            vocab: &vocab,
            pairs: &pairs,
            train: &train,
            test: &test,
        },
    );
    write_csv(&rows, out)?;
    let failed = rows.iter().filter(|r| !r.ok()).count();
    println!("wrote {} grid rows to {} ({failed} failed)", rows.len(), out.display());
    let floor = World::new(dir.world.clone())?.marginal_floor(cfg.task);
    for o in orderings(&rows, floor) {
        println!("  [{}] {}: {}", if o.holds { "holds" } else { "fails" }, o.name, o.detail);
    }
    let code = if failed > 0 { ExitCode::from(2) } else { ExitCode::SUCCESS };
    Ok(("grid", MetricsReport::new("grid", cfg.hash()), code))
}
