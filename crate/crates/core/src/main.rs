//! Command-line surface: corpus generation, co-occurrence table export,
//! confounder pretraining, training, evaluation, ablations and bias
//! analysis.
//!
//! Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use squidnet::harness::eval::{analyze_bias, evaluate, run_ablation};
use squidnet::harness::metrics::Task;
use squidnet::harness::train::{pretrain_bank, train, write_decision_log, write_trace};
use squidnet::harness::{BankArtifact, Checkpoint, HarnessError, TrainConfig, Variant};
use squidnet::model::ModelMode;
use squidnet::squid::DecisionRule;
use squidnet::synthcorpus::{
    generate_corpus, generate_corpus_unsplit, read_corpus, split_corpus, write_corpus, Split,
    WorldConfig, WorldSpec,
};
use squidnet::textproc::{build_cooc_table, CoocCountMode};

#[derive(Parser)]
#[command(name = "squidnet", version, about = "Selective query-guided debiasing for video corpus moment retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic biased corpus.
    GenCorpus(GenCorpusArgs),
    /// Build and export the object-predicate co-occurrence table.
    BuildCooc(BuildCoocArgs),
    /// Pretrain the learnable confounder bank and freeze it.
    PretrainConfounder(PretrainArgs),
    /// Train the naive and biased models with selective debiasing.
    Train(TrainArgs),
    /// Evaluate a checkpoint under a retrieval protocol.
    Eval(EvalArgs),
    /// Train and compare ablation variants over shared seeds.
    Ablate(AblateArgs),
    /// Correlate per-query moment quality of a biased vs a naive model.
    AnalyzeBias(AnalyzeBiasArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    /// Output corpus file (binary; a .queries.jsonl companion is written
    /// next to it).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    objects: Option<usize>,
    #[arg(long)]
    predicates: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    moments_per_video: Option<usize>,
    #[arg(long)]
    d_in: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    congruent: Option<usize>,
    #[arg(long)]
    adverse: Option<usize>,
    /// Disable the planted distractor moment in adverse test videos.
    #[arg(long)]
    no_adverse_distractor: bool,
    /// Generate one unlabeled pool and split it by fractions instead of
    /// generating per-split quotas.
    #[arg(long, value_name = "TRAIN,CONGRUENT,ADVERSE")]
    fractions: Option<String>,
    /// Pool size for --fractions mode.
    #[arg(long)]
    total: Option<usize>,
    /// Also write the lexicon as token<TAB>class lines.
    #[arg(long)]
    lexicon_out: Option<PathBuf>,
}

#[derive(Args)]
struct BuildCoocArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Output CSV (header row = predicates, first column = objects).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    /// Count raw token frequency instead of per-query presence.
    #[arg(long)]
    token_frequency: bool,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    lambda_debias: Option<f64>,
    /// Decision rule: cooc_table | confounder | all_positive | all_negative.
    #[arg(long)]
    rule: Option<String>,
    #[arg(long)]
    cooc_k: Option<usize>,
    #[arg(long)]
    top_n: Option<usize>,
    #[arg(long)]
    l_max: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig, HarnessError> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::from_toml_file(path)?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.d {
            cfg.d = v;
        }
        if let Some(v) = self.heads {
            cfg.heads = v;
        }
        if let Some(v) = self.lambda_debias {
            cfg.lambda_debias = v;
        }
        if let Some(v) = &self.rule {
            cfg.rule = match v.to_lowercase().replace('-', "_").as_str() {
                "cooc_table" => DecisionRule::CoocTable,
                "confounder" => DecisionRule::Confounder,
                "all_positive" => DecisionRule::AllPositive,
                "all_negative" => DecisionRule::AllNegative,
                other => {
                    return Err(HarnessError::Config(format!("unknown rule {other:?}")))
                }
            };
        }
        if let Some(v) = self.cooc_k {
            cfg.cooc_k = v;
        }
        if let Some(v) = self.top_n {
            cfg.top_n = v;
        }
        if let Some(v) = self.l_max {
            cfg.l_max = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Output bank artifact.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    pretrain_lr: Option<f64>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Pretrained bank artifact (required for the confounder rule).
    #[arg(long)]
    bank: Option<PathBuf>,
    /// Ablation variant; defaults to the full model with the configured
    /// rule.
    #[arg(long)]
    variant: Option<String>,
    /// Resume from a checkpoint file.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// vr | svmr | vcmr
    #[arg(long, default_value = "vcmr")]
    task: String,
    #[arg(long)]
    out_dir: PathBuf,
    /// Comma-separated splits to evaluate.
    #[arg(long, default_value = "test-congruent,test-adverse")]
    splits: String,
    /// Evaluate the biased model instead of the naive one.
    #[arg(long)]
    biased: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Comma-separated variants (default: all six).
    #[arg(long)]
    variants: Option<String>,
    /// Comma-separated seeds (default: 11,12,13,14,15).
    #[arg(long, default_value = "11,12,13,14,15")]
    seeds: String,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct AnalyzeBiasArgs {
    /// Checkpoint providing the naive model.
    #[arg(long)]
    naive: PathBuf,
    /// Checkpoint providing the biased model.
    #[arg(long)]
    biased: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value = "test-congruent,test-adverse")]
    splits: String,
    #[arg(long)]
    l_max: Option<usize>,
}

fn parse_splits(s: &str) -> Result<Vec<Split>, HarnessError> {
    s.split(',')
        .map(|part| match part.trim() {
            "train" => Ok(Split::Train),
            "test-congruent" => Ok(Split::TestCongruent),
            "test-adverse" => Ok(Split::TestAdverse),
            "unsplit" => Ok(Split::Unsplit),
            other => Err(HarnessError::Config(format!("unknown split {other:?}"))),
        })
        .collect()
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, HarnessError> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<u64>()
                .map_err(|_| HarnessError::Config(format!("bad seed {p:?}")))
        })
        .collect()
}

fn ensure_dir(path: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(path)?;
    Ok(())
}

fn run() -> Result<(), HarnessError> {
    match Cli::parse().command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::BuildCooc(a) => build_cooc(a),
        Command::PretrainConfounder(a) => pretrain(a),
        Command::Train(a) => do_train(a),
        Command::Eval(a) => do_eval(a),
        Command::Ablate(a) => do_ablate(a),
        Command::AnalyzeBias(a) => do_analyze_bias(a),
    }
}

fn gen_corpus(a: GenCorpusArgs) -> Result<(), HarnessError> {
    let mut cfg = WorldConfig::default();
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.beta {
        cfg.beta = v;
    }
    if let Some(v) = a.objects {
        cfg.n_objects = v;
    }
    if let Some(v) = a.predicates {
        cfg.n_predicates = v;
    }
    if let Some(v) = a.frames {
        cfg.frames_per_video = v;
    }
    if let Some(v) = a.moments_per_video {
        cfg.moments_per_video = v;
    }
    if let Some(v) = a.d_in {
        cfg.d_in = v;
    }
    if let Some(v) = a.noise {
        cfg.noise_scale = v;
    }
    if let Some(v) = a.train {
        cfg.n_train = v;
    }
    if let Some(v) = a.congruent {
        cfg.n_test_congruent = v;
    }
    if let Some(v) = a.adverse {
        cfg.n_test_adverse = v;
    }
    if a.no_adverse_distractor {
        cfg.adverse_distractor = false;
    }
    let spec = WorldSpec::build(cfg)?;

    let corpus = match &a.fractions {
        None => generate_corpus(&spec)?,
        Some(f) => {
            let parts: Vec<f64> = f
                .split(',')
                .map(|p| p.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| HarnessError::Config(format!("bad fractions {f:?}")))?;
            if parts.len() != 3 {
                return Err(HarnessError::Config("fractions need 3 comma-separated values".into()));
            }
            let total = a.total.ok_or_else(|| {
                HarnessError::Config("--fractions mode needs --total".into())
            })?;
            let mut corpus = generate_corpus_unsplit(&spec, total)?;
            split_corpus(&mut corpus, (parts[0], parts[1], parts[2]))?;
            corpus
        }
    };
    write_corpus(&corpus, &a.out)?;
    if let Some(lex_path) = &a.lexicon_out {
        corpus.lexicon.write_file(lex_path)?;
    }
    println!(
        "wrote {} videos / {} queries ({} train, {} congruent, {} adverse) to {}",
        corpus.videos.len(),
        corpus.queries.len(),
        corpus.queries_in(Split::Train).count(),
        corpus.queries_in(Split::TestCongruent).count(),
        corpus.queries_in(Split::TestAdverse).count(),
        a.out.display()
    );
    Ok(())
}

fn build_cooc(a: BuildCoocArgs) -> Result<(), HarnessError> {
    let corpus = read_corpus(&a.corpus)?;
    let views: Vec<_> = corpus.queries_in(Split::Train).map(|q| corpus.query_views(q)).collect();
    let k = a.k.unwrap_or(corpus.meta.config.n_objects);
    let mode = if a.token_frequency {
        CoocCountMode::TokenFrequency
    } else {
        CoocCountMode::QueryPresence
    };
    let table = build_cooc_table(&views, &corpus.lexicon, k, mode)?;
    if table.shrunk() {
        eprintln!(
            "warning: requested K={k} but found {} objects / {} predicates",
            table.objects.len(),
            table.predicates.len()
        );
    }
    table.write_csv(&corpus.lexicon, &a.out)?;
    println!(
        "wrote {}x{} co-occurrence table to {}",
        table.objects.len(),
        table.predicates.len(),
        a.out.display()
    );
    Ok(())
}

fn pretrain(a: PretrainArgs) -> Result<(), HarnessError> {
    let mut cfg = a.config.resolve()?;
    if let Some(v) = a.pretrain_epochs {
        cfg.confounder_epochs = v;
    }
    if let Some(v) = a.pretrain_lr {
        cfg.confounder_lr = v;
    }
    cfg.validate()?;
    let corpus = read_corpus(&a.corpus)?;
    let (artifact, report) = pretrain_bank(&cfg, &corpus)?;
    artifact.save(&a.out)?;
    let first = report.per_epoch_loss.first().copied().unwrap_or(f64::NAN);
    let last = report.per_epoch_loss.last().copied().unwrap_or(f64::NAN);
    println!(
        "pretrained {}x{} confounder bank over {} epochs: mean loss {first:.6} -> {last:.6}; saved to {}",
        artifact.bank.k(),
        artifact.bank.d(),
        report.per_epoch_loss.len().saturating_sub(1),
        a.out.display()
    );
    Ok(())
}

fn variant_for(cfg: &TrainConfig, requested: Option<&str>) -> Result<Variant, HarnessError> {
    match requested {
        Some(name) => name.parse(),
        None => Ok(match cfg.rule {
            DecisionRule::Confounder => Variant::FullConfounder,
            DecisionRule::CoocTable => Variant::FullCooc,
            DecisionRule::AllPositive => Variant::AllPositive,
            DecisionRule::AllNegative => Variant::AllNegative,
        }),
    }
}

fn do_train(a: TrainArgs) -> Result<(), HarnessError> {
    let cfg = a.config.resolve()?;
    let corpus = read_corpus(&a.corpus)?;
    let variant = variant_for(&cfg, a.variant.as_deref())?;
    let bank = match &a.bank {
        Some(path) => Some(BankArtifact::load(path)?),
        None => None,
    };
    if matches!(variant, Variant::FullConfounder | Variant::NoCmp) && bank.is_none() {
        return Err(HarnessError::Config(
            "the confounder rule needs --bank (run pretrain-confounder first)".into(),
        ));
    }
    let resume = match &a.resume {
        Some(path) => Some(Checkpoint::load(path)?),
        None => None,
    };
    ensure_dir(&a.out_dir)?;
    let outcome = train(&cfg, &corpus, variant, bank.as_ref(), resume)?;

    let ckpt_path = a.out_dir.join("checkpoint.sqck");
    outcome.checkpoint.save(&ckpt_path)?;
    write_trace(&outcome.trace, &a.out_dir.join("train_trace.jsonl"))?;
    write_decision_log(&outcome.decisions, &a.out_dir.join("decisions.jsonl"))?;

    let last = outcome.trace.last();
    println!(
        "trained {} for {} epochs: loss_naive {:.4}, loss_biased {:.4}, loss_debias {:.4}, val R@1 {}",
        variant.name(),
        cfg.epochs,
        last.map(|t| t.loss_naive).unwrap_or(f64::NAN),
        last.map(|t| t.loss_biased).unwrap_or(f64::NAN),
        last.map(|t| t.loss_debias).unwrap_or(f64::NAN),
        last.and_then(|t| t.val_r1).map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
    );
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

fn do_eval(a: EvalArgs) -> Result<(), HarnessError> {
    let corpus = read_corpus(&a.corpus)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let task: Task = a.task.parse()?;
    let splits = parse_splits(&a.splits)?;
    let mode = if a.biased { ModelMode::Biased } else { ModelMode::Naive };
    let model = ckpt.model(mode)?;
    ensure_dir(&a.out_dir)?;
    let report = evaluate(
        &model,
        &corpus,
        task,
        &splits,
        ckpt.config.l_max,
        &[1, 5, 10, 100],
        &[0.3, 0.5, 0.7],
    )?;
    let csv = a.out_dir.join(format!("eval_{task}.csv"));
    let jsonl = a.out_dir.join(format!("eval_{task}.queries.jsonl"));
    report.write_csv(&csv)?;
    report.write_jsonl(&jsonl)?;
    for r in &report.recalls {
        if r.split.is_none() {
            println!("{} R@{} tIoU>={}: {:.4}", task, r.k, r.threshold, r.value);
        }
    }
    println!("reports: {} and {}", csv.display(), jsonl.display());
    Ok(())
}

fn do_ablate(a: AblateArgs) -> Result<(), HarnessError> {
    let cfg = a.config.resolve()?;
    let corpus = read_corpus(&a.corpus)?;
    let variants: Vec<Variant> = match &a.variants {
        None => Variant::ALL.to_vec(),
        Some(s) => s
            .split(',')
            .map(|p| p.trim().parse::<Variant>())
            .collect::<Result<_, _>>()?,
    };
    let seeds = parse_seeds(&a.seeds)?;
    ensure_dir(&a.out_dir)?;
    let report = run_ablation(&cfg, &corpus, &variants, &seeds)?;
    report.write_csv(&a.out_dir.join("ablation.csv"))?;
    print!("{}", report.summary_table(&seeds));
    println!("per-run rows: {}", a.out_dir.join("ablation.csv").display());
    Ok(())
}

fn do_analyze_bias(a: AnalyzeBiasArgs) -> Result<(), HarnessError> {
    let corpus = read_corpus(&a.corpus)?;
    let naive_ckpt = Checkpoint::load(&a.naive)?;
    let biased_ckpt = Checkpoint::load(&a.biased)?;
    let splits = parse_splits(&a.splits)?;
    let l_max = a.l_max.unwrap_or(naive_ckpt.config.l_max);
    let naive = naive_ckpt.model(ModelMode::Naive)?;
    let biased = biased_ckpt.model(ModelMode::Biased)?;
    ensure_dir(&a.out_dir)?;
    let report = analyze_bias(&naive, &biased, &corpus, &splits, l_max)?;
    report.write_csv(&a.out_dir.join("bias_tiou.csv"))?;
    report.write_histogram_json(&a.out_dir.join("bias_hist.json"))?;
    match report.pearson {
        Some(r) => println!("pearson correlation over {} queries: {r:.4}", report.rows.len()),
        None => println!(
            "pearson correlation undefined (degenerate variance) over {} queries",
            report.rows.len()
        ),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
