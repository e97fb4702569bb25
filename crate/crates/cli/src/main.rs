use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use catt_core::checkpoint::Checkpoint;
use catt_core::config::ContextEncoderKind;
use catt_core::data::{generate_corpus, make_splits, Corpus, CorpusSpec};
use catt_core::eval::{self, DecodeSettings, EvalReport};
use catt_core::train::{self, loss_csv, ExperimentConfig};
use catt_core::{CattModel, Variant};

#[derive(Parser)]
#[command(name = "catt", version, about = "Train and evaluate context-aware transformer transducers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus directory.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a corpus.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// Overrides the variant of the config.
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Decode dev and test and score the four cells.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        decode: DecodeFlags,
        /// Report to compute WERR against.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Export final-block cross-attention of one utterance as CSV.
    AttentionDump {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        utterance: usize,
    },
    /// WER and WERR for several context batch sizes.
    SweepK {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: Input,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
        ks: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        /// Baseline report (context-free model) for the WERR column.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// WER and WERR over shallow-fusion weights.
    SweepFusion {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: Input,
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,2,4")]
        lambdas: Vec<f64>,
        #[arg(long, default_value_t = 4)]
        beam: usize,
    },
}

#[derive(Args)]
struct Common {
    /// JSON config: a corpus spec for gen-data, an experiment config for train.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Input {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Args)]
struct DecodeFlags {
    #[arg(long, default_value_t = 1)]
    beam: usize,
    /// Shallow-fusion weight; enables the contextual trie.
    #[arg(long)]
    fusion: Option<f64>,
    /// Resample context batches of this size instead of the stored ones.
    #[arg(long)]
    k: Option<usize>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load(input: &Input) -> Result<(Checkpoint, CattModel, Corpus)> {
    let ck = Checkpoint::load(&input.checkpoint).with_context(|| format!("loading {}", input.checkpoint.display()))?;
    let model = ck.to_model()?;
    let corpus = Corpus::load(&input.corpus).with_context(|| format!("loading corpus {}", input.corpus.display()))?;
    eval::check_compatible(&model, &ck.tokenizer, &corpus)?;
    Ok((ck, model, corpus))
}

fn gen_data(common: &Common) -> Result<()> {
    let spec: CorpusSpec = match &common.config {
        Some(p) => read_json(p)?,
        None => CorpusSpec::default(),
    };
    let corpus = generate_corpus(&spec, common.seed)?;
    corpus.save(&common.out)?;
    let splits = make_splits(&corpus)?;
    println!(
        "wrote {} utterances ({} train) to {}",
        corpus.utterances.len(),
        splits.train.len(),
        common.out.display()
    );
    Ok(())
}

fn train_cmd(common: &Common, corpus_dir: &Path, variant: Option<Variant>) -> Result<()> {
    let mut exp: ExperimentConfig = match &common.config {
        Some(p) => read_json(p)?,
        None => ExperimentConfig::default(),
    };
    exp.seed = common.seed;
    if let Some(v) = variant {
        exp.model.variant = v;
    }
    let corpus = Corpus::load(corpus_dir).with_context(|| format!("loading corpus {}", corpus_dir.display()))?;
    exp.model.vocab_size = corpus.tokenizer.vocab_size();
    exp.model.input_dim = corpus.utterances.first().map_or(exp.model.input_dim, |u| u.frames.cols());
    let frozen = (exp.model.variant.uses_context() && exp.model.context.kind == ContextEncoderKind::PretrainedFrozen).then(|| {
        exp.model.context.d_c = corpus.context_vectors.dim();
        corpus.context_vectors.clone()
    });
    exp.validate()?;
    let splits = make_splits(&corpus)?;
    let mut model = CattModel::new(exp.model.clone(), exp.seed, frozen)?;
    let log = train::train(&mut model, &splits.train, &corpus.catalog, &exp.train, exp.seed, |s| {
        if s.step % 100 == 0 {
            eprintln!("step {} epoch {} loss {:.4} lr {:.2e} |g| {:.3}", s.step, s.epoch, s.loss, s.lr, s.grad_norm);
        }
    })?;
    Checkpoint::from_model(&model, &exp, &corpus.tokenizer).save(&common.out)?;
    let csv = common.out.with_extension("loss.csv");
    write(&csv, &loss_csv(&log))?;
    match (log.first(), log.last()) {
        (Some(a), Some(b)) => println!("trained {} steps, loss {:.4} -> {:.4}", log.len(), a.loss, b.loss),
        _ => println!("trained 0 steps"),
    }
    println!("checkpoint {} loss curve {}", common.out.display(), csv.display());
    Ok(())
}

fn eval_cmd(common: &Common, input: &Input, flags: &DecodeFlags, baseline: Option<&Path>) -> Result<()> {
    let (_, model, corpus) = load(input)?;
    let splits = make_splits(&corpus)?;
    let settings = DecodeSettings {
        beam: flags.beam,
        fusion_lambda: flags.fusion,
        k: flags.k,
        seed: common.seed,
    };
    let name = input.checkpoint.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
    let mut report = eval::evaluate(&model, &corpus, &splits, &name, &settings)?;
    if let Some(b) = baseline {
        let base: EvalReport = read_json(b)?;
        report.compare(&base);
    }
    write(&common.out, &serde_json::to_string_pretty(&report)?)?;
    print!("{}", report.table());
    Ok(())
}

fn attention_cmd(common: &Common, input: &Input, id: usize) -> Result<()> {
    let (ck, model, corpus) = load(input)?;
    let Some(utt) = corpus.utterances.iter().find(|u| u.id == id) else {
        bail!("no utterance with id {id}");
    };
    let dump = eval::attention_dump(&model, &ck.tokenizer, utt, &utt.context)?;
    write(&common.out, &dump.to_csv())?;
    println!("{} phrases x {} frames -> {}", dump.phrases.len(), dump.weights.rows(), common.out.display());
    Ok(())
}

fn sweep_k_cmd(common: &Common, input: &Input, ks: &[usize], beam: usize, baseline: Option<&Path>) -> Result<()> {
    let (_, model, corpus) = load(input)?;
    let splits = make_splits(&corpus)?;
    let base: Option<EvalReport> = baseline.map(read_json).transpose()?;
    let settings = DecodeSettings {
        beam,
        seed: common.seed,
        ..DecodeSettings::default()
    };
    let rows = eval::sweep_k(&model, &corpus, &splits, ks, base.as_ref(), &settings)?;
    let csv = eval::sweep_csv("k", &rows);
    write(&common.out, &csv)?;
    print!("{csv}");
    Ok(())
}

fn sweep_fusion_cmd(common: &Common, input: &Input, lambdas: &[f64], beam: usize) -> Result<()> {
    let (_, model, corpus) = load(input)?;
    let splits = make_splits(&corpus)?;
    let settings = DecodeSettings {
        beam,
        seed: common.seed,
        ..DecodeSettings::default()
    };
    let rows = eval::sweep_fusion(&model, &corpus, &splits, lambdas, &settings)?;
    let csv = eval::sweep_csv("lambda", &rows);
    write(&common.out, &csv)?;
    print!("{csv}");
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { common } => gen_data(&common),
        Command::Train { common, corpus, variant } => train_cmd(&common, &corpus, variant),
        Command::Eval {
            common,
            input,
            decode,
            baseline,
        } => eval_cmd(&common, &input, &decode, baseline.as_deref()),
        Command::AttentionDump { common, input, utterance } => attention_cmd(&common, &input, utterance),
        Command::SweepK {
            common,
            input,
            ks,
            beam,
            baseline,
        } => sweep_k_cmd(&common, &input, &ks, beam, baseline.as_deref()),
        Command::SweepFusion {
            common,
            input,
            lambdas,
            beam,
        } => sweep_fusion_cmd(&common, &input, &lambdas, beam),
    }
}
