//! Command-line interface. Data goes to files and stdout; progress and
//! diagnostics go to stderr.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use clap::{Args, Parser, Subcommand};

use crate::ablation::{base_digest, run_mode, AblationTable};
use crate::config::{Ablation, Config};
use crate::corpus::{compute_stats, generate_synthetic, load_corpus, save_corpus, Corpus, Split, SyntheticConfig};
use crate::metrics::{evaluate_texts, pair_by_id, read_text_records, write_text_records, TextRecord};
use crate::training::{decode_split, load_model, resolve_dictionary, Checkpoint, EpochRecord, Trainer};

#[derive(Debug, Parser)]
#[command(name = "a3net", version, about = "Anatomy-aligned radiology report generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a deterministic synthetic corpus and print its statistics.
    GenData(GenDataArgs),
    /// Train a model and write checkpoints plus per-epoch history.
    Train(TrainArgs),
    /// Beam-decode one split of a corpus to JSONL.
    Generate(GenerateArgs),
    /// Score candidate reports against references.
    Evaluate(EvaluateArgs),
    /// Train, decode and score one ablation mode; append its table row.
    Ablate(AblateArgs),
    /// Print corpus statistics.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub samples: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated entity list (default: the built-in dictionary).
    #[arg(long, value_delimiter = ',')]
    pub entities: Option<Vec<String>>,
    /// Views per sample, 1 or 2.
    #[arg(long, default_value_t = 1)]
    pub views: usize,
    #[arg(long, default_value_t = 16)]
    pub image_size: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Config file; omitted keys take the preset defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
    /// Refuse unless the checkpoint was trained with exactly this config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write the split's reference reports as JSONL.
    #[arg(long)]
    pub references_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub candidates: PathBuf,
    /// Reference JSONL; alternatively use `--corpus`.
    #[arg(long, conflicts_with = "corpus")]
    pub references: Option<PathBuf>,
    /// Take references from a corpus split instead of a JSONL file.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mode: Ablation,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Study directory; each mode trains into `<out>/<mode>/` and rows go to
    /// `<out>/ablation.txt`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Print JSON instead of the table.
    #[arg(long)]
    pub json: bool,
}

fn load_config(path: Option<&Path>) -> anyhow::Result<(Config, Option<PathBuf>)> {
    match path {
        Some(p) => {
            let config = Config::load(p).with_context(|| format!("loading config {}", p.display()))?;
            Ok((config, p.parent().map(Path::to_path_buf)))
        }
        None => Ok((Config::desk(), None)),
    }
}

fn open_corpus(path: &Path) -> anyhow::Result<Corpus> {
    ensure!(path.exists(), "corpus path {} does not exist", path.display());
    let corpus = load_corpus(path).with_context(|| format!("loading corpus {}", path.display()))?;
    corpus.validate()?;
    Ok(corpus)
}

fn progress(record: &EpochRecord) {
    let val = record.val_loss.map_or("-".to_string(), |v| format!("{v:.4}"));
    let metrics = record
        .val_metrics
        .map_or(String::new(), |m| format!(" val BL-1 {:.3} RG-L {:.3}", m.bleu1, m.rouge_l));
    eprintln!(
        "epoch {:>3}  train {:.4}  val {val}  lr {:.2e}/{:.2e}{metrics}{}",
        record.epoch,
        record.train_loss,
        record.lr_visual,
        record.lr_rest,
        if record.best { "  *" } else { "" }
    );
}

/// Runs one parsed command, writing data to `stdout`.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a, stdout),
        Command::Train(a) => train(a, stdout),
        Command::Generate(a) => generate(a, stdout),
        Command::Evaluate(a) => evaluate(a, stdout),
        Command::Ablate(a) => ablate(a, stdout),
        Command::Stats(a) => stats(a, stdout),
    }
}

fn gen_data(a: GenDataArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let mut cfg = SyntheticConfig {
        views: a.views,
        image_size: a.image_size,
        ..SyntheticConfig::default()
    };
    if let Some(entities) = a.entities {
        cfg.entities = entities.into_iter().map(|e| e.trim().to_string()).filter(|e| !e.is_empty()).collect();
    }
    let corpus = generate_synthetic(a.seed, a.samples, &cfg)?;
    save_corpus(&corpus, &a.out).with_context(|| format!("writing corpus to {}", a.out.display()))?;
    eprintln!("wrote {} samples to {} (digest {})", corpus.samples.len(), a.out.display(), corpus.digest());
    write!(out, "{}", compute_stats(&corpus).render_table())?;
    Ok(())
}

fn train(a: TrainArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let corpus = open_corpus(&a.corpus)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if let Some(cfg_path) = &a.config {
                let (config, _) = load_config(Some(cfg_path))?;
                ensure!(
                    config.digest() == ckpt.config.digest(),
                    "checkpoint {} was trained with config digest {}, but {} resolves to {}; refusing to resume",
                    path.display(),
                    ckpt.config.digest(),
                    cfg_path.display(),
                    config.digest()
                );
            }
            eprintln!("resuming from {} after epoch {}", path.display(), ckpt.meta.epoch);
            Trainer::from_checkpoint(&ckpt)?
        }
        None => {
            let (config, base) = load_config(a.config.as_deref())?;
            let dictionary = resolve_dictionary(&config, base.as_deref())?;
            Trainer::new(config, dictionary, &corpus)?
        }
    };
    write!(out, "{}", trainer.config.to_toml_string())?;
    eprintln!(
        "config digest {}  corpus digest {}  vocabulary {}  parameters {}",
        trainer.config.digest(),
        corpus.digest(),
        trainer.vocab.len(),
        trainer.model.params.count()
    );
    trainer.fit(&corpus, Some(&a.out), progress)?;
    eprintln!("checkpoints and history written to {}", a.out.display());
    Ok(())
}

fn generate(a: GenerateArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    if let Some(cfg_path) = &a.config {
        let (config, _) = load_config(Some(cfg_path))?;
        ensure!(
            config.digest() == ckpt.config.digest(),
            "checkpoint {} was trained with config digest {}, but {} resolves to {}; refusing to decode",
            a.checkpoint.display(),
            ckpt.config.digest(),
            cfg_path.display(),
            config.digest()
        );
    }
    let corpus = open_corpus(&a.corpus)?;
    let (model, vocab) = load_model(&ckpt)?;
    let records = decode_split(&model, &vocab, &corpus, a.split, &ckpt.config.decode)?;
    write_text_records(&a.out, &records)?;
    let meta = serde_json::json!({
        "checkpoint": a.checkpoint.display().to_string(),
        "config_digest": ckpt.config.digest(),
        "corpus_digest": corpus.digest(),
        "split": a.split.as_str(),
        "count": records.len(),
    });
    std::fs::write(sidecar(&a.out), format!("{meta}\n"))?;
    if let Some(path) = &a.references_out {
        let refs: Vec<TextRecord> = corpus
            .split(a.split)
            .map(|s| TextRecord {
                id: s.id.clone(),
                text: s.report.clone(),
            })
            .collect();
        write_text_records(path, &refs)?;
    }
    writeln!(out, "{meta}")?;
    eprintln!("decoded {} {} samples to {}", records.len(), a.split, a.out.display());
    Ok(())
}

/// `<file>.meta.json` next to a generated artifact.
fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

fn evaluate(a: EvaluateArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let candidates = read_text_records(&a.candidates)?;
    let references = match (&a.references, &a.corpus) {
        (Some(path), _) => read_text_records(path)?,
        (None, Some(path)) => open_corpus(path)?
            .split(a.split)
            .map(|s| TextRecord {
                id: s.id.clone(),
                text: s.report.clone(),
            })
            .collect(),
        (None, None) => bail!("pass either --references or --corpus"),
    };
    let (cands, refs) = pair_by_id(&candidates, &references)?;
    let report = evaluate_texts(&cands, &refs)?;
    writeln!(out, "{}", report.to_json_line())?;
    write!(out, "{}", report.render_table(&a.candidates.file_stem().unwrap_or_default().to_string_lossy()))?;
    Ok(())
}

fn ablate(a: AblateArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let (config, config_dir) = load_config(a.config.as_deref())?;
    let corpus = open_corpus(&a.corpus)?;
    let table_path = a.out.join("ablation.txt");
    let base = base_digest(&config);
    let corpus_digest = corpus.digest();
    let mut table = AblationTable::open(&table_path, &base, &corpus_digest)?;
    let dictionary = resolve_dictionary(&config, config_dir.as_deref())?;
    eprintln!("ablation {} ({}), base config {base}", a.mode, a.mode.label());
    let run_dir = a.out.join(a.mode.as_str());
    let outcome = run_mode(&config, dictionary, &corpus, a.mode, Some(&run_dir), progress)?;
    write_text_records(&run_dir.join("test_candidates.jsonl"), &outcome.candidates)?;
    table.upsert(a.mode, outcome.report);
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(&table_path, table.render())?;
    writeln!(out, "{}", outcome.report.to_json_line())?;
    write!(out, "{}", table.render())?;
    Ok(())
}

fn stats(a: StatsArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let stats = compute_stats(&open_corpus(&a.corpus)?);
    if a.json {
        writeln!(out, "{}", serde_json::to_string(&stats)?)?;
    } else {
        write!(out, "{}", stats.render_table())?;
    }
    Ok(())
}
