//! Branch-ablation runs and the comparison table they append to.

use std::path::Path;

use crate::alignment::AnatomicalDictionary;
use crate::config::{Ablation, Config};
use crate::corpus::{Corpus, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_texts, render_rows, MetricReport, TextRecord};
use crate::training::{decode_split, Trainer};

/// Digest shared by every mode of one ablation study: the config with the
/// ablation switch reset to [`Ablation::Full`].
pub fn base_digest(config: &Config) -> String {
    let mut base = config.clone();
    base.model.ablation = Ablation::Full;
    base.digest()
}

pub struct AblationOutcome {
    pub trainer: Trainer,
    pub candidates: Vec<TextRecord>,
    pub report: MetricReport,
}

/// Trains one mode, beam-decodes the test split and scores it.
pub fn run_mode(
    config: &Config,
    dictionary: AnatomicalDictionary,
    corpus: &Corpus,
    mode: Ablation,
    out_dir: Option<&Path>,
    on_epoch: impl FnMut(&crate::training::EpochRecord),
) -> Result<AblationOutcome> {
    let mut config = config.clone();
    config.model.ablation = mode;
    let mut trainer = Trainer::new(config, dictionary, corpus)?;
    trainer.fit(corpus, out_dir, on_epoch)?;
    let candidates = decode_split(&trainer.model, &trainer.vocab, corpus, Split::Test, &trainer.config.decode)?;
    if candidates.is_empty() {
        return Err(Error::config("corpus has no test samples to evaluate"));
    }
    let refs: Vec<&str> = corpus.split(Split::Test).map(|s| s.report.as_str()).collect();
    let texts: Vec<&str> = candidates.iter().map(|c| c.text.as_str()).collect();
    let report = evaluate_texts(&texts, &refs)?;
    Ok(AblationOutcome {
        trainer,
        candidates,
        report,
    })
}

/// Rows labelled `Ours`, `w/o Φ_visual` and `w/o Φ_sem`, tied to one base
/// config and one corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub base_digest: String,
    pub corpus_digest: String,
    pub rows: Vec<(String, MetricReport)>,
}

const HEADER_PREFIX: &str = "# a3net ablation";

impl AblationTable {
    pub fn new(base_digest: String, corpus_digest: String) -> Self {
        Self {
            base_digest,
            corpus_digest,
            rows: Vec::new(),
        }
    }

    /// Inserts or replaces the row for `mode`, keeping Table order
    /// (`Ours`, `w/o Φ_visual`, `w/o Φ_sem`).
    pub fn upsert(&mut self, mode: Ablation, report: MetricReport) {
        self.rows.retain(|(l, _)| l != mode.label());
        self.rows.push((mode.label().to_string(), report));
        let rank = |l: &str| Ablation::ALL.iter().position(|m| m.label() == l).unwrap_or(usize::MAX);
        self.rows.sort_by_key(|(l, _)| rank(l));
    }

    pub fn render(&self) -> String {
        format!(
            "{HEADER_PREFIX} base_config={} corpus={}\n{}",
            self.base_digest,
            self.corpus_digest,
            render_rows(&self.rows)
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let fields = header
            .strip_prefix(HEADER_PREFIX)
            .ok_or_else(|| Error::Format("ablation table lacks its header line".into()))?;
        let field = |key: &str| {
            fields
                .split_whitespace()
                .find_map(|f| f.strip_prefix(key))
                .map(str::to_string)
                .ok_or_else(|| Error::Format(format!("ablation table header lacks {key}")))
        };
        let mut table = Self::new(field("base_config=")?, field("corpus=")?);
        lines.next(); // column header
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let parts: Vec<&str> = line.split("  ").map(str::trim).filter(|p| !p.is_empty()).collect();
            if parts.len() != 7 {
                return Err(Error::Format(format!("malformed ablation row {line:?}")));
            }
            let v: Vec<f64> = parts[1..]
                .iter()
                .map(|p| p.parse().map_err(|_| Error::Format(format!("bad number {p:?} in ablation row"))))
                .collect::<Result<_>>()?;
            table.rows.push((
                parts[0].to_string(),
                MetricReport {
                    bleu1: v[0],
                    bleu2: v[1],
                    bleu3: v[2],
                    bleu4: v[3],
                    meteor: v[4],
                    rouge_l: v[5],
                },
            ));
        }
        Ok(table)
    }

    /// Loads `path` if present and checks it belongs to the same study;
    /// otherwise starts an empty table.
    pub fn open(path: &Path, base_digest: &str, corpus_digest: &str) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::new(base_digest.to_string(), corpus_digest.to_string()));
        }
        let table = Self::parse(&std::fs::read_to_string(path)?)?;
        if table.base_digest != base_digest {
            return Err(Error::Format(format!(
                "{} was produced with base config {}, but this run resolves to {}; refusing to mix rows",
                path.display(),
                table.base_digest,
                base_digest
            )));
        }
        if table.corpus_digest != corpus_digest {
            return Err(Error::Format(format!(
                "{} was produced on corpus {}, but this corpus is {}; refusing to mix rows",
                path.display(),
                table.corpus_digest,
                corpus_digest
            )));
        }
        Ok(table)
    }
}
