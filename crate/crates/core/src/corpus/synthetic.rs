//! Deterministic synthetic corpus in which every report is a function of
//! its image.
//!
//! Each entity owns one cell of a square grid on the canvas. A mentioned
//! entity draws a glyph in its cell: a dim outline when normal, a bright
//! filled block when abnormal. Unmentioned entities leave their cell
//! blank. Reports concatenate one templated sentence per mentioned entity
//! in dictionary order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, ImageView, Sample, Split};
use crate::alignment::DEFAULT_ENTITIES;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FindingState {
    Normal,
    Abnormal,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityFinding {
    /// Index into [`SyntheticConfig::entities`].
    pub entity: usize,
    pub state: FindingState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub entities: Vec<String>,
    /// Square canvas side in pixels.
    pub image_size: usize,
    /// Cells per canvas side; each entity owns one cell.
    pub grid: usize,
    /// Views per sample (1 or 2). The second view is a horizontal mirror.
    pub views: usize,
    pub mention_prob: f64,
    pub abnormal_prob: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            entities: DEFAULT_ENTITIES.iter().map(|s| s.to_string()).collect(),
            image_size: 16,
            grid: 4,
            views: 1,
            mention_prob: 0.6,
            abnormal_prob: 0.4,
        }
    }
}

/// Cell visiting order: center first, then corners, then edges.
const CELL_ORDER_4: [usize; 16] = [5, 6, 9, 10, 0, 3, 12, 15, 1, 2, 4, 7, 8, 11, 13, 14];

const OUTLINE_INTENSITY: f32 = 0.5;
const FILL_INTENSITY: f32 = 1.0;

const EMPTY_REPORT: &str = "no acute cardiopulmonary abnormality.";

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.entities.is_empty() {
            return Err(Error::config("synthetic corpus needs at least one entity"));
        }
        if self.grid == 0 || self.image_size == 0 || self.image_size % self.grid != 0 {
            return Err(Error::config(format!(
                "image_size {} must be a positive multiple of grid {}",
                self.image_size, self.grid
            )));
        }
        if self.entities.len() > self.grid * self.grid {
            return Err(Error::config(format!(
                "{} entities do not fit a {}x{} grid",
                self.entities.len(),
                self.grid,
                self.grid
            )));
        }
        if !(1..=2).contains(&self.views) {
            return Err(Error::config(format!("views must be 1 or 2, got {}", self.views)));
        }
        for (name, p) in [("mention_prob", self.mention_prob), ("abnormal_prob", self.abnormal_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }

    fn cell_of(&self, entity: usize) -> usize {
        if self.grid == 4 {
            CELL_ORDER_4[entity]
        } else {
            entity
        }
    }
}

/// Sentence for one entity finding. The five default entities have
/// hand-written templates; any other entity falls back to a generic pair.
pub fn sentence(entity: &str, state: FindingState) -> String {
    use FindingState::*;
    let fixed = match (entity, state) {
        ("pneumothorax", Normal) => "there is no pneumothorax",
        ("pneumothorax", Abnormal) => "a small pneumothorax is present",
        ("pleural", Normal) => "no pleural effusion is seen",
        ("pleural", Abnormal) => "there is a pleural effusion",
        ("spine", Normal) => "the spine is unremarkable",
        ("spine", Abnormal) => "degenerative changes of the spine",
        ("heart", Normal) => "the heart size is normal",
        ("heart", Abnormal) => "the heart is enlarged",
        ("hernia", Normal) => "no hiatal hernia",
        ("hernia", Abnormal) => "a hiatal hernia is present",
        (e, Normal) => return format!("the {e} is normal"),
        (e, Abnormal) => return format!("the {e} is abnormal"),
    };
    fixed.to_string()
}

pub fn render_report(cfg: &SyntheticConfig, findings: &[EntityFinding]) -> String {
    if findings.is_empty() {
        return EMPTY_REPORT.to_string();
    }
    findings
        .iter()
        .map(|f| format!("{}.", sentence(&cfg.entities[f.entity], f.state)))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn render_views(cfg: &SyntheticConfig, findings: &[EntityFinding]) -> Vec<ImageView> {
    let n = cfg.image_size;
    let cell = n / cfg.grid;
    let mut front = ImageView::blank(n, n, 1);
    for f in findings {
        let slot = cfg.cell_of(f.entity);
        let (cy, cx) = ((slot / cfg.grid) * cell, (slot % cfg.grid) * cell);
        for y in 0..cell {
            for x in 0..cell {
                let border = y == 0 || x == 0 || y + 1 == cell || x + 1 == cell;
                let v = match f.state {
                    FindingState::Abnormal => FILL_INTENSITY,
                    FindingState::Normal if border => OUTLINE_INTENSITY,
                    FindingState::Normal => 0.0,
                };
                front.pixels[(cy + y) * n + cx + x] = v;
            }
        }
    }
    let mut views = vec![front.clone()];
    if cfg.views == 2 {
        let mut mirror = front;
        for row in mirror.pixels.chunks_exact_mut(n) {
            row.reverse();
        }
        views.push(mirror);
    }
    views
}

/// Per-sample findings drawn by [`generate_synthetic`] for the same inputs.
pub fn synthetic_findings(seed: u64, n_samples: usize, cfg: &SyntheticConfig) -> Vec<Vec<EntityFinding>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_samples)
        .map(|_| {
            let mut findings = Vec::new();
            for entity in 0..cfg.entities.len() {
                if rng.gen_bool(cfg.mention_prob) {
                    let state = if rng.gen_bool(cfg.abnormal_prob) {
                        FindingState::Abnormal
                    } else {
                        FindingState::Normal
                    };
                    findings.push(EntityFinding { entity, state });
                }
            }
            findings
        })
        .collect()
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// 70/10/20 train/val/test assignment from a seeded hash of the id.
pub fn split_for(seed: u64, id: &str) -> Split {
    match splitmix64(seed ^ fnv1a(id)) % 100 {
        0..=69 => Split::Train,
        70..=79 => Split::Val,
        _ => Split::Test,
    }
}

pub fn generate_synthetic(seed: u64, n_samples: usize, cfg: &SyntheticConfig) -> Result<Corpus> {
    if n_samples < 4 {
        return Err(Error::config(format!("synthetic corpus needs at least 4 samples, got {n_samples}")));
    }
    cfg.validate()?;
    let samples = synthetic_findings(seed, n_samples, cfg)
        .into_iter()
        .enumerate()
        .map(|(i, findings)| {
            let id = format!("syn{seed}-{i:05}");
            Sample {
                split: split_for(seed, &id),
                images: render_views(cfg, &findings),
                report: render_report(cfg, &findings),
                id,
            }
        })
        .collect();
    Ok(Corpus { samples })
}
