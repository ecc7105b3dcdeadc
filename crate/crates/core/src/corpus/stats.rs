use serde::{Deserialize, Serialize};

use super::{tokenize, Corpus, Split};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SplitStats {
    pub images: usize,
    pub reports: usize,
    pub patients: usize,
    /// Mean report length in tokens; `None` for an empty split.
    pub avg_len: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CorpusStats {
    pub train: SplitStats,
    pub val: SplitStats,
    pub test: SplitStats,
}

impl CorpusStats {
    pub fn get(&self, split: Split) -> &SplitStats {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Aligned plain-text table with `Image`, `Report`, `Patient` and
    /// `Avg. Len.` rows and one column per split.
    pub fn render_table(&self) -> String {
        let rows: [(&str, Box<dyn Fn(&SplitStats) -> String>); 4] = [
            ("Image", Box::new(|s| group_thousands(s.images))),
            ("Report", Box::new(|s| group_thousands(s.reports))),
            ("Patient", Box::new(|s| group_thousands(s.patients))),
            ("Avg. Len.", Box::new(|s| s.avg_len.map_or("-".to_string(), |v| format!("{v:.2}")))),
        ];
        let mut out = format!("{:<10}{:>10}{:>10}{:>10}\n", "", "Train", "Val", "Test");
        for (label, cell) in rows {
            out.push_str(&format!(
                "{label:<10}{:>10}{:>10}{:>10}\n",
                cell(&self.train),
                cell(&self.val),
                cell(&self.test)
            ));
        }
        out
    }
}

fn group_thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Counts per split. Each synthetic sample is its own patient.
pub fn compute_stats(corpus: &Corpus) -> CorpusStats {
    let per_split = |split| {
        let mut st = SplitStats::default();
        let mut tokens = 0usize;
        for s in corpus.split(split) {
            st.images += s.images.len();
            st.reports += 1;
            st.patients += 1;
            tokens += tokenize(&s.report).len();
        }
        st.avg_len = (st.reports > 0).then(|| tokens as f64 / st.reports as f64);
        st
    };
    CorpusStats {
        train: per_split(Split::Train),
        val: per_split(Split::Val),
        test: per_split(Split::Test),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ImageView, Sample};

    #[test]
    fn empty_split_renders_dash() {
        let stats = compute_stats(&Corpus::default());
        assert_eq!(stats.train, SplitStats::default());
        let table = stats.render_table();
        assert!(table.lines().any(|l| l.starts_with("Avg. Len.") && l.trim_end().ends_with('-')));
    }

    #[test]
    fn counts_single_view_samples() {
        let samples = (0..10)
            .map(|i| Sample {
                id: format!("s{i}"),
                images: vec![ImageView::blank(4, 4, 1)],
                report: "the heart is normal".into(),
                split: Split::Train,
            })
            .collect();
        let stats = compute_stats(&Corpus { samples });
        assert_eq!(stats.train.images, 10);
        assert_eq!(stats.train.reports, 10);
        assert_eq!(stats.train.avg_len, Some(4.0));
    }

    #[test]
    fn reference_row_fixture_renders() {
        let stats = CorpusStats {
            train: SplitStats {
                images: 5226,
                reports: 2770,
                patients: 2770,
                avg_len: Some(37.56),
            },
            val: SplitStats {
                images: 748,
                reports: 395,
                patients: 395,
                avg_len: Some(36.78),
            },
            test: SplitStats {
                images: 1496,
                reports: 790,
                patients: 790,
                avg_len: Some(33.62),
            },
        };
        let table = stats.render_table();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[1].split_whitespace().collect::<Vec<_>>(), ["Image", "5,226", "748", "1,496"]);
        assert_eq!(lines[3].split_whitespace().collect::<Vec<_>>(), ["Patient", "2,770", "395", "790"]);
        assert!(lines[4].contains("37.56") && lines[4].contains("33.62"));
    }
}
