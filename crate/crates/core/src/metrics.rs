//! Corpus-level NLG metrics over token sequences: BLEU-1..4, exact-match
//! METEOR and ROUGE-L.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::tokenize;
use crate::error::{Error, Result};

fn check_pairs<T>(candidates: &[T], references: &[T]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::contract("metric needs at least one candidate/reference pair"));
    }
    if candidates.len() != references.len() {
        return Err(Error::contract(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    Ok(())
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU with uniform weights over orders `1..=n`, clipped n-gram
/// precision, no smoothing, and brevity penalty `exp(1 - r/c)` for `c < r`.
pub fn bleu<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<S>], n: usize) -> Result<f64> {
    check_pairs(candidates, references)?;
    if !(1..=4).contains(&n) {
        return Err(Error::contract(format!("BLEU order must be 1..=4, got {n}")));
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut c, mut r) = (0usize, 0usize);
    for (cand, refr) in candidates.iter().zip(references) {
        c += cand.len();
        r += refr.len();
        for k in 1..=n {
            let rc = ngram_counts(refr, k);
            for (gram, count) in ngram_counts(cand, k) {
                matched[k - 1] += count.min(rc.get(&gram).copied().unwrap_or(0));
                total[k - 1] += count;
            }
        }
    }
    if c == 0 || matched.iter().any(|&m| m == 0) {
        return Ok(0.0);
    }
    let log_mean = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / n as f64;
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(bp * log_mean.exp())
}

/// Length of the longest common subsequence.
pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x.as_ref() == y.as_ref() { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// Mean over pairs of the LCS F-measure `(1+β²)PR / (R + β²P)`.
pub fn rouge_l<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<S>], beta: f64) -> Result<f64> {
    check_pairs(candidates, references)?;
    let b2 = beta * beta;
    let sum: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| {
            let l = lcs_len(c, r);
            if l == 0 {
                return 0.0;
            }
            let p = l as f64 / c.len() as f64;
            let rec = l as f64 / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .sum();
    Ok(sum / candidates.len() as f64)
}

const CHUNK_SEARCH_BUDGET: usize = 1 << 20;

/// Fewest chunks over all maximum exact-match alignments, with the match
/// count. A chunk is a maximal run of matches adjacent in both sequences.
pub fn meteor_alignment<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> (usize, usize) {
    let cand: Vec<&str> = candidate.iter().map(AsRef::as_ref).collect();
    let refr: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    let mut ref_positions: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, w) in refr.iter().enumerate() {
        ref_positions.entry(w).or_default().push(j);
    }
    let mut cand_counts: HashMap<&str, usize> = HashMap::new();
    for w in &cand {
        *cand_counts.entry(w).or_insert(0) += 1;
    }
    let mut quota: HashMap<&str, usize> = cand_counts
        .iter()
        .map(|(w, &c)| (*w, c.min(ref_positions.get(w).map_or(0, Vec::len))))
        .collect();
    let matches: usize = quota.values().sum();
    if matches == 0 {
        return (0, 0);
    }
    // remaining[i][w]: occurrences of cand[i]'s word at positions >= i
    let mut remaining = vec![0usize; cand.len()];
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for i in (0..cand.len()).rev() {
        let e = seen.entry(cand[i]).or_insert(0);
        *e += 1;
        remaining[i] = *e;
    }

    struct Search<'a> {
        cand: Vec<&'a str>,
        ref_positions: HashMap<&'a str, Vec<usize>>,
        remaining: Vec<usize>,
        used: Vec<bool>,
        best: usize,
        nodes: usize,
    }

    impl<'a> Search<'a> {
        fn go(&mut self, i: usize, prev: Option<usize>, chunks: usize, quota: &mut HashMap<&'a str, usize>) {
            self.nodes += 1;
            if chunks >= self.best || self.nodes > CHUNK_SEARCH_BUDGET {
                return;
            }
            if i == self.cand.len() {
                self.best = chunks;
                return;
            }
            let w = self.cand[i];
            let q = quota[w];
            if q > 0 {
                // Prefer continuing the current chunk, then positions in order.
                let mut options: Vec<usize> = self.ref_positions[w].iter().copied().filter(|&j| !self.used[j]).collect();
                if let Some(p) = prev {
                    if let Some(k) = options.iter().position(|&j| j == p + 1) {
                        options.swap(0, k);
                        options[1..].sort_unstable();
                    }
                }
                quota.insert(w, q - 1);
                for j in options {
                    let extends = prev.is_some_and(|p| j == p + 1);
                    self.used[j] = true;
                    self.go(i + 1, Some(j), chunks + usize::from(!extends), quota);
                    self.used[j] = false;
                }
                quota.insert(w, q);
            }
            if self.remaining[i] > q {
                self.go(i + 1, None, chunks, quota);
            }
        }
    }

    let mut search = Search {
        cand,
        used: vec![false; refr.len()],
        ref_positions,
        remaining,
        best: usize::MAX,
        nodes: 0,
    };
    search.go(0, None, 0, &mut quota);
    (matches, search.best)
}

/// Mean over pairs of exact-match METEOR:
/// `F_mean · (1 − 0.5·(chunks/m)³)` with `F_mean = 10PR / (R + 9P)`.
pub fn meteor<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<S>]) -> Result<f64> {
    check_pairs(candidates, references)?;
    let sum: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| {
            let (m, chunks) = meteor_alignment(c, r);
            if m == 0 {
                return 0.0;
            }
            let p = m as f64 / c.len() as f64;
            let rec = m as f64 / r.len() as f64;
            let f_mean = 10.0 * p * rec / (rec + 9.0 * p);
            let frag = chunks as f64 / m as f64;
            f_mean * (1.0 - 0.5 * frag.powi(3))
        })
        .sum();
    Ok(sum / candidates.len() as f64)
}

/// The six-column metric row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "BL-1")]
    pub bleu1: f64,
    #[serde(rename = "BL-2")]
    pub bleu2: f64,
    #[serde(rename = "BL-3")]
    pub bleu3: f64,
    #[serde(rename = "BL-4")]
    pub bleu4: f64,
    #[serde(rename = "MTR")]
    pub meteor: f64,
    #[serde(rename = "RG-L")]
    pub rouge_l: f64,
}

impl MetricReport {
    pub const COLUMNS: [&'static str; 6] = ["BL-1", "BL-2", "BL-3", "BL-4", "MTR", "RG-L"];

    pub fn values(&self) -> [f64; 6] {
        [self.bleu1, self.bleu2, self.bleu3, self.bleu4, self.meteor, self.rouge_l]
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metric report serializes")
    }

    /// Header plus one labelled row, three decimals.
    pub fn render_table(&self, label: &str) -> String {
        render_rows(&[(label.to_string(), *self)])
    }
}

/// Aligned plain-text table of labelled metric rows.
pub fn render_rows(rows: &[(String, MetricReport)]) -> String {
    let width = rows.iter().map(|(l, _)| l.chars().count()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<width$}", "Model");
    for c in MetricReport::COLUMNS {
        let _ = write!(out, "  {c:>6}");
    }
    out.push('\n');
    for (label, report) in rows {
        let pad = width - label.chars().count();
        let _ = write!(out, "{label}{}", " ".repeat(pad));
        for v in report.values() {
            let _ = write!(out, "  {v:>6.3}");
        }
        out.push('\n');
    }
    out
}

/// Runs every metric (ROUGE-L with β = 1).
pub fn evaluate_suite<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<S>]) -> Result<MetricReport> {
    Ok(MetricReport {
        bleu1: bleu(candidates, references, 1)?,
        bleu2: bleu(candidates, references, 2)?,
        bleu3: bleu(candidates, references, 3)?,
        bleu4: bleu(candidates, references, 4)?,
        meteor: meteor(candidates, references)?,
        rouge_l: rouge_l(candidates, references, 1.0)?,
    })
}

/// [`evaluate_suite`] on raw text, tokenized with the corpus tokenizer.
pub fn evaluate_texts<S: AsRef<str>>(candidates: &[S], references: &[S]) -> Result<MetricReport> {
    let c: Vec<Vec<String>> = candidates.iter().map(|t| tokenize(t.as_ref())).collect();
    let r: Vec<Vec<String>> = references.iter().map(|t| tokenize(t.as_ref())).collect();
    evaluate_suite(&c, &r)
}

/// One line of a candidate or reference file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextRecord {
    pub id: String,
    pub text: String,
}

pub fn read_text_records(path: &Path) -> Result<Vec<TextRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::Format(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TextRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            source_name: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_text_records(path: &Path, records: &[TextRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    w.flush()?;
    Ok(())
}

/// Pairs candidates with references by id, in reference order. Every
/// reference needs exactly one candidate and vice versa.
pub fn pair_by_id(candidates: &[TextRecord], references: &[TextRecord]) -> Result<(Vec<String>, Vec<String>)> {
    let mut by_id: HashMap<&str, &str> = HashMap::new();
    for c in candidates {
        if by_id.insert(&c.id, &c.text).is_some() {
            return Err(Error::Format(format!("duplicate candidate id {}", c.id)));
        }
    }
    let mut cands = Vec::with_capacity(references.len());
    let mut refs = Vec::with_capacity(references.len());
    for r in references {
        let text = by_id
            .remove(r.id.as_str())
            .ok_or_else(|| Error::Format(format!("no candidate for reference id {}", r.id)))?;
        cands.push(text.to_string());
        refs.push(r.text.clone());
    }
    if let Some(extra) = by_id.keys().next() {
        return Err(Error::Format(format!("candidate id {extra} has no reference")));
    }
    Ok((cands, refs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    fn one(c: &str, r: &str) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
        (vec![toks(c)], vec![toks(r)])
    }

    #[test]
    fn bleu_examples() {
        let (c, r) = one("the the the the", "the cat sat down");
        assert!((bleu(&c, &r, 1).unwrap() - 0.25).abs() < 1e-12);
        let (c, r) = one("a b c d", "a b c d");
        for n in 1..=4 {
            assert!((bleu(&c, &r, n).unwrap() - 1.0).abs() < 1e-12);
        }
        let (c, r) = one("x y z", "a b c");
        assert_eq!(bleu(&c, &r, 1).unwrap(), 0.0);
        let (c, r) = one("a b", "a b c d");
        assert!((bleu(&c, &r, 1).unwrap() - (1.0f64 - 2.0).exp()).abs() < 1e-12);
        assert!(bleu::<String>(&[], &[], 1).is_err());
    }

    #[test]
    fn rouge_examples() {
        let (c, r) = one("a c d", "a b c d");
        assert!((rouge_l(&c, &r, 1.0).unwrap() - 6.0 / 7.0).abs() < 1e-12);
        let (c, r) = one("x", "y");
        assert_eq!(rouge_l(&c, &r, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn meteor_examples() {
        let (c, r) = one("a b", "a b");
        assert!((meteor(&c, &r).unwrap() - 0.9375).abs() < 1e-12);
        let (c, r) = one("p q", "r s");
        assert_eq!(meteor(&c, &r).unwrap(), 0.0);
        for m in 1..8usize {
            let s: Vec<String> = (0..m).map(|i| format!("w{i}")).collect();
            let v = meteor(&[s.clone()], &[s]).unwrap();
            assert!((v - (1.0 - 0.5 / (m as f64).powi(3))).abs() < 1e-12);
        }
    }

    #[test]
    fn meteor_minimizes_chunks_with_repeats() {
        // "the" can align to either occurrence; the best choice keeps one chunk
        assert_eq!(meteor_alignment(&toks("the cat"), &toks("the dog the cat")), (2, 1));
        assert_eq!(meteor_alignment(&toks("a b a b"), &toks("a b a b")), (4, 1));
        assert_eq!(meteor_alignment(&toks("b a"), &toks("a b")), (2, 2));
    }

    #[test]
    fn suite_schema_and_fixture_row() {
        let report = MetricReport {
            bleu1: 0.492,
            bleu2: 0.318,
            bleu3: 0.230,
            bleu4: 0.175,
            meteor: 0.199,
            rouge_l: 0.381,
        };
        let line = report.to_json_line();
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), 6);
        for c in MetricReport::COLUMNS {
            assert!(v.get(c).is_some());
        }
        let back: MetricReport = serde_json::from_str(&line).unwrap();
        assert_eq!(back, report);
        assert!(report.render_table("Ours").contains("0.492"));
    }

    #[test]
    fn pairing_by_id() {
        let rec = |id: &str, t: &str| TextRecord { id: id.into(), text: t.into() };
        let (c, r) = pair_by_id(&[rec("b", "2"), rec("a", "1")], &[rec("a", "x"), rec("b", "y")]).unwrap();
        assert_eq!(c, ["1", "2"]);
        assert_eq!(r, ["x", "y"]);
        assert!(pair_by_id(&[rec("a", "1")], &[rec("a", "x"), rec("b", "y")]).is_err());
        assert!(pair_by_id(&[rec("a", "1"), rec("c", "1")], &[rec("a", "x")]).is_err());
    }

    fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
        if a.is_empty() || b.is_empty() {
            return 0;
        }
        let (x, y) = (a.len() - 1, b.len() - 1);
        if a[x] == b[y] {
            brute_lcs(&a[..x], &b[..y]) + 1
        } else {
            brute_lcs(&a[..x], b).max(brute_lcs(a, &b[..y]))
        }
    }

    proptest! {
        #[test]
        fn lcs_matches_recursion(a in prop::collection::vec(0u8..3, 0..9), b in prop::collection::vec(0u8..3, 0..9)) {
            let sa: Vec<String> = a.iter().map(u8::to_string).collect();
            let sb: Vec<String> = b.iter().map(u8::to_string).collect();
            prop_assert_eq!(lcs_len(&sa, &sb), brute_lcs(&a, &b));
        }

        #[test]
        fn metrics_bounded(a in prop::collection::vec(0u8..6, 1..15), b in prop::collection::vec(0u8..6, 1..15)) {
            let sa: Vec<String> = a.iter().map(u8::to_string).collect();
            let sb: Vec<String> = b.iter().map(u8::to_string).collect();
            let r = evaluate_suite(&[sa], &[sb]).unwrap();
            for v in r.values() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
