//! Token accuracy, per-label precision/recall/F1, a confusion table and
//! BIO chunk F1 over a gold file and an aligned prediction file.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write};

use crate::conll::ConllCorpus;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentError {
    pub sequence: usize,
    pub position: usize,
    /// 1-based line in the prediction file, when the token exists there.
    pub pred_line: Option<usize>,
    pub message: String,
}

impl fmt::Display for AlignmentError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sequence {} token {}", self.sequence + 1, self.position + 1)?;
        if let Some(l) = self.pred_line {
            write!(f, " (prediction line {l})")?;
        }
        write!(f, ": {}", self.message)
    }
}

impl std::error::Error for AlignmentError {}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(correct: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(correct, predicted);
        let recall = ratio(correct, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelScore {
    pub label: String,
    pub scores: Prf,
    pub gold: usize,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkScore {
    pub scores: Prf,
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub tokens: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub labels: Vec<LabelScore>,
    /// `(gold, predicted) -> count`.
    pub confusion: BTreeMap<(String, String), usize>,
    /// Present when some label carries a `B-` or `I-` prefix.
    pub chunks: Option<ChunkScore>,
}

/// Which column of the prediction file holds the predicted label. By
/// default it is the column right after the gold file's columns, or the
/// last column when the prediction file is no wider than the gold file.
pub fn prediction_column(gold_columns: usize, pred_columns: usize, explicit: Option<usize>) -> usize {
    match explicit {
        Some(c) => c,
        None if pred_columns > gold_columns => gold_columns,
        None => pred_columns.saturating_sub(1),
    }
}

pub fn evaluate(gold: &ConllCorpus, pred: &ConllCorpus, pred_column: Option<usize>) -> Result<EvalReport, AlignmentError> {
    let col = prediction_column(gold.columns, pred.columns, pred_column);
    if !gold.sequences.is_empty() && col >= pred.columns {
        return Err(AlignmentError {
            sequence: 0,
            position: 0,
            pred_line: pred.sequences.first().map(|s| s.lines[0]),
            message: format!("prediction column {} does not exist ({} columns)", col + 1, pred.columns),
        });
    }
    let mut gold_labels = Vec::new();
    let mut pred_labels = Vec::new();
    for (s, g) in gold.sequences.iter().enumerate() {
        let Some(p) = pred.sequences.get(s) else {
            return Err(AlignmentError {
                sequence: s,
                position: 0,
                pred_line: None,
                message: format!("prediction file ends after {} sequences", pred.sequences.len()),
            });
        };
        for (t, grow) in g.rows.iter().enumerate() {
            let Some(prow) = p.rows.get(t) else {
                return Err(AlignmentError {
                    sequence: s,
                    position: t,
                    pred_line: None,
                    message: format!("prediction sequence has {} tokens, gold has {}", p.rows.len(), g.rows.len()),
                });
            };
            if prow[0] != grow[0] {
                return Err(AlignmentError {
                    sequence: s,
                    position: t,
                    pred_line: Some(p.lines[t]),
                    message: format!("token `{}` does not match gold `{}`", prow[0], grow[0]),
                });
            }
        }
        if p.rows.len() > g.rows.len() {
            let t = g.rows.len();
            return Err(AlignmentError {
                sequence: s,
                position: t,
                pred_line: Some(p.lines[t]),
                message: format!("prediction sequence has {} tokens, gold has {}", p.rows.len(), g.rows.len()),
            });
        }
        gold_labels.push(g.rows.iter().map(|r| r[r.len() - 1].clone()).collect::<Vec<_>>());
        pred_labels.push(p.rows.iter().map(|r| r[col].clone()).collect::<Vec<_>>());
    }
    if pred.sequences.len() > gold.sequences.len() {
        let s = gold.sequences.len();
        return Err(AlignmentError {
            sequence: s,
            position: 0,
            pred_line: Some(pred.sequences[s].lines[0]),
            message: format!("prediction file has {} sequences, gold has {s}", pred.sequences.len()),
        });
    }
    Ok(score(&gold_labels, &pred_labels))
}

/// Scores label sequences that are already aligned.
pub fn score(gold: &[Vec<String>], pred: &[Vec<String>]) -> EvalReport {
    let mut confusion: BTreeMap<(String, String), usize> = BTreeMap::new();
    let mut tokens = 0;
    let mut correct = 0;
    for (g, p) in gold.iter().zip(pred) {
        for (a, b) in g.iter().zip(p) {
            tokens += 1;
            correct += usize::from(a == b);
            *confusion.entry((a.clone(), b.clone())).or_default() += 1;
        }
    }
    let names: BTreeSet<&String> = confusion.keys().flat_map(|(a, b)| [a, b]).collect();
    let labels = names
        .iter()
        .map(|&name| {
            let mut hit = 0;
            let mut g = 0;
            let mut p = 0;
            for ((a, b), &n) in &confusion {
                if a == name {
                    g += n;
                }
                if b == name {
                    p += n;
                }
                if a == name && b == name {
                    hit += n;
                }
            }
            LabelScore {
                label: name.clone(),
                scores: Prf::from_counts(hit, p, g),
                gold: g,
                predicted: p,
            }
        })
        .collect();
    let is_bio = names.iter().any(|l| l.starts_with("B-") || l.starts_with("I-"));
    let chunks = is_bio.then(|| {
        let mut gc = 0;
        let mut pc = 0;
        let mut hit = 0;
        for (g, p) in gold.iter().zip(pred) {
            let a = bio_chunks(g);
            let b = bio_chunks(p);
            gc += a.len();
            pc += b.len();
            hit += a.intersection(&b).count();
        }
        ChunkScore {
            scores: Prf::from_counts(hit, pc, gc),
            gold: gc,
            predicted: pc,
            correct: hit,
        }
    });
    EvalReport {
        tokens,
        correct,
        accuracy: if tokens == 0 { 0.0 } else { correct as f64 / tokens as f64 },
        labels,
        confusion,
        chunks,
    }
}

/// `(start, end_exclusive, type)` spans. An `I-X` that does not continue an
/// `X` chunk opens a new one.
pub fn bio_chunks<S: AsRef<str>>(labels: &[S]) -> BTreeSet<(usize, usize, String)> {
    let mut out = BTreeSet::new();
    let mut open: Option<(usize, &str)> = None;
    for (t, l) in labels.iter().enumerate() {
        let l = l.as_ref();
        let (tag, kind) = match l.split_once('-') {
            Some((tag @ ("B" | "I"), kind)) => (tag, kind),
            _ => ("O", ""),
        };
        let continues = tag == "I" && open.is_some_and(|(_, k)| k == kind);
        if !continues {
            if let Some((start, k)) = open.take() {
                out.insert((start, t, k.to_string()));
            }
            if tag != "O" {
                open = Some((t, kind));
            }
        }
    }
    if let Some((start, k)) = open {
        out.insert((start, labels.len(), k.to_string()));
    }
    out
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "tokens     {}", self.tokens);
        let _ = writeln!(out, "accuracy   {:.4} ({}/{})", self.accuracy, self.correct, self.tokens);
        if let Some(c) = &self.chunks {
            let _ = writeln!(
                out,
                "chunk F1   {:.4} (P {:.4} R {:.4}; {} gold, {} predicted, {} correct)",
                c.scores.f1, c.scores.precision, c.scores.recall, c.gold, c.predicted, c.correct
            );
        }
        let width = self.labels.iter().map(|l| l.label.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(out, "\n{:<width$}  precision  recall  f1      gold  predicted", "label");
        for l in &self.labels {
            let _ = writeln!(
                out,
                "{:<width$}  {:<9.4}  {:<6.4}  {:<6.4}  {:<4}  {}",
                l.label, l.scores.precision, l.scores.recall, l.scores.f1, l.gold, l.predicted
            );
        }
        let _ = writeln!(out, "\nconfusion (rows gold, columns predicted)");
        let names: Vec<&str> = self.labels.iter().map(|l| l.label.as_str()).collect();
        let cell = names.iter().map(|n| n.len()).max().unwrap_or(1).max(5);
        let _ = write!(out, "{:<width$}", "");
        for n in &names {
            let _ = write!(out, "  {n:>cell$}");
        }
        out.push('\n');
        for g in &names {
            let _ = write!(out, "{g:<width$}");
            for p in &names {
                let n = self.confusion.get(&(g.to_string(), p.to_string())).copied().unwrap_or(0);
                let _ = write!(out, "  {n:>cell$}");
            }
            out.push('\n');
        }
        out
    }

    /// `key<TAB>value` lines.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "tokens\t{}", self.tokens);
        let _ = writeln!(out, "correct\t{}", self.correct);
        let _ = writeln!(out, "accuracy\t{}", self.accuracy);
        if let Some(c) = &self.chunks {
            let _ = writeln!(out, "chunk.precision\t{}", c.scores.precision);
            let _ = writeln!(out, "chunk.recall\t{}", c.scores.recall);
            let _ = writeln!(out, "chunk.f1\t{}", c.scores.f1);
            let _ = writeln!(out, "chunk.gold\t{}", c.gold);
            let _ = writeln!(out, "chunk.predicted\t{}", c.predicted);
            let _ = writeln!(out, "chunk.correct\t{}", c.correct);
        }
        for l in &self.labels {
            let _ = writeln!(out, "label.{}.precision\t{}", l.label, l.scores.precision);
            let _ = writeln!(out, "label.{}.recall\t{}", l.label, l.scores.recall);
            let _ = writeln!(out, "label.{}.f1\t{}", l.label, l.scores.f1);
        }
        for ((g, p), n) in &self.confusion {
            let _ = writeln!(out, "confusion.{g}.{p}\t{n}");
        }
        out
    }
}
