//! Whitespace-column CoNLL files: one token per line, blank lines between
//! sequences, `-DOCSTART-` lines ignored.

use std::fmt;

use crfkit::features::Token;
use crfkit::models::Sequence;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConllError {
    /// 1-based.
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ConllError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for ConllError {}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LineKind {
    Blank,
    DocStart,
    /// Token `position` of sequence `sequence`.
    Token { sequence: usize, position: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawLine {
    /// Line text without the line terminator.
    pub text: String,
    pub kind: LineKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConllSequence {
    pub rows: Vec<Vec<String>>,
    /// 1-based line of each row.
    pub lines: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConllCorpus {
    pub sequences: Vec<ConllSequence>,
    pub lines: Vec<RawLine>,
    /// Columns per token line; 0 for a file without tokens.
    pub columns: usize,
}

pub fn parse_conll(text: &str) -> Result<ConllCorpus, ConllError> {
    let mut corpus = ConllCorpus::default();
    let mut current: Option<ConllSequence> = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split_ascii_whitespace().collect();
        if fields.is_empty() {
            if let Some(seq) = current.take() {
                corpus.sequences.push(seq);
            }
            corpus.lines.push(RawLine { text: line.to_string(), kind: LineKind::Blank });
            continue;
        }
        if fields[0] == "-DOCSTART-" {
            if let Some(seq) = current.take() {
                corpus.sequences.push(seq);
            }
            corpus.lines.push(RawLine { text: line.to_string(), kind: LineKind::DocStart });
            continue;
        }
        if corpus.columns == 0 {
            corpus.columns = fields.len();
        } else if fields.len() != corpus.columns {
            return Err(ConllError {
                line: line_no,
                message: format!("expected {} columns, found {}", corpus.columns, fields.len()),
            });
        }
        let seq = current.get_or_insert_with(|| ConllSequence { rows: Vec::new(), lines: Vec::new() });
        corpus.lines.push(RawLine {
            text: line.to_string(),
            kind: LineKind::Token {
                sequence: corpus.sequences.len(),
                position: seq.rows.len(),
            },
        });
        seq.rows.push(fields.into_iter().map(String::from).collect());
        seq.lines.push(line_no);
    }
    if let Some(seq) = current.take() {
        corpus.sequences.push(seq);
    }
    Ok(corpus)
}

impl ConllSequence {
    /// Every column is an input column.
    pub fn tokens(&self) -> Vec<Token> {
        self.rows.iter().map(|r| Token::new(r.iter().cloned())).collect()
    }

    /// The final column is the label.
    pub fn labeled(&self) -> Sequence {
        Sequence {
            tokens: self.rows.iter().map(|r| Token::new(r[..r.len() - 1].iter().cloned())).collect(),
            labels: self.rows.iter().map(|r| r[r.len() - 1].clone()).collect(),
        }
    }
}

impl ConllCorpus {
    /// Training view: needs at least one input column besides the label.
    pub fn labeled(&self) -> Result<Vec<Sequence>, ConllError> {
        if let Some(s) = self.sequences.first() {
            if self.columns < 2 {
                return Err(ConllError {
                    line: s.lines[0],
                    message: "labeled data needs a token column and a label column".into(),
                });
            }
        }
        Ok(self.sequences.iter().map(ConllSequence::labeled).collect())
    }
}

/// Writes `sequences` as a labeled file, one token per line.
pub fn write_labeled(sequences: &[Sequence]) -> String {
    let mut out = String::new();
    for (i, s) in sequences.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for (t, l) in s.tokens.iter().zip(&s.labels) {
            for c in &t.columns {
                out.push_str(c);
                out.push(' ');
            }
            out.push_str(l);
            out.push('\n');
        }
    }
    out
}
