//! Text model files: `[header]`, `[labels]`, `[templates]`, `[features]`
//! sections followed by a SHA-256 checksum of everything before it.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{parse_templates, Alphabet, FeatureSpace};
use crate::objectives::RegularizerSpec;

use super::LinearChainModel;

pub const FORMAT_VERSION: &str = "1";
const MAGIC: &str = "crfkit-model";
const DROP_BELOW: f64 = 1e-12;

fn clean(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

fn regularizer_line(reg: RegularizerSpec) -> String {
    match reg {
        RegularizerSpec::None => "none".into(),
        RegularizerSpec::L2 { sigma2 } => format!("l2 {sigma2}"),
        RegularizerSpec::L1 { alpha } => format!("l1 {alpha}"),
    }
}

fn parse_regularizer(s: &str) -> Option<RegularizerSpec> {
    let mut it = s.split(' ');
    let kind = it.next()?;
    let reg = match kind {
        "none" => RegularizerSpec::None,
        "l2" => RegularizerSpec::L2 { sigma2: it.next()?.parse().ok()? },
        "l1" => RegularizerSpec::L1 { alpha: it.next()?.parse().ok()? },
        _ => return None,
    };
    if it.next().is_some() {
        return None;
    }
    Some(reg)
}

fn digest_hex(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(64);
    for b in Sha256::digest(bytes) {
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// Serializes deterministically; near-zero weights are omitted.
pub fn model_to_string(model: &LinearChainModel) -> String {
    let kept: Vec<(String, f64)> = model
        .weights
        .iter()
        .enumerate()
        .filter(|(_, w)| w.abs() >= DROP_BELOW)
        .map(|(i, &w)| (model.space.feature_key(i).expect("weight index in range"), w))
        .collect();
    let mut out = String::new();
    out.push_str("[header]\n");
    let _ = writeln!(out, "format\t{MAGIC}");
    let _ = writeln!(out, "version\t{FORMAT_VERSION}");
    let _ = writeln!(out, "labels\t{}", model.space.num_labels());
    let _ = writeln!(out, "templates\t{}", model.templates.len());
    let _ = writeln!(out, "features\t{}", kept.len());
    let _ = writeln!(out, "regularizer\t{}", regularizer_line(model.regularizer));
    let _ = writeln!(out, "checksum-algorithm\tsha256");
    for (k, v) in &model.metadata {
        let _ = writeln!(out, "meta.{}\t{}", clean(k), clean(v));
    }
    out.push_str("[labels]\n");
    for l in model.space.labels().iter() {
        let _ = writeln!(out, "{l}");
    }
    out.push_str("[templates]\n");
    for t in &model.templates {
        let _ = writeln!(out, "{}", t.to_line());
    }
    out.push_str("[features]\n");
    for (k, w) in &kept {
        let _ = writeln!(out, "{k}\t{w}");
    }
    let sum = digest_hex(out.as_bytes());
    let _ = writeln!(out, "checksum\t{sum}");
    out
}

pub fn save_model(model: &LinearChainModel, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_string(model)).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn malformed(section: &str, message: impl Into<String>) -> Error {
    Error::Malformed {
        section: section.into(),
        message: message.into(),
    }
}

pub fn model_from_str(text: &str) -> Result<LinearChainModel> {
    let body_end = text
        .strip_suffix('\n')
        .and_then(|t| t.rfind('\n').map(|i| i + 1))
        .ok_or(Error::Checksum)?;
    let (body, last) = text.split_at(body_end);
    let stated = last
        .strip_suffix('\n')
        .and_then(|l| l.strip_prefix("checksum\t"))
        .ok_or(Error::Checksum)?;
    if stated != digest_hex(body.as_bytes()) {
        return Err(Error::Checksum);
    }

    let mut sections: Vec<(&str, Vec<&str>)> = Vec::new();
    for line in body.lines() {
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            sections.push((name, Vec::new()));
        } else if let Some((_, lines)) = sections.last_mut() {
            lines.push(line);
        } else {
            return Err(malformed("header", "content before the first section"));
        }
    }
    let names: Vec<&str> = sections.iter().map(|(n, _)| *n).collect();
    if names != ["header", "labels", "templates", "features"] {
        return Err(malformed("header", format!("unexpected section layout {names:?}")));
    }
    let [header, labels, templates, features] = [0, 1, 2, 3].map(|i| &sections[i].1);

    let mut fields = std::collections::BTreeMap::new();
    let mut metadata = std::collections::BTreeMap::new();
    for line in header.iter() {
        let (k, v) = line
            .split_once('\t')
            .ok_or_else(|| malformed("header", format!("expected key<TAB>value, got `{line}`")))?;
        match k.strip_prefix("meta.") {
            Some(mk) => {
                metadata.insert(mk.to_string(), v.to_string());
            }
            None => {
                fields.insert(k, v);
            }
        }
    }
    let field = |k: &str| fields.get(k).copied().ok_or_else(|| malformed("header", format!("missing `{k}`")));
    if field("format")? != MAGIC {
        return Err(malformed("header", "not a model file"));
    }
    let version = field("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version.to_string(),
            expected: FORMAT_VERSION.to_string(),
        });
    }
    let count = |k: &str| -> Result<usize> {
        field(k)?
            .parse()
            .map_err(|_| malformed("header", format!("`{k}` is not a count")))
    };
    let regularizer = parse_regularizer(field("regularizer")?)
        .ok_or_else(|| malformed("header", "bad regularizer"))?;
    if labels.len() != count("labels")? {
        return Err(malformed("labels", "label count disagrees with header"));
    }
    if templates.len() != count("templates")? {
        return Err(malformed("templates", "template count disagrees with header"));
    }
    if features.len() != count("features")? {
        return Err(malformed("features", "feature count disagrees with header"));
    }
    let alphabet = Alphabet::from_keys(labels.iter());
    if alphabet.len() != labels.len() {
        return Err(malformed("labels", "duplicate label"));
    }
    let templates = parse_templates(&templates.join("\n")).map_err(|e| malformed("templates", e.to_string()))?;
    let mut keys = Vec::with_capacity(features.len());
    let mut weights = Vec::with_capacity(features.len());
    for line in features.iter() {
        let (k, w) = line
            .rsplit_once('\t')
            .ok_or_else(|| malformed("features", format!("expected key<TAB>weight, got `{line}`")))?;
        let w: f64 = w
            .parse()
            .ok()
            .filter(|w: &f64| w.is_finite())
            .ok_or_else(|| malformed("features", format!("bad weight in `{line}`")))?;
        keys.push(k);
        weights.push(w);
    }
    let space = FeatureSpace::from_keys(alphabet, &keys)?;
    Ok(LinearChainModel {
        space,
        templates,
        weights,
        regularizer,
        metadata,
    })
}

pub fn load_model(path: &Path) -> Result<LinearChainModel> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    model_from_str(&text)
}
