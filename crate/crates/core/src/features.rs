//! Observation templates, alphabets and the weight layout of a chain model.
//!
//! A template reads a window of tokens around a position and emits
//! observation functions (`identity@-1=the`). Observations are paired with
//! label configurations to form features:
//!
//! * node features `obs⊗Y` pair a node observation with the label at `t`;
//! * edge features `obs⊗X→Y` pair an edge observation with a transition;
//! * initial features `obs⊗<BOS>→Y` are edge features on the first position.
//!
//! The weight vector is laid out as `[initial | node | edge]`.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use crate::error::{Error, Result};

pub const BOS: &str = "<BOS>";
pub const EOS: &str = "<EOS>";
/// Observation present on every transition; pairs with label pairs to give
/// observation-independent transition weights.
pub const TRANSITION_OBS: &str = "<trans>";
pub const FEATURE_SEP: char = '⊗';
pub const TRANSITION_SEP: char = '→';

/// Bidirectional map between keys and dense indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Alphabet {
    keys: Vec<String>,
    index: HashMap<String, usize>,
    frozen: bool,
}

impl Alphabet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_keys<I, S>(keys: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut a = Self::new();
        for k in keys {
            a.intern(k.as_ref());
        }
        a
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<usize> {
        self.index.get(key).copied()
    }

    /// Returns the index for `key`, adding it unless the alphabet is frozen.
    pub fn intern(&mut self, key: &str) -> Option<usize> {
        if let Some(&i) = self.index.get(key) {
            return Some(i);
        }
        if self.frozen {
            return None;
        }
        let i = self.keys.len();
        self.keys.push(key.to_owned());
        self.index.insert(key.to_owned(), i);
        Some(i)
    }

    pub fn key(&self, index: usize) -> Option<&str> {
        self.keys.get(index).map(String::as_str)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.keys.iter().map(String::as_str)
    }
}

/// Sorted sparse vector; indices strictly increasing, no stored zeros.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseFeatureVector {
    entries: Vec<(u32, f64)>,
}

impl SparseFeatureVector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds from unordered entries; duplicates are summed and zeros dropped.
    pub fn from_entries<I: IntoIterator<Item = (usize, f64)>>(entries: I) -> Self {
        let mut v: Vec<(u32, f64)> = entries.into_iter().map(|(i, x)| (i as u32, x)).collect();
        v.sort_by_key(|e| e.0);
        let mut out: Vec<(u32, f64)> = Vec::with_capacity(v.len());
        for (i, x) in v {
            match out.last_mut() {
                Some(last) if last.0 == i => last.1 += x,
                _ => out.push((i, x)),
            }
        }
        out.retain(|e| e.1 != 0.0);
        Self { entries: out }
    }

    pub fn indicator(index: usize) -> Self {
        Self {
            entries: vec![(index as u32, 1.0)],
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.entries.iter().map(|&(i, x)| (i as usize, x))
    }

    pub fn dot(&self, weights: &[f64]) -> f64 {
        self.entries
            .iter()
            .map(|&(i, x)| weights[i as usize] * x)
            .sum()
    }

    /// `grad[i] += scale * x_i`.
    pub fn add_scaled_to(&self, grad: &mut [f64], scale: f64) {
        for &(i, x) in &self.entries {
            grad[i as usize] += scale * x;
        }
    }

    pub fn max_index(&self) -> Option<usize> {
        self.entries.last().map(|e| e.0 as usize)
    }
}

/// One token: ordered text columns. Column 0 is the surface form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub columns: Vec<String>,
}

impl Token {
    pub fn new<I, S>(columns: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            columns: columns.into_iter().map(Into::into).collect(),
        }
    }

    pub fn word(&self) -> &str {
        self.columns.first().map(String::as_str).unwrap_or("")
    }
}

pub fn tokens_from_words<S: AsRef<str>>(words: &[S]) -> Vec<Token> {
    words.iter().map(|w| Token::new([w.as_ref()])).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateKind {
    Node,
    Edge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueMode {
    Binary,
    Real,
}

/// What a template reads from each token in its window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenFunction {
    /// Column 0 verbatim.
    Identity,
    Lower,
    Prefix(usize),
    Suffix(usize),
    /// Character classes with runs collapsed: `McDonald` -> `XxXx`.
    Shape,
    Capitalized,
    Digit,
    Column(usize),
    /// Character count.
    Length,
    /// Constant observation, ignores the window.
    Bias,
}

impl TokenFunction {
    fn parse(name: &str) -> Option<Self> {
        let num = |prefix: &str| -> Option<usize> {
            name.strip_prefix(prefix)
                .and_then(|n| n.parse::<usize>().ok())
        };
        Some(match name {
            "identity" | "word" => TokenFunction::Identity,
            "lower" => TokenFunction::Lower,
            "shape" => TokenFunction::Shape,
            "cap" => TokenFunction::Capitalized,
            "digit" => TokenFunction::Digit,
            "len" => TokenFunction::Length,
            "bias" => TokenFunction::Bias,
            _ => {
                if let Some(n) = num("pre") {
                    TokenFunction::Prefix(n)
                } else if let Some(n) = num("suf") {
                    TokenFunction::Suffix(n)
                } else {
                    let n = num("col")?;
                    TokenFunction::Column(n)
                }
            }
        })
    }

    fn is_predicate(self) -> bool {
        matches!(self, TokenFunction::Capitalized | TokenFunction::Digit)
    }

    /// Text value for binary mode; `None` means the observation is absent.
    fn text(self, token: &Token) -> Option<String> {
        let word = token.word();
        match self {
            TokenFunction::Identity => Some(word.to_owned()),
            TokenFunction::Lower => Some(word.to_lowercase()),
            TokenFunction::Prefix(n) => Some(word.chars().take(n).collect()),
            TokenFunction::Suffix(n) => {
                let count = word.chars().count();
                Some(word.chars().skip(count.saturating_sub(n)).collect())
            }
            TokenFunction::Shape => Some(shape(word)),
            TokenFunction::Capitalized => word
                .chars()
                .next()
                .filter(|c| c.is_uppercase())
                .map(|_| "1".to_owned()),
            TokenFunction::Digit => word
                .chars()
                .any(|c| c.is_ascii_digit())
                .then(|| "1".to_owned()),
            TokenFunction::Column(k) => token.columns.get(k).cloned(),
            TokenFunction::Length => Some(word.chars().count().to_string()),
            TokenFunction::Bias => Some(String::new()),
        }
    }

    /// Numeric value for real mode.
    fn real(self, token: &Token) -> Option<f64> {
        match self {
            TokenFunction::Length => Some(word_len(token) as f64),
            TokenFunction::Column(k) => token.columns.get(k)?.parse().ok(),
            TokenFunction::Identity => token.word().parse().ok(),
            TokenFunction::Bias => Some(1.0),
            other => other.text(token).map(|_| 1.0),
        }
        .filter(|v: &f64| v.is_finite())
    }
}

fn word_len(token: &Token) -> usize {
    token.word().chars().count()
}

fn shape(word: &str) -> String {
    let mut out = String::new();
    for c in word.chars() {
        let class = if c.is_uppercase() {
            'X'
        } else if c.is_lowercase() {
            'x'
        } else if c.is_ascii_digit() {
            'd'
        } else {
            c
        };
        if !out.ends_with(class) {
            out.push(class);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureTemplate {
    pub name: String,
    pub function: TokenFunction,
    pub offsets: Vec<isize>,
    pub kind: TemplateKind,
    pub mode: ValueMode,
}

impl FeatureTemplate {
    pub fn new(name: &str, kind: TemplateKind, offsets: &[isize], mode: ValueMode) -> Result<Self> {
        let function = TokenFunction::parse(name)
            .ok_or_else(|| Error::param(format!("unknown template function `{name}`")))?;
        if offsets.is_empty() && function != TokenFunction::Bias {
            return Err(Error::param(format!("template `{name}` needs at least one offset")));
        }
        Ok(Self {
            name: name.to_owned(),
            function,
            offsets: offsets.to_vec(),
            kind,
            mode,
        })
    }

    pub fn node(name: &str, offsets: &[isize]) -> Self {
        Self::new(name, TemplateKind::Node, offsets, ValueMode::Binary).expect("valid template")
    }

    pub fn edge(name: &str, offsets: &[isize]) -> Self {
        Self::new(name, TemplateKind::Edge, offsets, ValueMode::Binary).expect("valid template")
    }

    fn prefix(&self) -> String {
        let offs: Vec<String> = self.offsets.iter().map(|o| o.to_string()).collect();
        if offs.is_empty() {
            self.name.clone()
        } else {
            format!("{}@{}", self.name, offs.join(","))
        }
    }

    /// `None` if the observation is absent at this position.
    pub fn apply(&self, tokens: &[Token], position: usize) -> Option<ObservationFunction> {
        let prefix = self.prefix();
        if self.function == TokenFunction::Bias {
            return Some(ObservationFunction {
                template: self.name.clone(),
                key: prefix,
                value: 1.0,
            });
        }
        let mut parts = Vec::with_capacity(self.offsets.len());
        let mut value = 1.0;
        let mut boundary = false;
        for &off in &self.offsets {
            let at = position as isize + off;
            if at < 0 {
                parts.push(BOS.to_owned());
                boundary = true;
            } else if at as usize >= tokens.len() {
                parts.push(EOS.to_owned());
                boundary = true;
            } else {
                let token = &tokens[at as usize];
                match self.mode {
                    ValueMode::Binary => parts.push(self.function.text(token)?),
                    ValueMode::Real => {
                        value *= self.function.real(token)?;
                        parts.push(String::new());
                    }
                }
            }
        }
        let key = match self.mode {
            ValueMode::Real if !boundary => prefix,
            ValueMode::Real => {
                value = 1.0;
                format!("{prefix}={}", parts.join("|"))
            }
            ValueMode::Binary if self.function.is_predicate() && !boundary => prefix,
            ValueMode::Binary => format!("{prefix}={}", parts.join("|")),
        };
        if value == 0.0 {
            return None;
        }
        Some(ObservationFunction {
            template: self.name.clone(),
            key,
            value,
        })
    }

    /// Serialized form accepted by [`parse_templates`].
    pub fn to_line(&self) -> String {
        let mut s = format!(
            "{} {}",
            self.name,
            match self.kind {
                TemplateKind::Node => "node",
                TemplateKind::Edge => "edge",
            }
        );
        for o in &self.offsets {
            s.push(' ');
            s.push_str(&o.to_string());
        }
        if self.mode == ValueMode::Real {
            s.push_str(" real");
        }
        s
    }
}

impl fmt::Display for FeatureTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_line())
    }
}

/// Parses a template file: `name kind offsets... [real]`, `#` comments.
pub fn parse_templates(text: &str) -> Result<Vec<FeatureTemplate>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Template {
            line: i + 1,
            message,
        };
        let mut fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 2 {
            return Err(err("expected `name kind offsets... [real]`".into()));
        }
        let mode = if fields.last() == Some(&"real") {
            fields.pop();
            ValueMode::Real
        } else {
            ValueMode::Binary
        };
        let kind = match fields[1] {
            "node" => TemplateKind::Node,
            "edge" => TemplateKind::Edge,
            other => return Err(err(format!("unknown kind `{other}`"))),
        };
        let offsets = fields[2..]
            .iter()
            .map(|f| f.parse::<isize>().map_err(|_| err(format!("bad offset `{f}`"))))
            .collect::<Result<Vec<_>>>()?;
        let t = FeatureTemplate::new(fields[0], kind, &offsets, mode).map_err(|e| err(e.to_string()))?;
        out.push(t);
    }
    Ok(out)
}

pub fn default_templates() -> Vec<FeatureTemplate> {
    vec![
        FeatureTemplate::node("bias", &[]),
        FeatureTemplate::node("identity", &[0]),
        FeatureTemplate::node("identity", &[-1]),
        FeatureTemplate::node("identity", &[1]),
        FeatureTemplate::node("suf3", &[0]),
        FeatureTemplate::node("shape", &[0]),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationFunction {
    pub template: String,
    pub key: String,
    pub value: f64,
}

/// Evaluates every template at `position`, in template order.
pub fn apply_templates(
    tokens: &[Token],
    position: usize,
    templates: &[FeatureTemplate],
) -> Vec<ObservationFunction> {
    templates
        .iter()
        .filter_map(|t| t.apply(tokens, position))
        .collect()
}

/// Observations of one sequence, indexed by the observation alphabet.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainInstance {
    pub node_obs: Vec<SparseFeatureVector>,
    /// Observations on the transition into `t`; at `t = 0` the previous
    /// label is the begin state.
    pub edge_obs: Vec<SparseFeatureVector>,
    pub labels: Option<Vec<usize>>,
}

impl ChainInstance {
    pub fn len(&self) -> usize {
        self.node_obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_obs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    /// Only configurations observed in training labels.
    Supported,
    /// Every observation paired with every label configuration.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureBlock {
    Initial,
    Node,
    Edge,
}

/// Features of one block: `(observation, configuration)` pairs. Node and
/// initial configurations are label indices; edge configurations are
/// `prev * M + cur`.
#[derive(Debug, Clone, Default, PartialEq)]
struct ConfigTable {
    entries: Vec<(u32, u32)>,
    lookup: HashMap<(u32, u32), u32>,
    by_obs: Vec<Vec<(u32, u32)>>,
}

impl ConfigTable {
    fn insert(&mut self, obs: usize, config: usize) -> usize {
        let k = (obs as u32, config as u32);
        if let Some(&j) = self.lookup.get(&k) {
            return j as usize;
        }
        let j = self.entries.len() as u32;
        self.entries.push(k);
        self.lookup.insert(k, j);
        if self.by_obs.len() <= obs {
            self.by_obs.resize(obs + 1, Vec::new());
        }
        self.by_obs[obs].push((config as u32, j));
        j as usize
    }

    fn get(&self, obs: usize, config: usize) -> Option<usize> {
        self.lookup
            .get(&(obs as u32, config as u32))
            .map(|&j| j as usize)
    }

    fn len(&self) -> usize {
        self.entries.len()
    }

    fn for_obs(&self, obs: usize) -> &[(u32, u32)] {
        self.by_obs.get(obs).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Label and observation alphabets plus the feature index.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSpace {
    labels: Alphabet,
    observations: Alphabet,
    initial: ConfigTable,
    node: ConfigTable,
    edge: ConfigTable,
}

impl FeatureSpace {
    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &Alphabet {
        &self.labels
    }

    pub fn observations(&self) -> &Alphabet {
        &self.observations
    }

    pub fn num_weights(&self) -> usize {
        self.initial.len() + self.node.len() + self.edge.len()
    }

    pub fn block_len(&self, block: FeatureBlock) -> usize {
        match block {
            FeatureBlock::Initial => self.initial.len(),
            FeatureBlock::Node => self.node.len(),
            FeatureBlock::Edge => self.edge.len(),
        }
    }

    /// Weight index range of each block, in layout order.
    pub fn block_range(&self, block: FeatureBlock) -> std::ops::Range<usize> {
        let a = self.initial.len();
        let b = a + self.node.len();
        match block {
            FeatureBlock::Initial => 0..a,
            FeatureBlock::Node => a..b,
            FeatureBlock::Edge => b..b + self.edge.len(),
        }
    }

    fn node_offset(&self) -> usize {
        self.initial.len()
    }

    fn edge_offset(&self) -> usize {
        self.initial.len() + self.node.len()
    }

    pub fn node_feature(&self, obs: usize, label: usize) -> Option<usize> {
        self.node.get(obs, label).map(|j| j + self.node_offset())
    }

    pub fn edge_feature(&self, obs: usize, prev: usize, cur: usize) -> Option<usize> {
        let m = self.num_labels();
        self.edge
            .get(obs, prev * m + cur)
            .map(|j| j + self.edge_offset())
    }

    pub fn initial_feature(&self, obs: usize, cur: usize) -> Option<usize> {
        self.initial.get(obs, cur)
    }

    pub fn observation_index(&self, key: &str) -> Option<usize> {
        self.observations.get(key)
    }

    /// `(label, weight index)` pairs attached to a node observation.
    pub fn node_expansion(&self, obs: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let off = self.node_offset();
        self.node
            .for_obs(obs)
            .iter()
            .map(move |&(c, j)| (c as usize, j as usize + off))
    }

    pub fn initial_expansion(&self, obs: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.initial
            .for_obs(obs)
            .iter()
            .map(|&(c, j)| (c as usize, j as usize))
    }

    /// `(prev * M + cur, weight index)` pairs attached to an edge observation.
    pub fn edge_expansion(&self, obs: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let off = self.edge_offset();
        self.edge
            .for_obs(obs)
            .iter()
            .map(move |&(c, j)| (c as usize, j as usize + off))
    }

    /// Human-readable key of a weight index.
    pub fn feature_key(&self, index: usize) -> Option<String> {
        let m = self.num_labels();
        let label = |i: u32| self.labels.key(i as usize).unwrap_or("?");
        let obs = |i: u32| self.observations.key(i as usize).unwrap_or("?");
        if index < self.node_offset() {
            let (o, c) = self.initial.entries[index];
            Some(format!("{}{FEATURE_SEP}{BOS}{TRANSITION_SEP}{}", obs(o), label(c)))
        } else if index < self.edge_offset() {
            let (o, c) = self.node.entries[index - self.node_offset()];
            Some(format!("{}{FEATURE_SEP}{}", obs(o), label(c)))
        } else if index < self.num_weights() {
            let (o, c) = self.edge.entries[index - self.edge_offset()];
            let (p, q) = (c as usize / m, c as usize % m);
            Some(format!(
                "{}{FEATURE_SEP}{}{TRANSITION_SEP}{}",
                obs(o),
                label(p as u32),
                label(q as u32)
            ))
        } else {
            None
        }
    }

    /// Rebuilds a frozen space from labels and feature keys in layout order.
    pub fn from_keys<S: AsRef<str>>(labels: Alphabet, keys: &[S]) -> Result<Self> {
        let mut labels = labels;
        labels.freeze();
        let m = labels.len();
        let mut observations = Alphabet::new();
        observations.intern(TRANSITION_OBS);
        let mut space = FeatureSpace {
            labels,
            observations,
            initial: ConfigTable::default(),
            node: ConfigTable::default(),
            edge: ConfigTable::default(),
        };
        let mut stage = FeatureBlock::Initial;
        for key in keys {
            let key = key.as_ref();
            let bad = |msg: &str| Error::Malformed {
                section: "features".into(),
                message: format!("{msg}: `{key}`"),
            };
            let (obs, config) = key.rsplit_once(FEATURE_SEP).ok_or_else(|| bad("missing separator"))?;
            let o = space.observations.intern(obs).expect("unfrozen");
            let label = |name: &str| space.labels.get(name).ok_or_else(|| bad("unknown label"));
            let (block, j) = match config.split_once(TRANSITION_SEP) {
                Some((prev, cur)) if prev == BOS => (FeatureBlock::Initial, (o, label(cur)?)),
                Some((prev, cur)) => (FeatureBlock::Edge, (o, label(prev)? * m + label(cur)?)),
                None => (FeatureBlock::Node, (o, label(config)?)),
            };
            if block_rank(block) < block_rank(stage) {
                return Err(bad("feature out of layout order"));
            }
            stage = block;
            let table = match block {
                FeatureBlock::Initial => &mut space.initial,
                FeatureBlock::Node => &mut space.node,
                FeatureBlock::Edge => &mut space.edge,
            };
            let before = table.len();
            table.insert(j.0, j.1);
            if table.len() == before {
                return Err(bad("duplicate feature"));
            }
        }
        space.observations.freeze();
        Ok(space)
    }

    /// Featurizes against the frozen alphabets; unseen observations are dropped
    /// and unknown gold labels leave `labels` empty.
    pub fn featurize<S: AsRef<str>>(
        &self,
        tokens: &[Token],
        labels: Option<&[S]>,
        templates: &[FeatureTemplate],
    ) -> ChainInstance {
        let (node_obs, edge_obs) = observe(tokens, templates, |key| self.observations.get(key));
        let labels = labels.and_then(|ls| {
            ls.iter()
                .map(|l| self.labels.get(l.as_ref()))
                .collect::<Option<Vec<_>>>()
        });
        ChainInstance {
            node_obs,
            edge_obs,
            labels,
        }
    }

    /// Frozen counterpart of [`FeatureSpaceBuilder::add_vectors`].
    pub fn featurize_vectors<K: AsRef<str>, S: AsRef<str>>(
        &self,
        node_keys: &[Vec<(K, f64)>],
        labels: Option<&[S]>,
    ) -> ChainInstance {
        let (node_obs, edge_obs) = observe_vectors(node_keys, |key| self.observations.get(key));
        let labels = labels.and_then(|ls| {
            ls.iter()
                .map(|l| self.labels.get(l.as_ref()))
                .collect::<Option<Vec<_>>>()
        });
        ChainInstance {
            node_obs,
            edge_obs,
            labels,
        }
    }

    /// Log-potentials of one instance. Node scores are folded into the
    /// incoming transition tables.
    pub fn potentials(&self, inst: &ChainInstance, weights: &[f64]) -> crate::chain::ChainPotentials {
        let m = self.num_labels();
        let t_len = inst.len();
        let mut node = vec![0.0; m];
        let mut initial = vec![0.0; m];
        let mut transitions = Vec::with_capacity(t_len.saturating_sub(1));
        for t in 0..t_len {
            node.iter_mut().for_each(|x| *x = 0.0);
            for (o, v) in inst.node_obs[t].iter() {
                for (y, w) in self.node_expansion(o) {
                    node[y] += v * weights[w];
                }
            }
            if t == 0 {
                for (o, v) in inst.edge_obs[0].iter() {
                    for (y, w) in self.initial_expansion(o) {
                        initial[y] += v * weights[w];
                    }
                }
                for y in 0..m {
                    initial[y] += node[y];
                }
            } else {
                let mut table = vec![0.0; m * m];
                for (o, v) in inst.edge_obs[t].iter() {
                    for (c, w) in self.edge_expansion(o) {
                        table[c] += v * weights[w];
                    }
                }
                for row in table.chunks_exact_mut(m) {
                    for (cell, n) in row.iter_mut().zip(&node) {
                        *cell += n;
                    }
                }
                transitions.push(table);
            }
        }
        crate::chain::ChainPotentials::new(m, initial, transitions)
            .expect("feature space produces well-formed tables")
    }

    /// `grad += scale * f(x, y)` for a complete labeling.
    pub fn add_labeling_features(&self, inst: &ChainInstance, labels: &[usize], grad: &mut [f64], scale: f64) {
        let m = self.num_labels();
        for t in 0..inst.len() {
            let y = labels[t];
            for (o, v) in inst.node_obs[t].iter() {
                if let Some(w) = self.node_feature(o, y) {
                    grad[w] += scale * v;
                }
            }
            for (o, v) in inst.edge_obs[t].iter() {
                let w = if t == 0 {
                    self.initial_feature(o, y)
                } else {
                    self.edge.get(o, labels[t - 1] * m + y).map(|j| j + self.edge_offset())
                };
                if let Some(w) = w {
                    grad[w] += scale * v;
                }
            }
        }
    }

    /// `grad += scale * E[f]` given node marginals (`T × M`) and edge
    /// marginals (`T - 1` tables of `M × M`).
    pub fn add_expected_features(
        &self,
        inst: &ChainInstance,
        node_marginals: &[Vec<f64>],
        edge_marginals: &[Vec<f64>],
        grad: &mut [f64],
        scale: f64,
    ) {
        for t in 0..inst.len() {
            let p = &node_marginals[t];
            for (o, v) in inst.node_obs[t].iter() {
                for (y, w) in self.node_expansion(o) {
                    grad[w] += scale * v * p[y];
                }
            }
            if t == 0 {
                for (o, v) in inst.edge_obs[0].iter() {
                    for (y, w) in self.initial_expansion(o) {
                        grad[w] += scale * v * p[y];
                    }
                }
            } else {
                let pe = &edge_marginals[t - 1];
                for (o, v) in inst.edge_obs[t].iter() {
                    for (c, w) in self.edge_expansion(o) {
                        grad[w] += scale * v * pe[c];
                    }
                }
            }
        }
    }

    /// Per-label feature vectors of the unary factor at `t`, in weight
    /// indices. Position 0 includes the initial-transition features.
    pub fn node_factor_features(&self, inst: &ChainInstance, t: usize) -> Vec<SparseFeatureVector> {
        let m = self.num_labels();
        let mut per_label: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
        for (o, v) in inst.node_obs[t].iter() {
            for (y, w) in self.node_expansion(o) {
                per_label[y].push((w, v));
            }
        }
        if t == 0 {
            for (o, v) in inst.edge_obs[0].iter() {
                for (y, w) in self.initial_expansion(o) {
                    per_label[y].push((w, v));
                }
            }
        }
        per_label
            .into_iter()
            .map(SparseFeatureVector::from_entries)
            .collect()
    }

    /// Row-major `(prev, cur)` feature vectors of the transition into `t ≥ 1`.
    pub fn edge_factor_features(&self, inst: &ChainInstance, t: usize) -> Vec<SparseFeatureVector> {
        let m = self.num_labels();
        let mut per_cfg: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m * m];
        for (o, v) in inst.edge_obs[t].iter() {
            for (c, w) in self.edge_expansion(o) {
                per_cfg[c].push((w, v));
            }
        }
        per_cfg
            .into_iter()
            .map(SparseFeatureVector::from_entries)
            .collect()
    }

    /// Remaps `weights` from `self` onto `other` by feature key; features
    /// missing from `self` start at zero.
    pub fn remap_weights(&self, weights: &[f64], other: &FeatureSpace) -> Vec<f64> {
        let mut keyed = HashMap::with_capacity(self.num_weights());
        for (i, &w) in weights.iter().enumerate() {
            if let Some(k) = self.feature_key(i) {
                keyed.insert(k, w);
            }
        }
        (0..other.num_weights())
            .map(|i| {
                other
                    .feature_key(i)
                    .and_then(|k| keyed.get(&k).copied())
                    .unwrap_or(0.0)
            })
            .collect()
    }
}

fn block_rank(b: FeatureBlock) -> u8 {
    match b {
        FeatureBlock::Initial => 0,
        FeatureBlock::Node => 1,
        FeatureBlock::Edge => 2,
    }
}

fn observe<F>(
    tokens: &[Token],
    templates: &[FeatureTemplate],
    mut lookup: F,
) -> (Vec<SparseFeatureVector>, Vec<SparseFeatureVector>)
where
    F: FnMut(&str) -> Option<usize>,
{
    let trans = lookup(TRANSITION_OBS);
    let mut node_obs = Vec::with_capacity(tokens.len());
    let mut edge_obs = Vec::with_capacity(tokens.len());
    for t in 0..tokens.len() {
        let mut node = Vec::new();
        let mut edge = Vec::new();
        if let Some(tr) = trans {
            edge.push((tr, 1.0));
        }
        for template in templates {
            if let Some(obs) = template.apply(tokens, t) {
                if let Some(i) = lookup(&obs.key) {
                    match template.kind {
                        TemplateKind::Node => node.push((i, obs.value)),
                        TemplateKind::Edge => edge.push((i, obs.value)),
                    }
                }
            }
        }
        node_obs.push(SparseFeatureVector::from_entries(node));
        edge_obs.push(SparseFeatureVector::from_entries(edge));
    }
    (node_obs, edge_obs)
}

fn observe_vectors<K, F>(node_keys: &[Vec<(K, f64)>], mut lookup: F) -> (Vec<SparseFeatureVector>, Vec<SparseFeatureVector>)
where
    K: AsRef<str>,
    F: FnMut(&str) -> Option<usize>,
{
    let trans = lookup(TRANSITION_OBS);
    let edge = SparseFeatureVector::from_entries(trans.map(|tr| (tr, 1.0)));
    let node_obs = node_keys
        .iter()
        .map(|pairs| {
            SparseFeatureVector::from_entries(
                pairs
                    .iter()
                    .filter_map(|(k, v)| lookup(k.as_ref()).map(|i| (i, *v))),
            )
        })
        .collect();
    (node_obs, vec![edge; node_keys.len()])
}

/// Interning side of featurization, used while reading a training corpus.
#[derive(Debug, Clone)]
pub struct FeatureSpaceBuilder {
    labels: Alphabet,
    observations: Alphabet,
    supported_initial: BTreeSet<(usize, usize)>,
    supported_node: BTreeSet<(usize, usize)>,
    supported_edge: BTreeSet<(usize, usize, usize)>,
    node_seen: Vec<usize>,
    edge_seen: Vec<usize>,
    initial_seen: Vec<usize>,
    node_seen_set: BTreeSet<usize>,
    edge_seen_set: BTreeSet<usize>,
    initial_seen_set: BTreeSet<usize>,
}

impl Default for FeatureSpaceBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl FeatureSpaceBuilder {
    pub fn new() -> Self {
        let mut observations = Alphabet::new();
        observations.intern(TRANSITION_OBS);
        Self {
            labels: Alphabet::new(),
            observations,
            supported_initial: BTreeSet::new(),
            supported_node: BTreeSet::new(),
            supported_edge: BTreeSet::new(),
            node_seen: Vec::new(),
            edge_seen: Vec::new(),
            initial_seen: Vec::new(),
            node_seen_set: BTreeSet::new(),
            edge_seen_set: BTreeSet::new(),
            initial_seen_set: BTreeSet::new(),
        }
    }

    /// Starts from a fixed label set (in the given order).
    pub fn with_labels<S: AsRef<str>>(labels: &[S]) -> Self {
        let mut b = Self::new();
        for l in labels {
            b.labels.intern(l.as_ref());
        }
        b
    }

    pub fn labels(&self) -> &Alphabet {
        &self.labels
    }

    pub fn observations(&self) -> &Alphabet {
        &self.observations
    }

    /// Interns labels and observations of one training sequence.
    pub fn add<S: AsRef<str>>(
        &mut self,
        tokens: &[Token],
        labels: &[S],
        templates: &[FeatureTemplate],
    ) -> Result<ChainInstance> {
        if tokens.len() != labels.len() {
            return Err(Error::param(format!(
                "{} tokens but {} labels",
                tokens.len(),
                labels.len()
            )));
        }
        let ys = self.intern_labels(labels)?;
        let obs = &mut self.observations;
        let (node_obs, edge_obs) = observe(tokens, templates, |key| obs.intern(key));
        Ok(self.record(node_obs, edge_obs, ys))
    }

    /// Like [`add`](Self::add) for pre-computed node observations: position
    /// `t` carries the `(key, value)` pairs of `node_keys[t]` and the implicit
    /// transition observation.
    pub fn add_vectors<K: AsRef<str>, S: AsRef<str>>(
        &mut self,
        node_keys: &[Vec<(K, f64)>],
        labels: &[S],
    ) -> Result<ChainInstance> {
        if node_keys.len() != labels.len() {
            return Err(Error::param(format!(
                "{} positions but {} labels",
                node_keys.len(),
                labels.len()
            )));
        }
        let ys = self.intern_labels(labels)?;
        let obs = &mut self.observations;
        let (node_obs, edge_obs) = observe_vectors(node_keys, |key| obs.intern(key));
        Ok(self.record(node_obs, edge_obs, ys))
    }

    fn intern_labels<S: AsRef<str>>(&mut self, labels: &[S]) -> Result<Vec<usize>> {
        let mut ys = Vec::with_capacity(labels.len());
        for l in labels {
            let l = l.as_ref();
            if l == BOS {
                return Err(Error::param(format!("`{BOS}` is reserved")));
            }
            ys.push(
                self.labels
                    .intern(l)
                    .ok_or_else(|| Error::param(format!("unknown label `{l}`")))?,
            );
        }
        Ok(ys)
    }

    fn record(
        &mut self,
        node_obs: Vec<SparseFeatureVector>,
        edge_obs: Vec<SparseFeatureVector>,
        ys: Vec<usize>,
    ) -> ChainInstance {
        for t in 0..node_obs.len() {
            for (o, _) in node_obs[t].iter() {
                if self.node_seen_set.insert(o) {
                    self.node_seen.push(o);
                }
                self.supported_node.insert((o, ys[t]));
            }
            for (o, _) in edge_obs[t].iter() {
                if t == 0 {
                    if self.initial_seen_set.insert(o) {
                        self.initial_seen.push(o);
                    }
                    self.supported_initial.insert((o, ys[0]));
                } else {
                    if self.edge_seen_set.insert(o) {
                        self.edge_seen.push(o);
                    }
                    self.supported_edge.insert((o, ys[t - 1], ys[t]));
                }
            }
        }
        ChainInstance {
            node_obs,
            edge_obs,
            labels: Some(ys),
        }
    }

    /// Freezes the alphabets and lays out the feature index.
    ///
    /// Supported features are ordered by (observation, configuration); full
    /// mode enumerates every label configuration of every seen observation.
    pub fn finish(self, mode: FeatureMode) -> FeatureSpace {
        let m = self.labels.len();
        let mut initial = ConfigTable::default();
        let mut node = ConfigTable::default();
        let mut edge = ConfigTable::default();
        match mode {
            FeatureMode::Supported => {
                for &(o, y) in &self.supported_initial {
                    initial.insert(o, y);
                }
                for &(o, y) in &self.supported_node {
                    node.insert(o, y);
                }
                for &(o, p, y) in &self.supported_edge {
                    edge.insert(o, p * m + y);
                }
            }
            FeatureMode::Full => {
                for &o in &self.initial_seen_set {
                    for y in 0..m {
                        initial.insert(o, y);
                    }
                }
                for &o in &self.node_seen_set {
                    for y in 0..m {
                        node.insert(o, y);
                    }
                }
                for &o in &self.edge_seen_set {
                    for c in 0..m * m {
                        edge.insert(o, c);
                    }
                }
            }
        }
        let mut labels = self.labels;
        let mut observations = self.observations;
        labels.freeze();
        observations.freeze();
        FeatureSpace {
            labels,
            observations,
            initial,
            node,
            edge,
        }
    }
}

/// What to do with features that never fire on a training configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnsupportedPolicy {
    /// Keep only features that fire on gold configurations.
    SupportedOnly,
    /// Add features for configurations whose model marginal exceeds epsilon.
    Expand { epsilon: f64 },
}

pub const DEFAULT_UNSUPPORTED_EPSILON: f64 = 0.1;

/// Rebuilds the feature index under `policy`, carrying weights over by key.
///
/// In expand mode, the current model's node and edge marginals on every
/// training instance decide which unsupported configurations earn a
/// feature (`p(y_c | x) > epsilon`).
pub fn prune_or_expand_unsupported(
    space: &FeatureSpace,
    weights: &[f64],
    instances: &[ChainInstance],
    policy: UnsupportedPolicy,
) -> Result<(FeatureSpace, Vec<f64>)> {
    let m = space.num_labels();
    let mut initial: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut node: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut edge: BTreeSet<(usize, usize)> = BTreeSet::new();
    let epsilon = match policy {
        UnsupportedPolicy::SupportedOnly => None,
        UnsupportedPolicy::Expand { epsilon } => {
            if !(epsilon > 0.0 && epsilon <= 1.0) {
                return Err(Error::param(format!("epsilon must lie in (0, 1], got {epsilon}")));
            }
            Some(epsilon)
        }
    };
    for (i, inst) in instances.iter().enumerate() {
        if let Some(ys) = &inst.labels {
            for t in 0..inst.len() {
                for (o, _) in inst.node_obs[t].iter() {
                    node.insert((o, ys[t]));
                }
                for (o, _) in inst.edge_obs[t].iter() {
                    if t == 0 {
                        initial.insert((o, ys[0]));
                    } else {
                        edge.insert((o, ys[t - 1] * m + ys[t]));
                    }
                }
            }
        }
        let Some(eps) = epsilon else { continue };
        if inst.is_empty() {
            continue;
        }
        let pot = space.potentials(inst, weights);
        let lattice = crate::chain::ChainLattice::compute(&pot).map_err(|e| e.at_instance(i))?;
        let nodes = lattice.node_marginals(&pot);
        let edges = lattice.edge_marginals(&pot);
        for t in 0..inst.len() {
            for y in 0..m {
                if nodes[t][y] > eps {
                    for (o, _) in inst.node_obs[t].iter() {
                        node.insert((o, y));
                    }
                    if t == 0 {
                        for (o, _) in inst.edge_obs[0].iter() {
                            initial.insert((o, y));
                        }
                    }
                }
            }
            if t > 0 {
                for c in 0..m * m {
                    if edges[t - 1][c] > eps {
                        for (o, _) in inst.edge_obs[t].iter() {
                            edge.insert((o, c));
                        }
                    }
                }
            }
        }
    }
    let mut next = FeatureSpace {
        labels: space.labels.clone(),
        observations: space.observations.clone(),
        initial: ConfigTable::default(),
        node: ConfigTable::default(),
        edge: ConfigTable::default(),
    };
    for (o, y) in initial {
        next.initial.insert(o, y);
    }
    for (o, y) in node {
        next.node.insert(o, y);
    }
    for (o, c) in edge {
        next.edge.insert(o, c);
    }
    let remapped = space.remap_weights(weights, &next);
    Ok((next, remapped))
}

/// Per-observation standardization of real-valued feature values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RealFeatureScaling {
    stats: HashMap<usize, (f64, f64)>,
}

impl RealFeatureScaling {
    /// Fits mean and standard deviation of every observation whose value is not
    /// always 1 (binary observations are left alone).
    pub fn fit(instances: &[ChainInstance]) -> Self {
        let mut acc: HashMap<usize, (f64, f64, usize, bool)> = HashMap::new();
        for inst in instances {
            for v in inst.node_obs.iter().chain(&inst.edge_obs) {
                for (o, x) in v.iter() {
                    let e = acc.entry(o).or_insert((0.0, 0.0, 0, false));
                    e.0 += x;
                    e.1 += x * x;
                    e.2 += 1;
                    e.3 |= x != 1.0;
                }
            }
        }
        let stats = acc
            .into_iter()
            .filter(|(_, e)| e.3)
            .map(|(o, (s, ss, n, _))| {
                let n = n as f64;
                let mean = s / n;
                let var = (ss / n - mean * mean).max(0.0);
                let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
                (o, (mean, sd))
            })
            .collect();
        Self { stats }
    }

    pub fn apply(&self, inst: &mut ChainInstance) {
        let scale = |v: &SparseFeatureVector| {
            SparseFeatureVector::from_entries(v.iter().map(|(o, x)| match self.stats.get(&o) {
                Some(&(mean, sd)) => (o, (x - mean) / sd),
                None => (o, x),
            }))
        };
        inst.node_obs = inst.node_obs.iter().map(scale).collect();
        inst.edge_obs = inst.edge_obs.iter().map(scale).collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(words: &[&str]) -> Vec<Token> {
        tokens_from_words(words)
    }

    #[test]
    fn alphabet_roundtrip_and_freeze() {
        let mut a = Alphabet::new();
        assert_eq!(a.intern("x"), Some(0));
        assert_eq!(a.intern("y"), Some(1));
        assert_eq!(a.intern("x"), Some(0));
        assert_eq!(a.key(1), Some("y"));
        a.freeze();
        assert_eq!(a.intern("z"), None);
        assert_eq!(a.len(), 2);
    }

    #[test]
    fn sparse_vector_sorted_merged() {
        let v = SparseFeatureVector::from_entries([(5, 1.0), (2, 2.0), (5, 0.5), (3, 0.0)]);
        let e: Vec<_> = v.iter().collect();
        assert_eq!(e, vec![(2, 2.0), (5, 1.5)]);
        assert_eq!(v.dot(&[0., 0., 1., 0., 0., 2.]), 5.0);
    }

    #[test]
    fn identity_template() {
        let t = FeatureTemplate::node("identity", &[0]);
        let obs = t.apply(&toks(&["dog"]), 0).unwrap();
        assert_eq!(obs.key, "identity@0=dog");
        assert_eq!(obs.value, 1.0);
    }

    #[test]
    fn boundary_sentinels() {
        let t = FeatureTemplate::node("identity", &[-1]);
        assert_eq!(t.apply(&toks(&["a", "b"]), 0).unwrap().key, "identity@-1=<BOS>");
        let t = FeatureTemplate::node("identity", &[1]);
        assert_eq!(t.apply(&toks(&["a", "b"]), 1).unwrap().key, "identity@1=<EOS>");
    }

    #[test]
    fn suffix_template() {
        let t = FeatureTemplate::node("suf3", &[0]);
        assert_eq!(t.apply(&toks(&["running"]), 0).unwrap().key, "suf3@0=ing");
        assert_eq!(t.apply(&toks(&["ox"]), 0).unwrap().key, "suf3@0=ox");
    }

    #[test]
    fn conjunction_and_shape() {
        let t = FeatureTemplate::node("identity", &[-1, 0]);
        assert_eq!(t.apply(&toks(&["the", "dog"]), 1).unwrap().key, "identity@-1,0=the|dog");
        let s = FeatureTemplate::node("shape", &[0]);
        assert_eq!(s.apply(&toks(&["McDonald99"]), 0).unwrap().key, "shape@0=XxXxd");
    }

    #[test]
    fn predicates_are_binary() {
        let t = FeatureTemplate::node("cap", &[0]);
        assert_eq!(t.apply(&toks(&["Dog"]), 0).unwrap().key, "cap@0");
        assert!(t.apply(&toks(&["dog"]), 0).is_none());
    }

    #[test]
    fn real_mode_passes_values() {
        let t = FeatureTemplate::new("len", TemplateKind::Node, &[0], ValueMode::Real).unwrap();
        let o = t.apply(&toks(&["hello"]), 0).unwrap();
        assert_eq!(o.key, "len@0");
        assert_eq!(o.value, 5.0);
        let c = FeatureTemplate::new("col1", TemplateKind::Node, &[0], ValueMode::Real).unwrap();
        let tok = vec![Token::new(["x", "2.5"])];
        assert_eq!(c.apply(&tok, 0).unwrap().value, 2.5);
    }

    #[test]
    fn template_file_roundtrip() {
        let text = "# comment\nidentity node 0\nidentity node -1 0  # conj\nlen node 0 real\nidentity edge 0\n\n";
        let ts = parse_templates(text).unwrap();
        assert_eq!(ts.len(), 4);
        assert_eq!(ts[1].offsets, vec![-1, 0]);
        assert_eq!(ts[2].mode, ValueMode::Real);
        assert_eq!(ts[3].kind, TemplateKind::Edge);
        let again: String = ts.iter().map(|t| t.to_line() + "\n").collect();
        assert_eq!(parse_templates(&again).unwrap(), ts);
    }

    #[test]
    fn template_file_errors_carry_line() {
        match parse_templates("identity node 0\nidentity sideways 0\n") {
            Err(Error::Template { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(parse_templates("nosuchfn node 0").is_err());
        assert!(parse_templates("identity node x").is_err());
    }

    fn toy_corpus() -> Vec<(Vec<Token>, Vec<&'static str>)> {
        vec![
            (toks(&["the", "dog", "runs"]), vec!["B", "I", "O"]),
            (toks(&["a", "cat", "sleeps", "now"]), vec!["B", "I", "O", "O"]),
        ]
    }

    #[test]
    fn supported_count_matches_brute_force_scan() {
        let templates = vec![FeatureTemplate::node("identity", &[0]), FeatureTemplate::node("identity", &[-1])];
        let mut b = FeatureSpaceBuilder::new();
        for (t, l) in toy_corpus() {
            b.add(&t, &l, &templates).unwrap();
        }
        let space = b.finish(FeatureMode::Supported);

        // independent scan over (observation key, label) and transitions
        let mut nodes = BTreeSet::new();
        let mut initial = BTreeSet::new();
        let mut edges = BTreeSet::new();
        for (t, l) in toy_corpus() {
            for i in 0..t.len() {
                for tpl in &templates {
                    let k = tpl.apply(&t, i).unwrap().key;
                    nodes.insert((k, l[i]));
                }
                if i == 0 {
                    initial.insert(l[0]);
                } else {
                    edges.insert((l[i - 1], l[i]));
                }
            }
        }
        assert_eq!(space.block_len(FeatureBlock::Node), nodes.len());
        assert_eq!(space.block_len(FeatureBlock::Initial), initial.len());
        assert_eq!(space.block_len(FeatureBlock::Edge), edges.len());
        // "I" never follows "O"
        let trans = space.observation_index(TRANSITION_OBS).unwrap();
        let (o, i) = (space.labels().get("O").unwrap(), space.labels().get("I").unwrap());
        assert!(space.edge_feature(trans, o, i).is_none());
    }

    #[test]
    fn featurization_is_deterministic() {
        let templates = default_templates();
        let build = || {
            let mut b = FeatureSpaceBuilder::new();
            let insts: Vec<_> = toy_corpus()
                .into_iter()
                .map(|(t, l)| b.add(&t, &l, &templates).unwrap())
                .collect();
            (b.finish(FeatureMode::Supported), insts)
        };
        let (a, ia) = build();
        let (b, ib) = build();
        assert_eq!(a, b);
        assert_eq!(ia, ib);
        for i in 0..a.num_weights() {
            assert_eq!(a.feature_key(i), b.feature_key(i));
        }
    }

    #[test]
    fn full_mode_expansion_counts() {
        // M = 2, one node observation per position, T = 3
        let templates = vec![FeatureTemplate::node("bias", &[])];
        let mut b = FeatureSpaceBuilder::new();
        let inst = b.add(&toks(&["a", "b", "c"]), &["X", "Y", "X"], &templates).unwrap();
        let space = b.finish(FeatureMode::Full);
        let firings: usize = (0..3)
            .map(|t| {
                inst.node_obs[t]
                    .iter()
                    .map(|(o, _)| space.node_expansion(o).count())
                    .sum::<usize>()
            })
            .sum();
        assert_eq!(firings, 3 * 2);
        assert_eq!(space.block_len(FeatureBlock::Edge), 4);
        assert_eq!(space.block_len(FeatureBlock::Initial), 2);
    }

    #[test]
    fn feature_keys_roundtrip_through_from_keys() {
        let templates = default_templates();
        let mut b = FeatureSpaceBuilder::new();
        for (t, l) in toy_corpus() {
            b.add(&t, &l, &templates).unwrap();
        }
        let space = b.finish(FeatureMode::Supported);
        let keys: Vec<String> = (0..space.num_weights()).map(|i| space.feature_key(i).unwrap()).collect();
        let mut uniq = keys.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), keys.len());
        let rebuilt = FeatureSpace::from_keys(space.labels().clone(), &keys).unwrap();
        let keys2: Vec<String> = (0..rebuilt.num_weights()).map(|i| rebuilt.feature_key(i).unwrap()).collect();
        assert_eq!(keys, keys2);
        assert!(keys.iter().any(|k| k == "identity@0=dog⊗I"));
        assert!(keys.iter().any(|k| k == "<trans>⊗B→I"));
        assert!(keys.iter().any(|k| k == "<trans>⊗<BOS>→B"));
    }

    #[test]
    fn frozen_space_drops_unseen() {
        let templates = vec![FeatureTemplate::node("identity", &[0])];
        let mut b = FeatureSpaceBuilder::new();
        b.add(&toks(&["dog"]), &["N"], &templates).unwrap();
        let space = b.finish(FeatureMode::Supported);
        let inst = space.featurize(&toks(&["zebra", "dog"]), Some(&["N", "Q"]), &templates);
        assert!(inst.node_obs[0].is_empty());
        assert_eq!(inst.node_obs[1].len(), 1);
        assert!(inst.labels.is_none());
    }

    #[test]
    fn epsilon_must_be_positive() {
        let mut b = FeatureSpaceBuilder::new();
        let inst = b.add(&toks(&["a"]), &["X"], &default_templates()).unwrap();
        let space = b.finish(FeatureMode::Supported);
        let w = vec![0.0; space.num_weights()];
        for eps in [0.0, -0.5, 1.5] {
            assert!(prune_or_expand_unsupported(&space, &w, std::slice::from_ref(&inst), UnsupportedPolicy::Expand { epsilon: eps }).is_err());
        }
    }

    fn expansion_setup() -> (FeatureSpace, Vec<ChainInstance>, Vec<f64>) {
        let templates = vec![FeatureTemplate::node("identity", &[0])];
        let mut b = FeatureSpaceBuilder::new();
        let insts: Vec<_> = toy_corpus()
            .into_iter()
            .map(|(t, l)| b.add(&t, &l, &templates).unwrap())
            .collect();
        let space = b.finish(FeatureMode::Supported);
        let w = vec![0.0; space.num_weights()];
        (space, insts, w)
    }

    #[test]
    fn epsilon_one_adds_nothing() {
        let (space, insts, w) = expansion_setup();
        let (next, w2) = prune_or_expand_unsupported(&space, &w, &insts, UnsupportedPolicy::Expand { epsilon: 1.0 }).unwrap();
        assert_eq!(next.num_weights(), space.num_weights());
        assert_eq!(w2.len(), w.len());
    }

    #[test]
    fn tiny_epsilon_reaches_full_cross_product() {
        let (space, insts, w) = expansion_setup();
        let (next, _) = prune_or_expand_unsupported(&space, &w, &insts, UnsupportedPolicy::Expand { epsilon: 1e-300 }).unwrap();
        // cross product enumerated directly: 7 distinct words × 3 labels,
        // one transition observation × 3 × 3, initial 1 × 3
        assert_eq!(next.block_len(FeatureBlock::Node), 7 * 3);
        assert_eq!(next.block_len(FeatureBlock::Edge), 9);
        assert_eq!(next.block_len(FeatureBlock::Initial), 3);

        let templates = vec![FeatureTemplate::node("identity", &[0])];
        let mut b = FeatureSpaceBuilder::new();
        for (t, l) in toy_corpus() {
            b.add(&t, &l, &templates).unwrap();
        }
        assert_eq!(b.finish(FeatureMode::Full).num_weights(), next.num_weights());
    }

    #[test]
    fn supported_only_prunes_expanded_features() {
        let (space, insts, w) = expansion_setup();
        let (big, wb) = prune_or_expand_unsupported(&space, &w, &insts, UnsupportedPolicy::Expand { epsilon: 1e-300 }).unwrap();
        let (small, _) = prune_or_expand_unsupported(&big, &wb, &insts, UnsupportedPolicy::SupportedOnly).unwrap();
        assert_eq!(small.num_weights(), space.num_weights());
    }

    #[test]
    fn weights_survive_remap() {
        let (space, insts, mut w) = expansion_setup();
        for (i, x) in w.iter_mut().enumerate() {
            *x = i as f64 * 0.1;
        }
        let (next, w2) = prune_or_expand_unsupported(&space, &w, &insts, UnsupportedPolicy::Expand { epsilon: 0.2 }).unwrap();
        for i in 0..space.num_weights() {
            let key = space.feature_key(i).unwrap();
            let j = (0..next.num_weights()).find(|&j| next.feature_key(j).unwrap() == key).unwrap();
            assert_eq!(w2[j], w[i]);
        }
    }

    #[test]
    fn standardization_centers_real_values() {
        let t = vec![FeatureTemplate::new("len", TemplateKind::Node, &[0], ValueMode::Real).unwrap()];
        let mut b = FeatureSpaceBuilder::new();
        let mut inst = b.add(&toks(&["a", "abc", "abcde"]), &["X", "X", "X"], &t).unwrap();
        let scaling = RealFeatureScaling::fit(std::slice::from_ref(&inst));
        scaling.apply(&mut inst);
        let vals: Vec<f64> = inst.node_obs.iter().map(|v| v.iter().map(|e| e.1).sum::<f64>()).collect();
        let mean: f64 = vals.iter().sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
    }
}
