use rand::Rng;

use crate::error::{Error, Result};
use crate::features::{Alphabet, FeatureSpace, FeatureTemplate, Token, BOS, FEATURE_SEP, TRANSITION_OBS, TRANSITION_SEP};
use crate::objectives::RegularizerSpec;

use super::LinearChainModel;

/// `p(y_1)`, `p(y_t | y_{t-1})` (rows indexed by the previous state) and
/// `p(x_t | y_t)` over a finite symbol set.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmParams {
    pub initial: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
    pub emission: Vec<Vec<f64>>,
}

const ROW_TOL: f64 = 1e-12;

impl HmmParams {
    pub fn new(initial: Vec<f64>, transition: Vec<Vec<f64>>, emission: Vec<Vec<f64>>) -> Result<Self> {
        let h = Self { initial, transition, emission };
        h.validate()?;
        Ok(h)
    }

    pub fn num_states(&self) -> usize {
        self.initial.len()
    }

    pub fn num_symbols(&self) -> usize {
        self.emission.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.num_states();
        let v = self.num_symbols();
        if m == 0 || v == 0 {
            return Err(Error::param("HMM needs at least one state and one symbol"));
        }
        if self.transition.len() != m || self.emission.len() != m {
            return Err(Error::param("HMM tables disagree on the state count"));
        }
        let rows = std::iter::once(&self.initial).chain(&self.transition).chain(&self.emission);
        for (i, row) in rows.enumerate() {
            let expected = if i <= m { m } else { v };
            if row.len() != expected {
                return Err(Error::param("ragged HMM table"));
            }
            if row.iter().any(|p| !(*p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > ROW_TOL * expected as f64 {
                return Err(Error::param("HMM rows must be probability distributions"));
            }
        }
        Ok(())
    }

    /// `log p(x, y)`.
    pub fn log_joint(&self, symbols: &[usize], states: &[usize]) -> f64 {
        let mut lp = 0.0;
        for t in 0..symbols.len() {
            lp += if t == 0 {
                self.initial[states[0]].ln()
            } else {
                self.transition[states[t - 1]][states[t]].ln()
            };
            lp += self.emission[states[t]][symbols[t]].ln();
        }
        lp
    }

    /// Ancestral sample of `(symbols, states)`.
    pub fn sample<R: Rng>(&self, rng: &mut R, len: usize) -> (Vec<usize>, Vec<usize>) {
        fn draw<R: Rng>(rng: &mut R, p: &[f64]) -> usize {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, &q) in p.iter().enumerate() {
                acc += q;
                if u < acc {
                    return i;
                }
            }
            p.len() - 1
        }
        let mut states: Vec<usize> = Vec::with_capacity(len);
        let mut symbols = Vec::with_capacity(len);
        for t in 0..len {
            let s = if t == 0 {
                draw(rng, &self.initial)
            } else {
                draw(rng, &self.transition[states[t - 1]])
            };
            states.push(s);
            symbols.push(draw(rng, &self.emission[s]));
        }
        (symbols, states)
    }
}

/// Add-`κ` smoothed maximum-likelihood estimates from `(symbols, states)`
/// pairs.
pub fn hmm_fit(data: &[(Vec<usize>, Vec<usize>)], num_states: usize, num_symbols: usize, kappa: f64) -> Result<HmmParams> {
    if !(kappa >= 0.0) {
        return Err(Error::param("smoothing κ must be non-negative"));
    }
    if num_states == 0 || num_symbols == 0 {
        return Err(Error::param("HMM needs at least one state and one symbol"));
    }
    let mut initial = vec![kappa; num_states];
    let mut transition = vec![vec![kappa; num_states]; num_states];
    let mut emission = vec![vec![kappa; num_symbols]; num_states];
    for (i, (xs, ys)) in data.iter().enumerate() {
        if xs.len() != ys.len() || xs.iter().any(|&x| x >= num_symbols) || ys.iter().any(|&y| y >= num_states) {
            return Err(Error::param("symbol or state out of range").at_instance(i));
        }
        for t in 0..xs.len() {
            if t == 0 {
                initial[ys[0]] += 1.0;
            } else {
                transition[ys[t - 1]][ys[t]] += 1.0;
            }
            emission[ys[t]][xs[t]] += 1.0;
        }
    }
    let normalize = |row: &mut Vec<f64>, what: &str| -> Result<()> {
        let s: f64 = row.iter().sum();
        if row.contains(&0.0) {
            return Err(Error::ZeroProbability(format!("unseen {what} event; use κ > 0")));
        }
        row.iter_mut().for_each(|c| *c /= s);
        Ok(())
    };
    normalize(&mut initial, "initial")?;
    for row in &mut transition {
        normalize(row, "transition")?;
    }
    for row in &mut emission {
        normalize(row, "emission")?;
    }
    HmmParams::new(initial, transition, emission)
}

/// The indicator-feature CRF with `θ = log` of the HMM tables. Symbols are
/// read from the first token column.
pub fn hmm_to_crf<S: AsRef<str>, V: AsRef<str>>(hmm: &HmmParams, states: &[S], symbols: &[V]) -> Result<LinearChainModel> {
    hmm.validate()?;
    if states.len() != hmm.num_states() || symbols.len() != hmm.num_symbols() {
        return Err(Error::param("state/symbol names do not match the HMM"));
    }
    let rows = std::iter::once(&hmm.initial).chain(&hmm.transition).chain(&hmm.emission);
    if rows.flatten().any(|&p| p <= 0.0) {
        return Err(Error::ZeroProbability("HMM has zero entries; smooth it first".into()));
    }
    let template = FeatureTemplate::node("identity", &[0]);
    let labels = Alphabet::from_keys(states.iter().map(|s| s.as_ref()));
    if labels.len() != states.len() {
        return Err(Error::param("duplicate state name"));
    }
    let mut keys = Vec::new();
    let mut weights = Vec::new();
    for (y, s) in states.iter().enumerate() {
        keys.push(format!("{TRANSITION_OBS}{FEATURE_SEP}{BOS}{TRANSITION_SEP}{}", s.as_ref()));
        weights.push(hmm.initial[y].ln());
    }
    for (o, sym) in symbols.iter().enumerate() {
        let obs = template
            .apply(&[Token::new([sym.as_ref()])], 0)
            .expect("identity template always fires")
            .key;
        for (y, s) in states.iter().enumerate() {
            keys.push(format!("{obs}{FEATURE_SEP}{}", s.as_ref()));
            weights.push(hmm.emission[y][o].ln());
        }
    }
    for (i, p) in states.iter().enumerate() {
        for (j, c) in states.iter().enumerate() {
            keys.push(format!("{TRANSITION_OBS}{FEATURE_SEP}{}{TRANSITION_SEP}{}", p.as_ref(), c.as_ref()));
            weights.push(hmm.transition[i][j].ln());
        }
    }
    let space = FeatureSpace::from_keys(labels, &keys)?;
    let mut model = LinearChainModel::new(space, vec![template], weights, RegularizerSpec::None);
    model.metadata.insert("source".into(), "hmm".into());
    Ok(model)
}
