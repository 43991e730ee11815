//! Autoregressive decoding: beam search, greedy decoding, confidences, the
//! precursor-mass gate and ground-truth-memory decoding.

use crate::assign::Cost;
use crate::chem::{self, Peptide, Spectrum, Token, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::neural::{MemoryMode, Model, Precursor};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use std::cmp::Ordering;
use std::io::{BufRead, Write};

/// Anything that can score the next token given a prefix.
pub trait StepScorer {
    /// Log-probabilities over the vocabulary (length [`VOCAB_SIZE`]).
    fn next_log_probs(&self, prefix: &[Token]) -> Result<Vec<f64>>;
}

/// Scores tokens with a trained model over a fixed memory.
pub struct ModelScorer<'a, T: Scalar + Cost> {
    pub model: &'a Model<T>,
    pub memory: Matrix<T>,
    pub precursor: Precursor,
}

impl<T: Scalar + Cost> StepScorer for ModelScorer<'_, T> {
    fn next_log_probs(&self, prefix: &[Token]) -> Result<Vec<f64>> {
        Ok(self.model.next_log_probs(&self.memory, self.precursor, prefix)?.into_iter().map(|x| x.as_f64()).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<Token>,
    /// One entry per emitted token, the stop token included.
    pub log_probs: Vec<f64>,
    pub finished: bool,
}

impl Hypothesis {
    fn empty() -> Self {
        Self { tokens: Vec::new(), log_probs: Vec::new(), finished: false }
    }

    /// Mean token log-probability.
    pub fn score(&self) -> f64 {
        if self.log_probs.is_empty() {
            return f64::NEG_INFINITY;
        }
        self.log_probs.iter().sum::<f64>() / self.log_probs.len() as f64
    }

    fn total(&self) -> f64 {
        self.log_probs.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub beam_width: usize,
    pub max_len: usize,
    /// Precursor tolerance in parts per million.
    pub precursor_ppm: f64,
    /// Close hypotheses once their residue mass passes the precursor mass.
    pub mass_cutoff: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { beam_width: 5, max_len: chem::MAX_PEPTIDE_LEN, precursor_ppm: 50.0, mass_cutoff: true }
    }
}

impl SearchConfig {
    pub fn greedy(&self) -> Self {
        Self { beam_width: 1, ..self.clone() }
    }
}

/// The decoded peptide for one spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub source_id: String,
    pub peptide: Peptide,
    pub peptide_confidence: f64,
    pub per_residue_confidences: Vec<f64>,
    pub precursor_match: bool,
    /// False when no hypothesis emitted a stop token within `max_len`.
    pub complete: bool,
}

/// Result of a search in decoding order.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub best: Hypothesis,
    pub precursor_match: bool,
}

fn mass_matches(tokens: &[Token], observed: f64, ppm: f64) -> bool {
    match chem::peptide_mass(tokens) {
        Ok(m) => ((m - observed) / observed).abs() * 1e6 <= ppm,
        Err(_) => false,
    }
}

/// Extension limits shared by all hypotheses of one search.
#[derive(Clone, Copy)]
struct Limits {
    max_len: usize,
    /// Prefixes heavier than this are closed (they can only get heavier).
    mass_cap: f64,
}

fn expand(scorer: &dyn StepScorer, hyp: &Hypothesis, lim: Limits) -> Result<Vec<Hypothesis>> {
    let lp = scorer.next_log_probs(&hyp.tokens)?;
    if lp.len() != VOCAB_SIZE {
        return Err(Error::Domain(format!("scorer returned {} log-probabilities", lp.len())));
    }
    let mut out = Vec::with_capacity(VOCAB_SIZE);
    for (i, &l) in lp.iter().enumerate() {
        if !l.is_finite() {
            continue;
        }
        let tok = Token::from_index(i)?;
        if tok.is_stop() && hyp.tokens.is_empty() {
            continue;
        }
        let mut h = hyp.clone();
        h.log_probs.push(l);
        if tok.is_stop() {
            h.finished = true;
        } else {
            h.tokens.push(tok);
            if h.tokens.len() >= lim.max_len || chem::peptide_mass(&h.tokens)? > lim.mass_cap {
                // closed without a stop token
                h.finished = true;
            }
        }
        out.push(h);
    }
    Ok(out)
}

fn by_total_desc(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.total().total_cmp(&a.total())
}

/// Length-synchronised beam search.
///
/// Each step keeps the `beam_width` best expansions by summed log-probability;
/// expansions ending in the stop token leave the beam. The greedy path is
/// always part of the final pool. The winner is the best-scoring hypothesis
/// among those matching the precursor mass, then among the rest.
pub fn search(scorer: &dyn StepScorer, precursor_mass: f64, cfg: &SearchConfig) -> Result<SearchResult> {
    if cfg.beam_width == 0 {
        return Err(Error::Config("beam_width must be at least 1".into()));
    }
    if cfg.max_len == 0 || cfg.max_len > chem::MAX_PEPTIDE_LEN {
        return Err(Error::Config(format!("max_len must be in 1..={}", chem::MAX_PEPTIDE_LEN)));
    }
    let mass_cap = if cfg.mass_cutoff { precursor_mass * (1.0 + cfg.precursor_ppm * 1e-6) } else { f64::INFINITY };
    let lim = Limits { max_len: cfg.max_len, mass_cap };
    let mut pool = run_beam(scorer, cfg.beam_width, lim)?;
    if cfg.beam_width > 1 {
        pool.extend(run_beam(scorer, 1, lim)?);
    }
    let stopped = |h: &Hypothesis| h.log_probs.len() == h.tokens.len() + 1;
    let key = |h: &Hypothesis| (stopped(h), mass_matches(&h.tokens, precursor_mass, cfg.precursor_ppm));
    let best = pool
        .into_iter()
        .filter(|h| !h.tokens.is_empty())
        .max_by(|a, b| {
            let (ka, kb) = (key(a), key(b));
            ka.cmp(&kb).then(a.score().total_cmp(&b.score())).then(b.tokens.cmp(&a.tokens))
        })
        .ok_or_else(|| Error::Domain("search produced no hypothesis".into()))?;
    let precursor_match = mass_matches(&best.tokens, precursor_mass, cfg.precursor_ppm);
    Ok(SearchResult { best, precursor_match })
}

fn run_beam(scorer: &dyn StepScorer, width: usize, lim: Limits) -> Result<Vec<Hypothesis>> {
    let mut live = vec![Hypothesis::empty()];
    let mut done = Vec::new();
    while !live.is_empty() {
        let mut cands = Vec::new();
        for h in &live {
            cands.extend(expand(scorer, h, lim)?);
        }
        cands.sort_by(by_total_desc);
        cands.truncate(width);
        live.clear();
        for c in cands {
            if c.finished {
                done.push(c);
            } else {
                live.push(c);
            }
        }
    }
    Ok(done)
}

fn to_record(source_id: &str, result: SearchResult, reverse: bool) -> Result<PredictionRecord> {
    let SearchResult { best, precursor_match } = result;
    let complete = best.log_probs.len() == best.tokens.len() + 1;
    let mut tokens = best.tokens.clone();
    let mut confs: Vec<f64> = best.log_probs[..tokens.len()].iter().map(|l| l.exp()).collect();
    if reverse {
        tokens.reverse();
        confs.reverse();
    }
    Ok(PredictionRecord {
        source_id: source_id.to_string(),
        peptide: Peptide::new(tokens)?,
        peptide_confidence: best.score().exp(),
        per_residue_confidences: confs,
        precursor_match,
        complete,
    })
}

/// Decodes a spectrum with memory `[imputed; z]`.
pub fn beam_search<T: Scalar + Cost>(
    model: &Model<T>,
    spectrum: &Spectrum,
    source_id: &str,
    cfg: &SearchConfig,
) -> Result<PredictionRecord> {
    decode(model, spectrum, source_id, MemoryMode::Imputed, cfg)
}

pub fn greedy<T: Scalar + Cost>(model: &Model<T>, spectrum: &Spectrum, source_id: &str, cfg: &SearchConfig) -> Result<PredictionRecord> {
    decode(model, spectrum, source_id, MemoryMode::Imputed, &cfg.greedy())
}

/// Decodes with the encoded theoretical spectrum of `truth` in place of the
/// imputed rows. An upper-bound diagnostic; needs the answer.
pub fn decode_with_oracle<T: Scalar + Cost>(
    model: &Model<T>,
    spectrum: &Spectrum,
    truth: &Peptide,
    source_id: &str,
    cfg: &SearchConfig,
) -> Result<PredictionRecord> {
    if truth.len() < 2 {
        return Err(Error::Domain("oracle decoding needs a peptide of length >= 2".into()));
    }
    decode(model, spectrum, source_id, MemoryMode::Oracle(truth), cfg)
}

pub fn decode<T: Scalar + Cost>(
    model: &Model<T>,
    spectrum: &Spectrum,
    source_id: &str,
    mode: MemoryMode<'_>,
    cfg: &SearchConfig,
) -> Result<PredictionRecord> {
    let memory = model.memory(spectrum, mode)?;
    let precursor = Precursor::of(spectrum);
    let scorer = ModelScorer { model, memory, precursor };
    let cfg = SearchConfig { max_len: cfg.max_len.min(model.config().max_len), ..cfg.clone() };
    let result = search(&scorer, precursor.mass, &cfg)?;
    to_record(source_id, result, model.config().reverse_decoding)
}

const HEADER: &str = "source_id\tpeptide\tpeptide_confidence\tresidue_confidences\tprecursor_match";

/// Tab-separated prediction file with a header row.
pub fn write_predictions<W: Write + ?Sized>(records: &[PredictionRecord], out: &mut W) -> Result<()> {
    writeln!(out, "{HEADER}")?;
    for r in records {
        if r.source_id.contains(['\t', '\n', '\r']) {
            return Err(Error::Domain(format!("source_id {:?} cannot be written", r.source_id)));
        }
        let confs: Vec<String> = r.per_residue_confidences.iter().map(|c| c.to_string()).collect();
        writeln!(out, "{}\t{}\t{}\t{}\t{}", r.source_id, r.peptide, r.peptide_confidence, confs.join(","), r.precursor_match)?;
    }
    Ok(())
}

pub fn read_predictions<R: BufRead>(reader: R) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let n = i + 1;
        if n == 1 {
            if line.trim_end() != HEADER {
                return Err(Error::Parse { line: 1, message: "unexpected prediction header".into() });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| Error::Parse { line: n, message: m.to_string() };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(bad("expected 5 tab-separated columns"));
        }
        let peptide = Peptide::parse(cols[1]).map_err(|e| bad(&e.to_string()))?;
        let conf: f64 = cols[2].parse().map_err(|_| bad("bad confidence"))?;
        let confs = if cols[3].is_empty() {
            Vec::new()
        } else {
            cols[3].split(',').map(|c| c.parse::<f64>()).collect::<std::result::Result<Vec<_>, _>>().map_err(|_| bad("bad residue confidence"))?
        };
        if confs.len() != peptide.len() {
            return Err(bad("residue confidence count differs from peptide length"));
        }
        let precursor_match = cols[4].parse().map_err(|_| bad("bad precursor_match flag"))?;
        out.push(PredictionRecord {
            source_id: cols[0].to_string(),
            peptide,
            peptide_confidence: conf,
            per_residue_confidences: confs,
            precursor_match,
            complete: true,
        });
    }
    Ok(out)
}
