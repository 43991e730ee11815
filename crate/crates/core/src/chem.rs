//! Residue vocabulary, monoisotopic mass arithmetic, and b/y fragment ladders.
//!
//! The mass table ships as `data/masses.toml` and is parsed once on first use.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::LazyLock;

/// Source of the bundled mass table.
pub const MASS_TABLE_TOML: &str = include_str!("../data/masses.toml");

/// Longest peptide the vocabulary and decoder accept.
pub const MAX_PEPTIDE_LEN: usize = 100;

/// Number of tokens including the stop token.
pub const VOCAB_SIZE: usize = 24;

/// Symbol of the stop token.
pub const STOP_SYMBOL: &str = "[$]";

#[derive(Debug, Deserialize)]
struct RawTable {
    version: u32,
    proton: f64,
    water: f64,
    residues: Vec<RawResidue>,
    modifications: Vec<RawModification>,
}

#[derive(Debug, Deserialize)]
struct RawResidue {
    symbol: String,
    mass: f64,
}

#[derive(Debug, Deserialize)]
struct RawModification {
    symbol: String,
    base: String,
    name: String,
    delta: f64,
}

/// One vocabulary entry.
#[derive(Debug, Clone)]
pub struct Residue {
    pub symbol: String,
    /// Canonical one-letter code of the unmodified residue.
    pub base: char,
    /// Name of the modification, if any.
    pub modification: Option<String>,
    /// Modification delta in Da (0 for canonical residues).
    pub delta: f64,
    pub mass: f64,
}

/// The parsed mass table.
#[derive(Debug)]
pub struct MassTable {
    pub version: u32,
    pub proton: f64,
    pub water: f64,
    residues: Vec<Residue>,
}

impl MassTable {
    pub fn parse(src: &str) -> Result<Self> {
        let raw: RawTable = toml::from_str(src).map_err(|e| Error::Config(format!("mass table: {e}")))?;
        let mut residues = Vec::with_capacity(VOCAB_SIZE - 1);
        for r in &raw.residues {
            let base = single_char(&r.symbol)?;
            if r.mass <= 0.0 {
                return Err(Error::Config(format!("non-positive mass for {}", r.symbol)));
            }
            residues.push(Residue { symbol: r.symbol.clone(), base, modification: None, delta: 0.0, mass: r.mass });
        }
        for m in &raw.modifications {
            let base = single_char(&m.base)?;
            let base_mass = residues
                .iter()
                .find(|r| r.base == base && r.modification.is_none())
                .map(|r| r.mass)
                .ok_or_else(|| Error::Config(format!("modification {} on unknown residue", m.symbol)))?;
            residues.push(Residue {
                symbol: m.symbol.clone(),
                base,
                modification: Some(m.name.clone()),
                delta: m.delta,
                mass: base_mass + m.delta,
            });
        }
        if residues.len() + 1 != VOCAB_SIZE {
            return Err(Error::Config(format!("expected {} residue tokens, found {}", VOCAB_SIZE - 1, residues.len())));
        }
        Ok(Self { version: raw.version, proton: raw.proton, water: raw.water, residues })
    }

    pub fn residues(&self) -> &[Residue] {
        &self.residues
    }
}

fn single_char(s: &str) -> Result<char> {
    let mut it = s.chars();
    match (it.next(), it.next()) {
        (Some(c), None) => Ok(c),
        _ => Err(Error::Config(format!("expected a one-letter residue code, got {s:?}"))),
    }
}

static TABLE: LazyLock<MassTable> =
    LazyLock::new(|| MassTable::parse(MASS_TABLE_TOML).expect("bundled mass table is valid"));

/// The bundled mass table.
pub fn mass_table() -> &'static MassTable {
    &TABLE
}

/// Mass of a proton in Da.
pub fn proton() -> f64 {
    TABLE.proton
}

/// Mass of water in Da.
pub fn water() -> f64 {
    TABLE.water
}

/// A vocabulary token: one of 23 residues or the stop token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Token(u8);

impl Token {
    pub const STOP: Token = Token((VOCAB_SIZE - 1) as u8);

    pub fn from_index(i: usize) -> Result<Self> {
        if i < VOCAB_SIZE {
            Ok(Token(i as u8))
        } else {
            Err(Error::Vocabulary(format!("token index {i} out of range")))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_stop(self) -> bool {
        self == Self::STOP
    }

    /// All residue tokens (stop excluded), in vocabulary order.
    pub fn residues() -> impl Iterator<Item = Token> {
        (0..VOCAB_SIZE - 1).map(|i| Token(i as u8))
    }

    pub fn symbol(self) -> &'static str {
        if self.is_stop() {
            STOP_SYMBOL
        } else {
            &TABLE.residues[self.index()].symbol
        }
    }

    pub fn from_symbol(s: &str) -> Result<Self> {
        if s == STOP_SYMBOL {
            return Ok(Self::STOP);
        }
        TABLE
            .residues
            .iter()
            .position(|r| r.symbol == s)
            .map(|i| Token(i as u8))
            .ok_or_else(|| Error::Vocabulary(format!("unknown residue symbol {s:?}")))
    }

    /// Whether this token carries a post-translational modification.
    pub fn is_modified(self) -> bool {
        !self.is_stop() && TABLE.residues[self.index()].modification.is_some()
    }

    pub fn base(self) -> Option<char> {
        (!self.is_stop()).then(|| TABLE.residues[self.index()].base)
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// Monoisotopic residue mass; PTM tokens include their modification delta.
pub fn residue_mass(token: Token) -> Result<f64> {
    if token.is_stop() {
        return Err(Error::Vocabulary("the stop token has no mass".into()));
    }
    Ok(TABLE.residues[token.index()].mass)
}

/// An ordered residue sequence of length `1..=MAX_PEPTIDE_LEN`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Peptide {
    residues: Vec<Token>,
}

impl Peptide {
    pub fn new(residues: Vec<Token>) -> Result<Self> {
        if residues.is_empty() {
            return Err(Error::Domain("empty peptide".into()));
        }
        if residues.len() > MAX_PEPTIDE_LEN {
            return Err(Error::Domain(format!("peptide length {} exceeds {MAX_PEPTIDE_LEN}", residues.len())));
        }
        if residues.iter().any(|t| t.is_stop()) {
            return Err(Error::Vocabulary("stop token inside peptide".into()));
        }
        Ok(Self { residues })
    }

    /// Parses notation such as `PEPTM(+15.99)IDEN(+.98)`.
    ///
    /// Modifications may also be written without parentheses (`M+15.995`);
    /// they are resolved to the vocabulary entry with the nearest delta.
    pub fn parse(s: &str) -> Result<Self> {
        let chars: Vec<char> = s.trim().chars().collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let base = chars[i];
            if !base.is_ascii_uppercase() {
                return Err(Error::Vocabulary(format!("unexpected character {base:?} in {s:?}")));
            }
            i += 1;
            let mut delta: Option<String> = None;
            if i < chars.len() && chars[i] == '(' {
                let close = chars[i..]
                    .iter()
                    .position(|&c| c == ')')
                    .ok_or_else(|| Error::Vocabulary(format!("unclosed modification in {s:?}")))?;
                delta = Some(chars[i + 1..i + close].iter().collect());
                i += close + 1;
            } else if i < chars.len() && (chars[i] == '+' || chars[i] == '-') {
                let start = i;
                i += 1;
                while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                    i += 1;
                }
                delta = Some(chars[start..i].iter().collect());
            }
            out.push(resolve_token(base, delta.as_deref())?);
        }
        Self::new(out)
    }

    pub fn residues(&self) -> &[Token] {
        &self.residues
    }

    pub fn len(&self) -> usize {
        self.residues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residues.is_empty()
    }

    pub fn reversed(&self) -> Self {
        let mut r = self.residues.clone();
        r.reverse();
        Self { residues: r }
    }
}

impl fmt::Display for Peptide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.residues {
            f.write_str(t.symbol())?;
        }
        Ok(())
    }
}

fn resolve_token(base: char, delta: Option<&str>) -> Result<Token> {
    let Some(delta) = delta else {
        return TABLE
            .residues
            .iter()
            .position(|r| r.base == base && r.modification.is_none())
            .map(|i| Token(i as u8))
            .ok_or_else(|| Error::Vocabulary(format!("unknown residue {base:?}")));
    };
    let value: f64 = delta
        .trim()
        .trim_start_matches('+')
        .parse()
        .map_err(|_| Error::Vocabulary(format!("bad modification delta {delta:?} on {base}")))?;
    TABLE
        .residues
        .iter()
        .enumerate()
        .filter(|(_, r)| r.base == base && r.modification.is_some() && (r.delta - value).abs() < 0.05)
        .min_by(|a, b| (a.1.delta - value).abs().total_cmp(&(b.1.delta - value).abs()))
        .map(|(i, _)| Token(i as u8))
        .ok_or_else(|| Error::Vocabulary(format!("unsupported modification {base}({delta})")))
}

/// Neutral monoisotopic peptide mass: residue sum plus water.
pub fn peptide_mass(residues: &[Token]) -> Result<f64> {
    if residues.is_empty() {
        return Err(Error::Domain("empty peptide has no mass".into()));
    }
    let mut total = water();
    for &t in residues {
        total += residue_mass(t)?;
    }
    Ok(total)
}

/// A single centroided peak.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub mz: f64,
    pub intensity: f64,
}

impl Peak {
    pub fn new(mz: f64, intensity: f64) -> Self {
        Self { mz, intensity }
    }
}

/// An MS2 spectrum with its precursor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub peaks: Vec<Peak>,
    /// Observed precursor m/z.
    pub precursor_mz: f64,
    /// Precursor charge state, 1..=10.
    pub precursor_charge: u8,
}

impl Spectrum {
    pub fn new(peaks: Vec<Peak>, precursor_mz: f64, precursor_charge: u8) -> Self {
        Self { peaks, precursor_mz, precursor_charge }
    }

    /// Builds a spectrum from a neutral precursor mass.
    pub fn from_neutral_mass(peaks: Vec<Peak>, neutral_mass: f64, charge: u8) -> Self {
        let z = f64::from(charge);
        Self { peaks, precursor_mz: (neutral_mass + z * proton()) / z, precursor_charge: charge }
    }

    /// Neutral precursor mass `(mz - proton) * z`.
    pub fn precursor_mass(&self) -> f64 {
        (self.precursor_mz - proton()) * f64::from(self.precursor_charge)
    }

    pub fn max_intensity(&self) -> f64 {
        self.peaks.iter().map(|p| p.intensity).fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=10).contains(&self.precursor_charge) {
            return Err(Error::Domain(format!("precursor charge {} outside 1..=10", self.precursor_charge)));
        }
        if let Some(p) = self.peaks.iter().find(|p| !(p.mz > 0.0) || !(p.intensity >= 0.0)) {
            return Err(Error::Domain(format!("invalid peak ({}, {})", p.mz, p.intensity)));
        }
        Ok(())
    }
}

/// Fragment ion series.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum IonSeries {
    B,
    Y,
}

/// Identifies a fragment by series and number of residues it contains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IonLabel {
    pub series: IonSeries,
    pub index: usize,
}

impl fmt::Display for IonLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self.series {
            IonSeries::B => 'b',
            IonSeries::Y => 'y',
        };
        write!(f, "{s}{}", self.index)
    }
}

/// The ideal singly charged b/y ladder of a peptide.
#[derive(Clone, Debug, PartialEq)]
pub struct TheoreticalSpectrum {
    pub peaks: Vec<Peak>,
    pub labels: Vec<IonLabel>,
}

impl TheoreticalSpectrum {
    pub fn len(&self) -> usize {
        self.peaks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.peaks.is_empty()
    }

    /// Keeps the first `n` ions of the interleaved ladder.
    pub fn truncate(&mut self, n: usize) {
        self.peaks.truncate(n);
        self.labels.truncate(n);
    }
}

/// All `2(L-1)` b/y ions at charge +1, interleaved `b1, y1, b2, y2, ...`.
pub fn theoretical_spectrum(residues: &[Token], reference_intensity: f64) -> Result<TheoreticalSpectrum> {
    let l = residues.len();
    if l < 2 {
        return Err(Error::Domain(format!("peptide of length {l} has no fragment ions")));
    }
    if !(reference_intensity > 0.0) {
        return Err(Error::Domain("reference intensity must be positive".into()));
    }
    let masses = residues.iter().map(|&t| residue_mass(t)).collect::<Result<Vec<_>>>()?;
    let (p, w) = (proton(), water());
    let mut prefix = vec![0.0; l + 1];
    for i in 0..l {
        prefix[i + 1] = prefix[i] + masses[i];
    }
    let total = prefix[l];
    let mut peaks = Vec::with_capacity(2 * (l - 1));
    let mut labels = Vec::with_capacity(2 * (l - 1));
    for n in 1..l {
        peaks.push(Peak::new(prefix[n] + p, reference_intensity));
        labels.push(IonLabel { series: IonSeries::B, index: n });
        peaks.push(Peak::new(total - prefix[l - n] + w + p, reference_intensity));
        labels.push(IonLabel { series: IonSeries::Y, index: n });
    }
    Ok(TheoreticalSpectrum { peaks, labels })
}

/// Mirrors every peak `m` to `M + 2*proton - m`, dropping non-positive results.
pub fn complementary_spectrum(spectrum: &Spectrum) -> Spectrum {
    let anchor = spectrum.precursor_mass() + 2.0 * proton();
    let peaks = spectrum
        .peaks
        .iter()
        .map(|p| Peak::new(anchor - p.mz, p.intensity))
        .filter(|p| p.mz > 0.0)
        .collect();
    Spectrum { peaks, ..spectrum.clone() }
}
