//! MGF reading and writing, peak preprocessing, synthetic PSMs and the
//! missing-fragment ratio.

use crate::chem::{self, Peak, Peptide, Spectrum, Token};
use crate::error::{Error, Result};
use crate::io_util::write_atomic;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

/// A spectrum with an optional ground-truth peptide.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedSpectrum {
    pub spectrum: Spectrum,
    pub peptide: Option<Peptide>,
    pub source_id: String,
}

impl AnnotatedSpectrum {
    /// Whether the annotation's mass agrees with the precursor to `ppm`.
    /// `None` without an annotation.
    pub fn precursor_consistent(&self, ppm: f64) -> Option<bool> {
        let pep = self.peptide.as_ref()?;
        let calc = chem::peptide_mass(pep.residues()).ok()?;
        let obs = self.spectrum.precursor_mass();
        Some(((calc - obs) / calc).abs() * 1e6 <= ppm)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<AnnotatedSpectrum>,
    pub validation: Vec<AnnotatedSpectrum>,
    pub test: Vec<AnnotatedSpectrum>,
}

impl DatasetSplit {
    /// Fails if any `source_id` appears twice across (or within) splits.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in self.train.iter().chain(&self.validation).chain(&self.test) {
            if !seen.insert(r.source_id.as_str()) {
                return Err(Error::Domain(format!("source_id {:?} appears more than once", r.source_id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A record that could not be read.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordError {
    /// Line of the record's `BEGIN IONS`.
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MgfContents {
    pub records: Vec<AnnotatedSpectrum>,
    pub skipped: Vec<RecordError>,
}

struct Partial {
    start: usize,
    title: Option<String>,
    pepmass: Option<f64>,
    charge: Option<u8>,
    seq: Option<String>,
    peaks: Vec<Peak>,
    error: Option<String>,
}

impl Partial {
    fn new(start: usize) -> Self {
        Self { start, title: None, pepmass: None, charge: None, seq: None, peaks: Vec::new(), error: None }
    }

    fn fail(&mut self, line: usize, msg: String) {
        if self.error.is_none() {
            self.error = Some(format!("line {line}: {msg}"));
        }
    }

    fn finish(self, index: usize) -> std::result::Result<AnnotatedSpectrum, RecordError> {
        let err = |message: String| RecordError { line: self.start, message };
        if let Some(e) = self.error.clone() {
            return Err(err(e));
        }
        let mz = self.pepmass.ok_or_else(|| err("missing PEPMASS".into()))?;
        let charge = self.charge.ok_or_else(|| err("missing CHARGE".into()))?;
        let peptide = match &self.seq {
            Some(s) => Some(Peptide::parse(s).map_err(|e| err(format!("bad SEQ: {e}")))?),
            None => None,
        };
        let spectrum = Spectrum::new(self.peaks, mz, charge);
        spectrum.validate().map_err(|e| err(e.to_string()))?;
        Ok(AnnotatedSpectrum { spectrum, peptide, source_id: self.title.unwrap_or_else(|| format!("index={index}")) })
    }
}

fn parse_charge(v: &str) -> Option<u8> {
    let v = v.trim();
    let digits = v.trim_end_matches(['+', '-']);
    if v.ends_with('-') {
        return None;
    }
    digits.parse().ok()
}

/// Reads MGF text. Malformed records are skipped and reported.
pub fn parse_mgf<R: BufRead>(reader: R) -> Result<MgfContents> {
    let mut out = MgfContents::default();
    let mut current: Option<Partial> = None;
    let mut index = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let n = i + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        if t == "BEGIN IONS" {
            if let Some(open) = current.take() {
                out.skipped.push(RecordError { line: open.start, message: format!("record not closed before line {n}") });
                index += 1;
            }
            current = Some(Partial::new(n));
            continue;
        }
        let Some(rec) = current.as_mut() else { continue };
        if t == "END IONS" {
            match current.take().expect("open record").finish(index) {
                Ok(r) => out.records.push(r),
                Err(e) => out.skipped.push(e),
            }
            index += 1;
            continue;
        }
        if let Some((key, value)) = t.split_once('=') {
            if key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') && !key.is_empty() {
                match key.to_ascii_uppercase().as_str() {
                    "TITLE" => rec.title = Some(value.to_string()),
                    "PEPMASS" => match value.split_whitespace().next().and_then(|v| v.parse::<f64>().ok()) {
                        Some(v) if v > 0.0 && v.is_finite() => rec.pepmass = Some(v),
                        _ => rec.fail(n, format!("bad PEPMASS {value:?}")),
                    },
                    "CHARGE" => match parse_charge(value) {
                        Some(c) if (1..=10).contains(&c) => rec.charge = Some(c),
                        _ => rec.fail(n, format!("bad CHARGE {value:?}")),
                    },
                    "SEQ" => rec.seq = Some(value.trim().to_string()),
                    _ => {}
                }
                continue;
            }
        }
        let mut parts = t.split_whitespace();
        let mz = parts.next().and_then(|v| v.parse::<f64>().ok());
        let inten = parts.next().and_then(|v| v.parse::<f64>().ok());
        match (mz, inten) {
            (Some(mz), Some(inten)) if mz.is_finite() && inten.is_finite() => rec.peaks.push(Peak::new(mz, inten)),
            _ => rec.fail(n, format!("bad peak line {t:?}")),
        }
    }
    if let Some(open) = current {
        out.skipped.push(RecordError { line: open.start, message: "record not closed at end of input".into() });
    }
    Ok(out)
}

pub fn read_mgf(path: &Path) -> Result<MgfContents> {
    let f = std::fs::File::open(path)?;
    parse_mgf(std::io::BufReader::new(f))
}

/// Writes MGF text. Numbers use the shortest representation that reads
/// back to the same value.
pub fn write_mgf<W: Write + ?Sized>(records: &[AnnotatedSpectrum], out: &mut W) -> Result<()> {
    for r in records {
        if r.source_id.contains(['\n', '\r']) {
            return Err(Error::Domain(format!("source_id {:?} contains a line break", r.source_id)));
        }
        writeln!(out, "BEGIN IONS")?;
        writeln!(out, "TITLE={}", r.source_id)?;
        writeln!(out, "PEPMASS={}", r.spectrum.precursor_mz)?;
        writeln!(out, "CHARGE={}+", r.spectrum.precursor_charge)?;
        if let Some(p) = &r.peptide {
            writeln!(out, "SEQ={p}")?;
        }
        for p in &r.spectrum.peaks {
            writeln!(out, "{} {}", p.mz, p.intensity)?;
        }
        writeln!(out, "END IONS")?;
        writeln!(out)?;
    }
    Ok(())
}

pub fn save_mgf(path: &Path, records: &[AnnotatedSpectrum]) -> Result<()> {
    write_atomic(path, |w| write_mgf(records, w))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntensityTransform {
    None,
    Sqrt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub max_peaks: usize,
    pub min_mz: f64,
    pub max_mz: f64,
    /// Fraction of the most intense peak below which peaks are dropped.
    pub min_relative_intensity: f64,
    /// Peaks within this many Da of the precursor m/z are dropped.
    pub precursor_window: f64,
    pub transform: IntensityTransform,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            max_peaks: 150,
            min_mz: 50.0,
            max_mz: 2500.0,
            min_relative_intensity: 0.01,
            precursor_window: 2.0,
            transform: IntensityTransform::Sqrt,
        }
    }
}

/// Filters, transforms and normalises peaks. `None` if nothing survives.
pub fn preprocess(spectrum: &Spectrum, cfg: &PreprocessConfig) -> Option<Spectrum> {
    let prec = spectrum.precursor_mz;
    let mut peaks: Vec<Peak> = spectrum
        .peaks
        .iter()
        .copied()
        .filter(|p| p.mz >= cfg.min_mz && p.mz <= cfg.max_mz)
        .filter(|p| (p.mz - prec).abs() > cfg.precursor_window)
        .filter(|p| p.intensity > 0.0)
        .collect();
    let top = peaks.iter().map(|p| p.intensity).fold(0.0, f64::max);
    peaks.retain(|p| p.intensity >= cfg.min_relative_intensity * top);
    if peaks.is_empty() {
        return None;
    }
    if peaks.len() > cfg.max_peaks {
        // stable on ties: earlier (lower m/z in sorted input) peaks win
        peaks.sort_by(|a, b| b.intensity.total_cmp(&a.intensity));
        peaks.truncate(cfg.max_peaks);
    }
    for p in &mut peaks {
        if cfg.transform == IntensityTransform::Sqrt {
            p.intensity = p.intensity.sqrt();
        }
    }
    let norm = peaks.iter().map(|p| p.intensity * p.intensity).sum::<f64>().sqrt();
    for p in &mut peaks {
        p.intensity /= norm;
    }
    peaks.sort_by(|a, b| a.mz.total_cmp(&b.mz));
    Some(Spectrum::new(peaks, spectrum.precursor_mz, spectrum.precursor_charge))
}

/// Preprocesses every annotated record, dropping those left without peaks.
/// Returns the kept records and the number dropped.
pub fn preprocess_all(records: &[AnnotatedSpectrum], cfg: &PreprocessConfig) -> (Vec<AnnotatedSpectrum>, usize) {
    let mut kept = Vec::with_capacity(records.len());
    for r in records {
        if let Some(s) = preprocess(&r.spectrum, cfg) {
            kept.push(AnnotatedSpectrum { spectrum: s, ..r.clone() });
        }
    }
    let dropped = records.len() - kept.len();
    (kept, dropped)
}

/// Fraction of the `2(L-1)` ideal b/y peaks with no observed peak within `tol`.
pub fn missing_ratio(spectrum: &Spectrum, peptide: &Peptide, tol: f64) -> Result<f64> {
    if peptide.len() < 2 {
        return Err(Error::Domain("missing ratio needs a peptide of length >= 2".into()));
    }
    let ideal = chem::theoretical_spectrum(peptide.residues(), 1.0)?;
    let absent = ideal.peaks.iter().filter(|t| !spectrum.peaks.iter().any(|p| (p.mz - t.mz).abs() <= tol)).count();
    Ok(absent as f64 / ideal.len() as f64)
}

pub const DEFAULT_PRESENCE_TOL: f64 = 0.05;

/// Parameters of the synthetic PSM generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub n_psms: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Chance that an eligible residue (M, N, Q) carries its modification.
    pub ptm_prob: f64,
    /// Independent drop probability of each theoretical peak.
    pub missing_ratio: f64,
    pub min_noise_peaks: usize,
    pub max_noise_peaks: usize,
    /// Log-normal spread of fragment intensities.
    pub intensity_noise: f64,
    /// Gaussian m/z jitter (Da).
    pub mz_jitter: f64,
    pub min_charge: u8,
    pub max_charge: u8,
    /// Train, validation and test fractions.
    pub fractions: [f64; 3],
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_psms: 1000,
            min_len: 6,
            max_len: 12,
            ptm_prob: 0.1,
            missing_ratio: 0.3,
            min_noise_peaks: 2,
            max_noise_peaks: 10,
            intensity_noise: 0.3,
            mz_jitter: 0.005,
            min_charge: 2,
            max_charge: 3,
            fractions: [0.8, 0.1, 0.1],
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        let sum: f64 = self.fractions.iter().sum();
        if self.fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (sum - 1.0).abs() > 1e-9 {
            return bad("split fractions must lie in [0, 1] and sum to 1");
        }
        if self.min_len < 2 || self.min_len > self.max_len || self.max_len > chem::MAX_PEPTIDE_LEN {
            return bad("need 2 <= min_len <= max_len <= 100");
        }
        if !(0.0..=1.0).contains(&self.ptm_prob) || !(0.0..=1.0).contains(&self.missing_ratio) {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.min_noise_peaks > self.max_noise_peaks {
            return bad("min_noise_peaks exceeds max_noise_peaks");
        }
        if !(self.intensity_noise >= 0.0) || !(self.mz_jitter >= 0.0) {
            return bad("noise scales must be non-negative");
        }
        if self.min_charge == 0 || self.min_charge > self.max_charge || self.max_charge > 10 {
            return bad("need 1 <= min_charge <= max_charge <= 10");
        }
        Ok(())
    }
}

fn modified(base: &str) -> Option<Token> {
    let sym = match base {
        "M" => "M(+15.99)",
        "N" => "N(+.98)",
        "Q" => "Q(+.98)",
        _ => return None,
    };
    Token::from_symbol(sym).ok()
}

fn synth_one(p: &SynthParams, seed: u64, index: usize) -> Result<AnnotatedSpectrum> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let canonical: Vec<Token> = Token::residues().filter(|t| !t.is_modified()).collect();
    let len = rng.random_range(p.min_len..=p.max_len);
    let residues: Vec<Token> = (0..len)
        .map(|_| {
            let t = canonical[rng.random_range(0..canonical.len())];
            match modified(t.symbol()) {
                Some(m) if rng.random::<f64>() < p.ptm_prob => m,
                _ => t,
            }
        })
        .collect();
    let peptide = Peptide::new(residues)?;
    let mass = chem::peptide_mass(peptide.residues())?;
    let charge = rng.random_range(p.min_charge..=p.max_charge);

    let jitter = Normal::new(0.0, p.mz_jitter.max(f64::MIN_POSITIVE)).expect("finite");
    let spread = Normal::new(0.0, p.intensity_noise.max(f64::MIN_POSITIVE)).expect("finite");
    let theory = chem::theoretical_spectrum(peptide.residues(), 1.0)?;
    let mut peaks = Vec::new();
    for (peak, label) in theory.peaks.iter().zip(&theory.labels) {
        let keep = rng.random::<f64>() >= p.missing_ratio;
        let dmz = if p.mz_jitter > 0.0 { jitter.sample(&mut rng) } else { 0.0 };
        let base = match label.series {
            chem::IonSeries::Y => 1.0,
            chem::IonSeries::B => 0.6,
        };
        let noise = if p.intensity_noise > 0.0 { spread.sample(&mut rng) } else { 0.0 };
        if keep {
            peaks.push(Peak::new(peak.mz + dmz, base * noise.exp()));
        }
    }
    let n_noise = rng.random_range(p.min_noise_peaks..=p.max_noise_peaks);
    let hi = mass.max(100.0);
    for _ in 0..n_noise {
        let mz = rng.random_range(50.0..hi);
        peaks.push(Peak::new(mz, rng.random_range(0.02..0.3)));
    }
    peaks.sort_by(|a, b| a.mz.total_cmp(&b.mz));
    Ok(AnnotatedSpectrum {
        spectrum: Spectrum::from_neutral_mass(peaks, mass, charge),
        peptide: Some(peptide),
        source_id: format!("synth:{seed}:{index}"),
    })
}

/// Generates a deterministic synthetic dataset. Record `i` depends only on
/// `(params, seed, i)`.
pub fn synth_dataset(params: &SynthParams, seed: u64) -> Result<DatasetSplit> {
    params.validate()?;
    let n = params.n_psms;
    let n_train = ((params.fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((params.fractions[1] * n as f64).round() as usize).min(n - n_train);
    let mut all = (0..n).map(|i| synth_one(params, seed, i)).collect::<Result<Vec<_>>>()?;
    let test = all.split_off(n_train + n_val);
    let validation = all.split_off(n_train);
    Ok(DatasetSplit { train: all, validation, test })
}

/// Files making up each split, resolved relative to the manifest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub train: Vec<PathBuf>,
    #[serde(default)]
    pub validation: Vec<PathBuf>,
    #[serde(default)]
    pub test: Vec<PathBuf>,
    /// Generator settings, when the data is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub seed: u64,
    pub params: SynthParams,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut m: Manifest = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in m.train.iter_mut().chain(m.validation.iter_mut()).chain(m.test.iter_mut()) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        crate::io_util::write_atomic_bytes(path, text.as_bytes())
    }

    /// Reads every listed file. Skipped records are returned alongside.
    pub fn read(&self) -> Result<(DatasetSplit, Vec<RecordError>)> {
        let mut skipped = Vec::new();
        let mut load = |files: &[PathBuf]| -> Result<Vec<AnnotatedSpectrum>> {
            let mut all = Vec::new();
            for f in files {
                let c = read_mgf(f)?;
                all.extend(c.records);
                skipped.extend(c.skipped);
            }
            Ok(all)
        };
        let split = DatasetSplit { train: load(&self.train)?, validation: load(&self.validation)?, test: load(&self.test)? };
        Ok((split, skipped))
    }
}

/// Writes `train.mgf`, `validation.mgf`, `test.mgf` and `manifest.toml` into
/// `dir`. Returns the written paths.
pub fn write_split(dir: &Path, split: &DatasetSplit, synth: Option<SynthRecord>) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (name, recs) in [("train", &split.train), ("validation", &split.validation), ("test", &split.test)] {
        let p = dir.join(format!("{name}.mgf"));
        save_mgf(&p, recs)?;
        written.push(p);
    }
    let manifest = Manifest {
        train: vec!["train.mgf".into()],
        validation: vec!["validation.mgf".into()],
        test: vec!["test.mgf".into()],
        synth,
    };
    let mp = dir.join("manifest.toml");
    manifest.save(&mp)?;
    written.push(mp);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pe() -> Peptide {
        Peptide::parse("PE").unwrap()
    }

    #[test]
    fn parses_single_glycine_record() {
        // G neutral 75.032028 + proton 1.007276
        let text = "BEGIN IONS\nPEPMASS=76.03931\nCHARGE=1+\nSEQ=G\n58.02874 100.0\nEND IONS\n";
        let c = parse_mgf(text.as_bytes()).unwrap();
        assert!(c.skipped.is_empty());
        let r = &c.records[0];
        assert_eq!(r.peptide.as_ref().unwrap().len(), 1);
        assert!((r.spectrum.precursor_mass() - 75.032028).abs() < 1e-5);
        assert_eq!(r.spectrum.peaks, vec![Peak::new(58.02874, 100.0)]);
        assert_eq!(r.source_id, "index=0");
    }

    #[test]
    fn empty_and_unannotated_inputs() {
        assert!(parse_mgf(&b""[..]).unwrap().records.is_empty());
        let c = parse_mgf(&b"BEGIN IONS\nTITLE=x\nPEPMASS=500.2 1000\nCHARGE=2\n100 1\nEND IONS\n"[..]).unwrap();
        assert_eq!(c.records[0].peptide, None);
        assert_eq!(c.records[0].spectrum.precursor_charge, 2);
    }

    #[test]
    fn malformed_records_are_skipped_with_lines() {
        let text = "BEGIN IONS\nCHARGE=2+\n100 1\nEND IONS\n\nBEGIN IONS\nPEPMASS=300\nCHARGE=2+\nSEQ=PEK\n1x0 4\nEND IONS\nBEGIN IONS\nPEPMASS=300\nCHARGE=2+\nEND IONS\nBEGIN IONS\nPEPMASS=1\n";
        let c = parse_mgf(text.as_bytes()).unwrap();
        assert_eq!(c.records.len(), 1);
        assert_eq!(c.records[0].source_id, "index=2");
        let lines: Vec<usize> = c.skipped.iter().map(|e| e.line).collect();
        assert_eq!(lines, vec![1, 6, 16]);
        assert!(c.skipped[0].message.contains("PEPMASS"));
        assert!(c.skipped[1].message.contains("line 10"));
    }

    #[test]
    fn writer_omits_missing_annotation() {
        let rec = AnnotatedSpectrum {
            spectrum: Spectrum::new(vec![Peak::new(100.5, 2.0)], 300.1, 2),
            peptide: None,
            source_id: "a".into(),
        };
        let mut buf = Vec::new();
        write_mgf(&[rec.clone()], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(!text.contains("SEQ="));
        assert_eq!(parse_mgf(text.as_bytes()).unwrap().records, vec![rec]);
        let mut empty = Vec::new();
        write_mgf(&[], &mut empty).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn preprocess_examples() {
        let s = Spectrum::new(vec![Peak::new(300.0, 9.0), Peak::new(100.0, 1.0), Peak::new(200.0, 4.0)], 900.0, 2);
        let out = preprocess(&s, &PreprocessConfig::default()).unwrap();
        let r = 14f64.sqrt();
        let got: Vec<f64> = out.peaks.iter().map(|p| p.intensity).collect();
        for (g, e) in got.iter().zip([1.0 / r, 2.0 / r, 3.0 / r]) {
            assert!((g - e).abs() < 1e-12);
        }
        assert_eq!(out.peaks[0].mz, 100.0);

        let many: Vec<Peak> = (0..200).map(|i| Peak::new(100.0 + i as f64, 1.0 + i as f64)).collect();
        let out = preprocess(&Spectrum::new(many, 2000.0, 2), &PreprocessConfig::default()).unwrap();
        assert_eq!(out.peaks.len(), 150);
        assert!(out.peaks.iter().all(|p| p.mz >= 150.0));

        let far = Spectrum::new(vec![Peak::new(10.0, 1.0), Peak::new(501.0, 3.0)], 500.0, 2);
        assert_eq!(preprocess(&far, &PreprocessConfig::default()), None);
    }

    #[test]
    fn missing_ratio_examples() {
        let all = chem::theoretical_spectrum(Peptide::parse("PEPTIDE").unwrap().residues(), 1.0).unwrap();
        let s = Spectrum::new(all.peaks.clone(), 500.0, 2);
        assert_eq!(missing_ratio(&s, &Peptide::parse("PEPTIDE").unwrap(), 0.05).unwrap(), 0.0);
        let empty = Spectrum::new(vec![], 500.0, 2);
        assert_eq!(missing_ratio(&empty, &pe(), 0.05).unwrap(), 1.0);
        let half = Spectrum::new(vec![Peak::new(98.06004 + 0.01, 1.0)], 500.0, 2);
        assert_eq!(missing_ratio(&half, &pe(), 0.05).unwrap(), 0.5);
        assert!(missing_ratio(&empty, &Peptide::parse("G").unwrap(), 0.05).is_err());
    }

    #[test]
    fn synth_determinism_and_fractions() {
        let p = SynthParams { n_psms: 40, ..SynthParams::default() };
        let a = synth_dataset(&p, 3).unwrap();
        assert_eq!(a, synth_dataset(&p, 3).unwrap());
        assert_ne!(a, synth_dataset(&p, 4).unwrap());
        assert_eq!((a.train.len(), a.validation.len(), a.test.len()), (32, 4, 4));
        a.check_disjoint().unwrap();
        for r in a.train.iter().chain(&a.test) {
            assert_eq!(r.precursor_consistent(1.0), Some(true));
        }
        let bad = SynthParams { fractions: [0.5, 0.3, 0.3], ..p };
        assert!(matches!(synth_dataset(&bad, 1), Err(Error::Config(_))));
    }

    #[test]
    fn synth_without_dropout_keeps_every_fragment() {
        let p = SynthParams { n_psms: 30, missing_ratio: 0.0, ..SynthParams::default() };
        let d = synth_dataset(&p, 11).unwrap();
        for r in d.train.iter().chain(&d.validation).chain(&d.test) {
            assert_eq!(missing_ratio(&r.spectrum, r.peptide.as_ref().unwrap(), 0.05).unwrap(), 0.0);
        }
    }

    #[test]
    fn synth_missing_ratio_matches_drop_rate() {
        let p = SynthParams { n_psms: 1000, min_noise_peaks: 0, max_noise_peaks: 0, ..SynthParams::default() };
        let d = synth_dataset(&p, 5).unwrap();
        let all: Vec<_> = d.train.iter().chain(&d.validation).chain(&d.test).collect();
        let mean: f64 = all.iter().map(|r| missing_ratio(&r.spectrum, r.peptide.as_ref().unwrap(), 0.05).unwrap()).sum::<f64>()
            / all.len() as f64;
        assert!((mean - 0.3).abs() < 0.02, "mean missing ratio {mean}");
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = SynthParams { n_psms: 10, ..SynthParams::default() };
        let split = synth_dataset(&p, 2).unwrap();
        write_split(dir.path(), &split, Some(SynthRecord { seed: 2, params: p })).unwrap();
        let m = Manifest::load(&dir.path().join("manifest.toml")).unwrap();
        assert_eq!(m.synth.as_ref().unwrap().seed, 2);
        let (back, skipped) = m.read().unwrap();
        assert!(skipped.is_empty());
        assert_eq!(back, split);
    }

    fn record_strategy() -> impl Strategy<Value = AnnotatedSpectrum> {
        let peaks = prop::collection::vec((0.01f64..3000.0, 0.0f64..1e6), 0..30);
        let pep = prop::option::of(prop::collection::vec(0usize..23, 1..20));
        (peaks, 1.0f64..3000.0, 1u8..=10, pep, "[a-zA-Z0-9:._-]{1,12}").prop_map(|(peaks, mz, z, pep, id)| {
            AnnotatedSpectrum {
                spectrum: Spectrum::new(peaks.into_iter().map(|(m, i)| Peak::new(m, i)).collect(), mz, z),
                peptide: pep.map(|ix| Peptide::new(ix.into_iter().map(|i| Token::from_index(i).unwrap()).collect()).unwrap()),
                source_id: id,
            }
        })
    }

    proptest! {
        #[test]
        fn mgf_round_trip(records in prop::collection::vec(record_strategy(), 0..8)) {
            let mut buf = Vec::new();
            write_mgf(&records, &mut buf).unwrap();
            let back = parse_mgf(buf.as_slice()).unwrap();
            prop_assert!(back.skipped.is_empty());
            prop_assert_eq!(back.records, records);
        }

        #[test]
        fn preprocess_bounds(peaks in prop::collection::vec((1.0f64..3000.0, 0.001f64..1e4), 1..300)) {
            let s = Spectrum::new(peaks.into_iter().map(|(m, i)| Peak::new(m, i)).collect(), 1000.0, 2);
            if let Some(out) = preprocess(&s, &PreprocessConfig::default()) {
                prop_assert!(out.peaks.len() <= 150);
                let norm: f64 = out.peaks.iter().map(|p| p.intensity * p.intensity).sum();
                prop_assert!((norm - 1.0).abs() < 1e-6);
                prop_assert!(out.peaks.windows(2).all(|w| w[0].mz <= w[1].mz));
            }
        }

        #[test]
        fn missing_ratio_never_rises_when_peaks_are_added(extra in prop::collection::vec(50.0f64..900.0, 0..20), seed in 0u64..100) {
            let p = SynthParams { n_psms: 1, fractions: [1.0, 0.0, 0.0], ..SynthParams::default() };
            let r = synth_dataset(&p, seed).unwrap().train.remove(0);
            let pep = r.peptide.unwrap();
            let mut s = r.spectrum;
            let mut last = missing_ratio(&s, &pep, 0.05).unwrap();
            for mz in extra {
                s.peaks.push(Peak::new(mz, 1.0));
                let now = missing_ratio(&s, &pep, 0.05).unwrap();
                prop_assert!(now <= last);
                last = now;
            }
        }
    }
}
