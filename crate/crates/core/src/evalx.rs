//! Amino-acid, peptide and PTM level metrics, the precision-coverage AUC and
//! missing-ratio stratification.

use crate::chem::{self, Peptide, Spectrum, Token};
use crate::error::{Error, Result};
use crate::infer::PredictionRecord;
use crate::msio::{self, AnnotatedSpectrum};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;

pub const DEFAULT_AA_TOL: f64 = 0.1;
pub const DEFAULT_PREFIX_TOL: f64 = 0.5;

/// Position-level agreement between a prediction and its truth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AaMatch {
    pub matched: usize,
    pub pred_len: usize,
    pub truth_len: usize,
    pub pred_flags: Vec<bool>,
    /// For each matched prediction position, the truth index it matched.
    pub pairs: Vec<(usize, usize)>,
}

fn ladder(tokens: &[Token]) -> Vec<(f64, f64)> {
    let mut total = 0.0;
    tokens
        .iter()
        .map(|&t| {
            let m = chem::residue_mass(t).expect("peptides never hold the stop token");
            total += m;
            (total, m)
        })
        .collect()
}

/// Two-pointer walk over both prefix-mass ladders. Positions match when the
/// prefix masses (including the residue) agree within `prefix_tol` and the
/// residue masses within `aa_tol`.
pub fn aa_match(pred: &[Token], truth: &[Token], aa_tol: f64, prefix_tol: f64) -> AaMatch {
    let (lp, lt) = (ladder(pred), ladder(truth));
    let mut flags = vec![false; pred.len()];
    let mut pairs = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < lp.len() && j < lt.len() {
        let (cp, mp) = lp[i];
        let (ct, mt) = lt[j];
        if (cp - ct).abs() < prefix_tol {
            if (mp - mt).abs() < aa_tol {
                flags[i] = true;
                pairs.push((i, j));
            }
            i += 1;
            j += 1;
        } else if ct > cp {
            i += 1;
        } else {
            j += 1;
        }
    }
    AaMatch { matched: pairs.len(), pred_len: pred.len(), truth_len: truth.len(), pred_flags: flags, pairs }
}

/// A prediction (possibly absent) paired with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub source_id: String,
    pub pred: Option<Peptide>,
    pub confidence: f64,
    pub truth: Peptide,
}

impl EvalRecord {
    fn matching(&self, tol: &Tolerances) -> Option<AaMatch> {
        self.pred.as_ref().map(|p| aa_match(p.residues(), self.truth.residues(), tol.aa, tol.prefix))
    }

    fn correct(&self, tol: &Tolerances) -> bool {
        match self.matching(tol) {
            Some(m) => m.pred_len == m.truth_len && m.matched == m.truth_len,
            None => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerances {
    pub aa: f64,
    pub prefix: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { aa: DEFAULT_AA_TOL, prefix: DEFAULT_PREFIX_TOL }
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Corpus-pooled precision and recall; `None` marks 0/0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrecisionRecall {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

pub fn aa_metrics(records: &[EvalRecord], tol: &Tolerances) -> Result<PrecisionRecall> {
    if records.is_empty() {
        return Err(Error::UndefinedMetric("amino-acid metrics of an empty corpus".into()));
    }
    let (mut hit, mut np, mut nt) = (0, 0, 0);
    for r in records {
        nt += r.truth.len();
        if let Some(m) = r.matching(tol) {
            hit += m.matched;
            np += m.pred_len;
        }
    }
    Ok(PrecisionRecall { precision: ratio(hit, np), recall: ratio(hit, nt) })
}

/// One point of the precision-coverage curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub threshold: f64,
    pub coverage: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PeptideMetrics {
    pub precision: Option<f64>,
    pub auc: Option<f64>,
    pub curve: Vec<CurvePoint>,
}

/// Peptide precision at full coverage and the area under the precision
/// versus coverage curve. Records tied in confidence enter together.
pub fn peptide_metrics(records: &[EvalRecord], tol: &Tolerances) -> PeptideMetrics {
    let mut scored: Vec<(f64, bool)> =
        records.iter().filter(|r| r.pred.is_some()).map(|r| (r.confidence, r.correct(tol))).collect();
    let n = scored.len();
    if n == 0 {
        return PeptideMetrics { precision: None, auc: None, curve: Vec::new() };
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut curve = Vec::new();
    let (mut seen, mut correct, mut auc, mut last_cov) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < n {
        let thr = scored[i].0;
        while i < n && scored[i].0 == thr {
            seen += 1;
            correct += usize::from(scored[i].1);
            i += 1;
        }
        let cov = seen as f64 / n as f64;
        let prec = correct as f64 / seen as f64;
        auc += (cov - last_cov) * prec;
        last_cov = cov;
        curve.push(CurvePoint { threshold: thr, coverage: cov, precision: prec });
    }
    PeptideMetrics { precision: Some(correct as f64 / n as f64), auc: Some(auc), curve }
}

/// PTM precision over predicted modified residues and recall over all truth
/// modified residues. A hit needs an aa-level match carrying the same token.
pub fn ptm_metrics(records: &[EvalRecord], tol: &Tolerances) -> PrecisionRecall {
    let (mut tp, mut np, mut nt) = (0, 0, 0);
    for r in records {
        let truth = r.truth.residues();
        nt += truth.iter().filter(|t| t.is_modified()).count();
        let Some(pred) = &r.pred else { continue };
        let pred = pred.residues();
        np += pred.iter().filter(|t| t.is_modified()).count();
        let m = aa_match(pred, truth, tol.aa, tol.prefix);
        tp += m.pairs.iter().filter(|&&(i, j)| pred[i].is_modified() && pred[i] == truth[j]).count();
    }
    PrecisionRecall { precision: ratio(tp, np), recall: ratio(tp, nt) }
}

/// A half-open missing-ratio interval `[lo, hi)`; the last bin also holds `hi`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
}

pub fn uniform_bins(n: usize) -> Vec<Bin> {
    (0..n).map(|i| Bin { lo: i as f64 / n as f64, hi: (i + 1) as f64 / n as f64 }).collect()
}

/// Parses `"0,0.2,0.4,1"` into consecutive bins.
pub fn parse_bin_edges(s: &str) -> Result<Vec<Bin>> {
    let edges = s
        .split(',')
        .map(|e| e.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad bin edge {e:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let bins: Vec<Bin> = edges.windows(2).map(|w| Bin { lo: w[0], hi: w[1] }).collect();
    check_partition(&bins)?;
    Ok(bins)
}

fn check_partition(bins: &[Bin]) -> Result<()> {
    let ok = !bins.is_empty()
        && bins[0].lo == 0.0
        && bins[bins.len() - 1].hi == 1.0
        && bins.iter().all(|b| b.lo < b.hi)
        && bins.windows(2).all(|w| w[0].hi == w[1].lo);
    if ok {
        Ok(())
    } else {
        Err(Error::Config("bins must partition [0, 1] in increasing order".into()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinRow {
    pub bin: Bin,
    pub n_psms: usize,
    pub aa: Option<PrecisionRecall>,
    pub peptide_precision: Option<f64>,
    pub peptide_auc: Option<f64>,
}

/// Per-bin metrics. `ratios[k]` is the missing ratio of `records[k]`.
pub fn stratify(records: &[EvalRecord], ratios: &[f64], bins: &[Bin], tol: &Tolerances) -> Result<Vec<BinRow>> {
    check_partition(bins)?;
    if records.len() != ratios.len() {
        return Err(Error::Domain("one missing ratio per record is required".into()));
    }
    let last = bins.len() - 1;
    let mut groups: Vec<Vec<EvalRecord>> = vec![Vec::new(); bins.len()];
    for (r, &x) in records.iter().zip(ratios) {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::Domain(format!("missing ratio {x} outside [0, 1]")));
        }
        let k = bins.iter().position(|b| x >= b.lo && x < b.hi).unwrap_or(last);
        groups[k].push(r.clone());
    }
    Ok(bins
        .iter()
        .zip(groups)
        .map(|(&bin, g)| {
            let pep = peptide_metrics(&g, tol);
            BinRow {
                bin,
                n_psms: g.len(),
                aa: aa_metrics(&g, tol).ok(),
                peptide_precision: pep.precision,
                peptide_auc: pep.auc,
            }
        })
        .collect())
}

/// Missing ratios of annotated spectra; `None` for peptides shorter than 2.
pub fn missing_ratios(spectra: &[&Spectrum], truths: &[&Peptide], tol: f64) -> Vec<Option<f64>> {
    spectra.iter().zip(truths).map(|(s, p)| msio::missing_ratio(s, p, tol).ok()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub n_psms: usize,
    pub aa_precision: Option<f64>,
    pub aa_recall: Option<f64>,
    pub pep_precision: Option<f64>,
    pub pep_auc: Option<f64>,
    pub ptm_precision: Option<f64>,
    pub ptm_recall: Option<f64>,
    pub per_bin: Vec<BinRow>,
    /// Records left out of the bins (peptides too short for a missing ratio).
    pub unbinned: usize,
    pub curve: Vec<CurvePoint>,
}

/// Joins predictions to annotated spectra by `source_id`. Annotated spectra
/// without a prediction count as unpredicted; predictions without an
/// annotated spectrum are ignored.
pub fn join(predictions: &[PredictionRecord], truths: &[AnnotatedSpectrum]) -> Vec<(EvalRecord, Spectrum)> {
    let by_id: HashMap<&str, &PredictionRecord> = predictions.iter().map(|p| (p.source_id.as_str(), p)).collect();
    truths
        .iter()
        .filter_map(|t| {
            let truth = t.peptide.clone()?;
            let p = by_id.get(t.source_id.as_str());
            Some((
                EvalRecord {
                    source_id: t.source_id.clone(),
                    pred: p.map(|p| p.peptide.clone()),
                    confidence: p.map_or(0.0, |p| p.peptide_confidence),
                    truth,
                },
                t.spectrum.clone(),
            ))
        })
        .collect()
}

/// Computes every metric over `pairs`, binning by missing ratio with
/// presence tolerance `presence_tol` (Da).
pub fn evaluate(pairs: &[(EvalRecord, Spectrum)], bins: &[Bin], tol: &Tolerances, presence_tol: f64) -> Result<EvalReport> {
    let records: Vec<EvalRecord> = pairs.iter().map(|(r, _)| r.clone()).collect();
    let aa = aa_metrics(&records, tol)?;
    let pep = peptide_metrics(&records, tol);
    let ptm = ptm_metrics(&records, tol);
    let mut binned = Vec::new();
    let mut ratios = Vec::new();
    for (r, s) in pairs {
        if let Ok(x) = msio::missing_ratio(s, &r.truth, presence_tol) {
            binned.push(r.clone());
            ratios.push(x);
        }
    }
    let per_bin = stratify(&binned, &ratios, bins, tol)?;
    Ok(EvalReport {
        n_psms: records.len(),
        aa_precision: aa.precision,
        aa_recall: aa.recall,
        pep_precision: pep.precision,
        pep_auc: pep.auc,
        ptm_precision: ptm.precision,
        ptm_recall: ptm.recall,
        per_bin,
        unbinned: records.len() - binned.len(),
        curve: pep.curve,
    })
}

fn show(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

impl EvalReport {
    /// Human-readable summary table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "PSMs               {}", self.n_psms);
        for (name, v) in self.metric_rows() {
            let _ = writeln!(s, "{name:<18} {}", show(v));
        }
        let _ = writeln!(s, "\nmissing ratio      n      aa_prec  aa_rec   pep_prec");
        for row in &self.per_bin {
            let aa = row.aa.unwrap_or(PrecisionRecall { precision: None, recall: None });
            let _ = writeln!(
                s,
                "[{:.2}, {:.2}){:>9} {:>8} {:>8} {:>8}",
                row.bin.lo,
                row.bin.hi,
                row.n_psms,
                show(aa.precision),
                show(aa.recall),
                show(row.peptide_precision)
            );
        }
        if self.unbinned > 0 {
            let _ = writeln!(s, "unbinned           {}", self.unbinned);
        }
        s
    }

    fn metric_rows(&self) -> [(&'static str, Option<f64>); 6] {
        [
            ("aa_precision", self.aa_precision),
            ("aa_recall", self.aa_recall),
            ("peptide_precision", self.pep_precision),
            ("peptide_auc", self.pep_auc),
            ("ptm_precision", self.ptm_precision),
            ("ptm_recall", self.ptm_recall),
        ]
    }

    /// `metric<TAB>value` rows, `n/a` for undefined values.
    pub fn write_metrics_tsv<W: Write + ?Sized>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "metric\tvalue")?;
        writeln!(out, "n_psms\t{}", self.n_psms)?;
        for (name, v) in self.metric_rows() {
            writeln!(out, "{name}\t{}", v.map_or_else(|| "n/a".into(), |v| v.to_string()))?;
        }
        Ok(())
    }

    pub fn write_bins_tsv<W: Write + ?Sized>(&self, out: &mut W) -> Result<()> {
        let f = |v: Option<f64>| v.map_or_else(|| "n/a".into(), |v: f64| v.to_string());
        writeln!(out, "bin_lo\tbin_hi\tn_psms\taa_precision\taa_recall\tpeptide_precision\tpeptide_auc")?;
        for r in &self.per_bin {
            let aa = r.aa.unwrap_or(PrecisionRecall { precision: None, recall: None });
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.bin.lo,
                r.bin.hi,
                r.n_psms,
                f(aa.precision),
                f(aa.recall),
                f(r.peptide_precision),
                f(r.peptide_auc)
            )?;
        }
        Ok(())
    }

    pub fn write_curve_csv<W: Write + ?Sized>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "threshold,coverage,precision")?;
        for p in &self.curve {
            writeln!(out, "{},{},{}", p.threshold, p.coverage, p.precision)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pep(s: &str) -> Peptide {
        Peptide::parse(s).unwrap()
    }

    fn rec(pred: Option<&str>, truth: &str, conf: f64) -> EvalRecord {
        EvalRecord { source_id: truth.into(), pred: pred.map(pep), confidence: conf, truth: pep(truth) }
    }

    fn m(a: &str, b: &str) -> AaMatch {
        aa_match(pep(a).residues(), pep(b).residues(), 0.1, 0.5)
    }

    #[test]
    fn aa_match_examples() {
        assert_eq!(m("PEPTIDE", "PEPTIDE").matched, 7);
        assert_eq!(m("GA", "AG").matched, 0);
        assert_eq!(m("GG", "N").matched, 0);
        // shared prefix "PE", then diverging: PEK vs PEQ differ by 0.036 Da (< 0.1)
        assert_eq!(m("PEK", "PEQ").matched, 3);
        assert_eq!(m("PENK", "PEGGK").matched, 3);
    }

    fn fixture() -> Vec<EvalRecord> {
        vec![
            rec(Some("PEPTIDE"), "PEPTIDE", 0.9),
            rec(Some("GGK"), "NK", 0.8),
            rec(Some("PEPM(+15.99)K"), "PEPM(+15.99)K", 0.7),
            rec(Some("AGK"), "GAK", 0.6),
            rec(None, "PEN(+.98)K", 0.0),
        ]
    }

    #[test]
    fn five_psm_fixture() {
        let tol = Tolerances::default();
        let aa = aa_metrics(&fixture(), &tol).unwrap();
        // matched: 7 + 1 (K) + 5 + 1 (K) + 0 = 14; predicted 7+3+5+3 = 18; truth 7+2+5+3+4 = 21
        assert_eq!(aa.precision, Some(14.0 / 18.0));
        assert_eq!(aa.recall, Some(14.0 / 21.0));
        let p = peptide_metrics(&fixture(), &tol);
        assert_eq!(p.precision, Some(0.5));
        // sorted correct flags: 1, 0, 1, 0 ; precisions 1, 1/2, 2/3, 1/2
        let expect = 0.25 * (1.0 + 0.5 + 2.0 / 3.0 + 0.5);
        assert!((p.auc.unwrap() - expect).abs() < 1e-15);
        let ptm = ptm_metrics(&fixture(), &tol);
        assert_eq!((ptm.precision, ptm.recall), (Some(1.0), Some(0.5)));
    }

    #[test]
    fn two_record_auc() {
        let recs = [rec(Some("PEK"), "PEK", 0.9), rec(Some("PEK"), "GGG", 0.5)];
        let p = peptide_metrics(&recs, &Tolerances::default());
        assert_eq!(p.precision, Some(0.5));
        assert_eq!(p.auc, Some(0.75));
        let pts: Vec<(f64, f64)> = p.curve.iter().map(|c| (c.coverage, c.precision)).collect();
        assert_eq!(pts, vec![(0.5, 1.0), (1.0, 0.5)]);
    }

    #[test]
    fn undefined_cases() {
        let tol = Tolerances::default();
        assert!(matches!(aa_metrics(&[], &tol), Err(Error::UndefinedMetric(_))));
        let none = [rec(None, "PEK", 0.0)];
        let aa = aa_metrics(&none, &tol).unwrap();
        assert_eq!((aa.precision, aa.recall), (None, Some(0.0)));
        let p = ptm_metrics(&[rec(Some("PEK"), "PEK", 1.0)], &tol);
        assert_eq!((p.precision, p.recall), (None, None));
        let p = ptm_metrics(&[rec(Some("PEMK"), "PEM(+15.99)K", 1.0)], &tol);
        assert_eq!((p.precision, p.recall), (None, Some(0.0)));
    }

    #[test]
    fn ptm_three_psm_fixture() {
        let recs = [
            rec(Some("M(+15.99)PEK"), "M(+15.99)PEK", 1.0),
            rec(Some("PEM(+15.99)K"), "PEFK", 1.0),
            rec(Some("PEFK"), "PEM(+15.99)K", 1.0),
        ];
        // oxidised M and F differ by 0.033 Da, so records 2 and 3 match
        // position-wise with mismatched tokens: TP 1 of 2 predicted, 2 true
        let p = ptm_metrics(&recs, &Tolerances::default());
        assert_eq!((p.precision, p.recall), (Some(0.5), Some(0.5)));
        assert_eq!(m("PEM(+15.99)K", "PEFK").matched, 4);
    }

    #[test]
    fn single_bin_reproduces_global_metrics() {
        let tol = Tolerances::default();
        let recs = fixture();
        let ratios = [0.0, 0.1, 0.9, 1.0, 0.5];
        let rows = stratify(&recs, &ratios, &[Bin { lo: 0.0, hi: 1.0 }], &tol).unwrap();
        assert_eq!(rows[0].n_psms, 5);
        assert_eq!(rows[0].aa, Some(aa_metrics(&recs, &tol).unwrap()));
        assert_eq!(rows[0].peptide_precision, Some(0.5));
        let rows = stratify(&recs, &ratios, &uniform_bins(10), &tol).unwrap();
        assert_eq!(rows.iter().map(|r| r.n_psms).sum::<usize>(), 5);
        assert_eq!(rows[9].n_psms, 2);
        assert_eq!(rows[3].aa, None);
        assert!(parse_bin_edges("0,0.5,0.4,1").is_err());
        assert_eq!(parse_bin_edges("0, 0.2,1").unwrap().len(), 2);
    }

    fn tokens() -> impl Strategy<Value = Vec<Token>> {
        prop::collection::vec(0usize..23, 1..12).prop_map(|v| v.into_iter().map(|i| Token::from_index(i).unwrap()).collect())
    }

    proptest! {
        #[test]
        fn match_count_is_symmetric(a in tokens(), b in tokens()) {
            let ab = aa_match(&a, &b, 0.1, 0.5);
            let ba = aa_match(&b, &a, 0.1, 0.5);
            prop_assert_eq!(ab.matched, ba.matched);
            prop_assert_eq!((ab.pred_len, ab.truth_len), (ba.truth_len, ba.pred_len));
        }

        #[test]
        fn metrics_ignore_record_order(seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut recs = fixture();
            recs.push(rec(Some("PEK"), "PEK", 0.8));
            let tol = Tolerances::default();
            let base = (aa_metrics(&recs, &tol).unwrap(), peptide_metrics(&recs, &tol), ptm_metrics(&recs, &tol));
            recs.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let again = (aa_metrics(&recs, &tol).unwrap(), peptide_metrics(&recs, &tol), ptm_metrics(&recs, &tol));
            prop_assert_eq!(base, again);
        }

        #[test]
        fn auc_bounds(flags in prop::collection::vec((0u8..4, any::<bool>()), 1..30)) {
            let recs: Vec<EvalRecord> = flags
                .iter()
                .map(|&(c, ok)| rec(Some("PEK"), if ok { "PEK" } else { "GGG" }, f64::from(c) / 4.0))
                .collect();
            let p = peptide_metrics(&recs, &Tolerances::default());
            let auc = p.auc.unwrap();
            let max = p.curve.iter().map(|c| c.precision).fold(0.0, f64::max);
            prop_assert!(auc <= 1.0 + 1e-12 && auc <= max + 1e-12);
            prop_assert_eq!(p.curve.last().unwrap().precision, p.precision.unwrap());
        }
    }
}
