use super::{encode_with, mz_divisors, position_encoding, ImputationOutput, LatentPeakSet, ModelConfig};
use crate::assign::{build_cost_matrix, filter_imputed, solve_assignment, Cost};
use crate::autograd::{log_softmax, Tape, Var};
use crate::chem::{self, Peak, Peptide, Spectrum, Token};
use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Precursor mass (neutral, Da) and charge.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Precursor {
    pub mass: f64,
    pub charge: u8,
}

impl Precursor {
    pub fn of(spectrum: &Spectrum) -> Self {
        Self { mass: spectrum.precursor_mass(), charge: spectrum.precursor_charge }
    }
}

/// One preprocessed, annotated spectrum ready for training.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub spectrum: Spectrum,
    pub peptide: Peptide,
}

/// Loss components of one forward pass (or their batch mean).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub ce_main: f64,
    pub ce_theory: f64,
    pub imputation: f64,
    pub total: f64,
}

/// Summed gradients and mean losses for a batch.
#[derive(Debug)]
pub struct BatchOutcome<T> {
    pub losses: LossBreakdown,
    pub grads: Gradients<T>,
    pub used: usize,
    pub skipped: usize,
}

/// Which latent set the decoder cross-attends to.
#[derive(Clone, Copy, Debug)]
pub enum MemoryMode<'a> {
    /// `[filtered imputations; z]` (just `z` when imputation is disabled).
    Imputed,
    /// `[encoded theoretical spectrum of the truth; z]`.
    Oracle(&'a Peptide),
    /// `z` alone.
    Observed,
}

/// Dropout state for one forward pass. `None` disables it.
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, seed: u64) -> Self {
        if rate > 0.0 {
            Self { rate, rng: Some(ChaCha8Rng::seed_from_u64(seed)) }
        } else {
            Self::off()
        }
    }

    fn apply<T: Scalar>(&mut self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let Some(rng) = self.rng.as_mut() else { return x };
        let keep = T::from_f64_lossy(1.0 / (1.0 - self.rate));
        let n = tape.value(x).len();
        let mask = (0..n).map(|_| if rng.random::<f64>() < self.rate { T::zero() } else { keep }).collect();
        tape.dropout(x, mask)
    }
}

#[derive(Clone, Copy, Debug)]
struct LinearIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct NormIds {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct AttentionIds {
    q: LinearIds,
    k: LinearIds,
    v: LinearIds,
    o: LinearIds,
}

#[derive(Clone, Copy, Debug)]
struct FeedForwardIds {
    up: LinearIds,
    down: LinearIds,
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    attn: AttentionIds,
    norm1: NormIds,
    ffn: FeedForwardIds,
    norm2: NormIds,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayer {
    self_attn: AttentionIds,
    norm1: NormIds,
    cross_attn: AttentionIds,
    norm2: NormIds,
    ffn: FeedForwardIds,
    norm3: NormIds,
}

#[derive(Clone, Debug)]
struct ImputerIds {
    queries: ParamId,
    layers: Vec<DecoderLayer>,
    vec_head: FeedForwardIds,
    prob_hidden: LinearIds,
    prob_out: LinearIds,
}

#[derive(Clone, Debug)]
struct Layout {
    intensity: LinearIds,
    charge: ParamId,
    encoder: Vec<EncoderLayer>,
    imputer: Option<ImputerIds>,
    token: ParamId,
    decoder: Vec<DecoderLayer>,
    head: LinearIds,
}

struct Init<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Init<'_, T> {
    fn uniform(&mut self, name: String, rows: usize, cols: usize, bound: f64) -> ParamId {
        let rng = &mut self.rng;
        let m = Matrix::from_fn(rows, cols, |_, _| T::from_f64_lossy(rng.random_range(-bound..=bound)));
        self.store.add(name, m)
    }

    fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("valid std");
        let rng = &mut self.rng;
        let m = Matrix::from_fn(rows, cols, |_, _| T::from_f64_lossy(dist.sample(rng)));
        self.store.add(name, m)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> LinearIds {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = self.uniform(format!("{name}.weight"), fan_in, fan_out, bound);
        let b = self.store.add(format!("{name}.bias"), Matrix::zeros(1, fan_out));
        LinearIds { w, b }
    }

    fn norm(&mut self, name: &str, d: usize) -> NormIds {
        let g = self.store.add(format!("{name}.gain"), Matrix::filled(1, d, T::one()));
        let b = self.store.add(format!("{name}.bias"), Matrix::zeros(1, d));
        NormIds { g, b }
    }

    fn attention(&mut self, name: &str, d: usize) -> AttentionIds {
        AttentionIds {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.out"), d, d),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, hidden: usize, out: usize) -> FeedForwardIds {
        FeedForwardIds { up: self.linear(&format!("{name}.up"), d, hidden), down: self.linear(&format!("{name}.down"), hidden, out) }
    }

    fn decoder_layer(&mut self, name: &str, cfg: &ModelConfig) -> DecoderLayer {
        let d = cfg.d_model;
        DecoderLayer {
            self_attn: self.attention(&format!("{name}.self_attn"), d),
            norm1: self.norm(&format!("{name}.norm1"), d),
            cross_attn: self.attention(&format!("{name}.cross_attn"), d),
            norm2: self.norm(&format!("{name}.norm2"), d),
            ffn: self.ffn(&format!("{name}.ffn"), d, cfg.ffn_width, d),
            norm3: self.norm(&format!("{name}.norm3"), d),
        }
    }
}

/// The full network: encoder, optional imputation module, decoder.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    cfg: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
    divisors: Vec<f64>,
}

impl<T: Scalar + Cost> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut store = ParamStore::new();
        let mut init = Init { store: &mut store, rng: ChaCha8Rng::seed_from_u64(seed) };
        let intensity = init.linear("peak.intensity", 1, d);
        let charge = init.normal("precursor.charge".into(), 10, d, 1.0);
        let encoder = (0..cfg.encoder_layers)
            .map(|l| {
                let n = format!("encoder.{l}");
                EncoderLayer {
                    attn: init.attention(&format!("{n}.self_attn"), d),
                    norm1: init.norm(&format!("{n}.norm1"), d),
                    ffn: init.ffn(&format!("{n}.ffn"), d, cfg.ffn_width, d),
                    norm2: init.norm(&format!("{n}.norm2"), d),
                }
            })
            .collect();
        let imputer = cfg.imputation.then(|| ImputerIds {
            queries: init.normal("imputer.queries".into(), cfg.queries, d, 0.02),
            layers: (0..cfg.imputer_layers).map(|l| init.decoder_layer(&format!("imputer.{l}"), &cfg)).collect(),
            vec_head: init.ffn("imputer.vector_head", d, d, d),
            prob_hidden: init.linear("imputer.prob_head.up", d, d),
            prob_out: init.linear("imputer.prob_head.down", d, 1),
        });
        let token = init.normal("decoder.token".into(), cfg.vocab_size, d, 1.0);
        let decoder = (0..cfg.decoder_layers).map(|l| init.decoder_layer(&format!("decoder.{l}"), &cfg)).collect();
        let head = init.linear("decoder.head", d, cfg.vocab_size);
        let layout = Layout { intensity, charge, encoder, imputer, token, decoder, head };
        let divisors = mz_divisors(d, cfg.lambda_max, cfg.lambda_min);
        Ok(Self { cfg, params: store, layout, divisors })
    }

    /// Replaces all parameters; names and shapes must match this architecture.
    pub fn with_params(cfg: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!("expected {} tensors, found {}", model.params.len(), params.len())));
        }
        for (id, name, value) in model.params.iter() {
            let other = params.id_of(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if params.get(other).shape() != value.shape() || other != id {
                return Err(Error::Checkpoint(format!("tensor {name} has the wrong shape or position")));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn mz_row(&self, m: f64) -> Vec<T> {
        encode_with(m, &self.divisors).into_iter().map(T::from_f64_lossy).collect()
    }

    /// Observed peaks plus, when enabled, their complementary peaks.
    pub fn peak_list(&self, spectrum: &Spectrum) -> Vec<Peak> {
        let mut peaks = spectrum.peaks.clone();
        if self.cfg.use_complement {
            peaks.extend(chem::complementary_spectrum(spectrum).peaks);
        }
        peaks
    }

    fn linear(&self, tape: &mut Tape<'_, T>, x: Var, ids: LinearIds) -> Var {
        let (w, b) = (tape.param(ids.w), tape.param(ids.b));
        tape.linear(x, w, Some(b))
    }

    fn norm(&self, tape: &mut Tape<'_, T>, x: Var, ids: NormIds) -> Var {
        let (g, b) = (tape.param(ids.g), tape.param(ids.b));
        tape.layer_norm(x, g, b)
    }

    fn attend(&self, tape: &mut Tape<'_, T>, x: Var, memory: Var, ids: AttentionIds, causal: bool) -> Var {
        let q = self.linear(tape, x, ids.q);
        let k = self.linear(tape, memory, ids.k);
        let v = self.linear(tape, memory, ids.v);
        let a = tape.attention(q, k, v, self.cfg.heads, causal);
        self.linear(tape, a, ids.o)
    }

    fn feed_forward(&self, tape: &mut Tape<'_, T>, x: Var, ids: FeedForwardIds, drop: &mut Dropout) -> Var {
        let h = self.linear(tape, x, ids.up);
        let h = tape.relu(h);
        let h = drop.apply(tape, h);
        self.linear(tape, h, ids.down)
    }

    fn residual(&self, tape: &mut Tape<'_, T>, x: Var, sub: Var, norm: NormIds, drop: &mut Dropout) -> Var {
        let sub = drop.apply(tape, sub);
        let s = tape.add(x, sub);
        self.norm(tape, s, norm)
    }

    fn decoder_layer(&self, tape: &mut Tape<'_, T>, x: Var, memory: Var, l: &DecoderLayer, causal: bool, drop: &mut Dropout) -> Var {
        let a = self.attend(tape, x, x, l.self_attn, causal);
        let x = self.residual(tape, x, a, l.norm1, drop);
        let c = self.attend(tape, x, memory, l.cross_attn, false);
        let x = self.residual(tape, x, c, l.norm2, drop);
        let f = self.feed_forward(tape, x, l.ffn, drop);
        self.residual(tape, x, f, l.norm3, drop)
    }

    /// Peak embeddings: m/z sinusoid plus a learned projection of intensity.
    pub(crate) fn embed_peaks_on(&self, tape: &mut Tape<'_, T>, peaks: &[Peak]) -> Var {
        let d = self.cfg.d_model;
        let mut mz = Vec::with_capacity(peaks.len() * d);
        for p in peaks {
            mz.extend(self.mz_row(p.mz));
        }
        let mz = tape.constant(Matrix::from_vec(peaks.len(), d, mz));
        let inten = tape.constant(Matrix::from_vec(
            peaks.len(),
            1,
            peaks.iter().map(|p| T::from_f64_lossy(p.intensity)).collect(),
        ));
        let proj = self.linear(tape, inten, self.layout.intensity);
        tape.add(mz, proj)
    }

    pub(crate) fn encode_on(&self, tape: &mut Tape<'_, T>, x: Var, drop: &mut Dropout) -> Var {
        let mut x = x;
        for l in &self.layout.encoder {
            let a = self.attend(tape, x, x, l.attn, false);
            x = self.residual(tape, x, a, l.norm1, drop);
            let f = self.feed_forward(tape, x, l.ffn, drop);
            x = self.residual(tape, x, f, l.norm2, drop);
        }
        x
    }

    /// Returns `(vectors M x d, probabilities M x 1)`.
    pub(crate) fn impute_on(&self, tape: &mut Tape<'_, T>, z: Var, drop: &mut Dropout) -> Result<(Var, Var)> {
        let imp = self.layout.imputer.as_ref().ok_or_else(|| Error::Config("model has no imputation module".into()))?;
        let mut x = tape.param(imp.queries);
        for l in &imp.layers {
            x = self.decoder_layer(tape, x, z, l, false, drop);
        }
        let vectors = self.feed_forward(tape, x, imp.vec_head, &mut Dropout::off());
        let h = self.linear(tape, x, imp.prob_hidden);
        let h = tape.relu(h);
        let logit = self.linear(tape, h, imp.prob_out);
        let probs = tape.sigmoid(logit);
        Ok((vectors, probs))
    }

    fn precursor_row(&self, tape: &mut Tape<'_, T>, precursor: Precursor) -> Result<Var> {
        if !(1..=10).contains(&precursor.charge) {
            return Err(Error::Domain(format!("precursor charge {} outside 1..=10", precursor.charge)));
        }
        let mz = tape.constant(Matrix::from_vec(1, self.cfg.d_model, self.mz_row(precursor.mass.max(0.0))));
        let table = tape.param(self.layout.charge);
        let charge = tape.gather_rows(table, &[usize::from(precursor.charge) - 1]);
        Ok(tape.add(mz, charge))
    }

    /// Vocabulary logits for positions `0..=prefix.len()`.
    pub(crate) fn decode_on(
        &self,
        tape: &mut Tape<'_, T>,
        prefix: &[Token],
        memory: Var,
        precursor: Precursor,
        drop: &mut Dropout,
    ) -> Result<Var> {
        if prefix.len() >= self.cfg.max_len + 1 {
            return Err(Error::Domain(format!("prefix length {} exceeds max_len {}", prefix.len(), self.cfg.max_len)));
        }
        let d = self.cfg.d_model;
        let prec = self.precursor_row(tape, precursor)?;
        let mut input = prec;
        if !prefix.is_empty() {
            let ids: Vec<usize> = prefix.iter().map(|t| t.index()).collect();
            let table = tape.param(self.layout.token);
            let emb = tape.gather_rows(table, &ids);
            input = tape.concat_rows(&[prec, emb]);
        }
        let rows = prefix.len() + 1;
        let mut extra = Vec::with_capacity(rows * d);
        let mut running = 0.0;
        for t in 0..rows {
            let pos = position_encoding(t, d);
            if self.cfg.prefix_mass_encoding && t > 0 {
                running += chem::residue_mass(prefix[t - 1])?;
                let mass = encode_with(running, &self.divisors);
                extra.extend(pos.iter().zip(mass).map(|(a, b)| T::from_f64_lossy(a + b)));
            } else {
                extra.extend(pos.into_iter().map(T::from_f64_lossy));
            }
        }
        let extra = tape.constant(Matrix::from_vec(rows, d, extra));
        let mut x = tape.add(input, extra);
        for l in &self.layout.decoder {
            x = self.decoder_layer(tape, x, memory, l, true, drop);
        }
        Ok(self.linear(tape, x, self.layout.head))
    }

    fn decoding_order(&self, peptide: &Peptide) -> Vec<Token> {
        let mut t = peptide.residues().to_vec();
        if self.cfg.reverse_decoding {
            t.reverse();
        }
        t
    }

    /// Theoretical peaks used as imputation targets for `peptide`, with the
    /// intensity of the most intense observed peak.
    fn theoretical_peaks(&self, spectrum: &Spectrum, peptide: &Peptide) -> Result<Vec<Peak>> {
        let reference = spectrum.max_intensity();
        let reference = if reference > 0.0 { reference } else { 1.0 };
        Ok(chem::theoretical_spectrum(peptide.residues(), reference)?.peaks)
    }

    /// Builds the training objective of one example on `tape`.
    pub fn build_loss(
        &self,
        tape: &mut Tape<'_, T>,
        example: &TrainingExample,
        label_smoothing: T,
        drop: &mut Dropout,
    ) -> Result<(Var, LossBreakdown)> {
        self.build_loss_against(tape, example, label_smoothing, drop, None)
    }

    /// Imputation targets of `example`: the encoded theoretical spectrum,
    /// truncated to the query count.
    pub fn imputation_targets(&self, example: &TrainingExample) -> Result<Matrix<T>> {
        let mut tape = Tape::new(&self.params);
        let tp = self.theoretical_peaks(&example.spectrum, &example.peptide)?;
        let xt = self.embed_peaks_on(&mut tape, &tp);
        let zt = self.encode_on(&mut tape, xt, &mut Dropout::off());
        let n = tape.value(zt).rows().min(self.cfg.queries);
        Ok(tape.value(zt).select_rows(&(0..n).collect::<Vec<_>>()))
    }

    /// Like [`Model::build_loss`], but with the imputation targets supplied by
    /// the caller instead of read off the current encoder. Since targets are
    /// constants in the objective, this is the function whose derivative the
    /// tape computes, which makes it the one to compare finite differences to.
    pub fn build_loss_against(
        &self,
        tape: &mut Tape<'_, T>,
        example: &TrainingExample,
        label_smoothing: T,
        drop: &mut Dropout,
        fixed_targets: Option<&Matrix<T>>,
    ) -> Result<(Var, LossBreakdown)> {
        let peptide = &example.peptide;
        if peptide.len() < 2 {
            return Err(Error::Domain("training needs peptides of length >= 2".into()));
        }
        let peaks = self.peak_list(&example.spectrum);
        if peaks.is_empty() {
            return Err(Error::Domain("spectrum has no peaks".into()));
        }
        let precursor = Precursor::of(&example.spectrum);
        let x = self.embed_peaks_on(tape, &peaks);
        let z = self.encode_on(tape, x, drop);

        let z_theory = if self.cfg.imputation || self.cfg.theory_ce {
            let tp = self.theoretical_peaks(&example.spectrum, peptide)?;
            let xt = self.embed_peaks_on(tape, &tp);
            Some(self.encode_on(tape, xt, drop))
        } else {
            None
        };

        let mut parts: Vec<(Var, T)> = Vec::with_capacity(3);
        let mut memory = z;
        let mut imputation = None;
        if self.cfg.imputation {
            let zt = z_theory.expect("built above");
            let (vectors, probs) = self.impute_on(tape, z, drop)?;
            let m = self.cfg.queries;
            let targets = match fixed_targets {
                Some(t) => t.clone(),
                None => {
                    let n = tape.value(zt).rows().min(m);
                    tape.value(zt).select_rows(&(0..n).collect::<Vec<_>>())
                }
            };
            let n_real = targets.rows();
            let out = ImputationOutput {
                vectors: tape.value(vectors).clone(),
                probs: tape.value(probs).data().to_vec(),
            };
            if !out.vectors.all_finite() || !out.probs.iter().all(|p| p.is_finite()) || !targets.all_finite() {
                return Err(Error::NonFinite("imputation output or targets".into()));
            }
            let assignment = solve_assignment(&build_cost_matrix(&out, &targets)?)?;
            let owner = assignment.inverse();
            let matched = tape.gather_rows(vectors, &owner[..n_real]);
            let target_leaf = tape.constant(targets);
            let diff = tape.sub(matched, target_leaf);
            let sq = tape.sum_squares(diff);
            let clamp = T::from_f64_lossy(self.cfg.log_clamp);
            let nll = tape.binary_log_loss(probs, &owner[..n_real], &owner[n_real..], clamp);
            let inv_n = if n_real == 0 { T::zero() } else { T::one() / T::from_usize(n_real).expect("count") };
            let inv_m = T::one() / T::from_usize(m).expect("count");
            let imp = tape.weighted_sum(&[(sq, inv_n), (nll, inv_m)]);
            imputation = Some(imp);
            parts.push((imp, T::one()));

            let keep = filter_imputed(&out, T::from_f64_lossy(self.cfg.tau));
            if !keep.is_empty() {
                let kept = tape.gather_rows(vectors, &keep);
                memory = tape.concat_rows(&[kept, z]);
            }
        }

        let tokens = self.decoding_order(peptide);
        let mut targets: Vec<usize> = tokens.iter().map(|t| t.index()).collect();
        targets.push(Token::STOP.index());
        let logits = self.decode_on(tape, &tokens, memory, precursor, drop)?;
        let ce_main = tape.smoothed_cross_entropy(logits, &targets, label_smoothing);
        parts.push((ce_main, T::one()));

        let mut ce_theory = None;
        if self.cfg.theory_ce {
            let zt = z_theory.expect("built above");
            let logits = self.decode_on(tape, &tokens, zt, precursor, drop)?;
            let ce = tape.smoothed_cross_entropy(logits, &targets, label_smoothing);
            ce_theory = Some(ce);
            parts.push((ce, T::one()));
        }

        let total = tape.weighted_sum(&parts);
        let read = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v).as_f64());
        let losses = LossBreakdown {
            ce_main: tape.scalar(ce_main).as_f64(),
            ce_theory: read(ce_theory),
            imputation: read(imputation),
            total: tape.scalar(total).as_f64(),
        };
        Ok((total, losses))
    }

    /// Mean loss and summed gradient of the mean loss over a batch.
    ///
    /// Examples with peptides shorter than two residues, or without peaks, are
    /// skipped and counted.
    pub fn forward_train(&self, batch: &[TrainingExample], label_smoothing: f64, dropout_seed: Option<u64>) -> Result<BatchOutcome<T>> {
        let usable: Vec<&TrainingExample> =
            batch.iter().filter(|e| e.peptide.len() >= 2 && !self.peak_list(&e.spectrum).is_empty()).collect();
        let skipped = batch.len() - usable.len();
        let mut grads = Gradients::for_store(&self.params);
        let mut sum = LossBreakdown::default();
        if usable.is_empty() {
            return Ok(BatchOutcome { losses: sum, grads, used: 0, skipped });
        }
        let weight = T::one() / T::from_usize(usable.len()).expect("count");
        let smoothing = T::from_f64_lossy(label_smoothing);
        for (i, ex) in usable.iter().enumerate() {
            let mut drop = match dropout_seed {
                Some(seed) => Dropout::new(self.cfg.dropout, seed.wrapping_mul(1_000_003).wrapping_add(i as u64)),
                None => Dropout::off(),
            };
            let mut tape = Tape::new(&self.params);
            let (loss, parts) = self.build_loss(&mut tape, ex, smoothing, &mut drop)?;
            tape.backward_into(loss, weight, &mut grads);
            sum.ce_main += parts.ce_main;
            sum.ce_theory += parts.ce_theory;
            sum.imputation += parts.imputation;
            sum.total += parts.total;
        }
        let n = usable.len() as f64;
        let losses = LossBreakdown {
            ce_main: sum.ce_main / n,
            ce_theory: sum.ce_theory / n,
            imputation: sum.imputation / n,
            total: sum.total / n,
        };
        Ok(BatchOutcome { losses, grads, used: usable.len(), skipped })
    }

    /// `N x d` peak embeddings of a spectrum (complement included when enabled).
    pub fn embed_peaks(&self, spectrum: &Spectrum) -> Matrix<T> {
        let peaks = self.peak_list(spectrum);
        let mut tape = Tape::new(&self.params);
        let v = self.embed_peaks_on(&mut tape, &peaks);
        tape.value(v).clone()
    }

    /// `1 x d` precursor embedding.
    pub fn embed_precursor(&self, precursor: Precursor) -> Result<Matrix<T>> {
        let mut tape = Tape::new(&self.params);
        let v = self.precursor_row(&mut tape, precursor)?;
        Ok(tape.value(v).clone())
    }

    /// Runs the spectrum encoder on precomputed peak embeddings.
    pub fn encode_spectrum(&self, embeddings: &Matrix<T>) -> Result<LatentPeakSet<T>> {
        if embeddings.rows() == 0 {
            return Err(Error::Domain("cannot encode an empty peak set".into()));
        }
        let mut tape = Tape::new(&self.params);
        let x = tape.constant(embeddings.clone());
        let z = self.encode_on(&mut tape, x, &mut Dropout::off());
        Ok(tape.value(z).clone())
    }

    /// Imputed latent peaks and their existence probabilities.
    pub fn impute(&self, z: &LatentPeakSet<T>) -> Result<ImputationOutput<T>> {
        if z.rows() == 0 {
            return Err(Error::Domain("cannot impute from an empty peak set".into()));
        }
        let mut tape = Tape::new(&self.params);
        let zv = tape.constant(z.clone());
        let (vectors, probs) = self.impute_on(&mut tape, zv, &mut Dropout::off())?;
        let clamp = T::from_f64_lossy(self.cfg.log_clamp);
        Ok(ImputationOutput {
            vectors: tape.value(vectors).clone(),
            probs: tape.value(probs).data().iter().map(|&p| p.max(clamp).min(T::one() - clamp)).collect(),
        })
    }

    /// `(prefix.len() + 1) x vocab` logits; row `t` scores token `t + 1`.
    pub fn decode_logits(&self, prefix: &[Token], memory: &Matrix<T>, precursor: Precursor) -> Result<Matrix<T>> {
        if memory.rows() == 0 {
            return Err(Error::Domain("decoder memory is empty".into()));
        }
        let mut tape = Tape::new(&self.params);
        let mem = tape.constant(memory.clone());
        let logits = self.decode_on(&mut tape, prefix, mem, precursor, &mut Dropout::off())?;
        Ok(tape.value(logits).clone())
    }

    /// The decoder memory for a spectrum under the given mode.
    pub fn memory(&self, spectrum: &Spectrum, mode: MemoryMode<'_>) -> Result<Matrix<T>> {
        let peaks = self.peak_list(spectrum);
        if peaks.is_empty() {
            return Err(Error::Domain("spectrum has no peaks".into()));
        }
        let mut tape = Tape::new(&self.params);
        let mut drop = Dropout::off();
        let x = self.embed_peaks_on(&mut tape, &peaks);
        let z = self.encode_on(&mut tape, x, &mut drop);
        let extra = match mode {
            MemoryMode::Observed => None,
            MemoryMode::Imputed => {
                if self.layout.imputer.is_some() {
                    let (vectors, probs) = self.impute_on(&mut tape, z, &mut drop)?;
                    let tau = T::from_f64_lossy(self.cfg.tau);
                    let keep: Vec<usize> =
                        tape.value(probs).data().iter().enumerate().filter(|(_, &p)| p > tau).map(|(i, _)| i).collect();
                    (!keep.is_empty()).then(|| tape.value(vectors).select_rows(&keep))
                } else {
                    None
                }
            }
            MemoryMode::Oracle(peptide) => {
                let tp = self.theoretical_peaks(spectrum, peptide)?;
                let xt = self.embed_peaks_on(&mut tape, &tp);
                let zt = self.encode_on(&mut tape, xt, &mut drop);
                Some(tape.value(zt).clone())
            }
        };
        let z = tape.value(z);
        Ok(match extra {
            Some(e) => Matrix::vstack(&[&e, z]),
            None => z.clone(),
        })
    }

    /// Log-probabilities of the next token after `prefix`.
    pub fn next_log_probs(&self, memory: &Matrix<T>, precursor: Precursor, prefix: &[Token]) -> Result<Vec<T>> {
        let logits = self.decode_logits(prefix, memory, precursor)?;
        Ok(log_softmax(logits.row(logits.rows() - 1)))
    }
}
