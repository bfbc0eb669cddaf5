//! Attentive caption generator: initializer, attention, gated encoder,
//! LSTM and deep-output decoder, trained with a penalized masked NLL.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interface::{check_simplex, effective_attention_unchecked, AttentionVector, InterfaceMethod};
use crate::lstm::{LstmCache, LstmGrads, LstmWeights};
use crate::metrics::{corpus_bleu, BleuScores};
use crate::tensor::{
    argmax, axpy, dot, dropout_mask, glorot, seeded_rng, sigmoid, softmax_backward, softmax_slice,
    DenseArray, GradBuffer, ParameterStore, Rng, PROB_FLOOR,
};
use crate::text::{TokenSequence, END_ID, PAD_ID, START_ID};

pub const W_C0: &str = "init.w_c0";
pub const B_C0: &str = "init.b_c0";
pub const W_H0: &str = "init.w_h0";
pub const B_H0: &str = "init.b_h0";
pub const W_PA: &str = "att.w_pa";
pub const W_PH: &str = "att.w_ph";
pub const B_PH: &str = "att.b_ph";
pub const W_BETA: &str = "gate.w_beta";
pub const B_BETA: &str = "gate.b_beta";
pub const EMBED: &str = "embed";
pub const LSTM_W: &str = "lstm.w";
pub const LSTM_U: &str = "lstm.u";
pub const LSTM_B: &str = "lstm.b";
pub const W_OZ: &str = "out.w_oz";
pub const W_OH: &str = "out.w_oh";
pub const B_O: &str = "out.b_o";
pub const W_Y: &str = "out.w_y";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionerConfig {
    /// Number of image regions; a perfect square.
    pub regions: usize,
    /// Feature dimensions per region, also the word embedding size.
    pub feature_dim: usize,
    /// Vocabulary size without the pad word.
    pub vocab_size: usize,
    /// Maximum number of emitted tokens, end token included.
    pub max_len: usize,
    pub dropout_rate: f64,
    pub lambda: f64,
}

impl CaptionerConfig {
    pub fn hidden(&self) -> usize {
        2 * self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn grid(&self) -> usize {
        (self.regions as f64).sqrt().round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.grid();
        if self.regions == 0 || g * g != self.regions {
            return Err(Error::Domain(format!("region count {} is not a perfect square", self.regions)));
        }
        if self.feature_dim == 0 {
            return Err(Error::Domain("feature dimension must be positive".into()));
        }
        if self.vocab_size < 3 {
            return Err(Error::Domain("vocabulary must hold start, end and a word".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Domain("max_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Domain(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Domain(format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        Ok(())
    }
}

/// Region features of one image, `L×D`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageAnnotation {
    pub features: DenseArray,
}

impl ImageAnnotation {
    pub fn new(features: DenseArray) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "image features must be 2-D, got shape {:?}",
                features.shape()
            )));
        }
        if !features.is_finite() {
            return Err(Error::Domain("image features contain non-finite values".into()));
        }
        Ok(Self { features })
    }

    pub fn regions(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Column mean over regions.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for i in 0..self.regions() {
            axpy(&mut m, 1.0, self.features.row(i));
        }
        let n = self.regions() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// `Σ_i w_i a_i`.
    pub fn weighted_sum(&self, w: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.dim()];
        for (i, &wi) in w.iter().enumerate() {
            axpy(&mut z, wi, self.features.row(i));
        }
        z
    }
}

/// Output of [`Captioner::greedy_decode`]. `tokens` holds the emitted ids
/// (end token included when reached); row `t` of the trace is the attention
/// used to emit token `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    pub tokens: TokenSequence,
    pub attention_trace: DenseArray,
    pub betas: Vec<f64>,
    pub contexts: Vec<Vec<f64>>,
}

impl DecodeResult {
    /// Emitted word ids without the end token.
    pub fn word_ids(&self) -> &[usize] {
        let ids = &self.tokens.ids;
        match ids.last() {
            Some(&END_ID) => &ids[..ids.len() - 1],
            _ => ids,
        }
    }
}

/// Inverted-dropout masks for one decode step.
#[derive(Clone, Debug)]
struct StepMasks {
    hidden: Vec<f64>,
    output: Vec<f64>,
}

/// Borrowed parameter values.
struct Weights<'a> {
    w_c0: &'a DenseArray,
    b_c0: &'a DenseArray,
    w_h0: &'a DenseArray,
    b_h0: &'a DenseArray,
    w_pa: &'a DenseArray,
    w_ph: &'a DenseArray,
    b_ph: &'a DenseArray,
    w_beta: &'a DenseArray,
    b_beta: &'a DenseArray,
    embed: &'a DenseArray,
    lstm: LstmWeights<'a>,
    w_oz: &'a DenseArray,
    w_oh: &'a DenseArray,
    b_o: &'a DenseArray,
    w_y: &'a DenseArray,
}

impl<'a> Weights<'a> {
    fn new(p: &'a ParameterStore) -> Self {
        Self {
            w_c0: p.value(W_C0),
            b_c0: p.value(B_C0),
            w_h0: p.value(W_H0),
            b_h0: p.value(B_H0),
            w_pa: p.value(W_PA),
            w_ph: p.value(W_PH),
            b_ph: p.value(B_PH),
            w_beta: p.value(W_BETA),
            b_beta: p.value(B_BETA),
            embed: p.value(EMBED),
            lstm: LstmWeights {
                w: p.value(LSTM_W),
                u: p.value(LSTM_U),
                b: p.value(LSTM_B),
            },
            w_oz: p.value(W_OZ),
            w_oh: p.value(W_OH),
            b_o: p.value(B_O),
            w_y: p.value(W_Y),
        }
    }

    fn init_state(&self, a: &ImageAnnotation) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let m = a.mean();
        let mut c0 = self.w_c0.matvec(&m);
        axpy(&mut c0, 1.0, self.b_c0.data());
        c0.iter_mut().for_each(|v| *v = v.tanh());
        let mut h0 = self.w_h0.matvec(&m);
        axpy(&mut h0, 1.0, self.b_h0.data());
        h0.iter_mut().for_each(|v| *v = v.tanh());
        (c0, h0, m)
    }

    /// Returns the pre-ReLU scores `Q = P_a + p_h` (row-major `L×D`) and α.
    fn attend(&self, pa: &DenseArray, h_prev: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (l, d) = (pa.rows(), pa.cols());
        let mut ph = self.w_ph.matvec(h_prev);
        axpy(&mut ph, 1.0, self.b_ph.data());
        let mut q = pa.data().to_vec();
        let mut scores = vec![0.0; l];
        for i in 0..l {
            let row = &mut q[i * d..(i + 1) * d];
            axpy(row, 1.0, &ph);
            scores[i] = row.iter().map(|v| v.max(0.0)).sum();
        }
        let alpha = softmax_slice(&scores).expect("regions are non-empty");
        (q, alpha)
    }

    fn beta(&self, h_prev: &[f64]) -> f64 {
        sigmoid(dot(self.w_beta.data(), h_prev) + self.b_beta.data()[0])
    }

    /// Deep output: returns `(logits, o, ρ(h), ρ(o))`.
    fn output(
        &self,
        y_prev: usize,
        z_hat: &[f64],
        h: &[f64],
        masks: Option<&StepMasks>,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let hd: Vec<f64> = match masks {
            Some(m) => h.iter().zip(&m.hidden).map(|(a, b)| a * b).collect(),
            None => h.to_vec(),
        };
        let mut o = self.embed.row(y_prev).to_vec();
        axpy(&mut o, 1.0, &self.w_oz.matvec(z_hat));
        axpy(&mut o, 1.0, &self.w_oh.matvec(&hd));
        axpy(&mut o, 1.0, self.b_o.data());
        let od: Vec<f64> = match masks {
            Some(m) => o.iter().zip(&m.output).map(|(a, b)| a * b).collect(),
            None => o,
        };
        (self.w_y.matvec(&od), hd, od)
    }
}

/// One cached forward step for BPTT.
struct StepCache {
    h_prev: Vec<f64>,
    q: Vec<f64>,
    alpha: Vec<f64>,
    z: Vec<f64>,
    beta: f64,
    z_hat: Vec<f64>,
    y_prev: usize,
    target: usize,
    lstm: LstmCache,
    hd: Vec<f64>,
    od: Vec<f64>,
    probs: Vec<f64>,
}

/// Per-sample training statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossStats {
    pub loss: f64,
    pub nll: f64,
    pub penalty: f64,
    pub correct: usize,
    pub steps: usize,
}

impl LossStats {
    fn add(&mut self, o: &LossStats) {
        self.loss += o.loss;
        self.nll += o.nll;
        self.penalty += o.penalty;
        self.correct += o.correct;
        self.steps += o.steps;
    }

    pub fn accuracy(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.correct as f64 / self.steps as f64
        }
    }
}

/// Teacher-forced steps of an encoded caption: `(input id, target id)` up to
/// and including the end token.
fn teacher_steps(seq: &TokenSequence) -> Result<Vec<(usize, usize)>> {
    if seq.ids.first() != Some(&START_ID) {
        return Err(Error::Domain("caption sequence must begin with the start id".into()));
    }
    let mut steps = Vec::new();
    for w in seq.ids.windows(2) {
        if w[1] == PAD_ID {
            break;
        }
        steps.push((w[0], w[1]));
        if w[1] == END_ID {
            break;
        }
    }
    if steps.is_empty() {
        return Err(Error::Domain("caption sequence has no target tokens".into()));
    }
    Ok(steps)
}

/// Argmax over ids ≥ 1 (pad is never emitted); ties go to the lowest id.
pub fn pick_word(logits: &[f64]) -> usize {
    1 + argmax(&logits[1..])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Captioner {
    pub config: CaptionerConfig,
    pub params: ParameterStore,
}

impl Captioner {
    /// Glorot-uniform weights, zero biases.
    pub fn new(config: CaptionerConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (d, h, v) = (config.feature_dim, config.hidden(), config.num_classes());
        let mut p = ParameterStore::new();
        p.insert(W_C0, glorot(&[h, d], rng))?;
        p.insert(B_C0, DenseArray::zeros(&[h]))?;
        p.insert(W_H0, glorot(&[h, d], rng))?;
        p.insert(B_H0, DenseArray::zeros(&[h]))?;
        p.insert(W_PA, glorot(&[d, d], rng))?;
        p.insert(W_PH, glorot(&[d, h], rng))?;
        p.insert(B_PH, DenseArray::zeros(&[d]))?;
        p.insert(W_BETA, glorot(&[h], rng))?;
        p.insert(B_BETA, DenseArray::zeros(&[1]))?;
        p.insert(EMBED, glorot(&[v, d], rng))?;
        p.insert(LSTM_W, glorot(&[4 * h, h], rng))?;
        p.insert(LSTM_U, glorot(&[4 * h, h], rng))?;
        p.insert(LSTM_B, DenseArray::zeros(&[4 * h]))?;
        p.insert(W_OZ, glorot(&[d, d], rng))?;
        p.insert(W_OH, glorot(&[d, h], rng))?;
        p.insert(B_O, DenseArray::zeros(&[d]))?;
        p.insert(W_Y, glorot(&[v, d], rng))?;
        Ok(Self { config, params: p })
    }

    /// Rebuild from a loaded parameter store, checking every shape.
    pub fn from_parts(config: CaptionerConfig, params: ParameterStore) -> Result<Self> {
        config.validate()?;
        let template = Self::new(config.clone(), &mut seeded_rng(0))?;
        let expected: Vec<(&str, &[usize])> = template.params.iter().map(|(n, p)| (n, p.value.shape())).collect();
        let found: Vec<(&str, &[usize])> = params.iter().map(|(n, p)| (n, p.value.shape())).collect();
        if expected != found {
            return Err(Error::Format(format!(
                "captioner parameters do not match the configuration: expected {expected:?}, found {found:?}"
            )));
        }
        Ok(Self { config, params })
    }

    fn check_image(&self, a: &ImageAnnotation) -> Result<()> {
        if a.regions() != self.config.regions || a.dim() != self.config.feature_dim {
            return Err(Error::Dimension(format!(
                "image features are {}x{}, model expects {}x{}",
                a.regions(),
                a.dim(),
                self.config.regions,
                self.config.feature_dim
            )));
        }
        Ok(())
    }

    fn check_hidden(&self, h: &[f64]) -> Result<()> {
        if h.len() != self.config.hidden() {
            return Err(Error::Dimension(format!(
                "hidden state has {} entries, expected {}",
                h.len(),
                self.config.hidden()
            )));
        }
        Ok(())
    }

    /// `(c0, h0)` from the mean annotation.
    pub fn init_state(&self, a: &ImageAnnotation) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_image(a)?;
        let (c0, h0, _) = Weights::new(&self.params).init_state(a);
        Ok((c0, h0))
    }

    pub fn project_features(&self, a: &ImageAnnotation) -> Result<DenseArray> {
        self.check_image(a)?;
        crate::tensor::matmul(&a.features, self.params.value(W_PA))
    }

    pub fn attend(&self, a: &ImageAnnotation, h_prev: &[f64]) -> Result<AttentionVector> {
        self.check_hidden(h_prev)?;
        let pa = self.project_features(a)?;
        let (_, alpha) = Weights::new(&self.params).attend(&pa, h_prev);
        Ok(AttentionVector::new_unchecked(alpha))
    }

    /// `(ẑ, β)` for a given attention.
    pub fn gated_context(&self, a: &ImageAnnotation, alpha: &[f64], h_prev: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_image(a)?;
        self.check_hidden(h_prev)?;
        check_simplex(alpha)?;
        if alpha.len() != a.regions() {
            return Err(Error::Dimension(format!(
                "attention has {} entries for {} regions",
                alpha.len(),
                a.regions()
            )));
        }
        let z = a.weighted_sum(alpha);
        let beta = Weights::new(&self.params).beta(h_prev);
        Ok((z.iter().map(|v| beta * v).collect(), beta))
    }

    pub fn lstm_step(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_hidden(h_prev)?;
        self.check_hidden(c_prev)?;
        self.check_hidden(x)?;
        let (h, c, _) = Weights::new(&self.params).lstm.forward(x, h_prev, c_prev);
        Ok((h, c))
    }

    /// Inference-mode word logits over `V + 1` classes.
    pub fn decode_word(&self, y_prev: usize, z_hat: &[f64], h: &[f64]) -> Result<Vec<f64>> {
        if y_prev >= self.config.num_classes() {
            return Err(Error::Domain(format!("word id {y_prev} out of range")));
        }
        self.check_hidden(h)?;
        let (logits, _, _) = Weights::new(&self.params).output(y_prev, z_hat, h, None);
        Ok(logits)
    }

    /// Greedy decoding under an interface method, capped at `max_len` tokens.
    pub fn greedy_decode(&self, a: &ImageAnnotation, method: &InterfaceMethod, max_len: usize) -> Result<DecodeResult> {
        self.check_image(a)?;
        if let Some(ext) = method.external() {
            if ext.len() != self.config.regions {
                return Err(Error::Dimension(format!(
                    "external attention has {} entries for {} regions",
                    ext.len(),
                    self.config.regions
                )));
            }
        }
        let w = Weights::new(&self.params);
        let pa = crate::tensor::matmul(&a.features, w.w_pa)?;
        let (mut c, mut h, _) = w.init_state(a);
        let d = self.config.feature_dim;
        let mut y_prev = START_ID;
        let mut ids = Vec::new();
        let mut trace = Vec::new();
        let mut betas = Vec::new();
        let mut contexts = Vec::new();
        for t in 1..=max_len {
            let (_, alpha) = w.attend(&pa, &h);
            let eff = effective_attention_unchecked(t, &alpha, method);
            let z = a.weighted_sum(eff.as_slice());
            let beta = w.beta(&h);
            let z_hat: Vec<f64> = z.iter().map(|v| beta * v).collect();
            let mut x = Vec::with_capacity(2 * d);
            x.extend_from_slice(w.embed.row(y_prev));
            x.extend_from_slice(&z_hat);
            let (h_new, c_new, _) = w.lstm.forward(&x, &h, &c);
            let (logits, _, _) = w.output(y_prev, &z_hat, &h_new, None);
            let word = pick_word(&logits);
            ids.push(word);
            trace.extend_from_slice(eff.as_slice());
            betas.push(beta);
            contexts.push(z);
            h = h_new;
            c = c_new;
            y_prev = word;
            if word == END_ID {
                break;
            }
        }
        let rows = ids.len();
        Ok(DecodeResult {
            tokens: TokenSequence { ids },
            attention_trace: DenseArray::from_vec(&[rows, self.config.regions], trace)?,
            betas,
            contexts,
        })
    }

    /// Draw dropout masks for every (sample, step) of a batch in order.
    fn draw_masks(&self, batch: &[(&ImageAnnotation, &TokenSequence)], rng: &mut Rng) -> Result<Vec<Vec<StepMasks>>> {
        let rate = self.config.dropout_rate;
        batch
            .iter()
            .map(|(_, seq)| {
                let n = teacher_steps(seq)?.len();
                Ok((0..n)
                    .map(|_| StepMasks {
                        hidden: dropout_mask(self.config.hidden(), rate, rng),
                        output: dropout_mask(self.config.feature_dim, rate, rng),
                    })
                    .collect())
            })
            .collect()
    }

    /// Mean penalized loss over the batch; gradients are written into the
    /// parameter store. Training always uses the model's own attention.
    pub fn training_loss(&mut self, batch: &[(&ImageAnnotation, &TokenSequence)], rng: &mut Rng) -> Result<LossStats> {
        let (stats, grads) = self.loss_and_grads(batch, &InterfaceMethod::SelfAttending, rng)?;
        self.params.set_grads(&grads, 1.0);
        Ok(stats)
    }

    /// Loss and gradients under any interface method, without touching the store.
    pub fn loss_and_grads(
        &self,
        batch: &[(&ImageAnnotation, &TokenSequence)],
        method: &InterfaceMethod,
        rng: &mut Rng,
    ) -> Result<(LossStats, GradBuffer)> {
        if batch.is_empty() {
            return Err(Error::Domain("empty training batch".into()));
        }
        let masks = self.draw_masks(batch, rng)?;
        let scale = 1.0 / batch.len() as f64;
        let results: Vec<Result<(LossStats, GradBuffer)>> = batch
            .par_iter()
            .zip(masks.par_iter())
            .map(|((a, seq), m)| {
                let mut g = self.params.grad_buffer();
                let s = sample_pass(&self.config, &self.params, a, seq, method, Some(m), scale, Some(&mut g))?;
                Ok((s, g))
            })
            .collect();
        let mut total = LossStats::default();
        let mut grads = self.params.grad_buffer();
        for r in results {
            let (s, g) = r?;
            total.add(&s);
            grads.merge(&g, 1.0);
        }
        total.loss *= scale;
        total.nll *= scale;
        total.penalty *= scale;
        if !total.loss.is_finite() {
            return Err(Error::Training(format!("non-finite training loss {}", total.loss)));
        }
        Ok((total, grads))
    }

    /// Batch loss only, with masks drawn from `rng` exactly as in [`Self::loss_and_grads`].
    pub fn batch_loss(
        config: &CaptionerConfig,
        params: &ParameterStore,
        batch: &[(&ImageAnnotation, &TokenSequence)],
        method: &InterfaceMethod,
        rng: &mut Rng,
    ) -> Result<f64> {
        let probe = Captioner {
            config: config.clone(),
            params: ParameterStore::new(),
        };
        let masks = probe.draw_masks(batch, rng)?;
        let mut total = 0.0;
        for ((a, seq), m) in batch.iter().zip(&masks) {
            total += sample_pass(config, params, a, seq, method, Some(m), 1.0, None)?.loss;
        }
        Ok(total / batch.len() as f64)
    }

    /// Inference-mode teacher-forced statistics (no dropout, no gradients).
    pub fn evaluate(&self, data: &[(&ImageAnnotation, &TokenSequence)]) -> Result<LossStats> {
        let parts: Vec<Result<LossStats>> = data
            .par_iter()
            .map(|(a, seq)| {
                sample_pass(&self.config, &self.params, a, seq, &InterfaceMethod::SelfAttending, None, 1.0, None)
            })
            .collect();
        let mut total = LossStats::default();
        for p in parts {
            total.add(&p?);
        }
        if !data.is_empty() {
            let n = data.len() as f64;
            total.loss /= n;
            total.nll /= n;
            total.penalty /= n;
        }
        Ok(total)
    }

    /// Greedy-decode every image and score against its references.
    pub fn validate_bleu(&self, images: &[(&ImageAnnotation, Vec<Vec<String>>)], decode_words: impl Fn(&[usize]) -> Vec<String> + Sync) -> Result<BleuScores> {
        let hyps: Vec<Result<Vec<String>>> = images
            .par_iter()
            .map(|(a, _)| {
                let r = self.greedy_decode(a, &InterfaceMethod::SelfAttending, self.config.max_len)?;
                Ok(decode_words(r.word_ids()))
            })
            .collect();
        let hyps: Vec<Vec<String>> = hyps.into_iter().collect::<Result<_>>()?;
        let refs: Vec<Vec<Vec<String>>> = images.iter().map(|(_, r)| r.clone()).collect();
        corpus_bleu(&hyps, &refs)
    }
}

/// Forward (and optionally backward) pass over one teacher-forced caption.
/// Gradients are scaled by `scale` before accumulation.
#[allow(clippy::too_many_arguments)]
fn sample_pass(
    cfg: &CaptionerConfig,
    params: &ParameterStore,
    a: &ImageAnnotation,
    seq: &TokenSequence,
    method: &InterfaceMethod,
    masks: Option<&Vec<StepMasks>>,
    scale: f64,
    grads: Option<&mut GradBuffer>,
) -> Result<LossStats> {
    if a.regions() != cfg.regions || a.dim() != cfg.feature_dim {
        return Err(Error::Dimension(format!(
            "image features are {}x{}, model expects {}x{}",
            a.regions(),
            a.dim(),
            cfg.regions,
            cfg.feature_dim
        )));
    }
    let steps = teacher_steps(seq)?;
    if let Some(&(_, bad)) = steps.iter().find(|(y, t)| *y >= cfg.num_classes() || *t >= cfg.num_classes()) {
        return Err(Error::Domain(format!("word id {bad} out of range")));
    }
    let w = Weights::new(params);
    let (l, d) = (cfg.regions, cfg.feature_dim);
    let pa = crate::tensor::matmul(&a.features, w.w_pa)?;
    let (c0, h0, mean) = w.init_state(a);
    let (mut h, mut c) = (h0.clone(), c0.clone());
    let mut caches = Vec::with_capacity(steps.len());
    let mut stats = LossStats::default();
    let mut alpha_sum = vec![0.0; l];
    for (t, &(y_prev, target)) in steps.iter().enumerate() {
        let (q, alpha) = w.attend(&pa, &h);
        axpy(&mut alpha_sum, 1.0, &alpha);
        let eff = effective_attention_unchecked(t + 1, &alpha, method);
        let z = a.weighted_sum(eff.as_slice());
        let beta = w.beta(&h);
        let z_hat: Vec<f64> = z.iter().map(|v| beta * v).collect();
        let mut x = Vec::with_capacity(2 * d);
        x.extend_from_slice(w.embed.row(y_prev));
        x.extend_from_slice(&z_hat);
        let (h_new, c_new, lstm_cache) = w.lstm.forward(&x, &h, &c);
        let step_masks = masks.map(|m| &m[t]);
        let (logits, hd, od) = w.output(y_prev, &z_hat, &h_new, step_masks);
        let probs = softmax_slice(&logits)?;
        stats.nll -= probs[target].max(PROB_FLOOR).ln();
        stats.steps += 1;
        if pick_word(&logits) == target {
            stats.correct += 1;
        }
        caches.push(StepCache {
            h_prev: std::mem::replace(&mut h, h_new),
            q,
            alpha,
            z,
            beta,
            z_hat,
            y_prev,
            target,
            lstm: lstm_cache,
            hd,
            od,
            probs,
        });
        c = c_new;
    }
    stats.penalty = cfg.lambda * alpha_sum.iter().map(|s| (1.0 - s).powi(2)).sum::<f64>();
    stats.loss = stats.nll + stats.penalty;

    let Some(grads) = grads else {
        return Ok(stats);
    };
    let [g_c0, g_bc0, g_h0, g_bh0, g_pa, g_ph, g_bph, g_beta, g_bbeta, g_embed, g_lw, g_lu, g_lb, g_oz, g_oh, g_bo, g_y] =
        grads.get_disjoint_mut([
            W_C0, B_C0, W_H0, B_H0, W_PA, W_PH, B_PH, W_BETA, B_BETA, EMBED, LSTM_W, LSTM_U, LSTM_B, W_OZ, W_OH,
            B_O, W_Y,
        ]);
    let mut lstm_grads = LstmGrads {
        w: g_lw,
        u: g_lu,
        b: g_lb,
    };
    let hdim = cfg.hidden();
    let mut dh_next = vec![0.0; hdim];
    let mut dc_next = vec![0.0; hdim];
    let mut dpa = vec![0.0; l * d];
    let pen_grad: Vec<f64> = alpha_sum.iter().map(|s| -2.0 * cfg.lambda * (1.0 - s) * scale).collect();
    for (t, s) in caches.iter().enumerate().rev() {
        let mut dlogits = s.probs.clone();
        dlogits[s.target] -= 1.0;
        dlogits.iter_mut().for_each(|v| *v *= scale);
        g_y.add_outer(&dlogits, &s.od);
        let mut d_o = w.w_y.matvec_t(&dlogits);
        if let Some(m) = masks {
            d_o.iter_mut().zip(&m[t].output).for_each(|(v, k)| *v *= k);
        }
        let mut de = d_o.clone();
        g_oz.add_outer(&d_o, &s.z_hat);
        let mut dz_hat = w.w_oz.matvec_t(&d_o);
        g_oh.add_outer(&d_o, &s.hd);
        let mut dh = w.w_oh.matvec_t(&d_o);
        if let Some(m) = masks {
            dh.iter_mut().zip(&m[t].hidden).for_each(|(v, k)| *v *= k);
        }
        axpy(g_bo.data_mut(), 1.0, &d_o);
        axpy(&mut dh, 1.0, &dh_next);

        let (dx, mut dh_prev, dc_prev) = w.lstm.backward(&s.lstm, &dh, &dc_next, &mut lstm_grads);
        axpy(&mut de, 1.0, &dx[..d]);
        axpy(&mut dz_hat, 1.0, &dx[d..]);
        axpy(g_embed.row_mut(s.y_prev), 1.0, &de);

        let dbeta_pre = dot(&dz_hat, &s.z) * s.beta * (1.0 - s.beta);
        axpy(g_beta.data_mut(), dbeta_pre, &s.h_prev);
        g_bbeta.data_mut()[0] += dbeta_pre;
        axpy(&mut dh_prev, dbeta_pre, w.w_beta.data());

        let mw = method.model_weight(t + 1);
        let dalpha: Vec<f64> = (0..l)
            .map(|i| {
                let via_context = if mw == 0.0 { 0.0 } else { mw * s.beta * dot(&dz_hat, a.features.row(i)) };
                via_context + pen_grad[i]
            })
            .collect();
        let ds = softmax_backward(&s.alpha, &dalpha);
        let mut dph = vec![0.0; d];
        for i in 0..l {
            if ds[i] == 0.0 {
                continue;
            }
            let qrow = &s.q[i * d..(i + 1) * d];
            let drow = &mut dpa[i * d..(i + 1) * d];
            for j in 0..d {
                if qrow[j] > 0.0 {
                    drow[j] += ds[i];
                    dph[j] += ds[i];
                }
            }
        }
        g_ph.add_outer(&dph, &s.h_prev);
        axpy(g_bph.data_mut(), 1.0, &dph);
        axpy(&mut dh_prev, 1.0, &w.w_ph.matvec_t(&dph));

        dh_next = dh_prev;
        dc_next = dc_prev;
    }
    // P_a = A W_pa, so dW_pa = Aᵀ dP_a.
    for i in 0..l {
        g_pa.add_outer(a.features.row(i), &dpa[i * d..(i + 1) * d]);
    }
    let dh0: Vec<f64> = dh_next.iter().zip(&h0).map(|(g, v)| g * (1.0 - v * v)).collect();
    let dc0: Vec<f64> = dc_next.iter().zip(&c0).map(|(g, v)| g * (1.0 - v * v)).collect();
    g_h0.add_outer(&dh0, &mean);
    axpy(g_bh0.data_mut(), 1.0, &dh0);
    g_c0.add_outer(&dc0, &mean);
    axpy(g_bc0.data_mut(), 1.0, &dc0);
    Ok(stats)
}

/// Settings for [`train`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Stop after this many epochs without a BLEU-4 improvement (0 disables).
    pub patience: usize,
    /// Stop once teacher-forced training accuracy reaches this value.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 7,
            patience: 0,
            target_accuracy: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub bleu: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
    pub best_epoch: usize,
}

/// Data handed to [`train`]: teacher-forcing pairs and validation images with references.
pub struct TrainingData<'a> {
    pub train: Vec<(&'a ImageAnnotation, &'a TokenSequence)>,
    pub validation: Vec<(&'a ImageAnnotation, Vec<Vec<String>>)>,
}

/// Mini-batch Adam training with per-epoch validation. The returned model
/// holds the parameters of the epoch with the best validation BLEU-4.
pub fn train(
    model: &mut Captioner,
    data: &TrainingData<'_>,
    cfg: &TrainConfig,
    decode_words: impl Fn(&[usize]) -> Vec<String> + Sync,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainReport> {
    if data.train.is_empty() {
        return Err(Error::Domain("no training captions".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Domain("batch size must be positive".into()));
    }
    let mut rng = seeded_rng(cfg.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: 0,
    };
    let mut best: Option<(f64, ParameterStore)> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| data.train[i]).collect();
            model.training_loss(&batch, &mut rng)?;
            model
                .params
                .adam_step(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)?;
        }
        let stats = model.evaluate(&data.train)?;
        let bleu = if data.validation.is_empty() {
            BleuScores::default()
        } else {
            model.validate_bleu(&data.validation, &decode_words)?
        };
        let er = EpochReport {
            epoch,
            train_loss: stats.loss,
            train_accuracy: stats.accuracy(),
            bleu: bleu.scores,
        };
        on_epoch(&er);
        report.epochs.push(er);
        let b4 = bleu.scores[3];
        if best.as_ref().map_or(true, |(b, _)| b4 > *b) {
            best = Some((b4, model.params.clone()));
            report.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if cfg.target_accuracy.is_some_and(|acc| stats.accuracy() >= acc) {
            break;
        }
        if cfg.patience > 0 && since_best >= cfg.patience {
            break;
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interface::uniform_attention;
    use crate::tensor::finite_diff_report;

    fn tiny(seed: u64, lambda: f64, dropout: f64) -> Captioner {
        let cfg = CaptionerConfig {
            regions: 4,
            feature_dim: 2,
            vocab_size: 5,
            max_len: 4,
            dropout_rate: dropout,
            lambda,
        };
        Captioner::new(cfg, &mut seeded_rng(seed)).unwrap()
    }

    fn image(seed: u64, l: usize, d: usize) -> ImageAnnotation {
        let mut rng = seeded_rng(seed);
        let f = glorot(&[l, d], &mut rng).map(|v| v * 3.0);
        ImageAnnotation::new(f).unwrap()
    }

    fn seq(ids: &[usize]) -> TokenSequence {
        TokenSequence { ids: ids.to_vec() }
    }

    #[test]
    fn zero_weights_give_zero_state_and_uniform_words() {
        let mut m = tiny(1, 0.0, 0.0);
        let names: Vec<String> = m.params.names().map(str::to_string).collect();
        for n in names {
            m.params.value_mut(&n).fill(0.0);
        }
        let a = image(2, 4, 2);
        let (c0, h0) = m.init_state(&a).unwrap();
        assert!(c0.iter().chain(&h0).all(|&v| v == 0.0));
        let alpha = m.attend(&a, &h0).unwrap();
        assert!(alpha.as_slice().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let (zh, beta) = m.gated_context(&a, alpha.as_slice(), &h0).unwrap();
        assert_eq!(beta, 0.5);
        let mean = a.mean();
        for (x, y) in zh.iter().zip(mean) {
            assert!((x - y / 2.0).abs() < 1e-15);
        }
        let logits = m.decode_word(START_ID, &zh, &h0).unwrap();
        let p = softmax_slice(&logits).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn init_state_matches_direct_formula() {
        let m = tiny(3, 0.0, 0.0);
        let a = image(4, 4, 2);
        let (c0, h0) = m.init_state(&a).unwrap();
        let mean: Vec<f64> = (0..2).map(|j| (0..4).map(|i| a.features.at(i, j)).sum::<f64>() / 4.0).collect();
        let w = m.params.value(W_H0);
        for k in 0..4 {
            let pre: f64 = (0..2).map(|j| w.at(k, j) * mean[j]).sum();
            assert!((h0[k] - pre.tanh()).abs() < 1e-15);
        }
        let w = m.params.value(W_C0);
        let pre: f64 = (0..2).map(|j| w.at(0, j) * mean[j]).sum();
        assert!((c0[0] - pre.tanh()).abs() < 1e-15);
    }

    #[test]
    fn attention_prefers_scaled_region() {
        let mut m = tiny(5, 0.0, 0.0);
        m.params.value_mut(W_PA).fill(0.5);
        let mut f = DenseArray::filled(&[4, 2], 0.1);
        f.row_mut(2).iter_mut().for_each(|v| *v = 2.0);
        let a = ImageAnnotation::new(f).unwrap();
        let alpha = m.attend(&a, &[0.0; 4]).unwrap();
        let s = alpha.as_slice();
        assert!(s[2] > s[0] && s[2] > s[1] && s[2] > s[3]);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_hot_attention_selects_region() {
        let m = tiny(6, 0.0, 0.0);
        let a = image(7, 4, 2);
        let h = vec![0.1, -0.2, 0.3, 0.0];
        let (zh, beta) = m.gated_context(&a, &[0.0, 0.0, 1.0, 0.0], &h).unwrap();
        for (x, y) in zh.iter().zip(a.features.row(2)) {
            assert!((x - beta * y).abs() < 1e-15);
        }
    }

    #[test]
    fn decode_is_deterministic_and_identities_hold() {
        let m = tiny(8, 0.0, 0.5);
        let a = image(9, 4, 2);
        let first = m.greedy_decode(&a, &InterfaceMethod::SelfAttending, 6).unwrap();
        let again = m.greedy_decode(&a, &InterfaceMethod::SelfAttending, 6).unwrap();
        assert_eq!(first, again);
        let ext = AttentionVector::new(vec![0.7, 0.1, 0.1, 0.1]).unwrap();
        let add0 = m.greedy_decode(&a, &InterfaceMethod::additive(ext.clone(), 0.0).unwrap(), 6).unwrap();
        let lim0 = m
            .greedy_decode(&a, &InterfaceMethod::Limited { alpha: ext, steps: 0 }, 6)
            .unwrap();
        assert_eq!(add0.tokens, first.tokens);
        assert_eq!(lim0.tokens, first.tokens);
        let ctl = m.greedy_decode(&a, &InterfaceMethod::ControlUniform, 6).unwrap();
        let uni = m
            .greedy_decode(&a, &InterfaceMethod::Unlimited(uniform_attention(4).unwrap()), 6)
            .unwrap();
        assert_eq!(ctl, uni);
        assert_eq!(first.attention_trace.rows(), first.tokens.ids.len());
        assert!(first.betas.iter().all(|&b| b > 0.0 && b < 1.0));
    }

    #[test]
    fn lambda_zero_loss_is_masked_nll() {
        let m = tiny(10, 0.0, 0.0);
        let a = image(11, 4, 2);
        let s = seq(&[START_ID, 3, 4, END_ID, PAD_ID, PAD_ID]);
        let stats = m.evaluate(&[(&a, &s)]).unwrap();
        assert_eq!(stats.steps, 3);
        assert_eq!(stats.penalty, 0.0);
        assert_eq!(stats.loss, stats.nll);
    }

    #[test]
    fn penalty_matches_brute_force() {
        let m = tiny(12, 0.37, 0.0);
        let a = image(13, 4, 2);
        let s = seq(&[START_ID, 5, 3, 4, END_ID, PAD_ID]);
        let stats = m.evaluate(&[(&a, &s)]).unwrap();
        let w = Weights::new(&m.params);
        let pa = crate::tensor::matmul(&a.features, w.w_pa).unwrap();
        let (mut c, mut h, _) = w.init_state(&a);
        let mut sums = [0.0; 4];
        for &y in &[START_ID, 5, 3, 4] {
            let (_, alpha) = w.attend(&pa, &h);
            for i in 0..4 {
                sums[i] += alpha[i];
            }
            let beta = w.beta(&h);
            let mut x = w.embed.row(y).to_vec();
            x.extend(a.weighted_sum(&alpha).iter().map(|v| beta * v));
            let (hn, cn, _) = w.lstm.forward(&x, &h, &c);
            h = hn;
            c = cn;
        }
        let brute: f64 = 0.37 * sums.iter().map(|s| (1.0 - s) * (1.0 - s)).sum::<f64>();
        assert!((stats.penalty - brute).abs() < 1e-10);
    }

    #[test]
    fn uniform_attention_over_l_steps_has_no_penalty() {
        let mut m = tiny(14, 1.0, 0.0);
        m.params.value_mut(W_PA).fill(0.0);
        m.params.value_mut(W_PH).fill(0.0);
        let a = image(15, 4, 2);
        let s = seq(&[START_ID, 3, 4, 5, END_ID]);
        let stats = m.evaluate(&[(&a, &s)]).unwrap();
        assert!(stats.penalty.abs() < 1e-28);
    }

    fn grad_check(seed: u64, method: InterfaceMethod) -> f64 {
        let m = tiny(seed, 0.3, 0.5);
        let imgs = [image(seed + 100, 4, 2), image(seed + 200, 4, 2)];
        let seqs = [seq(&[START_ID, 3, 4, END_ID, PAD_ID]), seq(&[START_ID, 5, END_ID, PAD_ID, PAD_ID])];
        let batch: Vec<_> = imgs.iter().zip(&seqs).collect();
        let (_, grads) = m.loss_and_grads(&batch, &method, &mut seeded_rng(seed)).unwrap();
        let mut store = m.params.clone();
        store.set_grads(&grads, 1.0);
        let cfg = m.config.clone();
        let report = finite_diff_report(
            |p| Captioner::batch_loss(&cfg, p, &batch, &method, &mut seeded_rng(seed)).unwrap(),
            &store,
            1e-5,
        );
        assert!(report.coordinates_checked > 100);
        report.max_relative_error
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in [21, 22, 23] {
            let err = grad_check(seed, InterfaceMethod::SelfAttending);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn gradients_through_interface_methods() {
        let ext = AttentionVector::new(vec![0.4, 0.3, 0.2, 0.1]).unwrap();
        for method in [
            InterfaceMethod::additive(ext.clone(), 1.5).unwrap(),
            InterfaceMethod::Limited { alpha: ext.clone(), steps: 1 },
            InterfaceMethod::Unlimited(ext),
        ] {
            let err = grad_check(31, method.clone());
            assert!(err < 1e-4, "{}: {err}", method.label());
        }
    }

    #[test]
    fn from_parts_rejects_wrong_shapes() {
        let m = tiny(1, 0.0, 0.0);
        let mut other = m.config.clone();
        other.vocab_size = 6;
        assert!(Captioner::from_parts(other, m.params.clone()).is_err());
        assert!(Captioner::from_parts(m.config.clone(), m.params.clone()).is_ok());
    }

    #[test]
    fn teacher_steps_stop_at_end() {
        let s = teacher_steps(&seq(&[START_ID, 3, END_ID, PAD_ID])).unwrap();
        assert_eq!(s, vec![(START_ID, 3), (3, END_ID)]);
        assert!(teacher_steps(&seq(&[3, END_ID])).is_err());
    }
}
