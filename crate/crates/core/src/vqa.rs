//! Hierarchical parallel co-attention VQA model. Its image attentions at
//! the word, phrase and question levels feed the captioner's interface.
//!
//! Layout: image features `A` are `L×D` (one row per region) and question
//! features `Q` are `T×D` (one row per position, padded rows all zero).

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interface::AttentionVector;
use crate::lstm::{LstmCache, LstmGrads, LstmWeights};
use crate::tensor::{
    argmax, axpy, dot, dropout_mask, glorot, matmul, seeded_rng, softmax_backward, softmax_slice, DenseArray,
    GradBuffer, ParameterStore, Rng, PROB_FLOOR,
};
use crate::text::{Vocabulary, END_ID};

pub const LEVELS: [&str; 3] = ["word", "phrase", "question"];

const EMBED: &str = "vqa.embed";
const CONV_B: [&str; 3] = ["vqa.conv1.b", "vqa.conv2.b", "vqa.conv3.b"];
const CONV_W: [&[&str]; 3] = [
    &["vqa.conv1.w0"],
    &["vqa.conv2.w0", "vqa.conv2.w1"],
    &["vqa.conv3.w0", "vqa.conv3.w1", "vqa.conv3.w2"],
];
const LSTM_W: &str = "vqa.lstm.w";
const LSTM_U: &str = "vqa.lstm.u";
const LSTM_B: &str = "vqa.lstm.b";
const ADAPT_W: &str = "vqa.adapt.w";
const ADAPT_B: &str = "vqa.adapt.b";
const W_C: [&str; 3] = ["vqa.word.w_c", "vqa.phrase.w_c", "vqa.question.w_c"];
const W_V: [&str; 3] = ["vqa.word.w_v", "vqa.phrase.w_v", "vqa.question.w_v"];
const W_Q: [&str; 3] = ["vqa.word.w_q", "vqa.phrase.w_q", "vqa.question.w_q"];
const MLP_W: &str = "vqa.mlp.w_w";
const MLP_P: &str = "vqa.mlp.w_p";
const MLP_S: &str = "vqa.mlp.w_s";
const MLP_Y: &str = "vqa.mlp.w_y";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaConfig {
    pub regions: usize,
    pub feature_dim: usize,
    /// Question vocabulary size without the pad word.
    pub vocab_size: usize,
    pub max_question_len: usize,
    /// Width of the co-attention projections `W_v`, `W_q`.
    pub coattention_dim: usize,
    /// Width of the answer MLP layers.
    pub hidden_dim: usize,
    pub num_answers: usize,
    pub adaption: bool,
    pub adaption_dropout: f64,
    pub dropout_rate: f64,
}

impl VqaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.regions == 0 || self.feature_dim == 0 || self.coattention_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Domain("VQA dimensions must be positive".into()));
        }
        if self.max_question_len == 0 {
            return Err(Error::Domain("max question length must be positive".into()));
        }
        if self.num_answers == 0 {
            return Err(Error::Domain("answer list is empty".into()));
        }
        if self.vocab_size < 3 {
            return Err(Error::Domain("question vocabulary is empty".into()));
        }
        for r in [self.adaption_dropout, self.dropout_rate] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Domain(format!("dropout rate {r} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Question token ids (no start/end), at most `max_question_len` long.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionIds(pub Vec<usize>);

/// Map question tokens to ids, dropping out-of-vocabulary words and
/// truncating to `max_len`.
pub fn encode_question(tokens: &[String], vocab: &Vocabulary, max_len: usize) -> QuestionIds {
    QuestionIds(
        tokens
            .iter()
            .filter_map(|t| vocab.id(t).filter(|&i| i > END_ID))
            .take(max_len)
            .collect(),
    )
}

/// Most frequent answers, ties broken lexicographically.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerList {
    pub answers: Vec<String>,
}

impl AnswerList {
    pub fn index(&self, answer: &str) -> Option<usize> {
        self.answers.iter().position(|a| a == answer)
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }
}

/// Returns the list and the number of answers not covered by it.
pub fn build_answer_list(answers: &[String], top_k: usize) -> Result<(AnswerList, usize)> {
    if answers.is_empty() {
        return Err(Error::Domain("no answers to rank".into()));
    }
    if top_k == 0 {
        return Err(Error::Domain("top_k must be positive".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for a in answers {
        *counts.entry(a.as_str()).or_default() += 1;
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(top_k);
    let list = AnswerList {
        answers: ranked.iter().map(|(a, _)| a.to_string()).collect(),
    };
    let dropped = answers.iter().filter(|a| list.index(a).is_none()).count();
    Ok((list, dropped))
}

/// Question features at the three levels, each `T×D` with zero padded rows.
#[derive(Clone, Debug, PartialEq)]
pub struct QuestionFeatures {
    pub levels: [DenseArray; 3],
    pub valid: usize,
}

/// Everything the forward pass produces for one question.
#[derive(Clone, Debug, PartialEq)]
pub struct CoAttentionOutput {
    pub answer_dist: Vec<f64>,
    pub level_attentions: [AttentionVector; 3],
    pub question_attentions: [Vec<f64>; 3],
}

struct EncoderCache {
    ids: Vec<usize>,
    word: DenseArray,
    /// Per window, post-tanh convolution outputs (`T×D`).
    conv: [DenseArray; 3],
    /// Winning window per (position, dim).
    winner: Vec<u8>,
    phrase: DenseArray,
    lstm: Vec<LstmCache>,
    question: DenseArray,
}

struct CoattCache {
    c: DenseArray,
    qw: DenseArray,
    av: DenseArray,
    pv: DenseArray,
    pq: DenseArray,
    alpha_v: Vec<f64>,
    alpha_q: Vec<f64>,
}

struct LevelWeights<'a> {
    w_c: &'a DenseArray,
    w_v: &'a DenseArray,
    w_q: &'a DenseArray,
}

/// Parallel co-attention for one level. Returns `(v̂, q̂, cache)`.
fn coattention(q: &DenseArray, valid: usize, a: &DenseArray, w: &LevelWeights<'_>) -> Result<(Vec<f64>, Vec<f64>, CoattCache)> {
    // C = tanh(Q W_c Aᵀ), T×L
    let c = matmul(&matmul(q, w.w_c)?, &a.transpose())?.map(f64::tanh);
    let qw = matmul(q, &w.w_q.transpose())?;
    let av = matmul(a, &w.w_v.transpose())?;
    let pv = {
        let mut m = matmul(&c.transpose(), &qw)?;
        m.add_assign(&av);
        m.map(f64::tanh)
    };
    let pq = {
        let mut m = matmul(&c, &av)?;
        m.add_assign(&qw);
        m.map(f64::tanh)
    };
    let sv: Vec<f64> = (0..pv.rows()).map(|i| pv.row(i).iter().sum()).collect();
    let alpha_v = softmax_slice(&sv)?;
    let sq: Vec<f64> = (0..valid).map(|t| pq.row(t).iter().sum()).collect();
    let mut alpha_q = softmax_slice(&sq)?;
    alpha_q.resize(q.rows(), 0.0);
    let mut v_hat = vec![0.0; a.cols()];
    for (i, &w) in alpha_v.iter().enumerate() {
        axpy(&mut v_hat, w, a.row(i));
    }
    let mut q_hat = vec![0.0; q.cols()];
    for t in 0..valid {
        axpy(&mut q_hat, alpha_q[t], q.row(t));
    }
    Ok((
        v_hat,
        q_hat,
        CoattCache {
            c,
            qw,
            av,
            pv,
            pq,
            alpha_v,
            alpha_q,
        },
    ))
}

/// Backward through [`coattention`]; returns `(dQ, dA)`.
fn coattention_backward(
    cache: &CoattCache,
    q: &DenseArray,
    valid: usize,
    a: &DenseArray,
    w: &LevelWeights<'_>,
    dv_hat: &[f64],
    dq_hat: &[f64],
    g: [&mut DenseArray; 3],
) -> Result<(DenseArray, DenseArray)> {
    let [g_c, g_v, g_q] = g;
    let (l, t_len, k) = (a.rows(), q.rows(), w.w_v.rows());
    let mut da = DenseArray::zeros(a.shape());
    let mut dq = DenseArray::zeros(q.shape());

    let dalpha_v: Vec<f64> = (0..l).map(|i| dot(a.row(i), dv_hat)).collect();
    for i in 0..l {
        axpy(da.row_mut(i), cache.alpha_v[i], dv_hat);
    }
    let dsv = softmax_backward(&cache.alpha_v, &dalpha_v);
    let mut dpv = DenseArray::zeros(&[l, k]);
    for i in 0..l {
        for j in 0..k {
            let p = cache.pv.at(i, j);
            dpv.set(i, j, dsv[i] * (1.0 - p * p));
        }
    }

    let aq = &cache.alpha_q[..valid];
    let dalpha_q: Vec<f64> = (0..valid).map(|t| dot(q.row(t), dq_hat)).collect();
    for t in 0..valid {
        axpy(dq.row_mut(t), aq[t], dq_hat);
    }
    let dsq = softmax_backward(aq, &dalpha_q);
    let mut dpq = DenseArray::zeros(&[t_len, k]);
    for t in 0..valid {
        for j in 0..k {
            let p = cache.pq.at(t, j);
            dpq.set(t, j, dsq[t] * (1.0 - p * p));
        }
    }

    // Pv = tanh(AV + Cᵀ QW), Pq = tanh(QW + C AV)
    let mut dav = dpv.clone();
    dav.add_assign(&matmul(&cache.c.transpose(), &dpq)?);
    let mut dqw = dpq.clone();
    dqw.add_assign(&matmul(&cache.c, &dpv)?);
    let mut dc = matmul(&cache.qw, &dpv.transpose())?;
    dc.add_assign(&matmul(&dpq, &cache.av.transpose())?);

    // C = tanh(S), S = Q W_c Aᵀ
    let mut ds = dc;
    for (d, c) in ds.data_mut().iter_mut().zip(cache.c.data()) {
        *d *= 1.0 - c * c;
    }
    let qwc = matmul(q, w.w_c)?;
    dq.add_assign(&matmul(&matmul(&ds, a)?, &w.w_c.transpose())?);
    g_c.add_assign(&matmul(&matmul(&q.transpose(), &ds)?, a)?);
    da.add_assign(&matmul(&ds.transpose(), &qwc)?);

    // AV = A W_vᵀ, QW = Q W_qᵀ
    g_v.add_assign(&matmul(&dav.transpose(), a)?);
    da.add_assign(&matmul(&dav, w.w_v)?);
    g_q.add_assign(&matmul(&dqw.transpose(), q)?);
    dq.add_assign(&matmul(&dqw, w.w_q)?);
    Ok((dq, da))
}

/// Dropout masks for one training sample.
#[derive(Clone, Debug)]
struct SampleMasks {
    adapt: Vec<f64>,
    hw: Vec<f64>,
    hp: Vec<f64>,
    hs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqaModel {
    pub config: VqaConfig,
    pub params: ParameterStore,
}

/// One training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct VqaSample<'a> {
    pub features: &'a DenseArray,
    pub question: &'a QuestionIds,
    pub answer: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VqaStats {
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
}

impl VqaStats {
    pub fn accuracy(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.correct as f64 / self.count as f64
        }
    }
}

impl VqaModel {
    pub fn new(config: VqaConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (d, k, hd, v) = (config.feature_dim, config.coattention_dim, config.hidden_dim, config.vocab_size + 1);
        let mut p = ParameterStore::new();
        p.insert(EMBED, glorot(&[v, d], rng))?;
        for s in 0..3 {
            for name in CONV_W[s] {
                p.insert(name, glorot(&[d, d], rng))?;
            }
            p.insert(CONV_B[s], DenseArray::zeros(&[d]))?;
        }
        p.insert(LSTM_W, glorot(&[4 * d, d], rng))?;
        p.insert(LSTM_U, glorot(&[4 * d, d], rng))?;
        p.insert(LSTM_B, DenseArray::zeros(&[4 * d]))?;
        if config.adaption {
            p.insert(ADAPT_W, glorot(&[d, d], rng))?;
            p.insert(ADAPT_B, DenseArray::zeros(&[d]))?;
        }
        for lvl in 0..3 {
            p.insert(W_C[lvl], glorot(&[d, d], rng))?;
            p.insert(W_V[lvl], glorot(&[k, d], rng))?;
            p.insert(W_Q[lvl], glorot(&[k, d], rng))?;
        }
        p.insert(MLP_W, glorot(&[hd, d], rng))?;
        p.insert(MLP_P, glorot(&[hd, d + hd], rng))?;
        p.insert(MLP_S, glorot(&[hd, d + hd], rng))?;
        p.insert(MLP_Y, glorot(&[config.num_answers, hd], rng))?;
        Ok(Self { config, params: p })
    }

    pub fn from_parts(config: VqaConfig, params: ParameterStore) -> Result<Self> {
        let template = Self::new(config.clone(), &mut seeded_rng(0))?;
        let expected: Vec<(&str, &[usize])> = template.params.iter().map(|(n, p)| (n, p.value.shape())).collect();
        let found: Vec<(&str, &[usize])> = params.iter().map(|(n, p)| (n, p.value.shape())).collect();
        if expected != found {
            return Err(Error::Format(format!(
                "VQA parameters do not match the configuration: expected {expected:?}, found {found:?}"
            )));
        }
        Ok(Self { config, params })
    }

    fn check_inputs(&self, features: &DenseArray, q: &QuestionIds) -> Result<()> {
        if features.shape() != [self.config.regions, self.config.feature_dim] {
            return Err(Error::Dimension(format!(
                "image features have shape {:?}, model expects [{}, {}]",
                features.shape(),
                self.config.regions,
                self.config.feature_dim
            )));
        }
        if q.0.is_empty() {
            return Err(Error::Domain("empty question".into()));
        }
        if q.0.len() > self.config.max_question_len {
            return Err(Error::Domain(format!(
                "question has {} tokens, limit is {}",
                q.0.len(),
                self.config.max_question_len
            )));
        }
        if let Some(bad) = q.0.iter().find(|&&i| i == 0 || i > self.config.vocab_size) {
            return Err(Error::Domain(format!("question id {bad} out of range")));
        }
        Ok(())
    }

    fn encode(params: &ParameterStore, cfg: &VqaConfig, ids: &[usize]) -> EncoderCache {
        let (t_len, d) = (cfg.max_question_len, cfg.feature_dim);
        let valid = ids.len();
        let embed = params.value(EMBED);
        let mut word = DenseArray::zeros(&[t_len, d]);
        for (t, &id) in ids.iter().enumerate() {
            word.row_mut(t).copy_from_slice(embed.row(id));
        }
        let mut conv: [DenseArray; 3] = std::array::from_fn(|_| DenseArray::zeros(&[t_len, d]));
        for (s, out) in conv.iter_mut().enumerate() {
            let b = params.value(CONV_B[s]);
            for t in 0..valid {
                let mut pre = b.data().to_vec();
                for (o, name) in CONV_W[s].iter().enumerate() {
                    if t + o < valid {
                        axpy(&mut pre, 1.0, &params.value(name).matvec(word.row(t + o)));
                    }
                }
                for (dst, v) in out.row_mut(t).iter_mut().zip(pre) {
                    *dst = v.tanh();
                }
            }
        }
        let mut phrase = DenseArray::zeros(&[t_len, d]);
        let mut winner = vec![0u8; t_len * d];
        for t in 0..valid {
            for j in 0..d {
                let mut best = 0;
                for s in 1..3 {
                    if conv[s].at(t, j) > conv[best].at(t, j) {
                        best = s;
                    }
                }
                winner[t * d + j] = best as u8;
                phrase.set(t, j, conv[best].at(t, j));
            }
        }
        let lw = LstmWeights {
            w: params.value(LSTM_W),
            u: params.value(LSTM_U),
            b: params.value(LSTM_B),
        };
        let mut question = DenseArray::zeros(&[t_len, d]);
        let mut h = vec![0.0; d];
        let mut c = vec![0.0; d];
        let mut lstm = Vec::with_capacity(valid);
        for t in 0..valid {
            let (hn, cn, cache) = lw.forward(phrase.row(t), &h, &c);
            question.row_mut(t).copy_from_slice(&hn);
            lstm.push(cache);
            h = hn;
            c = cn;
        }
        EncoderCache {
            ids: ids.to_vec(),
            word,
            conv,
            winner,
            phrase,
            lstm,
            question,
        }
    }

    /// Word, phrase and question features for a question.
    pub fn encode_question_levels(&self, q: &QuestionIds) -> Result<QuestionFeatures> {
        if q.0.is_empty() {
            return Err(Error::Domain("empty question".into()));
        }
        let probe = DenseArray::zeros(&[self.config.regions, self.config.feature_dim]);
        self.check_inputs(&probe, q)?;
        let e = Self::encode(&self.params, &self.config, &q.0);
        Ok(QuestionFeatures {
            levels: [e.word, e.phrase, e.question],
            valid: q.0.len(),
        })
    }

    /// Co-attention for one level using that level's weights.
    pub fn parallel_coattention(
        &self,
        level: usize,
        q: &DenseArray,
        valid: usize,
        a: &DenseArray,
    ) -> Result<(AttentionVector, Vec<f64>, Vec<f64>, Vec<f64>)> {
        if level >= 3 {
            return Err(Error::Domain(format!("level {level} out of range")));
        }
        if valid == 0 || valid > q.rows() {
            return Err(Error::Domain(format!("{valid} valid positions for {} rows", q.rows())));
        }
        let w = level_weights(&self.params, level);
        let (v, qh, cache) = coattention(q, valid, a, &w)?;
        Ok((AttentionVector::new_unchecked(cache.alpha_v), cache.alpha_q, v, qh))
    }

    /// Inference forward pass.
    pub fn forward(&self, features: &DenseArray, q: &QuestionIds) -> Result<CoAttentionOutput> {
        self.check_inputs(features, q)?;
        let pass = sample_forward(&self.config, &self.params, features, q, None)?;
        Ok(CoAttentionOutput {
            answer_dist: pass.probs,
            level_attentions: pass.coatt.each_ref().map(|c| AttentionVector::new_unchecked(c.alpha_v.clone())),
            question_attentions: pass.coatt.each_ref().map(|c| c.alpha_q.clone()),
        })
    }

    /// Image attentions at the word, phrase and question levels.
    pub fn extract_attentions(&self, features: &DenseArray, q: &QuestionIds) -> Result<[AttentionVector; 3]> {
        Ok(self.forward(features, q)?.level_attentions)
    }

    pub fn predict(&self, features: &DenseArray, q: &QuestionIds) -> Result<usize> {
        Ok(argmax(&self.forward(features, q)?.answer_dist))
    }

    fn draw_masks(&self, n: usize, rng: &mut Rng) -> Vec<SampleMasks> {
        let c = &self.config;
        (0..n)
            .map(|_| SampleMasks {
                adapt: if c.adaption {
                    dropout_mask(c.regions * c.feature_dim, c.adaption_dropout, rng)
                } else {
                    Vec::new()
                },
                hw: dropout_mask(c.hidden_dim, c.dropout_rate, rng),
                hp: dropout_mask(c.hidden_dim, c.dropout_rate, rng),
                hs: dropout_mask(c.hidden_dim, c.dropout_rate, rng),
            })
            .collect()
    }

    /// Mean cross-entropy over the batch and its gradients.
    pub fn loss_and_grads(&self, batch: &[VqaSample<'_>], rng: &mut Rng) -> Result<(VqaStats, GradBuffer)> {
        if batch.is_empty() {
            return Err(Error::Domain("empty training batch".into()));
        }
        for s in batch {
            self.check_inputs(s.features, s.question)?;
        }
        let masks = self.draw_masks(batch.len(), rng);
        let scale = 1.0 / batch.len() as f64;
        let parts: Vec<Result<(VqaStats, GradBuffer)>> = batch
            .par_iter()
            .zip(masks.par_iter())
            .map(|(s, m)| {
                let mut g = self.params.grad_buffer();
                let st = sample_pass(&self.config, &self.params, s, Some(m), scale, Some(&mut g))?;
                Ok((st, g))
            })
            .collect();
        let mut stats = VqaStats::default();
        let mut grads = self.params.grad_buffer();
        for p in parts {
            let (st, g) = p?;
            stats.loss += st.loss;
            stats.correct += st.correct;
            stats.count += st.count;
            grads.merge(&g, 1.0);
        }
        stats.loss *= scale;
        if !stats.loss.is_finite() {
            return Err(Error::Training(format!("non-finite VQA loss {}", stats.loss)));
        }
        Ok((stats, grads))
    }

    /// Loss only, with masks drawn exactly as in [`Self::loss_and_grads`].
    pub fn batch_loss(config: &VqaConfig, params: &ParameterStore, batch: &[VqaSample<'_>], rng: &mut Rng) -> Result<f64> {
        let probe = VqaModel {
            config: config.clone(),
            params: ParameterStore::new(),
        };
        let masks = probe.draw_masks(batch.len(), rng);
        let mut total = 0.0;
        for (s, m) in batch.iter().zip(&masks) {
            total += sample_pass(config, params, s, Some(m), 1.0, None)?.loss;
        }
        Ok(total / batch.len() as f64)
    }

    pub fn evaluate(&self, data: &[VqaSample<'_>]) -> Result<VqaStats> {
        let parts: Vec<Result<VqaStats>> = data
            .par_iter()
            .map(|s| {
                self.check_inputs(s.features, s.question)?;
                sample_pass(&self.config, &self.params, s, None, 1.0, None)
            })
            .collect();
        let mut stats = VqaStats::default();
        for p in parts {
            let p = p?;
            stats.loss += p.loss;
            stats.correct += p.correct;
            stats.count += p.count;
        }
        if !data.is_empty() {
            stats.loss /= data.len() as f64;
        }
        Ok(stats)
    }
}

fn level_weights(params: &ParameterStore, level: usize) -> LevelWeights<'_> {
    LevelWeights {
        w_c: params.value(W_C[level]),
        w_v: params.value(W_V[level]),
        w_q: params.value(W_Q[level]),
    }
}

struct ForwardPass {
    enc: EncoderCache,
    adapt_pre: Option<DenseArray>,
    image: DenseArray,
    coatt: [CoattCache; 3],
    ctx: [Vec<f64>; 3],
    hw: Vec<f64>,
    hp: Vec<f64>,
    hs: Vec<f64>,
    hw_d: Vec<f64>,
    hp_d: Vec<f64>,
    hs_d: Vec<f64>,
    probs: Vec<f64>,
}

fn mask_mul(v: &[f64], m: Option<&Vec<f64>>) -> Vec<f64> {
    match m {
        Some(m) => v.iter().zip(m).map(|(a, b)| a * b).collect(),
        None => v.to_vec(),
    }
}

fn sample_forward(
    cfg: &VqaConfig,
    params: &ParameterStore,
    features: &DenseArray,
    q: &QuestionIds,
    masks: Option<&SampleMasks>,
) -> Result<ForwardPass> {
    let enc = VqaModel::encode(params, cfg, &q.0);
    let valid = q.0.len();
    let (adapt_pre, image) = if cfg.adaption {
        let mut pre = matmul(features, &params.value(ADAPT_W).transpose())?;
        let b = params.value(ADAPT_B);
        for i in 0..pre.rows() {
            axpy(pre.row_mut(i), 1.0, b.data());
        }
        let mut img = pre.map(f64::tanh);
        if let Some(m) = masks {
            img.data_mut().iter_mut().zip(&m.adapt).for_each(|(v, k)| *v *= k);
        }
        (Some(pre), img)
    } else {
        (None, features.clone())
    };
    let qs = [&enc.word, &enc.phrase, &enc.question];
    let mut coatt = Vec::with_capacity(3);
    let mut ctx = Vec::with_capacity(3);
    for lvl in 0..3 {
        let (v, qh, cache) = coattention(qs[lvl], valid, &image, &level_weights(params, lvl))?;
        coatt.push(cache);
        ctx.push(v.iter().zip(&qh).map(|(a, b)| a + b).collect::<Vec<f64>>());
    }
    let hw = params.value(MLP_W).matvec(&ctx[0]).into_iter().map(f64::tanh).collect::<Vec<_>>();
    let hw_d = mask_mul(&hw, masks.map(|m| &m.hw));
    let hp = params
        .value(MLP_P)
        .matvec(&[ctx[1].as_slice(), &hw_d].concat())
        .into_iter()
        .map(f64::tanh)
        .collect::<Vec<_>>();
    let hp_d = mask_mul(&hp, masks.map(|m| &m.hp));
    let hs = params
        .value(MLP_S)
        .matvec(&[ctx[2].as_slice(), &hp_d].concat())
        .into_iter()
        .map(f64::tanh)
        .collect::<Vec<_>>();
    let hs_d = mask_mul(&hs, masks.map(|m| &m.hs));
    let probs = softmax_slice(&params.value(MLP_Y).matvec(&hs_d))?;
    let coatt: [CoattCache; 3] = coatt.try_into().map_err(|_| Error::Contract("three levels".into()))?;
    let ctx: [Vec<f64>; 3] = ctx.try_into().map_err(|_| Error::Contract("three levels".into()))?;
    Ok(ForwardPass {
        enc,
        adapt_pre,
        image,
        coatt,
        ctx,
        hw,
        hp,
        hs,
        hw_d,
        hp_d,
        hs_d,
        probs,
    })
}

fn sample_pass(
    cfg: &VqaConfig,
    params: &ParameterStore,
    s: &VqaSample<'_>,
    masks: Option<&SampleMasks>,
    scale: f64,
    grads: Option<&mut GradBuffer>,
) -> Result<VqaStats> {
    if s.answer >= cfg.num_answers {
        return Err(Error::Domain(format!("answer index {} out of range", s.answer)));
    }
    let f = sample_forward(cfg, params, s.features, s.question, masks)?;
    let stats = VqaStats {
        loss: -f.probs[s.answer].max(PROB_FLOOR).ln(),
        correct: usize::from(argmax(&f.probs) == s.answer),
        count: 1,
    };
    let Some(g) = grads else {
        return Ok(stats);
    };
    let (d, hd) = (cfg.feature_dim, cfg.hidden_dim);
    let valid = s.question.0.len();

    // Answer MLP.
    let mut dy = f.probs.clone();
    dy[s.answer] -= 1.0;
    dy.iter_mut().for_each(|v| *v *= scale);
    g.get_mut(MLP_Y).add_outer(&dy, &f.hs_d);
    let dhs = mask_mul(&params.value(MLP_Y).matvec_t(&dy), masks.map(|m| &m.hs));
    let dhs_pre: Vec<f64> = dhs.iter().zip(&f.hs).map(|(g, h)| g * (1.0 - h * h)).collect();
    g.get_mut(MLP_S).add_outer(&dhs_pre, &[f.ctx[2].as_slice(), &f.hp_d].concat());
    let ds_in = params.value(MLP_S).matvec_t(&dhs_pre);
    let dhp = mask_mul(&ds_in[d..], masks.map(|m| &m.hp));
    let dhp_pre: Vec<f64> = dhp.iter().zip(&f.hp).map(|(g, h)| g * (1.0 - h * h)).collect();
    g.get_mut(MLP_P).add_outer(&dhp_pre, &[f.ctx[1].as_slice(), &f.hw_d].concat());
    let dp_in = params.value(MLP_P).matvec_t(&dhp_pre);
    let dhw = mask_mul(&dp_in[d..], masks.map(|m| &m.hw));
    let dhw_pre: Vec<f64> = dhw.iter().zip(&f.hw).map(|(g, h)| g * (1.0 - h * h)).collect();
    g.get_mut(MLP_W).add_outer(&dhw_pre, &f.ctx[0]);
    let dctx = [
        params.value(MLP_W).matvec_t(&dhw_pre),
        dp_in[..d].to_vec(),
        ds_in[..d].to_vec(),
    ];
    debug_assert_eq!(dhw.len(), hd);

    // Co-attention per level; context = v̂ + q̂.
    let qs = [&f.enc.word, &f.enc.phrase, &f.enc.question];
    let mut dimage = DenseArray::zeros(f.image.shape());
    let mut dq_levels = Vec::with_capacity(3);
    for lvl in 0..3 {
        let w = level_weights(params, lvl);
        let gs = g.get_disjoint_mut([W_C[lvl], W_V[lvl], W_Q[lvl]]);
        let (dq, da) = coattention_backward(&f.coatt[lvl], qs[lvl], valid, &f.image, &w, &dctx[lvl], &dctx[lvl], gs)?;
        dimage.add_assign(&da);
        dq_levels.push(dq);
    }

    // Adaption layer.
    if let Some(pre) = &f.adapt_pre {
        let mut dpre = dimage;
        for (i, (dv, p)) in dpre.data_mut().iter_mut().zip(pre.data()).enumerate() {
            let t = p.tanh();
            let m = masks.map_or(1.0, |m| m.adapt[i]);
            *dv *= m * (1.0 - t * t);
        }
        g.get_mut(ADAPT_W).add_assign(&matmul(&dpre.transpose(), s.features)?);
        let gb = g.get_mut(ADAPT_B);
        for i in 0..dpre.rows() {
            axpy(gb.data_mut(), 1.0, dpre.row(i));
        }
    }

    // Question LSTM over phrase features.
    let [g_lw, g_lu, g_lb] = g.get_disjoint_mut([LSTM_W, LSTM_U, LSTM_B]);
    let mut lstm_grads = LstmGrads {
        w: g_lw,
        u: g_lu,
        b: g_lb,
    };
    let lw = LstmWeights {
        w: params.value(LSTM_W),
        u: params.value(LSTM_U),
        b: params.value(LSTM_B),
    };
    let mut dphrase = dq_levels[1].clone();
    let mut dh_next = vec![0.0; d];
    let mut dc_next = vec![0.0; d];
    for t in (0..valid).rev() {
        let mut dh = dq_levels[2].row(t).to_vec();
        axpy(&mut dh, 1.0, &dh_next);
        let (dx, dh_prev, dc_prev) = lw.backward(&f.enc.lstm[t], &dh, &dc_next, &mut lstm_grads);
        axpy(dphrase.row_mut(t), 1.0, &dx);
        dh_next = dh_prev;
        dc_next = dc_prev;
    }

    // Phrase convolutions: gradient flows to the winning window only.
    let mut dword = dq_levels[0].clone();
    for s in 0..3 {
        let mut dpre = DenseArray::zeros(&[valid, d]);
        let mut any = false;
        for t in 0..valid {
            for j in 0..d {
                if f.enc.winner[t * d + j] as usize == s {
                    let c = f.enc.conv[s].at(t, j);
                    dpre.set(t, j, dphrase.at(t, j) * (1.0 - c * c));
                    any = true;
                }
            }
        }
        if !any {
            continue;
        }
        for t in 0..valid {
            axpy(g.get_mut(CONV_B[s]).data_mut(), 1.0, dpre.row(t));
        }
        for (o, name) in CONV_W[s].iter().enumerate() {
            let wv = params.value(name);
            for t in 0..valid.saturating_sub(o) {
                let dr = dpre.row(t);
                g.get_mut(name).add_outer(dr, f.enc.word.row(t + o));
                let back = wv.matvec_t(dr);
                axpy(dword.row_mut(t + o), 1.0, &back);
            }
        }
    }
    let ge = g.get_mut(EMBED);
    for (t, &id) in f.enc.ids.iter().enumerate() {
        axpy(ge.row_mut(id), 1.0, dword.row(t));
    }
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Stop once training accuracy reaches this value.
    pub target_accuracy: Option<f64>,
}

impl Default for VqaTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 11,
            target_accuracy: Some(0.95),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaEpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

/// Mini-batch Adam training; keeps the parameters with the best validation accuracy.
pub fn train_vqa(
    model: &mut VqaModel,
    train: &[VqaSample<'_>],
    val: &[VqaSample<'_>],
    cfg: &VqaTrainConfig,
    mut on_epoch: impl FnMut(&VqaEpochReport),
) -> Result<Vec<VqaEpochReport>> {
    if train.is_empty() {
        return Err(Error::Domain("no VQA training samples".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Domain("batch size must be positive".into()));
    }
    let mut rng = seeded_rng(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut reports = Vec::new();
    let mut best: Option<(f64, ParameterStore)> = None;
    for epoch in 1..=cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<VqaSample<'_>> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (_, grads) = model.loss_and_grads(&batch, &mut rng)?;
            model.params.set_grads(&grads, 1.0);
            model.params.adam_step(cfg.learning_rate, 0.9, 0.999, 1e-8)?;
        }
        let tr = model.evaluate(train)?;
        let va = if val.is_empty() { tr } else { model.evaluate(val)? };
        let rep = VqaEpochReport {
            epoch,
            train_loss: tr.loss,
            train_accuracy: tr.accuracy(),
            val_accuracy: va.accuracy(),
        };
        on_epoch(&rep);
        reports.push(rep);
        if best.as_ref().map_or(true, |(b, _)| va.accuracy() > *b) {
            best = Some((va.accuracy(), model.params.clone()));
        }
        if cfg.target_accuracy.is_some_and(|t| tr.accuracy() >= t) {
            break;
        }
    }
    if let Some((_, p)) = best {
        model.params = p;
    }
    Ok(reports)
}
