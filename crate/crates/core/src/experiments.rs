//! Dataset-level training and the two interface experiments: box attention
//! (sensitivity, controllability) and co-attention transfer (usefulness).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxes::{box_to_attention, filter_boxes, median, BoundingBox};
use crate::captioner::{train, Captioner, CaptionerConfig, EpochReport, ImageAnnotation, TrainConfig, TrainReport, TrainingData, EMBED};
use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::interface::{uniform_attention, AttentionVector, InterfaceMethod, MethodSpec};
use crate::metrics::{
    controllability_report, sensitivity_report, usefulness_report, CaptionRecord, CategoryLexicon, ControllabilityReport,
    SensitivityReport, UsefulnessRecord, UsefulnessReport,
};
use crate::tensor::seeded_rng;
use crate::text::{build_vocab, encode_caption, tokenize, Encoded, StopwordList, TokenSequence, Vocabulary};
use crate::vqa::{
    build_answer_list, encode_question, train_vqa, AnswerList, QuestionIds, VqaConfig, VqaEpochReport, VqaModel, VqaSample,
    VqaTrainConfig, LEVELS,
};

/// Tokenized captions of the given images, in id order.
pub fn tokenized_captions(ds: &Dataset, ids: &[u64]) -> Vec<Vec<String>> {
    ids.iter()
        .filter_map(|id| ds.captions.get(id))
        .flat_map(|caps| caps.iter().map(|c| tokenize(c)))
        .collect()
}

/// Vocabulary over the training split's captions.
pub fn build_caption_vocab(ds: &Dataset, max_size: usize) -> Result<Vocabulary> {
    build_vocab(&tokenized_captions(ds, ds.train_ids()), max_size)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionerSetup {
    pub max_words: usize,
    pub dropout_rate: f64,
    pub lambda: f64,
    pub init_seed: u64,
}

impl Default for CaptionerSetup {
    fn default() -> Self {
        Self {
            max_words: 16,
            dropout_rate: 0.5,
            lambda: 0.005,
            init_seed: 3,
        }
    }
}

/// Encoded training captions; unknown-word and overlong captions are dropped.
pub fn encode_split(ds: &Dataset, ids: &[u64], vocab: &Vocabulary, max_words: usize) -> (Vec<(u64, TokenSequence)>, usize) {
    let mut kept = Vec::new();
    let mut discarded = 0;
    for id in ids {
        for c in ds.captions.get(id).into_iter().flatten() {
            match encode_caption(&tokenize(c), vocab, max_words) {
                Encoded::Sequence(s) => kept.push((*id, s)),
                Encoded::Discard => discarded += 1,
            }
        }
    }
    (kept, discarded)
}

fn features<'a>(ds: &'a Dataset, id: u64) -> Result<&'a ImageAnnotation> {
    ds.features
        .get(id)
        .ok_or_else(|| Error::data(&ds.dir, format!("no features for image {id}")))
}

pub fn train_captioner_on(
    ds: &Dataset,
    vocab: &Vocabulary,
    setup: &CaptionerSetup,
    tcfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochReport),
) -> Result<(Captioner, TrainReport)> {
    let config = CaptionerConfig {
        regions: ds.features.grid * ds.features.grid,
        feature_dim: ds.features.dim,
        vocab_size: vocab.size(),
        max_len: setup.max_words + 1,
        dropout_rate: setup.dropout_rate,
        lambda: setup.lambda,
    };
    let mut model = Captioner::new(config, &mut seeded_rng(setup.init_seed))?;
    let (seqs, _) = encode_split(ds, ds.train_ids(), vocab, setup.max_words);
    let mut train_pairs = Vec::with_capacity(seqs.len());
    for (id, s) in &seqs {
        train_pairs.push((features(ds, *id)?, s));
    }
    let mut validation = Vec::new();
    for id in ds.val_ids() {
        let refs = tokenized_captions(ds, &[*id]);
        if !refs.is_empty() {
            validation.push((features(ds, *id)?, refs));
        }
    }
    let data = TrainingData {
        train: train_pairs,
        validation,
    };
    let report = train(&mut model, &data, tcfg, |ids| vocab.decode(ids), on_epoch)?;
    Ok((model, report))
}

/// A captioner with the vocabulary it was trained on.
#[derive(Clone, Debug)]
pub struct CaptionerBundle {
    pub model: Captioner,
    pub vocab: Vocabulary,
}

impl CaptionerBundle {
    pub fn save(&self, path: &Path) -> Result<()> {
        let extra = serde_json::json!({ "vocab": self.vocab.to_file_string() });
        Checkpoint::from_captioner(&self.model, extra).save(path)
    }

    pub fn load(path: &Path, regions: Option<usize>) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let vocab = ck.extra["vocab"]
            .as_str()
            .ok_or_else(|| Error::Corruption("captioner checkpoint lacks its vocabulary".into()))
            .and_then(Vocabulary::from_file_string)?;
        let model = ck.into_captioner(regions)?;
        if model.config.vocab_size != vocab.size() {
            return Err(Error::Corruption("stored vocabulary does not match the model".into()));
        }
        Ok(Self { model, vocab })
    }

    pub fn decode(&self, a: &ImageAnnotation, method: &InterfaceMethod) -> Result<Vec<String>> {
        let r = self.model.greedy_decode(a, method, self.model.config.max_len)?;
        Ok(self.vocab.decode(r.word_ids()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaSetup {
    pub max_question_len: usize,
    pub coattention_dim: usize,
    pub hidden_dim: usize,
    pub top_answers: usize,
    pub adaption: bool,
    pub dropout_rate: f64,
    pub init_seed: u64,
}

impl Default for VqaSetup {
    fn default() -> Self {
        Self {
            max_question_len: 10,
            coattention_dim: 32,
            hidden_dim: 64,
            top_answers: 1000,
            adaption: true,
            dropout_rate: 0.5,
            init_seed: 5,
        }
    }
}

/// A co-attention model with its question vocabulary and answer list.
#[derive(Clone, Debug)]
pub struct VqaBundle {
    pub model: VqaModel,
    pub vocab: Vocabulary,
    pub answers: AnswerList,
}

impl VqaBundle {
    pub fn save(&self, path: &Path) -> Result<()> {
        let extra = serde_json::json!({
            "vocab": self.vocab.to_file_string(),
            "answers": self.answers.answers,
        });
        Checkpoint::from_vqa(&self.model, extra).save(path)
    }

    pub fn load(path: &Path, regions: Option<usize>) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let vocab = ck.extra["vocab"]
            .as_str()
            .ok_or_else(|| Error::Corruption("VQA checkpoint lacks its vocabulary".into()))
            .and_then(Vocabulary::from_file_string)?;
        let answers: Vec<String> = serde_json::from_value(ck.extra["answers"].clone())
            .map_err(|e| Error::Corruption(format!("answer list: {e}")))?;
        let model = ck.into_vqa(regions)?;
        if model.config.num_answers != answers.len() || model.config.vocab_size != vocab.size() {
            return Err(Error::Corruption("stored vocabulary or answers do not match the model".into()));
        }
        Ok(Self {
            model,
            vocab,
            answers: AnswerList { answers },
        })
    }

    pub fn question_ids(&self, question: &str) -> QuestionIds {
        encode_question(&tokenize(question), &self.vocab, self.model.config.max_question_len)
    }
}

struct EncodedQa {
    image_id: u64,
    question: QuestionIds,
    answer: usize,
}

fn encode_qa(ds: &Dataset, ids: &[u64], vocab: &Vocabulary, answers: &AnswerList, max_len: usize) -> Vec<EncodedQa> {
    let wanted: std::collections::BTreeSet<u64> = ids.iter().copied().collect();
    ds.qa
        .iter()
        .filter(|q| wanted.contains(&q.image_id))
        .filter_map(|q| {
            let answer = answers.index(&q.answer)?;
            let question = encode_question(&tokenize(&q.question), vocab, max_len);
            (!question.0.is_empty()).then_some(EncodedQa {
                image_id: q.image_id,
                question,
                answer,
            })
        })
        .collect()
}

fn vqa_samples<'a>(ds: &'a Dataset, set: &'a [EncodedQa]) -> Result<Vec<VqaSample<'a>>> {
    set.iter()
        .map(|q| {
            Ok(VqaSample {
                features: &features(ds, q.image_id)?.features,
                question: &q.question,
                answer: q.answer,
            })
        })
        .collect()
}

pub fn train_vqa_on(
    ds: &Dataset,
    setup: &VqaSetup,
    tcfg: &VqaTrainConfig,
    on_epoch: impl FnMut(&VqaEpochReport),
) -> Result<(VqaBundle, Vec<VqaEpochReport>)> {
    let train_set: std::collections::BTreeSet<u64> = ds.train_ids().iter().copied().collect();
    let train_qa: Vec<_> = ds.qa.iter().filter(|q| train_set.contains(&q.image_id)).collect();
    let questions: Vec<Vec<String>> = train_qa.iter().map(|q| tokenize(&q.question)).collect();
    let vocab = build_vocab(&questions, usize::MAX)?;
    let answer_strings: Vec<String> = train_qa.iter().map(|q| q.answer.clone()).collect();
    let (answers, _) = build_answer_list(&answer_strings, setup.top_answers)?;
    let config = VqaConfig {
        regions: ds.features.grid * ds.features.grid,
        feature_dim: ds.features.dim,
        vocab_size: vocab.size(),
        max_question_len: setup.max_question_len,
        coattention_dim: setup.coattention_dim,
        hidden_dim: setup.hidden_dim,
        num_answers: answers.len(),
        adaption: setup.adaption,
        adaption_dropout: 0.1,
        dropout_rate: setup.dropout_rate,
    };
    let mut model = VqaModel::new(config, &mut seeded_rng(setup.init_seed))?;
    let tr = encode_qa(ds, ds.train_ids(), &vocab, &answers, setup.max_question_len);
    let va = encode_qa(ds, ds.val_ids(), &vocab, &answers, setup.max_question_len);
    let (tr_s, va_s) = (vqa_samples(ds, &tr)?, vqa_samples(ds, &va)?);
    let reports = train_vqa(&mut model, &tr_s, &va_s, tcfg, on_epoch)?;
    Ok((VqaBundle { model, vocab, answers }, reports))
}

/// One emitted caption with where its attention came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionLine {
    pub image_id: u64,
    pub method: String,
    /// `box:<ann id>`, `question:<id>:<level>`, or `model` / `uniform`.
    pub attention: String,
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exp1Config {
    pub methods: Vec<MethodSpec>,
    pub ks: Vec<usize>,
    pub sharpen: Option<f64>,
}

impl Default for Exp1Config {
    fn default() -> Self {
        Self {
            methods: vec![
                MethodSpec::Unlimited,
                MethodSpec::Limited(3),
                MethodSpec::Limited(6),
                MethodSpec::Limited(9),
                MethodSpec::Additive(1.0),
                MethodSpec::Additive(2.0),
                MethodSpec::Additive(3.0),
            ],
            ks: vec![1, 5],
            sharpen: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exp1Output {
    pub images: usize,
    pub total_boxes: usize,
    pub kept_boxes: usize,
    pub median_width: f64,
    pub median_height: f64,
    pub methods: Vec<String>,
    pub sensitivity: SensitivityReport,
    pub controllability: Vec<ControllabilityReport>,
    #[serde(skip)]
    pub records: Vec<CaptionRecord>,
    #[serde(skip)]
    pub lines: Vec<CaptionLine>,
}

impl Exp1Output {
    pub fn footer(&self) -> String {
        let expected = self.kept_boxes * self.methods.len() + 2 * self.images;
        format!(
            "captions: {} kept boxes × {} methods + {} images × 2 (control, self) = {expected}; emitted {}",
            self.kept_boxes,
            self.methods.len(),
            self.images,
            self.lines.len()
        )
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "boxes: {} of {} kept (median {:.1}×{:.1} px) over {} images\n",
            self.kept_boxes, self.total_boxes, self.median_width, self.median_height, self.images
        );
        let _ = writeln!(s, "sensitivity");
        s.push_str(&self.sensitivity.render_text());
        for c in &self.controllability {
            let _ = writeln!(s);
            s.push_str(&c.render_text());
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{}", self.footer());
        s
    }

    /// Overall k@`k` controllability percentage of `method`, full set.
    pub fn controllability_pct(&self, k: usize, method: &str) -> Option<f64> {
        self.controllability
            .iter()
            .find(|c| c.k == k && !c.distinct)?
            .rows
            .iter()
            .find(|r| r.method == method)
            .map(|r| r.overall.pct())
    }
}

fn caption_line(image_id: u64, method: &str, attention: String, words: &[String]) -> CaptionLine {
    CaptionLine {
        image_id,
        method: method.to_string(),
        attention,
        caption: words.join(" "),
    }
}

/// Box-attention experiment over the validation images.
pub fn run_exp1(bundle: &CaptionerBundle, ds: &Dataset, cfg: &Exp1Config) -> Result<Exp1Output> {
    let grid = bundle.model.config.grid();
    let ids = ds.val_ids();
    let wanted: std::collections::BTreeSet<u64> = ids.iter().copied().collect();
    let boxes: Vec<BoundingBox> = ds
        .annotations
        .boxes
        .iter()
        .filter(|b| wanted.contains(&b.image_id))
        .copied()
        .collect();
    let ws: Vec<f64> = boxes.iter().map(|b| b.w as f64).collect();
    let hs: Vec<f64> = boxes.iter().map(|b| b.h as f64).collect();
    let (mw, mh) = (median(&ws).unwrap_or(0.0), median(&hs).unwrap_or(0.0));
    let mut kept: Vec<BoundingBox> = Vec::new();
    for b in &boxes {
        let info = ds
            .annotations
            .image(b.image_id)
            .ok_or_else(|| Error::data(&ds.dir, format!("box {} on unknown image", b.ann_id)))?;
        let cell_w = info.width as f64 / grid as f64;
        let cell_h = info.height as f64 / grid as f64;
        kept.extend(filter_boxes(std::slice::from_ref(b), mw, mh, cell_w, cell_h));
    }

    let uniform = uniform_attention(bundle.model.config.regions)?;
    let per_image: Vec<(u64, Vec<String>, Vec<String>)> = ids
        .par_iter()
        .map(|&id| {
            let a = features(ds, id)?;
            let own = bundle.decode(a, &InterfaceMethod::SelfAttending)?;
            let ctl = bundle.decode(a, &InterfaceMethod::ControlUniform)?;
            debug_assert_eq!(ctl, bundle.decode(a, &InterfaceMethod::Unlimited(uniform.clone()))?);
            Ok((id, own, ctl))
        })
        .collect::<Result<_>>()?;
    let baseline: BTreeMap<u64, (Vec<String>, Vec<String>)> =
        per_image.iter().map(|(id, s, c)| (*id, (s.clone(), c.clone()))).collect();

    let per_box: Vec<Vec<(CaptionRecord, CaptionLine)>> = kept
        .par_iter()
        .map(|b| {
            let info = ds.annotations.image(b.image_id).expect("checked above");
            let alpha = box_to_attention(b, info.width, info.height, grid, cfg.sharpen)?;
            let a = features(ds, b.image_id)?;
            let (own, ctl) = &baseline[&b.image_id];
            cfg.methods
                .iter()
                .map(|m| {
                    let method = m.bind(Some(&alpha))?;
                    let words = bundle.decode(a, &method)?;
                    let label = m.to_string();
                    let line = caption_line(b.image_id, &label, format!("box:{}", b.ann_id), &words);
                    let rec = CaptionRecord {
                        image_id: b.image_id,
                        source_id: b.ann_id.to_string(),
                        method: label,
                        box_caption: words,
                        control_caption: ctl.clone(),
                        self_caption: own.clone(),
                        category_id: Some(b.category_id),
                    };
                    Ok((rec, line))
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    let mut lines = Vec::new();
    for (id, own, ctl) in &per_image {
        lines.push(caption_line(*id, "self", "model".into(), own));
        lines.push(caption_line(*id, "control", "uniform".into(), ctl));
    }
    for (rec, line) in per_box.into_iter().flatten() {
        records.push(rec);
        lines.push(line);
    }

    // Baseline rows: each kept box scored against its image's control and self captions.
    let mut scored = records.clone();
    for b in &kept {
        let (own, ctl) = &baseline[&b.image_id];
        for (label, cap) in [("control", ctl), ("self", own)] {
            scored.push(CaptionRecord {
                image_id: b.image_id,
                source_id: b.ann_id.to_string(),
                method: label.into(),
                box_caption: cap.clone(),
                control_caption: ctl.clone(),
                self_caption: own.clone(),
                category_id: Some(b.category_id),
            });
        }
    }
    let embeddings = bundle.model.params.value(EMBED);
    let mut controllability = Vec::new();
    for &k in &cfg.ks {
        let lex = CategoryLexicon::build(ds.annotations.categories.iter(), &bundle.vocab, embeddings, k)?;
        for distinct in [false, true] {
            controllability.push(controllability_report(&scored, &lex, distinct));
        }
    }
    let out = Exp1Output {
        images: ids.len(),
        total_boxes: boxes.len(),
        kept_boxes: kept.len(),
        median_width: mw,
        median_height: mh,
        methods: cfg.methods.iter().map(|m| m.to_string()).collect(),
        sensitivity: sensitivity_report(&records),
        controllability,
        records,
        lines,
    };
    if out.lines.len() != out.kept_boxes * out.methods.len() + 2 * out.images {
        return Err(Error::Contract(out.footer()));
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it).expect("serializable"));
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    write_text(path, &s)
}

pub fn write_exp1(out: &Exp1Output, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_jsonl(&dir.join("captions.jsonl"), &out.lines)?;
    write_text(&dir.join("report.txt"), &out.render_text())?;
    write_pretty(&dir.join("report.json"), out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exp2Config {
    pub methods: Vec<MethodSpec>,
    pub qtype: String,
}

impl Default for Exp2Config {
    fn default() -> Self {
        Self {
            methods: vec![MethodSpec::Unlimited, MethodSpec::Limited(6), MethodSpec::Additive(3.0)],
            qtype: "other".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractedAttention {
    pub question_id: u64,
    pub image_id: u64,
    pub level: String,
    pub alpha: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exp2Output {
    pub questions: usize,
    pub skipped_questions: usize,
    pub usefulness: UsefulnessReport,
    #[serde(skip)]
    pub records: Vec<UsefulnessRecord>,
    #[serde(skip)]
    pub lines: Vec<CaptionLine>,
    #[serde(skip)]
    pub attentions: Vec<ExtractedAttention>,
}

impl Exp2Output {
    pub fn render_text(&self) -> String {
        format!(
            "questions: {} ({} skipped without known question words)\n\n{}",
            self.questions,
            self.skipped_questions,
            self.usefulness.render_text()
        )
    }

    pub fn in_either_pct(&self, method: &str, level: &str) -> Option<f64> {
        self.usefulness
            .rows
            .iter()
            .find(|r| r.method == method && r.level == level)
            .map(|r| r.in_either.pct())
    }
}

/// Co-attention transfer experiment over validation questions of `cfg.qtype`.
pub fn run_exp2(captioner: &CaptionerBundle, vqa: &VqaBundle, ds: &Dataset, cfg: &Exp2Config) -> Result<Exp2Output> {
    let wanted: std::collections::BTreeSet<u64> = ds.val_ids().iter().copied().collect();
    let pairs: Vec<_> = ds
        .qa
        .iter()
        .filter(|q| wanted.contains(&q.image_id) && q.qtype == cfg.qtype)
        .collect();
    let stopwords = StopwordList::default();

    type PerQuestion = (Vec<UsefulnessRecord>, Vec<CaptionLine>, Vec<ExtractedAttention>);
    let results: Vec<Option<PerQuestion>> = pairs
        .par_iter()
        .map(|q| {
            let qids = vqa.question_ids(&q.question);
            if qids.0.is_empty() {
                return Ok(None);
            }
            let a = features(ds, q.image_id)?;
            let levels: [AttentionVector; 3] = vqa.model.extract_attentions(&a.features, &qids)?;
            let question = tokenize(&q.question);
            let answer = tokenize(&q.answer);
            let mut recs = Vec::new();
            let mut lines = Vec::new();
            let mut atts = Vec::new();
            let mut emit = |method: &str, level: &str, attention: String, words: Vec<String>| {
                lines.push(caption_line(q.image_id, method, attention, &words));
                recs.push(UsefulnessRecord {
                    method: method.to_string(),
                    level: level.to_string(),
                    caption: words,
                    question: question.clone(),
                    answer: answer.clone(),
                });
            };
            for m in &cfg.methods {
                for (level, alpha) in LEVELS.iter().zip(&levels) {
                    let words = captioner.decode(a, &m.bind(Some(alpha))?)?;
                    emit(&m.to_string(), level, format!("question:{}:{level}", q.question_id), words);
                }
            }
            emit(
                "control",
                "-",
                format!("question:{}:uniform", q.question_id),
                captioner.decode(a, &InterfaceMethod::ControlUniform)?,
            );
            emit(
                "self",
                "-",
                format!("question:{}:model", q.question_id),
                captioner.decode(a, &InterfaceMethod::SelfAttending)?,
            );
            for (level, alpha) in LEVELS.iter().zip(levels) {
                atts.push(ExtractedAttention {
                    question_id: q.question_id,
                    image_id: q.image_id,
                    level: level.to_string(),
                    alpha: alpha.into_vec(),
                });
            }
            Ok(Some((recs, lines, atts)))
        })
        .collect::<Result<_>>()?;

    let mut out = Exp2Output {
        questions: 0,
        skipped_questions: 0,
        usefulness: UsefulnessReport::default(),
        records: Vec::new(),
        lines: Vec::new(),
        attentions: Vec::new(),
    };
    for r in results {
        match r {
            Some((recs, lines, atts)) => {
                out.questions += 1;
                out.records.extend(recs);
                out.lines.extend(lines);
                out.attentions.extend(atts);
            }
            None => out.skipped_questions += 1,
        }
    }
    out.usefulness = usefulness_report(&out.records, &stopwords);
    Ok(out)
}

pub fn write_exp2(out: &Exp2Output, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_jsonl(&dir.join("captions.jsonl"), &out.lines)?;
    write_jsonl(&dir.join("attentions.jsonl"), &out.attentions)?;
    write_text(&dir.join("report.txt"), &out.render_text())?;
    write_pretty(&dir.join("report.json"), out)
}
