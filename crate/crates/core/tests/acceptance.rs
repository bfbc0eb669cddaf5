//! Acceptance run: prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use attncap::boxes::{box_to_attention, filter_boxes, BoundingBox};
use attncap::captioner::{Captioner, CaptionerConfig, TrainConfig, TrainReport};
use attncap::data::{gen_dataset, Dataset, GenConfig};
use attncap::experiments::{
    build_caption_vocab, run_exp1, run_exp2, train_captioner_on, train_vqa_on, write_exp1, write_exp2, CaptionerBundle,
    CaptionerSetup, Exp1Config, Exp1Output, Exp2Config, Exp2Output, VqaSetup,
};
use attncap::interface::{effective_attention, uniform_attention, InterfaceMethod};
use attncap::metrics::{
    controllability_report, corpus_bleu, percentage, sensitivity_report, usefulness_hits, usefulness_report, wer,
    CaptionRecord, CategoryLexicon, ControllabilityReport, ControllabilityRow, Ratio, SensitivityReport, SensitivityRow,
    UsefulnessRecord, UsefulnessReport, UsefulnessRow,
};
use attncap::tensor::{finite_diff_report, seeded_rng, DenseArray};
use attncap::text::{build_vocab, content_word_set, tokenize, StopwordList, TokenSequence, Vocabulary, END_ID, START_ID};
use attncap::vqa::{QuestionIds, VqaConfig, VqaModel, VqaSample, VqaTrainConfig};
use common::*;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::seq::SliceRandom;
use rand::Rng as _;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

// 1 -------------------------------------------------------------------------

fn captioner_fd(seed: u64, grid: usize, d: usize, v: usize) -> f64 {
    let cfg = CaptionerConfig {
        regions: grid * grid,
        feature_dim: d,
        vocab_size: v,
        max_len: 4,
        dropout_rate: 0.5,
        lambda: 0.3,
    };
    let m = Captioner::new(cfg, &mut seeded_rng(seed)).unwrap();
    let l = grid * grid;
    let imgs = [random_image(l, d, seed + 100), random_image(l, d, seed + 200)];
    let mut rng = seeded_rng(seed + 300);
    let seqs: Vec<TokenSequence> = (0..2)
        .map(|_| {
            let mut ids = vec![START_ID];
            ids.extend((0..3).map(|_| rng.gen_range(END_ID + 1..=v)));
            ids.push(END_ID);
            TokenSequence { ids }
        })
        .collect();
    let batch: Vec<_> = imgs.iter().zip(&seqs).collect();
    let method = InterfaceMethod::SelfAttending;
    let (_, grads) = m.loss_and_grads(&batch, &method, &mut seeded_rng(seed)).unwrap();
    let mut store = m.params.clone();
    store.set_grads(&grads, 1.0);
    let cfg = m.config.clone();
    finite_diff_report(
        |p| Captioner::batch_loss(&cfg, p, &batch, &method, &mut seeded_rng(seed)).unwrap(),
        &store,
        1e-5,
    )
    .max_relative_error
}

fn vqa_fd(seed: u64, adaption: bool) -> f64 {
    let cfg = VqaConfig {
        regions: 9,
        feature_dim: 4,
        vocab_size: 7,
        max_question_len: 4,
        coattention_dim: 3,
        hidden_dim: 5,
        num_answers: 4,
        adaption,
        adaption_dropout: 0.1,
        dropout_rate: 0.5,
    };
    let m = VqaModel::new(cfg, &mut seeded_rng(seed)).unwrap();
    let mut rng = seeded_rng(seed + 1);
    let f1 = random_features(9, 4, &mut rng);
    let f2 = random_features(9, 4, &mut rng);
    let q1 = QuestionIds(vec![3, 5, 4, 7]);
    let q2 = QuestionIds(vec![6, 3]);
    let batch = vec![
        VqaSample {
            features: &f1,
            question: &q1,
            answer: 2,
        },
        VqaSample {
            features: &f2,
            question: &q2,
            answer: 0,
        },
    ];
    let (_, grads) = m.loss_and_grads(&batch, &mut seeded_rng(seed)).unwrap();
    let mut store = m.params.clone();
    store.set_grads(&grads, 1.0);
    let c = m.config.clone();
    finite_diff_report(
        |p| VqaModel::batch_loss(&c, p, &batch, &mut seeded_rng(seed)).unwrap(),
        &store,
        1e-5,
    )
    .max_relative_error
}

fn gradient_checks() -> Outcome {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    let shapes = [(2, 2, 5), (3, 3, 6), (2, 4, 8), (3, 2, 7)];
    for seed in [11u64, 12, 13] {
        for &(grid, d, v) in &shapes {
            let e = captioner_fd(seed, grid, d, v);
            ensure(e < 1e-4, || format!("captioner seed {seed} L={} D={d} V={v}: {e:.3e}", grid * grid))?;
            worst = worst.max(e);
            checks += 1;
        }
        for adaption in [false, true] {
            let e = vqa_fd(seed, adaption);
            ensure(e < 1e-4, || format!("vqa seed {seed} adaption={adaption}: {e:.3e}"))?;
            worst = worst.max(e);
            checks += 1;
        }
    }
    let took = t0.elapsed();
    ensure(took < Duration::from_secs(60), || format!("took {took:?}"))?;
    Ok(format!("{checks} checks, worst relative error {worst:.2e}, {:.1}s", took.as_secs_f64()))
}

// 2 -------------------------------------------------------------------------

fn simplex_suite() -> Outcome {
    let counter = std::cell::Cell::new(0usize);
    let strategy = (any::<u64>(), 1usize..=4, 1usize..=4, 0.0f64..10.0, 0usize..8, 1usize..10, 1u32..=600, 1u32..=600);
    let result = runner(1000).run(&strategy, |(seed, grid, d, phi, steps, t, img_w, img_h)| {
        let mut rng = seeded_rng(seed);
        let check = |what: &str, w: &[f64]| -> Result<(), TestCaseError> {
            counter.set(counter.get() + 1);
            strict_simplex(w).map_err(|e| TestCaseError::fail(format!("{what}: {e}")))
        };
        let l = grid * grid;
        let m = random_captioner(grid, d, 6, 4, seed);
        let img = random_image(l, d, seed.wrapping_add(1));
        let h: Vec<f64> = (0..m.config.hidden()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let alpha = m.attend(&img, &h).unwrap();
        check("attend", alpha.as_slice())?;
        let ext = random_simplex(l, &mut rng);
        for method in [
            InterfaceMethod::SelfAttending,
            InterfaceMethod::Unlimited(ext.clone()),
            InterfaceMethod::Limited { alpha: ext.clone(), steps },
            InterfaceMethod::additive(ext.clone(), phi).unwrap(),
            InterfaceMethod::ControlUniform,
        ] {
            let eff = effective_attention(t, alpha.as_slice(), &method).unwrap();
            check(&method.label(), eff.as_slice())?;
        }

        let bw = rng.gen_range(1..=img_w);
        let bh = rng.gen_range(1..=img_h);
        let b = BoundingBox {
            x: rng.gen_range(0..=img_w - bw),
            y: rng.gen_range(0..=img_h - bh),
            w: bw,
            h: bh,
            category_id: 1,
            image_id: 1,
            ann_id: 1,
        };
        let sharpen = if rng.gen_bool(0.5) { Some(rng.gen_range(0.05..2.0)) } else { None };
        let box_grid = rng.gen_range(1..=16);
        check("box", box_to_attention(&b, img_w, img_h, box_grid, sharpen).unwrap().as_slice())?;

        let cfg = VqaConfig {
            regions: l,
            feature_dim: d,
            vocab_size: 8,
            max_question_len: 5,
            coattention_dim: 3,
            hidden_dim: 4,
            num_answers: 3,
            adaption: rng.gen_bool(0.5),
            adaption_dropout: 0.1,
            dropout_rate: 0.5,
        };
        let vqa = VqaModel::new(cfg, &mut rng).unwrap();
        let feats = random_features(l, d, &mut rng);
        let qlen = rng.gen_range(1..=5);
        let q = QuestionIds((0..qlen).map(|_| rng.gen_range(3..=8)).collect());
        let out = vqa.forward(&feats, &q).unwrap();
        for lvl in 0..3 {
            check("image co-attention", out.level_attentions[lvl].as_slice())?;
            let (words, pad) = out.question_attentions[lvl].split_at(qlen);
            check("question co-attention", words)?;
            prop_assert!(pad.iter().all(|&p| p == 0.0), "padded question positions carry weight");
        }
        Ok(())
    });
    let checked = counter.get();
    result.map_err(|e| e.to_string())?;
    Ok(format!("1000 random inputs, {checked} attention vectors strictly positive and summing to 1 within 1e-9"))
}

// 3 -------------------------------------------------------------------------

fn interface_identities() -> Outcome {
    let counter = std::cell::Cell::new((0usize, 0usize));
    let strategy = (any::<u64>(), 1usize..=4, 2usize..=5, 5usize..=12, 3usize..=9);
    runner(150)
        .run(&strategy, |(seed, grid, d, v, max_len)| {
            let l = grid * grid;
            let m = random_captioner(grid, d, v, max_len, seed);
            let img = random_image(l, d, seed.wrapping_mul(31).wrapping_add(7));
            let ext = random_simplex(l, &mut seeded_rng(seed ^ 0x55));
            let decode = |method: &InterfaceMethod| m.greedy_decode(&img, method, max_len).unwrap();
            let base = decode(&InterfaceMethod::SelfAttending);
            let ctrl = decode(&InterfaceMethod::ControlUniform);
            let pairs = [
                (base.clone(), decode(&InterfaceMethod::additive(ext.clone(), 0.0).unwrap()), "additive-0"),
                (base.clone(), decode(&InterfaceMethod::Limited { alpha: ext.clone(), steps: 0 }), "limited-0"),
                (ctrl, decode(&InterfaceMethod::Unlimited(uniform_attention(l).unwrap())), "unlimited(uniform)"),
            ];
            for (a, b, label) in &pairs {
                prop_assert_eq!(&a.tokens, &b.tokens, "{} caption", label);
                prop_assert_eq!(a.contexts.len(), b.contexts.len());
                for (za, zb) in a.contexts.iter().zip(&b.contexts) {
                    let gap = za.iter().zip(zb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                    prop_assert!(gap <= 1e-12, "{} z gap {}", label, gap);
                }
            }
            let (n, words) = counter.get();
            counter.set((n + 1, words + usize::from(base.word_ids().len() > 1)));
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    let (n, varied) = counter.get();
    Ok(format!("{n} model/input pairs ({varied} with captions of 2+ words), z within 1e-12 and captions identical"))
}

// 4 -------------------------------------------------------------------------

fn bx(w: u32, h: u32) -> BoundingBox {
    BoundingBox {
        x: 0,
        y: 0,
        w,
        h,
        category_id: 1,
        image_id: 1,
        ann_id: u64::from(w) * 1000 + u64::from(h),
    }
}

fn box_closed_forms() -> Outcome {
    let whole = box_to_attention(&bx(448, 448), 448, 448, 14, None).map_err(|e| e.to_string())?;
    let gap = whole.as_slice().iter().map(|v| (v - 1.0 / 196.0).abs()).fold(0.0, f64::max);
    ensure(gap <= 1e-12, || format!("whole image off uniform by {gap:e}"))?;

    let quarter = box_to_attention(&bx(224, 224), 448, 448, 14, None).map_err(|e| e.to_string())?;
    let e = std::f64::consts::E;
    let z = 49.0 * e + 147.0;
    let mut inside_mass = 0.0;
    for r in 0..14 {
        for c in 0..14 {
            let v = quarter.as_slice()[r * 14 + c];
            let want = if r < 7 && c < 7 { e / z } else { 1.0 / z };
            ensure((v - want).abs() <= 1e-12, || format!("quarter cell ({r},{c}) = {v}, want {want}"))?;
            if r < 7 && c < 7 {
                inside_mass += v;
            }
        }
    }
    ensure((inside_mass - 49.0 * e / z).abs() <= 1e-12, || format!("in-box mass {inside_mass}"))?;

    let candidates = [bx(50, 70), bx(54, 63), bx(60, 60), bx(55, 63), bx(54, 62), bx(120, 80)];
    let kept: Vec<(u32, u32)> = filter_boxes(&candidates, 54.45, 62.85, 32.0, 32.0)
        .iter()
        .map(|b| (b.w, b.h))
        .collect();
    ensure(kept == vec![(55, 63), (120, 80)], || format!("median filter kept {kept:?}"))?;
    let floor: Vec<(u32, u32)> = filter_boxes(&[bx(31, 40), bx(40, 31), bx(32, 32)], 0.0, 0.0, 32.0, 32.0)
        .iter()
        .map(|b| (b.w, b.h))
        .collect();
    ensure(floor == vec![(32, 32)], || format!("cell floor kept {floor:?}"))?;
    Ok(format!(
        "uniform within {gap:.1e}; quarter box in-box mass {inside_mass:.6}; median 54.45x62.85 keeps 55x63 and 120x80 only"
    ))
}

// 5 -------------------------------------------------------------------------

const POOL: [&str; 16] = [
    "a", "dog", "puppy", "hound", "pup", "canine", "bicycle", "bike", "cycle", "bikes", "tandem", "on", "red", "grass",
    "zebra", "the",
];

/// Two clusters (dog-like, bicycle-like) on separate axes so every k=5
/// expansion is exactly its own cluster; other words sit on a third axis.
fn clustered_lexicon(k: usize) -> (CategoryLexicon, BTreeMap<u64, (Vec<&'static str>, Vec<&'static str>)>) {
    let vocab = build_vocab(&[POOL.iter().filter(|w| **w != "zebra").map(|w| w.to_string()).collect()], 100).unwrap();
    let mut e = DenseArray::zeros(&[vocab.num_classes(), 4]);
    let dogs = ["dog", "puppy", "hound", "pup", "canine"];
    let bikes = ["bicycle", "bike", "cycle", "bikes", "tandem"];
    for (i, w) in dogs.iter().enumerate() {
        e.row_mut(vocab.id(w).unwrap()).copy_from_slice(&[1.0, 0.0, 0.05 * i as f64, 0.0]);
    }
    for (i, w) in bikes.iter().enumerate() {
        e.row_mut(vocab.id(w).unwrap()).copy_from_slice(&[0.0, 1.0, 0.05 * i as f64, 0.0]);
    }
    for w in ["a", "on", "red", "grass", "the"] {
        let id = vocab.id(w).unwrap();
        e.row_mut(id).copy_from_slice(&[0.0, 0.0, 0.0, 1.0 + id as f64]);
    }
    let cats = [(1u64, "dog"), (2, "bicycle"), (3, "zebra")];
    let lex = CategoryLexicon::build(cats, &vocab, &e, k).unwrap();
    let oracle = BTreeMap::from([(1, (vec!["dog"], dogs.to_vec())), (2, (vec!["bicycle"], bikes.to_vec()))]);
    (lex, oracle)
}

fn random_caption(rng: &mut attncap::tensor::Rng) -> Vec<String> {
    let n = rng.gen_range(1..=6);
    (0..n).map(|_| POOL.choose(rng).unwrap().to_string()).collect()
}

fn caption_fixture() -> Vec<CaptionRecord> {
    let mut rng = seeded_rng(2024);
    let methods = ["unlimited", "limited-6", "additive-3", "control"];
    (0..50)
        .map(|i| CaptionRecord {
            image_id: i / 3,
            source_id: format!("box:{i}"),
            method: methods.choose(&mut rng).unwrap().to_string(),
            box_caption: random_caption(&mut rng),
            control_caption: random_caption(&mut rng),
            self_caption: random_caption(&mut rng),
            category_id: [Some(1), Some(2), Some(3), None][rng.gen_range(0..4)],
        })
        .collect()
}

fn recount_sensitivity(records: &[CaptionRecord]) -> BTreeMap<String, (u64, u64, u64, f64, f64)> {
    let mut m: BTreeMap<String, (u64, u64, u64, f64, f64)> = BTreeMap::new();
    for r in records {
        let e = m.entry(r.method.clone()).or_default();
        e.0 += 1;
        if r.box_caption != r.self_caption {
            e.1 += 1;
        }
        if r.box_caption != r.control_caption {
            e.2 += 1;
        }
        e.3 += wer_oracle(&r.self_caption, &r.box_caption);
        e.4 += wer_oracle(&r.control_caption, &r.box_caption);
    }
    m
}

fn recount_control(
    records: &[CaptionRecord],
    k: usize,
    distinct: bool,
    oracle: &BTreeMap<u64, (Vec<&str>, Vec<&str>)>,
) -> BTreeMap<String, (u64, u64)> {
    let hit = |cat: u64, caption: &[String]| {
        let (base, cluster) = &oracle[&cat];
        if k == 1 {
            base.iter().all(|b| caption.iter().any(|w| w == b))
        } else {
            caption.iter().any(|w| cluster.contains(&w.as_str()))
        }
    };
    let mut m: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for r in records {
        let Some(cat) = r.category_id.filter(|c| oracle.contains_key(c)) else {
            continue;
        };
        if distinct && hit(cat, &r.self_caption) {
            continue;
        }
        let e = m.entry(r.method.clone()).or_default();
        e.1 += 1;
        if hit(cat, &r.box_caption) {
            e.0 += 1;
        }
    }
    m
}

/// Stems of the fixture's content words, written out by hand.
const STEMS: [(&str, &str); 10] = [
    ("dogs", "dog"),
    ("dog", "dog"),
    ("sleeping", "sleep"),
    ("sleeps", "sleep"),
    ("parked", "park"),
    ("park", "park"),
    ("bike", "bike"),
    ("running", "run"),
    ("red", "red"),
    ("grass", "grass"),
];
const STOP: [&str; 6] = ["the", "is", "what", "a", "on", "doing"];

fn usefulness_fixture() -> Vec<UsefulnessRecord> {
    let mut rng = seeded_rng(77);
    let pool: Vec<&str> = STEMS.iter().map(|(w, _)| *w).chain(STOP).collect();
    let mut pick = |n: std::ops::RangeInclusive<usize>| -> Vec<String> {
        let len = rng.gen_range(n);
        (0..len).map(|_| pool.choose(&mut rng).unwrap().to_string()).collect()
    };
    let methods = ["unlimited", "limited-6", "additive-3"];
    let levels = ["word", "phrase", "question"];
    (0..50)
        .map(|i| UsefulnessRecord {
            method: methods[i % 3].into(),
            level: levels[(i / 3) % 3].into(),
            caption: pick(1..=7),
            question: pick(1..=5),
            answer: pick(1..=2),
        })
        .collect()
}

fn recount_usefulness(records: &[UsefulnessRecord]) -> BTreeMap<(String, String), [u64; 4]> {
    let set = |ws: &[String]| -> BTreeSet<&str> {
        ws.iter()
            .filter_map(|w| STEMS.iter().find(|(s, _)| s == w).map(|(_, st)| *st))
            .collect()
    };
    let mut m: BTreeMap<(String, String), [u64; 4]> = BTreeMap::new();
    for r in records {
        let (c, q, a) = (set(&r.caption), set(&r.question), set(&r.answer));
        let e = m.entry((r.method.clone(), r.level.clone())).or_default();
        let in_a = c.iter().any(|w| a.contains(w));
        let in_q = c.iter().any(|w| q.contains(w));
        e[0] += 1;
        e[1] += u64::from(in_a);
        e[2] += u64::from(in_q);
        e[3] += u64::from(in_a || in_q);
    }
    m
}

fn metric_oracles() -> Outcome {
    let mut rng = seeded_rng(99);
    let vocab = ["a", "b", "c", "d", "e"];
    for i in 0..500 {
        let rl = rng.gen_range(1..=7);
        let hl = rng.gen_range(0..=7);
        let r: Vec<String> = (0..rl).map(|_| vocab.choose(&mut rng).unwrap().to_string()).collect();
        let h: Vec<String> = (0..hl).map(|_| vocab.choose(&mut rng).unwrap().to_string()).collect();
        let got = wer(&r, &h).map_err(|e| e.to_string())?;
        let want = wer_oracle(&r, &h);
        ensure(got == want, || format!("pair {i}: wer {got} vs oracle {want} for {r:?} / {h:?}"))?;
    }

    // "the cat sat on the mat" vs "the cat is on the mat": 5/6, 3/5, 1/4, 0/3.
    // "a dog" vs {"a dog runs", "the dog"}: 2/2, 1/1; closest length 2.
    let h = vec![words("the cat sat on the mat"), words("a dog")];
    let r = vec![vec![words("the cat is on the mat")], vec![words("a dog runs"), words("the dog")]];
    let b = corpus_bleu(&h, &r).map_err(|e| e.to_string())?;
    let (p1, p2, p3) = (7.0f64 / 8.0, 4.0f64 / 6.0, 1.0f64 / 4.0);
    let want = [100.0 * p1, 100.0 * (p1 * p2).sqrt(), 100.0 * (p1 * p2 * p3).cbrt(), 0.0];
    for n in 0..4 {
        ensure((b.scores[n] - want[n]).abs() <= 1e-9, || format!("BLEU-{} {} vs {}", n + 1, b.scores[n], want[n]))?;
    }
    // "x y a b" vs "a b c d e f": 2/4 unigrams, 1/3 bigrams, BP = e^(1-6/4).
    let b = corpus_bleu(&[words("x y a b")], &[vec![words("a b c d e f")]]).map_err(|e| e.to_string())?;
    let bp = (1.0f64 - 1.5).exp();
    ensure((b.scores[0] - 100.0 * bp * 0.5).abs() <= 1e-9, || format!("short BLEU-1 {}", b.scores[0]))?;
    ensure((b.scores[1] - 100.0 * bp * (0.5f64 / 3.0).sqrt()).abs() <= 1e-9, || format!("short BLEU-2 {}", b.scores[1]))?;

    let records = caption_fixture();
    let sens = sensitivity_report(&records);
    let naive = recount_sensitivity(&records);
    ensure(sens.rows.len() == naive.len(), || "sensitivity method count".into())?;
    for row in &sens.rows {
        let (n, g, md, wg, wm) = naive[&row.method];
        ensure(row.general == Ratio::new(g, n) && row.method_diff == Ratio::new(md, n), || {
            format!("sensitivity {}: {:?} vs naive {g}/{md} of {n}", row.method, row)
        })?;
        ensure(
            (row.mean_wer_general - wg / n as f64).abs() < 1e-12 && (row.mean_wer_method - wm / n as f64).abs() < 1e-12,
            || format!("mean WER for {}", row.method),
        )?;
    }
    let mut control_rows = 0;
    for k in [1, 5] {
        let (lex, oracle) = clustered_lexicon(k);
        for distinct in [false, true] {
            let rep = controllability_report(&records, &lex, distinct);
            let naive = recount_control(&records, k, distinct, &oracle);
            let got: BTreeMap<String, (u64, u64)> = rep
                .rows
                .iter()
                .map(|r| (r.method.clone(), (r.overall.num, r.overall.den)))
                .collect();
            ensure(got == naive, || format!("k@{k} distinct={distinct}: {got:?} vs naive {naive:?}"))?;
            control_rows += got.len();
        }
    }
    let sw = StopwordList::default();
    let urecords = usefulness_fixture();
    let urep = usefulness_report(&urecords, &sw);
    let unaive = recount_usefulness(&urecords);
    let got: BTreeMap<(String, String), [u64; 4]> = urep
        .rows
        .iter()
        .map(|r| {
            (
                (r.method.clone(), r.level.clone()),
                [r.in_either.den, r.in_answer.num, r.in_question.num, r.in_either.num],
            )
        })
        .collect();
    ensure(got == unaive, || format!("usefulness {got:?} vs naive {unaive:?}"))?;
    Ok(format!(
        "500 WER pairs exact; 2 BLEU fixtures; 50-record recount matches ({} sensitivity rows, {control_rows} controllability rows, {} usefulness rows)",
        sens.rows.len(),
        got.len()
    ))
}

// 6 -------------------------------------------------------------------------

fn control_table(k: usize, distinct: bool, num: u64, den: u64) -> ControllabilityReport {
    ControllabilityReport {
        k,
        distinct,
        rows: vec![ControllabilityRow {
            method: "unlimited".into(),
            overall: Ratio::new(num, den),
            per_category: BTreeMap::new(),
        }],
        category_names: BTreeMap::new(),
        excluded_records: 0,
    }
}

fn paper_arithmetic() -> Outcome {
    let mut rendered = Vec::new();
    let sens = SensitivityReport {
        rows: vec![SensitivityRow {
            method: "unlimited".into(),
            general: Ratio::new(104_462, 117_798),
            method_diff: Ratio::new(62_021, 117_798),
            mean_wer_general: 0.0,
            mean_wer_method: 0.0,
        }],
    };
    rendered.push((sens.render_text(), vec!["88.68 (104462/117798)", "52.65 (62021/117798)"]));
    for (k, distinct, num, den, cell) in [
        (1, false, 33_643, 117_798, "28.56 (33643/117798)"),
        (5, false, 68_523, 117_798, "58.17 (68523/117798)"),
        (1, true, 7_833, 87_033, "9.00 (7833/87033)"),
        (5, true, 12_493, 58_407, "21.39 (12493/58407)"),
    ] {
        rendered.push((control_table(k, distinct, num, den).render_text(), vec![cell]));
    }
    let useful = UsefulnessReport {
        rows: vec![UsefulnessRow {
            method: "unlimited".into(),
            level: "word".into(),
            in_answer: Ratio::new(11_340, 42_871),
            in_question: Ratio::new(16_703, 42_871),
            in_either: Ratio::new(23_664, 42_871),
        }],
    };
    rendered.push((
        useful.render_text(),
        vec!["26.45 (11340/42871)", "38.96 (16703/42871)", "55.20 (23664/42871)"],
    ));
    let mut cells = 0;
    for (text, wanted) in &rendered {
        for w in wanted {
            ensure(text.contains(w), || format!("{w:?} missing from:\n{text}"))?;
            cells += 1;
        }
    }
    for (num, den, want) in [
        (104_462, 117_798, 88.68),
        (62_021, 117_798, 52.65),
        (33_643, 117_798, 28.56),
        (68_523, 117_798, 58.17),
        (7_833, 87_033, 9.00),
        (12_493, 58_407, 21.39),
        (11_340, 42_871, 26.45),
        (16_703, 42_871, 38.96),
        (23_664, 42_871, 55.20),
    ] {
        let got = percentage(num, den);
        ensure(got == want, || format!("{num}/{den} -> {got}, want {want}"))?;
    }
    Ok(format!("{cells} formatted cells and 9 percentages match to 2 decimals"))
}

// 7 -------------------------------------------------------------------------

fn worked_examples() -> Outcome {
    let vocab = build_vocab(&[words("bicycle bike motorcycle bicycles bikes dog fire hydrant")], 20).unwrap();
    let mut e = DenseArray::zeros(&[vocab.num_classes(), 3]);
    for (w, v) in [
        ("bicycle", [1.0, 0.0, 0.0]),
        ("bike", [2.0, 0.1, 0.0]),
        ("bikes", [1.0, 0.2, 0.0]),
        ("bicycles", [1.0, 0.3, 0.0]),
        ("motorcycle", [1.0, 0.4, 0.1]),
        ("dog", [0.0, 0.0, 1.0]),
        ("fire", [0.0, 1.0, 0.0]),
        ("hydrant", [0.0, 1.0, 0.2]),
    ] {
        e.row_mut(vocab.id(w).unwrap()).copy_from_slice(&v);
    }
    let rec = CaptionRecord {
        image_id: 1,
        source_id: "box:1".into(),
        method: "unlimited".into(),
        box_caption: tokenize("a bicycle is parked next to a bike"),
        control_caption: tokenize("a dog"),
        self_caption: tokenize("a dog is sitting on a leash on a bike"),
        category_id: Some(2),
    };
    let recs = std::slice::from_ref(&rec);
    let cats = [(2u64, "bicycle")];
    let sens = sensitivity_report(recs);
    ensure(sens.rows[0].general.pct() == 100.0, || format!("sensitivity {:?}", sens.rows[0]))?;
    let k1 = CategoryLexicon::build(cats, &vocab, &e, 1).map_err(|e| e.to_string())?;
    let k5 = CategoryLexicon::build(cats, &vocab, &e, 5).map_err(|e| e.to_string())?;
    let full1 = controllability_report(recs, &k1, false);
    ensure(full1.rows[0].overall == Ratio::new(1, 1), || "k@1 should match".into())?;
    let dist1 = controllability_report(recs, &k1, true);
    ensure(dist1.rows[0].overall == Ratio::new(1, 1), || "k@1 distinct should keep the record".into())?;
    let dist5 = controllability_report(recs, &k5, true);
    ensure(dist5.rows.is_empty(), || "k@5 distinct should discard the record".into())?;

    let sw = StopwordList::default();
    let caption = tokenize("a bicycle is parked next to a bike");
    let question = tokenize("What is the dog doing?");
    let answer = tokenize("sleeping");
    let set = |ws: &[String]| content_word_set(ws, &sw).into_iter().collect::<Vec<_>>().join(" ");
    ensure(set(&caption) == "bicycl bike next park", || format!("caption set {}", set(&caption)))?;
    ensure(set(&question) == "dog", || format!("question set {}", set(&question)))?;
    ensure(set(&answer) == "sleep", || format!("answer set {}", set(&answer)))?;
    let hits = usefulness_hits(&caption, &question, &answer, &sw);
    ensure(hits == (false, false, false), || format!("hits {hits:?}"))?;
    Ok("dog/bicycle: sensitivity 100%, k@1 hit, k@5 distinct discarded; stemmed sets {bicycl bike next park} / {dog} / {sleep}".into())
}

// 8 and 9 ---------------------------------------------------------------------

struct RunSummary {
    train: TrainReport,
    exp1: Exp1Output,
    exp2: Exp2Output,
    elapsed: Duration,
}

fn full_run(root: &Path) -> attncap::Result<RunSummary> {
    let t0 = Instant::now();
    let data = root.join("data");
    gen_dataset(&GenConfig::default(), &data)?;
    let ds = Dataset::load(&data)?;
    let vocab: Vocabulary = build_caption_vocab(&ds, 10_000)?;
    vocab.save(&root.join("vocab.txt"))?;
    let tcfg = TrainConfig {
        epochs: 50,
        target_accuracy: None,
        ..TrainConfig::default()
    };
    let (model, train) = train_captioner_on(&ds, &vocab, &CaptionerSetup::default(), &tcfg, |_| {})?;
    let captioner = CaptionerBundle { model, vocab };
    captioner.save(&root.join("captioner.satc"))?;
    let (vqa, _) = train_vqa_on(&ds, &VqaSetup::default(), &VqaTrainConfig::default(), |_| {})?;
    vqa.save(&root.join("vqa.satc"))?;
    let exp1 = run_exp1(&captioner, &ds, &Exp1Config::default())?;
    write_exp1(&exp1, &root.join("exp1"))?;
    let exp2 = run_exp2(&captioner, &vqa, &ds, &Exp2Config::default())?;
    write_exp2(&exp2, &root.join("exp2"))?;
    Ok(RunSummary {
        train,
        exp1,
        exp2,
        elapsed: t0.elapsed(),
    })
}

fn end_to_end(run: &RunSummary) -> Outcome {
    let best_acc = run.train.epochs.iter().map(|e| e.train_accuracy).fold(0.0, f64::max);
    let first = run.train.epochs.iter().find(|e| e.train_accuracy >= 0.90).map(|e| e.epoch);
    let unlimited = run.exp1.controllability_pct(1, "unlimited").ok_or("no unlimited k@1 row")?;
    let control = run.exp1.controllability_pct(1, "control").ok_or("no control k@1 row")?;
    let mut level_notes = Vec::new();
    let mut levels_ok = true;
    for m in &run.exp2.usefulness.rows {
        if m.level != "word" {
            continue;
        }
        let word = m.in_either.pct();
        let phrase = run.exp2.in_either_pct(&m.method, "phrase").ok_or("no phrase row")?;
        levels_ok &= word >= phrase;
        level_notes.push(format!("{} word {word:.2} / phrase {phrase:.2}", m.method));
    }
    ensure(!level_notes.is_empty(), || "no word-level usefulness rows".into())?;
    let detail = format!(
        "peak teacher-forced accuracy {best_acc:.4} (>= 0.90 first at epoch {}); k@1 unlimited {unlimited:.2} vs control {control:.2}; {}; {:.0}s",
        first.map_or("-".into(), |e| e.to_string()),
        level_notes.join(", "),
        run.elapsed.as_secs_f64()
    );
    ensure(first.is_some(), || format!("accuracy never reached 0.90: {detail}"))?;
    ensure(unlimited >= control + 20.0, || format!("controllability gap too small: {detail}"))?;
    ensure(levels_ok, || format!("phrase-level usefulness beats word-level: {detail}"))?;
    ensure(run.elapsed < Duration::from_secs(15 * 60), || format!("too slow: {detail}"))?;
    Ok(detail)
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism(a: &Path, b: &Path) -> Outcome {
    let fa = files_under(a);
    let fb = files_under(b);
    ensure(fa == fb, || format!("file sets differ: {fa:?} vs {fb:?}"))?;
    let mut bytes = 0;
    for rel in &fa {
        let x = std::fs::read(a.join(rel)).unwrap();
        let y = std::fs::read(b.join(rel)).unwrap();
        ensure(x == y, || format!("{} differs between runs", rel.display()))?;
        bytes += x.len();
    }
    for needed in ["vocab.txt", "captioner.satc", "vqa.satc", "exp1/captions.jsonl", "exp1/report.txt", "exp2/report.json"] {
        ensure(fa.contains(&PathBuf::from(needed)), || format!("{needed} was not written"))?;
    }
    Ok(format!("{} files ({bytes} bytes) byte-identical across two runs", fa.len()))
}

// ---------------------------------------------------------------------------

fn report(n: u32, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into());
        Err(format!("panic: {msg}"))
    });
    match outcome {
        Ok(detail) => {
            println!("criterion {n} ({name}): PASS: {detail}");
            true
        }
        Err(why) => {
            println!("criterion {n} ({name}): FAIL: {why}");
            false
        }
    }
}

fn main() {
    let mut ok = true;
    ok &= report(1, "gradient correctness", gradient_checks);
    ok &= report(2, "simplex suite", simplex_suite);
    ok &= report(3, "interface identities", interface_identities);
    ok &= report(4, "box closed forms", box_closed_forms);
    ok &= report(5, "metric oracles", metric_oracles);
    ok &= report(6, "report arithmetic", paper_arithmetic);
    ok &= report(7, "worked examples", worked_examples);

    let tmp = tempfile::tempdir().expect("temp dir");
    let (a, b) = (tmp.path().join("run-a"), tmp.path().join("run-b"));
    let first = full_run(&a);
    ok &= report(8, "end-to-end toy behavior", || end_to_end(&first.map_err(|e| e.to_string())?));
    ok &= report(9, "determinism", || {
        full_run(&b).map_err(|e| e.to_string())?;
        determinism(&a, &b)
    });
    if !ok {
        std::process::exit(1);
    }
}
