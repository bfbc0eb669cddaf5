use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attncap::boxes::{annotation_attention, read_attention_jsonl, write_attention_jsonl, AnnotationSet};
use attncap::captioner::TrainConfig;
use attncap::data::{gen_dataset, load_captions, Dataset, FeatureSet, GenConfig};
use attncap::experiments::{
    build_caption_vocab, run_exp1, run_exp2, train_captioner_on, train_vqa_on, write_exp1, write_exp2, CaptionerBundle,
    CaptionerSetup, Exp1Config, Exp2Config, VqaBundle, VqaSetup,
};
use attncap::interface::{AttentionVector, MethodSpec};
use attncap::render::{render_attention, write_heatmap};
use attncap::text::{build_vocab, tokenize, Vocabulary};
use attncap::vqa::VqaTrainConfig;
use attncap::Error;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

mod config;

/// A failed command: message plus process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }

    /// Errors while reading or validating a checkpoint.
    fn checkpoint(e: Error) -> Self {
        Self {
            code: 4,
            msg: e.to_string(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Format(_) | Error::Corruption(_) => 4,
            Error::Data { .. } | Error::Io { .. } | Error::Domain(_) | Error::Dimension(_) => 3,
            Error::Training(_) | Error::Contract(_) => 1,
        };
        Self {
            code,
            msg: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Parser)]
#[command(name = "attncap", version, about = "Attention-controllable captioning and co-attention VQA on grid features")]
struct Cli {
    /// TOML file with one table per subcommand, e.g. [train-captioner].
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a caption vocabulary file.
    BuildVocab(BuildVocabArgs),
    /// Write a synthetic scene dataset.
    GenData(GenDataArgs),
    /// Train the attentive captioner.
    TrainCaptioner(TrainCaptionerArgs),
    /// Train the co-attention VQA model.
    TrainVqa(TrainVqaArgs),
    /// Decode one caption under an interface method.
    Caption(CaptionArgs),
    /// Convert bounding boxes to attention vectors.
    BoxesToAttn(BoxesToAttnArgs),
    /// Box-attention experiment: sensitivity and controllability.
    RunExp1(RunExp1Args),
    /// Co-attention transfer experiment: usefulness.
    RunExp2(RunExp2Args),
    /// Render an attention vector or trace as a grayscale image.
    RenderAttn(RenderAttnArgs),
}

#[derive(Args, Serialize, Deserialize, Default)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    min_objects: Option<usize>,
    #[arg(long)]
    max_objects: Option<usize>,
    /// Smallest footprint side in cells.
    #[arg(long)]
    min_side: Option<usize>,
    #[arg(long)]
    max_side: Option<usize>,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args, Serialize, Deserialize, Default)]
struct BuildVocabArgs {
    /// Dataset directory; uses the training split's captions.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Caption file in the COCO captions layout; uses every caption.
    #[arg(long, conflicts_with = "data")]
    captions: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_size: Option<usize>,
}

#[derive(Args, Serialize, Deserialize, Default)]
struct TrainCaptionerArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Vocabulary file; built from the training captions when absent.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    max_words: Option<usize>,
    /// Seed for shuffling and dropout.
    #[arg(long)]
    seed: Option<u64>,
    /// Seed for weight initialisation.
    #[arg(long)]
    init_seed: Option<u64>,
    /// Epochs without a BLEU-4 gain before stopping (0 disables).
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    target_accuracy: Option<f64>,
    /// Per-epoch JSON lines log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
struct TrainVqaArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    init_seed: Option<u64>,
    #[arg(long)]
    coattention_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    top_answers: Option<usize>,
    #[arg(long)]
    max_question_len: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Feed raw image features to the co-attention layer.
    #[arg(long)]
    no_adaption: bool,
    #[arg(long)]
    target_accuracy: Option<f64>,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
struct CaptionArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset directory holding features.json.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Feature file with L×D features per image.
    #[arg(long, conflicts_with = "data")]
    features_file: Option<PathBuf>,
    /// Image to caption; defaults to the first one.
    #[arg(long)]
    image_id: Option<u64>,
    /// self, unlimited, limited, additive or control.
    #[arg(long)]
    method: Option<String>,
    /// Steps that use the external attention (limited).
    #[arg(long)]
    fix_steps: Option<usize>,
    /// Weight of the external attention (additive).
    #[arg(long)]
    phi: Option<f64>,
    /// External attention: JSON lines records or a JSON array of weights.
    #[arg(long)]
    attn_file: Option<PathBuf>,
    /// Record to take from the attention file; defaults to the first for the image.
    #[arg(long)]
    ann_id: Option<u64>,
    /// Write the attention trace and caption as JSON.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
struct BoxesToAttnArgs {
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    grid: Option<usize>,
    /// Softmax temperature below 1 sharpens the box attention.
    #[arg(long)]
    sharpen: Option<f64>,
    /// Keep every box instead of applying the median filter.
    #[arg(long)]
    no_filter: bool,
}

#[derive(Args, Serialize, Deserialize, Default)]
struct RunExp1Args {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated method labels, e.g. unlimited,limited-3,additive-1.
    #[arg(long)]
    methods: Option<String>,
    /// Comma-separated k values for controllability.
    #[arg(long)]
    ks: Option<String>,
    #[arg(long)]
    sharpen: Option<f64>,
}

#[derive(Args, Serialize, Deserialize, Default)]
struct RunExp2Args {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    vqa_checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    methods: Option<String>,
    /// Question type to evaluate.
    #[arg(long)]
    qtype: Option<String>,
}

#[derive(Args, Serialize, Deserialize, Default)]
struct RenderAttnArgs {
    /// Attention records (JSON lines) or a trace written by `caption --trace-out`.
    #[arg(long)]
    attn_file: Option<PathBuf>,
    /// Record number in a JSON lines file.
    #[arg(long)]
    index: Option<usize>,
    #[arg(long, conflicts_with = "index")]
    ann_id: Option<u64>,
    /// Render one step of a trace instead of the sum.
    #[arg(long)]
    step: Option<usize>,
    #[arg(long)]
    upscale: Option<usize>,
    /// PGM output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a PNG.
    #[arg(long)]
    png: Option<PathBuf>,
}

fn need<T>(v: Option<T>, flag: &str) -> Result<T, Failure> {
    v.ok_or_else(|| Failure::usage(format!("missing required option --{flag}")))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn append_log(log: &mut Option<String>, line: &impl Serialize) {
    if let Some(buf) = log {
        buf.push_str(&serde_json::to_string(line).expect("serializable"));
        buf.push('\n');
    }
}

fn flush_log(path: Option<&PathBuf>, log: Option<String>) -> CmdResult {
    if let (Some(p), Some(text)) = (path, log) {
        std::fs::write(p, text).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?;
    }
    Ok(())
}

fn gen_data(a: GenDataArgs) -> CmdResult {
    let out = need(a.out, "out")?;
    let d = GenConfig::default();
    let cfg = GenConfig {
        seed: a.seed.unwrap_or(d.seed),
        scenes: a.scenes.unwrap_or(d.scenes),
        min_objects: a.min_objects.unwrap_or(d.min_objects),
        max_objects: a.max_objects.unwrap_or(d.max_objects),
        min_side: a.min_side.unwrap_or(d.min_side),
        max_side: a.max_side.unwrap_or(d.max_side),
        grid: a.grid.unwrap_or(d.grid),
        dim: a.dim.unwrap_or(d.dim),
        image_size: d.image_size,
        noise: a.noise.unwrap_or(d.noise),
    };
    let m = gen_dataset(&cfg, &out)?;
    eprintln!(
        "wrote {} scenes to {} ({} train, {} val)",
        m.scenes,
        out.display(),
        m.train.len(),
        m.val.len()
    );
    Ok(())
}

fn build_vocab_cmd(a: BuildVocabArgs) -> CmdResult {
    let out = need(a.out, "out")?;
    let max = a.max_size.unwrap_or(10_000);
    let vocab = match (a.data, a.captions) {
        (Some(dir), _) => build_caption_vocab(&Dataset::load(&dir)?, max)?,
        (None, Some(file)) => {
            let caps: Vec<Vec<String>> = load_captions(&file)?.values().flatten().map(|c| tokenize(c)).collect();
            build_vocab(&caps, max)?
        }
        (None, None) => return Err(Failure::usage("one of --data or --captions is required")),
    };
    vocab.save(&out)?;
    eprintln!("{} words written to {}", vocab.size(), out.display());
    Ok(())
}

fn train_captioner_cmd(a: TrainCaptionerArgs) -> CmdResult {
    let ds = Dataset::load(&need(a.data, "data")?)?;
    let out = need(a.out, "out")?;
    let setup_d = CaptionerSetup::default();
    let setup = CaptionerSetup {
        max_words: a.max_words.unwrap_or(setup_d.max_words),
        dropout_rate: a.dropout.unwrap_or(setup_d.dropout_rate),
        lambda: a.lambda.unwrap_or(setup_d.lambda),
        init_seed: a.init_seed.unwrap_or(setup_d.init_seed),
    };
    let d = TrainConfig::default();
    let tcfg = TrainConfig {
        epochs: a.epochs.unwrap_or(d.epochs),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        learning_rate: a.learning_rate.unwrap_or(d.learning_rate),
        seed: a.seed.unwrap_or(d.seed),
        patience: a.patience.unwrap_or(d.patience),
        target_accuracy: a.target_accuracy.or(d.target_accuracy),
        ..d
    };
    let vocab = match &a.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => build_caption_vocab(&ds, 10_000)?,
    };
    let mut log = a.log.as_ref().map(|_| String::new());
    let (model, report) = train_captioner_on(&ds, &vocab, &setup, &tcfg, |e| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  acc {:.4}  bleu-4 {:.2}",
            e.epoch, e.train_loss, e.train_accuracy, e.bleu[3]
        );
        append_log(&mut log, e);
    })?;
    flush_log(a.log.as_ref(), log)?;
    CaptionerBundle { model, vocab }.save(&out)?;
    eprintln!("best epoch {}; checkpoint {}", report.best_epoch, out.display());
    Ok(())
}

fn train_vqa_cmd(a: TrainVqaArgs) -> CmdResult {
    let ds = Dataset::load(&need(a.data, "data")?)?;
    let out = need(a.out, "out")?;
    let sd = VqaSetup::default();
    let setup = VqaSetup {
        max_question_len: a.max_question_len.unwrap_or(sd.max_question_len),
        coattention_dim: a.coattention_dim.unwrap_or(sd.coattention_dim),
        hidden_dim: a.hidden_dim.unwrap_or(sd.hidden_dim),
        top_answers: a.top_answers.unwrap_or(sd.top_answers),
        adaption: !a.no_adaption,
        dropout_rate: a.dropout.unwrap_or(sd.dropout_rate),
        init_seed: a.init_seed.unwrap_or(sd.init_seed),
    };
    let d = VqaTrainConfig::default();
    let tcfg = VqaTrainConfig {
        epochs: a.epochs.unwrap_or(d.epochs),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        learning_rate: a.learning_rate.unwrap_or(d.learning_rate),
        seed: a.seed.unwrap_or(d.seed),
        target_accuracy: a.target_accuracy.or(d.target_accuracy),
    };
    let mut log = a.log.as_ref().map(|_| String::new());
    let (bundle, _) = train_vqa_on(&ds, &setup, &tcfg, |e| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  acc {:.4}  val {:.4}",
            e.epoch, e.train_loss, e.train_accuracy, e.val_accuracy
        );
        append_log(&mut log, e);
    })?;
    flush_log(a.log.as_ref(), log)?;
    bundle.save(&out)?;
    eprintln!("checkpoint {}", out.display());
    Ok(())
}

/// External attention from a JSON array of weights or from attention records.
fn load_external(path: &Path, image_id: u64, ann_id: Option<u64>) -> Result<AttentionVector, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    if text.trim_start().starts_with('[') {
        let w: Vec<f64> = serde_json::from_str(&text).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        return Ok(AttentionVector::new(w)?);
    }
    let records = read_attention_jsonl(path)?;
    let rec = records
        .into_iter()
        .find(|r| match ann_id {
            Some(id) => r.ann_id == id,
            None => r.image_id == image_id,
        })
        .ok_or_else(|| Error::Data {
            path: path.to_path_buf(),
            msg: match ann_id {
                Some(id) => format!("no record with ann_id {id}"),
                None => format!("no record for image {image_id}"),
            },
        })?;
    Ok(AttentionVector::new(rec.alpha)?)
}

fn parse_method(a: &CaptionArgs) -> Result<MethodSpec, Failure> {
    let name = a.method.as_deref().unwrap_or("self");
    match name {
        "self" => Ok(MethodSpec::SelfAttending),
        "unlimited" => Ok(MethodSpec::Unlimited),
        "control" => Ok(MethodSpec::Control),
        "limited" => Ok(MethodSpec::Limited(need(a.fix_steps, "fix-steps")?)),
        "additive" => {
            let phi = need(a.phi, "phi")?;
            if !phi.is_finite() || phi < 0.0 {
                return Err(Failure::usage("--phi must be a finite non-negative number"));
            }
            Ok(MethodSpec::Additive(phi))
        }
        other => other
            .parse()
            .map_err(|_| Failure::usage(format!("unknown method {other:?}; use self, unlimited, limited, additive or control"))),
    }
}

#[derive(Serialize)]
struct TraceFile<'a> {
    image_id: u64,
    method: String,
    caption: String,
    betas: &'a [f64],
    trace: Vec<Vec<f64>>,
}

fn caption_cmd(a: CaptionArgs) -> CmdResult {
    let spec = parse_method(&a)?;
    let features = match (&a.data, &a.features_file) {
        (Some(dir), _) => FeatureSet::load(&dir.join(attncap::data::FEATURES_FILE))?,
        (None, Some(f)) => FeatureSet::load(f)?,
        (None, None) => return Err(Failure::usage("one of --data or --features-file is required")),
    };
    let ckpt = need(a.checkpoint.clone(), "checkpoint")?;
    let bundle = CaptionerBundle::load(&ckpt, Some(features.grid * features.grid)).map_err(Failure::checkpoint)?;
    let image_id = match a.image_id {
        Some(id) => id,
        None => *features
            .images
            .keys()
            .next()
            .ok_or_else(|| Failure::usage("feature file holds no images"))?,
    };
    let image = features.get(image_id).ok_or_else(|| Error::Data {
        path: a.data.clone().or(a.features_file.clone()).unwrap_or_default(),
        msg: format!("no image {image_id}"),
    })?;
    let external = if spec.needs_external() {
        let path = a
            .attn_file
            .as_ref()
            .ok_or_else(|| Failure::usage(format!("method {spec} needs --attn-file")))?;
        Some(load_external(path, image_id, a.ann_id)?)
    } else {
        None
    };
    let method = spec.bind(external.as_ref())?;
    let result = bundle.model.greedy_decode(image, &method, bundle.model.config.max_len)?;
    let caption = bundle.vocab.decode(result.word_ids()).join(" ");
    println!("{caption}");
    if let Some(p) = &a.trace_out {
        let trace = (0..result.attention_trace.rows())
            .map(|r| result.attention_trace.row(r).to_vec())
            .collect();
        write_json(
            p,
            &TraceFile {
                image_id,
                method: spec.to_string(),
                caption,
                betas: &result.betas,
                trace,
            },
        )?;
    }
    Ok(())
}

fn boxes_to_attn_cmd(a: BoxesToAttnArgs) -> CmdResult {
    let set = AnnotationSet::load(&need(a.annotations, "annotations")?)?;
    let out = need(a.out, "out")?;
    let records = annotation_attention(&set, a.grid.unwrap_or(14), a.sharpen, !a.no_filter)?;
    write_attention_jsonl(&out, &records)?;
    eprintln!("{} of {} boxes written to {}", records.len(), set.boxes.len(), out.display());
    Ok(())
}

fn parse_methods(list: &str) -> Result<Vec<MethodSpec>, Failure> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e: Error| Failure::usage(e.to_string())))
        .collect()
}

fn run_exp1_cmd(a: RunExp1Args) -> CmdResult {
    let ds = Dataset::load(&need(a.data, "data")?)?;
    let out = need(a.out, "out")?;
    let ckpt = need(a.checkpoint, "checkpoint")?;
    let bundle = CaptionerBundle::load(&ckpt, Some(ds.features.grid * ds.features.grid)).map_err(Failure::checkpoint)?;
    let mut cfg = Exp1Config {
        sharpen: a.sharpen,
        ..Exp1Config::default()
    };
    if let Some(m) = &a.methods {
        cfg.methods = parse_methods(m)?;
    }
    if let Some(ks) = &a.ks {
        cfg.ks = ks
            .split(',')
            .map(|k| k.trim().parse().map_err(|_| Failure::usage(format!("bad k value {k:?}"))))
            .collect::<Result<_, _>>()?;
    }
    let result = run_exp1(&bundle, &ds, &cfg)?;
    write_exp1(&result, &out)?;
    print!("{}", result.render_text());
    Ok(())
}

fn run_exp2_cmd(a: RunExp2Args) -> CmdResult {
    let ds = Dataset::load(&need(a.data, "data")?)?;
    let out = need(a.out, "out")?;
    let regions = Some(ds.features.grid * ds.features.grid);
    let cap = CaptionerBundle::load(&need(a.checkpoint, "checkpoint")?, regions).map_err(Failure::checkpoint)?;
    let vqa = VqaBundle::load(&need(a.vqa_checkpoint, "vqa-checkpoint")?, regions).map_err(Failure::checkpoint)?;
    let mut cfg = Exp2Config::default();
    if let Some(m) = &a.methods {
        cfg.methods = parse_methods(m)?;
    }
    if let Some(q) = a.qtype {
        cfg.qtype = q;
    }
    let result = run_exp2(&cap, &vqa, &ds, &cfg)?;
    write_exp2(&result, &out)?;
    print!("{}", result.render_text());
    Ok(())
}

#[derive(Deserialize)]
struct TraceInput {
    trace: Vec<Vec<f64>>,
}

fn render_attn_cmd(a: RenderAttnArgs) -> CmdResult {
    let path = need(a.attn_file, "attn-file")?;
    let out = need(a.out, "out")?;
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    let data_err = |msg: String| Error::Data {
        path: path.clone(),
        msg,
    };
    let steps: Vec<Vec<f64>> = match serde_json::from_str::<TraceInput>(&text) {
        Ok(t) => match a.step {
            Some(s) => vec![t
                .trace
                .get(s)
                .cloned()
                .ok_or_else(|| data_err(format!("trace has {} steps, asked for step {s}", t.trace.len())))?],
            None => t.trace,
        },
        Err(_) => {
            let records = read_attention_jsonl(&path)?;
            let rec = match (a.ann_id, a.index) {
                (Some(id), _) => records.into_iter().find(|r| r.ann_id == id),
                (None, i) => records.into_iter().nth(i.unwrap_or(0)),
            }
            .ok_or_else(|| data_err("requested record not found".into()))?;
            vec![rec.alpha]
        }
    };
    let l = steps.first().map_or(0, Vec::len);
    let grid = (l as f64).sqrt().round() as usize;
    if grid * grid != l || l == 0 {
        return Err(data_err(format!("{l} weights do not form a square grid")).into());
    }
    let img = render_attention(&steps, grid, a.upscale.unwrap_or(32))?;
    write_heatmap(&img, &out, a.png.as_deref())?;
    eprintln!("{}×{} heatmap written to {}", img.width, img.height, out.display());
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    let file = cli.config.as_deref().map(config::load).transpose()?;
    let f = file.as_ref();
    use config::resolve;
    match cli.command {
        Command::BuildVocab(a) => build_vocab_cmd(resolve(&a, f, "build-vocab")?),
        Command::GenData(a) => gen_data(resolve(&a, f, "gen-data")?),
        Command::TrainCaptioner(a) => train_captioner_cmd(resolve(&a, f, "train-captioner")?),
        Command::TrainVqa(a) => train_vqa_cmd(resolve(&a, f, "train-vqa")?),
        Command::Caption(a) => caption_cmd(resolve(&a, f, "caption")?),
        Command::BoxesToAttn(a) => boxes_to_attn_cmd(resolve(&a, f, "boxes-to-attn")?),
        Command::RunExp1(a) => run_exp1_cmd(resolve(&a, f, "run-exp1")?),
        Command::RunExp2(a) => run_exp2_cmd(resolve(&a, f, "run-exp2")?),
        Command::RenderAttn(a) => render_attn_cmd(resolve(&a, f, "render-attn")?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
