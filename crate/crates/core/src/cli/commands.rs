use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Deserialize;
use serde_json::Value;

use super::config::ConfigFile;
use super::files::*;
use super::manifest::{RunManifest, MANIFEST_FILE};
use super::{BuildArgs, Cli, Command, DatasetCommand, EvalArgs, InferArgs, ReportArgs, TrainArgs, TrainStage};
use crate::data::{
    build_dpo_pair, build_sft_example, derive_seed, fixture_corpus, load_corpus, load_pairs, save_corpus,
    save_pairs, split_dataset, tokenize_pair, DialogSample, PerturbationRules, Tokenizer, Turn, IMAGE_PLACEHOLDER,
};
use crate::image::Image;
use crate::metrics::{
    evaluate_model, render_csv, render_table, score_responses, ActionLexicon, EchoResponder, EmbeddingProvider,
    EvalItem, EvalOptions, HashProvider, MetricReport, ModelEmbeddingProvider, ModelResponder,
};
use crate::model::{
    assemble_context, init_model, load_checkpoint, parse_groups, save_checkpoint, ModelConfig, ModelState,
    ParamGroup,
};
use crate::train::{train_stage1, train_stage2, DpoConfig, DpoExample, SftConfig, SftExample};

const DEFAULT_N_SAMPLES: usize = 24;
const DEFAULT_MAX_NEW_TOKENS: usize = 32;
const DEFAULT_PROVIDER_DIM: usize = 64;

pub(super) fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = ConfigFile::load(cli.config.as_deref())?;
    let seed = cfg.pick(cli.seed, "seed", 0u64)?;
    let ctx = Ctx {
        cfg,
        config_path: cli.config,
        seed,
    };
    match cli.command {
        Command::Dataset {
            command: DatasetCommand::Build(a),
        } => dataset_build(&ctx, a, out),
        Command::Train {
            stage: TrainStage::Sft(a),
        } => train_sft(&ctx, a, out),
        Command::Train {
            stage: TrainStage::Dpo(a),
        } => train_dpo(&ctx, a, out),
        Command::Eval(a) => eval(&ctx, a, out),
        Command::Report(a) => report(&ctx, a, out),
        Command::Infer(a) => infer(&ctx, a, out),
    }
}

struct Ctx {
    cfg: ConfigFile,
    config_path: Option<PathBuf>,
    seed: u64,
}

impl Ctx {
    fn manifest(&self, command: &str) -> RunManifest {
        RunManifest::new(command, self.config_path.as_deref(), self.seed)
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

/// Loads each sample's image; failures name the sample.
fn load_images(samples: &[DialogSample], base: &Path) -> Result<Vec<Image>> {
    samples
        .iter()
        .map(|s| {
            let p = s.image_path(base);
            Image::load(&p).with_context(|| format!("sample {}: cannot load image {}", s.id, p.display()))
        })
        .collect()
}

fn corpus_texts(samples: &[DialogSample]) -> Vec<&str> {
    samples
        .iter()
        .flat_map(|s| s.turns.iter().flat_map(|t| [t.user.as_str(), t.assistant.as_str()]))
        .collect()
}

fn dataset_build(ctx: &Ctx, a: BuildArgs, out: &mut dyn Write) -> Result<()> {
    let mut m = ctx.manifest("dataset build");
    create_dir(&a.out)?;
    let (samples, source) = if a.fixtures {
        let n = ctx.cfg.pick(a.n_samples, "n_samples", DEFAULT_N_SAMPLES)?;
        if n < 2 {
            bail!("--n-samples must be at least 2");
        }
        let (samples, images) = fixture_corpus(n, ctx.seed);
        create_dir(&a.out.join("images"))?;
        for (s, img) in samples.iter().zip(&images) {
            img.save_ppm(&s.image_path(&a.out))?;
        }
        m.set("n_samples", n);
        (samples, "fixtures")
    } else {
        let path = a.data.as_ref().expect("clap requires --data");
        let mut samples = load_corpus(path)?;
        m.input(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        load_images(&samples, base)?;
        // rewrite image references so they resolve from the output directory
        for s in &mut samples {
            let p = s.image_path(base);
            s.image = fs::canonicalize(&p)
                .with_context(|| format!("sample {}: image {}", s.id, p.display()))?
                .display()
                .to_string();
        }
        (samples, "corpus")
    };
    let ids: BTreeSet<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    if ids.len() != samples.len() {
        bail!("sample ids are not unique");
    }
    let n_test = ctx.cfg.pick(a.n_test, "n_test", samples.len().div_ceil(4))?;
    let (train, test) = split_dataset(&samples, ctx.seed, n_test)?;
    let rules = PerturbationRules::builtin();
    let pairs = train
        .iter()
        .map(|s| build_dpo_pair(s, &rules, derive_seed(ctx.seed, &s.id)))
        .collect::<crate::Result<Vec<_>>>()?;
    let vocab_size = ctx.cfg.model_config()?.vocab_size;
    let tok = Tokenizer::build(corpus_texts(&train), vocab_size)?;

    save_corpus(&samples, &a.out.join(CORPUS))?;
    save_corpus(&train, &a.out.join(TRAIN))?;
    save_corpus(&test, &a.out.join(TEST))?;
    save_pairs(&pairs, &a.out.join(PAIRS))?;
    tok.save(&a.out.join(VOCAB))?;
    let split = serde_json::json!({
        "train": train.iter().map(|s| &s.id).collect::<Vec<_>>(),
        "test": test.iter().map(|s| &s.id).collect::<Vec<_>>(),
    });
    fs::write(a.out.join(SPLIT), serde_json::to_string_pretty(&split)? + "\n")?;

    m.set("source", source);
    m.set("n_test", n_test);
    m.set("n_train", train.len());
    m.set("vocab_size", vocab_size);
    m.set("perturbation_rules_version", rules.version);
    for f in [CORPUS, TRAIN, TEST, PAIRS, VOCAB, SPLIT] {
        m.output(&a.out.join(f))?;
    }
    if a.fixtures {
        for s in &samples {
            m.output(&s.image_path(&a.out))?;
        }
    }
    m.write(&a.out)?;
    writeln!(
        out,
        "{} samples: {} train / {} test, {} preference pairs, vocabulary {} -> {}",
        samples.len(),
        train.len(),
        test.len(),
        pairs.len(),
        tok.len(),
        a.out.display()
    )?;
    Ok(())
}

fn load_vocab(path: &Path) -> Result<Tokenizer> {
    let p = if path.is_dir() { path.join(VOCAB) } else { path.to_path_buf() };
    Tokenizer::load(&p).with_context(|| format!("loading vocabulary {}", p.display()))
}

fn check_vocab(tok: &Tokenizer, cfg: &ModelConfig) -> Result<()> {
    if tok.len() > cfg.vocab_size {
        bail!("vocabulary has {} entries but the model only {}", tok.len(), cfg.vocab_size);
    }
    Ok(())
}

fn load_state(path: &Path) -> Result<ModelState> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Label recorded next to a checkpoint by the run that wrote it.
fn model_label_of(checkpoint: &Path) -> Option<String> {
    let m = checkpoint.parent()?.join(MANIFEST_FILE);
    RunManifest::read(&m).ok()?.model_label
}

fn trainable_set(ctx: &Ctx, flag: &Option<String>) -> Result<Option<BTreeSet<ParamGroup>>> {
    let raw = flag.clone().or_else(|| ctx.cfg.raw("trainable").map(String::from));
    match raw {
        None => Ok(None),
        Some(s) => {
            let g = parse_groups(&s)?;
            if g.is_empty() {
                bail!("--trainable lists no components");
            }
            Ok(Some(g))
        }
    }
}

fn record_model_config(m: &mut RunManifest, c: &ModelConfig) {
    m.set("model.vocab_size", c.vocab_size);
    m.set("model.d_model", c.d_model);
    m.set("model.n_layers", c.n_layers);
    m.set("model.n_heads", c.n_heads);
    m.set("model.max_seq", c.max_seq);
    m.set("model.patch_size", c.patch_size);
    m.set("model.n_visual_tokens", c.n_visual_tokens);
    m.set("model.d_vision", c.d_vision);
    m.set("model.lora_rank", c.lora_rank);
    m.set("model.lora_alpha", c.lora_alpha);
}

fn train_sft(ctx: &Ctx, a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    if a.beta.is_some() || a.reference_mode {
        bail!("--beta and --reference-mode apply to `train dpo` only");
    }
    let d = SftConfig::default();
    let cfg = SftConfig {
        epochs: ctx.cfg.pick(a.epochs, "epochs", d.epochs)?,
        peak_lr: ctx.cfg.pick(a.lr, "lr", d.peak_lr)?,
        warmup_ratio: ctx.cfg.pick(a.warmup_ratio, "warmup_ratio", d.warmup_ratio)?,
        batch_size: ctx.cfg.pick(a.batch_size, "batch_size", d.batch_size)?,
        seed: ctx.seed,
        trainable: trainable_set(ctx, &a.trainable)?,
    };
    cfg.validate()?;
    let mut m = ctx.manifest("train sft");
    let state = match &a.init {
        Some(p) => {
            m.input(p)?;
            load_state(p)?
        }
        None => init_model(&ctx.cfg.model_config()?, ctx.seed)?,
    };
    let tok = load_vocab(&a.data)?;
    check_vocab(&tok, &state.config)?;
    let train_path = a.data.join(TRAIN);
    let samples = load_corpus(&train_path)?;
    let images = load_images(&samples, &a.data)?;
    let examples = samples
        .iter()
        .zip(&images)
        .map(|(s, img)| SftExample::new(&build_sft_example(s, &tok)?, img, &state.config))
        .collect::<crate::Result<Vec<_>>>()?;
    m.input(&train_path)?;
    m.input(&a.data.join(VOCAB))?;

    let (state, log) = train_stage1(&examples, state, &cfg)?;
    let final_loss = log.final_loss().ok_or_else(|| anyhow!("no training steps ran"))?;
    if !final_loss.is_finite() {
        return Err(crate::Error::Numeric(format!("final loss {final_loss} is not finite")).into());
    }
    create_dir(&a.out)?;
    let ckpt = a.out.join(CHECKPOINT);
    save_checkpoint(&state, &ckpt)?;
    fs::write(a.out.join(TRAIN_LOG), log.to_jsonl())?;

    m.set("stage", "sft");
    m.set("epochs", cfg.epochs);
    m.set("lr", cfg.peak_lr);
    m.set("warmup_ratio", cfg.warmup_ratio);
    m.set("batch_size", cfg.batch_size);
    m.set("trainable", groups_str(&state.trainable_groups()));
    m.set("final_loss", final_loss);
    record_model_config(&mut m, &state.config);
    m.stage_label = Some(log.label.clone());
    m.model_label = Some(log.label.clone());
    m.output(&ckpt)?;
    m.output(&a.out.join(TRAIN_LOG))?;
    m.write(&a.out)?;
    writeln!(
        out,
        "{}: {} steps, loss {:.6} -> {:.6}, checkpoint {}",
        log.label,
        log.records.len(),
        log.first_loss().unwrap_or(f64::NAN),
        final_loss,
        ckpt.display()
    )?;
    Ok(())
}

fn groups_str(g: &BTreeSet<ParamGroup>) -> String {
    g.iter().map(|x| x.as_str()).collect::<Vec<_>>().join(",")
}

fn train_dpo(ctx: &Ctx, a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let Some(init) = &a.init else {
        bail!("stage-1 checkpoint required (pass --init <checkpoint>)");
    };
    let d = DpoConfig::default();
    let cfg = DpoConfig {
        beta: ctx.cfg.pick(a.beta, "beta", d.beta)?,
        epochs: ctx.cfg.pick(a.epochs, "epochs", d.epochs)?,
        peak_lr: ctx.cfg.pick(a.lr, "lr", d.peak_lr)?,
        warmup_ratio: ctx.cfg.pick(a.warmup_ratio, "warmup_ratio", d.warmup_ratio)?,
        batch_size: ctx.cfg.pick(a.batch_size, "batch_size", d.batch_size)?,
        seed: ctx.seed,
        trainable: trainable_set(ctx, &a.trainable)?,
        reference_mode: a.reference_mode || ctx.cfg.pick(None, "reference_mode", false)?,
    };
    cfg.validate()?;
    let mut m = ctx.manifest("train dpo");
    m.input(init)?;
    let state = load_state(init)?;
    let tok = load_vocab(&a.data)?;
    check_vocab(&tok, &state.config)?;
    let pairs_path = a.data.join(PAIRS);
    let pairs = load_pairs(&pairs_path)?;
    let mut examples = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let img_path = if Path::new(&p.image).is_absolute() {
            PathBuf::from(&p.image)
        } else {
            a.data.join(&p.image)
        };
        let img = Image::load(&img_path)
            .with_context(|| format!("sample {}: cannot load image {}", p.id, img_path.display()))?;
        examples.push(DpoExample::new(&tokenize_pair(p, &tok), &img, &state.config)?);
    }
    m.input(&pairs_path)?;
    m.input(&a.data.join(VOCAB))?;

    let (state, log) = train_stage2(&examples, state, &cfg)?;
    let final_loss = log.final_loss().ok_or_else(|| anyhow!("no training steps ran"))?;
    create_dir(&a.out)?;
    let ckpt = a.out.join(CHECKPOINT);
    save_checkpoint(&state, &ckpt)?;
    fs::write(a.out.join(TRAIN_LOG), log.to_jsonl())?;

    m.set("stage", "dpo");
    m.set("beta", cfg.beta);
    m.set("epochs", cfg.epochs);
    m.set("lr", cfg.peak_lr);
    m.set("warmup_ratio", cfg.warmup_ratio);
    m.set("batch_size", cfg.batch_size);
    m.set("reference_mode", cfg.reference_mode);
    m.set("trainable", groups_str(&state.trainable_groups()));
    m.set("final_loss", final_loss);
    m.set(
        "epoch_mean_advantage",
        log.epochs.iter().map(|e| e.mean_advantage).collect::<Vec<_>>(),
    );
    record_model_config(&mut m, &state.config);
    m.stage_label = Some(log.label.clone());
    m.model_label = Some(match model_label_of(init) {
        Some(prev) => format!("{prev} + {}", log.label),
        None => log.label.clone(),
    });
    m.output(&ckpt)?;
    m.output(&a.out.join(TRAIN_LOG))?;
    m.write(&a.out)?;
    writeln!(
        out,
        "{}: {} steps, loss {:.6} -> {:.6}, checkpoint {}",
        log.label,
        log.records.len(),
        log.first_loss().unwrap_or(f64::NAN),
        final_loss,
        ckpt.display()
    )?;
    Ok(())
}

fn provider_for(ctx: &Ctx, flag: &Option<String>, state: Option<&ModelState>, tok: &Tokenizer) -> Result<(String, Box<dyn EmbeddingProvider>)> {
    let name = flag
        .clone()
        .or_else(|| ctx.cfg.raw("provider").map(String::from))
        .unwrap_or_else(|| "model".into());
    let provider: Box<dyn EmbeddingProvider> = match name.as_str() {
        "hash" => Box::new(HashProvider::new(
            ctx.seed,
            ctx.cfg.pick(None, "provider_dim", DEFAULT_PROVIDER_DIM)?,
        )),
        "model" => {
            let state = state.ok_or_else(|| anyhow!("the model provider needs a checkpoint (--init)"))?;
            Box::new(ModelEmbeddingProvider::new(state, tok.clone())?)
        }
        other => bail!("unknown provider `{other}` (expected model or hash)"),
    };
    Ok((name, provider))
}

fn eval_items(dir: &Path) -> Result<Vec<EvalItem>> {
    let samples = load_corpus(&dir.join(TEST))?;
    let images = load_images(&samples, dir)?;
    samples
        .iter()
        .zip(images)
        .map(|(s, img)| Ok(EvalItem::from_sample(s, img)?))
        .collect()
}

fn eval(ctx: &Ctx, a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let mut m = ctx.manifest("eval");
    let tok = load_vocab(&a.data)?;
    let state = match &a.init {
        Some(p) => {
            m.input(p)?;
            Some(load_state(p)?)
        }
        None => None,
    };
    if let Some(s) = &state {
        check_vocab(&tok, &s.config)?;
    }
    let items = eval_items(&a.data)?;
    m.input(&a.data.join(TEST))?;
    let (provider_name, provider) = provider_for(ctx, &a.provider, state.as_ref(), &tok)?;
    let lexicon = ActionLexicon::builtin();
    let max_new = ctx.cfg.pick(a.max_new_tokens, "max_new_tokens", DEFAULT_MAX_NEW_TOKENS)?;
    let opts = EvalOptions {
        bertscore_baseline: ctx.cfg.get("bertscore_baseline")?,
        max_new_tokens: (!a.echo).then_some(max_new),
    };
    let report = if a.echo {
        let mut r = evaluate_model(&EchoResponder, &items, provider.as_ref(), &lexicon, &opts)?;
        if let Some(l) = &a.label {
            r.model = l.clone();
        }
        r
    } else {
        let state = state.as_ref().expect("clap requires --init without --echo");
        let label = a
            .label
            .clone()
            .or_else(|| a.init.as_deref().and_then(model_label_of))
            .unwrap_or_else(|| "model".into());
        let responder = ModelResponder {
            label,
            state,
            tokenizer: &tok,
            max_new_tokens: max_new,
        };
        evaluate_model(&responder, &items, provider.as_ref(), &lexicon, &opts)?
    };
    report.validate()?;
    create_dir(&a.out)?;
    fs::write(a.out.join(REPORT_JSON), report.to_json() + "\n")?;
    let table = render_table(std::slice::from_ref(&report))?;
    fs::write(a.out.join(REPORT_TXT), &table)?;
    m.set("provider", provider_name);
    m.set("provider_name", provider.name());
    m.set("max_new_tokens", opts.max_new_tokens);
    m.set("echo", a.echo);
    m.set("lexicon_version", lexicon.version);
    m.model_label = Some(report.model.clone());
    m.output(&a.out.join(REPORT_JSON))?;
    m.output(&a.out.join(REPORT_TXT))?;
    m.write(&a.out)?;
    write!(out, "{table}")?;
    Ok(())
}

#[derive(Deserialize)]
struct BaselineResponse {
    id: String,
    response: String,
}

#[derive(Deserialize)]
struct BaselineSet {
    model: String,
    responses: Vec<BaselineResponse>,
}

fn report(ctx: &Ctx, a: ReportArgs, out: &mut dyn Write) -> Result<()> {
    let mut m = ctx.manifest("report");
    let mut rows = Vec::new();
    let mut baselines = Vec::new();
    for p in &a.inputs {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        m.input(p)?;
        if v.get("bertscore_p").is_some() {
            rows.push(MetricReport::from_json(&text).with_context(|| format!("in report {}", p.display()))?);
        } else if v.get("responses").is_some() && v.get("model").is_some() {
            let b: BaselineSet =
                serde_json::from_value(v).with_context(|| format!("baseline file {}", p.display()))?;
            baselines.push((rows.len() + baselines.len(), b));
        } else {
            bail!("{}: neither a metric report nor a baseline response set", p.display());
        }
    }
    if !baselines.is_empty() {
        let dir = a
            .data
            .as_ref()
            .ok_or_else(|| anyhow!("scoring baselines needs --data <dataset dir>"))?;
        let tok = load_vocab(dir)?;
        let state = a.init.as_deref().map(load_state).transpose()?;
        let (_, provider) = provider_for(ctx, &a.provider, state.as_ref(), &tok)?;
        let items = eval_items(dir)?;
        let lexicon = ActionLexicon::builtin();
        let opts = EvalOptions {
            bertscore_baseline: ctx.cfg.get("bertscore_baseline")?,
            max_new_tokens: None,
        };
        let by_id: BTreeMap<&str, &EvalItem> = items.iter().map(|it| (it.id.as_str(), it)).collect();
        for (slot, b) in baselines {
            if b.responses.is_empty() {
                bail!("baseline {:?} has no responses", b.model);
            }
            let mut seen = BTreeSet::new();
            let mut sel = Vec::new();
            let mut resp = Vec::new();
            for r in &b.responses {
                let it = by_id
                    .get(r.id.as_str())
                    .ok_or_else(|| anyhow!("baseline {:?}: id {} is not in the test split", b.model, r.id))?;
                if !seen.insert(r.id.as_str()) {
                    bail!("baseline {:?}: duplicate response for {}", b.model, r.id);
                }
                sel.push((*it).clone());
                resp.push(r.response.clone());
            }
            let row = score_responses(&b.model, &sel, &resp, provider.as_ref(), &lexicon, &opts)?;
            rows.insert(slot.min(rows.len()), row);
        }
    }
    let table = render_table(&rows)?;
    let csv = render_csv(&rows)?;
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        fs::write(dir.join(TABLE_TXT), &table)?;
        fs::write(dir.join(TABLE_CSV), &csv)?;
        m.set("rows", rows.iter().map(|r| r.model.clone()).collect::<Vec<_>>());
        m.output(&dir.join(TABLE_TXT))?;
        m.output(&dir.join(TABLE_CSV))?;
        m.write(dir)?;
    }
    write!(out, "{table}")?;
    Ok(())
}

fn infer(ctx: &Ctx, a: InferArgs, out: &mut dyn Write) -> Result<()> {
    let state = load_state(&a.init)?;
    let tok = load_vocab(&a.vocab)?;
    check_vocab(&tok, &state.config)?;
    let image = Image::load(&a.image).with_context(|| format!("loading image {}", a.image.display()))?;
    let max_new = ctx.cfg.pick(a.max_new_tokens, "max_new_tokens", DEFAULT_MAX_NEW_TOKENS)?;
    let mut history: Vec<Turn> = Vec::new();
    for (k, q) in a.question.iter().enumerate() {
        let has_placeholder = crate::data::pieces(q).iter().any(|p| p == IMAGE_PLACEHOLDER);
        let q = if k == 0 && !has_placeholder {
            format!("{IMAGE_PLACEHOLDER} {q}")
        } else {
            q.clone()
        };
        let ids = crate::data::dialogue_prompt_tokens(&history, &q, &tok);
        let c = assemble_context(&ids, Some(&image), state.config.n_visual_tokens)?;
        let answer = tok.detokenize(&state.generate(&c, max_new)?);
        writeln!(out, "{answer}")?;
        history.push(Turn {
            user: q,
            assistant: answer,
        });
    }
    Ok(())
}
