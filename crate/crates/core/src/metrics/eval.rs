use std::collections::BTreeMap;
use std::time::Instant;

use super::action::{action_accuracy, ActionLexicon};
use super::embedding::EmbeddingProvider;
use super::report::{EvalSettings, MetricReport, ResponseRecord, SMS_TRANSFORM};
use super::text::{bertscore_text, sbert_cos, sms};
use crate::data::{dialogue_prompt_tokens, DialogSample, Tokenizer, Turn};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{assemble_context, ModelState};

/// Stand-in text scored for an empty response.
pub const EMPTY_RESPONSE: &str = "<unk>";

/// One test prompt: the final question asked after the annotated history.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalItem {
    pub id: String,
    pub history: Vec<Turn>,
    pub question: String,
    pub image: Image,
    pub reference: String,
}

impl EvalItem {
    pub fn from_sample(sample: &DialogSample, image: Image) -> Result<EvalItem> {
        sample.validate()?;
        let (last, history) = sample.turns.split_last().expect("validated");
        Ok(EvalItem {
            id: sample.id.clone(),
            history: history.to_vec(),
            question: last.user.clone(),
            image,
            reference: last.assistant.clone(),
        })
    }
}

pub trait Responder {
    fn label(&self) -> String;
    fn respond(&self, item: &EvalItem) -> Result<String>;
    /// Whether responses are produced locally and can be timed.
    fn timed(&self) -> bool {
        true
    }
}

/// Greedy decoding with a trained model.
pub struct ModelResponder<'a> {
    pub label: String,
    pub state: &'a ModelState,
    pub tokenizer: &'a Tokenizer,
    pub max_new_tokens: usize,
}

impl Responder for ModelResponder<'_> {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn respond(&self, item: &EvalItem) -> Result<String> {
        let ids = dialogue_prompt_tokens(&item.history, &item.question, self.tokenizer);
        let ctx = assemble_context(&ids, Some(&item.image), self.state.config.n_visual_tokens)?;
        let out = self.state.generate(&ctx, self.max_new_tokens)?;
        Ok(self.tokenizer.detokenize(&out))
    }
}

/// Returns the reference verbatim (an oracle model).
pub struct EchoResponder;

impl Responder for EchoResponder {
    fn label(&self) -> String {
        "echo".into()
    }

    fn respond(&self, item: &EvalItem) -> Result<String> {
        Ok(item.reference.clone())
    }
}

/// Pre-recorded responses keyed by sample id (ingested baselines).
pub struct RecordedResponder {
    pub label: String,
    pub responses: BTreeMap<String, String>,
}

impl Responder for RecordedResponder {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn respond(&self, item: &EvalItem) -> Result<String> {
        self.responses
            .get(&item.id)
            .cloned()
            .ok_or_else(|| Error::Sample {
                id: item.id.clone(),
                msg: format!("no recorded response from {:?}", self.label),
            })
    }

    fn timed(&self) -> bool {
        false
    }
}

/// `n / seconds`; a zero interval is an error.
pub fn fps_from(n: usize, seconds: f64) -> Result<f64> {
    if !(seconds > 0.0 && seconds.is_finite()) {
        return Err(Error::Numeric(format!("cannot compute fps over {seconds} s")));
    }
    Ok(n as f64 / seconds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Throughput {
    pub fps: f64,
    pub n: usize,
    pub seconds: f64,
    pub responses: Vec<String>,
}

/// Times one full pass after an untimed warm-up response.
pub fn throughput_fps(responder: &dyn Responder, items: &[EvalItem]) -> Result<Throughput> {
    if items.is_empty() {
        return Err(Error::invalid("throughput_fps: no prompts"));
    }
    responder.respond(&items[0])?;
    let t = Instant::now();
    let responses = items.iter().map(|it| responder.respond(it)).collect::<Result<Vec<_>>>()?;
    let seconds = t.elapsed().as_secs_f64();
    Ok(Throughput {
        fps: fps_from(items.len(), seconds)?,
        n: items.len(),
        seconds,
        responses,
    })
}

pub fn hardware_note() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{}-{}, {threads} hw threads, single worker", std::env::consts::OS, std::env::consts::ARCH)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub bertscore_baseline: Option<f64>,
    pub max_new_tokens: Option<usize>,
}

/// Scores given responses against the items' references.
pub fn score_responses(
    label: &str,
    items: &[EvalItem],
    responses: &[String],
    provider: &dyn EmbeddingProvider,
    lexicon: &ActionLexicon,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    if items.is_empty() || items.len() != responses.len() {
        return Err(Error::invalid("score_responses: need one response per item"));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[a].id.cmp(&items[b].id));
    let (mut p, mut r, mut f, mut sc, mut sm) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut preds = Vec::new();
    let mut refs = Vec::new();
    let mut records = Vec::new();
    for &k in &order {
        let it = &items[k];
        let resp = if crate::data::pieces(&responses[k]).is_empty() {
            EMPTY_RESPONSE
        } else {
            responses[k].as_str()
        };
        let mut b = bertscore_text(resp, &it.reference, provider)?;
        if let Some(base) = opts.bertscore_baseline {
            b = b.rescaled(base)?;
        }
        p += b.p;
        r += b.r;
        f += b.f1;
        sc += sbert_cos(resp, &it.reference, provider)?;
        sm += sms(resp, &it.reference, provider)?;
        preds.push(resp.to_string());
        refs.push(it.reference.clone());
        records.push(ResponseRecord {
            id: it.id.clone(),
            response: responses[k].clone(),
            reference: it.reference.clone(),
        });
    }
    let n = items.len() as f64;
    let settings = EvalSettings {
        provider: provider.name(),
        sms_transform: SMS_TRANSFORM.into(),
        bertscore_baseline: opts.bertscore_baseline,
        lexicon_version: lexicon.version,
        max_new_tokens: opts.max_new_tokens,
    };
    Ok(MetricReport {
        model: label.to_string(),
        bertscore_p: p / n,
        bertscore_r: r / n,
        bertscore_f1: f / n,
        sbert_cos: sc / n,
        sms: sm / n,
        fps: None,
        aa: action_accuracy(&preds, &refs, lexicon)?,
        n_samples: items.len(),
        fingerprint: settings.fingerprint(),
        settings,
        hardware: None,
        responses: records,
    })
}

/// Generates a response for every item (timed when the responder is
/// local) and fills one report row.
pub fn evaluate_model(
    responder: &dyn Responder,
    items: &[EvalItem],
    provider: &dyn EmbeddingProvider,
    lexicon: &ActionLexicon,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    if items.is_empty() {
        return Err(Error::invalid("evaluate_model: empty test set"));
    }
    let (responses, fps) = if responder.timed() {
        let t = throughput_fps(responder, items)?;
        (t.responses, Some(t.fps))
    } else {
        let r = items.iter().map(|it| responder.respond(it)).collect::<Result<Vec<_>>>()?;
        (r, None)
    };
    let mut report = score_responses(&responder.label(), items, &responses, provider, lexicon, opts)?;
    report.fps = fps;
    report.hardware = fps.map(|_| hardware_note());
    Ok(report)
}
