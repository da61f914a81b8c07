use std::collections::BTreeMap;

use super::state::ATTN_MATS;
use super::{ModelConfig, ModelState};
use crate::data::{EOT_ID, IMAGE_ID};
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::Image;

const LN_EPS: f64 = 1e-5;

/// Role of one position in an assembled sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    TextPrompt,
    Visual,
    Response,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Position {
    Text(u32),
    /// Row `k` of the projected visual block.
    Visual(usize),
}

/// Multimodal input sequence: text ids with the image placeholder replaced
/// by `n_visual_tokens` visual positions. Visual embeddings are produced
/// from `image` during the forward pass so gradients reach the projector.
#[derive(Clone, Debug, PartialEq)]
pub struct AssembledContext {
    positions: Vec<Position>,
    segments: Vec<Segment>,
    /// Index into the source token list for each position.
    source: Vec<usize>,
    image: Option<Image>,
}

/// Splices the image block into the placeholder of `prompt_tokens`.
///
/// All text positions are labelled as prompt.
pub fn assemble_context(
    prompt_tokens: &[u32],
    image: Option<&Image>,
    n_visual_tokens: usize,
) -> Result<AssembledContext> {
    let segs = vec![Segment::TextPrompt; prompt_tokens.len()];
    assemble_labeled(prompt_tokens, &segs, image, n_visual_tokens)
}

/// [`assemble_context`] with caller-provided labels for the text positions.
pub fn assemble_labeled(
    tokens: &[u32],
    labels: &[Segment],
    image: Option<&Image>,
    n_visual_tokens: usize,
) -> Result<AssembledContext> {
    if labels.len() != tokens.len() {
        return Err(Error::invalid("label count differs from token count"));
    }
    let placeholders = tokens.iter().filter(|&&t| t == IMAGE_ID).count();
    if placeholders > 1 {
        return Err(Error::invalid(format!(
            "context has {placeholders} image placeholders; at most one allowed"
        )));
    }
    match (placeholders, image) {
        (1, None) => return Err(Error::invalid("image placeholder present but no image")),
        (0, Some(_)) => return Err(Error::invalid("image supplied but no placeholder")),
        _ => {}
    }
    if image.is_some_and(Image::is_empty) {
        return Err(Error::invalid("empty image"));
    }
    let mut ctx = AssembledContext {
        positions: Vec::new(),
        segments: Vec::new(),
        source: Vec::new(),
        image: image.cloned(),
    };
    for (i, (&t, &seg)) in tokens.iter().zip(labels).enumerate() {
        if t == IMAGE_ID {
            for k in 0..n_visual_tokens {
                ctx.positions.push(Position::Visual(k));
                ctx.segments.push(Segment::Visual);
                ctx.source.push(i);
            }
        } else {
            ctx.positions.push(Position::Text(t));
            ctx.segments.push(seg);
            ctx.source.push(i);
        }
    }
    Ok(ctx)
}

impl AssembledContext {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Position] {
        &self.positions
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn source_index(&self) -> &[usize] {
        &self.source
    }

    pub fn image(&self) -> Option<&Image> {
        self.image.as_ref()
    }

    /// Sequence position of source token `i` (first position for the placeholder).
    pub fn position_of_source(&self, i: usize) -> Option<usize> {
        self.source.iter().position(|&s| s == i)
    }

    /// Appends teacher-forced response tokens.
    pub fn with_response(&self, response: &[u32]) -> AssembledContext {
        let mut out = self.clone();
        let base = self.source.last().map_or(0, |s| s + 1);
        for (n, &t) in response.iter().enumerate() {
            out.positions.push(Position::Text(t));
            out.segments.push(Segment::Response);
            out.source.push(base + n);
        }
        out
    }

    pub fn text_ids(&self) -> Vec<u32> {
        self.positions
            .iter()
            .filter_map(|p| match p {
                Position::Text(t) => Some(*t),
                Position::Visual(_) => None,
            })
            .collect()
    }
}

/// Parameter handles on one tape plus the configuration they follow.
pub struct Graph<'a> {
    pub config: &'a ModelConfig,
    pub vars: &'a BTreeMap<String, Var>,
}

impl<'a> Graph<'a> {
    pub fn new(config: &'a ModelConfig, vars: &'a BTreeMap<String, Var>) -> Self {
        Graph { config, vars }
    }

    fn v(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    fn linear(&self, tape: &mut Tape, x: Var, prefix: &str, bias: bool) -> Result<Var> {
        let y = tape.matmul_nt(x, self.v(&format!("{prefix}.weight"))?)?;
        if bias {
            tape.add_row(y, self.v(&format!("{prefix}.bias"))?)
        } else {
            Ok(y)
        }
    }

    /// Patchify → linear embed → mean-pool to `n_visual_tokens` rows.
    pub fn encode_image(&self, tape: &mut Tape, image: &Image) -> Result<Var> {
        let patches = patchify(image, self.config)?;
        let n_patches = patches.dims2().0;
        let pool = pooling_matrix(n_patches, self.config.n_visual_tokens)?;
        let p = tape.constant(patches);
        let feats = self.linear(tape, p, "vision.patch", true)?;
        let pool = tape.constant(pool);
        tape.matmul(pool, feats)
    }

    /// Two-layer MLP from vision width to model width.
    pub fn project(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let w = tape.value(features).dims2().1;
        if w != self.config.d_vision {
            return Err(Error::ShapeMismatch {
                op: "project",
                left: tape.value(features).shape().to_vec(),
                right: vec![self.config.d_vision],
            });
        }
        let h = self.linear(tape, features, "projector.fc1", true)?;
        let h = tape.gelu(h)?;
        self.linear(tape, h, "projector.fc2", true)
    }

    /// Token + position embeddings with the visual block spliced in.
    pub fn embed(&self, tape: &mut Tape, ctx: &AssembledContext) -> Result<Var> {
        if ctx.is_empty() {
            return Err(Error::invalid("empty context"));
        }
        if ctx.len() > self.config.max_seq {
            return Err(Error::invalid(format!(
                "sequence length {} exceeds max_seq {}",
                ctx.len(),
                self.config.max_seq
            )));
        }
        let wte = self.v("lm.wte")?;
        let visual = match ctx.image() {
            Some(img) => {
                let f = self.encode_image(tape, img)?;
                Some(self.project(tape, f)?)
            }
            None => None,
        };
        let mut parts = Vec::new();
        let mut run: Vec<usize> = Vec::new();
        let mut i = 0;
        while i < ctx.positions.len() {
            match ctx.positions[i] {
                Position::Text(t) => {
                    if t as usize >= self.config.vocab_size {
                        return Err(Error::invalid(format!(
                            "token id {t} outside vocab {}",
                            self.config.vocab_size
                        )));
                    }
                    run.push(t as usize);
                    i += 1;
                }
                Position::Visual(_) => {
                    if !run.is_empty() {
                        parts.push(tape.embedding(wte, &run)?);
                        run.clear();
                    }
                    parts.push(visual.ok_or_else(|| Error::invalid("visual position without image"))?);
                    i += self.config.n_visual_tokens;
                }
            }
        }
        if !run.is_empty() {
            parts.push(tape.embedding(wte, &run)?);
        }
        let x = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_rows(&parts)?
        };
        let pos: Vec<usize> = (0..ctx.len()).collect();
        let pe = tape.embedding(self.v("lm.wpe")?, &pos)?;
        tape.add(x, pe)
    }

    fn adapted(&self, tape: &mut Tape, h: Var, layer: usize, mat: &str) -> Result<Var> {
        let y = self.linear(tape, h, &format!("lm.blocks.{layer}.attn.{mat}"), false)?;
        let a = format!("lora.blocks.{layer}.attn.{mat}.a");
        match (self.vars.get(&a), self.vars.get(&format!("lora.blocks.{layer}.attn.{mat}.b"))) {
            (Some(&a), Some(&b)) => {
                let t = tape.matmul_nt(h, a)?;
                let u = tape.matmul_nt(t, b)?;
                let u = tape.scale(u, self.config.lora_scale())?;
                tape.add(y, u)
            }
            _ => Ok(y),
        }
    }

    /// Decoder stack over embedded inputs; returns `seq × vocab` logits.
    pub fn logits(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let cfg = self.config;
        let dh = cfg.head_dim();
        let inv = 1.0 / (dh as f64).sqrt();
        let mut x = x;
        for l in 0..cfg.n_layers {
            let b = format!("lm.blocks.{l}");
            let h = tape.layer_norm(
                x,
                self.v(&format!("{b}.ln1.gamma"))?,
                self.v(&format!("{b}.ln1.beta"))?,
                LN_EPS,
            )?;
            let q = self.adapted(tape, h, l, ATTN_MATS[0])?;
            let k = self.adapted(tape, h, l, ATTN_MATS[1])?;
            let v = self.adapted(tape, h, l, ATTN_MATS[2])?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for hd in 0..cfg.n_heads {
                let qh = tape.slice_cols(q, hd * dh, dh)?;
                let kh = tape.slice_cols(k, hd * dh, dh)?;
                let vh = tape.slice_cols(v, hd * dh, dh)?;
                let s = tape.matmul_nt(qh, kh)?;
                let s = tape.scale(s, inv)?;
                let p = tape.causal_softmax(s)?;
                heads.push(tape.matmul(p, vh)?);
            }
            let att = tape.concat_cols(&heads)?;
            let o = self.adapted(tape, att, l, ATTN_MATS[3])?;
            x = tape.add(x, o)?;
            let h2 = tape.layer_norm(
                x,
                self.v(&format!("{b}.ln2.gamma"))?,
                self.v(&format!("{b}.ln2.beta"))?,
                LN_EPS,
            )?;
            let m = self.linear(tape, h2, &format!("{b}.mlp.fc1"), true)?;
            let m = tape.gelu(m)?;
            let m = self.linear(tape, m, &format!("{b}.mlp.fc2"), true)?;
            x = tape.add(x, m)?;
        }
        let x = tape.layer_norm(x, self.v("lm.ln_f.gamma")?, self.v("lm.ln_f.beta")?, LN_EPS)?;
        self.linear(tape, x, "lm.head", true)
    }

    pub fn forward(&self, tape: &mut Tape, ctx: &AssembledContext) -> Result<Var> {
        let x = self.embed(tape, ctx)?;
        self.logits(tape, x)
    }

    /// Sum of teacher-forced log-probabilities of `response` after `ctx`.
    pub fn sequence_logprob(&self, tape: &mut Tape, ctx: &AssembledContext, response: &[u32]) -> Result<Var> {
        if response.is_empty() {
            return Err(Error::invalid("empty response"));
        }
        if ctx.is_empty() {
            return Err(Error::invalid("empty context"));
        }
        let full = ctx.with_response(response);
        let logits = self.forward(tape, &full)?;
        let lp = tape.log_softmax(logits)?;
        let coords: Vec<(usize, usize)> = response
            .iter()
            .enumerate()
            .map(|(n, &t)| (ctx.len() + n - 1, t as usize))
            .collect();
        let picked = tape.gather(lp, &coords)?;
        tape.sum(picked)
    }
}

fn patchify(image: &Image, cfg: &ModelConfig) -> Result<Tensor> {
    if image.is_empty() {
        return Err(Error::invalid("empty image"));
    }
    let p = cfg.patch_size;
    if !image.height.is_multiple_of(p) || !image.width.is_multiple_of(p) {
        return Err(Error::invalid(format!(
            "image {}x{} not divisible by patch size {p}",
            image.height, image.width
        )));
    }
    let (gh, gw) = (image.height / p, image.width / p);
    let mut data = Vec::with_capacity(gh * gw * cfg.patch_dim());
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..p {
                for x in 0..p {
                    data.extend(image.pixel(py * p + y, px * p + x));
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, cfg.patch_dim()], data)
}

/// Averages consecutive groups of patches down to `n_out` rows.
fn pooling_matrix(n_patches: usize, n_out: usize) -> Result<Tensor> {
    if n_patches < n_out || !n_patches.is_multiple_of(n_out) {
        return Err(Error::invalid(format!(
            "{n_patches} patches cannot be pooled to {n_out} visual tokens"
        )));
    }
    let g = n_patches / n_out;
    let mut data = vec![0.0; n_out * n_patches];
    for r in 0..n_out {
        for c in r * g..(r + 1) * g {
            data[r * n_patches + c] = 1.0 / g as f64;
        }
    }
    Tensor::new(vec![n_out, n_patches], data)
}

/// Raw patch features before pooling (`n_patches × d_vision`).
pub fn patch_features(state: &ModelState, image: &Image) -> Result<Tensor> {
    let patches = patchify(image, &state.config)?;
    let w = state.param("vision.patch.weight").expect("vision weight");
    let b = state.param("vision.patch.bias").expect("vision bias");
    let mut f = patches.matmul(&w.transpose())?;
    let n = b.len();
    for row in f.data_mut().chunks_mut(n) {
        for (x, y) in row.iter_mut().zip(b.data()) {
            *x += y;
        }
    }
    Ok(f)
}

/// Projected visual tokens for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualTokens {
    pub embeddings: Tensor,
}

impl ModelState {
    fn run<T>(&self, f: impl FnOnce(&mut Tape, &Graph) -> Result<T>) -> Result<T> {
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape)?;
        let g = Graph::new(&self.config, &vars);
        f(&mut tape, &g)
    }

    /// Pooled vision features, `n_visual_tokens × d_vision`.
    pub fn encode_image(&self, image: &Image) -> Result<Tensor> {
        self.run(|tape, g| {
            let v = g.encode_image(tape, image)?;
            Ok(tape.value(v).clone())
        })
    }

    pub fn project(&self, features: &Tensor) -> Result<VisualTokens> {
        self.run(|tape, g| {
            let f = tape.constant(features.clone());
            let v = g.project(tape, f)?;
            Ok(VisualTokens {
                embeddings: tape.value(v).clone(),
            })
        })
    }

    /// Input embedding sequence (token + position) of an assembled context.
    pub fn embed(&self, ctx: &AssembledContext) -> Result<Tensor> {
        self.run(|tape, g| {
            let v = g.embed(tape, ctx)?;
            Ok(tape.value(v).clone())
        })
    }

    pub fn forward_logits(&self, ctx: &AssembledContext) -> Result<Tensor> {
        self.run(|tape, g| {
            let v = g.forward(tape, ctx)?;
            Ok(tape.value(v).clone())
        })
    }

    pub fn sequence_logprob(&self, ctx: &AssembledContext, response: &[u32]) -> Result<f64> {
        self.run(|tape, g| {
            let v = g.sequence_logprob(tape, ctx, response)?;
            Ok(tape.value(v).item())
        })
    }

    /// Greedy decoding; ties go to the lowest id. Stops after the
    /// end-of-turn id (not returned), `max_new_tokens`, or `max_seq`.
    pub fn generate(&self, ctx: &AssembledContext, max_new_tokens: usize) -> Result<Vec<u32>> {
        if max_new_tokens == 0 {
            return Err(Error::invalid("max_new_tokens must be >= 1"));
        }
        if ctx.len() > self.config.max_seq {
            return Err(Error::invalid(format!(
                "context length {} exceeds max_seq {}",
                ctx.len(),
                self.config.max_seq
            )));
        }
        let mut out = Vec::new();
        let mut cur = ctx.clone();
        while out.len() < max_new_tokens && cur.len() < self.config.max_seq {
            let logits = self.forward_logits(&cur)?;
            let last = logits.row(cur.len() - 1);
            let mut best = 0;
            for (i, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = i;
                }
            }
            let tok = best as u32;
            if tok == EOT_ID {
                break;
            }
            out.push(tok);
            cur = cur.with_response(&[tok]);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_seq: 32,
            patch_size: 4,
            n_visual_tokens: 4,
            d_vision: 6,
            lora_rank: 2,
            lora_alpha: 4.0,
        }
    }

    fn img(seed: u8) -> Image {
        let bytes: Vec<u8> = (0..8 * 8 * 3).map(|i| ((i as u32 * 37 + seed as u32 * 11) % 256) as u8).collect();
        Image::from_rgb8(8, 8, &bytes).unwrap()
    }

    #[test]
    fn context_length_law() {
        let ctx = assemble_context(&[5, IMAGE_ID, 6, 7, 8], Some(&img(0)), 4).unwrap();
        assert_eq!(ctx.len(), 8);
        assert_eq!(&ctx.segments()[1..5], &[Segment::Visual; 4]);
        let text = assemble_context(&[5, 6], None, 4).unwrap();
        assert_eq!(text.len(), 2);
        assert!(text.segments().iter().all(|s| *s == Segment::TextPrompt));
    }

    #[test]
    fn placeholder_rules() {
        assert!(assemble_context(&[IMAGE_ID, 5], None, 4).is_err());
        assert!(assemble_context(&[5], Some(&img(0)), 4).is_err());
        assert!(assemble_context(&[IMAGE_ID, IMAGE_ID], Some(&img(0)), 4).is_err());
    }

    #[test]
    fn zero_image_gives_bias_pattern() {
        let s = init_model(&small(), 3).unwrap();
        let z = Image::zeros(8, 8);
        let f = s.encode_image(&z).unwrap();
        let bias = s.param("vision.patch.bias").unwrap();
        for r in 0..4 {
            for (a, b) in f.row(r).iter().zip(bias.data()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        assert_eq!(f, s.encode_image(&z).unwrap());
    }

    #[test]
    fn sixteen_pixel_image_patch_eight_has_four_patches() {
        let cfg = ModelConfig {
            patch_size: 8,
            d_vision: 6,
            ..small()
        };
        let s = init_model(&cfg, 1).unwrap();
        let im = Image::zeros(16, 16);
        assert_eq!(patch_features(&s, &im).unwrap().dims2(), (4, 6));
        assert!(s.encode_image(&Image::zeros(12, 16)).is_err());
    }

    #[test]
    fn one_pixel_change_changes_features() {
        let s = init_model(&small(), 1).unwrap();
        let a = img(1);
        let mut b = a.clone();
        let p = b.pixel(3, 5);
        b.set_pixel(3, 5, [1.0 - p[0], p[1], p[2]]);
        assert_ne!(s.encode_image(&a).unwrap(), s.encode_image(&b).unwrap());
    }

    #[test]
    fn projector_shape_and_zero() {
        let mut s = init_model(&small(), 1).unwrap();
        let out = s.project(&Tensor::filled(vec![4, 6], 0.3)).unwrap();
        assert_eq!(out.embeddings.dims2(), (4, 8));
        for n in ["projector.fc1.bias", "projector.fc2.bias"] {
            s.param_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let z = s.project(&Tensor::zeros(vec![4, 6])).unwrap();
        assert!(z.embeddings.data().iter().all(|&v| v == 0.0));
        assert!(s.project(&Tensor::zeros(vec![4, 5])).is_err());
    }

    #[test]
    fn logits_shape_and_overlength() {
        let s = init_model(&small(), 1).unwrap();
        let ctx = assemble_context(&[IMAGE_ID, 5, 6], Some(&img(2)), 4).unwrap();
        assert_eq!(s.forward_logits(&ctx).unwrap().dims2(), (6, 16));
        let long: Vec<u32> = vec![5; 33];
        let e = s.forward_logits(&assemble_context(&long, None, 4).unwrap()).unwrap_err();
        assert!(e.to_string().contains("max_seq"), "{e}");
    }

    #[test]
    fn generate_constant_and_tie() {
        let mut s = init_model(&small(), 1).unwrap();
        s.make_uniform_head();
        s.param_mut("lm.head.bias").unwrap().data_mut()[7] = 10.0;
        let ctx = assemble_context(&[5, 6], None, 4).unwrap();
        assert_eq!(s.generate(&ctx, 5).unwrap(), vec![7; 5]);
        s.make_uniform_head();
        s.param_mut("lm.head.bias").unwrap().data_mut()[3] = 5.0;
        s.param_mut("lm.head.bias").unwrap().data_mut()[9] = 5.0;
        assert_eq!(s.generate(&ctx, 2).unwrap(), vec![3, 3]);
        assert_eq!(s.generate(&ctx, 2).unwrap(), s.generate(&ctx, 2).unwrap());
        assert!(s.generate(&ctx, 0).is_err());
    }

    #[test]
    fn generate_stops_at_end_of_turn() {
        let mut s = init_model(&small(), 1).unwrap();
        s.make_uniform_head();
        s.param_mut("lm.head.bias").unwrap().data_mut()[EOT_ID as usize] = 10.0;
        let ctx = assemble_context(&[5, 6], None, 4).unwrap();
        assert!(s.generate(&ctx, 5).unwrap().is_empty());
    }

    #[test]
    fn logprob_anchors() {
        let mut s = init_model(&small(), 1).unwrap();
        s.make_uniform_head();
        let ctx = assemble_context(&[5, 6], None, 4).unwrap();
        let lp = s.sequence_logprob(&ctx, &[1, 2, 3]).unwrap();
        assert!((lp - 3.0 * (1.0f64 / 16.0).ln()).abs() < 1e-12);
        assert!((lp + 8.317766).abs() < 1e-6);
        // p(token 4) = 15 / (15 + 15) = 0.5
        s.param_mut("lm.head.bias").unwrap().data_mut()[4] = 15f64.ln();
        let lp = s.sequence_logprob(&ctx, &[4]).unwrap();
        assert!((lp - 0.5f64.ln()).abs() < 1e-12);
        assert!(s.sequence_logprob(&ctx, &[]).is_err());
    }
}
