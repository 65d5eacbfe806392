//! End-to-end fusion graphs over a frozen bundle and a trainable QFormer:
//!
//! * standard, encoder-decoder: `l_d(l_e([t_qv, p]))`
//! * standard, decoder-only: `l_d([p, t_qv])`
//! * grounded, encoder-decoder: `l_d([t_qv_g, l_e(p)])` with `t_qv_g` from the
//!   QFormer fed `l_e(p)` as extra input rows
//! * grounded, decoder-only (experimental): queries injected at layer `n`,
//!   grounded on the prompt's layer-`n` states
//!
//! Every composed sequence carries length-tagged [`Segment`] metadata.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{END, START};
use crate::error::{Error, Result};
use crate::frozen::{FrozenBundle, LmKind};
use crate::nn::{CausalInput, Injection};
use crate::qformer::QFormerState;
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineKind {
    Standard,
    Grounded,
}

impl PipelineKind {
    pub fn name(self) -> &'static str {
        match self {
            PipelineKind::Standard => "standard",
            PipelineKind::Grounded => "grounded",
        }
    }
}

/// Placement of the projected queries relative to the prompt in the standard
/// pipelines. The default follows each LM kind's usual order; overriding
/// it is for ablations only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryOrder {
    QueriesFirst,
    PromptFirst,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct PipelineOptions {
    pub order: Option<QueryOrder>,
    /// Injection layer for the grounded decoder-only variant.
    pub inject_layer: usize,
    /// Grounded pipelines only: withhold the grounding rows from the QFormer
    /// (the decoder still receives the encoded prompt).
    pub empty_grounding: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegmentKind {
    Queries,
    GroundedQueries,
    Grounding,
    Prompt,
    EncodedPrompt,
    EncodedInput,
    Start,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub len: usize,
}

fn seg(kind: SegmentKind, len: usize) -> Segment {
    Segment { kind, len }
}

/// Segment layout of every sequence composed for one forward pass.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub qformer_input: Vec<Segment>,
    pub encoder_input: Vec<Segment>,
    pub decoder_memory: Vec<Segment>,
    pub decoder_input: Vec<Segment>,
    pub inject_layer: Option<usize>,
}

impl Layout {
    pub fn total(segments: &[Segment]) -> usize {
        segments.iter().map(|s| s.len).sum()
    }

    pub fn kinds(segments: &[Segment]) -> Vec<SegmentKind> {
        segments.iter().map(|s| s.kind).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheCounters {
    pub encoder_calls: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
}

/// Memoized frozen prompt representations keyed on the exact token ids.
/// Standard encoder-decoder steps cannot be cached (the encoder input holds
/// trainable queries); they are only counted.
#[derive(Clone, Debug)]
pub struct EncoderCache<T: Scalar = f32> {
    enabled: bool,
    entries: HashMap<(usize, Vec<usize>), Tensor<T>>,
    counters: CacheCounters,
}

const ENCODER_OUTPUT: usize = usize::MAX;

impl<T: Scalar> Default for EncoderCache<T> {
    fn default() -> Self {
        Self::new(true)
    }
}

impl<T: Scalar> EncoderCache<T> {
    pub fn new(enabled: bool) -> Self {
        Self { enabled, entries: HashMap::new(), counters: CacheCounters::default() }
    }

    pub fn counters(&self) -> CacheCounters {
        self.counters
    }

    pub fn reset_counters(&mut self) {
        self.counters = CacheCounters::default();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Drops every entry and resets the counters.
    pub fn clear(&mut self) {
        self.entries.clear();
        self.reset_counters();
    }

    /// Counts an encoder pass that happens inside a training graph.
    pub fn record_uncached_call(&mut self) {
        self.counters.encoder_calls += 1;
    }

    fn lookup(&mut self, key: (usize, Vec<usize>), compute: impl FnOnce() -> Result<Tensor<T>>) -> Result<Tensor<T>> {
        if self.enabled {
            if let Some(t) = self.entries.get(&key) {
                self.counters.cache_hits += 1;
                return Ok(t.clone());
            }
            self.counters.cache_misses += 1;
        }
        self.counters.encoder_calls += 1;
        let t = compute()?;
        if self.enabled {
            self.entries.insert(key, t.clone());
        }
        Ok(t)
    }

    /// `l_e(p)`, `[prompt_len, model_dim]`.
    pub fn encode(&mut self, bundle: &FrozenBundle<T>, prompt_ids: &[usize]) -> Result<Tensor<T>> {
        self.lookup((ENCODER_OUTPUT, prompt_ids.to_vec()), || Ok(bundle.lm_encode(prompt_ids)?.0))
    }

    /// Decoder-only prompt states after `layer` layers.
    pub fn layer_states(&mut self, bundle: &FrozenBundle<T>, prompt_ids: &[usize], layer: usize) -> Result<Tensor<T>> {
        self.lookup((layer, prompt_ids.to_vec()), || Ok(bundle.lm_layer_states(prompt_ids)?.layer(layer)?.clone()))
    }
}

/// Image input: raw pixels (encoded by the frozen vision model) or
/// precomputed vision features.
#[derive(Clone, Copy, Debug)]
pub enum Visual<'a, T: Scalar> {
    Pixels(&'a Tensor<T>),
    Features(&'a Tensor<T>),
}

impl<T: Scalar> Visual<'_, T> {
    pub fn features(self, bundle: &FrozenBundle<T>) -> Result<Tensor<T>> {
        match self {
            Visual::Pixels(img) => Ok(bundle.vision_encode(img)?.0),
            Visual::Features(f) => Ok(f.clone()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutput<T: Scalar = f32> {
    /// `[target_len + 1, vocab]` when teacher-forced, `[generated, vocab]` in
    /// generation mode.
    pub logits: Tensor<T>,
    pub loss: Option<f64>,
    pub generated_ids: Option<Vec<usize>>,
    pub layout: Layout,
    /// Encoder invocations made by this call.
    pub encoder_calls: u64,
}

/// Conditioning computed once per sample: decoder memory for
/// encoder-decoder bundles, the injected prefix for decoder-only ones.
#[derive(Clone, Copy, Debug)]
pub enum Conditioning {
    Memory(Var),
    Injected { states: Var, layer: usize, at: usize },
}

fn check_layer<T: Scalar>(bundle: &FrozenBundle<T>, layer: usize) -> Result<()> {
    let depth = bundle.lm.depth();
    if layer > depth {
        return Err(Error::Range(format!("injection layer {layer} outside 0..={depth}")));
    }
    Ok(())
}

/// Resolves the frozen prompt representation a grounded sample needs (via
/// the cache) and counts the encoder pass of a standard encoder-decoder
/// sample. Call sequentially, before any parallel per-sample work.
pub fn prepare<T: Scalar>(
    kind: PipelineKind,
    bundle: &FrozenBundle<T>,
    cache: &mut EncoderCache<T>,
    prompt_ids: &[usize],
    opts: &PipelineOptions,
) -> Result<Option<Tensor<T>>> {
    match (kind, bundle.kind()) {
        (PipelineKind::Standard, LmKind::EncoderDecoder) => {
            cache.record_uncached_call();
            Ok(None)
        }
        (PipelineKind::Standard, LmKind::DecoderOnly) => Ok(None),
        (PipelineKind::Grounded, LmKind::EncoderDecoder) => Ok(Some(cache.encode(bundle, prompt_ids)?)),
        (PipelineKind::Grounded, LmKind::DecoderOnly) => {
            check_layer(bundle, opts.inject_layer)?;
            Ok(Some(cache.layer_states(bundle, prompt_ids, opts.inject_layer)?))
        }
    }
}

/// Builds the conditioning for one sample inside `g`. `grounding` must come
/// from [`prepare`] for grounded pipelines.
#[allow(clippy::too_many_arguments)]
pub fn condition<T: Scalar>(
    g: &mut Graph<T>,
    kind: PipelineKind,
    bundle: &FrozenBundle<T>,
    qf: &QFormerState<T>,
    feats: Var,
    prompt_ids: &[usize],
    grounding: Option<&Tensor<T>>,
    opts: &PipelineOptions,
) -> Result<(Conditioning, Layout)> {
    let nq = qf.config().num_queries;
    let pl = prompt_ids.len();
    let mut layout = Layout::default();
    match (kind, bundle.kind()) {
        (PipelineKind::Standard, LmKind::EncoderDecoder) => {
            let t = qf.forward(g, feats, prompt_ids, None)?;
            layout.qformer_input = vec![seg(SegmentKind::Queries, nq), seg(SegmentKind::Prompt, pl)];
            let q = qf.project(g, t)?;
            let q = bundle.add_prefix_positions(g, q)?;
            let p = bundle.embed_text(g, prompt_ids, 0)?;
            let (parts, segs) = match opts.order.unwrap_or(QueryOrder::QueriesFirst) {
                QueryOrder::QueriesFirst => ([q, p], [seg(SegmentKind::Queries, nq), seg(SegmentKind::Prompt, pl)]),
                QueryOrder::PromptFirst => ([p, q], [seg(SegmentKind::Prompt, pl), seg(SegmentKind::Queries, nq)]),
            };
            let x = g.concat_rows(&parts)?;
            layout.encoder_input = segs.to_vec();
            let (enc, _) = bundle.encode_rows(g, x, false)?;
            layout.decoder_memory = vec![seg(SegmentKind::EncodedInput, nq + pl)];
            Ok((Conditioning::Memory(enc), layout))
        }
        (PipelineKind::Grounded, LmKind::EncoderDecoder) => {
            let enc = grounding.ok_or_else(|| Error::contract("grounded pipeline needs the encoded prompt"))?;
            let e = g.constant(enc.clone());
            let t = qf.forward(g, feats, prompt_ids, (!opts.empty_grounding).then_some(e))?;
            layout.qformer_input = vec![
                seg(SegmentKind::Queries, nq),
                seg(SegmentKind::Grounding, if opts.empty_grounding { 0 } else { enc.rows() }),
                seg(SegmentKind::Prompt, pl),
            ];
            let q = qf.project(g, t)?;
            let memory = g.concat_rows(&[q, e])?;
            layout.decoder_memory =
                vec![seg(SegmentKind::GroundedQueries, nq), seg(SegmentKind::EncodedPrompt, enc.rows())];
            Ok((Conditioning::Memory(memory), layout))
        }
        (PipelineKind::Standard, LmKind::DecoderOnly) => {
            let t = qf.forward(g, feats, prompt_ids, None)?;
            layout.qformer_input = vec![seg(SegmentKind::Queries, nq), seg(SegmentKind::Prompt, pl)];
            let q = qf.project(g, t)?;
            let at = match opts.order.unwrap_or(QueryOrder::PromptFirst) {
                QueryOrder::PromptFirst => pl,
                QueryOrder::QueriesFirst => 0,
            };
            layout.inject_layer = Some(0);
            Ok((Conditioning::Injected { states: q, layer: 0, at }, layout))
        }
        (PipelineKind::Grounded, LmKind::DecoderOnly) => {
            check_layer(bundle, opts.inject_layer)?;
            let gr = grounding.ok_or_else(|| Error::contract("grounded pipeline needs the prompt layer states"))?;
            let e = g.constant(gr.clone());
            let t = qf.forward(g, feats, prompt_ids, (!opts.empty_grounding).then_some(e))?;
            layout.qformer_input = vec![
                seg(SegmentKind::Queries, nq),
                seg(SegmentKind::Grounding, if opts.empty_grounding { 0 } else { gr.rows() }),
                seg(SegmentKind::Prompt, pl),
            ];
            let q = qf.project(g, t)?;
            layout.inject_layer = Some(opts.inject_layer);
            Ok((Conditioning::Injected { states: q, layer: opts.inject_layer, at: pl }, layout))
        }
    }
}

/// Logits for the decoder rows of `prefix` (`[prefix_len, vocab]`).
pub fn decode_logits<T: Scalar>(
    g: &mut Graph<T>,
    bundle: &FrozenBundle<T>,
    cond: Conditioning,
    prompt_ids: &[usize],
    prefix: &[usize],
    layout: &mut Layout,
) -> Result<Var> {
    match cond {
        Conditioning::Memory(m) => {
            layout.decoder_input = vec![seg(SegmentKind::Start, 1), seg(SegmentKind::Target, prefix.len() - 1)];
            bundle.decode_rows(g, m, prefix)
        }
        Conditioning::Injected { states, layer, at } => {
            let lm = bundle.causal()?;
            let mut ids = prompt_ids.to_vec();
            ids.extend_from_slice(prefix);
            let nq = g.value(states).rows();
            let pl = prompt_ids.len();
            layout.decoder_input = if at == pl {
                vec![seg(SegmentKind::Prompt, pl), seg(SegmentKind::Queries, nq)]
            } else {
                vec![seg(SegmentKind::Queries, nq), seg(SegmentKind::Prompt, pl)]
            };
            layout.decoder_input.extend([seg(SegmentKind::Start, 1), seg(SegmentKind::Target, prefix.len() - 1)]);
            let (logits, _) =
                lm.forward(g, &bundle.store, CausalInput::Ids(&ids), Some(Injection { layer, states, at }))?;
            g.slice_rows(logits, pl, prefix.len())
        }
    }
}

/// Teacher-forced loss: decoder input `[start] + target`, labels
/// `target + [end]`. Returns (loss, logits, layout).
#[allow(clippy::too_many_arguments)]
pub fn sample_loss<T: Scalar>(
    g: &mut Graph<T>,
    kind: PipelineKind,
    bundle: &FrozenBundle<T>,
    qf: &QFormerState<T>,
    feats: &Tensor<T>,
    prompt_ids: &[usize],
    target_ids: &[usize],
    grounding: Option<&Tensor<T>>,
    opts: &PipelineOptions,
) -> Result<(Var, Var, Layout)> {
    let f = g.constant(feats.clone());
    let (cond, mut layout) = condition(g, kind, bundle, qf, f, prompt_ids, grounding, opts)?;
    let mut prefix = Vec::with_capacity(target_ids.len() + 1);
    prefix.push(START);
    prefix.extend_from_slice(target_ids);
    let mut labels = target_ids.to_vec();
    labels.push(END);
    let logits = decode_logits(g, bundle, cond, prompt_ids, &prefix, &mut layout)?;
    let loss = g.cross_entropy(logits, &labels)?;
    Ok((loss, logits, layout))
}

fn require(bundle_kind: LmKind, want: LmKind) -> Result<()> {
    if bundle_kind != want {
        return Err(Error::Kind(format!("pipeline needs a {want:?} bundle, got {bundle_kind:?}")));
    }
    Ok(())
}

/// Teacher-forced forward for any pipeline; no gradients are kept.
#[allow(clippy::too_many_arguments)]
pub fn forward<T: Scalar>(
    kind: PipelineKind,
    bundle: &FrozenBundle<T>,
    qf: &QFormerState<T>,
    visual: Visual<'_, T>,
    prompt_ids: &[usize],
    target_ids: &[usize],
    cache: &mut EncoderCache<T>,
    opts: &PipelineOptions,
) -> Result<PipelineOutput<T>> {
    let before = cache.counters().encoder_calls;
    let feats = visual.features(bundle)?;
    let grounding = prepare(kind, bundle, cache, prompt_ids, opts)?;
    let mut g = Graph::no_grad();
    let (loss, logits, layout) =
        sample_loss(&mut g, kind, bundle, qf, &feats, prompt_ids, target_ids, grounding.as_ref(), opts)?;
    Ok(PipelineOutput {
        logits: g.value(logits).clone(),
        loss: Some(g.value(loss).item().f64()),
        generated_ids: None,
        layout,
        encoder_calls: cache.counters().encoder_calls - before,
    })
}

/// `l_d(l_e([t_qv, p]))`.
pub fn standard_encdec_forward<T: Scalar>(
    bundle: &FrozenBundle<T>,
    qf: &QFormerState<T>,
    visual: Visual<'_, T>,
    prompt_ids: &[usize],
    target_ids: &[usize],
    cache: &mut EncoderCache<T>,
) -> Result<PipelineOutput<T>> {
    require(bundle.kind(), LmKind::EncoderDecoder)?;
    forward(PipelineKind::Standard, bundle, qf, visual, prompt_ids, target_ids, cache, &PipelineOptions::default())
}

/// `l_d([p, t_qv])`.
pub fn standard_deconly_forward<T: Scalar>(
    bundle: &FrozenBundle<T>,
    qf: &QFormerState<T>,
    visual: Visual<'_, T>,
    prompt_ids: &[usize],
    target_ids: &[usize],
) -> Result<PipelineOutput<T>> {
    require(bundle.kind(), LmKind::DecoderOnly)?;
    let mut cache = EncoderCache::new(false);
    forward(PipelineKind::Standard, bundle, qf, visual, prompt_ids, target_ids, &mut cache, &PipelineOptions::default())
}

/// `l_d([t_qv_g, l_e(p)])` with `l_e(p)` served from `cache`.
pub fn grounded_encdec_forward<T: Scalar>(
    bundle: &FrozenBundle<T>,
    qf: &QFormerState<T>,
    visual: Visual<'_, T>,
    prompt_ids: &[usize],
    target_ids: &[usize],
    cache: &mut EncoderCache<T>,
) -> Result<PipelineOutput<T>> {
    require(bundle.kind(), LmKind::EncoderDecoder)?;
    forward(PipelineKind::Grounded, bundle, qf, visual, prompt_ids, target_ids, cache, &PipelineOptions::default())
}

/// Decoder-only with grounded queries injected at `layer_n`.
#[allow(clippy::too_many_arguments)]
pub fn grounded_deconly_forward<T: Scalar>(
    bundle: &FrozenBundle<T>,
    qf: &QFormerState<T>,
    visual: Visual<'_, T>,
    prompt_ids: &[usize],
    target_ids: &[usize],
    layer_n: usize,
    cache: &mut EncoderCache<T>,
) -> Result<PipelineOutput<T>> {
    require(bundle.kind(), LmKind::DecoderOnly)?;
    let opts = PipelineOptions { inject_layer: layer_n, ..PipelineOptions::default() };
    forward(PipelineKind::Grounded, bundle, qf, visual, prompt_ids, target_ids, cache, &opts)
}

/// Greedy decoding from the start token until the end token or `max_len`
/// generated tokens. The end token, when produced, is included.
#[allow(clippy::too_many_arguments)]
pub fn generate<T: Scalar>(
    kind: PipelineKind,
    bundle: &FrozenBundle<T>,
    qf: &QFormerState<T>,
    visual: Visual<'_, T>,
    prompt_ids: &[usize],
    max_len: usize,
    cache: &mut EncoderCache<T>,
    opts: &PipelineOptions,
) -> Result<PipelineOutput<T>> {
    let before = cache.counters().encoder_calls;
    let feats = visual.features(bundle)?;
    let grounding = prepare(kind, bundle, cache, prompt_ids, opts)?;
    let mut out = generate_with(kind, bundle, qf, &feats, prompt_ids, grounding.as_ref(), max_len, opts)?;
    out.encoder_calls = cache.counters().encoder_calls - before;
    Ok(out)
}

/// [`generate`] with the grounding already resolved by [`prepare`].
#[allow(clippy::too_many_arguments)]
pub fn generate_with<T: Scalar>(
    kind: PipelineKind,
    bundle: &FrozenBundle<T>,
    qf: &QFormerState<T>,
    feats: &Tensor<T>,
    prompt_ids: &[usize],
    grounding: Option<&Tensor<T>>,
    max_len: usize,
    opts: &PipelineOptions,
) -> Result<PipelineOutput<T>> {
    if max_len == 0 {
        return Err(Error::contract("max_len must be at least 1"));
    }
    let mut g = Graph::no_grad();
    let f = g.constant(feats.clone());
    let (cond, mut layout) = condition(&mut g, kind, bundle, qf, f, prompt_ids, grounding, opts)?;
    let mut prefix = vec![START];
    let mut logits;
    loop {
        logits = decode_logits(&mut g, bundle, cond, prompt_ids, &prefix, &mut layout)?;
        let v = g.value(logits);
        let last = v.row(v.rows() - 1);
        let next = argmax(last);
        prefix.push(next);
        if next == END || prefix.len() > max_len {
            break;
        }
    }
    Ok(PipelineOutput {
        logits: g.value(logits).clone(),
        loss: None,
        generated_ids: Some(prefix[1..].to_vec()),
        layout,
        encoder_calls: 0,
    })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
