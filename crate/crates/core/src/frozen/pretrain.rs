use serde::{Deserialize, Serialize};

use super::lm::LanguageModel;
use super::vision::VisionEncoder;
use super::FrozenConfig;
use crate::data::Vocab;
use crate::data::{gen_dataset, Dataset, Sample, SplitSpec, CAPTION_PROMPTS, CELL, END, IMAGE_SIZE, START};
use crate::error::{Error, Result};
use crate::nn::{prefix_positions, sinusoidal, CausalInput, Injection, Linear};
use crate::optim::{batch_gradients, AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Graph, Var};

/// Fixed pretraining schedule. The vision encoder learns per-patch shape and
/// color plus an object count from the aggregate row (heads discarded); the
/// LM learns to decode captions and answers from text standing in for the
/// soft tokens it will later receive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Recipe {
    pub id: String,
    pub vision_steps: usize,
    pub lm_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub n_scenes: usize,
    pub eval_scenes: usize,
}

impl Default for Recipe {
    fn default() -> Self {
        Self::toy()
    }
}

impl Recipe {
    pub fn none() -> Self {
        Self { id: "none".into(), vision_steps: 0, lm_steps: 0, batch_size: 1, lr: 1e-3, n_scenes: 0, eval_scenes: 0 }
    }

    pub fn toy() -> Self {
        Self {
            id: "toy-v1".into(),
            vision_steps: 150,
            lm_steps: 400,
            batch_size: 16,
            lr: 2e-3,
            n_scenes: 600,
            eval_scenes: 40,
        }
    }

    /// A few steps only; for tests that need a pretrained-shaped bundle fast.
    pub fn tiny() -> Self {
        Self {
            id: "tiny-v1".into(),
            vision_steps: 3,
            lm_steps: 3,
            batch_size: 4,
            lr: 1e-3,
            n_scenes: 20,
            eval_scenes: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let active = self.vision_steps + self.lm_steps > 0;
        if active && (self.batch_size == 0 || self.n_scenes < 10 || self.eval_scenes < 10) {
            return Err(Error::Config(format!(
                "recipe {} needs batch_size >= 1 and at least 10 train/eval scenes",
                self.id
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("recipe {} has invalid lr {}", self.id, self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub vision_losses: Vec<f64>,
    pub lm_losses: Vec<f64>,
    pub heldout_vision_loss: Option<f64>,
    pub heldout_lm_loss: Option<f64>,
}

struct VisionHeads {
    shape: Linear,
    color: Linear,
    count: Linear,
}

/// One text-conditioned LM example: `src` plays the role of the soft tokens.
#[derive(Clone, Debug)]
pub(crate) struct TextExample {
    pub src: Vec<usize>,
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
}

pub(crate) fn run(
    seed: u64,
    config: &FrozenConfig,
    recipe: &Recipe,
    vision: &VisionEncoder,
    lm: &LanguageModel,
    store: &mut ParamStore<f32>,
) -> Result<PretrainReport> {
    let mut report = PretrainReport::default();
    if recipe.vision_steps + recipe.lm_steps == 0 {
        return Ok(report);
    }
    let mut data_rng = Rng::new(seed).split(2);
    let no_holdout = SplitSpec { train_frac: 1.0, val_frac: 0.0, holdout: vec![] };
    let train = gen_dataset(data_rng.next_u64(), recipe.n_scenes, &no_holdout)?;
    let eval = gen_dataset(data_rng.next_u64(), recipe.eval_scenes, &no_holdout)?;
    let opt_cfg = AdamWConfig { lr: recipe.lr, weight_decay: 0.0, ..AdamWConfig::default() };

    if recipe.vision_steps > 0 {
        let v = &config.vision;
        if v.image_size != IMAGE_SIZE || v.channels != 3 {
            return Err(Error::Config(format!(
                "vision pretraining renders {IMAGE_SIZE}x{IMAGE_SIZE} RGB scenes; config asks for {}x{} with {} channels",
                v.image_size, v.image_size, v.channels
            )));
        }
        let mut aux: ParamStore<f32> = ParamStore::new();
        let mut rng = Rng::new(seed).split(3);
        let d = v.block.model_dim;
        let heads = VisionHeads {
            shape: Linear::new(&mut aux, "head.shape", d, 4, &mut rng),
            color: Linear::new(&mut aux, "head.color", d, 5, &mut rng),
            count: Linear::new(&mut aux, "head.count", d, 4, &mut rng),
        };
        let mut opt = AdamW::new(opt_cfg.clone(), store)?;
        let mut opt_aux = AdamW::new(opt_cfg.clone(), &aux)?;
        let n_main = store.len();
        for step in 0..recipe.vision_steps {
            let batch: Vec<&Sample> =
                (0..recipe.batch_size).map(|_| &train.train[rng.below(train.train.len())]).collect();
            let (loss, mut grads) = batch_gradients(batch.len(), |i| {
                let mut g = Graph::new();
                let l = vision_loss(&mut g, vision, &heads, store, &aux, batch[i])?;
                g.backward(l)?;
                let mut gr = g.param_grads(store);
                gr.extend(g.param_grads(&aux));
                Ok((g.value(l).item() as f64, gr))
            })?;
            check(loss, "vision", step)?;
            let aux_grads = grads.split_off(n_main);
            opt.step(store, &grads)?;
            opt_aux.step(&mut aux, &aux_grads)?;
            report.vision_losses.push(loss);
        }
        let losses = eval
            .train
            .iter()
            .map(|s| {
                let mut g = Graph::no_grad();
                let l = vision_loss(&mut g, vision, &heads, store, &aux, s)?;
                Ok(g.value(l).item() as f64)
            })
            .collect::<Result<Vec<f64>>>()?;
        report.heldout_vision_loss = Some(losses.iter().sum::<f64>() / losses.len() as f64);
    }

    if recipe.lm_steps > 0 {
        let vocab = Vocab::new();
        let mut rng = Rng::new(seed).split(4);
        let mut opt = AdamW::new(opt_cfg, store)?;
        for step in 0..recipe.lm_steps {
            let batch: Vec<TextExample> = (0..recipe.batch_size)
                .map(|_| {
                    let s = &train.train[rng.below(train.train.len())];
                    random_example(&vocab, s, &mut rng)
                })
                .collect::<Result<_>>()?;
            let (loss, grads) = batch_gradients(batch.len(), |i| {
                let mut g = Graph::new();
                let l = text_loss(&mut g, lm, store, &batch[i])?;
                g.backward(l)?;
                Ok((g.value(l).item() as f64, g.param_grads(store)))
            })?;
            check(loss, "lm", step)?;
            opt.step(store, &grads)?;
            report.lm_losses.push(loss);
        }
        report.heldout_lm_loss = Some(heldout_lm_loss(&vocab, lm, store, &eval)?);
    }
    Ok(report)
}

fn check(loss: f64, phase: &str, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Training(format!("{phase} pretraining diverged at step {step}: loss {loss}")))
    }
}

fn vision_loss(
    g: &mut Graph<f32>,
    vision: &VisionEncoder,
    heads: &VisionHeads,
    store: &ParamStore<f32>,
    aux: &ParamStore<f32>,
    sample: &Sample,
) -> Result<Var> {
    let cfg = &vision.config;
    let (feats, _) = vision.forward(g, store, &sample.image, false)?;
    let n = cfg.num_patches();
    let patches = g.slice_rows(feats, 1, n)?;
    let (mut shape_y, mut color_y) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for p in 0..n {
        let cy = (p / cfg.grid()) * cfg.patch_size + cfg.patch_size / 2;
        let cx = (p % cfg.grid()) * cfg.patch_size + cfg.patch_size / 2;
        let (row, col) = (cy / CELL, cx / CELL);
        match sample.scene.objects.iter().find(|o| o.row == row && o.col == col) {
            Some(o) => {
                shape_y.push(o.shape.index() + 1);
                color_y.push(o.color.index() + 1);
            }
            None => {
                shape_y.push(0);
                color_y.push(0);
            }
        }
    }
    let ls = heads.shape.forward(g, aux, patches)?;
    let ls = g.cross_entropy(ls, &shape_y)?;
    let lc = heads.color.forward(g, aux, patches)?;
    let lc = g.cross_entropy(lc, &color_y)?;
    let agg = g.slice_rows(feats, 0, 1)?;
    let ln = heads.count.forward(g, aux, agg)?;
    let ln = g.cross_entropy(ln, &[sample.scene.count()])?;
    let sum = g.add(ls, lc)?;
    let sum = g.add(sum, ln)?;
    Ok(g.scale(sum, 1.0 / 3.0))
}

fn random_example(vocab: &Vocab, s: &Sample, rng: &mut Rng) -> Result<TextExample> {
    if rng.below(2) == 0 || s.qa.is_empty() {
        let prompt = vocab.tokenize(CAPTION_PROMPTS[rng.below(CAPTION_PROMPTS.len())], true)?;
        Ok(TextExample { src: s.caption_ids.clone(), prompt, target: s.caption_ids.clone() })
    } else {
        let qa = &s.qa[rng.below(s.qa.len())];
        Ok(TextExample { src: s.caption_ids.clone(), prompt: qa.question_ids.clone(), target: qa.answer_ids.clone() })
    }
}

fn heldout_lm_loss(vocab: &Vocab, lm: &LanguageModel, store: &ParamStore<f32>, eval: &Dataset) -> Result<f64> {
    let prompt = vocab.tokenize(CAPTION_PROMPTS[0], true)?;
    let mut total = 0.0;
    let mut n = 0usize;
    for s in &eval.train {
        let mut examples =
            vec![TextExample { src: s.caption_ids.clone(), prompt: prompt.clone(), target: s.caption_ids.clone() }];
        examples.extend(s.qa.iter().map(|qa| TextExample {
            src: s.caption_ids.clone(),
            prompt: qa.question_ids.clone(),
            target: qa.answer_ids.clone(),
        }));
        for ex in &examples {
            let mut g = Graph::no_grad();
            let l = text_loss(&mut g, lm, store, ex)?;
            total += g.value(l).item() as f64;
            n += 1;
        }
    }
    Ok(total / n as f64)
}

/// Teacher-forced loss of `target` given `src` soft-token stand-ins and a
/// prompt, laid out exactly as the fusion pipelines lay out their inputs.
pub(crate) fn text_loss(
    g: &mut Graph<f32>,
    lm: &LanguageModel,
    store: &ParamStore<f32>,
    ex: &TextExample,
) -> Result<Var> {
    let mut prefix = vec![START];
    prefix.extend_from_slice(&ex.target);
    let mut labels = ex.target.clone();
    labels.push(END);
    match lm {
        LanguageModel::EncoderDecoder(m) => {
            let src = m.embedding.lookup(g, store, &ex.src)?;
            let pe = g.constant(sinusoidal(prefix_positions(ex.src.len()), m.embedding.dim));
            let src = g.add(src, pe)?;
            let prompt = m.embedding.embed_at(g, store, &ex.prompt, 0)?;
            let x = g.concat_rows(&[src, prompt])?;
            let (enc, _) = m.encode(g, store, x, false)?;
            let logits = m.decode(g, store, enc, &prefix)?;
            g.cross_entropy(logits, &labels)
        }
        LanguageModel::DecoderOnly(m) => {
            let mut ids = ex.prompt.clone();
            ids.extend_from_slice(&prefix);
            let src = m.embedding.lookup(g, store, &ex.src)?;
            let inj = Injection { layer: 0, states: src, at: ex.prompt.len() };
            let (logits, _) = m.forward(g, store, CausalInput::Ids(&ids), Some(inj))?;
            let logits = g.slice_rows(logits, ex.prompt.len(), prefix.len())?;
            g.cross_entropy(logits, &labels)
        }
    }
}
