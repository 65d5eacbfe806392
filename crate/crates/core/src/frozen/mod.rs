//! Frozen stand-ins for the pretrained components: a patch vision encoder and
//! an encoder-decoder or decoder-only language model. Bundles are built from
//! a seed, briefly pretrained on the synthetic world, frozen and fingerprinted.

mod lm;
mod pretrain;
mod vision;

pub use lm::{EncDecLm, LanguageModel, LmKind};
pub use pretrain::{PretrainReport, Recipe};
pub use vision::{VisionConfig, VisionEncoder};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::nn::{prefix_positions, sinusoidal, BlockConfig, CausalInput, CausalLm, LayerStates};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrozenConfig {
    pub vision: VisionConfig,
    pub lm_kind: LmKind,
    pub lm: BlockConfig,
}

impl Default for FrozenConfig {
    fn default() -> Self {
        Self::new(LmKind::EncoderDecoder)
    }
}

impl FrozenConfig {
    pub fn new(lm_kind: LmKind) -> Self {
        Self {
            vision: VisionConfig::default(),
            lm_kind,
            lm: BlockConfig {
                model_dim: 64,
                num_heads: 4,
                ff_dim: 128,
                num_layers: 6,
                max_seq_len: 64,
                vocab_size: Vocab::new().len(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.lm.validate()
    }
}

/// Immutable after construction. `fingerprint` is taken when the bundle is
/// frozen; [`verify`](Self::verify) recomputes it.
#[derive(Clone, Debug)]
pub struct FrozenBundle<T: Scalar = f32> {
    pub config: FrozenConfig,
    pub seed: u64,
    pub recipe: Recipe,
    pub report: PretrainReport,
    pub vision: VisionEncoder,
    pub lm: LanguageModel,
    pub store: ParamStore<T>,
    pub fingerprint: u64,
}

impl FrozenBundle<f32> {
    /// Randomly initialized, frozen, no pretraining.
    pub fn init(seed: u64, config: &FrozenConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let (vision, lm) = architecture(&mut store, config, &mut Rng::new(seed).split(1));
        let mut b = FrozenBundle {
            config: config.clone(),
            seed,
            recipe: Recipe::none(),
            report: PretrainReport::default(),
            vision,
            lm,
            store,
            fingerprint: 0,
        };
        b.freeze();
        Ok(b)
    }

    pub(crate) fn freeze(&mut self) {
        self.store.freeze();
        self.fingerprint = self.store.fingerprint();
    }
}

fn architecture<T: Scalar>(
    store: &mut ParamStore<T>,
    config: &FrozenConfig,
    rng: &mut Rng,
) -> (VisionEncoder, LanguageModel) {
    let vision = VisionEncoder::new(store, "vision", &config.vision, rng);
    let lm = LanguageModel::new(store, config.lm_kind, &config.lm, rng);
    (vision, lm)
}

/// Initializes from `seed`, runs the pretraining recipe, freezes and
/// fingerprints. A non-finite loss during pretraining is a training error.
pub fn build_frozen_bundle(seed: u64, config: &FrozenConfig, recipe: &Recipe) -> Result<FrozenBundle> {
    config.validate()?;
    recipe.validate()?;
    let mut store = ParamStore::new();
    let (vision, lm) = architecture(&mut store, config, &mut Rng::new(seed).split(1));
    let report = pretrain::run(seed, config, recipe, &vision, &lm, &mut store)?;
    if !store.all_finite() {
        return Err(Error::Training("pretrained parameters are not finite".into()));
    }
    let mut b = FrozenBundle {
        config: config.clone(),
        seed,
        recipe: recipe.clone(),
        report,
        vision,
        lm,
        store,
        fingerprint: 0,
    };
    b.freeze();
    Ok(b)
}

impl<T: Scalar> FrozenBundle<T> {
    pub fn kind(&self) -> LmKind {
        self.lm.kind()
    }

    pub fn model_dim(&self) -> usize {
        self.config.lm.model_dim
    }

    pub fn vision_dim(&self) -> usize {
        self.config.vision.block.model_dim
    }

    /// Copy with parameters converted to `U` (a new frozen store). The
    /// fingerprint is taken over the converted values.
    pub fn cast<U: Scalar>(&self) -> FrozenBundle<U> {
        let mut store = self.store.cast::<U>();
        store.freeze();
        let fingerprint = store.fingerprint();
        FrozenBundle {
            config: self.config.clone(),
            seed: self.seed,
            recipe: self.recipe.clone(),
            report: self.report.clone(),
            vision: self.vision.clone(),
            lm: self.lm.clone(),
            store,
            fingerprint,
        }
    }

    pub fn current_fingerprint(&self) -> u64 {
        self.store.fingerprint()
    }

    /// Audit error unless the parameters still hash to the stored fingerprint.
    pub fn verify(&self) -> Result<()> {
        let now = self.store.fingerprint();
        if now != self.fingerprint || !self.store.is_frozen() {
            return Err(Error::Audit(format!(
                "frozen bundle fingerprint {:016x} changed to {now:016x}",
                self.fingerprint
            )));
        }
        Ok(())
    }

    fn encdec(&self) -> Result<&EncDecLm> {
        match &self.lm {
            LanguageModel::EncoderDecoder(m) => Ok(m),
            LanguageModel::DecoderOnly(_) => Err(Error::Kind("operation needs an encoder-decoder bundle".into())),
        }
    }

    pub fn causal(&self) -> Result<&CausalLm> {
        match &self.lm {
            LanguageModel::DecoderOnly(m) => Ok(m),
            LanguageModel::EncoderDecoder(_) => Err(Error::Kind("operation needs a decoder-only bundle".into())),
        }
    }

    // ---- in-graph pieces used by the pipelines ------------------------------

    pub fn vision_forward(
        &self,
        g: &mut Graph<T>,
        image: &Tensor<T>,
        capture: bool,
    ) -> Result<(Var, Option<Vec<Var>>)> {
        self.vision.forward(g, &self.store, image, capture)
    }

    /// LM token rows plus positions starting at `start`.
    pub fn embed_text(&self, g: &mut Graph<T>, ids: &[usize], start: i64) -> Result<Var> {
        self.lm.embedding().embed_at(g, &self.store, ids, start)
    }

    /// Raw LM token rows without positions.
    pub fn lookup(&self, g: &mut Graph<T>, ids: &[usize]) -> Result<Var> {
        self.lm.embedding().lookup(g, &self.store, ids)
    }

    /// Adds the prefix positions `-m..-1` to `m` rows of soft tokens.
    pub fn add_prefix_positions(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let m = g.value(x).rows();
        let pe = g.constant(sinusoidal(prefix_positions(m), self.model_dim()));
        g.add(x, pe)
    }

    pub fn encode_rows(&self, g: &mut Graph<T>, x: Var, capture: bool) -> Result<(Var, Option<Vec<Var>>)> {
        self.encdec()?.encode(g, &self.store, x, capture)
    }

    pub fn decode_rows(&self, g: &mut Graph<T>, memory: Var, prefix_ids: &[usize]) -> Result<Var> {
        self.encdec()?.decode(g, &self.store, memory, prefix_ids)
    }

    // ---- eager operations ---------------------------------------------------

    /// Features `[num_patches + 1, d_v]` (row 0 = aggregate) and per-layer states.
    pub fn vision_encode(&self, image: &Tensor<T>) -> Result<(Tensor<T>, LayerStates<T>)> {
        let mut g = Graph::no_grad();
        let (out, states) = self.vision_forward(&mut g, image, true)?;
        Ok((g.value(out).clone(), collect(&g, states)))
    }

    /// Encoder states `[len, model_dim]` for a prompt and per-layer states.
    pub fn lm_encode(&self, ids: &[usize]) -> Result<(Tensor<T>, LayerStates<T>)> {
        self.encdec()?;
        let mut g = Graph::no_grad();
        let x = self.embed_text(&mut g, ids, 0)?;
        let (out, states) = self.encode_rows(&mut g, x, true)?;
        Ok((g.value(out).clone(), collect(&g, states)))
    }

    /// Decoder logits `[prefix_len, vocab]` given encoder memory.
    pub fn lm_decode(&self, memory: &Tensor<T>, prefix_ids: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::no_grad();
        let m = g.constant(memory.clone());
        let logits = self.decode_rows(&mut g, m, prefix_ids)?;
        Ok(g.value(logits).clone())
    }

    /// Per-layer hidden states: encoder layers for an encoder-decoder bundle,
    /// all layers for a decoder-only one. Entry 0 is the input embedding.
    pub fn lm_layer_states(&self, ids: &[usize]) -> Result<LayerStates<T>> {
        match &self.lm {
            LanguageModel::EncoderDecoder(_) => Ok(self.lm_encode(ids)?.1),
            LanguageModel::DecoderOnly(m) => {
                let mut g = Graph::no_grad();
                let (states, _) = m.forward_until(&mut g, &self.store, CausalInput::Ids(ids), None, m.depth())?;
                Ok(collect(&g, Some(states)))
            }
        }
    }
}

fn collect<T: Scalar>(g: &Graph<T>, states: Option<Vec<Var>>) -> LayerStates<T> {
    LayerStates { per_layer: states.unwrap_or_default().into_iter().map(|v| g.value(v).clone()).collect() }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: FrozenConfig,
    seed: u64,
    recipe: Recipe,
    report: PretrainReport,
    fingerprint: String,
}

impl FrozenBundle<f32> {
    /// Writes `manifest.json` and the parameter directory.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.store.save_dir(dir)?;
        let m = Manifest {
            config: self.config.clone(),
            seed: self.seed,
            recipe: self.recipe.clone(),
            report: self.report.clone(),
            fingerprint: format!("{:016x}", self.fingerprint),
        };
        let p = dir.join("manifest.json");
        fs::write(&p, serde_json::to_string_pretty(&m)?).map_err(|e| Error::io(&p, e))
    }

    /// Loads a saved bundle; the recomputed fingerprint must match the manifest.
    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("manifest.json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        let expected = u64::from_str_radix(&m.fingerprint, 16)
            .map_err(|_| Error::format(0, format!("bad fingerprint {:?} in {}", m.fingerprint, p.display())))?;
        m.config.validate()?;
        let mut store = ParamStore::new();
        let (vision, lm) = architecture(&mut store, &m.config, &mut Rng::new(m.seed).split(1));
        store.load_dir(dir)?;
        let mut b = FrozenBundle {
            config: m.config,
            seed: m.seed,
            recipe: m.recipe,
            report: m.report,
            vision,
            lm,
            store,
            fingerprint: 0,
        };
        b.freeze();
        if b.fingerprint != expected {
            return Err(Error::Audit(format!(
                "bundle in {} hashes to {:016x}, manifest says {expected:016x}",
                dir.display(),
                b.fingerprint
            )));
        }
        Ok(b)
    }
}

/// Stable key for a (seed, config, recipe) triple.
pub fn bundle_key(seed: u64, config: &FrozenConfig, recipe: &Recipe) -> Result<String> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(serde_json::to_vec(config)?);
    h.update(serde_json::to_vec(recipe)?);
    Ok(h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect())
}

/// Loads the bundle for `(seed, config, recipe)` from `cache_root/<key>` or
/// builds and stores it there. Writes go to a temporary sibling first and are
/// renamed into place.
pub fn build_or_load(seed: u64, config: &FrozenConfig, recipe: &Recipe, cache_root: &Path) -> Result<FrozenBundle> {
    let dir = cache_root.join(bundle_key(seed, config, recipe)?);
    if dir.join("manifest.json").exists() {
        return FrozenBundle::load(&dir);
    }
    let bundle = build_frozen_bundle(seed, config, recipe)?;
    let tmp: PathBuf = cache_root.join(format!(".tmp-{}-{}", std::process::id(), bundle_key(seed, config, recipe)?));
    bundle.save(&tmp)?;
    if fs::rename(&tmp, &dir).is_err() {
        // Another writer won the race; its copy is equivalent.
        let _ = fs::remove_dir_all(&tmp);
    }
    Ok(bundle)
}
