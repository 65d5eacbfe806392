use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sinusoidal, BlockConfig, EncoderStack, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisionConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    /// `vocab_size` is unused by the vision encoder.
    pub block: BlockConfig,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            block: BlockConfig {
                model_dim: 64,
                num_heads: 4,
                ff_dim: 128,
                num_layers: 4,
                max_seq_len: 64,
                vocab_size: 1,
            },
        }
    }
}

impl VisionConfig {
    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        if self.patch_size == 0
            || self.channels == 0
            || self.image_size == 0
            || !self.image_size.is_multiple_of(self.patch_size)
        {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_patches() + 1 > self.block.max_seq_len {
            return Err(Error::Config(format!(
                "{} patches + aggregate exceed max_seq_len {}",
                self.num_patches(),
                self.block.max_seq_len
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }
}

/// Patch transformer: linear patch embedding, a learned aggregate row
/// prepended, fixed sinusoidal positions, pre-norm encoder stack, final norm.
#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub config: VisionConfig,
    pub patch_embed: Linear,
    pub aggregate: ParamId,
    pub stack: EncoderStack,
    pub final_ln: LayerNorm,
}

impl VisionEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, config: &VisionConfig, rng: &mut Rng) -> Self {
        let d = config.block.model_dim;
        Self {
            config: config.clone(),
            patch_embed: Linear::new(store, &format!("{name}.patch"), config.patch_dim(), d, rng),
            aggregate: store.normal(&format!("{name}.aggregate"), &[1, d], 0.02, rng),
            stack: EncoderStack::new(store, &format!("{name}.stack"), &config.block, rng),
            final_ln: LayerNorm::new(store, &format!("{name}.final_ln"), d),
        }
    }

    /// `[C, H, W]` image to `[num_patches, C·P·P]`, patches in row-major order,
    /// each patch flattened channel-major.
    pub fn patchify<T: Scalar>(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let c = &self.config;
        let expected = [c.channels, c.image_size, c.image_size];
        if image.shape() != expected {
            return Err(Error::shape(format!("image {:?}, expected {:?}", image.shape(), expected)));
        }
        let (p, s, grid) = (c.patch_size, c.image_size, c.grid());
        let px = image.data();
        let mut out = Vec::with_capacity(c.num_patches() * c.patch_dim());
        for gy in 0..grid {
            for gx in 0..grid {
                for ch in 0..c.channels {
                    for y in 0..p {
                        let base = ch * s * s + (gy * p + y) * s + gx * p;
                        out.extend_from_slice(&px[base..base + p]);
                    }
                }
            }
        }
        Tensor::from_vec(&[c.num_patches(), c.patch_dim()], out)
    }

    /// Returns the final features `[num_patches + 1, d_v]` and, when
    /// `capture`, the per-layer states (entry 0 = embedded input).
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: &Tensor<T>,
        capture: bool,
    ) -> Result<(Var, Option<Vec<Var>>)> {
        let patches = g.constant(self.patchify(image)?);
        let emb = self.patch_embed.forward(g, store, patches)?;
        let agg = g.param(store, self.aggregate);
        let x = g.concat_rows(&[agg, emb])?;
        let n = self.config.num_patches() as i64 + 1;
        let pe = g.constant(sinusoidal(0..n, self.config.block.model_dim));
        let x = g.add(x, pe)?;
        let (h, states) = self.stack.forward(g, store, x, None, capture)?;
        Ok((self.final_ln.forward(g, store, h)?, states))
    }
}
