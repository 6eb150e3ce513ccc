use islab_tensor::{Graph, ParamId, ParamStore, Var};
use serde::{Deserialize, Serialize};

use super::layers::{norm_leaky, Conv, Initializer, ParamMode};
use crate::{IslError, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorSpec {
    pub base_width: usize,
    pub n_layers: usize,
}

impl DiscriminatorSpec {
    pub fn paper() -> Self {
        Self { base_width: 64, n_layers: 3 }
    }

    pub fn test() -> Self {
        Self { base_width: 8, n_layers: 3 }
    }
}

/// PatchGAN: 4x4 convolutions mapping a `(source, candidate)` pair to a grid
/// of real/fake logits. Three stride-2 layers give a 70x70 receptive field.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    pub spec: DiscriminatorSpec,
    pub layers: Vec<Conv>,
}

impl PatchDiscriminator {
    pub const IN_CHANNELS: usize = 2;

    pub fn build<T: Scalar>(
        spec: DiscriminatorSpec,
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        prefix: &str,
    ) -> Result<Self> {
        if spec.base_width == 0 {
            return Err(IslError::Config("discriminator base_width must be >= 1".into()));
        }
        let w = spec.base_width;
        let mut layers = vec![Conv::new(store, init, &format!("{prefix}.layer0"), 2, w, 4, 2, 1, 0)?];
        let mut mult = 1;
        for n in 1..spec.n_layers {
            let prev = mult;
            mult = (1 << n).min(8);
            layers.push(Conv::new(store, init, &format!("{prefix}.layer{n}"), w * prev, w * mult, 4, 2, 1, 0)?);
        }
        let prev = mult;
        mult = (1 << spec.n_layers).min(8);
        let n = spec.n_layers;
        layers.push(Conv::new(store, init, &format!("{prefix}.layer{n}"), w * prev, w * mult, 4, 1, 1, 0)?);
        layers.push(Conv::new(store, init, &format!("{prefix}.layer{}", n + 1), w * mult, 1, 4, 1, 1, 0)?);
        Ok(Self { spec, layers })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, mode: ParamMode, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != Self::IN_CHANNELS {
            return Err(IslError::Shape(format!("discriminator expects (batch, 2, H, W), got {s:?}")));
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, conv) in self.layers.iter().enumerate() {
            h = conv.forward(g, store, mode, h)?;
            if i == 0 {
                h = g.leaky_relu(h, T::lit(0.2));
            } else if i < last {
                h = norm_leaky(g, h)?;
            }
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|c| c.params()).collect()
    }
}
