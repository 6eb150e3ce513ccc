//! Generator, discriminator and modality-controller constructors.
//!
//! A [`Network`] bundles one parameter store with everything a training run
//! or a predictor needs: the generator backbone, an optional dynamic
//! first-conv controller and, for the pix2pix backbone, one PatchGAN per
//! organelle.

pub mod checkpoint;
pub mod discriminator;
pub mod dynamic;
pub mod generator;
pub mod layers;

use std::fmt;
use std::str::FromStr;

use islab_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointMeta, OptimizerSnapshot};
pub use discriminator::{DiscriminatorSpec, PatchDiscriminator};
pub use dynamic::{DynamicConvController, ModalityCode};
pub use generator::{FirstConvParams, GeneratorModel, GeneratorSpec, HeadOutputs, ResnetGenerator, UnetPPSpec, UnetPlusPlus};
pub use layers::{Conv, Initializer, ParamMode, UpConv};

use crate::domain::{Modality, Organelle, CHANNEL_ORDER};
use crate::{IslError, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Backbone {
    #[serde(rename = "pix2pix_resnet9", alias = "pix2pix")]
    Pix2pixResnet9,
    #[serde(rename = "unetpp")]
    UnetPP,
}

impl Backbone {
    pub fn as_str(self) -> &'static str {
        match self {
            Backbone::Pix2pixResnet9 => "pix2pix_resnet9",
            Backbone::UnetPP => "unetpp",
        }
    }

    pub fn adversarial(self) -> bool {
        self == Backbone::Pix2pixResnet9
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Backbone {
    type Err = IslError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pix2pix" | "pix2pix_resnet9" => Ok(Backbone::Pix2pixResnet9),
            "unetpp" | "unet++" => Ok(Backbone::UnetPP),
            _ => Err(IslError::Parse(format!("unknown backbone {s:?} (expected pix2pix or unetpp)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// One network per input modality.
    Separate,
    /// One modality-agnostic network.
    Unified,
    /// One network whose first convolution is generated from the modality code.
    Dynamic,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Separate => "separate",
            Strategy::Unified => "unified",
            Strategy::Dynamic => "dynamic",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = IslError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "separate" => Ok(Strategy::Separate),
            "unified" => Ok(Strategy::Unified),
            "dynamic" => Ok(Strategy::Dynamic),
            _ => Err(IslError::Parse(format!("unknown strategy {s:?} (expected separate, unified or dynamic)"))),
        }
    }
}

/// Model-size presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Paper,
    Test,
}

impl FromStr for Tier {
    type Err = IslError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "paper" => Ok(Tier::Paper),
            "test" => Ok(Tier::Test),
            _ => Err(IslError::Parse(format!("unknown tier {s:?} (expected paper or test)"))),
        }
    }
}

/// Everything needed to rebuild a [`Network`] bit-identically.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub backbone: Backbone,
    pub generator: GeneratorSpec,
    pub unetpp: UnetPPSpec,
    pub discriminator: DiscriminatorSpec,
    pub dynamic: bool,
    pub init_seed: u64,
}

impl NetworkConfig {
    pub fn for_tier(tier: Tier, backbone: Backbone, dynamic: bool, init_seed: u64) -> Self {
        let (generator, unetpp, discriminator) = match tier {
            Tier::Paper => (GeneratorSpec::paper(), UnetPPSpec::paper(), DiscriminatorSpec::paper()),
            Tier::Test => (GeneratorSpec::test(), UnetPPSpec::test(), DiscriminatorSpec::test()),
        };
        Self { backbone, generator, unetpp, discriminator, dynamic, init_seed }
    }

    pub fn patch_size(&self) -> usize {
        match self.backbone {
            Backbone::Pix2pixResnet9 => self.generator.patch_size,
            Backbone::UnetPP => self.unetpp.patch_size,
        }
    }
}

/// Parameter store plus the modules that read from it.
#[derive(Clone, Debug)]
pub struct Network<T> {
    pub config: NetworkConfig,
    pub store: ParamStore<T>,
    pub generator: GeneratorModel,
    pub controller: Option<DynamicConvController>,
    /// One per organelle in channel order; `None` for the UNet++ backbone.
    pub discriminators: Option<[PatchDiscriminator; 4]>,
}

impl<T: Scalar> Network<T> {
    pub fn build(config: NetworkConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(ChaCha8Rng::seed_from_u64(config.init_seed));
        let generator = match config.backbone {
            Backbone::Pix2pixResnet9 => {
                GeneratorModel::Resnet(ResnetGenerator::build(config.generator, &mut store, &mut init)?)
            }
            Backbone::UnetPP => GeneratorModel::UnetPP(UnetPlusPlus::build(config.unetpp, &mut store, &mut init)?),
        };
        let controller = if config.dynamic {
            Some(DynamicConvController::build(generator.first_conv(), &mut store, &mut init)?)
        } else {
            None
        };
        let discriminators = if config.backbone.adversarial() {
            let ds: Vec<PatchDiscriminator> = CHANNEL_ORDER
                .iter()
                .map(|o| PatchDiscriminator::build(config.discriminator, &mut store, &mut init, &format!("disc.{o}")))
                .collect::<Result<_>>()?;
            Some(ds.try_into().expect("four discriminators"))
        } else {
            None
        };
        Ok(Self { config, store, generator, controller, discriminators })
    }

    /// First-conv weights for a batch whose items have the given modalities.
    pub fn first_conv_params(
        &self,
        g: &mut Graph<T>,
        mode: ParamMode,
        modalities: &[Modality],
    ) -> Result<FirstConvParams> {
        match &self.controller {
            None => Ok(FirstConvParams::Static),
            Some(c) => Ok(FirstConvParams::PerSample(
                modalities
                    .iter()
                    .map(|&m| c.generate(g, &self.store, mode, ModalityCode::of(m)))
                    .collect::<Result<_>>()?,
            )),
        }
    }

    /// Generator forward over the requested heads.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        mode: ParamMode,
        x: Var,
        modalities: &[Modality],
        heads: &[Organelle],
    ) -> Result<HeadOutputs> {
        let first = self.first_conv_params(g, mode, modalities)?;
        self.generator.forward(g, &self.store, mode, x, &first, heads)
    }

    /// Inference forward: `(batch, 1, H, W)` to `(batch, 4, H, W)`.
    pub fn predict(&self, x: &Tensor<T>, modalities: &[Modality]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let first = self.first_conv_params(&mut g, ParamMode::Frozen, modalities)?;
        let out = self.generator.forward_all(&mut g, &self.store, ParamMode::Frozen, xv, &first)?;
        Ok(g.value(out).clone())
    }

    pub fn discriminator(&self, o: Organelle) -> Option<&PatchDiscriminator> {
        self.discriminators.as_ref().map(|d| &d[o.index()])
    }

    /// Everything the generator update may touch (controller included).
    pub fn generator_params(&self) -> Vec<ParamId> {
        let mut p = self.generator.all_params();
        if let Some(c) = &self.controller {
            p.extend(c.params());
        }
        p
    }

    pub fn discriminator_params(&self, o: Organelle) -> Vec<ParamId> {
        self.discriminator(o).map(|d| d.params()).unwrap_or_default()
    }

    /// Parameters that belong to organelle `o` alone: its decoder head and
    /// its discriminator.
    pub fn exclusive_params(&self, o: Organelle) -> Vec<ParamId> {
        let mut p = self.generator.head_params(o);
        p.extend(self.discriminator_params(o));
        p
    }

    pub fn divisor(&self) -> usize {
        self.generator.divisor()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(backbone: Backbone, dynamic: bool) -> Network<f64> {
        Network::build(NetworkConfig::for_tier(Tier::Test, backbone, dynamic, 5)).unwrap()
    }

    fn input(n: usize, size: usize) -> Tensor<f64> {
        Tensor::from_fn(&[n, 1, size, size], |i| ((i * 37 % 101) as f64 / 50.0) - 1.0)
    }

    #[test]
    fn resnet_shape_and_tanh_bound() {
        let net = tiny(Backbone::Pix2pixResnet9, false);
        let y = net.predict(&input(2, 64), &[Modality::BF; 2]).unwrap();
        assert_eq!(y.shape(), &[2, 4, 64, 64]);
        assert!(y.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn resnet_rejects_indivisible_input() {
        let net = tiny(Backbone::Pix2pixResnet9, false);
        assert!(matches!(net.predict(&input(1, 66), &[Modality::BF]), Err(IslError::Shape(_))));
    }

    #[test]
    fn unetpp_shape_and_divisor() {
        let net = tiny(Backbone::UnetPP, false);
        assert!(net.discriminators.is_none());
        let y = net.predict(&input(1, 64), &[Modality::PC]).unwrap();
        assert_eq!(y.shape(), &[1, 4, 64, 64]);
        assert!(y.data().iter().all(|v| v.abs() < 1.0));
        assert!(matches!(net.predict(&input(1, 66), &[Modality::PC]), Err(IslError::Shape(_))));
    }

    #[test]
    fn patchgan_logit_map_is_six_by_six() {
        let net = tiny(Backbone::Pix2pixResnet9, false);
        let d = net.discriminator(Organelle::Nucleus).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 2, 64, 64], 0.3));
        let y = d.forward(&mut g, &net.store, ParamMode::Frozen, x).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 6, 6]);
        let bad = g.constant(Tensor::zeros(&[1, 3, 64, 64]));
        assert!(matches!(d.forward(&mut g, &net.store, ParamMode::Frozen, bad), Err(IslError::Shape(_))));
    }

    #[test]
    fn discriminators_have_disjoint_parameters() {
        let net = tiny(Backbone::Pix2pixResnet9, false);
        let a = net.discriminator_params(Organelle::Mitochondria);
        let b = net.discriminator_params(Organelle::Actin);
        assert!(a.iter().all(|p| !b.contains(p)));
    }

    #[test]
    fn construction_is_deterministic() {
        let a = tiny(Backbone::Pix2pixResnet9, true);
        let b = tiny(Backbone::Pix2pixResnet9, true);
        for id in a.store.ids() {
            assert_eq!(a.store.get(id).data(), b.store.get(id).data());
        }
    }

    #[test]
    fn controller_matches_first_conv_size() {
        let net = tiny(Backbone::Pix2pixResnet9, true);
        let c = net.controller.as_ref().unwrap();
        assert_eq!(c.output_len(), net.generator.first_conv().param_count());
    }

    #[test]
    fn modality_code_changes_dynamic_output() {
        let net = tiny(Backbone::Pix2pixResnet9, true);
        let x = input(1, 64);
        let bf = net.predict(&x, &[Modality::BF]).unwrap();
        let dic = net.predict(&x, &[Modality::DIC]).unwrap();
        assert_ne!(bf, dic);
    }

    #[test]
    fn head_perturbation_changes_only_its_channel() {
        let mut net = tiny(Backbone::Pix2pixResnet9, false);
        let x = input(1, 64);
        let before = net.predict(&x, &[Modality::BF]).unwrap();
        for id in net.generator.head_params(Organelle::Tubulin) {
            for v in net.store.get_mut(id).data_mut() {
                *v += 0.05;
            }
        }
        let after = net.predict(&x, &[Modality::BF]).unwrap();
        let plane = 64 * 64;
        for c in 0..4 {
            let same = before.data()[c * plane..(c + 1) * plane] == after.data()[c * plane..(c + 1) * plane];
            assert_eq!(same, c != Organelle::Tubulin.index(), "channel {c}");
        }
    }

    #[test]
    fn enum_strings_round_trip() {
        assert_eq!("pix2pix".parse::<Backbone>().unwrap(), Backbone::Pix2pixResnet9);
        assert_eq!("UNETPP".parse::<Backbone>().unwrap(), Backbone::UnetPP);
        assert_eq!("Dynamic".parse::<Strategy>().unwrap(), Strategy::Dynamic);
        assert!("both".parse::<Strategy>().is_err());
        let cfg = NetworkConfig::for_tier(Tier::Test, Backbone::UnetPP, false, 1);
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<NetworkConfig>(&json).unwrap(), cfg);
    }
}
