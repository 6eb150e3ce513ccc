//! Partial-label adaptive loss.
//!
//! Predictions for organelles a sample has no ground truth for are dropped
//! before the loss is formed, so they contribute nothing, not even a zero
//! that would still route gradients. Per sample the loss is
//! `lambda1 * mean_k L1_k + lambda2 * mean_k G_k` over its labelled
//! organelles `k`, where `L1_k` is the mask-weighted mean absolute error and
//! `G_k` the generator's adversarial cross-entropy. The batch loss is the mean
//! over samples.

use std::sync::Arc;

use islab_tensor::{Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::domain::{LabelAvailability, Modality, Organelle, CHANNEL_ORDER};
use crate::models::{HeadOutputs, ParamMode, PatchDiscriminator};
use crate::transforms::{MaskConfig, PatchPair};
use crate::{IslError, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    #[serde(default)]
    pub mask: MaskConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda1: 100.0, lambda2: 1.0, mask: MaskConfig::default() }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let m = &self.mask;
        if !(self.lambda1 > 0.0 && self.lambda2 > 0.0 && m.low_weight > 0.0) {
            return Err(IslError::Config("loss weights must all be > 0".into()));
        }
        if !(0.0 <= m.lo_pct && m.lo_pct <= m.hi_pct && m.hi_pct <= 100.0) {
            return Err(IslError::Config(format!("bad percentile band [{}, {}]", m.lo_pct, m.hi_pct)));
        }
        Ok(())
    }
}

/// Keeps only the labelled channels of a `(batch, 4, H, W)` prediction, in
/// channel order.
pub fn transform_t<T: Scalar>(pred: &Tensor<T>, avail: LabelAvailability) -> Result<Tensor<T>> {
    let idx = selected(pred.shape(), avail)?;
    Ok(pred.select_channels(&idx)?)
}

/// Graph version of [`transform_t`].
pub fn transform_t_graph<T: Scalar>(g: &mut Graph<T>, pred: Var, avail: LabelAvailability) -> Result<Var> {
    let idx = selected(g.shape(pred), avail)?;
    Ok(g.select_channels(pred, &idx)?)
}

fn selected(shape: &[usize], avail: LabelAvailability) -> Result<Vec<usize>> {
    if shape.len() != 4 || shape[1] != 4 {
        return Err(IslError::Shape(format!("expected (batch, 4, H, W) prediction, got {shape:?}")));
    }
    if !avail.any() {
        return Err(IslError::Validation("no organelle labeled".into()));
    }
    Ok(avail.labeled().map(|o| o.index()).collect())
}

/// Mean of `|pred - gt| * mask` over every element.
pub fn weighted_l1<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, mask: &Tensor<T>) -> Result<T> {
    if pred.shape() != gt.shape() || pred.shape() != mask.shape() {
        return Err(IslError::Shape(format!(
            "weighted_l1: pred {:?}, gt {:?}, mask {:?}",
            pred.shape(),
            gt.shape(),
            mask.shape()
        )));
    }
    let n = T::from_usize(pred.numel().max(1)).unwrap();
    let sum: T = pred
        .data()
        .iter()
        .zip(gt.data())
        .zip(mask.data())
        .map(|((&p, &t), &m)| (p - t).abs() * m)
        .sum();
    Ok(sum / n)
}

/// Discriminator objective `0.5 * (BCE(D(src, real), 1) + BCE(D(src, fake), 0))`.
/// `fake` is read as a constant, so no gradient reaches the generator.
pub fn discriminator_loss<T: Scalar>(
    g: &mut Graph<T>,
    disc: &PatchDiscriminator,
    store: &ParamStore<T>,
    source: Var,
    real: Var,
    fake: Var,
) -> Result<Var> {
    let fake = g.constant_arc(g.value_arc(fake));
    let n = g.shape(source)[0];
    let half = T::lit(0.5) / T::from_usize(n).unwrap();
    let real_pair = g.concat_channels(&[source, real])?;
    let real_logits = disc.forward(g, store, ParamMode::Train, real_pair)?;
    let real_rows = g.bce_logits_rows(real_logits, T::one())?;
    let real_term = g.weighted_sum(real_rows, &vec![half; n])?;
    let fake_pair = g.concat_channels(&[source, fake])?;
    let fake_logits = disc.forward(g, store, ParamMode::Train, fake_pair)?;
    let fake_rows = g.bce_logits_rows(fake_logits, T::zero())?;
    let fake_term = g.weighted_sum(fake_rows, &vec![half; n])?;
    Ok(g.add_scalars(&[real_term, fake_term])?)
}

/// Per-row generator adversarial loss `BCE(D(src, fake), 1)`, with the
/// discriminator frozen. Output `[batch]`.
pub fn generator_adversarial_rows<T: Scalar>(
    g: &mut Graph<T>,
    disc: &PatchDiscriminator,
    store: &ParamStore<T>,
    source: Var,
    fake: Var,
) -> Result<Var> {
    let pair = g.concat_channels(&[source, fake])?;
    let logits = disc.forward(g, store, ParamMode::Frozen, pair)?;
    Ok(g.bce_logits_rows(logits, T::one())?)
}

/// `(d_loss, g_adv_loss)` for one organelle's discriminator.
pub fn cgan_losses<T: Scalar>(
    g: &mut Graph<T>,
    disc: &PatchDiscriminator,
    store: &ParamStore<T>,
    source: Var,
    real: Var,
    fake: Var,
) -> Result<(Var, Var)> {
    let d = discriminator_loss(g, disc, store, source, real, fake)?;
    let rows = generator_adversarial_rows(g, disc, store, source, fake)?;
    let adv = g.mean(rows);
    Ok((d, adv))
}

/// A batch of patches rearranged for the loss: the stacked sources plus, per
/// organelle, the rows that carry that label and their targets and masks.
#[derive(Clone, Debug)]
pub struct LossBatch<T> {
    pub sample_ids: Vec<String>,
    pub modalities: Vec<Modality>,
    pub availability: Vec<LabelAvailability>,
    /// `(batch, 1, H, W)`.
    pub sources: Arc<Tensor<T>>,
    /// Batch rows labelled for each organelle.
    pub rows: [Vec<usize>; 4],
    /// `(rows[k].len(), 1, H, W)` targets and masks, `None` when no row has the label.
    pub targets: [Option<Arc<Tensor<T>>>; 4],
    pub masks: [Option<Arc<Tensor<T>>>; 4],
}

impl<T: Scalar> LossBatch<T> {
    /// Validates every patch before anything is computed.
    pub fn from_patches(patches: &[PatchPair<T>]) -> Result<Self> {
        let first = patches.first().ok_or_else(|| IslError::Validation("empty batch".into()))?;
        let (h, w) = first.size();
        for p in patches {
            p.validate()?;
            if p.size() != (h, w) {
                return Err(IslError::Validation(format!(
                    "{}: patch {:?} differs from batch size {:?}",
                    p.sample_id,
                    p.size(),
                    (h, w)
                )));
            }
        }
        let plane = h * w;
        let mut src = Vec::with_capacity(patches.len() * plane);
        for p in patches {
            src.extend_from_slice(p.input.values());
        }
        let mut rows: [Vec<usize>; 4] = Default::default();
        let mut targets: [Option<Arc<Tensor<T>>>; 4] = Default::default();
        let mut masks: [Option<Arc<Tensor<T>>>; 4] = Default::default();
        for o in CHANNEL_ORDER {
            let k = o.index();
            rows[k] = (0..patches.len()).filter(|&b| patches[b].availability.has(o)).collect();
            if rows[k].is_empty() {
                continue;
            }
            let mut t = Vec::with_capacity(rows[k].len() * plane);
            let mut m = Vec::with_capacity(rows[k].len() * plane);
            for &b in &rows[k] {
                t.extend_from_slice(patches[b].target(o).expect("validated").values());
                m.extend_from_slice(patches[b].mask(o).expect("validated").weights());
            }
            let shape = [rows[k].len(), 1, h, w];
            targets[k] = Some(Arc::new(Tensor::from_vec(&shape, t)?));
            masks[k] = Some(Arc::new(Tensor::from_vec(&shape, m)?));
        }
        Ok(Self {
            sample_ids: patches.iter().map(|p| p.sample_id.clone()).collect(),
            modalities: patches.iter().map(|p| p.modality).collect(),
            availability: patches.iter().map(|p| p.availability).collect(),
            sources: Arc::new(Tensor::from_vec(&[patches.len(), 1, h, w], src)?),
            rows,
            targets,
            masks,
        })
    }

    pub fn len(&self) -> usize {
        self.availability.len()
    }

    pub fn is_empty(&self) -> bool {
        self.availability.is_empty()
    }

    /// Organelles labelled somewhere in the batch.
    pub fn included(&self) -> Vec<Organelle> {
        CHANNEL_ORDER.iter().copied().filter(|o| !self.rows[o.index()].is_empty()).collect()
    }

    /// Sources of the rows labelled for `o`, `(rows, 1, H, W)`.
    pub fn sources_for(&self, o: Organelle) -> Result<Tensor<T>> {
        Ok(self.sources.gather_batch(&self.rows[o.index()])?)
    }

    /// Weight of each labelled row of `o` in the batch mean: `1 / (B * |A_b|)`.
    fn row_coeffs(&self, o: Organelle, scale: f64) -> Vec<T> {
        let b = self.len() as f64;
        self.rows[o.index()]
            .iter()
            .map(|&r| T::lit(scale / (b * self.availability[r].count() as f64)))
            .collect()
    }
}

/// Loss terms of one organelle within a batch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OrganelleLoss {
    /// Mean weighted L1 over the rows labelled for this organelle.
    pub weighted_l1: f64,
    /// Mean generator adversarial loss over the same rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_adv: Option<f64>,
    /// Discriminator loss of this step's update.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_loss: Option<f64>,
    pub rows: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    /// The lambda1-scaled weighted-L1 part of `total`.
    pub l1_term: f64,
    /// The lambda2-scaled adversarial part of `total`.
    pub adv_term: f64,
    /// Batch mean of each sample's weighted L1 over its labelled organelles.
    pub weighted_l1: f64,
    /// Indexed by channel; `None` for organelles excluded from this batch.
    pub organelles: [Option<OrganelleLoss>; 4],
    pub included: usize,
}

impl LossReport {
    pub fn excluded(&self, o: Organelle) -> bool {
        self.organelles[o.index()].is_none()
    }
}

/// Discriminators and the store they read from.
pub type DiscBank<'a, T> = (&'a [PatchDiscriminator; 4], &'a ParamStore<T>);

/// Builds the batch loss node from per-organelle head outputs
/// `(batch, 1, H, W)`. Heads for organelles absent from the batch are never
/// read. Without a discriminator bank only the L1 part is formed.
pub fn adaptive_loss<T: Scalar>(
    g: &mut Graph<T>,
    heads: &HeadOutputs,
    batch: &LossBatch<T>,
    discs: Option<DiscBank<'_, T>>,
    cfg: &LossConfig,
) -> Result<(Var, LossReport)> {
    cfg.validate()?;
    if let Some(i) = batch.availability.iter().position(|a| !a.any()) {
        return Err(IslError::Validation(format!("{}: no organelle labeled", batch.sample_ids[i])));
    }
    let mut parts = Vec::new();
    let mut report = LossReport::default();
    let mut source = None;
    for o in batch.included() {
        let k = o.index();
        let head = heads[k].ok_or_else(|| IslError::Validation(format!("no prediction for labelled organelle {o}")))?;
        let fake = g.gather_batch(head, &batch.rows[k])?;
        let target = batch.targets[k].clone().expect("rows non-empty");
        let mask = batch.masks[k].clone().expect("rows non-empty");
        let l1_rows = g.weighted_l1_rows(fake, target, mask)?;
        let l1_coeffs = batch.row_coeffs(o, cfg.lambda1);
        let l1 = g.weighted_sum(l1_rows, &l1_coeffs)?;
        let l1_vals = g.value(l1_rows).data().to_vec();
        report.l1_term += g.value(l1).item().to_f64_lossless();
        report.weighted_l1 += l1_vals
            .iter()
            .zip(batch.row_coeffs(o, 1.0))
            .map(|(v, c)| (*v * c).to_f64_lossless())
            .sum::<f64>();
        let mut entry = OrganelleLoss {
            weighted_l1: mean_f64(&l1_vals),
            rows: l1_vals.len(),
            ..Default::default()
        };
        parts.push(l1);
        if let Some((bank, store)) = discs {
            let src = *source.get_or_insert_with(|| g.constant_arc(batch.sources.clone()));
            let src_k = g.gather_batch(src, &batch.rows[k])?;
            let adv_rows = generator_adversarial_rows(g, &bank[k], store, src_k, fake)?;
            let adv = g.weighted_sum(adv_rows, &batch.row_coeffs(o, cfg.lambda2))?;
            report.adv_term += g.value(adv).item().to_f64_lossless();
            entry.g_adv = Some(mean_f64(g.value(adv_rows).data()));
            parts.push(adv);
        }
        report.organelles[k] = Some(entry);
        report.included += 1;
    }
    let total = g.add_scalars(&parts)?;
    report.total = g.value(total).item().to_f64_lossless();
    Ok((total, report))
}

fn mean_f64<T: Scalar>(v: &[T]) -> f64 {
    v.iter().map(|x| x.to_f64_lossless()).sum::<f64>() / v.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Backbone, Network, NetworkConfig, Tier};

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn transform_selects_labelled_channels() {
        let pred = Tensor::from_fn(&[1, 4, 1, 2], |i| i as f64);
        let all = transform_t(&pred, LabelAvailability::all()).unwrap();
        assert_eq!(all, pred);
        let n = transform_t(&pred, LabelAvailability::of(&[Organelle::Nucleus])).unwrap();
        assert_eq!(n.data(), &[2.0, 3.0]);
        let mt = transform_t(&pred, LabelAvailability::of(&[Organelle::Tubulin, Organelle::Mitochondria])).unwrap();
        assert_eq!(mt.data(), &[0.0, 1.0, 4.0, 5.0]);
        assert!(matches!(transform_t(&pred, LabelAvailability::none()), Err(IslError::Validation(_))));
    }

    #[test]
    fn weighted_l1_hand_cases() {
        let p = t(&[1, 1, 2, 2], &[0.5; 4]);
        assert_eq!(weighted_l1(&p, &p, &t(&[1, 1, 2, 2], &[1.0; 4])).unwrap(), 0.0);
        let z = t(&[1, 1, 2, 2], &[0.0; 4]);
        assert_eq!(weighted_l1(&p, &z, &t(&[1, 1, 2, 2], &[1.0; 4])).unwrap(), 0.5);
        // |0.2|*1 + |0.4|*0.1 + |0.1|*1 + |0.6|*0.1 = 0.4
        let p = t(&[1, 1, 2, 2], &[0.2, -0.4, 0.1, 0.6]);
        let m = t(&[1, 1, 2, 2], &[1.0, 0.1, 1.0, 0.1]);
        assert!((weighted_l1(&p, &z, &m).unwrap() - 0.1).abs() < 1e-12);
        assert!(weighted_l1(&p, &t(&[1, 1, 1, 4], &[0.0; 4]), &m).is_err());
    }

    #[test]
    fn zero_logits_give_ln2() {
        let net: Network<f64> = Network::build(NetworkConfig::for_tier(Tier::Test, Backbone::Pix2pixResnet9, false, 1)).unwrap();
        let mut store = net.store.clone();
        let d = net.discriminator(Organelle::Nucleus).unwrap();
        // zero final layer makes every logit 0
        let last = d.layers.last().unwrap();
        for id in last.params() {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let src = g.constant(Tensor::full(&[2, 1, 64, 64], 0.1));
        let real = g.constant(Tensor::full(&[2, 1, 64, 64], -0.3));
        let fake = g.constant(Tensor::full(&[2, 1, 64, 64], 0.7));
        let (dl, ga) = cgan_losses(&mut g, d, &store, src, real, fake).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((g.value(dl).item() - ln2).abs() < 1e-12);
        assert!((g.value(ga).item() - ln2).abs() < 1e-12);
    }

    #[test]
    fn doubling_lambda1_doubles_l1_term() {
        let net: Network<f64> = Network::build(NetworkConfig::for_tier(Tier::Test, Backbone::UnetPP, false, 2)).unwrap();
        let patch = crate::synthgen::random_patch("a", 64, &[Organelle::Nucleus, Organelle::Actin], 4);
        let batch = LossBatch::from_patches(std::slice::from_ref(&patch)).unwrap();
        let cfg = LossConfig::default();
        let run = |cfg: &LossConfig| {
            let mut g = Graph::new();
            let x = g.constant_arc(batch.sources.clone());
            let heads = net.forward(&mut g, ParamMode::Frozen, x, &batch.modalities, &CHANNEL_ORDER).unwrap();
            adaptive_loss(&mut g, &heads, &batch, None, cfg).unwrap().1
        };
        let a = run(&cfg);
        let b = run(&LossConfig { lambda1: 200.0, ..cfg });
        assert_eq!(b.l1_term, 2.0 * a.l1_term);
        assert!(a.excluded(Organelle::Mitochondria) && !a.excluded(Organelle::Actin));
        assert_eq!(a.included, 2);
    }
}
