//! Intensity rescaling, percentile weight masks, cropping and the dihedral
//! training augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{ImagePlane, LabelAvailability, Modality, NormalizedPlane, Organelle, Sample, CHANNEL_ORDER};
use crate::{IslError, Result, Scalar};

const U16_MAX: f64 = 65535.0;

/// `v -> 2v/65535 - 1`, evaluated as `(2v - 65535) / 65535` so the result
/// is the correctly rounded value of the exact rational.
pub fn rescale_to_model<T: Scalar>(p: &ImagePlane) -> NormalizedPlane<T> {
    let denom = T::lit(U16_MAX);
    let values = p.values().iter().map(|&v| T::lit(2.0 * v as f64 - U16_MAX) / denom).collect();
    NormalizedPlane::from_raw(p.height(), p.width(), values).expect("dimensions come from a valid plane")
}

/// Clamps to [-1, 1] and maps back to `round((v + 1) / 2 * 65535)`. NaN maps
/// to 0.
pub fn rescale_to_uint16<T: Scalar>(n: &NormalizedPlane<T>) -> ImagePlane {
    let values = n.values().iter().map(|&v| to_u16(v)).collect();
    ImagePlane::new(n.height(), n.width(), values).expect("dimensions come from a valid plane")
}

pub(crate) fn to_u16<T: Scalar>(v: T) -> u16 {
    let c = v.max(-T::one()).min(T::one());
    let c = if c.is_nan() { -T::one() } else { c };
    ((c + T::one()) * T::lit(U16_MAX / 2.0)).round().to_f64().unwrap_or(0.0) as u16
}

/// Linear-interpolation percentile (`pct` in [0, 100]) of unsorted data.
pub fn percentile<T: Scalar>(values: &[T], pct: f64) -> T {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    percentile_sorted(&sorted, pct)
}

pub(crate) fn percentile_sorted<T: Scalar>(sorted: &[T], pct: f64) -> T {
    assert!(!sorted.is_empty(), "percentile of empty data");
    let rank = pct.clamp(0.0, 100.0) / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = T::lit(rank - lo as f64);
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Weighting-mask parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    pub lo_pct: f64,
    pub hi_pct: f64,
    pub low_weight: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { lo_pct: 2.0, hi_pct: 99.8, low_weight: 0.1 }
    }
}

/// Per-pixel loss weights: 1 inside the ground truth's percentile band,
/// `low_weight` outside.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMask<T> {
    height: usize,
    width: usize,
    weights: Vec<T>,
}

impl<T: Scalar> WeightMask<T> {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn uniform(height: usize, width: usize) -> Self {
        Self { height, width, weights: vec![T::one(); height * width] }
    }
}

pub fn percentile_weight_mask<T: Scalar>(gt: &NormalizedPlane<T>, cfg: &MaskConfig) -> WeightMask<T> {
    let mut sorted = gt.values().to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let lo = percentile_sorted(&sorted, cfg.lo_pct);
    let hi = percentile_sorted(&sorted, cfg.hi_pct);
    let low = T::lit(cfg.low_weight);
    let weights = gt.values().iter().map(|&v| if lo <= v && v <= hi { T::one() } else { low }).collect();
    WeightMask { height: gt.height(), width: gt.width(), weights }
}

/// Row-major grid rotation by `k` quarter turns counter-clockwise.
pub fn rot90_grid<V: Copy>(values: &[V], h: usize, w: usize, k: usize) -> (Vec<V>, usize, usize) {
    let k = k % 4;
    let (oh, ow) = if k % 2 == 1 { (w, h) } else { (h, w) };
    let mut out = Vec::with_capacity(values.len());
    for y in 0..oh {
        for x in 0..ow {
            let (sy, sx) = match k {
                0 => (y, x),
                1 => (x, w - 1 - y),
                2 => (h - 1 - y, w - 1 - x),
                _ => (h - 1 - x, y),
            };
            out.push(values[sy * w + sx]);
        }
    }
    (out, oh, ow)
}

pub fn flip_grid<V: Copy>(values: &[V], w: usize) -> Vec<V> {
    let mut out = values.to_vec();
    for row in out.chunks_mut(w) {
        row.reverse();
    }
    out
}

/// One element of the 8-member dihedral group: rotate `k` quarter turns,
/// then optionally mirror left-right.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub k: usize,
    pub flip: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral { k: 0, flip: false };

    /// Uniform quarter-turn count, then a fair coin for the flip.
    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let k = rng.random_range(0..4);
        let flip = rng.random_bool(0.5);
        Self { k, flip }
    }

    pub fn apply<V: Copy>(&self, values: &[V], h: usize, w: usize) -> (Vec<V>, usize, usize) {
        let (r, oh, ow) = rot90_grid(values, h, w, self.k);
        if self.flip {
            (flip_grid(&r, ow), oh, ow)
        } else {
            (r, oh, ow)
        }
    }

    pub fn apply_plane<T: Scalar>(&self, p: &NormalizedPlane<T>) -> NormalizedPlane<T> {
        let (v, h, w) = self.apply(p.values(), p.height(), p.width());
        NormalizedPlane::from_raw(h, w, v).expect("rotation preserves size")
    }

    pub fn apply_mask<T: Scalar>(&self, m: &WeightMask<T>) -> WeightMask<T> {
        let (weights, height, width) = self.apply(&m.weights, m.height, m.width);
        WeightMask { height, width, weights }
    }
}

/// A [`Sample`] mapped into model space.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedSample<T> {
    pub id: String,
    pub modality: Modality,
    pub input: NormalizedPlane<T>,
    pub targets: [Option<NormalizedPlane<T>>; 4],
    pub availability: LabelAvailability,
}

impl<T: Scalar> NormalizedSample<T> {
    pub fn from_sample(s: &Sample) -> Self {
        Self {
            id: s.id.clone(),
            modality: s.modality,
            input: rescale_to_model(&s.input),
            targets: std::array::from_fn(|i| s.targets[i].as_ref().map(rescale_to_model)),
            availability: s.availability,
        }
    }
}

/// Aligned training patch: input, labelled targets and their weight masks.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair<T> {
    pub sample_id: String,
    pub modality: Modality,
    pub availability: LabelAvailability,
    pub input: NormalizedPlane<T>,
    pub targets: [Option<NormalizedPlane<T>>; 4],
    pub masks: [Option<WeightMask<T>>; 4],
}

impl<T: Scalar> PatchPair<T> {
    pub fn size(&self) -> (usize, usize) {
        self.input.dims()
    }

    pub fn target(&self, o: Organelle) -> Option<&NormalizedPlane<T>> {
        self.targets[o.index()].as_ref()
    }

    pub fn mask(&self, o: Organelle) -> Option<&WeightMask<T>> {
        self.masks[o.index()].as_ref()
    }

    /// Checks patch invariants: common dimensions, masks exactly where labelled.
    pub fn validate(&self) -> Result<()> {
        let dims = self.input.dims();
        if !self.availability.any() {
            return Err(IslError::Validation(format!("{}: no organelle labeled", self.sample_id)));
        }
        for o in CHANNEL_ORDER {
            let has = self.availability.has(o);
            if has != self.target(o).is_some() || has != self.mask(o).is_some() {
                return Err(IslError::Validation(format!(
                    "{}: target/mask presence disagrees with availability for {o}",
                    self.sample_id
                )));
            }
            if let (Some(t), Some(m)) = (self.target(o), self.mask(o)) {
                if t.dims() != dims || (m.height, m.width) != dims {
                    return Err(IslError::Validation(format!("{}: patch size mismatch for {o}", self.sample_id)));
                }
            }
        }
        Ok(())
    }
}

/// Reflect-pads a grid to at least `min_h x min_w`, splitting the padding
/// between the two sides (extra pixel at the bottom/right).
pub fn reflect_pad_grid<V: Copy>(values: &[V], h: usize, w: usize, min_h: usize, min_w: usize) -> (Vec<V>, usize, usize) {
    use islab_tensor::kernels::reflect_index;
    let (ph, pw) = (h.max(min_h), w.max(min_w));
    let (top, left) = ((ph - h) / 2, (pw - w) / 2);
    let mut out = Vec::with_capacity(ph * pw);
    for y in 0..ph {
        let sy = reflect_index(y as isize - top as isize, h);
        for x in 0..pw {
            out.push(values[sy * w + reflect_index(x as isize - left as isize, w)]);
        }
    }
    (out, ph, pw)
}

/// Offset of the original image inside a grid padded by [`reflect_pad_grid`].
pub fn pad_offset(h: usize, w: usize, min_h: usize, min_w: usize) -> (usize, usize) {
    ((h.max(min_h) - h) / 2, (w.max(min_w) - w) / 2)
}

fn crop_grid<V: Copy>(values: &[V], w: usize, top: usize, left: usize, size: usize) -> Vec<V> {
    let mut out = Vec::with_capacity(size * size);
    for y in top..top + size {
        out.extend_from_slice(&values[y * w + left..y * w + left + size]);
    }
    out
}

fn crop_plane<T: Scalar>(p: &NormalizedPlane<T>, size: usize, top: usize, left: usize) -> NormalizedPlane<T> {
    let (v, _, pw) = reflect_pad_grid(p.values(), p.height(), p.width(), size, size);
    NormalizedPlane::from_raw(size, size, crop_grid(&v, pw, top, left, size)).expect("crop is in bounds")
}

/// Crops a `size x size` patch at one uniformly drawn offset shared by the
/// input and every target; masks are computed from the cropped targets.
pub fn random_crop<T: Scalar, R: Rng + ?Sized>(
    s: &NormalizedSample<T>,
    size: usize,
    mask_cfg: &MaskConfig,
    rng: &mut R,
) -> PatchPair<T> {
    let (h, w) = s.input.dims();
    let (ph, pw) = (h.max(size), w.max(size));
    let top = rng.random_range(0..=ph - size);
    let left = rng.random_range(0..=pw - size);
    crop_at(s, size, top, left, mask_cfg)
}

/// Deterministic crop at `(top, left)` of the reflect-padded image.
pub fn crop_at<T: Scalar>(
    s: &NormalizedSample<T>,
    size: usize,
    top: usize,
    left: usize,
    mask_cfg: &MaskConfig,
) -> PatchPair<T> {
    let targets: [Option<NormalizedPlane<T>>; 4] =
        std::array::from_fn(|i| s.targets[i].as_ref().map(|t| crop_plane(t, size, top, left)));
    let masks = std::array::from_fn(|i| targets[i].as_ref().map(|t| percentile_weight_mask(t, mask_cfg)));
    PatchPair {
        sample_id: s.id.clone(),
        modality: s.modality,
        availability: s.availability,
        input: crop_plane(&s.input, size, top, left),
        targets,
        masks,
    }
}

/// Applies `t` jointly to the input, every target and every mask.
pub fn augment_with<T: Scalar>(p: &PatchPair<T>, t: Dihedral) -> PatchPair<T> {
    PatchPair {
        sample_id: p.sample_id.clone(),
        modality: p.modality,
        availability: p.availability,
        input: t.apply_plane(&p.input),
        targets: std::array::from_fn(|i| p.targets[i].as_ref().map(|x| t.apply_plane(x))),
        masks: std::array::from_fn(|i| p.masks[i].as_ref().map(|m| t.apply_mask(m))),
    }
}

/// Random quarter rotation plus a 50% horizontal flip, shared by all planes.
pub fn augment<T: Scalar, R: Rng + ?Sized>(p: &PatchPair<T>, rng: &mut R) -> PatchPair<T> {
    augment_with(p, Dihedral::draw(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn endpoints_and_exact_midvalue() {
        let p = ImagePlane::new(1, 3, vec![0, 65535, 13107]).unwrap();
        let n = rescale_to_model::<f64>(&p);
        assert_eq!(n.values(), &[-1.0, 1.0, -0.6]);
        assert_eq!(rescale_to_uint16(&n), p);
    }

    #[test]
    fn out_of_range_outputs_clamp() {
        let n = NormalizedPlane::from_raw(1, 4, vec![1.7f64, -3.0, f64::NAN, 0.0]).unwrap();
        assert_eq!(rescale_to_uint16(&n).values(), &[65535, 0, 0, 32768]);
    }

    #[test]
    fn all_zero_plane_maps_to_minus_one() {
        let n = rescale_to_model::<f32>(&ImagePlane::filled(4, 4, 0));
        assert!(n.values().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn constant_ground_truth_gives_uniform_mask() {
        let gt = NormalizedPlane::from_raw(8, 8, vec![0.25f64; 64]).unwrap();
        let m = percentile_weight_mask(&gt, &MaskConfig::default());
        assert!(m.weights().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn single_outlier_is_down_weighted() {
        let mut v: Vec<f64> = (0..1000).map(|i| -0.5 + i as f64 * 1e-4).collect();
        v[417] = 0.99;
        let gt = NormalizedPlane::from_raw(25, 40, v).unwrap();
        let m = percentile_weight_mask(&gt, &MaskConfig::default());
        assert_eq!(m.weights()[417], 0.1);
    }

    #[test]
    fn exact_size_crop_is_whole_image() {
        let s = NormalizedSample::<f64> {
            id: "a".into(),
            modality: Modality::BF,
            input: NormalizedPlane::from_raw(8, 8, (0..64).map(|i| i as f64 / 64.0).collect()).unwrap(),
            targets: Default::default(),
            availability: LabelAvailability::none(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = random_crop(&s, 8, &MaskConfig::default(), &mut rng);
        assert_eq!(p.input, s.input);
    }

    #[test]
    fn rotation_by_two_twice_is_identity() {
        let v: Vec<u32> = (0..12).collect();
        let t = Dihedral { k: 2, flip: false };
        let (a, h, w) = t.apply(&v, 3, 4);
        let (b, _, _) = t.apply(&a, h, w);
        assert_eq!(b, v);
        assert_eq!(Dihedral::IDENTITY.apply(&v, 3, 4).0, v);
    }

    #[test]
    fn reflect_pad_keeps_original_at_offset() {
        let v: Vec<u32> = (0..6).collect();
        let (p, ph, pw) = reflect_pad_grid(&v, 2, 3, 5, 6);
        assert_eq!((ph, pw), (5, 6));
        let (top, left) = pad_offset(2, 3, 5, 6);
        for y in 0..2 {
            for x in 0..3 {
                assert_eq!(p[(y + top) * pw + x + left], v[y * 3 + x]);
            }
        }
    }
}
