//! Deterministic synthetic microscopy data.
//!
//! Each sample renders four procedural organelle maps (nuclei as filled
//! ellipses, mitochondria as short curved filaments, tubulin as fibres
//! radiating from the nucleus, actin as fibres along the cell periphery)
//! and derives the transmitted-light input from them with a modality-specific
//! analytic transform, so the input-to-target mapping is learnable. Which
//! targets are written follows a per-modality label-pattern table that
//! imitates the real data's partial labelling and class imbalance, including
//! the absence of actin labels for DIC.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{build_manifest, write_image, Layout, Manifest};
use crate::domain::{ImagePlane, LabelAvailability, Modality, NormalizedPlane, Organelle, Sample, CHANNEL_ORDER};
use crate::transforms::{percentile_weight_mask, MaskConfig, PatchPair};
use crate::{IslError, Result, Scalar};

use Organelle::{Actin as A, Mitochondria as M, Nucleus as N, Tubulin as T};

/// One allowed set of labelled organelles and its relative frequency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelPattern {
    pub organelles: LabelAvailability,
    pub weight: f64,
}

/// Shape parameters of the procedural organelles, in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeConfig {
    pub nuclei: (usize, usize),
    pub nucleus_radius: (f64, f64),
    pub mitochondria: (usize, usize),
    pub mito_length: (f64, f64),
    pub tubulin_fibres: (usize, usize),
    pub actin_fibres: (usize, usize),
    pub line_width: f64,
    pub noise_std: f64,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        Self {
            nuclei: (1, 3),
            nucleus_radius: (0.08, 0.16),
            mitochondria: (8, 16),
            mito_length: (0.06, 0.14),
            tubulin_fibres: (6, 12),
            actin_fibres: (4, 8),
            line_width: 1.2,
            noise_std: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Samples per study directory.
    #[serde(default = "default_study_size")]
    pub study_size: usize,
    #[serde(default = "default_patterns")]
    pub patterns: BTreeMap<Modality, Vec<LabelPattern>>,
    #[serde(default)]
    pub shapes: ShapeConfig,
}

fn default_study_size() -> usize {
    5
}

fn pattern(organelles: &[Organelle], weight: f64) -> LabelPattern {
    LabelPattern { organelles: LabelAvailability::of(organelles), weight }
}

/// Nucleus most common, then mitochondria, tubulin and actin rarest; DIC
/// never carries actin.
pub fn default_patterns() -> BTreeMap<Modality, Vec<LabelPattern>> {
    BTreeMap::from([
        (
            Modality::BF,
            vec![pattern(&[M, N], 4.0), pattern(&[N], 2.0), pattern(&[M, N, T], 2.0), pattern(&[N, A], 1.0), pattern(&[M, N, T, A], 1.0)],
        ),
        (
            Modality::PC,
            vec![pattern(&[M, N], 3.0), pattern(&[N], 2.0), pattern(&[N, T], 1.0), pattern(&[M, N, A], 1.0), pattern(&[M], 1.0)],
        ),
        (Modality::DIC, vec![pattern(&[M, N], 3.0), pattern(&[N], 3.0), pattern(&[M], 1.0), pattern(&[N, T], 1.0)]),
    ])
}

impl SynthConfig {
    pub fn new(n_samples: usize, size: usize, seed: u64) -> Self {
        Self {
            n_samples,
            height: size,
            width: size,
            seed,
            study_size: default_study_size(),
            patterns: default_patterns(),
            shapes: ShapeConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(IslError::Config(format!("synthetic images must be at least 16x16, got {}x{}", self.height, self.width)));
        }
        if self.study_size == 0 {
            return Err(IslError::Config("study_size must be >= 1".into()));
        }
        for m in Modality::ALL {
            let ps = self.patterns.get(&m).filter(|p| !p.is_empty());
            let ps = ps.ok_or_else(|| IslError::Config(format!("no label patterns for {m}")))?;
            for p in ps {
                if !p.organelles.any() || !(p.weight > 0.0) {
                    return Err(IslError::Config(format!("{m}: patterns need a label and a positive weight")));
                }
                if m == Modality::DIC && p.organelles.has(A) {
                    return Err(IslError::Config("DIC patterns may not include Actin".into()));
                }
            }
        }
        let s = &self.shapes;
        let ranges_ok = s.nuclei.0 >= 1
            && s.nuclei.0 <= s.nuclei.1
            && s.mitochondria.0 <= s.mitochondria.1
            && s.tubulin_fibres.0 <= s.tubulin_fibres.1
            && s.actin_fibres.0 <= s.actin_fibres.1
            && s.nucleus_radius.0 > 0.0
            && s.nucleus_radius.0 <= s.nucleus_radius.1
            && s.mito_length.0 <= s.mito_length.1
            && s.line_width > 0.0
            && s.noise_std >= 0.0;
        if !ranges_ok {
            return Err(IslError::Config("invalid organelle shape ranges".into()));
        }
        Ok(())
    }

    /// Modality of sample `i`: the three modalities take turns.
    pub fn modality_of(&self, i: usize) -> Modality {
        Modality::ALL[i % 3]
    }
}

/// Float canvas with values accumulated by max.
struct Canvas {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Canvas {
    fn new(h: usize, w: usize) -> Self {
        Self { h, w, v: vec![0.0; h * w] }
    }

    fn ellipse(&mut self, cy: f64, cx: f64, ry: f64, rx: f64, angle: f64, value: f64) {
        let (s, c) = angle.sin_cos();
        for y in 0..self.h {
            for x in 0..self.w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let u = (dx * c + dy * s) / rx;
                let v = (-dx * s + dy * c) / ry;
                let r = u * u + v * v;
                if r <= 1.0 {
                    let edge = ((1.0 - r) * 4.0).min(1.0);
                    let p = &mut self.v[y * self.w + x];
                    *p = p.max(value * edge);
                }
            }
        }
    }

    /// Polyline through `pts` with a soft Gaussian profile.
    fn polyline(&mut self, pts: &[(f64, f64)], width: f64, value: f64) {
        for seg in pts.windows(2) {
            let ((y0, x0), (y1, x1)) = (seg[0], seg[1]);
            let pad = 3.0 * width;
            let ymin = (y0.min(y1) - pad).floor().max(0.0) as usize;
            let ymax = ((y0.max(y1) + pad).ceil() as usize).min(self.h.saturating_sub(1));
            let xmin = (x0.min(x1) - pad).floor().max(0.0) as usize;
            let xmax = ((x0.max(x1) + pad).ceil() as usize).min(self.w.saturating_sub(1));
            let (dy, dx) = (y1 - y0, x1 - x0);
            let len2 = (dy * dy + dx * dx).max(1e-12);
            for y in ymin..=ymax {
                for x in xmin..=xmax {
                    let (py, px) = (y as f64 - y0, x as f64 - x0);
                    let t = ((py * dy + px * dx) / len2).clamp(0.0, 1.0);
                    let (ey, ex) = (py - t * dy, px - t * dx);
                    let d2 = ey * ey + ex * ex;
                    let a = value * (-d2 / (2.0 * width * width)).exp();
                    let p = &mut self.v[y * self.w + x];
                    *p = p.max(a);
                }
            }
        }
    }
}

fn range_usize(rng: &mut ChaCha8Rng, r: (usize, usize)) -> usize {
    rng.random_range(r.0..=r.1)
}

fn range_f64(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
    if r.0 == r.1 { r.0 } else { rng.random_range(r.0..r.1) }
}

/// The four organelle intensity maps of one sample, values in [0, 1].
pub struct OrganelleMaps {
    pub height: usize,
    pub width: usize,
    pub maps: [Vec<f64>; 4],
}

pub fn render_organelles(h: usize, w: usize, shapes: &ShapeConfig, rng: &mut ChaCha8Rng) -> OrganelleMaps {
    let side = h.min(w) as f64;
    let mut nuc = Canvas::new(h, w);
    let mut centres = Vec::new();
    for _ in 0..range_usize(rng, shapes.nuclei) {
        let cy = rng.random_range(0.2..0.8) * h as f64;
        let cx = rng.random_range(0.2..0.8) * w as f64;
        let r = range_f64(rng, shapes.nucleus_radius) * side;
        let aspect = rng.random_range(0.65..1.0);
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let value = rng.random_range(0.7..1.0);
        nuc.ellipse(cy, cx, r * aspect, r, angle, value);
        centres.push((cy, cx, r));
    }
    let mut mito = Canvas::new(h, w);
    for _ in 0..range_usize(rng, shapes.mitochondria) {
        let (cy, cx, r) = centres[rng.random_range(0..centres.len())];
        let dist = r * rng.random_range(1.1..2.2);
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let (y0, x0) = (cy + dist * theta.sin(), cx + dist * theta.cos());
        let len = range_f64(rng, shapes.mito_length) * side;
        let dir = rng.random_range(0.0..std::f64::consts::TAU);
        let bend = rng.random_range(-0.8..0.8);
        let pts: Vec<(f64, f64)> = (0..=6)
            .map(|i| {
                let t = i as f64 / 6.0;
                let a = dir + bend * t;
                (y0 + t * len * a.sin(), x0 + t * len * a.cos())
            })
            .collect();
        mito.polyline(&pts, shapes.line_width, rng.random_range(0.6..1.0));
    }
    let mut tub = Canvas::new(h, w);
    for _ in 0..range_usize(rng, shapes.tubulin_fibres) {
        let (cy, cx, r) = centres[rng.random_range(0..centres.len())];
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let (r0, r1) = (r * 1.05, r + side * rng.random_range(0.15..0.35));
        let wobble = rng.random_range(-0.3..0.3);
        let pts: Vec<(f64, f64)> = (0..=8)
            .map(|i| {
                let t = i as f64 / 8.0;
                let rad = r0 + t * (r1 - r0);
                let a = theta + wobble * t * t;
                (cy + rad * a.sin(), cx + rad * a.cos())
            })
            .collect();
        tub.polyline(&pts, shapes.line_width * 0.8, rng.random_range(0.4..0.8));
    }
    let mut act = Canvas::new(h, w);
    for _ in 0..range_usize(rng, shapes.actin_fibres) {
        // fibres hug the border of the field of view
        let edge = rng.random_range(0..4);
        let off = rng.random_range(0.04..0.14);
        let (a, b) = (rng.random_range(0.0..0.4), rng.random_range(0.6..1.0));
        let (hf, wf) = (h as f64 - 1.0, w as f64 - 1.0);
        let (p0, p1) = match edge {
            0 => ((off * hf, a * wf), (off * hf * 1.5, b * wf)),
            1 => (((1.0 - off) * hf, a * wf), ((1.0 - off * 1.5) * hf, b * wf)),
            2 => ((a * hf, off * wf), (b * hf, off * wf * 1.5)),
            _ => ((a * hf, (1.0 - off) * wf), (b * hf, (1.0 - off * 1.5) * wf)),
        };
        act.polyline(&[p0, p1], shapes.line_width, rng.random_range(0.5..0.9));
    }
    OrganelleMaps { height: h, width: w, maps: [mito.v, nuc.v, tub.v, act.v] }
}

fn box_blur(v: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let get = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        v[y * w + x]
    };
    let r = r as isize;
    let n = ((2 * r + 1) * (2 * r + 1)) as f64;
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut s = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    s += get(y + dy, x + dx);
                }
            }
            out[y as usize * w + x as usize] = s / n;
        }
    }
    out
}

/// Transmitted-light rendering of the organelle maps, values in [0, 1]
/// before noise.
pub fn render_input(maps: &OrganelleMaps, modality: Modality) -> Vec<f64> {
    let (h, w) = (maps.height, maps.width);
    let [m, n, t, a] = &maps.maps;
    let density: Vec<f64> = (0..h * w).map(|i| 0.5 * n[i] + 0.3 * m[i] + 0.2 * t[i] + 0.2 * a[i]).collect();
    match modality {
        // low-contrast absorption
        Modality::BF => {
            let b = box_blur(&density, h, w, 1);
            b.iter().map(|d| 0.65 - 0.3 * d).collect()
        }
        // bright halo around dark objects
        Modality::PC => {
            let b = box_blur(&density, h, w, 2);
            density.iter().zip(&b).map(|(d, bl)| 0.5 - 0.25 * d + 0.9 * (bl - d).max(0.0)).collect()
        }
        // diagonal shear relief
        Modality::DIC => {
            let at = |y: isize, x: isize| density[(y.clamp(0, h as isize - 1) as usize) * w + x.clamp(0, w as isize - 1) as usize];
            (0..h * w)
                .map(|i| {
                    let (y, x) = ((i / w) as isize, (i % w) as isize);
                    0.5 + 0.8 * (at(y + 1, x + 1) - at(y - 1, x - 1))
                })
                .collect()
        }
    }
}

fn to_plane(h: usize, w: usize, v: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> ImagePlane {
    let dist = Normal::new(0.0, noise.max(0.0)).expect("finite std");
    let vals = v
        .iter()
        .map(|&x| {
            let n = if noise > 0.0 { dist.sample(rng) } else { 0.0 };
            ((x + n).clamp(0.0, 1.0) * 65535.0).round() as u16
        })
        .collect();
    ImagePlane::new(h, w, vals).expect("sizes agree")
}

/// Planes of one synthetic sample: the input plus all four targets (the
/// caller decides which targets count as labelled).
pub struct SynthSample {
    pub modality: Modality,
    pub availability: LabelAvailability,
    pub input: ImagePlane,
    pub targets: [ImagePlane; 4],
}

impl SynthSample {
    /// The in-memory record `generate_dataset` would write for sample `i`;
    /// unlabelled organelle maps are dropped.
    pub fn to_sample(&self, cfg: &SynthConfig, i: usize) -> Sample {
        Sample {
            id: sample_id(i),
            study_id: study_id(cfg, i),
            modality: self.modality,
            input: self.input.clone(),
            targets: std::array::from_fn(|k| self.availability.has(CHANNEL_ORDER[k]).then(|| self.targets[k].clone())),
            availability: self.availability,
        }
    }
}

fn pick_pattern(patterns: &[LabelPattern], rng: &mut ChaCha8Rng) -> LabelAvailability {
    let total: f64 = patterns.iter().map(|p| p.weight).sum();
    let mut u = rng.random_range(0.0..total);
    for p in patterns {
        if u < p.weight {
            return p.organelles;
        }
        u -= p.weight;
    }
    patterns.last().expect("validated non-empty").organelles
}

/// Deterministically renders sample `i` of `cfg`.
pub fn render_sample(cfg: &SynthConfig, i: usize) -> SynthSample {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(i as u64 + 1);
    let modality = cfg.modality_of(i);
    let availability = pick_pattern(&cfg.patterns[&modality], &mut rng);
    let maps = render_organelles(cfg.height, cfg.width, &cfg.shapes, &mut rng);
    let input = render_input(&maps, modality);
    let noise = cfg.shapes.noise_std;
    let input = to_plane(cfg.height, cfg.width, &input, noise, &mut rng);
    // targets are fluorescence: dim background plus the organelle signal
    let targets = std::array::from_fn(|k| {
        let v: Vec<f64> = maps.maps[k].iter().map(|x| 0.05 + 0.85 * x).collect();
        to_plane(cfg.height, cfg.width, &v, noise * 0.5, &mut rng)
    });
    SynthSample { modality, availability, input, targets }
}

pub fn sample_id(i: usize) -> String {
    format!("s{i:04}")
}

pub fn study_id(cfg: &SynthConfig, i: usize) -> String {
    let m = cfg.modality_of(i);
    format!("{}{:02}", m.as_str().to_lowercase(), (i / 3) / cfg.study_size)
}

/// Writes the dataset under `out_dir` (study directories plus
/// `manifest.toml` with a relative root) and returns the manifest with
/// `out_dir` as its root.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    cfg.validate()?;
    let out = out_dir.as_ref();
    std::fs::create_dir_all(out).map_err(|e| IslError::io(out, e))?;
    for i in 0..cfg.n_samples {
        let s = render_sample(cfg, i);
        let dir = out.join(study_id(cfg, i));
        std::fs::create_dir_all(&dir).map_err(|e| IslError::io(&dir, e))?;
        let id = sample_id(i);
        write_image(&s.input, dir.join(format!("{id}_{}.tif", s.modality)))?;
        for o in s.availability.labeled() {
            write_image(&s.targets[o.index()], dir.join(format!("{id}_{o}.tif")))?;
        }
    }
    let manifest = build_manifest(out, &Layout::default())?;
    Manifest { root: ".".into(), entries: manifest.entries.clone() }.save(out.join("manifest.toml"))?;
    Ok(manifest)
}

/// Tiny deterministic planes for unit tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FixtureKind {
    /// Every pixel 13107.
    Constant,
    /// Row-major ascending values `0, 1, 2, ...`.
    Gradient,
    /// 8x8 blocks alternating between 0 and 65535.
    Checkerboard,
    /// Constant 13107 with a single 65535 pixel at (5, 9).
    SingleOutlier,
    /// Quadrants 10000 (top-left), 20000 (top-right), 30000 (bottom-left),
    /// 40000 (bottom-right).
    RotationProbe,
}

impl std::str::FromStr for FixtureKind {
    type Err = IslError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "constant" => FixtureKind::Constant,
            "gradient" => FixtureKind::Gradient,
            "checkerboard" => FixtureKind::Checkerboard,
            "single-outlier" => FixtureKind::SingleOutlier,
            "rotation-probe" => FixtureKind::RotationProbe,
            _ => return Err(IslError::Parse(format!("unknown fixture kind {s:?}"))),
        })
    }
}

pub const FIXTURE_SIZE: usize = 64;

pub fn make_unit_fixture(kind: FixtureKind) -> ImagePlane {
    let n = FIXTURE_SIZE;
    match kind {
        FixtureKind::Constant => ImagePlane::filled(n, n, 13107),
        FixtureKind::Gradient => ImagePlane::from_fn(n, n, |y, x| (y * n + x) as u16),
        FixtureKind::Checkerboard => ImagePlane::from_fn(n, n, |y, x| if (y / 8 + x / 8) % 2 == 0 { 0 } else { 65535 }),
        FixtureKind::SingleOutlier => ImagePlane::from_fn(n, n, |y, x| if (y, x) == (5, 9) { 65535 } else { 13107 }),
        FixtureKind::RotationProbe => ImagePlane::from_fn(n, n, |y, x| match (y < n / 2, x < n / 2) {
            (true, true) => 10000,
            (true, false) => 20000,
            (false, true) => 30000,
            (false, false) => 40000,
        }),
    }
}

/// A random training patch labelled for `labels`, with masks computed from
/// its targets.
pub fn random_patch<T: Scalar>(id: &str, size: usize, labels: &[Organelle], seed: u64) -> PatchPair<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = |rng: &mut ChaCha8Rng| {
        NormalizedPlane::from_raw(size, size, (0..size * size).map(|_| T::lit(rng.random_range(-1.0..1.0))).collect())
            .expect("square plane")
    };
    let input = plane(&mut rng);
    let availability = LabelAvailability::of(labels);
    let targets: [Option<NormalizedPlane<T>>; 4] =
        std::array::from_fn(|k| availability.has(CHANNEL_ORDER[k]).then(|| plane(&mut rng)));
    let masks = std::array::from_fn(|k| targets[k].as_ref().map(|t| percentile_weight_mask(t, &MaskConfig::default())));
    PatchPair { sample_id: id.to_string(), modality: Modality::ALL[(seed % 3) as usize], availability, input, targets, masks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_match_their_catalogue() {
        assert!(make_unit_fixture(FixtureKind::Constant).values().iter().all(|&v| v == 13107));
        let g = make_unit_fixture(FixtureKind::Gradient);
        assert!(g.values().windows(2).all(|w| w[1] == w[0] + 1));
        let o = make_unit_fixture(FixtureKind::SingleOutlier);
        assert_eq!(o.values().iter().filter(|&&v| v == 65535).count(), 1);
        let r = make_unit_fixture(FixtureKind::RotationProbe);
        assert_eq!((r.get(0, 0), r.get(0, 63), r.get(63, 0), r.get(63, 63)), (10000, 20000, 30000, 40000));
        assert!("sparkles".parse::<FixtureKind>().is_err());
    }

    #[test]
    fn dic_patterns_reject_actin() {
        let mut cfg = SynthConfig::new(3, 32, 0);
        cfg.patterns.get_mut(&Modality::DIC).unwrap().push(pattern(&[A], 1.0));
        assert!(matches!(cfg.validate(), Err(IslError::Config(_))));
    }

    #[test]
    fn rendering_is_deterministic_and_modality_dependent() {
        let cfg = SynthConfig::new(6, 32, 11);
        let a = render_sample(&cfg, 4);
        let b = render_sample(&cfg, 4);
        assert_eq!(a.input, b.input);
        assert_eq!(a.targets, b.targets);
        assert_ne!(render_sample(&cfg, 3).input, a.input);
    }
}
