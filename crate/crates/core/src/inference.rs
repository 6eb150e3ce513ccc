//! Whole-image prediction: sliding-window tiling, mean merging, quarter-turn
//! test-time augmentation and per-(modality, organelle) model routing.
//!
//! Inference runs in `f64` model space regardless of the scalar type a
//! network was trained in; [`Predictor`] converts at the boundary.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::write_image;
use crate::domain::{
    ChannelProvenance, ImagePlane, Modality, NormalizedPlane, Organelle, PredictionSet, Provenance, CHANNEL_ORDER,
};
use crate::models::checkpoint::Checkpoint;
use crate::models::{Backbone, Network, ParamMode, Strategy};
use crate::trainer::model_id;
use crate::transforms::{pad_offset, reflect_pad_grid, rescale_to_model, rescale_to_uint16, rot90_grid};
use crate::{Graph, IslError, Real, Result, Scalar, Tensor};

/// Window layout over an image already padded to at least `patch` per side.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileGrid {
    pub patch: usize,
    pub stride: usize,
    /// Padded dimensions the offsets refer to.
    pub height: usize,
    pub width: usize,
    /// `(top, left)` of each window, row-major over the grid.
    pub offsets: Vec<(usize, usize)>,
}

impl TileGrid {
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Number of windows covering each pixel.
    pub fn coverage(&self) -> Vec<u32> {
        let mut count = vec![0u32; self.height * self.width];
        for &(top, left) in &self.offsets {
            for y in top..top + self.patch {
                for c in &mut count[y * self.width + left..y * self.width + left + self.patch] {
                    *c += 1;
                }
            }
        }
        count
    }
}

/// Plans sliding windows for an `height x width` image. Sides shorter than
/// `patch` are planned at `patch`, the size they reach after reflect padding.
///
/// `stride = max(1, floor(patch * (1 - overlap)))`; the last window on each
/// axis is moved flush with the edge and duplicates are dropped. `overlap`
/// outside `[0, 1)` is clamped so coverage stays complete.
pub fn plan_tiles(height: usize, width: usize, patch: usize, overlap: f64) -> TileGrid {
    let overlap = overlap.clamp(0.0, 1.0);
    // The epsilon absorbs binary rounding in `1 - overlap` (10 * (1 - 0.8)
    // evaluates to 1.9999999999999996).
    let stride = ((patch as f64 * (1.0 - overlap) + 1e-9).floor() as usize).clamp(1, patch.max(1));
    let (h, w) = (height.max(patch), width.max(patch));
    let rows = axis_offsets(h, patch, stride);
    let cols = axis_offsets(w, patch, stride);
    let offsets = rows.iter().flat_map(|&t| cols.iter().map(move |&l| (t, l))).collect();
    TileGrid { patch, stride, height: h, width: w, offsets }
}

fn axis_offsets(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = dim - patch;
    let mut out: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o < last).collect();
    out.push(last);
    out
}

/// Running per-pixel mean over tile outputs. Pixels are averaged with equal
/// weight over every window that covers them.
pub struct TileMerger<'a> {
    grid: &'a TileGrid,
    sum: Vec<f64>,
    count: Vec<u32>,
    seen: Vec<bool>,
}

impl<'a> TileMerger<'a> {
    pub fn new(grid: &'a TileGrid) -> Self {
        let n = grid.height * grid.width;
        Self { grid, sum: vec![0.0; n], count: vec![0; n], seen: vec![false; grid.len()] }
    }

    pub fn add(&mut self, tile: usize, values: &[f64]) -> Result<()> {
        let p = self.grid.patch;
        let &(top, left) = self
            .grid
            .offsets
            .get(tile)
            .ok_or_else(|| IslError::Shape(format!("tile {tile} not in a grid of {}", self.grid.len())))?;
        if values.len() != p * p {
            return Err(IslError::Shape(format!("tile {tile} has {} values, expected {}", values.len(), p * p)));
        }
        if std::mem::replace(&mut self.seen[tile], true) {
            return Err(IslError::Validation(format!("tile {tile} merged twice")));
        }
        let w = self.grid.width;
        for (y, row) in values.chunks_exact(p).enumerate() {
            let at = (top + y) * w + left;
            for (s, v) in self.sum[at..at + p].iter_mut().zip(row) {
                *s += v;
            }
            for c in &mut self.count[at..at + p] {
                *c += 1;
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Result<NormalizedPlane<f64>> {
        if let Some(missing) = self.seen.iter().position(|s| !s) {
            return Err(IslError::Validation(format!("missing output for tile {missing}")));
        }
        let values = self.sum.iter().zip(&self.count).map(|(&s, &c)| s / c as f64).collect();
        NormalizedPlane::from_raw(self.grid.height, self.grid.width, values)
    }
}

/// Merges one output per window into a plane of the grid's (padded) size.
pub fn merge_tiles(tiles: &[Vec<f64>], grid: &TileGrid) -> Result<NormalizedPlane<f64>> {
    if tiles.len() != grid.len() {
        return Err(IslError::Validation(format!("{} tile outputs for {} windows", tiles.len(), grid.len())));
    }
    let mut m = TileMerger::new(grid);
    for (i, t) in tiles.iter().enumerate() {
        m.add(i, t)?;
    }
    m.finish()
}

/// Anything that maps square single-channel tiles to four organelle channels.
pub trait Predictor {
    /// Side of the square windows this model is run on.
    fn patch_size(&self) -> usize;

    /// `tiles` holds `n` tiles of side `size`, row-major, in model space.
    /// Returns `n * 4 * size * size` values laid out `(tile, channel, y, x)`.
    /// Channels not listed in `heads` may hold anything.
    fn predict_tiles(
        &self,
        tiles: &[f64],
        n: usize,
        size: usize,
        modality: Modality,
        heads: &[Organelle],
    ) -> Result<Vec<f64>>;
}

impl<T: Scalar> Predictor for Network<T> {
    fn patch_size(&self) -> usize {
        self.config.patch_size()
    }

    fn predict_tiles(
        &self,
        tiles: &[f64],
        n: usize,
        size: usize,
        modality: Modality,
        heads: &[Organelle],
    ) -> Result<Vec<f64>> {
        let plane = size * size;
        let x = Tensor::from_vec(&[n, 1, size, size], tiles.iter().map(|&v| T::from_f64_lossy(v)).collect())?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let outs = self.forward(&mut g, ParamMode::Frozen, xv, &vec![modality; n], heads)?;
        let mut res = vec![0.0; n * 4 * plane];
        for o in heads {
            let Some(v) = outs[o.index()] else { continue };
            for (b, src) in g.value(v).data().chunks_exact(plane).enumerate() {
                let dst = &mut res[(b * 4 + o.index()) * plane..][..plane];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s.to_f64_lossless();
                }
            }
        }
        Ok(res)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceOptions {
    #[serde(default = "default_overlap")]
    pub overlap: f64,
    /// Average the four quarter-turn rotations of every window.
    #[serde(default)]
    pub tta: bool,
    /// Windows per forward pass.
    #[serde(default = "default_batch")]
    pub batch: usize,
}

fn default_overlap() -> f64 {
    0.8
}

fn default_batch() -> usize {
    4
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self { overlap: default_overlap(), tta: false, batch: default_batch() }
    }
}

/// Tiled prediction of the requested organelles for one image, with the
/// rotation ensemble when `opts.tta` is set. Unrequested channels are `None`.
///
/// Ensemble member `k` rotates each window `k` quarter turns, predicts and
/// rotates back; members are summed as `((p0 + p2) + (p1 + p3)) / 4` so four
/// identical members reproduce the plain prediction bit for bit.
pub fn predict_planes<P: Predictor + ?Sized>(
    model: &P,
    image: &NormalizedPlane<f64>,
    modality: Modality,
    heads: &[Organelle],
    opts: &InferenceOptions,
) -> Result<[Option<NormalizedPlane<f64>>; 4]> {
    let patch = model.patch_size();
    let (h, w) = image.dims();
    let (padded, _, pw) = reflect_pad_grid(image.values(), h, w, patch, patch);
    let grid = plan_tiles(h, w, patch, opts.overlap);
    let rotations = if opts.tta { 4 } else { 1 };
    let plane = patch * patch;
    let mut mergers: Vec<(Organelle, TileMerger)> = heads.iter().map(|&o| (o, TileMerger::new(&grid))).collect();

    let tile_ids: Vec<usize> = (0..grid.len()).collect();
    for chunk in tile_ids.chunks(opts.batch.max(1)) {
        let mut input = Vec::with_capacity(chunk.len() * rotations * plane);
        for &t in chunk {
            let (top, left) = grid.offsets[t];
            let mut tile = Vec::with_capacity(plane);
            for y in top..top + patch {
                tile.extend_from_slice(&padded[y * pw + left..y * pw + left + patch]);
            }
            for k in 0..rotations {
                input.extend(rot90_grid(&tile, patch, patch, k).0);
            }
        }
        let n = chunk.len() * rotations;
        let out = model.predict_tiles(&input, n, patch, modality, heads)?;
        if out.len() != n * 4 * plane {
            return Err(IslError::Shape(format!("predictor returned {} values for {n} tiles", out.len())));
        }
        for (i, &t) in chunk.iter().enumerate() {
            for (o, merger) in &mut mergers {
                let member = |k: usize| {
                    let at = ((i * rotations + k) * 4 + o.index()) * plane;
                    rot90_grid(&out[at..at + plane], patch, patch, (4 - k) % 4).0
                };
                let merged = if rotations == 1 {
                    member(0)
                } else {
                    let (p0, p1, p2, p3) = (member(0), member(1), member(2), member(3));
                    (0..plane).map(|j| ((p0[j] + p2[j]) + (p1[j] + p3[j])) * 0.25).collect()
                };
                merger.add(t, &merged)?;
            }
        }
    }

    let (top, left) = pad_offset(h, w, patch, patch);
    let mut res: [Option<NormalizedPlane<f64>>; 4] = Default::default();
    for (o, merger) in mergers {
        let full = merger.finish()?;
        let mut values = Vec::with_capacity(h * w);
        for y in top..top + h {
            values.extend_from_slice(&full.values()[y * grid.width + left..y * grid.width + left + w]);
        }
        res[o.index()] = Some(NormalizedPlane::from_raw(h, w, values)?);
    }
    Ok(res)
}

/// All four channels of one model over a whole image.
pub fn tta_predict<P: Predictor + ?Sized>(
    model: &P,
    image: &NormalizedPlane<f64>,
    modality: Modality,
    opts: &InferenceOptions,
) -> Result<[NormalizedPlane<f64>; 4]> {
    let [m, n, t, a] = predict_planes(model, image, modality, &CHANNEL_ORDER, opts)?;
    Ok([m, n, t, a].map(|p| p.expect("every head was requested")))
}

/// Which model serves each (modality, organelle) pair. Total by
/// construction: every one of the 12 pairs has exactly one entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoutingTable {
    routes: [[String; 4]; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RouteFile {
    route: Vec<RouteEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RouteEntry {
    modality: Modality,
    organelle: Organelle,
    model: String,
}

impl RoutingTable {
    /// Sends every pair to one model.
    pub fn uniform(model: &str) -> Self {
        Self { routes: std::array::from_fn(|_| std::array::from_fn(|_| model.to_string())) }
    }

    /// Modality-specific models for every pair except DIC actin, which has
    /// no training labels and goes to a model trained on all modalities.
    pub fn with_fallback(per_modality: [&str; 3], dic_actin: &str) -> Self {
        let mut routes: [[String; 4]; 3] = std::array::from_fn(|m| std::array::from_fn(|_| per_modality[m].to_string()));
        routes[Modality::DIC.index()][Organelle::Actin.index()] = dic_actin.to_string();
        Self { routes }
    }

    /// The deployed configuration: three separately trained pix2pix models
    /// plus the unified UNet++ for DIC actin, under the trainer's model ids.
    pub fn final_solution() -> Self {
        let sep = Modality::ALL.map(|m| model_id(Backbone::Pix2pixResnet9, Strategy::Separate, Some(m)));
        let unified = model_id(Backbone::UnetPP, Strategy::Unified, None);
        Self::with_fallback([&sep[0], &sep[1], &sep[2]], &unified)
    }

    pub fn get(&self, modality: Modality, organelle: Organelle) -> &str {
        &self.routes[modality.index()][organelle.index()]
    }

    pub fn set(&mut self, modality: Modality, organelle: Organelle, model: &str) {
        self.routes[modality.index()][organelle.index()] = model.to_string();
    }

    pub fn model_ids(&self) -> BTreeSet<&str> {
        self.routes.iter().flatten().map(String::as_str).collect()
    }

    /// Fails on the first pair whose model the registry does not hold.
    pub fn check(&self, registry: &ModelRegistry) -> Result<()> {
        for m in Modality::ALL {
            for o in CHANNEL_ORDER {
                let id = self.get(m, o);
                if !registry.contains(id) {
                    return Err(IslError::Routing(format!("({m}, {o}) routes to unknown model {id:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let file: RouteFile = toml::from_str(s).map_err(|e| IslError::Parse(format!("routing table: {e}")))?;
        let mut routes: [[Option<String>; 4]; 3] = Default::default();
        for e in file.route {
            let slot = &mut routes[e.modality.index()][e.organelle.index()];
            if slot.is_some() {
                return Err(IslError::Routing(format!("({}, {}) listed twice", e.modality, e.organelle)));
            }
            if e.model.is_empty() {
                return Err(IslError::Routing(format!("({}, {}) has an empty model id", e.modality, e.organelle)));
            }
            *slot = Some(e.model);
        }
        let mut missing = Vec::new();
        for m in Modality::ALL {
            for o in CHANNEL_ORDER {
                if routes[m.index()][o.index()].is_none() {
                    missing.push(format!("({m}, {o})"));
                }
            }
        }
        if !missing.is_empty() {
            return Err(IslError::Routing(format!("no route for {}", missing.join(", "))));
        }
        Ok(Self { routes: routes.map(|row| row.map(|r| r.expect("checked above"))) })
    }

    pub fn to_toml(&self) -> Result<String> {
        let route = Modality::ALL
            .iter()
            .flat_map(|&m| CHANNEL_ORDER.map(|o| RouteEntry { modality: m, organelle: o, model: self.get(m, o).into() }))
            .collect();
        toml::to_string(&RouteFile { route }).map_err(|e| IslError::Parse(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = fs::read_to_string(path).map_err(|e| IslError::io(path, e))?;
        Self::from_toml(&s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml()?).map_err(|e| IslError::io(path, e))
    }
}

/// Descriptive fields copied into prediction provenance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub model_id: String,
    pub strategy: String,
    pub backbone: String,
}

/// Loaded models by id.
#[derive(Default)]
pub struct ModelRegistry {
    models: BTreeMap<String, (ModelInfo, Box<dyn Predictor>)>,
}

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, info: ModelInfo, model: Box<dyn Predictor>) {
        self.models.insert(info.model_id.clone(), (info, model));
    }

    pub fn contains(&self, id: &str) -> bool {
        self.models.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<(&ModelInfo, &dyn Predictor)> {
        self.models.get(id).map(|(i, m)| (i, m.as_ref()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(String::as_str)
    }

    /// Loads every model the table references from `dir/<id>/model.ckpt`
    /// (or `dir/<id>.ckpt`). Nothing is loaded unless all files exist.
    pub fn load_for_routing(dir: impl AsRef<Path>, routing: &RoutingTable) -> Result<Self> {
        let dir = dir.as_ref();
        let mut paths = Vec::new();
        for id in routing.model_ids() {
            let candidates = [dir.join(id).join("model.ckpt"), dir.join(format!("{id}.ckpt"))];
            match candidates.iter().find(|p| p.is_file()) {
                Some(p) => paths.push(p.clone()),
                None => {
                    let pairs: Vec<String> = Modality::ALL
                        .iter()
                        .flat_map(|&m| CHANNEL_ORDER.map(move |o| (m, o)))
                        .filter(|&(m, o)| routing.get(m, o) == id)
                        .map(|(m, o)| format!("({m}, {o})"))
                        .collect();
                    return Err(IslError::Routing(format!(
                        "no checkpoint for model {id:?} under {} (needed by {})",
                        dir.display(),
                        pairs.join(", ")
                    )));
                }
            }
        }
        let mut reg = Self::new();
        for p in paths {
            let (info, net) = load_network(&p)?;
            reg.insert(info, Box::new(net));
        }
        Ok(reg)
    }
}

/// Rebuilds a network from a checkpoint file.
pub fn load_network(path: impl AsRef<Path>) -> Result<(ModelInfo, Network<Real>)> {
    let ck = Checkpoint::<Real>::load(path)?;
    let mut net = Network::build(ck.meta.network)?;
    ck.restore_params(&mut net.store)?;
    let info = ModelInfo {
        model_id: ck.meta.model_id.clone(),
        strategy: ck.meta.strategy.to_string(),
        backbone: ck.meta.network.backbone.to_string(),
    };
    Ok((info, net))
}

/// Predicts all four organelles of one image, each with the model the table
/// routes to. Every route is checked against the registry before any work.
pub fn predict_image(
    input: &ImagePlane,
    sample_id: &str,
    modality: Modality,
    registry: &ModelRegistry,
    routing: &RoutingTable,
    opts: &InferenceOptions,
) -> Result<PredictionSet> {
    routing.check(registry)?;
    let image = rescale_to_model::<f64>(input);
    let mut groups: BTreeMap<&str, Vec<Organelle>> = BTreeMap::new();
    for o in CHANNEL_ORDER {
        groups.entry(routing.get(modality, o)).or_default().push(o);
    }
    let mut planes: [Option<ImagePlane>; 4] = Default::default();
    let mut channels = Vec::with_capacity(4);
    for (id, heads) in groups {
        let (info, model) = registry.get(id).expect("routes checked");
        let out = predict_planes(model, &image, modality, &heads, opts)?;
        for o in heads {
            let p = out[o.index()].as_ref().expect("requested head");
            planes[o.index()] = Some(rescale_to_uint16(p));
            channels.push(ChannelProvenance {
                organelle: o,
                model_id: info.model_id.clone(),
                strategy: info.strategy.clone(),
                backbone: info.backbone.clone(),
            });
        }
    }
    channels.sort_by_key(|c| c.organelle);
    Ok(PredictionSet {
        planes: planes.map(|p| p.expect("every organelle routed")),
        provenance: Provenance { sample_id: sample_id.to_string(), modality, tta: opts.tta, channels },
    })
}

pub fn prediction_path(dir: &Path, sample_id: &str, o: Organelle) -> PathBuf {
    dir.join(format!("{sample_id}_{o}_pred.tif"))
}

pub fn provenance_path(dir: &Path, sample_id: &str) -> PathBuf {
    dir.join(format!("{sample_id}_provenance.json"))
}

/// Writes the four prediction TIFFs and the provenance sidecar.
pub fn write_prediction(set: &PredictionSet, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| IslError::io(dir, e))?;
    let id = &set.provenance.sample_id;
    let mut written = Vec::with_capacity(5);
    for o in CHANNEL_ORDER {
        let p = prediction_path(dir, id, o);
        write_image(set.plane(o), &p)?;
        written.push(p);
    }
    let p = provenance_path(dir, id);
    let json = serde_json::to_string_pretty(&set.provenance).map_err(|e| IslError::Parse(e.to_string()))?;
    fs::write(&p, json + "\n").map_err(|e| IslError::io(&p, e))?;
    written.push(p);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Copies the input into every channel.
    pub(crate) struct Identity(pub usize);

    impl Predictor for Identity {
        fn patch_size(&self) -> usize {
            self.0
        }

        fn predict_tiles(&self, tiles: &[f64], n: usize, size: usize, _: Modality, _: &[Organelle]) -> Result<Vec<f64>> {
            let plane = size * size;
            Ok((0..n).flat_map(|b| (0..4).flat_map(move |_| tiles[b * plane..(b + 1) * plane].iter().copied())).collect())
        }
    }

    #[test]
    fn stride_and_offsets() {
        assert_eq!(plan_tiles(512, 512, 512, 0.8).offsets, vec![(0, 0)]);
        let g = plan_tiles(715, 715, 512, 0.8);
        assert_eq!(g.stride, 102);
        assert_eq!(g.offsets.iter().map(|o| o.0).collect::<BTreeSet<_>>(), BTreeSet::from([0, 102, 203]));
        assert_eq!(plan_tiles(20, 20, 10, 0.8).stride, 2);
        assert!(plan_tiles(50, 37, 10, 0.99).coverage().iter().all(|&c| c >= 1));
    }

    #[test]
    fn small_images_plan_on_padded_size() {
        let g = plan_tiles(5, 300, 64, 0.8);
        assert_eq!((g.height, g.width), (64, 300));
        assert_eq!(*g.offsets.last().unwrap(), (0, 236));
    }

    #[test]
    fn merge_errors_on_missing_tile() {
        let g = plan_tiles(12, 12, 8, 0.5);
        let tiles = vec![vec![0.0; 64]; g.len() - 1];
        assert!(merge_tiles(&tiles, &g).is_err());
        let m = TileMerger::new(&g);
        assert!(m.finish().is_err());
    }

    #[test]
    fn constant_tiles_merge_to_the_constant() {
        let g = plan_tiles(30, 23, 8, 0.8);
        let tiles = vec![vec![0.25; 64]; g.len()];
        assert!(merge_tiles(&tiles, &g).unwrap().values().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn identity_round_trip_with_padding() {
        let vals: Vec<f64> = (0..9 * 13).map(|i| (i as f64 * 0.37).sin()).collect();
        let img = NormalizedPlane::from_raw(9, 13, vals.clone()).unwrap();
        for tta in [false, true] {
            let out = tta_predict(&Identity(16), &img, Modality::BF, &InferenceOptions { tta, ..Default::default() }).unwrap();
            for p in &out {
                assert_eq!(p.dims(), (9, 13));
                let err = p.values().iter().zip(&vals).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(err < 1e-12);
            }
        }
    }

    #[test]
    fn routing_toml_round_trip_and_totality() {
        let r = RoutingTable::final_solution();
        assert_eq!(r.get(Modality::DIC, Organelle::Actin), "unetpp-unified");
        assert_eq!(r.get(Modality::DIC, Organelle::Nucleus), "pix2pix_resnet9-separate-dic");
        let s = r.to_toml().unwrap();
        assert_eq!(RoutingTable::from_toml(&s).unwrap(), r);
        let truncated: String = s.split("[[route]]").take(12).collect::<Vec<_>>().join("[[route]]");
        let err = RoutingTable::from_toml(&truncated).unwrap_err().to_string();
        assert!(err.contains("(DIC, Actin)"), "{err}");
    }

    #[test]
    fn unknown_model_names_the_pair() {
        let mut reg = ModelRegistry::new();
        let info = |id: &str| ModelInfo { model_id: id.into(), strategy: "separate".into(), backbone: "stub".into() };
        reg.insert(info("a"), Box::new(Identity(8)));
        let mut r = RoutingTable::uniform("a");
        assert!(r.check(&reg).is_ok());
        r.set(Modality::PC, Organelle::Tubulin, "b");
        let err = predict_image(&ImagePlane::filled(8, 8, 0), "x", Modality::BF, &reg, &r, &Default::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("(PC, Tubulin)"), "{err}");
    }
}
