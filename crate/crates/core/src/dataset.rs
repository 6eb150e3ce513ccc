//! 16-bit TIFF I/O and the on-disk dataset manifest.
//!
//! Directory layout:
//!
//! ```text
//! <root>/<study_id>/<sample_id>_<MODALITY>.tif     input (BF, PC or DIC)
//! <root>/<study_id>/<sample_id>_<Organelle>.tif    target (Mitochondria, Nucleus, Tubulin, Actin)
//! ```
//!
//! Suffixes are matched case-insensitively; `.tif` and `.tiff` are accepted.
//! The manifest is a TOML file:
//!
//! ```toml
//! root = "/data/synth"
//!
//! [[entries]]
//! id = "s0000"
//! study_id = "study00"
//! modality = "BF"
//! input = "study00/s0000_BF.tif"
//!
//! [entries.targets]
//! Mitochondria = "study00/s0000_Mitochondria.tif"
//! Nucleus = "study00/s0000_Nucleus.tif"
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};
use tiff::decoder::{Decoder, DecodingResult};
use tiff::encoder::{colortype, TiffEncoder};
use tiff::ColorType;

use crate::domain::{validate_sample, ImagePlane, LabelAvailability, Modality, Organelle, Sample, CHANNEL_ORDER};
use crate::{IslError, Result};

fn format_err(path: &Path, msg: impl Into<String>) -> IslError {
    IslError::Format { path: path.to_path_buf(), msg: msg.into() }
}

fn tiff_err(path: &Path, e: tiff::TiffError) -> IslError {
    match e {
        tiff::TiffError::IoError(io) => IslError::io(path, io),
        other => format_err(path, other.to_string()),
    }
}

/// Reads a single-channel 16-bit TIFF.
pub fn read_image(path: impl AsRef<Path>) -> Result<ImagePlane> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| IslError::io(path, e))?;
    let mut dec = Decoder::new(BufReader::new(file)).map_err(|e| tiff_err(path, e))?;
    match dec.colortype().map_err(|e| tiff_err(path, e))? {
        ColorType::Gray(16) => {}
        ColorType::Gray(bits) => return Err(format_err(path, format!("expected 16-bit, found {bits}-bit samples"))),
        other => return Err(format_err(path, format!("expected single-channel 16-bit, found {other:?}"))),
    }
    let (w, h) = dec.dimensions().map_err(|e| tiff_err(path, e))?;
    match dec.read_image().map_err(|e| tiff_err(path, e))? {
        DecodingResult::U16(values) => ImagePlane::new(h as usize, w as usize, values),
        _ => Err(format_err(path, "expected 16-bit unsigned samples")),
    }
}

/// Writes a single-channel, uncompressed 16-bit TIFF.
pub fn write_image(plane: &ImagePlane, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| IslError::io(path, e))?;
    let mut enc = TiffEncoder::new(BufWriter::new(file)).map_err(|e| tiff_err(path, e))?;
    enc.write_image::<colortype::Gray16>(plane.width() as u32, plane.height() as u32, plane.values())
        .map_err(|e| tiff_err(path, e))
}

/// Writes an 8-bit grayscale TIFF. Only useful for exercising format errors.
pub fn write_image_u8(height: usize, width: usize, values: &[u8], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| IslError::io(path, e))?;
    let mut enc = TiffEncoder::new(BufWriter::new(file)).map_err(|e| tiff_err(path, e))?;
    enc.write_image::<colortype::Gray8>(width as u32, height as u32, values)
        .map_err(|e| tiff_err(path, e))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub study_id: String,
    pub modality: Modality,
    /// Input path relative to the manifest root, `/`-separated.
    pub input: String,
    pub targets: BTreeMap<Organelle, String>,
}

impl ManifestEntry {
    pub fn availability(&self) -> LabelAvailability {
        let mut a = LabelAvailability::none();
        for o in self.targets.keys() {
            a.set(*o, true);
        }
        a
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub root: PathBuf,
    #[serde(default)]
    pub entries: Vec<ManifestEntry>,
}

/// Filename conventions accepted by [`build_manifest`].
#[derive(Clone, Debug)]
pub struct Layout {
    pub extensions: Vec<String>,
}

impl Default for Layout {
    fn default() -> Self {
        Self { extensions: vec!["tif".into(), "tiff".into()] }
    }
}

enum Role {
    Input(Modality),
    Target(Organelle),
}

fn classify(stem: &str) -> Option<(String, Role)> {
    let (sample, suffix) = stem.rsplit_once('_')?;
    if sample.is_empty() {
        return None;
    }
    if let Ok(m) = suffix.parse::<Modality>() {
        return Some((sample.to_string(), Role::Input(m)));
    }
    // single letters are not accepted in file names
    if suffix.len() > 1 {
        if let Ok(o) = suffix.parse::<Organelle>() {
            return Some((sample.to_string(), Role::Target(o)));
        }
    }
    None
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(path).map_err(|e| IslError::io(path, e))? {
        out.push(e.map_err(|e| IslError::io(path, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Scans `root` and returns one entry per input image that has at least one
/// target, ordered by id.
pub fn build_manifest(root: impl AsRef<Path>, layout: &Layout) -> Result<Manifest> {
    let root = root.as_ref();
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for study_dir in sorted_dir(root)?.into_iter().filter(|p| p.is_dir()) {
        let study_id = study_dir.file_name().unwrap().to_string_lossy().into_owned();
        let mut inputs: BTreeMap<String, (Modality, String)> = BTreeMap::new();
        let mut targets: BTreeMap<String, BTreeMap<Organelle, String>> = BTreeMap::new();
        for file in sorted_dir(&study_dir)?.into_iter().filter(|p| p.is_file()) {
            let ext_ok = file
                .extension()
                .map(|e| layout.extensions.iter().any(|x| x.eq_ignore_ascii_case(&e.to_string_lossy())))
                .unwrap_or(false);
            if !ext_ok {
                continue;
            }
            let stem = file.file_stem().unwrap().to_string_lossy().into_owned();
            let rel = format!("{study_id}/{}", file.file_name().unwrap().to_string_lossy());
            match classify(&stem) {
                Some((sample, Role::Input(m))) => {
                    if inputs.insert(sample.clone(), (m, rel)).is_some() {
                        return Err(IslError::Load(format!("sample {sample} has more than one input image")));
                    }
                }
                Some((sample, Role::Target(o))) => {
                    targets.entry(sample).or_default().insert(o, rel);
                }
                None => warn!("ignoring {}: unrecognized file name suffix", file.display()),
            }
        }
        for sample in targets.keys().filter(|s| !inputs.contains_key(*s)) {
            warn!("study {study_id}: targets for {sample} have no input image");
        }
        for (id, (modality, input)) in inputs {
            let t = targets.remove(&id).unwrap_or_default();
            if t.is_empty() {
                warn!("skipping {study_id}/{id}: no target images");
                continue;
            }
            if !seen.insert(id.clone()) {
                return Err(IslError::Load(format!("duplicate sample id {id}")));
            }
            entries.push(ManifestEntry { id, study_id: study_id.clone(), modality, input, targets: t });
        }
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(Manifest { root: root.to_path_buf(), entries })
}

impl Manifest {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| IslError::Parse(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let m: Manifest = toml::from_str(s).map_err(|e| IslError::Parse(e.to_string()))?;
        let mut ids = HashSet::new();
        for e in &m.entries {
            if !ids.insert(e.id.as_str()) {
                return Err(IslError::Load(format!("duplicate entry id {}", e.id)));
            }
            if e.targets.is_empty() {
                return Err(IslError::Load(format!("entry {} has no targets", e.id)));
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml()?).map_err(|e| IslError::io(path, e))
    }

    /// Loads a manifest and checks that every referenced file exists. A
    /// relative `root` is resolved against the manifest's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| IslError::io(path, e))?;
        let mut m = Self::from_toml(&text)?;
        if m.root.is_relative() {
            m.root = path.parent().unwrap_or(Path::new(".")).join(&m.root);
        }
        let missing: Vec<String> = m
            .entries
            .iter()
            .flat_map(|e| std::iter::once(&e.input).chain(e.targets.values()))
            .filter(|rel| !m.root.join(rel).is_file())
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(IslError::Load(format!("manifest references missing files: {}", missing.join(", "))));
        }
        Ok(m)
    }

    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Entries restricted to one modality, preserving order.
    pub fn filter_modality(&self, modality: Modality) -> Manifest {
        Manifest {
            root: self.root.clone(),
            entries: self.entries.iter().filter(|e| e.modality == modality).cloned().collect(),
        }
    }

    pub fn load_sample(&self, entry: &ManifestEntry) -> Result<Sample> {
        load_sample(&self.root, entry)
    }
}

/// Reads every file of one entry into a validated [`Sample`].
pub fn load_sample(root: &Path, entry: &ManifestEntry) -> Result<Sample> {
    let input = read_image(root.join(&entry.input))?;
    let mut targets: [Option<ImagePlane>; 4] = Default::default();
    for o in CHANNEL_ORDER {
        if let Some(rel) = entry.targets.get(&o) {
            let t = read_image(root.join(rel))?;
            if t.dims() != input.dims() {
                return Err(IslError::Load(format!(
                    "{}: dimension mismatch for {o}: target {:?} vs input {:?}",
                    entry.id,
                    t.dims(),
                    input.dims()
                )));
            }
            targets[o.index()] = Some(t);
        }
    }
    let sample = Sample {
        id: entry.id.clone(),
        study_id: entry.study_id.clone(),
        modality: entry.modality,
        input,
        targets,
        availability: entry.availability(),
    };
    let violations = validate_sample(&sample);
    if !violations.is_empty() {
        return Err(IslError::Load(format!("{}: {}", entry.id, violations.join("; "))));
    }
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classify_suffixes() {
        assert!(matches!(classify("a_b_DIC"), Some((s, Role::Input(Modality::DIC))) if s == "a_b"));
        assert!(matches!(classify("x_nucleus"), Some((s, Role::Target(Organelle::Nucleus))) if s == "x"));
        assert!(classify("x_N").is_none());
        assert!(classify("_BF").is_none());
        assert!(classify("plain").is_none());
    }

    #[test]
    fn empty_root_gives_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_manifest(dir.path(), &Layout::default()).unwrap();
        assert!(m.entries.is_empty());
    }
}
