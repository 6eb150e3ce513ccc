//! Shared vocabulary: modalities, organelle channels, image planes and the
//! partially labelled sample record.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::{IslError, Result, Scalar};

/// Transmitted-light input modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    BF,
    PC,
    DIC,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::BF, Modality::PC, Modality::DIC];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::BF => "BF",
            Modality::PC => "PC",
            Modality::DIC => "DIC",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = IslError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "BF" => Ok(Modality::BF),
            "PC" => Ok(Modality::PC),
            "DIC" => Ok(Modality::DIC),
            _ => Err(IslError::Parse(format!("unknown modality {s:?}"))),
        }
    }
}

/// Predicted fluorescent organelle. The discriminant is the output channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Organelle {
    Mitochondria = 0,
    Nucleus = 1,
    Tubulin = 2,
    Actin = 3,
}

/// Canonical channel order used by every tensor, file and report.
pub const CHANNEL_ORDER: [Organelle; 4] =
    [Organelle::Mitochondria, Organelle::Nucleus, Organelle::Tubulin, Organelle::Actin];

impl Organelle {
    pub const ALL: [Organelle; 4] = CHANNEL_ORDER;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        CHANNEL_ORDER.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Organelle::Mitochondria => "Mitochondria",
            Organelle::Nucleus => "Nucleus",
            Organelle::Tubulin => "Tubulin",
            Organelle::Actin => "Actin",
        }
    }

    pub fn letter(self) -> char {
        self.as_str().chars().next().unwrap()
    }
}

impl fmt::Display for Organelle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Organelle {
    type Err = IslError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        CHANNEL_ORDER
            .iter()
            .copied()
            .find(|o| o.as_str().to_ascii_lowercase() == lower || lower == o.letter().to_ascii_lowercase().to_string())
            .ok_or_else(|| IslError::Parse(format!("unknown organelle {s:?}")))
    }
}

macro_rules! string_serde {
    ($t:ty) => {
        impl Serialize for $t {
            fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.serialize_str(self.as_str())
            }
        }

        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

string_serde!(Modality);
string_serde!(Organelle);

/// Which organelles carry ground truth for a sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct LabelAvailability([bool; 4]);

impl LabelAvailability {
    pub fn none() -> Self {
        Self([false; 4])
    }

    pub fn all() -> Self {
        Self([true; 4])
    }

    pub fn from_flags(flags: [bool; 4]) -> Self {
        Self(flags)
    }

    pub fn of(organelles: &[Organelle]) -> Self {
        let mut a = Self::none();
        for &o in organelles {
            a.set(o, true);
        }
        a
    }

    pub fn flags(&self) -> [bool; 4] {
        self.0
    }

    pub fn has(&self, o: Organelle) -> bool {
        self.0[o.index()]
    }

    pub fn set(&mut self, o: Organelle, value: bool) {
        self.0[o.index()] = value;
    }

    pub fn any(&self) -> bool {
        self.0.iter().any(|&f| f)
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&f| f).count()
    }

    /// Labelled organelles in channel order.
    pub fn labeled(&self) -> impl Iterator<Item = Organelle> + '_ {
        CHANNEL_ORDER.iter().copied().filter(|&o| self.has(o))
    }

    pub fn union(self, other: Self) -> Self {
        Self(std::array::from_fn(|i| self.0[i] || other.0[i]))
    }
}

impl fmt::Display for LabelAvailability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: String = self.labeled().map(|o| o.letter()).collect();
        f.write_str(if s.is_empty() { "-" } else { &s })
    }
}

impl Serialize for LabelAvailability {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.labeled())
    }
}

impl<'de> Deserialize<'de> for LabelAvailability {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<Organelle>::deserialize(d)?;
        Ok(Self::of(&v))
    }
}

/// Single-channel 16-bit raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    values: Vec<u16>,
}

impl ImagePlane {
    pub const REAL_MIN_SIDE: usize = 512;
    pub const REAL_MAX_SIDE: usize = 2048;

    pub fn new(height: usize, width: usize, values: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(IslError::Shape(format!("empty image {height}x{width}")));
        }
        if values.len() != height * width {
            return Err(IslError::Shape(format!(
                "{height}x{width} image needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: u16) -> Self {
        Self { height, width, values: vec![value; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u16) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(f(y, x));
            }
        }
        Self { height, width, values }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[u16] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.values[y * self.width + x]
    }

    /// Non-fatal notes when the plane lies outside the size range of real
    /// challenge data (smaller synthetic planes are legitimate).
    pub fn real_bounds_warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, side) in [("height", self.height), ("width", self.width)] {
            if !(Self::REAL_MIN_SIDE..=Self::REAL_MAX_SIDE).contains(&side) {
                out.push(format!(
                    "{name} {side} outside the usual {}..={} range",
                    Self::REAL_MIN_SIDE,
                    Self::REAL_MAX_SIDE
                ));
            }
        }
        out
    }
}

/// Real-valued plane in model space. Values produced by
/// [`crate::transforms::rescale_to_model`] lie in [-1, 1]; raw model outputs
/// may stray slightly outside and are clamped on the way back to 16-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedPlane<T> {
    height: usize,
    width: usize,
    values: Vec<T>,
}

impl<T: Scalar> NormalizedPlane<T> {
    /// Checked constructor: every value must lie in [-1, 1].
    pub fn new(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        let p = Self::from_raw(height, width, values)?;
        if let Some(v) = p.values.iter().find(|v| !(v.abs() <= T::one())) {
            return Err(IslError::Validation(format!("normalized value {v} outside [-1, 1]")));
        }
        Ok(p)
    }

    /// Unchecked range (shape still checked); for model outputs.
    pub fn from_raw(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != height * width || height == 0 || width == 0 {
            return Err(IslError::Shape(format!(
                "{height}x{width} plane with {} values",
                values.len()
            )));
        }
        Ok(Self { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn get(&self, y: usize, x: usize) -> T {
        self.values[y * self.width + x]
    }
}

/// One training/evaluation record: an input plane plus whatever organelle
/// ground truth exists for it.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub study_id: String,
    pub modality: Modality,
    pub input: ImagePlane,
    /// Indexed by channel; `Some` exactly where labelled.
    pub targets: [Option<ImagePlane>; 4],
    pub availability: LabelAvailability,
}

impl Sample {
    pub fn target(&self, o: Organelle) -> Option<&ImagePlane> {
        self.targets[o.index()].as_ref()
    }
}

/// Lists every broken [`Sample`] invariant. Empty means valid.
pub fn validate_sample(s: &Sample) -> Vec<String> {
    let mut out = Vec::new();
    if !s.availability.any() {
        out.push("no organelle labeled".to_string());
    }
    for o in CHANNEL_ORDER {
        let target = s.target(o);
        if s.availability.has(o) != target.is_some() {
            out.push(format!("availability/target mismatch: {o}"));
        }
        if let Some(t) = target {
            if t.dims() != s.input.dims() {
                out.push(format!("dimension mismatch: {o}"));
            }
        }
    }
    out
}

/// Which model produced one organelle's output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelProvenance {
    pub organelle: Organelle,
    pub model_id: String,
    pub strategy: String,
    pub backbone: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub sample_id: String,
    pub modality: Modality,
    pub tta: bool,
    pub channels: Vec<ChannelProvenance>,
}

/// All four organelle predictions for one input image.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub planes: [ImagePlane; 4],
    pub provenance: Provenance,
}

impl PredictionSet {
    pub fn plane(&self, o: Organelle) -> &ImagePlane {
        &self.planes[o.index()]
    }
}
