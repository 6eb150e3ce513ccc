//! Evaluation metrics with the per-organelle applicability rules: MAE and
//! the two distances are reported for mitochondria and nucleus only, SSIM
//! and PCC for all four organelles.
//!
//! Every metric first maps 16-bit values to [0, 1] by dividing by 65535.

use std::fmt::Write as _;

use crate::domain::{ImagePlane, Modality, Organelle, PredictionSet, Sample, CHANNEL_ORDER};
use crate::{IslError, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn unit(p: &ImagePlane) -> Vec<f64> {
    p.values().iter().map(|&v| v as f64 / 65535.0).collect()
}

fn check_dims(pred: &ImagePlane, gt: &ImagePlane) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(IslError::Shape(format!("prediction is {:?}, ground truth is {:?}", pred.dims(), gt.dims())));
    }
    Ok(())
}

pub fn mae(pred: &ImagePlane, gt: &ImagePlane) -> Result<f64> {
    check_dims(pred, gt)?;
    let (p, g) = (unit(pred), unit(gt));
    Ok(p.iter().zip(&g).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64)
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h x w` grid.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = k.iter().zip(&x[y * w + ox..]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = k.iter().enumerate().map(|(i, a)| a * rows[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

/// Mean local SSIM over every fully contained 11x11 Gaussian window
/// (sigma 1.5, data range 1).
pub fn ssim(pred: &ImagePlane, gt: &ImagePlane) -> Result<f64> {
    check_dims(pred, gt)?;
    let (h, w) = pred.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(IslError::Shape(format!("{h}x{w} image is smaller than the {SSIM_WINDOW}px SSIM window")));
    }
    let (x, y) = (unit(pred), unit(gt));
    let k = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let f = |v: &[f64]| filter_valid(v, h, w, &k);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mx, my) = (f(&x), f(&y));
    let (exx, eyy, exy) = (f(&prod(&x, &x)), f(&prod(&y, &y)), f(&prod(&x, &y)));
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (a, b) = (mx[i], my[i]);
            let (vx, vy, cxy) = (exx[i] - a * a, eyy[i] - b * b, exy[i] - a * b);
            ((2.0 * a * b + c1) * (2.0 * cxy + c2)) / ((a * a + b * b + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

pub fn pcc(pred: &ImagePlane, gt: &ImagePlane) -> Result<f64> {
    check_dims(pred, gt)?;
    // judged on the integers: a float mean of equal values can leave a
    // residual variance
    if is_constant(pred) || is_constant(gt) {
        return Err(IslError::UndefinedMetric("PCC of a constant image".into()));
    }
    let (x, y) = (unit(pred), unit(gt));
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(&y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    Ok(sxy / (sxx * syy).sqrt())
}

fn is_constant(p: &ImagePlane) -> bool {
    p.values().iter().all(|&v| v == p.values()[0])
}

/// `(euclidean, cosine)` distance between the flattened images.
pub fn distances(pred: &ImagePlane, gt: &ImagePlane) -> Result<(f64, f64)> {
    check_dims(pred, gt)?;
    let (x, y) = (unit(pred), unit(gt));
    let (mut dd, mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(&y) {
        dd += (a - b) * (a - b);
        xy += a * b;
        xx += a * a;
        yy += b * b;
    }
    if xx == 0.0 || yy == 0.0 {
        return Err(IslError::UndefinedMetric("cosine distance of an all-zero image".into()));
    }
    Ok((dd.sqrt(), 1.0 - xy / (xx * yy).sqrt()))
}

/// Whether MAE and the distances are reported for this organelle.
pub fn full_metrics(o: Organelle) -> bool {
    matches!(o, Organelle::Mitochondria | Organelle::Nucleus)
}

/// One organelle's scores. `None` means not applicable; an applicable
/// metric that is mathematically undefined (e.g. PCC against a constant
/// image) is `NaN`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OrganelleMetrics {
    pub mae: Option<f64>,
    pub ssim: Option<f64>,
    pub pcc: Option<f64>,
    pub e_dist: Option<f64>,
    pub c_dist: Option<f64>,
}

impl OrganelleMetrics {
    pub const NAMES: [&'static str; 5] = ["MAE", "SSIM", "PCC", "E_dist", "C_dist"];

    pub fn values(&self) -> [Option<f64>; 5] {
        [self.mae, self.ssim, self.pcc, self.e_dist, self.c_dist]
    }

    pub fn compute(o: Organelle, pred: &ImagePlane, gt: &ImagePlane) -> Result<Self> {
        check_dims(pred, gt)?;
        let mut m = Self { ssim: Some(defined(ssim(pred, gt))?), pcc: Some(defined(pcc(pred, gt))?), ..Self::default() };
        if full_metrics(o) {
            m.mae = Some(mae(pred, gt)?);
            let (e, c) = match distances(pred, gt) {
                Ok(d) => d,
                // the euclidean distance is still defined
                Err(IslError::UndefinedMetric(_)) => {
                    let (x, y) = (unit(pred), unit(gt));
                    (x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(), f64::NAN)
                }
                Err(e) => return Err(e),
            };
            m.e_dist = Some(e);
            m.c_dist = Some(c);
        }
        Ok(m)
    }
}

fn defined(r: Result<f64>) -> Result<f64> {
    match r {
        Err(IslError::UndefinedMetric(_)) => Ok(f64::NAN),
        other => other,
    }
}

/// Scores of one image, for its labelled organelles only.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub sample_id: String,
    pub modality: Modality,
    pub organelles: [Option<OrganelleMetrics>; 4],
}

pub fn evaluate(preds: &PredictionSet, gt: &Sample) -> Result<MetricReport> {
    if !gt.availability.any() {
        return Err(IslError::Validation(format!("sample {} has no labelled organelle", gt.id)));
    }
    let mut organelles: [Option<OrganelleMetrics>; 4] = Default::default();
    for o in CHANNEL_ORDER {
        if let Some(t) = gt.target(o) {
            organelles[o.index()] = Some(OrganelleMetrics::compute(o, preds.plane(o), t)?);
        }
    }
    Ok(MetricReport { sample_id: gt.id.clone(), modality: gt.modality, organelles })
}

/// Dataset-level scores: each cell is the arithmetic mean over the images
/// where the metric is applicable and defined.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateReport {
    /// `[organelle][metric]`, `None` where no image contributed.
    pub means: [[Option<f64>; 5]; 4],
    /// Images contributing to each organelle row.
    pub images: [usize; 4],
}

pub fn aggregate(reports: &[MetricReport]) -> AggregateReport {
    let mut sums = [[(0.0, 0usize); 5]; 4];
    let mut images = [0; 4];
    for r in reports {
        for o in CHANNEL_ORDER {
            let Some(m) = &r.organelles[o.index()] else { continue };
            images[o.index()] += 1;
            for (cell, v) in sums[o.index()].iter_mut().zip(m.values()) {
                if let Some(v) = v.filter(|v| !v.is_nan()) {
                    cell.0 += v;
                    cell.1 += 1;
                }
            }
        }
    }
    let means = sums.map(|row| row.map(|(s, n)| (n > 0).then(|| s / n as f64)));
    AggregateReport { means, images }
}

impl AggregateReport {
    /// Plain-text table: one row per organelle letter, one column per
    /// metric, `-` where a metric does not apply.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<3}", "");
        for name in OrganelleMetrics::NAMES {
            let _ = write!(s, "{name:>10}");
        }
        s.push('\n');
        for o in CHANNEL_ORDER {
            let _ = write!(s, "{:<3}", o.letter());
            for (j, v) in self.means[o.index()].iter().enumerate() {
                let applicable = full_metrics(o) || matches!(j, 1 | 2);
                let cell = match v {
                    Some(v) if applicable => format!("{v:.4}"),
                    _ => "-".to_string(),
                };
                let _ = write!(s, "{cell:>10}");
            }
            s.push('\n');
        }
        let _ = writeln!(
            s,
            "\nimages: {}",
            CHANNEL_ORDER.map(|o| format!("{}={}", o.letter(), self.images[o.index()])).join(" ")
        );
        s
    }
}

/// One line per (image, labelled organelle), for inspection.
pub fn per_image_csv(reports: &[MetricReport]) -> String {
    let mut s = String::from("sample_id,modality,organelle,mae,ssim,pcc,e_dist,c_dist\n");
    for r in reports {
        for o in CHANNEL_ORDER {
            let Some(m) = &r.organelles[o.index()] else { continue };
            let _ = write!(s, "{},{},{}", r.sample_id, r.modality, o);
            for v in m.values() {
                match v {
                    Some(v) => {
                        let _ = write!(s, ",{v:.6}");
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::LabelAvailability;

    fn plane(h: usize, w: usize, f: impl FnMut(usize, usize) -> u16) -> ImagePlane {
        ImagePlane::from_fn(h, w, f)
    }

    #[test]
    fn extremes() {
        let z = ImagePlane::filled(4, 4, 0);
        let f = ImagePlane::filled(4, 4, 65535);
        assert_eq!(mae(&z, &f).unwrap(), 1.0);
        let g = plane(16, 16, |y, x| (y * 977 + x * 131) as u16);
        assert_eq!(mae(&g, &g).unwrap(), 0.0);
        assert!((ssim(&g, &g).unwrap() - 1.0).abs() < 1e-12);
        assert!((pcc(&g, &g).unwrap() - 1.0).abs() < 1e-12);
        let (e, c) = distances(&g, &g).unwrap();
        assert_eq!(e, 0.0);
        assert!(c.abs() < 1e-12);
    }

    #[test]
    fn undefined_and_shape_errors() {
        let c = ImagePlane::filled(12, 12, 100);
        assert!(matches!(pcc(&c, &c), Err(IslError::UndefinedMetric(_))));
        let z = ImagePlane::filled(12, 12, 0);
        assert!(matches!(distances(&z, &c), Err(IslError::UndefinedMetric(_))));
        assert!(matches!(ssim(&ImagePlane::filled(8, 8, 0), &ImagePlane::filled(8, 8, 0)), Err(IslError::Shape(_))));
        assert!(matches!(mae(&c, &ImagePlane::filled(12, 13, 0)), Err(IslError::Shape(_))));
    }

    #[test]
    fn orthogonal_indicators_have_unit_cosine_distance() {
        let a = plane(4, 4, |y, _| if y < 2 { 65535 } else { 0 });
        let b = plane(4, 4, |y, _| if y >= 2 { 65535 } else { 0 });
        assert_eq!(distances(&a, &b).unwrap().1, 1.0);
    }

    #[test]
    fn pcc_is_affine_invariant() {
        let g = plane(8, 8, |y, x| ((y * 31 + x * 7) % 50) as u16 * 100);
        let p = plane(8, 8, |y, x| g.get(y, x) * 3 + 500);
        assert!((pcc(&p, &g).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn window_is_normalised_and_symmetric() {
        let k = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(k[0], k[10]);
        assert!(k[5] > k[4]);
    }

    #[test]
    fn tubulin_gets_ssim_and_pcc_only() {
        let g = plane(16, 16, |y, x| (y * 3000 + x * 10) as u16);
        let mut targets: [Option<ImagePlane>; 4] = Default::default();
        targets[Organelle::Tubulin.index()] = Some(g.clone());
        let s = Sample {
            id: "t".into(),
            study_id: "st".into(),
            modality: Modality::PC,
            input: g.clone(),
            targets,
            availability: LabelAvailability::of(&[Organelle::Tubulin]),
        };
        let preds = PredictionSet {
            planes: std::array::from_fn(|_| g.clone()),
            provenance: crate::domain::Provenance {
                sample_id: "t".into(),
                modality: Modality::PC,
                tta: false,
                channels: vec![],
            },
        };
        let r = evaluate(&preds, &s).unwrap();
        let t = r.organelles[Organelle::Tubulin.index()].unwrap();
        assert_eq!(t.values().map(|v| v.is_some()), [false, true, true, false, false]);
        assert!(r.organelles[0].is_none());
        let table = aggregate(&[r]).to_table();
        let row = table.lines().find(|l| l.starts_with('T')).unwrap();
        assert_eq!(row.split_whitespace().collect::<Vec<_>>(), ["T", "-", "1.0000", "1.0000", "-", "-"]);
    }

    #[test]
    fn aggregation_is_the_mean_and_skips_undefined() {
        let mk = |v: f64| MetricReport {
            sample_id: "x".into(),
            modality: Modality::BF,
            organelles: [Some(OrganelleMetrics { mae: Some(v), pcc: Some(f64::NAN), ..Default::default() }), None, None, None],
        };
        let a = aggregate(&[mk(0.1), mk(0.3)]);
        assert!((a.means[0][0].unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(a.means[0][2], None);
        assert_eq!(a.images, [2, 0, 0, 0]);
    }
}
