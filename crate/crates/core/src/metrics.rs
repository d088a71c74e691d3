//! Evaluation: mIoU, physical plausibility of predicted regions, and
//! rank statistics comparing synthetic rasters against reference rasters.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{LabelMask, Modality, Raster, RasterSet};
use crate::losses::bounded_mean;
use crate::pckg::Pckg;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassIoU {
    pub class_id: u32,
    /// `None` when the class is absent from both masks.
    pub iou: Option<f64>,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IoUReport {
    pub per_class: Vec<ClassIoU>,
    /// Mean over classes with defined IoU.
    pub miou: Option<f64>,
    /// `confusion[gt][pred]`, indices are label values including 0.
    pub confusion: Vec<Vec<u64>>,
}

/// Per-class IoU from a confusion matrix. Without `include_background`,
/// pixels whose ground truth is 0 are ignored and class 0 is not scored.
pub fn miou(pred: &LabelMask, gt: &LabelMask, num_classes: usize, include_background: bool) -> Result<IoUReport> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::Dimension(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let k = num_classes + 1;
    if pred.max_label() as usize >= k || gt.max_label() as usize >= k {
        return Err(Error::Input(format!("labels must be at most {num_classes}")));
    }
    let mut confusion = vec![vec![0u64; k]; k];
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        if g == 0 && !include_background {
            continue;
        }
        confusion[g as usize][p as usize] += 1;
    }
    let first = if include_background { 0 } else { 1 };
    let per_class: Vec<ClassIoU> = (first..k)
        .map(|c| {
            let tp = confusion[c][c];
            let fp: u64 = (0..k).filter(|&r| r != c).map(|r| confusion[r][c]).sum();
            let fn_: u64 = (0..k).filter(|&q| q != c).map(|q| confusion[c][q]).sum();
            let denom = tp + fp + fn_;
            ClassIoU {
                class_id: c as u32,
                iou: (denom > 0).then(|| tp as f64 / denom as f64),
                tp,
                fp,
                fn_,
            }
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().filter_map(|c| c.iou).collect();
    let miou = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(IoUReport {
        per_class,
        miou,
        confusion,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassPlausibility {
    pub class_id: u32,
    pub category: String,
    /// Modalities whose region mean lies inside the class interval.
    pub inside: usize,
    pub checked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Plausibility {
    /// Mean over modalities of the fraction of regions with in-interval means.
    /// Vacuously 1 when there is nothing to check.
    pub rate: f64,
    pub per_modality: Vec<(Modality, f64)>,
    pub per_class: Vec<ClassPlausibility>,
}

pub fn plausibility_rate(labels: &LabelMask, rasters: &RasterSet, graph: &Pckg) -> Result<Plausibility> {
    rasters.check_shape(labels.height(), labels.width(), "label mask")?;
    let c = graph.num_classes();
    if labels.max_label() as usize > c {
        return Err(Error::Lookup {
            class_id: labels.max_label(),
            num_classes: c,
        });
    }
    let present: Vec<u32> = (1..=c as u32).filter(|k| labels.labels().contains(k)).collect();
    let mut per_class: Vec<ClassPlausibility> = present
        .iter()
        .map(|&k| ClassPlausibility {
            class_id: k,
            category: graph.entries()[k as usize - 1].category.clone(),
            inside: 0,
            checked: 0,
        })
        .collect();
    let mut per_modality = Vec::new();
    for r in rasters.iter() {
        let m = r.modality();
        let mut inside = 0;
        for (slot, &k) in per_class.iter_mut().zip(&present) {
            let mean = bounded_mean(
                labels
                    .labels()
                    .iter()
                    .zip(r.values())
                    .filter(|(l, _)| **l == k)
                    .map(|(_, v)| *v),
            )
            .expect("class is present");
            slot.checked += 1;
            if graph.interval(k, m)?.contains(mean) {
                slot.inside += 1;
                inside += 1;
            }
        }
        let rate = if present.is_empty() { 1.0 } else { inside as f64 / present.len() as f64 };
        per_modality.push((m, rate));
    }
    let rate = if per_modality.is_empty() {
        1.0
    } else {
        per_modality.iter().map(|(_, r)| r).sum::<f64>() / per_modality.len() as f64
    };
    Ok(Plausibility {
        rate,
        per_modality,
        per_class,
    })
}

/// Quantile with linear interpolation between order statistics; `sorted`
/// must be ascending and non-empty.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistributionStats {
    pub count: usize,
    pub coverage: f64,
    pub median: f64,
    /// Median minus interval midpoint.
    pub median_offset: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
}

fn distribution(mut values: Vec<f64>, lo: f64, hi: f64) -> DistributionStats {
    values.sort_by(f64::total_cmp);
    let inside = values.iter().filter(|v| (lo..=hi).contains(*v)).count();
    let median = quantile(&values, 0.5);
    let (q1, q3) = (quantile(&values, 0.25), quantile(&values, 0.75));
    DistributionStats {
        count: values.len(),
        coverage: inside as f64 / values.len() as f64,
        median,
        median_offset: median - 0.5 * (lo + hi),
        q1,
        q3,
        iqr: q3 - q1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassReliability {
    pub class_id: u32,
    pub category: String,
    pub lo: f64,
    pub hi: f64,
    pub synthetic: DistributionStats,
    pub reference: DistributionStats,
    /// Reference median minus synthetic median.
    pub median_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReliabilityReport {
    pub modality: Modality,
    pub classes: Vec<ClassReliability>,
}

impl ReliabilityReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "modality,class_id,category,lo,hi,source,count,coverage,median,median_offset,q1,q3,iqr\n",
        );
        for c in &self.classes {
            for (source, s) in [("synthetic", &c.synthetic), ("reference", &c.reference)] {
                let _ = writeln!(
                    out,
                    "{},{},{:?},{},{},{},{},{},{},{},{},{},{}",
                    self.modality, c.class_id, c.category, c.lo, c.hi, source, s.count, s.coverage,
                    s.median, s.median_offset, s.q1, s.q3, s.iqr
                );
            }
        }
        out
    }
}

/// Per-class coverage, median offset and IQR of a synthetic raster and a
/// reference raster of the same modality over the same label layout.
pub fn reliability(synthetic: &Raster, reference: &Raster, labels: &LabelMask, graph: &Pckg) -> Result<ReliabilityReport> {
    if synthetic.modality() != reference.modality() {
        return Err(Error::Input(format!(
            "cannot compare a {} raster with a {} raster",
            synthetic.modality(),
            reference.modality()
        )));
    }
    for r in [synthetic, reference] {
        if r.height() != labels.height() || r.width() != labels.width() {
            return Err(Error::Dimension(format!(
                "{} raster is {}x{}, labels are {}x{}",
                r.modality(),
                r.height(),
                r.width(),
                labels.height(),
                labels.width()
            )));
        }
    }
    let m = synthetic.modality();
    let mut classes = Vec::new();
    for k in 1..=graph.num_classes() as u32 {
        let pick = |r: &Raster| -> Vec<f64> {
            labels
                .labels()
                .iter()
                .zip(r.values())
                .filter(|(l, _)| **l == k)
                .map(|(_, v)| *v)
                .collect()
        };
        let (sv, rv) = (pick(synthetic), pick(reference));
        if sv.is_empty() {
            continue;
        }
        let iv = graph.interval(k, m)?;
        let syn = distribution(sv, iv.lo(), iv.hi());
        let refd = distribution(rv, iv.lo(), iv.hi());
        classes.push(ClassReliability {
            class_id: k,
            category: graph.entries()[k as usize - 1].category.clone(),
            lo: iv.lo(),
            hi: iv.hi(),
            median_gap: refd.median - syn.median,
            synthetic: syn,
            reference: refd,
        });
    }
    if labels.max_label() as usize > graph.num_classes() {
        return Err(Error::Lookup {
            class_id: labels.max_label(),
            num_classes: graph.num_classes(),
        });
    }
    Ok(ReliabilityReport { modality: m, classes })
}
