//! Inference in visual-only and visual-physical modes.
//!
//! For each pixel `i`, class `c` and available modality `m`, the distance
//! `d` of the measured value to the class interval becomes an attenuation
//! `s = exp(-min(d, tau)^2 / sigma^2)`. The product over modalities
//! re-weights the refined scores, which are then renormalized per pixel.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{argmax_index, FeatureMap, LabelMask, Modality, ProbMap, RasterSet};
use crate::pckg::{Interval, Pckg};
use crate::refiner::{assemble_joint, refine, RefinerParams};

/// Floor applied to sigma for zero-width intervals, in modality units.
pub const SIGMA_FLOOR: f64 = 1e-3;
/// Below this the re-weighting denominator is treated as zero.
pub const DENOM_FLOOR: f64 = 1e-12;

/// `exp(-min(d, tau)^2 / sigma^2)`.
pub fn attenuation(d: f64, tau: f64, sigma: f64) -> Result<f64> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::Config(format!("sigma must be > 0, got {sigma}")));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Config(format!("tau must be > 0, got {tau}")));
    }
    let x = d.min(tau);
    Ok((-(x * x) / (sigma * sigma)).exp())
}

/// How tau and sigma are obtained for one modality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Tolerance {
    /// `sigma = sigma_frac * (hi - lo)` (floored) and `tau = tau_mult * sigma`,
    /// per class.
    Relative { sigma_frac: f64, tau_mult: f64 },
    /// Fixed values in modality units.
    Absolute { tau: f64, sigma: f64 },
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance::Relative {
            sigma_frac: 0.5,
            tau_mult: 2.0,
        }
    }
}

impl Tolerance {
    /// `(tau, sigma)` for a class interval.
    pub fn resolve(&self, interval: Interval) -> (f64, f64) {
        match *self {
            Tolerance::Relative { sigma_frac, tau_mult } => {
                let sigma = (sigma_frac * interval.width()).max(SIGMA_FLOOR);
                (tau_mult * sigma, sigma)
            }
            Tolerance::Absolute { tau, sigma } => (tau, sigma),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Tolerance::Relative { sigma_frac, tau_mult } => sigma_frac > 0.0 && tau_mult > 0.0,
            Tolerance::Absolute { tau, sigma } => tau > 0.0 && sigma > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("tau and sigma must be positive: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AttenuationConfig {
    /// Tolerances indexed by [`Modality::index`].
    pub tolerance: [Tolerance; 3],
    /// Modalities used at inference; anything else supplied is ignored.
    pub available: Vec<Modality>,
}

impl AttenuationConfig {
    pub fn visual_only() -> Self {
        Self::default()
    }

    pub fn with_available(available: &[Modality]) -> Self {
        Self {
            available: available.to_vec(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.tolerance.iter().try_for_each(Tolerance::validate)
    }

    fn active(&self) -> Vec<Modality> {
        Modality::ALL.into_iter().filter(|m| self.available.contains(m)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModalityEvidence {
    pub modality: Modality,
    pub value: f64,
    pub d_pre: f64,
    pub s_pre: f64,
    pub d_post: f64,
    pub s_post: f64,
}

/// One pixel whose label changed under re-weighting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlipRecord {
    pub row: usize,
    pub col: usize,
    pub pre_label: u32,
    pub post_label: u32,
    pub evidence: Vec<ModalityEvidence>,
    pub pre_reasoning: String,
    pub post_reasoning: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RefinementTrace {
    pub flips: Vec<FlipRecord>,
    pub warnings: Vec<String>,
}

impl RefinementTrace {
    /// One JSON object per flipped pixel, newline separated.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for f in &self.flips {
            out.push_str(&serde_json::to_string(f).expect("trace serializes"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reweighted {
    pub probs: ProbMap,
    pub labels: LabelMask,
    pub trace: RefinementTrace,
}

/// Attenuates `refined` by the physical evidence and renormalizes per pixel.
pub fn reweight(
    refined: &ProbMap,
    rasters: &RasterSet,
    graph: &Pckg,
    config: &AttenuationConfig,
) -> Result<Reweighted> {
    config.validate()?;
    let cls = refined.classes();
    if cls != graph.num_classes() {
        return Err(Error::Dimension(format!(
            "refined map has {cls} classes, knowledge graph has {}",
            graph.num_classes()
        )));
    }
    let active: Vec<Modality> = config
        .active()
        .into_iter()
        .filter(|m| rasters.get(*m).is_some())
        .collect();
    let used = rasters.restricted_to(&active);
    used.check_shape(refined.height(), refined.width(), "refined map")?;

    // per (modality, class): interval, tau, sigma
    let mut params: Vec<Vec<(Interval, f64, f64)>> = Vec::new();
    for &m in &active {
        let tol = config.tolerance[m.index()];
        params.push(
            (1..=cls as u32)
                .map(|c| {
                    let iv = graph.interval(c, m)?;
                    let (tau, sigma) = tol.resolve(iv);
                    Ok((iv, tau, sigma))
                })
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let values: Vec<&[f64]> = active.iter().map(|m| used.get(*m).expect("filtered").values()).collect();

    let w = refined.width();
    let mut probs = ProbMap::zeros(refined.height(), w, cls);
    let mut labels = Vec::with_capacity(refined.pixels());
    let mut trace = RefinementTrace::default();
    let mut fallback = 0usize;
    let mut s = vec![0.0; cls];
    for i in 0..refined.pixels() {
        let y = refined.pixel(i);
        s.iter_mut().for_each(|v| *v = 1.0);
        for (mi, table) in params.iter().enumerate() {
            let v = values[mi][i];
            for (c, &(iv, tau, sigma)) in table.iter().enumerate() {
                s[c] *= attenuation(iv.distance(v), tau, sigma)?;
            }
        }
        let denom: f64 = y.iter().zip(&s).map(|(a, b)| a * b).sum();
        let out = probs.pixel_mut(i);
        if denom > DENOM_FLOOR {
            for c in 0..cls {
                out[c] = y[c] * s[c] / denom;
            }
        } else {
            fallback += 1;
            let total: f64 = y.iter().sum();
            for c in 0..cls {
                out[c] = if total > 0.0 { y[c] / total } else { 1.0 / cls as f64 };
            }
        }
        let pre = argmax_index(y);
        let post = argmax_index(out);
        labels.push(post as u32 + 1);
        if pre != post {
            let evidence = active
                .iter()
                .enumerate()
                .map(|(mi, &m)| {
                    let v = values[mi][i];
                    let (ip, tp, sp) = params[mi][pre];
                    let (iq, tq, sq) = params[mi][post];
                    let (dp, dq) = (ip.distance(v), iq.distance(v));
                    Ok(ModalityEvidence {
                        modality: m,
                        value: v,
                        d_pre: dp,
                        s_pre: attenuation(dp, tp, sp)?,
                        d_post: dq,
                        s_post: attenuation(dq, tq, sq)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            trace.flips.push(FlipRecord {
                row: i / w,
                col: i % w,
                pre_label: pre as u32 + 1,
                post_label: post as u32 + 1,
                evidence,
                pre_reasoning: graph.entry(pre as u32 + 1)?.reasoning.clone(),
                post_reasoning: graph.entry(post as u32 + 1)?.reasoning.clone(),
            });
        }
    }
    if fallback > 0 {
        trace.warnings.push(format!(
            "{fallback} pixel(s) fully attenuated; fell back to refined scores"
        ));
    }
    Ok(Reweighted {
        probs,
        labels: LabelMask::new(refined.height(), w, labels)?,
        trace,
    })
}

/// Full two-mode inference: joint assembly, residual refinement, re-weighting.
/// Rasters for modalities not listed in `config.available` are dropped before
/// any stage sees them.
pub fn infer(
    params: &RefinerParams,
    features: &FeatureMap,
    coarse: &ProbMap,
    rasters: &RasterSet,
    graph: &Pckg,
    config: &AttenuationConfig,
) -> Result<Reweighted> {
    let used = rasters.restricted_to(&config.available);
    let z = assemble_joint(features, coarse, &used, graph)?;
    let refined = refine(params, &z, coarse)?;
    reweight(&refined.refined, &used, graph, config)
}

/// Flip counts keyed by `(pre, post)` label pair, for summaries.
pub fn flip_summary(trace: &RefinementTrace) -> BTreeMap<(u32, u32), usize> {
    let mut out = BTreeMap::new();
    for f in &trace.flips {
        *out.entry((f.pre_label, f.post_label)).or_insert(0) += 1;
    }
    out
}
