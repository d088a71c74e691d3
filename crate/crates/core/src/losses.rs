//! Joint visual-physical objective: pixel loss (cross-entropy + Dice),
//! region compactness, and the interval hinge on region-mean physical values.
//!
//! Regions are hard argmax assignments of the prediction. Because argmax is
//! piecewise constant, the hinge evaluated on hard regions carries no
//! gradient with respect to the prediction. Training therefore descends a
//! surrogate ([`soft_phys_loss`]) in which each class region is weighted by
//! the predicted score; for one-hot predictions it coincides with the hard
//! value.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureMap, LabelMask, Modality, ProbMap, RasterSet};
use crate::pckg::Pckg;

/// Probability clamp used inside cross-entropy.
pub const CE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DiceMode {
    /// `1 - soft Dice coefficient`, minimized together with CE.
    #[default]
    Loss,
    /// The raw coefficient, added as written.
    Coefficient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub dice_mode: DiceMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lambda1: 0.05,
            lambda2: 0.40,
            dice_mode: DiceMode::Loss,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_pred_gt(pred: &ProbMap, gt: &LabelMask) -> Result<()> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::Dimension(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    if gt.max_label() as usize > pred.classes() {
        return Err(Error::Dimension(format!(
            "ground truth label {} exceeds {} prediction channels",
            gt.max_label(),
            pred.classes()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SegLoss {
    pub value: f64,
    pub ce: f64,
    pub dice: f64,
    /// d(value)/d(pred), same layout as the prediction.
    pub grad: Vec<f64>,
}

/// `CE + alpha * Dice` over labeled pixels (ground truth 0 is ignored).
pub fn seg_loss(pred: &ProbMap, gt: &LabelMask, alpha: f64, dice_mode: DiceMode) -> Result<SegLoss> {
    check_pred_gt(pred, gt)?;
    let cls = pred.classes();
    let mut grad = vec![0.0; pred.data().len()];
    let labeled: Vec<usize> = (0..gt.len()).filter(|&i| gt.labels()[i] != 0).collect();
    if labeled.is_empty() {
        return Ok(SegLoss {
            value: 0.0,
            ce: 0.0,
            dice: 0.0,
            grad,
        });
    }
    let n = labeled.len() as f64;

    let mut ce = 0.0;
    let (mut inter, mut mass) = (0.0, 0.0);
    for &i in &labeled {
        let g = gt.labels()[i] as usize - 1;
        let row = pred.pixel(i);
        let p = row[g];
        let pc = p.clamp(CE_EPS, 1.0 - CE_EPS);
        ce -= pc.ln();
        if p > CE_EPS && p < 1.0 - CE_EPS {
            grad[i * cls + g] -= 1.0 / (n * p);
        }
        inter += p;
        mass += row.iter().sum::<f64>();
    }
    ce /= n;

    let denom = mass + n;
    let coef = 2.0 * inter / denom;
    let sign = match dice_mode {
        DiceMode::Loss => -1.0,
        DiceMode::Coefficient => 1.0,
    };
    let dice = match dice_mode {
        DiceMode::Loss => 1.0 - coef,
        DiceMode::Coefficient => coef,
    };
    if alpha != 0.0 {
        let common = -2.0 * inter / (denom * denom);
        for &i in &labeled {
            let g = gt.labels()[i] as usize - 1;
            for k in 0..cls {
                let d = if k == g { 2.0 / denom + common } else { common };
                grad[i * cls + k] += alpha * sign * d;
            }
        }
    }

    Ok(SegLoss {
        value: ce + alpha * dice,
        ce,
        dice,
        grad,
    })
}

/// Hard regions of a prediction and their mean features / physical values.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionStats {
    /// Class id (1-based) of every pixel.
    pub assignment: Vec<u32>,
    /// `|R_c|` for class ids `1..=C` at index `c - 1`.
    pub counts: Vec<usize>,
    /// Mean feature vector per class; `None` for empty regions.
    pub feature_means: Vec<Option<Vec<f64>>>,
    /// Per modality slot: mean value per class, when that raster was given.
    pub phys_means: [Option<Vec<Option<f64>>>; 3],
}

impl RegionStats {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty_class(&self, class_id: u32) -> bool {
        self.counts[class_id as usize - 1] == 0
    }

    pub fn phys_mean(&self, modality: Modality, class_id: u32) -> Option<f64> {
        self.phys_means[modality.index()].as_ref()?[class_id as usize - 1]
    }
}

/// Mean of `values`, kept inside `[min, max]` of its inputs so rounding never
/// pushes it past the extremes.
pub(crate) fn bounded_mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n, mut lo, mut hi) = (0.0, 0usize, f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        sum += v;
        n += 1;
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (n > 0).then(|| (sum / n as f64).clamp(lo, hi))
}

pub fn region_stats(pred: &ProbMap, features: &FeatureMap, rasters: &RasterSet) -> Result<RegionStats> {
    if features.height() != pred.height() || features.width() != pred.width() {
        return Err(Error::Dimension(format!(
            "features are {}x{}, prediction is {}x{}",
            features.height(),
            features.width(),
            pred.height(),
            pred.width()
        )));
    }
    rasters.check_shape(pred.height(), pred.width(), "prediction")?;
    let cls = pred.classes();
    let assignment = pred.argmax().labels().to_vec();
    Ok(stats_for_assignment(assignment, cls, features, rasters))
}

pub(crate) fn stats_for_assignment(
    assignment: Vec<u32>,
    cls: usize,
    features: &FeatureMap,
    rasters: &RasterSet,
) -> RegionStats {
    let dim = features.dim();
    let mut counts = vec![0usize; cls];
    let mut sums = vec![0.0; cls * dim];
    for (i, &c) in assignment.iter().enumerate() {
        let k = c as usize - 1;
        counts[k] += 1;
        for (s, f) in sums[k * dim..(k + 1) * dim].iter_mut().zip(features.pixel(i)) {
            *s += f;
        }
    }
    let feature_means = (0..cls)
        .map(|k| {
            (counts[k] > 0).then(|| {
                sums[k * dim..(k + 1) * dim]
                    .iter()
                    .map(|s| s / counts[k] as f64)
                    .collect()
            })
        })
        .collect();
    let mut phys_means: [Option<Vec<Option<f64>>>; 3] = [None, None, None];
    for r in rasters.iter() {
        let means = (1..=cls as u32)
            .map(|c| {
                bounded_mean(
                    assignment
                        .iter()
                        .zip(r.values())
                        .filter(|(a, _)| **a == c)
                        .map(|(_, v)| *v),
                )
            })
            .collect();
        phys_means[r.modality().index()] = Some(means);
    }
    RegionStats {
        assignment,
        counts,
        feature_means,
        phys_means,
    }
}

#[derive(Debug, Clone)]
pub struct RegionLoss {
    pub value: f64,
    /// d(value)/d(features). The gradient with respect to the prediction is
    /// identically zero: regions are frozen per evaluation and the features
    /// are an input.
    pub grad_features: Vec<f64>,
}

/// Sum over classes of the mean squared distance of features to their region mean.
pub fn region_loss(stats: &RegionStats, features: &FeatureMap) -> Result<RegionLoss> {
    if stats.assignment.len() != features.pixels() {
        return Err(Error::Dimension(format!(
            "region stats cover {} pixels, features {}",
            stats.assignment.len(),
            features.pixels()
        )));
    }
    let dim = features.dim();
    let mut value = 0.0;
    let mut per_class = vec![0.0; stats.num_classes()];
    let mut grad_features = vec![0.0; features.data().len()];
    for (i, &c) in stats.assignment.iter().enumerate() {
        let k = c as usize - 1;
        let mu = stats.feature_means[k].as_ref().expect("assigned class has a mean");
        let n = stats.counts[k] as f64;
        for d in 0..dim {
            let diff = features.pixel(i)[d] - mu[d];
            per_class[k] += diff * diff;
            grad_features[i * dim + d] = 2.0 * diff / n;
        }
    }
    for (k, s) in per_class.iter().enumerate() {
        if stats.counts[k] > 0 {
            value += s / stats.counts[k] as f64;
        }
    }
    Ok(RegionLoss {
        value,
        grad_features,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhysTerm {
    pub class_id: u32,
    pub category: String,
    pub modality: Modality,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone)]
pub struct PhysLoss {
    pub value: f64,
    pub per_modality: Vec<(Modality, f64)>,
    /// One diagnostic per nonempty (class, modality).
    pub terms: Vec<PhysTerm>,
    /// d(value)/d(region mean), per modality slot and class index.
    pub grad_means: [Vec<f64>; 3],
}

/// Squared hinge of `mean` against `[lo, hi]` and its derivative.
fn hinge(mean: f64, lo: f64, hi: f64) -> (f64, f64) {
    let up = (mean - hi).max(0.0);
    let down = (lo - mean).max(0.0);
    (up * up + down * down, 2.0 * up - 2.0 * down)
}

fn resolve_modalities(modalities: &[Modality], have: impl Fn(Modality) -> bool) -> Result<Vec<Modality>> {
    let mut out: Vec<Modality> = Vec::new();
    for &m in modalities {
        if !have(m) {
            return Err(Error::Input(format!("no {m} raster supplied for the physics loss")));
        }
        if !out.contains(&m) {
            out.push(m);
        }
    }
    out.sort();
    Ok(out)
}

/// Interval hinge on hard-region means, averaged over `modalities`.
pub fn phys_loss(stats: &RegionStats, graph: &Pckg, modalities: &[Modality]) -> Result<PhysLoss> {
    let mods = resolve_modalities(modalities, |m| stats.phys_means[m.index()].is_some())?;
    let cls = stats.num_classes();
    let mut out = PhysLoss {
        value: 0.0,
        per_modality: Vec::new(),
        terms: Vec::new(),
        grad_means: [vec![0.0; cls], vec![0.0; cls], vec![0.0; cls]],
    };
    if mods.is_empty() {
        return Ok(out);
    }
    let scale = 1.0 / mods.len() as f64;
    for m in mods {
        let means = stats.phys_means[m.index()].as_ref().expect("checked above");
        let mut lm = 0.0;
        for (k, mean) in means.iter().enumerate() {
            let Some(mean) = *mean else { continue };
            let class_id = k as u32 + 1;
            let entry = graph.entry(class_id)?;
            let interval = entry.range(m);
            let (penalty, d) = hinge(mean, interval.lo(), interval.hi());
            lm += penalty;
            out.grad_means[m.index()][k] = scale * d;
            out.terms.push(PhysTerm {
                class_id,
                category: entry.category.clone(),
                modality: m,
                mean,
                lo: interval.lo(),
                hi: interval.hi(),
                penalty,
            });
        }
        out.per_modality.push((m, lm));
        out.value += scale * lm;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SoftPhysLoss {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Hinge on score-weighted region means: class `c`'s mean is
/// `sum_i p_ic v_i / sum_i p_ic`. Differentiable in the prediction.
pub fn soft_phys_loss(
    pred: &ProbMap,
    rasters: &RasterSet,
    graph: &Pckg,
    modalities: &[Modality],
) -> Result<SoftPhysLoss> {
    rasters.check_shape(pred.height(), pred.width(), "prediction")?;
    let mods = resolve_modalities(modalities, |m| rasters.get(m).is_some())?;
    let cls = pred.classes();
    let mut grad = vec![0.0; pred.data().len()];
    let mut value = 0.0;
    if mods.is_empty() {
        return Ok(SoftPhysLoss { value, grad });
    }
    let scale = 1.0 / mods.len() as f64;

    let mut mass = vec![0.0; cls];
    for i in 0..pred.pixels() {
        for (m, p) in mass.iter_mut().zip(pred.pixel(i)) {
            *m += p;
        }
    }
    for m in mods {
        let values = rasters.get(m).expect("checked above").values();
        let mut weighted = vec![0.0; cls];
        for (i, v) in values.iter().enumerate() {
            for (w, p) in weighted.iter_mut().zip(pred.pixel(i)) {
                *w += p * v;
            }
        }
        for k in 0..cls {
            if mass[k] <= 1e-12 {
                continue;
            }
            let interval = graph.interval(k as u32 + 1, m)?;
            let mean = weighted[k] / mass[k];
            let (penalty, d) = hinge(mean, interval.lo(), interval.hi());
            value += scale * penalty;
            if d != 0.0 {
                let coef = scale * d / mass[k];
                for (i, v) in values.iter().enumerate() {
                    grad[i * cls + k] += coef * (v - mean);
                }
            }
        }
    }
    Ok(SoftPhysLoss { value, grad })
}

/// Component breakdown of the total loss.
#[derive(Debug, Clone, Serialize)]
pub struct LossBreakdown {
    pub seg: f64,
    pub region: f64,
    pub phys: f64,
    pub total: f64,
    pub per_class_phys: Vec<PhysTerm>,
}

impl LossBreakdown {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("breakdown serializes")
    }
}

/// `L_seg + lambda1 * L_region + lambda2 * L_phys`, with the physics term
/// taken over every raster in `rasters`.
pub fn total_loss(
    pred: &ProbMap,
    gt: &LabelMask,
    features: &FeatureMap,
    rasters: &RasterSet,
    graph: &Pckg,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let seg = seg_loss(pred, gt, weights.alpha, weights.dice_mode)?;
    let stats = region_stats(pred, features, rasters)?;
    let region = region_loss(&stats, features)?;
    let phys = phys_loss(&stats, graph, &rasters.modalities())?;
    Ok(LossBreakdown {
        seg: seg.value,
        region: region.value,
        phys: phys.value,
        total: seg.value + weights.lambda1 * region.value + weights.lambda2 * phys.value,
        per_class_phys: phys.terms,
    })
}

/// Training objective: the hard breakdown for reporting, plus the
/// differentiable surrogate that gradient descent actually follows.
#[derive(Debug, Clone)]
pub struct Objective {
    pub breakdown: LossBreakdown,
    /// `L_seg + lambda1 * L_region + lambda2 * soft L_phys`.
    pub surrogate: f64,
    /// d(surrogate)/d(pred).
    pub grad: Vec<f64>,
}

pub fn objective(
    pred: &ProbMap,
    gt: &LabelMask,
    features: &FeatureMap,
    rasters: &RasterSet,
    graph: &Pckg,
    weights: &LossWeights,
) -> Result<Objective> {
    let breakdown = total_loss(pred, gt, features, rasters, graph, weights)?;
    let seg = seg_loss(pred, gt, weights.alpha, weights.dice_mode)?;
    let mut grad = seg.grad;
    let mut surrogate = seg.value + weights.lambda1 * breakdown.region;
    if weights.lambda2 != 0.0 {
        let soft = soft_phys_loss(pred, rasters, graph, &rasters.modalities())?;
        surrogate += weights.lambda2 * soft.value;
        for (g, s) in grad.iter_mut().zip(&soft.grad) {
            *g += weights.lambda2 * s;
        }
    }
    Ok(Objective {
        breakdown,
        surrogate,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Raster;
    use crate::testutil::graph_from;

    #[test]
    fn ce_of_even_split_is_ln2() {
        let pred = ProbMap::new(1, 1, 2, vec![0.5, 0.5]).unwrap();
        let gt = LabelMask::new(1, 1, vec![1]).unwrap();
        let s = seg_loss(&pred, &gt, 0.0, DiceMode::Loss).unwrap();
        assert!((s.value - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((s.value - std::f64::consts::LN_2).abs() < 1e-4);
    }

    #[test]
    fn perfect_prediction() {
        let pred = ProbMap::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let gt = LabelMask::new(1, 2, vec![1, 2]).unwrap();
        let s = seg_loss(&pred, &gt, 1.0, DiceMode::Loss).unwrap();
        assert!(s.ce < 1e-6);
        assert!(s.dice.abs() < 1e-12);
        assert!(s.value < 1e-6);
    }

    #[test]
    fn disjoint_dice_is_one() {
        let pred = ProbMap::new(1, 2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let gt = LabelMask::new(1, 2, vec![1, 2]).unwrap();
        let s = seg_loss(&pred, &gt, 1.0, DiceMode::Loss).unwrap();
        assert_eq!(s.dice, 1.0);
        let c = seg_loss(&pred, &gt, 1.0, DiceMode::Coefficient).unwrap();
        assert_eq!(c.dice, 0.0);
    }

    #[test]
    fn shape_mismatch() {
        let pred = ProbMap::zeros(2, 2, 2);
        let gt = LabelMask::filled(2, 3, 1);
        assert!(matches!(seg_loss(&pred, &gt, 1.0, DiceMode::Loss), Err(Error::Dimension(_))));
    }

    #[test]
    fn region_means_and_tie_break() {
        let pred = ProbMap::new(1, 2, 2, vec![0.5, 0.5, 0.9, 0.1]).unwrap();
        let feats = FeatureMap::new(1, 2, 1, vec![0.0, 2.0]).unwrap();
        let stats = region_stats(&pred, &feats, &RasterSet::new()).unwrap();
        assert_eq!(stats.assignment, vec![1, 1]);
        assert_eq!(stats.counts, vec![2, 0]);
        assert_eq!(stats.feature_means[0], Some(vec![1.0]));
        assert!(stats.is_empty_class(2));
        let rl = region_loss(&stats, &feats).unwrap();
        assert!((rl.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_features_zero_region_loss() {
        let pred = ProbMap::new(1, 3, 2, vec![0.9, 0.1, 0.9, 0.1, 0.2, 0.8]).unwrap();
        let feats = FeatureMap::new(1, 3, 2, vec![1.0, 2.0, 1.0, 2.0, -3.0, 0.5]).unwrap();
        let stats = region_stats(&pred, &feats, &RasterSet::new()).unwrap();
        assert_eq!(region_loss(&stats, &feats).unwrap().value, 0.0);
    }

    fn one_region(mean: f64) -> (RegionStats, crate::pckg::Pckg) {
        let g = graph_from(&[("a", [0.3, 0.7], [0.0, 1.0], [0.0, 1.0])]);
        let pred = ProbMap::new(1, 1, 1, vec![1.0]).unwrap();
        let feats = FeatureMap::new(1, 1, 1, vec![0.0]).unwrap();
        let rasters = RasterSet::new().with(Raster::new(Modality::Ndvi, 1, 1, vec![mean]).unwrap());
        (region_stats(&pred, &feats, &rasters).unwrap(), g)
    }

    #[test]
    fn hinge_hand_cases() {
        for (mean, expected) in [(0.5, 0.0), (0.9, 0.04), (0.1, 0.04)] {
            let (stats, g) = one_region(mean);
            let p = phys_loss(&stats, &g, &[Modality::Ndvi]).unwrap();
            assert!((p.value - expected).abs() < 1e-12, "{mean}: {}", p.value);
            assert_eq!(p.terms.len(), 1);
        }
    }

    #[test]
    fn phys_averages_over_modalities() {
        let g = graph_from(&[("a", [0.3, 0.7], [0.0, 1.0], [0.0, 1.0])]);
        let pred = ProbMap::new(1, 1, 1, vec![1.0]).unwrap();
        let feats = FeatureMap::new(1, 1, 1, vec![0.0]).unwrap();
        let rasters = RasterSet::new()
            .with(Raster::new(Modality::Ndvi, 1, 1, vec![0.9]).unwrap())
            .with(Raster::new(Modality::Sar, 1, 1, vec![0.5]).unwrap());
        let stats = region_stats(&pred, &feats, &rasters).unwrap();
        let p = phys_loss(&stats, &g, &[Modality::Ndvi, Modality::Sar]).unwrap();
        assert!((p.value - 0.02).abs() < 1e-12);
        assert!(phys_loss(&stats, &g, &[Modality::Dem]).is_err());
    }

    #[test]
    fn unresolvable_class_is_lookup_error() {
        let g = graph_from(&[("a", [0.3, 0.7], [0.0, 1.0], [0.0, 1.0])]);
        let pred = ProbMap::new(1, 1, 2, vec![0.1, 0.9]).unwrap();
        let feats = FeatureMap::new(1, 1, 1, vec![0.0]).unwrap();
        let rasters = RasterSet::new().with(Raster::new(Modality::Ndvi, 1, 1, vec![0.5]).unwrap());
        let stats = region_stats(&pred, &feats, &rasters).unwrap();
        assert!(matches!(
            phys_loss(&stats, &g, &[Modality::Ndvi]),
            Err(Error::Lookup { class_id: 2, .. })
        ));
    }

    #[test]
    fn degenerate_weights_equal_seg() {
        let g = graph_from(&[
            ("a", [0.3, 0.7], [0.0, 1.0], [0.0, 1.0]),
            ("b", [0.0, 0.1], [0.0, 1.0], [0.0, 1.0]),
        ]);
        let pred = ProbMap::new(1, 2, 2, vec![0.7, 0.3, 0.4, 0.6]).unwrap();
        let gt = LabelMask::new(1, 2, vec![1, 1]).unwrap();
        let feats = FeatureMap::new(1, 2, 1, vec![0.0, 4.0]).unwrap();
        let rasters = RasterSet::new().with(Raster::new(Modality::Ndvi, 1, 2, vec![0.9, 0.9]).unwrap());
        let w = LossWeights {
            alpha: 1.0,
            lambda1: 0.0,
            lambda2: 0.0,
            ..Default::default()
        };
        let b = total_loss(&pred, &gt, &feats, &rasters, &g, &w).unwrap();
        let s = seg_loss(&pred, &gt, 1.0, DiceMode::Loss).unwrap();
        assert_eq!(b.total, s.value);
        assert!(b.phys > 0.0);
        let json = b.to_json();
        for key in ["\"seg\"", "\"region\"", "\"phys\"", "\"total\"", "\"per_class_phys\""] {
            assert!(json.contains(key));
        }
    }

    #[test]
    fn soft_matches_hard_on_one_hot() {
        let g = graph_from(&[
            ("a", [0.3, 0.7], [0.0, 1.0], [0.0, 1.0]),
            ("b", [0.0, 0.1], [0.0, 1.0], [0.0, 1.0]),
        ]);
        let pred = ProbMap::new(1, 3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let feats = FeatureMap::new(1, 3, 1, vec![0.0; 3]).unwrap();
        let rasters = RasterSet::new().with(Raster::new(Modality::Ndvi, 1, 3, vec![0.9, 0.5, 0.95]).unwrap());
        let stats = region_stats(&pred, &feats, &rasters).unwrap();
        let hard = phys_loss(&stats, &g, &[Modality::Ndvi]).unwrap().value;
        let soft = soft_phys_loss(&pred, &rasters, &g, &[Modality::Ndvi]).unwrap().value;
        assert!((hard - soft).abs() < 1e-12, "{hard} vs {soft}");
    }
}
