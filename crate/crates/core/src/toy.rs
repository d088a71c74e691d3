//! Deterministic toy benchmark: four land-cover classes, two of which
//! (concrete and metal roofs) look identical to the backbone and differ only
//! in SAR backscatter. Used by the ablation ladder and the end-to-end tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Map;

use crate::error::Result;
use crate::grid::{LabelMask, Modality, RasterSet};
use crate::inference::{infer, AttenuationConfig};
use crate::losses::LossWeights;
use crate::metrics::miou;
use crate::pckg::{Interval, Pckg, PckgEntry};
use crate::refiner::{assemble_joint, mock_backbone, refine, train, HistoryRow, RefinerParams, Scene, TrainConfig};
use crate::synth::{derive_seed, synthesize_scene, SynthConfig};

pub const TOY_SIZE: usize = 32;
pub const TOY_SCENES: usize = 3;
/// Concrete roof (3) and metal roof (4).
pub const TOY_AMBIGUITY: (u32, u32) = (3, 4);

/// `(category, NDVI, DEM, SAR)` interval bounds.
pub type Ranges<'a> = (&'a str, [f64; 2], [f64; 2], [f64; 2]);

/// Entry with placeholder text fields.
pub fn entry_from_ranges(name: &str, ndvi: [f64; 2], dem: [f64; 2], sar: [f64; 2]) -> Result<PckgEntry> {
    Ok(PckgEntry {
        category: name.to_owned(),
        meaning: format!("{name} meaning"),
        modifier_analysis: "none".into(),
        coarse_class: name.to_owned(),
        ndvi_range: Interval::new(ndvi[0], ndvi[1])?,
        dem_range: Interval::new(dem[0], dem[1])?,
        sar_range: Interval::new(sar[0], sar[1])?,
        reasoning: format!("{name} reasoning"),
        extra: Map::new(),
    })
}

pub fn graph_from_ranges(rows: &[Ranges<'_>]) -> Result<Pckg> {
    Pckg::new(
        rows.iter()
            .map(|(n, a, b, c)| entry_from_ranges(n, *a, *b, *c))
            .collect::<Result<Vec<_>>>()?,
    )
}

fn toy_entry(
    name: &str,
    meaning: &str,
    coarse: &str,
    ranges: ([f64; 2], [f64; 2], [f64; 2]),
    reasoning: &str,
) -> PckgEntry {
    let mut e = entry_from_ranges(name, ranges.0, ranges.1, ranges.2).expect("toy ranges are valid");
    e.meaning = meaning.into();
    e.coarse_class = coarse.into();
    e.reasoning = reasoning.into();
    e
}

pub fn toy_graph() -> Pckg {
    Pckg::new(vec![
        toy_entry(
            "water",
            "open inland water",
            "water",
            ([-0.50, 0.10], [0.00, 50.00], [-25.00, -15.00]),
            "Water absorbs near-infrared light so NDVI is low; it pools in low terrain; a smooth surface reflects radar away, giving very low backscatter.",
        ),
        toy_entry(
            "forest",
            "dense tree canopy",
            "vegetation",
            ([0.60, 0.90], [50.00, 400.00], [-12.00, -6.00]),
            "Healthy canopy reflects strongly in near-infrared; forests persist on slopes and uplands; volume scattering gives moderate backscatter.",
        ),
        toy_entry(
            "concrete roof",
            "flat roof of concrete slabs",
            "building",
            ([-0.10, 0.20], [10.00, 120.00], [-8.00, -2.00]),
            "Concrete has no chlorophyll; buildings sit on developed lowland; rough dielectric surfaces give moderate backscatter.",
        ),
        toy_entry(
            "metal roof",
            "roof of corrugated metal sheets",
            "building",
            ([-0.10, 0.20], [10.00, 120.00], [2.00, 10.00]),
            "Metal has no chlorophyll; buildings sit on developed lowland; conductive sheets and dihedral corners give very strong backscatter.",
        ),
    ])
    .expect("toy graph is valid")
}

/// Voronoi layout with every class present.
pub fn toy_mask(height: usize, width: usize, classes: u32, seed: u64) -> LabelMask {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x6c61_796f_7574]));
    let sites: Vec<(f64, f64, u32)> = (0..3 * classes)
        .map(|k| {
            (
                rng.gen_range(0.0..height as f64),
                rng.gen_range(0.0..width as f64),
                1 + k % classes,
            )
        })
        .collect();
    let labels = (0..height * width)
        .map(|i| {
            let (r, c) = ((i / width) as f64 + 0.5, (i % width) as f64 + 0.5);
            sites
                .iter()
                .map(|&(sr, sc, l)| ((sr - r).powi(2) + (sc - c).powi(2), l))
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .map(|(_, l)| l)
                .unwrap_or(1)
        })
        .collect();
    LabelMask::new(height, width, labels).expect("sized correctly")
}

#[derive(Debug, Clone)]
pub struct ToyBenchmark {
    pub graph: Pckg,
    pub ambiguity: Vec<(u32, u32)>,
    /// Backbone outputs with synthetic rasters, used for training.
    pub train: Vec<Scene>,
    /// Same layouts with independent raster draws and backbone noise.
    pub test: Vec<Scene>,
}

impl ToyBenchmark {
    pub fn generate(seed: u64) -> Result<Self> {
        Self::generate_with_noise(seed, [0.0; 3])
    }

    /// `test_noise` adds zero-mean Gaussian measurement noise (sd in modality
    /// units, indexed by [`Modality::index`]) to the test rasters only.
    pub fn generate_with_noise(seed: u64, test_noise: [f64; 3]) -> Result<Self> {
        let graph = toy_graph();
        let ambiguity = vec![TOY_AMBIGUITY];
        let mut train = Vec::new();
        let mut test = Vec::new();
        for k in 0..TOY_SCENES as u64 {
            let mask = toy_mask(TOY_SIZE, TOY_SIZE, graph.num_classes() as u32, derive_seed(seed, &[k]));
            train.push(toy_scene(&mask, &graph, &ambiguity, derive_seed(seed, &[k, 0]))?);
            let mut t = toy_scene(&mask, &graph, &ambiguity, derive_seed(seed, &[k, 1]))?;
            add_noise(&mut t.rasters, test_noise, derive_seed(seed, &[k, 2]));
            test.push(t);
        }
        Ok(Self {
            graph,
            ambiguity,
            train,
            test,
        })
    }
}

fn add_noise(rasters: &mut RasterSet, sd: [f64; 3], seed: u64) {
    for m in Modality::ALL {
        let s = sd[m.index()];
        if s <= 0.0 {
            continue;
        }
        if let Some(mut r) = rasters.remove(m) {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[m.index() as u64]));
            let normal = rand_distr::Normal::new(0.0, s).expect("positive sd");
            for v in r.values_mut() {
                *v += rand_distr::Distribution::sample(&normal, &mut rng);
            }
            rasters.insert(r);
        }
    }
}

/// Backbone outputs and all three synthetic rasters for one mask.
pub fn toy_scene(mask: &LabelMask, graph: &Pckg, ambiguity: &[(u32, u32)], seed: u64) -> Result<Scene> {
    let synth = SynthConfig {
        seed: derive_seed(seed, &[1]),
        ..SynthConfig::default()
    };
    let rasters = synthesize_scene(mask, graph, &Modality::ALL, &synth)?;
    let (features, coarse) = mock_backbone(mask, graph, ambiguity, derive_seed(seed, &[2]))?;
    Ok(Scene {
        features,
        coarse,
        rasters,
        gt: mask.clone(),
    })
}

fn stack(masks: &[LabelMask]) -> LabelMask {
    let width = masks.first().map_or(0, LabelMask::width);
    let height = masks.iter().map(LabelMask::height).sum();
    let labels = masks.iter().flat_map(|m| m.labels().iter().copied()).collect();
    LabelMask::new(height, width, labels).expect("masks share a width")
}

/// Pooled score of predictions against the scenes' ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Score {
    pub miou: f64,
    /// Accuracy on pixels whose true class belongs to an ambiguity pair.
    pub ambiguous_accuracy: f64,
    pub accuracy: f64,
}

pub fn score(preds: &[LabelMask], scenes: &[Scene], num_classes: usize, ambiguity: &[(u32, u32)]) -> Result<Score> {
    let pred = stack(preds);
    let gt = stack(&scenes.iter().map(|s| s.gt.clone()).collect::<Vec<_>>());
    let report = miou(&pred, &gt, num_classes, false)?;
    let in_pair = |l: u32| ambiguity.iter().any(|&(a, b)| l == a || l == b);
    let (mut amb, mut amb_ok, mut all, mut all_ok) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        if g == 0 {
            continue;
        }
        all += 1;
        all_ok += usize::from(p == g);
        if in_pair(g) {
            amb += 1;
            amb_ok += usize::from(p == g);
        }
    }
    Ok(Score {
        miou: report.miou.unwrap_or(0.0),
        ambiguous_accuracy: if amb == 0 { 1.0 } else { amb_ok as f64 / amb as f64 },
        accuracy: if all == 0 { 1.0 } else { all_ok as f64 / all as f64 },
    })
}

/// How a scene is labeled during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Argmax of the backbone's coarse scores.
    Coarse,
    /// Refined scores from the joint tensor, no re-weighting.
    Refined,
    /// Refined scores re-weighted by interval distances.
    Reweighted,
}

pub fn predict(
    params: Option<&RefinerParams>,
    scene: &Scene,
    graph: &Pckg,
    modalities: &[Modality],
    mode: EvalMode,
) -> Result<LabelMask> {
    let params = match (mode, params) {
        (EvalMode::Coarse, _) | (_, None) => return Ok(scene.coarse.argmax()),
        (_, Some(p)) => p,
    };
    let rasters = scene.rasters.restricted_to(modalities);
    match mode {
        EvalMode::Refined => {
            let z = assemble_joint(&scene.features, &scene.coarse, &rasters, graph)?;
            Ok(refine(params, &z, &scene.coarse)?.refined.argmax())
        }
        _ => Ok(infer(
            params,
            &scene.features,
            &scene.coarse,
            &rasters,
            graph,
            &AttenuationConfig::with_available(modalities),
        )?
        .labels),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub seed: u64,
    pub train: TrainConfig,
    /// Modalities available at test time.
    pub modalities: Vec<Modality>,
    /// Run only the baseline row.
    pub baseline_only: bool,
    /// Measurement noise sd on the test rasters, per modality.
    pub test_noise: [f64; 3],
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            train: TrainConfig {
                epochs: 100,
                batch_size: 3,
                ..TrainConfig::default()
            },
            modalities: Modality::ALL.to_vec(),
            baseline_only: false,
            test_noise: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub use_synth_data: bool,
    pub use_pckg_reweight: bool,
    pub use_phys_loss: bool,
    pub miou: f64,
    pub ambiguous_accuracy: f64,
    /// Change in mIoU against the previous row.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
    /// Whether mIoU never decreases down the ladder.
    pub non_decreasing: bool,
    /// Whether every row improves on the previous one.
    pub strictly_increasing: bool,
}

impl AblationTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<24} {:>6} {:>8} {:>6} {:>8} {:>8} {:>8}\n",
            "row", "synth", "reweight", "phys", "mIoU", "delta", "amb.acc"
        );
        for r in &self.rows {
            let flag = |b: bool| if b { "x" } else { "-" };
            out.push_str(&format!(
                "{:<24} {:>6} {:>8} {:>6} {:>8.4} {:>+8.4} {:>8.4}\n",
                r.name,
                flag(r.use_synth_data),
                flag(r.use_pckg_reweight),
                flag(r.use_phys_loss),
                r.miou,
                r.delta,
                r.ambiguous_accuracy
            ));
        }
        if !self.non_decreasing {
            out.push_str("warning: mIoU decreases somewhere down the ladder\n");
        } else if !self.strictly_increasing {
            out.push_str("note: mIoU ties between consecutive rows\n");
        }
        out
    }
}

/// Trains a refiner on the benchmark's training scenes with or without the
/// physics term.
pub fn train_toy(bench: &ToyBenchmark, config: &TrainConfig, phys_loss: bool) -> Result<(RefinerParams, Vec<HistoryRow>)> {
    let mut cfg = config.clone();
    if !phys_loss {
        cfg.weights = LossWeights {
            lambda2: 0.0,
            ..cfg.weights
        };
    }
    let out = train(&bench.train, &bench.graph, &cfg)?;
    Ok((out.params, out.history))
}

/// The four-row ladder: backbone alone, refiner trained on synthetic
/// rasters, plus interval re-weighting, plus the physics loss.
pub fn run_ablation(config: &AblationConfig) -> Result<AblationTable> {
    let bench = ToyBenchmark::generate_with_noise(config.seed, config.test_noise)?;
    let c = bench.graph.num_classes();
    let mut rows = Vec::new();
    let mut push = |name: &str, flags: (bool, bool, bool), preds: Vec<LabelMask>| -> Result<()> {
        let s = score(&preds, &bench.test, c, &bench.ambiguity)?;
        let prev = rows.last().map_or(s.miou, |r: &AblationRow| r.miou);
        rows.push(AblationRow {
            name: name.into(),
            use_synth_data: flags.0,
            use_pckg_reweight: flags.1,
            use_phys_loss: flags.2,
            miou: s.miou,
            ambiguous_accuracy: s.ambiguous_accuracy,
            delta: s.miou - prev,
        });
        Ok(())
    };
    let run = |params: Option<&RefinerParams>, mode: EvalMode| -> Result<Vec<LabelMask>> {
        bench
            .test
            .iter()
            .map(|s| predict(params, s, &bench.graph, &config.modalities, mode))
            .collect()
    };

    push("baseline", (false, false, false), run(None, EvalMode::Coarse)?)?;
    if !config.baseline_only {
        let (plain, _) = train_toy(&bench, &config.train, false)?;
        push("+synth", (true, false, false), run(Some(&plain), EvalMode::Refined)?)?;
        push("+synth+reweight", (true, true, false), run(Some(&plain), EvalMode::Reweighted)?)?;
        let (phys, _) = train_toy(&bench, &config.train, true)?;
        push("+synth+reweight+phys", (true, true, true), run(Some(&phys), EvalMode::Reweighted)?)?;
    }
    Ok(AblationTable {
        seed: config.seed,
        non_decreasing: rows.windows(2).all(|w| w[1].miou >= w[0].miou),
        strictly_increasing: rows.windows(2).all(|w| w[1].miou > w[0].miou),
        rows,
    })
}
