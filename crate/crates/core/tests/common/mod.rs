#![allow(dead_code)]

use physprior::grid::{FeatureMap, LabelMask, Modality, ProbMap, Raster, RasterSet};
use physprior::toy::graph_from_ranges;
use physprior::Pckg;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A random graph with `classes` entries and overlapping-but-distinct intervals.
pub fn random_graph(rng: &mut ChaCha8Rng, classes: usize) -> Pckg {
    let names: Vec<String> = (0..classes).map(|k| format!("class {k}")).collect();
    let mut rows = Vec::new();
    for name in &names {
        let mut iv = |lo: f64, hi: f64| {
            let a = rng.gen_range(lo..hi);
            let b = rng.gen_range(lo..hi);
            let (a, b) = if a <= b { (a, b) } else { (b, a) };
            [a, b + (hi - lo) * 0.05]
        };
        rows.push((name.as_str(), iv(-1.0, 0.9), iv(-50.0, 500.0), iv(-40.0, 10.0)));
    }
    graph_from_ranges(&rows).expect("random ranges are valid")
}

/// Row-normalized random scores bounded away from 0.
pub fn random_probs(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> ProbMap {
    let mut data = Vec::with_capacity(h * w * c);
    for _ in 0..h * w {
        let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.05..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|v| v / sum));
    }
    ProbMap::new(h, w, c, data).unwrap()
}

/// Labels in `0..=c`, where roughly one pixel in eight is unlabeled.
pub fn random_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> LabelMask {
    let labels = (0..h * w)
        .map(|_| if rng.gen_bool(0.125) { 0 } else { rng.gen_range(1..=c as u32) })
        .collect();
    LabelMask::new(h, w, labels).unwrap()
}

pub fn random_features(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> FeatureMap {
    FeatureMap::new(h, w, d, (0..h * w * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_rasters(rng: &mut ChaCha8Rng, h: usize, w: usize) -> RasterSet {
    let mut set = RasterSet::new();
    for (m, lo, hi) in [
        (Modality::Ndvi, -1.0, 1.0),
        (Modality::Dem, -100.0, 600.0),
        (Modality::Sar, -45.0, 15.0),
    ] {
        let values = (0..h * w).map(|_| rng.gen_range(lo..hi)).collect();
        set.insert(Raster::new(m, h, w, values).unwrap());
    }
    set
}

/// Central differences of `f` at `x` with step `h`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest componentwise `|a - n| / max(|a|, |n|)`. Components far smaller
/// than the gradient's overall scale are compared against that scale instead,
/// so rounding noise on near-zero entries does not dominate.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let floor = (1e-3 * scale).max(1e-6);
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// A random valid record as JSON, with two-decimal ranges and occasionally
/// an extra field.
pub fn random_entry_json(rng: &mut ChaCha8Rng, index: usize) -> serde_json::Value {
    let mut range = |lo: f64, hi: f64| {
        let a = (rng.gen_range(lo..hi) * 100.0).round() / 100.0;
        let b = (rng.gen_range(a..=hi) * 100.0).round() / 100.0;
        serde_json::json!([a, b.max(a)])
    };
    let ndvi = range(-1.0, 1.0);
    let dem = range(-400.0, 8000.0);
    let sar = range(-50.0, 20.0);
    let coarse = ["water", "vegetation", "building"][index % 3];
    let mut v = serde_json::json!({
        "Category": format!("category {index} \u{e9}\"q\""),
        "Meaning": format!("meaning of {index}"),
        "Modifier Analysis": "none",
        "Coarse Class": coarse,
        "NDVI Range": ndvi,
        "DEM Range": dem,
        "SAR Range": sar,
        "Reasoning": format!("reasoning line\nfor {index}"),
    });
    if rng.gen_bool(0.2) {
        v["Source"] = serde_json::json!({"note": index, "weight": 0.25});
    }
    v
}

/// One way of breaking a valid document, with the error class and
/// validation kind (if any) it must produce.
#[derive(Debug, Clone, Copy)]
pub enum Mutation {
    DropField,
    Invert,
    NdviOutOfRange,
    Arity,
    StringNumber,
    EmptyCategory,
    Duplicate,
    Truncate,
}

impl Mutation {
    pub const ALL: [Mutation; 8] = [
        Mutation::DropField,
        Mutation::Invert,
        Mutation::NdviOutOfRange,
        Mutation::Arity,
        Mutation::StringNumber,
        Mutation::EmptyCategory,
        Mutation::Duplicate,
        Mutation::Truncate,
    ];

    pub fn expected(self) -> (&'static str, Option<physprior::ValidationKind>) {
        use physprior::ValidationKind as K;
        match self {
            Mutation::DropField => ("schema", None),
            Mutation::Invert => ("validation", Some(K::InvertedInterval)),
            Mutation::NdviOutOfRange => ("validation", Some(K::OutOfRange)),
            Mutation::Arity => ("validation", Some(K::BadArity)),
            Mutation::StringNumber => ("validation", Some(K::WrongType)),
            Mutation::EmptyCategory => ("validation", Some(K::EmptyCategory)),
            Mutation::Duplicate => ("validation", Some(K::DuplicateCategory)),
            Mutation::Truncate => ("parse", None),
        }
    }
}

/// A document of `n` valid entries with `mutation` applied to one of them.
pub fn mutated_document(rng: &mut ChaCha8Rng, n: usize, mutation: Mutation) -> String {
    let mut entries: Vec<serde_json::Value> = (0..n).map(|k| random_entry_json(rng, k)).collect();
    let k = rng.gen_range(0..n);
    let ranges = ["NDVI Range", "DEM Range", "SAR Range"];
    let field = ranges[rng.gen_range(0..3)];
    let e = entries[k].as_object_mut().unwrap();
    match mutation {
        Mutation::DropField => {
            let all = physprior::pckg::FIELDS;
            e.remove(all[rng.gen_range(1..all.len())]);
        }
        Mutation::Invert => {
            let lo = e[field][0].as_f64().unwrap();
            e[field] = serde_json::json!([lo + 1.0, lo]);
        }
        Mutation::NdviOutOfRange => {
            e["NDVI Range"] = serde_json::json!([0.5, 1.0 + rng.gen_range(0.01..5.0)]);
        }
        Mutation::Arity => {
            e[field] = match rng.gen_range(0..3) {
                0 => serde_json::json!([1.0]),
                1 => serde_json::json!([1.0, 2.0, 3.0]),
                _ => serde_json::json!(4.0),
            };
        }
        Mutation::StringNumber => {
            e[field] = serde_json::json!(["0.1", 0.2]);
        }
        Mutation::EmptyCategory => {
            e["Category"] = serde_json::json!("   ");
        }
        Mutation::Duplicate => {
            let copy = serde_json::Value::Object(e.clone());
            entries.push(copy);
        }
        Mutation::Truncate => {}
    }
    let text = serde_json::to_string_pretty(&entries).unwrap();
    if let Mutation::Truncate = mutation {
        let cut = rng.gen_range(1..text.len() - 1);
        return text[..cut].to_string();
    }
    text
}

/// Checks that parsing `doc` fails with the class and kind `mutation` promises.
pub fn rejected_as_expected(doc: &str, mutation: Mutation) -> Result<(), String> {
    let (class, kind) = mutation.expected();
    match Pckg::parse(doc) {
        Ok(_) => Err(format!("{mutation:?}: document was accepted")),
        Err(e) if e.class() != class => Err(format!("{mutation:?}: expected {class}, got {}: {e}", e.class())),
        Err(physprior::Error::Validation { kind: got, .. }) if Some(got) != kind => {
            Err(format!("{mutation:?}: expected {kind:?}, got {got:?}"))
        }
        Err(_) => Ok(()),
    }
}

/// Parses, re-serializes and re-parses `doc`; the graph and the serialized
/// text must both be fixed points.
pub fn round_trips(doc: &str) -> Result<usize, String> {
    let g = Pckg::parse(doc).map_err(|e| e.to_string())?;
    let text = g.to_json();
    let g2 = Pckg::parse(&text).map_err(|e| e.to_string())?;
    if g2 != g {
        return Err("graph changed after a round trip".into());
    }
    if g2.to_json() != text {
        return Err("serialization is not a fixed point".into());
    }
    Ok(g.num_classes())
}

pub mod grads {
    //! Finite-difference checks shared by the gradient tests and the
    //! acceptance suite. Each returns the worst relative error on one
    //! random instance.

    use super::*;
    use physprior::grid::{FeatureMap, ProbMap};
    use physprior::losses::{
        objective, phys_loss, region_loss, region_stats, seg_loss, soft_phys_loss, DiceMode, LossWeights,
    };
    use physprior::refiner::{assemble_joint, refine, scene_gradient, RefinerParams, Scene};
    use physprior::Modality;
    use rand::Rng;

    pub const STEP: f64 = 1e-5;
    pub const TOL: f64 = 1e-4;
    pub const INSTANCES: u64 = 20;

    fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
        (rng.gen_range(2..=8), rng.gen_range(2..=8), rng.gen_range(2..=4))
    }

    pub fn seg(seed: u64, mode: DiceMode) -> f64 {
        let mut r = rng(seed);
        let (h, w, c) = dims(&mut r);
        let pred = random_probs(&mut r, h, w, c);
        let gt = random_labels(&mut r, h, w, c);
        let alpha = r.gen_range(0.0..2.0);
        let analytic = seg_loss(&pred, &gt, alpha, mode).unwrap().grad;
        let numeric = numeric_grad(pred.data(), STEP, |x| {
            let p = ProbMap::new(h, w, c, x.to_vec()).unwrap();
            seg_loss(&p, &gt, alpha, mode).unwrap().value
        });
        max_rel_err(&analytic, &numeric)
    }

    pub fn region(seed: u64) -> f64 {
        let mut r = rng(100 + seed);
        let (h, w, c) = dims(&mut r);
        let d = r.gen_range(1..=4);
        let pred = random_probs(&mut r, h, w, c);
        let feats = random_features(&mut r, h, w, d);
        let rasters = random_rasters(&mut r, h, w);
        let stats = region_stats(&pred, &feats, &rasters).unwrap();
        let analytic = region_loss(&stats, &feats).unwrap().grad_features;
        // Regions stay fixed: the assignment comes from the prediction alone.
        let numeric = numeric_grad(feats.data(), STEP, |x| {
            let f = FeatureMap::new(h, w, d, x.to_vec()).unwrap();
            let s = region_stats(&pred, &f, &rasters).unwrap();
            region_loss(&s, &f).unwrap().value
        });
        max_rel_err(&analytic, &numeric)
    }

    pub fn phys(seed: u64) -> f64 {
        let mut r = rng(200 + seed);
        let (h, w, c) = dims(&mut r);
        let graph = random_graph(&mut r, c);
        let pred = random_probs(&mut r, h, w, c);
        let rasters = random_rasters(&mut r, h, w);
        let analytic = soft_phys_loss(&pred, &rasters, &graph, &Modality::ALL).unwrap().grad;
        let numeric = numeric_grad(pred.data(), STEP, |x| {
            let p = ProbMap::new(h, w, c, x.to_vec()).unwrap();
            soft_phys_loss(&p, &rasters, &graph, &Modality::ALL).unwrap().value
        });
        max_rel_err(&analytic, &numeric)
    }

    /// Hard-region hinge against its coded derivative in the region means.
    pub fn phys_means(seed: u64) -> f64 {
        let mut r = rng(250 + seed);
        let (h, w, c) = dims(&mut r);
        let graph = random_graph(&mut r, c);
        let pred = random_probs(&mut r, h, w, c);
        let feats = random_features(&mut r, h, w, 1);
        let rasters = random_rasters(&mut r, h, w);
        let stats = region_stats(&pred, &feats, &rasters).unwrap();
        let loss = phys_loss(&stats, &graph, &Modality::ALL).unwrap();
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for m in Modality::ALL {
            let means = stats.phys_means[m.index()].as_ref().unwrap();
            for (k, mean) in means.iter().enumerate() {
                let Some(v) = *mean else { continue };
                analytic.push(loss.grad_means[m.index()][k]);
                numeric.extend(numeric_grad(&[v], STEP, |x| {
                    let mut s = stats.clone();
                    s.phys_means[m.index()].as_mut().unwrap()[k] = Some(x[0]);
                    phys_loss(&s, &graph, &Modality::ALL).unwrap().value
                }));
            }
        }
        max_rel_err(&analytic, &numeric)
    }

    /// Parameters with a non-zero head so every tensor receives gradient.
    /// Coarse scores lie in [0.35, 0.6] and the residual is at most 0.3, so
    /// the output never reaches the clamp.
    fn perturbed_params(r: &mut ChaCha8Rng, d: usize, c: usize) -> RefinerParams {
        let mut p = RefinerParams::init(d, c, 6, 0.3, r.gen());
        let flat: Vec<f64> = p.flat().iter().map(|v| v + r.gen_range(-0.3..0.3)).collect();
        p.set_flat(&flat);
        p
    }

    pub fn refiner(seed: u64) -> f64 {
        let mut r = rng(300 + seed);
        let (h, w, c) = dims(&mut r);
        let d = r.gen_range(1..=4);
        let graph = random_graph(&mut r, c);
        let coarse_data = (0..h * w * c).map(|_| r.gen_range(0.35..0.6)).collect();
        let scene = Scene {
            features: random_features(&mut r, h, w, d),
            coarse: ProbMap::new(h, w, c, coarse_data).unwrap(),
            rasters: random_rasters(&mut r, h, w),
            gt: random_labels(&mut r, h, w, c),
        };
        let weights = LossWeights::default();
        let params = perturbed_params(&mut r, d, c);
        let joint = assemble_joint(&scene.features, &scene.coarse, &scene.rasters, &graph).unwrap();
        let (grads, _) = scene_gradient(&params, &scene, &joint, &graph, &weights).unwrap();
        let numeric = numeric_grad(&params.flat(), STEP, |x| {
            let mut p = params.clone();
            p.set_flat(x);
            let out = refine(&p, &joint, &scene.coarse).unwrap();
            objective(&out.refined, &scene.gt, &scene.features, &scene.rasters, &graph, &weights)
                .unwrap()
                .surrogate
        });
        max_rel_err(&grads.flat(), &numeric)
    }
}
