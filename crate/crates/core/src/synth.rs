//! Simulated physical rasters drawn from label masks under the knowledge
//! graph's class intervals.
//!
//! Every labeled pixel of class `c` receives a value inside the class's
//! interval for the requested modality; unlabeled pixels get the configured
//! background fill. Sampling runs over fixed row tiles, each with its own RNG
//! stream derived from `(seed, modality, tile)`, so output does not depend on
//! how many workers generate it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{LabelMask, Modality, Raster, RasterSet};
use crate::pckg::{Interval, Pckg};

/// Rows per RNG tile.
pub const TILE_ROWS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    Uniform,
    /// Gaussian centered on the interval midpoint with sd = width / 4,
    /// truncated to the interval.
    TruncatedGaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub noise_model: NoiseModel,
    /// Box-blur radius in pixels; 0 disables smoothing.
    pub smoothing_radius: usize,
    /// Fill for unlabeled pixels, indexed by [`Modality::index`].
    pub background_fill: [f64; 3],
    pub workers: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            noise_model: NoiseModel::TruncatedGaussian,
            smoothing_radius: 1,
            background_fill: [0.0, 0.0, -30.0],
            workers: 1,
        }
    }
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub(crate) fn mix_seed(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(mix_seed(seed), |acc, p| mix_seed(acc ^ mix_seed(*p)))
}

fn sample(rng: &mut ChaCha8Rng, interval: Interval, noise: NoiseModel) -> f64 {
    let (lo, hi) = (interval.lo(), interval.hi());
    if hi <= lo {
        return lo;
    }
    match noise {
        NoiseModel::Uniform => rng.gen_range(lo..=hi),
        NoiseModel::TruncatedGaussian => {
            let normal = Normal::new(interval.midpoint(), (hi - lo) / 4.0)
                .expect("positive sd for non-degenerate interval");
            for _ in 0..64 {
                let v = normal.sample(rng);
                if (lo..=hi).contains(&v) {
                    return v;
                }
            }
            normal.sample(rng).clamp(lo, hi)
        }
    }
}

fn class_intervals(mask: &LabelMask, graph: &Pckg, modality: Modality) -> Result<Vec<Option<Interval>>> {
    let max = mask.max_label() as usize;
    let mut out = vec![None; max + 1];
    for &label in mask.labels() {
        let slot = &mut out[label as usize];
        if label == 0 || slot.is_some() {
            continue;
        }
        let interval = graph
            .interval(label, modality)
            .map_err(|_| Error::Synthesis { class_id: label })?;
        *slot = Some(interval);
    }
    Ok(out)
}

/// Generates one modality's raster for `mask`.
pub fn synthesize_raster(
    mask: &LabelMask,
    graph: &Pckg,
    modality: Modality,
    config: &SynthConfig,
) -> Result<Raster> {
    let intervals = class_intervals(mask, graph, modality)?;
    let (h, w) = (mask.height(), mask.width());
    let fill = config.background_fill[modality.index()];
    let modality_seed = derive_seed(config.seed, &[modality.index() as u64]);

    let tiles = h.div_ceil(TILE_ROWS);
    let fill_tile = |tile: usize, out: &mut [f64]| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(modality_seed, &[tile as u64]));
        let start = tile * TILE_ROWS * w;
        for (k, v) in out.iter_mut().enumerate() {
            let label = mask.labels()[start + k];
            *v = match intervals[label as usize] {
                Some(interval) => sample(&mut rng, interval, config.noise_model),
                None => fill,
            };
        }
    };

    let mut values = vec![0.0; h * w];
    let chunks: Vec<(usize, &mut [f64])> = values.chunks_mut(TILE_ROWS * w.max(1)).enumerate().collect();
    let workers = config.workers.clamp(1, tiles.max(1));
    if workers == 1 {
        for (tile, chunk) in chunks {
            fill_tile(tile, chunk);
        }
    } else {
        let mut buckets: Vec<Vec<(usize, &mut [f64])>> = (0..workers).map(|_| Vec::new()).collect();
        for (n, item) in chunks.into_iter().enumerate() {
            buckets[n % workers].push(item);
        }
        std::thread::scope(|s| {
            for bucket in buckets {
                let fill_tile = &fill_tile;
                s.spawn(move || {
                    for (tile, chunk) in bucket {
                        fill_tile(tile, chunk);
                    }
                });
            }
        });
    }

    if config.smoothing_radius > 0 {
        values = smooth_within_class(mask, &values, config.smoothing_radius);
        for (v, &label) in values.iter_mut().zip(mask.labels()) {
            *v = match intervals[label as usize] {
                Some(interval) => v.clamp(interval.lo(), interval.hi()),
                None => fill,
            };
        }
    }

    Raster::new(modality, h, w, values)
}

/// Box blur where each pixel averages only neighbors sharing its label.
fn smooth_within_class(mask: &LabelMask, values: &[f64], radius: usize) -> Vec<f64> {
    let (h, w) = (mask.height(), mask.width());
    let labels = mask.labels();
    let mut out = vec![0.0; values.len()];
    for r in 0..h {
        let (r0, r1) = (r.saturating_sub(radius), (r + radius).min(h - 1));
        for c in 0..w {
            let (c0, c1) = (c.saturating_sub(radius), (c + radius).min(w - 1));
            let own = labels[r * w + c];
            let (mut sum, mut n) = (0.0, 0usize);
            for rr in r0..=r1 {
                for cc in c0..=c1 {
                    let k = rr * w + cc;
                    if labels[k] == own {
                        sum += values[k];
                        n += 1;
                    }
                }
            }
            out[r * w + c] = sum / n as f64;
        }
    }
    out
}

/// One raster per requested modality, each with its own sub-seed.
pub fn synthesize_scene(
    mask: &LabelMask,
    graph: &Pckg,
    modalities: &[Modality],
    config: &SynthConfig,
) -> Result<RasterSet> {
    let mut set = RasterSet::new();
    for &m in modalities {
        set.insert(synthesize_raster(mask, graph, m, config)?);
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::graph_from;

    fn checkerboard(h: usize, w: usize) -> LabelMask {
        let labels = (0..h * w).map(|k| 1 + ((k / w + k % w) % 2) as u32).collect();
        LabelMask::new(h, w, labels).unwrap()
    }

    #[test]
    fn single_class_contained() {
        let g = graph_from(&[("a", [0.3, 0.7], [0.0, 1.0], [0.0, 1.0])]);
        let mask = LabelMask::filled(20, 20, 1);
        for noise in [NoiseModel::Uniform, NoiseModel::TruncatedGaussian] {
            let cfg = SynthConfig {
                noise_model: noise,
                ..Default::default()
            };
            let r = synthesize_raster(&mask, &g, Modality::Ndvi, &cfg).unwrap();
            assert!(r.values().iter().all(|v| (0.3..=0.7).contains(v)));
        }
    }

    #[test]
    fn degenerate_interval_is_constant() {
        let g = graph_from(&[("a", [0.0, 0.1], [5.0, 5.0], [0.0, 1.0])]);
        let r = synthesize_raster(&LabelMask::filled(5, 7, 1), &g, Modality::Dem, &SynthConfig::default()).unwrap();
        assert!(r.values().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn checkerboard_histograms_disjoint() {
        let g = graph_from(&[
            ("a", [0.0, 0.1], [0.0, 1.0], [-20.0, -10.0]),
            ("b", [0.0, 0.1], [0.0, 1.0], [0.0, 5.0]),
        ]);
        let mask = checkerboard(17, 13);
        let r = synthesize_raster(&mask, &g, Modality::Sar, &SynthConfig::default()).unwrap();
        let (mut a_max, mut b_min) = (f64::MIN, f64::MAX);
        for (v, l) in r.values().iter().zip(mask.labels()) {
            if *l == 1 {
                a_max = a_max.max(*v);
            } else {
                b_min = b_min.min(*v);
            }
        }
        assert!(a_max < b_min);
    }

    #[test]
    fn background_fill_and_unknown_label() {
        let g = graph_from(&[("a", [0.2, 0.4], [0.0, 1.0], [0.0, 1.0])]);
        let mask = LabelMask::new(1, 3, vec![0, 1, 0]).unwrap();
        let r = synthesize_raster(&mask, &g, Modality::Sar, &SynthConfig::default()).unwrap();
        assert_eq!(r.values()[0], -30.0);
        assert_eq!(r.values()[2], -30.0);
        let bad = LabelMask::new(1, 2, vec![1, 4]).unwrap();
        assert!(matches!(
            synthesize_raster(&bad, &g, Modality::Ndvi, &SynthConfig::default()),
            Err(Error::Synthesis { class_id: 4 })
        ));
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let g = graph_from(&[
            ("a", [0.0, 0.5], [0.0, 100.0], [-20.0, -10.0]),
            ("b", [0.5, 0.9], [100.0, 300.0], [0.0, 5.0]),
        ]);
        let mask = checkerboard(53, 9);
        let one = synthesize_raster(&mask, &g, Modality::Dem, &SynthConfig::default()).unwrap();
        let many = synthesize_raster(
            &mask,
            &g,
            Modality::Dem,
            &SynthConfig {
                workers: 3,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(one, many);
    }

    #[test]
    fn scene_outputs() {
        let g = graph_from(&[("a", [0.0, 0.5], [0.0, 100.0], [-20.0, -10.0])]);
        let mask = LabelMask::filled(4, 6, 1);
        let cfg = SynthConfig::default();
        let all = synthesize_scene(&mask, &g, &Modality::ALL, &cfg).unwrap();
        assert_eq!(all.len(), 3);
        assert!(all.iter().all(|r| r.height() == 4 && r.width() == 6));
        assert!(synthesize_scene(&mask, &g, &[], &cfg).unwrap().is_empty());
        assert_eq!(all, synthesize_scene(&mask, &g, &Modality::ALL, &cfg).unwrap());
        // sub-seeds differ per modality, and a lone modality matches its slot in the full scene
        let sar = synthesize_scene(&mask, &g, &[Modality::Sar], &cfg).unwrap();
        assert_eq!(sar.get(Modality::Sar), all.get(Modality::Sar));
    }
}
