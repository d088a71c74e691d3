//! Residual refinement head.
//!
//! Each pixel's joint vector `z = [F | Y0 | P]` (features, coarse scores,
//! standardized physical values) goes through a shared two-layer perceptron:
//!
//! ```text
//! h      = tanh(W1ᵀ z + b1)
//! ΔY     = scale · tanh(W2ᵀ h + b2)
//! Y1     = clamp(Y0 + ΔY, 1e-6, 1)
//! ```
//!
//! `W2` and `b2` start at zero, so an untrained head returns the coarse
//! prediction unchanged.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureMap, LabelMask, Modality, ProbMap, RasterSet};
use crate::losses::{objective, LossWeights};
use crate::pckg::Pckg;
use crate::synth::derive_seed;

/// Number of physical channel slots (NDVI, DEM, SAR).
pub const PHYS_CHANNELS: usize = 3;
/// Lower clamp on refined scores.
pub const MIN_SCORE: f64 = 1e-6;

/// Per-modality standardization derived from the graph: centre and spread
/// of the class interval midpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysNorm {
    pub center: [f64; 3],
    pub scale: [f64; 3],
}

impl PhysNorm {
    pub fn from_graph(graph: &Pckg) -> Self {
        let mut center = [0.0; 3];
        let mut scale = [1.0; 3];
        let n = graph.num_classes();
        if n == 0 {
            return Self { center, scale };
        }
        for m in Modality::ALL {
            let mids: Vec<f64> = graph.entries().iter().map(|e| e.range(m).midpoint()).collect();
            let mean = mids.iter().sum::<f64>() / n as f64;
            let var = mids.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let mut s = var.sqrt();
            if s < 1e-9 {
                let half = graph.entries().iter().map(|e| e.range(m).width()).sum::<f64>() / (2.0 * n as f64);
                s = half.max(1e-3);
            }
            center[m.index()] = mean;
            scale[m.index()] = s;
        }
        Self { center, scale }
    }
}

/// Pixel-major joint tensor with channel layout `[F (D) | Y0 (C) | P (3)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTensor {
    height: usize,
    width: usize,
    feat_dim: usize,
    classes: usize,
    data: Vec<f64>,
}

impl JointTensor {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn channels(&self) -> usize {
        self.feat_dim + self.classes + PHYS_CHANNELS
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        let ch = self.channels();
        &self.data[i * ch..(i + 1) * ch]
    }

    /// Physical slot of pixel `i` for `modality` (0 when absent).
    pub fn phys(&self, i: usize, modality: Modality) -> f64 {
        self.pixel(i)[self.feat_dim + self.classes + modality.index()]
    }
}

pub fn assemble_joint(
    features: &FeatureMap,
    coarse: &ProbMap,
    rasters: &RasterSet,
    graph: &Pckg,
) -> Result<JointTensor> {
    assemble_with_norm(features, coarse, rasters, graph, &PhysNorm::from_graph(graph))
}

fn assemble_with_norm(
    features: &FeatureMap,
    coarse: &ProbMap,
    rasters: &RasterSet,
    graph: &Pckg,
    norm: &PhysNorm,
) -> Result<JointTensor> {
    let (h, w) = (coarse.height(), coarse.width());
    if features.height() != h || features.width() != w {
        return Err(Error::Dimension(format!(
            "features are {}x{}, coarse prediction is {h}x{w}",
            features.height(),
            features.width()
        )));
    }
    if coarse.classes() != graph.num_classes() {
        return Err(Error::Dimension(format!(
            "coarse prediction has {} channels, knowledge graph has {} classes",
            coarse.classes(),
            graph.num_classes()
        )));
    }
    rasters.check_shape(h, w, "coarse prediction")?;
    let (d, c) = (features.dim(), coarse.classes());
    let ch = d + c + PHYS_CHANNELS;
    let mut data = vec![0.0; h * w * ch];
    for i in 0..h * w {
        let px = &mut data[i * ch..(i + 1) * ch];
        px[..d].copy_from_slice(features.pixel(i));
        px[d..d + c].copy_from_slice(coarse.pixel(i));
    }
    for r in rasters.iter() {
        let k = r.modality().index();
        let (center, scale) = (norm.center[k], norm.scale[k]);
        for (i, v) in r.values().iter().enumerate() {
            data[i * ch + d + c + k] = (v - center) / scale;
        }
    }
    Ok(JointTensor {
        height: h,
        width: w,
        feat_dim: d,
        classes: c,
        data,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinerParams {
    pub feat_dim: usize,
    pub classes: usize,
    pub hidden: usize,
    /// `(D + C + 3) × hidden`, row-major.
    pub fusion_w: Vec<f64>,
    pub fusion_b: Vec<f64>,
    /// `hidden × C`, row-major.
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
    pub residual_scale: f64,
}

impl RefinerParams {
    /// Glorot-uniform fusion layer, zero residual head.
    pub fn init(feat_dim: usize, classes: usize, hidden: usize, residual_scale: f64, seed: u64) -> Self {
        let inputs = feat_dim + classes + PHYS_CHANNELS;
        let limit = (6.0 / (inputs + hidden) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x696e_6974]));
        let fusion_w = (0..inputs * hidden).map(|_| rng.gen_range(-limit..=limit)).collect();
        Self {
            feat_dim,
            classes,
            hidden,
            fusion_w,
            fusion_b: vec![0.0; hidden],
            head_w: vec![0.0; hidden * classes],
            head_b: vec![0.0; classes],
            residual_scale,
        }
    }

    pub fn inputs(&self) -> usize {
        self.feat_dim + self.classes + PHYS_CHANNELS
    }

    fn zeros_like(&self) -> Self {
        Self {
            fusion_w: vec![0.0; self.fusion_w.len()],
            fusion_b: vec![0.0; self.fusion_b.len()],
            head_w: vec![0.0; self.head_w.len()],
            head_b: vec![0.0; self.head_b.len()],
            ..self.clone()
        }
    }

    fn tensors(&self) -> [&Vec<f64>; 4] {
        [&self.fusion_w, &self.fusion_b, &self.head_w, &self.head_b]
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.fusion_w, &mut self.fusion_b, &mut self.head_w, &mut self.head_b]
    }

    /// All trainable values, in file order.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors().into_iter().flatten().copied().collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        let mut it = values.iter();
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = *it.next().expect("flat vector too short");
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.residual_scale.is_finite() && self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn check_shape(&self) -> Result<()> {
        let ok = self.fusion_w.len() == self.inputs() * self.hidden
            && self.fusion_b.len() == self.hidden
            && self.head_w.len() == self.hidden * self.classes
            && self.head_b.len() == self.classes;
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension("refiner parameter shapes are inconsistent".into()))
        }
    }

    /// `PSPARAMS v1 <D> <C> <M> <H>` header, then the fusion matrix (one
    /// input channel per line), fusion bias, head matrix (one hidden unit per
    /// line), head bias and residual scale.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "PSPARAMS v1 {} {} {} {}",
            self.feat_dim, self.classes, PHYS_CHANNELS, self.hidden
        );
        let mut line = |vals: &[f64]| {
            let row: Vec<String> = vals.iter().map(|v| v.to_string()).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        };
        for row in self.fusion_w.chunks(self.hidden.max(1)) {
            line(row);
        }
        line(&self.fusion_b);
        for row in self.head_w.chunks(self.classes.max(1)) {
            line(row);
        }
        line(&self.head_b);
        line(&[self.residual_scale]);
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let fmt_err = |line: usize, message: &str| Error::Format {
            line,
            message: message.to_owned(),
        };
        let (_, header) = lines.next().ok_or_else(|| fmt_err(1, "empty parameter file"))?;
        let f: Vec<&str> = header.split_whitespace().collect();
        if f.len() != 6 || f[0] != "PSPARAMS" || f[1] != "v1" {
            return Err(fmt_err(1, "expected `PSPARAMS v1 <D> <C> <M> <H>`"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| fmt_err(1, "bad dimension"));
        let (d, c, m, h) = (num(f[2])?, num(f[3])?, num(f[4])?, num(f[5])?);
        if m != PHYS_CHANNELS {
            return Err(fmt_err(1, "physical channel count must be 3"));
        }
        let mut row = |expect: usize| -> Result<Vec<f64>> {
            let (n, l) = lines.next().ok_or_else(|| fmt_err(0, "truncated parameter file"))?;
            let vals = l
                .split_whitespace()
                .map(|s| s.parse::<f64>().map_err(|_| fmt_err(n + 1, "bad number")))
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != expect {
                return Err(fmt_err(n + 1, &format!("expected {expect} values, found {}", vals.len())));
            }
            Ok(vals)
        };
        let mut fusion_w = Vec::with_capacity((d + c + m) * h);
        for _ in 0..d + c + m {
            fusion_w.extend(row(h)?);
        }
        let fusion_b = row(h)?;
        let mut head_w = Vec::with_capacity(h * c);
        for _ in 0..h {
            head_w.extend(row(c)?);
        }
        let head_b = row(c)?;
        let residual_scale = row(1)?[0];
        Ok(Self {
            feat_dim: d,
            classes: c,
            hidden: h,
            fusion_w,
            fusion_b,
            head_w,
            head_b,
            residual_scale,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub refined: ProbMap,
    pub residual: ProbMap,
}

/// Activations kept for backpropagation.
struct Cache {
    hidden: Vec<f64>,
    head_tanh: Vec<f64>,
    /// Whether the clamp on `Y0 + ΔY` was inactive.
    pass: Vec<bool>,
}

fn check_inputs(params: &RefinerParams, z: &JointTensor, coarse: &ProbMap) -> Result<()> {
    params.check_shape()?;
    if !params.is_finite() {
        return Err(Error::Numeric("refiner parameters contain non-finite values".into()));
    }
    if z.feat_dim != params.feat_dim || z.classes != params.classes {
        return Err(Error::Dimension(format!(
            "joint tensor has D={} C={}, parameters expect D={} C={}",
            z.feat_dim, z.classes, params.feat_dim, params.classes
        )));
    }
    if coarse.height() != z.height || coarse.width() != z.width || coarse.classes() != z.classes {
        return Err(Error::Dimension("coarse prediction does not match the joint tensor".into()));
    }
    Ok(())
}

fn forward(params: &RefinerParams, z: &JointTensor, coarse: &ProbMap) -> (Refined, Cache) {
    let (hid, cls, inp) = (params.hidden, params.classes, params.inputs());
    let n = z.pixels();
    let mut hidden = vec![0.0; n * hid];
    let mut head_tanh = vec![0.0; n * cls];
    let mut pass = vec![false; n * cls];
    let mut refined = ProbMap::zeros(z.height, z.width, cls);
    let mut residual = ProbMap::zeros(z.height, z.width, cls);
    for i in 0..n {
        let zi = z.pixel(i);
        let h = &mut hidden[i * hid..(i + 1) * hid];
        h.copy_from_slice(&params.fusion_b);
        for (k, &zk) in zi.iter().enumerate().take(inp) {
            if zk == 0.0 {
                continue;
            }
            for (hj, wj) in h.iter_mut().zip(&params.fusion_w[k * hid..(k + 1) * hid]) {
                *hj += zk * wj;
            }
        }
        for hj in h.iter_mut() {
            *hj = hj.tanh();
        }
        let t = &mut head_tanh[i * cls..(i + 1) * cls];
        t.copy_from_slice(&params.head_b);
        for (j, &hj) in h.iter().enumerate() {
            for (tc, wc) in t.iter_mut().zip(&params.head_w[j * cls..(j + 1) * cls]) {
                *tc += hj * wc;
            }
        }
        let y0 = coarse.pixel(i);
        let dy = residual.pixel_mut(i);
        let y1 = refined.pixel_mut(i);
        for c in 0..cls {
            t[c] = t[c].tanh();
            dy[c] = params.residual_scale * t[c];
            let u = y0[c] + dy[c];
            pass[i * cls + c] = u > MIN_SCORE && u < 1.0;
            y1[c] = u.clamp(MIN_SCORE, 1.0);
        }
    }
    (
        Refined { refined, residual },
        Cache {
            hidden,
            head_tanh,
            pass,
        },
    )
}

/// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(Y1).
fn backward(params: &RefinerParams, z: &JointTensor, cache: &Cache, grad_refined: &[f64], grads: &mut RefinerParams) {
    let (hid, cls) = (params.hidden, params.classes);
    let mut d_out = vec![0.0; cls];
    let mut d_hidden = vec![0.0; hid];
    for i in 0..z.pixels() {
        let mut any = false;
        for c in 0..cls {
            let k = i * cls + c;
            let g = if cache.pass[k] { grad_refined[k] } else { 0.0 };
            let t = cache.head_tanh[k];
            d_out[c] = g * params.residual_scale * (1.0 - t * t);
            any |= d_out[c] != 0.0;
        }
        if !any {
            continue;
        }
        let h = &cache.hidden[i * hid..(i + 1) * hid];
        for (gb, d) in grads.head_b.iter_mut().zip(&d_out) {
            *gb += d;
        }
        for j in 0..hid {
            let row = j * cls..(j + 1) * cls;
            let mut acc = 0.0;
            for ((gw, w), d) in grads.head_w[row.clone()].iter_mut().zip(&params.head_w[row]).zip(&d_out) {
                *gw += h[j] * d;
                acc += w * d;
            }
            d_hidden[j] = acc * (1.0 - h[j] * h[j]);
        }
        for (gb, d) in grads.fusion_b.iter_mut().zip(&d_hidden) {
            *gb += d;
        }
        for (k, &zk) in z.pixel(i).iter().enumerate() {
            if zk == 0.0 {
                continue;
            }
            for (gw, d) in grads.fusion_w[k * hid..(k + 1) * hid].iter_mut().zip(&d_hidden) {
                *gw += zk * d;
            }
        }
    }
}

/// `Y1 = clamp(Y0 + ΔY, 1e-6, 1)` for every pixel.
pub fn refine(params: &RefinerParams, z: &JointTensor, coarse: &ProbMap) -> Result<Refined> {
    check_inputs(params, z, coarse)?;
    Ok(forward(params, z, coarse).0)
}

/// One training example: backbone outputs, physical rasters and ground truth.
#[derive(Debug, Clone)]
pub struct Scene {
    pub features: FeatureMap,
    pub coarse: ProbMap,
    pub rasters: RasterSet,
    pub gt: LabelMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Scenes per gradient step.
    pub batch_size: usize,
    pub weights: LossWeights,
    /// Probability of zeroing a scene's physical channels for one step.
    pub modality_dropout_prob: f64,
    pub hidden: usize,
    pub residual_scale: f64,
    /// Rescale the gradient to this L2 norm when it is exceeded.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            learning_rate: 0.05,
            epochs: 200,
            batch_size: 1,
            weights: LossWeights::default(),
            modality_dropout_prob: 0.5,
            hidden: 32,
            residual_scale: 0.5,
            max_grad_norm: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.modality_dropout_prob) {
            return Err(Error::Config("modality_dropout_prob must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::Config("batch_size and hidden must be positive".into()));
        }
        if let Some(n) = self.max_grad_norm {
            if !(n.is_finite() && n > 0.0) {
                return Err(Error::Config("max_grad_norm must be > 0".into()));
            }
        }
        self.weights.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistoryRow {
    pub step: usize,
    pub seg: f64,
    pub region: f64,
    pub phys: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: RefinerParams,
    pub history: Vec<HistoryRow>,
}

pub fn history_csv(history: &[HistoryRow]) -> String {
    let mut out = String::from("step,seg,region,phys,total\n");
    for r in history {
        let _ = writeln!(out, "{},{},{},{},{}", r.step, r.seg, r.region, r.phys, r.total);
    }
    out
}

/// Gradient of the training surrogate with respect to the parameters for
/// one scene, along with its loss breakdown.
pub fn scene_gradient(
    params: &RefinerParams,
    scene: &Scene,
    joint: &JointTensor,
    graph: &Pckg,
    weights: &LossWeights,
) -> Result<(RefinerParams, crate::losses::Objective)> {
    check_inputs(params, joint, &scene.coarse)?;
    let (out, cache) = forward(params, joint, &scene.coarse);
    let obj = objective(&out.refined, &scene.gt, &scene.features, &scene.rasters, graph, weights)?;
    let mut grads = params.zeros_like();
    backward(params, joint, &cache, &obj.grad, &mut grads);
    Ok((grads, obj))
}

/// Gradient descent on the joint objective over `dataset`.
pub fn train(dataset: &[Scene], graph: &Pckg, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let first = dataset.first().ok_or_else(|| Error::Input("training set is empty".into()))?;
    let (d, c) = (first.features.dim(), graph.num_classes());
    let norm = PhysNorm::from_graph(graph);
    let mut joints = Vec::with_capacity(dataset.len());
    for (n, s) in dataset.iter().enumerate() {
        if s.features.dim() != d {
            return Err(Error::Dimension(format!("scene {n} has feature dim {}, expected {d}", s.features.dim())));
        }
        let with = assemble_with_norm(&s.features, &s.coarse, &s.rasters, graph, &norm)?;
        let without = assemble_with_norm(&s.features, &s.coarse, &RasterSet::new(), graph, &norm)?;
        joints.push((with, without));
    }

    let mut params = RefinerParams::init(d, c, config.hidden, config.residual_scale, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0x0074_7261_696e]));
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut grads = params.zeros_like();
            let mut row = HistoryRow {
                step,
                seg: 0.0,
                region: 0.0,
                phys: 0.0,
                total: 0.0,
            };
            for &k in batch {
                let drop = rng.gen::<f64>() < config.modality_dropout_prob;
                let joint = if drop { &joints[k].1 } else { &joints[k].0 };
                let (g, obj) = scene_gradient(&params, &dataset[k], joint, graph, &config.weights)?;
                if !obj.surrogate.is_finite() || !obj.breakdown.total.is_finite() {
                    return Err(Error::Diverged {
                        step,
                        last_finite: Box::new(params),
                    });
                }
                for (acc, v) in grads.tensors_mut().into_iter().zip(g.tensors()) {
                    for (a, b) in acc.iter_mut().zip(v) {
                        *a += b;
                    }
                }
                row.seg += obj.breakdown.seg;
                row.region += obj.breakdown.region;
                row.phys += obj.breakdown.phys;
                row.total += obj.breakdown.total;
            }
            let inv = 1.0 / batch.len() as f64;
            for v in [&mut row.seg, &mut row.region, &mut row.phys, &mut row.total] {
                *v *= inv;
            }
            let mut flat: Vec<f64> = grads.flat().into_iter().map(|g| g * inv).collect();
            if let Some(max) = config.max_grad_norm {
                let norm = flat.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > max {
                    flat.iter_mut().for_each(|g| *g *= max / norm);
                }
            }
            let mut next = params.flat();
            for (p, g) in next.iter_mut().zip(&flat) {
                *p -= config.learning_rate * g;
            }
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    step,
                    last_finite: Box::new(params),
                });
            }
            params.set_flat(&next);
            history.push(row);
            step += 1;
        }
    }
    Ok(TrainOutcome { params, history })
}

/// Stand-in for a frozen backbone. Features are a noisy one-hot of the
/// pixel's visual group; classes joined by an ambiguity pair share a group,
/// so their features are identically distributed and their coarse scores
/// split evenly at random.
pub fn mock_backbone(
    mask: &LabelMask,
    graph: &Pckg,
    ambiguity: &[(u32, u32)],
    seed: u64,
) -> Result<(FeatureMap, ProbMap)> {
    let c = graph.num_classes();
    let mut group: Vec<usize> = (0..=c).collect();
    fn root(group: &mut [usize], mut x: usize) -> usize {
        while group[x] != x {
            group[x] = group[group[x]];
            x = group[x];
        }
        x
    }
    for &(a, b) in ambiguity {
        let valid = |x: u32| x >= 1 && x as usize <= c;
        if !valid(a) || !valid(b) || a == b {
            return Err(Error::Input(format!("invalid ambiguity pair ({a}, {b}) for {c} classes")));
        }
        let (ra, rb) = (root(&mut group, a as usize), root(&mut group, b as usize));
        group[ra.max(rb)] = ra.min(rb);
    }
    let roots: Vec<usize> = (0..=c).map(|k| root(&mut group, k)).collect();
    if mask.max_label() as usize > c {
        return Err(Error::Input(format!("label {} exceeds the graph's {c} classes", mask.max_label())));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x6d6f_636b]));
    let noise = Normal::new(0.0, 0.1).expect("valid sd");
    let (dim, n) = (c, mask.len());
    let mut feats = vec![0.0; n * dim];
    let mut coarse = vec![0.0; n * c];
    for (i, &label) in mask.labels().iter().enumerate() {
        let f = &mut feats[i * dim..(i + 1) * dim];
        for v in f.iter_mut() {
            *v = noise.sample(&mut rng);
        }
        let p = &mut coarse[i * c..(i + 1) * c];
        if label == 0 || c == 0 {
            p.iter_mut().for_each(|v| *v = 1.0 / c.max(1) as f64);
            continue;
        }
        let g = roots[label as usize];
        f[g - 1] += 1.0;
        let members: Vec<usize> = (1..=c).filter(|&k| roots[k] == g).collect();
        let head = if members.len() == 1 { rng.gen_range(0.85..0.95) } else { 0.9 };
        let rest = if c > members.len() { (1.0 - head) / (c - members.len()) as f64 } else { 0.0 };
        p.iter_mut().for_each(|v| *v = rest);
        if members.len() == 1 {
            p[label as usize - 1] = head;
        } else {
            let draws: Vec<f64> = members.iter().map(|_| rng.gen_range(0.9..1.1)).collect();
            let total: f64 = draws.iter().sum();
            for (k, u) in members.iter().zip(draws) {
                p[k - 1] = head * u / total;
            }
        }
    }
    Ok((
        FeatureMap::new(mask.height(), mask.width(), dim, feats)?,
        ProbMap::new(mask.height(), mask.width(), c, coarse)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Raster;
    use crate::testutil::graph_from;

    fn graph3() -> Pckg {
        graph_from(&[
            ("a", [0.0, 0.2], [0.0, 10.0], [-20.0, -10.0]),
            ("b", [0.5, 0.9], [10.0, 50.0], [-10.0, 0.0]),
            ("c", [0.0, 0.2], [0.0, 10.0], [0.0, 10.0]),
        ])
    }

    fn inputs(h: usize, w: usize, d: usize, c: usize, seed: u64) -> (FeatureMap, ProbMap) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = (0..h * w * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = (0..h * w * c).map(|_| rng.gen_range(0.05..0.95)).collect();
        (FeatureMap::new(h, w, d, f).unwrap(), ProbMap::new(h, w, c, p).unwrap())
    }

    #[test]
    fn channel_layout() {
        let g = graph3();
        let (f, p) = inputs(2, 2, 4, 3, 1);
        let all = RasterSet::new()
            .with(Raster::filled(Modality::Ndvi, 2, 2, 0.4))
            .with(Raster::filled(Modality::Dem, 2, 2, 5.0))
            .with(Raster::filled(Modality::Sar, 2, 2, -3.0));
        let z = assemble_joint(&f, &p, &all, &g).unwrap();
        assert_eq!(z.channels(), 10);
        assert_eq!(&z.pixel(1)[..4], f.pixel(1));
        assert_eq!(&z.pixel(1)[4..7], p.pixel(1));

        let none = assemble_joint(&f, &p, &RasterSet::new(), &g).unwrap();
        assert!((0..4).all(|i| none.pixel(i)[7..].iter().all(|&v| v == 0.0)));

        let ndvi = assemble_joint(&f, &p, &RasterSet::new().with(Raster::filled(Modality::Ndvi, 2, 2, 0.4)), &g).unwrap();
        assert_ne!(ndvi.phys(0, Modality::Ndvi), 0.0);
        assert_eq!(ndvi.phys(0, Modality::Dem), 0.0);
        assert_eq!(ndvi.phys(0, Modality::Sar), 0.0);
    }

    #[test]
    fn mismatched_inputs_named() {
        let g = graph3();
        let (f, p) = inputs(2, 2, 4, 3, 1);
        let (f3, _) = inputs(3, 2, 4, 3, 1);
        let err = assemble_joint(&f3, &p, &RasterSet::new(), &g).unwrap_err().to_string();
        assert!(err.contains("features"), "{err}");
        let bad = RasterSet::new().with(Raster::filled(Modality::Sar, 1, 2, 0.0));
        let err = assemble_joint(&f, &p, &bad, &g).unwrap_err().to_string();
        assert!(err.contains("SAR"), "{err}");
        let (_, p4) = inputs(2, 2, 4, 4, 1);
        assert!(assemble_joint(&f, &p4, &RasterSet::new(), &g).is_err());
    }

    #[test]
    fn zero_head_is_identity() {
        let g = graph3();
        let (f, p) = inputs(3, 3, 4, 3, 2);
        let z = assemble_joint(&f, &p, &RasterSet::new(), &g).unwrap();
        let params = RefinerParams::init(4, 3, 8, 0.5, 3);
        let out = refine(&params, &z, &p).unwrap();
        assert_eq!(out.refined, p);
        assert!(out.residual.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_scale_is_identity() {
        let g = graph3();
        let (f, p) = inputs(3, 3, 4, 3, 2);
        let z = assemble_joint(&f, &p, &RasterSet::new(), &g).unwrap();
        let mut params = RefinerParams::init(4, 3, 8, 0.0, 3);
        params.head_w.iter_mut().for_each(|v| *v = 1.3);
        assert_eq!(refine(&params, &z, &p).unwrap().refined, p);
    }

    #[test]
    fn outputs_clamped() {
        let g = graph3();
        let (f, p) = inputs(4, 4, 4, 3, 5);
        let z = assemble_joint(&f, &p, &RasterSet::new().with(Raster::filled(Modality::Sar, 4, 4, 30.0)), &g).unwrap();
        let mut params = RefinerParams::init(4, 3, 8, 2.0, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        params.head_w.iter_mut().for_each(|v| *v = rng.gen_range(-3.0..3.0));
        let out = refine(&params, &z, &p).unwrap();
        assert!(out.refined.data().iter().all(|&v| (MIN_SCORE..=1.0).contains(&v)));
    }

    #[test]
    fn non_finite_params_rejected() {
        let g = graph3();
        let (f, p) = inputs(1, 1, 4, 3, 5);
        let z = assemble_joint(&f, &p, &RasterSet::new(), &g).unwrap();
        let mut params = RefinerParams::init(4, 3, 8, 0.5, 9);
        params.fusion_b[0] = f64::NAN;
        assert!(matches!(refine(&params, &z, &p), Err(Error::Numeric(_))));
    }

    #[test]
    fn params_text_round_trip() {
        let mut params = RefinerParams::init(2, 3, 4, 0.5, 11);
        params.head_w[5] = -0.125;
        let text = params.to_text();
        assert!(text.starts_with("PSPARAMS v1 2 3 3 4\n"));
        assert_eq!(RefinerParams::parse(&text).unwrap(), params);
        assert!(RefinerParams::parse("PSPARAMS v2 1 1 3 1\n").is_err());
    }

    #[test]
    fn mock_backbone_without_ambiguity_is_accurate() {
        let g = graph3();
        let labels = (0..400).map(|k| 1 + (k % 3) as u32).collect();
        let mask = LabelMask::new(20, 20, labels).unwrap();
        let (f, p) = mock_backbone(&mask, &g, &[], 1).unwrap();
        assert_eq!(f.dim(), 3);
        let pred = p.argmax();
        let correct = pred.labels().iter().zip(mask.labels()).filter(|(a, b)| a == b).count();
        assert!(correct as f64 / 400.0 >= 0.99);
        assert_eq!(mock_backbone(&mask, &g, &[], 1).unwrap(), (f, p));
    }

    #[test]
    fn mock_backbone_pair_is_coin_flip() {
        let g = graph3();
        let labels = (0..2000).map(|k| if k % 2 == 0 { 1 } else { 3 }).collect();
        let mask = LabelMask::new(40, 50, labels).unwrap();
        let (f, p) = mock_backbone(&mask, &g, &[(1, 3)], 7).unwrap();
        let pred = p.argmax();
        let correct = pred.labels().iter().zip(mask.labels()).filter(|(a, b)| a == b).count();
        let acc = correct as f64 / 2000.0;
        assert!((0.45..=0.55).contains(&acc), "{acc}");
        // both classes light up the same feature slot
        assert!(f.pixel(0)[0] > 0.5 && f.pixel(1)[0] > 0.5);
        assert!(mock_backbone(&mask, &g, &[(1, 4)], 7).is_err());
        assert!(mock_backbone(&mask, &g, &[(2, 2)], 7).is_err());
    }
}
