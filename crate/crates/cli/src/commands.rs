use std::path::Path;

use anyhow::{bail, Context, Result};
use physprior::extract::{fixture_file_name, Extractor, ProviderMode};
use physprior::grid::{read_features, read_labels, read_prob, read_raster, GridFile, Modality, RasterSet};
use physprior::inference::{flip_summary, infer, AttenuationConfig};
use physprior::losses::LossWeights;
use physprior::metrics::{miou, plausibility_rate, reliability};
use physprior::refiner::{history_csv, train, RefinerParams, Scene};
use physprior::synth::{synthesize_raster, NoiseModel};
use physprior::toy::{run_ablation, ToyBenchmark};
use physprior::{Error, Pckg};
use serde_json::json;

use crate::cli::*;
use crate::config::RunConfig;
use crate::output::Output;

fn config_for(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    cfg.apply_seed(common.seed);
    Ok(cfg)
}

/// File name for a modality's raster inside a scene or output directory.
fn raster_file(m: Modality) -> String {
    format!("{}.pgrd", stem(m))
}

fn stem(m: Modality) -> String {
    m.name().to_ascii_lowercase()
}

/// Attaches the path to a library error without hiding its class.
fn at<T>(path: impl AsRef<Path>, r: physprior::Result<T>) -> Result<T> {
    r.with_context(|| format!("reading {}", path.as_ref().display()))
}

fn pretty<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("value serializes") + "\n"
}

/// Parses `ndvi=PATH,sar=PATH` and reads each raster, checking that the file
/// holds the modality it is listed under.
pub fn parse_rasters(spec: Option<&str>) -> Result<RasterSet> {
    let mut set = RasterSet::new();
    let Some(spec) = spec else {
        return Ok(set);
    };
    for item in spec.split(',').filter(|s| !s.trim().is_empty()) {
        let (key, path) = item
            .split_once('=')
            .ok_or_else(|| Error::Input(format!("raster spec {item:?} is not modality=PATH")))?;
        let modality: Modality = key.trim().parse()?;
        let raster = at(path.trim(), read_raster(path.trim()))?;
        if raster.modality() != modality {
            return Err(Error::Input(format!(
                "{path} holds a {} raster, listed as {modality}",
                raster.modality()
            ))
            .into());
        }
        if set.insert(raster).is_some() {
            return Err(Error::Input(format!("{modality} raster given twice")).into());
        }
    }
    Ok(set)
}

pub fn pckg_validate(pckg: &Path, common: &Common) -> Result<()> {
    let _ = config_for(common)?;
    let graph = at(pckg, Pckg::read(pckg))?;
    let summary = json!({
        "valid": true,
        "classes": graph.num_classes(),
        "categories": graph.entries().iter().map(|e| e.category.as_str()).collect::<Vec<_>>(),
        "warnings": graph.warnings(),
    });
    print!("{}", pretty(&summary));
    Ok(())
}

pub fn pckg_extract(args: &ExtractArgs) -> Result<()> {
    let mut cfg = config_for(&args.common)?;
    let p = &mut cfg.provider;
    if let Some(dir) = &args.fixtures {
        p.mode = ProviderMode::Fixture;
        p.fixture_dir = Some(dir.clone());
    }
    if let Some(url) = &args.endpoint {
        p.mode = ProviderMode::Live;
        p.endpoint = Some(url.clone());
    }
    if let Some(m) = &args.model {
        p.model = m.clone();
    }
    if let Some(r) = args.max_retries {
        p.max_retries = r;
    }
    if let Some(n) = args.parallelism {
        p.parallelism = n;
    }
    let text = std::fs::read_to_string(&args.vocab).with_context(|| format!("reading {}", args.vocab.display()))?;
    let vocab: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    let mut out = Output::new(args.common.out.as_deref())?;
    let extractor = Extractor::from_config(&cfg.provider)?;
    let (entries, report) = extractor.extract_all(&vocab)?;
    out.add("extraction_report.json", report.to_json() + "\n");
    let ok: Vec<_> = entries.into_iter().flatten().collect();
    if ok.is_empty() {
        // Keep the report for diagnosis even though there is no graph.
        let failures = report.terms.len();
        out.finish(&cfg)?;
        return Err(Error::EmptyGraph { failures }.into());
    }
    let graph = Pckg::new(ok)?;
    out.add("pckg.json", graph.to_json());
    out.finish(&cfg)?;
    println!("extracted {} of {} terms", graph.num_classes(), vocab.len());
    Ok(())
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let mut cfg = config_for(&args.common)?;
    if let Some(n) = args.noise {
        cfg.synth.noise_model = match n {
            Noise::Uniform => NoiseModel::Uniform,
            Noise::Gaussian => NoiseModel::TruncatedGaussian,
        };
    }
    if let Some(r) = args.smoothing {
        cfg.synth.smoothing_radius = r;
    }
    if let Some(w) = args.workers {
        cfg.synth.workers = w;
    }
    let mut out = Output::new(args.common.out.as_deref())?;
    if args.demo {
        write_demo(&mut out, cfg.seed.unwrap_or(cfg.ablation.seed))?;
        let dir = out.dir().to_path_buf();
        out.finish(&cfg)?;
        println!("demo benchmark written to {}", dir.display());
        return Ok(());
    }
    let (Some(pckg), Some(labels)) = (&args.pckg, &args.labels) else {
        bail!(Error::Input("--pckg and --labels are required".into()));
    };
    let graph = at(pckg, Pckg::read(pckg))?;
    let mask = at(labels, read_labels(labels))?;
    let modalities = match &args.modalities {
        None => Modality::ALL.to_vec(),
        Some(list) => list.iter().map(|s| s.parse()).collect::<physprior::Result<Vec<Modality>>>()?,
    };
    for m in modalities {
        let raster = synthesize_raster(&mask, &graph, m, &cfg.synth)?;
        out.add(raster_file(m), GridFile::Raster(raster).to_text());
    }
    out.finish(&cfg)?;
    Ok(())
}

fn write_demo(out: &mut Output, seed: u64) -> Result<()> {
    let bench = ToyBenchmark::generate(seed)?;
    out.add("pckg.json", bench.graph.to_json());
    let mut vocab = String::new();
    for e in bench.graph.entries() {
        let single = Pckg::new(vec![e.clone()])?.to_json();
        let object = single.trim().trim_start_matches('[').trim_end_matches(']').trim();
        out.add(format!("fixtures/{}", fixture_file_name(&e.category)), format!("{object}\n"));
        vocab.push_str(&e.category);
        vocab.push('\n');
    }
    out.add("vocab.txt", vocab);
    for (split, scenes) in [("train", &bench.train), ("test", &bench.test)] {
        for (k, s) in scenes.iter().enumerate() {
            let dir = format!("{split}/scene{k}");
            out.add(format!("{dir}/labels.pgrd"), GridFile::Label(s.gt.clone()).to_text());
            out.add(format!("{dir}/features.pgrd"), GridFile::Feature(s.features.clone()).to_text());
            out.add(format!("{dir}/coarse.pgrd"), GridFile::Prob(s.coarse.clone()).to_text());
            for r in s.rasters.iter() {
                out.add(format!("{dir}/{}", raster_file(r.modality())), GridFile::Raster(r.clone()).to_text());
            }
        }
    }
    Ok(())
}

fn read_scene_dir(dir: &Path) -> Result<Scene> {
    let mut rasters = RasterSet::new();
    for m in Modality::ALL {
        let path = dir.join(raster_file(m));
        if path.exists() {
            rasters.insert(at(&path, read_raster(&path))?);
        }
    }
    let (f, c, l) = (dir.join("features.pgrd"), dir.join("coarse.pgrd"), dir.join("labels.pgrd"));
    Ok(Scene {
        features: at(&f, read_features(&f))?,
        coarse: at(&c, read_prob(&c))?,
        rasters,
        gt: at(&l, read_labels(&l))?,
    })
}

fn load_scenes(args: &SceneArgs) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    for dir in &args.scenes {
        scenes.push(read_scene_dir(dir).with_context(|| format!("scene {}", dir.display()))?);
    }
    match (&args.labels, &args.features, &args.coarse) {
        (Some(l), Some(f), Some(c)) => scenes.push(Scene {
            features: at(f, read_features(f))?,
            coarse: at(c, read_prob(c))?,
            rasters: parse_rasters(args.rasters.as_deref())?,
            gt: at(l, read_labels(l))?,
        }),
        (None, None, None) => {}
        _ => bail!(Error::Input("--labels, --features and --coarse must be given together".into())),
    }
    if scenes.is_empty() {
        bail!(Error::Input("no training scenes given".into()));
    }
    Ok(scenes)
}

pub fn train_cmd(args: &TrainArgs) -> Result<()> {
    let mut cfg = config_for(&args.common)?;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = args.learning_rate {
        cfg.train.learning_rate = lr;
    }
    if args.no_phys_loss {
        cfg.train.weights = LossWeights {
            lambda2: 0.0,
            ..cfg.train.weights
        };
    }
    let graph = at(&args.pckg, Pckg::read(&args.pckg))?;
    let scenes = load_scenes(&args.scenes)?;
    let mut out = Output::new(args.common.out.as_deref())?;
    match train(&scenes, &graph, &cfg.train) {
        Ok(trained) => {
            if let Some(last) = trained.history.last() {
                println!(
                    "step {}: seg {:.6} region {:.6} phys {:.6} total {:.6}",
                    last.step, last.seg, last.region, last.phys, last.total
                );
            }
            out.add("params.txt", trained.params.to_text());
            out.add("history.csv", history_csv(&trained.history));
            out.finish(&cfg)?;
            Ok(())
        }
        Err(Error::Diverged { step, last_finite }) => {
            out.add("params_last_finite.txt", last_finite.to_text());
            out.finish(&cfg)?;
            Err(Error::Numeric(format!("training diverged at step {step}; last finite parameters saved")).into())
        }
        Err(e) => Err(e.into()),
    }
}

pub fn refine_cmd(args: &RefineArgs) -> Result<()> {
    let cfg = config_for(&args.common)?;
    let graph = at(&args.pckg, Pckg::read(&args.pckg))?;
    let params = at(&args.params, RefinerParams::read(&args.params))?;
    let features = at(&args.features, read_features(&args.features))?;
    let coarse = at(&args.coarse, read_prob(&args.coarse))?;
    let (rasters, attenuation) = match args.mode {
        Mode::Visual => (RasterSet::new(), AttenuationConfig::visual_only()),
        Mode::Physical => {
            let rasters = parse_rasters(args.rasters.as_deref())?;
            let available = rasters.modalities();
            (rasters, AttenuationConfig { available, ..cfg.attenuation.clone() })
        }
    };
    let result = infer(&params, &features, &coarse, &rasters, &graph, &attenuation)?;
    let mut out = Output::new(args.common.out.as_deref())?;
    out.add("refined.pgrd", GridFile::Prob(result.probs).to_text());
    out.add("labels.pgrd", GridFile::Label(result.labels).to_text());
    out.add("trace.jsonl", result.trace.to_json_lines());
    let flips: usize = flip_summary(&result.trace).values().sum();
    for w in &result.trace.warnings {
        eprintln!("warning: {w}");
    }
    out.finish(&cfg)?;
    println!("{flips} pixel(s) changed label");
    Ok(())
}

pub fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let cfg = config_for(&args.common)?;
    let graph = at(&args.pckg, Pckg::read(&args.pckg))?;
    let pred = at(&args.labels, read_labels(&args.labels))?;
    let gt = at(&args.gt, read_labels(&args.gt))?;
    let report = miou(&pred, &gt, graph.num_classes(), args.include_background)?;
    let rasters = parse_rasters(args.rasters.as_deref())?;
    let reference = parse_rasters(args.reference.as_deref())?;
    let mut out = Output::new(args.common.out.as_deref())?;
    let plausibility = if rasters.is_empty() {
        None
    } else {
        Some(plausibility_rate(&pred, &rasters, &graph)?)
    };
    for r in reference.iter() {
        let m = r.modality();
        let synthetic = rasters
            .get(m)
            .ok_or_else(|| Error::Input(format!("reference {m} raster has no --rasters counterpart")))?;
        let rel = reliability(synthetic, r, &gt, &graph)?;
        out.add(format!("reliability_{}.json", stem(m)), rel.to_json() + "\n");
        out.add(format!("reliability_{}.csv", stem(m)), rel.to_csv());
    }
    out.add("metrics.json", pretty(&json!({ "iou": report, "plausibility": plausibility })));
    out.finish(&cfg)?;
    match report.miou {
        Some(m) => println!("mIoU {m:.4}"),
        None => println!("mIoU undefined (no class present)"),
    }
    Ok(())
}

pub fn ablate(args: &AblateArgs) -> Result<()> {
    let mut cfg = config_for(&args.common)?;
    if let Some(e) = args.epochs {
        cfg.ablation.train.epochs = e;
    }
    cfg.ablation.baseline_only |= args.baseline_only;
    let table = run_ablation(&cfg.ablation)?;
    print!("{}", table.to_text());
    if let Some(dir) = &args.common.out {
        let mut out = Output::new(Some(dir))?;
        out.add("ablation.json", table.to_json() + "\n");
        out.add("ablation.txt", table.to_text());
        out.finish(&cfg)?;
    }
    Ok(())
}

