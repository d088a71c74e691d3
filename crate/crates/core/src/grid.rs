//! Pixel grids shared by every stage: label masks, physical rasters,
//! probability maps and feature maps, plus the `PGRD` text format.
//!
//! A grid file starts with a header line
//!
//! ```text
//! PGRD <NDVI|DEM|SAR|LABEL|PROB|FEAT> <H> <W> [<C>]
//! ```
//!
//! followed by row-major ASCII decimal values, one row per line. Multi-plane
//! grids (`PROB` with C classes, `FEAT` with D dimensions) store their planes
//! one after another, each plane being H lines.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Modality {
    Ndvi,
    Dem,
    Sar,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Ndvi, Modality::Dem, Modality::Sar];

    /// Slot of this modality in fixed-order arrays and joint tensors.
    pub fn index(self) -> usize {
        match self {
            Modality::Ndvi => 0,
            Modality::Dem => 1,
            Modality::Sar => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Ndvi => "NDVI",
            Modality::Dem => "DEM",
            Modality::Sar => "SAR",
        }
    }

    pub fn units(self) -> &'static str {
        match self {
            Modality::Ndvi => "unitless",
            Modality::Dem => "m",
            Modality::Sar => "dB",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "NDVI" => Ok(Modality::Ndvi),
            "DEM" => Ok(Modality::Dem),
            "SAR" => Ok(Modality::Sar),
            _ => Err(Error::Input(format!("unknown modality {s:?}"))),
        }
    }
}

/// H×W grid of class ids; 0 marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Dimension(format!(
                "label mask {height}x{width} needs {} values, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u32) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }
}

/// One modality's physical measurements on an H×W grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    modality: Modality,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Raster {
    pub fn new(modality: Modality, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Dimension(format!(
                "{modality} raster {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self {
            modality,
            height,
            width,
            values,
        })
    }

    pub fn filled(modality: Modality, height: usize, width: usize, value: f64) -> Self {
        Self {
            modality,
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// A partial set of rasters, at most one per modality.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RasterSet {
    slots: [Option<Raster>; 3],
}

impl RasterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, raster: Raster) -> Option<Raster> {
        let idx = raster.modality().index();
        self.slots[idx].replace(raster)
    }

    pub fn with(mut self, raster: Raster) -> Self {
        self.insert(raster);
        self
    }

    pub fn get(&self, modality: Modality) -> Option<&Raster> {
        self.slots[modality.index()].as_ref()
    }

    pub fn remove(&mut self, modality: Modality) -> Option<Raster> {
        self.slots[modality.index()].take()
    }

    pub fn modalities(&self) -> Vec<Modality> {
        Modality::ALL
            .into_iter()
            .filter(|m| self.slots[m.index()].is_some())
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Raster> {
        self.slots.iter().flatten()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.iter().all(Option::is_none)
    }

    pub fn len(&self) -> usize {
        self.slots.iter().flatten().count()
    }

    /// Keeps only the listed modalities.
    pub fn restricted_to(&self, modalities: &[Modality]) -> RasterSet {
        let mut out = RasterSet::new();
        for m in modalities {
            if let Some(r) = self.get(*m) {
                out.insert(r.clone());
            }
        }
        out
    }

    pub(crate) fn check_shape(&self, height: usize, width: usize, what: &str) -> Result<()> {
        for r in self.iter() {
            if r.height() != height || r.width() != width {
                return Err(Error::Dimension(format!(
                    "{} raster is {}x{}, {what} is {height}x{width}",
                    r.modality(),
                    r.height(),
                    r.width()
                )));
            }
        }
        Ok(())
    }
}

/// H×W×C per-pixel class scores, pixel-major. Channel `k` holds class id `k + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<f64>,
}

impl ProbMap {
    pub fn new(height: usize, width: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * classes {
            return Err(Error::Dimension(format!(
                "probability map {height}x{width}x{classes} needs {} values, got {}",
                height * width * classes,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            classes,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, classes: usize) -> Self {
        Self {
            height,
            width,
            classes,
            data: vec![0.0; height * width * classes],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    pub fn pixel_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.classes..(i + 1) * self.classes]
    }

    /// Per-pixel argmax as class ids (1-based); ties go to the lower id.
    pub fn argmax(&self) -> LabelMask {
        let labels = (0..self.pixels())
            .map(|i| argmax_index(self.pixel(i)) as u32 + 1)
            .collect();
        LabelMask {
            height: self.height,
            width: self.width,
            labels,
        }
    }
}

/// Index of the first maximal element. Empty input yields 0.
pub fn argmax_index(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}

/// H×W×D backbone features, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * dim {
            return Err(Error::Dimension(format!(
                "feature map {height}x{width}x{dim} needs {} values, got {}",
                height * width * dim,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            dim,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Any grid that can be stored in a `PGRD` file.
#[derive(Debug, Clone, PartialEq)]
pub enum GridFile {
    Label(LabelMask),
    Raster(Raster),
    Prob(ProbMap),
    Feature(FeatureMap),
}

impl GridFile {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        match self {
            GridFile::Label(m) => {
                let _ = writeln!(out, "PGRD LABEL {} {}", m.height, m.width);
                write_plane(&mut out, m.height, m.width, |i| m.labels[i].to_string());
            }
            GridFile::Raster(r) => {
                let _ = writeln!(out, "PGRD {} {} {}", r.modality, r.height, r.width);
                write_plane(&mut out, r.height, r.width, |i| r.values[i].to_string());
            }
            GridFile::Prob(p) => {
                let _ = writeln!(out, "PGRD PROB {} {} {}", p.height, p.width, p.classes);
                for c in 0..p.classes {
                    write_plane(&mut out, p.height, p.width, |i| {
                        p.data[i * p.classes + c].to_string()
                    });
                }
            }
            GridFile::Feature(f) => {
                let _ = writeln!(out, "PGRD FEAT {} {} {}", f.height, f.width, f.dim);
                for d in 0..f.dim {
                    write_plane(&mut out, f.height, f.width, |i| {
                        f.data[i * f.dim + d].to_string()
                    });
                }
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::Format {
            line: 1,
            message: "empty file".into(),
        })?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let bad_header = |message: &str| Error::Format {
            line: 1,
            message: message.to_owned(),
        };
        if fields.first() != Some(&"PGRD") {
            return Err(bad_header("missing PGRD magic"));
        }
        let kind = *fields.get(1).ok_or_else(|| bad_header("missing grid kind"))?;
        let dim = |k: usize| -> Result<usize> {
            fields
                .get(k)
                .ok_or_else(|| bad_header("missing dimension"))?
                .parse()
                .map_err(|_| bad_header("dimension is not an integer"))
        };
        let (h, w) = (dim(2)?, dim(3)?);
        let planes = match kind {
            "PROB" | "FEAT" => dim(4)?,
            _ => {
                if fields.len() > 4 {
                    return Err(bad_header("unexpected plane count"));
                }
                1
            }
        };

        let mut rows: Vec<(usize, &str)> = Vec::with_capacity(h * planes);
        for (n, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            rows.push((n + 1, line));
        }
        if rows.len() != h * planes {
            return Err(Error::Format {
                line: rows.last().map_or(1, |r| r.0),
                message: format!("expected {} data rows, found {}", h * planes, rows.len()),
            });
        }

        let mut planar: Vec<&str> = Vec::with_capacity(h * w * planes);
        for (n, line) in &rows {
            let before = planar.len();
            planar.extend(line.split_whitespace());
            if planar.len() - before != w {
                return Err(Error::Format {
                    line: *n,
                    message: format!("expected {w} values, found {}", planar.len() - before),
                });
            }
        }
        let row_of = |k: usize| rows[k / w].0;

        match kind {
            "LABEL" => {
                let labels = planar
                    .iter()
                    .enumerate()
                    .map(|(k, s)| {
                        s.parse::<u32>().map_err(|_| Error::Format {
                            line: row_of(k),
                            message: format!("invalid label {s:?}"),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(GridFile::Label(LabelMask::new(h, w, labels)?))
            }
            "PROB" | "FEAT" => {
                let n = h * w;
                let mut data = vec![0.0; n * planes];
                for (k, s) in planar.iter().enumerate() {
                    let (plane, i) = (k / n, k % n);
                    data[i * planes + plane] = parse_f64(s, row_of(k))?;
                }
                if kind == "PROB" {
                    Ok(GridFile::Prob(ProbMap::new(h, w, planes, data)?))
                } else {
                    Ok(GridFile::Feature(FeatureMap::new(h, w, planes, data)?))
                }
            }
            other => {
                let modality: Modality = other
                    .parse()
                    .map_err(|_| bad_header(&format!("unknown grid kind {other:?}")))?;
                let values = planar
                    .iter()
                    .enumerate()
                    .map(|(k, s)| parse_f64(s, row_of(k)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(GridFile::Raster(Raster::new(modality, h, w, values)?))
            }
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    s.parse::<f64>().map_err(|_| Error::Format {
        line,
        message: format!("invalid number {s:?}"),
    })
}

fn write_plane(out: &mut String, h: usize, w: usize, value: impl Fn(usize) -> String) {
    for r in 0..h {
        for c in 0..w {
            if c > 0 {
                out.push(' ');
            }
            out.push_str(&value(r * w + c));
        }
        out.push('\n');
    }
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMask> {
    match GridFile::read(path)? {
        GridFile::Label(m) => Ok(m),
        _ => Err(Error::Format {
            line: 1,
            message: "expected a LABEL grid".into(),
        }),
    }
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<Raster> {
    match GridFile::read(path)? {
        GridFile::Raster(r) => Ok(r),
        _ => Err(Error::Format {
            line: 1,
            message: "expected an NDVI, DEM or SAR grid".into(),
        }),
    }
}

pub fn read_prob(path: impl AsRef<Path>) -> Result<ProbMap> {
    match GridFile::read(path)? {
        GridFile::Prob(p) => Ok(p),
        _ => Err(Error::Format {
            line: 1,
            message: "expected a PROB grid".into(),
        }),
    }
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMap> {
    match GridFile::read(path)? {
        GridFile::Feature(f) => Ok(f),
        _ => Err(Error::Format {
            line: 1,
            message: "expected a FEAT grid".into(),
        }),
    }
}
