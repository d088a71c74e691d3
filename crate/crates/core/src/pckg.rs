//! The physical-prior knowledge graph: one record per semantic category,
//! each carrying closed NDVI / DEM / SAR intervals and the reasoning text that
//! justified them.
//!
//! On disk the graph is a JSON array of objects keyed by the field names in
//! [`FIELDS`]. Class ids are assigned by position in that array, starting at 1.
//! Interval endpoints are quantized to two decimals on construction and
//! always rendered with exactly two decimals.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{Error, Result, ValidationKind};
use crate::grid::Modality;

pub const CATEGORY: &str = "Category";
pub const MEANING: &str = "Meaning";
pub const MODIFIER_ANALYSIS: &str = "Modifier Analysis";
pub const COARSE_CLASS: &str = "Coarse Class";
pub const NDVI_RANGE: &str = "NDVI Range";
pub const DEM_RANGE: &str = "DEM Range";
pub const SAR_RANGE: &str = "SAR Range";
pub const REASONING: &str = "Reasoning";

/// Record field names, in serialization order.
pub const FIELDS: [&str; 8] = [
    CATEGORY,
    MEANING,
    MODIFIER_ANALYSIS,
    COARSE_CLASS,
    NDVI_RANGE,
    DEM_RANGE,
    SAR_RANGE,
    REASONING,
];

pub fn range_field(modality: Modality) -> &'static str {
    match modality {
        Modality::Ndvi => NDVI_RANGE,
        Modality::Dem => DEM_RANGE,
        Modality::Sar => SAR_RANGE,
    }
}

/// Closed interval `[lo, hi]` in the units of its modality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    lo: f64,
    hi: f64,
}

impl Interval {
    /// Builds an interval after quantizing both endpoints to two decimals.
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Input(format!("non-finite interval [{lo}, {hi}]")));
        }
        let (lo, hi) = (quantize(lo), quantize(hi));
        if lo > hi {
            return Err(Error::Input(format!("inverted interval [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    /// Distance from `value` to the nearest point of the interval.
    pub fn distance(&self, value: f64) -> f64 {
        interval_distance(value, *self)
    }
}

/// Point-to-interval distance: zero inside `[lo, hi]`, otherwise the gap to
/// the nearer endpoint.
pub fn interval_distance(value: f64, interval: Interval) -> f64 {
    if value < interval.lo {
        interval.lo - value
    } else if value > interval.hi {
        value - interval.hi
    } else {
        0.0
    }
}

/// Rounds to two decimals; `-0.00` becomes `0.00`.
pub fn quantize(v: f64) -> f64 {
    (v * 100.0).round() / 100.0 + 0.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct PckgEntry {
    pub category: String,
    pub meaning: String,
    pub modifier_analysis: String,
    pub coarse_class: String,
    pub ndvi_range: Interval,
    pub dem_range: Interval,
    pub sar_range: Interval,
    pub reasoning: String,
    /// Fields outside the fixed schema, kept verbatim for round-tripping.
    pub extra: Map<String, Value>,
}

impl PckgEntry {
    pub fn range(&self, modality: Modality) -> Interval {
        match modality {
            Modality::Ndvi => self.ndvi_range,
            Modality::Dem => self.dem_range,
            Modality::Sar => self.sar_range,
        }
    }

    /// Checks the per-entry invariants. Intervals built through
    /// [`Interval::new`] are already ordered; this re-checks the NDVI bounds
    /// and the category.
    pub fn validate(&self) -> Result<()> {
        if self.category.trim().is_empty() {
            return Err(Error::validation(
                &self.category,
                CATEGORY,
                ValidationKind::EmptyCategory,
            ));
        }
        for m in Modality::ALL {
            let r = self.range(m);
            if !r.lo.is_finite() || !r.hi.is_finite() {
                return Err(Error::validation(
                    &self.category,
                    range_field(m),
                    ValidationKind::NonFinite,
                ));
            }
            if r.lo > r.hi {
                return Err(Error::validation(
                    &self.category,
                    range_field(m),
                    ValidationKind::InvertedInterval,
                ));
            }
        }
        let ndvi = self.ndvi_range;
        if ndvi.lo < -1.0 || ndvi.hi > 1.0 {
            return Err(Error::validation(
                &self.category,
                NDVI_RANGE,
                ValidationKind::OutOfRange,
            ));
        }
        Ok(())
    }

    /// Parses one JSON object using the record field names.
    pub fn from_json(value: &Value) -> Result<Self> {
        let obj = value.as_object().ok_or_else(|| {
            Error::validation("", "<entry>", ValidationKind::WrongType)
        })?;
        let category = match obj.get(CATEGORY) {
            None => {
                return Err(Error::Schema {
                    category: String::new(),
                    field: CATEGORY.into(),
                })
            }
            Some(Value::String(s)) => s.clone(),
            Some(_) => return Err(Error::validation("", CATEGORY, ValidationKind::WrongType)),
        };
        if category.trim().is_empty() {
            return Err(Error::validation(
                &category,
                CATEGORY,
                ValidationKind::EmptyCategory,
            ));
        }
        let text = |field: &str| -> Result<String> {
            match obj.get(field) {
                None => Err(Error::Schema {
                    category: category.clone(),
                    field: field.into(),
                }),
                Some(Value::String(s)) => Ok(s.clone()),
                Some(_) => Err(Error::validation(&category, field, ValidationKind::WrongType)),
            }
        };
        let range = |m: Modality| -> Result<Interval> {
            let field = range_field(m);
            let v = obj.get(field).ok_or_else(|| Error::Schema {
                category: category.clone(),
                field: field.into(),
            })?;
            parse_range(&category, m, v)
        };

        let entry = PckgEntry {
            meaning: text(MEANING)?,
            modifier_analysis: text(MODIFIER_ANALYSIS)?,
            coarse_class: text(COARSE_CLASS)?,
            ndvi_range: range(Modality::Ndvi)?,
            dem_range: range(Modality::Dem)?,
            sar_range: range(Modality::Sar)?,
            reasoning: text(REASONING)?,
            extra: obj
                .iter()
                .filter(|(k, _)| !FIELDS.contains(&k.as_str()))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            category,
        };
        entry.validate()?;
        Ok(entry)
    }

    fn write_json(&self, out: &mut String, indent: &str) {
        let s = |v: &str| Value::String(v.to_owned()).to_string();
        let r = |i: Interval| format!("[{:.2}, {:.2}]", i.lo, i.hi);
        let mut fields: Vec<(String, String)> = vec![
            (CATEGORY.into(), s(&self.category)),
            (MEANING.into(), s(&self.meaning)),
            (MODIFIER_ANALYSIS.into(), s(&self.modifier_analysis)),
            (COARSE_CLASS.into(), s(&self.coarse_class)),
            (NDVI_RANGE.into(), r(self.ndvi_range)),
            (DEM_RANGE.into(), r(self.dem_range)),
            (SAR_RANGE.into(), r(self.sar_range)),
            (REASONING.into(), s(&self.reasoning)),
        ];
        for (k, v) in &self.extra {
            fields.push((k.clone(), v.to_string()));
        }
        out.push_str(indent);
        out.push_str("{\n");
        for (n, (k, v)) in fields.iter().enumerate() {
            let sep = if n + 1 < fields.len() { "," } else { "" };
            let _ = writeln!(out, "{indent}  {}: {v}{sep}", s(k));
        }
        out.push_str(indent);
        out.push('}');
    }
}

fn parse_range(category: &str, modality: Modality, v: &Value) -> Result<Interval> {
    let field = range_field(modality);
    let err = |kind| Error::validation(category, field, kind);
    let arr = v.as_array().ok_or_else(|| err(ValidationKind::BadArity))?;
    if arr.len() != 2 {
        return Err(err(ValidationKind::BadArity));
    }
    let num = |x: &Value| x.as_f64().ok_or_else(|| err(ValidationKind::WrongType));
    let (lo, hi) = (num(&arr[0])?, num(&arr[1])?);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(err(ValidationKind::NonFinite));
    }
    let (lo, hi) = (quantize(lo), quantize(hi));
    if lo > hi {
        return Err(err(ValidationKind::InvertedInterval));
    }
    if modality == Modality::Ndvi && (lo < -1.0 || hi > 1.0) {
        return Err(err(ValidationKind::OutOfRange));
    }
    Ok(Interval { lo, hi })
}

/// Validated, immutable collection of entries with dense class ids `1..=C`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pckg {
    entries: Vec<PckgEntry>,
    index: HashMap<String, u32>,
}

impl Pckg {
    pub fn new(entries: Vec<PckgEntry>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (k, e) in entries.iter().enumerate() {
            e.validate()?;
            if index.insert(e.category.clone(), k as u32 + 1).is_some() {
                return Err(Error::validation(
                    &e.category,
                    CATEGORY,
                    ValidationKind::DuplicateCategory,
                ));
            }
        }
        Ok(Self { entries, index })
    }

    pub fn parse(document: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(document).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let items = value.as_array().ok_or_else(|| Error::Parse {
            line: 1,
            column: 1,
            message: "top-level value must be an array of entries".into(),
        })?;
        let entries = items
            .iter()
            .map(PckgEntry::from_json)
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        if self.entries.is_empty() {
            return "[]\n".into();
        }
        let mut out = String::from("[\n");
        for (n, e) in self.entries.iter().enumerate() {
            e.write_json(&mut out, "  ");
            out.push_str(if n + 1 < self.entries.len() { ",\n" } else { "\n" });
        }
        out.push_str("]\n");
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PckgEntry] {
        &self.entries
    }

    pub fn class_id(&self, category: &str) -> Option<u32> {
        self.index.get(category).copied()
    }

    pub fn entry(&self, class_id: u32) -> Result<&PckgEntry> {
        if class_id == 0 || class_id as usize > self.entries.len() {
            return Err(Error::Lookup {
                class_id,
                num_classes: self.entries.len(),
            });
        }
        Ok(&self.entries[class_id as usize - 1])
    }

    /// The admissible interval of class `class_id` for `modality`.
    pub fn interval(&self, class_id: u32, modality: Modality) -> Result<Interval> {
        Ok(self.entry(class_id)?.range(modality))
    }

    /// Non-fatal conditions worth surfacing to the user.
    pub fn warnings(&self) -> Vec<String> {
        if self.entries.is_empty() {
            vec!["knowledge graph has no entries".into()]
        } else {
            Vec::new()
        }
    }
}
