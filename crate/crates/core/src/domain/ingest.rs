//! CSV ingestion for parcels, incidents and neighborhood statistics.
//!
//! Column names are configurable through [`ParcelSchema`] and
//! [`IncidentSchema`]; the defaults match what the writers in this module
//! (and the synthetic city generator) emit.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    FloodRisk, IncidentCategory, IncidentRecord, Location, NeighborhoodStats, Parcel, ParcelId,
    ParcelKind, ResidentialClass,
};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("duplicate parcel id {0:?}")]
    DuplicateId(String),
    #[error("row {row}: {reason}")]
    UnparsableRow { row: u64, reason: String },
    #[error("row {row}: bad date {value:?}")]
    BadDate { row: u64, value: String },
    #[error("incident references unknown parcel {0:?}")]
    UnresolvedParcel(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Column names for the parcel file. `kind` is optional; when present it must
/// agree with the residential class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParcelSchema {
    pub id: String,
    pub kind: Option<String>,
    pub residential_class: String,
    pub x: String,
    pub y: String,
    pub neighborhood: String,
    pub property_value: String,
    pub flood_risk: String,
}

impl Default for ParcelSchema {
    fn default() -> Self {
        ParcelSchema {
            id: "id".into(),
            kind: Some("kind".into()),
            residential_class: "residential_class".into(),
            x: "x".into(),
            y: "y".into(),
            neighborhood: "neighborhood_id".into(),
            property_value: "property_value".into(),
            flood_risk: "flood_risk".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IncidentSchema {
    pub parcel_id: String,
    pub category: String,
    pub subtype: Option<String>,
    pub date: String,
    pub amount: Option<String>,
    pub active: Option<String>,
}

impl Default for IncidentSchema {
    fn default() -> Self {
        IncidentSchema {
            parcel_id: "parcel_id".into(),
            category: "category".into(),
            subtype: Some("subtype".into()),
            date: "date".into(),
            amount: Some("amount".into()),
            active: Some("active".into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    pub fn years(start: i32, end: i32) -> Self {
        DateRange {
            start: NaiveDate::from_ymd_opt(start, 1, 1).expect("valid date"),
            end: NaiveDate::from_ymd_opt(end, 12, 31).expect("valid date"),
        }
    }

    pub fn contains(&self, d: NaiveDate) -> bool {
        self.start <= d && d <= self.end
    }
}

/// Accepted date range per incident category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyWindow {
    pub default: DateRange,
    pub overrides: BTreeMap<IncidentCategory, DateRange>,
}

impl Default for StudyWindow {
    /// 2010-2019 for every category, code violations from 2012.
    fn default() -> Self {
        let mut overrides = BTreeMap::new();
        overrides.insert(IncidentCategory::CodeViolation, DateRange::years(2012, 2019));
        StudyWindow {
            default: DateRange::years(2010, 2019),
            overrides,
        }
    }
}

impl StudyWindow {
    pub fn range(&self, category: IncidentCategory) -> DateRange {
        self.overrides.get(&category).copied().unwrap_or(self.default)
    }

    pub fn contains(&self, category: IncidentCategory, d: NaiveDate) -> bool {
        self.range(category).contains(d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedIncident {
    pub row: u64,
    pub parcel_id: ParcelId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowExclusion {
    pub row: u64,
    pub parcel_id: ParcelId,
    pub category: IncidentCategory,
    pub date: NaiveDate,
}

/// Result of reading an incident file: kept records plus everything set aside.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IncidentBatch {
    pub incidents: Vec<IncidentRecord>,
    pub unresolved: Vec<RejectedIncident>,
    pub out_of_window: Vec<WindowExclusion>,
}

struct Columns {
    index: HashMap<String, usize>,
}

impl Columns {
    fn new(headers: &csv::StringRecord) -> Self {
        let index = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim().to_string(), i))
            .collect();
        Columns { index }
    }

    fn require(&self, name: &str) -> Result<usize, IngestError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
    }

    fn optional(&self, name: Option<&String>) -> Option<usize> {
        name.and_then(|n| self.index.get(n.as_str()).copied())
    }
}

fn row_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

fn field(rec: &csv::StringRecord, i: usize) -> &str {
    rec.get(i).unwrap_or("").trim()
}

fn parse_f64(rec: &csv::StringRecord, i: usize, what: &str) -> Result<f64, IngestError> {
    let s = field(rec, i);
    s.parse::<f64>().map_err(|_| IngestError::UnparsableRow {
        row: row_of(rec),
        reason: format!("{what}: cannot parse {s:?} as a number"),
    })
}

fn parse_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .or_else(|_| NaiveDate::parse_from_str(s, "%m/%d/%Y"))
        .ok()
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.to_ascii_lowercase().as_str() {
        "" | "true" | "t" | "yes" | "y" | "1" => Some(true),
        "false" | "f" | "no" | "n" | "0" => Some(false),
        _ => None,
    }
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(input)
}

/// Reads parcels, validating invariants and id uniqueness.
pub fn read_parcels<R: Read>(input: R, schema: &ParcelSchema) -> Result<Vec<Parcel>, IngestError> {
    let mut rdr = reader(input);
    let cols = Columns::new(rdr.headers()?);
    let c_id = cols.require(&schema.id)?;
    let c_class = cols.require(&schema.residential_class)?;
    let c_kind = cols.optional(schema.kind.as_ref());
    let c_x = cols.require(&schema.x)?;
    let c_y = cols.require(&schema.y)?;
    let c_nb = cols.require(&schema.neighborhood)?;
    let c_val = cols.require(&schema.property_value)?;
    let c_flood = cols.require(&schema.flood_risk)?;

    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = row_of(&rec);
        let bad = |reason: String| IngestError::UnparsableRow { row, reason };

        let id = field(&rec, c_id);
        if id.is_empty() {
            return Err(bad("empty parcel id".into()));
        }
        let class_s = field(&rec, c_class);
        let class = ResidentialClass::parse(class_s)
            .ok_or_else(|| bad(format!("unknown residential class {class_s:?}")))?;
        let kind = match c_kind {
            Some(i) if !field(&rec, i).is_empty() => {
                let s = field(&rec, i);
                ParcelKind::parse(s).ok_or_else(|| bad(format!("unknown kind {s:?}")))?
            }
            _ => class.kind(),
        };
        let flood_s = field(&rec, c_flood);
        let flood_risk =
            FloodRisk::parse(flood_s).ok_or_else(|| bad(format!("unknown flood risk {flood_s:?}")))?;
        let parcel = Parcel {
            id: ParcelId::new(id),
            kind,
            location: Location {
                x: parse_f64(&rec, c_x, "x")?,
                y: parse_f64(&rec, c_y, "y")?,
            },
            neighborhood_id: field(&rec, c_nb).to_string(),
            property_value: parse_f64(&rec, c_val, "property_value")?,
            flood_risk,
            residential_class: class,
        };
        parcel.validate().map_err(bad)?;
        if !seen.insert(parcel.id.clone()) {
            return Err(IngestError::DuplicateId(parcel.id.0));
        }
        out.push(parcel);
    }
    Ok(out)
}

/// Reads incidents. Records whose parcel is not in `known` are collected as
/// rejects (pass `None` to defer resolution); records outside the study
/// window are set aside with a warning.
pub fn read_incidents<R: Read>(
    input: R,
    schema: &IncidentSchema,
    known: Option<&BTreeSet<ParcelId>>,
    window: &StudyWindow,
) -> Result<IncidentBatch, IngestError> {
    let mut rdr = reader(input);
    let cols = Columns::new(rdr.headers()?);
    let c_pid = cols.require(&schema.parcel_id)?;
    let c_cat = cols.require(&schema.category)?;
    let c_date = cols.require(&schema.date)?;
    let c_sub = cols.optional(schema.subtype.as_ref());
    let c_amt = cols.optional(schema.amount.as_ref());
    let c_act = cols.optional(schema.active.as_ref());

    let mut batch = IncidentBatch::default();
    for rec in rdr.records() {
        let rec = rec?;
        let row = row_of(&rec);
        let bad = |reason: String| IngestError::UnparsableRow { row, reason };

        let parcel_id = ParcelId::new(field(&rec, c_pid));
        let cat_s = field(&rec, c_cat);
        let category = IncidentCategory::parse(cat_s)
            .ok_or_else(|| bad(format!("unknown category {cat_s:?}")))?;
        let date_s = field(&rec, c_date);
        let date = parse_date(date_s).ok_or_else(|| IngestError::BadDate {
            row,
            value: date_s.to_string(),
        })?;
        let amount = match c_amt {
            Some(i) if !field(&rec, i).is_empty() => parse_f64(&rec, i, "amount")?,
            _ => 0.0,
        };
        let active = match c_act {
            Some(i) => {
                let s = field(&rec, i);
                parse_bool(s).ok_or_else(|| bad(format!("bad active flag {s:?}")))?
            }
            None => true,
        };
        let incident = IncidentRecord {
            parcel_id,
            category,
            subtype: c_sub.map(|i| field(&rec, i).to_string()).unwrap_or_default(),
            date,
            amount,
            active,
        };
        incident.validate().map_err(bad)?;

        if let Some(known) = known {
            if !known.contains(&incident.parcel_id) {
                batch.unresolved.push(RejectedIncident {
                    row,
                    parcel_id: incident.parcel_id,
                });
                continue;
            }
        }
        if !window.contains(category, date) {
            warn!(
                "row {row}: {category} incident dated {date} is outside the study window; excluded"
            );
            batch.out_of_window.push(WindowExclusion {
                row,
                parcel_id: incident.parcel_id,
                category,
                date,
            });
            continue;
        }
        batch.incidents.push(incident);
    }
    Ok(batch)
}

/// Reads `neighborhood_id, median_income, pct_black, call_311_count`.
pub fn read_neighborhoods<R: Read>(
    input: R,
) -> Result<BTreeMap<String, NeighborhoodStats>, IngestError> {
    let mut rdr = reader(input);
    let cols = Columns::new(rdr.headers()?);
    let c_id = cols.require("neighborhood_id")?;
    let c_inc = cols.require("median_income")?;
    let c_blk = cols.require("pct_black")?;
    let c_311 = cols.require("call_311_count")?;
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = row_of(&rec);
        let calls_s = field(&rec, c_311);
        let call_311_count = calls_s.parse::<u64>().map_err(|_| IngestError::UnparsableRow {
            row,
            reason: format!("call_311_count: cannot parse {calls_s:?}"),
        })?;
        let pct_black = parse_f64(&rec, c_blk, "pct_black")?;
        if !(0.0..=1.0).contains(&pct_black) {
            return Err(IngestError::UnparsableRow {
                row,
                reason: format!("pct_black {pct_black} outside [0,1]"),
            });
        }
        let stats = NeighborhoodStats {
            median_income: parse_f64(&rec, c_inc, "median_income")?,
            pct_black,
            call_311_count,
        };
        let id = field(&rec, c_id).to_string();
        if out.insert(id.clone(), stats).is_some() {
            return Err(IngestError::DuplicateId(id));
        }
    }
    Ok(out)
}

pub fn ingest_parcels(path: &Path, schema: &ParcelSchema) -> Result<Vec<Parcel>, IngestError> {
    read_parcels(File::open(path)?, schema)
}

pub fn ingest_incidents(
    path: &Path,
    schema: &IncidentSchema,
    known: Option<&BTreeSet<ParcelId>>,
    window: &StudyWindow,
) -> Result<IncidentBatch, IngestError> {
    read_incidents(File::open(path)?, schema, known, window)
}

pub fn ingest_neighborhoods(path: &Path) -> Result<BTreeMap<String, NeighborhoodStats>, IngestError> {
    read_neighborhoods(File::open(path)?)
}

pub fn write_parcels_csv<W: Write>(parcels: &[Parcel], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "id",
        "kind",
        "residential_class",
        "x",
        "y",
        "neighborhood_id",
        "property_value",
        "flood_risk",
    ])?;
    for p in parcels {
        w.write_record([
            p.id.0.clone(),
            p.kind.to_string(),
            p.residential_class.as_str().to_string(),
            p.location.x.to_string(),
            p.location.y.to_string(),
            p.neighborhood_id.clone(),
            p.property_value.to_string(),
            p.flood_risk.as_str().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_incidents_csv<W: Write>(incidents: &[IncidentRecord], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["parcel_id", "category", "subtype", "date", "amount", "active"])?;
    for i in incidents {
        w.write_record([
            i.parcel_id.0.clone(),
            i.category.to_string(),
            i.subtype.clone(),
            i.date.format("%Y-%m-%d").to_string(),
            i.amount.to_string(),
            i.active.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_neighborhoods_csv<W: Write>(
    stats: &BTreeMap<String, NeighborhoodStats>,
    out: W,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["neighborhood_id", "median_income", "pct_black", "call_311_count"])?;
    for (id, s) in stats {
        w.write_record([
            id.clone(),
            s.median_income.to_string(),
            s.pct_black.to_string(),
            s.call_311_count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
