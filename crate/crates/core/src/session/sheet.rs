//! The labeling spreadsheet: one column per parcel, one row per attribute.
//!
//! ```text
//! attribute,P00012,P00457
//! parcel_id,P00012,P00457
//! kind,Structure,Land
//! crime_w,0.84,0
//! ...
//! label,VAD,
//! comment,"roof caved in, boarded",
//! ```
//!
//! The leading `attribute` header row keeps the file readable by tools that
//! expect a header. Label cells accept `VAD`, `NotVAD` or blank.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use chrono::{DateTime, Utc};

use super::SessionError;
use crate::domain::{Dataset, ParcelId, FEATURE_NAMES, N_FEATURES};
use crate::forest::Label;
use crate::labels::{LabelRecord, Provenance};

pub const SHEET_ROWS: [&str; 5 + N_FEATURES] = [
    "attribute",
    "parcel_id",
    "kind",
    FEATURE_NAMES[0],
    FEATURE_NAMES[1],
    FEATURE_NAMES[2],
    FEATURE_NAMES[3],
    FEATURE_NAMES[4],
    FEATURE_NAMES[5],
    FEATURE_NAMES[6],
    "label",
    "comment",
];

/// One parcel column as read back from a sheet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SheetEntry {
    pub parcel_id: ParcelId,
    pub label: Option<Label>,
    pub comment: String,
}

impl SheetEntry {
    /// `None` for columns left blank.
    pub fn to_record(
        &self,
        annotator: &str,
        round: u32,
        timestamp: DateTime<Utc>,
        provenance: Provenance,
    ) -> Option<LabelRecord> {
        self.label.map(|l| {
            LabelRecord::new(self.parcel_id.clone(), annotator, l, round, timestamp, provenance)
                .with_comment(self.comment.clone())
        })
    }
}

/// Writes the transposed sheet for `parcels`. `filled` pre-populates label
/// and comment cells.
pub fn export_sheet<W: Write>(
    parcels: &[ParcelId],
    ds: &Dataset,
    filled: Option<&BTreeMap<ParcelId, (Option<Label>, String)>>,
    out: W,
) -> Result<(), SessionError> {
    let mut columns = Vec::with_capacity(parcels.len());
    for id in parcels {
        let p = ds
            .parcel(id)
            .ok_or_else(|| SessionError::UnknownParcelColumn(id.0.clone()))?;
        let f = ds
            .feature(id)
            .ok_or_else(|| SessionError::MalformedSheet(format!("no features for {id}")))?;
        let (label, comment) = filled
            .and_then(|m| m.get(id))
            .map(|(l, c)| (l.map(|l| l.as_str().to_string()).unwrap_or_default(), c.clone()))
            .unwrap_or_default();
        let mut col = vec![id.0.clone(), id.0.clone(), p.kind.as_str().to_string()];
        col.extend(f.to_array().iter().map(|v| v.to_string()));
        col.push(label);
        col.push(comment);
        columns.push(col);
    }
    let mut w = csv::Writer::from_writer(out);
    for (r, name) in SHEET_ROWS.iter().enumerate() {
        let mut row = vec![name.to_string()];
        row.extend(columns.iter().map(|c| c[r].clone()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_label(column: &str, token: &str) -> Result<Option<Label>, SessionError> {
    let t = token.trim();
    if t.is_empty() {
        return Ok(None);
    }
    if t.eq_ignore_ascii_case("VAD") {
        return Ok(Some(Label::Vad));
    }
    if t.eq_ignore_ascii_case("NotVAD") {
        return Ok(Some(Label::NotVad));
    }
    Err(SessionError::BadLabelToken {
        column: column.to_string(),
        token: token.to_string(),
    })
}

/// Parses a sheet written by [`export_sheet`]. With `expected`, every
/// parcel column must belong to it. Columns come back in sheet order.
pub fn import_sheet<R: Read>(input: R, expected: Option<&BTreeSet<ParcelId>>) -> Result<Vec<SheetEntry>, SessionError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let mut rows: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut width = None;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| SessionError::MalformedSheet(e.to_string()))?;
        if rec.iter().all(|c| c.trim().is_empty()) {
            continue;
        }
        let name = rec.get(0).unwrap_or("").trim().to_string();
        if !SHEET_ROWS.contains(&name.as_str()) {
            return Err(SessionError::MalformedSheet(format!("unknown attribute row {name:?}")));
        }
        match width {
            None => width = Some(rec.len()),
            Some(w) if w != rec.len() => {
                return Err(SessionError::MalformedSheet(format!(
                    "row {name:?} has {} cells, expected {w}",
                    rec.len()
                )))
            }
            _ => {}
        }
        let cells: Vec<String> = rec.iter().skip(1).map(str::to_string).collect();
        if rows.insert(name.clone(), cells).is_some() {
            return Err(SessionError::MalformedSheet(format!("duplicate attribute row {name:?}")));
        }
    }
    for required in ["parcel_id", "label", "comment"] {
        if !rows.contains_key(required) {
            return Err(SessionError::MalformedSheet(format!("missing {required:?} row")));
        }
    }
    let ids = &rows["parcel_id"];
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(ids.len());
    for (j, raw) in ids.iter().enumerate() {
        let id = ParcelId::new(raw.trim());
        if id.0.is_empty() {
            return Err(SessionError::MalformedSheet(format!("column {} has no parcel id", j + 1)));
        }
        if expected.is_some_and(|e| !e.contains(&id)) {
            return Err(SessionError::UnknownParcelColumn(id.0));
        }
        if !seen.insert(id.clone()) {
            return Err(SessionError::MalformedSheet(format!("parcel {id} appears twice")));
        }
        out.push(SheetEntry {
            label: parse_label(&id.0, &rows["label"][j])?,
            comment: rows["comment"][j].clone(),
            parcel_id: id,
        });
    }
    Ok(out)
}
