//! Method comparison: internal accuracy, external consensus with
//! validation sources, content sensitivity, and the 311 equity probe.

mod equity;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{FeatureVector, ParcelId, ParcelKind, FEATURE_NAMES, CODE_VIOLATION};
use crate::forest::{cross_validate, Forest, ForestError, ForestParams, TrainingData};
use crate::util::median;

pub use equity::{equity_probe, ols_standardized, EquityFit, MIN_NEIGHBORHOODS};

/// Internal accuracy published for the Savannah study as (method, kind,
/// percent). Kept for reference; synthetic cities do not reproduce it.
pub const PUBLISHED_INTERNAL_ACCURACY: [(Method, ParcelKind, f64); 4] = [
    (Method::SimpleMl, ParcelKind::Land, 90.72),
    (Method::SimpleMl, ParcelKind::Structure, 92.95),
    (Method::Vadecide, ParcelKind::Land, 93.33),
    (Method::Vadecide, ParcelKind::Structure, 87.69),
];

pub const DEFAULT_CV_FOLDS: usize = 5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("output set is empty")]
    EmptyOutput,
    #[error("parcel {0} has no feature vector")]
    MissingFeatures(ParcelId),
    #[error("singular design: {0}")]
    SingularDesign(String),
    #[error("need at least {MIN_NEIGHBORHOODS} neighborhoods, got {0}")]
    TooFewNeighborhoods(usize),
    #[error("{0}")]
    InvalidResult(String),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    CityWorkflow,
    SimpleMl,
    Vadecide,
}

impl Method {
    pub fn display(self) -> &'static str {
        match self {
            Method::CityWorkflow => "City's workflow",
            Method::SimpleMl => "ML model",
            Method::Vadecide => "VADecide",
        }
    }
}

/// `|predicted ∩ validation| / |validation|`, both first restricted to
/// `scope` when given.
pub fn external_consensus(
    predicted: &BTreeSet<ParcelId>,
    validation: &BTreeSet<ParcelId>,
    scope: Option<&BTreeSet<ParcelId>>,
) -> Result<f64, EvalError> {
    let in_scope = |id: &&ParcelId| scope.is_none_or(|s| s.contains(*id));
    let val: BTreeSet<&ParcelId> = validation.iter().filter(in_scope).collect();
    if val.is_empty() {
        return Err(EvalError::EmptyValidation);
    }
    let hit = val.iter().filter(|id| predicted.contains(**id)).count();
    Ok(hit as f64 / val.len() as f64)
}

/// Percent with two decimals, as printed in the comparison table.
pub fn percent(fraction: f64) -> String {
    format!("{:.2}%", fraction * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContentThresholds {
    /// A parcel counts "with crime" when `crime_w` exceeds this.
    pub crime_min: f64,
    pub code_violation_min: f64,
    pub delinquent_tax_min: f64,
    /// Fixed low-value cutoff in $1,000; the pool median when absent.
    pub low_value_below: Option<f64>,
}

impl Default for ContentThresholds {
    fn default() -> Self {
        ContentThresholds {
            crime_min: 0.0,
            code_violation_min: 0.0,
            delinquent_tax_min: 0.0,
            low_value_below: None,
        }
    }
}

pub const CONTENT_FAMILIES: [&str; 4] = ["crime", "code_violations", "tax_delinquency", "low_property_value"];

/// Percentages in [0, 100] of output parcels meeting each threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContentSensitivity {
    pub crime: f64,
    pub code_violations: f64,
    pub tax_delinquency: f64,
    pub low_property_value: f64,
    /// The property value cutoff that was applied.
    pub low_value_cutoff: f64,
}

impl ContentSensitivity {
    pub fn values(&self) -> [f64; 4] {
        [self.crime, self.code_violations, self.tax_delinquency, self.low_property_value]
    }
}

pub fn pool_median_value(
    pool: &BTreeSet<ParcelId>,
    features: &BTreeMap<ParcelId, FeatureVector>,
) -> Option<f64> {
    let v: Vec<f64> = pool
        .iter()
        .filter_map(|id| features.get(id))
        .map(|f| f.property_value)
        .collect();
    median(&v)
}

pub fn content_sensitivity(
    output: &BTreeSet<ParcelId>,
    features: &BTreeMap<ParcelId, FeatureVector>,
    thresholds: &ContentThresholds,
    pool: &BTreeSet<ParcelId>,
) -> Result<ContentSensitivity, EvalError> {
    if output.is_empty() {
        return Err(EvalError::EmptyOutput);
    }
    let cutoff = match thresholds.low_value_below {
        Some(c) => c,
        None => pool_median_value(pool, features).ok_or(EvalError::EmptyOutput)?,
    };
    let mut hits = [0usize; 4];
    for id in output {
        let f = features.get(id).ok_or_else(|| EvalError::MissingFeatures(id.clone()))?;
        let checks = [
            f.crime_w > thresholds.crime_min,
            f.code_violation_w > thresholds.code_violation_min,
            f.delinquent_tax > thresholds.delinquent_tax_min,
            f.property_value < cutoff,
        ];
        for (h, c) in hits.iter_mut().zip(checks) {
            *h += usize::from(c);
        }
    }
    let pct = |h: usize| 100.0 * h as f64 / output.len() as f64;
    Ok(ContentSensitivity {
        crime: pct(hits[0]),
        code_violations: pct(hits[1]),
        tax_delinquency: pct(hits[2]),
        low_property_value: pct(hits[3]),
        low_value_cutoff: cutoff,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InternalAccuracy {
    pub cv_mean: f64,
    pub per_fold: Vec<f64>,
    pub oob: f64,
    /// Accuracy on the first fold alone: one 80/20 split when k = 5.
    pub holdout: f64,
}

/// k-fold CV (k = 5) plus the OOB score of a forest fit on every row.
pub fn internal_accuracy(data: &TrainingData, params: &ForestParams, seed: u64) -> Result<InternalAccuracy, EvalError> {
    let cv = cross_validate(data, DEFAULT_CV_FOLDS, params, seed)?;
    let full = Forest::fit(data, params, seed)?;
    Ok(InternalAccuracy {
        cv_mean: cv.mean,
        holdout: cv.folds[0],
        oob: full.oob_score()?,
        per_fold: cv.folds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    pub kind: ParcelKind,
    pub input_ids: BTreeSet<ParcelId>,
    pub output_ids: BTreeSet<ParcelId>,
    pub internal_accuracy: Option<InternalAccuracy>,
    /// Feature names left out of the method's inputs.
    #[serde(default)]
    pub excluded_features: Vec<String>,
    /// Validation source that this method's output comes from, if any.
    #[serde(default)]
    pub own_validation: Option<String>,
    #[serde(default)]
    pub notes: String,
    /// Parcels the method covers, typically one kind of the pool.
    /// Validation sets are restricted to it before consensus is taken.
    #[serde(default)]
    pub universe: Option<BTreeSet<ParcelId>>,
}

impl MethodResult {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.method == Method::SimpleMl && !self.excluded_features.iter().any(|f| f == FEATURE_NAMES[CODE_VIOLATION]) {
            return Err(EvalError::InvalidResult(
                "a simple-ML result must exclude code_violation_w from its inputs".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub name: String,
    pub ids: BTreeSet<ParcelId>,
    #[serde(default)]
    pub scope: Option<BTreeSet<ParcelId>>,
}

impl Validation {
    pub fn new(name: impl Into<String>, ids: BTreeSet<ParcelId>) -> Self {
        Validation {
            name: name.into(),
            ids,
            scope: None,
        }
    }

    pub fn with_scope(mut self, scope: BTreeSet<ParcelId>) -> Self {
        self.scope = Some(scope);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportColumn {
    pub method: Method,
    pub kind: ParcelKind,
    pub input: usize,
    pub output: usize,
    /// Percent values; `None` renders as NA.
    pub internal_accuracy_cv: Option<f64>,
    pub internal_accuracy_oob: Option<f64>,
    pub consensus: BTreeMap<String, Option<f64>>,
    pub content: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub validations: Vec<String>,
    pub columns: Vec<ReportColumn>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricFamily {
    Counts,
    InternalAccuracy,
    Consensus,
    Content,
}

fn cell(v: Option<f64>) -> String {
    match v {
        Some(p) => format!("{p:.2}%"),
        None => "NA".into(),
    }
}

impl MetricsReport {
    pub fn column(&self, method: Method, kind: ParcelKind) -> Option<&ReportColumn> {
        self.columns.iter().find(|c| c.method == method && c.kind == kind)
    }

    fn rows(&self) -> Vec<(MetricFamily, String, Vec<String>)> {
        let mut rows = Vec::new();
        let all = |f: &dyn Fn(&ReportColumn) -> String| self.columns.iter().map(f).collect::<Vec<_>>();
        rows.push((MetricFamily::Counts, "Input".to_string(), all(&|c| c.input.to_string())));
        rows.push((MetricFamily::Counts, "Output".to_string(), all(&|c| c.output.to_string())));
        rows.push((MetricFamily::InternalAccuracy, "Internal accuracy (CV)".to_string(), all(&|c| cell(c.internal_accuracy_cv))));
        rows.push((MetricFamily::InternalAccuracy, "Internal accuracy (OOB)".to_string(), all(&|c| cell(c.internal_accuracy_oob))));
        for v in &self.validations {
            rows.push((
                MetricFamily::Consensus,
                format!("Consensus: {v}"),
                all(&|c| cell(c.consensus.get(v).copied().flatten())),
            ));
        }
        for f in CONTENT_FAMILIES {
            rows.push((
                MetricFamily::Content,
                format!("Content: {f}"),
                all(&|c| cell(c.content.get(f).copied().flatten())),
            ));
        }
        rows
    }

    /// Aligned text table: metrics down, method and kind across.
    pub fn to_text(&self) -> String {
        let rows = self.rows();
        let headers: Vec<String> = self
            .columns
            .iter()
            .map(|c| format!("{} {}", c.method.display(), c.kind.as_str()))
            .collect();
        let first = rows.iter().map(|r| r.1.len()).max().unwrap_or(0).max("Metric".len());
        let widths: Vec<usize> = (0..headers.len())
            .map(|j| rows.iter().map(|r| r.2[j].len()).max().unwrap_or(0).max(headers[j].len()))
            .collect();
        let mut s = String::new();
        let _ = write!(s, "{:<first$}", "Metric");
        for (h, w) in headers.iter().zip(&widths) {
            let _ = write!(s, "  {h:>w$}");
        }
        s.push('\n');
        for (_, name, vals) in &rows {
            let _ = write!(s, "{name:<first$}");
            for (v, w) in vals.iter().zip(&widths) {
                let _ = write!(s, "  {v:>w$}");
            }
            s.push('\n');
        }
        s
    }

    /// Long-format CSV (`method,kind,metric,value`) for one metric family.
    pub fn write_csv<W: io::Write>(&self, family: MetricFamily, w: W) -> Result<(), EvalError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["method", "kind", "metric", "value"])?;
        for (fam, name, vals) in self.rows() {
            if fam != family {
                continue;
            }
            for (c, v) in self.columns.iter().zip(vals) {
                out.write_record([c.method.display(), c.kind.as_str(), name.as_str(), v.as_str()])?;
            }
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// One column per method result. Cells are NA where the metric is
/// undefined: no internal accuracy, a method compared against its own
/// source, an empty validation set in scope, or an empty output.
pub fn comparison_report(
    results: &[MethodResult],
    validations: &[Validation],
    pool: &BTreeSet<ParcelId>,
    features: &BTreeMap<ParcelId, FeatureVector>,
    thresholds: &ContentThresholds,
) -> MetricsReport {
    let columns = results
        .iter()
        .map(|r| {
            let consensus = validations
                .iter()
                .map(|v| {
                    let value = if r.own_validation.as_deref() == Some(v.name.as_str()) {
                        None
                    } else {
                        let scope = match (&v.scope, &r.universe) {
                            (Some(a), Some(b)) => Some(a.intersection(b).cloned().collect()),
                            (a, b) => a.clone().or_else(|| b.clone()),
                        };
                        external_consensus(&r.output_ids, &v.ids, scope.as_ref())
                            .ok()
                            .map(|x| 100.0 * x)
                    };
                    (v.name.clone(), value)
                })
                .collect();
            let cs = content_sensitivity(&r.output_ids, features, thresholds, pool).ok();
            let content = CONTENT_FAMILIES
                .iter()
                .enumerate()
                .map(|(i, f)| (f.to_string(), cs.map(|c| c.values()[i])))
                .collect();
            ReportColumn {
                method: r.method,
                kind: r.kind,
                input: r.input_ids.len(),
                output: r.output_ids.len(),
                internal_accuracy_cv: r.internal_accuracy.as_ref().map(|a| 100.0 * a.cv_mean),
                internal_accuracy_oob: r.internal_accuracy.as_ref().map(|a| 100.0 * a.oob),
                consensus,
                content,
            }
        })
        .collect();
    MetricsReport {
        validations: validations.iter().map(|v| v.name.clone()).collect(),
        columns,
    }
}
