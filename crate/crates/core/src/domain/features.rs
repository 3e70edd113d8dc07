use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    Dataset, FeatureVector, IncidentCategory, IncidentRecord, Parcel, ParcelId, FEATURE_NAMES,
    VAD_CODE_SUBTYPES,
};

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("incidents mix categories {0} and {1}")]
    MixedCategories(IncidentCategory, IncidentCategory),
    #[error("invalid weight config: {0}")]
    InvalidConfig(String),
    #[error("special assessment {special} exceeds total delinquent {total}")]
    SpecialExceedsTotal { special: f64, total: f64 },
}

/// Which incident categories apply per-subtype weights on top of recency decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TypeWeighting {
    pub crime: bool,
    pub drug_crime: bool,
    pub code_violation: bool,
}

impl Default for TypeWeighting {
    fn default() -> Self {
        TypeWeighting {
            crime: true,
            drug_crime: false,
            code_violation: true,
        }
    }
}

impl TypeWeighting {
    fn applies_to(&self, category: IncidentCategory) -> bool {
        match category {
            IncidentCategory::Crime => self.crime,
            IncidentCategory::DrugCrime => self.drug_crime,
            IncidentCategory::CodeViolation => self.code_violation,
            _ => true,
        }
    }
}

/// Recency and type weighting for incident counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightConfig {
    pub as_of: NaiveDate,
    pub half_life_years: f64,
    /// Per-subtype weight; subtypes not listed weigh 1.0.
    pub type_weights: BTreeMap<String, f64>,
    pub type_weighting: TypeWeighting,
}

impl Default for WeightConfig {
    /// The shipped configuration: three-year half-life as of the end of 2019,
    /// VAD-indicating code-violation subtypes weighted 2.0.
    fn default() -> Self {
        let type_weights = VAD_CODE_SUBTYPES
            .iter()
            .map(|s| (s.to_string(), 2.0))
            .collect();
        WeightConfig {
            as_of: NaiveDate::from_ymd_opt(2019, 12, 31).expect("valid date"),
            half_life_years: 3.0,
            type_weights,
            type_weighting: TypeWeighting::default(),
        }
    }
}

impl WeightConfig {
    /// All type weights 1.0.
    pub fn uniform(as_of: NaiveDate, half_life_years: f64) -> Self {
        WeightConfig {
            as_of,
            half_life_years,
            type_weights: BTreeMap::new(),
            type_weighting: TypeWeighting::default(),
        }
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if !(self.half_life_years > 0.0) {
            return Err(FeatureError::InvalidConfig(format!(
                "half_life_years must be > 0, got {}",
                self.half_life_years
            )));
        }
        if let Some((k, w)) = self.type_weights.iter().find(|(_, w)| !(**w > 0.0)) {
            return Err(FeatureError::InvalidConfig(format!(
                "type weight for {k:?} must be > 0, got {w}"
            )));
        }
        Ok(())
    }

    pub fn type_weight(&self, subtype: &str) -> f64 {
        self.type_weights
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(subtype.trim()))
            .map(|(_, w)| *w)
            .unwrap_or(1.0)
    }

    /// Years between `date` and `as_of`; records dated after `as_of` count as fresh.
    pub fn years_elapsed(&self, date: NaiveDate) -> f64 {
        let days = (self.as_of - date).num_days().max(0);
        days as f64 / 365.25
    }

    pub fn decay(&self, date: NaiveDate) -> f64 {
        (-self.years_elapsed(date) / self.half_life_years).exp2()
    }
}

/// Sum of type weight times half-life decay over same-category incidents.
pub fn weighted_count<'a, I>(incidents: I, cfg: &WeightConfig) -> Result<f64, FeatureError>
where
    I: IntoIterator<Item = &'a IncidentRecord>,
{
    cfg.validate()?;
    let mut category: Option<IncidentCategory> = None;
    let mut total = 0.0;
    for inc in incidents {
        match category {
            None => category = Some(inc.category),
            Some(c) if c != inc.category => {
                return Err(FeatureError::MixedCategories(c, inc.category))
            }
            _ => {}
        }
        let type_w = if cfg.type_weighting.applies_to(inc.category) {
            cfg.type_weight(&inc.subtype)
        } else {
            1.0
        };
        total += type_w * cfg.decay(inc.date);
    }
    Ok(total)
}

/// Share of special assessment in the total delinquent amount; zero when nothing is owed.
pub fn unpaid_special_pct(special: f64, total_delinquent: f64) -> Result<f64, FeatureError> {
    if special < 0.0 || total_delinquent < 0.0 || special > total_delinquent {
        return Err(FeatureError::SpecialExceedsTotal {
            special,
            total: total_delinquent,
        });
    }
    if total_delinquent == 0.0 {
        return Ok(0.0);
    }
    Ok((special / total_delinquent).clamp(0.0, 1.0))
}

pub fn compute_features(
    parcel: &Parcel,
    incidents: &[&IncidentRecord],
    cfg: &WeightConfig,
) -> Result<FeatureVector, FeatureError> {
    let of = |cat: IncidentCategory| incidents.iter().copied().filter(move |i| i.category == cat);

    let crime_w = weighted_count(of(IncidentCategory::Crime), cfg)?;
    let drug_crime_w = weighted_count(of(IncidentCategory::DrugCrime), cfg)?;
    let code_violation_w =
        weighted_count(of(IncidentCategory::CodeViolation).filter(|i| i.active), cfg)?;

    let mut tax = 0.0;
    let mut special = 0.0;
    let mut years = BTreeSet::new();
    for inc in incidents {
        match inc.category {
            IncidentCategory::TaxDelinquency => tax += inc.amount,
            IncidentCategory::SpecialAssessment => special += inc.amount,
            _ => continue,
        }
        years.insert(inc.date.year());
    }
    let delinquent_tax = tax + special;

    Ok(FeatureVector {
        crime_w,
        drug_crime_w,
        code_violation_w,
        delinquent_tax,
        delinquent_years: years.len() as u32,
        unpaid_special_pct: unpaid_special_pct(special, delinquent_tax)?,
        property_value: parcel.property_value,
    })
}

pub fn compute_all_features(
    ds: &Dataset,
    cfg: &WeightConfig,
) -> Result<BTreeMap<ParcelId, FeatureVector>, FeatureError> {
    cfg.validate()?;
    ds.parcels
        .iter()
        .map(|p| {
            let incidents = ds.incidents_of(&p.id);
            compute_features(p, &incidents, cfg).map(|f| (p.id.clone(), f))
        })
        .collect()
}

/// Writes `parcel_id` followed by the seven features in fixed order.
pub fn write_features_csv<W: Write>(
    features: &BTreeMap<ParcelId, FeatureVector>,
    out: W,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["parcel_id"];
    header.extend(FEATURE_NAMES);
    w.write_record(&header)?;
    for (id, f) in features {
        let mut rec = vec![id.0.clone()];
        rec.extend(f.to_array().iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
