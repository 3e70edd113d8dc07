//! Parcel-level domain types shared by every other module.
//!
//! A [`Dataset`] bundles parcels, their incident records, the computed
//! seven-column [`FeatureVector`]s and neighborhood statistics. Everything in
//! here is immutable once built; the operations that produce new values
//! (`compute_features`, `candidate_filter`) are pure.

mod features;
mod filter;
mod ingest;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

pub use features::{
    compute_all_features, compute_features, unpaid_special_pct, weighted_count, write_features_csv,
    FeatureError, TypeWeighting, WeightConfig,
};
pub use filter::{candidate_filter, FilterConfig};
pub use ingest::{
    ingest_incidents, ingest_neighborhoods, ingest_parcels, read_incidents, read_neighborhoods,
    read_parcels, write_incidents_csv, write_neighborhoods_csv, write_parcels_csv, DateRange,
    IncidentBatch, IncidentSchema, IngestError, ParcelSchema, RejectedIncident, StudyWindow,
    WindowExclusion,
};

/// Opaque parcel identifier, unique within a dataset.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParcelId(pub String);

impl ParcelId {
    pub fn new(id: impl Into<String>) -> Self {
        ParcelId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ParcelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ParcelId {
    fn from(s: &str) -> Self {
        ParcelId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParcelKind {
    Land,
    Structure,
}

impl ParcelKind {
    pub const ALL: [ParcelKind; 2] = [ParcelKind::Land, ParcelKind::Structure];

    pub fn as_str(self) -> &'static str {
        match self {
            ParcelKind::Land => "Land",
            ParcelKind::Structure => "Structure",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "land" => Some(ParcelKind::Land),
            "structure" => Some(ParcelKind::Structure),
            _ => None,
        }
    }
}

impl fmt::Display for ParcelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FloodRisk {
    None,
    Low,
    High,
}

impl FloodRisk {
    pub fn as_str(self) -> &'static str {
        match self {
            FloodRisk::None => "None",
            FloodRisk::Low => "Low",
            FloodRisk::High => "High",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" | "" => Some(FloodRisk::None),
            "low" => Some(FloodRisk::Low),
            "high" => Some(FloodRisk::High),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ResidentialClass {
    SingleFamily,
    TwoToFourFamily,
    Townhouse,
    LandOnly,
    Other,
}

impl ResidentialClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ResidentialClass::SingleFamily => "SingleFamily",
            ResidentialClass::TwoToFourFamily => "TwoToFourFamily",
            ResidentialClass::Townhouse => "Townhouse",
            ResidentialClass::LandOnly => "LandOnly",
            ResidentialClass::Other => "Other",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "singlefamily" => Some(ResidentialClass::SingleFamily),
            "twotofourfamily" | "24family" => Some(ResidentialClass::TwoToFourFamily),
            "townhouse" => Some(ResidentialClass::Townhouse),
            "landonly" | "land" => Some(ResidentialClass::LandOnly),
            "other" => Some(ResidentialClass::Other),
            _ => None,
        }
    }

    /// The parcel kind implied by the class: only `LandOnly` is land.
    pub fn kind(self) -> ParcelKind {
        if self == ResidentialClass::LandOnly {
            ParcelKind::Land
        } else {
            ParcelKind::Structure
        }
    }
}

/// Planar coordinates in a local projection (meters), or lon/lat degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parcel {
    pub id: ParcelId,
    pub kind: ParcelKind,
    pub location: Location,
    pub neighborhood_id: String,
    /// Appraised value in thousands of dollars.
    pub property_value: f64,
    pub flood_risk: FloodRisk,
    pub residential_class: ResidentialClass,
}

impl Parcel {
    /// Checks the per-parcel invariants (kind/class agreement, non-negative value).
    pub fn validate(&self) -> Result<(), String> {
        if self.residential_class.kind() != self.kind {
            return Err(format!(
                "kind {} disagrees with residential class {}",
                self.kind,
                self.residential_class.as_str()
            ));
        }
        if !(self.property_value >= 0.0) || !self.property_value.is_finite() {
            return Err(format!("property value {} must be >= 0", self.property_value));
        }
        if !self.location.x.is_finite() || !self.location.y.is_finite() {
            return Err("location must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum IncidentCategory {
    Crime,
    DrugCrime,
    CodeViolation,
    TaxDelinquency,
    SpecialAssessment,
    Fire,
}

impl IncidentCategory {
    pub const ALL: [IncidentCategory; 6] = [
        IncidentCategory::Crime,
        IncidentCategory::DrugCrime,
        IncidentCategory::CodeViolation,
        IncidentCategory::TaxDelinquency,
        IncidentCategory::SpecialAssessment,
        IncidentCategory::Fire,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            IncidentCategory::Crime => "Crime",
            IncidentCategory::DrugCrime => "DrugCrime",
            IncidentCategory::CodeViolation => "CodeViolation",
            IncidentCategory::TaxDelinquency => "TaxDelinquency",
            IncidentCategory::SpecialAssessment => "SpecialAssessment",
            IncidentCategory::Fire => "Fire",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "crime" => Some(IncidentCategory::Crime),
            "drugcrime" => Some(IncidentCategory::DrugCrime),
            "codeviolation" => Some(IncidentCategory::CodeViolation),
            "taxdelinquency" | "tax" => Some(IncidentCategory::TaxDelinquency),
            "specialassessment" => Some(IncidentCategory::SpecialAssessment),
            "fire" => Some(IncidentCategory::Fire),
            _ => None,
        }
    }

    pub fn carries_amount(self) -> bool {
        matches!(
            self,
            IncidentCategory::TaxDelinquency | IncidentCategory::SpecialAssessment
        )
    }
}

impl fmt::Display for IncidentCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Code-violation subtypes that indicate VAD conditions. They drive the
/// rule-derived labels of the simple baseline model.
pub const VAD_CODE_SUBTYPES: [&str; 4] = [
    "Condemnation",
    "Vacant Property Clean/Mow",
    "Unsafe Secure",
    "Unsafe Demolition",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidentRecord {
    pub parcel_id: ParcelId,
    pub category: IncidentCategory,
    pub subtype: String,
    pub date: NaiveDate,
    /// Dollars; non-zero only for tax and special-assessment records.
    pub amount: f64,
    /// Meaningful for code violations only.
    pub active: bool,
}

impl IncidentRecord {
    pub fn validate(&self) -> Result<(), String> {
        if !self.amount.is_finite() || self.amount < 0.0 {
            return Err(format!("amount {} must be >= 0", self.amount));
        }
        if self.amount > 0.0 && !self.category.carries_amount() {
            return Err(format!(
                "amount {} not allowed for category {}",
                self.amount, self.category
            ));
        }
        Ok(())
    }

    pub fn is_vad_code_violation(&self) -> bool {
        self.category == IncidentCategory::CodeViolation
            && self.active
            && VAD_CODE_SUBTYPES
                .iter()
                .any(|s| s.eq_ignore_ascii_case(self.subtype.trim()))
    }
}

/// Number of model inputs.
pub const N_FEATURES: usize = 7;

/// Column names in the fixed export order.
pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "crime_w",
    "drug_crime_w",
    "code_violation_w",
    "delinquent_tax",
    "delinquent_years",
    "unpaid_special_pct",
    "property_value",
];

pub const CRIME: usize = 0;
pub const DRUG_CRIME: usize = 1;
pub const CODE_VIOLATION: usize = 2;
pub const DELINQUENT_TAX: usize = 3;
pub const DELINQUENT_YEARS: usize = 4;
pub const UNPAID_SPECIAL_PCT: usize = 5;
pub const PROPERTY_VALUE: usize = 6;

/// The seven model inputs of one parcel.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureVector {
    pub crime_w: f64,
    pub drug_crime_w: f64,
    pub code_violation_w: f64,
    pub delinquent_tax: f64,
    pub delinquent_years: u32,
    pub unpaid_special_pct: f64,
    pub property_value: f64,
}

impl FeatureVector {
    pub fn to_array(&self) -> [f64; N_FEATURES] {
        [
            self.crime_w,
            self.drug_crime_w,
            self.code_violation_w,
            self.delinquent_tax,
            f64::from(self.delinquent_years),
            self.unpaid_special_pct,
            self.property_value,
        ]
    }

    pub fn get(&self, index: usize) -> f64 {
        self.to_array()[index]
    }

    /// Values of the given columns, in the given order.
    pub fn project(&self, columns: &[usize]) -> Vec<f64> {
        let all = self.to_array();
        columns.iter().map(|&c| all[c]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodStats {
    pub median_income: f64,
    pub pct_black: f64,
    pub call_311_count: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub parcels: Vec<Parcel>,
    pub incidents: Vec<IncidentRecord>,
    pub features: BTreeMap<ParcelId, FeatureVector>,
    pub neighborhood_stats: BTreeMap<String, NeighborhoodStats>,
    #[serde(skip)]
    index: BTreeMap<ParcelId, usize>,
    #[serde(skip)]
    incident_index: BTreeMap<ParcelId, Vec<usize>>,
}

impl Dataset {
    /// Builds a dataset, checking id uniqueness and that every incident
    /// resolves to a parcel.
    pub fn new(parcels: Vec<Parcel>, incidents: Vec<IncidentRecord>) -> Result<Self, IngestError> {
        let mut ds = Dataset {
            parcels,
            incidents,
            ..Default::default()
        };
        ds.reindex()?;
        Ok(ds)
    }

    fn reindex(&mut self) -> Result<(), IngestError> {
        self.index.clear();
        for (i, p) in self.parcels.iter().enumerate() {
            if self.index.insert(p.id.clone(), i).is_some() {
                return Err(IngestError::DuplicateId(p.id.0.clone()));
            }
        }
        self.incident_index.clear();
        for (i, inc) in self.incidents.iter().enumerate() {
            if !self.index.contains_key(&inc.parcel_id) {
                return Err(IngestError::UnresolvedParcel(inc.parcel_id.0.clone()));
            }
            self.incident_index
                .entry(inc.parcel_id.clone())
                .or_default()
                .push(i);
        }
        Ok(())
    }

    /// Restores lookup indices after deserialization.
    pub fn restore_indices(&mut self) -> Result<(), IngestError> {
        self.reindex()
    }

    pub fn with_neighborhood_stats(mut self, stats: BTreeMap<String, NeighborhoodStats>) -> Self {
        self.neighborhood_stats = stats;
        self
    }

    pub fn parcel(&self, id: &ParcelId) -> Option<&Parcel> {
        self.index.get(id).map(|&i| &self.parcels[i])
    }

    pub fn contains(&self, id: &ParcelId) -> bool {
        self.index.contains_key(id)
    }

    pub fn parcel_ids(&self) -> BTreeSet<ParcelId> {
        self.index.keys().cloned().collect()
    }

    pub fn incidents_of(&self, id: &ParcelId) -> Vec<&IncidentRecord> {
        self.incident_index
            .get(id)
            .map(|ix| ix.iter().map(|&i| &self.incidents[i]).collect())
            .unwrap_or_default()
    }

    pub fn feature(&self, id: &ParcelId) -> Option<&FeatureVector> {
        self.features.get(id)
    }

    /// Computes feature vectors for every parcel.
    pub fn compute_features(&mut self, cfg: &WeightConfig) -> Result<(), FeatureError> {
        self.features = compute_all_features(self, cfg)?;
        Ok(())
    }

    pub fn kind_of(&self, id: &ParcelId) -> Option<ParcelKind> {
        self.parcel(id).map(|p| p.kind)
    }
}
