use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{Dataset, FloodRisk, IncidentCategory, ParcelId, ResidentialClass};

/// Candidate-pool criteria: residential class, at least one trigger record,
/// and acceptable flood risk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub classes: Vec<ResidentialClass>,
    pub trigger_categories: Vec<IncidentCategory>,
    pub flood_risks: Vec<FloodRisk>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            classes: vec![
                ResidentialClass::SingleFamily,
                ResidentialClass::TwoToFourFamily,
                ResidentialClass::Townhouse,
                ResidentialClass::LandOnly,
            ],
            trigger_categories: vec![
                IncidentCategory::DrugCrime,
                IncidentCategory::TaxDelinquency,
                IncidentCategory::SpecialAssessment,
                IncidentCategory::CodeViolation,
                IncidentCategory::Fire,
            ],
            flood_risks: vec![FloodRisk::None, FloodRisk::Low],
        }
    }
}

pub fn candidate_filter(ds: &Dataset, criteria: &FilterConfig) -> BTreeSet<ParcelId> {
    ds.parcels
        .iter()
        .filter(|p| criteria.classes.contains(&p.residential_class))
        .filter(|p| criteria.flood_risks.contains(&p.flood_risk))
        .filter(|p| {
            ds.incidents_of(&p.id)
                .iter()
                .any(|i| criteria.trigger_categories.contains(&i.category))
        })
        .map(|p| p.id.clone())
        .collect()
}
