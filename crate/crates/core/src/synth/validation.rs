//! Simulated validation sources and scripted annotators.

use std::collections::BTreeSet;

use chrono::{DateTime, Utc};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::GroundTruth;
use crate::domain::{Dataset, ParcelId, ParcelKind};
use crate::forest::Label;
use crate::labels::{LabelRecord, Provenance};
use crate::util::{mix_seed, rng_for, stable_hash};

const SURVEY_STREAM: u64 = 0x5E7;
const USPS_STREAM: u64 = 0x0595;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurveyConfig {
    pub k_neighborhoods: usize,
    /// Probability that a surveyed parcel's call is flipped.
    pub visual_noise: f64,
    /// Probability of spotting a VAD parcel that has no recorded code violation.
    pub hidden_detection: f64,
    pub seed: u64,
}

impl Default for SurveyConfig {
    fn default() -> Self {
        SurveyConfig {
            k_neighborhoods: 4,
            visual_noise: 0.02,
            hidden_detection: 0.25,
            seed: 2019,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSurvey {
    pub neighborhoods: Vec<String>,
    pub surveyed: BTreeSet<ParcelId>,
    pub validation: BTreeSet<ParcelId>,
}

fn parcel_rng(seed: u64, id: &ParcelId, stream: u64) -> rand_chacha::ChaCha8Rng {
    rng_for(mix_seed(seed, stable_hash(&[id.as_str().as_bytes()])), stream)
}

/// Visits the `k` lowest-income neighborhoods. A VAD parcel is called VAD
/// when it shows a recorded code violation, and otherwise only with
/// probability `hidden_detection`. Every call is then flipped with
/// probability `visual_noise`.
pub fn simulate_field_survey(ds: &Dataset, truth: &GroundTruth, cfg: &SurveyConfig) -> FieldSurvey {
    let mut hoods: Vec<(&String, f64)> = truth
        .neighborhoods
        .iter()
        .map(|(id, n)| (id, n.median_income))
        .collect();
    hoods.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(b.0)));
    let visited: Vec<String> = hoods.iter().take(cfg.k_neighborhoods).map(|h| h.0.clone()).collect();
    let visited_set: BTreeSet<&String> = visited.iter().collect();

    let mut surveyed = BTreeSet::new();
    let mut validation = BTreeSet::new();
    for p in ds.parcels.iter().filter(|p| visited_set.contains(&p.neighborhood_id)) {
        let Some(t) = truth.parcels.get(&p.id) else { continue };
        let mut rng = parcel_rng(cfg.seed, &p.id, SURVEY_STREAM);
        let (u_detect, u_noise): (f64, f64) = (rng.random(), rng.random());
        let mut called = t.is_vad && (t.visible_violations > 0 || u_detect < cfg.hidden_detection);
        if u_noise < cfg.visual_noise {
            called = !called;
        }
        surveyed.insert(p.id.clone());
        if called {
            validation.insert(p.id.clone());
        }
    }
    FieldSurvey {
        neighborhoods: visited,
        surveyed,
        validation,
    }
}

/// Each true-VAD structure is listed with probability `recall`. Land
/// parcels never are.
pub fn simulate_usps(ds: &Dataset, truth: &GroundTruth, recall: f64, seed: u64) -> BTreeSet<ParcelId> {
    ds.parcels
        .iter()
        .filter(|p| p.kind == ParcelKind::Structure)
        .filter(|p| truth.is_vad(&p.id) == Some(true))
        .filter(|p| parcel_rng(seed, &p.id, USPS_STREAM).random::<f64>() < recall)
        .map(|p| p.id.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Persona {
    pub id: String,
    /// Probability of flipping the true label.
    pub noise: f64,
    /// Signed half-width of the borderline band around 0.5. Parcels whose
    /// latent score lies within it get VAD when positive, NotVAD when negative.
    #[serde(default)]
    pub bias: f64,
}

impl Persona {
    pub fn oracle(id: impl Into<String>) -> Self {
        Persona {
            id: id.into(),
            noise: 0.0,
            bias: 0.0,
        }
    }
}

fn unit_hash(seed: u64, persona: &str, parcel: &ParcelId) -> f64 {
    let h = mix_seed(
        seed,
        stable_hash(&[persona.as_bytes(), parcel.as_str().as_bytes()]),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Labels exactly as the persona would: truth, shifted on borderline
/// parcels by the bias, then flipped with probability `noise`. Parcels
/// missing from `truth` are skipped.
pub fn scripted_annotator(
    batch: &[ParcelId],
    truth: &GroundTruth,
    persona: &Persona,
    round: u32,
    timestamp: DateTime<Utc>,
    seed: u64,
) -> Vec<LabelRecord> {
    batch
        .iter()
        .filter_map(|id| {
            let t = truth.parcels.get(id)?;
            let mut vad = t.is_vad;
            if persona.bias != 0.0 && (t.latent_score - 0.5).abs() <= persona.bias.abs() {
                vad = persona.bias > 0.0;
            }
            if unit_hash(seed, &persona.id, id) < persona.noise {
                vad = !vad;
            }
            Some(LabelRecord::new(
                id.clone(),
                persona.id.clone(),
                Label::from_vad(vad),
                round,
                timestamp,
                Provenance::Scripted,
            ))
        })
        .collect()
}
