//! Synthetic municipalities with planted ground truth.
//!
//! [`generate_city`] lays neighborhoods on a square grid, draws a latent VAD
//! score per parcel from a logistic model over seven standard-normal drivers
//! plus a neighborhood random effect, and then emits incident records whose
//! rates depend on the drawn status. Code violations in the lowest-income
//! tercile are deleted with probability `reporting_bias`, which is what the
//! field survey, the simple baseline and the 311 probe are sensitive to.
//!
//! The [`GroundTruth`] is written to its own file and never read by model
//! code. Only evaluators and the scripted sources in [`validation`] look at it.

mod validation;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use chrono::NaiveDate;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    write_incidents_csv, write_neighborhoods_csv, write_parcels_csv, Dataset, FloodRisk,
    IncidentCategory, IncidentRecord, IngestError, Location, NeighborhoodStats, Parcel, ParcelId,
    ParcelKind, ResidentialClass, WeightConfig, N_FEATURES, VAD_CODE_SUBTYPES,
};
use crate::util::{mean, mix_seed, rng_for, std_dev};

pub use validation::{
    scripted_annotator, simulate_field_survey, simulate_usps, FieldSurvey, Persona, SurveyConfig,
};

const LAYOUT_STREAM: u64 = 1;
const INCIDENT_STREAM: u64 = 2;
const SUPPRESSION_STREAM: u64 = 3;
const NEIGHBORHOOD_STREAM: u64 = 4;
const CALLS_STREAM: u64 = 5;

pub const OTHER_CODE_SUBTYPES: [&str; 3] = ["Overgrown Yard", "Trash and Debris", "Inoperable Vehicle"];
const CRIME_SUBTYPES: [&str; 3] = ["Burglary", "Theft", "Assault"];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid city config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("feature computation failed: {0}")]
    Features(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CityConfig {
    pub n_parcels: usize,
    pub n_neighborhoods: usize,
    pub structure_fraction: f64,
    /// Neighborhood median incomes are drawn from a normal with these
    /// parameters and floored at `income_floor`.
    pub income_mean: f64,
    pub income_sd: f64,
    pub income_floor: f64,
    /// Weight of the neighborhood random effect in the latent score.
    pub cluster_strength: f64,
    pub base_rate: f64,
    /// Logistic coefficients on the seven drivers, in feature order.
    pub coefficients: [f64; N_FEATURES],
    /// Probability that a code violation in a low-income neighborhood is
    /// never recorded.
    pub reporting_bias: f64,
    pub high_flood_fraction: f64,
    /// Share of structures whose residential class is `Other`.
    pub other_class_fraction: f64,
    /// Side of one square neighborhood cell, in meters.
    pub cell_size: f64,
    pub seed: u64,
}

impl Default for CityConfig {
    fn default() -> Self {
        CityConfig {
            n_parcels: 5000,
            n_neighborhoods: 20,
            structure_fraction: 0.6,
            income_mean: 45_000.0,
            income_sd: 15_000.0,
            income_floor: 12_000.0,
            cluster_strength: 0.5,
            base_rate: 0.15,
            coefficients: [0.8, 0.6, 0.7, 0.8, 0.6, 0.4, -0.6],
            reporting_bias: 0.5,
            high_flood_fraction: 0.1,
            other_class_fraction: 0.05,
            cell_size: 1000.0,
            seed: 7,
        }
    }
}

impl CityConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::ConfigInvalid(m));
        if self.n_neighborhoods == 0 {
            return bad("n_neighborhoods must be >= 1".into());
        }
        if self.n_parcels < self.n_neighborhoods {
            return bad(format!(
                "n_parcels {} is below n_neighborhoods {}",
                self.n_parcels, self.n_neighborhoods
            ));
        }
        for (name, v) in [
            ("structure_fraction", self.structure_fraction),
            ("cluster_strength", self.cluster_strength),
            ("reporting_bias", self.reporting_bias),
            ("high_flood_fraction", self.high_flood_fraction),
            ("other_class_fraction", self.other_class_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if !(self.base_rate > 0.0 && self.base_rate < 1.0) {
            return bad(format!("base_rate must be in (0, 1), got {}", self.base_rate));
        }
        if !(self.income_sd >= 0.0) || !self.income_mean.is_finite() || !(self.income_floor > 0.0) {
            return bad("income parameters must be finite with sd >= 0 and floor > 0".into());
        }
        if !(self.cell_size > 0.0) {
            return bad(format!("cell_size must be > 0, got {}", self.cell_size));
        }
        if self.coefficients.iter().any(|c| !c.is_finite()) {
            return bad("coefficients must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParcelTruth {
    pub is_vad: bool,
    pub latent_score: f64,
    /// Code violations deleted by the reporting bias.
    pub suppressed_violations: u32,
    /// Code violations that made it into the records.
    pub visible_violations: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodTruth {
    pub median_income: f64,
    pub pct_black: f64,
    pub random_effect: f64,
    pub low_income: bool,
    pub n_parcels: usize,
    pub n_vad: usize,
    pub suppressed_violations: u32,
    /// 311 calls the neighborhood would have produced at full reporting
    /// minus what it produced: suppressed violations plus the engagement gap.
    pub reporting_deficit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub parcels: BTreeMap<ParcelId, ParcelTruth>,
    pub neighborhoods: BTreeMap<String, NeighborhoodTruth>,
}

impl GroundTruth {
    pub fn is_vad(&self, id: &ParcelId) -> Option<bool> {
        self.parcels.get(id).map(|t| t.is_vad)
    }

    pub fn latent_score(&self, id: &ParcelId) -> Option<f64> {
        self.parcels.get(id).map(|t| t.latent_score)
    }

    pub fn vad_ids(&self) -> BTreeSet<ParcelId> {
        self.parcels
            .iter()
            .filter(|(_, t)| t.is_vad)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn vad_rate(&self) -> f64 {
        if self.parcels.is_empty() {
            return 0.0;
        }
        self.parcels.values().filter(|t| t.is_vad).count() as f64 / self.parcels.len() as f64
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn poisson(rng: &mut ChaCha8Rng, lambda: f64) -> u32 {
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).map(|d| d.sample(rng) as u32).unwrap_or(0)
}

fn lognormal(rng: &mut ChaCha8Rng, median: f64, sigma: f64) -> f64 {
    let d = LogNormal::new(median.ln(), sigma).expect("finite lognormal parameters");
    (d.sample(rng) * 100.0).round() / 100.0
}

fn date_in(rng: &mut ChaCha8Rng, first_year: i32, last_year: i32) -> NaiveDate {
    let year = rng.random_range(first_year..=last_year);
    let day = rng.random_range(1..=365);
    NaiveDate::from_yo_opt(year, day).expect("day 1..=365 exists every year")
}

/// Intercept that makes the mean of `sigmoid(b + s_i)` equal `target`.
fn calibrate_intercept(scores: &[f64], target: f64) -> f64 {
    let rate = |b: f64| scores.iter().map(|s| sigmoid(b + s)).sum::<f64>() / scores.len() as f64;
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

struct Draft {
    kind: ParcelKind,
    class: ResidentialClass,
    flood: FloodRisk,
    neighborhood: usize,
    location: Location,
    drivers: [f64; N_FEATURES],
    value_noise: f64,
}

struct Neighborhood {
    id: String,
    income: f64,
    income_z: f64,
    pct_black: f64,
    effect: f64,
    low_income: bool,
}

fn neighborhood_id(i: usize) -> String {
    format!("N{:02}", i + 1)
}

fn parcel_id(i: usize) -> ParcelId {
    ParcelId(format!("P{:05}", i + 1))
}

fn draw_neighborhoods(cfg: &CityConfig) -> Vec<Neighborhood> {
    let n = cfg.n_neighborhoods;
    let mut rng = rng_for(cfg.seed, NEIGHBORHOOD_STREAM);
    let raw: Vec<(f64, f64, f64)> = (0..n)
        .map(|_| {
            let income = (cfg.income_mean + cfg.income_sd * normal(&mut rng)).max(cfg.income_floor);
            (income, normal(&mut rng), normal(&mut rng))
        })
        .collect();
    let incomes: Vec<f64> = raw.iter().map(|r| r.0).collect();
    let (m, s) = (mean(&incomes), std_dev(&incomes));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| incomes[a].total_cmp(&incomes[b]).then(a.cmp(&b)));
    let n_low = n.div_ceil(3);
    let low: BTreeSet<usize> = order[..n_low].iter().copied().collect();
    raw.iter()
        .enumerate()
        .map(|(i, &(income, e1, e2))| {
            let income_z = if s > 0.0 { (income - m) / s } else { 0.0 };
            Neighborhood {
                id: neighborhood_id(i),
                income,
                income_z,
                pct_black: (0.45 - 0.22 * income_z + 0.12 * e1).clamp(0.01, 0.99),
                effect: -0.6 * income_z + 0.8 * e2,
                low_income: low.contains(&i),
            }
        })
        .collect()
}

fn draw_layout(cfg: &CityConfig, i: usize) -> Draft {
    let mut rng = rng_for(mix_seed(cfg.seed, i as u64), LAYOUT_STREAM);
    let n_nb = cfg.n_neighborhoods;
    let neighborhood = if i < n_nb { i } else { rng.random_range(0..n_nb) };
    let side = (n_nb as f64).sqrt().ceil() as usize;
    let (cx, cy) = ((neighborhood % side) as f64, (neighborhood / side) as f64);
    let location = Location {
        x: ((cx + rng.random::<f64>()) * cfg.cell_size * 100.0).round() / 100.0,
        y: ((cy + rng.random::<f64>()) * cfg.cell_size * 100.0).round() / 100.0,
    };
    let (kind, class) = if rng.random::<f64>() < cfg.structure_fraction {
        let class = if rng.random::<f64>() < cfg.other_class_fraction {
            ResidentialClass::Other
        } else {
            match rng.random_range(0..10) {
                0..=5 => ResidentialClass::SingleFamily,
                6..=7 => ResidentialClass::TwoToFourFamily,
                _ => ResidentialClass::Townhouse,
            }
        };
        (ParcelKind::Structure, class)
    } else {
        (ParcelKind::Land, ResidentialClass::LandOnly)
    };
    let u: f64 = rng.random();
    let flood = if u < cfg.high_flood_fraction {
        FloodRisk::High
    } else if u < cfg.high_flood_fraction + (1.0 - cfg.high_flood_fraction) / 3.0 {
        FloodRisk::Low
    } else {
        FloodRisk::None
    };
    let mut drivers = [0.0; N_FEATURES];
    for d in drivers.iter_mut() {
        *d = normal(&mut rng);
    }
    Draft {
        kind,
        class,
        flood,
        neighborhood,
        location,
        drivers,
        value_noise: normal(&mut rng),
    }
}

/// Incidents for one parcel, before any suppression.
fn draw_incidents(seed: u64, i: usize, id: &ParcelId, z: &[f64; N_FEATURES], vad: bool) -> Vec<IncidentRecord> {
    let mut rng = rng_for(mix_seed(seed, i as u64), INCIDENT_STREAM);
    let mut out = Vec::new();
    let v = |a: f64, b: f64| if vad { a } else { b };
    let push = |out: &mut Vec<IncidentRecord>, cat, subtype: &str, date, amount, active| {
        out.push(IncidentRecord {
            parcel_id: id.clone(),
            category: cat,
            subtype: subtype.to_string(),
            date,
            amount,
            active,
        })
    };

    for _ in 0..poisson(&mut rng, 0.4 * (0.6 * z[0]).exp() * v(2.5, 1.0)) {
        let st = CRIME_SUBTYPES[rng.random_range(0..CRIME_SUBTYPES.len())];
        let d = date_in(&mut rng, 2010, 2019);
        push(&mut out, IncidentCategory::Crime, st, d, 0.0, false);
    }
    for _ in 0..poisson(&mut rng, 0.15 * (0.6 * z[1]).exp() * v(3.0, 1.0)) {
        let d = date_in(&mut rng, 2010, 2019);
        push(&mut out, IncidentCategory::DrugCrime, "Narcotics", d, 0.0, false);
    }
    for _ in 0..poisson(&mut rng, v(0.9, 0.04) * (0.4 * z[2]).exp()) {
        let st = VAD_CODE_SUBTYPES[rng.random_range(0..VAD_CODE_SUBTYPES.len())];
        let d = date_in(&mut rng, 2012, 2019);
        let active = rng.random::<f64>() < v(0.75, 0.5);
        push(&mut out, IncidentCategory::CodeViolation, st, d, 0.0, active);
    }
    for _ in 0..poisson(&mut rng, 0.3 * (0.4 * z[2]).exp() * v(1.5, 1.0)) {
        let st = OTHER_CODE_SUBTYPES[rng.random_range(0..OTHER_CODE_SUBTYPES.len())];
        let d = date_in(&mut rng, 2012, 2019);
        let active = rng.random::<f64>() < 0.5;
        push(&mut out, IncidentCategory::CodeViolation, st, d, 0.0, active);
    }
    let p_tax = sigmoid(-3.0 + 0.6 * z[3] + 0.5 * z[4] + v(1.8, 0.0));
    let p_special = sigmoid(-3.5 + 0.6 * z[5] + v(1.2, 0.0));
    for year in 2010..=2019 {
        if rng.random::<f64>() < p_tax {
            let amount = lognormal(&mut rng, 600.0 * (0.3 * z[3]).exp(), 0.5);
            let d = date_in(&mut rng, year, year);
            push(&mut out, IncidentCategory::TaxDelinquency, "Property Tax", d, amount, false);
        }
        if rng.random::<f64>() < p_special {
            let amount = lognormal(&mut rng, 250.0, 0.5);
            let d = date_in(&mut rng, year, year);
            push(&mut out, IncidentCategory::SpecialAssessment, "Special Assessment", d, amount, false);
        }
    }
    for _ in 0..poisson(&mut rng, 0.02 * v(5.0, 1.0)) {
        let d = date_in(&mut rng, 2010, 2019);
        push(&mut out, IncidentCategory::Fire, "Structure Fire", d, 0.0, false);
    }
    out
}

/// Builds the dataset (features computed with the default weights) and its
/// ground truth. Deterministic in `cfg.seed`.
pub fn generate_city(cfg: &CityConfig) -> Result<(Dataset, GroundTruth), SynthError> {
    cfg.validate()?;
    let hoods = draw_neighborhoods(cfg);
    let drafts: Vec<Draft> = (0..cfg.n_parcels).into_par_iter().map(|i| draw_layout(cfg, i)).collect();

    let raw_scores: Vec<f64> = drafts
        .iter()
        .map(|d| {
            let lin: f64 = d.drivers.iter().zip(&cfg.coefficients).map(|(z, c)| z * c).sum();
            lin + cfg.cluster_strength * hoods[d.neighborhood].effect
        })
        .collect();
    let intercept = calibrate_intercept(&raw_scores, cfg.base_rate);

    struct Drawn {
        parcel: Parcel,
        truth: ParcelTruth,
        incidents: Vec<IncidentRecord>,
    }
    let drawn: Vec<Drawn> = drafts
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            let id = parcel_id(i);
            let latent = sigmoid(intercept + raw_scores[i]);
            let mut status_rng = rng_for(mix_seed(cfg.seed, i as u64), INCIDENT_STREAM + 100);
            let is_vad = status_rng.random::<f64>() < latent;
            let mut incidents = draw_incidents(cfg.seed, i, &id, &d.drivers, is_vad);

            let hood = &hoods[d.neighborhood];
            let mut suppressed = 0;
            if hood.low_income && cfg.reporting_bias > 0.0 {
                let mut rng = rng_for(mix_seed(cfg.seed, i as u64), SUPPRESSION_STREAM);
                incidents.retain(|inc| {
                    if inc.category != IncidentCategory::CodeViolation {
                        return true;
                    }
                    let drop = rng.random::<f64>() < cfg.reporting_bias;
                    suppressed += u32::from(drop);
                    !drop
                });
            }
            let visible = incidents.iter().filter(|x| x.category == IncidentCategory::CodeViolation).count() as u32;

            let mut value = hood.income / 1000.0 * 2.2 * (0.35 * d.drivers[6] + 0.15 * d.value_noise).exp();
            if is_vad {
                value *= 0.55;
            }
            if d.kind == ParcelKind::Land {
                value *= 0.25;
            }
            let parcel = Parcel {
                id,
                kind: d.kind,
                location: d.location,
                neighborhood_id: hood.id.clone(),
                property_value: (value * 100.0).round() / 100.0,
                flood_risk: d.flood,
                residential_class: d.class,
            };
            Drawn {
                parcel,
                truth: ParcelTruth {
                    is_vad,
                    latent_score: latent,
                    suppressed_violations: suppressed,
                    visible_violations: visible,
                },
                incidents,
            }
        })
        .collect();

    let mut stats = BTreeMap::new();
    let mut hood_truth = BTreeMap::new();
    let gamma = 0.8 * cfg.reporting_bias;
    let black: Vec<f64> = hoods.iter().map(|h| h.pct_black).collect();
    let (bm, bs) = (mean(&black), std_dev(&black));
    for (k, h) in hoods.iter().enumerate() {
        let members: Vec<&Drawn> = drawn.iter().filter(|d| d.parcel.neighborhood_id == h.id).collect();
        let n = members.len();
        let reported: u32 = members.iter().map(|d| d.truth.visible_violations).sum();
        let suppressed: u32 = members.iter().map(|d| d.truth.suppressed_violations).sum();
        let black_z = if bs > 0.0 { (h.pct_black - bm) / bs } else { 0.0 };
        let engagement = (gamma * (h.income_z - black_z)).exp();
        let mut rng = rng_for(mix_seed(cfg.seed, k as u64), CALLS_STREAM);
        let background = poisson(&mut rng, 0.6 * n as f64 * engagement);
        stats.insert(
            h.id.clone(),
            NeighborhoodStats {
                median_income: h.income.round(),
                pct_black: (h.pct_black * 10_000.0).round() / 10_000.0,
                call_311_count: u64::from(reported) + u64::from(background),
            },
        );
        hood_truth.insert(
            h.id.clone(),
            NeighborhoodTruth {
                median_income: h.income.round(),
                pct_black: (h.pct_black * 10_000.0).round() / 10_000.0,
                random_effect: h.effect,
                low_income: h.low_income,
                n_parcels: n,
                n_vad: members.iter().filter(|d| d.truth.is_vad).count(),
                suppressed_violations: suppressed,
                reporting_deficit: f64::from(suppressed) + 0.6 * n as f64 * (1.0 - engagement),
            },
        );
    }

    let mut parcels = Vec::with_capacity(drawn.len());
    let mut incidents = Vec::new();
    let mut truth = BTreeMap::new();
    for d in drawn {
        truth.insert(d.parcel.id.clone(), d.truth);
        parcels.push(d.parcel);
        incidents.extend(d.incidents);
    }
    let mut ds = Dataset::new(parcels, incidents)?.with_neighborhood_stats(stats);
    ds.compute_features(&WeightConfig::default())
        .map_err(|e| SynthError::Features(e.to_string()))?;
    Ok((
        ds,
        GroundTruth {
            seed: cfg.seed,
            parcels: truth,
            neighborhoods: hood_truth,
        },
    ))
}

pub const PARCELS_FILE: &str = "parcels.csv";
pub const INCIDENTS_FILE: &str = "incidents.csv";
pub const NEIGHBORHOODS_FILE: &str = "neighborhoods.csv";
pub const TRUTH_FILE: &str = "truth.json";

/// Writes the three ingestion CSVs and `truth.json` into `dir`.
pub fn write_city(dir: &Path, ds: &Dataset, truth: &GroundTruth) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir)?;
    write_parcels_csv(&ds.parcels, BufWriter::new(File::create(dir.join(PARCELS_FILE))?))?;
    write_incidents_csv(&ds.incidents, BufWriter::new(File::create(dir.join(INCIDENTS_FILE))?))?;
    write_neighborhoods_csv(
        &ds.neighborhood_stats,
        BufWriter::new(File::create(dir.join(NEIGHBORHOODS_FILE))?),
    )?;
    serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join(TRUTH_FILE))?), truth)?;
    Ok(())
}

pub fn read_truth(path: &Path) -> Result<GroundTruth, SynthError> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::CODE_VIOLATION;

    fn small(seed: u64) -> CityConfig {
        CityConfig {
            n_parcels: 1500,
            seed,
            ..CityConfig::default()
        }
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = CityConfig {
            n_parcels: 5,
            n_neighborhoods: 10,
            ..CityConfig::default()
        };
        assert!(matches!(generate_city(&cfg), Err(SynthError::ConfigInvalid(_))));
        let cfg = CityConfig {
            reporting_bias: 1.5,
            ..CityConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(SynthError::ConfigInvalid(_))));
    }

    #[test]
    fn null_model_hits_base_rate() {
        let cfg = CityConfig {
            cluster_strength: 0.0,
            reporting_bias: 0.0,
            coefficients: [0.0; N_FEATURES],
            ..CityConfig::default()
        };
        let (_, truth) = generate_city(&cfg).unwrap();
        assert!((truth.vad_rate() - 0.15).abs() <= 0.03, "rate {}", truth.vad_rate());
    }

    #[test]
    fn full_suppression_empties_low_tercile() {
        let cfg = CityConfig {
            reporting_bias: 1.0,
            ..small(3)
        };
        let (ds, truth) = generate_city(&cfg).unwrap();
        let low: BTreeSet<&String> = truth
            .neighborhoods
            .iter()
            .filter(|(_, n)| n.low_income)
            .map(|(k, _)| k)
            .collect();
        assert_eq!(low.len(), 7);
        for inc in ds.incidents.iter().filter(|i| i.category == IncidentCategory::CodeViolation) {
            let p = ds.parcel(&inc.parcel_id).unwrap();
            assert!(!low.contains(&p.neighborhood_id));
        }
    }

    #[test]
    fn same_seed_same_city() {
        let (a, ta) = generate_city(&small(11)).unwrap();
        let (b, tb) = generate_city(&small(11)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = generate_city(&small(12)).unwrap();
        assert_ne!(a.parcels, c.parcels);
    }

    #[test]
    fn every_neighborhood_populated() {
        let (ds, truth) = generate_city(&small(5)).unwrap();
        assert_eq!(truth.neighborhoods.len(), 20);
        assert!(truth.neighborhoods.values().all(|n| n.n_parcels > 0));
        assert_eq!(ds.features.len(), ds.parcels.len());
    }

    #[test]
    fn suppression_lowers_code_violations_only() {
        let base = small(21);
        let (clean, _) = generate_city(&CityConfig {
            reporting_bias: 0.0,
            ..base.clone()
        })
        .unwrap();
        let (biased, truth) = generate_city(&CityConfig {
            reporting_bias: 0.5,
            ..base
        })
        .unwrap();
        let low: BTreeSet<String> = truth
            .neighborhoods
            .iter()
            .filter(|(_, n)| n.low_income)
            .map(|(k, _)| k.clone())
            .collect();
        let avg = |ds: &Dataset, f: usize| {
            let xs: Vec<f64> = ds
                .parcels
                .iter()
                .filter(|p| low.contains(&p.neighborhood_id))
                .map(|p| ds.features[&p.id].get(f))
                .collect();
            mean(&xs)
        };
        assert!(avg(&biased, CODE_VIOLATION) < avg(&clean, CODE_VIOLATION));
        for f in (0..N_FEATURES).filter(|&f| f != CODE_VIOLATION) {
            assert_eq!(avg(&biased, f), avg(&clean, f), "feature {f}");
        }
    }

    #[test]
    fn writes_and_reads_truth() {
        let (ds, truth) = generate_city(&CityConfig {
            n_parcels: 200,
            ..CityConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_city(dir.path(), &ds, &truth).unwrap();
        assert_eq!(read_truth(&dir.path().join(TRUTH_FILE)).unwrap(), truth);
        assert!(dir.path().join(PARCELS_FILE).exists());
    }
}
