//! Labeling batch composition over the unlabeled candidate pool.
//!
//! Three strategies feed a batch: uniform random draws, uncertainty
//! sampling (probabilities nearest 0.5 under the current model) and
//! diversity sampling (neighborhood stratification followed by k-means in
//! standardized feature space). [`compose_batch`] mixes them by fraction.

mod diversity;

use std::collections::{BTreeMap, BTreeSet};
use std::io;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Dataset, ParcelId};
use crate::forest::{Forest, KindForests};
use crate::util::rng_for;

pub use diversity::{allocate_by_neighborhood, diversity_sample, KMEANS_MAX_ITER};

const RANDOM_STREAM: u64 = 0x5A4D;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("requested {requested} parcels but the pool holds {available}")]
    PoolTooSmall { requested: usize, available: usize },
    #[error("uncertainty sampling needs a trained model")]
    UntrainedModel,
    #[error("the pool is empty")]
    EmptyPool,
    #[error("invalid sampling mix: {0}")]
    MixInvalid(String),
    #[error("parcel {0} has no feature vector")]
    MissingFeatures(ParcelId),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Strategy {
    Random,
    Uncertainty,
    Diversity,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Uncertainty => "uncertainty",
            Strategy::Diversity => "diversity",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingBatch {
    pub batch_id: String,
    pub round: u32,
    pub parcel_ids: Vec<ParcelId>,
    pub strategy_tags: BTreeMap<ParcelId, Strategy>,
    pub created_from_model: Option<String>,
}

impl SamplingBatch {
    pub fn len(&self) -> usize {
        self.parcel_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parcel_ids.is_empty()
    }

    pub fn count(&self, s: Strategy) -> usize {
        self.strategy_tags.values().filter(|t| **t == s).count()
    }

    /// One row per parcel: `batch_id,round,position,parcel_id,strategy`.
    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<(), SamplerError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["batch_id", "round", "position", "parcel_id", "strategy"])?;
        for (i, id) in self.parcel_ids.iter().enumerate() {
            out.write_record([
                self.batch_id.as_str(),
                &self.round.to_string(),
                &i.to_string(),
                id.as_str(),
                self.strategy_tags[id].as_str(),
            ])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, SamplerError> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Strategy fractions; must be nonnegative and sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mix {
    pub random: f64,
    pub uncertainty: f64,
    pub diversity: f64,
}

impl Mix {
    pub fn new(random: f64, uncertainty: f64, diversity: f64) -> Result<Self, SamplerError> {
        let m = Mix {
            random,
            uncertainty,
            diversity,
        };
        m.validate()?;
        Ok(m)
    }

    /// 50/0/50 before any model exists, 30/50/20 afterwards.
    pub fn default_for_round(round: u32) -> Self {
        if round <= 1 {
            Mix {
                random: 0.5,
                uncertainty: 0.0,
                diversity: 0.5,
            }
        } else {
            Mix {
                random: 0.3,
                uncertainty: 0.5,
                diversity: 0.2,
            }
        }
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        let parts = [self.random, self.uncertainty, self.diversity];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
            return Err(SamplerError::MixInvalid(format!(
                "fractions must lie in [0, 1], got {parts:?}"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(SamplerError::MixInvalid(format!("fractions sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Integer counts `(uncertainty, diversity, random)` summing to `n`,
    /// by largest remainder; ties favor uncertainty, then diversity.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let quotas = [self.uncertainty, self.diversity, self.random].map(|f| f * n as f64);
        let mut c = quotas.map(|q| q.floor() as usize);
        let mut left = n.saturating_sub(c.iter().sum());
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| (quotas[b] - c[b] as f64).total_cmp(&(quotas[a] - c[a] as f64)).then(a.cmp(&b)));
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            if quotas[i] > 0.0 {
                c[i] += 1;
                left -= 1;
            }
        }
        (c[0], c[1], c[2])
    }
}

/// A model that maps pool parcels to a VAD probability.
pub trait ProbabilityModel: Sync {
    /// `None` when the model cannot score the parcel.
    fn probability(&self, ds: &Dataset, id: &ParcelId) -> Option<f64>;
}

impl ProbabilityModel for Forest {
    fn probability(&self, ds: &Dataset, id: &ParcelId) -> Option<f64> {
        ds.feature(id).map(|f| self.predict_features(f))
    }
}

impl ProbabilityModel for KindForests {
    fn probability(&self, ds: &Dataset, id: &ParcelId) -> Option<f64> {
        self.predict(ds.kind_of(id)?, ds.feature(id)?)
    }
}

/// Precomputed probabilities, keyed by parcel.
impl ProbabilityModel for BTreeMap<ParcelId, f64> {
    fn probability(&self, _ds: &Dataset, id: &ParcelId) -> Option<f64> {
        self.get(id).copied()
    }
}

fn check_size(pool: usize, n: usize) -> Result<(), SamplerError> {
    if n > pool {
        return Err(SamplerError::PoolTooSmall {
            requested: n,
            available: pool,
        });
    }
    Ok(())
}

/// Uniform draw without replacement, in draw order. The draw is a forward
/// Fisher-Yates, so a smaller `n` with the same seed yields a prefix.
pub fn random_sample(pool: &BTreeSet<ParcelId>, n: usize, seed: u64) -> Result<Vec<ParcelId>, SamplerError> {
    check_size(pool.len(), n)?;
    let mut items: Vec<&ParcelId> = pool.iter().collect();
    let mut rng = rng_for(seed, RANDOM_STREAM);
    for i in 0..n {
        let j = rng.random_range(i..items.len());
        items.swap(i, j);
    }
    Ok(items.into_iter().take(n).cloned().collect())
}

fn uncertainty_key(p: f64) -> f64 {
    (p - 0.5).abs()
}

/// The `n` ids with the smallest `|p - 0.5|`, most uncertain first; ties
/// by ascending id.
pub fn rank_by_uncertainty(scored: &[(ParcelId, f64)], n: usize) -> Vec<ParcelId> {
    let n = n.min(scored.len());
    if n == 0 {
        return Vec::new();
    }
    let mut v: Vec<(f64, &ParcelId)> = scored.iter().map(|(id, p)| (uncertainty_key(*p), id)).collect();
    let cmp = |a: &(f64, &ParcelId), b: &(f64, &ParcelId)| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1));
    if n < v.len() {
        v.select_nth_unstable_by(n - 1, cmp);
        v.truncate(n);
    }
    v.sort_by(cmp);
    v.into_iter().map(|(_, id)| id.clone()).collect()
}

pub fn uncertainty_sample(
    pool: &BTreeSet<ParcelId>,
    ds: &Dataset,
    model: Option<&dyn ProbabilityModel>,
    n: usize,
) -> Result<Vec<ParcelId>, SamplerError> {
    let model = model.ok_or(SamplerError::UntrainedModel)?;
    check_size(pool.len(), n)?;
    let ids: Vec<&ParcelId> = pool.iter().collect();
    let scored: Vec<(ParcelId, f64)> = ids
        .par_iter()
        .map(|id| {
            model
                .probability(ds, id)
                .map(|p| ((*id).clone(), p))
                .ok_or(SamplerError::UntrainedModel)
        })
        .collect::<Result<_, _>>()?;
    Ok(rank_by_uncertainty(&scored, n))
}

/// Mixes the three strategies into one batch of exactly `n` unique ids.
///
/// Each strategy draws from the whole pool; duplicates are dropped in the
/// priority order uncertainty, diversity, random, and the gap is refilled
/// by continuing the random draw.
pub fn compose_batch(
    pool: &BTreeSet<ParcelId>,
    ds: &Dataset,
    model: Option<&dyn ProbabilityModel>,
    n: usize,
    mix: &Mix,
    seed: u64,
    round: u32,
) -> Result<SamplingBatch, SamplerError> {
    mix.validate()?;
    check_size(pool.len(), n)?;
    let (n_u, n_d, _) = mix.counts(n);
    if n_u > 0 && model.is_none() {
        return Err(SamplerError::MixInvalid(
            "an uncertainty fraction needs a trained model".into(),
        ));
    }

    let mut ids = Vec::with_capacity(n);
    let mut tags = BTreeMap::new();
    let mut take = |id: ParcelId, s: Strategy, ids: &mut Vec<ParcelId>| {
        if ids.len() < n && !tags.contains_key(&id) {
            tags.insert(id.clone(), s);
            ids.push(id);
        }
    };
    if n_u > 0 {
        for id in uncertainty_sample(pool, ds, model, n_u)? {
            take(id, Strategy::Uncertainty, &mut ids);
        }
    }
    if n_d > 0 {
        for id in diversity_sample(pool, ds, n_d, seed)? {
            take(id, Strategy::Diversity, &mut ids);
        }
    }
    for id in random_sample(pool, pool.len(), seed)? {
        if ids.len() == n {
            break;
        }
        take(id, Strategy::Random, &mut ids);
    }

    Ok(SamplingBatch {
        batch_id: format!("r{round}"),
        round,
        parcel_ids: ids,
        strategy_tags: tags,
        created_from_model: None,
    })
}
