mod support;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vadecide_core::domain::{candidate_filter, Dataset, FilterConfig, ParcelId};
use vadecide_core::forest::{fit_tree, ForestParams};
use vadecide_core::sampler::{diversity_sample, uncertainty_sample};
use vadecide_core::synth::{generate_city, CityConfig};
use vadecide_core::util::rng_for;

use support::*;

fn cart_matches(depth: Option<usize>, cases: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xCA27 + depth.unwrap_or(99) as u64);
    for case in 0..cases {
        let (rows, labels) = random_small_dataset(&mut rng);
        let data = to_training(&rows, &labels);
        let params = ForestParams {
            max_depth: depth,
            ..ForestParams::audit_tree(2)
        };
        let all: Vec<usize> = (0..rows.len()).collect();
        let got = fit_tree(&data, &all, &params, &mut rng_for(case, 0)).unwrap();
        let want = oracle_tree(&rows, &labels, &all, 0, depth);
        assert_eq!(
            split_sequence(&got),
            split_sequence(&want),
            "case {case}: rows {rows:?} labels {labels:?}"
        );
        assert_eq!(got, want, "case {case}: leaf counts differ");
    }
}

#[test]
fn cart_matches_brute_force_at_depth_two() {
    cart_matches(Some(2), 500);
}

#[test]
fn cart_matches_brute_force_unbounded() {
    cart_matches(None, 500);
}

#[test]
fn bootstrap_duplicates_count_as_rows() {
    let rows = vec![vec![0.0, 1.0], vec![1.0, 1.0], vec![2.0, 0.0], vec![3.0, 0.0]];
    let labels = [false, true, true, false];
    let data = to_training(&rows, &labels);
    let sample = [0, 0, 1, 2, 2, 2, 3];
    let got = fit_tree(&data, &sample, &ForestParams::audit_tree(2), &mut rng_for(1, 0)).unwrap();
    let want = oracle_tree(&rows, &labels, &sample, 0, None);
    assert_eq!(got, want);
}

#[test]
fn uncertainty_matches_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0C7A);
    let ds = Dataset::default();
    for _ in 0..200 {
        let size = rng.random_range(1..80);
        let coarse = rng.random_bool(0.5);
        let scored: BTreeMap<ParcelId, f64> = (0..size)
            .map(|i| {
                let p = if coarse {
                    f64::from(rng.random_range(0..=4u8)) * 0.25
                } else {
                    rng.random()
                };
                (ParcelId::new(format!("P{:03}", rng.random_range(0..1000) * 100 + i)), p)
            })
            .collect();
        let pool: BTreeSet<ParcelId> = scored.keys().cloned().collect();
        let n = rng.random_range(0..=pool.len());
        let got = uncertainty_sample(&pool, &ds, Some(&scored), n).unwrap();
        assert_eq!(got, uncertainty_oracle(&scored, n));
    }
}

#[test]
fn diversity_reaches_every_neighborhood() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xD1BE);
    for case in 0..100 {
        let n_nb = rng.random_range(2..=12);
        let cfg = CityConfig {
            n_parcels: rng.random_range(n_nb * 8..=400),
            n_neighborhoods: n_nb,
            seed: rng.random(),
            ..CityConfig::default()
        };
        let (ds, _) = generate_city(&cfg).unwrap();
        let pool = candidate_filter(&ds, &FilterConfig::default());
        let hoods: BTreeSet<&str> = pool
            .iter()
            .map(|id| ds.parcel(id).unwrap().neighborhood_id.as_str())
            .collect();
        let n = rng.random_range(hoods.len()..=pool.len().min(hoods.len() * 3));
        let got = diversity_sample(&pool, &ds, n, case).unwrap();
        assert_eq!(got.len(), n);
        assert_eq!(got.iter().collect::<BTreeSet<_>>().len(), n);
        let covered: BTreeSet<&str> = got
            .iter()
            .map(|id| ds.parcel(id).unwrap().neighborhood_id.as_str())
            .collect();
        assert_eq!(covered, hoods, "case {case}: n={n}");
    }
}
