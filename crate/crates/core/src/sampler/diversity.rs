use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use super::{check_size, SamplerError};
use crate::domain::{Dataset, ParcelId};
use crate::util::{mix_seed, rng_for, squared_distance, stable_hash, Standardizer};

pub const KMEANS_MAX_ITER: usize = 50;

const KMEANS_STREAM: u64 = 0xD1CE;

/// Splits `n` across groups of the given sizes by largest remainder.
///
/// When `n` covers every nonempty group, each gets one pick first and the
/// rest is shared in proportion to the remaining capacity. Allocations never
/// exceed a group's size. Remainder ties go to the earlier group.
pub fn allocate_by_neighborhood(sizes: &[usize], n: usize) -> Vec<usize> {
    let nonempty = sizes.iter().filter(|s| **s > 0).count();
    let (base, capacity): (Vec<usize>, Vec<usize>) = if n >= nonempty {
        sizes.iter().map(|&s| (usize::from(s > 0), s.saturating_sub(1))).unzip()
    } else {
        sizes.iter().map(|&s| (0, s)).unzip()
    };
    let rest = n - base.iter().sum::<usize>();
    let total: usize = capacity.iter().sum();
    let mut alloc = base;
    if rest == 0 || total == 0 {
        return alloc;
    }
    // exact integer quotas rest * c / total
    let mut rems: Vec<(usize, usize)> = Vec::with_capacity(sizes.len());
    for (i, &c) in capacity.iter().enumerate() {
        let q = rest * c;
        alloc[i] += q / total;
        rems.push((q % total, i));
    }
    let mut left = n - alloc.iter().sum::<usize>();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(r, i) in &rems {
        if left == 0 {
            break;
        }
        if r > 0 {
            alloc[i] += 1;
            left -= 1;
        }
    }
    alloc
}

/// k-means++ seeding followed by Lloyd iterations. Returns centroids.
fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_for(seed, KMEANS_STREAM);
    let mut centroids: Vec<Vec<f64>> = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = d2.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if *w > 0.0 && r < *w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(squared_distance(p, &centroids[centroids.len() - 1]));
        }
    }

    let dim = points[0].len();
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let c = nearest(p, &centroids);
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[assign[i]] += 1;
            for (s, x) in sums[assign[i]].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // restart from the point farthest from its own centroid
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        squared_distance(&points[a], &centroids[assign[a]])
                            .total_cmp(&squared_distance(&points[b], &centroids[assign[b]]))
                            .then(b.cmp(&a))
                    })
                    .expect("points is nonempty");
                centroids[c] = points[far].clone();
                counts[assign[far]] -= 1;
                assign[far] = c;
                counts[c] = 1;
            }
        }
    }
    centroids
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, q) in centroids.iter().enumerate() {
        let d = squared_distance(p, q);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

/// Neighborhood-stratified, feature-clustered sample of `n` pool parcels.
///
/// Features are z-scored over the whole pool. Within a neighborhood with
/// allocation `k`, k-means finds `k` centroids and each centroid takes its
/// nearest unused member. Output is grouped by neighborhood id, then by
/// centroid.
pub fn diversity_sample(
    pool: &BTreeSet<ParcelId>,
    ds: &Dataset,
    n: usize,
    seed: u64,
) -> Result<Vec<ParcelId>, SamplerError> {
    if pool.is_empty() {
        return Err(SamplerError::EmptyPool);
    }
    check_size(pool.len(), n)?;

    let mut groups: BTreeMap<&str, Vec<&ParcelId>> = BTreeMap::new();
    let mut rows: BTreeMap<&ParcelId, Vec<f64>> = BTreeMap::new();
    for id in pool {
        let parcel = ds.parcel(id).ok_or_else(|| SamplerError::MissingFeatures(id.clone()))?;
        let f = ds.feature(id).ok_or_else(|| SamplerError::MissingFeatures(id.clone()))?;
        groups.entry(parcel.neighborhood_id.as_str()).or_default().push(id);
        rows.insert(id, f.to_array().to_vec());
    }
    let all: Vec<Vec<f64>> = rows.values().cloned().collect();
    let z = Standardizer::fit(&all);
    let rows: BTreeMap<&ParcelId, Vec<f64>> = rows.into_iter().map(|(id, r)| (id, z.transform(&r))).collect();

    let sizes: Vec<usize> = groups.values().map(Vec::len).collect();
    let alloc = allocate_by_neighborhood(&sizes, n);

    let mut out = Vec::with_capacity(n);
    for ((name, members), k) in groups.iter().zip(alloc) {
        if k == 0 {
            continue;
        }
        if k == members.len() {
            out.extend(members.iter().map(|id| (*id).clone()));
            continue;
        }
        let points: Vec<Vec<f64>> = members.iter().map(|id| rows[id].clone()).collect();
        let centroids = kmeans(&points, k, mix_seed(seed, stable_hash(&[name.as_bytes()])));
        let mut used = vec![false; members.len()];
        for c in &centroids {
            let pick = (0..members.len())
                .filter(|&i| !used[i])
                .min_by(|&a, &b| {
                    squared_distance(&points[a], c)
                        .total_cmp(&squared_distance(&points[b], c))
                        .then(a.cmp(&b))
                })
                .expect("k < members");
            used[pick] = true;
            out.push(members[pick].clone());
        }
    }
    Ok(out)
}
