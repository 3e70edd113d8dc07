mod support;

use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use proptest::prelude::*;
use vadecide_core::audit::{fit_audit_tree, flag_disagreements, flag_isolated_labels, AuditRow, IsolationConfig, LabelPoint};
use vadecide_core::domain::{
    candidate_filter, compute_features, unpaid_special_pct, weighted_count, Dataset, FeatureVector, FilterConfig,
    IncidentCategory, IncidentRecord, ParcelId, WeightConfig,
};
use vadecide_core::evaluate::{content_sensitivity, external_consensus, ols_standardized, ContentThresholds};
use vadecide_core::forest::{stratified_folds, Forest, ForestParams, Label, TrainingData, TreeNode};
use vadecide_core::interpret::{drop_column_importance, partial_dependence, FeatureGroup};
use vadecide_core::labels::{LabelLog, LabelRecord, Provenance};
use vadecide_core::sampler::{compose_batch, diversity_sample, random_sample, Mix};
use vadecide_core::session::{export_sheet, import_sheet, SessionConfig, Session};
use vadecide_core::synth::{generate_city, scripted_annotator, CityConfig, Persona};
use vadecide_core::util::{mean, std_dev, Standardizer};

use support::*;

fn crime(day: u32) -> IncidentRecord {
    IncidentRecord {
        parcel_id: ParcelId::from("P"),
        category: IncidentCategory::Crime,
        subtype: "Burglary".into(),
        date: NaiveDate::from_ymd_opt(2000, 1, 1).unwrap() + chrono::Days::new(u64::from(day)),
        amount: 0.0,
        active: false,
    }
}

fn small_city(seed: u64, n: usize) -> Dataset {
    generate_city(&CityConfig {
        n_parcels: n,
        n_neighborhoods: 4,
        seed,
        ..CityConfig::default()
    })
    .unwrap()
    .0
}

fn labeled_rows() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<bool>)> {
    (4usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(prop::collection::vec((0u8..6).prop_map(f64::from), 3), n),
            prop::collection::vec(any::<bool>(), n),
        )
    })
}

fn routed(t: &TreeNode, rows: &[Vec<f64>], idx: Vec<usize>, out: &mut Vec<(usize, Vec<usize>)>) {
    if let TreeNode::Split {
        feature,
        threshold,
        left,
        right,
        ..
    } = t
    {
        out.push((*feature, idx.clone()));
        let (l, r): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|&i| rows[i][*feature] <= *threshold);
        routed(left, rows, l, out);
        routed(right, rows, r, out);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weighted_count_strictly_grows(days in prop::collection::vec(0u32..7000, 0..20), extra in 0u32..7000) {
        let cfg = WeightConfig::default();
        let base: Vec<IncidentRecord> = days.iter().map(|&d| crime(d)).collect();
        let before = weighted_count(&base, &cfg).unwrap();
        let mut more = base.clone();
        more.push(crime(extra));
        prop_assert!(weighted_count(&more, &cfg).unwrap() > before);
    }

    #[test]
    fn endless_half_life_is_a_plain_count(days in prop::collection::vec(0u32..7000, 0..30)) {
        let cfg = WeightConfig::uniform(NaiveDate::from_ymd_opt(2019, 12, 31).unwrap(), 1e9);
        let incidents: Vec<IncidentRecord> = days.iter().map(|&d| crime(d)).collect();
        let w = weighted_count(&incidents, &cfg).unwrap();
        prop_assert!((w - incidents.len() as f64).abs() < 1e-6);
    }

    #[test]
    fn special_share_is_a_fraction(total in 0.0f64..1e6, frac in 0.0f64..=1.0) {
        let p = unpaid_special_pct(total * frac, total).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn features_are_pure_and_filter_is_idempotent(seed in 0u64..1000) {
        let ds = small_city(seed, 120);
        let cfg = WeightConfig::default();
        for p in ds.parcels.iter().take(20) {
            let inc = ds.incidents_of(&p.id);
            let a = compute_features(p, &inc, &cfg).unwrap();
            let b = compute_features(p, &inc, &cfg).unwrap();
            prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        }
        let crit = FilterConfig::default();
        let once = candidate_filter(&ds, &crit);
        prop_assert!(once.is_subset(&ds.parcel_ids()));
        let parcels = ds.parcels.iter().filter(|p| once.contains(&p.id)).cloned().collect();
        let incidents = ds.incidents.iter().filter(|i| once.contains(&i.parcel_id)).cloned().collect();
        let mut kept = Dataset::new(parcels, incidents).unwrap();
        kept.compute_features(&cfg).unwrap();
        prop_assert_eq!(candidate_filter(&kept, &crit), once);
    }

    #[test]
    fn forests_are_deterministic_and_proba_is_bounded((rows, labels) in labeled_rows(), seed in any::<u64>()) {
        let data = to_training(&rows, &labels);
        let params = ForestParams { n_trees: 7, mtry: 2, ..ForestParams::default() };
        let a = Forest::fit(&data, &params, seed).unwrap();
        let b = Forest::fit(&data, &params, seed).unwrap();
        prop_assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        for r in &rows {
            let p = a.predict_proba(r);
            prop_assert!((0.0..=1.0).contains(&p));
            prop_assert_eq!(a.classify(r, p), Label::Vad);
            for (lo, hi) in [(0.2, 0.5), (0.5, 0.8)] {
                if a.classify(r, hi) == Label::Vad {
                    prop_assert_eq!(a.classify(r, lo), Label::Vad);
                }
            }
        }
    }

    #[test]
    fn trees_never_split_a_constant_feature((rows, labels) in labeled_rows(), seed in any::<u64>()) {
        let data = to_training(&rows, &labels);
        let params = ForestParams { n_trees: 3, mtry: 1, ..ForestParams::default() };
        let f = Forest::fit(&data, &params, seed).unwrap();
        for tree in &f.trees {
            let mut nodes = Vec::new();
            routed(tree, &rows, (0..rows.len()).collect(), &mut nodes);
            for (feature, idx) in nodes {
                let first = rows[idx[0]][feature];
                prop_assert!(idx.iter().any(|&i| rows[i][feature] != first));
            }
        }
    }

    #[test]
    fn folds_balance_each_class(n_vad in 5usize..60, n_not in 5usize..60, k in 2usize..6, seed in any::<u64>()) {
        let mut labels = vec![Label::Vad; n_vad];
        labels.extend(vec![Label::NotVad; n_not]);
        let folds = stratified_folds(&labels, k, seed).unwrap();
        for class in [Label::Vad, Label::NotVad] {
            let counts: Vec<usize> = (0..k)
                .map(|f| (0..labels.len()).filter(|&i| folds[i] == f && labels[i] == class).count())
                .collect();
            prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn samplers_return_exact_unique_subsets(seed in 0u64..500, frac in 0.0f64..1.0) {
        let ds = small_city(seed, 150);
        let pool = candidate_filter(&ds, &FilterConfig::default());
        let n = ((pool.len() as f64) * frac) as usize;
        let check = |ids: &[ParcelId]| ids.len() == n && set(ids).len() == n && ids.iter().all(|i| pool.contains(i));
        prop_assert!(check(&random_sample(&pool, n, seed).unwrap()));
        prop_assert!(check(&diversity_sample(&pool, &ds, n, seed).unwrap()));
        let mix = Mix::new(0.5, 0.0, 0.5).unwrap();
        let batch = compose_batch(&pool, &ds, None, n, &mix, seed, 1).unwrap();
        prop_assert!(check(&batch.parcel_ids));
        prop_assert!(random_sample(&pool, pool.len() + 1, seed).is_err());
    }

    #[test]
    fn isolation_spares_large_majority_leaves((rows, labels) in labeled_rows(), m in 0u32..4) {
        let data = to_training(&rows, &labels);
        let tree = fit_audit_tree(&data).unwrap();
        let audit: Vec<AuditRow> = rows
            .iter()
            .zip(&labels)
            .enumerate()
            .map(|(i, (x, &l))| AuditRow { parcel_id: ParcelId::new(format!("P{i:02}")), label: Label::from_vad(l), x: x.clone() })
            .collect();
        let cfg = IsolationConfig { min_depth: 1, max_leaf_allies: m, min_opposite_mass: 1 };
        let flags = flag_isolated_labels(&tree, &audit, &cfg);
        prop_assert_eq!(&flags, &flag_isolated_labels(&tree, &audit, &cfg));
        for c in flags {
            let row = audit.iter().find(|r| r.parcel_id == c.parcel_ids[0]).unwrap();
            let leaf = tree.leaf_for(&row.x);
            let majority = 2 * leaf.count_of(row.label) >= leaf.total;
            prop_assert!(!(majority && leaf.total > m));
        }
    }

    #[test]
    fn disagreements_are_symmetric_pairs(
        pts in prop::collection::vec(((0u8..4), (0u8..4), any::<bool>()), 2..20),
        eps in 0.0f64..2.0,
    ) {
        let points: Vec<LabelPoint> = pts
            .iter()
            .enumerate()
            .map(|(i, (a, b, l))| LabelPoint {
                parcel_id: ParcelId::new(format!("P{:02}", i / 2)),
                annotator_id: format!("a{}", i % 2),
                label: Label::from_vad(*l),
                x: vec![f64::from(*a), f64::from(*b)],
            })
            .collect();
        let scale = Standardizer::fit(&points.iter().map(|p| p.x.clone()).collect::<Vec<_>>());
        let keys = |ps: &[LabelPoint]| -> Vec<String> {
            let mut k: Vec<String> = flag_disagreements(ps, &scale, eps).into_iter().map(|c| c.key).collect();
            k.sort();
            k
        };
        let forward = keys(&points);
        let mut reversed = points.clone();
        reversed.reverse();
        prop_assert_eq!(&forward, &keys(&reversed));
        prop_assert_eq!(forward.iter().collect::<BTreeSet<_>>().len(), forward.len());
    }

    #[test]
    fn log_keeps_every_record_verbatim(ops in prop::collection::vec((0u8..6, any::<bool>(), 0i64..50, any::<bool>()), 1..60)) {
        let mut log = LabelLog::new();
        let mut stored: Vec<LabelRecord> = Vec::new();
        for (p, vad, ts, resolution) in ops {
            let prov = if resolution { Provenance::Resolution } else { Provenance::Expert };
            let rec = LabelRecord::new(ParcelId::new(format!("P{p}")), "a", Label::from_vad(vad), 1, at(ts), prov);
            stored.push(log.append(rec).clone());
            for (i, r) in stored.iter().enumerate() {
                prop_assert_eq!(log.get(i as u64), Some(r));
            }
        }
        let effective = log.effective_labels();
        for (id, label) in effective {
            let best = stored
                .iter()
                .filter(|r| r.parcel_id == id)
                .max_by_key(|r| (r.provenance == Provenance::Resolution, r.timestamp, r.seq))
                .unwrap();
            prop_assert_eq!(best.value, label);
        }
    }

    #[test]
    fn consensus_is_a_bounded_monotone_ratio(
        val in prop::collection::btree_set(0u16..200, 1..60),
        pred in prop::collection::btree_set(0u16..200, 0..120),
        extra in 0u16..200,
    ) {
        let ids = |s: &BTreeSet<u16>, tag: &str| -> BTreeSet<ParcelId> { s.iter().map(|i| ParcelId::new(format!("{tag}{i}"))).collect() };
        let c = external_consensus(&ids(&pred, "P"), &ids(&val, "P"), None).unwrap();
        prop_assert!((0.0..=1.0).contains(&c));
        let hits = pred.intersection(&val).count();
        prop_assert_eq!(c, hits as f64 / val.len() as f64);
        prop_assert_eq!(c, external_consensus(&ids(&pred, "X-"), &ids(&val, "X-"), None).unwrap());
        let mut more = pred.clone();
        more.insert(extra);
        prop_assert!(external_consensus(&ids(&more, "P"), &ids(&val, "P"), None).unwrap() >= c);
    }

    #[test]
    fn content_shares_are_percentages(values in prop::collection::vec((0.0f64..3.0, 0.0f64..3.0, 0.0f64..500.0, 1.0f64..200.0), 1..40)) {
        let feats: BTreeMap<ParcelId, FeatureVector> = values
            .iter()
            .enumerate()
            .map(|(i, (c, v, t, pv))| {
                (ParcelId::new(format!("P{i:02}")), FeatureVector {
                    crime_w: *c, drug_crime_w: 0.0, code_violation_w: *v, delinquent_tax: *t,
                    delinquent_years: 0, unpaid_special_pct: 0.0, property_value: *pv,
                })
            })
            .collect();
        let pool: BTreeSet<ParcelId> = feats.keys().cloned().collect();
        let th = ContentThresholds { low_value_below: Some(50.0), ..ContentThresholds::default() };
        let half: BTreeSet<ParcelId> = pool.iter().step_by(2).cloned().collect();
        let s = content_sensitivity(&half, &feats, &th, &pool).unwrap();
        prop_assert!(s.values().iter().all(|v| (0.0..=100.0).contains(v)));
        let mut grown = half.clone();
        grown.extend(pool.iter().cloned());
        let g = content_sensitivity(&grown, &feats, &th, &pool).unwrap();
        for (a, b) in s.values().iter().zip(g.values()) {
            prop_assert!(a / 100.0 * half.len() as f64 <= b / 100.0 * grown.len() as f64 + 1e-9);
        }
    }

    #[test]
    fn ols_recovers_noiseless_coefficients(
        pts in prop::collection::vec((10_000.0f64..90_000.0, 0.01f64..0.99), 6..30),
        b0 in -50.0f64..50.0, b1 in -50.0f64..50.0, b2 in -50.0f64..50.0,
    ) {
        let income: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let black: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let z = |xs: &[f64]| -> Vec<f64> { let (m, s) = (mean(xs), std_dev(xs)); xs.iter().map(|x| (x - m) / s).collect() };
        let (zi, zb) = (z(&income), z(&black));
        let corr: f64 = zi.iter().zip(&zb).map(|(a, b)| a * b).sum::<f64>() / zi.len() as f64;
        prop_assume!(corr.abs() < 0.95);
        let y: Vec<f64> = zi.iter().zip(&zb).map(|(a, b)| b0 + b1 * a + b2 * b).collect();
        let fit = ols_standardized(&income, &black, &y).unwrap();
        prop_assert!((fit.intercept - b0).abs() < 1e-6);
        prop_assert!((fit.beta_income - b1).abs() < 1e-6);
        prop_assert!((fit.beta_pct_black - b2).abs() < 1e-6);
    }

    #[test]
    fn sheet_roundtrip_is_lossless(cells in prop::collection::vec((prop::option::of(any::<bool>()), any::<String>()), 1..30), seed in 0u64..50) {
        let ds = small_city(seed, 60);
        let ids = ids_of(&ds, cells.len());
        let filled: BTreeMap<ParcelId, (Option<Label>, String)> = ids
            .iter()
            .zip(&cells)
            .map(|(id, (l, c))| (id.clone(), (l.map(Label::from_vad), c.clone())))
            .collect();
        let mut buf = Vec::new();
        export_sheet(&ids, &ds, Some(&filled), &mut buf).unwrap();
        let back = import_sheet(buf.as_slice(), Some(&set(&ids))).unwrap();
        prop_assert_eq!(back.iter().map(|e| e.parcel_id.clone()).collect::<Vec<_>>(), ids);
        for e in back {
            prop_assert_eq!(&(e.label, e.comment.clone()), &filled[&e.parcel_id]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn importance_ignores_group_order(seed in 0u64..1000, rot in 1usize..5) {
        let data = planted_dataset(seed, 60);
        let params = ForestParams { n_trees: 8, mtry: 2, ..ForestParams::default() };
        let groups: Vec<FeatureGroup> = (0..5).map(|j| FeatureGroup::new(format!("f{j}"), vec![j])).collect();
        let mut rotated = groups.clone();
        rotated.rotate_left(rot);
        let by_name = |gs: &[FeatureGroup]| -> BTreeMap<String, f64> {
            drop_column_importance(&data, &params, gs, 3, seed).unwrap().groups.into_iter().map(|g| (g.name, g.delta)).collect()
        };
        let a = by_name(&groups);
        prop_assert_eq!(&a, &by_name(&rotated));
        prop_assert_eq!(a["f4"], 0.0);
    }

    #[test]
    fn pd_is_flat_between_thresholds((rows, labels) in labeled_rows(), seed in any::<u64>(), feature in 0usize..3) {
        let data = to_training(&rows, &labels);
        let f = Forest::fit(&data, &ForestParams { n_trees: 5, mtry: 2, ..ForestParams::default() }, seed).unwrap();
        let mut cuts = f.thresholds_for(feature);
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let mut bounds = vec![-10.0];
        bounds.extend(cuts.iter().copied());
        bounds.push(20.0);
        let mut grid = Vec::new();
        for w in bounds.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            grid.push(lo + (hi - lo) * 0.25 + if lo == -10.0 { 0.0 } else { 1e-9 });
            grid.push(lo + (hi - lo) * 0.75);
        }
        let pd = partial_dependence(&f, &rows, feature, Some(&grid)).unwrap();
        let value = |v: f64| pd.mean_proba[pd.grid.iter().position(|g| *g == v).unwrap()];
        for pair in grid.chunks(2) {
            prop_assert_eq!(value(pair[0]), value(pair[1]));
        }
        if cuts.is_empty() {
            prop_assert!(pd.mean_proba.iter().all(|p| *p == pd.mean_proba[0]));
        }
    }

    #[test]
    fn distinct_parcel_submissions_commute(seed in 0u64..100, order in Just(()).prop_perturb(|_, mut rng| {
        let mut v: Vec<usize> = (0..30).collect();
        for i in (1..v.len()).rev() { v.swap(i, rng.random_range(0..=i)); }
        v
    })) {
        let ds = small_city(seed, 200);
        let truth = generate_city(&CityConfig { n_parcels: 200, n_neighborhoods: 4, seed, ..CityConfig::default() }).unwrap().1;
        let run = |perm: &[usize]| {
            let mut s = Session::create("s", "d", &ds, SessionConfig::default(), at(0)).unwrap();
            let r = s.request_batch(&ds, 30, None, &split(&[("a", 30)]), at(1)).unwrap().clone();
            let recs = scripted_annotator(&r.batch.parcel_ids, &truth, &Persona { id: "a".into(), noise: 0.2, bias: 0.0 }, 1, at(2), seed);
            for chunk in perm.chunks(7) {
                let part: Vec<LabelRecord> = chunk.iter().map(|&i| recs[i].clone()).collect();
                s.submit_labels(&ds, part, at(2)).unwrap();
            }
            let conflicts: Vec<String> = s.conflicts.values().map(|c| c.key.clone()).collect();
            (s.log.effective_labels(), conflicts, s.round(1).unwrap().state)
        };
        let identity: Vec<usize> = (0..30).collect();
        prop_assert_eq!(run(&identity), run(&order));
    }
}

#[test]
fn constant_column_cv_is_unchanged() {
    let data = planted_dataset(3, 80);
    let groups: Vec<FeatureGroup> = (0..5).map(|j| FeatureGroup::new(format!("f{j}"), vec![j])).collect();
    let r = drop_column_importance(&data, &ForestParams { n_trees: 20, ..ForestParams::default() }, &groups, 5, 3).unwrap();
    let constant = r.groups.iter().find(|g| g.name == "f4").unwrap();
    assert_eq!(constant.dropped_folds, r.baseline_folds);
    assert_eq!(constant.delta, 0.0);
    let _ = TrainingData::new(vec![vec![0.0]], vec![Label::Vad]).unwrap();
}
