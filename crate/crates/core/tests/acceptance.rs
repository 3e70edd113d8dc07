//! Headless acceptance run: one PASS/FAIL line per criterion, nonzero exit
//! when any fails.

mod support;

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vadecide_core::domain::{candidate_filter, Dataset, FilterConfig, ParcelId, ParcelKind};
use vadecide_core::evaluate::{external_consensus, ols_standardized};
use vadecide_core::forest::{fit_tree, Forest, ForestParams, Label, TreeNode};
use vadecide_core::interpret::{drop_column_importance, partial_dependence, FeatureGroup};
use vadecide_core::sampler::{diversity_sample, uncertainty_sample};
use vadecide_core::session::{export_sheet, import_sheet, Session};
use vadecide_core::synth::{generate_city, CityConfig, GroundTruth};
use vadecide_core::util::rng_for;

use support::*;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn consensus_arithmetic() -> Outcome {
    let cells = [(49, 81, 60.49), (71, 111, 63.96), (12, 81, 14.81), (25, 111, 22.52)];
    let mut shown = Vec::new();
    for (hits, total, want) in cells {
        let ids = |r: std::ops::Range<usize>| -> BTreeSet<ParcelId> { r.map(|i| ParcelId::new(format!("P{i:04}"))).collect() };
        let validation = ids(0..total);
        let predicted: BTreeSet<ParcelId> = ids(0..hits).into_iter().chain(ids(5000..5000 + 37)).collect();
        let pct = 100.0 * external_consensus(&predicted, &validation, None).map_err(|e| e.to_string())?;
        ensure((pct - want).abs() <= 0.005, || format!("{hits}/{total} gave {pct:.4}%, expected {want}%"))?;
        shown.push(format!("{hits}/{total}={pct:.2}%"));
    }
    Ok(shown.join(" "))
}

fn cart_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE);
    let mut mismatches = 0;
    for case in 0..500u64 {
        let (rows, labels) = random_small_dataset(&mut rng);
        let data = to_training(&rows, &labels);
        let depth = if case % 2 == 0 { None } else { Some(rng.random_range(1..=3)) };
        let params = ForestParams {
            max_depth: depth,
            ..ForestParams::audit_tree(2)
        };
        let all: Vec<usize> = (0..rows.len()).collect();
        let got = fit_tree(&data, &all, &params, &mut rng_for(case, 0)).map_err(|e| e.to_string())?;
        if split_sequence(&got) != split_sequence(&oracle_tree(&rows, &labels, &all, 0, depth)) {
            mismatches += 1;
        }
    }
    ensure(mismatches == 0, || format!("{mismatches} of 500 datasets mismatched"))?;
    Ok("500 datasets, 0 mismatches".into())
}

fn uncertainty_oracle_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC0);
    let ds = Dataset::default();
    for case in 0..200 {
        let size = rng.random_range(1..120);
        let coarse = rng.random_bool(0.5);
        let scored: BTreeMap<ParcelId, f64> = (0..size)
            .map(|i| {
                let p = if coarse { f64::from(rng.random_range(0..=8u8)) / 8.0 } else { rng.random() };
                (ParcelId::new(format!("Q{:05}", rng.random_range(0..500) * 200 + i)), p)
            })
            .collect();
        let pool: BTreeSet<ParcelId> = scored.keys().cloned().collect();
        let n = rng.random_range(0..=pool.len());
        let got = uncertainty_sample(&pool, &ds, Some(&scored), n).map_err(|e| e.to_string())?;
        ensure(got == uncertainty_oracle(&scored, n), || format!("pool {case} differs"))?;
    }
    Ok("200 pools exact".into())
}

fn diversity_coverage() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCD);
    for case in 0..100u64 {
        let n_nb = rng.random_range(2..=15);
        let cfg = CityConfig {
            n_parcels: rng.random_range(n_nb * 8..=600),
            n_neighborhoods: n_nb,
            seed: rng.random(),
            ..CityConfig::default()
        };
        let (ds, _) = generate_city(&cfg).map_err(|e| e.to_string())?;
        let pool = candidate_filter(&ds, &FilterConfig::default());
        let hood = |id: &ParcelId| ds.parcel(id).map(|p| p.neighborhood_id.clone());
        let hoods: BTreeSet<String> = pool.iter().filter_map(hood).collect();
        let n = rng.random_range(hoods.len()..=pool.len());
        let got = diversity_sample(&pool, &ds, n, case).map_err(|e| e.to_string())?;
        let covered: BTreeSet<String> = got.iter().filter_map(hood).collect();
        ensure(covered == hoods && got.len() == n, || {
            format!("city {case}: {} of {} neighborhoods at n={n}", covered.len(), hoods.len())
        })?;
    }
    Ok("100 cities, every neighborhood sampled".into())
}

fn importance_sanity() -> Outcome {
    let groups: Vec<FeatureGroup> = ["informative", "noise_a", "noise_b", "noise_c", "constant"]
        .iter()
        .enumerate()
        .map(|(j, name)| FeatureGroup::new(*name, vec![j]))
        .collect();
    let params = ForestParams {
        n_trees: 60,
        ..ForestParams::default()
    };
    let mut first = 0;
    for seed in 0..20u64 {
        let data = planted_dataset(1000 + seed, 200);
        let r = drop_column_importance(&data, &params, &groups, 5, seed).map_err(|e| e.to_string())?;
        if r.ranking().first() == Some(&"informative") {
            first += 1;
        }
        let c = r.group("constant").ok_or("constant group missing")?;
        ensure(c.delta == 0.0 && c.dropped_folds == r.baseline_folds, || {
            format!("seed {seed}: constant column delta {}", c.delta)
        })?;
    }
    ensure(first >= 19, || format!("informative ranked first in {first}/20"))?;
    Ok(format!("informative first in {first}/20, constant delta 0"))
}

fn partial_dependence_check() -> Outcome {
    let data = planted_dataset(5, 120);
    let fitted = Forest::fit(&data, &ForestParams { n_trees: 30, ..ForestParams::default() }, 5).map_err(|e| e.to_string())?;
    let flat = partial_dependence(&fitted, data.rows(), 4, Some(&[-3.0, 0.0, 1.0, 2.5, 40.0])).map_err(|e| e.to_string())?;
    ensure(flat.mean_proba.iter().all(|p| *p == flat.mean_proba[0]), || {
        format!("never-split curve varies: {:?}", flat.mean_proba)
    })?;

    let mut stump = fitted.clone();
    stump.trees = vec![TreeNode::Split {
        feature: 0,
        threshold: 0.5,
        vad_count: 4,
        total: 8,
        left: Box::new(TreeNode::Leaf { vad_count: 1, total: 4 }),
        right: Box::new(TreeNode::Leaf { vad_count: 3, total: 4 }),
    }];
    let rows: Vec<Vec<f64>> = [0.1, 0.2, 0.7, 0.9]
        .iter()
        .map(|&x0| vec![x0, 0.3, 0.3, 0.3, 1.0])
        .collect();
    let grid = [-1.0, 0.0, 0.5, 0.50001, 0.9, 2.0];
    let want = [0.25, 0.25, 0.25, 0.75, 0.75, 0.75];
    let step = partial_dependence(&stump, &rows, 0, Some(&grid)).map_err(|e| e.to_string())?;
    ensure(step.mean_proba == want, || format!("stump curve {:?}", step.mean_proba))?;
    let other = partial_dependence(&stump, &rows, 1, Some(&grid)).map_err(|e| e.to_string())?;
    ensure(other.mean_proba.iter().all(|p| *p == 0.5), || format!("off-split curve {:?}", other.mean_proba))?;
    Ok("flat curve exact, stump step exact".into())
}

fn hitl_superiority(ds: &Arc<Dataset>, truth: &GroundTruth, seed7: &HitlOutcome) -> Outcome {
    let mut wins = 0;
    let mut shown = Vec::new();
    for seed in [7u64, 11, 23, 42, 99] {
        let out = if seed == 7 {
            seed7.clone()
        } else {
            run_hitl(ds, truth, seed).map_err(|e| e.to_string())?.1
        };
        if out.hitl_wins() && out.labels == 300 {
            wins += 1;
        }
        let pair = |k: ParcelKind| {
            format!(
                "{:.1}/{:.1}",
                100.0 * out.hitl.get(&k).copied().unwrap_or(f64::NAN),
                100.0 * out.baseline.get(&k).copied().unwrap_or(f64::NAN)
            )
        };
        shown.push(format!("s{seed} L {} S {}", pair(ParcelKind::Land), pair(ParcelKind::Structure)));
    }
    let detail = format!("{wins}/5 seeds [{}]", shown.join("; "));
    ensure(wins >= 4, || detail.clone())?;
    Ok(detail)
}

fn fingerprint(s: &mut Session, ds: &Dataset, truth: &GroundTruth, models: &BTreeMap<String, vadecide_core::session::TrainedModels>) -> Result<(String, String, String), String> {
    let forests = serde_json::to_string(models).map_err(|e| e.to_string())?;
    let batches: Vec<_> = s.rounds.iter().map(|r| &r.batch).collect();
    let batches = serde_json::to_string(&batches).map_err(|e| e.to_string())?;
    let report = s.report(ds, &[truth_validation(truth)], at(100)).map_err(|e| e.to_string())?;
    let report = serde_json::to_string(&report).map_err(|e| e.to_string())?;
    Ok((forests, batches, report))
}

fn determinism_and_replay(ds: &Arc<Dataset>, truth: &GroundTruth, first: (Session, HitlOutcome)) -> Outcome {
    let (mut a, out_a) = first;
    let (mut b, out_b) = run_hitl(ds, truth, 7).map_err(|e| e.to_string())?;
    let fa = fingerprint(&mut a, ds, truth, &out_a.models)?;
    let fb = fingerprint(&mut b, ds, truth, &out_b.models)?;
    ensure(fa.0 == fb.0, || "forests differ between runs".into())?;
    ensure(fa.1 == fb.1, || "batches differ between runs".into())?;
    ensure(fa.2 == fb.2, || "reports differ between runs".into())?;

    let events = a.take_events();
    let log: Vec<_> = events
        .iter()
        .map(|e| serde_json::to_string(e).and_then(|line| serde_json::from_str(&line)))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let stored: BTreeMap<String, String> = out_a
        .models
        .iter()
        .map(|(k, m)| (k.clone(), serde_json::to_string(m).expect("models serialize")))
        .collect();
    let replayed = Session::replay(&log, ds, |snap| Ok(serde_json::from_str(&stored[snap])?)).map_err(|e| e.to_string())?;
    ensure(replayed == a, || "replayed state differs from live state".into())?;
    ensure(replayed.predictions() == a.predictions(), || "replayed predictions differ".into())?;
    Ok(format!(
        "{} bytes of forests, {} events replayed",
        fa.0.len(),
        events.len()
    ))
}

fn equity_probe_check(truth: &GroundTruth) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xE0);
    let income: Vec<f64> = (0..40).map(|_| rng.random_range(15_000.0..110_000.0)).collect();
    let black: Vec<f64> = (0..40).map(|_| rng.random_range(0.02..0.95)).collect();
    let z = |xs: &[f64]| -> Vec<f64> {
        let m = vadecide_core::util::mean(xs);
        let s = vadecide_core::util::std_dev(xs);
        xs.iter().map(|x| (x - m) / s).collect()
    };
    let (zi, zb) = (z(&income), z(&black));
    let (b0, b1, b2) = (31.5, -7.25, 4.125);
    let y: Vec<f64> = zi.iter().zip(&zb).map(|(i, b)| b0 + b1 * i + b2 * b).collect();
    let fit = ols_standardized(&income, &black, &y).map_err(|e| e.to_string())?;
    let err = (fit.intercept - b0).abs().max((fit.beta_income - b1).abs()).max((fit.beta_pct_black - b2).abs());
    ensure(err < 1e-6, || format!("noiseless recovery off by {err:e}"))?;

    let hoods = truth.neighborhoods.values();
    let income: Vec<f64> = hoods.clone().map(|h| h.median_income).collect();
    let black: Vec<f64> = hoods.clone().map(|h| h.pct_black).collect();
    let deficit: Vec<f64> = hoods.map(|h| h.reporting_deficit).collect();
    let city = ols_standardized(&income, &black, &deficit).map_err(|e| e.to_string())?;
    ensure(city.beta_income < 0.0 && city.beta_pct_black > 0.0, || {
        format!("biased city signs income {:.3} black {:.3}", city.beta_income, city.beta_pct_black)
    })?;
    Ok(format!(
        "noiseless error {err:.1e}; city beta_income {:.2} beta_pct_black {:.2}",
        city.beta_income, city.beta_pct_black
    ))
}

fn sheet_roundtrip(ds: &Dataset) -> Outcome {
    let ids = ids_of(ds, 1000);
    ensure(ids.len() == 1000, || format!("city has only {} parcels", ids.len()))?;
    let filled: BTreeMap<ParcelId, (Option<Label>, String)> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let label = match i % 3 {
                0 => None,
                1 => Some(Label::Vad),
                _ => Some(Label::NotVad),
            };
            (id.clone(), (label, tricky_comment(i)))
        })
        .collect();
    let mut buf = Vec::new();
    export_sheet(&ids, ds, Some(&filled), &mut buf).map_err(|e| e.to_string())?;
    let back = import_sheet(buf.as_slice(), Some(&set(&ids))).map_err(|e| e.to_string())?;
    let order: Vec<ParcelId> = back.iter().map(|e| e.parcel_id.clone()).collect();
    ensure(order == ids, || "parcel order changed".into())?;
    for e in &back {
        let want = &filled[&e.parcel_id];
        ensure(e.label == want.0 && e.comment == want.1, || format!("{} came back altered", e.parcel_id))?;
    }
    Ok(format!("1000 parcels, {} bytes", buf.len()))
}

struct Line {
    name: &'static str,
    budget: Duration,
    outcome: Outcome,
    took: Duration,
}

fn timed(name: &'static str, budget_s: u64, f: impl FnOnce() -> Outcome) -> Line {
    let start = Instant::now();
    let outcome = f();
    Line {
        name,
        budget: Duration::from_secs(budget_s),
        outcome,
        took: start.elapsed(),
    }
}

fn main() -> ExitCode {
    let (ds, truth) = default_city();
    let mut lines = vec![
        timed("consensus arithmetic", 1, consensus_arithmetic),
        timed("CART oracle equivalence", 10, cart_oracle),
        timed("uncertainty sampler oracle", 5, uncertainty_oracle_check),
        timed("diversity coverage", 5, diversity_coverage),
        timed("importance sanity", 60, importance_sanity),
        timed("partial dependence", 1, partial_dependence_check),
    ];

    let start = Instant::now();
    let seed7 = run_hitl(&ds, &truth, 7);
    let seed7_time = start.elapsed();
    match seed7 {
        Ok((session, out)) => {
            let mut hitl = timed("HITL beats simple ML", 180, || hitl_superiority(&ds, &truth, &out));
            hitl.took += seed7_time;
            lines.push(hitl);
            let mut det = timed("determinism and replay", 30, || determinism_and_replay(&ds, &truth, (session, out)));
            det.took += seed7_time;
            lines.push(det);
        }
        Err(e) => {
            for name in ["HITL beats simple ML", "determinism and replay"] {
                lines.push(Line {
                    name,
                    budget: Duration::ZERO,
                    outcome: Err(format!("session failed: {e}")),
                    took: seed7_time,
                });
            }
        }
    }
    lines.push(timed("equity probe", 5, || equity_probe_check(&truth)));
    lines.push(timed("sheet round-trip", 5, || sheet_roundtrip(&ds)));

    let mut failed = 0;
    for l in &lines {
        let over = !l.budget.is_zero() && l.took > l.budget;
        let (tag, detail) = match &l.outcome {
            Ok(d) if !over => ("PASS", d.clone()),
            Ok(d) => ("FAIL", format!("{d}; over the {}s budget", l.budget.as_secs())),
            Err(e) => ("FAIL", e.clone()),
        };
        if tag == "FAIL" {
            failed += 1;
        }
        println!("{tag} {:<28} {:>8.2}s  {detail}", l.name, l.took.as_secs_f64());
    }
    println!("{} of {} criteria passed", lines.len() - failed, lines.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
