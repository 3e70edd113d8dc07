use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::Parser;
use vadecide::cli::{run, Cli, CliError};
use vadecide_core::domain::{ParcelId, WeightConfig};
use vadecide_core::evaluate::MetricsReport;
use vadecide_core::forest::Label;
use vadecide_core::session::{export_sheet, import_sheet, DatasetEntry};
use vadecide_core::synth::{read_truth, TRUTH_FILE};

struct Workdir {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Workdir {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        fs::write(
            root.join("config.toml"),
            "seed = 11\n\n[forest]\nn_trees = 40\n",
        )
        .unwrap();
        Workdir { _tmp: tmp, root }
    }

    fn path(&self, rel: &str) -> String {
        self.root.join(rel).display().to_string()
    }

    fn try_run(&self, args: &[&str]) -> Result<String, CliError> {
        let cfg = self.path("config.toml");
        let mut argv = vec!["vadecide", "--config", cfg.as_str()];
        argv.extend_from_slice(args);
        let cli = Cli::try_parse_from(argv).unwrap();
        let mut out = Vec::new();
        run(cli, &mut out)?;
        Ok(String::from_utf8(out).unwrap())
    }

    fn run(&self, args: &[&str]) -> String {
        self.try_run(args).unwrap_or_else(|e| panic!("{args:?}: {e}"))
    }
}

fn field<'a>(out: &'a str, prefix: &str) -> &'a str {
    out.lines()
        .find_map(|l| l.strip_prefix(prefix))
        .and_then(|rest| rest.split_whitespace().next())
        .unwrap_or_else(|| panic!("no {prefix:?} line in:\n{out}"))
}

/// Fills a CLI-exported sheet with the planted truth.
fn fill_sheet(sheet: &Path, city: &Path) {
    let truth = read_truth(&city.join(TRUTH_FILE)).unwrap();
    let entries = import_sheet(BufReader::new(File::open(sheet).unwrap()), None).unwrap();
    let ids: Vec<ParcelId> = entries.iter().map(|e| e.parcel_id.clone()).collect();
    let filled: BTreeMap<_, _> = ids
        .iter()
        .map(|id| (id.clone(), (truth.is_vad(id).map(|v| if v { Label::Vad } else { Label::NotVad }), "checked on site".to_string())))
        .collect();
    let entry = DatasetEntry::load("city", city, &WeightConfig::default()).unwrap();
    export_sheet(&ids, &entry.dataset, Some(&filled), File::create(sheet).unwrap()).unwrap();
}

#[test]
fn the_full_workflow_runs_from_the_command_line() {
    let w = Workdir::new();
    let city = w.path("city");
    let store = w.path("store");
    let out = w.run(&["synth", "--out", &city, "--parcels", "600", "--neighborhoods", "6"]);
    assert!(out.starts_with("wrote 600 parcels"), "{out}");
    for f in ["parcels.csv", "incidents.csv", "neighborhoods.csv", "truth.json", "validations/field_survey.csv", "validations/usps.csv"] {
        assert!(w.root.join("city").join(f).is_file(), "{f}");
    }

    let out = w.run(&["ingest", "--data", &city]);
    assert_eq!(field(&out, "parcels "), "600");
    assert!(out.contains("validation field_survey"), "{out}");
    assert!(out.contains("validation usps"), "{out}");

    let features = w.path("features.csv");
    w.run(&["features", "--data", &city, "--out", &features]);
    let table = fs::read_to_string(&features).unwrap();
    assert_eq!(table.lines().count(), 601);
    assert!(table.lines().next().unwrap().contains("unpaid_special_pct"));

    let common = ["--data", city.as_str(), "--store", store.as_str()];
    let sample = |extra: &[&str]| {
        let mut args = vec!["sample"];
        args.extend_from_slice(&common);
        args.extend_from_slice(extra);
        w.run(&args)
    };
    let out = sample(&["--assign", "ann=40", "--assign", "ben=40"]);
    let sid = field(&out, "created session ").to_string();
    let bid = field(&out, "batch ").to_string();
    assert!(out.contains("(80 parcels)"), "{out}");

    for who in ["ann", "ben"] {
        let sheet = w.path(&format!("{who}.csv"));
        let mut args = vec!["export-sheet"];
        args.extend_from_slice(&common);
        args.extend_from_slice(&["--batch", &bid, "--annotator", who, "--out", &sheet]);
        w.run(&args);
        fill_sheet(Path::new(&sheet), Path::new(&city));
        let mut args = vec!["import-sheet"];
        args.extend_from_slice(&common);
        args.extend_from_slice(&["--batch", &bid, "--annotator", who, "--sheet", &sheet]);
        let out = w.run(&args);
        assert!(out.starts_with("accepted 40 labels for round 1"), "{out}");
    }

    let dots = w.path("dots");
    let mut args = vec!["audit"];
    args.extend_from_slice(&common);
    args.extend_from_slice(&["--session", &sid, "--dot", &dots]);
    let out = w.run(&args);
    assert!(out.contains(" conflicts"), "{out}");
    let dot_files: Vec<_> = fs::read_dir(&dots).unwrap().collect();
    assert!(!dot_files.is_empty());
    for f in dot_files {
        let text = fs::read_to_string(f.unwrap().path()).unwrap();
        assert!(text.starts_with("digraph"), "{text}");
    }

    let mut args = vec!["train"];
    args.extend_from_slice(&common);
    args.extend_from_slice(&["--session", &sid]);
    let out = w.run(&args);
    assert!(out.contains("(80 labels)"), "{out}");

    let preds = w.path("preds.csv");
    let mut args = vec!["predict"];
    args.extend_from_slice(&common);
    args.extend_from_slice(&["--session", &sid, "--kind", "structure", "--out", &preds]);
    w.run(&args);
    let text = fs::read_to_string(&preds).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "parcel_id,kind,probability,baseline_probability,predicted");
    let rows: Vec<&str> = lines.collect();
    assert!(!rows.is_empty());
    for r in &rows {
        let cols: Vec<&str> = r.split(',').collect();
        assert_eq!(cols[1], "Structure", "{r}");
        let p: f64 = cols[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&p));
        assert_eq!(cols[4], if p >= 0.5 { "VAD" } else { "NotVAD" });
    }

    let plots = w.path("plots");
    let mut args = vec!["evaluate"];
    args.extend_from_slice(&common);
    args.extend_from_slice(&["--session", &sid, "--plot-dir", &plots]);
    let out = w.run(&args);
    assert!(out.contains("importance "), "{out}");
    let names: Vec<String> = fs::read_dir(&plots)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(names.iter().any(|n| n.starts_with("pd_")), "{names:?}");
    assert!(names.iter().any(|n| n.starts_with("importance")), "{names:?}");

    let json = w.path("report.json");
    let truth = w.path("city/truth.json");
    let args = [
        "compare", "--data", &city, "--store", &store, "--truth", &truth, "--session", &sid, "--json", &json,
    ];
    let out = w.run(&args);
    assert!(!out.is_empty());
    let report: MetricsReport = serde_json::from_reader(File::open(&json).unwrap()).unwrap();
    let text = serde_json::to_string(&report).unwrap();
    assert!(text.contains("ground_truth"));
    assert!(w.root.join("report.consensus.csv").is_file());

    let out = sample(&["--session", &sid, "--n", "20", "--mix", "0.2,0.5,0.3"]);
    assert!(out.contains("round 2 (20 parcels)"), "{out}");
    assert!(!out.contains("created session"));
}

#[test]
fn bad_arguments_are_reported() {
    let w = Workdir::new();
    let city = w.path("city");
    let store = w.path("store");
    w.run(&["synth", "--out", &city, "--parcels", "300", "--neighborhoods", "4"]);

    let err = w
        .try_run(&["sample", "--data", &city, "--store", &store, "--assign", "ann:4"])
        .unwrap_err();
    assert!(matches!(err, CliError::Usage(_)), "{err:?}");

    let err = w
        .try_run(&["sample", "--data", &city, "--store", &store, "--n", "5", "--mix", "1,2"])
        .unwrap_err();
    assert!(matches!(err, CliError::Usage(_)), "{err:?}");

    let err = w
        .try_run(&["train", "--data", &city, "--store", &store, "--session", "session-9"])
        .unwrap_err();
    assert!(err.to_string().contains("session-9"), "{err}");

    assert!(Cli::try_parse_from(["vadecide", "predict", "--data", &city, "--session", "s", "--kind", "lake"]).is_err());
    assert!(Cli::try_parse_from(["vadecide", "audit", "--data", &city, "--session", "s", "--resolve", "c1"]).is_err());
}
