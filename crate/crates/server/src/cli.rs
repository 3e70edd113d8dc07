//! Command-line verbs. Dataset verbs work on a data directory; session
//! verbs work on a store directory through the same [`SessionStore`] the
//! HTTP API serves.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use vadecide_core::audit::{ConflictStatus, ResolutionRequest};
use vadecide_core::domain::{candidate_filter, write_features_csv, IncidentCategory, ParcelKind, FEATURE_NAMES, N_FEATURES};
use vadecide_core::evaluate::{equity_probe, MetricFamily, Validation};
use vadecide_core::forest::Label;
use vadecide_core::interpret::{drop_column_importance, groups_for, partial_dependence};
use vadecide_core::labels::Provenance;
use vadecide_core::sampler::Mix;
use vadecide_core::session::{
    export_sheet, import_sheet, kind_training_data, write_validation, DatasetEntry, LabelInput, SessionConfig,
    SessionError, SessionStore, SystemClock, FIELD_SURVEY, VALIDATIONS_DIR,
};
use vadecide_core::synth::{generate_city, read_truth, simulate_field_survey, simulate_usps, write_city, CityConfig, SurveyConfig};

pub const DEFAULT_STORE: &str = "vadecide-store";
pub const GROUND_TRUTH: &str = "ground_truth";
pub const USPS: &str = "usps";

#[derive(Debug, Parser)]
#[command(name = "vadecide", version, about = "Human-in-the-loop triage of vacant and deteriorated parcels")]
pub struct Cli {
    /// Overrides the seed in the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Session config in TOML (weights, forest, sampler, audit, content thresholds).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct DataArgs {
    /// Directory holding parcels.csv, incidents.csv and optionally
    /// neighborhoods.csv and validations/*.csv.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct StoreArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_name = "DIR", default_value = DEFAULT_STORE)]
    pub store: PathBuf,
    /// Planted truth from `synth`, added as the ground_truth validation.
    #[arg(long, value_name = "FILE")]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic city with planted ground truth.
    Synth {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long)]
        parcels: Option<usize>,
        #[arg(long)]
        neighborhoods: Option<usize>,
        #[arg(long)]
        reporting_bias: Option<f64>,
        /// Neighborhoods visited by the simulated field survey.
        #[arg(long, default_value_t = 4)]
        survey_neighborhoods: usize,
    },
    /// Load and validate a data directory and print a summary.
    Ingest(DataArgs),
    /// Write the seven-feature table.
    Features {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Draw the next batch, creating a session when none is given.
    Sample {
        #[command(flatten)]
        store: StoreArgs,
        #[arg(long)]
        session: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        /// Annotator share as NAME=COUNT; repeatable. Defaults to one
        /// annotator taking the whole batch.
        #[arg(long = "assign", value_name = "NAME=COUNT")]
        assign: Vec<String>,
        /// Strategy fractions RANDOM,UNCERTAINTY,DIVERSITY.
        #[arg(long, value_name = "R,U,D")]
        mix: Option<String>,
    },
    /// Write a batch as a transposed labeling sheet.
    ExportSheet {
        #[command(flatten)]
        store: StoreArgs,
        #[arg(long)]
        batch: String,
        /// Only this annotator's slice.
        #[arg(long)]
        annotator: Option<String>,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Submit the labeled cells of a filled sheet.
    ImportSheet {
        #[command(flatten)]
        store: StoreArgs,
        #[arg(long)]
        batch: String,
        #[arg(long)]
        annotator: String,
        #[arg(long, value_name = "FILE")]
        sheet: PathBuf,
    },
    /// List conflicts and audit trees, or resolve one conflict.
    Audit {
        #[command(flatten)]
        store: StoreArgs,
        #[arg(long)]
        session: String,
        #[arg(long, value_name = "CONFLICT_ID", requires_all = ["label", "rationale", "resolver"])]
        resolve: Option<String>,
        #[arg(long, value_parser = parse_label)]
        label: Option<Label>,
        #[arg(long)]
        rationale: Option<String>,
        #[arg(long)]
        resolver: Option<String>,
        /// Write one DOT file per kind.
        #[arg(long, value_name = "DIR")]
        dot: Option<PathBuf>,
    },
    /// Retrain on the current effective labels.
    Train {
        #[command(flatten)]
        store: StoreArgs,
        #[arg(long)]
        session: String,
        /// Skip the audit gate.
        #[arg(long)]
        force: bool,
    },
    /// Write cached predictions of the latest snapshot.
    Predict {
        #[command(flatten)]
        store: StoreArgs,
        #[arg(long)]
        session: String,
        #[arg(long, value_parser = parse_kind)]
        kind: Option<ParcelKind>,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Internal accuracy, feature importance and partial dependence tables.
    Evaluate {
        #[command(flatten)]
        store: StoreArgs,
        #[arg(long)]
        session: String,
        /// Directory for importance and partial-dependence CSV tables.
        #[arg(long, value_name = "DIR")]
        plot_dir: Option<PathBuf>,
    },
    /// Three-way comparison report against every validation.
    Compare {
        #[command(flatten)]
        store: StoreArgs,
        #[arg(long)]
        session: String,
        #[arg(long, value_name = "FILE")]
        json: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        /// Data directory; repeatable. Each registers under its directory name.
        #[arg(long = "data", value_name = "DIR", required = true)]
        data: Vec<PathBuf>,
        #[arg(long, value_name = "DIR", default_value = DEFAULT_STORE)]
        store: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Static files served for paths no route matches.
        #[arg(long, value_name = "DIR")]
        static_dir: Option<PathBuf>,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Other(String),
}

fn parse_label(s: &str) -> Result<Label, String> {
    Label::parse(s).ok_or_else(|| format!("expected VAD or NotVAD, got {s:?}"))
}

fn parse_kind(s: &str) -> Result<ParcelKind, String> {
    ParcelKind::parse(s).ok_or_else(|| format!("expected land or structure, got {s:?}"))
}

pub fn parse_assignments(specs: &[String], n: usize) -> Result<BTreeMap<String, usize>, CliError> {
    if specs.is_empty() {
        return Ok(BTreeMap::from([("annotator".to_string(), n)]));
    }
    let mut out = BTreeMap::new();
    for s in specs {
        let (name, count) = s
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--assign expects NAME=COUNT, got {s:?}")))?;
        let count: usize = count
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("bad count in --assign {s:?}")))?;
        *out.entry(name.trim().to_string()).or_insert(0) += count;
    }
    Ok(out)
}

pub fn parse_mix(s: &str) -> Result<Mix, CliError> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("--mix expects three numbers, got {s:?}")))?;
    match parts[..] {
        [r, u, d] => Ok(Mix::new(r, u, d).map_err(SessionError::from)?),
        _ => Err(CliError::Usage(format!("--mix expects three numbers, got {s:?}"))),
    }
}

pub fn load_config(cli_config: Option<&Path>, seed: Option<u64>) -> Result<SessionConfig, CliError> {
    let mut cfg = match cli_config {
        Some(p) => SessionConfig::load(p)?,
        None => SessionConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn dataset_name(dir: &Path) -> String {
    dir.canonicalize()
        .ok()
        .as_deref()
        .unwrap_or(dir)
        .file_name()
        .and_then(|n| n.to_str())
        .filter(|n| !n.is_empty())
        .unwrap_or("dataset")
        .to_string()
}

pub fn load_dataset(dir: &Path, cfg: &SessionConfig, truth: Option<&Path>) -> Result<DatasetEntry, CliError> {
    let mut entry = DatasetEntry::load(dataset_name(dir), dir, &cfg.weights)?;
    if let Some(t) = truth {
        let truth = read_truth(t).map_err(SessionError::from)?;
        entry.validations.push(Validation::new(GROUND_TRUTH, truth.vad_ids()));
    }
    Ok(entry)
}

pub fn open_store(args: &StoreArgs, cfg: &SessionConfig) -> Result<SessionStore, CliError> {
    let store = SessionStore::open(&args.store, Arc::new(SystemClock))?;
    store.register_dataset(load_dataset(&args.data.data, cfg, args.truth.as_deref())?);
    Ok(store)
}

fn writer(out: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            Box::new(BufWriter::new(File::create(p)?))
        }
        None => Box::new(io::stdout().lock()),
    })
}

/// Runs one verb, writing its human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::Synth {
            out: dir,
            parcels,
            neighborhoods,
            reporting_bias,
            survey_neighborhoods,
        } => {
            let mut city = CityConfig::default();
            if let Some(s) = cli.seed {
                city.seed = s;
            }
            if let Some(n) = parcels {
                city.n_parcels = n;
            }
            if let Some(k) = neighborhoods {
                city.n_neighborhoods = k;
            }
            if let Some(b) = reporting_bias {
                city.reporting_bias = b;
            }
            let (ds, truth) = generate_city(&city).map_err(SessionError::from)?;
            write_city(&dir, &ds, &truth).map_err(SessionError::from)?;
            let survey = simulate_field_survey(
                &ds,
                &truth,
                &SurveyConfig {
                    k_neighborhoods: survey_neighborhoods,
                    seed: city.seed,
                    ..SurveyConfig::default()
                },
            );
            let vdir = dir.join(VALIDATIONS_DIR);
            fs::create_dir_all(&vdir)?;
            let field = Validation::new(FIELD_SURVEY, survey.validation.clone()).with_scope(survey.surveyed.clone());
            write_validation(&field, File::create(vdir.join(format!("{FIELD_SURVEY}.csv")))?)?;
            let usps = Validation::new(USPS, simulate_usps(&ds, &truth, 0.6, city.seed));
            write_validation(&usps, File::create(vdir.join(format!("{USPS}.csv")))?)?;
            writeln!(
                out,
                "wrote {} parcels, {} incidents, {} neighborhoods to {}",
                ds.parcels.len(),
                ds.incidents.len(),
                truth.neighborhoods.len(),
                dir.display()
            )?;
            writeln!(
                out,
                "planted VAD rate {:.3}; field survey {} of {} surveyed; usps {}",
                truth.vad_rate(),
                field.ids.len(),
                survey.surveyed.len(),
                usps.ids.len()
            )?;
        }
        Command::Ingest(data) => {
            let entry = load_dataset(&data.data, &cfg, None)?;
            let ds = &entry.dataset;
            writeln!(out, "dataset {}", entry.name)?;
            writeln!(out, "parcels {}", ds.parcels.len())?;
            for kind in ParcelKind::ALL {
                let n = ds.parcels.iter().filter(|p| p.kind == kind).count();
                writeln!(out, "  {} {n}", kind.as_str())?;
            }
            writeln!(out, "incidents {}", ds.incidents.len())?;
            for cat in IncidentCategory::ALL {
                let n = ds.incidents.iter().filter(|i| i.category == cat).count();
                writeln!(out, "  {} {n}", cat.as_str())?;
            }
            writeln!(out, "candidate pool {}", candidate_filter(ds, &cfg.filter).len())?;
            writeln!(out, "neighborhood stats {}", ds.neighborhood_stats.len())?;
            if ds.neighborhood_stats.len() >= 4 {
                match equity_probe(&ds.neighborhood_stats) {
                    Ok(fit) => writeln!(
                        out,
                        "311 calls ~ income {:+.3} pct_black {:+.3} (r2 {:.3})",
                        fit.beta_income, fit.beta_pct_black, fit.r_squared
                    )?,
                    Err(e) => writeln!(out, "equity probe unavailable: {e}")?,
                }
            }
            for v in &entry.validations {
                writeln!(out, "validation {} {}", v.name, v.ids.len())?;
            }
        }
        Command::Features { data, out: path } => {
            let entry = load_dataset(&data.data, &cfg, None)?;
            write_features_csv(&entry.dataset.features, writer(path.as_deref())?).map_err(SessionError::from)?;
        }
        Command::Sample {
            store,
            session,
            n,
            assign,
            mix,
        } => {
            let st = open_store(&store, &cfg)?;
            let sid = match session {
                Some(s) => s,
                None => {
                    let s = st.create_session(&dataset_name(&store.data.data), cfg.clone())?;
                    writeln!(out, "created session {} over {} candidates", s.id, s.pool.len())?;
                    s.id
                }
            };
            let n = match n {
                Some(n) => n,
                None if !assign.is_empty() => parse_assignments(&assign, 0)?.values().sum(),
                None => cfg.sampler.batch_size,
            };
            let assignments = parse_assignments(&assign, n)?;
            let mix = mix.as_deref().map(parse_mix).transpose()?;
            let round = st.request_batch(&sid, n, mix, &assignments)?;
            writeln!(out, "session {sid}")?;
            writeln!(out, "batch {} round {} ({} parcels)", round.batch_id(), round.round, round.batch.len())?;
            for (a, ids) in &round.assignments {
                writeln!(out, "  {a} {}", ids.len())?;
            }
        }
        Command::ExportSheet {
            store,
            batch,
            annotator,
            out: path,
        } => {
            let st = open_store(&store, &cfg)?;
            let round = st.batch(&batch)?;
            let ids = match &annotator {
                Some(a) => round
                    .assignments
                    .get(a)
                    .cloned()
                    .ok_or_else(|| CliError::Usage(format!("{a} has no assignment in {batch}")))?,
                None => round.batch.parcel_ids.clone(),
            };
            let entry = st.dataset(&dataset_name(&store.data.data))?;
            export_sheet(&ids, &entry.dataset, None, writer(path.as_deref())?)?;
        }
        Command::ImportSheet {
            store,
            batch,
            annotator,
            sheet,
        } => {
            let st = open_store(&store, &cfg)?;
            let round = st.batch(&batch)?;
            let expected = round.assignments.get(&annotator).cloned().unwrap_or_default();
            let expected = expected.into_iter().collect();
            let entries = import_sheet(BufReader::new(File::open(&sheet)?), Some(&expected))?;
            let inputs: Vec<LabelInput> = entries
                .into_iter()
                .filter_map(|e| {
                    e.label.map(|label| LabelInput {
                        parcel_id: e.parcel_id,
                        label,
                        comment: e.comment,
                    })
                })
                .collect();
            let report = st.submit_labels(&batch, &annotator, &inputs, Provenance::Expert)?;
            writeln!(
                out,
                "accepted {} labels for round {}; {} assignments remain; state {}",
                report.accepted, report.round, report.remaining, report.state
            )?;
            for c in &report.new_conflicts {
                writeln!(out, "  new conflict {c}")?;
            }
        }
        Command::Audit {
            store,
            session,
            resolve,
            label,
            rationale,
            resolver,
            dot,
        } => {
            let st = open_store(&store, &cfg)?;
            if let Some(cid) = resolve {
                let req = ResolutionRequest {
                    final_label: label.expect("clap enforces --label"),
                    rationale: rationale.unwrap_or_default(),
                    resolver_id: resolver.unwrap_or_default(),
                };
                let records = st.resolve_conflict(&cid, req)?;
                writeln!(out, "resolved {cid}: appended {} records", records.len())?;
                return Ok(());
            }
            let (conflicts, trees) = st.read(&session, |s, _| (s.conflicts.clone(), s.audit_trees.clone()))?;
            for c in conflicts.values() {
                let status = if c.status == ConflictStatus::Open { "open" } else { "resolved" };
                let parcels: Vec<&str> = c.parcel_ids.iter().map(|p| p.as_str()).collect();
                writeln!(out, "{} {:?} {status} {}", c.conflict_id, c.kind, parcels.join(","))?;
            }
            writeln!(out, "{} conflicts", conflicts.len())?;
            if let Some(dir) = dot {
                fs::create_dir_all(&dir)?;
                for (kind, t) in &trees {
                    let path = dir.join(format!("audit_{}.dot", kind.as_str().to_ascii_lowercase()));
                    fs::write(&path, &t.dot)?;
                    writeln!(out, "wrote {}", path.display())?;
                }
            }
        }
        Command::Train { store, session, force } => {
            let st = open_store(&store, &cfg)?;
            let before = st.read(&session, |s, _| s.warnings.len())?;
            let snap = st.retrain(&session, force)?;
            for w in st.read(&session, |s, _| s.warnings[before..].to_vec())? {
                writeln!(out, "warning: {w}")?;
            }
            writeln!(out, "snapshot {} round {} ({} labels)", snap.snapshot_id, snap.round, snap.label_count)?;
            for (kind, t) in &snap.hitl.kinds {
                let acc = t
                    .internal_accuracy
                    .as_ref()
                    .map(|a| format!("cv {:.3} oob {:.3}", a.cv_mean, a.oob))
                    .unwrap_or_else(|| format!("NA ({})", t.note));
                writeln!(out, "  {} n={} vad={} {acc}", kind.as_str(), t.counts.n, t.counts.n_vad)?;
            }
        }
        Command::Predict {
            store,
            session,
            kind,
            out: path,
        } => {
            let st = open_store(&store, &cfg)?;
            let rows = st.read(&session, |s, _| -> Result<_, SessionError> {
                s.latest_snapshot().ok_or(SessionError::NotTrained)?;
                Ok((s.config.threshold, s.predictions().clone()))
            })??;
            let (t, preds) = rows;
            let mut w = writer(path.as_deref())?;
            writeln!(w, "parcel_id,kind,probability,baseline_probability,predicted")?;
            for (id, p) in preds.iter().filter(|(_, p)| kind.is_none_or(|k| p.kind == k)) {
                let base = p.baseline_probability.map(|b| b.to_string()).unwrap_or_default();
                let label = if p.probability >= t { Label::Vad } else { Label::NotVad };
                writeln!(w, "{id},{},{},{base},{}", p.kind.as_str(), p.probability, label.as_str())?;
            }
            w.flush()?;
        }
        Command::Evaluate {
            store,
            session,
            plot_dir,
        } => {
            let st = open_store(&store, &cfg)?;
            let (snap, labels, params, seed) = st.read(&session, |s, _| -> Result<_, SessionError> {
                let snap = s.latest_snapshot().ok_or(SessionError::NotTrained)?.clone();
                let labels = s.log.prefix(snap.label_seq_end).effective_labels();
                Ok((snap, labels, s.config.forest, s.config.seed))
            })??;
            writeln!(out, "snapshot {}", snap.snapshot_id)?;
            let mut summaries = vec![("HITL", &snap.hitl)];
            if let Some(b) = &snap.baseline {
                summaries.push(("Simple ML", b));
            }
            for (name, m) in summaries {
                for (kind, t) in &m.kinds {
                    match &t.internal_accuracy {
                        Some(a) => writeln!(
                            out,
                            "{name} {}: cv {:.3} holdout {:.3} oob {:.3} (n={})",
                            kind.as_str(),
                            a.cv_mean,
                            a.holdout,
                            a.oob,
                            t.counts.n
                        )?,
                        None => writeln!(out, "{name} {}: NA ({})", kind.as_str(), t.note)?,
                    }
                }
            }
            let entry = st.dataset(&dataset_name(&store.data.data))?;
            let columns: Vec<usize> = (0..N_FEATURES).collect();
            let models = st.models(&session)?;
            for kind in ParcelKind::ALL {
                if !labels.keys().any(|id| entry.dataset.kind_of(id) == Some(kind)) {
                    continue;
                }
                let data = kind_training_data(&entry.dataset, &labels, kind, &columns)?;
                let tag = kind.as_str().to_ascii_lowercase();
                match drop_column_importance(&data, &params, &groups_for(&data), 5, seed) {
                    Ok(rep) => {
                        writeln!(out, "importance {}: {}", kind.as_str(), rep.ranking().join(" > "))?;
                        if let Some(dir) = &plot_dir {
                            rep.write_csv(writer(Some(&dir.join(format!("importance_{tag}.csv"))))?)
                                .map_err(|e| CliError::Other(e.to_string()))?;
                        }
                    }
                    Err(e) => writeln!(out, "importance {}: unavailable ({e})", kind.as_str())?,
                }
                let (Some(dir), Some(forest)) = (&plot_dir, models.hitl.get(kind)) else {
                    continue;
                };
                for (j, name) in FEATURE_NAMES.iter().enumerate() {
                    let curve = partial_dependence(forest, data.rows(), j, None).map_err(|e| CliError::Other(e.to_string()))?;
                    curve
                        .write_csv(writer(Some(&dir.join(format!("pd_{tag}_{name}.csv"))))?)
                        .map_err(|e| CliError::Other(e.to_string()))?;
                }
            }
            if let Some(dir) = &plot_dir {
                writeln!(out, "wrote plot tables to {}", dir.display())?;
            }
        }
        Command::Compare { store, session, json } => {
            let st = open_store(&store, &cfg)?;
            let report = st.report(&session)?;
            write!(out, "{}", report.to_text())?;
            if let Some(path) = json {
                serde_json::to_writer_pretty(writer(Some(&path))?, &report)?;
                let csv = path.with_extension("consensus.csv");
                report
                    .write_csv(MetricFamily::Consensus, writer(Some(&csv))?)
                    .map_err(|e| CliError::Other(e.to_string()))?;
            }
        }
        Command::Serve {
            data,
            store,
            addr,
            static_dir,
        } => {
            let st = SessionStore::open(&store, Arc::new(SystemClock))?;
            for dir in &data {
                let entry = load_dataset(dir, &cfg, None)?;
                log::info!("registered dataset {} ({} parcels)", entry.name, entry.dataset.parcels.len());
                st.register_dataset(entry);
            }
            let app = crate::api::router(Arc::new(st), static_dir);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(addr).await?;
                log::info!("listening on {}", listener.local_addr()?);
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await
            })?;
        }
    }
    Ok(())
}
