//! End-to-end experiments driven by a [`RunManifest`]: ingest, corrupt,
//! train, select samples, max margins, margins on a worker pool, reports.
//!
//! Every stage caches its outputs in the experiment directory and is
//! skipped when they already exist, so stages can be run one at a time or
//! all at once, and an interrupted run picks up where it stopped.

pub mod ledger;
pub mod manifest;
pub mod pool;
mod verify;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{
    corrupt, gaussian_blobs, load_idx_dataset, read_dataset, split_train_validation, write_dataset, CorruptionKind,
    LabeledDataset, Split,
};
use crate::error::{Error, Result};
use crate::geometry::{
    distance_matrix, max_margin, nearest_different, scatter_before_after, write_distance_matrix, write_scatter_csv,
    Labeling, MaxMarginRecord, Neighbor, ScatterGroup,
};
use crate::model::{read_checkpoint, train, write_checkpoint, MlpModel, TrainReport};
use crate::report::{
    aggregate, capacity_curves, spearman, write_curves_csv, write_histograms_csv, write_skew_csv,
    write_summaries_csv, skew_report, BinEdges, CurveRow, GroupKey, MarginSummary, ModelKind,
};
use crate::solver::{solve_margins, MarginResult, MarginStatus, MarginTask, PairStatus};

pub use ledger::{replay, CellKey, JobLedger, LedgerState};
pub use manifest::{DatasetConfig, DatasetSource, IdxFiles, RunManifest, Variant, MANIFEST_FORMAT_VERSION};
pub use pool::{run_pool, JobOutcome, PoolOptions, PoolStats};
pub use verify::{Check, VerifyOptions, VerifyReport};

const HASH_FILE: &str = "MANIFEST_SHA256";
/// Distance matrices up to this many entries also get a CSV copy.
const MATRIX_CSV_LIMIT: usize = 90_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOptions {
    pub workers: usize,
    /// Continue margin work recorded in an existing ledger.
    pub resume: bool,
    /// Fault injection: stop the margin stage after this many jobs.
    pub abort_after_jobs: Option<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            workers: 1,
            resume: false,
            abort_after_jobs: None,
        }
    }
}

/// Per-cell numbers gathered by the report stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub variant: String,
    pub kind: CorruptionKind,
    pub capacity: usize,
    pub seed: u64,
    /// `ok`, `train_failed` or `partial`.
    pub status: String,
    pub epochs_run: usize,
    pub train_error: Option<f64>,
    pub val_error: Option<f64>,
    pub interpolated: bool,
    pub selected: usize,
    /// Selected samples the model classifies correctly.
    pub eligible: usize,
    pub completed: usize,
    pub failed_samples: usize,
    pub valid_margins: usize,
    pub cmps: usize,
    /// Pairs whose residual is within the validity threshold.
    pub cmps_within_threshold: usize,
    pub cmps_dominated: usize,
    pub cmps_restarted: usize,
    pub evaluations: usize,
    pub with_upper_bound: usize,
    pub sandwich_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendRow {
    pub variant: String,
    pub group: GroupKey,
    pub cells: usize,
    /// Spearman correlation of capacity against per-cell mean margin.
    pub spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixInfo {
    pub cell: CellKey,
    pub clean: usize,
    pub corrupt: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub name: String,
    pub kind: CorruptionKind,
    pub curves: Vec<CurveRow>,
    pub max_margin: Vec<ScatterGroup>,
}

/// Contents of `reports/summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub manifest_sha256: String,
    pub cells: Vec<CellReport>,
    pub summaries: Vec<(String, MarginSummary)>,
    pub variants: Vec<VariantReport>,
    pub trends: Vec<TrendRow>,
    pub distance_matrix: Option<MatrixInfo>,
    pub bin_edges: BinEdges,
}

impl ExperimentSummary {
    pub fn partial_failure(&self) -> bool {
        self.cells.iter().any(|c| c.status != "ok")
    }
}

#[derive(Serialize, Deserialize)]
struct Stamped<T> {
    manifest_sha256: String,
    #[serde(flatten)]
    body: T,
}

#[derive(Serialize, Deserialize)]
struct Selection {
    seed: u64,
    sample_ids: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct Neighbors {
    variant: String,
    k: usize,
    sample_ids: Vec<u64>,
    neighbors: Vec<Vec<Neighbor>>,
}

#[derive(Serialize, Deserialize)]
struct TrainRecord {
    cell: CellKey,
    report: TrainReport,
}

#[derive(Serialize, Deserialize)]
struct TrainFailure {
    cell: CellKey,
    error: String,
}

#[derive(Serialize, Deserialize)]
struct MaxMargins {
    variant: String,
    records: Vec<MaxMarginRecord>,
    groups: Vec<ScatterGroup>,
}

fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    write(&tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// An opened experiment directory bound to one manifest.
pub struct Experiment {
    pub manifest: RunManifest,
    pub dir: PathBuf,
    pub hash: String,
    pub opts: RunOptions,
}

impl Experiment {
    /// Validates the manifest and claims `manifest.output_dir`. A directory
    /// created from a different manifest, or holding unrelated files, is
    /// rejected.
    pub fn open(manifest: RunManifest, opts: RunOptions) -> Result<Self> {
        manifest.validate()?;
        if opts.workers == 0 {
            return Err(Error::InvalidConfig("workers must be >= 1".into()));
        }
        let dir = manifest.output_path();
        let hash = manifest.hash();
        let hash_path = dir.join(HASH_FILE);
        match std::fs::read_to_string(&hash_path) {
            Ok(found) if found.trim() == hash => {}
            Ok(found) => {
                return Err(Error::ManifestMismatch {
                    dir,
                    expected: hash,
                    found: found.trim().to_string(),
                })
            }
            Err(_) => {
                if dir.read_dir().is_ok_and(|mut d| d.next().is_some()) {
                    return Err(Error::ManifestMismatch {
                        dir,
                        expected: hash,
                        found: "none (directory is not empty)".into(),
                    });
                }
                mkdir(&dir)?;
                let m = dir.join("manifest.toml");
                let copy = RunManifest {
                    output_dir: ".".into(),
                    ..manifest.clone()
                };
                std::fs::write(&m, copy.to_toml()).map_err(|e| Error::io(&m, e))?;
                std::fs::write(&hash_path, format!("{hash}\n")).map_err(|e| Error::io(&hash_path, e))?;
            }
        }
        for sub in ["data", "models", "geometry", "reports"] {
            mkdir(&dir.join(sub))?;
        }
        Ok(Experiment { manifest, dir, hash, opts })
    }

    pub fn header(&self) -> Vec<(&'static str, String)> {
        vec![
            ("manifest_sha256", self.hash.clone()),
            ("format_version", MANIFEST_FORMAT_VERSION.to_string()),
        ]
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn write_json<T: Serialize>(&self, path: &Path, body: T) -> Result<()> {
        let stamped = Stamped {
            manifest_sha256: self.hash.clone(),
            body,
        };
        let text = serde_json::to_string_pretty(&stamped).expect("outputs serialize");
        write_atomic(path, |tmp| std::fs::write(tmp, text).map_err(|e| Error::io(tmp, e)))
    }

    fn read_json<T: DeserializeOwned>(&self, path: &Path) -> Result<Option<T>> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(path, e)),
        };
        let s: Stamped<T> = serde_json::from_str(&text).map_err(|e| Error::format("output json", format!("{}: {e}", path.display())))?;
        if s.manifest_sha256 != self.hash {
            return Err(Error::ManifestMismatch {
                dir: path.to_path_buf(),
                expected: self.hash.clone(),
                found: s.manifest_sha256,
            });
        }
        Ok(Some(s.body))
    }

    pub fn cells(&self) -> Vec<CellKey> {
        let m = &self.manifest;
        let mut out = Vec::new();
        for v in &m.variants {
            for &capacity in &m.capacities {
                for &seed in &m.seeds {
                    out.push(CellKey {
                        variant: v.name.clone(),
                        capacity,
                        seed,
                    });
                }
            }
        }
        out
    }

    fn variant_of(&self, cell: &CellKey) -> &Variant {
        self.manifest.variant(&cell.variant).expect("cells come from the manifest")
    }

    // ---- ingest / corrupt ----

    pub fn ingest(&self) -> Result<()> {
        let (tp, vp) = (self.path("data/train.mlds"), self.path("data/validation.mlds"));
        if tp.is_file() && vp.is_file() {
            return Ok(());
        }
        let d = &self.manifest.dataset;
        let full = match d.source()? {
            DatasetSource::Idx(f) => load_idx_dataset(&self.manifest.resolve(&f.images), &self.manifest.resolve(&f.labels))?,
            DatasetSource::Blobs(spec) => gaussian_blobs(spec)?,
        };
        let (tr, val) = split_train_validation(&full, d.validation_size, d.split_seed)?;
        if self.manifest.sample_budget > tr.len() {
            return Err(Error::Manifest(format!(
                "sample_budget {} exceeds the training split size {}",
                self.manifest.sample_budget,
                tr.len()
            )));
        }
        log::info!("ingest: {} train, {} validation samples", tr.len(), val.len());
        write_atomic(&vp, |p| write_dataset(p, &val))?;
        write_atomic(&tp, |p| write_dataset(p, &tr))
    }

    pub fn train_split(&self) -> Result<LabeledDataset> {
        read_dataset(&self.path("data/train.mlds"))
    }

    pub fn validation_split(&self) -> Result<LabeledDataset> {
        read_dataset(&self.path("data/validation.mlds"))
    }

    fn variant_path(&self, name: &str) -> PathBuf {
        self.path(&format!("data/train_{name}.mlds"))
    }

    pub fn corrupt(&self) -> Result<()> {
        self.ingest()?;
        let pending: Vec<&Variant> = self.manifest.variants.iter().filter(|v| !self.variant_path(&v.name).is_file()).collect();
        if pending.is_empty() {
            return Ok(());
        }
        let base = self.train_split()?;
        for v in pending {
            let ds = corrupt(&base, &v.corruption())?;
            log::info!("corrupt: variant {} has {} corrupted samples", v.name, ds.corrupted_count());
            write_atomic(&self.variant_path(&v.name), |p| write_dataset(p, &ds))?;
        }
        Ok(())
    }

    pub fn variant_dataset(&self, name: &str) -> Result<LabeledDataset> {
        read_dataset(&self.variant_path(name))
    }

    // ---- train ----

    fn model_path(&self, cell: &CellKey) -> PathBuf {
        self.path(&format!("models/{}.mlpm", cell.stem()))
    }

    fn train_record_path(&self, cell: &CellKey) -> PathBuf {
        self.path(&format!("models/{}.train.json", cell.stem()))
    }

    fn train_failure_path(&self, cell: &CellKey) -> PathBuf {
        self.path(&format!("models/{}.failed.json", cell.stem()))
    }

    pub fn load_model(&self, cell: &CellKey) -> Result<MlpModel> {
        read_checkpoint(&self.model_path(cell))
    }

    pub fn train_report(&self, cell: &CellKey) -> Result<Option<TrainReport>> {
        Ok(self.read_json::<TrainRecord>(&self.train_record_path(cell))?.map(|r| r.report))
    }

    /// Trains every cell without a checkpoint. Returns the cells whose
    /// training failed; they are skipped downstream.
    pub fn train(&self) -> Result<Vec<CellKey>> {
        self.corrupt()?;
        let pending: Vec<CellKey> = self
            .cells()
            .into_iter()
            .filter(|c| !(self.model_path(c).is_file() && self.train_record_path(c).is_file()))
            .collect();
        if !pending.is_empty() {
            let val = self.validation_split()?;
            let datasets: BTreeMap<String, LabeledDataset> = pending
                .iter()
                .map(|c| c.variant.clone())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .map(|v| Ok((v.clone(), self.variant_dataset(&v)?)))
                .collect::<Result<_>>()?;
            let opts = PoolOptions {
                workers: self.opts.workers,
                max_retries: 0,
                abort_after_jobs: None,
            };
            run_pool(
                &pending,
                opts,
                |cell| {
                    let ds = &datasets[&cell.variant];
                    let cfg = self.manifest.train_config(self.variant_of(cell), cell.seed);
                    let init = MlpModel::init(ds.dim(), cell.capacity, ds.num_classes(), cell.seed)?;
                    let started = std::time::Instant::now();
                    let (model, report) = train(&init, ds, &val, &cfg)?;
                    log::info!(
                        "train {cell}: {} epochs, train error {:.4}, val error {:.4}, {:.0}s",
                        report.epochs_run,
                        report.final_train_error,
                        report.final_val_error,
                        started.elapsed().as_secs_f64()
                    );
                    Ok((model, report))
                },
                |k, outcome| {
                    let cell = &pending[k];
                    match outcome {
                        JobOutcome::Done((model, report)) => {
                            let mut header = self.header();
                            header.push(("cell", cell.to_string()));
                            crate::model::write_curves_csv(&self.path(&format!("models/{}.curves.csv", cell.stem())), &report, &header)?;
                            write_atomic(&self.model_path(cell), |p| write_checkpoint(p, &model))?;
                            let _ = std::fs::remove_file(self.train_failure_path(cell));
                            self.write_json(&self.train_record_path(cell), TrainRecord { cell: cell.clone(), report })
                        }
                        JobOutcome::Failed(error) => {
                            log::error!("train {cell} failed: {error}");
                            self.write_json(&self.train_failure_path(cell), TrainFailure { cell: cell.clone(), error })
                        }
                    }
                },
            )?;
        }
        Ok(self.cells().into_iter().filter(|c| !self.model_path(c).is_file()).collect())
    }

    // ---- selection and max margins ----

    /// The seeded sample selection, ascending by id. It depends only on the
    /// manifest seed and the training split, so every model is measured on
    /// the same ids.
    pub fn selection(&self) -> Result<Vec<u64>> {
        let path = self.path("selection.json");
        if let Some(s) = self.read_json::<Selection>(&path)? {
            return Ok(s.sample_ids);
        }
        self.ingest()?;
        let ds = self.train_split()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.manifest.seed);
        let picked = rand::seq::index::sample(&mut rng, ds.len(), self.manifest.sample_budget);
        let mut ids: Vec<u64> = picked.iter().map(|p| ds.ids()[p]).collect();
        ids.sort_unstable();
        self.write_json(
            &path,
            Selection {
                seed: self.manifest.seed,
                sample_ids: ids.clone(),
            },
        )?;
        Ok(ids)
    }

    fn neighbors_path(&self, variant: &str) -> PathBuf {
        self.path(&format!("geometry/{variant}.neighbors.json"))
    }

    fn max_margin_path(&self, variant: &str) -> PathBuf {
        self.path(&format!("geometry/{variant}.maxmargin.json"))
    }

    /// Nearest different-effective-label candidates of each selected sample,
    /// aligned with [`Self::selection`].
    pub fn neighbors(&self, variant: &str) -> Result<Vec<Vec<Neighbor>>> {
        self.read_json::<Neighbors>(&self.neighbors_path(variant))?
            .map(|n| n.neighbors)
            .ok_or_else(|| Error::Inconsistent(format!("neighbors of variant {variant} not computed yet")))
    }

    pub fn max_margins(&self, variant: &str) -> Result<(Vec<MaxMarginRecord>, Vec<ScatterGroup>)> {
        self.read_json::<MaxMargins>(&self.max_margin_path(variant))?
            .map(|m| (m.records, m.groups))
            .ok_or_else(|| Error::Inconsistent(format!("max margins of variant {variant} not computed yet")))
    }

    /// Max margins before and after corruption for the selected samples,
    /// plus the neighbor candidates used as bisection references.
    pub fn maxmargins(&self) -> Result<()> {
        self.corrupt()?;
        let ids = self.selection()?;
        let pending: Vec<&Variant> = self
            .manifest
            .variants
            .iter()
            .filter(|v| !(self.neighbors_path(&v.name).is_file() && self.max_margin_path(&v.name).is_file()))
            .collect();
        if pending.is_empty() {
            return Ok(());
        }
        let original = self.train_split()?;
        let before = max_margin(&original, &ids, Labeling::TrueLabels)?;
        drop(original);
        for v in pending {
            let ds = self.variant_dataset(&v.name)?;
            let positions = crate::geometry::positions_of(&ds, &ids)?;
            let started = std::time::Instant::now();
            let neighbors = nearest_different(&ds, &positions, Labeling::EffectiveLabels, self.manifest.neighbor_candidates)?;
            log::info!("maxmargins {}: {} queries in {:.1}s", v.name, ids.len(), started.elapsed().as_secs_f64());
            let records: Vec<MaxMarginRecord> = ids
                .iter()
                .zip(&positions)
                .zip(before.iter().zip(&neighbors))
                .map(|((&id, &pos), (b, n))| MaxMarginRecord {
                    sample_id: id,
                    corruption: ds.corruption_flags()[pos],
                    dist_before: b.distance,
                    dist_after: n[0].distance,
                    neighbor_id_before: b.id,
                    neighbor_id_after: n[0].id,
                })
                .collect();
            let scatter = scatter_before_after(&records);
            write_scatter_csv(&self.path(&format!("geometry/{}.maxmargin.csv", v.name)), &scatter, &self.header())?;
            self.write_json(
                &self.neighbors_path(&v.name),
                Neighbors {
                    variant: v.name.clone(),
                    k: self.manifest.neighbor_candidates,
                    sample_ids: ids.clone(),
                    neighbors,
                },
            )?;
            self.write_json(
                &self.max_margin_path(&v.name),
                MaxMargins {
                    variant: v.name.clone(),
                    records,
                    groups: scatter.groups,
                },
            )?;
        }
        Ok(())
    }

    // ---- margins ----

    /// Selected samples the cell's model classifies correctly, with the
    /// position of each one's bisection reference if a candidate qualifies.
    fn eligible(&self, model: &MlpModel, ds: &LabeledDataset, ids: &[u64], neighbors: &[Vec<Neighbor>]) -> Result<Vec<(usize, Option<usize>)>> {
        let positions = crate::geometry::positions_of(ds, ids)?;
        let mut wanted: Vec<usize> = positions.clone();
        wanted.extend(neighbors.iter().flatten().map(|n| n.index));
        wanted.sort_unstable();
        wanted.dedup();
        let preds = model.predict_dataset(&ds.subset(&wanted, Split::Train))?;
        let pred: HashMap<usize, usize> = wanted.into_iter().zip(preds).collect();
        let correct = |p: usize| pred[&p] == ds.effective_labels()[p];
        Ok(positions
            .iter()
            .zip(neighbors)
            .filter(|(&p, _)| correct(p))
            .map(|(&p, cands)| (p, cands.iter().map(|n| n.index).find(|&q| correct(q))))
            .collect())
    }

    /// Solves every outstanding margin and records it in the ledger.
    pub fn margins(&self) -> Result<LedgerState> {
        let failed_cells = self.train()?;
        self.maxmargins()?;
        let ids = self.selection()?;
        let (mut ledger, mut state) = JobLedger::open(&self.path("ledger.jsonl"), &self.hash)?;

        struct CellCtx {
            key: CellKey,
            model: MlpModel,
            variant: String,
        }
        struct Job {
            cell: usize,
            samples: Vec<(usize, Option<usize>)>,
        }
        let mut datasets: BTreeMap<String, LabeledDataset> = BTreeMap::new();
        let mut cells = Vec::new();
        let mut jobs = Vec::new();
        for key in self.cells().into_iter().filter(|c| !failed_cells.contains(c)) {
            if !datasets.contains_key(&key.variant) {
                datasets.insert(key.variant.clone(), self.variant_dataset(&key.variant)?);
            }
            let ds = &datasets[&key.variant];
            let model = self.load_model(&key)?;
            let neighbors = self.neighbors(&key.variant)?;
            let pending: Vec<_> = self
                .eligible(&model, ds, &ids, &neighbors)?
                .into_iter()
                .filter(|(p, _)| !state.is_complete(&key, ds.ids()[*p], ds.num_classes()))
                .collect();
            if pending.is_empty() {
                continue;
            }
            for chunk in pending.chunks(self.manifest.margin_block) {
                jobs.push(Job {
                    cell: cells.len(),
                    samples: chunk.to_vec(),
                });
            }
            let variant = key.variant.clone();
            cells.push(CellCtx { key, model, variant });
        }
        if jobs.is_empty() {
            return Ok(state);
        }
        if state.records > 0 && !self.opts.resume {
            return Err(Error::ResumeRequired(self.dir.clone()));
        }
        let total = jobs.len();
        log::info!("margins: {total} jobs over {} cells", cells.len());
        let started = std::time::Instant::now();
        let opts = PoolOptions {
            workers: self.opts.workers,
            max_retries: self.manifest.max_job_retries,
            abort_after_jobs: self.opts.abort_after_jobs,
        };
        let solver = &self.manifest.solver;
        let mut done = 0;
        run_pool(
            &jobs,
            opts,
            |job| {
                let cell = &cells[job.cell];
                let ds = &datasets[&cell.variant];
                let xs: Vec<Vec<f64>> = job.samples.iter().map(|&(p, _)| ds.sample(p).features_f64()).collect();
                let refs: Vec<Option<Vec<f64>>> = job.samples.iter().map(|&(_, r)| r.map(|q| ds.sample(q).features_f64())).collect();
                let tasks: Vec<MarginTask> = job
                    .samples
                    .iter()
                    .zip(xs.iter().zip(&refs))
                    .map(|(&(p, _), (x, r))| MarginTask {
                        sample_id: ds.ids()[p],
                        x,
                        reference: r.as_deref(),
                    })
                    .collect();
                solve_margins(&cell.model, &tasks, solver)
            },
            |k, outcome| {
                let job = &jobs[k];
                let cell = &cells[job.cell];
                done += 1;
                if done % 10 == 0 || done == total {
                    log::info!("margins: {done}/{total} jobs, {:.0}s", started.elapsed().as_secs_f64());
                }
                match outcome {
                    JobOutcome::Done(results) => ledger.record_results(&cell.key, &results, &mut state),
                    JobOutcome::Failed(err) => {
                        let ds = &datasets[&cell.variant];
                        let sample_ids: Vec<u64> = job.samples.iter().map(|&(p, _)| ds.ids()[p]).collect();
                        ledger.record_failure(&cell.key, &sample_ids, &err, &mut state)
                    }
                }
            },
        )?;
        Ok(state)
    }

    // ---- report ----

    /// Runs every stage that is not done yet and writes the reports.
    pub fn run(&self) -> Result<ExperimentSummary> {
        let state = self.margins()?;
        self.report_from(&state)
    }

    pub(crate) fn report_from(&self, state: &LedgerState) -> Result<ExperimentSummary> {
        let ids = self.selection()?;
        let mut cells = Vec::new();
        let mut per_cell: Vec<(CellKey, Vec<MarginResult>)> = Vec::new();
        let mut datasets: BTreeMap<String, LabeledDataset> = BTreeMap::new();
        for key in self.cells() {
            let v = self.variant_of(&key).clone();
            if !datasets.contains_key(&v.name) {
                datasets.insert(v.name.clone(), self.variant_dataset(&v.name)?);
            }
            let ds = &datasets[&v.name];
            let Some(train_report) = self.train_report(&key)? else {
                cells.push(CellReport::train_failed(&key, &v, ids.len()));
                continue;
            };
            let model = self.load_model(&key)?;
            let eligible = self.eligible(&model, ds, &ids, &self.neighbors(&v.name)?)?;
            let results = state.results(&key, ds.num_classes());
            let failed = state.failed.get(&key).map_or(0, |f| f.len());
            let mut c = CellReport::train_failed(&key, &v, ids.len());
            c.epochs_run = train_report.epochs_run;
            c.train_error = Some(train_report.final_train_error);
            c.val_error = Some(train_report.final_val_error);
            c.interpolated = train_report.interpolated;
            c.eligible = eligible.len();
            c.completed = results.len();
            c.failed_samples = failed;
            c.status = if results.len() == eligible.len() { "ok" } else { "partial" }.to_string();
            let tol = self.manifest.solver.sandwich_tol;
            for r in &results {
                c.valid_margins += usize::from(r.status == MarginStatus::Valid);
                c.cmps += r.pairs.len();
                for p in &r.pairs {
                    c.cmps_within_threshold += usize::from(p.residual <= self.manifest.solver.validity_threshold);
                    c.cmps_dominated += usize::from(p.status == PairStatus::Dominated);
                    c.cmps_restarted += usize::from(p.restarted);
                    c.evaluations += p.evaluations;
                }
                if let Some(ub) = r.upper_bound {
                    c.with_upper_bound += 1;
                    c.sandwich_violations += usize::from(r.margin.is_none_or(|m| m > ub + tol));
                }
            }
            cells.push(c);
            per_cell.push((key, results));
        }

        let max = per_cell
            .iter()
            .flat_map(|(_, rs)| rs.iter().filter_map(|r| r.margin))
            .fold(0.0, f64::max);
        let edges = BinEdges::uniform(max, self.manifest.histogram_bins)?;
        let mut summaries: Vec<(String, MarginSummary)> = Vec::new();
        for (key, results) in &per_cell {
            let v = self.variant_of(key);
            for s in aggregate(results, &datasets[&v.name], ModelKind::from(v.kind), key.capacity, key.seed, &edges)? {
                summaries.push((v.name.clone(), s));
            }
        }

        let header = self.header();
        let reports = self.path("reports");
        let mut variants = Vec::new();
        let mut trends = Vec::new();
        for v in &self.manifest.variants {
            let own: Vec<MarginSummary> = summaries.iter().filter(|(n, _)| n == &v.name).map(|(_, s)| s.clone()).collect();
            let dir = reports.join(&v.name);
            mkdir(&dir)?;
            let curves = capacity_curves(&own)?;
            write_summaries_csv(&dir.join("summaries.csv"), &own, &header)?;
            write_histograms_csv(&dir.join("histograms.csv"), &own, &edges, &header)?;
            write_curves_csv(&dir.join("curves.csv"), &curves, &header)?;
            write_skew_csv(&dir.join("skew.csv"), &skew_report(&own), &header)?;
            for group in GroupKey::admissible(ModelKind::from(v.kind)) {
                let pts: Vec<(f64, f64)> = own
                    .iter()
                    .filter(|s| s.group == group)
                    .filter_map(|s| s.mean.map(|m| (s.capacity as f64, m)))
                    .collect();
                let (x, y): (Vec<f64>, Vec<f64>) = pts.iter().copied().unzip();
                trends.push(TrendRow {
                    variant: v.name.clone(),
                    group,
                    cells: pts.len(),
                    spearman: spearman(&x, &y),
                });
            }
            let (_, groups) = self.max_margins(&v.name)?;
            variants.push(VariantReport {
                name: v.name.clone(),
                kind: v.kind,
                curves,
                max_margin: groups,
            });
        }
        write_cells_csv(&reports.join("cells.csv"), &cells, &header)?;
        write_trends_csv(&reports.join("trends.csv"), &trends, &header)?;
        let distance = self.write_matrix(&per_cell, &datasets)?;

        let summary = ExperimentSummary {
            manifest_sha256: self.hash.clone(),
            cells,
            summaries,
            variants,
            trends,
            distance_matrix: distance,
            bin_edges: edges,
        };
        let path = reports.join("summary.json");
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        write_atomic(&path, |p| std::fs::write(p, text).map_err(|e| Error::io(p, e)))?;
        Ok(summary)
    }

    /// Distances among the smallest-margin clean and corrupt samples of the
    /// widest model of the first label-corrupted variant (or failing that,
    /// the first corrupted one, or the first one).
    fn write_matrix(&self, per_cell: &[(CellKey, Vec<MarginResult>)], datasets: &BTreeMap<String, LabeledDataset>) -> Result<Option<MatrixInfo>> {
        let vs = &self.manifest.variants;
        let variant = vs
            .iter()
            .find(|v| v.kind == CorruptionKind::Label)
            .or_else(|| vs.iter().find(|v| v.kind != CorruptionKind::None))
            .unwrap_or(&vs[0]);
        let Some((key, results)) = per_cell
            .iter()
            .filter(|(k, _)| k.variant == variant.name)
            .max_by(|a, b| a.0.capacity.cmp(&b.0.capacity).then(b.0.seed.cmp(&a.0.seed)))
        else {
            return Ok(None);
        };
        let ds = &datasets[&variant.name];
        let index = ds.id_index();
        let mut groups: [Vec<(f64, u64)>; 2] = [Vec::new(), Vec::new()];
        for r in results {
            if let Some(m) = r.margin {
                let corrupt = ds.corruption_flags()[index[&r.sample_id]].is_corrupt();
                groups[usize::from(corrupt)].push((m, r.sample_id));
            }
        }
        let n = self.manifest.distance_matrix_size;
        let mut ids = Vec::new();
        for g in &mut groups {
            g.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            g.truncate(n);
            ids.extend(g.iter().map(|&(_, id)| id));
        }
        if ids.is_empty() {
            return Ok(None);
        }
        let margins: HashMap<u64, f64> = groups.iter().flatten().map(|&(m, id)| (id, m)).collect();
        let m = distance_matrix(ds, &ids, &ids, &margins)?;
        let mut header = self.header();
        header.push(("cell", key.to_string()));
        write_distance_matrix(&self.path("reports"), "distance_matrix", &m, &header, MATRIX_CSV_LIMIT)?;
        Ok(Some(MatrixInfo {
            cell: key.clone(),
            clean: groups[0].len(),
            corrupt: groups[1].len(),
        }))
    }

    /// Reads `reports/summary.json`, if the report stage has run.
    pub fn summary(&self) -> Result<Option<ExperimentSummary>> {
        let path = self.path("reports/summary.json");
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let s: ExperimentSummary = serde_json::from_str(&text).map_err(|e| Error::format("summary", e.to_string()))?;
        if s.manifest_sha256 != self.hash {
            return Err(Error::ManifestMismatch {
                dir: self.dir.clone(),
                expected: self.hash.clone(),
                found: s.manifest_sha256,
            });
        }
        Ok(Some(s))
    }

    pub fn verify(&self, opts: &VerifyOptions) -> Result<VerifyReport> {
        verify::verify(self, opts)
    }
}

impl CellReport {
    fn train_failed(key: &CellKey, v: &Variant, selected: usize) -> Self {
        CellReport {
            variant: key.variant.clone(),
            kind: v.kind,
            capacity: key.capacity,
            seed: key.seed,
            status: "train_failed".into(),
            epochs_run: 0,
            train_error: None,
            val_error: None,
            interpolated: false,
            selected,
            eligible: 0,
            completed: 0,
            failed_samples: 0,
            valid_margins: 0,
            cmps: 0,
            cmps_within_threshold: 0,
            cmps_dominated: 0,
            cmps_restarted: 0,
            evaluations: 0,
            with_upper_bound: 0,
            sandwich_violations: 0,
        }
    }
}

fn write_cells_csv(path: &Path, cells: &[CellReport], header: &[(&str, String)]) -> Result<()> {
    let mut out = crate::report::csv_header(header);
    out.push_str(
        "variant,kind,capacity,seed,status,epochs_run,train_error,val_error,interpolated,selected,eligible,completed,\
         failed_samples,valid_margins,cmps,cmps_within_threshold,cmps_dominated,cmps_restarted,evaluations,\
         with_upper_bound,sandwich_violations\n",
    );
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            c.variant,
            c.kind.as_str(),
            c.capacity,
            c.seed,
            c.status,
            c.epochs_run,
            opt(c.train_error),
            opt(c.val_error),
            c.interpolated,
            c.selected,
            c.eligible,
            c.completed,
            c.failed_samples,
            c.valid_margins,
            c.cmps,
            c.cmps_within_threshold,
            c.cmps_dominated,
            c.cmps_restarted,
            c.evaluations,
            c.with_upper_bound,
            c.sandwich_violations
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.17e}"))
}

fn write_trends_csv(path: &Path, rows: &[TrendRow], header: &[(&str, String)]) -> Result<()> {
    let mut out = crate::report::csv_header(header);
    out.push_str("variant,group,cells,spearman\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.variant, r.group, r.cells, opt(r.spearman)));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
