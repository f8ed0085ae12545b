//! Maximum margins (distance to the nearest sample with a different label)
//! and exact pairwise distance matrices.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Corruption, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::kernel;
use crate::report::{mean, median};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Labeling {
    TrueLabels,
    EffectiveLabels,
}

impl Labeling {
    fn labels(self, ds: &LabeledDataset) -> &[usize] {
        match self {
            Labeling::TrueLabels => ds.true_labels(),
            Labeling::EffectiveLabels => ds.effective_labels(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: u64,
    /// Row position in the searched dataset.
    pub index: usize,
    pub distance: f64,
}

const QUERY_BLOCK: usize = 16;
const REFERENCE_BLOCK: usize = 256;

/// The `k` nearest rows of `ds` whose label differs from each query's label,
/// nearest first (ties by lower row). Exact brute force.
pub fn nearest_different(ds: &LabeledDataset, queries: &[usize], labeling: Labeling, k: usize) -> Result<Vec<Vec<Neighbor>>> {
    let labels = labeling.labels(ds);
    for &q in queries {
        if q >= ds.len() {
            return Err(Error::UnknownSample(q as u64));
        }
    }
    let k = k.max(1);
    // (squared distance, row) kept sorted ascending.
    let mut best: Vec<Vec<(f64, usize)>> = vec![Vec::with_capacity(k + 1); queries.len()];
    for qb in (0..queries.len()).step_by(QUERY_BLOCK) {
        let qe = (qb + QUERY_BLOCK).min(queries.len());
        for rb in (0..ds.len()).step_by(REFERENCE_BLOCK) {
            let re = (rb + REFERENCE_BLOCK).min(ds.len());
            for (slot, &q) in best[qb..qe].iter_mut().zip(&queries[qb..qe]) {
                let (xq, lq) = (ds.row(q), labels[q]);
                for r in rb..re {
                    if labels[r] == lq {
                        continue;
                    }
                    let d = kernel::dist_sq_f32(xq, ds.row(r));
                    if slot.len() == k && d >= slot[k - 1].0 {
                        continue;
                    }
                    let at = slot.partition_point(|&(bd, br)| bd < d || (bd == d && br < r));
                    slot.insert(at, (d, r));
                    slot.truncate(k);
                }
            }
        }
    }
    queries
        .iter()
        .zip(best)
        .map(|(&q, slot)| {
            if slot.is_empty() {
                return Err(Error::NoDifferentLabel(ds.ids()[q]));
            }
            Ok(slot
                .into_iter()
                .map(|(d, r)| Neighbor {
                    id: ds.ids()[r],
                    index: r,
                    distance: d.sqrt(),
                })
                .collect())
        })
        .collect()
}

/// Distance from each query sample to the nearest sample with a different
/// label under `labeling`, searched over all of `ds`.
pub fn max_margin(ds: &LabeledDataset, query_ids: &[u64], labeling: Labeling) -> Result<Vec<Neighbor>> {
    let positions = positions_of(ds, query_ids)?;
    Ok(nearest_different(ds, &positions, labeling, 1)?
        .into_iter()
        .map(|mut v| v.swap_remove(0))
        .collect())
}

pub(crate) fn positions_of(ds: &LabeledDataset, ids: &[u64]) -> Result<Vec<usize>> {
    let index = ds.id_index();
    ids.iter()
        .map(|id| index.get(id).copied().ok_or(Error::UnknownSample(*id)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxMarginRecord {
    pub sample_id: u64,
    pub corruption: Corruption,
    /// Nearest different true label, on the uncorrupted features.
    pub dist_before: f64,
    /// Nearest different effective label, on the features actually trained on.
    pub dist_after: f64,
    pub neighbor_id_before: u64,
    pub neighbor_id_after: u64,
}

/// Before/after records for `query_ids`. `original` is the training set
/// before corruption and `corrupted` the same samples after it.
pub fn max_margin_records(original: &LabeledDataset, corrupted: &LabeledDataset, query_ids: &[u64]) -> Result<Vec<MaxMarginRecord>> {
    if original.ids() != corrupted.ids() {
        return Err(Error::Inconsistent(
            "original and corrupted datasets list different samples".into(),
        ));
    }
    let before = max_margin(original, query_ids, Labeling::TrueLabels)?;
    let after = max_margin(corrupted, query_ids, Labeling::EffectiveLabels)?;
    let index = corrupted.id_index();
    Ok(query_ids
        .iter()
        .zip(before.iter().zip(&after))
        .map(|(id, (b, a))| MaxMarginRecord {
            sample_id: *id,
            corruption: corrupted.corruption_flags()[index[id]],
            dist_before: b.distance,
            dist_after: a.distance,
            neighbor_id_before: b.id,
            neighbor_id_after: a.id,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterGroup {
    pub group: String,
    pub count: usize,
    /// Fraction with `dist_after < dist_before`.
    pub fraction_below: f64,
    pub mean_before: Option<f64>,
    pub mean_after: Option<f64>,
    pub median_before: Option<f64>,
    pub median_after: Option<f64>,
    pub min_after: Option<f64>,
    pub max_after: Option<f64>,
    /// Smallest `dist_after - dist_before`.
    pub min_change: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scatter {
    pub rows: Vec<(u64, f64, f64, Corruption)>,
    pub groups: Vec<ScatterGroup>,
}

/// Plot-ready before/after table with per-group summaries (`clean`,
/// `corrupt`, `overall`).
pub fn scatter_before_after(records: &[MaxMarginRecord]) -> Scatter {
    let rows = records
        .iter()
        .map(|r| (r.sample_id, r.dist_before, r.dist_after, r.corruption))
        .collect();
    let group = |name: &str, keep: &dyn Fn(&MaxMarginRecord) -> bool| {
        let sel: Vec<&MaxMarginRecord> = records.iter().filter(|r| keep(r)).collect();
        let before: Vec<f64> = sel.iter().map(|r| r.dist_before).collect();
        let after: Vec<f64> = sel.iter().map(|r| r.dist_after).collect();
        let below = sel.iter().filter(|r| r.dist_after < r.dist_before).count();
        ScatterGroup {
            group: name.to_string(),
            count: sel.len(),
            fraction_below: if sel.is_empty() { 0.0 } else { below as f64 / sel.len() as f64 },
            mean_before: mean(&before),
            mean_after: mean(&after),
            median_before: median(&before),
            median_after: median(&after),
            min_after: after.iter().copied().reduce(f64::min),
            max_after: after.iter().copied().reduce(f64::max),
            min_change: sel.iter().map(|r| r.dist_after - r.dist_before).reduce(f64::min),
        }
    };
    Scatter {
        rows,
        groups: vec![
            group("clean", &|r| !r.corruption.is_corrupt()),
            group("corrupt", &|r| r.corruption.is_corrupt()),
            group("overall", &|_| true),
        ],
    }
}

pub fn write_scatter_csv(path: &Path, scatter: &Scatter, header: &[(&str, String)]) -> Result<()> {
    let mut out = crate::report::csv_header(header);
    out.push_str("sample_id,dist_before,dist_after,corruption\n");
    for (id, b, a, c) in &scatter.rows {
        out.push_str(&format!("{id},{b:.17e},{a:.17e},{c}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Dense distance matrix. Rows and columns are ordered clean before
/// corrupt, then by ascending margin, then by id.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub row_ids: Vec<u64>,
    pub col_ids: Vec<u64>,
    pub row_margins: Vec<f64>,
    pub col_margins: Vec<f64>,
    /// Row-major, `row_ids.len() x col_ids.len()`.
    pub entries: Vec<f64>,
}

impl DistanceMatrix {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.entries[r * self.col_ids.len() + c]
    }
}

pub const DISTANCE_ORDERING: &str = "corruption (clean first), then margin ascending, then id";

fn ordered(ds: &LabeledDataset, index: &HashMap<u64, usize>, ids: &[u64], margins: &HashMap<u64, f64>) -> Result<Vec<(u64, usize, f64)>> {
    let mut v = ids
        .iter()
        .map(|id| {
            let pos = *index.get(id).ok_or(Error::UnknownSample(*id))?;
            let m = *margins.get(id).ok_or(Error::MissingMargin(*id))?;
            Ok((*id, pos, m))
        })
        .collect::<Result<Vec<_>>>()?;
    v.sort_by(|a, b| {
        let ca = ds.corruption_flags()[a.1].is_corrupt();
        let cb = ds.corruption_flags()[b.1].is_corrupt();
        ca.cmp(&cb).then(a.2.total_cmp(&b.2)).then(a.0.cmp(&b.0))
    });
    Ok(v)
}

pub fn distance_matrix(ds: &LabeledDataset, row_ids: &[u64], col_ids: &[u64], margins: &HashMap<u64, f64>) -> Result<DistanceMatrix> {
    let index = ds.id_index();
    let rows = ordered(ds, &index, row_ids, margins)?;
    let cols = ordered(ds, &index, col_ids, margins)?;
    let mut entries = Vec::with_capacity(rows.len() * cols.len());
    for &(_, rp, _) in &rows {
        for &(_, cp, _) in &cols {
            entries.push(kernel::dist_sq_f32(ds.row(rp), ds.row(cp)).sqrt());
        }
    }
    Ok(DistanceMatrix {
        row_ids: rows.iter().map(|r| r.0).collect(),
        col_ids: cols.iter().map(|c| c.0).collect(),
        row_margins: rows.iter().map(|r| r.2).collect(),
        col_margins: cols.iter().map(|c| c.2).collect(),
        entries,
    })
}

#[derive(Serialize)]
struct MatrixSidecar<'a> {
    header: BTreeMap<&'a str, &'a str>,
    dtype: &'static str,
    byte_order: &'static str,
    layout: &'static str,
    rows: usize,
    cols: usize,
    ordering: &'static str,
    row_ids: &'a [u64],
    col_ids: &'a [u64],
    row_margins: &'a [f64],
    col_margins: &'a [f64],
}

/// Writes `<stem>.bin` (raw little-endian f64, row-major), `<stem>.json`
/// and, for matrices up to `csv_limit` entries, `<stem>.csv`.
pub fn write_distance_matrix(dir: &Path, stem: &str, m: &DistanceMatrix, header: &[(&str, String)], csv_limit: usize) -> Result<()> {
    let bin = dir.join(format!("{stem}.bin"));
    let mut bytes = Vec::with_capacity(m.entries.len() * 8);
    for v in &m.entries {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let sidecar = MatrixSidecar {
        header: header.iter().map(|(k, v)| (*k, v.as_str())).collect(),
        dtype: "f64",
        byte_order: "little",
        layout: "row-major",
        rows: m.row_ids.len(),
        cols: m.col_ids.len(),
        ordering: DISTANCE_ORDERING,
        row_ids: &m.row_ids,
        col_ids: &m.col_ids,
        row_margins: &m.row_margins,
        col_margins: &m.col_margins,
    };
    let json = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::format("distance matrix sidecar", e.to_string()))?;
    std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    if m.entries.len() <= csv_limit {
        let csv = dir.join(format!("{stem}.csv"));
        let mut out = crate::report::csv_header(header);
        out.push_str("row_id");
        for c in &m.col_ids {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
        for (r, id) in m.row_ids.iter().enumerate() {
            out.push_str(&id.to_string());
            for c in 0..m.col_ids.len() {
                out.push_str(&format!(",{:.17e}", m.get(r, c)));
            }
            out.push('\n');
        }
        let mut f = std::fs::File::create(&csv).map_err(|e| Error::io(&csv, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(&csv, e))?;
    }
    Ok(())
}

/// Reads a matrix written by [`write_distance_matrix`].
pub fn read_distance_matrix(dir: &Path, stem: &str) -> Result<DistanceMatrix> {
    #[derive(Deserialize)]
    struct Sidecar {
        rows: usize,
        cols: usize,
        row_ids: Vec<u64>,
        col_ids: Vec<u64>,
        row_margins: Vec<f64>,
        col_margins: Vec<f64>,
    }
    let json = dir.join(format!("{stem}.json"));
    let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let s: Sidecar = serde_json::from_str(&text).map_err(|e| Error::format("distance matrix sidecar", e.to_string()))?;
    let bin = dir.join(format!("{stem}.bin"));
    let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() != s.rows * s.cols * 8 || s.row_ids.len() != s.rows || s.col_ids.len() != s.cols {
        return Err(Error::format("distance matrix", "payload does not match sidecar shape"));
    }
    Ok(DistanceMatrix {
        row_ids: s.row_ids,
        col_ids: s.col_ids,
        row_margins: s.row_margins,
        col_margins: s.col_margins,
        entries: bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunks")))
            .collect(),
    })
}
