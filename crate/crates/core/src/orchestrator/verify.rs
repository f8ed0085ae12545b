//! Audit of a finished experiment directory against independent
//! recomputation.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ledger::replay;
use super::Experiment;
use crate::classifier::Classifier;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::geometry::read_distance_matrix;
use crate::model::MlpModel;
use crate::report::{aggregate, ModelKind};
use crate::solver::{solve_margins, MarginTask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    /// Margins re-solved from scratch per cell.
    pub samples_per_cell: usize,
    pub gradient_probes: usize,
    /// Max-margin queries re-answered by brute force per variant.
    pub maxmargin_queries: usize,
    pub matrix_entries: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            samples_per_cell: 2,
            gradient_probes: 10,
            maxmargin_queries: 10,
            matrix_entries: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: &str, failures: Vec<String>, total: usize) {
        let passed = failures.is_empty();
        let detail = if passed {
            format!("{total} checked")
        } else {
            let shown: Vec<&str> = failures.iter().take(5).map(String::as_str).collect();
            format!("{} of {total} failed: {}", failures.len(), shown.join("; "))
        };
        self.checks.push(Check {
            name: name.to_string(),
            passed,
            detail,
        });
    }
}

fn naive_dist(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = f64::from(*x) - f64::from(*y);
        s += d * d;
    }
    s.sqrt()
}

fn naive_nearest(ds: &LabeledDataset, labels: &[usize], q: usize) -> f64 {
    (0..ds.len())
        .filter(|&r| labels[r] != labels[q])
        .map(|r| naive_dist(ds.row(q), ds.row(r)))
        .fold(f64::INFINITY, f64::min)
}

fn walk(dir: &Path, out: &mut Vec<std::path::PathBuf>) -> Result<()> {
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

pub(super) fn verify(exp: &Experiment, opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let Some(summary) = exp.summary()? else {
        report.push("report present", vec!["reports/summary.json is missing".into()], 1);
        return Ok(report);
    };

    // Every CSV and JSON output names the manifest it came from.
    let mut files = Vec::new();
    walk(&exp.dir, &mut files)?;
    files.sort();
    let mut bad = Vec::new();
    let mut total = 0;
    let expected_line = format!("# manifest_sha256={}", exp.hash);
    for f in &files {
        let ext = f.extension().and_then(|e| e.to_str()).unwrap_or("");
        if ext != "csv" && ext != "json" {
            continue;
        }
        total += 1;
        let text = std::fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
        let ok = if ext == "csv" {
            text.lines().next() == Some(expected_line.as_str())
        } else {
            let v: serde_json::Value = serde_json::from_str(&text).unwrap_or_default();
            let h = v.get("manifest_sha256").or_else(|| v.get("header").and_then(|h| h.get("manifest_sha256")));
            h.and_then(|h| h.as_str()) == Some(exp.hash.as_str())
        };
        if !ok {
            bad.push(f.display().to_string());
        }
    }
    report.push("manifest headers", bad, total);

    let state = replay(&exp.path("ledger.jsonl"), &exp.hash)?;
    let ids = exp.selection()?;

    // Aggregates rebuilt from the ledger match the written summary.
    let mut bad = Vec::new();
    let mut rebuilt = Vec::new();
    let mut sandwich = Vec::new();
    let mut bounded = 0;
    let tol = exp.manifest.solver.sandwich_tol;
    for cell in exp.cells() {
        let v = exp.variant_of(&cell);
        if exp.train_report(&cell)?.is_none() {
            continue;
        }
        let ds = exp.variant_dataset(&v.name)?;
        let results = state.results(&cell, ds.num_classes());
        for r in &results {
            if let Some(ub) = r.upper_bound {
                bounded += 1;
                if r.margin.is_none_or(|m| m > ub + tol) {
                    sandwich.push(format!("{cell} sample {}: margin {:?} above bound {ub}", r.sample_id, r.margin));
                }
            }
        }
        for s in aggregate(&results, &ds, ModelKind::from(v.kind), cell.capacity, cell.seed, &summary.bin_edges)? {
            rebuilt.push((v.name.clone(), s));
        }
    }
    let as_json = |x: &Vec<(String, crate::report::MarginSummary)>| serde_json::to_string(x).expect("serializes");
    if as_json(&rebuilt) != as_json(&summary.summaries) {
        bad.push("margin summaries differ from a ledger replay".to_string());
    }
    report.push("ledger replay", bad, 1);
    report.push("upper-bound sandwich", sandwich, bounded);

    // Fresh solves reproduce recorded margins bit for bit.
    let mut bad = Vec::new();
    let mut total = 0;
    let mut gbad = Vec::new();
    let mut gtotal = 0;
    for cell in exp.cells() {
        let v = exp.variant_of(&cell).clone();
        if exp.train_report(&cell)?.is_none() {
            continue;
        }
        let ds = exp.variant_dataset(&v.name)?;
        let model = exp.load_model(&cell)?;
        let eligible = exp.eligible(&model, &ds, &ids, &exp.neighbors(&v.name)?)?;
        let results = state.results(&cell, ds.num_classes());
        let by_id: std::collections::HashMap<u64, _> = results.iter().map(|r| (r.sample_id, r)).collect();
        let picks: Vec<&(usize, Option<usize>)> = eligible
            .iter()
            .filter(|(p, _)| by_id.contains_key(&ds.ids()[*p]))
            .collect::<Vec<_>>()
            .choose_multiple(&mut rng, opts.samples_per_cell)
            .copied()
            .collect();
        let xs: Vec<Vec<f64>> = picks.iter().map(|&&(p, _)| ds.sample(p).features_f64()).collect();
        let refs: Vec<Option<Vec<f64>>> = picks.iter().map(|&&(_, r)| r.map(|q| ds.sample(q).features_f64())).collect();
        let tasks: Vec<MarginTask> = picks
            .iter()
            .zip(xs.iter().zip(&refs))
            .map(|(&&(p, _), (x, r))| MarginTask {
                sample_id: ds.ids()[p],
                x,
                reference: r.as_deref(),
            })
            .collect();
        for (fresh, x) in solve_margins(&model, &tasks, &exp.manifest.solver)?.iter().zip(&xs) {
            total += 1;
            let old = by_id[&fresh.sample_id];
            if fresh.pairs != old.pairs || fresh.upper_bound != old.upper_bound {
                bad.push(format!("{cell} sample {}: re-solve differs from the ledger", fresh.sample_id));
                continue;
            }
            if let (Some(p), Some(j), Some(m)) = (&fresh.boundary_point, fresh.j_star, fresh.margin) {
                let l = model.logits(p);
                let d = naive_dist_f64(x, p);
                if (l[fresh.i] - l[j]).abs() > exp.manifest.solver.validity_threshold || (d - m).abs() > 1e-9 * m.max(1.0) {
                    bad.push(format!("{cell} sample {}: boundary point does not reproduce the margin", fresh.sample_id));
                }
            }
        }
        for _ in 0..opts.gradient_probes {
            gtotal += 1;
            if let Some(msg) = gradient_probe(&model, &ds, &mut rng) {
                gbad.push(format!("{cell}: {msg}"));
            }
        }
    }
    report.push("margin recomputation", bad, total);
    report.push("input gradients", gbad, gtotal);

    // Max margins against an independent brute force.
    let mut bad = Vec::new();
    let mut total = 0;
    let original = exp.train_split()?;
    let oidx = original.id_index();
    for v in &exp.manifest.variants {
        let ds = exp.variant_dataset(&v.name)?;
        let idx = ds.id_index();
        let (records, _) = exp.max_margins(&v.name)?;
        for r in records.choose_multiple(&mut rng, opts.maxmargin_queries) {
            total += 1;
            let after = naive_nearest(&ds, ds.effective_labels(), idx[&r.sample_id]);
            let before = naive_nearest(&original, original.true_labels(), oidx[&r.sample_id]);
            if (after - r.dist_after).abs() > 1e-12 || (before - r.dist_before).abs() > 1e-12 {
                bad.push(format!("{} sample {}", v.name, r.sample_id));
            }
        }
    }
    report.push("max margins", bad, total);

    if let Some(info) = &summary.distance_matrix {
        let m = read_distance_matrix(&exp.path("reports"), "distance_matrix")?;
        let ds = exp.variant_dataset(&info.cell.variant)?;
        let idx = ds.id_index();
        let mut bad = Vec::new();
        let n = opts.matrix_entries.min(m.entries.len());
        for _ in 0..n {
            let (r, c) = (rng.random_range(0..m.row_ids.len()), rng.random_range(0..m.col_ids.len()));
            let d = naive_dist(ds.row(idx[&m.row_ids[r]]), ds.row(idx[&m.col_ids[c]]));
            if (d - m.get(r, c)).abs() > 1e-12 {
                bad.push(format!("entry ({r}, {c})"));
            }
        }
        report.push("distance matrix", bad, n);
    }
    Ok(report)
}

fn naive_dist_f64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Directional central difference of `f[i] - f[j]` at a jittered training
/// sample, skipped (reported as passing) when a ReLU kink lies within the
/// stencil.
fn gradient_probe(model: &MlpModel, ds: &LabeledDataset, rng: &mut ChaCha8Rng) -> Option<String> {
    const H: f64 = 1e-5;
    let d = model.input_dim();
    let mut x = ds.sample(rng.random_range(0..ds.len())).features_f64();
    for v in &mut x {
        *v += rng.random_range(-0.01..0.01);
    }
    let u: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    for h in 0..model.hidden_width() {
        let row = &model.w1()[h * d..(h + 1) * d];
        let pre: f64 = model.b1()[h] + row.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>();
        let slope: f64 = row.iter().zip(&u).map(|(w, v)| w * v).sum();
        if pre.abs() <= 2.0 * H * slope.abs() {
            return None;
        }
    }
    let i = model.predict(&x);
    let j = (i + 1 + rng.random_range(0..model.num_classes() - 1)) % model.num_classes();
    let g = model.input_gradient(&x, i, j).ok()?;
    let analytic: f64 = g.iter().zip(&u).map(|(a, b)| a * b).sum();
    let f = |s: f64| {
        let y: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + s * b).collect();
        let l = model.logits(&y);
        l[i] - l[j]
    };
    let fd = (f(H) - f(-H)) / (2.0 * H);
    let scale = naive_dist_f64(&g, &vec![0.0; d]) * naive_dist_f64(&u, &vec![0.0; d]);
    ((fd - analytic).abs() > 1e-4 * scale.max(1e-12)).then(|| format!("directional derivative {analytic} vs {fd}"))
}
