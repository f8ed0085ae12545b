//! Margin aggregation by sample group and model kind: summary statistics,
//! shared-bin histograms, capacity curves and skewness tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{CorruptionKind, LabeledDataset};
use crate::error::{Error, Result};
use crate::solver::{MarginResult, MarginStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleGroup {
    Clean,
    Corrupt,
    Overall,
}

impl SampleGroup {
    pub const ALL: [SampleGroup; 3] = [SampleGroup::Clean, SampleGroup::Corrupt, SampleGroup::Overall];

    pub fn as_str(self) -> &'static str {
        match self {
            SampleGroup::Clean => "clean",
            SampleGroup::Corrupt => "corrupt",
            SampleGroup::Overall => "overall",
        }
    }
}

/// What the model was trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Clean,
    LabelCorrupted,
    InputCorrupted,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Clean => "clean",
            ModelKind::LabelCorrupted => "label-corrupted",
            ModelKind::InputCorrupted => "input-corrupted",
        }
    }
}

impl From<CorruptionKind> for ModelKind {
    fn from(k: CorruptionKind) -> Self {
        match k {
            CorruptionKind::None => ModelKind::Clean,
            CorruptionKind::Label => ModelKind::LabelCorrupted,
            CorruptionKind::GaussianInput => ModelKind::InputCorrupted,
        }
    }
}

/// A cell of the sample-group by model-kind taxonomy, written
/// `<sample group>:<model kind>`, e.g. `corrupt:label-corrupted`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub sample_group: SampleGroup,
    pub model_kind: ModelKind,
}

impl GroupKey {
    /// Corrupt samples do not exist for a clean model.
    pub fn new(sample_group: SampleGroup, model_kind: ModelKind) -> Result<Self> {
        if sample_group == SampleGroup::Corrupt && model_kind == ModelKind::Clean {
            return Err(Error::Inconsistent("corrupt:clean is not a valid group".into()));
        }
        Ok(GroupKey { sample_group, model_kind })
    }

    pub fn admissible(model_kind: ModelKind) -> Vec<GroupKey> {
        SampleGroup::ALL
            .iter()
            .filter_map(|&g| GroupKey::new(g, model_kind).ok())
            .collect()
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.sample_group.as_str(), self.model_kind.as_str())
    }
}

/// Uniform bins over `[0, max]`, fixed once per experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinEdges {
    pub edges: Vec<f64>,
}

impl BinEdges {
    pub fn uniform(max: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(max >= 0.0) || !max.is_finite() {
            return Err(Error::InvalidConfig(format!("bins over [0, {max}] with {bins} bins")));
        }
        let hi = if max > 0.0 { max } else { 1.0 };
        Ok(BinEdges {
            edges: (0..=bins).map(|k| hi * k as f64 / bins as f64).collect(),
        })
    }

    pub fn bins(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn width(&self) -> f64 {
        self.edges[1] - self.edges[0]
    }

    /// Values past the last edge land in the last bin.
    pub fn bin(&self, v: f64) -> usize {
        let lo = self.edges[0];
        let hi = self.edges[self.bins()];
        let k = ((v - lo) / (hi - lo) * self.bins() as f64).floor();
        if k < 0.0 {
            0
        } else {
            (k as usize).min(self.bins() - 1)
        }
    }

    pub fn histogram(&self, values: &[f64]) -> Vec<u64> {
        let mut h = vec![0; self.bins()];
        for &v in values {
            h[self.bin(v)] += 1;
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginSummary {
    pub group: GroupKey,
    pub capacity: usize,
    pub seed: u64,
    pub count: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    /// Population standard deviation.
    pub std: Option<f64>,
    pub skewness: Option<f64>,
    /// Fraction of margins above `mean + 2 std`.
    pub tail_mass: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub histogram: Vec<u64>,
    /// Samples of this group with no valid margin.
    pub excluded: usize,
    pub solver_exclusion_rate: f64,
}

pub fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) })
}

/// Population standard deviation (divides by `n`).
pub fn std_dev(v: &[f64]) -> Option<f64> {
    let m = mean(v)?;
    Some((v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt())
}

/// Biased sample skewness `m3 / m2^1.5`. Absent below three values or for
/// zero variance.
pub fn skewness(v: &[f64]) -> Option<f64> {
    if v.len() < 3 {
        return None;
    }
    let m = mean(v)?;
    let n = v.len() as f64;
    let m2 = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m3 = v.iter().map(|x| (x - m).powi(3)).sum::<f64>() / n;
    (m2 > 0.0).then(|| m3 / m2.powf(1.5))
}

pub fn tail_mass(v: &[f64]) -> Option<f64> {
    let (m, s) = (mean(v)?, std_dev(v)?);
    Some(v.iter().filter(|&&x| x > m + 2.0 * s).count() as f64 / v.len() as f64)
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut k = 0;
    while k < order.len() {
        let mut e = k;
        while e + 1 < order.len() && v[order[e + 1]] == v[order[k]] {
            e += 1;
        }
        let r = (k + e) as f64 / 2.0 + 1.0;
        for &o in &order[k..=e] {
            ranks[o] = r;
        }
        k = e + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. Absent when
/// either side is constant or the lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let (mx, my) = (mean(&rx)?, mean(&ry)?);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

fn summarize(group: GroupKey, capacity: usize, seed: u64, values: &[f64], excluded: usize, edges: &BinEdges) -> MarginSummary {
    let attempted = values.len() + excluded;
    MarginSummary {
        group,
        capacity,
        seed,
        count: values.len(),
        mean: mean(values),
        median: median(values),
        std: std_dev(values),
        skewness: skewness(values),
        tail_mass: tail_mass(values),
        min: values.iter().copied().reduce(f64::min),
        max: values.iter().copied().reduce(f64::max),
        histogram: edges.histogram(values),
        excluded,
        solver_exclusion_rate: if attempted == 0 { 0.0 } else { excluded as f64 / attempted as f64 },
    }
}

/// Splits valid margins into clean, corrupt and overall groups, using the
/// corruption flags of `ds`. Results without a valid margin only count
/// toward the exclusion rate.
pub fn aggregate(results: &[MarginResult], ds: &LabeledDataset, model_kind: ModelKind, capacity: usize, seed: u64, edges: &BinEdges) -> Result<Vec<MarginSummary>> {
    let index = ds.id_index();
    let mut values: BTreeMap<SampleGroup, (Vec<f64>, usize)> = BTreeMap::new();
    for r in results {
        let pos = *index.get(&r.sample_id).ok_or(Error::UnknownSample(r.sample_id))?;
        let corrupt = ds.corruption_flags()[pos].is_corrupt();
        if corrupt && model_kind == ModelKind::Clean {
            return Err(Error::Inconsistent(format!(
                "sample {} is corrupted in a clean model's dataset",
                r.sample_id
            )));
        }
        let own = if corrupt { SampleGroup::Corrupt } else { SampleGroup::Clean };
        for g in [own, SampleGroup::Overall] {
            let slot = values.entry(g).or_default();
            match (r.status, r.margin) {
                (MarginStatus::Valid, Some(m)) => slot.0.push(m),
                _ => slot.1 += 1,
            }
        }
    }
    GroupKey::admissible(model_kind)
        .into_iter()
        .map(|key| {
            let (v, excluded) = values.remove(&key.sample_group).unwrap_or_default();
            Ok(summarize(key, capacity, seed, &v, excluded, edges))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub capacity: usize,
    pub group: GroupKey,
    pub seeds: usize,
    /// Mean over seeds of the per-seed mean margin.
    pub mean: f64,
    /// Population standard deviation of the per-seed means.
    pub std_over_seeds: f64,
    pub median: f64,
}

/// Seed-averaged mean margin per capacity and group, sorted by capacity
/// then group. Every seed of a capacity must report the same groups.
pub fn capacity_curves(summaries: &[MarginSummary]) -> Result<Vec<CurveRow>> {
    let mut by_cap: BTreeMap<usize, BTreeMap<u64, BTreeSet<GroupKey>>> = BTreeMap::new();
    for s in summaries {
        by_cap.entry(s.capacity).or_default().entry(s.seed).or_default().insert(s.group);
    }
    for (cap, seeds) in &by_cap {
        let mut sets = seeds.values();
        let first = sets.next().expect("entries exist");
        if sets.any(|s| s != first) {
            return Err(Error::Inconsistent(format!(
                "capacity {cap}: seeds report different groups"
            )));
        }
    }
    let mut cells: BTreeMap<(usize, GroupKey), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for s in summaries {
        if let (Some(m), Some(md)) = (s.mean, s.median) {
            let c = cells.entry((s.capacity, s.group)).or_default();
            c.0.push(m);
            c.1.push(md);
        }
    }
    Ok(cells
        .into_iter()
        .map(|((capacity, group), (means, medians))| CurveRow {
            capacity,
            group,
            seeds: means.len(),
            mean: mean(&means).expect("non-empty"),
            std_over_seeds: std_dev(&means).expect("non-empty"),
            median: mean(&medians).expect("non-empty"),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewRow {
    pub group: GroupKey,
    pub capacity: usize,
    pub seed: u64,
    pub count: usize,
    pub skewness: Option<f64>,
    pub tail_mass: Option<f64>,
    /// Fewer than three margins or zero variance.
    pub degenerate: bool,
}

pub fn skew_report(summaries: &[MarginSummary]) -> Vec<SkewRow> {
    let mut rows: Vec<SkewRow> = summaries
        .iter()
        .map(|s| SkewRow {
            group: s.group,
            capacity: s.capacity,
            seed: s.seed,
            count: s.count,
            skewness: s.skewness,
            tail_mass: s.tail_mass,
            degenerate: s.skewness.is_none(),
        })
        .collect();
    rows.sort_by(|a, b| (a.capacity, a.group, a.seed).cmp(&(b.capacity, b.group, b.seed)));
    rows
}

/// `# key=value` lines that open every CSV.
pub fn csv_header(header: &[(&str, String)]) -> String {
    header.iter().map(|(k, v)| format!("# {k}={v}\n")).collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.17e}"))
}

fn write(path: &Path, text: String) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_curves_csv(path: &Path, rows: &[CurveRow], header: &[(&str, String)]) -> Result<()> {
    let mut out = csv_header(header);
    out.push_str("capacity,group,seeds,mean,std_over_seeds,median\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.17e},{:.17e},{:.17e}\n",
            r.capacity, r.group, r.seeds, r.mean, r.std_over_seeds, r.median
        ));
    }
    write(path, out)
}

/// One row per (capacity, seed, group, bin).
pub fn write_histograms_csv(path: &Path, summaries: &[MarginSummary], edges: &BinEdges, header: &[(&str, String)]) -> Result<()> {
    let mut out = csv_header(header);
    out.push_str("capacity,seed,group,bin,lower,upper,count\n");
    let mut sorted: Vec<&MarginSummary> = summaries.iter().collect();
    sorted.sort_by(|a, b| (a.capacity, a.seed, a.group).cmp(&(b.capacity, b.seed, b.group)));
    for s in sorted {
        for (k, c) in s.histogram.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{:.17e},{:.17e},{}\n",
                s.capacity,
                s.seed,
                s.group,
                k,
                edges.edges[k],
                edges.edges[k + 1],
                c
            ));
        }
    }
    write(path, out)
}

pub fn write_skew_csv(path: &Path, rows: &[SkewRow], header: &[(&str, String)]) -> Result<()> {
    let mut out = csv_header(header);
    out.push_str("capacity,seed,group,count,skewness,tail_mass,degenerate\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.capacity,
            r.seed,
            r.group,
            r.count,
            opt(r.skewness),
            opt(r.tail_mass),
            r.degenerate
        ));
    }
    write(path, out)
}

pub fn write_summaries_csv(path: &Path, summaries: &[MarginSummary], header: &[(&str, String)]) -> Result<()> {
    let mut out = csv_header(header);
    out.push_str("capacity,seed,group,count,mean,median,std,skewness,tail_mass,min,max,excluded,solver_exclusion_rate\n");
    let mut sorted: Vec<&MarginSummary> = summaries.iter().collect();
    sorted.sort_by(|a, b| (a.capacity, a.seed, a.group).cmp(&(b.capacity, b.seed, b.group)));
    for s in sorted {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{:.17e}\n",
            s.capacity,
            s.seed,
            s.group,
            s.count,
            opt(s.mean),
            opt(s.median),
            opt(s.std),
            opt(s.skewness),
            opt(s.tail_mass),
            opt(s.min),
            opt(s.max),
            s.excluded,
            s.solver_exclusion_rate
        ));
    }
    write(path, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Corruption, Sample, Split};
    use crate::solver::MarginResult;

    fn result(id: u64, margin: Option<f64>) -> MarginResult {
        MarginResult {
            sample_id: id,
            i: 0,
            j_star: margin.map(|_| 1),
            margin,
            boundary_point: None,
            residual: margin.map(|_| 0.0),
            status: if margin.is_some() {
                MarginStatus::Valid
            } else {
                MarginStatus::NoPairConverged
            },
            pairs: vec![],
            upper_bound: None,
        }
    }

    fn dataset(flags: &[Corruption]) -> LabeledDataset {
        let samples = flags
            .iter()
            .enumerate()
            .map(|(k, &c)| Sample {
                id: k as u64,
                features: vec![0.0],
                true_label: 0,
                effective_label: if c == Corruption::LabelCorrupted { 1 } else { 0 },
                corruption: c,
            })
            .collect();
        let n = flags.iter().filter(|c| c.is_corrupt()).count();
        let fraction = n as f64 / flags.len() as f64;
        LabeledDataset::from_samples(samples, 2, Split::Train, fraction).unwrap()
    }

    #[test]
    fn basic_statistics() {
        let ds = dataset(&[Corruption::Clean; 3]);
        let rs: Vec<_> = (0..3).map(|k| result(k, Some(k as f64 + 1.0))).collect();
        let edges = BinEdges::uniform(4.0, 60).unwrap();
        let s = aggregate(&rs, &ds, ModelKind::Clean, 10, 0, &edges).unwrap();
        assert_eq!(s.len(), 2);
        let clean = &s[0];
        assert_eq!(clean.group.to_string(), "clean:clean");
        assert_eq!(clean.mean, Some(2.0));
        assert_eq!(clean.median, Some(2.0));
        assert_eq!(clean.histogram.iter().sum::<u64>(), 3);
    }

    #[test]
    fn corrupt_half_of_clean() {
        let flags = [
            Corruption::Clean,
            Corruption::Clean,
            Corruption::LabelCorrupted,
            Corruption::LabelCorrupted,
        ];
        let ds = dataset(&flags);
        let rs = vec![
            result(0, Some(2.0)),
            result(1, Some(4.0)),
            result(2, Some(1.0)),
            result(3, Some(2.0)),
        ];
        let edges = BinEdges::uniform(4.0, 8).unwrap();
        let s = aggregate(&rs, &ds, ModelKind::LabelCorrupted, 10, 0, &edges).unwrap();
        let get = |g| s.iter().find(|x| x.group.sample_group == g).unwrap();
        assert_eq!(get(SampleGroup::Corrupt).mean.unwrap() * 2.0, get(SampleGroup::Clean).mean.unwrap());
        assert_eq!(
            get(SampleGroup::Clean).count + get(SampleGroup::Corrupt).count,
            get(SampleGroup::Overall).count
        );
    }

    #[test]
    fn excluded_results_never_enter_statistics() {
        let ds = dataset(&[Corruption::Clean; 3]);
        let rs = vec![result(0, Some(1.0)), result(1, None), result(2, Some(3.0))];
        let edges = BinEdges::uniform(4.0, 4).unwrap();
        let s = aggregate(&rs, &ds, ModelKind::Clean, 1, 0, &edges).unwrap();
        assert_eq!(s[0].count, 2);
        assert_eq!(s[0].excluded, 1);
        assert_eq!(s[0].mean, Some(2.0));
        assert!((s[0].solver_exclusion_rate - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_group_has_no_statistics() {
        let ds = dataset(&[Corruption::Clean, Corruption::InputCorrupted]);
        let rs = vec![result(0, Some(1.0))];
        let edges = BinEdges::uniform(1.0, 4).unwrap();
        let s = aggregate(&rs, &ds, ModelKind::InputCorrupted, 1, 0, &edges).unwrap();
        let corrupt = s.iter().find(|x| x.group.sample_group == SampleGroup::Corrupt).unwrap();
        assert_eq!(corrupt.count, 0);
        assert_eq!(corrupt.mean, None);
    }

    #[test]
    fn corrupt_clean_is_inadmissible() {
        assert!(GroupKey::new(SampleGroup::Corrupt, ModelKind::Clean).is_err());
        assert_eq!(GroupKey::admissible(ModelKind::Clean).len(), 2);
        assert_eq!(GroupKey::admissible(ModelKind::LabelCorrupted).len(), 3);
    }

    fn summary(capacity: usize, seed: u64, m: f64) -> MarginSummary {
        MarginSummary {
            group: GroupKey::new(SampleGroup::Clean, ModelKind::Clean).unwrap(),
            capacity,
            seed,
            count: 1,
            mean: Some(m),
            median: Some(m),
            std: Some(0.0),
            skewness: None,
            tail_mass: Some(0.0),
            min: Some(m),
            max: Some(m),
            histogram: vec![1],
            excluded: 0,
            solver_exclusion_rate: 0.0,
        }
    }

    #[test]
    fn curves_average_over_seeds_with_population_std() {
        let rows = capacity_curves(&[summary(5, 0, 1.0), summary(5, 1, 2.0), summary(5, 2, 3.0)]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].mean, 2.0);
        assert!((rows[0].std_over_seeds - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let single = capacity_curves(&[summary(7, 0, 1.5)]).unwrap();
        assert_eq!((single[0].mean, single[0].std_over_seeds), (1.5, 0.0));
    }

    #[test]
    fn curves_reject_mismatched_groups() {
        let mut other = summary(5, 1, 2.0);
        other.group = GroupKey::new(SampleGroup::Overall, ModelKind::Clean).unwrap();
        assert!(capacity_curves(&[summary(5, 0, 1.0), other]).is_err());
    }

    #[test]
    fn skewness_signs() {
        let sym: Vec<f64> = [-1.0, 0.0, 1.0].iter().map(|x| x + 5.0).collect();
        assert!(skewness(&sym).unwrap().abs() < 1e-15);
        let expo: Vec<f64> = (1..200).map(|k| -(1.0 - k as f64 / 200.0f64).ln()).collect();
        assert!(skewness(&expo).unwrap() > 0.0);
        assert_eq!(skewness(&[1.0, 1.0, 1.0]), None);
    }

    #[test]
    fn spearman_known_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]), Some(0.5));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
    }

    #[test]
    fn histogram_mean_within_half_bin() {
        let v: Vec<f64> = (0..500).map(|k| (k as f64 * 0.731).sin().abs() * 3.0).collect();
        let edges = BinEdges::uniform(3.0, 60).unwrap();
        let h = edges.histogram(&v);
        let centers: f64 = h
            .iter()
            .enumerate()
            .map(|(k, &c)| c as f64 * 0.5 * (edges.edges[k] + edges.edges[k + 1]))
            .sum::<f64>()
            / v.len() as f64;
        assert!((centers - mean(&v).unwrap()).abs() <= edges.width() / 2.0);
    }
}
