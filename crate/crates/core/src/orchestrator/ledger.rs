//! Append-only JSON-lines record of finished class-pair problems.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solver::{MarginResult, PairDiagnostics};

pub const LEDGER_FORMAT_VERSION: u32 = 1;

/// One (variant, capacity, seed) model.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub variant: String,
    pub capacity: usize,
    pub seed: u64,
}

impl CellKey {
    pub fn stem(&self) -> String {
        format!("{}_w{}_s{}", self.variant, self.capacity, self.seed)
    }
}

impl std::fmt::Display for CellKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/w{}/s{}", self.variant, self.capacity, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmpRecord {
    #[serde(flatten)]
    pub cell: CellKey,
    pub sample_id: u64,
    pub i: usize,
    pub upper_bound: Option<f64>,
    pub pair: PairDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Entry {
    Header { format_version: u32, manifest_sha256: String },
    Cmp(CmpRecord),
    Failed {
        #[serde(flatten)]
        cell: CellKey,
        sample_ids: Vec<u64>,
        error: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleEntry {
    pub i: usize,
    pub upper_bound: Option<f64>,
    pub pairs: BTreeMap<usize, PairDiagnostics>,
}

/// Everything the ledger says, keyed for lookup.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LedgerState {
    pub samples: BTreeMap<CellKey, BTreeMap<u64, SampleEntry>>,
    /// Samples whose job ran out of retries, with the last error.
    pub failed: BTreeMap<CellKey, BTreeMap<u64, String>>,
    pub records: usize,
}

impl LedgerState {
    /// True once all `num_classes - 1` pairs of the sample are recorded.
    pub fn is_complete(&self, cell: &CellKey, sample_id: u64, num_classes: usize) -> bool {
        self.samples
            .get(cell)
            .and_then(|s| s.get(&sample_id))
            .is_some_and(|e| e.pairs.len() + 1 == num_classes)
    }

    /// Margin results for the complete samples of a cell, by sample id.
    pub fn results(&self, cell: &CellKey, num_classes: usize) -> Vec<MarginResult> {
        let Some(samples) = self.samples.get(cell) else { return Vec::new() };
        samples
            .iter()
            .filter(|(_, e)| e.pairs.len() + 1 == num_classes)
            .map(|(&id, e)| MarginResult::from_pairs(id, e.i, e.pairs.values().cloned().collect(), e.upper_bound))
            .collect()
    }

    fn apply(&mut self, entry: Entry) -> Result<()> {
        match entry {
            Entry::Header { .. } => return Err(Error::format("ledger", "header repeated")),
            Entry::Cmp(r) => {
                let e = self
                    .samples
                    .entry(r.cell.clone())
                    .or_default()
                    .entry(r.sample_id)
                    .or_insert_with(|| SampleEntry {
                        i: r.i,
                        upper_bound: r.upper_bound,
                        pairs: BTreeMap::new(),
                    });
                if e.i != r.i {
                    return Err(Error::format(
                        "ledger",
                        format!("sample {} of {} recorded with two predicted classes", r.sample_id, r.cell),
                    ));
                }
                e.pairs.insert(r.pair.j, r.pair);
                if let Some(f) = self.failed.get_mut(&r.cell) {
                    f.remove(&r.sample_id);
                }
                self.records += 1;
            }
            Entry::Failed { cell, sample_ids, error } => {
                let f = self.failed.entry(cell).or_default();
                for id in sample_ids {
                    f.insert(id, error.clone());
                }
            }
        }
        Ok(())
    }
}

pub struct JobLedger {
    path: PathBuf,
    file: File,
}

fn to_line(e: &Entry) -> String {
    let mut s = serde_json::to_string(e).expect("ledger entries serialize");
    s.push('\n');
    s
}

struct Parsed {
    state: LedgerState,
    good_len: u64,
    torn: bool,
    header_seen: bool,
}

fn parse(path: &Path, file: &File, manifest_sha256: &str) -> Result<Parsed> {
    let io = |e| Error::io(path, e);
    let mut p = Parsed {
        state: LedgerState::default(),
        good_len: 0,
        torn: false,
        header_seen: false,
    };
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(io)?;
        if n == 0 {
            return Ok(p);
        }
        if p.torn {
            return Err(Error::format("ledger", format!("{}: corrupt line before the end", path.display())));
        }
        let entry = match serde_json::from_str::<Entry>(line.trim_end()) {
            Ok(e) if line.ends_with('\n') => e,
            _ => {
                p.torn = true;
                continue;
            }
        };
        if p.header_seen {
            p.state.apply(entry)?;
        } else {
            match entry {
                Entry::Header { manifest_sha256: h, .. } if h == manifest_sha256 => p.header_seen = true,
                Entry::Header { manifest_sha256: h, .. } => {
                    return Err(Error::ManifestMismatch {
                        dir: path.to_path_buf(),
                        expected: manifest_sha256.to_string(),
                        found: h,
                    })
                }
                _ => return Err(Error::format("ledger", "missing header")),
            }
        }
        p.good_len += n as u64;
    }
}

impl JobLedger {
    /// Opens or creates the ledger, replaying what is already there. A
    /// truncated final line, left by an interrupted write, is dropped.
    pub fn open(path: &Path, manifest_sha256: &str) -> Result<(JobLedger, LedgerState)> {
        let io = |e| Error::io(path, e);
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)
            .map_err(io)?;
        let parsed = parse(path, &file, manifest_sha256)?;
        if parsed.torn {
            log::warn!("{}: dropping a truncated final record", path.display());
            file.set_len(parsed.good_len).map_err(io)?;
        }
        file.seek(SeekFrom::End(0)).map_err(io)?;
        let mut ledger = JobLedger {
            path: path.to_path_buf(),
            file,
        };
        if !parsed.header_seen {
            ledger.write(&[Entry::Header {
                format_version: LEDGER_FORMAT_VERSION,
                manifest_sha256: manifest_sha256.to_string(),
            }])?;
        }
        Ok((ledger, parsed.state))
    }

    /// Appends all entries of one job with a single write, then syncs.
    pub fn write(&mut self, entries: &[Entry]) -> Result<()> {
        let text: String = entries.iter().map(to_line).collect();
        let io = |e| Error::io(&self.path, e);
        self.file.write_all(text.as_bytes()).map_err(io)?;
        self.file.sync_data().map_err(io)
    }

    pub fn record_results(&mut self, cell: &CellKey, results: &[MarginResult], state: &mut LedgerState) -> Result<()> {
        let entries: Vec<Entry> = results
            .iter()
            .flat_map(|r| {
                r.pairs.iter().map(move |p| {
                    Entry::Cmp(CmpRecord {
                        cell: cell.clone(),
                        sample_id: r.sample_id,
                        i: r.i,
                        upper_bound: r.upper_bound,
                        pair: p.clone(),
                    })
                })
            })
            .collect();
        self.write(&entries)?;
        for e in entries {
            state.apply(e)?;
        }
        Ok(())
    }

    pub fn record_failure(&mut self, cell: &CellKey, sample_ids: &[u64], error: &str, state: &mut LedgerState) -> Result<()> {
        let e = Entry::Failed {
            cell: cell.clone(),
            sample_ids: sample_ids.to_vec(),
            error: error.to_string(),
        };
        self.write(std::slice::from_ref(&e))?;
        state.apply(e)
    }
}

/// Reads a ledger without modifying it. A missing file reads as empty.
pub fn replay(path: &Path, manifest_sha256: &str) -> Result<LedgerState> {
    match File::open(path) {
        Ok(f) => Ok(parse(path, &f, manifest_sha256)?.state),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(LedgerState::default()),
        Err(e) => Err(Error::io(path, e)),
    }
}
