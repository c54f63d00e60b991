//! Corpus serialization: JSONL record files and split manifests.
//!
//! A prepared corpus on disk is two files: `corpus.jsonl` with one
//! [`CorpusRecord`] per line, and `splits.json` mapping each split to its
//! sets, where every set lists the record ids of its members. Together they
//! reconstruct [`CorpusSplits`] exactly; records are stored once no matter
//! how many splits reference them.

use super::{CorpusRecord, CorpusSplits, ParaphraseSet, SetKey};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub fn write_records_jsonl(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_jsonl(path: &Path) -> Result<Vec<CorpusRecord>> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::corpus(format!("{}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = serde_json::from_str(&line).map_err(|e| {
            Error::corpus(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        records.push(record);
    }
    Ok(records)
}

/// On-disk description of the five splits by set key and member record ids.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SplitManifest {
    pub seed: u64,
    /// split name → set key string → member record ids.
    pub splits: BTreeMap<String, BTreeMap<String, Vec<String>>>,
}

impl SplitManifest {
    pub fn from_splits(splits: &CorpusSplits, seed: u64) -> SplitManifest {
        let mut out: BTreeMap<String, BTreeMap<String, Vec<String>>> = BTreeMap::new();
        for (name, sets) in splits.iter_named() {
            let entry = out.entry(name.to_string()).or_default();
            for set in sets {
                entry.insert(
                    set.key.to_string(),
                    set.members.iter().map(|m| m.id()).collect(),
                );
            }
        }
        SplitManifest {
            seed,
            splits: out,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<SplitManifest> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::corpus(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_reader(BufReader::new(f))?)
    }

    /// Rebuild the split structure by joining the manifest against records.
    pub fn resolve(&self, records: &[CorpusRecord]) -> Result<CorpusSplits> {
        let by_id: HashMap<String, &CorpusRecord> =
            records.iter().map(|r| (r.id(), r)).collect();
        let mut out = CorpusSplits::default();
        for (split_name, sets) in &self.splits {
            let target: &mut Vec<ParaphraseSet> = match split_name.as_str() {
                "train" => &mut out.train,
                "val_seen" => &mut out.val_seen,
                "val_unseen" => &mut out.val_unseen,
                "test_seen" => &mut out.test_seen,
                "test_unseen" => &mut out.test_unseen,
                other => {
                    return Err(Error::corpus(format!(
                        "manifest names unknown split {other:?}"
                    )))
                }
            };
            for (key_str, ids) in sets {
                let key: SetKey = key_str.parse()?;
                let mut members = Vec::with_capacity(ids.len());
                for id in ids {
                    let record = by_id.get(id.as_str()).ok_or_else(|| {
                        Error::corpus(format!(
                            "manifest references record {id:?} missing from the corpus file"
                        ))
                    })?;
                    members.push((*record).clone());
                }
                target.push(ParaphraseSet {
                    key,
                    members,
                });
            }
        }
        Ok(out)
    }
}
