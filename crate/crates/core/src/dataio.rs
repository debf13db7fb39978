//! Session log parsing, catalog/sequence filtering, prefix augmentation,
//! and the binary training-set format.
//!
//! Input is JSON-lines, one session per line:
//! `{"sid": "s1", "items": [5, 9, 5], "cats": ["a","a","b"]?, "ts": [..]?}`

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_SEQUENCE_LEN: usize = 20;
pub const DEFAULT_MIN_FREQUENCY: usize = 10;

/// One guest session as parsed from the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    #[serde(rename = "sid")]
    pub session_id: String,
    pub items: Vec<u64>,
    #[serde(rename = "cats", default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
    #[serde(rename = "ts", default, skip_serializing_if = "Option::is_none")]
    pub timestamps: Option<Vec<i64>>,
}

impl SessionRecord {
    fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::Input(format!("session {} has no items", self.session_id)));
        }
        if let Some(c) = &self.categories {
            if c.len() != self.items.len() {
                return Err(Error::Input(format!(
                    "session {}: {} categories for {} items",
                    self.session_id,
                    c.len(),
                    self.items.len()
                )));
            }
        }
        if let Some(t) = &self.timestamps {
            if t.len() != self.items.len() {
                return Err(Error::Input(format!(
                    "session {}: {} timestamps for {} items",
                    self.session_id,
                    t.len(),
                    self.items.len()
                )));
            }
        }
        Ok(())
    }

    /// Stable-sort items (and parallel lists) by timestamp when present.
    fn order_by_time(&mut self) {
        let Some(ts) = &self.timestamps else { return };
        let mut order: Vec<usize> = (0..ts.len()).collect();
        order.sort_by_key(|&i| ts[i]);
        if order.iter().enumerate().all(|(i, &o)| i == o) {
            return;
        }
        self.items = order.iter().map(|&i| self.items[i]).collect();
        if let Some(c) = &self.categories {
            self.categories = Some(order.iter().map(|&i| c[i].clone()).collect());
        }
        self.timestamps = Some(order.iter().map(|&i| ts[i]).collect());
    }
}

/// Dense item vocabulary built from raw occurrence counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    raw_to_dense: HashMap<u64, u32>,
    dense_to_raw: Vec<u64>,
    counts: Vec<u64>,
    categories: Vec<Option<String>>,
    pub min_frequency: usize,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.dense_to_raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dense_to_raw.is_empty()
    }

    pub fn dense(&self, raw: u64) -> Option<u32> {
        self.raw_to_dense.get(&raw).copied()
    }

    pub fn raw(&self, dense: u32) -> Option<u64> {
        self.dense_to_raw.get(dense as usize).copied()
    }

    pub fn count(&self, dense: u32) -> u64 {
        self.counts[dense as usize]
    }

    pub fn category(&self, dense: u32) -> Option<&str> {
        self.categories
            .get(dense as usize)
            .and_then(|c| c.as_deref())
    }

    /// Occurrence counts per dense index, the popularity ranking source.
    pub fn popularity(&self) -> &[u64] {
        &self.counts
    }

    /// SHA-256 over the dense -> raw table, hex-encoded. Checkpoints and the
    /// NN matrix must be built against the same vocabulary hash.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (i, raw) in self.dense_to_raw.iter().enumerate() {
            h.update(u64::to_le_bytes(*raw));
            h.update(u64::to_le_bytes(self.counts[i]));
        }
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One (prefix, next item) training pair in dense indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingSequence {
    pub inputs: Vec<u32>,
    pub target: u32,
}

/// Result of a streaming parse: records plus a skip report.
#[derive(Debug)]
pub struct ParseReport {
    pub records: Vec<SessionRecord>,
    pub skipped: usize,
}

/// Parse a JSON-lines session file. Malformed lines are counted and
/// skipped; more than 10% malformed is treated as a corrupt corpus.
pub fn parse_sessions(path: &Path) -> Result<ParseReport> {
    let file = std::fs::File::open(path)?;
    parse_sessions_reader(BufReader::new(file))
}

pub fn parse_sessions_reader(reader: impl BufRead) -> Result<ParseReport> {
    let mut records = Vec::new();
    let mut skipped = 0usize;
    let mut total = 0usize;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        match serde_json::from_str::<SessionRecord>(&line) {
            Ok(mut rec) => {
                if rec.validate().is_ok() {
                    rec.order_by_time();
                    records.push(rec);
                } else {
                    skipped += 1;
                }
            }
            Err(_) => skipped += 1,
        }
    }
    // The percentage gate only makes sense with enough lines to estimate it.
    if total >= 10 && skipped * 10 > total {
        return Err(Error::Corpus(format!(
            "{skipped} of {total} lines malformed (over 10%)"
        )));
    }
    Ok(ParseReport { records, skipped })
}

/// Count raw occurrences, drop items below `min_frequency`, and assign dense
/// indices in descending-count order (ties by raw id ascending). Category
/// labels are the most frequently observed label per item, ties by label.
pub fn build_vocabulary(sessions: &[SessionRecord], min_frequency: usize) -> Result<Vocabulary> {
    if sessions.is_empty() {
        return Err(Error::Corpus("no sessions".into()));
    }
    let mut counts: HashMap<u64, u64> = HashMap::new();
    let mut cat_votes: HashMap<u64, HashMap<String, u64>> = HashMap::new();
    for s in sessions {
        for (i, &item) in s.items.iter().enumerate() {
            *counts.entry(item).or_insert(0) += 1;
            if let Some(cats) = &s.categories {
                *cat_votes
                    .entry(item)
                    .or_default()
                    .entry(cats[i].clone())
                    .or_insert(0) += 1;
            }
        }
    }
    let mut retained: Vec<(u64, u64)> = counts
        .into_iter()
        .filter(|&(_, c)| c as usize >= min_frequency)
        .collect();
    if retained.is_empty() {
        return Err(Error::Corpus(format!(
            "no item appears at least {min_frequency} times"
        )));
    }
    retained.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut raw_to_dense = HashMap::with_capacity(retained.len());
    let mut dense_to_raw = Vec::with_capacity(retained.len());
    let mut counts_v = Vec::with_capacity(retained.len());
    let mut categories = Vec::with_capacity(retained.len());
    for (idx, (raw, count)) in retained.into_iter().enumerate() {
        raw_to_dense.insert(raw, idx as u32);
        dense_to_raw.push(raw);
        counts_v.push(count);
        let cat = cat_votes.get(&raw).map(|votes| {
            let mut v: Vec<(&String, &u64)> = votes.iter().collect();
            v.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
            v[0].0.clone()
        });
        categories.push(cat);
    }
    Ok(Vocabulary {
        raw_to_dense,
        dense_to_raw,
        counts: counts_v,
        categories,
        min_frequency,
    })
}

/// Map a session to cleaned dense indices: cross-category filter relative to
/// the last item's category (when categories are present), out-of-vocabulary
/// drop, consecutive-duplicate collapse, then cap to the most recent
/// [`MAX_SEQUENCE_LEN`] items.
pub fn clean_sequence(record: &SessionRecord, vocab: &Vocabulary) -> Vec<u32> {
    let items: Vec<u64> = match &record.categories {
        Some(cats) if !record.items.is_empty() => {
            let last_cat = cats.last().expect("validated parallel list");
            record
                .items
                .iter()
                .zip(cats.iter())
                .filter(|(_, c)| *c == last_cat)
                .map(|(i, _)| *i)
                .collect()
        }
        _ => record.items.clone(),
    };
    let mut out: Vec<u32> = Vec::with_capacity(items.len());
    for raw in items {
        let Some(dense) = vocab.dense(raw) else { continue };
        if out.last() == Some(&dense) {
            continue;
        }
        out.push(dense);
    }
    if out.len() > MAX_SEQUENCE_LEN {
        out.drain(..out.len() - MAX_SEQUENCE_LEN);
    }
    out
}

/// Expand a cleaned sequence of length L into its L-1 (prefix, next) pairs.
/// Sequences shorter than 2 yield nothing.
pub fn augment_prefixes(seq: &[u32]) -> Vec<TrainingSequence> {
    if seq.len() < 2 {
        return Vec::new();
    }
    (1..seq.len())
        .map(|k| TrainingSequence {
            inputs: seq[..k].to_vec(),
            target: seq[k],
        })
        .collect()
}

/// Full preparation pipeline: clean every session and emit training pairs,
/// counting sequences too short to use.
pub fn prepare_pairs(
    sessions: &[SessionRecord],
    vocab: &Vocabulary,
) -> (Vec<TrainingSequence>, usize) {
    let mut pairs = Vec::new();
    let mut too_short = 0usize;
    for s in sessions {
        let cleaned = clean_sequence(s, vocab);
        if cleaned.len() < 2 {
            too_short += 1;
            continue;
        }
        pairs.extend(augment_prefixes(&cleaned));
    }
    (pairs, too_short)
}

// --- binary training-set format ---------------------------------------
//
// pairs.bin: repeated records of [len: u32 LE][len x input: u32 LE]
// [target: u32 LE]. manifest.json carries the vocabulary and category map.

pub fn write_pairs(path: &Path, pairs: &[TrainingSequence]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in pairs {
        w.write_all(&(p.inputs.len() as u32).to_le_bytes())?;
        for &i in &p.inputs {
            w.write_all(&i.to_le_bytes())?;
        }
        w.write_all(&p.target.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pairs(path: &Path) -> Result<Vec<TrainingSequence>> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    let mut pairs = Vec::new();
    let mut pos = 0usize;
    let take_u32 = |data: &[u8], pos: &mut usize| -> Result<u32> {
        if *pos + 4 > data.len() {
            return Err(Error::Corpus("truncated pairs file".into()));
        }
        let v = u32::from_le_bytes(data[*pos..*pos + 4].try_into().unwrap());
        *pos += 4;
        Ok(v)
    };
    while pos < data.len() {
        let len = take_u32(&data, &mut pos)? as usize;
        if len == 0 || len >= MAX_SEQUENCE_LEN {
            return Err(Error::Corpus(format!("bad record length {len}")));
        }
        let mut inputs = Vec::with_capacity(len);
        for _ in 0..len {
            inputs.push(take_u32(&data, &mut pos)?);
        }
        let target = take_u32(&data, &mut pos)?;
        pairs.push(TrainingSequence { inputs, target });
    }
    Ok(pairs)
}

pub fn write_manifest(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), vocab)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vocabulary> {
    let file = std::fs::File::open(path)?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}
