//! Recorded gate decisions and their CSV / JSON export.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Decision;
use crate::error::{contract_err, Error, Result};

/// Decisions of one gated block for a batch, laid out `[clips, T, c']`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockTrace {
    pub block_id: usize,
    pub clips: usize,
    pub frames: usize,
    pub channels: usize,
    pub decisions: Vec<u8>,
    /// Relaxed samples `[clips, T, c', 3]`, present for sampled policies.
    pub soft: Option<Vec<[f64; 3]>>,
}

impl BlockTrace {
    pub fn new(block_id: usize, clips: usize, frames: usize, channels: usize, decisions: Vec<u8>) -> Result<Self> {
        if decisions.len() != clips * frames * channels {
            return Err(contract_err!(
                "block {block_id}: {} decisions for a [{clips}, {frames}, {channels}] trace",
                decisions.len()
            ));
        }
        if let Some(bad) = decisions.iter().find(|&&d| d > 2) {
            return Err(contract_err!("block {block_id}: decision code {bad} outside {{0, 1, 2}}"));
        }
        Ok(BlockTrace {
            block_id,
            clips,
            frames,
            channels,
            decisions,
            soft: None,
        })
    }

    /// `[T, c']` decisions of one clip.
    pub fn clip(&self, clip: usize) -> &[u8] {
        let len = self.frames * self.channels;
        &self.decisions[clip * len..][..len]
    }

    pub fn decision(&self, clip: usize, frame: usize, channel: usize) -> Decision {
        Decision::from_index(self.decisions[(clip * self.frames + frame) * self.channels + channel] as usize)
    }

    /// `[keep, reuse, skip]` counts.
    pub fn counts(&self) -> [u64; 3] {
        let mut c = [0u64; 3];
        for &d in &self.decisions {
            c[d as usize] += 1;
        }
        c
    }
}

/// Per-gate decisions of one or more batches.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PolicyTrace {
    pub blocks: Vec<BlockTrace>,
}

/// Decision fractions of one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockFractions {
    pub block_id: usize,
    pub keep: f64,
    pub reuse: f64,
    pub skip: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub clips: usize,
    pub blocks: Vec<BlockFractions>,
}

impl PolicyTrace {
    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn clips(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.clips)
    }

    /// Appends the clips of `other` after those of `self`.
    pub fn append(&mut self, other: PolicyTrace) -> Result<()> {
        if self.blocks.is_empty() {
            *self = other;
            return Ok(());
        }
        if other.blocks.len() != self.blocks.len() {
            return Err(contract_err!(
                "cannot append a trace of {} blocks to one of {}",
                other.blocks.len(),
                self.blocks.len()
            ));
        }
        for (a, b) in self.blocks.iter_mut().zip(other.blocks) {
            if (a.block_id, a.frames, a.channels) != (b.block_id, b.frames, b.channels) {
                return Err(contract_err!("block layouts differ when appending traces"));
            }
            a.clips += b.clips;
            a.decisions.extend(b.decisions);
            a.soft = match (a.soft.take(), b.soft) {
                (Some(mut x), Some(y)) => {
                    x.extend(y);
                    Some(x)
                }
                _ => None,
            };
        }
        Ok(())
    }

    /// Overall `[keep, reuse, skip]` fractions.
    pub fn fractions(&self) -> [f64; 3] {
        let mut c = [0u64; 3];
        for b in &self.blocks {
            for (t, v) in c.iter_mut().zip(b.counts()) {
                *t += v;
            }
        }
        let total = c.iter().sum::<u64>().max(1) as f64;
        c.map(|v| v as f64 / total)
    }

    pub fn summary(&self) -> TraceSummary {
        TraceSummary {
            clips: self.clips(),
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    let c = b.counts();
                    let total = c.iter().sum::<u64>().max(1) as f64;
                    BlockFractions {
                        block_id: b.block_id,
                        keep: c[0] as f64 / total,
                        reuse: c[1] as f64 / total,
                        skip: c[2] as f64 / total,
                    }
                })
                .collect(),
        }
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "block_id,sample_id,frame,channel,decision")?;
        for b in &self.blocks {
            for clip in 0..b.clips {
                for t in 0..b.frames {
                    for ch in 0..b.channels {
                        let d = b.decisions[(clip * b.frames + t) * b.channels + ch];
                        writeln!(out, "{},{clip},{t},{ch},{d}", b.block_id)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Writes `traces.csv` and `traces_summary.json` into `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        let csv = dir.join("traces.csv");
        let file = std::fs::File::create(&csv).map_err(|e| Error::io(&csv, e))?;
        self.write_csv(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("traces_summary.json");
        let text = serde_json::to_string_pretty(&self.summary()).expect("serialisable summary");
        std::fs::write(&json, text).map_err(|e| Error::io(&json, e))
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        type Row = (usize, usize, usize, u8);
        let mut rows: BTreeMap<usize, Vec<Row>> = BTreeMap::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<trace csv>", e))?;
            if lineno == 0 || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            let parse = |i: usize| -> Result<usize> {
                fields
                    .get(i)
                    .and_then(|f| f.parse().ok())
                    .ok_or_else(|| contract_err!("trace csv line {}: malformed row {line:?}", lineno + 1))
            };
            if fields.len() != 5 {
                return Err(contract_err!("trace csv line {}: expected 5 columns", lineno + 1));
            }
            let decision = parse(4)?;
            if decision > 2 {
                return Err(contract_err!("trace csv line {}: decision {decision}", lineno + 1));
            }
            rows.entry(parse(0)?)
                .or_default()
                .push((parse(1)?, parse(2)?, parse(3)?, decision as u8));
        }
        let mut blocks = Vec::new();
        for (block_id, entries) in rows {
            let clips = entries.iter().map(|r| r.0).max().unwrap_or(0) + 1;
            let frames = entries.iter().map(|r| r.1).max().unwrap_or(0) + 1;
            let channels = entries.iter().map(|r| r.2).max().unwrap_or(0) + 1;
            if entries.len() != clips * frames * channels {
                return Err(contract_err!(
                    "trace csv: block {block_id} has {} rows, expected a full [{clips}, {frames}, {channels}] grid",
                    entries.len()
                ));
            }
            let mut decisions = vec![u8::MAX; entries.len()];
            for (s, t, c, d) in entries {
                decisions[(s * frames + t) * channels + c] = d;
            }
            if decisions.contains(&u8::MAX) {
                return Err(contract_err!("trace csv: block {block_id} has duplicate rows"));
            }
            blocks.push(BlockTrace::new(block_id, clips, frames, channels, decisions)?);
        }
        Ok(PolicyTrace { blocks })
    }
}
