//! Policy statistics over recorded decisions: overall and per-block
//! fractions, the reuse/keep quotient, instance-level time sensitivity
//! and polynomial depth trends.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::gating::{BlockTrace, Decision, PolicyTrace};

/// Raw decision counts of one gated block. Arrays are indexed by decision
/// code (`keep`, `reuse`, `skip`).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BlockCounts {
    pub block_id: usize,
    /// Over every (clip, frame, channel).
    pub decisions: [u64; 3],
    /// (clip, channel) pairs holding one decision on every frame.
    pub constant: [u64; 3],
    /// Number of (clip, channel) pairs.
    pub pairs: u64,
}

impl BlockCounts {
    pub fn from_trace(t: &BlockTrace) -> Self {
        let mut c = BlockCounts {
            block_id: t.block_id,
            pairs: (t.clips * t.channels) as u64,
            ..Default::default()
        };
        for clip in 0..t.clips {
            let d = t.clip(clip);
            for &code in d {
                c.decisions[code as usize] += 1;
            }
            for ch in 0..t.channels {
                let first = d[ch];
                if (1..t.frames).all(|f| d[f * t.channels + ch] == first) {
                    c.constant[first as usize] += 1;
                }
            }
        }
        c
    }

    fn add(&mut self, other: &BlockCounts) {
        for i in 0..3 {
            self.decisions[i] += other.decisions[i];
            self.constant[i] += other.constant[i];
        }
        self.pairs += other.pairs;
    }
}

/// Counts for a set of traces; merging is plain addition.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PolicyCounts {
    pub blocks: Vec<BlockCounts>,
}

impl PolicyCounts {
    pub fn from_trace(trace: &PolicyTrace) -> Self {
        PolicyCounts {
            blocks: trace.blocks.iter().map(BlockCounts::from_trace).collect(),
        }
    }

    pub fn merge(&mut self, other: &PolicyCounts) -> Result<()> {
        if self.blocks.is_empty() {
            *self = other.clone();
            return Ok(());
        }
        let ids = |p: &PolicyCounts| p.blocks.iter().map(|b| b.block_id).collect::<Vec<_>>();
        if ids(self) != ids(other) {
            return Err(contract_err!(
                "cannot merge counts over blocks {:?} and {:?}",
                ids(self),
                ids(other)
            ));
        }
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.add(b);
        }
        Ok(())
    }

    pub fn stats(&self) -> Result<PolicyStats> {
        let total: u64 = self.blocks.iter().flat_map(|b| b.decisions).sum();
        if total == 0 {
            return Err(contract_err!("no policy decisions to aggregate"));
        }
        let mut overall = [0u64; 3];
        for b in &self.blocks {
            for (o, d) in overall.iter_mut().zip(b.decisions) {
                *o += d;
            }
        }
        let overall = to_display(overall.map(|c| c as f64 / total as f64));
        let [_, reuse, keep] = overall;
        let quotient_defined = keep > 0.0;
        let per_block = self
            .blocks
            .iter()
            .map(|b| {
                let n: u64 = b.decisions.iter().sum::<u64>().max(1);
                let pairs = b.pairs.max(1) as f64;
                BlockStats {
                    block_id: b.block_id,
                    fractions: to_display(b.decisions.map(|c| c as f64 / n as f64)),
                    instance: to_display(b.constant.map(|c| c as f64 / pairs)),
                }
            })
            .collect();
        Ok(PolicyStats {
            overall,
            quotient: if quotient_defined { reuse / keep } else { 0.0 },
            quotient_defined,
            per_block,
        })
    }
}

/// Reorders code-indexed values to the reported `[skip, reuse, keep]`.
fn to_display(v: [f64; 3]) -> [f64; 3] {
    [
        v[Decision::Skip.index()],
        v[Decision::Reuse.index()],
        v[Decision::Keep.index()],
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockStats {
    pub block_id: usize,
    /// `[skip, reuse, keep]` over every (clip, frame, channel).
    pub fractions: [f64; 3],
    /// `[skip, reuse, keep]`: share of (clip, channel) pairs holding that
    /// decision on every frame, frame 0 included.
    pub instance: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyStats {
    /// `[skip, reuse, keep]`.
    pub overall: [f64; 3],
    /// Reuse over keep; 0 when nothing is kept.
    pub quotient: f64,
    pub quotient_defined: bool,
    /// Ordered by block depth.
    pub per_block: Vec<BlockStats>,
}

impl PolicyStats {
    /// Per-block series of one decision, by depth.
    pub fn series(&self, d: Decision) -> Vec<f64> {
        let i = to_display_index(d);
        self.per_block.iter().map(|b| b.fractions[i]).collect()
    }

    /// Writes `stats.json` and `per_block.csv` into `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        let json = dir.join("stats.json");
        let text = serde_json::to_string_pretty(self).expect("serialisable stats");
        std::fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("per_block.csv");
        let mut out = Vec::new();
        self.write_csv(&mut out).expect("writing to memory");
        std::fs::write(&csv, out).map_err(|e| Error::io(&csv, e))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "block,skip,reuse,keep,skip_instance,reuse_instance,keep_instance")?;
        for b in &self.per_block {
            let [s, r, k] = b.fractions;
            let [si, ri, ki] = b.instance;
            writeln!(w, "{},{s:?},{r:?},{k:?},{si:?},{ri:?},{ki:?}", b.block_id)?;
        }
        Ok(())
    }

    /// Reads back the output of [`PolicyStats::export`].
    pub fn load(dir: &Path) -> Result<Self> {
        let json = dir.join("stats.json");
        let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            offset: 0,
            msg: format!("{}: {e}", json.display()),
        })
    }
}

fn to_display_index(d: Decision) -> usize {
    match d {
        Decision::Skip => 0,
        Decision::Reuse => 1,
        Decision::Keep => 2,
    }
}

/// Parses `per_block.csv` rows.
pub fn read_per_block_csv<R: std::io::Read>(input: R) -> Result<Vec<BlockStats>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line.map_err(|e| Error::io("<per_block.csv>", e))?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || contract_err!("per_block.csv line {}: malformed row {line:?}", i + 1);
        if f.len() != 7 {
            return Err(bad());
        }
        let v: Vec<f64> = f[1..].iter().map(|s| s.parse().map_err(|_| bad())).collect::<Result<_>>()?;
        out.push(BlockStats {
            block_id: f[0].parse().map_err(|_| bad())?,
            fractions: [v[0], v[1], v[2]],
            instance: [v[3], v[4], v[5]],
        });
    }
    Ok(out)
}

/// Aggregates a stream of traces; every (clip, frame, channel) weighs the
/// same.
pub fn aggregate<'a>(traces: impl IntoIterator<Item = &'a PolicyTrace>) -> Result<PolicyStats> {
    let mut counts = PolicyCounts::default();
    let mut seen = false;
    for t in traces {
        counts.merge(&PolicyCounts::from_trace(t))?;
        seen = true;
    }
    if !seen {
        return Err(contract_err!("aggregate needs at least one trace"));
    }
    counts.stats()
}

/// Least-squares polynomial over block index `0, 1, …`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendFit {
    /// Constant term first.
    pub coefficients: Vec<f64>,
    pub residuals: Vec<f64>,
}

impl TrendFit {
    pub fn eval(&self, x: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }
}

/// Fits a polynomial of degree `order` through the normal equations.
pub fn trend_fit(series: &[f64], order: usize) -> Result<TrendFit> {
    let n = order + 1;
    if series.len() < n {
        return Err(contract_err!(
            "a degree-{order} trend needs at least {n} blocks, got {}",
            series.len()
        ));
    }
    let powers: Vec<Vec<f64>> = (0..series.len())
        .map(|i| (0..n).map(|p| (i as f64).powi(p as i32)).collect())
        .collect();
    let mut a = vec![vec![0.0; n + 1]; n];
    for (row, &y) in powers.iter().zip(series) {
        for r in 0..n {
            for c in 0..n {
                a[r][c] += row[r] * row[c];
            }
            a[r][n] += row[r] * y;
        }
    }
    let coefficients = solve(a)?;
    let fit = TrendFit {
        coefficients,
        residuals: Vec::new(),
    };
    let residuals = series.iter().enumerate().map(|(i, y)| y - fit.eval(i as f64)).collect();
    Ok(TrendFit { residuals, ..fit })
}

/// Gauss-Jordan elimination with partial pivoting on an augmented matrix.
fn solve(mut a: Vec<Vec<f64>>) -> Result<Vec<f64>> {
    let n = a.len();
    let scale = a.iter().flat_map(|r| &r[..n]).fold(0.0f64, |m, v| m.max(v.abs()));
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty");
        // Pivots this small relative to the matrix leave no usable digits.
        if a[piv][col].abs() <= scale * 1e-14 {
            return Err(contract_err!("trend fit is ill-conditioned (pivot {:e})", a[piv][col]));
        }
        a.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=n {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    Ok((0..n).map(|i| a[i][n] / a[i][i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_trace(rng: &mut ChaCha8Rng, clips: usize) -> PolicyTrace {
        let blocks = (0..3)
            .map(|b| {
                let (t, c) = (4, 3 + b);
                let d = (0..clips * t * c).map(|_| rng.random_range(0..3u8)).collect();
                BlockTrace::new(b, clips, t, c, d).unwrap()
            })
            .collect();
        PolicyTrace { blocks }
    }

    #[test]
    fn quotient_from_counts() {
        let counts = PolicyCounts {
            blocks: vec![BlockCounts {
                block_id: 0,
                decisions: [500, 347, 153],
                constant: [0; 3],
                pairs: 10,
            }],
        };
        let s = counts.stats().unwrap();
        assert!((s.quotient - 0.694).abs() < 1e-12);
        assert_eq!(s.overall, [0.153, 0.347, 0.5]);
        assert!(s.quotient_defined);
    }

    #[test]
    fn all_keep_has_zero_quotient() {
        let t = PolicyTrace {
            blocks: vec![BlockTrace::new(1, 2, 3, 4, vec![0; 24]).unwrap()],
        };
        let s = aggregate([&t]).unwrap();
        assert_eq!(s.overall, [0.0, 0.0, 1.0]);
        assert_eq!(s.quotient, 0.0);
        assert_eq!(s.per_block[0].instance, [0.0, 0.0, 1.0]);
    }

    #[test]
    fn nothing_kept_flags_the_quotient() {
        let t = PolicyTrace {
            blocks: vec![BlockTrace::new(0, 1, 2, 2, vec![1, 2, 2, 1]).unwrap()],
        };
        let s = aggregate([&t]).unwrap();
        assert_eq!(s.quotient, 0.0);
        assert!(!s.quotient_defined);
    }

    #[test]
    fn constant_policies_make_instance_equal_fractions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (clips, t, c) = (5, 4, 6);
        let mut d = vec![0u8; clips * t * c];
        for clip in 0..clips {
            for ch in 0..c {
                let code = rng.random_range(0..3u8);
                for f in 0..t {
                    d[(clip * t + f) * c + ch] = code;
                }
            }
        }
        let trace = PolicyTrace {
            blocks: vec![BlockTrace::new(0, clips, t, c, d).unwrap()],
        };
        let s = aggregate([&trace]).unwrap();
        assert_eq!(s.per_block[0].instance, s.per_block[0].fractions);
    }

    #[test]
    fn fractions_and_bounds_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let trace = random_trace(&mut rng, 6);
        let s = aggregate([&trace]).unwrap();
        assert!((s.overall.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for b in &s.per_block {
            assert!((b.fractions.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for i in 0..3 {
                assert!(b.instance[i] <= b.fractions[i]);
            }
        }
    }

    #[test]
    fn order_duplication_and_merging() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_trace(&mut rng, 3);
        let b = random_trace(&mut rng, 5);
        let ab = aggregate([&a, &b]).unwrap();
        assert_eq!(aggregate([&b, &a]).unwrap(), ab);
        assert_eq!(aggregate([&a, &a]).unwrap(), aggregate([&a]).unwrap());
        // Merged stats are the decision-weighted average of the parts.
        let (sa, sb) = (aggregate([&a]).unwrap(), aggregate([&b]).unwrap());
        for i in 0..3 {
            let w = (3.0 * sa.overall[i] + 5.0 * sb.overall[i]) / 8.0;
            assert!((ab.overall[i] - w).abs() < 1e-12);
        }
        assert!(aggregate(std::iter::empty::<&PolicyTrace>()).is_err());
    }

    #[test]
    fn trend_fits() {
        let c = trend_fit(&[0.25; 6], 3).unwrap();
        assert!((c.coefficients[0] - 0.25).abs() < 1e-10);
        assert!(c.coefficients[1..].iter().all(|v| v.abs() < 1e-10));

        let line = trend_fit(&[0.0, 1.0, 2.0, 3.0, 4.0], 3).unwrap();
        assert!((line.coefficients[1] - 1.0).abs() < 1e-10);
        assert!(line.coefficients[0].abs() < 1e-10 && line.coefficients[2..].iter().all(|v| v.abs() < 1e-10));

        let planted = [0.3, -0.2, 0.05, -0.004];
        let ys: Vec<f64> = (0..8)
            .map(|x| planted.iter().rev().fold(0.0, |acc, c| acc * x as f64 + c))
            .collect();
        let fit = trend_fit(&ys, 3).unwrap();
        for (a, b) in fit.coefficients.iter().zip(planted) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
        assert!(fit.residuals.iter().all(|r| r.abs() < 1e-10));
        assert!(trend_fit(&[1.0, 2.0, 3.0], 3).is_err());
    }

    #[test]
    fn export_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = aggregate([&random_trace(&mut rng, 7)]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.export(dir.path()).unwrap();
        assert_eq!(PolicyStats::load(dir.path()).unwrap(), s);
        let csv = std::fs::read(dir.path().join("per_block.csv")).unwrap();
        assert_eq!(String::from_utf8_lossy(&csv).lines().count(), s.per_block.len() + 1);
        assert_eq!(read_per_block_csv(&csv[..]).unwrap(), s.per_block);
    }
}
