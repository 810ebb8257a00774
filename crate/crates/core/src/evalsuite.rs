//! Correlation metrics, the novelty-gain trade-off sweep, sentence-position profiles and
//! CSV/text reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::PaperRecord;
use crate::error::{Error, Result};
use crate::decode::{static_decode, DecodeOptions};
use crate::model::Proposer;
use crate::reward::RewardSet;
use crate::rng::{derive_seed, text_code};
use crate::steer::{AdapterSet, ControlVector};

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} vs {} observations", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument("correlation needs at least 2 observations".into()));
    }
    Ok(())
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation: Pearson of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y)).map_err(|_| Error::InvalidArgument("all-tied sequence".into()))
}

/// One row of a trade-off sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gain: f64,
    pub mean_n: f64,
    pub mean_f: f64,
    pub mean_e: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn gains_increasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[0].gain < w[1].gain)
    }

    pub fn n_non_decreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].mean_n >= w[0].mean_n)
    }

    pub fn f_non_increasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].mean_f <= w[0].mean_f)
    }
}

/// For each novelty gain `g`, static-decodes every prompt under `(g, 1, 1)` once per
/// seed and averages the three idea-level reward scores. Decoding seeds are derived from
/// `(seed, prompt id)` and do not depend on the gain.
pub fn sweep_tradeoff(
    model: &Proposer,
    adapters: &AdapterSet,
    rewards: &RewardSet,
    prompts: &[PaperRecord],
    gains: &[f64],
    seeds: &[u64],
    opts: &DecodeOptions,
) -> Result<SweepResult> {
    if gains.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("sweep gains must be strictly increasing".into()));
    }
    if prompts.is_empty() || seeds.is_empty() {
        return Err(Error::Empty("sweep needs prompts and seeds".into()));
    }
    let mut rows = Vec::with_capacity(gains.len());
    for &g in gains {
        let cv = ControlVector::new(g, 1.0, 1.0);
        let mut sums = [0.0; 3];
        let mut count = 0usize;
        for &seed in seeds {
            for paper in prompts {
                let d = static_decode(model, adapters, paper, cv, derive_seed(&[seed, text_code(&paper.id)]), opts)?;
                let ctx = model.vocab.paper_context(paper, usize::MAX);
                let scores = rewards.score_all(&ctx, &d.sentences.concat())?;
                for (s, v) in sums.iter_mut().zip(scores) {
                    *s += v;
                }
                count += 1;
            }
        }
        let c = count as f64;
        rows.push(SweepRow {
            gain: g,
            mean_n: sums[0] / c,
            mean_f: sums[1] / c,
            mean_e: sums[2] / c,
            seeds: seeds.len(),
        });
    }
    Ok(SweepResult { rows })
}

pub const BUCKETS: usize = 10;

/// Bucket in `1..=10` of sentence `t` (1-based) of an `s`-sentence idea:
/// `round(1 + 9·(t − 1)/(s − 1))`, and bucket 1 when `s = 1`.
pub fn bucket_of(t: usize, s: usize) -> usize {
    assert!(t >= 1 && t <= s, "sentence {t} of {s}");
    if s == 1 {
        return 1;
    }
    (1.0 + 9.0 * (t - 1) as f64 / (s - 1) as f64).round() as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileBucket {
    pub bucket: usize,
    pub mean_n: f64,
    pub mean_f: f64,
    pub mean_e: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PositionProfile {
    pub buckets: Vec<ProfileBucket>,
}

impl PositionProfile {
    pub fn total(&self) -> usize {
        self.buckets.iter().map(|b| b.count).sum()
    }

    /// Bucket whose mean of dimension `dim` rises most over the preceding bucket.
    pub fn largest_jump(&self, dim: crate::corpus::Dimension) -> Option<usize> {
        let get = |b: &ProfileBucket| [b.mean_n, b.mean_f, b.mean_e][dim.index()];
        self.buckets
            .windows(2)
            .filter(|w| w[0].count > 0 && w[1].count > 0)
            .max_by(|a, b| (get(&a[1]) - get(&a[0])).total_cmp(&(get(&b[1]) - get(&b[0]))))
            .map(|w| w[1].bucket)
    }
}

/// Mean per-sentence scores in each of the ten position buckets. Empty buckets report
/// NaN means and a zero count.
pub fn position_profile(ideas: &[Vec<[f64; 3]>]) -> Result<PositionProfile> {
    if ideas.iter().all(|i| i.is_empty()) {
        return Err(Error::Empty("no scored sentences".into()));
    }
    let mut sums = [[0.0; 3]; BUCKETS];
    let mut counts = [0usize; BUCKETS];
    for idea in ideas {
        for (t, s) in idea.iter().enumerate() {
            let b = bucket_of(t + 1, idea.len()) - 1;
            for d in 0..3 {
                sums[b][d] += s[d];
            }
            counts[b] += 1;
        }
    }
    let buckets = (0..BUCKETS)
        .map(|b| {
            let c = counts[b] as f64;
            let m = |d: usize| if counts[b] == 0 { f64::NAN } else { sums[b][d] / c };
            ProfileBucket {
                bucket: b + 1,
                mean_n: m(0),
                mean_f: m(1),
                mean_e: m(2),
                count: counts[b],
            }
        })
        .collect();
    Ok(PositionProfile { buckets })
}

/// Correlation between two score columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub name: String,
    pub pearson: f64,
    pub spearman: f64,
    pub count: usize,
}

/// Everything a report can contain.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalResults {
    pub sweep: Option<SweepResult>,
    pub profile: Option<PositionProfile>,
    pub correlations: Vec<CorrelationRow>,
}

pub const SWEEP_CSV: &str = "sweep.csv";
pub const PROFILE_CSV: &str = "position_profile.csv";
pub const CORRELATION_CSV: &str = "correlations.csv";
pub const SUMMARY_TXT: &str = "summary.txt";

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Writes the CSV tables present in `results` plus `summary.txt` into `dir`.
pub fn emit_report(results: &EvalResults, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut summary = String::new();
    if let Some(s) = &results.sweep {
        let p = dir.join(SWEEP_CSV);
        write_rows(&p, &["gain", "mean_n", "mean_f", "mean_e", "seeds"], &s.rows)?;
        written.push(p);
        summary.push_str(&format!(
            "sweep: {} gains, novelty non-decreasing: {}, feasibility non-increasing: {}\n",
            s.rows.len(),
            s.n_non_decreasing(),
            s.f_non_increasing()
        ));
        for r in &s.rows {
            summary.push_str(&format!(
                "  gain {:.3}: N {:.4} F {:.4} E {:.4}\n",
                r.gain, r.mean_n, r.mean_f, r.mean_e
            ));
        }
    }
    if let Some(pp) = &results.profile {
        let p = dir.join(PROFILE_CSV);
        write_rows(&p, &["bucket", "mean_n", "mean_f", "mean_e", "count"], &pp.buckets)?;
        written.push(p);
        summary.push_str(&format!("position profile: {} sentences\n", pp.total()));
        for b in &pp.buckets {
            summary.push_str(&format!(
                "  bucket {:2}: N {:.4} F {:.4} E {:.4} ({} sentences)\n",
                b.bucket, b.mean_n, b.mean_f, b.mean_e, b.count
            ));
        }
    }
    if !results.correlations.is_empty() {
        let p = dir.join(CORRELATION_CSV);
        write_rows(&p, &["name", "pearson", "spearman", "count"], &results.correlations)?;
        written.push(p);
        for c in &results.correlations {
            summary.push_str(&format!(
                "correlation {}: pearson {:.4} spearman {:.4} (n = {})\n",
                c.name, c.pearson, c.spearman, c.count
            ));
        }
    }
    let p = dir.join(SUMMARY_TXT);
    std::fs::write(&p, summary).map_err(|e| Error::io(&p, e))?;
    written.push(p);
    Ok(written)
}

/// Writes one sweep table with the same columns as [`emit_report`].
pub fn write_sweep_csv(path: &Path, sweep: &SweepResult) -> Result<()> {
    write_rows(path, &["gain", "mean_n", "mean_f", "mean_e", "seeds"], &sweep.rows)
}

/// Reads back a sweep table written by [`emit_report`].
pub fn read_sweep(path: &Path) -> Result<SweepResult> {
    Ok(SweepResult { rows: read_rows(path)? })
}

/// Reads back a position profile written by [`emit_report`].
pub fn read_profile(path: &Path) -> Result<PositionProfile> {
    Ok(PositionProfile { buckets: read_rows(path)? })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_linear_cases() {
        let x = [1.0, 2.0, 3.5, 7.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 3.0).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!(pearson(&x, &[1.0; 4]).is_err());
        assert!(pearson(&[1.0], &[2.0]).is_err());
    }

    #[test]
    fn spearman_monotone_and_ties() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((spearman(&x, &[0.1, 0.5, 0.7, 10.0, 11.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[5.0, 4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!(spearman(&x, &[2.0; 5]).is_err());
    }

    #[test]
    fn buckets() {
        for k in 1..=10 {
            assert_eq!(bucket_of(k, 10), k);
        }
        assert_eq!(bucket_of(1, 1), 1);
        assert_eq!(bucket_of(1, 4), 1);
        assert_eq!(bucket_of(4, 4), 10);
    }

    #[test]
    fn empty_sweep_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let res = EvalResults {
            sweep: Some(SweepResult::default()),
            ..Default::default()
        };
        emit_report(&res, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join(SWEEP_CSV)).unwrap();
        assert_eq!(text, "gain,mean_n,mean_f,mean_e,seeds\n");
        assert_eq!(read_sweep(&dir.path().join(SWEEP_CSV)).unwrap(), SweepResult::default());
    }
}
