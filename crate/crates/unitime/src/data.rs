//! Multi-domain dataset handling.
//!
//! Each domain is a CSV of channels sampled at a fixed cadence. Loading
//! splits it chronologically 70/10/20, fits a per-channel standard scaler on
//! the train split only, and applies it everywhere; all downstream losses and
//! metrics live in this scaled space. Windowing follows channel independence:
//! one window per (position, channel) pair. Training batches are sampled at
//! the batch level, one domain per batch, with temperature oversampling
//! `p(domain) ~ n^alpha` to keep small domains visible.

use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Guard added to a channel's standard deviation when it is (near) constant.
pub const SCALER_STD_GUARD: f64 = 1e-8;

/// One application domain: its geometry, its instruction, and its source file.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub instruction: String,
    pub channels: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub stride: usize,
    pub csv: String,
}

/// Per-channel standardization statistics fit on the train split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelScaler {
    pub mean: f64,
    pub std: f64,
}

impl ChannelScaler {
    pub fn fit(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt().max(SCALER_STD_GUARD),
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Which chronological part of a domain to draw windows from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

/// A loaded domain: scaled values per split, channel-major.
#[derive(Debug, Clone)]
pub struct DomainSplit {
    pub spec: DomainSpec,
    pub scalers: Vec<ChannelScaler>,
    /// `[channel][row]`, scaled; chronological and disjoint: train < val < test.
    train: Vec<Vec<f64>>,
    val: Vec<Vec<f64>>,
    test: Vec<Vec<f64>>,
}

/// One univariate training example under channel independence.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesWindow {
    /// Index of the domain in the run's domain list.
    pub domain: usize,
    pub channel: usize,
    /// Start row of the history within its split part.
    pub position: usize,
    pub history: Vec<f64>,
    pub target: Vec<f64>,
}

/// A single-domain mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub domain: usize,
    /// `[rows][lookback]`, scaled, unmasked.
    pub inputs: Vec<Vec<f64>>,
    /// `[rows][lookback]` of {0,1}; 0 marks a masked step.
    pub masks: Vec<Vec<f64>>,
    /// `[rows][horizon]`, scaled.
    pub targets: Vec<Vec<f64>>,
    /// Domain index each row was drawn from (for auditing the
    /// single-domain batch property).
    pub row_domains: Vec<usize>,
}

fn parse_csv(path: &Path, channels: usize) -> Result<Vec<Vec<f64>>> {
    let data_err = |reason: String| Error::Data {
        path: path.display().to_string(),
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| data_err(e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| data_err(e.to_string()))?
        .clone();
    if headers.is_empty() {
        return Err(data_err("empty header row".into()));
    }
    // an optional leading "date" column is ignored for modeling
    let skip = usize::from(headers.get(0).is_some_and(|h| h.eq_ignore_ascii_case("date")));
    let available = headers.len() - skip;
    if available < channels {
        return Err(data_err(format!(
            "need {} channels but file provides {} data columns",
            channels, available
        )));
    }
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); channels];
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| data_err(e.to_string()))?;
        for c in 0..channels {
            let cell = record.get(skip + c).ok_or_else(|| {
                data_err(format!("row {}: missing column {}", row_idx + 1, skip + c))
            })?;
            let value: f64 = cell.trim().parse().map_err(|_| {
                data_err(format!(
                    "row {}, column {:?}: non-numeric cell {:?}",
                    row_idx + 1,
                    headers.get(skip + c).unwrap_or(""),
                    cell
                ))
            })?;
            columns[c].push(value);
        }
    }
    Ok(columns)
}

/// Number of data columns in a CSV, after skipping a leading "date" column.
pub fn csv_data_columns(path: &Path) -> Result<usize> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Data {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    let headers = reader.headers().map_err(|e| Error::Data {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let skip = usize::from(headers.get(0).is_some_and(|h| h.eq_ignore_ascii_case("date")));
    Ok(headers.len() - skip)
}

/// Reads a domain's CSV, splits 70/10/20 chronologically, fits per-channel
/// scalers on the train split only, and returns the scaled splits.
pub fn load_domain(domain_index: usize, spec: &DomainSpec) -> Result<DomainSplit> {
    let _ = domain_index; // windows carry the index; loading itself does not need it
    let path = Path::new(&spec.csv);
    let columns = parse_csv(path, spec.channels)?;
    let rows = columns.first().map_or(0, |c| c.len());
    let min_rows = spec.lookback + spec.horizon;
    if rows < min_rows {
        return Err(Error::Data {
            path: spec.csv.clone(),
            reason: format!(
                "{} rows is fewer than lookback + horizon = {}",
                rows, min_rows
            ),
        });
    }
    let n_train = (rows as f64 * 0.7).floor() as usize;
    let n_val = (rows as f64 * 0.1).floor() as usize;

    let scalers: Vec<ChannelScaler> = columns
        .iter()
        .map(|col| ChannelScaler::fit(&col[..n_train]))
        .collect();

    let take = |lo: usize, hi: usize| -> Vec<Vec<f64>> {
        columns
            .iter()
            .zip(scalers.iter())
            .map(|(col, s)| col[lo..hi].iter().map(|&x| s.apply(x)).collect())
            .collect()
    };
    let (train, val, test) = (
        take(0, n_train),
        take(n_train, n_train + n_val),
        take(n_train + n_val, rows),
    );

    Ok(DomainSplit {
        spec: spec.clone(),
        scalers,
        train,
        val,
        test,
    })
}

impl DomainSplit {
    pub fn part(&self, part: SplitPart) -> &[Vec<f64>] {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Val => &self.val,
            SplitPart::Test => &self.test,
        }
    }

    pub fn part_rows(&self, part: SplitPart) -> usize {
        self.part(part).first().map_or(0, |c| c.len())
    }

    /// Builds a split directly from scaled columns (used by zero-shot probes
    /// and tests); columns are `[channel][row]`.
    pub fn from_scaled_parts(
        spec: DomainSpec,
        scalers: Vec<ChannelScaler>,
        train: Vec<Vec<f64>>,
        val: Vec<Vec<f64>>,
        test: Vec<Vec<f64>>,
    ) -> Self {
        Self {
            spec,
            scalers,
            train,
            val,
            test,
        }
    }
}

/// All sliding windows of one split part with unit step, one per
/// (position, channel). Returns an empty list (with a warning) when the part
/// is too short, since zero-shot sets may be small.
pub fn enumerate_windows(
    domain_index: usize,
    split: &DomainSplit,
    part: SplitPart,
) -> Vec<SeriesWindow> {
    let lookback = split.spec.lookback;
    let horizon = split.spec.horizon;
    let rows = split.part_rows(part);
    if rows < lookback + horizon {
        log::warn!(
            "domain {:?}: {:?} split has {} rows, fewer than lookback + horizon = {}; no windows",
            split.spec.name,
            part,
            rows,
            lookback + horizon
        );
        return Vec::new();
    }
    let positions = rows - lookback - horizon + 1;
    let mut windows = Vec::with_capacity(positions * split.spec.channels);
    for p in 0..positions {
        for (channel, col) in split.part(part).iter().enumerate() {
            windows.push(SeriesWindow {
                domain: domain_index,
                channel,
                position: p,
                history: col[p..p + lookback].to_vec(),
                target: col[p + lookback..p + lookback + horizon].to_vec(),
            });
        }
    }
    windows
}

/// A {0,1} mask of the given length with exactly `round(ratio * len)` zeros
/// at uniformly random positions.
pub fn make_mask(len: usize, ratio: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!(
            "mask ratio must lie in [0, 1), got {}",
            ratio
        )));
    }
    let zeros = ((ratio * len as f64).round() as usize).min(len);
    let mut mask = vec![1.0; len];
    // partial Fisher-Yates over position indices
    let mut positions: Vec<usize> = (0..len).collect();
    for k in 0..zeros {
        let pick = k + rng.random_range(0..len - k);
        positions.swap(k, pick);
        mask[positions[k]] = 0.0;
    }
    Ok(mask)
}

/// Stream of single-domain batches with temperature oversampling.
pub struct BatchSampler {
    /// Per-domain training windows; indices must match `SeriesWindow::domain`.
    pools: Vec<Vec<SeriesWindow>>,
    /// Cumulative sampling weights `n_tau^alpha`.
    cumulative: Vec<f64>,
    batch_size: usize,
    mask_ratio: f64,
    rng: Rng,
}

impl BatchSampler {
    /// `mask_ratio = 0` yields all-ones masks (masking disabled).
    pub fn new(
        pools: Vec<Vec<SeriesWindow>>,
        batch_size: usize,
        alpha: f64,
        mask_ratio: f64,
        rng: Rng,
    ) -> Result<Self> {
        if pools.iter().all(|p| p.is_empty()) {
            return Err(Error::Config("no training windows in any domain".into()));
        }
        if let Some(empty) = pools.iter().position(|p| p.is_empty()) {
            return Err(Error::Config(format!(
                "domain {} has no training windows",
                empty
            )));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let mut cumulative = Vec::with_capacity(pools.len());
        let mut acc = 0.0;
        for pool in &pools {
            acc += (pool.len() as f64).powf(alpha);
            cumulative.push(acc);
        }
        Ok(Self {
            pools,
            cumulative,
            batch_size,
            mask_ratio,
            rng,
        })
    }

    /// Batches per epoch: `ceil(total windows / batch_size)`.
    pub fn epoch_len(&self) -> usize {
        let total: usize = self.pools.iter().map(|p| p.len()).sum();
        total.div_ceil(self.batch_size)
    }

    /// Draws the next single-domain batch: the domain with probability
    /// proportional to `n^alpha`, then rows uniformly with replacement.
    pub fn next_batch(&mut self) -> Result<Batch> {
        let total = *self.cumulative.last().expect("non-empty pools");
        let u: f64 = self.rng.random_range(0.0..total);
        let domain = self
            .cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.pools.len() - 1);
        let pool = &self.pools[domain];
        let lookback = pool[0].history.len();
        let mut batch = Batch {
            domain,
            inputs: Vec::with_capacity(self.batch_size),
            masks: Vec::with_capacity(self.batch_size),
            targets: Vec::with_capacity(self.batch_size),
            row_domains: Vec::with_capacity(self.batch_size),
        };
        for _ in 0..self.batch_size {
            let w = &pool[self.rng.random_range(0..pool.len())];
            batch.inputs.push(w.history.clone());
            batch.targets.push(w.target.clone());
            batch.row_domains.push(w.domain);
            let mask = if self.mask_ratio > 0.0 {
                make_mask(lookback, self.mask_ratio, &mut self.rng)?
            } else {
                vec![1.0; lookback]
            };
            batch.masks.push(mask);
        }
        Ok(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{for_stream, Stream};
    use std::io::Write as _;

    fn write_csv(dir: &Path, name: &str, channels: usize, rows: usize, f: impl Fn(usize, usize) -> f64) -> String {
        let path = dir.join(name);
        let mut file = std::fs::File::create(&path).unwrap();
        let header: Vec<String> = (0..channels).map(|c| format!("c{c}")).collect();
        writeln!(file, "{}", header.join(",")).unwrap();
        for r in 0..rows {
            let row: Vec<String> = (0..channels).map(|c| format!("{:.6}", f(r, c))).collect();
            writeln!(file, "{}", row.join(",")).unwrap();
        }
        path.display().to_string()
    }

    fn spec(csv: String) -> DomainSpec {
        DomainSpec {
            name: "t".into(),
            instruction: "test domain".into(),
            channels: 2,
            lookback: 4,
            horizon: 2,
            stride: 2,
            csv,
        }
    }

    #[test]
    fn hundred_rows_split_seventy_ten_twenty() {
        let dir = tempfile::tempdir().unwrap();
        let csv = write_csv(dir.path(), "d.csv", 2, 100, |r, c| (r + c) as f64);
        let split = load_domain(0, &spec(csv)).unwrap();
        assert_eq!(split.part_rows(SplitPart::Train), 70);
        assert_eq!(split.part_rows(SplitPart::Val), 10);
        assert_eq!(split.part_rows(SplitPart::Test), 20);
    }

    #[test]
    fn constant_column_scales_to_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let csv = write_csv(dir.path(), "d.csv", 2, 50, |r, c| if c == 0 { 5.0 } else { r as f64 });
        let split = load_domain(0, &spec(csv)).unwrap();
        assert!(split.part(SplitPart::Train)[0].iter().all(|&x| x == 0.0));
        assert_eq!(split.scalers[0].std, SCALER_STD_GUARD);
    }

    #[test]
    fn scaler_round_trip_is_tight() {
        let s = ChannelScaler::fit(&[1.0, 2.0, 4.0, 8.0]);
        for x in [-3.25, 0.0, 7.5, 1e6] {
            assert!((s.invert(s.apply(x)) - x).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn non_numeric_cell_reports_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "c0,c1\n1.0,2.0\n3.0,oops\n").unwrap();
        let err = load_domain(0, &spec(path.display().to_string())).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 2") && msg.contains("c1"), "{msg}");
    }

    #[test]
    fn too_few_rows_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let csv = write_csv(dir.path(), "d.csv", 2, 5, |r, _| r as f64);
        assert!(load_domain(0, &spec(csv)).is_err());
    }

    #[test]
    fn date_column_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dated.csv");
        let mut s = String::from("date,c0,c1\n");
        for r in 0..40 {
            s.push_str(&format!("2020-01-{:02},{},{}\n", r % 28 + 1, r, r * 2));
        }
        std::fs::write(&path, s).unwrap();
        let split = load_domain(0, &spec(path.display().to_string())).unwrap();
        assert_eq!(split.part_rows(SplitPart::Train), 28);
    }

    #[test]
    fn window_count_matches_formula() {
        // rows=10, L=4, T=2, c=3 -> (10-6+1) * 3 = 15
        let dir = tempfile::tempdir().unwrap();
        let csv = write_csv(dir.path(), "d.csv", 3, 10, |r, c| (r * 3 + c) as f64);
        let mut sp = spec(csv);
        sp.channels = 3;
        let split = load_domain(0, &sp).unwrap();
        // use all 10 rows by enumerating over a hand-built split
        let all = DomainSplit::from_scaled_parts(
            sp.clone(),
            split.scalers.clone(),
            (0..3).map(|c| (0..10).map(|r| (r * 3 + c) as f64).collect()).collect(),
            vec![vec![]; 3],
            vec![vec![]; 3],
        );
        let windows = enumerate_windows(0, &all, SplitPart::Train);
        assert_eq!(windows.len(), 15);
    }

    #[test]
    fn exactly_one_window_when_rows_equal_lookback_plus_horizon() {
        let sp = DomainSpec {
            channels: 1,
            ..spec(String::new())
        };
        let split = DomainSplit::from_scaled_parts(
            sp,
            vec![ChannelScaler { mean: 0.0, std: 1.0 }],
            vec![(0..6).map(|r| r as f64).collect()],
            vec![vec![]],
            vec![vec![]],
        );
        let windows = enumerate_windows(0, &split, SplitPart::Train);
        assert_eq!(windows.len(), 1);
        assert_eq!(windows[0].history, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(windows[0].target, vec![4.0, 5.0]);
    }

    #[test]
    fn windows_index_source_rows_directly() {
        let sp = DomainSpec {
            channels: 1,
            ..spec(String::new())
        };
        let col: Vec<f64> = (0..20).map(|r| r as f64).collect();
        let split = DomainSplit::from_scaled_parts(
            sp,
            vec![ChannelScaler { mean: 0.0, std: 1.0 }],
            vec![col.clone()],
            vec![vec![]],
            vec![vec![]],
        );
        for w in enumerate_windows(0, &split, SplitPart::Train) {
            let p = w.position;
            assert_eq!(w.history, col[p..p + 4].to_vec(), "history at position {p}");
            assert_eq!(w.target, col[p + 4..p + 6].to_vec(), "target at position {p}");
        }
    }

    #[test]
    fn short_part_yields_no_windows_without_crash() {
        let sp = DomainSpec {
            channels: 1,
            ..spec(String::new())
        };
        let split = DomainSplit::from_scaled_parts(
            sp,
            vec![ChannelScaler { mean: 0.0, std: 1.0 }],
            vec![vec![1.0, 2.0, 3.0]],
            vec![vec![]],
            vec![vec![]],
        );
        assert!(enumerate_windows(0, &split, SplitPart::Train).is_empty());
    }

    #[test]
    fn mask_zero_count_is_exact() {
        let mut rng = for_stream(0, Stream::Masking);
        let mask = make_mask(96, 0.5, &mut rng).unwrap();
        assert_eq!(mask.iter().filter(|&&m| m == 0.0).count(), 48);
        let mask = make_mask(96, 0.0, &mut rng).unwrap();
        assert!(mask.iter().all(|&m| m == 1.0));
        assert!(make_mask(10, 1.0, &mut rng).is_err());
    }

    #[test]
    fn mask_positions_are_uniform() {
        // chi-square over 10k draws of round(0.25 * 16) = 4 zeros among 16 slots
        let mut rng = for_stream(1, Stream::Masking);
        let (len, draws) = (16usize, 10_000usize);
        let mut counts = vec![0f64; len];
        for _ in 0..draws {
            for (i, &m) in make_mask(len, 0.25, &mut rng).unwrap().iter().enumerate() {
                if m == 0.0 {
                    counts[i] += 1.0;
                }
            }
        }
        let expected = draws as f64 * 4.0 / len as f64;
        let chi2: f64 = counts.iter().map(|&c| (c - expected).powi(2) / expected).sum();
        // 15 degrees of freedom; p > 0.01 demands chi2 < 30.58
        assert!(chi2 < 30.58, "chi-square {chi2:.2} suggests non-uniform mask positions");
    }

    fn tiny_pool(domain: usize, count: usize) -> Vec<SeriesWindow> {
        (0..count)
            .map(|i| SeriesWindow {
                domain,
                channel: 0,
                position: i,
                history: vec![i as f64; 4],
                target: vec![i as f64; 2],
            })
            .collect()
    }

    #[test]
    fn sampler_emits_single_domain_batches_with_exact_epoch_len() {
        let pools = vec![tiny_pool(0, 30), tiny_pool(1, 10)];
        let rng = for_stream(0, Stream::Sampling);
        let mut sampler = BatchSampler::new(pools, 8, 0.5, 0.5, rng).unwrap();
        assert_eq!(sampler.epoch_len(), 5); // ceil(40 / 8)
        for _ in 0..sampler.epoch_len() {
            let batch = sampler.next_batch().unwrap();
            assert!(batch.row_domains.iter().all(|&d| d == batch.domain));
            assert_eq!(batch.inputs.len(), 8);
        }
    }

    #[test]
    fn temperature_exponent_shapes_domain_frequencies() {
        // n = (900, 100): alpha=0.5 gives p = (0.75, 0.25); alpha=0 uniform;
        // alpha=1 proportional.
        for (alpha, expect0) in [(0.5, 0.75), (0.0, 0.5), (1.0, 0.9)] {
            let pools = vec![tiny_pool(0, 900), tiny_pool(1, 100)];
            let rng = for_stream(7, Stream::Sampling);
            let mut sampler = BatchSampler::new(pools, 1, alpha, 0.0, rng).unwrap();
            let draws = 10_000;
            let mut hits0 = 0usize;
            for _ in 0..draws {
                if sampler.next_batch().unwrap().domain == 0 {
                    hits0 += 1;
                }
            }
            let freq = hits0 as f64 / draws as f64;
            assert!(
                (freq - expect0).abs() < 0.02,
                "alpha={alpha}: domain-0 frequency {freq:.3}, expected {expect0:.3}"
            );
        }
    }

    #[test]
    fn empty_domain_pool_is_rejected() {
        let pools = vec![tiny_pool(0, 3), Vec::new()];
        let rng = for_stream(0, Stream::Sampling);
        assert!(BatchSampler::new(pools, 4, 0.5, 0.0, rng).is_err());
    }

    #[test]
    fn perturbing_test_rows_leaves_training_batches_identical() {
        let dir = tempfile::tempdir().unwrap();
        let csv_a = write_csv(dir.path(), "a.csv", 2, 60, |r, c| (r * 2 + c) as f64);
        let split_a = load_domain(0, &spec(csv_a)).unwrap();
        // same file but with the last 10 rows (test region) perturbed
        let csv_b = write_csv(dir.path(), "b.csv", 2, 60, |r, c| {
            let base = (r * 2 + c) as f64;
            if r >= 50 {
                base + 1000.0
            } else {
                base
            }
        });
        let split_b = load_domain(0, &spec(csv_b)).unwrap();
        assert_eq!(split_a.scalers, split_b.scalers, "scaler must ignore test rows");

        let windows_a = enumerate_windows(0, &split_a, SplitPart::Train);
        let windows_b = enumerate_windows(0, &split_b, SplitPart::Train);
        assert_eq!(windows_a, windows_b);

        let mut s_a = BatchSampler::new(vec![windows_a], 4, 0.5, 0.5, for_stream(3, Stream::Sampling)).unwrap();
        let mut s_b = BatchSampler::new(vec![windows_b], 4, 0.5, 0.5, for_stream(3, Stream::Sampling)).unwrap();
        for _ in 0..s_a.epoch_len() {
            let (ba, bb) = (s_a.next_batch().unwrap(), s_b.next_batch().unwrap());
            assert_eq!(ba.inputs, bb.inputs);
            assert_eq!(ba.masks, bb.masks);
            assert_eq!(ba.targets, bb.targets);
        }
    }
}
