//! Metrics, the repeat baseline, zero-shot instruction selection, and
//! representation export.
//!
//! All metrics are computed in the per-channel standardized space the loader
//! produces. Long-horizon style evaluation reads prefixes of a single
//! forecast pass per window rather than re-running the model per horizon.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{enumerate_windows, DomainSplit, SeriesWindow, SplitPart};
use crate::error::{Error, Result};
use crate::model::{predict_batch, ModelConfig, ModelParams, WindowGeometry};
use crate::rng::Rng;
use crate::training::TrainedModel;

/// Inference chunk size: bounds tape memory during full-split passes.
const PREDICT_CHUNK: usize = 32;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
    pub repeat_mse: f64,
    pub repeat_mae: f64,
}

/// Per-domain metrics at each requested horizon plus their averages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub domain: String,
    pub windows: usize,
    pub horizons: Vec<HorizonMetrics>,
    pub avg_mse: f64,
    pub avg_mae: f64,
    pub avg_repeat_mse: f64,
    pub avg_repeat_mae: f64,
}

/// Forecast every future step as the last observed value.
pub fn repeat_baseline(history: &[f64], horizon: usize) -> Vec<f64> {
    let last = *history.last().expect("history must be non-empty");
    vec![last; horizon]
}

fn forecasts_for(
    params: &ModelParams,
    config: &ModelConfig,
    geometry: WindowGeometry,
    instruction_ids: Option<&[usize]>,
    windows: &[SeriesWindow],
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(PREDICT_CHUNK) {
        let inputs: Vec<Vec<f64>> = chunk.iter().map(|w| w.history.clone()).collect();
        let (forecasts, _) = predict_batch(params, config, geometry, instruction_ids, &inputs)?;
        out.extend(forecasts);
    }
    Ok(out)
}

/// Full-horizon forecast MSE over the given windows (masking off).
pub fn forecast_mse(
    params: &ModelParams,
    config: &ModelConfig,
    geometry: WindowGeometry,
    instruction_ids: Option<&[usize]>,
    windows: &[SeriesWindow],
) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Eval("no windows to evaluate".into()));
    }
    let forecasts = forecasts_for(params, config, geometry, instruction_ids, windows)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (w, f) in windows.iter().zip(forecasts.iter()) {
        for (y, yhat) in w.target.iter().zip(f.iter()) {
            sum += (y - yhat) * (y - yhat);
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Evaluates one domain on a split: a single forecast pass per window, then
/// prefix metrics at every requested horizon, with the repeat baseline
/// alongside. Horizons must not exceed the domain's own horizon.
pub fn evaluate(
    model: &TrainedModel,
    domain_index: usize,
    split: &DomainSplit,
    part: SplitPart,
    horizons: &[usize],
) -> Result<MetricReport> {
    let spec = &model.domains[domain_index];
    let geometry = WindowGeometry::of(spec);
    let windows = enumerate_windows(domain_index, split, part);
    if windows.is_empty() {
        return Err(Error::Eval(format!(
            "domain {:?}: no {:?} windows to evaluate",
            spec.name, part
        )));
    }
    let horizons: Vec<usize> = if horizons.is_empty() {
        vec![spec.horizon]
    } else {
        horizons.to_vec()
    };
    for &h in &horizons {
        if h == 0 || h > spec.horizon {
            return Err(Error::Eval(format!(
                "horizon {} outside 1..={} for domain {:?}",
                h, spec.horizon, spec.name
            )));
        }
    }
    let ids = model.vocab.encode(&spec.instruction);
    let ids = (!ids.is_empty()).then_some(ids.as_slice());
    let forecasts = forecasts_for(&model.params, &model.config, geometry, ids, &windows)?;
    metrics_from_forecasts(&spec.name, &windows, &forecasts, &horizons)
}

/// Shared scoring path: prefix metrics plus the repeat baseline.
pub fn metrics_from_forecasts(
    domain: &str,
    windows: &[SeriesWindow],
    forecasts: &[Vec<f64>],
    horizons: &[usize],
) -> Result<MetricReport> {
    let mut report = MetricReport {
        domain: domain.to_string(),
        windows: windows.len(),
        horizons: Vec::with_capacity(horizons.len()),
        avg_mse: 0.0,
        avg_mae: 0.0,
        avg_repeat_mse: 0.0,
        avg_repeat_mae: 0.0,
    };
    for &h in horizons {
        let (mut se, mut ae, mut rse, mut rae) = (0.0, 0.0, 0.0, 0.0);
        let mut count = 0usize;
        for (w, f) in windows.iter().zip(forecasts.iter()) {
            let last = *w.history.last().expect("non-empty history");
            for t in 0..h {
                let err = w.target[t] - f[t];
                se += err * err;
                ae += err.abs();
                let rerr = w.target[t] - last;
                rse += rerr * rerr;
                rae += rerr.abs();
                count += 1;
            }
        }
        let n = count as f64;
        report.horizons.push(HorizonMetrics {
            horizon: h,
            mse: se / n,
            mae: ae / n,
            repeat_mse: rse / n,
            repeat_mae: rae / n,
        });
    }
    let k = report.horizons.len() as f64;
    report.avg_mse = report.horizons.iter().map(|m| m.mse).sum::<f64>() / k;
    report.avg_mae = report.horizons.iter().map(|m| m.mae).sum::<f64>() / k;
    report.avg_repeat_mse = report.horizons.iter().map(|m| m.repeat_mse).sum::<f64>() / k;
    report.avg_repeat_mae = report.horizons.iter().map(|m| m.repeat_mae).sum::<f64>() / k;
    Ok(report)
}

/// Outcome of the zero-shot instruction-selection protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstructionChoice {
    /// Index into the training domains.
    pub candidate: usize,
    pub domain_name: String,
    pub instruction: String,
    /// Mean probe forecast MSE of the winning candidate.
    pub selection_loss: f64,
    /// Probe losses per candidate, aligned with `candidates` order.
    pub candidate_losses: Vec<f64>,
    /// Fraction of test windows used as probes.
    pub probe_fraction_used: f64,
    /// Indices (into the unseen test windows) consumed by probing; the
    /// reported metrics must exclude exactly these.
    pub probe_indices: Vec<usize>,
}

/// Left-pads (or tail-truncates) a probe prefix to the candidate lookback.
fn fit_to_lookback(prefix: &[f64], lookback: usize) -> Vec<f64> {
    if prefix.len() >= lookback {
        prefix[prefix.len() - lookback..].to_vec()
    } else {
        let mut out = vec![prefix[0]; lookback - prefix.len()];
        out.extend_from_slice(prefix);
        out
    }
}

/// Picks the training-domain instruction that best forecasts held-back tails
/// of probe windows drawn from unseen data.
///
/// For every probe window, the first `floor(split_ratio * len)` points are
/// fitted to each candidate's lookback (left-padding repeats the first
/// value), fed with that candidate's instruction and geometry, and scored by
/// forecast MSE on the remaining points. Lowest mean loss wins, ties broken
/// by candidate order.
pub fn select_instruction(
    model: &TrainedModel,
    unseen_windows: &[SeriesWindow],
    candidates: &[usize],
    probe_fraction: f64,
    split_ratio: f64,
    rng: &mut Rng,
) -> Result<InstructionChoice> {
    if candidates.len() < 2 {
        log::warn!("single-candidate selection is trivial");
    }
    if candidates.is_empty() {
        return Err(Error::Eval("no candidate instructions".into()));
    }
    if unseen_windows.is_empty() {
        return Err(Error::Eval("no unseen windows to probe".into()));
    }
    if !(0.0..1.0).contains(&split_ratio) || split_ratio == 0.0 {
        return Err(Error::Eval(format!(
            "split_ratio must lie in (0, 1), got {split_ratio}"
        )));
    }

    let n = unseen_windows.len();
    let probe_count = ((probe_fraction * n as f64).round() as usize).clamp(1, n);
    // seeded partial shuffle picks the probe subset
    let mut indices: Vec<usize> = (0..n).collect();
    for k in 0..probe_count {
        let pick = k + rng.random_range(0..n - k);
        indices.swap(k, pick);
    }
    let mut probe_indices = indices[..probe_count].to_vec();
    probe_indices.sort_unstable();

    let mut candidate_losses = vec![0.0f64; candidates.len()];
    let mut scored_windows = 0usize;
    for &w_idx in &probe_indices {
        let window = &unseen_windows[w_idx];
        let len = window.history.len();
        let split_len = (split_ratio * len as f64).floor() as usize;
        if split_len < 1 || split_len >= len {
            log::warn!("probe window {w_idx} too short to split ({len} points); skipped");
            continue;
        }
        let tail = &window.history[split_len..];
        if tail.len() > model.config.max_horizon {
            log::warn!(
                "probe window {w_idx}: held-back tail of {} exceeds the forecast head {}; skipped",
                tail.len(),
                model.config.max_horizon
            );
            continue;
        }
        scored_windows += 1;
        let prefix = &window.history[..split_len];
        for (c_pos, &c) in candidates.iter().enumerate() {
            let spec = &model.domains[c];
            let input = fit_to_lookback(prefix, spec.lookback);
            let geometry = WindowGeometry {
                lookback: spec.lookback,
                horizon: tail.len(),
                stride: spec.stride,
            };
            let ids = model.vocab.encode(&spec.instruction);
            let ids = (!ids.is_empty()).then_some(ids.as_slice());
            let (forecasts, _) =
                predict_batch(&model.params, &model.config, geometry, ids, &[input])?;
            let mse: f64 = forecasts[0]
                .iter()
                .zip(tail.iter())
                .map(|(f, y)| (f - y) * (f - y))
                .sum::<f64>()
                / tail.len() as f64;
            candidate_losses[c_pos] += mse;
        }
    }
    if scored_windows == 0 {
        return Err(Error::Eval(
            "every probe window was too short to split".into(),
        ));
    }
    for loss in &mut candidate_losses {
        *loss /= scored_windows as f64;
    }
    let best = candidate_losses
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite losses"))
        .map(|(i, _)| i)
        .expect("non-empty candidates");
    let winner = candidates[best];
    Ok(InstructionChoice {
        candidate: winner,
        domain_name: model.domains[winner].name.clone(),
        instruction: model.domains[winner].instruction.clone(),
        selection_loss: candidate_losses[best],
        candidate_losses,
        probe_fraction_used: probe_count as f64 / n as f64,
        probe_indices,
    })
}

/// Scores unseen windows with a selected training-domain instruction: every
/// history is fitted to the candidate's lookback exactly like the probe
/// inputs were, and forecasts are compared against the windows' own targets.
pub fn zero_shot_report(
    model: &TrainedModel,
    report_name: &str,
    windows: &[SeriesWindow],
    candidate: usize,
    horizons: &[usize],
) -> Result<MetricReport> {
    if windows.is_empty() {
        return Err(Error::Eval("no non-probe windows left to report on".into()));
    }
    let spec = &model.domains[candidate];
    let target_len = windows[0].target.len();
    if target_len > model.config.max_horizon {
        return Err(Error::Eval(format!(
            "unseen horizon {} exceeds the forecast head {}",
            target_len, model.config.max_horizon
        )));
    }
    let geometry = WindowGeometry {
        lookback: spec.lookback,
        horizon: target_len,
        stride: spec.stride,
    };
    let ids = model.vocab.encode(&spec.instruction);
    let ids = (!ids.is_empty()).then_some(ids.as_slice());
    let mut forecasts = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(PREDICT_CHUNK) {
        let inputs: Vec<Vec<f64>> = chunk
            .iter()
            .map(|w| fit_to_lookback(&w.history, spec.lookback))
            .collect();
        let (f, _) = predict_batch(&model.params, &model.config, geometry, ids, &inputs)?;
        forecasts.extend(f);
    }
    let horizons: Vec<usize> = if horizons.is_empty() {
        vec![target_len]
    } else {
        horizons.to_vec()
    };
    metrics_from_forecasts(report_name, windows, &forecasts, &horizons)
}

/// One exported representation: the mean-pooled backbone output of a window.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepresentationRow {
    pub domain: String,
    pub vector: Vec<f64>,
}

/// Mean-pools backbone outputs for sampled test windows of every domain and
/// computes the separation score: the mean distance from each vector to the
/// other domains' centroids over the mean distance to its own centroid.
/// Identical domains score near 1; separated clusters score higher.
pub fn export_representations(
    model: &TrainedModel,
    splits: &[DomainSplit],
    samples_per_domain: usize,
    rng: &mut Rng,
) -> Result<(Vec<RepresentationRow>, f64)> {
    if splits.len() < 2 {
        return Err(Error::Eval(
            "separation needs at least two domains".into(),
        ));
    }
    let mut rows: Vec<RepresentationRow> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (d, split) in splits.iter().enumerate() {
        let spec = &model.domains[d];
        let windows = enumerate_windows(d, split, SplitPart::Test);
        if windows.is_empty() {
            return Err(Error::Eval(format!(
                "domain {:?} has no test windows to sample",
                spec.name
            )));
        }
        let take = samples_per_domain.min(windows.len());
        let mut indices: Vec<usize> = (0..windows.len()).collect();
        for k in 0..take {
            let pick = k + rng.random_range(0..windows.len() - k);
            indices.swap(k, pick);
        }
        let ids = model.vocab.encode(&spec.instruction);
        let ids = (!ids.is_empty()).then_some(ids.as_slice());
        let geometry = WindowGeometry::of(spec);
        for chunk in indices[..take].chunks(PREDICT_CHUNK) {
            let inputs: Vec<Vec<f64>> = chunk.iter().map(|&i| windows[i].history.clone()).collect();
            let (_, traces) =
                predict_batch(&model.params, &model.config, geometry, ids, &inputs)?;
            for trace in traces {
                let h = trace.backbone_output;
                let (tokens, width) = (h.shape()[0], h.shape()[1]);
                let mut pooled = vec![0.0; width];
                for t in 0..tokens {
                    for c in 0..width {
                        pooled[c] += h.at2(t, c);
                    }
                }
                for v in &mut pooled {
                    *v /= tokens as f64;
                }
                rows.push(RepresentationRow {
                    domain: spec.name.clone(),
                    vector: pooled,
                });
                labels.push(d);
            }
        }
    }
    let score = separation_score(&rows, &labels, splits.len())?;
    Ok((rows, score))
}

/// inter/intra ratio over vector-to-centroid distances.
pub fn separation_score(
    rows: &[RepresentationRow],
    labels: &[usize],
    domain_count: usize,
) -> Result<f64> {
    if rows.is_empty() || rows.len() != labels.len() || domain_count < 2 {
        return Err(Error::Eval("separation score needs labeled vectors from >= 2 domains".into()));
    }
    let width = rows[0].vector.len();
    let mut centroids = vec![vec![0.0f64; width]; domain_count];
    let mut counts = vec![0usize; domain_count];
    for (row, &d) in rows.iter().zip(labels) {
        for (acc, v) in centroids[d].iter_mut().zip(row.vector.iter()) {
            *acc += v;
        }
        counts[d] += 1;
    }
    for (c, &n) in centroids.iter_mut().zip(counts.iter()) {
        if n == 0 {
            return Err(Error::Eval("a domain contributed no vectors".into()));
        }
        for v in c.iter_mut() {
            *v /= n as f64;
        }
    }
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let mut intra = 0.0;
    let mut inter = 0.0;
    for (row, &d) in rows.iter().zip(labels) {
        intra += dist(&row.vector, &centroids[d]);
        let mut other = 0.0;
        for (dd, c) in centroids.iter().enumerate() {
            if dd != d {
                other += dist(&row.vector, c);
            }
        }
        inter += other / (domain_count - 1) as f64;
    }
    Ok(inter / intra.max(1e-12))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{for_stream, Stream};

    #[test]
    fn repeat_baseline_repeats_the_last_value() {
        assert_eq!(repeat_baseline(&[1.0, 2.0, 3.0], 2), vec![3.0, 3.0]);
        assert_eq!(repeat_baseline(&[7.5], 3), vec![7.5; 3]);
    }

    #[test]
    fn repeat_baseline_error_grows_with_horizon_on_a_trend() {
        let history: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let f = repeat_baseline(&history, 5);
        let future: Vec<f64> = (10..15).map(|i| i as f64).collect();
        let errs: Vec<f64> = f.iter().zip(&future).map(|(a, b)| (a - b).abs()).collect();
        for pair in errs.windows(2) {
            assert!(pair[1] > pair[0], "error must grow with the step: {errs:?}");
        }
    }

    fn fake_window(domain: usize, history: Vec<f64>, target: Vec<f64>) -> SeriesWindow {
        SeriesWindow {
            domain,
            channel: 0,
            position: 0,
            history,
            target,
        }
    }

    #[test]
    fn perfect_forecasts_score_zero_and_match_brute_force() {
        let windows = vec![
            fake_window(0, vec![0.0, 1.0], vec![2.0, 3.0]),
            fake_window(0, vec![1.0, 0.5], vec![-1.0, 0.25]),
        ];
        let forecasts: Vec<Vec<f64>> = windows.iter().map(|w| w.target.clone()).collect();
        let report = metrics_from_forecasts("d", &windows, &forecasts, &[2]).unwrap();
        assert_eq!(report.horizons[0].mse, 0.0);
        assert_eq!(report.horizons[0].mae, 0.0);

        // brute-force recomputation for an imperfect forecast
        let off: Vec<Vec<f64>> = windows
            .iter()
            .map(|w| w.target.iter().map(|t| t + 0.5).collect())
            .collect();
        let report = metrics_from_forecasts("d", &windows, &off, &[1, 2]).unwrap();
        let mut naive_se = 0.0;
        let mut n = 0;
        for (w, f) in windows.iter().zip(off.iter()) {
            for t in 0..2 {
                naive_se += (w.target[t] - f[t]).powi(2);
                n += 1;
            }
        }
        assert!((report.horizons[1].mse - naive_se / n as f64).abs() < 1e-12);
        assert!((report.avg_mse - (report.horizons[0].mse + report.horizons[1].mse) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_predictor_on_unit_variance_targets_has_mse_near_one() {
        let mut rng = for_stream(2, Stream::Export);
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, 1.0).unwrap();
        let windows: Vec<SeriesWindow> = (0..2000)
            .map(|_| {
                fake_window(
                    0,
                    vec![0.0, 0.0],
                    (0..4).map(|_| normal.sample(&mut rng)).collect(),
                )
            })
            .collect();
        let zeros: Vec<Vec<f64>> = windows.iter().map(|_| vec![0.0; 4]).collect();
        let report = metrics_from_forecasts("d", &windows, &zeros, &[4]).unwrap();
        assert!(
            (report.horizons[0].mse - 1.0).abs() < 0.05,
            "mse {} should be near the target variance",
            report.horizons[0].mse
        );
    }

    #[test]
    fn fit_to_lookback_pads_left_with_first_value() {
        assert_eq!(fit_to_lookback(&[5.0, 6.0], 4), vec![5.0, 5.0, 5.0, 6.0]);
        assert_eq!(fit_to_lookback(&[1.0, 2.0, 3.0], 2), vec![2.0, 3.0]);
    }

    #[test]
    fn identical_domains_have_separation_near_one() {
        // two "domains" drawing from the same distribution
        let mut rng = for_stream(9, Stream::Export);
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for d in 0..2 {
            for _ in 0..400 {
                rows.push(RepresentationRow {
                    domain: format!("d{d}"),
                    vector: (0..6).map(|_| normal.sample(&mut rng)).collect(),
                });
                labels.push(d);
            }
        }
        let score = separation_score(&rows, &labels, 2).unwrap();
        assert!((score - 1.0).abs() < 0.05, "identical domains scored {score}");
    }

    #[test]
    fn separated_clusters_score_well_above_one_and_rotation_invariant() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut rng = for_stream(10, Stream::Export);
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, 0.1).unwrap();
        for d in 0..2 {
            let center = if d == 0 { 2.0 } else { -2.0 };
            for _ in 0..100 {
                rows.push(RepresentationRow {
                    domain: format!("d{d}"),
                    vector: vec![
                        center + normal.sample(&mut rng),
                        -center + normal.sample(&mut rng),
                    ],
                });
                labels.push(d);
            }
        }
        let score = separation_score(&rows, &labels, 2).unwrap();
        assert!(score > 5.0, "clusters at distance 4 sigma~0.1 scored only {score}");

        // rotate every vector by 30 degrees; distances are preserved
        let (c, s) = (30f64.to_radians().cos(), 30f64.to_radians().sin());
        let rotated: Vec<RepresentationRow> = rows
            .iter()
            .map(|r| RepresentationRow {
                domain: r.domain.clone(),
                vector: vec![
                    c * r.vector[0] - s * r.vector[1],
                    s * r.vector[0] + c * r.vector[1],
                ],
            })
            .collect();
        let rotated_score = separation_score(&rotated, &labels, 2).unwrap();
        assert!(
            (score - rotated_score).abs() < 1e-9,
            "{score} vs rotated {rotated_score}"
        );
    }
}
