//! Joint objective and the cross-domain training loop.
//!
//! Batches come from the temperature sampler, one domain at a time. After
//! every epoch each domain's validation forecast MSE is computed with masking
//! off; the checkpointed model is the one minimizing the unweighted mean of
//! those losses. Epoch 0 in the log is the untrained model's validation, so
//! the curve always starts at the initialization baseline.

use serde::{Deserialize, Serialize};

use crate::data::{enumerate_windows, BatchSampler, DomainSpec, DomainSplit, SplitPart};
use crate::error::{Error, Result};
use crate::evaluation::forecast_mse;
use crate::model::{
    forward_batch, trainable_filter, ModelConfig, ModelParams, ModelVars,
    WindowGeometry,
};
use crate::numerics::adamw::{AdamW, AdamWConfig};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use crate::rng::{for_stream, Stream};
use crate::text::Vocabulary;

pub use crate::model::trainable_filter as apply_tunability;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Temperature exponent for domain sampling: p(domain) ~ n^alpha.
    #[serde(default = "default_alpha")]
    pub oversampling_alpha: f64,
    /// Master seed; may be overridden by the CLI or UNITIME_SEED.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Global-norm gradient clipping threshold; absent means no clipping.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

fn default_alpha() -> f64 {
    0.5
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("lr must be non-negative, got {}", self.lr)));
        }
        Ok(())
    }
}

/// One logged loss value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub domain: String,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

/// Everything the training loop observed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<LossRecord>,
    /// Mean-over-domains validation loss per epoch; index 0 is untrained.
    pub mean_val_curve: Vec<f64>,
    /// Argmin of `mean_val_curve` (first minimum on ties).
    pub selected_epoch: usize,
    pub wall_clock_secs: f64,
    /// Set when training aborted on a non-finite loss; the returned model is
    /// the last good selection.
    pub diverged_at_epoch: Option<usize>,
}

/// A trained model plus what it needs to run: config (with vocab size),
/// vocabulary, and the selected parameters.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ModelParams,
    pub domains: Vec<DomainSpec>,
    pub selected_epoch: usize,
}

/// The per-batch objective: for each row, forecast MSE over the horizon plus
/// (optionally) reconstruction MSE over the lookback, averaged over rows.
/// Inputs are in the scaled space; model outputs arrive de-stationarized into
/// that same space.
pub fn batch_loss(
    tape: &mut Tape,
    forecasts: &[Var],
    reconstructions: &[Var],
    targets: &[Vec<f64>],
    histories: &[Vec<f64>],
    use_reconstruction: bool,
) -> Result<Var> {
    if forecasts.len() != targets.len() || reconstructions.len() != histories.len() {
        return Err(Error::InvalidOperand {
            op: "batch_loss",
            reason: format!(
                "{} forecasts / {} targets, {} reconstructions / {} histories",
                forecasts.len(),
                targets.len(),
                reconstructions.len(),
                histories.len()
            ),
        });
    }
    let mut row_losses = Vec::with_capacity(forecasts.len());
    for (i, &forecast) in forecasts.iter().enumerate() {
        let target = tape.constant(Tensor::vector(&targets[i]));
        let diff = tape.sub(forecast, target)?;
        let sq = tape.mul(diff, diff)?;
        let mut row = tape.mean(sq, 0)?;
        if use_reconstruction {
            let history = tape.constant(Tensor::vector(&histories[i]));
            let rdiff = tape.sub(reconstructions[i], history)?;
            let rsq = tape.mul(rdiff, rdiff)?;
            let rloss = tape.mean(rsq, 0)?;
            row = tape.add(row, rloss)?;
        }
        row_losses.push(tape.reshape(row, &[1])?);
    }
    let stacked = tape.concat(&row_losses, 0)?;
    tape.mean(stacked, 0)
}

struct DomainRuntime {
    spec: DomainSpec,
    geometry: WindowGeometry,
    instruction_ids: Vec<usize>,
    val_windows: Vec<crate::data::SeriesWindow>,
}

fn mean_val_loss(
    params: &ModelParams,
    config: &ModelConfig,
    runtimes: &[DomainRuntime],
) -> Result<(Vec<f64>, f64)> {
    let mut per_domain = Vec::with_capacity(runtimes.len());
    for rt in runtimes {
        let ids = (!rt.instruction_ids.is_empty()).then_some(rt.instruction_ids.as_slice());
        let mse = forecast_mse(params, config, rt.geometry, ids, &rt.val_windows)?;
        per_domain.push(mse);
    }
    let mean = per_domain.iter().sum::<f64>() / per_domain.len().max(1) as f64;
    Ok((per_domain, mean))
}

fn clip_gradients(grads: &mut [Tensor], max_norm: f64) {
    let norm_sq: f64 = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum();
    let norm = norm_sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
}

/// Trains across domains and returns the best-validation model plus the log.
///
/// `splits` must align with `domains` by index. On a non-finite training
/// loss the loop aborts and returns the best model found so far, with
/// `diverged_at_epoch` set in the log.
pub fn train(
    domains: &[DomainSpec],
    splits: &[DomainSplit],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<(TrainedModel, RunLog)> {
    let start = std::time::Instant::now();
    train_config.validate()?;
    if domains.is_empty() || domains.len() != splits.len() {
        return Err(Error::Config(format!(
            "{} domains with {} loaded splits",
            domains.len(),
            splits.len()
        )));
    }
    let seed = train_config.seed.unwrap_or(0);

    let instructions: Vec<&str> = domains.iter().map(|d| d.instruction.as_str()).collect();
    let vocab = Vocabulary::build(&instructions)?;
    let mut config = model_config.clone();
    config.vocab_size = vocab.len();
    config.validate_domains(domains, &vocab)?;

    let mut params = ModelParams::init(&config, &mut for_stream(seed, Stream::Init))?;
    let trainable = trainable_filter(config.tunability);

    let runtimes: Vec<DomainRuntime> = domains
        .iter()
        .zip(splits.iter())
        .enumerate()
        .map(|(i, (spec, split))| DomainRuntime {
            spec: spec.clone(),
            geometry: WindowGeometry::of(spec),
            instruction_ids: vocab.encode(&spec.instruction),
            val_windows: enumerate_windows(i, split, SplitPart::Val),
        })
        .collect();

    let pools: Vec<Vec<crate::data::SeriesWindow>> = splits
        .iter()
        .enumerate()
        .map(|(i, split)| enumerate_windows(i, split, SplitPart::Train))
        .collect();
    let mask_ratio = if config.ablation.use_masking {
        config.mask_ratio
    } else {
        0.0
    };
    let mut sampler = BatchSampler::new(
        pools,
        train_config.batch_size,
        train_config.oversampling_alpha,
        mask_ratio,
        for_stream(seed, Stream::Sampling),
    )?;

    let trainable_shapes: Vec<(String, Vec<usize>)> = params
        .named_tensors()
        .iter()
        .filter(|(n, _)| trainable(n))
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect();
    let mut optimizer = AdamW::new(
        AdamWConfig {
            lr: train_config.lr,
            weight_decay: train_config.weight_decay,
            ..Default::default()
        },
        &trainable_shapes,
    );

    let mut log = RunLog {
        records: Vec::new(),
        mean_val_curve: Vec::new(),
        selected_epoch: 0,
        wall_clock_secs: 0.0,
        diverged_at_epoch: None,
    };
    let record_val = |log: &mut RunLog, epoch: usize, per_domain: &[f64], mean: f64| {
        for (rt, &v) in runtimes.iter().zip(per_domain) {
            log.records.push(LossRecord {
                epoch,
                domain: rt.spec.name.clone(),
                split: "val".into(),
                metric: "loss".into(),
                value: v,
            });
        }
        log.mean_val_curve.push(mean);
    };

    // epoch 0: untrained baseline, also the initial selection
    let (per_domain, mean0) = mean_val_loss(&params, &config, &runtimes)?;
    record_val(&mut log, 0, &per_domain, mean0);
    let mut best_params = params.clone();
    let mut best_epoch = 0usize;
    let mut best_val = mean0;

    'epochs: for epoch in 1..=train_config.epochs {
        let mut train_sums = vec![(0.0f64, 0usize); runtimes.len()];
        for _ in 0..sampler.epoch_len() {
            let batch = sampler.next_batch()?;
            let rt = &runtimes[batch.domain];
            debug_assert!(batch.row_domains.iter().all(|&d| d == batch.domain));

            let mut tape = Tape::new();
            let vars = params.lift(&mut tape, &trainable);
            let ids = (!rt.instruction_ids.is_empty()).then_some(rt.instruction_ids.as_slice());
            let outputs = forward_batch(
                &mut tape,
                &vars,
                &config,
                rt.geometry,
                ids,
                &batch.inputs,
                &batch.masks,
            )?;
            let loss = batch_loss(
                &mut tape,
                &outputs.forecasts,
                &outputs.reconstructions,
                &batch.targets,
                &batch.inputs,
                config.ablation.use_reconstruction,
            )?;
            let loss_value = tape.value(loss).item()?;
            if !loss_value.is_finite() {
                log::error!(
                    "training loss became non-finite on domain {:?} at epoch {epoch}; aborting",
                    rt.spec.name
                );
                log.diverged_at_epoch = Some(epoch);
                break 'epochs;
            }
            tape.backward(loss)?;

            let named_vars = named_vars(&vars);
            let mut grads: Vec<Tensor> = Vec::with_capacity(trainable_shapes.len());
            for (name, var) in named_vars.iter().filter(|(n, _)| trainable(n)) {
                let shape = tape.shape(*var).to_vec();
                let _ = name;
                grads.push(tape.grad(*var).cloned().unwrap_or_else(|| Tensor::zeros(&shape)));
            }
            if let Some(max_norm) = train_config.grad_clip {
                clip_gradients(&mut grads, max_norm);
            }
            let mut tensors = params.named_tensors_mut();
            let mut entries: Vec<(&str, &mut Tensor, &Tensor)> = tensors
                .iter_mut()
                .filter(|(n, _)| trainable(n))
                .zip(grads.iter())
                .map(|((n, t), g)| (n.as_str(), &mut **t, g))
                .collect();
            optimizer.step(&mut entries)?;

            train_sums[batch.domain].0 += loss_value;
            train_sums[batch.domain].1 += 1;
        }

        for (rt, (sum, count)) in runtimes.iter().zip(train_sums.iter()) {
            if *count > 0 {
                log.records.push(LossRecord {
                    epoch,
                    domain: rt.spec.name.clone(),
                    split: "train".into(),
                    metric: "loss".into(),
                    value: sum / *count as f64,
                });
            }
        }

        let (per_domain, mean) = mean_val_loss(&params, &config, &runtimes)?;
        record_val(&mut log, epoch, &per_domain, mean);
        if mean < best_val {
            best_val = mean;
            best_epoch = epoch;
            best_params = params.clone();
        }
        log::info!("epoch {epoch}: mean validation loss {mean:.6}");
    }

    log.selected_epoch = best_epoch;
    log.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((
        TrainedModel {
            config,
            vocab,
            params: best_params,
            domains: domains.to_vec(),
            selected_epoch: best_epoch,
        },
        log,
    ))
}

/// `(name, var)` pairs for lifted parameters, in canonical order.
pub fn named_vars(vars: &ModelVars) -> Vec<(String, Var)> {
    let mut out: Vec<(String, Var)> = vec![
        ("patch_proj".into(), vars.patch_proj),
        ("mask_proj".into(), vars.mask_proj),
        ("gate_w_series".into(), vars.gate_w_series),
        ("gate_w_mask".into(), vars.gate_w_mask),
        ("gate_bias".into(), vars.gate_bias),
        ("instr_embedding".into(), vars.instr_embedding),
        ("pos_embedding".into(), vars.pos_embedding),
    ];
    fn push_layer(out: &mut Vec<(String, Var)>, prefix: &str, l: &crate::model::LayerVars) {
        out.push((format!("{prefix}.attn.w_q"), l.w_q));
        out.push((format!("{prefix}.attn.b_q"), l.b_q));
        out.push((format!("{prefix}.attn.w_k"), l.w_k));
        out.push((format!("{prefix}.attn.b_k"), l.b_k));
        out.push((format!("{prefix}.attn.w_v"), l.w_v));
        out.push((format!("{prefix}.attn.b_v"), l.b_v));
        out.push((format!("{prefix}.attn.w_o"), l.w_o));
        out.push((format!("{prefix}.attn.b_o"), l.b_o));
        out.push((format!("{prefix}.ln1.scale"), l.ln1_scale));
        out.push((format!("{prefix}.ln1.shift"), l.ln1_shift));
        out.push((format!("{prefix}.mlp.w1"), l.w_fc1));
        out.push((format!("{prefix}.mlp.b1"), l.b_fc1));
        out.push((format!("{prefix}.mlp.w2"), l.w_fc2));
        out.push((format!("{prefix}.mlp.b2"), l.b_fc2));
        out.push((format!("{prefix}.ln2.scale"), l.ln2_scale));
        out.push((format!("{prefix}.ln2.shift"), l.ln2_shift));
    }
    for (i, l) in vars.backbone.iter().enumerate() {
        push_layer(&mut out, &format!("backbone.{i}"), l);
    }
    out.push(("pad_token".into(), vars.pad_token));
    for (i, l) in vars.light.iter().enumerate() {
        push_layer(&mut out, &format!("light.{i}"), l);
    }
    out.push(("forecast_head".into(), vars.forecast_head));
    out.push(("recon_head".into(), vars.recon_head));
    out
}
