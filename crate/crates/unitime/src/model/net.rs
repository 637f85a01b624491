//! Backbone, decoder, and the end-to-end forward pass.
//!
//! Layer equations follow the norm-after-sublayer-then-residual order:
//! `h~ = LN(MSA(h)) + h` and `h' = LN(MLP(h~)) + h~`. The backbone attends
//! causally; the lightweight decoder transformer attends in full so every
//! position learns about the appended pad tokens.

use crate::error::{Error, Result};
use crate::model::tokenizer::{embed_and_fuse, tokenize_series, FusionVars, Stationarization};
use crate::model::{LayerVars, ModelConfig, ModelVars, LAYER_NORM_EPS};
use crate::numerics::tape::{causal_mask, Tape, Var};
use crate::numerics::tensor::Tensor;

/// Window geometry of a domain (or an ad-hoc probe).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGeometry {
    pub lookback: usize,
    pub horizon: usize,
    pub stride: usize,
}

impl WindowGeometry {
    pub fn of(spec: &crate::data::DomainSpec) -> Self {
        Self {
            lookback: spec.lookback,
            horizon: spec.horizon,
            stride: spec.stride,
        }
    }
}

/// One transformer layer. `causal` selects masked attention.
pub fn transformer_layer(
    tape: &mut Tape,
    x: Var,
    layer: &LayerVars,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(Error::InvalidOperand {
            op: "transformer_layer",
            reason: format!("expected [seq, hidden], got {:?}", shape),
        });
    }
    let (seq, d) = (shape[0], shape[1]);
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mask = causal.then(|| causal_mask(seq));

    let q = tape.matmul(x, layer.w_q)?;
    let q = tape.add_bias_rows(q, layer.b_q)?;
    let k = tape.matmul(x, layer.w_k)?;
    let k = tape.add_bias_rows(k, layer.b_k)?;
    let v = tape.matmul(x, layer.w_v)?;
    let v = tape.add_bias_rows(v, layer.b_v)?;

    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.narrow(q, 1, h * dk, dk)?;
        let kh = tape.narrow(k, 1, h * dk, dk)?;
        let vh = tape.narrow(v, 1, h * dk, dk)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.mul_scalar(scores, scale);
        let scores = match &mask {
            Some(m) => tape.masked_fill(scores, m, f64::NEG_INFINITY)?,
            None => scores,
        };
        let weights = tape.softmax(scores, 1)?;
        head_outputs.push(tape.matmul(weights, vh)?);
    }
    let merged = tape.concat(&head_outputs, 1)?;
    let msa = tape.matmul(merged, layer.w_o)?;
    let msa = tape.add_bias_rows(msa, layer.b_o)?;
    let normed = tape.layer_norm(msa, 1, layer.ln1_scale, layer.ln1_shift, LAYER_NORM_EPS)?;
    let mid = tape.add(normed, x)?;

    let up = tape.matmul(mid, layer.w_fc1)?;
    let up = tape.add_bias_rows(up, layer.b_fc1)?;
    let act = tape.gelu(up);
    let down = tape.matmul(act, layer.w_fc2)?;
    let down = tape.add_bias_rows(down, layer.b_fc2)?;
    let normed2 = tape.layer_norm(down, 1, layer.ln2_scale, layer.ln2_shift, LAYER_NORM_EPS)?;
    tape.add(normed2, mid)
}

/// Concatenates instruction and series tokens (order per `ts_first`), adds
/// positional embeddings, and runs the causal backbone stack.
pub fn backbone_forward(
    tape: &mut Tape,
    vars: &ModelVars,
    config: &ModelConfig,
    instruction: Option<Var>,
    series: Var,
) -> Result<Var> {
    let joined = match instruction {
        Some(instr) if config.ablation.ts_first => tape.concat(&[series, instr], 0)?,
        Some(instr) => tape.concat(&[instr, series], 0)?,
        None => series,
    };
    let seq = tape.shape(joined)[0];
    if seq > config.max_tokens {
        return Err(Error::Config(format!(
            "sequence of {} tokens exceeds the positional table length {}",
            seq, config.max_tokens
        )));
    }
    let pos = tape.narrow(vars.pos_embedding, 0, 0, seq)?;
    let mut h = tape.add(joined, pos)?;
    for layer in &vars.backbone {
        h = transformer_layer(tape, h, layer, config.heads, true)?;
    }
    Ok(h)
}

/// Pads the backbone output to `max_tokens` with the learnable pad vector,
/// runs the light transformer, flattens, and applies both heads. Outputs are
/// truncated to the domain's lengths and de-stationarized.
pub fn decode(
    tape: &mut Tape,
    vars: &ModelVars,
    config: &ModelConfig,
    h: Var,
    geometry: WindowGeometry,
    stats: Stationarization,
) -> Result<(Var, Var)> {
    let seq = tape.shape(h)[0];
    let d = config.hidden;
    if geometry.horizon > config.max_horizon || geometry.lookback > config.max_recon {
        return Err(Error::Config(format!(
            "window geometry {}x{} exceeds head budgets {}x{}",
            geometry.lookback, geometry.horizon, config.max_recon, config.max_horizon
        )));
    }
    let padded = if seq < config.max_tokens {
        let pad_row = tape.reshape(vars.pad_token, &[1, d])?;
        let mut parts = vec![h];
        parts.extend(std::iter::repeat_n(pad_row, config.max_tokens - seq));
        tape.concat(&parts, 0)?
    } else {
        h
    };
    let refined = if config.ablation.use_light_trans {
        let mut cur = padded;
        for layer in &vars.light {
            cur = transformer_layer(tape, cur, layer, config.heads, false)?;
        }
        cur
    } else {
        padded
    };
    let flat = tape.reshape(refined, &[1, config.max_tokens * d])?;

    let forecast_full = tape.matmul(flat, vars.forecast_head)?;
    let forecast_full = tape.reshape(forecast_full, &[config.max_horizon])?;
    let forecast = tape.narrow(forecast_full, 0, 0, geometry.horizon)?;
    let forecast = tape.mul_scalar(forecast, stats.denom);
    let forecast = tape.add_scalar(forecast, stats.mean);

    let recon_full = tape.matmul(flat, vars.recon_head)?;
    let recon_full = tape.reshape(recon_full, &[config.max_recon])?;
    let recon = tape.narrow(recon_full, 0, 0, geometry.lookback)?;
    let recon = tape.mul_scalar(recon, stats.denom);
    let recon = tape.add_scalar(recon, stats.mean);

    Ok((forecast, recon))
}

/// Per-window record of what the forward pass produced, for inspection and
/// representation export.
#[derive(Debug, Clone)]
pub struct WindowTrace {
    pub instruction_tokens: usize,
    pub series_tokens: usize,
    /// Backbone output before pad completion, `[instr + series, hidden]`.
    pub backbone_output: Tensor,
    pub stats: Stationarization,
}

/// Forward results for a batch: one forecast/reconstruction node per row.
pub struct BatchOutputs {
    pub forecasts: Vec<Var>,
    pub reconstructions: Vec<Var>,
    pub traces: Vec<WindowTrace>,
}

/// Runs one window through tokenizer, backbone, and decoder.
pub fn forward_window(
    tape: &mut Tape,
    vars: &ModelVars,
    config: &ModelConfig,
    geometry: WindowGeometry,
    instruction_ids: Option<&[usize]>,
    history: &[f64],
    mask: &[f64],
) -> Result<(Var, Var, WindowTrace)> {
    let all_ones;
    let mask = if config.ablation.use_masking {
        mask
    } else {
        all_ones = vec![1.0; history.len()];
        &all_ones
    };
    let tokens = tokenize_series(history, mask, config.patch_len, geometry.stride)?;
    let stats = tokens.stats;
    let fusion = FusionVars {
        patch_proj: vars.patch_proj,
        mask_proj: vars.mask_proj,
        gate_w_series: vars.gate_w_series,
        gate_w_mask: vars.gate_w_mask,
        gate_bias: vars.gate_bias,
    };
    let series = embed_and_fuse(tape, &fusion, &tokens)?;
    let series_tokens = tape.shape(series)[0];

    let instruction = match instruction_ids {
        Some(ids) if config.ablation.use_instructions && !ids.is_empty() => {
            Some(tape.gather_rows(vars.instr_embedding, ids)?)
        }
        _ => None,
    };
    let instruction_tokens = instruction.map_or(0, |v| tape.shape(v)[0]);

    let h = backbone_forward(tape, vars, config, instruction, series)?;
    let trace = WindowTrace {
        instruction_tokens,
        series_tokens,
        backbone_output: tape.value(h).clone(),
        stats,
    };
    let (forecast, recon) = decode(tape, vars, config, h, geometry, stats)?;
    Ok((forecast, recon, trace))
}

/// Applies [`forward_window`] to every row of a single-domain batch.
pub fn forward_batch(
    tape: &mut Tape,
    vars: &ModelVars,
    config: &ModelConfig,
    geometry: WindowGeometry,
    instruction_ids: Option<&[usize]>,
    inputs: &[Vec<f64>],
    masks: &[Vec<f64>],
) -> Result<BatchOutputs> {
    if inputs.len() != masks.len() {
        return Err(Error::ShapeMismatch {
            op: "forward_batch",
            lhs: vec![inputs.len()],
            rhs: vec![masks.len()],
        });
    }
    let mut out = BatchOutputs {
        forecasts: Vec::with_capacity(inputs.len()),
        reconstructions: Vec::with_capacity(inputs.len()),
        traces: Vec::with_capacity(inputs.len()),
    };
    for (history, mask) in inputs.iter().zip(masks.iter()) {
        let (f, r, t) = forward_window(tape, vars, config, geometry, instruction_ids, history, mask)?;
        out.forecasts.push(f);
        out.reconstructions.push(r);
        out.traces.push(t);
    }
    Ok(out)
}

/// Inference-only forward over a batch of histories with masking off:
/// returns plain forecast values and traces, no gradient bookkeeping.
pub fn predict_batch(
    params: &crate::model::ModelParams,
    config: &ModelConfig,
    geometry: WindowGeometry,
    instruction_ids: Option<&[usize]>,
    inputs: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, Vec<WindowTrace>)> {
    let mut tape = Tape::new();
    let vars = params.lift(&mut tape, &|_| false);
    let masks: Vec<Vec<f64>> = inputs.iter().map(|h| vec![1.0; h.len()]).collect();
    let outputs = forward_batch(&mut tape, &vars, config, geometry, instruction_ids, inputs, &masks)?;
    let forecasts = outputs
        .forecasts
        .iter()
        .map(|&v| tape.value(v).data().to_vec())
        .collect();
    Ok((forecasts, outputs.traces))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AblationFlags, ModelParams, Tunability};
    use crate::rng::{for_stream, Stream};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            hidden: 8,
            heads: 2,
            backbone_layers: 1,
            light_layers: 1,
            patch_len: 4,
            max_tokens: 8,
            max_horizon: 6,
            max_recon: 12,
            mask_ratio: 0.0,
            vocab_size: 7,
            ablation: AblationFlags::default(),
            tunability: Tunability::Full,
        }
    }

    fn geometry() -> WindowGeometry {
        WindowGeometry {
            lookback: 12,
            horizon: 6,
            stride: 4,
        }
    }

    #[test]
    fn attention_at_position_zero_is_one_hot_on_itself() {
        // with a causal mask the first query can only see itself, whatever
        // the weights are, so its layer output is independent of later rows
        let config = tiny_config();
        let params = ModelParams::init(&config, &mut for_stream(0, Stream::Init)).unwrap();
        let mut rng = for_stream(1, Stream::Init);
        let base = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let mut other = base.clone();
        for v in &mut other.data_mut()[8..] {
            *v += 3.0;
        }
        let run = |input: Tensor| {
            let mut tape = Tape::new();
            let vars = params.lift(&mut tape, &|_| false);
            let x = tape.constant(input);
            let y = transformer_layer(&mut tape, x, &vars.backbone[0], config.heads, true).unwrap();
            tape.value(y).data()[..8].to_vec()
        };
        let a = run(base);
        let b = run(other);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12, "row 0 must ignore rows > 0");
        }
    }

    #[test]
    fn backbone_is_causal_under_perturbation() {
        let config = tiny_config();
        let params = ModelParams::init(&config, &mut for_stream(0, Stream::Init)).unwrap();
        let mut rng = for_stream(2, Stream::Init);
        let series = Tensor::randn(&[6, 8], 1.0, &mut rng);
        let j = 3; // perturb token j, check positions < j
        let mut perturbed = series.clone();
        for c in 0..8 {
            perturbed.data_mut()[j * 8 + c] += 2.5;
        }
        let run = |input: Tensor| {
            let mut tape = Tape::new();
            let vars = params.lift(&mut tape, &|_| false);
            let x = tape.constant(input);
            let h = backbone_forward(&mut tape, &vars, &config, None, x).unwrap();
            tape.value(h).clone()
        };
        let a = run(series);
        let b = run(perturbed);
        for pos in 0..j {
            for c in 0..8 {
                let (x, y) = (a.at2(pos, c), b.at2(pos, c));
                assert!(
                    (x - y).abs() <= 1e-10,
                    "position {pos} changed: {x} vs {y}"
                );
            }
        }
        // sanity: the perturbed position itself must change
        assert!((a.at2(j, 0) - b.at2(j, 0)).abs() > 1e-6);
    }

    #[test]
    fn forward_shapes_follow_the_geometry() {
        let config = tiny_config();
        let params = ModelParams::init(&config, &mut for_stream(0, Stream::Init)).unwrap();
        let mut rng = for_stream(3, Stream::Init);
        let inputs: Vec<Vec<f64>> = (0..3)
            .map(|_| Tensor::randn(&[12], 1.0, &mut rng).into_data())
            .collect();
        let (forecasts, traces) =
            predict_batch(&params, &config, geometry(), Some(&[2, 4, 1]), &inputs).unwrap();
        assert_eq!(forecasts.len(), 3);
        assert!(forecasts.iter().all(|f| f.len() == 6));
        for t in &traces {
            assert_eq!(t.instruction_tokens, 3);
            assert_eq!(t.series_tokens, 3); // ceil((12-4)/4)+1
            assert_eq!(t.backbone_output.shape(), &[6, 8]);
        }
    }

    #[test]
    fn disabling_instructions_changes_values_not_shapes() {
        let mut config = tiny_config();
        let params = ModelParams::init(&config, &mut for_stream(0, Stream::Init)).unwrap();
        let mut rng = for_stream(4, Stream::Init);
        let inputs = vec![Tensor::randn(&[12], 1.0, &mut rng).into_data()];
        let (with, _) = predict_batch(&params, &config, geometry(), Some(&[1, 2]), &inputs).unwrap();
        config.ablation.use_instructions = false;
        let (without, traces) =
            predict_batch(&params, &config, geometry(), Some(&[1, 2]), &inputs).unwrap();
        assert_eq!(with[0].len(), without[0].len());
        assert_ne!(with[0], without[0]);
        assert_eq!(traces[0].instruction_tokens, 0);
    }

    #[test]
    fn forward_is_deterministic() {
        let config = tiny_config();
        let params = ModelParams::init(&config, &mut for_stream(0, Stream::Init)).unwrap();
        let inputs = vec![(0..12).map(|i| (i as f64 * 0.7).sin()).collect::<Vec<_>>()];
        let (a, _) = predict_batch(&params, &config, geometry(), Some(&[3]), &inputs).unwrap();
        let (b, _) = predict_batch(&params, &config, geometry(), Some(&[3]), &inputs).unwrap();
        assert_eq!(a, b, "identical inputs and parameters must match bitwise");
    }

    #[test]
    fn zero_heads_yield_the_window_mean_after_destationarization() {
        // with both head matrices zeroed the raw outputs are zero, so the
        // de-stationarized forecast equals the window mean everywhere
        let config = tiny_config();
        let mut params = ModelParams::init(&config, &mut for_stream(0, Stream::Init)).unwrap();
        params.forecast_head = Tensor::zeros(&[config.max_tokens * 8, config.max_horizon]);
        params.recon_head = Tensor::zeros(&[config.max_tokens * 8, config.max_recon]);
        let history: Vec<f64> = (0..12).map(|i| 5.0 + (i as f64) * 0.1).collect();
        let mean = history.iter().sum::<f64>() / 12.0;
        let (forecasts, _) =
            predict_batch(&params, &config, geometry(), None, &[history]).unwrap();
        for v in &forecasts[0] {
            assert!((v - mean).abs() < 1e-12, "{v} vs window mean {mean}");
        }
    }

    #[test]
    fn sequence_at_token_budget_still_decodes() {
        // 2 instruction tokens + 3 series tokens with max_tokens = 5:
        // zero pad tokens appended, output still defined
        let mut config = tiny_config();
        config.max_tokens = 5;
        let params = ModelParams::init(&config, &mut for_stream(0, Stream::Init)).unwrap();
        let inputs = vec![(0..12).map(|i| i as f64).collect::<Vec<_>>()];
        let (forecasts, traces) =
            predict_batch(&params, &config, geometry(), Some(&[1, 2]), &inputs).unwrap();
        assert_eq!(traces[0].instruction_tokens + traces[0].series_tokens, 5);
        assert_eq!(forecasts[0].len(), 6);
        assert!(forecasts[0].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn truncated_forecast_is_a_prefix_of_the_full_head_output() {
        let config = tiny_config();
        let params = ModelParams::init(&config, &mut for_stream(0, Stream::Init)).unwrap();
        let inputs = vec![(0..12).map(|i| (i as f64 * 0.3).cos()).collect::<Vec<_>>()];
        let short = WindowGeometry {
            horizon: 3,
            ..geometry()
        };
        let (full, _) = predict_batch(&params, &config, geometry(), Some(&[2]), &inputs).unwrap();
        let (prefix, _) = predict_batch(&params, &config, short, Some(&[2]), &inputs).unwrap();
        assert_eq!(prefix[0].as_slice(), &full[0][..3], "must match bit for bit");
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        use crate::numerics::gradcheck;
        // tiny end-to-end check through tokenizer, backbone, decoder, and a
        // squared-error loss, for a representative slice of parameters
        let config = tiny_config();
        let params = ModelParams::init(&config, &mut for_stream(0, Stream::Init)).unwrap();
        let history: Vec<f64> = (0..12).map(|i| (i as f64 * 0.9).sin() * 2.0 + 1.0).collect();
        let target: Vec<f64> = (0..6).map(|i| (i as f64 * 0.9).cos()).collect();
        let mask: Vec<f64> = (0..12).map(|i| if i % 4 == 0 { 0.0 } else { 1.0 }).collect();

        let run = |tape: &mut Tape, override_vars: &dyn Fn(&mut ModelVars)| -> Result<Var> {
            let mut vars = params.lift(tape, &|_| false);
            override_vars(&mut vars);
            let (forecast, recon, _) = forward_window(
                tape,
                &vars,
                &config,
                geometry(),
                Some(&[1, 3]),
                &history,
                &mask,
            )?;
            let t = tape.constant(Tensor::vector(&target));
            let d = tape.sub(forecast, t)?;
            let sq = tape.mul(d, d)?;
            let f_loss = tape.mean(sq, 0)?;
            let h = tape.constant(Tensor::vector(&history));
            let dr = tape.sub(recon, h)?;
            let sqr = tape.mul(dr, dr)?;
            let r_loss = tape.mean(sqr, 0)?;
            tape.add(f_loss, r_loss)
        };

        // check three representative parameter groups one at a time
        for which in ["gate_w_series", "backbone.w_q", "pad_token"] {
            let seed_tensor = match which {
                "gate_w_series" => params.gate_w_series.clone(),
                "backbone.w_q" => params.backbone[0].w_q.clone(),
                _ => params.pad_token.clone(),
            };
            gradcheck::assert_grads_close(
                &[seed_tensor],
                |tape, vs| {
                    run(tape, &|vars| match which {
                        "gate_w_series" => vars.gate_w_series = vs[0],
                        "backbone.w_q" => vars.backbone[0].w_q = vs[0],
                        _ => vars.pad_token = vs[0],
                    })
                },
                1e-3,
            );
        }
    }
}
