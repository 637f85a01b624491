//! Series-to-token preprocessing and the gated fusion of series tokens with
//! mask-indicator tokens.
//!
//! A univariate window is masked, stationarized against its observed values,
//! right-padded by repeating the final value, and segmented into patches of
//! length `patch_len` at the domain's stride. The mask vector travels the
//! same pad-and-patch route so the model can see which steps were hidden.

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

/// Lower bound for the stationarization denominator.
pub const STATIONARIZE_STD_GUARD: f64 = 1e-5;

/// Per-window normalization statistics, inverted on the model outputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stationarization {
    pub mean: f64,
    pub denom: f64,
    /// Every step was masked; the (0, 1) fallback was used.
    pub all_masked: bool,
}

/// Number of patch tokens for a window: `ceil((len - patch_len) / stride) + 1`.
pub fn token_count(len: usize, patch_len: usize, stride: usize) -> usize {
    (len - patch_len).div_ceil(stride) + 1
}

/// Output of [`tokenize_series`]: patched series, patched mask, stats.
pub struct SeriesTokens {
    /// `[tokens, patch_len]`
    pub series: Tensor,
    /// `[tokens, patch_len]` of {0,1}
    pub mask: Tensor,
    pub stats: Stationarization,
}

/// Masks, stationarizes, pads, and patches one univariate window.
pub fn tokenize_series(x: &[f64], mask: &[f64], patch_len: usize, stride: usize) -> Result<SeriesTokens> {
    let len = x.len();
    if mask.len() != len {
        return Err(Error::ShapeMismatch {
            op: "tokenize_series",
            lhs: vec![len],
            rhs: vec![mask.len()],
        });
    }
    if patch_len == 0 || len < patch_len {
        return Err(Error::InvalidOperand {
            op: "tokenize_series",
            reason: format!("window length {len} shorter than patch length {patch_len}"),
        });
    }
    if stride == 0 {
        return Err(Error::InvalidOperand {
            op: "tokenize_series",
            reason: "stride must be at least 1".into(),
        });
    }

    // mask, then stationarize over the observed positions only
    let mut values: Vec<f64> = x.iter().zip(mask.iter()).map(|(&v, &m)| v * m).collect();
    let observed: Vec<f64> = x
        .iter()
        .zip(mask.iter())
        .filter(|(_, &m)| m != 0.0)
        .map(|(&v, _)| v)
        .collect();
    let stats = if observed.is_empty() {
        Stationarization {
            mean: 0.0,
            denom: 1.0,
            all_masked: true,
        }
    } else {
        let n = observed.len() as f64;
        let mean = observed.iter().sum::<f64>() / n;
        let var = observed.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Stationarization {
            mean,
            denom: var.sqrt().max(STATIONARIZE_STD_GUARD),
            all_masked: false,
        }
    };
    for (v, &m) in values.iter_mut().zip(mask.iter()) {
        *v = if m != 0.0 { (*v - stats.mean) / stats.denom } else { 0.0 };
    }

    // pad by repeating the last value, then segment
    let tokens = token_count(len, patch_len, stride);
    let padded_len = (tokens - 1) * stride + patch_len;
    let mut padded = values;
    padded.resize(padded_len, *padded.last().expect("len >= patch_len >= 1"));
    let mut padded_mask = mask.to_vec();
    padded_mask.resize(padded_len, *mask.last().expect("non-empty"));

    let mut series = Vec::with_capacity(tokens * patch_len);
    let mut mask_patches = Vec::with_capacity(tokens * patch_len);
    for t in 0..tokens {
        let start = t * stride;
        series.extend_from_slice(&padded[start..start + patch_len]);
        mask_patches.extend_from_slice(&padded_mask[start..start + patch_len]);
    }
    Ok(SeriesTokens {
        series: Tensor::new(vec![tokens, patch_len], series)?,
        mask: Tensor::new(vec![tokens, patch_len], mask_patches)?,
        stats,
    })
}

/// Parameter handles used by [`embed_and_fuse`].
pub struct FusionVars {
    pub patch_proj: Var,
    pub mask_proj: Var,
    pub gate_w_series: Var,
    pub gate_w_mask: Var,
    pub gate_bias: Var,
}

/// Projects series and mask patches into the hidden space and combines them
/// with a sigmoid gate: `gate * series + (1 - gate) * mask`, a per-coordinate
/// convex combination.
pub fn embed_and_fuse(tape: &mut Tape, vars: &FusionVars, tokens: &SeriesTokens) -> Result<Var> {
    let series = tape.constant(tokens.series.clone());
    let mask = tape.constant(tokens.mask.clone());
    let z = tape.matmul(series, vars.patch_proj)?;
    let m = tape.matmul(mask, vars.mask_proj)?;
    let zg = tape.matmul(z, vars.gate_w_series)?;
    let mg = tape.matmul(m, vars.gate_w_mask)?;
    let pre = tape.add(zg, mg)?;
    let pre = tape.add_bias_rows(pre, vars.gate_bias)?;
    let gate = tape.sigmoid(pre);
    let gated_z = tape.mul(gate, z)?;
    let ones = tape.constant(Tensor::ones(tape.shape(gate)));
    let inv_gate = tape.sub(ones, gate)?;
    let gated_m = tape.mul(inv_gate, m)?;
    tape.add(gated_z, gated_m)
}
