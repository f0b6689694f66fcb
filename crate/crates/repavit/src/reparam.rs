//! Post-training rewrite pass: folds frozen BatchNorms into the adjacent
//! projections, merges the idle pathway with the shortcut into a single
//! C x C matrix, and emits the condensed inference form.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{FfnLayer, IdleFfnInfer, IdleFfnTrain, Model};
use crate::scalar::Scalar;
use crate::tensor::{matmul, BatchNormParams, Matrix2D};

/// A linear layer with the upstream BatchNorm absorbed.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedLinear<S> {
    pub weight: Matrix2D<S>,
    pub bias: Vec<S>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReparamReport {
    pub layer_index: usize,
    pub params_before: usize,
    pub params_after: usize,
    /// Weight-only parameter ratio after/before; >= 1 flags inflation
    /// (theta <= 1/(2 rho)).
    pub reduction_ratio_measured: f64,
    pub max_abs_diff_spotcheck: f64,
}

/// Absorb a frozen BatchNorm into the linear layer that consumes its output:
/// BN(x) W + b == x W' + b' with W' = diag(s) W, b' = (beta - s*mean) W + b,
/// s = gamma / sqrt(running_var + eps).
pub fn fold_batchnorm<S: Scalar>(
    bn: &BatchNormParams<S>,
    w: &Matrix2D<S>,
    b: &[S],
) -> Result<FoldedLinear<S>> {
    if !bn.frozen {
        return Err(Error::State(
            "fold_batchnorm requires a frozen BatchNorm".into(),
        ));
    }
    if bn.channels() != w.rows() {
        return Err(Error::Dimension(format!(
            "fold_batchnorm: bn has {} channels, weight has {} rows",
            bn.channels(),
            w.rows()
        )));
    }
    if b.len() != w.cols() {
        return Err(Error::Dimension(format!(
            "fold_batchnorm: bias length {} != weight cols {}",
            b.len(),
            w.cols()
        )));
    }
    let s = bn.scale();
    let mut weight = w.clone();
    for r in 0..weight.rows() {
        for v in weight.row_mut(r) {
            *v = s[r] * *v;
        }
    }
    // shift = beta - s * mean, then bias' = shift . W + b
    let shift: Vec<S> = bn
        .beta
        .iter()
        .zip(&s)
        .zip(&bn.running_mean)
        .map(|((&beta, &sv), &m)| beta - sv * m)
        .collect();
    let mut bias = b.to_vec();
    for (j, bias_j) in bias.iter_mut().enumerate() {
        let mut acc = S::zero();
        for (r, &sh) in shift.iter().enumerate() {
            acc += sh * w.get(r, j);
        }
        *bias_j += acc;
    }
    Ok(FoldedLinear { weight, bias })
}

/// Merge the idle pathway and the shortcut: W_merged = W_in_idle W_out_idle + I,
/// bias contribution b_in_idle W_out_idle. The product is formed in f64 and
/// cast back to the model dtype.
pub fn merge_idle_path<S: Scalar>(
    w_in_idle: &Matrix2D<S>,
    b_in_idle: &[S],
    w_out_idle: &Matrix2D<S>,
) -> Result<(Matrix2D<S>, Vec<S>)> {
    if w_in_idle.cols() != w_out_idle.rows() {
        return Err(Error::Dimension(format!(
            "merge_idle_path: idle widths {} vs {}",
            w_in_idle.cols(),
            w_out_idle.rows()
        )));
    }
    let c = w_in_idle.rows();
    if w_out_idle.cols() != c {
        return Err(Error::Dimension(format!(
            "merge_idle_path: product is {}x{}, expected square {}x{}",
            c,
            w_out_idle.cols(),
            c,
            c
        )));
    }
    if b_in_idle.len() != w_in_idle.cols() {
        return Err(Error::Dimension(format!(
            "merge_idle_path: idle bias length {} != idle width {}",
            b_in_idle.len(),
            w_in_idle.cols()
        )));
    }
    let a64 = w_in_idle.cast::<f64>();
    let b64 = w_out_idle.cast::<f64>();
    let mut prod = matmul(&a64, &b64)?;
    for i in 0..c {
        let v = prod.get(i, i) + 1.0;
        prod.set(i, i, v);
    }
    let mut bias = vec![0.0f64; c];
    for (r, &bi) in b_in_idle.iter().enumerate() {
        let bi = bi.as_f64();
        for (j, acc) in bias.iter_mut().enumerate() {
            *acc += bi * b64.get(r, j);
        }
    }
    Ok((
        prod.cast::<S>(),
        bias.into_iter().map(S::of_f64).collect(),
    ))
}

fn train_form_param_count<S: Scalar>(ffn: &IdleFfnTrain<S>) -> usize {
    let c = ffn.channels();
    let hidden = ffn.hidden();
    // weights + biases + BN affine terms (running stats are buffers)
    2 * c * hidden + hidden + c + 2 * (c + hidden)
}

fn infer_form_param_count<S: Scalar>(ffn: &IdleFfnInfer<S>) -> usize {
    let c = ffn.w_merged.rows();
    let active = ffn.w_act_in.cols();
    2 * active * c + c * c + active + c
}

const SPOTCHECK_INPUTS: usize = 4;
const SPOTCHECK_ROWS: usize = 5;

/// Fold both BatchNorms, split at the active width, merge the idle path with
/// the shortcut, and return the condensed form plus a report with a forward
/// equivalence spot check.
pub fn reparameterize_ffn<S: Scalar>(
    ffn: &IdleFfnTrain<S>,
) -> Result<(IdleFfnInfer<S>, ReparamReport)> {
    if !ffn.bn1.frozen || !ffn.bn2.frozen {
        return Err(Error::State(
            "reparameterize_ffn requires both BatchNorms frozen".into(),
        ));
    }
    let c = ffn.channels();
    let hidden = ffn.hidden();
    let active = ffn.active;

    let folded_in = fold_batchnorm(&ffn.bn1, &ffn.w_in, &ffn.b_in)?;
    let folded_out = fold_batchnorm(&ffn.bn2, &ffn.w_out, &ffn.b_out)?;

    let split_cols = |m: &Matrix2D<S>| -> Result<(Matrix2D<S>, Matrix2D<S>)> {
        let act = if active == 0 {
            Matrix2D::zeros(m.rows(), 0)
        } else {
            crate::tensor::slice_cols(m, 0, active)?
        };
        let idle = if active == hidden {
            Matrix2D::zeros(m.rows(), 0)
        } else {
            crate::tensor::slice_cols(m, active, hidden)?
        };
        Ok((act, idle))
    };
    let (w_act_in, w_in_idle) = split_cols(&folded_in.weight)?;
    let folded_out_t = folded_out.weight.transpose();
    let (w_act_out_t, w_out_idle_t) = split_cols(&folded_out_t)?;
    let w_act_out = w_act_out_t.transpose();
    let w_out_idle = w_out_idle_t.transpose();

    let b_act_in = folded_in.bias[..active].to_vec();
    let b_in_idle = &folded_in.bias[active..];

    let (w_merged, mut b_merged) = if active == hidden {
        (Matrix2D::identity(c), vec![S::zero(); c])
    } else {
        merge_idle_path(&w_in_idle, b_in_idle, &w_out_idle)?
    };
    for (m, &fb) in b_merged.iter_mut().zip(&folded_out.bias) {
        *m += fb;
    }

    let infer = IdleFfnInfer {
        w_act_in,
        b_act_in,
        w_act_out,
        w_merged,
        b_merged,
    };

    // spot-check forward equivalence on a few random inputs
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut max_abs_diff = 0.0f64;
    for _ in 0..SPOTCHECK_INPUTS {
        let x = Matrix2D::from_vec(
            SPOTCHECK_ROWS,
            c,
            (0..SPOTCHECK_ROWS * c)
                .map(|_| S::of_f64(rng.gen_range(-1.0..1.0)))
                .collect(),
        )?;
        let train = ffn.forward_eval(&x, false)?;
        let infer_out = crate::model::forward_ffn_idle_infer(&infer, &x, false)?;
        for (a, b) in train.data().iter().zip(infer_out.data()) {
            max_abs_diff = max_abs_diff.max((a.as_f64() - b.as_f64()).abs());
        }
    }

    let params_before = train_form_param_count(ffn);
    let params_after = infer_form_param_count(&infer);
    let report = ReparamReport {
        layer_index: 0,
        params_before,
        params_after,
        reduction_ratio_measured: ((2 * active * c + c * c) as f64) / ((2 * hidden * c) as f64),
        max_abs_diff_spotcheck: max_abs_diff,
    };
    Ok((infer, report))
}

/// Replace every FFN layer by its condensed form; non-FFN weights are shared
/// bit-identically. Rejects vanilla-LN models (LayerNorm statistics are
/// input-dependent and cannot be folded) and already-condensed models.
pub fn reparameterize_model<S: Scalar>(model: &Model<S>) -> Result<(Model<S>, Vec<ReparamReport>)> {
    let mut out = model.clone();
    let mut reports = Vec::with_capacity(model.blocks.len());
    for (i, block) in model.blocks.iter().enumerate() {
        match &block.ffn {
            FfnLayer::IdleTrain(ffn) => {
                if !ffn.bn1.frozen || !ffn.bn2.frozen {
                    return Err(Error::State(format!(
                        "block {i}: BatchNorms must be frozen before reparameterization"
                    )));
                }
                let (infer, mut report) = reparameterize_ffn(ffn)?;
                report.layer_index = i;
                out.blocks[i].ffn = FfnLayer::IdleInfer(infer);
                reports.push(report);
            }
            FfnLayer::Vanilla(_) => {
                return Err(Error::Unsupported(format!(
                    "block {i}: vanilla-ln FFN cannot be reparameterized (LayerNorm is not foldable)"
                )));
            }
            FfnLayer::IdleInfer(_) => {
                return Err(Error::State(format!(
                    "block {i}: model is already in inference form"
                )));
            }
        }
    }
    Ok((out, reports))
}
