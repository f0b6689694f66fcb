//! Latency decomposition, pre/post-reparameterization throughput comparison,
//! and whole-model equivalence verification.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::build_model;
use crate::model::{FfnForm, FfnLayer, ForwardOpts, Model, ModelConfig};
use crate::reparam::reparameterize_model;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PerComponentMs {
    pub patch_embed: f64,
    pub mhsa: f64,
    pub ffn: f64,
    pub other: f64,
}

impl PerComponentMs {
    pub fn total(&self) -> f64 {
        self.patch_embed + self.mhsa + self.ffn + self.other
    }

    pub fn ffn_fraction(&self) -> f64 {
        let t = self.total();
        if t > 0.0 {
            self.ffn / t
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub preset: String,
    pub theta: f64,
    pub batch_size: usize,
    pub dtype: String,
    pub warmup_iters: usize,
    pub measure_iters: usize,
    pub per_component_ms: PerComponentMs,
    pub images_per_second_pre: f64,
    pub images_per_second_post: f64,
    pub speedup_percent: f64,
    pub environment_note: String,
}

pub const DEFAULT_WARMUP_ITERS: usize = 10;
pub const DEFAULT_MEASURE_ITERS: usize = 50;
pub const DEFAULT_BATCH: usize = 32;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn random_images<S: Scalar>(cfg: &ModelConfig, batch: usize, seed: u64) -> Vec<Vec<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = cfg.in_channels * cfg.image_size * cfg.image_size;
    (0..batch)
        .map(|_| (0..len).map(|_| S::of_f64(rng.gen_range(-1.0..1.0))).collect())
        .collect()
}

/// Per-component latency medians on the configured form, plus eval-mode
/// throughput of the train-form model before and after reparameterization.
/// Warmup iterations run untimed; medians are taken over the measured ones.
pub fn run_profile<S: Scalar>(
    preset: &str,
    cfg: &ModelConfig,
    batch: usize,
    warmup_iters: usize,
    measure_iters: usize,
    seed: u64,
) -> Result<BenchReport> {
    if batch == 0 {
        return Err(Error::Validation("batch must be >= 1".into()));
    }
    if measure_iters == 0 {
        return Err(Error::Validation(
            "measure iterations must be >= 1; a report of zero samples is meaningless".into(),
        ));
    }
    cfg.validate()?;

    let component_model: Model<S> = build_model(cfg)?;
    let mut train_cfg = cfg.clone();
    train_cfg.ffn_form = FfnForm::IdleTrain;
    let mut pre: Model<S> = build_model(&train_cfg)?;
    randomize_bn_stats(&mut pre, seed ^ BN_STATS_STREAM);
    pre.freeze_batchnorms();
    let (post, _) = reparameterize_model(&pre)?;

    let images = random_images::<S>(cfg, batch, seed);
    let opts = ForwardOpts { timing: true, fast: true };

    // component decomposition
    let mut comp_samples: Vec<crate::model::ComponentTimings> = Vec::new();
    for iter in 0..warmup_iters + measure_iters {
        let mut acc = crate::model::ComponentTimings::default();
        for img in &images {
            let (_, t) = component_model.forward(img, opts)?;
            let t = t.expect("timing requested");
            acc.patch_embed += t.patch_embed;
            acc.mhsa += t.mhsa;
            acc.ffn += t.ffn;
            acc.other += t.other;
        }
        if iter >= warmup_iters {
            comp_samples.push(acc);
        }
    }
    let per_component_ms = PerComponentMs {
        patch_embed: median(comp_samples.iter().map(|t| t.patch_embed * 1e3).collect()),
        mhsa: median(comp_samples.iter().map(|t| t.mhsa * 1e3).collect()),
        ffn: median(comp_samples.iter().map(|t| t.ffn * 1e3).collect()),
        other: median(comp_samples.iter().map(|t| t.other * 1e3).collect()),
    };

    // throughput, train form vs condensed form
    let throughput = |model: &Model<S>| -> Result<f64> {
        let fwd_opts = ForwardOpts { timing: false, fast: true };
        let mut samples = Vec::with_capacity(measure_iters);
        for iter in 0..warmup_iters + measure_iters {
            let start = Instant::now();
            for img in &images {
                let _ = model.forward(img, fwd_opts)?;
            }
            if iter >= warmup_iters {
                samples.push(start.elapsed().as_secs_f64());
            }
        }
        Ok(batch as f64 / median(samples))
    };
    let images_per_second_pre = throughput(&pre)?;
    let images_per_second_post = throughput(&post)?;

    Ok(BenchReport {
        preset: preset.to_string(),
        theta: cfg.idle_ratio,
        batch_size: batch,
        dtype: S::DTYPE.to_string(),
        warmup_iters,
        measure_iters,
        per_component_ms,
        images_per_second_pre,
        images_per_second_post,
        speedup_percent: 100.0 * (images_per_second_post / images_per_second_pre - 1.0),
        environment_note: environment_note(),
    })
}

fn environment_note() -> String {
    format!(
        "single-thread CPU wall-clock medians; {} logical cores visible; absolute numbers are hardware-relative",
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    )
}

// arbitrary stream separator so BN statistics and probe images draw from
// independent seeds
const BN_STATS_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// Give every train-form BatchNorm plausible non-identity running statistics,
/// as a trained checkpoint would have.
pub fn randomize_bn_stats<S: Scalar>(model: &mut Model<S>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for block in &mut model.blocks {
        if let FfnLayer::IdleTrain(f) = &mut block.ffn {
            for bn in [&mut f.bn1, &mut f.bn2] {
                for v in &mut bn.gamma {
                    *v = S::of_f64(rng.gen_range(0.5..1.5));
                }
                for v in &mut bn.beta {
                    *v = S::of_f64(rng.gen_range(-0.5..0.5));
                }
                for v in &mut bn.running_mean {
                    *v = S::of_f64(rng.gen_range(-0.5..0.5));
                }
                for v in &mut bn.running_var {
                    *v = S::of_f64(rng.gen_range(0.2..2.0));
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VerifyReport {
    pub max_rel_diff: f64,
    pub pass: bool,
    pub tolerance: f64,
}

pub fn dtype_tolerance<S: Scalar>() -> f64 {
    match S::DTYPE {
        crate::scalar::Dtype::F32 => 1e-4,
        crate::scalar::Dtype::F64 => 1e-10,
    }
}

/// Compare whole-model logits of two models over random probe images.
pub fn verify_pair<S: Scalar>(
    cfg: &ModelConfig,
    pre: &Model<S>,
    post: &Model<S>,
    probes: usize,
    seed: u64,
) -> Result<VerifyReport> {
    if probes == 0 {
        return Err(Error::Validation("need at least one probe input".into()));
    }
    let opts = ForwardOpts { timing: false, fast: true };
    let mut max_rel_diff = 0.0f64;
    for img in random_images::<S>(cfg, probes, seed) {
        let (a, _) = pre.forward(&img, opts)?;
        let (b, _) = post.forward(&img, opts)?;
        let norm: f64 = a.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        let diff: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| {
                let d = x.as_f64() - y.as_f64();
                d * d
            })
            .sum::<f64>()
            .sqrt();
        max_rel_diff = max_rel_diff.max(if norm > 0.0 { diff / norm } else { diff });
    }
    let tolerance = dtype_tolerance::<S>();
    Ok(VerifyReport {
        max_rel_diff,
        pass: max_rel_diff <= tolerance,
        tolerance,
    })
}

/// Build a frozen train-form model with random BN statistics, reparameterize
/// it, and check output preservation over random probe images.
pub fn run_verify<S: Scalar>(cfg: &ModelConfig, probes: usize, seed: u64) -> Result<VerifyReport> {
    cfg.validate()?;
    let mut train_cfg = cfg.clone();
    train_cfg.ffn_form = FfnForm::IdleTrain;
    let mut pre: Model<S> = build_model(&train_cfg)?;
    randomize_bn_stats(&mut pre, seed ^ BN_STATS_STREAM);
    pre.freeze_batchnorms();
    let (post, _) = reparameterize_model(&pre)?;
    verify_pair(cfg, &pre, &post, probes, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::preset("deit-tiny").unwrap();
        cfg.depth = 2;
        cfg.image_size = 64;
        cfg.idle_ratio = 0.75;
        cfg
    }

    #[test]
    fn profile_rejects_zero_iters_and_batch() {
        let cfg = small_cfg();
        assert!(matches!(
            run_profile::<f32>("deit-tiny", &cfg, 1, 0, 0, 1),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            run_profile::<f32>("deit-tiny", &cfg, 0, 0, 10, 1),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn profile_report_invariants() {
        let cfg = small_cfg();
        let report = run_profile::<f32>("deit-tiny", &cfg, 1, 1, 11, 42).unwrap();
        assert_eq!(report.preset, "deit-tiny");
        assert_eq!(report.dtype, "f32");
        assert!(report.per_component_ms.total() > 0.0);
        assert!(report.per_component_ms.ffn > 0.0);
        assert!(report.images_per_second_pre > 0.0);
        assert!(report.images_per_second_post > 0.0);
        let expect = 100.0 * (report.images_per_second_post / report.images_per_second_pre - 1.0);
        assert!((report.speedup_percent - expect).abs() < 1e-9);
    }

    #[test]
    fn verify_passes_small_config_both_dtypes() {
        let cfg = small_cfg();
        let r64 = run_verify::<f64>(&cfg, 3, 5).unwrap();
        assert!(r64.pass, "f64 max_rel_diff {}", r64.max_rel_diff);
        assert!(r64.max_rel_diff <= 1e-10);
        let r32 = run_verify::<f32>(&cfg, 3, 5).unwrap();
        assert!(r32.pass, "f32 max_rel_diff {}", r32.max_rel_diff);
    }

    #[test]
    fn verify_is_deterministic() {
        let cfg = small_cfg();
        let a = run_verify::<f64>(&cfg, 2, 11).unwrap();
        let b = run_verify::<f64>(&cfg, 2, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupting_merged_weight_fails_verification() {
        let cfg = small_cfg();
        let mut train_cfg = cfg.clone();
        train_cfg.ffn_form = FfnForm::IdleTrain;
        let mut pre: Model<f64> = build_model(&train_cfg).unwrap();
        randomize_bn_stats(&mut pre, 3);
        pre.freeze_batchnorms();
        let (mut post, _) = reparameterize_model(&pre).unwrap();
        if let FfnLayer::IdleInfer(f) = &mut post.blocks[0].ffn {
            let v = f.w_merged.get(0, 0) + 1e-2;
            f.w_merged.set(0, 0, v);
        } else {
            panic!("expected condensed ffn");
        }
        let report = verify_pair(&cfg, &pre, &post, 2, 7).unwrap();
        assert!(!report.pass);
        assert!(report.max_rel_diff > 1e-10);
    }

    #[test]
    fn zero_probes_rejected() {
        let cfg = small_cfg();
        assert!(matches!(
            run_verify::<f64>(&cfg, 0, 1),
            Err(Error::Validation(_))
        ));
    }
}
