//! Exact per-component parameter and MAC counting, plus the closed-form
//! reduction ratio for the channel-idle rewrite.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{FfnLayer, Mixer, Model, ModelConfig};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CountingMode {
    /// Projection matmuls only; skips the N^2-scaling attention products.
    /// Matches the common FLOP-counter convention.
    #[serde(rename = "linear-only")]
    LinearOnly,
    /// Additionally counts the attention score and value products.
    #[serde(rename = "full")]
    Full,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ComponentCount {
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccountingReport {
    pub patch_embed: ComponentCount,
    pub mhsa: ComponentCount,
    pub ffn: ComponentCount,
    pub head: ComponentCount,
    pub norms_other: ComponentCount,
    pub totals: ComponentCount,
    pub config_echo: ModelConfig,
    pub counting_mode: CountingMode,
}

impl AccountingReport {
    pub fn components(&self) -> [(&'static str, ComponentCount); 5] {
        [
            ("patch_embed", self.patch_embed),
            ("mhsa", self.mhsa),
            ("ffn", self.ffn),
            ("head", self.head),
            ("norms_other", self.norms_other),
        ]
    }

    /// Aligned-column text rendering for the CLI.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<14} {:>16} {:>16}\n",
            "component", "params", "macs"
        ));
        for (name, c) in self.components() {
            out.push_str(&format!("{:<14} {:>16} {:>16}\n", name, c.params, c.macs));
        }
        out.push_str(&format!(
            "{:<14} {:>16} {:>16}\n",
            "total", self.totals.params, self.totals.macs
        ));
        out
    }
}

fn ffn_params<S: Scalar>(ffn: &FfnLayer<S>) -> u64 {
    match ffn {
        FfnLayer::Vanilla(f) => {
            (f.ln.gamma.len()
                + f.ln.beta.len()
                + f.w_in.rows() * f.w_in.cols()
                + f.b_in.len()
                + f.w_out.rows() * f.w_out.cols()
                + f.b_out.len()) as u64
        }
        FfnLayer::IdleTrain(f) => {
            // BN affine terms count; running statistics are buffers
            (2 * f.bn1.channels()
                + 2 * f.bn2.channels()
                + f.w_in.rows() * f.w_in.cols()
                + f.b_in.len()
                + f.w_out.rows() * f.w_out.cols()
                + f.b_out.len()) as u64
        }
        FfnLayer::IdleInfer(f) => {
            (f.w_act_in.rows() * f.w_act_in.cols()
                + f.b_act_in.len()
                + f.w_act_out.rows() * f.w_act_out.cols()
                + f.w_merged.rows() * f.w_merged.cols()
                + f.b_merged.len()) as u64
        }
    }
}

/// Exact element counts of every weight, bias, norm affine and token table.
pub fn count_params<S: Scalar>(model: &Model<S>) -> AccountingReport {
    let mut report = AccountingReport {
        patch_embed: ComponentCount::default(),
        mhsa: ComponentCount::default(),
        ffn: ComponentCount::default(),
        head: ComponentCount::default(),
        norms_other: ComponentCount::default(),
        totals: ComponentCount::default(),
        config_echo: model.cfg.clone(),
        counting_mode: CountingMode::LinearOnly,
    };
    let p = &model.patch;
    report.patch_embed.params = (p.weight.rows() * p.weight.cols()
        + p.bias.len()
        + p.pos.rows() * p.pos.cols()
        + p.cls.len()) as u64;
    for block in &model.blocks {
        if let Mixer::Attention(a) = &block.mixer {
            report.mhsa.params += (a.ln.gamma.len()
                + a.ln.beta.len()
                + a.w_qkv.rows() * a.w_qkv.cols()
                + a.b_qkv.len()
                + a.w_proj.rows() * a.w_proj.cols()
                + a.b_proj.len()) as u64;
        }
        report.ffn.params += ffn_params(&block.ffn);
    }
    report.head.params = (model.head_w.rows() * model.head_w.cols() + model.head_b.len()) as u64;
    report.norms_other.params =
        (model.final_norm.gamma.len() + model.final_norm.beta.len()) as u64;
    report.totals.params = report
        .components()
        .iter()
        .map(|(_, c)| c.params)
        .sum();
    report
}

fn ffn_macs<S: Scalar>(ffn: &FfnLayer<S>, tokens: u64) -> u64 {
    match ffn {
        FfnLayer::Vanilla(f) => {
            tokens * (f.w_in.rows() * f.w_in.cols() + f.w_out.rows() * f.w_out.cols()) as u64
        }
        FfnLayer::IdleTrain(f) => {
            tokens * (f.w_in.rows() * f.w_in.cols() + f.w_out.rows() * f.w_out.cols()) as u64
        }
        FfnLayer::IdleInfer(f) => {
            tokens
                * (f.w_act_in.rows() * f.w_act_in.cols()
                    + f.w_act_out.rows() * f.w_act_out.cols()
                    + f.w_merged.rows() * f.w_merged.cols()) as u64
        }
    }
}

/// Matmul MAC counts for a single forward pass with the given token count.
pub fn count_macs<S: Scalar>(model: &Model<S>, tokens: u64, mode: CountingMode) -> Result<AccountingReport> {
    if tokens < 1 {
        return Err(Error::Validation("tokens must be >= 1".into()));
    }
    let mut report = count_params(model);
    report.counting_mode = mode;
    let cfg = &model.cfg;
    let patch_dim = (cfg.patch_size * cfg.patch_size * cfg.in_channels) as u64;
    report.patch_embed.macs = cfg.num_patches() as u64 * patch_dim * cfg.embed_dim as u64;
    for block in &model.blocks {
        if let Mixer::Attention(a) = &block.mixer {
            let c = a.w_proj.rows() as u64;
            let mut macs = tokens * (a.w_qkv.rows() * a.w_qkv.cols()) as u64
                + tokens * c * c;
            if mode == CountingMode::Full {
                // score product N^2 C and value product N^2 C
                macs += 2 * tokens * tokens * c;
            }
            report.mhsa.macs += macs;
        }
        report.ffn.macs += ffn_macs(&block.ffn, tokens);
    }
    // classifier reads a single token
    report.head.macs = (model.head_w.rows() * model.head_w.cols()) as u64;
    report.norms_other.macs = 0;
    report.totals.macs = report.components().iter().map(|(_, c)| c.macs).sum();
    Ok(report)
}

/// The closed-form weight/complexity ratio 1 - theta + 1/(2 rho).
pub fn reduction_ratio(theta: f64, rho: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::Validation(format!("theta {theta} not in [0, 1]")));
    }
    if rho < 1.0 {
        return Err(Error::Validation(format!("rho {rho} must be >= 1")));
    }
    Ok(1.0 - theta + 1.0 / (2.0 * rho))
}

/// Fraction of matmul MACs spent in FFN layers.
pub fn ffn_fraction(report: &AccountingReport) -> f64 {
    report.ffn.macs as f64 / report.totals.macs as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::build_model;
    use crate::model::{FfnForm, ModelConfig};
    use crate::reparam::reparameterize_model;

    fn preset_model(name: &str, theta: f64, form: FfnForm) -> Model<f32> {
        let mut cfg = ModelConfig::preset(name).unwrap();
        cfg.idle_ratio = theta;
        cfg.ffn_form = form;
        build_model(&cfg).unwrap()
    }

    fn mparams(model: &Model<f32>) -> f64 {
        count_params(model).totals.params as f64 / 1e6
    }

    #[test]
    fn deit_tiny_vanilla_param_count() {
        let m = preset_model("deit-tiny", 0.75, FfnForm::VanillaLn);
        let total = count_params(&m).totals.params;
        assert_eq!(total, 5_717_416);
        assert!((mparams(&m) - 5.72).abs() / 5.72 < 0.01);
    }

    #[test]
    fn table_2_deit_small_sweep() {
        for (theta, expect) in [(1.0, 9.6), (0.75, 13.2), (0.5, 16.7), (0.25, 20.3)] {
            let m = preset_model("deit-small", theta, FfnForm::IdleInfer);
            let got = mparams(&m);
            assert!(
                (got - expect).abs() / expect < 0.01,
                "theta {theta}: got {got}, expected {expect}"
            );
        }
    }

    #[test]
    fn large_preset_infer_counts() {
        let m = preset_model("vit-large", 0.75, FfnForm::IdleInfer);
        assert!((mparams(&m) - 178.4).abs() / 178.4 < 0.01);
        let m = preset_model("vit-huge", 0.75, FfnForm::IdleInfer);
        assert!((mparams(&m) - 369.9).abs() / 369.9 < 0.01);
    }

    #[test]
    fn macs_linear_only_table_1() {
        let m = preset_model("deit-tiny", 0.5, FfnForm::VanillaLn);
        let r = count_macs(&m, 197, CountingMode::LinearOnly).unwrap();
        let gmacs = r.totals.macs as f64 / 1e9;
        assert!((gmacs - 1.08).abs() < 0.02, "got {gmacs}");
        assert!((gmacs - 1.1).abs() / 1.1 < 0.1);

        let m = preset_model("deit-tiny", 0.5, FfnForm::IdleInfer);
        let r = count_macs(&m, 197, CountingMode::LinearOnly).unwrap();
        let gmacs = r.totals.macs as f64 / 1e9;
        assert!((gmacs - 0.81).abs() < 0.02, "got {gmacs}");
        assert!((gmacs - 0.8).abs() / 0.8 < 0.1);
    }

    #[test]
    fn full_mode_strictly_exceeds_linear_only() {
        let m = preset_model("deit-tiny", 0.75, FfnForm::VanillaLn);
        let lin = count_macs(&m, 197, CountingMode::LinearOnly).unwrap();
        let full = count_macs(&m, 197, CountingMode::Full).unwrap();
        assert!(full.totals.macs > lin.totals.macs);
        assert_eq!(full.totals.params, lin.totals.params);
    }

    #[test]
    fn ffn_macs_quadratic_in_channels() {
        let mut cfg = ModelConfig::preset("deit-tiny").unwrap();
        cfg.depth = 2;
        let m: Model<f32> = build_model(&cfg).unwrap();
        let base = count_macs(&m, 50, CountingMode::LinearOnly).unwrap().ffn.macs;
        cfg.embed_dim = cfg.embed_dim * 2;
        cfg.heads = 6;
        let m: Model<f32> = build_model(&cfg).unwrap();
        let doubled = count_macs(&m, 50, CountingMode::LinearOnly).unwrap().ffn.macs;
        assert_eq!(doubled, 4 * base);
    }

    #[test]
    fn ffn_fraction_grows_with_model_size() {
        let mut last = 0.0;
        for name in ["deit-tiny", "deit-base", "vit-large"] {
            let m = preset_model(name, 0.75, FfnForm::VanillaLn);
            let tokens = m.cfg.token_count() as u64;
            let r = count_macs(&m, tokens, CountingMode::LinearOnly).unwrap();
            let f = ffn_fraction(&r);
            assert!(f > last, "{name}: {f} vs {last}");
            last = f;
        }
    }

    #[test]
    fn component_fractions_sum_to_one() {
        let m = preset_model("deit-small", 0.75, FfnForm::VanillaLn);
        let r = count_macs(&m, 197, CountingMode::Full).unwrap();
        let sum: f64 = r
            .components()
            .iter()
            .map(|(_, c)| c.macs as f64 / r.totals.macs as f64)
            .sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reduction_ratio_values_and_validation() {
        assert_eq!(reduction_ratio(0.75, 4.0).unwrap(), 0.375);
        assert_eq!(reduction_ratio(1.0, 4.0).unwrap(), 0.125);
        assert_eq!(reduction_ratio(0.0, 4.0).unwrap(), 1.125);
        assert!(reduction_ratio(-0.1, 4.0).is_err());
        assert!(reduction_ratio(0.5, 0.5).is_err());
    }

    #[test]
    fn measured_ffn_weight_reduction_matches_formula() {
        for theta in [0.25, 0.5, 0.75, 1.0] {
            let mut cfg = ModelConfig::preset("deit-tiny").unwrap();
            cfg.depth = 1;
            cfg.idle_ratio = theta;
            cfg.ffn_form = FfnForm::IdleTrain;
            let mut m: Model<f32> = build_model(&cfg).unwrap();
            m.freeze_batchnorms();
            let (post, reports) = reparameterize_model(&m).unwrap();
            let expect = reduction_ratio(theta, cfg.expand_ratio).unwrap();
            assert!((reports[0].reduction_ratio_measured - expect).abs() < 1e-12);
            if theta > 1.0 / (2.0 * cfg.expand_ratio) {
                assert!(
                    count_params(&post).totals.params < count_params(&m).totals.params
                );
            }
        }
    }

    #[test]
    fn theta_one_infer_ffn_macs() {
        let m = preset_model("deit-tiny", 1.0, FfnForm::IdleInfer);
        let r = count_macs(&m, 197, CountingMode::LinearOnly).unwrap();
        let c = m.cfg.embed_dim as u64;
        assert_eq!(r.ffn.macs, m.cfg.depth as u64 * 197 * c * c);
    }
}
