use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use repavit::accounting::{count_macs, reduction_ratio, CountingMode};
use repavit::bench::{run_profile, run_verify, DEFAULT_BATCH, DEFAULT_MEASURE_ITERS, DEFAULT_WARMUP_ITERS};
use repavit::error::Error;
use repavit::io::{build_model, config_from_json, load_model, probe_dtype, save_model};
use repavit::model::{FfnForm, ModelConfig};
use repavit::reparam::reparameterize_model;
use repavit::scalar::{Dtype, Scalar};
use repavit::training::{train_toy, ToyTask};

#[derive(Parser)]
#[command(
    name = "repavit",
    about = "Channel-idle FFN reparameterization: profiling, verification, accounting, weight tools",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
    Text,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    #[value(name = "linear-only")]
    LinearOnly,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormArg {
    Vanilla,
    Train,
    Infer,
}

impl FormArg {
    fn to_ffn_form(self) -> FfnForm {
        match self {
            FormArg::Vanilla => FfnForm::VanillaLn,
            FormArg::Train => FfnForm::IdleTrain,
            FormArg::Infer => FfnForm::IdleInfer,
        }
    }
}

#[derive(Args)]
struct ModelArgs {
    /// Architecture preset (deit-tiny, deit-small, deit-base, vit-large, vit-huge, pool-tiny)
    #[arg(long, default_value = "deit-tiny")]
    preset: String,

    /// JSON config file; overrides --preset
    #[arg(long)]
    config: Option<PathBuf>,

    /// Idle ratio theta in [0, 1]
    #[arg(long, default_value_t = 0.75)]
    theta: f64,

    /// FFN expansion ratio rho
    #[arg(long)]
    rho: Option<f64>,

    /// RNG seed for weights, statistics, and probe inputs
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ModelArgs {
    fn resolve(&self, form: Option<FfnForm>) -> Result<ModelConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => config_from_json(&std::fs::read_to_string(path)?)?,
            None => ModelConfig::preset(&self.preset)?,
        };
        cfg.idle_ratio = self.theta;
        if let Some(rho) = self.rho {
            cfg.expand_ratio = rho;
        }
        cfg.seed = self.seed;
        if let Some(form) = form {
            cfg.ffn_form = form;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct OutputArgs {
    /// Write the report here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,

    /// Report format
    #[arg(long, value_enum, default_value = "json")]
    format: FormatArg,
}

#[derive(Subcommand)]
enum Command {
    /// Per-component latency decomposition and pre/post-reparameterization throughput
    Profile {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        output: OutputArgs,
        /// Images per timed iteration
        #[arg(long, default_value_t = DEFAULT_BATCH)]
        batch: usize,
        /// Scalar type used for the timed runs
        #[arg(long, value_enum, default_value = "f32")]
        dtype: DtypeArg,
        /// Measured iterations (after a fixed warmup)
        #[arg(long, default_value_t = DEFAULT_MEASURE_ITERS)]
        iters: usize,
        /// Compute threads for both pre and post runs
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Check that reparameterization preserves whole-model outputs
    Verify {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        output: OutputArgs,
        /// Scalar type (sets the tolerance: 1e-4 f32, 1e-10 f64)
        #[arg(long, value_enum, default_value = "f64")]
        dtype: DtypeArg,
        /// Number of random probe images
        #[arg(long, default_value_t = 4)]
        iters: usize,
    },
    /// Per-component parameter and MAC counts
    Account {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        output: OutputArgs,
        /// Which FFN form to count
        #[arg(long, value_enum, default_value = "train")]
        form: FormArg,
        /// MAC counting convention
        #[arg(long, value_enum, default_value = "linear-only")]
        mode: ModeArg,
    },
    /// Reparameterize a frozen train-form weight file into the condensed form
    Reparam {
        /// Input weight file (train form, all BatchNorms frozen)
        #[arg(long = "in")]
        input: PathBuf,
        /// Output weight file for the condensed model
        #[arg(long = "out")]
        output: PathBuf,
        /// Per-layer report format (written to stdout)
        #[arg(long, value_enum, default_value = "json")]
        format: FormatArg,
    },
    /// Train a small pooling-mixer model on synthetic data, then freeze and verify
    TrainToy {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        output: OutputArgs,
        /// Gradient-descent steps
        #[arg(long, default_value_t = 200)]
        iters: usize,
        /// Learning rate
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        /// Form to train (train or infer)
        #[arg(long, value_enum, default_value = "train")]
        form: FormArg,
        /// Scalar type
        #[arg(long, value_enum, default_value = "f64")]
        dtype: DtypeArg,
        /// Save the trained weights here
        #[arg(long = "out-weights")]
        out_weights: Option<PathBuf>,
        /// Freeze BatchNorm statistics before saving (required for reparam)
        #[arg(long)]
        freeze: bool,
    },
}

fn emit(output: &OutputArgs, json: String, csv: String, text: String) -> Result<(), Error> {
    let body = match output.format {
        FormatArg::Json => json,
        FormatArg::Csv => csv,
        FormatArg::Text => text,
    };
    match &output.out {
        Some(path) => std::fs::write(path, body.as_bytes())?,
        None => print!("{body}"),
    }
    Ok(())
}

fn cmd_profile<S: Scalar>(
    model: &ModelArgs,
    output: &OutputArgs,
    batch: usize,
    iters: usize,
    threads: usize,
) -> Result<u8, Error> {
    if threads == 0 {
        return Err(Error::Validation("--threads must be >= 1".into()));
    }
    if threads > 1 {
        eprintln!("note: compute kernels are single-threaded; --threads {threads} recorded only");
    }
    let cfg = model.resolve(None)?;
    let report = run_profile::<S>(
        &model.preset,
        &cfg,
        batch,
        DEFAULT_WARMUP_ITERS,
        iters,
        model.seed,
    )?;
    let mut csv = String::from("component,value\n");
    csv.push_str(&format!("patch_embed,{}\n", report.per_component_ms.patch_embed));
    csv.push_str(&format!("mhsa,{}\n", report.per_component_ms.mhsa));
    csv.push_str(&format!("ffn,{}\n", report.per_component_ms.ffn));
    csv.push_str(&format!("other,{}\n", report.per_component_ms.other));
    csv.push_str(&format!("images_per_second_pre,{}\n", report.images_per_second_pre));
    csv.push_str(&format!("images_per_second_post,{}\n", report.images_per_second_post));
    csv.push_str(&format!("speedup_percent,{}\n", report.speedup_percent));
    let text = format!(
        "preset {} theta {} batch {} dtype {} ({} warmup / {} measured iterations)\n\
         per-component median ms: patch_embed {:.3}, mhsa {:.3}, ffn {:.3}, other {:.3}\n\
         images/second pre {:.2} -> post {:.2} ({:+.1}%)\n{}\n",
        report.preset,
        report.theta,
        report.batch_size,
        report.dtype,
        report.warmup_iters,
        report.measure_iters,
        report.per_component_ms.patch_embed,
        report.per_component_ms.mhsa,
        report.per_component_ms.ffn,
        report.per_component_ms.other,
        report.images_per_second_pre,
        report.images_per_second_post,
        report.speedup_percent,
        report.environment_note,
    );
    emit(output, serde_json::to_string_pretty(&report)? + "\n", csv, text)?;
    Ok(0)
}

fn cmd_verify<S: Scalar>(model: &ModelArgs, output: &OutputArgs, probes: usize) -> Result<u8, Error> {
    let cfg = model.resolve(None)?;
    let report = run_verify::<S>(&cfg, probes, model.seed)?;
    let csv = format!(
        "metric,value\nmax_rel_diff,{}\ntolerance,{}\npass,{}\n",
        report.max_rel_diff, report.tolerance, report.pass
    );
    let text = format!(
        "max relative logit difference {:.3e} (tolerance {:.0e}): {}\n",
        report.max_rel_diff,
        report.tolerance,
        if report.pass { "PASS" } else { "FAIL" }
    );
    emit(output, serde_json::to_string_pretty(&report)? + "\n", csv, text)?;
    Ok(if report.pass { 0 } else { 1 })
}

fn cmd_account(
    model: &ModelArgs,
    output: &OutputArgs,
    form: FormArg,
    mode: ModeArg,
) -> Result<u8, Error> {
    let cfg = model.resolve(Some(form.to_ffn_form()))?;
    let built = build_model::<f32>(&cfg)?;
    let mode = match mode {
        ModeArg::LinearOnly => CountingMode::LinearOnly,
        ModeArg::Full => CountingMode::Full,
    };
    let report = count_macs(&built, cfg.token_count() as u64, mode)?;
    let mut csv = String::from("component,params,macs\n");
    for (name, c) in report.components() {
        csv.push_str(&format!("{name},{},{}\n", c.params, c.macs));
    }
    csv.push_str(&format!("total,{},{}\n", report.totals.params, report.totals.macs));
    let mut text = report.to_text();
    text.push_str(&format!(
        "closed-form ffn weight ratio at theta {} rho {}: {:.4}\n",
        cfg.idle_ratio,
        cfg.expand_ratio,
        reduction_ratio(cfg.idle_ratio, cfg.expand_ratio)?
    ));
    emit(output, serde_json::to_string_pretty(&report)? + "\n", csv, text)?;
    Ok(0)
}

fn cmd_reparam_typed<S: Scalar>(
    input: &PathBuf,
    out_weights: &PathBuf,
    format: FormatArg,
) -> Result<u8, Error> {
    let model = load_model::<S>(input)?;
    let (condensed, reports) = reparameterize_model(&model)?;
    save_model(&condensed, out_weights)?;
    let mut csv =
        String::from("layer_index,params_before,params_after,reduction_ratio_measured,max_abs_diff_spotcheck\n");
    let mut text = String::new();
    for r in &reports {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.layer_index,
            r.params_before,
            r.params_after,
            r.reduction_ratio_measured,
            r.max_abs_diff_spotcheck
        ));
        text.push_str(&format!(
            "layer {:>3}: {} -> {} params (ratio {:.4}), spot-check max |diff| {:.3e}\n",
            r.layer_index,
            r.params_before,
            r.params_after,
            r.reduction_ratio_measured,
            r.max_abs_diff_spotcheck
        ));
    }
    let report_out = OutputArgs { out: None, format };
    emit(&report_out, serde_json::to_string_pretty(&reports)? + "\n", csv, text)?;
    Ok(0)
}

fn cmd_train_toy<S: Scalar>(
    model: &ModelArgs,
    output: &OutputArgs,
    iters: usize,
    lr: f64,
    form: FormArg,
    out_weights: &Option<PathBuf>,
    freeze: bool,
) -> Result<u8, Error> {
    let mut args_preset = model.preset.clone();
    if model.config.is_none() && args_preset == "deit-tiny" {
        // pooling models are the only trainable ones; default accordingly
        args_preset = "pool-tiny".to_string();
    }
    let model_args = ModelArgs {
        preset: args_preset,
        config: model.config.clone(),
        theta: model.theta,
        rho: model.rho,
        seed: model.seed,
    };
    let cfg = model_args.resolve(None)?;
    let task = ToyTask {
        seed: model.seed,
        embed_dim: cfg.embed_dim,
        classes: cfg.num_classes,
        ..ToyTask::default()
    };
    let (mut trained, summary) = train_toy::<S>(&cfg, &task, iters, lr, form.to_ffn_form())?;
    if freeze {
        trained.freeze_batchnorms();
    }
    if let Some(path) = out_weights {
        save_model(&trained, path)?;
    }
    let mut csv = String::from("step,loss\n");
    for (i, l) in summary.loss_curve.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    let first = summary.loss_curve.first().copied().unwrap_or(0.0);
    let last = summary.loss_curve.last().copied().unwrap_or(0.0);
    let text = format!(
        "trained {} steps (lr {}): loss {:.4} -> {:.4}, final accuracy {:.3}\n",
        iters, lr, first, last, summary.final_accuracy
    );
    emit(output, serde_json::to_string_pretty(&summary)? + "\n", csv, text)?;
    Ok(0)
}

fn run(cli: Cli) -> Result<u8, Error> {
    match &cli.command {
        Command::Profile { model, output, batch, dtype, iters, threads } => match dtype {
            DtypeArg::F32 => cmd_profile::<f32>(model, output, *batch, *iters, *threads),
            DtypeArg::F64 => cmd_profile::<f64>(model, output, *batch, *iters, *threads),
        },
        Command::Verify { model, output, dtype, iters } => match dtype {
            DtypeArg::F32 => cmd_verify::<f32>(model, output, *iters),
            DtypeArg::F64 => cmd_verify::<f64>(model, output, *iters),
        },
        Command::Account { model, output, form, mode } => cmd_account(model, output, *form, *mode),
        Command::Reparam { input, output, format } => match probe_dtype(input)? {
            Dtype::F32 => cmd_reparam_typed::<f32>(input, output, *format),
            Dtype::F64 => cmd_reparam_typed::<f64>(input, output, *format),
        },
        Command::TrainToy { model, output, iters, lr, form, dtype, out_weights, freeze } => {
            match dtype {
                DtypeArg::F32 => {
                    cmd_train_toy::<f32>(model, output, *iters, *lr, *form, out_weights, *freeze)
                }
                DtypeArg::F64 => {
                    cmd_train_toy::<f64>(model, output, *iters, *lr, *form, out_weights, *freeze)
                }
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse(); // malformed argv exits 2 via clap
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e @ (Error::Validation(_) | Error::Unsupported(_))) => {
            eprintln!("usage error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
