//! Command-line front end: run experiments, verify gradients, plan ranks,
//! and export/import model checkpoints.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure,
//! 4 I/O error.

mod checkpoint;
mod config;

use clap::{Parser, Subcommand};
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use tdpfed::gradcheck::{run_suite, GRADCHECK_TOL};
use tdpfed::layers::{plan_ranks, Activation, LayerSpec, ModelSpec, PresetModel};
use tdpfed::model::TensorizedLayer;
use tdpfed::simulator::{
    init_global, run_with, write_metrics_csv, Parallelism, RoundMetrics, METRICS_CSV_HEADER,
};

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(name = "tdpfed", about = "Tensor-decomposition personalized federated learning simulator", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for metrics.csv, checkpoint.tdpf and the
        /// resolved-config echo.
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify the analytic gradients against finite differences.
    CheckGrad {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Check a single mode count instead of the default {2, 4}.
        #[arg(long)]
        modes: Option<usize>,
        /// Check a single rank instead of the default {1, 2, 3}.
        #[arg(long)]
        rank: Option<usize>,
    },
    /// Print the per-layer rank plan for a preset model at a target
    /// compression rate.
    PlanRanks {
        #[arg(long)]
        model: String,
        #[arg(long)]
        cr: f64,
    },
    /// Write a freshly initialized model checkpoint.
    Export {
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 2.0)]
        cr: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Read a checkpoint, print its structure, optionally re-export it.
    Import {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        reexport: Option<PathBuf>,
    },
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn sim_error_code(e: &tdpfed::Error) -> u8 {
    match e {
        tdpfed::Error::NumericDivergence { .. } => EXIT_NUMERIC,
        tdpfed::Error::InvalidConfig(_)
        | tdpfed::Error::ShapeMismatch { .. }
        | tdpfed::Error::ModeOutOfRange { .. }
        | tdpfed::Error::EmptyShard { .. } => EXIT_CONFIG,
        tdpfed::Error::Io(_)
        | tdpfed::Error::IdxBadMagic { .. }
        | tdpfed::Error::IdxTruncated { .. }
        | tdpfed::Error::IdxCountMismatch { .. } => EXIT_IO,
    }
}

fn cmd_run(config_path: &PathBuf, out_dir: &PathBuf) -> ExitCode {
    let text = match std::fs::read_to_string(config_path) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_IO, format!("cannot read {}: {e}", config_path.display())),
    };
    let mut cfg = match config::parse_config(&text) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    if let Err(e) = std::fs::create_dir_all(out_dir) {
        return fail(EXIT_IO, format!("cannot create {}: {e}", out_dir.display()));
    }
    // Echo the resolved config before applying the env thread policy.
    if let Err(e) = std::fs::write(out_dir.join("config_resolved.cfg"), config::to_text(&cfg)) {
        return fail(EXIT_IO, e);
    }
    cfg.parallelism = Parallelism::from_env();
    let include_wall = std::env::var("TDPFED_WALL_CLOCK").as_deref() == Ok("1");

    let metrics_path = out_dir.join("metrics.csv");
    let file = match std::fs::File::create(&metrics_path) {
        Ok(f) => f,
        Err(e) => return fail(EXIT_IO, e),
    };
    let mut writer = std::io::BufWriter::new(file);
    if let Err(e) = writeln!(writer, "{METRICS_CSV_HEADER}") {
        return fail(EXIT_IO, e);
    }
    // Rows are flushed as they arrive so interrupted runs keep partial data.
    let mut on_row = |row: &RoundMetrics| -> tdpfed::Result<()> {
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, std::slice::from_ref(row), include_wall)?;
        let body = buf.split(|&b| b == b'\n').nth(1).unwrap_or(&[]).to_vec();
        writer.write_all(&body)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        Ok(())
    };
    let output = match run_with(&cfg, &mut on_row) {
        Ok(o) => o,
        Err(e) => {
            let code = sim_error_code(&e);
            return fail(code, e);
        }
    };
    if let Err(e) = checkpoint::write_checkpoint(&out_dir.join("checkpoint.tdpf"), &output.global) {
        return fail(EXIT_IO, e);
    }
    if let Some(last) = output.metrics.last() {
        println!(
            "completed {} rounds: personalized acc {:.4} (global {:.4}), loss {:.4}",
            cfg.rounds, last.acc_personalized_mean, last.acc_global, last.loss_train_mean
        );
    }
    ExitCode::SUCCESS
}

fn cmd_check_grad(seed: u64, modes: Option<usize>, rank: Option<usize>) -> ExitCode {
    let modes_list: Vec<usize> = modes.map_or_else(|| vec![2, 4], |m| vec![m]);
    let ranks: Vec<usize> = rank.map_or_else(|| vec![1, 2, 3], |r| vec![r]);
    // Test hook: flipping the gradient sign must make the check fail.
    let sign = if std::env::var("TDPFED_CHECKGRAD_SIGN_FLIP").as_deref() == Ok("1") {
        -1.0
    } else {
        1.0
    };
    let cases = match run_suite(&modes_list, &ranks, seed, sign) {
        Ok(c) => c,
        Err(e) => return fail(sim_error_code(&e), e),
    };
    let mut all_ok = true;
    for case in &cases {
        println!(
            "{:<28} max rel err {:.3e}  {}",
            case.name,
            case.max_rel_err,
            if case.passed() { "ok" } else { "FAIL" }
        );
        if !case.passed() {
            all_ok = false;
            for (what, err) in case.failures.iter().take(5) {
                eprintln!("  {what}: rel err {err:.3e} >= {GRADCHECK_TOL:e}");
            }
        }
    }
    if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_NUMERIC)
    }
}

fn cmd_plan_ranks(model: &str, cr: f64) -> ExitCode {
    let Some(preset) = PresetModel::parse(model) else {
        return fail(EXIT_CONFIG, format!("unknown model '{model}' (dnn|vgg8)"));
    };
    if cr <= 0.0 {
        return fail(EXIT_CONFIG, "target compression rate must be > 0");
    }
    println!("{:<8} {:>14} {:>6} {:>12}", "layer", "dimension", "rank", "achieved CR");
    for row in plan_ranks(preset, cr) {
        let dims = match row.kind {
            tdpfed::layers::LayerKind::Linear { i_out, i_in } => format!("{i_in}x{i_out}"),
            tdpfed::layers::LayerKind::Conv { i_d, i_s, i_t } => {
                format!("{i_s}x{i_t}x{i_d}x{i_d}")
            }
        };
        println!("{:<8} {:>14} {:>6} {:>12.3}", row.layer, dims, row.rank, row.achieved_cr);
    }
    ExitCode::SUCCESS
}

fn preset_spec(preset: PresetModel, cr: f64) -> ModelSpec {
    let shapes = preset.layer_shapes();
    let last = shapes.len() - 1;
    let layers = plan_ranks(preset, cr)
        .into_iter()
        .enumerate()
        .map(|(i, row)| LayerSpec {
            kind: row.kind,
            rank: row.rank,
            activation: if i == last { Activation::Softmax } else { Activation::Relu },
        })
        .collect();
    ModelSpec::new(layers).expect("preset specs are valid")
}

fn cmd_export(model: &str, cr: f64, seed: u64, out: &PathBuf) -> ExitCode {
    let Some(preset) = PresetModel::parse(model) else {
        return fail(EXIT_CONFIG, format!("unknown model '{model}' (dnn|vgg8)"));
    };
    if cr <= 0.0 {
        return fail(EXIT_CONFIG, "target compression rate must be > 0");
    }
    let spec = preset_spec(preset, cr);
    let global = init_global(&spec, seed);
    if let Err(e) = checkpoint::write_checkpoint(out, &global) {
        return fail(EXIT_IO, e);
    }
    println!(
        "wrote {} ({} layers, {} factor+bias reals)",
        out.display(),
        global.layers.len(),
        global.payload_reals()
    );
    ExitCode::SUCCESS
}

fn cmd_import(input: &PathBuf, reexport: Option<&PathBuf>) -> ExitCode {
    let model = match checkpoint::read_checkpoint(input) {
        Ok(m) => m,
        Err(e) => return fail(EXIT_IO, e),
    };
    println!("{}: {} layers", input.display(), model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        let (kind, dims) = match layer {
            TensorizedLayer::Linear(l) => ("linear", format!("{}x{}", l.i_out(), l.i_in())),
            TensorizedLayer::Conv(c) => (
                "conv",
                format!("{}x{}x{}x{}", c.window(), c.window(), c.in_channels(), c.out_channels()),
            ),
        };
        println!(
            "  layer {i}: {kind} {dims} rank {} bias {} ({} reals)",
            layer.rank(),
            layer.bias().len(),
            layer.payload_reals()
        );
    }
    if let Some(path) = reexport {
        if let Err(e) = checkpoint::write_checkpoint(path, &model) {
            return fail(EXIT_IO, e);
        }
        println!("re-exported to {}", path.display());
    }
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    match Cli::parse().cmd {
        Cmd::Run { config, out } => cmd_run(&config, &out),
        Cmd::CheckGrad { seed, modes, rank } => cmd_check_grad(seed, modes, rank),
        Cmd::PlanRanks { model, cr } => cmd_plan_ranks(&model, cr),
        Cmd::Export { model, cr, seed, out } => cmd_export(&model, cr, seed, &out),
        Cmd::Import { input, reexport } => cmd_import(&input, reexport.as_ref()),
    }
}
