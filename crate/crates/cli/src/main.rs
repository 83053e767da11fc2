//! `tunnelwave`: dataset generation, training, reconstruction, evaluation,
//! solver validation and image export.

mod exit;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use tunnelwave::dataset::{self, Dataset, DatasetConfig};
use tunnelwave::export;
use tunnelwave::field::FieldImage;
use tunnelwave::metrics;
use tunnelwave::pwe::{self, validation, SourceSpec, TunnelEnvironment};
use tunnelwave::tensor::checkpoint::write_atomic;
use tunnelwave::trainer::{self, TrainConfig, TrainOutput};

use exit::Failure;

#[derive(Parser)]
#[command(name = "tunnelwave", version, about = "Tunnel field simulation and sparse-line reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve random tunnel environments into a dataset file.
    GenerateDataset(GenerateArgs),
    /// Train the generator and discriminator on a dataset.
    Train(TrainArgs),
    /// Reconstruct a full image from one measured line.
    Reconstruct(ReconstructArgs),
    /// Score a checkpoint on a dataset split.
    Evaluate(EvaluateArgs),
    /// Run a solver validation case.
    ValidatePwe(ValidateArgs),
    /// Write an image as a 16-bit graymap and CSV.
    ExportImage(ExportArgs),
}

#[derive(clap::Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    n_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 500.0)]
    length_m: f64,
    #[arg(long, default_value_t = 50.0)]
    height_m: f64,
    /// Range (marching) step in metres.
    #[arg(long, default_value_t = 0.5)]
    dz: f64,
    /// Height step in metres.
    #[arg(long, default_value_t = 0.5)]
    dx: f64,
    #[arg(long, default_value_t = 0.9e9)]
    freq_min: f64,
    #[arg(long, default_value_t = 5.8e9)]
    freq_max: f64,
    #[arg(long, default_value_t = 0.001)]
    sigma_min: f64,
    #[arg(long, default_value_t = 0.1)]
    sigma_max: f64,
    #[arg(long, default_value_t = pwe::DEFAULT_FLOOR_DB, allow_negative_numbers = true)]
    floor_db: f64,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// JSON training configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Comma-separated physics weights; trains one model per value.
    #[arg(long, value_delimiter = ',')]
    gamma_sweep: Option<Vec<f64>>,
}

#[derive(clap::Args)]
struct ReconstructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// CSV holding one row of normalized values.
    #[arg(long)]
    line: PathBuf,
    #[arg(long)]
    row: usize,
    /// Output graymap; a CSV with the same stem is written beside it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    timing: bool,
    /// Also time one solver run of a matching environment.
    #[arg(long)]
    compare_pwe: bool,
    #[arg(long, default_value_t = 2.4e9)]
    freq_hz: f64,
    #[arg(long, default_value_t = 0.01)]
    sigma: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    All,
}

#[derive(clap::Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Val)]
    split: Split,
    /// Random rows per sample for the per-line tables.
    #[arg(long, default_value_t = 3)]
    lines: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Case {
    FreeSpaceBeam,
    Convergence,
    Energy,
}

#[derive(clap::Args)]
struct ValidateArgs {
    #[arg(long, value_enum)]
    case: Case,
    /// JSON report destination; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ExportArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Export the single-line reconstruction from this checkpoint instead of the target.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output graymap; a CSV with the same stem is written beside it.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenerateDataset(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Evaluate(a) => evaluate(a),
        Command::ValidatePwe(a) => validate(a),
        Command::ExportImage(a) => export_image(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}

fn generate(a: GenerateArgs) -> Result<(), Failure> {
    let cfg = DatasetConfig {
        n_samples: a.n_samples,
        seed: a.seed,
        length_m: a.length_m,
        height_m: a.height_m,
        delta_range_m: a.dz,
        delta_height_m: a.dx,
        freq_min_hz: a.freq_min,
        freq_max_hz: a.freq_max,
        sigma_min: a.sigma_min,
        sigma_max: a.sigma_max,
        floor_db: a.floor_db,
        ..DatasetConfig::default()
    };
    let ds = dataset::generate_dataset(&cfg)?;
    dataset::write_dataset(&a.out, &ds)?;
    println!(
        "wrote {} samples of {}x{} to {}",
        ds.len(),
        ds.height,
        ds.width,
        a.out.display()
    );
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig, Failure> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::config(format!("{}: {e}", p.display())))?;
            Ok(TrainConfig::from_json(&text)?)
        }
    }
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(d) = a.data {
        cfg.dataset = Some(d);
    }
    let path = cfg
        .dataset
        .clone()
        .ok_or_else(|| Failure::config("no dataset given (--data or \"dataset\" in the config)"))?;
    let data = dataset::read_dataset(&path)?;
    let out = TrainOutput {
        dir: Some(a.out.clone()),
    };
    if let Some(gammas) = a.gamma_sweep {
        std::fs::create_dir_all(&a.out)?;
        let rows = trainer::gamma_sweep(&cfg, &data, &gammas)?;
        let csv = trainer::gamma_csv(&rows);
        write_atomic(&a.out.join("gamma_sweep.csv"), csv.as_bytes())?;
        print!("{csv}");
        return Ok(());
    }
    let outcome = match &a.resume {
        Some(ckpt) => trainer::resume(&cfg, ckpt, &data, &out)?,
        None => trainer::train(&cfg, &data, &out)?,
    };
    for e in &outcome.epochs {
        let val = e
            .val_rel_error_percent
            .map_or_else(|| "-".to_string(), |v| format!("{v:.3}%"));
        println!(
            "epoch {:>4}  rho {:.4}  G {:.5}  D {:.5}  val {val}",
            e.epoch, e.rho, e.mean_generator_loss, e.mean_discriminator_loss
        );
    }
    println!("checkpoint {}", a.out.join("final.twc").display());
    Ok(())
}

fn csv_sibling(path: &Path) -> PathBuf {
    path.with_extension("csv")
}

fn reconstruct(a: ReconstructArgs) -> Result<(), Failure> {
    let mut state = trainer::load_checkpoint(&a.checkpoint)?;
    let (h, w) = (state.generator.config.height, state.generator.config.width);
    let text = std::fs::read_to_string(&a.line)?;
    let first = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| Failure::data("line file is empty"))?;
    let line = export::parse_csv_row(first)?;
    let sample = dataset::inference_line_input(&line, a.row, h, w)?;
    let start = Instant::now();
    let image = trainer::reconstruct(&mut state.generator, &sample)?;
    let g_secs = start.elapsed().as_secs_f64();
    export::export_image(&image, &a.out, &csv_sibling(&a.out))?;
    println!("wrote {}x{} reconstruction to {}", h, w, a.out.display());
    if a.timing {
        println!("generator_seconds {g_secs:.6}");
    }
    if a.compare_pwe {
        let base = TunnelEnvironment::default();
        let env = TunnelEnvironment {
            length_m: (w - 1) as f64 * base.delta_range_m,
            height_m: (h - 1) as f64 * base.delta_height_m,
            frequency_hz: a.freq_hz,
            sigma_s_per_m: a.sigma,
            ..base
        };
        let src = SourceSpec {
            height_m: env.height_at(a.row.min(h - 1)).clamp(env.delta_height_m, env.height_m - env.delta_height_m),
            beam_waist_m: DatasetConfig::default().beam_waist_m,
            amplitude: 1.0,
        };
        let start = Instant::now();
        pwe::solve(&env, &src)?;
        let p_secs = start.elapsed().as_secs_f64();
        println!("pwe_seconds {p_secs:.6}");
        println!("speedup {:.3e}", p_secs / g_secs);
    }
    Ok(())
}

fn split_indices(data: &Dataset, split: Split, val_fraction: f64) -> Vec<usize> {
    let (train, val) = dataset::split_indices(data.len(), val_fraction);
    match split {
        Split::Train => train,
        Split::Val => val,
        Split::All => (0..data.len()).collect(),
    }
}

fn evaluate(a: EvaluateArgs) -> Result<(), Failure> {
    let mut state = trainer::load_checkpoint(&a.checkpoint)?;
    let data = dataset::read_dataset(&a.data)?;
    if (data.height, data.width) != (state.generator.config.height, state.generator.config.width) {
        return Err(Failure::data("dataset image size differs from the checkpoint"));
    }
    let indices = split_indices(&data, a.split, state.config.val_fraction);
    if indices.is_empty() {
        return Err(Failure::data("the selected split is empty"));
    }
    let (report, _) = trainer::evaluate(&mut state.generator, &data, &indices, a.lines, a.seed)?;
    std::fs::create_dir_all(&a.out)?;
    write_atomic(&a.out.join("eval.csv"), report.to_csv().as_bytes())?;
    write_atomic(&a.out.join("eval.json"), report.to_json().as_bytes())?;
    for (index, lines) in &report.lines {
        let mut csv = String::from("row,rmse,mae\n");
        for l in lines {
            csv.push_str(&format!("{},{:e},{:e}\n", l.row, l.rmse, l.mae));
            println!("sample {index} row {}: {}", l.row, metrics::format_line_rmse("Inc-GAN", l.rmse));
        }
        write_atomic(&a.out.join(format!("lines_{index}.csv")), csv.as_bytes())?;
    }
    println!(
        "samples {}  mae {:.6}  rmse {:.6}  rel_error {:.3}%",
        report.samples.len(),
        report.mae.mean,
        report.rmse.mean,
        report.rel_error_percent.mean
    );
    Ok(())
}

fn validate(a: ValidateArgs) -> Result<(), Failure> {
    let report = match a.case {
        Case::FreeSpaceBeam => validation::validate_free_space_beam()?,
        Case::Convergence => validation::validate_convergence()?,
        Case::Energy => validation::validate_energy()?,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    match &a.out {
        Some(p) => write_atomic(p, json.as_bytes())?,
        None => println!("{json}"),
    }
    println!(
        "{} {}: {} = {:e} ({})",
        if report.passed { "PASS" } else { "FAIL" },
        report.case,
        report.metric,
        report.value,
        report.threshold
    );
    if report.passed {
        Ok(())
    } else {
        Err(Failure::numeric(format!("{} failed", report.case)))
    }
}

fn export_image(a: ExportArgs) -> Result<(), Failure> {
    let data = dataset::read_dataset(&a.data)?;
    let entry = data
        .entries
        .get(a.index)
        .ok_or_else(|| Failure::config(format!("index {} outside 0..{}", a.index, data.len())))?;
    let image: FieldImage = match &a.checkpoint {
        Some(ckpt) => {
            let mut state = trainer::load_checkpoint(ckpt)?;
            trainer::reconstruct(&mut state.generator, &entry.single_line())?
        }
        None => entry.target.clone(),
    };
    export::export_image(&image, &a.out, &csv_sibling(&a.out))?;
    println!("wrote {} and {}", a.out.display(), csv_sibling(&a.out).display());
    Ok(())
}
