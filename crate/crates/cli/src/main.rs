use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use modal_emu_core::data::{load_sample, load_split, write_dataset, write_pnm, DatasetSpec, SceneSpec};
use modal_emu_core::trainer::{
    ablation_csv, ablation_text, alignment_probe, evaluate, load_for_inference, load_model, run_ablation,
    AblationGrid, Checkpoint, TrainConfig, Trainer,
};
use modal_emu_core::{Error, Tensor};

/// Multimodal crowd counting with modality emulation.
#[derive(Parser)]
#[command(name = "modal-emu", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic RGB/aux crowd dataset.
    GenData(GenData),
    /// Train a model from a JSON config.
    Train(Train),
    /// Evaluate a checkpoint on one split.
    Eval(Eval),
    /// Train and evaluate every row of an ablation grid.
    Ablate(Ablate),
    /// Histogram of relative L1 distance between real and emulated features.
    Probe(Probe),
    /// Write a predicted density map as 16-bit PGM plus a JSON sidecar.
    ExportDensity(ExportDensity),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    train: usize,
    #[arg(long)]
    val: usize,
    #[arg(long)]
    test: usize,
    /// Image size as HxW.
    #[arg(long, default_value = "64x64")]
    size: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-scene illumination range as a,b.
    #[arg(long, default_value = "0,1")]
    illumination_range: String,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Also write metrics.csv here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluate the model with its emulation parts loaded.
    #[arg(long)]
    full: bool,
}

#[derive(Args)]
struct Ablate {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct Probe {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 0.05)]
    bin: f64,
    /// Also write probe.csv here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportDensity {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    sample: PathBuf,
    /// Output PGM; the sidecar is written next to it with a .json extension.
    #[arg(long)]
    out: PathBuf,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Numeric(_) => 3,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn runtime(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: 3,
        message: format!("{}: {e}", path.display()),
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Probe(a) => probe(a),
        Command::ExportDensity(a) => export_density(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn prepare_out(dir: &Path, force: bool) -> Outcome {
    if let Ok(mut entries) = fs::read_dir(dir) {
        if entries.next().is_some() && !force {
            return Err(usage(format!(
                "output directory {} is not empty (pass --force to write into it anyway)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| runtime(dir, e))
}

fn write(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| runtime(path, e))
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), Failure> {
    let bad = || usage(format!("--size must look like HxW, got `{s}`"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let (h, w): (usize, usize) = (h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?);
    if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
        return Err(usage(format!("--size {h}x{w}: both sides must be positive multiples of 8")));
    }
    Ok((h, w))
}

fn parse_range(s: &str) -> std::result::Result<(f64, f64), Failure> {
    let bad = || usage(format!("--illumination-range must look like a,b, got `{s}`"));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn gen_data(a: GenData) -> Outcome {
    let (height, width) = parse_size(&a.size)?;
    let spec = DatasetSpec {
        train: a.train,
        val: a.val,
        test: a.test,
        scene: SceneSpec {
            height,
            width,
            ..SceneSpec::default()
        },
        illumination_range: parse_range(&a.illumination_range)?,
        seed: a.seed,
    };
    prepare_out(&a.out, a.force)?;
    for (split, n) in write_dataset(&a.out, &spec)? {
        println!("{split}: {n}");
    }
    Ok(())
}

fn read_text(path: &Path) -> std::result::Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn train(a: Train) -> Outcome {
    let cfg = TrainConfig::from_json(&read_text(&a.config)?)?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            if (TrainConfig { epochs: cfg.epochs, ..ckpt.config.clone() }) != cfg {
                return Err(usage(format!("{} was written with a different config", p.display())));
            }
            let mut t = Trainer::from_checkpoint(&ckpt)?;
            t.config.epochs = cfg.epochs;
            fs::create_dir_all(&a.out).map_err(|e| runtime(&a.out, e))?;
            t
        }
        None => {
            prepare_out(&a.out, a.force)?;
            Trainer::new(cfg)?
        }
    };
    let train = load_split(&a.data, "train")?;
    let val = load_split(&a.data, "val").unwrap_or_default();
    write(&a.out.join("config.json"), &trainer.config.to_json())?;
    for log in trainer.fit(&train, &val, Some(&a.out))? {
        println!("{}", log.csv_row());
    }
    if val.is_empty() {
        return Ok(());
    }
    let table = evaluate(&trainer.best_model()?, &val, trainer.config.stride)?.table;
    print!("{}", table.to_text());
    Ok(())
}

fn eval(a: Eval) -> Outcome {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let model = if a.full { load_model(&ckpt)? } else { load_for_inference(&ckpt)? };
    let samples = load_split(&a.data, &a.split)?;
    let table = evaluate(&model, &samples, ckpt.config.stride)?.table;
    print!("{}", table.to_text());
    if let Some(dir) = a.out {
        fs::create_dir_all(&dir).map_err(|e| runtime(&dir, e))?;
        write(&dir.join("metrics.csv"), &table.to_csv())?;
    }
    Ok(())
}

fn ablate(a: Ablate) -> Outcome {
    let grid = AblationGrid::from_json(&read_text(&a.grid)?)?;
    let train = load_split(&a.data, "train")?;
    let val = load_split(&a.data, "val").unwrap_or_default();
    let test = load_split(&a.data, "test")?;
    prepare_out(&a.out, a.force)?;
    let rows = run_ablation(&grid, &train, &val, &test, |r| {
        eprintln!("{}: GAME(0) {:.4}", r.name, r.table.game[0]);
    })?;
    let text = ablation_text(&rows);
    print!("{text}");
    write(&a.out.join("ablation.txt"), &text)?;
    write(&a.out.join("ablation.csv"), &ablation_csv(&rows))
}

fn probe(a: Probe) -> Outcome {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let model = load_model(&ckpt)?;
    let samples = load_split(&a.data, &a.split)?;
    let probe = alignment_probe(&model, &samples, a.bin)?;
    print!("{}", probe.to_text());
    if let Some(dir) = a.out {
        fs::create_dir_all(&dir).map_err(|e| runtime(&dir, e))?;
        write(&dir.join("probe.csv"), &probe.to_csv())?;
    }
    Ok(())
}

fn export_density(a: ExportDensity) -> Outcome {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let model = load_for_inference(&ckpt)?;
    let sample = load_sample(&a.sample)?;
    let eval = evaluate(&model, std::slice::from_ref(&sample), ckpt.config.stride)?;
    let density = &eval.records[0].density;
    let count = density.sum();
    let peak = density.data().iter().cloned().fold(0.0, f64::max);
    let [_, h, w] = density.shape() else {
        return Err(usage("density map is not [1, H, W]"));
    };
    let scaled = Tensor::new(
        vec![1, *h, *w],
        density.data().iter().map(|&v| if peak > 0.0 { v.max(0.0) / peak } else { 0.0 }).collect(),
    )?;
    write_pnm(&a.out, &scaled)?;
    let sidecar = serde_json::json!({
        "sample": sample.id,
        "count": count,
        "max": peak,
        "height": h,
        "width": w,
        "annotated": sample.count(),
    });
    let json = serde_json::to_string_pretty(&sidecar).expect("json value serialises");
    write(&a.out.with_extension("json"), &json)?;
    println!("{}: predicted count {count:.4}", sample.id);
    Ok(())
}
