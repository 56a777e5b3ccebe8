use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use medseg_core::ablation::{run_ablation, write_table, AblationData, AblationSpec};
use medseg_core::gradcheck::{run_suite, TOLERANCE};
use medseg_core::train::train_with;
use medseg_core::{checkpoint, evaluate, CoreError, PromptMode, TrainConfig};
use medseg_data::io::{read_split, split_dir, write_split};
use medseg_data::{
    generate_overlap_sweep, generate_split, DatasetConfig, SegSample, TEST_SEED_OFFSET, VAL_SEED_OFFSET,
};

/// Seed offset of the overlap-sweep split.
const OVERLAP_SEED_OFFSET: u64 = 3_000_000;
const OVERLAP_LEVELS: [f64; 9] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];

#[derive(Parser)]
#[command(name = "medseg", version, about = "Prior-guided promptable segmentation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test splits and an overlap-sweep split.
    GenData {
        /// Dataset config (`key=value`); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Samples per overlap level in the sweep split; 0 skips it.
        #[arg(long, default_value_t = 50)]
        overlap_per_level: usize,
        /// Generate serially instead of in parallel.
        #[arg(long)]
        serial: bool,
    },
    /// Train a model and write a checkpoint plus `<out>.log.csv`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and write metric reports.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// none, points:<k> or box.
        #[arg(long, default_value = "none")]
        prompt: PromptMode,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Seed of the point-prompt draws.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate every cell of an ablation spec.
    Ablate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run the finite-difference gradient suite.
    CheckGrads {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_split(root: &Path, split: &str) -> Result<Vec<SegSample>, CoreError> {
    Ok(read_split(&split_dir(root, split))?)
}

fn load_optional(root: &Path, split: &str) -> Result<Vec<SegSample>, CoreError> {
    let dir = split_dir(root, split);
    if dir.exists() {
        load_split(root, split)
    } else {
        Ok(Vec::new())
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CoreError> {
    std::fs::write(path, text).map_err(|e| CoreError::io(path, e))
}

fn gen_data(config: Option<&Path>, out: &Path, seed: u64, per_level: usize, serial: bool) -> Result<(), CoreError> {
    let cfg = match config {
        Some(p) => DatasetConfig::load(p)?,
        None => DatasetConfig::default(),
    };
    let parallel = !serial;
    let splits = [
        ("train", seed, cfg.train),
        ("val", seed + VAL_SEED_OFFSET, cfg.val),
        ("test", seed + TEST_SEED_OFFSET, cfg.test),
    ];
    for (name, base, count) in splits {
        let samples = generate_split(&cfg, base, count, parallel)?;
        write_split(&split_dir(out, name), &samples)?;
        println!("{name}: {} samples", samples.len());
    }
    if per_level > 0 {
        let samples = generate_overlap_sweep(&cfg, seed + OVERLAP_SEED_OFFSET, &OVERLAP_LEVELS, per_level)?;
        write_split(&split_dir(out, "overlap"), &samples)?;
        println!("overlap: {} samples", samples.len());
    }
    Ok(())
}

fn train(config: &Path, data: &Path, out: &Path) -> Result<(), CoreError> {
    let cfg = TrainConfig::load(config)?;
    let train = load_split(data, "train")?;
    let val = load_optional(data, "val")?;
    let result = train_with(&cfg, &train, &val, |e| {
        let val = e.val_dice.map_or("-".to_string(), |d| format!("{d:.4}"));
        println!(
            "epoch {:>3}  lr {:.2e}  loss {:.4}  val dice {val}  {:.1}s",
            e.epoch, e.learning_rate, e.train_loss, e.seconds
        );
    })?;
    checkpoint::save(&result.model, out)?;
    let mut log = out.as_os_str().to_owned();
    log.push(".log.csv");
    write_file(Path::new(&log), &result.log.to_csv())?;
    println!("checkpoint {}  fingerprint {}", out.display(), result.model.fingerprint());
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, prompt: PromptMode, report: &Path, split: &str, seed: u64) -> Result<(), CoreError> {
    let model = checkpoint::load(ckpt)?;
    let samples = load_split(data, split)?;
    let out = evaluate(&model, &samples, prompt, seed, Some(report))?;
    let s = &out.summary;
    let hd = s.mean_hd95.map_or("nan".to_string(), |h| format!("{h:.3}"));
    println!("records {}  mean dice {:.4}  mdice {:.4}  mean hd95 {hd}", s.records, s.mean_dice, s.mdice);
    Ok(())
}

fn ablate(spec: &Path, data: &Path, report: &Path, split: &str) -> Result<(), CoreError> {
    let spec = AblationSpec::load(spec)?;
    let train = load_split(data, "train")?;
    let val = load_optional(data, "val")?;
    let test = load_split(data, split)?;
    let rows = run_ablation(&spec, &AblationData { train: &train, val: &val, test: &test }, |cell, e| {
        println!("[{cell}] epoch {:>3}  loss {:.4}", e.epoch, e.train_loss);
    })?;
    write_table(report, &rows)?;
    for r in &rows {
        println!("{:<24} {:<9} mean dice {:.4}", r.cell, r.eval_prompt.to_string(), r.summary.mean_dice);
        let path = report.join(format!("{}.summary.json", r.cell.replace(['/', ' '], "_")));
        let json = serde_json::to_string_pretty(&r.summary).expect("summary serializes");
        write_file(&path, &json)?;
    }
    Ok(())
}

fn check_grads(instances: usize, seed: u64) -> bool {
    let mut ok = true;
    for r in run_suite(instances, seed) {
        let pass = r.passes(TOLERANCE);
        ok &= pass;
        println!(
            "{:<24} {} instances  {:>6} partials  max rel err {:.3e}  {}",
            r.name,
            r.instances,
            r.checked,
            r.max_rel_err,
            if pass { "ok" } else { "FAIL" }
        );
    }
    ok
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, out, seed, overlap_per_level, serial } => {
            gen_data(config.as_deref(), &out, seed, overlap_per_level, serial)
        }
        Command::Train { config, data, out } => train(&config, &data, &out),
        Command::Eval { ckpt, data, prompt, report, split, seed } => eval(&ckpt, &data, prompt, &report, &split, seed),
        Command::Ablate { spec, data, report, split } => ablate(&spec, &data, &report, &split),
        Command::CheckGrads { instances, seed } => {
            return if check_grads(instances, seed) { ExitCode::SUCCESS } else { ExitCode::FAILURE };
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
