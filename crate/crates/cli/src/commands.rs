//! The six subcommands: data generation, training, evaluation, parameter
//! audits, gradient checks, and the multi-variant comparison report.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use pfseg_core::dataset::image_io::write_ppm;
use pfseg_core::dataset::{
    export_dataset, image_to_rgb_bytes, labels_to_rgb, CamvidDataset, ManifestDataset,
};
use pfseg_core::{
    build_model, default_class_table, evaluate, finetune_from, generate_synthetic,
    load_checkpoint, log_to_csv, predict_pair, save_checkpoint, train_with_progress,
    CheckpointData, ClassTable, Dataset, MetricsReport, Model, TrainLogRow, Variant,
};

use crate::config::{self, Overrides, Preset, Settings};
use crate::ops_check;
use crate::CliError;

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Scene-generation seed
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Number of scenes to emit
    #[arg(long, default_value_t = 8)]
    pub scenes: usize,
    /// Frame extents as WxH
    #[arg(long, default_value = "64x64")]
    pub size: String,
    /// Frames between the prior and the current frame
    #[arg(long, default_value_t = 3)]
    pub offset: u32,
    /// Output directory (created if missing)
    #[arg(long)]
    pub out: PathBuf,
}

pub fn gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    let (w, h) = config::parse_size(&args.size)?;
    let items = generate_synthetic(args.seed, args.scenes, h, w, args.offset)?;
    let table = default_class_table();
    let manifest = export_dataset(&items, &table, &args.out)?;
    println!("wrote {} items to {}", items.len(), manifest.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// shared plumbing
// ---------------------------------------------------------------------------

/// How `--data` paths are interpreted.
fn open_dataset(path: &Path, settings: &Settings) -> Result<Box<dyn Dataset>, CliError> {
    let table = default_class_table();
    if path.join("images").is_dir() && path.join("labels").is_dir() {
        let ds = CamvidDataset::open(path, settings.train.prior_offset, table)?;
        return Ok(Box::new(ds));
    }
    Ok(Box::new(ManifestDataset::open(path, table)?))
}

fn parse_variant(token: &str) -> Result<Variant, CliError> {
    Variant::parse(token).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown variant `{token}` (expected baseline|stacked|embed|decoder)"
        ))
    })
}

fn progress_printer(row: &TrainLogRow) {
    println!(
        "step {:>5}  phase {}  loss {:.4}  lr {:.4}",
        row.step, row.phase, row.loss, row.lr
    );
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Model variant: baseline|stacked|embed|decoder
    #[arg(long)]
    pub variant: String,
    /// Dataset directory (exported manifest, or CamVid-style images/+labels/)
    #[arg(long)]
    pub data: PathBuf,
    /// key=value config file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint whose weights seed this model (cross-variant transfer)
    #[arg(long)]
    pub init_from: Option<PathBuf>,
    /// Where the trained checkpoint is written
    #[arg(long)]
    pub out_ckpt: PathBuf,
    /// Where the loss log CSV is written (default: alongside the checkpoint)
    #[arg(long)]
    pub out_log: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let settings = config::resolve(args.config.as_deref(), &args.overrides)?;
    let variant = parse_variant(&args.variant)?;
    let spec = settings.preset.spec(variant);
    let data = open_dataset(&args.data, &settings)?;

    let mut model: Model<f32> = match &args.init_from {
        Some(donor_path) => {
            let donor = load_checkpoint::<f32>(donor_path)?.into_model()?;
            let (model, report) = finetune_from(&donor, &spec, settings.train.seed)?;
            println!("init from {}:", donor_path.display());
            for (label, names) in [
                ("copied", &report.copied),
                ("widened", &report.widened),
                ("fresh", &report.fresh),
                ("dropped", &report.dropped),
            ] {
                if !names.is_empty() {
                    println!("  {label} ({}): {}", names.len(), names.join(" "));
                }
            }
            model
        }
        None => build_model(&spec, settings.train.seed)?,
    };

    let log = train_with_progress(&mut model, data.as_ref(), &settings.train, &mut |row| {
        progress_printer(row)
    })?;

    let ckpt = CheckpointData {
        spec: model.spec().clone(),
        params: model.params().clone(),
        velocity: Default::default(),
        step: log.len() as u64,
        rng: None,
    };
    save_checkpoint(&ckpt, &args.out_ckpt)?;
    let log_path = args
        .out_log
        .clone()
        .unwrap_or_else(|| args.out_ckpt.with_extension("log.csv"));
    std::fs::write(&log_path, log_to_csv(&log))
        .map_err(|e| CliError::Data(format!("{}: {e}", log_path.display())))?;
    let final_loss = log.last().map(|r| r.loss);
    println!(
        "trained {} ({} steps, final loss {}) -> {}",
        variant.name(),
        log.len(),
        final_loss.map_or("n/a".into(), |l| format!("{l:.4}")),
        args.out_ckpt.display()
    );
    println!("loss log -> {}", log_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset directory (exported manifest, or CamVid-style images/+labels/)
    #[arg(long)]
    pub data: PathBuf,
    /// key=value config file (only data-related keys matter here)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Write the metrics table here as CSV (otherwise printed in full)
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
    /// Render per-item input/ground-truth/prediction PPM triples here
    #[arg(long)]
    pub render_dir: Option<PathBuf>,
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let settings = config::resolve(args.config.as_deref(), &Overrides::default())?;
    let table = default_class_table();
    let model: Model<f32> = load_checkpoint::<f32>(&args.ckpt)?.into_model()?;
    let data = open_dataset(&args.data, &settings)?;
    let report = evaluate(&model, data.as_ref(), &table)?;

    let csv = report.to_csv();
    match &args.out_csv {
        Some(path) => {
            std::fs::write(path, &csv)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            print_summary(&report);
            println!("metrics -> {}", path.display());
        }
        None => print!("{csv}"),
    }

    if let Some(dir) = &args.render_dir {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        for i in 0..data.len() {
            let pair = data.get(i)?;
            let (h, w) = pair.dims();
            let pred = predict_pair(&model, &pair, table.len())?;
            write_ppm(
                &dir.join(format!("item-{i}-input.ppm")),
                w,
                h,
                &image_to_rgb_bytes(&pair.current),
            )?;
            write_ppm(
                &dir.join(format!("item-{i}-gt.ppm")),
                w,
                h,
                &labels_to_rgb(&pair.labels, &table),
            )?;
            write_ppm(
                &dir.join(format!("item-{i}-pred.ppm")),
                w,
                h,
                &labels_to_rgb(&pred, &table),
            )?;
        }
        println!("rendered {} items -> {}", data.len(), dir.display());
    }
    Ok(())
}

fn print_summary(report: &MetricsReport) {
    fn pct(v: Option<f64>) -> String {
        v.map_or("n/a".into(), |x| format!("{:.2}%", 100.0 * x))
    }
    println!(
        "global {}  class-avg {}  mean-IoU {}  static {}  dynamic {}",
        pct(Some(report.global_accuracy)),
        pct(Some(report.class_accuracy)),
        pct(Some(report.mean_iou)),
        pct(report.static_accuracy),
        pct(report.dynamic_accuracy),
    );
}

// ---------------------------------------------------------------------------
// params
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// Model variant: baseline|stacked|embed|decoder
    #[arg(long, default_value = "baseline")]
    pub variant: String,
    /// Print all four variants plus deltas against the baseline
    #[arg(long)]
    pub all: bool,
    /// Model size: compact|full
    #[arg(long, default_value = "full")]
    pub preset: String,
}

pub fn params(args: &ParamsArgs) -> Result<(), CliError> {
    let preset = Preset::parse(&args.preset)
        .ok_or_else(|| CliError::Usage(format!("--preset `{}` is not compact|full", args.preset)))?;
    if args.all {
        let baseline = preset.spec(Variant::Baseline).count_params();
        println!("{:<10} {:>12} {:>12}", "variant", "params", "vs-baseline");
        for variant in [
            Variant::Baseline,
            Variant::StackedPrior,
            Variant::EmbeddingPrior,
            Variant::DecoderPrior,
        ] {
            let total = preset.spec(variant).count_params();
            println!(
                "{:<10} {:>12} {:>+12}",
                variant.name(),
                total,
                total as i64 - baseline as i64
            );
        }
        return Ok(());
    }
    let variant = parse_variant(&args.variant)?;
    let spec = preset.spec(variant);
    println!("{:<22} {:<18} {:>10}", "tensor", "shape", "params");
    for (name, shape) in spec.param_shapes() {
        let count: usize = shape.iter().product();
        println!("{:<22} {:<18} {:>10}", name, format!("{shape:?}"), count);
    }
    println!("{:<22} {:<18} {:>10}", "total", "", spec.count_params());
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Op to check, or `all`
    #[arg(long, default_value = "all")]
    pub op: String,
    /// Random trials per op
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    /// Base seed for the trial draws
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    let results = ops_check::run(&args.op, args.trials, args.seed)?;
    let mut failed = Vec::new();
    for (name, worst) in &results {
        let verdict = if *worst < ops_check::TOLERANCE { "ok" } else { "FAIL" };
        println!("{name:<10} max rel err {worst:.3e}  {verdict}");
        if *worst >= ops_check::TOLERANCE {
            failed.push(*name);
        }
    }
    if !failed.is_empty() {
        return Err(CliError::Numeric(format!(
            "gradient check failed for {} (tolerance {:.0e})",
            failed.join(", "),
            ops_check::TOLERANCE
        )));
    }
    println!(
        "{} op(s) within {:.0e} over {} trials",
        results.len(),
        ops_check::TOLERANCE,
        args.trials
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Variants to race, comma-separated
    #[arg(long, default_value = "baseline,stacked,embed,decoder")]
    pub variants: Vec<String>,
    /// Training seeds, one run per (variant, seed)
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
    pub seeds: Vec<u64>,
    /// key=value config file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root holding train/ and test/ exports; omitted = generate
    /// synthetic splits from the config
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Summary CSV destination
    #[arg(long, default_value = "compare.csv")]
    pub out_csv: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

struct Cell {
    global: f64,
    class: f64,
    iou: f64,
    stat: Option<f64>,
    dyn_: Option<f64>,
}

pub fn compare(args: &CompareArgs) -> Result<(), CliError> {
    let settings = config::resolve(args.config.as_deref(), &args.overrides)?;
    let variants = config::parse_variants(&args.variants)?;
    if args.seeds.is_empty() {
        return Err(CliError::Usage("at least one seed is required".into()));
    }
    let table = default_class_table();

    let (train_set, test_set): (Box<dyn Dataset>, Box<dyn Dataset>) = match &args.data {
        Some(root) => (
            open_dataset(&root.join("train"), &settings)?,
            open_dataset(&root.join("test"), &settings)?,
        ),
        None => {
            let h = settings.height;
            let w = settings.width;
            let off = settings.train.prior_offset;
            println!(
                "generating benchmark: {} train / {} test scenes, {w}x{h}, offset {off}, {} model",
                settings.scenes_train,
                settings.scenes_test,
                settings.preset.name()
            );
            (
                Box::new(pfseg_core::MemoryDataset::new(generate_synthetic(
                    settings.data_seed,
                    settings.scenes_train,
                    h,
                    w,
                    off,
                )?)),
                Box::new(pfseg_core::MemoryDataset::new(generate_synthetic(
                    settings.data_seed + 1,
                    settings.scenes_test,
                    h,
                    w,
                    off,
                )?)),
            )
        }
    };

    let mut csv = String::from(
        "variant,seeds,class_mean,class_sd,global_mean,global_sd,iou_mean,iou_sd,\
         static_mean,static_sd,dynamic_mean,dynamic_sd\n",
    );
    let mut table_lines = vec![format!(
        "{:<10} {:>7} {:>16} {:>16} {:>16} {:>16} {:>16}",
        "variant", "seeds", "class", "global", "iou", "static", "dynamic"
    )];
    for &variant in &variants {
        let mut cells = Vec::with_capacity(args.seeds.len());
        for &seed in &args.seeds {
            let cell = run_cell(variant, seed, &settings, train_set.as_ref(), test_set.as_ref(), &table)?;
            cells.push(cell);
        }
        let class = stats(cells.iter().map(|c| c.class));
        let global = stats(cells.iter().map(|c| c.global));
        let iou = stats(cells.iter().map(|c| c.iou));
        let stat = opt_stats(cells.iter().map(|c| c.stat));
        let dyn_ = opt_stats(cells.iter().map(|c| c.dyn_));
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            variant.name(),
            args.seeds.len(),
            fmt(class.map(|s| s.0)),
            fmt(class.map(|s| s.1)),
            fmt(global.map(|s| s.0)),
            fmt(global.map(|s| s.1)),
            fmt(iou.map(|s| s.0)),
            fmt(iou.map(|s| s.1)),
            fmt(stat.map(|s| s.0)),
            fmt(stat.map(|s| s.1)),
            fmt(dyn_.map(|s| s.0)),
            fmt(dyn_.map(|s| s.1)),
        )
        .expect("string write cannot fail");
        table_lines.push(format!(
            "{:<10} {:>7} {:>16} {:>16} {:>16} {:>16} {:>16}",
            variant.name(),
            args.seeds.len(),
            mean_sd(class),
            mean_sd(global),
            mean_sd(iou),
            mean_sd(stat),
            mean_sd(dyn_),
        ));
    }
    println!();
    for line in &table_lines {
        println!("{line}");
    }
    std::fs::write(&args.out_csv, &csv)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.out_csv.display())))?;
    println!("summary -> {}", args.out_csv.display());
    Ok(())
}

fn run_cell(
    variant: Variant,
    seed: u64,
    settings: &Settings,
    train_set: &dyn Dataset,
    test_set: &dyn Dataset,
    table: &ClassTable,
) -> Result<Cell, CliError> {
    let spec = settings.preset.spec(variant);
    let mut model: Model<f32> = build_model(&spec, seed)?;
    let mut cfg = settings.train.clone();
    cfg.seed = seed;
    let log = pfseg_core::train(&mut model, train_set, &cfg)?;
    let report = evaluate(&model, test_set, table)?;
    println!(
        "  {} seed {}: final loss {:.4}, test global {:.4}, dynamic {}",
        variant.name(),
        seed,
        log.last().map_or(f64::NAN, |r| r.loss),
        report.global_accuracy,
        report
            .dynamic_accuracy
            .map_or("n/a".into(), |v| format!("{v:.4}")),
    );
    Ok(Cell {
        global: report.global_accuracy,
        class: report.class_accuracy,
        iou: report.mean_iou,
        stat: report.static_accuracy,
        dyn_: report.dynamic_accuracy,
    })
}

/// Mean and sample standard deviation (0 for a single value).
fn stats(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some((mean, sd))
}

/// Like [`stats`], but absent whenever any cell lacks the metric.
fn opt_stats(values: impl Iterator<Item = Option<f64>>) -> Option<(f64, f64)> {
    let v: Option<Vec<f64>> = values.collect();
    stats(v?.into_iter())
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn mean_sd(v: Option<(f64, f64)>) -> String {
    v.map_or("n/a".into(), |(m, s)| format!("{m:.4}±{s:.4}"))
}
