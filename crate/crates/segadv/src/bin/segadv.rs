//! Command-line surface of the attack/defense toolkit.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use segadv::attacks::{
    craft_uap, fff_uap, AttackError, FffConfig, NormP, Perturbation, UapConfig,
};
use segadv::defenses::{
    build_patch_db, defend, parse_pipeline, DefenseError, FilteringH, NlmConfig, PatchDatabase,
};
use segadv::harness::{
    emit_report, generate_toy_dataset, load_dataset, load_split, run_experiment, save_png,
    AttackKind, ExperimentConfig, HarnessError, KeyValueConfig, LambdaPolicy, ToyDatasetSpec,
};
use segadv::harness::{summary_csv, ResultTable, Row};
use segadv::metrics::MetricError;
use segadv::segnet::{ModelError, SegModel, TrainConfig};
use segadv::tensor::TensorError;
use segadv::types::Image;

#[derive(Parser)]
#[command(name = "segadv", about = "Adversarial attacks and defenses on a built-in segmentation net", disable_help_subcommand = true)]
struct Cli {
    /// Seed for all randomized stages.
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
    /// Optional key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output path (file or directory, subcommand-dependent).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural toy dataset.
    GenData(GenDataArgs),
    /// Train the segmentation model on a dataset.
    Train(TrainArgs),
    /// Attack a validation split and save the adversarial images.
    Attack(AttackArgs),
    /// Craft a universal perturbation from training images.
    CraftUap(CraftUapArgs),
    /// Craft a data-free universal perturbation.
    Fff(FffArgs),
    /// Build a quilting patch database from clean training images.
    BuildQuiltDb(BuildQuiltDbArgs),
    /// Run a defense pipeline over a PNG image.
    Defend(DefendArgs),
    /// Run an epsilon-sweep experiment and write results.csv/summary.csv.
    Eval(EvalArgs),
    /// Recompute summary.csv from an existing results.csv and print it.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Images in the training split.
    #[arg(long, default_value_t = 64)]
    train_count: usize,
    /// Images in the validation split.
    #[arg(long, default_value_t = 64)]
    val_count: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (train/ and val/ inside).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    learning_rate: f64,
    /// FGSM step size for adversarial training batches.
    #[arg(long)]
    adv_lambda: Option<f64>,
    /// Fraction of each batch replaced by adversarial examples.
    #[arg(long, default_value_t = 0.0)]
    adv_mix: f64,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    model: PathBuf,
    /// Split directory of *_img.png / *_lbl.png pairs.
    #[arg(long)]
    data: PathBuf,
    /// fgsm | llcm | ssmm | dnnm
    #[arg(long)]
    attack: String,
    #[arg(long)]
    epsilon: f64,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Objective class id for dnnm.
    #[arg(long)]
    objective: Option<u8>,
}

#[derive(Args)]
struct CraftUapArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 5)]
    max_passes: usize,
    /// Images used for crafting; the rest of the split measures holdout.
    #[arg(long, default_value_t = 32)]
    train_images: usize,
}

#[derive(Args)]
struct FffArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 40)]
    steps: usize,
    #[arg(long, default_value_t = 0.5)]
    step_size: f64,
}

#[derive(Args)]
struct BuildQuiltDbArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 5)]
    patch_size: usize,
    #[arg(long, default_value_t = 50000)]
    count: usize,
}

#[derive(Args)]
struct DefendArgs {
    /// Input PNG image.
    #[arg(long)]
    input: PathBuf,
    /// '+'-separated stages, e.g. nlm+quilt.
    #[arg(long)]
    pipeline: String,
    #[arg(long)]
    quilt_db: Option<PathBuf>,
    /// Explicit NLM filtering strength (default: 2.15 * noise estimate).
    #[arg(long)]
    nlm_h: Option<f64>,
    #[arg(long, default_value_t = 9)]
    nlm_window: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// fgsm | llcm | ssmm | dnnm | uap | fff
    #[arg(long)]
    attack: String,
    /// Comma-separated strictly increasing epsilon sweep.
    #[arg(long, default_value = "2,4,8,16")]
    sweep: String,
    /// Fixed step size; omitted = lambda equals epsilon.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    objective: Option<u8>,
    /// Perturbation file for uap/fff attacks.
    #[arg(long)]
    perturbation: Option<PathBuf>,
    /// Comma-separated pipelines, each '+'-separated, e.g. nlm,quilt,nlm+quilt.
    #[arg(long)]
    pipelines: Option<String>,
    #[arg(long)]
    quilt_db: Option<PathBuf>,
    #[arg(long)]
    nlm_h: Option<f64>,
    /// Record wall-clock times (off keeps reruns byte-identical).
    #[arg(long, default_value_t = false)]
    timing: bool,
    /// Leading images rendered as mask panels per epsilon.
    #[arg(long, default_value_t = 0)]
    panels: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory containing results.csv.
    #[arg(long)]
    dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are successful exits; real parse errors are usage errors
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 = usage error, 2 = data error, 3 = numerical failure.
fn exit_code(err: &HarnessError) -> u8 {
    match err {
        HarnessError::Config(_) => 1,
        HarnessError::Attack(AttackError::Config(_) | AttackError::DegenerateStep(_)) => 1,
        HarnessError::Defense(DefenseError::Config(_)) => 1,
        HarnessError::Attack(AttackError::Tensor(t)) | HarnessError::Model(ModelError::Tensor(t)) => {
            tensor_code(t)
        }
        HarnessError::Attack(AttackError::BudgetViolation { .. } | AttackError::DeadNetwork) => 3,
        HarnessError::Metric(MetricError::Empty | MetricError::ZeroCleanMiou) => 3,
        _ => 2,
    }
}

fn tensor_code(t: &TensorError) -> u8 {
    match t {
        TensorError::NonFinite(_) => 3,
        _ => 2,
    }
}

fn out_path(cli_out: &Option<PathBuf>, default: &str) -> PathBuf {
    cli_out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn load_model(path: &Path) -> Result<SegModel, HarnessError> {
    Ok(SegModel::load(path)?)
}

fn load_png_image(path: &Path) -> Result<Image, HarnessError> {
    let rgb = image::open(path)
        .map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Ok(Image::new(h, w, 3, rgb.into_raw()))
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let file_cfg = match &cli.config {
        Some(path) => KeyValueConfig::load(path)?,
        None => KeyValueConfig::default(),
    };
    match &cli.command {
        Command::GenData(args) => {
            let spec = ToyDatasetSpec {
                train_count: file_cfg.get_parsed("train_count")?.unwrap_or(args.train_count),
                val_count: file_cfg.get_parsed("val_count")?.unwrap_or(args.val_count),
                noise_sigma: file_cfg
                    .get_parsed("noise_sigma")?
                    .unwrap_or(ToyDatasetSpec::default().noise_sigma),
                seed: cli.seed,
                ..ToyDatasetSpec::default()
            };
            let dir = out_path(&cli.out, "dataset");
            generate_toy_dataset(&spec, &dir)?;
            println!(
                "wrote {} train + {} val scenes to {}",
                spec.train_count,
                spec.val_count,
                dir.display()
            );
            Ok(())
        }
        Command::Train(args) => {
            let ds = load_dataset(&args.data)?;
            let first = ds
                .train
                .first()
                .ok_or_else(|| HarnessError::Data("empty training split".into()))?;
            let mut model = SegModel::new(
                first.image.height,
                first.image.width,
                segadv::harness::N_CLASSES,
                cli.seed,
            );
            let cfg = TrainConfig {
                epochs: file_cfg.get_parsed("epochs")?.unwrap_or(args.epochs),
                batch_size: file_cfg.get_parsed("batch_size")?.unwrap_or(args.batch_size),
                learning_rate: file_cfg.get_parsed("learning_rate")?.unwrap_or(args.learning_rate),
                seed: cli.seed,
            };
            let trace = if args.adv_mix > 0.0 {
                let lambda = args.adv_lambda.ok_or_else(|| {
                    HarnessError::Config("--adv-lambda is required when --adv-mix > 0".into())
                })?;
                model.adversarial_train(&ds.train, &cfg, lambda, args.adv_mix)?
            } else {
                model.train(&ds.train, &cfg)?
            };
            let path = out_path(&cli.out, "model.segadv");
            model.save(&path)?;
            println!(
                "trained {} epochs, final loss {:.4}, saved to {}",
                trace.len(),
                trace.last().unwrap(),
                path.display()
            );
            Ok(())
        }
        Command::Attack(args) => {
            let model = load_model(&args.model)?;
            let samples = load_split(&args.data)?;
            let attack = parse_attack_kind(&args.attack, args.objective, None)?;
            let mut cfg = ExperimentConfig::new("attack", attack, vec![args.epsilon]);
            cfg.lambda = match args.lambda {
                Some(l) => LambdaPolicy::Fixed(l),
                None => LambdaPolicy::EqualsEpsilon,
            };
            cfg.iterations = args.iterations;
            let dir = out_path(&cli.out, "attacked");
            std::fs::create_dir_all(&dir)?;
            for (i, sample) in samples.iter().enumerate() {
                let adv = segadv::harness::experiment::craft_one(
                    &model, &samples, i, &cfg, args.epsilon,
                )?;
                save_png(&adv, &dir.join(format!("{i:04}_adv.png")))?;
                let _ = sample;
            }
            println!("wrote {} adversarial images to {}", samples.len(), dir.display());
            Ok(())
        }
        Command::CraftUap(args) => {
            let model = load_model(&args.model)?;
            let samples = load_split(&args.data)?;
            if samples.len() <= args.train_images {
                return Err(HarnessError::Data(format!(
                    "split has {} images; need more than --train-images {}",
                    samples.len(),
                    args.train_images
                )));
            }
            let images: Vec<Image> = samples.iter().map(|s| s.image.clone()).collect();
            let (train, holdout) = images.split_at(args.train_images);
            let cfg = UapConfig {
                epsilon: args.epsilon,
                max_passes: args.max_passes,
                ..UapConfig::default()
            };
            let result = craft_uap(&model, train, holdout, &cfg)?;
            let path = out_path(&cli.out, "uap.segadvr");
            result.perturbation.save(&path)?;
            println!(
                "fooled {:.0}% train / {:.0}% holdout after {} passes; saved to {}",
                100.0 * result.fooled_fraction_train,
                100.0 * result.fooled_fraction_holdout,
                result.passes,
                path.display()
            );
            Ok(())
        }
        Command::Fff(args) => {
            let model = load_model(&args.model)?;
            let cfg = FffConfig {
                epsilon: args.epsilon,
                steps: args.steps,
                step_size: args.step_size,
                seed: cli.seed,
            };
            let result = fff_uap(&model, &cfg)?;
            let path = out_path(&cli.out, "fff.segadvr");
            result.perturbation.save(&path)?;
            println!(
                "objective {:.3} -> {:.3} over {} steps; saved to {}",
                result.loss_trace.first().unwrap(),
                result.loss_trace.last().unwrap(),
                args.steps,
                path.display()
            );
            Ok(())
        }
        Command::BuildQuiltDb(args) => {
            let samples = load_split(&args.data)?;
            let images: Vec<Image> = samples.into_iter().map(|s| s.image).collect();
            let db = build_patch_db(&images, args.patch_size, args.patch_size, args.count, cli.seed)?;
            let path = out_path(&cli.out, "patches.segadvpd");
            db.save(&path)?;
            println!("saved {} patches to {}", db.count(), path.display());
            Ok(())
        }
        Command::Defend(args) => {
            let image = load_png_image(&args.input)?;
            let pipeline = parse_pipeline(&args.pipeline)?;
            let db = args.quilt_db.as_deref().map(PatchDatabase::load).transpose()?;
            let nlm = NlmConfig {
                window_size: args.nlm_window,
                filtering_h: args.nlm_h.map_or(FilteringH::Auto, FilteringH::Fixed),
                ..NlmConfig::default()
            };
            let defended = defend(&image, &pipeline, &nlm, db.as_ref())?;
            let path = out_path(&cli.out, "defended.png");
            save_png(&defended, &path)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Eval(args) => {
            let model = load_model(&args.model)?;
            let samples = load_split(&args.data)?;
            let pert = args.perturbation.as_deref().map(Perturbation::load).transpose()?;
            let attack = parse_attack_kind(&args.attack, args.objective, pert)?;
            let sweep: Vec<f64> = args
                .sweep
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|e| HarnessError::Config(format!("bad sweep value: {e}")))
                })
                .collect::<Result<_, _>>()?;
            let sweep = match &attack {
                AttackKind::Universal { perturbation, .. } => vec![perturbation.epsilon],
                _ => sweep,
            };
            let mut cfg = ExperimentConfig::new("val", attack, sweep);
            cfg.lambda = match args.lambda {
                Some(l) => LambdaPolicy::Fixed(l),
                None => LambdaPolicy::EqualsEpsilon,
            };
            cfg.iterations = args.iterations;
            if let Some(p) = &args.pipelines {
                cfg.pipelines = p
                    .split(',')
                    .map(|s| parse_pipeline(s.trim()))
                    .collect::<Result<_, _>>()?;
            }
            cfg.quilt_db = args.quilt_db.as_deref().map(PatchDatabase::load).transpose()?;
            cfg.nlm = NlmConfig {
                filtering_h: args.nlm_h.map_or(FilteringH::Auto, FilteringH::Fixed),
                ..NlmConfig::default()
            };
            cfg.record_timing = args.timing;
            cfg.panel_count = args.panels;
            let table = run_experiment(&model, &samples, &cfg)?;
            let dir = out_path(&cli.out, "results");
            emit_report(&table, &dir)?;
            for agg in &table.aggregates {
                let q = agg.miou_adv / agg.miou_clean;
                match agg.miou_def {
                    Some(d) => println!(
                        "eps {:>5} {:>10}: clean {:.4} adv {:.4} def {:.4} Q {:.4}",
                        agg.epsilon, agg.defense, agg.miou_clean, agg.miou_adv, d, q
                    ),
                    None => println!(
                        "eps {:>5} {:>10}: clean {:.4} adv {:.4} Q {:.4}",
                        agg.epsilon, agg.defense, agg.miou_clean, agg.miou_adv, q
                    ),
                }
            }
            println!("report written to {}", dir.display());
            Ok(())
        }
        Command::Report(args) => {
            let path = args.dir.join("results.csv");
            let text = std::fs::read_to_string(&path)
                .map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
            let table = parse_results_csv(&text)?;
            let summary = summary_csv(&table);
            std::fs::write(args.dir.join("summary.csv"), &summary)?;
            print!("{summary}");
            Ok(())
        }
    }
}

fn parse_attack_kind(
    name: &str,
    objective: Option<u8>,
    perturbation: Option<Perturbation>,
) -> Result<AttackKind, HarnessError> {
    match name {
        "fgsm" => Ok(AttackKind::Fgsm),
        "llcm" => Ok(AttackKind::Llcm),
        "ssmm" => Ok(AttackKind::Ssmm),
        "dnnm" => {
            let objective = objective
                .ok_or_else(|| HarnessError::Config("dnnm requires --objective".into()))?;
            Ok(AttackKind::Dnnm(objective))
        }
        "uap" | "fff" => {
            let perturbation = perturbation.ok_or_else(|| {
                HarnessError::Config(format!("{name} requires --perturbation"))
            })?;
            if perturbation.norm_p != NormP::Linf {
                return Err(HarnessError::Config("perturbation must declare an l-inf budget".into()));
            }
            Ok(AttackKind::Universal { name: name.to_string(), perturbation })
        }
        other => Err(HarnessError::Config(format!("unknown attack '{other}'"))),
    }
}

/// Minimal independent results.csv reader for the report subcommand.
fn parse_results_csv(text: &str) -> Result<ResultTable, HarnessError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| HarnessError::Data("empty results.csv".into()))?;
    if header != segadv::harness::report::RESULTS_HEADER {
        return Err(HarnessError::Data("unexpected results.csv header".into()));
    }
    let mut table = ResultTable::default();
    for (no, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(HarnessError::Data(format!("line {}: expected 11 fields", no + 2)));
        }
        let num = |s: &str| -> Result<f64, HarnessError> {
            s.parse().map_err(|e| HarnessError::Data(format!("line {}: {e}", no + 2)))
        };
        let opt = |s: &str| -> Result<Option<f64>, HarnessError> {
            if s.is_empty() {
                Ok(None)
            } else {
                num(s).map(Some)
            }
        };
        table.rows.push(Row {
            split: f[0].to_string(),
            image_id: f[1].to_string(),
            attack: f[2].to_string(),
            epsilon: num(f[3])?,
            lambda: num(f[4])?,
            defense: f[5].to_string(),
            miou_clean: num(f[6])?,
            miou_adv: num(f[7])?,
            miou_def: opt(f[8])?,
            q: opt(f[9])?,
            wallclock_ms: num(f[10])? as u64,
        });
    }
    Ok(table)
}
