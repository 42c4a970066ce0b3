//! Subcommand implementations.

use std::path::{Path, PathBuf};

use clap::Args;
use fguap::analysis;
use fguap::attack::{AttackConfig, AttackMethod, AttackMode, Perturbation};
use fguap::dataset::{self, LabeledDataset};
use fguap::models::{Arch, Model, TrainMeta};
use fguap::trainer::{self, TrainConfig};

use crate::config::{ensure_out_dir, Resolver};
use crate::{AppError, AppResult};

fn load_dataset(path: &Path) -> AppResult<LabeledDataset> {
    LabeledDataset::load(path)
        .map_err(|e| AppError::Runtime(format!("loading dataset {}: {e}", path.display())))
}

fn load_model(path: &Path) -> AppResult<(Model, TrainMeta)> {
    Model::load_checkpoint(path)
        .map_err(|e| AppError::Runtime(format!("loading checkpoint {}: {e}", path.display())))
}

fn load_perturbation(path: &Path) -> AppResult<Perturbation> {
    Perturbation::load(path)
        .map_err(|e| AppError::Runtime(format!("loading perturbation {}: {e}", path.display())))
}

// ── gen-data ────────────────────────────────────────────────────────────

#[derive(Args)]
pub struct GenDataArgs {
    /// Plain-text config file (flags override its keys)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Generation seed [default: 42]
    #[arg(long)]
    seed: Option<u64>,
    /// Number of classes [default: 8]
    #[arg(long)]
    classes: Option<usize>,
    /// Training samples per class [default: 200]
    #[arg(long)]
    per_class_train: Option<usize>,
    /// Test samples per class [default: 50]
    #[arg(long)]
    per_class_test: Option<usize>,
    /// Image side in pixels [default: 24]
    #[arg(long)]
    side: Option<usize>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn gen_data(args: GenDataArgs) -> AppResult<()> {
    let mut r = Resolver::new(args.config.as_ref())?;
    let seed = r.get("seed", args.seed, 42)?;
    let classes = r.get("classes", args.classes, 8)?;
    let per_class_train = r.get("per-class-train", args.per_class_train, 200)?;
    let per_class_test = r.get("per-class-test", args.per_class_test, 50)?;
    let side = r.get("side", args.side, 24)?;
    let out = PathBuf::from(r.require("out", args.out.map(path_string))?);
    if classes < 2 {
        return Err(AppError::Usage(format!(
            "--classes must be at least 2, got {classes}"
        )));
    }
    if side < 8 {
        return Err(AppError::Usage(format!("--side must be at least 8, got {side}")));
    }
    if per_class_train < 1 || per_class_test < 1 {
        return Err(AppError::Usage("per-class counts must be at least 1".into()));
    }
    ensure_out_dir(&out)?;
    r.finish(&out, "gen-data")?;

    let (train, test) =
        dataset::generate_synthetic(seed, classes, per_class_train, per_class_test, side)?;
    let train_path = out.join("train.uapdata");
    let test_path = out.join("test.uapdata");
    train.save(&train_path)?;
    test.save(&test_path)?;

    let manifest = format!(
        "seed: {seed}\nclasses: {classes}\nper-class-train: {per_class_train}\n\
         per-class-test: {per_class_test}\nside: {side}\n\
         train-file: train.uapdata\ntrain-count: {}\n\
         test-file: test.uapdata\ntest-count: {}\n",
        train.len(),
        test.len()
    );
    std::fs::write(out.join("manifest.txt"), manifest)?;
    println!(
        "wrote {} ({} samples) and {} ({} samples)",
        train_path.display(),
        train.len(),
        test_path.display(),
        test.len()
    );
    Ok(())
}

fn path_string(p: PathBuf) -> String {
    p.to_string_lossy().into_owned()
}

// ── train ───────────────────────────────────────────────────────────────

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training dataset (UAPDATA1 file)
    #[arg(long)]
    train_data: Option<PathBuf>,
    /// Test dataset used for the per-epoch history
    #[arg(long)]
    test_data: Option<PathBuf>,
    /// Architecture: convnet, mlp, or attnnet
    #[arg(long, value_parser = ["convnet", "mlp", "attnnet"])]
    arch: Option<String>,
    /// Epochs [default: per-architecture recipe]
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size [default: 32]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate [default: 1e-3]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// L2 weight decay [default: 1e-4]
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Seed for init and shuffling [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Disable per-epoch shuffling
    #[arg(long)]
    no_shuffle: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn train(args: TrainArgs) -> AppResult<()> {
    let mut r = Resolver::new(args.config.as_ref())?;
    let train_path = PathBuf::from(r.require("train-data", args.train_data.map(path_string))?);
    let test_path = PathBuf::from(r.require("test-data", args.test_data.map(path_string))?);
    let arch_tag = r.require("arch", args.arch)?;
    let arch = Arch::parse(&arch_tag).map_err(|e| AppError::Usage(e.to_string()))?;
    let recipe = TrainConfig::recipe(arch);
    let epochs = r.get("epochs", args.epochs, recipe.epochs)?;
    let batch_size = r.get("batch-size", args.batch_size, recipe.batch_size)?;
    let learning_rate = r.get("learning-rate", args.learning_rate, recipe.learning_rate)?;
    let weight_decay = r.get("weight-decay", args.weight_decay, recipe.weight_decay)?;
    let seed = r.get("seed", args.seed, 0)?;
    let shuffle = r.get("shuffle", if args.no_shuffle { Some(false) } else { None }, true)?;
    let out = PathBuf::from(r.require("out", args.out.map(path_string))?);
    ensure_out_dir(&out)?;
    r.finish(&out, "train")?;

    let train_ds = load_dataset(&train_path)?;
    let test_ds = load_dataset(&test_path)?;
    let cfg = TrainConfig {
        epochs,
        batch_size,
        learning_rate,
        weight_decay,
        seed,
        shuffle,
    };
    cfg.validate().map_err(|e| AppError::Usage(e.to_string()))?;

    let [c, h, w] = train_ds.image_dims()?;
    let mut model = Model::build_for_input(arch, train_ds.num_classes, seed, [c, h, w])?;
    let history = trainer::train(&mut model, &train_ds, Some(&test_ds), &cfg)?;
    let final_train_acc = history.final_train_acc();
    let final_test_acc = history
        .epochs
        .last()
        .and_then(|e| e.test_acc)
        .unwrap_or(0.0);

    let ckpt = out.join("checkpoint.uapckpt");
    model.save_checkpoint(
        &ckpt,
        &TrainMeta {
            epochs,
            final_train_acc,
            seed,
        },
    )?;
    history.write_csv(&out.join("history.csv"))?;
    println!(
        "trained {} for {epochs} epochs: train_acc={final_train_acc:.4} test_acc={final_test_acc:.4}",
        arch.tag()
    );
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

// ── attack ──────────────────────────────────────────────────────────────

#[derive(Args)]
pub struct AttackArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trained surrogate checkpoint
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset to craft on (UAPDATA1 file)
    #[arg(long)]
    train_data: Option<PathBuf>,
    /// Loss: fg (feature cosine) or logit-cosine
    #[arg(long, value_parser = ["fg", "logit-cosine"])]
    method: Option<String>,
    /// untargeted or targeted (the latter needs --target-class)
    #[arg(long, value_parser = ["untargeted", "targeted"])]
    mode: Option<String>,
    #[arg(long)]
    target_class: Option<usize>,
    /// Batch size b [default: 32]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Epochs m [default: 10]
    #[arg(long)]
    epochs: Option<usize>,
    /// Adam learning rate [default: 0.02]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// L-infinity budget [default: 10/255]
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Subsample this many training images per class before crafting
    #[arg(long)]
    per_class: Option<usize>,
    /// Append this many augmented copies per image (mini-set crafting)
    #[arg(long)]
    augment_copies: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn attack(args: AttackArgs) -> AppResult<()> {
    let mut r = Resolver::new(args.config.as_ref())?;
    let ckpt_path = PathBuf::from(r.require("checkpoint", args.checkpoint.map(path_string))?);
    let data_path = PathBuf::from(r.require("train-data", args.train_data.map(path_string))?);
    let method_tag = r.get("method", args.method, "fg".to_string())?;
    let method = AttackMethod::parse(&method_tag).map_err(|e| AppError::Usage(e.to_string()))?;
    let mode_tag = r.get("mode", args.mode, "untargeted".to_string())?;
    let target_class = r.optional("target-class", args.target_class)?;
    let mode = match mode_tag.as_str() {
        "untargeted" => AttackMode::Untargeted,
        "targeted" => match target_class {
            Some(c) => AttackMode::Targeted(c),
            None => {
                return Err(AppError::Usage(
                    "--mode targeted requires --target-class".into(),
                ))
            }
        },
        other => return Err(AppError::Usage(format!("unknown mode {other:?}"))),
    };
    let batch_size = r.get("batch-size", args.batch_size, 32)?;
    let epochs = r.get("epochs", args.epochs, 10)?;
    let learning_rate = r.get("learning-rate", args.learning_rate, 0.02)?;
    let xi = r.get("xi", args.xi, fguap::attack::DEFAULT_XI)?;
    let seed = r.get("seed", args.seed, 0)?;
    let per_class = r.optional("per-class", args.per_class)?;
    let augment_copies = r.get("augment-copies", args.augment_copies, 0)?;
    let out = PathBuf::from(r.require("out", args.out.map(path_string))?);
    ensure_out_dir(&out)?;
    r.finish(&out, "attack")?;

    let (model, _) = load_model(&ckpt_path)?;
    let mut ds = load_dataset(&data_path)?;
    if let Some(n) = per_class {
        ds = dataset::subsample_per_class(&ds, n, seed)?;
    }
    if augment_copies > 0 {
        ds = dataset::expand_with_augmentations(&ds, augment_copies, seed)?;
    }

    let cfg = AttackConfig {
        batch_size,
        epochs,
        learning_rate,
        xi,
        mode,
        seed,
    };
    cfg.validate().map_err(|e| AppError::Usage(e.to_string()))?;
    let (pert, log) = match method {
        AttackMethod::Fg => fguap::attack::craft_uap(&model, &ds, &cfg)?,
        AttackMethod::LogitCosine => {
            fguap::attack::craft_logit_cosine_baseline(&model, &ds, &cfg)?
        }
    };

    let pert_path = out.join("perturbation.uappert");
    pert.save(&pert_path)?;
    let log_json = serde_json::to_string_pretty(&log).expect("log serializes");
    std::fs::write(out.join("attack_log.json"), log_json + "\n")?;
    println!(
        "crafted {} perturbation on {} samples; per-epoch mean loss: {:?}",
        method.tag(),
        ds.len(),
        log.epoch_mean_loss
    );
    println!("perturbation: {}", pert_path.display());
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────────

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    perturbation: Option<PathBuf>,
    /// Dataset the report is computed on (UAPDATA1 file)
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn eval(args: EvalArgs) -> AppResult<()> {
    let mut r = Resolver::new(args.config.as_ref())?;
    let ckpt_path = PathBuf::from(r.require("checkpoint", args.checkpoint.map(path_string))?);
    let pert_path = PathBuf::from(r.require("perturbation", args.perturbation.map(path_string))?);
    let data_path = PathBuf::from(r.require("test-data", args.test_data.map(path_string))?);
    let out = PathBuf::from(r.require("out", args.out.map(path_string))?);
    ensure_out_dir(&out)?;
    r.finish(&out, "eval")?;

    let (model, _) = load_model(&ckpt_path)?;
    let pert = load_perturbation(&pert_path)?;
    let ds = load_dataset(&data_path)?;
    let [c, h, w] = ds.image_dims()?;
    if pert.delta().dims() != [c, h, w] || model.input_dims() != [c, h, w] {
        return Err(AppError::Runtime(format!(
            "shape mismatch: dataset {:?}, model {:?}, perturbation {:?}",
            [c, h, w],
            model.input_dims(),
            pert.delta().dims()
        )));
    }

    let report = analysis::evaluate(&model, &ds, &pert)?;
    let path = out.join("report.json");
    std::fs::write(&path, report.to_json() + "\n")?;
    println!(
        "FR={:.4} D1={:.4} D3={:.4} D5={:.4} c_delta={} (rank {}) nc_clean={:.4} nc_perturbed={:.4}",
        report.fooling_ratio,
        report.dominance_d1,
        report.dominance_d3,
        report.dominance_d5,
        report.uap_predicted_class,
        report.uap_class_rank,
        report.nc_metric_clean,
        report.nc_metric_perturbed
    );
    if let Some(tfr) = report.targeted_fooling_ratio {
        println!("TFR={tfr:.4}");
    }
    println!("report: {}", path.display());
    Ok(())
}

// ── transfer ────────────────────────────────────────────────────────────

#[derive(Args)]
pub struct TransferArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of .uapckpt victim checkpoints
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    /// Directory of .uappert surrogate perturbations
    #[arg(long)]
    perturbations: Option<PathBuf>,
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn sorted_files(dir: &Path, ext: &str) -> AppResult<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| AppError::Runtime(format!("reading {}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(AppError::Runtime(format!(
            "no .{ext} files in {}",
            dir.display()
        )));
    }
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

pub fn transfer(args: TransferArgs) -> AppResult<()> {
    let mut r = Resolver::new(args.config.as_ref())?;
    let ckpt_dir = PathBuf::from(r.require("checkpoints", args.checkpoints.map(path_string))?);
    let pert_dir = PathBuf::from(r.require("perturbations", args.perturbations.map(path_string))?);
    let data_path = PathBuf::from(r.require("test-data", args.test_data.map(path_string))?);
    let out = PathBuf::from(r.require("out", args.out.map(path_string))?);
    ensure_out_dir(&out)?;
    r.finish(&out, "transfer")?;

    let ckpt_files = sorted_files(&ckpt_dir, "uapckpt")?;
    let pert_files = sorted_files(&pert_dir, "uappert")?;
    let ds = load_dataset(&data_path)?;

    let mut models = Vec::new();
    for f in &ckpt_files {
        models.push(load_model(f)?.0);
    }
    let mut perts = Vec::new();
    for f in &pert_files {
        perts.push(load_perturbation(f)?);
    }
    let model_refs: Vec<&Model> = models.iter().collect();
    let pert_refs: Vec<&Perturbation> = perts.iter().collect();
    let matrix = analysis::transfer_matrix(&model_refs, &pert_refs, &ds)?;

    let mut csv = String::from("surrogate,victim,fr\n");
    for (i, row) in matrix.iter().enumerate() {
        for (j, fr) in row.iter().enumerate() {
            csv.push_str(&format!(
                "{},{},{fr:?}\n",
                stem(&pert_files[i]),
                stem(&ckpt_files[j])
            ));
        }
    }
    let path = out.join("transfer.csv");
    std::fs::write(&path, csv)?;
    println!("transfer matrix ({}x{}): {}", perts.len(), models.len(), path.display());
    Ok(())
}

// ── redundancy ──────────────────────────────────────────────────────────

#[derive(Args)]
pub struct RedundancyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    test_data: Option<PathBuf>,
    /// Descending per-class subset sizes [default: 200,100,50,10,1]
    #[arg(long)]
    counts: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Attack epochs [default: 20]
    #[arg(long)]
    epochs: Option<usize>,
    /// Attack learning rate [default: 0.01]
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn redundancy(args: RedundancyArgs) -> AppResult<()> {
    let mut r = Resolver::new(args.config.as_ref())?;
    let ckpt_path = PathBuf::from(r.require("checkpoint", args.checkpoint.map(path_string))?);
    let train_path = PathBuf::from(r.require("train-data", args.train_data.map(path_string))?);
    let test_path = PathBuf::from(r.require("test-data", args.test_data.map(path_string))?);
    let counts_raw = r.get("counts", args.counts, "200,100,50,10,1".to_string())?;
    let batch_size = r.get("batch-size", args.batch_size, 32)?;
    let epochs = r.get("epochs", args.epochs, 20)?;
    let learning_rate = r.get("learning-rate", args.learning_rate, 0.01)?;
    let xi = r.get("xi", args.xi, fguap::attack::DEFAULT_XI)?;
    let seed = r.get("seed", args.seed, 0)?;
    let out = PathBuf::from(r.require("out", args.out.map(path_string))?);
    let counts: Vec<usize> = counts_raw
        .split(',')
        .map(|c| {
            c.trim()
                .parse()
                .map_err(|_| AppError::Usage(format!("bad count {c:?} in --counts")))
        })
        .collect::<AppResult<_>>()?;
    ensure_out_dir(&out)?;
    r.finish(&out, "redundancy")?;

    let (model, _) = load_model(&ckpt_path)?;
    let train_ds = load_dataset(&train_path)?;
    let test_ds = load_dataset(&test_path)?;
    let cfg = AttackConfig {
        batch_size,
        epochs,
        learning_rate,
        xi,
        mode: AttackMode::Untargeted,
        seed,
    };
    let sweep = analysis::redundancy_sweep(&model, &train_ds, &test_ds, &counts, &cfg, seed)?;

    let mut csv = String::from("count,fr,ratio_to_full\n");
    for row in &sweep.rows {
        csv.push_str(&format!(
            "{},{:?},{:?}\n",
            row.per_class, row.fooling_ratio, row.ratio_to_full
        ));
    }
    let path = out.join("redundancy.csv");
    std::fs::write(&path, csv)?;
    println!(
        "full-set FR {:.4}; sweep over {:?}: {}",
        sweep.full_fooling_ratio,
        counts,
        path.display()
    );
    Ok(())
}
