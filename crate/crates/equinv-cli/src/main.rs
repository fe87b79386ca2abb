//! Command-line driver: dataset preparation, training, episodic evaluation,
//! the ablation table, and embedding/PCA export. Exit codes: 0 ok, 2 config
//! error, 4 numeric abort, 3 anything wrong with data or checkpoint files.

mod config;

use clap::{Args, Parser, Subcommand};
use config::RunConfig;
use equinv::checkpoint::Checkpoint;
use equinv::data::{
    apply_split, load_cifar100_binary, save_cifar100_binary, synth_dataset, LabeledDataset,
    SplitManifest,
};
use equinv::fewshot::{evaluate, EvalReport};
use equinv::losses::{ci95, LossConfig};
use equinv::model::{stack_images, Backbone, Model, ModelConfig};
use equinv::pca::pca_project;
use equinv::rng::{self, domain};
use equinv::trainer::{
    run_pipeline, train_generation, ResumeState, TrainConfig, TrainReport, TrainSink,
};
use equinv::transforms::build_preset;
use equinv::{Error, Result};
use ndarray::Axis;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "equinv", version, about = "Equivariant/invariant few-shot learning")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key (repeatable, wins over the file)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Override the run seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print a transform preset as a table
    DumpTransforms {
        #[command(flatten)]
        common: Common,
        /// Preset to dump instead of the configured one
        #[arg(long)]
        preset: Option<String>,
    },
    /// Materialize the dataset splits as CIFAR-layout binaries
    PrepareData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the configured pipeline (all generations)
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by a previous run
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Few-shot evaluation of a checkpoint
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train baseline/invariant-only/equivariant-only/full and tabulate
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Export embeddings plus a 2-component PCA projection
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    };
    std::process::exit(code);
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Argument(_) => 2,
        Error::Format { .. }
        | Error::Io(_)
        | Error::VersionMismatch { .. }
        | Error::ShapeMismatch(_) => 3,
        Error::NonFiniteLoss { .. } => 4,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::DumpTransforms { common, preset } => cmd_dump_transforms(&common, preset),
        Cmd::PrepareData { common } => cmd_prepare_data(&common),
        Cmd::Train { common, resume } => cmd_train(&common, resume),
        Cmd::Eval { common, checkpoint } => cmd_eval(&common, &checkpoint),
        Cmd::Ablate { common } => cmd_ablate(&common),
        Cmd::Embed { common, checkpoint } => cmd_embed(&common, &checkpoint),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut rc = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for pair in &common.set {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got {pair:?}")))?;
        rc.set(key.trim(), value)?;
    }
    if let Some(seed) = common.seed {
        rc.seed = seed;
    }
    if let Some(dir) = &common.out_dir {
        rc.out_dir = dir.display().to_string();
    }
    Ok(rc)
}

struct Splits {
    train: LabeledDataset,
    val: LabeledDataset,
    test: LabeledDataset,
}

impl Splits {
    fn pick(&self, name: &str) -> Result<&LabeledDataset> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::config(format!("eval_split must be train/val/test, got {other}"))),
        }
    }
}

fn merge(a: LabeledDataset, b: LabeledDataset) -> Result<LabeledDataset> {
    if a.class_names != b.class_names {
        return Err(Error::config("cannot merge datasets with different class tables"));
    }
    let images = ndarray::concatenate(Axis(0), &[a.images.view(), b.images.view()])
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let mut labels = a.labels;
    labels.extend(b.labels);
    LabeledDataset::new(images, labels, a.class_names)
}

fn load_splits(rc: &RunConfig) -> Result<Splits> {
    match rc.dataset.as_str() {
        "synthetic" => {
            let t = rc.synth_train_classes;
            let v = rc.synth_val_classes;
            if t + v >= rc.synth_classes {
                return Err(Error::config(
                    "synth_train_classes + synth_val_classes must leave test classes",
                ));
            }
            let full =
                synth_dataset(rc.synth_classes, rc.synth_per_class, rc.synth_image_size, rc.seed);
            let names = full.class_names.clone();
            let manifest = SplitManifest {
                train: names[..t].to_vec(),
                val: names[t..t + v].to_vec(),
                test: names[t + v..].to_vec(),
            };
            let (train, val, test) = apply_split(&full, &manifest)?;
            Ok(Splits { train, val, test })
        }
        "cifar-fs" => {
            if rc.data_dir.is_empty() {
                return Err(Error::config("dataset cifar-fs requires data_dir"));
            }
            let dir = Path::new(&rc.data_dir);
            let a = load_cifar100_binary(&dir.join("train.bin"))?;
            let b = load_cifar100_binary(&dir.join("test.bin"))?;
            let merged = merge(a, b)?;
            let (train, val, test) = apply_split(&merged, &SplitManifest::cifar_fs())?;
            Ok(Splits { train, val, test })
        }
        other => Err(Error::config(format!("unknown dataset {other:?}"))),
    }
}

fn effective_transforms(rc: &RunConfig) -> Result<usize> {
    match rc.transform_subset {
        Some(k) => Ok(k),
        None => Ok(build_preset(&rc.transform_preset)?.len()),
    }
}

fn build_train_config(rc: &RunConfig, num_classes: usize) -> Result<TrainConfig> {
    let model = ModelConfig {
        backbone: Backbone::parse(&rc.backbone)?,
        embed_dim: rc.embed_dim,
        num_classes,
        num_transforms: effective_transforms(rc)?,
        invariant_dim: rc.invariant_dim,
        head_hidden: rc.head_hidden,
        seed: rc.seed,
    };
    let config = TrainConfig {
        epochs: rc.epochs,
        batch_size: rc.batch_size,
        lr: rc.lr,
        momentum: rc.momentum,
        weight_decay: rc.weight_decay,
        lr_decay_epochs: rc.lr_decay_epochs.clone(),
        lr_decay_factor: rc.lr_decay_factor,
        generations: rc.generations,
        seed: rc.seed,
        transform_preset: rc.transform_preset.clone(),
        transform_subset: rc.transform_subset,
        micro_batches: rc.micro_batches,
        augment: rc.augment,
        bank_momentum: rc.bank_momentum,
        loss: LossConfig {
            tau: rc.tau,
            kd_temperature: rc.kd_temperature,
            w_eq: rc.w_eq,
            w_in: rc.w_in,
            w_kd: rc.w_kd,
            negatives_per_batch: rc.negatives_per_batch,
        },
        model,
    };
    config.validate()?;
    Ok(config)
}

fn cmd_dump_transforms(common: &Common, preset: Option<String>) -> Result<()> {
    let rc = load_config(common)?;
    let name = preset.unwrap_or(rc.transform_preset);
    let set = build_preset(&name)?;
    println!("preset {} with {} transforms", set.name, set.len());
    println!("index,rotation_deg,scale,aspect_ratio,translate_x,translate_y,shear_deg");
    for (i, spec) in set.specs.iter().enumerate() {
        println!(
            "{i},{},{},{},{},{},{}",
            spec.rotation_degrees(),
            spec.scale,
            spec.aspect_ratio,
            spec.translate_x,
            spec.translate_y,
            spec.shear
        );
    }
    Ok(())
}

fn cmd_prepare_data(common: &Common) -> Result<()> {
    let rc = load_config(common)?;
    let splits = load_splits(&rc)?;
    let out = Path::new(&rc.out_dir);
    std::fs::create_dir_all(out)?;
    for (name, split) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        save_cifar100_binary(split, &out.join(format!("{name}.bin")))?;
        std::fs::write(out.join(format!("{name}.classes.txt")), split.class_names.join("\n"))?;
        println!("{name}: {} images, {} classes", split.len(), split.num_classes());
    }
    Ok(())
}

fn append_report(text: &mut String, report: &TrainReport) {
    for e in &report.epochs {
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{},{},{}",
            report.generation,
            e.epoch,
            e.lr,
            e.losses.ce,
            e.losses.eq,
            e.losses.inv,
            e.losses.kd,
            e.losses.total,
            e.wall_ms
        );
    }
}

fn cmd_train(common: &Common, resume: Option<PathBuf>) -> Result<()> {
    let rc = load_config(common)?;
    let splits = load_splits(&rc)?;
    let config = build_train_config(&rc, splits.train.num_classes())?;
    let mut sink = TrainSink::create(&rc.out_dir)?;

    let mut report_text = format!("## config\n{}## epochs\n", rc.echo());
    report_text.push_str("generation,epoch,lr,ce,eq,in,kd,total,wall_ms\n");

    let (start_gen, mut start_state) = match &resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let mut expect = config.model.clone();
            expect.seed = ckpt.config.seed;
            if ckpt.config != expect {
                return Err(Error::config(
                    "resume checkpoint architecture does not match the configuration",
                ));
            }
            let model = ckpt.build_model()?;
            let momenta = ckpt
                .optimizer_momenta(&model)?
                .ok_or_else(|| Error::config("resume checkpoint lacks optimizer state"))?;
            let bank = ckpt
                .bank()?
                .ok_or_else(|| Error::config("resume checkpoint lacks the memory bank"))?;
            println!(
                "resuming generation {} at epoch {} from {}",
                ckpt.generation,
                ckpt.epoch,
                path.display()
            );
            (
                ckpt.generation as usize,
                Some(ResumeState { model, momenta, bank, next_epoch: ckpt.epoch as usize }),
            )
        }
        None => (0, None),
    };

    let mut previous: Option<Model<f32>> = None;
    for g in 0..config.generations {
        if g < start_gen {
            let done = Path::new(&rc.out_dir).join(format!("gen{g}.ckpt"));
            if !done.exists() {
                return Err(Error::config(format!(
                    "resume needs the finished checkpoint {}",
                    done.display()
                )));
            }
            previous = Some(Checkpoint::load(&done)?.build_model()?);
            continue;
        }
        let state = if g == start_gen { start_state.take() } else { None };
        if let Some(s) = &state {
            if s.next_epoch >= config.epochs {
                previous = Some(
                    Checkpoint::load(resume.as_ref().unwrap())?.build_model()?,
                );
                continue;
            }
        }
        let result =
            train_generation(&config, &splits.train, previous.as_ref(), g as u32, state, Some(&mut sink))?;
        for w in &result.report.warnings {
            eprintln!("warning: {w}");
        }
        let last = result.report.epochs.last().map(|e| e.losses.total).unwrap_or(f64::NAN);
        println!(
            "generation {g}: {} epochs, final mean loss {last:.4}",
            result.report.epochs.len()
        );
        append_report(&mut report_text, &result.report);
        previous = Some(result.model);
    }

    std::fs::write(Path::new(&rc.out_dir).join("train_report.txt"), report_text)?;
    println!("checkpoints and metrics under {}", rc.out_dir);
    Ok(())
}

fn write_eval_report(rc: &RunConfig, report: &EvalReport, file: &str) -> Result<()> {
    std::fs::create_dir_all(&rc.out_dir)?;
    let text = format!("## config\n{}## report\n{}", rc.echo(), report.to_text());
    std::fs::write(Path::new(&rc.out_dir).join(file), text)?;
    Ok(())
}

fn cmd_eval(common: &Common, checkpoint: &Path) -> Result<()> {
    let rc = load_config(common)?;
    let splits = load_splits(&rc)?;
    let split = splits.pick(&rc.eval_split)?;
    let model = Checkpoint::load(checkpoint)?.build_model()?;
    let report = evaluate(&model, split, rc.n_way, rc.k_shot, rc.q_query, rc.num_tasks, rc.seed)?;
    write_eval_report(&rc, &report, "eval_report.txt")?;
    println!("{}", report.summary_line());
    Ok(())
}

fn cmd_ablate(common: &Common) -> Result<()> {
    let rc = load_config(common)?;
    let splits = load_splits(&rc)?;
    let split = splits.pick(&rc.eval_split)?;
    if rc.seeds.is_empty() {
        return Err(Error::config("ablation needs at least one seed"));
    }

    let variants: [(&str, f64, f64); 4] = [
        ("baseline", 0.0, 0.0),
        ("invariant-only", 0.0, rc.w_in),
        ("equivariant-only", rc.w_eq, 0.0),
        ("full", rc.w_eq, rc.w_in),
    ];
    let mut table = String::from("variant,mean,ci95,per_seed_means\n");
    let mut stdout_rows = Vec::new();
    for (name, w_eq, w_in) in variants {
        let mut means = Vec::new();
        for &seed in &rc.seeds {
            let mut vrc = rc.clone();
            vrc.seed = seed;
            vrc.w_eq = w_eq;
            vrc.w_in = w_in;
            let config = build_train_config(&vrc, splits.train.num_classes())?;
            let (ckpts, _) = run_pipeline(&config, &splits.train, None)?;
            let model = ckpts.last().unwrap().build_model()?;
            let report =
                evaluate(&model, split, rc.n_way, rc.k_shot, rc.q_query, rc.num_tasks, seed)?;
            means.push(report.mean);
        }
        let mean = means.iter().sum::<f64>() / means.len() as f64;
        let ci = ci95(&means);
        let per_seed =
            means.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>().join(" ");
        let _ = writeln!(table, "{name},{mean:.4},{ci:.4},{per_seed}");
        stdout_rows.push(format!(
            "{name:<18} {:>6.2} ± {:>5.2}   [{per_seed}]",
            mean * 100.0,
            ci * 100.0
        ));
    }

    std::fs::create_dir_all(&rc.out_dir)?;
    let text = format!("## config\n{}## table\n{table}", rc.echo());
    std::fs::write(Path::new(&rc.out_dir).join("ablation.txt"), text)?;
    println!("variant               mean ± ci95   per-seed means");
    for row in stdout_rows {
        println!("{row}");
    }
    Ok(())
}

fn cmd_embed(common: &Common, checkpoint: &Path) -> Result<()> {
    let rc = load_config(common)?;
    let splits = load_splits(&rc)?;
    let split = splits.pick(&rc.eval_split)?;
    let model = Checkpoint::load(checkpoint)?.build_model()?;

    let n = split.len();
    let take = rc.embed_limit.min(n);
    let mut rng = rng::derive_rng(rc.seed, &[domain::EPISODE]);
    let mut picks = if n == 0 {
        Vec::new()
    } else {
        rand::seq::index::sample(&mut rng, n, take).into_vec()
    };
    picks.sort_unstable();

    let d = model.config.embed_dim;
    let mut embeddings = ndarray::Array2::<f64>::zeros((picks.len(), d));
    for (row, batch) in picks.chunks(64).enumerate() {
        let images: Vec<_> = batch.iter().map(|&i| split.image_f32(i)).collect();
        let z = model.embed(&stack_images::<f32>(&images))?;
        for (j, zrow) in z.rows().into_iter().enumerate() {
            for (k, &v) in zrow.iter().enumerate() {
                embeddings[[row * 64 + j, k]] = f64::from(v);
            }
        }
    }

    std::fs::create_dir_all(&rc.out_dir)?;
    let out = Path::new(&rc.out_dir);
    let mut table = String::from("instance_id,label");
    for k in 0..d {
        let _ = write!(table, ",e{k}");
    }
    table.push('\n');
    for (row, &i) in picks.iter().enumerate() {
        let _ = write!(table, "{},{}", split.instance_ids[i], split.labels[i]);
        for k in 0..d {
            let _ = write!(table, ",{}", embeddings[[row, k]]);
        }
        table.push('\n');
    }
    std::fs::write(out.join("embeddings.csv"), table)?;

    let mut pca_text = String::from("instance_id,label,pc0,pc1\n");
    let mut share_note = String::from("no rows, PCA skipped");
    if !picks.is_empty() {
        let (proj, shares) = pca_project(&embeddings.view(), 2)?;
        for (row, &i) in picks.iter().enumerate() {
            let _ = writeln!(
                pca_text,
                "{},{},{},{}",
                split.instance_ids[i],
                split.labels[i],
                proj[[row, 0]],
                proj[[row, 1]]
            );
        }
        share_note = format!("top-2 variance share {:.4}", shares[0] + shares[1]);
    }
    std::fs::write(out.join("pca.csv"), pca_text)?;
    println!("wrote {} embeddings ({share_note})", picks.len());
    Ok(())
}
