use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use defreg_core::data::{self, load_image_png, save_field_npy, save_image_png, to_intensity8};
use defreg_core::training::{evaluate_with, summarize, Checkpoint};
use defreg_core::{
    fit, generate_shapes_splits, load_splits, make_variant, save_splits, synthesize_modality, viz, write_report,
    DatasetSplits, DeformationField, ElasticDeformConfig, FitOptions, PairedDataset, Precision, Split, TrainConfig,
    Trainer,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::manifest::RunManifest;
use crate::{usage, Direction, EvaluateArgs, Failure, PrecisionArg, RegisterArgs, SynthesizeArgs, TrainArgs};

type CmdResult = Result<(), Failure>;

fn elastic_for(args: &SynthesizeArgs, size: usize) -> Result<ElasticDeformConfig, Failure> {
    let base = ElasticDeformConfig::for_size(size);
    let cfg = ElasticDeformConfig {
        control_grid_spacing: args.control_grid_spacing.unwrap_or(base.control_grid_spacing),
        max_displacement: args.max_displacement.unwrap_or(base.max_displacement),
        smoothing_sigma: args.smoothing_sigma.unwrap_or(base.smoothing_sigma),
        seed: args.seed,
    };
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn resynthesize(src: &DatasetSplits, args: &SynthesizeArgs) -> Result<DatasetSplits, Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut convert = |ds: &PairedDataset| -> Result<PairedDataset, Failure> {
        let records = ds
            .records
            .iter()
            .map(|r| {
                let (h, _) = r.source.shape();
                let elastic = elastic_for(args, h)?;
                let img8 = to_intensity8(&r.source)?;
                let synth = synthesize_modality(&img8, r.source_mask.as_ref(), 3, &elastic, &mut rng)?;
                let target_mask = r
                    .source_mask
                    .as_ref()
                    .map(|m| defreg_core::warp_mask(m, &synth.field))
                    .transpose()?;
                let modality = format!("{}-synth", r.meta.modality_source);
                Ok(data::PairRecord {
                    name: r.name.clone(),
                    source: r.source.clone(),
                    target: synth.image.with_modality(&modality),
                    source_mask: r.source_mask.clone(),
                    target_mask,
                    gt_field: Some(synth.field),
                    meta: data::PairMeta {
                        modality_target: modality,
                        ..r.meta.clone()
                    },
                })
            })
            .collect::<Result<Vec<_>, Failure>>()?;
        Ok(PairedDataset {
            split: ds.split,
            records,
        })
    };
    Ok(DatasetSplits {
        train: convert(&src.train)?,
        val: convert(&src.val)?,
        test: convert(&src.test)?,
    })
}

pub fn synthesize(args: &SynthesizeArgs) -> CmdResult {
    let splits = match &args.from {
        Some(from) => {
            let src = load_splits(from).with_context(|| format!("loading {}", from.display()))?;
            if src.train.is_empty() && src.val.is_empty() && src.test.is_empty() {
                return Err(usage(format!("{} contains no pairs", from.display())));
            }
            resynthesize(&src, args)?
        }
        None => {
            if args.pairs == 0 {
                return Err(usage("--pairs must be at least 1"));
            }
            if args.size < 8 {
                return Err(usage("--size must be at least 8"));
            }
            let elastic = elastic_for(args, args.size)?;
            generate_shapes_splits([args.pairs, args.val_pairs, args.test_pairs], args.size, &elastic, args.seed)?
        }
    };
    let checksum = splits.checksum();
    let mut manifest = RunManifest::new("synthesize");
    manifest.dataset_checksum = Some(checksum.clone());
    manifest.seed = Some(args.seed);
    let handle = manifest.write(&args.out)?;
    let res = save_splits(&splits, &args.out);
    handle.finish(res.is_ok())?;
    res?;
    println!(
        "wrote {} train / {} val / {} test pairs to {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        args.out.display()
    );
    println!("checksum {checksum}");
    Ok(())
}

fn resolve_config(args: &TrainArgs, base: TrainConfig) -> Result<TrainConfig, Failure> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => base,
    };
    if let Some(v) = &args.variant {
        cfg = make_variant(&cfg, v).map_err(usage)?;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
        if args.decay_start_epoch.is_none() && cfg.decay_start_epoch > e {
            cfg.decay_start_epoch = e;
        }
    }
    if let Some(d) = args.decay_start_epoch {
        cfg.decay_start_epoch = d;
    }
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(c) = args.checkpoint_interval {
        cfg.checkpoint_interval = c;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(p) = args.precision {
        cfg.precision = match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn variant_name(cfg: &TrainConfig) -> &'static str {
    match (cfg.variant.use_local, cfg.variant.use_global) {
        (true, true) => "full",
        (false, true) => "no_local",
        (true, false) => "no_global",
        (false, false) => "no_local_global",
    }
}

fn run_dir_of_checkpoint(ckpt: &Path) -> Result<PathBuf, Failure> {
    ckpt.parent()
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .ok_or_else(|| usage(format!("cannot derive a run directory from {}", ckpt.display())))
}

pub fn train(args: &TrainArgs) -> CmdResult {
    let splits = load_splits(&args.data).with_context(|| format!("loading {}", args.data.display()))?;
    if splits.train.is_empty() {
        return Err(usage(format!("{} has no training pairs", args.data.display())));
    }
    let base = match &args.resume {
        Some(p) => Checkpoint::read(p).map_err(usage)?.config,
        None => TrainConfig::default(),
    };
    let cfg = resolve_config(args, base)?;
    let directions: Vec<Direction> = match args.direction {
        Direction::Both => vec![Direction::Forward, Direction::Backward],
        d => vec![d],
    };
    if args.resume.is_some() && directions.len() > 1 {
        return Err(usage("--resume continues a single run; pick one --direction"));
    }
    for dir in directions {
        let data = match dir {
            Direction::Backward => splits.reversed(),
            _ => splits.clone(),
        };
        let run_dir = match &args.resume {
            Some(p) => run_dir_of_checkpoint(p)?,
            None => {
                let name = args.name.clone().unwrap_or_else(|| variant_name(&cfg).to_string());
                let name = if args.direction == Direction::Both {
                    format!("{name}-{}", dir.as_str())
                } else {
                    name
                };
                args.runs_dir.join(name)
            }
        };
        let mut manifest = RunManifest::new("train");
        manifest.config_path = args.config.clone();
        manifest.config_hash = Some(cfg.hash());
        manifest.dataset_checksum = Some(data.checksum());
        manifest.seed = Some(cfg.seed);
        let handle = manifest.write(&run_dir)?;
        let opts = FitOptions {
            run_dir: run_dir.clone(),
            resume: args.resume.clone(),
            write_samples: !args.no_samples,
        };
        log::info!(
            "training {} ({}) into {}",
            variant_name(&cfg),
            data.train.direction(),
            run_dir.display()
        );
        let res = fit(&data, &cfg, &opts);
        handle.finish(res.is_ok())?;
        let out = res.map_err(|e| anyhow!(e).context(format!("training run {} failed", run_dir.display())))?;
        let last = out.history.last();
        println!(
            "{}: {} epochs, final total loss {}, checkpoint {}",
            run_dir.display(),
            out.trainer.epoch(),
            last.map(|h| format!("{:.4}", h.total)).unwrap_or_else(|| "n/a".into()),
            out.checkpoint_path.display()
        );
    }
    Ok(())
}

pub fn evaluate(args: &EvaluateArgs) -> CmdResult {
    if args.direction == Direction::Both {
        return Err(usage("evaluate scores one direction at a time"));
    }
    let splits = load_splits(&args.data).with_context(|| format!("loading {}", args.data.display()))?;
    let split = match args.split.as_str() {
        "train" => Split::Train,
        "val" => Split::Val,
        _ => Split::Test,
    };
    let ds = match args.direction {
        Direction::Backward => splits.get(split).reversed(),
        _ => splits.get(split).clone(),
    };
    if ds.is_empty() {
        return Err(usage(format!("split {split} of {} is empty", args.data.display())));
    }
    let trainer = match &args.checkpoint {
        Some(p) => Some(Trainer::load_checkpoint(p, None).map_err(usage)?),
        None => None,
    };
    let name = match &args.checkpoint {
        Some(p) => run_dir_of_checkpoint(p)?
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into()),
        None => "identity".into(),
    };
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("eval").join(name).join(args.direction.as_str()));
    let mut manifest = RunManifest::new("evaluate");
    manifest.dataset_checksum = Some(ds.checksum());
    manifest.seed = trainer.as_ref().map(|t| t.config().seed);
    manifest.config_hash = trainer.as_ref().map(|t| t.config().hash());
    let handle = manifest.write(&out)?;
    let res = (|| -> Result<_, Failure> {
        let (metrics, skipped) = match &trainer {
            Some(t) => evaluate_with(&ds, |r| t.register(&r.source, &r.target))?,
            None => evaluate_with(&ds, |r| DeformationField::identity(r.source.height(), r.source.width()))?,
        };
        for s in &skipped {
            eprintln!("warning: pair {s} has no masks and was not scored");
        }
        let report = summarize(&metrics)?.ok_or_else(|| anyhow!("no pair in split {split} has masks"))?;
        write_report(&report, &out)?;
        Ok(report)
    })();
    handle.finish(res.is_ok())?;
    let report = res?;
    let hd = report
        .hd95
        .map(|s| format!("{:.3} ({:.3}) {}", s.mean, s.std, report.units.as_str()))
        .unwrap_or_else(|| "n/a".into());
    println!(
        "{} {split}: DSC {:.4} ({:.4})  HD95 {hd}  folds {:.4}%  [{} pairs] -> {}",
        args.direction.as_str(),
        report.dsc.mean,
        report.dsc.std,
        100.0 * report.mean_fraction_nonpositive_jacobian,
        report.pairs.len(),
        out.display()
    );
    Ok(())
}

pub fn register(args: &RegisterArgs) -> CmdResult {
    let trainer = Trainer::load_checkpoint(&args.checkpoint, None).map_err(usage)?;
    let source = load_image_png(&args.source, "source").map_err(usage)?;
    let target = load_image_png(&args.target, "target").map_err(usage)?;
    if source.shape() != target.shape() {
        return Err(usage(format!(
            "source is {:?} but target is {:?}",
            source.shape(),
            target.shape()
        )));
    }
    let m = trainer.config().arch.size_multiple();
    let (h, w) = source.shape();
    if h % m != 0 || w % m != 0 {
        return Err(usage(format!("image size {h}x{w} must be a multiple of {m}")));
    }
    let mut manifest = RunManifest::new("register");
    manifest.seed = Some(trainer.config().seed);
    manifest.config_hash = Some(trainer.config().hash());
    let handle = manifest.write(&args.out)?;
    let res = (|| -> Result<DeformationField, Failure> {
        let field = trainer.register(&source, &target)?;
        let warped = defreg_core::warp(&source, &field, defreg_core::Interpolation::Bilinear)?;
        save_field_npy(&field, &args.out.join("field.npy"))?;
        save_image_png(&warped, &args.out.join("warped.png"))?;
        viz::save_rgb(
            &viz::grid_overlay(&field, warped.data().view(), args.grid_step)?,
            &args.out.join("grid.png"),
        )?;
        viz::save_rgb(&viz::displacement_hsv(&field), &args.out.join("displacement.png"))?;
        Ok(field)
    })();
    handle.finish(res.is_ok())?;
    let field = res?;
    println!(
        "mean |phi| {:.4} px, max |component| {:.4} px, folds {:.4}% -> {}",
        field.mean_magnitude(),
        field.max_abs_component(),
        100.0 * defreg_core::jacobian_stats(&field).fraction_nonpositive,
        args.out.display()
    );
    Ok(())
}
