// Criterion 7: four variants x three seeds on a small shapes dataset.
// Each run is cached under the cargo target tmpdir, keyed on the core
// sources, the run config and the dataset checksum. DEFREG_ACCEPTANCE_RERUN=1
// ignores the cache.

use std::path::{Path, PathBuf};

use defreg_core::training::{evaluate_with, fit, make_variant, FitOptions};
use defreg_core::{
    generate_shapes_splits, ArchConfig, DatasetSplits, DeformationField, ElasticDeformConfig,
    NceConfig, PairMetrics, TrainConfig, Trainer,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const SIZE: usize = 64;
const SPLIT_SIZES: [usize; 3] = [20, 4, 6];
const DATA_SEED: u64 = 11;
const SEEDS: [u64; 3] = [0, 1, 2];
const VARIANTS: [&str; 4] = ["full", "no_local", "no_global", "no_local_global"];
// within the "<= 200 epochs" budget; full-variant val DSC only falls after ~10
const EPOCHS: usize = 40;
const MIN_GAIN: f64 = 0.10;
const MIN_SEED_WINS: usize = 2;
const MAX_FOLDS: f64 = 0.05;

// Default elastic settings leave almost nothing to recover at 64 px.
fn elastic() -> ElasticDeformConfig {
    ElasticDeformConfig { control_grid_spacing: 24.0, max_displacement: 8.0, smoothing_sigma: 4.0, seed: 0 }
}

fn base_config() -> TrainConfig {
    TrainConfig {
        epochs: EPOCHS,
        decay_start_epoch: EPOCHS / 2,
        lr: 2e-4,
        checkpoint_interval: 2,
        arch: ArchConfig {
            reg_channels: vec![8, 16, 16, 32, 32],
            trans_base_channels: 8,
            trans_res_blocks: 4,
            trans_encoder_blocks: 2,
            embed_dim: 64,
        },
        // 2 encoder res blocks: the last tap is 5
        nce: NceConfig { num_locations: 64, layer_ids: vec![0, 2, 3, 4, 5], ..Default::default() },
        ..Default::default()
    }
}

#[derive(Serialize, Deserialize)]
struct RunResult {
    test_dsc: f64,
    test_folds: f64,
    best_val_dsc: Option<f64>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn summarize(m: &[PairMetrics]) -> (f64, f64) {
    (mean(m.iter().map(|p| p.mean_dice())), mean(m.iter().map(|p| p.jacobian.fraction_nonpositive)))
}

fn source_digest() -> String {
    let mut h = Sha256::new();
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("src");
    let mut files: Vec<PathBuf> = std::fs::read_dir(&src).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    for f in files {
        h.update(std::fs::read(&f).unwrap());
    }
    format!("{:x}", h.finalize())
}

fn run(splits: &DatasetSplits, cfg: &TrainConfig, key: &str, root: &Path) -> Result<RunResult, String> {
    let cache = root.join(format!("{key}.json"));
    if std::env::var("DEFREG_ACCEPTANCE_RERUN").is_err() {
        if let Some(r) = std::fs::read(&cache).ok().and_then(|b| serde_json::from_slice(&b).ok()) {
            return Ok(r);
        }
    }
    let dir = root.join(key);
    let _ = std::fs::remove_dir_all(&dir);
    let out = fit(splits, cfg, &FitOptions { write_samples: false, ..FitOptions::new(&dir) })
        .map_err(|e| e.to_string())?;
    let trainer = Trainer::load_checkpoint(&out.checkpoint_path, None).map_err(|e| e.to_string())?;
    let (m, _) = trainer.evaluate(&splits.test).map_err(|e| e.to_string())?;
    let (test_dsc, test_folds) = summarize(&m);
    let best_val_dsc = out.history.iter().filter_map(|h| h.val_dsc).reduce(f64::max);
    let r = RunResult { test_dsc, test_folds, best_val_dsc };
    std::fs::write(&cache, serde_json::to_vec_pretty(&r).unwrap()).map_err(|e| e.to_string())?;
    let _ = std::fs::remove_dir_all(&dir);
    Ok(r)
}

pub fn c7_desk_experiment() -> super::Outcome {
    let splits = generate_shapes_splits(SPLIT_SIZES, SIZE, &elastic(), DATA_SEED).map_err(|e| e.to_string())?;
    let (m, _) = evaluate_with(&splits.test, |_| DeformationField::identity(SIZE, SIZE))
        .map_err(|e| e.to_string())?;
    let (baseline, _) = summarize(&m);

    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-cache");
    std::fs::create_dir_all(&root).map_err(|e| e.to_string())?;
    let src = source_digest();
    let data = splits.checksum();

    // results[variant][seed]
    let mut results: Vec<Vec<RunResult>> = Vec::new();
    for v in VARIANTS {
        let mut row = Vec::new();
        for seed in SEEDS {
            let cfg = make_variant(&TrainConfig { seed, ..base_config() }, v).map_err(|e| e.to_string())?;
            let mut h = Sha256::new();
            h.update(&src);
            h.update(&data);
            h.update(serde_json::to_vec(&cfg).unwrap());
            let key = format!("{v}_{seed}_{}", &format!("{:x}", h.finalize())[..16]);
            let r = run(&splits, &cfg, &key, &root)?;
            eprintln!("  c7 {v} seed {seed}: test dsc {:.4} folds {:.4}", r.test_dsc, r.test_folds);
            row.push(r);
        }
        results.push(row);
    }

    let full = &results[0];
    let full_dsc = mean(full.iter().map(|r| r.test_dsc));
    let worst_folds = full.iter().map(|r| r.test_folds).fold(0.0, f64::max);
    let wins = (0..SEEDS.len())
        .filter(|&s| results[1..].iter().all(|abl| full[s].test_dsc >= abl[s].test_dsc))
        .count();
    let per_variant: Vec<String> = VARIANTS
        .iter()
        .zip(&results)
        .map(|(v, rs)| format!("{v} {:.4}", mean(rs.iter().map(|r| r.test_dsc))))
        .collect();
    let msg = format!(
        "baseline {baseline:.4}; {}; full wins {wins}/{} seeds; max full folds {:.2}%",
        per_variant.join(", "),
        SEEDS.len(),
        100.0 * worst_folds
    );
    let mut failed = Vec::new();
    if full_dsc < baseline + MIN_GAIN {
        failed.push(format!("gain {:+.4} < {MIN_GAIN}", full_dsc - baseline));
    }
    if wins < MIN_SEED_WINS {
        failed.push(format!("full beat every ablation on {wins} seeds"));
    }
    if worst_folds >= MAX_FOLDS {
        failed.push("folds >= 5%".into());
    }
    if failed.is_empty() { Ok(msg) } else { Err(format!("{msg} [{}]", failed.join("; "))) }
}
