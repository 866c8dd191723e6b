use std::fs;
use std::path::{Path, PathBuf};

use segcons::data::{gen_shapes_dataset, load_dataset, save_dataset, Dataset};
use segcons::metrics::{write_csv_header, write_csv_row, MetricRow};
use segcons::segnet::SegNetwork;
use segcons::trainer::{evaluate, mean_std, run_experiment, RunOutput};

use crate::config::{ExperimentConfig, Overrides};
use crate::Failure;

fn summary(path: &Path, d: &Dataset) -> String {
    let freq = Dataset::class_frequencies(&d.train, d.classes);
    let freq: Vec<String> = freq.iter().map(|f| format!("{f:.3}")).collect();
    format!(
        "{}: C={} H={} W={} train={} val={} overlap={} class_freq=[{}]",
        path.display(),
        d.classes,
        d.height,
        d.width,
        d.train.len(),
        d.val.len(),
        d.overlap,
        freq.join(", ")
    )
}

fn with_overlap_suffix(path: &Path, overlap: f64) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}_k{overlap}.{}", ext.to_string_lossy()),
        None => format!("{stem}_k{overlap}"),
    };
    path.with_file_name(name)
}

pub fn gen(config: Option<&Path>, out: &Path, seed: Option<u64>, overlaps: &[f64]) -> Result<(), Failure> {
    let (cfg, _) = ExperimentConfig::load(config)?;
    let seed = seed.unwrap_or(cfg.data_seed);
    let jobs: Vec<(PathBuf, f64)> = match overlaps {
        [] => vec![(out.to_path_buf(), cfg.generate.overlap)],
        [k] => vec![(out.to_path_buf(), *k)],
        ks => ks.iter().map(|&k| (with_overlap_suffix(out, k), k)).collect(),
    };
    for (path, overlap) in jobs {
        let mut g = cfg.generate.clone();
        g.overlap = overlap;
        let d = gen_shapes_dataset(&g, seed)?;
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        save_dataset(&path, &d)?;
        println!("{}", summary(&path, &d));
    }
    Ok(())
}

pub fn train(
    config: Option<&Path>,
    dataset: Option<&Path>,
    root: &Path,
    name: Option<&str>,
    o: &Overrides,
) -> Result<(), Failure> {
    let (cfg, explicit) = ExperimentConfig::load(config)?;
    let cfg = cfg.resolve(explicit, o)?;
    let data = match dataset {
        Some(p) => load_dataset(p)?,
        None => gen_shapes_dataset(&cfg.generate, cfg.data_seed)?,
    };
    let name = name.map_or_else(|| cfg.run_name(), str::to_owned);
    let exp_dir = root.join(&name);
    fs::create_dir_all(&exp_dir)?;
    fs::write(exp_dir.join("config.toml"), cfg.to_toml())?;

    let first = cfg.train.seed;
    let mut finals = Vec::new();
    let mut agg = Vec::new();
    for seed in first..first + cfg.seeds as u64 {
        let mut run_cfg = cfg.clone();
        run_cfg.train.seed = seed;
        run_cfg.seeds = 1;
        let spec = cfg.split_spec(data.train.len(), seed)?;
        let out = RunOutput {
            dir: exp_dir.join(format!("seed_{seed}")),
            run_id: format!("{name}-s{seed}"),
            resolved: Some(serde_json::to_value(&run_cfg).map_err(|e| Failure::Config(e.to_string()))?),
        };
        let r = run_experiment(&run_cfg.train, &data, &spec, Some(&out))?;
        println!(
            "{}: final mIoU {:.4}, best {:.4} at step {}",
            r.run_id, r.final_eval.miou, r.best_miou, r.best_step
        );
        agg.push(MetricRow::new(&r.run_id, cfg.train.steps, "final", "miou", r.final_eval.miou));
        finals.push(r.final_eval.miou);
    }
    let (mean, std) = mean_std(&finals).expect("at least one seed");
    agg.push(MetricRow::new(&name, cfg.train.steps, "aggregate", "miou_mean", mean));
    agg.push(MetricRow::new(&name, cfg.train.steps, "aggregate", "miou_std", std));
    let mut w = Vec::new();
    write_csv_header(&mut w)?;
    for row in &agg {
        write_csv_row(&mut w, row)?;
    }
    fs::write(exp_dir.join("aggregate.csv"), w)?;
    println!("{name}: mIoU {} over {} seed(s)", crate::report::pm(mean, std), finals.len());
    Ok(())
}

pub fn eval(checkpoint: &Path, dataset: &Path, train_split: bool) -> Result<(), Failure> {
    let net = SegNetwork::load(checkpoint)?;
    let data = load_dataset(dataset)?;
    if net.arch().classes != data.classes {
        return Err(Failure::Data(format!(
            "checkpoint predicts {} classes, dataset has {}",
            net.arch().classes,
            data.classes
        )));
    }
    let samples = if train_split { &data.train } else { &data.val };
    let r = evaluate(&net, samples)?;
    println!("mIoU {:.6}", r.miou);
    for (c, iou) in r.per_class.iter().enumerate() {
        match iou {
            Some(v) => println!("class {c}: IoU {v:.6}"),
            None => println!("class {c}: absent"),
        }
    }
    Ok(())
}
