use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{draw_step, train_step, Batch, BatchSampler, Optimizer, StepDraws, TrainConfig};
use crate::consistency::TeacherStudent;
use crate::data::{split, ClassMap, Dataset, Sample, SplitSpec};
use crate::error::{Error, Result};
use crate::metrics::{write_csv_header, write_csv_row, ConfusionMatrix, MetricRow};
use crate::rng::Purpose;
use crate::segnet::{Network, SegNetwork};
use crate::tensor::Tensor;

pub const VERSION: &str = concat!("segcons ", env!("CARGO_PKG_VERSION"));

const EVAL_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

/// Confusion matrix and mIoU of `net` on `samples`. Chunks are evaluated
/// on separate threads and merged; the counts, hence the result, do not
/// depend on the sharding.
pub fn evaluate<N: Network + Sync>(net: &N, samples: &[Sample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let classes = net.num_classes();
    let chunks: Vec<&[Sample]> = samples.chunks(EVAL_CHUNK).collect();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(chunks.len());
    let per_thread = chunks.len().div_ceil(threads);
    let partial: Vec<Result<ConfusionMatrix>> = std::thread::scope(|s| {
        let handles: Vec<_> = chunks
            .chunks(per_thread)
            .map(|group| {
                s.spawn(move || {
                    let mut cm = ConfusionMatrix::new(classes);
                    for chunk in group {
                        let images: Vec<Tensor> = chunk.iter().map(|s| s.image.clone()).collect();
                        let logits = net.predict(&Tensor::stack(&images)?)?;
                        for (scores, s) in logits.unstack()?.iter().zip(*chunk) {
                            cm.accumulate(&ClassMap::from_scores(scores)?, &s.class_map)?;
                        }
                    }
                    Ok(cm)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
    });
    let mut cm = ConfusionMatrix::new(classes);
    for p in partial {
        cm.merge(&p?)?;
    }
    let m = cm.miou()?;
    Ok(EvalReport {
        miou: m.miou,
        per_class: m.per_class,
        confusion: cm,
    })
}

/// SHA-256 over the canonical JSON of the training config and split.
pub fn config_hash(cfg: &TrainConfig, spec: &SplitSpec) -> Result<String> {
    let text = serde_json::to_string(&(cfg, spec))?;
    Ok(Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub overlap: f64,
    pub train: usize,
    pub val: usize,
}

impl DatasetSummary {
    pub fn of(d: &Dataset) -> Self {
        Self {
            height: d.height,
            width: d.width,
            classes: d.classes,
            overlap: d.overlap,
            train: d.train.len(),
            val: d.val.len(),
        }
    }
}

/// `manifest.json` of a run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub dataset: DatasetSummary,
    /// The caller's fully resolved configuration, verbatim.
    pub resolved: Option<serde_json::Value>,
    /// Filled in when the run finishes.
    pub final_miou: Option<f64>,
    pub best_miou: Option<f64>,
    pub best_step: Option<usize>,
}

/// Where and under which name a run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub run_id: String,
    pub resolved: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub run_id: String,
    pub seed: u64,
    pub config_hash: String,
    pub final_eval: EvalReport,
    pub best_miou: f64,
    /// Number of completed steps at the best evaluation.
    pub best_step: usize,
    pub rows: Vec<MetricRow>,
}

struct Sinks {
    csv: BufWriter<File>,
    replay: Option<BufWriter<File>>,
    dir: PathBuf,
}

impl Sinks {
    fn open(out: &RunOutput, replay: bool) -> Result<Self> {
        fs::create_dir_all(&out.dir)?;
        let mut csv = BufWriter::new(File::create(out.dir.join("metrics.csv"))?);
        write_csv_header(&mut csv)?;
        let replay = if replay {
            Some(BufWriter::new(File::create(out.dir.join("replay.jsonl"))?))
        } else {
            None
        };
        Ok(Self {
            csv,
            replay,
            dir: out.dir.clone(),
        })
    }

    fn row(&mut self, row: &MetricRow) -> Result<()> {
        write_csv_row(&mut self.csv, row)
    }

    fn draws(&mut self, d: &StepDraws) -> Result<()> {
        if let Some(w) = self.replay.as_mut() {
            serde_json::to_writer(&mut *w, d)?;
            writeln!(w)?;
        }
        Ok(())
    }

    fn checkpoint(&self, ts: &TeacherStudent<SegNetwork>, tag: &str) -> Result<()> {
        let dir = self.dir.join("checkpoints");
        fs::create_dir_all(&dir)?;
        ts.teacher.save(&dir.join(format!("teacher_{tag}.ckpt")))?;
        ts.student.save(&dir.join(format!("student_{tag}.ckpt")))?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.csv.flush()?;
        if let Some(w) = self.replay.as_mut() {
            w.flush()?;
        }
        Ok(())
    }
}

fn write_manifest(dir: &Path, m: &RunManifest) -> Result<()> {
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(m)?)?;
    Ok(())
}

/// Trains a teacher/student pair from scratch and evaluates the teacher on
/// the validation set every `eval_interval` steps and after the last step.
///
/// The result, and every file written under `out`, is a pure function of
/// the config, the dataset and the split. Rows carry training losses every
/// step (`train/loss_sup`, `train/loss_cons`, `train/loss`) and `val/miou`
/// plus `val/iou_<class>` at each evaluation.
pub fn run_experiment(
    cfg: &TrainConfig,
    dataset: &Dataset,
    spec: &SplitSpec,
    out: Option<&RunOutput>,
) -> Result<RunResult> {
    cfg.validate()?;
    if cfg.arch.classes != dataset.classes || cfg.arch.in_channels != 3 {
        return Err(Error::Data(format!(
            "network expects {} input channels and {} classes, dataset has 3 and {}",
            cfg.arch.in_channels, cfg.arch.classes, dataset.classes
        )));
    }
    let parts = split(&dataset.train, spec)?;
    if parts.labelled.is_empty() {
        return Err(Error::Data("the split has no labelled samples".into()));
    }
    let hash = config_hash(cfg, spec)?;
    let run_id = out.map_or_else(|| format!("{}-s{}", &hash[..12], cfg.seed), |o| o.run_id.clone());

    let mut manifest = RunManifest {
        run_id: run_id.clone(),
        version: VERSION.into(),
        seed: cfg.seed,
        config_hash: hash.clone(),
        train: cfg.clone(),
        split: spec.clone(),
        dataset: DatasetSummary::of(dataset),
        resolved: out.and_then(|o| o.resolved.clone()),
        final_miou: None,
        best_miou: None,
        best_step: None,
    };
    let mut sinks = match out {
        Some(o) => {
            let s = Sinks::open(o, cfg.replay_log)?;
            write_manifest(&o.dir, &manifest)?;
            Some(s)
        }
        None => None,
    };

    let net = SegNetwork::build(cfg.arch.clone(), cfg.seed)?;
    net.check_input(&[1, 3, dataset.height, dataset.width])?;
    let mut ts = TeacherStudent::new(net, cfg.ema_decay)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.weight_decay, ts.student.params());
    let mut lab = BatchSampler::new(parts.labelled.len(), cfg.seed, Purpose::LabelledBatches)?;
    let mut unl = if cfg.uses_unlabelled() && !parts.unlabelled.is_empty() {
        Some(BatchSampler::new(parts.unlabelled.len(), cfg.seed, Purpose::UnlabelledBatches)?)
    } else {
        None
    };
    let fill = dataset.mean_colour();
    let pairs = cfg.consistency.mode.needs_pairs();

    let mut rows = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    let mut last = None;
    for step in 0..cfg.steps {
        let draws = draw_step(cfg, step, &mut lab, unl.as_mut(), dataset.height, dataset.width)?;
        let batch = Batch::gather(&parts, &draws, pairs)?;
        let report = match train_step(&mut ts, &mut opt, &batch, &draws, cfg, &fill) {
            Ok(r) => r,
            Err(e) => {
                if let Some(s) = sinks.as_mut() {
                    s.draws(&draws)?;
                    s.flush()?;
                }
                return Err(e);
            }
        };
        let done = step + 1;
        let mut emit = |row: MetricRow, sinks: &mut Option<Sinks>| -> Result<()> {
            if let Some(s) = sinks.as_mut() {
                s.row(&row)?;
            }
            rows.push(row);
            Ok(())
        };
        if let Some(s) = sinks.as_mut() {
            s.draws(&draws)?;
        }
        emit(MetricRow::new(&run_id, done, "train", "loss_sup", report.sup), &mut sinks)?;
        emit(MetricRow::new(&run_id, done, "train", "loss_cons", report.cons), &mut sinks)?;
        emit(MetricRow::new(&run_id, done, "train", "loss", report.total), &mut sinks)?;

        if done % cfg.eval_interval == 0 || done == cfg.steps {
            let eval = evaluate(&ts.teacher, &dataset.val)?;
            emit(MetricRow::new(&run_id, done, "val", "miou", eval.miou), &mut sinks)?;
            for (c, iou) in eval.per_class.iter().enumerate() {
                if let Some(v) = iou {
                    emit(MetricRow::new(&run_id, done, "val", &format!("iou_{c}"), *v), &mut sinks)?;
                }
            }
            if best.is_none_or(|(b, _)| eval.miou > b) {
                best = Some((eval.miou, done));
            }
            last = Some(eval);
        }
        if let (Some(s), Some(k)) = (sinks.as_ref(), cfg.checkpoint_interval) {
            if done % k == 0 && done != cfg.steps {
                s.checkpoint(&ts, &format!("{done:06}"))?;
            }
        }
    }

    let final_eval = last.expect("the last step always evaluates");
    let (best_miou, best_step) = best.expect("the last step always evaluates");
    if let (Some(s), Some(o)) = (sinks.as_mut(), out) {
        s.checkpoint(&ts, "final")?;
        s.flush()?;
        manifest.final_miou = Some(final_eval.miou);
        manifest.best_miou = Some(best_miou);
        manifest.best_step = Some(best_step);
        write_manifest(&o.dir, &manifest)?;
    }
    Ok(RunResult {
        run_id,
        seed: cfg.seed,
        config_hash: hash,
        final_eval,
        best_miou,
        best_step,
        rows,
    })
}

/// Mean and population standard deviation, in the "mean ± std" style of
/// multi-seed tables. `None` for an empty slice.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}
