//! Tables and learning curves built from run directories alone.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use segcons::metrics::{parse_csv, MetricRow};
use segcons::trainer::{mean_std, RunManifest};

use crate::plot::{line_plot, Series};
use crate::Failure;

/// `mean ± std` in percent, the style of multi-seed mIoU tables.
pub fn pm(mean: f64, std: f64) -> String {
    format!("{:.2} ± {:.2}", 100.0 * mean, 100.0 * std)
}

#[derive(Clone, Debug)]
pub struct CompletedRun {
    pub manifest: RunManifest,
    pub rows: Vec<MetricRow>,
}

impl CompletedRun {
    pub fn final_miou(&self) -> f64 {
        self.manifest.final_miou.expect("completed runs have a final mIoU")
    }

    pub fn curve(&self) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.split == "val" && r.metric == "miou")
            .map(|r| (r.step as f64, r.value))
            .collect()
    }
}

/// Table row: mode, colour switch and weight.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct RowKey {
    pub mode: String,
    pub colour: bool,
    pub gamma: String,
}

impl RowKey {
    fn label(&self) -> String {
        format!(
            "{} {} γ={}",
            self.mode,
            if self.colour { "+colour" } else { "-colour" },
            self.gamma
        )
    }
}

/// Table column: labelled count out of the pool.
pub type ColKey = (usize, usize);

fn find_runs(root: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    if root.join("manifest.json").is_file() {
        out.push(root.to_path_buf());
        return Ok(());
    }
    if root.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(root)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        entries.sort();
        for e in entries.iter().filter(|e| e.is_dir()) {
            find_runs(e, out)?;
        }
    }
    Ok(())
}

fn load_run(dir: &Path) -> Result<CompletedRun, String> {
    let text = fs::read_to_string(dir.join("manifest.json")).map_err(|e| format!("manifest: {e}"))?;
    let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| format!("manifest: {e}"))?;
    if manifest.final_miou.is_none() {
        return Err("run did not finish".into());
    }
    let csv = fs::read_to_string(dir.join("metrics.csv")).map_err(|e| format!("metrics.csv: {e}"))?;
    let rows = parse_csv(&csv).map_err(|e| format!("metrics.csv: {e}"))?;
    Ok(CompletedRun {
        manifest,
        rows,
    })
}

/// Completed runs under `roots`; incomplete ones are reported on stderr
/// and skipped.
pub fn collect(roots: &[PathBuf]) -> (Vec<CompletedRun>, Vec<(PathBuf, String)>) {
    let mut dirs = Vec::new();
    let mut skipped = Vec::new();
    for r in roots {
        if let Err(e) = find_runs(r, &mut dirs) {
            skipped.push((r.clone(), e.to_string()));
        }
        if !r.exists() {
            skipped.push((r.clone(), "no such directory".into()));
        }
    }
    let mut runs = Vec::new();
    for d in dirs {
        match load_run(&d) {
            Ok(r) => runs.push(r),
            Err(e) => skipped.push((d, e)),
        }
    }
    (runs, skipped)
}

pub type Grid<'a> = BTreeMap<RowKey, BTreeMap<ColKey, Vec<&'a CompletedRun>>>;

pub fn grid(runs: &[CompletedRun]) -> Grid<'_> {
    let mut g: Grid = BTreeMap::new();
    for r in runs {
        let t = &r.manifest.train;
        let key = RowKey {
            mode: t.consistency.mode.name().into(),
            colour: t.augment.colour,
            gamma: format!("{}", t.consistency.gamma),
        };
        let col = (r.manifest.split.labelled_count, r.manifest.split.total);
        g.entry(key).or_default().entry(col).or_default().push(r);
    }
    g
}

/// The text table and the CSV with one line per cell.
pub fn tables(g: &Grid<'_>) -> (String, String) {
    let mut cols: Vec<ColKey> = g.values().flat_map(|c| c.keys().copied()).collect();
    cols.sort_unstable();
    cols.dedup();
    let header: Vec<String> = cols.iter().map(|(l, t)| format!("{l}/{t} labelled")).collect();
    let labels: Vec<String> = g.keys().map(RowKey::label).collect();
    let first = labels.iter().map(|l| l.chars().count()).max().unwrap_or(0).max(6);
    const CELL: usize = 22;

    let mut text = format!("Performance (mIoU, %, mean ± std over seeds)\n{:first$}", "Method");
    for h in &header {
        text.push_str(&format!(" | {h:>CELL$}"));
    }
    text.push('\n');
    let mut csv = String::from("mode,colour_aug,gamma,labelled,total,runs,miou_mean,miou_std\n");
    for (key, label) in g.keys().zip(&labels) {
        text.push_str(&format!("{label:first$}"));
        for col in &cols {
            let cell = match g[key].get(col) {
                Some(runs) => {
                    let finals: Vec<f64> = runs.iter().map(|r| r.final_miou()).collect();
                    let (m, s) = mean_std(&finals).expect("cells are non-empty");
                    csv.push_str(&format!(
                        "{},{},{},{},{},{},{:?},{:?}\n",
                        key.mode,
                        key.colour,
                        key.gamma,
                        col.0,
                        col.1,
                        finals.len(),
                        m,
                        s
                    ));
                    format!("{} (n={})", pm(m, s), finals.len())
                }
                None => "-".into(),
            };
            text.push_str(&format!(" | {cell:>CELL$}"));
        }
        text.push('\n');
    }
    (text, csv)
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' })
        .collect()
}

pub fn report(roots: &[PathBuf], out: &Path) -> Result<(), Failure> {
    let (runs, skipped) = collect(roots);
    for (dir, why) in &skipped {
        eprintln!("warning: skipping {}: {why}", dir.display());
    }
    if runs.is_empty() {
        return Err(Failure::Data("no completed runs found".into()));
    }
    let g = grid(&runs);
    let (text, csv) = tables(&g);
    fs::create_dir_all(out.join("plots"))?;
    fs::write(out.join("report.txt"), &text)?;
    fs::write(out.join("report.csv"), &csv)?;
    print!("{text}");
    for (key, cols) in &g {
        for (&(l, t), cell) in cols {
            let series: Vec<Series> = cell
                .iter()
                .map(|r| Series {
                    label: format!("seed {}", r.manifest.seed),
                    points: r.curve(),
                })
                .collect();
            let title = format!("{} ({l}/{t} labelled)", key.label());
            let svg = line_plot(&title, "step", "validation mIoU", &series, Some((0.0, 1.0)));
            let file = out.join("plots").join(format!("{}_l{l}.svg", slug(&key.label())));
            fs::write(file, svg)?;
        }
    }
    println!("wrote {} and {}", out.join("report.txt").display(), out.join("plots").display());
    Ok(())
}
