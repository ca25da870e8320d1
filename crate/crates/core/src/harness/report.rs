use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::run::RunRecord;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Contents of `results.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub schema_version: u32,
    pub runs: Vec<RunRecord>,
}

impl ResultsFile {
    pub fn new(runs: Vec<RunRecord>) -> Self {
        ResultsFile {
            schema_version: SCHEMA_VERSION,
            runs,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ResultsFile = serde_json::from_str(&text)?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "{}: schema_version {} (expected {SCHEMA_VERSION})",
                path.display(),
                file.schema_version
            )));
        }
        Ok(file)
    }
}

type GroupKey = (String, String, String);

fn key(r: &RunRecord) -> GroupKey {
    (r.benchmark.to_string(), r.method.clone(), r.variant.clone())
}

/// Runs grouped by benchmark, method and variant, in first-seen order.
fn groups(runs: &[RunRecord]) -> Vec<(GroupKey, Vec<&RunRecord>)> {
    let mut out: Vec<(GroupKey, Vec<&RunRecord>)> = Vec::new();
    for r in runs {
        let k = key(r);
        match out.iter_mut().find(|(g, _)| *g == k) {
            Some((_, v)) => v.push(r),
            None => out.push((k, vec![r])),
        }
    }
    out
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Seed-averaged final accuracy per task.
pub fn final_accuracy_csv(runs: &[RunRecord]) -> String {
    let mut s = String::from("benchmark,method,variant,task,accuracy\n");
    for ((b, m, v), rs) in groups(runs) {
        let n = rs[0].final_accuracy.len();
        for task in 0..n {
            let acc = mean(rs.iter().map(|r| r.final_accuracy.get(task).copied().unwrap_or(f64::NAN)));
            let _ = writeln!(s, "{b},{m},{v},{},{acc}", task + 1);
        }
    }
    s
}

pub fn final_accuracy_by_seed_csv(runs: &[RunRecord]) -> String {
    let mut s = String::from("benchmark,method,variant,seed,task,accuracy\n");
    for r in runs {
        for (task, acc) in r.final_accuracy.iter().enumerate() {
            let _ = writeln!(s, "{},{},{},{},{},{acc}", r.benchmark, r.method, r.variant, r.seed, task + 1);
        }
    }
    s
}

/// Per-seed backward transfer plus a `mean` row per group.
pub fn backward_transfer_csv(runs: &[RunRecord]) -> String {
    let mut s = String::from("benchmark,method,variant,seed,backward_transfer\n");
    for ((b, m, v), rs) in groups(runs) {
        let vals: Vec<(u64, f64)> = rs
            .iter()
            .filter_map(|r| r.backward_transfer.map(|bt| (r.seed, bt)))
            .collect();
        if vals.is_empty() {
            continue;
        }
        for (seed, bt) in &vals {
            let _ = writeln!(s, "{b},{m},{v},{seed},{bt}");
        }
        let _ = writeln!(s, "{b},{m},{v},mean,{}", mean(vals.iter().map(|x| x.1)));
    }
    s
}

pub fn curves_csv(runs: &[RunRecord]) -> String {
    let mut s = String::from("benchmark,method,variant,seed,trained_task,epoch,eval_task,accuracy\n");
    for r in runs {
        for row in &r.results.traces {
            for (j, acc) in row.accuracy.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{acc}",
                    r.benchmark,
                    r.method,
                    r.variant,
                    r.seed,
                    row.trained_task,
                    row.epoch,
                    j + 1
                );
            }
        }
    }
    s
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// One panel per run: test accuracy of every task against cumulative
/// training epochs, with dashed lines at task boundaries.
pub fn curves_svg(runs: &[RunRecord]) -> String {
    const W: f64 = 560.0;
    const PANEL: f64 = 220.0;
    const LEFT: f64 = 50.0;
    const RIGHT: f64 = 110.0;
    const TOP: f64 = 28.0;
    const BOTTOM: f64 = 28.0;
    let height = (PANEL * runs.len() as f64).max(PANEL);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{height}\" \
         viewBox=\"0 0 {W} {height}\" font-family=\"sans-serif\" font-size=\"11\">"
    );
    let _ = writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    if runs.is_empty() {
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\">no runs</text>", LEFT, PANEL / 2.0);
    }
    for (p, r) in runs.iter().enumerate() {
        let y0 = p as f64 * PANEL;
        let (pw, ph) = (W - LEFT - RIGHT, PANEL - TOP - BOTTOM);
        let traces = &r.results.traces;
        let steps = traces.len().max(1) as f64;
        let px = |i: usize| LEFT + pw * (i as f64 + 1.0) / steps;
        let py = |a: f64| y0 + TOP + ph * (1.0 - a.clamp(0.0, 1.0));
        let _ = writeln!(
            s,
            "<text x=\"{LEFT}\" y=\"{}\" font-weight=\"bold\">{} {} {} seed {}</text>",
            y0 + 16.0,
            r.benchmark,
            r.method,
            r.variant,
            r.seed
        );
        let _ = writeln!(
            s,
            "<rect x=\"{LEFT}\" y=\"{}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#444\"/>",
            y0 + TOP
        );
        for tick in [0.0, 0.5, 1.0] {
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{tick:.1}</text>",
                LEFT - 6.0,
                py(tick) + 4.0
            );
        }
        for (i, w) in traces.windows(2).enumerate() {
            if w[0].trained_task != w[1].trained_task {
                let x = (px(i) + px(i + 1)) / 2.0;
                let _ = writeln!(
                    s,
                    "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"#bbb\" stroke-dasharray=\"4 3\"/>",
                    y0 + TOP,
                    y0 + TOP + ph
                );
            }
        }
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">epoch</text>",
            LEFT + pw / 2.0,
            y0 + PANEL - 8.0
        );
        for j in 0..r.results.n_tasks {
            let color = PALETTE[j % PALETTE.len()];
            let points: Vec<String> = traces
                .iter()
                .enumerate()
                .filter(|(_, row)| row.trained_task >= j + 1)
                .map(|(i, row)| format!("{:.1},{:.1}", px(i), py(row.accuracy[j])))
                .collect();
            if !points.is_empty() {
                let _ = writeln!(
                    s,
                    "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
                    points.join(" ")
                );
            }
            let ly = y0 + TOP + 14.0 * j as f64 + 8.0;
            let lx = W - RIGHT + 12.0;
            let _ = writeln!(
                s,
                "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>",
                lx + 16.0
            );
            let _ = writeln!(s, "<text x=\"{}\" y=\"{}\">task {}</text>", lx + 22.0, ly + 4.0, j + 1);
        }
    }
    s.push_str("</svg>\n");
    s
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `results.json`, `final_accuracy.csv`, `final_accuracy_by_seed.csv`,
/// `backward_transfer.csv`, `curves.csv` and `curves.svg` into `out_dir`.
pub fn emit_reports(runs: &[RunRecord], out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    super::write_json(&out_dir.join("results.json"), &ResultsFile::new(runs.to_vec()))?;
    regenerate_reports(runs, out_dir)
}

/// Everything `emit_reports` writes except `results.json`.
pub fn regenerate_reports(runs: &[RunRecord], out_dir: &Path) -> Result<()> {
    write(&out_dir.join("final_accuracy.csv"), &final_accuracy_csv(runs))?;
    write(&out_dir.join("final_accuracy_by_seed.csv"), &final_accuracy_by_seed_csv(runs))?;
    write(&out_dir.join("backward_transfer.csv"), &backward_transfer_csv(runs))?;
    write(&out_dir.join("curves.csv"), &curves_csv(runs))?;
    write(&out_dir.join("curves.svg"), &curves_svg(runs))
}

/// Non-deterministic run information, kept out of `results.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunMeta {
    pub command: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub elapsed_seconds: f64,
    pub host: Option<String>,
    pub version: String,
}

pub fn write_run_meta(out_dir: &Path, command: &str, started: std::time::SystemTime) -> Result<()> {
    let unix = |t: std::time::SystemTime| t.duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let now = std::time::SystemTime::now();
    let meta = RunMeta {
        command: command.to_string(),
        started_unix: unix(started),
        finished_unix: unix(now),
        elapsed_seconds: now.duration_since(started).map(|d| d.as_secs_f64()).unwrap_or(0.0),
        host: std::env::var("HOSTNAME").ok(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    super::write_json(&out_dir.join("run_meta.json"), &meta)
}
