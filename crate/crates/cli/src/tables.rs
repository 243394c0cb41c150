//! Table I and Table III reproduction across presets and seeds.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use cuot::experiment::{
    self, paper_table1, paper_table3, table1_limit, Method, Preset, Scale, Summary,
    ORDERING_DATASETS, OUTLIER_RANGES, RATIO_LIMIT, RATIO_RANGES,
};
use cuot::metrics::MetricsReport;
use cuot::synthdata::DatasetKind;
use cuot::trainer::{write_atomic, EvalOptions};
use serde::Serialize;

use crate::commands::{self, out_root, Result};
use crate::config::{ExperimentConfig, OutputConfig};
use crate::CliError;

#[derive(Args, Clone)]
pub struct TableArgs {
    /// `paper` (800 epochs, width 128) or `desk`.
    #[arg(long, default_value = "desk")]
    pub scale: String,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    /// Concurrent training processes.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Output root; `CUOT_OUT_DIR` or `runs` by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Trains whatever is missing for `presets × seeds`, then loads every report.
fn collect(args: &TableArgs, presets: &[Preset]) -> Result<Vec<(Preset, Vec<MetricsReport>)>> {
    let scale: Scale = args
        .scale
        .parse()
        .map_err(|e: experiment::PresetError| CliError::Config(e.0))?;
    let root = args.out.clone().unwrap_or_else(out_root);
    let mut pending = Vec::new();
    for p in presets {
        for &s in &args.seeds {
            let train = p.config(s, scale);
            let dir = experiment::run_dir(&root, p, scale, s);
            if experiment::cached(&dir, &train).is_none() {
                let cfg = ExperimentConfig {
                    train,
                    metric: EvalOptions::default(),
                    output: OutputConfig { dir: dir.clone() },
                }
                .resolved();
                fs::create_dir_all(&dir)?;
                write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
                pending.push(dir);
            }
        }
    }
    if !pending.is_empty() {
        log::info!("{} runs to train", pending.len());
        let codes = commands::run_parallel(&pending, args.jobs, None)?;
        for (c, d) in codes.iter().zip(&pending) {
            if *c != 0 {
                log::warn!("{} exited with {c}; see its train.log", d.display());
            }
        }
    }
    Ok(presets
        .iter()
        .map(|p| (*p, experiment::cached_reports(&root, p, scale, &args.seeds)))
        .collect())
}

fn summary(reports: &[MetricsReport], f: impl Fn(&MetricsReport) -> f64) -> Option<Summary> {
    (!reports.is_empty()).then(|| Summary::of(&reports.iter().map(f).collect::<Vec<_>>()))
}

fn cell(s: &Option<Summary>, scale: f64) -> String {
    match s {
        Some(s) => format!(
            "{:.2} ± {:.2} (best {:.2}, n={})",
            s.mean * scale,
            s.std * scale,
            s.best * scale,
            s.n
        ),
        None => "missing".into(),
    }
}

fn verdict(ok: Option<bool>) -> &'static str {
    match ok {
        Some(true) => "PASS",
        Some(false) => "FAIL",
        None => "MISSING",
    }
}

#[derive(Serialize)]
struct Table1Row {
    dataset: DatasetKind,
    cuotm_joint: Option<Summary>,
    cotm_joint: Option<Summary>,
    cuotm_joint_raw: Option<Summary>,
    cotm_joint_raw: Option<Summary>,
    cuotm_conditional: Option<Summary>,
    cotm_conditional: Option<Summary>,
    paper_cuotm: f64,
    paper_cotm: f64,
    /// Runs scored at their best checkpoint after diverging.
    diverged: (usize, usize),
}

fn diverged(reports: &[MetricsReport]) -> usize {
    reports.iter().filter(|r| r.diverged.is_some()).count()
}

fn find<'a>(all: &'a [(Preset, Vec<MetricsReport>)], want: Preset) -> &'a [MetricsReport] {
    all.iter()
        .find(|(p, _)| *p == want)
        .map_or(&[], |(_, r)| r.as_slice())
}

pub fn table1(args: &TableArgs) -> Result<()> {
    let all = collect(args, &Preset::table1())?;
    let mut rows = Vec::new();
    let mut md = String::from(
        "| dataset | CUOTM joint W2 (×10⁻²) | COTM joint W2 (×10⁻²) | paper CUOTM / COTM | diverged CUOTM / COTM |\n|---|---|---|---|---|\n",
    );
    let mut verdicts = String::new();
    for kind in DatasetKind::ALL {
        let u = find(
            &all,
            Preset::Clean {
                kind,
                method: Method::Cuotm,
            },
        );
        let b = find(
            &all,
            Preset::Clean {
                kind,
                method: Method::Cotm,
            },
        );
        let (pu, pb) = paper_table1(kind);
        let row = Table1Row {
            dataset: kind,
            cuotm_joint: summary(u, |r| r.joint_w2),
            cotm_joint: summary(b, |r| r.joint_w2),
            cuotm_joint_raw: summary(u, |r| r.joint_w2_raw),
            cotm_joint_raw: summary(b, |r| r.joint_w2_raw),
            cuotm_conditional: summary(u, |r| r.conditional_w2),
            cotm_conditional: summary(b, |r| r.conditional_w2),
            paper_cuotm: pu,
            paper_cotm: pb,
            diverged: (diverged(u), diverged(b)),
        };
        let _ = writeln!(
            md,
            "| {} | {} | {} | {pu:.2} / {pb:.2} | {} / {} |",
            kind.name(),
            cell(&row.cuotm_joint, 100.0),
            cell(&row.cotm_joint, 100.0),
            row.diverged.0,
            row.diverged.1
        );
        let limit = table1_limit(kind);
        let best = row.cuotm_joint.map(|s| s.best <= limit);
        let _ = writeln!(
            verdicts,
            "- {} {}: best CUOTM joint W2 <= {limit}",
            verdict(best),
            kind.name()
        );
        if ORDERING_DATASETS.contains(&kind) {
            let order = row
                .cuotm_joint
                .zip(row.cotm_joint)
                .map(|(u, b)| u.mean < b.mean);
            let _ = writeln!(
                verdicts,
                "- {} {}: CUOTM mean below COTM mean",
                verdict(order),
                kind.name()
            );
        }
        rows.push(row);
    }
    finish(args, "table1", &rows, &md, &verdicts, &all)
}

#[derive(Serialize)]
struct Table3Row {
    range: (f64, f64),
    cuotm_clean: Option<Summary>,
    cotm_clean: Option<Summary>,
    cuotm_contaminated: Option<Summary>,
    cotm_contaminated: Option<Summary>,
    best_ratio: Option<f64>,
    paper_cuotm: f64,
    paper_cotm: f64,
    diverged: (usize, usize),
}

pub fn table3(args: &TableArgs) -> Result<()> {
    let all = collect(args, &Preset::table3())?;
    let clean = |r: &MetricsReport| r.robust.as_ref().map_or(f64::NAN, |x| x.clean_w2);
    let cont = |r: &MetricsReport| r.robust.as_ref().map_or(f64::NAN, |x| x.contaminated_w2);
    let mut rows = Vec::new();
    let mut md = String::from(
        "| outlier range | CUOTM clean W2 | COTM clean W2 | best ratio | paper CUOTM / COTM (ratio) | diverged CUOTM / COTM |\n|---|---|---|---|---|---|\n",
    );
    let mut verdicts = String::new();
    for range in OUTLIER_RANGES.iter().rev().copied() {
        let u = find(
            &all,
            Preset::Outlier {
                range,
                method: Method::Cuotm,
            },
        );
        let b = find(
            &all,
            Preset::Outlier {
                range,
                method: Method::Cotm,
            },
        );
        let (pu, pb) = paper_table3(range);
        let cu = summary(u, clean);
        let cb = summary(b, clean);
        let ratio = cu.zip(cb).map(|(u, b)| u.best / b.best);
        let row = Table3Row {
            range,
            cuotm_clean: cu,
            cotm_clean: cb,
            cuotm_contaminated: summary(u, cont),
            cotm_contaminated: summary(b, cont),
            best_ratio: ratio,
            paper_cuotm: pu,
            paper_cotm: pb,
            diverged: (diverged(u), diverged(b)),
        };
        let _ = writeln!(
            md,
            "| [{}, {}] | {} | {} | {} | {pu:.3} / {pb:.3} ({:.2}) | {} / {} |",
            range.0,
            range.1,
            cell(&row.cuotm_clean, 1.0),
            cell(&row.cotm_clean, 1.0),
            ratio.map_or("missing".into(), |r| format!("{r:.2}")),
            pu / pb,
            row.diverged.0,
            row.diverged.1
        );
        if RATIO_RANGES.contains(&range) {
            let _ = writeln!(
                verdicts,
                "- {} [{}, {}]: best CUOTM clean W2 <= {RATIO_LIMIT} x best COTM",
                verdict(ratio.map(|r| r <= RATIO_LIMIT)),
                range.0,
                range.1
            );
        }
        rows.push(row);
    }
    finish(args, "table3", &rows, &md, &verdicts, &all)
}

/// Writes `<name>.json` and `<name>.md` and per-preset comparison plots.
fn finish<T: Serialize>(
    args: &TableArgs,
    name: &str,
    rows: &T,
    md: &str,
    verdicts: &str,
    all: &[(Preset, Vec<MetricsReport>)],
) -> Result<()> {
    let scale: Scale = args
        .scale
        .parse()
        .map_err(|e: experiment::PresetError| CliError::Config(e.0))?;
    let root = args.out.clone().unwrap_or_else(out_root);
    let dir = root.join(&args.scale);
    fs::create_dir_all(&dir)?;
    let text = format!("{md}\n{verdicts}");
    write_atomic(
        &dir.join(format!("{name}.json")),
        serde_json::to_string_pretty(rows)?.as_bytes(),
    )?;
    write_atomic(&dir.join(format!("{name}.md")), text.as_bytes())?;
    print!("{text}");
    figures(
        &root,
        &dir.join(format!("{name}-figures")),
        args.seeds.first().copied(),
        scale,
        all,
    )
}

/// Target, COTM and CUOTM side by side for the first seed of each pairing.
fn figures(
    root: &Path,
    out: &Path,
    seed: Option<u64>,
    scale: Scale,
    all: &[(Preset, Vec<MetricsReport>)],
) -> Result<()> {
    let Some(seed) = seed else { return Ok(()) };
    for (p, _) in all.iter().filter(|(p, _)| p.method() == Some(Method::Cotm)) {
        let partner = match *p {
            Preset::Clean { kind, .. } => Preset::Clean {
                kind,
                method: Method::Cuotm,
            },
            Preset::Outlier { range, .. } => Preset::Outlier {
                range,
                method: Method::Cuotm,
            },
            Preset::Smoke => continue,
        };
        let runs = [
            experiment::run_dir(root, p, scale, seed),
            experiment::run_dir(root, &partner, scale, seed),
        ];
        if runs
            .iter()
            .all(|r| r.join(experiment::SAMPLES_FILE).exists())
        {
            let label = partner.to_string().trim_end_matches("-cuotm").to_string();
            commands::plot(&runs, None, Some(out.join(label)), 64)?;
        }
    }
    Ok(())
}
