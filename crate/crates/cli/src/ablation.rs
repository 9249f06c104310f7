//! Alpha sweeps: one full train-and-evaluate run per (alpha, seed).

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::commands::{run_train, CliError, CliResult};
use crate::config::RunConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunScores {
    pub alpha: f64,
    pub seed: u64,
    pub miou: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n - 1); zero for a single run.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub alpha: f64,
    pub miou: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ablation {
    pub runs: Vec<RunScores>,
    pub rows: Vec<AblationRow>,
}

fn run_dir(out: &Path, alpha: f64, seed: u64) -> PathBuf {
    out.join(format!("alpha_{alpha}")).join(format!("seed_{seed}"))
}

fn one_run(base: &RunConfig, out: &Path, alpha: f64, seed: u64) -> CliResult<RunScores> {
    let mut cfg = base.clone();
    cfg.hp.alpha = alpha;
    cfg.hp.seed = seed;
    let dir = run_dir(out, alpha, seed);
    cfg.output_dir = dir.clone();
    let outcome = run_train(&cfg, &dir, false)?;
    let report = outcome.report.ok_or_else(|| {
        CliError::Usage("ablation needs an evaluation split with ground-truth masks".into())
    })?;
    Ok(RunScores {
        alpha,
        seed,
        miou: report.mean_iou,
        precision: report.precision,
        recall: report.recall,
    })
}

/// Every (alpha, seed) pair, sequentially unless `parallel`; results come back
/// in (alpha, seed) order either way.
pub fn run_ablation(
    base: &RunConfig,
    alphas: &[f64],
    seeds: &[u64],
    out: &Path,
    parallel: bool,
) -> CliResult<Ablation> {
    if alphas.is_empty() || seeds.is_empty() {
        return Err(CliError::Usage("ablation needs at least one alpha and one seed".into()));
    }
    base.validate()?;
    let jobs: Vec<(f64, u64)> = alphas
        .iter()
        .flat_map(|&a| seeds.iter().map(move |&s| (a, s)))
        .collect();
    let runs: Vec<RunScores> = if parallel {
        let width = std::thread::available_parallelism().map_or(1, |n| n.get());
        let mut done = Vec::with_capacity(jobs.len());
        for chunk in jobs.chunks(width) {
            let results: Vec<CliResult<RunScores>> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|&(a, seed)| s.spawn(move || one_run(base, out, a, seed)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("ablation worker panicked"))
                    .collect()
            });
            for r in results {
                done.push(r?);
            }
        }
        done
    } else {
        jobs.iter()
            .map(|&(a, s)| {
                eprintln!("ablation: alpha={a} seed={s}");
                one_run(base, out, a, s)
            })
            .collect::<CliResult<_>>()?
    };
    let rows = alphas
        .iter()
        .map(|&alpha| {
            let mine: Vec<&RunScores> = runs.iter().filter(|r| r.alpha == alpha).collect();
            let pick = |f: fn(&RunScores) -> f64| MeanStd::of(&mine.iter().map(|r| f(r)).collect::<Vec<_>>());
            AblationRow {
                alpha,
                miou: pick(|r| r.miou),
                precision: pick(|r| r.precision),
                recall: pick(|r| r.recall),
            }
        })
        .collect();
    Ok(Ablation { runs, rows })
}

impl Ablation {
    /// Percentages, `mean ± std` per column.
    pub fn to_table(&self) -> String {
        let cell = |m: MeanStd| format!("{:6.2} ± {:5.2}", 100.0 * m.mean, 100.0 * m.std);
        let mut out = format!("{:<8} {:>15} {:>15} {:>15}\n", "alpha", "mIoU", "precision", "recall");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<8} {:>15} {:>15} {:>15}\n",
                r.alpha,
                cell(r.miou),
                cell(r.precision),
                cell(r.recall)
            ));
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        let ms = |m: MeanStd| serde_json::json!({ "mean": m.mean, "std": m.std });
        serde_json::json!({
            "rows": self.rows.iter().map(|r| serde_json::json!({
                "alpha": r.alpha,
                "miou": ms(r.miou),
                "precision": ms(r.precision),
                "recall": ms(r.recall),
            })).collect::<Vec<_>>(),
            "runs": self.runs.iter().map(|r| serde_json::json!({
                "alpha": r.alpha,
                "seed": r.seed,
                "miou": r.miou,
                "precision": r.precision,
                "recall": r.recall,
            })).collect::<Vec<_>>(),
        })
    }
}

const PLOT_W: u32 = 480;
const PLOT_H: u32 = 320;
const MARGIN: u32 = 40;

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = x0 as f64 + t * (x1 - x0) as f64;
        let y = y0 as f64 + t * (y1 - y0) as f64;
        put(img, x.round() as i64, y.round() as i64, c);
    }
}

/// Recall (mean with ±std bars) against alpha. Alphas are spaced evenly
/// in sweep order; the y axis spans the data with a small pad, and ticks
/// mark every 10 recall points.
pub fn recall_plot(rows: &[AblationRow]) -> RgbImage {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    let (left, right) = (MARGIN as i64, (PLOT_W - MARGIN / 2) as i64);
    let (top, bottom) = ((MARGIN / 2) as i64, (PLOT_H - MARGIN) as i64);
    line(&mut img, (left, bottom), (right, bottom), axis);
    line(&mut img, (left, bottom), (left, top), axis);

    let lo = rows.iter().map(|r| r.recall.mean - r.recall.std).fold(f64::INFINITY, f64::min);
    let hi = rows.iter().map(|r| r.recall.mean + r.recall.std).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = ((lo - 0.05).max(0.0), (hi + 0.05).min(1.0));
    let (lo, hi) = if hi - lo < 1e-9 { (0.0, 1.0) } else { (lo, hi) };
    let ypix = |v: f64| bottom - ((v - lo) / (hi - lo) * (bottom - top) as f64).round() as i64;
    let mut tick = (lo * 10.0).ceil() / 10.0;
    while tick <= hi + 1e-12 {
        let y = ypix(tick);
        line(&mut img, (left - 5, y), (left, y), axis);
        for x in (left..right).step_by(6) {
            put(&mut img, x, y, Rgb([210, 210, 210]));
        }
        tick += 0.1;
    }
    let n = rows.len().max(1);
    let xpix = |i: usize| {
        if n == 1 {
            (left + right) / 2
        } else {
            left + 20 + (i as i64) * (right - left - 40) / (n as i64 - 1)
        }
    };
    let ink = Rgb([200, 30, 30]);
    let bar = Rgb([60, 60, 200]);
    for (i, r) in rows.iter().enumerate() {
        let x = xpix(i);
        line(&mut img, (x, bottom), (x, bottom + 5), axis);
        let (y_lo, y_hi) = (ypix(r.recall.mean - r.recall.std), ypix(r.recall.mean + r.recall.std));
        line(&mut img, (x, y_lo), (x, y_hi), bar);
        line(&mut img, (x - 4, y_lo), (x + 4, y_lo), bar);
        line(&mut img, (x - 4, y_hi), (x + 4, y_hi), bar);
        if i + 1 < rows.len() {
            line(&mut img, (x, ypix(r.recall.mean)), (xpix(i + 1), ypix(rows[i + 1].recall.mean)), ink);
        }
        let y = ypix(r.recall.mean);
        for dy in -3..=3 {
            for dx in -3..=3 {
                if dx * dx + dy * dy <= 9 {
                    put(&mut img, x + dx, y + dy, ink);
                }
            }
        }
    }
    img
}

pub fn write_outputs(ablation: &Ablation, out: &Path) -> CliResult<()> {
    let table = ablation.to_table();
    let io = |p: &Path, e: std::io::Error| CliError::Io {
        path: p.to_path_buf(),
        source: e,
    };
    std::fs::create_dir_all(out).map_err(|e| io(out, e))?;
    let t = out.join("ablation.txt");
    std::fs::write(&t, table).map_err(|e| io(&t, e))?;
    let j = out.join("ablation.json");
    let body = serde_json::to_string_pretty(&ablation.to_json()).expect("ablation serializes") + "\n";
    std::fs::write(&j, body).map_err(|e| io(&j, e))?;
    let p = out.join("recall_vs_alpha.png");
    recall_plot(&ablation.rows)
        .save(&p)
        .map_err(|e| CliError::Core(erasing_core::Error::from(e)))
}
