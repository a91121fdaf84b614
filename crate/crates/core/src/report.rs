//! Comparison tables and deterministic raster plots.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::train::{RunRecord, RunSummary};

/// Column keys and headers of the w-sweep table.
pub const SWEEP_COLUMNS: [(&str, &str); 8] = [
    ("seg.global", "global"),
    ("seg.miou", "mIoU"),
    ("albedo.mse.mean", "R_MSE"),
    ("albedo.lmse.mean", "R_LMSE"),
    ("albedo.dssim.mean", "R_DSSIM"),
    ("shading.mse.mean", "S_MSE"),
    ("shading.lmse.mean", "S_LMSE"),
    ("shading.dssim.mean", "S_DSSIM"),
];

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "na".into(), |v| format!("{v:.5}"))
}

/// One row per `w`, eight metric columns.
pub fn sweep_table(rows: &[(f64, RunRecord)]) -> String {
    let mut s = String::from("w");
    for (_, h) in SWEEP_COLUMNS {
        let _ = write!(s, " | {h}");
    }
    s.push('\n');
    for (w, rec) in rows {
        let agg = rec.eval.aggregates();
        let _ = write!(s, "{w}");
        for (k, _) in SWEEP_COLUMNS {
            let _ = write!(s, " | {}", cell(agg.get(k).and_then(|v| v.parse().ok())));
        }
        s.push('\n');
    }
    s
}

fn display_key(key: &str, class_names: &[String]) -> String {
    if let Some(c) = key.strip_prefix("seg.iou.") {
        if let Some(name) = c.parse::<usize>().ok().and_then(|i| class_names.get(i)) {
            return format!("IoU {name}");
        }
    }
    key.to_string()
}

/// Side-by-side metric table; with two or more runs a `Δ` column holds last minus first.
///
/// Fails when the runs report different metric sets.
pub fn compare_table(runs: &[RunSummary]) -> Result<String> {
    let first = runs.first().ok_or_else(|| Error::Invalid("compare needs at least one run".into()))?;
    let keys: Vec<&String> = first.eval.keys().filter(|k| k.as_str() != "num_images").collect();
    for r in &runs[1..] {
        let other: Vec<&String> = r.eval.keys().filter(|k| k.as_str() != "num_images").collect();
        if other != keys {
            return Err(Error::Config(format!(
                "runs {} and {} report different metric sets",
                first.name, r.name
            )));
        }
    }
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["metric".to_string()];
    header.extend(runs.iter().map(|r| r.name.clone()));
    if runs.len() >= 2 {
        header.push("Δ".into());
    }
    rows.push(header);
    // aggregates first, per-class IoU rows after
    let (iou, main): (Vec<&String>, Vec<&String>) = keys.iter().partition(|k| k.starts_with("seg.iou."));
    let mut iou = iou;
    iou.sort_by_key(|k| k["seg.iou.".len()..].parse::<usize>().unwrap_or(usize::MAX));
    for key in main.into_iter().chain(iou) {
        let vals: Vec<Option<f64>> = runs.iter().map(|r| r.metric(key)).collect();
        let mut row = vec![display_key(key, &first.class_names)];
        row.extend(vals.iter().map(|v| cell(*v)));
        if runs.len() >= 2 {
            let d = match (vals[0], vals[vals.len() - 1]) {
                (Some(a), Some(b)) => format!("{:+.5}", b - a),
                _ => "na".into(),
            };
            row.push(d);
        }
        rows.push(row);
    }
    let ncol = rows[0].len();
    let widths: Vec<usize> = (0..ncol)
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for row in &rows {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, v)| format!("{v:<w$}", w = widths[c]))
            .collect();
        let _ = writeln!(s, "{}", line.join("  ").trim_end());
    }
    Ok(s)
}

/// RGB raster with line and rectangle primitives, written as binary PPM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Canvas {
    width: usize,
    height: usize,
    rgb: Vec<u8>,
}

impl Canvas {
    pub fn new(width: usize, height: usize, background: [u8; 3]) -> Self {
        Self {
            width,
            height,
            rgb: background.repeat(width * height),
        }
    }

    pub fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = 3 * (y as usize * self.width + x as usize);
            self.rgb[i..i + 3].copy_from_slice(&c);
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: [u8; 3]) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.set(x, y, c);
            }
        }
    }

    /// Bresenham line.
    pub fn line(&mut self, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.set(x0, y0, c);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }
}

const W: usize = 480;
const H: usize = 320;
const MARGIN: i64 = 30;
const AXIS: [u8; 3] = [40, 40, 40];
const GRID: [u8; 3] = [225, 225, 225];
const SERIES: [[u8; 3]; 3] = [[31, 119, 180], [214, 39, 40], [44, 160, 44]];

fn frame() -> Canvas {
    let mut c = Canvas::new(W, H, [255, 255, 255]);
    let (x1, y1) = (W as i64 - MARGIN, H as i64 - MARGIN);
    for k in 1..5 {
        let y = MARGIN + (y1 - MARGIN) * k / 5;
        c.line((MARGIN, y), (x1, y), GRID);
    }
    c.line((MARGIN, MARGIN), (MARGIN, y1), AXIS);
    c.line((MARGIN, y1), (x1, y1), AXIS);
    c
}

/// Loss curves on a log10 scale: total, cross-entropy term and intrinsic term.
pub fn loss_curves(run: &RunSummary) -> Canvas {
    let mut c = frame();
    let series: Vec<&Vec<f64>> = [&run.totals, &run.ce_terms, &run.intrinsic_terms].into();
    let logs: Vec<f64> = series
        .iter()
        .flat_map(|s| s.iter())
        .filter(|v| **v > 0.0 && v.is_finite())
        .map(|v| v.log10())
        .collect();
    if logs.is_empty() {
        return c;
    }
    let lo = logs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (pw, ph) = ((W as i64 - 2 * MARGIN) as f64, (H as i64 - 2 * MARGIN) as f64);
    for (s, color) in series.iter().zip(SERIES) {
        let n = s.len();
        let pts: Vec<Option<(i64, i64)>> = s
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                (v > 0.0 && v.is_finite()).then(|| {
                    let fx = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
                    let fy = (v.log10() - lo) / span;
                    (MARGIN + (fx * pw).round() as i64, H as i64 - MARGIN - (fy * ph).round() as i64)
                })
            })
            .collect();
        for w in pts.windows(2) {
            if let [Some(a), Some(b)] = w {
                c.line(*a, *b, color);
            }
        }
        for p in pts.iter().flatten() {
            c.fill_rect(p.0 - 1, p.1 - 1, p.0 + 1, p.1 + 1, color);
        }
    }
    c
}

/// Per-class IoU bars in class order; absent classes leave a gap.
pub fn class_bars(run: &RunSummary) -> Canvas {
    let mut c = frame();
    let ious: Vec<Option<f64>> = (0..)
        .map_while(|i| run.eval.get(&format!("seg.iou.{i}")))
        .map(|v| v.parse::<f64>().ok())
        .collect();
    if ious.is_empty() {
        return c;
    }
    let pw = (W as i64 - 2 * MARGIN) as f64;
    let ph = (H as i64 - 2 * MARGIN) as f64;
    let slot = pw / ious.len() as f64;
    for (i, v) in ious.iter().enumerate() {
        if let Some(v) = v {
            let x0 = MARGIN + (i as f64 * slot + slot * 0.15).round() as i64;
            let x1 = MARGIN + ((i + 1) as f64 * slot - slot * 0.15).round() as i64;
            let top = H as i64 - MARGIN - (v.clamp(0.0, 1.0) * ph).round() as i64;
            c.fill_rect(x0, top, x1, H as i64 - MARGIN - 1, SERIES[i % SERIES.len()]);
        }
    }
    c
}

/// Writes `loss_curves.ppm` and `class_iou.ppm` into `out_dir`.
pub fn write_plots(run: &RunSummary, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let files = [("loss_curves.ppm", loss_curves(run)), ("class_iou.ppm", class_bars(run))];
    let mut written = Vec::new();
    for (name, canvas) in files {
        let p = out_dir.join(name);
        fs::write(&p, canvas.to_ppm())?;
        written.push(p);
    }
    Ok(written)
}

/// Plain-text run report: loss trace plus final metrics.
pub fn run_text(run: &RunSummary) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "run {} ({})", run.name, run.experiment);
    let _ = writeln!(s, "epoch        total      ce_term  intrinsic_term");
    for i in 0..run.totals.len() {
        let _ = writeln!(
            s,
            "{:>5} {:>12.6} {:>12.6} {:>15.6}",
            i + 1,
            run.totals[i],
            run.ce_terms[i],
            run.intrinsic_terms[i]
        );
    }
    for (k, v) in &run.eval {
        let _ = writeln!(s, "{} = {v}", display_key(k, &run.class_names));
    }
    s
}
