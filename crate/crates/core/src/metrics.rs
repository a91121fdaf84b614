//! Evaluation metrics for intrinsic predictions and segmentation.
//!
//! Intrinsic metrics take `C × H × W` tensors with the prediction first and the
//! ground truth second. Brightness adjustment rescales the prediction.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::{Image, LabelMap, Sample};
use crate::nn::Tensor;

/// LMSE window size.
pub const LMSE_WINDOW: usize = 20;
/// SSIM Gaussian window width and standard deviation.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape(pred: &Tensor, truth: &Tensor) -> Result<()> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape(pred.shape(), truth.shape()));
    }
    Ok(())
}

fn chw(t: &Tensor) -> Result<[usize; 3]> {
    match t.shape() {
        &[c, h, w] => Ok([c, h, w]),
        s => Err(Error::Invalid(format!("expected a C×H×W tensor, got shape {s:?}"))),
    }
}

pub fn image_tensor(img: &Image) -> Tensor {
    Tensor::from_f32(img.shape().to_vec(), img.data()).expect("image dims are non-zero")
}

pub fn mse(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    same_shape(pred, truth)?;
    let s: f64 = pred.data().iter().zip(truth.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / pred.len() as f64)
}

fn alpha_parts(pred: &[f64], truth: &[f64]) -> (f64, f64) {
    pred.iter()
        .zip(truth)
        .fold((0.0, 0.0), |(num, den), (&j, &t)| (num + j * t, den + j * j))
}

fn scaled_mse(pred: &[f64], truth: &[f64], alpha: f64) -> f64 {
    let s: f64 = pred.iter().zip(truth).map(|(&j, &t)| (alpha * j - t).powi(2)).sum();
    s / pred.len() as f64
}

/// Least-squares scale of the prediction onto the truth.
pub fn optimal_alpha(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    same_shape(pred, truth)?;
    let (num, den) = alpha_parts(pred.data(), truth.data());
    if den == 0.0 {
        return Err(Error::Degenerate(
            "prediction is identically zero; the optimal scale is undefined".into(),
        ));
    }
    Ok(num / den)
}

pub fn smse(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    let a = optimal_alpha(pred, truth)?;
    Ok(scaled_mse(pred.data(), truth.data(), a))
}

/// MSE after the best global rescaling of the prediction (numerically SMSE).
pub fn mse_brightness_adjusted(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    smse(pred, truth)
}

/// As [`mse_brightness_adjusted`], but an all-zero prediction scores `mean(truth²)`
/// instead of failing.
pub fn mse_brightness_adjusted_or_zero(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    same_shape(pred, truth)?;
    let (num, den) = alpha_parts(pred.data(), truth.data());
    let a = if den == 0.0 { 0.0 } else { num / den };
    Ok(scaled_mse(pred.data(), truth.data(), a))
}

/// Top-left corners of `k × k` windows at stride `k / 2` along one axis.
fn window_starts(len: usize, k: usize) -> Vec<usize> {
    let step = (k / 2).max(1);
    (0..=len - k).step_by(step).collect()
}

/// Mean of per-window SMSE over half-overlapping `k × k` windows.
pub fn lmse(pred: &Tensor, truth: &Tensor, k: usize) -> Result<f64> {
    same_shape(pred, truth)?;
    let [c, h, w] = chw(pred)?;
    if k == 0 || h < k || w < k {
        return Err(Error::Invalid(format!("LMSE needs an image of at least {k}×{k}, got {h}×{w}")));
    }
    let (p, t) = (pred.data(), truth.data());
    let mut total = 0.0;
    let mut count = 0usize;
    let mut wp = Vec::with_capacity(c * k * k);
    let mut wt = Vec::with_capacity(c * k * k);
    for &y0 in &window_starts(h, k) {
        for &x0 in &window_starts(w, k) {
            wp.clear();
            wt.clear();
            for ch in 0..c {
                for y in y0..y0 + k {
                    let row = (ch * h + y) * w;
                    wp.extend_from_slice(&p[row + x0..row + x0 + k]);
                    wt.extend_from_slice(&t[row + x0..row + x0 + k]);
                }
            }
            let (num, den) = alpha_parts(&wp, &wt);
            let a = if den == 0.0 { 0.0 } else { num / den };
            total += scaled_mse(&wp, &wt, a);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - r;
        *t = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.map(|t| t / s)
}

/// Separable Gaussian filter evaluated only at fully-contained window positions.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for ox in 0..wo {
            rows[y * wo + ox] = taps.iter().enumerate().map(|(i, t)| t * x[y * w + ox + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for oy in 0..ho {
        for ox in 0..wo {
            out[oy * wo + ox] = taps.iter().enumerate().map(|(i, t)| t * rows[(oy + i) * wo + ox]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, taps: &[f64]) -> f64 {
    let prod = |f: fn(f64, f64) -> f64| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
    let ua = filter_valid(a, h, w, taps);
    let ub = filter_valid(b, h, w, taps);
    let uaa = filter_valid(&prod(|x, _| x * x), h, w, taps);
    let ubb = filter_valid(&prod(|_, y| y * y), h, w, taps);
    let uab = filter_valid(&prod(|x, y| x * y), h, w, taps);
    let mut total = 0.0;
    for i in 0..ua.len() {
        let (mx, my) = (ua[i], ub[i]);
        let vx = uaa[i] - mx * mx;
        let vy = ubb[i] - my * my;
        let cxy = uab[i] - mx * my;
        total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
            / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
    }
    total / ua.len() as f64
}

/// Mean SSIM over channels and valid window positions.
pub fn ssim(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    same_shape(pred, truth)?;
    let [c, h, w] = chw(pred)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Invalid(format!(
            "SSIM needs an image of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}"
        )));
    }
    let taps = gaussian_taps();
    let plane = h * w;
    let s: f64 = (0..c)
        .map(|ch| {
            let r = ch * plane..(ch + 1) * plane;
            ssim_plane(&pred.data()[r.clone()], &truth.data()[r], h, w, &taps)
        })
        .sum();
    Ok(s / c as f64)
}

/// `(1 − SSIM) / 2`, clamped to `[0, 1]` against rounding.
pub fn dssim(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    Ok(((1.0 - ssim(pred, truth)?) / 2.0).clamp(0.0, 1.0))
}

/// Pixel counts indexed `[truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::shape(&[num_classes, num_classes], &[counts.len()]));
        }
        Ok(Self { num_classes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|p| self.get(c, p)).sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|t| self.get(t, c)).sum()
    }

    /// Adds one pixel-aligned prediction/truth pair.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::shape(&[pred.len()], &[truth.len()]));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            for l in [p, t] {
                if l as usize >= self.num_classes {
                    return Err(Error::LabelRange {
                        label: l as usize,
                        num_classes: self.num_classes,
                    });
                }
            }
            self.counts[t as usize * self.num_classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape(&[self.num_classes], &[other.num_classes]));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU; `None` for classes absent from both truth and prediction.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|c| {
                let d = self.get(c, c);
                let union = self.row_sum(c) + self.col_sum(c) - d;
                (union > 0).then(|| d as f64 / union as f64)
            })
            .collect()
    }

    /// Per-class recall; `None` for classes absent from the truth.
    pub fn class_accuracy(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|c| {
                let r = self.row_sum(c);
                (r > 0).then(|| self.get(c, c) as f64 / r as f64)
            })
            .collect()
    }

    /// CSV with a header row of class names; the first column labels the truth row.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let name = |i: usize| class_names.get(i).cloned().unwrap_or_else(|| format!("class{i}"));
        let mut s = String::from("truth\\pred");
        for c in 0..self.num_classes {
            s.push(',');
            s.push_str(&name(c));
        }
        s.push('\n');
        for t in 0..self.num_classes {
            s.push_str(&name(t));
            for p in 0..self.num_classes {
                let _ = write!(s, ",{}", self.get(t, p));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<(Self, Vec<String>)> {
        let bad = |m: &str| Error::Format(format!("confusion CSV: {m}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty"))?;
        let names: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
        let c = names.len();
        let mut counts = Vec::with_capacity(c * c);
        for line in lines {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != c + 1 {
                return Err(bad("ragged row"));
            }
            for cell in &cells[1..] {
                counts.push(cell.trim().parse::<u64>().map_err(|_| bad("non-integer count"))?);
            }
        }
        Ok((Self::from_counts(c, counts).map_err(|_| bad("not square"))?, names))
    }
}

pub fn confusion(pred: &LabelMap, truth: &LabelMap, num_classes: usize) -> Result<ConfusionMatrix> {
    if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
        return Err(Error::shape(&[pred.height(), pred.width()], &[truth.height(), truth.width()]));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(pred.data(), truth.data())?;
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegScores {
    pub global: f64,
    pub class_average: f64,
    pub miou: f64,
}

pub fn seg_scores(cm: &ConfusionMatrix) -> Result<SegScores> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Degenerate("confusion matrix is empty".into()));
    }
    let trace: u64 = (0..cm.num_classes()).map(|c| cm.get(c, c)).sum();
    let mean = |v: Vec<Option<f64>>| {
        let present: Vec<f64> = v.into_iter().flatten().collect();
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(SegScores {
        global: trace as f64 / total as f64,
        class_average: mean(cm.class_accuracy()),
        miou: mean(cm.class_iou()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation over images.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntrinsicMetrics {
    /// Brightness-adjusted MSE.
    pub mse: f64,
    pub lmse: f64,
    pub dssim: f64,
}

pub fn intrinsic_metrics(pred: &Tensor, truth: &Tensor) -> Result<IntrinsicMetrics> {
    Ok(IntrinsicMetrics {
        mse: mse_brightness_adjusted_or_zero(pred, truth)?,
        lmse: lmse(pred, truth, LMSE_WINDOW)?,
        dssim: dssim(pred, truth)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntrinsicSummary {
    pub mse: MeanStd,
    pub lmse: MeanStd,
    pub dssim: MeanStd,
}

impl IntrinsicSummary {
    fn of(items: &[IntrinsicMetrics]) -> Self {
        let col = |f: fn(&IntrinsicMetrics) -> f64| MeanStd::of(&items.iter().map(f).collect::<Vec<_>>());
        Self {
            mse: col(|m| m.mse),
            lmse: col(|m| m.lmse),
            dssim: col(|m| m.dssim),
        }
    }
}

/// One test image's predictions; absent heads are `None`.
#[derive(Debug, Clone, Default)]
pub struct ImagePrediction {
    /// `3 × H × W`.
    pub reflectance: Option<Tensor>,
    /// `1 × H × W`.
    pub shading: Option<Tensor>,
    pub labels: Option<Vec<u8>>,
}

impl ImagePrediction {
    /// The ground truth itself, as a perfect predictor would emit it.
    pub fn oracle(sample: &Sample) -> Self {
        Self {
            reflectance: Some(image_tensor(&sample.reflectance)),
            shading: Some(image_tensor(&sample.shading)),
            labels: Some(sample.labels.data().to_vec()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: usize,
    pub albedo: Option<IntrinsicMetrics>,
    pub shading: Option<IntrinsicMetrics>,
    pub segmentation: Option<SegScores>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegSummary {
    pub scores: SegScores,
    pub class_iou: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub num_images: usize,
    pub class_names: Vec<String>,
    pub per_image: Vec<ImageRecord>,
    pub albedo: Option<IntrinsicSummary>,
    pub shading: Option<IntrinsicSummary>,
    pub segmentation: Option<SegSummary>,
}

/// Scores every `(id, prediction, truth)` triple and aggregates over the split.
/// Segmentation scores come from one pooled confusion matrix.
pub fn evaluate(items: &[(usize, ImagePrediction, &Sample)], class_names: &[String]) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty split".into()));
    }
    let num_classes = items[0].2.labels.num_classes();
    let per: Vec<(ImageRecord, Option<ConfusionMatrix>)> = items
        .par_iter()
        .map(|(id, pred, truth)| {
            let albedo = pred
                .reflectance
                .as_ref()
                .map(|r| intrinsic_metrics(r, &image_tensor(&truth.reflectance)))
                .transpose()?;
            let shading = pred
                .shading
                .as_ref()
                .map(|s| intrinsic_metrics(s, &image_tensor(&truth.shading)))
                .transpose()?;
            let cm = pred
                .labels
                .as_ref()
                .map(|l| {
                    let mut cm = ConfusionMatrix::new(num_classes);
                    cm.accumulate(l, truth.labels.data())?;
                    Ok::<_, Error>(cm)
                })
                .transpose()?;
            let segmentation = cm.as_ref().map(seg_scores).transpose()?;
            Ok((ImageRecord { id: *id, albedo, shading, segmentation }, cm))
        })
        .collect::<Result<_>>()?;

    let mut pooled: Option<ConfusionMatrix> = None;
    let mut records = Vec::with_capacity(per.len());
    for (rec, cm) in per {
        if let Some(cm) = cm {
            match pooled.as_mut() {
                Some(p) => p.merge(&cm)?,
                None => pooled = Some(cm),
            }
        }
        records.push(rec);
    }
    let summarize = |f: fn(&ImageRecord) -> Option<IntrinsicMetrics>| {
        let v: Vec<IntrinsicMetrics> = records.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| IntrinsicSummary::of(&v))
    };
    let albedo = summarize(|r| r.albedo);
    let shading = summarize(|r| r.shading);
    let segmentation = pooled
        .map(|cm| {
            Ok::<_, Error>(SegSummary {
                scores: seg_scores(&cm)?,
                class_iou: cm.class_iou(),
                confusion: cm,
            })
        })
        .transpose()?;
    Ok(EvalReport {
        num_images: records.len(),
        class_names: class_names.to_vec(),
        per_image: records,
        albedo,
        shading,
        segmentation,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "na".to_string(), |v| format!("{v:.6}"))
}

impl EvalReport {
    /// Human-readable report.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "evaluation over {} images (std is population std over images)", self.num_images);
        for (name, summ) in [("albedo", &self.albedo), ("shading", &self.shading)] {
            if let Some(m) = summ {
                let _ = writeln!(
                    s,
                    "{name:<8} MSE {:.5} ± {:.5} | LMSE {:.5} ± {:.5} | DSSIM {:.5} ± {:.5}",
                    m.mse.mean, m.mse.std, m.lmse.mean, m.lmse.std, m.dssim.mean, m.dssim.std
                );
            }
        }
        if let Some(seg) = &self.segmentation {
            let _ = writeln!(
                s,
                "segmentation global {:.4} | class avg {:.4} | mIoU {:.4}",
                seg.scores.global, seg.scores.class_average, seg.scores.miou
            );
            for (c, iou) in seg.class_iou.iter().enumerate() {
                let name = self.class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}"));
                let _ = writeln!(s, "  IoU {name:<10} {}", fmt_opt(*iou));
            }
        }
        s
    }

    /// Aggregate values as `key=value` lines; full precision so they parse back exactly.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.aggregates() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn aggregates(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("num_images".into(), self.num_images.to_string());
        for (name, summ) in [("albedo", &self.albedo), ("shading", &self.shading)] {
            if let Some(x) = summ {
                for (metric, ms) in [("mse", x.mse), ("lmse", x.lmse), ("dssim", x.dssim)] {
                    m.insert(format!("{name}.{metric}.mean"), format!("{:?}", ms.mean));
                    m.insert(format!("{name}.{metric}.std"), format!("{:?}", ms.std));
                }
            }
        }
        if let Some(seg) = &self.segmentation {
            m.insert("seg.global".into(), format!("{:?}", seg.scores.global));
            m.insert("seg.class_average".into(), format!("{:?}", seg.scores.class_average));
            m.insert("seg.miou".into(), format!("{:?}", seg.scores.miou));
            for (c, iou) in seg.class_iou.iter().enumerate() {
                let v = iou.map_or_else(|| "na".to_string(), |v| format!("{v:?}"));
                m.insert(format!("seg.iou.{c}"), v);
            }
        }
        m
    }
}

/// Parses `key=value` lines (blank lines and `#` comments ignored).
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut m = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
        m.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(m)
}
