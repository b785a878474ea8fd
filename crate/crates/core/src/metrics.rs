//! Evaluation against exact synthetic ground truth: affine-aligned depth
//! AbsRel/δ1, instance-matched segmentation IoU, tolerant edge F1, PSNR.

use std::fmt;
use std::fs::OpenOptions;
use std::io::{self, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: prediction has {pred} values, ground truth {gt}")]
    Shape { pred: usize, gt: usize },
    #[error("empty input")]
    Empty,
}

pub type Result<T> = std::result::Result<T, MetricError>;

const DEPTH_CLAMP: f64 = 1e-3;
const DELTA1: f64 = 1.25;
/// Depth below this counts as foreground; background sits at depth 1.
pub const FOREGROUND_DEPTH: f32 = 0.95;

fn check_len(pred: usize, gt: usize) -> Result<()> {
    if pred != gt {
        return Err(MetricError::Shape { pred, gt });
    }
    if gt == 0 {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// Least-squares `(a, b)` minimizing `Σ(a·pred + b − gt)²`. Constant `pred`
/// gives `a = 0, b = mean(gt)`.
pub fn affine_fit(pred: &[f32], gt: &[f32]) -> (f64, f64) {
    let n = pred.len() as f64;
    let mp = pred.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mg = gt.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut cov, mut var) = (0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        let dp = p as f64 - mp;
        cov += dp * (g as f64 - mg);
        var += dp * dp;
    }
    if var <= 1e-12 * n {
        return (0.0, mg);
    }
    let a = cov / var;
    (a, mg - a * mp)
}

/// `(absrel, delta1)` after least-squares scale-and-shift alignment.
pub fn depth_metrics(pred: &[f32], gt: &[f32]) -> Result<(f64, f64)> {
    depth_metrics_with(pred, gt, true)
}

/// As [`depth_metrics`]; `align = false` compares raw values.
pub fn depth_metrics_with(pred: &[f32], gt: &[f32], align: bool) -> Result<(f64, f64)> {
    check_len(pred.len(), gt.len())?;
    let (a, b) = if align { affine_fit(pred, gt) } else { (1.0, 0.0) };
    let (mut absrel, mut hits) = (0.0, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = ((a * p as f64 + b).max(DEPTH_CLAMP), g as f64);
        absrel += (p - g).abs() / g;
        if (p / g).max(g / p) < DELTA1 {
            hits += 1;
        }
    }
    let n = gt.len() as f64;
    Ok((absrel / n, hits as f64 / n))
}

/// Mean over ground-truth instances (id > 0) of the IoU with the predicted
/// id (> 0) assigned by greedy matching on descending IoU, without reuse.
/// No gt instances: 1 when the prediction has none either, else 0.
pub fn seg_miou(pred: &[u8], gt: &[u8]) -> Result<f64> {
    check_len(pred.len(), gt.len())?;
    let mut inter = vec![[0usize; 256]; 256];
    let (mut area_p, mut area_g) = ([0usize; 256], [0usize; 256]);
    let mut first_p = [usize::MAX; 256];
    for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        first_p[p as usize] = first_p[p as usize].min(i);
        inter[g as usize][p as usize] += 1;
        area_p[p as usize] += 1;
        area_g[g as usize] += 1;
    }
    let gt_ids: Vec<usize> = (1..256).filter(|&i| area_g[i] > 0).collect();
    let pred_ids: Vec<usize> = (1..256).filter(|&i| area_p[i] > 0).collect();
    if gt_ids.is_empty() {
        return Ok(if pred_ids.is_empty() { 1.0 } else { 0.0 });
    }
    let mut pairs = Vec::new();
    for &g in &gt_ids {
        for &p in &pred_ids {
            let i = inter[g][p];
            if i > 0 {
                pairs.push((i as f64 / (area_g[g] + area_p[p] - i) as f64, g, p));
            }
        }
    }
    // ties go to the gt id, then to the predicted mask appearing first, so
    // relabeling predictions cannot change the result
    pairs.sort_by(|x, y| {
        y.0.total_cmp(&x.0)
            .then(x.1.cmp(&y.1))
            .then(first_p[x.2].cmp(&first_p[y.2]))
    });
    let (mut used_g, mut used_p) = ([false; 256], [false; 256]);
    let mut total = 0.0;
    for (iou, g, p) in pairs {
        if !used_g[g] && !used_p[p] {
            used_g[g] = true;
            used_p[p] = true;
            total += iou;
        }
    }
    Ok(total / gt_ids.len() as f64)
}

/// Edge F1 with Chebyshev tolerance `tol` within each frame.
pub fn edge_f1(pred: &[u8], gt: &[u8], frames: usize, height: usize, width: usize, tol: usize) -> Result<f64> {
    check_len(pred.len(), gt.len())?;
    if pred.len() != frames * height * width {
        return Err(MetricError::Shape {
            pred: pred.len(),
            gt: frames * height * width,
        });
    }
    let near = |map: &[u8], f: usize, y: usize, x: usize| {
        let base = f * height * width;
        (y.saturating_sub(tol)..=(y + tol).min(height - 1)).any(|yy| {
            (x.saturating_sub(tol)..=(x + tol).min(width - 1)).any(|xx| map[base + yy * width + xx] != 0)
        })
    };
    let matched = |a: &[u8], b: &[u8]| {
        let (mut total, mut hit) = (0usize, 0usize);
        for f in 0..frames {
            for y in 0..height {
                for x in 0..width {
                    if a[(f * height + y) * width + x] != 0 {
                        total += 1;
                        if near(b, f, y, x) {
                            hit += 1;
                        }
                    }
                }
            }
        }
        (hit, total)
    };
    let (tp_p, n_p) = matched(pred, gt);
    let (tp_g, n_g) = matched(gt, pred);
    match (n_p, n_g) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let precision = tp_p as f64 / n_p as f64;
    let recall = tp_g as f64 / n_g as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// `10·log10(1/MSE)` for values in [0, 1]; `+∞` when identical.
pub fn psnr(pred: &[f32], gt: &[f32]) -> Result<f64> {
    check_len(pred.len(), gt.len())?;
    let mse = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| (p as f64 - g as f64).powi(2))
        .sum::<f64>()
        / gt.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

/// Fraction of pixels where depth foreground (`depth < FOREGROUND_DEPTH`)
/// agrees with segmentation foreground (`id > 0`).
pub fn fg_agreement(depth: &[f32], seg: &[u8]) -> Result<f64> {
    check_len(depth.len(), seg.len())?;
    let agree = depth
        .iter()
        .zip(seg)
        .filter(|(&d, &s)| (d < FOREGROUND_DEPTH) == (s != 0))
        .count();
    Ok(agree as f64 / seg.len() as f64)
}

/// Metrics averaged over samples; a field is `None` when the task did not
/// generate the modality it measures.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub task: String,
    pub absrel: Option<f64>,
    pub delta1: Option<f64>,
    pub miou: Option<f64>,
    pub edge_f1: Option<f64>,
    pub psnr: Option<f64>,
    pub fg_agreement: Option<f64>,
    pub n_samples: usize,
}

/// Per-sample metric values, averaged into a [`MetricReport`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleMetrics {
    pub absrel: Option<f64>,
    pub delta1: Option<f64>,
    pub miou: Option<f64>,
    pub edge_f1: Option<f64>,
    pub psnr: Option<f64>,
    pub fg_agreement: Option<f64>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.collect::<Option<Vec<f64>>>()?;
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricReport {
    pub fn aggregate(task: &str, samples: &[SampleMetrics]) -> Self {
        let field = |f: fn(&SampleMetrics) -> Option<f64>| mean_of(samples.iter().map(f));
        Self {
            task: task.to_string(),
            absrel: field(|s| s.absrel),
            delta1: field(|s| s.delta1),
            miou: field(|s| s.miou),
            edge_f1: field(|s| s.edge_f1),
            psnr: field(|s| s.psnr),
            fg_agreement: field(|s| s.fg_agreement),
            n_samples: samples.len(),
        }
    }

    pub fn fields(&self) -> [(&'static str, Option<f64>); 6] {
        [
            ("absrel", self.absrel),
            ("delta1", self.delta1),
            ("miou", self.miou),
            ("edge_f1", self.edge_f1),
            ("psnr", self.psnr),
            ("fg_agreement", self.fg_agreement),
        ]
    }

    /// Range invariants of every present field.
    pub fn check(&self) -> std::result::Result<(), String> {
        for (name, v) in self.fields() {
            let Some(v) = v else { continue };
            let ok = match name {
                "absrel" => v >= 0.0,
                "psnr" => !v.is_nan(),
                _ => (0.0..=1.0).contains(&v),
            };
            if !ok {
                return Err(format!("{name}={v} out of range"));
            }
        }
        Ok(())
    }

    /// Single `key=value` line; absent fields are omitted.
    pub fn to_line(&self) -> String {
        let mut parts = vec![format!("task={}", self.task)];
        for (name, v) in self.fields() {
            if let Some(v) = v {
                parts.push(format!("{name}={v:.6}"));
            }
        }
        parts.push(format!("n_samples={}", self.n_samples));
        parts.join(" ")
    }

    pub fn parse_line(line: &str) -> Option<Self> {
        let mut r = MetricReport::default();
        for kv in line.split_whitespace() {
            let (k, v) = kv.split_once('=')?;
            match k {
                "task" => r.task = v.to_string(),
                "n_samples" => r.n_samples = v.parse().ok()?,
                _ => {
                    let x: f64 = v.parse().ok()?;
                    match k {
                        "absrel" => r.absrel = Some(x),
                        "delta1" => r.delta1 = Some(x),
                        "miou" => r.miou = Some(x),
                        "edge_f1" => r.edge_f1 = Some(x),
                        "psnr" => r.psnr = Some(x),
                        "fg_agreement" => r.fg_agreement = Some(x),
                        _ => return None,
                    }
                }
            }
        }
        Some(r)
    }

    pub fn append_to(&self, path: &Path) -> io::Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        writeln!(f, "{}", self.to_line())
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "task {} ({} samples)", self.task, self.n_samples)?;
        for (name, v) in self.fields() {
            if let Some(v) = v {
                writeln!(f, "  {name:<13}{v:>10.4}")?;
            }
        }
        Ok(())
    }
}

/// PSNR mapped onto [0, 1] for the composite score.
pub fn normalized_psnr(db: f64) -> f64 {
    (db / 40.0).clamp(0.0, 1.0)
}

/// Mean of `1 − absrel` (clamped to [0, 1]), mIoU, edge F1 and normalized
/// PSNR.
pub fn composite_score(absrel: f64, miou: f64, edge_f1: f64, psnr_db: f64) -> f64 {
    ((1.0 - absrel).clamp(0.0, 1.0) + miou + edge_f1 + normalized_psnr(psnr_db)) / 4.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_examples() {
        let gt = [0.2f32, 0.5, 0.9, 1.0];
        assert_eq!(depth_metrics(&gt, &gt).unwrap(), (0.0, 1.0));
        let twice: Vec<f32> = gt.iter().map(|v| 2.0 * v).collect();
        let (absrel, d1) = depth_metrics(&twice, &gt).unwrap();
        assert!(absrel < 1e-6 && d1 == 1.0);
        assert_eq!(depth_metrics_with(&[1.0, 2.0], &[2.0, 2.0], false).unwrap(), (0.25, 0.5));
        assert_eq!(affine_fit(&[3.0, 3.0], &[1.0, 2.0]), (0.0, 1.5));
        assert!(depth_metrics(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn miou_examples() {
        let gt = [0u8, 1, 1, 2, 2, 0];
        assert_eq!(seg_miou(&gt, &gt).unwrap(), 1.0);
        assert_eq!(seg_miou(&[0; 6], &gt).unwrap(), 0.0);
        // equal areas overlapping by half: a / 3a
        let pred = [0u8, 0, 1, 1, 0, 0];
        let gt1 = [0u8, 1, 1, 0, 0, 0];
        assert!((seg_miou(&pred, &gt1).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let relabeled: Vec<u8> = gt.iter().map(|&v| if v == 0 { 0 } else { 7 - v }).collect();
        assert_eq!(seg_miou(&relabeled, &gt).unwrap(), 1.0);
    }

    #[test]
    fn edge_examples() {
        let (h, w) = (5, 6);
        let mut gt = vec![0u8; h * w];
        for y in 0..h {
            gt[y * w + 2] = 1;
        }
        assert_eq!(edge_f1(&gt, &gt, 1, h, w, 1).unwrap(), 1.0);
        let mut shifted = vec![0u8; h * w];
        for y in 0..h {
            shifted[y * w + 3] = 1;
        }
        assert_eq!(edge_f1(&shifted, &gt, 1, h, w, 1).unwrap(), 1.0);
        assert_eq!(edge_f1(&shifted, &gt, 1, h, w, 0).unwrap(), 0.0);
        assert_eq!(edge_f1(&vec![0; h * w], &gt, 1, h, w, 1).unwrap(), 0.0);
        assert_eq!(edge_f1(&vec![0; h * w], &vec![0; h * w], 1, h, w, 1).unwrap(), 1.0);
    }

    #[test]
    fn psnr_examples() {
        let gt = [0.2f32, 0.7, 0.4];
        assert_eq!(psnr(&gt, &gt).unwrap(), f64::INFINITY);
        let off: Vec<f32> = gt.iter().map(|v| v + 0.1).collect();
        assert!((psnr(&off, &gt).unwrap() - 20.0).abs() < 1e-5);
        let half = [0.5f32; 3];
        assert!((psnr(&half, &[0.0; 3]).unwrap() - 6.0206).abs() < 1e-4);
    }

    #[test]
    fn report_line_roundtrip() {
        let r = MetricReport::aggregate(
            "rgb",
            &[
                SampleMetrics {
                    absrel: Some(0.1),
                    miou: Some(0.5),
                    ..Default::default()
                },
                SampleMetrics {
                    absrel: Some(0.3),
                    miou: Some(1.0),
                    ..Default::default()
                },
            ],
        );
        assert!((r.absrel.unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(r.psnr, None);
        r.check().unwrap();
        let back = MetricReport::parse_line(&r.to_line()).unwrap();
        assert_eq!(back.to_line(), r.to_line());
        assert_eq!(back.n_samples, 2);
    }
}
