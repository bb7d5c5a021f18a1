//! Image-quality metrics and the evaluation report.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::datapipe::grammar::{InstructionMode, Task};
use crate::datapipe::manifest::{resolve, Manifest, ManifestRecord};
use crate::datapipe::pairs::EditSample;
use crate::datapipe::scorer::ScorerAdapter;
use crate::error::{Error, Result};
use crate::raster::{Mask, RasterImage};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Psnr {
    pub db: f64,
    /// The images matched exactly on the region and `db` is the cap.
    pub capped: bool,
}

fn check_size(a: &RasterImage, b: &RasterImage) -> Result<()> {
    if a.same_size(b) {
        Ok(())
    } else {
        Err(Error::shape(
            "image comparison",
            &[a.height(), a.width()],
            &[b.height(), b.width()],
        ))
    }
}

/// Mean squared error over unit-scaled channels, restricted to `region`.
pub fn mse(a: &RasterImage, b: &RasterImage, region: Option<&Mask>) -> Result<f64> {
    check_size(a, b)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 0..a.height() {
        for x in 0..a.width() {
            if region.is_some_and(|m| !m.get(x, y)) {
                continue;
            }
            for c in 0..3 {
                let d = a.unit(x, y, c) - b.unit(x, y, c);
                sum += d * d;
            }
            n += 3;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("empty metric region".to_string()));
    }
    Ok(sum / n as f64)
}

/// PSNR in dB for a given MSE with peak 1.0.
pub fn psnr_from_mse(mse: f64) -> Psnr {
    if mse <= 0.0 {
        Psnr { db: PSNR_CAP, capped: true }
    } else {
        Psnr {
            db: (-10.0 * mse.log10()).min(PSNR_CAP),
            capped: false,
        }
    }
}

pub fn psnr(a: &RasterImage, b: &RasterImage, region: Option<&Mask>) -> Result<Psnr> {
    Ok(psnr_from_mse(mse(a, b, region)?))
}

fn window_ssim(a: &[f64], b: &[f64], stride: usize, x0: usize, y0: usize) -> f64 {
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let at = |p: &[f64], i: usize, j: usize| p[(y0 + i) * stride + x0 + j];
    let (mut ma, mut mb) = (0.0, 0.0);
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            ma += at(a, i, j);
            mb += at(b, i, j);
        }
    }
    ma /= n;
    mb /= n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let (da, db) = (at(a, i, j) - ma, at(b, i, j) - mb);
            va += da * da;
            vb += db * db;
            cov += da * db;
        }
    }
    va /= n;
    vb /= n;
    cov /= n;
    let (c1, c2) = (K1 * K1, K2 * K2);
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

/// Mean SSIM of two single-channel planes over every 8×8 window.
pub fn ssim_plane(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<f64> {
    if a.len() != width * height || b.len() != width * height {
        return Err(Error::shape("ssim", &[a.len()], &[b.len()]));
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "{width}x{height} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let (nx, ny) = (width - SSIM_WINDOW + 1, height - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for y in 0..ny {
        for x in 0..nx {
            total += window_ssim(a, b, width, x, y);
        }
    }
    Ok(total / (nx * ny) as f64)
}

fn channel(img: &RasterImage, c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(img.width() * img.height());
    for y in 0..img.height() {
        for x in 0..img.width() {
            out.push(img.unit(x, y, c));
        }
    }
    out
}

/// Channel-averaged SSIM with a uniform 8×8 window.
pub fn ssim(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    check_size(a, b)?;
    let mut total = 0.0;
    for c in 0..3 {
        total += ssim_plane(&channel(a, c), &channel(b, c), a.width(), a.height())?;
    }
    Ok(total / 3.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Consistency {
    pub bg_mse: f64,
    pub edit_mse: f64,
}

/// MSE of `candidate` against `reference` outside and inside `mask`.
pub fn masked_consistency_between(reference: &RasterImage, candidate: &RasterImage, mask: &Mask) -> Result<Consistency> {
    if mask.is_empty() || mask.count() == mask.width() * mask.height() {
        return Err(Error::InvalidArgument(
            "mask and its complement must both be nonempty".to_string(),
        ));
    }
    Ok(Consistency {
        bg_mse: mse(reference, candidate, Some(&mask.invert()))?,
        edit_mse: mse(reference, candidate, Some(mask))?,
    })
}

pub fn masked_consistency(sample: &EditSample) -> Result<Consistency> {
    masked_consistency_between(&sample.source, &sample.target, &sample.mask)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub task: Task,
    pub mode: InstructionMode,
    /// False when the prediction file was missing.
    pub present: bool,
    pub psnr_bg: f64,
    pub psnr_capped: bool,
    pub ssim: f64,
    pub masked_mse_edit: f64,
    pub sc: Option<f64>,
    pub pq: Option<f64>,
    pub vie: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Aggregate {
    pub rows: usize,
    pub psnr_bg: f64,
    pub ssim: f64,
    pub masked_mse_edit: f64,
    pub sc: Option<f64>,
    pub pq: Option<f64>,
    pub vie: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    /// Rows that could not be scored by the scorer.
    pub unscored: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values.filter(|v| v.is_finite()) {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"))
}

impl MetricReport {
    pub fn missing(&self) -> usize {
        self.rows.iter().filter(|r| !r.present).count()
    }

    pub fn partial_failure(&self) -> bool {
        self.missing() > 0 || self.unscored > 0
    }

    /// Means over present rows; absent optional metrics stay `None`.
    pub fn aggregate(&self) -> Aggregate {
        let rows: Vec<&MetricRow> = self.rows.iter().filter(|r| r.present).collect();
        Aggregate {
            rows: rows.len(),
            psnr_bg: mean(rows.iter().map(|r| r.psnr_bg)).unwrap_or(f64::NAN),
            ssim: mean(rows.iter().map(|r| r.ssim)).unwrap_or(f64::NAN),
            masked_mse_edit: mean(rows.iter().map(|r| r.masked_mse_edit)).unwrap_or(f64::NAN),
            sc: mean(rows.iter().filter_map(|r| r.sc)),
            pq: mean(rows.iter().filter_map(|r| r.pq)),
            vie: mean(rows.iter().filter_map(|r| r.vie)),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,task,mode,present,psnr_bg,psnr_capped,ssim,masked_mse_edit,sc,pq,vie\n");
        for r in &self.rows {
            if r.present {
                let _ = writeln!(
                    out,
                    "{},{},{},true,{:.6},{},{:.6},{:.6},{},{},{}",
                    r.id,
                    r.task,
                    r.mode.name(),
                    r.psnr_bg,
                    r.psnr_capped,
                    r.ssim,
                    r.masked_mse_edit,
                    opt(r.sc),
                    opt(r.pq),
                    opt(r.vie)
                );
            } else {
                let _ = writeln!(out, "{},{},{},false,n/a,n/a,n/a,n/a,n/a,n/a,n/a", r.id, r.task, r.mode.name());
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Aligned summary in the order VIEScore, CLIPScore, PSNR, SSIM, LPIPS.
    pub fn summary_table(&self) -> String {
        let a = self.aggregate();
        let cells = [
            ("VIEScore", a.vie.map_or("n/a".to_string(), |v| format!("{v:.3}"))),
            ("CLIPScore", "n/a".to_string()),
            ("PSNR", format!("{:.3}", a.psnr_bg)),
            ("SSIM", format!("{:.4}", a.ssim)),
            ("LPIPS", "n/a".to_string()),
        ];
        let widths: Vec<usize> = cells.iter().map(|(h, v)| h.len().max(v.len())).collect();
        let mut head = String::new();
        let mut body = String::new();
        for ((h, v), w) in cells.iter().zip(&widths) {
            let _ = write!(head, "{h:>w$}  ");
            let _ = write!(body, "{v:>w$}  ");
        }
        format!(
            "{}\n{}\nrows: {}  missing: {}  unscored: {}\n",
            head.trim_end(),
            body.trim_end(),
            a.rows,
            self.missing(),
            self.unscored
        )
    }
}

/// Prediction image path for a manifest row.
pub fn prediction_path(pred_dir: &Path, id: &str) -> std::path::PathBuf {
    pred_dir.join(format!("{id}.ppm"))
}

/// Score `{pred_dir}/{id}.ppm` against each manifest row's target.
/// Missing predictions are recorded as absent rows.
pub fn evaluate(
    manifest: &Manifest,
    manifest_dir: &Path,
    pred_dir: &Path,
    scorer: Option<&mut ScorerAdapter>,
) -> Result<MetricReport> {
    evaluate_records(&manifest.records, manifest_dir, pred_dir, scorer)
}

/// [`evaluate`] split over `workers` threads in contiguous blocks of rows,
/// merged in manifest order. Each worker builds its own scorer when
/// `make_scorer` is given.
pub fn evaluate_parallel(
    manifest: &Manifest,
    manifest_dir: &Path,
    pred_dir: &Path,
    make_scorer: Option<&(dyn Fn() -> ScorerAdapter + Sync)>,
    workers: usize,
) -> Result<MetricReport> {
    let per = manifest.records.len().div_ceil(workers.max(1)).max(1);
    let parts = std::thread::scope(|scope| {
        let handles: Vec<_> = manifest
            .records
            .chunks(per)
            .map(|block| {
                scope.spawn(move || {
                    let mut scorer = make_scorer.map(|m| m());
                    evaluate_records(block, manifest_dir, pred_dir, scorer.as_mut())
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect::<Result<Vec<MetricReport>>>()
    })?;
    let mut report = MetricReport::default();
    for part in parts {
        report.rows.extend(part.rows);
        report.unscored += part.unscored;
    }
    Ok(report)
}

fn evaluate_records(
    records: &[ManifestRecord],
    manifest_dir: &Path,
    pred_dir: &Path,
    mut scorer: Option<&mut ScorerAdapter>,
) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    for rec in records {
        let pred_path = prediction_path(pred_dir, &rec.id);
        let absent = MetricRow {
            id: rec.id.clone(),
            task: rec.task,
            mode: rec.mode,
            present: false,
            psnr_bg: f64::NAN,
            psnr_capped: false,
            ssim: f64::NAN,
            masked_mse_edit: f64::NAN,
            sc: None,
            pq: None,
            vie: None,
        };
        if !pred_path.is_file() {
            report.rows.push(absent);
            continue;
        }
        let pred = RasterImage::load_ppm(&pred_path)?;
        let src_path = resolve(manifest_dir, &rec.src_path);
        let source = RasterImage::load_ppm(&src_path)?;
        let target = RasterImage::load_ppm(&resolve(manifest_dir, &rec.tgt_path))?;
        let mask = Mask::load_pgm(&resolve(manifest_dir, &rec.mask_path))?;
        let p = psnr(&pred, &target, Some(&mask.invert()))?;
        let edit = mse(&pred, &target, Some(&mask))?;
        let mut row = MetricRow {
            present: true,
            psnr_bg: p.db,
            psnr_capped: p.capped,
            ssim: ssim(&pred, &target)?,
            masked_mse_edit: edit,
            ..absent
        };
        if let Some(s) = scorer.as_deref_mut() {
            let sample = EditSample {
                pair_id: rec.id.clone(),
                task: rec.task,
                mode: rec.mode,
                source,
                target: pred,
                mask,
                instruction: rec.instruction.clone(),
                seed: 0,
                object_id: 0,
                object: String::new(),
                replacement: None,
                scores: None,
            };
            match s.score(&sample, &src_path, &pred_path) {
                Ok(q) => {
                    row.sc = Some(q.sc);
                    row.pq = Some(q.pq);
                    row.vie = Some(q.overall);
                }
                Err(Error::Scorer(_)) => report.unscored += 1,
                Err(e) => return Err(e),
            }
        }
        report.rows.push(row);
    }
    Ok(report)
}
