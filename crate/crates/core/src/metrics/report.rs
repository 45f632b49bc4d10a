use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{frechet_distance, paired_metrics, DisplayImage, FeatureExtractor, FeatureStats, MetricsError};
use crate::data::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub id: String,
    pub mse: f64,
    /// `None` when the pair is identical.
    pub psnr_db: Option<f64>,
    pub ssim: f64,
}

/// Mean and sample standard deviation (`n - 1` denominator, 0 for one value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Some(Self { n, mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidEntry {
    /// `after` for generated vs reference, `before` for source vs reference.
    pub label: String,
    pub compared: String,
    pub reference: String,
    pub value: f64,
    /// Whether diagonal loading was applied to either covariance.
    pub shrinkage_applied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub generated: String,
    pub reference: String,
    pub ground_truth: Option<String>,
    pub source: Option<String>,
    pub feature_extractor: String,
    pub feature_dim: usize,
    pub max_value: f64,
    pub config_fingerprint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub meta: ReportMeta,
    pub rows: Vec<ImageRow>,
    pub mse: Option<Aggregate>,
    /// Over rows with a defined PSNR only.
    pub psnr_db: Option<Aggregate>,
    pub ssim: Option<Aggregate>,
    pub fid: Vec<FidEntry>,
}

fn num(v: f64) -> String {
    format!("{v}")
}

impl MetricsReport {
    /// Comma-separated table: `record,id,mse,psnr_db,ssim,fid`, one `image`
    /// row per pair, then `mean` and `std` rows, then one `fid` row per
    /// comparison with its label in the id column. Undefined values are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("record,id,mse,psnr_db,ssim,fid\n");
        for r in &self.rows {
            let p = r.psnr_db.map(num).unwrap_or_default();
            let _ = writeln!(out, "image,{},{},{},{},", r.id, num(r.mse), p, num(r.ssim));
        }
        if self.mse.is_some() {
            let field = |a: Option<Aggregate>, f: fn(&Aggregate) -> f64| a.as_ref().map(f).map(num).unwrap_or_default();
            for (name, f) in [("mean", (|a: &Aggregate| a.mean) as fn(&Aggregate) -> f64), ("std", |a: &Aggregate| a.std)] {
                let _ = writeln!(out, "{name},,{},{},{},", field(self.mse, f), field(self.psnr_db, f), field(self.ssim, f));
            }
        }
        for e in &self.fid {
            let _ = writeln!(out, "fid,{},,,,{}", e.label, num(e.value));
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn fid_value(&self, label: &str) -> Option<f64> {
        self.fid.iter().find(|e| e.label == label).map(|e| e.value)
    }
}

/// Datasets and options for [`evaluate_translation`].
pub struct EvalInputs<'a> {
    pub generated: &'a Dataset,
    pub reference: &'a Dataset,
    /// Enables per-image rows, paired by id.
    pub ground_truth: Option<&'a Dataset>,
    /// Adds the `before` distance of the untranslated source.
    pub source: Option<&'a Dataset>,
    pub extractor: &'a dyn FeatureExtractor,
    pub max_value: f64,
    pub config_fingerprint: Option<String>,
}

fn stats(ds: &Dataset, ex: &dyn FeatureExtractor) -> Result<FeatureStats, MetricsError> {
    let rows: Vec<Vec<f64>> = ds.samples.par_iter().map(|s| ex.extract(&DisplayImage::from_sample(s))).collect();
    Ok(FeatureStats::from_features(&rows)?.shrink_if_needed())
}

fn fid_entry(label: &str, compared: &Dataset, reference: &FeatureStats, reference_name: &str, ex: &dyn FeatureExtractor) -> Result<FidEntry, MetricsError> {
    let s = stats(compared, ex)?;
    Ok(FidEntry {
        label: label.into(),
        compared: compared.domain_tag.clone(),
        reference: reference_name.into(),
        value: frechet_distance(&s, reference)?,
        shrinkage_applied: s.is_shrunk() || reference.is_shrunk(),
    })
}

/// Paired per-image metrics (when ground truth is given) and dataset-level
/// Fréchet distances.
pub fn evaluate_translation(inp: &EvalInputs<'_>) -> Result<MetricsReport, MetricsError> {
    let ex = inp.extractor;
    let mut rows = Vec::new();
    if let Some(gt) = inp.ground_truth {
        let by_id: HashMap<&str, usize> = gt.samples.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
        let gen_ids: HashSet<&str> = inp.generated.samples.iter().map(|s| s.id.as_str()).collect();
        let mut offenders: Vec<String> = inp
            .generated
            .samples
            .iter()
            .filter(|s| !by_id.contains_key(s.id.as_str()))
            .map(|s| s.id.clone())
            .collect();
        offenders.extend(gt.samples.iter().filter(|s| !gen_ids.contains(s.id.as_str())).map(|s| s.id.clone()));
        if !offenders.is_empty() {
            return Err(MetricsError::IdMismatch(offenders));
        }
        let images: Vec<(DisplayImage, DisplayImage)> = inp
            .generated
            .samples
            .iter()
            .map(|s| (DisplayImage::from_sample(s), DisplayImage::from_sample(&gt.samples[by_id[s.id.as_str()]])))
            .collect();
        let pairs: Vec<(&DisplayImage, &DisplayImage)> = images.iter().map(|(a, b)| (a, b)).collect();
        let values = paired_metrics(&pairs, inp.max_value)?;
        rows = inp
            .generated
            .samples
            .iter()
            .zip(values)
            .map(|(s, (mse, psnr_db, ssim))| ImageRow {
                id: s.id.clone(),
                mse,
                psnr_db,
                ssim,
            })
            .collect();
    }
    let col = |f: fn(&ImageRow) -> Option<f64>| rows.iter().filter_map(f).collect::<Vec<_>>();
    let reference = stats(inp.reference, ex)?;
    let mut fid = vec![fid_entry("after", inp.generated, &reference, &inp.reference.domain_tag, ex)?];
    if let Some(src) = inp.source {
        fid.push(fid_entry("before", src, &reference, &inp.reference.domain_tag, ex)?);
    }
    Ok(MetricsReport {
        meta: ReportMeta {
            generated: inp.generated.domain_tag.clone(),
            reference: inp.reference.domain_tag.clone(),
            ground_truth: inp.ground_truth.map(|d| d.domain_tag.clone()),
            source: inp.source.map(|d| d.domain_tag.clone()),
            feature_extractor: ex.id().into(),
            feature_dim: ex.dim(),
            max_value: inp.max_value,
            config_fingerprint: inp.config_fingerprint.clone(),
        },
        mse: Aggregate::of(&col(|r| Some(r.mse))),
        psnr_db: Aggregate::of(&col(|r| r.psnr_db)),
        ssim: Aggregate::of(&col(|r| Some(r.ssim))),
        rows,
        fid,
    })
}
