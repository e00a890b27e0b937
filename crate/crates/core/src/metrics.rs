//! Dice, IoU and MAE, and dataset-level evaluation reports.

use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::{load_dir, SegSample};
use crate::error::{Error, Result};
use crate::model::PolypSes;
use crate::tensor::Tensor;

fn check_pair(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok(())
}

fn check_binary(name: &str, t: &Tensor<f32>) -> Result<()> {
    if t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Contract(format!("{name} must be binary")));
    }
    Ok(())
}

/// Pixel counts of a binary prediction/ground-truth pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Overlap {
    pub pred: usize,
    pub gt: usize,
    pub intersection: usize,
}

impl Overlap {
    pub fn of(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<Self> {
        check_pair(pred, gt)?;
        check_binary("prediction", pred)?;
        check_binary("ground truth", gt)?;
        let mut o = Overlap {
            pred: 0,
            gt: 0,
            intersection: 0,
        };
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            o.pred += (p == 1.0) as usize;
            o.gt += (g == 1.0) as usize;
            o.intersection += (p == 1.0 && g == 1.0) as usize;
        }
        Ok(o)
    }

    pub fn union(&self) -> usize {
        self.pred + self.gt - self.intersection
    }

    /// `2|P∩G| / (|P|+|G|)`, 1 when both are empty.
    pub fn dice(&self) -> f64 {
        match self.pred + self.gt {
            0 => 1.0,
            s => 2.0 * self.intersection as f64 / s as f64,
        }
    }

    /// `|P∩G| / |P∪G|`, 1 when both are empty.
    pub fn iou(&self) -> f64 {
        match self.union() {
            0 => 1.0,
            u => self.intersection as f64 / u as f64,
        }
    }
}

pub fn dice(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<f64> {
    Ok(Overlap::of(pred, gt)?.dice())
}

pub fn iou(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<f64> {
    Ok(Overlap::of(pred, gt)?.iou())
}

/// Mean absolute difference between a continuous map and a binary mask.
pub fn mae(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<f64> {
    check_pair(pred, gt)?;
    check_binary("ground truth", gt)?;
    if gt.is_empty() {
        return Err(Error::Shape("empty map".into()));
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| (f64::from(p) - f64::from(g)).abs())
        .sum();
    Ok(s / gt.len() as f64)
}

/// 1 where `p ≥ threshold`, else 0.
pub fn binarize(pred: &Tensor<f32>, threshold: f64) -> Tensor<f32> {
    pred.map(|p| if f64::from(p) >= threshold { 1.0 } else { 0.0 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleScore {
    pub id: String,
    pub dice: f64,
    pub iou: f64,
    pub mae: f64,
}

impl SampleScore {
    /// Scores a continuous map against `gt`.
    pub fn score(
        id: impl Into<String>,
        pred: &Tensor<f32>,
        gt: &Tensor<f32>,
        threshold: f64,
    ) -> Result<Self> {
        let o = Overlap::of(&binarize(pred, threshold), gt)?;
        Ok(Self {
            id: id.into(),
            dice: o.dice(),
            iou: o.iou(),
            mae: mae(pred, gt)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub dataset: String,
    pub tag: String,
    /// Sorted by id.
    pub samples: Vec<SampleScore>,
    pub mdice: f64,
    pub miou: f64,
    pub mae: f64,
}

impl EvalReport {
    pub fn new(
        dataset: impl Into<String>,
        tag: impl Into<String>,
        mut samples: Vec<SampleScore>,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config("evaluation over zero samples".into()));
        }
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        let n = samples.len() as f64;
        let mean = |f: fn(&SampleScore) -> f64| samples.iter().map(f).sum::<f64>() / n;
        let (mdice, miou, mae) = (mean(|s| s.dice), mean(|s| s.iou), mean(|s| s.mae));
        Ok(Self {
            dataset: dataset.into(),
            tag: tag.into(),
            samples,
            mdice,
            miou,
            mae,
        })
    }

    /// `id,dice,iou,mae`, one row per sample.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,dice,iou,mae\n");
        for r in &self.samples {
            let _ = writeln!(s, "{},{},{},{}", r.id, r.dice, r.iou, r.mae);
        }
        s
    }

    /// One-row table with `mDice mIoU MAE` columns.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<28} {:<16} {:>8} {:>8} {:>8}",
            "Method", "Dataset", "mDice", "mIoU", "MAE"
        );
        let _ = writeln!(
            s,
            "{:<28} {:<16} {:>8.3} {:>8.3} {:>8.3}",
            self.tag, self.dataset, self.mdice, self.miou, self.mae
        );
        s
    }
}

/// Anything mapping a `1×3×H×W` image to a `1×1×h×w` probability map.
pub trait Predictor {
    fn input_size(&self) -> (usize, usize);
    fn predict_map(&mut self, image: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Predictor for PolypSes<f32> {
    fn input_size(&self) -> (usize, usize) {
        self.config().encoder.input_size
    }

    fn predict_map(&mut self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.predict(image)
    }
}

/// Full-resolution probability map for one sample: the image is resized to
/// the predictor's input, and the output upsampled to the mask extent.
pub fn predict_full<P: Predictor + ?Sized>(
    predictor: &mut P,
    sample: &SegSample,
) -> Result<Tensor<f32>> {
    let (h, w) = sample.size();
    let map = predictor.predict_map(&sample.input(predictor.input_size())?)?;
    let map = if map.shape()[2..] == [h, w] {
        map
    } else {
        map.resize_bilinear(h, w)?
    };
    map.reshape(&[1, h, w])
}

pub fn evaluate_samples<P: Predictor + ?Sized>(
    predictor: &mut P,
    samples: &[SegSample],
    threshold: f64,
    dataset: &str,
    tag: &str,
) -> Result<EvalReport> {
    let scores = samples
        .iter()
        .map(|s| {
            SampleScore::score(
                s.id.clone(),
                &predict_full(predictor, s)?,
                &s.mask,
                threshold,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::new(dataset, tag, scores)
}

/// Loads `dir` and evaluates; the dataset is named after the directory.
pub fn evaluate_dataset<P: Predictor + ?Sized>(
    predictor: &mut P,
    dir: &Path,
    threshold: f64,
    tag: &str,
) -> Result<EvalReport> {
    let samples = load_dir(dir)?;
    let name = dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("dataset");
    evaluate_samples(predictor, &samples, threshold, name, tag)
}
