//! Pixel-level change-detection scores.

use std::fs::OpenOptions;
use std::ops::{Add, AddAssign};
use std::path::Path;

use serde::Serialize;

use crate::data::Mask;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Counts over flat binary slices; `1` is the changed class.
pub fn confusion_slices(pred: &[u8], gt: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "non-binary value (pred {p}, gt {g})"
                )))
            }
        }
    }
    Ok(c)
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
    if !pred.same_spatial(gt) || pred.channels != gt.channels {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    confusion_slices(&pred.data, &gt.data)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Metrics {
    pub recall: f64,
    pub precision: f64,
    pub oa: f64,
    pub f1: f64,
    pub iou: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    /// Scores from counts. Any ratio with a zero denominator is 0.
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        let recall = ratio(c.tp, c.tp + c.fn_);
        let precision = ratio(c.tp, c.tp + c.fp);
        let f1 = if recall > 0.0 && precision > 0.0 {
            2.0 / (1.0 / recall + 1.0 / precision)
        } else {
            0.0
        };
        Self {
            recall,
            precision,
            oa: ratio(c.tp + c.tn, c.total()),
            f1,
            iou: ratio(c.tp, c.tp + c.fp + c.fn_),
        }
    }

    pub fn mean(items: &[Metrics]) -> Self {
        if items.is_empty() {
            return Self::default();
        }
        let n = items.len() as f64;
        let s = items.iter().fold(Self::default(), |a, m| Self {
            recall: a.recall + m.recall,
            precision: a.precision + m.precision,
            oa: a.oa + m.oa,
            f1: a.f1 + m.f1,
            iou: a.iou + m.iou,
        });
        Self {
            recall: s.recall / n,
            precision: s.precision / n,
            oa: s.oa / n,
            f1: s.f1 / n,
            iou: s.iou / n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Pool counts over every pixel, then score once.
    #[default]
    Micro,
    /// Score each image, then average.
    PerTile,
}

pub fn score(counts: &[ConfusionCounts], pooling: Pooling) -> Metrics {
    match pooling {
        Pooling::Micro => Metrics::from_counts(&counts.iter().copied().sum()),
        Pooling::PerTile => {
            let per: Vec<Metrics> = counts.iter().map(Metrics::from_counts).collect();
            Metrics::mean(&per)
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsRow<'a> {
    pub dataset: &'a str,
    pub split: &'a str,
    pub method_tag: &'a str,
    pub recall: f64,
    pub precision: f64,
    pub oa: f64,
    pub f1: f64,
    pub iou: f64,
}

impl<'a> MetricsRow<'a> {
    pub fn new(dataset: &'a str, split: &'a str, method_tag: &'a str, m: &Metrics) -> Self {
        Self {
            dataset,
            split,
            method_tag,
            recall: m.recall,
            precision: m.precision,
            oa: m.oa,
            f1: m.f1,
            iou: m.iou,
        }
    }
}

/// Appends serialisable rows to a CSV file, writing the header only when the
/// file is new or empty.
pub fn append_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_example() {
        let c = ConfusionCounts { tp: 6, fp: 2, fn_: 3, tn: 89 };
        let m = Metrics::from_counts(&c);
        assert!((m.recall - 6.0 / 9.0).abs() < 1e-15);
        assert!((m.precision - 0.75).abs() < 1e-15);
        assert!((m.oa - 0.95).abs() < 1e-15);
        assert!((m.f1 - 12.0 / 17.0).abs() < 1e-15);
        assert!((m.iou - 6.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_counts_score_zero() {
        let m = Metrics::from_counts(&ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 10 });
        assert_eq!((m.recall, m.precision, m.f1, m.iou), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(m.oa, 1.0);
        assert_eq!(Metrics::from_counts(&ConfusionCounts::default()).oa, 0.0);
    }

    #[test]
    fn confusion_rejects_bad_input() {
        assert!(confusion_slices(&[0, 2], &[0, 1]).is_err());
        assert!(confusion_slices(&[0], &[0, 1]).is_err());
        let c = confusion_slices(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 1, fn_: 1, tn: 1 });
    }

    #[test]
    fn micro_and_per_tile_differ() {
        let a = ConfusionCounts { tp: 10, fp: 0, fn_: 0, tn: 0 };
        let b = ConfusionCounts { tp: 0, fp: 0, fn_: 10, tn: 0 };
        assert!((score(&[a, b], Pooling::Micro).recall - 0.5).abs() < 1e-15);
        assert!((score(&[a, b], Pooling::PerTile).f1 - 0.5).abs() < 1e-15);
        assert!((score(&[a, b], Pooling::Micro).f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn csv_header_written_once() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let m = Metrics::from_counts(&ConfusionCounts { tp: 1, fp: 1, fn_: 1, tn: 1 });
        append_csv(&p, &[MetricsRow::new("synthetic", "test", "cadm", &m)]).unwrap();
        append_csv(&p, &[MetricsRow::new("synthetic", "test", "cadm", &m)]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "dataset,split,method_tag,recall,precision,oa,f1,iou");
    }
}
