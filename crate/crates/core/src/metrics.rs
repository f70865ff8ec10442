//! Confusion matrices, per-class IoU and mIoU.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{DomainData, LabelMap, IGNORE};
use crate::error::{arg_err, Result};
use crate::model::SegModel;

/// `K x K` counts, rows indexed by ground truth and columns by prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(arg_err!("confusion matrix for {} classes needs {} counts", classes, classes * classes));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one prediction/ground-truth pair; ignored ground-truth pixels are skipped.
    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
            return Err(arg_err!(
                "prediction {}x{} does not match label {}x{}",
                pred.height(),
                pred.width(),
                truth.height(),
                truth.width()
            ));
        }
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            if t == IGNORE {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= self.classes || t >= self.classes {
                return Err(arg_err!("class id out of range for {} classes", self.classes));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(arg_err!("cannot merge {}-class and {}-class matrices", self.classes, other.classes));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Ground-truth pixel count per class (row sums).
    pub fn support(&self) -> Vec<u64> {
        self.counts.chunks_exact(self.classes).map(|r| r.iter().sum()).collect()
    }

    /// `TP / (TP + FP + FN)`; `None` when the class is neither present nor predicted.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let k = self.classes;
        (0..k)
            .map(|j| {
                let tp = self.get(j, j);
                let row: u64 = (0..k).map(|p| self.get(j, p)).sum();
                let col: u64 = (0..k).map(|t| self.get(t, j)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean over defined classes, in `[0, 1]`; 0 when nothing is defined.
    pub fn miou(&self) -> f64 {
        mean_defined(&self.iou())
    }
}

fn mean_defined(iou: &[Option<f64>]) -> f64 {
    let defined: Vec<f64> = iou.iter().flatten().copied().collect();
    if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainReport {
    pub domain: String,
    pub confusion: ConfusionMatrix,
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
}

impl DomainReport {
    pub fn from_confusion(domain: String, confusion: ConfusionMatrix) -> Self {
        let iou = confusion.iou();
        let miou = mean_defined(&iou);
        Self { domain, confusion, iou, miou }
    }
}

/// Per-domain reports plus their arithmetic mean.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub domains: Vec<DomainReport>,
    pub miou: f64,
}

impl EvalReport {
    pub fn from_domains(domains: Vec<DomainReport>) -> Self {
        let miou = if domains.is_empty() { 0.0 } else { domains.iter().map(|d| d.miou).sum::<f64>() / domains.len() as f64 };
        Self { domains, miou }
    }

    /// Class IoU averaged over domains where it is defined.
    pub fn class_iou(&self, class: usize) -> Option<f64> {
        let v: Vec<f64> = self.domains.iter().filter_map(|d| d.iou.get(class).copied().flatten()).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Mean IoU over a subset of classes; undefined entries are skipped.
    pub fn subset_iou(&self, classes: &[usize]) -> f64 {
        mean_defined(&classes.iter().map(|&c| self.class_iou(c)).collect::<Vec<_>>())
    }
}

pub fn predict(model: &SegModel, image: &crate::Tensor) -> Result<LabelMap> {
    let (_, logits) = model.infer(image)?;
    LabelMap::from_argmax(&logits)
}

/// Evaluates `model` on every domain; each sample must carry a label.
pub fn evaluate(model: &SegModel, domains: &[DomainData]) -> Result<EvalReport> {
    let mut reports = Vec::with_capacity(domains.len());
    for d in domains {
        let mut cm = ConfusionMatrix::new(model.classes());
        for (i, s) in d.samples.iter().enumerate() {
            let truth = s.label.as_ref().ok_or_else(|| arg_err!("sample {} of domain {} has no label", i, d.name))?;
            cm.accumulate(&predict(model, &s.image)?, truth)?;
        }
        reports.push(DomainReport::from_confusion(d.name.clone(), cm));
    }
    if reports.is_empty() {
        return Err(arg_err!("evaluation needs at least one domain"));
    }
    Ok(EvalReport::from_domains(reports))
}
