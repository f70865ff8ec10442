//! Label maps, samples and per-domain sample pools.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{arg_err, Result};
use crate::rng::DetRng;
use crate::tensor::Tensor;

/// Label value for pixels that carry no supervision.
pub const IGNORE: u8 = 255;

/// Dense `H x W` map of class ids (or [`IGNORE`]).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(arg_err!("label map {}x{} needs {} entries, got {}", height, width, height * width, data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self { height, width, data: vec![class; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Checks that every non-ignored entry is a valid class.
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self.data.iter().find(|&&c| c != IGNORE && c as usize >= classes) {
            Some(c) => Err(arg_err!("label {} out of range for {} classes", c, classes)),
            None => Ok(()),
        }
    }

    /// `H x W x K` one-hot view; ignored pixels become all-zero rows.
    pub fn onehot(&self, classes: usize) -> Tensor {
        let mut out = vec![0.0; self.data.len() * classes];
        for (i, &c) in self.data.iter().enumerate() {
            if c != IGNORE && (c as usize) < classes {
                out[i * classes + c as usize] = 1.0;
            }
        }
        Tensor::new(&[self.height, self.width, classes], out).expect("sized")
    }

    /// Sorted distinct classes present (ignoring [`IGNORE`]).
    pub fn present_classes(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &c in &self.data {
            seen[c as usize] = true;
        }
        (0..IGNORE).filter(|&c| seen[c as usize]).collect()
    }

    /// Per-pixel argmax of an `H x W x K` field.
    pub fn from_argmax(field: &Tensor) -> Result<Self> {
        let (h, w, _) = field.dims3()?;
        let data = crate::ops::argmax_last(field).into_iter().map(|c| c as u8).collect();
        Self::new(h, w, data)
    }

    /// Class histogram over `classes` bins (ignored pixels skipped).
    pub fn histogram(&self, classes: usize) -> Vec<u64> {
        let mut h = vec![0u64; classes];
        for &c in &self.data {
            if (c as usize) < classes {
                h[c as usize] += 1;
            }
        }
        h
    }
}

/// An `H x W x C` image with values in `[0, 1]` and an optional label map.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: Option<LabelMap>,
}

/// Samples of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainData {
    pub name: alloc::string::String,
    pub samples: Vec<Sample>,
}

/// Training data: labelled source domains and unlabelled target domains.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainData {
    pub sources: Vec<DomainData>,
    pub targets: Vec<DomainData>,
}

impl TrainData {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.sources.iter().all(|d| d.samples.is_empty()) {
            return Err(arg_err!("no source samples"));
        }
        if self.targets.iter().all(|d| d.samples.is_empty()) {
            return Err(arg_err!("no target samples"));
        }
        for d in &self.sources {
            for s in &d.samples {
                let label = s.label.as_ref().ok_or_else(|| arg_err!("source sample in {} lacks a label", d.name))?;
                label.validate(classes)?;
            }
        }
        Ok(())
    }

    /// All target samples pooled in domain order.
    pub fn pooled_targets(&self) -> impl Iterator<Item = &Sample> {
        self.targets.iter().flat_map(|d| d.samples.iter())
    }
}

/// Cyclic shuffled iterator over sample indices; reshuffles at each pass.
#[derive(Clone, Debug)]
pub struct CyclicIndex {
    order: Vec<usize>,
    pos: usize,
}

impl CyclicIndex {
    pub fn new(len: usize, rng: &mut DetRng) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        rng.shuffle(&mut order);
        Self { order, pos: 0 }
    }

    pub fn next(&mut self, rng: &mut DetRng) -> usize {
        if self.pos == self.order.len() {
            rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Draws batches from several domains: the domain is chosen uniformly per
/// element, then the next index of that domain's cyclic order is taken.
#[derive(Clone, Debug)]
pub struct DomainSampler {
    cursors: Vec<CyclicIndex>,
    domains: Vec<usize>,
}

impl DomainSampler {
    pub fn new(domains: &[DomainData], rng: &mut DetRng) -> Self {
        let mut cursors = Vec::new();
        let mut ids = Vec::new();
        for (i, d) in domains.iter().enumerate() {
            cursors.push(CyclicIndex::new(d.samples.len(), rng));
            if !d.samples.is_empty() {
                ids.push(i);
            }
        }
        Self { cursors, domains: ids }
    }

    /// `(domain, sample)` indices of the next draw.
    pub fn next(&mut self, rng: &mut DetRng) -> (usize, usize) {
        let d = if self.domains.len() == 1 { self.domains[0] } else { self.domains[rng.below(self.domains.len())] };
        (d, self.cursors[d].next(rng))
    }
}
