//! Cross-path knowledge distillation: per-class feature centroids of each
//! teacher, prototype-distance ensemble weights, ensembled pseudo-labels and
//! the student objective.

use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::data::{CyclicIndex, DomainSampler, LabelMap, TrainData};
use crate::error::{arg_err, Error, Result};
use crate::model::{BoundModel, SegModel};
use crate::ops;
use crate::rng::DetRng;
use crate::tensor::Tensor;
use crate::train::{apply_step, pixel_ce, sum_vars, StageSchedule};

/// Per-class centroids of teacher features on the target set.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    /// `K x D`; rows of empty classes are zero.
    pub centroids: Tensor,
    pub counts: Vec<u64>,
}

impl PrototypeSet {
    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids.shape()[1]
    }

    pub fn is_empty_class(&self, class: usize) -> bool {
        self.counts[class] == 0
    }

    pub fn centroid(&self, class: usize) -> &[f64] {
        let d = self.dim();
        &self.centroids.data()[class * d..(class + 1) * d]
    }
}

/// Neumaier-compensated accumulator.
#[derive(Clone, Copy, Default)]
struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if libm::fabs(self.sum) >= libm::fabs(v) {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum + self.comp
    }
}

/// Hard labels of a pixel-resolution map sampled onto a `fh x fw` grid.
pub fn downsample_labels(labels: &LabelMap, fh: usize, fw: usize) -> LabelMap {
    let (h, w) = (labels.height(), labels.width());
    let mut out = Vec::with_capacity(fh * fw);
    for fy in 0..fh {
        let y = ops::nearest_index(fy, fh, h);
        for fx in 0..fw {
            out.push(labels.get(y, ops::nearest_index(fx, fw, w)));
        }
    }
    LabelMap::new(fh, fw, out).expect("sized")
}

/// Accumulates class centroids from `(features, hard_labels)` pairs, labels
/// already on the feature grid.
pub fn centroids_from_pairs<'a>(
    pairs: impl IntoIterator<Item = (&'a Tensor, &'a LabelMap)>,
    classes: usize,
) -> Result<PrototypeSet> {
    let mut sums: Option<Vec<CompensatedSum>> = None;
    let mut counts = vec![0u64; classes];
    let mut dim = 0;
    for (features, labels) in pairs {
        let (fh, fw, d) = features.dims3()?;
        if (labels.height(), labels.width()) != (fh, fw) {
            return Err(arg_err!("labels {}x{} do not match features {}x{}", labels.height(), labels.width(), fh, fw));
        }
        let acc = sums.get_or_insert_with(|| {
            dim = d;
            vec![CompensatedSum::default(); classes * d]
        });
        if d != dim {
            return Err(arg_err!("feature dim changed from {} to {}", dim, d));
        }
        for (i, &c) in labels.data().iter().enumerate() {
            let c = c as usize;
            if c >= classes {
                continue;
            }
            counts[c] += 1;
            for (a, &v) in acc[c * d..(c + 1) * d].iter_mut().zip(&features.data()[i * d..(i + 1) * d]) {
                a.add(v);
            }
        }
    }
    let sums = sums.ok_or_else(|| arg_err!("centroids need at least one image"))?;
    let mut centroids = vec![0.0; classes * dim];
    for c in 0..classes {
        if counts[c] > 0 {
            for j in 0..dim {
                centroids[c * dim + j] = sums[c * dim + j].value() / counts[c] as f64;
            }
        }
    }
    Ok(PrototypeSet { centroids: Tensor::new(&[classes, dim], centroids)?, counts })
}

/// Centroid of teacher features per teacher-predicted class over the whole
/// target set; labels are nearest-neighbour sampled onto the feature grid.
pub fn compute_centroids<'a>(teacher: &SegModel, targets: impl IntoIterator<Item = &'a Tensor>) -> Result<PrototypeSet> {
    let mut pairs = Vec::new();
    for x in targets {
        let (features, logits) = teacher.infer(x)?;
        let (fh, fw, _) = features.dims3()?;
        let labels = downsample_labels(&LabelMap::from_argmax(&logits)?, fh, fw);
        pairs.push((features, labels));
    }
    centroids_from_pairs(pairs.iter().map(|(f, l)| (f, l)), teacher.classes())
}

/// Distance used between features and centroids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Distance {
    #[default]
    L2,
    L1,
}

impl Distance {
    fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Distance::L2 => libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()),
            Distance::L1 => a.iter().zip(b).map(|(x, y)| libm::fabs(x - y)).sum(),
        }
    }
}

/// `H' x W' x K` per-pixel softmax of negative centroid distances; empty
/// classes get weight 0.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveWeightField(pub Tensor);

pub fn adaptive_weights(features: &Tensor, prototypes: &PrototypeSet, distance: Distance) -> Result<AdaptiveWeightField> {
    let (fh, fw, d) = features.dims3()?;
    if d != prototypes.dim() {
        return Err(arg_err!("feature dim {} does not match prototypes {}", d, prototypes.dim()));
    }
    let k = prototypes.classes();
    let live: Vec<usize> = (0..k).filter(|&c| !prototypes.is_empty_class(c)).collect();
    if live.is_empty() {
        return Err(Error::Config(alloc::string::String::from("every prototype class is empty")));
    }
    let mut out = vec![0.0; fh * fw * k];
    let mut neg = vec![0.0; live.len()];
    for (px, f) in features.data().chunks_exact(d).enumerate() {
        let mut max = f64::NEG_INFINITY;
        for (slot, &c) in neg.iter_mut().zip(&live) {
            *slot = -distance.eval(f, prototypes.centroid(c));
            max = max.max(*slot);
        }
        let mut z = 0.0;
        for slot in neg.iter_mut() {
            *slot = libm::exp(*slot - max);
            z += *slot;
        }
        for (&e, &c) in neg.iter().zip(&live) {
            out[px * k + c] = e / z;
        }
    }
    Ok(AdaptiveWeightField(Tensor::new(&[fh, fw, k], out)?))
}

/// Brings a weight field to `h x w` by nearest-neighbour (block) resampling.
fn weights_at(weights: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (wh, ww, _) = weights.dims3()?;
    if (wh, ww) == (h, w) {
        Ok(weights.clone())
    } else {
        ops::resize_nearest(weights, h, w)
    }
}

/// Per-pixel ensembled distribution `(w_C * softmax(l_C) + w_F * softmax(l_F)) / 2`.
/// `None` weights mean uniform (all ones).
pub fn ensemble_scores(
    logits_c: &Tensor,
    weights_c: Option<&Tensor>,
    logits_f: &Tensor,
    weights_f: Option<&Tensor>,
) -> Result<Tensor> {
    if logits_c.shape() != logits_f.shape() {
        return Err(arg_err!("teacher logits differ in shape"));
    }
    let (h, w, k) = logits_c.dims3()?;
    let pc = ops::softmax(logits_c, 2)?;
    let pf = ops::softmax(logits_f, 2)?;
    let wc = weights_c.map(|t| weights_at(t, h, w)).transpose()?;
    let wf = weights_f.map(|t| weights_at(t, h, w)).transpose()?;
    for t in [&wc, &wf].into_iter().flatten() {
        if t.shape()[2] != k {
            return Err(arg_err!("ensemble weights have {} classes, logits {}", t.shape()[2], k));
        }
    }
    let mut out = vec![0.0; h * w * k];
    for (i, o) in out.iter_mut().enumerate() {
        let a = wc.as_ref().map_or(1.0, |t| t.data()[i]);
        let b = wf.as_ref().map_or(1.0, |t| t.data()[i]);
        *o = (a * pc.data()[i] + b * pf.data()[i]) / 2.0;
    }
    Tensor::new(&[h, w, k], out)
}

pub fn ensemble_pseudo_label(
    logits_c: &Tensor,
    weights_c: Option<&Tensor>,
    logits_f: &Tensor,
    weights_f: Option<&Tensor>,
) -> Result<LabelMap> {
    LabelMap::from_argmax(&ensemble_scores(logits_c, weights_c, logits_f, weights_f)?)
}

/// Photometric augmentation bounds for the distillation input.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AugmentConfig {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub blur_sigma: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { brightness: 0.2, contrast: 0.2, saturation: 0.2, blur_sigma: (0.1, 1.0) }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self { brightness: 0.0, contrast: 0.0, saturation: 0.0, blur_sigma: (0.0, 0.0) }
    }
}

/// Normalised 1-d Gaussian taps for radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = libm::ceil(3.0 * sigma) as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| libm::exp(-((i * i) as f64) / (2.0 * sigma * sigma))).collect();
    let z: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= z);
    k
}

/// Separable Gaussian blur with periodic boundary.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Result<Tensor> {
    let (h, w, c) = image.dims3()?;
    let k = gaussian_kernel(sigma);
    if k.len() == 1 {
        return Ok(image.clone());
    }
    let r = (k.len() / 2) as isize;
    let wrap = |i: isize, n: usize| i.rem_euclid(n as isize) as usize;
    let src = image.data();
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for (t, &kv) in k.iter().enumerate() {
                let sx = wrap(x as isize + t as isize - r, w);
                for ch in 0..c {
                    tmp[(y * w + x) * c + ch] += kv * src[(y * w + sx) * c + ch];
                }
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for (t, &kv) in k.iter().enumerate() {
            let sy = wrap(y as isize + t as isize - r, h);
            for x in 0..w {
                for ch in 0..c {
                    out[(y * w + x) * c + ch] += kv * tmp[(sy * w + x) * c + ch];
                }
            }
        }
    }
    Tensor::new(&[h, w, c], out)
}

/// Colour jitter (brightness, contrast, saturation) followed by Gaussian blur;
/// geometry is untouched so labels stay aligned.
pub fn augment_target(image: &Tensor, cfg: &AugmentConfig, rng: &mut DetRng) -> Result<Tensor> {
    let (_, _, c) = image.dims3()?;
    let mut draw = |s: f64| if s > 0.0 { rng.uniform_range(1.0 - s, 1.0 + s) } else { 1.0 };
    let (b, ct, sat) = (draw(cfg.brightness), draw(cfg.contrast), draw(cfg.saturation));
    let sigma = if cfg.blur_sigma.1 > 0.0 { rng.uniform_range(cfg.blur_sigma.0, cfg.blur_sigma.1) } else { 0.0 };
    let mut out = image.clone();
    if b != 1.0 || ct != 1.0 || sat != 1.0 {
        let px = out.data_mut();
        let gray = |p: &[f64]| if c == 3 { 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2] } else { p.iter().sum::<f64>() / c as f64 };
        px.iter_mut().for_each(|v| *v *= b);
        let mean = px.chunks_exact(c).map(gray).sum::<f64>() / (px.len() / c) as f64;
        px.iter_mut().for_each(|v| *v = (*v - mean) * ct + mean);
        for p in px.chunks_exact_mut(c) {
            let g = gray(p);
            p.iter_mut().for_each(|v| *v = g + (*v - g) * sat);
        }
    }
    let mut out = gaussian_blur(&out, sigma)?;
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum DistillMode {
    #[default]
    Hard,
    Soft,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum EnsembleMode {
    #[default]
    Adaptive,
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DistillConfig {
    pub mode: DistillMode,
    pub ensemble: EnsembleMode,
    pub temperature: f64,
    pub distance: Distance,
    pub augment: AugmentConfig,
    pub schedule: StageSchedule,
}

impl DistillConfig {
    /// Hard adaptive distillation with L2 prototypes and default augmentation.
    pub fn new(schedule: StageSchedule) -> Self {
        Self {
            mode: DistillMode::Hard,
            ensemble: EnsembleMode::Adaptive,
            temperature: 1.0,
            distance: Distance::L2,
            augment: AugmentConfig::default(),
            schedule,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(arg_err!("temperature must be positive, got {}", self.temperature));
        }
        if self.schedule.batch_size == 0 {
            return Err(arg_err!("batch size must be positive"));
        }
        Ok(())
    }
}

/// What the student is distilled towards on the target image.
#[derive(Clone, Debug, PartialEq)]
pub enum DistillTarget {
    /// Ensembled hard pseudo-label.
    Hard(LabelMap),
    /// Ensembled teacher distribution, `H x W x K`, rows summing to 1.
    Soft(Tensor),
}

/// Tape handles of the student objective.
#[derive(Clone, Copy, Debug)]
pub struct StudentLossVars {
    pub source: Var,
    pub distill: Var,
    pub total: Var,
}

/// `CE(student(x_s), y_s) + CE(student(x_t_aug), ybar)` (hard) or
/// `CE + T^2 KL(teacher || softmax(student / T))` (soft), summed form.
pub fn student_loss(
    tape: &mut Tape,
    student: &SegModel,
    bound: &BoundModel,
    xs: &Tensor,
    ys: &LabelMap,
    xt_aug: &Tensor,
    target: &DistillTarget,
    cfg: &DistillConfig,
) -> Result<StudentLossVars> {
    let k = student.classes();
    let src = student.forward(tape, bound, xs)?;
    let source = pixel_ce(tape, src.logits, ys.onehot(k), Tensor::full(&[ys.height(), ys.width()], 1.0))?;
    let tgt = student.forward(tape, bound, xt_aug)?;
    let distill = match (cfg.mode, target) {
        (DistillMode::Hard, DistillTarget::Hard(ybar)) => {
            pixel_ce(tape, tgt.logits, ybar.onehot(k), Tensor::full(&[ybar.height(), ybar.width()], 1.0))?
        }
        (DistillMode::Soft, DistillTarget::Soft(probs)) => {
            let t = cfg.temperature;
            let scaled = if t == 1.0 { tgt.logits } else { tape.scale(tgt.logits, 1.0 / t) };
            let sp = tape.softmax(scaled, 2)?;
            let kl = tape.kl_divergence(sp, probs.clone())?;
            if t == 1.0 { kl } else { tape.scale(kl, t * t) }
        }
        (DistillMode::Hard, _) => return Err(arg_err!("hard distillation needs an ensembled label map")),
        (DistillMode::Soft, _) => return Err(arg_err!("soft distillation needs ensembled teacher probabilities")),
    };
    let total = tape.add(source, distill)?;
    Ok(StudentLossVars { source, distill, total })
}

/// Teacher-side state for distillation: both models and their prototypes.
pub struct TeacherPair<'a> {
    pub region: &'a SegModel,
    pub class: &'a SegModel,
    pub prototypes: Option<(PrototypeSet, PrototypeSet)>,
}

impl<'a> TeacherPair<'a> {
    /// Computes prototypes on `targets` when the ensemble is adaptive.
    pub fn prepare<'t>(
        region: &'a SegModel,
        class: &'a SegModel,
        targets: impl IntoIterator<Item = &'t Tensor> + Clone,
        ensemble: EnsembleMode,
    ) -> Result<Self> {
        let prototypes = match ensemble {
            EnsembleMode::Adaptive => Some((compute_centroids(region, targets.clone())?, compute_centroids(class, targets)?)),
            EnsembleMode::Uniform => None,
        };
        Ok(Self { region, class, prototypes })
    }

    /// Ensembled target for a clean target image.
    pub fn target_for(&self, xt: &Tensor, cfg: &DistillConfig) -> Result<DistillTarget> {
        let (fc, lc) = self.region.infer(xt)?;
        let (ff, lf) = self.class.infer(xt)?;
        let (wc, wf) = match &self.prototypes {
            Some((pc, pf)) => (
                Some(adaptive_weights(&fc, pc, cfg.distance)?.0),
                Some(adaptive_weights(&ff, pf, cfg.distance)?.0),
            ),
            None => (None, None),
        };
        match cfg.mode {
            DistillMode::Hard => Ok(DistillTarget::Hard(ensemble_pseudo_label(&lc, wc.as_ref(), &lf, wf.as_ref())?)),
            DistillMode::Soft => {
                let t = cfg.temperature;
                let (lc, lf) = (lc.map(|v| v / t), lf.map(|v| v / t));
                let mut scores = ensemble_scores(&lc, wc.as_ref(), &lf, wf.as_ref())?;
                let k = scores.shape()[2];
                for row in scores.data_mut().chunks_exact_mut(k) {
                    let z: f64 = row.iter().sum();
                    row.iter_mut().for_each(|v| *v /= z);
                }
                Ok(DistillTarget::Soft(scores))
            }
        }
    }
}

/// Per-step record of a distillation stage (per-pixel means).
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DistillStepLog {
    pub step: u64,
    pub source_loss: f64,
    pub distill_loss: f64,
}

/// Distils the two path teachers into `student`. Prototypes are computed
/// once, before the first step.
pub fn ckd_stage(
    student: &mut SegModel,
    teacher_region: &SegModel,
    teacher_class: &SegModel,
    data: &TrainData,
    cfg: &DistillConfig,
    rng: &mut DetRng,
) -> Result<Vec<DistillStepLog>> {
    let targets: Vec<&Tensor> = data.pooled_targets().map(|s| &s.image).collect();
    let teachers = TeacherPair::prepare(teacher_region, teacher_class, targets.iter().copied(), cfg.ensemble)?;
    ckd_stage_with(student, &teachers, data, cfg, rng)
}

/// [`ckd_stage`] with teachers (and prototypes) prepared by the caller.
pub fn ckd_stage_with(
    student: &mut SegModel,
    teachers: &TeacherPair<'_>,
    data: &TrainData,
    cfg: &DistillConfig,
    rng: &mut DetRng,
) -> Result<Vec<DistillStepLog>> {
    cfg.validate()?;
    data.validate(student.classes())?;
    if cfg.ensemble == EnsembleMode::Adaptive && teachers.prototypes.is_none() {
        return Err(arg_err!("adaptive ensembling needs prototypes"));
    }
    let targets: Vec<&Tensor> = data.pooled_targets().map(|s| &s.image).collect();
    let mut src_sampler = DomainSampler::new(&data.sources, rng);
    let mut tgt_cursor = CyclicIndex::new(targets.len(), rng);
    let mut opt = cfg.schedule.optimizer_for(student);
    let mut logs = Vec::with_capacity(cfg.schedule.steps as usize);
    for step in 0..cfg.schedule.steps {
        let mut tape = Tape::new();
        let bound = student.bind(&mut tape);
        let (mut src_terms, mut dst_terms) = (Vec::new(), Vec::new());
        let mut pixels = 0usize;
        for _ in 0..cfg.schedule.batch_size {
            let (d, i) = src_sampler.next(rng);
            let s = &data.sources[d].samples[i];
            let ys = s.label.as_ref().expect("validated");
            let xt = targets[tgt_cursor.next(rng)];
            let target = teachers.target_for(xt, cfg)?;
            let xt_aug = augment_target(xt, &cfg.augment, rng)?;
            pixels += ys.data().len();
            let v = student_loss(&mut tape, student, &bound, &s.image, ys, &xt_aug, &target, cfg)?;
            src_terms.push(v.source);
            dst_terms.push(v.distill);
        }
        let scale = 1.0 / pixels as f64;
        let src = sum_vars(&mut tape, &src_terms)?.expect("batch is non-empty");
        let dst = sum_vars(&mut tape, &dst_terms)?.expect("batch is non-empty");
        let total = tape.add(src, dst)?;
        let loss = tape.scale(total, scale);
        logs.push(DistillStepLog {
            step,
            source_loss: tape.value(src).item() * scale,
            distill_loss: tape.value(dst).item() * scale,
        });
        apply_step(&tape, loss, student, &bound, &mut opt)?;
    }
    Ok(logs)
}
