//! One self-training path of dual-path bridging: an EMA teacher labels
//! target images, source content is pasted into them (rectangle or selected
//! classes) and the student minimises source CE plus confidence-weighted CE
//! on the mixed sample.

use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::data::{CyclicIndex, DomainSampler, LabelMap, TrainData};
use crate::error::{arg_err, Result};
use crate::mixing::{apply_local_mix, class_mask, sample_region_mask, select_half_classes, BinaryMask, MixedSample, PathKind};
use crate::model::{BoundModel, SegModel};
use crate::ops;
use crate::rng::DetRng;
use crate::tensor::Tensor;
use crate::train::{apply_step, pixel_ce, sum_vars, StageSchedule};

/// Default confidence threshold on the teacher's max softmax probability.
pub const DEFAULT_TAU: f64 = 0.968;
/// Default EMA momentum.
pub const DEFAULT_ALPHA: f64 = 0.99;
/// Default area fraction of the pasted rectangle.
pub const DEFAULT_AREA_RATIO: f64 = 0.3;

/// Gradient-free copy of a student, tracked by exponential moving average.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaTeacher {
    model: SegModel,
    alpha: f64,
}

impl EmaTeacher {
    /// Starts the teacher as an exact copy of `student`.
    pub fn new(student: &SegModel, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(arg_err!("EMA momentum {} outside [0, 1]", alpha));
        }
        Ok(Self { model: student.clone(), alpha })
    }

    pub fn model(&self) -> &SegModel {
        &self.model
    }

    pub fn into_model(self) -> SegModel {
        self.model
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `teacher <- alpha * teacher + (1 - alpha) * student`, elementwise.
    /// Coordinates already equal to the student's are left untouched.
    pub fn update(&mut self, student: &SegModel) -> Result<()> {
        if self.model.arch() != student.arch() {
            return Err(arg_err!("EMA update across different architectures"));
        }
        let a = self.alpha;
        for (t, s) in self.model.params_mut().iter_mut().zip(student.params()) {
            for (p, &q) in t.value.data_mut().iter_mut().zip(s.value.data()) {
                if *p != q {
                    *p = a * *p + (1.0 - a) * q;
                }
            }
        }
        Ok(())
    }
}

/// Free-function form of [`EmaTeacher::update`].
pub fn ema_update(teacher: &mut EmaTeacher, student: &SegModel) -> Result<()> {
    teacher.update(student)
}

/// Teacher hard labels, confidences and the confident-pixel ratio `m_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelPack {
    pub labels: LabelMap,
    /// `H x W` max softmax probability.
    pub confidence: Tensor,
    pub ratio: f64,
    pub tau: f64,
}

impl PseudoLabelPack {
    pub fn from_logits(logits: &Tensor, tau: f64) -> Result<Self> {
        let (h, w, _) = logits.dims3()?;
        let probs = ops::softmax(logits, 2)?;
        Ok(Self::from_probs(&probs, h, w, tau))
    }

    fn from_probs(probs: &Tensor, h: usize, w: usize, tau: f64) -> Self {
        let k = probs.shape()[2];
        let mut labels = alloc::vec![0u8; h * w];
        let mut conf = alloc::vec![0.0; h * w];
        for (i, row) in probs.data().chunks_exact(k).enumerate() {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            labels[i] = best as u8;
            conf[i] = row[best];
        }
        let confident = conf.iter().filter(|&&c| c > tau).count();
        Self {
            labels: LabelMap::new(h, w, labels).expect("sized"),
            confidence: Tensor::new(&[h, w], conf).expect("sized"),
            ratio: confident as f64 / (h * w) as f64,
            tau,
        }
    }
}

/// Pseudo-labels `x_t` with the teacher (no tape, so no gradient can reach it).
pub fn make_pseudo_labels(teacher: &SegModel, xt: &Tensor, tau: f64) -> Result<PseudoLabelPack> {
    let (_, logits) = teacher.infer(xt)?;
    PseudoLabelPack::from_logits(&logits, tau)
}

/// `H x W` loss weights: 1 on source-provenance pixels, `m_t` elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap(pub Tensor);

pub fn build_weight_map(mask: &BinaryMask, ratio: f64) -> Result<WeightMap> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(arg_err!("confident ratio {} outside [0, 1]", ratio));
    }
    let data = mask.data().iter().map(|&m| if m == 1 { 1.0 } else { ratio }).collect();
    Ok(WeightMap(Tensor::new(&[mask.height(), mask.width()], data)?))
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PathConfig {
    pub kind: PathKind,
    pub area_ratio: f64,
    pub tau: f64,
    pub alpha: f64,
    pub schedule: StageSchedule,
}

impl PathConfig {
    pub fn new(kind: PathKind, schedule: StageSchedule) -> Self {
        Self { kind, area_ratio: DEFAULT_AREA_RATIO, tau: DEFAULT_TAU, alpha: DEFAULT_ALPHA, schedule }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(arg_err!("tau must lie in (0, 1), got {}", self.tau));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(arg_err!("alpha must lie in [0, 1), got {}", self.alpha));
        }
        if self.kind == PathKind::Interpolation {
            return Err(arg_err!("bridging paths use local replacement (region or class)"));
        }
        if self.schedule.batch_size == 0 {
            return Err(arg_err!("batch size must be positive"));
        }
        Ok(())
    }
}

/// Tape handles of the two loss terms of one path sample.
#[derive(Clone, Copy, Debug)]
pub struct PathLossVars {
    pub source: Var,
    pub bridge: Var,
    pub total: Var,
}

/// `CE(model(x_s), y_s) + sum_i w_i CE(model(x_mix)_i, y_mix_i)` in summed form.
pub fn path_loss(
    tape: &mut Tape,
    model: &SegModel,
    bound: &BoundModel,
    xs: &Tensor,
    ys: &LabelMap,
    mixed: &MixedSample,
    weights: &WeightMap,
) -> Result<PathLossVars> {
    let k = model.classes();
    let src = model.forward(tape, bound, xs)?;
    let ones = Tensor::full(&[ys.height(), ys.width()], 1.0);
    let source = pixel_ce(tape, src.logits, ys.onehot(k), ones)?;
    let mix = model.forward(tape, bound, &mixed.image)?;
    let bridge = pixel_ce(tape, mix.logits, mixed.label_field(k), weights.0.clone())?;
    let total = tape.add(source, bridge)?;
    Ok(PathLossVars { source, bridge, total })
}

/// Builds the mixed sample and weight map for one `(x_s, y_s, x_t)` triple.
pub fn bridge_sample(
    teacher: &SegModel,
    kind: PathKind,
    area_ratio: f64,
    tau: f64,
    xs: &Tensor,
    ys: &LabelMap,
    xt: &Tensor,
    rng: &mut DetRng,
) -> Result<(MixedSample, WeightMap, PseudoLabelPack)> {
    let pseudo = make_pseudo_labels(teacher, xt, tau)?;
    let mask = match kind {
        PathKind::Region => sample_region_mask(ys.height(), ys.width(), area_ratio, rng)?,
        PathKind::Class => class_mask(ys, &select_half_classes(ys, rng)?),
        PathKind::Interpolation => return Err(arg_err!("interpolation is not a bridging path")),
    };
    let mixed = apply_local_mix(xs, ys, xt, &pseudo.labels, &mask, kind)?;
    let weights = build_weight_map(&mask, pseudo.ratio)?;
    Ok((mixed, weights, pseudo))
}

/// Per-step record of a bridging stage (losses are per-pixel means).
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PathStepLog {
    pub step: u64,
    pub source_loss: f64,
    pub bridge_loss: f64,
    pub mean_ratio: f64,
}

/// Runs `cfg.schedule.steps` self-training steps on one path, updating the
/// student by gradient and the teacher by EMA after every step.
pub fn dpdb_stage(
    student: &mut SegModel,
    teacher: &mut EmaTeacher,
    data: &TrainData,
    cfg: &PathConfig,
    rng: &mut DetRng,
) -> Result<Vec<PathStepLog>> {
    cfg.validate()?;
    data.validate(student.classes())?;
    let targets: Vec<&Tensor> = data.pooled_targets().map(|s| &s.image).collect();
    let mut src_sampler = DomainSampler::new(&data.sources, rng);
    let mut tgt_cursor = CyclicIndex::new(targets.len(), rng);
    let mut opt = cfg.schedule.optimizer_for(student);
    let mut logs = Vec::with_capacity(cfg.schedule.steps as usize);
    for step in 0..cfg.schedule.steps {
        let mut tape = Tape::new();
        let bound = student.bind(&mut tape);
        let (mut src_terms, mut brg_terms) = (Vec::new(), Vec::new());
        let mut pixels = 0usize;
        let mut ratio_sum = 0.0;
        for _ in 0..cfg.schedule.batch_size {
            let (d, i) = src_sampler.next(rng);
            let s = &data.sources[d].samples[i];
            let ys = s.label.as_ref().expect("validated");
            let xt = targets[tgt_cursor.next(rng)];
            let (mixed, weights, pseudo) =
                bridge_sample(teacher.model(), cfg.kind, cfg.area_ratio, cfg.tau, &s.image, ys, xt, rng)?;
            ratio_sum += pseudo.ratio;
            pixels += ys.data().len();
            let v = path_loss(&mut tape, student, &bound, &s.image, ys, &mixed, &weights)?;
            src_terms.push(v.source);
            brg_terms.push(v.bridge);
        }
        let scale = 1.0 / pixels as f64;
        let src = sum_vars(&mut tape, &src_terms)?.expect("batch is non-empty");
        let brg = sum_vars(&mut tape, &brg_terms)?.expect("batch is non-empty");
        let total = tape.add(src, brg)?;
        let loss = tape.scale(total, scale);
        logs.push(PathStepLog {
            step,
            source_loss: tape.value(src).item() * scale,
            bridge_loss: tape.value(brg).item() * scale,
            mean_ratio: ratio_sum / cfg.schedule.batch_size as f64,
        });
        apply_step(&tape, loss, student, &bound, &mut opt)?;
        teacher.update(student)?;
    }
    Ok(logs)
}
