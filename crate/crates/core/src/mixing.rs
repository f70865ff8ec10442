//! Cross-domain sample construction: region (cut-and-paste rectangle) and
//! class-level masks, local replacement, and global interpolation.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::data::{LabelMap, IGNORE};
use crate::error::{arg_err, Result};
use crate::rng::DetRng;
use crate::tensor::Tensor;

/// `H x W` mask of `{0, 1}`; 1 marks pixels copied from the source sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(arg_err!("mask {}x{} needs {} entries", height, width, height * width));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(arg_err!("mask entries must be 0 or 1"));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![1; height * width] }
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

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

/// Which bridging route produced a [`MixedSample`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum PathKind {
    Region,
    Class,
    Interpolation,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MixedLabel {
    Hard(LabelMap),
    /// `H x W x K` convex combination of one-hot rows.
    Soft(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedSample {
    pub image: Tensor,
    pub label: MixedLabel,
    /// Provenance mask for local replacement; `None` for interpolation.
    pub mask: Option<BinaryMask>,
    pub kind: PathKind,
}

impl MixedSample {
    pub fn hard_label(&self) -> Option<&LabelMap> {
        match &self.label {
            MixedLabel::Hard(l) => Some(l),
            MixedLabel::Soft(_) => None,
        }
    }

    /// One-hot (or soft) `H x W x K` target for the loss.
    pub fn label_field(&self, classes: usize) -> Tensor {
        match &self.label {
            MixedLabel::Hard(l) => l.onehot(classes),
            MixedLabel::Soft(t) => t.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InterpolationParams {
    /// Fixed ratio; drawn from `Beta(beta, beta)` when `None`.
    pub lambda: Option<f64>,
    pub beta: f64,
}

impl Default for InterpolationParams {
    fn default() -> Self {
        Self { lambda: None, beta: 2.0 }
    }
}

/// Side lengths of the pasted rectangle: `round(H sqrt(r)) x round(W sqrt(r))`.
pub fn region_sides(height: usize, width: usize, area_ratio: f64) -> (usize, usize) {
    let s = libm::sqrt(area_ratio);
    let side = |n: usize| (libm::round(n as f64 * s) as usize).clamp(1, n);
    (side(height), side(width))
}

/// Single axis-aligned rectangle covering about `area_ratio` of the frame,
/// positioned uniformly so that it lies fully inside.
pub fn sample_region_mask(height: usize, width: usize, area_ratio: f64, rng: &mut DetRng) -> Result<BinaryMask> {
    if height < 2 || width < 2 {
        return Err(arg_err!("region mask needs at least 2x2, got {}x{}", height, width));
    }
    if !(area_ratio > 0.0 && area_ratio < 1.0) {
        return Err(arg_err!("area ratio must lie in (0, 1), got {}", area_ratio));
    }
    let (rh, rw) = region_sides(height, width, area_ratio);
    let y0 = rng.below(height - rh + 1);
    let x0 = rng.below(width - rw + 1);
    let mut mask = BinaryMask::zeros(height, width);
    for y in y0..y0 + rh {
        mask.data[y * width + x0..y * width + x0 + rw].fill(1);
    }
    Ok(mask)
}

/// Uniformly random `ceil(n/2)`-subset of the `n` classes present in `label`,
/// returned sorted.
pub fn select_half_classes(label: &LabelMap, rng: &mut DetRng) -> Result<Vec<u8>> {
    let mut present = label.present_classes();
    if present.is_empty() {
        return Err(arg_err!("label map has no labelled pixels"));
    }
    let take = present.len().div_ceil(2);
    rng.shuffle(&mut present);
    present.truncate(take);
    present.sort_unstable();
    Ok(present)
}

/// 1 where the source label is one of `selected`; ignored pixels stay 0.
pub fn class_mask(label: &LabelMap, selected: &[u8]) -> BinaryMask {
    let mut chosen = [false; 256];
    for &c in selected {
        chosen[c as usize] = true;
    }
    let data = label.data().iter().map(|&c| u8::from(c != IGNORE && chosen[c as usize])).collect();
    BinaryMask { height: label.height(), width: label.width(), data }
}

fn check_pair(xs: &Tensor, xt: &Tensor, h: usize, w: usize) -> Result<usize> {
    if xs.shape() != xt.shape() {
        return Err(arg_err!("image shapes differ: {:?} vs {:?}", xs.shape(), xt.shape()));
    }
    let (ih, iw, c) = xs.dims3()?;
    if (ih, iw) != (h, w) {
        return Err(arg_err!("images are {}x{} but mask/labels are {}x{}", ih, iw, h, w));
    }
    Ok(c)
}

/// `x = M*x_s + (1-M)*x_t`, `y = M*y_s + (1-M)*y_t` pixelwise.
pub fn apply_local_mix(
    xs: &Tensor,
    ys: &LabelMap,
    xt: &Tensor,
    yt: &LabelMap,
    mask: &BinaryMask,
    kind: PathKind,
) -> Result<MixedSample> {
    let (h, w) = (mask.height, mask.width);
    let c = check_pair(xs, xt, h, w)?;
    if (ys.height(), ys.width()) != (h, w) || (yt.height(), yt.width()) != (h, w) {
        return Err(arg_err!("label maps do not match mask {}x{}", h, w));
    }
    let mut image = xt.clone();
    let mut label = yt.clone();
    for (i, &m) in mask.data.iter().enumerate() {
        if m == 1 {
            image.data_mut()[i * c..(i + 1) * c].copy_from_slice(&xs.data()[i * c..(i + 1) * c]);
            label.data_mut()[i] = ys.data()[i];
        }
    }
    Ok(MixedSample { image, label: MixedLabel::Hard(label), mask: Some(mask.clone()), kind })
}

/// `Beta(a, a)` draw.
pub fn sample_beta(a: f64, rng: &mut DetRng) -> Result<f64> {
    let dist = rand_distr::Beta::new(a, a).map_err(|e| arg_err!("beta({}): {}", a, e))?;
    Ok(rng.inner_mut().sample(dist))
}

/// `x = l*x_s + (1-l)*x_t` and the same convex combination of one-hot labels.
pub fn apply_interpolation_mix(
    xs: &Tensor,
    ys_onehot: &Tensor,
    xt: &Tensor,
    yt_onehot: &Tensor,
    params: InterpolationParams,
    rng: &mut DetRng,
) -> Result<MixedSample> {
    if xs.shape() != xt.shape() || ys_onehot.shape() != yt_onehot.shape() {
        return Err(arg_err!("interpolation inputs disagree in shape"));
    }
    let (h, w, _) = xs.dims3()?;
    let (lh, lw, _) = ys_onehot.dims3()?;
    if (lh, lw) != (h, w) {
        return Err(arg_err!("labels {}x{} do not match image {}x{}", lh, lw, h, w));
    }
    let lambda = match params.lambda {
        Some(l) if (0.0..=1.0).contains(&l) => l,
        Some(l) => return Err(arg_err!("lambda {} outside [0, 1]", l)),
        None => sample_beta(params.beta, rng)?,
    };
    let blend = |a: &Tensor, b: &Tensor| {
        let data = a.data().iter().zip(b.data()).map(|(p, q)| lambda * p + (1.0 - lambda) * q).collect();
        Tensor::new(a.shape(), data).expect("same shape")
    };
    Ok(MixedSample {
        image: blend(xs, xt),
        label: MixedLabel::Soft(blend(ys_onehot, yt_onehot)),
        mask: None,
        kind: PathKind::Interpolation,
    })
}
