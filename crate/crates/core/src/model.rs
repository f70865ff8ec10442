//! Toy segmentation network: strided conv+ReLU feature extractor followed by
//! a per-pixel linear classifier whose logits are bilinearly upsampled back
//! to the input resolution.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{arg_err, Result};
use crate::ops::{self, ConvGeom};
use crate::rng::DetRng;
use crate::tensor::Tensor;

/// Layer specification of a [`SegModel`].
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Arch {
    pub in_channels: usize,
    /// Output channels of each conv block; the last entry is the feature dim.
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub classes: usize,
}

impl Arch {
    /// `C -> 16 -> 32 -> 32`, 3x3 kernels, stride 2 per block.
    pub fn toy(in_channels: usize, classes: usize) -> Self {
        Self { in_channels, widths: alloc::vec![16, 32, 32], kernel: 3, stride: 2, classes }
    }

    pub fn feature_dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(self.in_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(arg_err!("need at least 2 classes, got {}", self.classes));
        }
        if self.in_channels == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(arg_err!("degenerate channel widths {:?}", self.widths));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) || self.stride == 0 {
            return Err(arg_err!("kernel must be odd and stride positive"));
        }
        Ok(())
    }

    fn geom(&self) -> ConvGeom {
        ConvGeom { stride: self.stride, padding: self.kernel / 2 }
    }

    /// Feature-grid extent for an input extent.
    pub fn feature_extent(&self, mut n: usize) -> usize {
        let pad = self.kernel / 2;
        for _ in &self.widths {
            n = (n + 2 * pad - self.kernel) / self.stride + 1;
        }
        n
    }
}

/// Which learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Extractor,
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    arch: Arch,
    params: Vec<Param>,
}

/// Parameters of one model bound to a tape for a forward/backward pass.
#[derive(Clone, Debug)]
pub struct BoundModel {
    vars: Vec<Var>,
}

/// Tape handles produced by [`SegModel::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub features: Var,
    pub logits: Var,
}

impl BoundModel {
    /// Binds already-recorded leaves, one per parameter in model order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Parameter gradients in model order.
    pub fn grads(&self, g: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| g.get(v)).collect()
    }
}

impl SegModel {
    /// Kaiming fan-in initialisation: conv weights ~ N(0, 2/fan_in),
    /// classifier weights ~ N(0, 1/fan_in), biases zero. Every layer draws
    /// from its own stream derived from one seed taken from `rng` and the
    /// parameter name.
    pub fn init(arch: Arch, rng: &mut DetRng) -> Result<Self> {
        arch.validate()?;
        let seed = rng.next_u64();
        let mut params = Vec::new();
        let mut cin = arch.in_channels;
        for (i, &cout) in arch.widths.iter().enumerate() {
            let fan_in = arch.kernel * arch.kernel * cin;
            let name = format!("extractor.block{}.weight", i);
            let w = gaussian(
                &[arch.kernel, arch.kernel, cin, cout],
                libm::sqrt(2.0 / fan_in as f64),
                &mut DetRng::derive(seed, &name),
            );
            params.push(Param { name, group: ParamGroup::Extractor, value: w });
            params.push(Param {
                name: format!("extractor.block{}.bias", i),
                group: ParamGroup::Extractor,
                value: Tensor::zeros(&[cout]),
            });
            cin = cout;
        }
        let name = String::from("classifier.weight");
        let w = gaussian(&[cin, arch.classes], libm::sqrt(1.0 / cin as f64), &mut DetRng::derive(seed, &name));
        params.push(Param { name, group: ParamGroup::Head, value: w });
        params.push(Param {
            name: String::from("classifier.bias"),
            group: ParamGroup::Head,
            value: Tensor::zeros(&[arch.classes]),
        });
        Ok(Self { arch, params })
    }

    /// Rebuilds a model from named tensors in canonical order.
    pub fn from_params(arch: Arch, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut rng = DetRng::new(0);
        let mut model = Self::init(arch, &mut rng)?;
        if named.len() != model.params.len() {
            return Err(arg_err!("expected {} tensors, got {}", model.params.len(), named.len()));
        }
        for (p, (name, t)) in model.params.iter_mut().zip(named) {
            if p.name != name || p.value.shape() != t.shape() {
                return Err(arg_err!("parameter {} {:?} does not match {} {:?}", name, t.shape(), p.name, p.value.shape()));
            }
            p.value = t;
        }
        Ok(model)
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    fn check_image(&self, image: &Tensor) -> Result<(usize, usize)> {
        let (h, w, c) = image.dims3()?;
        if c != self.arch.in_channels {
            return Err(arg_err!("image has {} channels, model expects {}", c, self.arch.in_channels));
        }
        if h < 2 || w < 2 {
            return Err(arg_err!("image {}x{} too small", h, w));
        }
        Ok((h, w))
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        BoundModel { vars: self.params.iter().map(|p| tape.param(p.value.clone())).collect() }
    }

    /// Differentiable forward pass of one `H x W x C` image.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundModel, image: &Tensor) -> Result<ForwardVars> {
        let (h, w) = self.check_image(image)?;
        let geom = self.arch.geom();
        let mut x = tape.constant(image.clone());
        let blocks = self.arch.widths.len();
        for b in 0..blocks {
            let y = tape.conv2d(x, bound.vars[2 * b], bound.vars[2 * b + 1], geom)?;
            x = tape.relu(y);
        }
        let features = x;
        let coarse = tape.linear(features, bound.vars[2 * blocks], bound.vars[2 * blocks + 1])?;
        let logits = tape.upsample_bilinear(coarse, h, w)?;
        Ok(ForwardVars { features, logits })
    }

    /// Gradient-free forward pass returning `(features, logits)`.
    pub fn infer(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let (h, w) = self.check_image(image)?;
        let geom = self.arch.geom();
        let blocks = self.arch.widths.len();
        let mut x = ops::relu(&ops::conv2d(image, &self.params[0].value, &self.params[1].value, geom)?);
        for b in 1..blocks {
            x = ops::relu(&ops::conv2d(&x, &self.params[2 * b].value, &self.params[2 * b + 1].value, geom)?);
        }
        let coarse = ops::linear(&x, &self.params[2 * blocks].value, &self.params[2 * blocks + 1].value)?;
        let logits = ops::upsample_bilinear(&coarse, h, w)?;
        Ok((x, logits))
    }

    /// Overwrites this model's parameters with `src`'s (deep copy).
    pub fn copy_params_from(&mut self, src: &SegModel) -> Result<()> {
        if self.arch != src.arch {
            return Err(arg_err!("architecture mismatch in parameter copy"));
        }
        for (d, s) in self.params.iter_mut().zip(&src.params) {
            d.value.data_mut().copy_from_slice(s.value.data());
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

fn gaussian(shape: &[usize], std: f64, rng: &mut DetRng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| std * rng.normal()).collect();
    Tensor::new(shape, data).expect("shape product")
}

/// Copies `src` parameters into `dst`; optimizer state is not involved.
pub fn copy_params(src: &SegModel, dst: &mut SegModel) -> Result<()> {
    dst.copy_params_from(src)
}
