//! Synthetic two-domain street-scene generator.
//!
//! Scenes are `8 x 8` grids of `8 x 8`-pixel cells built column by column:
//! sky down to a per-column horizon, then a ground strip. A column may carry a
//! bus (the first ground cell, so sky is directly above), a train (deeper in
//! the ground, so ground is above) or a person, whose cell below follows the
//! domain's context rule. Buses and trains look identical; road and sidewalk
//! differ only by a faint stripe orientation.
//!
//! The target palette keeps every class colour except a hazy grey-blue sky
//! and draws stronger ground stripes, so a source-trained model mistakes
//! target sky for ground and loses the road/sidewalk boundary.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{DomainData, LabelMap, Sample};
use crate::error::{arg_err, Result};
use crate::rng::DetRng;
use crate::tensor::Tensor;

pub const SKY: u8 = 0;
pub const ROAD: u8 = 1;
pub const SIDEWALK: u8 = 2;
pub const BUS: u8 = 3;
pub const TRAIN: u8 = 4;
pub const PERSON: u8 = 5;
pub const SCENE_CLASSES: usize = 6;
pub const CLASS_NAMES: [&str; SCENE_CLASSES] = ["sky", "road", "sidewalk", "bus", "train", "person"];

/// Classes told apart only by what lies above them.
pub const CONTEXT_PAIR: [usize; 2] = [BUS as usize, TRAIN as usize];
/// Classes told apart by appearance, whose layout prior flips across domains.
pub const APPEARANCE_PAIR: [usize; 2] = [ROAD as usize, SIDEWALK as usize];

pub const CELL: usize = 8;
pub const GRID: usize = 8;
pub const SCENE_SIZE: usize = CELL * GRID;

/// Per-column probabilities of the column shapes; the remainder is plain.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ShapeFrequencies {
    pub bus: f64,
    pub train: f64,
    pub person: f64,
}

impl Default for ShapeFrequencies {
    fn default() -> Self {
        Self { bus: 0.2, train: 0.2, person: 0.3 }
    }
}

impl ShapeFrequencies {
    pub fn validate(&self) -> Result<()> {
        let all = [self.bus, self.train, self.person];
        if all.iter().any(|p| !(0.0..=1.0).contains(p)) || all.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(arg_err!("shape frequencies must be probabilities summing to at most 1"));
        }
        Ok(())
    }
}

/// Ground layout rule of a domain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContextRule {
    /// Ground class directly below sky or an object.
    pub curb: u8,
    /// Ground class below other ground.
    pub ground: u8,
    /// Inclusive range of the first ground row.
    pub horizon: (usize, usize),
    /// Probability that a ground cell follows the rule rather than taking the other ground class.
    pub consistency: f64,
}

pub fn context_rule(id: u32) -> Result<ContextRule> {
    match id {
        0 => Ok(ContextRule { curb: SIDEWALK, ground: ROAD, horizon: (2, 3), consistency: 0.98 }),
        1 => Ok(ContextRule { curb: ROAD, ground: SIDEWALK, horizon: (4, 5), consistency: 1.0 }),
        _ => Err(arg_err!("unknown context rule {}", id)),
    }
}

/// Colours and texture strengths of a domain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Palette {
    pub colors: [[f64; 3]; SCENE_CLASSES],
    /// Amplitude of the road/sidewalk stripes.
    pub stripe: f64,
    /// Standard deviation of per-pixel noise.
    pub noise: f64,
    /// Half-width of the per-image brightness factor around 1.
    pub jitter: f64,
    /// Probability that a ground cell carries only faint stripes.
    pub faint_share: f64,
    /// Stripe amplitude multiplier of faint cells.
    pub faint_level: f64,
    /// Colours each image drifts towards.
    pub drift_colors: [[f64; 3]; SCENE_CLASSES],
    /// Range of the per-image drift amount.
    pub drift: (f64, f64),
}

const BASE_COLORS: [[f64; 3]; SCENE_CLASSES] = [
    [0.55, 0.75, 0.95],
    [0.45, 0.45, 0.45],
    [0.50, 0.48, 0.46],
    [0.90, 0.75, 0.20],
    [0.90, 0.75, 0.20],
    [0.85, 0.25, 0.30],
];

const TARGET_COLORS: [[f64; 3]; SCENE_CLASSES] = {
    let mut c = BASE_COLORS;
    c[SKY as usize] = [0.42, 0.46, 0.56];
    c
};

pub fn palette(id: u32) -> Result<Palette> {
    let base = Palette {
        colors: BASE_COLORS,
        stripe: 0.14,
        noise: 0.05,
        jitter: 0.1,
        faint_share: 0.2,
        faint_level: 0.15,
        drift_colors: BASE_COLORS,
        drift: (0.0, 0.0),
    };
    match id {
        0 => Ok(base),
        1 => Ok(Palette {
            stripe: 0.25,
            noise: 0.06,
            colors: TARGET_COLORS,
            drift_colors: TARGET_COLORS,
            ..base
        }),
        _ => Err(arg_err!("unknown palette {}", id)),
    }
}

/// Generator parameters of one domain.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SceneParams {
    pub palette: u32,
    pub context_rule: u32,
    pub frequencies: ShapeFrequencies,
}

impl SceneParams {
    pub fn source() -> Self {
        Self { palette: 0, context_rule: 0, frequencies: ShapeFrequencies::default() }
    }

    pub fn target() -> Self {
        Self { palette: 1, context_rule: 1, frequencies: ShapeFrequencies::default() }
    }
}

/// Cell-level layout, `GRID x GRID`.
pub fn sample_layout(rule: &ContextRule, freq: &ShapeFrequencies, rng: &mut DetRng) -> LabelMap {
    let mut cells = vec![SKY; GRID * GRID];
    let (h0, h1) = rule.horizon;
    for x in 0..GRID {
        let h = h0 + rng.below(h1 - h0 + 1);
        let u = rng.uniform();
        if u < freq.bus {
            cells[h * GRID + x] = BUS;
        } else if u < freq.bus + freq.train {
            let y = h + 1 + rng.below(GRID - 2 - h);
            cells[y * GRID + x] = TRAIN;
        } else if u < freq.bus + freq.train + freq.person {
            let y = h + rng.below(GRID - 1 - h);
            cells[y * GRID + x] = PERSON;
        }
        for y in h..GRID {
            if cells[y * GRID + x] == SKY {
                let above = cells[(y - 1) * GRID + x];
                let c = if above == ROAD || above == SIDEWALK { rule.ground } else { rule.curb };
                let keep = rule.consistency >= 1.0 || rng.bernoulli(rule.consistency);
                cells[y * GRID + x] = if keep { c } else { ROAD + SIDEWALK - c };
            }
        }
    }
    LabelMap::new(GRID, GRID, cells).expect("sized")
}

fn texture(class: u8, y: usize, x: usize) -> f64 {
    match class {
        ROAD => if (y / 2).is_multiple_of(2) { 1.0 } else { -1.0 },
        SIDEWALK => if (x / 2).is_multiple_of(2) { 1.0 } else { -1.0 },
        _ => 0.0,
    }
}

fn shape(class: u8, y: usize, x: usize) -> f64 {
    match class {
        BUS | TRAIN => if (1..4).contains(&y) && (x % 4 == 1 || x % 4 == 2) { -0.35 } else { 0.0 },
        PERSON => if (1..3).contains(&y) && (3..5).contains(&x) { 0.15 } else if y >= 3 && (2..6).contains(&x) { 0.0 } else { -0.1 },
        SKY => -0.02 * y as f64,
        _ => 0.0,
    }
}

/// Renders a cell layout to 8-bit RGB, row-major `H x W x 3`.
pub fn render(cells: &LabelMap, palette: &Palette, rng: &mut DetRng) -> Vec<u8> {
    let (gh, gw) = (cells.height(), cells.width());
    let (h, w) = (gh * CELL, gw * CELL);
    let mut out = vec![0u8; h * w * 3];
    let gain = if palette.jitter > 0.0 { rng.uniform_range(1.0 - palette.jitter, 1.0 + palette.jitter) } else { 1.0 };
    let t = if palette.drift.1 > palette.drift.0 { rng.uniform_range(palette.drift.0, palette.drift.1) } else { palette.drift.0 };
    let colors: Vec<[f64; 3]> = palette
        .colors
        .iter()
        .zip(&palette.drift_colors)
        .map(|(a, b)| [0, 1, 2].map(|ch| gain * ((1.0 - t) * a[ch] + t * b[ch])))
        .collect();
    let stripes: Vec<f64> = (0..gh * gw)
        .map(|_| if rng.bernoulli(palette.faint_share) { palette.stripe * palette.faint_level } else { palette.stripe })
        .collect();
    for py in 0..h {
        for px in 0..w {
            let c = cells.get(py / CELL, px / CELL);
            let (cy, cx) = (py % CELL, px % CELL);
            let base = colors[c as usize];
            let delta = stripes[(py / CELL) * gw + px / CELL] * texture(c, cy, cx) + shape(c, cy, cx);
            for ch in 0..3 {
                let v = base[ch] + delta + palette.noise * rng.normal();
                out[(py * w + px) * 3 + ch] = libm::round(v.clamp(0.0, 1.0) * 255.0) as u8;
            }
        }
    }
    out
}

/// Expands a cell layout to pixel labels.
pub fn upscale_cells(cells: &LabelMap) -> LabelMap {
    let (gh, gw) = (cells.height(), cells.width());
    let mut data = Vec::with_capacity(gh * gw * CELL * CELL);
    for py in 0..gh * CELL {
        for px in 0..gw * CELL {
            data.push(cells.get(py / CELL, px / CELL));
        }
    }
    LabelMap::new(gh * CELL, gw * CELL, data).expect("sized")
}

/// One generated scene as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scene {
    pub rgb: Vec<u8>,
    pub label: LabelMap,
}

impl Scene {
    pub fn to_sample(&self, keep_label: bool) -> Sample {
        Sample { image: rgb8_to_tensor(SCENE_SIZE, SCENE_SIZE, &self.rgb), label: keep_label.then(|| self.label.clone()) }
    }
}

pub fn rgb8_to_tensor(h: usize, w: usize, rgb: &[u8]) -> Tensor {
    Tensor::new(&[h, w, 3], rgb.iter().map(|&v| v as f64 / 255.0).collect()).expect("sized")
}

/// Fully resolved generator settings of a domain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneStyle {
    pub rule: ContextRule,
    pub palette: Palette,
    pub frequencies: ShapeFrequencies,
}

impl SceneStyle {
    pub fn resolve(params: &SceneParams) -> Result<Self> {
        params.frequencies.validate()?;
        Ok(Self { rule: context_rule(params.context_rule)?, palette: palette(params.palette)?, frequencies: params.frequencies })
    }

    /// Scene `index` of a domain; each index has its own random stream.
    pub fn scene(&self, seed: u64, domain: &str, index: usize) -> Scene {
        let mut rng = DetRng::derive(seed, domain).child(&alloc::format!("scene{index}"));
        let cells = sample_layout(&self.rule, &self.frequencies, &mut rng);
        let rgb = render(&cells, &self.palette, &mut rng);
        Scene { rgb, label: upscale_cells(&cells) }
    }

    pub fn domain(&self, name: &str, seed: u64, offset: usize, count: usize, labelled: bool) -> DomainData {
        let samples = (offset..offset + count).map(|i| self.scene(seed, name, i).to_sample(labelled)).collect();
        DomainData { name: String::from(name), samples }
    }
}

pub fn generate_scene(params: &SceneParams, seed: u64, domain: &str, index: usize) -> Result<Scene> {
    Ok(SceneStyle::resolve(params)?.scene(seed, domain, index))
}

pub fn generate_scenes(params: &SceneParams, seed: u64, domain: &str, range: core::ops::Range<usize>) -> Result<Vec<Scene>> {
    let style = SceneStyle::resolve(params)?;
    Ok(range.map(|i| style.scene(seed, domain, i)).collect())
}

/// In-memory domain of `count` scenes starting at `offset`.
pub fn generate_domain(
    name: &str,
    params: &SceneParams,
    seed: u64,
    offset: usize,
    count: usize,
    labelled: bool,
) -> Result<DomainData> {
    Ok(SceneStyle::resolve(params)?.domain(name, seed, offset, count, labelled))
}
