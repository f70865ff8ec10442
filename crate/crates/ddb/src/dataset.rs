//! On-disk benchmark: PPM images, PGM labels and a manifest.
//!
//! Each manifest line reads `<split> <domain-id> <image-path> <label-path|->`
//! with paths relative to the manifest's directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ddb_core::data::{DomainData, LabelMap, Sample, TrainData};
use ddb_core::scene::{rgb8_to_tensor, SceneStyle, SCENE_SIZE};

use crate::config::{Config, DomainSpec, Origin, Role};
use crate::error::{format_err, PathContext, Result};
use crate::pnm;

pub const MANIFEST: &str = "manifest.txt";
pub const TRAIN: &str = "train";
pub const EVAL: &str = "eval";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: String,
    pub domain: String,
    pub image: PathBuf,
    pub label: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(' ').collect();
            if f.len() != 4 || f.iter().any(|s| s.is_empty()) {
                return Err(format_err(path, format!("line {}: expected 4 space-separated fields", i + 1)));
            }
            entries.push(ManifestEntry {
                split: f[0].into(),
                domain: f[1].into(),
                image: f[2].into(),
                label: (f[3] != "-").then(|| f[3].into()),
            });
        }
        Ok(Self { entries })
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let label = e.label.as_ref().map_or("-".into(), |p| p.display().to_string());
            writeln!(s, "{} {} {} {}", e.split, e.domain, e.image.display(), label).expect("string write");
        }
        s
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        Self::parse(&std::fs::read_to_string(&path).at(&path)?, &path)
    }

    /// Domain names of `split` in order of first appearance.
    pub fn domains(&self, split: &str) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for e in self.entries.iter().filter(|e| e.split == split) {
            if !names.contains(&e.domain) {
                names.push(e.domain.clone());
            }
        }
        names
    }
}

fn entry_paths(domain: &str, split: &str, index: usize) -> (PathBuf, PathBuf) {
    let stem = Path::new(domain).join(split).join(format!("{index:05}"));
    (stem.with_extension("ppm"), stem.with_extension("pgm"))
}

/// Renders every generated domain of `cfg` into `out` and writes the manifest.
/// Source training samples carry labels; target training samples do not.
pub fn generate_benchmark(cfg: &Config, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let mut manifest = Manifest::default();
    for d in &cfg.domains {
        let Origin::Generator(params) = &d.origin else {
            return Err(crate::Error::Config(format!("domain {:?} is not generated", d.name)));
        };
        let style = SceneStyle::resolve(params)?;
        for (split, range, labelled) in [(TRAIN, 0..d.count, d.role == Role::Source), (EVAL, d.count..d.count + d.eval_count, true)] {
            if range.is_empty() {
                continue;
            }
            let dir = out.join(&d.name).join(split);
            std::fs::create_dir_all(&dir).at(&dir)?;
            for (k, index) in range.enumerate() {
                let scene = style.scene(cfg.data_seed, &d.name, index);
                let (img, lbl) = entry_paths(&d.name, split, k);
                pnm::write_ppm(&out.join(&img), SCENE_SIZE, SCENE_SIZE, &scene.rgb)?;
                let label = if labelled {
                    pnm::write_pgm(&out.join(&lbl), SCENE_SIZE, SCENE_SIZE, scene.label.data())?;
                    Some(lbl)
                } else {
                    None
                };
                manifest.entries.push(ManifestEntry { split: split.into(), domain: d.name.clone(), image: img, label });
            }
        }
    }
    let path = out.join(MANIFEST);
    std::fs::write(&path, manifest.render()).at(&path)?;
    Ok(manifest)
}

pub fn load_sample(dir: &Path, entry: &ManifestEntry, keep_label: bool) -> Result<Sample> {
    let path = dir.join(&entry.image);
    let img = pnm::read_ppm(&path)?;
    let image = rgb8_to_tensor(img.height, img.width, &img.data);
    let label = match (&entry.label, keep_label) {
        (Some(l), true) => {
            let path = dir.join(l);
            let g = pnm::read_pgm(&path)?;
            if (g.width, g.height) != (img.width, img.height) {
                return Err(format_err(&path, "label size differs from its image"));
            }
            Some(LabelMap::new(g.height, g.width, g.data)?)
        }
        _ => None,
    };
    Ok(Sample { image, label })
}

/// Loads up to `limit` samples of `domain` in `split`.
pub fn load_domain(dir: &Path, manifest: &Manifest, split: &str, domain: &str, limit: usize, keep_labels: bool) -> Result<DomainData> {
    let samples = manifest
        .entries
        .iter()
        .filter(|e| e.split == split && e.domain == domain)
        .take(limit)
        .map(|e| load_sample(dir, e, keep_labels))
        .collect::<Result<Vec<_>>>()?;
    Ok(DomainData { name: domain.into(), samples })
}

/// Every labelled evaluation domain of a dataset directory.
pub fn load_eval(dir: &Path) -> Result<Vec<DomainData>> {
    let manifest = Manifest::load(dir)?;
    manifest.domains(EVAL).iter().map(|d| load_domain(dir, &manifest, EVAL, d, usize::MAX, true)).collect()
}

fn materialize(spec: &DomainSpec, data_seed: u64, split: &str) -> Result<DomainData> {
    let (offset, count, labelled) = match split {
        TRAIN => (0, spec.count, spec.role == Role::Source),
        _ => (spec.count, spec.eval_count, true),
    };
    match &spec.origin {
        Origin::Generator(params) => Ok(SceneStyle::resolve(params)?.domain(&spec.name, data_seed, offset, count, labelled)),
        Origin::Dir(dir) => {
            let manifest = Manifest::load(dir)?;
            let d = load_domain(dir, &manifest, split, &spec.name, count, labelled)?;
            if d.samples.len() < count {
                let path = dir.join(MANIFEST);
                return Err(format_err(&path, format!("domain {:?} has {} {split} samples, {count} requested", spec.name, d.samples.len())));
            }
            Ok(d)
        }
    }
}

/// Training data and labelled target evaluation domains of `cfg`.
pub fn build_data(cfg: &Config) -> Result<(TrainData, Vec<DomainData>)> {
    cfg.validate()?;
    let mut data = TrainData { sources: Vec::new(), targets: Vec::new() };
    let mut eval = Vec::new();
    for d in &cfg.domains {
        let train = materialize(d, cfg.data_seed, TRAIN)?;
        match d.role {
            Role::Source => data.sources.push(train),
            Role::Target => data.targets.push(train),
        }
        if d.role == Role::Target && d.eval_count > 0 {
            eval.push(materialize(d, cfg.data_seed, EVAL)?);
        }
    }
    Ok((data, eval))
}
