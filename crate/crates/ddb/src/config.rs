//! JSON run configuration.

use std::path::{Path, PathBuf};

use ddb_core::model::Arch;
use ddb_core::optim::AdamWConfig;
use ddb_core::pipeline::RoundPlan;
use ddb_core::scene::{SceneParams, SCENE_CLASSES};
use ddb_core::train::StageSchedule;
use serde::{Deserialize, Serialize};

use crate::error::{Error, PathContext, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Source,
    Target,
}

/// Where a domain's images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    /// Rendered by the scene generator.
    Generator(SceneParams),
    /// Read from a generated dataset directory, matched by domain name.
    Dir(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub role: Role,
    /// Training samples.
    pub count: usize,
    /// Labelled held-out samples used for evaluation.
    #[serde(default)]
    pub eval_count: usize,
    #[serde(flatten)]
    pub origin: Origin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub arch: Arch,
    pub plan: RoundPlan,
    /// Seed of the scene generator, independent of the training seed.
    pub data_seed: u64,
    pub domains: Vec<DomainSpec>,
}

impl Config {
    /// Single-source, single-target synthetic benchmark.
    pub fn benchmark(seed: u64) -> Self {
        let schedule = StageSchedule { steps: 1000, batch_size: 2, optimizer: AdamWConfig::default() };
        Self {
            arch: Arch::toy(3, SCENE_CLASSES),
            plan: RoundPlan::new(2, schedule, seed),
            data_seed: seed,
            domains: vec![
                DomainSpec {
                    name: "source".into(),
                    role: Role::Source,
                    count: 200,
                    eval_count: 0,
                    origin: Origin::Generator(SceneParams::source()),
                },
                DomainSpec {
                    name: "target".into(),
                    role: Role::Target,
                    count: 200,
                    eval_count: 200,
                    origin: Origin::Generator(SceneParams::target()),
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.plan.validate()?;
        for role in [Role::Source, Role::Target] {
            if !self.domains.iter().any(|d| d.role == role) {
                return Err(Error::Config(format!("no {role:?} domain configured").to_lowercase()));
            }
        }
        for (i, d) in self.domains.iter().enumerate() {
            if d.name.is_empty() || d.name.contains(|c: char| c.is_whitespace() || c == '/' || c == '\\') {
                return Err(Error::Config(format!("domain name {:?} must be non-empty without spaces or slashes", d.name)));
            }
            if self.domains[..i].iter().any(|o| o.name == d.name) {
                return Err(Error::Config(format!("duplicate domain name {:?}", d.name)));
            }
            if d.count == 0 {
                return Err(Error::Config(format!("domain {:?} has no training samples", d.name)));
            }
            if let Origin::Generator(p) = &d.origin {
                ddb_core::scene::SceneStyle::resolve(p)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let cfg: Self = serde_json::from_str(&text).at(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).at(path)?;
        std::fs::write(path, text + "\n").at(path)
    }

    /// Resolves relative `Dir` origins against `base`.
    pub fn resolve_dirs(&mut self, base: &Path) {
        for d in &mut self.domains {
            if let Origin::Dir(p) = &mut d.origin {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }
}
