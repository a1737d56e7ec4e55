//! Run configuration: a TOML file layered over profile defaults, plus
//! dotted-path `key=value` overrides from the command line.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Stage;
use crate::model::ModelConfig;
use crate::trainer::StageConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 64x64 frames, lossless codec, CPU-trainable in minutes.
    Toy,
    /// 32x32 frames, for tests that need many passes.
    Tiny,
    Full,
}

impl Profile {
    pub fn model(&self) -> ModelConfig {
        match self {
            Profile::Toy => ModelConfig::toy(),
            Profile::Tiny => ModelConfig::tiny(),
            Profile::Full => ModelConfig::full(),
        }
    }

    pub fn diffusion_steps(&self) -> usize {
        match self {
            Profile::Full => 1000,
            _ => 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    /// Training timesteps T; betas run linearly over the 1000-step range
    /// 0.00085..0.012 rescaled by 1000/T.
    pub steps: usize,
    /// Sampler steps at inference.
    pub sample_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnimateConfig {
    pub window: usize,
    pub overlap: usize,
    /// Match driving colour statistics to the reference before encoding motion.
    pub color_stats: bool,
    /// Sampler noise scale; 0 is deterministic.
    #[serde(default)]
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    /// "f32" or "f64".
    pub dtype: String,
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub stage1: StageConfig,
    pub gaze_ft: StageConfig,
    pub stage2: StageConfig,
    pub animate: AnimateConfig,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let full = profile == Profile::Full;
        Self {
            profile,
            seed: 0,
            dtype: "f32".into(),
            model: profile.model(),
            diffusion: DiffusionConfig {
                steps: profile.diffusion_steps(),
                sample_steps: if full { 50 } else { 25 },
            },
            stage1: StageConfig::defaults(Stage::Stage1, profile),
            gaze_ft: StageConfig::defaults(Stage::GazeFt, profile),
            stage2: StageConfig::defaults(Stage::Stage2, profile),
            animate: AnimateConfig {
                window: if full { 16 } else { 8 },
                overlap: if full { 8 } else { 4 },
                color_stats: true,
                eta: 0.0,
            },
        }
    }

    pub fn stage(&self, stage: Stage) -> Option<&StageConfig> {
        match stage {
            Stage::Init => None,
            Stage::Stage1 => Some(&self.stage1),
            Stage::GazeFt => Some(&self.gaze_ft),
            Stage::Stage2 => Some(&self.stage2),
        }
    }

    pub fn animate_options(&self) -> crate::animate::AnimateOptions {
        crate::animate::AnimateOptions {
            window: self.animate.window,
            overlap: self.animate.overlap,
            sample_steps: self.diffusion.sample_steps,
            color_stats: self.animate.color_stats,
            seed: self.seed,
            eta: self.animate.eta,
        }
    }

    pub fn schedule(&self) -> Result<crate::trainer::NoiseSchedule> {
        crate::trainer::NoiseSchedule::for_steps(self.diffusion.steps)
    }

    /// Profile defaults, then the file (if any), then each `key=value`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let profile = match table.get("profile") {
            None => Profile::Toy,
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|e| Error::Config(format!("profile: {e}")))?,
        };
        let mut base = toml::Table::try_from(Self::for_profile(profile))
            .map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, table);
        let cfg: Self = serde_path_to_error::deserialize(toml::Value::Table(base))
            .map_err(|e| Error::Config(format!("{}: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        crate::checkpoint::parse_dtype(&self.dtype).map_err(|_| Error::Config(format!("dtype `{}`", self.dtype)))?;
        for s in [&self.stage1, &self.gaze_ft, &self.stage2] {
            s.validate()?;
        }
        if self.diffusion.sample_steps == 0 || self.diffusion.sample_steps > self.diffusion.steps {
            return Err(Error::Config(format!(
                "sample_steps {} must lie in 1..={}",
                self.diffusion.sample_steps, self.diffusion.steps
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Sets `a.b.c=value` in `table`. The value is parsed as a TOML value and
/// falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let value = parse_value(raw.trim());
    let mut parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad key `{key}`")));
    }
    let last = parts.pop().unwrap();
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("`{p}` in `{key}` is not a table"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_and_validate() {
        for p in [Profile::Toy, Profile::Tiny, Profile::Full] {
            let c = RunConfig::for_profile(p);
            c.validate().unwrap();
            let table = toml::Table::try_from(&c).unwrap();
            assert_eq!(RunConfig::from_table(table).unwrap(), c);
        }
    }

    #[test]
    fn dotted_overrides() {
        let o = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let c = RunConfig::load(None, &o(&["stage1.lr=0.5", "seed=9", "dtype=f64", "stage1.proportions=[0.0, 0.0, 1.0]"])).unwrap();
        assert_eq!(c.stage1.lr, 0.5);
        assert_eq!(c.seed, 9);
        assert_eq!(c.dtype, "f64");
        assert_eq!(c.stage1.proportions, [0.0, 0.0, 1.0]);
        let full = RunConfig::load(None, &o(&["profile=full"])).unwrap();
        assert_eq!(full.model.image_size, 512);
    }

    #[test]
    fn errors_name_the_field() {
        let o = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let err = RunConfig::load(None, &o(&["stage1.lr=\"fast\""])).unwrap_err().to_string();
        assert!(err.contains("stage1.lr"), "{err}");
        let err = RunConfig::load(None, &o(&["stage1.bogus=1"])).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
        assert!(RunConfig::load(None, &o(&["noequals"])).is_err());
    }

    #[test]
    fn file_layers_under_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "seed = 4\n[stage2]\nsteps = 7\n").unwrap();
        let c = RunConfig::load(Some(&p), &["stage2.steps=8".into()]).unwrap();
        assert_eq!((c.seed, c.stage2.steps, c.stage2.clip_length), (4, 8, 8));
    }
}
