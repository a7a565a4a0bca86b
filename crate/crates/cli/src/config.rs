//! Run configuration: one TOML file with a section per component.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use qdiffusion::data::{load_image_folder, make_toy_dataset, split, Dataset};
use qdiffusion::diffusion::{make_schedule, NoiseSchedule, SampleOptions, ScheduleKind, TrainConfig};
use qdiffusion::nnet::{Denoiser, DenoiserConfig};
use qdiffusion::quanv::{BottleneckConfig, QuanvConfig};
use qdiffusion::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub timesteps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            timesteps: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Toy,
    Folder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Class-per-directory image tree, for `source = "folder"`.
    pub path: Option<PathBuf>,
    pub toy_per_class: usize,
    pub toy_seed: u64,
    /// Share of every class used for training; the rest is held out.
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Toy,
            path: None,
            toy_per_class: 200,
            toy_seed: 0,
            train_fraction: 0.9,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub chunk: usize,
    pub clip_x0: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        let o = SampleOptions::default();
        Self {
            chunk: o.chunk,
            clip_x0: o.clip_x0,
        }
    }
}

impl SampleConfig {
    pub fn options(&self) -> SampleOptions {
        SampleOptions {
            chunk: self.chunk,
            clip_x0: self.clip_x0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: DenoiserConfig,
    pub quanv: QuanvConfig,
    pub bottleneck: BottleneckConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
    pub sample: SampleConfig,
    pub run: RunSection,
}

/// 1-based line of `section.key` in `text`, or of the section header when
/// the key is absent.
pub fn locate(text: &str, field: &str) -> Option<usize> {
    let (section, key) = match field.split_once('.') {
        Some((s, k)) => (s, Some(k)),
        None => (field, None),
    };
    let mut in_section = false;
    let mut header = None;
    for (i, line) in text.lines().enumerate() {
        let l = line.trim();
        if l.starts_with('[') {
            in_section = l.trim_matches(|c| c == '[' || c == ']').trim() == section;
            if in_section {
                header = Some(i + 1);
            }
            continue;
        }
        if in_section {
            if let Some(k) = key {
                if l.split('=').next().map(str::trim) == Some(k) {
                    return Some(i + 1);
                }
            }
        }
    }
    header
}

fn with_line(e: Error, text: &str) -> Error {
    match e {
        Error::Config { field, line: None, message } => Error::Config {
            line: locate(text, &field),
            field,
            message,
        },
        other => other,
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            Error::Config {
                field: "config".into(),
                line,
                message: e.message().to_string(),
            }
        })?;
        cfg.validate().map_err(|e| with_line(e, text))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Every cross-component constraint, checked before any file is touched.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.schedule.timesteps == 0 {
            return Err(Error::config("schedule.timesteps", "must be at least 1"));
        }
        self.quanv.validate()?;
        self.bottleneck.validate()?;
        self.build_model()?;
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction <= 1.0) {
            return Err(Error::config("data.train_fraction", "must lie in (0, 1]"));
        }
        match self.data.source {
            DataSource::Toy => {
                if self.model.num_classes > qdiffusion::data::TOY_CLASS_NAMES.len() {
                    return Err(Error::config(
                        "model.num_classes",
                        format!("the toy dataset has at most {} classes", qdiffusion::data::TOY_CLASS_NAMES.len()),
                    ));
                }
                if self.data.toy_per_class == 0 {
                    return Err(Error::config("data.toy_per_class", "must be at least 1"));
                }
            }
            DataSource::Folder => {
                if self.data.path.is_none() {
                    return Err(Error::config("data.path", "required when source = \"folder\""));
                }
            }
        }
        if self.sample.chunk == 0 {
            return Err(Error::config("sample.chunk", "must be at least 1"));
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<Denoiser> {
        Denoiser::new(self.model.clone(), self.quanv, self.bottleneck, self.schedule.timesteps)
    }

    pub fn build_schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.schedule.kind, self.schedule.timesteps)
    }

    /// The dataset and the training indices.
    pub fn load_data(&self) -> Result<(Dataset, Vec<usize>)> {
        let d = match self.data.source {
            DataSource::Toy => make_toy_dataset(
                self.data.toy_per_class,
                self.model.image_size,
                self.model.num_classes,
                self.data.toy_seed,
            )?,
            DataSource::Folder => {
                let path = self.data.path.as_ref().expect("validated");
                let (d, _) = load_image_folder(path)?;
                if d.image_size != self.model.image_size {
                    return Err(Error::config(
                        "model.image_size",
                        format!("{} holds {}x{} images", path.display(), d.image_size, d.image_size),
                    ));
                }
                if d.num_classes() != self.model.num_classes {
                    return Err(Error::config(
                        "model.num_classes",
                        format!("{} has {} classes", path.display(), d.num_classes()),
                    ));
                }
                d
            }
        };
        let train = if self.data.train_fraction >= 1.0 {
            (0..d.len()).collect()
        } else {
            let f = self.data.train_fraction;
            split(&d, &[f, 1.0 - f], self.data.split_seed)?.swap_remove(0)
        };
        Ok((d, train))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(RunConfig::parse("").unwrap(), cfg);
    }

    #[test]
    fn unknown_key_reports_line() {
        let text = "[model]\nimage_size = 8\n\n[train]\nbatch_sise = 3\n";
        match RunConfig::parse(text) {
            Err(Error::Config { line, .. }) => assert_eq!(line, Some(5)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn validation_names_field_and_line() {
        let text = "[model]\nquantum_position = \"p1_encoder\"\n\n[bottleneck]\nfamily = \"hqconv\"\nrho = 1.5\n";
        match RunConfig::parse(text) {
            Err(Error::Config { field, line, .. }) => {
                assert_eq!(field, "bottleneck.rho");
                assert_eq!(line, Some(6));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cross_module_constraints() {
        assert!(RunConfig::parse("[model]\nimage_size = 10\n").is_err());
        assert!(RunConfig::parse("[model]\nnum_classes = 5\n").is_err());
        assert!(RunConfig::parse("[data]\nsource = \"folder\"\n").is_err());
        assert!(RunConfig::parse("[model]\nimage_size = 16\nquantum_position = \"p1_encoder\"\n").is_err());
        assert!(RunConfig::parse("[train]\nadam_beta1 = 1.95\n").is_err());
    }
}
