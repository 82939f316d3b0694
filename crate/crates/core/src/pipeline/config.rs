use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::{Endpoint, DEFAULT_MAX_IN_FLIGHT, DEFAULT_TIMEOUT_SECS};
use crate::error::{Error, Result};
use crate::io::DEFAULT_IMAGE_SIZE;
use crate::prompt::PromptConfig;
use crate::register::RegistrationConfig;
use crate::segment::DEFAULT_MOCK_TOLERANCE;

/// Stage switches. Mask propagation cannot be disabled; prompting needs it and
/// refinement needs prompting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    /// Embedding-based support selection; off means the first K ids.
    pub es: bool,
    /// Registration-based mask propagation.
    pub mp: bool,
    /// Prompting the segmenter; off means the coarse mask is the prediction.
    pub pa: bool,
    /// Post refinement with the segmenter's own mask.
    pub pr: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            es: true,
            mp: true,
            pa: true,
            pr: true,
        }
    }
}

impl fmt::Display for Toggles {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.es, "ES"), (self.mp, "MP"), (self.pa, "PA"), (self.pr, "PR")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|&(_, n)| n)
            .collect();
        write!(f, "{}", names.join("+"))
    }
}

macro_rules! backend_choice {
    ($name:ident, $builtin:ident, $word:literal) => {
        #[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
        #[serde(try_from = "String", into = "String")]
        pub enum $name {
            #[default]
            $builtin,
            External(Endpoint),
        }

        impl TryFrom<String> for $name {
            type Error = Error;

            fn try_from(s: String) -> Result<Self> {
                if s == $word {
                    Ok(Self::$builtin)
                } else {
                    Endpoint::parse(&s).map(Self::External)
                }
            }
        }

        impl From<$name> for String {
            fn from(b: $name) -> String {
                match b {
                    $name::$builtin => $word.to_string(),
                    $name::External(e) => e.to_string(),
                }
            }
        }

        impl std::str::FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                Self::try_from(s.to_string())
            }
        }
    };
}

backend_choice!(EmbeddingBackend, Toy, "toy");
backend_choice!(SegmentationBackend, Mock, "mock");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset_root: PathBuf,
    pub k: usize,
    pub toggles: Toggles,
    /// `"toy"`, `"tcp://host:port"` or `"exec:<command>"`.
    pub embedding_backend: EmbeddingBackend,
    /// `"mock"`, `"tcp://host:port"` or `"exec:<command>"`.
    pub segmentation_backend: SegmentationBackend,
    pub registration: RegistrationConfig,
    pub prompt: PromptConfig,
    pub refinement_rounds: usize,
    /// Worker threads for per-query jobs; 0 uses every CPU.
    pub workers: usize,
    pub output_dir: PathBuf,
    /// Side length images and masks are resized to.
    pub image_size: usize,
    pub mock_tolerance: f64,
    pub backend_timeout_secs: f64,
    pub backend_max_in_flight: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset_root: PathBuf::from("data"),
            k: 1,
            toggles: Toggles::default(),
            embedding_backend: EmbeddingBackend::Toy,
            segmentation_backend: SegmentationBackend::Mock,
            registration: RegistrationConfig::default(),
            prompt: PromptConfig::default(),
            refinement_rounds: 1,
            workers: 0,
            output_dir: PathBuf::from("mpa-out"),
            image_size: DEFAULT_IMAGE_SIZE,
            mock_tolerance: DEFAULT_MOCK_TOLERANCE,
            backend_timeout_secs: DEFAULT_TIMEOUT_SECS,
            backend_max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks that do not need the dataset.
    pub fn validate(&self) -> Result<()> {
        let t = &self.toggles;
        if !t.mp {
            return Err(Error::Config(
                "mask propagation (MP) cannot be disabled: every later stage consumes its coarse masks".into(),
            ));
        }
        if t.pa && !t.mp {
            return Err(Error::Config("prompting (PA) requires mask propagation (MP)".into()));
        }
        if t.pr && !t.pa {
            return Err(Error::Config("post refinement (PR) requires prompting (PA)".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Config("image_size must be at least 8".into()));
        }
        if !(self.mock_tolerance >= 0.0 && self.mock_tolerance.is_finite()) {
            return Err(Error::Config("mock_tolerance must be >= 0".into()));
        }
        if !(self.backend_timeout_secs > 0.0 && self.backend_timeout_secs.is_finite()) {
            return Err(Error::Config("backend_timeout_secs must be positive".into()));
        }
        if self.backend_max_in_flight == 0 {
            return Err(Error::Config("backend_max_in_flight must be >= 1".into()));
        }
        self.registration.validate()?;
        self.prompt.validate()
    }

    /// Dataset-dependent check: `1 <= k < n`.
    pub fn validate_for(&self, n: usize) -> Result<()> {
        self.validate()?;
        if self.k >= n {
            return Err(Error::Config(format!(
                "k = {} leaves no query among {n} samples",
                self.k
            )));
        }
        Ok(())
    }

    /// Refinement rounds actually run.
    pub fn effective_rounds(&self) -> usize {
        if self.toggles.pr {
            self.refinement_rounds
        } else {
            0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_partial_files() {
        let mut c = PipelineConfig {
            k: 5,
            ..Default::default()
        };
        c.segmentation_backend = SegmentationBackend::External(Endpoint::Tcp("127.0.0.1:7000".into()));
        let back = PipelineConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);

        let partial = PipelineConfig::from_toml(
            "k = 3\nembedding_backend = \"exec:python3 enc.py\"\n[toggles]\nes = false\n[registration]\nlevels = 2\n",
        )
        .unwrap();
        assert_eq!(partial.k, 3);
        assert!(!partial.toggles.es && partial.toggles.pr);
        assert_eq!(partial.registration.levels, 2);
        assert_eq!(partial.registration.grid_spacing_finest, 32.0);
        assert!(matches!(partial.embedding_backend, EmbeddingBackend::External(Endpoint::Command(_))));
        assert!(PipelineConfig::from_toml("bogus = 1").is_err());
        assert!(PipelineConfig::from_toml("segmentation_backend = \"sam\"").is_err());
    }

    #[test]
    fn toggle_dependencies() {
        let with = |es, mp, pa, pr| PipelineConfig {
            toggles: Toggles { es, mp, pa, pr },
            ..Default::default()
        };
        assert!(with(true, false, false, false).validate().is_err());
        assert!(with(true, true, false, true).validate().is_err());
        assert!(with(false, true, false, false).validate().is_ok());
        assert!(with(true, true, true, false).validate().is_ok());
        assert_eq!(with(true, true, true, false).toggles.to_string(), "ES+MP+PA");
    }

    #[test]
    fn k_must_leave_a_query() {
        let c = PipelineConfig {
            k: 4,
            ..Default::default()
        };
        assert!(c.validate_for(5).is_ok());
        assert!(c.validate_for(4).is_err());
        let zero = PipelineConfig {
            k: 0,
            ..Default::default()
        };
        assert!(zero.validate().is_err());
    }
}
