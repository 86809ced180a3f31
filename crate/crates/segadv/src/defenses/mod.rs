//! Model-agnostic input pre-processing defenses and their composition.

mod nlm;
mod quilt;

pub use nlm::{estimate_sigma, nlm_denoise, nlm_denoise_instrumented, FilteringH, NlmConfig};
pub use quilt::{build_patch_db, quilt, PatchDatabase};

use std::io;
use std::str::FromStr;

use thiserror::Error;

use crate::types::Image;

#[derive(Debug, Error)]
pub enum DefenseError {
    #[error("invalid defense configuration: {0}")]
    Config(String),
    #[error("bad input: {0}")]
    Data(String),
    #[error("bad file: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

/// One stage of a defense pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Nlm,
    Quilt,
}

impl FromStr for Stage {
    type Err = DefenseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nlm" => Ok(Stage::Nlm),
            "quilt" => Ok(Stage::Quilt),
            other => Err(DefenseError::Config(format!("unknown defense stage '{other}'"))),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Nlm => write!(f, "nlm"),
            Stage::Quilt => write!(f, "quilt"),
        }
    }
}

/// Parse a '+'-separated pipeline such as "nlm+quilt".
pub fn parse_pipeline(s: &str) -> Result<Vec<Stage>, DefenseError> {
    s.split('+').map(|p| p.trim().parse()).collect()
}

/// Apply the pipeline stages in order; each stage re-quantizes its output.
pub fn defend(
    image: &Image,
    pipeline: &[Stage],
    nlm_cfg: &NlmConfig,
    db: Option<&PatchDatabase>,
) -> Result<Image, DefenseError> {
    if pipeline.is_empty() {
        return Err(DefenseError::Config("defense pipeline is empty".into()));
    }
    let mut current = image.clone();
    for stage in pipeline {
        current = match stage {
            Stage::Nlm => nlm_denoise(&current, nlm_cfg)?,
            Stage::Quilt => {
                let db = db.ok_or_else(|| {
                    DefenseError::Config("quilt stage requires a patch database".into())
                })?;
                quilt(&current, db)?
            }
        };
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(16, 20, 3, (0..16 * 20 * 3).map(|_| rng.gen()).collect())
    }

    fn db(seed: u64) -> PatchDatabase {
        build_patch_db(&[image(seed)], 5, 5, 60, seed).unwrap()
    }

    #[test]
    fn pipeline_parsing() {
        assert_eq!(parse_pipeline("nlm").unwrap(), vec![Stage::Nlm]);
        assert_eq!(parse_pipeline("nlm+quilt").unwrap(), vec![Stage::Nlm, Stage::Quilt]);
        assert!(parse_pipeline("blur").is_err());
    }

    #[test]
    fn single_stage_equals_direct_call() {
        let img = image(1);
        let cfg = NlmConfig { filtering_h: FilteringH::Fixed(20.0), ..NlmConfig::default() };
        assert_eq!(defend(&img, &[Stage::Nlm], &cfg, None).unwrap(), nlm_denoise(&img, &cfg).unwrap());
        let d = db(2);
        assert_eq!(
            defend(&img, &[Stage::Quilt], &cfg, Some(&d)).unwrap(),
            quilt(&img, &d).unwrap()
        );
    }

    #[test]
    fn composition_law() {
        let img = image(3);
        let cfg = NlmConfig { filtering_h: FilteringH::Fixed(20.0), ..NlmConfig::default() };
        let d = db(4);
        let composed = defend(&img, &[Stage::Nlm, Stage::Quilt], &cfg, Some(&d)).unwrap();
        let manual = quilt(&nlm_denoise(&img, &cfg).unwrap(), &d).unwrap();
        assert_eq!(composed, manual);
    }

    #[test]
    fn empty_pipeline_and_missing_db_rejected() {
        let img = image(5);
        let cfg = NlmConfig::default();
        assert!(defend(&img, &[], &cfg, None).is_err());
        assert!(defend(&img, &[Stage::Quilt], &cfg, None).is_err());
    }
}
