//! The resolved parameters of a pipeline run, written next to its outputs so
//! the run can be repeated exactly.

use std::path::{Path, PathBuf};

use forensic3d::cloud::{IcpParams, SorParams};
use forensic3d::features::{DetectorConfig, DetectorPreset};
use forensic3d::geometry::CameraIntrinsics;
use forensic3d::keyframing::KeyframePolicy;
use forensic3d::sfm::SfmParams;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const CONFIG_FILE: &str = "pipeline_config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub frames_dir: Option<PathBuf>,
    pub detector_preset: DetectorPreset,
    /// The preset's parameters after overrides.
    pub detector: DetectorConfig,
    pub keyframe: KeyframePolicy,
    /// When absent, `intrinsics.json` in the frames directory is used.
    pub intrinsics: Option<CameraIntrinsics>,
    pub sfm: SfmParams,
    pub sor: SorParams,
    pub icp: IcpParams,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn new(preset: DetectorPreset, output_dir: PathBuf, seed: u64) -> Self {
        Self {
            frames_dir: None,
            detector_preset: preset,
            detector: DetectorConfig::preset(preset),
            keyframe: KeyframePolicy {
                seed,
                ..KeyframePolicy::default()
            },
            intrinsics: None,
            sfm: SfmParams {
                seed,
                ..SfmParams::default()
            },
            sor: SorParams::default(),
            icp: IcpParams::default(),
            output_dir,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.detector.validate()?;
        self.keyframe.validate()?;
        self.sfm.validate()?;
        if let Some(k) = &self.intrinsics {
            k.validate()
                .map_err(|e| CliError::usage("invalid_config", format!("intrinsics: {e}")))?;
        }
        if self.sor.k == 0 || !(self.sor.alpha >= 0.0 && self.sor.alpha.is_finite()) {
            return Err(CliError::usage("invalid_config", "SOR needs k >= 1 and a finite alpha >= 0"));
        }
        let icp = &self.icp;
        if icp.max_iterations == 0 || !(icp.trim_fraction > 0.0 && icp.trim_fraction <= 1.0) || !(icp.convergence_tol >= 0.0)
        {
            return Err(CliError::usage(
                "invalid_config",
                "ICP needs max_iterations >= 1, trim_fraction in (0, 1] and convergence_tol >= 0",
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::data("invalid_config", format!("{}: {e}", path.display())))
    }

    /// Write `pipeline_config.json` into the output directory.
    pub fn save(&self) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(&self.output_dir).map_err(|e| CliError::io(&self.output_dir, e))?;
        let path = self.output_dir.join(CONFIG_FILE);
        let text = serde_json::to_string_pretty(self).expect("config serializes") + "\n";
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
