use std::path::Path;

use serde::{Deserialize, Serialize};
use spherestereo::cloud::IcpParams;
use spherestereo::motion::{DirectionPasses, FlowStep, MonocularConfig, WindowSpec};
use spherestereo::stabilize::{CalibrationParams, StabilizeParams};
use spherestereo::StereoConfig;

use crate::error::CliError;

/// Everything that shapes a run, loadable from one JSON file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PipelineConfig {
    pub stereo: StereoConfig,
    pub windows: WindowSpec,
    /// Feature and RANSAC settings; `stabilize.pose.seed` is the run seed.
    pub stabilize: StabilizeParams,
    pub calibration: CalibrationParams,
    pub flow_step: FlowStep,
    pub direction_passes: DirectionPasses,
    pub speed_kmh: f64,
    pub fps: f64,
    /// Inputs taller than this are halved until they fit.
    pub max_height: Option<usize>,
    pub cloud: CloudConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CloudConfig {
    pub stride: usize,
    pub max_range_m: f64,
    /// Frames between accumulated captures.
    pub cadence_frames: f64,
    pub icp: IcpParams,
}

impl Default for CloudConfig {
    fn default() -> Self {
        Self {
            stride: 2,
            max_range_m: 100.0,
            cadence_frames: 30.0,
            icp: IcpParams::default(),
        }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stereo: StereoConfig::default(),
            windows: WindowSpec::default(),
            stabilize: StabilizeParams::default(),
            calibration: CalibrationParams::default(),
            flow_step: FlowStep::default(),
            direction_passes: DirectionPasses::default(),
            speed_kmh: 20.0,
            fps: 30.0,
            max_height: None,
            cloud: CloudConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.stereo.validate()?;
        self.windows.validate()?;
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(CliError::Usage(format!("fps must be positive, got {}", self.fps)));
        }
        if !(self.speed_kmh >= 0.0 && self.speed_kmh.is_finite()) {
            return Err(CliError::Usage(format!(
                "speed must be non-negative, got {}",
                self.speed_kmh
            )));
        }
        if self.cloud.stride == 0 {
            return Err(CliError::Usage("cloud stride must be at least 1".into()));
        }
        if self.max_height == Some(0) {
            return Err(CliError::Usage("max_height must be positive".into()));
        }
        Ok(())
    }

    /// Distance travelled between two adjacent frames, meters.
    pub fn frame_baseline_m(&self) -> f64 {
        self.speed_kmh / 3.6 / self.fps
    }

    pub fn monocular(&self) -> MonocularConfig {
        MonocularConfig {
            stereo: self.stereo,
            windows: self.windows.clone(),
            stabilize: self.stabilize.clone(),
            flow_step: self.flow_step,
            direction_passes: self.direction_passes,
        }
    }
}
