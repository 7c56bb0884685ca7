use forensic3d::bundle::BundleError;
use forensic3d::cloud::CloudError;
use forensic3d::features::FeatureError;
use forensic3d::image::ImageError;
use forensic3d::keyframing::KeyframeError;
use forensic3d::scene::SceneError;
use forensic3d::sfm::SfmError;
use forensic3d::synth::SynthError;
use thiserror::Error;

/// Failure of a command. The variant fixes the process exit code; `code` is
/// the machine-readable reason printed as `error[code]: message`.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{message}")]
    Usage { code: String, message: String },
    #[error("{message}")]
    Data { code: String, message: String },
    #[error("{message}")]
    Numerical { code: String, message: String },
}

impl CliError {
    pub fn usage(code: &str, message: impl Into<String>) -> Self {
        CliError::Usage {
            code: code.into(),
            message: message.into(),
        }
    }

    pub fn data(code: &str, message: impl Into<String>) -> Self {
        CliError::Data {
            code: code.into(),
            message: message.into(),
        }
    }

    pub fn numerical(code: &str, message: impl Into<String>) -> Self {
        CliError::Numerical {
            code: code.into(),
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage { .. } => 1,
            CliError::Data { .. } => 2,
            CliError::Numerical { .. } => 3,
        }
    }

    pub fn code(&self) -> &str {
        match self {
            CliError::Usage { code, .. } | CliError::Data { code, .. } | CliError::Numerical { code, .. } => code,
        }
    }

    /// The single stderr line; newlines in the message are flattened.
    pub fn line(&self) -> String {
        format!("error[{}]: {}", self.code(), self.to_string().replace('\n', " "))
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::data("io", format!("{}: {e}", path.display()))
    }
}

impl From<CloudError> for CliError {
    fn from(e: CloudError) -> Self {
        match e {
            CloudError::DegenerateConfiguration(_) => CliError::numerical(e.code(), e.to_string()),
            CloudError::BadParameters(_) => CliError::usage(e.code(), e.to_string()),
            _ => CliError::data(e.code(), e.to_string()),
        }
    }
}

impl From<SfmError> for CliError {
    fn from(e: SfmError) -> Self {
        match e {
            SfmError::BadParameters(_) | SfmError::Bundle(BundleError::InvalidParams(_)) => {
                CliError::usage(e.code(), e.to_string())
            }
            _ => CliError::numerical(e.code(), e.to_string()),
        }
    }
}

impl From<FeatureError> for CliError {
    fn from(e: FeatureError) -> Self {
        match e {
            FeatureError::InvalidConfig(_) => CliError::usage(e.code(), e.to_string()),
            _ => CliError::data(e.code(), e.to_string()),
        }
    }
}

impl From<KeyframeError> for CliError {
    fn from(e: KeyframeError) -> Self {
        match e {
            KeyframeError::InvalidPolicy(_) => CliError::usage(e.code(), e.to_string()),
            KeyframeError::Feature(f) => f.into(),
            _ => CliError::data(e.code(), e.to_string()),
        }
    }
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        KeyframeError::from(e).into()
    }
}

impl From<SceneError> for CliError {
    fn from(e: SceneError) -> Self {
        CliError::data(e.code(), e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::BadParameters(_) => CliError::usage(e.code(), e.to_string()),
            SynthError::Degenerate => CliError::numerical(e.code(), e.to_string()),
            _ => CliError::data(e.code(), e.to_string()),
        }
    }
}
