use ffgo_core::canvas::CanvasError;
use ffgo_core::dataset::{CaptionError, DatasetError};
use ffgo_core::frames::FrameError;
use ffgo_core::generation::GenError;
use ffgo_core::lora::LoraError;
use ffgo_core::study::StudyError;
use ffgo_core::vlm::VlmError;
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_IO: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input: flags, files that exist but are invalid, failed checks.
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Endpoint(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Io(_) | CliError::Endpoint(_) => EXIT_IO,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<FrameError> for CliError {
    fn from(e: FrameError) -> Self {
        match e {
            FrameError::Io { .. } | FrameError::Image { .. } | FrameError::Encoder(_) => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<CanvasError> for CliError {
    fn from(e: CanvasError) -> Self {
        match e {
            CanvasError::Image { .. } => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<CaptionError> for CliError {
    fn from(e: CaptionError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<VlmError> for CliError {
    fn from(e: VlmError) -> Self {
        match e {
            VlmError::UnknownTemplate(_) | VlmError::MissingSlot(_) | VlmError::MissingImage | VlmError::Config(_) => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Endpoint(e.to_string()),
        }
    }
}

impl From<LoraError> for CliError {
    fn from(e: LoraError) -> Self {
        match e {
            LoraError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<GenError> for CliError {
    fn from(e: GenError) -> Self {
        match e {
            GenError::Caption(c) => c.into(),
            GenError::Canvas(c) => c.into(),
            GenError::Frames(f) => f.into(),
            GenError::BadRequest(_) => CliError::Validation(e.to_string()),
            GenError::Endpoint(_) | GenError::FrameCountMismatch { .. } | GenError::ResolutionMismatch { .. } => {
                CliError::Endpoint(e.to_string())
            }
        }
    }
}

impl From<StudyError> for CliError {
    fn from(e: StudyError) -> Self {
        match e {
            StudyError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<image::ImageError> for CliError {
    fn from(e: image::ImageError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}
