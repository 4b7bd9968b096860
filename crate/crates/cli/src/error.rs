use demandmap_cnn::CnnError;
use demandmap_core::geo::GeoError;
use demandmap_core::imagery::ImageryError;
use demandmap_core::kv::KvError;
use demandmap_core::labeling::LabelError;
use demandmap_core::regress::RegressError;
use demandmap_core::survey::SurveyError;

/// Pipeline failure, classified by exit code.
#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("imagery provider error: {0}")]
    Provider(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Data(_) => 3,
            PipelineError::Provider(_) => 4,
        }
    }

    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        PipelineError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<KvError> for PipelineError {
    fn from(e: KvError) -> Self {
        PipelineError::Config(e.to_string())
    }
}

impl From<SurveyError> for PipelineError {
    fn from(e: SurveyError) -> Self {
        match e {
            SurveyError::Manifest(_) | SurveyError::DuplicateMapping(_) => PipelineError::Config(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<ImageryError> for PipelineError {
    fn from(e: ImageryError) -> Self {
        match e {
            ImageryError::Provider(_) => PipelineError::Provider(e.to_string()),
            ImageryError::Query(_) => PipelineError::Config(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for PipelineError {
            fn from(e: $t) -> Self {
                PipelineError::Data(e.to_string())
            }
        }
    )*};
}

data_error!(GeoError, LabelError, RegressError, CnnError, csv::Error, serde_json::Error);

pub type Result<T> = std::result::Result<T, PipelineError>;
