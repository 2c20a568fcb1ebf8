use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter error: {0}")]
    Param(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid box: {0}")]
    BBox(String),
    #[error("stage lineage violation: {0}")]
    Lineage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("png encode error: {0}")]
    PngEncode(#[from] png::EncodingError),
    #[error("png decode error: {0}")]
    PngDecode(#[from] png::DecodingError),
}

impl Error {
    /// Stable machine-readable category, used for CLI exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) | Error::Param(_) | Error::NonFinite(_) => "shape",
            Error::Empty(_) | Error::BBox(_) | Error::Data(_) => "data",
            Error::Config(_) => "config",
            Error::Lineage(_) => "lineage",
            Error::Io(_) | Error::Json(_) | Error::PngEncode(_) | Error::PngDecode(_) => "io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "shape" => 3,
            "data" => 4,
            "config" => 5,
            "lineage" => 6,
            _ => 7,
        }
    }
}
