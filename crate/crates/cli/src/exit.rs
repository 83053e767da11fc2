use std::fmt;

use tunnelwave::dataset::DatasetError;
use tunnelwave::export::ExportError;
use tunnelwave::metrics::MetricsError;
use tunnelwave::model::ModelError;
use tunnelwave::pwe::PweError;
use tunnelwave::trainer::TrainError;

pub const CONFIG: u8 = 2;
pub const DATA: u8 = 3;
pub const NUMERIC: u8 = 4;

/// Error carrying its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: CONFIG,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: DATA,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self {
            code: NUMERIC,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::data(e.to_string())
    }
}

impl From<PweError> for Failure {
    fn from(e: PweError) -> Self {
        Failure::numeric(e.to_string())
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::InvalidConfig(_) => Failure::config(e.to_string()),
            DatasetError::Solver(_) => Failure::numeric(e.to_string()),
            _ => Failure::data(e.to_string()),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => Failure::config(e.to_string()),
            ModelError::Checkpoint(_) => Failure::data(e.to_string()),
            _ => Failure::numeric(e.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => Failure::config(e.to_string()),
            TrainError::Data(d) => d.into(),
            TrainError::Model(m) => m.into(),
            TrainError::Checkpoint(_) | TrainError::Io(_) => Failure::data(e.to_string()),
            TrainError::Tensor(_) | TrainError::NonFinite { .. } => Failure::numeric(e.to_string()),
        }
    }
}

impl From<ExportError> for Failure {
    fn from(e: ExportError) -> Self {
        match e {
            ExportError::Io(_) | ExportError::Pgm(_) | ExportError::Csv(_) | ExportError::Field(_) => {
                Failure::data(e.to_string())
            }
        }
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        Failure::numeric(e.to_string())
    }
}
