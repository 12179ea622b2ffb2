//! Student-teacher self-distillation at desk scale: EMA teacher, output
//! centering, multi-crop views, and a linear-probe evaluator.

pub mod head;
pub mod loss;
pub mod optim;
pub mod probe;
pub mod trainer;

use thiserror::Error;

use crate::model::ModelError;
use crate::params::{CheckpointError, ParamError};
use crate::tensor::TensorError;

#[derive(Error, Debug)]
pub enum TrainError {
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("non-finite value during training: {message}; activation norms: {norms:?}")]
    NonFinite {
        message: String,
        norms: Vec<(String, f64)>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Head(#[from] head::HeadError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Probe(#[from] probe::ProbeError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl TrainError {
    /// True when the failure is numerical (NaN/Inf detected), the class of
    /// error the CLI maps to exit code 2.
    pub fn is_numerical(&self) -> bool {
        fn tensor_nf(e: &TensorError) -> bool {
            matches!(e, TensorError::NonFinite { .. })
        }
        match self {
            TrainError::NonFinite { .. } => true,
            TrainError::Tensor(e) => tensor_nf(e),
            TrainError::Model(m) => model_nf(m),
            TrainError::Head(head::HeadError::Tensor(e)) => tensor_nf(e),
            TrainError::Param(ParamError::Tensor(e)) => tensor_nf(e),
            TrainError::Probe(probe::ProbeError::Model(m)) => model_nf(m),
            _ => false,
        }
    }
}

fn model_nf(m: &ModelError) -> bool {
    use crate::grouping::GroupingError;
    use crate::samplers::SamplerError;
    match m {
        ModelError::Tensor(e) => matches!(e, TensorError::NonFinite { .. }),
        ModelError::Param(ParamError::Tensor(e)) => matches!(e, TensorError::NonFinite { .. }),
        ModelError::Grouping(g) => match g {
            GroupingError::Tensor(e) => matches!(e, TensorError::NonFinite { .. }),
            GroupingError::Sampler(SamplerError::Tensor(e)) => {
                matches!(e, TensorError::NonFinite { .. })
            }
            GroupingError::Param(ParamError::Tensor(e)) => {
                matches!(e, TensorError::NonFinite { .. })
            }
            _ => false,
        },
        _ => false,
    }
}
