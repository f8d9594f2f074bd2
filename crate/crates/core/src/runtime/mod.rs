//! Model assembly: calibration, conversion, integer execution and storage.

pub mod calibrate;
pub mod int_model;
pub mod model;
pub mod serialize;

pub use calibrate::{NullObserver, Observer, RangeObserver, StageQParams};
pub use int_model::{argmax_agreement, convert, ConvertConfig, IntInput, IntLayer, IntModel, IntSequence};
pub use serialize::{model_kind, ModelKind};
pub use model::{ArchSpec, FloatLayer, FloatModel, ModelInput, Sequence};

use crate::error::Result;

/// Observes `batches` through `model` and derives 8-bit parameters for every
/// stage the model needs.
///
/// With no batches every stage is reported as unobserved.
pub fn calibrate(model: &FloatModel, batches: &[Sequence<'_>]) -> Result<StageQParams> {
    let mut obs = RangeObserver::new();
    for b in batches {
        model.forward_observed(*b, &mut obs)?;
    }
    obs.finish(&model.stage_names())
}
