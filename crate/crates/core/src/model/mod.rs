//! Transformer over the unified vocabulary, its losses, gradient checking
//! and checkpoint format.

mod checkpoint;
mod config;
mod gradcheck;
mod loss;
mod params;
mod transformer;

pub use checkpoint::{
    load_checkpoint, load_manifest, save_checkpoint, Checkpoint, Manifest, TensorRecord,
    FORMAT_VERSION,
};
pub use config::{LossOptions, ModelConfig, Precision};
pub use gradcheck::{
    grad_check, grad_check_coords, objective_and_gradient, relative_error, GradCheckReport,
    GRAD_CHECK_FLOOR,
};
pub use loss::{
    ar_loss, dce_loss, loss_gradient, objective_scale, unified_loss, unified_loss_with,
    LossBreakdown,
};
pub use params::{init_params, ParamEntry, ParamLayout};
pub use transformer::{ForwardCache, Transformer};
