//! The calibration loop: thresholds placed on the bridge from an initial
//! allocation, then learned jointly with the unmasked weights against the
//! KL reconstruction loss plus the global-rate control loss.

mod calibrate;
mod plan;
mod state;

pub use calibrate::{
    calibrate, initial_rates, project_thresholds, CalibrationReport, LayerAllocation, StepRecord,
    PROJECTION_TOLERANCE,
};
pub use plan::{AllocatorKind, CalibrationPlan, LrSchedule};
pub use state::{init_thresholds, threshold_grad, LayerState, INIT_TOLERANCE};
