//! Dual-pass diffusion training: losses, optimizers, weight averaging and
//! the step loop.

mod loss;
mod optim;
mod trainer;

#[cfg(test)]
mod tests;

pub use loss::{diffusion_loss, mse_row_weights, LossContext, LossTargets, PassLoss, Supervision};
pub use optim::{
    adamw_step, adan_step, ema_update, optimizer_step, OptimizerConfig, OptimizerKind, OptimizerState,
};
pub use trainer::{
    draw_step, dual_pass_grads, dual_pass_loss, train_loop, LossBreakdown, StepDraws, StepMetrics, TrainConfig,
    TrainRngs, TrainState, Trainer,
};
