//! Sharpe-ratio losses, model training, random search and the
//! expanding-window protocol.

mod loss;
mod samples;
mod search;
mod trainer;
mod window;

pub use loss::{
    bps_to_fraction, equal_weights, l1_penalty, l1_penalty_var, net_captured_var, sharpe_loss,
    sharpe_loss_var, turnover_regularized_loss, TRADING_DAYS, VARIANCE_EPSILON,
};
pub use samples::{flat_to_model_layout, SampleSet, SampleSource};
pub use trainer::{
    arch_for, derive_seed, evaluate_loss, loss_and_gradient, predict_set, stream, train_model,
    EarlyStopping, EpochLog, TrainConfig, TrainOutcome, DEFAULT_PATIENCE, DEFAULT_SIGMA_TGT,
};
pub use search::{
    random_search, sample_candidates, Candidate, CandidateResult, LogRow, SearchGrid, SearchOutcome,
    DEFAULT_ITERATIONS,
};
pub use window::{
    expanding_window, split_samples, window_bounds, ExpandingResult, WindowBounds, WindowConfig,
    WindowReport,
};
