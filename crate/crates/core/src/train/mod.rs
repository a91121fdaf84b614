//! Adadelta, experiment configurations, the training loop and run artifacts.

mod config;
mod data;
mod optim;
mod run;

pub use config::{fnv1a64, parse_size, ClassWeighting, Experiment, TrainConfig, CONFIG_KEYS};
pub use data::{cascade_predictions, input_tensor, load_network, CascadeAux, PreparedSplit};
pub use optim::{adadelta_step, AdadeltaParams, AdadeltaState};
pub use run::{
    check_compatible, evaluate_checkpoint, evaluate_network, evaluate_oracle, run_experiment, set_trainable,
    sweep_w, train, train_with, write_eval, write_run, EpochStats, RunRecord, RunSummary, TrainedRun, Trainable,
    CHECKPOINT_FILE, CONFIG_FILE, CONFUSION_FILE, EVAL_KV_FILE, EVAL_TEXT_FILE, RUN_KV_FILE, RUN_TEXT_FILE,
    SWEEP_W,
};
