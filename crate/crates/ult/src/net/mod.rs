pub mod adamw;
pub mod attention;
pub mod checkpoint;
pub mod model;
pub mod params;

pub use adamw::AdamW;
pub use checkpoint::{export_student, load_checkpoint, save_checkpoint, LoadedCheckpoint};
pub use model::{
    gaussian_entropy, gaussian_log_prob, gaussian_log_prob_grads, gaussian_sample, ActOutput,
    ForwardCache, ForwardOutput, Mode, OutputGrads, UltNet, LOG_STD_MAX, LOG_STD_MIN,
};
