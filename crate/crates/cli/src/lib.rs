//! Library surface of the flowlab command-line tool, exposed so integration
//! tests can drive the commands in-process.

pub mod commands;
pub mod data;

pub use commands::{
    cmd_gradcheck, cmd_sample, cmd_train_dpo, cmd_train_fm, cmd_train_grpo, cmd_train_grpo_from,
    read_pairs, write_glyph_pairs, GradcheckReport, PairRecord, SampleMode, SampleSummary,
    GRADCHECK_TOL,
};
