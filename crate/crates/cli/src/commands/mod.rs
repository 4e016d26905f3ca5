mod correlate;
mod evaluate;
mod ingest;
mod render;
mod study;
mod swap;

pub use correlate::{cmd_correlate, read_item_scores};
pub use evaluate::{
    cmd_evaluate, evaluate_with, read_answer_rows, summarize, Cursor, EvaluateOutcome, RunMetadata, ANSWERS, CURSOR,
    GENERATORS, RUN, SCORES,
};
pub use ingest::{cmd_ingest, IngestReport, Rejection};
pub use render::cmd_render;
pub use study::{cmd_study, prepare_registry, StudyOptions};
pub use swap::{cmd_swap_test, swap_test_with, Skipped, SwapReport};
