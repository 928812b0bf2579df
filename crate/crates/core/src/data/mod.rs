//! Loading, splitting, windowing and context tokens.

mod context;
mod io;
mod split;
mod synth;
mod window;

pub use context::{build_context_tokens, ContextBins, ContextMode, DEFAULT_BINS, MAX_DATASETS, TREND_CLASSES};
pub use io::{load_csv, Dataset};
pub use split::{split, window_count, SplitMode, Splits};
pub use synth::{synth_generate, SynthKind};
pub use window::{make_windows, normalize_window, pool_round_robin, prepare, DataConfig, Prepared, WindowPair, STD_FLOOR};

/// Context vocabulary: dataset ids, four binned statistics and a trend sign.
pub const DEFAULT_CONTEXT_VOCAB: usize = MAX_DATASETS + 4 * DEFAULT_BINS + TREND_CLASSES;
