//! Zero-shot retrieval and classification on held-out categories.

mod ablation;
mod bank;
mod report;

pub use ablation::{
    spatial_ablation, temporal_ablation, temporal_cells, window_grid, AblationCell, AblationContext, AblationGrid,
    AblationMode, CellStrategy,
};
pub use bank::{
    classify, rank_by_cosine, retrieve, topk_accuracy, RetrievalResult, Task, TemplateBank, TopKReport,
};
pub use report::{evaluate, rank_lines, results_table, EvalReport, RankRecord, ResultRow};
