//! Downstream evaluation: linear probes, classification and regression
//! scores, and ranking metrics.

mod probe;
mod ranking;
mod report;
mod scores;

pub use probe::{evaluate, LabeledSet, LinearProbe, Task, L2};
pub use ranking::{rank_items, ranking_metrics, Projection, Ranking, RankingCase, RankingReport};
pub use report::MetricsReport;
pub use scores::{auroc, f1_positive, rmse};

impl RankingReport {
    pub fn to_report(&self) -> MetricsReport {
        let mut r = MetricsReport::default();
        r.push("map", self.map);
        r.push("prec_at_1", self.prec_at_1);
        r.push("success5_count", self.success5_count);
        r.push("success5_hit", self.success5_hit);
        r.push("ndcg_at_3", self.ndcg_at_3);
        r
    }
}
