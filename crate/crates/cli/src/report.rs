//! Retrieval report: machine-readable JSON with R-1/R-5/R-10 and mAP plus a
//! human-readable table.

use std::fs;
use std::path::Path;

use adp_core::eval::RankingResult;
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub queries_evaluated: usize,
    pub queries_skipped: usize,
    pub gallery_size: usize,
}

impl EvalReport {
    /// `result` must come from a `cmc_map` call with `max_rank >= 10`.
    pub fn from_ranking(result: &RankingResult, gallery_size: usize) -> Self {
        assert!(result.cmc.len() >= 10, "report needs CMC out to rank 10");
        Self {
            rank1: result.cmc[0],
            rank5: result.cmc[4],
            rank10: result.cmc[9],
            map: result.map,
            queries_evaluated: result.evaluated,
            queries_skipped: result.skipped,
            gallery_size,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text)
            .with_context(|| format!("cannot write report {}", path.display()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read report {}", path.display()))?;
        let report = serde_json::from_str(&text)
            .with_context(|| format!("cannot parse report {}", path.display()))?;
        Ok(report)
    }

    /// Table in the usual benchmark layout.
    pub fn table(&self) -> String {
        format!(
            "metric |   R-1   R-5  R-10   mAP\n\
             -------+-------------------------\n\
             value  | {:5.1} {:5.1} {:5.1} {:5.1}   (% over {} queries, {} gallery images, {} skipped)\n",
            self.rank1 * 100.0,
            self.rank5 * 100.0,
            self.rank10 * 100.0,
            self.map * 100.0,
            self.queries_evaluated,
            self.gallery_size,
            self.queries_skipped,
        )
    }
}
