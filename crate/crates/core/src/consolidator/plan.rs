use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::ConsolidateError;

/// Level-by-level grouping of a patch pool into a merge tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergePlan {
    pub pool_size: usize,
    /// Batch size actually used; larger than configured when the level cap
    /// forced it up.
    pub batch_size: usize,
    /// `levels[l]` groups the outputs of level `l` (level 0 = the pool) by
    /// index; each group becomes one patch of level `l + 1`.
    pub levels: Vec<Vec<Vec<usize>>>,
    pub rounds_parallel: usize,
    pub rounds_sequential_b1: usize,
    /// Batch size → rounds of the sequential baseline.
    pub rounds_sequential: BTreeMap<usize, usize>,
}

impl MergePlan {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn total_groups(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    /// Groups with more than one member; single-member groups pass through
    /// without a model call.
    pub fn merge_calls(&self) -> usize {
        self.levels.iter().flatten().filter(|g| g.len() > 1).count()
    }
}

/// Smallest `l` with `b^l >= n`.
pub fn levels_needed(n: usize, b: usize) -> u32 {
    debug_assert!(b >= 2);
    let mut l = 0;
    let mut reach: u128 = 1;
    while reach < n as u128 {
        reach *= b as u128;
        l += 1;
    }
    l
}

/// Smallest batch size whose tree over `n` leaves has at most `cap` levels.
fn batch_for_cap(n: usize, start: usize, cap: u32) -> usize {
    let mut b = start;
    while levels_needed(n, b) > cap {
        b += 1;
    }
    b
}

pub fn plan_merge_tree(n: usize, batch_size: usize, level_cap: u32, sequential_batches: &[usize]) -> Result<MergePlan, ConsolidateError> {
    if n == 0 {
        return Err(ConsolidateError::EmptyPool);
    }
    if batch_size < 2 {
        return Err(ConsolidateError::InvalidConfig(format!("batch size {batch_size} is below 2")));
    }
    if level_cap < 1 {
        return Err(ConsolidateError::InvalidConfig("level cap must be at least 1".into()));
    }
    let b = if levels_needed(n, batch_size) > level_cap { batch_for_cap(n, batch_size, level_cap) } else { batch_size };
    let mut levels = Vec::new();
    let mut width = n;
    while width > 1 {
        let groups: Vec<Vec<usize>> = (0..width).collect::<Vec<_>>().chunks(b).map(<[usize]>::to_vec).collect();
        width = groups.len();
        levels.push(groups);
    }
    let mut rounds_sequential = BTreeMap::new();
    for &s in sequential_batches {
        if s >= 1 {
            rounds_sequential.insert(s, n.div_ceil(s));
        }
    }
    Ok(MergePlan {
        pool_size: n,
        batch_size: b,
        rounds_parallel: 1 + levels.len(),
        levels,
        rounds_sequential_b1: n,
        rounds_sequential,
    })
}

/// Sequential LLM-call rounds of the parallel pipeline against the
/// sequential baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub pool_size: usize,
    pub batch_size: usize,
    pub merge_levels: usize,
    pub rows: Vec<RoundRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub mode: String,
    pub rounds: usize,
    /// `rounds` divided by the parallel round count.
    pub ratio_to_parallel: f64,
}

impl RoundReport {
    pub fn from_plan(plan: &MergePlan) -> Self {
        let par = plan.rounds_parallel as f64;
        let mut rows = vec![
            RoundRow { mode: "parallel".into(), rounds: plan.rounds_parallel, ratio_to_parallel: 1.0 },
            RoundRow { mode: "sequential_b1".into(), rounds: plan.rounds_sequential_b1, ratio_to_parallel: plan.rounds_sequential_b1 as f64 / par },
        ];
        for (&b, &r) in &plan.rounds_sequential {
            if b != 1 {
                rows.push(RoundRow { mode: format!("sequential_b{b}"), rounds: r, ratio_to_parallel: r as f64 / par });
            }
        }
        RoundReport { pool_size: plan.pool_size, batch_size: plan.batch_size, merge_levels: plan.depth(), rows }
    }

    pub fn row(&self, mode: &str) -> Option<&RoundRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "pool size {}, merge batch {}, {} merge levels\n\n{:<16} {:>7} {:>10}\n",
            self.pool_size, self.batch_size, self.merge_levels, "mode", "rounds", "vs parallel"
        );
        for r in &self.rows {
            let _ = writeln!(out, "{:<16} {:>7} {:>9.2}x", r.mode, r.rounds, r.ratio_to_parallel);
        }
        out
    }
}
