//! Optimal assignment of ground-truth instances to decoder queries, solved
//! once per newly appearing instance and then frozen for the rest of the
//! video.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::losses::giou_cxcywh;

/// Shortest-augmenting-path solver over a cost closure, rows <= cols.
/// Returns each row's column and the total cost.
fn lap_core(n_rows: usize, n_cols: usize, cost: &dyn Fn(usize, usize) -> f64) -> (Vec<usize>, f64) {
    debug_assert!(n_rows <= n_cols);
    let mut u = vec![0.0; n_rows + 1];
    let mut v = vec![0.0; n_cols + 1];
    let mut p = vec![0usize; n_cols + 1];
    let mut way = vec![0usize; n_cols + 1];
    for i in 1..=n_rows {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n_cols + 1];
        let mut used = vec![false; n_cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n_cols {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n_cols {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![usize::MAX; n_rows];
    for j in 1..=n_cols {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    let total = row_to_col
        .iter()
        .enumerate()
        .map(|(r, &c)| cost(r, c))
        .sum();
    (row_to_col, total)
}

/// Minimum-cost assignment of one query per ground truth. `cost` is row-major
/// [num_queries × num_gts]; the result maps each ground-truth index to its
/// query. Among equally cheap assignments the lexicographically smallest
/// query vector is returned, so an all-zero cost yields gt j -> query j.
pub fn hungarian_match(cost: &[f64], num_queries: usize, num_gts: usize) -> Result<Vec<usize>> {
    if cost.len() != num_queries * num_gts {
        return Err(Error::contract(format!(
            "assignment cost must hold {num_queries}\u{d7}{num_gts} entries, got {}",
            cost.len()
        )));
    }
    if num_gts > num_queries {
        return Err(Error::contract(format!(
            "cannot assign {num_gts} ground truths to {num_queries} queries"
        )));
    }
    if let Some(bad) = cost.iter().find(|c| !c.is_finite()) {
        return Err(Error::contract(format!(
            "assignment cost must be finite, found {bad}"
        )));
    }
    if num_gts == 0 {
        return Ok(Vec::new());
    }
    let at = |g: usize, q: usize| cost[q * num_gts + g];
    let (_, best) = lap_core(num_gts, num_queries, &at);
    let tol = 1e-9 * (1.0 + best.abs());

    // Fix queries greedily in gt order, keeping only choices that still
    // admit an optimal completion of the remaining subproblem.
    let mut result = vec![usize::MAX; num_gts];
    let mut taken = vec![false; num_queries];
    let mut fixed = 0.0;
    for g in 0..num_gts {
        let rem_rows: Vec<usize> = (g + 1..num_gts).collect();
        let mut chosen = None;
        for q in 0..num_queries {
            if taken[q] {
                continue;
            }
            let rem_cols: Vec<usize> = (0..num_queries)
                .filter(|&c| !taken[c] && c != q)
                .collect();
            let completion = if rem_rows.is_empty() {
                0.0
            } else {
                lap_core(rem_rows.len(), rem_cols.len(), &|r, c| {
                    at(rem_rows[r], rem_cols[c])
                })
                .1
            };
            if fixed + at(g, q) + completion <= best + tol {
                chosen = Some(q);
                break;
            }
        }
        let q = chosen.expect("an optimal completion always exists");
        taken[q] = true;
        fixed += at(g, q);
        result[g] = q;
    }
    Ok(result)
}

/// Per-video assignment memory: once a ground-truth instance is bound to a
/// query, the pair persists even while the instance is invisible.
pub struct MatchState {
    num_queries: usize,
    assoc: BTreeMap<usize, usize>,
    used: BTreeSet<usize>,
}

impl MatchState {
    pub fn new(num_queries: usize) -> MatchState {
        MatchState {
            num_queries,
            assoc: BTreeMap::new(),
            used: BTreeSet::new(),
        }
    }

    pub fn num_queries(&self) -> usize {
        self.num_queries
    }

    pub fn query_for(&self, gt_id: usize) -> Option<usize> {
        self.assoc.get(&gt_id).copied()
    }

    /// (gt id, query) pairs, ascending by gt id.
    pub fn assoc(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.assoc.iter().map(|(&g, &q)| (g, q))
    }

    /// Every reserved query, ascending.
    pub fn reserved_queries(&self) -> Vec<usize> {
        self.used.iter().copied().collect()
    }
}

/// Matcher cost weights for (class score, box L1, box overlap) terms.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct MatcherWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for MatcherWeights {
    fn default() -> MatcherWeights {
        MatcherWeights {
            class: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

/// Supervision layout for one frame after assignment bookkeeping.
#[derive(Debug)]
pub struct FrameMatches {
    /// (position in this frame's ground-truth arrays, query index), in
    /// ground-truth order.
    pub pairs: Vec<(usize, usize)>,
    /// Whether the optimal-assignment solver actually ran this frame.
    pub matcher_invoked: bool,
}

/// Bind any newly appeared ground-truth ids to free queries and report this
/// frame's (gt, query) pairs. Existing bindings are reused without solving;
/// ids absent this frame keep their query reserved.
///
/// `pred_scores` is [N×num_classes] probabilities, `pred_boxes` [N×4] and
/// `gt_boxes` [G×4] in normalized (cx,cy,w,h).
#[allow(clippy::too_many_arguments)]
pub fn update_matches(
    state: &mut MatchState,
    gt_ids: &[usize],
    gt_classes: &[usize],
    gt_boxes: &[f64],
    pred_scores: &[f64],
    pred_boxes: &[f64],
    num_classes: usize,
    w: &MatcherWeights,
) -> Result<FrameMatches> {
    let n = state.num_queries;
    let g = gt_ids.len();
    if gt_classes.len() != g || gt_boxes.len() != g * 4 {
        return Err(Error::contract(format!(
            "ground-truth arrays disagree: {g} ids, {} classes, {} box values",
            gt_classes.len(),
            gt_boxes.len()
        )));
    }
    if pred_scores.len() != n * num_classes || pred_boxes.len() != n * 4 {
        return Err(Error::contract(format!(
            "predictions must cover all {n} queries, got {} scores and {} box values",
            pred_scores.len(),
            pred_boxes.len()
        )));
    }
    for (i, id) in gt_ids.iter().enumerate() {
        if gt_ids[..i].contains(id) {
            return Err(Error::contract(format!(
                "ground-truth id {id} appears twice in one frame"
            )));
        }
    }
    if let Some(&bad) = gt_classes.iter().find(|&&c| c >= num_classes) {
        return Err(Error::contract(format!(
            "ground-truth class {bad} out of range for {num_classes} classes"
        )));
    }

    let new_slots: Vec<usize> = (0..g)
        .filter(|&s| !state.assoc.contains_key(&gt_ids[s]))
        .collect();
    let invoked = !new_slots.is_empty();
    if invoked {
        let free: Vec<usize> = (0..n).filter(|q| !state.used.contains(q)).collect();
        // Focal-style class cost plus weighted box distance, one row per
        // free query, one column per new ground truth.
        let (alpha, gamma) = (0.25, 2.0);
        let mut cost = vec![0.0; free.len() * new_slots.len()];
        for (fi, &q) in free.iter().enumerate() {
            for (gi, &s) in new_slots.iter().enumerate() {
                let p = pred_scores[q * num_classes + gt_classes[s]].clamp(1e-6, 1.0 - 1e-6);
                let pos = alpha * (1.0 - p).powf(gamma) * (-p.ln());
                let neg = (1.0 - alpha) * p.powf(gamma) * (-(1.0 - p).ln());
                let l1: f64 = (0..4)
                    .map(|d| (pred_boxes[q * 4 + d] - gt_boxes[s * 4 + d]).abs())
                    .sum();
                let ov = giou_cxcywh(&pred_boxes[q * 4..q * 4 + 4], &gt_boxes[s * 4..s * 4 + 4]);
                cost[fi * new_slots.len() + gi] = w.class * (pos - neg) + w.l1 * l1 + w.giou * (-ov);
            }
        }
        let picked = hungarian_match(&cost, free.len(), new_slots.len())?;
        for (gi, &fi) in picked.iter().enumerate() {
            let q = free[fi];
            state.assoc.insert(gt_ids[new_slots[gi]], q);
            state.used.insert(q);
        }
    }

    let pairs = gt_ids
        .iter()
        .enumerate()
        .map(|(s, id)| (s, state.assoc[id]))
        .collect();
    Ok(FrameMatches {
        pairs,
        matcher_invoked: invoked,
    })
}
