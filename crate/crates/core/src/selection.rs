//! Cut selection: which contiguous span of blocks to remove.
//!
//! A group `(i, n)` removes blocks `i+1 ..= i+n` and fuses the estimated
//! transform into block `i`'s down-projection, so block `i` must exist
//! (`i >= 1`) and the span must stay inside the stack (`i + n <= n_layers`).
//! Block indices are 1-based throughout the public surface.
//!
//! The cut index is chosen by minimizing a hidden-state distance between
//! the would-be input and output of the span: `h(L_i, L_{i+n})`, averaged
//! over all calibration tokens (pooled over sequences).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calib::CalibrationSet;
use crate::error::{Error, Result};
use crate::eval;
use crate::linalg::Mat;
use crate::model::{collect_block_outputs, TransformerModel};
use crate::parallel;

/// Distance between hidden-state matrices, averaged per token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Cosine,
    L2,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Cosine => write!(f, "cosine"),
            Metric::L2 => write!(f, "l2"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "l2" => Ok(Metric::L2),
            other => Err(Error::Input(format!(
                "unknown metric {other:?} (expected cosine or l2)"
            ))),
        }
    }
}

/// One contiguous span: host block `start`, removing the `span` blocks
/// after it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub start: usize,
    pub span: usize,
}

impl Group {
    pub fn new(start: usize, span: usize) -> Self {
        Group { start, span }
    }

    /// Index of the last removed block, which is also where the span's
    /// output is read: `L_{start + span}`.
    pub fn end(&self) -> usize {
        self.start + self.span
    }
}

/// An ordered set of non-overlapping groups plus the selection metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutPlan {
    groups: Vec<Group>,
    pub metric: Metric,
}

impl CutPlan {
    pub fn new(groups: Vec<Group>, metric: Metric) -> Self {
        CutPlan { groups, metric }
    }

    pub fn single(start: usize, span: usize, metric: Metric) -> Self {
        CutPlan::new(vec![Group::new(start, span)], metric)
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    /// Total number of removed blocks.
    pub fn total_span(&self) -> usize {
        self.groups.iter().map(|g| g.span).sum()
    }

    /// Checks ordering, bounds and overlap against a concrete stack depth.
    /// Back-to-back groups (one starting on the previous group's last
    /// removed block) are legal here; [`CutPlan::normalize`] merges them.
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::Plan("plan contains no groups".into()));
        }
        for g in &self.groups {
            if g.span == 0 {
                return Err(Error::Plan(format!("group at {} has zero span", g.start)));
            }
            if g.start < 1 {
                return Err(Error::Plan(
                    "group start must be at least 1 (a block must precede the span)".into(),
                ));
            }
            if g.end() > n_layers {
                return Err(Error::Plan(format!(
                    "group ({}, {}) runs past the last block {n_layers}",
                    g.start, g.span
                )));
            }
        }
        for pair in self.groups.windows(2) {
            if pair[1].start < pair[0].start {
                return Err(Error::Plan("groups are not sorted by start".into()));
            }
            if pair[1].start < pair[0].end() {
                return Err(Error::Plan(format!(
                    "groups ({}, {}) and ({}, {}) overlap",
                    pair[0].start, pair[0].span, pair[1].start, pair[1].span
                )));
            }
        }
        Ok(())
    }

    /// Merges back-to-back groups. A group starting on the previous group's
    /// last removed block would have its host block removed, so the two
    /// collapse into one span with a single transform:
    /// `(i, n1), (i+n1, n2) -> (i, n1+n2)`.
    pub fn normalize(&self) -> CutPlan {
        let mut merged: Vec<Group> = Vec::with_capacity(self.groups.len());
        for g in &self.groups {
            match merged.last_mut() {
                Some(prev) if g.start == prev.end() => prev.span += g.span,
                _ => merged.push(*g),
            }
        }
        CutPlan::new(merged, self.metric)
    }
}

/// Per-candidate distances for one span length, plus the argmin.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistanceReport {
    /// Span length under evaluation.
    pub n: usize,
    pub metric: Metric,
    /// `distances[k]` is the mean distance for candidate start `i = k + 1`.
    pub distances: Vec<f64>,
    /// Candidate start attaining the minimum; ties break toward the
    /// smallest start.
    pub best_start: usize,
}

impl DistanceReport {
    pub fn candidate_starts(&self) -> impl Iterator<Item = usize> {
        1..=self.distances.len()
    }
}

/// Mean over rows of the per-token cosine distance
/// `1 - a_k . b_k / (|a_k| |b_k|)`; accumulated in 64-bit.
pub fn token_cosine_distance(a: &Mat<f32>, b: &Mat<f32>) -> Result<f64> {
    assert_eq!(
        (a.rows(), a.cols()),
        (b.rows(), b.cols()),
        "cosine distance needs equal shapes"
    );
    if a.rows() == 0 {
        return Err(Error::Input("cosine distance over zero tokens".into()));
    }
    let mut total = 0.0f64;
    for r in 0..a.rows() {
        total += row_cosine_distance(a.row(r), b.row(r))?;
    }
    Ok(total / a.rows() as f64)
}

fn row_cosine_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < 1e-12 || nb < 1e-12 {
        return Err(Error::Degenerate(format!(
            "zero-norm token row in cosine distance (norms {na:.3e}, {nb:.3e})"
        )));
    }
    Ok(1.0 - dot / (na * nb))
}

/// Mean over rows of the per-token Euclidean distance `|a_k - b_k|`.
pub fn token_l2_distance(a: &Mat<f32>, b: &Mat<f32>) -> Result<f64> {
    assert_eq!(
        (a.rows(), a.cols()),
        (b.rows(), b.cols()),
        "l2 distance needs equal shapes"
    );
    if a.rows() == 0 {
        return Err(Error::Input("l2 distance over zero tokens".into()));
    }
    let mut total = 0.0f64;
    for r in 0..a.rows() {
        let mut sq = 0.0f64;
        for (&x, &y) in a.row(r).iter().zip(b.row(r).iter()) {
            let diff = x as f64 - y as f64;
            sq += diff * diff;
        }
        total += sq.sqrt();
    }
    Ok(total / a.rows() as f64)
}

fn span_distance(metric: Metric, a: &Mat<f32>, b: &Mat<f32>) -> Result<f64> {
    match metric {
        Metric::Cosine => token_cosine_distance(a, b),
        Metric::L2 => token_l2_distance(a, b),
    }
}

fn check_span_len(n: usize, n_layers: usize) -> Result<()> {
    if n < 1 || n > n_layers.saturating_sub(1) {
        return Err(Error::Plan(format!(
            "span length {n} out of range for {n_layers} layers (need 1..={})",
            n_layers.saturating_sub(1)
        )));
    }
    Ok(())
}

/// Evaluates every admissible start `i` for a span of length `n` and
/// returns the per-candidate distances with the argmin.
pub fn select_cut(
    model: &TransformerModel,
    calib: &CalibrationSet,
    n: usize,
    metric: Metric,
) -> Result<DistanceReport> {
    let n_layers = model.n_layers();
    check_span_len(n, n_layers)?;
    let outputs = collect_block_outputs(model, calib.sequences())?;
    let n_candidates = n_layers - n;
    let distances: Vec<Result<f64>> = parallel::map_indexed(n_candidates, |k| {
        // Candidate start i = k + 1; outputs[j] holds L_{j+1}.
        span_distance(metric, &outputs[k], &outputs[k + n])
    });
    let distances = distances.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(DistanceReport {
        n,
        metric,
        best_start: argmin_start(&distances),
        distances,
    })
}

/// Smallest start attaining the minimum distance (1-based).
fn argmin_start(distances: &[f64]) -> usize {
    let mut best = 0;
    for (k, &d) in distances.iter().enumerate() {
        if d < distances[best] {
            best = k;
        }
    }
    best + 1
}

/// One sweep candidate: both metrics, plus downstream perplexity when an
/// evaluation set is supplied.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub start: usize,
    pub n: usize,
    pub cosine: f64,
    pub l2: f64,
    pub loss: Option<f64>,
}

/// Exhaustive sliding-window sweep: for every candidate start, both
/// distance metrics, and (optionally) held-out perplexity after removing
/// the span with an identity transform.
pub fn brute_force_sweep(
    model: &TransformerModel,
    calib: &CalibrationSet,
    n: usize,
    eval_set: Option<&CalibrationSet>,
) -> Result<Vec<SweepRow>> {
    let n_layers = model.n_layers();
    check_span_len(n, n_layers)?;
    let outputs = collect_block_outputs(model, calib.sequences())?;
    let d = model.config.d_model;
    let rows: Vec<Result<SweepRow>> = parallel::map_indexed(n_layers - n, |k| {
        let start = k + 1;
        let cosine = token_cosine_distance(&outputs[k], &outputs[k + n])?;
        let l2 = token_l2_distance(&outputs[k], &outputs[k + n])?;
        let loss = match eval_set {
            Some(set) => {
                let plan = CutPlan::single(start, n, Metric::Cosine);
                let pruned = model.fuse_and_prune(&plan, &[Mat::identity(d)])?;
                Some(eval::perplexity(&pruned, set)?.perplexity)
            }
            None => None,
        };
        Ok(SweepRow {
            start,
            n,
            cosine,
            l2,
            loss,
        })
    });
    rows.into_iter().collect()
}

/// Renders sweep rows as CSV under the configured metric. The loss column
/// appears only when every row carries one.
pub fn sweep_to_csv(rows: &[SweepRow], metric: Metric) -> String {
    let with_loss = !rows.is_empty() && rows.iter().all(|r| r.loss.is_some());
    let mut out = String::new();
    if with_loss {
        out.push_str("i,n,metric,distance,loss\n");
    } else {
        out.push_str("i,n,metric,distance\n");
    }
    for row in rows {
        let distance = match metric {
            Metric::Cosine => row.cosine,
            Metric::L2 => row.l2,
        };
        match (with_loss, row.loss) {
            (true, Some(loss)) => out.push_str(&format!(
                "{},{},{metric},{distance},{loss}\n",
                row.start, row.n
            )),
            _ => out.push_str(&format!("{},{},{metric},{distance}\n", row.start, row.n)),
        }
    }
    out
}

/// Mean token cosine distance between every pair of block outputs.
/// Entry `(i, j)` (0-based storage for 1-based blocks `i+1`, `j+1`) is
/// symmetric by construction with an exactly zero diagonal.
pub fn pairwise_distance_matrix(
    model: &TransformerModel,
    calib: &CalibrationSet,
) -> Result<Mat<f64>> {
    let outputs = collect_block_outputs(model, calib.sequences())?;
    let n = outputs.len();
    // Upper-triangle pairs, evaluated independently.
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            pairs.push((i, j));
        }
    }
    let values: Vec<Result<f64>> = parallel::map_slice(&pairs, |&(i, j)| {
        token_cosine_distance(&outputs[i], &outputs[j])
    });
    let mut matrix = Mat::zeros(n, n);
    for (&(i, j), value) in pairs.iter().zip(values) {
        let v = value?;
        matrix.set(i, j, v);
        matrix.set(j, i, v);
    }
    Ok(matrix)
}

/// Greedy multi-group selection: repeatedly takes the best remaining
/// candidate for span length `n`, excluding starts whose spans would
/// overlap or sit back-to-back with an already chosen group (back-to-back
/// groups would merge into one longer span, changing the requested shape).
pub fn select_groups(
    model: &TransformerModel,
    calib: &CalibrationSet,
    n: usize,
    n_groups: usize,
    metric: Metric,
) -> Result<CutPlan> {
    if n_groups == 0 {
        return Err(Error::Plan("asked for zero groups".into()));
    }
    let report = select_cut(model, calib, n, metric)?;
    let n_candidates = report.distances.len();
    let mut taken: Vec<Group> = Vec::new();
    let mut blocked = vec![false; n_candidates + 1]; // 1-based starts
    for _ in 0..n_groups {
        let mut best: Option<(usize, f64)> = None;
        for (idx, &d) in report.distances.iter().enumerate() {
            let start = idx + 1;
            if blocked[start] {
                continue;
            }
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((start, d));
            }
        }
        let Some((start, _)) = best else {
            return Err(Error::Plan(format!(
                "only found {} non-overlapping groups of span {n}, wanted {n_groups}",
                taken.len()
            )));
        };
        taken.push(Group::new(start, n));
        // Block any start whose span [start+1, start+n] would touch the
        // chosen span [chosen+1, chosen+n] or its host block.
        let lo = start.saturating_sub(n).max(1);
        let hi = (start + n).min(n_candidates);
        blocked[lo..=hi].fill(true);
    }
    taken.sort_by_key(|g| g.start);
    Ok(CutPlan::new(taken, metric))
}
