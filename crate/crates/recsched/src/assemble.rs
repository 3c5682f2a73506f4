//! Shared machinery that turns a scenario into stacked or per-member QPs.
//!
//! The quadratic upstream-grid term couples all members through the
//! aggregate net load; stacked problems carry one explicit aggregate
//! variable per step (tied by an equality row) so the quadratic stays
//! diagonal and the coupling lives in the constraint matrix.

use qpcore::{CscMatrix, QpProblem};

use crate::model::{
    individual_constraints, variable_layout, CommunityProfile, Design, LinearConstraintBlock,
    MemberLayout, Schedule,
};
use crate::scenario::Scenario;

/// Offsets of every member block inside a stacked decision vector, plus the
/// trailing aggregate-load block.
#[derive(Debug, Clone)]
pub(crate) struct StackedLayout {
    pub layouts: Vec<MemberLayout>,
    pub offsets: Vec<usize>,
    pub aggregate_offset: usize,
    pub total_vars: usize,
}

impl StackedLayout {
    pub(crate) fn new(scenario: &Scenario, design: Design) -> Self {
        let mut layouts = Vec::with_capacity(scenario.num_members());
        let mut offsets = Vec::with_capacity(scenario.num_members());
        let mut off = 0usize;
        for member in &scenario.members {
            let layout = variable_layout(member, design, &scenario.horizon);
            offsets.push(off);
            off += layout.count();
            layouts.push(layout);
        }
        StackedLayout { layouts, offsets, aggregate_offset: off, total_vars: off + scenario.steps() }
    }

    pub(crate) fn idx_aggregate(&self, t: usize) -> usize {
        self.aggregate_offset + t
    }
}

/// Objective variants assembled on top of the same feasible set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum StackedObjective {
    /// Total community cost (design-dependent commodity terms, upstream
    /// quadratic, peak penalties).
    SocialCost,
    /// Social cost minus half the cross-member upstream interaction; the
    /// exact potential of the per-slot billed game.
    CpPotential,
}

/// Append one member's constraint block to a triplet/rhs accumulator.
fn append_block(
    block: &LinearConstraintBlock,
    var_offset: usize,
    row_offset: usize,
    triplets: &mut Vec<(usize, usize, f64)>,
    lower: &mut Vec<f64>,
    upper: &mut Vec<f64>,
) -> usize {
    for (r, row) in block.rows.iter().enumerate() {
        for &(j, v) in &row.coeffs {
            triplets.push((row_offset + r, var_offset + j, v));
        }
        lower.push(row.lower);
        upper.push(row.upper);
    }
    row_offset + block.rows.len()
}

/// Build the stacked community problem for the given design and objective.
pub(crate) fn build_stacked_problem(
    scenario: &Scenario,
    design: Design,
    objective: StackedObjective,
) -> (QpProblem, StackedLayout) {
    let stacked = StackedLayout::new(scenario, design);
    let t_steps = scenario.steps();
    let n = stacked.total_vars;
    let alpha = scenario.tariffs.alpha;

    let mut linear = vec![0.0; n];
    let mut var_lower = vec![f64::NEG_INFINITY; n];
    let mut var_upper = vec![f64::INFINITY; n];
    let mut quad: Vec<(usize, usize, f64)> = Vec::new();
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    let mut lower: Vec<f64> = Vec::new();
    let mut upper: Vec<f64> = Vec::new();
    let mut row_offset = 0usize;

    for (i, member) in scenario.members.iter().enumerate() {
        let layout = &stacked.layouts[i];
        let off = stacked.offsets[i];
        let block = individual_constraints(member, design, &scenario.horizon);
        var_lower[off..off + block.num_vars].copy_from_slice(&block.var_lower);
        var_upper[off..off + block.num_vars].copy_from_slice(&block.var_upper);
        row_offset = append_block(&block, off, row_offset, &mut triplets, &mut lower, &mut upper);

        linear[off + layout.idx_peak()] += scenario.tariffs.beta;
        for t in 0..t_steps {
            match design {
                Design::D1 => {
                    linear[off + layout.idx_import(t)] += scenario.tariffs.import[t];
                    linear[off + layout.idx_export(t)] -= scenario.tariffs.export[t];
                }
                Design::D2 => {
                    linear[off + layout.idx_retail_import(t)] += scenario.tariffs.import[t];
                    linear[off + layout.idx_community_import(t)] += scenario.tariffs.local_import[t];
                    linear[off + layout.idx_retail_export(t)] -= scenario.tariffs.export[t];
                    linear[off + layout.idx_community_export(t)] -= scenario.tariffs.local_export[t];
                }
            }
            if objective == StackedObjective::CpPotential {
                // + (alpha/2)·lᵢ² per member and step
                let jp = off + layout.idx_import(t);
                let jn = off + layout.idx_export(t);
                quad.push((jp, jp, alpha));
                quad.push((jn, jn, alpha));
                quad.push((jp.min(jn), jp.max(jn), -alpha));
            }
        }
    }

    // aggregate tie rows: L_t − Σᵢ (l⁺ᵢ,t − l⁻ᵢ,t) = 0
    for t in 0..t_steps {
        let la = stacked.idx_aggregate(t);
        triplets.push((row_offset, la, 1.0));
        for (i, layout) in stacked.layouts.iter().enumerate() {
            let off = stacked.offsets[i];
            triplets.push((row_offset, off + layout.idx_import(t), -1.0));
            triplets.push((row_offset, off + layout.idx_export(t), 1.0));
        }
        lower.push(0.0);
        upper.push(0.0);
        row_offset += 1;
        let coeff = match objective {
            StackedObjective::SocialCost => 2.0 * alpha,
            StackedObjective::CpPotential => alpha,
        };
        if coeff != 0.0 {
            quad.push((la, la, coeff));
        }
    }

    // design D2: community balance Σᵢ (e_com − i_com) = 0 per step
    if design == Design::D2 {
        for t in 0..t_steps {
            for (i, layout) in stacked.layouts.iter().enumerate() {
                let off = stacked.offsets[i];
                triplets.push((row_offset, off + layout.idx_community_export(t), 1.0));
                triplets.push((row_offset, off + layout.idx_community_import(t), -1.0));
            }
            lower.push(0.0);
            upper.push(0.0);
            row_offset += 1;
        }
    }

    let mut problem = QpProblem::new(n, CscMatrix::from_triplets(n, n, &quad), linear);
    problem.var_lower = var_lower;
    problem.var_upper = var_upper;
    problem.set_rows(CscMatrix::from_triplets(row_offset, n, &triplets), lower, upper);
    (problem, stacked)
}

/// Split a stacked solution vector into per-member schedules.
pub(crate) fn extract_profile(
    stacked: &StackedLayout,
    design: Design,
    z: &[f64],
) -> CommunityProfile {
    let schedules = stacked
        .layouts
        .iter()
        .zip(&stacked.offsets)
        .map(|(layout, &off)| Schedule::from_vector(layout, &z[off..off + layout.count()]))
        .collect();
    CommunityProfile { design, schedules }
}
