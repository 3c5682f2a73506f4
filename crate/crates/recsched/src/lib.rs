//! Day-ahead scheduling of energy exchanges in renewable energy communities.

mod assemble;
pub mod central;
pub mod model;
pub mod scenario;

/// Scratch hook for solver profiling (removed before release).
pub fn debug_build_stacked(
    scenario: &scenario::Scenario,
    design: model::Design,
) -> (qpcore::QpProblem, usize) {
    let (p, l) = assemble::build_stacked_problem(scenario, design, assemble::StackedObjective::SocialCost);
    (p, l.total_vars)
}
