//! Centralized (socially optimal) solves, the no-community benchmark, and
//! the leave-one-out solves that marginal-cost billing needs.

use rayon::prelude::*;

use qpcore::{QpError, QpProblem, Settings};

use crate::assemble::{build_stacked_problem, extract_profile, StackedObjective};
use crate::model::{
    check_feasibility, individual_constraints, variable_layout, CommunityProfile, Design,
    ModelError, Schedule,
};
use crate::scenario::Scenario;

#[derive(Debug, thiserror::Error)]
pub enum CentralError {
    #[error("solver: {0}")]
    Solver(#[from] QpError),
    #[error("{0}")]
    Model(#[from] ModelError),
    #[error("leave-one-out requires at least two members")]
    TooFewMembers,
}

/// Total community cost split into its components. All fields are
/// nonnegative; exports and local sales are revenues and enter the total
/// with a minus sign.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CostBreakdown {
    pub commodity_import: f64,
    pub commodity_export: f64,
    pub local_purchase: f64,
    pub local_sale: f64,
    pub upstream: f64,
    pub peak: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.commodity_import - self.commodity_export + self.local_purchase - self.local_sale
            + self.upstream
            + self.peak
    }
}

/// Total community cost of a profile with its component breakdown.
///
/// Design D1 prices the physical net-load split at retail tariffs; design
/// D2 prices the retail/community split of the same volumes. The upstream
/// term is alpha times the squared aggregate net load, the peak term beta
/// times each member's daily peak import power.
pub fn total_cost(
    profile: &CommunityProfile,
    scenario: &Scenario,
    design: Design,
) -> Result<CostBreakdown, ModelError> {
    if profile.design != design {
        return Err(ModelError::DesignMismatch { expected: design, found: profile.design });
    }
    let t_steps = scenario.steps();
    let tar = &scenario.tariffs;
    let mut cost = CostBreakdown::default();
    for sched in &profile.schedules {
        cost.peak += tar.beta * sched.peak_kw;
        match design {
            Design::D1 => {
                for t in 0..t_steps {
                    cost.commodity_import += tar.import[t] * sched.import_kwh[t];
                    cost.commodity_export += tar.export[t] * sched.export_kwh[t];
                }
            }
            Design::D2 => {
                let flows = sched.flows.as_ref().ok_or_else(|| {
                    ModelError::Inconsistent("design D2 schedule without flows".into())
                })?;
                for t in 0..t_steps {
                    cost.commodity_import += tar.import[t] * flows.retail_import[t];
                    cost.commodity_export += tar.export[t] * flows.retail_export[t];
                    cost.local_purchase += tar.local_import[t] * flows.community_import[t];
                    cost.local_sale += tar.local_export[t] * flows.community_export[t];
                }
            }
        }
    }
    for l in profile.aggregate_net_load(t_steps) {
        cost.upstream += tar.alpha * l * l;
    }
    Ok(cost)
}

/// A solved centralized problem.
#[derive(Debug, Clone)]
pub struct CentralSolution {
    pub design: Design,
    pub profile: CommunityProfile,
    pub cost: CostBreakdown,
    /// Objective reported by the solver (equals `cost.total()` up to solver
    /// tolerance; the argmin need not be unique, the value is).
    pub objective: f64,
}

/// Solve the centralized scheduling problem for the given design.
pub fn solve_centralized(scenario: &Scenario, design: Design) -> Result<CentralSolution, CentralError> {
    solve_stacked(scenario, design, StackedObjective::SocialCost)
}

pub(crate) fn solve_stacked(
    scenario: &Scenario,
    design: Design,
    objective: StackedObjective,
) -> Result<CentralSolution, CentralError> {
    let (problem, stacked) = build_stacked_problem(scenario, design, objective);
    let settings = central_settings(scenario);
    let sol = qpcore::solve_qp_prox_point(&problem, &settings, PROX_KAPPA, 60)?;
    let profile = extract_profile(&stacked, design, &sol.z);
    let cost = total_cost(&profile, scenario, design)?;
    Ok(CentralSolution { design, profile, cost, objective: sol.objective })
}

/// Proximal weight for the outer fixed-point loop; the stacked problems
/// have flat optimal faces (linear commodity costs), which the proximal
/// term resolves without changing the minimum.
const PROX_KAPPA: f64 = 1e-3;

fn central_settings(scenario: &Scenario) -> Settings {
    if scenario.num_members() > 12 {
        Settings::large_problem()
    } else {
        Settings::default()
    }
}

/// Per-member no-community benchmark: each member minimizes her own
/// commodity and peak cost over her individual design-D1 set. The community
/// total adds the upstream grid cost of the resulting aggregate afterwards.
#[derive(Debug, Clone)]
pub struct BenchmarkSolution {
    pub profile: CommunityProfile,
    /// Each member's own commodity-plus-peak objective value.
    pub individual_costs: Vec<f64>,
    pub upstream_cost: f64,
}

impl BenchmarkSolution {
    pub fn total(&self) -> f64 {
        self.individual_costs.iter().sum::<f64>() + self.upstream_cost
    }
}

pub fn solve_individual_benchmark(scenario: &Scenario) -> Result<BenchmarkSolution, CentralError> {
    let results: Vec<Result<(Schedule, f64), QpError>> = scenario
        .members
        .par_iter()
        .map(|member| {
            let layout = variable_layout(member, Design::D1, &scenario.horizon);
            let block = individual_constraints(member, Design::D1, &scenario.horizon);
            let mut linear = vec![0.0; layout.count()];
            for t in 0..scenario.steps() {
                linear[layout.idx_import(t)] = scenario.tariffs.import[t];
                linear[layout.idx_export(t)] = -scenario.tariffs.export[t];
            }
            linear[layout.idx_peak()] = scenario.tariffs.beta;
            let problem = member_problem(&block, linear);
            let sol = qpcore::solve_qp_prox_point(&problem, &Settings::default(), PROX_KAPPA, 60)?;
            Ok((Schedule::from_vector(&layout, &sol.z), sol.objective))
        })
        .collect();
    let mut schedules = Vec::with_capacity(results.len());
    let mut individual_costs = Vec::with_capacity(results.len());
    for r in results {
        let (sched, obj) = r?;
        schedules.push(sched);
        individual_costs.push(obj);
    }
    let profile = CommunityProfile { design: Design::D1, schedules };
    let upstream_cost: f64 = profile
        .aggregate_net_load(scenario.steps())
        .iter()
        .map(|l| scenario.tariffs.alpha * l * l)
        .sum();
    Ok(BenchmarkSolution { profile, individual_costs, upstream_cost })
}

pub(crate) fn member_problem(
    block: &crate::model::LinearConstraintBlock,
    linear: Vec<f64>,
) -> QpProblem {
    let mut triplets = Vec::new();
    let mut lower = Vec::with_capacity(block.rows.len());
    let mut upper = Vec::with_capacity(block.rows.len());
    for (r, row) in block.rows.iter().enumerate() {
        for &(j, v) in &row.coeffs {
            triplets.push((r, j, v));
        }
        lower.push(row.lower);
        upper.push(row.upper);
    }
    let mut problem = QpProblem::new(
        block.num_vars,
        qpcore::CscMatrix::zero(block.num_vars, block.num_vars),
        linear,
    );
    problem.var_lower = block.var_lower.clone();
    problem.var_upper = block.var_upper.clone();
    problem.set_rows(
        qpcore::CscMatrix::from_triplets(block.rows.len(), block.num_vars, &triplets),
        lower,
        upper,
    );
    problem
}

/// Minimum community cost with one member removed.
pub fn solve_leave_one_out(
    scenario: &Scenario,
    design: Design,
    excluded: usize,
) -> Result<f64, CentralError> {
    if scenario.num_members() < 2 {
        return Err(CentralError::TooFewMembers);
    }
    assert!(excluded < scenario.num_members());
    let sub = scenario.without_member(excluded);
    Ok(solve_centralized(&sub, design)?.cost.total())
}

/// Convenience audit used across the test suites: a central solution must
/// be feasible and re-evaluate to its reported objective.
pub fn audit_central(solution: &CentralSolution, scenario: &Scenario, tol: f64) -> Result<(), String> {
    let report = check_feasibility(&solution.profile, scenario, solution.design, tol)
        .map_err(|e| e.to_string())?;
    if !report.is_feasible() {
        return Err(format!("central profile infeasible: {report}"));
    }
    let total = solution.cost.total();
    let rel = (total - solution.objective).abs() / total.abs().max(1.0);
    if rel > 1e-6 {
        return Err(format!(
            "objective mismatch: re-evaluated {total} vs solver {}",
            solution.objective
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{net_load, ConstraintFamily, D2Flows};
    use crate::scenario::{generate_synthetic, Horizon, MemberAssets, PvLevel, Tariffs};

    fn one_member_scenario() -> Scenario {
        Scenario {
            horizon: Horizon { steps: 1, dt_hours: 1.0 },
            tariffs: Tariffs::flat(1, 0.16, 0.04, 0.13, 0.05, 0.00109488, 0.1096737),
            members: vec![MemberAssets {
                id: "m001".into(),
                base_load: vec![2.0],
                generation: vec![0.0],
                appliances: vec![],
                battery: None,
                conn_limit_kwh: 10.0,
            }],
        }
    }

    #[test]
    fn zero_profile_costs_nothing() {
        let mut scenario = one_member_scenario();
        scenario.members[0].base_load = vec![0.0];
        let profile = CommunityProfile {
            design: Design::D1,
            schedules: vec![Schedule::zeros(&scenario.members[0], Design::D1, &scenario.horizon)],
        };
        let cost = total_cost(&profile, &scenario, Design::D1).unwrap();
        assert_eq!(cost.total(), 0.0);
    }

    #[test]
    fn hand_substituted_single_step_cost() {
        // one member, T=1, l⁺=2, peak=2 at the default network tariffs
        let scenario = one_member_scenario();
        let mut sched = Schedule::zeros(&scenario.members[0], Design::D1, &scenario.horizon);
        sched.import_kwh[0] = 2.0;
        sched.peak_kw = 2.0;
        let profile = CommunityProfile { design: Design::D1, schedules: vec![sched] };
        let cost = total_cost(&profile, &scenario, Design::D1).unwrap();
        let expected = 0.16 * 2.0 + 0.00109488 * 4.0 + 0.1096737 * 2.0;
        assert!((cost.total() - expected).abs() < 1e-12);
        assert!((cost.upstream - 0.00109488 * 4.0).abs() < 1e-15);
    }

    #[test]
    fn design_mismatch_is_an_error() {
        let scenario = one_member_scenario();
        let profile = CommunityProfile {
            design: Design::D1,
            schedules: vec![Schedule::zeros(&scenario.members[0], Design::D1, &scenario.horizon)],
        };
        assert!(matches!(
            total_cost(&profile, &scenario, Design::D2),
            Err(ModelError::DesignMismatch { .. })
        ));
    }

    #[test]
    fn internal_exchange_reduces_commodity_cost() {
        // two members, one surplus one deficit; matched internal exchange
        // lowers the commodity part by (λimp−λiloc)+(λeloc−λexp) per kWh
        let scenario = Scenario {
            horizon: Horizon { steps: 1, dt_hours: 1.0 },
            tariffs: Tariffs::flat(1, 0.16, 0.04, 0.13, 0.05, 0.0, 0.0),
            members: vec![
                MemberAssets {
                    id: "a".into(),
                    base_load: vec![0.0],
                    generation: vec![1.0],
                    appliances: vec![],
                    battery: None,
                    conn_limit_kwh: 10.0,
                },
                MemberAssets {
                    id: "b".into(),
                    base_load: vec![1.0],
                    generation: vec![0.0],
                    appliances: vec![],
                    battery: None,
                    conn_limit_kwh: 10.0,
                },
            ],
        };
        let make_profile = |exchanged: f64| {
            let mut s_a = Schedule::zeros(&scenario.members[0], Design::D2, &scenario.horizon);
            s_a.export_kwh[0] = 1.0;
            let fa = s_a.flows.as_mut().unwrap();
            fa.community_export[0] = exchanged;
            fa.retail_export[0] = 1.0 - exchanged;
            let mut s_b = Schedule::zeros(&scenario.members[1], Design::D2, &scenario.horizon);
            s_b.import_kwh[0] = 1.0;
            s_b.peak_kw = 1.0;
            let fb = s_b.flows.as_mut().unwrap();
            fb.community_import[0] = exchanged;
            fb.retail_import[0] = 1.0 - exchanged;
            CommunityProfile { design: Design::D2, schedules: vec![s_a, s_b] }
        };
        let without = total_cost(&make_profile(0.0), &scenario, Design::D2).unwrap();
        let with = total_cost(&make_profile(1.0), &scenario, Design::D2).unwrap();
        let commodity = |c: &CostBreakdown| {
            c.commodity_import - c.commodity_export + c.local_purchase - c.local_sale
        };
        let drop = commodity(&without) - commodity(&with);
        let expected = (0.16 - 0.13) + (0.05 - 0.04);
        assert!((drop - expected).abs() < 1e-12, "drop {drop} vs {expected}");
    }

    #[test]
    fn forced_member_matches_benchmark_and_central() {
        // a member with no flexibility has identical central and benchmark schedules
        let scenario = one_member_scenario();
        let central = solve_centralized(&scenario, Design::D1).unwrap();
        audit_central(&central, &scenario, 1e-6).unwrap();
        let bench = solve_individual_benchmark(&scenario).unwrap();
        assert!((central.cost.total() - bench.total()).abs() < 1e-6);
        // bill = λ·d + β·(d/dt)
        let expected = 0.16 * 2.0 + 0.1096737 * 2.0;
        assert!((bench.individual_costs[0] - expected).abs() < 1e-7);
        let (l, lp, _) = net_load(&central.profile.schedules[0], &scenario.members[0], 1.0, 0);
        assert!((l - 2.0).abs() < 1e-7);
        assert!((lp - 2.0).abs() < 1e-7);
    }

    #[test]
    fn flexibility_flattens_the_aggregate() {
        // two identical members with flexible windows: central cost strictly
        // below the cost of running everything in one step
        let t = 4;
        let member = |id: &str| MemberAssets {
            id: id.into(),
            base_load: vec![1.0; t],
            generation: vec![0.0; t],
            appliances: vec![crate::scenario::Appliance {
                window: vec![true; t],
                energy_kwh: 2.0,
                power_max_kw: 2.0,
            }],
            battery: None,
            conn_limit_kwh: 10.0,
        };
        let scenario = Scenario {
            horizon: Horizon { steps: t, dt_hours: 1.0 },
            tariffs: Tariffs::flat(t, 0.16, 0.04, 0.13, 0.05, 0.01, 0.1),
            members: vec![member("a"), member("b")],
        };
        let central = solve_centralized(&scenario, Design::D1).unwrap();
        audit_central(&central, &scenario, 1e-6).unwrap();

        // fixed rigid profile: all appliance energy in the first step
        let mut rigid_profile = CommunityProfile {
            design: Design::D1,
            schedules: scenario
                .members
                .iter()
                .map(|m| Schedule::zeros(m, Design::D1, &scenario.horizon))
                .collect(),
        };
        for sched in &mut rigid_profile.schedules {
            sched.appliance_energy[0][0] = 2.0;
            sched.import_kwh = vec![3.0, 1.0, 1.0, 1.0];
            sched.peak_kw = 3.0;
        }
        let rigid = total_cost(&rigid_profile, &scenario, Design::D1).unwrap();
        assert!(central.cost.total() < rigid.total() - 1e-6);
        // the optimizer flattens: aggregate net load close to uniform
        let agg = central.profile.aggregate_net_load(t);
        let mean = agg.iter().sum::<f64>() / t as f64;
        for l in agg {
            assert!((l - mean).abs() < 1e-4, "aggregate not flat: {l} vs {mean}");
        }
    }

    #[test]
    fn d2_never_costs_more_than_d1() {
        for seed in [11u64, 12] {
            let scenario = generate_synthetic(seed, 5, Horizon::default(), PvLevel::High, 0.4);
            let d1 = solve_centralized(&scenario, Design::D1).unwrap();
            let d2 = solve_centralized(&scenario, Design::D2).unwrap();
            audit_central(&d1, &scenario, 1e-6).unwrap();
            audit_central(&d2, &scenario, 1e-6).unwrap();
            assert!(
                d2.cost.total() <= d1.cost.total() + 1e-6,
                "seed {seed}: D2 {} > D1 {}",
                d2.cost.total(),
                d1.cost.total()
            );
            let bench = solve_individual_benchmark(&scenario).unwrap();
            assert!(d1.cost.total() <= bench.total() + 1e-6);
        }
    }

    #[test]
    fn optimal_profiles_do_not_import_and_export_simultaneously() {
        let scenario = generate_synthetic(21, 4, Horizon::default(), PvLevel::High, 0.5);
        let central = solve_centralized(&scenario, Design::D1).unwrap();
        for sched in &central.profile.schedules {
            for t in 0..scenario.steps() {
                let overlap = sched.import_kwh[t] * sched.export_kwh[t];
                assert!(overlap.abs() < 1e-6, "overlap {overlap} at step {t}");
            }
        }
    }

    #[test]
    fn leave_one_out_rules() {
        let scenario = one_member_scenario();
        assert!(matches!(
            solve_leave_one_out(&scenario, Design::D1, 0),
            Err(CentralError::TooFewMembers)
        ));

        // null member does not change the community cost
        let mut two = one_member_scenario();
        two.members.push(MemberAssets {
            id: "null".into(),
            base_load: vec![0.0],
            generation: vec![0.0],
            appliances: vec![],
            battery: None,
            conn_limit_kwh: 1.0,
        });
        let full = solve_centralized(&two, Design::D1).unwrap().cost.total();
        let without_null = solve_leave_one_out(&two, Design::D1, 1).unwrap();
        assert!((full - without_null).abs() < 1e-6);
        // removing the heavy importer strictly lowers cost
        let without_heavy = solve_leave_one_out(&two, Design::D1, 0).unwrap();
        assert!(without_heavy < full - 0.1);
    }

    #[test]
    fn central_d2_profile_is_feasible_and_balanced() {
        let scenario = generate_synthetic(33, 4, Horizon::default(), PvLevel::High, 0.5);
        let central = solve_centralized(&scenario, Design::D2).unwrap();
        let report = check_feasibility(&central.profile, &scenario, Design::D2, 1e-6).unwrap();
        assert!(report.is_feasible(), "{report}");
        assert!(report.violation_of(ConstraintFamily::CommunityBalance) <= 1e-6);
        // keep flows structurally present
        assert!(central.profile.schedules.iter().all(|s| matches!(s.flows, Some(D2Flows { .. }))));
    }
}
