//! Decision-variable layout, schedules, constraint blocks and feasibility
//! audits for one member and for the whole community.
//!
//! Per-member decision vectors are laid out in a fixed block order:
//! appliance energies, storage power and state of charge (only when a
//! battery exists), positive and negative net load, the peak auxiliary, and
//! for design D2 the four virtual flow blocks. Positive and negative net
//! load are independent nonnegative variables tied by the net-load identity;
//! their complementarity is not a constraint (the tariff assumption makes
//! simultaneous import/export non-optimal, which tests check on solver
//! output rather than impose).

use crate::scenario::{Horizon, MemberAssets, Scenario};

/// Market design: D1 couples members through grid tariffs only; D2 adds
/// internal valuation of excess generation through the community pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Design {
    D1,
    D2,
}

impl std::fmt::Display for Design {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Design::D1 => write!(f, "d1"),
            Design::D2 => write!(f, "d2"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("operation requires design {expected}, got {found}")]
    DesignMismatch { expected: Design, found: Design },
    #[error("profile does not match scenario: {0}")]
    Inconsistent(String),
}

/// Index map for one member's decision vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemberLayout {
    pub design: Design,
    pub steps: usize,
    pub num_appliances: usize,
    pub has_battery: bool,
    count: usize,
}

impl MemberLayout {
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn idx_appliance(&self, a: usize, t: usize) -> usize {
        debug_assert!(a < self.num_appliances && t < self.steps);
        a * self.steps + t
    }

    fn storage_base(&self) -> usize {
        self.num_appliances * self.steps
    }

    pub fn idx_storage_power(&self, t: usize) -> usize {
        debug_assert!(self.has_battery && t < self.steps);
        self.storage_base() + t
    }

    pub fn idx_soc(&self, t: usize) -> usize {
        debug_assert!(self.has_battery && t < self.steps);
        self.storage_base() + self.steps + t
    }

    fn net_base(&self) -> usize {
        self.storage_base() + if self.has_battery { 2 * self.steps } else { 0 }
    }

    pub fn idx_import(&self, t: usize) -> usize {
        self.net_base() + t
    }

    pub fn idx_export(&self, t: usize) -> usize {
        self.net_base() + self.steps + t
    }

    pub fn idx_peak(&self) -> usize {
        self.net_base() + 2 * self.steps
    }

    fn flows_base(&self) -> usize {
        self.idx_peak() + 1
    }

    pub fn idx_community_import(&self, t: usize) -> usize {
        debug_assert!(self.design == Design::D2);
        self.flows_base() + t
    }

    pub fn idx_community_export(&self, t: usize) -> usize {
        debug_assert!(self.design == Design::D2);
        self.flows_base() + self.steps + t
    }

    pub fn idx_retail_import(&self, t: usize) -> usize {
        debug_assert!(self.design == Design::D2);
        self.flows_base() + 2 * self.steps + t
    }

    pub fn idx_retail_export(&self, t: usize) -> usize {
        debug_assert!(self.design == Design::D2);
        self.flows_base() + 3 * self.steps + t
    }

    /// Variable names in layout order, for debugging and dumps.
    pub fn names(&self) -> Vec<String> {
        let t = self.steps;
        let mut names = Vec::with_capacity(self.count);
        for a in 0..self.num_appliances {
            for s in 0..t {
                names.push(format!("x[{a}][{s}]"));
            }
        }
        if self.has_battery {
            for s in 0..t {
                names.push(format!("s[{s}]"));
            }
            for s in 0..t {
                names.push(format!("soc[{s}]"));
            }
        }
        for s in 0..t {
            names.push(format!("lpos[{s}]"));
        }
        for s in 0..t {
            names.push(format!("lneg[{s}]"));
        }
        names.push("peak".into());
        if self.design == Design::D2 {
            for block in ["icom", "ecom", "iret", "eret"] {
                for s in 0..t {
                    names.push(format!("{block}[{s}]"));
                }
            }
        }
        names
    }
}

/// Deterministic layout of one member's decision vector.
pub fn variable_layout(member: &MemberAssets, design: Design, horizon: &Horizon) -> MemberLayout {
    let t = horizon.steps;
    let has_battery = member.battery.is_some();
    let mut count = member.appliances.len() * t + 2 * t + 1;
    if has_battery {
        count += 2 * t;
    }
    if design == Design::D2 {
        count += 4 * t;
    }
    MemberLayout { design, steps: t, num_appliances: member.appliances.len(), has_battery, count }
}

/// Constraint families, used by the feasibility audit to attribute the
/// worst violation to a model equation group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConstraintFamily {
    NetLoadIdentity,
    PeakBound,
    ApplianceEnergy,
    AppliancePower,
    StoragePower,
    StorageSoc,
    StorageReturn,
    ImportCap,
    ExportCap,
    Nonnegativity,
    CommunitySale,
    CommunityPurchase,
    CommunityBalance,
    RetailImportSplit,
    RetailExportSplit,
}

impl std::fmt::Display for ConstraintFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            ConstraintFamily::NetLoadIdentity => "net-load identity",
            ConstraintFamily::PeakBound => "peak bound",
            ConstraintFamily::ApplianceEnergy => "appliance energy",
            ConstraintFamily::AppliancePower => "appliance power window",
            ConstraintFamily::StoragePower => "storage power",
            ConstraintFamily::StorageSoc => "storage state of charge",
            ConstraintFamily::StorageReturn => "storage final state",
            ConstraintFamily::ImportCap => "import connection cap",
            ConstraintFamily::ExportCap => "export cap",
            ConstraintFamily::Nonnegativity => "nonnegativity",
            ConstraintFamily::CommunitySale => "community sale cap",
            ConstraintFamily::CommunityPurchase => "community purchase cap",
            ConstraintFamily::CommunityBalance => "community balance",
            ConstraintFamily::RetailImportSplit => "retail import split",
            ConstraintFamily::RetailExportSplit => "retail export split",
        };
        write!(f, "{name}")
    }
}

/// One linear row: `lower ≤ coeffs·z ≤ upper` (equality when the bounds
/// coincide).
#[derive(Debug, Clone)]
pub struct SparseRow {
    pub coeffs: Vec<(usize, f64)>,
    pub lower: f64,
    pub upper: f64,
    pub family: ConstraintFamily,
}

impl SparseRow {
    fn eq(coeffs: Vec<(usize, f64)>, rhs: f64, family: ConstraintFamily) -> Self {
        SparseRow { coeffs, lower: rhs, upper: rhs, family }
    }

    fn le(coeffs: Vec<(usize, f64)>, upper: f64, family: ConstraintFamily) -> Self {
        SparseRow { coeffs, lower: f64::NEG_INFINITY, upper, family }
    }
}

/// The linear constraints and variable bounds of one member's feasible set.
#[derive(Debug, Clone)]
pub struct LinearConstraintBlock {
    pub num_vars: usize,
    pub rows: Vec<SparseRow>,
    pub var_lower: Vec<f64>,
    pub var_upper: Vec<f64>,
}

/// Build one member's individual constraint set (design D1's full set, plus
/// the virtual-flow coupling rows under D2).
pub fn individual_constraints(
    member: &MemberAssets,
    design: Design,
    horizon: &Horizon,
) -> LinearConstraintBlock {
    let layout = variable_layout(member, design, horizon);
    let t = horizon.steps;
    let dt = horizon.dt_hours;
    let n = layout.count();
    let mut var_lower = vec![0.0; n];
    let mut var_upper = vec![f64::INFINITY; n];
    let mut rows = Vec::new();

    for (a, app) in member.appliances.iter().enumerate() {
        for s in 0..t {
            let j = layout.idx_appliance(a, s);
            var_upper[j] = if app.window[s] { app.power_max_kw * dt } else { 0.0 };
        }
        let coeffs: Vec<(usize, f64)> = (0..t)
            .filter(|&s| app.window[s])
            .map(|s| (layout.idx_appliance(a, s), 1.0))
            .collect();
        rows.push(SparseRow::eq(coeffs, app.energy_kwh, ConstraintFamily::ApplianceEnergy));
    }

    if let Some(batt) = &member.battery {
        for s in 0..t {
            let js = layout.idx_storage_power(s);
            var_lower[js] = -batt.discharge_max_kw;
            var_upper[js] = batt.charge_max_kw;
            let je = layout.idx_soc(s);
            var_lower[je] = 0.0;
            var_upper[je] = batt.capacity_kwh;
            // soc[s] = soc[s-1] + dt·s[s], anchored at the initial charge
            let mut coeffs = vec![(je, 1.0), (js, -dt)];
            let rhs = if s == 0 {
                batt.soc_init_kwh
            } else {
                coeffs.push((layout.idx_soc(s - 1), -1.0));
                0.0
            };
            rows.push(SparseRow::eq(coeffs, rhs, ConstraintFamily::StorageSoc));
        }
        rows.push(SparseRow::eq(
            vec![(layout.idx_soc(t - 1), 1.0)],
            batt.soc_init_kwh,
            ConstraintFamily::StorageReturn,
        ));
    }

    for s in 0..t {
        let jp = layout.idx_import(s);
        let jn = layout.idx_export(s);
        var_upper[jp] = member.conn_limit_kwh;
        var_upper[jn] = member.generation[s];
        // net-load identity: lpos - lneg - Σx - dt·s = d - g
        let mut coeffs = vec![(jp, 1.0), (jn, -1.0)];
        for a in 0..member.appliances.len() {
            coeffs.push((layout.idx_appliance(a, s), -1.0));
        }
        if member.battery.is_some() {
            coeffs.push((layout.idx_storage_power(s), -dt));
        }
        rows.push(SparseRow::eq(
            coeffs,
            member.base_load[s] - member.generation[s],
            ConstraintFamily::NetLoadIdentity,
        ));
        // peak: lpos/dt ≤ peak
        rows.push(SparseRow::le(
            vec![(jp, 1.0), (layout.idx_peak(), -dt)],
            0.0,
            ConstraintFamily::PeakBound,
        ));
    }
    var_upper[layout.idx_peak()] = member.conn_limit_kwh / dt;

    if design == Design::D2 {
        for s in 0..t {
            let icom = layout.idx_community_import(s);
            let ecom = layout.idx_community_export(s);
            let iret = layout.idx_retail_import(s);
            let eret = layout.idx_retail_export(s);
            rows.push(SparseRow::le(
                vec![(ecom, 1.0), (layout.idx_export(s), -1.0)],
                0.0,
                ConstraintFamily::CommunitySale,
            ));
            rows.push(SparseRow::le(
                vec![(icom, 1.0), (layout.idx_import(s), -1.0)],
                0.0,
                ConstraintFamily::CommunityPurchase,
            ));
            rows.push(SparseRow::eq(
                vec![(iret, 1.0), (icom, 1.0), (layout.idx_import(s), -1.0)],
                0.0,
                ConstraintFamily::RetailImportSplit,
            ));
            rows.push(SparseRow::eq(
                vec![(eret, 1.0), (ecom, 1.0), (layout.idx_export(s), -1.0)],
                0.0,
                ConstraintFamily::RetailExportSplit,
            ));
        }
    }

    LinearConstraintBlock { num_vars: n, rows, var_lower, var_upper }
}

/// Design-D2 virtual flows of one member.
#[derive(Debug, Clone, PartialEq)]
pub struct D2Flows {
    pub community_import: Vec<f64>,
    pub community_export: Vec<f64>,
    pub retail_import: Vec<f64>,
    pub retail_export: Vec<f64>,
}

/// One member's decision vector in structured form.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    /// Appliance energy per appliance and step (kWh).
    pub appliance_energy: Vec<Vec<f64>>,
    /// Battery power per step (kW, charging positive); None without battery.
    pub storage_power: Option<Vec<f64>>,
    /// Positive net load l⁺ (kWh).
    pub import_kwh: Vec<f64>,
    /// Negative net load l⁻ (kWh).
    pub export_kwh: Vec<f64>,
    /// Daily peak import power auxiliary (kW).
    pub peak_kw: f64,
    /// Virtual flows (design D2 only).
    pub flows: Option<D2Flows>,
}

impl Schedule {
    /// The all-idle schedule: appliances off, battery idle, net load split
    /// from the base profile. Feasible only for members without appliance
    /// energy needs; used as a structural placeholder in tests.
    pub fn zeros(member: &MemberAssets, design: Design, horizon: &Horizon) -> Schedule {
        let t = horizon.steps;
        Schedule {
            appliance_energy: vec![vec![0.0; t]; member.appliances.len()],
            storage_power: member.battery.as_ref().map(|_| vec![0.0; t]),
            import_kwh: vec![0.0; t],
            export_kwh: vec![0.0; t],
            peak_kw: 0.0,
            flows: (design == Design::D2).then(|| D2Flows {
                community_import: vec![0.0; t],
                community_export: vec![0.0; t],
                retail_import: vec![0.0; t],
                retail_export: vec![0.0; t],
            }),
        }
    }

    /// Signed net load at step `t` (kWh).
    pub fn net_load_kwh(&self, t: usize) -> f64 {
        self.import_kwh[t] - self.export_kwh[t]
    }

    /// Extract from a flat decision vector.
    pub fn from_vector(layout: &MemberLayout, z: &[f64]) -> Schedule {
        assert_eq!(z.len(), layout.count());
        let t = layout.steps;
        let appliance_energy = (0..layout.num_appliances)
            .map(|a| (0..t).map(|s| z[layout.idx_appliance(a, s)]).collect())
            .collect();
        let storage_power = layout
            .has_battery
            .then(|| (0..t).map(|s| z[layout.idx_storage_power(s)]).collect());
        let flows = (layout.design == Design::D2).then(|| D2Flows {
            community_import: (0..t).map(|s| z[layout.idx_community_import(s)]).collect(),
            community_export: (0..t).map(|s| z[layout.idx_community_export(s)]).collect(),
            retail_import: (0..t).map(|s| z[layout.idx_retail_import(s)]).collect(),
            retail_export: (0..t).map(|s| z[layout.idx_retail_export(s)]).collect(),
        });
        Schedule {
            appliance_energy,
            storage_power,
            import_kwh: (0..t).map(|s| z[layout.idx_import(s)]).collect(),
            export_kwh: (0..t).map(|s| z[layout.idx_export(s)]).collect(),
            peak_kw: z[layout.idx_peak()],
            flows,
        }
    }

    /// Flatten back into the layout's vector form. The state of charge is
    /// reconstructed from the storage powers.
    pub fn to_vector(&self, layout: &MemberLayout, member: &MemberAssets, dt: f64) -> Vec<f64> {
        let t = layout.steps;
        let mut z = vec![0.0; layout.count()];
        for a in 0..layout.num_appliances {
            for s in 0..t {
                z[layout.idx_appliance(a, s)] = self.appliance_energy[a][s];
            }
        }
        if layout.has_battery {
            let power = self.storage_power.as_ref().expect("battery member without storage power");
            let mut soc = member.battery.as_ref().unwrap().soc_init_kwh;
            for s in 0..t {
                z[layout.idx_storage_power(s)] = power[s];
                soc += power[s] * dt;
                z[layout.idx_soc(s)] = soc;
            }
        }
        for s in 0..t {
            z[layout.idx_import(s)] = self.import_kwh[s];
            z[layout.idx_export(s)] = self.export_kwh[s];
        }
        z[layout.idx_peak()] = self.peak_kw;
        if layout.design == Design::D2 {
            let flows = self.flows.as_ref().expect("design D2 schedule without flows");
            for s in 0..t {
                z[layout.idx_community_import(s)] = flows.community_import[s];
                z[layout.idx_community_export(s)] = flows.community_export[s];
                z[layout.idx_retail_import(s)] = flows.retail_import[s];
                z[layout.idx_retail_export(s)] = flows.retail_export[s];
            }
        }
        z
    }
}

/// Net load of one member at step `t` from first principles (Eq.-level
/// recomputation, not the stored split): returns `(l, l⁺, l⁻)`.
pub fn net_load(schedule: &Schedule, member: &MemberAssets, dt: f64, t: usize) -> (f64, f64, f64) {
    let mut l = member.base_load[t] - member.generation[t];
    for x in &schedule.appliance_energy {
        l += x[t];
    }
    if let Some(s) = &schedule.storage_power {
        l += s[t] * dt;
    }
    (l, l.max(0.0), (-l).max(0.0))
}

/// All members' schedules plus the aggregate they induce.
#[derive(Debug, Clone, PartialEq)]
pub struct CommunityProfile {
    pub design: Design,
    pub schedules: Vec<Schedule>,
}

impl CommunityProfile {
    /// Aggregate net load L at each step (kWh).
    pub fn aggregate_net_load(&self, steps: usize) -> Vec<f64> {
        let mut total = vec![0.0; steps];
        for sched in &self.schedules {
            for t in 0..steps {
                total[t] += sched.net_load_kwh(t);
            }
        }
        total
    }
}

/// Residual of the community balance constraint per step:
/// Σᵢ e_com − Σᵢ i_com. Errors on design-D1 profiles.
pub fn shared_constraint_residual(
    profile: &CommunityProfile,
    steps: usize,
) -> Result<Vec<f64>, ModelError> {
    if profile.design != Design::D2 {
        return Err(ModelError::DesignMismatch { expected: Design::D2, found: profile.design });
    }
    let mut residual = vec![0.0; steps];
    for sched in &profile.schedules {
        let flows = sched
            .flows
            .as_ref()
            .ok_or_else(|| ModelError::Inconsistent("D2 schedule missing flows".into()))?;
        for t in 0..steps {
            residual[t] += flows.community_export[t] - flows.community_import[t];
        }
    }
    Ok(residual)
}

/// Per-family worst violation found by the feasibility audit.
#[derive(Debug, Clone)]
pub struct FamilyViolation {
    pub family: ConstraintFamily,
    pub violation: f64,
    pub member: Option<String>,
    pub step: Option<usize>,
}

/// Outcome of auditing a profile against the model equations.
#[derive(Debug, Clone)]
pub struct FeasibilityReport {
    pub tolerance: f64,
    pub worst: Vec<FamilyViolation>,
}

impl FeasibilityReport {
    pub fn max_violation(&self) -> f64 {
        self.worst.iter().map(|v| v.violation).fold(0.0, f64::max)
    }

    pub fn is_feasible(&self) -> bool {
        self.max_violation() <= self.tolerance
    }

    pub fn violation_of(&self, family: ConstraintFamily) -> f64 {
        self.worst
            .iter()
            .find(|v| v.family == family)
            .map(|v| v.violation)
            .unwrap_or(0.0)
    }

    /// Families violated beyond tolerance, worst first.
    pub fn offenders(&self) -> Vec<&FamilyViolation> {
        let mut out: Vec<&FamilyViolation> =
            self.worst.iter().filter(|v| v.violation > self.tolerance).collect();
        out.sort_by(|a, b| b.violation.total_cmp(&a.violation));
        out
    }
}

impl std::fmt::Display for FeasibilityReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_feasible() {
            write!(f, "feasible (max violation {:.3e} ≤ {:.1e})", self.max_violation(), self.tolerance)
        } else {
            writeln!(f, "infeasible at tolerance {:.1e}:", self.tolerance)?;
            for v in self.offenders() {
                write!(f, "  {}: {:.3e}", v.family, v.violation)?;
                if let Some(m) = &v.member {
                    write!(f, " (member {m}")?;
                    if let Some(t) = v.step {
                        write!(f, ", step {t}")?;
                    }
                    write!(f, ")")?;
                }
                writeln!(f)?;
            }
            Ok(())
        }
    }
}

/// Audit a profile against every model equation, recomputed directly from
/// the scenario data (independent of the constraint-block builder).
pub fn check_feasibility(
    profile: &CommunityProfile,
    scenario: &Scenario,
    design: Design,
    tol: f64,
) -> Result<FeasibilityReport, ModelError> {
    if profile.design != design {
        return Err(ModelError::DesignMismatch { expected: design, found: profile.design });
    }
    if profile.schedules.len() != scenario.num_members() {
        return Err(ModelError::Inconsistent(format!(
            "{} schedules for {} members",
            profile.schedules.len(),
            scenario.num_members()
        )));
    }
    let t_steps = scenario.steps();
    let dt = scenario.dt();
    let mut worst: std::collections::HashMap<ConstraintFamily, FamilyViolation> =
        std::collections::HashMap::new();
    let mut record = |family: ConstraintFamily, violation: f64, member: Option<&str>, step: Option<usize>| {
        let entry = worst.entry(family).or_insert(FamilyViolation {
            family,
            violation: 0.0,
            member: None,
            step: None,
        });
        if violation > entry.violation {
            entry.violation = violation;
            entry.member = member.map(|s| s.to_string());
            entry.step = step;
        }
    };

    for (member, sched) in scenario.members.iter().zip(&profile.schedules) {
        if sched.appliance_energy.len() != member.appliances.len() {
            return Err(ModelError::Inconsistent(format!(
                "member {}: schedule has {} appliances, assets have {}",
                member.id,
                sched.appliance_energy.len(),
                member.appliances.len()
            )));
        }
        if sched.storage_power.is_some() != member.battery.is_some() {
            return Err(ModelError::Inconsistent(format!(
                "member {}: storage presence mismatch",
                member.id
            )));
        }
        let id = member.id.as_str();
        for t in 0..t_steps {
            let (l, _, _) = net_load(sched, member, dt, t);
            let identity = (sched.import_kwh[t] - sched.export_kwh[t] - l).abs();
            record(ConstraintFamily::NetLoadIdentity, identity, Some(id), Some(t));
            record(
                ConstraintFamily::PeakBound,
                (sched.import_kwh[t] / dt - sched.peak_kw).max(0.0),
                Some(id),
                Some(t),
            );
            record(
                ConstraintFamily::ImportCap,
                (sched.import_kwh[t] - member.conn_limit_kwh).max(0.0),
                Some(id),
                Some(t),
            );
            record(
                ConstraintFamily::ExportCap,
                (sched.export_kwh[t] - member.generation[t]).max(0.0),
                Some(id),
                Some(t),
            );
            record(
                ConstraintFamily::Nonnegativity,
                (-sched.import_kwh[t]).max(0.0).max((-sched.export_kwh[t]).max(0.0)),
                Some(id),
                Some(t),
            );
        }
        record(
            ConstraintFamily::PeakBound,
            (sched.peak_kw - member.conn_limit_kwh / dt).max(0.0),
            Some(id),
            None,
        );
        for (a, app) in member.appliances.iter().enumerate() {
            let total: f64 = (0..t_steps)
                .filter(|&s| app.window[s])
                .map(|s| sched.appliance_energy[a][s])
                .sum();
            record(ConstraintFamily::ApplianceEnergy, (total - app.energy_kwh).abs(), Some(id), None);
            for t in 0..t_steps {
                let x = sched.appliance_energy[a][t];
                let cap = if app.window[t] { app.power_max_kw * dt } else { 0.0 };
                record(
                    ConstraintFamily::AppliancePower,
                    (x - cap).max(0.0).max(-x.min(0.0)),
                    Some(id),
                    Some(t),
                );
            }
        }
        if let (Some(batt), Some(power)) = (&member.battery, &sched.storage_power) {
            let mut soc = batt.soc_init_kwh;
            for t in 0..t_steps {
                record(
                    ConstraintFamily::StoragePower,
                    (power[t] - batt.charge_max_kw).max(0.0).max((-batt.discharge_max_kw - power[t]).max(0.0)),
                    Some(id),
                    Some(t),
                );
                soc += power[t] * dt;
                record(
                    ConstraintFamily::StorageSoc,
                    (soc - batt.capacity_kwh).max(0.0).max((-soc).max(0.0)),
                    Some(id),
                    Some(t),
                );
            }
            record(ConstraintFamily::StorageReturn, (soc - batt.soc_init_kwh).abs(), Some(id), None);
        }
        if design == Design::D2 {
            let flows = sched
                .flows
                .as_ref()
                .ok_or_else(|| ModelError::Inconsistent(format!("member {id}: missing flows")))?;
            for t in 0..t_steps {
                let neg = [
                    flows.community_import[t],
                    flows.community_export[t],
                    flows.retail_import[t],
                    flows.retail_export[t],
                ]
                .iter()
                .map(|v| (-v).max(0.0))
                .fold(0.0, f64::max);
                record(ConstraintFamily::Nonnegativity, neg, Some(id), Some(t));
                record(
                    ConstraintFamily::CommunitySale,
                    (flows.community_export[t] - sched.export_kwh[t]).max(0.0),
                    Some(id),
                    Some(t),
                );
                record(
                    ConstraintFamily::CommunityPurchase,
                    (flows.community_import[t] - sched.import_kwh[t]).max(0.0),
                    Some(id),
                    Some(t),
                );
                record(
                    ConstraintFamily::RetailImportSplit,
                    (flows.retail_import[t] - (sched.import_kwh[t] - flows.community_import[t])).abs(),
                    Some(id),
                    Some(t),
                );
                record(
                    ConstraintFamily::RetailExportSplit,
                    (flows.retail_export[t] - (sched.export_kwh[t] - flows.community_export[t])).abs(),
                    Some(id),
                    Some(t),
                );
            }
        }
    }
    if design == Design::D2 {
        let residual = shared_constraint_residual(profile, t_steps)?;
        for (t, r) in residual.iter().enumerate() {
            record(ConstraintFamily::CommunityBalance, r.abs(), None, Some(t));
        }
    }

    let mut list: Vec<FamilyViolation> = worst.into_values().collect();
    list.sort_by(|a, b| b.violation.total_cmp(&a.violation));
    Ok(FeasibilityReport { tolerance: tol, worst: list })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{Battery, Horizon, MemberAssets, Tariffs};

    fn member_with(appliances: usize, battery: bool, t: usize) -> MemberAssets {
        MemberAssets {
            id: "m001".into(),
            base_load: vec![0.5; t],
            generation: vec![0.2; t],
            appliances: (0..appliances)
                .map(|_| crate::scenario::Appliance {
                    window: vec![true; t],
                    energy_kwh: 1.0,
                    power_max_kw: 2.0,
                })
                .collect(),
            battery: battery.then(|| Battery {
                charge_max_kw: 5.0,
                discharge_max_kw: 5.0,
                capacity_kwh: 14.0,
                soc_init_kwh: 7.0,
            }),
            conn_limit_kwh: 10.0,
        }
    }

    #[test]
    fn layout_counts_match_hand_derivation() {
        let h = Horizon { steps: 24, dt_hours: 1.0 };
        let m = member_with(1, true, 24);
        assert_eq!(variable_layout(&m, Design::D1, &h).count(), 121);
        assert_eq!(variable_layout(&m, Design::D2, &h).count(), 217);

        let h1 = Horizon { steps: 1, dt_hours: 1.0 };
        let bare = member_with(0, false, 1);
        let layout = variable_layout(&bare, Design::D1, &h1);
        assert_eq!(layout.count(), 3);
        assert_eq!(layout.names(), vec!["lpos[0]", "lneg[0]", "peak"]);
    }

    #[test]
    fn no_battery_means_no_storage_rows() {
        let h = Horizon { steps: 3, dt_hours: 1.0 };
        let m = member_with(1, false, 3);
        let block = individual_constraints(&m, Design::D1, &h);
        assert!(block
            .rows
            .iter()
            .all(|r| r.family != ConstraintFamily::StorageSoc && r.family != ConstraintFamily::StorageReturn));
    }

    #[test]
    fn zero_window_appliance_is_pinned_to_zero() {
        let h = Horizon { steps: 2, dt_hours: 1.0 };
        let mut m = member_with(1, false, 2);
        m.appliances[0].window = vec![false, false];
        m.appliances[0].energy_kwh = 0.0;
        let block = individual_constraints(&m, Design::D1, &h);
        let layout = variable_layout(&m, Design::D1, &h);
        assert_eq!(block.var_upper[layout.idx_appliance(0, 0)], 0.0);
        assert_eq!(block.var_upper[layout.idx_appliance(0, 1)], 0.0);
        let energy_row = block
            .rows
            .iter()
            .find(|r| r.family == ConstraintFamily::ApplianceEnergy)
            .unwrap();
        assert!(energy_row.coeffs.is_empty());
        assert_eq!(energy_row.lower, 0.0);
    }

    #[test]
    fn storage_rows_encode_soc_corridor_and_return() {
        // battery 5 kW / 14 kWh / initial 7 kWh over two unit steps:
        // 0 ≤ 7 + s1 ≤ 14 and s1 + s2 = 0
        let h = Horizon { steps: 2, dt_hours: 1.0 };
        let m = member_with(0, true, 2);
        let layout = variable_layout(&m, Design::D1, &h);
        let block = individual_constraints(&m, Design::D1, &h);
        assert_eq!(block.var_lower[layout.idx_soc(0)], 0.0);
        assert_eq!(block.var_upper[layout.idx_soc(0)], 14.0);
        let soc0 = block
            .rows
            .iter()
            .find(|r| r.family == ConstraintFamily::StorageSoc)
            .unwrap();
        // soc[0] - dt·s[0] = 7  ⇔  soc[0] = 7 + s[0]
        assert_eq!(soc0.lower, 7.0);
        assert!(soc0.coeffs.contains(&(layout.idx_soc(0), 1.0)));
        assert!(soc0.coeffs.contains(&(layout.idx_storage_power(0), -1.0)));
        let ret = block
            .rows
            .iter()
            .find(|r| r.family == ConstraintFamily::StorageReturn)
            .unwrap();
        assert_eq!(ret.coeffs, vec![(layout.idx_soc(1), 1.0)]);
        assert_eq!(ret.lower, 7.0);
    }

    #[test]
    fn net_load_split_examples() {
        let h = Horizon { steps: 1, dt_hours: 1.0 };
        let mut m = member_with(1, true, 1);
        let mut sched = Schedule::zeros(&m, Design::D1, &h);

        m.base_load = vec![0.0];
        m.generation = vec![0.0];
        let (l, lp, ln) = net_load(&sched, &m, 1.0, 0);
        assert_eq!((l, lp, ln), (0.0, 0.0, 0.0));

        m.base_load = vec![0.5];
        m.generation = vec![0.3];
        sched.appliance_energy[0][0] = 1.0;
        sched.storage_power.as_mut().unwrap()[0] = 1.0;
        let (l, lp, ln) = net_load(&sched, &m, 1.0, 0);
        assert!((l - 2.2).abs() < 1e-12);
        assert!((lp - 2.2).abs() < 1e-12);
        assert_eq!(ln, 0.0);

        m.base_load = vec![0.2];
        m.generation = vec![1.0];
        sched.appliance_energy[0][0] = 0.0;
        sched.storage_power.as_mut().unwrap()[0] = 0.0;
        let (l, lp, ln) = net_load(&sched, &m, 1.0, 0);
        assert!((l + 0.8).abs() < 1e-12);
        assert_eq!(lp, 0.0);
        assert!((ln - 0.8).abs() < 1e-12);
    }

    fn d2_profile_two_members(e1: f64, i2: f64, t: usize) -> (Scenario, CommunityProfile) {
        let scenario = crate::scenario::Scenario {
            horizon: Horizon { steps: t, dt_hours: 1.0 },
            tariffs: Tariffs::flat(t, 0.16, 0.04, 0.13, 0.05, 0.001, 0.1),
            members: vec![
                MemberAssets {
                    id: "a".into(),
                    base_load: vec![0.0; t],
                    generation: vec![2.0; t],
                    appliances: vec![],
                    battery: None,
                    conn_limit_kwh: 10.0,
                },
                MemberAssets {
                    id: "b".into(),
                    base_load: vec![2.0; t],
                    generation: vec![0.0; t],
                    appliances: vec![],
                    battery: None,
                    conn_limit_kwh: 10.0,
                },
            ],
        };
        let mut profile = CommunityProfile {
            design: Design::D2,
            schedules: scenario
                .members
                .iter()
                .map(|m| Schedule::zeros(m, Design::D2, &scenario.horizon))
                .collect(),
        };
        for t_i in 0..t {
            profile.schedules[0].export_kwh[t_i] = 2.0;
            profile.schedules[1].import_kwh[t_i] = 2.0;
        }
        profile.schedules[1].peak_kw = 2.0;
        let f0 = profile.schedules[0].flows.as_mut().unwrap();
        f0.community_export[0] = e1;
        for t_i in 0..t {
            f0.retail_export[t_i] = 2.0 - f0.community_export[t_i];
        }
        let f1 = profile.schedules[1].flows.as_mut().unwrap();
        f1.community_import[0] = i2;
        for t_i in 0..t {
            f1.retail_import[t_i] = 2.0 - f1.community_import[t_i];
        }
        (scenario, profile)
    }

    #[test]
    fn shared_residual_examples() {
        let (_, profile) = d2_profile_two_members(0.0, 0.0, 2);
        let r = shared_constraint_residual(&profile, 2).unwrap();
        assert_eq!(r, vec![0.0, 0.0]);

        let (_, profile) = d2_profile_two_members(1.0, 1.0, 2);
        let r = shared_constraint_residual(&profile, 2).unwrap();
        assert_eq!(r, vec![0.0, 0.0]);

        let (_, profile) = d2_profile_two_members(3.0f64.min(2.0), 1.5, 2);
        let r = shared_constraint_residual(&profile, 2).unwrap();
        assert!((r[0] - 0.5).abs() < 1e-12);

        let d1_profile = CommunityProfile { design: Design::D1, schedules: vec![] };
        assert!(matches!(
            shared_constraint_residual(&d1_profile, 2),
            Err(ModelError::DesignMismatch { .. })
        ));
    }

    #[test]
    fn feasibility_flags_constructed_violations() {
        let h = Horizon { steps: 2, dt_hours: 1.0 };
        let m = member_with(1, false, 2);
        let scenario = crate::scenario::Scenario {
            horizon: h,
            tariffs: Tariffs::flat(2, 0.16, 0.04, 0.13, 0.05, 0.001, 0.1),
            members: vec![m],
        };
        let mut sched = Schedule::zeros(&scenario.members[0], Design::D1, &h);
        // appliance energy short by 0.1 (needs 1.0, gets 0.9), identity kept
        sched.appliance_energy[0][0] = 0.9;
        sched.import_kwh = vec![0.5 - 0.2 + 0.9, 0.3];
        sched.peak_kw = 1.2;
        let profile = CommunityProfile { design: Design::D1, schedules: vec![sched] };
        let report = check_feasibility(&profile, &scenario, Design::D1, 1e-6).unwrap();
        assert!(!report.is_feasible());
        assert!((report.violation_of(ConstraintFamily::ApplianceEnergy) - 0.1).abs() < 1e-12);
        assert_eq!(report.offenders()[0].family, ConstraintFamily::ApplianceEnergy);

        // unbalanced D2 community
        let (scenario2, profile2) = d2_profile_two_members(2.0, 1.5, 2);
        let report2 = check_feasibility(&profile2, &scenario2, Design::D2, 1e-6).unwrap();
        assert!((report2.violation_of(ConstraintFamily::CommunityBalance) - 0.5).abs() < 1e-12);
    }
}
