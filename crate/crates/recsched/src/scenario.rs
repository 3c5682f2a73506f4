//! Community scenarios: members, profiles, tariffs and the day horizon.
//!
//! A scenario is a single human-readable TOML file with all profiles inline
//! (see `docs/scenario-format.md`). Loading always validates; the synthetic
//! generator produces scenarios that pass the same validation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Daily scheduling horizon: `steps` time steps of `dt_hours` each.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Horizon {
    pub steps: usize,
    pub dt_hours: f64,
}

impl Default for Horizon {
    fn default() -> Self {
        Horizon { steps: 24, dt_hours: 1.0 }
    }
}

/// Tariff and network-cost parameters, per time step where applicable.
///
/// `import`/`export` are the retail commodity prices, `local_import`/
/// `local_export` the community-pool prices (money/kWh). `alpha` prices the
/// upstream grid as alpha·(aggregate net load)² per step (money/kWh²);
/// `beta` penalizes each member's daily peak import power (money/kW).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tariffs {
    pub import: Vec<f64>,
    pub export: Vec<f64>,
    pub local_import: Vec<f64>,
    pub local_export: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
}

impl Tariffs {
    /// Flat tariffs, mostly for small tests.
    pub fn flat(steps: usize, import: f64, export: f64, local_import: f64, local_export: f64, alpha: f64, beta: f64) -> Self {
        Tariffs {
            import: vec![import; steps],
            export: vec![export; steps],
            local_import: vec![local_import; steps],
            local_export: vec![local_export; steps],
            alpha,
            beta,
        }
    }

    /// Default residential bi-hourly tariff set: off-peak between 21:00 and
    /// 04:00, peak otherwise, with constant network charges.
    pub fn default_bihourly(steps: usize) -> Self {
        let mut t = Tariffs::flat(steps, 0.16, 0.04, 0.13, 0.05, 0.00109488, 0.1096737);
        if steps == 24 {
            for h in 0..24 {
                if h >= 21 || h < 4 {
                    t.import[h] = 0.08;
                    t.export[h] = 0.02;
                    t.local_import[h] = 0.065;
                    t.local_export[h] = 0.032;
                }
            }
        }
        t
    }
}

/// One flexible appliance: a daily energy need schedulable inside a binary
/// availability window under a power cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Appliance {
    /// Availability per time step.
    pub window: Vec<bool>,
    /// Total energy the appliance must consume over the day (kWh).
    pub energy_kwh: f64,
    /// Maximum power draw while running (kW).
    pub power_max_kw: f64,
}

impl Appliance {
    /// Maximum energy schedulable inside the window.
    pub fn window_capacity_kwh(&self, dt_hours: f64) -> f64 {
        self.window.iter().filter(|&&w| w).count() as f64 * self.power_max_kw * dt_hours
    }
}

/// Simple lossless battery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Battery {
    pub charge_max_kw: f64,
    pub discharge_max_kw: f64,
    pub capacity_kwh: f64,
    pub soc_init_kwh: f64,
}

/// Static description of one community member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberAssets {
    pub id: String,
    /// Non-flexible load per step (kWh).
    pub base_load: Vec<f64>,
    /// Non-dispatchable generation per step (kWh).
    pub generation: Vec<f64>,
    #[serde(default)]
    pub appliances: Vec<Appliance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub battery: Option<Battery>,
    /// Connection limit on imported energy per step (kWh).
    pub conn_limit_kwh: f64,
}

/// A full community scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub horizon: Horizon,
    pub tariffs: Tariffs,
    #[serde(rename = "member")]
    pub members: Vec<MemberAssets>,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse scenario file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot serialize scenario: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("{location}: {message}")]
    Validation { location: String, message: String },
    #[error("member {member}, appliance {index}: energy {energy_kwh} kWh exceeds window capacity {capacity_kwh} kWh")]
    InfeasibleAppliance { member: String, index: usize, energy_kwh: f64, capacity_kwh: f64 },
}

fn invalid(location: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Validation { location: location.into(), message: message.into() }
}

impl Scenario {
    pub fn num_members(&self) -> usize {
        self.members.len()
    }

    pub fn steps(&self) -> usize {
        self.horizon.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon.dt_hours
    }

    /// Check every structural invariant; locations in errors name the
    /// member and field.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let t = self.horizon.steps;
        if t < 1 {
            return Err(invalid("horizon.steps", "must be at least 1"));
        }
        if !(self.horizon.dt_hours > 0.0) {
            return Err(invalid("horizon.dt_hours", "must be positive"));
        }
        let tar = &self.tariffs;
        for (name, v) in [
            ("import", &tar.import),
            ("export", &tar.export),
            ("local_import", &tar.local_import),
            ("local_export", &tar.local_export),
        ] {
            if v.len() != t {
                return Err(invalid(format!("tariffs.{name}"), format!("expected {t} entries, found {}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(invalid(format!("tariffs.{name}"), "entries must be finite and nonnegative"));
            }
        }
        for step in 0..t {
            if tar.export[step] >= tar.import[step] {
                return Err(invalid(
                    format!("tariffs.export[{step}]"),
                    "export price must be strictly below import price",
                ));
            }
            if tar.local_export[step] >= tar.local_import[step] {
                return Err(invalid(
                    format!("tariffs.local_export[{step}]"),
                    "local export price must be strictly below local import price",
                ));
            }
        }
        if !(tar.alpha.is_finite() && tar.alpha >= 0.0) {
            return Err(invalid("tariffs.alpha", "must be finite and nonnegative"));
        }
        if !(tar.beta.is_finite() && tar.beta >= 0.0) {
            return Err(invalid("tariffs.beta", "must be finite and nonnegative"));
        }
        if self.members.is_empty() {
            return Err(invalid("member", "at least one member is required"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.members {
            if m.id.is_empty() || !m.id.chars().all(|c| c.is_ascii_alphanumeric() || "_.-".contains(c)) {
                return Err(invalid(format!("member '{}'", m.id), "id must be nonempty [A-Za-z0-9_.-]"));
            }
            if !seen.insert(&m.id) {
                return Err(invalid(format!("member '{}'", m.id), "duplicate id"));
            }
            let loc = |field: &str| format!("member '{}'.{field}", m.id);
            for (name, v) in [("base_load", &m.base_load), ("generation", &m.generation)] {
                if v.len() != t {
                    return Err(invalid(loc(name), format!("expected {t} entries, found {}", v.len())));
                }
                if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
                    return Err(invalid(loc(name), "entries must be finite and nonnegative"));
                }
            }
            if !(m.conn_limit_kwh > 0.0 && m.conn_limit_kwh.is_finite()) {
                return Err(invalid(loc("conn_limit_kwh"), "must be positive"));
            }
            for (idx, a) in m.appliances.iter().enumerate() {
                if a.window.len() != t {
                    return Err(invalid(
                        format!("member '{}'.appliance[{idx}].window", m.id),
                        format!("expected {t} entries, found {}", a.window.len()),
                    ));
                }
                if !(a.energy_kwh >= 0.0 && a.energy_kwh.is_finite()) {
                    return Err(invalid(format!("member '{}'.appliance[{idx}].energy_kwh", m.id), "must be nonnegative"));
                }
                if !(a.power_max_kw >= 0.0 && a.power_max_kw.is_finite()) {
                    return Err(invalid(format!("member '{}'.appliance[{idx}].power_max_kw", m.id), "must be nonnegative"));
                }
                let cap = a.window_capacity_kwh(self.horizon.dt_hours);
                if a.energy_kwh > cap + 1e-9 {
                    return Err(ScenarioError::InfeasibleAppliance {
                        member: m.id.clone(),
                        index: idx,
                        energy_kwh: a.energy_kwh,
                        capacity_kwh: cap,
                    });
                }
            }
            if let Some(b) = &m.battery {
                if !(b.capacity_kwh >= 0.0 && b.capacity_kwh.is_finite()) {
                    return Err(invalid(loc("battery.capacity_kwh"), "must be nonnegative"));
                }
                if b.soc_init_kwh < 0.0 || b.soc_init_kwh > b.capacity_kwh {
                    return Err(invalid(loc("battery.soc_init_kwh"), "must lie in [0, capacity]"));
                }
                if b.charge_max_kw < 0.0 || b.discharge_max_kw < 0.0 {
                    return Err(invalid(loc("battery"), "charge/discharge limits must be nonnegative"));
                }
            }
        }
        Ok(())
    }

    /// Total generation over all members and steps (kWh).
    pub fn total_generation(&self) -> f64 {
        self.members.iter().map(|m| m.generation.iter().sum::<f64>()).sum()
    }

    /// Sub-scenario with one member removed (for marginal-cost billing).
    pub fn without_member(&self, index: usize) -> Scenario {
        let mut s = self.clone();
        s.members.remove(index);
        s
    }
}

/// Load and fully validate a scenario file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
    let scenario: Scenario = toml::from_str(&text)?;
    scenario.validate()?;
    Ok(scenario)
}

/// Write a scenario as TOML; `load_scenario` reads it back identically.
pub fn save_scenario(scenario: &Scenario, path: impl AsRef<Path>) -> Result<(), ScenarioError> {
    let path = path.as_ref();
    let text = toml::to_string(scenario)?;
    std::fs::write(path, text)
        .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
    Ok(())
}

/// PV day type for the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PvLevel {
    High,
    Low,
}

impl std::str::FromStr for PvLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "high" => Ok(PvLevel::High),
            "low" => Ok(PvLevel::Low),
            other => Err(format!("unknown pv level '{other}' (expected high|low)")),
        }
    }
}

fn gauss(h: f64, center: f64, width: f64) -> f64 {
    (-(h - center) * (h - center) / (2.0 * width * width)).exp()
}

/// Synthesize a deterministic community scenario.
///
/// Base loads follow a smooth double-peak daily curve with seeded noise;
/// PV follows a daylight bell curve scaled by an installed capacity drawn
/// from [0, 10] kWc (a fraction of members has none) and the day type.
/// Batteries go to `floor(battery_penetration · n_members)` members with the
/// initial state of charge at half capacity. Appliance windows and energies
/// are sampled feasible by construction.
pub fn generate_synthetic(
    seed: u64,
    n_members: usize,
    horizon: Horizon,
    pv_level: PvLevel,
    battery_penetration: f64,
) -> Scenario {
    assert!(n_members >= 1, "n_members must be at least 1");
    assert!((0.0..=1.0).contains(&battery_penetration), "battery_penetration must lie in [0, 1]");
    let t = horizon.steps;
    let dt = horizon.dt_hours;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hour = |step: usize| (step as f64 + 0.5) * 24.0 / t as f64;

    let mut members = Vec::with_capacity(n_members);
    for i in 0..n_members {
        let id = format!("m{:03}", i + 1);
        // double-peak base load
        let daily_total: f64 = rng.gen_range(8.0..50.0);
        let mut weights: Vec<f64> = (0..t)
            .map(|s| {
                let h = hour(s);
                0.38 * gauss(h, 7.5, 2.0) + 0.52 * gauss(h, 19.0, 2.6) + 0.10
            })
            .collect();
        let wsum: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= wsum);
        let base_load: Vec<f64> = weights
            .iter()
            .map(|w| (daily_total * w * (1.0 + rng.gen_range(-0.25..0.25))).max(0.0))
            .collect();

        // PV: bell over daylight, scaled by capacity and the day type
        let pv_cap: f64 = if rng.gen_bool(0.25) { 0.0 } else { rng.gen_range(0.0..10.0) };
        let day_factor = match pv_level {
            PvLevel::High => 0.75 * (1.0 + rng.gen_range(-0.08..0.08)),
            PvLevel::Low => 0.10 * (1.0 + rng.gen_range(-0.30..0.30)),
        };
        let generation: Vec<f64> = (0..t)
            .map(|s| {
                let h = hour(s);
                if pv_cap == 0.0 || !(6.0..19.0).contains(&h) {
                    0.0
                } else {
                    let shape = gauss(h, 12.5, 3.2);
                    (pv_cap * day_factor * shape * dt * (1.0 + rng.gen_range(-0.10..0.10))).max(0.0)
                }
            })
            .collect();

        // appliances: white goods, an EV and/or a fully flexible heat pump
        let mut appliances = Vec::new();
        if !rng.gen_bool(0.15) {
            let count = rng.gen_range(1..=3usize);
            for _ in 0..count {
                let kind = rng.gen_range(0..3u8);
                let (power, win_len, evening) = match kind {
                    0 => (rng.gen_range(1.0..2.5), rng.gen_range(4..=10usize), false), // white goods
                    1 => (rng.gen_range(3.7..7.4), rng.gen_range(6..=10usize), true),  // EV
                    _ => (rng.gen_range(1.5..3.0), t, false),                          // heat pump
                };
                let win_len = win_len.min(t);
                let start = if win_len == t {
                    0
                } else if evening {
                    (rng.gen_range(17.0..21.0) * t as f64 / 24.0) as usize % t
                } else {
                    rng.gen_range(0..t)
                };
                let mut window = vec![false; t];
                for k in 0..win_len {
                    window[(start + k) % t] = true;
                }
                let capacity = win_len as f64 * power * dt;
                let energy = rng.gen_range(0.2..0.7) * capacity;
                appliances.push(Appliance { window, energy_kwh: energy, power_max_kw: power });
            }
        }

        let max_base = base_load.iter().cloned().fold(0.0f64, f64::max);
        let appliance_power: f64 = appliances.iter().map(|a| a.power_max_kw).sum();
        let conn_limit = (1.2 * (max_base + appliance_power * dt)).max(12.0 * dt);

        members.push(MemberAssets {
            id,
            base_load,
            generation,
            appliances,
            battery: None,
            conn_limit_kwh: conn_limit,
        });
    }

    // assign batteries to a seeded random subset
    let n_batt = (battery_penetration * n_members as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n_members).collect();
    order.shuffle(&mut rng);
    for &idx in order.iter().take(n_batt) {
        let capacity = *[7.0, 10.0, 14.0].choose(&mut rng).unwrap();
        let power = *[3.0, 5.0].choose(&mut rng).unwrap();
        members[idx].battery = Some(Battery {
            charge_max_kw: power,
            discharge_max_kw: power,
            capacity_kwh: capacity,
            soc_init_kwh: 0.5 * capacity,
        });
    }

    let scenario =
        Scenario { horizon, tariffs: Tariffs::default_bihourly(t), members };
    debug_assert!(scenario.validate().is_ok());
    scenario
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_scenario() -> Scenario {
        Scenario {
            horizon: Horizon { steps: 2, dt_hours: 1.0 },
            tariffs: Tariffs::flat(2, 0.16, 0.04, 0.13, 0.05, 0.001, 0.1),
            members: vec![MemberAssets {
                id: "m001".into(),
                base_load: vec![0.0, 0.0],
                generation: vec![0.0, 0.0],
                appliances: vec![],
                battery: None,
                conn_limit_kwh: 10.0,
            }],
        }
    }

    #[test]
    fn minimal_file_round_trip() {
        let s = tiny_scenario();
        s.validate().unwrap();
        assert_eq!(s.num_members(), 1);
        assert_eq!(s.steps(), 2);
        let dir = std::env::temp_dir().join("recsched-scenario-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("tiny.toml");
        save_scenario(&s, &path).unwrap();
        let loaded = load_scenario(&path).unwrap();
        assert_eq!(s, loaded);
    }

    #[test]
    fn rejects_export_above_import() {
        let mut s = tiny_scenario();
        s.tariffs.export[1] = 0.2;
        match s.validate() {
            Err(ScenarioError::Validation { location, .. }) => {
                assert!(location.contains("export[1]"), "{location}")
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn accepts_default_bihourly_tariffs() {
        let mut s = tiny_scenario();
        s.horizon = Horizon::default();
        s.tariffs = Tariffs::default_bihourly(24);
        s.members[0].base_load = vec![0.0; 24];
        s.members[0].generation = vec![0.0; 24];
        assert_eq!(s.tariffs.import[12], 0.16);
        assert_eq!(s.tariffs.import[22], 0.08);
        assert_eq!(s.tariffs.alpha, 0.00109488);
        assert_eq!(s.tariffs.beta, 0.1096737);
        s.validate().unwrap();
    }

    #[test]
    fn infeasible_appliance_is_reported() {
        let mut s = tiny_scenario();
        s.members[0].appliances.push(Appliance {
            window: vec![true, false],
            energy_kwh: 5.0,
            power_max_kw: 1.0,
        });
        match s.validate() {
            Err(ScenarioError::InfeasibleAppliance { member, index, .. }) => {
                assert_eq!(member, "m001");
                assert_eq!(index, 0);
            }
            other => panic!("expected infeasible appliance, got {other:?}"),
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let a = generate_synthetic(1, 2, Horizon::default(), PvLevel::Low, 0.5);
        let b = generate_synthetic(1, 2, Horizon::default(), PvLevel::Low, 0.5);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_penetration_means_no_batteries() {
        let s = generate_synthetic(3, 8, Horizon::default(), PvLevel::High, 0.0);
        assert!(s.members.iter().all(|m| m.battery.is_none()));
    }

    #[test]
    fn generated_scenarios_validate() {
        let s = generate_synthetic(7, 55, Horizon::default(), PvLevel::High, 0.5);
        s.validate().unwrap();
        assert_eq!(s.num_members(), 55);
        let n_batt = s.members.iter().filter(|m| m.battery.is_some()).count();
        assert_eq!(n_batt, 27);
        for m in &s.members {
            if let Some(b) = &m.battery {
                assert_eq!(b.soc_init_kwh, 0.5 * b.capacity_kwh);
            }
        }
        // members without PV have identically zero generation
        assert!(s
            .members
            .iter()
            .filter(|m| m.generation.iter().all(|&g| g == 0.0))
            .count() > 0);
    }
}
