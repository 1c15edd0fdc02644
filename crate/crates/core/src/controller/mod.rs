//! Closed-loop shielding controller.
//!
//! Each protected block has a co-located noise generator. Per sample the
//! controller strips its own injected heat from the sensor reading, tracks
//! the block's recent temperature range, picks a threshold `T_th` from the
//! requested security level, and drives the generator so the block never
//! reads below `T_th`. The power table bounds the command; the gain law
//! (proportional or PID) modulates within that bound.

mod run;
mod tables;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Trace, Unit};
use crate::thermal::{map_power, steady_state, ThermalNetwork};

pub use run::{run_shielded, ShieldInputs, ShieldPair, ShieldedRun, ThresholdPolicy};
pub use tables::{
    default_increments, Lookup, PTable, TTable, DEFAULT_BASE_INCREMENT, DEFAULT_INCREMENT_STEP,
    DEFAULT_LEVELS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    Proportional,
    Pid,
    /// One-interval model-based tracking over all generators jointly.
    Predictive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub security_level: usize,
    /// Samples between range updates and threshold re-selection.
    pub adjustment_interval: usize,
    pub mode: ControlMode,
    /// W/°C.
    pub kp: f64,
    /// W/°C per sample.
    pub ki: f64,
    /// W/°C per sample.
    pub kd: f64,
    /// Per-generator cap in W.
    pub power_budget: f64,
    pub thermal_limit: f64,
    /// Length in samples of the sliding range window.
    pub range_window: usize,
    /// Use the hottest protected block's `T_max` for every block.
    pub global_range: bool,
    /// Lower the security level for one interval after any cell exceeds
    /// `thermal_limit`.
    pub throttling: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            security_level: 0,
            adjustment_interval: 50,
            mode: ControlMode::Proportional,
            kp: 1.0,
            ki: 0.0,
            kd: 0.0,
            power_budget: 10.0,
            thermal_limit: 110.0,
            range_window: 500,
            global_range: false,
            throttling: true,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, g) in [("kp", self.kp), ("ki", self.ki), ("kd", self.kd)] {
            if !(g.is_finite() && g >= 0.0) {
                return Err(Error::validation(format!(
                    "gain {name} must be finite and >= 0"
                )));
            }
        }
        if !(self.power_budget.is_finite() && self.power_budget >= 0.0) {
            return Err(Error::validation("power_budget must be finite and >= 0"));
        }
        if self.thermal_limit.is_nan() {
            return Err(Error::validation("thermal_limit is NaN"));
        }
        if self.adjustment_interval == 0 || self.range_window == 0 {
            return Err(Error::validation(
                "adjustment_interval and range_window must be >= 1",
            ));
        }
        Ok(())
    }
}

/// Controller memory for one protected block.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BlockState {
    /// `(T_min, T_max)` once the first adjustment boundary has passed.
    pub range: Option<(f64, f64)>,
    pub t_th: Option<f64>,
    pub last_command: f64,
    history: VecDeque<f64>,
    samples: usize,
    integral: f64,
    prev_error: Option<f64>,
}

impl BlockState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn history(&self) -> &VecDeque<f64> {
        &self.history
    }

    /// Samples left before the next range update.
    pub fn adjustment_countdown(&self, config: &ControllerConfig) -> usize {
        config.adjustment_interval - self.samples % config.adjustment_interval
    }

    /// Appends `t_block` to the history; at every adjustment boundary the
    /// range is recomputed over the sliding window. Returns whether it was.
    pub fn update_range(&mut self, t_block: f64, config: &ControllerConfig) -> bool {
        self.history.push_back(t_block);
        while self.history.len() > config.range_window {
            self.history.pop_front();
        }
        self.samples += 1;
        if self.samples % config.adjustment_interval != 0 {
            return false;
        }
        let lo = self.history.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self
            .history
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        self.range = Some((lo, hi));
        true
    }
}

/// Whole-run controller state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ControllerState {
    pub blocks: Vec<BlockState>,
    /// Samples left under a throttling request.
    pub throttle_remaining: usize,
}

impl ControllerState {
    pub fn new(num_blocks: usize) -> Self {
        ControllerState {
            blocks: vec![BlockState::new(); num_blocks],
            throttle_remaining: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockEstimate {
    pub t_block: f64,
    /// Increment attributed to the block's own generator.
    pub injected: f64,
    /// Set when the last command lies beyond the calibrated table.
    pub clamped: bool,
}

/// Recovers the unshielded block temperature by subtracting the increment
/// the last command produces in steady state.
pub fn estimate_block_temp(t_sensor: f64, last_command: f64, p_table: &PTable) -> BlockEstimate {
    let inj = p_table.inverse(last_command.max(0.0));
    BlockEstimate {
        t_block: t_sensor - inj.value,
        injected: inj.value,
        clamped: inj.clamped,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    pub t_th: f64,
    pub p_cap: f64,
    pub achieved_level: usize,
    /// No level satisfied the budget and thermal limit.
    pub infeasible: bool,
}

/// Walks down from `level` until a threshold fits the power budget and
/// the thermal limit. Levels above the table's top start at the top.
pub fn select_threshold(
    t_min: f64,
    t_max: f64,
    level: usize,
    config: &ControllerConfig,
    t_table: &TTable,
    p_table: &PTable,
) -> Result<Threshold> {
    if !(t_min <= t_max) {
        return Err(Error::validation(format!(
            "T_min {t_min} exceeds T_max {t_max}"
        )));
    }
    let mut last = None;
    for s in (0..=level.min(t_table.max_level())).rev() {
        let delta = t_table.lookup(s).unwrap();
        let t_th = if t_max - t_min < delta {
            t_max
        } else {
            t_min + delta
        };
        let p_cap = p_table.lookup(t_th - t_min).value;
        let choice = Threshold {
            t_th,
            p_cap,
            achieved_level: s,
            infeasible: false,
        };
        if p_cap > config.power_budget || t_th > config.thermal_limit {
            last = Some(choice);
            continue;
        }
        return Ok(choice);
    }
    let mut choice = last.expect("table has at least one level");
    choice.p_cap = choice.p_cap.min(config.power_budget);
    choice.infeasible = true;
    Ok(choice)
}

/// Generator power for one sample. Zero whenever the block is at or above
/// its threshold; never above `p_cap`.
pub fn generator_command(
    t_th: f64,
    t_block: f64,
    p_cap: f64,
    config: &ControllerConfig,
    state: &mut BlockState,
) -> f64 {
    let p_cap = p_cap.max(0.0);
    let error = t_th - t_block;
    let out = match config.mode {
        ControlMode::Proportional | ControlMode::Predictive => {
            (config.kp * error.max(0.0)).min(p_cap)
        }
        ControlMode::Pid => {
            state.integral = (state.integral + config.ki * error).clamp(0.0, p_cap);
            let deriv = state.prev_error.map_or(0.0, |p| config.kd * (error - p));
            state.prev_error = Some(error);
            if error <= 0.0 {
                0.0
            } else {
                (config.kp * error + state.integral + deriv).clamp(0.0, p_cap)
            }
        }
    };
    state.last_command = out;
    out
}

/// Steady-state increment at each protected block with every generator
/// held at each power level (idle protected blocks), inverted into one
/// power table per protected block.
pub fn calibrate_p_table(
    network: &ThermalNetwork,
    generators: &[String],
    protected: &[String],
    power_levels: &[f64],
) -> Result<Vec<PTable>> {
    if power_levels.first() != Some(&0.0) {
        return Err(Error::validation("power levels must start at 0 W"));
    }
    if power_levels.windows(2).any(|w| !(w[1] > w[0]))
        || power_levels.iter().any(|p| !p.is_finite())
    {
        return Err(Error::validation(
            "power levels must be finite and strictly ascending",
        ));
    }
    for g in generators {
        network.block_cells(g)?;
    }
    let cells = protected
        .iter()
        .map(|b| network.block_cells(b))
        .collect::<Result<Vec<_>>>()?;
    let base = steady_state(network, &vec![0.0; network.num_cells()])?;
    let base_t: Vec<f64> = cells.iter().map(|c| c.mean(&base.temperatures)).collect();
    let mut points: Vec<Vec<(f64, f64)>> = vec![vec![(0.0, 0.0)]; protected.len()];
    for &level in &power_levels[1..] {
        let power = map_power(generators.iter().map(|g| (g, level)), network)?;
        let s = steady_state(network, &power)?;
        for (b, c) in cells.iter().enumerate() {
            let delta = c.mean(&s.temperatures) - base_t[b];
            let prev = points[b].last().unwrap().0;
            if !(delta > prev) {
                return Err(Error::NonMonotoneCalibration { level });
            }
            points[b].push((delta, level));
        }
    }
    points.into_iter().map(PTable::new).collect()
}

/// Builds a security-level table from `(increment, SVF)` results: increments
/// whose SVF exceeds `original_svf` are dropped, the rest are ordered by
/// decreasing SVF so higher levels leak less. Falls back to the default
/// table (marked uncalibrated) when nothing survives.
pub fn calibrate_t_table(results: &[(f64, f64)], original_svf: f64) -> Result<TTable> {
    if results.is_empty() {
        return Err(Error::EmptyTable);
    }
    let mut kept: Vec<(f64, f64)> = results
        .iter()
        .copied()
        .filter(|&(_, s)| s <= original_svf)
        .collect();
    if kept.is_empty() {
        return Ok(TTable::default());
    }
    kept.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.total_cmp(&b.0)));
    TTable::new(kept.into_iter().map(|(d, _)| d).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxAvgDemand {
    /// Increment needed per block and sample (°C).
    pub delta: Trace,
    /// Generator power per block and sample (W), same channel names.
    pub power: Trace,
    /// Samples whose demand exceeded the table and was clamped.
    pub clamped: usize,
}

/// Open-loop flattening: each sample demands `max(trace) - trace(t)` of
/// extra heating per channel, converted to power through the table.
pub fn max_avg_injection(block_temps: &Trace, p_tables: &[PTable]) -> Result<MaxAvgDemand> {
    if block_temps.unit() != Unit::Celsius {
        return Err(Error::validation("max_avg needs a temperature trace"));
    }
    if p_tables.len() != block_temps.num_channels() {
        return Err(Error::LengthMismatch {
            expected: block_temps.num_channels(),
            actual: p_tables.len(),
        });
    }
    let maxima: Vec<f64> = (0..block_temps.num_channels())
        .map(|c| {
            block_temps
                .column(c)
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let mut clamped = 0;
    let mut delta = Vec::with_capacity(block_temps.values().len());
    let mut power = Vec::with_capacity(block_temps.values().len());
    for row in block_temps.rows() {
        for (c, t) in row.iter().enumerate() {
            let d = maxima[c] - t;
            let l = p_tables[c].lookup(d);
            clamped += l.clamped as usize;
            delta.push(d);
            power.push(l.value);
        }
    }
    let si = block_temps.sample_interval();
    let chans = block_temps.channels().to_vec();
    Ok(MaxAvgDemand {
        delta: Trace::new(si, chans.clone(), delta, Unit::Celsius)?,
        power: Trace::new(si, chans, power, Unit::Watts)?,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Block, BlockKind, Floorplan, GridSpec, Layer, LayerStack, Rect};
    use crate::thermal::build_network;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ControllerConfig {
        ControllerConfig {
            power_budget: 100.0,
            ..Default::default()
        }
    }

    #[test]
    fn estimate_subtracts_injected_increment() {
        let t = PTable::linear(2.0, 7.0).unwrap();
        assert_eq!(estimate_block_temp(48.0, 0.0, &t).t_block, 48.0);
        let e = estimate_block_temp(48.0, 7.0, &t);
        assert!((e.t_block - 44.5).abs() < 1e-12 && !e.clamped);
        let e = estimate_block_temp(48.0, 100.0, &t);
        assert!(e.clamped && e.injected == 7.0);
    }

    #[test]
    fn range_updates_only_at_boundaries() {
        let c = ControllerConfig {
            adjustment_interval: 3,
            range_window: 3,
            ..cfg()
        };
        let mut s = BlockState::new();
        assert!(!s.update_range(40.0, &c));
        assert!(!s.update_range(42.0, &c));
        assert_eq!(s.range, None);
        assert!(s.update_range(44.0, &c));
        assert_eq!(s.range, Some((40.0, 44.0)));
        assert!(!s.update_range(39.0, &c));
        assert_eq!(s.range, Some((40.0, 44.0)));
        assert_eq!(s.adjustment_countdown(&c), 2);
    }

    #[test]
    fn sliding_window_forgets_old_peak() {
        let c = ControllerConfig {
            adjustment_interval: 2,
            range_window: 3,
            ..cfg()
        };
        let mut s = BlockState::new();
        for t in [50.0, 41.0, 42.0, 43.0] {
            s.update_range(t, &c);
        }
        // window now [41, 42, 43]; 50 has slid out
        assert_eq!(s.range, Some((41.0, 43.0)));
    }

    #[test]
    fn threshold_examples() {
        let p = PTable::linear(1.0, 10.0).unwrap();
        let tt = TTable::default();
        let th = select_threshold(40.0, 48.0, 3, &cfg(), &tt, &p).unwrap();
        assert_eq!(th.t_th, 45.0);
        assert_eq!(th.achieved_level, 3);
        let th = select_threshold(40.0, 44.0, 3, &cfg(), &tt, &p).unwrap();
        assert_eq!(th.t_th, 44.0);
        // level 3 needs 5 W, level 2 needs 4.5 W
        let tight = ControllerConfig {
            power_budget: 4.6,
            ..cfg()
        };
        let th = select_threshold(40.0, 48.0, 3, &tight, &tt, &p).unwrap();
        assert_eq!(
            (th.achieved_level, th.t_th, th.infeasible),
            (2, 44.5, false)
        );
    }

    #[test]
    fn infeasible_everywhere_is_clamped_and_flagged() {
        let p = PTable::linear(1.0, 10.0).unwrap();
        let c = ControllerConfig {
            power_budget: 1.0,
            ..cfg()
        };
        let th = select_threshold(40.0, 48.0, 7, &c, &TTable::default(), &p).unwrap();
        assert!(th.infeasible);
        assert_eq!(th.achieved_level, 0);
        assert_eq!(th.p_cap, 1.0);
        assert!(select_threshold(45.0, 44.0, 0, &c, &TTable::default(), &p).is_err());
    }

    #[test]
    fn thermal_limit_forces_lower_level() {
        let p = PTable::linear(1.0, 10.0).unwrap();
        let c = ControllerConfig {
            thermal_limit: 44.2,
            ..cfg()
        };
        let th = select_threshold(40.0, 48.0, 7, &c, &TTable::default(), &p).unwrap();
        assert_eq!((th.achieved_level, th.t_th), (1, 44.0));
    }

    #[test]
    fn command_examples() {
        let c = ControllerConfig { kp: 2.0, ..cfg() };
        let mut s = BlockState::new();
        assert_eq!(generator_command(45.0, 46.0, 10.0, &c, &mut s), 0.0);
        assert_eq!(generator_command(45.0, 43.5, 10.0, &c, &mut s), 3.0);
        assert_eq!(s.last_command, 3.0);
        assert_eq!(generator_command(45.0, 0.0, 10.0, &c, &mut s), 10.0);
    }

    #[test]
    fn pid_integral_is_bounded_by_cap() {
        let c = ControllerConfig {
            mode: ControlMode::Pid,
            kp: 0.5,
            ki: 1.0,
            kd: 0.1,
            ..cfg()
        };
        let mut s = BlockState::new();
        for _ in 0..100 {
            let p = generator_command(50.0, 40.0, 3.0, &c, &mut s);
            assert!((0.0..=3.0).contains(&p));
        }
        assert!(s.integral <= 3.0);
        assert_eq!(generator_command(50.0, 51.0, 3.0, &c, &mut s), 0.0);
    }

    fn two_pair_network() -> ThermalNetwork {
        let stack = LayerStack {
            layers: vec![Layer::silicon(1e-4), Layer::silicon(5e-5)],
            die_width: 4.0,
            die_height: 2.0,
            ambient_temperature: 45.0,
            boundary_resistance_top: Some(1e-5),
            boundary_resistance_bottom: None,
        };
        let r0 = Rect::new(0.0, 0.0, 2.0, 2.0);
        let r1 = Rect::new(2.0, 0.0, 4.0, 2.0);
        let fp = Floorplan::new(vec![
            Block::new("a", r0, 0, BlockKind::Functional),
            Block::new("b", r1, 0, BlockKind::Functional),
            Block::new("ga", r0, 1, BlockKind::NoiseGenerator),
            Block::new("gb", r1, 1, BlockKind::NoiseGenerator),
        ]);
        build_network(&fp, &stack, GridSpec::new(2, 4)).unwrap()
    }

    #[test]
    fn calibration_is_linear_and_verified_by_a_direct_solve() {
        let net = two_pair_network();
        let gens = vec!["ga".to_string(), "gb".to_string()];
        let prot = vec!["a".to_string(), "b".to_string()];
        let tables = calibrate_p_table(&net, &gens, &prot, &[0.0, 1.0, 2.0, 4.0]).unwrap();
        let pts = tables[0].points();
        assert!((pts[2].0 - 2.0 * pts[1].0).abs() < 1e-9 * pts[2].0);
        assert!((pts[3].0 - 4.0 * pts[1].0).abs() < 1e-9 * pts[3].0);
        // mid-point query interpolates between 2 W and 4 W
        let mid = 0.5 * (pts[2].0 + pts[3].0);
        assert!((tables[0].lookup(mid).value - 3.0).abs() < 1e-9);
        // the table's 3 W increment matches an independent solve at 3 W
        let p = map_power([("ga", 3.0), ("gb", 3.0)], &net).unwrap();
        let hot = steady_state(&net, &p).unwrap();
        let rise = net.block_cells("a").unwrap().mean(&hot.temperatures) - 45.0;
        assert!((tables[0].inverse(3.0).value - rise).abs() < 1e-9);
        // so an estimate at that injection recovers the idle temperature
        let e = estimate_block_temp(45.0 + rise, 3.0, &tables[0]);
        assert!((e.t_block - 45.0).abs() < 1e-9);

        let single = calibrate_p_table(&net, &gens, &prot, &[0.0]).unwrap();
        assert_eq!(single[0].points(), &[(0.0, 0.0)]);
        assert!(calibrate_p_table(&net, &gens, &prot, &[1.0, 2.0]).is_err());
        assert!(calibrate_p_table(&net, &gens, &prot, &[0.0, 2.0, 1.0]).is_err());
    }

    #[test]
    fn t_table_calibration_rules() {
        let incs = default_increments();
        let decreasing: Vec<(f64, f64)> = incs
            .iter()
            .enumerate()
            .map(|(i, &d)| (d, 0.4 - 0.03 * i as f64))
            .collect();
        let t = calibrate_t_table(&decreasing, 0.5).unwrap();
        assert_eq!(t.increments(), TTable::default().increments());
        assert!(t.calibrated);

        let mut one_high = decreasing.clone();
        one_high[2].1 = 0.9;
        let t = calibrate_t_table(&one_high, 0.5).unwrap();
        assert!(!t.increments().contains(&incs[2]));
        assert_eq!(t.increments().len(), 7);

        let increasing: Vec<(f64, f64)> = incs
            .iter()
            .enumerate()
            .map(|(i, &d)| (d, 0.1 + 0.03 * i as f64))
            .collect();
        let t = calibrate_t_table(&increasing, 0.5).unwrap();
        assert_eq!(t.lookup(t.max_level()), Some(3.5));

        let t = calibrate_t_table(&[(3.5, 0.9)], 0.5).unwrap();
        assert!(!t.calibrated);
        assert!(calibrate_t_table(&[], 0.5).is_err());
    }

    #[test]
    fn max_avg_demands() {
        let tr = Trace::single(2e-3, "a", vec![40.0, 42.0, 44.0], Unit::Celsius).unwrap();
        let p = PTable::linear(1.5, 10.0).unwrap();
        let d = max_avg_injection(&tr, &[p.clone()]).unwrap();
        assert_eq!(d.delta.column(0), vec![4.0, 2.0, 0.0]);
        assert_eq!(d.power.column(0), vec![6.0, 3.0, 0.0]);
        let flat = Trace::single(2e-3, "a", vec![41.0; 5], Unit::Celsius).unwrap();
        let d = max_avg_injection(&flat, &[p.clone()]).unwrap();
        assert!(d.power.values().iter().all(|&v| v == 0.0));
        let small = PTable::linear(1.0, 1.0).unwrap();
        assert_eq!(max_avg_injection(&tr, &[small]).unwrap().clamped, 2);
    }

    #[test]
    fn fuzzed_selection_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tt = TTable::default();
        for _ in 0..1000 {
            let t_min = rng.random_range(30.0..80.0);
            let t_max = t_min + rng.random_range(0.0..15.0);
            let slope = rng.random_range(0.0..3.0);
            let p = PTable::linear(slope, 10.0).unwrap();
            let c = ControllerConfig {
                power_budget: rng.random_range(0.0..25.0),
                thermal_limit: rng.random_range(40.0..100.0),
                kp: rng.random_range(0.0..5.0),
                ..Default::default()
            };
            let level = rng.random_range(0..10);
            let th = select_threshold(t_min, t_max, level, &c, &tt, &p).unwrap();
            assert!(t_min <= th.t_th && th.t_th <= t_max);
            assert!(th.p_cap <= c.power_budget || th.infeasible);
            let t_block = rng.random_range(t_min - 5.0..t_max);
            let cmd = generator_command(th.t_th, t_block, th.p_cap, &c, &mut BlockState::new());
            assert!(cmd <= th.p_cap && cmd <= c.power_budget);
            if level > 0 {
                let lower = select_threshold(t_min, t_max, level - 1, &c, &tt, &p).unwrap();
                let cmd_lower =
                    generator_command(lower.t_th, t_block, lower.p_cap, &c, &mut BlockState::new());
                assert!(cmd_lower <= cmd);
            }
        }
    }

    proptest! {
        #[test]
        fn threshold_is_monotone_in_level(
            t_min in 20.0f64..90.0,
            span in 0.0f64..12.0,
            level in 0usize..8,
        ) {
            let p = PTable::linear(1.0, 10.0).unwrap();
            let c = cfg();
            let tt = TTable::default();
            let lo = select_threshold(t_min, t_min + span, level, &c, &tt, &p).unwrap();
            let hi = select_threshold(t_min, t_min + span, level + 1, &c, &tt, &p).unwrap();
            prop_assert!(lo.t_th <= hi.t_th);
        }
    }
}
