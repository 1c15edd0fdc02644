//! Closed-loop simulation: controller and thermal model stepped together.

use crate::error::{Error, Result};
use crate::model::{Trace, Unit};
use crate::thermal::{substeps_for, ThermalNetwork, ThermalState};

use super::{
    estimate_block_temp, generator_command, select_threshold, ControlMode, ControllerConfig,
    ControllerState, PTable, TTable,
};
use crate::thermal::{BlockCells, Stepper};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShieldPair {
    pub protected: String,
    pub generator: String,
}

impl ShieldPair {
    pub fn new(protected: &str, generator: &str) -> Self {
        ShieldPair {
            protected: protected.into(),
            generator: generator.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ThresholdPolicy {
    /// Range tracking plus level-driven threshold selection.
    Algorithm,
    /// Fixed per-block thresholds with the cap set to the whole table.
    Pinned(Vec<f64>),
    /// Precomputed generator powers, one channel per pair, replayed
    /// open loop.
    Schedule(Trace),
}

pub struct ShieldInputs<'a> {
    pub network: &'a ThermalNetwork,
    pub workload_power: &'a Trace,
    pub pairs: &'a [ShieldPair],
    /// One per pair.
    pub p_tables: &'a [PTable],
    pub t_table: &'a TTable,
    pub config: &'a ControllerConfig,
    pub initial: &'a ThermalState,
    /// Integration step; defaults to a tenth of the sample interval.
    pub dt: Option<f64>,
    pub policy: ThresholdPolicy,
}

#[derive(Debug, Clone)]
pub struct ShieldedRun {
    /// Cell temperatures at the end of each interval.
    pub cells: Trace,
    /// Protected block temperatures, one channel per pair.
    pub observed: Trace,
    /// One channel per generator.
    pub generator_power: Trace,
    /// Workload plus generator power, single channel `total`.
    pub total_power: Trace,
    /// Achieved security level per block, `-1` before the first range.
    pub levels: Trace,
    /// Threshold per block and sample; `None` while the controller idles.
    pub thresholds: Vec<Vec<Option<f64>>>,
    pub infeasible_samples: usize,
    pub clamp_warnings: usize,
    pub throttle_events: usize,
    pub final_state: ControllerState,
}

/// Runs the controller in the loop: per sample it reads each protected
/// block, estimates its unshielded temperature, updates the range, picks a
/// threshold, commands the generator and advances the thermal state over
/// one interval with workload plus generator power.
pub fn run_shielded(inputs: &ShieldInputs<'_>) -> Result<ShieldedRun> {
    let ShieldInputs {
        network,
        workload_power,
        pairs,
        p_tables,
        t_table,
        config,
        initial,
        dt,
        ref policy,
    } = *inputs;
    config.validate()?;
    if workload_power.unit() != Unit::Watts {
        return Err(Error::validation("workload trace must be in watts"));
    }
    if p_tables.len() != pairs.len() {
        return Err(Error::LengthMismatch {
            expected: pairs.len(),
            actual: p_tables.len(),
        });
    }
    match policy {
        ThresholdPolicy::Pinned(t) if t.len() != pairs.len() => {
            return Err(Error::LengthMismatch {
                expected: pairs.len(),
                actual: t.len(),
            });
        }
        ThresholdPolicy::Schedule(t) => {
            if t.num_channels() != pairs.len() || t.num_samples() != workload_power.num_samples() {
                return Err(Error::LengthMismatch {
                    expected: pairs.len() * workload_power.num_samples(),
                    actual: t.values().len(),
                });
            }
            if t.unit() != Unit::Watts || t.values().iter().any(|&p| p < 0.0) {
                return Err(Error::validation(
                    "generator schedule must be non-negative watts",
                ));
            }
        }
        _ => {}
    }
    if initial.temperatures.len() != network.num_cells() {
        return Err(Error::LengthMismatch {
            expected: network.num_cells(),
            actual: initial.temperatures.len(),
        });
    }
    let mut channels = workload_power.channels().to_vec();
    for p in pairs {
        if channels.contains(&p.generator) {
            return Err(Error::validation(format!(
                "generator `{}` also appears in the workload trace",
                p.generator
            )));
        }
        channels.push(p.generator.clone());
    }
    let interval = workload_power.sample_interval();
    let dt = dt.unwrap_or(interval / 10.0);
    let substeps = substeps_for(interval, dt)?;
    let stepper = network.stepper(dt)?;
    let mapper = network.power_mapper(&channels)?;
    let sensors = pairs
        .iter()
        .map(|p| network.block_cells(&p.protected))
        .collect::<Result<Vec<_>>>()?;

    let predictor = match config.mode {
        ControlMode::Predictive => Some(Predictor::new(
            network,
            &stepper,
            &pairs_generators(pairs),
            substeps,
            &sensors,
        )?),
        _ => None,
    };

    let n = workload_power.num_samples();
    let nb = pairs.len();
    let nw = workload_power.num_channels();
    let mut ctl = ControllerState::new(nb);
    let mut state = initial.clone();
    let mut row = vec![0.0; nw + nb];
    let mut cell_power = vec![0.0; network.num_cells()];
    let mut cells = Vec::with_capacity(n * network.num_cells());
    let mut observed = Vec::with_capacity(n * nb);
    let mut gen = Vec::with_capacity(n * nb);
    let mut total = Vec::with_capacity(n);
    let mut levels = Vec::with_capacity(n * nb);
    let mut thresholds = Vec::with_capacity(n);
    let (mut infeasible, mut clamps, mut throttles) = (0, 0, 0);

    for (i, w) in workload_power.rows().enumerate() {
        let level = if ctl.throttle_remaining > 0 {
            ctl.throttle_remaining -= 1;
            config.security_level.saturating_sub(1)
        } else {
            config.security_level
        };
        let mut estimates = Vec::with_capacity(nb);
        for (b, bs) in ctl.blocks.iter_mut().enumerate() {
            let t_sensor = sensors[b].mean(&state.temperatures);
            let est = estimate_block_temp(t_sensor, bs.last_command, &p_tables[b]);
            clamps += est.clamped as usize;
            bs.update_range(est.t_block, config);
            estimates.push(est.t_block);
        }
        let global_max = ctl
            .blocks
            .iter()
            .filter_map(|b| b.range.map(|r| r.1))
            .fold(f64::NEG_INFINITY, f64::max);
        let mut choices: Vec<Option<(f64, f64)>> = Vec::with_capacity(nb);
        for (b, bs) in ctl.blocks.iter_mut().enumerate() {
            let choice = match policy {
                ThresholdPolicy::Schedule(_) => None,
                ThresholdPolicy::Pinned(t) => {
                    Some((t[b], config.power_budget.min(p_tables[b].max_power()), 0.0))
                }
                ThresholdPolicy::Algorithm => match bs.range {
                    Some((t_min, t_max)) => {
                        let t_max = if config.global_range {
                            global_max
                        } else {
                            t_max
                        };
                        let th =
                            select_threshold(t_min, t_max, level, config, t_table, &p_tables[b])?;
                        infeasible += th.infeasible as usize;
                        Some((th.t_th, th.p_cap, th.achieved_level as f64))
                    }
                    None => None,
                },
            };
            if let Some((t_th, _, _)) = choice {
                bs.t_th = Some(t_th);
            }
            levels.push(choice.map_or(-1.0, |c| c.2));
            choices.push(choice.map(|c| (c.0, c.1)));
        }
        row[..nw].copy_from_slice(w);
        match (policy, &predictor) {
            (ThresholdPolicy::Schedule(t), _) => {
                for (b, bs) in ctl.blocks.iter_mut().enumerate() {
                    bs.last_command = t.get(i, b);
                    row[nw + b] = bs.last_command;
                }
            }
            (_, Some(pred)) => {
                row[nw..].iter_mut().for_each(|p| *p = 0.0);
                mapper.map_into(&row, &mut cell_power);
                let free = pred.free_response(&stepper, &state, &cell_power, substeps, &sensors);
                let cmds = pred.solve(&free, &choices);
                for (b, bs) in ctl.blocks.iter_mut().enumerate() {
                    bs.last_command = cmds[b];
                    row[nw + b] = cmds[b];
                }
            }
            (_, None) => {
                for (b, bs) in ctl.blocks.iter_mut().enumerate() {
                    row[nw + b] = match choices[b] {
                        Some((t_th, p_cap)) => {
                            generator_command(t_th, estimates[b], p_cap, config, bs)
                        }
                        None => {
                            bs.last_command = 0.0;
                            0.0
                        }
                    };
                }
            }
        }
        let sample_th: Vec<Option<f64>> = ctl.blocks.iter().map(|b| b.t_th).collect();
        thresholds.push(sample_th);
        mapper.map_into(&row, &mut cell_power);
        for _ in 0..substeps {
            stepper.step(&mut state, &cell_power);
        }
        if config.throttling && state.temperatures.iter().any(|&t| t > config.thermal_limit) {
            ctl.throttle_remaining = config.adjustment_interval;
            throttles += 1;
        }
        cells.extend_from_slice(&state.temperatures);
        observed.extend(sensors.iter().map(|s| s.mean(&state.temperatures)));
        gen.extend_from_slice(&row[nw..]);
        total.push(row.iter().sum());
    }

    let cell_names = (0..network.num_cells())
        .map(|c| network.cell_name(c))
        .collect();
    let prot: Vec<String> = pairs.iter().map(|p| p.protected.clone()).collect();
    let gens: Vec<String> = pairs.iter().map(|p| p.generator.clone()).collect();
    Ok(ShieldedRun {
        cells: Trace::new(interval, cell_names, cells, Unit::Celsius)?,
        observed: Trace::new(interval, prot.clone(), observed, Unit::Celsius)?,
        generator_power: Trace::new(interval, gens, gen, Unit::Watts)?,
        total_power: Trace::new(interval, vec!["total".into()], total, Unit::Watts)?,
        levels: Trace::new(interval, prot, levels, Unit::Level)?,
        thresholds,
        infeasible_samples: infeasible,
        clamp_warnings: clamps,
        throttle_events: throttles,
        final_state: ctl,
    })
}

fn pairs_generators(pairs: &[ShieldPair]) -> Vec<String> {
    pairs.iter().map(|p| p.generator.clone()).collect()
}

/// One-interval model of the plant: how each protected block responds to
/// each generator over one sample, used to command generators so every
/// block ends the interval exactly at its threshold where power allows.
struct Predictor {
    /// `gain[b][g]`: block `b` rise after one interval of 1 W at `g`.
    gain: Vec<Vec<f64>>,
}

impl Predictor {
    fn new(
        network: &ThermalNetwork,
        stepper: &Stepper<'_>,
        generators: &[String],
        substeps: usize,
        sensors: &[&BlockCells],
    ) -> Result<Self> {
        let mut gain = vec![vec![0.0; generators.len()]; sensors.len()];
        for (g, id) in generators.iter().enumerate() {
            let power = crate::thermal::map_power([(id.as_str(), 1.0)], network)?;
            let mut s = network.ambient_state();
            for _ in 0..substeps {
                stepper.step(&mut s, &power);
            }
            for (b, cells) in sensors.iter().enumerate() {
                gain[b][g] = cells.mean(&s.temperatures) - network.ambient();
            }
        }
        Ok(Predictor { gain })
    }

    /// Block temperatures after one interval with generators off.
    fn free_response(
        &self,
        stepper: &Stepper<'_>,
        state: &ThermalState,
        cell_power: &[f64],
        substeps: usize,
        sensors: &[&BlockCells],
    ) -> Vec<f64> {
        let mut s = state.clone();
        for _ in 0..substeps {
            stepper.step(&mut s, cell_power);
        }
        sensors.iter().map(|c| c.mean(&s.temperatures)).collect()
    }

    /// Powers in `[0, cap]` that bring each active block to its threshold,
    /// by an active-set pass over the bound constraints. Blocks without a
    /// threshold get 0 W and are not tracked.
    fn solve(&self, free: &[f64], choices: &[Option<(f64, f64)>]) -> Vec<f64> {
        let nb = free.len();
        let mut p = vec![0.0; nb];
        let mut active: Vec<usize> = (0..nb)
            .filter(|&b| choices[b].is_some_and(|(t, cap)| cap > 0.0 && t > free[b]))
            .collect();
        for _ in 0..=nb {
            if active.is_empty() {
                break;
            }
            let m = active.len();
            let mut a = vec![vec![0.0; m + 1]; m];
            for (r, &b) in active.iter().enumerate() {
                let mut rhs = choices[b].unwrap().0 - free[b];
                for g in 0..nb {
                    if !active.contains(&g) {
                        rhs -= self.gain[b][g] * p[g];
                    }
                }
                for (c, &g) in active.iter().enumerate() {
                    a[r][c] = self.gain[b][g];
                }
                a[r][m] = rhs;
            }
            let x = match gauss(a) {
                Some(x) => x,
                None => break,
            };
            let mut changed = false;
            let mut keep = Vec::with_capacity(m);
            for (c, &g) in active.iter().enumerate() {
                let cap = choices[g].unwrap().1;
                if x[c] < 0.0 {
                    p[g] = 0.0;
                    changed = true;
                } else if x[c] > cap {
                    p[g] = cap;
                    changed = true;
                } else {
                    p[g] = x[c];
                    keep.push(g);
                }
            }
            active = keep;
            if !changed {
                break;
            }
        }
        p
    }
}

/// Dense Gaussian elimination with partial pivoting on an augmented matrix.
fn gauss(mut a: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let m = a.len();
    for col in 0..m {
        let piv = (col..m).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        for r in col + 1..m {
            let f = a[r][col] / a[col][col];
            for c in col..=m {
                a[r][c] -= f * a[col][c];
            }
        }
    }
    let mut x = vec![0.0; m];
    for r in (0..m).rev() {
        let s: f64 = (r + 1..m).map(|c| a[r][c] * x[c]).sum();
        x[r] = (a[r][m] - s) / a[r][r];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::calibrate_p_table;
    use crate::model::{Block, BlockKind, Floorplan, GridSpec, Layer, LayerStack, Rect};
    use crate::thermal::{build_network, map_power, steady_state, transient};

    fn setup() -> (ThermalNetwork, Vec<ShieldPair>, Vec<PTable>) {
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
        let net = build_network(&fp, &stack, GridSpec::new(2, 4)).unwrap();
        let pairs = vec![ShieldPair::new("a", "ga"), ShieldPair::new("b", "gb")];
        let tables = calibrate_p_table(
            &net,
            &["ga".into(), "gb".into()],
            &["a".into(), "b".into()],
            &[0.0, 5.0, 10.0, 20.0],
        )
        .unwrap();
        (net, pairs, tables)
    }

    fn square(n: usize, lo: f64, hi: f64) -> Trace {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let on = (i / 20) % 2 == 0;
                vec![if on { hi } else { lo }, lo]
            })
            .collect();
        Trace::from_rows(2e-3, vec!["a".into(), "b".into()], &rows, Unit::Watts).unwrap()
    }

    fn variance(xs: &[f64]) -> f64 {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
    }

    fn config(tables: &[PTable]) -> ControllerConfig {
        ControllerConfig {
            adjustment_interval: 20,
            range_window: 200,
            kp: tables[0].slope(),
            power_budget: 50.0,
            ..Default::default()
        }
    }

    #[test]
    fn zero_budget_matches_unshielded_bit_for_bit() {
        let (net, pairs, tables) = setup();
        let w = square(300, 1.0, 8.0);
        let init = net.ambient_state();
        let c = ControllerConfig {
            power_budget: 0.0,
            ..config(&tables)
        };
        let tt = TTable::default();
        let run = run_shielded(&ShieldInputs {
            network: &net,
            workload_power: &w,
            pairs: &pairs,
            p_tables: &tables,
            t_table: &tt,
            config: &c,
            initial: &init,
            dt: None,
            policy: ThresholdPolicy::Algorithm,
        })
        .unwrap();
        assert!(run.generator_power.values().iter().all(|&p| p == 0.0));
        let plain = transient(&net, &w, &init, None).unwrap();
        assert_eq!(run.cells.values(), plain.values());
    }

    fn predictive_run(
        net: &ThermalNetwork,
        pairs: &[ShieldPair],
        tables: &[PTable],
        w: &Trace,
        c: &ControllerConfig,
        init: &ThermalState,
        policy: ThresholdPolicy,
    ) -> ShieldedRun {
        let tt = TTable::default();
        run_shielded(&ShieldInputs {
            network: net,
            workload_power: w,
            pairs,
            p_tables: tables,
            t_table: &tt,
            config: c,
            initial: init,
            dt: None,
            policy,
        })
        .unwrap()
    }

    #[test]
    fn predictive_zero_budget_matches_unshielded_bit_for_bit() {
        let (net, pairs, tables) = setup();
        let w = square(300, 1.0, 8.0);
        let init = net.ambient_state();
        let c = ControllerConfig {
            power_budget: 0.0,
            mode: ControlMode::Predictive,
            ..config(&tables)
        };
        let run = predictive_run(
            &net,
            &pairs,
            &tables,
            &w,
            &c,
            &init,
            ThresholdPolicy::Algorithm,
        );
        let plain = transient(&net, &w, &init, None).unwrap();
        assert_eq!(run.cells.values(), plain.values());
    }

    #[test]
    fn predictive_mode_holds_pinned_targets() {
        let (net, pairs, tables) = setup();
        let w = square(400, 1.0, 8.0);
        let init = steady_state(&net, &map_power([("a", 4.5), ("b", 1.0)], &net).unwrap()).unwrap();
        let plain = transient(&net, &w, &init, None).unwrap();
        let base = crate::thermal::block_temperature_trace(&plain, &["a".into(), "b".into()], &net)
            .unwrap();
        let top = |c: usize| base.column(c).iter().copied().fold(f64::MIN, f64::max) + 0.5;
        let targets = vec![top(0), top(1)];
        let c = ControllerConfig {
            mode: ControlMode::Predictive,
            ..config(&tables)
        };
        let run = predictive_run(
            &net,
            &pairs,
            &tables,
            &w,
            &c,
            &init,
            ThresholdPolicy::Pinned(targets.clone()),
        );
        for (b, t) in targets.iter().enumerate() {
            let worst = run
                .observed
                .column(b)
                .iter()
                .map(|x| (x - t).abs())
                .fold(0.0, f64::max);
            assert!(worst < 1e-6, "block {b}: residual {worst}");
        }
    }

    #[test]
    fn shielding_lowers_block_variance_at_every_level() {
        let (net, pairs, tables) = setup();
        let w = square(600, 1.0, 8.0);
        let init = steady_state(&net, &map_power([("a", 4.5), ("b", 1.0)], &net).unwrap()).unwrap();
        let plain = transient(&net, &w, &init, None).unwrap();
        let base = crate::thermal::block_temperature_trace(&plain, &["a".into()], &net).unwrap();
        let base_var = variance(&base.column(0)[100..]);
        let tt = TTable::default();
        for level in 0..8 {
            let c = ControllerConfig {
                security_level: level,
                ..config(&tables)
            };
            let run = run_shielded(&ShieldInputs {
                network: &net,
                workload_power: &w,
                pairs: &pairs,
                p_tables: &tables,
                t_table: &tt,
                config: &c,
                initial: &init,
                dt: None,
                policy: ThresholdPolicy::Algorithm,
            })
            .unwrap();
            let v = variance(&run.observed.column(0)[100..]);
            assert!(v < base_var, "level {level}: {v} vs {base_var}");
            assert!(run
                .generator_power
                .values()
                .iter()
                .all(|&p| (0.0..=c.power_budget).contains(&p)));
        }
    }

    #[test]
    fn idle_workload_commands_nothing() {
        let (net, pairs, tables) = setup();
        let w =
            Trace::from_rows(2e-3, vec!["a".into()], &vec![vec![0.0]; 100], Unit::Watts).unwrap();
        let init = net.ambient_state();
        let tt = TTable::default();
        let c = config(&tables);
        let run = run_shielded(&ShieldInputs {
            network: &net,
            workload_power: &w,
            pairs: &pairs,
            p_tables: &tables,
            t_table: &tt,
            config: &c,
            initial: &init,
            dt: None,
            policy: ThresholdPolicy::Algorithm,
        })
        .unwrap();
        assert!(run.generator_power.values().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn throttling_reduces_the_level() {
        let (net, pairs, tables) = setup();
        let w = square(400, 1.0, 8.0);
        let init = net.ambient_state();
        let tt = TTable::default();
        let c = ControllerConfig {
            security_level: 7,
            thermal_limit: 45.5,
            ..config(&tables)
        };
        let run = run_shielded(&ShieldInputs {
            network: &net,
            workload_power: &w,
            pairs: &pairs,
            p_tables: &tables,
            t_table: &tt,
            config: &c,
            initial: &init,
            dt: None,
            policy: ThresholdPolicy::Algorithm,
        })
        .unwrap();
        assert!(run.throttle_events > 0);
        assert!(run.levels.values().iter().any(|&l| l >= 0.0 && l < 7.0));
    }

    #[test]
    fn runs_are_deterministic_and_reject_bad_inputs() {
        let (net, pairs, tables) = setup();
        let w = square(120, 1.0, 8.0);
        let init = net.ambient_state();
        let tt = TTable::default();
        let c = config(&tables);
        let mk = |policy| ShieldInputs {
            network: &net,
            workload_power: &w,
            pairs: &pairs,
            p_tables: &tables,
            t_table: &tt,
            config: &c,
            initial: &init,
            dt: None,
            policy,
        };
        let a = run_shielded(&mk(ThresholdPolicy::Algorithm)).unwrap();
        let b = run_shielded(&mk(ThresholdPolicy::Algorithm)).unwrap();
        assert_eq!(a.generator_power, b.generator_power);
        assert!(run_shielded(&mk(ThresholdPolicy::Pinned(vec![50.0]))).is_err());
        let mut bad = mk(ThresholdPolicy::Algorithm);
        bad.p_tables = &tables[..1];
        assert!(run_shielded(&bad).is_err());
    }
}
