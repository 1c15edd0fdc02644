//! End-to-end runs over a scenario: baselines, shielded sweeps and the
//! max_avg reference, reduced to one metrics row per setting.

use std::ops::Range;

use serde::Serialize;

use crate::controller::{
    calibrate_p_table, max_avg_injection, run_shielded, ControlMode, ControllerConfig, PTable,
    ShieldInputs, ShieldPair, ShieldedRun, TTable, ThresholdPolicy,
};
use crate::error::{Error, Result};
use crate::metrics::{
    best_delay, effective_groups, mpu, power_overhead, scaled_svf, stsf, svf, tiled_windows,
    SvfReport,
};
use crate::model::{Floorplan, Trace, Unit};
use crate::report::HeatmapCell;
use crate::scenario::Scenario;
use crate::sensors::{
    layer_attenuation_experiment, observe_all, AttenuationSetup, LayerSvf, Region, SensorConfig,
};
use crate::thermal::{
    block_temperature_trace, build_network, map_power, steady_state, transient, ThermalNetwork,
    ThermalState,
};
use crate::workload::{benchmark, load_trace, synth_workload, to_power, SynthSpec};

/// Everything derived once from a scenario.
pub struct Setup {
    pub scenario: Scenario,
    pub floorplan: Floorplan,
    pub network: ThermalNetwork,
    pub pairs: Vec<ShieldPair>,
    pub p_tables: Vec<PTable>,
    pub t_table: TTable,
}

pub fn p_table_file(block: &str) -> String {
    format!("p_table_{block}.csv")
}

impl Setup {
    pub fn new(scenario: Scenario) -> Result<Setup> {
        scenario.validate()?;
        let floorplan = scenario.floorplan()?;
        let network = build_network(&floorplan, &scenario.stack, scenario.grid)?;
        let pairs = scenario.pairs();
        let p_tables = match &scenario.shield.p_tables {
            Some(dir) => {
                let dir = scenario.resolve(dir);
                pairs
                    .iter()
                    .map(|p| {
                        let path = dir.join(p_table_file(&p.protected));
                        let text =
                            std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                        PTable::from_csv(&text, &path)
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            None => calibrate_p_table(
                &network,
                &scenario.generators(),
                &scenario.protected(),
                &scenario.shield.calibration_levels,
            )?,
        };
        let t_table = match &scenario.shield.t_table {
            Some(p) => {
                let path = scenario.resolve(p);
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                TTable::from_csv(&text, &path)?
            }
            None => TTable::default(),
        };
        Ok(Setup {
            scenario,
            floorplan,
            network,
            pairs,
            p_tables,
            t_table,
        })
    }

    /// Controller settings with the proportional gain taken from the
    /// calibrated tables when the scenario asks for it.
    pub fn controller(&self) -> ControllerConfig {
        let mut c = self.scenario.shield.controller.clone();
        if self.scenario.shield.kp_from_table {
            let slopes: Vec<f64> = self.p_tables.iter().map(PTable::slope).collect();
            c.kp = slopes.iter().sum::<f64>() / slopes.len() as f64;
        }
        c
    }

    /// Named instruction traces the scenario asks for.
    pub fn workloads(&self) -> Result<Vec<Workload>> {
        let s = &self.scenario;
        let w = &s.workload;
        let channels = s.workload_channels();
        let insts: Vec<(String, Trace)> = if let Some(path) = &w.trace {
            let path = s.resolve(path);
            let name = path
                .file_stem()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            vec![(name, load_trace(&path, Some(channels))?)]
        } else if !w.phases.is_empty() {
            let spec = SynthSpec {
                sample_interval: w.sample_interval,
                channels,
                phases: w.phases.clone(),
                seed: s.seed,
            };
            vec![(s.name.clone(), synth_workload(&spec)?)]
        } else {
            s.benchmark_names()
                .into_iter()
                .map(|name| {
                    let spec = benchmark(
                        &name,
                        &channels,
                        w.sample_interval,
                        w.samples,
                        bench_seed(s.seed, &name),
                    )?;
                    Ok((name, synth_workload(&spec)?))
                })
                .collect::<Result<Vec<_>>>()?
        };
        insts
            .into_iter()
            .map(|(name, inst)| {
                let power = to_power(&inst, &s.power_model)?;
                Ok(Workload { name, inst, power })
            })
            .collect()
    }

    pub fn windows(&self, samples: usize) -> Vec<Range<usize>> {
        let a = &self.scenario.analysis;
        tiled_windows(
            a.warmup,
            samples.saturating_sub(a.k_max),
            a.window,
            a.stride,
        )
    }

    fn attacker_sensors(&self) -> Vec<SensorConfig> {
        let a = &self.scenario.analysis;
        self.pairs
            .iter()
            .map(|p| {
                SensorConfig::builtin(&p.protected, Region::Blocks(vec![p.protected.clone()]))
                    .with_noise(a.observation_noise, a.observation_quantization)
            })
            .collect()
    }

    /// What the attacker's per-block sensors record for a cell trace.
    pub fn attacker_view(&self, cells: &Trace, seed: u64) -> Result<Trace> {
        observe_all(cells, &self.network, &self.attacker_sensors(), seed)
    }

    /// Unshielded run from the steady state of the mean power.
    pub fn baseline(&self, workload: &Workload) -> Result<Baseline> {
        let means = workload.power.channel_means();
        let init = steady_state(
            &self.network,
            &map_power(workload.power.channels().iter().zip(means), &self.network)?,
        )?;
        let cells = transient(
            &self.network,
            &workload.power,
            &init,
            self.scenario.analysis.dt,
        )?;
        let blocks = block_temperature_trace(&cells, &self.scenario.protected(), &self.network)?;
        let seed = bench_seed(self.scenario.seed, &workload.name);
        let observed = self.attacker_view(&cells, seed)?;
        let windows = self.windows(workload.inst.num_samples());
        let (k, report) = best_delay(
            &workload.inst,
            &observed,
            self.scenario.analysis.k_max,
            &windows,
        )?;
        Ok(Baseline {
            initial: init,
            cells,
            blocks,
            observed,
            k,
            report,
            windows,
            seed,
        })
    }

    /// Closed-loop run for one setting against a computed baseline.
    pub fn shielded(
        &self,
        workload: &Workload,
        base: &Baseline,
        setting: &Setting,
    ) -> Result<ShieldedRun> {
        let mut config = self.controller();
        let fixed;
        let (t_table, policy) = match *setting {
            Setting::Unshielded => return Err(Error::validation("unshielded has no controller")),
            Setting::Increment(d) => {
                fixed = TTable::fixed(d)?;
                config.security_level = 0;
                (&fixed, ThresholdPolicy::Algorithm)
            }
            Setting::Level { level, global } => {
                config.security_level = level;
                config.global_range = global;
                (&self.t_table, ThresholdPolicy::Algorithm)
            }
            Setting::MaxAvg => return self.max_avg(workload, base),
        };
        run_shielded(&ShieldInputs {
            network: &self.network,
            workload_power: &workload.power,
            pairs: &self.pairs,
            p_tables: &self.p_tables,
            t_table,
            config: &config,
            initial: &base.initial,
            dt: self.scenario.analysis.dt,
            policy,
        })
    }

    /// Flattens every protected block at its unshielded maximum. The
    /// feedforward demand from the power tables fixes the targets; joint
    /// predictive tracking holds them, and targets are raised by any
    /// residual overshoot from cross-heating between generators.
    pub fn max_avg(&self, workload: &Workload, base: &Baseline) -> Result<ShieldedRun> {
        let demand = max_avg_injection(&base.blocks, &self.p_tables)?;
        if demand.clamped > 0 {
            log::warn!(
                "{}: max_avg demand clamped in {} samples",
                workload.name,
                demand.clamped
            );
        }
        let warmup = self.scenario.analysis.warmup.min(base.blocks.num_samples());
        let tail = base.blocks.slice(warmup, base.blocks.num_samples())?;
        let mut targets: Vec<f64> = (0..tail.num_channels())
            .map(|c| max_of(&tail.column(c)))
            .collect();
        let mut config = self.controller();
        config.mode = ControlMode::Predictive;
        config.power_budget = self
            .p_tables
            .iter()
            .map(PTable::max_power)
            .fold(config.power_budget, f64::max);
        let mut run = None;
        for _ in 0..MAX_AVG_PASSES {
            let r = run_shielded(&ShieldInputs {
                network: &self.network,
                workload_power: &workload.power,
                pairs: &self.pairs,
                p_tables: &self.p_tables,
                t_table: &self.t_table,
                config: &config,
                initial: &base.initial,
                dt: self.scenario.analysis.dt,
                policy: ThresholdPolicy::Pinned(targets.clone()),
            })?;
            let obs = r.observed.slice(warmup, r.observed.num_samples())?;
            let mut raised = false;
            for (b, t) in targets.iter_mut().enumerate() {
                let over = max_of(&obs.column(b)) - *t;
                if over > MAX_AVG_TOLERANCE {
                    *t += over;
                    raised = true;
                }
            }
            run = Some(r);
            if !raised {
                break;
            }
        }
        Ok(run.expect("at least one pass"))
    }

    /// Layer-placement sweep from the scenario's `attack` section, driven by
    /// the attacked block's own channel of `workload`.
    pub fn attenuation(&self, workload: &Workload) -> Result<Vec<LayerSvf>> {
        let s = &self.scenario;
        let attack = s
            .attack
            .as_ref()
            .ok_or_else(|| Error::validation("scenario has no [attack] section"))?;
        let block = self
            .floorplan
            .block(&attack.block)
            .ok_or_else(|| Error::UnknownBlock(attack.block.clone()))?;
        let col = workload
            .inst
            .channel_index(&attack.block)
            .ok_or_else(|| Error::UnknownBlock(attack.block.clone()))?;
        let inst = Trace::single(
            workload.inst.sample_interval(),
            attack.block.clone(),
            workload.inst.column(col),
            Unit::Instructions,
        )?;
        let power = workload.power.column(col);
        layer_attenuation_experiment(
            &AttenuationSetup {
                stack: attack.stack.as_ref().unwrap_or(&s.stack),
                grid: s.grid,
                block,
                inst: &inst,
                power: &power,
                sensor: (attack.sensor_row, attack.sensor_col),
                noise_std: s.analysis.observation_noise,
                k_max: s.analysis.k_max,
                windows: self.windows(inst.num_samples()),
                seed: bench_seed(s.seed, &workload.name),
            },
            &attack.layers,
        )
    }

    /// STSF of time-averaged block temperatures over the analysis range.
    pub fn spatial(&self, blocks: &Trace) -> Result<(usize, f64)> {
        let a = &self.scenario.analysis;
        let part = blocks.slice(a.warmup, blocks.num_samples())?;
        let m = effective_groups(&part.channel_means(), a.epsilon);
        Ok((m, stsf(part.num_channels(), m)?.stsf))
    }

    /// Baseline, max_avg and every requested setting for one workload.
    pub fn evaluate(&self, workload: &Workload, settings: &[Setting]) -> Result<BenchResult> {
        self.evaluate_with(workload, settings, |_| Ok(()))
    }

    /// As [`Setup::evaluate`], handing every run to `sink` as it finishes.
    pub fn evaluate_with(
        &self,
        workload: &Workload,
        settings: &[Setting],
        mut sink: impl FnMut(&RunView<'_>) -> Result<()>,
    ) -> Result<BenchResult> {
        let base = self.baseline(workload)?;
        sink(&RunView {
            setting: &Setting::Unshielded.label(),
            baseline: &base,
            run: None,
        })?;
        let (m0, s0) = self.spatial(&base.blocks)?;
        let unshielded = RunMetrics {
            setting: Setting::Unshielded.label(),
            svf: base.report,
            mpu: 0.0,
            power_overhead: 0.0,
            stsf: s0,
            m_eff: m0,
            mean_generator_power: 0.0,
        };
        let max_run = self.shielded(workload, &base, &Setting::MaxAvg)?;
        sink(&RunView {
            setting: &Setting::MaxAvg.label(),
            baseline: &base,
            run: Some(&max_run),
        })?;
        let max_metrics = self.metrics(workload, &base, &Setting::MaxAvg, &max_run, &max_run)?;
        let mut runs = Vec::with_capacity(settings.len());
        for s in settings {
            let run = self.shielded(workload, &base, s)?;
            sink(&RunView {
                setting: &s.label(),
                baseline: &base,
                run: Some(&run),
            })?;
            runs.push(self.metrics(workload, &base, s, &run, &max_run)?);
        }
        Ok(BenchResult {
            benchmark: workload.name.clone(),
            delay_k: base.k,
            unshielded,
            max_avg: max_metrics,
            settings: runs,
        })
    }

    /// Time-averaged protected-layer temperatures over the analysis range
    /// without shielding, with the controller running at zero budget, and
    /// with it on at the top level against the global range.
    pub fn heatmap(&self, workload: &Workload, base: &Baseline) -> Result<Vec<HeatmapCell>> {
        let layer = self
            .floorplan
            .block(&self.pairs[0].protected)
            .map(|b| b.layer)
            .ok_or_else(|| Error::UnknownBlock(self.pairs[0].protected.clone()))?;
        let mut config = self.controller();
        config.security_level = self.t_table.max_level();
        config.global_range = true;
        let run = |config: &ControllerConfig| {
            run_shielded(&ShieldInputs {
                network: &self.network,
                workload_power: &workload.power,
                pairs: &self.pairs,
                p_tables: &self.p_tables,
                t_table: &self.t_table,
                config,
                initial: &base.initial,
                dt: self.scenario.analysis.dt,
                policy: ThresholdPolicy::Algorithm,
            })
        };
        let on = run(&config)?;
        config.power_budget = 0.0;
        let off = run(&config)?;
        let warmup = self.scenario.analysis.warmup.min(base.cells.num_samples());
        let mut out = Vec::new();
        for (panel, cells) in [
            ("without shielding", &base.cells),
            ("shielding off", &off.cells),
            ("shielding on", &on.cells),
        ] {
            let means = cells.slice(warmup, cells.num_samples())?.channel_means();
            for row in 0..self.network.rows() {
                for col in 0..self.network.cols() {
                    let cell = self.network.cell_index(layer, row, col).expect("in grid");
                    out.push(HeatmapCell {
                        panel: panel.into(),
                        layer,
                        row,
                        col,
                        temperature_c: means[cell],
                    });
                }
            }
        }
        Ok(out)
    }

    pub fn metrics(
        &self,
        workload: &Workload,
        base: &Baseline,
        setting: &Setting,
        run: &ShieldedRun,
        max_avg: &ShieldedRun,
    ) -> Result<RunMetrics> {
        let observed = self.attacker_view(&run.cells, base.seed)?;
        let report = svf(&workload.inst, &observed, base.k, &base.windows)?;
        let (m, s) = self.spatial(&run.observed)?;
        Ok(RunMetrics {
            setting: setting.label(),
            svf: report,
            mpu: mpu(&run.generator_power, &max_avg.generator_power),
            power_overhead: power_overhead(&run.generator_power, &run.total_power)?,
            stsf: s,
            m_eff: m,
            mean_generator_power: run.generator_power.mean_total(),
        })
    }
}

/// Per-benchmark noise and workload seed.
pub fn bench_seed(seed: u64, name: &str) -> u64 {
    name.bytes().fold(seed ^ 0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

/// One finished run as handed to an [`Setup::evaluate_with`] sink; `run`
/// is `None` for the unshielded baseline.
pub struct RunView<'a> {
    pub setting: &'a str,
    pub baseline: &'a Baseline,
    pub run: Option<&'a ShieldedRun>,
}

pub struct Workload {
    pub name: String,
    pub inst: Trace,
    pub power: Trace,
}

pub struct Baseline {
    pub initial: ThermalState,
    pub cells: Trace,
    /// Noise-free protected block temperatures.
    pub blocks: Trace,
    pub observed: Trace,
    pub k: usize,
    pub report: SvfReport,
    pub windows: Vec<Range<usize>>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Setting {
    Unshielded,
    /// Fixed temperature increment (°C).
    Increment(f64),
    /// Security level through the scenario's level table.
    Level {
        level: usize,
        global: bool,
    },
    MaxAvg,
}

impl Setting {
    pub fn label(&self) -> String {
        match self {
            Setting::Unshielded => "unshielded".into(),
            Setting::Increment(d) => format!("shield_{d}"),
            Setting::Level {
                level,
                global: false,
            } => format!("level_{level}"),
            Setting::Level {
                level,
                global: true,
            } => format!("level_{level}_global"),
            Setting::MaxAvg => "max_avg".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub setting: String,
    pub svf: SvfReport,
    pub mpu: f64,
    pub power_overhead: f64,
    pub stsf: f64,
    pub m_eff: usize,
    pub mean_generator_power: f64,
}

impl RunMetrics {
    pub fn scaled_svf(&self) -> f64 {
        scaled_svf(self.svf.svf, self.mpu)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub benchmark: String,
    pub delay_k: usize,
    pub unshielded: RunMetrics,
    pub max_avg: RunMetrics,
    pub settings: Vec<RunMetrics>,
}

impl BenchResult {
    /// Unshielded, requested settings, then max_avg.
    pub fn rows(&self) -> impl Iterator<Item = &RunMetrics> {
        std::iter::once(&self.unshielded)
            .chain(self.settings.iter())
            .chain(std::iter::once(&self.max_avg))
    }

    pub fn setting(&self, label: &str) -> Option<&RunMetrics> {
        self.rows().find(|r| r.setting == label)
    }
}

/// Target-raising passes for max_avg.
const MAX_AVG_PASSES: usize = 4;
/// Overshoot in °C below which max_avg targets are left alone.
const MAX_AVG_TOLERANCE: f64 = 1e-4;

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}
