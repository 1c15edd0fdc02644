//! Attacker observation models: built-in composite sensors, external
//! point sensors on an exposed surface, and infrared imaging of the top
//! layer. Each turns a simulated cell-temperature trace into what the
//! adversary actually records.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{best_delay, SvfReport};
use crate::model::{resample, Block, Floorplan, GridSpec, LayerStack, Trace, Unit};
use crate::thermal::{build_network, map_power, steady_state, transient, ThermalNetwork};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorMode {
    Builtin,
    External,
    IrImage,
}

/// Cells a built-in sensor averages over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    /// Union of block footprints, area weighted.
    Blocks(Vec<String>),
    /// Explicit `(cell, weight)` pairs; weights are normalized.
    Cells(Vec<(usize, f64)>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    pub id: String,
    pub mode: SensorMode,
    /// `(layer, row, col)` for external sensors.
    #[serde(default)]
    pub location: Option<(usize, usize, usize)>,
    #[serde(default)]
    pub region: Option<Region>,
    /// Must be a multiple of the simulated interval; `None` keeps it.
    #[serde(default)]
    pub sample_interval: Option<f64>,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default)]
    pub quantization: f64,
    #[serde(default)]
    pub ir_blur_radius: usize,
}

fn default_noise() -> f64 {
    0.01
}

impl SensorConfig {
    pub fn builtin(id: &str, region: Region) -> Self {
        SensorConfig {
            id: id.into(),
            mode: SensorMode::Builtin,
            location: None,
            region: Some(region),
            sample_interval: None,
            noise_std: 0.0,
            quantization: 0.0,
            ir_blur_radius: 0,
        }
    }

    pub fn external(id: &str, layer: usize, row: usize, col: usize) -> Self {
        SensorConfig {
            id: id.into(),
            mode: SensorMode::External,
            location: Some((layer, row, col)),
            region: None,
            sample_interval: None,
            noise_std: 0.0,
            quantization: 0.0,
            ir_blur_radius: 0,
        }
    }

    pub fn ir(id: &str, blur: usize) -> Self {
        SensorConfig {
            id: id.into(),
            mode: SensorMode::IrImage,
            location: None,
            region: None,
            sample_interval: None,
            noise_std: 0.01,
            quantization: 0.01,
            ir_blur_radius: blur,
        }
    }

    pub fn with_noise(mut self, noise_std: f64, quantization: f64) -> Self {
        self.noise_std = noise_std;
        self.quantization = quantization;
        self
    }
}

fn region_cells(region: &Region, network: &ThermalNetwork) -> Result<Vec<(usize, f64)>> {
    let mut cells: Vec<(usize, f64)> = match region {
        Region::Cells(c) => {
            if let Some(&(bad, _)) = c.iter().find(|(i, _)| *i >= network.num_cells()) {
                return Err(Error::validation(format!("region cell {bad} is off-grid")));
            }
            c.clone()
        }
        Region::Blocks(ids) => {
            let mut out: Vec<(usize, f64)> = Vec::new();
            for id in ids {
                let bc = network.block_cells(id)?;
                for (&c, &w) in bc.cells.iter().zip(&bc.weights) {
                    match out.iter_mut().find(|(cell, _)| *cell == c) {
                        Some(e) => e.1 = e.1.max(w),
                        None => out.push((c, w)),
                    }
                }
            }
            out
        }
    };
    cells.retain(|&(_, w)| w > 0.0);
    if cells.is_empty() {
        return Err(Error::validation("sensor region is empty"));
    }
    let total: f64 = cells.iter().map(|(_, w)| w).sum();
    cells.iter_mut().for_each(|(_, w)| *w /= total);
    Ok(cells)
}

/// Rounds to the nearest multiple of `step`, ties to even. `step == 0`
/// leaves the value untouched.
pub fn quantize(value: f64, step: f64) -> f64 {
    if step > 0.0 {
        (value / step).round_ties_even() * step
    } else {
        value
    }
}

/// Produces the trace an attacker records with `config` from a simulated
/// cell-level temperature trace.
pub fn observe(
    cell_trace: &Trace,
    network: &ThermalNetwork,
    config: &SensorConfig,
    seed: u64,
) -> Result<Trace> {
    if cell_trace.num_channels() != network.num_cells() {
        return Err(Error::LengthMismatch {
            expected: network.num_cells(),
            actual: cell_trace.num_channels(),
        });
    }
    if config.noise_std < 0.0 || config.quantization < 0.0 {
        return Err(Error::validation(format!(
            "sensor `{}`: noise and quantization must be >= 0",
            config.id
        )));
    }
    let (channels, mut values) = match config.mode {
        SensorMode::Builtin => {
            let region = config.region.as_ref().ok_or_else(|| {
                Error::validation(format!(
                    "sensor `{}`: builtin mode needs a region",
                    config.id
                ))
            })?;
            let cells = region_cells(region, network)?;
            let values: Vec<f64> = cell_trace
                .rows()
                .map(|row| cells.iter().map(|&(c, w)| row[c] * w).sum())
                .collect();
            (vec![config.id.clone()], values)
        }
        SensorMode::External => {
            let (l, r, c) = config.location.ok_or_else(|| {
                Error::validation(format!(
                    "sensor `{}`: external mode needs a location",
                    config.id
                ))
            })?;
            let cell = network.cell_index(l, r, c).ok_or_else(|| {
                Error::validation(format!(
                    "sensor `{}`: location ({l}, {r}, {c}) is off-grid",
                    config.id
                ))
            })?;
            if l != 0 && l + 1 != network.layers() {
                return Err(Error::validation(format!(
                    "sensor `{}`: external sensors read the top or bottom surface only",
                    config.id
                )));
            }
            (
                vec![config.id.clone()],
                cell_trace.rows().map(|row| row[cell]).collect(),
            )
        }
        SensorMode::IrImage => {
            let top = network.layers() - 1;
            let (rows, cols) = (network.rows(), network.cols());
            let rad = config.ir_blur_radius as isize;
            let mut channels = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for c in 0..cols {
                    channels.push(format!("{}_R{r}_C{c}", config.id));
                }
            }
            let mut values = Vec::with_capacity(cell_trace.num_samples() * rows * cols);
            for row in cell_trace.rows() {
                for r in 0..rows as isize {
                    for c in 0..cols as isize {
                        let (mut sum, mut n) = (0.0, 0usize);
                        for rr in (r - rad).max(0)..=(r + rad).min(rows as isize - 1) {
                            for cc in (c - rad).max(0)..=(c + rad).min(cols as isize - 1) {
                                sum +=
                                    row[network.cell_index(top, rr as usize, cc as usize).unwrap()];
                                n += 1;
                            }
                        }
                        values.push(sum / n as f64);
                    }
                }
            }
            (channels, values)
        }
    };

    if config.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.noise_std)
            .map_err(|e| Error::validation(format!("sensor `{}`: {e}", config.id)))?;
        values
            .iter_mut()
            .for_each(|v| *v += normal.sample(&mut rng));
    }
    if config.quantization > 0.0 {
        values
            .iter_mut()
            .for_each(|v| *v = quantize(*v, config.quantization));
    }
    let trace = Trace::new(
        cell_trace.sample_interval(),
        channels,
        values,
        Unit::Celsius,
    )?;
    match config.sample_interval {
        Some(si) => resample(&trace, si),
        None => Ok(trace),
    }
}

/// Observes with several sensors and concatenates their channels. Sensor
/// `i` draws its noise from `seed + i`.
pub fn observe_all(
    cell_trace: &Trace,
    network: &ThermalNetwork,
    configs: &[SensorConfig],
    seed: u64,
) -> Result<Trace> {
    if configs.is_empty() {
        return Err(Error::validation("no sensors configured"));
    }
    let parts = configs
        .iter()
        .enumerate()
        .map(|(i, c)| observe(cell_trace, network, c, seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let n = parts[0].num_samples();
    if parts.iter().any(|p| p.num_samples() != n) {
        return Err(Error::validation("sensors disagree on sample count"));
    }
    let channels: Vec<String> = parts.iter().flat_map(|p| p.channels().to_vec()).collect();
    let mut values = Vec::with_capacity(n * channels.len());
    for i in 0..n {
        for p in &parts {
            values.extend_from_slice(p.row(i));
        }
    }
    Trace::new(parts[0].sample_interval(), channels, values, Unit::Celsius)
}

/// Result of replaying one workload with a block on a given layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSvf {
    pub layer: usize,
    /// Best delay in samples.
    pub k: usize,
    pub report: SvfReport,
}

#[derive(Debug, Clone)]
pub struct AttenuationSetup<'a> {
    pub stack: &'a LayerStack,
    pub grid: GridSpec,
    /// Footprint to replay; its `layer` field is overridden.
    pub block: &'a Block,
    /// Single-channel execution trace driving the block.
    pub inst: &'a Trace,
    /// Power of the block, same length and interval as `inst`.
    pub power: &'a [f64],
    /// Top-surface sensor position `(row, col)`.
    pub sensor: (usize, usize),
    pub noise_std: f64,
    pub k_max: usize,
    pub windows: Vec<Range<usize>>,
    pub seed: u64,
}

/// Replays the same power trace with the block placed on each candidate
/// layer and reports the SVF an identical top-surface sensor achieves.
pub fn layer_attenuation_experiment(
    setup: &AttenuationSetup<'_>,
    layers: &[usize],
) -> Result<Vec<LayerSvf>> {
    let mut out = Vec::with_capacity(layers.len());
    let top = setup.stack.top_layer();
    for &layer in layers {
        let mut block = setup.block.clone();
        block.layer = layer;
        let fp = Floorplan::new(vec![block.clone()]);
        let net = build_network(&fp, setup.stack, setup.grid)?;
        let power = Trace::single(
            setup.inst.sample_interval(),
            block.id.clone(),
            setup.power.to_vec(),
            Unit::Watts,
        )?;
        let mean = power.channel_means()[0];
        let init = steady_state(&net, &map_power([(block.id.as_str(), mean)], &net)?)?;
        let cells = transient(&net, &power, &init, None)?;
        let sensor = SensorConfig::external("top", top, setup.sensor.0, setup.sensor.1)
            .with_noise(setup.noise_std, 0.0);
        let seen = observe(&cells, &net, &sensor, setup.seed)?;
        let (k, report) = best_delay(setup.inst, &seen, setup.k_max, &setup.windows)?;
        out.push(LayerSvf { layer, k, report });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BlockKind, Layer, Rect};

    fn net(layers: usize, grid: usize) -> (ThermalNetwork, Floorplan) {
        let stack = LayerStack {
            layers: vec![Layer::silicon(5e-5); layers],
            die_width: 4.0,
            die_height: 4.0,
            ambient_temperature: 40.0,
            boundary_resistance_top: Some(2e-5),
            boundary_resistance_bottom: None,
        };
        let fp = Floorplan::new(vec![
            Block::new("a", Rect::new(0.0, 0.0, 2.0, 4.0), 0, BlockKind::Functional),
            Block::new("b", Rect::new(2.0, 0.0, 4.0, 4.0), 0, BlockKind::Functional),
        ]);
        (
            build_network(&fp, &stack, GridSpec::new(grid, grid)).unwrap(),
            fp,
        )
    }

    fn ramp(net: &ThermalNetwork, samples: usize) -> Trace {
        let n = net.num_cells();
        let values: Vec<f64> = (0..samples * n)
            .map(|i| 40.0 + (i % 97) as f64 * 0.1)
            .collect();
        let chans = (0..n).map(|c| net.cell_name(c)).collect();
        Trace::new(1e-3, chans, values, Unit::Celsius).unwrap()
    }

    #[test]
    fn noiseless_single_cell_builtin_is_identity() {
        let (net, _) = net(1, 2);
        let t = ramp(&net, 10);
        let s = SensorConfig::builtin("s", Region::Cells(vec![(3, 1.0)]));
        let o = observe(&t, &net, &s, 0).unwrap();
        assert_eq!(o.column(0), t.column(3));
    }

    #[test]
    fn quantization_rounds_half_even() {
        assert!((quantize(44.26, 0.5) - 44.5).abs() < 1e-12);
        assert_eq!(quantize(0.25, 0.5), 0.0);
        assert_eq!(quantize(0.75, 0.5), 1.0);
        assert_eq!(quantize(3.3, 0.0), 3.3);
    }

    #[test]
    fn ir_image_has_one_channel_per_top_cell() {
        let (net, _) = net(2, 4);
        let t = ramp(&net, 5);
        let o = observe(&t, &net, &SensorConfig::ir("ir", 1), 3).unwrap();
        assert_eq!(o.num_channels(), 16);
        assert_eq!(o.num_samples(), 5);
    }

    #[test]
    fn location_and_region_errors() {
        let (net, _) = net(3, 2);
        let t = ramp(&net, 4);
        assert!(observe(&t, &net, &SensorConfig::external("e", 0, 5, 0), 0).is_err());
        assert!(observe(&t, &net, &SensorConfig::external("e", 1, 0, 0), 0).is_err());
        assert!(observe(&t, &net, &SensorConfig::external("e", 2, 1, 1), 0).is_ok());
        let empty = SensorConfig::builtin("s", Region::Cells(vec![]));
        assert!(observe(&t, &net, &empty, 0).is_err());
        let unknown = SensorConfig::builtin("s", Region::Blocks(vec!["zz".into()]));
        assert!(observe(&t, &net, &unknown, 0).is_err());
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let (net, _) = net(1, 2);
        let t = ramp(&net, 50);
        let s = SensorConfig::external("e", 0, 0, 0).with_noise(0.05, 0.0);
        let a = observe(&t, &net, &s, 9).unwrap();
        assert_eq!(a, observe(&t, &net, &s, 9).unwrap());
        assert_ne!(a, observe(&t, &net, &s, 10).unwrap());
    }

    #[test]
    fn noiseless_observation_is_linear() {
        let (net, _) = net(2, 2);
        let t = ramp(&net, 6);
        let doubled = Trace::new(
            t.sample_interval(),
            t.channels().to_vec(),
            t.values().iter().map(|v| 2.0 * v).collect(),
            Unit::Celsius,
        )
        .unwrap();
        for cfg in [
            SensorConfig::builtin("s", Region::Blocks(vec!["a".into(), "b".into()])),
            SensorConfig::ir("ir", 1).with_noise(0.0, 0.0),
        ] {
            let a = observe(&t, &net, &cfg, 0).unwrap();
            let b = observe(&doubled, &net, &cfg, 0).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                assert!((2.0 * x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn composite_reading_denies_attribution() {
        let (net, _) = net(2, 4);
        let region = SensorConfig::builtin("s", Region::Blocks(vec!["a".into(), "b".into()]));
        let heat = |block: &str| {
            let p = map_power([(block, 1.0)], &net).unwrap();
            let s = steady_state(&net, &p).unwrap();
            let chans = (0..net.num_cells()).map(|c| net.cell_name(c)).collect();
            let t = Trace::new(1e-3, chans, s.temperatures, Unit::Celsius).unwrap();
            observe(&t, &net, &region, 0).unwrap().get(0, 0)
        };
        assert!((heat("a") - heat("b")).abs() < 1e-9);
    }

    #[test]
    fn resampled_observation() {
        let (net, _) = net(1, 2);
        let t = ramp(&net, 8);
        let mut s = SensorConfig::external("e", 0, 0, 0);
        s.sample_interval = Some(2e-3);
        assert_eq!(observe(&t, &net, &s, 0).unwrap().num_samples(), 4);
    }
}
