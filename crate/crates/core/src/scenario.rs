//! Scenario files: one TOML document describing the die, the workload, the
//! shielding setup and the analysis settings. Unknown keys are rejected and
//! `schema_version` must match.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controller::{default_increments, ControlMode, ControllerConfig, ShieldPair};
use crate::error::{Error, Result};
use crate::model::{
    validate_floorplan, Block, BlockKind, Floorplan, GridSpec, Layer, LayerStack, Rect,
};
use crate::sensors::SensorConfig;
use crate::workload::{Phase, PowerModel, BENCHMARKS};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub stack: LayerStack,
    pub grid: GridSpec,
    /// Inline floorplan; exclusive with `floorplan_file`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub floorplan: Option<Floorplan>,
    /// TOML file holding `[[blocks]]`, relative to the scenario file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub floorplan_file: Option<PathBuf>,
    pub power_model: PowerModel,
    pub workload: WorkloadConfig,
    pub shield: ShieldConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sensors: Vec<SensorConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackConfig>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    pub sample_interval: f64,
    pub samples: usize,
    /// Driven channels; the shielded blocks when empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub channels: Vec<String>,
    /// Subset of the built-in suite; all of it when empty and no other
    /// source is given.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub benchmarks: Vec<String>,
    /// Instruction trace CSV.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
    /// Inline synthetic phases.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub phases: Vec<Phase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairConfig {
    pub protected: String,
    pub generator: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShieldConfig {
    pub pairs: Vec<PairConfig>,
    /// Generator powers (W) for table calibration, starting at 0.
    pub calibration_levels: Vec<f64>,
    /// Temperature increments (°C) for the sweep.
    #[serde(default = "default_increments")]
    pub sweep: Vec<f64>,
    /// Directory with `p_table_<block>.csv` files; calibrated when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_tables: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_table: Option<PathBuf>,
    /// Replace `controller.kp` by each block's table slope.
    #[serde(default = "yes")]
    pub kp_from_table: bool,
    #[serde(default)]
    pub controller: ControllerConfig,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Leading samples left out of every metric.
    pub warmup: usize,
    /// SVF window length and stride in samples.
    pub window: usize,
    pub stride: usize,
    pub k_max: usize,
    /// Temperature gap (°C) separating STSF groups.
    pub epsilon: f64,
    pub stsf_m: Vec<usize>,
    /// Attacker's per-block sensors.
    pub observation_noise: f64,
    pub observation_quantization: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            warmup: 200,
            window: 200,
            stride: 200,
            k_max: 20,
            epsilon: 0.1,
            stsf_m: vec![1, 2, 4, 8],
            observation_noise: 0.01,
            observation_quantization: 0.0,
            dt: None,
        }
    }
}

/// Layer-placement sweep for one block and a fixed top-surface sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub block: String,
    pub sensor_row: usize,
    pub sensor_col: usize,
    pub layers: Vec<usize>,
    /// Stack for the sweep; the scenario stack when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stack: Option<LayerStack>,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut s = Scenario::parse(&text, path)?;
        s.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        s.validate()?;
        Ok(s)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Scenario> {
        let s: Scenario = toml::from_str(text).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if s.schema_version != SCHEMA_VERSION {
            return Err(Error::Config {
                path: path.to_path_buf(),
                message: format!(
                    "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                    s.schema_version
                ),
            });
        }
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn floorplan(&self) -> Result<Floorplan> {
        match (&self.floorplan, &self.floorplan_file) {
            (Some(f), None) => Ok(f.clone()),
            (None, Some(p)) => {
                let path = self.resolve(p);
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                toml::from_str(&text).map_err(|e| Error::Config {
                    path,
                    message: e.to_string(),
                })
            }
            _ => Err(Error::validation(
                "give exactly one of `floorplan` and `floorplan_file`",
            )),
        }
    }

    pub fn pairs(&self) -> Vec<ShieldPair> {
        self.shield
            .pairs
            .iter()
            .map(|p| ShieldPair::new(&p.protected, &p.generator))
            .collect()
    }

    pub fn protected(&self) -> Vec<String> {
        self.shield
            .pairs
            .iter()
            .map(|p| p.protected.clone())
            .collect()
    }

    pub fn generators(&self) -> Vec<String> {
        self.shield
            .pairs
            .iter()
            .map(|p| p.generator.clone())
            .collect()
    }

    /// Channels the workload drives.
    pub fn workload_channels(&self) -> Vec<String> {
        if self.workload.channels.is_empty() {
            self.protected()
        } else {
            self.workload.channels.clone()
        }
    }

    /// Benchmarks to run when the workload comes from the built-in suite.
    pub fn benchmark_names(&self) -> Vec<String> {
        if self.workload.benchmarks.is_empty() {
            BENCHMARKS.iter().map(|s| s.to_string()).collect()
        } else {
            self.workload.benchmarks.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fp = self.floorplan()?;
        let v = validate_floorplan(&fp, &self.stack);
        if !v.is_empty() {
            let msg: Vec<String> = v.iter().map(|v| v.to_string()).collect();
            return Err(Error::validation(msg.join("; ")));
        }
        let w = &self.workload;
        if !(w.sample_interval > 0.0) || w.samples < 3 {
            return Err(Error::validation(
                "workload needs a positive interval and at least 3 samples",
            ));
        }
        if w.trace.is_some() && !w.phases.is_empty() {
            return Err(Error::validation(
                "workload: give either `trace` or `phases`, not both",
            ));
        }
        for b in &w.benchmarks {
            if !BENCHMARKS.contains(&b.as_str()) {
                return Err(Error::validation(format!("unknown benchmark `{b}`")));
            }
        }
        if let Some(t) = &w.trace {
            let p = self.resolve(t);
            if !p.exists() {
                return Err(Error::io(
                    &p,
                    std::io::Error::from(std::io::ErrorKind::NotFound),
                ));
            }
        }
        if self.shield.pairs.is_empty() {
            return Err(Error::validation(
                "shield needs at least one protected/generator pair",
            ));
        }
        for p in &self.shield.pairs {
            for (id, kind) in [
                (&p.protected, None),
                (&p.generator, Some(BlockKind::NoiseGenerator)),
            ] {
                let b = fp
                    .block(id)
                    .ok_or_else(|| Error::UnknownBlock(id.clone()))?;
                if kind.is_some_and(|k| k != b.kind) {
                    return Err(Error::validation(format!(
                        "`{id}` is not a noise generator"
                    )));
                }
            }
        }
        for c in self.workload_channels() {
            if fp.block(&c).is_none() {
                return Err(Error::UnknownBlock(c));
            }
        }
        self.shield.controller.validate()?;
        if self
            .shield
            .sweep
            .iter()
            .any(|d| !(d.is_finite() && *d >= 0.0))
        {
            return Err(Error::validation(
                "sweep increments must be finite and >= 0",
            ));
        }
        let a = &self.analysis;
        if a.warmup + 3 > w.samples || a.k_max >= w.samples {
            return Err(Error::validation(
                "analysis warm-up and k_max leave no samples",
            ));
        }
        if a.observation_noise < 0.0 || a.observation_quantization < 0.0 || a.epsilon < 0.0 {
            return Err(Error::validation(
                "noise, quantization and epsilon must be >= 0",
            ));
        }
        if let Some(at) = &self.attack {
            let stack = at.stack.as_ref().unwrap_or(&self.stack);
            if at.layers.iter().any(|&l| l >= stack.num_layers()) {
                return Err(Error::validation("attack layer outside the stack"));
            }
            if fp.block(&at.block).is_none() {
                return Err(Error::UnknownBlock(at.block.clone()));
            }
            if at.sensor_row >= self.grid.rows || at.sensor_col >= self.grid.cols {
                return Err(Error::validation("attack sensor is off-grid"));
            }
        }
        Ok(())
    }

    /// The shipped reference die: four protected blocks, one per quadrant,
    /// each with a noise generator directly above it, plus an always-on
    /// uncore strip, on a three-layer 4 mm stack sampled every 2 ms.
    pub fn reference() -> Scenario {
        let q = [
            ("core0", Rect::new(0.0, 0.0, 2.0, 2.0)),
            ("core1", Rect::new(2.0, 0.0, 4.0, 2.0)),
            ("core2", Rect::new(0.0, 2.0, 2.0, 4.0)),
            ("core3", Rect::new(2.0, 2.0, 4.0, 4.0)),
        ];
        let mut blocks: Vec<Block> = q
            .iter()
            .map(|(id, r)| Block::new(*id, *r, 0, BlockKind::Functional))
            .collect();
        blocks.extend(
            q.iter()
                .map(|(id, r)| Block::new(format!("gen_{id}"), *r, 1, BlockKind::NoiseGenerator)),
        );
        blocks.push(Block::new(
            "uncore",
            Rect::new(0.0, 0.0, 4.0, 4.0),
            2,
            BlockKind::Functional,
        ));
        let mut power_model = PowerModel::default();
        for (i, (id, _)) in q.iter().enumerate() {
            power_model.insert(*id, 0.5 * (i + 1) as f64, 6.0e-9);
        }
        power_model.insert("uncore", 60.0, 0.0);
        Scenario {
            schema_version: SCHEMA_VERSION,
            name: "reference".into(),
            seed: 7,
            stack: LayerStack {
                layers: vec![
                    Layer::silicon(1.5e-4),
                    Layer::silicon(5.0e-6),
                    Layer::silicon(2.0e-5),
                ],
                die_width: 4.0,
                die_height: 4.0,
                ambient_temperature: 45.0,
                boundary_resistance_top: Some(5.0e-6),
                boundary_resistance_bottom: None,
            },
            grid: GridSpec::new(4, 4),
            floorplan: Some(Floorplan::new(blocks)),
            floorplan_file: None,
            power_model,
            workload: WorkloadConfig {
                sample_interval: 2e-3,
                samples: 2000,
                channels: vec![],
                benchmarks: vec![],
                trace: None,
                phases: vec![],
            },
            shield: ShieldConfig {
                pairs: q
                    .iter()
                    .map(|(id, _)| PairConfig {
                        protected: id.to_string(),
                        generator: format!("gen_{id}"),
                    })
                    .collect(),
                calibration_levels: vec![0.0, 1.0, 2.0, 4.0, 8.0, 16.0],
                sweep: default_increments(),
                p_tables: None,
                t_table: None,
                kp_from_table: true,
                controller: ControllerConfig {
                    power_budget: 16.0,
                    mode: ControlMode::Predictive,
                    ..ControllerConfig::default()
                },
            },
            analysis: AnalysisConfig::default(),
            sensors: vec![],
            attack: Some(AttackConfig {
                block: "core0".into(),
                sensor_row: 0,
                sensor_col: 0,
                layers: vec![0, 3],
                stack: Some(LayerStack {
                    layers: vec![Layer::silicon(3.0e-4); 4],
                    die_width: 4.0,
                    die_height: 4.0,
                    ambient_temperature: 45.0,
                    boundary_resistance_top: Some(5.0e-6),
                    boundary_resistance_bottom: None,
                }),
            }),
            base_dir: PathBuf::new(),
        }
    }
}
