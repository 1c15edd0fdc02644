//! Per-block activity traces: synthetic generation, ingestion from CSV, and
//! a linear activity-to-power model.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_trace, TraceSchema};
use crate::model::{Trace, Unit};

/// `P = static_power + energy_per_instruction * count / interval`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockPower {
    pub static_power: f64,
    pub energy_per_instruction: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PowerModel {
    pub blocks: BTreeMap<String, BlockPower>,
}

impl PowerModel {
    pub fn insert(
        &mut self,
        block: impl Into<String>,
        static_power: f64,
        energy_per_instruction: f64,
    ) {
        self.blocks.insert(
            block.into(),
            BlockPower {
                static_power,
                energy_per_instruction,
            },
        );
    }
}

/// Converts instruction counts to watts. Blocks present in the model but
/// absent from the trace are appended as static-only channels.
pub fn to_power(inst: &Trace, model: &PowerModel) -> Result<Trace> {
    if inst.unit() != Unit::Instructions {
        return Err(Error::validation("to_power expects an instruction trace"));
    }
    let coeffs = inst
        .channels()
        .iter()
        .map(|c| {
            model
                .blocks
                .get(c)
                .copied()
                .ok_or_else(|| Error::validation(format!("no power model entry for `{c}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    for (id, bp) in &model.blocks {
        if bp.static_power < 0.0 || bp.energy_per_instruction < 0.0 {
            return Err(Error::validation(format!(
                "negative power coefficient for `{id}`"
            )));
        }
    }
    let extra: Vec<(&String, &BlockPower)> = model
        .blocks
        .iter()
        .filter(|(id, _)| !inst.channels().contains(id))
        .collect();
    let dt = inst.sample_interval();
    let width = coeffs.len() + extra.len();
    let mut values = Vec::with_capacity(inst.num_samples() * width);
    for row in inst.rows() {
        values.extend(
            row.iter()
                .zip(&coeffs)
                .map(|(n, bp)| bp.static_power + bp.energy_per_instruction * n / dt),
        );
        values.extend(extra.iter().map(|(_, bp)| bp.static_power));
    }
    let mut channels = inst.channels().to_vec();
    channels.extend(extra.iter().map(|(id, _)| (*id).clone()));
    Trace::new(dt, channels, values, Unit::Watts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Constant,
    Square,
    Sawtooth,
    Burst,
}

/// Activity of one block during a phase. `rate` is the peak rate in
/// instructions per sample, `base` the idle rate between peaks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Activity {
    pub block: String,
    pub pattern: Pattern,
    pub rate: f64,
    #[serde(default)]
    pub base: f64,
    #[serde(default = "default_period")]
    pub period: usize,
    /// Fraction of the period spent at `rate` (square/burst).
    #[serde(default = "default_duty")]
    pub duty: f64,
    /// Relative std of multiplicative Gaussian jitter.
    #[serde(default)]
    pub jitter: f64,
}

fn default_period() -> usize {
    10
}

fn default_duty() -> f64 {
    0.5
}

impl Activity {
    pub fn new(block: &str, pattern: Pattern, base: f64, rate: f64, period: usize) -> Self {
        Activity {
            block: block.to_string(),
            pattern,
            rate,
            base,
            period,
            duty: 0.5,
            jitter: 0.0,
        }
    }

    pub fn duty(mut self, duty: f64) -> Self {
        self.duty = duty;
        self
    }

    pub fn jitter(mut self, jitter: f64) -> Self {
        self.jitter = jitter;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub duration: usize,
    pub activities: Vec<Activity>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub sample_interval: f64,
    pub channels: Vec<String>,
    pub phases: Vec<Phase>,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::validation("workload has no phases"));
        }
        for (i, ph) in self.phases.iter().enumerate() {
            if ph.duration == 0 {
                return Err(Error::validation(format!("phase {i} has zero duration")));
            }
            for a in &ph.activities {
                if !self.channels.contains(&a.block) {
                    return Err(Error::UnknownBlock(a.block.clone()));
                }
                if a.rate < 0.0 || a.base < 0.0 || a.jitter < 0.0 {
                    return Err(Error::validation(format!(
                        "phase {i}, block `{}`: rates and jitter must be >= 0",
                        a.block
                    )));
                }
                if a.period == 0 || !(0.0..=1.0).contains(&a.duty) {
                    return Err(Error::validation(format!(
                        "phase {i}, block `{}`: period must be >= 1 and duty in [0, 1]",
                        a.block
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        self.phases.iter().map(|p| p.duration).sum()
    }
}

/// Generates an instruction-count trace. Output depends only on `spec`
/// (including its seed).
pub fn synth_workload(spec: &SynthSpec) -> Result<Trace> {
    spec.validate()?;
    let width = spec.channels.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut values = Vec::with_capacity(spec.num_samples() * width);
    for phase in &spec.phases {
        let idx: Vec<usize> = phase
            .activities
            .iter()
            .map(|a| spec.channels.iter().position(|c| c == &a.block).unwrap())
            .collect();
        let mut burst_left = vec![0usize; phase.activities.len()];
        for t in 0..phase.duration {
            let mut row = vec![0.0; width];
            for (n, a) in phase.activities.iter().enumerate() {
                let on_len = ((a.duty * a.period as f64).round() as usize).max(1);
                let level = match a.pattern {
                    Pattern::Constant => a.rate,
                    Pattern::Square => {
                        if t % a.period < on_len {
                            a.rate
                        } else {
                            a.base
                        }
                    }
                    Pattern::Sawtooth => {
                        a.base + (a.rate - a.base) * (t % a.period) as f64 / a.period as f64
                    }
                    Pattern::Burst => {
                        if burst_left[n] == 0 && rng.random::<f64>() < 1.0 / a.period as f64 {
                            burst_left[n] = on_len;
                        }
                        if burst_left[n] > 0 {
                            burst_left[n] -= 1;
                            a.rate
                        } else {
                            a.base
                        }
                    }
                };
                let noisy = if a.jitter > 0.0 {
                    level * (1.0 + a.jitter * unit_normal.sample(&mut rng))
                } else {
                    level
                };
                row[idx[n]] += noisy.max(0.0);
            }
            values.extend(row);
        }
    }
    Trace::new(
        spec.sample_interval,
        spec.channels.clone(),
        values,
        Unit::Instructions,
    )
}

/// Reads an instruction trace CSV and checks it carries `channels`.
pub fn load_trace(path: &Path, channels: Option<Vec<String>>) -> Result<Trace> {
    let trace = read_trace(
        path,
        &TraceSchema {
            unit: Unit::Instructions,
            channels,
        },
    )?;
    log::info!(
        "loaded {}: {} samples x {} channels",
        path.display(),
        trace.num_samples(),
        trace.num_channels()
    );
    Ok(trace)
}

/// Names of the shipped synthetic benchmark suite, in report order.
pub const BENCHMARKS: [&str; 15] = [
    "steady_mix",
    "square_fast",
    "square_slow",
    "sawtooth_ramp",
    "burst_sparse",
    "burst_dense",
    "phase_change",
    "fp_heavy",
    "memory_bound",
    "branchy",
    "crypto_loop",
    "stream",
    "compress",
    "nbody",
    "spiky_idle",
];

/// Builds one of the [`BENCHMARKS`] over `channels` (at least four: the
/// first four are driven, the rest stay idle), `samples` long.
pub fn benchmark(
    name: &str,
    channels: &[String],
    sample_interval: f64,
    samples: usize,
    seed: u64,
) -> Result<SynthSpec> {
    use Pattern::*;
    if channels.len() < 4 {
        return Err(Error::validation("benchmarks drive four blocks"));
    }
    let [a, b, c, d] = [&channels[0], &channels[1], &channels[2], &channels[3]].map(String::as_str);
    let k = 1.0e6;
    let acts: Vec<Activity> = match name {
        "steady_mix" => vec![
            Activity::new(a, Square, 0.5 * k, 1.6 * k, 240).jitter(0.08),
            Activity::new(b, Constant, 0.0, 0.4 * k, 1).jitter(0.15),
            Activity::new(c, Sawtooth, 0.2 * k, 1.0 * k, 320).jitter(0.05),
            Activity::new(d, Constant, 0.0, 0.7 * k, 1).jitter(0.1),
        ],
        "square_fast" => vec![
            Activity::new(a, Square, 0.2 * k, 1.8 * k, 40).jitter(0.03),
            Activity::new(b, Square, 0.1 * k, 0.9 * k, 60),
            Activity::new(c, Constant, 0.0, 0.5 * k, 1).jitter(0.05),
            Activity::new(d, Constant, 0.0, 0.3 * k, 1).jitter(0.05),
        ],
        "square_slow" => vec![
            Activity::new(a, Square, 0.1 * k, 1.7 * k, 300).jitter(0.03),
            Activity::new(b, Square, 0.3 * k, 1.1 * k, 200).duty(0.3),
            Activity::new(c, Constant, 0.0, 0.6 * k, 1).jitter(0.05),
            Activity::new(d, Constant, 0.0, 0.2 * k, 1).jitter(0.05),
        ],
        "sawtooth_ramp" => vec![
            Activity::new(a, Sawtooth, 0.2 * k, 1.8 * k, 160).jitter(0.02),
            Activity::new(b, Sawtooth, 0.0, 0.8 * k, 240),
            Activity::new(c, Constant, 0.0, 0.4 * k, 1).jitter(0.05),
            Activity::new(d, Square, 0.1 * k, 0.6 * k, 400),
        ],
        "burst_sparse" => vec![
            Activity::new(a, Burst, 0.2 * k, 2.0 * k, 150)
                .duty(0.15)
                .jitter(0.05),
            Activity::new(b, Burst, 0.1 * k, 1.0 * k, 200).duty(0.1),
            Activity::new(c, Constant, 0.0, 0.5 * k, 1).jitter(0.1),
            Activity::new(d, Constant, 0.0, 0.3 * k, 1).jitter(0.1),
        ],
        "burst_dense" => vec![
            Activity::new(a, Burst, 0.3 * k, 1.8 * k, 50)
                .duty(0.4)
                .jitter(0.05),
            Activity::new(b, Burst, 0.2 * k, 1.2 * k, 70).duty(0.3),
            Activity::new(c, Burst, 0.1 * k, 0.8 * k, 90).duty(0.3),
            Activity::new(d, Constant, 0.0, 0.3 * k, 1).jitter(0.1),
        ],
        "phase_change" => {
            let half = samples / 2;
            let spec = SynthSpec {
                sample_interval,
                channels: channels.to_vec(),
                phases: vec![
                    Phase {
                        duration: half.max(1),
                        activities: vec![
                            Activity::new(a, Square, 0.2 * k, 1.2 * k, 100).jitter(0.05),
                            Activity::new(b, Constant, 0.0, 1.0 * k, 1).jitter(0.05),
                            Activity::new(c, Constant, 0.0, 0.3 * k, 1).jitter(0.05),
                            Activity::new(d, Constant, 0.0, 0.2 * k, 1).jitter(0.05),
                        ],
                    },
                    Phase {
                        duration: (samples - half).max(1),
                        activities: vec![
                            Activity::new(a, Square, 0.6 * k, 1.8 * k, 100).jitter(0.05),
                            Activity::new(b, Constant, 0.0, 0.3 * k, 1).jitter(0.05),
                            Activity::new(c, Square, 0.2 * k, 1.0 * k, 150),
                            Activity::new(d, Constant, 0.0, 0.4 * k, 1).jitter(0.05),
                        ],
                    },
                ],
                seed,
            };
            return Ok(spec);
        }
        "fp_heavy" => vec![
            Activity::new(a, Constant, 0.0, 0.5 * k, 1).jitter(0.1),
            Activity::new(b, Square, 0.4 * k, 1.9 * k, 120).jitter(0.04),
            Activity::new(c, Constant, 0.0, 0.4 * k, 1).jitter(0.1),
            Activity::new(d, Square, 0.1 * k, 0.5 * k, 120),
        ],
        "memory_bound" => vec![
            Activity::new(a, Constant, 0.0, 0.3 * k, 1).jitter(0.1),
            Activity::new(b, Constant, 0.0, 0.2 * k, 1).jitter(0.1),
            Activity::new(c, Square, 0.3 * k, 1.6 * k, 180)
                .duty(0.6)
                .jitter(0.05),
            Activity::new(d, Sawtooth, 0.1 * k, 0.7 * k, 90),
        ],
        "branchy" => vec![
            Activity::new(a, Burst, 0.4 * k, 1.5 * k, 30)
                .duty(0.3)
                .jitter(0.1),
            Activity::new(b, Constant, 0.0, 0.2 * k, 1).jitter(0.1),
            Activity::new(c, Constant, 0.0, 0.6 * k, 1).jitter(0.1),
            Activity::new(d, Burst, 0.2 * k, 1.4 * k, 30)
                .duty(0.3)
                .jitter(0.1),
        ],
        "crypto_loop" => vec![
            Activity::new(a, Square, 0.1 * k, 2.0 * k, 160)
                .duty(0.25)
                .jitter(0.02),
            Activity::new(b, Constant, 0.0, 0.1 * k, 1).jitter(0.1),
            Activity::new(c, Square, 0.2 * k, 0.9 * k, 160).duty(0.25),
            Activity::new(d, Constant, 0.0, 0.5 * k, 1).jitter(0.1),
        ],
        "stream" => vec![
            Activity::new(a, Sawtooth, 0.3 * k, 1.0 * k, 60),
            Activity::new(b, Constant, 0.0, 0.2 * k, 1).jitter(0.1),
            Activity::new(c, Sawtooth, 0.4 * k, 1.9 * k, 200).jitter(0.03),
            Activity::new(d, Constant, 0.0, 0.4 * k, 1).jitter(0.1),
        ],
        "compress" => vec![
            Activity::new(a, Burst, 0.5 * k, 1.7 * k, 100)
                .duty(0.5)
                .jitter(0.05),
            Activity::new(b, Constant, 0.0, 0.3 * k, 1).jitter(0.1),
            Activity::new(c, Burst, 0.3 * k, 1.3 * k, 120)
                .duty(0.4)
                .jitter(0.05),
            Activity::new(d, Constant, 0.0, 0.6 * k, 1).jitter(0.1),
        ],
        "nbody" => vec![
            Activity::new(a, Square, 0.6 * k, 1.2 * k, 250).jitter(0.05),
            Activity::new(b, Sawtooth, 0.3 * k, 1.9 * k, 250).jitter(0.03),
            Activity::new(c, Constant, 0.0, 0.3 * k, 1).jitter(0.1),
            Activity::new(d, Constant, 0.0, 0.2 * k, 1).jitter(0.1),
        ],
        "spiky_idle" => vec![
            Activity::new(a, Burst, 0.1 * k, 2.0 * k, 120)
                .duty(0.05)
                .jitter(0.05),
            Activity::new(b, Constant, 0.0, 0.2 * k, 1).jitter(0.1),
            Activity::new(c, Burst, 0.1 * k, 1.2 * k, 160).duty(0.05),
            Activity::new(d, Constant, 0.0, 0.3 * k, 1).jitter(0.1),
        ],
        other => return Err(Error::validation(format!("unknown benchmark `{other}`"))),
    };
    Ok(SynthSpec {
        sample_interval,
        channels: channels.to_vec(),
        phases: vec![Phase {
            duration: samples.max(1),
            activities: acts,
        }],
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(pattern: Pattern, base: f64, rate: f64, period: usize, n: usize) -> Trace {
        synth_workload(&SynthSpec {
            sample_interval: 2e-3,
            channels: vec!["a".into()],
            phases: vec![Phase {
                duration: n,
                activities: vec![Activity::new("a", pattern, base, rate, period)],
            }],
            seed: 7,
        })
        .unwrap()
    }

    #[test]
    fn constant_pattern() {
        let t = one(Pattern::Constant, 0.0, 100.0, 1, 20);
        assert!(t.values().iter().all(|&v| v == 100.0));
    }

    #[test]
    fn square_pattern_plateaus() {
        let t = one(Pattern::Square, 0.0, 100.0, 10, 20);
        let expect: Vec<f64> = (0..20)
            .map(|i| if i % 10 < 5 { 100.0 } else { 0.0 })
            .collect();
        assert_eq!(t.values(), &expect[..]);
    }

    #[test]
    fn sawtooth_and_burst_shapes() {
        let t = one(Pattern::Sawtooth, 0.0, 10.0, 5, 10);
        assert_eq!(&t.values()[..5], &[0.0, 2.0, 4.0, 6.0, 8.0]);
        let b = one(Pattern::Burst, 1.0, 9.0, 20, 400);
        assert!(b.values().iter().all(|&v| v == 1.0 || v == 9.0));
        assert!(b.values().iter().any(|&v| v == 9.0));
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        let chans: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        for name in BENCHMARKS {
            let s = benchmark(name, &chans, 2e-3, 300, 11).unwrap();
            assert_eq!(
                synth_workload(&s).unwrap(),
                synth_workload(&s).unwrap(),
                "{name}"
            );
        }
        let s1 = benchmark("burst_sparse", &chans, 2e-3, 300, 1).unwrap();
        let s2 = benchmark("burst_sparse", &chans, 2e-3, 300, 2).unwrap();
        assert_ne!(synth_workload(&s1).unwrap(), synth_workload(&s2).unwrap());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = SynthSpec {
            sample_interval: 1e-3,
            channels: vec!["a".into()],
            phases: vec![Phase {
                duration: 0,
                activities: vec![],
            }],
            seed: 0,
        };
        assert!(synth_workload(&s).is_err());
        s.phases[0].duration = 3;
        s.phases[0]
            .activities
            .push(Activity::new("a", Pattern::Constant, 0.0, -1.0, 1));
        assert!(synth_workload(&s).is_err());
        s.phases[0].activities[0].block = "zz".into();
        assert!(matches!(synth_workload(&s), Err(Error::UnknownBlock(_))));
    }

    #[test]
    fn power_model_arithmetic() {
        let mut model = PowerModel::default();
        model.insert("a", 0.25, 1e-9);
        model.insert("cache", 3.0, 0.0);
        let inst = Trace::single(2e-3, "a", vec![0.0, 2e6, 4e6], Unit::Instructions).unwrap();
        let p = to_power(&inst, &model).unwrap();
        assert_eq!(p.channels(), &["a".to_string(), "cache".to_string()]);
        assert_eq!(p.get(0, 0), 0.25);
        // 1 nJ * 2e6 / 2 ms = 1 W dynamic
        assert!((p.get(1, 0) - 1.25).abs() < 1e-12);
        assert!((p.get(2, 0) - 0.25 - 2.0 * (p.get(1, 0) - 0.25)).abs() < 1e-12);
        assert_eq!(p.get(2, 1), 3.0);

        let empty = PowerModel::default();
        assert!(to_power(&inst, &empty).is_err());
    }

    #[test]
    fn load_trace_reports_missing_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.csv");
        std::fs::write(&path, "time_s,a\n0,1\n0.002,2\n0.004,3\n").unwrap();
        assert_eq!(load_trace(&path, None).unwrap().num_samples(), 3);
        assert!(matches!(
            load_trace(&path, Some(vec!["b".into()])),
            Err(Error::MissingColumn { .. })
        ));
    }
}
