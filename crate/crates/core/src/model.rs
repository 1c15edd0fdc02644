//! Shared domain types: floorplan, layer stack, grid discretization and
//! uniformly sampled traces.
//!
//! Geometry is in millimeters, material constants in SI units, temperatures
//! in °C. Everything here is immutable once built.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default upper bound on `rows * cols * layers`.
pub const DEFAULT_CELL_BUDGET: usize = 65_536;

/// Axis-aligned rectangle in millimeters, `(x0, y0)` lower-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Rect { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Area of the intersection with `other`, zero when disjoint.
    pub fn overlap(&self, other: &Rect) -> f64 {
        let w = self.x1.min(other.x1) - self.x0.max(other.x0);
        let h = self.y1.min(other.y1) - self.y0.max(other.y0);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }

    /// Half-open containment test, `[x0, x1) x [y0, y1)`.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Functional,
    NoiseGenerator,
    SensorRegion,
}

/// An opaque power-producing rectangle on one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Block {
    pub id: String,
    pub rect: Rect,
    pub layer: usize,
    pub kind: BlockKind,
}

impl Block {
    pub fn new(id: impl Into<String>, rect: Rect, layer: usize, kind: BlockKind) -> Self {
        Block {
            id: id.into(),
            rect,
            layer,
            kind,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Floorplan {
    pub blocks: Vec<Block>,
}

impl Floorplan {
    pub fn new(blocks: Vec<Block>) -> Self {
        Floorplan { blocks }
    }

    pub fn block(&self, id: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.id == id)
    }

    pub fn ids_of_kind(&self, kind: BlockKind) -> Vec<String> {
        self.blocks
            .iter()
            .filter(|b| b.kind == kind)
            .map(|b| b.id.clone())
            .collect()
    }
}

/// One die layer of the stack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    /// meters
    pub thickness: f64,
    /// W/(m·K)
    pub conductivity: f64,
    /// J/(m³·K)
    pub volumetric_heat_capacity: f64,
    /// Bonding resistance to the layer above, (K·m²)/W. Zero for a perfect bond.
    #[serde(default)]
    pub interface_resistance: f64,
}

impl Layer {
    pub fn silicon(thickness: f64) -> Self {
        Layer {
            thickness,
            conductivity: 150.0,
            volumetric_heat_capacity: 1.75e6,
            interface_resistance: 0.0,
        }
    }
}

/// Layer 0 is the bottom of the stack; the last layer is the top surface.
///
/// A boundary resistance of `None` makes that surface adiabatic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerStack {
    pub layers: Vec<Layer>,
    pub die_width: f64,
    pub die_height: f64,
    pub ambient_temperature: f64,
    pub boundary_resistance_top: Option<f64>,
    pub boundary_resistance_bottom: Option<f64>,
}

impl LayerStack {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn top_layer(&self) -> usize {
        self.layers.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    #[serde(default = "default_cell_budget")]
    pub cell_budget: usize,
}

fn default_cell_budget() -> usize {
    DEFAULT_CELL_BUDGET
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize) -> Self {
        GridSpec {
            rows,
            cols,
            cell_budget: DEFAULT_CELL_BUDGET,
        }
    }
}

/// A single failed floorplan/stack invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DegenerateRect { block: String },
    OutOfDie { block: String },
    LayerOutOfRange { block: String, layer: usize },
    DuplicateId { block: String },
    EmptyStack,
    NonPositiveConstant { field: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DegenerateRect { block } => write!(f, "block `{block}`: degenerate rect"),
            Violation::OutOfDie { block } => write!(f, "block `{block}`: rect outside die"),
            Violation::LayerOutOfRange { block, layer } => {
                write!(f, "block `{block}`: layer {layer} not in stack")
            }
            Violation::DuplicateId { block } => write!(f, "block `{block}`: duplicate id"),
            Violation::EmptyStack => write!(f, "stack has no layers"),
            Violation::NonPositiveConstant { field } => {
                write!(f, "`{field}` must be strictly positive")
            }
        }
    }
}

/// Checks every floorplan and stack invariant and returns the violations
/// found, in a deterministic order. An empty list means the pair is valid.
pub fn validate_floorplan(floorplan: &Floorplan, stack: &LayerStack) -> Vec<Violation> {
    let mut out = Vec::new();

    if stack.layers.is_empty() {
        out.push(Violation::EmptyStack);
    }
    let mut positive = |name: String, v: f64| {
        if !(v > 0.0 && v.is_finite()) {
            out.push(Violation::NonPositiveConstant { field: name });
        }
    };
    positive("die_width".into(), stack.die_width);
    positive("die_height".into(), stack.die_height);
    if let Some(r) = stack.boundary_resistance_top {
        positive("boundary_resistance_top".into(), r);
    }
    if let Some(r) = stack.boundary_resistance_bottom {
        positive("boundary_resistance_bottom".into(), r);
    }
    for (i, layer) in stack.layers.iter().enumerate() {
        positive(format!("layers[{i}].thickness"), layer.thickness);
        positive(format!("layers[{i}].conductivity"), layer.conductivity);
        positive(
            format!("layers[{i}].volumetric_heat_capacity"),
            layer.volumetric_heat_capacity,
        );
    }
    for (i, layer) in stack.layers.iter().enumerate() {
        if !(layer.interface_resistance >= 0.0 && layer.interface_resistance.is_finite()) {
            out.push(Violation::NonPositiveConstant {
                field: format!("layers[{i}].interface_resistance"),
            });
        }
    }

    let die = Rect::new(0.0, 0.0, stack.die_width, stack.die_height);
    let mut seen = HashSet::new();
    for block in &floorplan.blocks {
        let r = &block.rect;
        let finite = [r.x0, r.y0, r.x1, r.y1].iter().all(|v| v.is_finite());
        if !finite || r.x0 >= r.x1 || r.y0 >= r.y1 {
            out.push(Violation::DegenerateRect {
                block: block.id.clone(),
            });
        } else if r.x0 < die.x0 || r.y0 < die.y0 || r.x1 > die.x1 || r.y1 > die.y1 {
            out.push(Violation::OutOfDie {
                block: block.id.clone(),
            });
        }
        if block.layer >= stack.layers.len() {
            out.push(Violation::LayerOutOfRange {
                block: block.id.clone(),
                layer: block.layer,
            });
        }
        if !seen.insert(block.id.as_str()) {
            out.push(Violation::DuplicateId {
                block: block.id.clone(),
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    Instructions,
    Watts,
    Celsius,
    /// Dimensionless controller outputs such as security levels.
    Level,
}

impl Unit {
    /// Whether resampling sums (true) or averages (false) within a bin.
    pub fn is_additive(self) -> bool {
        matches!(self, Unit::Instructions | Unit::Watts)
    }
}

/// Uniformly sampled multi-channel time series, stored row-major
/// (`num_samples x num_channels`).
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    sample_interval: f64,
    channels: Vec<String>,
    values: Vec<f64>,
    unit: Unit,
}

impl Trace {
    pub fn new(
        sample_interval: f64,
        channels: Vec<String>,
        values: Vec<f64>,
        unit: Unit,
    ) -> Result<Self> {
        if !(sample_interval > 0.0 && sample_interval.is_finite()) {
            return Err(Error::validation(format!(
                "sample interval must be positive, got {sample_interval}"
            )));
        }
        if channels.is_empty() {
            return Err(Error::validation("trace needs at least one channel"));
        }
        if values.len() % channels.len() != 0 {
            return Err(Error::LengthMismatch {
                expected: channels.len() * (values.len() / channels.len() + 1),
                actual: values.len(),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite value at sample {}, channel `{}`",
                pos / channels.len(),
                channels[pos % channels.len()]
            )));
        }
        Ok(Trace {
            sample_interval,
            channels,
            values,
            unit,
        })
    }

    pub fn from_rows(
        sample_interval: f64,
        channels: Vec<String>,
        rows: &[Vec<f64>],
        unit: Unit,
    ) -> Result<Self> {
        let width = channels.len();
        let mut values = Vec::with_capacity(rows.len() * width);
        for row in rows {
            if row.len() != width {
                return Err(Error::LengthMismatch {
                    expected: width,
                    actual: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Trace::new(sample_interval, channels, values, unit)
    }

    /// Single-channel convenience constructor.
    pub fn single(
        sample_interval: f64,
        channel: impl Into<String>,
        values: Vec<f64>,
        unit: Unit,
    ) -> Result<Self> {
        Trace::new(sample_interval, vec![channel.into()], values, unit)
    }

    pub fn sample_interval(&self) -> f64 {
        self.sample_interval
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn num_samples(&self) -> usize {
        self.values.len() / self.channels.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.channels.len();
        &self.values[i * w..(i + 1) * w]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.channels.len())
    }

    pub fn get(&self, sample: usize, channel: usize) -> f64 {
        self.values[sample * self.channels.len() + channel]
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c == name)
    }

    pub fn column(&self, channel: usize) -> Vec<f64> {
        self.rows().map(|r| r[channel]).collect()
    }

    /// Time stamp of sample `i`, `i * sample_interval`.
    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.sample_interval
    }

    /// Keeps only the named channels, in the given order.
    pub fn select(&self, names: &[String]) -> Result<Trace> {
        let idx = names
            .iter()
            .map(|n| {
                self.channel_index(n)
                    .ok_or_else(|| Error::UnknownBlock(n.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut values = Vec::with_capacity(self.num_samples() * idx.len());
        for row in self.rows() {
            values.extend(idx.iter().map(|&c| row[c]));
        }
        Trace::new(self.sample_interval, names.to_vec(), values, self.unit)
    }

    /// Samples `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Trace> {
        if start > end || end > self.num_samples() {
            return Err(Error::InsufficientSamples {
                needed: end,
                available: self.num_samples(),
            });
        }
        let w = self.channels.len();
        Trace::new(
            self.sample_interval,
            self.channels.clone(),
            self.values[start * w..end * w].to_vec(),
            self.unit,
        )
    }

    /// Per-channel arithmetic mean.
    pub fn channel_means(&self) -> Vec<f64> {
        let n = self.num_samples().max(1) as f64;
        let mut sums = vec![0.0; self.num_channels()];
        for row in self.rows() {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        sums.into_iter().map(|s| s / n).collect()
    }

    /// Mean over all samples of the row sums (total per sample).
    pub fn mean_total(&self) -> f64 {
        self.channel_means().iter().sum()
    }
}

/// Re-bins a trace onto a coarser interval that is an integer multiple of
/// the current one. Additive units are summed per bin, temperatures
/// averaged. A trailing partial bin is dropped.
pub fn resample(trace: &Trace, new_interval: f64) -> Result<Trace> {
    let ratio = new_interval / trace.sample_interval;
    let factor = ratio.round();
    if !(ratio.is_finite() && factor >= 1.0 && (ratio - factor).abs() <= 1e-9 * ratio.max(1.0)) {
        return Err(Error::NonIntegerRatio { ratio });
    }
    let factor = factor as usize;
    let w = trace.num_channels();
    let bins = trace.num_samples() / factor;
    let mut values = vec![0.0; bins * w];
    for b in 0..bins {
        let out = &mut values[b * w..(b + 1) * w];
        for i in 0..factor {
            for (o, v) in out.iter_mut().zip(trace.row(b * factor + i)) {
                *o += v;
            }
        }
        if !trace.unit.is_additive() {
            out.iter_mut().for_each(|o| *o /= factor as f64);
        }
    }
    Trace::new(
        trace.sample_interval * factor as f64,
        trace.channels.clone(),
        values,
        trace.unit,
    )
}
