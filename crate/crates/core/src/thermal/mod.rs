//! Compact RC thermal grid: network assembly from floorplan and stack,
//! steady-state and backward-Euler transient solves.
//!
//! Every layer is split into `rows x cols` cells. Neighboring cells share a
//! lateral conductance `k * (t * w) / d`, vertically stacked cells are joined
//! through the two half-thicknesses (plus any bonding resistance) in series,
//! and the top/bottom surfaces couple to ambient through their boundary
//! resistances. Solves work on offsets from ambient, `G * dT = P`.

mod sparse;

use std::collections::BTreeMap;
use std::sync::OnceLock;

pub use sparse::{BandCholesky, CsrMatrix};

use crate::error::{Error, Result};
use crate::model::{validate_floorplan, Floorplan, GridSpec, LayerStack, Trace, Unit};

/// Cells covered by a block, with weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCells {
    pub cells: Vec<usize>,
    pub weights: Vec<f64>,
}

impl BlockCells {
    /// Weighted mean of `temperatures` over these cells.
    pub fn mean(&self, temperatures: &[f64]) -> f64 {
        self.cells
            .iter()
            .zip(&self.weights)
            .map(|(&c, w)| temperatures[c] * w)
            .sum()
    }
}

#[derive(Debug)]
pub struct ThermalNetwork {
    layers: usize,
    rows: usize,
    cols: usize,
    ambient: f64,
    conductance: CsrMatrix,
    ambient_conductance: Vec<f64>,
    capacitance: Vec<f64>,
    block_cells: BTreeMap<String, BlockCells>,
    perm: Vec<usize>,
    steady: OnceLock<std::result::Result<BandCholesky, ()>>,
}

/// Temperatures in °C for every cell at time `time`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThermalState {
    pub temperatures: Vec<f64>,
    pub time: f64,
}

impl ThermalState {
    pub fn uniform(num_cells: usize, temperature: f64) -> Self {
        ThermalState {
            temperatures: vec![temperature; num_cells],
            time: 0.0,
        }
    }
}

/// Builds the conductance matrix and capacitance vector for a stack.
pub fn build_network(
    floorplan: &Floorplan,
    stack: &LayerStack,
    grid: GridSpec,
) -> Result<ThermalNetwork> {
    let violations = validate_floorplan(floorplan, stack);
    if !violations.is_empty() {
        let msg: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(Error::validation(msg.join("; ")));
    }
    let (rows, cols, layers) = (grid.rows, grid.cols, stack.num_layers());
    if rows == 0 || cols == 0 {
        return Err(Error::validation("grid rows and cols must be positive"));
    }
    if rows * cols * layers > grid.cell_budget {
        return Err(Error::validation(format!(
            "{rows}x{cols}x{layers} grid exceeds the cell budget of {}",
            grid.cell_budget
        )));
    }

    let n = rows * cols * layers;
    let dx = stack.die_width / cols as f64 * 1e-3;
    let dy = stack.die_height / rows as f64 * 1e-3;
    let area = dx * dy;
    let index = |l: usize, r: usize, c: usize| (l * rows + r) * cols + c;

    let mut triplets = Vec::with_capacity(n * 7);
    let mut couple = |i: usize, j: usize, g: f64| {
        triplets.push((i, i, g));
        triplets.push((j, j, g));
        triplets.push((i, j, -g));
        triplets.push((j, i, -g));
    };
    let mut capacitance = vec![0.0; n];
    for (l, layer) in stack.layers.iter().enumerate() {
        let gx = layer.conductivity * layer.thickness * dy / dx;
        let gy = layer.conductivity * layer.thickness * dx / dy;
        for r in 0..rows {
            for c in 0..cols {
                let i = index(l, r, c);
                capacitance[i] = layer.volumetric_heat_capacity * area * layer.thickness;
                if c + 1 < cols {
                    couple(i, index(l, r, c + 1), gx);
                }
                if r + 1 < rows {
                    couple(i, index(l, r + 1, c), gy);
                }
            }
        }
        if l + 1 < layers {
            let above = &stack.layers[l + 1];
            let specific = layer.thickness / (2.0 * layer.conductivity)
                + layer.interface_resistance
                + above.thickness / (2.0 * above.conductivity);
            let gz = area / specific;
            for r in 0..rows {
                for c in 0..cols {
                    couple(index(l, r, c), index(l + 1, r, c), gz);
                }
            }
        }
    }

    let mut ambient_conductance = vec![0.0; n];
    let mut boundary = |layer: usize, resistance: Option<f64>| {
        if let Some(rb) = resistance {
            for r in 0..rows {
                for c in 0..cols {
                    ambient_conductance[index(layer, r, c)] += area / rb;
                }
            }
        }
    };
    boundary(layers - 1, stack.boundary_resistance_top);
    boundary(0, stack.boundary_resistance_bottom);
    triplets.extend(
        ambient_conductance
            .iter()
            .enumerate()
            .map(|(i, &g)| (i, i, g)),
    );
    let conductance = CsrMatrix::from_triplets(n, triplets);

    let mut block_cells = BTreeMap::new();
    let cw = stack.die_width / cols as f64;
    let ch = stack.die_height / rows as f64;
    for block in &floorplan.blocks {
        let mut cells = Vec::new();
        let mut weights = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let (cx, cy) = ((c as f64 + 0.5) * cw, (r as f64 + 0.5) * ch);
                if !block.rect.contains(cx, cy) {
                    continue;
                }
                let cell = crate::model::Rect::new(
                    c as f64 * cw,
                    r as f64 * ch,
                    (c + 1) as f64 * cw,
                    (r + 1) as f64 * ch,
                );
                cells.push(index(block.layer, r, c));
                weights.push(block.rect.overlap(&cell));
            }
        }
        if cells.is_empty() {
            return Err(Error::BlockUnresolved(block.id.clone()));
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        block_cells.insert(block.id.clone(), BlockCells { cells, weights });
    }

    Ok(ThermalNetwork {
        layers,
        rows,
        cols,
        ambient: stack.ambient_temperature,
        conductance,
        ambient_conductance,
        capacitance,
        block_cells,
        perm: band_ordering(layers, rows, cols),
        steady: OnceLock::new(),
    })
}

/// Orders cells so the largest grid dimension varies slowest, which keeps
/// the half-bandwidth at the product of the two smaller dimensions.
fn band_ordering(layers: usize, rows: usize, cols: usize) -> Vec<usize> {
    let mut dims = [(layers, 0usize), (rows, 1), (cols, 2)];
    dims.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut perm = Vec::with_capacity(layers * rows * cols);
    for a in 0..dims[0].0 {
        for b in 0..dims[1].0 {
            for c in 0..dims[2].0 {
                let mut lrc = [0usize; 3];
                lrc[dims[0].1] = a;
                lrc[dims[1].1] = b;
                lrc[dims[2].1] = c;
                perm.push((lrc[0] * rows + lrc[1]) * cols + lrc[2]);
            }
        }
    }
    perm
}

impl ThermalNetwork {
    pub fn num_cells(&self) -> usize {
        self.capacitance.len()
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn ambient(&self) -> f64 {
        self.ambient
    }

    pub fn conductance(&self) -> &CsrMatrix {
        &self.conductance
    }

    pub fn capacitance(&self) -> &[f64] {
        &self.capacitance
    }

    pub fn ambient_conductance(&self) -> &[f64] {
        &self.ambient_conductance
    }

    pub fn cell_index(&self, layer: usize, row: usize, col: usize) -> Option<usize> {
        (layer < self.layers && row < self.rows && col < self.cols)
            .then(|| (layer * self.rows + row) * self.cols + col)
    }

    /// Inverse of [`cell_index`](Self::cell_index).
    pub fn cell_position(&self, cell: usize) -> (usize, usize, usize) {
        let per_layer = self.rows * self.cols;
        (
            cell / per_layer,
            (cell % per_layer) / self.cols,
            cell % self.cols,
        )
    }

    pub fn cell_name(&self, cell: usize) -> String {
        let (l, r, c) = self.cell_position(cell);
        format!("L{l}_R{r}_C{c}")
    }

    pub fn block_cells(&self, id: &str) -> Result<&BlockCells> {
        self.block_cells
            .get(id)
            .ok_or_else(|| Error::UnknownBlock(id.to_string()))
    }

    pub fn block_ids(&self) -> impl Iterator<Item = &str> {
        self.block_cells.keys().map(String::as_str)
    }

    pub fn ambient_state(&self) -> ThermalState {
        ThermalState::uniform(self.num_cells(), self.ambient)
    }

    /// Total heat flowing into ambient for a given state, in watts.
    pub fn heat_to_ambient(&self, state: &ThermalState) -> f64 {
        state
            .temperatures
            .iter()
            .zip(&self.ambient_conductance)
            .map(|(t, g)| g * (t - self.ambient))
            .sum()
    }

    fn steady_factor(&self) -> Result<&BandCholesky> {
        self.steady
            .get_or_init(|| {
                BandCholesky::factor(&self.conductance, self.perm.clone()).map_err(|_| ())
            })
            .as_ref()
            .map_err(|_| Error::SingularNetwork)
    }

    /// Prepares a backward-Euler integrator with fixed step `dt`.
    pub fn stepper(&self, dt: f64) -> Result<Stepper<'_>> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::validation(format!(
                "time step must be positive, got {dt}"
            )));
        }
        let c_over_dt: Vec<f64> = self.capacitance.iter().map(|c| c / dt).collect();
        let system = self.conductance.add_diagonal(&c_over_dt);
        let factor = BandCholesky::factor(&system, self.perm.clone())?;
        Ok(Stepper {
            network: self,
            dt,
            c_over_dt,
            factor,
        })
    }

    /// Resolves channel names to block cell sets once, for repeated mapping.
    pub fn power_mapper(&self, channels: &[String]) -> Result<PowerMapper<'_>> {
        let blocks = channels
            .iter()
            .map(|c| self.block_cells(c))
            .collect::<Result<Vec<_>>>()?;
        Ok(PowerMapper {
            n: self.num_cells(),
            blocks,
        })
    }
}

/// Maps a row of per-block powers onto cells.
pub struct PowerMapper<'a> {
    n: usize,
    blocks: Vec<&'a BlockCells>,
}

impl PowerMapper<'_> {
    pub fn map(&self, powers: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.map_into(powers, &mut out);
        out
    }

    pub fn map_into(&self, powers: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (bc, &p) in self.blocks.iter().zip(powers) {
            for (&cell, &w) in bc.cells.iter().zip(&bc.weights) {
                out[cell] += p * w;
            }
        }
    }
}

/// Fixed-step implicit integrator over offsets from ambient.
pub struct Stepper<'a> {
    network: &'a ThermalNetwork,
    dt: f64,
    c_over_dt: Vec<f64>,
    factor: BandCholesky,
}

impl Stepper<'_> {
    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Advances `state` by one `dt` with cell powers held constant.
    pub fn step(&self, state: &mut ThermalState, power: &[f64]) {
        let amb = self.network.ambient;
        let rhs: Vec<f64> = state
            .temperatures
            .iter()
            .zip(&self.c_over_dt)
            .zip(power)
            .map(|((t, c), p)| c * (t - amb) + p)
            .collect();
        let offsets = self.factor.solve(&rhs);
        for (t, d) in state.temperatures.iter_mut().zip(offsets) {
            *t = amb + d;
        }
        state.time += self.dt;
    }
}

/// Distributes block powers onto cells by covered area.
pub fn map_power<I, K>(block_powers: I, network: &ThermalNetwork) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = (K, f64)>,
    K: AsRef<str>,
{
    let mut out = vec![0.0; network.num_cells()];
    for (id, p) in block_powers {
        let bc = network.block_cells(id.as_ref())?;
        for (&cell, &w) in bc.cells.iter().zip(&bc.weights) {
            out[cell] += p * w;
        }
    }
    Ok(out)
}

/// Solves `G * (T - T_amb) = P`.
pub fn steady_state(network: &ThermalNetwork, power: &[f64]) -> Result<ThermalState> {
    if power.len() != network.num_cells() {
        return Err(Error::LengthMismatch {
            expected: network.num_cells(),
            actual: power.len(),
        });
    }
    if power.iter().any(|p| !p.is_finite()) {
        return Err(Error::validation("power vector has non-finite entries"));
    }
    let factor = network.steady_factor()?;
    let mut x = factor.solve(power);
    // one round of iterative refinement
    let r: Vec<f64> = network
        .conductance
        .mul_vec(&x)
        .iter()
        .zip(power)
        .map(|(gx, p)| p - gx)
        .collect();
    for (xi, d) in x.iter_mut().zip(factor.solve(&r)) {
        *xi += d;
    }
    Ok(ThermalState {
        temperatures: x.into_iter().map(|d| network.ambient + d).collect(),
        time: 0.0,
    })
}

/// Integrates a block-level power trace from `initial` with backward Euler
/// steps of `dt` (default: a tenth of the sample interval), holding each
/// sample's power constant. Row `i` of the output is the cell state at the
/// end of sample interval `i`.
pub fn transient(
    network: &ThermalNetwork,
    power_trace: &Trace,
    initial: &ThermalState,
    dt: Option<f64>,
) -> Result<Trace> {
    if power_trace.unit() != Unit::Watts {
        return Err(Error::validation("transient needs a power trace in watts"));
    }
    if initial.temperatures.len() != network.num_cells() {
        return Err(Error::LengthMismatch {
            expected: network.num_cells(),
            actual: initial.temperatures.len(),
        });
    }
    let interval = power_trace.sample_interval();
    let dt = dt.unwrap_or(interval / 10.0);
    let substeps = substeps_for(interval, dt)?;
    let stepper = network.stepper(dt)?;
    let mapper = network.power_mapper(power_trace.channels())?;

    let mut state = initial.clone();
    let mut cell_power = vec![0.0; network.num_cells()];
    let mut values = Vec::with_capacity(power_trace.num_samples() * network.num_cells());
    for row in power_trace.rows() {
        mapper.map_into(row, &mut cell_power);
        for _ in 0..substeps {
            stepper.step(&mut state, &cell_power);
        }
        values.extend_from_slice(&state.temperatures);
    }
    let channels = (0..network.num_cells())
        .map(|c| network.cell_name(c))
        .collect();
    Trace::new(interval, channels, values, Unit::Celsius)
}

/// Number of `dt` steps per sample interval; errors unless `dt` divides it.
pub fn substeps_for(interval: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::validation(format!(
            "time step must be positive, got {dt}"
        )));
    }
    let ratio = interval / dt;
    let k = ratio.round();
    if k < 1.0 || (ratio - k).abs() > 1e-9 * ratio {
        return Err(Error::NonDivisibleStep { dt, interval });
    }
    Ok(k as usize)
}

/// Area-weighted mean temperature of a block for one cell field.
pub fn block_temperature(
    temperatures: &[f64],
    block: &str,
    network: &ThermalNetwork,
) -> Result<f64> {
    Ok(network.block_cells(block)?.mean(temperatures))
}

/// Per-sample block temperatures from a cell-level trace, one channel per
/// requested block.
pub fn block_temperature_trace(
    cell_trace: &Trace,
    blocks: &[String],
    network: &ThermalNetwork,
) -> Result<Trace> {
    if cell_trace.num_channels() != network.num_cells() {
        return Err(Error::LengthMismatch {
            expected: network.num_cells(),
            actual: cell_trace.num_channels(),
        });
    }
    let sets = blocks
        .iter()
        .map(|b| network.block_cells(b))
        .collect::<Result<Vec<_>>>()?;
    let mut values = Vec::with_capacity(cell_trace.num_samples() * blocks.len());
    for row in cell_trace.rows() {
        for bc in &sets {
            values.push(bc.mean(row));
        }
    }
    Trace::new(
        cell_trace.sample_interval(),
        blocks.to_vec(),
        values,
        Unit::Celsius,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Block, BlockKind, Layer, Rect};

    pub(crate) fn single_cell(r_total: f64, c_total: f64) -> (Floorplan, LayerStack) {
        // 1 mm x 1 mm die, one layer; boundary resistance chosen so A / R_b = 1 / r_total
        let area = 1e-6;
        let thickness = 1e-4;
        let stack = LayerStack {
            layers: vec![Layer {
                thickness,
                conductivity: 100.0,
                volumetric_heat_capacity: c_total / (area * thickness),
                interface_resistance: 0.0,
            }],
            die_width: 1.0,
            die_height: 1.0,
            ambient_temperature: 25.0,
            boundary_resistance_top: Some(r_total * area),
            boundary_resistance_bottom: None,
        };
        let fp = Floorplan::new(vec![Block::new(
            "b",
            Rect::new(0.0, 0.0, 1.0, 1.0),
            0,
            BlockKind::Functional,
        )]);
        (fp, stack)
    }

    fn quad_stack(layers: usize) -> LayerStack {
        LayerStack {
            layers: vec![Layer::silicon(1e-4); layers],
            die_width: 4.0,
            die_height: 4.0,
            ambient_temperature: 40.0,
            boundary_resistance_top: Some(1e-5),
            boundary_resistance_bottom: Some(1e-4),
        }
    }

    #[test]
    fn single_cell_diagonal_is_boundary_only() {
        let (fp, stack) = single_cell(10.0, 0.5);
        let net = build_network(&fp, &stack, GridSpec::new(1, 1)).unwrap();
        assert_eq!(net.num_cells(), 1);
        let g = net.conductance().get(0, 0);
        assert!((g - 0.1).abs() < 1e-12, "{g}");
    }

    #[test]
    fn two_layers_one_cell_has_single_vertical_coupling() {
        let mut stack = quad_stack(2);
        stack.die_width = 1.0;
        stack.die_height = 1.0;
        let net = build_network(&Floorplan::default(), &stack, GridSpec::new(1, 1)).unwrap();
        let g = net.conductance();
        assert_eq!(g.nnz(), 4);
        assert!(g.get(0, 1) < 0.0);
        assert_eq!(g.get(0, 1), g.get(1, 0));
    }

    #[test]
    fn lateral_neighbor_counts() {
        let net =
            build_network(&Floorplan::default(), &quad_stack(1), GridSpec::new(4, 4)).unwrap();
        let off = |i: usize| {
            net.conductance()
                .row(i)
                .filter(|&(j, v)| j != i && v < 0.0)
                .count()
        };
        assert_eq!(off(net.cell_index(0, 1, 1).unwrap()), 4);
        assert_eq!(off(net.cell_index(0, 0, 0).unwrap()), 2);
        assert_eq!(off(net.cell_index(0, 0, 2).unwrap()), 3);
    }

    #[test]
    fn network_invariants_hold() {
        let net =
            build_network(&Floorplan::default(), &quad_stack(3), GridSpec::new(4, 5)).unwrap();
        let g = net.conductance();
        assert!(g.is_symmetric(0.0));
        for i in 0..net.num_cells() {
            let off: f64 = g.row(i).filter(|&(j, _)| j != i).map(|(_, v)| v).sum();
            assert!(g.row(i).filter(|&(j, _)| j != i).all(|(_, v)| v <= 0.0));
            assert!(g.get(i, i) >= -off - 1e-15);
        }
        assert!(net.capacitance().iter().all(|&c| c > 0.0));
    }

    #[test]
    fn block_finer_than_grid_is_rejected() {
        let fp = Floorplan::new(vec![Block::new(
            "tiny",
            Rect::new(0.1, 0.1, 0.2, 0.2),
            0,
            BlockKind::Functional,
        )]);
        match build_network(&fp, &quad_stack(1), GridSpec::new(4, 4)) {
            Err(Error::BlockUnresolved(id)) => assert_eq!(id, "tiny"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cell_budget_is_enforced() {
        let mut grid = GridSpec::new(4, 4);
        grid.cell_budget = 40;
        assert!(build_network(&Floorplan::default(), &quad_stack(3), grid).is_err());
    }

    #[test]
    fn map_power_splits_and_adds() {
        let fp = Floorplan::new(vec![
            Block::new("a", Rect::new(0.0, 0.0, 2.0, 2.0), 0, BlockKind::Functional),
            Block::new(
                "g",
                Rect::new(1.0, 1.0, 2.0, 2.0),
                0,
                BlockKind::NoiseGenerator,
            ),
        ]);
        let net = build_network(&fp, &quad_stack(1), GridSpec::new(4, 4)).unwrap();
        let p = map_power([("a", 2.0)], &net).unwrap();
        assert_eq!(p.iter().filter(|&&v| v == 0.5).count(), 4);
        let both = map_power([("a", 2.0), ("g", 1.0)], &net).unwrap();
        let shared = net.cell_index(0, 1, 1).unwrap();
        assert!((both[shared] - 1.5).abs() < 1e-15);
        assert!((both.iter().sum::<f64>() - 3.0).abs() < 1e-12);
        assert!(map_power(std::iter::empty::<(&str, f64)>(), &net)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        assert!(matches!(
            map_power([("nope", 1.0)], &net),
            Err(Error::UnknownBlock(_))
        ));
    }

    #[test]
    fn single_cell_steady_state_is_ohms_law() {
        let (fp, stack) = single_cell(10.0, 0.5);
        let net = build_network(&fp, &stack, GridSpec::new(1, 1)).unwrap();
        let s = steady_state(&net, &[1.0]).unwrap();
        assert!((s.temperatures[0] - 35.0).abs() < 1e-12);
        let z = steady_state(&net, &[0.0]).unwrap();
        assert_eq!(z.temperatures[0], 25.0);
    }

    #[test]
    fn two_cell_chain_orders_temperatures() {
        // oracle: [g01 + ga, -g01; -g01, g01] dT = [1, 0] => dT1 = dT0 = 1/ga when cell 1 is adiabatic,
        // so give both cells ambient paths: solve the 2x2 by Cramer's rule.
        let mut stack = quad_stack(1);
        stack.die_width = 2.0;
        stack.die_height = 1.0;
        let net = build_network(&Floorplan::default(), &stack, GridSpec::new(1, 2)).unwrap();
        let g = net.conductance();
        let (a, b, c, d) = (g.get(0, 0), g.get(0, 1), g.get(1, 0), g.get(1, 1));
        let det = a * d - b * c;
        let (t0, t1) = (d / det, -c / det);
        let s = steady_state(&net, &[1.0, 0.0]).unwrap();
        assert!((s.temperatures[0] - 40.0 - t0).abs() < 1e-9);
        assert!((s.temperatures[1] - 40.0 - t1).abs() < 1e-9);
        assert!(s.temperatures[0] > s.temperatures[1] && s.temperatures[1] > 40.0);
    }

    #[test]
    fn adiabatic_stack_is_singular() {
        let mut stack = quad_stack(2);
        stack.boundary_resistance_top = None;
        stack.boundary_resistance_bottom = None;
        let net = build_network(&Floorplan::default(), &stack, GridSpec::new(2, 2)).unwrap();
        assert!(matches!(
            steady_state(&net, &vec![1.0; 8]),
            Err(Error::SingularNetwork)
        ));
    }

    #[test]
    fn rc_charging_matches_analytic() {
        let (fp, stack) = single_cell(10.0, 0.5);
        let net = build_network(&fp, &stack, GridSpec::new(1, 1)).unwrap();
        let trace = Trace::single(0.05, "b", vec![1.0; 100], Unit::Watts).unwrap();
        let out = transient(&net, &trace, &net.ambient_state(), Some(0.05)).unwrap();
        let rise = out.get(99, 0) - 25.0;
        let exact = 10.0 * (1.0 - (-1.0f64).exp());
        assert!((rise - exact).abs() / exact < 0.01, "{rise} vs {exact}");
    }

    #[test]
    fn zero_power_stays_at_ambient() {
        let (fp, stack) = single_cell(10.0, 0.5);
        let net = build_network(&fp, &stack, GridSpec::new(1, 1)).unwrap();
        let trace = Trace::single(0.1, "b", vec![0.0; 20], Unit::Watts).unwrap();
        let out = transient(&net, &trace, &net.ambient_state(), None).unwrap();
        assert!(out.values().iter().all(|&t| t == 25.0));
    }

    #[test]
    fn transient_rejects_bad_steps() {
        let (fp, stack) = single_cell(10.0, 0.5);
        let net = build_network(&fp, &stack, GridSpec::new(1, 1)).unwrap();
        let trace = Trace::single(0.1, "b", vec![1.0; 3], Unit::Watts).unwrap();
        let init = net.ambient_state();
        assert!(transient(&net, &trace, &init, Some(0.0)).is_err());
        assert!(matches!(
            transient(&net, &trace, &init, Some(0.03)),
            Err(Error::NonDivisibleStep { .. })
        ));
    }

    #[test]
    fn block_temperature_weighting() {
        let fp = Floorplan::new(vec![Block::new(
            "b",
            Rect::new(0.0, 0.0, 2.0, 1.0),
            0,
            BlockKind::Functional,
        )]);
        let mut stack = quad_stack(1);
        stack.die_width = 2.0;
        stack.die_height = 1.0;
        let net = build_network(&fp, &stack, GridSpec::new(1, 2)).unwrap();
        assert_eq!(block_temperature(&[45.0, 45.0], "b", &net).unwrap(), 45.0);
        assert_eq!(block_temperature(&[40.0, 50.0], "b", &net).unwrap(), 45.0);
        assert!(block_temperature(&[40.0, 50.0], "zz", &net).is_err());
    }

    #[test]
    fn partial_cell_overlap_weights() {
        // cells 0 (center 0.5, overlap 0.5) and 1 (center 1.5, overlap 1.0)
        let fp = Floorplan::new(vec![Block::new(
            "b",
            Rect::new(0.5, 0.0, 2.0, 1.0),
            0,
            BlockKind::Functional,
        )]);
        let mut stack = quad_stack(1);
        stack.die_height = 1.0;
        let net = build_network(&fp, &stack, GridSpec::new(1, 4)).unwrap();
        let bc = net.block_cells("b").unwrap();
        assert_eq!(bc.cells, vec![0, 1]);
        let expected = 40.0 * (1.0 / 3.0) + 50.0 * (2.0 / 3.0);
        let t = block_temperature(&[40.0, 50.0, 0.0, 0.0], "b", &net).unwrap();
        assert!((t - expected).abs() < 1e-12);

        let quarter = BlockCells {
            cells: vec![0, 1],
            weights: vec![0.25, 0.75],
        };
        assert!((quarter.mean(&[40.0, 50.0]) - 47.5).abs() < 1e-12);
    }
}
