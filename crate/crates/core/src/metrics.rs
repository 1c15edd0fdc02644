//! Leakage metrics.
//!
//! Temporal leakage is measured with the side-channel vulnerability factor:
//! each trace is turned into a vector of pairwise standardized Euclidean
//! distances between its samples, and the Pearson correlation between the
//! execution-side and observation-side vectors (the latter shifted by a
//! thermal delay `k`) is the SVF. Spatial leakage is measured with an
//! entropy ratio over how many distinguishable temperature groups the
//! blocks fall into. Power-side metrics (utilization, overhead) live here
//! too, since they scale and accompany SVF in every report.

use std::ops::Range;

use serde::Serialize;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::model::Trace;

/// Channels whose standard deviation falls below this are ignored.
pub const MIN_CHANNEL_STD: f64 = 1e-12;
/// Variance below which a Pearson input is considered constant.
pub const MIN_PEARSON_VARIANCE: f64 = 1e-18;
/// Floor applied to |SVF| before taking geometric means.
pub const G_MEAN_FLOOR: f64 = 1e-4;

/// `sqrt(sum(((x_c - y_c) / s_c)^2))`, skipping channels with `s_c < 1e-12`.
pub fn standardized_euclidean(x: &[f64], y: &[f64], s: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() != s.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            actual: if y.len() != x.len() { y.len() } else { s.len() },
        });
    }
    Ok(sq_dist(x, y, s).sqrt())
}

#[inline]
fn sq_dist(x: &[f64], y: &[f64], s: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .zip(s)
        .filter(|(_, &sc)| sc >= MIN_CHANNEL_STD)
        .map(|((a, b), sc)| {
            let d = (a - b) / sc;
            d * d
        })
        .sum()
}

/// Sample standard deviation (n - 1 denominator) of every channel.
pub fn channel_stds(trace: &Trace) -> Vec<f64> {
    let n = trace.num_samples();
    let means = trace.channel_means();
    if n < 2 {
        return vec![0.0; trace.num_channels()];
    }
    let mut acc = vec![0.0; trace.num_channels()];
    for row in trace.rows() {
        for ((a, v), m) in acc.iter_mut().zip(row).zip(&means) {
            *a += (v - m) * (v - m);
        }
    }
    acc.into_iter()
        .map(|a| (a / (n - 1) as f64).sqrt())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairDistance {
    pub i: usize,
    pub j: usize,
    pub distance: f64,
}

/// All pairwise sample distances inside a window.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityVector {
    pub entries: Vec<PairDistance>,
    pub channel_stds: Vec<f64>,
}

/// Builds the similarity vector over `window`, with channel standard
/// deviations taken from the whole trace so windows stay comparable.
pub fn similarity_vector(trace: &Trace, window: Range<usize>) -> Result<SimilarityVector> {
    if window.len() < 3 {
        return Err(Error::InsufficientSamples {
            needed: 3,
            available: window.len(),
        });
    }
    if window.end > trace.num_samples() {
        return Err(Error::InsufficientSamples {
            needed: window.end,
            available: trace.num_samples(),
        });
    }
    let stds = channel_stds(trace);
    let mut entries = Vec::with_capacity(window.len() * (window.len() - 1) / 2);
    for i in window.clone() {
        for j in window.start..i {
            entries.push(PairDistance {
                i,
                j,
                distance: sq_dist(trace.row(i), trace.row(j), &stds).sqrt(),
            });
        }
    }
    Ok(SimilarityVector {
        entries,
        channel_stds: stds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Correlation {
    pub r: f64,
    /// Either side had (near) zero variance; `r` is then 0.
    pub zero_variance: bool,
}

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<Correlation> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch {
            expected: xs.len(),
            actual: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            available: xs.len(),
        });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx / n < MIN_PEARSON_VARIANCE || syy / n < MIN_PEARSON_VARIANCE {
        return Ok(Correlation {
            r: 0.0,
            zero_variance: true,
        });
    }
    Ok(Correlation {
        r: (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0),
        zero_variance: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SvfReport {
    pub svf: f64,
    pub abs_svf: f64,
    pub delay_k: usize,
    pub num_pairs: usize,
    pub zero_variance: bool,
}

/// Splits `[start, end)` into windows of `len` samples every `stride`
/// samples. A single window covers the range when `len` is 0 or too long.
pub fn tiled_windows(start: usize, end: usize, len: usize, stride: usize) -> Vec<Range<usize>> {
    if len == 0 || start + len > end {
        return vec![start..end];
    }
    let stride = stride.max(1);
    (0..)
        .map(|w| start + w * stride)
        .take_while(|s| s + len <= end)
        .map(|s| s..s + len)
        .collect()
}

/// SVF between an execution trace and an observation trace delayed by `k`
/// samples. Pairs from all windows are pooled into one correlation.
pub fn svf(inst: &Trace, temp: &Trace, k: usize, windows: &[Range<usize>]) -> Result<SvfReport> {
    check_svf_inputs(inst, temp, k, windows)?;
    let inst_std = channel_stds(inst);
    let temp_std = channel_stds(temp);
    svf_with_stds(inst, temp, k, windows, &inst_std, &temp_std)
}

fn check_svf_inputs(inst: &Trace, temp: &Trace, k: usize, windows: &[Range<usize>]) -> Result<()> {
    let (a, b) = (inst.sample_interval(), temp.sample_interval());
    if (a - b).abs() > 1e-9 * a.max(b) {
        return Err(Error::IntervalMismatch { left: a, right: b });
    }
    if windows.is_empty() {
        return Err(Error::InsufficientSamples {
            needed: 3,
            available: 0,
        });
    }
    for w in windows {
        if w.len() < 3 {
            return Err(Error::InsufficientSamples {
                needed: 3,
                available: w.len(),
            });
        }
        if w.end > inst.num_samples() {
            return Err(Error::InsufficientSamples {
                needed: w.end,
                available: inst.num_samples(),
            });
        }
        if w.end + k > temp.num_samples() {
            return Err(Error::InsufficientSamples {
                needed: w.end + k,
                available: temp.num_samples(),
            });
        }
    }
    Ok(())
}

fn svf_with_stds(
    inst: &Trace,
    temp: &Trace,
    k: usize,
    windows: &[Range<usize>],
    inst_std: &[f64],
    temp_std: &[f64],
) -> Result<SvfReport> {
    let total: usize = windows.iter().map(|w| w.len() * (w.len() - 1) / 2).sum();
    let mut v_inst = Vec::with_capacity(total);
    let mut v_temp = Vec::with_capacity(total);
    for w in windows {
        for i in w.clone() {
            for j in w.start..i {
                v_inst.push(sq_dist(inst.row(i), inst.row(j), inst_std).sqrt());
                v_temp.push(sq_dist(temp.row(i + k), temp.row(j + k), temp_std).sqrt());
            }
        }
    }
    let c = pearson(&v_inst, &v_temp)?;
    Ok(SvfReport {
        svf: c.r,
        abs_svf: c.r.abs(),
        delay_k: k,
        num_pairs: total,
        zero_variance: c.zero_variance,
    })
}

/// Searches `k` in `0..=k_max` for the largest |SVF|; ties go to the
/// smaller delay.
pub fn best_delay(
    inst: &Trace,
    temp: &Trace,
    k_max: usize,
    windows: &[Range<usize>],
) -> Result<(usize, SvfReport)> {
    check_svf_inputs(inst, temp, k_max, windows)?;
    let inst_std = channel_stds(inst);
    let temp_std = channel_stds(temp);
    let mut best = svf_with_stds(inst, temp, 0, windows, &inst_std, &temp_std)?;
    for k in 1..=k_max {
        let rep = svf_with_stds(inst, temp, k, windows, &inst_std, &temp_std)?;
        if rep.abs_svf > best.abs_svf {
            best = rep;
        }
    }
    Ok((best.delay_k, best))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StsfReport {
    pub n: usize,
    pub m: usize,
    pub stsf: f64,
}

/// Spatial factor for `n` blocks collapsed into `m` equal groups:
/// `(ln n! - m ln (n/m)!) / ln n!`.
pub fn stsf(n: usize, m: usize) -> Result<StsfReport> {
    if n == 0 || m == 0 || m > n {
        return Err(Error::validation(format!(
            "need 1 <= m <= n, got n = {n}, m = {m}"
        )));
    }
    if n % m != 0 {
        return Err(Error::Divisibility { n, m });
    }
    if n == 1 {
        return Ok(StsfReport { n, m, stsf: 0.0 });
    }
    let ln_fact = |x: usize| ln_gamma(x as f64 + 1.0);
    let whole = ln_fact(n);
    let grouped = m as f64 * ln_fact(n / m);
    let value = if m == 1 {
        0.0
    } else if m == n {
        1.0
    } else {
        ((whole - grouped) / whole).clamp(0.0, 1.0)
    };
    Ok(StsfReport { n, m, stsf: value })
}

/// Sorts blocks hottest first (ties by id) and cuts the sequence into `m`
/// equal groups.
pub fn group_blocks(block_temps: &[(String, f64)], m: usize) -> Result<Vec<Vec<String>>> {
    let n = block_temps.len();
    if m == 0 || n % m != 0 {
        return Err(Error::Divisibility { n, m });
    }
    let mut sorted: Vec<&(String, f64)> = block_temps.iter().collect();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let size = n / m;
    Ok(sorted
        .chunks(size)
        .map(|g| g.iter().map(|(id, _)| id.clone()).collect())
        .collect())
}

/// Number of distinguishable temperature groups: runs in the descending
/// sort split wherever consecutive gaps exceed `epsilon`, rounded down to
/// the largest divisor of `n`.
pub fn effective_groups(block_temps: &[f64], epsilon: f64) -> usize {
    let n = block_temps.len();
    if n == 0 {
        return 0;
    }
    let mut sorted = block_temps.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let runs = 1 + sorted.windows(2).filter(|w| w[0] - w[1] > epsilon).count();
    (1..=runs).rev().find(|d| n % d == 0).unwrap_or(1)
}

/// Mean generator power over mean generator power under maximal injection.
pub fn mpu(gen_power: &Trace, gen_power_max_avg: &Trace) -> f64 {
    let denom = gen_power_max_avg.mean_total();
    if denom == 0.0 {
        0.0
    } else {
        gen_power.mean_total() / denom
    }
}

/// Mean generator power over mean total system power.
pub fn power_overhead(gen_power: &Trace, total_power: &Trace) -> Result<f64> {
    let (a, b) = (gen_power.sample_interval(), total_power.sample_interval());
    if (a - b).abs() > 1e-9 * a.max(b) {
        return Err(Error::IntervalMismatch { left: a, right: b });
    }
    let total = total_power.mean_total();
    Ok(if total == 0.0 {
        0.0
    } else {
        gen_power.mean_total() / total
    })
}

pub fn scaled_svf(svf_value: f64, mpu_value: f64) -> f64 {
    svf_value * mpu_value
}

/// Geometric mean of |x| with each value floored at [`G_MEAN_FLOOR`].
pub fn g_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let s: f64 = values.iter().map(|v| v.abs().max(G_MEAN_FLOOR).ln()).sum();
    (s / values.len() as f64).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Unit;

    fn single(vals: &[f64], unit: Unit) -> Trace {
        Trace::single(1e-3, "c", vals.to_vec(), unit).unwrap()
    }

    #[test]
    fn standardized_distance_examples() {
        assert_eq!(
            standardized_euclidean(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 1.0]).unwrap(),
            0.0
        );
        let d = standardized_euclidean(&[1.0, 2.0], &[3.0, 4.0], &[1.0, 2.0]).unwrap();
        assert!((d - 5f64.sqrt()).abs() < 1e-15);
        let skipped = standardized_euclidean(&[5.0, 1.0], &[9.0, 1.0], &[0.0, 1.0]).unwrap();
        assert_eq!(skipped, 0.0);
        assert!(standardized_euclidean(&[1.0], &[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn similarity_vector_examples() {
        let flat = single(&[3.0; 10], Unit::Celsius);
        let sv = similarity_vector(&flat, 0..10).unwrap();
        assert_eq!(sv.entries.len(), 45);
        assert!(sv.entries.iter().all(|e| e.distance == 0.0));

        let t = single(&[0.0, 1.0, 3.0], Unit::Instructions);
        let sv = similarity_vector(&t, 0..3).unwrap();
        let s = sv.channel_stds[0];
        // sample std of [0, 1, 3]: mean 4/3, ss = 16/9 + 1/9 + 25/9 = 42/9, var = 21/9
        assert!((s - (21.0f64 / 9.0).sqrt()).abs() < 1e-15);
        let got: Vec<(usize, usize, f64)> =
            sv.entries.iter().map(|e| (e.i, e.j, e.distance)).collect();
        let expect = [(1, 0, 1.0 / s), (2, 0, 3.0 / s), (2, 1, 2.0 / s)];
        for (g, e) in got.iter().zip(expect) {
            assert_eq!((g.0, g.1), (e.0, e.1));
            assert!((g.2 - e.2).abs() < 1e-15);
        }
        assert!(similarity_vector(&t, 0..4).is_err());
        assert!(similarity_vector(&t, 0..2).is_err());
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap().r - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap().r + 1.0).abs() < 1e-15);
        let c = pearson(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]).unwrap();
        assert_eq!(
            c,
            Correlation {
                r: 0.0,
                zero_variance: true
            }
        );
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn svf_of_shifted_affine_copy_is_one() {
        let inst: Vec<f64> = (0..60).map(|i| ((i * 7) % 11) as f64).collect();
        let k = 4;
        let mut temp = vec![50.0; k];
        temp.extend(inst.iter().map(|v| 40.0 + 0.3 * v));
        let a = single(&inst, Unit::Instructions);
        let b = single(&temp, Unit::Celsius);
        let rep = svf(&a, &b, k, &[0..50]).unwrap();
        assert!((rep.svf - 1.0).abs() < 1e-12, "{rep:?}");
        assert_eq!(rep.num_pairs, 50 * 49 / 2);
    }

    #[test]
    fn svf_rejects_mismatch_and_overrun() {
        let a = single(&[1.0, 2.0, 3.0, 4.0], Unit::Instructions);
        let b = Trace::single(2e-3, "c", vec![1.0, 2.0, 3.0, 4.0], Unit::Celsius).unwrap();
        assert!(matches!(
            svf(&a, &b, 0, &[0..4]),
            Err(Error::IntervalMismatch { .. })
        ));
        let b = single(&[1.0, 2.0, 3.0, 4.0], Unit::Celsius);
        assert!(svf(&a, &b, 1, &[0..4]).is_err());
    }

    #[test]
    fn best_delay_finds_shift() {
        let inst: Vec<f64> = (0..80).map(|i| ((i * i * 13 + 5) % 17) as f64).collect();
        let mut temp = vec![0.0; 5];
        temp.extend(inst.iter().map(|v| 2.0 * v + 1.0));
        let a = single(&inst, Unit::Instructions);
        let b = single(&temp, Unit::Celsius);
        let (k, rep) = best_delay(&a, &b, 10, &[0..60]).unwrap();
        assert_eq!(k, 5);
        assert!((rep.svf - 1.0).abs() < 1e-12);
        let (k0, _) = best_delay(&a, &b, 0, &[0..60]).unwrap();
        assert_eq!(k0, 0);
    }

    #[test]
    fn stsf_examples() {
        assert_eq!(stsf(8, 1).unwrap().stsf, 0.0);
        assert_eq!(stsf(8, 8).unwrap().stsf, 1.0);
        let v = stsf(4, 2).unwrap().stsf;
        assert!((v - (24f64.ln() - 2.0 * 2f64.ln()) / 24f64.ln()).abs() < 1e-12);
        assert!((v - 0.5638).abs() < 1e-4);
        let v = stsf(8, 4).unwrap().stsf;
        assert!((v - 0.7386).abs() < 1e-4, "{v}");
        assert_eq!(stsf(1, 1).unwrap().stsf, 0.0);
        assert!(matches!(stsf(8, 3), Err(Error::Divisibility { .. })));
        assert!(stsf(4, 5).is_err());
    }

    #[test]
    fn group_blocks_examples() {
        let temps: Vec<(String, f64)> = [("a", 50.0), ("b", 40.0), ("c", 45.0), ("d", 42.0)]
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        let g = group_blocks(&temps, 2).unwrap();
        assert_eq!(g, vec![vec!["a", "c"], vec!["d", "b"]]);
        assert_eq!(group_blocks(&temps, 1).unwrap().len(), 1);
        assert!(group_blocks(&temps, 4)
            .unwrap()
            .iter()
            .all(|g| g.len() == 1));
        assert!(group_blocks(&temps, 3).is_err());

        let tied: Vec<(String, f64)> = vec![("z".into(), 1.0), ("y".into(), 1.0)];
        assert_eq!(group_blocks(&tied, 2).unwrap(), vec![vec!["y"], vec!["z"]]);
    }

    #[test]
    fn effective_groups_examples() {
        assert_eq!(effective_groups(&[45.0, 45.05, 44.98, 45.02], 0.1), 1);
        assert_eq!(effective_groups(&[40.0, 45.0, 50.0, 55.0], 0.1), 4);
        assert_eq!(effective_groups(&[50.0, 49.95, 45.0, 44.9], 0.1), 2);
        // 3 runs over 4 blocks rounds down to 2
        assert_eq!(effective_groups(&[50.0, 45.0, 40.0, 40.05], 0.1), 2);
    }

    #[test]
    fn power_metrics() {
        let g = single(&[2.0, 2.0], Unit::Watts);
        let gmax = single(&[8.0, 8.0], Unit::Watts);
        let zero = single(&[0.0, 0.0], Unit::Watts);
        assert_eq!(mpu(&g, &g), 1.0);
        assert_eq!(mpu(&zero, &gmax), 0.0);
        assert_eq!(mpu(&g, &gmax), 0.25);
        assert_eq!(mpu(&g, &zero), 0.0);

        let total = single(&[100.0, 100.0], Unit::Watts);
        assert_eq!(power_overhead(&zero, &total).unwrap(), 0.0);
        let gen = single(&[3.83, 3.83], Unit::Watts);
        assert!((power_overhead(&gen, &total).unwrap() - 0.0383).abs() < 1e-15);
        assert_eq!(power_overhead(&total, &total).unwrap(), 1.0);
        let other = Trace::single(2e-3, "c", vec![1.0, 1.0], Unit::Watts).unwrap();
        assert!(power_overhead(&g, &other).is_err());

        assert!((scaled_svf(0.4, 0.5) - 0.2).abs() < 1e-15);
        assert_eq!(scaled_svf(0.7, 1.0), 0.7);
        assert_eq!(scaled_svf(0.39, 0.0), 0.0);
    }

    #[test]
    fn g_mean_floors_zeros() {
        assert!((g_mean(&[0.5, 0.5]) - 0.5).abs() < 1e-15);
        assert!((g_mean(&[0.0, 1.0]) - 1e-2).abs() < 1e-12);
        assert!((g_mean(&[-0.25, 1.0]) - 0.5).abs() < 1e-12);
    }
}
