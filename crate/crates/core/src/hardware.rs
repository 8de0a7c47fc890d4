//! Hardware accounting for a network built from resonator chains.
//!
//! A convolution layer with input `[H, W, C]`, `M` filters of `k x k` and
//! output `[H_out, W_out, M]` is realized fully in parallel by one chain per
//! output position and filter, each chain holding `k * k * C` resonators.
//! One field-line carries each input signal. The resonators that implement
//! the same filter coefficient share one write-line, so a write-line tunes
//! `H_out * W_out` devices, one per filter position.
//!
//! Two placements are described. In the crossbar arrangement field-lines
//! are rows and chains are columns, so resonators sharing a coefficient lie
//! on a diagonal. In the compact arrangement rows are output positions and
//! columns are coefficients, so they lie in a column. The arrangement only
//! changes positions, never group membership.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{PatchGeometry, Tensor};
use crate::device::DeviceParams;
use crate::layers::{ModelError, RfConv2d};
use crate::network::{LayerSpec, NetworkConfig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HardwareError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arrangement {
    Crossbar,
    Compact,
}

impl fmt::Display for Arrangement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arrangement::Crossbar => "crossbar",
            Arrangement::Compact => "compact",
        })
    }
}

/// Carrier frequencies of the input lines of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyPlan {
    /// GHz, strictly increasing.
    pub carriers: Vec<f64>,
    pub band_ghz: (f64, f64),
    pub spacing_ghz: f64,
    pub min_spacing_ghz: f64,
    /// Whether the grid spacing is at least the resonator linewidth.
    pub feasible: bool,
}

/// Evenly spaced carriers over `[f_lo, f_hi]` GHz. `min_spacing` defaults to
/// the linewidth `alpha * f_mid` with the default damping. Infeasible spacing
/// is reported, not rejected.
pub fn allocate_frequencies(
    n_lines: usize,
    f_lo: f64,
    f_hi: f64,
    min_spacing: Option<f64>,
) -> Result<FrequencyPlan, HardwareError> {
    if n_lines == 0 {
        return Err(HardwareError::Config("need at least one input line".into()));
    }
    if !(f_lo > 0.0 && f_hi > f_lo && f_hi.is_finite()) {
        return Err(HardwareError::Config(format!("empty band [{f_lo}, {f_hi}] GHz")));
    }
    let f_mid = 0.5 * (f_lo + f_hi);
    let min_spacing = min_spacing.unwrap_or(DeviceParams::default().alpha * f_mid);
    let (carriers, spacing) = if n_lines == 1 {
        (vec![f_mid], f_hi - f_lo)
    } else {
        let step = (f_hi - f_lo) / (n_lines - 1) as f64;
        let c = (0..n_lines)
            .map(|i| if i + 1 == n_lines { f_hi } else { f_lo + step * i as f64 })
            .collect();
        (c, step)
    };
    Ok(FrequencyPlan {
        carriers,
        band_ghz: (f_lo, f_hi),
        spacing_ghz: spacing,
        min_spacing_ghz: min_spacing,
        feasible: spacing >= min_spacing,
    })
}

/// Device counts for one synaptic layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutReport {
    pub layer: usize,
    pub kind: String,
    pub resonators: usize,
    /// Oscillators in the activation layer this layer drives; zero for the
    /// output layer.
    pub oscillators: usize,
    pub field_lines: usize,
    pub write_lines: usize,
    pub chain_length: usize,
    pub devices_per_write_line: usize,
    pub sequential_steps: usize,
    pub arrangement: Arrangement,
    pub frequency_plan: PlanSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub count: usize,
    pub spacing_ghz: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkLayout {
    pub arrangement: Arrangement,
    pub layers: Vec<LayoutReport>,
    pub total_resonators: usize,
    pub total_oscillators: usize,
    pub total_write_lines: usize,
}

/// Sequential versus parallel step counts per synaptic layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub layers: Vec<LayerSchedule>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSchedule {
    pub layer: usize,
    pub sequential_steps: usize,
    pub parallel_steps: usize,
}

/// Closed-form device counts for every synaptic layer of `cfg`.
pub fn count_devices(cfg: &NetworkConfig, arrangement: Arrangement) -> Result<NetworkLayout, HardwareError> {
    cfg.validate()?;
    let shapes = cfg.shape_chain()?;
    let mut layers = Vec::new();
    for (idx, spec) in cfg.layers.iter().enumerate() {
        let input = &shapes[idx];
        let n_in: usize = input.iter().product();
        let (kind, resonators, write_lines, chain_length, per_line, steps) = match *spec {
            LayerSpec::Conv { filters, kernel, .. } => {
                let out = &shapes[idx + 1];
                let positions = out[0] * out[1];
                let coeffs = kernel * kernel * input[2] * filters;
                ("conv", positions * coeffs, coeffs, kernel * kernel * input[2], positions, positions)
            }
            LayerSpec::Dense { outputs } => ("dense", n_in * outputs, n_in * outputs, n_in, 1, 1),
            _ => continue,
        };
        let oscillators = driven_oscillators(cfg, &shapes, idx);
        let plan = allocate_frequencies(n_in, 1.0, 2.0, Some(cfg.device.alpha * 1.5))?;
        layers.push(LayoutReport {
            layer: idx,
            kind: kind.into(),
            resonators,
            oscillators,
            field_lines: n_in,
            write_lines,
            chain_length,
            devices_per_write_line: per_line,
            sequential_steps: steps,
            arrangement,
            frequency_plan: PlanSummary {
                count: plan.carriers.len(),
                spacing_ghz: plan.spacing_ghz,
                feasible: plan.feasible,
            },
        });
    }
    Ok(NetworkLayout {
        arrangement,
        total_resonators: layers.iter().map(|l| l.resonators).sum(),
        total_oscillators: layers.iter().map(|l| l.oscillators).sum(),
        total_write_lines: layers.iter().map(|l| l.write_lines).sum(),
        layers,
    })
}

/// Size of the first oscillator layer after synaptic layer `idx`, before the
/// next synaptic layer.
fn driven_oscillators(cfg: &NetworkConfig, shapes: &[Vec<usize>], idx: usize) -> usize {
    for (j, spec) in cfg.layers.iter().enumerate().skip(idx + 1) {
        match spec {
            LayerSpec::Oscillator => return shapes[j + 1].iter().product(),
            LayerSpec::Conv { .. } | LayerSpec::Dense { .. } => return 0,
            LayerSpec::MaxPool => {}
        }
    }
    0
}

pub fn sequential_schedule(cfg: &NetworkConfig) -> Result<ScheduleReport, HardwareError> {
    let layout = count_devices(cfg, Arrangement::Crossbar)?;
    Ok(ScheduleReport {
        layers: layout
            .layers
            .iter()
            .map(|l| LayerSchedule {
                layer: l.layer,
                sequential_steps: l.sequential_steps,
                parallel_steps: 1,
            })
            .collect(),
    })
}

/// One resonator of the parallel convolution: output position `(h, w)` of
/// filter `m`, tap `(i, j)` on channel `c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ResonatorId {
    pub h: usize,
    pub w: usize,
    pub m: usize,
    pub i: usize,
    pub j: usize,
    pub c: usize,
}

/// All resonators tuned by one write-line.
#[derive(Debug, Clone, PartialEq)]
pub struct WriteLineGroup {
    /// Filter coefficient `(i, j, c, m)`.
    pub coefficient: (usize, usize, usize, usize),
    pub members: Vec<ResonatorId>,
    /// `(row, column)` of each member in the placement grid.
    pub positions: Vec<(usize, usize)>,
}

/// Write-line groups of a conv layer with geometry `geom` and `filters`
/// output maps. Memory grows with the resonator count; use on small layers.
pub fn write_line_groups(geom: &PatchGeometry, filters: usize, arrangement: Arrangement) -> Vec<WriteLineGroup> {
    let k = geom.kernel;
    let padded_w = geom.width + 2 * geom.padding;
    let positions = geom.rows();
    let mut groups = Vec::with_capacity(k * k * geom.channels * filters);
    for i in 0..k {
        for j in 0..k {
            for c in 0..geom.channels {
                for m in 0..filters {
                    let coeff_index = ((i * k + j) * geom.channels + c) * filters + m;
                    let mut members = Vec::with_capacity(positions);
                    let mut placed = Vec::with_capacity(positions);
                    for h in 0..geom.out_height {
                        for w in 0..geom.out_width {
                            members.push(ResonatorId { h, w, m, i, j, c });
                            let out_pos = h * geom.out_width + w;
                            placed.push(match arrangement {
                                Arrangement::Crossbar => {
                                    let line = ((h * geom.stride + i) * padded_w + w * geom.stride + j) * geom.channels + c;
                                    (line, m * positions + out_pos)
                                }
                                Arrangement::Compact => (out_pos, coeff_index),
                            });
                        }
                    }
                    groups.push(WriteLineGroup {
                        coefficient: (i, j, c, m),
                        members,
                        positions: placed,
                    });
                }
            }
        }
    }
    groups
}

/// Result of the one-chain-per-filter sequential simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct SequentialRun {
    pub output: Tensor<f64>,
    /// Output positions in the order they were computed.
    pub steps: Vec<(usize, usize)>,
}

/// Convolution computed one output position per step: at each step the
/// window's input powers are injected into a single chain per filter whose
/// resonators hold the filter coefficients, and the chain voltage is read.
pub fn simulate_sequential_conv(input: &Tensor<f64>, layer: &RfConv2d<f64>) -> Result<SequentialRun, HardwareError> {
    if let Some(v) = input.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(ModelError::Domain(format!("input power {v} µW is negative or NaN")).into());
    }
    let g = layer.geometry(input.shape())?;
    let m_n = layer.filter.filters();
    let (k, c_n) = (g.kernel, g.channels);
    // one chain per filter: resonator weights in tap order (i, j, c)
    let w = layer.weights();
    let chains: Vec<Vec<f64>> = (0..m_n)
        .map(|m| (0..k * k * c_n).map(|t| w.data()[t * m_n + m]).collect())
        .collect();
    let bias = layer.filter.bias.value.data();
    let gain = layer.filter.gain.value.data()[0];
    let mut out = vec![0.0; g.rows() * m_n];
    let mut steps = Vec::with_capacity(g.rows());
    let mut window = vec![0.0; k * k * c_n];
    for h in 0..g.out_height {
        for w_pos in 0..g.out_width {
            for i in 0..k {
                for j in 0..k {
                    let y = (h * g.stride + i) as isize - g.padding as isize;
                    let x = (w_pos * g.stride + j) as isize - g.padding as isize;
                    let inside = y >= 0 && x >= 0 && (y as usize) < g.height && (x as usize) < g.width;
                    for c in 0..c_n {
                        window[(i * k + j) * c_n + c] = if inside {
                            input.data()[(y as usize * g.width + x as usize) * c_n + c]
                        } else {
                            0.0
                        };
                    }
                }
            }
            for (m, chain) in chains.iter().enumerate() {
                let u: f64 = window.iter().zip(chain).map(|(p, wt)| p * wt).sum();
                out[(h * g.out_width + w_pos) * m_n + m] = gain * (u + bias[m]);
            }
            steps.push((h, w_pos));
        }
    }
    Ok(SequentialRun {
        output: Tensor::new(vec![g.out_height, g.out_width, m_n], out).map_err(ModelError::from)?,
        steps,
    })
}

impl NetworkLayout {
    pub fn to_text(&self) -> String {
        let mut s = format!("arrangement: {}\n", self.arrangement);
        s.push_str("layer  kind   resonators  oscillators  field_lines  write_lines  per_write_line  chain  seq_steps  carriers  spacing_MHz  feasible\n");
        for l in &self.layers {
            s.push_str(&format!(
                "{:<6} {:<6} {:>10} {:>12} {:>12} {:>12} {:>15} {:>6} {:>10} {:>9} {:>12.4} {:>9}\n",
                l.layer,
                l.kind,
                l.resonators,
                l.oscillators,
                l.field_lines,
                l.write_lines,
                l.devices_per_write_line,
                l.chain_length,
                l.sequential_steps,
                l.frequency_plan.count,
                l.frequency_plan.spacing_ghz * 1e3,
                l.frequency_plan.feasible,
            ));
        }
        s.push_str(&format!(
            "total: {} resonators, {} oscillators, {} write-lines\n",
            self.total_resonators, self.total_oscillators, self.total_write_lines
        ));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn frequency_plans() {
        let p = allocate_frequencies(2, 1.0, 2.0, None).unwrap();
        assert_eq!(p.carriers, vec![1.0, 2.0]);
        assert_eq!(p.spacing_ghz, 1.0);
        assert!(p.feasible);

        let p = allocate_frequencies(784, 1.0, 2.0, None).unwrap();
        assert!((p.spacing_ghz * 1e3 - 1.2771).abs() < 1e-3);
        assert!((p.min_spacing_ghz - 0.015).abs() < 1e-12);
        assert!(!p.feasible);
        assert!(p.carriers.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(*p.carriers.last().unwrap(), 2.0);

        let p = allocate_frequencies(1, 1.0, 2.0, None).unwrap();
        assert_eq!(p.carriers, vec![1.5]);

        assert!(allocate_frequencies(0, 1.0, 2.0, None).is_err());
        assert!(allocate_frequencies(3, 2.0, 1.0, None).is_err());
    }

    #[test]
    fn paper_layer_counts() {
        let r = count_devices(&NetworkConfig::paper(), Arrangement::Crossbar).unwrap();
        assert_eq!(r.layers[0].resonators, 540_800);
        assert_eq!(r.layers[0].write_lines, 800);
        assert_eq!(r.layers[0].devices_per_write_line, 676);
        assert_eq!(r.layers[0].oscillators, 13 * 13 * 32);
        assert_eq!(r.layers[1].resonators, 6_195_200);
        assert_eq!(r.layers[1].devices_per_write_line, 121);
        assert_eq!(r.layers[2].resonators, 16_000);
        assert_eq!(r.layers[2].oscillators, 0);
    }

    #[test]
    fn trivial_layer() {
        let cfg = NetworkConfig {
            input: [1, 1, 1],
            layers: vec![
                LayerSpec::Conv { filters: 1, kernel: 1, stride: 1, padding: 0 },
                LayerSpec::Dense { outputs: 1 },
            ],
            ..NetworkConfig::desk()
        };
        let r = count_devices(&cfg, Arrangement::Compact).unwrap();
        assert_eq!(r.layers[0].resonators, 1);
        assert_eq!(r.layers[0].write_lines, 1);
        let s = sequential_schedule(&cfg).unwrap();
        assert_eq!(s.layers[0].sequential_steps, 1);
        assert_eq!(s.layers[0].parallel_steps, 1);
    }

    #[test]
    fn schedules_for_paper_layers() {
        let s = sequential_schedule(&NetworkConfig::paper()).unwrap();
        assert_eq!(s.layers[0].sequential_steps, 676);
        assert_eq!(s.layers[1].sequential_steps, 121);
    }

    #[test]
    fn groups_partition_resonators() {
        let g = PatchGeometry::new(5, 5, 2, 3, 1, 1).unwrap();
        let groups = write_line_groups(&g, 2, Arrangement::Crossbar);
        assert_eq!(groups.len(), 3 * 3 * 2 * 2);
        let mut seen = HashSet::new();
        for grp in &groups {
            assert_eq!(grp.members.len(), 25);
            for m in &grp.members {
                assert!(seen.insert(*m));
            }
        }
        assert_eq!(seen.len(), 25 * 36);
    }

    #[test]
    fn arrangements_differ_only_in_placement() {
        let g = PatchGeometry::new(5, 5, 1, 3, 1, 1).unwrap();
        let a = write_line_groups(&g, 1, Arrangement::Crossbar);
        let b = write_line_groups(&g, 1, Arrangement::Compact);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.members, y.members);
            assert_ne!(x.positions, y.positions);
            // compact: one column per coefficient
            assert!(y.positions.iter().all(|p| p.1 == y.positions[0].1));
            // crossbar: a diagonal, row and column both advance along w
            for pair in x.positions.windows(2).take(4) {
                assert_eq!(pair[1].0 - pair[0].0, 1);
                assert_eq!(pair[1].1 - pair[0].1, 1);
            }
        }
    }
}
