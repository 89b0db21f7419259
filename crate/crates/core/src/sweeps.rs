//! Grid studies: best design fidelity over `(T, δt)` and waveform fidelity
//! over linear field ramps `(δΩ_i, δΩ_f)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmarking::DesignedMap;
use crate::error::{ControlError, Result};
use crate::grape::{design, steps_for, DesignConfig};
use crate::linalg::{mean_std, NeumaierSum};
use crate::objectives::{fidelity, TargetMap};
use crate::propagation::{FieldTrajectory, Propagator};
use crate::spin_model::{angular, PhysicalParams};

/// Default robustness radius `δΩ_r` (rad/s).
pub fn default_robustness_radius() -> f64 {
    angular(100.0)
}

/// `T ∈ {150, 300, …, 900} μs`.
pub fn default_time_values() -> Vec<f64> {
    (1..=6).map(|k| k as f64 * 150e-6).collect()
}

/// `δt ∈ {2, 4, 8, 12} μs`.
pub fn default_dt_values() -> Vec<f64> {
    vec![2e-6, 4e-6, 8e-6, 12e-6]
}

/// `n` evenly spaced points on `[−4r, 4r]`.
pub fn default_field_axis(radius: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n)
        .map(|k| -4.0 * radius + 8.0 * radius * k as f64 / (n - 1) as f64)
        .collect()
}

#[derive(Debug, Clone)]
pub struct TimeGridSpec {
    pub t_values: Vec<f64>,
    pub dt_values: Vec<f64>,
    pub targets: Vec<TargetMap>,
    /// Template; `total_time`, `dt` and the parameter-count gate are set per cell.
    pub design: DesignConfig,
}

#[derive(Debug, Clone)]
pub struct FieldGridSpec {
    pub dbi_values: Vec<f64>,
    pub dbf_values: Vec<f64>,
    pub maps: Vec<DesignedMap>,
    pub params: PhysicalParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub name: String,
    pub unit: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CellFlags {
    /// `T/δt` is not an integer; the cell was not run.
    pub non_integral: bool,
    /// Fewer phases than constrained parameters for at least one target.
    pub under_parameterized: bool,
    /// One message per failed target or waveform.
    pub failures: Vec<String>,
}

/// One grid node. `mean` is `None` when no member produced a value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub i: usize,
    pub j: usize,
    pub x: f64,
    pub y: f64,
    pub mean: Option<f64>,
    pub std_dev: Option<f64>,
    /// Per-member fidelities, in target order (failed members omitted).
    pub values: Vec<f64>,
    /// Seed of the best design per target (time grids only).
    pub seeds: Vec<u64>,
    /// Iterations of the best design per target (time grids only).
    pub iterations: Vec<usize>,
    pub flags: CellFlags,
}

/// Cells are stored row-major: index `i · ny + j` for `x[i]`, `y[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub x_axis: GridAxis,
    pub y_axis: GridAxis,
    pub cells: Vec<GridCell>,
}

impl GridResult {
    pub fn shape(&self) -> (usize, usize) {
        (self.x_axis.values.len(), self.y_axis.values.len())
    }

    pub fn cell(&self, i: usize, j: usize) -> &GridCell {
        &self.cells[i * self.y_axis.values.len() + j]
    }

    /// Cells with `i = j` (`anti = false`) or `i + j = n − 1` (`anti = true`).
    pub fn diagonal(&self, anti: bool) -> Vec<&GridCell> {
        let (nx, ny) = self.shape();
        (0..nx.min(ny))
            .map(|k| {
                if anti {
                    self.cell(k, ny - 1 - k)
                } else {
                    self.cell(k, k)
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let (nx, ny) = self.shape();
        if nx == 0 || ny == 0 || self.cells.len() != nx * ny {
            return Err(ControlError::invalid(format!(
                "grid of shape {nx}x{ny} holds {} cells",
                self.cells.len()
            )));
        }
        for (k, c) in self.cells.iter().enumerate() {
            if c.i * ny + c.j != k {
                return Err(ControlError::invalid(format!("cell {k} is out of order")));
            }
            if let Some(m) = c.mean {
                if !(0.0..=1.0 + 1e-12).contains(&m) {
                    return Err(ControlError::invalid(format!(
                        "cell {k} value {m} outside [0, 1]"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn check_axis(name: &str, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(ControlError::invalid(format!("{name} is empty")));
    }
    if v.iter().any(|x| !x.is_finite()) || v.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ControlError::invalid(format!(
            "{name} must be finite and strictly increasing"
        )));
    }
    Ok(())
}

fn summarize(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(values);
        (Some(m), Some(s))
    }
}

/// Designs every target at every `(T, δt)` and records the mean best fidelity.
pub fn sweep_time_grid(spec: &TimeGridSpec) -> Result<GridResult> {
    check_axis("t_values", &spec.t_values)?;
    check_axis("dt_values", &spec.dt_values)?;
    if spec.targets.is_empty() {
        return Err(ControlError::invalid("time grid has no targets"));
    }
    for t in &spec.targets {
        t.validate()?;
    }
    let ny = spec.dt_values.len();
    let n_cells = spec.t_values.len() * ny;

    // one job per (cell, target); results are placed by index
    let jobs: Vec<(usize, usize)> = (0..n_cells)
        .flat_map(|c| (0..spec.targets.len()).map(move |t| (c, t)))
        .collect();
    // (fidelity, best seed, iterations) or a failure message; None when skipped
    type Outcome = Option<std::result::Result<(f64, u64, usize), String>>;
    let outcomes: Vec<Outcome> = jobs
        .par_iter()
        .map(|&(c, t)| {
            let (total_time, dt) = (spec.t_values[c / ny], spec.dt_values[c % ny]);
            steps_for(total_time, dt)?;
            let config = DesignConfig {
                total_time,
                dt,
                enforce_parameter_count: false,
                ..spec.design.clone()
            };
            Some(
                design(&spec.targets[t], &config)
                    .map(|r| {
                        let it = r
                            .per_seed
                            .iter()
                            .find(|s| s.seed == r.best_seed)
                            .map_or(0, |s| s.iterations);
                        (r.best_fidelity, r.best_seed, it)
                    })
                    .map_err(|e| format!("target {t}: {e}")),
            )
        })
        .collect();

    let cells = (0..n_cells)
        .map(|c| {
            let (i, j) = (c / ny, c % ny);
            let (x, y) = (spec.t_values[i], spec.dt_values[j]);
            let mut flags = CellFlags::default();
            let mut values = Vec::new();
            let mut seeds = Vec::new();
            let mut iterations = Vec::new();
            match steps_for(x, y) {
                None => flags.non_integral = true,
                Some(n) => {
                    flags.under_parameterized =
                        spec.targets.iter().any(|t| 3 * n < t.required_phases());
                }
            }
            for o in &outcomes[c * spec.targets.len()..(c + 1) * spec.targets.len()] {
                match o {
                    Some(Ok((f, s, it))) => {
                        values.push(*f);
                        seeds.push(*s);
                        iterations.push(*it);
                    }
                    Some(Err(msg)) => flags.failures.push(msg.clone()),
                    None => {}
                }
            }
            let (mean, std_dev) = summarize(&values);
            GridCell {
                i,
                j,
                x,
                y,
                mean,
                std_dev,
                values,
                seeds,
                iterations,
                flags,
            }
        })
        .collect();

    Ok(GridResult {
        x_axis: GridAxis {
            name: "total_time".into(),
            unit: "s".into(),
            values: spec.t_values.clone(),
        },
        y_axis: GridAxis {
            name: "dt".into(),
            unit: "s".into(),
            values: spec.dt_values.clone(),
        },
        cells,
    })
}

/// Evaluates every waveform under the ramp `δΩ_i → δΩ_f` at every node.
pub fn sweep_field_grid(spec: &FieldGridSpec) -> Result<GridResult> {
    check_axis("dbi_values", &spec.dbi_values)?;
    check_axis("dbf_values", &spec.dbf_values)?;
    if spec.maps.is_empty() {
        return Err(ControlError::invalid("field grid has no waveforms"));
    }
    let d = spec.params.dim();
    for (k, m) in spec.maps.iter().enumerate() {
        if m.target.dim() != d {
            return Err(ControlError::invalid(format!(
                "map {k} has dimension {}, parameters describe {d}",
                m.target.dim()
            )));
        }
    }
    let propagator = Propagator::new(&spec.params)?;
    let ny = spec.dbf_values.len();
    let cells = (0..spec.dbi_values.len() * ny)
        .into_par_iter()
        .map(|c| {
            let (i, j) = (c / ny, c % ny);
            let (x, y) = (spec.dbi_values[i], spec.dbf_values[j]);
            let field = FieldTrajectory::ramp(x, y);
            let mut flags = CellFlags::default();
            let mut values = Vec::with_capacity(spec.maps.len());
            for (k, m) in spec.maps.iter().enumerate() {
                match propagator
                    .total(&m.waveform, &field)
                    .and_then(|u| fidelity(&m.target, &u))
                {
                    Ok(f) => values.push(f),
                    Err(e) => flags.failures.push(format!("waveform {k}: {e}")),
                }
            }
            let (mean, std_dev) = summarize(&values);
            GridCell {
                i,
                j,
                x,
                y,
                mean,
                std_dev,
                values,
                seeds: Vec::new(),
                iterations: Vec::new(),
                flags,
            }
        })
        .collect();
    Ok(GridResult {
        x_axis: GridAxis {
            name: "delta_omega_i".into(),
            unit: "rad/s".into(),
            values: spec.dbi_values.clone(),
        },
        y_axis: GridAxis {
            name: "delta_omega_f".into(),
            unit: "rad/s".into(),
            values: spec.dbf_values.clone(),
        },
        cells,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContourFlag {
    /// The level exceeds every grid value.
    LevelAboveData,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContourArea {
    /// Area in units of one grid cell.
    pub area: f64,
    /// Total domain area, `(nx − 1)(ny − 1)`.
    pub domain: f64,
    pub flag: Option<ContourFlag>,
}

/// Sub-samples per cell edge used to integrate the bilinear surface.
const CONTOUR_SUBSAMPLES: usize = 64;

/// Area of `{mean ≥ level}` under bilinear interpolation between nodes, in
/// grid-index coordinates. Nodes without a value count as zero fidelity.
pub fn contour_area(grid: &GridResult, level: f64) -> Result<ContourArea> {
    if !(level > 0.0 && level < 1.0) {
        return Err(ControlError::invalid(format!(
            "contour level must lie in (0, 1), got {level}"
        )));
    }
    grid.validate()?;
    let (nx, ny) = grid.shape();
    let v = |i: usize, j: usize| grid.cell(i, j).mean.unwrap_or(0.0);
    let domain = ((nx.max(2) - 1) * (ny.max(2) - 1)) as f64;
    let max = grid
        .cells
        .iter()
        .map(|c| c.mean.unwrap_or(0.0))
        .fold(f64::MIN, f64::max);
    if level > max {
        return Ok(ContourArea {
            area: 0.0,
            domain,
            flag: Some(ContourFlag::LevelAboveData),
        });
    }
    if nx < 2 || ny < 2 {
        return Err(ControlError::invalid(
            "contour area needs at least 2 points per axis",
        ));
    }
    let s = CONTOUR_SUBSAMPLES;
    let mut area = NeumaierSum::default();
    for i in 0..nx - 1 {
        for j in 0..ny - 1 {
            let (a, b, c, d) = (v(i, j), v(i + 1, j), v(i, j + 1), v(i + 1, j + 1));
            let mut inside = 0usize;
            if a.min(b).min(c).min(d) >= level {
                inside = s * s;
            } else if a.max(b).max(c).max(d) >= level {
                for p in 0..s {
                    let u = (p as f64 + 0.5) / s as f64;
                    for q in 0..s {
                        let w = (q as f64 + 0.5) / s as f64;
                        let f = a * (1.0 - u) * (1.0 - w)
                            + b * u * (1.0 - w)
                            + c * (1.0 - u) * w
                            + d * u * w;
                        if f >= level {
                            inside += 1;
                        }
                    }
                }
            }
            area.add(inside as f64 / (s * s) as f64);
        }
    }
    Ok(ContourArea {
        area: area.value(),
        domain,
        flag: None,
    })
}
