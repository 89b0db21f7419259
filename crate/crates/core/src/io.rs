//! File formats: JSON for waveforms, targets, configs and reports; CSV for
//! benchmark samples and grids.
//!
//! Complex numbers are written as `[re, im]` pairs and matrices as lists of
//! rows. Floats use the shortest representation that parses back to the same
//! bits, so every number round-trips exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::benchmarking::{
    BenchmarkConfig, BenchmarkOutcome, DecayPoint, DesignedMap, ErrorModel, SurvivalSample,
};
use crate::error::{ControlError, Result};
use crate::grape::{AscentMethod, DesignConfig, OptimizationReport};
use crate::linalg::{c, CMatrix, CVector};
use crate::objectives::{EnsembleMember, PerturbationEnsemble, Subspace, TargetKind, TargetMap};
use crate::propagation::ControlWaveform;
use crate::spin_model::{ManifoldStructure, PhysicalParams, StepPhases};
use crate::sweeps::{default_robustness_radius, GridResult};
use crate::targets::{
    basis_state, sample_block_target, sample_full_target, sample_state_target,
    sample_subspace_target, RngStream, SubspaceMode,
};

/// First random stream used for sampled targets; stream 0 seeds designs.
pub const TARGET_STREAM_BASE: u64 = 1 << 20;

pub const FORMAT_VERSION: u32 = 1;
pub const SUPPORTED_VERSIONS: &[u32] = &[1];

fn io_err(path: &Path, source: std::io::Error) -> ControlError {
    ControlError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn schema(field: impl Into<String>, message: impl Into<String>) -> ControlError {
    ControlError::Schema {
        field: field.into(),
        message: message.into(),
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| ControlError::invalid(format!("serialization failed: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &to_json(value)?)
}

/// Deserializes with the path of the offending field in errors.
pub fn from_json_value<T: DeserializeOwned>(value: serde_json::Value) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let message = e.inner().to_string();
        // the path of a missing field stops at its parent
        let named = message
            .strip_prefix("missing field `")
            .and_then(|rest| rest.split('`').next());
        let field = match (named, path.as_str()) {
            (Some(f), ".") => f.to_string(),
            (Some(f), p) => format!("{p}.{f}"),
            (None, p) => p.to_string(),
        };
        schema(field, message)
    })
}

/// Parses a document that may lack a version (configs).
pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| schema("(document)", e.to_string()))?;
    from_json_value(value)
}

/// Parses a document carrying `format_version`, checking it first.
pub fn parse_versioned<T: DeserializeOwned>(text: &str) -> Result<T> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| schema("(document)", e.to_string()))?;
    let version = value
        .get("format_version")
        .ok_or_else(|| schema("format_version", "missing"))?;
    let found = version
        .as_u64()
        .and_then(|v| u32::try_from(v).ok())
        .ok_or_else(|| schema("format_version", "must be a non-negative integer"))?;
    if !SUPPORTED_VERSIONS.contains(&found) {
        return Err(ControlError::Version {
            found,
            supported: SUPPORTED_VERSIONS.to_vec(),
        });
    }
    from_json_value(value)
}

pub type ComplexPair = [f64; 2];

pub fn vector_to_pairs(v: &CVector) -> Vec<ComplexPair> {
    v.iter().map(|z| [z.re, z.im]).collect()
}

pub fn matrix_to_rows(m: &CMatrix) -> Vec<Vec<ComplexPair>> {
    (0..m.nrows())
        .map(|i| {
            (0..m.ncols())
                .map(|j| [m[(i, j)].re, m[(i, j)].im])
                .collect()
        })
        .collect()
}

pub fn pairs_to_vector(v: &[ComplexPair]) -> CVector {
    CVector::from_iterator(v.len(), v.iter().map(|p| c(p[0], p[1])))
}

pub fn rows_to_matrix(rows: &[Vec<ComplexPair>], field: &str) -> Result<CMatrix> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || m == 0 {
        return Err(schema(field, "matrix is empty"));
    }
    if let Some(i) = rows.iter().position(|r| r.len() != m) {
        return Err(schema(
            format!("{field}[{i}]"),
            format!("row has {} entries, expected {m}", rows[i].len()),
        ));
    }
    Ok(CMatrix::from_fn(n, m, |i, j| {
        c(rows[i][j][0], rows[i][j][1])
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SubspaceRepr {
    Basis(Vec<usize>),
    Span(Vec<Vec<ComplexPair>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetRepr {
    FullUnitary {
        matrix: Vec<Vec<ComplexPair>>,
    },
    SubspaceMap {
        dim: usize,
        w: Vec<Vec<ComplexPair>>,
        input: SubspaceRepr,
        output: SubspaceRepr,
    },
    StateMap {
        initial: Vec<ComplexPair>,
        target: Vec<ComplexPair>,
    },
}

impl SubspaceRepr {
    fn from_subspace(s: &Subspace) -> Self {
        match s {
            Subspace::Basis(idx) => SubspaceRepr::Basis(idx.clone()),
            Subspace::Span(v) => SubspaceRepr::Span(matrix_to_rows(v)),
        }
    }

    fn to_subspace(&self, field: &str) -> Result<Subspace> {
        Ok(match self {
            SubspaceRepr::Basis(idx) => Subspace::Basis(idx.clone()),
            SubspaceRepr::Span(rows) => Subspace::Span(rows_to_matrix(rows, field)?),
        })
    }
}

impl TargetRepr {
    pub fn from_target(t: &TargetMap) -> Self {
        match t {
            TargetMap::FullUnitary(w) => TargetRepr::FullUnitary {
                matrix: matrix_to_rows(w),
            },
            TargetMap::SubspaceMap {
                w,
                input,
                output,
                dim,
            } => TargetRepr::SubspaceMap {
                dim: *dim,
                w: matrix_to_rows(w),
                input: SubspaceRepr::from_subspace(input),
                output: SubspaceRepr::from_subspace(output),
            },
            TargetMap::StateMap { initial, target } => TargetRepr::StateMap {
                initial: vector_to_pairs(initial),
                target: vector_to_pairs(target),
            },
        }
    }

    pub fn to_target(&self) -> Result<TargetMap> {
        match self {
            TargetRepr::FullUnitary { matrix } => {
                TargetMap::full(rows_to_matrix(matrix, "target.matrix")?)
            }
            TargetRepr::SubspaceMap {
                dim,
                w,
                input,
                output,
            } => TargetMap::subspace(
                *dim,
                rows_to_matrix(w, "target.w")?,
                input.to_subspace("target.input")?,
                output.to_subspace("target.output")?,
            ),
            TargetRepr::StateMap { initial, target } => {
                TargetMap::state(pairs_to_vector(initial), pairs_to_vector(target))
            }
        }
    }
}

/// SHA-256 of the compact JSON form of the target, hex encoded.
pub fn target_hash(t: &TargetMap) -> String {
    let bytes = serde_json::to_vec(&TargetRepr::from_target(t)).expect("plain data serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// How a target file was produced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetProvenance {
    pub seed: Option<u64>,
    pub stream: Option<u64>,
    pub rng: Option<String>,
    pub config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetFile {
    pub format_version: u32,
    pub manifold: ManifoldStructure,
    pub target: TargetRepr,
    #[serde(default)]
    pub provenance: TargetProvenance,
}

impl TargetFile {
    pub fn new(
        target: &TargetMap,
        manifold: ManifoldStructure,
        provenance: TargetProvenance,
    ) -> Self {
        TargetFile {
            format_version: FORMAT_VERSION,
            manifold,
            target: TargetRepr::from_target(target),
            provenance,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let f: TargetFile = parse_versioned(text)?;
        f.manifold
            .validate()
            .map_err(|e| schema("manifold", e.to_string()))?;
        let t = f.target_map()?;
        if t.dim() != f.manifold.dim() {
            return Err(schema(
                "target",
                format!(
                    "dimension {} does not match the manifold ({})",
                    t.dim(),
                    f.manifold.dim()
                ),
            ));
        }
        Ok(f)
    }

    pub fn target_map(&self) -> Result<TargetMap> {
        self.target.to_target().map_err(|e| match e {
            ControlError::InvalidArgument(m) => schema("target", m),
            other => other,
        })
    }
}

pub fn write_target(path: &Path, file: &TargetFile) -> Result<()> {
    write_json(path, file)
}

pub fn read_target(path: &Path) -> Result<TargetFile> {
    TargetFile::parse(&read_text(path)?)
}

/// Phase arrays in time order, wrapped to `[0, 2π)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseArrays {
    pub phi_x: Vec<f64>,
    pub phi_y: Vec<f64>,
    pub phi_uw: Vec<f64>,
}

/// What produced a waveform.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DesignProvenance {
    pub target_hash: Option<String>,
    pub seed: Option<u64>,
    pub fidelity: Option<f64>,
    /// Snapshot of the configuration that produced the file.
    pub config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveformFile {
    pub format_version: u32,
    pub manifold: ManifoldStructure,
    #[serde(default)]
    pub label: String,
    pub dt: f64,
    pub n_steps: usize,
    pub phases: PhaseArrays,
    pub params: PhysicalParams,
    pub ensemble: PerturbationEnsemble,
    #[serde(default)]
    pub provenance: DesignProvenance,
}

impl WaveformFile {
    pub fn new(
        waveform: &ControlWaveform,
        params: &PhysicalParams,
        ensemble: &PerturbationEnsemble,
        provenance: DesignProvenance,
    ) -> Self {
        let w = waveform.wrapped();
        WaveformFile {
            format_version: FORMAT_VERSION,
            manifold: params.manifold,
            label: w.label.clone(),
            dt: w.dt(),
            n_steps: w.n_steps(),
            phases: PhaseArrays {
                phi_x: w.phases().iter().map(|p| p.phi_x).collect(),
                phi_y: w.phases().iter().map(|p| p.phi_y).collect(),
                phi_uw: w.phases().iter().map(|p| p.phi_uw).collect(),
            },
            params: *params,
            ensemble: ensemble.clone(),
            provenance,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let f: WaveformFile = parse_versioned(text)?;
        f.check()?;
        Ok(f)
    }

    fn check(&self) -> Result<()> {
        let tau = std::f64::consts::TAU;
        for (name, arr) in [
            ("phases.phi_x", &self.phases.phi_x),
            ("phases.phi_y", &self.phases.phi_y),
            ("phases.phi_uw", &self.phases.phi_uw),
        ] {
            if arr.len() != self.n_steps {
                return Err(schema(
                    name,
                    format!("has {} entries, n_steps is {}", arr.len(), self.n_steps),
                ));
            }
            if let Some(k) = arr.iter().position(|p| !(0.0..tau).contains(p)) {
                return Err(schema(format!("{name}[{k}]"), "phase outside [0, 2π)"));
            }
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(schema("dt", "must be positive"));
        }
        if self.params.manifold != self.manifold {
            return Err(schema(
                "params.manifold",
                "differs from the file's manifold",
            ));
        }
        self.manifold
            .validate()
            .map_err(|e| schema("manifold", e.to_string()))?;
        self.params
            .validate()
            .map_err(|e| schema("params", e.to_string()))?;
        self.ensemble
            .validate()
            .map_err(|e| schema("ensemble", e.to_string()))?;
        Ok(())
    }

    pub fn waveform(&self) -> Result<ControlWaveform> {
        let phases = (0..self.n_steps)
            .map(|k| {
                StepPhases::new(
                    self.phases.phi_x[k],
                    self.phases.phi_y[k],
                    self.phases.phi_uw[k],
                )
            })
            .collect();
        Ok(ControlWaveform::new(self.dt, phases)?.with_label(self.label.clone()))
    }
}

pub fn write_waveform(path: &Path, file: &WaveformFile) -> Result<()> {
    write_json(path, file)
}

pub fn read_waveform(path: &Path) -> Result<WaveformFile> {
    WaveformFile::parse(&read_text(path)?)
}

/// Loads `NAME.target.json` / `NAME.waveform.json` pairs, sorted by name.
pub fn read_map_set(dir: &Path) -> Result<Vec<(String, DesignedMap)>> {
    let entries = fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    let mut names = Vec::new();
    for e in entries {
        let e = e.map_err(|err| io_err(dir, err))?;
        let file = e.file_name().to_string_lossy().into_owned();
        if let Some(name) = file.strip_suffix(".target.json") {
            names.push(name.to_string());
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(ControlError::invalid(format!(
            "no *.target.json files in {}",
            dir.display()
        )));
    }
    names
        .into_iter()
        .map(|name| {
            let tf = read_target(&dir.join(format!("{name}.target.json")))?;
            let wf = read_waveform(&dir.join(format!("{name}.waveform.json")))?;
            let target = tf.target_map()?;
            if let Some(h) = &wf.provenance.target_hash {
                if *h != target_hash(&target) {
                    return Err(schema(
                        "provenance.target_hash",
                        format!("waveform {name} was designed for a different target"),
                    ));
                }
            }
            Ok((
                name,
                DesignedMap {
                    target,
                    waveform: wf.waveform()?,
                },
            ))
        })
        .collect()
}

/// Design report written next to a waveform.
#[derive(Debug, Clone, Serialize)]
pub struct DesignReportFile<'a> {
    pub format_version: u32,
    pub target_hash: String,
    pub best_fidelity: f64,
    pub best_seed: u64,
    pub per_seed: &'a [crate::grape::SeedRecord],
    pub config: serde_json::Value,
    /// Wall-clock seconds; the only field that varies between identical runs.
    pub wall_time: f64,
}

impl<'a> DesignReportFile<'a> {
    pub fn new(
        report: &'a OptimizationReport,
        target: &TargetMap,
        config: serde_json::Value,
    ) -> Self {
        DesignReportFile {
            format_version: FORMAT_VERSION,
            target_hash: target_hash(target),
            best_fidelity: report.best_fidelity,
            best_seed: report.best_seed,
            per_seed: &report.per_seed,
            config,
            wall_time: report.wall_time,
        }
    }
}

pub fn write_benchmark_csv(path: &Path, samples: &[SurvivalSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let map_err = |e: csv::Error| ControlError::invalid(format!("csv: {e}"));
    w.write_record(["l", "sequence_id", "survival"])
        .map_err(map_err)?;
    for s in samples {
        w.write_record([
            s.length.to_string(),
            s.sequence_id.to_string(),
            s.survival.to_string(),
        ])
        .map_err(map_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| ControlError::invalid(format!("csv: {e}")))?;
    write_text(path, &String::from_utf8(bytes).expect("ascii"))
}

pub fn read_benchmark_csv(path: &Path) -> Result<Vec<SurvivalSample>> {
    let text = read_text(path)?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize()
        .enumerate()
        .map(|(k, rec)| rec.map_err(|e| schema(format!("row {}", k + 1), e.to_string())))
        .collect()
}

/// Fit report document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub format_version: u32,
    pub dim: usize,
    pub epsilon_0: f64,
    pub epsilon_b: f64,
    pub benchmark_fidelity: f64,
    pub covariance: [[f64; 2]; 2],
    pub std_errors: [f64; 2],
    pub residual_norm: f64,
    pub iterations: usize,
    pub points: Vec<DecayPoint>,
    pub epsilon_s: f64,
    pub epsilon_ratio: f64,
    pub maps: Vec<String>,
    pub config: serde_json::Value,
}

impl FitReport {
    pub fn new(
        outcome: &BenchmarkOutcome,
        dim: usize,
        maps: Vec<String>,
        config: serde_json::Value,
    ) -> Self {
        FitReport {
            format_version: FORMAT_VERSION,
            dim,
            epsilon_0: outcome.fit.epsilon_0,
            epsilon_b: outcome.fit.epsilon_b,
            benchmark_fidelity: outcome.fit.benchmark_fidelity(),
            covariance: outcome.fit.covariance,
            std_errors: outcome.fit.std_errors(),
            residual_norm: outcome.fit.residual_norm,
            iterations: outcome.fit.iterations,
            points: outcome.points.clone(),
            epsilon_s: outcome.epsilon_s,
            epsilon_ratio: outcome.epsilon_ratio,
            maps,
            config,
        }
    }
}

pub fn write_grid_csv(path: &Path, grid: &GridResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let map_err = |e: csv::Error| ControlError::invalid(format!("csv: {e}"));
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    w.write_record([
        grid.x_axis.name.as_str(),
        grid.y_axis.name.as_str(),
        "i",
        "j",
        "mean",
        "std",
        "n",
        "non_integral",
        "under_parameterized",
        "failures",
    ])
    .map_err(map_err)?;
    for cell in &grid.cells {
        w.write_record([
            cell.x.to_string(),
            cell.y.to_string(),
            cell.i.to_string(),
            cell.j.to_string(),
            opt(cell.mean),
            opt(cell.std_dev),
            cell.values.len().to_string(),
            cell.flags.non_integral.to_string(),
            cell.flags.under_parameterized.to_string(),
            cell.flags.failures.len().to_string(),
        ])
        .map_err(map_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| ControlError::invalid(format!("csv: {e}")))?;
    write_text(path, &String::from_utf8(bytes).expect("ascii"))
}

/// Grid document embedding the producing spec.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    pub format_version: u32,
    pub spec: serde_json::Value,
    pub result: GridResult,
}

impl GridFile {
    pub fn new(result: GridResult, spec: serde_json::Value) -> Self {
        GridFile {
            format_version: FORMAT_VERSION,
            spec,
            result,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let f: GridFile = parse_versioned(text)?;
        f.result
            .validate()
            .map_err(|e| schema("result", e.to_string()))?;
        Ok(f)
    }
}

pub fn read_grid(path: &Path) -> Result<GridFile> {
    GridFile::parse(&read_text(path)?)
}

/// Where a task's target comes from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSource {
    #[default]
    Sample,
    File {
        path: PathBuf,
    },
}

/// Which block a sampled subspace map acts on, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifoldBlock {
    Upper,
    Lower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub kind: TargetKind,
    pub source: TargetSource,
    /// `p` for sampled subspace maps.
    pub subspace_dim: usize,
    pub subspace_mode: SubspaceMode,
    /// Sample a unitary on one hyperfine manifold instead of random subspaces.
    pub block: Option<ManifoldBlock>,
    /// Basis index of the initial state for sampled state maps.
    pub initial_state: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            kind: TargetKind::FullUnitary,
            source: TargetSource::Sample,
            subspace_dim: 2,
            subspace_mode: SubspaceMode::BasisAligned,
            block: None,
            initial_state: 0,
        }
    }
}

impl TaskSpec {
    /// Target number `index` of the task, drawn from its own stream of `seed`.
    pub fn sample(&self, params: &PhysicalParams, seed: u64, index: u64) -> Result<TargetMap> {
        let d = params.dim();
        let mut rng = RngStream::new(seed, TARGET_STREAM_BASE + index);
        match self.kind {
            TargetKind::FullUnitary => Ok(sample_full_target(d, &mut rng)),
            TargetKind::SubspaceMap => match self.block {
                Some(ManifoldBlock::Upper) => {
                    sample_block_target(d, &params.manifold.upper_indices(), &mut rng)
                }
                Some(ManifoldBlock::Lower) => {
                    let lower: Vec<usize> = (params.manifold.upper_dim()..d).collect();
                    sample_block_target(d, &lower, &mut rng)
                }
                None => sample_subspace_target(d, self.subspace_dim, self.subspace_mode, &mut rng),
            },
            TargetKind::StateMap => {
                if self.initial_state >= d {
                    return Err(schema("task.initial_state", format!("must be below {d}")));
                }
                sample_state_target(basis_state(d, self.initial_state), &mut rng)
            }
        }
    }

    /// Provenance record for target number `index`.
    pub fn provenance(&self, seed: u64, index: u64) -> TargetProvenance {
        TargetProvenance {
            seed: Some(seed),
            stream: Some(TARGET_STREAM_BASE + index),
            rng: Some(RngStream::ALGORITHM.to_string()),
            config: Some(serde_json::to_value(self).expect("task serializes")),
        }
    }
}

/// Design settings of a run; parameters, ensemble and seed come from the
/// enclosing [`RunConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DesignSection {
    pub total_time: f64,
    pub dt: f64,
    pub target_fidelity: f64,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub n_seeds: usize,
    pub method: AscentMethod,
    pub stop_after_success: bool,
    pub enforce_parameter_count: bool,
}

impl Default for DesignSection {
    fn default() -> Self {
        Self::from_config(&DesignConfig::default())
    }
}

impl DesignSection {
    pub fn from_config(d: &DesignConfig) -> Self {
        DesignSection {
            total_time: d.total_time,
            dt: d.dt,
            target_fidelity: d.target_fidelity,
            max_iterations: d.max_iterations,
            gradient_tolerance: d.gradient_tolerance,
            n_seeds: d.n_seeds,
            method: d.method,
            stop_after_success: d.stop_after_success,
            enforce_parameter_count: d.enforce_parameter_count,
        }
    }

    pub fn to_config(
        &self,
        params: PhysicalParams,
        ensemble: PerturbationEnsemble,
        seed: u64,
    ) -> DesignConfig {
        DesignConfig {
            total_time: self.total_time,
            dt: self.dt,
            target_fidelity: self.target_fidelity,
            max_iterations: self.max_iterations,
            gradient_tolerance: self.gradient_tolerance,
            n_seeds: self.n_seeds,
            rng_seed: seed,
            ensemble,
            params,
            method: self.method,
            stop_after_success: self.stop_after_success,
            enforce_parameter_count: self.enforce_parameter_count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsemblePreset {
    None,
    TwoPoint,
    FourPoint,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSpec {
    pub preset: EnsemblePreset,
    /// Robustness radius `δΩ_r` (rad/s).
    pub radius: f64,
    /// Members for the `custom` preset.
    pub members: Vec<EnsembleMember>,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        EnsembleSpec {
            preset: EnsemblePreset::None,
            radius: default_robustness_radius(),
            members: Vec::new(),
        }
    }
}

impl EnsembleSpec {
    pub fn to_ensemble(&self) -> Result<PerturbationEnsemble> {
        if !(self.radius >= 0.0 && self.radius.is_finite()) {
            return Err(schema("ensemble.radius", "must be finite and non-negative"));
        }
        match self.preset {
            EnsemblePreset::None => Ok(PerturbationEnsemble::nominal()),
            EnsemblePreset::TwoPoint => Ok(PerturbationEnsemble::two_point(self.radius)),
            EnsemblePreset::FourPoint => Ok(PerturbationEnsemble::four_point(self.radius)),
            EnsemblePreset::Custom => PerturbationEnsemble::new(self.members.clone())
                .map_err(|e| schema("ensemble.members", e.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSection {
    pub lengths: Vec<usize>,
    pub n_per_length: usize,
    /// Preparation and readout design settings.
    pub prep: DesignSection,
    pub min_prep_fidelity: f64,
    pub fiducial: usize,
    pub error_model: ErrorModel,
    pub epsilon_s_samples: usize,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        let b = BenchmarkConfig::default();
        BenchmarkSection {
            lengths: b.lengths,
            n_per_length: b.n_per_length,
            prep: DesignSection::from_config(&b.prep_design),
            min_prep_fidelity: b.min_prep_fidelity,
            fiducial: b.fiducial,
            error_model: ErrorModel::none(),
            epsilon_s_samples: b.epsilon_s_samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub t_values: Vec<f64>,
    pub dt_values: Vec<f64>,
    /// Number of sampled targets for time sweeps.
    pub n_targets: usize,
    /// Points per field axis; the axis spans `±4 δΩ_r`.
    pub field_points: usize,
    pub contour_level: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            t_values: crate::sweeps::default_time_values(),
            dt_values: crate::sweeps::default_dt_values(),
            n_targets: 3,
            field_points: 17,
            contour_level: 0.99,
        }
    }
}

/// A complete run configuration. Unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub params: PhysicalParams,
    pub task: TaskSpec,
    pub design: DesignSection,
    pub ensemble: EnsembleSpec,
    pub benchmark: BenchmarkSection,
    pub sweep: SweepSection,
    /// Output directory.
    pub output: Option<PathBuf>,
    pub seed: u64,
    pub workers: Option<usize>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = parse_json(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.params
            .validate()
            .map_err(|e| schema("params", e.to_string()))?;
        self.ensemble.to_ensemble()?;
        self.benchmark
            .error_model
            .validate()
            .map_err(|e| schema("benchmark.error_model", e.to_string()))?;
        if self.workers == Some(0) {
            return Err(schema("workers", "must be positive"));
        }
        Ok(())
    }

    pub fn design_config(&self) -> Result<DesignConfig> {
        let cfg = self
            .design
            .to_config(self.params, self.ensemble.to_ensemble()?, self.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn benchmark_config(&self) -> BenchmarkConfig {
        let b = &self.benchmark;
        BenchmarkConfig {
            lengths: b.lengths.clone(),
            n_per_length: b.n_per_length,
            prep_design: b
                .prep
                .to_config(self.params, PerturbationEnsemble::nominal(), self.seed),
            min_prep_fidelity: b.min_prep_fidelity,
            fiducial: b.fiducial,
            params: self.params,
            rng_seed: self.seed,
            epsilon_s_samples: b.epsilon_s_samples,
        }
    }

    /// Settings that determine results: output location and worker count are dropped.
    pub fn snapshot(&self) -> serde_json::Value {
        let cfg = RunConfig {
            output: None,
            workers: None,
            ..self.clone()
        };
        serde_json::to_value(cfg).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::{
        sample_full_target, sample_state_target, sample_subspace_target, RngStream,
    };

    fn sample_waveform(seed: u64) -> ControlWaveform {
        use rand::Rng;
        let mut rng = RngStream::new(seed, 0);
        let v: Vec<f64> = (0..30).map(|_| rng.random::<f64>() * 20.0 - 10.0).collect();
        ControlWaveform::from_vector(4e-6, &v)
            .unwrap()
            .with_label("t")
    }

    #[test]
    fn waveform_round_trip_is_exact() {
        let w = sample_waveform(1);
        let p = PhysicalParams::default();
        let f = WaveformFile::new(
            &w,
            &p,
            &PerturbationEnsemble::four_point(3.0),
            DesignProvenance::default(),
        );
        let text = to_json(&f).unwrap();
        let back = WaveformFile::parse(&text).unwrap();
        assert_eq!(back, f);
        let w2 = back.waveform().unwrap();
        for (a, b) in w.wrapped().phases().iter().zip(w2.phases()) {
            assert_eq!(
                a.as_array().map(f64::to_bits),
                b.as_array().map(f64::to_bits)
            );
        }
        // a second write is byte-identical
        assert_eq!(to_json(&back).unwrap(), text);
    }

    #[test]
    fn truncated_waveform_is_schema_error() {
        let w = sample_waveform(2);
        let f = WaveformFile::new(
            &w,
            &PhysicalParams::default(),
            &PerturbationEnsemble::nominal(),
            Default::default(),
        );
        let text = to_json(&f).unwrap();
        let cut = &text[..text.len() / 2];
        assert!(matches!(
            WaveformFile::parse(cut),
            Err(ControlError::Schema { .. })
        ));
    }

    #[test]
    fn future_version_names_supported() {
        let w = sample_waveform(3);
        let f = WaveformFile::new(
            &w,
            &PhysicalParams::default(),
            &PerturbationEnsemble::nominal(),
            Default::default(),
        );
        let mut v = serde_json::to_value(&f).unwrap();
        v["format_version"] = serde_json::json!(FORMAT_VERSION + 1);
        let err = WaveformFile::parse(&v.to_string()).unwrap_err();
        match &err {
            ControlError::Version { found, supported } => {
                assert_eq!(*found, FORMAT_VERSION + 1);
                assert_eq!(supported, &vec![1]);
            }
            e => panic!("{e:?}"),
        }
        assert!(err.to_string().contains("supported: [1]"));
    }

    #[test]
    fn schema_errors_name_the_field() {
        let w = sample_waveform(4);
        let f = WaveformFile::new(
            &w,
            &PhysicalParams::default(),
            &PerturbationEnsemble::nominal(),
            Default::default(),
        );
        let mut v = serde_json::to_value(&f).unwrap();
        v.as_object_mut().unwrap().remove("dt");
        match WaveformFile::parse(&v.to_string()) {
            Err(ControlError::Schema { field, .. }) => assert_eq!(field, "dt"),
            other => panic!("{other:?}"),
        }
        let mut v = serde_json::to_value(&f).unwrap();
        v["phases"]["phi_y"][2] = serde_json::json!("x");
        match WaveformFile::parse(&v.to_string()) {
            Err(ControlError::Schema { field, .. }) => assert_eq!(field, "phases.phi_y[2]"),
            other => panic!("{other:?}"),
        }
        let mut v = serde_json::to_value(&f).unwrap();
        v["phases"]["phi_x"][0] = serde_json::json!(7.0);
        match WaveformFile::parse(&v.to_string()) {
            Err(ControlError::Schema { field, .. }) => assert_eq!(field, "phases.phi_x[0]"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn targets_round_trip() {
        let mut rng = RngStream::new(9, 0);
        let targets = [
            sample_full_target(16, &mut rng),
            sample_subspace_target(16, 2, SubspaceMode::BasisAligned, &mut rng).unwrap(),
            sample_subspace_target(16, 3, SubspaceMode::Haar, &mut rng).unwrap(),
            sample_state_target(crate::targets::basis_state(16, 0), &mut rng).unwrap(),
        ];
        for t in &targets {
            let f = TargetFile::new(t, ManifoldStructure::cesium(), TargetProvenance::default());
            let back = TargetFile::parse(&to_json(&f).unwrap()).unwrap();
            assert_eq!(&back.target_map().unwrap(), t);
            assert_eq!(target_hash(t), target_hash(&back.target_map().unwrap()));
        }
        assert_ne!(target_hash(&targets[0]), target_hash(&targets[1]));
    }

    #[test]
    fn non_unitary_target_rejected() {
        let text = r#"{"format_version":1,"manifold":{"nuclear_spin_doubled":7},
            "target":{"kind":"full_unitary","matrix":[[[2.0,0.0]]]}}"#;
        assert!(TargetFile::parse(text).is_err());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(RunConfig::parse("{}").is_ok());
        match RunConfig::parse(r#"{"design": {"total_tme": 1e-4}}"#) {
            Err(ControlError::Schema { field, .. }) => assert_eq!(field, "design.total_tme"),
            other => panic!("{other:?}"),
        }
        let cfg = RunConfig::parse(
            r#"{"seed": 3, "ensemble": {"preset": "four_point", "radius": 100.0},
                "design": {"total_time": 1e-4, "n_seeds": 2}}"#,
        )
        .unwrap();
        let d = cfg.design_config().unwrap();
        assert_eq!(d.rng_seed, 3);
        assert_eq!(d.n_seeds, 2);
        assert_eq!(d.ensemble, PerturbationEnsemble::four_point(100.0));
        assert_eq!(d.n_steps().unwrap(), 25);
    }

    #[test]
    fn config_round_trip() {
        let cfg = RunConfig::default();
        let back = RunConfig::parse(&to_json(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn benchmark_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.csv");
        let s = vec![
            SurvivalSample {
                length: 1,
                sequence_id: 0,
                survival: 0.1 + 0.2,
            },
            SurvivalSample {
                length: 4,
                sequence_id: 7,
                survival: 1.0 / 3.0,
            },
        ];
        write_benchmark_csv(&p, &s).unwrap();
        assert!(read_text(&p)
            .unwrap()
            .starts_with("l,sequence_id,survival\n"));
        assert_eq!(read_benchmark_csv(&p).unwrap(), s);
    }
}
