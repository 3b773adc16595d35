//! File formats: network, dynamics and safety-spec JSON, trajectory CSV and
//! the repair report.
//!
//! Row and group indices are 1-based in files and 0-based in memory.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bounds::{BoundAnalysis, BoundCertificate, BoundFn, Polytope, SafetySpec};
use crate::dynamics::{car_model, linear_model, BoxSet, DynamicsModel, ModelKind, Provenance, Trajectory};
use crate::error::{Error, Result};
use crate::repair::{HalfspaceAttempt, RepairResult, ValidationReport};
use crate::tll::{ActivationPattern, ScalarTll, TllNetwork};

fn matrix_from_rows(rows: &[Vec<f64>], ncols: usize, context: &'static str) -> Result<DMatrix<f64>> {
    if let Some(bad) = rows.iter().find(|r| r.len() != ncols) {
        return Err(Error::dim(context, ncols, bad.len()));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn ragged_width(rows: &[Vec<f64>]) -> usize {
    rows.first().map_or(0, Vec::len)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    #[serde(rename = "W")]
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub selectors: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkFile {
    pub n: usize,
    pub m: usize,
    #[serde(rename = "N")]
    pub n_linear: usize,
    #[serde(rename = "M")]
    pub n_groups: usize,
    pub outputs: Vec<OutputFile>,
}

impl NetworkFile {
    pub fn from_network(net: &TllNetwork) -> Self {
        Self {
            n: net.input_dim(),
            m: net.output_dim(),
            n_linear: net.n_linear(),
            n_groups: net.n_groups(),
            outputs: net
                .outputs()
                .iter()
                .map(|o| OutputFile {
                    w: matrix_rows(o.weights()),
                    b: o.bias().iter().copied().collect(),
                    selectors: o
                        .selectors()
                        .iter()
                        .map(|s| s.iter().map(|i| i + 1).collect())
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn to_network(&self) -> Result<TllNetwork> {
        if self.outputs.len() != self.m {
            return Err(Error::dim("network outputs", self.m, self.outputs.len()));
        }
        let mut outputs = Vec::with_capacity(self.m);
        for o in &self.outputs {
            if o.w.len() != self.n_linear {
                return Err(Error::dim("network W rows", self.n_linear, o.w.len()));
            }
            if o.selectors.len() != self.n_groups {
                return Err(Error::dim("network selector groups", self.n_groups, o.selectors.len()));
            }
            let w = matrix_from_rows(&o.w, self.n, "network W columns")?;
            let mut selectors = Vec::with_capacity(o.selectors.len());
            for s in &o.selectors {
                let zero_based = s
                    .iter()
                    .map(|&i| {
                        i.checked_sub(1)
                            .ok_or_else(|| Error::invalid("selector indices are 1-based"))
                    })
                    .collect::<Result<Vec<_>>>()?;
                selectors.push(zero_based);
            }
            outputs.push(ScalarTll::new(w, DVector::from_vec(o.b.clone()), selectors)?);
        }
        TllNetwork::new(outputs)
    }
}

pub fn network_to_json(net: &TllNetwork) -> Result<String> {
    Ok(serde_json::to_string_pretty(&NetworkFile::from_network(net))?)
}

pub fn network_from_json(text: &str) -> Result<TllNetwork> {
    serde_json::from_str::<NetworkFile>(text)?.to_network()
}

pub fn read_network(path: impl AsRef<Path>) -> Result<TllNetwork> {
    network_from_json(&fs::read_to_string(path)?)
}

pub fn write_network(path: impl AsRef<Path>, net: &TllNetwork) -> Result<()> {
    Ok(fs::write(path, network_to_json(net)?)?)
}

/// Dynamics configuration. Explicit `Lf`/`Lg` override the model's own
/// constants and are recorded as user supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum DynamicsConfig {
    Car {
        #[serde(rename = "V")]
        speed: f64,
        ts: f64,
        #[serde(rename = "Lf", default, skip_serializing_if = "Option::is_none")]
        l_f: Option<f64>,
        #[serde(rename = "Lg", default, skip_serializing_if = "Option::is_none")]
        l_g: Option<f64>,
    },
    Linear {
        #[serde(rename = "A")]
        a: Vec<Vec<f64>>,
        c: Vec<f64>,
        #[serde(rename = "G")]
        g: Vec<Vec<f64>>,
        #[serde(rename = "Lf", default, skip_serializing_if = "Option::is_none")]
        l_f: Option<f64>,
        #[serde(rename = "Lg", default, skip_serializing_if = "Option::is_none")]
        l_g: Option<f64>,
    },
}

impl DynamicsConfig {
    pub fn to_model(&self) -> Result<DynamicsModel> {
        let (model, l_f, l_g) = match self {
            DynamicsConfig::Car { speed, ts, l_f, l_g } => (car_model(*speed, *ts)?, *l_f, *l_g),
            DynamicsConfig::Linear { a, c, g, l_f, l_g } => {
                let n = a.len();
                let am = matrix_from_rows(a, n, "linear model A columns")?;
                let gm = matrix_from_rows(g, ragged_width(g), "linear model G columns")?;
                (linear_model(am, DVector::from_vec(c.clone()), gm)?, *l_f, *l_g)
            }
        };
        if l_f.is_none() && l_g.is_none() {
            return Ok(model);
        }
        let (lf, lg) = (l_f.unwrap_or(model.l_f()), l_g.unwrap_or(model.l_g()));
        model.with_lipschitz(lf, lg, Provenance::UserSupplied)
    }

    /// Configuration reproducing `model`, or `None` for custom dynamics.
    pub fn from_model(model: &DynamicsModel) -> Option<Self> {
        let user = model.provenance() == Provenance::UserSupplied;
        let (l_f, l_g) = if user {
            (Some(model.l_f()), Some(model.l_g()))
        } else {
            (None, None)
        };
        match model.kind() {
            ModelKind::Car { speed, ts } => Some(DynamicsConfig::Car {
                speed: *speed,
                ts: *ts,
                l_f,
                l_g,
            }),
            ModelKind::Linear { a, c, g } => Some(DynamicsConfig::Linear {
                a: matrix_rows(a),
                c: c.iter().copied().collect(),
                g: matrix_rows(g),
                l_f,
                l_g,
            }),
            ModelKind::Custom => None,
        }
    }
}

pub fn read_dynamics(path: impl AsRef<Path>) -> Result<DynamicsModel> {
    serde_json::from_str::<DynamicsConfig>(&fs::read_to_string(path)?)?.to_model()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolytopeFile {
    #[serde(rename = "G")]
    pub g: Vec<Vec<f64>>,
    pub h: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecFile {
    #[serde(rename = "X_ws")]
    pub workspace: BoxSet,
    #[serde(rename = "X_safe")]
    pub safe: BoxSet,
    #[serde(rename = "X_unsafe")]
    pub unsafe_set: PolytopeFile,
    #[serde(rename = "T")]
    pub horizon: usize,
}

impl SpecFile {
    pub fn from_spec(spec: &SafetySpec) -> Self {
        Self {
            workspace: spec.workspace.clone(),
            safe: spec.safe.clone(),
            unsafe_set: PolytopeFile {
                g: matrix_rows(spec.unsafe_set.g()),
                h: spec.unsafe_set.h().iter().copied().collect(),
            },
            horizon: spec.horizon,
        }
    }

    pub fn to_spec(&self) -> Result<SafetySpec> {
        let g = matrix_from_rows(&self.unsafe_set.g, self.workspace.dim(), "unsafe set G columns")?;
        let unsafe_set = Polytope::new(g, DVector::from_vec(self.unsafe_set.h.clone()))?;
        SafetySpec::new(self.workspace.clone(), self.safe.clone(), unsafe_set, self.horizon)
    }
}

pub fn read_spec(path: impl AsRef<Path>) -> Result<SafetySpec> {
    serde_json::from_str::<SpecFile>(&fs::read_to_string(path)?)?.to_spec()
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::invalid(format!("csv: {other:?}")),
    }
}

/// `step,x1..xn,u1..um`, one record per state; the final record has empty inputs.
pub fn write_trajectory_csv<W: std::io::Write>(out: W, traj: &Trajectory) -> Result<()> {
    let n = traj.states.first().map_or(0, |s| s.len());
    let m = traj.inputs.first().map_or(0, |u| u.len());
    let mut w = csv::Writer::from_writer(out);
    let header = std::iter::once("step".to_string())
        .chain((1..=n).map(|i| format!("x{i}")))
        .chain((1..=m).map(|i| format!("u{i}")));
    w.write_record(header).map_err(csv_error)?;
    for (k, x) in traj.states.iter().enumerate() {
        let inputs: Vec<String> = match traj.inputs.get(k) {
            Some(u) => u.iter().map(f64::to_string).collect(),
            None => vec![String::new(); m],
        };
        let record = std::iter::once(k.to_string())
            .chain(x.iter().map(f64::to_string))
            .chain(inputs);
        w.write_record(record).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_trajectory_csv(path: impl AsRef<Path>, traj: &Trajectory) -> Result<()> {
    write_trajectory_csv(fs::File::create(path)?, traj)
}

/// Parses a trajectory written by [`write_trajectory_csv`].
pub fn read_trajectory_csv<R: std::io::Read>(input: R) -> Result<Trajectory> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(csv_error)?.clone();
    let n = header.iter().filter(|h| h.starts_with('x')).count();
    let m = header.iter().filter(|h| h.starts_with('u')).count();
    let parse = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| Error::invalid(format!("bad number {s:?} in trajectory csv")))
    };
    let mut traj = Trajectory {
        states: Vec::new(),
        inputs: Vec::new(),
    };
    for rec in r.records() {
        let rec = rec.map_err(csv_error)?;
        if rec.len() != 1 + n + m {
            return Err(Error::dim("trajectory csv record", 1 + n + m, rec.len()));
        }
        let x = (1..=n).map(|i| parse(&rec[i])).collect::<Result<Vec<_>>>()?;
        traj.states.push(DVector::from_vec(x));
        if m > 0 && !rec[n + 1].is_empty() {
            let u = (n + 1..=n + m).map(|i| parse(&rec[i])).collect::<Result<Vec<_>>>()?;
            traj.inputs.push(DVector::from_vec(u));
        }
    }
    if !traj.states.is_empty() && traj.inputs.len() + 1 != traj.states.len() {
        return Err(Error::invalid(
            "trajectory csv must have inputs on every row but the last",
        ));
    }
    Ok(traj)
}

/// Activation pattern with 1-based indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternFile {
    pub act: Vec<usize>,
    pub sel: Vec<usize>,
}

impl From<&ActivationPattern> for PatternFile {
    fn from(p: &ActivationPattern) -> Self {
        Self {
            act: p.act.iter().map(|i| i + 1).collect(),
            sel: p.sel.iter().map(|i| i + 1).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificateReport {
    #[serde(flatten)]
    pub certificate: BoundCertificate,
    pub beta_fn: BoundFn,
    pub l_fn: BoundFn,
    pub omega_w: f64,
    pub omega_b: f64,
    pub l_f: f64,
    pub l_g: f64,
    pub lipschitz_provenance: Provenance,
}

impl CertificateReport {
    pub fn from_analysis(b: &BoundAnalysis) -> Self {
        Self {
            certificate: b.certificate,
            beta_fn: b.beta_fn,
            l_fn: b.l_fn,
            omega_w: b.omega.omega_w,
            omega_b: b.omega.omega_b,
            l_f: b.l_f,
            l_g: b.l_g,
            lipschitz_provenance: b.lipschitz_provenance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepairReport {
    pub status: crate::repair::RepairStatus,
    pub stage: Option<&'static str>,
    pub message: Option<String>,
    pub pattern: PatternFile,
    /// 1-based row of the unsafe polytope whose complement was used.
    pub halfspace: Option<usize>,
    pub local_objective: Option<f64>,
    pub local_rounds: Option<usize>,
    pub local_attempts: Vec<HalfspaceAttempt>,
    pub global_objective: Option<f64>,
    pub certificate: CertificateReport,
    pub validation: Option<ValidationReport>,
    pub network: Option<String>,
    pub trajectory_before: Option<String>,
    pub trajectory_after: Option<String>,
}

impl RepairReport {
    pub fn new(result: &RepairResult) -> Self {
        let mut attempts = result.local_attempts.clone();
        for a in &mut attempts {
            a.halfspace += 1;
        }
        Self {
            status: result.status,
            stage: result.status.stage(),
            message: result.message.clone(),
            pattern: PatternFile::from(&result.pattern),
            halfspace: result.local.as_ref().map(|l| l.halfspace + 1),
            local_objective: result.local.as_ref().map(|l| l.objective),
            local_rounds: result.local.as_ref().map(|l| l.rounds),
            local_attempts: attempts,
            global_objective: result.global_objective,
            certificate: CertificateReport::from_analysis(&result.bounds),
            validation: None,
            network: None,
            trajectory_before: None,
            trajectory_after: None,
        }
    }
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    Ok(fs::write(path, serde_json::to_string_pretty(value)? + "\n")?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demo;

    #[test]
    fn network_round_trip_is_exact() {
        let net = demo::car_network().unwrap();
        let text = network_to_json(&net).unwrap();
        assert_eq!(network_from_json(&text).unwrap(), net);
        let file: NetworkFile = serde_json::from_str(&text).unwrap();
        assert_eq!((file.n, file.m, file.n_linear, file.n_groups), (3, 1, 50, 10));
        assert_eq!(file.outputs[0].selectors[0], vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn awkward_floats_survive() {
        let w = DMatrix::from_row_slice(2, 1, &[0.1 + 0.2, 1.0 / 3.0]);
        let b = DVector::from_vec(vec![-5e-324, 1.7976931348623157e308]);
        let net = TllNetwork::new(vec![ScalarTll::new(w, b, vec![vec![0, 1]]).unwrap()]).unwrap();
        assert_eq!(network_from_json(&network_to_json(&net).unwrap()).unwrap(), net);
    }

    #[test]
    fn zero_selector_index_is_rejected() {
        let text = r#"{"n":1,"m":1,"N":1,"M":1,"outputs":[{"W":[[1.0]],"b":[0.0],"selectors":[[0]]}]}"#;
        assert!(matches!(network_from_json(text), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn declared_sizes_are_checked() {
        let text = r#"{"n":2,"m":1,"N":1,"M":1,"outputs":[{"W":[[1.0]],"b":[0.0],"selectors":[[1]]}]}"#;
        assert!(matches!(network_from_json(text), Err(Error::Dimension { .. })));
        let text = r#"{"n":1,"m":2,"N":1,"M":1,"outputs":[{"W":[[1.0]],"b":[0.0],"selectors":[[1]]}]}"#;
        assert!(network_from_json(text).is_err());
    }

    #[test]
    fn car_config() {
        let cfg: DynamicsConfig = serde_json::from_str(r#"{"model":"car","V":0.3,"ts":0.01}"#).unwrap();
        let model = cfg.to_model().unwrap();
        assert_eq!(model.provenance(), Provenance::Analytic);
        assert!((model.l_f() - 1.003).abs() < 1e-15);
        assert_eq!(DynamicsConfig::from_model(&model), Some(cfg));

        let cfg: DynamicsConfig = serde_json::from_str(r#"{"model":"car","V":0.3,"ts":0.01,"Lf":1.5}"#).unwrap();
        let model = cfg.to_model().unwrap();
        assert_eq!(model.provenance(), Provenance::UserSupplied);
        assert_eq!((model.l_f(), model.l_g()), (1.5, 0.0));
    }

    #[test]
    fn linear_config() {
        let text = r#"{"model":"linear","A":[[1.0,0.1],[0.0,1.0]],"c":[0.0,0.0],"G":[[0.0],[0.1]]}"#;
        let model: DynamicsModel = serde_json::from_str::<DynamicsConfig>(text)
            .unwrap()
            .to_model()
            .unwrap();
        assert_eq!((model.state_dim(), model.input_dim()), (2, 1));
        let x = model.step(&[1.0, 2.0], &[3.0]).unwrap();
        assert!((x[0] - 1.2).abs() < 1e-15 && (x[1] - 2.3).abs() < 1e-15);
        let bad = r#"{"model":"linear","A":[[1.0,0.1]],"c":[0.0],"G":[[0.0]]}"#;
        assert!(serde_json::from_str::<DynamicsConfig>(bad).unwrap().to_model().is_err());
        assert!(serde_json::from_str::<DynamicsConfig>(r#"{"model":"boat"}"#).is_err());
    }

    #[test]
    fn spec_round_trip() {
        let spec = demo::car_spec().unwrap();
        let file = SpecFile::from_spec(&spec);
        let text = serde_json::to_string(&file).unwrap();
        assert!(text.contains("\"X_ws\"") && text.contains("\"X_unsafe\"") && text.contains("\"T\":7"));
        let back: SpecFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_spec().unwrap(), spec);
    }

    #[test]
    fn trajectory_csv_layout() {
        let traj = Trajectory {
            states: vec![DVector::from_vec(vec![0.0, 1.5]), DVector::from_vec(vec![0.25, -1.0])],
            inputs: vec![DVector::from_vec(vec![2.0])],
        };
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &traj).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "step,x1,x2,u1\n0,0,1.5,2\n1,0.25,-1,\n");
        assert_eq!(read_trajectory_csv(text.as_bytes()).unwrap(), traj);
    }

    #[test]
    fn pattern_is_one_based() {
        let p = PatternFile::from(&ActivationPattern {
            act: vec![0, 7],
            sel: vec![2, 0],
        });
        assert_eq!((p.act, p.sel), (vec![1, 8], vec![3, 1]));
    }
}
