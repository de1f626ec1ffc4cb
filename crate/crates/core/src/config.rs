//! Run configuration: a TOML file whose every key can be overridden from the
//! command line.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::{care, CareOptions};
use crate::deviation::DeviationOptions;
use crate::dynamics::{paper_example_system, ControlAffineSystem, FnSystem, OcpWeights};
use crate::edmd::{Excitation, FitOptions, Provenance};
use crate::error::{Error, Result};
use crate::lifting::Region;
use crate::linalg;

pub const TOOL: &str = concat!("koopdev ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Builtin plant: `example` or `linear`.
    pub plant: String,
    pub degree: u32,
    pub n_traj: usize,
    pub t_len: f64,
    /// Sampling step of the training data.
    pub data_step: f64,
    pub u_max: f64,
    /// Hold time of the piecewise-constant excitation.
    pub hold: f64,
    pub seed: u64,
    /// Row-major `Q̄`.
    pub qbar: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub region_lower: Vec<f64>,
    pub region_upper: Vec<f64>,
    pub resolution: usize,
    pub lipschitz_resolution: usize,
    pub horizon: f64,
    pub step: f64,
    pub settle_norm: f64,
    pub adversarial_samples: usize,
    /// Step used for the adversarial runs on the lifted model.
    pub adversarial_step: f64,
    pub out: PathBuf,
    pub beta: f64,
    pub care_regularization: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            plant: "example".into(),
            degree: 4,
            n_traj: 40,
            t_len: 1.0,
            data_step: 0.01,
            u_max: 2.0,
            hold: 0.1,
            seed: 42,
            qbar: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            r: vec![vec![1.0]],
            region_lower: vec![-1.0, -1.0],
            region_upper: vec![1.0, 1.0],
            resolution: 21,
            lipschitz_resolution: 201,
            horizon: 20.0,
            step: 1e-3,
            settle_norm: 1e-2,
            adversarial_samples: 200,
            adversarial_step: 1e-2,
            out: PathBuf::from("out"),
            beta: 1.0,
            care_regularization: 0.0,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.plant.as_str(), "example" | "linear") {
            return Err(Error::InvalidArgument(format!("unknown plant '{}'", self.plant)));
        }
        if !(1..=8).contains(&self.degree) {
            return Err(Error::InvalidArgument("degree must be in 1..=8".into()));
        }
        if self.n_traj < 1 {
            return Err(Error::InvalidArgument("n_traj must be at least 1".into()));
        }
        for (name, v) in [
            ("t_len", self.t_len),
            ("data_step", self.data_step),
            ("hold", self.hold),
            ("horizon", self.horizon),
            ("step", self.step),
            ("settle_norm", self.settle_norm),
            ("adversarial_step", self.adversarial_step),
            ("beta", self.beta),
        ] {
            positive(name, v)?;
        }
        if self.t_len < self.data_step * (1.0 - 1e-12) {
            return Err(Error::InvalidArgument("t_len must be at least data_step".into()));
        }
        if self.step > self.horizon || self.adversarial_step > self.horizon {
            return Err(Error::InvalidArgument("integration step exceeds the horizon".into()));
        }
        if !(self.u_max >= 0.0 && self.u_max.is_finite()) {
            return Err(Error::InvalidArgument("u_max must be nonnegative".into()));
        }
        if !(self.care_regularization >= 0.0 && self.care_regularization.is_finite()) {
            return Err(Error::InvalidArgument("care_regularization must be nonnegative".into()));
        }
        if self.resolution < 2 || self.lipschitz_resolution < 2 {
            return Err(Error::InvalidArgument("grid resolutions must be at least 2".into()));
        }
        if self.adversarial_samples < 1 {
            return Err(Error::InvalidArgument("adversarial_samples must be at least 1".into()));
        }
        self.region()?;
        self.weights()?;
        let system = self.system()?;
        if self.region_lower.len() != system.state_dim() {
            return Err(Error::dims(system.state_dim(), self.region_lower.len(), "region vs plant"));
        }
        Ok(())
    }

    /// SHA-256 of the configuration with the output directory left out, so
    /// moving the outputs does not change their content.
    pub fn digest(&self) -> String {
        let mut canon = self.clone();
        canon.out = PathBuf::new();
        let text = canon.to_toml().unwrap_or_default();
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// One-line provenance stamp for output files.
    pub fn provenance_line(&self) -> String {
        format!("{TOOL} config={} seed={}", self.digest(), self.seed)
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            tool: TOOL.into(),
            seed: Some(self.seed),
            config_digest: Some(self.digest()),
        }
    }

    pub fn region(&self) -> Result<Region> {
        Region::new(self.region_lower.clone(), self.region_upper.clone())
    }

    pub fn weights(&self) -> Result<OcpWeights> {
        let q = matrix("qbar", &self.qbar)?;
        let r = matrix("r", &self.r)?;
        OcpWeights::new(q, r)
    }

    pub fn excitation(&self) -> Excitation {
        Excitation {
            u_max: self.u_max,
            hold: self.hold,
        }
    }

    pub fn fit_options(&self) -> Result<FitOptions> {
        Ok(FitOptions {
            beta: self.beta,
            lipschitz_region: self.region()?,
            lipschitz_resolution: self.lipschitz_resolution,
            provenance: self.provenance(),
        })
    }

    pub fn care(&self) -> CareOptions {
        CareOptions {
            regularization: self.care_regularization,
            ..CareOptions::default()
        }
    }

    pub fn deviation_options(&self) -> DeviationOptions {
        DeviationOptions {
            horizon: self.horizon,
            step: self.step,
            settle_norm: self.settle_norm,
            care: self.care(),
        }
    }

    pub fn adversarial_options(&self) -> DeviationOptions {
        DeviationOptions {
            step: self.adversarial_step,
            ..self.deviation_options()
        }
    }

    /// The selected builtin plant. Its known optimum is attached only when it
    /// is valid for the configured weights.
    pub fn system(&self) -> Result<Box<dyn ControlAffineSystem>> {
        let w = self.weights()?;
        match self.plant.as_str() {
            "example" => {
                let identity = w.qbar == DMatrix::identity(2, 2) && w.r == DMatrix::identity(1, 1);
                if identity {
                    Ok(Box::new(paper_example_system()))
                } else {
                    let p = paper_example_system();
                    Ok(Box::new(FnSystem::new(
                        2,
                        1,
                        move |x| p.drift(x),
                        move |x| p.input_fields(x),
                    )))
                }
            }
            "linear" => linear_plant(&w).map(|s| Box::new(s) as Box<dyn ControlAffineSystem>),
            other => Err(Error::InvalidArgument(format!("unknown plant '{other}'"))),
        }
    }
}

fn matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidArgument(format!("{name} must be a nonempty square matrix")));
    }
    linalg::from_rows(rows, n)
}

/// `ẋ1 = x2`, `ẋ2 = −x1 − x2 + u`, with its LQR optimum. Every monomial
/// dictionary lifts it to an exactly bilinear model.
pub fn linear_plant(weights: &OcpWeights) -> Result<FnSystem> {
    if weights.state_dim() != 2 || weights.input_dim() != 1 {
        return Err(Error::dims(2, weights.state_dim(), "linear plant weights"));
    }
    let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -1.0]);
    let b = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
    let p = care::solve_care(&a, &b, &weights.qbar, &weights.r)?.p;
    let k = weights.r.clone().try_inverse().ok_or_else(|| Error::Singular("R".into()))? * b.transpose() * &p;
    let (p1, p2) = (p.clone(), p);
    Ok(FnSystem::linear(a, b).with_optimum(
        move |x| 0.5 * linalg::quad_form(&p1, x),
        move |x| &p2 * x,
        move |x| -(&k * x),
    ))
}
