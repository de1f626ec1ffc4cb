//! Polynomial dictionaries and the lifting `x ↦ Ψ(x)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::linalg;

/// Exponent vector of a monomial, one entry per state component.
pub type MultiIndex = Vec<u32>;

/// Monomial dictionary of all terms with total degree `1..=max_degree`.
///
/// Terms are kept in graded lexicographic order: ascending total degree,
/// and within one degree the exponent of `x1` descending, then `x2`, and so
/// on. For `n = 2, d = 2` this gives `x1, x2, x1², x1x2, x2²`.
///
/// There is no constant term, so `Ψ(0) = 0`, and every first-order term is
/// present, so the state can be read back with a selector matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DictionaryBasis {
    state_dim: usize,
    max_degree: u32,
    terms: Vec<MultiIndex>,
}

#[derive(Deserialize)]
struct BasisRecord {
    state_dim: usize,
    max_degree: u32,
    terms: Vec<MultiIndex>,
}

impl<'de> Deserialize<'de> for DictionaryBasis {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = BasisRecord::deserialize(d)?;
        let basis = build_monomial_basis(rec.state_dim, rec.max_degree)
            .map_err(serde::de::Error::custom)?;
        if basis.terms != rec.terms {
            return Err(serde::de::Error::custom(
                "stored term list does not match the canonical graded-lex order",
            ));
        }
        Ok(basis)
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Region {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::dims(lower.len(), upper.len(), "region bounds"));
        }
        if lower.is_empty() {
            return Err(Error::InvalidArgument("region has no dimensions".into()));
        }
        for (lo, hi) in lower.iter().zip(&upper) {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(Error::InvalidArgument(format!(
                    "empty or non-finite region interval [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// `[-r, r]^n`
    pub fn symmetric(dim: usize, radius: f64) -> Result<Self> {
        Self::new(vec![-radius; dim], vec![radius; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Uniform tensor grid with `resolution` points per axis, row-major
    /// (the last coordinate varies fastest).
    pub fn grid(&self, resolution: usize) -> Result<Vec<Vec<f64>>> {
        if resolution < 2 {
            return Err(Error::InvalidArgument(
                "grid resolution must be at least 2".into(),
            ));
        }
        let n = self.dim();
        let axes: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let (lo, hi) = (self.lower[i], self.upper[i]);
                (0..resolution)
                    .map(|k| {
                        if k == resolution - 1 {
                            hi
                        } else {
                            lo + (hi - lo) * k as f64 / (resolution - 1) as f64
                        }
                    })
                    .collect()
            })
            .collect();
        let total = resolution.pow(n as u32);
        let mut points = Vec::with_capacity(total);
        for flat in 0..total {
            let mut rem = flat;
            let mut p = vec![0.0; n];
            for i in (0..n).rev() {
                p[i] = axes[i][rem % resolution];
                rem /= resolution;
            }
            points.push(p);
        }
        Ok(points)
    }
}

/// Lipschitz constant of `Ψ` over a region, from a grid maximization of the
/// Jacobian spectral norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub value: f64,
    pub region: Region,
    pub grid_resolution: usize,
}

/// Builds the degree-`1..=max_degree` monomial dictionary in `state_dim`
/// variables.
pub fn build_monomial_basis(state_dim: usize, max_degree: u32) -> Result<DictionaryBasis> {
    if state_dim < 1 {
        return Err(Error::InvalidArgument("state_dim must be at least 1".into()));
    }
    if max_degree < 1 {
        return Err(Error::InvalidArgument("max_degree must be at least 1".into()));
    }
    let mut terms = Vec::new();
    for degree in 1..=max_degree {
        let mut current = vec![0u32; state_dim];
        push_compositions(degree, 0, &mut current, &mut terms);
    }
    Ok(DictionaryBasis {
        state_dim,
        max_degree,
        terms,
    })
}

/// Appends all exponent vectors with the given remaining degree, leading
/// exponents descending.
fn push_compositions(remaining: u32, pos: usize, current: &mut MultiIndex, out: &mut Vec<MultiIndex>) {
    let n = current.len();
    if pos == n - 1 {
        current[pos] = remaining;
        out.push(current.clone());
        current[pos] = 0;
        return;
    }
    for e in (0..=remaining).rev() {
        current[pos] = e;
        push_compositions(remaining - e, pos + 1, current, out);
    }
    current[pos] = 0;
}

impl DictionaryBasis {
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn max_degree(&self) -> u32 {
        self.max_degree
    }

    pub fn terms(&self) -> &[MultiIndex] {
        &self.terms
    }

    /// Lifted dimension `N`.
    pub fn lifted_dim(&self) -> usize {
        self.terms.len()
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.state_dim {
            return Err(Error::dims(self.state_dim, x.len(), "state vector"));
        }
        Ok(())
    }

    /// Per-variable power tables `x_i^0 ..= x_i^d`.
    fn powers(&self, x: &[f64]) -> Vec<Vec<f64>> {
        x.iter()
            .map(|&xi| {
                let mut row = Vec::with_capacity(self.max_degree as usize + 1);
                let mut acc = 1.0;
                for _ in 0..=self.max_degree {
                    row.push(acc);
                    acc *= xi;
                }
                row
            })
            .collect()
    }

    /// `Ψ(x)`
    pub fn lift(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.check(x)?;
        let pw = self.powers(x);
        Ok(DVector::from_iterator(
            self.terms.len(),
            self.terms.iter().map(|alpha| {
                alpha
                    .iter()
                    .enumerate()
                    .map(|(i, &e)| pw[i][e as usize])
                    .product::<f64>()
            }),
        ))
    }

    /// `∂Ψ/∂x`, an `N × n` matrix.
    pub fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check(x)?;
        let pw = self.powers(x);
        let n = self.state_dim;
        let mut jac = DMatrix::zeros(self.terms.len(), n);
        for (k, alpha) in self.terms.iter().enumerate() {
            for i in 0..n {
                if alpha[i] == 0 {
                    continue;
                }
                let mut v = alpha[i] as f64 * pw[i][alpha[i] as usize - 1];
                for (j, &e) in alpha.iter().enumerate() {
                    if j != i {
                        v *= pw[j][e as usize];
                    }
                }
                jac[(k, i)] = v;
            }
        }
        Ok(jac)
    }

    /// Selector `C` with `C Ψ(x) = x`.
    pub fn projection_matrix(&self) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(self.state_dim, self.terms.len());
        for (k, alpha) in self.terms.iter().enumerate() {
            if alpha.iter().sum::<u32>() == 1 {
                let i = alpha.iter().position(|&e| e == 1).expect("degree-one term");
                c[(i, k)] = 1.0;
            }
        }
        c
    }

    /// Grid maximization of `‖∂Ψ/∂x‖₂` over `region`.
    pub fn lipschitz_constant(&self, region: &Region, grid_resolution: usize) -> Result<LipschitzEstimate> {
        if region.dim() != self.state_dim {
            return Err(Error::dims(self.state_dim, region.dim(), "Lipschitz region"));
        }
        let points = region.grid(grid_resolution)?;
        let norms = exec::map_collect(&points, |p| {
            self.jacobian(p).map(|j| linalg::spectral_norm(&j))
        });
        let mut value = 0.0f64;
        for n in norms {
            value = value.max(n?);
        }
        Ok(LipschitzEstimate {
            value,
            region: region.clone(),
            grid_resolution,
        })
    }
}
