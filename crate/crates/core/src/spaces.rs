//! Discrete Gelfand triple `V ⊂ H ⊂ V'` on one coefficient space.
//!
//! Elements of `V` and `H` are stored as primal coefficient vectors `u`
//! (`u = Σ u_i φ_i`); functionals are stored in action coordinates
//! `F_i = <f, φ_i>`. Every norm of the scale `V ⊂ V_γ ⊂ H ⊂ V'_γ ⊂ V'`
//! is a quadratic form in one of the two representations.
//!
//! All weighted quantities are computed in the generalized eigenbasis `Z`
//! of the pencil `(gram_V, gram_H)`: `Z^T H Z = I`, `Z^T V Z = Λ`. In that
//! basis the interpolation Gram `H #_γ V` is `Z^{-T} Λ^γ Z^{-1}`.

use std::path::Path;

use nalgebra::{Cholesky, ComplexField, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Pencil};

pub const HERMITIAN_TOL: f64 = 1e-12;
pub const PD_CUTOFF: f64 = 1e-12;
pub const NORM_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoordinateKind {
    Primal,
    Action,
}

/// A space of the scale. `VGamma`/`VGammaDual` carry their interpolation exponent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Space {
    H,
    V,
    VGamma(f64),
    VDual,
    VGammaDual(f64),
}

impl Space {
    pub fn kind(self) -> CoordinateKind {
        match self {
            Space::H | Space::V | Space::VGamma(_) => CoordinateKind::Primal,
            Space::VDual | Space::VGammaDual(_) => CoordinateKind::Action,
        }
    }

    fn exponent(self) -> f64 {
        match self {
            Space::H => 0.0,
            Space::V | Space::VDual => 1.0,
            Space::VGamma(g) | Space::VGammaDual(g) => g,
        }
    }

    pub fn label(self) -> String {
        match self {
            Space::H => "H".into(),
            Space::V => "V".into(),
            Space::VDual => "V'".into(),
            Space::VGamma(g) => format!("V_{g}"),
            Space::VGammaDual(g) => format!("V'_{g}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct InterpolationScale {
    pub gamma: f64,
    pub gram_gamma: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct GelfandTriple {
    dim: usize,
    gram_h: DMatrix<f64>,
    gram_v: DMatrix<f64>,
    c_h: f64,
    chol_h: Cholesky<f64, Dyn>,
    chol_v: Cholesky<f64, Dyn>,
    /// `Z`, H-orthonormal generalized eigenvectors of `(gram_V, gram_H)`.
    basis: DMatrix<f64>,
    /// `gram_H Z = Z^{-T}`.
    h_basis: DMatrix<f64>,
    /// Ascending eigenvalues of `gram_V` relative to `gram_H`.
    lambda: DVector<f64>,
}

fn check_hpd(m: &DMatrix<f64>, name: &'static str) -> Result<()> {
    let asym = linalg::asymmetry(m);
    if asym > HERMITIAN_TOL {
        return Err(Error::NonHermitian {
            name,
            asymmetry: asym,
        });
    }
    let (values, _) = linalg::sym_eigen(m);
    let max = values[values.len() - 1];
    if values[0] <= PD_CUTOFF * max.abs().max(f64::MIN_POSITIVE) || max <= 0.0 {
        return Err(Error::NotPositiveDefinite {
            name,
            eigenvalue: values[0],
        });
    }
    Ok(())
}

impl GelfandTriple {
    pub fn new(gram_h: DMatrix<f64>, gram_v: DMatrix<f64>) -> Result<Self> {
        if !gram_h.is_square() {
            return Err(Error::DimensionMismatch {
                expected: gram_h.nrows(),
                found: gram_h.ncols(),
            });
        }
        if gram_v.shape() != gram_h.shape() {
            return Err(Error::DimensionMismatch {
                expected: gram_h.nrows(),
                found: gram_v.nrows(),
            });
        }
        check_hpd(&gram_h, "gram_H")?;
        check_hpd(&gram_v, "gram_V")?;
        let gram_h = linalg::sym_part(&gram_h);
        let gram_v = linalg::sym_part(&gram_v);
        let chol_h = linalg::cholesky(&gram_h, "gram_H")?;
        let chol_v = linalg::cholesky(&gram_v, "gram_V")?;
        let pencil = Pencil::new(&gram_v, &chol_h);
        let h_basis = &gram_h * &pencil.vectors;
        let c_h = 1.0 / pencil.values[0].sqrt();
        Ok(GelfandTriple {
            dim: gram_h.nrows(),
            gram_h,
            gram_v,
            c_h,
            chol_h,
            chol_v,
            basis: pencil.vectors,
            h_basis,
            lambda: pencil.values,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn gram_h(&self) -> &DMatrix<f64> {
        &self.gram_h
    }

    pub fn gram_v(&self) -> &DMatrix<f64> {
        &self.gram_v
    }

    /// Embedding constant: `||u||_H <= c_H ||u||_V`.
    pub fn c_h(&self) -> f64 {
        self.c_h
    }

    pub fn chol_h(&self) -> &Cholesky<f64, Dyn> {
        &self.chol_h
    }

    pub fn chol_v(&self) -> &Cholesky<f64, Dyn> {
        &self.chol_v
    }

    /// Generalized eigenvalues of `gram_V` relative to `gram_H`, ascending.
    pub fn pencil_values(&self) -> &DVector<f64> {
        &self.lambda
    }

    pub fn pencil_basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn interpolation_scale(&self, gamma: f64) -> Result<InterpolationScale> {
        if !(0.0..=1.0).contains(&gamma) || gamma.is_nan() {
            return Err(Error::GammaOutOfRange(gamma));
        }
        let gram_gamma = if gamma == 0.0 {
            self.gram_h.clone()
        } else if gamma == 1.0 {
            self.gram_v.clone()
        } else {
            let scaled = scale_columns(&self.h_basis, &self.lambda, |l| l.powf(gamma));
            linalg::sym_part(&(scaled * self.h_basis.transpose()))
        };
        Ok(InterpolationScale { gamma, gram_gamma })
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: len,
            });
        }
        Ok(())
    }

    /// Norm of `u` in `space`; `kind` must match the space's coordinate kind.
    pub fn norm(&self, u: &DVector<f64>, kind: CoordinateKind, space: Space) -> Result<f64> {
        self.check_len(u.len())?;
        if kind != space.kind() {
            return Err(Error::KindMismatch(format!(
                "{kind:?} vector measured in {}",
                space.label()
            )));
        }
        let g = space.exponent();
        check_gamma(g)?;
        Ok(match space {
            Space::H => quad(&self.gram_h, u),
            Space::V => quad(&self.gram_v, u),
            Space::VGamma(_) => {
                let c = self.h_basis.tr_mul(u);
                weighted_len(&c, &self.lambda, 0.5 * g)
            }
            Space::VDual | Space::VGammaDual(_) => {
                let c = self.basis.tr_mul(u);
                weighted_len(&c, &self.lambda, -0.5 * g)
            }
        })
    }

    /// `W` with `||x||_space = |W x|`.
    pub fn weight(&self, space: Space) -> DMatrix<f64> {
        let g = space.exponent();
        match space.kind() {
            CoordinateKind::Primal => {
                scale_columns(&self.h_basis, &self.lambda, |l| l.powf(0.5 * g)).transpose()
            }
            CoordinateKind::Action => scale_columns(&self.basis, &self.lambda, |l| l.powf(-0.5 * g)).transpose(),
        }
    }

    /// `W^{-1}` for [`GelfandTriple::weight`].
    pub fn weight_inv(&self, space: Space) -> DMatrix<f64> {
        let g = space.exponent();
        match space.kind() {
            CoordinateKind::Primal => scale_columns(&self.basis, &self.lambda, |l| l.powf(-0.5 * g)),
            CoordinateKind::Action => scale_columns(&self.h_basis, &self.lambda, |l| l.powf(0.5 * g)),
        }
    }

    /// `W_to K W_from^{-1}`; its singular values are those of `K: from -> to`.
    pub fn weighted<T>(&self, k: &DMatrix<T>, from: Space, to: Space) -> Result<DMatrix<T>>
    where
        T: ComplexField<RealField = f64>,
    {
        if k.nrows() != self.dim || k.ncols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: k.nrows().max(k.ncols()),
            });
        }
        check_gamma(from.exponent())?;
        check_gamma(to.exponent())?;
        let w_to: DMatrix<T> = linalg::lift(&self.weight(to));
        let w_from_inv: DMatrix<T> = linalg::lift(&self.weight_inv(from));
        Ok(w_to * k * w_from_inv)
    }

    /// `||K||_{L(from, to)}`.
    pub fn operator_norm<T>(&self, k: &DMatrix<T>, from: Space, to: Space) -> Result<f64>
    where
        T: ComplexField<RealField = f64>,
    {
        Ok(linalg::sigma_max(&self.weighted(k, from, to)?))
    }

    /// Singular values of `K: from -> to`, decreasing.
    pub fn singular_values<T>(&self, k: &DMatrix<T>, from: Space, to: Space) -> Result<Vec<f64>>
    where
        T: ComplexField<RealField = f64>,
    {
        Ok(linalg::singular_values(&self.weighted(k, from, to)?))
    }

    /// Singular values of the identity `V -> H`, decreasing.
    pub fn embedding_singular_values(&self) -> Vec<f64> {
        self.lambda.iter().map(|l| 1.0 / l.sqrt()).collect()
    }

    pub fn to_action(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        &self.gram_h * u
    }

    /// `gram_H^{-1} F`: the Riesz representative in H of an H-functional.
    pub fn to_primal(&self, f: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol_h.solve(f)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = GramFile {
            dim: self.dim,
            gram_h: linalg::to_row_major(&self.gram_h)
                .into_iter()
                .map(Entry::Real)
                .collect(),
            gram_v: linalg::to_row_major(&self.gram_v)
                .into_iter()
                .map(Entry::Real)
                .collect(),
        };
        crate::report::write_atomic(path, serde_json::to_string_pretty(&file)?.as_bytes())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: GramFile = serde_json::from_str(text)?;
        let h = real_entries(&file.gram_h, "gram_H")?;
        let v = real_entries(&file.gram_v, "gram_V")?;
        GelfandTriple::new(
            linalg::from_row_major(file.dim, file.dim, &h)?,
            linalg::from_row_major(file.dim, file.dim, &v)?,
        )
    }
}

fn check_gamma(g: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&g) || g.is_nan() {
        return Err(Error::GammaOutOfRange(g));
    }
    Ok(())
}

fn quad(g: &DMatrix<f64>, u: &DVector<f64>) -> f64 {
    u.dot(&(g * u)).max(0.0).sqrt()
}

fn weighted_len(c: &DVector<f64>, lambda: &DVector<f64>, power: f64) -> f64 {
    c.iter()
        .zip(lambda.iter())
        .map(|(ci, li)| ci * ci * li.powf(2.0 * power))
        .sum::<f64>()
        .sqrt()
}

fn scale_columns(m: &DMatrix<f64>, lambda: &DVector<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let mut out = m.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col *= f(lambda[j]);
    }
    out
}

/// JSON container for a pair of Grams; complex entries are `[re, im]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GramFile {
    pub dim: usize,
    #[serde(rename = "gram_H")]
    pub gram_h: Vec<Entry>,
    #[serde(rename = "gram_V")]
    pub gram_v: Vec<Entry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Entry {
    Real(f64),
    Complex([f64; 2]),
}

pub fn real_entries(entries: &[Entry], name: &str) -> Result<Vec<f64>> {
    entries
        .iter()
        .map(|e| match *e {
            Entry::Real(x) => Ok(x),
            Entry::Complex([re, im]) if im == 0.0 => Ok(re),
            Entry::Complex([_, im]) => Err(Error::Invalid(format!(
                "{name}: complex entry with imaginary part {im}; only real forms are supported"
            ))),
        })
        .collect()
}

/// Deterministic Gaussian probe vectors.
pub fn random_probes(dim: usize, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| DVector::from_iterator(dim, (0..dim).map(|_| rng.random_range(-1.0..1.0))))
        .collect()
}
