//! Linear projection/interpolation pair from the method of snapshots, and the
//! quadratic Galerkin reduced-order model it induces for Lorenz '96.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};
use serde::{Deserialize, Serialize};

use crate::dynamics::Lorenz96;
use crate::error::{invalid, Error, Result};
use crate::storage::{read_json, read_matrix_csv, sidecar_path, write_json, write_matrix_csv};

/// Projection `theta` (r x n) and interpolation `phi` (n x r) with `theta = phi^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCoupling {
    pub theta: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    /// Every singular value of the snapshot matrix, non-increasing.
    pub singular_values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CouplingMeta {
    pub r: usize,
    pub n: usize,
    pub singular_values: Vec<f64>,
    pub snapshot_file_hash: Option<String>,
}

impl LinearCoupling {
    pub fn from_phi(phi: DMatrix<f64>, singular_values: Vec<f64>) -> Self {
        Self { theta: phi.transpose(), phi, singular_values }
    }

    pub fn r(&self) -> usize {
        self.phi.ncols()
    }

    pub fn n(&self) -> usize {
        self.phi.nrows()
    }

    pub fn project(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        &self.theta * x
    }

    pub fn interpolate(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        &self.phi * u
    }

    /// Fraction of snapshot energy carried by the leading `r` modes.
    pub fn captured_energy(&self, r: usize) -> f64 {
        let total: f64 = self.singular_values.iter().map(|s| s * s).sum();
        let head: f64 = self.singular_values.iter().take(r).map(|s| s * s).sum();
        head / total
    }

    /// Writes `phi` as a matrix file and `{r, n, singular_values, snapshot_file_hash}` beside it.
    pub fn save(&self, path: &Path, snapshot_file_hash: Option<String>) -> Result<()> {
        write_matrix_csv(path, &self.phi)?;
        write_json(
            &sidecar_path(path),
            &CouplingMeta {
                r: self.r(),
                n: self.n(),
                singular_values: self.singular_values.clone(),
                snapshot_file_hash,
            },
        )
    }

    pub fn load(path: &Path) -> Result<(Self, CouplingMeta)> {
        let meta: CouplingMeta = read_json(&sidecar_path(path))?;
        let phi = read_matrix_csv(path)?;
        if phi.nrows() != meta.n || phi.ncols() != meta.r {
            return Err(Error::Format {
                path: path.into(),
                msg: format!("phi is {}x{}, sidecar says {}x{}", phi.nrows(), phi.ncols(), meta.n, meta.r),
            });
        }
        Ok((Self::from_phi(phi, meta.singular_values.clone()), meta))
    }
}

/// Flips each column so its largest-magnitude entry is positive.
fn fix_column_signs(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let imax = col.iamax();
        if col[imax] < 0.0 {
            col.neg_mut();
        }
    }
}

/// POD basis of an `n x T` snapshot matrix (no centering).
///
/// Uses the thin SVD when `T >= n` and the `T x T` Gram matrix otherwise.
pub fn build_pod(snapshots: &DMatrix<f64>, r: usize) -> Result<LinearCoupling> {
    let (n, t) = snapshots.shape();
    if t < 2 {
        return Err(invalid("POD needs at least two snapshots"));
    }
    if r == 0 || r > n.min(t) {
        return Err(invalid(format!("r = {r} outside 1..={}", n.min(t))));
    }

    let (modes, sigma) = if t >= n {
        let svd = SVD::try_new(snapshots.clone(), true, false, f64::EPSILON, 0)
            .ok_or_else(|| Error::Decomposition("SVD did not converge".into()))?;
        let u = svd.u.expect("left singular vectors requested");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let modes = DMatrix::from_fn(n, order.len(), |i, j| u[(i, order[j])]);
        let sigma: Vec<f64> = order.iter().map(|&k| svd.singular_values[k]).collect();
        (modes, sigma)
    } else {
        let gram = snapshots.transpose() * snapshots;
        let eig = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..t).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let sigma: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k].max(0.0).sqrt()).collect();
        let mut modes = DMatrix::zeros(n, t);
        for (j, &k) in order.iter().enumerate() {
            if sigma[j] > 0.0 {
                let col = snapshots * eig.eigenvectors.column(k) / sigma[j];
                modes.set_column(j, &col);
            }
        }
        (modes, sigma)
    };

    let tol = sigma[0] * 1e-12 * n.max(t) as f64;
    if sigma[0] == 0.0 || sigma[r - 1] <= tol {
        return Err(invalid(format!("r = {r} exceeds the numerical rank of the snapshots")));
    }

    let mut phi = modes.columns(0, r).into_owned();
    fix_column_signs(&mut phi);
    Ok(LinearCoupling::from_phi(phi, sigma))
}

/// `du/dt = a + B u + u^T C u` with `[out]_p = sum_{q,s} C[p,q,s] u_q u_s`.
#[derive(Debug, Clone)]
pub struct QuadraticRom {
    pub a: DVector<f64>,
    pub b: DMatrix<f64>,
    /// `(r*r) x r`; row `p*r + q`, column `s` holds `C[p,q,s]`.
    c: DMatrix<f64>,
    pub coupling: LinearCoupling,
}

impl QuadraticRom {
    pub fn r(&self) -> usize {
        self.a.len()
    }

    pub fn c(&self, p: usize, q: usize, s: usize) -> f64 {
        self.c[(p * self.r() + q, s)]
    }

    pub fn tendency(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        if u.len() != self.r() {
            return Err(invalid(format!("reduced state has length {}, ROM has r = {}", u.len(), self.r())));
        }
        let m = DMatrix::from_column_slice(u.len(), 1, u.as_slice());
        Ok(self.tendency_columns(&m).column(0).into_owned())
    }

    /// Tendency for every column of an `r x N` matrix.
    pub fn tendency_columns(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        let r = self.r();
        let mut out = &self.b * u;
        let v = &self.c * u;
        for j in 0..u.ncols() {
            let uj = u.column(j);
            let vj = v.column(j);
            for p in 0..r {
                let block = &vj.as_slice()[p * r..(p + 1) * r];
                let quad: f64 = block.iter().zip(uj.iter()).map(|(a, b)| a * b).sum();
                out[(p, j)] += self.a[p] + quad;
            }
        }
        out
    }
}

/// Assembles `a = F theta 1`, `B = -theta phi` and the advection tensor.
///
/// With `(I y)_k = y_{k-1}` and `(D y)_k = y_{k+1} - y_{k-2}`, the advection part of the
/// tendency is `(I y) .* (D y)`, so `C[p,q,s] = sum_k theta[p,k] (I phi_q)_k (D phi_s)_k`.
pub fn build_quadratic_rom(coupling: &LinearCoupling, p: &Lorenz96) -> Result<QuadraticRom> {
    p.validate()?;
    let n = p.n;
    if coupling.n() != n {
        return Err(invalid(format!("coupling has n = {}, model has n = {n}", coupling.n())));
    }
    let r = coupling.r();
    let theta = &coupling.theta;
    let phi = &coupling.phi;

    let a = theta * DVector::from_element(n, p.forcing);
    let b = -(theta * phi);

    let shifted = DMatrix::from_fn(n, r, |k, q| phi[((k + n - 1) % n, q)]);
    let diffed = DMatrix::from_fn(n, r, |k, s| phi[((k + 1) % n, s)] - phi[((k + n - 2) % n, s)]);

    let mut c = DMatrix::zeros(r * r, r);
    for pidx in 0..r {
        // weighted[k, q] = theta[p, k] * shifted[k, q]
        let weighted = DMatrix::from_fn(n, r, |k, q| theta[(pidx, k)] * shifted[(k, q)]);
        let block = weighted.transpose() * &diffed;
        c.view_mut((pidx * r, 0), (r, r)).copy_from(&block);
    }

    Ok(QuadraticRom { a, b, c, coupling: coupling.clone() })
}
