//! Small dense helpers and the diagonal-plus-rank-one covariance blocks used
//! by the mixed-model fitters.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A symmetric matrix `diag(d) + c·11ᵀ` with `d > 0`, `c ≥ 0`.
///
/// Every operation is O(n) via Sherman–Morrison.
#[derive(Debug, Clone)]
pub struct DiagPlusRankOne {
    diag: Vec<f64>,
    c: f64,
    inv_diag: Vec<f64>,
    s1: f64,
    kappa: f64,
}

impl DiagPlusRankOne {
    pub fn new(diag: Vec<f64>, c: f64) -> Self {
        debug_assert!(diag.iter().all(|&x| x > 0.0));
        let inv_diag: Vec<f64> = diag.iter().map(|x| 1.0 / x).collect();
        let s1: f64 = inv_diag.iter().sum();
        let kappa = c / (1.0 + c * s1);
        Self {
            diag,
            c,
            inv_diag,
            s1,
            kappa,
        }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn rank_one(&self) -> f64 {
        self.c
    }

    /// `M⁻¹v`.
    pub fn solve(&self, v: &[f64]) -> Vec<f64> {
        let wv: f64 = self.inv_diag.iter().zip(v).map(|(w, x)| w * x).sum();
        self.inv_diag
            .iter()
            .zip(v)
            .map(|(w, x)| w * x - self.kappa * w * wv)
            .collect()
    }

    /// `1ᵀM⁻¹v`.
    pub fn ones_inv(&self, v: &[f64]) -> f64 {
        let wv: f64 = self.inv_diag.iter().zip(v).map(|(w, x)| w * x).sum();
        wv / (1.0 + self.c * self.s1)
    }

    /// `1ᵀM⁻¹1`.
    pub fn ones_inv_ones(&self) -> f64 {
        self.s1 / (1.0 + self.c * self.s1)
    }

    /// `vᵀM⁻¹v`.
    pub fn quad(&self, v: &[f64]) -> f64 {
        let wv: f64 = self.inv_diag.iter().zip(v).map(|(w, x)| w * x).sum();
        let vdv: f64 = self.inv_diag.iter().zip(v).map(|(w, x)| w * x * x).sum();
        vdv - self.kappa * wv * wv
    }

    pub fn log_det(&self) -> f64 {
        self.diag.iter().map(|d| d.ln()).sum::<f64>() + (1.0 + self.c * self.s1).ln()
    }

    /// `tr(M⁻¹)`.
    pub fn trace_inv(&self) -> f64 {
        let w2: f64 = self.inv_diag.iter().map(|w| w * w).sum();
        self.s1 - self.kappa * w2
    }

    /// `‖M⁻¹‖_F² = tr(M⁻²)`.
    pub fn frob_inv_sq(&self) -> f64 {
        let (mut w2, mut w3) = (0.0, 0.0);
        for &w in &self.inv_diag {
            w2 += w * w;
            w3 += w * w * w;
        }
        w2 - 2.0 * self.kappa * w3 + self.kappa * self.kappa * w2 * w2
    }

    /// `‖M⁻¹1‖² = 1ᵀM⁻²1`.
    pub fn norm_inv_ones_sq(&self) -> f64 {
        let w2: f64 = self.inv_diag.iter().map(|w| w * w).sum();
        let a = 1.0 + self.c * self.s1;
        w2 / (a * a)
    }

    /// `AᵀM⁻¹A` and `AᵀM⁻¹v` for row-major `A` (`len() × p`).
    pub fn gls_terms(&self, a: &[f64], p: usize, v: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.len();
        let mut ata = DMatrix::<f64>::zeros(p, p);
        let mut atv = DVector::<f64>::zeros(p);
        let mut aw = vec![0.0; p];
        let mut wv = 0.0;
        for i in 0..n {
            let w = self.inv_diag[i];
            let row = &a[i * p..(i + 1) * p];
            for k in 0..p {
                aw[k] += row[k] * w;
                atv[k] += row[k] * w * v[i];
                for l in 0..=k {
                    ata[(k, l)] += row[k] * row[l] * w;
                }
            }
            wv += w * v[i];
        }
        for k in 0..p {
            atv[k] -= self.kappa * aw[k] * wv;
            for l in 0..=k {
                ata[(k, l)] -= self.kappa * aw[k] * aw[l];
                ata[(l, k)] = ata[(k, l)];
            }
        }
        (ata, atv)
    }

    /// Dense copy, for tests and small problems.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::from_element(n, n, self.c);
        for i in 0..n {
            m[(i, i)] += self.diag[i];
        }
        m
    }
}

/// Solves the SPD system `A x = b`, naming collinear columns on failure.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>, names: &[String]) -> Result<DVector<f64>> {
    let inv = spd_inverse(a, names)?;
    Ok(&inv * b)
}

/// Inverse of an SPD matrix, naming collinear columns on failure.
pub fn spd_inverse(a: &DMatrix<f64>, names: &[String]) -> Result<DMatrix<f64>> {
    let bad = collinear_columns(a);
    if !bad.is_empty() {
        return Err(Error::SingularDesign {
            columns: bad.iter().map(|&k| column_name(names, k)).collect(),
        });
    }
    match a.clone().cholesky() {
        Some(ch) => Ok(ch.inverse()),
        None => Err(Error::SingularDesign {
            columns: (0..a.ncols()).map(|k| column_name(names, k)).collect(),
        }),
    }
}

fn column_name(names: &[String], k: usize) -> String {
    names.get(k).cloned().unwrap_or_else(|| format!("x{k}"))
}

/// Columns whose Gram-matrix pivot collapses relative to the column's own
/// norm, i.e. columns that are (numerically) combinations of earlier ones.
pub fn collinear_columns(a: &DMatrix<f64>) -> Vec<usize> {
    let p = a.nrows();
    let mut m = a.clone();
    let mut bad = Vec::new();
    let mut active = vec![true; p];
    for k in 0..p {
        let orig = a[(k, k)];
        let piv = m[(k, k)];
        if !(orig > 0.0) || !(piv > 1e-10 * orig) {
            bad.push(k);
            active[k] = false;
            continue;
        }
        for i in (k + 1)..p {
            if !active[i] {
                continue;
            }
            let f = m[(i, k)] / piv;
            for j in (k + 1)..p {
                m[(i, j)] -= f * m[(k, j)];
            }
        }
    }
    bad
}

/// Ordinary least squares on row-major `x` (`n × p`).
pub fn ols(x: &[f64], p: usize, y: &[f64], names: &[String]) -> Result<DVector<f64>> {
    let n = y.len();
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    for i in 0..n {
        let row = &x[i * p..(i + 1) * p];
        for k in 0..p {
            xty[k] += row[k] * y[i];
            for l in 0..p {
                xtx[(k, l)] += row[k] * row[l];
            }
        }
    }
    spd_solve(&xtx, &xty, names)
}
