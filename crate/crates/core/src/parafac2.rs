//! PARAFAC2 by direct-fitting alternating least squares.
//!
//! Each user slice `X_u` (`N_u x T`, `N_u` may differ between users) is
//! modelled as `G_u H S_u Vᵀ` with `G_u` column-orthonormal, `H` shared,
//! `S_u` diagonal and `V` (`T x R`) holding the shared latent factors. One
//! sweep:
//!
//! 1. `G_u ← U Wᵀ` where `U Σ Wᵀ = svd(X_u V S_u Hᵀ)` (orthogonal Procrustes);
//! 2. project `Y_u = G_uᵀ X_u` and run one CP-ALS round on the `R x T x U`
//!    tensor `Y` for `H`, `V` and the diagonals of `S_u`, each block solved
//!    by QR least squares on the stacked unfolding.
//!
//! Every step is an exact block minimizer of `Σ_u ‖X_u − G_u H S_u Vᵀ‖²`.
//! After a sweep the factors may be extrapolated along the last change; the
//! jump is kept only when it lowers the error, so the trace never increases.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Parafac2Options {
    pub rank: usize,
    /// Stop once the relative change of the error falls below this.
    pub tol: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for Parafac2Options {
    fn default() -> Self {
        Parafac2Options {
            rank: 5,
            tol: 1e-7,
            max_iters: 500,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parafac2Factors {
    pub rank: usize,
    pub g: Vec<DMatrix<f64>>,
    pub h: DMatrix<f64>,
    /// Diagonals of `S_u`.
    pub s: Vec<DVector<f64>>,
    pub v: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub iterations: usize,
    /// Σ_u ‖X_u − X̂_u‖²_F after each sweep.
    pub errors: Vec<f64>,
    pub converged: bool,
}

impl Parafac2Factors {
    pub fn users(&self) -> usize {
        self.g.len()
    }

    fn check(&self, user: usize) -> Result<()> {
        if user >= self.users() {
            return Err(Error::lookup("user index", user.to_string()));
        }
        Ok(())
    }

    /// `Λ̂_u = G_u H S_u`.
    pub fn loading_matrix(&self, user: usize) -> Result<DMatrix<f64>> {
        self.check(user)?;
        Ok(&self.g[user] * scale_columns(&self.h, &self.s[user]))
    }

    /// `F̃ = Vᵀ`, shared by every user.
    pub fn initial_latent_factors(&self) -> DMatrix<f64> {
        self.v.transpose()
    }

    /// `X̂_u = G_u H S_u Vᵀ`.
    pub fn reconstruct(&self, user: usize) -> Result<DMatrix<f64>> {
        Ok(self.loading_matrix(user)? * self.v.transpose())
    }

    /// Rescales `V` to unit-norm columns, moving the scale into `H`.
    /// The reconstruction is unchanged.
    pub fn normalize_latent_columns(&mut self) {
        for r in 0..self.rank {
            let norm = self.v.column(r).norm();
            if norm > 0.0 {
                self.v.column_mut(r).unscale_mut(norm);
                self.h.column_mut(r).scale_mut(norm);
            }
        }
    }
}

fn scale_columns(m: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.scale_mut(d[j]);
    }
    out
}

/// Orthonormal polar factor of a tall matrix.
fn polar(m: DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    u * vt
}

fn total_error(slices: &[DMatrix<f64>], f: &Parafac2Factors) -> f64 {
    slices
        .iter()
        .enumerate()
        .map(|(u, x)| (x - f.reconstruct(u).expect("index in range")).norm_squared())
        .sum()
}

fn check_input(slices: &[DMatrix<f64>], r: usize) -> Result<()> {
    let Some(first) = slices.first() else {
        return Err(Error::argument("empty tensor"));
    };
    let t = first.ncols();
    if slices.iter().any(|x| x.ncols() != t) {
        return Err(Error::argument("slices differ in column count"));
    }
    let min_rows = slices.iter().map(DMatrix::nrows).min().unwrap_or(0);
    if r == 0 || r > t || r > min_rows {
        return Err(Error::argument(format!(
            "rank {r} must be in 1..={} (T = {t}, min N_u = {min_rows})",
            t.min(min_rows)
        )));
    }
    if slices.iter().any(|x| x.iter().any(|v| !v.is_finite())) {
        return Err(Error::data("tensor contains non-finite values"));
    }
    Ok(())
}

/// `H`, `V` and `S_u` drawn from a seeded uniform [0, 1).
fn random_init(slices: &[DMatrix<f64>], r: usize, seed: u64) -> Parafac2Factors {
    let t = slices[0].ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform =
        |rows: usize, cols: usize| DMatrix::from_fn(rows, cols, |_, _| rng.gen::<f64>());
    let h = uniform(r, r);
    let v = uniform(t, r);
    let s = (0..slices.len())
        .map(|_| uniform(r, 1).column(0).into_owned())
        .collect();
    Parafac2Factors {
        rank: r,
        g: slices
            .iter()
            .map(|x| DMatrix::zeros(x.nrows(), r))
            .collect(),
        h,
        s,
        v,
    }
}

/// Fits PARAFAC2 to slices sharing a column count.
pub fn decompose(
    slices: &[DMatrix<f64>],
    opts: &Parafac2Options,
) -> Result<(Parafac2Factors, FitReport)> {
    check_input(slices, opts.rank)?;
    let f = random_init(slices, opts.rank, opts.seed);
    fit_from(slices, f, opts)
}

/// Continues the fit from given factors (`G_u` is recomputed first).
pub fn decompose_from(
    slices: &[DMatrix<f64>],
    init: Parafac2Factors,
    opts: &Parafac2Options,
) -> Result<(Parafac2Factors, FitReport)> {
    check_input(slices, opts.rank)?;
    fit_from(slices, init, opts)
}

fn fit_from(
    slices: &[DMatrix<f64>],
    mut f: Parafac2Factors,
    opts: &Parafac2Options,
) -> Result<(Parafac2Factors, FitReport)> {
    let norm_x: f64 = slices.iter().map(DMatrix::norm_squared).sum();
    let mut errors = Vec::new();
    let mut converged = false;
    let mut search = LineSearch::default();
    for iter in 1..=opts.max_iters {
        let before = f.clone();
        sweep(slices, &mut f);
        let mut err = total_error(slices, &f);
        if iter > 1 {
            if let Some((g, e)) = search.try_jump(slices, &before, &f, err, iter) {
                f = g;
                err = e;
            }
        }
        let prev = errors.last().copied();
        errors.push(err);
        if norm_x == 0.0 || err <= norm_x * 1e-28 {
            converged = true;
            break;
        }
        if let Some(prev) = prev {
            if (prev - err).abs() <= opts.tol * prev {
                converged = true;
                break;
            }
        }
    }
    let report = FitReport {
        iterations: errors.len(),
        errors,
        converged,
    };
    Ok((f, report))
}

/// Least-squares solution of `a x = b` by Householder QR, so the
/// conditioning is not squared as with normal equations. A numerically
/// rank-deficient `a` falls back to a truncated SVD.
fn lstsq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let qr = a.clone().qr();
    let r = qr.r();
    let diag = r.diagonal().abs();
    let tol = diag.max() * f64::EPSILON * a.nrows().max(a.ncols()) as f64;
    if diag.min() > tol {
        let qtb = qr.q().transpose() * b;
        if let Some(x) = r.solve_upper_triangular(&qtb) {
            return x;
        }
    }
    let svd = a.clone().svd(true, true);
    let eps = svd.singular_values.max() * f64::EPSILON * a.nrows().max(a.ncols()) as f64;
    svd.solve(b, eps).expect("u and v_t requested")
}

/// Extrapolation along the last sweep's change in `H`, `V` and `S_u`,
/// kept only when it lowers the error. The step is `iter^(1/power)`;
/// repeated rejections make it more cautious.
#[derive(Debug)]
struct LineSearch {
    power: f64,
    failures: usize,
}

impl Default for LineSearch {
    fn default() -> Self {
        LineSearch {
            power: 2.0,
            failures: 0,
        }
    }
}

impl LineSearch {
    const MAX_FAILURES: usize = 4;

    fn try_jump(
        &mut self,
        slices: &[DMatrix<f64>],
        before: &Parafac2Factors,
        after: &Parafac2Factors,
        err: f64,
        iter: usize,
    ) -> Option<(Parafac2Factors, f64)> {
        let step = (iter as f64).powf(1.0 / self.power);
        let jump = |a: &DMatrix<f64>, b: &DMatrix<f64>| a + (b - a) * step;
        let mut cand = after.clone();
        cand.h = jump(&before.h, &after.h);
        cand.v = jump(&before.v, &after.v);
        for (u, s) in cand.s.iter_mut().enumerate() {
            *s = &before.s[u] + (&after.s[u] - &before.s[u]) * step;
        }
        update_g(slices, &mut cand);
        let cand_err = total_error(slices, &cand);
        if cand_err.is_finite() && cand_err < err {
            Some((cand, cand_err))
        } else {
            self.failures += 1;
            if self.failures == Self::MAX_FAILURES {
                self.power += 1.0;
                self.failures = 0;
            }
            None
        }
    }
}

fn update_g(slices: &[DMatrix<f64>], f: &mut Parafac2Factors) {
    for (u, x) in slices.iter().enumerate() {
        let sh = scale_columns(&f.h, &f.s[u]);
        f.g[u] = polar(x * &f.v * sh.transpose());
    }
}

fn sweep(slices: &[DMatrix<f64>], f: &mut Parafac2Factors) {
    let r = f.rank;
    let t = f.v.nrows();
    let k = slices.len();
    // (a) orthonormal G_u
    update_g(slices, f);
    let y: Vec<DMatrix<f64>> = slices
        .iter()
        .zip(&f.g)
        .map(|(x, g)| g.transpose() * x)
        .collect();

    // (b) one CP-ALS round on Y: H, then V, then the S_u diagonals.
    // H: [Y_1 .. Y_K] = H [S_1 Vᵀ .. S_K Vᵀ]
    let mut design = DMatrix::zeros(k * t, r);
    let mut target = DMatrix::zeros(k * t, r);
    for (u, yu) in y.iter().enumerate() {
        design
            .rows_mut(u * t, t)
            .copy_from(&scale_columns(&f.v, &f.s[u]));
        target.rows_mut(u * t, t).copy_from(&yu.transpose());
    }
    f.h = lstsq(&design, &target).transpose();

    // V: [Y_1ᵀ .. Y_Kᵀ] = V [S_1 Hᵀ .. S_K Hᵀ]
    let mut design = DMatrix::zeros(k * r, r);
    let mut target = DMatrix::zeros(k * r, t);
    for (u, yu) in y.iter().enumerate() {
        design
            .rows_mut(u * r, r)
            .copy_from(&scale_columns(&f.h, &f.s[u]));
        target.rows_mut(u * r, r).copy_from(yu);
    }
    f.v = lstsq(&design, &target).transpose();

    // S_u: vec(Y_u) = (V ⊙ H) s_u
    let mut kr = DMatrix::zeros(r * t, r);
    for j in 0..r {
        for c in 0..t {
            for i in 0..r {
                kr[(c * r + i, j)] = f.h[(i, j)] * f.v[(c, j)];
            }
        }
    }
    let mut stacked = DMatrix::zeros(r * t, k);
    for (u, yu) in y.iter().enumerate() {
        stacked.column_mut(u).copy_from_slice(yu.as_slice());
    }
    let s = lstsq(&kr, &stacked);
    for u in 0..k {
        f.s[u] = s.column(u).into_owned();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_toy() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        let f = Parafac2Factors {
            rank: 2,
            g: vec![i2.clone()],
            h: i2.clone(),
            s: vec![DVector::from_element(2, 1.0)],
            v: i2.clone(),
        };
        assert_eq!(f.reconstruct(0).unwrap(), i2);
        assert_eq!(f.loading_matrix(0).unwrap(), i2);
        assert!(f.reconstruct(1).is_err());
    }

    #[test]
    fn zero_scale_gives_zero_reconstruction() {
        let f = Parafac2Factors {
            rank: 2,
            g: vec![DMatrix::identity(3, 2)],
            h: DMatrix::from_element(2, 2, 0.7),
            s: vec![DVector::zeros(2)],
            v: DMatrix::from_element(4, 2, 1.0),
        };
        assert!(f.reconstruct(0).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn latent_factors_are_v_transposed() {
        let f = Parafac2Factors {
            rank: 2,
            g: vec![DMatrix::identity(3, 2)],
            h: DMatrix::identity(2, 2),
            s: vec![DVector::from_element(2, 1.0)],
            v: DMatrix::from_fn(4, 2, |i, j| (i * 2 + j) as f64),
        };
        let ft = f.initial_latent_factors();
        assert_eq!(ft.shape(), (2, 4));
        for t in 0..4 {
            assert_eq!(ft.column(t).transpose(), f.v.row(t));
        }
    }

    #[test]
    fn zero_tensor_fits_immediately() {
        let slices = vec![DMatrix::zeros(4, 3), DMatrix::zeros(5, 3)];
        let (f, report) = decompose(
            &slices,
            &Parafac2Options {
                rank: 2,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(report.iterations, 1);
        assert_eq!(report.errors[0], 0.0);
        assert!(report.converged);
        for g in &f.g {
            let gtg = g.transpose() * g;
            assert!((gtg - DMatrix::identity(2, 2)).amax() < 1e-8);
        }
    }

    #[test]
    fn rank_bounds_are_checked() {
        let slices = vec![
            DMatrix::from_element(3, 4, 1.0),
            DMatrix::from_element(2, 4, 1.0),
        ];
        let opts = |rank| Parafac2Options {
            rank,
            ..Default::default()
        };
        assert!(matches!(
            decompose(&slices, &opts(3)),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            decompose(&slices, &opts(0)),
            Err(Error::Argument(_))
        ));
        assert!(decompose(&slices, &opts(2)).is_ok());
        assert!(matches!(decompose(&[], &opts(1)), Err(Error::Argument(_))));
    }

    #[test]
    fn nan_is_a_data_error() {
        let mut x = DMatrix::from_element(3, 3, 1.0);
        x[(1, 1)] = f64::NAN;
        assert!(matches!(
            decompose(
                &[x],
                &Parafac2Options {
                    rank: 1,
                    ..Default::default()
                }
            ),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn rank_one_identical_slices() {
        let profile = DVector::from_vec(vec![1.0, 3.0, -2.0, 0.5, 4.0]);
        let col = DVector::from_vec(vec![2.0, -1.0, 0.5]);
        let x = &col * profile.transpose();
        let slices = vec![x.clone(), x.clone(), x];
        let (mut f, report) = decompose(
            &slices,
            &Parafac2Options {
                rank: 1,
                tol: 1e-12,
                max_iters: 200,
                seed: 3,
            },
        )
        .unwrap();
        assert!(*report.errors.last().unwrap() < 1e-18);
        f.normalize_latent_columns();
        let v = f.v.column(0);
        let cos = v.dot(&profile) / (v.norm() * profile.norm());
        assert!((cos.abs() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn normalizing_keeps_reconstruction() {
        let slices = vec![
            DMatrix::from_fn(4, 5, |i, j| ((i + 1) * (j + 2)) as f64 % 7.0),
            DMatrix::from_fn(6, 5, |i, j| ((i * 3 + j) % 5) as f64),
        ];
        let (mut f, _) = decompose(
            &slices,
            &Parafac2Options {
                rank: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let before = f.reconstruct(1).unwrap();
        f.normalize_latent_columns();
        assert!((f.reconstruct(1).unwrap() - before).amax() < 1e-10);
        for r in 0..2 {
            assert!((f.v.column(r).norm() - 1.0).abs() < 1e-12);
        }
    }
}
