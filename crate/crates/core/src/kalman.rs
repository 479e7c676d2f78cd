//! Kalman filtering of latent factors.
//!
//! The state is the `R`-dimensional latent factor of the current report view
//! and the measurement is that view's context vector:
//!
//! ```text
//! predict   f̃_t = A f̂_{t-1}              P̃_t = A P̂_{t-1} Aᵀ + Q
//! gain      K_t = P̃_t Λᵀ (Λ P̃_t Λᵀ + Ψ)⁻¹
//! update    f̂_t = f̃_t + K_t (x_t − Λ f̃_t)   P̂_t = (I − K_t Λ) P̃_t
//! ```
//!
//! With isotropic measurement noise `Ψ = ψI` the gain is computed in its
//! equivalent information form `(P̃⁻¹ + ΛᵀΛ/ψ)⁻¹ Λᵀ/ψ`, which only inverts
//! `R x R` matrices. Missing observations get a variance inflated by 1e6
//! and a zero innovation.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Variance inflation applied to missing observations.
pub const MISSING_VARIANCE_SCALE: f64 = 1e6;

const SINGULAR_JITTER: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub enum MeasurementNoise {
    Isotropic(f64),
    Full(DMatrix<f64>),
}

impl MeasurementNoise {
    fn matrix(&self, n: usize) -> DMatrix<f64> {
        match self {
            MeasurementNoise::Isotropic(psi) => DMatrix::identity(n, n) * *psi,
            MeasurementNoise::Full(m) => m.clone(),
        }
    }

    fn inflated(&self) -> MeasurementNoise {
        match self {
            MeasurementNoise::Isotropic(psi) => {
                MeasurementNoise::Isotropic(psi.max(1.0) * MISSING_VARIANCE_SCALE)
            }
            MeasurementNoise::Full(m) => {
                let n = m.nrows();
                let floor = DMatrix::identity(n, n);
                MeasurementNoise::Full((m + floor) * MISSING_VARIANCE_SCALE)
            }
        }
    }
}

/// Per-user filter parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanModel {
    /// Transition `A_u` (`R x R`).
    pub transition: DMatrix<f64>,
    /// Process noise `Q_u` (`R x R`).
    pub process_noise: DMatrix<f64>,
    /// Measurement noise `Ψ_u` (`N_u x N_u`).
    pub measurement_noise: MeasurementNoise,
    /// Loading matrix `Λ_u` (`N_u x R`).
    pub loading: DMatrix<f64>,
}

impl KalmanModel {
    pub fn rank(&self) -> usize {
        self.loading.ncols()
    }

    pub fn observation_dim(&self) -> usize {
        self.loading.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.rank();
        let n = self.observation_dim();
        if self.transition.shape() != (r, r) || self.process_noise.shape() != (r, r) {
            return Err(Error::argument(format!(
                "transition/process noise must be {r}x{r}"
            )));
        }
        if let MeasurementNoise::Full(m) = &self.measurement_noise {
            if m.shape() != (n, n) {
                return Err(Error::argument(format!(
                    "measurement noise must be {n}x{n}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub prior_mean: DVector<f64>,
    pub prior_cov: DMatrix<f64>,
    pub post_mean: DVector<f64>,
    pub post_cov: DMatrix<f64>,
    pub gain: Option<DMatrix<f64>>,
}

impl KalmanState {
    /// A state whose a posteriori estimate is `mean` with covariance `cov`.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        KalmanState {
            prior_mean: mean.clone(),
            prior_cov: cov.clone(),
            post_mean: mean,
            post_cov: cov,
            gain: None,
        }
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

fn spd_inverse(m: DMatrix<f64>) -> DMatrix<f64> {
    if let Some(chol) = m.clone().cholesky() {
        return chol.inverse();
    }
    log::warn!("innovation covariance is numerically singular; adding {SINGULAR_JITTER} jitter");
    let n = m.nrows();
    let scale = m.amax().max(1.0);
    let jittered = m + DMatrix::identity(n, n) * (SINGULAR_JITTER * scale);
    match jittered.clone().cholesky() {
        Some(chol) => chol.inverse(),
        None => jittered
            .pseudo_inverse(SINGULAR_JITTER)
            .expect("non-negative epsilon"),
    }
}

/// Least-squares transition fit `min Σ_t ‖f_t − A f_{t−1}‖² + ridge ‖A‖²_F`.
pub fn estimate_transition(sequence: &[DVector<f64>], ridge: f64) -> Result<DMatrix<f64>> {
    if sequence.len() < 2 {
        return Err(Error::argument(
            "transition estimate needs at least two steps",
        ));
    }
    let r = sequence[0].len();
    let mut cross = DMatrix::zeros(r, r);
    let mut gram = DMatrix::identity(r, r) * ridge;
    for pair in sequence.windows(2) {
        cross += &pair[1] * pair[0].transpose();
        gram += &pair[0] * pair[0].transpose();
    }
    let gram_inv = gram
        .clone()
        .try_inverse()
        .unwrap_or_else(|| gram.pseudo_inverse(1e-12).expect("non-negative epsilon"));
    Ok(cross * gram_inv)
}

/// Mean per-component variance of `f_t - A f_{t-1}` over the sequence.
pub fn residual_variance(sequence: &[DVector<f64>], transition: &DMatrix<f64>) -> f64 {
    let steps = sequence.len().saturating_sub(1);
    if steps == 0 {
        return 0.0;
    }
    let r = sequence[0].len().max(1);
    let total: f64 = sequence
        .windows(2)
        .map(|p| (&p[1] - transition * &p[0]).norm_squared())
        .sum();
    total / (steps * r) as f64
}

/// Time update.
pub fn predict(model: &KalmanModel, state: &mut KalmanState) {
    let a = &model.transition;
    state.prior_mean = a * &state.post_mean;
    state.prior_cov = a * &state.post_cov * a.transpose() + &model.process_noise;
    symmetrize(&mut state.prior_cov);
}

/// Measurement update with `observation`, or a missing-signal update when
/// it is `None`.
pub fn update(model: &KalmanModel, state: &mut KalmanState, observation: Option<&DVector<f64>>) {
    let lambda = &model.loading;
    let noise = match observation {
        Some(_) => model.measurement_noise.clone(),
        None => model.measurement_noise.inflated(),
    };
    let p = &state.prior_cov;
    let gain = match &noise {
        MeasurementNoise::Isotropic(psi) if *psi > 0.0 => {
            let info = spd_inverse(p.clone()) + lambda.transpose() * lambda / *psi;
            spd_inverse(info) * lambda.transpose() / *psi
        }
        _ => {
            let n = lambda.nrows();
            let s = lambda * p * lambda.transpose() + noise.matrix(n);
            p * lambda.transpose() * spd_inverse(s)
        }
    };

    state.post_mean = match observation {
        Some(x) => noiseless_solve(&noise, lambda, x)
            .unwrap_or_else(|| &state.prior_mean + &gain * (x - lambda * &state.prior_mean)),
        None => state.prior_mean.clone(),
    };
    let r = p.nrows();
    state.post_cov = (DMatrix::identity(r, r) - &gain * lambda) * p;
    symmetrize(&mut state.post_cov);
    state.gain = Some(gain);
}

/// A noiseless measurement through an invertible square loading fixes the
/// state outright; solving for it avoids the rounding in `K ≈ Λ⁻¹`.
fn noiseless_solve(
    noise: &MeasurementNoise,
    lambda: &DMatrix<f64>,
    x: &DVector<f64>,
) -> Option<DVector<f64>> {
    let zero = match noise {
        MeasurementNoise::Isotropic(psi) => *psi == 0.0,
        MeasurementNoise::Full(m) => m.iter().all(|v| *v == 0.0),
    };
    if !zero || !lambda.is_square() {
        return None;
    }
    lambda.clone().lu().solve(x)
}

/// Filters one user's observation sequence, starting from `initial`
/// (a posteriori mean at step 0) with identity covariance. Returns the
/// a posteriori factor after each observation, plus the final state.
pub fn evolve_sequence(
    model: &KalmanModel,
    initial: &DVector<f64>,
    observations: &[Option<DVector<f64>>],
) -> Result<(Vec<DVector<f64>>, KalmanState)> {
    model.validate()?;
    let r = model.rank();
    if initial.len() != r {
        return Err(Error::argument(format!(
            "initial factor has length {}, expected {r}",
            initial.len()
        )));
    }
    if let Some(bad) = observations
        .iter()
        .flatten()
        .find(|x| x.len() != model.observation_dim())
    {
        return Err(Error::argument(format!(
            "observation of length {}, expected {}",
            bad.len(),
            model.observation_dim()
        )));
    }

    let mut state = KalmanState::new(initial.clone(), DMatrix::identity(r, r));
    let mut out = Vec::with_capacity(observations.len());
    for x in observations {
        predict(model, &mut state);
        update(model, &mut state, x.as_ref());
        out.push(state.post_mean.clone());
    }
    Ok((out, state))
}

/// One online step from a stored state.
pub fn step(
    model: &KalmanModel,
    state: &mut KalmanState,
    observation: Option<&DVector<f64>>,
) -> DVector<f64> {
    predict(model, state);
    update(model, state, observation);
    state.post_mean.clone()
}

pub fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::data("ragged matrix rows"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}
