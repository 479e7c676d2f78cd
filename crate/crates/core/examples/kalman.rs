//! Filter a latent factor through a noisy, partly missing observation stream.

use intentrec::kalman::{self, KalmanModel, MeasurementNoise};
use nalgebra::{DMatrix, DVector};

fn main() -> intentrec::Result<()> {
    let model = KalmanModel {
        transition: DMatrix::from_row_slice(2, 2, &[0.95, 0.05, 0.0, 0.9]),
        process_noise: DMatrix::identity(2, 2) * 0.01,
        measurement_noise: MeasurementNoise::Isotropic(0.2),
        loading: DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.5, 0.5]),
    };
    let obs: Vec<Option<DVector<f64>>> = (0..8)
        .map(|t| (t % 3 != 2).then(|| DVector::from_vec(vec![1.0, 0.2 * t as f64, 0.6])))
        .collect();
    let (filtered, end) = kalman::evolve_sequence(&model, &DVector::zeros(2), &obs)?;
    for (t, (f, x)) in filtered.iter().zip(&obs).enumerate() {
        let tag = if x.is_some() { "" } else { " (missing)" };
        println!("t={t}: [{:.3}, {:.3}]{tag}", f[0], f[1]);
    }
    println!("final covariance:\n{}", end.post_cov);
    Ok(())
}
