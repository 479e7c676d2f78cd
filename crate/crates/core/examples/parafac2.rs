//! Decompose slices that share a PARAFAC2 structure and report the fit.

use intentrec::parafac2::{self, Parafac2Options};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> intentrec::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (r, t) = (2, 12);
    let h = DMatrix::from_fn(r, r, |_, _| rng.gen_range(-1.0..1.0))
        .qr()
        .q();
    let v = DMatrix::from_fn(t, r, |_, _| rng.gen_range(-1.0..1.0));
    let slices: Vec<DMatrix<f64>> = (0..20)
        .map(|_| {
            let n = rng.gen_range(5..11);
            let g = DMatrix::from_fn(n, r, |_, _| rng.gen_range(-1.0..1.0))
                .qr()
                .q();
            let s = DMatrix::from_diagonal(&DVector::from_fn(r, |_, _| rng.gen_range(0.0..1.0)));
            g * &h * s * v.transpose()
        })
        .collect();

    let opts = Parafac2Options {
        rank: r,
        ..Parafac2Options::default()
    };
    let (f, report) = parafac2::decompose(&slices, &opts)?;
    let total: f64 = slices.iter().map(|x| x.norm_squared()).sum();
    println!(
        "{} sweeps, converged {}, relative error {:.2e}",
        report.iterations,
        report.converged,
        (report.errors.last().unwrap() / total).sqrt()
    );
    println!("loading matrix of user 0:\n{}", f.loading_matrix(0)?);
    Ok(())
}
