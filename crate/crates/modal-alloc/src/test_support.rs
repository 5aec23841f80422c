//! Shared generators for seeded unit tests.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::lti::StateSpaceModel;

/// Random stable system built from a modal skeleton (n_pairs oscillatory
/// blocks, n_real real poles) pushed through a random well-conditioned
/// similarity transform.
pub(crate) fn random_stable_model(
    rng: &mut ChaCha8Rng,
    n_pairs: usize,
    n_real: usize,
    m: usize,
    p: usize,
) -> StateSpaceModel {
    let n = 2 * n_pairs + n_real;
    let mut a = DMatrix::zeros(n, n);
    let mut at = 0;
    for _ in 0..n_real {
        a[(at, at)] = -rng.gen_range(0.2..3.0);
        at += 1;
    }
    for _ in 0..n_pairs {
        let sigma = -rng.gen_range(0.05..1.5);
        let omega = rng.gen_range(0.5..8.0);
        a[(at, at)] = sigma;
        a[(at, at + 1)] = omega;
        a[(at + 1, at)] = -omega;
        a[(at + 1, at + 1)] = sigma;
        at += 2;
    }
    // I plus a small random part stays far from singular.
    let t = DMatrix::identity(n, n) + DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.2..0.2));
    let t_inv = t.clone().try_inverse().unwrap();
    let a_full = &t * a * &t_inv;
    let b = DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0));
    let c = DMatrix::from_fn(p, n, |_, _| rng.gen_range(-1.0..1.0));
    StateSpaceModel::new(a_full, b, c).unwrap()
}
