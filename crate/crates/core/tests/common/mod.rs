#![allow(dead_code)]

use pincer_core::diff::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(rows, cols, data).unwrap()
}

pub fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    pincer_core::diff::normalize(&mut v);
    v
}

pub fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Tensor {
    let r: Vec<Vec<f64>> = (0..rows).map(|_| random_unit(rng, dim)).collect();
    Tensor::from_rows(&r).unwrap()
}

pub fn assert_close(analytic: f64, numeric: f64, what: &str) {
    let tol = (1e-4 * analytic.abs().max(numeric.abs())).max(1e-6);
    assert!(
        (analytic - numeric).abs() <= tol,
        "{what}: analytic {analytic} vs numeric {numeric}"
    );
}

/// Compares tape gradients of a scalar loss w.r.t. the listed parameters
/// against Richardson-extrapolated central differences (at most `per_param` coordinates each).
pub fn check_param_grads<F>(store: &ParamStore, ids: &[ParamId], per_param: usize, build: F)
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, store);
    let grads = tape.backward(loss).unwrap();
    let eval = |s: &ParamStore| {
        let mut t = Tape::new();
        let l = build(&mut t, s);
        t.value(l).item()
    };
    let h = 1e-4;
    let mut pick = ChaCha8Rng::seed_from_u64(5);
    for &id in ids {
        let n = store.value(id).len();
        let coords: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| pick.random_range(0..n)).collect()
        };
        let g = grads.get(id);
        for j in coords {
            let central = |h: f64| {
                let mut plus = store.clone();
                plus.value_mut(id).data_mut()[j] += h;
                let mut minus = store.clone();
                minus.value_mut(id).data_mut()[j] -= h;
                (eval(&plus) - eval(&minus)) / (2.0 * h)
            };
            let numeric = (4.0 * central(h / 2.0) - central(h)) / 3.0;
            let analytic = g.map(|g| g[j]).unwrap_or(0.0);
            assert_close(analytic, numeric, &format!("{}[{j}]", store.get(id).name));
        }
    }
}
