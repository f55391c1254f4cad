use super::{Tape, Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Lower bound on the denominator of the relative error, so that gradients
/// that are zero up to rounding compare as absolute differences.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Max relative error between the tape gradient of the scalar `f(inputs)`
/// and central differences, over every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    grad_check_sampled(f, inputs, eps, usize::MAX, 0)
}

/// As [`grad_check`], but checks at most `per_input` coordinates of each
/// input, chosen uniformly with `seed`.
pub fn grad_check_sampled<F>(f: F, inputs: &[Tensor<f64>], eps: f64, per_input: usize, seed: u64) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let n = inputs[i].len();
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = if per_input >= n {
            (0..n).collect()
        } else {
            sample(&mut rng, n, per_input).into_vec()
        };
        for j in coords {
            let x0 = inputs[i].data[j];
            probe[i].data[j] = x0 + eps;
            let up = eval(&probe);
            probe[i].data[j] = x0 - eps;
            let down = eval(&probe);
            probe[i].data[j] = x0;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[j];
            let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

/// `sum_i r_i y_i` with `r` drawn from `seed`, so a non-scalar op can be
/// checked through a scalar.
pub fn project_to_scalar(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = tape.value(y).len();
    let flat = tape.reshape(y, &[1, n]).expect("same length");
    let r = Tensor::new(&[1, n], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
    let r = tape.constant(r);
    let s = tape.linear(flat, r, None).expect("matching widths");
    tape.reshape(s, &[]).expect("scalar")
}
