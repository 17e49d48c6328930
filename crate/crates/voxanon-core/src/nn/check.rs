//! Finite-difference gradient verification.
//!
//! The verification suite compares analytic gradients of every loss with
//! central finite differences over randomly sampled parameter
//! coordinates. The comparison is relative, with coordinates whose
//! analytic and numeric values both sit below `NOISE_FLOOR` counted as
//! agreeing (the quotient of two rounding errors is meaningless).

use crate::nn::params::ParamSet;
use crate::nn::tape::{Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Magnitudes below this are treated as zero when forming relative errors.
pub const NOISE_FLOOR: f64 = 1e-6;

/// Outcome of an [`fd_param_check`] run.
#[derive(Debug, Clone)]
pub struct FdReport {
    /// Largest relative error across checked coordinates.
    pub max_rel_err: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Parameter name holding the worst coordinate.
    pub worst_param: String,
}

/// Compares analytic gradients against central finite differences.
///
/// `build` must deterministically reconstruct the loss graph from bound
/// parameters — it is re-run twice per sampled coordinate with a
/// perturbed parameter set. Per parameter, up to `samples_per_param`
/// coordinates are drawn without replacement from a seeded stream.
pub fn fd_param_check<F>(
    params: &mut ParamSet,
    mut build: F,
    samples_per_param: usize,
    seed: u64,
) -> FdReport
where
    F: FnMut(&mut Tape, &[Var]) -> Var,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let bound = params.bind_all(&mut tape);
    let loss = build(&mut tape, &bound);
    tape.backward(loss);
    let mut grads = params.zero_grads();
    params.accumulate_grads(&tape, &bound, &mut grads);
    drop(tape);

    let eval = |params: &ParamSet, build: &mut F| -> f64 {
        let mut tape = Tape::new();
        let bound = params.bind_all(&mut tape);
        let loss = build(&mut tape, &bound);
        tape.value(loss)[[0, 0]]
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FdReport {
        max_rel_err: 0.0,
        checked: 0,
        worst_param: String::new(),
    };
    for id in params.ids().collect::<Vec<_>>() {
        let (rows, cols) = params.get(id).dim();
        let total = rows * cols;
        let mut picked: Vec<usize> = (0..total).collect();
        // Partial Fisher-Yates: draw min(samples, total) distinct coords.
        let n_draw = samples_per_param.min(total);
        for d in 0..n_draw {
            let j = d + rng.gen_range(0..total - d);
            picked.swap(d, j);
        }
        for &flat in picked.iter().take(n_draw) {
            let (r, c) = (flat / cols, flat % cols);
            let x0 = params.get(id)[[r, c]];
            let h = 1e-5 * (1.0 + x0.abs());
            params.get_mut(id)[[r, c]] = x0 + h;
            let f_hi = eval(params, &mut build);
            params.get_mut(id)[[r, c]] = x0 - h;
            let f_lo = eval(params, &mut build);
            params.get_mut(id)[[r, c]] = x0;

            let numeric = (f_hi - f_lo) / (2.0 * h);
            let analytic = grads[id.index()][[r, c]];
            let mag = analytic.abs().max(numeric.abs());
            let rel = if mag < NOISE_FLOOR {
                0.0
            } else {
                (analytic - numeric).abs() / mag
            };
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = format!("{}[{r},{c}]", params.name(id));
            }
        }
    }
    report
}
