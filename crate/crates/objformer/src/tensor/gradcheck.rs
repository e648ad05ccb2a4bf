//! Central finite-difference oracle for gradient verification.
//!
//! The oracle only evaluates forward passes, so it stays independent of the
//! analytic backward rules it checks. Run it at `f64`; `f32` cannot reach the
//! required tolerances.

/// Central difference gradient of `f` at `x` for the given coordinates.
pub fn central_diff_at<F: Fn(&[f64]) -> f64>(
    f: F,
    x: &[f64],
    coords: &[usize],
    h: f64,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(coords.len());
    let mut xp = x.to_vec();
    for &i in coords {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Central difference gradient over every coordinate.
pub fn central_diff<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
    let coords: Vec<usize> = (0..x.len()).collect();
    central_diff_at(f, x, &coords, h)
}

/// Max over coordinates of |a - b| / max(|a|, |b|, floor).
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Default perturbation and relative-error floor used across the gradient
/// suite: h = 1e-5 at f64, errors measured against max(|a|,|n|,1e-2).
pub const FD_STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-2;

use super::{Tape, TensorId};
use crate::error::Result;

/// Compare the tape's analytic gradients of a scalarized op output against
/// the finite-difference oracle, for every input coordinate. Returns the
/// worst relative error.
///
/// The op output is reduced to a scalar through a fixed, non-uniform weight
/// pattern so direction-dependent errors cannot cancel.
pub fn check_grads<F>(inputs: &[(Vec<usize>, Vec<f64>)], build: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>,
{
    let run = |datasets: &[Vec<f64>]| -> Result<(f64, Option<Tape<f64>>, Vec<TensorId>, TensorId)> {
        let mut tape = Tape::new();
        let mut ids = Vec::with_capacity(inputs.len());
        for ((shape, _), data) in inputs.iter().zip(datasets) {
            ids.push(tape.leaf(data.clone(), shape)?);
        }
        let out = build(&mut tape, &ids)?;
        let w: Vec<f64> = (0..tape.numel(out)).map(|i| (0.7 * i as f64).sin() + 1.3).collect();
        let wid = tape.constant(w, &tape.shape(out).to_vec())?;
        let m = tape.mul(out, wid)?;
        let loss = tape.sum_all(m)?;
        let v = tape.scalar_value(loss);
        Ok((v, Some(tape), ids, loss))
    };

    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.clone()).collect();
    let (_, tape, ids, loss) = run(&base)?;
    let tape = tape.unwrap();
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    for (i, (_, data)) in inputs.iter().enumerate() {
        let zeros = vec![0.0; data.len()];
        let analytic = grads.get(ids[i]).unwrap_or(&zeros);
        let f = |x: &[f64]| -> f64 {
            let mut datasets = base.clone();
            datasets[i] = x.to_vec();
            run(&datasets).map(|(v, _, _, _)| v).expect("forward failed during fd")
        };
        let numeric = central_diff(f, data, FD_STEP);
        worst = worst.max(max_rel_err(analytic, &numeric, REL_FLOOR));
    }
    Ok(worst)
}
