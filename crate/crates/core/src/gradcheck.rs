//! Central finite-difference gradient verification, used by unit tests and
//! the acceptance suite.

use crate::rng::Rng;
use crate::tensor::Arr;

#[derive(Debug)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Compare analytic gradients against central finite differences of `loss`.
///
/// `loss` evaluates the scalar objective from scratch given the full set of
/// input arrays. `probes` coordinates are sampled per input (all coordinates
/// when the tensor is smaller). Relative error uses `max(|fd|, |analytic|)`
/// as denominator; entries where both are below `floor` are skipped.
pub fn check_gradients(
    mut loss: impl FnMut(&[Arr]) -> f64,
    inputs: &[Arr],
    analytic: &[Arr],
    probes: usize,
    rel_tol: f64,
    rng: &mut Rng,
) -> FdReport {
    assert_eq!(inputs.len(), analytic.len());
    let floor = 1e-7;
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let mut work: Vec<Arr> = inputs.to_vec();
    for (idx, input) in inputs.iter().enumerate() {
        let n = input.len();
        assert_eq!(analytic[idx].len(), n, "gradient size mismatch");
        let coords: Vec<usize> = if n <= probes {
            (0..n).collect()
        } else {
            rng.sample_indices(n, probes)
        };
        for &flat in &coords {
            let orig = input.as_slice().unwrap()[flat];
            let h = 1e-5 * orig.abs().max(1.0);

            work[idx].as_slice_mut().unwrap()[flat] = orig + h;
            let up = loss(&work);
            work[idx].as_slice_mut().unwrap()[flat] = orig - h;
            let down = loss(&work);
            work[idx].as_slice_mut().unwrap()[flat] = orig;

            let fd = (up - down) / (2.0 * h);
            let an = analytic[idx].as_slice().unwrap()[flat];
            let denom = fd.abs().max(an.abs());
            if denom < floor {
                continue;
            }
            let rel = (fd - an).abs() / denom;
            assert!(
                rel <= rel_tol,
                "gradient mismatch input {idx} coord {flat}: fd {fd:.8e} vs analytic {an:.8e} (rel {rel:.3e})"
            );
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    FdReport {
        checked,
        max_rel_err: max_rel,
    }
}
