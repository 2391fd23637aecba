//! Finite-difference oracles for verifying analytic gradients.

use crate::error::Result;

use super::tensor::Tensor;

/// Central-difference gradient of a scalar function, one bump per element.
pub fn central_diff(
    f: &mut dyn FnMut(&[Tensor]) -> Result<f64>,
    at: &[Tensor],
    h: f64,
) -> Result<Vec<Tensor>> {
    let mut grads = Vec::with_capacity(at.len());
    for (ti, t) in at.iter().enumerate() {
        let mut g = vec![0.0; t.numel()];
        for (e, slot) in g.iter_mut().enumerate() {
            let base = t.data()[e];
            let mut probe: Vec<Tensor> = at.to_vec();
            probe[ti] = t.with_element(e, base + h);
            let fp = f(&probe)?;
            probe[ti] = t.with_element(e, base - h);
            let fm = f(&probe)?;
            *slot = (fp - fm) / (2.0 * h);
        }
        grads.push(Tensor::new(t.shape().to_vec(), g)?);
    }
    Ok(grads)
}

/// Worst elementwise disagreement, or None if every element is within
/// `rel_tol` relative error (differences below `abs_floor` always pass).
pub fn worst_mismatch(
    analytic: &Tensor,
    numeric: &Tensor,
    rel_tol: f64,
    abs_floor: f64,
) -> Option<String> {
    assert_eq!(analytic.shape(), numeric.shape(), "oracle shape drift");
    let mut worst: Option<(usize, f64)> = None;
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let diff = (a - n).abs();
        if diff <= abs_floor {
            continue;
        }
        let rel = diff / a.abs().max(n.abs());
        if rel >= rel_tol && worst.map_or(true, |(_, w)| rel > w) {
            worst = Some((i, rel));
        }
    }
    worst.map(|(i, rel)| {
        format!(
            "element {i}: analytic {} vs numeric {} (rel err {rel:.3e})",
            analytic.data()[i],
            numeric.data()[i]
        )
    })
}
