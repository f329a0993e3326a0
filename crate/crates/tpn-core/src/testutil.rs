//! Shared helpers for unit tests.
//!
//! The finite-difference oracle here recomputes losses through fresh forward
//! passes only; it shares no code with the tape's backward pass, so agreement
//! between the two is meaningful evidence.

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn fd_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Asserts two gradient vectors agree within `tol`, element by element.
pub fn assert_grads_close(got: &[f64], want: &[f64], tol: f64, label: &str) {
    assert_eq!(got.len(), want.len(), "{label}: length mismatch");
    for (i, (g, w)) in got.iter().zip(want.iter()).enumerate() {
        let err = (g - w).abs();
        assert!(
            err <= tol,
            "{label}: component {i} differs: autodiff {g}, finite-diff {w}, |err| {err:e}"
        );
    }
}

/// Deterministic pseudo-random values in (-1, 1) for test fixtures, so test
/// inputs do not depend on the crate's own RNG plumbing.
pub fn wiggle(n: usize, salt: u64) -> Vec<f64> {
    let mut state = salt.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1);
    (0..n)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect()
}
