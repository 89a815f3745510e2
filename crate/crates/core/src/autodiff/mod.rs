//! Minimal reverse-mode differentiation over rank-2 `f64` tensors.
//!
//! Supplies the handful of operations the dense model and the gating layer
//! need: dense products, broadcasting arithmetic, relu/sigmoid, batch and
//! switchable normalization, softmax cross-entropy, plus the two
//! gating-specific nodes (straight-through masking and block scaling).

pub mod gradcheck;
pub mod layers;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_with, relative_error, GradCheckReport, Stencil, FD_STEP};
pub use layers::{batch_norm, dense_forward, switchable_norm};
pub use tape::{sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Rescales `grad` in place so its L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}
