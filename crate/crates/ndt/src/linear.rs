use crate::Scalar;

/// A fixed linear map applied to one sample at a time.
///
/// Used for image-space transformations that are linear in the pixel
/// values (resampling, affine color changes). The graph differentiates
/// through it with [`LinearOp::apply_transpose`], so the transpose must be
/// exact for gradients to be correct.
pub trait LinearOp<T: Scalar>: Send + Sync {
    /// Length of the flattened sample this map consumes and produces.
    fn dim(&self) -> usize;

    /// `y = A x`, overwriting `y`.
    fn apply(&self, x: &[T], y: &mut [T]);

    /// `x += A^T y`.
    fn apply_transpose(&self, y: &[T], x: &mut [T]);

    fn name(&self) -> &str {
        "linear"
    }
}
