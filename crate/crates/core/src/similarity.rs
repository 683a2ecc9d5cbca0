use crate::error::{Error, Result};
use crate::tensor::{dot, Scalar};

/// Cosine similarity of two equal-length vectors, clamped to `[-1, 1]`.
///
/// A zero-norm input is an error rather than a similarity of zero.
pub fn cosine_similarity<T: Scalar>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::shape(
            "cosine_similarity",
            format!("{} vs {}", u.len(), v.len()),
        ));
    }
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if !(nu > T::zero()) {
        return Err(Error::ZeroNorm("left operand".into()));
    }
    if !(nv > T::zero()) {
        return Err(Error::ZeroNorm("right operand".into()));
    }
    let s = dot(u, v) / (nu * nv);
    if !s.is_finite() {
        return Err(Error::NonFinite("cosine similarity".into()));
    }
    Ok(s.max(-T::one()).min(T::one()))
}

/// Scales a vector to unit length.
pub fn normalized<T: Scalar>(u: &[T]) -> Result<Vec<T>> {
    let n = dot(u, u).sqrt();
    if !(n > T::zero()) || !n.is_finite() {
        return Err(Error::ZeroNorm("normalize".into()));
    }
    Ok(u.iter().map(|&x| x / n).collect())
}
