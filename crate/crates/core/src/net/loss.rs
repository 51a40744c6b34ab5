//! Euclidean distance and the triplet margin loss with its analytic gradient.

use num_traits::Float;

use crate::{Error, Result};

fn check_dims(what: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            what,
            expected: a,
            got: b,
        });
    }
    Ok(())
}

/// `sqrt(Σ (u_i − v_i)²)`
pub fn pairwise_distance<T: Float>(u: &[T], v: &[T]) -> Result<T> {
    check_dims("embedding", u.len(), v.len())?;
    Ok(u.iter()
        .zip(v)
        .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b))
        .sqrt())
}

/// `max(D(a, p) − D(a, n) + margin, 0)`
pub fn triplet_loss<T: Float>(a: &[T], p: &[T], n: &[T], margin: T) -> Result<T> {
    check_dims("positive embedding", a.len(), p.len())?;
    check_dims("negative embedding", a.len(), n.len())?;
    let d_ap = pairwise_distance(a, p)?;
    let d_an = pairwise_distance(a, n)?;
    let v = d_ap - d_an + margin;
    // NaN must survive so callers can detect divergence
    Ok(if v.is_nan() || v > T::zero() { v } else { T::zero() })
}

/// Loss plus gradients with respect to anchor, positive and negative.
/// Inside the hinge's flat region all gradients are zero; a zero distance
/// contributes a zero gradient for its term.
pub struct TripletGrad<T> {
    pub loss: T,
    pub d_anchor: Vec<T>,
    pub d_positive: Vec<T>,
    pub d_negative: Vec<T>,
}

pub fn triplet_loss_grad<T: Float>(a: &[T], p: &[T], n: &[T], margin: T) -> Result<TripletGrad<T>> {
    let loss = triplet_loss(a, p, n, margin)?;
    let dim = a.len();
    let mut g = TripletGrad {
        loss,
        d_anchor: vec![T::zero(); dim],
        d_positive: vec![T::zero(); dim],
        d_negative: vec![T::zero(); dim],
    };
    if !(loss > T::zero()) {
        return Ok(g);
    }
    let d_ap = pairwise_distance(a, p)?;
    let d_an = pairwise_distance(a, n)?;
    for i in 0..dim {
        if d_ap > T::zero() {
            let u = (a[i] - p[i]) / d_ap;
            g.d_anchor[i] = g.d_anchor[i] + u;
            g.d_positive[i] = g.d_positive[i] - u;
        }
        if d_an > T::zero() {
            let u = (a[i] - n[i]) / d_an;
            g.d_anchor[i] = g.d_anchor[i] - u;
            g.d_negative[i] = g.d_negative[i] + u;
        }
    }
    Ok(g)
}

/// Mean triplet loss over a batch laid out as `[anchors; positives; negatives]`
/// (each block `b × dim`), with the gradient in the same layout.
pub fn batch_triplet_loss(embeddings: &[f32], b: usize, dim: usize, margin: f32) -> Result<(f64, Vec<f32>)> {
    if embeddings.len() != 3 * b * dim || b == 0 {
        return Err(Error::ShapeError(format!(
            "triplet batch of {b} needs {} values, got {}",
            3 * b * dim,
            embeddings.len()
        )));
    }
    let as_f64 = |s: &[f32]| s.iter().map(|&v| v as f64).collect::<Vec<_>>();
    let mut grad = vec![0.0f32; embeddings.len()];
    let mut total = 0.0f64;
    let scale = 1.0 / b as f64;
    for t in 0..b {
        let a = as_f64(&embeddings[t * dim..(t + 1) * dim]);
        let p = as_f64(&embeddings[(b + t) * dim..(b + t + 1) * dim]);
        let n = as_f64(&embeddings[(2 * b + t) * dim..(2 * b + t + 1) * dim]);
        let g = triplet_loss_grad(&a, &p, &n, margin as f64)?;
        total += g.loss;
        for i in 0..dim {
            grad[t * dim + i] = (g.d_anchor[i] * scale) as f32;
            grad[(b + t) * dim + i] = (g.d_positive[i] * scale) as f32;
            grad[(2 * b + t) * dim + i] = (g.d_negative[i] * scale) as f32;
        }
    }
    Ok((total * scale, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distance_examples() {
        assert_eq!(pairwise_distance(&[1.0f64, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(pairwise_distance(&[0.0f64, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert!(pairwise_distance(&[0.0f64], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn loss_examples() {
        // D(a,p) = 0, D(a,n) = 2, m = 1
        assert_eq!(triplet_loss(&[0.0f64], &[0.0], &[2.0], 1.0).unwrap(), 0.0);
        // D(a,p) = 1, D(a,n) = 1, m = 1
        assert_eq!(triplet_loss(&[0.0f64], &[1.0], &[-1.0], 1.0).unwrap(), 1.0);
    }

    #[test]
    fn batch_loss_is_mean_of_triplets() {
        // two triplets in 1-D: losses 0 and 1
        let e = [0.0f32, 0.0, 0.0, 1.0, 2.0, -1.0];
        let (loss, grad) = batch_triplet_loss(&e, 2, 1, 1.0).unwrap();
        assert!((loss - 0.5).abs() < 1e-12);
        assert_eq!(grad[0], 0.0);
        // second anchor: d/da (|a-p| - |a-n|) = -1 - 1 = -2, halved
        assert_eq!(grad[1], -1.0);
    }
}
