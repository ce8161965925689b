use crate::error::{Error, Result};
use crate::linalg::Real;

/// Rotary tables: pair `i` of a head vector at position `m` is rotated by
/// `m · θ^(−2i/d)`.
#[derive(Clone, Debug)]
pub(crate) struct Rope<T> {
    half: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

fn angle(pos: usize, i: usize, dim: usize, theta: f64) -> f64 {
    pos as f64 * theta.powf(-2.0 * i as f64 / dim as f64)
}

impl<T: Real> Rope<T> {
    pub(crate) fn new(head_dim: usize, max_pos: usize, theta: f64) -> Result<Self> {
        if head_dim % 2 != 0 {
            return Err(Error::Config(format!("rotary embedding needs an even head dimension, got {head_dim}")));
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_pos * half);
        let mut sin = Vec::with_capacity(max_pos * half);
        for pos in 0..max_pos {
            for i in 0..half {
                let a = angle(pos, i, head_dim, theta);
                cos.push(T::from_f64(a.cos()));
                sin.push(T::from_f64(a.sin()));
            }
        }
        Ok(Rope { half, cos, sin })
    }

    pub(crate) fn rotate(&self, x: &mut [T], pos: usize) {
        self.apply(x, pos, false)
    }

    /// Transpose of [`Self::rotate`], used to pull gradients back.
    pub(crate) fn rotate_inverse(&self, x: &mut [T], pos: usize) {
        self.apply(x, pos, true)
    }

    fn apply(&self, x: &mut [T], pos: usize, inverse: bool) {
        let (c, s) = (&self.cos[pos * self.half..], &self.sin[pos * self.half..]);
        for i in 0..self.half {
            let (x0, x1) = (x[2 * i], x[2 * i + 1]);
            let sn = if inverse { -s[i] } else { s[i] };
            x[2 * i] = x0 * c[i] - x1 * sn;
            x[2 * i + 1] = x0 * sn + x1 * c[i];
        }
    }
}

/// Rotates one head vector; the dimension must be even.
pub fn rope_rotate(x: &[f64], position: usize, theta: f64) -> Result<Vec<f64>> {
    if x.len() % 2 != 0 {
        return Err(Error::Config(format!("rotary embedding needs an even dimension, got {}", x.len())));
    }
    let mut out = x.to_vec();
    for i in 0..x.len() / 2 {
        let a = angle(position, i, x.len(), theta);
        let (c, s) = (a.cos(), a.sin());
        out[2 * i] = x[2 * i] * c - x[2 * i + 1] * s;
        out[2 * i + 1] = x[2 * i] * s + x[2 * i + 1] * c;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn position_zero_is_identity() {
        let x = [0.3, -1.2, 2.0, 0.5];
        assert_eq!(rope_rotate(&x, 0, 1e5).unwrap(), x);
    }

    #[test]
    fn odd_dimension_rejected() {
        assert!(matches!(rope_rotate(&[1.0, 2.0, 3.0], 1, 1e5), Err(Error::Config(_))));
        assert!(Rope::<f32>::new(7, 4, 1e5).is_err());
    }

    #[test]
    fn table_matches_direct_rotation() {
        let rope = Rope::<f64>::new(8, 50, 1e5).unwrap();
        let x: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        let mut y = x.clone();
        rope.rotate(&mut y, 37);
        let want = rope_rotate(&x, 37, 1e5).unwrap();
        assert!(y.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
        rope.rotate_inverse(&mut y, 37);
        assert!(y.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    proptest! {
        #[test]
        fn preserves_norm(x in prop::collection::vec(-5.0f64..5.0, 8), m in 0usize..5000) {
            let y = rope_rotate(&x, m, 1e5).unwrap();
            prop_assert!((dot(&x, &x).sqrt() - dot(&y, &y).sqrt()).abs() < 1e-9);
        }

        #[test]
        fn scores_depend_on_relative_position(
            q in prop::collection::vec(-1.0f64..1.0, 16),
            k in prop::collection::vec(-1.0f64..1.0, 16),
            m in 0usize..1000, n in 0usize..1000, s in 0usize..1000,
        ) {
            let a = dot(&rope_rotate(&q, m, 1e5).unwrap(), &rope_rotate(&k, n, 1e5).unwrap());
            let b = dot(&rope_rotate(&q, m + s, 1e5).unwrap(), &rope_rotate(&k, n + s, 1e5).unwrap());
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}
