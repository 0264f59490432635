//! Spatial flips. The four kinds form the Klein four-group under
//! composition, each element its own inverse; test-time augmentation relies
//! on the set being closed under composition.

use serde::{Deserialize, Serialize};

use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FlipKind {
    Identity,
    /// Left-right: reverses columns.
    Horizontal,
    /// Up-down: reverses rows.
    Vertical,
    Both,
}

impl FlipKind {
    pub const GROUP: [FlipKind; 4] = [
        FlipKind::Identity,
        FlipKind::Horizontal,
        FlipKind::Vertical,
        FlipKind::Both,
    ];

    pub fn from_bits(h: bool, v: bool) -> Self {
        match (h, v) {
            (false, false) => FlipKind::Identity,
            (true, false) => FlipKind::Horizontal,
            (false, true) => FlipKind::Vertical,
            (true, true) => FlipKind::Both,
        }
    }

    pub fn bits(self) -> (bool, bool) {
        match self {
            FlipKind::Identity => (false, false),
            FlipKind::Horizontal => (true, false),
            FlipKind::Vertical => (false, true),
            FlipKind::Both => (true, true),
        }
    }

    pub fn compose(self, other: Self) -> Self {
        let (h1, v1) = self.bits();
        let (h2, v2) = other.bits();
        Self::from_bits(h1 ^ h2, v1 ^ v2)
    }

    /// Every flip is an involution.
    pub fn inverse(self) -> Self {
        self
    }
}

/// Flip one row-major `h x w` plane of any copyable element.
pub fn flip_plane<T: Copy>(src: &[T], h: usize, w: usize, kind: FlipKind) -> Vec<T> {
    debug_assert_eq!(src.len(), h * w);
    let (fh, fv) = kind.bits();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        let sy = if fv { h - 1 - y } else { y };
        let row = &src[sy * w..(sy + 1) * w];
        if fh {
            out.extend(row.iter().rev().copied());
        } else {
            out.extend_from_slice(row);
        }
    }
    out
}

/// Flip the trailing two (spatial) dimensions of a tensor of rank >= 2.
pub fn flip_tensor<E: Element>(x: &Tensor<E>, kind: FlipKind) -> Tensor<E> {
    if kind == FlipKind::Identity {
        return x.clone();
    }
    let shape = x.shape().to_vec();
    assert!(
        shape.len() >= 2,
        "flip_tensor: expected rank >= 2, got {shape:?}"
    );
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let planes = x.len() / (h * w);
    let mut data = Vec::with_capacity(x.len());
    for p in 0..planes {
        data.extend(flip_plane(&x.data()[p * h * w..(p + 1) * h * w], h, w, kind));
    }
    Tensor::new(shape, data).expect("flip preserves shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn horizontal_reverses_columns() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let y = flip_tensor(&x, FlipKind::Horizontal);
        assert_eq!(y.data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn each_flip_is_an_involution() {
        let x = Tensor::from_fn(vec![2, 3, 4, 5], |i| i as f32 * 0.7 - 3.0);
        for kind in FlipKind::GROUP {
            let back = flip_tensor(&flip_tensor(&x, kind), kind);
            assert_eq!(back.data(), x.data());
        }
    }

    #[test]
    fn both_composes_horizontal_and_vertical() {
        let x = Tensor::from_fn(vec![1, 1, 3, 4], |i| i as f64);
        let both = flip_tensor(&x, FlipKind::Both);
        let composed = flip_tensor(&flip_tensor(&x, FlipKind::Horizontal), FlipKind::Vertical);
        assert_eq!(both.data(), composed.data());
        assert_eq!(
            FlipKind::Horizontal.compose(FlipKind::Vertical),
            FlipKind::Both
        );
    }

    #[test]
    fn group_table_is_klein_four() {
        use FlipKind::*;
        for a in FlipKind::GROUP {
            assert_eq!(a.compose(a), Identity);
            assert_eq!(a.compose(Identity), a);
            for b in FlipKind::GROUP {
                assert_eq!(a.compose(b), b.compose(a));
            }
        }
        assert_eq!(Horizontal.compose(Both), Vertical);
        assert_eq!(Vertical.compose(Both), Horizontal);
    }
}
