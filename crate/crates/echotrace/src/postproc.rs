//! Thinning of network activations into layer predictions.
//!
//! Snow layers run near-horizontal, so suppression happens within each
//! column: a pixel survives non-maximum suppression iff it is at least as
//! large as everything within `radius` rows above and below it, with
//! plateaus collapsing to their topmost pixel. Survivors keep their
//! grayscale value; binarization with a strict `>` threshold happens
//! separately, after the evaluation sweep has picked the dataset-wide
//! threshold.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NmsConfig {
    /// Vertical neighborhood half-width, in rows.
    pub radius: usize,
}

impl Default for NmsConfig {
    fn default() -> Self {
        NmsConfig { radius: 1 }
    }
}

impl NmsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.radius < 1 {
            return Err(Error::Config("nms radius must be >= 1".into()));
        }
        Ok(())
    }
}

/// Column-wise non-maximum suppression. Per column, a pixel is kept iff no
/// value within ±radius exceeds it and no equally-maximal pixel sits within
/// `radius` rows above it; all other pixels become 0.
pub fn nms_vertical<T: Scalar>(activation: &Grid<T>, cfg: NmsConfig) -> Result<Grid<T>> {
    cfg.validate()?;
    let s = activation.shape();
    if s.channels != 1 {
        return Err(Error::shape(
            "nms_vertical",
            format!("expected single-channel input, got {} channels", s.channels),
        ));
    }
    let mut out = Grid::zeros(s);
    let mut candidate = vec![false; s.rows];
    for b in 0..s.batch {
        for c in 0..s.cols {
            for r in 0..s.rows {
                let lo = r.saturating_sub(cfg.radius);
                let hi = (r + cfg.radius).min(s.rows - 1);
                let v = activation.at(b, 0, r, c);
                candidate[r] = (lo..=hi).all(|k| activation.at(b, 0, k, c) <= v);
            }
            let mut last_candidate: Option<usize> = None;
            for r in 0..s.rows {
                if candidate[r] {
                    let clear = match last_candidate {
                        Some(prev) => r - prev > cfg.radius,
                        None => true,
                    };
                    if clear {
                        out.set(b, 0, r, c, activation.at(b, 0, r, c));
                    }
                    last_candidate = Some(r);
                }
            }
        }
    }
    Ok(out)
}

/// 0/1 mask of pixels strictly above the threshold. Values equal to the
/// threshold count as negative, which keeps threshold sweeps reproducible.
pub fn binarize<T: Scalar>(activation: &Grid<T>, threshold: T) -> Grid<T> {
    activation.map(|v| if v > threshold { T::one() } else { T::zero() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Shape;
    use proptest::prelude::*;

    fn column(values: &[f64]) -> Grid<f64> {
        Grid::from_vec(Shape::new(1, 1, values.len(), 1), values.to_vec()).unwrap()
    }

    fn col_values(g: &Grid<f64>) -> Vec<f64> {
        g.data().to_vec()
    }

    #[test]
    fn keeps_the_local_peak_and_zeroes_the_rest() {
        let out = nms_vertical(&column(&[0.1, 0.5, 0.3]), NmsConfig::default()).unwrap();
        assert_eq!(col_values(&out), [0.0, 0.5, 0.0]);
    }

    #[test]
    fn monotone_column_keeps_only_the_extremum() {
        let rising = column(&[0.1, 0.2, 0.3, 0.4, 0.9]);
        let out = nms_vertical(&rising, NmsConfig::default()).unwrap();
        assert_eq!(col_values(&out), [0.0, 0.0, 0.0, 0.0, 0.9]);
        let falling = column(&[0.9, 0.4, 0.3, 0.2, 0.1]);
        let out = nms_vertical(&falling, NmsConfig::default()).unwrap();
        assert_eq!(col_values(&out), [0.9, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn plateau_collapses_to_its_topmost_pixel() {
        let constant = column(&[0.7; 6]);
        let out = nms_vertical(&constant, NmsConfig::default()).unwrap();
        assert_eq!(col_values(&out), [0.7, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn multi_channel_input_is_rejected() {
        let g = Grid::<f64>::zeros(Shape::new(1, 2, 4, 4));
        assert!(nms_vertical(&g, NmsConfig::default()).is_err());
        assert!(nms_vertical(&column(&[0.1]), NmsConfig { radius: 0 }).is_err());
    }

    #[test]
    fn binarize_uses_a_strict_threshold() {
        let g = column(&[0.4, 0.5, 0.6]);
        assert_eq!(col_values(&binarize(&g, 0.5)), [0.0, 0.0, 1.0]);
        assert_eq!(col_values(&binarize(&g, 0.0)), [1.0, 1.0, 1.0]);
        assert_eq!(col_values(&binarize(&g, 1.0)), [0.0, 0.0, 0.0]);
        let with_zero = column(&[0.0, 0.2]);
        assert_eq!(col_values(&binarize(&with_zero, 0.0)), [0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn suppression_is_idempotent_and_never_raises_values(
            values in proptest::collection::vec(0.0f64..=1.0, 1..40),
            radius in 1usize..4,
        ) {
            let g = column(&values);
            let cfg = NmsConfig { radius };
            let once = nms_vertical(&g, cfg).unwrap();
            let twice = nms_vertical(&once, cfg).unwrap();
            prop_assert_eq!(once.data(), twice.data());
            for (orig, kept) in g.data().iter().zip(once.data()) {
                prop_assert!(*kept == 0.0 || kept == orig);
                prop_assert!(kept <= orig || *kept == 0.0);
            }
        }

        #[test]
        fn survivors_are_spaced_farther_than_the_radius(
            values in proptest::collection::vec(0.01f64..=1.0, 2..40),
            radius in 1usize..4,
        ) {
            let g = column(&values);
            let out = nms_vertical(&g, NmsConfig { radius }).unwrap();
            let survivors: Vec<usize> = out
                .data()
                .iter()
                .enumerate()
                .filter(|(_, &v)| v > 0.0)
                .map(|(i, _)| i)
                .collect();
            prop_assert!(!survivors.is_empty(), "positive column keeps its max");
            for w in survivors.windows(2) {
                prop_assert!(w[1] - w[0] > radius);
            }
        }
    }
}
