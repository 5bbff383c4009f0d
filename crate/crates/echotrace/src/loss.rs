//! Class-balanced binary cross entropy with deep-supervision totals.
//!
//! Labels are heavily skewed toward background, so each image gets its own
//! balance: the positive-pixel fraction (scaled by `lambda`) weights the
//! background terms and the negative fraction weights the foreground terms.
//! Losses are summed over an image's pixels and averaged across the batch;
//! the deep-supervision total adds one such term per active output map.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scalar::Scalar;

/// Clamp bound keeping `log` finite at saturated activations.
pub const BCE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassBalance {
    /// Weight of background (y=0) terms: `lambda * pos / (pos + neg)`.
    pub alpha: f64,
    /// Weight of foreground (y=1) terms: `neg / (pos + neg)`.
    pub beta: f64,
    pub lambda: f64,
    pub pos_count: u64,
    pub neg_count: u64,
}

fn balance_from_counts(pos: u64, neg: u64, lambda: f64) -> Result<ClassBalance> {
    let total = pos + neg;
    if total == 0 {
        return Err(Error::Domain("class balance of an empty label grid".into()));
    }
    Ok(ClassBalance {
        alpha: lambda * pos as f64 / total as f64,
        beta: neg as f64 / total as f64,
        lambda,
        pos_count: pos,
        neg_count: neg,
    })
}

fn count_plane<T: Scalar>(data: &[T]) -> Result<(u64, u64)> {
    let (mut pos, mut neg) = (0u64, 0u64);
    for &y in data {
        if y == T::one() {
            pos += 1;
        } else if y == T::zero() {
            neg += 1;
        } else {
            return Err(Error::Domain(format!(
                "labels must be exactly 0 or 1, found {y}"
            )));
        }
    }
    Ok((pos, neg))
}

/// Balance of a single-image label grid (batch must be 1).
pub fn class_balance<T: Scalar>(labels: &Grid<T>, lambda: f64) -> Result<ClassBalance> {
    let s = labels.shape();
    if s.batch != 1 {
        return Err(Error::Domain(format!(
            "class_balance is per image; got batch {}",
            s.batch
        )));
    }
    let (pos, neg) = count_plane(labels.data())?;
    balance_from_counts(pos, neg, lambda)
}

/// Balance of one batch item within a larger label grid.
pub fn class_balance_of_planes<T: Scalar>(
    labels: &Grid<T>,
    batch: usize,
    lambda: f64,
) -> Result<ClassBalance> {
    let s = labels.shape();
    let (mut pos, mut neg) = (0u64, 0u64);
    for c in 0..s.channels {
        let (p, n) = count_plane(labels.plane(batch, c))?;
        pos += p;
        neg += n;
    }
    balance_from_counts(pos, neg, lambda)
}

/// One pixel's loss and its derivative w.r.t. the activation, evaluated at
/// the clamped activation.
pub fn bce_term<T: Scalar>(x: T, y: T, bal: &ClassBalance) -> Result<(T, T)> {
    let eps = T::from_f64(BCE_EPS);
    // A NaN activation must stay NaN: clamping it to eps would hide a
    // poisoned forward pass behind a finite loss.
    let xc = if x.is_nan() { x } else { x.max(eps).min(T::one() - eps) };
    if y == T::one() {
        let beta = T::from_f64(bal.beta);
        Ok((-beta * xc.ln(), -beta / xc))
    } else if y == T::zero() {
        let alpha = T::from_f64(bal.alpha);
        Ok((-alpha * (T::one() - xc).ln(), alpha / (T::one() - xc)))
    } else {
        Err(Error::Domain(format!(
            "labels must be exactly 0 or 1, found {y}"
        )))
    }
}

/// Pixel-summed balanced BCE of one activation map against its labels,
/// with the analytic gradient w.r.t. the activations.
pub fn balanced_bce<T: Scalar>(
    activation: &Grid<T>,
    labels: &Grid<T>,
    bal: &ClassBalance,
) -> Result<(T, Grid<T>)> {
    if activation.shape() != labels.shape() {
        return Err(Error::shape(
            "balanced_bce",
            format!(
                "activation shape {} != labels shape {}",
                activation.shape(),
                labels.shape()
            ),
        ));
    }
    let mut total = T::zero();
    let mut grad = Grid::zeros(activation.shape());
    for ((&x, &y), g) in activation
        .data()
        .iter()
        .zip(labels.data())
        .zip(grad.data_mut().iter_mut())
    {
        let (l, d) = bce_term(x, y, bal)?;
        total += l;
        *g = d;
    }
    Ok((total, grad))
}

/// Deep-supervision total: per-image balanced BCE of every map (the active
/// side outputs plus the fused map), pixel-summed, averaged over the batch,
/// summed over maps.
pub fn total_loss<T: Scalar>(maps: &[&Grid<T>], labels: &Grid<T>, lambda: f64) -> Result<T> {
    if maps.is_empty() {
        return Err(Error::Domain("total_loss needs at least one map".into()));
    }
    let s = labels.shape();
    let inv_batch = T::from_f64(1.0 / s.batch as f64);
    let mut total = T::zero();
    for map in maps {
        if map.shape() != s {
            return Err(Error::shape(
                "total_loss",
                format!("map shape {} != labels shape {s}", map.shape()),
            ));
        }
        for b in 0..s.batch {
            let bal = class_balance_of_planes(labels, b, lambda)?;
            for c in 0..s.channels {
                let act = map.plane(b, c);
                let lab = labels.plane(b, c);
                let mut img = T::zero();
                for (&x, &y) in act.iter().zip(lab) {
                    img += bce_term(x, y, &bal)?.0;
                }
                total += img * inv_batch;
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels_with_counts(pos: usize, neg: usize) -> Grid<f64> {
        let mut data = vec![1.0; pos];
        data.extend(std::iter::repeat(0.0).take(neg));
        Grid::from_vec(Shape::new(1, 1, 1, pos + neg), data).unwrap()
    }

    #[test]
    fn balance_matches_hand_counts() {
        let bal = class_balance(&labels_with_counts(10, 90), 1.1).unwrap();
        assert!((bal.alpha - 0.11).abs() < 1e-15);
        assert!((bal.beta - 0.9).abs() < 1e-15);
        assert_eq!((bal.pos_count, bal.neg_count), (10, 90));
    }

    #[test]
    fn balance_edge_cases() {
        let all_neg = class_balance(&labels_with_counts(0, 5), 1.1).unwrap();
        assert_eq!(all_neg.alpha, 0.0);
        assert_eq!(all_neg.beta, 1.0);
        let zero_lambda = class_balance(&labels_with_counts(3, 5), 0.0).unwrap();
        assert_eq!(zero_lambda.alpha, 0.0);
        let empty = Grid::<f64>::zeros(Shape::new(1, 1, 0, 4));
        assert!(class_balance(&empty, 1.0).is_err());
        let fractional =
            Grid::from_vec(Shape::new(1, 1, 1, 2), vec![0.5, 1.0]).unwrap();
        assert!(class_balance(&fractional, 1.0).is_err());
    }

    #[test]
    fn alpha_beta_sum_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let pos = rng.gen_range(0..50usize);
            let neg = rng.gen_range(1..50usize);
            let lambda = rng.gen_range(0.0..3.0);
            let bal = class_balance(&labels_with_counts(pos, neg), lambda).unwrap();
            let n = (pos + neg) as f64;
            let want = (lambda * pos as f64 + neg as f64) / n;
            assert!((bal.alpha + bal.beta - want).abs() < 1e-12);
            if lambda == 1.0 {
                assert!((bal.alpha + bal.beta - 1.0).abs() < 1e-12);
            }
        }
        let bal = class_balance(&labels_with_counts(7, 13), 1.0).unwrap();
        assert!((bal.alpha + bal.beta - 1.0).abs() < 1e-15);
    }

    #[test]
    fn half_activation_positive_pixel_costs_beta_ln_two() {
        let bal = class_balance(&labels_with_counts(10, 90), 1.1).unwrap();
        let (l, _) = bce_term(0.5, 1.0, &bal).unwrap();
        assert!((l - 0.9 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l - 0.623832).abs() < 1e-6);
    }

    #[test]
    fn perfect_prediction_loss_vanishes() {
        let labels = labels_with_counts(2, 2);
        let bal = class_balance(&labels, 1.1).unwrap();
        let (l, _) = balanced_bce(&labels.clone(), &labels, &bal).unwrap();
        assert!(l.abs() < 1e-10, "{l}");
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shape = Shape::new(1, 1, 4, 4);
        let labels = Grid::from_vec(
            shape,
            (0..16).map(|_| f64::from(rng.gen_range(0..=1))).collect(),
        )
        .unwrap();
        let act = Grid::from_vec(shape, (0..16).map(|_| rng.gen_range(0.05..0.95)).collect())
            .unwrap();
        let bal = class_balance(&labels, 1.1).unwrap();
        let (_, grad) = balanced_bce(&act, &labels, &bal).unwrap();
        let eps = 1e-7;
        for i in 0..16 {
            let mut plus = act.clone();
            plus.data_mut()[i] += eps;
            let mut minus = act.clone();
            minus.data_mut()[i] -= eps;
            let lp = balanced_bce(&plus, &labels, &bal).unwrap().0;
            let lm = balanced_bce(&minus, &labels, &bal).unwrap().0;
            let fd = (lp - lm) / (2.0 * eps);
            assert!((grad.data()[i] - fd).abs() <= 1e-8 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn lambda_scales_only_background_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let shape = Shape::new(1, 1, 4, 8);
        let labels = Grid::from_vec(
            shape,
            (0..32).map(|_| f64::from(rng.gen_range(0..=1))).collect(),
        )
        .unwrap();
        let act = Grid::from_vec(shape, (0..32).map(|_| rng.gen_range(0.05..0.95)).collect())
            .unwrap();
        let l1 = total_loss(&[&act], &labels, 1.0).unwrap();
        let l2 = total_loss(&[&act], &labels, 2.0).unwrap();
        let bal1 = class_balance(&labels, 1.0).unwrap();
        let bg_nll: f64 = act
            .data()
            .iter()
            .zip(labels.data())
            .filter(|(_, &y)| y == 0.0)
            .map(|(&x, _)| -(1.0 - x).ln())
            .sum();
        assert!((l2 - l1 - bal1.alpha * bg_nll).abs() < 1e-10);
    }

    #[test]
    fn identical_maps_add_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let shape = Shape::new(2, 1, 4, 4);
        let labels = Grid::from_vec(
            shape,
            (0..32).map(|_| f64::from(rng.gen_range(0..=1))).collect(),
        )
        .unwrap();
        let act = Grid::from_vec(shape, (0..32).map(|_| rng.gen_range(0.05..0.95)).collect())
            .unwrap();
        let one = total_loss(&[&act], &labels, 1.1).unwrap();
        let five = total_loss(&[&act, &act, &act, &act, &act], &labels, 1.1).unwrap();
        assert!((five - 5.0 * one).abs() < 1e-9);
    }

    #[test]
    fn coin_flip_start_costs_half_ln_two_per_pixel_per_map() {
        // All-0.5 activations against half-and-half labels at lambda=1.
        let shape = Shape::new(1, 1, 2, 8);
        let mut data = vec![1.0; 8];
        data.extend(vec![0.0; 8]);
        let labels = Grid::from_vec(shape, data).unwrap();
        let act = Grid::filled(shape, 0.5);
        let l = total_loss(&[&act], &labels, 1.0).unwrap();
        let want = 16.0 * 0.5 * std::f64::consts::LN_2;
        assert!((l - want).abs() < 1e-12);
    }
}
