//! Training objectives over descriptor distances.
//!
//! The triplet losses see three distances per example: one positive
//! `Δ(p1,p2)` and two negatives `Δ(p1,n)`, `Δ(p2,n)`. The soft-PN objective
//! squares a two-way softmax between the positive distance and the *smaller*
//! negative distance, so the nearest distractor always receives gradient —
//! a per-triplet stand-in for hard negative mining. The softmax-ratio
//! baseline uses the first negative unconditionally, and the hinge embedding
//! baseline works on labeled pairs.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// The three distances of one training triplet.
#[derive(Clone, Copy, Debug)]
pub struct TripletDistances<T = f32> {
    /// Δ(p1, p2)
    pub pos: T,
    /// Δ(p1, n)
    pub neg1: T,
    /// Δ(p2, n)
    pub neg2: T,
}

impl<T: Scalar> TripletDistances<T> {
    pub fn new(pos: T, neg1: T, neg2: T) -> Result<Self> {
        let t = TripletDistances { pos, neg1, neg2 };
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [("pos", self.pos), ("neg1", self.neg1), ("neg2", self.neg2)] {
            if !v.is_finite() {
                return Err(Error::NonFinite { op: "triplet loss" });
            }
            if v < T::zero() {
                return Err(Error::invalid(
                    "triplet loss",
                    format!("distance {name} must be non-negative, got {v}"),
                ));
            }
        }
        Ok(())
    }

    /// The soft negative: the smaller of the two negative distances.
    /// Ties resolve to `neg1` so gradient routing is reproducible.
    pub fn soft_negative(&self) -> (T, NegativeBranch) {
        if self.neg1 <= self.neg2 {
            (self.neg1, NegativeBranch::First)
        } else {
            (self.neg2, NegativeBranch::Second)
        }
    }
}

/// Which negative distance was selected as the soft negative.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NegativeBranch {
    First,
    Second,
}

/// Label of a training or evaluation pair: +1 for two views of the same 3D
/// point, −1 otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairLabel {
    Positive,
    Negative,
}

impl PairLabel {
    pub fn sign(self) -> i32 {
        match self {
            PairLabel::Positive => 1,
            PairLabel::Negative => -1,
        }
    }

    pub fn from_sign(v: i64) -> Result<Self> {
        match v {
            1 => Ok(PairLabel::Positive),
            -1 => Ok(PairLabel::Negative),
            other => Err(Error::invalid(
                "pair label",
                format!("label must be +1 or -1, got {other}"),
            )),
        }
    }

    pub fn is_positive(self) -> bool {
        matches!(self, PairLabel::Positive)
    }
}

/// Margin for the hinge embedding baseline.
#[derive(Clone, Copy, Debug)]
pub struct HingeConfig<T = f32> {
    pub margin: T,
}

impl<T: Scalar> HingeConfig<T> {
    pub fn new(margin: T) -> Result<Self> {
        if !(margin > T::zero()) || !margin.is_finite() {
            return Err(Error::invalid(
                "hinge loss",
                format!("margin must be positive and finite, got {margin}"),
            ));
        }
        Ok(HingeConfig { margin })
    }
}

impl Default for HingeConfig<f32> {
    /// Descriptors live in (−1,1)^D, so 2.0 sits mid-range of attainable
    /// distances.
    fn default() -> Self {
        HingeConfig { margin: 2.0 }
    }
}

/// The two squared softmax terms over `(d_pos, d_star)`:
/// `(e^p / (e^s + e^p))²` and `(e^s / (e^s + e^p) − 1)²`.
///
/// They are analytically equal; both are evaluated anyway because the loss
/// is defined as their sum, and their agreement doubles as a numerical
/// self-check. The softmax is shifted by the max so distances beyond ~80
/// cannot overflow.
pub fn soft_pair_terms<T: Scalar>(d_pos: T, d_star: T) -> (T, T) {
    let m = d_pos.max(d_star);
    let ep = (d_pos - m).exp();
    let es = (d_star - m).exp();
    let sum = ep + es;
    let s_pos = ep / sum;
    let s_neg = es / sum;
    (s_pos * s_pos, (s_neg - T::one()) * (s_neg - T::one()))
}

/// Squared-softmax loss over a positive distance and a chosen negative
/// distance: the sum of both terms of [`soft_pair_terms`]. Ranges over
/// `[0, 2)`; 0.5 exactly when the two distances agree.
pub fn soft_pair_loss<T: Scalar>(d_pos: T, d_star: T) -> T {
    let (t1, t2) = soft_pair_terms(d_pos, d_star);
    t1 + t2
}

/// `d(loss)/d(d_pos)` of [`soft_pair_loss`]; the gradient with respect to
/// the negative argument is its negation.
fn soft_pair_grad<T: Scalar>(d_pos: T, d_star: T) -> T {
    let m = d_pos.max(d_star);
    let ep = (d_pos - m).exp();
    let es = (d_star - m).exp();
    let sum = ep + es;
    let s_pos = ep / sum;
    let s_neg = es / sum;
    // d(s_pos)/d(d_pos) = s_pos·s_neg, d(s_neg)/d(d_pos) = −s_pos·s_neg.
    let two = T::from_f64(2.0);
    two * s_pos * (s_pos * s_neg) + two * (s_neg - T::one()) * (-(s_pos * s_neg))
}

/// Triplet loss over the positive distance and the soft negative
/// `Δ* = min(Δ(p1,n), Δ(p2,n))`.
pub fn softpn_loss<T: Scalar>(t: &TripletDistances<T>) -> Result<T> {
    t.validate()?;
    let (d_star, _) = t.soft_negative();
    Ok(soft_pair_loss(t.pos, d_star))
}

/// Gradients with respect to `(pos, neg1, neg2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripletGrads<T = f32> {
    pub pos: T,
    pub neg1: T,
    pub neg2: T,
}

/// Subgradient of [`softpn_loss`]. Only the argmin negative receives
/// gradient; the other branch gets exactly zero. Ties route to `neg1`.
pub fn softpn_backward<T: Scalar>(t: &TripletDistances<T>) -> Result<TripletGrads<T>> {
    t.validate()?;
    let (d_star, branch) = t.soft_negative();
    let g = soft_pair_grad(t.pos, d_star);
    let (neg1, neg2) = match branch {
        NegativeBranch::First => (-g, T::zero()),
        NegativeBranch::Second => (T::zero(), -g),
    };
    Ok(TripletGrads { pos: g, neg1, neg2 })
}

/// Baseline: same squared-softmax objective but always over `Δ(p1,n)`,
/// never consulting the second negative distance.
pub fn softmax_ratio_loss<T: Scalar>(t: &TripletDistances<T>) -> Result<T> {
    t.validate()?;
    Ok(soft_pair_loss(t.pos, t.neg1))
}

pub fn softmax_ratio_backward<T: Scalar>(t: &TripletDistances<T>) -> Result<TripletGrads<T>> {
    t.validate()?;
    let g = soft_pair_grad(t.pos, t.neg1);
    Ok(TripletGrads {
        pos: g,
        neg1: -g,
        neg2: T::zero(),
    })
}

/// Pairwise hinge embedding: positives are penalized by their distance,
/// negatives by their shortfall against the margin.
pub fn hinge_embedding_loss<T: Scalar>(
    distance: T,
    label: PairLabel,
    cfg: &HingeConfig<T>,
) -> Result<T> {
    if !distance.is_finite() || distance < T::zero() {
        return Err(Error::invalid(
            "hinge loss",
            format!("distance must be finite and non-negative, got {distance}"),
        ));
    }
    Ok(match label {
        PairLabel::Positive => distance,
        PairLabel::Negative => (cfg.margin - distance).max(T::zero()),
    })
}

/// `d(loss)/d(distance)`. Saturated negatives (distance at or beyond the
/// margin) contribute nothing.
pub fn hinge_embedding_backward<T: Scalar>(
    distance: T,
    label: PairLabel,
    cfg: &HingeConfig<T>,
) -> Result<T> {
    if !distance.is_finite() || distance < T::zero() {
        return Err(Error::invalid(
            "hinge loss",
            format!("distance must be finite and non-negative, got {distance}"),
        ));
    }
    Ok(match label {
        PairLabel::Positive => T::one(),
        PairLabel::Negative => {
            if distance < cfg.margin {
                -T::one()
            } else {
                T::zero()
            }
        }
    })
}

/// Arithmetic mean over per-example losses. The mean (rather than the sum)
/// keeps the learning rate independent of batch size.
pub fn batch_loss<T: Scalar>(per_example: &[T]) -> Result<T> {
    if per_example.is_empty() {
        return Err(Error::invalid("batch loss", "empty batch"));
    }
    let mut acc = T::zero();
    for &v in per_example {
        acc = acc + v;
    }
    Ok(acc / T::from_f64(per_example.len() as f64))
}

/// Which objective a training run optimizes, selected by name in the
/// trainer config.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    SoftPn,
    SoftmaxRatio,
    Hinge,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::SoftPn => "softpn",
            LossKind::SoftmaxRatio => "softmax-ratio",
            LossKind::Hinge => "hinge",
        }
    }

    /// Pair-based losses consume labeled pairs; triplet losses consume
    /// triplets.
    pub fn uses_pairs(self) -> bool {
        matches!(self, LossKind::Hinge)
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softpn" => Ok(LossKind::SoftPn),
            "softmax-ratio" => Ok(LossKind::SoftmaxRatio),
            "hinge" => Ok(LossKind::Hinge),
            other => Err(Error::invalid(
                "loss",
                format!("unknown loss {other:?}; expected softpn, softmax-ratio or hinge"),
            )),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t64(pos: f64, neg1: f64, neg2: f64) -> TripletDistances<f64> {
        TripletDistances::new(pos, neg1, neg2).unwrap()
    }

    #[test]
    fn equal_distances_give_half() {
        for d in [0.0, 0.3, 1.7, 50.0] {
            let loss = softpn_loss(&t64(d, d, d)).unwrap();
            assert!((loss - 0.5).abs() < 1e-12, "loss {loss}");
        }
    }

    #[test]
    fn known_value_from_direct_evaluation() {
        // pos=1, negatives {3,2}: Δ*=2, softmax gap of 1.
        let loss = softpn_loss(&t64(1.0, 3.0, 2.0)).unwrap();
        let e = std::f64::consts::E;
        // Direct evaluation of the written two-term form.
        let s_pos = e / (e * e + e);
        let s_neg = (e * e) / (e * e + e);
        let direct = s_pos * s_pos + (s_neg - 1.0) * (s_neg - 1.0);
        assert!((loss - direct).abs() < 1e-12, "loss {loss}, direct {direct}");
        assert!((loss - 0.1446).abs() < 1e-4);
    }

    #[test]
    fn softmax_limits() {
        // Soft negative far above the positive: loss vanishes.
        let lo = softpn_loss(&t64(1.0, 200.0, 300.0)).unwrap();
        assert!(lo < 1e-12, "loss {lo}");
        // Positive far above the soft negative: loss approaches 2.
        let hi = softpn_loss(&t64(300.0, 1.0, 2.0)).unwrap();
        assert!((hi - 2.0).abs() < 1e-12, "loss {hi}");
        // No overflow even at distances where naive e^Δ would blow up f32.
        let loss32 = softpn_loss(&TripletDistances::new(90.0f32, 85.0, 88.0).unwrap()).unwrap();
        assert!(loss32.is_finite());
    }

    #[test]
    fn unselected_negative_gets_zero_gradient() {
        let g = softpn_backward(&t64(1.0, 1.5, 2.5)).unwrap();
        assert_eq!(g.neg2, 0.0);
        assert!(g.pos > 0.0);
        assert!(g.neg1 < 0.0);

        let g = softpn_backward(&t64(1.0, 2.5, 1.5)).unwrap();
        assert_eq!(g.neg1, 0.0);
        assert!(g.neg2 < 0.0);

        // Tie routes to the first branch.
        let g = softpn_backward(&t64(1.0, 1.5, 1.5)).unwrap();
        assert_eq!(g.neg2, 0.0);
        assert!(g.neg1 < 0.0);
    }

    #[test]
    fn gradient_signs_hold_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let t = t64(
                rng.gen_range(0.0..10.0),
                rng.gen_range(0.0..10.0),
                rng.gen_range(0.0..10.0),
            );
            let g = softpn_backward(&t).unwrap();
            assert!(g.pos > 0.0);
            assert!(g.neg1 + g.neg2 < 0.0);
        }
    }

    #[test]
    fn softpn_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut checked = 0;
        while checked < 200 {
            let (p, n1, n2): (f64, f64, f64) = (
                rng.gen_range(0.1..6.0),
                rng.gen_range(0.1..6.0),
                rng.gen_range(0.1..6.0),
            );
            // Stay clear of the argmin tie, where the loss is not smooth.
            if (n1 - n2).abs() < 1e-2 {
                continue;
            }
            let at = Tensor::from_vec(&[3], vec![p, n1, n2]).unwrap();
            let err = grad_check(
                |x| {
                    let t = TripletDistances::new(x.data()[0], x.data()[1], x.data()[2])?;
                    let g = softpn_backward(&t)?;
                    Ok((
                        softpn_loss(&t)?,
                        Tensor::from_vec(&[3], vec![g.pos, g.neg1, g.neg2])?,
                    ))
                },
                &at,
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-4, "rel error {err} at ({p},{n1},{n2})");
            checked += 1;
        }
    }

    #[test]
    fn softmax_ratio_ignores_second_negative() {
        let a = softmax_ratio_loss(&t64(1.0, 2.0, 0.1)).unwrap();
        let b = softmax_ratio_loss(&t64(1.0, 2.0, 99.0)).unwrap();
        assert_eq!(a, b);
        assert!((softmax_ratio_loss(&t64(1.3, 1.3, 77.0)).unwrap() - 0.5).abs() < 1e-12);
        let g = softmax_ratio_backward(&t64(1.0, 2.0, 0.1)).unwrap();
        assert_eq!(g.neg2, 0.0);
    }

    #[test]
    fn softmax_ratio_agrees_with_softpn_when_first_negative_is_min() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..500 {
            let n1 = rng.gen_range(0.0..5.0);
            let n2 = rng.gen_range(n1..6.0);
            let t = t64(rng.gen_range(0.0..5.0), n1, n2);
            assert_eq!(softmax_ratio_loss(&t).unwrap(), softpn_loss(&t).unwrap());
        }
    }

    #[test]
    fn term_equality_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..1000 {
            let (p, s) = (rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0));
            let (t1, t2) = soft_pair_terms::<f64>(p, s);
            assert!((t1 - t2).abs() < 1e-6);
            let loss = t1 + t2;
            assert!((0.0..2.0).contains(&loss));
        }
    }

    #[test]
    fn negative_swap_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..1000 {
            let (p, n1, n2) = (
                rng.gen_range(0.0..8.0),
                rng.gen_range(0.0..8.0),
                rng.gen_range(0.0..8.0),
            );
            assert_eq!(
                softpn_loss(&t64(p, n1, n2)).unwrap(),
                softpn_loss(&t64(p, n2, n1)).unwrap()
            );
        }
    }

    #[test]
    fn shift_invariance_at_two_argument_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..1000 {
            let (p, s, c) = (
                rng.gen_range(0.0..8.0),
                rng.gen_range(0.0..8.0),
                rng.gen_range(0.0..40.0),
            );
            // The loss depends on the gap only; the shift survives up to
            // the rounding of p+c and s+c themselves.
            let shifted = soft_pair_loss::<f64>(p + c, s + c);
            let base = soft_pair_loss::<f64>(p, s);
            assert!((shifted - base).abs() < 1e-12, "{shifted} vs {base}");
        }
    }

    #[test]
    fn hinge_branches() {
        let cfg = HingeConfig::new(2.0f64).unwrap();
        assert_eq!(
            hinge_embedding_loss(0.7, PairLabel::Positive, &cfg).unwrap(),
            0.7
        );
        // Saturated negative: zero loss, zero gradient.
        assert_eq!(
            hinge_embedding_loss(2.1, PairLabel::Negative, &cfg).unwrap(),
            0.0
        );
        assert_eq!(
            hinge_embedding_backward(2.1, PairLabel::Negative, &cfg).unwrap(),
            0.0
        );
        assert_eq!(
            hinge_embedding_loss(1.0, PairLabel::Negative, &cfg).unwrap(),
            1.0
        );
        assert!(hinge_embedding_loss(-0.1, PairLabel::Positive, &cfg).is_err());
        assert!(HingeConfig::new(0.0f64).is_err());
    }

    #[test]
    fn hinge_backward_matches_finite_differences_away_from_kink() {
        let cfg = HingeConfig::new(2.0f64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let d = rng.gen_range(0.1..4.0f64);
            if (d - cfg.margin).abs() < 1e-2 {
                continue;
            }
            for label in [PairLabel::Positive, PairLabel::Negative] {
                let at = Tensor::from_vec(&[1], vec![d]).unwrap();
                let err = grad_check(
                    |x| {
                        let v = hinge_embedding_loss(x.data()[0], label, &cfg)?;
                        let g = hinge_embedding_backward(x.data()[0], label, &cfg)?;
                        Ok((v, Tensor::from_vec(&[1], vec![g])?))
                    },
                    &at,
                    1e-4,
                )
                .unwrap();
                assert!(err < 1e-4);
            }
        }
    }

    #[test]
    fn batch_loss_is_the_mean() {
        assert_eq!(batch_loss(&[0.7f64]).unwrap(), 0.7);
        assert_eq!(batch_loss(&[0.25f64, 0.25, 0.25]).unwrap(), 0.25);
        let s = 1.0 / (1.0 + std::f64::consts::E);
        let vals = [0.5, 2.0 * s * s];
        let want = (vals[0] + vals[1]) / 2.0;
        assert!((batch_loss(&vals).unwrap() - want).abs() < 1e-15);
        assert!(batch_loss::<f64>(&[]).is_err());
    }

    #[test]
    fn label_parsing() {
        assert_eq!(PairLabel::from_sign(1).unwrap(), PairLabel::Positive);
        assert_eq!(PairLabel::from_sign(-1).unwrap(), PairLabel::Negative);
        assert!(PairLabel::from_sign(0).is_err());
    }

    #[test]
    fn loss_kind_round_trips() {
        for kind in [LossKind::SoftPn, LossKind::SoftmaxRatio, LossKind::Hinge] {
            assert_eq!(kind.name().parse::<LossKind>().unwrap(), kind);
        }
        assert!("triplet".parse::<LossKind>().is_err());
    }

    #[test]
    fn rejects_non_finite_distances() {
        assert!(TripletDistances::new(f64::NAN, 1.0, 1.0).is_err());
        assert!(TripletDistances::new(1.0, f64::INFINITY, 1.0).is_err());
        assert!(TripletDistances::new(1.0, 1.0, -0.5).is_err());
    }
}
