//! Selective cross-entropy over sparse labels, and the Jaccard index.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::kernels::log_softmax_channels;
use crate::autograd::{Tensor, Var};
use crate::error::{Error, Result};
use crate::sparsifier::{PixelLabel, SparseMask};
use crate::task_store::DenseMask;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub contributing_pixels: usize,
    /// Set when no pixel was labeled; `value` is then 0.
    pub empty: bool,
}

/// Per-class weights applied to labeled pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassWeighting {
    #[default]
    None,
    /// Each class present contributes equally, whatever its pixel count.
    Balanced,
}

fn score_planes(scores: &Tensor, target: &SparseMask) -> Result<Tensor> {
    let (h, w) = target.dims();
    match scores.shape() {
        [2, sh, sw] | [1, 2, sh, sw] if (*sh, *sw) == (h, w) => Ok(scores.clone().reshape(&[1, 2, h, w])),
        other => Err(Error::shape("weighted_cross_entropy", &[2, h, w], other)),
    }
}

/// Mean negative log-likelihood of the true class over labeled pixels of one
/// `[2, h, w]` score map. Unknown pixels have weight zero.
pub fn weighted_cross_entropy(scores: &Tensor, target: &SparseMask) -> Result<LossValue> {
    weighted_cross_entropy_grad(scores, target).map(|(loss, _)| loss)
}

/// Loss and its analytic gradient with respect to the scores,
/// `(softmax − onehot) / m` at labeled pixels and zero elsewhere.
pub fn weighted_cross_entropy_grad(scores: &Tensor, target: &SparseMask) -> Result<(LossValue, Tensor)> {
    let planes = score_planes(scores, target)?;
    let (h, w) = target.dims();
    let hw = h * w;
    let logp = log_softmax_channels(&planes);
    let lp = logp.data();
    let m = target.labeled_count();
    let mut grad = Tensor::zeros(scores.shape());
    if m == 0 {
        return Ok((
            LossValue {
                value: 0.0,
                contributing_pixels: 0,
                empty: true,
            },
            grad,
        ));
    }
    let mut total = 0.0;
    let g = grad.data_mut();
    for (i, &label) in target.labels().iter().enumerate() {
        let cls = match label {
            PixelLabel::Unknown => continue,
            PixelLabel::Background => 0,
            PixelLabel::Foreground => 1,
        };
        total -= lp[cls * hw + i];
        for c in 0..2 {
            let onehot = if c == cls { 1.0 } else { 0.0 };
            g[c * hw + i] = (lp[c * hw + i].exp() - onehot) / m as f64;
        }
    }
    Ok((
        LossValue {
            value: total / m as f64,
            contributing_pixels: m,
            empty: false,
        },
        grad,
    ))
}

/// Constant `[n, 2, h, w]` weights: the class weight at the true class of
/// each labeled pixel, normalized to sum to one. Returns the weights and the
/// number of labeled pixels.
pub fn loss_weights(targets: &[&SparseMask], weighting: ClassWeighting) -> Result<(Tensor, usize)> {
    let first = targets
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty target batch".into()))?;
    let (h, w) = first.dims();
    let hw = h * w;
    let mut counts = [0usize; 2];
    for t in targets {
        if t.dims() != (h, w) {
            return Err(Error::shape("target batch", &[h, w], &[t.height(), t.width()]));
        }
        for &l in t.labels() {
            match l {
                PixelLabel::Background => counts[0] += 1,
                PixelLabel::Foreground => counts[1] += 1,
                PixelLabel::Unknown => {}
            }
        }
    }
    let labeled = counts[0] + counts[1];
    let mut weights = Tensor::zeros(&[targets.len(), 2, h, w]);
    if labeled == 0 {
        return Ok((weights, 0));
    }
    let class_weight = match weighting {
        ClassWeighting::None => [1.0; 2],
        ClassWeighting::Balanced => counts.map(|n| if n == 0 { 0.0 } else { 1.0 / n as f64 }),
    };
    let norm: f64 = (0..2).map(|c| class_weight[c] * counts[c] as f64).sum();
    let data = weights.data_mut();
    for (n, t) in targets.iter().enumerate() {
        for (i, &l) in t.labels().iter().enumerate() {
            let cls = match l {
                PixelLabel::Unknown => continue,
                PixelLabel::Background => 0,
                PixelLabel::Foreground => 1,
            };
            data[(n * 2 + cls) * hw + i] = class_weight[cls] / norm;
        }
    }
    Ok((weights, labeled))
}

/// Differentiable pooled loss over a batch of `[n, 2, h, w]` scores. With no
/// labeled pixel the result is an exact zero that still belongs to the graph.
pub fn masked_cross_entropy<'g>(
    scores: Var<'g>,
    targets: &[&SparseMask],
    weighting: ClassWeighting,
) -> Result<(Var<'g>, usize)> {
    let (weights, labeled) = loss_weights(targets, weighting)?;
    if scores.shape() != weights.shape() {
        return Err(Error::shape("masked_cross_entropy", weights.shape(), &scores.shape()));
    }
    let loss = scores.log_softmax_channels().mask_mul(Rc::new(weights)).sum().scale(-1.0);
    Ok((loss, labeled))
}

/// Intersection over union of the foreground; 1 when both masks are empty.
pub fn jaccard(pred: &DenseMask, truth: &DenseMask) -> Result<f64> {
    if pred.dims() != truth.dims() {
        return Err(Error::shape(
            "jaccard",
            &[truth.height(), truth.width()],
            &[pred.height(), pred.width()],
        ));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        inter += usize::from(p == 1 && t == 1);
        union += usize::from(p == 1 || t == 1);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::seed;
    use crate::sparsifier::{densify_passthrough, SparsitySpec};
    use proptest::prelude::*;
    use rand::Rng;

    fn target(h: usize, w: usize, labels: Vec<PixelLabel>) -> SparseMask {
        SparseMask::new(h, w, labels, SparsitySpec::Points(1)).unwrap()
    }

    fn random_case(seed: u64, side: usize) -> (Tensor, SparseMask) {
        let mut rng = seed::rng(seed);
        let scores = Tensor::from_fn(&[2, side, side], |_| rng.random_range(-3.0..3.0));
        let labels = (0..side * side)
            .map(|_| match rng.random_range(0..3) {
                0 => PixelLabel::Background,
                1 => PixelLabel::Foreground,
                _ => PixelLabel::Unknown,
            })
            .collect();
        (scores, target(side, side, labels))
    }

    #[test]
    fn uniform_scores_give_ln2() {
        let (_, t) = random_case(1, 5);
        let loss = weighted_cross_entropy(&Tensor::zeros(&[2, 5, 5]), &t).unwrap();
        assert!((loss.value - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn large_margin_drives_loss_to_zero() {
        let t = target(1, 2, vec![PixelLabel::Foreground, PixelLabel::Background]);
        let s = Tensor::new(&[2, 1, 2], vec![-50.0, 50.0, 50.0, -50.0]);
        assert!(weighted_cross_entropy(&s, &t).unwrap().value < 1e-40);
    }

    #[test]
    fn three_labeled_pixels_average() {
        let t = target(
            2,
            2,
            vec![PixelLabel::Foreground, PixelLabel::Unknown, PixelLabel::Background, PixelLabel::Foreground],
        );
        let bg = [0.0, 5.0, 1.0, -1.0];
        let fg = [1.0, 0.0, 0.5, 2.0];
        let s = Tensor::new(&[2, 2, 2], bg.iter().chain(&fg).copied().collect());
        let nll = |own: f64, other: f64| -(own.exp() / (own.exp() + other.exp())).ln();
        let (a, b, c) = (nll(fg[0], bg[0]), nll(bg[2], fg[2]), nll(fg[3], bg[3]));
        let loss = weighted_cross_entropy(&s, &t).unwrap();
        assert_eq!(loss.contributing_pixels, 3);
        assert!((loss.value - (a + b + c) / 3.0).abs() < 1e-14);
    }

    #[test]
    fn unlabeled_target_is_flagged() {
        let t = SparseMask::all_unknown(3, 3, SparsitySpec::Grid(2));
        let loss = weighted_cross_entropy(&Tensor::ones(&[2, 3, 3]), &t).unwrap();
        assert_eq!(loss.value, 0.0);
        assert!(loss.empty);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let (_, t) = random_case(0, 4);
        assert!(weighted_cross_entropy(&Tensor::zeros(&[2, 4, 5]), &t).is_err());
        assert!(weighted_cross_entropy(&Tensor::zeros(&[3, 4, 4]), &t).is_err());
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for case in 0..20 {
            let (s, t) = random_case(100 + case, 4);
            let (_, g) = weighted_cross_entropy_grad(&s, &t).unwrap();
            let eps = 1e-6;
            for i in 0..s.numel() {
                let mut plus = s.clone();
                plus.data_mut()[i] += eps;
                let mut minus = s.clone();
                minus.data_mut()[i] -= eps;
                let fd = (weighted_cross_entropy(&plus, &t).unwrap().value
                    - weighted_cross_entropy(&minus, &t).unwrap().value)
                    / (2.0 * eps);
                let an = g.data()[i];
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-3), "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn graph_loss_agrees_with_per_image_loss() {
        let (s, t) = random_case(7, 6);
        let graph = Graph::new();
        let v = graph.param(s.clone().reshape(&[1, 2, 6, 6]));
        let (loss, m) = masked_cross_entropy(v, &[&t], ClassWeighting::None).unwrap();
        let direct = weighted_cross_entropy_grad(&s, &t).unwrap();
        assert_eq!(m, direct.0.contributing_pixels);
        assert!((loss.value().item() - direct.0.value).abs() < 1e-14);
        let g = graph.grad(loss, &[v], false)[0].value();
        assert!(g.sub(&direct.1.reshape(&[1, 2, 6, 6])).max_abs() < 1e-14);
    }

    #[test]
    fn balanced_weighting_averages_class_means() {
        let t = target(
            1,
            4,
            vec![PixelLabel::Foreground, PixelLabel::Background, PixelLabel::Background, PixelLabel::Background],
        );
        let s = Tensor::new(&[1, 2, 1, 4], vec![0.0, 1.0, 2.0, 3.0, 1.0, 0.0, 0.0, 0.0]);
        let graph = Graph::new();
        let v = graph.constant(s.clone());
        let (loss, _) = masked_cross_entropy(v, &[&t], ClassWeighting::Balanced).unwrap();
        let nll = |own: f64, other: f64| -(own.exp() / (own.exp() + other.exp())).ln();
        let fg = nll(1.0, 0.0);
        let bg = (nll(1.0, 0.0) + nll(2.0, 0.0) + nll(3.0, 0.0)) / 3.0;
        assert!((loss.value().item() - (fg + bg) / 2.0).abs() < 1e-14);
    }

    #[test]
    fn jaccard_examples() {
        let full = DenseMask::filled(4, 4, true);
        let left = DenseMask::from_fn(4, 4, |_, c| c < 2);
        let right = DenseMask::from_fn(4, 4, |_, c| c >= 2);
        assert_eq!(jaccard(&left, &full).unwrap(), 0.5);
        assert_eq!(jaccard(&left, &left).unwrap(), 1.0);
        assert_eq!(jaccard(&left, &right).unwrap(), 0.0);
        let empty = DenseMask::filled(4, 4, false);
        assert_eq!(jaccard(&empty, &empty).unwrap(), 1.0);
        assert!(jaccard(&empty, &DenseMask::filled(4, 5, false)).is_err());
    }

    proptest! {
        #[test]
        fn unknown_pixels_never_matter(seed in any::<u64>(), side in 2usize..7) {
            let (s, t) = random_case(seed, side);
            let mut perturbed = s.clone();
            let hw = side * side;
            for (i, &l) in t.labels().iter().enumerate() {
                if l == PixelLabel::Unknown {
                    perturbed.data_mut()[i] += 10.0;
                    perturbed.data_mut()[hw + i] -= 4.0;
                }
            }
            prop_assert_eq!(weighted_cross_entropy(&s, &t).unwrap(), weighted_cross_entropy(&perturbed, &t).unwrap());
        }

        #[test]
        fn dense_target_is_full_cross_entropy(seed in any::<u64>()) {
            let mut rng = seed::rng(seed);
            let truth = DenseMask::from_fn(5, 5, |_, _| rng.random_bool(0.4));
            let scores = Tensor::from_fn(&[2, 5, 5], |_| rng.random_range(-2.0..2.0));
            let loss = weighted_cross_entropy(&scores, &densify_passthrough(&truth)).unwrap().value;
            let d = scores.data();
            let full: f64 = (0..25).map(|i| {
                let (b, f) = (d[i], d[25 + i]);
                let own = if truth.labels()[i] == 1 { f } else { b };
                (b.exp() + f.exp()).ln() - own
            }).sum::<f64>() / 25.0;
            prop_assert!((loss - full).abs() < 1e-10);
        }

        #[test]
        fn jaccard_is_symmetric(seed in any::<u64>()) {
            let mut rng = seed::rng(seed);
            let a = DenseMask::from_fn(6, 6, |_, _| rng.random_bool(0.5));
            let b = DenseMask::from_fn(6, 6, |_, _| rng.random_bool(0.5));
            prop_assert_eq!(jaccard(&a, &b).unwrap(), jaccard(&b, &a).unwrap());
        }
    }
}
