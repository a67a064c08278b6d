//! Gradient clipping and the three aggregation policies.
//!
//! Every reduction is a pairwise tree over gradients sorted by their stable
//! example index, so results never depend on the order a worker pool
//! delivers them in.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::model::Gradient;

/// A per-example gradient tagged with its stable position in the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleGradient {
    pub index: usize,
    pub grad: Gradient,
}

impl ExampleGradient {
    pub fn new(index: usize, grad: Gradient) -> Self {
        Self { index, grad }
    }
}

/// Simulated device layout: batch position `i` lives on core `i % num_cores`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoreLayout {
    pub num_cores: usize,
    pub per_core_batch: usize,
}

impl CoreLayout {
    pub fn batch_size(&self) -> usize {
        self.num_cores * self.per_core_batch
    }

    pub fn core_of(&self, position: usize) -> usize {
        position % self.num_cores
    }

    /// Batch positions on `core`, ascending.
    pub fn members(&self, core: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.per_core_batch).map(move |j| core + j * self.num_cores)
    }
}

fn check_bound(bound: f64) -> Result<()> {
    if bound > 0.0 {
        Ok(())
    } else {
        Err(invalid(format!("clip bound must be positive, got {bound}")))
    }
}

/// Scales `g` in place to `min(1, bound / |g|)`. Returns the pre-clip norm
/// and whether scaling happened. Leaves `g` untouched when `|g| <= bound`.
pub fn clip_in_place(g: &mut Gradient, bound: f64) -> Result<(f64, bool)> {
    check_bound(bound)?;
    if !g.is_finite() {
        return Err(Error::Numeric("cannot clip a non-finite gradient".into()));
    }
    let norm = g.l2_norm();
    if norm <= bound {
        return Ok((norm, false));
    }
    g.scale(bound / norm);
    Ok((norm, true))
}

pub fn clip_to_bound(g: &Gradient, bound: f64) -> Result<Gradient> {
    let mut out = g.clone();
    clip_in_place(&mut out, bound)?;
    Ok(out)
}

/// Sum of `grads` as a balanced binary tree over their order.
pub(crate) fn tree_sum(grads: &[&Gradient]) -> Gradient {
    match grads {
        [] => unreachable!("tree_sum of an empty list"),
        [g] => (*g).clone(),
        _ => {
            let (lo, hi) = grads.split_at(grads.len() / 2);
            let mut acc = tree_sum(lo);
            acc.add_assign(&tree_sum(hi)).expect("shapes checked by caller");
            acc
        }
    }
}

pub(crate) fn mean_of(grads: &[&Gradient]) -> Gradient {
    let n = grads.len() as f64;
    let mut sum = tree_sum(grads);
    for v in sum.as_mut_slice() {
        *v /= n;
    }
    sum
}

fn sorted(list: &[ExampleGradient]) -> Result<Vec<&ExampleGradient>> {
    if list.is_empty() {
        return Err(invalid("cannot aggregate an empty gradient list"));
    }
    let mut refs: Vec<_> = list.iter().collect();
    refs.sort_by_key(|g| g.index);
    if refs.windows(2).any(|w| w[0].index == w[1].index) {
        return Err(invalid("duplicate example index in gradient list"));
    }
    let len = refs[0].grad.len();
    if refs.iter().any(|g| g.grad.len() != len) {
        return Err(shape("per-example gradients differ in length"));
    }
    Ok(refs)
}

pub fn aggregate_baseline(per_example: &[ExampleGradient]) -> Result<Gradient> {
    let refs = sorted(per_example)?;
    let grads: Vec<&Gradient> = refs.iter().map(|g| &g.grad).collect();
    Ok(mean_of(&grads))
}

/// Mean of the individually clipped gradients; each example contributes at
/// most `bound / n` in norm.
pub fn aggregate_per_example(per_example: &[ExampleGradient], bound: f64) -> Result<Gradient> {
    check_bound(bound)?;
    let refs = sorted(per_example)?;
    let clipped = refs
        .iter()
        .map(|g| clip_to_bound(&g.grad, bound))
        .collect::<Result<Vec<_>>>()?;
    let grads: Vec<&Gradient> = clipped.iter().collect();
    Ok(mean_of(&grads))
}

/// Averages within each core, clips each core's mean, then averages the
/// clipped core means.
pub fn aggregate_per_core(
    per_example: &[ExampleGradient],
    bound: f64,
    layout: CoreLayout,
) -> Result<Gradient> {
    check_bound(bound)?;
    if layout.num_cores == 0 || layout.per_core_batch == 0 {
        return Err(invalid("core layout dimensions must be positive"));
    }
    let refs = sorted(per_example)?;
    if refs.len() != layout.batch_size() {
        return Err(invalid(format!(
            "{} gradients do not fill {} cores of {}",
            refs.len(),
            layout.num_cores,
            layout.per_core_batch
        )));
    }
    let mut core_means = Vec::with_capacity(layout.num_cores);
    for core in 0..layout.num_cores {
        let members: Vec<&Gradient> = layout.members(core).map(|p| &refs[p].grad).collect();
        let mut mean = mean_of(&members);
        clip_in_place(&mut mean, bound)?;
        core_means.push(mean);
    }
    let grads: Vec<&Gradient> = core_means.iter().collect();
    Ok(mean_of(&grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g(v: &[f64]) -> Gradient {
        Gradient::from_vec(v.to_vec())
    }

    fn tagged(list: &[&[f64]]) -> Vec<ExampleGradient> {
        list.iter()
            .enumerate()
            .map(|(i, v)| ExampleGradient::new(i, g(v)))
            .collect()
    }

    #[test]
    fn clip_examples() {
        let big = g(&[3.0, 4.0]);
        let out = clip_to_bound(&big, 2.5).unwrap();
        assert_eq!(out.as_slice(), &[1.5, 2.0]);
        assert!((out.l2_norm() - 2.5).abs() < 1e-12);

        let small = g(&[0.6, 0.8]);
        let same = clip_to_bound(&small, 2.5).unwrap();
        assert_eq!(
            same.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            small.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(clip_to_bound(&g(&[0.0, 0.0]), 1.0).unwrap().as_slice(), &[0.0, 0.0]);

        assert!(matches!(clip_to_bound(&g(&[f64::NAN]), 1.0), Err(Error::Numeric(_))));
        assert!(matches!(clip_to_bound(&big, 0.0), Err(Error::InvalidArgument(_))));
        assert!(clip_to_bound(&big, f64::NAN).is_err());
    }

    #[test]
    fn baseline_examples() {
        let a: &[f64] = &[1.0, -2.0, 0.5];
        let neg: &[f64] = &[-1.0, 2.0, -0.5];
        assert_eq!(aggregate_baseline(&tagged(&[a, a])).unwrap().as_slice(), a);
        assert_eq!(aggregate_baseline(&tagged(&[a, neg])).unwrap().as_slice(), &[0.0; 3]);
        assert!(aggregate_baseline(&[]).is_err());
        let ragged = vec![ExampleGradient::new(0, g(&[1.0])), ExampleGradient::new(1, g(&[1.0, 2.0]))];
        assert!(aggregate_baseline(&ragged).is_err());
    }

    #[test]
    fn baseline_ignores_list_order() {
        let list = tagged(&[&[0.1, 0.7], &[1e-17, 3.0], &[1e17, -2.0], &[0.3, 0.3], &[-1e17, 5.0]]);
        let mut rev = list.clone();
        rev.reverse();
        rev.swap(0, 2);
        let a = aggregate_baseline(&list).unwrap();
        let b = aggregate_baseline(&rev).unwrap();
        assert_eq!(
            a.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn per_example_examples() {
        let list = tagged(&[&[0.3, 0.4], &[-0.6, 0.0]]);
        assert_eq!(
            aggregate_per_example(&list, 1.0).unwrap(),
            aggregate_baseline(&list).unwrap()
        );
        let single = tagged(&[&[6.0, 8.0]]);
        let out = aggregate_per_example(&single, 5.0).unwrap();
        assert!((out.l2_norm() - 5.0).abs() < 1e-12);
    }

    /// K = 2 cores, B = 2 per core, bound 1. Positions 0 and 2 sit on core 0,
    /// positions 1 and 3 on core 1.
    #[test]
    fn per_core_hand_computed() {
        let list = tagged(&[&[4.0, 0.0], &[0.0, 0.2], &[0.0, 3.0], &[0.4, 0.0]]);
        let layout = CoreLayout {
            num_cores: 2,
            per_core_batch: 2,
        };
        let out = aggregate_per_core(&list, 1.0, layout).unwrap();

        // core 0 mean (2, 1.5), norm 2.5 -> scaled by 0.4 to (0.8, 0.6)
        // core 1 mean (0.2, 0.1), norm ~0.2236 -> unchanged
        let c0 = [4.0 / 2.0 * 0.4, 3.0 / 2.0 * 0.4];
        let c1 = [0.4 / 2.0, 0.2 / 2.0];
        let expected = [(c0[0] + c1[0]) / 2.0, (c0[1] + c1[1]) / 2.0];
        for (o, e) in out.as_slice().iter().zip(expected) {
            assert!((o - e).abs() < 1e-15, "{o} vs {e}");
        }
        assert!(aggregate_per_core(&list[..3], 1.0, layout).is_err());
    }

    #[test]
    fn per_core_with_identical_small_gradients_equals_baseline() {
        let v: &[f64] = &[0.1, -0.2, 0.05];
        let list = tagged(&[v, v, v, v, v, v]);
        let layout = CoreLayout {
            num_cores: 3,
            per_core_batch: 2,
        };
        let pc = aggregate_per_core(&list, 1.0, layout).unwrap();
        let base = aggregate_baseline(&list).unwrap();
        for (a, b) in pc.as_slice().iter().zip(base.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    fn arb_list(n: usize, dim: usize) -> impl Strategy<Value = Vec<ExampleGradient>> {
        proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, dim), n).prop_map(|vs| {
            vs.into_iter()
                .enumerate()
                .map(|(i, v)| ExampleGradient::new(i, Gradient::from_vec(v)))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn clipped_norm_never_exceeds_bound(v in proptest::collection::vec(-100.0f64..100.0, 1..20), bound in 0.01f64..50.0) {
            let out = clip_to_bound(&Gradient::from_vec(v), bound).unwrap();
            prop_assert!(out.l2_norm() <= bound * (1.0 + 1e-9));
        }

        #[test]
        fn single_core_batch_matches_per_example(list in arb_list(6, 4), bound in 0.5f64..20.0) {
            let pe = aggregate_per_example(&list, bound).unwrap();
            let layout = CoreLayout { num_cores: 6, per_core_batch: 1 };
            let pc = aggregate_per_core(&list, bound, layout).unwrap();
            for (a, b) in pe.as_slice().iter().zip(pc.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn swapping_one_example_has_bounded_influence(
            list in arb_list(8, 3),
            replacement in proptest::collection::vec(-1000.0f64..1000.0, 3),
            victim in 0usize..8,
            bound in 0.1f64..5.0,
        ) {
            let mut swapped = list.clone();
            swapped[victim].grad = Gradient::from_vec(replacement);
            let diff = |a: &Gradient, b: &Gradient| {
                a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
            };
            let pe = diff(&aggregate_per_example(&list, bound).unwrap(), &aggregate_per_example(&swapped, bound).unwrap());
            prop_assert!(pe <= 2.0 * bound / 8.0 * (1.0 + 1e-9));
            let layout = CoreLayout { num_cores: 2, per_core_batch: 4 };
            let pc = diff(&aggregate_per_core(&list, bound, layout).unwrap(), &aggregate_per_core(&swapped, bound, layout).unwrap());
            prop_assert!(pc <= 2.0 * bound / 2.0 * (1.0 + 1e-9));
        }
    }
}
