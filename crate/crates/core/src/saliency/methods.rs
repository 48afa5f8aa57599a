use ndarray::{Array1, Array2, Array3, Axis, Zip};
use serde::{Deserialize, Serialize};

use super::grid::relu_clamp;
use super::{Method, SaliencyMap};
use crate::error::{GamError, Result};

/// `A = N + P` split of the Grad-CAM weighted sum by the sign of the pooled
/// gradient of each channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradDecomposition {
    pub total: Array2<f64>,
    pub negative: Array2<f64>,
    pub positive: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcppCoefficients {
    /// Per-pixel `β^k_ij`, shaped like the layer.
    pub beta: Array3<f64>,
    /// Grad-CAM pooled gradients `α^k`.
    pub alpha_gc: Array1<f64>,
    /// Channel weights `w^k = Σ_ij β^k_ij φ(g^k_ij)`.
    pub weights: Array1<f64>,
}

fn check_pair(h: &Array3<f64>, g: &Array3<f64>) -> Result<()> {
    if h.dim() != g.dim() {
        return Err(GamError::Shape(format!("activations {:?} vs gradients {:?}", h.dim(), g.dim())));
    }
    if h.dim().0 == 0 || h.dim().1 == 0 || h.dim().2 == 0 {
        return Err(GamError::Shape(format!("empty layer {:?}", h.dim())));
    }
    Ok(())
}

fn weighted_channel_sum(h: &Array3<f64>, weights: impl Fn(usize) -> f64) -> Array2<f64> {
    let (_, u, v) = h.dim();
    let mut acc = Array2::zeros((u, v));
    for (k, channel) in h.outer_iter().enumerate() {
        acc.scaled_add(weights(k), &channel);
    }
    acc
}

/// One GAM layer map: `NRM(RSZ(Σ_k φ(h^k) ∘ φ(g^k)))`.
///
/// Channels are summed before the single resize.
pub fn gam_layer_map(h: &Array3<f64>, g: &Array3<f64>, target: (usize, usize)) -> Result<SaliencyMap> {
    check_pair(h, g)?;
    let mut product = relu_clamp(h);
    Zip::from(&mut product)
        .and(g)
        .for_each(|p, &gv| *p *= if gv > 0.0 { gv } else { 0.0 });
    let summed = product.sum_axis(Axis(0));
    Ok(SaliencyMap::from_raw(&summed, target, Method::Gam))
}

/// Mean of per-layer maps. Not re-normalised.
pub fn gam_aggregate(maps: &[SaliencyMap]) -> Result<SaliencyMap> {
    let first = maps.first().ok_or(GamError::EmptyInput("layer map set"))?;
    if maps.iter().any(|m| m.shape() != first.shape()) {
        return Err(GamError::Shape("layer maps differ in shape".into()));
    }
    if maps.len() == 1 {
        return Ok(first.clone());
    }
    let mut grid = Array2::zeros(first.shape());
    for m in maps {
        grid += &m.grid;
    }
    grid /= maps.len() as f64;
    Ok(SaliencyMap {
        grid,
        method: first.method,
        n_layers: maps.iter().map(|m| m.n_layers).sum(),
        degenerate: maps.iter().all(|m| m.degenerate),
    })
}

/// Grad-CAM: `NRM(RSZ(φ(Σ_k α^k h^k)))` with `α^k` the spatial mean of `g^k`,
/// plus the sign decomposition of the weighted sum.
pub fn grad_cam(h: &Array3<f64>, g: &Array3<f64>, target: (usize, usize)) -> Result<(SaliencyMap, GradDecomposition)> {
    check_pair(h, g)?;
    let alpha = pooled_gradients(g);
    let negative = weighted_channel_sum(h, |k| alpha[k].min(0.0));
    let positive = weighted_channel_sum(h, |k| alpha[k].max(0.0));
    let total = weighted_channel_sum(h, |k| alpha[k]);
    let map = SaliencyMap::from_raw(&relu_clamp(&total), target, Method::Gc);
    Ok((map, GradDecomposition { total, negative, positive }))
}

fn pooled_gradients(g: &Array3<f64>) -> Array1<f64> {
    g.mean_axis(Axis(1)).and_then(|m| m.mean_axis(Axis(1))).expect("non-empty layer")
}

/// Grad-CAM++.
///
/// With `S = exp(s)` and a piecewise-linear network, `∂²S/∂h² = S·g²` and
/// `∂³S/∂h³ = S·g³`, so
/// `β^k_ij = g²_ij / (2 g²_ij + (Σ_ab h^k_ab) g³_ij)` once `S` cancels.
/// A zero denominator gives `β = 0`. The returned flag reports whether `S`
/// itself overflows 64-bit floats, which is where the uncancelled form breaks.
pub fn grad_campp(h: &Array3<f64>, g: &Array3<f64>, s_value: f64, target: (usize, usize)) -> Result<(SaliencyMap, GcppCoefficients, bool)> {
    check_pair(h, g)?;
    if s_value.is_nan() {
        return Err(GamError::NonFiniteScore(s_value));
    }
    let overflow = !s_value.exp().is_finite();
    let channel_sums = h.sum_axis(Axis(1)).sum_axis(Axis(1));
    let mut beta = Array3::zeros(h.dim());
    for ((k, i, j), b) in beta.indexed_iter_mut() {
        let gv = g[(k, i, j)];
        let g2 = gv * gv;
        let denom = 2.0 * g2 + channel_sums[k] * g2 * gv;
        *b = if denom != 0.0 { g2 / denom } else { 0.0 };
    }
    let weights = Array1::from_iter(
        beta.outer_iter()
            .zip(g.outer_iter())
            .map(|(b, gk)| b.iter().zip(gk.iter()).map(|(&bv, &gv)| bv * gv.max(0.0)).sum::<f64>()),
    );
    let total = weighted_channel_sum(h, |k| weights[k]);
    let map = SaliencyMap::from_raw(&relu_clamp(&total), target, Method::Gcpp);
    let coefficients = GcppCoefficients {
        beta,
        alpha_gc: pooled_gradients(g),
        weights,
    };
    Ok((map, coefficients, overflow))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, stack, Array};
    use proptest::prelude::*;

    fn one(grid: Array2<f64>) -> Array3<f64> {
        grid.insert_axis(Axis(0))
    }

    #[test]
    fn gam_worked_example() {
        let h = one(array![[1.0, 2.0], [0.0, 3.0]]);
        let g = one(array![[1.0, -1.0], [2.0, 0.0]]);
        let m = gam_layer_map(&h, &g, (2, 2)).unwrap();
        assert_eq!(m.grid, array![[1.0, 0.0], [0.0, 0.0]]);
        assert!(!m.degenerate);
        assert_eq!(m.method, Method::Gam);
    }

    #[test]
    fn gam_negative_gradients_give_degenerate_map() {
        let h = one(array![[1.0, 2.0], [0.5, 3.0]]);
        let g = one(array![[-1.0, -0.1], [-2.0, -5.0]]);
        let m = gam_layer_map(&h, &g, (4, 4)).unwrap();
        assert!(m.degenerate);
        assert!(m.grid.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gam_doubled_channel_matches_single() {
        let h1 = one(array![[1.0, 2.0, 0.0], [0.5, 3.0, 1.0]]);
        let g1 = one(array![[0.3, 1.0, 2.0], [0.1, -1.0, 0.7]]);
        let h2 = stack![Axis(0), h1.index_axis(Axis(0), 0), h1.index_axis(Axis(0), 0)];
        let g2 = stack![Axis(0), g1.index_axis(Axis(0), 0), g1.index_axis(Axis(0), 0)];
        let a = gam_layer_map(&h1, &g1, (5, 7)).unwrap();
        let b = gam_layer_map(&h2, &g2, (5, 7)).unwrap();
        for (x, y) in a.grid.iter().zip(b.grid.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let h = Array3::zeros((1, 2, 2));
        let g = Array3::zeros((1, 2, 3));
        assert!(matches!(gam_layer_map(&h, &g, (2, 2)), Err(GamError::Shape(_))));
        assert!(matches!(grad_cam(&h, &g, (2, 2)), Err(GamError::Shape(_))));
        assert!(matches!(grad_campp(&h, &g, 0.0, (2, 2)), Err(GamError::Shape(_))));
    }

    fn map(grid: Array2<f64>) -> SaliencyMap {
        SaliencyMap {
            grid,
            method: Method::Gam,
            n_layers: 1,
            degenerate: false,
        }
    }

    #[test]
    fn aggregate_cases() {
        let a = map(array![[1.0, 0.0]]);
        assert_eq!(gam_aggregate(std::slice::from_ref(&a)).unwrap(), a);
        assert_eq!(gam_aggregate(&[a.clone(), a.clone()]).unwrap().grid, a.grid);
        let mean = gam_aggregate(&[a, map(array![[0.0, 1.0]])]).unwrap();
        assert_eq!(mean.grid, array![[0.5, 0.5]]);
        assert_eq!(mean.n_layers, 2);
        assert!(matches!(gam_aggregate(&[]), Err(GamError::EmptyInput(_))));
    }

    #[test]
    fn grad_cam_negative_pooled_gradient_masks_everything() {
        let h = one(array![[1.0, 2.0], [0.0, 3.0]]);
        let g = Array3::from_elem((1, 2, 2), -1.0);
        let (m, d) = grad_cam(&h, &g, (2, 2)).unwrap();
        assert!(m.degenerate);
        assert_eq!(d.positive, Array2::<f64>::zeros((2, 2)));
    }

    #[test]
    fn grad_cam_unit_gradient_is_normalised_activation() {
        let h = one(array![[1.0, 2.0, 0.0], [0.0, 3.0, 1.0]]);
        let g = Array3::from_elem((1, 2, 3), 1.0);
        let (m, _) = grad_cam(&h, &g, (4, 6)).unwrap();
        let (want, _) = super::super::normalize_minmax(&super::super::resize_bicubic(&h.index_axis(Axis(0), 0).to_owned(), (4, 6)));
        assert_eq!(m.grid, want);
    }

    #[test]
    fn grad_cam_masking_fixture() {
        let hk = array![[1.0, 0.0], [0.0, 0.0]];
        let h = stack![Axis(0), hk, hk];
        let g = stack![Axis(0), Array2::from_elem((2, 2), 1.0), Array2::from_elem((2, 2), -2.0)];
        let (gc, d) = grad_cam(&h, &g, (2, 2)).unwrap();
        assert_eq!(d.total, -&hk);
        assert_eq!(d.negative, &hk * -2.0);
        assert_eq!(d.positive, hk);
        assert!(gc.degenerate);
        assert_eq!(gc.grid[(0, 0)], 0.0);
        let gam = gam_layer_map(&h, &g, (2, 2)).unwrap();
        assert_eq!(gam.grid[(0, 0)], 1.0);
    }

    #[test]
    fn gcpp_zero_activation_sum_gives_half() {
        let h = Array3::zeros((2, 2, 2));
        let g = stack![Axis(0), array![[1.0, 0.0], [2.0, 3.0]], array![[-1.0, 0.5], [0.0, 4.0]]];
        let (_, c, overflow) = grad_campp(&h, &g, 1.0, (2, 2)).unwrap();
        assert!(!overflow);
        for ((k, i, j), &b) in c.beta.indexed_iter() {
            let want = if g[(k, i, j)] != 0.0 { 0.5 } else { 0.0 };
            assert_eq!(b, want);
        }
    }

    #[test]
    fn gcpp_zero_gradient_is_degenerate() {
        let h = one(array![[1.0, 2.0], [0.0, 3.0]]);
        let (m, c, _) = grad_campp(&h, &Array3::zeros((1, 2, 2)), 0.0, (3, 3)).unwrap();
        assert!(c.beta.iter().all(|&b| b == 0.0));
        assert!(m.degenerate);
    }

    #[test]
    fn gcpp_overflow_flag() {
        let h = one(array![[1.0, 2.0], [0.0, 3.0]]);
        let g = one(array![[0.5, 1.0], [0.2, 0.1]]);
        let (m, _, overflow) = grad_campp(&h, &g, 800.0, (4, 4)).unwrap();
        assert!(overflow);
        assert!(m.grid.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        assert!(!grad_campp(&h, &g, 700.0, (4, 4)).unwrap().2);
    }

    #[test]
    fn gcpp_matches_hand_evaluation() {
        // One channel, h sums to 2, g = [[1, 2]]:
        // beta = [1/(2+2), 4/(8+16)] = [1/4, 1/6]; w = 1/4 + 2/6.
        let h = one(array![[0.5, 1.5]]);
        let g = one(array![[1.0, 2.0]]);
        let (_, c, _) = grad_campp(&h, &g, 0.0, (1, 2)).unwrap();
        assert!((c.beta[(0, 0, 0)] - 0.25).abs() < 1e-15);
        assert!((c.beta[(0, 0, 1)] - 1.0 / 6.0).abs() < 1e-15);
        assert!((c.weights[0] - (0.25 + 2.0 / 6.0)).abs() < 1e-15);
        assert_eq!(c.alpha_gc[0], 1.5);
    }

    fn layer_strategy() -> impl Strategy<Value = (Array3<f64>, Array3<f64>)> {
        (1usize..4, 1usize..5, 1usize..5).prop_flat_map(|(c, u, v)| {
            let n = c * u * v;
            (
                proptest::collection::vec(0.0f64..2.0, n),
                proptest::collection::vec(-1.0f64..1.0, n),
            )
                .prop_map(move |(h, g)| {
                    (
                        Array::from_shape_vec((c, u, v), h).unwrap(),
                        Array::from_shape_vec((c, u, v), g).unwrap(),
                    )
                })
        })
    }

    fn close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) -> bool {
        a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= tol)
    }

    proptest! {
        #[test]
        fn maps_stay_in_unit_range((h, g) in layer_strategy(), tu in 1usize..9, tv in 1usize..9) {
            let maps = [
                gam_layer_map(&h, &g, (tu, tv)).unwrap(),
                grad_cam(&h, &g, (tu, tv)).unwrap().0,
                grad_campp(&h, &g, 1.0, (tu, tv)).unwrap().0,
            ];
            for m in maps {
                prop_assert_eq!(m.shape(), (tu, tv));
                prop_assert!(m.grid.iter().all(|v| (0.0..=1.0).contains(v)));
                if !m.degenerate {
                    prop_assert_eq!(m.grid.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
                    prop_assert_eq!(m.grid.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
                }
            }
        }

        #[test]
        fn decomposition_adds_up((h, g) in layer_strategy()) {
            let (_, d) = grad_cam(&h, &g, (3, 3)).unwrap();
            prop_assert!(close(&d.total, &(&d.negative + &d.positive), 1e-9));
            prop_assert!(d.positive.iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn negative_gradients_are_ignored_by_gam((h, g) in layer_strategy(), replacement in -10.0f64..-1e-6) {
            let mut g2 = g.clone();
            g2.mapv_inplace(|v| if v < 0.0 { replacement } else { v });
            let a = gam_layer_map(&h, &g, (6, 5)).unwrap();
            let b = gam_layer_map(&h, &g2, (6, 5)).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn positive_gradient_scaling_leaves_gam_and_gc((h, g) in layer_strategy(), scale in 0.01f64..100.0) {
            let gs = &g * scale;
            let a = gam_layer_map(&h, &g, (5, 5)).unwrap();
            let b = gam_layer_map(&h, &gs, (5, 5)).unwrap();
            prop_assert_eq!(a.degenerate, b.degenerate);
            prop_assert!(close(&a.grid, &b.grid, 1e-9));
            let a = grad_cam(&h, &g, (5, 5)).unwrap().0;
            let b = grad_cam(&h, &gs, (5, 5)).unwrap().0;
            prop_assert!(close(&a.grid, &b.grid, 1e-9));
        }

        #[test]
        fn channel_permutation_invariance((h, g) in layer_strategy(), rot in 0usize..4) {
            let c = h.dim().0;
            let order: Vec<usize> = (0..c).map(|k| (k + rot) % c).collect();
            let hp = h.select(Axis(0), &order);
            let gp = g.select(Axis(0), &order);
            let t = (4, 6);
            prop_assert!(close(&gam_layer_map(&h, &g, t).unwrap().grid, &gam_layer_map(&hp, &gp, t).unwrap().grid, 1e-9));
            prop_assert!(close(&grad_cam(&h, &g, t).unwrap().0.grid, &grad_cam(&hp, &gp, t).unwrap().0.grid, 1e-9));
            prop_assert!(close(&grad_campp(&h, &g, 2.0, t).unwrap().0.grid, &grad_campp(&hp, &gp, 2.0, t).unwrap().0.grid, 1e-9));
        }

        #[test]
        fn aggregate_is_bounded_by_its_layers(layers in proptest::collection::vec(layer_strategy(), 1..4)) {
            let maps: Vec<_> = layers.iter().map(|(h, g)| gam_layer_map(h, g, (5, 4)).unwrap()).collect();
            let agg = gam_aggregate(&maps).unwrap();
            for (idx, &v) in agg.grid.indexed_iter() {
                let lo = maps.iter().map(|m| m.grid[idx]).fold(f64::INFINITY, f64::min);
                let hi = maps.iter().map(|m| m.grid[idx]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}
