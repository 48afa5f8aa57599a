//! Grid primitives shared by all saliency methods.

use ndarray::{Array, Array2, Dimension};

/// Entrywise `max(·, 0)`.
pub fn relu_clamp<D: Dimension>(grid: &Array<f64, D>) -> Array<f64, D> {
    grid.mapv(|v| if v > 0.0 { v } else { 0.0 })
}

// Cubic convolution kernel with a = -0.75, the coefficient used by OpenCV
// and PyTorch.
const CUBIC_A: f64 = -0.75;

fn cubic_weights(t: f64) -> [f64; 4] {
    let a = CUBIC_A;
    let near = |x: f64| ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
    let far = |x: f64| ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
    [far(t + 1.0), near(t), near(1.0 - t), far(2.0 - t)]
}

// For each output coordinate: the four clamped source indices and weights.
fn axis_taps(src: usize, dst: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = src as f64 / dst as f64;
    let last = src as isize - 1;
    (0..dst)
        .map(|i| {
            let pos = (i as f64 + 0.5) * scale - 0.5;
            let base = pos.floor();
            let weights = cubic_weights(pos - base);
            let base = base as isize;
            let idx = [-1, 0, 1, 2].map(|o: isize| (base + o).clamp(0, last) as usize);
            (idx, weights)
        })
        .collect()
}

/// Bicubic resize with half-pixel centres and edge replication.
///
/// Upsampling can overshoot the source range slightly; min-max normalisation
/// downstream absorbs it.
pub fn resize_bicubic(grid: &Array2<f64>, target: (usize, usize)) -> Array2<f64> {
    let (rows, cols) = grid.dim();
    let (out_rows, out_cols) = target;
    assert!(rows > 0 && cols > 0, "cannot resize an empty grid");
    if (rows, cols) == target {
        return grid.clone();
    }
    let row_taps = axis_taps(rows, out_rows);
    let col_taps = axis_taps(cols, out_cols);
    let mut horizontal = Array2::<f64>::zeros((rows, out_cols));
    for r in 0..rows {
        for (j, (idx, w)) in col_taps.iter().enumerate() {
            horizontal[(r, j)] = (0..4).map(|t| w[t] * grid[(r, idx[t])]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros(target);
    for (i, (idx, w)) in row_taps.iter().enumerate() {
        for j in 0..out_cols {
            out[(i, j)] = (0..4).map(|t| w[t] * horizontal[(idx[t], j)]).sum();
        }
    }
    out
}

const RELATIVE_FLAT: f64 = 1e-12;

/// Min-max normalisation to `[0, 1]`.
///
/// A constant grid carries no localisation signal and comes back as zeros
/// with the degenerate flag set. Spreads at rounding level (below `1e-12`
/// of the largest magnitude) count as constant.
pub fn normalize_minmax<D: Dimension>(grid: &Array<f64, D>) -> (Array<f64, D>, bool) {
    let (lo, hi) = grid
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let spread_ok = hi - lo > RELATIVE_FLAT * hi.abs().max(lo.abs());
    if !spread_ok {
        return (Array::zeros(grid.raw_dim()), true);
    }
    let span = hi - lo;
    (grid.mapv(|v| (v - lo) / span), false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn relu_definition() {
        assert_eq!(relu_clamp(&array![[1.0, -1.0], [2.0, 0.0]]), array![[1.0, 0.0], [2.0, 0.0]]);
        assert_eq!(relu_clamp(&array![[-1.0, -3.0]]), array![[0.0, 0.0]]);
        let pos = array![[0.5, 0.0], [3.0, 1.0]];
        assert_eq!(relu_clamp(&pos), pos);
    }

    #[test]
    fn kernel_partitions_unity() {
        for t in [0.0, 0.1, 0.25, 0.5, 0.9] {
            let s: f64 = cubic_weights(t).iter().sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
        assert_eq!(cubic_weights(0.0), [0.0, 1.0, 0.0, 0.0]);
    }

    // Reference values from torch.nn.functional.interpolate(mode="bicubic",
    // align_corners=False) in float64.
    #[test]
    fn matches_reference_upsampling() {
        let out = resize_bicubic(&array![[0.0, 1.0], [0.0, 1.0]], (4, 4));
        let want = [-0.10546875, 0.2265625, 0.7734375, 1.10546875];
        for r in 0..4 {
            for c in 0..4 {
                assert!((out[(r, c)] - want[c]).abs() < 1e-12);
            }
            assert!(out.row(r).windows(2).into_iter().all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn matches_reference_mixed_scaling() {
        let src = array![[0.1, 0.7, 0.3, 0.9, 0.2], [0.5, 0.0, 1.0, 0.4, 0.6], [0.8, 0.2, 0.5, 0.1, 0.3]];
        let up = resize_bicubic(&src, (7, 4));
        let want_up = [
            [0.13720105229591845, 0.6081656141809406, 0.7424351283482148, 0.24719202692237624],
            [0.19565664574981811, 0.5545232211188049, 0.7308390180849127, 0.31873519497084557],
            [0.2927085231413995, 0.4525970014121723, 0.7351887071793006, 0.4809382402514578],
            [0.4375, 0.344970703125, 0.66015625, 0.5729492187499999],
            [0.5904860604956265, 0.28798785418185147, 0.47679539449708486, 0.47868332042638484],
            [0.7018784592520044, 0.27468767082725926, 0.2915703865251455, 0.3149018312682214],
            [0.7666696798697163, 0.2602001668412902, 0.1962203757060861, 0.24242537695881933],
        ];
        for r in 0..7 {
            for c in 0..4 {
                assert!((up[(r, c)] - want_up[r][c]).abs() < 1e-12, "({r},{c})");
            }
        }
        let down = resize_bicubic(&src, (2, 9));
        let want_down = [
            [
                0.14435683513374464,
                0.294849537037037,
                0.5056450402949244,
                0.5189289694787378,
                0.476171875,
                0.703007651748971,
                0.772813250171468,
                0.47518807870370366,
                0.25115419238683095,
            ],
            [
                0.8082023212448562,
                0.5239510995370369,
                0.15325788751714708,
                0.3290369941700959,
                0.637890625,
                0.3816775977366253,
                0.1395811899862828,
                0.2820240162037041,
                0.40538596322016474,
            ],
        ];
        for r in 0..2 {
            for c in 0..9 {
                assert!((down[(r, c)] - want_down[r][c]).abs() < 1e-12, "({r},{c})");
            }
        }
    }

    #[test]
    fn normalisation_cases() {
        let (n, d) = normalize_minmax(&array![[0.0, 2.0], [4.0, 2.0]]);
        assert_eq!(n, array![[0.0, 0.5], [1.0, 0.5]]);
        assert!(!d);
        let (n, d) = normalize_minmax(&array![[3.0, 3.0], [3.0, 3.0]]);
        assert_eq!(n, Array2::<f64>::zeros((2, 2)));
        assert!(d);
    }

    proptest! {
        #[test]
        fn constant_grids_stay_constant(v in -5.0f64..5.0, r in 1usize..6, c in 1usize..6, tr in 1usize..12, tc in 1usize..12) {
            let out = resize_bicubic(&Array2::from_elem((r, c), v), (tr, tc));
            prop_assert_eq!(out.dim(), (tr, tc));
            prop_assert!(out.iter().all(|x| (x - v).abs() < 1e-12));
        }

        #[test]
        fn same_size_is_identity(data in proptest::collection::vec(-3.0f64..3.0, 12)) {
            let g = Array2::from_shape_vec((3, 4), data).unwrap();
            prop_assert_eq!(resize_bicubic(&g, (3, 4)), g);
        }

        #[test]
        fn normalised_range_is_exact(data in proptest::collection::vec(-100.0f64..100.0, 2..40)) {
            let g = ndarray::Array1::from(data);
            let (n, degenerate) = normalize_minmax(&g);
            if !degenerate {
                prop_assert_eq!(n.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
                prop_assert_eq!(n.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
            }
            prop_assert!(n.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
