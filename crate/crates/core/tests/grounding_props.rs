use grounded_audit::grounding::{apply_visual_grounding, combine_gradcam, resize_heatmap, threshold_mask};
use grounded_audit::model::{Heatmap, ResizeMode};
use ndarray::{array, Array2, Array3};
use proptest::prelude::*;

fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
    assert_eq!(a.dim(), b.dim());
    for (x, y) in a.iter().zip(b.iter()) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn hand_computed_gradcam_fixtures() {
    let a = array![[[1.0, 2.0], [3.0, 4.0]]];
    let ones = Array3::ones((1, 2, 2));
    let h = combine_gradcam(&a, &ones).unwrap();
    assert_close(h.values(), &array![[0.0, 1.0 / 3.0], [2.0 / 3.0, 1.0]], 1e-6);

    let h = combine_gradcam(&a, &Array3::zeros((1, 2, 2))).unwrap();
    assert_close(h.values(), &Array2::zeros((2, 2)), 1e-6);

    let neg = array![[[-1.0, -2.0], [-3.0, -4.0]]];
    let h = combine_gradcam(&neg, &ones).unwrap();
    assert_close(h.values(), &Array2::zeros((2, 2)), 1e-6);
}

#[test]
fn two_map_fixture() {
    // w = (0.5, -1): raw = ReLU(0.5*A0 - A1).
    let maps = array![[[2.0, 4.0], [6.0, 0.0]], [[1.0, 1.0], [1.0, 0.0]]];
    let grads = array![[[0.5, 0.5], [0.5, 0.5]], [[-2.0, 0.0], [-1.0, -1.0]]];
    let h = combine_gradcam(&maps, &grads).unwrap();
    assert_close(h.values(), &array![[0.0, 0.5], [1.0, 0.0]], 1e-12);
}

#[test]
fn threshold_and_masking_fixtures() {
    let h = Heatmap::new(array![[0.8, 0.6], [0.71, 0.0]], (2, 2)).unwrap();
    let m = threshold_mask(&h, 0.7).unwrap();
    assert_eq!(m.values(), &array![[true, false], [true, false]]);
    assert_eq!(threshold_mask(&h, 0.0).unwrap().count(), 4);

    let gray = Array3::from_elem((2, 2, 3), 0.5);
    let h = Heatmap::new(array![[0.9, 0.1], [0.9, 0.1]], (2, 2)).unwrap();
    let g = apply_visual_grounding(&gray, &h, 0.7).unwrap();
    for y in 0..2 {
        for c in 0..3 {
            assert_eq!(g[[y, 0, c]], 0.5);
            assert_eq!(g[[y, 1, c]], 0.0);
        }
    }
}

#[test]
fn bilinear_fixture() {
    let h = Heatmap::new(array![[0.0, 1.0], [0.0, 1.0]], (2, 2)).unwrap();
    let r = resize_heatmap(&h, (2, 4), ResizeMode::Bilinear).unwrap();
    let row = array![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
    for y in 0..2 {
        for x in 0..4 {
            assert!((r.values()[[y, x]] - row[x]).abs() < 1e-12);
        }
    }
}

fn tensors() -> impl Strategy<Value = (Array3<f64>, Array3<f64>)> {
    (1usize..4, 1usize..6, 1usize..6).prop_flat_map(|(f, h, w)| {
        let n = f * h * w;
        (
            prop::collection::vec(-10.0f64..10.0, n),
            prop::collection::vec(-10.0f64..10.0, n),
        )
            .prop_map(move |(a, g)| {
                (
                    Array3::from_shape_vec((f, h, w), a).unwrap(),
                    Array3::from_shape_vec((f, h, w), g).unwrap(),
                )
            })
    })
}

fn heatmaps() -> impl Strategy<Value = Heatmap> {
    (1usize..8, 1usize..8).prop_flat_map(|(h, w)| {
        prop::collection::vec(0.0f64..=1.0, h * w)
            .prop_map(move |v| Heatmap::new(Array2::from_shape_vec((h, w), v).unwrap(), (h, w)).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 10_000, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn heatmap_values_lie_in_unit_interval((maps, grads) in tensors()) {
        let h = combine_gradcam(&maps, &grads).unwrap();
        prop_assert!(h.values().iter().all(|v| (0.0..=1.0).contains(v)));
        let max = h.values().iter().cloned().fold(0.0, f64::max);
        // Either nothing is highlighted or the peak is exactly one.
        prop_assert!(max == 0.0 || max == 1.0);
    }

    #[test]
    fn threshold_masks_shrink_as_tau_grows(h in heatmaps(), t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = threshold_mask(&h, hi).unwrap();
        let b = threshold_mask(&h, lo).unwrap();
        prop_assert!(a.is_subset_of(&b));
    }

    #[test]
    fn grounding_is_idempotent(h in heatmaps(), tau in 0.0f64..=1.0, c in 1usize..4, seed in 0u64..1000) {
        let (rows, cols) = h.shape();
        let img = Array3::from_shape_fn((rows, cols, c), |(y, x, k)| ((y * 31 + x * 17 + k * 7 + seed as usize) % 101) as f64 / 100.0);
        let once = apply_visual_grounding(&img, &h, tau).unwrap();
        let twice = apply_visual_grounding(&once, &h, tau).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn gradcam_ignores_positive_gradient_scale((maps, grads) in tensors(), scale in 1e-3f64..1e3) {
        let a = combine_gradcam(&maps, &grads).unwrap();
        let b = combine_gradcam(&maps, &grads.mapv(|g| g * scale)).unwrap();
        for (x, y) in a.values().iter().zip(b.values().iter()) {
            prop_assert!((x - y).abs() <= 1e-9, "{} vs {}", x, y);
        }
    }
}
