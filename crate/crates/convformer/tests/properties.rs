//! Randomized property tests for the library's core invariants.

use convformer::csa::{gaussian_mask, Geometry};
use convformer::io::{parse_config, serialize_config, AppConfig};
use convformer::metrics::{dice, BinaryMask};
use convformer::tensor::{conv2d, ConvParams, Tensor};
use proptest::prelude::*;

fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(any::<bool>(), h * w)
        .prop_map(move |bits| BinaryMask::new(h, w, bits).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dice_is_symmetric_and_bounded(a in mask_strategy(5, 5), b in mask_strategy(5, 5)) {
        let ab = dice(&a, &b).unwrap();
        let ba = dice(&b, &a).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn conv2d_is_linear_in_the_input(
        xs in prop::collection::vec(-2.0f64..2.0, 2 * 4 * 4),
        ys in prop::collection::vec(-2.0f64..2.0, 2 * 4 * 4),
        ws in prop::collection::vec(-1.0f64..1.0, 3 * 2 * 3 * 3),
        s in -3.0f64..3.0,
    ) {
        let x = Tensor::from_vec(&[2, 4, 4], xs).unwrap();
        let y = Tensor::from_vec(&[2, 4, 4], ys).unwrap();
        let w = Tensor::from_vec(&[3, 2, 3, 3], ws).unwrap();
        let p = ConvParams::new(w, Tensor::zeros(&[3])).unwrap();
        // conv(x + s*y) == conv(x) + s*conv(y)
        let mut combined = x.clone();
        combined.add_scaled_assign(&y, s).unwrap();
        let lhs = conv2d(&combined, &p).unwrap();
        let cx = conv2d(&x, &p).unwrap();
        let cy = conv2d(&y, &p).unwrap();
        let mut rhs = cx.clone();
        rhs.add_scaled_assign(&cy, s).unwrap();
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((a - b).abs() <= 1e-10, "{} vs {}", a, b);
        }
    }

    #[test]
    fn gaussian_mask_depends_only_on_offset(
        theta in 0.01f64..0.99,
        alpha in 0.1f64..1.0,
    ) {
        let geom = Geometry { d: 2, input_h: 16, input_w: 16 };
        let m = gaussian_mask(theta, alpha, 4, 4, &geom);
        for i in 0..4usize {
            for j in 0..4usize {
                for mm in 0..4usize {
                    for nn in 0..4usize {
                        let v = m.at4(i, j, mm, nn);
                        prop_assert!(v > 0.0 && v <= 1.0);
                        // symmetric in query/key swap
                        prop_assert_eq!(v, m.at4(mm, nn, i, j));
                        // equal offsets give equal values
                        if i + 1 < 4 && mm + 1 < 4 {
                            prop_assert_eq!(v, m.at4(i + 1, j, mm + 1, nn));
                        }
                    }
                }
                prop_assert_eq!(m.at4(i, j, i, j), 1.0);
            }
        }
    }

    #[test]
    fn config_round_trips_for_arbitrary_values(
        lr in 1e-6f64..1.0,
        alpha in 0.01f64..1.0,
        heads in 1usize..8,
        epochs in 1usize..1000,
        augment in any::<bool>(),
    ) {
        let cfg = AppConfig { lr, alpha, heads, epochs, augment, ..AppConfig::default() };
        let text = serialize_config(&cfg);
        prop_assert_eq!(parse_config(&text).unwrap(), cfg);
    }
}
