use padforge::conv::{conv2d, conv2d_counted, ConvKernel, ConvKind, MacCounter};
use padforge::cost::{flop_cost, speedup_ratio, ConvShape, ConvVariant};
use padforge::Tensor;
use proptest::prelude::*;

fn tensor(shape: [usize; 4], values: &[f64]) -> Tensor {
    Tensor::from_vec(
        shape,
        values.iter().copied().cycle().take(shape.iter().product()).collect(),
    )
    .unwrap()
}

/// (batch, channels in, channels out, kernel, height, width)
fn geometry() -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize)> {
    (
        1..=2usize,
        1..=4usize,
        1..=4usize,
        prop_oneof![Just(1usize), Just(3), Just(5)],
        1..=7usize,
        1..=7usize,
    )
}

fn values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0..1.0f64, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn depthwise_then_pointwise_equals_factorized_standard(
        (n, x, y, k, h, w) in geometry(),
        data in values(2 * 4 * 7 * 7),
        dw in values(4 * 5 * 5),
        pw in values(4 * 4),
    ) {
        let input = tensor([n, x, h, w], &data);
        let depthwise: Vec<f64> = dw[..x * k * k].to_vec();
        let pointwise: Vec<f64> = pw[..y * x].to_vec();
        let mut full = vec![0.0; y * x * k * k];
        for yo in 0..y {
            for xi in 0..x {
                for t in 0..k * k {
                    full[(yo * x + xi) * k * k + t] = depthwise[xi * k * k + t] * pointwise[yo * x + xi];
                }
            }
        }
        let separable = conv2d(
            &conv2d(&input, &ConvKernel::depthwise(x, k, depthwise).unwrap()).unwrap(),
            &ConvKernel::pointwise(y, x, pointwise).unwrap(),
        ).unwrap();
        let standard = conv2d(&input, &ConvKernel::standard(y, x, k, full).unwrap()).unwrap();
        prop_assert!(separable.max_abs_diff(&standard) <= 1e-9);
    }

    #[test]
    fn every_variant_is_linear_in_its_input(
        (n, x, y, k, h, w) in geometry(),
        d1 in values(2 * 4 * 7 * 7),
        d2 in values(2 * 4 * 7 * 7),
        weights in values(4 * 4 * 5 * 5),
        a in -2.0..2.0f64,
        b in -2.0..2.0f64,
    ) {
        let f1 = tensor([n, x, h, w], &d1);
        let f2 = tensor([n, x, h, w], &d2);
        let mixed = f1.axpby(a, &f2, b).unwrap();
        for kind in [ConvKind::Standard, ConvKind::Depthwise, ConvKind::Pointwise] {
            let kernel = match kind {
                ConvKind::Standard => ConvKernel::standard(y, x, k, weights[..y * x * k * k].to_vec()),
                ConvKind::Depthwise => ConvKernel::depthwise(x, k, weights[..x * k * k].to_vec()),
                ConvKind::Pointwise => ConvKernel::pointwise(y, x, weights[..y * x].to_vec()),
            }.unwrap();
            let lhs = conv2d(&mixed, &kernel).unwrap();
            let rhs = conv2d(&f1, &kernel).unwrap().axpby(a, &conv2d(&f2, &kernel).unwrap(), b).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-9, "{kind:?}");
        }
    }

    #[test]
    fn reciprocal_speedup_identity(k in 1..=11u64, x in 1..=2048u64, y in 1..=2048u64, d in 1..=256u64) {
        let s = speedup_ratio(ConvShape::new(k, x, y, d).unwrap());
        let expected = 1.0 / y as f64 + 1.0 / (k * k) as f64;
        prop_assert!((1.0 / s - expected).abs() <= 1e-12);
    }
}

#[test]
fn mac_counter_matches_cost_model_on_a_grid() {
    let mut shapes = 0;
    for k in [1usize, 3, 5] {
        for (x, y) in [(1usize, 1usize), (2, 3), (4, 2), (3, 8)] {
            for d in [1usize, 4, 7] {
                let input = Tensor::filled([1, x, d, d], 0.5);
                let shape = ConvShape::new(k as u64, x as u64, y as u64, d as u64).unwrap();

                let mut counter = MacCounter::new();
                conv2d_counted(
                    &input,
                    &ConvKernel::standard(y, x, k, vec![0.1; y * x * k * k]).unwrap(),
                    &mut counter,
                )
                .unwrap();
                assert_eq!(
                    counter.report(),
                    flop_cost(shape, ConvVariant::Standard),
                    "standard {shape:?}"
                );

                let mut counter = MacCounter::new();
                let mid = conv2d_counted(
                    &input,
                    &ConvKernel::depthwise(x, k, vec![0.1; x * k * k]).unwrap(),
                    &mut counter,
                )
                .unwrap();
                conv2d_counted(
                    &mid,
                    &ConvKernel::pointwise(y, x, vec![0.1; y * x]).unwrap(),
                    &mut counter,
                )
                .unwrap();
                assert_eq!(
                    counter.report(),
                    flop_cost(shape, ConvVariant::DepthwiseSeparable),
                    "separable {shape:?}"
                );
                shapes += 1;
            }
        }
    }
    assert!(shapes >= 20);
}

#[test]
fn separable_speedup_at_three_by_three_and_sixty_four_outputs() {
    for (x, d) in [(8, 7), (512, 112), (1, 1)] {
        let s = speedup_ratio(ConvShape::new(3, x, 64, d).unwrap());
        assert!((s - 576.0 / 73.0).abs() <= 1e-9);
    }
}
