use super::*;
use crate::tensor::{concat_channels, cross_entropy, PoolMode, ResampleMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn seeded_vec(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape, data).unwrap()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

// ---- matmul ----

#[test]
fn matmul_identity() {
    let eye = t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
    let m = t(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    let out = eye.matmul(&m).unwrap();
    assert_eq!(out.data_vec(), vec![1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_zero() {
    let z = Tensor::<f64>::zeros(&[2, 3]);
    let m = t(&[3, 4], seeded_vec(7, 12));
    let out = z.matmul(&m).unwrap();
    assert_eq!(out.shape(), vec![2, 4]);
    assert!(out.data_vec().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_matches_naive_loop() {
    let a = t(&[3, 3], seeded_vec(11, 9));
    let b = t(&[3, 3], seeded_vec(12, 9));
    let out = a.matmul(&b).unwrap();
    // independent triple-nested-loop product
    let ad = a.data_vec();
    let bd = b.data_vec();
    let mut expect = vec![0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            for p in 0..3 {
                expect[i * 3 + j] += ad[i * 3 + p] * bd[p * 3 + j];
            }
        }
    }
    assert_eq!(out.data_vec(), expect);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let a = Tensor::<f64>::zeros(&[2, 3]);
    let b = Tensor::<f64>::zeros(&[4, 2]);
    let err = a.matmul(&b).unwrap_err().to_string();
    assert!(err.contains("2x3") && err.contains("4x2"), "{err}");
}

// ---- conv2d ----

#[test]
fn conv2d_unit_kernel_is_identity() {
    let x = t(&[1, 1, 3, 3], seeded_vec(20, 9));
    let k = t(&[1, 1, 1, 1], vec![1.0]);
    let b = Tensor::zeros(&[1]);
    let out = x.conv2d(&k, &b, 1, 0).unwrap();
    assert_eq!(out.data_vec(), x.data_vec());
}

#[test]
fn conv2d_zero_kernel_zero_output() {
    let x = t(&[2, 3, 4, 4], seeded_vec(21, 96));
    let k = Tensor::zeros(&[2, 3, 3, 3]);
    let b = Tensor::zeros(&[2]);
    let out = x.conv2d(&k, &b, 1, 1).unwrap();
    assert!(out.data_vec().iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_matches_naive_loop() {
    let x = t(&[1, 1, 5, 5], seeded_vec(22, 25));
    let k = t(&[1, 1, 3, 3], seeded_vec(23, 9));
    let b = t(&[1], vec![0.25]);
    let out = x.conv2d(&k, &b, 1, 1).unwrap();
    let xd = x.data_vec();
    let kd = k.data_vec();
    let mut expect = vec![0.0; 25];
    for oy in 0..5i64 {
        for ox in 0..5i64 {
            let mut acc = 0.25;
            for ky in 0..3i64 {
                for kx in 0..3i64 {
                    let iy = oy + ky - 1;
                    let ix = ox + kx - 1;
                    if iy >= 0 && iy < 5 && ix >= 0 && ix < 5 {
                        acc += xd[(iy * 5 + ix) as usize] * kd[(ky * 3 + kx) as usize];
                    }
                }
            }
            expect[(oy * 5 + ox) as usize] = acc;
        }
    }
    assert_close(&out.data_vec(), &expect, 1e-12);
}

#[test]
fn conv2d_rejects_non_integral_output() {
    // (6 - 3) is not divisible by stride 2
    let x = Tensor::<f64>::zeros(&[1, 1, 6, 6]);
    let k = Tensor::zeros(&[1, 1, 3, 3]);
    let b = Tensor::zeros(&[1]);
    assert!(matches!(
        x.conv2d(&k, &b, 2, 0),
        Err(ClanError::Config { .. })
    ));
}

// ---- pool2d ----

#[test]
fn pool2d_constant_input_both_modes() {
    let x = Tensor::full(&[1, 1, 4, 4], 3.5f64);
    for mode in [PoolMode::Avg, PoolMode::Max] {
        let out = x.pool2d(mode, 2, 2).unwrap();
        assert!(out.data_vec().iter().all(|&v| v == 3.5));
    }
}

#[test]
fn pool2d_avg_and_max_on_known_window() {
    let x = t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    assert_eq!(x.pool2d(PoolMode::Avg, 2, 2).unwrap().item(), 2.5);
    assert_eq!(x.pool2d(PoolMode::Max, 2, 2).unwrap().item(), 4.0);
}

#[test]
fn pool2d_window_larger_than_extent_is_config_error() {
    let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
    assert!(matches!(
        x.pool2d(PoolMode::Avg, 3, 1),
        Err(ClanError::Config { .. })
    ));
}

#[test]
fn max_pool_backward_routes_to_single_element_per_window() {
    let x = Tensor::param(&[1, 1, 4, 4], seeded_vec(30, 16)).unwrap();
    let out = x.pool2d(PoolMode::Max, 2, 2).unwrap();
    out.sum_all().backward().unwrap();
    let g = x.grad().unwrap();
    // one unit of gradient per window, nowhere else
    assert_eq!(g.iter().filter(|&&v| v == 1.0).count(), 4);
    assert_eq!(g.iter().filter(|&&v| v == 0.0).count(), 12);
}

#[test]
fn max_pool_tie_break_is_first_flat_index() {
    let x = Tensor::param(&[1, 1, 2, 2], vec![7.0, 7.0, 7.0, 7.0]).unwrap();
    let out = x.pool2d(PoolMode::Max, 2, 2).unwrap();
    out.sum_all().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
}

// ---- channel_pool ----

#[test]
fn channel_pool_single_channel_copies_input() {
    let x = t(&[1, 1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]);
    let out = x.channel_pool().unwrap();
    assert_eq!(out.shape(), vec![1, 2, 2, 2]);
    let d = out.data_vec();
    assert_eq!(&d[0..4], &[0.1, 0.2, 0.3, 0.4]);
    assert_eq!(&d[4..8], &[0.1, 0.2, 0.3, 0.4]);
}

#[test]
fn channel_pool_constant_over_channels() {
    let x = Tensor::full(&[2, 5, 3, 3], 0.7f64);
    let out = x.channel_pool().unwrap();
    assert!(out.data_vec().iter().all(|&v| (v - 0.7).abs() < 1e-15));
}

#[test]
fn channel_pool_matches_naive_loop() {
    let x = t(&[1, 4, 2, 2], seeded_vec(31, 16));
    let out = x.channel_pool().unwrap();
    let xd = x.data_vec();
    for p in 0..4 {
        let vals: Vec<f64> = (0..4).map(|c| xd[c * 4 + p]).collect();
        let mean = vals.iter().sum::<f64>() / 4.0;
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let d = out.data_vec();
        assert!((d[p] - mean).abs() < 1e-12);
        assert_eq!(d[4 + p], max);
    }
}

// ---- softmax_rows ----

#[test]
fn softmax_uniform_row() {
    let x = t(&[1, 4], vec![2.0; 4]);
    let out = x.softmax_rows().unwrap();
    assert_close(&out.data_vec(), &[0.25; 4], 1e-12);
}

#[test]
fn softmax_closed_form_quarter_three_quarters() {
    // softmax([0, ln 3]) = [1/(1+3), 3/(1+3)]
    let x = t(&[1, 2], vec![0.0, 3.0f64.ln()]);
    let out = x.softmax_rows().unwrap();
    assert_close(&out.data_vec(), &[0.25, 0.75], 1e-12);
}

#[test]
fn softmax_shift_invariance() {
    let x = t(&[2, 5], seeded_vec(40, 10));
    let shifted = x.add(&Tensor::full(&[2, 5], 13.25)).unwrap();
    let a = x.softmax_rows().unwrap().data_vec();
    let b = shifted.softmax_rows().unwrap().data_vec();
    assert_close(&a, &b, 1e-6);
}

#[test]
fn softmax_rejects_nan() {
    let x = t(&[1, 2], vec![f64::NAN, 0.0]);
    assert!(matches!(x.softmax_rows(), Err(ClanError::Numeric { .. })));
}

// ---- resample ----

#[test]
fn resample_identity_when_target_equals_source() {
    let x = t(&[1, 2, 3, 3], seeded_vec(50, 18));
    let out = x.resample(3, 3, ResampleMode::Nearest).unwrap();
    assert_eq!(out.data_vec(), x.data_vec());
}

#[test]
fn resample_nearest_replicates_single_pixel() {
    let x = t(&[1, 1, 1, 1], vec![0.6]);
    let out = x.resample(2, 2, ResampleMode::Nearest).unwrap();
    assert_eq!(out.data_vec(), vec![0.6; 4]);
}

#[test]
fn resample_bilinear_matches_interpolation_formula() {
    let x = t(&[1, 1, 2, 2], seeded_vec(51, 4));
    let out = x.resample(4, 4, ResampleMode::Bilinear).unwrap();
    let xd = x.data_vec();
    // direct per-pixel evaluation of half-pixel-center interpolation
    let mut expect = vec![0.0; 16];
    for y in 0..4 {
        for xx in 0..4 {
            let sy = ((y as f64 + 0.5) * 2.0 / 4.0 - 0.5).clamp(0.0, 1.0);
            let sx = ((xx as f64 + 0.5) * 2.0 / 4.0 - 0.5).clamp(0.0, 1.0);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(1), (x0 + 1).min(1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            let top = xd[y0 * 2 + x0] * (1.0 - fx) + xd[y0 * 2 + x1] * fx;
            let bot = xd[y1 * 2 + x0] * (1.0 - fx) + xd[y1 * 2 + x1] * fx;
            expect[y * 4 + xx] = top * (1.0 - fy) + bot * fy;
        }
    }
    assert_close(&out.data_vec(), &expect, 1e-12);
}

#[test]
fn resample_downsample_is_average_pooling() {
    let x = t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    let out = x.resample(1, 1, ResampleMode::Nearest).unwrap();
    assert_eq!(out.item(), 2.5);
}

#[test]
fn resample_rejects_fractional_downsample() {
    let x = Tensor::<f64>::zeros(&[1, 1, 6, 6]);
    assert!(matches!(
        x.resample(4, 4, ResampleMode::Nearest),
        Err(ClanError::Config { .. })
    ));
}

// ---- concat / slice ----

#[test]
fn concat_single_input_is_identity() {
    let x = t(&[1, 3, 2, 2], seeded_vec(60, 12));
    let out = concat_channels(&[x.clone()]).unwrap();
    assert_eq!(out.data_vec(), x.data_vec());
}

#[test]
fn concat_zero_tensors_sums_channels() {
    let a = Tensor::<f64>::zeros(&[2, 3, 2, 2]);
    let b = Tensor::<f64>::zeros(&[2, 5, 2, 2]);
    let out = concat_channels(&[a, b]).unwrap();
    assert_eq!(out.shape(), vec![2, 8, 2, 2]);
    assert!(out.data_vec().iter().all(|&v| v == 0.0));
}

#[test]
fn concat_then_slice_recovers_inputs_bitwise() {
    let a = t(&[2, 3, 2, 2], seeded_vec(61, 24));
    let b = t(&[2, 2, 2, 2], seeded_vec(62, 16));
    let cat = concat_channels(&[a.clone(), b.clone()]).unwrap();
    assert_eq!(cat.slice_channels(0, 3).unwrap().data_vec(), a.data_vec());
    assert_eq!(cat.slice_channels(3, 2).unwrap().data_vec(), b.data_vec());
}

#[test]
fn concat_mismatched_extents_is_dimension_error() {
    let a = Tensor::<f64>::zeros(&[1, 2, 2, 2]);
    let b = Tensor::<f64>::zeros(&[1, 2, 3, 3]);
    assert!(matches!(
        concat_channels(&[a, b]),
        Err(ClanError::Dimension { .. })
    ));
}

// ---- elementwise ----

#[test]
fn add_zeros_is_identity() {
    let x = t(&[2, 3], seeded_vec(70, 6));
    let out = x.add(&Tensor::zeros(&[2, 3])).unwrap();
    assert_eq!(out.data_vec(), x.data_vec());
}

#[test]
fn relu_definition() {
    let x = t(&[2], vec![-1.0, 2.0]);
    assert_eq!(x.relu().data_vec(), vec![0.0, 2.0]);
}

#[test]
fn exp_of_zero_is_one() {
    assert_eq!(Tensor::<f64>::scalar(0.0).exp().item(), 1.0);
}

#[test]
fn mul_broadcasts_position_map_across_channels() {
    let x = t(&[1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    let map = t(&[1, 1, 2, 2], vec![2.0, 0.0, 1.0, 0.5]);
    let out = x.mul(&map).unwrap();
    assert_eq!(out.data_vec(), vec![2.0, 0.0, 3.0, 2.0, 10.0, 0.0, 7.0, 4.0]);
}

#[test]
fn incompatible_broadcast_is_dimension_error() {
    let x = Tensor::<f64>::zeros(&[1, 2, 2, 2]);
    let y = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
    assert!(matches!(x.add(&y), Err(ClanError::Dimension { .. })));
}

// ---- global_avg_pool ----

#[test]
fn gap_squeezes_single_pixel() {
    let x = t(&[1, 3, 1, 1], vec![0.1, 0.2, 0.3]);
    let out = x.global_avg_pool().unwrap();
    assert_eq!(out.shape(), vec![1, 3]);
    assert_eq!(out.data_vec(), vec![0.1, 0.2, 0.3]);
}

#[test]
fn gap_constant_map() {
    let x = Tensor::full(&[2, 3, 4, 4], 0.9f64);
    let out = x.global_avg_pool().unwrap();
    assert!(out.data_vec().iter().all(|&v| (v - 0.9).abs() < 1e-15));
}

#[test]
fn gap_matches_loop_mean() {
    let x = t(&[1, 2, 3, 3], seeded_vec(80, 18));
    let out = x.global_avg_pool().unwrap();
    let xd = x.data_vec();
    for c in 0..2 {
        let mean = xd[c * 9..(c + 1) * 9].iter().sum::<f64>() / 9.0;
        assert!((out.data_vec()[c] - mean).abs() < 1e-12);
    }
}

// ---- cross_entropy ----

#[test]
fn cross_entropy_uniform_logits_is_ln_k() {
    let logits = Tensor::full(&[3, 5], 0.42f64);
    let loss = cross_entropy(&logits, &[0, 2, 4]).unwrap();
    assert!((loss.item() - 5.0f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_confident_correct_is_near_zero() {
    let logits = t(&[1, 2], vec![10.0, -10.0]);
    let loss = cross_entropy(&logits, &[0]).unwrap().item();
    assert!(loss <= 1e-4);
    // closed form: log(1 + e^-20)
    assert!((loss - (1.0 + (-20.0f64).exp()).ln()).abs() < 1e-15);
}

#[test]
fn cross_entropy_decreases_with_margin() {
    let mut prev = f64::INFINITY;
    for margin in [1.0, 2.0, 4.0, 8.0, 16.0] {
        let logits = t(&[1, 3], vec![margin, 0.0, 0.0]);
        let loss = cross_entropy(&logits, &[0]).unwrap().item();
        assert!(loss < prev);
        prev = loss;
    }
}

#[test]
fn cross_entropy_rejects_out_of_range_label() {
    let logits = Tensor::<f64>::zeros(&[1, 3]);
    assert!(matches!(
        cross_entropy(&logits, &[3]),
        Err(ClanError::Data { .. })
    ));
}

// ---- backward ----

#[test]
fn backward_of_sum_is_ones() {
    let x = Tensor::param(&[2, 3], seeded_vec(90, 6)).unwrap();
    x.sum_all().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
}

#[test]
fn backward_of_sum_of_squares_is_two_x() {
    let x = Tensor::param(&[4], seeded_vec(91, 4)).unwrap();
    x.mul(&x).unwrap().sum_all().backward().unwrap();
    let expect: Vec<f64> = x.data_vec().iter().map(|v| 2.0 * v).collect();
    assert_close(&x.grad().unwrap(), &expect, 1e-12);
}

#[test]
fn gradients_accumulate_across_fan_out() {
    let x = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    // y = sum(x) + sum(x) => dy/dx = 2
    let loss = x.sum_all().add(&x.sum_all()).unwrap();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0; 3]);
}

#[test]
fn repeated_backward_without_reset_accumulates() {
    let x = Tensor::param(&[2], vec![1.0, 1.0]).unwrap();
    let loss = x.sum_all();
    loss.backward().unwrap();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0; 2]);
    x.zero_grad();
    assert!(x.grad().is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let x = Tensor::param(&[2, 2], vec![1.0; 4]).unwrap();
    let y = x.relu();
    assert!(matches!(y.backward(), Err(ClanError::Usage { .. })));
}

#[test]
fn no_grad_inputs_build_no_graph() {
    let x = t(&[2, 2], vec![1.0; 4]);
    let y = x.relu().sum_all();
    assert!(!y.requires_grad());
}

#[test]
fn forward_is_bitwise_deterministic() {
    let x = t(&[2, 4, 6, 6], seeded_vec(92, 288));
    let k = t(&[3, 4, 3, 3], seeded_vec(93, 108));
    let b = t(&[3], seeded_vec(94, 3));
    let a = x.conv2d(&k, &b, 1, 1).unwrap().data_vec();
    let bb = x.conv2d(&k, &b, 1, 1).unwrap().data_vec();
    assert!(a.iter().zip(&bb).all(|(p, q)| p.to_bits() == q.to_bits()));
}

// ---- property tests ----

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_are_stochastic_and_shift_invariant(
            rows in 1usize..4,
            cols in 1usize..8,
            seed in 0u64..1000,
            shift in -50.0f64..50.0,
        ) {
            let x = t(&[rows, cols], seeded_vec(seed, rows * cols));
            let y = x.softmax_rows().unwrap().data_vec();
            for r in 0..rows {
                let sum: f64 = y[r * cols..(r + 1) * cols].iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
                prop_assert!(y[r * cols..(r + 1) * cols].iter().all(|&v| v >= 0.0));
            }
            let shifted = x.add(&Tensor::full(&[rows, cols], shift)).unwrap();
            let ys = shifted.softmax_rows().unwrap().data_vec();
            for (a, b) in y.iter().zip(&ys) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn concat_slice_round_trip_is_bitwise(
            c1 in 1usize..5,
            c2 in 1usize..5,
            seed in 0u64..1000,
        ) {
            let a = t(&[2, c1, 3, 3], seeded_vec(seed, 2 * c1 * 9));
            let b = t(&[2, c2, 3, 3], seeded_vec(seed + 1, 2 * c2 * 9));
            let cat = concat_channels(&[a.clone(), b.clone()]).unwrap();
            let ra = cat.slice_channels(0, c1).unwrap().data_vec();
            let rb = cat.slice_channels(c1, c2).unwrap().data_vec();
            prop_assert!(ra.iter().zip(&a.data_vec()).all(|(x, y)| x.to_bits() == y.to_bits()));
            prop_assert!(rb.iter().zip(&b.data_vec()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
