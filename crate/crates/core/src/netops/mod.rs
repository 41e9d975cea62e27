//! Differentiable building blocks shared by the 2D and 3D networks, each
//! with an explicit backward pass, plus the finite-difference checker that
//! certifies them.

mod activation;
mod conv;
mod dense;
mod gradcheck;
mod optim;
mod pool;
mod tensor;

pub use activation::{relu, relu_backward, relu_inplace, sigmoid, sigmoid_backward, sigmoid_scalar};
pub use conv::{
    conv2d, conv2d_backward, conv2d_backward_with, conv2d_with, conv3d, conv3d_backward, conv3d_backward_with,
    conv3d_with, ConvGeometry, ConvGrads,
};
pub use dense::{dense, dense_backward, DenseGrads};
pub use gradcheck::{
    grad_check, Compose, Conv2dOp, Conv3dOp, Corrupted, DenseOp, DiffOp, GradCheckReport, MaxPoolOp, ReluOp, SigmoidOp,
    UpsampleOp,
};
pub use optim::{init_uniform, Adam, AdamConfig};
pub use pool::{maxpool, maxpool_backward, maxpool_dense, upsample, upsample_backward};
pub use tensor::{concat_channels, split_channels, Real, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    /// Nested-loop same-padded 3D cross-correlation.
    fn conv3d_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (xs, ws) = (x.shape(), w.shape());
        let (nb, c, d, h, wd) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
        let (k, kd, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
        let mut out = Tensor::zeros(vec![nb, k, d, h, wd]);
        for bi in 0..nb {
            for ki in 0..k {
                for z in 0..d {
                    for y in 0..h {
                        for xx in 0..wd {
                            let mut acc = b.data()[ki];
                            for ci in 0..c {
                                for a in 0..kd {
                                    for bb in 0..kh {
                                        for cc in 0..kw {
                                            let iz = z as isize + a as isize - (kd / 2) as isize;
                                            let iy = y as isize + bb as isize - (kh / 2) as isize;
                                            let ix = xx as isize + cc as isize - (kw / 2) as isize;
                                            if iz < 0
                                                || iy < 0
                                                || ix < 0
                                                || iz >= d as isize
                                                || iy >= h as isize
                                                || ix >= wd as isize
                                            {
                                                continue;
                                            }
                                            let xi = (((bi * c + ci) * d + iz as usize) * h + iy as usize) * wd
                                                + ix as usize;
                                            let wi = (((ki * c + ci) * kd + a) * kh + bb) * kw + cc;
                                            acc += x.data()[xi] * w.data()[wi];
                                        }
                                    }
                                }
                            }
                            out.data_mut()[(((bi * k + ki) * d + z) * h + y) * wd + xx] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_identity_and_box_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_t(&[1, 1, 5, 5], &mut rng);
        let one = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let zb = Tensor::zeros(vec![1]);
        assert_eq!(conv2d(&x, &one, &zb).unwrap(), x);

        let c = Tensor::full(vec![1, 1, 5, 5], 2.5f64);
        let ones = Tensor::full(vec![1, 1, 3, 3], 1.0);
        let y = conv2d(&c, &ones, &zb).unwrap();
        assert!((y.data()[2 * 5 + 2] - 22.5).abs() < 1e-12);
        // corner only sees four taps
        assert!((y.data()[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn conv2d_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_t(&[1, 2, 5, 5], &mut rng);
        let w = rand_t(&[3, 2, 3, 3], &mut rng);
        let b = rand_t(&[3], &mut rng);
        let y = conv2d(&x, &w, &b).unwrap();
        let x5 = x.clone().reshape(vec![1, 2, 1, 5, 5]).unwrap();
        let w5 = w.clone().reshape(vec![3, 2, 1, 3, 3]).unwrap();
        let oracle = conv3d_oracle(&x5, &w5, &b).reshape(vec![1, 3, 5, 5]).unwrap();
        assert!(y.max_abs_diff(&oracle) < 1e-6);
        let y32 = conv2d(&x.cast::<f32>(), &w.cast::<f32>(), &b.cast::<f32>()).unwrap();
        assert!(y32.cast::<f64>().max_abs_diff(&oracle) < 1e-5);
    }

    #[test]
    fn conv3d_identity_box_sum_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_t(&[1, 1, 3, 4, 5], &mut rng);
        let zb = Tensor::zeros(vec![1]);
        assert_eq!(conv3d(&x, &Tensor::new(vec![1, 1, 1, 1, 1], vec![1.0]).unwrap(), &zb).unwrap(), x);
        let c = Tensor::full(vec![1, 1, 5, 5, 5], 1.5f64);
        let y = conv3d(&c, &Tensor::full(vec![1, 1, 3, 3, 3], 1.0), &zb).unwrap();
        assert!((y.data()[(2 * 5 + 2) * 5 + 2] - 40.5).abs() < 1e-12);

        let x = rand_t(&[2, 2, 3, 4, 5], &mut rng);
        let w = rand_t(&[3, 2, 3, 3, 3], &mut rng);
        let b = rand_t(&[3], &mut rng);
        assert!(conv3d(&x, &w, &b).unwrap().max_abs_diff(&conv3d_oracle(&x, &w, &b)) < 1e-6);
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_even_kernels() {
        let x = Tensor::<f64>::zeros(vec![1, 2, 4, 4]);
        let w = Tensor::<f64>::zeros(vec![1, 3, 3, 3]);
        assert!(matches!(conv2d(&x, &w, &Tensor::zeros(vec![1])), Err(crate::Error::Shape(_))));
        let w = Tensor::<f64>::zeros(vec![1, 2, 2, 2]);
        assert!(conv2d(&x, &w, &Tensor::zeros(vec![1])).is_err());
    }

    #[test]
    fn dilated_valid_conv_matches_strided_taps() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_t(&[1, 2, 9, 10], &mut rng);
        let w = rand_t(&[2, 2, 3, 3], &mut rng);
        let b = rand_t(&[2], &mut rng);
        let y = conv2d_with(&x, &w, &b, [0, 0], [3, 2]).unwrap();
        assert_eq!(y.shape(), &[1, 2, 3, 6]);
        for k in 0..2 {
            for oy in 0..3 {
                for ox in 0..6 {
                    let mut acc = b.data()[k];
                    for c in 0..2 {
                        for ty in 0..3 {
                            for tx in 0..3 {
                                acc += x.data()[(c * 9 + oy + 3 * ty) * 10 + ox + 2 * tx]
                                    * w.data()[((k * 2 + c) * 3 + ty) * 3 + tx];
                            }
                        }
                    }
                    assert!((y.data()[(k * 3 + oy) * 6 + ox] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn maxpool_cases() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0f64]).unwrap();
        assert_eq!(maxpool(&x, &[2, 2]).unwrap().data(), &[4.0]);
        let c = Tensor::full(vec![1, 2, 4, 4, 4], 3.0f64);
        assert!(maxpool(&c, &[1, 2, 2]).unwrap().data().iter().all(|&v| v == 3.0));
        assert!(maxpool(&Tensor::<f64>::zeros(vec![1, 1, 3, 4]), &[2, 2]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_t(&[2, 3, 4, 6, 4], &mut rng);
        let y = maxpool(&x, &[2, 3, 2]).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2, 2, 2]);
        for bc in 0..6 {
            for oz in 0..2 {
                for oy in 0..2 {
                    for ox in 0..2 {
                        let mut m = f64::NEG_INFINITY;
                        for dz in 0..2 {
                            for dy in 0..3 {
                                for dx in 0..2 {
                                    m = m.max(x.data()[((bc * 4 + oz * 2 + dz) * 6 + oy * 3 + dy) * 4 + ox * 2 + dx]);
                                }
                            }
                        }
                        assert_eq!(y.data()[((bc * 2 + oz) * 2 + oy) * 2 + ox], m);
                    }
                }
            }
        }
    }

    #[test]
    fn dense_pooling_samples_every_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_t(&[1, 2, 12, 12], &mut rng);
        let d = maxpool_dense(&x, &[3, 3], &[2, 2]).unwrap();
        assert_eq!(d.shape(), &[1, 2, 8, 8]);
        for c in 0..2 {
            for y in 0..8 {
                for xx in 0..8 {
                    let mut m = f64::NEG_INFINITY;
                    for ty in 0..3 {
                        for tx in 0..3 {
                            m = m.max(x.data()[(c * 12 + y + 2 * ty) * 12 + xx + 2 * tx]);
                        }
                    }
                    assert_eq!(d.data()[(c * 8 + y) * 8 + xx], m);
                }
            }
        }
    }

    #[test]
    fn upsample_cases() {
        let x = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 2.0f64]).unwrap();
        assert_eq!(upsample(&x, &[1, 1]).unwrap(), x);
        let y = upsample(&x, &[2, 2]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 4]);
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        assert!(upsample(&x, &[0, 1]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = rand_t(&[2, 2, 2, 3, 3], &mut rng);
        let f = [2, 2, 3];
        assert_eq!(maxpool(&upsample(&r, &f).unwrap(), &f).unwrap(), r);
    }

    #[test]
    fn dense_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_t(&[3, 4], &mut rng);
        let eye = Tensor::from_fn(vec![4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        assert_eq!(dense(&x, &eye, &Tensor::zeros(vec![4])).unwrap(), x);
        let b = rand_t(&[5], &mut rng);
        let y = dense(&x, &Tensor::zeros(vec![5, 4]), &b).unwrap();
        for row in y.data().chunks(5) {
            assert_eq!(row, b.data());
        }
        let w = rand_t(&[5, 4], &mut rng);
        let y = dense(&x, &w, &b).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let mut acc = b.data()[j];
                for k in 0..4 {
                    acc += x.data()[i * 4 + k] * w.data()[j * 4 + k];
                }
                assert!((y.data()[i * 5 + j] - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn activation_cases() {
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let x: f64 = rng.random_range(-40.0..40.0);
            assert!((sigmoid_scalar(x) + sigmoid_scalar(-x) - 1.0).abs() < 1e-12);
            assert!((sigmoid_scalar(x) - 1.0 / (1.0 + (-x).exp())).abs() < 1e-12);
        }
        let mut last = 0.0;
        for i in 0..200 {
            let s = sigmoid_scalar(i as f64 * 0.25);
            assert!(s >= last);
            last = s;
        }
        let t = rand_t(&[50], &mut rng);
        let r = relu(&t);
        for (a, b) in t.data().iter().zip(r.data()) {
            assert_eq!(*b, a.max(0.0));
        }
    }

    #[test]
    fn conv_is_linear_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_t(&[1, 2, 4, 5, 5], &mut rng);
        let y = rand_t(&[1, 2, 4, 5, 5], &mut rng);
        let w = rand_t(&[3, 2, 3, 3, 3], &mut rng);
        let b = rand_t(&[3], &mut rng);
        let zb = Tensor::zeros(vec![3]);
        let (a, c) = (0.7, -1.3);
        let mix = Tensor::new(x.shape().to_vec(), x.data().iter().zip(y.data()).map(|(p, q)| a * p + c * q).collect())
            .unwrap();
        let lhs = conv3d(&mix, &w, &b).unwrap().map(|v| v);
        let fx = conv3d(&x, &w, &zb).unwrap();
        let fy = conv3d(&y, &w, &zb).unwrap();
        let rhs = Tensor::new(
            lhs.shape().to_vec(),
            fx.data()
                .iter()
                .zip(fy.data())
                .enumerate()
                .map(|(i, (p, q))| a * p + c * q + b.data()[(i / 100) % 3])
                .collect(),
        )
        .unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-6);
    }

    #[test]
    fn corrupted_gradient_fails_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let point = vec![rand_t(&[2, 3], &mut rng), rand_t(&[4, 3], &mut rng), rand_t(&[4], &mut rng)];
        let ok = grad_check(&DenseOp, &point, 1e-5, 1e-4).unwrap();
        assert!(ok.pass, "{ok:?}");
        let bad = Corrupted { inner: DenseOp, arg: 1, index: 5, factor: 1.1 };
        let r = grad_check(&bad, &point, 1e-5, 1e-4).unwrap();
        assert!(!r.pass);
        assert!(r.max_rel_error > 0.05);
    }

    #[test]
    fn conv3d_grad_check_on_small_volume() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let point =
            vec![rand_t(&[1, 1, 4, 6, 6], &mut rng), rand_t(&[2, 1, 3, 3, 3], &mut rng), rand_t(&[2], &mut rng)];
        let r = grad_check(&Conv3dOp, &point, 1e-5, 1e-4).unwrap();
        assert!(r.pass, "{r:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn output_shapes_follow_shape_functions(
            b in 1usize..3, c in 1usize..4, k in 1usize..4,
            d in 1usize..4, h in 1usize..4, w in 1usize..4, f in 1usize..3,
        ) {
            let x = Tensor::<f32>::zeros(vec![b, c, d * f, h * f, w * f]);
            let kern = Tensor::<f32>::zeros(vec![k, c, 3, 1, 3]);
            prop_assert_eq!(conv3d(&x, &kern, &Tensor::zeros(vec![k])).unwrap().shape().to_vec(), vec![b, k, d * f, h * f, w * f]);
            prop_assert_eq!(maxpool(&x, &[f, f, f]).unwrap().shape().to_vec(), vec![b, c, d, h, w]);
            prop_assert_eq!(upsample(&x, &[f, 1, f]).unwrap().shape().to_vec(), vec![b, c, d * f * f, h * f, w * f * f]);
            let x2 = Tensor::<f32>::zeros(vec![b, c * h]);
            prop_assert_eq!(dense(&x2, &Tensor::zeros(vec![k, c * h]), &Tensor::zeros(vec![k])).unwrap().shape().to_vec(), vec![b, k]);
        }
    }
}
