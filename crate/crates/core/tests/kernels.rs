use proptest::prelude::*;
use revhrnet_core::kernels::{bilinear_resize, concat_channels, conv2d, ConvGeometry};
use revhrnet_core::Tensor;

/// Straight nested-loop convolution with explicit zero padding.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Vec<f64> {
    let (n, cin, h, wd) = x.dims4("oracle").unwrap();
    let (cout, _, kh, kw) = w.dims4("oracle").unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Vec::new();
    for bi in 0..n {
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for c in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((bi * cin + c) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((o * cin + c) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

#[test]
fn all_ones_three_by_three() {
    let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0).unwrap();
    let w = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0).unwrap();
    assert_eq!(naive_conv(&x, &w, None, 1, 1), vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    assert_eq!(conv2d(&x, &w, None, 1, 1).unwrap().data(), naive_conv(&x, &w, None, 1, 1).as_slice());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_nested_loops(
        n in 1usize..3, cin in 1usize..5, cout in 1usize..5,
        h in 3usize..10, w in 3usize..10, k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..3, pad in 0usize..3, seed in 0u64..1000,
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let x = Tensor::<f64>::from_fn(&[n, cin, h, w], |i| ((i as u64 * 7 + seed) % 13) as f64 - 6.0).unwrap();
        let wt = Tensor::<f64>::from_fn(&[cout, cin, k, k], |i| ((i as u64 * 5 + seed) % 9) as f64 * 0.25 - 1.0).unwrap();
        let b = Tensor::<f64>::from_fn(&[cout], |i| i as f64).unwrap();
        let fast = conv2d(&x, &wt, Some(&b), stride, pad).unwrap();
        let slow = naive_conv(&x, &wt, Some(&b), stride, pad);
        // integer-valued operands: both routes are exact
        prop_assert_eq!(fast.data(), slow.as_slice());
        let g = ConvGeometry::new(x.shape(), wt.shape(), None, stride, pad).unwrap();
        prop_assert_eq!(fast.shape(), &g.output_shape()[..]);
        prop_assert_eq!(g.out_h, (h + 2 * pad - k) / stride + 1);
        prop_assert_eq!(g.out_w, (w + 2 * pad - k) / stride + 1);
    }

    #[test]
    fn resize_and_concat_shapes(
        n in 1usize..3, c in 1usize..4, h in 1usize..9, w in 1usize..9,
        oh in 1usize..17, ow in 1usize..17, extra in 1usize..4,
    ) {
        let x = Tensor::<f32>::from_fn(&[n, c, h, w], |i| i as f32).unwrap();
        let y = bilinear_resize(&x, oh, ow).unwrap();
        prop_assert_eq!(y.shape(), &[n, c, oh, ow][..]);
        // interpolation stays within the source range
        let (lo, hi) = (0.0, (n * c * h * w - 1) as f32);
        prop_assert!(y.data().iter().all(|&v| v >= lo && v <= hi));
        let z = Tensor::<f32>::zeros(&[n, extra, h, w]).unwrap();
        let cat = concat_channels(&[x, z]).unwrap();
        prop_assert_eq!(cat.shape(), &[n, c + extra, h, w][..]);
    }
}
