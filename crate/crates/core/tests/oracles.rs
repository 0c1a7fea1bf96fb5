//! Public kernels against naive re-derivations.

use approx::assert_abs_diff_eq;
use bgnet::bilateral::GuideParams;
use bgnet::reference::{apply_operator, fit_grid, synth_image, OperatorSpec};
use bgnet::{apply_affine, compute_guide, conv2d, dense, downsample_to_lowres, enhance, psnr, ModelParams, NetConfig, Tensor};
use proptest::prelude::*;

fn tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Tensor::from_fn(shape, |_| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    })
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize) -> Vec<f64> {
    let [h, wd, cin] = x.shape().try_into().unwrap();
    let cout = w.shape()[3];
    let (ho, wo) = (h.div_ceil(stride), wd.div_ceil(stride));
    let mut out = vec![0.0; ho * wo * cout];
    for oy in 0..ho {
        for ox in 0..wo {
            for co in 0..cout {
                let mut s = b.data()[co];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = ((oy * stride + ky) as isize - 1, (ox * stride + kx) as isize - 1);
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            s += w.at(&[ky, kx, ci, co]) * x.at(&[iy as usize, ix as usize, ci]);
                        }
                    }
                }
                out[(oy * wo + ox) * cout + co] = s;
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn conv2d_matches_naive(h in 1usize..9, w in 1usize..9, cin in 1usize..4, cout in 1usize..4, stride in 1usize..3, seed in any::<u64>()) {
        let x = tensor(&[h, w, cin], seed);
        let k = tensor(&[3, 3, cin, cout], seed ^ 1);
        let b = tensor(&[cout], seed ^ 2);
        let got = conv2d(&x, &k, &b, stride).unwrap();
        prop_assert_eq!(got.shape(), &[h.div_ceil(stride), w.div_ceil(stride), cout][..]);
        for (a, e) in got.data().iter().zip(naive_conv(&x, &k, &b, stride)) {
            prop_assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_matches_naive(n in 1usize..4, fin in 1usize..7, fout in 1usize..7, seed in any::<u64>()) {
        let x = tensor(&[n, fin], seed);
        let w = tensor(&[fin, fout], seed ^ 3);
        let b = tensor(&[fout], seed ^ 4);
        let got = dense(&x, &w, &b).unwrap();
        for i in 0..n {
            for o in 0..fout {
                let e = b.data()[o] + (0..fin).map(|j| x.at(&[i, j]) * w.at(&[j, o])).sum::<f64>();
                prop_assert!((got.at(&[i, o]) - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn apply_affine_matches_naive(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let a = tensor(&[h, w, 12], seed);
        let phi = tensor(&[h, w, 3], seed ^ 5);
        let got = apply_affine(&a, &phi).unwrap();
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let e = a.at(&[y, x, 4 * c + 3]) + (0..3).map(|k| a.at(&[y, x, 4 * c + k]) * phi.at(&[y, x, k])).sum::<f64>();
                    prop_assert!((got.at(&[y, x, c]) - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn guide_matches_formula(seed in any::<u64>()) {
        let mut gp = GuideParams::<f64>::identity();
        gp.ccm = tensor(&[3, 3], seed);
        gp.ccm_bias = tensor(&[3], seed ^ 6).map(|v| 0.1 * v);
        gp.slopes = tensor(&[3, 16], seed ^ 7).map(|v| 0.2 * v);
        gp.bias = tensor(&[1], seed ^ 8).map(|v| 0.5 + 0.2 * v);
        let phi = tensor(&[4, 5, 3], seed ^ 9).map(|v| 0.5 + 0.5 * v);
        let got = compute_guide(&phi, &gp).unwrap();
        for (i, p) in phi.data().chunks(3).enumerate() {
            let mut g = gp.bias.data()[0];
            for c in 0..3 {
                let u: f64 = (0..3).map(|k| gp.ccm.at(&[c, k]) * p[k]).sum::<f64>() + gp.ccm_bias.data()[c];
                g += (0..16).map(|j| gp.slopes.at(&[c, j]) * (u - gp.thresholds.at(&[c, j])).max(0.0)).sum::<f64>();
            }
            prop_assert!((got.data()[i] - g.clamp(0.0, 1.0)).abs() < 1e-12);
        }
    }
}

#[test]
fn integer_downsample_is_block_mean() {
    let img = tensor(&[12, 12, 3], 42);
    let low = downsample_to_lowres(&img, 4).unwrap();
    for y in 0..4 {
        for x in 0..4 {
            for c in 0..3 {
                let mut s = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        s += img.at(&[3 * y + dy, 3 * x + dx, c]);
                    }
                }
                assert_abs_diff_eq!(low.at(&[y, x, c]), s / 9.0, epsilon = 1e-12);
            }
        }
    }
}

#[test]
fn psnr_matches_definition() {
    let a = tensor(&[6, 5, 3], 1).map(|v| 0.5 + 0.4 * v);
    let b = tensor(&[6, 5, 3], 2).map(|v| 0.5 + 0.4 * v);
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    assert_abs_diff_eq!(psnr(&a, &b).unwrap(), -10.0 * mse.log10(), epsilon = 1e-9);
}

#[test]
fn fitted_cross_channel_grid_reproduces_operator() {
    let spec = OperatorSpec::CrossChannel {
        matrix: [0.8, 0.1, 0.05, 0.1, 0.7, 0.1, 0.0, 0.2, 0.75],
        bias: [0.03, 0.02, 0.01],
    };
    let x = synth_image(80, 72, 4);
    let y = apply_operator(&spec, &x).unwrap();
    let fit = fit_grid(&x, &y, 6, 5, 4, 1e-6).unwrap();
    assert!(psnr(&fit.render(&x).unwrap(), &y).unwrap() > 50.0);
}

#[test]
fn untrained_model_is_identity_at_any_size() {
    let model = ModelParams::<f32>::init(&NetConfig::default(), 3).unwrap();
    for (h, w) in [(1, 1), (17, 300), (301, 64)] {
        let img = synth_image(h, w, 8);
        assert!(enhance(&model, &img).unwrap().max_abs_diff(&img) < 1e-5);
    }
}
