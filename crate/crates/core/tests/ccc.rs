mod common;

use c5_core::ccc::{
    convolve2d, estimate_illuminant, evaluate_ccc, heat_map_from_logits, soft_argmax, softmax, uv_to_rgb, CccParams, ConvMode,
};
use c5_core::features::{ChromaHistogram, HistogramConfig};
use common::{random_stack, rng, uniform};

/// Same-size linear convolution straight from the definition, kernel centred at (n/2, n/2).
fn direct_oracle(x: &[f64], k: &[f64], n: usize) -> Vec<f64> {
    let c = (n / 2) as isize;
    let n_i = n as isize;
    let mut out = vec![0.0; n * n];
    for i in 0..n_i {
        for j in 0..n_i {
            let mut s = 0.0;
            for a in -c..n_i - c {
                for b in -c..n_i - c {
                    let (si, sj) = (i - a, j - b);
                    if (0..n_i).contains(&si) && (0..n_i).contains(&sj) {
                        s += x[(si * n_i + sj) as usize] * k[((a + c) * n_i + b + c) as usize];
                    }
                }
            }
            out[(i * n_i + j) as usize] = s;
        }
    }
    out
}

#[test]
fn convolution_matches_the_definition() {
    let mut r = rng(1);
    for n in [5, 8] {
        let x = uniform(&[n * n], -1.0, 1.0, &mut r).into_data();
        let k = uniform(&[n * n], -1.0, 1.0, &mut r).into_data();
        let want = direct_oracle(&x, &k, n);
        for mode in [ConvMode::Fft, ConvMode::Direct] {
            let got = convolve2d(&x, &k, n, mode).unwrap();
            assert!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-10), "{mode:?}");
        }
        assert!(convolve2d(&vec![0.0; n * n], &k, n, ConvMode::Fft).unwrap().iter().all(|v| v.abs() < 1e-15));
    }
}

fn zero_filter_params(n: usize, bias: Vec<f64>) -> CccParams {
    CccParams::from_bias(n, bias).unwrap()
}

#[test]
fn zero_filters_reduce_to_softmax_of_bias() {
    let mut r = rng(2);
    let cfg = HistogramConfig::new(8, -2.85, 2.85).unwrap();
    let bias = uniform(&[64], -2.0, 2.0, &mut r).into_data();
    let want = softmax(&bias);
    for _ in 0..3 {
        let h = random_stack(&cfg, &mut r);
        let p = evaluate_ccc(&h, &zero_filter_params(8, bias.clone())).unwrap();
        assert!(p.as_slice().iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-15));
    }
}

#[test]
fn constant_bias_gives_uniform_map_and_neutral_estimate() {
    let mut r = rng(3);
    let cfg = HistogramConfig::new(16, -2.85, 2.85).unwrap();
    let h = random_stack(&cfg, &mut r);
    let p = evaluate_ccc(&h, &zero_filter_params(16, vec![0.7; 256])).unwrap();
    assert!(p.as_slice().iter().all(|&v| (v - 1.0 / 256.0).abs() < 1e-15));
    let (u, v) = soft_argmax(&p, &cfg);
    assert!(u.abs() < 1e-12 && v.abs() < 1e-12);
    let l = estimate_illuminant(&h, &zero_filter_params(16, vec![0.7; 256]), &cfg).unwrap().rgb();
    assert!(l.iter().all(|c| (c - 1.0 / 3f64.sqrt()).abs() < 1e-12));
}

#[test]
fn dominant_bias_entry_is_one_hot() {
    let n = 64;
    let mut bias = vec![0.0; n * n];
    bias[1234] = 50.0;
    let p = heat_map_from_logits(n, &bias).unwrap();
    assert!(p.as_slice()[1234] > 1.0 - 1e-9);
    assert_eq!(p.argmax(), (1234 / n, 1234 % n));
}

#[test]
fn soft_argmax_examples() {
    let cfg = HistogramConfig::default();
    let n = cfg.n;
    let one_hot = |k: usize| {
        let mut l = vec![-1e3; n * n];
        l[k] = 0.0;
        heat_map_from_logits(n, &l).unwrap()
    };
    let (u, v) = soft_argmax(&one_hot(10 * n + 3), &cfg);
    assert!((u - cfg.bin_center(3)).abs() < 1e-12 && (v - cfg.bin_center(10)).abs() < 1e-12);
    let mut l = vec![-1e3; n * n];
    l[5 * n + 7] = 0.0;
    l[40 * n + 20] = 0.0;
    let (u, v) = soft_argmax(&heat_map_from_logits(n, &l).unwrap(), &cfg);
    assert!((u - (cfg.bin_center(7) + cfg.bin_center(20)) / 2.0).abs() < 1e-12);
    assert!((v - (cfg.bin_center(5) + cfg.bin_center(40)) / 2.0).abs() < 1e-12);
}

#[test]
fn estimate_peaked_at_origin_bin_is_neutral() {
    // with an even bin count the origin is a bin edge, so use an odd count
    let cfg = HistogramConfig::new(15, -2.85, 2.85).unwrap();
    let h = ChromaHistogram::from_channels(15, vec![1.0 / 225.0; 225], vec![0.0; 225], &cfg).unwrap();
    let mut bias = vec![0.0; 225];
    bias[7 * 15 + 7] = 60.0;
    let l = estimate_illuminant(&h, &zero_filter_params(15, bias), &cfg).unwrap().rgb();
    assert!(l.iter().all(|c| (c - 1.0 / 3f64.sqrt()).abs() < 1e-9));
}

#[test]
fn estimate_composes_the_three_stages() {
    let mut r = rng(4);
    let cfg = HistogramConfig::new(8, -2.85, 2.85).unwrap();
    let h = random_stack(&cfg, &mut r);
    let f0 = uniform(&[64], -1.0, 1.0, &mut r).into_data();
    let f1 = uniform(&[64], -1.0, 1.0, &mut r).into_data();
    let b = uniform(&[64], -1.0, 1.0, &mut r).into_data();
    let g = uniform(&[64], 0.5, 1.5, &mut r).into_data();
    let p = CccParams::new(8, [f0.clone(), f1.clone()], b.clone(), Some(g.clone())).unwrap();
    // composition oracle: direct convolution, explicit softmax, explicit expectation
    let c0 = direct_oracle(h.channel(0), &f0, 8);
    let c1 = direct_oracle(h.channel(1), &f1, 8);
    let logits: Vec<f64> = (0..64).map(|k| b[k] + g[k] * (c0[k] + c1[k])).collect();
    let mx = logits.iter().copied().fold(f64::MIN, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    let (mut u, mut v) = (0.0, 0.0);
    for k in 0..64 {
        u += e[k] / z * cfg.bin_center(k % 8);
        v += e[k] / z * cfg.bin_center(k / 8);
    }
    let want = [(-u).exp(), 1.0, (-v).exp()];
    let norm = want.iter().map(|c| c * c).sum::<f64>().sqrt();
    let got = estimate_illuminant(&h, &p, &cfg).unwrap().rgb();
    for (a, w) in got.iter().zip(want) {
        assert!((a - w / norm).abs() < 1e-12);
    }
}

#[test]
fn uv_to_rgb_domain() {
    assert!(uv_to_rgb(701.0, 0.0).is_err());
    assert!(uv_to_rgb(0.0, f64::NAN).is_err());
    let l = uv_to_rgb(-650.0, 3.0).unwrap().rgb();
    assert!(l.iter().all(|&c| c > 0.0 && c.is_finite()));
}

#[test]
fn mismatched_sizes_are_rejected() {
    let mut r = rng(5);
    let cfg = HistogramConfig::new(8, -2.85, 2.85).unwrap();
    let h = random_stack(&cfg, &mut r);
    assert!(evaluate_ccc(&h, &zero_filter_params(16, vec![0.0; 256])).is_err());
    assert!(CccParams::new(8, [vec![0.0; 64], vec![0.0; 63]], vec![0.0; 64], None).is_err());
    assert!(CccParams::new(8, [vec![0.0; 64], vec![0.0; 64]], vec![f64::NAN; 64], None).is_err());
}
