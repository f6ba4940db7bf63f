mod common;

use c5_core::autodiff::Tape;
use c5_core::features::{assemble_feature_stack, ChromaHistogram, HistogramConfig};
use c5_core::network::{c5_infer, forward, infer_stacks, stack_input, ArchitectureConfig, Inference, Mode, NetworkWeights};
use common::{random_image, random_stack, rng, tiny_arch};
use rand::seq::SliceRandom;

fn bits(inf: &Inference) -> Vec<u64> {
    let p = &inf.params;
    inf.illuminant
        .rgb()
        .iter()
        .chain(&p.bias)
        .chain(&p.filters[0])
        .chain(&p.filters[1])
        .chain(p.gain.iter().flatten())
        .chain(inf.heat_map.as_slice())
        .map(|v| v.to_bits())
        .collect()
}

/// Running statistics away from the (0, 1) defaults so eval mode is not trivially neutral.
fn perturb_buffers(w: &mut NetworkWeights, r: &mut impl rand::Rng) {
    let vals: Vec<Vec<f64>> = w
        .buffers()
        .iter()
        .map(|b| {
            let var = b.name.ends_with(".var");
            b.tensor.data().iter().map(|_| if var { r.random_range(0.5..2.0) } else { r.random_range(-0.3..0.3) }).collect()
        })
        .collect();
    w.set_buffers(&vals).unwrap();
}

#[test]
fn default_output_shapes() {
    let mut r = rng(1);
    for emit_gain in [false, true] {
        let arch = ArchitectureConfig { emit_gain, ..ArchitectureConfig::default() };
        let hist = HistogramConfig::default();
        let w = NetworkWeights::init(arch, hist, &mut r).unwrap();
        let stacks: Vec<ChromaHistogram> = (0..arch.m).map(|_| random_stack(&hist, &mut r)).collect();
        let refs: Vec<&ChromaHistogram> = stacks[1..].iter().collect();
        let inf = infer_stacks(&stacks[0], &refs, &w).unwrap();
        assert_eq!(inf.params.n, 64);
        assert_eq!(inf.params.bias.len(), 64 * 64);
        assert!(inf.params.filters.iter().all(|f| f.len() == 64 * 64));
        assert_eq!(inf.params.gain.as_ref().map(Vec::len), emit_gain.then_some(64 * 64));
    }
}

#[test]
fn permuting_additional_images_is_bit_exact() {
    let mut r = rng(2);
    let (arch, hist) = tiny_arch();
    let arch = ArchitectureConfig { m: 9, ..arch };
    for _ in 0..3 {
        let mut w = NetworkWeights::init(arch, hist, &mut r).unwrap();
        perturb_buffers(&mut w, &mut r);
        let stacks: Vec<ChromaHistogram> = (0..9).map(|_| random_stack(&hist, &mut r)).collect();
        let mut refs: Vec<&ChromaHistogram> = stacks[1..].iter().collect();
        let base = bits(&infer_stacks(&stacks[0], &refs, &w).unwrap());
        for _ in 0..10 {
            refs.shuffle(&mut r);
            assert_eq!(bits(&infer_stacks(&stacks[0], &refs, &w).unwrap()), base);
        }
    }
}

#[test]
fn permutation_invariance_through_images() {
    let mut r = rng(3);
    let (arch, hist) = tiny_arch();
    let w = NetworkWeights::init(ArchitectureConfig { m: 4, ..arch }, hist, &mut r).unwrap();
    let imgs: Vec<_> = (0..4).map(|_| random_image(24, 16, &mut r)).collect();
    let base = bits(&c5_infer(&imgs[0], &imgs[1..], &w).unwrap());
    let reversed: Vec<_> = imgs[1..].iter().rev().cloned().collect();
    assert_eq!(bits(&c5_infer(&imgs[0], &reversed, &w).unwrap()), base);
}

#[test]
fn duplicated_query_equals_single_branch() {
    let mut r = rng(4);
    let (arch, hist) = tiny_arch();
    let mut w = NetworkWeights::init(ArchitectureConfig { m: 5, ..arch }, hist, &mut r).unwrap();
    perturb_buffers(&mut w, &mut r);
    let q = random_stack(&hist, &mut r);
    let single = bits(&infer_stacks(&q, &[], &w).unwrap());
    let dup = bits(&infer_stacks(&q, &[&q, &q, &q, &q], &w).unwrap());
    assert_eq!(single, dup);
}

#[test]
fn identical_branches_match_one_branch_forward() {
    let mut r = rng(5);
    let (arch, hist) = tiny_arch();
    let w = NetworkWeights::init(arch, hist, &mut r).unwrap();
    let q = random_stack(&hist, &mut r);
    let run = |group: Vec<&ChromaHistogram>| {
        let mut tape = Tape::new();
        let vars = w.register(&mut tape, false);
        let g = group.len();
        let input = tape.constant(stack_input(&[group]).unwrap());
        let e = forward(&mut tape, &w, &vars, input, g, Mode::Eval).unwrap();
        tape.value(e.bias).data().to_vec()
    };
    assert_eq!(run(vec![&q]), run(vec![&q, &q, &q]));
}

#[test]
fn dominant_branch_wins_cross_pooling() {
    // Non-negative kernels and neutral statistics make the first block monotone
    // in its input, so a branch that is larger bin-for-bin wins every max.
    let mut r = rng(6);
    let (arch, hist) = tiny_arch();
    let mut w = NetworkWeights::init(ArchitectureConfig { depth: 1, m: 3, ..arch }, hist, &mut r).unwrap();
    w.param_mut("enc0.conv0.w").unwrap().data_mut().iter_mut().for_each(|v| *v = v.abs());
    let q = random_stack(&hist, &mut r);
    let big = random_stack(&hist, &mut r);
    let scaled = |h: &[f64]| h.iter().map(|v| v * 0.25).collect::<Vec<f64>>();
    let small = ChromaHistogram::from_channels(16, scaled(big.pixel_histogram()), scaled(big.gradient_histogram()), &hist).unwrap();
    let with_small = bits(&infer_stacks(&q, &[&big, &small], &w).unwrap());
    let alone = bits(&infer_stacks(&q, &[&big, &big], &w).unwrap());
    assert_eq!(with_small, alone);
}

#[test]
fn zeroed_decoder_convs_give_constant_maps() {
    let mut r = rng(7);
    let (arch, hist) = tiny_arch();
    let mut w = NetworkWeights::init(ArchitectureConfig { emit_gain: true, ..arch }, hist, &mut r).unwrap();
    let names: Vec<String> = w.params().iter().map(|p| p.name.clone()).filter(|n| n.starts_with("dec_") && n.ends_with(".w")).collect();
    for n in &names {
        w.param_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    for head in ["bias", "filters", "gain"] {
        let b = w.param_mut(&format!("dec_{head}.out.b")).unwrap();
        b.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.25 * (i as f64 + 1.0));
    }
    let a = random_stack(&hist, &mut r);
    let b = random_stack(&hist, &mut r);
    let inf1 = infer_stacks(&a, &[&b], &w).unwrap();
    let inf2 = infer_stacks(&b, &[&a, &a], &w).unwrap();
    for inf in [&inf1, &inf2] {
        assert!(inf.params.bias.iter().all(|&v| v == 0.25));
        assert!(inf.params.filters[0].iter().all(|&v| v == 0.25));
        assert!(inf.params.filters[1].iter().all(|&v| v == 0.5));
        assert!(inf.params.gain.as_ref().unwrap().iter().all(|&v| v == 0.25));
    }
}

#[test]
fn inner_decoder_convs_zeroed_make_output_input_independent() {
    let mut r = rng(8);
    let (arch, hist) = tiny_arch();
    let mut w = NetworkWeights::init(arch, hist, &mut r).unwrap();
    let names: Vec<String> = w.params().iter().map(|p| p.name.clone()).filter(|n| n.starts_with("dec_") && n.contains(".up") && n.ends_with(".w")).collect();
    for n in &names {
        w.param_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let a = random_stack(&hist, &mut r);
    let b = random_stack(&hist, &mut r);
    let p1 = infer_stacks(&a, &[&b], &w).unwrap().params;
    let p2 = infer_stacks(&b, &[&a], &w).unwrap().params;
    assert_eq!(p1, p2);
}

#[test]
fn estimates_are_unit_positive_for_random_weights() {
    let mut r = rng(9);
    let (arch, hist) = tiny_arch();
    for _ in 0..5 {
        let w = NetworkWeights::init(ArchitectureConfig { emit_gain: true, ..arch }, hist, &mut r).unwrap();
        let imgs: Vec<_> = (0..3).map(|_| random_image(20, 12, &mut r)).collect();
        let inf = c5_infer(&imgs[0], &imgs[1..], &w).unwrap();
        let rgb = inf.illuminant.rgb();
        assert!(rgb.iter().all(|&c| c > 0.0));
        assert!((rgb.iter().map(|c| c * c).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((inf.heat_map.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn save_load_preserves_inference_bit_exactly() {
    let mut r = rng(10);
    let (arch, hist) = tiny_arch();
    let mut w = NetworkWeights::init(ArchitectureConfig { emit_gain: true, ..arch }, hist, &mut r).unwrap();
    perturb_buffers(&mut w, &mut r);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.c5w");
    w.save(&path).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, w.file_size());
    let loaded = NetworkWeights::load(&path).unwrap();
    assert_eq!(loaded, w);
    assert_eq!(loaded.param_count(), w.param_count());
    let imgs: Vec<_> = (0..3).map(|_| random_image(20, 12, &mut r)).collect();
    assert_eq!(bits(&c5_infer(&imgs[0], &imgs[1..], &loaded).unwrap()), bits(&c5_infer(&imgs[0], &imgs[1..], &w).unwrap()));
}

#[test]
fn default_model_size_is_stable() {
    let mut r = rng(11);
    let w = NetworkWeights::init(ArchitectureConfig::default(), HistogramConfig::default(), &mut r).unwrap();
    let mut buf = Vec::new();
    w.write_to(&mut buf).unwrap();
    assert_eq!(buf.len(), w.file_size());
    let back = NetworkWeights::read_from(&buf[..]).unwrap();
    assert_eq!(back.param_count(), w.param_count());
    let mut again = Vec::new();
    back.write_to(&mut again).unwrap();
    assert_eq!(again, buf);
}

#[test]
fn mismatched_stack_size_is_rejected() {
    let mut r = rng(12);
    let (arch, hist) = tiny_arch();
    let w = NetworkWeights::init(arch, hist, &mut r).unwrap();
    let other = HistogramConfig::new(8, -2.85, 2.85).unwrap();
    let q = random_stack(&hist, &mut r);
    let bad = random_stack(&other, &mut r);
    assert!(infer_stacks(&q, &[&bad], &w).is_err());
    assert!(infer_stacks(&bad, &[], &w).is_err());
}

#[test]
fn features_from_images_feed_the_network() {
    let mut r = rng(13);
    let (arch, hist) = tiny_arch();
    let w = NetworkWeights::init(arch, hist, &mut r).unwrap();
    let img = random_image(20, 12, &mut r);
    let stack = assemble_feature_stack(&img, &hist).unwrap();
    assert_eq!(bits(&c5_infer(&img, &[], &w).unwrap()), bits(&infer_stacks(&stack, &[], &w).unwrap()));
}
