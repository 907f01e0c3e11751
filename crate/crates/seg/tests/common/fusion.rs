//! Random decoder cases and a straight-line fusion oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use revhrnet::model::{Decoder, Parameter, Pass, Phase};
use revhrnet::DecoderSpec;
use revhrnet_core::{Eager, Tensor};

use super::{add, bn_eval, conv, rel_error, relu, resize, param_f64, Map};

pub struct Case {
    pub decoder: Decoder<f32>,
    pub widths: Vec<usize>,
    pub streams: Vec<Tensor<f32>>,
}

pub fn randomize(decoder: &mut Decoder<f32>, rng: &mut ChaCha8Rng) {
    for p in decoder.params_mut().iter_mut() {
        let name = p.name.clone();
        for v in p.value.data_mut() {
            *v = if name.ends_with("running_var") {
                rng.gen_range(0.5..2.0)
            } else if name.ends_with("gamma") {
                rng.gen_range(0.5..1.5)
            } else {
                rng.gen_range(-0.5..0.5)
            };
        }
    }
}

pub fn random_case(seed: u64, batch: usize) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=5);
    let widths: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=5)).collect();
    let spec = DecoderSpec {
        stream_widths: widths.clone(),
        blocks_per_stage: vec![1; n],
        num_classes: 2,
        variant_extra_stream: false,
    };
    let mut decoder = Decoder::<f32>::build(&spec, &widths, seed).unwrap();
    randomize(&mut decoder, &mut rng);
    let (mut h, mut w) = (rng.gen_range(5..=20), rng.gen_range(5..=20));
    let mut streams = Vec::with_capacity(n);
    for &c in &widths {
        streams.push(Tensor::from_fn(&[batch, c, h, w], |_| rng.gen_range(-1.0f32..1.0)).unwrap());
        h = h.div_ceil(2);
        w = w.div_ceil(2);
    }
    Case {
        decoder,
        widths,
        streams,
    }
}

pub fn item(t: &Tensor<f32>, b: usize) -> Map {
    let s = t.shape();
    let len = s[1] * s[2] * s[3];
    Map {
        c: s[1],
        h: s[2],
        w: s[3],
        data: t.data()[b * len..(b + 1) * len].iter().map(|&v| f64::from(v)).collect(),
    }
}

pub fn oracle_fuse(params: &[&Parameter<f32>], widths: &[usize], streams: &[Map]) -> Vec<Map> {
    let n = streams.len();
    let mut out = Vec::with_capacity(n);
    for to in 0..n {
        let mut acc = streams[to].clone();
        for from in 0..n {
            if from == to {
                continue;
            }
            let name = format!("decoder.stage0.fuse.{from}to{to}");
            let contrib = if from > to {
                let w = param_f64(params, &format!("{name}.weight"));
                let b = param_f64(params, &format!("{name}.bias"));
                let y = conv(&streams[from], &w, Some(&b), widths[to], 1, 1);
                resize(&y, streams[to].h, streams[to].w)
            } else {
                let steps = to - from;
                let mut y = streams[from].clone();
                for k in 0..steps - 1 {
                    let p = format!("{name}.down{k}");
                    let w = param_f64(params, &format!("{p}.conv.weight"));
                    y = conv(&y, &w, None, widths[from], 3, 2);
                    y = bn_eval(
                        &y,
                        &param_f64(params, &format!("{p}.bn.gamma")),
                        &param_f64(params, &format!("{p}.bn.beta")),
                        &param_f64(params, &format!("{p}.bn.running_mean")),
                        &param_f64(params, &format!("{p}.bn.running_var")),
                    );
                    y = relu(&y);
                }
                let p = format!("{name}.down{}", steps - 1);
                let w = param_f64(params, &format!("{p}.weight"));
                let b = param_f64(params, &format!("{p}.bias"));
                conv(&y, &w, Some(&b), widths[to], 3, 2)
            };
            acc = add(&acc, &contrib);
        }
        out.push(relu(&acc));
    }
    out
}

pub fn oracle_merge(params: &[&Parameter<f32>], widths: &[usize], streams: &[Map]) -> Vec<Map> {
    let n = streams.len();
    let w = param_f64(params, "decoder.merge0.weight");
    let b = param_f64(params, "decoder.merge0.bias");
    let y = conv(&streams[n - 1], &w, Some(&b), widths[n - 2], 1, 1);
    let up = resize(&y, streams[n - 2].h, streams[n - 2].w);
    let mut out = streams[..n - 2].to_vec();
    out.push(add(&streams[n - 2], &up));
    out
}

/// Norm-wise relative error over the whole output stream set of a batch.
/// Per-stream ratios are ill-conditioned when ReLU leaves a stream almost empty.
pub fn compare(actual: &[Tensor<f32>], batch: usize, expected: impl Fn(usize) -> Vec<Map>) -> f64 {
    let (mut got_all, mut want_all) = (Vec::new(), Vec::new());
    for b in 0..batch {
        let want = expected(b);
        assert_eq!(actual.len(), want.len());
        for (a, e) in actual.iter().zip(&want) {
            let got = item(a, b);
            assert_eq!((got.c, got.h, got.w), (e.c, e.h, e.w));
            got_all.extend(got.data.iter().map(|&v| v as f32));
            want_all.extend_from_slice(&e.data);
        }
    }
    rel_error(&got_all, &want_all)
}


/// Relative error of `fuse` on random case `seed` (batch 2, eval phase).
pub fn fuse_error(seed: u64) -> f64 {
    let batch = 2;
    let case = random_case(seed, batch);
    let mut exec = Eager;
    let mut pass = Pass::new(&mut exec, Phase::Eval);
    let out = case.decoder.fuse(&mut pass, 0, &case.streams).unwrap();
    let params: Vec<&Parameter<f32>> = case.decoder.params().iter().collect();
    compare(&out, batch, |b| {
        let maps: Vec<Map> = case.streams.iter().map(|t| item(t, b)).collect();
        oracle_fuse(&params, &case.widths, &maps)
    })
}

/// Relative error of `merge_drop_lowest` on random case `seed`.
pub fn merge_error(seed: u64) -> f64 {
    let batch = 2;
    let case = random_case(seed, batch);
    let mut exec = Eager;
    let mut pass = Pass::new(&mut exec, Phase::Eval);
    let out = case.decoder.merge_drop_lowest(&mut pass, 0, &case.streams).unwrap();
    assert_eq!(out.len(), case.streams.len() - 1);
    let params: Vec<&Parameter<f32>> = case.decoder.params().iter().collect();
    compare(&out, batch, |b| {
        let maps: Vec<Map> = case.streams.iter().map(|t| item(t, b)).collect();
        oracle_merge(&params, &case.widths, &maps)
    })
}
