//! Straight-line f64 reference code, independent of the tensor kernels.

#![allow(dead_code)]

pub mod fusion;
pub mod labels;

use revhrnet::model::Parameter;

/// One feature map `[C, H, W]`.
#[derive(Clone, Debug)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Map {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Map { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }
}

pub fn param_f64(params: &[&Parameter<f32>], name: &str) -> Vec<f64> {
    let p = params
        .iter()
        .find(|p| p.name == name)
        .unwrap_or_else(|| panic!("no parameter {name}"));
    p.value.data().iter().map(|&v| f64::from(v)).collect()
}

pub fn conv(x: &Map, weight: &[f64], bias: Option<&[f64]>, cout: usize, k: usize, stride: usize) -> Map {
    let pad = k / 2;
    let oh = (x.h + 2 * pad - k) / stride + 1;
    let ow = (x.w + 2 * pad - k) / stride + 1;
    let mut out = Map::zeros(cout, oh, ow);
    for o in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias.map_or(0.0, |b| b[o]);
                for i in 0..x.c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                continue;
                            }
                            let wv = weight[((o * x.c + i) * k + ky) * k + kx];
                            acc += wv * x.at(i, iy as usize, ix as usize);
                        }
                    }
                }
                out.set(o, oy, ox, acc);
            }
        }
    }
    out
}

fn source(i: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    let pos = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
    let lo = pos.floor() as usize;
    (lo, (lo + 1).min(src - 1), pos - lo as f64)
}

pub fn resize(x: &Map, oh: usize, ow: usize) -> Map {
    let mut out = Map::zeros(x.c, oh, ow);
    for c in 0..x.c {
        for oy in 0..oh {
            let (y0, y1, fy) = source(oy, x.h, oh);
            for ox in 0..ow {
                let (x0, x1, fx) = source(ox, x.w, ow);
                let v = (1.0 - fy) * ((1.0 - fx) * x.at(c, y0, x0) + fx * x.at(c, y0, x1))
                    + fy * ((1.0 - fx) * x.at(c, y1, x0) + fx * x.at(c, y1, x1));
                out.set(c, oy, ox, v);
            }
        }
    }
    out
}

/// Inference batch norm with running statistics.
pub fn bn_eval(x: &Map, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64]) -> Map {
    let mut out = x.clone();
    for c in 0..x.c {
        for y in 0..x.h {
            for xx in 0..x.w {
                let v = (x.at(c, y, xx) - mean[c]) / (var[c] + 1e-5).sqrt() * gamma[c] + beta[c];
                out.set(c, y, xx, v);
            }
        }
    }
    out
}

pub fn relu(x: &Map) -> Map {
    Map {
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
        ..x.clone()
    }
}

pub fn add(a: &Map, b: &Map) -> Map {
    assert_eq!((a.c, a.h, a.w), (b.c, b.h, b.w));
    Map {
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
        ..a.clone()
    }
}

/// `sqrt(sum (a - b)^2) / sqrt(sum b^2)`.
pub fn rel_error(actual: &[f32], expected: &[f64]) -> f64 {
    assert_eq!(actual.len(), expected.len());
    let num: f64 = actual
        .iter()
        .zip(expected)
        .map(|(&a, &b)| (f64::from(a) - b).powi(2))
        .sum();
    let den: f64 = expected.iter().map(|b| b * b).sum();
    (num / den.max(1e-300)).sqrt()
}
