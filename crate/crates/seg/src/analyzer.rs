//! Closed-form cost model: parameters, multiply-accumulates and memory.
//!
//! Everything is derived from an [`ArchitectureSpec`] by walking the same
//! layer schedule the model builds, without allocating any weights.
//! Activation figures assume one image and 4-byte elements.
//!
//! * `activation_bytes`: peak of simultaneously live layer outputs while
//!   running inference layer by layer.
//! * `training_activation_bytes`: every decoder output recorded for the
//!   backward pass plus the encoder pyramid, which enters as constants. The
//!   frozen encoder's internals are not recorded, so this does not depend on
//!   encoder depth.
//! * `training_memory_bytes`: training activations + 4 bytes per parameter
//!   + 8 bytes per trainable parameter (gradient and momentum).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::spec::{check_divisible, ArchitectureSpec, StemKind};

pub const BYTES_PER_ELEMENT: u64 = 4;
/// Multiply-accumulates charged per bilinear output element.
pub const RESIZE_MACS_PER_ELEMENT: u64 = 4;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleCost {
    pub name: String,
    pub params: u64,
    pub trainable_params: u64,
    pub macs: u64,
    pub training_activation_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub input_size: (usize, usize),
    pub total_params: u64,
    pub trainable_params: u64,
    pub frozen_params: u64,
    pub macs: u64,
    pub activation_bytes: u64,
    pub training_activation_bytes: u64,
    pub training_memory_bytes: u64,
    pub streams: usize,
    pub per_module: Vec<ModuleCost>,
}

/// Ratios `b / a` for each quantity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub name_a: String,
    pub name_b: String,
    pub input_size: (usize, usize),
    pub params_ratio: f64,
    pub trainable_params_ratio: f64,
    pub macs_ratio: f64,
    pub activation_ratio: f64,
    pub training_activation_ratio: f64,
    pub training_memory_ratio: f64,
    pub a: CostReport,
    pub b: CostReport,
}

/// Peak tracker for sequential execution.
#[derive(Default)]
struct Live {
    current: u64,
    peak: u64,
}

impl Live {
    fn alloc(&mut self, elements: u64) -> u64 {
        self.current += elements;
        self.peak = self.peak.max(self.current);
        elements
    }

    fn free(&mut self, elements: u64) {
        self.current -= elements;
    }
}

/// Accumulates one module's costs while walking the layer schedule.
struct Walker<'a> {
    module: ModuleCost,
    live: &'a mut Live,
    trainable: bool,
}

impl Walker<'_> {
    fn params(&mut self, n: u64, trainable: bool) {
        self.module.params += n;
        if trainable && self.trainable {
            self.module.trainable_params += n;
        }
    }

    fn record(&mut self, elements: u64) {
        self.module.training_activation_bytes += elements * BYTES_PER_ELEMENT;
    }

    /// Convolution output elements; input stays live.
    fn conv(&mut self, cin: usize, cout: usize, k: usize, out_area: usize, bias: bool) -> u64 {
        let weights = (cout * cin * k * k) as u64;
        self.params(weights, true);
        if bias {
            self.params(cout as u64, true);
        }
        self.module.macs += weights * out_area as u64;
        let out = (cout * out_area) as u64;
        self.record(out);
        self.live.alloc(out)
    }

    fn bn(&mut self, c: usize, area: usize) -> u64 {
        self.params(2 * c as u64, true);
        self.params(2 * c as u64, false);
        let out = (c * area) as u64;
        self.record(out);
        self.live.alloc(out)
    }

    fn pointwise(&mut self, elements: u64) -> u64 {
        self.record(elements);
        self.live.alloc(elements)
    }

    fn resize(&mut self, c: usize, out_area: usize) -> u64 {
        let out = (c * out_area) as u64;
        self.module.macs += RESIZE_MACS_PER_ELEMENT * out;
        self.record(out);
        self.live.alloc(out)
    }

    /// conv (no bias) + BN + optional ReLU; returns the surviving output.
    fn conv_bn(&mut self, cin: usize, cout: usize, k: usize, out_area: usize, relu: bool) -> u64 {
        let c = self.conv(cin, cout, k, out_area, false);
        let b = self.bn(cout, out_area);
        self.live.free(c);
        if relu {
            let r = self.pointwise(b);
            self.live.free(b);
            r
        } else {
            b
        }
    }

    /// Residual block on a live input `x`; `x` stays live, the output is returned.
    fn block(&mut self, bottleneck: bool, cin: usize, cout: usize, stride: usize, in_area: usize, out_area: usize) -> u64 {
        let body = if bottleneck {
            let mid = cout / 4;
            let a = self.conv_bn(cin, mid, 1, in_area, true);
            let b = self.conv_bn(mid, mid, 3, out_area, true);
            self.live.free(a);
            let c = self.conv_bn(mid, cout, 1, out_area, false);
            self.live.free(b);
            c
        } else {
            let a = self.conv_bn(cin, cout, 3, out_area, true);
            let b = self.conv_bn(cout, cout, 3, out_area, false);
            self.live.free(a);
            b
        };
        let skip = (stride != 1 || cin != cout).then(|| self.conv_bn(cin, cout, 1, out_area, false));
        let sum = self.pointwise(body);
        self.live.free(body);
        if let Some(s) = skip {
            self.live.free(s);
        }
        let out = self.pointwise(sum);
        self.live.free(sum);
        out
    }
}

fn finish(walker: Walker<'_>, out: &mut Vec<ModuleCost>) {
    out.push(walker.module);
}

fn walker<'a>(name: String, live: &'a mut Live, trainable: bool) -> Walker<'a> {
    Walker {
        module: ModuleCost {
            name,
            ..ModuleCost::default()
        },
        live,
        trainable,
    }
}

/// Closed-form costs of `spec` for one `height x width` image with the
/// encoder frozen and the decoder trainable.
pub fn analyze(spec: &ArchitectureSpec, input_size: (usize, usize)) -> Result<CostReport> {
    spec.validate()?;
    let (h, w) = input_size;
    check_divisible(h, w)?;
    let area = |s: usize| (h / s) * (w / s);
    let bb = &spec.backbone;
    let mut live = Live::default();
    let mut modules = Vec::new();

    // Encoder. Pyramid levels stay live until their adapter has run.
    let mut enc = walker("backbone".into(), &mut live, false);
    let first = if bb.stem == StemKind::Quarter { 2 } else { 1 };
    let s0 = enc.conv_bn(3, bb.stem_channels, 3, area(first), true);
    let mut x = enc.conv_bn(bb.stem_channels, bb.stem_channels, 3, area(first * 2), true);
    enc.live.free(s0);
    let mut stride = first * 2;
    let mut cin = bb.stem_channels;
    let mut pyramid = Vec::new();
    // Whether `x` is a pyramid level, which must outlive the encoder.
    let mut x_is_level = bb.stem == StemKind::Half;
    if x_is_level {
        pyramid.push(x);
    }
    for (i, (&cout, &blocks)) in bb.stage_channels.iter().zip(&bb.blocks_per_stage).enumerate() {
        let s = if i == 0 && bb.stem == StemKind::Quarter { 1 } else { 2 };
        for b in 0..blocks {
            let (bin, bs) = if b == 0 { (cin, s) } else { (cout, 1) };
            let out = enc.block(bb.uses_bottleneck, bin, cout, bs, area(stride), area(stride * bs));
            stride *= bs;
            if !x_is_level {
                enc.live.free(x);
            }
            x = out;
            x_is_level = false;
        }
        pyramid.push(x);
        x_is_level = true;
        cin = cout;
    }
    // Only the pyramid is recorded for training.
    enc.module.training_activation_bytes = pyramid.iter().sum::<u64>() * BYTES_PER_ELEMENT;
    finish(enc, &mut modules);

    // Decoder.
    let dec = &spec.decoder;
    let widths = &dec.stream_widths;
    let strides = bb.strides();
    let pyr_ch = bb.pyramid_channels();
    let mut ad = walker("decoder.adapters".into(), &mut live, true);
    let mut streams = Vec::with_capacity(widths.len());
    for i in 0..widths.len() {
        let y = ad.conv(pyr_ch[i], widths[i], 1, area(strides[i]), true);
        ad.live.free(pyramid[i]);
        streams.push(y);
    }
    finish(ad, &mut modules);

    let total = widths.len();
    let mut stream_counts = Vec::new();
    for (si, &blocks) in dec.blocks_per_stage.iter().enumerate() {
        let n = total - si;
        stream_counts.push(n);
        let mut st = walker(format!("decoder.stage{si}"), &mut live, true);
        for i in 0..n {
            for _ in 0..blocks {
                let y = st.block(false, widths[i], widths[i], 1, area(strides[i]), area(strides[i]));
                st.live.free(streams[i]);
                streams[i] = y;
            }
        }
        let mut fused = Vec::with_capacity(n);
        for to in 0..n {
            let ta = area(strides[to]);
            let mut acc: Option<u64> = None;
            for from in 0..n {
                if from == to {
                    continue;
                }
                let contrib = if from > to {
                    let c = st.conv(widths[from], widths[to], 1, area(strides[from]), true);
                    let r = st.resize(widths[to], ta);
                    st.live.free(c);
                    r
                } else {
                    let mut y: Option<u64> = None;
                    for k in 0..to - from - 1 {
                        let z = st.conv_bn(widths[from], widths[from], 3, area(strides[from + k + 1]), true);
                        if let Some(prev) = y {
                            st.live.free(prev);
                        }
                        y = Some(z);
                    }
                    let last = st.conv(widths[from], widths[to], 3, ta, true);
                    if let Some(prev) = y {
                        st.live.free(prev);
                    }
                    last
                };
                let sum = st.pointwise((widths[to] * ta) as u64);
                if let Some(a) = acc {
                    st.live.free(a);
                }
                st.live.free(contrib);
                acc = Some(sum);
            }
            let out = st.pointwise((widths[to] * ta) as u64);
            if let Some(a) = acc {
                st.live.free(a);
            }
            fused.push(out);
        }
        for s in streams.drain(..) {
            st.live.free(s);
        }
        streams = fused;
        finish(st, &mut modules);

        if n > 1 {
            let mut mg = walker(format!("decoder.merge{si}"), &mut live, true);
            let c = mg.conv(widths[n - 1], widths[n - 2], 1, area(strides[n - 1]), true);
            let r = mg.resize(widths[n - 2], area(strides[n - 2]));
            mg.live.free(c);
            let sum = mg.pointwise((widths[n - 2] * area(strides[n - 2])) as u64);
            mg.live.free(r);
            let low = streams.pop().expect("n > 1");
            let prev = streams.pop().expect("n > 1");
            mg.live.free(low);
            mg.live.free(prev);
            streams.push(sum);
            finish(mg, &mut modules);
        }
    }

    let mut hd = walker("decoder.head".into(), &mut live, true);
    let c = hd.conv(widths[0], dec.num_classes, 1, area(strides[0]), true);
    hd.live.free(streams[0]);
    hd.resize(dec.num_classes, h * w);
    hd.live.free(c);
    finish(hd, &mut modules);

    let total_params: u64 = modules.iter().map(|m| m.params).sum();
    let trainable_params: u64 = modules.iter().map(|m| m.trainable_params).sum();
    let training_activation_bytes: u64 = modules.iter().map(|m| m.training_activation_bytes).sum();
    Ok(CostReport {
        input_size,
        total_params,
        trainable_params,
        frozen_params: total_params - trainable_params,
        macs: modules.iter().map(|m| m.macs).sum(),
        activation_bytes: live.peak * BYTES_PER_ELEMENT,
        training_activation_bytes,
        training_memory_bytes: training_activation_bytes
            + BYTES_PER_ELEMENT * total_params
            + 2 * BYTES_PER_ELEMENT * trainable_params,
        streams: stream_counts[0],
        per_module: modules,
    })
}

fn ratio(a: u64, b: u64) -> f64 {
    b as f64 / a as f64
}

pub fn compare(
    name_a: &str,
    spec_a: &ArchitectureSpec,
    name_b: &str,
    spec_b: &ArchitectureSpec,
    input_size: (usize, usize),
) -> Result<CompareReport> {
    let a = analyze(spec_a, input_size)?;
    let b = analyze(spec_b, input_size)?;
    Ok(CompareReport {
        name_a: name_a.into(),
        name_b: name_b.into(),
        input_size,
        params_ratio: ratio(a.total_params, b.total_params),
        trainable_params_ratio: ratio(a.trainable_params, b.trainable_params),
        macs_ratio: ratio(a.macs, b.macs),
        activation_ratio: ratio(a.activation_bytes, b.activation_bytes),
        training_activation_ratio: ratio(a.training_activation_bytes, b.training_activation_bytes),
        training_memory_ratio: ratio(a.training_memory_bytes, b.training_memory_bytes),
        a,
        b,
    })
}

fn mib(bytes: u64) -> String {
    format!("{:.2} MiB", bytes as f64 / (1024.0 * 1024.0))
}

impl CostReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let (h, w) = self.input_size;
        let _ = writeln!(s, "input                      {h}x{w}");
        let _ = writeln!(s, "streams                    {}", self.streams);
        let _ = writeln!(s, "total params               {:>14}", self.total_params);
        let _ = writeln!(s, "trainable params           {:>14}", self.trainable_params);
        let _ = writeln!(s, "frozen params              {:>14}", self.frozen_params);
        let _ = writeln!(s, "MACs                       {:>14}", self.macs);
        let _ = writeln!(s, "inference activation peak  {:>14}", mib(self.activation_bytes));
        let _ = writeln!(s, "training activations       {:>14}", mib(self.training_activation_bytes));
        let _ = writeln!(s, "training memory            {:>14}", mib(self.training_memory_bytes));
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<20} {:>12} {:>12} {:>14} {:>14}",
            "module", "params", "trainable", "MACs", "train act"
        );
        for m in &self.per_module {
            let _ = writeln!(
                s,
                "{:<20} {:>12} {:>12} {:>14} {:>14}",
                m.name,
                m.params,
                m.trainable_params,
                m.macs,
                mib(m.training_activation_bytes)
            );
        }
        s
    }
}

impl CompareReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let (h, w) = self.input_size;
        let _ = writeln!(s, "{} -> {} at {h}x{w} (ratio = b / a)", self.name_a, self.name_b);
        let rows = [
            ("total params", self.a.total_params, self.b.total_params, self.params_ratio),
            ("trainable params", self.a.trainable_params, self.b.trainable_params, self.trainable_params_ratio),
            ("MACs", self.a.macs, self.b.macs, self.macs_ratio),
            ("inference act peak", self.a.activation_bytes, self.b.activation_bytes, self.activation_ratio),
            (
                "training activations",
                self.a.training_activation_bytes,
                self.b.training_activation_bytes,
                self.training_activation_ratio,
            ),
            (
                "training memory",
                self.a.training_memory_bytes,
                self.b.training_memory_bytes,
                self.training_memory_ratio,
            ),
        ];
        let _ = writeln!(s, "{:<22} {:>14} {:>14} {:>8}", "quantity", "a", "b", "ratio");
        for (name, a, b, r) in rows {
            let _ = writeln!(s, "{name:<22} {a:>14} {b:>14} {r:>8.4}");
        }
        s
    }
}
