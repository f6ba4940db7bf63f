//! The C5 hypernetwork: a shared encoder applied to the query histogram and
//! each additional histogram, cross-branch max pooling, and decoders that emit
//! the query's CCC bias, filters and (optionally) gain.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::ccc::{estimate_illuminant_with, evaluate_ccc, CccParams, HeatMap, Illuminant};
use crate::error::{Error, Result};
use crate::features::{assemble_feature_stack, ChromaHistogram, HistogramConfig, STACK_CHANNELS};
use crate::image::RawImage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    /// Histogram size per axis.
    pub n: usize,
    /// Query plus additional inputs used during training.
    pub m: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub convs_per_block: usize,
    pub emit_gain: bool,
    pub leaky_slope: f64,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            n: 64,
            m: 9,
            depth: 4,
            base_channels: 8,
            convs_per_block: 2,
            emit_gain: false,
            leaky_slope: 0.2,
        }
    }
}

impl ArchitectureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 1 || self.depth < 1 || self.base_channels < 1 || self.convs_per_block < 1 {
            return Err(Error::Config("m, depth, base_channels and convs_per_block must be >= 1".into()));
        }
        if self.n % (1 << self.depth) != 0 {
            return Err(Error::Config(format!("n = {} is not divisible by 2^{}", self.n, self.depth)));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(Error::Config("leaky_slope must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Channels at encoder level `l`; level `depth` is the bottleneck.
    pub fn channels(&self, l: usize) -> usize {
        self.base_channels << l
    }

    /// Names of the emitted maps and their channel counts.
    pub fn heads(&self) -> Vec<(&'static str, usize)> {
        let mut h = vec![("bias", 1), ("filters", 2)];
        if self.emit_gain {
            h.push(("gain", 1));
        }
        h
    }
}

/// Named tensor inside a weight set.
#[derive(Debug, Clone, PartialEq)]
pub struct Named {
    pub name: String,
    pub tensor: Tensor,
}

/// Learnable parameters plus batch-norm running statistics.
///
/// Values are always representable as `f32`, so writing and reading a weight
/// file is lossless.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights {
    arch: ArchitectureConfig,
    hist: HistogramConfig,
    params: Vec<Named>,
    buffers: Vec<Named>,
}

fn round_f32(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
}

struct Layout {
    params: Vec<(String, Vec<usize>)>,
    buffers: Vec<(String, Vec<usize>)>,
}

fn layout(arch: &ArchitectureConfig) -> Layout {
    let mut params = Vec::new();
    let mut buffers = Vec::new();
    let conv = |params: &mut Vec<(String, Vec<usize>)>, name: String, ci: usize, co: usize| {
        params.push((name, vec![co, ci, 3, 3]));
    };
    let mut ci = STACK_CHANNELS;
    for l in 0..=arch.depth {
        let co = arch.channels(l);
        for k in 0..arch.convs_per_block {
            conv(&mut params, format!("enc{l}.conv{k}.w"), if k == 0 { ci } else { co }, co);
            params.push((format!("enc{l}.bn{k}.gamma"), vec![co]));
            params.push((format!("enc{l}.bn{k}.beta"), vec![co]));
            buffers.push((format!("enc{l}.bn{k}.mean"), vec![co]));
            buffers.push((format!("enc{l}.bn{k}.var"), vec![co]));
        }
        ci = co;
    }
    for (head, out) in arch.heads() {
        let mut ci = arch.channels(arch.depth);
        for l in (0..arch.depth).rev() {
            let co = arch.channels(l);
            for k in 0..arch.convs_per_block {
                let cin = if k == 0 { ci + co } else { co };
                conv(&mut params, format!("dec_{head}.up{l}.conv{k}.w"), cin, co);
                params.push((format!("dec_{head}.up{l}.in{k}.gamma"), vec![co]));
                params.push((format!("dec_{head}.up{l}.in{k}.beta"), vec![co]));
            }
            ci = co;
        }
        conv(&mut params, format!("dec_{head}.out.w"), ci, out);
        params.push((format!("dec_{head}.out.b"), vec![out]));
    }
    Layout { params, buffers }
}

impl NetworkWeights {
    /// He-initialized conv kernels, unit scales, zero shifts and biases.
    pub fn init(arch: ArchitectureConfig, hist: HistogramConfig, rng: &mut impl Rng) -> Result<Self> {
        Self::from_layout(arch, hist, |name, shape| {
            let numel = shape.iter().product();
            if name.ends_with(".w") {
                let fan_in = (shape[1] * 9) as f64;
                let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                (0..numel).map(|_| dist.sample(rng) as f32 as f64).collect()
            } else if name.ends_with(".gamma") || name.ends_with(".var") {
                vec![1.0; numel]
            } else {
                vec![0.0; numel]
            }
        })
    }

    fn from_layout(arch: ArchitectureConfig, hist: HistogramConfig, mut fill: impl FnMut(&str, &[usize]) -> Vec<f64>) -> Result<Self> {
        arch.validate()?;
        hist.validate()?;
        if hist.n != arch.n {
            return Err(Error::Config(format!("histogram n = {} but architecture n = {}", hist.n, arch.n)));
        }
        let lay = layout(&arch);
        let mut make = |v: Vec<(String, Vec<usize>)>| -> Vec<Named> {
            v.into_iter()
                .map(|(name, shape)| {
                    let data = fill(&name, &shape);
                    Named {
                        tensor: Tensor::new(shape, data).expect("layout shape"),
                        name,
                    }
                })
                .collect()
        };
        let params = make(lay.params);
        let buffers = make(lay.buffers);
        Ok(Self { arch, hist, params, buffers })
    }

    pub fn arch(&self) -> &ArchitectureConfig {
        &self.arch
    }

    pub fn hist(&self) -> &HistogramConfig {
        &self.hist
    }

    pub fn params(&self) -> &[Named] {
        &self.params
    }

    pub fn buffers(&self) -> &[Named] {
        &self.buffers
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn buffer_count(&self) -> usize {
        self.buffers.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Replaces every parameter value (rounded to `f32` precision).
    pub fn set_params(&mut self, values: &[Vec<f64>]) -> Result<()> {
        self.set(values, true)
    }

    pub fn set_buffers(&mut self, values: &[Vec<f64>]) -> Result<()> {
        self.set(values, false)
    }

    fn set(&mut self, values: &[Vec<f64>], params: bool) -> Result<()> {
        let slots = if params { &mut self.params } else { &mut self.buffers };
        if values.len() != slots.len() || slots.iter().zip(values).any(|(s, v)| s.tensor.numel() != v.len()) {
            return Err(Error::Shape("weight update does not match the layout".into()));
        }
        for (s, v) in slots.iter_mut().zip(values) {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("weights `{}`", s.name)));
            }
            s.tensor.data_mut().copy_from_slice(v);
            round_f32(&mut s.tensor);
        }
        Ok(())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    /// Puts every parameter on `tape`.
    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.tensor.clone(), requires_grad)).collect()
    }
}

const MAGIC: &[u8; 4] = b"C5WT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchitectureConfig,
    hist: HistogramConfig,
}

impl NetworkWeights {
    /// Versioned binary format: magic, version, a JSON header with the
    /// architecture and histogram settings, then named blocks of
    /// little-endian `f32` values, each prefixed by its shape.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let header = serde_json::to_vec(&Header {
            arch: self.arch,
            hist: self.hist,
        })?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        let blocks: Vec<&Named> = self.params.iter().chain(&self.buffers).collect();
        w.write_all(&(blocks.len() as u32).to_le_bytes())?;
        for b in blocks {
            w.write_all(&(b.name.len() as u16).to_le_bytes())?;
            w.write_all(b.name.as_bytes())?;
            w.write_all(&[b.tensor.shape().len() as u8])?;
            for &d in b.tensor.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in b.tensor.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let bad = |msg: String| Error::format("weight file", msg);
        let mut read = |buf: &mut [u8]| r.read_exact(buf).map_err(|e| bad(e.to_string()));
        let mut magic = [0u8; 4];
        read(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let mut u32buf = [0u8; 4];
        read(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        read(&mut u32buf)?;
        let mut header = vec![0u8; u32::from_le_bytes(u32buf) as usize];
        read(&mut header)?;
        let Header { arch, hist } = serde_json::from_slice(&header).map_err(|e| bad(e.to_string()))?;
        let mut weights = Self::from_layout(arch, hist, |_, shape| vec![0.0; shape.iter().product()])
            .map_err(|e| bad(format!("header: {e}")))?;
        read(&mut u32buf)?;
        let count = u32::from_le_bytes(u32buf) as usize;
        let mut blocks = HashMap::new();
        for _ in 0..count {
            let mut u16buf = [0u8; 2];
            read(&mut u16buf)?;
            let mut name = vec![0u8; u16::from_le_bytes(u16buf) as usize];
            read(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
            let mut rank = [0u8; 1];
            read(&mut rank)?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                read(&mut u32buf)?;
                shape.push(u32::from_le_bytes(u32buf) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; numel * 4];
            read(&mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            blocks.insert(name, (shape, data));
        }
        for slot in weights.params.iter_mut().chain(weights.buffers.iter_mut()) {
            let (shape, data) = blocks
                .remove(&slot.name)
                .ok_or_else(|| bad(format!("missing block `{}`", slot.name)))?;
            if shape != slot.tensor.shape() {
                return Err(bad(format!("block `{}` has shape {shape:?}", slot.name)));
            }
            slot.tensor = Tensor::new(shape, data)?;
        }
        if let Some(extra) = blocks.keys().next() {
            return Err(bad(format!("unexpected block `{extra}`")));
        }
        Ok(weights)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f))
    }

    /// Size in bytes of the serialized weight file.
    pub fn file_size(&self) -> usize {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf.len()
    }
}

/// Whether batch norm uses batch statistics or the running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Emitted CCC maps for a batch, as tape nodes.
pub struct Emitted {
    /// `[B, 1, n, n]`
    pub bias: Var,
    /// `[B, 2, n, n]`
    pub filters: Var,
    /// `[B, 1, n, n]` when the gain head exists.
    pub gain: Option<Var>,
    /// Batch statistics per batch-norm layer, in buffer order
    /// (train mode only): `(mean, biased variance)`.
    pub bn_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Runs the network on `input: [B*group, 4, n, n]`, where each consecutive
/// run of `group` rows holds one query (first) and its additional stacks.
pub fn forward(tape: &mut Tape, w: &NetworkWeights, vars: &[Var], input: Var, group: usize, mode: Mode) -> Result<Emitted> {
    let arch = w.arch;
    let shape = tape.value(input).shape().to_vec();
    if shape.len() != 4 || shape[1] != STACK_CHANNELS || shape[2] != arch.n || shape[3] != arch.n {
        return Err(Error::Shape(format!("network input {shape:?} is not [B, 4, {0}, {0}]", arch.n)));
    }
    if group == 0 || shape[0] % group != 0 {
        return Err(Error::Shape(format!("{} rows do not split into groups of {group}", shape[0])));
    }
    let batch = shape[0] / group;
    let index: HashMap<&str, usize> = w.params.iter().enumerate().map(|(i, p)| (p.name.as_str(), i)).collect();
    let p = |name: &str| vars[index[name]];
    let mut bn_stats = Vec::new();
    let mut buf = 0;

    let mut enc_block = |tape: &mut Tape, mut x: Var, l: usize| -> Result<Var> {
        for k in 0..arch.convs_per_block {
            x = tape.conv3x3(x, p(&format!("enc{l}.conv{k}.w")), None)?;
            x = tape.leaky_relu(x, arch.leaky_slope);
            let (g, b) = (p(&format!("enc{l}.bn{k}.gamma")), p(&format!("enc{l}.bn{k}.beta")));
            x = match mode {
                Mode::Train => {
                    let (y, mean, var) = tape.batch_norm(x, g, b)?;
                    bn_stats.push((mean, var));
                    y
                }
                Mode::Eval => {
                    let (mean, var) = (&w.buffers[buf].tensor, &w.buffers[buf + 1].tensor);
                    tape.batch_norm_fixed(x, g, b, mean.data(), var.data())?
                }
            };
            buf += 2;
        }
        Ok(x)
    };

    let query_rows: Vec<usize> = (0..batch).map(|b| b * group).collect();
    let mut skips = Vec::with_capacity(arch.depth);
    let a0 = enc_block(tape, input, 0)?;
    skips.push(if group == 1 { a0 } else { tape.gather(a0, &query_rows)? });
    let pooled = tape.max_pool2(a0)?;
    // After cross-pooling every branch of a group carries the same
    // activations, so deeper levels run once per group.
    let mut x = if group == 1 { pooled } else { tape.group_max(pooled, group)? };
    for l in 1..arch.depth {
        let a = enc_block(tape, x, l)?;
        skips.push(a);
        x = tape.max_pool2(a)?;
    }
    let bottleneck = enc_block(tape, x, arch.depth)?;

    let mut outs = HashMap::new();
    for (head, _) in arch.heads() {
        let mut y = bottleneck;
        for l in (0..arch.depth).rev() {
            y = tape.upsample2(y)?;
            y = tape.concat(y, skips[l])?;
            for k in 0..arch.convs_per_block {
                y = tape.conv3x3(y, p(&format!("dec_{head}.up{l}.conv{k}.w")), None)?;
                y = tape.leaky_relu(y, arch.leaky_slope);
                let (g, b) = (p(&format!("dec_{head}.up{l}.in{k}.gamma")), p(&format!("dec_{head}.up{l}.in{k}.beta")));
                y = tape.instance_norm(y, g, b)?;
            }
        }
        let out = tape.conv3x3(y, p(&format!("dec_{head}.out.w")), Some(p(&format!("dec_{head}.out.b"))))?;
        outs.insert(head, out);
    }
    Ok(Emitted {
        bias: outs["bias"],
        filters: outs["filters"],
        gain: outs.get("gain").copied(),
        bn_stats,
    })
}

/// Stacks `[query, additional...]` groups into one `[B*group, 4, n, n]` input.
///
/// The two histogram channels are multiplied by `n * n` so that a uniform
/// histogram reads 1, on the scale of the coordinate channels.
pub fn stack_input(groups: &[Vec<&ChromaHistogram>]) -> Result<Tensor> {
    let group = groups.first().map(|g| g.len()).ok_or(Error::Empty("network input"))?;
    let n = groups[0][0].n();
    let mut data = Vec::with_capacity(groups.len() * group * STACK_CHANNELS * n * n);
    for g in groups {
        if g.len() != group {
            return Err(Error::Shape("all groups must have the same size".into()));
        }
        for h in g {
            if h.n() != n {
                return Err(Error::Shape("feature stacks differ in size".into()));
            }
            let scale = (n * n) as f64;
            let (hists, coords) = h.as_slice().split_at(2 * n * n);
            data.extend(hists.iter().map(|v| v * scale));
            data.extend_from_slice(coords);
        }
    }
    Tensor::new(vec![groups.len() * group, STACK_CHANNELS, n, n], data)
}

/// Copies sample `b`'s emitted maps off the tape.
pub fn extract_params(tape: &Tape, e: &Emitted, b: usize, n: usize) -> Result<CccParams> {
    let nn = n * n;
    let bias = tape.value(e.bias).data()[b * nn..(b + 1) * nn].to_vec();
    let f = tape.value(e.filters).data();
    let filters = [f[2 * b * nn..(2 * b + 1) * nn].to_vec(), f[(2 * b + 1) * nn..(2 * b + 2) * nn].to_vec()];
    let gain = e.gain.map(|g| tape.value(g).data()[b * nn..(b + 1) * nn].to_vec());
    CccParams::new(n, filters, bias, gain)
}

/// Additional inputs actually fed to the network: the given ones, repeated
/// cyclically up to `m - 1` when fewer are supplied.
pub fn fill_additional<T: Clone>(additional: &[T], m: usize) -> Vec<T> {
    if additional.is_empty() || additional.len() >= m.saturating_sub(1) {
        return additional.to_vec();
    }
    additional.iter().cycle().take(m - 1).cloned().collect()
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub illuminant: Illuminant,
    pub params: CccParams,
    pub heat_map: HeatMap,
}

/// Inference from precomputed feature stacks.
pub fn infer_stacks(query: &ChromaHistogram, additional: &[&ChromaHistogram], w: &NetworkWeights) -> Result<Inference> {
    let extra = fill_additional(additional, w.arch.m);
    let mut group = vec![query];
    group.extend(extra);
    let mut tape = Tape::new();
    let vars = w.register(&mut tape, false);
    let input = tape.constant(stack_input(&[group.clone()])?);
    let e = forward(&mut tape, w, &vars, input, group.len(), Mode::Eval)?;
    let params = extract_params(&tape, &e, 0, w.arch.n)?;
    let heat_map = evaluate_ccc(query, &params)?;
    let illuminant = estimate_illuminant_with(&heat_map, &w.hist)?;
    Ok(Inference {
        illuminant,
        params,
        heat_map,
    })
}

/// Estimates the query's illuminant using the additional images (same camera)
/// as unlabeled context.
pub fn c5_infer(query: &RawImage, additional: &[RawImage], w: &NetworkWeights) -> Result<Inference> {
    let q = assemble_feature_stack(query, &w.hist)?;
    let extra = additional
        .iter()
        .map(|img| assemble_feature_stack(img, &w.hist))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&ChromaHistogram> = extra.iter().collect();
    infer_stacks(&q, &refs, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (ArchitectureConfig, HistogramConfig) {
        let arch = ArchitectureConfig {
            n: 16,
            m: 3,
            depth: 2,
            base_channels: 4,
            convs_per_block: 1,
            emit_gain: false,
            leaky_slope: 0.2,
        };
        (arch, HistogramConfig::new(16, -2.85, 2.85).unwrap())
    }

    #[test]
    fn default_size_is_a_few_megabytes() {
        let w = NetworkWeights::init(ArchitectureConfig::default(), HistogramConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let bytes = w.file_size();
        assert!(bytes > 1_000_000 && bytes < 3_000_000, "{bytes}");
        assert_eq!(bytes, w.param_count() * 4 + w.buffer_count() * 4 + header_bytes(&w));
        assert_eq!(w.arch().channels(3), 64);
    }

    fn header_bytes(w: &NetworkWeights) -> usize {
        let names: usize = w.params().iter().chain(w.buffers()).map(|b| 2 + b.name.len() + 1 + 4 * b.tensor.shape().len()).sum();
        let mut buf = Vec::new();
        w.write_to(&mut buf).unwrap();
        let json = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        4 + 4 + 4 + json + 4 + names
    }

    #[test]
    fn config_validation() {
        let mut a = tiny().0;
        a.n = 18;
        assert!(a.validate().is_err());
        a.n = 16;
        a.m = 0;
        assert!(a.validate().is_err());
    }

    #[test]
    fn output_shapes() {
        let (mut arch, hist) = tiny();
        for gain in [false, true] {
            arch.emit_gain = gain;
            let w = NetworkWeights::init(arch, hist, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let mut tape = Tape::new();
            let vars = w.register(&mut tape, false);
            let x = tape.constant(Tensor::new(vec![6, 4, 16, 16], (0..6 * 4 * 256).map(|i| (i as f64 * 0.01).sin()).collect()).unwrap());
            let e = forward(&mut tape, &w, &vars, x, 3, Mode::Train).unwrap();
            assert_eq!(tape.value(e.bias).shape(), &[2, 1, 16, 16]);
            assert_eq!(tape.value(e.filters).shape(), &[2, 2, 16, 16]);
            assert_eq!(e.gain.map(|g| tape.value(g).shape().to_vec()), gain.then(|| vec![2, 1, 16, 16]));
            assert_eq!(e.bn_stats.len(), w.buffers().len() / 2);
        }
    }

    #[test]
    fn fill_additional_cycles() {
        assert_eq!(fill_additional(&[1, 2], 6), vec![1, 2, 1, 2, 1]);
        assert_eq!(fill_additional(&[1, 2, 3], 3), vec![1, 2, 3]);
        assert!(fill_additional::<u8>(&[], 9).is_empty());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let (arch, hist) = tiny();
        let w = NetworkWeights::init(arch, hist, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut buf = Vec::new();
        w.write_to(&mut buf).unwrap();
        assert_eq!(NetworkWeights::read_from(&buf[..]).unwrap(), w);
        assert!(NetworkWeights::read_from(&buf[..buf.len() - 3]).is_err());
        buf[0] = b'X';
        assert!(NetworkWeights::read_from(&buf[..]).is_err());
    }
}
