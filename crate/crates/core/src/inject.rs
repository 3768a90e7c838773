//! Error injection and resilience characterization.
//!
//! Faults are injected into the wide (pre-requantization) outputs of the
//! quantized GEMMs of a small pre-norm transformer. The network keeps the
//! structural features that govern error resilience:
//!
//! - `o_proj` and `down` write their wide outputs straight into the residual
//!   stream, which the next RMS normalization reads;
//! - `qkv` (an i8 key/value cache) and `up` (the i8 input of `down`) are
//!   requantized, so large faults there saturate at the i8 range;
//! - attention averages corrupted keys and values over the context;
//! - prefill builds the key/value cache that a decode step reuses.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stream::SeededStream;
use crate::tensor::{gemm, quantize, QuantTensor, WideTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Qkv,
    OProj,
    Up,
    Down,
    /// The classification head after the last block.
    Other,
}

impl Component {
    pub const BLOCK: [Component; 4] = [Component::Qkv, Component::OProj, Component::Up, Component::Down];

    pub fn as_str(&self) -> &'static str {
        match self {
            Component::Qkv => "qkv",
            Component::OProj => "o_proj",
            Component::Up => "up",
            Component::Down => "down",
            Component::Other => "other",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qkv" => Ok(Component::Qkv),
            "o_proj" => Ok(Component::OProj),
            "up" => Ok(Component::Up),
            "down" => Ok(Component::Down),
            "other" => Ok(Component::Other),
            _ => Err(Error::invalid(format!("unknown injection target {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prefill,
    Decode,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Prefill => "prefill",
            Stage::Decode => "decode",
        }
    }
}

/// How faulty elements are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Selection {
    /// Every element independently with probability `rate`.
    #[default]
    Bernoulli,
    /// Exactly `round(rate · N)` distinct elements.
    ExactCount,
    /// Per `rows × cols` output tile: `round(rate · tile columns)` distinct
    /// columns, one faulty element each. Mirrors the statistics a tile
    /// checksum observes.
    Tiles { rows: usize, cols: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionSpec {
    pub target: Component,
    #[serde(default)]
    pub layer_index: usize,
    /// Bit-flip mode: XOR this bit of the 32-bit wide output.
    #[serde(default)]
    pub bit_position: Option<u32>,
    /// Value mode: add ±magnitude, in output quanta.
    #[serde(default)]
    pub magnitude: Option<f64>,
    pub rate: f64,
    #[serde(default = "prefill")]
    pub stage: Stage,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub selection: Selection,
}

fn prefill() -> Stage {
    Stage::Prefill
}

pub const WIDE_BITS: u32 = 32;

impl InjectionSpec {
    pub fn bit(target: Component, layer_index: usize, bit: u32, rate: f64, stage: Stage, seed: u64) -> Self {
        Self {
            target,
            layer_index,
            bit_position: Some(bit),
            magnitude: None,
            rate,
            stage,
            seed,
            selection: Selection::Bernoulli,
        }
    }

    pub fn value(target: Component, layer_index: usize, magnitude: f64, rate: f64, stage: Stage, seed: u64) -> Self {
        Self {
            target,
            layer_index,
            bit_position: None,
            magnitude: Some(magnitude),
            rate,
            stage,
            seed,
            selection: Selection::Bernoulli,
        }
    }

    pub fn with_selection(mut self, selection: Selection) -> Self {
        self.selection = selection;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::invalid(format!(
                "injection rate must be in [0, 1], got {}",
                self.rate
            )));
        }
        match (self.bit_position, self.magnitude) {
            (Some(b), None) if b >= WIDE_BITS => Err(Error::invalid(format!(
                "bit_position {b} outside the {WIDE_BITS}-bit accumulator"
            ))),
            (Some(_), None) => Ok(()),
            (None, Some(m)) if m.is_finite() && m >= 0.0 => Ok(()),
            (None, Some(m)) => Err(Error::invalid(format!("magnitude must be non-negative, got {m}"))),
            _ => Err(Error::invalid("exactly one of bit_position or magnitude must be set")),
        }?;
        if let Selection::Tiles { rows, cols } = self.selection {
            if rows == 0 || cols == 0 {
                return Err(Error::invalid("tile selection needs positive tile dims"));
            }
        }
        Ok(())
    }
}

fn select_positions(rows: usize, cols: usize, spec: &InjectionSpec, stream: &mut SeededStream) -> Vec<usize> {
    let n = rows * cols;
    match spec.selection {
        Selection::Bernoulli => (0..n).filter(|_| stream.next_bool(spec.rate)).collect(),
        Selection::ExactCount => {
            let count = (spec.rate * n as f64).round() as usize;
            let mut p = stream.sample_indices(n, count);
            p.sort_unstable();
            p
        }
        Selection::Tiles { rows: tr, cols: tc } => {
            let mut out = Vec::new();
            for r0 in (0..rows).step_by(tr) {
                let r1 = (r0 + tr).min(rows);
                for c0 in (0..cols).step_by(tc) {
                    let c1 = (c0 + tc).min(cols);
                    let count = (spec.rate * (c1 - c0) as f64).round() as usize;
                    for c in stream.sample_indices(c1 - c0, count) {
                        let r = r0 + stream.next_index(r1 - r0);
                        out.push(r * cols + c0 + c);
                    }
                }
            }
            out.sort_unstable();
            out
        }
    }
}

/// Inject into wide outputs; value-mode magnitudes are scaled by `mag_unit`
/// wide units per output quantum. `stream_id` separates independent calls
/// that share one spec seed.
pub fn inject_scaled(y: &WideTensor, spec: &InjectionSpec, mag_unit: f64, stream_id: u64) -> Result<WideTensor> {
    spec.validate()?;
    let (rows, cols) = match y.dims() {
        [r, c] => (*r, *c),
        d => (1, d.iter().product()),
    };
    let mut out = y.clone();
    if spec.rate == 0.0 {
        return Ok(out);
    }
    let mut stream = SeededStream::with_stream(spec.seed, stream_id);
    let positions = select_positions(rows, cols, spec, &mut stream);
    let data = out.data_mut();
    match (spec.bit_position, spec.magnitude) {
        (Some(bit), _) => {
            for p in positions {
                data[p] ^= 1i32.wrapping_shl(bit);
            }
        }
        (None, Some(mag)) => {
            let delta = (mag * mag_unit).round() as i64;
            for p in positions {
                let signed = if stream.next_bool(0.5) { delta } else { -delta };
                data[p] = (data[p] as i64 + signed).clamp(i32::MIN as i64, i32::MAX as i64) as i32;
            }
        }
        (None, None) => unreachable!("validated"),
    }
    Ok(out)
}

/// Inject with magnitudes in raw wide units.
pub fn inject(y: &WideTensor, spec: &InjectionSpec) -> Result<WideTensor> {
    inject_scaled(y, spec, 1.0, 0)
}

/// Column-major-free dense matrix: `rows` features × `cols` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    fn row_slice(&self, r0: usize, r1: usize) -> Mat {
        Mat {
            rows: r1 - r0,
            cols: self.cols,
            data: self.data[r0 * self.cols..r1 * self.cols].to_vec(),
        }
    }

    fn select_cols(&self, cols: &[usize]) -> Mat {
        let mut m = Mat::zeros(self.rows, cols.len());
        for r in 0..self.rows {
            for (j, &c) in cols.iter().enumerate() {
                m.set(r, j, self.at(r, c));
            }
        }
        m
    }

    /// Token-major copy: element `(r, c)` at `c·rows + r`.
    fn transposed(&self) -> Vec<f64> {
        let mut t = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    fn from_transposed(rows: usize, cols: usize, t: &[f64]) -> Mat {
        let mut m = Mat::zeros(rows, cols);
        for c in 0..cols {
            for r in 0..rows {
                m.data[r * cols + c] = t[c * rows + r];
            }
        }
        m
    }

    fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |a, &b| a.max(b.abs()))
    }

    fn add(&self, other: &Mat) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    /// RMS normalization of every token column.
    fn rms_norm(&self) -> Mat {
        let mut m = self.clone();
        for c in 0..self.cols {
            let ms = (0..self.rows).map(|r| self.at(r, c).powi(2)).sum::<f64>() / self.rows as f64;
            let inv = 1.0 / (ms + 1e-6).sqrt();
            for r in 0..self.rows {
                m.set(r, c, self.at(r, c) * inv);
            }
        }
        m
    }

    fn relu(mut self) -> Mat {
        for v in &mut self.data {
            *v = v.max(0.0);
        }
        self
    }
}

/// A quantized linear layer: i8 weights, static input and output steps.
///
/// Requantized layers round and clamp their outputs to i8 at `out_scale`;
/// the others dequantize the wide accumulator directly, and `out_scale`
/// only sets the quantum that fault magnitudes are measured in.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: QuantTensor,
    pub in_scale: f64,
    pub out_scale: f64,
    pub requantized: bool,
}

impl Linear {
    /// Wide-accumulator units per output quantum.
    pub fn mag_unit(&self) -> f64 {
        self.out_scale / (self.w.scale() * self.in_scale)
    }

    fn quantize_input(&self, x: &Mat, scale: f64) -> Result<QuantTensor> {
        quantize(&x.data, &[x.rows, x.cols], scale)
    }

    /// Real values of the wide outputs, through i8 if the layer requantizes.
    pub fn finish(&self, y: &WideTensor, out_scale: f64) -> Result<Mat> {
        let (rows, cols) = y.shape2()?;
        let data = if self.requantized {
            y.requantize(out_scale)?.dequantize()
        } else {
            y.data().iter().map(|&v| v as f64 * y.scale()).collect()
        };
        Ok(Mat { rows, cols, data })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Site {
    pub layer: usize,
    pub component: Component,
}

/// Replaces the exact wide output of a GEMM site.
pub trait GemmHook: Sync {
    fn apply(&self, site: Site, linear: &Linear, x: &QuantTensor, exact: WideTensor) -> Result<WideTensor>;
}

/// Leaves every GEMM exact.
pub struct NoFaults;

impl GemmHook for NoFaults {
    fn apply(&self, _: Site, _: &Linear, _: &QuantTensor, exact: WideTensor) -> Result<WideTensor> {
        Ok(exact)
    }
}

/// Injects one spec at its site.
pub struct SpecHook<'a> {
    pub spec: &'a InjectionSpec,
}

impl GemmHook for SpecHook<'_> {
    fn apply(&self, site: Site, linear: &Linear, _: &QuantTensor, exact: WideTensor) -> Result<WideTensor> {
        if site.component == self.spec.target
            && (site.component == Component::Other || site.layer == self.spec.layer_index)
        {
            inject_scaled(&exact, self.spec, linear.mag_unit(), 0)
        } else {
            Ok(exact)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub seq_len: usize,
    pub n_classes: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            n_layers: 4,
            seq_len: 16,
            n_classes: 8,
            batch: 32,
            seed: 2024,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid("d_model must be a positive multiple of n_heads"));
        }
        if self.d_ff == 0 || self.n_layers == 0 || self.n_classes < 2 || self.batch == 0 {
            return Err(Error::invalid("toy network dims must be positive (n_classes >= 2)"));
        }
        if self.seq_len < 2 {
            return Err(Error::invalid("seq_len must be at least 2 for the decode stage"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    qkv: Linear,
    o: Linear,
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone)]
struct LayerCache {
    /// `d_model × batch·past`, column `b·past + t`.
    k: Mat,
    v: Mat,
}

/// Outputs of a forward pass over the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOut {
    /// Final hidden states of every position the stage produces:
    /// `d_model × batch·seq_len` for prefill, `d_model × batch` for decode.
    pub hidden: Mat,
    /// Final hidden state of each sequence's last token, `d_model × batch`.
    pub last: Mat,
    /// `n_classes × batch`.
    pub logits: Mat,
}

impl ForwardOut {
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.logits.cols)
            .map(|c| {
                (0..self.logits.rows)
                    .max_by(|&a, &b| self.logits.at(a, c).total_cmp(&self.logits.at(b, c)).then(b.cmp(&a)))
                    .unwrap_or(0)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Degradation {
    /// ‖out − ref‖₂ / ‖ref‖₂ over the stage's final hidden states.
    pub distortion: f64,
    /// Fraction of sequences whose predicted class changed.
    pub accuracy_delta: f64,
}

pub fn degradation(out: &ForwardOut, reference: &ForwardOut) -> Degradation {
    let num: f64 = out
        .hidden
        .data
        .iter()
        .zip(&reference.hidden.data)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    let den: f64 = reference.hidden.data.iter().map(|b| b * b).sum();
    let p = out.predictions();
    let q = reference.predictions();
    let changed = p.iter().zip(&q).filter(|(a, b)| a != b).count();
    Degradation {
        distortion: (num / den.max(f64::MIN_POSITIVE)).sqrt(),
        accuracy_delta: changed as f64 / p.len().max(1) as f64,
    }
}

/// Scale resolution during a forward pass: fixed, or recorded from the data
/// the first time each linear is reached.
enum Scales<'a> {
    Fixed,
    Record(&'a mut Vec<(f64, f64)>),
}

/// Output headroom: fault-free outputs use this many of the 127 quanta.
const OUT_HEADROOM: f64 = 100.0;

#[derive(Debug, Clone)]
pub struct ToyNetwork {
    cfg: ToyConfig,
    blocks: Vec<Block>,
    head: Linear,
    /// `d_model × batch·seq_len` inputs, column `b·seq_len + t`.
    inputs: Mat,
    decode_cache: Vec<LayerCache>,
    reference: [ForwardOut; 2],
}

fn random_linear(out_dim: usize, in_dim: usize, requantized: bool, stream: &mut SeededStream) -> Result<Linear> {
    let std = 1.0 / (in_dim as f64).sqrt();
    let vals: Vec<f64> = (0..out_dim * in_dim).map(|_| stream.next_normal() * std).collect();
    let max = vals.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let w = quantize(&vals, &[out_dim, in_dim], max / 127.0)?;
    Ok(Linear {
        w,
        in_scale: 1.0,
        out_scale: 1.0,
        requantized,
    })
}

impl ToyNetwork {
    pub fn build(cfg: ToyConfig) -> Result<Self> {
        cfg.validate()?;
        let mut s = SeededStream::with_stream(cfg.seed, 0);
        let d = cfg.d_model;
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            blocks.push(Block {
                qkv: random_linear(3 * d, d, true, &mut s)?,
                o: random_linear(d, d, false, &mut s)?,
                up: random_linear(cfg.d_ff, d, true, &mut s)?,
                down: random_linear(d, cfg.d_ff, false, &mut s)?,
            });
        }
        let head = random_linear(cfg.n_classes, d, false, &mut s)?;
        let mut inputs = Mat::zeros(d, cfg.batch * cfg.seq_len);
        for v in &mut inputs.data {
            *v = s.next_normal();
        }
        let inputs = inputs.rms_norm();
        let mut net = Self {
            cfg: cfg.clone(),
            blocks,
            head,
            inputs,
            decode_cache: Vec::new(),
            reference: [
                ForwardOut {
                    hidden: Mat::zeros(0, 0),
                    last: Mat::zeros(0, 0),
                    logits: Mat::zeros(0, 0),
                },
                ForwardOut {
                    hidden: Mat::zeros(0, 0),
                    last: Mat::zeros(0, 0),
                    logits: Mat::zeros(0, 0),
                },
            ],
        };
        // Static scales come from one fault-free prefill over the batch.
        let mut table = Vec::new();
        let x = net.inputs.clone();
        net.run_segment(x, cfg.seq_len, None, &NoFaults, Scales::Record(&mut table))?;
        let mut it = table.into_iter();
        for b in &mut net.blocks {
            for lin in [&mut b.qkv, &mut b.o, &mut b.up, &mut b.down] {
                let (i, o) = it
                    .next()
                    .ok_or_else(|| Error::Internal("scale table too short".into()))?;
                lin.in_scale = i;
                lin.out_scale = o;
            }
        }
        let (i, o) = it
            .next()
            .ok_or_else(|| Error::Internal("scale table too short".into()))?;
        net.head.in_scale = i;
        net.head.out_scale = o;

        // Fault-free cache of the first seq_len - 1 tokens for decode.
        let past = cfg.seq_len - 1;
        let prefix_cols: Vec<usize> = (0..cfg.batch)
            .flat_map(|b| (0..past).map(move |t| b * cfg.seq_len + t))
            .collect();
        let prefix = net.inputs.select_cols(&prefix_cols);
        let (_, cache) = net.run_segment(prefix, past, None, &NoFaults, Scales::Fixed)?;
        net.decode_cache = cache;
        net.reference = [
            net.forward(Stage::Prefill, &NoFaults)?,
            net.forward(Stage::Decode, &NoFaults)?,
        ];
        Ok(net)
    }

    pub fn config(&self) -> &ToyConfig {
        &self.cfg
    }

    pub fn linear(&self, site: Site) -> Result<&Linear> {
        if site.component == Component::Other {
            return Ok(&self.head);
        }
        let b = self.blocks.get(site.layer).ok_or_else(|| {
            Error::invalid(format!(
                "layer {} out of range (network has {})",
                site.layer,
                self.blocks.len()
            ))
        })?;
        Ok(match site.component {
            Component::Qkv => &b.qkv,
            Component::OProj => &b.o,
            Component::Up => &b.up,
            Component::Down => &b.down,
            Component::Other => unreachable!(),
        })
    }

    /// Fault-free last-token outputs for a stage.
    pub fn reference(&self, stage: Stage) -> &ForwardOut {
        match stage {
            Stage::Prefill => &self.reference[0],
            Stage::Decode => &self.reference[1],
        }
    }

    /// Wide output element count of a site in one stage's forward pass.
    pub fn site_elements(&self, site: Site, stage: Stage) -> Result<usize> {
        let rows = self.linear(site)?.w.shape2()?.0;
        let cols = match (stage, site.component) {
            (_, Component::Other) | (Stage::Decode, _) => self.cfg.batch,
            (Stage::Prefill, _) => self.cfg.batch * self.cfg.seq_len,
        };
        Ok(rows * cols)
    }

    pub fn forward(&self, stage: Stage, hook: &dyn GemmHook) -> Result<ForwardOut> {
        let t = self.cfg.seq_len;
        let last: Vec<usize> = (0..self.cfg.batch).map(|b| b * t + t - 1).collect();
        let (hidden, _) = match stage {
            Stage::Prefill => self.run_segment(self.inputs.clone(), t, None, hook, Scales::Fixed)?,
            Stage::Decode => {
                let x = self.inputs.select_cols(&last);
                self.run_segment(x, 1, Some(&self.decode_cache), hook, Scales::Fixed)?
            }
        };
        let last = match stage {
            Stage::Prefill => hidden.select_cols(&last),
            Stage::Decode => hidden.clone(),
        };
        let site = Site {
            layer: 0,
            component: Component::Other,
        };
        let logits = self.apply_linear(&self.head, site, &last, hook, &mut Scales::Fixed)?;
        Ok(ForwardOut { hidden, last, logits })
    }

    fn apply_linear(
        &self,
        lin: &Linear,
        site: Site,
        x: &Mat,
        hook: &dyn GemmHook,
        scales: &mut Scales<'_>,
    ) -> Result<Mat> {
        let in_scale = match scales {
            Scales::Fixed => lin.in_scale,
            Scales::Record(_) => x.max_abs().max(1e-9) / 127.0,
        };
        let xq = lin.quantize_input(x, in_scale)?;
        let exact = gemm(&lin.w, &xq)?;
        let out_scale = match scales {
            Scales::Fixed => lin.out_scale,
            Scales::Record(table) => {
                let max = exact.data().iter().map(|v| v.unsigned_abs()).max().unwrap_or(0) as f64;
                let o = (max * exact.scale()).max(1e-9) / OUT_HEADROOM;
                table.push((in_scale, o));
                o
            }
        };
        let y = match scales {
            Scales::Fixed => hook.apply(site, lin, &xq, exact)?,
            Scales::Record(_) => exact,
        };
        lin.finish(&y, out_scale)
    }

    /// Runs the blocks over `t_new` new tokens per sequence (columns
    /// `b·t_new + i`), attending to `cache` when given. Returns the final
    /// normalized hidden state and the updated per-layer cache.
    fn run_segment(
        &self,
        mut x: Mat,
        t_new: usize,
        cache: Option<&[LayerCache]>,
        hook: &dyn GemmHook,
        mut scales: Scales<'_>,
    ) -> Result<(Mat, Vec<LayerCache>)> {
        let d = self.cfg.d_model;
        let heads = self.cfg.n_heads;
        let hd = d / heads;
        let batch = self.cfg.batch;
        let past = cache.map(|c| c[0].k.cols / batch).unwrap_or(0);
        let total = past + t_new;
        let inv_sqrt = 1.0 / (hd as f64).sqrt();
        let mut new_cache = Vec::with_capacity(self.blocks.len());
        for (layer, block) in self.blocks.iter().enumerate() {
            let site = |component| Site { layer, component };
            let qkv = self.apply_linear(&block.qkv, site(Component::Qkv), &x.rms_norm(), hook, &mut scales)?;
            let q = qkv.row_slice(0, d);
            let k_new = qkv.row_slice(d, 2 * d);
            let v_new = qkv.row_slice(2 * d, 3 * d);
            // full keys/values per sequence: cached past then new tokens
            let mut k_all = Mat::zeros(d, batch * total);
            let mut v_all = Mat::zeros(d, batch * total);
            for b in 0..batch {
                for t in 0..total {
                    let (src_k, src_v, col) = if t < past {
                        let c = cache.expect("past > 0 implies cache");
                        (&c[layer].k, &c[layer].v, b * past + t)
                    } else {
                        (&k_new, &v_new, b * t_new + (t - past))
                    };
                    for r in 0..d {
                        k_all.set(r, b * total + t, src_k.at(r, col));
                        v_all.set(r, b * total + t, src_v.at(r, col));
                    }
                }
            }
            // token-major copies keep the per-head dot products contiguous
            let qt = q.transposed();
            let kt = k_all.transposed();
            let vt = v_all.transposed();
            let mut attn_t = vec![0.0; batch * t_new * d];
            let mut scores = vec![0.0; total];
            for b in 0..batch {
                for i in 0..t_new {
                    let qc = b * t_new + i;
                    let pos = past + i;
                    for h in 0..heads {
                        let lo = h * hd;
                        let qv = &qt[qc * d + lo..qc * d + lo + hd];
                        let mut max = f64::NEG_INFINITY;
                        for (t, s) in scores.iter_mut().enumerate().take(pos + 1) {
                            let kc = (b * total + t) * d + lo;
                            *s = qv.iter().zip(&kt[kc..kc + hd]).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt;
                            max = max.max(*s);
                        }
                        let mut z = 0.0;
                        for s in scores.iter_mut().take(pos + 1) {
                            *s = (*s - max).exp();
                            z += *s;
                        }
                        let out = &mut attn_t[qc * d + lo..qc * d + lo + hd];
                        for (t, s) in scores.iter().enumerate().take(pos + 1) {
                            let vc = (b * total + t) * d + lo;
                            for (o, v) in out.iter_mut().zip(&vt[vc..vc + hd]) {
                                *o += s * v;
                            }
                        }
                        for o in out.iter_mut() {
                            *o /= z;
                        }
                    }
                }
            }
            let attn = Mat::from_transposed(d, batch * t_new, &attn_t);
            let o = self.apply_linear(&block.o, site(Component::OProj), &attn, hook, &mut scales)?;
            x = x.add(&o);
            let u = self
                .apply_linear(&block.up, site(Component::Up), &x.rms_norm(), hook, &mut scales)?
                .relu();
            let dn = self.apply_linear(&block.down, site(Component::Down), &u, hook, &mut scales)?;
            x = x.add(&dn);
            new_cache.push(LayerCache { k: k_all, v: v_all });
        }
        let x = x.rms_norm();
        if let Scales::Record(_) = scales {
            // the head sees the last-token hidden states
            let t = self.cfg.seq_len;
            let last: Vec<usize> = (0..batch).map(|b| b * t + t - 1).collect();
            let h = x.select_cols(&last);
            let site = Site {
                layer: 0,
                component: Component::Other,
            };
            self.apply_linear(&self.head, site, &h, hook, &mut scales)?;
        }
        Ok((x, new_cache))
    }

    fn check_spec(&self, spec: &InjectionSpec) -> Result<()> {
        spec.validate()?;
        if spec.target != Component::Other && spec.layer_index >= self.cfg.n_layers {
            return Err(Error::invalid(format!(
                "injection targets layer {} but the network has {} layers",
                spec.layer_index, self.cfg.n_layers
            )));
        }
        Ok(())
    }

    /// Degradation of one injected run against the fault-free run.
    pub fn evaluate(&self, spec: &InjectionSpec) -> Result<Degradation> {
        self.check_spec(spec)?;
        let out = self.forward(spec.stage, &SpecHook { spec })?;
        Ok(degradation(&out, self.reference(spec.stage)))
    }
}

/// Mean degradation over `trials` seeds starting at `spec.seed`.
pub fn mean_degradation(net: &ToyNetwork, spec: &InjectionSpec, trials: usize) -> Result<Degradation> {
    if trials == 0 {
        return Err(Error::invalid("need at least one trial"));
    }
    let runs = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut s = spec.clone();
            s.seed = spec.seed.wrapping_add(t);
            net.evaluate(&s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Degradation {
        distortion: runs.iter().map(|d| d.distortion).sum::<f64>() / trials as f64,
        accuracy_delta: runs.iter().map(|d| d.accuracy_delta).sum::<f64>() / trials as f64,
    })
}

/// Degradation when every `rows × cols` tile of a site's output carries
/// `round(freq · cols)` faulty columns of `mag` quanta each: the pattern a
/// tile checksum summarizes as `(freq, mag)`.
#[allow(clippy::too_many_arguments)]
pub fn tile_pattern_degradation(
    net: &ToyNetwork,
    site: Site,
    stage: Stage,
    tile: (usize, usize),
    freq: f64,
    mag: f64,
    trials: usize,
    seed: u64,
) -> Result<Degradation> {
    let spec =
        InjectionSpec::value(site.component, site.layer, mag, freq, stage, seed).with_selection(Selection::Tiles {
            rows: tile.0,
            cols: tile.1,
        });
    mean_degradation(net, &spec, trials)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResilienceRow {
    pub spec: InjectionSpec,
    pub degradation: Degradation,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResilienceReport {
    pub rows: Vec<ResilienceRow>,
}

impl ResilienceReport {
    /// Long format: one line per (spec, metric).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("target,layer,bit,rate,magnitude,stage,metric,value\n");
        for row in &self.rows {
            let sp = &row.spec;
            let bit = sp.bit_position.map(|b| b.to_string()).unwrap_or_default();
            let mag = sp.magnitude.map(|m| format!("{m}")).unwrap_or_default();
            for (metric, value) in [
                ("distortion", row.degradation.distortion),
                ("accuracy_delta", row.degradation.accuracy_delta),
            ] {
                s.push_str(&format!(
                    "{},{},{},{},{},{},{},{:.9}\n",
                    sp.target,
                    sp.layer_index,
                    bit,
                    sp.rate,
                    mag,
                    sp.stage.as_str(),
                    metric,
                    value
                ));
            }
        }
        s
    }
}

/// Evaluate every spec against the fault-free network; rows keep sweep order.
pub fn run_characterization(net: &ToyNetwork, sweep: &[InjectionSpec]) -> Result<ResilienceReport> {
    run_characterization_trials(net, sweep, 1)
}

/// As [`run_characterization`], averaging each spec over `trials` seeds.
pub fn run_characterization_trials(
    net: &ToyNetwork,
    sweep: &[InjectionSpec],
    trials: usize,
) -> Result<ResilienceReport> {
    for spec in sweep {
        net.check_spec(spec)?;
    }
    let rows = sweep
        .par_iter()
        .map(|spec| {
            Ok(ResilienceRow {
                spec: spec.clone(),
                degradation: mean_degradation(net, spec, trials)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ResilienceReport { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub rate: f64,
    pub magnitude: f64,
    pub count: usize,
    pub skipped: bool,
    pub degradation: Option<Degradation>,
}

/// Constant total-error sweep: at each rate, `count = round(rate · N)`
/// elements of the site's output take `magnitude = total_mag / count`
/// quanta each. Degradation is averaged over `trials` seeds starting at
/// `seed`.
pub fn magnitude_frequency_sweep(
    net: &ToyNetwork,
    site: Site,
    stage: Stage,
    total_mag: f64,
    rates: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    if rates.len() < 3 {
        return Err(Error::invalid("magnitude-frequency sweep needs at least 3 points"));
    }
    if trials == 0 {
        return Err(Error::invalid("magnitude-frequency sweep needs at least one trial"));
    }
    let n = net.site_elements(site, stage)? as f64;
    rates
        .par_iter()
        .map(|&rate| {
            let count = (rate * n).round() as usize;
            if rate * n < 1.0 || count == 0 {
                return Ok(SweepPoint {
                    rate,
                    magnitude: 0.0,
                    count: 0,
                    skipped: true,
                    degradation: None,
                });
            }
            let magnitude = total_mag / count as f64;
            let mut sum = Degradation {
                distortion: 0.0,
                accuracy_delta: 0.0,
            };
            for t in 0..trials as u64 {
                let spec = InjectionSpec::value(site.component, site.layer, magnitude, rate, stage, seed + t)
                    .with_selection(Selection::ExactCount);
                let d = net.evaluate(&spec)?;
                sum.distortion += d.distortion;
                sum.accuracy_delta += d.accuracy_delta;
            }
            Ok(SweepPoint {
                rate,
                magnitude,
                count,
                skipped: false,
                degradation: Some(Degradation {
                    distortion: sum.distortion / trials as f64,
                    accuracy_delta: sum.accuracy_delta / trials as f64,
                }),
            })
        })
        .collect()
}

/// Rates whose fault counts run geometrically from 1 to `max_count`.
pub fn geometric_rates(elements: usize, max_count: usize, points: usize) -> Vec<f64> {
    let n = elements as f64;
    let max = max_count.min(elements).max(1) as f64;
    (0..points)
        .map(|i| {
            let t = if points > 1 {
                i as f64 / (points - 1) as f64
            } else {
                0.0
            };
            max.powf(t).round() / n
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeros(n: usize) -> WideTensor {
        WideTensor::new(vec![1, n], vec![0; n], 1.0).unwrap()
    }

    #[test]
    fn zero_rate_is_identity() {
        let y = WideTensor::new(vec![2, 2], vec![1, -2, 3, 4], 1.0).unwrap();
        let spec = InjectionSpec::bit(Component::Qkv, 0, 5, 0.0, Stage::Prefill, 1);
        assert_eq!(inject(&y, &spec).unwrap(), y);
    }

    #[test]
    fn full_rate_bit_zero_sets_ones() {
        let spec = InjectionSpec::bit(Component::Qkv, 0, 0, 1.0, Stage::Prefill, 1);
        let out = inject(&zeros(50), &spec).unwrap();
        assert!(out.data().iter().all(|&v| v == 1));
    }

    #[test]
    fn bit_out_of_range_rejected() {
        let spec = InjectionSpec::bit(Component::Qkv, 0, 32, 0.5, Stage::Prefill, 1);
        assert!(matches!(inject(&zeros(4), &spec), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn exactly_one_mode() {
        let mut spec = InjectionSpec::bit(Component::Qkv, 0, 3, 0.5, Stage::Prefill, 1);
        spec.magnitude = Some(2.0);
        assert!(spec.validate().is_err());
        spec.bit_position = None;
        spec.magnitude = None;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn binomial_count_and_replay() {
        let spec = InjectionSpec::bit(Component::Qkv, 0, 4, 0.1, Stage::Prefill, 77);
        let a = inject(&zeros(100_000), &spec).unwrap();
        let b = inject(&zeros(100_000), &spec).unwrap();
        assert_eq!(a, b);
        let count = a.data().iter().filter(|&&v| v != 0).count() as f64;
        let mean = 10_000.0;
        let sigma = (100_000.0f64 * 0.1 * 0.9).sqrt();
        assert!((count - mean).abs() <= 3.0 * sigma, "count {count}");
    }

    #[test]
    fn exact_count_selection() {
        let spec =
            InjectionSpec::value(Component::Qkv, 0, 5.0, 0.01, Stage::Prefill, 3).with_selection(Selection::ExactCount);
        let out = inject(&zeros(1000), &spec).unwrap();
        let hits: Vec<i32> = out.data().iter().copied().filter(|&v| v != 0).collect();
        assert_eq!(hits.len(), 10);
        assert!(hits.iter().all(|&v| v.abs() == 5));
    }

    #[test]
    fn tile_selection_hits_requested_columns_per_tile() {
        let spec = InjectionSpec::value(Component::Qkv, 0, 1.0, 0.5, Stage::Prefill, 9)
            .with_selection(Selection::Tiles { rows: 4, cols: 8 });
        let y = WideTensor::new(vec![8, 16], vec![0; 128], 1.0).unwrap();
        let out = inject(&y, &spec).unwrap();
        for r0 in [0, 4] {
            for c0 in [0, 8] {
                let mut cols_hit = 0;
                for c in c0..c0 + 8 {
                    let n = (r0..r0 + 4).filter(|&r| out.at(r, c) != 0).count();
                    assert!(n <= 1);
                    cols_hit += n;
                }
                assert_eq!(cols_hit, 4);
            }
        }
    }

    #[test]
    fn unknown_target_string() {
        assert!(matches!("attn".parse::<Component>(), Err(Error::InvalidArgument(_))));
        assert_eq!("o_proj".parse::<Component>().unwrap(), Component::OProj);
    }

    fn small_net() -> ToyNetwork {
        ToyNetwork::build(ToyConfig {
            batch: 4,
            seq_len: 6,
            n_layers: 2,
            ..ToyConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn prefill_and_decode_agree_when_fault_free() {
        let net = small_net();
        let p = net.reference(Stage::Prefill);
        let d = net.reference(Stage::Decode);
        assert_eq!(p.last, d.last);
        assert_eq!(p.logits, d.logits);
    }

    #[test]
    fn fault_free_spec_has_zero_degradation() {
        let net = small_net();
        let spec = InjectionSpec::value(Component::OProj, 1, 10.0, 0.0, Stage::Decode, 5);
        let d = net.evaluate(&spec).unwrap();
        assert_eq!(d.distortion, 0.0);
        assert_eq!(d.accuracy_delta, 0.0);
    }

    #[test]
    fn layer_out_of_range_rejected() {
        let net = small_net();
        let spec = InjectionSpec::value(Component::Up, 2, 10.0, 0.1, Stage::Prefill, 5);
        assert!(matches!(net.evaluate(&spec), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn empty_sweep_empty_report() {
        let net = small_net();
        let r = run_characterization(&net, &[]).unwrap();
        assert!(r.rows.is_empty());
        assert_eq!(r.to_csv().lines().count(), 1);
    }

    #[test]
    fn requantization_bounds_distortion() {
        let net = small_net();
        let site = Site {
            layer: 0,
            component: Component::Qkv,
        };
        let lin = net.linear(site).unwrap();
        assert!(lin.requantized);
        let x = QuantTensor::from_fn(32, 6, 1.0, |r, c| ((r * 7 + c * 13) % 61) as i8 - 30);
        let exact = gemm(&lin.w, &x).unwrap();
        let clean = exact.requantize(lin.out_scale).unwrap();
        for bit in 0..WIDE_BITS {
            let spec = InjectionSpec::bit(Component::Qkv, 0, bit, 1.0, Stage::Prefill, 1);
            let faulty = inject(&exact, &spec).unwrap().requantize(lin.out_scale).unwrap();
            for (a, b) in faulty.data().iter().zip(clean.data()) {
                assert!((*a as i32 - *b as i32).abs() <= 255);
            }
        }
    }

    #[test]
    fn total_mag_zero_is_flat() {
        let net = small_net();
        let site = Site {
            layer: 0,
            component: Component::Qkv,
        };
        let n = net.site_elements(site, Stage::Prefill).unwrap();
        let rates = geometric_rates(n, 64, 4);
        let pts = magnitude_frequency_sweep(&net, site, Stage::Prefill, 0.0, &rates, 2, 1).unwrap();
        assert!(pts.iter().all(|p| p.degradation.unwrap().distortion == 0.0));
    }

    #[test]
    fn sweep_skips_sub_unit_counts() {
        let net = small_net();
        let site = Site {
            layer: 0,
            component: Component::Qkv,
        };
        let pts = magnitude_frequency_sweep(&net, site, Stage::Prefill, 10.0, &[1e-9, 0.01, 0.1], 1, 1).unwrap();
        assert!(pts[0].skipped);
        assert!(!pts[1].skipped);
    }
}
