//! Encoder families `f_θ: R^d → R^m` with a fixed flat parameter layout.
//!
//! Layout: layers in order; within a layer the weight matrix (out x in)
//! row-major, followed by the bias vector for `Mlp` layers. Curvature
//! operators index directly into this layout.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, Matrix};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EncoderKind {
    /// `Wx`
    Linear,
    /// `vᵀ(Wx)`, scalar output.
    TwoLayerLinear,
    /// affine + tanh hidden layers, affine output layer.
    Mlp,
}

impl EncoderKind {
    fn tag(self) -> u8 {
        match self {
            EncoderKind::Linear => 0,
            EncoderKind::TwoLayerLinear => 1,
            EncoderKind::Mlp => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(EncoderKind::Linear),
            1 => Ok(EncoderKind::TwoLayerLinear),
            2 => Ok(EncoderKind::Mlp),
            t => Err(Error::Format(format!("unknown encoder kind tag {t}"))),
        }
    }

    fn has_bias(self) -> bool {
        self == EncoderKind::Mlp
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
}

fn default_init_scale() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub input_dim: usize,
    /// Output width; forced to 1 for `TwoLayerLinear`.
    pub embed_dim: usize,
    /// Hidden widths: `[k]` for `TwoLayerLinear`, one or more for `Mlp`.
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

impl EncoderSpec {
    pub fn linear(input_dim: usize, embed_dim: usize) -> Self {
        Self {
            kind: EncoderKind::Linear,
            input_dim,
            embed_dim,
            hidden: Vec::new(),
            activation: Activation::Tanh,
            init_scale: 1.0,
            seed: 0,
        }
    }

    pub fn two_layer_linear(input_dim: usize, width: usize) -> Self {
        Self {
            kind: EncoderKind::TwoLayerLinear,
            input_dim,
            embed_dim: 1,
            hidden: vec![width],
            ..Self::linear(input_dim, 1)
        }
    }

    pub fn mlp(input_dim: usize, hidden: &[usize], embed_dim: usize) -> Self {
        Self {
            kind: EncoderKind::Mlp,
            input_dim,
            embed_dim,
            hidden: hidden.to_vec(),
            ..Self::linear(input_dim, embed_dim)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_init_scale(mut self, scale: f64) -> Self {
        self.init_scale = scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 {
            return Err(Error::Config("encoder dimensions must be at least 1".into()));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("hidden widths must be at least 1".into()));
        }
        if !(self.init_scale >= 0.0) || !self.init_scale.is_finite() {
            return Err(Error::Config("init_scale must be finite and non-negative".into()));
        }
        match self.kind {
            EncoderKind::Linear if !self.hidden.is_empty() => {
                Err(Error::Config("linear encoder takes no hidden widths".into()))
            }
            EncoderKind::TwoLayerLinear if self.hidden.len() != 1 || self.embed_dim != 1 => Err(
                Error::Config("two-layer linear encoder needs exactly one hidden width and embed_dim 1".into()),
            ),
            EncoderKind::Mlp if self.hidden.is_empty() => {
                Err(Error::Config("mlp encoder needs at least one hidden width".into()))
            }
            _ => Ok(()),
        }
    }

    /// Per-layer `(rows, cols)` = `(fan_out, fan_in)`.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden);
        dims.push(self.embed_dim);
        dims.windows(2).map(|w| (w[1], w[0])).collect()
    }

    pub fn param_count(&self) -> usize {
        param_count(self.kind, &self.layer_shapes())
    }
}

fn param_count(kind: EncoderKind, shapes: &[(usize, usize)]) -> usize {
    shapes
        .iter()
        .map(|&(r, c)| r * c + if kind.has_bias() { r } else { 0 })
        .sum()
}

/// Unflattened view of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Option<Vec<f64>>,
}

/// Flattened encoder parameters plus the shape metadata needed to read them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    kind: EncoderKind,
    shapes: Vec<(usize, usize)>,
    flat: Vec<f64>,
}

/// Per-layer pre-activations and outputs recorded during a forward pass.
struct Trace {
    /// `inputs[l]` is the input of layer `l`; the final entry is the output.
    inputs: Vec<Vec<f64>>,
}

impl EncoderParams {
    /// Draws every parameter i.i.d. from `U[-s, s]`, `s = init_scale / sqrt(fan_in)`.
    pub fn init(spec: &EncoderSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.layer_shapes();
        let mut flat = Vec::with_capacity(param_count(spec.kind, &shapes));
        for &(rows, cols) in &shapes {
            let s = spec.init_scale / (cols as f64).sqrt();
            let n = rows * cols + if spec.kind.has_bias() { rows } else { 0 };
            for _ in 0..n {
                flat.push(if s == 0.0 { 0.0 } else { rng.uniform_range(-s, s) });
            }
        }
        Ok(Self {
            kind: spec.kind,
            shapes,
            flat,
        })
    }

    /// Initialises from `spec.seed`.
    pub fn init_seeded(spec: &EncoderSpec) -> Result<Self> {
        Self::init(spec, &mut Rng::derive(spec.seed, 0x1417))
    }

    pub fn from_flat(kind: EncoderKind, shapes: Vec<(usize, usize)>, flat: Vec<f64>) -> Result<Self> {
        if shapes.is_empty() {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        for w in shapes.windows(2) {
            if w[1].1 != w[0].0 {
                return Err(Error::shape("EncoderParams::from_flat", w[0].0, w[1].1));
            }
        }
        let expected = param_count(kind, &shapes);
        if flat.len() != expected {
            return Err(Error::shape("EncoderParams::from_flat", expected, flat.len()));
        }
        Ok(Self { kind, shapes, flat })
    }

    /// Single-layer linear encoder with weight `w`.
    pub fn linear(w: &Matrix) -> Self {
        Self {
            kind: EncoderKind::Linear,
            shapes: vec![(w.rows(), w.cols())],
            flat: w.as_slice().to_vec(),
        }
    }

    /// `vᵀ(Wx)` with `W` (k x d) and `v` (k).
    pub fn two_layer_linear(w: &Matrix, v: &[f64]) -> Result<Self> {
        if v.len() != w.rows() {
            return Err(Error::shape("two_layer_linear", w.rows(), v.len()));
        }
        let mut flat = w.as_slice().to_vec();
        flat.extend_from_slice(v);
        Ok(Self {
            kind: EncoderKind::TwoLayerLinear,
            shapes: vec![(w.rows(), w.cols()), (1, w.rows())],
            flat,
        })
    }

    pub fn from_layers(kind: EncoderKind, layers: &[Layer]) -> Result<Self> {
        let shapes: Vec<_> = layers.iter().map(|l| (l.weight.rows(), l.weight.cols())).collect();
        let mut flat = Vec::new();
        for l in layers {
            flat.extend_from_slice(l.weight.as_slice());
            match (&l.bias, kind.has_bias()) {
                (Some(b), true) => flat.extend_from_slice(b),
                (None, false) => {}
                _ => return Err(Error::Config("bias presence does not match encoder kind".into())),
            }
        }
        Self::from_flat(kind, shapes, flat)
    }

    pub fn layers(&self) -> Vec<Layer> {
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.shapes.len());
        for &(r, c) in &self.shapes {
            let weight = Matrix::new(r, c, self.flat[offset..offset + r * c].to_vec())
                .unwrap_or_else(|_| Matrix::zeros(r, c));
            offset += r * c;
            let bias = if self.kind.has_bias() {
                let b = self.flat[offset..offset + r].to_vec();
                offset += r;
                Some(b)
            } else {
                None
            };
            out.push(Layer { weight, bias });
        }
        out
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub fn shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.shapes[0].1
    }

    pub fn output_dim(&self) -> usize {
        self.shapes[self.shapes.len() - 1].0
    }

    /// Same architecture, new parameter values.
    pub fn with_flat(&self, flat: Vec<f64>) -> Result<Self> {
        if flat.len() != self.flat.len() {
            return Err(Error::shape("EncoderParams::with_flat", self.flat.len(), flat.len()));
        }
        Ok(Self {
            kind: self.kind,
            shapes: self.shapes.clone(),
            flat,
        })
    }

    /// The first-layer weight `W`. For `Linear` this is the whole encoder.
    pub fn first_weight(&self) -> Matrix {
        let (r, c) = self.shapes[0];
        Matrix::new(r, c, self.flat[..r * c].to_vec()).unwrap_or_else(|_| Matrix::zeros(r, c))
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::shape("encoder input", self.input_dim(), x.len()));
        }
        Ok(())
    }

    fn is_hidden(&self, layer: usize) -> bool {
        self.kind == EncoderKind::Mlp && layer + 1 < self.shapes.len()
    }

    fn run(&self, x: &[f64]) -> Trace {
        let mut inputs = Vec::with_capacity(self.shapes.len() + 1);
        inputs.push(x.to_vec());
        let mut offset = 0;
        for (l, &(rows, cols)) in self.shapes.iter().enumerate() {
            let input = &inputs[l];
            let w = &self.flat[offset..offset + rows * cols];
            offset += rows * cols;
            let mut out: Vec<f64> = (0..rows)
                .map(|r| crate::linalg::dot(&w[r * cols..(r + 1) * cols], input))
                .collect();
            if self.kind.has_bias() {
                for (o, b) in out.iter_mut().zip(&self.flat[offset..offset + rows]) {
                    *o += b;
                }
                offset += rows;
            }
            if self.is_hidden(l) {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            inputs.push(out);
        }
        Trace { inputs }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut trace = self.run(x);
        Ok(trace.inputs.pop().unwrap_or_default())
    }

    /// Reverse-mode `Jᵀu`, with `J = ∂f_θ(x)/∂θ` in the flat layout.
    pub fn param_jacobian_vector(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        if u.len() != self.output_dim() {
            return Err(Error::shape("param_jacobian_vector cotangent", self.output_dim(), u.len()));
        }
        let trace = self.run(x);
        let mut grad = vec![0.0; self.flat.len()];
        self.backprop(&trace, u.to_vec(), &mut grad);
        Ok(grad)
    }

    /// Accumulates `Jᵀu` into `grad`. Shares one forward pass between several
    /// cotangents when called through [`Self::jacobian`].
    fn backprop(&self, trace: &Trace, cotangent: Vec<f64>, grad: &mut [f64]) {
        let offsets = self.layer_offsets();
        let mut upstream = cotangent;
        for l in (0..self.shapes.len()).rev() {
            let (rows, cols) = self.shapes[l];
            if self.is_hidden(l) {
                // tanh' = 1 - tanh²
                for (g, a) in upstream.iter_mut().zip(&trace.inputs[l + 1]) {
                    *g *= 1.0 - a * a;
                }
            }
            let input = &trace.inputs[l];
            let w_off = offsets[l];
            for r in 0..rows {
                let g = upstream[r];
                if g != 0.0 {
                    axpy(g, input, &mut grad[w_off + r * cols..w_off + (r + 1) * cols]);
                }
            }
            if self.kind.has_bias() {
                let b_off = w_off + rows * cols;
                for r in 0..rows {
                    grad[b_off + r] += upstream[r];
                }
            }
            if l > 0 {
                let w = &self.flat[w_off..w_off + rows * cols];
                let mut next = vec![0.0; cols];
                for r in 0..rows {
                    axpy(upstream[r], &w[r * cols..(r + 1) * cols], &mut next);
                }
                upstream = next;
            }
        }
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.shapes.len());
        let mut off = 0;
        for &(r, c) in &self.shapes {
            offsets.push(off);
            off += r * c + if self.kind.has_bias() { r } else { 0 };
        }
        offsets
    }

    /// Full parameter Jacobian (m x D), one reverse sweep per output.
    pub fn jacobian(&self, x: &[f64]) -> Result<Matrix> {
        self.check_input(x)?;
        let trace = self.run(x);
        let m = self.output_dim();
        let d = self.flat.len();
        let mut jac = Matrix::zeros(m, d);
        for o in 0..m {
            let mut e = vec![0.0; m];
            e[o] = 1.0;
            self.backprop(&trace, e, jac.row_mut(o));
        }
        Ok(jac)
    }

    /// Writes the checkpoint format: magic `SSLP`, version u16, kind u8,
    /// layer count u32, `(rows, cols)` as u64 pairs, parameter count u64,
    /// then little-endian f64 parameters.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&[self.kind.tag()])?;
        w.write_all(&(self.shapes.len() as u32).to_le_bytes())?;
        for &(r, c) in &self.shapes {
            w.write_all(&(r as u64).to_le_bytes())?;
            w.write_all(&(c as u64).to_le_bytes())?;
        }
        w.write_all(&(self.flat.len() as u64).to_le_bytes())?;
        for v in &self.flat {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not an encoder checkpoint (bad magic)".into()));
        }
        let mut b2 = [0u8; 2];
        read_exact(&mut r, &mut b2)?;
        let version = u16::from_le_bytes(b2);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut b1 = [0u8; 1];
        read_exact(&mut r, &mut b1)?;
        let kind = EncoderKind::from_tag(b1[0])?;
        let mut b4 = [0u8; 4];
        read_exact(&mut r, &mut b4)?;
        let n_layers = u32::from_le_bytes(b4) as usize;
        if n_layers == 0 || n_layers > 1024 {
            return Err(Error::Corrupt(format!("implausible layer count {n_layers}")));
        }
        let mut shapes = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            shapes.push((read_u64(&mut r)? as usize, read_u64(&mut r)? as usize));
        }
        let count = read_u64(&mut r)? as usize;
        if count != param_count(kind, &shapes) {
            return Err(Error::Corrupt("parameter count does not match shapes".into()));
        }
        let mut flat = Vec::with_capacity(count);
        let mut b8 = [0u8; 8];
        for _ in 0..count {
            read_exact(&mut r, &mut b8)?;
            flat.push(f64::from_le_bytes(b8));
        }
        Self::from_flat(kind, shapes, flat)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"SSLP";
const CHECKPOINT_VERSION: u16 = 1;

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Corrupt("file truncated".into()),
        _ => Error::Io(e),
    })
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
