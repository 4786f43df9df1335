//! Model geometry shared by training, the device simulation and indexing:
//! a small dense encoder (used for both queries and keys) followed by
//! product quantization of key embeddings.

use rand::Rng;

use crate::grad::kernels;
use crate::grad::{GradError, Graph, NodeId, ParameterSet, Tensor};
use crate::objectives::CommitmentForm;
use crate::quantizer::{
    bilinear_param, quantize_ste, CodebookNodes, CodebookSet, QuantError, SelectionKind, SelectionVariant,
    SteOutput,
};
use crate::Error;

pub const W1: &str = "encoder.w1";
pub const B1: &str = "encoder.b1";
pub const W2: &str = "encoder.w2";
pub const B2: &str = "encoder.b2";

/// Dense encoder: `depth = 1` is `xW + b`, `depth = 2` is
/// `tanh(xW₁ + b₁)W₂ + b₂`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub depth: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        match self.depth {
            1 => Ok(()),
            2 if self.hidden_dim > 0 => Ok(()),
            2 => Err(Error::Config("hidden_dim must be positive for depth 2".into())),
            d => Err(Error::Config(format!("encoder depth {d} not in {{1, 2}}"))),
        }
    }

    fn layers(&self) -> Vec<(&'static str, &'static str, usize, usize)> {
        if self.depth == 1 {
            vec![(W1, B1, self.input_dim, self.output_dim)]
        } else {
            vec![
                (W1, B1, self.input_dim, self.hidden_dim),
                (W2, B2, self.hidden_dim, self.output_dim),
            ]
        }
    }

    /// Glorot-uniform weights and zero biases.
    pub fn init<R: Rng>(&self, rng: &mut R) -> ParameterSet {
        let mut params = ParameterSet::new();
        for (w, b, fan_in, fan_out) in self.layers() {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
            params
                .insert(w, Tensor::new(fan_in, fan_out, data).expect("positive extents"))
                .expect("fresh names");
            params.insert(b, Tensor::zeros(1, fan_out)).expect("fresh names");
        }
        params
    }

    /// Encodes the rows of `x` inside `g`, registering encoder parameters.
    pub fn encode(&self, g: &mut Graph, x: NodeId, params: &ParameterSet) -> Result<NodeId, GradError> {
        let mut h = x;
        for (idx, (w, b, _, _)) in self.layers().into_iter().enumerate() {
            if idx > 0 {
                h = g.tanh(h)?;
            }
            let w = g.parameter(w, params.require(w)?)?;
            let b = g.parameter(b, params.require(b)?)?;
            h = g.matmul(h, w)?;
            h = g.add(h, b)?;
        }
        Ok(h)
    }

    /// Graph-free encoding; bit-identical to [`EncoderConfig::encode`].
    pub fn encode_rows(&self, x: &Tensor, params: &ParameterSet) -> Result<Tensor, GradError> {
        let mut h = x.clone();
        for (idx, (w, b, fan_in, _)) in self.layers().into_iter().enumerate() {
            if idx > 0 {
                h = Tensor::from_raw(h.rows(), h.cols(), h.data().iter().map(|v| v.tanh()).collect());
            }
            if h.cols() != fan_in {
                return Err(GradError::Usage(format!("input width {} expected {fan_in}", h.cols())));
            }
            let w = params.require(w)?;
            let b = params.require(b)?;
            let mut out = kernels::matmul(&h, w);
            let cols = out.cols();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += b.data()[i % cols];
            }
            h = out;
        }
        if !h.is_finite() {
            return Err(GradError::InvalidTensor("non-finite encoder output".into()));
        }
        Ok(h)
    }
}

/// Encoder plus quantizer geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Codebook count.
    pub m: usize,
    /// Codewords per codebook.
    pub l: usize,
    pub selection: SelectionKind,
    pub commitment: CommitmentForm,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), Error> {
        self.encoder.validate()?;
        let d = self.encoder.output_dim;
        if self.m == 0 || self.l == 0 {
            return Err(Error::Config("M and L must be positive".into()));
        }
        if !d.is_multiple_of(self.m) {
            return Err(QuantError::NotDivisible { d, m: self.m }.into());
        }
        if self.l > u16::MAX as usize + 1 {
            return Err(Error::Config(format!("L={} exceeds 16-bit codes", self.l)));
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.encoder.output_dim
    }

    pub fn sub_dim(&self) -> usize {
        self.d() / self.m
    }

    /// Stores `books` and, for bilinear selection, identity matrices that
    /// are not yet present.
    pub fn install_codebooks(&self, params: &mut ParameterSet, books: &CodebookSet) -> Result<(), GradError> {
        books.store(params)?;
        if self.selection == SelectionKind::Bilinear {
            for i in 0..self.m {
                if !params.contains(&bilinear_param(i)) {
                    params.insert(bilinear_param(i), Tensor::identity(self.sub_dim()))?;
                }
            }
        }
        Ok(())
    }

    pub fn codebooks(&self, params: &ParameterSet) -> Result<CodebookSet, QuantError> {
        CodebookSet::from_parameters(params, self.m)
    }

    pub fn variant(&self, params: &ParameterSet) -> Result<SelectionVariant, GradError> {
        SelectionVariant::from_parameters(self.selection, params, self.m)
    }

    /// Straight-through quantization of `z` with the model's codebooks.
    pub fn quantize(&self, g: &mut Graph, z: NodeId, params: &ParameterSet) -> Result<SteOutput, GradError> {
        let books = CodebookNodes::register(g, params, self.m, self.selection)?;
        quantize_ste(g, z, &books)
    }
}
