//! Fully-connected ReLU feature extractor with a hand-written reverse pass.
//!
//! Parameters live in one flat vector. Layer `l` (`in → out`) occupies
//! `in·out` weights stored column-major as an `in×out` matrix (equivalently
//! row-major `out×in`), followed by `out` biases. Hidden layers apply ReLU;
//! the output layer is affine.

use std::io::{BufRead, Read, Write};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Hidden and output widths used for every tabular experiment; the input
/// width is prepended per dataset.
pub const DEFAULT_HIDDEN: [usize; 4] = [100, 100, 100, 20];

#[derive(Debug, Clone)]
struct Tape {
    /// Inputs to each layer (`activations[0]` is the network input).
    activations: Vec<DMatrix<f64>>,
    /// Pre-activations of each hidden layer.
    pre: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct FeatureNetwork {
    layer_sizes: Vec<usize>,
    params: Vec<f64>,
    grad: Vec<f64>,
    tape: Option<Tape>,
}

pub fn parameter_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

fn check_architecture(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::InvalidArchitecture(format!(
            "need at least an input and an output layer, got {layer_sizes:?}"
        )));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::InvalidArchitecture(format!(
            "layer widths must be positive, got {layer_sizes:?}"
        )));
    }
    Ok(())
}

impl FeatureNetwork {
    /// He-normal weights `N(0, 2/fan_in)`, zero biases.
    pub fn init<R: Rng + ?Sized>(layer_sizes: &[usize], rng: &mut R) -> Result<Self> {
        check_architecture(layer_sizes)?;
        let mut params = Vec::with_capacity(parameter_count(layer_sizes));
        for w in layer_sizes.windows(2) {
            let (fan_in, out) = (w[0], w[1]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                .map_err(|e| Error::InvalidArchitecture(e.to_string()))?;
            params.extend((0..fan_in * out).map(|_| normal.sample(rng)));
            params.extend(std::iter::repeat_n(0.0, out));
        }
        Ok(Self::assemble(layer_sizes.to_vec(), params))
    }

    pub fn from_params(layer_sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        check_architecture(layer_sizes)?;
        let expected = parameter_count(layer_sizes);
        if params.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                got: params.len(),
            });
        }
        Ok(Self::assemble(layer_sizes.to_vec(), params))
    }

    fn assemble(layer_sizes: Vec<usize>, params: Vec<f64>) -> Self {
        let n = params.len();
        Self {
            layer_sizes,
            params,
            grad: vec![0.0; n],
            tape: None,
        }
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Accumulated gradient since the last [`zero_grad`](Self::zero_grad).
    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut offset = 0;
        self.layer_sizes.windows(2).map(move |w| {
            let start = offset;
            offset += (w[0] + 1) * w[1];
            (start, w[0], w[1])
        })
    }

    fn weights(&self, offset: usize, fan_in: usize, out: usize) -> DMatrix<f64> {
        DMatrix::from_column_slice(fan_in, out, &self.params[offset..offset + fan_in * out])
    }

    fn affine(&self, x: &DMatrix<f64>, offset: usize, fan_in: usize, out: usize) -> DMatrix<f64> {
        let mut h = x * self.weights(offset, fan_in, out);
        let bias = &self.params[offset + fan_in * out..offset + (fan_in + 1) * out];
        for (c, b) in bias.iter().enumerate() {
            h.column_mut(c).add_scalar_mut(*b);
        }
        h
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "network expects {} input features, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Features `g_θ(X)` without recording.
    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        let last = self.layer_sizes.len() - 2;
        let mut h = x.clone();
        for (l, (offset, fan_in, out)) in self.layers().enumerate() {
            h = self.affine(&h, offset, fan_in, out);
            if l < last {
                h.apply(|v| *v = v.max(0.0));
            }
        }
        Ok(h)
    }

    /// Like [`forward`](Self::forward), keeping the intermediates for
    /// [`backward`](Self::backward).
    pub fn forward_recorded(&mut self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        let last = self.layer_sizes.len() - 2;
        let mut activations = vec![x.clone()];
        let mut pre = Vec::with_capacity(last);
        let mut h = x.clone();
        let layers: Vec<_> = self.layers().collect();
        for (l, (offset, fan_in, out)) in layers.into_iter().enumerate() {
            h = self.affine(&h, offset, fan_in, out);
            if l < last {
                pre.push(h.clone());
                h.apply(|v| *v = v.max(0.0));
                activations.push(h.clone());
            }
        }
        self.tape = Some(Tape { activations, pre });
        Ok(h)
    }

    /// Accumulates `∂loss/∂θ` given `∂loss/∂features` for the last recorded
    /// forward pass, and consumes that recording. ReLU uses subgradient 0 at 0.
    pub fn backward(&mut self, upstream: &DMatrix<f64>) -> Result<&[f64]> {
        let tape = self.tape.take().ok_or(Error::NoRecordedForward)?;
        let n = tape.activations[0].nrows();
        if upstream.nrows() != n || upstream.ncols() != self.output_dim() {
            return Err(Error::DimensionMismatch(format!(
                "upstream gradient is {:?}, expected ({n}, {})",
                upstream.shape(),
                self.output_dim()
            )));
        }
        let layers: Vec<_> = self.layers().collect();
        let mut g = upstream.clone();
        for (l, &(offset, fan_in, out)) in layers.iter().enumerate().rev() {
            let input = &tape.activations[l];
            let d_w = input.transpose() * &g;
            for (dst, src) in self.grad[offset..offset + fan_in * out]
                .iter_mut()
                .zip(d_w.iter())
            {
                *dst += src;
            }
            for c in 0..out {
                self.grad[offset + fan_in * out + c] += g.column(c).sum();
            }
            if l > 0 {
                let mut g_prev = &g * self.weights(offset, fan_in, out).transpose();
                let pre = &tape.pre[l - 1];
                g_prev.zip_apply(pre, |gv, p| {
                    if p <= 0.0 {
                        *gv = 0.0;
                    }
                });
                g = g_prev;
            }
        }
        Ok(&self.grad)
    }

    /// Length-prefixed little-endian binary: `u64` count, then `f64` values.
    pub fn write_params_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_params_binary<R: Read>(layer_sizes: &[usize], mut r: R) -> Result<Self> {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        let n = u64::from_le_bytes(buf) as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            params.push(f64::from_le_bytes(buf));
        }
        Self::from_params(layer_sizes, params)
    }

    /// Decimal text: the count on the first line, then one value per line.
    pub fn write_params_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", self.params.len())?;
        for p in &self.params {
            writeln!(w, "{p:e}")?;
        }
        Ok(())
    }

    pub fn read_params_text<R: BufRead>(layer_sizes: &[usize], r: R) -> Result<Self> {
        let mut lines = r.lines();
        let parse_err = |row: usize, message: String| Error::Parse {
            row,
            column: 0,
            message,
        };
        let header = lines
            .next()
            .ok_or_else(|| parse_err(0, "empty checkpoint".into()))??;
        let n: usize = header
            .trim()
            .parse()
            .map_err(|e| parse_err(0, format!("bad count: {e}")))?;
        let mut params = Vec::with_capacity(n);
        for (i, line) in lines.enumerate().take(n) {
            let line = line?;
            params.push(
                line.trim()
                    .parse()
                    .map_err(|e| parse_err(i + 1, format!("bad value {line:?}: {e}")))?,
            );
        }
        if params.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: params.len(),
            });
        }
        Self::from_params(layer_sizes, params)
    }
}
