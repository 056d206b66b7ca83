//! The compressed model and the `f32` inference path it shares with the
//! dense reference runtime.
//!
//! Container layout, integers little-endian `u32` unless noted:
//!
//! ```text
//! magic        8 bytes  "PTSPSPRS"
//! version      u32      1
//! tag_len      u32      followed by the UTF-8 architecture tag
//! input        u32 ×3   channels, height, width
//! classes      u32
//! norm         f64 ×2   mean, std
//! n_layers     u32
//! per layer:
//!   name_len   u32      followed by UTF-8 name
//!   kind       u32      0 dense (inputs, outputs) | 1 conv (c_in, c_out, kernel, stride, padding)
//!   params     u32 ×2 or ×5
//!   rate       f64      mask sparsity of the layer
//!   rows, cols u32 ×2
//!   idx_width  u32      2 or 4
//!   row_ptr    u32 × (rows + 1)
//!   col_idx    u16 or u32 × nnz
//!   values     f32 × nnz
//!   bias       u32 count, then f32 × count
//! ```
//!
//! Dense layers are stored as `outputs × inputs` (the transpose of the
//! training layout); conv kernels as `c_out × (c_in·k·k)`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::weighted_mean;
use crate::masking::gen_mask;
use crate::sparse::csr::{ColIndices, CsrMatrix};
use crate::tensor::{im2col, transpose, ConvGeometry, Tensor};
use crate::zoo::{
    Architecture, ByteReader, Classifier, InputShape, Layer, LayerKind, ModelSpec, Network, Normalization,
};

pub const SPARSE_MAGIC: &[u8; 8] = b"PTSPSPRS";
pub const SPARSE_VERSION: u32 = 1;

/// A matrix the runtime can multiply against a row-major `cols × n` block.
pub(crate) trait Kernel {
    fn apply(&self, x: &[f32], n: usize, out: &mut [f32]);
}

impl Kernel for CsrMatrix {
    fn apply(&self, x: &[f32], n: usize, out: &mut [f32]) {
        self.spmm_f32(x, n, out)
    }
}

/// Row-major `f32` matrix for the dense reference path.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

impl Kernel for DenseMatrix {
    fn apply(&self, x: &[f32], n: usize, out: &mut [f32]) {
        out.fill(0.0);
        for i in 0..self.rows {
            let row = &mut out[i * n..(i + 1) * n];
            for (j, &a) in self.values[i * self.cols..(i + 1) * self.cols].iter().enumerate() {
                let src = &x[j * n..][..n];
                for (o, &s) in row.iter_mut().zip(src) {
                    *o += a * s;
                }
            }
        }
    }
}

/// Weight of `layer` laid out for the runtime, as a flat row-major matrix.
pub(crate) fn runtime_layout(kind: &LayerKind, weight: &Tensor) -> (usize, usize, Vec<f64>) {
    match *kind {
        LayerKind::Dense { inputs, outputs } => (outputs, inputs, transpose(weight.data(), inputs, outputs)),
        LayerKind::Conv { c_out, .. } => (c_out, weight.len() / c_out, weight.data().to_vec()),
    }
}

/// Logits for a row-major `batch × D` block of normalized inputs. ReLU
/// follows every layer but the last.
pub(crate) fn run_layers<K: Kernel>(
    layers: &[(LayerKind, &K, &[f32])],
    input: InputShape,
    x: &[f32],
    batch: usize,
) -> Vec<f32> {
    assert_eq!(x.len(), batch * input.numel(), "input length does not match batch x {}", input.numel());
    let mut act = x.to_vec();
    let (mut c, mut h, mut w) = (input.channels, input.height, input.width);
    let last = layers.len() - 1;
    for (li, &(kind, matrix, bias)) in layers.iter().enumerate() {
        let relu = li != last;
        match kind {
            LayerKind::Conv { kernel, stride, padding, c_out, .. } => {
                let g = ConvGeometry { c_in: c, h, w, kh: kernel, kw: kernel, stride, padding };
                let pos = g.out_positions();
                let d_in = c * h * w;
                let mut next = vec![0.0f32; batch * c_out * pos];
                for b in 0..batch {
                    let cols = im2col(&act[b * d_in..(b + 1) * d_in], &g);
                    let out = &mut next[b * c_out * pos..(b + 1) * c_out * pos];
                    matrix.apply(&cols, pos, out);
                    for (ch, chunk) in out.chunks_mut(pos).enumerate() {
                        for v in chunk {
                            *v += bias[ch];
                            if relu && *v < 0.0 {
                                *v = 0.0;
                            }
                        }
                    }
                }
                act = next;
                (c, h, w) = (c_out, g.out_h(), g.out_w());
            }
            LayerKind::Dense { inputs, outputs } => {
                let xt = transpose(&act, batch, inputs);
                let mut y = vec![0.0f32; outputs * batch];
                matrix.apply(&xt, batch, &mut y);
                for (o, chunk) in y.chunks_mut(batch).enumerate() {
                    for v in chunk {
                        *v += bias[o];
                        if relu && *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                }
                act = transpose(&y, outputs, batch);
                (c, h, w) = (outputs, 1, 1);
            }
        }
    }
    act
}

pub(crate) fn to_f32(x: &Tensor) -> Vec<f32> {
    x.data().iter().map(|&v| v as f32).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseLayer {
    pub name: String,
    pub kind: LayerKind,
    pub matrix: CsrMatrix,
    pub bias: Vec<f32>,
    /// Fraction of masked-out weights.
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseModel {
    arch: Architecture,
    input: InputShape,
    classes: usize,
    norm: Normalization,
    layers: Vec<SparseLayer>,
}

impl SparseModel {
    /// Compresses `net` under one binary mask per layer.
    pub fn from_masks(net: &Network, masks: &[Tensor]) -> Result<Self> {
        if masks.len() != net.layers().len() {
            return Err(Error::Contract(format!(
                "{} masks for {} layers",
                masks.len(),
                net.layers().len()
            )));
        }
        let layers = net
            .layers()
            .iter()
            .zip(masks)
            .map(|(layer, mask)| {
                layer.weight.expect_same_shape(mask)?;
                let (rows, cols, w) = runtime_layout(&layer.kind, &layer.weight);
                let (_, _, m) = runtime_layout(&layer.kind, mask);
                let matrix = CsrMatrix::from_dense(rows, cols, &w, &m)?;
                let pruned = mask.data().iter().filter(|&&v| v == 0.0).count();
                Ok(SparseLayer {
                    name: layer.name.clone(),
                    kind: layer.kind,
                    matrix,
                    bias: to_f32(&layer.bias),
                    rate: pruned as f64 / mask.len() as f64,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = net.spec();
        Ok(Self {
            arch: spec.arch.clone(),
            input: spec.input,
            classes: spec.classes,
            norm: net.normalization(),
            layers,
        })
    }

    /// Compresses `net` with hard masks at the given per-layer thresholds.
    pub fn from_thresholds(net: &Network, thresholds: &[f64]) -> Result<Self> {
        let masks: Vec<Tensor> =
            net.layers().iter().zip(thresholds).map(|(l, &t)| gen_mask(&l.weight, t)).collect();
        Self::from_masks(net, &masks)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn input(&self) -> InputShape {
        self.input
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layers(&self) -> &[SparseLayer] {
        &self.layers
    }

    pub fn rates(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.rate).collect()
    }

    pub fn weight_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.matrix.rows() * l.matrix.cols()).collect()
    }

    /// Element-weighted mean of the per-layer mask rates.
    pub fn global_rate(&self) -> f64 {
        weighted_mean(&self.rates(), &self.weight_counts())
    }

    /// CSR bytes over all layers (biases excluded).
    pub fn memory_bytes(&self) -> usize {
        self.layers.iter().map(|l| l.matrix.memory_bytes()).sum()
    }

    /// Bytes the same weights take as dense `f32` arrays.
    pub fn dense_bytes(&self) -> usize {
        self.weight_counts().iter().map(|n| 4 * n).sum()
    }

    /// Decompresses to a dense network holding `M ⊙ W` at `f32` precision.
    pub fn to_network(&self) -> Result<Network> {
        let spec = ModelSpec::new(self.arch.clone(), self.input, self.classes)?;
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let dense = l.matrix.to_dense();
                let weight = match l.kind {
                    LayerKind::Dense { inputs, outputs } => {
                        Tensor::new(vec![inputs, outputs], transpose(dense.data(), outputs, inputs))?
                    }
                    kind => Tensor::new(kind.weight_shape(), dense.into_data())?,
                };
                let bias = Tensor::new(vec![l.bias.len()], l.bias.iter().map(|&b| b as f64).collect())?;
                Ok(Layer { name: l.name.clone(), kind: l.kind, weight, bias })
            })
            .collect::<Result<Vec<_>>>()?;
        Network::from_parts(spec, layers, self.norm)
    }

    /// Logits for `batch` rows of normalized `f32` inputs, batch-major.
    /// Panics unless `x.len() == batch * D`.
    pub fn forward_f32(&self, x: &[f32], batch: usize) -> Vec<f32> {
        let layers: Vec<(LayerKind, &CsrMatrix, &[f32])> =
            self.layers.iter().map(|l| (l.kind, &l.matrix, l.bias.as_slice())).collect();
        run_layers(&layers, self.input, x, batch)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let batch = match x.shape() {
            [b, d] if *d == self.input.numel() => *b,
            s => {
                return Err(Error::Dimension(format!(
                    "sparse model expects B x {} inputs, got {s:?}",
                    self.input.numel()
                )))
            }
        };
        let out = self.forward_f32(&to_f32(x), batch);
        Tensor::new(vec![batch, self.classes], out.iter().map(|&v| v as f64).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SPARSE_MAGIC);
        let put = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        put(&mut out, SPARSE_VERSION as usize);
        let tag = self.arch.to_string();
        put(&mut out, tag.len());
        out.extend_from_slice(tag.as_bytes());
        for v in [self.input.channels, self.input.height, self.input.width, self.classes] {
            put(&mut out, v);
        }
        out.extend_from_slice(&self.norm.mean.to_le_bytes());
        out.extend_from_slice(&self.norm.std.to_le_bytes());
        put(&mut out, self.layers.len());
        for l in &self.layers {
            put(&mut out, l.name.len());
            out.extend_from_slice(l.name.as_bytes());
            match l.kind {
                LayerKind::Dense { inputs, outputs } => {
                    for v in [0, inputs, outputs] {
                        put(&mut out, v);
                    }
                }
                LayerKind::Conv { c_in, c_out, kernel, stride, padding } => {
                    for v in [1, c_in, c_out, kernel, stride, padding] {
                        put(&mut out, v);
                    }
                }
            }
            out.extend_from_slice(&l.rate.to_le_bytes());
            let m = &l.matrix;
            put(&mut out, m.rows());
            put(&mut out, m.cols());
            put(&mut out, m.col_indices().width());
            for &p in m.row_ptr() {
                out.extend_from_slice(&p.to_le_bytes());
            }
            match m.col_indices() {
                ColIndices::Narrow(v) => v.iter().for_each(|j| out.extend_from_slice(&j.to_le_bytes())),
                ColIndices::Wide(v) => v.iter().for_each(|j| out.extend_from_slice(&j.to_le_bytes())),
            }
            for v in m.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            put(&mut out, l.bias.len());
            for b in &l.bias {
                out.extend_from_slice(&b.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = ByteReader::new(bytes);
        if rd.take(8)? != SPARSE_MAGIC {
            return Err(Error::Format("bad sparse model magic".into()));
        }
        let version = rd.u32()?;
        if version != SPARSE_VERSION {
            return Err(Error::Format(format!(
                "sparse model version {version}, this build reads {SPARSE_VERSION}"
            )));
        }
        let arch: Architecture = rd.string()?.parse().map_err(|e| Error::Format(format!("{e}")))?;
        let u = |rd: &mut ByteReader| rd.u32().map(|v| v as usize);
        let input = InputShape { channels: u(&mut rd)?, height: u(&mut rd)?, width: u(&mut rd)? };
        let classes = u(&mut rd)?;
        let norm = Normalization { mean: rd.f64()?, std: rd.f64()? };
        let n = u(&mut rd)?;
        let spec = ModelSpec::new(arch.clone(), input, classes).map_err(|e| Error::Format(format!("{e}")))?;
        if n != spec.layers.len() {
            return Err(Error::Format(format!("{n} layers stored for {arch}")));
        }
        let mut layers = Vec::with_capacity(n);
        for (expected_name, expected_kind) in &spec.layers {
            let name = rd.string()?;
            let kind = match u(&mut rd)? {
                0 => LayerKind::Dense { inputs: u(&mut rd)?, outputs: u(&mut rd)? },
                1 => LayerKind::Conv {
                    c_in: u(&mut rd)?,
                    c_out: u(&mut rd)?,
                    kernel: u(&mut rd)?,
                    stride: u(&mut rd)?,
                    padding: u(&mut rd)?,
                },
                k => return Err(Error::Format(format!("unknown layer kind {k}"))),
            };
            if &name != expected_name || kind != *expected_kind {
                return Err(Error::Format(format!("layer `{name}` does not match {arch}")));
            }
            let rate = rd.f64()?;
            let rows = u(&mut rd)?;
            let cols = u(&mut rd)?;
            let width = u(&mut rd)?;
            let row_ptr = (0..=rows).map(|_| rd.u32()).collect::<Result<Vec<_>>>()?;
            let nnz = *row_ptr.last().expect("rows + 1 entries") as usize;
            let col_idx = match width {
                2 => ColIndices::Narrow(
                    rd.take(2 * nnz)?.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect(),
                ),
                4 => ColIndices::Wide((0..nnz).map(|_| rd.u32()).collect::<Result<Vec<_>>>()?),
                w => return Err(Error::Format(format!("index width {w}"))),
            };
            let values = rd.f32_vec(nnz)?;
            let matrix = CsrMatrix::from_parts(rows, cols, row_ptr, col_idx, values)?;
            if rows * cols != kind.weight_shape().iter().product::<usize>() {
                return Err(Error::Format(format!("layer `{name}` matrix has the wrong size")));
            }
            let nb = u(&mut rd)?;
            if nb != kind.outputs() {
                return Err(Error::Format(format!("layer `{name}` has {nb} biases")));
            }
            let bias = rd.f32_vec(nb)?;
            layers.push(SparseLayer { name, kind, matrix, bias, rate });
        }
        rd.finish()?;
        Ok(Self { arch, input, classes, norm, layers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

impl Classifier for SparseModel {
    fn normalization(&self) -> Normalization {
        self.norm
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{masked_forward, MaskSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn inputs(batch: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(batch, d, (0..batch * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn max_rel(a: &Tensor, b: &Tensor) -> f64 {
        let scale = b.max_abs().max(1e-12);
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
    }

    fn check_equivalence(arch: Architecture, input: InputShape) {
        let net = Network::init(ModelSpec::new(arch, input, 10).unwrap(), 5);
        let thresholds: Vec<f64> =
            net.layers().iter().map(|l| 0.8 * crate::kde::spread(l.weight.data())).collect();
        let sparse = SparseModel::from_thresholds(&net, &thresholds).unwrap();
        // the decompressed network holds M ⊙ W rounded to f32
        let dense = sparse.to_network().unwrap();
        let x = inputs(7, input.numel(), 6);
        let want = dense.forward(&x).unwrap();
        assert!(max_rel(&sparse.forward(&x).unwrap(), &want) <= 1e-5);
        let masks: Vec<MaskSpec> =
            net.layers().iter().enumerate().map(|(i, l)| MaskSpec::new(i, &l.weight, thresholds[i])).collect();
        let masked = masked_forward(&net, &x, &masks).unwrap();
        assert!(max_rel(&want, &masked) <= 1e-5);
        assert!(sparse.global_rate() > 0.3);
    }

    #[test]
    fn sparse_forward_matches_masked_dense_mlp() {
        check_equivalence(Architecture::Mlp { depth: 2, width: 32 }, InputShape { channels: 1, height: 8, width: 8 });
    }

    #[test]
    fn sparse_forward_matches_masked_dense_cnn() {
        check_equivalence(Architecture::Cnn2Conv2Fc, InputShape { channels: 1, height: 12, width: 12 });
    }

    #[test]
    fn container_round_trip() {
        let input = InputShape { channels: 1, height: 10, width: 10 };
        let net = Network::init(ModelSpec::new(Architecture::Cnn2Conv2Fc, input, 10).unwrap(), 2);
        let sparse = SparseModel::from_thresholds(&net, &[0.1, 0.1, 0.05, 0.2]).unwrap();
        let bytes = sparse.to_bytes();
        assert_eq!(SparseModel::from_bytes(&bytes).unwrap(), sparse);
        let mut bad = bytes.clone();
        bad[0] ^= 1;
        assert!(matches!(SparseModel::from_bytes(&bad), Err(Error::Format(_))));
        assert!(SparseModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn all_ones_masks_reproduce_the_dense_network() {
        let input = InputShape { channels: 1, height: 6, width: 6 };
        let net = Network::init(ModelSpec::new(Architecture::Mlp { depth: 1, width: 8 }, input, 10).unwrap(), 9);
        let masks: Vec<Tensor> = net.layers().iter().map(|l| Tensor::full(l.weight.shape(), 1.0)).collect();
        let sparse = SparseModel::from_masks(&net, &masks).unwrap();
        assert_eq!(sparse.global_rate(), 0.0);
        let x = inputs(3, 36, 1);
        assert!(max_rel(&sparse.forward(&x).unwrap(), &net.forward(&x).unwrap()) <= 1e-5);
    }
}
