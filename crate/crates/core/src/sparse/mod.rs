//! CSR storage, the compressed model, and the sparse-vs-dense benchmark.
//!
//! Both runtimes execute in `f32` over the same layer loop: dense layers as
//! `W^T X^T`, conv layers as the kernel matrix times the im2col patch matrix
//! of each image. Only the matrix kernel differs.

mod bench;
mod csr;
mod model;

pub use bench::{bench, BenchConfig, BenchResult, DenseRuntime};
pub use csr::{csr_from_dense, ColIndices, CsrMatrix};
pub use model::{DenseMatrix, SparseLayer, SparseModel, SPARSE_MAGIC, SPARSE_VERSION};
