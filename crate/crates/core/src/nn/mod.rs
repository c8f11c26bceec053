//! Attention-based encoder, its autodiff engine and optimizer.

pub mod adam;
pub mod container;
pub mod encoder;
pub mod graph;

use ndarray::Array2;
use thiserror::Error;

pub use adam::{step_decay_lr, Adam};
pub use container::ParamContainer;
pub use encoder::{embed_config, encode, encode_graph, EncoderConfig, EncoderParams, ParamNodes, Pooling};
pub use graph::{Graph, GraphError, NodeId};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid encoder configuration: {0}")]
    Config(String),
    #[error("token codes (id {id}, idx {idx}, father {father}) exceed the embedding tables")]
    CodeOutOfBounds { id: u32, idx: u32, father: u32 },
    #[error("configuration without tokens")]
    EmptyConfiguration,
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("parameter container: {0}")]
    Container(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Single-head `softmax(Q Kᵀ / √d_k) V` with a row-wise softmax.
pub fn attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Result<Array2<f64>, NnError> {
    if q.dim() != k.dim() || k.nrows() != v.nrows() {
        return Err(GraphError::Shape {
            op: "attention",
            lhs: q.dim(),
            rhs: k.dim(),
        }
        .into());
    }
    let mut s = q.dot(&k.t()) / (q.ncols() as f64).sqrt();
    graph::softmax_rows(&mut s);
    Ok(s.dot(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_row_returns_v() {
        let out = attention(&array![[0.3, -2.0]], &array![[1.0, 4.0]], &array![[5.0, 6.0, 7.0]]).unwrap();
        assert_eq!(out, array![[5.0, 6.0, 7.0]]);
    }

    #[test]
    fn zero_query_averages_v() {
        let q = Array2::zeros((3, 2));
        let k = array![[1.0, 2.0], [-3.0, 0.5], [0.0, 9.0]];
        let v = array![[1.0, 0.0], [2.0, 3.0], [6.0, -3.0]];
        let out = attention(&q, &k, &v).unwrap();
        for r in 0..3 {
            assert!((out[[r, 0]] - 3.0).abs() < 1e-15 && out[[r, 1]].abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_mismatch() {
        assert!(attention(&Array2::zeros((2, 3)), &Array2::zeros((2, 2)), &Array2::zeros((2, 3))).is_err());
    }
}
