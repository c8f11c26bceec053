//! Structure-aware token embedding followed by a post-norm transformer
//! encoder, pooling and an MLP head that maps each configuration to a
//! fixed-width latent vector.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId, Segment};
use super::NnError;
use crate::space::{Configuration, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean over the encoder outputs of a configuration's tokens.
    Average,
    /// Output at an extra learned token prepended to every sequence.
    TokenMixer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_inner: usize,
    /// Width of each of the four embedding parts.
    pub part_dim: usize,
    pub mlp_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub pooling: Pooling,
    /// When false, identity, index and father parts are zeroed and only the
    /// value embedding varies.
    pub use_structure_embeddings: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_blocks: 6,
            n_heads: 2,
            d_model: 256,
            d_inner: 512,
            part_dim: 64,
            mlp_hidden: vec![128, 128, 128, 32],
            latent_dim: 32,
            pooling: Pooling::Average,
            use_structure_embeddings: true,
        }
    }
}

impl EncoderConfig {
    /// A reduced encoder (2 blocks, `d_model` 32) sized for single-core
    /// benchmark runs.
    pub fn compact() -> Self {
        EncoderConfig {
            n_blocks: 2,
            n_heads: 2,
            d_model: 32,
            d_inner: 64,
            part_dim: 8,
            mlp_hidden: vec![32, 32, 8],
            latent_dim: 8,
            pooling: Pooling::Average,
            use_structure_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::Config(m.to_string()));
        if self.d_model != 4 * self.part_dim {
            return bad("d_model must equal 4 × part_dim");
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.mlp_hidden.last() != Some(&self.latent_dim) {
            return bad("the last MLP layer must have latent_dim units");
        }
        if self.part_dim == 0 || self.d_inner == 0 || self.mlp_hidden.contains(&0) {
            return bad("layer widths must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Arc<Array2<f64>>,
}

/// All trainable encoder weights, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    tensors: Vec<NamedTensor>,
    index: HashMap<String, usize>,
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-a..a))
}

fn normal(rng: &mut ChaCha8Rng, r: usize, c: usize, sd: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| sd * rng.sample::<f64, _>(StandardNormal))
}

impl EncoderParams {
    /// Fresh weights: Xavier-uniform projections, `N(0, 0.02²)` embedding
    /// tables, unit layer-norm scales and zero offsets and biases.
    ///
    /// `n_ids` is the number of identity codes `M` (table has `M + 1` rows,
    /// row 0 being the padding / virtual-root entry) and `max_index` the
    /// largest replica index.
    pub fn init(cfg: &EncoderConfig, n_ids: usize, max_index: usize, seed: u64) -> Result<Self, NnError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, d) = (cfg.part_dim, cfg.d_model);
        let mut t: Vec<(String, Array2<f64>)> = vec![
            ("id_table".into(), normal(&mut rng, n_ids + 1, p, 0.02)),
            ("idx_table".into(), normal(&mut rng, max_index + 1, p, 0.02)),
            ("value_w".into(), xavier(&mut rng, 1, p)),
            ("value_b".into(), Array2::zeros((1, p))),
        ];
        if cfg.pooling == Pooling::TokenMixer {
            t.push(("mixer".into(), normal(&mut rng, 1, d, 0.02)));
        }
        for b in 0..cfg.n_blocks {
            for proj in ["q", "k", "v", "o"] {
                t.push((format!("blocks.{b}.w{proj}"), xavier(&mut rng, d, d)));
                t.push((format!("blocks.{b}.b{proj}"), Array2::zeros((1, d))));
            }
            t.push((format!("blocks.{b}.ln1_g"), Array2::ones((1, d))));
            t.push((format!("blocks.{b}.ln1_b"), Array2::zeros((1, d))));
            t.push((format!("blocks.{b}.ff_w1"), xavier(&mut rng, d, cfg.d_inner)));
            t.push((format!("blocks.{b}.ff_b1"), Array2::zeros((1, cfg.d_inner))));
            t.push((format!("blocks.{b}.ff_w2"), xavier(&mut rng, cfg.d_inner, d)));
            t.push((format!("blocks.{b}.ff_b2"), Array2::zeros((1, d))));
            t.push((format!("blocks.{b}.ln2_g"), Array2::ones((1, d))));
            t.push((format!("blocks.{b}.ln2_b"), Array2::zeros((1, d))));
        }
        let mut fan_in = d;
        for (i, &w) in cfg.mlp_hidden.iter().enumerate() {
            t.push((format!("mlp.{i}.w"), xavier(&mut rng, fan_in, w)));
            t.push((format!("mlp.{i}.b"), Array2::zeros((1, w))));
            fan_in = w;
        }
        Ok(Self::from_tensors(
            t.into_iter()
                .map(|(name, v)| NamedTensor {
                    name,
                    value: Arc::new(v),
                })
                .collect(),
        ))
    }

    pub(crate) fn from_tensors(tensors: Vec<NamedTensor>) -> Self {
        let index = tensors.iter().enumerate().map(|(i, t)| (t.name.clone(), i)).collect();
        EncoderParams { tensors, index }
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.index.get(name).map(|&i| &*self.tensors[i].value)
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    /// Rows of the identity table, `M + 1`.
    pub fn id_rows(&self) -> usize {
        self.get("id_table").map_or(0, |t| t.nrows())
    }

    pub fn idx_rows(&self) -> usize {
        self.get("idx_table").map_or(0, |t| t.nrows())
    }

    /// Flat view in tensor order, row-major.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_values());
        for t in &self.tensors {
            out.extend(t.value.iter().copied());
        }
        out
    }

    /// Overwrites all values from a flat slice; returns the number consumed.
    pub fn set_flat(&mut self, flat: &[f64]) -> usize {
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.value.len();
            let shape = t.value.dim();
            t.value = Arc::new(Array2::from_shape_vec(shape, flat[off..off + n].to_vec()).expect("shape preserved"));
            off += n;
        }
        off
    }

    /// Checks tensor names and shapes against `cfg`.
    pub fn check_against(&self, cfg: &EncoderConfig) -> Result<(), NnError> {
        let reference = EncoderParams::init(cfg, self.id_rows().saturating_sub(1), self.idx_rows().saturating_sub(1), 0)?;
        if reference.tensors.len() != self.tensors.len() {
            return Err(NnError::Config(format!(
                "expected {} tensors, found {}",
                reference.tensors.len(),
                self.tensors.len()
            )));
        }
        for (a, b) in reference.tensors.iter().zip(&self.tensors) {
            if a.name != b.name || a.value.dim() != b.value.dim() {
                return Err(NnError::Config(format!(
                    "tensor `{}` {:?} does not match expected `{}` {:?}",
                    b.name,
                    b.value.dim(),
                    a.name,
                    a.value.dim()
                )));
            }
        }
        Ok(())
    }
}

/// Graph handles for each parameter tensor, parallel to `EncoderParams::tensors`.
pub struct ParamNodes<'p> {
    params: &'p EncoderParams,
    pub nodes: Vec<NodeId>,
}

impl<'p> ParamNodes<'p> {
    /// Registers every tensor as a leaf; trainable when `train` is set.
    pub fn register(g: &mut Graph, params: &'p EncoderParams, train: bool) -> Self {
        let nodes = params
            .tensors
            .iter()
            .map(|t| {
                if train {
                    g.param(t.value.clone())
                } else {
                    g.constant_shared(t.value.clone())
                }
            })
            .collect();
        ParamNodes { params, nodes }
    }

    fn node(&self, name: &str) -> NodeId {
        self.nodes[self.params.index[name]]
    }
}

fn check_codes(tok: &Token, params: &EncoderParams) -> Result<(), NnError> {
    let (ids, idxs) = (params.id_rows(), params.idx_rows());
    if tok.id_code as usize >= ids || tok.father_code as usize >= ids || tok.idx_code as usize >= idxs {
        return Err(NnError::CodeOutOfBounds {
            id: tok.id_code,
            idx: tok.idx_code,
            father: tok.father_code,
        });
    }
    Ok(())
}

/// Embeds the stacked tokens of `configs`; returns the `T × d_model` node and
/// the per-configuration row segments.
fn embed_tokens(
    g: &mut Graph,
    p: &ParamNodes,
    cfg: &EncoderConfig,
    configs: &[&Configuration],
) -> Result<(NodeId, Vec<Segment>), NnError> {
    let mut ids = Vec::new();
    let mut idxs = Vec::new();
    let mut fathers = Vec::new();
    let mut values = Vec::new();
    let mut segments = Vec::with_capacity(configs.len());
    for c in configs {
        if c.tokens.is_empty() {
            return Err(NnError::EmptyConfiguration);
        }
        let start = ids.len();
        for tok in &c.tokens {
            check_codes(tok, p.params)?;
            ids.push(tok.id_code as usize);
            idxs.push(tok.idx_code as usize);
            fathers.push(tok.father_code as usize);
            values.push(tok.norm_value);
        }
        segments.push(start..ids.len());
    }
    let n = ids.len();
    let vals = g.constant(Array2::from_shape_vec((n, 1), values).expect("one value per token"));
    let value_emb = g.linear(vals, p.node("value_w"), p.node("value_b"))?;
    let x = if cfg.use_structure_embeddings {
        let id_emb = g.gather_rows(p.node("id_table"), ids);
        let idx_emb = g.gather_rows(p.node("idx_table"), idxs);
        let father_emb = g.gather_rows(p.node("id_table"), fathers);
        g.concat_cols(&[id_emb, idx_emb, value_emb, father_emb])?
    } else {
        let zeros = g.constant(Array2::zeros((n, cfg.part_dim)));
        g.concat_cols(&[zeros, zeros, value_emb, zeros])?
    };
    Ok((x, segments))
}

/// Embedding matrix (`d^i × d_model`) of a single configuration.
pub fn embed_config(config: &Configuration, params: &EncoderParams, cfg: &EncoderConfig) -> Result<Array2<f64>, NnError> {
    let mut g = Graph::new();
    let p = ParamNodes::register(&mut g, params, false);
    let (x, _) = embed_tokens(&mut g, &p, cfg, &[config])?;
    Ok(g.value(x).clone())
}

/// Builds the encoder forward pass for `configs`; returns an
/// `N × latent_dim` node.
pub fn encode_graph(
    g: &mut Graph,
    p: &ParamNodes,
    cfg: &EncoderConfig,
    configs: &[&Configuration],
) -> Result<NodeId, NnError> {
    if configs.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    let (mut x, mut segments) = embed_tokens(g, p, cfg, configs)?;
    if cfg.pooling == Pooling::TokenMixer {
        let total = g.value(x).nrows();
        let stacked = g.concat_rows(&[x, p.node("mixer")])?;
        let mut order = Vec::with_capacity(total + segments.len());
        let mut new_segments = Vec::with_capacity(segments.len());
        for seg in &segments {
            let start = order.len();
            order.push(total);
            order.extend(seg.clone());
            new_segments.push(start..order.len());
        }
        x = g.gather_rows(stacked, order);
        segments = new_segments;
    }
    let segments: Arc<[Segment]> = segments.into();
    for b in 0..cfg.n_blocks {
        let n = |s: &str| p.node(&format!("blocks.{b}.{s}"));
        let q = g.linear(x, n("wq"), n("bq"))?;
        let k = g.linear(x, n("wk"), n("bk"))?;
        let v = g.linear(x, n("wv"), n("bv"))?;
        let a = g.attention(q, k, v, cfg.n_heads, segments.clone())?;
        let a = g.linear(a, n("wo"), n("bo"))?;
        let h = g.add(x, a)?;
        let h = g.layer_norm(h, n("ln1_g"), n("ln1_b"));
        let f = g.linear(h, n("ff_w1"), n("ff_b1"))?;
        let f = g.relu(f);
        let f = g.linear(f, n("ff_w2"), n("ff_b2"))?;
        let h2 = g.add(h, f)?;
        x = g.layer_norm(h2, n("ln2_g"), n("ln2_b"));
    }
    let mut z = match cfg.pooling {
        Pooling::Average => g.segment_mean(x, segments),
        Pooling::TokenMixer => g.gather_rows(x, segments.iter().map(|s| s.start).collect()),
    };
    let layers = cfg.mlp_hidden.len();
    for i in 0..layers {
        z = g.linear(z, p.node(&format!("mlp.{i}.w")), p.node(&format!("mlp.{i}.b")))?;
        if i + 1 < layers {
            z = g.relu(z);
        }
    }
    Ok(z)
}

/// Latent vectors of `configs` (forward only).
pub fn encode(configs: &[&Configuration], params: &EncoderParams, cfg: &EncoderConfig) -> Result<Array2<f64>, NnError> {
    let mut g = Graph::new();
    let p = ParamNodes::register(&mut g, params, false);
    let z = encode_graph(&mut g, &p, cfg, configs)?;
    Ok(g.value(z).clone())
}
