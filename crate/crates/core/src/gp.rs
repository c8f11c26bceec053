//! Deep-kernel Gaussian process: Matérn-5/2 over learned latents, trained
//! jointly with the encoder on the marginal likelihood.

use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::nn::container::ParamContainer;
use crate::nn::graph::{matern52, NOISE_FLOOR};
use crate::nn::{encode_graph, step_decay_lr, Adam, EncoderConfig, EncoderParams, Graph, GraphError, NnError, NodeId, ParamNodes};
use crate::space::Configuration;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("kernel matrix is not positive definite after maximum jitter")]
    NotPositiveDefinite,
    #[error("at least {needed} observations required, got {got}")]
    TooFewObservations { needed: usize, got: usize },
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Nn(NnError),
}

impl From<NnError> for GpError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::Graph(GraphError::NotPositiveDefinite) => GpError::NotPositiveDefinite,
            other => GpError::Nn(other),
        }
    }
}

impl From<GraphError> for GpError {
    fn from(e: GraphError) -> Self {
        NnError::from(e).into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub log_lengthscale: f64,
    pub log_outputscale: f64,
    /// `σ² = exp(2·log_noise)`, floored at `1e-8`.
    pub log_noise: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        KernelParams {
            log_lengthscale: 0.0,
            log_outputscale: 0.0,
            log_noise: 0.1f64.ln(),
        }
    }
}

impl KernelParams {
    pub fn noise_variance(&self) -> f64 {
        (2.0 * self.log_noise).exp().max(NOISE_FLOOR)
    }

    pub fn outputscale(&self) -> f64 {
        (2.0 * self.log_outputscale).exp()
    }

    pub fn is_finite(&self) -> bool {
        self.log_lengthscale.is_finite() && self.log_outputscale.is_finite() && self.log_noise.is_finite()
    }

    pub fn eval(&self, a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
        matern52(a, b, self.log_lengthscale, self.log_outputscale)
    }
}

/// How configurations are projected before the kernel.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureMap {
    /// Trainable attention encoder.
    Attention { cfg: EncoderConfig, params: EncoderParams },
    /// Frozen linear map of the normalized token values, zero-padded to
    /// `weights.nrows()`.
    Linear { weights: Array2<f64> },
}

impl FeatureMap {
    /// Identity map on configurations of at most `width` tokens.
    pub fn identity(width: usize) -> Self {
        FeatureMap::Linear {
            weights: Array2::eye(width),
        }
    }

    fn trainable(&self) -> usize {
        match self {
            FeatureMap::Attention { params, .. } => params.n_values(),
            FeatureMap::Linear { .. } => 0,
        }
    }

    fn padded_values(width: usize, configs: &[&Configuration]) -> Result<Array2<f64>, GpError> {
        let mut x = Array2::zeros((configs.len(), width));
        for (r, c) in configs.iter().enumerate() {
            if c.tokens.len() > width {
                return Err(GpError::Input(format!(
                    "configuration has {} tokens, linear map accepts {width}",
                    c.tokens.len()
                )));
            }
            for (j, t) in c.tokens.iter().enumerate() {
                x[[r, j]] = t.norm_value;
            }
        }
        Ok(x)
    }
}

/// Graph leaves of a model's trainable parameters, in flat order.
struct ModelNodes<'m> {
    encoder: Option<ParamNodes<'m>>,
    log_ls: NodeId,
    log_os: NodeId,
    log_noise: NodeId,
}

fn scalar(v: f64) -> Arc<Array2<f64>> {
    Arc::new(Array2::from_elem((1, 1), v))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepKernelGp {
    pub map: FeatureMap,
    pub kernel: KernelParams,
}

impl DeepKernelGp {
    pub fn new(map: FeatureMap) -> Self {
        DeepKernelGp {
            map,
            kernel: KernelParams::default(),
        }
    }

    /// Number of trainable scalars: encoder weights then the three kernel values.
    pub fn n_params(&self) -> usize {
        self.map.trainable() + 3
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = match &self.map {
            FeatureMap::Attention { params, .. } => params.flat(),
            FeatureMap::Linear { .. } => Vec::new(),
        };
        out.extend([self.kernel.log_lengthscale, self.kernel.log_outputscale, self.kernel.log_noise]);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params());
        let off = match &mut self.map {
            FeatureMap::Attention { params, .. } => params.set_flat(flat),
            FeatureMap::Linear { .. } => 0,
        };
        self.kernel = KernelParams {
            log_lengthscale: flat[off],
            log_outputscale: flat[off + 1],
            log_noise: flat[off + 2],
        };
    }

    fn register<'m>(&'m self, g: &mut Graph, train: bool) -> ModelNodes<'m> {
        let encoder = match &self.map {
            FeatureMap::Attention { params, .. } => Some(ParamNodes::register(g, params, train)),
            FeatureMap::Linear { .. } => None,
        };
        let mut leaf = |v: f64| if train { g.param(scalar(v)) } else { g.constant_shared(scalar(v)) };
        let log_ls = leaf(self.kernel.log_lengthscale);
        let log_os = leaf(self.kernel.log_outputscale);
        let log_noise = leaf(self.kernel.log_noise);
        ModelNodes {
            encoder,
            log_ls,
            log_os,
            log_noise,
        }
    }

    fn latents_graph(&self, g: &mut Graph, nodes: &ModelNodes, configs: &[&Configuration]) -> Result<NodeId, GpError> {
        match &self.map {
            FeatureMap::Attention { cfg, .. } => {
                Ok(encode_graph(g, nodes.encoder.as_ref().expect("encoder registered"), cfg, configs)?)
            }
            FeatureMap::Linear { weights } => {
                let x = g.constant(FeatureMap::padded_values(weights.nrows(), configs)?);
                let w = g.constant(weights.clone());
                Ok(g.matmul(x, w)?)
            }
        }
    }

    /// Latent vectors (`N × latent`) of `configs`.
    pub fn latents(&self, configs: &[&Configuration]) -> Result<Array2<f64>, GpError> {
        if configs.is_empty() {
            return Err(NnError::EmptyBatch.into());
        }
        let mut g = Graph::new();
        let nodes = self.register(&mut g, false);
        let z = self.latents_graph(&mut g, &nodes, configs)?;
        Ok(g.value(z).clone())
    }

    /// Gram matrix `K_deep + σ²I` over `configs`.
    pub fn covariance(&self, configs: &[&Configuration]) -> Result<Array2<f64>, GpError> {
        let z = self.latents(configs)?;
        let mut k = gram(&z, &self.kernel);
        k.diag_mut().mapv_inplace(|d| d + self.kernel.noise_variance());
        Ok(k)
    }

    /// Sum over tasks of the Gaussian negative log marginal likelihood of
    /// `y` (already standardized), with the gradient in flat order.
    pub fn batch_nll_and_grad(&self, tasks: &[(&[&Configuration], &Array1<f64>)]) -> Result<(f64, Vec<f64>), GpError> {
        let mut g = Graph::new();
        let nodes = self.register(&mut g, true);
        let mut total: Option<NodeId> = None;
        for (configs, y) in tasks {
            if configs.len() != y.len() {
                return Err(GpError::Input(format!("{} configurations but {} targets", configs.len(), y.len())));
            }
            let z = self.latents_graph(&mut g, &nodes, configs)?;
            let k = g.matern_gram(z, nodes.log_ls, nodes.log_os);
            let k = g.add_noise(k, nodes.log_noise);
            let nll = g.gaussian_nll(k, y)?;
            total = Some(match total {
                Some(t) => g.add(t, nll)?,
                None => nll,
            });
        }
        let total = total.ok_or_else(|| GpError::Input("no tasks".into()))?;
        let grads = g.backward(total);
        let mut flat = Vec::with_capacity(self.n_params());
        let mut push = |id: NodeId, n: usize| match grads.get(id) {
            Some(gr) => flat.extend(gr.iter().copied()),
            None => flat.extend(std::iter::repeat_n(0.0, n)),
        };
        if let (Some(enc), FeatureMap::Attention { params, .. }) = (&nodes.encoder, &self.map) {
            for (id, t) in enc.nodes.iter().zip(params.tensors()) {
                push(*id, t.value.len());
            }
        }
        push(nodes.log_ls, 1);
        push(nodes.log_os, 1);
        push(nodes.log_noise, 1);
        Ok((g.scalar(total), flat))
    }

    pub fn nll_and_grad(&self, configs: &[&Configuration], y: &Array1<f64>) -> Result<(f64, Vec<f64>), GpError> {
        self.batch_nll_and_grad(&[(configs, y)])
    }

    pub fn nll(&self, configs: &[&Configuration], y: &Array1<f64>) -> Result<f64, GpError> {
        let k = self.covariance(configs)?;
        let (l, _) = linalg::cholesky_jittered(k.view()).ok_or(GpError::NotPositiveDefinite)?;
        let alpha = linalg::cho_solve(l.view(), y.view());
        let n = y.len() as f64;
        Ok(0.5 * (y.dot(&alpha) + linalg::cho_logdet(l.view()) + n * (2.0 * std::f64::consts::PI).ln()))
    }

    /// Weights container holding the encoder (if any) and kernel values.
    pub fn to_container(&self) -> ParamContainer {
        let mut c = match &self.map {
            FeatureMap::Attention { cfg, params } => ParamContainer::new(Some((cfg, params))),
            FeatureMap::Linear { weights } => {
                let mut c = ParamContainer::new(None);
                c.push("linear.w", weights);
                c
            }
        };
        c.meta.insert(
            "kernel".into(),
            serde_json::to_value(self.kernel).expect("kernel params serialize"),
        );
        c
    }

    /// Rebuilds an attention model from a container, validating it against `cfg`.
    pub fn from_container(c: &ParamContainer, cfg: &EncoderConfig) -> Result<Self, GpError> {
        let params = c.encoder_params(cfg)?;
        let kernel = match c.meta.get("kernel") {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| GpError::Input(format!("kernel parameters: {e}")))?,
            None => KernelParams::default(),
        };
        if !kernel.is_finite() {
            return Err(GpError::Input("non-finite kernel parameters".into()));
        }
        Ok(DeepKernelGp {
            map: FeatureMap::Attention { cfg: cfg.clone(), params },
            kernel,
        })
    }
}

/// Matérn-5/2 Gram matrix of the rows of `z` (no noise).
pub fn gram(z: &Array2<f64>, kernel: &KernelParams) -> Array2<f64> {
    let n = z.nrows();
    let mut k = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let v = kernel.eval(z.row(i), z.row(j));
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }
    k
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub epochs: usize,
    pub lr: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            epochs: 100,
            lr: 1e-3,
            decay_every: 30,
            decay_factor: 0.5,
        }
    }
}

/// Zero-mean, unit-variance standardization constants. A constant series
/// keeps `std = 1`.
pub fn standardize(ys: &[f64]) -> (f64, f64, Array1<f64>) {
    let n = ys.len().max(1) as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
    let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    (mean, std, ys.iter().map(|y| (y - mean) / std).collect())
}

/// Minimizes the summed NLL of `tasks` by full-batch Adam. Returns the
/// best-seen parameters (applied to `model`) and the per-epoch loss history,
/// whose last entry is the loss at the returned iterate's successor.
pub fn train(model: &mut DeepKernelGp, tasks: &[(&[&Configuration], &Array1<f64>)], opts: &FitOptions) -> Result<Vec<f64>, GpError> {
    let mut opt = Adam::new(model.n_params());
    train_with(model, tasks, opts, &mut opt)
}

/// [`train`] continuing the moment estimates of `opt`.
pub fn train_with(
    model: &mut DeepKernelGp,
    tasks: &[(&[&Configuration], &Array1<f64>)],
    opts: &FitOptions,
    opt: &mut Adam,
) -> Result<Vec<f64>, GpError> {
    let mut params = model.flat();
    let mut history = Vec::with_capacity(opts.epochs + 1);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for epoch in 0..=opts.epochs {
        let mut probe = model.clone();
        probe.set_flat(&params);
        let (loss, grad) = match probe.batch_nll_and_grad(tasks) {
            Ok(r) => r,
            // a diverged later iterate ends training at the best one seen
            Err(GpError::NotPositiveDefinite) if best.is_some() => break,
            Err(e) => return Err(e),
        };
        history.push(loss);
        if loss.is_finite() && best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, params.clone()));
        }
        if epoch == opts.epochs || !grad.iter().all(|g| g.is_finite()) {
            break;
        }
        let lr = step_decay_lr(opts.lr, epoch, opts.decay_every, opts.decay_factor);
        opt.step(&mut params, &grad, lr);
    }
    let (_, best_params) = best.ok_or(GpError::NotPositiveDefinite)?;
    model.set_flat(&best_params);
    Ok(history)
}

/// A fitted model with its cached posterior quantities.
#[derive(Debug, Clone)]
pub struct FitState {
    pub model: DeepKernelGp,
    pub y_mean: f64,
    pub y_std: f64,
    /// Standardized targets.
    pub y: Array1<f64>,
    pub train_z: Array2<f64>,
    /// Cholesky factor of `K_deep + σ²I (+ jitter)` over the training latents.
    pub chol: Array2<f64>,
    pub alpha: Array1<f64>,
    pub jitter: f64,
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorPrediction {
    /// Standardized units.
    pub mean: f64,
    pub variance: f64,
}

impl FitState {
    /// Caches the posterior of `model` on the given data without training.
    pub fn condition(model: DeepKernelGp, configs: &[&Configuration], ys: &[f64]) -> Result<Self, GpError> {
        if configs.len() != ys.len() {
            return Err(GpError::Input(format!("{} configurations but {} targets", configs.len(), ys.len())));
        }
        if configs.is_empty() {
            return Err(GpError::TooFewObservations { needed: 1, got: 0 });
        }
        let (y_mean, y_std, y) = standardize(ys);
        let train_z = model.latents(configs)?;
        let mut k = gram(&train_z, &model.kernel);
        k.diag_mut().mapv_inplace(|d| d + model.kernel.noise_variance());
        let (chol, jitter) = linalg::cholesky_jittered(k.view()).ok_or(GpError::NotPositiveDefinite)?;
        let alpha = linalg::cho_solve(chol.view(), y.view());
        Ok(FitState {
            model,
            y_mean,
            y_std,
            y,
            train_z,
            chol,
            alpha,
            jitter,
            history: Vec::new(),
        })
    }

    pub fn best_y_std(&self) -> f64 {
        self.y.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn to_std(&self, raw: f64) -> f64 {
        (raw - self.y_mean) / self.y_std
    }

    pub fn to_raw(&self, standardized: f64) -> f64 {
        standardized * self.y_std + self.y_mean
    }

    /// Posterior of the latent function at each query.
    pub fn predict_many(&self, queries: &[&Configuration]) -> Result<Vec<PosteriorPrediction>, GpError> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let z = self.model.latents(queries)?;
        Ok(self.predict_latents(&z))
    }

    pub fn predict_latents(&self, z: &Array2<f64>) -> Vec<PosteriorPrediction> {
        let prior = self.model.kernel.outputscale();
        z.axis_iter(Axis(0))
            .map(|q| {
                let ks: Array1<f64> = self.train_z.axis_iter(Axis(0)).map(|t| self.model.kernel.eval(q, t)).collect();
                let mean = ks.dot(&self.alpha);
                let v = linalg::solve_lower(self.chol.view(), ks.view());
                PosteriorPrediction {
                    mean,
                    variance: (prior - v.dot(&v)).max(0.0),
                }
            })
            .collect()
    }

    pub fn predict(&self, query: &Configuration) -> Result<PosteriorPrediction, GpError> {
        Ok(self.predict_many(&[query])?[0])
    }

    /// Container with the model weights plus standardization constants.
    pub fn to_container(&self) -> ParamContainer {
        let mut c = self.model.to_container();
        c.meta.insert("y_mean".into(), self.y_mean.into());
        c.meta.insert("y_std".into(), self.y_std.into());
        c
    }
}

/// Trains `model` on `(configs, ys)` and caches the posterior.
pub fn fit(model: DeepKernelGp, configs: &[&Configuration], ys: &[f64], opts: &FitOptions) -> Result<FitState, GpError> {
    let mut adam = Adam::new(model.n_params());
    fit_with(model, configs, ys, opts, &mut adam)
}

/// [`fit`] continuing the optimizer state `adam`.
pub fn fit_with(
    mut model: DeepKernelGp,
    configs: &[&Configuration],
    ys: &[f64],
    opts: &FitOptions,
    adam: &mut Adam,
) -> Result<FitState, GpError> {
    if configs.len() < 2 {
        return Err(GpError::TooFewObservations {
            needed: 2,
            got: configs.len(),
        });
    }
    if configs.len() != ys.len() {
        return Err(GpError::Input(format!("{} configurations but {} targets", configs.len(), ys.len())));
    }
    if ys.iter().any(|y| !y.is_finite()) {
        return Err(GpError::Input("non-finite objective value".into()));
    }
    let (_, _, y) = standardize(ys);
    let history = train_with(&mut model, &[(configs, &y)], opts, adam)?;
    let mut state = FitState::condition(model, configs, ys)?;
    state.history = history;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Pooling;
    use crate::space::{fixtures, SearchSpace};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            n_blocks: 1,
            n_heads: 2,
            d_model: 16,
            d_inner: 8,
            part_dim: 4,
            mlp_hidden: vec![8, 4],
            latent_dim: 4,
            pooling: Pooling::Average,
            use_structure_embeddings: true,
        }
    }

    fn attn_model(space: &SearchSpace, seed: u64) -> DeepKernelGp {
        let cfg = tiny_cfg();
        let params = EncoderParams::init(&cfg, space.n_identities(), space.max_index as usize, seed).unwrap();
        DeepKernelGp::new(FeatureMap::Attention { cfg, params })
    }

    fn sample_set(space: &SearchSpace, n: usize, seed: u64) -> Vec<Configuration> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| space.sample_with(1 + i % space.subspaces.len(), &mut rng).unwrap())
            .collect()
    }

    #[test]
    fn matern_closed_form() {
        let k = KernelParams {
            log_lengthscale: 0.0,
            log_outputscale: 0.0,
            log_noise: 0.0,
        };
        let a = ndarray::array![0.0, 0.0];
        let b = ndarray::array![0.6, 0.8];
        let s5 = 5f64.sqrt();
        let expected = (1.0 + s5 + 5.0 / 3.0) * (-s5).exp();
        assert!((k.eval(a.view(), b.view()) - expected).abs() < 1e-15);
        assert!((expected - 0.52399).abs() < 1e-5);
        let k2 = KernelParams {
            log_outputscale: 0.7,
            ..k
        };
        assert_eq!(k2.eval(a.view(), a.view()), (1.4f64).exp());
        let far = ndarray::array![100.0, 0.0];
        assert!(k2.eval(a.view(), far.view()) < 1e-40 * (1.4f64).exp());
    }

    #[test]
    fn noise_floor() {
        let k = KernelParams {
            log_noise: -40.0,
            ..Default::default()
        };
        assert_eq!(k.noise_variance(), 1e-8);
        assert!((KernelParams::default().noise_variance() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn nll_matches_graph_and_reacts_to_noise() {
        let space = SearchSpace::parse(fixtures::JENATTON).unwrap();
        let configs = sample_set(&space, 8, 3);
        let refs: Vec<&Configuration> = configs.iter().collect();
        let (_, _, y) = standardize(&(0..8).map(|i| (i as f64 * 0.7).sin()).collect::<Vec<_>>());
        let mut m = attn_model(&space, 1);
        let (a, _) = m.nll_and_grad(&refs, &y).unwrap();
        let b = m.nll(&refs, &y).unwrap();
        assert!((a - b).abs() < 1e-10);
        m.kernel.log_noise += 0.5 * 2f64.ln();
        assert!((m.nll(&refs, &y).unwrap() - b).abs() > 1e-6);
    }

    #[test]
    fn gram_is_symmetric() {
        let space = SearchSpace::parse(fixtures::NAS).unwrap();
        let m = attn_model(&space, 2);
        let configs = sample_set(&space, 12, 9);
        let refs: Vec<&Configuration> = configs.iter().collect();
        let z = m.latents(&refs).unwrap();
        let k = gram(&z, &m.kernel);
        let asym = (&k - &k.t()).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(asym <= 1e-10);
    }

    #[test]
    fn fit_best_seen_and_deterministic() {
        let space = SearchSpace::parse(fixtures::JENATTON).unwrap();
        let configs = sample_set(&space, 8, 5);
        let refs: Vec<&Configuration> = configs.iter().collect();
        let ys: Vec<f64> = (0..8).map(|i| 0.1 * i as f64 + (i as f64).cos()).collect();
        let opts = FitOptions::default();
        let a = fit(attn_model(&space, 4), &refs, &ys, &opts).unwrap();
        let b = fit(attn_model(&space, 4), &refs, &ys, &opts).unwrap();
        assert_eq!(a.history.len(), 101);
        let best = a.history.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(best <= a.history[0]);
        let (_, _, y) = standardize(&ys);
        assert!((a.model.nll(&refs, &y).unwrap() - best).abs() < 1e-9);
        assert_eq!(a.model, b.model);
        assert_eq!(a.chol, b.chol);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn fitted_posterior_beats_prior_on_held_out() {
        let space = SearchSpace::parse("x:\n  type: float\n  range: [0...1]\ny:\n  type: float\n  range: [0...1]\n").unwrap();
        let f = |c: &Configuration| {
            let (a, b) = (c.raw["x"].as_f64().unwrap(), c.raw["y"].as_f64().unwrap());
            (3.0 * a).sin() + b * b
        };
        let train = sample_set(&space, 30, 1);
        let test = sample_set(&space, 50, 2);
        let refs: Vec<&Configuration> = train.iter().collect();
        let ys: Vec<f64> = train.iter().map(f).collect();
        let state = fit(attn_model(&space, 0), &refs, &ys, &FitOptions::default()).unwrap();
        let trefs: Vec<&Configuration> = test.iter().collect();
        let preds = state.predict_many(&trefs).unwrap();
        let (mut post, mut prior) = (0.0, 0.0);
        for (c, p) in test.iter().zip(&preds) {
            post += (state.to_raw(p.mean) - f(c)).powi(2);
            prior += (state.y_mean - f(c)).powi(2);
        }
        assert!(post < prior, "posterior {post} vs prior {prior}");
    }

    #[test]
    fn interpolates_training_points() {
        let space = SearchSpace::parse(fixtures::JENATTON).unwrap();
        let configs = sample_set(&space, 6, 8);
        let refs: Vec<&Configuration> = configs.iter().collect();
        let ys = [0.3, 1.2, 0.5, 0.9, 1.7, 0.2];
        let mut m = DeepKernelGp::new(FeatureMap::identity(4));
        m.kernel.log_noise = -20.0;
        let state = FitState::condition(m, &refs, &ys).unwrap();
        for (c, y) in configs.iter().zip(ys) {
            let p = state.predict(c).unwrap();
            assert!((p.mean - state.to_std(y)).abs() < 1e-3);
            assert!(p.variance < 1e-3 * state.model.kernel.outputscale());
            assert!((state.to_raw(p.mean) - y).abs() < 1e-2 * state.y_std);
        }
    }

    #[test]
    fn variance_clamped_and_bounded() {
        let space = SearchSpace::parse(fixtures::CASH).unwrap();
        let configs = sample_set(&space, 10, 1);
        let refs: Vec<&Configuration> = configs.iter().collect();
        let ys: Vec<f64> = (0..10).map(|i| (i * i) as f64).collect();
        let state = fit(attn_model(&space, 3), &refs, &ys, &FitOptions { epochs: 5, ..Default::default() }).unwrap();
        let queries = sample_set(&space, 1000, 77);
        let qrefs: Vec<&Configuration> = queries.iter().collect();
        let s2 = state.model.kernel.outputscale();
        for p in state.predict_many(&qrefs).unwrap() {
            assert!(p.variance >= 0.0 && p.variance <= s2 + 1e-12);
        }
    }

    #[test]
    fn container_round_trip() {
        let space = SearchSpace::parse(fixtures::SVM).unwrap();
        let mut m = attn_model(&space, 6);
        m.kernel.log_lengthscale = 0.123456789012345;
        let c = ParamContainer::from_json(&m.to_container().to_json()).unwrap();
        let FeatureMap::Attention { cfg, .. } = &m.map else { unreachable!() };
        let back = DeepKernelGp::from_container(&c, cfg).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn too_few_points() {
        let space = SearchSpace::parse(fixtures::SVM).unwrap();
        let c = space.sample(1, 0).unwrap();
        assert!(matches!(
            fit(attn_model(&space, 0), &[&c], &[1.0], &FitOptions::default()),
            Err(GpError::TooFewObservations { .. })
        ));
    }
}
