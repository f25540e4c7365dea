//! Feed-forward encoder mapping raw feature vectors to the shared embedding
//! space the prototypes live in.
//!
//! The architecture is a plain multi-layer perceptron: each hidden layer is
//! a linear map plus bias followed by a rectifier, and the output layer is
//! linear. An empty `hidden_dims` therefore gives a single linear layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamGroup, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::seeding::{derive_seed, rng_from};

/// Which encoder parameters receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableScope {
    /// Every layer trains.
    All,
    /// Only the final layer trains; earlier layers stay frozen at their
    /// initialization.
    LastLayer,
}

/// Encoder architecture and initialization recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    /// Hidden layer widths, in order. Empty means a single linear layer.
    pub hidden_dims: Vec<usize>,
    /// Embedding dimension shared with the prototype banks.
    pub output_dim: usize,
    pub seed: u64,
    pub trainable: TrainableScope,
}

impl EncoderConfig {
    /// Config with the stock defaults: no hidden layers, 256-dimensional
    /// embeddings, everything trainable.
    pub fn new(input_dim: usize) -> Self {
        EncoderConfig {
            input_dim,
            hidden_dims: Vec::new(),
            output_dim: 256,
            seed: 42,
            trainable: TrainableScope::All,
        }
    }
}

struct Layer {
    weight: ParamId,
    bias: ParamId,
}

/// An encoder wired into a [`ParamStore`].
pub struct Encoder {
    config: EncoderConfig,
    layers: Vec<Layer>,
}

impl Encoder {
    /// Register freshly initialized parameters in `store`. Weights draw
    /// uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` under a seed
    /// derived from `config.seed`; biases start at zero.
    pub fn init(config: EncoderConfig, store: &mut ParamStore) -> Result<Self> {
        if config.input_dim == 0 {
            return Err(Error::Config("encoder input_dim must be at least 1".into()));
        }
        if config.output_dim == 0 {
            return Err(Error::Config("encoder output_dim must be at least 1".into()));
        }
        if let Some(pos) = config.hidden_dims.iter().position(|&d| d == 0) {
            return Err(Error::Config(format!(
                "encoder hidden layer {pos} has zero width"
            )));
        }

        let mut dims = vec![config.input_dim];
        dims.extend_from_slice(&config.hidden_dims);
        dims.push(config.output_dim);

        let num_layers = dims.len() - 1;
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut rng = rng_from(derive_seed(config.seed, "encoder-init", l as u64));
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            let trainable = match config.trainable {
                TrainableScope::All => true,
                TrainableScope::LastLayer => l == num_layers - 1,
            };
            let weight = store.add(
                format!("encoder/w{l}"),
                ParamGroup::Encoder,
                Tensor::matrix(fan_in, fan_out, data)?,
                trainable,
            );
            let bias = store.add(
                format!("encoder/b{l}"),
                ParamGroup::Encoder,
                Tensor::vector(vec![0.0; fan_out]),
                trainable,
            );
            layers.push(Layer { weight, bias });
        }
        Ok(Encoder { config, layers })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    /// Parameter handles in layer order: (weight, bias) per layer.
    pub fn param_ids(&self) -> Vec<(ParamId, ParamId)> {
        self.layers.iter().map(|l| (l.weight, l.bias)).collect()
    }

    /// Push the forward computation for a batch onto `graph`. `x` must be
    /// an `n x input_dim` matrix node; the result is `n x output_dim`.
    pub fn encode(&self, graph: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let xv = graph.value(x);
        if !xv.is_matrix() || xv.cols() != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                context: "encoder input".into(),
                left: xv.shape().to_vec(),
                right: vec![xv.shape().first().copied().unwrap_or(0), self.config.input_dim],
            });
        }
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            let w = graph.param(store, layer.weight);
            let b = graph.param(store, layer.bias);
            h = graph.matmul(h, w)?;
            h = graph.add_bias(h, b)?;
            if l + 1 < self.layers.len() {
                h = graph.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Forward pass outside any caller-owned graph, for inference.
    pub fn encode_tensor(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut graph = Graph::new();
        let input = graph.constant(x.clone());
        let out = self.encode(&mut graph, store, input)?;
        Ok(graph.value(out).clone())
    }
}
