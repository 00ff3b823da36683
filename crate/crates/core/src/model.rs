//! The full network: token embedding, replication into `N` neuron slices
//! with per-neuron identity offsets, `L` layers of selective-SSM memory plus
//! neuron attention, mean over neurons, and a vocabulary head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{neuron_attention, AttentionMap, AttentionParams, CommunicationMode};
use crate::param::Param;
use crate::ssm::{dt_rank, mamba_block, MambaBlockParams};
use crate::tensor::counter::{self, MacCounts};
use crate::tensor::{no_grad, Element, NamedTensor, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn default_heads() -> usize {
    4
}
fn default_expand() -> usize {
    2
}
fn default_k_conv() -> usize {
    4
}
fn yes() -> bool {
    true
}

/// Architecture hyperparameters. Serialized as the `model` section of a
/// config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnConfig {
    pub n_neurons: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub d_state: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    pub vocab_size: usize,
    #[serde(default)]
    pub comm_mode: CommunicationMode,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_expand")]
    pub expand: usize,
    #[serde(default = "default_k_conv")]
    pub k_conv: usize,
    /// Learned per-neuron offsets added at replication. Without them all
    /// neurons stay identical.
    #[serde(default = "yes")]
    pub neuron_embeddings: bool,
}

impl InnConfig {
    /// 32 neurons, 6 layers, width 256, state 16.
    pub fn large(vocab_size: usize) -> Self {
        InnConfig {
            n_neurons: 32,
            n_layers: 6,
            d_model: 256,
            d_state: 16,
            n_heads: 4,
            vocab_size,
            comm_mode: CommunicationMode::Learned,
            dropout: 0.0,
            seed: 0,
            expand: 2,
            k_conv: 4,
            neuron_embeddings: true,
        }
    }

    /// 8 neurons, 4 layers, width 64, state 8.
    pub fn desk(vocab_size: usize) -> Self {
        InnConfig {
            n_neurons: 8,
            n_layers: 4,
            d_model: 64,
            d_state: 8,
            ..Self::large(vocab_size)
        }
    }

    /// The same depth and widths as a plain stack of Mamba blocks: one
    /// neuron, no communication, no neuron offsets.
    pub fn mamba_stack(&self) -> Self {
        InnConfig {
            n_neurons: 1,
            comm_mode: CommunicationMode::None,
            neuron_embeddings: false,
            ..self.clone()
        }
    }

    pub fn is_mamba_stack(&self) -> bool {
        self.n_neurons == 1 && self.comm_mode == CommunicationMode::None && !self.neuron_embeddings
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_neurons", self.n_neurons),
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("d_state", self.d_state),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("expand", self.expand),
            ("k_conv", self.k_conv),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Closed-form trainable parameter count; see the README for the
    /// derivation.
    pub fn param_count(&self) -> usize {
        let (d, di, n, k, r, v) = (
            self.d_model,
            self.d_inner(),
            self.d_state,
            self.k_conv,
            dt_rank(self.d_model),
            self.vocab_size,
        );
        let mamba = d * 2 * di + di * k + di + di * (r + 2 * n) + r * di + di + di * n + di + di * d;
        let attn = match self.comm_mode {
            CommunicationMode::Learned => 4 * d * d + 2 * d,
            CommunicationMode::Static => 2 * d * d + 2 * d,
            CommunicationMode::None => 0,
        };
        let embed = v * d + if self.neuron_embeddings { self.n_neurons * d } else { 0 };
        embed + self.n_layers * (mamba + attn) + d * v + v
    }
}

#[derive(Clone, Debug)]
pub struct InnLayer<T: Element = f32> {
    pub mamba: MambaBlockParams<T>,
    /// Absent when communication is off.
    pub attn: Option<AttentionParams<T>>,
    pub norm_gamma: Option<Tensor<T>>,
    pub norm_beta: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct InnModel<T: Element = f32> {
    pub config: InnConfig,
    /// `[V, d_model]`.
    pub token_embedding: Tensor<T>,
    /// `[N, d_model]`; absent in the Mamba-stack configuration.
    pub neuron_embeddings: Option<Tensor<T>>,
    pub layers: Vec<InnLayer<T>>,
    /// `[d_model, V]`.
    pub head_w: Tensor<T>,
    /// `[V]`.
    pub head_b: Tensor<T>,
}

/// Per-call forward settings.
#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Training mode: dropout draws from this generator.
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
    /// Keep a detached copy of the neuron states after every layer.
    pub capture_states: bool,
}

impl ForwardOptions<'_> {
    pub fn eval() -> Self {
        Self::default()
    }
}

impl<'a> ForwardOptions<'a> {
    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        ForwardOptions {
            dropout_rng: Some(rng),
            capture_states: false,
        }
    }
}

pub struct ForwardOutput<T: Element = f32> {
    /// `[b, l, V]`.
    pub logits: Tensor<T>,
    /// One routing map per layer.
    pub maps: Vec<AttentionMap>,
    /// `[b, N, l, d_model]` after each layer, when captured.
    pub states: Vec<Tensor<T>>,
}

/// `H[:, i, :, :] = X + E[i]`: `x` is `[b, l, d]`, `e` is `[N, d]`.
pub fn replicate<T: Element>(x: &Tensor<T>, e: Option<&Tensor<T>>, n: usize) -> Result<Tensor<T>> {
    let [b, l, d] = match *x.shape() {
        [b, l, d] => [b, l, d],
        _ => return Err(Error::Contract(format!("replicate needs [b, l, d], got {:?}", x.shape()))),
    };
    let x = x.unsqueeze(1)?;
    match e {
        Some(e) => {
            if e.shape() != [n, d] {
                return Err(Error::shape("replicate", x.shape(), e.shape()));
            }
            x.add(&e.reshape(&[1, n, 1, d])?)
        }
        None => x.broadcast_to(&[b, n, l, d]),
    }
}

impl<T: Element> InnModel<T> {
    pub fn new(config: InnConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, v) = (config.d_model, config.vocab_size);
        let token_embedding = Tensor::randn(&[v, d], 1.0 / (d as f64).sqrt(), &mut rng).into_param();
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mamba = MambaBlockParams::init(d, config.d_state, config.expand, config.k_conv, &mut rng);
            let communicates = config.comm_mode != CommunicationMode::None;
            let attn = communicates
                .then(|| AttentionParams::init(d, config.n_heads, config.comm_mode, &mut rng))
                .transpose()?;
            layers.push(InnLayer {
                mamba,
                attn,
                norm_gamma: communicates.then(|| Tensor::ones(&[d]).into_param()),
                norm_beta: communicates.then(|| Tensor::zeros(&[d]).into_param()),
            });
        }
        let head_w = Tensor::randn(&[d, v], 0.02, &mut rng).into_param();
        let head_b = Tensor::zeros(&[v]).into_param();
        // drawn last so that N does not shift the other parameters' streams
        let neuron_embeddings = config
            .neuron_embeddings
            .then(|| Tensor::randn(&[config.n_neurons, d], 0.02, &mut rng).into_param());
        Ok(InnModel {
            config,
            token_embedding,
            neuron_embeddings,
            layers,
            head_w,
            head_b,
        })
    }

    /// All trainable tensors in a fixed order.
    pub fn params(&self) -> Vec<Param<T>> {
        let mut out = vec![Param::new("token_embedding", &self.token_embedding, false)];
        if let Some(e) = &self.neuron_embeddings {
            out.push(Param::new("neuron_embeddings", e, false));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            layer.mamba.params(&format!("layers.{i}.mamba"), &mut out);
            if let Some(a) = &layer.attn {
                a.params(&format!("layers.{i}.attn"), &mut out);
            }
            if let (Some(g), Some(b)) = (&layer.norm_gamma, &layer.norm_beta) {
                out.push(Param::new(format!("layers.{i}.norm.gamma"), g, false));
                out.push(Param::new(format!("layers.{i}.norm.beta"), b, false));
            }
        }
        out.push(Param::new("head.w", &self.head_w, true));
        out.push(Param::new("head.b", &self.head_b, false));
        out
    }

    /// Exact number of trainable scalars.
    pub fn count_params(&self) -> usize {
        self.params().iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn named_tensors(&self) -> Vec<NamedTensor> {
        self.params()
            .iter()
            .map(|p| NamedTensor::from_tensor(format!("param.{}", p.name), &p.tensor))
            .collect()
    }

    /// Overwrites parameters from archive entries named `param.<name>`.
    /// Every parameter must be present with a matching shape.
    pub fn load_named(&self, tensors: &[NamedTensor]) -> Result<()> {
        for p in self.params() {
            let key = format!("param.{}", p.name);
            let t = tensors
                .iter()
                .find(|t| t.name == key)
                .ok_or_else(|| Error::Format(format!("missing tensor {key}")))?;
            if t.shape != p.tensor.shape() {
                return Err(Error::Format(format!(
                    "{key}: archive shape {:?}, model shape {:?}",
                    t.shape,
                    p.tensor.shape()
                )));
            }
            p.tensor
                .update_data(|d| d.iter_mut().zip(&t.data).for_each(|(a, &b)| *a = T::of(b as f64)));
        }
        Ok(())
    }

    /// Copies every parameter that `other` has under the same name and shape.
    /// Returns how many were copied.
    pub fn copy_matching<U: Element>(&self, other: &InnModel<U>) -> usize {
        let theirs = other.params();
        let mut copied = 0;
        for p in self.params() {
            if let Some(q) = theirs.iter().find(|q| q.name == p.name && q.tensor.shape() == p.tensor.shape()) {
                let src = q.tensor.to_f64_vec();
                p.tensor.update_data(|d| d.iter_mut().zip(&src).for_each(|(a, &b)| *a = T::of(b)));
                copied += 1;
            }
        }
        copied
    }

    fn check_tokens(&self, ids: &[usize], batch: usize, len: usize) -> Result<()> {
        if batch == 0 || len == 0 || ids.len() != batch * len {
            return Err(Error::Input(format!(
                "{} token ids do not form a [{batch}, {len}] batch",
                ids.len()
            )));
        }
        let v = self.config.vocab_size;
        if let Some(pos) = ids.iter().position(|&t| t >= v) {
            return Err(Error::Input(format!(
                "token id {} at batch row {}, position {} is outside the vocabulary of {v}",
                ids[pos],
                pos / len,
                pos % len
            )));
        }
        Ok(())
    }

    /// `ids` is a row-major `[batch, len]` grid. Returns logits `[batch, len, V]`.
    pub fn forward(&self, ids: &[usize], batch: usize, len: usize, opts: ForwardOptions<'_>) -> Result<ForwardOutput<T>> {
        self.check_tokens(ids, batch, len)?;
        let cfg = &self.config;
        let (n, d) = (cfg.n_neurons, cfg.d_model);
        let ForwardOptions {
            mut dropout_rng,
            capture_states,
        } = opts;
        let mut drop = |t: Tensor<T>| -> Result<Tensor<T>> {
            match dropout_rng.as_deref_mut() {
                Some(rng) if cfg.dropout > 0.0 => t.dropout(cfg.dropout, rng),
                _ => Ok(t),
            }
        };

        let x = self
            .token_embedding
            .gather_rows(ids)?
            .scale((d as f64).sqrt())
            .reshape(&[batch, len, d])?;
        let mut h = replicate(&x, self.neuron_embeddings.as_ref(), n)?;
        let mut maps = Vec::with_capacity(self.layers.len());
        let mut states = Vec::new();
        for layer in &self.layers {
            let flat = h.reshape(&[batch * n, len, d])?;
            let mem = mamba_block(&flat, &layer.mamba)?.reshape(&[batch, n, len, d])?;
            h = h.add(&drop(mem)?)?;
            match (&layer.attn, &layer.norm_gamma, &layer.norm_beta) {
                (Some(attn), Some(g), Some(b)) => {
                    let (msg, map) = neuron_attention(&h, attn, cfg.comm_mode)?;
                    let msg = msg.layer_norm(g, b, LAYER_NORM_EPS)?;
                    h = h.add(&drop(msg)?)?;
                    maps.push(map);
                }
                _ => maps.push(AttentionMap::identity(n)),
            }
            if capture_states {
                states.push(h.detach());
            }
        }
        let pooled = h.mean_axis(1, false)?;
        let logits = pooled.matmul(&self.head_w)?.add(&self.head_b)?;
        Ok(ForwardOutput { logits, maps, states })
    }

    /// Evaluation-mode logits.
    pub fn logits(&self, ids: &[usize], batch: usize, len: usize) -> Result<Tensor<T>> {
        Ok(self.forward(ids, batch, len, ForwardOptions::eval())?.logits)
    }

    /// The Mamba-stack baseline is this model under
    /// [`InnConfig::mamba_stack`]; any other configuration is rejected.
    pub fn mamba_stack_forward(&self, ids: &[usize], batch: usize, len: usize) -> Result<Tensor<T>> {
        if !self.config.is_mamba_stack() {
            return Err(Error::Config(
                "mamba_stack_forward needs n_neurons = 1, comm_mode = none, neuron_embeddings = false".into(),
            ));
        }
        self.logits(ids, batch, len)
    }
}

/// Multiply-accumulate counts for one forward pass at a given size.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComplexityRow {
    pub seq_len: usize,
    pub n_neurons: usize,
    pub macs: u64,
    pub dense_macs: u64,
    /// `Q Kᵀ` products per layer: `N² · l · d` for batch 1.
    pub attention_macs_per_layer: u64,
    pub mix_macs: u64,
}

/// Counts MACs of a batch-1 eval forward for every `(l, N)` pair.
pub fn complexity_probe(base: &InnConfig, l_values: &[usize], n_values: &[usize]) -> Result<Vec<ComplexityRow>> {
    let mut rows = Vec::new();
    for &n in n_values {
        let cfg = InnConfig {
            n_neurons: n,
            ..base.clone()
        };
        let model = InnModel::<f32>::new(cfg)?;
        for &l in l_values {
            let ids: Vec<usize> = (0..l).map(|i| i % base.vocab_size).collect();
            let _g = no_grad();
            counter::reset();
            model.logits(&ids, 1, l)?;
            let MacCounts { dense, scores, mix } = counter::snapshot();
            rows.push(ComplexityRow {
                seq_len: l,
                n_neurons: n,
                macs: dense + scores + mix,
                dense_macs: dense,
                attention_macs_per_layer: scores / base.n_layers as u64,
                mix_macs: mix,
            });
        }
    }
    Ok(rows)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_exponent(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let k = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / k, ly.iter().sum::<f64>() / k);
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}
