//! Transformer encoder over the feature sequence with per-domain bottleneck
//! adapters and a per-domain classifier head.
//!
//! Layer order (post-norm): `x -> norm1(x + attn(x)) -> adapter_attn ->
//! norm2(. + ff(.)) -> adapter_ff`. Attention and feed-forward weights are
//! shared; both norms, both adapters and the head belong to the domain.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::backbone::NormParams;
use crate::config::ModelConfig;
use crate::domains::DomainId;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// `y = x W + b` with `W` stored as `[in, out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    fn create(store: &mut ParamStore, prefix: &str, weight: Tensor) -> Result<Self> {
        let out = weight.shape()[1];
        Ok(Linear {
            weight: store.insert(format!("{prefix}/weight"), weight)?,
            bias: store.insert(format!("{prefix}/bias"), Tensor::zeros([out]))?,
        })
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_row_bias(y, b)
    }
}

fn normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::new([rows, cols], (0..rows * cols).map(|_| dist.sample(rng)).collect()).expect("sized")
}

/// Shared weights of one encoder layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderLayerParams {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl EncoderLayerParams {
    pub fn ids(&self) -> Vec<ParamId> {
        [self.query, self.key, self.value, self.output, self.ff_in, self.ff_out]
            .iter()
            .flat_map(|l| l.ids())
            .collect()
    }
}

/// `y = x + up(relu(down(x)))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BottleneckAdapter {
    pub domain: DomainId,
    pub down: Linear,
    pub up: Linear,
}

impl BottleneckAdapter {
    pub fn ids(&self) -> [ParamId; 4] {
        [self.down.weight, self.down.bias, self.up.weight, self.up.bias]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassifierHead {
    pub domain: DomainId,
    pub linear: Linear,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderLayerDomainParams {
    pub domain: DomainId,
    pub norm1: NormParams,
    pub norm2: NormParams,
    pub adapter_attn: BottleneckAdapter,
    pub adapter_ff: BottleneckAdapter,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqNetParams {
    pub input: Linear,
    pub layers: Vec<EncoderLayerParams>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqNetDomainParams {
    pub layers: Vec<EncoderLayerDomainParams>,
    pub head: ClassifierHead,
}

impl SeqNetParams {
    pub(crate) fn create(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let (d, c) = (cfg.d_model, cfg.feature_channels());
        let lin_std = (1.0 / d as f64).sqrt();
        let input = Linear::create(store, "seqnet/input", normal(rng, c, d, (1.0 / c as f64).sqrt()))?;
        let mut layers = Vec::new();
        for l in 0..cfg.encoder_layers {
            let p = format!("seqnet/l{l}");
            layers.push(EncoderLayerParams {
                heads: cfg.heads,
                query: Linear::create(store, &format!("{p}/attn/query"), normal(rng, d, d, lin_std))?,
                key: Linear::create(store, &format!("{p}/attn/key"), normal(rng, d, d, lin_std))?,
                value: Linear::create(store, &format!("{p}/attn/value"), normal(rng, d, d, lin_std))?,
                output: Linear::create(store, &format!("{p}/attn/output"), normal(rng, d, d, lin_std))?,
                ff_in: Linear::create(store, &format!("{p}/ff/in"), normal(rng, d, cfg.d_ff, (2.0 / d as f64).sqrt()))?,
                ff_out: Linear::create(store, &format!("{p}/ff/out"), normal(rng, cfg.d_ff, d, (1.0 / cfg.d_ff as f64).sqrt()))?,
            });
        }
        Ok(SeqNetParams { input, layers })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.input.ids().to_vec();
        v.extend(self.layers.iter().flat_map(|l| l.ids()));
        v
    }
}

impl SeqNetDomainParams {
    /// Fresh bank: unit/zero norms, identity adapters (zero up-projection,
    /// down-projection drawn with std 0.01) and a random head.
    pub(crate) fn create(store: &mut ParamStore, cfg: &ModelConfig, domain: DomainId, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.d_model;
        let adapter = |store: &mut ParamStore, rng: &mut _, p: String| -> Result<BottleneckAdapter> {
            Ok(BottleneckAdapter {
                domain,
                down: Linear::create(store, &format!("{p}/down"), normal(rng, d, cfg.bottleneck, 0.01))?,
                up: Linear::create(store, &format!("{p}/up"), Tensor::zeros([cfg.bottleneck, d]))?,
            })
        };
        let mut layers = Vec::new();
        for l in 0..cfg.encoder_layers {
            let p = format!("domain/{domain}/seqnet/l{l}");
            layers.push(EncoderLayerDomainParams {
                domain,
                norm1: NormParams::create(store, &format!("{p}/norm1"), d)?,
                norm2: NormParams::create(store, &format!("{p}/norm2"), d)?,
                adapter_attn: adapter(store, rng, format!("{p}/adapter_attn"))?,
                adapter_ff: adapter(store, rng, format!("{p}/adapter_ff"))?,
            });
        }
        let head = ClassifierHead {
            domain,
            linear: Linear::create(
                store,
                &format!("domain/{domain}/head"),
                normal(rng, d, cfg.classes(), (1.0 / d as f64).sqrt()),
            )?,
        };
        Ok(SeqNetDomainParams { layers, head })
    }

    pub fn adapter_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| l.adapter_attn.ids().into_iter().chain(l.adapter_ff.ids()))
            .collect()
    }

    pub fn norm_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| l.norm1.ids().into_iter().chain(l.norm2.ids()))
            .collect()
    }

    pub fn head_ids(&self) -> Vec<ParamId> {
        self.head.linear.ids().to_vec()
    }
}

/// Fixed sinusoidal encoding: even columns `sin(p / 10000^(i/d))`, odd
/// columns the matching cosine.
pub fn positional_encoding(length: usize, d_model: usize) -> Result<Tensor> {
    if length == 0 || d_model == 0 {
        return Err(Error::Shape("positional encoding needs length and width >= 1".into()));
    }
    let mut data = vec![0.0; length * d_model];
    for p in 0..length {
        for i in 0..d_model {
            let pair = (i / 2 * 2) as f64;
            let angle = p as f64 / 10000f64.powf(pair / d_model as f64);
            data[p * d_model + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new([length, d_model], data)
}

fn check_domain(owner: DomainId, active: DomainId, what: &str) -> Result<()> {
    if owner != active {
        return Err(Error::Routing(format!(
            "{what} belongs to domain {owner}, forward pass is for domain {active}"
        )));
    }
    Ok(())
}

/// Unmasked scaled dot-product self-attention over `[T, d_model]`. Also
/// returns each head's `[T, T]` attention weights.
pub fn multi_head_attention(g: &mut Graph, store: &ParamStore, x: Var, params: &EncoderLayerParams) -> Result<(Var, Vec<Var>)> {
    let &[t, d] = g.shape(x) else {
        return Err(Error::Shape(format!("attention expects [T, d_model], got {:?}", g.shape(x))));
    };
    if t == 0 || params.heads == 0 || d % params.heads != 0 {
        return Err(Error::Shape(format!("cannot split width {d} over {} heads", params.heads)));
    }
    let dk = d / params.heads;
    let q = params.query.forward(g, store, x)?;
    let k = params.key.forward(g, store, x)?;
    let v = params.value.forward(g, store, x)?;
    let mut heads = Vec::with_capacity(params.heads);
    let mut weights = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let qh = g.columns(q, h * dk, dk)?;
        let kh = g.columns(k, h * dk, dk)?;
        let vh = g.columns(v, h * dk, dk)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, 1.0 / (dk as f64).sqrt())?;
        let w = g.softmax_rows(scores)?;
        heads.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    let cat = g.concat_cols(&heads)?;
    Ok((params.output.forward(g, store, cat)?, weights))
}

pub fn bottleneck_adapter_forward(g: &mut Graph, store: &ParamStore, x: Var, adapter: &BottleneckAdapter) -> Result<Var> {
    let (w_down, w_up) = (store.tensor(adapter.down.weight).shape(), store.tensor(adapter.up.weight).shape());
    let width = g.shape(x).last().copied().unwrap_or(0);
    if w_down[0] != width || w_up[1] != width || w_down[1] != w_up[0] {
        return Err(Error::Shape(format!(
            "adapter {w_down:?}/{w_up:?} does not fit width {width}"
        )));
    }
    let h = adapter.down.forward(g, store, x)?;
    let h = g.relu(h)?;
    let h = adapter.up.forward(g, store, h)?;
    g.add(x, h)
}

/// One encoder layer. `use_adapters = false` runs the same layer with both
/// adapters bypassed.
pub fn encoder_layer_forward(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    params: &EncoderLayerParams,
    domain_params: &EncoderLayerDomainParams,
    domain: DomainId,
    use_adapters: bool,
    eps: f64,
) -> Result<Var> {
    let dp = domain_params;
    check_domain(dp.domain, domain, "encoder layer norms")?;
    check_domain(dp.adapter_attn.domain, domain, "attention adapter")?;
    check_domain(dp.adapter_ff.domain, domain, "feed-forward adapter")?;

    let (attn, _) = multi_head_attention(g, store, x, params)?;
    let h = g.add(x, attn)?;
    let (n1g, n1b) = (g.param(store, dp.norm1.gain), g.param(store, dp.norm1.bias));
    let mut h = g.layer_norm(h, n1g, n1b, eps)?;
    if use_adapters {
        h = bottleneck_adapter_forward(g, store, h, &dp.adapter_attn)?;
    }

    let f = params.ff_in.forward(g, store, h)?;
    let f = g.relu(f)?;
    let f = params.ff_out.forward(g, store, f)?;
    let h2 = g.add(h, f)?;
    let (n2g, n2b) = (g.param(store, dp.norm2.gain), g.param(store, dp.norm2.bias));
    let mut out = g.layer_norm(h2, n2g, n2b, eps)?;
    if use_adapters {
        out = bottleneck_adapter_forward(g, store, out, &dp.adapter_ff)?;
    }
    Ok(out)
}

/// Maps a `[W', C']` feature sequence to `[W', classes]` log-probabilities.
#[allow(clippy::too_many_arguments)]
pub fn sequence_logits(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    shared: &SeqNetParams,
    domain_params: &SeqNetDomainParams,
    features: Var,
    domain: DomainId,
    use_adapters: bool,
) -> Result<Var> {
    check_domain(domain_params.head.domain, domain, "classifier head")?;
    let &[t, c] = g.shape(features) else {
        return Err(Error::Shape(format!("features must be [W', C'], got {:?}", g.shape(features))));
    };
    if c != cfg.feature_channels() {
        return Err(Error::Shape(format!("expected {} feature channels, got {c}", cfg.feature_channels())));
    }
    let x = shared.input.forward(g, store, features)?;
    let pe = g.constant(positional_encoding(t, cfg.d_model)?);
    let mut x = g.add(x, pe)?;
    for (layer, dp) in shared.layers.iter().zip(&domain_params.layers) {
        x = encoder_layer_forward(g, store, x, layer, dp, domain, use_adapters, cfg.norm_eps)?;
    }
    let logits = domain_params.head.linear.forward(g, store, x)?;
    g.log_softmax_rows(logits)
}
