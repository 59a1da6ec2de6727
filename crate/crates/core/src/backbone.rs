//! Convolutional feature extractor: residual modules whose blocks carry a
//! per-domain 1x1 residual adapter and per-domain normalization.
//!
//! A block computes `relu(shortcut(x) + A(F(x)))` where
//! `F = norm2 . conv2 . relu . norm1 . conv1` uses the shared kernels,
//! `A(z) = z + alpha * z` is the domain's pointwise adapter, and the shortcut
//! is the identity or, when the block changes stride or width, a shared 1x1
//! projection followed by a per-domain norm.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;
use crate::domains::DomainId;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormParams {
    pub(crate) fn create(store: &mut ParamStore, prefix: &str, width: usize) -> Result<Self> {
        Ok(NormParams {
            gain: store.insert(format!("{prefix}/gain"), Tensor::full([width], 1.0))?,
            bias: store.insert(format!("{prefix}/bias"), Tensor::zeros([width]))?,
        })
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.gain, self.bias]
    }
}

/// Shared (domain-agnostic) weights of one residual block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResidualBlockParams {
    pub c_in: usize,
    pub c_out: usize,
    pub stride: (usize, usize),
    pub conv1_weight: ParamId,
    pub conv1_bias: ParamId,
    pub conv2_weight: ParamId,
    pub conv2_bias: ParamId,
    pub projection: Option<ParamId>,
}

impl ResidualBlockParams {
    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.conv1_weight, self.conv1_bias, self.conv2_weight, self.conv2_bias];
        v.extend(self.projection);
        v
    }
}

/// The `alpha` filter bank of one block, owned by a single domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResidualAdapter {
    pub domain: DomainId,
    pub alpha: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockDomainParams {
    pub domain: DomainId,
    pub norm1: NormParams,
    pub norm2: NormParams,
    pub projection_norm: Option<NormParams>,
    pub adapter: ResidualAdapter,
}

impl BlockDomainParams {
    pub fn norm_ids(&self) -> Vec<ParamId> {
        let mut v = self.norm1.ids().to_vec();
        v.extend(self.norm2.ids());
        v.extend(self.projection_norm.iter().flat_map(|n| n.ids()));
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneParams {
    pub blocks: Vec<ResidualBlockParams>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneDomainParams {
    pub blocks: Vec<BlockDomainParams>,
}

impl BackboneDomainParams {
    pub fn adapter_ids(&self) -> Vec<ParamId> {
        self.blocks.iter().map(|b| b.adapter.alpha).collect()
    }

    pub fn norm_ids(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(|b| b.norm_ids()).collect()
    }
}

/// `(module, block, c_in, c_out, stride)` for every block in order.
fn block_layout(cfg: &ModelConfig) -> Vec<(usize, usize, usize, usize, (usize, usize))> {
    let mut out = Vec::new();
    let mut c_in = 1;
    for (m, &c_out) in cfg.channels.iter().enumerate() {
        for b in 0..cfg.blocks_per_module {
            let stride = if b == 0 {
                (cfg.vertical_strides[m], cfg.horizontal_strides[m])
            } else {
                (1, 1)
            };
            out.push((m, b, c_in, c_out, stride));
            c_in = c_out;
        }
    }
    out
}

fn he_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("sized")
}

impl BackboneParams {
    pub(crate) fn create(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut blocks = Vec::new();
        for (m, b, c_in, c_out, stride) in block_layout(cfg) {
            let p = format!("backbone/m{m}/b{b}");
            let needs_projection = c_in != c_out || stride != (1, 1);
            blocks.push(ResidualBlockParams {
                c_in,
                c_out,
                stride,
                conv1_weight: store.insert(format!("{p}/conv1/weight"), he_normal(rng, &[c_out, c_in, 3, 3], c_in * 9))?,
                conv1_bias: store.insert(format!("{p}/conv1/bias"), Tensor::zeros([c_out]))?,
                conv2_weight: store.insert(format!("{p}/conv2/weight"), he_normal(rng, &[c_out, c_out, 3, 3], c_out * 9))?,
                conv2_bias: store.insert(format!("{p}/conv2/bias"), Tensor::zeros([c_out]))?,
                projection: if needs_projection {
                    Some(store.insert(format!("{p}/projection/weight"), he_normal(rng, &[c_out, c_in, 1, 1], c_in))?)
                } else {
                    None
                },
            });
        }
        Ok(BackboneParams { blocks })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(|b| b.ids()).collect()
    }
}

impl BackboneDomainParams {
    /// Fresh bank: unit/zero norms and all-zero adapters.
    pub(crate) fn create(store: &mut ParamStore, cfg: &ModelConfig, domain: DomainId) -> Result<Self> {
        let mut blocks = Vec::new();
        for (m, b, c_in, c_out, stride) in block_layout(cfg) {
            let p = format!("domain/{domain}/backbone/m{m}/b{b}");
            let needs_projection = c_in != c_out || stride != (1, 1);
            blocks.push(BlockDomainParams {
                domain,
                norm1: NormParams::create(store, &format!("{p}/norm1"), c_out)?,
                norm2: NormParams::create(store, &format!("{p}/norm2"), c_out)?,
                projection_norm: if needs_projection {
                    Some(NormParams::create(store, &format!("{p}/projection_norm"), c_out)?)
                } else {
                    None
                },
                adapter: ResidualAdapter {
                    domain,
                    alpha: store.insert(format!("{p}/adapter/alpha"), Tensor::zeros([c_out, c_out, 1, 1]))?,
                },
            });
        }
        Ok(BackboneDomainParams { blocks })
    }
}

fn check_domain(owner: DomainId, active: DomainId, what: &str) -> Result<()> {
    if owner != active {
        return Err(Error::Routing(format!(
            "{what} belongs to domain {owner}, forward pass is for domain {active}"
        )));
    }
    Ok(())
}

/// `z + alpha * z` with a pointwise `alpha`.
pub fn residual_adapter_forward(g: &mut Graph, store: &ParamStore, z: Var, adapter: &ResidualAdapter) -> Result<Var> {
    let alpha = g.param(store, adapter.alpha);
    let delta = g.conv2d(z, alpha, (1, 1), (0, 0))?;
    g.add(z, delta)
}

/// One residual block for `domain`. With `adapter = None` the block runs
/// without its adapter, which is the plain residual block.
pub fn residual_block_forward(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    block: &ResidualBlockParams,
    domain_params: &BlockDomainParams,
    adapter: Option<&ResidualAdapter>,
    domain: DomainId,
    eps: f64,
) -> Result<Var> {
    check_domain(domain_params.domain, domain, "block normalization")?;
    if let Some(a) = adapter {
        check_domain(a.domain, domain, "residual adapter")?;
    }
    match g.shape(x) {
        &[c, _, _] if c == block.c_in => {}
        s => {
            return Err(Error::Shape(format!(
                "block expects {} input channels, got {s:?}",
                block.c_in
            )))
        }
    }

    let dp = domain_params;
    let w1 = g.param(store, block.conv1_weight);
    let b1 = g.param(store, block.conv1_bias);
    let h = g.conv2d(x, w1, block.stride, (1, 1))?;
    let h = g.add_channel_bias(h, b1)?;
    let (n1g, n1b) = (g.param(store, dp.norm1.gain), g.param(store, dp.norm1.bias));
    let h = g.channel_norm(h, n1g, n1b, eps)?;
    let h = g.relu(h)?;
    let w2 = g.param(store, block.conv2_weight);
    let b2 = g.param(store, block.conv2_bias);
    let h = g.conv2d(h, w2, (1, 1), (1, 1))?;
    let h = g.add_channel_bias(h, b2)?;
    let (n2g, n2b) = (g.param(store, dp.norm2.gain), g.param(store, dp.norm2.bias));
    let residual = g.channel_norm(h, n2g, n2b, eps)?;

    let residual = match adapter {
        Some(a) => residual_adapter_forward(g, store, residual, a)?,
        None => residual,
    };

    let shortcut = match (block.projection, &dp.projection_norm) {
        (Some(pw), Some(pn)) => {
            let w = g.param(store, pw);
            let s = g.conv2d(x, w, block.stride, (0, 0))?;
            let (ng, nb) = (g.param(store, pn.gain), g.param(store, pn.bias));
            g.channel_norm(s, ng, nb, eps)?
        }
        (None, None) => x,
        _ => return Err(Error::Contract("projection and projection norm must come together".into())),
    };
    let sum = g.add(shortcut, residual)?;
    g.relu(sum)
}

/// Runs the whole extractor on a `[1, H, W]` image and returns the `[W', C']`
/// feature sequence.
#[allow(clippy::too_many_arguments)]
pub fn extract_features(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    shared: &BackboneParams,
    domain_params: &BackboneDomainParams,
    image: Var,
    domain: DomainId,
    use_adapters: bool,
) -> Result<Var> {
    let expected = [1, cfg.image_height, cfg.image_width];
    if g.shape(image) != expected {
        return Err(Error::Shape(format!(
            "expected image {expected:?}, got {:?}",
            g.shape(image)
        )));
    }
    if shared.blocks.len() != domain_params.blocks.len() {
        return Err(Error::Contract("domain bank does not match backbone layout".into()));
    }
    let mut x = image;
    for (block, dp) in shared.blocks.iter().zip(&domain_params.blocks) {
        let adapter = use_adapters.then_some(&dp.adapter);
        x = residual_block_forward(g, store, x, block, dp, adapter, domain, cfg.norm_eps)?;
    }
    g.collapse_height(x)
}
