use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{self, BackboneParams};
use crate::config::ModelConfig;
use crate::ctc::{self, LabelSeq};
use crate::domains::{DomainId, DomainRegistry, TrainMode};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::seqnet::{self, SeqNetParams};
use crate::tensor::Tensor;

/// The full recognizer: shared weights, every domain bank and the values of
/// all of them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: BackboneParams,
    pub seqnet: SeqNetParams,
    pub registry: DomainRegistry,
    pub(crate) mode: Option<TrainMode>,
}

impl Model {
    /// Builds the shared weights. No domain is registered yet.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let backbone = BackboneParams::create(&mut store, &config, &mut rng)?;
        let seqnet = SeqNetParams::create(&mut store, &config, &mut rng)?;
        Ok(Model {
            config,
            store,
            backbone,
            seqnet,
            registry: DomainRegistry::default(),
            mode: None,
        })
    }

    /// Extracts the `[W', C']` feature sequence for `domain`.
    pub fn features(&self, g: &mut Graph, image: Var, domain: DomainId, use_adapters: bool) -> Result<Var> {
        let bank = self.registry.get(domain)?;
        backbone::extract_features(g, &self.store, &self.config, &self.backbone, &bank.backbone, image, domain, use_adapters)
    }

    /// Records the forward pass on `g` and returns `[W', classes]`
    /// log-probabilities.
    pub fn forward(&self, g: &mut Graph, image: Var, domain: DomainId, use_adapters: bool) -> Result<Var> {
        let bank = self.registry.get(domain)?;
        let features = self.features(g, image, domain, use_adapters)?;
        seqnet::sequence_logits(g, &self.store, &self.config, &self.seqnet, &bank.seqnet, features, domain, use_adapters)
    }

    pub fn log_probs(&self, image: &Tensor, domain: DomainId) -> Result<Tensor> {
        self.eval_forward(image, domain, true)
    }

    /// Log-probabilities with every adapter bypassed: the backbone alone,
    /// routed through the domain's norms and head.
    pub fn backbone_only_log_probs(&self, image: &Tensor, domain: DomainId) -> Result<Tensor> {
        self.eval_forward(image, domain, false)
    }

    fn eval_forward(&self, image: &Tensor, domain: DomainId, use_adapters: bool) -> Result<Tensor> {
        let mut g = Graph::inference();
        let x = g.constant(image.clone());
        let y = self.forward(&mut g, x, domain, use_adapters)?;
        Ok(g.value(y).clone())
    }

    pub fn decode(&self, image: &Tensor, domain: DomainId) -> Result<LabelSeq> {
        ctc::greedy_decode(&self.log_probs(image, domain)?)
    }

    /// Forward, CTC loss and backward for one sample; adds `scale` times the
    /// parameter gradients into the store. Returns the unscaled loss.
    pub fn accumulate_sample_grad(&mut self, image: &Tensor, label: &[u32], domain: DomainId, scale: f64) -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let lp = self.forward(&mut g, x, domain, true)?;
        let loss = g.ctc_loss(lp, label)?;
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss {value}")));
        }
        if g.requires_grad(loss) {
            g.backward(loss)?;
            g.accumulate_param_grads(&mut self.store, scale)?;
        }
        Ok(value)
    }

    /// Scalar parameter count over the whole store.
    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }
}
