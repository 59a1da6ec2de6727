//! Small models and synthetic samples shared by the integration tests.

use adoc_core::datagen::Sample;
use adoc_core::{DomainId, DomainInit, LabelSeq, Model, ModelConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random `[1, H, W]` images for `cfg` with short feasible labels.
pub fn samples(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_len = (cfg.feature_width() / 2).clamp(1, 3);
    (0..n as u64)
        .map(|id| {
            let px = cfg.image_height * cfg.image_width;
            let image = Tensor::new([1, cfg.image_height, cfg.image_width], (0..px).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let len = rng.gen_range(1..=max_len);
            let label = (0..len).map(|_| rng.gen_range(1..=cfg.alphabet_size as u32)).collect();
            Sample {
                image,
                label: LabelSeq::new(label).unwrap(),
                domain: 0,
                id,
                seed: 0,
            }
        })
        .collect()
}

pub fn images(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Tensor> {
    samples(cfg, n, seed).into_iter().map(|s| s.image).collect()
}

/// Tiny model with a source domain and `extra` zero-identity domains.
pub fn tiny_model(extra: usize) -> Model {
    let mut m = Model::new(ModelConfig::tiny()).unwrap();
    m.register_domain("source", DomainInit::Random).unwrap();
    for i in 0..extra {
        m.register_domain(&format!("extra{i}"), DomainInit::ZeroIdentity).unwrap();
    }
    m
}

/// Logits of every image through `domain`, as raw bits.
pub fn logit_bits(m: &Model, images: &[Tensor], domain: DomainId) -> Vec<Vec<u64>> {
    images
        .iter()
        .map(|x| m.log_probs(x, domain).unwrap().data().iter().map(|v| v.to_bits()).collect())
        .collect()
}
