#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unipact_core::ecg::{prepare, EcgSignal, EncoderConfig, N_LEADS};
use unipact_core::model::{DecoderConfig, FusionModel, ModelConfig};
use unipact_core::tokenizer::{build_vocab, Vocab};
use unipact_tensor::Tensor;

pub fn random_signal(len: usize, seed: u64) -> EcgSignal {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..len * N_LEADS).map(|_| rng.gen_range(-1.0..1.0)).collect();
    EcgSignal::new(Tensor::new(vec![len, N_LEADS], data).unwrap(), 100.0).unwrap()
}

pub fn patches(seed: u64) -> Tensor {
    prepare(&random_signal(1000, seed), &EncoderConfig::default()).unwrap()
}

pub fn small_vocab() -> Vocab {
    build_vocab(
        [
            "You are a cardiology assistant. The vital parameters: heartrate 88.0, temperature 36.1.",
            "Will the patient die? Will the patient be admitted? Answer strictly with Yes or No.",
        ],
        1000,
    )
    .unwrap()
}

/// A narrow model that keeps tests fast.
pub fn tiny_model(vocab: &Vocab, seed: u64) -> FusionModel {
    let config = ModelConfig {
        encoder: EncoderConfig { d_ecg: 32, n_heads: 2, n_layers: 1, ..EncoderConfig::default() },
        decoder: DecoderConfig { vocab_size: vocab.len(), d_llm: 48, n_layers: 2, n_heads: 2, ffn_mult: 2, max_len: 256 },
        proj_hidden: 0,
        seed,
    };
    FusionModel::new(config, vocab.fingerprint()).unwrap()
}

/// Fills every adapter B matrix with small random values so adapters
/// actually contribute.
pub fn perturb_adapters(model: &mut FusionModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.store.iter().filter(|(_, n, _)| n.ends_with(".lora_b")).map(|(id, _, _)| id).collect();
    for id in ids {
        model.store.get_mut(id).data.iter_mut().for_each(|v| *v = rng.gen_range(-0.05..0.05));
    }
}
