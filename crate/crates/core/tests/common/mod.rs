#![allow(dead_code)]

pub mod grad_cases;
pub mod loss_oracles;
pub mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xis2::numerics::{Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// `sum(c * y)` for a fixed random `c`, so every output element carries a
/// distinct weight into the scalar being differentiated.
pub fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> xis2::Result<Var> {
    let shape = tape.shape(y).to_vec();
    let c = rand_tensor(&shape, &mut rng(seed ^ 0x5eed));
    let c = tape.constant(c);
    let p = tape.mul(y, c)?;
    Ok(tape.sum(p))
}

/// Generator and discriminators small enough for many training steps in a test.
pub fn tiny_train_config() -> xis2::trainer::TrainConfig {
    use xis2::discriminator::DiscriminatorConfig;
    use xis2::generator::GeneratorConfig;
    xis2::trainer::TrainConfig {
        warmup_steps: 10,
        checkpoint_every: 0,
        generator: GeneratorConfig {
            d_phoneme: 8,
            d_duration: 8,
            d_pitch: 8,
            d_model: 16,
            heads: 2,
            ffn_dim: 32,
            encoder_blocks: 1,
            decoder_blocks: 1,
            duration_channels: 8,
            ..GeneratorConfig::default()
        },
        discriminator: DiscriminatorConfig {
            sd_layers: 2,
            sd_channels: 4,
            dd_channels: 2,
            ..DiscriminatorConfig::default()
        },
        ..Default::default()
    }
}

/// Short synthetic utterances (tens of frames).
pub fn short_corpus(items: usize, seed: u64) -> Vec<xis2::dataio::CorpusItem> {
    let cfg = xis2::dataio::SynthConfig {
        syllables: (2, 4),
        phoneme_frames: (3, 8),
        ..Default::default()
    };
    cfg.generate(items, seed, &xis2::frontend::G2PTable::builtin()).unwrap()
}
