use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random stream `tag` derived from `seed`.
pub fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}
