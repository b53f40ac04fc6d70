#![no_main]
use libfuzzer_sys::fuzz_target;

use lava_core::tasks::Series;
use rand::SeedableRng;

fuzz_target!(|data: &[u8]| {
    if let Ok(series) = Series::from_reader(data, "t", &["x", "y"]) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let _ = series.sample_window(2, 1, &mut rng);
    }
});
