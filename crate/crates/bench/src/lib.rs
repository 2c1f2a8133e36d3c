//! Shared fixtures for the benchmarks.

use scoresing::numerics::RngState;
use scoresing::score::{generate_corpus, CorpusConfig, Song};

/// A handful of default-config songs, fixed seed.
pub fn songs(n: usize) -> Vec<Song> {
    let cfg = CorpusConfig {
        songs: n,
        test_songs: 0,
        ..Default::default()
    };
    generate_corpus(&cfg, &RngState::new(7)).expect("corpus")
}
