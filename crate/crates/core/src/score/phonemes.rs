//! Fixed phoneme inventory.

/// Silence.
pub const SP: &str = "SP";
/// Aspirate (breath).
pub const AP: &str = "AP";

pub const CONSONANTS: &[&str] = &[
    "b", "p", "m", "f", "d", "t", "n", "l", "g", "k", "h", "j", "q", "x", "zh", "ch", "sh", "r",
    "z", "c", "s", "y", "w",
];

pub const VOWELS: &[&str] = &[
    "a", "o", "e", "i", "u", "v", "ai", "ei", "ao", "ou", "an", "en", "ang", "eng", "ong", "er",
    "ia", "ie", "iu", "ua", "uo", "ui",
];

/// Number of phoneme ids: the two specials, then consonants, then vowels.
pub fn vocab_size() -> usize {
    2 + CONSONANTS.len() + VOWELS.len()
}

pub fn id_of(symbol: &str) -> Option<usize> {
    match symbol {
        SP => Some(0),
        AP => Some(1),
        _ => CONSONANTS
            .iter()
            .position(|&c| c == symbol)
            .map(|i| 2 + i)
            .or_else(|| {
                VOWELS
                    .iter()
                    .position(|&v| v == symbol)
                    .map(|i| 2 + CONSONANTS.len() + i)
            }),
    }
}

pub fn symbol_of(id: usize) -> Option<&'static str> {
    match id {
        0 => Some(SP),
        1 => Some(AP),
        i if i < 2 + CONSONANTS.len() => Some(CONSONANTS[i - 2]),
        i => VOWELS.get(i - 2 - CONSONANTS.len()).copied(),
    }
}

pub fn is_consonant(symbol: &str) -> bool {
    CONSONANTS.contains(&symbol)
}

pub fn is_silence(symbol: &str) -> bool {
    symbol == SP || symbol == AP
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_round_trip() {
        for id in 0..vocab_size() {
            assert_eq!(id_of(symbol_of(id).unwrap()), Some(id));
        }
        assert_eq!(symbol_of(vocab_size()), None);
        assert_eq!(id_of("xx"), None);
    }
}
