//! Label spaces: 12 action units, 8 expression classes, and the fixed
//! class-to-AU activation table used by the synthetic generator.

/// Number of action units detected (AU1..AU26 subset below).
pub const AU_COUNT: usize = 12;

/// Number of expression classes, including `Other`.
pub const EXPR_COUNT: usize = 8;

pub const AU_NAMES: [&str; AU_COUNT] = [
    "AU1", "AU2", "AU4", "AU6", "AU7", "AU10", "AU12", "AU15", "AU23", "AU24", "AU25", "AU26",
];

pub const EXPR_NAMES: [&str; EXPR_COUNT] = [
    "Neutral",
    "Anger",
    "Disgust",
    "Fear",
    "Happiness",
    "Sadness",
    "Surprise",
    "Other",
];

/// Default minority expression classes: Anger, Disgust, Fear, Sadness, Surprise.
pub const DEFAULT_MINORITY_CLASSES: [u8; 5] = [1, 2, 3, 5, 6];

/// Which AUs a synthetic frame of each expression class activates. The table
/// is an artifact constant chosen so every AU has positive support and no two
/// classes share an activation pattern; it loosely follows common FACS
/// descriptions (e.g. Happiness -> AU6 + AU12, Sadness -> AU1 + AU4 + AU15).
pub const CLASS_AU_TABLE: [[u8; AU_COUNT]; EXPR_COUNT] = [
    // AU:         1  2  4  6  7 10 12 15 23 24 25 26
    /* Neutral  */ [0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
    /* Anger    */ [0, 0, 1, 0, 1, 0, 0, 0, 1, 1, 0, 0],
    /* Disgust  */ [0, 0, 1, 0, 0, 1, 0, 1, 0, 0, 0, 0],
    /* Fear     */ [1, 1, 1, 0, 1, 0, 0, 0, 0, 0, 0, 1],
    /* Happiness*/ [0, 0, 0, 1, 0, 0, 1, 0, 0, 0, 0, 0],
    /* Sadness  */ [1, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0],
    /* Surprise */ [1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1],
    /* Other    */ [0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 1, 0],
];

/// AU activation pattern for an expression class (classes beyond the table
/// cycle through it, for synthetic schemes with fewer than 8 classes this is
/// simply a row lookup).
pub fn au_pattern_for_class(class: usize) -> [u8; AU_COUNT] {
    CLASS_AU_TABLE[class % EXPR_COUNT]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_au_has_positive_support() {
        for j in 0..AU_COUNT {
            assert!(
                CLASS_AU_TABLE.iter().any(|row| row[j] == 1),
                "{} never activates",
                AU_NAMES[j]
            );
        }
    }

    #[test]
    fn activation_patterns_are_distinct() {
        for a in 0..EXPR_COUNT {
            for b in (a + 1)..EXPR_COUNT {
                assert_ne!(
                    CLASS_AU_TABLE[a], CLASS_AU_TABLE[b],
                    "{} and {} share a pattern",
                    EXPR_NAMES[a], EXPR_NAMES[b]
                );
            }
        }
    }
}
