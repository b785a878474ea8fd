//! Closed caption vocabulary with fixed token ids.

/// Token 0 pads captions to the model's caption length.
pub const PAD: u8 = 0;

pub const WORDS: [&str; 18] = [
    "<pad>", "red", "green", "blue", "yellow", "magenta", "cyan", "orange", "white", "circle",
    "square", "triangle", "left", "right", "up", "down", "still", "and",
];

pub const SIZE: usize = WORDS.len();

pub fn id(word: &str) -> Option<u8> {
    WORDS.iter().position(|w| *w == word).map(|i| i as u8)
}

pub fn word(id: u8) -> Option<&'static str> {
    WORDS.get(id as usize).copied()
}

/// Tokenizes whitespace-separated caption text. Unknown words are an error.
pub fn tokenize(text: &str) -> Result<Vec<u8>, String> {
    text.split_whitespace()
        .map(|w| {
            let lw = w.to_ascii_lowercase();
            id(&lw).ok_or_else(|| format!("unknown caption word {w:?}"))
        })
        .collect()
}

pub fn detokenize(tokens: &[u8]) -> String {
    tokens
        .iter()
        .filter(|&&t| t != PAD)
        .map(|&t| word(t).unwrap_or("?"))
        .collect::<Vec<_>>()
        .join(" ")
}
