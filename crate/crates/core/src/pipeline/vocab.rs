use std::collections::HashMap;

use crate::model::{BOS, EOS, NUM_RESERVED, PAD, UNK};

const RESERVED: [&str; NUM_RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Whitespace-word vocabulary. Ids below [`NUM_RESERVED`] are reserved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    pub fn reserved_only() -> Self {
        Vocab {
            words: RESERVED.iter().map(|w| w.to_string()).collect(),
            ids: HashMap::new(),
        }
    }

    /// Total ids including the reserved ones.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() == NUM_RESERVED
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }
}

/// Words in first-occurrence order, keeping at most `vocab_size` ids in
/// total.
pub fn build_vocab<S: AsRef<str>>(lines: &[S], vocab_size: usize) -> Vocab {
    let mut vocab = Vocab::reserved_only();
    'outer: for line in lines {
        for word in line.as_ref().split_whitespace() {
            if vocab.words.len() >= vocab_size {
                break 'outer;
            }
            if !vocab.ids.contains_key(word) {
                vocab.ids.insert(word.to_string(), vocab.words.len() as u32);
                vocab.words.push(word.to_string());
            }
        }
    }
    vocab
}

/// Maps words to ids (unknown words to `unk`), keeping at most
/// `max_positions - 1` of them.
pub fn tokenize(line: &str, vocab: &Vocab, max_positions: usize) -> Vec<u32> {
    line.split_whitespace()
        .take(max_positions.saturating_sub(1))
        .map(|w| vocab.id(w).unwrap_or(UNK))
        .collect()
}

pub fn detokenize(ids: &[u32], vocab: &Vocab) -> String {
    let mut out = String::new();
    for &id in ids {
        let word = match id {
            PAD | BOS | EOS => continue,
            UNK => "<unk>",
            _ => vocab.word(id).unwrap_or("<unk>"),
        };
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}
