//! Closed word-level vocabulary. The lexicon is fixed at compile time so
//! checkpoints, fingerprints, and synthetic corpora stay deterministic
//! without a separate vocabulary file.

use std::collections::HashMap;
use std::sync::OnceLock;

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const NL: &str = "<nl>";
pub const SEP: &str = "<sep>";
pub const CLUE: &str = "<clue>";
pub const ANS: &str = "<ans>";

const SPECIALS: [&str; 7] = [UNK, BOS, EOS, NL, SEP, CLUE, ANS];
const PUNCT: [&str; 2] = [".", "?"];

/// Canonical entity names used by the synthetic indirection tasks.
pub const CANONICALS: [&str; 30] = [
    "veldrin", "okaris", "thamiel", "burandi", "cessily", "dravenor", "ellowyn", "fenwick",
    "galdora", "herivale", "ilmarin", "jorvask", "kelvaris", "lomandra", "morvath", "nerisca",
    "opheldra", "pirandel", "quorath", "rivelun", "sorvane", "tellurin", "umbrosa", "varkell",
    "wendrith", "xalvora", "yorveth", "zephrin", "aldemar", "brivanne",
];

/// Alias forms paired index-wise with `CANONICALS`.
pub const ALIASES: [&str; 30] = [
    "ashlord", "brightkeeper", "cloudwarden", "dusksinger", "emberwright", "frostcaller",
    "glademaster", "hollowseer", "ironquill", "jadewarden", "keenwatcher", "lightbinder",
    "mistwalker", "nightherald", "oakspeaker", "palecourier", "quillbearer", "runekeeper",
    "stormscribe", "tidecaller", "umbralwatch", "veilbreaker", "windcourier", "yewwarden",
    "zephyrlord", "duneherald", "fablekeeper", "gristmarshal", "hearthwarden", "inkbinder",
];

/// Fact words planted next to canonical names in gold chunks.
pub const FACTS: [&str; 24] = [
    "amber", "basalt", "cedar", "copper", "coral", "crimson", "ebony", "fern", "garnet", "hazel",
    "indigo", "ivory", "jade", "lilac", "marble", "obsidian", "olive", "onyx", "pearl", "quartz",
    "russet", "saffron", "topaz", "umber",
];

const FILLERS: [&str; 72] = [
    "the", "a", "of", "in", "and", "to", "is", "was", "for", "on", "with", "that", "report",
    "describes", "story", "city", "river", "mountain", "old", "new", "people", "found", "near",
    "ancient", "large", "small", "known", "called", "region", "village", "temple", "market",
    "road", "stone", "water", "light", "dark", "early", "late", "during", "after", "before",
    "many", "few", "first", "last", "great", "quiet", "hidden", "records", "archive", "mentions",
    "notes", "page", "chapter", "section", "document", "scroll", "letter", "journal", "entry",
    "visited", "traveled", "built", "discovered", "studied", "observed", "keeper", "tale",
    "what", "who", "about",
];

pub struct Vocab {
    words: Vec<String>,
    map: HashMap<String, usize>,
}

impl Vocab {
    /// The process-wide builtin lexicon.
    pub fn builtin() -> &'static Vocab {
        static VOCAB: OnceLock<Vocab> = OnceLock::new();
        VOCAB.get_or_init(|| {
            let mut words: Vec<String> = Vec::new();
            for w in SPECIALS.iter().chain(&PUNCT) {
                words.push(w.to_string());
            }
            for w in CANONICALS.iter().chain(&ALIASES).chain(&FACTS).chain(&FILLERS) {
                words.push(w.to_string());
            }
            let map = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
            Vocab { words, map }
        })
    }

    pub fn size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> usize {
        *self.map.get(word).unwrap_or(&0)
    }

    pub fn try_id(&self, word: &str) -> Option<usize> {
        self.map.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn unk(&self) -> usize {
        self.id(UNK)
    }
    pub fn bos(&self) -> usize {
        self.id(BOS)
    }
    pub fn eos(&self) -> usize {
        self.id(EOS)
    }
    pub fn nl(&self) -> usize {
        self.id(NL)
    }
    pub fn sep(&self) -> usize {
        self.id(SEP)
    }
    pub fn clue_marker(&self) -> usize {
        self.id(CLUE)
    }
    pub fn ans_marker(&self) -> usize {
        self.id(ANS)
    }

    /// Lowercase, split on non-alphanumeric; '.' and '?' survive as tokens,
    /// newlines map to `<nl>`, unknown words map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        let mut word = String::new();
        let flush = |w: &mut String, ids: &mut Vec<usize>| {
            if !w.is_empty() {
                ids.push(self.id(w.as_str()));
                w.clear();
            }
        };
        for ch in text.chars() {
            if ch.is_alphanumeric() {
                word.extend(ch.to_lowercase());
            } else {
                flush(&mut word, &mut ids);
                match ch {
                    '\n' => ids.push(self.nl()),
                    '.' => ids.push(self.id(".")),
                    '?' => ids.push(self.id("?")),
                    _ => {}
                }
            }
        }
        flush(&mut word, &mut ids);
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            let w = self.word(id);
            match w {
                NL => out.push('\n'),
                EOS | BOS => {}
                _ => {
                    if !out.is_empty() && !out.ends_with('\n') {
                        out.push(' ');
                    }
                    out.push_str(w);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_known_words() {
        let v = Vocab::builtin();
        let ids = v.encode("the veldrin was found near amber.\nwho?");
        let text = v.decode(&ids);
        assert_eq!(text, "the veldrin was found near amber .\nwho ?");
    }

    #[test]
    fn unknown_maps_to_unk() {
        let v = Vocab::builtin();
        assert_eq!(v.encode("xyzzyplugh")[0], v.unk());
    }

    #[test]
    fn lexicon_has_no_duplicates() {
        let v = Vocab::builtin();
        assert_eq!(v.map.len(), v.words.len());
    }
}
