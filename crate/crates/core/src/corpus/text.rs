//! Sentence segmentation and word-level tokenization.

/// Literal that forces a sentence boundary regardless of punctuation.
pub const SEPARATOR: &str = "<sep>";

/// Lower-cased words that end in a period without ending a sentence.
pub const ABBREVIATIONS: &[&str] = &[
    "e.g.", "i.e.", "etc.", "vs.", "cf.", "al.", "fig.", "figs.", "eq.", "eqs.", "sec.", "tab.",
    "no.", "approx.", "resp.", "dr.", "mr.", "mrs.", "ms.", "prof.", "st.", "vol.", "pp.",
];

const TERMINATORS: [char; 3] = ['.', '!', '?'];
const CLOSERS: [char; 4] = ['"', '\'', ')', ']'];

/// Byte range `[start, end)` of one sentence within its source text.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn of(self, text: &str) -> &str {
        &text[self.start..self.end]
    }
}

fn is_guarded(word: &str) -> bool {
    let lower = word.to_lowercase();
    let trimmed = lower.trim_start_matches(['(', '"', '\'', '[']);
    ABBREVIATIONS.contains(&trimmed)
}

/// Splits `text` into sentence spans.
///
/// A sentence ends at a run of `.`/`!`/`?` (plus closing quotes or brackets) that is
/// followed by whitespace or the end of the text, unless the word carrying the period is
/// a guarded abbreviation. A standalone [`SEPARATOR`] word always closes the sentence it
/// ends. Spans never include surrounding whitespace, so the text between consecutive
/// spans is whitespace only.
pub fn split_sentences(text: &str) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    let mut word_start = 0;
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if start.is_none() {
            start = Some(pos);
        }
        if i == 0 || chars[i - 1].1.is_whitespace() {
            word_start = pos;
        }
        // end of the current word
        let mut j = i;
        while j < chars.len() && !chars[j].1.is_whitespace() {
            j += 1;
        }
        let word_end = if j < chars.len() { chars[j].0 } else { text.len() };
        let word = &text[word_start..word_end];
        let closes = if word == SEPARATOR {
            true
        } else {
            let stripped = word.trim_end_matches(CLOSERS);
            stripped.ends_with(TERMINATORS) && !is_guarded(stripped)
        };
        if closes {
            spans.push(Span {
                start: start.take().expect("sentence open"),
                end: word_end,
            });
        }
        i = j;
    }
    if let Some(s) = start {
        let end = text.trim_end().len();
        spans.push(Span { start: s, end });
    }
    spans
}

/// Sentence strings of `text`.
pub fn sentences(text: &str) -> Vec<String> {
    split_sentences(text)
        .into_iter()
        .map(|s| s.of(text).to_string())
        .collect()
}

/// Collapses every whitespace run into one space and trims the ends.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

const PUNCT: [char; 9] = ['.', ',', '!', '?', ';', ':', '(', ')', '"'];

/// Splits text into word tokens; punctuation characters become separate tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        if word == SEPARATOR {
            out.push(word.to_string());
            continue;
        }
        let mut cur = String::new();
        for c in word.chars() {
            if PUNCT.contains(&c) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            } else {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Joins tokens with single spaces, attaching closing punctuation to the preceding word.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for t in tokens {
        let t = t.as_ref();
        let attach = matches!(t, "." | "," | "!" | "?" | ";" | ":" | ")");
        if !out.is_empty() && !attach && !out.ends_with('(') {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_terminators() {
        assert_eq!(sentences("A. B."), vec!["A.", "B."]);
    }

    #[test]
    fn guarded_abbreviation_does_not_split() {
        assert_eq!(sentences("e.g. small"), vec!["e.g. small"]);
    }

    #[test]
    fn no_terminator_is_one_sentence() {
        assert_eq!(sentences("  just words here  "), vec!["just words here"]);
    }

    #[test]
    fn separator_forces_boundary() {
        assert_eq!(
            sentences("first part <sep> second part"),
            vec!["first part <sep>", "second part"]
        );
    }

    #[test]
    fn question_and_exclamation_with_closers() {
        assert_eq!(
            sentences("Does it work?\" Yes! (It does.) Done"),
            vec!["Does it work?\"", "Yes!", "(It does.)", "Done"]
        );
    }

    #[test]
    fn terminator_inside_word_is_not_a_boundary() {
        assert_eq!(sentences("version 3.5 is out."), vec!["version 3.5 is out."]);
    }

    #[test]
    fn tokenize_round_trips_simple_text() {
        let text = "we propose a model. it works, mostly!";
        let toks = tokenize(text);
        assert_eq!(toks[3], "model");
        assert_eq!(toks[4], ".");
        assert_eq!(detokenize(&toks), text);
    }
}
