/// A lowercased token with its character span `[start, end)` in the source string.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Splits on whitespace; every punctuation character becomes its own token.
pub fn tokenize(s: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut word: Option<(usize, String)> = None;
    let flush = |word: &mut Option<(usize, String)>, end: usize, out: &mut Vec<Token>| {
        if let Some((start, text)) = word.take() {
            out.push(Token { text, start, end });
        }
    };
    let mut n = 0;
    for (i, ch) in s.chars().enumerate() {
        n = i + 1;
        if ch.is_whitespace() {
            flush(&mut word, i, &mut out);
        } else if is_punct(ch) {
            flush(&mut word, i, &mut out);
            out.push(Token {
                text: ch.to_lowercase().collect(),
                start: i,
                end: i + 1,
            });
        } else {
            word.get_or_insert_with(|| (i, String::new())).1.extend(ch.to_lowercase());
        }
    }
    flush(&mut word, n, &mut out);
    out
}
