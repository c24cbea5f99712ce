/// Lowercases and splits on whitespace; every character that is neither
/// alphanumeric nor whitespace becomes its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in lowered.chars() {
        if ch.is_whitespace() {
            flush(&mut cur, &mut out);
        } else if ch.is_alphanumeric() {
            cur.push(ch);
        } else {
            flush(&mut cur, &mut out);
            out.push(ch.to_string());
        }
    }
    flush(&mut cur, &mut out);
    out
}

fn flush(cur: &mut String, out: &mut Vec<String>) {
    if !cur.is_empty() {
        out.push(std::mem::take(cur));
    }
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ")
}

/// Default delimiters used to split a raw question into phrases.
pub const PHRASE_DELIMITERS: &[char] = &[',', ';', '.', '，', '；', '。'];

/// Splits raw question text into tokenized phrases, dropping empty pieces.
pub fn split_phrases(text: &str, delimiters: &[char]) -> Vec<Vec<String>> {
    text.split(|c| delimiters.contains(&c))
        .map(tokenize)
        .filter(|p| !p.is_empty())
        .collect()
}
