//! Whitespace and punctuation tokenizer with character offsets.
//!
//! Alphanumeric runs form one token and every other non-space character is a
//! token of its own. Tokens are lowercased. In dialogue mode the text before
//! the first `:` of each line is the speaker name and stays a single token
//! even when it contains spaces or punctuation.

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    /// Char offset of the first character.
    pub start: usize,
    /// Char offset one past the last character.
    pub end: usize,
}

fn push_words(chars: &[char], from: usize, to: usize, out: &mut Vec<Token>) {
    let mut i = from;
    while i < to {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_alphanumeric() {
            let start = i;
            while i < to && chars[i].is_alphanumeric() {
                i += 1;
            }
            let text: String = chars[start..i].iter().collect();
            out.push(Token {
                text: text.to_lowercase(),
                start,
                end: i,
            });
        } else {
            out.push(Token {
                text: c.to_lowercase().collect(),
                start: i,
                end: i + 1,
            });
            i += 1;
        }
    }
}

/// Tokenizes free text such as a summary.
pub fn tokenize(text: &str) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    push_words(&chars, 0, chars.len(), &mut out);
    out
}

/// Tokenizes rendered dialogue text, one `speaker: utterance` per line.
pub fn tokenize_dialogue(text: &str) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut line_start = 0;
    while line_start <= chars.len() {
        let line_end = chars[line_start..]
            .iter()
            .position(|&c| c == '\n')
            .map_or(chars.len(), |p| line_start + p);
        let colon = chars[line_start..line_end]
            .iter()
            .position(|&c| c == ':')
            .map(|p| line_start + p);
        let body_start = match colon {
            Some(colon) => {
                let mut s = line_start;
                let mut e = colon;
                while s < e && chars[s].is_whitespace() {
                    s += 1;
                }
                while e > s && chars[e - 1].is_whitespace() {
                    e -= 1;
                }
                if s < e {
                    let name: String = chars[s..e].iter().collect();
                    out.push(Token {
                        text: name.to_lowercase(),
                        start: s,
                        end: e,
                    });
                }
                out.push(Token {
                    text: ":".into(),
                    start: colon,
                    end: colon + 1,
                });
                colon + 1
            }
            None => line_start,
        };
        push_words(&chars, body_start, line_end, &mut out);
        line_start = line_end + 1;
    }
    out
}

/// Token strings only.
pub fn token_texts(tokens: &[Token]) -> Vec<String> {
    tokens.iter().map(|t| t.text.clone()).collect()
}
