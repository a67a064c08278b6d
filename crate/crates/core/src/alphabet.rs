//! The character alphabet shared by rendering, labels and decoding.

/// Lowercase letters followed by the space character. CTC blank is the
/// index one past the end (see [`BLANK`]).
pub const CHARS: &[u8; 27] = b"abcdefghijklmnopqrstuvwxyz ";

pub const SIZE: usize = CHARS.len();

pub const SPACE: usize = 26;

/// Blank symbol index in every logits row.
pub const BLANK: usize = SIZE;

pub fn index_of(c: char) -> Option<usize> {
    CHARS.iter().position(|&b| b as char == c)
}

pub fn char_at(index: usize) -> Option<char> {
    CHARS.get(index).map(|&b| b as char)
}

pub fn is_letter(c: char) -> bool {
    c.is_ascii_lowercase()
}
