//! Byte-level text tokenizer: every UTF-8 byte is its own token id.

/// Ids below this are text bytes; the rest of the vocabulary only appears in
/// image encodings and model output.
pub const BYTE_VOCAB: usize = 256;

pub fn encode(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Byte ids become text (invalid UTF-8 is replaced); other ids are written
/// as `<id>`.
pub fn decode(ids: &[u32]) -> String {
    let mut out = String::new();
    let mut bytes = Vec::new();
    for &id in ids {
        if (id as usize) < BYTE_VOCAB {
            bytes.push(id as u8);
        } else {
            out.push_str(&String::from_utf8_lossy(&bytes));
            bytes.clear();
            out.push_str(&format!("<{id}>"));
        }
    }
    out.push_str(&String::from_utf8_lossy(&bytes));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_special_ids() {
        assert_eq!(encode("hé"), vec![104, 195, 169]);
        assert_eq!(decode(&encode("hé llo")), "hé llo");
        assert_eq!(decode(&[104, 300, 105]), "h<300>i");
        assert!(encode("").is_empty());
    }
}
