//! Byte-level tokenizer: ids `0..=255` are raw bytes, followed by three
//! reserved control ids.

pub type TokenId = u32;

pub const DOC_START: TokenId = 256;
pub const DOC_END: TokenId = 257;
pub const EOS: TokenId = 258;
/// Smallest vocabulary that holds every byte and control id.
pub const BYTE_VOCAB_SIZE: usize = 259;

pub fn encode(text: &[u8]) -> Vec<TokenId> {
    text.iter().map(|&b| TokenId::from(b)).collect()
}

/// Bytes of every byte-valued id; control ids are dropped.
pub fn decode(tokens: &[TokenId]) -> Vec<u8> {
    tokens
        .iter()
        .filter_map(|&t| u8::try_from(t).ok())
        .collect()
}

/// Wrap a chunk payload in `<|doc_start|> … <|doc_end|>`.
pub fn frame_chunk(payload: &[TokenId]) -> Vec<TokenId> {
    let mut framed = Vec::with_capacity(payload.len() + 2);
    framed.push(DOC_START);
    framed.extend_from_slice(payload);
    framed.push(DOC_END);
    framed
}

/// Payload of a framed chunk, or the input unchanged if it is not framed.
pub fn unframe_chunk(tokens: &[TokenId]) -> &[TokenId] {
    match tokens {
        [DOC_START, inner @ .., DOC_END] => inner,
        other => other,
    }
}
