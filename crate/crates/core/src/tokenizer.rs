//! Byte-level tokenizer: ids 0..=255 are raw UTF-8 bytes, followed by five
//! special tokens.

use serde::{Deserialize, Serialize};

use crate::corpus::InstructionExample;

pub type TokenId = u32;

pub const BOS: TokenId = 256;
pub const EOS: TokenId = 257;
pub const PAD: TokenId = 258;
pub const SEP_INSTR: TokenId = 259;
pub const SEP_OUTPUT: TokenId = 260;
pub const VOCAB_SIZE: usize = 261;

/// Shortest cutoff that still leaves room for the layout's special tokens.
pub const MIN_CUTOFF: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerManifest {
    pub kind: String,
    pub vocab_size: usize,
    pub bos: TokenId,
    pub eos: TokenId,
    pub pad: TokenId,
    pub sep_instr: TokenId,
    pub sep_output: TokenId,
}

impl Default for TokenizerManifest {
    fn default() -> Self {
        Self {
            kind: "byte-level".to_string(),
            vocab_size: VOCAB_SIZE,
            bos: BOS,
            eos: EOS,
            pad: PAD,
            sep_instr: SEP_INSTR,
            sep_output: SEP_OUTPUT,
        }
    }
}

pub fn is_special(id: TokenId) -> bool {
    id >= 256
}

pub fn encode(text: &str) -> Vec<TokenId> {
    text.bytes().map(TokenId::from).collect()
}

/// Drops special tokens (and any id outside the vocabulary) and decodes the
/// remaining bytes lossily.
pub fn decode(ids: &[TokenId]) -> String {
    let bytes: Vec<u8> = ids
        .iter()
        .filter(|&&id| !is_special(id))
        .map(|&id| id as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub token_ids: Vec<TokenId>,
    /// 1 on output-segment tokens and the closing EOS.
    pub loss_mask: Vec<u8>,
    pub truncated: bool,
}

impl EncodedExample {
    /// Next-token training pair: inputs are `token_ids[..n-1]`, targets are
    /// `token_ids[1..]`, and the mask says which targets are scored.
    pub fn shifted(&self) -> (&[TokenId], &[TokenId], &[u8]) {
        let n = self.token_ids.len();
        if n < 2 {
            return (&[], &[], &[]);
        }
        (&self.token_ids[..n - 1], &self.token_ids[1..], &self.loss_mask[1..])
    }

    pub fn scored_tokens(&self) -> usize {
        self.shifted().2.iter().filter(|&&m| m == 1).count()
    }
}

/// `BOS instruction SEP_INSTR input SEP_OUTPUT`: everything the model sees
/// before it starts producing the entity dictionary.
pub fn encode_prompt(instruction: &str, input: &str) -> Vec<TokenId> {
    let mut ids = Vec::with_capacity(instruction.len() + input.len() + 3);
    ids.push(BOS);
    ids.extend(encode(instruction));
    ids.push(SEP_INSTR);
    ids.extend(encode(input));
    ids.push(SEP_OUTPUT);
    ids
}

pub fn encode_example(ex: &InstructionExample, cutoff: usize) -> EncodedExample {
    assert!(cutoff >= MIN_CUTOFF, "cutoff {cutoff} below minimum {MIN_CUTOFF}");
    let mut token_ids = encode_prompt(&ex.instruction, &ex.input);
    let prompt_len = token_ids.len();
    token_ids.extend(encode(&ex.output));
    token_ids.push(EOS);
    let mut loss_mask = vec![0u8; prompt_len];
    loss_mask.resize(token_ids.len(), 1);

    let truncated = token_ids.len() > cutoff;
    token_ids.truncate(cutoff);
    loss_mask.truncate(cutoff);
    EncodedExample {
        token_ids,
        loss_mask,
        truncated,
    }
}
