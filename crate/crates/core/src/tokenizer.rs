//! Byte-level BPE.
//!
//! Token ids are dense. The 256 single-byte tokens guarantee every string is
//! encodable, so `decode(encode(s)) == s` for all UTF-8 input. Special
//! tokens (`bos`, `eos`, `image`) are never produced from raw text and
//! decode to nothing.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;

use crate::manifest::{keys, Manifest};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialTokens {
    pub bos: u32,
    pub eos: u32,
    pub image: u32,
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vec<Vec<u8>>,
    byte_ids: [u32; 256],
    merges: Vec<(u32, u32)>,
    // (left, right) -> (rank, merged id)
    merge_ranks: BTreeMap<(u32, u32), (u32, u32)>,
    special: SpecialTokens,
}

impl Tokenizer {
    /// Validates a vocabulary and merge list.
    ///
    /// Merges are given as byte strings; each side and their concatenation
    /// must be ordinary (non-special) vocabulary entries.
    pub fn new(vocab: Vec<Vec<u8>>, merges: &[(Vec<u8>, Vec<u8>)], special: SpecialTokens) -> Result<Self> {
        let n = vocab.len() as u32;
        let specials = [special.bos, special.eos, special.image];
        for (i, id) in specials.iter().enumerate() {
            if *id >= n {
                return Err(Error::Format(format!("special token id {id} outside vocab of {n}")));
            }
            if specials[..i].contains(id) {
                return Err(Error::Format(format!("special token id {id} used twice")));
            }
        }
        let mut by_bytes: BTreeMap<&[u8], u32> = BTreeMap::new();
        for (id, bytes) in vocab.iter().enumerate() {
            let id = id as u32;
            if specials.contains(&id) {
                continue;
            }
            if bytes.is_empty() {
                return Err(Error::Format(format!("token {id} has no bytes")));
            }
            if by_bytes.insert(bytes.as_slice(), id).is_some() {
                return Err(Error::Format(format!("token {id} duplicates bytes {bytes:?}")));
            }
        }
        let mut byte_ids = [0u32; 256];
        for b in 0..=255u8 {
            byte_ids[b as usize] = *by_bytes
                .get([b].as_slice())
                .ok_or_else(|| Error::Format(format!("vocab lacks byte token {b:#04x}")))?;
        }
        let mut merge_ranks = BTreeMap::new();
        let mut merge_ids = Vec::with_capacity(merges.len());
        for (rank, (l, r)) in merges.iter().enumerate() {
            let lookup = |bytes: &[u8]| {
                by_bytes
                    .get(bytes)
                    .copied()
                    .ok_or_else(|| Error::Format(format!("merge {rank}: {bytes:?} not in vocab")))
            };
            let (li, ri) = (lookup(l)?, lookup(r)?);
            let mut joined = l.clone();
            joined.extend_from_slice(r);
            let mi = lookup(&joined)?;
            merge_ranks.entry((li, ri)).or_insert((rank as u32, mi));
            merge_ids.push((li, ri));
        }
        Ok(Self {
            vocab,
            byte_ids,
            merges: merge_ids,
            merge_ranks,
            special,
        })
    }

    /// Just the 256 byte tokens followed by bos, eos and image.
    pub fn bytes_only() -> Self {
        let mut vocab: Vec<Vec<u8>> = (0..=255u8).map(|b| alloc::vec![b]).collect();
        vocab.extend([b"<s>".to_vec(), b"</s>".to_vec(), b"<image>".to_vec()]);
        Self::new(
            vocab,
            &[],
            SpecialTokens {
                bos: 256,
                eos: 257,
                image: 258,
            },
        )
        .expect("byte vocabulary is valid")
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn special(&self) -> SpecialTokens {
        self.special
    }

    pub fn is_special(&self, id: u32) -> bool {
        id == self.special.bos || id == self.special.eos || id == self.special.image
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.vocab.get(id as usize).map(Vec::as_slice)
    }

    pub fn byte_id(&self, b: u8) -> u32 {
        self.byte_ids[b as usize]
    }

    /// Merge pairs as byte strings, in rank order.
    pub fn merges(&self) -> impl Iterator<Item = (&[u8], &[u8])> {
        self.merges
            .iter()
            .map(|(l, r)| (self.vocab[*l as usize].as_slice(), self.vocab[*r as usize].as_slice()))
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids: Vec<u32> = text.bytes().map(|b| self.byte_ids[b as usize]).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.merge_ranks.get(&(w[0], w[1])))
                .min_by_key(|(rank, _)| *rank)
                .copied();
            let Some((rank, merged)) = best else { break };
            let (l, r) = self.merges[rank as usize];
            let mut out = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == l && ids[i + 1] == r {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(ids[i]);
                    i += 1;
                }
            }
            ids = out;
        }
        ids
    }

    /// Raw bytes of `ids`, specials contributing nothing.
    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            self.append_bytes(id, &mut out)?;
        }
        Ok(out)
    }

    fn append_bytes(&self, id: u32, out: &mut Vec<u8>) -> Result<()> {
        let bytes = self
            .vocab
            .get(id as usize)
            .ok_or_else(|| Error::Argument(format!("token id {id} outside vocab of {}", self.vocab.len())))?;
        if !self.is_special(id) {
            out.extend_from_slice(bytes);
        }
        Ok(())
    }

    /// Decodes ids to text. Byte runs that are not valid UTF-8 (possible
    /// only for model-generated ids) become U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let bytes = self.decode_bytes(ids)?;
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    pub fn stream(&self) -> StreamDecoder<'_> {
        StreamDecoder {
            tokenizer: self,
            pending: Vec::new(),
        }
    }

    /// Vocab blob: one `id<TAB>base64(bytes)` line per token.
    pub fn vocab_blob(&self) -> String {
        let mut s = String::new();
        for (id, bytes) in self.vocab.iter().enumerate() {
            s.push_str(&format!("{id}\t{}\n", B64.encode(bytes)));
        }
        s
    }

    /// Merges blob: one `base64(left) base64(right)` line per merge.
    pub fn merges_blob(&self) -> String {
        let mut s = String::new();
        for (l, r) in self.merges() {
            s.push_str(&format!("{} {}\n", B64.encode(l), B64.encode(r)));
        }
        s
    }

    pub fn parse_blobs(vocab: &str, merges: &str, special: SpecialTokens) -> Result<Self> {
        let mut tokens = Vec::new();
        for (line_no, line) in vocab.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (id, b64) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("vocab line {}: expected id<TAB>base64", line_no + 1)))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::Format(format!("vocab line {}: bad id {id:?}", line_no + 1)))?;
            if id != tokens.len() {
                return Err(Error::Format(format!(
                    "vocab line {}: id {id} out of order, expected {}",
                    line_no + 1,
                    tokens.len()
                )));
            }
            let bytes = B64
                .decode(b64)
                .map_err(|e| Error::Format(format!("vocab line {}: {e}", line_no + 1)))?;
            tokens.push(bytes);
        }
        let mut pairs = Vec::new();
        for (line_no, line) in merges.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| Error::Format(format!("merges line {}: expected two fields", line_no + 1)))?;
            let dec = |s: &str| {
                B64.decode(s)
                    .map_err(|e| Error::Format(format!("merges line {}: {e}", line_no + 1)))
            };
            pairs.push((dec(l)?, dec(r)?));
        }
        Self::new(tokens, &pairs, special)
    }

    /// Reads the tokenizer stored in model metadata.
    pub fn from_manifest(manifest: &Manifest) -> Result<Self> {
        let text = |key: &str| -> Result<String> {
            manifest
                .get_str(key)?
                .map(String::from)
                .ok_or_else(|| Error::Format(format!("missing metadata key {key}")))
        };
        let id = |key: &str| -> Result<u32> {
            match manifest.get_int(key)? {
                Some(v) if v >= 0 && v <= u32::MAX as i64 => Ok(v as u32),
                Some(v) => Err(Error::Format(format!("{key} = {v} is not a token id"))),
                None => Err(Error::Format(format!("missing metadata key {key}"))),
            }
        };
        let special = SpecialTokens {
            bos: id(keys::TOKENIZER_BOS)?,
            eos: id(keys::TOKENIZER_EOS)?,
            image: id(keys::TOKENIZER_IMAGE)?,
        };
        let tok = Self::parse_blobs(&text(keys::TOKENIZER_VOCAB)?, &text(keys::TOKENIZER_MERGES)?, special)?;
        if let Some(v) = manifest.get_int(keys::LLM_VOCAB_SIZE)? {
            if v as usize != tok.vocab_size() {
                return Err(Error::Consistency(format!(
                    "tokenizer has {} tokens but llm.vocab_size is {v}",
                    tok.vocab_size()
                )));
            }
        }
        Ok(tok)
    }

    /// Writes the tokenizer into `manifest` metadata.
    pub fn store(&self, manifest: &mut Manifest) {
        manifest.set(keys::TOKENIZER_VOCAB, self.vocab_blob());
        manifest.set(keys::TOKENIZER_MERGES, self.merges_blob());
        manifest.set(keys::TOKENIZER_BOS, self.special.bos as i64);
        manifest.set(keys::TOKENIZER_EOS, self.special.eos as i64);
        manifest.set(keys::TOKENIZER_IMAGE, self.special.image as i64);
    }
}

/// Incremental decoder that only ever emits complete UTF-8.
///
/// Concatenating every [`push`](Self::push) result and the final
/// [`finish`](Self::finish) equals [`Tokenizer::decode`] of all ids.
#[derive(Debug)]
pub struct StreamDecoder<'a> {
    tokenizer: &'a Tokenizer,
    pending: Vec<u8>,
}

impl StreamDecoder<'_> {
    pub fn push(&mut self, id: u32) -> Result<String> {
        self.tokenizer.append_bytes(id, &mut self.pending)?;
        let mut out = String::new();
        loop {
            match core::str::from_utf8(&self.pending) {
                Ok(s) => {
                    out.push_str(s);
                    self.pending.clear();
                    break;
                }
                Err(e) => {
                    let valid = e.valid_up_to();
                    out.push_str(core::str::from_utf8(&self.pending[..valid]).unwrap_or_default());
                    match e.error_len() {
                        Some(bad) => {
                            out.push(char::REPLACEMENT_CHARACTER);
                            self.pending.drain(..valid + bad);
                        }
                        None => {
                            // incomplete tail: hold it for the next token
                            self.pending.drain(..valid);
                            break;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Flushes any incomplete trailing sequence.
    pub fn finish(self) -> String {
        String::from_utf8_lossy(&self.pending).into_owned()
    }
}
