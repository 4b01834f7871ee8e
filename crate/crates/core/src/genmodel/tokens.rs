//! Token layout. Semantic code `c` at level `l` is token `l·K + c`; BOS is `L·K`.

use crate::error::{Error, Result};
use crate::tokenizer::SemanticId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub codebook_size: usize,
    pub levels: usize,
}

impl TokenLayout {
    pub fn bos(&self) -> usize {
        self.codebook_size * self.levels
    }

    pub fn token(&self, level: usize, code: u32) -> usize {
        level * self.codebook_size + code as usize
    }

    /// (level, code) of a semantic token; `None` for BOS or out of range.
    pub fn split(&self, token: usize) -> Option<(usize, u32)> {
        (token < self.bos()).then(|| (token / self.codebook_size, (token % self.codebook_size) as u32))
    }

    fn check(&self, sid: &SemanticId) -> Result<()> {
        if sid.levels() != self.levels {
            return Err(Error::Contract(format!("semantic id {sid} has {} codes, expected {}", sid.levels(), self.levels)));
        }
        if let Some(c) = sid.codes().iter().find(|&&c| c as usize >= self.codebook_size) {
            return Err(Error::Index(format!("code {c} outside codebook of size {}", self.codebook_size)));
        }
        Ok(())
    }
}

/// Decoder input, shifted targets and the loss mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderTokens {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    pub mask: Vec<bool>,
}

/// `[BOS, s₁¹..s₁ᴸ, BOS, s₂¹.., ..., BOS, s_m¹..s_mᴸ]`, targets shifted by one.
/// The final target is a BOS and, like every BOS target, is masked.
pub fn build_decoder_tokens(layout: TokenLayout, session: &[SemanticId]) -> Result<DecoderTokens> {
    let bos = layout.bos();
    let mut input = Vec::with_capacity(session.len() * (layout.levels + 1));
    for sid in session {
        layout.check(sid)?;
        input.push(bos);
        input.extend(sid.codes().iter().enumerate().map(|(l, &c)| layout.token(l, c)));
    }
    let mut target: Vec<usize> = input.iter().skip(1).copied().collect();
    target.push(bos);
    let mask = target.iter().map(|&t| t != bos).collect();
    Ok(DecoderTokens { input, target, mask })
}

/// Inverse of the input half of [`build_decoder_tokens`].
pub fn parse_decoder_input(layout: TokenLayout, input: &[usize]) -> Result<Vec<SemanticId>> {
    let bos = layout.bos();
    let mut out = Vec::new();
    for chunk in input.chunks(layout.levels + 1) {
        if chunk.len() != layout.levels + 1 || chunk[0] != bos {
            return Err(Error::Contract("decoder input is not BOS-separated items of L codes".into()));
        }
        let mut codes = Vec::with_capacity(layout.levels);
        for (l, &t) in chunk[1..].iter().enumerate() {
            match layout.split(t) {
                Some((lv, c)) if lv == l => codes.push(c),
                _ => return Err(Error::Contract(format!("token {t} is not a level-{l} code"))),
            }
        }
        out.push(SemanticId(codes));
    }
    Ok(out)
}

/// Encoder tokens for the most recent `max_items` history items, L per item.
pub fn history_tokens(layout: TokenLayout, history: &[SemanticId], max_items: usize) -> Result<Vec<usize>> {
    let start = history.len().saturating_sub(max_items);
    let mut out = Vec::with_capacity((history.len() - start) * layout.levels);
    for sid in &history[start..] {
        layout.check(sid)?;
        out.extend(sid.codes().iter().enumerate().map(|(l, &c)| layout.token(l, c)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn counting_examples() {
        let lay = TokenLayout { codebook_size: 4, levels: 3 };
        let t = build_decoder_tokens(lay, &[SemanticId(vec![1, 2, 3])]).unwrap();
        assert_eq!(t.input, vec![12, 1, 6, 11]);
        assert_eq!(t.target, vec![1, 6, 11, 12]);
        assert_eq!(t.mask.iter().filter(|&&m| m).count(), 3);
        let five: Vec<SemanticId> = (0..5).map(|i| SemanticId(vec![i % 4, 0, 1])).collect();
        let t = build_decoder_tokens(lay, &five).unwrap();
        assert_eq!(t.input.len(), 20);
        assert_eq!(t.mask.iter().filter(|&&m| m).count(), 15);
        assert!(matches!(build_decoder_tokens(lay, &[SemanticId(vec![1, 2])]), Err(Error::Contract(_))));
    }

    #[test]
    fn history_keeps_most_recent() {
        let lay = TokenLayout { codebook_size: 4, levels: 2 };
        let h: Vec<SemanticId> = (0..4).map(|i| SemanticId(vec![i, 3 - i])).collect();
        assert_eq!(history_tokens(lay, &h, 2).unwrap(), vec![2, 5, 3, 4]);
        assert!(history_tokens(lay, &[], 2).unwrap().is_empty());
    }

    proptest! {
        #[test]
        fn mask_count_and_round_trip(k in 1usize..9, l in 1usize..5, codes in prop::collection::vec(0u32..1000, 1..40)) {
            let lay = TokenLayout { codebook_size: k, levels: l };
            let m = (codes.len() / l).max(1);
            let session: Vec<SemanticId> = (0..m)
                .map(|i| SemanticId((0..l).map(|j| codes[(i * l + j) % codes.len()] % k as u32).collect()))
                .collect();
            let t = build_decoder_tokens(lay, &session).unwrap();
            prop_assert_eq!(t.input.len(), m * (l + 1));
            prop_assert_eq!(t.mask.iter().filter(|&&b| b).count(), m * l);
            prop_assert_eq!(parse_decoder_input(lay, &t.input).unwrap(), session);
        }
    }
}
