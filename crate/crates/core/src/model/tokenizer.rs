use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{LabError, Result};

/// End-of-sequence id.
pub const EOS: usize = 0;

const MAX_IMAGE_LEVELS: usize = 16;
const FIRST_PRINTABLE: u8 = 0x20;
const LAST_PRINTABLE: u8 = 0x7E;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }
}

/// Vocabulary layout: `0` is EOS, `1..=image_levels` are quantized patch
/// intensities, then printable ASCII bytes starting at `text_base`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub size: usize,
    pub image_levels: usize,
    pub text_base: usize,
}

impl Vocab {
    pub fn new(cfg: &ModelConfig) -> Self {
        let image_levels = MAX_IMAGE_LEVELS.min((cfg.vocab - 1) / 2).max(1);
        Self {
            size: cfg.vocab,
            image_levels,
            text_base: 1 + image_levels,
        }
    }

    pub fn is_image(&self, id: usize) -> bool {
        (1..=self.image_levels).contains(&id)
    }

    pub fn is_text(&self, id: usize) -> bool {
        id >= self.text_base && id < self.size
    }

    /// Quantize a patch intensity in `[0, 1]` (clamped) to an image id.
    pub fn image_token(&self, value: f64) -> Result<usize> {
        if !value.is_finite() {
            return Err(LabError::Tokenizer(format!("non-finite patch value {value}")));
        }
        let v = value.clamp(0.0, 1.0);
        let level = ((v * self.image_levels as f64).floor() as usize).min(self.image_levels - 1);
        Ok(1 + level)
    }

    pub fn text_token(&self, byte: u8) -> Result<usize> {
        if !(FIRST_PRINTABLE..=LAST_PRINTABLE).contains(&byte) {
            return Err(LabError::Tokenizer(format!(
                "byte 0x{byte:02x} is not printable ASCII"
            )));
        }
        let id = self.text_base + (byte - FIRST_PRINTABLE) as usize;
        if id >= self.size {
            return Err(LabError::Tokenizer(format!(
                "character {:?} needs id {id} beyond vocabulary {}",
                byte as char, self.size
            )));
        }
        Ok(id)
    }

    pub fn encode_text(&self, text: &str) -> Result<Vec<usize>> {
        text.bytes().map(|b| self.text_token(b)).collect()
    }

    /// Render generated ids; EOS terminates, image ids render as `#`.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == EOS {
                break;
            }
            if self.is_text(id) {
                out.push((FIRST_PRINTABLE + (id - self.text_base) as u8) as char);
            } else {
                out.push('#');
            }
        }
        out
    }
}

/// Token ids with per-position modality tags. Index sets are derived from
/// the tags, so they always partition `0..len`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<usize>,
    modality: Vec<Modality>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, modality: Vec<Modality>) -> Result<Self> {
        if tokens.len() != modality.len() {
            return Err(LabError::Shape(format!(
                "{} tokens but {} modality tags",
                tokens.len(),
                modality.len()
            )));
        }
        Ok(Self { tokens, modality })
    }

    /// Map patch intensities and a prompt to `[image tokens][text tokens]`.
    pub fn multimodal(patches: &[f64], text: &str, cfg: &ModelConfig) -> Result<Self> {
        if patches.len() != cfg.image_tokens {
            return Err(LabError::Tokenizer(format!(
                "expected {} image patches, got {}",
                cfg.image_tokens,
                patches.len()
            )));
        }
        let vocab = Vocab::new(cfg);
        let mut tokens = patches
            .iter()
            .map(|&p| vocab.image_token(p))
            .collect::<Result<Vec<_>>>()?;
        let text_ids = vocab.encode_text(text)?;
        let mut modality = vec![Modality::Image; tokens.len()];
        modality.extend(std::iter::repeat_n(Modality::Text, text_ids.len()));
        tokens.extend(text_ids);
        Ok(Self { tokens, modality })
    }

    /// Text-only sequence.
    pub fn text(text: &str, cfg: &ModelConfig) -> Result<Self> {
        let ids = Vocab::new(cfg).encode_text(text)?;
        Ok(Self {
            modality: vec![Modality::Text; ids.len()],
            tokens: ids,
        })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn modality(&self) -> &[Modality] {
        &self.modality
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn indices(&self, m: Modality) -> Vec<usize> {
        self.modality
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == m)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn image_indices(&self) -> Vec<usize> {
        self.indices(Modality::Image)
    }

    pub fn text_indices(&self) -> Vec<usize> {
        self.indices(Modality::Text)
    }

    /// Append text ids (used for teacher forcing).
    pub fn with_appended_text(&self, ids: &[usize]) -> Self {
        let mut out = self.clone();
        out.tokens.extend_from_slice(ids);
        out.modality
            .extend(std::iter::repeat_n(Modality::Text, ids.len()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig::default()
    }

    #[test]
    fn empty_text_gives_image_only() {
        let s = TokenSequence::multimodal(&[0.5; 16], "", &cfg()).unwrap();
        assert_eq!(s.len(), 16);
        assert!(s.text_indices().is_empty());
    }

    #[test]
    fn text_appended_after_image() {
        let s = TokenSequence::multimodal(&[0.5; 16], "ab", &cfg()).unwrap();
        assert_eq!(s.len(), 18);
        assert_eq!(s.text_indices(), vec![16, 17]);
        assert_eq!(s.image_indices(), (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn golden_token_ids() {
        let patches: Vec<f64> = (0..16).map(|i| i as f64 / 15.0).collect();
        let s = TokenSequence::multimodal(&patches, "hi?", &cfg()).unwrap();
        assert_eq!(
            s.tokens(),
            &[1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 89, 90, 48]
        );
    }

    #[test]
    fn tokenizer_errors() {
        assert!(matches!(
            TokenSequence::multimodal(&[0.5; 15], "", &cfg()),
            Err(LabError::Tokenizer(_))
        ));
        assert!(matches!(
            TokenSequence::multimodal(&[0.5; 16], "é", &cfg()),
            Err(LabError::Tokenizer(_))
        ));
        let small = ModelConfig { vocab: 8, ..cfg() };
        assert!(TokenSequence::multimodal(&[0.5; 16], "z", &small).is_err());
    }

    #[test]
    fn decode_round_trip() {
        let v = Vocab::new(&cfg());
        let ids = v.encode_text("a red square.").unwrap();
        assert_eq!(v.decode(&ids), "a red square.");
        let mut with_eos = ids.clone();
        with_eos.push(EOS);
        with_eos.push(ids[0]);
        assert_eq!(v.decode(&with_eos), "a red square.");
    }
}
