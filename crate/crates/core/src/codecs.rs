//! The fitted tokenizers for one corpus, bundled with their shared vocabulary.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::action_codec::{ActionChunk, ActionTokenizer};
use crate::env::{EnvAction, Episode, ACTION_DIM, IMAGE_SIZE};
use crate::error::{ensure, Error, Result};
use crate::vision_codec::{Image, VqCodebook};
use crate::vocab::{TextTokenizer, TokenId, Vocabulary};

const VOCAB_FILE: &str = "vocab.tsv";
const CODEBOOK_FILE: &str = "codebook.vq";
const ACTIONS_FILE: &str = "actions.tok";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    /// Codebook entries (vision vocabulary size).
    pub codebook_size: usize,
    /// DCT coefficient scale before rounding.
    pub scale: f64,
    /// Action vocabulary size (BPE target).
    pub action_vocab: usize,
    /// Action chunk length.
    pub horizon: usize,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self { codebook_size: 256, scale: 30.0, action_vocab: 256, horizon: 5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codecs {
    pub vocab: Vocabulary,
    pub text: TextTokenizer,
    pub vq: VqCodebook,
    pub action: ActionTokenizer,
}

/// The `h` steps from frame `t` relative to the pose at `t`: row `k` holds
/// the displacement reached after step `t + k` and that step's grip command.
/// Steps past the end hold the final pose and grip.
pub fn action_chunk(poses: &[[f32; 2]], actions: &[EnvAction], t: usize, h: usize) -> ActionChunk {
    assert_eq!(poses.len(), actions.len() + 1, "one pose per frame");
    let last_grip = actions.last().map_or(0.0, |a| a[2]);
    let origin = poses[t];
    let values = (t..t + h)
        .flat_map(|i| {
            let p = poses[(i + 1).min(poses.len() - 1)];
            let grip = actions.get(i).map_or(last_grip, |a| a[2]);
            [(p[0] - origin[0]) as f64, (p[1] - origin[1]) as f64, grip as f64]
        })
        .collect();
    ActionChunk::new(h, ACTION_DIM, values).expect("chunk shape")
}

/// Turns a decoded chunk row back into an environment command from the
/// current position, given the pose at which the chunk was generated.
pub fn chunk_command(origin: [f32; 2], current: [f32; 2], row: &[f64]) -> EnvAction {
    [(origin[0] as f64 + row[0]) as f32 - current[0], (origin[1] as f64 + row[1]) as f32 - current[1], row[2] as f32]
}

/// A foreign action space: permuted and sign-flipped dimensions.
pub fn mismatch_chunk(chunk: &ActionChunk) -> ActionChunk {
    let values = (0..chunk.horizon())
        .flat_map(|t| {
            let r = chunk.row(t);
            [-r[2], r[0], -r[1]]
        })
        .collect();
    ActionChunk::new(chunk.horizon(), chunk.dim(), values).expect("chunk shape")
}

impl Codecs {
    pub fn fit(episodes: &[Episode], cfg: &CodecConfig) -> Result<Self> {
        ensure!(!episodes.is_empty(), "cannot fit codecs on an empty dataset");
        ensure!(cfg.horizon >= 1, "horizon must be at least 1");
        let text = TextTokenizer::fit(episodes.iter().map(|e| e.instruction.as_str()));
        let vocab = Vocabulary::build(text.len(), cfg.codebook_size, cfg.action_vocab)?;
        let images: Vec<Image> = episodes.iter().flat_map(|e| e.images()).collect();
        let vq = VqCodebook::fit(&images, cfg.codebook_size, cfg.seed)?;
        let mut chunks = Vec::new();
        for e in episodes {
            let poses = e.poses()?;
            chunks.extend((0..e.actions.len()).map(|t| action_chunk(&poses, &e.actions, t, cfg.horizon)));
        }
        let action = ActionTokenizer::fit(&chunks, cfg.scale, cfg.action_vocab)?;
        Ok(Self { vocab, text, vq, action })
    }

    pub fn horizon(&self) -> usize {
        self.action.horizon
    }

    pub fn encode_instruction(&self, text: &str) -> Result<Vec<TokenId>> {
        self.text.encode(text, &self.vocab)
    }

    pub fn encode_frame(&self, rgb8: &[u8]) -> Result<Vec<TokenId>> {
        let img = Image::from_rgb8(IMAGE_SIZE, IMAGE_SIZE, rgb8)?;
        Ok(self.vq.encode_image(&img, &self.vocab)?.ids)
    }

    pub fn encode_frames(&self, frames: &[Vec<u8>]) -> Result<Vec<Vec<TokenId>>> {
        let imgs = frames.iter().map(|f| Image::from_rgb8(IMAGE_SIZE, IMAGE_SIZE, f)).collect::<Result<Vec<_>>>()?;
        Ok(self.vq.encode_many(&imgs, &self.vocab)?.into_iter().map(|g| g.ids).collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
        };
        write(VOCAB_FILE, self.vocab.to_manifest(self.text.words()).as_bytes())?;
        write(CODEBOOK_FILE, &self.vq.to_bytes())?;
        write(ACTIONS_FILE, self.action.to_text().as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read(&p).map_err(|e| Error::io(&p, e))
        };
        let as_data = |name: &str, e: Error| Error::data(dir.join(name), e.to_string());
        let vocab_text =
            String::from_utf8(read(VOCAB_FILE)?).map_err(|_| Error::data(dir.join(VOCAB_FILE), "not UTF-8"))?;
        let (vocab, words) = Vocabulary::from_manifest(&vocab_text).map_err(|e| as_data(VOCAB_FILE, e))?;
        let vq = VqCodebook::read_from(read(CODEBOOK_FILE)?.as_slice()).map_err(|e| as_data(CODEBOOK_FILE, e))?;
        let action_text =
            String::from_utf8(read(ACTIONS_FILE)?).map_err(|_| Error::data(dir.join(ACTIONS_FILE), "not UTF-8"))?;
        let action = ActionTokenizer::from_text(&action_text).map_err(|e| as_data(ACTIONS_FILE, e))?;
        if vq.len() > vocab.vision_range().len() || action.bpe.vocab_size() > vocab.action_range().len() {
            return Err(Error::data(dir, "codec sizes exceed the vocabulary"));
        }
        Ok(Self { vocab, text: TextTokenizer::from_words(words), vq, action })
    }
}
