use serde::{Deserialize, Serialize};

use crate::clinic::{NUM_SLICES, SLICE_SIZE};
use crate::text::{TextError, Vocab, GEN, GENERATION_INSTRUCTION, REP, REPRESENTATION_INSTRUCTION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub d_enc: usize,
    pub enc_layers: usize,
    pub enc_ff: usize,
    pub d_w: usize,
    pub dec_layers: usize,
    pub dec_ff: usize,
    pub heads: usize,
    pub d_align: usize,
    pub vocab_size: usize,
    pub max_report_len: usize,
    pub max_instruction_len: usize,
    /// Initialization seed.
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            patch_size: 8,
            d_enc: 32,
            enc_layers: 2,
            enc_ff: 128,
            d_w: 64,
            dec_layers: 2,
            dec_ff: 128,
            heads: 4,
            d_align: 32,
            vocab_size,
            max_report_len: 160,
            max_instruction_len: 16,
            seed: 0,
        }
    }

    pub fn patches_per_side(&self) -> usize {
        SLICE_SIZE / self.patch_size
    }

    /// Patches per slice (`H`).
    pub fn patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    /// Segmentation sub-cells per patch side: the head predicts a 4x4 block
    /// of logits per patch.
    pub const SEG_CELLS: usize = 4;

    /// Decoder positional capacity: visual tokens, instruction, report, end.
    pub fn max_positions(&self) -> usize {
        NUM_SLICES + self.max_instruction_len + self.max_report_len + 1
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.heads == 0
            || !self.d_enc.is_multiple_of(self.heads)
            || !self.d_w.is_multiple_of(self.heads)
        {
            return Err("d_enc and d_w must be divisible by heads".into());
        }
        if self.patch_size == 0
            || !SLICE_SIZE.is_multiple_of(self.patch_size)
            || self.patches() * self.patch_dim() != SLICE_SIZE * SLICE_SIZE
        {
            return Err("patch size must tile the slice".into());
        }
        if !self.patch_size.is_multiple_of(Self::SEG_CELLS) {
            return Err("patch size must be a multiple of the segmentation cell count".into());
        }
        let zero = [
            self.d_enc,
            self.enc_ff,
            self.d_w,
            self.dec_ff,
            self.d_align,
            self.vocab_size,
            self.max_report_len,
            self.max_instruction_len,
        ];
        if zero.contains(&0) {
            return Err("widths and lengths must be positive".into());
        }
        Ok(())
    }
}

/// Instruction token sequences switching the decoder between report
/// generation and representation extraction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionSet {
    pub representation: Vec<usize>,
    pub generation: Vec<usize>,
}

impl InstructionSet {
    pub fn new(vocab: &Vocab) -> Result<Self, TextError> {
        Self::with_generation_text(vocab, GENERATION_INSTRUCTION)
    }

    pub fn with_generation_text(vocab: &Vocab, generation: &str) -> Result<Self, TextError> {
        Ok(Self {
            representation: vocab.instruction(REP, REPRESENTATION_INSTRUCTION)?,
            generation: vocab.instruction(GEN, generation)?,
        })
    }
}
