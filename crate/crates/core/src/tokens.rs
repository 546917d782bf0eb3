//! Reserved vocabulary ids shared by the tokenizer, the generator and the model.

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const MASK: u32 = 2;
pub const UNK: u32 = 3;

/// Number of reserved ids; content tokens start here.
pub const RESERVED: u32 = 4;
