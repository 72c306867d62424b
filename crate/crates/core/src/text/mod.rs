//! Event text rendering, sub-word tokenization and value preparation.

mod render;
mod value;
mod vocab;

pub use render::{
    digit_id, digit_place_indices, digit_split, encoder_text, is_numeric_value, render_event_text,
    tokenize, EventDescription, TokenSequence, ValueStrategy, MAX_TOKENS, PLACE_MAX, PLACE_MIN,
    PLACE_SLOTS,
};
pub use value::{ValueNormalizer, VcValue};
pub use vocab::{
    pre_tokenize, Vocabulary, CLS_ID, DIGIT_BASE, MASK_ID, PAD_ID, POINT_ID, SEP_ID, UNK_ID,
};
