//! Bit-exact model container: per-layer codebooks plus index streams coded
//! with an order-(n−1) context-adaptive range coder.

mod container;
mod range_coder;

use thiserror::Error;

pub use container::{
    decode, encode, export_raw_indices, raw_layer_offsets, QuantizedLayer, QuantizedModel, FORMAT_VERSION, MAGIC,
};
pub use range_coder::{
    decode_stream, decode_stream_in, encode_stream, encode_stream_in, FrequencyModel, RangeDecoder, RangeEncoder, TupleLayout,
    MAX_TOTAL,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),

    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    BadChecksum { stored: u32, computed: u32 },

    #[error("truncated container: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },

    #[error("malformed container: {0}")]
    Malformed(String),

    #[error("cannot encode: {0}")]
    Unencodable(String),
}
