//! Entropy coding and the `.dlic` container.

mod container;
mod range_coder;
mod table;

pub use container::{
    decode_content, decode_model, encode_content, encode_model, pack, unpack, unpack_parts, updates_from_quantized,
    BlobHeader, CompressedBlob, DecodedParts, LayerRecord, PackRequest, FORMAT_VERSION, MAGIC,
};
pub use range_coder::{range_decode, range_encode, RangeDecoder, RangeEncoder};
pub use table::{SymbolTable, TABLE_BITS, TABLE_TOTAL};
