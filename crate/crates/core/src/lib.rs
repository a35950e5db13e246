//! Deep residual quantization with a shared, geometrically scaled codebook.
//!
//! A vector is encoded by `M` rounds of nearest-codeword selection against
//! one codebook `C`, where round `m` uses `w^(m-1) C`. The crate covers the
//! quantizer itself ([`quant`]), training ([`train`]), compact code storage
//! and asymmetric-distance search ([`codes`], [`index`]), retrieval metrics
//! ([`eval`]) and the on-disk formats ([`io`]).

pub mod codes;
pub mod data;
pub mod error;
pub mod eval;
pub mod index;
pub mod io;
pub mod quant;
pub mod synth;
pub mod train;

pub use codes::{pack_codes, packed_len, unpack_codes};
pub use data::FeatureMatrix;
pub use error::{Error, Result};
pub use eval::{average_precision, evaluate, EvalOptions, EvalReport};
pub use index::{
    build_adc_table, encode_database, encode_database_with, rerank_exact, search, search_batch, AdcTable,
    EncodedDatabase, SearchHit,
};
pub use quant::{
    encode, encode_codes, hard_quantize, reconstruct_hard, reconstruct_soft, soft_quantize,
    CodeSequence, Codebook, QuantTrace, RqModel, SoftAssignment,
};
pub use synth::synth_dataset;
pub use train::{train, LossFlags, TrainConfig, TrainOutput};
