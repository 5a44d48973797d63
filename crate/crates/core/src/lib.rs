//! Cross-modality transfer for RGB pedestrian detection.
//!
//! A region reconstruction network ([`rrn`]) learns to predict thermal appearance of
//! proposal regions from RGB alone. Its convolutional trunk is then transplanted into
//! the second stream of a two-stream multi-scale detector ([`msdn`]) that runs on RGB
//! only. Around the two networks sit the layer library ([`layers`]), proposal
//! handling ([`proposals`]), test-time detection ([`inference`]), the miss-rate/FPPI
//! protocol ([`eval`]) and a synthetic aligned RGB-thermal scene generator
//! ([`synthdata`]).

pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod inference;
pub mod layers;
pub mod msdn;
pub mod proposals;
pub mod rng;
pub mod rrn;
pub mod synthdata;
pub mod tensor;
pub mod trunk;

pub use error::{Error, Result};
pub use proposals::{BBox, Proposal};
pub use rng::Rng;
pub use tensor::Tensor;
