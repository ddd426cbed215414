//! Left-to-right and diffusion decoding.

mod ar;
mod diffusion;
mod kv;
mod request;

pub use ar::{ar_decode, ar_decode_exact, ar_decode_uncached, ArMode, DEFAULT_AR_TEMPERATURE};
pub use diffusion::{
    diffusion_decode, diffusion_init, diffusion_step, model_score, rerank, DecodeResult,
    SamplerSettings,
};
pub use kv::KVCache;
pub use request::{
    ar_task_decode, diffusion_task_decode, handle_request, strip_padding, DecodeKind,
    DecodeRequest, DecodeResponse,
};
