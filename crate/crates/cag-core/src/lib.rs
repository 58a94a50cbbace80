//! Conditioning machinery for multi-subject generation at desk scale:
//! multi-stream token layouts with diagonal positional offsets,
//! correspondence-aware attention-mask compilation from word-to-bbox
//! groundings, VAE/text dropout with classifier-free guidance, a VLM
//! grounding client, and a toy masked-attention transformer harness.

pub mod attention;
pub mod conditioning;
pub mod config;
pub mod grounding;
pub mod layout;
pub mod mask;
pub mod numerics;
pub mod parallel;
pub mod toy;
