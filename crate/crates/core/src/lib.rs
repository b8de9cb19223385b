//! Memory-and-retrieval continual open-vocabulary detection at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: float64 tensors with a reverse-mode tape, AdamW and cosine schedule.
//! - [`detector`]: a miniature open-vocabulary detector with explicit
//!   image/text fusion layers, Hungarian matching and the detection loss.
//! - [`memory`]: concept prompts, low-rank interaction memories, prototypes
//!   and the append-only memory pool with its container format.
//! - [`retrieval`]: threshold and oracle retrieval, multi-memory inference, NMS.
//! - [`bench`]: synthetic continual tasks, COCO-format I/O, AP and rank metrics.
//! - [`experiment`]: pretraining, continual training, evaluation and ablations.

pub mod bench;
pub mod boxes;
pub mod detector;
pub mod experiment;
pub mod memory;
pub mod retrieval;
pub mod tensor;

pub use tensor::{Graph, ParamStore, SeededRng, Tensor, TensorError, Var};
