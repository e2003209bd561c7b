//! Sandwiched compression: neural pre/post-processors trained around a
//! standard block codec through differentiable codec proxies.

pub mod ccvq;
pub mod codec;
pub mod dct;
pub mod error;
pub mod image;
pub mod networks;
pub mod proxy;
pub mod sandwich;
pub mod synthetic;
pub mod tensor;
pub mod video;

pub use error::{Error, Result};
pub use tensor::{NodeId, Shape, Tape, Tensor};
