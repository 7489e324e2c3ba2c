//! Layer-representation analysis: activation storage, pooling, UMAP
//! embedding, similarity indices, alignment and the Grand Tour.

pub mod alignment;
pub mod error;
pub mod linalg;
pub mod preprocess;
pub mod similarity;
pub mod store;
pub mod synthetic;
pub mod tour;
pub mod umap;

pub use error::{Error, Result};
