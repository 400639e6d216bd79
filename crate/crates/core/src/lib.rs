//! A miniature functional package manager: a lazy recipe language evaluated
//! into derivations, a content-addressed store, a builder with sandbox
//! policies, a binary cache, a CI loop, and a reproducibility audit.

pub mod archive;
pub mod audit;
pub mod builder;
pub mod cache;
pub mod ci;
pub mod derivation;
pub mod lang;
pub mod store;
pub mod store_path;
pub mod util;

pub use archive::Tree;
pub use derivation::{Derivation, DrvError, FixedOutput};
pub use store::{PathInfo, Store, StoreError};
pub use store_path::{StorePath, STORE_PREFIX};
