pub mod checkpoint;
pub mod config;
pub mod data;
pub mod defender;
pub mod experiment;
pub mod error;
pub mod nn;
pub mod protocol;
pub mod ring;
pub mod role;
pub mod seed;
pub mod share;
pub mod transport;

pub use config::SessionConfig;
pub use error::{Error, Result};
pub use ring::{fx_matmul_trunc, FxConfig, FxMatrix, RingElem};
pub use role::RoleId;
pub use seed::SeedTree;
