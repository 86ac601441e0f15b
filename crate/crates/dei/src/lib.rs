//! The data exchange and interaction server (DEI), its name service, and the
//! image-processing workers (IPEs) that advance images through a workflow.

pub mod api;
pub mod client;
pub mod clock;
pub mod coordinator;
pub mod ipe;
pub mod nameservice;
pub mod pipeline;
pub mod server;
pub mod store;
pub mod txlog;

pub use api::DeiApi;
pub use client::HttpDei;
pub use store::{Dei, DeiConfig};
