//! Client/server federated protocol over TCP.

pub mod client;
pub mod server;
pub mod wire;
