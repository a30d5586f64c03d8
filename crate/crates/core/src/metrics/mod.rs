//! Telemetry: records, storage, scraping, stage association and export.

pub mod associate;
pub mod export;
pub mod records;
pub mod scraper;
pub mod sensors;
pub mod store;
