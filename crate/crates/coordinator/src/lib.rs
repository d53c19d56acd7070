//! Coordinator service: collects meter datagrams over UDP, persists them per
//! meter, relays commands and serves the JSON API.

pub mod api;
pub mod config;
pub mod coordinator;
pub mod service;
pub mod store;

pub use config::CoordinatorConfig;
pub use coordinator::{
    wall_clock_ms, CommandTicket, Coordinator, DispatchError, Health, IngestOutcome, TicketState,
};
pub use service::{BackgroundCoordinator, RunningCoordinator, ServiceError};
pub use store::{LogRecord, MeterRecord, SeriesPage, SeriesQuery, StorageId, Store, StoreError};
