//! Discrete-event simulation of a single WiFi status-update link: shared
//! medium, NIC queues and receive coalescing, the freshness-oriented MAC
//! path, application samplers, age analytics and an experiment harness.

pub mod aoi;
pub mod app;
pub mod channel;
pub mod freshfi;
pub mod sim;
pub mod wnic;
pub mod harness;
