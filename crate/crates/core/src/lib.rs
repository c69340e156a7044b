//! Simulator and toolchain for an RFID-gated optical drive.
//!
//! Discs carry a visible serial and an RFID tag holding a hidden code. The
//! vendor publishes each code as an encrypted [`activation::ActivationBlob`];
//! a purchase secret unlocks it into the host's [`model::CodeDatabase`]. The
//! [`controller`] reads the tag on insertion and raises `run` only for codes
//! found in that database, otherwise `eject`. Disc content is sealed to the
//! (code, serial) pair by [`content`].

pub mod activation;
pub mod content;
pub mod controller;
mod crypto;
pub mod exec;
pub mod model;
pub mod persist;
pub mod rfid;
pub mod scenario;
pub mod trace;

pub use activation::{
    activate, provision_code, provision_disc, ActivationBlob, ActivationError, PurchaseSecret,
    SerialRegistry,
};
pub use content::{derive_content_key, open_content, seal_content, ContentError, SealedImage};
pub use controller::{
    authenticate, run_scenario, simulate, step, DriveController, DriveEvent, DriveState,
    ScheduledEvent,
};
pub use exec::Execution;
pub use model::{
    CodeDatabase, Disc, DriveConfig, FrequencyBand, ModelError, RfidTag, TagCode, VisibleSerial,
};
pub use rfid::{band_compatible, read_tag, ReadChannel, ReadResult};
pub use trace::SignalTrace;
