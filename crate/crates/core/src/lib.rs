//! CAN bus intrusion detection from messages-sequence graph similarity, with
//! an in-process bus, an ECU emulator and a harness that runs the detection
//! pipeline under four concurrency architectures.

pub mod bench;
pub mod buffer;
pub mod bus;
pub mod can_frame;
pub mod cli;
pub mod clock;
pub mod detector;
pub mod emulator;
pub mod msg_graph;
pub mod scenarios;
pub mod worker;

pub use can_frame::{CanFrame, FrameBatch};
