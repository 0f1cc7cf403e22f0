//! Wire format and the two transports: TCP sockets and an in-process link.

pub mod codec;
pub mod inproc;
pub mod socket;

pub use codec::{decode, encode, DecodeError, EncodeError, FrameReader};
pub use inproc::{FailureWindow, Handler, InProcessLink};
pub use socket::{Connection, Peer, Server, SharedHandler, SocketForwarder};
