pub mod breaker;
pub mod gateway;
pub mod interceptor;
pub mod model;
pub mod registry;
pub mod rng;
pub mod sim;
pub mod time;
pub mod transport;
