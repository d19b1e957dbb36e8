pub mod clock;
pub mod ledger;
pub mod coap;
pub mod context;
pub mod evaluator;
pub mod verifier;
pub mod device;
pub mod pipeline;
pub mod bench;
