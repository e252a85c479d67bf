pub mod crm;
pub mod error;
pub mod harness;
pub mod io;
pub mod losses;
pub mod nn;
pub mod redaction;
pub mod rng;
pub mod sa;
pub mod tasks;
pub mod tensor;
