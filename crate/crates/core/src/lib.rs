//! Bit-accurate systolic-array reliability workbench.
//!
//! The crate simulates an 8-bit × 8-bit MAC array with a 24-bit accumulator
//! cycle by cycle and builds three reliability tools on top of it:
//!
//! * [`dta`]: workload-driven dynamic timing analysis with aging and
//!   statistical variation, compared against a corner-based guardband flow.
//! * [`readopt`]: weight reordering and output-channel clustering that cut
//!   the accumulator sign-flip rate and with it the timing error rate.
//! * [`abft`]: checksum-based fault detection for weight- and
//!   output-stationary dataflows, with a statistical unit that only asks
//!   for recomputation when errors land in a calibrated critical region.
//!
//! [`inject`] provides the error-injection engine and the toy transformer
//! used to characterize resilience and calibrate critical regions.

pub mod abft;
pub mod dta;
pub mod error;
pub mod inject;
pub mod io;
pub mod macsim;
pub mod readopt;
pub mod stream;
pub mod tensor;
pub mod workload;

pub use error::{Error, Result};
pub use stream::SeededStream;
pub use tensor::{QuantTensor, SignMatrix, WideTensor};
