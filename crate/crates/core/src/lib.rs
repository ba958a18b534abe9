pub mod dataset;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod dsp;
pub mod features;
pub mod gammatone;
pub mod rir;
pub mod speech;
pub mod util;
pub mod wav;
