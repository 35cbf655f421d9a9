//! Bidirectional feature pyramid aggregation and the present/future latent
//! distributions injected into the aggregated pyramid.

mod bifpn;
mod latent;

pub use bifpn::{normalized_weights, Bifpn, BifpnConfig};
pub use latent::{Gaussian, LatentConfig, LatentModule, LatentOutput, SampleFrom};
