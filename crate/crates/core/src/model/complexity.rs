use std::time::Instant;

use mtuc_tensor::{Graph, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::net::Network;
use crate::error::Result;

/// Number of timed forward passes behind the FPS figure.
pub const FPS_RUNS: usize = 21;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub params: usize,
    /// Multiply-accumulates of one single-image forward pass.
    pub macs: u64,
    /// Median single-image forward rate (wall clock).
    pub fps: f64,
    /// First 16 hex digits of the SHA-256 of the network description.
    pub config_hash: String,
}

/// Parameter and MAC counts plus measured throughput. MACs are tallied
/// analytically by the conv and dense ops during an evaluation forward.
pub fn count_complexity<N: Network + ?Sized>(net: &N, description: &str) -> Result<ComplexityReport> {
    let [c, h, w] = net.input_shape();
    let input = Tensor::zeros(&[1, c, h, w]);
    let mut macs = 0;
    let mut times = Vec::with_capacity(FPS_RUNS);
    for run in 0..FPS_RUNS {
        let start = Instant::now();
        let mut g = Graph::no_grad(0);
        let x = g.input(input.clone());
        net.forward_eval(&mut g, x)?;
        times.push(start.elapsed().as_secs_f64());
        if run == 0 {
            macs = g.macs();
        }
    }
    times.sort_by(f64::total_cmp);
    let median = times[FPS_RUNS / 2];
    let digest = Sha256::digest(description.as_bytes());
    Ok(ComplexityReport {
        params: net.params().num_scalars(),
        macs,
        fps: if median > 0.0 { 1.0 / median } else { f64::INFINITY },
        config_hash: digest.iter().take(8).map(|b| format!("{b:02x}")).collect(),
    })
}
