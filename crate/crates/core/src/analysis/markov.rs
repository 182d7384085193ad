//! Fitting the four-state birth-death Markov chain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolution::BdState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovFit {
    pub matrix: [[f64; 4]; 4],
    pub counts: [[u64; 4]; 4],
    /// Rows with no departures, returned as uniform.
    pub empty_rows: [bool; 4],
}

/// `p̂ᵢⱼ = transitions i→j / departures from i`.
pub fn fit_markov(states: &[BdState]) -> Result<MarkovFit> {
    if states.len() < 2 {
        return Err(Error::param("states", "need at least 2 steps"));
    }
    let mut counts = [[0u64; 4]; 4];
    for w in states.windows(2) {
        counts[w[0].index()][w[1].index()] += 1;
    }
    let mut matrix = [[0.25; 4]; 4];
    let mut empty_rows = [false; 4];
    for i in 0..4 {
        let n: u64 = counts[i].iter().sum();
        if n == 0 {
            empty_rows[i] = true;
            continue;
        }
        for j in 0..4 {
            matrix[i][j] = counts[i][j] as f64 / n as f64;
        }
    }
    Ok(MarkovFit {
        matrix,
        counts,
        empty_rows,
    })
}
