//! CSI preprocessing: frequency-to-delay truncation, magnitude/phase
//! channelization, and tube masking.
//!
//! The model never sees raw subcarriers. Each snapshot's per-link frequency
//! response is inverse-DFT'd along subcarriers (convention: the `1/N_sub`
//! factor lives in the inverse transform), truncated to the first `L` delay
//! taps where virtually all multipath energy lives, and split into a
//! magnitude plane and a wrapped-phase plane — a real tensor of shape
//! `(2, B*M, L)` per snapshot.
//!
//! Tube masking is the training-time corruption: one set of (row, tap) cells
//! is drawn per segment and zeroed in *both* channels at *every* step — a
//! spatial mask extruded through time. Only the online encoder ever sees
//! masked inputs; the EMA target branch always gets clean tensors.

use crate::cpx::Cpx;
use crate::error::SimError;
use crate::rng;
use crate::tensor::Tensor;

/// Preprocessing knobs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocConfig {
    /// Retained delay taps.
    pub l_taps: usize,
    /// Tube masking ratio in [0, 1]: fraction of (row, tap) cells zeroed.
    pub mask_ratio: f64,
}

impl Default for PreprocConfig {
    fn default() -> Self {
        PreprocConfig { l_taps: 16, mask_ratio: 0.15 }
    }
}

impl PreprocConfig {
    pub fn validate(&self, n_sub: usize) -> Result<(), SimError> {
        if self.l_taps < 1 || self.l_taps > n_sub {
            return Err(SimError::InvalidConfig {
                field: "l_taps".to_string(),
                reason: format!("need 1 <= L <= N_sub = {n_sub}, got {}", self.l_taps),
            });
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(SimError::InvalidConfig {
                field: "mask_ratio".to_string(),
                reason: format!("need 0 <= r <= 1, got {}", self.mask_ratio),
            });
        }
        Ok(())
    }
}

/// Inverse DFT along subcarriers, keeping taps `0..L`:
/// `h[n] = (1/N_sub) * sum_k H[k] * exp(+j 2 pi k n / N_sub)`.
///
/// `h` is one snapshot's interleaved channel tensor (`B*M*N_sub*2` floats);
/// the result is interleaved `B*M*L*2`.
pub fn truncate_delay(
    h: &[f64],
    rows: usize,
    n_sub: usize,
    l_taps: usize,
) -> Result<Vec<f64>, SimError> {
    if l_taps > n_sub || l_taps == 0 {
        return Err(SimError::InvalidConfig {
            field: "l_taps".to_string(),
            reason: format!("need 1 <= L <= N_sub = {n_sub}, got {l_taps}"),
        });
    }
    assert_eq!(h.len(), rows * n_sub * 2, "channel tensor length");
    let mut out = vec![0.0; rows * l_taps * 2];
    let inv_n = 1.0 / n_sub as f64;
    for r in 0..rows {
        let row = &h[r * n_sub * 2..(r + 1) * n_sub * 2];
        for n in 0..l_taps {
            // Rotation recurrence over k for fixed tap n.
            let step = Cpx::cis(std::f64::consts::TAU * n as f64 / n_sub as f64);
            let mut rot = Cpx::new(1.0, 0.0);
            let mut acc = Cpx::ZERO;
            for k in 0..n_sub {
                acc = acc.add(Cpx::new(row[k * 2], row[k * 2 + 1]).mul(rot));
                rot = rot.mul(step);
            }
            out[(r * l_taps + n) * 2] = acc.re * inv_n;
            out[(r * l_taps + n) * 2 + 1] = acc.im * inv_n;
        }
    }
    Ok(out)
}

/// Magnitude/phase planes from truncated taps: a `(2, rows, L)` tensor with
/// channel 0 = |h| and channel 1 = atan2(im, re) in (-pi, pi]. A zero tap
/// maps to (0, 0).
pub fn to_model_input(taps: &[f64], rows: usize, l_taps: usize) -> Tensor {
    assert_eq!(taps.len(), rows * l_taps * 2, "tap tensor length");
    let mut x = Tensor::zeros(&[2, rows, l_taps]);
    let plane = rows * l_taps;
    for r in 0..rows {
        for n in 0..l_taps {
            let re = taps[(r * l_taps + n) * 2];
            let im = taps[(r * l_taps + n) * 2 + 1];
            let mag = re.hypot(im);
            // atan2 returns -pi at (-x, -0); fold that onto +pi so phase
            // stays in (-pi, pi].
            let mut ph = if mag == 0.0 { 0.0 } else { im.atan2(re) };
            if ph <= -std::f64::consts::PI {
                ph = std::f64::consts::PI;
            }
            x.data_mut()[r * l_taps + n] = mag;
            x.data_mut()[plane + r * l_taps + n] = ph;
        }
    }
    x
}

/// The (row, tap) cells a given mask seed zeroes: `floor(r * rows * L)`
/// distinct cells, drawn uniformly without replacement via a partial
/// Fisher-Yates shuffle.
pub fn mask_cells(rows: usize, l_taps: usize, ratio: f64, seed: u64) -> Vec<usize> {
    let total = rows * l_taps;
    let count = ((ratio * total as f64).floor() as usize).min(total);
    let mut idx: Vec<usize> = (0..total).collect();
    let mut rng = rng::stream(seed, "tube-mask", 0);
    for i in 0..count {
        use rand::Rng;
        let j = i + rng.gen_range(0..total - i);
        idx.swap(i, j);
    }
    idx.truncate(count);
    idx
}

/// Zero the same (row, tap) cells — both channels — at every step of a
/// segment. Each tensor must be `(2, rows, L)`.
pub fn tube_mask(segment: &mut [Tensor], ratio: f64, seed: u64) {
    if segment.is_empty() || ratio <= 0.0 {
        return;
    }
    let shape = segment[0].shape().to_vec();
    assert_eq!(shape.len(), 3, "model inputs are (2, rows, L)");
    let (rows, l_taps) = (shape[1], shape[2]);
    let plane = rows * l_taps;
    let cells = mask_cells(rows, l_taps, ratio, seed);
    for x in segment.iter_mut() {
        assert_eq!(x.shape(), &shape[..], "all segment steps share one shape");
        for &c in &cells {
            x.data_mut()[c] = 0.0;
            x.data_mut()[plane + c] = 0.0;
        }
    }
}
