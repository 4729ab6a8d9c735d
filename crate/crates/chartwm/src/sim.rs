//! Geometric multipath CSI simulator.
//!
//! A transmitter (the "UE") wanders through a room on a smooth
//! random-waypoint path while `B` base stations, each with an `M`-element
//! uniform linear array, record wideband channel state information on
//! `N_sub` subcarriers. Every channel coefficient is the coherent sum of a
//! line-of-sight path and fixed single-bounce scatterer paths:
//!
//! ```text
//! H[b, m, k] = sum_p alpha_p * exp(-j 2 pi f_k tau_p(b, m)) + noise
//! ```
//!
//! with `tau_p = (||UE - s_p|| + ||s_p - antenna||) / c` (the LoS path takes
//! `s_p = UE`, i.e. the direct distance), free-space amplitude
//! `alpha_p = lambda_c / (4 pi * path length)`, and a 0.6 reflection factor
//! on non-LoS paths. The scatterer layout is fixed, so channel dynamics are
//! driven purely by user motion — which is exactly the regime where latent
//! charting quality can be judged against ground-truth positions.
//!
//! Everything is deterministic given the seeds: motion and measurement noise
//! draw from independent named ChaCha8 streams.

use crate::cpx::Cpx;
use crate::error::SimError;
use crate::rng;
use crate::tensor::standard_normal;

/// Speed of light, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Axis-aligned room: `min[i] <= x[i] <= max[i]`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RoomBounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

/// Static scene geometry and radio parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Base-station count.
    pub b: usize,
    /// Antennas per base station (uniform linear array along the y axis,
    /// centered on the BS position).
    pub m: usize,
    /// Subcarriers per antenna.
    pub n_sub: usize,
    /// Carrier frequency, Hz.
    pub carrier_hz: f64,
    /// Total bandwidth, Hz; subcarrier k sits at
    /// `carrier - bandwidth/2 + k * bandwidth / n_sub`.
    pub bandwidth_hz: f64,
    /// One position per base station.
    pub bs_positions: Vec<[f64; 3]>,
    /// Array element spacing in meters; half a carrier wavelength by default.
    pub antenna_spacing_m: f64,
    /// Propagation paths per BS-UE link; the first is line-of-sight, each
    /// further path bounces off the scatterer with the same index.
    pub paths_per_link: usize,
    /// Fixed single-bounce scatterer positions (at least `paths_per_link - 1`).
    pub scatterer_positions: Vec<[f64; 3]>,
    /// Complex noise std per entry, *relative to the link's LoS amplitude*.
    pub noise_std: f64,
    /// Room the UE is confined to.
    pub room: RoomBounds,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let carrier = 1.272e9;
        SceneConfig {
            b: 2,
            m: 4,
            n_sub: 64,
            carrier_hz: carrier,
            bandwidth_hz: 50e6,
            bs_positions: vec![[0.3, 0.3, 2.2], [7.7, 4.7, 2.2]],
            antenna_spacing_m: SPEED_OF_LIGHT / carrier / 2.0,
            paths_per_link: 5,
            scatterer_positions: vec![
                [1.5, 4.2, 1.0],
                [6.5, 0.8, 1.6],
                [4.0, 2.5, 0.5],
                [2.2, 1.1, 2.0],
                [6.8, 4.1, 0.9],
                [3.3, 3.7, 1.4],
            ],
            noise_std: 1e-4,
            room: RoomBounds { min: [0.0, 0.0, 0.0], max: [8.0, 5.0, 2.4] },
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |field: &str, reason: &str| {
            Err(SimError::InvalidConfig { field: field.to_string(), reason: reason.to_string() })
        };
        if self.b < 1 || self.m < 1 || self.n_sub < 1 {
            return fail("b/m/n_sub", "all counts must be >= 1");
        }
        if self.bandwidth_hz <= 0.0 {
            return fail("bandwidth_hz", "must be positive");
        }
        if self.carrier_hz <= self.bandwidth_hz / 2.0 {
            return fail("carrier_hz", "must exceed half the bandwidth");
        }
        if self.bs_positions.len() != self.b {
            return fail("bs_positions", "need exactly one position per base station");
        }
        if self.paths_per_link < 1 {
            return fail("paths_per_link", "need at least the line-of-sight path");
        }
        if self.scatterer_positions.len() + 1 < self.paths_per_link {
            return fail("scatterer_positions", "need at least paths_per_link - 1 scatterers");
        }
        if self.noise_std < 0.0 {
            return fail("noise_std", "must be non-negative");
        }
        for ax in 0..3 {
            if self.room.min[ax] >= self.room.max[ax] {
                return fail("room", "min must be strictly below max on every axis");
            }
        }
        Ok(())
    }

    /// Position of antenna `ant` of base station `bs`: a centered uniform
    /// linear array along the y axis.
    pub fn antenna_position(&self, bs: usize, ant: usize) -> [f64; 3] {
        let p = self.bs_positions[bs];
        let offset = (ant as f64 - (self.m as f64 - 1.0) / 2.0) * self.antenna_spacing_m;
        [p[0], p[1] + offset, p[2]]
    }

    /// Complex entries per snapshot (`B * M * N_sub`).
    pub fn entries(&self) -> usize {
        self.b * self.m * self.n_sub
    }
}

/// Parameters of the smooth random-waypoint motion model.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionConfig {
    /// Snapshot interval, seconds.
    pub dt: f64,
    /// Speed is drawn uniformly from this range per waypoint leg, m/s.
    pub speed_range: [f64; 2],
    /// Std of the per-step heading noise, rad.
    pub turn_rate_std: f64,
    /// Number of waypoints drawn inside the room.
    pub waypoint_count: usize,
    /// Extra stream index mixed into the motion RNG, letting two datasets
    /// share a master seed but differ in motion.
    pub seed: u64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        MotionConfig {
            dt: 0.04,
            speed_range: [0.4, 1.0],
            turn_rate_std: 0.25,
            waypoint_count: 8,
            seed: 0,
        }
    }
}

impl MotionConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |field: &str, reason: &str| {
            Err(SimError::InvalidConfig { field: field.to_string(), reason: reason.to_string() })
        };
        if !(self.dt > 0.0) {
            return fail("dt", "must be positive");
        }
        if self.speed_range[0] < 0.0 || self.speed_range[1] < self.speed_range[0] {
            return fail("speed_range", "need 0 <= lo <= hi");
        }
        if self.turn_rate_std < 0.0 {
            return fail("turn_rate_std", "must be non-negative");
        }
        if self.waypoint_count < 1 {
            return fail("waypoint_count", "need at least one waypoint");
        }
        Ok(())
    }
}

/// One CSI measurement: the complex channel tensor (interleaved re/im, index
/// `((b * M + m) * N_sub + k) * 2`), the ground-truth transmitter position,
/// and its timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiSnapshot {
    pub h: Vec<f64>,
    pub pos: [f64; 3],
    pub t: f64,
}

/// A trajectory: `T + 1` snapshots and the `T` planar velocity actions
/// between consecutive snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub snapshots: Vec<CsiSnapshot>,
    pub actions: Vec<[f64; 2]>,
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % std::f64::consts::TAU;
    if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    } else if a < -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    }
    a
}

/// Smooth random-waypoint positions: `T + 1` points at fixed height (the
/// vertical center of the room), clipped to the room's planar bounds.
fn motion_path(scene: &SceneConfig, motion: &MotionConfig, t_steps: usize, seed: u64) -> Vec<[f64; 3]> {
    use rand::Rng;
    let mut rng = rng::stream(seed, "motion", motion.seed);
    let room = &scene.room;
    let height = 0.5 * (room.min[2] + room.max[2]);
    // Waypoints keep a small margin so the path rarely hugs the walls.
    let margin = [
        0.05 * (room.max[0] - room.min[0]),
        0.05 * (room.max[1] - room.min[1]),
    ];
    let waypoint = |rng: &mut rand_chacha::ChaCha8Rng| -> [f64; 2] {
        [
            room.min[0] + margin[0] + (room.max[0] - room.min[0] - 2.0 * margin[0]) * rng.gen::<f64>(),
            room.min[1] + margin[1] + (room.max[1] - room.min[1] - 2.0 * margin[1]) * rng.gen::<f64>(),
        ]
    };
    let waypoints: Vec<[f64; 2]> = (0..motion.waypoint_count).map(|_| waypoint(&mut rng)).collect();

    let mut pos = waypoints[0];
    let mut target_idx = 1 % waypoints.len();
    let mut heading = rng.gen::<f64>() * std::f64::consts::TAU - std::f64::consts::PI;
    let mut speed =
        motion.speed_range[0] + (motion.speed_range[1] - motion.speed_range[0]) * rng.gen::<f64>();

    let mut out = Vec::with_capacity(t_steps + 1);
    out.push([pos[0], pos[1], height]);
    for _ in 0..t_steps {
        let target = waypoints[target_idx];
        let to_target = [target[0] - pos[0], target[1] - pos[1]];
        let dist_to_target = (to_target[0] * to_target[0] + to_target[1] * to_target[1]).sqrt();
        if dist_to_target < 0.3 {
            target_idx = (target_idx + 1) % waypoints.len();
            speed = motion.speed_range[0]
                + (motion.speed_range[1] - motion.speed_range[0]) * rng.gen::<f64>();
        }
        let desired = to_target[1].atan2(to_target[0]);
        // Steer 30% of the way toward the waypoint per step, plus turn noise.
        heading = wrap_angle(
            heading
                + 0.3 * wrap_angle(desired - heading)
                + motion.turn_rate_std * standard_normal(&mut rng),
        );
        pos[0] += speed * motion.dt * heading.cos();
        pos[1] += speed * motion.dt * heading.sin();
        // Clipping to the walls is expected behavior, never an error.
        pos[0] = pos[0].clamp(room.min[0], room.max[0]);
        pos[1] = pos[1].clamp(room.min[1], room.max[1]);
        out.push([pos[0], pos[1], height]);
    }
    out
}

/// Channel tensor for one UE position (no noise), interleaved re/im.
fn channel_at(scene: &SceneConfig, ue: [f64; 3]) -> Result<Vec<f64>, SimError> {
    let lambda = SPEED_OF_LIGHT / scene.carrier_hz;
    let f0 = scene.carrier_hz - scene.bandwidth_hz / 2.0;
    let df = scene.bandwidth_hz / scene.n_sub as f64;
    let mut h = vec![0.0; scene.entries() * 2];
    for b in 0..scene.b {
        for m in 0..scene.m {
            let ant = scene.antenna_position(b, m);
            let row = (b * scene.m + m) * scene.n_sub;
            for p in 0..scene.paths_per_link {
                let (length, reflect) = if p == 0 {
                    (dist(ue, ant), 1.0)
                } else {
                    let s = scene.scatterer_positions[p - 1];
                    (dist(ue, s) + dist(s, ant), 0.6)
                };
                if length < 1e-9 {
                    return Err(SimError::InvalidConfig {
                        field: "geometry".to_string(),
                        reason: "zero path length (UE coincides with an antenna or scatterer)"
                            .to_string(),
                    });
                }
                let alpha = reflect * lambda / (4.0 * std::f64::consts::PI * length);
                let tau = length / SPEED_OF_LIGHT;
                // exp(-j 2 pi f_k tau) advanced by a fixed rotation per
                // subcarrier: one sin_cos pair per path instead of N_sub.
                let mut rot = Cpx::cis(-std::f64::consts::TAU * f0 * tau);
                let step = Cpx::cis(-std::f64::consts::TAU * df * tau);
                for k in 0..scene.n_sub {
                    h[(row + k) * 2] += alpha * rot.re;
                    h[(row + k) * 2 + 1] += alpha * rot.im;
                    rot = rot.mul(step);
                }
            }
        }
    }
    Ok(h)
}

/// Simulate one trajectory: smooth random-waypoint motion, per-position
/// channel synthesis, relative complex noise, and derived planar actions.
/// Bit-identical output for identical `(scene, motion, T, seed)`.
pub fn generate_trajectory(
    scene: &SceneConfig,
    motion: &MotionConfig,
    t_steps: usize,
    seed: u64,
) -> Result<TrajectoryRecord, SimError> {
    scene.validate()?;
    motion.validate()?;
    if t_steps < 1 {
        return Err(SimError::InvalidConfig {
            field: "T".to_string(),
            reason: "need at least one step".to_string(),
        });
    }
    let positions = motion_path(scene, motion, t_steps, seed);
    let timestamps: Vec<f64> = (0..=t_steps).map(|i| i as f64 * motion.dt).collect();
    let mut noise_rng = rng::stream(seed, "csi-noise", motion.seed);

    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    let mut snapshots = Vec::with_capacity(t_steps + 1);
    for (i, &pos) in positions.iter().enumerate() {
        let mut h = channel_at(scene, pos)?;
        if scene.noise_std > 0.0 {
            // Noise std is relative to each link's LoS amplitude, circularly
            // symmetric across re/im.
            let lambda = SPEED_OF_LIGHT / scene.carrier_hz;
            for b in 0..scene.b {
                for m in 0..scene.m {
                    let ant = scene.antenna_position(b, m);
                    let alpha_los = lambda / (4.0 * std::f64::consts::PI * dist(pos, ant));
                    let sigma = scene.noise_std * alpha_los * inv_sqrt2;
                    let row = (b * scene.m + m) * scene.n_sub;
                    for k in 0..scene.n_sub {
                        h[(row + k) * 2] += sigma * standard_normal(&mut noise_rng);
                        h[(row + k) * 2 + 1] += sigma * standard_normal(&mut noise_rng);
                    }
                }
            }
        }
        snapshots.push(CsiSnapshot { h, pos, t: timestamps[i] });
    }
    let actions = actions_from_positions(&positions, &timestamps)?;
    Ok(TrajectoryRecord { snapshots, actions })
}

/// Planar velocities between consecutive positions:
/// `a_t = ((x_{t+1} - x_t).xy) / (t_{t+1} - t_t)`. The z component is
/// dropped — actions are 2-D by contract.
pub fn actions_from_positions(
    positions: &[[f64; 3]],
    timestamps: &[f64],
) -> Result<Vec<[f64; 2]>, SimError> {
    if positions.len() < 2 {
        return Err(SimError::TooFewPositions { got: positions.len() });
    }
    if positions.len() != timestamps.len() {
        return Err(SimError::LengthMismatch {
            positions: positions.len(),
            timestamps: timestamps.len(),
        });
    }
    let mut actions = Vec::with_capacity(positions.len() - 1);
    for i in 0..positions.len() - 1 {
        let dt = timestamps[i + 1] - timestamps[i];
        if dt <= 0.0 {
            return Err(SimError::NonIncreasingTimestamps { index: i + 1 });
        }
        actions.push([
            (positions[i + 1][0] - positions[i][0]) / dt,
            (positions[i + 1][1] - positions[i][1]) / dt,
        ]);
    }
    Ok(actions)
}
