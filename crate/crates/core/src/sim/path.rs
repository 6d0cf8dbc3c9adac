use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schedule::SmoothSchedule;
use crate::error::{Error, Result};
use crate::imu::Trajectory;
use crate::quat::{UnitQuaternion, Vec3};

/// Motion pattern for [`gen_trajectory`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Profile {
    /// Device at rest at the origin with a seeded attitude.
    Static,
    Walk(WalkParams),
    /// Device rotated in place through a wide spread of attitudes, for
    /// magnetometer calibration.
    Calibration,
}

impl Default for Profile {
    fn default() -> Self {
        Profile::Walk(WalkParams::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WalkParams {
    /// Walking speed range, m/s.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Chance that a walking segment is followed by a pause.
    pub pause_prob: f64,
    pub initial_pause: bool,
    /// Step frequency in Hz; drawn from 1.6..2.1 when absent.
    pub cadence: Option<f64>,
    /// Walks turn back toward the origin once they stray this far (m).
    pub region_radius: f64,
    /// Vertical bounce amplitude per unit speed (m per m/s).
    pub bounce_per_speed: f64,
    /// Forward surge amplitude per unit speed (m per m/s).
    pub surge_per_speed: f64,
    /// Roll / pitch sway amplitude at 1.2 m/s (rad).
    pub sway: f64,
    /// Largest yaw offset between device and walking direction (rad).
    pub device_offset_max: f64,
    /// Largest slow pitch tilt of the device (rad).
    pub tilt_max: f64,
    /// Disables turns; the walk keeps its initial heading.
    pub straight: bool,
}

impl Default for WalkParams {
    fn default() -> Self {
        WalkParams {
            speed_min: 0.5,
            speed_max: 1.6,
            pause_prob: 0.15,
            initial_pause: true,
            cadence: None,
            region_radius: 20.0,
            bounce_per_speed: 0.02,
            surge_per_speed: 0.012,
            sway: 0.06,
            device_offset_max: 0.5,
            tilt_max: 0.3,
            straight: false,
        }
    }
}

/// Ground-truth path with the analytic world-frame acceleration at every sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SimPath {
    pub trajectory: Trajectory,
    pub accel_world: Vec<Vec3>,
    /// Step frequency of a walk, Hz.
    pub cadence: Option<f64>,
}

/// Samples a smooth pose path at `rate_hz` for `duration` seconds.
pub fn gen_trajectory(seed: u64, duration: f64, profile: &Profile, rate_hz: f64) -> Result<SimPath> {
    if !(duration > 0.0) || !duration.is_finite() {
        return Err(Error::Config(format!("duration must be positive, got {duration}")));
    }
    if !(rate_hz > 0.0) {
        return Err(Error::Config(format!("sample rate must be positive, got {rate_hz}")));
    }
    let n = ((duration * rate_hz).round() as usize).max(2);
    let t: Vec<f64> = (0..n).map(|k| k as f64 / rate_hz).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match profile {
        Profile::Static => {
            let q = UnitQuaternion::from_euler(
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                rng.random_range(-PI..PI),
            );
            Ok(SimPath {
                trajectory: Trajectory::new(t, vec![Vec3::zeros(); n], Some(vec![q; n]))?,
                accel_world: vec![Vec3::zeros(); n],
                cadence: None,
            })
        }
        Profile::Calibration => {
            let span = t[n - 1].max(1e-9);
            let (p0, p1, p2) = (
                rng.random_range(0.0..TAU),
                rng.random_range(0.0..TAU),
                rng.random_range(0.0..TAU),
            );
            let q = t
                .iter()
                .map(|&ti| {
                    let u = ti / span;
                    UnitQuaternion::from_euler(
                        2.5 * (TAU * 7.0 * u + p0).sin(),
                        1.4 * (TAU * 5.0 * u + p1).sin(),
                        TAU * 3.0 * u + p2,
                    )
                })
                .collect();
            Ok(SimPath {
                trajectory: Trajectory::new(t, vec![Vec3::zeros(); n], Some(q))?,
                accel_world: vec![Vec3::zeros(); n],
                cadence: None,
            })
        }
        Profile::Walk(p) => gen_walk(&mut rng, t, p),
    }
}

fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(TAU) - PI
}

struct Schedules {
    speed: SmoothSchedule,
    heading: SmoothSchedule,
}

impl Schedules {
    fn velocity(&self, t: f64) -> Vec3 {
        let s = self.speed.value(t);
        let psi = self.heading.value(t);
        Vec3::new(s * psi.cos(), s * psi.sin(), 0.0)
    }

    /// Simpson integration of the planar velocity over `[a, b]`.
    fn displacement(&self, a: f64, b: f64, pieces: usize) -> Vec3 {
        let h = (b - a) / pieces as f64;
        let mut acc = Vec3::zeros();
        for k in 0..pieces {
            let t0 = a + k as f64 * h;
            acc += (self.velocity(t0) + 4.0 * self.velocity(t0 + 0.5 * h) + self.velocity(t0 + h)) * (h / 6.0);
        }
        acc
    }
}

fn gen_walk(rng: &mut ChaCha8Rng, t: Vec<f64>, p: &WalkParams) -> Result<SimPath> {
    if !(p.speed_min >= 0.0 && p.speed_max >= p.speed_min) {
        return Err(Error::Config("walk speed range must satisfy 0 <= min <= max".into()));
    }
    let n = t.len();
    let end = t[n - 1];
    let cadence = p.cadence.unwrap_or_else(|| rng.random_range(1.6..2.1));
    let omega = TAU * cadence;
    let walk_speed = |rng: &mut ChaCha8Rng| {
        if p.speed_max > p.speed_min {
            rng.random_range(p.speed_min..p.speed_max)
        } else {
            p.speed_min
        }
    };

    // Speed: walking segments separated by occasional pauses.
    let mut level = if p.initial_pause { 0.0 } else { walk_speed(rng) };
    let mut speed = SmoothSchedule::constant(level);
    let mut ts = if p.initial_pause {
        rng.random_range(1.0..2.0)
    } else {
        rng.random_range(4.0..15.0)
    };
    while ts < end {
        let next = if level > 0.0 && rng.random_bool(p.pause_prob.clamp(0.0, 1.0)) {
            0.0
        } else {
            walk_speed(rng)
        };
        speed.push(ts, 1.0, next - level);
        level = next;
        ts += 1.0
            + if level == 0.0 {
                rng.random_range(1.0..4.0)
            } else {
                rng.random_range(4.0..15.0)
            };
    }

    // Heading: turns at random times, steering home near the region edge.
    let mut sched = Schedules {
        speed,
        heading: SmoothSchedule::constant(rng.random_range(-PI..PI)),
    };
    if !p.straight {
        let mut pos = Vec3::zeros();
        let mut t_pos = 0.0;
        let mut td = rng.random_range(2.0..7.0);
        while td < end {
            pos += sched.displacement(t_pos, td, ((td - t_pos) / 0.05).ceil().max(1.0) as usize);
            t_pos = td;
            let current = sched.heading.final_value();
            let delta = if pos.norm() > 0.6 * p.region_radius {
                let home = (-pos.y).atan2(-pos.x) + rng.random_range(-0.4..0.4);
                wrap_angle(home - current)
            } else if rng.random_bool(0.3) {
                rng.random_range(-0.3..0.3)
            } else {
                let mag = rng.random_range(0.3..2.2);
                if rng.random_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            };
            let dur = (delta.abs() / 1.2).max(0.6);
            sched.heading.push(td, dur, delta);
            td += dur + rng.random_range(2.0..7.0);
        }
    }

    // Device attitude relative to the walking direction.
    let mut offset = SmoothSchedule::constant(rng.random_range(-0.5..0.5) * p.device_offset_max);
    let mut tilt = SmoothSchedule::constant(rng.random_range(-1.0..1.0) * p.tilt_max);
    let (mut off_level, mut tilt_level) = (offset.final_value(), tilt.final_value());
    let mut to = rng.random_range(5.0..20.0);
    while to < end {
        let next = rng.random_range(-1.0..1.0) * p.device_offset_max;
        offset.push(to, 1.5, next - off_level);
        off_level = next;
        to += 1.5 + rng.random_range(5.0..20.0);
    }
    let mut tt = rng.random_range(8.0..25.0);
    while tt < end {
        let next = rng.random_range(-1.0..1.0) * p.tilt_max;
        tilt.push(tt, 2.0, next - tilt_level);
        tilt_level = next;
        tt += 2.0 + rng.random_range(8.0..25.0);
    }
    // The surge keeps a near-fixed phase to the bounce, as in human gait;
    // a free phase would make forward and backward walking look alike.
    let (phase_r, phase_p, phase_s) = (
        rng.random_range(0.0..TAU),
        rng.random_range(0.0..TAU),
        rng.random_range(-0.3..0.3),
    );

    let mut base = Vec3::zeros();
    let mut positions = Vec::with_capacity(n);
    let mut accel = Vec::with_capacity(n);
    let mut orientations = Vec::with_capacity(n);
    for (k, &tk) in t.iter().enumerate() {
        if k > 0 {
            base += sched.displacement(t[k - 1], tk, 4);
        }
        let [s, sd, sdd] = sched.speed.eval(tk);
        let [psi, psid, psidd] = sched.heading.eval(tk);
        let e = Vec3::new(psi.cos(), psi.sin(), 0.0);
        let nrm = Vec3::new(-psi.sin(), psi.cos(), 0.0);

        // Bounce z = kb·s·sin(ωt); surge u = ks·s·cos(ωt + φ) along the heading.
        let (sn, cs) = (omega * tk).sin_cos();
        let kb = p.bounce_per_speed;
        let z = kb * s * sn;
        let zdd = kb * (sdd * sn + 2.0 * sd * omega * cs - s * omega * omega * sn);
        let (su, cu) = (omega * tk + phase_s).sin_cos();
        let ks = p.surge_per_speed;
        let u = ks * s * cu;
        let ud = ks * (sd * cu - s * omega * su);
        let udd = ks * (sdd * cu - 2.0 * sd * omega * su - s * omega * omega * cu);

        positions.push(base + u * e + Vec3::new(0.0, 0.0, z));
        let horiz = sd * e + s * psid * nrm + udd * e + 2.0 * ud * psid * nrm + u * psidd * nrm - u * psid * psid * e;
        accel.push(horiz + Vec3::new(0.0, 0.0, zdd));

        let amp = s / 1.2;
        let roll = p.sway * amp * (0.5 * omega * tk + phase_r).sin();
        let pitch = tilt.value(tk) + 0.7 * p.sway * amp * (omega * tk + phase_p).sin();
        let yaw = psi + offset.value(tk);
        orientations.push(UnitQuaternion::from_euler(roll, pitch, yaw));
    }

    Ok(SimPath {
        trajectory: Trajectory::new(t, positions, Some(orientations))?,
        accel_world: accel,
        cadence: Some(cadence),
    })
}
