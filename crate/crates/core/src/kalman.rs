//! Constant-velocity Kalman filter with Rauch–Tung–Striebel smoothing.

use nalgebra::{Matrix2, Vector2, Vector3};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KalmanParams {
    /// White-noise acceleration standard deviation, m/s².
    pub process_noise: f64,
    /// Position measurement standard deviation, m.
    pub measurement_noise: f64,
}

impl Default for KalmanParams {
    fn default() -> Self {
        Self {
            process_noise: 0.5,
            measurement_noise: 0.3,
        }
    }
}

/// Smoothed position and velocity at one time step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothedState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
}

/// Smooths a 3D track sampled at `times` (strictly increasing). Missing
/// measurements are `None` and get the smoothed state.
///
/// Axes are filtered independently with identical models, so the result is
/// equivariant under rotations and translations. The filter is started from
/// the first two measurements (position of the first, finite-difference
/// velocity), which makes it exact on noiseless constant-velocity input.
pub fn smooth_cv(times: &[f64], measurements: &[Option<Vector3<f64>>], params: &KalmanParams) -> Vec<SmoothedState> {
    assert_eq!(times.len(), measurements.len());
    let n = times.len();
    let observed: Vec<usize> = (0..n).filter(|&i| measurements[i].is_some()).collect();
    match observed.len() {
        0 => return Vec::new(),
        1 => {
            let p = measurements[observed[0]].unwrap();
            return vec![
                SmoothedState {
                    position: p,
                    velocity: Vector3::zeros(),
                };
                n
            ];
        }
        _ => {}
    }
    let mut out = vec![
        SmoothedState {
            position: Vector3::zeros(),
            velocity: Vector3::zeros(),
        };
        n
    ];
    for axis in 0..3 {
        let z: Vec<Option<f64>> = measurements.iter().map(|m| m.map(|v| v[axis])).collect();
        let states = smooth_axis(times, &z, &observed, params);
        for (o, s) in out.iter_mut().zip(states) {
            o.position[axis] = s[0];
            o.velocity[axis] = s[1];
        }
    }
    out
}

fn transition(dt: f64) -> Matrix2<f64> {
    Matrix2::new(1.0, dt, 0.0, 1.0)
}

fn process_cov(dt: f64, q: f64) -> Matrix2<f64> {
    let q2 = q * q;
    Matrix2::new(
        q2 * dt.powi(4) / 4.0,
        q2 * dt.powi(3) / 2.0,
        q2 * dt.powi(3) / 2.0,
        q2 * dt * dt,
    )
}

fn smooth_axis(times: &[f64], z: &[Option<f64>], observed: &[usize], params: &KalmanParams) -> Vec<Vector2<f64>> {
    let n = times.len();
    let r = params.measurement_noise * params.measurement_noise;
    let (i0, i1) = (observed[0], observed[1]);
    let dt01 = times[i1] - times[i0];
    let (z0, z1) = (z[i0].unwrap(), z[i1].unwrap());

    // state at the first measurement: [z0, (z1 − z0)/Δt]
    let mut xf = vec![Vector2::zeros(); n];
    let mut pf = vec![Matrix2::zeros(); n];
    let mut xp = vec![Vector2::zeros(); n];
    let mut pp = vec![Matrix2::zeros(); n];
    xf[i0] = Vector2::new(z0, (z1 - z0) / dt01);
    pf[i0] = Matrix2::new(r, -r / dt01, -r / dt01, 2.0 * r / (dt01 * dt01));
    xp[i0] = xf[i0];
    pp[i0] = pf[i0];

    for k in i0 + 1..n {
        let dt = times[k] - times[k - 1];
        let f = transition(dt);
        xp[k] = f * xf[k - 1];
        pp[k] = f * pf[k - 1] * f.transpose() + process_cov(dt, params.process_noise);
        // the second measurement is already in the initial velocity
        match z[k].filter(|_| k != i1) {
            Some(zk) => {
                let s = pp[k][(0, 0)] + r;
                let gain = Vector2::new(pp[k][(0, 0)], pp[k][(1, 0)]) / s;
                let innov = zk - xp[k][0];
                xf[k] = xp[k] + gain * innov;
                let h = nalgebra::RowVector2::new(1.0, 0.0);
                pf[k] = (Matrix2::identity() - gain * h) * pp[k];
            }
            None => {
                xf[k] = xp[k];
                pf[k] = pp[k];
            }
        }
    }

    let mut xs = xf.clone();
    for k in (i0..n - 1).rev() {
        let dt = times[k + 1] - times[k];
        let f = transition(dt);
        let inv = pp[k + 1].try_inverse().unwrap_or_else(Matrix2::zeros);
        let c = pf[k] * f.transpose() * inv;
        xs[k] = xf[k] + c * (xs[k + 1] - xp[k + 1]);
    }
    // before the first measurement: extrapolate backwards at constant velocity
    for k in (0..i0).rev() {
        let dt = times[k] - times[i0];
        xs[k] = Vector2::new(xs[i0][0] + xs[i0][1] * dt, xs[i0][1]);
    }
    xs
}
