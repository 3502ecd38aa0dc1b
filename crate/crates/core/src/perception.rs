//! Synthetic keypoint perception: pinhole projection with pixel noise,
//! planar pose recovery for gates, ray/plane triangulation for obstacles and
//! per-object Kalman tracks with nearest-neighbour association.

use std::collections::VecDeque;

use nalgebra::{
    DMatrix, Isometry3, Matrix2, Matrix3, Rotation3, SMatrix, SVector, Translation3,
    UnitQuaternion, Vector2, Vector3, Vector4,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::world::{Gate, Obstacle, WorldState};
use crate::{wrap_angle, Error, Result};

/// Heights of the obstacle keypoints above the obstacle base, m.
pub const OBSTACLE_KEYPOINT_HEIGHTS: [f64; 3] = [0.0, 0.5, 1.0];

/// Points closer than this to the camera plane count as behind it.
const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            fx: 290.0,
            fy: 290.0,
            cx: 212.0,
            cy: 200.0,
            width: 424,
            height: 400,
        }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::Config(format!(
                "focal lengths must be positive: fx = {}, fy = {}",
                self.fx, self.fy
            )));
        }
        let inside = self.cx >= 0.0
            && self.cx <= self.width as f64
            && self.cy >= 0.0
            && self.cy <= self.height as f64;
        if !inside {
            return Err(Error::Config(format!(
                "principal point ({}, {}) outside the {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn project(&self, p_cam: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        )
    }

    /// Pixel to normalized image coordinates.
    pub fn normalize(&self, px: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy)
    }

    pub fn in_image(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.x <= self.width as f64 && px.y >= 0.0 && px.y <= self.height as f64
    }
}

/// World-from-camera transform of the forward camera on a drone: optical
/// axis along the heading, x to the right, y down.
pub fn camera_pose(position: &Vector3<f64>, yaw: f64) -> Isometry3<f64> {
    let fwd = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
    let right = Vector3::new(yaw.sin(), -yaw.cos(), 0.0);
    let down = -Vector3::z();
    let rot = Rotation3::from_basis_unchecked(&[right, down, fwd]);
    Isometry3::from_parts(
        Translation3::from(*position),
        UnitQuaternion::from_rotation_matrix(&rot),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    Gate,
    Obstacle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub id: usize,
    pub kind: ObjectKind,
    pub points: Vec<Vector2<f64>>,
    pub t: f64,
}

/// Projects object-frame model points through the camera and adds i.i.d.
/// Gaussian pixel noise. Returns `None` when any point lies behind the
/// camera.
pub fn project_points(
    model: &[Vector3<f64>],
    object_pose: &Isometry3<f64>,
    camera_pose: &Isometry3<f64>,
    intr: &CameraIntrinsics,
    pixel_noise_std: f64,
    rng: &mut impl Rng,
) -> Option<Vec<Vector2<f64>>> {
    let cam_from_obj = camera_pose.inverse() * object_pose;
    let cam: Vec<Vector3<f64>> = model.iter().map(|p| cam_from_obj * nalgebra::Point3::from(*p)).map(|p| p.coords).collect();
    if cam.iter().any(|p| p.z <= MIN_DEPTH) {
        return None;
    }
    let noise = Normal::new(0.0, pixel_noise_std.max(0.0)).expect("finite std");
    Some(
        cam.iter()
            .map(|p| {
                let px = intr.project(p);
                if pixel_noise_std > 0.0 {
                    px + Vector2::new(noise.sample(rng), noise.sample(rng))
                } else {
                    px
                }
            })
            .collect(),
    )
}

/// Keypoints of a gate, or `None` if a corner is behind the camera or
/// outside the image.
pub fn observe_gate(
    gate: &Gate,
    id: usize,
    t: f64,
    camera: &Isometry3<f64>,
    intr: &CameraIntrinsics,
    noise: f64,
    rng: &mut impl Rng,
) -> Option<KeypointSet> {
    let pts = project_points(&gate.model_corners(), &gate.pose(), camera, intr, noise, rng)?;
    pts.iter().all(|p| intr.in_image(p)).then_some(KeypointSet {
        id,
        kind: ObjectKind::Gate,
        points: pts,
        t,
    })
}

pub fn obstacle_model() -> Vec<Vector3<f64>> {
    OBSTACLE_KEYPOINT_HEIGHTS
        .iter()
        .map(|&h| Vector3::new(0.0, 0.0, h))
        .collect()
}

pub fn obstacle_pose(o: &Obstacle) -> Isometry3<f64> {
    Isometry3::translation(o.center_xy.x, o.center_xy.y, o.z)
}

pub fn observe_obstacle(
    o: &Obstacle,
    id: usize,
    t: f64,
    camera: &Isometry3<f64>,
    intr: &CameraIntrinsics,
    noise: f64,
    rng: &mut impl Rng,
) -> Option<KeypointSet> {
    let pts = project_points(&obstacle_model(), &obstacle_pose(o), camera, intr, noise, rng)?;
    pts.iter().all(|p| intr.in_image(p)).then_some(KeypointSet {
        id,
        kind: ObjectKind::Obstacle,
        points: pts,
        t,
    })
}

/// Translation and scale taking the points to zero mean and mean distance
/// sqrt(2) from the origin.
fn hartley(points: &[Vector2<f64>]) -> Option<Matrix3<f64>> {
    let n = points.len() as f64;
    let c = points.iter().sum::<Vector2<f64>>() / n;
    let mean_dist = points.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    if !(mean_dist > 1e-12) {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Some(Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0))
}

fn apply_h(h: &Matrix3<f64>, p: &Vector2<f64>) -> Vector2<f64> {
    let q = h * Vector3::new(p.x, p.y, 1.0);
    Vector2::new(q.x / q.z, q.y / q.z)
}

/// Smallest normalized triangle area over all triples, after Hartley
/// normalization. Near zero means three points are (nearly) collinear.
fn min_triangle_area(points: &[Vector2<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    let n = points.len();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                let a = points[j] - points[i];
                let b = points[k] - points[i];
                best = best.min(0.5 * (a.x * b.y - a.y * b.x).abs());
            }
        }
    }
    best
}

/// Normalized DLT homography mapping `src` to `dst` (at least 4 points).
pub fn homography(src: &[Vector2<f64>], dst: &[Vector2<f64>]) -> Result<Matrix3<f64>> {
    if src.len() != dst.len() || src.len() < 4 {
        return Err(Error::Perception(format!(
            "homography needs >= 4 matched points, got {} and {}",
            src.len(),
            dst.len()
        )));
    }
    let degenerate = || Error::Perception("degenerate (collinear) correspondences".into());
    let ts = hartley(src).ok_or_else(degenerate)?;
    let td = hartley(dst).ok_or_else(degenerate)?;
    let s: Vec<Vector2<f64>> = src.iter().map(|p| apply_h(&ts, p)).collect();
    let d: Vec<Vector2<f64>> = dst.iter().map(|p| apply_h(&td, p)).collect();
    if min_triangle_area(&s) < 1e-6 || min_triangle_area(&d) < 1e-6 {
        return Err(degenerate());
    }
    let rows = (2 * s.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (p, q)) in s.iter().zip(&d).enumerate() {
        let (x, y, u, v) = (p.x, p.y, q.x, q.y);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for c in 0..9 {
            a[(2 * i, c)] = r0[c];
            a[(2 * i + 1, c)] = r1[c];
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.ok_or_else(|| Error::Numerical("SVD failed".into()))?;
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .expect("nine singular values");
    let h = vt.row(imin);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td.try_inverse().ok_or_else(degenerate)?;
    let hm = td_inv * hn * ts;
    if hm[(2, 2)].abs() < 1e-12 {
        return Err(degenerate());
    }
    Ok(hm / hm[(2, 2)])
}

/// The two rotations consistent with a planar homography's first-order
/// behaviour at the model origin. `j` is the 2x2 Jacobian of the
/// model-plane-to-normalized-image map at the origin and `(p, q)` the image
/// of the origin.
pub fn ippe_rotations(j: &Matrix2<f64>, p: f64, q: f64) -> [Rotation3<f64>; 2] {
    let v = Vector3::new(p, q, 1.0).normalize();
    let rv = Rotation3::rotation_between(&Vector3::z(), &v).unwrap_or_else(Rotation3::identity);
    let rvm = rv.matrix();
    let proj = SMatrix::<f64, 2, 3>::new(1.0, 0.0, -p, 0.0, 1.0, -q);
    let b: Matrix2<f64> = proj * rvm.fixed_view::<3, 2>(0, 0);
    let a = b.try_inverse().unwrap_or_else(Matrix2::identity) * j;
    let (a00, a01, a10, a11) = (a[(0, 0)], a[(0, 1)], a[(1, 0)], a[(1, 1)]);
    let s = a00 * a00 + a01 * a01 + a10 * a10 + a11 * a11;
    let d = (a00 * a00 + a01 * a01 - a10 * a10 - a11 * a11).powi(2)
        + 4.0 * (a00 * a10 + a01 * a11).powi(2);
    let gamma = (0.5 * (s + d.sqrt())).sqrt();
    let r = a / gamma;
    let b0 = (1.0 - r[(0, 0)].powi(2) - r[(1, 0)].powi(2)).max(0.0).sqrt();
    let cross = r[(0, 0)] * r[(0, 1)] + r[(1, 0)] * r[(1, 1)];
    let b1 = -cross.signum() * (1.0 - r[(0, 1)].powi(2) - r[(1, 1)].powi(2)).max(0.0).sqrt();
    let build = |sign: f64| {
        let c0 = Vector3::new(r[(0, 0)], r[(1, 0)], sign * b0);
        let c1 = Vector3::new(r[(0, 1)], r[(1, 1)], sign * b1);
        let c2 = c0.cross(&c1);
        let local = Matrix3::from_columns(&[c0, c1, c2]);
        Rotation3::from_matrix_unchecked(rvm * local)
    };
    [build(1.0), build(-1.0)]
}

/// Least-squares translation for a known rotation, minimizing the
/// algebraic (cross-product) projection error.
fn translation_for(
    rot: &Rotation3<f64>,
    model: &[Vector3<f64>],
    img: &[Vector2<f64>],
) -> Option<Vector3<f64>> {
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for (m, u) in model.iter().zip(img) {
        let rx = rot * m;
        let rows = [
            (Vector3::new(1.0, 0.0, -u.x), u.x * rx.z - rx.x),
            (Vector3::new(0.0, 1.0, -u.y), u.y * rx.z - rx.y),
        ];
        for (a, b) in rows {
            ata += a * a.transpose();
            atb += a * b;
        }
    }
    ata.cholesky().map(|c| c.solve(&atb))
}

/// RMS pixel distance between observed points and the model projected with
/// `pose` (camera-from-object). Infinite if a point falls behind the camera.
pub fn reprojection_error(
    pose: &Isometry3<f64>,
    model: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    intr: &CameraIntrinsics,
) -> f64 {
    let mut sq = 0.0;
    for (m, px) in model.iter().zip(pixels) {
        let p = pose * nalgebra::Point3::from(*m);
        if p.z <= MIN_DEPTH {
            return f64::INFINITY;
        }
        sq += (intr.project(&p.coords) - px).norm_squared();
    }
    (sq / model.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnpSolution {
    /// Camera-from-object transform.
    pub pose: Isometry3<f64>,
    pub reprojection_error: f64,
    /// The rejected candidate and its error.
    pub alternative: (Isometry3<f64>, f64),
}

/// Pose of a planar model (all `z = 0` in the object frame) from pixel
/// correspondences: normalized-DLT homography, two-candidate rotation
/// recovery, least-squares translation and selection by reprojection error.
pub fn solve_planar_pnp(
    model: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    intr: &CameraIntrinsics,
    max_error_px: f64,
) -> Result<PnpSolution> {
    if model.len() != pixels.len() || model.len() < 4 {
        return Err(Error::Perception(format!(
            "planar PnP needs >= 4 correspondences, got {}",
            pixels.len()
        )));
    }
    if model.iter().any(|m| m.z.abs() > 1e-12) {
        return Err(Error::Perception("model points must lie in z = 0".into()));
    }
    let centroid = model.iter().sum::<Vector3<f64>>() / model.len() as f64;
    let centered: Vec<Vector3<f64>> = model.iter().map(|m| m - centroid).collect();
    let src: Vec<Vector2<f64>> = centered.iter().map(|m| m.xy()).collect();
    let img: Vec<Vector2<f64>> = pixels.iter().map(|p| intr.normalize(p)).collect();
    let h = homography(&src, &img)?;
    let (p, q) = (h[(0, 2)], h[(1, 2)]);
    let j = Matrix2::new(
        h[(0, 0)] - h[(2, 0)] * p,
        h[(0, 1)] - h[(2, 1)] * p,
        h[(1, 0)] - h[(2, 0)] * q,
        h[(1, 1)] - h[(2, 1)] * q,
    );
    let mut candidates = Vec::with_capacity(2);
    for rot in ippe_rotations(&j, p, q) {
        let Some(t) = translation_for(&rot, &centered, &img) else {
            continue;
        };
        // undo the centring: X_cam = R (X - c) + t = R X + (t - R c)
        let t_full = t - rot * centroid;
        let pose = Isometry3::from_parts(
            Translation3::from(t_full),
            UnitQuaternion::from_rotation_matrix(&rot),
        );
        let err = reprojection_error(&pose, model, pixels, intr);
        candidates.push((pose, err));
    }
    if candidates.is_empty() {
        return Err(Error::Perception("no pose candidate could be solved".into()));
    }
    candidates.sort_by(|a, b| a.1.total_cmp(&b.1));
    let best = candidates[0];
    let alt = *candidates.get(1).unwrap_or(&best);
    if !(best.1 <= max_error_px) {
        return Err(Error::Perception(format!(
            "reprojection error {:.2} px above {max_error_px} px",
            best.1
        )));
    }
    Ok(PnpSolution {
        pose: best.0,
        reprojection_error: best.1,
        alternative: alt,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateMeasurement {
    pub position: Vector3<f64>,
    pub yaw: f64,
    pub reprojection_error: f64,
    /// Distance along the optical axis, m.
    pub depth: f64,
}

impl GateMeasurement {
    pub fn state(&self) -> Vector4<f64> {
        Vector4::new(self.position.x, self.position.y, self.position.z, self.yaw)
    }
}

/// World-frame gate pose from its corner keypoints.
pub fn measure_gate(
    kps: &KeypointSet,
    camera: &Isometry3<f64>,
    intr: &CameraIntrinsics,
    max_error_px: f64,
) -> Result<GateMeasurement> {
    if kps.kind != ObjectKind::Gate || kps.points.len() != 4 {
        return Err(Error::Perception(format!(
            "gate keypoint set must have 4 points, got {:?} with {}",
            kps.kind,
            kps.points.len()
        )));
    }
    let model = Gate::new(Vector3::zeros(), 0.0).model_corners();
    let sol = solve_planar_pnp(&model, &kps.points, intr, max_error_px)?;
    let world = camera * sol.pose;
    let normal = world.rotation * Vector3::z();
    Ok(GateMeasurement {
        position: world.translation.vector,
        yaw: normal.y.atan2(normal.x),
        reprojection_error: sol.reprojection_error,
        depth: sol.pose.translation.vector.z,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObstacleMeasurement {
    pub position: Vector2<f64>,
    pub range: f64,
}

/// Sine of the shallowest ray elevation accepted for a plane intersection.
const MIN_RAY_SINE: f64 = 1e-3;

/// Obstacle axis position from its three keypoints: each back-projected ray
/// is cut with the horizontal plane at its keypoint's known height, and the
/// cuts are averaged with weights `sin^2(elevation) / range^2`, the inverse
/// of the horizontal error variance a fixed angular error produces.
pub fn estimate_obstacle(
    kps: &KeypointSet,
    camera: &Isometry3<f64>,
    intr: &CameraIntrinsics,
    base_z: f64,
) -> Result<ObstacleMeasurement> {
    if kps.kind != ObjectKind::Obstacle || kps.points.len() != OBSTACLE_KEYPOINT_HEIGHTS.len() {
        return Err(Error::Perception(format!(
            "obstacle keypoint set must have 3 points, got {:?} with {}",
            kps.kind,
            kps.points.len()
        )));
    }
    let c = camera.translation.vector;
    let mut sum = Vector2::zeros();
    let mut wsum = 0.0;
    let mut range_acc = 0.0;
    for (px, h) in kps.points.iter().zip(OBSTACLE_KEYPOINT_HEIGHTS) {
        let n = intr.normalize(px);
        let d = (camera.rotation * Vector3::new(n.x, n.y, 1.0)).normalize();
        if d.z.abs() < MIN_RAY_SINE {
            continue;
        }
        let s = (base_z + h - c.z) / d.z;
        if s <= 0.0 {
            continue;
        }
        let hit = c + d * s;
        let w = d.z * d.z / (s * s);
        sum += hit.xy() * w;
        range_acc += s * w;
        wsum += w;
    }
    if wsum == 0.0 {
        return Err(Error::Perception(
            "every keypoint ray is parallel to its plane or points away".into(),
        ));
    }
    Ok(ObstacleMeasurement {
        position: sum / wsum,
        range: range_acc / wsum,
    })
}

/// Kalman track with a random-walk process model and a direct full-state
/// measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanTrack<const N: usize> {
    pub id: usize,
    pub x: SVector<f64, N>,
    pub p: SMatrix<f64, N, N>,
    /// Process noise spectral density (diagonal), per second.
    pub q: SVector<f64, N>,
    /// State component holding an angle, wrapped after every update.
    pub angle_index: Option<usize>,
    pub last_update: f64,
}

pub type GateTrack = KalmanTrack<4>;
pub type ObstacleTrack = KalmanTrack<2>;

impl<const N: usize> KalmanTrack<N> {
    pub fn predict(&mut self, dt: f64) -> Result<()> {
        if !(dt >= 0.0) {
            return Err(Error::Domain(format!("negative prediction step {dt}")));
        }
        for i in 0..N {
            self.p[(i, i)] += self.q[i] * dt;
        }
        Ok(())
    }

    /// Joseph-form update with `H = I`.
    pub fn update(&mut self, z: &SVector<f64, N>, r: &SMatrix<f64, N, N>, t: f64) -> Result<()> {
        if r.cholesky().is_none() {
            return Err(Error::Domain("measurement covariance is not positive definite".into()));
        }
        let mut y = z - self.x;
        if let Some(k) = self.angle_index {
            y[k] = wrap_angle(y[k]);
        }
        let s = self.p + r;
        let s_inv = s
            .cholesky()
            .ok_or_else(|| Error::Numerical("innovation covariance not PD".into()))?
            .inverse();
        let k = self.p * s_inv;
        self.x += k * y;
        if let Some(i) = self.angle_index {
            self.x[i] = wrap_angle(self.x[i]);
        }
        let ikh = SMatrix::<f64, N, N>::identity() - k;
        let p = ikh * self.p * ikh.transpose() + k * r * k.transpose();
        self.p = (p + p.transpose()) * 0.5;
        self.last_update = t;
        Ok(())
    }

    pub fn is_consistent(&self) -> bool {
        self.p.cholesky().is_some() && (self.p - self.p.transpose()).abs().max() < 1e-9
    }
}

/// Greedy nearest-neighbour association: pairs are taken in order of
/// increasing distance while both sides are free and the distance is below
/// `gate_distance`. Returns, per measurement, the matched track index.
pub fn associate<const D: usize>(
    tracks: &[SVector<f64, D>],
    measurements: &[SVector<f64, D>],
    gate_distance: f64,
) -> Vec<Option<usize>> {
    let mut pairs = Vec::new();
    for (ti, t) in tracks.iter().enumerate() {
        for (mi, m) in measurements.iter().enumerate() {
            let d = (t - m).norm();
            if d < gate_distance {
                pairs.push((d, ti, mi));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut track_used = vec![false; tracks.len()];
    let mut out = vec![None; measurements.len()];
    for (_, ti, mi) in pairs {
        if !track_used[ti] && out[mi].is_none() {
            track_used[ti] = true;
            out[mi] = Some(ti);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptionConfig {
    pub intrinsics: CameraIntrinsics,
    pub pixel_noise_std: f64,
    pub rate_hz: f64,
    /// Capture-to-availability delay of a measurement, s.
    pub latency: f64,
    pub gate_distance: f64,
    pub drop_after: f64,
    pub max_reprojection_error: f64,
    /// Process noise for gate tracks: x, y, z (m^2/s), yaw (rad^2/s).
    pub q_gate: [f64; 4],
    /// Process noise for obstacle tracks, m^2/s per axis.
    pub q_obstacle: f64,
    /// Depth at which the measurement noise is calibrated, m.
    pub calibration_depth: f64,
    pub calibration_samples: usize,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics::default(),
            pixel_noise_std: 1.0,
            rate_hz: 30.0,
            latency: 0.0,
            gate_distance: 0.8,
            drop_after: 1.0,
            max_reprojection_error: 5.0,
            q_gate: [0.5, 0.5, 0.5, 0.2],
            q_obstacle: 0.5,
            calibration_depth: 3.0,
            calibration_samples: 2000,
        }
    }
}

impl PerceptionConfig {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let positive = [
            self.rate_hz,
            self.gate_distance,
            self.drop_after,
            self.max_reprojection_error,
            self.q_obstacle,
            self.calibration_depth,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite()))
            || self.q_gate.iter().any(|v| !(*v > 0.0))
        {
            return Err(Error::Config(format!("perception constants must be positive: {self:?}")));
        }
        if !(self.pixel_noise_std >= 0.0) || !(self.latency >= 0.0) {
            return Err(Error::Config("pixel noise and latency must be >= 0".into()));
        }
        if self.calibration_samples < 10 {
            return Err(Error::Config("calibration_samples must be >= 10".into()));
        }
        Ok(())
    }
}

/// Empirical covariance of the gate measurement at `depth` straight ahead,
/// in camera-aligned coordinates (right, down, forward, yaw).
pub fn calibrate_gate_noise(cfg: &PerceptionConfig, rng: &mut ChaCha8Rng) -> SMatrix<f64, 4, 4> {
    let cam = camera_pose(&Vector3::zeros(), 0.0);
    let gate = Gate::new(Vector3::new(cfg.calibration_depth, 0.0, 0.0), 0.0);
    let mut errs = Vec::new();
    for _ in 0..cfg.calibration_samples {
        let Some(k) = observe_gate(&gate, 0, 0.0, &cam, &cfg.intrinsics, cfg.pixel_noise_std, rng)
        else {
            continue;
        };
        if let Ok(m) = measure_gate(&k, &cam, &cfg.intrinsics, cfg.max_reprojection_error) {
            let d = cam.rotation.inverse() * (m.position - gate.center);
            errs.push(Vector4::new(d.x, d.y, d.z, wrap_angle(m.yaw - gate.yaw)));
        }
    }
    covariance(&errs, 1e-6)
}

/// Empirical covariance of the obstacle measurement at `depth` straight
/// ahead of a camera 1 m above the obstacle base, in (right, forward).
pub fn calibrate_obstacle_noise(cfg: &PerceptionConfig, rng: &mut ChaCha8Rng) -> Matrix2<f64> {
    let cam = camera_pose(&Vector3::new(0.0, 0.0, 1.0), 0.0);
    let o = Obstacle::new(cfg.calibration_depth, 0.0, 0.0);
    let mut errs = Vec::new();
    for _ in 0..cfg.calibration_samples {
        let Some(k) = observe_obstacle(&o, 0, 0.0, &cam, &cfg.intrinsics, cfg.pixel_noise_std, rng)
        else {
            continue;
        };
        if let Ok(m) = estimate_obstacle(&k, &cam, &cfg.intrinsics, o.z) {
            let d = m.position - o.center_xy;
            // camera right is world -y when facing +x
            errs.push(Vector2::new(-d.y, d.x));
        }
    }
    covariance(&errs, 1e-6)
}

fn covariance<const N: usize>(errs: &[SVector<f64, N>], floor: f64) -> SMatrix<f64, N, N> {
    let n = errs.len().max(1) as f64;
    let mean = errs.iter().sum::<SVector<f64, N>>() / n;
    let mut c = SMatrix::<f64, N, N>::zeros();
    for e in errs {
        let d = e - mean;
        c += d * d.transpose();
    }
    c /= n;
    for i in 0..N {
        c[(i, i)] = c[(i, i)].max(floor);
    }
    c
}

/// Rescales a covariance calibrated at `ref_depth` to `depth`: lateral and
/// angular errors grow linearly with depth, depth error quadratically.
fn scale_for_depth<const N: usize>(
    r0: &SMatrix<f64, N, N>,
    depth_axis: usize,
    depth: f64,
    ref_depth: f64,
) -> SMatrix<f64, N, N> {
    let s = (depth / ref_depth).max(0.1);
    let mut d = SVector::<f64, N>::repeat(s);
    d[depth_axis] = s * s;
    let sm = SMatrix::<f64, N, N>::from_diagonal(&d);
    sm * r0 * sm
}

/// Gate measurement covariance in world coordinates for a camera with the
/// given yaw.
pub fn gate_measurement_cov(
    r0: &SMatrix<f64, 4, 4>,
    depth: f64,
    ref_depth: f64,
    camera: &Isometry3<f64>,
) -> SMatrix<f64, 4, 4> {
    let rc = scale_for_depth(r0, 2, depth, ref_depth);
    let mut rot = SMatrix::<f64, 4, 4>::identity();
    rot.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(camera.rotation.to_rotation_matrix().matrix());
    let r = rot * rc * rot.transpose();
    (r + r.transpose()) * 0.5
}

pub fn obstacle_measurement_cov(r0: &Matrix2<f64>, range: f64, ref_depth: f64, yaw: f64) -> Matrix2<f64> {
    let rc = scale_for_depth(r0, 1, range, ref_depth);
    // columns: world directions of camera right and forward
    let rot = Matrix2::new(yaw.sin(), yaw.cos(), -yaw.cos(), yaw.sin());
    let r = rot * rc * rot.transpose();
    (r + r.transpose()) * 0.5
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measurements {
    pub t: f64,
    pub camera: Isometry3<f64>,
    pub gates: Vec<GateMeasurement>,
    pub obstacles: Vec<(ObstacleMeasurement, f64)>,
}

/// Per-object tracks for gates and obstacles.
#[derive(Debug, Clone)]
pub struct Tracker {
    pub gates: Vec<GateTrack>,
    pub obstacles: Vec<ObstacleTrack>,
    next_id: usize,
    pub t: f64,
    cfg: PerceptionConfig,
    r_gate: SMatrix<f64, 4, 4>,
    r_obstacle: Matrix2<f64>,
}

impl Tracker {
    pub fn new(cfg: PerceptionConfig, r_gate: SMatrix<f64, 4, 4>, r_obstacle: Matrix2<f64>) -> Self {
        Self {
            gates: Vec::new(),
            obstacles: Vec::new(),
            next_id: 0,
            t: 0.0,
            cfg,
            r_gate,
            r_obstacle,
        }
    }

    /// Calibrates the measurement noise by Monte Carlo with a fixed seed.
    pub fn calibrated(cfg: PerceptionConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
        let rg = calibrate_gate_noise(&cfg, &mut rng);
        let ro = calibrate_obstacle_noise(&cfg, &mut rng);
        Self::new(cfg, rg, ro)
    }

    pub fn r_gate(&self) -> &SMatrix<f64, 4, 4> {
        &self.r_gate
    }

    fn fresh_id(&mut self) -> usize {
        self.next_id += 1;
        self.next_id - 1
    }

    /// Predicts every track to `t`, folds in the measurements and drops
    /// tracks without an update for longer than `drop_after`.
    pub fn process(&mut self, m: &Measurements) -> Result<()> {
        let dt = (m.t - self.t).max(0.0);
        for g in &mut self.gates {
            g.predict(dt)?;
        }
        for o in &mut self.obstacles {
            o.predict(dt)?;
        }
        self.t = self.t.max(m.t);

        let track_pos: Vec<SVector<f64, 3>> = self.gates.iter().map(|g| g.x.fixed_rows::<3>(0).into()).collect();
        let meas_pos: Vec<SVector<f64, 3>> = m.gates.iter().map(|g| g.position).collect();
        let assign = associate(&track_pos, &meas_pos, self.cfg.gate_distance);
        for (gm, a) in m.gates.iter().zip(assign) {
            let r = gate_measurement_cov(&self.r_gate, gm.depth, self.cfg.calibration_depth, &m.camera);
            match a {
                Some(i) => self.gates[i].update(&gm.state(), &r, m.t)?,
                None => {
                    let id = self.fresh_id();
                    self.gates.push(GateTrack {
                        id,
                        x: gm.state(),
                        p: r,
                        q: Vector4::from(self.cfg.q_gate),
                        angle_index: Some(3),
                        last_update: m.t,
                    });
                }
            }
        }

        let track_pos: Vec<Vector2<f64>> = self.obstacles.iter().map(|o| o.x).collect();
        let meas_pos: Vec<Vector2<f64>> = m.obstacles.iter().map(|(o, _)| o.position).collect();
        let assign = associate(&track_pos, &meas_pos, self.cfg.gate_distance);
        for ((om, yaw), a) in m.obstacles.iter().zip(assign) {
            let r = obstacle_measurement_cov(&self.r_obstacle, om.range, self.cfg.calibration_depth, *yaw);
            match a {
                Some(i) => self.obstacles[i].update(&om.position, &r, m.t)?,
                None => {
                    let id = self.fresh_id();
                    self.obstacles.push(ObstacleTrack {
                        id,
                        x: om.position,
                        p: r,
                        q: Vector2::repeat(self.cfg.q_obstacle),
                        angle_index: None,
                        last_update: m.t,
                    });
                }
            }
        }
        let (t, keep) = (self.t, self.cfg.drop_after);
        self.gates.retain(|g| t - g.last_update <= keep);
        self.obstacles.retain(|o| t - o.last_update <= keep);
        Ok(())
    }
}

/// Camera, detector and tracker run alongside an episode at a fixed rate.
/// The policy or planner then sees tracked estimates instead of the true
/// gate and obstacle positions.
#[derive(Debug, Clone)]
pub struct PerceptionPipeline {
    pub cfg: PerceptionConfig,
    pub tracker: Tracker,
    rng: ChaCha8Rng,
    next_capture: f64,
    pending: VecDeque<Measurements>,
    last_gate: Option<Gate>,
    pub log: Vec<MeasurementLogRow>,
}

/// One row of the measurement log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementLogRow {
    pub t_capture: f64,
    pub t_output: f64,
    pub id: usize,
    pub kind: ObjectKind,
    pub raw_x: f64,
    pub raw_y: f64,
    pub raw_z: f64,
    pub raw_yaw: f64,
    pub filt_x: f64,
    pub filt_y: f64,
    pub filt_z: f64,
    pub filt_yaw: f64,
}

impl PerceptionPipeline {
    pub fn new(cfg: PerceptionConfig, seed: u64) -> Self {
        let tracker = Tracker::calibrated(cfg.clone());
        Self {
            cfg,
            tracker,
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_capture: 0.0,
            pending: VecDeque::new(),
            last_gate: None,
            log: Vec::new(),
        }
    }

    /// Captures keypoints if a frame is due at `w.t`, then processes every
    /// measurement whose latency has elapsed.
    pub fn tick(&mut self, w: &WorldState) -> Result<()> {
        if self.last_gate.is_none() {
            self.last_gate = w.gate;
        }
        if w.t + 1e-9 >= self.next_capture {
            self.next_capture += 1.0 / self.cfg.rate_hz;
            let m = self.capture(w);
            self.pending.push_back(m);
        }
        while self
            .pending
            .front()
            .is_some_and(|m| m.t + self.cfg.latency <= w.t + 1e-9)
        {
            let m = self.pending.pop_front().expect("non-empty");
            self.tracker.process(&m)?;
            self.log_measurements(&m, w.t);
        }
        Ok(())
    }

    fn capture(&mut self, w: &WorldState) -> Measurements {
        let cam = camera_pose(&w.drone.position, w.drone.yaw);
        let intr = self.cfg.intrinsics;
        let noise = self.cfg.pixel_noise_std;
        let mut m = Measurements {
            t: w.t,
            camera: cam,
            gates: Vec::new(),
            obstacles: Vec::new(),
        };
        if let Some(g) = &w.gate {
            if let Some(k) = observe_gate(g, 0, w.t, &cam, &intr, noise, &mut self.rng) {
                if let Ok(gm) = measure_gate(&k, &cam, &intr, self.cfg.max_reprojection_error) {
                    m.gates.push(gm);
                }
            }
        }
        for (i, o) in w.obstacles.iter().enumerate() {
            if let Some(k) = observe_obstacle(o, i, w.t, &cam, &intr, noise, &mut self.rng) {
                if let Ok(om) = estimate_obstacle(&k, &cam, &intr, o.z) {
                    m.obstacles.push((om, w.drone.yaw));
                }
            }
        }
        m
    }

    fn log_measurements(&mut self, m: &Measurements, t_out: f64) {
        for g in &m.gates {
            if let Some(tr) = self.nearest_gate_track(&g.position) {
                self.log.push(MeasurementLogRow {
                    t_capture: m.t,
                    t_output: t_out,
                    id: tr.id,
                    kind: ObjectKind::Gate,
                    raw_x: g.position.x,
                    raw_y: g.position.y,
                    raw_z: g.position.z,
                    raw_yaw: g.yaw,
                    filt_x: tr.x[0],
                    filt_y: tr.x[1],
                    filt_z: tr.x[2],
                    filt_yaw: tr.x[3],
                });
            }
        }
        for (o, _) in &m.obstacles {
            let tr = self
                .tracker
                .obstacles
                .iter()
                .min_by(|a, b| (a.x - o.position).norm().total_cmp(&(b.x - o.position).norm()));
            if let Some(tr) = tr {
                self.log.push(MeasurementLogRow {
                    t_capture: m.t,
                    t_output: t_out,
                    id: tr.id,
                    kind: ObjectKind::Obstacle,
                    raw_x: o.position.x,
                    raw_y: o.position.y,
                    raw_z: f64::NAN,
                    raw_yaw: f64::NAN,
                    filt_x: tr.x[0],
                    filt_y: tr.x[1],
                    filt_z: f64::NAN,
                    filt_yaw: f64::NAN,
                });
            }
        }
    }

    fn nearest_gate_track(&self, p: &Vector3<f64>) -> Option<&GateTrack> {
        self.tracker.gates.iter().min_by(|a, b| {
            let da = (a.x.fixed_rows::<3>(0) - p).norm();
            let db = (b.x.fixed_rows::<3>(0) - p).norm();
            da.total_cmp(&db)
        })
    }

    /// A copy of `w` with the gate and obstacles replaced by their tracked
    /// estimates. Without a gate track the last estimate (initially the
    /// mission's nominal gate) is kept; obstacles without a track are
    /// unknown to the agent.
    pub fn estimated_world(&mut self, w: &WorldState) -> WorldState {
        let mut est = w.clone();
        if let (Some(g), Some(track)) = (w.gate, self.tracker.gates.iter().max_by(|a, b| a.last_update.total_cmp(&b.last_update))) {
            let mut eg = g;
            eg.center = track.x.fixed_rows::<3>(0).into();
            eg.yaw = track.x[3];
            self.last_gate = Some(eg);
        }
        if w.gate.is_some() {
            est.gate = self.last_gate;
        }
        let base_z = w.obstacles.first().map(|o| o.z).unwrap_or(0.0);
        est.obstacles = self
            .tracker
            .obstacles
            .iter()
            .map(|t| Obstacle::new(t.x[0], t.x[1], base_z))
            .collect();
        est
    }
}

pub fn write_measurement_csv<W: std::io::Write>(out: W, rows: &[MeasurementLogRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// One named check of the perception self-test.
#[derive(Debug, Clone, PartialEq)]
pub struct SelftestCheck {
    pub name: &'static str,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Random gate pose in front of a camera at the origin facing +x, with all
/// four corners inside the image.
pub fn random_visible_gate(intr: &CameraIntrinsics, rng: &mut impl Rng) -> Gate {
    let cam = camera_pose(&Vector3::zeros(), 0.0);
    loop {
        let d = rng.random_range(1.5..8.0);
        let g = Gate::new(
            Vector3::new(d, rng.random_range(-0.4..0.4) * d, rng.random_range(-0.3..0.3) * d),
            rng.random_range(-1.0..1.0),
        );
        let ok = project_points(&g.model_corners(), &g.pose(), &cam, intr, 0.0, rng)
            .is_some_and(|p| p.iter().all(|q| intr.in_image(q)));
        if ok {
            return g;
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Noiseless round trip over random visible gate poses: worst position and
/// yaw error.
pub fn roundtrip_errors(intr: &CameraIntrinsics, n: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let cam = camera_pose(&Vector3::zeros(), 0.0);
    let (mut ep, mut ey) = (0.0f64, 0.0f64);
    for _ in 0..n {
        let g = random_visible_gate(intr, rng);
        let k = observe_gate(&g, 0, 0.0, &cam, intr, 0.0, rng).expect("visible by construction");
        match measure_gate(&k, &cam, intr, 5.0) {
            Ok(m) => {
                ep = ep.max((m.position - g.center).norm());
                ey = ey.max(wrap_angle(m.yaw - g.yaw).abs());
            }
            Err(_) => {
                ep = f64::INFINITY;
                ey = f64::INFINITY;
            }
        }
    }
    (ep, ey)
}

/// Median gate position error with pixel noise at `depth` m, over random
/// gate yaws and lateral offsets.
pub fn gate_noise_median(cfg: &PerceptionConfig, depth: f64, n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let cam = camera_pose(&Vector3::zeros(), 0.0);
    let mut errs = Vec::with_capacity(n);
    for _ in 0..n {
        let g = Gate::new(
            Vector3::new(depth, rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
            rng.random_range(-0.5..0.5),
        );
        let Some(k) = observe_gate(&g, 0, 0.0, &cam, &cfg.intrinsics, cfg.pixel_noise_std, rng) else {
            continue;
        };
        errs.push(match measure_gate(&k, &cam, &cfg.intrinsics, cfg.max_reprojection_error) {
            Ok(m) => (m.position - g.center).norm(),
            Err(_) => f64::INFINITY,
        });
    }
    median(errs)
}

/// Median obstacle position error with pixel noise at horizontal range
/// `depth`, camera 1-2 m above the obstacle base.
pub fn obstacle_noise_median(cfg: &PerceptionConfig, depth: f64, n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut errs = Vec::with_capacity(n);
    for _ in 0..n {
        let cam = camera_pose(&Vector3::new(0.0, 0.0, rng.random_range(1.0..2.0)), 0.0);
        let o = Obstacle::new(depth, rng.random_range(-0.5..0.5), 0.0);
        let Some(k) = observe_obstacle(&o, 0, 0.0, &cam, &cfg.intrinsics, cfg.pixel_noise_std, rng) else {
            continue;
        };
        errs.push(match estimate_obstacle(&k, &cam, &cfg.intrinsics, o.z) {
            Ok(m) => (m.position - o.center_xy).norm(),
            Err(_) => f64::INFINITY,
        });
    }
    median(errs)
}

/// Result of tracking a gate moving at constant speed past a hovering
/// camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingRun {
    pub raw_rmse: f64,
    pub filtered_rmse: f64,
    pub cycles: usize,
    pub always_pd: bool,
}

/// Feeds noisy measurements of a gate moving laterally at `speed` into a
/// tracker for `cycles` frames and compares raw and filtered position error.
/// The gate sweeps back and forth so it stays in view.
pub fn moving_gate_tracking(cfg: &PerceptionConfig, speed: f64, cycles: usize, rng: &mut ChaCha8Rng) -> Result<TrackingRun> {
    let mut tracker = Tracker::calibrated(cfg.clone());
    let cam = camera_pose(&Vector3::new(0.0, 0.0, 1.5), 0.0);
    let dt = 1.0 / cfg.rate_hz;
    let half_span = 1.0;
    let (mut raw_sq, mut filt_sq, mut n) = (0.0, 0.0, 0usize);
    let mut always_pd = true;
    let mut y = 0.0;
    let mut dir = 1.0;
    for i in 0..cycles {
        let t = i as f64 * dt;
        y += dir * speed * dt;
        if y.abs() > half_span {
            dir = -dir;
            y = y.clamp(-half_span, half_span);
        }
        let gate = Gate::new(Vector3::new(3.0, y, 1.5), 0.0);
        let mut m = Measurements {
            t,
            camera: cam,
            gates: Vec::new(),
            obstacles: Vec::new(),
        };
        if let Some(k) = observe_gate(&gate, 0, t, &cam, &cfg.intrinsics, cfg.pixel_noise_std, rng) {
            if let Ok(gm) = measure_gate(&k, &cam, &cfg.intrinsics, cfg.max_reprojection_error) {
                m.gates.push(gm);
            }
        }
        tracker.process(&m)?;
        if let (Some(gm), Some(tr)) = (m.gates.first(), tracker.gates.first()) {
            raw_sq += (gm.position - gate.center).norm_squared();
            filt_sq += (Vector3::new(tr.x[0], tr.x[1], tr.x[2]) - gate.center).norm_squared();
            n += 1;
        }
        always_pd &= tracker.gates.iter().all(|g| g.is_consistent());
    }
    let n = n.max(1) as f64;
    Ok(TrackingRun {
        raw_rmse: (raw_sq / n).sqrt(),
        filtered_rmse: (filt_sq / n).sqrt(),
        cycles,
        always_pd,
    })
}

/// Round trip, noise and tracking checks with their thresholds.
pub fn selftest(cfg: &PerceptionConfig, seed: u64) -> Result<Vec<SelftestCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ep, ey) = roundtrip_errors(&cfg.intrinsics, 1000, &mut rng);
    let noisy = PerceptionConfig {
        pixel_noise_std: 1.0,
        ..cfg.clone()
    };
    let gate_med = gate_noise_median(&noisy, 3.0, 1000, &mut rng);
    let obs_med = obstacle_noise_median(&noisy, 3.0, 1000, &mut rng);
    let run = moving_gate_tracking(&noisy, 0.3, 10_000, &mut rng)?;
    let check = |name, value: f64, threshold| SelftestCheck {
        name,
        value,
        threshold,
        pass: value < threshold,
    };
    Ok(vec![
        check("roundtrip_position_m", ep, 1e-6),
        check("roundtrip_yaw_rad", ey, 1e-6),
        check("gate_median_error_3m_m", gate_med, 0.1),
        check("obstacle_median_error_3m_m", obs_med, 0.05),
        SelftestCheck {
            name: "tracking_filtered_over_raw_rmse",
            value: run.filtered_rmse / run.raw_rmse,
            threshold: 1.0,
            pass: run.filtered_rmse <= run.raw_rmse,
        },
        SelftestCheck {
            name: "tracking_covariance_pd",
            value: if run.always_pd { 1.0 } else { 0.0 },
            threshold: 1.0,
            pass: run.always_pd,
        },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Point3;
    use proptest::prelude::*;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::default()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let cam = Isometry3::identity();
        for z in [0.5, 3.0, 100.0] {
            let obj = Isometry3::translation(0.0, 0.0, z);
            let p = project_points(&[Vector3::zeros()], &obj, &cam, &intr(), 0.0, &mut rng(0)).unwrap();
            assert!((p[0] - Vector2::new(212.0, 200.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn gate_corner_pixel_example() {
        let cam = Isometry3::identity();
        let obj = Isometry3::translation(0.0, 0.0, 3.0);
        let p = project_points(&[Vector3::new(0.75, 0.75, 0.0)], &obj, &cam, &intr(), 0.0, &mut rng(0)).unwrap();
        assert!((p[0].x - 284.5).abs() < 1e-12);
        assert!((p[0].y - 272.5).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_invisible() {
        let cam = Isometry3::identity();
        let obj = Isometry3::translation(0.0, 0.0, -3.0);
        assert!(project_points(&[Vector3::zeros()], &obj, &cam, &intr(), 0.0, &mut rng(0)).is_none());
    }

    #[test]
    fn camera_looks_along_heading() {
        let cam = camera_pose(&Vector3::new(1.0, 2.0, 1.0), 0.7);
        let ahead = Point3::new(1.0 + 0.7f64.cos(), 2.0 + 0.7f64.sin(), 1.0);
        let pc = cam.inverse() * ahead;
        assert!((pc.coords - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
        let above = cam.inverse() * Point3::new(1.0, 2.0, 2.0);
        assert!(above.y < 0.0);
    }

    #[test]
    fn intrinsics_validation() {
        assert!(intr().validate().is_ok());
        let bad = CameraIntrinsics { fx: 0.0, ..intr() };
        assert!(bad.validate().is_err());
        let bad = CameraIntrinsics { cx: 500.0, ..intr() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn frontal_gate_roundtrip() {
        let cam = Isometry3::identity();
        let gate_model = Gate::new(Vector3::zeros(), 0.0).model_corners();
        let obj = Isometry3::translation(0.0, 0.0, 3.0);
        let px = project_points(&gate_model, &obj, &cam, &intr(), 0.0, &mut rng(0)).unwrap();
        let sol = solve_planar_pnp(&gate_model, &px, &intr(), 5.0).unwrap();
        assert!((sol.pose.translation.vector - Vector3::new(0.0, 0.0, 3.0)).norm() < 1e-9);
        assert!(sol.pose.rotation.angle() < 1e-9);
        // fronto-parallel: the two candidates collapse onto one pose
        let (alt, alt_err) = sol.alternative;
        assert!((alt.translation.vector - sol.pose.translation.vector).norm() < 1e-6);
        assert!(alt.rotation.angle_to(&sol.pose.rotation) < 1e-6);
        assert!(alt_err < 1e-6);
    }

    #[test]
    fn world_roundtrip_on_random_poses() {
        let (ep, ey) = roundtrip_errors(&intr(), 1000, &mut rng(1));
        assert!(ep < 1e-6, "position error {ep}");
        assert!(ey < 1e-6, "yaw error {ey}");
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let model = Gate::new(Vector3::zeros(), 0.0).model_corners();
        let px = vec![
            Vector2::new(100.0, 100.0),
            Vector2::new(150.0, 100.0),
            Vector2::new(200.0, 100.0),
            Vector2::new(250.0, 100.0),
        ];
        assert!(matches!(solve_planar_pnp(&model, &px, &intr(), 5.0), Err(Error::Perception(_))));
    }

    #[test]
    fn inconsistent_points_are_rejected() {
        let model = Gate::new(Vector3::zeros(), 0.0).model_corners();
        // a non-square quadrilateral no rigid pose reproduces well
        let px = vec![
            Vector2::new(150.0, 150.0),
            Vector2::new(300.0, 120.0),
            Vector2::new(230.0, 260.0),
            Vector2::new(160.0, 240.0),
        ];
        let r = solve_planar_pnp(&model, &px, &intr(), 5.0);
        assert!(r.is_err() || r.unwrap().reprojection_error <= 5.0);
    }

    #[test]
    fn noisy_gate_median_below_ten_cm() {
        let cfg = PerceptionConfig::default();
        let m = gate_noise_median(&cfg, 3.0, 1000, &mut rng(2));
        assert!(m < 0.1, "median {m}");
    }

    #[test]
    fn obstacle_noiseless_and_noisy() {
        let cam = camera_pose(&Vector3::new(-2.0, 0.0, 1.2), 0.0);
        let o = Obstacle::new(1.0, 0.0, 0.0);
        let k = observe_obstacle(&o, 0, 0.0, &cam, &intr(), 0.0, &mut rng(0)).unwrap();
        let m = estimate_obstacle(&k, &cam, &intr(), 0.0).unwrap();
        assert!((m.position - Vector2::new(1.0, 0.0)).norm() < 1e-6);
        // every individual plane cut agrees
        for (px, h) in k.points.iter().zip(OBSTACLE_KEYPOINT_HEIGHTS) {
            let n = intr().normalize(px);
            let d = cam.rotation * Vector3::new(n.x, n.y, 1.0);
            let s = (h - 1.2) / d.z;
            let hit = cam.translation.vector + d * s;
            assert!((hit.xy() - o.center_xy).norm() < 1e-9);
        }
        let med = obstacle_noise_median(&PerceptionConfig::default(), 3.0, 1000, &mut rng(3));
        assert!(med < 0.05, "median {med}");
    }

    #[test]
    fn obstacle_parallel_rays_fail() {
        // the camera at the height of every keypoint cannot happen with
        // distinct heights, so fake it with identical pixels on the horizon
        let cam = camera_pose(&Vector3::new(0.0, 0.0, 1.0), 0.0);
        let k = KeypointSet {
            id: 0,
            kind: ObjectKind::Obstacle,
            points: vec![Vector2::new(212.0, 200.0); 3],
            t: 0.0,
        };
        assert!(estimate_obstacle(&k, &cam, &intr(), 0.0).is_err());
    }

    fn track1(x: f64, p: f64) -> KalmanTrack<1> {
        KalmanTrack {
            id: 0,
            x: SVector::<f64, 1>::new(x),
            p: SMatrix::<f64, 1, 1>::new(p),
            q: SVector::<f64, 1>::new(0.5),
            angle_index: None,
            last_update: 0.0,
        }
    }

    #[test]
    fn scalar_kalman_example() {
        let mut t = track1(0.0, 1.0);
        t.update(&SVector::<f64, 1>::new(1.0), &SMatrix::<f64, 1, 1>::new(1.0), 0.1).unwrap();
        assert!((t.x[0] - 0.5).abs() < 1e-15);
        assert!((t.p[(0, 0)] - 0.5).abs() < 1e-15);
        assert_eq!(t.last_update, 0.1);
    }

    #[test]
    fn kalman_limits() {
        let mut t = track1(0.0, 1.0);
        t.update(&SVector::<f64, 1>::new(1.0), &SMatrix::<f64, 1, 1>::new(1e12), 0.0).unwrap();
        assert!(t.x[0].abs() < 1e-11);
        let mut t = track1(0.0, 1.0);
        t.update(&SVector::<f64, 1>::new(1.0), &SMatrix::<f64, 1, 1>::new(1e-12), 0.0).unwrap();
        assert!((t.x[0] - 1.0).abs() < 1e-11);
        let mut t = track1(0.0, 1.0);
        assert!(t.update(&SVector::<f64, 1>::new(1.0), &SMatrix::<f64, 1, 1>::new(-1.0), 0.0).is_err());
    }

    #[test]
    fn predict_properties() {
        let g = GateTrack {
            id: 0,
            x: Vector4::new(1.0, 2.0, 3.0, 0.1),
            p: SMatrix::<f64, 4, 4>::identity() * 0.1,
            q: Vector4::new(0.5, 0.5, 0.5, 0.2),
            angle_index: Some(3),
            last_update: 0.0,
        };
        let mut a = g.clone();
        a.predict(0.0).unwrap();
        assert_eq!(a, g);
        let mut b = g.clone();
        b.predict(0.1).unwrap();
        assert!(b.p.trace() > g.p.trace());
        let mut c = g.clone();
        c.predict(0.05).unwrap();
        c.predict(0.05).unwrap();
        assert!((c.p - b.p).abs().max() < 1e-15);
        assert_eq!(b.x, g.x);
        assert!(g.clone().predict(-1.0).is_err());
    }

    #[test]
    fn yaw_innovation_wraps() {
        let mut g = GateTrack {
            id: 0,
            x: Vector4::new(0.0, 0.0, 0.0, 3.1),
            p: SMatrix::<f64, 4, 4>::identity(),
            q: Vector4::repeat(0.1),
            angle_index: Some(3),
            last_update: 0.0,
        };
        g.update(&Vector4::new(0.0, 0.0, 0.0, -3.1), &SMatrix::<f64, 4, 4>::identity(), 0.0).unwrap();
        // halfway along the short arc through pi
        assert!((g.x[3].abs() - std::f64::consts::PI).abs() < 1e-9);
    }

    #[test]
    fn association_examples() {
        let tracks = [Vector2::new(0.0, 0.0)];
        assert_eq!(associate(&tracks, &[Vector2::new(0.3, 0.0)], 0.8), vec![Some(0)]);
        assert_eq!(associate(&tracks, &[Vector2::new(2.0, 0.0)], 0.8), vec![None]);
        let tracks = [Vector2::new(0.0, 0.0), Vector2::new(1.0, 0.0)];
        let meas = [Vector2::new(1.1, 0.1), Vector2::new(-0.1, 0.05)];
        assert_eq!(associate(&tracks, &meas, 0.8), vec![Some(1), Some(0)]);
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for i in 0..=p.len() {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }

    proptest! {
        #[test]
        fn greedy_matches_brute_force_on_separated_objects(
            n in 1usize..=3,
            base in proptest::collection::vec((-10.0..10.0f64, -10.0..10.0f64), 3),
            jitter in proptest::collection::vec((-0.2..0.2f64, -0.2..0.2f64), 3),
            perm_seed in 0usize..6,
        ) {
            // well separated tracks, each measurement close to one track
            let tracks: Vec<Vector2<f64>> = (0..n)
                .map(|i| Vector2::new(base[i].0 + 30.0 * i as f64, base[i].1))
                .collect();
            let perms = permutations(n);
            let perm = &perms[perm_seed % perms.len()];
            let meas: Vec<Vector2<f64>> = perm
                .iter()
                .map(|&i| tracks[i] + Vector2::new(jitter[i].0, jitter[i].1))
                .collect();
            let greedy = associate(&tracks, &meas, 0.8);
            let best = perms
                .iter()
                .min_by(|a, b| {
                    let ca: f64 = a.iter().enumerate().map(|(m, &t)| (meas[m] - tracks[t]).norm()).sum();
                    let cb: f64 = b.iter().enumerate().map(|(m, &t)| (meas[m] - tracks[t]).norm()).sum();
                    ca.total_cmp(&cb)
                })
                .unwrap();
            let greedy: Vec<usize> = greedy.into_iter().map(|a| a.unwrap()).collect();
            prop_assert_eq!(&greedy, best);
        }

        #[test]
        fn covariance_stays_pd(steps in proptest::collection::vec((0.0..0.2f64, -3.0..3.0f64, 1e-4..10.0f64, proptest::bool::ANY), 1..200)) {
            let mut g = GateTrack {
                id: 0,
                x: Vector4::zeros(),
                p: SMatrix::<f64, 4, 4>::identity(),
                q: Vector4::new(0.5, 0.5, 0.5, 0.2),
                angle_index: Some(3),
                last_update: 0.0,
            };
            for (dt, z, r, do_update) in steps {
                if do_update {
                    let rm = SMatrix::<f64, 4, 4>::identity() * r;
                    g.update(&Vector4::repeat(z), &rm, 0.0).unwrap();
                } else {
                    g.predict(dt).unwrap();
                }
                prop_assert!(g.is_consistent());
            }
        }
    }

    #[test]
    fn tracker_spawns_and_drops() {
        let cfg = PerceptionConfig::default();
        let mut tr = Tracker::new(cfg, SMatrix::<f64, 4, 4>::identity() * 1e-3, Matrix2::identity() * 1e-3);
        let cam = camera_pose(&Vector3::zeros(), 0.0);
        let om = ObstacleMeasurement {
            position: Vector2::new(3.0, 0.0),
            range: 3.0,
        };
        let m = |t: f64, obs: Vec<(ObstacleMeasurement, f64)>| Measurements {
            t,
            camera: cam,
            gates: vec![],
            obstacles: obs,
        };
        tr.process(&m(0.0, vec![(om, 0.0)])).unwrap();
        assert_eq!(tr.obstacles.len(), 1);
        let far = ObstacleMeasurement {
            position: Vector2::new(3.0, 2.0),
            range: 3.0,
        };
        tr.process(&m(0.5, vec![(om, 0.0), (far, 0.0)])).unwrap();
        assert_eq!(tr.obstacles.len(), 2);
        tr.process(&m(1.2, vec![(far, 0.0)])).unwrap();
        assert_eq!(tr.obstacles.len(), 2);
        tr.process(&m(1.6, vec![(far, 0.0)])).unwrap();
        assert_eq!(tr.obstacles.len(), 1);
        assert!((tr.obstacles[0].x - far.position).norm() < 1e-3);
    }

    #[test]
    fn moving_gate_filter_beats_raw() {
        let cfg = PerceptionConfig::default();
        let run = moving_gate_tracking(&cfg, 0.3, 3000, &mut rng(4)).unwrap();
        assert!(run.filtered_rmse <= run.raw_rmse, "{run:?}");
        assert!(run.always_pd);
    }

    #[test]
    fn pipeline_is_deterministic() {
        use crate::world::{ObjectMotion, SceneMotion};
        use crate::dynamics::DroneState;
        let w = WorldState {
            drone: DroneState::at_rest(Vector3::new(-3.0, 0.0, 1.5), 0.0),
            gate: Some(Gate::new(Vector3::new(1.0, 0.0, 1.5), 0.0)),
            obstacles: vec![Obstacle::new(-1.0, 0.3, 0.5)],
            target: Vector3::new(3.0, 0.0, 1.5),
            target_size: 0.5,
            target_yaw: 0.0,
            gate_passed: false,
            t: 0.0,
            steps: 0,
            done: false,
            motion: SceneMotion {
                gate: ObjectMotion::Static,
                obstacles: ObjectMotion::Static,
                target: ObjectMotion::Static,
            },
            rng_seed: 0,
        };
        let run = || {
            let mut p = PerceptionPipeline::new(PerceptionConfig::default(), 7);
            let mut w = w.clone();
            for i in 0..60 {
                w.t = i as f64 * 0.02;
                p.tick(&w).unwrap();
            }
            (p.estimated_world(&w), p.log.clone())
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a.gate, b.gate);
        assert_eq!(la.len(), lb.len());
        let g = a.gate.unwrap();
        assert!((g.center - Vector3::new(1.0, 0.0, 1.5)).norm() < 0.1);
        assert_eq!(a.obstacles.len(), 1);
        assert!((a.obstacles[0].center_xy - Vector2::new(-1.0, 0.3)).norm() < 0.05);
    }
}
