//! Rigid (6 degree-of-freedom) registration by normalized cross-correlation.
//!
//! A [`RigidTransform`] maps points of the fixed grid into the moving
//! volume: `q = R (p - c) + c + t`, where `c` is the fixed grid centre and
//! `R = Rz(γ) · Ry(β) · Rx(α)`. Warping pulls values back through the map,
//! so `apply_transform(moving, t, dims)(p) = moving(t(p))`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::volume::Volume;

pub type Mat3 = [[f64; 3]; 3];

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    std::array::from_fn(|r| std::array::from_fn(|c| (0..3).map(|k| a[r][k] * b[k][c]).sum()))
}

fn transpose(a: &Mat3) -> Mat3 {
    std::array::from_fn(|r| std::array::from_fn(|c| a[c][r]))
}

fn matvec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|r| a[r][0] * v[0] + a[r][1] * v[1] + a[r][2] * v[2])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    /// Euler angles in degrees about axes 0, 1 and 2.
    pub rotation: [f64; 3],
    /// Translation in voxels of the fixed grid.
    pub translation: [f64; 3],
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: [0.0; 3],
            translation: [0.0; 3],
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        RigidTransform {
            rotation: [0.0; 3],
            translation: t,
        }
    }

    pub fn new(rotation: [f64; 3], translation: [f64; 3]) -> Self {
        RigidTransform {
            rotation,
            translation,
        }
    }

    fn from_params(p: &[f64; 6]) -> Self {
        RigidTransform::new([p[0], p[1], p[2]], [p[3], p[4], p[5]])
    }

    fn params(&self) -> [f64; 6] {
        let [a, b, c] = self.rotation;
        let [x, y, z] = self.translation;
        [a, b, c, x, y, z]
    }

    pub fn matrix(&self) -> Mat3 {
        let [a, b, g] = self.rotation.map(f64::to_radians);
        let (sa, ca) = a.sin_cos();
        let (sb, cb) = b.sin_cos();
        let (sg, cg) = g.sin_cos();
        let rx = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
        let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
        let rz = [[cg, -sg, 0.0], [sg, cg, 0.0], [0.0, 0.0, 1.0]];
        matmul(&rz, &matmul(&ry, &rx))
    }

    /// Recovers Euler angles (degrees) from a rotation matrix built as
    /// `Rz · Ry · Rx`.
    pub fn angles_from_matrix(m: &Mat3) -> [f64; 3] {
        let sb = (-m[2][0]).clamp(-1.0, 1.0);
        let b = sb.asin();
        let (a, g) = if sb.abs() < 1.0 - 1e-12 {
            (m[2][1].atan2(m[2][2]), m[1][0].atan2(m[0][0]))
        } else {
            // gimbal lock: fold all roll into axis 0
            ((-m[1][2]).atan2(m[1][1]), 0.0)
        };
        [a.to_degrees(), b.to_degrees(), g.to_degrees()]
    }

    /// Maps a fixed-grid point about the rotation centre `center`.
    pub fn map_point(&self, p: [f64; 3], center: [f64; 3]) -> [f64; 3] {
        let r = self.matrix();
        let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
        let q = matvec(&r, d);
        std::array::from_fn(|a| q[a] + center[a] + self.translation[a])
    }

    /// Inverse about the same rotation centre.
    pub fn inverse(&self) -> Self {
        let rt = transpose(&self.matrix());
        let t = matvec(&rt, self.translation);
        RigidTransform {
            rotation: Self::angles_from_matrix(&rt),
            translation: [-t[0], -t[1], -t[2]],
        }
    }

    /// `self.compose(other)` maps `p` to `self(other(p))`.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        let ra = self.matrix();
        let rb = other.matrix();
        let r = matmul(&ra, &rb);
        let tb = matvec(&ra, other.translation);
        RigidTransform {
            rotation: Self::angles_from_matrix(&r),
            translation: std::array::from_fn(|a| tb[a] + self.translation[a]),
        }
    }

    /// Expresses the transform in a grid downsampled by `factor` with
    /// aligned centres.
    fn scaled(&self, factor: f64) -> Self {
        RigidTransform {
            rotation: self.rotation,
            translation: self.translation.map(|t| t / factor),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, format!("{self}\n"))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        std::fs::read_to_string(path)?.parse()
    }
}

/// Six whitespace-separated numbers: three angles (degrees) then three
/// translations (voxels).
impl fmt::Display for RigidTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.params();
        let parts: Vec<String> = p.iter().map(|v| format!("{v:?}")).collect();
        write!(f, "{}", parts.join(" "))
    }
}

impl FromStr for RigidTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let vals: Vec<f64> = s
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| Error::parse("rigid transform", e.to_string())))
            .collect::<Result<_>>()?;
        let p: [f64; 6] = vals
            .try_into()
            .map_err(|v: Vec<f64>| Error::parse("rigid transform", format!("expected 6 numbers, got {}", v.len())))?;
        Ok(RigidTransform::from_params(&p))
    }
}

/// Warps `v` onto a grid of `target` voxels, sampling `v` at `t(p)` with
/// trilinear interpolation. The rotation centre is the target grid centre.
pub fn apply_transform(v: &Volume, t: &RigidTransform, target: [usize; 3]) -> Result<Volume> {
    let center: [f64; 3] = std::array::from_fn(|a| (target[a] as f64 - 1.0) / 2.0);
    let r = t.matrix();
    let mut data = Vec::with_capacity(target.iter().product());
    for k in 0..target[2] {
        let dz = k as f64 - center[2];
        for j in 0..target[1] {
            let dy = j as f64 - center[1];
            let base: [f64; 3] = std::array::from_fn(|a| {
                r[a][1] * dy + r[a][2] * dz + center[a] + t.translation[a]
            });
            for i in 0..target[0] {
                let dx = i as f64 - center[0];
                let q = [
                    base[0] + r[0][0] * dx,
                    base[1] + r[1][0] * dx,
                    base[2] + r[2][0] * dx,
                ];
                data.push(v.sample(q) as f32);
            }
        }
    }
    Volume::new(target, v.spacing(), data).map(|w| w.with_origin(v.origin()))
}

/// Pearson correlation of two equally sized voxel buffers.
pub fn ncc(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let (mut sa, mut sb) = (0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        sa += x as f64;
        sb += y as f64;
    }
    let (ma, mb) = (sa / n, sb / n);
    let (mut cov, mut va, mut vb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let dx = x as f64 - ma;
        let dy = y as f64 - mb;
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// Box-filter downsampling by an integer factor. Partial blocks at the upper
/// edges are averaged over the voxels they contain.
pub fn downsample(v: &Volume, factor: usize) -> Volume {
    if factor <= 1 {
        return v.clone();
    }
    let d = v.dims();
    let out: [usize; 3] = std::array::from_fn(|a| d[a].div_ceil(factor).max(1));
    let mut sums = vec![0f64; out.iter().product()];
    let mut counts = vec![0u32; sums.len()];
    for k in 0..d[2] {
        let ok = k / factor;
        for j in 0..d[1] {
            let oj = j / factor;
            for i in 0..d[0] {
                let o = i / factor + out[0] * (oj + out[1] * ok);
                sums[o] += v.get(i, j, k) as f64;
                counts[o] += 1;
            }
        }
    }
    let data = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| (s / c as f64) as f32)
        .collect();
    let spacing = v.spacing().map(|s| s * factor as f64);
    Volume::new(out, spacing, data).expect("downsampled dims are positive")
}

#[derive(Debug, Clone)]
pub struct RegistrationConfig {
    /// Pyramid downsampling factors, coarsest first.
    pub levels: Vec<usize>,
    /// Sweep budget per pyramid level.
    pub max_iterations: usize,
    /// Initial step at the coarsest level: degrees, then voxels of that level.
    pub initial_rotation_step: f64,
    pub initial_translation_step: f64,
    /// Search stops once both steps fall below these (full-resolution units).
    pub min_rotation_step: f64,
    pub min_translation_step: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            levels: vec![4, 2, 1],
            max_iterations: 200,
            initial_rotation_step: 4.0,
            initial_translation_step: 2.0,
            min_rotation_step: 0.05,
            min_translation_step: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    pub warped: Volume,
    pub ncc_before: f64,
    pub ncc_after: f64,
    /// False when some level exhausted its iteration budget before the step
    /// sizes shrank below tolerance; `transform` is then the best found.
    pub converged: bool,
    pub iterations: Vec<usize>,
}

struct LevelOutcome {
    transform: RigidTransform,
    iterations: usize,
    converged: bool,
}

fn optimize_level(
    fixed: &Volume,
    moving: &Volume,
    start: RigidTransform,
    rot_step: f64,
    trans_step: f64,
    min_rot: f64,
    min_trans: f64,
    budget: usize,
) -> LevelOutcome {
    let dims = fixed.dims();
    let score = |t: &RigidTransform| {
        let w = apply_transform(moving, t, dims).expect("fixed dims are valid");
        ncc(fixed.data(), w.data())
    };
    let mut params = start.params();
    let mut best = score(&start);
    let mut steps = [rot_step, rot_step, rot_step, trans_step, trans_step, trans_step];
    let mins = [min_rot, min_rot, min_rot, min_trans, min_trans, min_trans];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < budget {
        iterations += 1;
        let mut improved = false;
        for d in 0..6 {
            for dir in [1.0, -1.0] {
                let mut trial = params;
                trial[d] += dir * steps[d];
                let s = score(&RigidTransform::from_params(&trial));
                if s > best {
                    best = s;
                    params = trial;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            for (s, m) in steps.iter_mut().zip(&mins) {
                if *s >= *m {
                    *s *= 0.5;
                }
            }
            if steps.iter().zip(&mins).all(|(s, m)| s < m) {
                converged = true;
                break;
            }
        }
    }
    LevelOutcome {
        transform: RigidTransform::from_params(&params),
        iterations,
        converged,
    }
}

/// Estimates the rigid transform aligning `moving` to `fixed` and returns it
/// together with `moving` warped onto the fixed grid.
pub fn register(fixed: &Volume, moving: &Volume) -> Result<RegistrationResult> {
    register_with(fixed, moving, &RegistrationConfig::default())
}

pub fn register_with(
    fixed: &Volume,
    moving: &Volume,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult> {
    if cfg.levels.is_empty() || cfg.levels.iter().any(|&f| f == 0) {
        return Err(Error::InvalidArgument("pyramid levels must be positive".into()));
    }
    let identity_warp = apply_transform(moving, &RigidTransform::identity(), fixed.dims())?;
    let ncc_before = ncc(fixed.data(), identity_warp.data());

    let mut current = RigidTransform::identity();
    let mut converged = true;
    let mut iterations = Vec::with_capacity(cfg.levels.len());
    for (li, &factor) in cfg.levels.iter().enumerate() {
        let f = factor as f64;
        let fixed_l = downsample(fixed, factor);
        let moving_l = downsample(moving, factor);
        // Finer levels only refine the coarse estimate.
        let (rot_step, trans_step) = if li == 0 {
            (cfg.initial_rotation_step, cfg.initial_translation_step)
        } else {
            (cfg.initial_rotation_step / 4f64.powi(li as i32), 1.0)
        };
        let outcome = optimize_level(
            &fixed_l,
            &moving_l,
            current.scaled(f),
            rot_step,
            trans_step,
            cfg.min_rotation_step,
            cfg.min_translation_step / f,
            cfg.max_iterations,
        );
        current = RigidTransform {
            rotation: outcome.transform.rotation,
            translation: outcome.transform.translation.map(|t| t * f),
        };
        converged &= outcome.converged;
        iterations.push(outcome.iterations);
    }

    let warped = apply_transform(moving, &current, fixed.dims())?;
    let mut ncc_after = ncc(fixed.data(), warped.data());
    let mut transform = current;
    let mut warped = warped;
    if ncc_after < ncc_before {
        transform = RigidTransform::identity();
        warped = identity_warp;
        ncc_after = ncc_before;
    }
    Ok(RegistrationResult {
        transform,
        warped,
        ncc_before,
        ncc_after,
        converged,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: [f64; 3], b: [f64; 3], tol: f64) {
        for i in 0..3 {
            assert!((a[i] - b[i]).abs() < tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn rotation_matrices_are_orthonormal() {
        let t = RigidTransform::new([13.0, -47.0, 101.0], [0.0; 3]);
        let r = t.matrix();
        let rrt = matmul(&r, &transpose(&r));
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((rrt[i][j] - e).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn euler_round_trip() {
        let angles = [7.5, -12.0, 33.0];
        let t = RigidTransform::new(angles, [0.0; 3]);
        assert_close(RigidTransform::angles_from_matrix(&t.matrix()), angles, 1e-9);
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let t = RigidTransform::new([8.0, -3.0, 5.5], [5.0, -3.0, 2.0]);
        for id in [t.compose(&t.inverse()), t.inverse().compose(&t)] {
            for p in id.params() {
                assert!(p.abs() < 1e-6, "{id:?}");
            }
        }
        let c = [10.0, 20.0, 30.0];
        let p = [1.0, 2.0, 3.0];
        assert_close(t.inverse().map_point(t.map_point(p, c), c), p, 1e-9);
    }

    #[test]
    fn text_record_round_trip() {
        let t = RigidTransform::new([1.25, -0.5, 3.0], [0.1, 7.0, -2.5]);
        let parsed: RigidTransform = t.to_string().parse().unwrap();
        assert_eq!(parsed, t);
        assert!("1 2 3".parse::<RigidTransform>().is_err());
        assert!("a b c d e f".parse::<RigidTransform>().is_err());
    }

    #[test]
    fn identity_warp_is_plain_copy() {
        let v = Volume::from_fn([6, 5, 4], [1.0; 3], |i, j, k| (i * j + k) as f32).unwrap();
        let w = apply_transform(&v, &RigidTransform::identity(), v.dims()).unwrap();
        assert_eq!(w.data(), v.data());
    }

    #[test]
    fn unit_translation_shifts_ramp() {
        let v = Volume::from_fn([12, 6, 6], [1.0; 3], |i, _, _| 0.25 * i as f32 + 1.0).unwrap();
        let w = apply_transform(&v, &RigidTransform::translation([1.0, 0.0, 0.0]), v.dims())
            .unwrap();
        for k in 0..6 {
            for j in 0..6 {
                for i in 0..11 {
                    assert!((w.get(i, j, k) - v.get(i, j, k) - 0.25).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn ncc_properties() {
        let a: Vec<f32> = (0..100).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = a.iter().map(|x| 3.0 * x + 2.0).collect();
        assert!((ncc(&a, &b) - 1.0).abs() < 1e-9);
        let c: Vec<f32> = a.iter().map(|x| -x).collect();
        assert!((ncc(&a, &c) + 1.0).abs() < 1e-9);
        assert_eq!(ncc(&a, &vec![1.0; 100]), 0.0);
    }

    #[test]
    fn box_downsample_averages_blocks() {
        let v = Volume::from_fn([4, 4, 4], [1.0; 3], |i, _, _| i as f32).unwrap();
        let d = downsample(&v, 2);
        assert_eq!(d.dims(), [2, 2, 2]);
        assert_eq!(d.get(0, 0, 0), 0.5);
        assert_eq!(d.get(1, 1, 1), 2.5);
        assert_eq!(d.spacing(), [2.0; 3]);
    }
}
