//! Similarity (conformal) transforms of the plane and image coordinate grids.
//!
//! Image coordinates live in a normalized `[-1, 1]²` frame with pixel-center
//! alignment: the center of pixel column `j` of a `W`-wide image sits at
//! `x = (2j + 1) / W - 1`, and rows are handled the same way with `y`
//! increasing downwards.
//!
//! [`SimilarityPose`] is the plain `f64` form used by data generation and
//! evaluation. [`AffineBatch`] holds the same transforms as batched tensors
//! so they can be differentiated through during training.

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor};
use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scales at or below this are treated as degenerate when inverting.
pub const SCALE_EPS: f64 = 1e-8;

/// Translation, rotation and isotropic scale mapping part-centric
/// coordinates into image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityPose {
    pub tx: f64,
    pub ty: f64,
    /// Radians, stored unwrapped.
    pub rot: f64,
    pub scale: f64,
}

/// Homogeneous 3×3 form of a [`SimilarityPose`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseMatrix(pub Matrix3<f64>);

impl Default for SimilarityPose {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl SimilarityPose {
    pub const IDENTITY: SimilarityPose = SimilarityPose {
        tx: 0.0,
        ty: 0.0,
        rot: 0.0,
        scale: 1.0,
    };

    pub fn new(tx: f64, ty: f64, rot: f64, scale: f64) -> Result<Self> {
        let pose = SimilarityPose { tx, ty, rot, scale };
        pose.validate()?;
        if scale <= 0.0 {
            return Err(Error::DegeneratePose(scale));
        }
        Ok(pose)
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        SimilarityPose {
            tx,
            ty,
            ..Self::IDENTITY
        }
    }

    fn validate(&self) -> Result<()> {
        if [self.tx, self.ty, self.rot, self.scale]
            .iter()
            .all(|v| v.is_finite())
        {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("non-finite pose {self:?}")))
        }
    }

    pub fn to_matrix(&self) -> Result<PoseMatrix> {
        self.validate()?;
        let (s, c) = self.rot.sin_cos();
        let k = self.scale;
        Ok(PoseMatrix(Matrix3::new(
            k * c,
            -k * s,
            self.tx,
            k * s,
            k * c,
            self.ty,
            0.0,
            0.0,
            1.0,
        )))
    }

    pub fn inverse(&self) -> Result<Self> {
        self.validate()?;
        if self.scale <= SCALE_EPS {
            return Err(Error::DegeneratePose(self.scale));
        }
        let inv_scale = 1.0 / self.scale;
        let (s, c) = self.rot.sin_cos();
        // -(1/k) R(-rot) t
        let tx = -inv_scale * (c * self.tx + s * self.ty);
        let ty = -inv_scale * (-s * self.tx + c * self.ty);
        Ok(SimilarityPose {
            tx,
            ty,
            rot: -self.rot,
            scale: inv_scale,
        })
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &SimilarityPose) -> Result<Self> {
        self.validate()?;
        other.validate()?;
        let [tx, ty] = self.apply_point([other.tx, other.ty]);
        Ok(SimilarityPose {
            tx,
            ty,
            rot: wrap_angle(self.rot + other.rot),
            scale: self.scale * other.scale,
        })
    }

    pub fn apply_point(&self, [x, y]: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rot.sin_cos();
        let k = self.scale;
        [
            k * (c * x - s * y) + self.tx,
            k * (s * x + c * y) + self.ty,
        ]
    }

    pub fn apply(&self, points: &[[f64; 2]]) -> Vec<[f64; 2]> {
        points.iter().map(|&p| self.apply_point(p)).collect()
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.tx, self.ty, self.rot, self.scale]
    }

    pub fn from_array([tx, ty, rot, scale]: [f64; 4]) -> Self {
        SimilarityPose { tx, ty, rot, scale }
    }
}

impl PoseMatrix {
    pub fn apply_point(&self, [x, y]: [f64; 2]) -> [f64; 2] {
        let m = &self.0;
        [
            m[(0, 0)] * x + m[(0, 1)] * y + m[(0, 2)],
            m[(1, 0)] * x + m[(1, 1)] * y + m[(1, 2)],
        ]
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

/// Pixel-center coordinates of an image in the normalized frame, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordGrid {
    pub height: usize,
    pub width: usize,
    pub coords: Vec<[f64; 2]>,
}

pub fn make_grid(height: usize, width: usize) -> Result<CoordGrid> {
    CoordGrid::new(height, width)
}

impl CoordGrid {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid dimensions must be positive, got {height}x{width}"
            )));
        }
        let mut coords = Vec::with_capacity(height * width);
        for i in 0..height {
            let y = pixel_center(i, height);
            for j in 0..width {
                coords.push([pixel_center(j, width), y]);
            }
        }
        Ok(CoordGrid {
            height,
            width,
            coords,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn at(&self, row: usize, col: usize) -> [f64; 2] {
        self.coords[row * self.width + col]
    }

    /// Normalized displacement to pixel units.
    pub fn to_pixel_displacement(&self, [dx, dy]: [f64; 2]) -> [f64; 2] {
        [dx * self.width as f64 / 2.0, dy * self.height as f64 / 2.0]
    }

    /// Pixel-unit displacement to normalized units.
    pub fn to_normalized_displacement(&self, [dx, dy]: [f64; 2]) -> [f64; 2] {
        [dx * 2.0 / self.width as f64, dy * 2.0 / self.height as f64]
    }

    /// Normalized position to fractional pixel index coordinates (column, row).
    pub fn to_pixel_position(&self, [x, y]: [f64; 2]) -> [f64; 2] {
        [
            (x + 1.0) * self.width as f64 / 2.0 - 0.5,
            (y + 1.0) * self.height as f64 / 2.0 - 0.5,
        ]
    }

    /// `(x, y)` coordinate rows, each of shape `(1, H*W)`.
    pub fn tensors(&self, device: &Device, dtype: DType) -> Result<(Tensor, Tensor)> {
        let n = self.len();
        let xs: Vec<f64> = self.coords.iter().map(|c| c[0]).collect();
        let ys: Vec<f64> = self.coords.iter().map(|c| c[1]).collect();
        let x = Tensor::from_vec(xs, (1, n), device)?.to_dtype(dtype)?;
        let y = Tensor::from_vec(ys, (1, n), device)?.to_dtype(dtype)?;
        Ok((x, y))
    }
}

fn pixel_center(index: usize, size: usize) -> f64 {
    (2 * index + 1) as f64 / size as f64 - 1.0
}

/// A batch of similarity transforms stored as their matrix entries, each a
/// tensor of shape `(N, 1)` so that they broadcast against `(N, P)` or
/// `(1, P)` coordinate rows.
#[derive(Debug, Clone)]
pub struct AffineBatch {
    pub m00: Tensor,
    pub m01: Tensor,
    pub m10: Tensor,
    pub m11: Tensor,
    pub t0: Tensor,
    pub t1: Tensor,
}

fn column(poses: &Tensor, i: usize) -> Result<Tensor> {
    Ok(poses.narrow(1, i, 1)?)
}

impl AffineBatch {
    /// `poses` has shape `(N, 4)` with columns `(tx, ty, rot, scale)`.
    pub fn from_poses(poses: &Tensor) -> Result<Self> {
        check_pose_tensor(poses)?;
        let rot = column(poses, 2)?;
        let scale = column(poses, 3)?;
        let c = (rot.cos()? * &scale)?;
        let s = (rot.sin()? * &scale)?;
        Ok(AffineBatch {
            m00: c.clone(),
            m01: s.neg()?,
            m10: s,
            m11: c,
            t0: column(poses, 0)?,
            t1: column(poses, 1)?,
        })
    }

    /// Inverse transforms of `poses`: `(1/k) R(-rot) (u - t)`.
    pub fn inverse_from_poses(poses: &Tensor) -> Result<Self> {
        check_pose_tensor(poses)?;
        let rot = column(poses, 2)?;
        let inv_scale = column(poses, 3)?.recip()?;
        let c = (rot.cos()? * &inv_scale)?;
        let s = (rot.sin()? * &inv_scale)?;
        let tx = column(poses, 0)?;
        let ty = column(poses, 1)?;
        let t0 = ((&c * &tx)? + (&s * &ty)?)?.neg()?;
        let t1 = ((&c * &ty)? - (&s * &tx)?)?.neg()?;
        Ok(AffineBatch {
            m00: c.clone(),
            m01: s.clone(),
            m10: s.neg()?,
            m11: c,
            t0,
            t1,
        })
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &AffineBatch) -> Result<Self> {
        let mul_add = |a: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor| -> Result<Tensor> {
            Ok(((a * b)? + (c * d)?)?)
        };
        Ok(AffineBatch {
            m00: mul_add(&self.m00, &other.m00, &self.m01, &other.m10)?,
            m01: mul_add(&self.m00, &other.m01, &self.m01, &other.m11)?,
            m10: mul_add(&self.m10, &other.m00, &self.m11, &other.m10)?,
            m11: mul_add(&self.m10, &other.m01, &self.m11, &other.m11)?,
            t0: (mul_add(&self.m00, &other.t0, &self.m01, &other.t1)? + &self.t0)?,
            t1: (mul_add(&self.m10, &other.t0, &self.m11, &other.t1)? + &self.t1)?,
        })
    }

    /// Applies each transform to coordinate rows `x`, `y` of shape `(1, P)`
    /// or `(N, P)`; returns `(N, P)` rows.
    pub fn apply(&self, x: &Tensor, y: &Tensor) -> Result<(Tensor, Tensor)> {
        let ox = (x.broadcast_mul(&self.m00)? + y.broadcast_mul(&self.m01)?)?
            .broadcast_add(&self.t0)?;
        let oy = (x.broadcast_mul(&self.m10)? + y.broadcast_mul(&self.m11)?)?
            .broadcast_add(&self.t1)?;
        Ok((ox, oy))
    }
}

fn check_pose_tensor(poses: &Tensor) -> Result<()> {
    match poses.dims() {
        [_, 4] => Ok(()),
        d => Err(Error::Shape(format!("expected poses of shape (N, 4), got {d:?}"))),
    }
}

/// Applies `(N, 4)` poses to `(P, 2)` points, giving `(N, P, 2)`.
pub fn apply_tensor(poses: &Tensor, points: &Tensor) -> Result<Tensor> {
    let (x, y) = split_points(points)?;
    let (ox, oy) = AffineBatch::from_poses(poses)?.apply(&x, &y)?;
    Ok(Tensor::stack(&[ox, oy], 2)?)
}

fn split_points(points: &Tensor) -> Result<(Tensor, Tensor)> {
    match points.dims() {
        [p, 2] => Ok((
            points.narrow(1, 0, 1)?.reshape((1, *p))?,
            points.narrow(1, 1, 1)?.reshape((1, *p))?,
        )),
        d => Err(Error::Shape(format!("expected points of shape (P, 2), got {d:?}"))),
    }
}

/// Fails if any scale in an `(N, 4)` pose tensor is at or below [`SCALE_EPS`].
pub fn check_scales(poses: &Tensor) -> Result<()> {
    check_pose_tensor(poses)?;
    let min = column(poses, 3)?
        .to_dtype(DType::F64)?
        .flatten_all()?
        .min(0)?
        .to_scalar::<f64>()?;
    if !(min > SCALE_EPS) {
        return Err(Error::DegeneratePose(min));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use candle_core::Var;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn assert_mat_eq(a: &Matrix3<f64>, b: &Matrix3<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = tol);
        }
    }

    #[test]
    fn matrix_examples() {
        let id = SimilarityPose::IDENTITY.to_matrix().unwrap();
        assert_mat_eq(&id.0, &Matrix3::identity(), 0.0);

        let t = SimilarityPose::new(2.0, 3.0, 0.0, 1.0).unwrap();
        assert_eq!(t.to_matrix().unwrap().apply_point([0.0, 0.0]), [2.0, 3.0]);

        let r = SimilarityPose::new(0.0, 0.0, FRAC_PI_2, 2.0).unwrap();
        let p = r.to_matrix().unwrap().apply_point([1.0, 0.0]);
        assert_abs_diff_eq!(p[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn non_finite_pose_rejected() {
        let bad = SimilarityPose::from_array([f64::NAN, 0.0, 0.0, 1.0]);
        assert!(matches!(bad.to_matrix(), Err(Error::InvalidArgument(_))));
        assert!(SimilarityPose::new(0.0, 0.0, f64::INFINITY, 1.0).is_err());
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(
            SimilarityPose::IDENTITY.inverse().unwrap(),
            SimilarityPose {
                rot: -0.0,
                ..SimilarityPose::IDENTITY
            }
        );
        let inv = SimilarityPose::translation(2.0, 0.0).inverse().unwrap();
        assert_abs_diff_eq!(inv.tx, -2.0);
        assert_abs_diff_eq!(inv.ty, 0.0);
        assert_abs_diff_eq!(inv.scale, 1.0);

        let p = SimilarityPose::new(1.0, 1.0, FRAC_PI_2, 2.0).unwrap();
        let m = p.to_matrix().unwrap().0;
        let expected = m.try_inverse().unwrap();
        let got = p.inverse().unwrap().to_matrix().unwrap().0;
        assert_mat_eq(&got, &expected, 1e-12);
        assert_mat_eq(&(got * m), &Matrix3::identity(), 1e-12);
    }

    #[test]
    fn degenerate_inverse() {
        let p = SimilarityPose::from_array([0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(p.inverse(), Err(Error::DegeneratePose(_))));
    }

    #[test]
    fn compose_examples() {
        let p = SimilarityPose::new(0.3, -0.2, 0.7, 1.5).unwrap();
        let c = p.compose(&SimilarityPose::IDENTITY).unwrap();
        assert_mat_eq(&c.to_matrix().unwrap().0, &p.to_matrix().unwrap().0, 1e-12);

        let id = p.compose(&p.inverse().unwrap()).unwrap();
        assert_mat_eq(&id.to_matrix().unwrap().0, &Matrix3::identity(), 1e-12);

        let a = SimilarityPose::translation(1.0, 0.0);
        let b = SimilarityPose::new(0.0, 0.0, PI, 1.0).unwrap();
        let ab = a.compose(&b).unwrap();
        let expected = a.to_matrix().unwrap().0 * b.to_matrix().unwrap().0;
        assert_mat_eq(&ab.to_matrix().unwrap().0, &expected, 1e-12);
        assert_abs_diff_eq!(ab.scale, 1.0);
        assert_abs_diff_eq!(ab.rot, PI);
    }

    #[test]
    fn wrap_angle_range() {
        assert_abs_diff_eq!(wrap_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(-PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(0.5), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(-2.5 * PI), -0.5 * PI, epsilon = 1e-12);
    }

    #[test]
    fn apply_examples() {
        let pts = [[0.1, 0.2], [-3.0, 4.0]];
        assert_eq!(SimilarityPose::IDENTITY.apply(&pts), pts.to_vec());
        assert_eq!(
            SimilarityPose::translation(0.5, 0.0).apply(&[[0.0, 0.0]]),
            vec![[0.5, 0.0]]
        );
    }

    #[test]
    fn apply_matches_matrix_multiply() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pose = SimilarityPose::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-PI..PI),
            rng.random_range(0.2..3.0),
        )
        .unwrap();
        let m = pose.to_matrix().unwrap().0;
        let pts: Vec<[f64; 2]> = (0..100)
            .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
            .collect();
        for (p, q) in pts.iter().zip(pose.apply(&pts)) {
            let h = m * nalgebra::Vector3::new(p[0], p[1], 1.0);
            assert!((h[0] - q[0]).abs() < 1e-6 && (h[1] - q[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn grid_examples() {
        let g = make_grid(1, 1).unwrap();
        assert_eq!(g.coords, vec![[0.0, 0.0]]);

        let g = make_grid(2, 2).unwrap();
        assert_eq!(
            g.coords,
            vec![[-0.5, -0.5], [0.5, -0.5], [-0.5, 0.5], [0.5, 0.5]]
        );

        let g = make_grid(4, 8).unwrap();
        // linspace over pixel centers
        for i in 0..4 {
            for j in 0..8 {
                let x = -1.0 + 1.0 / 8.0 + j as f64 * (2.0 / 8.0);
                let y = -1.0 + 1.0 / 4.0 + i as f64 * (2.0 / 4.0);
                assert_abs_diff_eq!(g.at(i, j)[0], x, epsilon = 1e-12);
                assert_abs_diff_eq!(g.at(i, j)[1], y, epsilon = 1e-12);
            }
        }
        assert_abs_diff_eq!(g.at(0, 1)[0] - g.at(0, 0)[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(g.at(1, 0)[1] - g.at(0, 0)[1], 0.5, epsilon = 1e-12);
        assert_eq!(g.at(3, 7), [1.0 - 1.0 / 8.0, 1.0 - 1.0 / 4.0]);

        assert!(matches!(make_grid(0, 3), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn pixel_conversions() {
        let g = make_grid(4, 8).unwrap();
        assert_eq!(g.to_pixel_position(g.at(2, 5)), [5.0, 2.0]);
        assert_eq!(g.to_pixel_displacement([0.25, 0.5]), [1.0, 1.0]);
        assert_eq!(g.to_normalized_displacement([1.0, 1.0]), [0.25, 0.5]);
    }

    fn pose_strategy() -> impl Strategy<Value = SimilarityPose> {
        (-2.0..2.0f64, -2.0..2.0f64, -10.0..10.0f64, 0.05..5.0f64)
            .prop_map(|(tx, ty, rot, scale)| SimilarityPose { tx, ty, rot, scale })
    }

    proptest! {
        #[test]
        fn round_trip(p in pose_strategy(), x in -3.0..3.0f64, y in -3.0..3.0f64) {
            let inv = p.inverse().unwrap();
            let back = inv.apply_point(p.apply_point([x, y]));
            prop_assert!((back[0] - x).abs() < 1e-5 && (back[1] - y).abs() < 1e-5);
        }

        #[test]
        fn conformal_block(p in pose_strategy()) {
            let m = p.to_matrix().unwrap().0;
            let block = m.fixed_view::<2, 2>(0, 0);
            let mtm = block.transpose() * block;
            let s2 = p.scale * p.scale;
            prop_assert!((mtm[(0, 0)] - s2).abs() < 1e-6 * s2.max(1.0));
            prop_assert!((mtm[(1, 1)] - s2).abs() < 1e-6 * s2.max(1.0));
            prop_assert!(mtm[(0, 1)].abs() < 1e-6 * s2.max(1.0));
            prop_assert_eq!(m.row(2).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 1.0]);
        }

        #[test]
        fn associativity(a in pose_strategy(), b in pose_strategy(), c in pose_strategy()) {
            let l = a.compose(&b).unwrap().compose(&c).unwrap().to_matrix().unwrap().0;
            let r = a.compose(&b.compose(&c).unwrap()).unwrap().to_matrix().unwrap().0;
            let tol = 1e-5 * l.abs().max().max(1.0);
            for (x, y) in l.iter().zip(r.iter()) {
                prop_assert!((x - y).abs() < tol);
            }
        }

        #[test]
        fn compose_is_matrix_product(a in pose_strategy(), b in pose_strategy()) {
            let ab = a.compose(&b).unwrap();
            let expected = a.to_matrix().unwrap().0 * b.to_matrix().unwrap().0;
            let got = ab.to_matrix().unwrap().0;
            for (x, y) in got.iter().zip(expected.iter()) {
                prop_assert!((x - y).abs() < 1e-6 * expected.abs().max().max(1.0));
            }
            prop_assert!((ab.scale - a.scale * b.scale).abs() < 1e-12 * ab.scale.max(1.0));
            prop_assert!(ab.rot > -PI && ab.rot <= PI);
        }
    }

    fn pose_tensor(poses: &[SimilarityPose]) -> Tensor {
        let data: Vec<f64> = poses.iter().flat_map(|p| p.as_array()).collect();
        Tensor::from_vec(data, (poses.len(), 4), &Device::Cpu).unwrap()
    }

    #[test]
    fn tensor_transforms_match_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut rand_pose = || SimilarityPose {
            tx: rng.random_range(-1.0..1.0),
            ty: rng.random_range(-1.0..1.0),
            rot: rng.random_range(-PI..PI),
            scale: rng.random_range(0.3..2.0),
        };
        let a: Vec<_> = (0..3).map(|_| rand_pose()).collect();
        let b: Vec<_> = (0..3).map(|_| rand_pose()).collect();
        let grid = make_grid(4, 5).unwrap();
        let (x, y) = grid.tensors(&Device::Cpu, DType::F64).unwrap();

        let fwd = AffineBatch::from_poses(&pose_tensor(&a)).unwrap();
        let inv = AffineBatch::inverse_from_poses(&pose_tensor(&b)).unwrap();
        let (ox, oy) = fwd.compose(&inv).unwrap().apply(&x, &y).unwrap();
        let ox: Vec<Vec<f64>> = ox.to_vec2().unwrap();
        let oy: Vec<Vec<f64>> = oy.to_vec2().unwrap();
        for n in 0..3 {
            let t = a[n].compose(&b[n].inverse().unwrap()).unwrap();
            for (p, c) in grid.coords.iter().enumerate() {
                let e = t.apply_point(*c);
                assert_abs_diff_eq!(ox[n][p], e[0], epsilon = 1e-12);
                assert_abs_diff_eq!(oy[n][p], e[1], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn check_scales_rejects_degenerate() {
        let ok = pose_tensor(&[SimilarityPose::IDENTITY]);
        assert!(check_scales(&ok).is_ok());
        let bad = pose_tensor(&[SimilarityPose::from_array([0.0, 0.0, 0.0, 0.0])]);
        assert!(matches!(check_scales(&bad), Err(Error::DegeneratePose(_))));
    }

    #[test]
    fn apply_gradient_matches_finite_differences() {
        let pose = SimilarityPose::new(0.3, -0.4, 0.9, 1.3).unwrap();
        let pts = [[0.5, -0.25], [-0.8, 0.6], [0.1, 0.9]];
        let weights = [[0.7, -1.1], [0.4, 0.2], [-0.5, 1.5]];
        // scalar objective: weighted sum of transformed coordinates
        let objective = |p: &SimilarityPose| -> f64 {
            p.apply(&pts)
                .iter()
                .zip(&weights)
                .map(|(q, w)| q[0] * w[0] + q[1] * w[1])
                .sum()
        };

        let var = Var::from_tensor(&pose_tensor(&[pose])).unwrap();
        let points = Tensor::new(&pts, &Device::Cpu).unwrap();
        let w = Tensor::new(&weights, &Device::Cpu).unwrap().unsqueeze(0).unwrap();
        let out = apply_tensor(var.as_tensor(), &points).unwrap();
        let loss = (out * w).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let g: Vec<Vec<f64>> = grads.get(&var).unwrap().to_vec2().unwrap();

        let h = 1e-6;
        for i in 0..4 {
            let mut plus = pose.as_array();
            let mut minus = pose.as_array();
            plus[i] += h;
            minus[i] -= h;
            let fd = (objective(&SimilarityPose::from_array(plus))
                - objective(&SimilarityPose::from_array(minus)))
                / (2.0 * h);
            let rel = (fd - g[0][i]).abs() / fd.abs().max(g[0][i].abs()).max(1e-8);
            assert!(rel < 1e-3, "component {i}: fd {fd} vs autodiff {}", g[0][i]);
        }
    }
}
