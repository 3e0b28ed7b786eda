//! Pinhole cameras, Plücker ray maps, and (un)patchification.
//!
//! Extrinsics are camera-to-world: the rotation block maps camera axes into
//! the world frame and the translation column is the camera center. Camera
//! axes follow the x-right, y-down, z-forward convention.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ORTHO_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    extrinsic: Matrix4<f64>,
    intrinsic: Matrix4<f64>,
}

impl Camera {
    pub fn new(extrinsic: Matrix4<f64>, intrinsic: Matrix4<f64>) -> Result<Self> {
        let cam = Self {
            extrinsic,
            intrinsic,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Builds a camera from row-major 16-element arrays, the on-disk layout.
    pub fn from_row_major(extrinsic: &[f64; 16], intrinsic: &[f64; 16]) -> Result<Self> {
        Self::new(
            Matrix4::from_row_slice(extrinsic),
            Matrix4::from_row_slice(intrinsic),
        )
    }

    pub fn extrinsic_row_major(&self) -> [f64; 16] {
        row_major(&self.extrinsic)
    }

    pub fn intrinsic_row_major(&self) -> [f64; 16] {
        row_major(&self.intrinsic)
    }

    /// Pinhole intrinsic with focal lengths and principal point in pixels.
    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64) -> Matrix4<f64> {
        Matrix4::new(
            fx, 0.0, cx, 0.0, //
            0.0, fy, cy, 0.0, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        )
    }

    /// Intrinsic for a square-pixel camera with the given vertical field of view.
    pub fn intrinsic_from_fov(fov_y_rad: f64, width: usize, height: usize) -> Matrix4<f64> {
        let f = 0.5 * height as f64 / (0.5 * fov_y_rad).tan();
        Self::pinhole(f, f, 0.5 * width as f64, 0.5 * height as f64)
    }

    /// Camera at `eye` looking towards `target`, with `up` roughly the image-up direction.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        intrinsic: Matrix4<f64>,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("eye coincides with target".into()))?;
        let mut right = forward.cross(&up);
        if right.norm() < 1e-9 {
            right = forward.cross(&Vector3::new(1.0, 0.0, 0.0));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let mut e = Matrix4::identity();
        for r in 0..3 {
            e[(r, 0)] = right[r];
            e[(r, 1)] = down[r];
            e[(r, 2)] = forward[r];
            e[(r, 3)] = eye[r];
        }
        Self::new(e, intrinsic)
    }

    pub fn extrinsic(&self) -> &Matrix4<f64> {
        &self.extrinsic
    }

    pub fn intrinsic(&self) -> &Matrix4<f64> {
        &self.intrinsic
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.extrinsic.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn center(&self) -> Vector3<f64> {
        self.extrinsic.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn forward(&self) -> Vector3<f64> {
        self.rotation().column(2).into_owned()
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.extrinsic;
        let bottom = [e[(3, 0)], e[(3, 1)], e[(3, 2)], e[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidCamera(format!(
                "extrinsic bottom row is {bottom:?}"
            )));
        }
        let r = self.rotation();
        let dev = (r.transpose() * r - Matrix3::identity()).abs().max();
        if dev > ORTHO_TOL || !dev.is_finite() {
            return Err(Error::InvalidCamera(format!(
                "rotation block not orthonormal (deviation {dev:e})"
            )));
        }
        let k = &self.intrinsic;
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(Error::InvalidCamera(format!(
                "non-positive focal lengths ({}, {})",
                k[(0, 0)],
                k[(1, 1)]
            )));
        }
        Ok(())
    }

    fn inverse_intrinsic(&self) -> Result<Matrix3<f64>> {
        let k3: Matrix3<f64> = self.intrinsic.fixed_view::<3, 3>(0, 0).into_owned();
        k3.try_inverse()
            .filter(|m| m.iter().all(|v| v.is_finite()))
            .ok_or_else(|| Error::InvalidCamera("singular intrinsic matrix".into()))
    }
}

fn row_major(m: &Matrix4<f64>) -> [f64; 16] {
    let mut out = [0.0; 16];
    for r in 0..4 {
        for c in 0..4 {
            out[r * 4 + c] = m[(r, c)];
        }
    }
    out
}

/// Inverse of a rigid camera-to-world transform.
fn rigid_inverse(m: &Matrix4<f64>) -> Matrix4<f64> {
    let r = m.fixed_view::<3, 3>(0, 0).transpose();
    let t = -(r * m.fixed_view::<3, 1>(0, 3));
    let mut out = Matrix4::identity();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    out.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    out
}

/// RGB image, row-major `H x W x 3`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::shape(
                "image",
                format!("{height}x{width}x3 needs {} values, got {}", height * width * 3, data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosedView {
    pub image: Image,
    pub camera: Camera,
}

/// Per-pixel Plücker coordinates `(direction, moment)`, row-major `H x W x 6`.
#[derive(Clone, Debug, PartialEq)]
pub struct RayMap {
    pub height: usize,
    pub width: usize,
    pub rays: Vec<f64>,
}

impl RayMap {
    pub fn ray(&self, row: usize, col: usize) -> [f64; 6] {
        let i = (row * self.width + col) * 6;
        let mut out = [0.0; 6];
        out.copy_from_slice(&self.rays[i..i + 6]);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Input,
    Target,
}

/// `P x d` token matrix of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid<T> {
    pub tokens: crate::autodiff::Tensor<T>,
    pub view_id: usize,
    pub kind: TokenKind,
}

/// World-space ray through each pixel center `(u + 0.5, v + 0.5)`, with the
/// direction normalized before the moment `o x d` is formed.
pub fn plucker_ray_map(camera: &Camera, height: usize, width: usize) -> Result<RayMap> {
    if height == 0 || width == 0 {
        return Err(Error::shape("plucker_ray_map", "empty image"));
    }
    camera.validate()?;
    let kinv = camera.inverse_intrinsic()?;
    let rot = camera.rotation();
    let origin = camera.center();
    let mut rays = Vec::with_capacity(height * width * 6);
    for v in 0..height {
        for u in 0..width {
            let pix = Vector3::new(u as f64 + 0.5, v as f64 + 0.5, 1.0);
            let dir = (rot * (kinv * pix)).normalize();
            let moment = origin.cross(&dir);
            rays.extend_from_slice(&[dir.x, dir.y, dir.z, moment.x, moment.y, moment.z]);
        }
    }
    Ok(RayMap {
        height,
        width,
        rays,
    })
}

/// Splits an `H x W x C` grid into `p x p` patches, returned as a flat
/// `P x (p*p*C)` buffer. Patches are row-major over the patch grid; inside a
/// patch pixels are row-major with channels fastest.
pub fn patchify<T: Copy>(grid: &[T], height: usize, width: usize, channels: usize, p: usize) -> Result<Vec<T>> {
    if p == 0 || !height.is_multiple_of(p) || !width.is_multiple_of(p) {
        return Err(Error::shape(
            "patchify",
            format!("{height}x{width} is not divisible by patch size {p}"),
        ));
    }
    if grid.len() != height * width * channels {
        return Err(Error::shape(
            "patchify",
            format!("grid of {} values is not {height}x{width}x{channels}", grid.len()),
        ));
    }
    let mut out = Vec::with_capacity(grid.len());
    for pr in 0..height / p {
        for pc in 0..width / p {
            for r in 0..p {
                let row = pr * p + r;
                let start = (row * width + pc * p) * channels;
                out.extend_from_slice(&grid[start..start + p * channels]);
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`patchify`].
pub fn unpatchify<T: Copy + Default>(patches: &[T], height: usize, width: usize, channels: usize, p: usize) -> Result<Vec<T>> {
    if p == 0 || !height.is_multiple_of(p) || !width.is_multiple_of(p) || patches.len() != height * width * channels {
        return Err(Error::shape(
            "unpatchify",
            format!(
                "{} values do not form {height}x{width}x{channels} with patch size {p}",
                patches.len()
            ),
        ));
    }
    let mut out = vec![T::default(); patches.len()];
    let row_len = p * channels;
    let mut src = 0;
    for pr in 0..height / p {
        for pc in 0..width / p {
            for r in 0..p {
                let row = pr * p + r;
                let start = (row * width + pc * p) * channels;
                out[start..start + row_len].copy_from_slice(&patches[src..src + row_len]);
                src += row_len;
            }
        }
    }
    Ok(out)
}

pub fn num_patches(height: usize, width: usize, p: usize) -> usize {
    (height / p) * (width / p)
}

/// Re-expresses every camera in the frame of `views[anchor]`, which becomes
/// the identity pose. Relative transforms between views are unchanged.
pub fn canonicalize_poses(views: &[Camera], anchor: usize) -> Result<Vec<Camera>> {
    let a = views
        .get(anchor)
        .ok_or_else(|| Error::contract(format!("anchor {anchor} out of range ({} views)", views.len())))?;
    let inv = rigid_inverse(a.extrinsic());
    views
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let e = if i == anchor {
                Matrix4::identity()
            } else {
                inv * c.extrinsic()
            };
            Camera::new(e, *c.intrinsic())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Unit};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_camera(rng: &mut ChaCha8Rng) -> Camera {
        let axis = Unit::new_normalize(Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0) + 1e-3,
        ));
        let rot = Rotation3::from_axis_angle(&axis, rng.random_range(-3.0..3.0));
        let mut e = Matrix4::identity();
        e.fixed_view_mut::<3, 3>(0, 0).copy_from(rot.matrix());
        for r in 0..3 {
            e[(r, 3)] = rng.random_range(-4.0..4.0);
        }
        let k = Camera::pinhole(
            rng.random_range(10.0..60.0),
            rng.random_range(10.0..60.0),
            rng.random_range(4.0..12.0),
            rng.random_range(4.0..12.0),
        );
        Camera::new(e, k).unwrap()
    }

    /// Independent per-pixel ray construction with scalar arithmetic only.
    fn oracle_ray(cam: &Camera, u: usize, v: usize) -> [f64; 6] {
        let e = cam.extrinsic_row_major();
        let k = cam.intrinsic_row_major();
        let (fx, fy, cx, cy) = (k[0], k[5], k[2], k[6]);
        let xc = (u as f64 + 0.5 - cx) / fx;
        let yc = (v as f64 + 0.5 - cy) / fy;
        let mut d = [0.0; 3];
        for r in 0..3 {
            d[r] = e[r * 4] * xc + e[r * 4 + 1] * yc + e[r * 4 + 2];
        }
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let d = [d[0] / n, d[1] / n, d[2] / n];
        let o = [e[3], e[7], e[11]];
        [
            d[0],
            d[1],
            d[2],
            o[1] * d[2] - o[2] * d[1],
            o[2] * d[0] - o[0] * d[2],
            o[0] * d[1] - o[1] * d[0],
        ]
    }

    #[test]
    fn origin_camera_has_zero_moments() {
        let cam = Camera::new(Matrix4::identity(), Camera::pinhole(8.0, 8.0, 4.0, 4.0)).unwrap();
        let rm = plucker_ray_map(&cam, 8, 8).unwrap();
        for px in rm.rays.chunks(6) {
            assert_eq!(&px[3..], &[0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn moment_cross_product_identity() {
        let o = Vector3::new(1.0, 0.0, 0.0);
        let d = Vector3::new(0.0, 0.0, 1.0);
        assert_eq!(o.cross(&d), Vector3::new(0.0, -1.0, 0.0));
    }

    #[test]
    fn random_cameras_satisfy_plucker_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let cam = random_camera(&mut rng);
            let rm = plucker_ray_map(&cam, 4, 6).unwrap();
            for v in 0..4 {
                for u in 0..6 {
                    let r = rm.ray(v, u);
                    let norm = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
                    assert!((norm - 1.0).abs() < 1e-6);
                    let dot = r[0] * r[3] + r[1] * r[4] + r[2] * r[5];
                    assert!(dot.abs() < 1e-6, "dot {dot}");
                }
            }
        }
    }

    #[test]
    fn ray_map_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let cam = random_camera(&mut rng);
            let rm = plucker_ray_map(&cam, 8, 8).unwrap();
            for v in 0..8 {
                for u in 0..8 {
                    let got = rm.ray(v, u);
                    let want = oracle_ray(&cam, u, v);
                    for c in 0..6 {
                        assert!((got[c] - want[c]).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn invalid_cameras_are_rejected() {
        let mut e = Matrix4::identity();
        e[(0, 0)] = 2.0;
        assert!(matches!(
            Camera::new(e, Camera::pinhole(1.0, 1.0, 0.0, 0.0)),
            Err(Error::InvalidCamera(_))
        ));
        let mut e = Matrix4::identity();
        e[(3, 0)] = 0.5;
        assert!(Camera::new(e, Camera::pinhole(1.0, 1.0, 0.0, 0.0)).is_err());
        assert!(Camera::new(Matrix4::identity(), Camera::pinhole(0.0, 1.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn singular_intrinsic_is_invalid_camera() {
        let mut k = Camera::pinhole(5.0, 5.0, 2.0, 2.0);
        k[(2, 2)] = 0.0;
        k[(2, 0)] = 0.0;
        let cam = Camera {
            extrinsic: Matrix4::identity(),
            intrinsic: k,
        };
        assert!(matches!(plucker_ray_map(&cam, 4, 4), Err(Error::InvalidCamera(_))));
    }

    #[test]
    fn patch_count_at_full_scale() {
        let grid = vec![0u8; 256 * 256 * 3];
        let patches = patchify(&grid, 256, 256, 3, 8).unwrap();
        assert_eq!(patches.len() / (8 * 8 * 3), 1024);
        assert_eq!(num_patches(256, 256, 8), 1024);
    }

    #[test]
    fn single_patch_is_flattened_image() {
        let grid: Vec<u32> = (0..8 * 8 * 3).collect();
        assert_eq!(patchify(&grid, 8, 8, 3, 8).unwrap(), grid);
    }

    #[test]
    fn non_divisible_dims_are_shape_errors() {
        let grid = vec![0.0f32; 10 * 8 * 3];
        assert!(matches!(patchify(&grid, 10, 8, 3, 8), Err(Error::Shape { .. })));
        assert!(unpatchify(&grid, 10, 8, 3, 8).is_err());
        assert!(unpatchify(&grid[1..], 8, 8, 3, 8).is_err());
    }

    #[test]
    fn zero_patches_give_zero_image() {
        let z = vec![0.0f32; 16 * 16 * 3];
        assert!(unpatchify(&z, 16, 16, 3, 8).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_patches_land_in_row_major_quadrants() {
        let per = 8 * 8;
        let patches: Vec<f32> = (0..4).flat_map(|i| vec![i as f32; per]).collect();
        let img = unpatchify(&patches, 16, 16, 1, 8).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                let quadrant = (r / 8) * 2 + c / 8;
                assert_eq!(img[r * 16 + c], quadrant as f32);
            }
        }
    }

    #[test]
    fn canonicalize_single_view_gives_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cam = random_camera(&mut rng);
        let out = canonicalize_poses(&[cam], 0).unwrap();
        assert!((out[0].extrinsic() - Matrix4::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn canonicalize_two_views_yields_relative_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let a = random_camera(&mut rng);
        let b = random_camera(&mut rng);
        let rel = a.extrinsic().try_inverse().unwrap() * b.extrinsic();
        let out = canonicalize_poses(&[a, b], 0).unwrap();
        assert!((out[1].extrinsic() - rel).abs().max() < 1e-9);
    }

    #[test]
    fn canonicalize_preserves_relative_poses_and_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let cams: Vec<Camera> = (0..3).map(|_| random_camera(&mut rng)).collect();
            let out = canonicalize_poses(&cams, 1).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let before = cams[i].extrinsic().try_inverse().unwrap() * cams[j].extrinsic();
                    let after = out[i].extrinsic().try_inverse().unwrap() * out[j].extrinsic();
                    assert!((before - after).abs().max() < 1e-6);
                }
            }
            let twice = canonicalize_poses(&out, 1).unwrap();
            for (x, y) in out.iter().zip(&twice) {
                assert!((x.extrinsic() - y.extrinsic()).abs().max() < 1e-12);
            }
        }
    }

    #[test]
    fn look_at_points_forward_axis_at_target() {
        let k = Camera::intrinsic_from_fov(0.8, 16, 16);
        let cam = Camera::look_at(
            Vector3::new(0.0, 0.0, -3.0),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
            k,
        )
        .unwrap();
        assert!((cam.forward() - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
        // image-down is world-down
        assert!((cam.rotation().column(1) - Vector3::new(0.0, -1.0, 0.0)).norm() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn patchify_roundtrips(ph in 1usize..5, pw in 1usize..5, p in 1usize..6, c in 1usize..4, seed in any::<u64>()) {
                let (h, w) = (ph * p, pw * p);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let grid: Vec<f32> = (0..h * w * c).map(|_| rng.random()).collect();
                let patches = patchify(&grid, h, w, c, p).unwrap();
                prop_assert_eq!(&unpatchify(&patches, h, w, c, p).unwrap(), &grid);
                prop_assert_eq!(&patchify(&unpatchify(&patches, h, w, c, p).unwrap(), h, w, c, p).unwrap(), &patches);
            }
        }
    }
}
