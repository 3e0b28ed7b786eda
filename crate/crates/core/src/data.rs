//! Procedural scenes of spheres and boxes, an analytic ray caster that
//! renders their ground truth, and the on-disk dataset layout.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::container::{self, IMAGE_MAGIC};
use crate::error::{Error, Result};
use crate::geometry::{plucker_ray_map, Camera, Image, PosedView};

pub const MANIFEST_VERSION: u32 = 1;
pub const AMBIENT: f64 = 0.25;
/// Scenes live inside `[-BOUND, BOUND]^3`.
pub const BOUND: f64 = 1.0;
pub const CAMERA_RADIUS: f64 = 3.0;
pub const RADIUS_JITTER: f64 = 0.2;
pub const FOV_Y: f64 = 50.0 * std::f64::consts::PI / 180.0;

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Sphere { center: Vector3<f64>, radius: f64 },
    /// Axis-aligned box.
    Cuboid { min: Vector3<f64>, max: Vector3<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub albedo: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
    /// Unit vector pointing towards the light.
    pub light: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub primitive: usize,
}

pub fn generate_scene(seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(3..=8);
    let mut primitives = Vec::with_capacity(n);
    for _ in 0..n {
        let shape = if rng.random_bool(0.5) {
            let radius = rng.random_range(0.15..0.45);
            let lim = BOUND - radius;
            Shape::Sphere {
                center: Vector3::from_fn(|_, _| rng.random_range(-lim..lim)),
                radius,
            }
        } else {
            let half = Vector3::from_fn(|_, _| rng.random_range(0.1..0.4));
            let center = Vector3::from_fn(|i, _| {
                let lim = BOUND - half[i];
                rng.random_range(-lim..lim)
            });
            Shape::Cuboid {
                min: center - half,
                max: center + half,
            }
        };
        let albedo = [0; 3].map(|_| rng.random_range(0.2..1.0));
        primitives.push(Primitive { shape, albedo });
    }
    let background = [0; 3].map(|_| rng.random_range(0.0..0.3));
    let light = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..-0.2), rng.random_range(-1.0..1.0)).normalize();
    Scene {
        seed,
        primitives,
        background,
        light,
    }
}

const T_MIN: f64 = 1e-9;

fn hit_sphere(center: &Vector3<f64>, radius: f64, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
    // d is unit length
    let oc = o - center;
    let b = oc.dot(d);
    let c = oc.norm_squared() - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    [-b - s, -b + s].into_iter().find(|&t| t > T_MIN)
}

/// Slab test; returns the entry distance and the axis/sign of the face hit.
fn hit_cuboid(min: &Vector3<f64>, max: &Vector3<f64>, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    let mut n0 = Vector3::zeros();
    let mut n1 = Vector3::zeros();
    for a in 0..3 {
        if d[a] == 0.0 {
            if o[a] < min[a] || o[a] > max[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[a];
        let (mut ta, mut tb) = ((min[a] - o[a]) * inv, (max[a] - o[a]) * inv);
        let mut na = Vector3::zeros();
        na[a] = -1.0;
        let mut nb = Vector3::zeros();
        nb[a] = 1.0;
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
            std::mem::swap(&mut na, &mut nb);
        }
        if ta > t0 {
            t0 = ta;
            n0 = na;
        }
        if tb < t1 {
            t1 = tb;
            n1 = nb;
        }
        if t0 > t1 {
            return None;
        }
    }
    if t0 > T_MIN {
        Some((t0, n0))
    } else if t1 > T_MIN {
        Some((t1, -n1))
    } else {
        None
    }
}

/// Nearest intersection of the ray `o + t d` (unit `d`) with the scene.
pub fn intersect(scene: &Scene, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (i, p) in scene.primitives.iter().enumerate() {
        let hit = match &p.shape {
            Shape::Sphere { center, radius } => hit_sphere(center, *radius, o, d).map(|t| {
                let point = o + d * t;
                (t, point, (point - center) / *radius)
            }),
            Shape::Cuboid { min, max } => hit_cuboid(min, max, o, d).map(|(t, n)| (t, o + d * t, n)),
        };
        if let Some((t, point, normal)) = hit {
            if best.is_none_or(|b| t < b.t) {
                best = Some(Hit {
                    t,
                    point,
                    normal,
                    primitive: i,
                });
            }
        }
    }
    best
}

/// View-independent Lambert shading of a surface point.
pub fn shade(scene: &Scene, hit: &Hit) -> [f64; 3] {
    let lambert = hit.normal.dot(&scene.light).max(0.0);
    let k = AMBIENT + (1.0 - AMBIENT) * lambert;
    scene.primitives[hit.primitive].albedo.map(|a| (a * k).clamp(0.0, 1.0))
}

pub fn raycast_render(scene: &Scene, camera: &Camera, height: usize, width: usize) -> Result<Image> {
    let rays = plucker_ray_map(camera, height, width)?;
    let origin = camera.center();
    let mut data = Vec::with_capacity(height * width * 3);
    for r in 0..height {
        for c in 0..width {
            let ray = rays.ray(r, c);
            let d = Vector3::new(ray[0], ray[1], ray[2]);
            let rgb = match intersect(scene, &origin, &d) {
                Some(h) => shade(scene, &h),
                None => scene.background,
            };
            data.extend(rgb.iter().map(|&v| v as f32));
        }
    }
    Image::new(height, width, data)
}

/// Cameras on a sphere around the origin, radius jittered, looking at the
/// centre.
pub fn sample_cameras(seed: u64, n: usize, height: usize, width: usize) -> Result<Vec<Camera>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = Camera::intrinsic_from_fov(FOV_Y, width, height);
    (0..n)
        .map(|_| {
            let z: f64 = rng.random_range(-0.9..0.9);
            let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let s = (1.0 - z * z).sqrt();
            let radius = CAMERA_RADIUS * rng.random_range(1.0 - RADIUS_JITTER..1.0 + RADIUS_JITTER);
            // y is world-down, so z here is the elevation along -y
            let dir = Vector3::new(s * phi.cos(), -z, s * phi.sin());
            Camera::look_at(dir * radius, Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0), k)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub image_file: String,
    pub extrinsic: Vec<f64>,
    pub intrinsic: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: String,
    pub seed: u64,
    pub split: Split,
    pub views: Vec<ViewEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub height: usize,
    pub width: usize,
    pub scenes: Vec<SceneEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::CorruptFile {
                path: path.to_path_buf(),
                reason: format!("unsupported manifest version {}", m.format_version),
            });
        }
        Ok(m)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SceneEntry> {
        self.scenes.iter().filter(move |s| s.split == split)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_scenes: usize,
    pub cams_per_scene: usize,
    pub split_ratio: f64,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_scenes: 200,
            cams_per_scene: 16,
            split_ratio: 0.9,
            height: 32,
            width: 32,
            seed: 0,
        }
    }
}

/// Seed of scene `i`; also used for its cameras after mixing.
fn scene_seed(base: u64, i: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64)
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let t = Tensor::new(vec![image.height(), image.width(), 3], image.data().to_vec())?;
    container::write_file(path, IMAGE_MAGIC, &[("image", &t)])
}

pub fn read_image(path: &Path) -> Result<Image> {
    let tensors = container::read_file(path, IMAGE_MAGIC)?;
    let corrupt = |reason: String| Error::CorruptFile {
        path: path.to_path_buf(),
        reason,
    };
    let t = match tensors.as_slice() {
        [(_, t)] if t.rank() == 3 && t.shape()[2] == 3 => t,
        _ => return Err(corrupt("expected one (H, W, 3) tensor".into())),
    };
    Image::new(t.shape()[0], t.shape()[1], t.data().to_vec()).map_err(|e| corrupt(e.to_string()))
}

/// Renders every scene and writes images, cameras and `manifest.json` under
/// `out_dir`.
pub fn build_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<Manifest> {
    if spec.n_scenes == 0 || spec.cams_per_scene == 0 {
        return Err(Error::Config("dataset needs at least one scene and one camera".into()));
    }
    if !(0.0..=1.0).contains(&spec.split_ratio) {
        return Err(Error::Config(format!("split_ratio {} outside [0, 1]", spec.split_ratio)));
    }
    std::fs::create_dir_all(out_dir)?;
    let n_train = (spec.split_ratio * spec.n_scenes as f64).round() as usize;
    let mut scenes = Vec::with_capacity(spec.n_scenes);
    for i in 0..spec.n_scenes {
        let seed = scene_seed(spec.seed, i);
        let scene = generate_scene(seed);
        let id = format!("scene_{i:04}");
        std::fs::create_dir_all(out_dir.join(&id))?;
        let cams = sample_cameras(seed ^ 0x5EED_CA3E, spec.cams_per_scene, spec.height, spec.width)?;
        let mut views = Vec::with_capacity(cams.len());
        for (v, cam) in cams.iter().enumerate() {
            let image_file = format!("{id}/view_{v:03}.imgf");
            let img = raycast_render(&scene, cam, spec.height, spec.width)?;
            write_image(&out_dir.join(&image_file), &img)?;
            views.push(ViewEntry {
                image_file,
                extrinsic: cam.extrinsic_row_major().to_vec(),
                intrinsic: cam.intrinsic_row_major().to_vec(),
            });
        }
        scenes.push(SceneEntry {
            id,
            seed,
            split: if i < n_train { Split::Train } else { Split::Val },
            views,
        });
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        height: spec.height,
        width: spec.width,
        scenes,
    };
    std::fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Input views and target views of one scene. Target images are ground truth
/// for the loss and metrics only.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input_views: Vec<PosedView>,
    pub target_views: Vec<PosedView>,
}

impl Sample {
    pub fn target_cameras(&self) -> Vec<Camera> {
        self.target_views.iter().map(|v| v.camera.clone()).collect()
    }
}

/// A manifest with every image held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    views: Vec<Vec<PosedView>>,
}

fn camera_of(entry: &ViewEntry, path: &Path) -> Result<Camera> {
    let arr = |v: &[f64]| -> Result<[f64; 16]> {
        v.try_into().map_err(|_| Error::CorruptFile {
            path: path.to_path_buf(),
            reason: "camera matrices need 16 values".into(),
        })
    };
    Camera::from_row_major(&arr(&entry.extrinsic)?, &arr(&entry.intrinsic)?)
}

impl Dataset {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let manifest = Manifest::load(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut views = Vec::with_capacity(manifest.scenes.len());
        for s in &manifest.scenes {
            let mut vs = Vec::with_capacity(s.views.len());
            for v in &s.views {
                let path = root.join(&v.image_file);
                let image = read_image(&path)?;
                if (image.height(), image.width()) != (manifest.height, manifest.width) {
                    return Err(Error::shape(
                        "dataset",
                        format!("{} is {}x{}, manifest says {}x{}", path.display(), image.height(), image.width(), manifest.height, manifest.width),
                    ));
                }
                vs.push(PosedView {
                    image,
                    camera: camera_of(v, manifest_path)?,
                });
            }
            views.push(vs);
        }
        Ok(Self { root, manifest, views })
    }

    /// Scene indices of one split, in manifest order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.manifest.scenes.len())
            .filter(|&i| self.manifest.scenes[i].split == split)
            .collect()
    }

    pub fn views(&self, scene: usize) -> &[PosedView] {
        &self.views[scene]
    }

    /// Disjoint random choice of `n_in` input and `n_tgt` target views.
    pub fn sample<R: Rng>(&self, scene: usize, n_in: usize, n_tgt: usize, rng: &mut R) -> Result<Sample> {
        let vs = self
            .views
            .get(scene)
            .ok_or_else(|| Error::contract(format!("scene index {scene} out of range")))?;
        let picks = select_views(vs.len(), n_in, n_tgt, rng)?;
        Ok(Sample {
            input_views: picks[..n_in].iter().map(|&i| vs[i].clone()).collect(),
            target_views: picks[n_in..].iter().map(|&i| vs[i].clone()).collect(),
        })
    }

    /// Scene index of `id`.
    pub fn find(&self, id: &str) -> Option<usize> {
        self.manifest.scenes.iter().position(|s| s.id == id)
    }
}

/// Distinct view indices, the first `n_in` for inputs.
pub fn select_views<R: Rng>(available: usize, n_in: usize, n_tgt: usize, rng: &mut R) -> Result<Vec<usize>> {
    let needed = n_in + n_tgt;
    if needed > available {
        return Err(Error::InsufficientViews { needed, available });
    }
    Ok(sample_indices(rng, available, needed).into_vec())
}

/// Reads one scene's sample straight from disk.
pub fn load_sample<R: Rng>(manifest_path: &Path, scene_id: &str, n_in: usize, n_tgt: usize, rng: &mut R) -> Result<Sample> {
    let manifest = Manifest::load(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let scene = manifest
        .scenes
        .iter()
        .find(|s| s.id == scene_id)
        .ok_or_else(|| Error::contract(format!("no scene {scene_id} in manifest")))?;
    let picks = select_views(scene.views.len(), n_in, n_tgt, rng)?;
    let load = |i: usize| -> Result<PosedView> {
        let v = &scene.views[i];
        Ok(PosedView {
            image: read_image(&root.join(&v.image_file))?,
            camera: camera_of(v, manifest_path)?,
        })
    };
    Ok(Sample {
        input_views: picks[..n_in].iter().map(|&i| load(i)).collect::<Result<_>>()?,
        target_views: picks[n_in..].iter().map(|&i| load(i)).collect::<Result<_>>()?,
    })
}
