//! Representation alignment: a trainable projector maps hidden tokens of one
//! layer into a frozen teacher's patch-feature space.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::container::{self, TEACHER_MAGIC};
use crate::error::{Error, Result};
use crate::geometry::{patchify, Image};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepaStream {
    InputOnly,
    TargetOnly,
    Both,
}

impl RepaStream {
    pub fn uses_input(self) -> bool {
        matches!(self, RepaStream::InputOnly | RepaStream::Both)
    }

    pub fn uses_target(self) -> bool {
        matches!(self, RepaStream::TargetOnly | RepaStream::Both)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepaLoss {
    SmoothL1,
    L2,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepaConfig {
    /// 1-based index of the block whose output is aligned.
    pub align_layer: usize,
    pub stream: RepaStream,
    pub loss_kind: RepaLoss,
    pub weight: f64,
    pub teacher_dim: usize,
}

impl RepaConfig {
    /// Aligns block 3 of 12 and block 2 of 6, i.e. a quarter of the depth
    /// rounded up.
    pub fn for_depth(layers: usize, teacher_dim: usize) -> Self {
        Self {
            align_layer: layers.div_ceil(4).max(1),
            stream: RepaStream::Both,
            loss_kind: RepaLoss::SmoothL1,
            weight: 0.5,
            teacher_dim,
        }
    }

    pub fn validate(&self, max_layer: usize) -> Result<()> {
        if self.align_layer == 0 || self.align_layer > max_layer {
            return Err(Error::Config(format!(
                "repa align_layer {} outside 1..={max_layer}",
                self.align_layer
            )));
        }
        if !self.weight.is_finite() || self.weight < 0.0 {
            return Err(Error::Config(format!("repa weight {} must be finite and >= 0", self.weight)));
        }
        if self.teacher_dim == 0 {
            return Err(Error::Config("repa teacher_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Parameter names and shapes of the projector for hidden width `d`.
pub fn projector_shapes(d: usize, teacher_dim: usize) -> Vec<(String, Vec<usize>)> {
    let dims = [d, d, d, teacher_dim];
    let mut out = Vec::with_capacity(6);
    for i in 0..3 {
        out.push((format!("repa.fc{}.w", i + 1), vec![dims[i], dims[i + 1]]));
        out.push((format!("repa.fc{}.b", i + 1), vec![dims[i + 1]]));
    }
    out
}

/// Projector weights bound into a graph, in layer order.
#[derive(Clone, Copy, Debug)]
pub struct ProjectorWeights {
    pub layers: [(Var, Var); 3],
}

/// Three linear layers with gelu between them.
pub fn projector_forward<T: Real>(g: &mut Graph<T>, tokens: Var, w: &ProjectorWeights) -> Result<Var> {
    let mut h = tokens;
    for (i, &(wi, bi)) in w.layers.iter().enumerate() {
        h = g.linear(h, wi, Some(bi))?;
        if i < 2 {
            h = g.gelu(h);
        }
    }
    Ok(h)
}

/// Alignment loss between one view's projected tokens and teacher features,
/// both `[P, teacher_dim]`. Cosine is negated so lower is better.
pub fn repa_loss<T: Real>(g: &mut Graph<T>, projected: Var, teacher: Var, kind: RepaLoss) -> Result<Var> {
    if g.shape(projected) != g.shape(teacher) {
        return Err(Error::shape(
            "repa_loss",
            format!("projected {:?} vs teacher {:?}", g.shape(projected), g.shape(teacher)),
        ));
    }
    match kind {
        RepaLoss::SmoothL1 => g.smooth_l1_loss(projected, teacher, 1.0),
        RepaLoss::L2 => g.mse_loss(projected, teacher),
        RepaLoss::Cosine => {
            let c = g.cosine_similarity(projected, teacher)?;
            let m = g.mean(c);
            Ok(g.scale(m, T::of(-1.0)))
        }
    }
}

/// Mean of [`repa_loss`] over `(projected, teacher)` view pairs.
pub fn repa_loss_views<T: Real>(g: &mut Graph<T>, pairs: &[(Var, Var)], kind: RepaLoss) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::contract("repa loss over zero views"));
    }
    let mut total: Option<Var> = None;
    for &(p, t) in pairs {
        let l = repa_loss(g, p, t, kind)?;
        total = Some(match total {
            Some(acc) => g.add(acc, l)?,
            None => l,
        });
    }
    Ok(g.scale(total.unwrap(), T::of(1.0 / pairs.len() as f64)))
}

/// Teacher patch features on a `grid_h x grid_w` patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherFeatures {
    pub grid_h: usize,
    pub grid_w: usize,
    /// `[grid_h * grid_w, dim]`.
    pub features: Tensor<f32>,
}

impl TeacherFeatures {
    pub fn new(grid_h: usize, grid_w: usize, features: Tensor<f32>) -> Result<Self> {
        if features.rank() != 2 || features.shape()[0] != grid_h * grid_w {
            return Err(Error::shape(
                "teacher_features",
                format!("{:?} for a {grid_h}x{grid_w} grid", features.shape()),
            ));
        }
        if let Some(v) = features.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::contract(format!("teacher feature value {v} is not finite")));
        }
        Ok(Self {
            grid_h,
            grid_w,
            features,
        })
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Nearest-neighbour resampling onto an `h x w` grid, sampling at cell
    /// centres.
    pub fn resample(&self, h: usize, w: usize) -> Result<Self> {
        if h == self.grid_h && w == self.grid_w {
            return Ok(self.clone());
        }
        if h == 0 || w == 0 {
            return Err(Error::shape("teacher_resample", "empty target grid"));
        }
        let dim = self.dim();
        let src = self.features.data();
        let mut out = Vec::with_capacity(h * w * dim);
        for r in 0..h {
            let sr = ((2 * r + 1) * self.grid_h) / (2 * h);
            for c in 0..w {
                let sc = ((2 * c + 1) * self.grid_w) / (2 * w);
                let i = (sr * self.grid_w + sc) * dim;
                out.extend_from_slice(&src[i..i + dim]);
            }
        }
        Self::new(h, w, Tensor::new(vec![h * w, dim], out)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let t = self
            .features
            .clone()
            .reshaped(vec![self.grid_h, self.grid_w, self.dim()])?;
        container::write_file(path, TEACHER_MAGIC, &[("features", &t)])
    }
}

/// Reads a teacher feature file holding one `(grid_h, grid_w, dim)` tensor.
pub fn load_teacher_features(path: &Path) -> Result<TeacherFeatures> {
    let tensors = container::read_file(path, TEACHER_MAGIC)?;
    let corrupt = |reason: String| Error::CorruptFile {
        path: path.to_path_buf(),
        reason,
    };
    let [(_, t)] = <[_; 1]>::try_from(tensors)
        .map_err(|v: Vec<_>| corrupt(format!("expected one tensor, found {}", v.len())))?;
    if t.rank() != 3 {
        return Err(corrupt(format!("feature tensor has rank {}, expected 3", t.rank())));
    }
    let (h, w, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    TeacherFeatures::new(h, w, t.reshaped(vec![h * w, d])?)
}

/// Frozen, randomly initialised patch encoder used as a stand-in teacher.
#[derive(Clone, Debug)]
pub struct SyntheticTeacher {
    patch: usize,
    dim: usize,
    w1: Tensor<f32>,
    w2: Tensor<f32>,
}

impl SyntheticTeacher {
    pub fn new(patch: usize, dim: usize, seed: u64) -> Result<Self> {
        if patch == 0 || dim == 0 {
            return Err(Error::Config("teacher patch and dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = patch * patch * 3;
        let n1 = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).unwrap();
        let n2 = Normal::new(0.0, (1.0 / dim as f64).sqrt()).unwrap();
        let w1 = (0..fan_in * dim).map(|_| n1.sample(&mut rng) as f32).collect();
        let w2 = (0..dim * dim).map(|_| n2.sample(&mut rng) as f32).collect();
        Ok(Self {
            patch,
            dim,
            w1: Tensor::new(vec![fan_in, dim], w1)?,
            w2: Tensor::new(vec![dim, dim], w2)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self, image: &Image) -> Result<TeacherFeatures> {
        let (h, w, p) = (image.height(), image.width(), self.patch);
        let patches = patchify(image.data(), h, w, 3, p)?;
        let n = patches.len() / (p * p * 3);
        let mut g = Graph::<f32>::new();
        // centred pixels so the features are not dominated by brightness
        let x = g.constant(Tensor::new(vec![n, p * p * 3], patches.iter().map(|v| v - 0.5).collect())?);
        let w1 = g.constant(self.w1.clone());
        let w2 = g.constant(self.w2.clone());
        let hdn = g.matmul(x, w1)?;
        let hdn = g.gelu(hdn);
        let out = g.matmul(hdn, w2)?;
        TeacherFeatures::new(h / p, w / p, g.value(out).clone())
    }
}
