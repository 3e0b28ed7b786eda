//! Incremental inference: projected cross-attention keys and values of every
//! committed input view are computed once and reused by every render.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::KeyValue;
use crate::autodiff::{Real, Tensor};
use crate::container::{self, SESSION_MAGIC};
use crate::error::{Error, Result};
use crate::geometry::{num_patches, Camera, Image, PosedView};
use crate::model::{assemble_image, relative_to, ModelConfig, Net, ParamStore};

pub const DEFAULT_MAX_VIEWS: usize = 64;

/// Cached keys and values of one view at one decoder block, `[P, d]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct CachedKv<T> {
    pub k: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionStats {
    pub n_views: usize,
    pub cache_bytes: usize,
    /// Shape of the concatenated keys (and values) one decoder block sees.
    pub per_layer_kv_shape: [usize; 2],
}

/// Append-only cache for one scene.
#[derive(Clone, Debug)]
pub struct KvSession<T: Real> {
    cfg: ModelConfig,
    params: Arc<ParamStore<T>>,
    max_views: usize,
    image_hw: Option<(usize, usize)>,
    anchor: Option<Camera>,
    /// `[view][decoder block]`.
    views: Vec<Vec<CachedKv<T>>>,
    flops: u64,
}

impl<T: Real> KvSession<T> {
    pub fn create(params: Arc<ParamStore<T>>, cfg: ModelConfig) -> Result<Self> {
        Self::with_max_views(params, cfg, DEFAULT_MAX_VIEWS)
    }

    pub fn with_max_views(params: Arc<ParamStore<T>>, cfg: ModelConfig, max_views: usize) -> Result<Self> {
        if !cfg.paradigm.is_dual_stream() {
            return Err(Error::UnsupportedParadigm(format!(
                "{} (input states depend on the target, nothing to cache)",
                cfg.paradigm
            )));
        }
        cfg.validate()?;
        params.check(&cfg)?;
        Ok(Self {
            cfg,
            params,
            max_views,
            image_hw: None,
            anchor: None,
            views: Vec::new(),
            flops: 0,
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    /// Cached entries of view `i`, in decoder block order.
    pub fn view_cache(&self, i: usize) -> Option<&[CachedKv<T>]> {
        self.views.get(i).map(Vec::as_slice)
    }

    /// Matmul FLOPs spent by all adds and renders so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    fn camera_for_model(&self, camera: &Camera) -> Result<Camera> {
        match (&self.anchor, self.cfg.canonicalize_poses) {
            (Some(a), true) => relative_to(a, camera),
            _ => Ok(camera.clone()),
        }
    }

    /// Encodes one view and appends its keys and values. Returns the FLOPs it
    /// took.
    pub fn add_input_view(&mut self, view: &PosedView) -> Result<u64> {
        if self.views.len() >= self.max_views {
            return Err(Error::contract(format!("session is full ({} views)", self.max_views)));
        }
        let hw = (view.image.height(), view.image.width());
        self.cfg.check_image(hw.0, hw.1)?;
        if let Some(prev) = self.image_hw {
            if prev != hw {
                return Err(Error::shape(
                    "session_add_input_view",
                    format!("view is {}x{}, session holds {}x{}", hw.0, hw.1, prev.0, prev.1),
                ));
            }
        }
        if self.anchor.is_none() && self.cfg.canonicalize_poses {
            self.anchor = Some(view.camera.clone());
        }
        let model_view = PosedView {
            image: view.image.clone(),
            camera: self.camera_for_model(&view.camera)?,
        };
        let mut net = Net::new(&self.cfg, &self.params, false)?;
        let tokens = net.tokenize_input(&model_view)?;
        let states = net.encode_view(tokens)?;
        let memory = net.view_memory(&states)?;
        let entry = memory
            .iter()
            .map(|kv| CachedKv {
                k: net.g.value(kv.k).clone(),
                v: net.g.value(kv.v).clone(),
            })
            .collect();
        let spent = net.g.total_flops();
        self.views.push(entry);
        self.image_hw = Some(hw);
        self.flops += spent;
        Ok(spent)
    }

    /// Renders a target from the cache and reports the FLOPs it took.
    pub fn render_target_counted(&self, camera: &Camera, height: usize, width: usize) -> Result<(Image, u64)> {
        if self.views.is_empty() {
            return Err(Error::contract("render needs at least one committed input view"));
        }
        self.cfg.check_image(height, width)?;
        let cam = self.camera_for_model(camera)?;
        let mut net = Net::new(&self.cfg, &self.params, false)?;
        let memory: Vec<Vec<KeyValue>> = self
            .views
            .iter()
            .map(|layers| {
                layers
                    .iter()
                    .map(|c| KeyValue {
                        k: net.g.constant(c.k.clone()),
                        v: net.g.constant(c.v.clone()),
                    })
                    .collect()
            })
            .collect();
        let t = net.tokenize_target(&cam, height, width)?;
        let (feat, _) = net.decode(t, &memory)?;
        let y = net.render(feat)?;
        let img = assemble_image(net.g.value(y), height, width, self.cfg.patch)?;
        Ok((img, net.g.total_flops()))
    }

    pub fn render_target(&self, camera: &Camera, height: usize, width: usize) -> Result<Image> {
        Ok(self.render_target_counted(camera, height, width)?.0)
    }

    /// Like [`render_target`](Self::render_target) but also adds the FLOPs to
    /// the session total.
    pub fn render_target_tracked(&mut self, camera: &Camera, height: usize, width: usize) -> Result<Image> {
        let (img, f) = self.render_target_counted(camera, height, width)?;
        self.flops += f;
        Ok(img)
    }

    pub fn stats(&self) -> SessionStats {
        let p = self.image_hw.map_or(0, |(h, w)| num_patches(h, w, self.cfg.patch));
        let n = self.views.len();
        let d = self.cfg.d_model;
        SessionStats {
            n_views: n,
            cache_bytes: 2 * self.cfg.dec_layers * n * p * d * T::BYTES,
            per_layer_kv_shape: [n * p, d],
        }
    }
}

impl KvSession<f32> {
    /// Writes the cache as a `KVSN` tensor container.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (h, w) = self.image_hw.unwrap_or((0, 0));
        let meta = Tensor::new(vec![3], vec![self.views.len() as f32, h as f32, w as f32])?;
        let mut owned: Vec<(String, Tensor<f32>)> = vec![("meta".into(), meta)];
        if let Some(a) = &self.anchor {
            owned.push(("anchor.extrinsic".into(), Tensor::new(vec![16], a.extrinsic_row_major().map(|v| v as f32).to_vec())?));
            owned.push(("anchor.intrinsic".into(), Tensor::new(vec![16], a.intrinsic_row_major().map(|v| v as f32).to_vec())?));
        }
        for (i, layers) in self.views.iter().enumerate() {
            for (l, c) in layers.iter().enumerate() {
                owned.push((format!("view{i}.l{l}.k"), c.k.clone()));
                owned.push((format!("view{i}.l{l}.v"), c.v.clone()));
            }
        }
        let refs: Vec<(&str, &Tensor<f32>)> = owned.iter().map(|(n, t)| (n.as_str(), t)).collect();
        container::write_file(path, SESSION_MAGIC, &refs)
    }

    pub fn load(path: &Path, params: Arc<ParamStore<f32>>, cfg: ModelConfig) -> Result<Self> {
        let mut s = Self::create(params, cfg)?;
        let tensors: std::collections::BTreeMap<String, Tensor<f32>> = container::read_file(path, SESSION_MAGIC)?.into_iter().collect();
        let corrupt = |reason: String| Error::CorruptFile {
            path: path.to_path_buf(),
            reason,
        };
        let meta = tensors.get("meta").ok_or_else(|| corrupt("missing meta".into()))?;
        if meta.len() != 3 {
            return Err(corrupt("meta must hold 3 values".into()));
        }
        let (n, h, w) = (meta.data()[0] as usize, meta.data()[1] as usize, meta.data()[2] as usize);
        if let (Some(e), Some(k)) = (tensors.get("anchor.extrinsic"), tensors.get("anchor.intrinsic")) {
            let to16 = |t: &Tensor<f32>| -> Result<[f64; 16]> {
                let v: Vec<f64> = t.data().iter().map(|&x| x as f64).collect();
                v.try_into().map_err(|_| corrupt("anchor matrix needs 16 values".into()))
            };
            s.anchor = Some(Camera::from_row_major(&to16(e)?, &to16(k)?)?);
        }
        if n > 0 {
            s.cfg.check_image(h, w)?;
            s.image_hw = Some((h, w));
        }
        let want = [num_patches(h.max(1), w.max(1), s.cfg.patch), s.cfg.d_model];
        for i in 0..n {
            let mut layers = Vec::with_capacity(s.cfg.dec_layers);
            for l in 0..s.cfg.dec_layers {
                let get = |kind: &str| -> Result<Tensor<f32>> {
                    let name = format!("view{i}.l{l}.{kind}");
                    let t = tensors.get(&name).ok_or_else(|| corrupt(format!("missing {name}")))?;
                    if t.shape() != want {
                        return Err(Error::shape(
                            "session_load",
                            format!("{name} has shape {:?}, expected {want:?}", t.shape()),
                        ));
                    }
                    Ok(t.clone())
                };
                layers.push(CachedKv { k: get("k")?, v: get("v")? });
            }
            s.views.push(layers);
        }
        Ok(s)
    }
}
