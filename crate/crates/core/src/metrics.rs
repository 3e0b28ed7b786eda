//! Image quality metrics and the complexity profiler: closed-form FLOP model,
//! counted FLOPs, wall-clock timing and log-log scaling fits.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::data::sample_cameras;
use crate::error::{Error, Result};
use crate::geometry::{num_patches, Camera, Image, PosedView};
use crate::kvcache::KvSession;
use crate::model::{scope, ModelConfig, Net, ParamStore, Paradigm};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape(a: &Image, b: &Image, op: &'static str) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::shape(
            op,
            format!("{}x{} vs {}x{}", a.height(), a.width(), b.height(), b.width()),
        ));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b, "mse")?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.data().len() as f64)
}

/// Peak signal-to-noise ratio on unit range, capped for (near) identical
/// images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m < 1e-10 { PSNR_CAP_DB } else { -10.0 * m.log10() })
}

fn grayscale(img: &Image) -> Vec<f64> {
    img.data()
        .chunks_exact(3)
        .map(|c| (c[0] as f64 + c[1] as f64 + c[2] as f64) / 3.0)
        .collect()
}

/// Summed-area table with a zero border, `(h+1) x (w+1)`.
fn integral(v: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for r in 0..h {
        let mut row = 0.0;
        for c in 0..w {
            row += v[r * w + c];
            s[(r + 1) * (w + 1) + c + 1] = s[r * (w + 1) + c + 1] + row;
        }
    }
    s
}

fn window_sum(s: &[f64], w: usize, r: usize, c: usize, k: usize) -> f64 {
    let at = |r: usize, c: usize| s[r * (w + 1) + c];
    at(r + k, c + k) - at(r, c + k) - at(r + k, c) + at(r, c)
}

/// Mean SSIM over all `8x8` windows (stride one) of the channel-mean
/// grayscale images.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b, "ssim")?;
    let (h, w, k) = (a.height(), a.width(), SSIM_WINDOW);
    if h < k || w < k {
        return Err(Error::shape("ssim", format!("{h}x{w} image is smaller than the {k}x{k} window")));
    }
    let (x, y) = (grayscale(a), grayscale(b));
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let sx = integral(&x, h, w);
    let sy = integral(&y, h, w);
    let sxx = integral(&prod(&x, &x), h, w);
    let syy = integral(&prod(&y, &y), h, w);
    let sxy = integral(&prod(&x, &y), h, w);
    let n = (k * k) as f64;
    let mut total = 0.0;
    for r in 0..=h - k {
        for c in 0..=w - k {
            let mx = window_sum(&sx, w, r, c, k) / n;
            let my = window_sum(&sy, w, r, c, k) / n;
            let vx = (window_sum(&sxx, w, r, c, k) / n - mx * mx).max(0.0);
            let vy = (window_sum(&syy, w, r, c, k) / n - my * my).max(0.0);
            let cxy = window_sum(&sxy, w, r, c, k) / n - mx * my;
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
        }
    }
    Ok(total / ((h - k + 1) * (w - k + 1)) as f64)
}

/// FLOPs per cost term; one multiply-add counts as two.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopBreakdown {
    pub encoder: u64,
    pub decoder_self: u64,
    pub decoder_cross: u64,
    pub ffn: u64,
    pub projections: u64,
    pub io: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.encoder + self.decoder_self + self.decoder_cross + self.ffn + self.projections + self.io
    }

    /// Attention score and context products only.
    pub fn attention(&self) -> u64 {
        self.encoder + self.decoder_self + self.decoder_cross
    }

    /// From the graph's per-scope counters.
    pub fn from_counters(counters: &BTreeMap<&'static str, u64>) -> Result<Self> {
        let mut out = Self::default();
        for (&k, &v) in counters {
            *out.slot(k)? += v;
        }
        Ok(out)
    }

    fn slot(&mut self, label: &str) -> Result<&mut u64> {
        Ok(match label {
            scope::ENCODER => &mut self.encoder,
            scope::DECODER_SELF => &mut self.decoder_self,
            scope::DECODER_CROSS => &mut self.decoder_cross,
            scope::FFN => &mut self.ffn,
            scope::PROJECTIONS => &mut self.projections,
            scope::IO => &mut self.io,
            other => return Err(Error::contract(format!("unknown FLOP scope {other:?}"))),
        })
    }

    pub fn entries(&self) -> [(&'static str, u64); 6] {
        [
            (scope::ENCODER, self.encoder),
            (scope::DECODER_SELF, self.decoder_self),
            (scope::DECODER_CROSS, self.decoder_cross),
            (scope::FFN, self.ffn),
            (scope::PROJECTIONS, self.projections),
            (scope::IO, self.io),
        ]
    }
}

impl std::ops::Add for FlopBreakdown {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            encoder: self.encoder + o.encoder,
            decoder_self: self.decoder_self + o.decoder_self,
            decoder_cross: self.decoder_cross + o.decoder_cross,
            ffn: self.ffn + o.ffn,
            projections: self.projections + o.projections,
            io: self.io + o.io,
        }
    }
}

impl std::iter::Sum for FlopBreakdown {
    fn sum<I: Iterator<Item = Self>>(it: I) -> Self {
        it.fold(Self::default(), |a, b| a + b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub paradigm: Paradigm,
    pub n_in: usize,
    pub n_tgt: usize,
    /// Tokens per view.
    pub patches: usize,
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub height: usize,
    pub width: usize,
    pub analytic: FlopBreakdown,
    pub measured: Option<FlopBreakdown>,
    pub wall_ms: Option<f64>,
    pub peak_alloc_bytes: Option<u64>,
}

impl CostReport {
    /// Counted FLOPs when measured, the closed form otherwise.
    pub fn flops(&self) -> u64 {
        self.measured.unwrap_or(self.analytic).total()
    }
}

/// Closed-form forward cost of rendering `m` targets from `n` inputs, with
/// the same shape arithmetic as the kernels.
pub fn analytic_flops(cfg: &ModelConfig, n: usize, m: usize, height: usize, width: usize) -> Result<CostReport> {
    cfg.validate()?;
    cfg.check_image(height, width)?;
    let (n64, m64) = (n as u64, m as u64);
    let p = num_patches(height, width, cfg.patch) as u64;
    let d = cfg.d_model as u64;
    let f = (cfg.ffn_mult * cfg.d_model) as u64;
    let (le, ld) = (cfg.enc_layers as u64, cfg.dec_layers as u64);
    let mlp = |rows: u64, i: u64, h: u64, o: u64| 2 * rows * (i * h + h * o);
    let ffn = |rows: u64| 2 * rows * 2 * d * f;
    // q.kT and a.v over `sq` queries and `sk` keys
    let scores = |sq: u64, sk: u64| 2 * 2 * sq * sk * d;
    let proj = |rows: u64, count: u64| 2 * rows * d * d * count;

    let io = n64 * mlp(p, cfg.input_token_width() as u64, d, d)
        + m64 * (mlp(p, cfg.target_token_width() as u64, d, d) + 2 * p * d * cfg.pixel_width() as u64);
    let mut out = FlopBreakdown {
        io,
        ..Default::default()
    };
    if cfg.paradigm.is_dual_stream() {
        out.encoder = n64 * le * scores(p, p);
        out.projections = n64 * le * proj(p, 4) + n64 * ld * proj(p, 2) + m64 * ld * proj(p, 2);
        if cfg.paradigm != Paradigm::CrossOnly {
            out.decoder_self = m64 * ld * scores(p, p);
            out.projections += m64 * ld * proj(p, 4);
        }
        out.decoder_cross = m64 * ld * scores(p, n64 * p);
        out.ffn = n64 * le * ffn(p) + m64 * ld * ffn(p);
    } else {
        let s = (n64 + 1) * p;
        let l = cfg.joint_layers() as u64;
        out.decoder_self = m64 * l * scores(s, s);
        out.projections = m64 * l * proj(s, 4);
        out.ffn = m64 * l * ffn(s);
    }
    Ok(CostReport {
        paradigm: cfg.paradigm,
        n_in: n,
        n_tgt: m,
        patches: p as usize,
        d_model: cfg.d_model,
        enc_layers: cfg.enc_layers,
        dec_layers: cfg.dec_layers,
        height,
        width,
        analytic: out,
        measured: None,
        wall_ms: None,
        peak_alloc_bytes: None,
    })
}

/// Random images on sphere cameras, deterministic in `seed`.
pub fn synthetic_views(n: usize, height: usize, width: usize, seed: u64) -> Result<Vec<PosedView>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_cameras(seed, n, height, width)?
        .into_iter()
        .map(|camera| {
            let data = (0..height * width * 3).map(|_| rng.random::<f32>()).collect();
            Ok(PosedView {
                image: Image::new(height, width, data)?,
                camera,
            })
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        (v[k / 2 - 1] + v[k / 2]) / 2.0
    }
}

pub const MIN_TIMED_RUNS: usize = 5;

/// One non-trainable forward over `n` inputs and `m` targets: counted FLOPs
/// and bytes held by the graph.
pub fn count_forward<T: Real>(cfg: &ModelConfig, params: &ParamStore<T>, inputs: &[PosedView], targets: &[Camera]) -> Result<(FlopBreakdown, u64)> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::contract("measurement needs at least one input view"))?;
    let (h, w) = (first.image.height(), first.image.width());
    let mut net = Net::new(cfg, params, false)?;
    net.forward_sample(inputs, targets, h, w)?;
    Ok((FlopBreakdown::from_counters(net.g.flops())?, net.g.bytes() as u64))
}

/// Closed form plus counted FLOPs, median wall time over `runs` timed runs
/// after one warm-up, and the graph's peak bytes.
pub fn measure<T: Real>(cfg: &ModelConfig, n: usize, m: usize, height: usize, width: usize, params: &ParamStore<T>, runs: usize) -> Result<CostReport> {
    if runs < MIN_TIMED_RUNS {
        return Err(Error::Config(format!("need at least {MIN_TIMED_RUNS} timed runs, got {runs}")));
    }
    let mut report = analytic_flops(cfg, n, m, height, width)?;
    let views = synthetic_views(n + m, height, width, 0x00C0_57ED)?;
    let (inputs, targets) = views.split_at(n);
    let targets: Vec<Camera> = targets.iter().map(|v| v.camera.clone()).collect();
    let (counted, bytes) = count_forward(cfg, params, inputs, &targets)?;
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t0 = Instant::now();
        count_forward(cfg, params, inputs, &targets)?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    report.measured = Some(counted);
    report.wall_ms = Some(median(times));
    report.peak_alloc_bytes = Some(bytes);
    Ok(report)
}

fn incremental_views(n: usize, m: usize, height: usize, width: usize) -> Result<(Vec<PosedView>, Vec<Camera>)> {
    let mut views = synthetic_views(n + m, height, width, 0x1_4C4E)?;
    let targets = views.split_off(n).into_iter().map(|v| v.camera).collect();
    Ok((views, targets))
}

/// Counted FLOPs of adding `n` views one at a time and rendering `m`
/// targets after every addition: `(KV-cached session, full recompute)`.
pub fn incremental_costs(cfg: &ModelConfig, params: &ParamStore<f32>, n: usize, m: usize, height: usize, width: usize) -> Result<(u64, u64)> {
    let (inputs, targets) = incremental_views(n, m, height, width)?;
    let mut session = KvSession::create(Arc::new(params.clone()), cfg.clone())?;
    let mut cached = 0u64;
    for view in &inputs {
        cached += session.add_input_view(view)?;
        for t in &targets {
            cached += session.render_target_counted(t, height, width)?.1;
        }
    }
    Ok((cached, recompute_cost(cfg, params, n, m, height, width)?))
}

/// Counted FLOPs of the same incremental schedule when every step reruns
/// the full forward pass; works for every paradigm.
pub fn recompute_cost(cfg: &ModelConfig, params: &ParamStore<f32>, n: usize, m: usize, height: usize, width: usize) -> Result<u64> {
    let (inputs, targets) = incremental_views(n, m, height, width)?;
    (1..=n).try_fold(0u64, |acc, k| Ok(acc + count_forward(cfg, params, &inputs[..k], &targets)?.0.total()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingVar {
    N,
    M,
}

impl fmt::Display for ScalingVar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScalingVar::N => "N",
            ScalingVar::M => "M",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub variable: ScalingVar,
    /// `(variable, flops)` pairs.
    pub samples: Vec<(f64, f64)>,
    pub exponent: f64,
    pub intercept: f64,
}

pub const MIN_FIT_POINTS: usize = 4;
pub const MIN_FIT_SPAN: f64 = 8.0;

/// Least-squares slope of `ln y` on `ln x`.
pub fn fit_power_law(variable: ScalingVar, samples: Vec<(f64, f64)>) -> Result<ScalingFit> {
    if samples.len() < MIN_FIT_POINTS {
        return Err(Error::Config(format!("scaling fit needs {MIN_FIT_POINTS} points, got {}", samples.len())));
    }
    if samples.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::Config("scaling fit needs positive samples".into()));
    }
    let lo = samples.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
    let hi = samples.iter().map(|s| s.0).fold(0.0, f64::max);
    if hi / lo < MIN_FIT_SPAN {
        return Err(Error::Config(format!("scaling fit spans {:.2}x, needs {MIN_FIT_SPAN}x", hi / lo)));
    }
    let k = samples.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = samples.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let exponent = sxy / sxx;
    Ok(ScalingFit {
        variable,
        samples,
        exponent,
        intercept: my - exponent * mx,
    })
}

/// Exponent of total FLOPs over the reports' `N` or `M`.
pub fn fit_scaling(reports: &[CostReport], variable: ScalingVar) -> Result<ScalingFit> {
    let samples = reports
        .iter()
        .map(|r| {
            let x = match variable {
                ScalingVar::N => r.n_in,
                ScalingVar::M => r.n_tgt,
            };
            (x as f64, r.flops() as f64)
        })
        .collect();
    fit_power_law(variable, samples)
}

/// The `bench` CSV columns.
pub const CSV_HEADER: &str = "paradigm,N,M,flops,ms,bytes";

pub fn csv_row(r: &CostReport) -> String {
    format!(
        "{},{},{},{},{:.3},{}",
        r.paradigm,
        r.n_in,
        r.n_tgt,
        r.flops(),
        r.wall_ms.unwrap_or(f64::NAN),
        r.peak_alloc_bytes.unwrap_or(0)
    )
}
