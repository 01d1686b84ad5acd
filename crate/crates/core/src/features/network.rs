//! Toy two-branch transformer encoder with an up-sampling convolutional decoder.
//!
//! Per branch: 16x16 patch embedding, a CLS token and learned 1-D position
//! embeddings, pre-norm encoder blocks (multi-head self-attention and a GELU
//! feed-forward), a final layer norm, then the patch tokens are reshaped to a
//! grid and decoded by `conv3x3 -> GELU -> 2x bilinear upsample` stages and a
//! final linear `conv3x3` to the feature channel count.
//!
//! Forward passes keep every intermediate needed for the hand-written
//! backward pass; all arithmetic is `f64` so gradients can be checked
//! against finite differences.

use super::{normalize, normalize_backward, FeatureExtractor, FeatureMap};
use crate::geometry::PolarImage;
use crate::image::Image;
use crate::objective::{self, LossConfig, TripletBatch};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub ground_width: usize,
    pub reference_width: usize,
    pub height: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    pub feature_channels: usize,
    /// Image pixels per feature column; `patch / feature_downsample` must be a power of two.
    pub feature_downsample: usize,
    /// Whether the ground branch treats its input as a wrapping panorama.
    pub ground_circular: bool,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            ground_width: 256,
            reference_width: 256,
            height: 64,
            patch: 16,
            embed_dim: 32,
            heads: 2,
            blocks: 2,
            mlp_ratio: 4,
            feature_channels: 16,
            feature_downsample: 8,
            ground_circular: true,
            seed: 7,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.patch == 0 || self.embed_dim == 0 || self.heads == 0 || self.feature_channels == 0 {
            return bad("network sizes must be positive".into());
        }
        for (name, w) in [("ground", self.ground_width), ("reference", self.reference_width)] {
            if w == 0 || w % self.patch != 0 {
                return bad(format!("{name} width {w} is not a multiple of the patch size"));
            }
        }
        if self.height == 0 || self.height % self.patch != 0 {
            return bad(format!("height {} is not a multiple of the patch size", self.height));
        }
        if self.embed_dim % self.heads != 0 {
            return bad("embed_dim must divide evenly across heads".into());
        }
        if self.feature_downsample == 0
            || self.patch % self.feature_downsample != 0
            || !(self.patch / self.feature_downsample).is_power_of_two()
        {
            return bad("patch / feature_downsample must be a power of two".into());
        }
        if self.embed_dim >> self.decoder_stages() == 0 {
            return bad("too many decoder stages for embed_dim".into());
        }
        Ok(())
    }

    pub fn decoder_stages(&self) -> usize {
        (self.patch / self.feature_downsample).trailing_zeros() as usize
    }

    pub fn width(&self, branch: Branch) -> usize {
        match branch {
            Branch::Ground => self.ground_width,
            Branch::Reference => self.reference_width,
        }
    }

    /// Shape of the decoded feature map for `branch`.
    pub fn feature_shape(&self, branch: Branch) -> (usize, usize, usize) {
        (
            self.width(branch) / self.feature_downsample,
            self.height / self.feature_downsample,
            self.feature_channels,
        )
    }

    pub fn token_count(&self, branch: Branch) -> usize {
        (self.width(branch) / self.patch) * (self.height / self.patch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Ground,
    Reference,
}

#[derive(Debug, Clone)]
struct BlockLayout {
    ln1_g: Range<usize>,
    ln1_b: Range<usize>,
    qkv_w: Range<usize>,
    qkv_b: Range<usize>,
    proj_w: Range<usize>,
    proj_b: Range<usize>,
    ln2_g: Range<usize>,
    ln2_b: Range<usize>,
    fc1_w: Range<usize>,
    fc1_b: Range<usize>,
    fc2_w: Range<usize>,
    fc2_b: Range<usize>,
}

#[derive(Debug, Clone)]
struct ConvLayout {
    w: Range<usize>,
    b: Range<usize>,
    cin: usize,
    cout: usize,
}

#[derive(Debug, Clone)]
struct BranchLayout {
    span: Range<usize>,
    patch_w: Range<usize>,
    patch_b: Range<usize>,
    cls: Range<usize>,
    pos: Range<usize>,
    blocks: Vec<BlockLayout>,
    lnf_g: Range<usize>,
    lnf_b: Range<usize>,
    stages: Vec<ConvLayout>,
    head: ConvLayout,
    grid_w: usize,
    grid_h: usize,
    circular: bool,
}

#[derive(Debug, Clone)]
struct Layout {
    ground: BranchLayout,
    reference: BranchLayout,
    total: usize,
}

/// Initialisation kinds, recorded as the layout is built.
#[derive(Debug, Clone, Copy)]
enum Init {
    Uniform(f64),
    Const(f64),
}

struct Allocator {
    next: usize,
    inits: Vec<(Range<usize>, Init)>,
}

impl Allocator {
    fn take(&mut self, n: usize, init: Init) -> Range<usize> {
        let r = self.next..self.next + n;
        self.next += n;
        self.inits.push((r.clone(), init));
        r
    }
}

impl Layout {
    fn new(cfg: &NetworkConfig) -> (Layout, Vec<(Range<usize>, Init)>) {
        let mut alloc = Allocator {
            next: 0,
            inits: vec![],
        };
        let ground = Self::branch(cfg, Branch::Ground, &mut alloc);
        let reference = Self::branch(cfg, Branch::Reference, &mut alloc);
        (
            Layout {
                ground,
                reference,
                total: alloc.next,
            },
            alloc.inits,
        )
    }

    fn branch(cfg: &NetworkConfig, branch: Branch, a: &mut Allocator) -> BranchLayout {
        let d = cfg.embed_dim;
        let pp = cfg.patch * cfg.patch;
        let hidden = d * cfg.mlp_ratio;
        let u = |fan_in: usize| Init::Uniform(1.0 / (fan_in as f64).sqrt());
        let start = a.next;
        let patch_w = a.take(pp * d, u(pp));
        let patch_b = a.take(d, u(pp));
        let cls = a.take(d, Init::Uniform(0.02));
        let pos = a.take((cfg.token_count(branch) + 1) * d, Init::Uniform(0.02));
        let blocks = (0..cfg.blocks)
            .map(|_| BlockLayout {
                ln1_g: a.take(d, Init::Const(1.0)),
                ln1_b: a.take(d, Init::Const(0.0)),
                qkv_w: a.take(d * 3 * d, u(d)),
                qkv_b: a.take(3 * d, u(d)),
                proj_w: a.take(d * d, u(d)),
                proj_b: a.take(d, u(d)),
                ln2_g: a.take(d, Init::Const(1.0)),
                ln2_b: a.take(d, Init::Const(0.0)),
                fc1_w: a.take(d * hidden, u(d)),
                fc1_b: a.take(hidden, u(d)),
                fc2_w: a.take(hidden * d, u(hidden)),
                fc2_b: a.take(d, u(hidden)),
            })
            .collect();
        let lnf_g = a.take(d, Init::Const(1.0));
        let lnf_b = a.take(d, Init::Const(0.0));
        let mut conv = |cin: usize, cout: usize| ConvLayout {
            w: a.take(cout * cin * 9, u(cin * 9)),
            b: a.take(cout, u(cin * 9)),
            cin,
            cout,
        };
        let mut c = d;
        let mut stages = vec![];
        for _ in 0..cfg.decoder_stages() {
            stages.push(conv(c, c / 2));
            c /= 2;
        }
        let head = conv(c, cfg.feature_channels);
        BranchLayout {
            span: start..a.next,
            patch_w,
            patch_b,
            cls,
            pos,
            blocks,
            lnf_g,
            lnf_b,
            stages,
            head,
            grid_w: cfg.width(branch) / cfg.patch,
            grid_h: cfg.height / cfg.patch,
            circular: match branch {
                Branch::Ground => cfg.ground_circular,
                Branch::Reference => true,
            },
        }
    }

    fn branch_layout(&self, b: Branch) -> &BranchLayout {
        match b {
            Branch::Ground => &self.ground,
            Branch::Reference => &self.reference,
        }
    }
}

/// All trainable weights of both branches as one flat vector.
#[derive(Debug, Clone)]
pub struct ExtractorParams {
    config: NetworkConfig,
    layout: Layout,
    values: Vec<f64>,
}

impl ExtractorParams {
    /// Seeded initialisation. Both branches draw from the same stream, so
    /// they start from identical weights wherever their shapes agree.
    pub fn init(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let (layout, inits) = Layout::new(&config);
        let mut values = vec![0.0; layout.total];
        let mut rngs = [
            ChaCha8Rng::seed_from_u64(config.seed),
            ChaCha8Rng::seed_from_u64(config.seed),
        ];
        for (range, init) in inits {
            let rng = &mut rngs[usize::from(range.start >= layout.reference.span.start)];
            for v in &mut values[range] {
                *v = match init {
                    Init::Uniform(a) => rng.random_range(-a..=a),
                    Init::Const(c) => c,
                };
            }
        }
        Ok(Self {
            config,
            layout,
            values,
        })
    }

    pub fn from_values(config: NetworkConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let (layout, _) = Layout::new(&config);
        if values.len() != layout.total {
            return Err(Error::CheckpointMismatch(format!(
                "{} weights for a network with {}",
                values.len(),
                layout.total
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::CheckpointMismatch("non-finite weight".into()));
        }
        Ok(Self {
            config,
            layout,
            values,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Flat index range owned by `branch`.
    pub fn branch_range(&self, branch: Branch) -> Range<usize> {
        self.layout.branch_layout(branch).span.clone()
    }

    /// Flat index range of the final decoder convolution of `branch`.
    pub fn head_range(&self, branch: Branch) -> Range<usize> {
        let l = self.layout.branch_layout(branch);
        l.head.w.start..l.head.b.end
    }

    /// Raw decoded features (not normalised).
    pub fn extract(&self, image: &Image, branch: Branch) -> Result<FeatureMap> {
        Ok(self.forward(image, branch)?.output)
    }

    fn forward(&self, image: &Image, branch: Branch) -> Result<BranchPass> {
        let cfg = &self.config;
        let want = (cfg.width(branch), cfg.height);
        if (image.width(), image.height()) != want {
            return Err(Error::ShapeMismatch(format!(
                "{:?} branch expects {}x{} images, got {}x{}",
                branch,
                want.0,
                want.1,
                image.width(),
                image.height()
            )));
        }
        forward_branch(&self.values, self.layout.branch_layout(branch), cfg, image)
    }

    fn backward(&self, pass: &BranchPass, branch: Branch, grad_out: &[f64], grads: &mut [f64]) {
        backward_branch(
            &self.values,
            self.layout.branch_layout(branch),
            &self.config,
            pass,
            grad_out,
            grads,
        );
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: NetworkConfig,
    param_count: usize,
    values: Vec<f64>,
}

const CHECKPOINT_FORMAT: &str = "georeg-extractor";
const CHECKPOINT_VERSION: u32 = 1;

impl ExtractorParams {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            param_count: self.values.len(),
            values: self.values.clone(),
        })?)
    }

    /// Parses a checkpoint, rejecting it unless its header matches `expected`
    /// (when given).
    pub fn from_json(text: &str, expected: Option<&NetworkConfig>) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointMismatch(format!(
                "unsupported checkpoint {} v{}",
                file.format, file.version
            )));
        }
        if let Some(exp) = expected {
            if exp != &file.config {
                return Err(Error::CheckpointMismatch(
                    "network configuration differs from the checkpoint header".into(),
                ));
            }
        }
        if file.param_count != file.values.len() {
            return Err(Error::CheckpointMismatch("parameter count header is wrong".into()));
        }
        Self::from_values(file.config, file.values)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>, expected: Option<&NetworkConfig>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?, expected)
    }
}

// ---------------------------------------------------------------------------
// dense primitives

/// `y = x W + b` for `x: n x din`, `W: din x dout`.
fn linear(x: &[f64], n: usize, din: usize, w: &[f64], b: &[f64], dout: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * dout];
    for i in 0..n {
        let yr = &mut y[i * dout..(i + 1) * dout];
        yr.copy_from_slice(b);
        for (k, &a) in x[i * din..(i + 1) * din].iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (yj, wj) in yr.iter_mut().zip(&w[k * dout..(k + 1) * dout]) {
                *yj += a * wj;
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn linear_backward(
    x: &[f64],
    n: usize,
    din: usize,
    w: &[f64],
    dout: usize,
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    for i in 0..n {
        let dyr = &dy[i * dout..(i + 1) * dout];
        for (b, g) in db.iter_mut().zip(dyr) {
            *b += g;
        }
        for (k, &a) in x[i * din..(i + 1) * din].iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (wj, g) in dw[k * dout..(k + 1) * dout].iter_mut().zip(dyr) {
                *wj += a * g;
            }
        }
    }
    if let Some(dx) = dx {
        for i in 0..n {
            let dyr = &dy[i * dout..(i + 1) * dout];
            for k in 0..din {
                let wr = &w[k * dout..(k + 1) * dout];
                dx[i * din + k] += wr.iter().zip(dyr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(x: &[f64], d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, LnCache) {
    let n = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (row[j] - mu) * r;
            xhat[i * d + j] = h;
            y[i * d + j] = g[j] * h + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    cache: &LnCache,
    d: usize,
    g: &[f64],
    dy: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
) {
    let n = cache.rstd.len();
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let dyr = &dy[i * d..(i + 1) * d];
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            dx[i * d + j] += cache.rstd[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

// ---------------------------------------------------------------------------
// attention

struct AttnCache {
    z: Vec<f64>,
    qkv: Vec<f64>,
    /// Softmax weights, one `n x n` matrix per head.
    probs: Vec<Vec<f64>>,
    merged: Vec<f64>,
}

fn head_slice(qkv: &[f64], n: usize, d: usize, part: usize, head: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * dh);
    for i in 0..n {
        let base = i * 3 * d + part * d + head * dh;
        out.extend_from_slice(&qkv[base..base + dh]);
    }
    out
}

fn attention(values: &[f64], blk: &BlockLayout, z: Vec<f64>, n: usize, d: usize, heads: usize) -> (Vec<f64>, AttnCache) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qkv = linear(&z, n, d, &values[blk.qkv_w.clone()], &values[blk.qkv_b.clone()], 3 * d);
    let mut merged = vec![0.0; n * d];
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = head_slice(&qkv, n, d, 0, h, dh);
        let k = head_slice(&qkv, n, d, 1, h, dh);
        let v = head_slice(&qkv, n, d, 2, h, dh);
        let mut p = vec![0.0; n * n];
        for i in 0..n {
            let qi = &q[i * dh..(i + 1) * dh];
            let row = &mut p[i * n..(i + 1) * n];
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                let s = qi.iter().zip(&k[j * dh..(j + 1) * dh]).map(|(a, b)| a * b).sum::<f64>() * scale;
                row[j] = s;
                mx = mx.max(s);
            }
            let mut sum = 0.0;
            for s in row.iter_mut() {
                *s = (*s - mx).exp();
                sum += *s;
            }
            for s in row.iter_mut() {
                *s /= sum;
            }
            let out = &mut merged[i * d + h * dh..i * d + (h + 1) * dh];
            for j in 0..n {
                let a = row[j];
                for (o, vv) in out.iter_mut().zip(&v[j * dh..(j + 1) * dh]) {
                    *o += a * vv;
                }
            }
        }
        probs.push(p);
    }
    let out = linear(&merged, n, d, &values[blk.proj_w.clone()], &values[blk.proj_b.clone()], d);
    (
        out,
        AttnCache {
            z,
            qkv,
            probs,
            merged,
        },
    )
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    values: &[f64],
    blk: &BlockLayout,
    cache: &AttnCache,
    n: usize,
    d: usize,
    heads: usize,
    dout: &[f64],
    grads: &mut [f64],
    dz: &mut [f64],
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dmerged = vec![0.0; n * d];
    {
        let (dw, db) = split_two(grads, &blk.proj_w, &blk.proj_b);
        linear_backward(&cache.merged, n, d, &values[blk.proj_w.clone()], d, dout, dw, db, Some(&mut dmerged));
    }
    let mut dqkv = vec![0.0; n * 3 * d];
    for h in 0..heads {
        let q = head_slice(&cache.qkv, n, d, 0, h, dh);
        let k = head_slice(&cache.qkv, n, d, 1, h, dh);
        let v = head_slice(&cache.qkv, n, d, 2, h, dh);
        let p = &cache.probs[h];
        let mut ds = vec![0.0; n * n];
        for i in 0..n {
            let dor = &dmerged[i * d + h * dh..i * d + (h + 1) * dh];
            let prow = &p[i * n..(i + 1) * n];
            // dV += P^T dO ; dP = dO V^T
            let mut dp = vec![0.0; n];
            for j in 0..n {
                let vj = &v[j * dh..(j + 1) * dh];
                dp[j] = dor.iter().zip(vj).map(|(a, b)| a * b).sum();
                let base = j * 3 * d + 2 * d + h * dh;
                for (t, g) in dor.iter().enumerate() {
                    dqkv[base + t] += prow[j] * g;
                }
            }
            let dot: f64 = dp.iter().zip(prow).map(|(a, b)| a * b).sum();
            for j in 0..n {
                ds[i * n + j] = prow[j] * (dp[j] - dot) * scale;
            }
        }
        for i in 0..n {
            let dsr = &ds[i * n..(i + 1) * n];
            let qi = &q[i * dh..(i + 1) * dh];
            let qbase = i * 3 * d + h * dh;
            for j in 0..n {
                let s = dsr[j];
                if s == 0.0 {
                    continue;
                }
                let kj = &k[j * dh..(j + 1) * dh];
                let kbase = j * 3 * d + d + h * dh;
                for t in 0..dh {
                    dqkv[qbase + t] += s * kj[t];
                    dqkv[kbase + t] += s * qi[t];
                }
            }
        }
    }
    let (dw, db) = split_two(grads, &blk.qkv_w, &blk.qkv_b);
    linear_backward(&cache.z, n, d, &values[blk.qkv_w.clone()], 3 * d, &dqkv, dw, db, Some(dz));
}

/// Disjoint mutable views of two parameter ranges.
fn split_two<'a>(g: &'a mut [f64], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (lo, hi) = g.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.end - b.start])
}

// ---------------------------------------------------------------------------
// encoder block

struct BlockCache {
    ln1: LnCache,
    attn: AttnCache,
    ln2: LnCache,
    z2: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

fn block_forward(values: &[f64], blk: &BlockLayout, x: &[f64], n: usize, d: usize, cfg: &NetworkConfig) -> (Vec<f64>, BlockCache) {
    let hidden = d * cfg.mlp_ratio;
    let (z1, ln1) = layer_norm(x, d, &values[blk.ln1_g.clone()], &values[blk.ln1_b.clone()]);
    let (a, attn) = attention(values, blk, z1, n, d, cfg.heads);
    let x1: Vec<f64> = x.iter().zip(&a).map(|(p, q)| p + q).collect();
    let (z2, ln2) = layer_norm(&x1, d, &values[blk.ln2_g.clone()], &values[blk.ln2_b.clone()]);
    let pre = linear(&z2, n, d, &values[blk.fc1_w.clone()], &values[blk.fc1_b.clone()], hidden);
    let act: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
    let m = linear(&act, n, hidden, &values[blk.fc2_w.clone()], &values[blk.fc2_b.clone()], d);
    let x2 = x1.iter().zip(&m).map(|(p, q)| p + q).collect();
    (
        x2,
        BlockCache {
            ln1,
            attn,
            ln2,
            z2,
            pre,
            act,
        },
    )
}

fn block_backward(
    values: &[f64],
    blk: &BlockLayout,
    cache: &BlockCache,
    n: usize,
    d: usize,
    cfg: &NetworkConfig,
    dx2: &[f64],
    grads: &mut [f64],
) -> Vec<f64> {
    let hidden = d * cfg.mlp_ratio;
    let mut dact = vec![0.0; n * hidden];
    {
        let (dw, db) = split_two(grads, &blk.fc2_w, &blk.fc2_b);
        linear_backward(&cache.act, n, hidden, &values[blk.fc2_w.clone()], d, dx2, dw, db, Some(&mut dact));
    }
    for (g, &p) in dact.iter_mut().zip(&cache.pre) {
        *g *= gelu_grad(p);
    }
    let mut dz2 = vec![0.0; n * d];
    {
        let (dw, db) = split_two(grads, &blk.fc1_w, &blk.fc1_b);
        linear_backward(&cache.z2, n, d, &values[blk.fc1_w.clone()], hidden, &dact, dw, db, Some(&mut dz2));
    }
    let mut dx1 = dx2.to_vec();
    {
        let (dg, db) = split_two(grads, &blk.ln2_g, &blk.ln2_b);
        layer_norm_backward(&cache.ln2, d, &values[blk.ln2_g.clone()], &dz2, dg, db, &mut dx1);
    }
    let mut dz1 = vec![0.0; n * d];
    attention_backward(values, blk, &cache.attn, n, d, cfg.heads, &dx1, grads, &mut dz1);
    let mut dx = dx1;
    let (dg, db) = split_two(grads, &blk.ln1_g, &blk.ln1_b);
    layer_norm_backward(&cache.ln1, d, &values[blk.ln1_g.clone()], &dz1, dg, db, &mut dx);
    dx
}

// ---------------------------------------------------------------------------
// decoder primitives on channel-major (c, h, w) grids

#[derive(Debug, Clone, Copy)]
struct Grid {
    c: usize,
    h: usize,
    w: usize,
}

impl Grid {
    fn len(&self) -> usize {
        self.c * self.h * self.w
    }
}

/// Column index `x + dx`, or `None` when it leaves a non-wrapping grid.
#[inline]
fn col(x: usize, dx: isize, w: usize, circular: bool) -> Option<usize> {
    let xi = x as isize + dx;
    if circular {
        Some(xi.rem_euclid(w as isize) as usize)
    } else if xi < 0 || xi >= w as isize {
        None
    } else {
        Some(xi as usize)
    }
}

fn conv3x3(values: &[f64], cl: &ConvLayout, input: &[f64], g: Grid, circular: bool) -> Vec<f64> {
    let (h, w) = (g.h, g.w);
    let wts = &values[cl.w.clone()];
    let bias = &values[cl.b.clone()];
    let mut out = vec![0.0; cl.cout * h * w];
    for co in 0..cl.cout {
        let o = &mut out[co * h * w..(co + 1) * h * w];
        o.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..cl.cin {
            let inp = &input[ci * h * w..(ci + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wt = wts[((co * cl.cin + ci) * 3 + ky) * 3 + kx];
                    if wt == 0.0 {
                        continue;
                    }
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let srow = &inp[sy as usize * w..(sy as usize + 1) * w];
                        let orow = &mut o[y * w..(y + 1) * w];
                        for x in 0..w {
                            if let Some(sx) = col(x, kx as isize - 1, w, circular) {
                                orow[x] += wt * srow[sx];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    values: &[f64],
    cl: &ConvLayout,
    input: &[f64],
    g: Grid,
    circular: bool,
    dout: &[f64],
    grads: &mut [f64],
    din: &mut [f64],
) {
    let (h, w) = (g.h, g.w);
    let wts = &values[cl.w.clone()];
    for co in 0..cl.cout {
        let d = &dout[co * h * w..(co + 1) * h * w];
        grads[cl.b.start + co] += d.iter().sum::<f64>();
        for ci in 0..cl.cin {
            let inp = &input[ci * h * w..(ci + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let widx = ((co * cl.cin + ci) * 3 + ky) * 3 + kx;
                    let wt = wts[widx];
                    let mut acc = 0.0;
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        for x in 0..w {
                            if let Some(sx) = col(x, kx as isize - 1, w, circular) {
                                let go = d[y * w + x];
                                acc += go * inp[sy * w + sx];
                                din[ci * h * w + sy * w + sx] += wt * go;
                            }
                        }
                    }
                    grads[cl.w.start + widx] += acc;
                }
            }
        }
    }
}

/// Source taps of a 2x bilinear (half-pixel centred) upsample along one axis.
fn upsample_taps(len: usize, circular: bool) -> Vec<[(usize, f64); 2]> {
    let clampi = |i: isize| -> usize {
        if circular {
            i.rem_euclid(len as isize) as usize
        } else {
            i.clamp(0, len as isize - 1) as usize
        }
    };
    (0..2 * len)
        .map(|o| {
            let i = (o / 2) as isize;
            let other = if o % 2 == 0 { i - 1 } else { i + 1 };
            [(i as usize, 0.75), (clampi(other), 0.25)]
        })
        .collect()
}

fn upsample2x(input: &[f64], g: Grid, circular: bool) -> Vec<f64> {
    let tw = upsample_taps(g.w, circular);
    let th = upsample_taps(g.h, false);
    let (oh, ow) = (2 * g.h, 2 * g.w);
    let mut out = vec![0.0; g.c * oh * ow];
    for c in 0..g.c {
        let inp = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for (y, ty) in th.iter().enumerate() {
            for (x, tx) in tw.iter().enumerate() {
                let mut v = 0.0;
                for &(sy, wy) in ty {
                    for &(sx, wx) in tx {
                        v += wy * wx * inp[sy * g.w + sx];
                    }
                }
                out[c * oh * ow + y * ow + x] = v;
            }
        }
    }
    out
}

fn upsample2x_backward(dout: &[f64], g: Grid, circular: bool) -> Vec<f64> {
    let tw = upsample_taps(g.w, circular);
    let th = upsample_taps(g.h, false);
    let (oh, ow) = (2 * g.h, 2 * g.w);
    let mut din = vec![0.0; g.len()];
    for c in 0..g.c {
        for (y, ty) in th.iter().enumerate() {
            for (x, tx) in tw.iter().enumerate() {
                let go = dout[c * oh * ow + y * ow + x];
                for &(sy, wy) in ty {
                    for &(sx, wx) in tx {
                        din[c * g.h * g.w + sy * g.w + sx] += wy * wx * go;
                    }
                }
            }
        }
    }
    din
}

// ---------------------------------------------------------------------------
// whole branch

struct StageCache {
    input: Vec<f64>,
    grid: Grid,
    pre: Vec<f64>,
}

struct BranchPass {
    patches: Vec<f64>,
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    stages: Vec<StageCache>,
    head_input: Vec<f64>,
    head_grid: Grid,
    output: FeatureMap,
}

fn check_finite(v: &[f64], what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation(what))
    }
}

fn forward_branch(values: &[f64], l: &BranchLayout, cfg: &NetworkConfig, image: &Image) -> Result<BranchPass> {
    let p = cfg.patch;
    let d = cfg.embed_dim;
    let (gw, gh) = (l.grid_w, l.grid_h);
    let n = gw * gh;
    let pp = p * p;
    let mut patches = vec![0.0; n * pp];
    for gy in 0..gh {
        for gx in 0..gw {
            let t = gy * gw + gx;
            for py in 0..p {
                for px in 0..p {
                    patches[t * pp + py * p + px] = image.get(gx * p + px, gy * p + py) as f64 - 0.5;
                }
            }
        }
    }
    let emb = linear(&patches, n, pp, &values[l.patch_w.clone()], &values[l.patch_b.clone()], d);
    let pos = &values[l.pos.clone()];
    let mut x = Vec::with_capacity((n + 1) * d);
    x.extend_from_slice(&values[l.cls.clone()]);
    x.extend_from_slice(&emb);
    for (v, e) in x.iter_mut().zip(pos) {
        *v += e;
    }
    let seq = n + 1;
    let mut blocks = Vec::with_capacity(l.blocks.len());
    for blk in &l.blocks {
        let (nx, cache) = block_forward(values, blk, &x, seq, d, cfg);
        x = nx;
        blocks.push(cache);
    }
    check_finite(&x, "encoder")?;
    let (xf, lnf) = layer_norm(&x, d, &values[l.lnf_g.clone()], &values[l.lnf_b.clone()]);
    // drop CLS, tokens -> channel-major grid
    let mut grid = vec![0.0; d * gh * gw];
    for t in 0..n {
        for c in 0..d {
            grid[c * n + t] = xf[(t + 1) * d + c];
        }
    }
    let mut g = Grid { c: d, h: gh, w: gw };
    let mut stages = Vec::with_capacity(l.stages.len());
    for cl in &l.stages {
        let pre = conv3x3(values, cl, &grid, g, l.circular);
        let act: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
        let ag = Grid { c: cl.cout, ..g };
        let up = upsample2x(&act, ag, l.circular);
        stages.push(StageCache {
            input: std::mem::replace(&mut grid, up),
            grid: g,
            pre,
        });
        g = Grid {
            c: cl.cout,
            h: 2 * g.h,
            w: 2 * g.w,
        };
    }
    let out = conv3x3(values, &l.head, &grid, g, l.circular);
    check_finite(&out, "decoder")?;
    let output = FeatureMap::from_vec(g.w, g.h, l.head.cout, out)?;
    Ok(BranchPass {
        patches,
        blocks,
        lnf,
        stages,
        head_input: grid,
        head_grid: g,
        output,
    })
}

fn backward_branch(
    values: &[f64],
    l: &BranchLayout,
    cfg: &NetworkConfig,
    pass: &BranchPass,
    grad_out: &[f64],
    grads: &mut [f64],
) {
    let d = cfg.embed_dim;
    let (gw, gh) = (l.grid_w, l.grid_h);
    let n = gw * gh;
    let seq = n + 1;
    let mut dgrid = vec![0.0; pass.head_input.len()];
    conv3x3_backward(values, &l.head, &pass.head_input, pass.head_grid, l.circular, grad_out, grads, &mut dgrid);
    for (cl, st) in l.stages.iter().zip(&pass.stages).rev() {
        let ag = Grid { c: cl.cout, ..st.grid };
        let mut dact = upsample2x_backward(&dgrid, ag, l.circular);
        for (g, &p) in dact.iter_mut().zip(&st.pre) {
            *g *= gelu_grad(p);
        }
        let mut din = vec![0.0; st.input.len()];
        conv3x3_backward(values, cl, &st.input, st.grid, l.circular, &dact, grads, &mut din);
        dgrid = din;
    }
    let mut dxf = vec![0.0; seq * d];
    for t in 0..n {
        for c in 0..d {
            dxf[(t + 1) * d + c] = dgrid[c * n + t];
        }
    }
    let mut dx = vec![0.0; seq * d];
    {
        let (dg, db) = split_two(grads, &l.lnf_g, &l.lnf_b);
        layer_norm_backward(&pass.lnf, d, &values[l.lnf_g.clone()], &dxf, dg, db, &mut dx);
    }
    for (blk, cache) in l.blocks.iter().zip(&pass.blocks).rev() {
        dx = block_backward(values, blk, cache, seq, d, cfg, &dx, grads);
    }
    for (g, v) in grads[l.pos.clone()].iter_mut().zip(&dx) {
        *g += v;
    }
    for (g, v) in grads[l.cls.clone()].iter_mut().zip(&dx[..d]) {
        *g += v;
    }
    let pp = cfg.patch * cfg.patch;
    let (dw, db) = split_two(grads, &l.patch_w, &l.patch_b);
    linear_backward(&pass.patches, n, pp, &values[l.patch_w.clone()], d, &dx[d..], dw, db, None);
}

// ---------------------------------------------------------------------------
// training entry point

/// Ground/reference image pairs with ground-truth heading bins.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub ground: Vec<Image>,
    pub reference: Vec<Image>,
    pub gt_bins: Vec<usize>,
}

/// Batch loss and its exact gradient with respect to every parameter.
pub fn forward_backward(batch: &PairBatch, params: &ExtractorParams, loss: &LossConfig) -> Result<(f64, Vec<f64>)> {
    let b = batch.ground.len();
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    if batch.reference.len() != b || batch.gt_bins.len() != b {
        return Err(Error::ShapeMismatch("batch lists differ in length".into()));
    }
    let run = |imgs: &[Image], branch: Branch| -> Result<Vec<(BranchPass, FeatureMap, f64)>> {
        imgs.iter()
            .map(|img| {
                let pass = params.forward(img, branch)?;
                let norm = pass.output.frobenius_norm();
                let unit = normalize(&pass.output)?;
                Ok((pass, unit, norm))
            })
            .collect()
    };
    let ground = run(&batch.ground, Branch::Ground)?;
    let reference = run(&batch.reference, Branch::Reference)?;
    let triplets = TripletBatch {
        ground: ground.iter().map(|g| g.1.clone()).collect(),
        reference: reference.iter().map(|r| r.1.clone()).collect(),
        gt_bins: batch.gt_bins.clone(),
    };
    let (value, dground, dref) = objective::batch_loss_and_grad(&triplets, loss)?;
    let mut grads = vec![0.0; params.len()];
    for ((pass, unit, norm), g) in ground.iter().zip(&dground) {
        let graw = normalize_backward(unit, *norm, g.data());
        params.backward(pass, Branch::Ground, &graw, &mut grads);
    }
    for ((pass, unit, norm), g) in reference.iter().zip(&dref) {
        let graw = normalize_backward(unit, *norm, g.data());
        params.backward(pass, Branch::Reference, &graw, &mut grads);
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(i));
    }
    Ok((value, grads))
}

/// Batch loss only, sharing the exact path used by [`forward_backward`].
pub fn batch_loss(batch: &PairBatch, params: &ExtractorParams, loss: &LossConfig) -> Result<f64> {
    let feats = |imgs: &[Image], branch: Branch| -> Result<Vec<FeatureMap>> {
        imgs.iter().map(|i| normalize(&params.extract(i, branch)?)).collect()
    };
    let triplets = TripletBatch {
        ground: feats(&batch.ground, Branch::Ground)?,
        reference: feats(&batch.reference, Branch::Reference)?,
        gt_bins: batch.gt_bins.clone(),
    };
    objective::batch_loss(&triplets, loss)
}

/// Learned two-branch extractor with frozen weights.
#[derive(Debug, Clone)]
pub struct LearnedExtractor {
    pub params: ExtractorParams,
}

impl FeatureExtractor for LearnedExtractor {
    fn ground_features(&self, image: &Image) -> Result<FeatureMap> {
        normalize(&self.params.extract(image, Branch::Ground)?)
    }

    fn reference_features(&self, polar: &PolarImage) -> Result<FeatureMap> {
        normalize(&self.params.extract(&polar.pixels, Branch::Reference)?)
    }

    fn downsample(&self) -> usize {
        self.params.config.feature_downsample
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            ground_width: 32,
            reference_width: 64,
            height: 16,
            patch: 16,
            embed_dim: 8,
            heads: 2,
            blocks: 1,
            mlp_ratio: 2,
            feature_channels: 4,
            feature_downsample: 8,
            ground_circular: false,
            seed: 11,
        }
    }

    fn noise(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, |_, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn step_against_gradient_lowers_loss() {
        let cfg = NetworkConfig {
            reference_width: 32,
            ground_circular: true,
            ..tiny()
        };
        let p = ExtractorParams::init(cfg).unwrap();
        let refs: Vec<Image> = (0..3).map(|i| noise(32, 16, 40 + i)).collect();
        let batch = PairBatch {
            ground: refs.iter().enumerate().map(|(i, r)| r.roll_columns(8 * i as isize)).collect(),
            reference: refs,
            gt_bins: vec![0, 1, 2],
        };
        let loss = LossConfig::default();
        let (before, grads) = forward_backward(&batch, &p, &loss).unwrap();
        let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        let mut q = p.clone();
        for (v, g) in q.values_mut().iter_mut().zip(&grads) {
            *v -= 1e-3 * g / norm;
        }
        assert!(batch_loss(&batch, &q, &loss).unwrap() < before);
    }

    #[test]
    fn toy_shapes() {
        let cfg = NetworkConfig {
            ground_width: 256,
            reference_width: 256,
            height: 64,
            ..NetworkConfig::default()
        };
        assert_eq!(cfg.token_count(Branch::Reference), 16 * 4);
        let p = ExtractorParams::init(cfg.clone()).unwrap();
        let f = p.extract(&noise(256, 64, 1), Branch::Reference).unwrap();
        assert_eq!(f.shape(), (32, 8, 16));
        assert!(f.is_finite());
    }

    #[test]
    fn parameter_count_is_deterministic() {
        let a = ExtractorParams::init(tiny()).unwrap();
        let b = ExtractorParams::init(tiny()).unwrap();
        assert_eq!(a.len(), b.len());
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn zero_head_gives_zero_features() {
        let mut p = ExtractorParams::init(tiny()).unwrap();
        let r = p.head_range(Branch::Ground);
        p.values_mut()[r].iter_mut().for_each(|v| *v = 0.0);
        let f = p.extract(&noise(32, 16, 2), Branch::Ground).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let p = ExtractorParams::init(tiny()).unwrap();
        assert!(matches!(
            p.extract(&noise(48, 16, 2), Branch::Ground),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn branches_share_initial_weights() {
        let cfg = NetworkConfig {
            ground_width: 64,
            ..tiny()
        };
        let p = ExtractorParams::init(cfg).unwrap();
        let g = p.branch_range(Branch::Ground);
        let r = p.branch_range(Branch::Reference);
        assert_eq!(p.values()[g], p.values()[r]);
    }

    #[test]
    fn checkpoint_round_trip_and_rejection() {
        let p = ExtractorParams::init(tiny()).unwrap();
        let json = p.to_json().unwrap();
        let q = ExtractorParams::from_json(&json, Some(&tiny())).unwrap();
        assert_eq!(p.values(), q.values());
        let other = NetworkConfig { seed: 12, ..tiny() };
        assert!(matches!(
            ExtractorParams::from_json(&json, Some(&other)),
            Err(Error::CheckpointMismatch(_))
        ));
    }

    /// Scalar objective `sum(w * features)` through one branch.
    fn probe(p: &ExtractorParams, img: &Image, branch: Branch, w: &[f64]) -> f64 {
        p.extract(img, branch).unwrap().data().iter().zip(w).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn branch_backward_matches_finite_differences() {
        let p = ExtractorParams::init(tiny()).unwrap();
        for (branch, img) in [(Branch::Ground, noise(32, 16, 3)), (Branch::Reference, noise(64, 16, 4))] {
            let pass = p.forward(&img, branch).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let w: Vec<f64> = (0..pass.output.data().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut grads = vec![0.0; p.len()];
            p.backward(&pass, branch, &w, &mut grads);
            let range = p.branch_range(branch);
            for _ in 0..60 {
                let i = rng.random_range(range.clone());
                let mut plus = p.clone();
                plus.values_mut()[i] += 1e-5;
                let mut minus = p.clone();
                minus.values_mut()[i] -= 1e-5;
                let fd = (probe(&plus, &img, branch, &w) - probe(&minus, &img, branch, &w)) / 2e-5;
                let err = (fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1e-6);
                assert!(err < 1e-4, "param {i}: analytic {} fd {fd}", grads[i]);
            }
        }
    }
}
