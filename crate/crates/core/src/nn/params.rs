use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, tag};

/// Filters per group in the band-specific grouped convolution.
pub const GROUP_OUT: usize = 3;
/// Input channels per group (the shared conv emits `2 * N_f` channels).
pub const GROUP_IN: usize = 2;

/// Network shape. Pooling kernels default to `N_w/16 x 1` (max) and
/// `4 x N_f/4` (average) when left unset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub n_points: usize,
    pub n_bands: usize,
    #[serde(default = "default_shallow_filters")]
    pub shallow_filters: usize,
    #[serde(default)]
    pub max_pool: Option<[usize; 2]>,
    #[serde(default)]
    pub avg_pool: Option<[usize; 2]>,
}

fn default_shallow_filters() -> usize {
    40
}

/// Derived tensor sizes of a validated [`ArchConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub c1: usize,
    pub c2: usize,
    pub c3: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub mid_h: usize,
    pub mid_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub max_pool: [usize; 2],
    pub avg_pool: [usize; 2],
    /// Inputs to each band's fully connected head.
    pub head_in: usize,
}

impl ArchConfig {
    pub fn new(n_points: usize, n_bands: usize) -> Self {
        ArchConfig {
            n_points,
            n_bands,
            shallow_filters: default_shallow_filters(),
            max_pool: None,
            avg_pool: None,
        }
    }

    pub fn with_shallow_filters(mut self, filters: usize) -> Self {
        self.shallow_filters = filters;
        self
    }

    pub fn with_pools(mut self, max_pool: [usize; 2], avg_pool: [usize; 2]) -> Self {
        self.max_pool = Some(max_pool);
        self.avg_pool = Some(avg_pool);
        self
    }

    pub fn dims(&self) -> Result<Dims> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.n_points == 0 || self.n_bands == 0 || self.shallow_filters == 0 {
            return bad("network dimensions must be positive".into());
        }
        let max_pool = match self.max_pool {
            Some(k) => k,
            None => {
                if !self.n_points.is_multiple_of(16) {
                    return bad(format!("N_w = {} is not a multiple of 16; set max_pool explicitly", self.n_points));
                }
                [self.n_points / 16, 1]
            }
        };
        if max_pool.contains(&0) || !self.n_points.is_multiple_of(max_pool[0]) || !self.n_bands.is_multiple_of(max_pool[1]) {
            return bad(format!("max pool {max_pool:?} does not tile {}x{}", self.n_points, self.n_bands));
        }
        let (mid_h, mid_w) = (self.n_points / max_pool[0], self.n_bands / max_pool[1]);
        let avg_pool = match self.avg_pool {
            Some(k) => k,
            None => {
                if mid_w % 4 != 0 {
                    return bad(format!("pooled width {mid_w} is not a multiple of 4; set avg_pool explicitly"));
                }
                [4, mid_w / 4]
            }
        };
        if avg_pool.contains(&0) || mid_h % avg_pool[0] != 0 || mid_w % avg_pool[1] != 0 {
            return bad(format!("avg pool {avg_pool:?} does not tile {mid_h}x{mid_w}"));
        }
        let (out_h, out_w) = (mid_h / avg_pool[0], mid_w / avg_pool[1]);
        Ok(Dims {
            c1: self.shallow_filters,
            c2: GROUP_IN * self.n_bands,
            c3: GROUP_OUT * self.n_bands,
            in_h: self.n_points,
            in_w: self.n_bands,
            mid_h,
            mid_w,
            out_h,
            out_w,
            max_pool,
            avg_pool,
            head_in: GROUP_OUT * out_h * out_w,
        })
    }
}

/// Whether a segment is trained by SGD or maintained by batchnorm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Weight,
    Running,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub kind: SegmentKind,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

fn build_layout(specs: Vec<(&'static str, Vec<usize>, SegmentKind)>) -> Vec<Segment> {
    let mut offset = 0;
    specs
        .into_iter()
        .map(|(name, shape, kind)| {
            let s = Segment { name, shape, kind, offset };
            offset += s.len();
            s
        })
        .collect()
}

/// Offsets of named tensors inside the flat shallow and deep vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub shallow: Vec<Segment>,
    pub deep: Vec<Segment>,
}

pub(crate) mod idx {
    pub const CONV1: usize = 0;
    pub const BN1_GAMMA: usize = 1;
    pub const BN1_BETA: usize = 2;
    pub const BN1_MEAN: usize = 3;
    pub const BN1_VAR: usize = 4;
    pub const CONV2: usize = 5;
    pub const BN2_GAMMA: usize = 6;
    pub const BN2_BETA: usize = 7;
    pub const BN2_MEAN: usize = 8;
    pub const BN2_VAR: usize = 9;

    pub const GCONV: usize = 0;
    pub const BN3_GAMMA: usize = 1;
    pub const BN3_BETA: usize = 2;
    pub const BN3_MEAN: usize = 3;
    pub const BN3_VAR: usize = 4;
    pub const FC_W: usize = 5;
    pub const FC_B: usize = 6;
}

impl Layout {
    pub fn new(d: &Dims) -> Self {
        use SegmentKind::*;
        let shallow = build_layout(vec![
            ("conv1", vec![d.c1, 1, 3, 3], Weight),
            ("bn1.gamma", vec![d.c1], Weight),
            ("bn1.beta", vec![d.c1], Weight),
            ("bn1.running_mean", vec![d.c1], Running),
            ("bn1.running_var", vec![d.c1], Running),
            ("conv2", vec![d.c2, d.c1, 3, 3], Weight),
            ("bn2.gamma", vec![d.c2], Weight),
            ("bn2.beta", vec![d.c2], Weight),
            ("bn2.running_mean", vec![d.c2], Running),
            ("bn2.running_var", vec![d.c2], Running),
        ]);
        let deep = build_layout(vec![
            ("gconv", vec![GROUP_OUT, GROUP_IN, 3, 3], Weight),
            ("bn3.gamma", vec![GROUP_OUT], Weight),
            ("bn3.beta", vec![GROUP_OUT], Weight),
            ("bn3.running_mean", vec![GROUP_OUT], Running),
            ("bn3.running_var", vec![GROUP_OUT], Running),
            ("fc.weight", vec![d.head_in], Weight),
            ("fc.bias", vec![1], Weight),
        ]);
        Layout { shallow, deep }
    }

    pub fn shallow_len(&self) -> usize {
        self.shallow.last().map_or(0, |s| s.offset + s.len())
    }

    pub fn deep_len(&self) -> usize {
        self.deep.last().map_or(0, |s| s.offset + s.len())
    }
}

/// Flat parameter vectors: one shared (shallow) block and one block per band.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlocks {
    pub shallow: Vec<f64>,
    pub deep: Vec<Vec<f64>>,
}

impl ParamBlocks {
    pub fn zeros(layout: &Layout, n_bands: usize) -> Self {
        ParamBlocks {
            shallow: vec![0.0; layout.shallow_len()],
            deep: vec![vec![0.0; layout.deep_len()]; n_bands],
        }
    }

    pub fn len(&self) -> usize {
        self.shallow.len() + self.deep.iter().map(Vec::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.shallow.iter().chain(self.deep.iter().flatten())
    }
}

/// Gradients share the parameter layout; running-statistic entries stay 0.
pub type Gradients = ParamBlocks;

/// Model parameters plus a version stamp that changes on every mutation.
#[derive(Debug, Clone)]
pub struct ModelParams {
    arch: ArchConfig,
    dims: Dims,
    layout: Layout,
    blocks: ParamBlocks,
    version: u64,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.blocks == other.blocks
    }
}

impl AsRef<ModelParams> for ModelParams {
    fn as_ref(&self) -> &ModelParams {
        self
    }
}

impl AsMut<ModelParams> for ModelParams {
    fn as_mut(&mut self) -> &mut ModelParams {
        self
    }
}

impl ModelParams {
    /// He-uniform weights, zero biases, unit batchnorm scale, running
    /// statistics at mean 0 / variance 1.
    pub fn init<R: Rng + ?Sized>(arch: ArchConfig, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeroed(arch)?;
        let d = p.dims;
        let he = |rng: &mut R, out: &mut [f64], fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            out.iter_mut().for_each(|v| *v = dist.sample(rng));
        };
        let sh = p.layout.shallow.clone();
        he(rng, &mut p.blocks.shallow[sh[idx::CONV1].range()], 9);
        he(rng, &mut p.blocks.shallow[sh[idx::CONV2].range()], 9 * d.c1);
        let dp = p.layout.deep.clone();
        for block in p.blocks.deep.iter_mut() {
            he(rng, &mut block[dp[idx::GCONV].range()], 9 * GROUP_IN);
            he(rng, &mut block[dp[idx::FC_W].range()], d.head_in);
        }
        Ok(p)
    }

    /// Initialisation drawn from the seed's dedicated init substream.
    pub fn init_seeded(arch: ArchConfig, seed: u64) -> Result<Self> {
        Self::init(arch, &mut substream(seed, &[tag::INIT]))
    }

    /// All weights zero; batchnorm scale 1 and running variance 1.
    pub fn zeroed(arch: ArchConfig) -> Result<Self> {
        let dims = arch.dims()?;
        let layout = Layout::new(&dims);
        let mut blocks = ParamBlocks::zeros(&layout, arch.n_bands);
        for i in [idx::BN1_GAMMA, idx::BN1_VAR, idx::BN2_GAMMA, idx::BN2_VAR] {
            blocks.shallow[layout.shallow[i].range()].fill(1.0);
        }
        for block in blocks.deep.iter_mut() {
            for i in [idx::BN3_GAMMA, idx::BN3_VAR] {
                block[layout.deep[i].range()].fill(1.0);
            }
        }
        Ok(ModelParams {
            arch,
            dims,
            layout,
            blocks,
            version: 0,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn blocks(&self) -> &ParamBlocks {
        &self.blocks
    }

    pub fn shallow(&self) -> &[f64] {
        &self.blocks.shallow
    }

    pub fn deep(&self, band: usize) -> &[f64] {
        &self.blocks.deep[band]
    }

    pub fn n_bands(&self) -> usize {
        self.arch.n_bands
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    fn touch(&mut self) {
        self.version = self.version.wrapping_add(1);
    }

    pub fn shallow_mut(&mut self) -> &mut [f64] {
        self.touch();
        &mut self.blocks.shallow
    }

    pub fn deep_mut(&mut self, band: usize) -> &mut [f64] {
        self.touch();
        &mut self.blocks.deep[band]
    }

    pub fn blocks_mut(&mut self) -> &mut ParamBlocks {
        self.touch();
        &mut self.blocks
    }

    pub(crate) fn shallow_seg(&self, i: usize) -> &[f64] {
        &self.blocks.shallow[self.layout.shallow[i].range()]
    }

    pub(crate) fn deep_seg(&self, band: usize, i: usize) -> &[f64] {
        &self.blocks.deep[band][self.layout.deep[i].range()]
    }

    /// Same architecture and layout.
    pub fn compatible(&self, other: &ModelParams) -> bool {
        self.dims == other.dims
    }

    pub fn zero_gradients(&self) -> Gradients {
        ParamBlocks::zeros(&self.layout, self.arch.n_bands)
    }

    /// `w <- w - eta * g` on weight segments; running statistics are left alone.
    pub fn sgd_step(&mut self, grads: &Gradients, eta: f64) -> Result<()> {
        if grads.shallow.len() != self.blocks.shallow.len()
            || grads.deep.len() != self.blocks.deep.len()
            || grads.deep.iter().any(|g| g.len() != self.layout.deep_len())
        {
            return Err(Error::Dimension("gradient shape does not match parameters".into()));
        }
        self.touch();
        let update = |w: &mut [f64], g: &[f64], segs: &[Segment]| {
            for s in segs.iter().filter(|s| s.kind == SegmentKind::Weight) {
                for (wi, gi) in w[s.range()].iter_mut().zip(&g[s.range()]) {
                    *wi -= eta * gi;
                }
            }
        };
        update(&mut self.blocks.shallow, &grads.shallow, &self.layout.shallow);
        for (w, g) in self.blocks.deep.iter_mut().zip(&grads.deep) {
            update(w, g, &self.layout.deep);
        }
        Ok(())
    }

    /// Serialises to the versioned checkpoint format (see `docs/FORMATS.md`).
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("<checkpoint stream>", e);
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let mp = self.dims.max_pool;
        let ap = self.dims.avg_pool;
        for v in [
            self.arch.n_points,
            self.arch.n_bands,
            self.arch.shallow_filters,
            mp[0],
            mp[1],
            ap[0],
            ap[1],
        ] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let n_blocks = self.layout.shallow.len() + self.layout.deep.len() * self.arch.n_bands;
        buf.extend_from_slice(&(n_blocks as u32).to_le_bytes());
        let mut put = |seg: &Segment, data: &[f64]| {
            buf.push(match seg.kind {
                SegmentKind::Weight => 0,
                SegmentKind::Running => 1,
            });
            buf.extend_from_slice(&(seg.shape.len() as u32).to_le_bytes());
            for &d in &seg.shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &data[seg.range()] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        };
        for seg in &self.layout.shallow {
            put(seg, &self.blocks.shallow);
        }
        for block in &self.blocks.deep {
            for seg in &self.layout.deep {
                put(seg, block);
            }
        }
        w.write_all(&buf).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let fmt = |d: &str| Error::Format {
            what: "checkpoint",
            detail: d.to_string(),
        };
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::io("<checkpoint stream>", e))?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(8).ok_or_else(|| fmt("truncated"))? != CHECKPOINT_MAGIC {
            return Err(fmt("bad magic"));
        }
        let version = cur.u32().ok_or_else(|| fmt("truncated"))?;
        if version != CHECKPOINT_VERSION {
            return Err(fmt(&format!("unsupported version {version}")));
        }
        let mut h = [0usize; 7];
        for v in h.iter_mut() {
            *v = cur.u32().ok_or_else(|| fmt("truncated header"))? as usize;
        }
        let arch = ArchConfig {
            n_points: h[0],
            n_bands: h[1],
            shallow_filters: h[2],
            max_pool: Some([h[3], h[4]]),
            avg_pool: Some([h[5], h[6]]),
        };
        let mut p = ModelParams::zeroed(arch).map_err(|e| fmt(&e.to_string()))?;
        let n_blocks = cur.u32().ok_or_else(|| fmt("truncated header"))? as usize;
        let expected = p.layout.shallow.len() + p.layout.deep.len() * arch.n_bands;
        if n_blocks != expected {
            return Err(fmt(&format!("expected {expected} blocks, found {n_blocks}")));
        }
        let mut get = |seg: &Segment, data: &mut [f64]| -> Result<()> {
            let kind = cur.take(1).ok_or_else(|| fmt("truncated block"))?[0];
            let want_kind = u8::from(seg.kind == SegmentKind::Running);
            let ndim = cur.u32().ok_or_else(|| fmt("truncated block"))? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim.min(8) {
                shape.push(cur.u32().ok_or_else(|| fmt("truncated block"))? as usize);
            }
            if kind != want_kind || shape != seg.shape {
                return Err(fmt(&format!("block {} has unexpected kind or shape", seg.name)));
            }
            for v in data[seg.range()].iter_mut() {
                let b = cur.take(8).ok_or_else(|| fmt("truncated data"))?;
                *v = f64::from_le_bytes(b.try_into().expect("8 bytes"));
            }
            Ok(())
        };
        let layout = p.layout.clone();
        for seg in &layout.shallow {
            get(seg, &mut p.blocks.shallow)?;
        }
        for block in p.blocks.deep.iter_mut() {
            for seg in &layout.deep {
                get(seg, block)?;
            }
        }
        if cur.pos != bytes.len() {
            return Err(fmt("trailing bytes"));
        }
        Ok(p)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"IRSNNP01";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}
