use super::ops::{self, BnCache, Padded, Shape};
use super::params::{idx, Dims, Gradients, ModelParams, GROUP_IN, GROUP_OUT};
use super::train::{sigmoid, PROB_EPS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batchnorm; a cache is returned for backward.
    Train,
    /// Running statistics in batchnorm.
    Eval,
}

/// Per-band sigmoid outputs for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
}

/// Row-major `batch x N_f` probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPrediction {
    pub n_bands: usize,
    pub probs: Vec<f64>,
}

impl BatchPrediction {
    pub fn len(&self) -> usize {
        self.probs.len() / self.n_bands
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn sample(&self, b: usize) -> &[f64] {
        &self.probs[b * self.n_bands..(b + 1) * self.n_bands]
    }

    pub fn prediction(&self, b: usize) -> Prediction {
        Prediction {
            probs: self.sample(b).to_vec(),
        }
    }
}

/// Activations saved by a forward pass. A cache can be handed back to
/// [`forward_into`] to reuse its buffers.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    /// `None` after an eval pass: the contents cannot feed backward.
    version: Option<u64>,
    batch: usize,
    cols1: Vec<f64>,
    bn1: BnCache,
    a1: Vec<f64>,
    pooled1: Vec<f64>,
    pool_arg: Vec<usize>,
    cols2: Vec<f64>,
    bn2: BnCache,
    a2: Vec<f64>,
    a2_padded: Vec<f64>,
    bn3: BnCache,
    a3: Vec<f64>,
    pooled: Vec<f64>,
    probs: Vec<f64>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Parameter version the cache was produced with (train mode only).
    pub fn version(&self) -> Option<u64> {
        self.version
    }
}

/// Temporaries of the backward pass, reusable across calls.
#[derive(Debug, Clone, Default)]
pub struct BackwardScratch {
    d_pooled: Vec<f64>,
    dz3: Vec<f64>,
    da2: Vec<f64>,
    dz3_padded: Vec<f64>,
    da2_padded: Vec<f64>,
    dcols2: Vec<f64>,
    dp1: Vec<f64>,
    da1: Vec<f64>,
    g3: Vec<f64>,
    dg3: Vec<f64>,
    db3: Vec<f64>,
}

fn deep_concat(params: &ModelParams, seg: usize, out: &mut Vec<f64>) {
    out.clear();
    for n in 0..params.n_bands() {
        out.extend_from_slice(params.deep_seg(n, seg));
    }
}

fn reset(v: &mut Vec<f64>, len: usize) {
    v.clear();
    v.resize(len, 0.0);
}

/// Runs the network on `inputs`, a concatenation of row-major
/// `N_w x N_f` matrices. Train mode also returns the cache for [`backward`].
pub fn forward(params: &ModelParams, inputs: &[f64], mode: Mode) -> Result<(BatchPrediction, Option<ForwardCache>)> {
    let mut cache = ForwardCache::default();
    let pred = forward_into(params, inputs, mode, &mut cache)?;
    Ok((pred, (mode == Mode::Train).then_some(cache)))
}

/// [`forward`] writing activations into an existing cache.
pub fn forward_into(params: &ModelParams, inputs: &[f64], mode: Mode, cache: &mut ForwardCache) -> Result<BatchPrediction> {
    let d: Dims = *params.dims();
    let features = d.in_h * d.in_w;
    if inputs.is_empty() || !inputs.len().is_multiple_of(features) {
        return Err(Error::Dimension(format!(
            "input length {} is not a positive multiple of {}x{}",
            inputs.len(),
            d.in_h,
            d.in_w
        )));
    }
    let batch = inputs.len() / features;
    let train = mode == Mode::Train;
    cache.version = None;
    cache.batch = batch;
    let s0 = Shape { batch, height: d.in_h, width: d.in_w };
    let s1 = Shape { batch, height: d.mid_h, width: d.mid_w };
    let (p0, p1) = (s0.per_channel(), s1.per_channel());
    let c = cache;

    // shared conv 1
    ops::im2col3(inputs, 1, s0, &mut c.cols1);
    c.a1.resize(d.c1 * p0, 0.0);
    ops::gemm(d.c1, 9, p0, params.shallow_seg(idx::CONV1), false, &c.cols1, false, 0.0, &mut c.a1);
    let (g1, b1) = (params.shallow_seg(idx::BN1_GAMMA), params.shallow_seg(idx::BN1_BETA));
    if train {
        ops::bn_train(&mut c.a1, d.c1, p0, g1, b1, &mut c.bn1);
    } else {
        let (m, v) = (params.shallow_seg(idx::BN1_MEAN), params.shallow_seg(idx::BN1_VAR));
        ops::bn_eval(&mut c.a1, d.c1, p0, g1, b1, m, v);
    }
    ops::relu(&mut c.a1);
    ops::max_pool(&c.a1, d.c1, s0, d.max_pool[0], d.max_pool[1], &mut c.pooled1, &mut c.pool_arg);

    // shared conv 2
    ops::im2col3(&c.pooled1, d.c1, s1, &mut c.cols2);
    c.a2.resize(d.c2 * p1, 0.0);
    ops::gemm(d.c2, d.c1 * 9, p1, params.shallow_seg(idx::CONV2), false, &c.cols2, false, 0.0, &mut c.a2);
    let (g2, b2) = (params.shallow_seg(idx::BN2_GAMMA), params.shallow_seg(idx::BN2_BETA));
    if train {
        ops::bn_train(&mut c.a2, d.c2, p1, g2, b2, &mut c.bn2);
    } else {
        let (m, v) = (params.shallow_seg(idx::BN2_MEAN), params.shallow_seg(idx::BN2_VAR));
        ops::bn_eval(&mut c.a2, d.c2, p1, g2, b2, m, v);
    }
    ops::relu(&mut c.a2);

    // band-specific grouped conv
    let n_f = params.n_bands();
    let pd = Padded { s: s1 };
    pd.pad(&c.a2, d.c2, &mut c.a2_padded);
    let mut grid = vec![0.0; GROUP_OUT * pd.grid()];
    c.a3.resize(d.c3 * p1, 0.0);
    for n in 0..n_f {
        let input = &c.a2_padded[n * GROUP_IN * pd.stride()..(n + 1) * GROUP_IN * pd.stride()];
        pd.conv(input, GROUP_IN, params.deep_seg(n, idx::GCONV), GROUP_OUT, &mut grid);
        pd.unpad_grid(&grid, GROUP_OUT, &mut c.a3[n * GROUP_OUT * p1..(n + 1) * GROUP_OUT * p1]);
    }
    let (mut g3, mut b3) = (Vec::new(), Vec::new());
    deep_concat(params, idx::BN3_GAMMA, &mut g3);
    deep_concat(params, idx::BN3_BETA, &mut b3);
    if train {
        ops::bn_train(&mut c.a3, d.c3, p1, &g3, &b3, &mut c.bn3);
    } else {
        let (mut m, mut v) = (Vec::new(), Vec::new());
        deep_concat(params, idx::BN3_MEAN, &mut m);
        deep_concat(params, idx::BN3_VAR, &mut v);
        ops::bn_eval(&mut c.a3, d.c3, p1, &g3, &b3, &m, &v);
    }
    ops::relu(&mut c.a3);
    ops::avg_pool(&c.a3, d.c3, s1, d.avg_pool[0], d.avg_pool[1], &mut c.pooled);

    // per-band heads
    let plane = d.out_h * d.out_w;
    reset(&mut c.probs, batch * n_f);
    for n in 0..n_f {
        let w = params.deep_seg(n, idx::FC_W);
        let bias = params.deep_seg(n, idx::FC_B)[0];
        for b in 0..batch {
            let mut logit = bias;
            for k in 0..GROUP_OUT {
                let ch = n * GROUP_OUT + k;
                let feat = &c.pooled[(ch * batch + b) * plane..][..plane];
                logit += w[k * plane..(k + 1) * plane].iter().zip(feat).map(|(x, y)| x * y).sum::<f64>();
            }
            c.probs[b * n_f + n] = sigmoid(logit);
        }
    }
    if train {
        c.version = Some(params.version());
    }
    Ok(BatchPrediction {
        n_bands: n_f,
        probs: c.probs.clone(),
    })
}

/// Gradient of the masked BCE summed over bands and over the batch.
/// `labels` is row-major `batch x N_f`; `mask` has one entry per band.
pub fn backward(params: &ModelParams, cache: &ForwardCache, labels: &[u8], mask: &[u8]) -> Result<Gradients> {
    let mut grads = params.zero_gradients();
    backward_into(params, cache, labels, mask, &mut grads, &mut BackwardScratch::default())?;
    Ok(grads)
}

/// [`backward`] overwriting `grads` and reusing `scratch`.
pub fn backward_into(
    params: &ModelParams,
    cache: &ForwardCache,
    labels: &[u8],
    mask: &[u8],
    grads: &mut Gradients,
    scratch: &mut BackwardScratch,
) -> Result<()> {
    match cache.version {
        Some(v) if v == params.version() => {}
        Some(v) => {
            return Err(Error::StaleCache {
                cache: v,
                params: params.version(),
            })
        }
        None => return Err(Error::InvalidParameter("backward needs a train-mode forward cache".into())),
    }
    let d: Dims = *params.dims();
    let n_f = params.n_bands();
    let batch = cache.batch;
    if labels.len() != batch * n_f || mask.len() != n_f {
        return Err(Error::Dimension(format!(
            "labels {} / mask {} do not match batch {batch} x {n_f} bands",
            labels.len(),
            mask.len()
        )));
    }
    let layout = params.layout();
    if grads.shallow.len() != layout.shallow_len()
        || grads.deep.len() != n_f
        || grads.deep.iter().any(|g| g.len() != layout.deep_len())
    {
        return Err(Error::Dimension("gradient buffer does not match parameters".into()));
    }
    grads.shallow.fill(0.0);
    grads.deep.iter_mut().for_each(|g| g.fill(0.0));
    let s0 = Shape { batch, height: d.in_h, width: d.in_w };
    let s1 = Shape { batch, height: d.mid_h, width: d.mid_w };
    let (p0, p1) = (s0.per_channel(), s1.per_channel());
    let plane = d.out_h * d.out_w;
    let sc = scratch;

    // heads
    reset(&mut sc.d_pooled, d.c3 * batch * plane);
    for n in (0..n_f).filter(|&n| mask[n] != 0) {
        let w = params.deep_seg(n, idx::FC_W);
        let gb = &mut grads.deep[n];
        let (w_range, b_off) = (layout.deep[idx::FC_W].range(), layout.deep[idx::FC_B].offset);
        for b in 0..batch {
            let q = cache.probs[b * n_f + n];
            let dlogit = if (PROB_EPS..=1.0 - PROB_EPS).contains(&q) {
                q - f64::from(labels[b * n_f + n])
            } else {
                0.0
            };
            if dlogit == 0.0 {
                continue;
            }
            gb[b_off] += dlogit;
            for k in 0..GROUP_OUT {
                let ch = n * GROUP_OUT + k;
                let feat = &cache.pooled[(ch * batch + b) * plane..][..plane];
                let gw = &mut gb[w_range.clone()][k * plane..(k + 1) * plane];
                gw.iter_mut().zip(feat).for_each(|(g, x)| *g += dlogit * x);
                let dp = &mut sc.d_pooled[(ch * batch + b) * plane..][..plane];
                dp.iter_mut().zip(&w[k * plane..(k + 1) * plane]).for_each(|(g, x)| *g += dlogit * x);
            }
        }
    }

    // grouped conv block
    sc.dz3.resize(d.c3 * p1, 0.0);
    ops::avg_pool_backward(&sc.d_pooled, d.c3, s1, d.avg_pool[0], d.avg_pool[1], &mut sc.dz3);
    ops::relu_backward(&mut sc.dz3, &cache.a3);
    deep_concat(params, idx::BN3_GAMMA, &mut sc.g3);
    reset(&mut sc.dg3, d.c3);
    reset(&mut sc.db3, d.c3);
    ops::bn_backward(&mut sc.dz3, d.c3, p1, &sc.g3, &cache.bn3, &mut sc.dg3, &mut sc.db3);
    sc.da2.resize(d.c2 * p1, 0.0);
    let pd = Padded { s: s1 };
    pd.pad(&sc.dz3, d.c3, &mut sc.dz3_padded);
    for n in 0..n_f {
        let gb = &mut grads.deep[n];
        for k in 0..GROUP_OUT {
            gb[layout.deep[idx::BN3_GAMMA].offset + k] = sc.dg3[n * GROUP_OUT + k];
            gb[layout.deep[idx::BN3_BETA].offset + k] = sc.db3[n * GROUP_OUT + k];
        }
        let input = &cache.a2_padded[n * GROUP_IN * pd.stride()..(n + 1) * GROUP_IN * pd.stride()];
        let dz = &sc.dz3_padded[n * GROUP_OUT * pd.stride()..(n + 1) * GROUP_OUT * pd.stride()];
        pd.conv_backward(
            input,
            GROUP_IN,
            params.deep_seg(n, idx::GCONV),
            GROUP_OUT,
            dz,
            &mut gb[layout.deep[idx::GCONV].range()],
            &mut sc.da2_padded,
        );
        pd.unpad(&sc.da2_padded, GROUP_IN, &mut sc.da2[n * GROUP_IN * p1..(n + 1) * GROUP_IN * p1]);
    }

    // shared conv 2
    let sh = &layout.shallow;
    ops::relu_backward(&mut sc.da2, &cache.a2);
    {
        let (lo, hi) = grads.shallow.split_at_mut(sh[idx::BN2_BETA].offset);
        ops::bn_backward(
            &mut sc.da2,
            d.c2,
            p1,
            params.shallow_seg(idx::BN2_GAMMA),
            &cache.bn2,
            &mut lo[sh[idx::BN2_GAMMA].range()],
            &mut hi[..d.c2],
        );
    }
    let dz2 = &sc.da2;
    ops::gemm(d.c2, p1, d.c1 * 9, dz2, false, &cache.cols2, true, 0.0, &mut grads.shallow[sh[idx::CONV2].range()]);
    sc.dcols2.resize(d.c1 * 9 * p1, 0.0);
    ops::gemm(d.c1 * 9, d.c2, p1, params.shallow_seg(idx::CONV2), true, dz2, false, 0.0, &mut sc.dcols2);
    sc.dp1.resize(d.c1 * p1, 0.0);
    ops::col2im3(&sc.dcols2, d.c1, s1, &mut sc.dp1);

    // shared conv 1
    sc.da1.resize(d.c1 * p0, 0.0);
    ops::max_pool_backward(&sc.dp1, &cache.pool_arg, &mut sc.da1);
    ops::relu_backward(&mut sc.da1, &cache.a1);
    {
        let (lo, hi) = grads.shallow.split_at_mut(sh[idx::BN1_BETA].offset);
        ops::bn_backward(
            &mut sc.da1,
            d.c1,
            p0,
            params.shallow_seg(idx::BN1_GAMMA),
            &cache.bn1,
            &mut lo[sh[idx::BN1_GAMMA].range()],
            &mut hi[..d.c1],
        );
    }
    ops::gemm(d.c1, p0, 9, &sc.da1, false, &cache.cols1, true, 0.0, &mut grads.shallow[sh[idx::CONV1].range()]);
    Ok(())
}

/// Folds the batch statistics of a training forward pass into the running
/// batchnorm estimates. Band-specific statistics are only updated for bands
/// with `mask != 0`.
pub fn update_running_stats(params: &mut ModelParams, cache: &ForwardCache, mask: &[u8]) -> Result<()> {
    if cache.version.is_none() {
        return Err(Error::InvalidParameter("running statistics need a train-mode forward cache".into()));
    }
    if mask.len() != params.n_bands() {
        return Err(Error::Dimension(format!("mask has {} bands, model {}", mask.len(), params.n_bands())));
    }
    let d = *params.dims();
    let per0 = cache.batch * d.in_h * d.in_w;
    let per1 = cache.batch * d.mid_h * d.mid_w;
    let layout = params.layout().clone();
    let sh = &layout.shallow;
    let shallow = params.shallow_mut();
    for (mean_i, bn, per) in [(idx::BN1_MEAN, &cache.bn1, per0), (idx::BN2_MEAN, &cache.bn2, per1)] {
        let (lo, hi) = shallow.split_at_mut(sh[mean_i + 1].offset);
        let var_len = sh[mean_i + 1].len();
        ops::bn_update_running(&mut lo[sh[mean_i].range()], &mut hi[..var_len], bn, per);
    }
    let dp = &layout.deep;
    for n in (0..params.n_bands()).filter(|&n| mask[n] != 0) {
        let slice = |v: &[f64]| v[n * GROUP_OUT..(n + 1) * GROUP_OUT].to_vec();
        let local = BnCache {
            xhat: Vec::new(),
            inv_std: Vec::new(),
            mean: slice(&cache.bn3.mean),
            var: slice(&cache.bn3.var),
        };
        let block = params.deep_mut(n);
        let (lo, hi) = block.split_at_mut(dp[idx::BN3_VAR].offset);
        ops::bn_update_running(&mut lo[dp[idx::BN3_MEAN].range()], &mut hi[..GROUP_OUT], &local, per1);
    }
    Ok(())
}
