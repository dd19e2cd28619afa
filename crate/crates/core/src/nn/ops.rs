//! Dense kernels on channel-major (C, N, H, W) tensors.

/// `c = a * b + beta * c` where `a` is `m x k`, `b` is `k x n`; either
/// operand may be supplied transposed in memory.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe dense row- or
    // column-major matrices inside those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const LANES: usize = 8;

/// Sum with a fixed eight-way split, which lets the compiler vectorise while
/// keeping the result independent of the platform.
pub(crate) fn sum(xs: &[f64]) -> f64 {
    let mut acc = [0.0; LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, x) in acc.iter_mut().zip(c) {
            *a += x;
        }
    }
    acc.iter().sum::<f64>() + tail.iter().sum::<f64>()
}

pub(crate) fn dot(xs: &[f64], ys: &[f64]) -> f64 {
    let mut acc = [0.0; LANES];
    let n = xs.len().min(ys.len());
    let (xs, ys) = (&xs[..n], &ys[..n]);
    let split = n - n % LANES;
    for (cx, cy) in xs[..split].chunks_exact(LANES).zip(ys[..split].chunks_exact(LANES)) {
        for ((a, x), y) in acc.iter_mut().zip(cx).zip(cy) {
            *a += x * y;
        }
    }
    acc.iter().sum::<f64>() + xs[split..].iter().zip(&ys[split..]).map(|(x, y)| x * y).sum::<f64>()
}

/// Spatial extent of one channel plane stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Shape {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Entries per channel across the batch.
    pub fn per_channel(&self) -> usize {
        self.batch * self.plane()
    }
}

/// Unfolds 3x3 neighbourhoods (zero padding 1) of `channels` input
/// channels into a `(channels * 9) x per_channel` matrix.
pub(crate) fn im2col3(input: &[f64], channels: usize, s: Shape, cols: &mut Vec<f64>) {
    let p = s.per_channel();
    cols.resize(channels * 9 * p, 0.0);
    let (h, w) = (s.height, s.width);
    for c in 0..channels {
        let src = &input[c * p..(c + 1) * p];
        for kh in 0..3 {
            for kw in 0..3 {
                let row = &mut cols[((c * 9) + kh * 3 + kw) * p..][..p];
                for (plane, out) in src.chunks_exact(h * w).zip(row.chunks_exact_mut(h * w)) {
                    for (y, dst_row) in out.chunks_exact_mut(w).enumerate() {
                        let sy = y as isize + kh as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            dst_row.fill(0.0);
                            continue;
                        }
                        let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                        match kw {
                            0 => {
                                dst_row[0] = 0.0;
                                dst_row[1..].copy_from_slice(&src_row[..w - 1]);
                            }
                            1 => dst_row.copy_from_slice(src_row),
                            _ => {
                                dst_row[..w - 1].copy_from_slice(&src_row[1..]);
                                dst_row[w - 1] = 0.0;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: accumulates columns back into `grad`.
pub(crate) fn col2im3(cols: &[f64], channels: usize, s: Shape, grad: &mut [f64]) {
    let p = s.per_channel();
    let (h, w) = (s.height, s.width);
    grad[..channels * p].iter_mut().for_each(|v| *v = 0.0);
    for c in 0..channels {
        let dst = &mut grad[c * p..(c + 1) * p];
        for kh in 0..3 {
            for kw in 0..3 {
                let row = &cols[((c * 9) + kh * 3 + kw) * p..][..p];
                for b in 0..s.batch {
                    let src = &row[b * h * w..(b + 1) * h * w];
                    let plane = &mut dst[b * h * w..(b + 1) * h * w];
                    for y in 0..h {
                        let sy = y as isize + kh as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let g = &src[y * w..(y + 1) * w];
                        let t = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                        match kw {
                            0 => t[..w - 1].iter_mut().zip(&g[1..]).for_each(|(a, b)| *a += b),
                            1 => t.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                            _ => t[1..].iter_mut().zip(&g[..w - 1]).for_each(|(a, b)| *a += b),
                        }
                    }
                }
            }
        }
    }
}

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

/// Per-channel values saved by a training-mode batchnorm.
#[derive(Debug, Clone, Default)]
pub(crate) struct BnCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Normalises each channel in place with batch statistics, then scales and
/// shifts, recording what the backward pass needs in `cache`.
pub(crate) fn bn_train(x: &mut [f64], channels: usize, per: usize, gamma: &[f64], beta: &[f64], cache: &mut BnCache) {
    cache.xhat.resize(channels * per, 0.0);
    for v in [&mut cache.inv_std, &mut cache.mean, &mut cache.var] {
        v.resize(channels, 0.0);
    }
    for c in 0..channels {
        let xs = &mut x[c * per..(c + 1) * per];
        let mean = sum(xs) / per as f64;
        let xh = &mut cache.xhat[c * per..(c + 1) * per];
        for (h, o) in xh.iter_mut().zip(xs.iter()) {
            *h = o - mean;
        }
        let var = dot(xh, xh) / per as f64;
        let inv = 1.0 / (var + BN_EPS).sqrt();
        for (o, h) in xs.iter_mut().zip(xh.iter_mut()) {
            *h *= inv;
            *o = gamma[c] * *h + beta[c];
        }
        cache.inv_std[c] = inv;
        cache.mean[c] = mean;
        cache.var[c] = var;
    }
}

pub(crate) fn bn_eval(x: &mut [f64], channels: usize, per: usize, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64]) {
    for c in 0..channels {
        let inv = 1.0 / (var[c] + BN_EPS).sqrt();
        let scale = gamma[c] * inv;
        let shift = beta[c] - mean[c] * scale;
        x[c * per..(c + 1) * per].iter_mut().for_each(|v| *v = *v * scale + shift);
    }
}

/// Backward through batchnorm. `dy` holds the upstream gradient and is
/// overwritten with the gradient w.r.t. the normalised input.
pub(crate) fn bn_backward(
    dy: &mut [f64],
    channels: usize,
    per: usize,
    gamma: &[f64],
    cache: &BnCache,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    let m = per as f64;
    for c in 0..channels {
        let d = &mut dy[c * per..(c + 1) * per];
        let xh = &cache.xhat[c * per..(c + 1) * per];
        let (sum_d, sum_dx) = (sum(d), dot(d, xh));
        dgamma[c] += sum_dx;
        dbeta[c] += sum_d;
        let k = gamma[c] * cache.inv_std[c] / m;
        for (g, h) in d.iter_mut().zip(xh) {
            *g = k * (m * *g - sum_d - h * sum_dx);
        }
    }
}

/// Exponential update of running statistics; variance uses the unbiased
/// batch estimate.
pub(crate) fn bn_update_running(running_mean: &mut [f64], running_var: &mut [f64], cache: &BnCache, per: usize) {
    let correction = if per > 1 { per as f64 / (per - 1) as f64 } else { 1.0 };
    for c in 0..running_mean.len() {
        running_mean[c] = (1.0 - BN_MOMENTUM) * running_mean[c] + BN_MOMENTUM * cache.mean[c];
        running_var[c] = (1.0 - BN_MOMENTUM) * running_var[c] + BN_MOMENTUM * cache.var[c] * correction;
    }
}

pub(crate) fn relu(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes `grad` wherever the post-activation output was not positive.
pub(crate) fn relu_backward(grad: &mut [f64], activated: &[f64]) {
    grad.iter_mut().zip(activated).for_each(|(g, a)| {
        if *a <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Non-overlapping max pooling; also records, for each output entry, the
/// flat input index of its maximum.
pub(crate) fn max_pool(
    input: &[f64],
    channels: usize,
    s: Shape,
    kh: usize,
    kw: usize,
    out: &mut Vec<f64>,
    arg: &mut Vec<usize>,
) {
    let (oh, ow) = (s.height / kh, s.width / kw);
    let n_out = channels * s.batch * oh * ow;
    out.resize(n_out, 0.0);
    arg.resize(n_out, 0);
    let mut o = 0;
    for cb in 0..channels * s.batch {
        let base = cb * s.plane();
        for y in 0..oh {
            let row0 = base + y * kh * s.width;
            for x in 0..ow {
                let first = row0 + x * kw;
                let mut best = input[first];
                let mut best_i = first;
                for dy in 0..kh {
                    let start = row0 + dy * s.width + x * kw;
                    for (i, &v) in input[start..start + kw].iter().enumerate() {
                        if v > best {
                            best = v;
                            best_i = start + i;
                        }
                    }
                }
                out[o] = best;
                arg[o] = best_i;
                o += 1;
            }
        }
    }
}

pub(crate) fn max_pool_backward(grad_out: &[f64], arg: &[usize], grad_in: &mut [f64]) {
    grad_in.fill(0.0);
    for (g, &i) in grad_out.iter().zip(arg) {
        grad_in[i] += g;
    }
}

pub(crate) fn avg_pool(input: &[f64], channels: usize, s: Shape, kh: usize, kw: usize, out: &mut Vec<f64>) {
    let (oh, ow) = (s.height / kh, s.width / kw);
    let scale = 1.0 / (kh * kw) as f64;
    out.resize(channels * s.batch * oh * ow, 0.0);
    for (src, dst) in input.chunks_exact(s.plane()).zip(out.chunks_exact_mut(oh * ow)) {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for dy in 0..kh {
                    let start = (y * kh + dy) * s.width + x * kw;
                    acc += src[start..start + kw].iter().sum::<f64>();
                }
                dst[y * ow + x] = acc * scale;
            }
        }
    }
}

pub(crate) fn avg_pool_backward(grad_out: &[f64], channels: usize, s: Shape, kh: usize, kw: usize, grad_in: &mut [f64]) {
    let (oh, ow) = (s.height / kh, s.width / kw);
    let scale = 1.0 / (kh * kw) as f64;
    let n = channels * s.batch;
    for (src, dst) in grad_out.chunks_exact(oh * ow).zip(grad_in[..n * s.plane()].chunks_exact_mut(s.plane())) {
        for y in 0..oh {
            for x in 0..ow {
                let g = src[y * ow + x] * scale;
                for dy in 0..kh {
                    let start = (y * kh + dy) * s.width + x * kw;
                    dst[start..start + kw].fill(g);
                }
            }
        }
    }
}

/// `L` consecutive outputs of `sum_c sum_tap w[c, tap] * data[at(c, tap) + l]`,
/// accumulated in channel-then-tap order.
#[inline(always)]
fn stencil<const L: usize>(data: &[f64], channels: usize, w: &[f64], at: impl Fn(usize, usize) -> usize) -> [f64; L] {
    let mut acc = [0.0; L];
    for c in 0..channels {
        for t in 0..9 {
            let wv = w[c * 9 + t];
            let x: &[f64; L] = data[at(c, t)..][..L].try_into().expect("fixed chunk");
            for l in 0..L {
                acc[l] += wv * x[l];
            }
        }
    }
    acc
}

/// Output positions accumulated in registers at once.
const CHUNK: usize = 16;
/// Lanes per weight-gradient accumulator.
const WLANES: usize = 2;

/// Channel planes with a one-pixel zero border around every image and a
/// margin at both ends, so that every 3x3 tap is a constant offset into
/// the buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Padded {
    pub s: Shape,
}

impl Padded {
    fn pw(&self) -> usize {
        self.s.width + 2
    }

    /// Positions on the padded grid (interior and border).
    pub fn grid(&self) -> usize {
        self.s.batch * (self.s.height + 2) * self.pw()
    }

    pub fn margin(&self) -> usize {
        self.pw() + 1
    }

    /// Length of one padded channel including both margins.
    pub fn stride(&self) -> usize {
        self.grid() + 2 * self.margin()
    }

    /// Signed offset of tap `(kh, kw)` on the padded grid.
    fn tap(&self, kh: usize, kw: usize) -> usize {
        // shifted by the margin so the result is non-negative
        self.margin() + kh * self.pw() + kw - self.pw() - 1
    }

    /// Copies unpadded channels in, zeroing borders and margins.
    pub fn pad(&self, src: &[f64], channels: usize, dst: &mut Vec<f64>) {
        let (h, w, pw) = (self.s.height, self.s.width, self.pw());
        dst.clear();
        dst.resize(channels * self.stride(), 0.0);
        for c in 0..channels {
            let out = &mut dst[c * self.stride() + self.margin()..][..self.grid()];
            let inp = &src[c * self.s.per_channel()..(c + 1) * self.s.per_channel()];
            for b in 0..self.s.batch {
                for y in 0..h {
                    let o = (b * (h + 2) + y + 1) * pw + 1;
                    out[o..o + w].copy_from_slice(&inp[(b * h + y) * w..][..w]);
                }
            }
        }
    }

    /// Copies the interior of padded-grid channels (no margins) out.
    pub fn unpad_grid(&self, src: &[f64], channels: usize, dst: &mut [f64]) {
        let (h, w, pw) = (self.s.height, self.s.width, self.pw());
        for c in 0..channels {
            let inp = &src[c * self.grid()..(c + 1) * self.grid()];
            let out = &mut dst[c * self.s.per_channel()..(c + 1) * self.s.per_channel()];
            for b in 0..self.s.batch {
                for y in 0..h {
                    let o = (b * (h + 2) + y + 1) * pw + 1;
                    out[(b * h + y) * w..][..w].copy_from_slice(&inp[o..o + w]);
                }
            }
        }
    }

    fn taps(&self) -> [usize; 9] {
        std::array::from_fn(|t| self.tap(t / 3, t % 3))
    }

    /// `out[o] = sum_c sum_tap w[o, c, tap] * shift(input[c])` on the padded
    /// grid. `input` is in padded layout with margins; `out` holds `cout`
    /// grids without margins. Border cells of `out` are meaningless.
    pub fn conv(&self, input: &[f64], cin: usize, weights: &[f64], cout: usize, out: &mut [f64]) {
        let (q, stride, taps) = (self.grid(), self.stride(), self.taps());
        for o in 0..cout {
            let w = &weights[o * cin * 9..(o + 1) * cin * 9];
            let dst = &mut out[o * q..(o + 1) * q];
            let src = |c: usize, t: usize, i: usize| c * stride + taps[t] + i;
            let full = q - q % CHUNK;
            for i in (0..full).step_by(CHUNK) {
                dst[i..i + CHUNK].copy_from_slice(&stencil::<CHUNK>(input, cin, w, |c, t| src(c, t, i)));
            }
            for (i, d) in dst.iter_mut().enumerate().skip(full) {
                *d = stencil::<1>(input, cin, w, |c, t| src(c, t, i))[0];
            }
        }
    }

    /// Weight and input gradients of [`Padded::conv`]. `grad_out` holds
    /// `cout` padded channels (zero borders); `grad_in` receives `cin` padded
    /// channels whose interior is the input gradient.
    #[allow(clippy::too_many_arguments)]
    pub fn conv_backward(
        &self,
        input: &[f64],
        cin: usize,
        weights: &[f64],
        cout: usize,
        grad_out: &[f64],
        grad_w: &mut [f64],
        grad_in: &mut Vec<f64>,
    ) {
        let (q, stride, margin, taps) = (self.grid(), self.stride(), self.margin(), self.taps());
        let full = q - q % WLANES;
        for o in 0..cout {
            let g = &grad_out[o * stride + margin..][..q];
            for c in 0..cin {
                let chan = &input[c * stride..];
                let mut acc = [[0.0; WLANES]; 9];
                for i in (0..full).step_by(WLANES) {
                    let gv: &[f64; WLANES] = g[i..i + WLANES].try_into().expect("fixed chunk");
                    for (a, &off) in acc.iter_mut().zip(&taps) {
                        let x: &[f64; WLANES] = chan[off + i..off + i + WLANES].try_into().expect("fixed chunk");
                        for l in 0..WLANES {
                            a[l] += gv[l] * x[l];
                        }
                    }
                }
                for (t, a) in acc.iter().enumerate() {
                    let tail: f64 = (full..q).map(|k| g[k] * chan[taps[t] + k]).sum();
                    grad_w[(o * cin + c) * 9 + t] = a.iter().sum::<f64>() + tail;
                }
            }
        }
        // transposed convolution: input cell `p` collects `w * g[p - tap]`,
        // which sits at `p + 2 * margin - tap` in the margin-padded `grad_out`
        let mut flipped = vec![0.0; cout * 9];
        grad_in.clear();
        grad_in.resize(cin * stride, 0.0);
        let full = q - q % CHUNK;
        for c in 0..cin {
            for o in 0..cout {
                flipped[o * 9..(o + 1) * 9].copy_from_slice(&weights[(o * cin + c) * 9..][..9]);
            }
            let src = |o: usize, t: usize, i: usize| o * stride + i + 2 * margin - taps[t];
            let dst = &mut grad_in[c * stride + margin..][..q];
            for i in (0..full).step_by(CHUNK) {
                dst[i..i + CHUNK].copy_from_slice(&stencil::<CHUNK>(grad_out, cout, &flipped, |o, t| src(o, t, i)));
            }
            for (i, d) in dst.iter_mut().enumerate().skip(full) {
                *d = stencil::<1>(grad_out, cout, &flipped, |o, t| src(o, t, i))[0];
            }
        }
    }

    /// Interior of padded channels (with margins) into unpadded layout.
    pub fn unpad(&self, src: &[f64], channels: usize, dst: &mut [f64]) {
        for c in 0..channels {
            let grid = &src[c * self.stride() + self.margin()..][..self.grid()];
            self.unpad_grid(grid, 1, &mut dst[c * self.s.per_channel()..(c + 1) * self.s.per_channel()]);
        }
    }
}
