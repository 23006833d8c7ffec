//! Dense double-precision tensors and the raw kernels shared by the forward
//! pass, the autodiff tape and the test oracles.
//!
//! Layouts are row-major throughout:
//! * [`SeqTensor`]: `(batch, len, channels)`, token `l` of sample `b` starts at
//!   `(b * len + l) * channels`.
//! * [`SpatialTensor`]: `(batch, channels, height, width)`.
//!
//! Patch tokens are laid out row by row, so token `h * width + w` sits at grid
//! cell `(h, w)`.

use crate::error::{Error, Result};

/// Token sequences, `B x L x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqTensor {
    data: Vec<f64>,
    batch: usize,
    len: usize,
    channels: usize,
}

impl SeqTensor {
    pub fn new(data: Vec<f64>, (batch, len, channels): (usize, usize, usize)) -> Result<Self> {
        if batch == 0 || len == 0 || channels == 0 {
            return Err(Error::shape(format!(
                "sequence dims must be positive, got ({batch}, {len}, {channels})"
            )));
        }
        if data.len() != batch * len * channels {
            return Err(Error::shape(format!(
                "sequence data has {} entries, shape ({batch}, {len}, {channels}) needs {}",
                data.len(),
                batch * len * channels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::shape("sequence data contains non-finite entries"));
        }
        Ok(SeqTensor {
            data,
            batch,
            len,
            channels,
        })
    }

    pub fn zeros((batch, len, channels): (usize, usize, usize)) -> Self {
        SeqTensor {
            data: vec![0.0; batch * len * channels],
            batch,
            len,
            channels,
        }
    }

    /// Stacks per-sample `L x C` blocks into one batch.
    pub fn from_samples(samples: &[Vec<f64>], len: usize, channels: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(samples.len() * len * channels);
        for s in samples {
            if s.len() != len * channels {
                return Err(Error::shape("sample block size does not match (len, channels)"));
            }
            data.extend_from_slice(s);
        }
        SeqTensor::new(data, (samples.len(), len, channels))
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.len, self.channels)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, b: usize, l: usize, c: usize) -> f64 {
        self.data[(b * self.len + l) * self.channels + c]
    }

    /// The `L x C` block of one sample.
    pub fn sample(&self, b: usize) -> &[f64] {
        let n = self.len * self.channels;
        &self.data[b * n..(b + 1) * n]
    }
}

/// Feature maps, `B x C x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialTensor {
    data: Vec<f64>,
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
}

impl SpatialTensor {
    pub fn new(
        data: Vec<f64>,
        (batch, channels, height, width): (usize, usize, usize, usize),
    ) -> Result<Self> {
        if batch * channels * height * width == 0 {
            return Err(Error::shape("spatial dims must be positive"));
        }
        if data.len() != batch * channels * height * width {
            return Err(Error::shape(format!(
                "spatial data has {} entries, shape ({batch}, {channels}, {height}, {width}) needs {}",
                data.len(),
                batch * channels * height * width
            )));
        }
        Ok(SpatialTensor {
            data,
            batch,
            channels,
            height,
            width,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.batch, self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[((b * self.channels + c) * self.height + h) * self.width + w]
    }

    pub fn sample(&self, b: usize) -> &[f64] {
        let n = self.channels * self.height * self.width;
        &self.data[b * n..(b + 1) * n]
    }
}

/// A named parameter array. Backbone tensors are frozen (`trainable = false`)
/// and never carry a gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub trainable: bool,
    pub grad: Option<Vec<f64>>,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f64>, trainable: bool) -> Result<Self> {
        let name = name.into();
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::shape(format!("{name}: rank must be 1..=4, got {}", shape.len())));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "{name}: shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(ParamTensor {
            name,
            shape: shape.to_vec(),
            data,
            trainable,
            grad: None,
        })
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize], trainable: bool) -> Self {
        let numel = shape.iter().product();
        ParamTensor {
            name: name.into(),
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            trainable,
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }
}

pub fn reshape_seq_to_2d(x: &SeqTensor, (h, w): (usize, usize)) -> Result<SpatialTensor> {
    let (b, l, c) = x.shape();
    if l != h * w {
        return Err(Error::shape(format!("sequence length {l} != grid {h}x{w}")));
    }
    let mut out = Vec::with_capacity(x.data.len());
    for bi in 0..b {
        out.extend(tokens_to_channels(x.sample(bi), l, c));
    }
    SpatialTensor::new(out, (b, c, h, w))
}

pub fn reshape_2d_to_seq(x: &SpatialTensor) -> SeqTensor {
    let (b, c, h, w) = x.shape();
    let l = h * w;
    let mut out = Vec::with_capacity(x.data.len());
    for bi in 0..b {
        out.extend(tokens_to_channels(x.sample(bi), c, l));
    }
    SeqTensor {
        data: out,
        batch: b,
        len: l,
        channels: c,
    }
}

/// Transposes a row-major `rows x cols` block. Converts `L x C` tokens into
/// `C x (H*W)` channel planes and back.
pub fn tokens_to_channels(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    transpose(x, rows, cols)
}

pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Zero-padded, stride-1 convolution preserving spatial size.
pub fn conv2d_same(x: &SpatialTensor, kernel: &ParamTensor) -> Result<SpatialTensor> {
    let (b, cin, h, w) = x.shape();
    let [cout, kcin, kh, kw] = kernel.shape[..] else {
        return Err(Error::shape(format!(
            "{}: convolution kernel must be rank 4, got {:?}",
            kernel.name, kernel.shape
        )));
    };
    if kh != kw {
        return Err(Error::shape("convolution kernel must be square"));
    }
    check_odd_kernel(kh)?;
    if kcin != cin {
        return Err(Error::shape(format!(
            "kernel expects {kcin} input channels, tensor has {cin}"
        )));
    }
    let mut out = Vec::with_capacity(b * cout * h * w);
    for bi in 0..b {
        out.extend(conv2d_same_raw(x.sample(bi), cin, h, w, &kernel.data, cout, kh));
    }
    SpatialTensor::new(out, (b, cout, h, w))
}

pub fn check_odd_kernel(k: usize) -> Result<()> {
    if k % 2 == 0 {
        return Err(Error::config(format!("kernel size {k} must be odd")));
    }
    Ok(())
}

/// `x` is `cin x h x w`, `kernel` is `cout x cin x k x k`.
pub fn conv2d_same_raw(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
    cout: usize,
    k: usize,
) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut out = vec![0.0; cout * hw];
    for o in 0..cout {
        let out_plane = &mut out[o * hw..(o + 1) * hw];
        for c in 0..cin {
            let in_plane = &x[c * hw..(c + 1) * hw];
            for dy in 0..k {
                let oy = dy as isize - pad;
                let (y0, y1) = valid_range(oy, h);
                for dx in 0..k {
                    let wgt = kernel[((o * cin + c) * k + dy) * k + dx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let ox = dx as isize - pad;
                    let (x0, x1) = valid_range(ox, w);
                    if x0 == x1 {
                        continue;
                    }
                    for y in y0..y1 {
                        let sy = (y as isize + oy) as usize;
                        let dst = &mut out_plane[y * w + x0..y * w + x1];
                        let src_start = (sy * w) as isize + x0 as isize + ox;
                        let src = &in_plane[src_start as usize..src_start as usize + (x1 - x0)];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wgt * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of [`conv2d_same_raw`] with respect to its input.
pub(crate) fn conv2d_same_grad_input(
    grad: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
    cout: usize,
    k: usize,
) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut dx = vec![0.0; cin * hw];
    for o in 0..cout {
        let g_plane = &grad[o * hw..(o + 1) * hw];
        for c in 0..cin {
            let dx_plane = &mut dx[c * hw..(c + 1) * hw];
            for dy in 0..k {
                let oy = dy as isize - pad;
                let (y0, y1) = valid_range(oy, h);
                for ddx in 0..k {
                    let wgt = kernel[((o * cin + c) * k + dy) * k + ddx];
                    let ox = ddx as isize - pad;
                    let (x0, x1) = valid_range(ox, w);
                    if x0 == x1 {
                        continue;
                    }
                    for y in y0..y1 {
                        let sy = (y as isize + oy) as usize;
                        let start = ((sy * w) as isize + x0 as isize + ox) as usize;
                        let dst = &mut dx_plane[start..start + (x1 - x0)];
                        let src = &g_plane[y * w + x0..y * w + x1];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wgt * s;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradient of [`conv2d_same_raw`] with respect to its kernel.
pub(crate) fn conv2d_same_grad_kernel(
    grad: &[f64],
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut dk = vec![0.0; cout * cin * k * k];
    for o in 0..cout {
        let g_plane = &grad[o * hw..(o + 1) * hw];
        for c in 0..cin {
            let in_plane = &x[c * hw..(c + 1) * hw];
            for dy in 0..k {
                let oy = dy as isize - pad;
                let (y0, y1) = valid_range(oy, h);
                for ddx in 0..k {
                    let ox = ddx as isize - pad;
                    let (x0, x1) = valid_range(ox, w);
                    if x0 == x1 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + oy) as usize;
                        let start = ((sy * w) as isize + x0 as isize + ox) as usize;
                        let src = &in_plane[start..start + (x1 - x0)];
                        let g = &g_plane[y * w + x0..y * w + x1];
                        acc += src.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                    }
                    dk[((o * cin + c) * k + dy) * k + ddx] = acc;
                }
            }
        }
    }
    dk
}

/// Output rows/cols `[lo, hi)` whose shifted source index stays inside `0..n`.
fn valid_range(offset: isize, n: usize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (n as isize - offset).min(n as isize).max(0) as usize;
    (lo.min(hi), hi)
}

/// Per-token projection `x · w` with `w` shaped `Cin x Cout`. No bias.
pub fn linear(x: &SeqTensor, w: &ParamTensor) -> Result<SeqTensor> {
    let (b, l, c) = x.shape();
    let [cin, cout] = w.shape[..] else {
        return Err(Error::shape(format!("{}: projection must be rank 2", w.name)));
    };
    if cin != c {
        return Err(Error::shape(format!(
            "{}: projection expects {cin} channels, tensor has {c}",
            w.name
        )));
    }
    let data = matmul(&x.data, &w.data, b * l, c, cout);
    SeqTensor::new(data, (b, l, cout))
}

/// `a (m x k) · b (k x n)`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (m x k) · bᵀ` with `b` stored `n x k`.
pub fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow);
        }
    }
    out
}

/// `aᵀ · b` with `a` stored `m x k` and `b` stored `m x n`.
pub fn matmul_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Temperature softmax with max-subtraction.
pub fn softmax(v: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::config(format!("temperature must be positive, got {temperature}")));
    }
    Ok(softmax_unchecked(v, temperature))
}

pub(crate) fn softmax_unchecked(v: &[f64], temperature: f64) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = v.iter().map(|x| ((x - max) / temperature).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.iter_mut().for_each(|x| *x /= sum);
    e
}

/// Cosine similarity plus a flag raised when either input has zero norm, in
/// which case the value is defined as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    pub zero_norm: bool,
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Cosine {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Cosine {
            value: 0.0,
            zero_norm: true,
        };
    }
    Cosine {
        value: (dot(a, b) / (na * nb)).clamp(-1.0, 1.0),
        zero_norm: false,
    }
}

/// Global average pool over tokens: one `C`-vector per sample.
pub fn gap(v: &SeqTensor) -> Vec<Vec<f64>> {
    let (b, l, c) = v.shape();
    (0..b).map(|bi| mean_rows(v.sample(bi), l, c)).collect()
}

pub fn mean_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut acc = vec![0.0; cols];
    for r in 0..rows {
        for (a, v) in acc.iter_mut().zip(&x[r * cols..(r + 1) * cols]) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= rows as f64);
    acc
}

/// Row-wise layer normalisation without affine parameters.
pub fn layer_norm_rows(x: &[f64], rows: usize, cols: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; rows * cols];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for (o, v) in y[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
    }
    (y, inv_std)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Per-axis interpolation taps for align-corners bilinear resampling:
/// `(lo, hi, frac)` for every output index.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Align-corners bilinear upsampling of a single-channel `h x w` map.
pub fn bilinear_upsample(m: &[f64], (h, w): (usize, usize), (th, tw): (usize, usize)) -> Result<Vec<f64>> {
    if m.len() != h * w {
        return Err(Error::shape(format!("map has {} values, expected {h}x{w}", m.len())));
    }
    if th < h || tw < w {
        return Err(Error::shape(format!(
            "upsample target {th}x{tw} is smaller than source {h}x{w}"
        )));
    }
    let ty = bilinear_taps(h, th);
    let tx = bilinear_taps(w, tw);
    let mut out = vec![0.0; th * tw];
    for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
            let top = m[y0 * w + x0] * (1.0 - fx) + m[y0 * w + x1] * fx;
            let bottom = m[y1 * w + x0] * (1.0 - fx) + m[y1 * w + x1] * fx;
            out[i * tw + j] = top * (1.0 - fy) + bottom * fy;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn seq_to_2d_small_grid() {
        let x = SeqTensor::new(vec![1.0, 2.0, 3.0, 4.0], (1, 4, 1)).unwrap();
        let s = reshape_seq_to_2d(&x, (2, 2)).unwrap();
        assert_eq!(s.shape(), (1, 1, 2, 2));
        assert_eq!(s.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn seq_to_2d_index_arithmetic() {
        let x = SeqTensor::new(random(36, 1), (2, 6, 3)).unwrap();
        let s = reshape_seq_to_2d(&x, (2, 3)).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                for h in 0..2 {
                    for w in 0..3 {
                        assert_eq!(s.get(b, c, h, w), x.get(b, h * 3 + w, c));
                    }
                }
            }
        }
        assert_eq!(s.get(1, 2, 1, 2), x.get(1, 5, 2));
    }

    #[test]
    fn seq_to_2d_rejects_mismatched_grid() {
        let x = SeqTensor::zeros((1, 5, 2));
        assert!(matches!(reshape_seq_to_2d(&x, (2, 2)), Err(Error::Shape(_))));
    }

    #[test]
    fn roundtrip_and_constant() {
        let x = SeqTensor::new(random(24, 2), (2, 4, 3)).unwrap();
        let back = reshape_2d_to_seq(&reshape_seq_to_2d(&x, (2, 2)).unwrap());
        assert_eq!(back, x);

        let c = SpatialTensor::new(vec![0.5; 8], (1, 2, 2, 2)).unwrap();
        assert!(reshape_2d_to_seq(&c).data().iter().all(|&v| v == 0.5));

        let s = SpatialTensor::new(random(24, 3), (2, 3, 2, 2)).unwrap();
        assert_eq!(reshape_seq_to_2d(&reshape_2d_to_seq(&s), (2, 2)).unwrap(), s);
    }

    #[test]
    fn nonfinite_rejected() {
        assert!(SeqTensor::new(vec![f64::NAN], (1, 1, 1)).is_err());
        assert!(SeqTensor::new(vec![1.0], (0, 1, 1)).is_err());
    }

    #[test]
    fn kernel_wider_than_grid() {
        // 7x7 on a 1x2 grid: only the centre row and two columns ever land.
        let x = random(2, 9);
        let k = random(49, 10);
        let out = conv2d_same_raw(&x, 1, 1, 2, &k, 1, 7);
        assert_eq!(out, vec![k[24] * x[0] + k[25] * x[1], k[23] * x[0] + k[24] * x[1]]);
        let g = [1.0, 1.0];
        assert_eq!(conv2d_same_grad_input(&g, 1, 1, 2, &k, 1, 7), vec![k[24] + k[23], k[25] + k[24]]);
        let dk = conv2d_same_grad_kernel(&g, &x, 1, 1, 2, 1, 7);
        assert_eq!(dk.iter().filter(|&&v| v != 0.0).count(), 3);
    }

    #[test]
    fn conv_identity_1x1() {
        let x = SpatialTensor::new(random(2 * 9, 4), (1, 2, 3, 3)).unwrap();
        let k = ParamTensor::new("id", &[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0], false).unwrap();
        assert_eq!(conv2d_same(&x, &k).unwrap(), x);
    }

    #[test]
    fn conv_ones_constant_padding() {
        let c = 0.7;
        let x = SpatialTensor::new(vec![c; 16], (1, 1, 4, 4)).unwrap();
        let k = ParamTensor::new("ones", &[1, 1, 3, 3], vec![1.0; 9], false).unwrap();
        let y = conv2d_same(&x, &k).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
        assert!(close(y.get(0, 0, 1, 1), 9.0 * c));
        assert!(close(y.get(0, 0, 2, 2), 9.0 * c));
        assert!(close(y.get(0, 0, 0, 0), 4.0 * c));
        assert!(close(y.get(0, 0, 3, 3), 4.0 * c));
        assert!(close(y.get(0, 0, 0, 2), 6.0 * c));
        assert!(close(y.get(0, 0, 1, 3), 6.0 * c));
    }

    #[test]
    fn conv_even_kernel_rejected() {
        let x = SpatialTensor::new(vec![0.0; 16], (1, 1, 4, 4)).unwrap();
        let k = ParamTensor::zeros("even", &[1, 1, 2, 2], false);
        assert!(matches!(conv2d_same(&x, &k), Err(Error::Config(_))));
    }

    #[test]
    fn linear_identity_zero() {
        let x = SeqTensor::new(random(6, 5), (1, 2, 3)).unwrap();
        let mut eye = ParamTensor::zeros("eye", &[3, 3], false);
        for i in 0..3 {
            eye.data[i * 3 + i] = 1.0;
        }
        assert_eq!(linear(&x, &eye).unwrap(), x);
        let zero = ParamTensor::zeros("z", &[3, 2], false);
        assert!(linear(&x, &zero).unwrap().data().iter().all(|&v| v == 0.0));
        let bad = ParamTensor::zeros("bad", &[2, 2], false);
        assert!(linear(&x, &bad).is_err());
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&[0.3; 4], 1.0).unwrap();
        assert!(s.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let s = softmax(&[1000.0, 0.0], 1.0).unwrap();
        assert_eq!(s, vec![1.0, 0.0]);
        assert!(softmax(&[1.0], 0.0).is_err());
        assert!(softmax(&[1.0], -1.0).is_err());
    }

    #[test]
    fn softmax_high_precision_reference() {
        // mpmath at 40 digits
        let want = [
            0.090_030_573_170_380_457_998,
            0.244_728_471_054_797_652_47,
            0.665_240_955_774_821_889_53,
        ];
        let got = softmax(&[1.0, 2.0, 3.0], 1.0).unwrap();
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-15, "{g} vs {w}");
        }
    }

    #[test]
    fn cosine_cases() {
        let a = random(7, 6);
        assert!((cosine_sim(&a, &a).value - 1.0).abs() < 1e-12);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).value, 0.0);
        assert!((cosine_sim(&[1.0, 2.0], &[2.0, 1.0]).value - 0.8).abs() < 1e-15);
        let z = cosine_sim(&[0.0, 0.0], &[1.0, 1.0]);
        assert_eq!(z.value, 0.0);
        assert!(z.zero_norm);
    }

    #[test]
    fn gap_cases() {
        let v = SeqTensor::new(vec![0.0, 0.0, 2.0, 4.0], (1, 2, 2)).unwrap();
        assert_eq!(gap(&v), vec![vec![1.0, 2.0]]);
        let c = SeqTensor::new(vec![3.0; 12], (2, 3, 2)).unwrap();
        assert_eq!(gap(&c), vec![vec![3.0, 3.0], vec![3.0, 3.0]]);

        let x = SeqTensor::new(random(60, 7), (3, 5, 4)).unwrap();
        let g = gap(&x);
        for b in 0..3 {
            for c in 0..4 {
                let mut s = 0.0;
                for l in 0..5 {
                    s += x.get(b, l, c);
                }
                assert!((g[b][c] - s / 5.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn upsample_cases() {
        let c = bilinear_upsample(&[0.4; 4], (2, 2), (5, 7)).unwrap();
        assert!(c.iter().all(|&v| (v - 0.4).abs() < 1e-15));

        let up = bilinear_upsample(&[0.0, 1.0, 0.0, 1.0], (2, 2), (4, 4)).unwrap();
        for r in 0..4 {
            let row = &up[r * 4..(r + 1) * 4];
            for (j, v) in row.iter().enumerate() {
                assert!((v - j as f64 / 3.0).abs() < 1e-15);
            }
        }
        assert!(bilinear_upsample(&[0.0; 9], (3, 3), (2, 5)).is_err());
    }

    #[test]
    fn upsample_closed_form_3_to_5() {
        let m = random(9, 8);
        let up = bilinear_upsample(&m, (3, 3), (5, 5)).unwrap();
        // Even target indices land on source samples, odd ones halfway between.
        let src = |y: f64, x: f64| {
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(2), (x0 + 1).min(2));
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            (1.0 - fy) * ((1.0 - fx) * m[y0 * 3 + x0] + fx * m[y0 * 3 + x1])
                + fy * ((1.0 - fx) * m[y1 * 3 + x0] + fx * m[y1 * 3 + x1])
        };
        for i in 0..5 {
            for j in 0..5 {
                let want = src(i as f64 / 2.0, j as f64 / 2.0);
                assert!((up[i * 5 + j] - want).abs() < 1e-14);
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(up[(2 * i) * 5 + 2 * j], m[i * 3 + j]);
            }
        }
    }
}
