//! Minimal neural-network layers with hand-written reverse-mode gradients.
//!
//! Activations use a channel-major layout `[C][B][L]` (channel, batch sample,
//! time step) so every convolution is a single GEMM over `B * L` columns.
//! Parameters live in one flat buffer; layers hold offsets into it, and the
//! backward pass accumulates into a gradient buffer with the same layout.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

/// Floating-point element type: `f32` for training and inference, `f64` for
/// finite-difference gradient checks.
pub trait Real:
    Copy
    + Send
    + Sync
    + Debug
    + Default
    + PartialOrd
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;

    /// `C = alpha * A * B + beta * C` with arbitrary strides.
    ///
    /// # Safety
    /// The strides and dimensions must describe valid views into the slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major `C (m x n) [+]= op(A) (m x k) * op(B) (k x n)`.
///
/// `a_t` means `a` is stored as `k x m`; `b_t` means `b` is stored as `n x k`.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::ONE } else { T::ZERO };
    // SAFETY: the asserts above bound every view inside its slice.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::ONE,
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

/// Name, shape, and offset of one parameter array inside the flat buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
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

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    Constant(f64),
}

/// Allocates named parameter slots while a network is being assembled.
#[derive(Debug, Default, Clone)]
pub struct ParamRegistry {
    pub specs: Vec<ParamSpec>,
    pub inits: Vec<Init>,
    pub total: usize,
}

impl ParamRegistry {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> usize {
        let offset = self.total;
        let spec = ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset,
        };
        self.total += spec.len();
        self.specs.push(spec);
        self.inits.push(init);
        offset
    }
}

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Sum of a slice, reduced pairwise so the result does not depend on how the
/// caller happened to chunk the data.
pub fn pairwise_sum<T: Real>(v: &[T]) -> T {
    match v.len() {
        0 => T::ZERO,
        1 => v[0],
        n if n <= 8 => v.iter().copied().sum(),
        n => {
            let mid = n / 2;
            pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
        }
    }
}

/// Elementwise in-place `dst += src`.
pub fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

// ---------------------------------------------------------------------------
// Mish activation: x * tanh(softplus(x)).

#[inline]
fn mish_parts<T: Real>(x: T) -> (T, T) {
    if x > T::from_f64(20.0) {
        return (x, T::ONE);
    }
    let e = x.exp();
    let n = e * (e + T::from_f64(2.0));
    let t = n / (n + T::from_f64(2.0));
    let sig = e / (T::ONE + e);
    let y = x * t;
    let dy = t + x * (T::ONE - t * t) * sig;
    (y, dy)
}

pub fn mish<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| mish_parts(v).0).collect()
}

/// Multiplies `grad` in place by the Mish derivative at `input`.
pub fn mish_backward<T: Real>(input: &[T], grad: &mut [T]) {
    for (g, &x) in grad.iter_mut().zip(input) {
        *g *= mish_parts(x).1;
    }
}

// ---------------------------------------------------------------------------
// 1-D convolution (cross-correlation, zero padding).

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: usize,
    pub bias: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    pub fn new(
        reg: &mut ParamRegistry,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        zero: bool,
    ) -> Self {
        let bound = fan_in_bound(cin * kernel);
        let init = if zero { Init::Constant(0.0) } else { Init::Uniform(bound) };
        let weight = reg.add(format!("{name}.weight"), &[cout, cin, kernel], init);
        let bias = reg.add(format!("{name}.bias"), &[cout], init);
        Self {
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn im2col<T: Real>(&self, x: &[T], batch: usize, len: usize) -> Vec<T> {
        let lo = self.out_len(len);
        let cols_n = batch * lo;
        let mut cols = vec![T::ZERO; self.cin * self.kernel * cols_n];
        for ci in 0..self.cin {
            for k in 0..self.kernel {
                let row = &mut cols[(ci * self.kernel + k) * cols_n..][..cols_n];
                for b in 0..batch {
                    let src = &x[(ci * batch + b) * len..][..len];
                    let dst = &mut row[b * lo..][..lo];
                    for (o, d) in dst.iter_mut().enumerate() {
                        let i = (o * self.stride + k) as isize - self.pad as isize;
                        if i >= 0 && (i as usize) < len {
                            *d = src[i as usize];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(&self, cols: &[T], batch: usize, len: usize) -> Vec<T> {
        let lo = self.out_len(len);
        let cols_n = batch * lo;
        let mut x = vec![T::ZERO; self.cin * batch * len];
        for ci in 0..self.cin {
            for k in 0..self.kernel {
                let row = &cols[(ci * self.kernel + k) * cols_n..][..cols_n];
                for b in 0..batch {
                    let dst = &mut x[(ci * batch + b) * len..][..len];
                    let src = &row[b * lo..][..lo];
                    for (o, s) in src.iter().enumerate() {
                        let i = (o * self.stride + k) as isize - self.pad as isize;
                        if i >= 0 && (i as usize) < len {
                            dst[i as usize] += *s;
                        }
                    }
                }
            }
        }
        x
    }

    /// Returns the output `[cout][B][Lo]` and the im2col buffer for backward.
    pub fn forward<T: Real>(&self, p: &[T], x: &[T], batch: usize, len: usize) -> (Vec<T>, Vec<T>) {
        debug_assert_eq!(x.len(), self.cin * batch * len);
        let lo = self.out_len(len);
        let n = batch * lo;
        let cols = self.im2col(x, batch, len);
        let mut y = vec![T::ZERO; self.cout * n];
        let bias = &p[self.bias..self.bias + self.cout];
        for (co, row) in y.chunks_mut(n).enumerate() {
            row.fill(bias[co]);
        }
        let w = &p[self.weight..self.weight + self.cout * self.cin * self.kernel];
        matmul(self.cout, self.cin * self.kernel, n, w, false, &cols, false, &mut y, true);
        (y, cols)
    }

    pub fn backward<T: Real>(
        &self,
        p: &[T],
        g: &mut [T],
        cols: &[T],
        dy: &[T],
        batch: usize,
        len: usize,
    ) -> Vec<T> {
        let lo = self.out_len(len);
        let n = batch * lo;
        let ck = self.cin * self.kernel;
        for (co, row) in dy.chunks(n).enumerate() {
            g[self.bias + co] += pairwise_sum(row);
        }
        matmul(
            self.cout,
            n,
            ck,
            dy,
            false,
            cols,
            true,
            &mut g[self.weight..self.weight + self.cout * ck],
            true,
        );
        let w = &p[self.weight..self.weight + self.cout * ck];
        let mut dcols = vec![T::ZERO; ck * n];
        matmul(ck, self.cout, n, w, true, dy, false, &mut dcols, false);
        self.col2im(&dcols, batch, len)
    }
}

/// Transposed 1-D convolution used for 2x temporal upsampling.
#[derive(Debug, Clone)]
pub struct ConvTranspose1d {
    pub weight: usize,
    pub bias: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose1d {
    pub fn new(reg: &mut ParamRegistry, name: &str, cin: usize, cout: usize) -> Self {
        let (kernel, stride, pad) = (4, 2, 1);
        let bound = fan_in_bound(cout * kernel);
        let weight = reg.add(format!("{name}.weight"), &[cin, cout, kernel], Init::Uniform(bound));
        let bias = reg.add(format!("{name}.bias"), &[cout], Init::Uniform(bound));
        Self {
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_len(&self, len: usize) -> usize {
        (len - 1) * self.stride + self.kernel - 2 * self.pad
    }

    /// Output position fed by input position `i` through tap `k`.
    fn target(&self, i: usize, k: usize, lo: usize) -> Option<usize> {
        let o = (i * self.stride + k) as isize - self.pad as isize;
        (o >= 0 && (o as usize) < lo).then_some(o as usize)
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &[T], batch: usize, len: usize) -> Vec<T> {
        let lo = self.out_len(len);
        let n = batch * len;
        let rows = self.cout * self.kernel;
        let w = &p[self.weight..self.weight + self.cin * rows];
        let mut z = vec![T::ZERO; rows * n];
        matmul(rows, self.cin, n, w, true, x, false, &mut z, false);
        let mut y = vec![T::ZERO; self.cout * batch * lo];
        for co in 0..self.cout {
            let bias = p[self.bias + co];
            y[co * batch * lo..(co + 1) * batch * lo].fill(bias);
            for k in 0..self.kernel {
                let zr = &z[(co * self.kernel + k) * n..][..n];
                for b in 0..batch {
                    let dst = &mut y[(co * batch + b) * lo..][..lo];
                    for i in 0..len {
                        if let Some(o) = self.target(i, k, lo) {
                            dst[o] += zr[b * len + i];
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward<T: Real>(
        &self,
        p: &[T],
        g: &mut [T],
        x: &[T],
        dy: &[T],
        batch: usize,
        len: usize,
    ) -> Vec<T> {
        let lo = self.out_len(len);
        let n = batch * len;
        let rows = self.cout * self.kernel;
        let mut dz = vec![T::ZERO; rows * n];
        for co in 0..self.cout {
            g[self.bias + co] += pairwise_sum(&dy[co * batch * lo..(co + 1) * batch * lo]);
            for k in 0..self.kernel {
                let dzr = &mut dz[(co * self.kernel + k) * n..][..n];
                for b in 0..batch {
                    let src = &dy[(co * batch + b) * lo..][..lo];
                    for i in 0..len {
                        if let Some(o) = self.target(i, k, lo) {
                            dzr[b * len + i] = src[o];
                        }
                    }
                }
            }
        }
        matmul(
            self.cin,
            n,
            rows,
            x,
            false,
            &dz,
            true,
            &mut g[self.weight..self.weight + self.cin * rows],
            true,
        );
        let w = &p[self.weight..self.weight + self.cin * rows];
        let mut dx = vec![T::ZERO; self.cin * n];
        matmul(self.cin, rows, n, w, false, &dz, false, &mut dx, false);
        dx
    }
}

// ---------------------------------------------------------------------------
// Group normalization with per-channel affine.

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: usize,
    pub beta: usize,
    pub channels: usize,
    pub groups: usize,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct GroupNormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl GroupNorm {
    pub fn new(reg: &mut ParamRegistry, name: &str, channels: usize, groups: usize) -> Self {
        let gamma = reg.add(format!("{name}.weight"), &[channels], Init::Constant(1.0));
        let beta = reg.add(format!("{name}.bias"), &[channels], Init::Constant(0.0));
        Self {
            gamma,
            beta,
            channels,
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Real>(
        &self,
        p: &[T],
        x: &[T],
        batch: usize,
        len: usize,
    ) -> (Vec<T>, GroupNormCache<T>) {
        let cpg = self.channels / self.groups;
        let count = T::from_f64((cpg * len) as f64);
        let eps = T::from_f64(self.eps);
        let mut xhat = vec![T::ZERO; x.len()];
        let mut inv_std = vec![T::ZERO; batch * self.groups];
        let mut y = vec![T::ZERO; x.len()];
        for b in 0..batch {
            for gi in 0..self.groups {
                let rows = (gi * cpg..(gi + 1) * cpg).map(|c| (c * batch + b) * len);
                let mut sum = T::ZERO;
                for r in rows.clone() {
                    sum += x[r..r + len].iter().copied().sum::<T>();
                }
                let mean = sum / count;
                let mut var = T::ZERO;
                for r in rows.clone() {
                    for &v in &x[r..r + len] {
                        let d = v - mean;
                        var += d * d;
                    }
                }
                let inv = T::ONE / (var / count + eps).sqrt();
                inv_std[b * self.groups + gi] = inv;
                for (ci, r) in rows.enumerate() {
                    let c = gi * cpg + ci;
                    let (ga, be) = (p[self.gamma + c], p[self.beta + c]);
                    for j in r..r + len {
                        let h = (x[j] - mean) * inv;
                        xhat[j] = h;
                        y[j] = ga * h + be;
                    }
                }
            }
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward<T: Real>(
        &self,
        p: &[T],
        g: &mut [T],
        cache: &GroupNormCache<T>,
        dy: &[T],
        batch: usize,
        len: usize,
    ) -> Vec<T> {
        let cpg = self.channels / self.groups;
        let count = T::from_f64((cpg * len) as f64);
        let mut dx = vec![T::ZERO; dy.len()];
        for b in 0..batch {
            for gi in 0..self.groups {
                let inv = cache.inv_std[b * self.groups + gi];
                let mut m1 = T::ZERO;
                let mut m2 = T::ZERO;
                for ci in 0..cpg {
                    let c = gi * cpg + ci;
                    let r = (c * batch + b) * len;
                    let ga = p[self.gamma + c];
                    let mut dga = T::ZERO;
                    let mut dbe = T::ZERO;
                    for j in r..r + len {
                        let d = dy[j];
                        let h = cache.xhat[j];
                        dga += d * h;
                        dbe += d;
                        let dh = d * ga;
                        m1 += dh;
                        m2 += dh * h;
                    }
                    g[self.gamma + c] += dga;
                    g[self.beta + c] += dbe;
                }
                m1 /= count;
                m2 /= count;
                for ci in 0..cpg {
                    let c = gi * cpg + ci;
                    let r = (c * batch + b) * len;
                    let ga = p[self.gamma + c];
                    for j in r..r + len {
                        let dh = dy[j] * ga;
                        dx[j] = inv * (dh - m1 - cache.xhat[j] * m2);
                    }
                }
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Dense layer over column vectors: X `[in][B]` -> Y `[out][B]`.

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(reg: &mut ParamRegistry, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let init = Init::Uniform(fan_in_bound(fan_in));
        let weight = reg.add(format!("{name}.weight"), &[fan_out, fan_in], init);
        let bias = reg.add(format!("{name}.bias"), &[fan_out], init);
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &[T], batch: usize) -> Vec<T> {
        let mut y = vec![T::ZERO; self.fan_out * batch];
        for (o, row) in y.chunks_mut(batch).enumerate() {
            row.fill(p[self.bias + o]);
        }
        let w = &p[self.weight..self.weight + self.fan_out * self.fan_in];
        matmul(self.fan_out, self.fan_in, batch, w, false, x, false, &mut y, true);
        y
    }

    pub fn backward<T: Real>(&self, p: &[T], g: &mut [T], x: &[T], dy: &[T], batch: usize) -> Vec<T> {
        for (o, row) in dy.chunks(batch).enumerate() {
            g[self.bias + o] += pairwise_sum(row);
        }
        matmul(
            self.fan_out,
            batch,
            self.fan_in,
            dy,
            false,
            x,
            true,
            &mut g[self.weight..self.weight + self.fan_out * self.fan_in],
            true,
        );
        let w = &p[self.weight..self.weight + self.fan_out * self.fan_in];
        let mut dx = vec![T::ZERO; self.fan_in * batch];
        matmul(self.fan_in, self.fan_out, batch, w, true, dy, false, &mut dx, false);
        dx
    }
}
