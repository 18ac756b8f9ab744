//! Dense kernel layer: feature maps, matrices, convolution, pooling,
//! upsampling and pointwise nonlinearities.
//!
//! Every array is row-major `(h, w, c)`. All kernels are plain direct loops;
//! the inputs this crate handles are desk-sized.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::par;

/// Floating point width used for a model and all of its arrays.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    #[default]
    Double,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::Single => "single",
            Precision::Double => "double",
        }
    }
}

/// Real scalar type the engine is generic over (`f32` or `f64`).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;
    const BYTES: usize;

    /// Convert an `f64` literal.
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::Single;
    const BYTES: usize = 4;

    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::Double;
    const BYTES: usize = 8;

    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Plain vectors are stored as `Vec<T>`.
pub type Vector<T> = Vec<T>;

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Elementwise `dst += src`.
#[inline]
pub fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Dense rank-3 array `(height, width, channels)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(dim_err!(
                "feature map dims must be positive, got {height}x{width}x{channels}"
            ));
        }
        if data.len() != height * width * channels {
            return Err(dim_err!(
                "feature map {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            ));
        }
        Ok(FeatureMap {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, T::zero())
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        assert!(
            height > 0 && width > 0 && channels > 0,
            "feature map dims must be positive"
        );
        FeatureMap {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut m = Self::zeros(height, width, channels);
        for r in 0..height {
            for c in 0..width {
                for k in 0..channels {
                    m.data[(r * width + c) * channels + k] = f(r, c, k);
                }
            }
        }
        m
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }
    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }
    #[inline]
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, r: usize, c: usize, k: usize) -> usize {
        (r * self.width + c) * self.channels + k
    }
    #[inline]
    pub fn get(&self, r: usize, c: usize, k: usize) -> T {
        self.data[self.index(r, c, k)]
    }
    #[inline]
    pub fn set(&mut self, r: usize, c: usize, k: usize, v: T) {
        let i = self.index(r, c, k);
        self.data[i] = v;
    }
    /// Channel vector at one spatial position.
    #[inline]
    pub fn pixel(&self, r: usize, c: usize) -> &[T] {
        let s = (r * self.width + c) * self.channels;
        &self.data[s..s + self.channels]
    }
    #[inline]
    pub fn pixel_mut(&mut self, r: usize, c: usize) -> &mut [T] {
        let s = (r * self.width + c) * self.channels;
        &mut self.data[s..s + self.channels]
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.dims() == other.dims()
    }

    pub fn ensure_dims(&self, dims: (usize, usize, usize), what: &str) -> Result<()> {
        if self.dims() != dims {
            return Err(dim_err!(
                "{what}: expected {}x{}x{}, got {}x{}x{}",
                dims.0,
                dims.1,
                dims.2,
                self.height,
                self.width,
                self.channels
            ));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        FeatureMap {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> FeatureMap<U> {
        FeatureMap {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        other.ensure_dims(self.dims(), "add_assign")?;
        add_into(&mut self.data, &other.data);
        Ok(())
    }

    /// Frobenius inner product.
    pub fn inner(&self, other: &Self) -> T {
        dot(&self.data, &other.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stack maps along the channel axis.
    pub fn concat_channels(maps: &[FeatureMap<T>]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| dim_err!("concat_channels: no maps"))?;
        let (h, w) = (first.height, first.width);
        for m in maps {
            if m.height != h || m.width != w {
                return Err(dim_err!(
                    "concat_channels: {}x{} vs {}x{}",
                    m.height,
                    m.width,
                    h,
                    w
                ));
            }
        }
        let total: usize = maps.iter().map(|m| m.channels).sum();
        let mut data = Vec::with_capacity(h * w * total);
        for p in 0..h * w {
            for m in maps {
                data.extend_from_slice(&m.data[p * m.channels..(p + 1) * m.channels]);
            }
        }
        FeatureMap::new(h, w, total, data)
    }

    /// Inverse of [`FeatureMap::concat_channels`] for equal-width pieces.
    pub fn split_channels(&self, parts: usize) -> Result<Vec<Self>> {
        if parts == 0 || self.channels % parts != 0 {
            return Err(dim_err!(
                "split_channels: {} channels into {parts} parts",
                self.channels
            ));
        }
        let each = self.channels / parts;
        let mut out: Vec<Vec<T>> = vec![Vec::with_capacity(self.pixels() * each); parts];
        for px in self.data.chunks(self.channels) {
            for (q, o) in out.iter_mut().enumerate() {
                o.extend_from_slice(&px[q * each..(q + 1) * each]);
            }
        }
        out.into_iter()
            .map(|d| FeatureMap::new(self.height, self.width, each, d))
            .collect()
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(dim_err!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }
    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }
    #[inline]
    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }
    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }
    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }
    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out += self * x`
    #[inline]
    pub fn matvec_acc(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o += dot(row, x);
        }
    }

    /// `out += selfᵀ * y`
    #[inline]
    pub fn matvec_t_acc(&self, y: &[T], out: &mut [T]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (&yr, row) in y.iter().zip(self.data.chunks_exact(self.cols)) {
            if yr != T::zero() {
                axpy(yr, row, out);
            }
        }
    }

    /// `self += a bᵀ`
    #[inline]
    pub fn outer_acc(&mut self, a: &[T], b: &[T]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (&ar, row) in a.iter().zip(self.data.chunks_exact_mut(self.cols)) {
            if ar != T::zero() {
                axpy(ar, b, row);
            }
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

/// Convolution weights laid out `[kh][kw][cin][cout]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernels<T> {
    kh: usize,
    kw: usize,
    cin: usize,
    cout: usize,
    data: Vec<T>,
}

impl<T: Scalar> ConvKernels<T> {
    pub fn zeros(kh: usize, kw: usize, cin: usize, cout: usize) -> Self {
        ConvKernels {
            kh,
            kw,
            cin,
            cout,
            data: vec![T::zero(); kh * kw * cin * cout],
        }
    }

    pub fn from_vec(kh: usize, kw: usize, cin: usize, cout: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != kh * kw * cin * cout {
            return Err(dim_err!(
                "kernel block {kh}x{kw}x{cin}x{cout} needs {} values, got {}",
                kh * kw * cin * cout,
                data.len()
            ));
        }
        Ok(ConvKernels {
            kh,
            kw,
            cin,
            cout,
            data,
        })
    }

    /// 1×1 identity mapping `channels -> channels`.
    pub fn identity(channels: usize) -> Self {
        let mut k = Self::zeros(1, 1, channels, channels);
        for c in 0..channels {
            k.data[c * channels + c] = T::one();
        }
        k
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        [self.kh, self.kw, self.cin, self.cout]
    }
    #[inline]
    pub fn cin(&self) -> usize {
        self.cin
    }
    #[inline]
    pub fn cout(&self) -> usize {
        self.cout
    }
    #[inline]
    pub fn kh(&self) -> usize {
        self.kh
    }
    #[inline]
    pub fn kw(&self) -> usize {
        self.kw
    }
    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    #[inline]
    pub fn index(&self, i: usize, j: usize, ci: usize, co: usize) -> usize {
        ((i * self.kw + j) * self.cin + ci) * self.cout + co
    }
    #[inline]
    pub fn get(&self, i: usize, j: usize, ci: usize, co: usize) -> T {
        self.data[self.index(i, j, ci, co)]
    }
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, ci: usize, co: usize, v: T) {
        let idx = self.index(i, j, ci, co);
        self.data[idx] = v;
    }
    /// The `cin × cout` block for spatial tap `(i, j)`.
    #[inline]
    fn tap(&self, i: usize, j: usize) -> &[T] {
        let s = (i * self.kw + j) * self.cin * self.cout;
        &self.data[s..s + self.cin * self.cout]
    }
}

/// What `conv2d_backward` needs from the forward call.
#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    input: FeatureMap<T>,
    kernel_shape: [usize; 4],
    padding: usize,
}

impl<T: Scalar> ConvCache<T> {
    pub fn input(&self) -> &FeatureMap<T> {
        &self.input
    }
}

/// Same-size 2-D cross-correlation with symmetric zero padding.
pub fn conv2d<T: Scalar>(
    input: &FeatureMap<T>,
    kernels: &ConvKernels<T>,
    bias: &[T],
    padding: usize,
) -> Result<FeatureMap<T>> {
    check_conv_shapes(input, kernels, bias, padding)?;
    let (h, w, cin) = input.dims();
    let cout = kernels.cout;
    let (kh, kw) = (kernels.kh, kernels.kw);
    let mut out = FeatureMap::zeros(h, w, cout);
    par::for_each_chunk_mut(out.data_mut(), w * cout, |r, row| {
        for c in 0..w {
            let o = &mut row[c * cout..(c + 1) * cout];
            o.copy_from_slice(bias);
            for i in 0..kh {
                let y = r + i;
                if y < padding || y - padding >= h {
                    continue;
                }
                let y = y - padding;
                for j in 0..kw {
                    let x = c + j;
                    if x < padding || x - padding >= w {
                        continue;
                    }
                    let x = x - padding;
                    let px = input.pixel(y, x);
                    let tap = kernels.tap(i, j);
                    for (ci, &v) in px.iter().enumerate().take(cin) {
                        if v != T::zero() {
                            axpy(v, &tap[ci * cout..(ci + 1) * cout], o);
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Forward convolution that also returns the cache for [`conv2d_backward`].
pub fn conv2d_cached<T: Scalar>(
    input: &FeatureMap<T>,
    kernels: &ConvKernels<T>,
    bias: &[T],
    padding: usize,
) -> Result<(FeatureMap<T>, ConvCache<T>)> {
    let out = conv2d(input, kernels, bias, padding)?;
    Ok((
        out,
        ConvCache {
            input: input.clone(),
            kernel_shape: kernels.shape(),
            padding,
        },
    ))
}

fn check_conv_shapes<T: Scalar>(
    input: &FeatureMap<T>,
    kernels: &ConvKernels<T>,
    bias: &[T],
    padding: usize,
) -> Result<()> {
    if kernels.kh % 2 == 0 || kernels.kw % 2 == 0 {
        return Err(dim_err!(
            "conv2d: kernel spatial dims must be odd, got {}x{}",
            kernels.kh,
            kernels.kw
        ));
    }
    if kernels.kh != kernels.kw || padding != (kernels.kh - 1) / 2 {
        return Err(dim_err!(
            "conv2d: padding {padding} does not give same-size output for {}x{} kernels",
            kernels.kh,
            kernels.kw
        ));
    }
    if kernels.cin != input.channels() {
        return Err(dim_err!(
            "conv2d: kernels expect {} input channels, map has {}",
            kernels.cin,
            input.channels()
        ));
    }
    if bias.len() != kernels.cout {
        return Err(dim_err!(
            "conv2d: bias length {} != output channels {}",
            bias.len(),
            kernels.cout
        ));
    }
    Ok(())
}

/// Gradients of a convolution.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub d_input: FeatureMap<T>,
    pub d_kernels: ConvKernels<T>,
    pub d_bias: Vec<T>,
}

/// Exact reverse-mode gradients of [`conv2d`].
pub fn conv2d_backward<T: Scalar>(
    cache: &ConvCache<T>,
    kernels: &ConvKernels<T>,
    d_out: &FeatureMap<T>,
) -> Result<ConvGrads<T>> {
    if kernels.shape() != cache.kernel_shape {
        return Err(crate::error::Error::State(format!(
            "conv2d_backward: kernels {:?} differ from forward {:?}",
            kernels.shape(),
            cache.kernel_shape
        )));
    }
    let input = &cache.input;
    let (h, w, cin) = input.dims();
    let [kh, kw, _, cout] = cache.kernel_shape;
    let p = cache.padding;
    d_out.ensure_dims((h, w, cout), "conv2d_backward d_out")?;

    let mut d_bias = vec![T::zero(); cout];
    for px in d_out.data().chunks_exact(cout) {
        add_into(&mut d_bias, px);
    }

    // Per output row partial kernel gradients, reduced in row order.
    let ksize = kh * kw * cin * cout;
    let mut partial = vec![T::zero(); h * ksize];
    par::for_each_chunk_mut(&mut partial, ksize, |r, dk| {
        for c in 0..w {
            let g = d_out.pixel(r, c);
            if g.iter().all(|&v| v == T::zero()) {
                continue;
            }
            for i in 0..kh {
                let y = r + i;
                if y < p || y - p >= h {
                    continue;
                }
                for j in 0..kw {
                    let x = c + j;
                    if x < p || x - p >= w {
                        continue;
                    }
                    let px = input.pixel(y - p, x - p);
                    let base = (i * kw + j) * cin * cout;
                    for (ci, &v) in px.iter().enumerate() {
                        if v != T::zero() {
                            axpy(v, g, &mut dk[base + ci * cout..base + (ci + 1) * cout]);
                        }
                    }
                }
            }
        }
    });
    let mut d_kernels = ConvKernels::zeros(kh, kw, cin, cout);
    for dk in partial.chunks_exact(ksize) {
        add_into(&mut d_kernels.data, dk);
    }

    // Gather form: each input pixel collects from the outputs it fed.
    let mut d_input = FeatureMap::zeros(h, w, cin);
    par::for_each_chunk_mut(d_input.data_mut(), w * cin, |y, row| {
        for x in 0..w {
            let di = &mut row[x * cin..(x + 1) * cin];
            for i in 0..kh {
                // output row r = y + p - i
                let r = y + p;
                if r < i || r - i >= h {
                    continue;
                }
                let r = r - i;
                for j in 0..kw {
                    let c = x + p;
                    if c < j || c - j >= w {
                        continue;
                    }
                    let c = c - j;
                    let g = d_out.pixel(r, c);
                    let tap = kernels.tap(i, j);
                    for (ci, d) in di.iter_mut().enumerate() {
                        *d += dot(&tap[ci * cout..(ci + 1) * cout], g);
                    }
                }
            }
        }
    });

    Ok(ConvGrads {
        d_input,
        d_kernels,
        d_bias,
    })
}

/// Argmax routing record of a 2×2 max pool.
#[derive(Clone, Debug)]
pub struct PoolIndices {
    input_dims: (usize, usize, usize),
    argmax: Vec<usize>,
}

impl PoolIndices {
    pub fn input_dims(&self) -> (usize, usize, usize) {
        self.input_dims
    }
    /// Flat input index selected for each output element.
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

/// 2×2, stride 2 max pooling. Ties go to the first cell in row-major window order.
pub fn maxpool2d<T: Scalar>(input: &FeatureMap<T>) -> Result<(FeatureMap<T>, PoolIndices)> {
    let (h, w, ch) = input.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(dim_err!("maxpool2d: dims must be even, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = FeatureMap::zeros(oh, ow, ch);
    let mut argmax = vec![0usize; oh * ow * ch];
    for r in 0..oh {
        for c in 0..ow {
            for k in 0..ch {
                let mut best_idx = input.index(2 * r, 2 * c, k);
                let mut best = input.data[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = input.index(2 * r + dy, 2 * c + dx, k);
                    if input.data[idx] > best {
                        best = input.data[idx];
                        best_idx = idx;
                    }
                }
                let o = out.index(r, c, k);
                out.data[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    Ok((
        out,
        PoolIndices {
            input_dims: (h, w, ch),
            argmax,
        },
    ))
}

pub fn maxpool2d_backward<T: Scalar>(
    indices: &PoolIndices,
    d_out: &FeatureMap<T>,
) -> Result<FeatureMap<T>> {
    let (h, w, ch) = indices.input_dims;
    d_out.ensure_dims((h / 2, w / 2, ch), "maxpool2d_backward d_out")?;
    let mut d_in = FeatureMap::zeros(h, w, ch);
    for (&src, &g) in indices.argmax.iter().zip(d_out.data()) {
        d_in.data[src] += g;
    }
    Ok(d_in)
}

/// Interpolation taps along one axis: `(i0, i1, frac)` per output index.
fn axis_taps(in_size: usize, out_size: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_size as f64 / out_size as f64;
    (0..out_size)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_size - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_size - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Separable bilinear upsampling with half-pixel centers.
pub fn bilinear_upsample<T: Scalar>(
    input: &FeatureMap<T>,
    target_h: usize,
    target_w: usize,
) -> Result<FeatureMap<T>> {
    let (h, w, ch) = input.dims();
    if target_h < h || target_w < w {
        return Err(dim_err!(
            "bilinear_upsample: target {target_h}x{target_w} smaller than source {h}x{w}"
        ));
    }
    if (target_h, target_w) == (h, w) {
        return Ok(input.clone());
    }
    let rows = axis_taps(h, target_h);
    let cols = axis_taps(w, target_w);
    let mut out = FeatureMap::zeros(target_h, target_w, ch);
    for (r, &(r0, r1, fr)) in rows.iter().enumerate() {
        let fr = T::lit(fr);
        let gr = T::one() - fr;
        for (c, &(c0, c1, fc)) in cols.iter().enumerate() {
            let fc = T::lit(fc);
            let gc = T::one() - fc;
            let (a, b, cc, d) = (
                input.pixel(r0, c0),
                input.pixel(r0, c1),
                input.pixel(r1, c0),
                input.pixel(r1, c1),
            );
            let o = out.pixel_mut(r, c);
            for k in 0..ch {
                o[k] = gr * (gc * a[k] + fc * b[k]) + fr * (gc * cc[k] + fc * d[k]);
            }
        }
    }
    Ok(out)
}

/// Transpose of [`bilinear_upsample`] for a source of `(in_h, in_w)`.
pub fn bilinear_upsample_backward<T: Scalar>(
    d_out: &FeatureMap<T>,
    in_h: usize,
    in_w: usize,
) -> Result<FeatureMap<T>> {
    let (th, tw, ch) = d_out.dims();
    if th < in_h || tw < in_w || in_h == 0 || in_w == 0 {
        return Err(dim_err!(
            "bilinear_upsample_backward: gradient {th}x{tw} cannot come from {in_h}x{in_w}"
        ));
    }
    if (th, tw) == (in_h, in_w) {
        return Ok(d_out.clone());
    }
    let rows = axis_taps(in_h, th);
    let cols = axis_taps(in_w, tw);
    let mut d_in = FeatureMap::zeros(in_h, in_w, ch);
    for (r, &(r0, r1, fr)) in rows.iter().enumerate() {
        let fr = T::lit(fr);
        let gr = T::one() - fr;
        for (c, &(c0, c1, fc)) in cols.iter().enumerate() {
            let fc = T::lit(fc);
            let gc = T::one() - fc;
            for k in 0..ch {
                let g = d_out.get(r, c, k);
                let i = d_in.index(r0, c0, k);
                d_in.data[i] += gr * gc * g;
                let i = d_in.index(r0, c1, k);
                d_in.data[i] += gr * fc * g;
                let i = d_in.index(r1, c0, k);
                d_in.data[i] += fr * gc * g;
                let i = d_in.index(r1, c1, k);
                d_in.data[i] += fr * fc * g;
            }
        }
    }
    Ok(d_in)
}

#[inline]
pub fn relu_scalar<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

pub fn relu<T: Scalar>(x: &FeatureMap<T>) -> FeatureMap<T> {
    x.map(relu_scalar)
}

/// Passes `dY` where `x > 0`; the subgradient at 0 is 0.
pub fn relu_backward<T: Scalar>(x: &FeatureMap<T>, d_y: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    d_y.ensure_dims(x.dims(), "relu_backward")?;
    let mut d = d_y.clone();
    for (g, &v) in d.data.iter_mut().zip(&x.data) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
    Ok(d)
}

/// Numerically stable softmax of one vector, in place.
pub fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let m = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

/// Softmax over the channel axis at every position.
pub fn softmax_channels<T: Scalar>(input: &FeatureMap<T>) -> FeatureMap<T> {
    let mut out = input.clone();
    for px in out.data.chunks_exact_mut(input.channels) {
        softmax_in_place(px);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{fd_check, rand_map, rand_vec, rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute_conv(x: &FeatureMap<f64>, k: &ConvKernels<f64>, b: &[f64]) -> FeatureMap<f64> {
        let [kh, kw, cin, cout] = k.shape();
        let p = (kh / 2) as isize;
        FeatureMap::from_fn(x.height(), x.width(), cout, |r, c, o| {
            let mut s = b[o];
            for i in 0..kh {
                for j in 0..kw {
                    let y = r as isize + i as isize - p;
                    let xx = c as isize + j as isize - p;
                    if y < 0 || xx < 0 || y >= x.height() as isize || xx >= x.width() as isize {
                        continue;
                    }
                    for ci in 0..cin {
                        s += x.get(y as usize, xx as usize, ci) * k.get(i, j, ci, o);
                    }
                }
            }
            s
        })
    }

    fn rand_kernels(rng: &mut ChaCha8Rng, k: usize, cin: usize, cout: usize) -> ConvKernels<f64> {
        ConvKernels::from_vec(k, k, cin, cout, rand_vec(rng, k * k * cin * cout)).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_map(&mut rng, 4, 5, 3);
        let y = conv2d(&x, &ConvKernels::identity(3), &[0.0; 3], 0).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn conv_constant_field_interior() {
        let c = 1.75;
        let x = FeatureMap::filled(5, 5, 1, c);
        let k = ConvKernels::from_vec(3, 3, 1, 1, vec![1.0; 9]).unwrap();
        let y = conv2d(&x, &k, &[0.0], 1).unwrap();
        assert_eq!(y.get(2, 2, 0), 9.0 * c);
        // corner sees 4 cells
        assert_eq!(y.get(0, 0, 0), 4.0 * c);
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_map(&mut rng, 5, 5, 2);
        let k = rand_kernels(&mut rng, 3, 2, 3);
        let b = rand_vec(&mut rng, 3);
        let fast = conv2d(&x, &k, &b, 1).unwrap();
        let slow = brute_conv(&x, &k, &b);
        for (a, e) in fast.data().iter().zip(slow.data()) {
            assert!((a - e).abs() <= 1e-12 * e.abs().max(1.0));
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = FeatureMap::<f64>::zeros(3, 3, 2);
        let k = ConvKernels::zeros(3, 3, 3, 1);
        assert!(matches!(
            conv2d(&x, &k, &[0.0], 1),
            Err(crate::Error::Dimension(_))
        ));
    }

    #[test]
    fn conv_backward_zero_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_map(&mut rng, 4, 4, 2);
        let k = rand_kernels(&mut rng, 3, 2, 2);
        let (_, cache) = conv2d_cached(&x, &k, &[0.0, 0.0], 1).unwrap();
        let g = conv2d_backward(&cache, &k, &FeatureMap::zeros(4, 4, 2)).unwrap();
        assert!(g.d_input.data().iter().all(|&v| v == 0.0));
        assert!(g.d_kernels.data().iter().all(|&v| v == 0.0));
        assert!(g.d_bias.iter().all(|&v| v == 0.0));

        let id = ConvKernels::identity(2);
        let (_, cache) = conv2d_cached(&x, &id, &[0.0, 0.0], 0).unwrap();
        let dy = rand_map(&mut rng, 4, 4, 2);
        let g = conv2d_backward(&cache, &id, &dy).unwrap();
        assert_eq!(g.d_input, dy);
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_map(&mut rng, 4, 5, 2);
        let k = rand_kernels(&mut rng, 3, 2, 3);
        let b = rand_vec(&mut rng, 3);
        let w = rand_map(&mut rng, 4, 5, 3);
        let loss = |x: &FeatureMap<f64>, k: &ConvKernels<f64>, b: &[f64]| {
            conv2d(x, k, b, 1).unwrap().inner(&w)
        };
        let (_, cache) = conv2d_cached(&x, &k, &b, 1).unwrap();
        let g = conv2d_backward(&cache, &k, &w).unwrap();

        let err = fd_check(x.data(), g.d_input.data(), |d| {
            loss(&FeatureMap::new(4, 5, 2, d.to_vec()).unwrap(), &k, &b)
        });
        assert!(err <= 1e-6, "d_input rel err {err}");
        let err = fd_check(k.data(), g.d_kernels.data(), |d| {
            loss(&x, &ConvKernels::from_vec(3, 3, 2, 3, d.to_vec()).unwrap(), &b)
        });
        assert!(err <= 1e-6, "d_kernels rel err {err}");
        let err = fd_check(&b, &g.d_bias, |d| loss(&x, &k, d));
        assert!(err <= 1e-6, "d_bias rel err {err}");
    }

    #[test]
    fn conv_adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_map(&mut rng, 6, 5, 3);
        let y = rand_map(&mut rng, 6, 5, 4);
        let k = rand_kernels(&mut rng, 3, 3, 4);
        let zero = vec![0.0; 4];
        let (fx, cache) = conv2d_cached(&x, &k, &zero, 1).unwrap();
        let back = conv2d_backward(&cache, &k, &y).unwrap();
        let lhs = fx.inner(&y);
        let rhs = x.inner(&back.d_input);
        assert!(rel_err(lhs, rhs) <= 1e-10);
    }

    #[test]
    fn maxpool_cases() {
        let x = FeatureMap::filled(4, 6, 2, 3.0);
        let (y, _) = maxpool2d(&x).unwrap();
        assert_eq!(y, FeatureMap::filled(2, 3, 2, 3.0));

        let x = FeatureMap::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, _) = maxpool2d(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);

        assert!(maxpool2d(&FeatureMap::<f64>::zeros(3, 4, 1)).is_err());
    }

    #[test]
    fn maxpool_matches_window_enumeration_and_routes_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_map(&mut rng, 6, 6, 3);
        let (y, idx) = maxpool2d(&x).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                for k in 0..3 {
                    let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(a, b)| x.get(2 * r + a, 2 * c + b, k))
                        .fold(f64::NEG_INFINITY, f64::max);
                    assert_eq!(y.get(r, c, k), m);
                }
            }
        }
        let dy = rand_map(&mut rng, 3, 3, 3);
        let dx = maxpool2d_backward(&idx, &dy).unwrap();
        let s_in: f64 = dx.data().iter().map(|v| v.abs()).sum();
        let s_out: f64 = dy.data().iter().map(|v| v.abs()).sum();
        assert!((s_in - s_out).abs() < 1e-12);
        assert_eq!(dx.data().iter().filter(|&&v| v != 0.0).count(), 27);
    }

    #[test]
    fn upsample_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_map(&mut rng, 3, 4, 2);
        assert_eq!(bilinear_upsample(&x, 3, 4).unwrap(), x);
        let c = FeatureMap::filled(3, 2, 2, 0.3125);
        let up = bilinear_upsample(&c, 7, 9).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.3125).abs() < 1e-15));
        assert!(bilinear_upsample(&x, 2, 4).is_err());
    }

    #[test]
    fn upsample_matches_coordinate_formula() {
        // scalar oracle evaluating the half-pixel convention directly
        let x = FeatureMap::new(2, 2, 1, vec![1.0, 2.0, 3.0, 5.0]).unwrap();
        let up = bilinear_upsample(&x, 4, 4).unwrap();
        let coord = |i: usize| ((i as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0);
        for r in 0..4 {
            for c in 0..4 {
                let (sy, sx) = (coord(r), coord(c));
                let v = (1.0 - sy) * ((1.0 - sx) * 1.0 + sx * 2.0)
                    + sy * ((1.0 - sx) * 3.0 + sx * 5.0);
                assert!((up.get(r, c, 0) - v).abs() < 1e-14, "({r},{c})");
            }
        }
        // first row: coords 0, 0.25, 0.75, 1
        assert_eq!(up.get(0, 0, 0), 1.0);
        assert!((up.get(0, 1, 0) - 1.25).abs() < 1e-15);
        assert!((up.get(0, 2, 0) - 1.75).abs() < 1e-15);
        assert_eq!(up.get(0, 3, 0), 2.0);
    }

    #[test]
    fn upsample_backward_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dy = rand_map(&mut rng, 3, 3, 2);
        assert_eq!(bilinear_upsample_backward(&dy, 3, 3).unwrap(), dy);
        let z = bilinear_upsample_backward(&FeatureMap::<f64>::zeros(6, 8, 2), 3, 4).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));

        let x = rand_map(&mut rng, 3, 4, 2);
        let w = rand_map(&mut rng, 7, 9, 2);
        let g = bilinear_upsample_backward(&w, 3, 4).unwrap();
        let err = fd_check(x.data(), g.data(), |d| {
            let m = FeatureMap::new(3, 4, 2, d.to_vec()).unwrap();
            bilinear_upsample(&m, 7, 9).unwrap().inner(&w)
        });
        assert!(err <= 1e-6, "rel err {err}");
        // adjoint identity
        let lhs = bilinear_upsample(&x, 7, 9).unwrap().inner(&w);
        let rhs = x.inner(&g);
        assert!(rel_err(lhs, rhs) <= 1e-10);
        assert!(bilinear_upsample_backward(&w, 8, 9).is_err());
    }

    #[test]
    fn relu_definition_and_routing() {
        let x = FeatureMap::new(1, 3, 1, vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let x = FeatureMap::new(1, 2, 1, vec![-1.0, 2.0]).unwrap();
        let dy = FeatureMap::new(1, 2, 1, vec![5.0, 5.0]).unwrap();
        assert_eq!(relu_backward(&x, &dy).unwrap().data(), &[0.0, 5.0]);
    }

    #[test]
    fn relu_matches_finite_differences_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_map(&mut rng, 3, 3, 2);
        let w = rand_map(&mut rng, 3, 3, 2);
        let g = relu_backward(&x, &w).unwrap();
        for i in 0..x.data().len() {
            if x.data()[i].abs() < 1e-4 {
                continue;
            }
            let mut p = x.clone();
            p.data_mut()[i] += 1e-5;
            let mut m = x.clone();
            m.data_mut()[i] -= 1e-5;
            let n = (relu(&p).inner(&w) - relu(&m).inner(&w)) / 2e-5;
            assert!(rel_err(g.data()[i], n) <= 1e-6);
        }
    }

    #[test]
    fn softmax_cases() {
        let x = FeatureMap::filled(2, 2, 4, 0.7);
        let s = softmax_channels(&x);
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let x = FeatureMap::new(1, 1, 2, vec![0.0, 3f64.ln()]).unwrap();
        let s = softmax_channels(&x);
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_map(&mut rng, 3, 2, 5).map(|v| 20.0 * v);
        let s = softmax_channels(&x);
        for r in 0..3 {
            for c in 0..2 {
                let z: f64 = x.pixel(r, c).iter().map(|v| v.exp()).sum();
                for k in 0..5 {
                    assert!(rel_err(s.get(r, c, k), x.get(r, c, k).exp() / z) < 1e-12);
                }
                let sum: f64 = s.pixel(r, c).iter().sum();
                assert!((sum - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn concat_split_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_map(&mut rng, 2, 3, 2);
        let b = rand_map(&mut rng, 2, 3, 2);
        let cat = FeatureMap::concat_channels(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(cat.get(1, 2, 3), b.get(1, 2, 1));
        assert_eq!(cat.split_channels(2).unwrap(), vec![a, b]);
    }

    #[test]
    fn single_precision_tracks_double() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_map(&mut rng, 4, 4, 2);
        let k = rand_kernels(&mut rng, 3, 2, 2);
        let d = conv2d(&x, &k, &[0.1, -0.2], 1).unwrap();
        let kf = ConvKernels::from_vec(3, 3, 2, 2, k.data().iter().map(|&v| v as f32).collect())
            .unwrap();
        let s = conv2d(&x.cast::<f32>(), &kf, &[0.1f32, -0.2], 1).unwrap();
        for (a, b) in d.data().iter().zip(s.data()) {
            assert!((a - *b as f64).abs() < 1e-5);
        }
    }
}
