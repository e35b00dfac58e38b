//! 2-D cross-correlation with zero padding, lowered to GEMM via im2col.
//!
//! Kernels use the `(I, H, W, O)` layout, which is already an
//! `(I·H·W) × O` row-major matrix. Features are `(batch, C, H, W)`.

use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::scalar::Scalar;
use crate::tensor::DenseTensor;

/// Samples per gradient-reduction chunk. Fixed so that sequential and
/// parallel execution sum partial gradients in the same order.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }
}

/// `floor((input + 2·padding − kernel) / stride) + 1`, or an error when the
/// kernel does not fit.
pub fn output_extent(input: usize, kernel: usize, geom: ConvGeometry) -> Result<usize> {
    if geom.stride == 0 {
        return Err(Error::shape("stride must be at least 1"));
    }
    let padded = input + 2 * geom.padding;
    if padded < kernel {
        return Err(Error::shape(format!(
            "kernel extent {kernel} exceeds padded input extent {padded}"
        )));
    }
    Ok((padded - kernel) / geom.stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    batch: usize,
    in_ch: usize,
    in_h: usize,
    in_w: usize,
    k_h: usize,
    k_w: usize,
    out_ch: usize,
    out_h: usize,
    out_w: usize,
    geom: ConvGeometry,
}

impl Dims {
    fn resolve<T: Scalar>(x: &DenseTensor<T>, kernel: &DenseTensor<T>, geom: ConvGeometry) -> Result<Self> {
        let [batch, in_ch, in_h, in_w] = four(x.shape(), "input features")?;
        let [k_in, k_h, k_w, out_ch] = four(kernel.shape(), "kernel")?;
        if k_in != in_ch {
            return Err(Error::shape(format!(
                "input has {in_ch} channels but kernel expects {k_in}"
            )));
        }
        Ok(Self {
            batch,
            in_ch,
            in_h,
            in_w,
            k_h,
            k_w,
            out_ch,
            out_h: output_extent(in_h, k_h, geom)?,
            out_w: output_extent(in_w, k_w, geom)?,
            geom,
        })
    }

    fn patch(&self) -> usize {
        self.in_ch * self.k_h * self.k_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_sample(&self) -> usize {
        self.in_ch * self.in_h * self.in_w
    }

    fn out_sample(&self) -> usize {
        self.out_ch * self.positions()
    }

    /// Input coordinate touched by output `o` and kernel tap `k`, if inside.
    #[inline]
    fn source(&self, o: usize, k: usize, stride: usize, extent: usize) -> Option<usize> {
        let pos = (o * stride + k) as isize - self.geom.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Fills `cols` (`patch × positions`) from one input sample.
    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let p = self.positions();
        let s = self.geom.stride;
        for c in 0..self.in_ch {
            let plane = &x[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for kh in 0..self.k_h {
                for kw in 0..self.k_w {
                    let row = (c * self.k_h + kh) * self.k_w + kw;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        match self.source(oy, kh, s, self.in_h) {
                            None => line.fill(T::zero()),
                            Some(iy) => {
                                let src = &plane[iy * self.in_w..(iy + 1) * self.in_w];
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = match self.source(ox, kw, s, self.in_w) {
                                        Some(ix) => src[ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatters-adds `cols` back into one input-gradient sample.
    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.positions();
        let s = self.geom.stride;
        for c in 0..self.in_ch {
            let plane = &mut dx[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for kh in 0..self.k_h {
                for kw in 0..self.k_w {
                    let row = (c * self.k_h + kh) * self.k_w + kw;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let Some(iy) = self.source(oy, kh, s, self.in_h) else {
                            continue;
                        };
                        let line = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        let dst = &mut plane[iy * self.in_w..(iy + 1) * self.in_w];
                        for (ox, &v) in line.iter().enumerate() {
                            if let Some(ix) = self.source(ox, kw, s, self.in_w) {
                                dst[ix] = dst[ix] + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn four(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    shape
        .try_into()
        .map_err(|_| Error::shape(format!("{what} must be 4th-order, got shape {shape:?}")))
}

fn check_bias<T: Scalar>(bias: &DenseTensor<T>, out_ch: usize) -> Result<()> {
    if bias.shape() != [out_ch] {
        return Err(Error::shape(format!(
            "bias has shape {:?}, expected [{out_ch}]",
            bias.shape()
        )));
    }
    Ok(())
}

/// Cross-correlation of `x` (`B×I×H×W`) with `kernel` (`I×kh×kw×O`) plus a
/// per-output-channel bias.
pub fn conv2d_forward<T: Scalar>(
    x: &DenseTensor<T>,
    kernel: &DenseTensor<T>,
    bias: &DenseTensor<T>,
    geom: ConvGeometry,
    mode: ExecMode,
) -> Result<DenseTensor<T>> {
    let d = Dims::resolve(x, kernel, geom)?;
    check_bias(bias, d.out_ch)?;
    let (patch, p) = (d.patch(), d.positions());
    let mut out = vec![T::zero(); d.batch * d.out_sample()];
    let xs = x.data();
    let k = kernel.data();
    let b = bias.data();
    mode.for_each_chunk_mut(&mut out, d.out_sample(), |n, y| {
        let mut cols = vec![T::zero(); patch * p];
        d.im2col(&xs[n * d.in_sample()..(n + 1) * d.in_sample()], &mut cols);
        for (o, row) in y.chunks_exact_mut(p).enumerate() {
            row.fill(b[o]);
        }
        // y (O×P) += Kᵀ (O×patch) · cols (patch×P)
        T::gemm(
            d.out_ch,
            patch,
            p,
            T::one(),
            k,
            (1, d.out_ch as isize),
            &cols,
            (p as isize, 1),
            T::one(),
            y,
            (p as isize, 1),
        );
    });
    DenseTensor::new(vec![d.batch, d.out_ch, d.out_h, d.out_w], out)
}

/// Gradients of a convolution with respect to its input, kernel and bias.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub dx: DenseTensor<T>,
    pub dkernel: DenseTensor<T>,
    pub dbias: DenseTensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &DenseTensor<T>,
    kernel: &DenseTensor<T>,
    dy: &DenseTensor<T>,
    geom: ConvGeometry,
    mode: ExecMode,
) -> Result<ConvGrads<T>> {
    let d = Dims::resolve(x, kernel, geom)?;
    let want = [d.batch, d.out_ch, d.out_h, d.out_w];
    if dy.shape() != want {
        return Err(Error::shape(format!(
            "output gradient has shape {:?}, forward produced {want:?}",
            dy.shape()
        )));
    }
    let (patch, p) = (d.patch(), d.positions());
    let xs = x.data();
    let k = kernel.data();
    let dys = dy.data();
    let n_chunks = d.batch.div_ceil(GRAD_CHUNK);

    let partials = mode.map(n_chunks, |chunk| {
        let lo = chunk * GRAD_CHUNK;
        let hi = (lo + GRAD_CHUNK).min(d.batch);
        let mut dk = vec![T::zero(); patch * d.out_ch];
        let mut db = vec![T::zero(); d.out_ch];
        let mut dx = vec![T::zero(); (hi - lo) * d.in_sample()];
        let mut cols = vec![T::zero(); patch * p];
        let mut dcols = vec![T::zero(); patch * p];
        for n in lo..hi {
            let g = &dys[n * d.out_sample()..(n + 1) * d.out_sample()];
            for (o, row) in g.chunks_exact(p).enumerate() {
                db[o] = db[o] + row.iter().copied().sum::<T>();
            }
            d.im2col(&xs[n * d.in_sample()..(n + 1) * d.in_sample()], &mut cols);
            // dK (patch×O) += cols (patch×P) · gᵀ (P×O)
            T::gemm(
                patch,
                p,
                d.out_ch,
                T::one(),
                &cols,
                (p as isize, 1),
                g,
                (1, p as isize),
                T::one(),
                &mut dk,
                (d.out_ch as isize, 1),
            );
            // dcols (patch×P) = K (patch×O) · g (O×P)
            T::gemm(
                patch,
                d.out_ch,
                p,
                T::one(),
                k,
                (d.out_ch as isize, 1),
                g,
                (p as isize, 1),
                T::zero(),
                &mut dcols,
                (p as isize, 1),
            );
            let off = (n - lo) * d.in_sample();
            d.col2im(&dcols, &mut dx[off..off + d.in_sample()]);
        }
        (dk, db, dx)
    });

    let mut dk = vec![T::zero(); patch * d.out_ch];
    let mut db = vec![T::zero(); d.out_ch];
    let mut dx = Vec::with_capacity(d.batch * d.in_sample());
    for (pk, pb, px) in partials {
        for (a, b) in dk.iter_mut().zip(pk) {
            *a = *a + b;
        }
        for (a, b) in db.iter_mut().zip(pb) {
            *a = *a + b;
        }
        dx.extend(px);
    }
    Ok(ConvGrads {
        dx: DenseTensor::new(x.shape().to_vec(), dx)?,
        dkernel: DenseTensor::new(kernel.shape().to_vec(), dk)?,
        dbias: DenseTensor::new(vec![d.out_ch], db)?,
    })
}
