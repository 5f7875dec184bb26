use crate::error::{shape, Result};
use crate::scalar::Scalar;

/// Dense 4-D feature map laid out as `[batch, channels, freq_bins, frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<S> {
    pub shape: [usize; 4],
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor4<S> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { shape, data: vec![S::zero(); shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<S>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return shape_err(shape, data.len());
        }
        Ok(Self { shape, data })
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    pub fn w(&self) -> usize {
        self.shape[3]
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn item(&self, n: usize) -> &[S] {
        let l = self.item_len();
        &self.data[n * l..(n + 1) * l]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [S] {
        let l = self.item_len();
        &mut self.data[n * l..(n + 1) * l]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a += b);
    }

    pub fn cast<T: Scalar>(&self) -> Tensor4<T> {
        Tensor4 { shape: self.shape, data: self.data.iter().map(|v| T::c(v.as_f64())).collect() }
    }

    /// Copies items `range` into a new tensor.
    pub fn slice_batch(&self, start: usize, end: usize) -> Self {
        let l = self.item_len();
        let mut shape = self.shape;
        shape[0] = end - start;
        Self { shape, data: self.data[start * l..end * l].to_vec() }
    }

    pub fn concat_batch(a: &Self, b: &Self) -> Result<Self> {
        if a.shape[1..] != b.shape[1..] {
            return shape(format!("cannot stack {:?} and {:?}", a.shape, b.shape));
        }
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Ok(Self { shape: [a.shape[0] + b.shape[0], a.shape[1], a.shape[2], a.shape[3]], data })
    }

    /// Channel-axis concatenation `[a; b]`.
    pub fn concat_channels(a: &Self, b: &Self) -> Result<Self> {
        if a.shape[0] != b.shape[0] || a.shape[2..] != b.shape[2..] {
            return shape(format!("cannot concatenate channels of {:?} and {:?}", a.shape, b.shape));
        }
        let (la, lb) = (a.item_len(), b.item_len());
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        for n in 0..a.n() {
            data.extend_from_slice(&a.data[n * la..(n + 1) * la]);
            data.extend_from_slice(&b.data[n * lb..(n + 1) * lb]);
        }
        Ok(Self { shape: [a.shape[0], a.shape[1] + b.shape[1], a.shape[2], a.shape[3]], data })
    }

    /// Inverse of [`Tensor4::concat_channels`]: first `ca` channels, then the rest.
    pub fn split_channels(&self, ca: usize) -> (Self, Self) {
        let cb = self.c() - ca;
        let p = self.plane();
        let mut a = Self::zeros([self.n(), ca, self.h(), self.w()]);
        let mut b = Self::zeros([self.n(), cb, self.h(), self.w()]);
        for n in 0..self.n() {
            let item = self.item(n);
            a.item_mut(n).copy_from_slice(&item[..ca * p]);
            b.item_mut(n).copy_from_slice(&item[ca * p..]);
        }
        (a, b)
    }

    /// Reflect-pads the frame axis on the right up to `frames`.
    pub fn reflect_pad_frames(&self, frames: usize) -> Self {
        let w = self.w();
        if frames == w {
            return self.clone();
        }
        let mut out = Self::zeros([self.n(), self.c(), self.h(), frames]);
        let rows = self.n() * self.c() * self.h();
        for r in 0..rows {
            let src = &self.data[r * w..(r + 1) * w];
            let dst = &mut out.data[r * frames..(r + 1) * frames];
            for (t, d) in dst.iter_mut().enumerate() {
                *d = src[reflect_index(t, w)];
            }
        }
        out
    }

    /// Keeps the first `frames` frames.
    pub fn crop_frames(&self, frames: usize) -> Self {
        let w = self.w();
        if frames == w {
            return self.clone();
        }
        let mut out = Self::zeros([self.n(), self.c(), self.h(), frames]);
        let rows = self.n() * self.c() * self.h();
        for r in 0..rows {
            out.data[r * frames..(r + 1) * frames].copy_from_slice(&self.data[r * w..r * w + frames]);
        }
        out
    }

    /// Gradient of [`Tensor4::reflect_pad_frames`]: folds padded frames back onto their sources.
    pub fn fold_reflect_pad(&self, frames: usize) -> Self {
        let w = self.w();
        if frames == w {
            return self.clone();
        }
        let mut out = Self::zeros([self.n(), self.c(), self.h(), frames]);
        let rows = self.n() * self.c() * self.h();
        for r in 0..rows {
            for t in 0..w {
                out.data[r * frames + reflect_index(t, frames)] += self.data[r * w + t];
            }
        }
        out
    }

    /// Gradient of [`Tensor4::crop_frames`]: zero-extends back to `frames`.
    pub fn uncrop_frames(&self, frames: usize) -> Self {
        let w = self.w();
        let mut out = Self::zeros([self.n(), self.c(), self.h(), frames]);
        let rows = self.n() * self.c() * self.h();
        for r in 0..rows {
            out.data[r * frames..r * frames + w].copy_from_slice(&self.data[r * w..(r + 1) * w]);
        }
        out
    }
}

/// Index into a length-`len` signal under whole-sample symmetric reflection
/// (`... 2 1 | 0 1 2 ... len-1 | len-2 ...`).
pub fn reflect_index(t: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let m = t % period;
    if m < len {
        m
    } else {
        period - m
    }
}

fn shape_err<T>(shape: [usize; 4], len: usize) -> Result<T> {
    crate::error::shape(format!("shape {shape:?} does not hold {len} elements"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_concat_round_trip() {
        let a = Tensor4::<f64>::from_vec([2, 1, 1, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor4::<f64>::from_vec([2, 2, 1, 2], (0..8).map(|v| v as f64 * 10.).collect()).unwrap();
        let c = Tensor4::concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape, [2, 3, 1, 2]);
        assert_eq!(c.item(1), &[3., 4., 40., 50., 60., 70.]);
        let (x, y) = c.split_channels(1);
        assert_eq!((x, y), (a, b));
    }

    #[test]
    fn reflect_pad_and_fold_are_adjoint() {
        let x = Tensor4::<f64>::from_vec([1, 1, 1, 3], vec![1., 2., 3.]).unwrap();
        let p = x.reflect_pad_frames(6);
        assert_eq!(p.data, vec![1., 2., 3., 2., 1., 2.]);
        let g = Tensor4::<f64>::from_vec([1, 1, 1, 6], vec![1.; 6]).unwrap();
        assert_eq!(g.fold_reflect_pad(3).data, vec![2., 3., 1.]);
        assert_eq!(p.crop_frames(3), x);
    }
}
