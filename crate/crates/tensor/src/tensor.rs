use crate::{Result, Scalar, TensorError};

/// Dense row-major tensor. Image tensors use NCHW layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..numel).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            s => Err(TensorError::Shape(format!("expected rank-4 NCHW tensor, got {s:?}"))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(TensorError::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::Shape(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    /// Element `(n, c, y, x)` of an NCHW tensor.
    pub fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let (_, cs, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((n * cs + c) * h + y) * w + x]
    }

    /// Copies batch items `idx` (in that order) into a new NCHW tensor.
    pub fn gather_batch(&self, idx: &[usize]) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        let item = c * h * w;
        let mut data = Vec::with_capacity(idx.len() * item);
        for &i in idx {
            if i >= n {
                return Err(TensorError::Shape(format!("batch index {i} out of range {n}")));
            }
            data.extend_from_slice(&self.data[i * item..(i + 1) * item]);
        }
        Ok(Self { shape: vec![idx.len(), c, h, w], data })
    }

    /// Copies channels `idx` (in that order) into a new NCHW tensor.
    pub fn select_channels(&self, idx: &[usize]) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        let plane = h * w;
        let mut data = Vec::with_capacity(n * idx.len() * plane);
        for b in 0..n {
            for &ch in idx {
                if ch >= c {
                    return Err(TensorError::Shape(format!("channel {ch} out of range {c}")));
                }
                let off = (b * c + ch) * plane;
                data.extend_from_slice(&self.data[off..off + plane]);
            }
        }
        Ok(Self { shape: vec![n, idx.len(), h, w], data })
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Shape("concat of zero tensors".into()))?;
        let (n, _, h, w) = first.dims4()?;
        let mut total_c = 0;
        for p in parts {
            let (pn, pc, ph, pw) = p.dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(TensorError::Shape(format!(
                    "concat mismatch {:?} vs {:?}",
                    first.shape, p.shape
                )));
            }
            total_c += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total_c * plane);
        for b in 0..n {
            for p in parts {
                let pc = p.shape[1];
                data.extend_from_slice(&p.data[b * pc * plane..(b + 1) * pc * plane]);
            }
        }
        Ok(Self { shape: vec![n, total_c, h, w], data })
    }

    /// Concatenates NCHW tensors along the batch axis.
    pub fn concat_batch(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Shape("concat of zero tensors".into()))?;
        let (_, c, h, w) = first.dims4()?;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            let (pn, pc, ph, pw) = p.dims4()?;
            if (pc, ph, pw) != (c, h, w) {
                return Err(TensorError::Shape(format!(
                    "concat mismatch {:?} vs {:?}",
                    first.shape, p.shape
                )));
            }
            n += pn;
            data.extend_from_slice(&p.data);
        }
        Ok(Self { shape: vec![n, c, h, w], data })
    }

    /// Rotates every HxW plane by `k` quarter turns counter-clockwise.
    pub fn rot90(&self, k: usize) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        let k = k % 4;
        if k == 0 {
            return Ok(self.clone());
        }
        let (oh, ow) = if k % 2 == 1 { (w, h) } else { (h, w) };
        let mut out = vec![T::zero(); self.data.len()];
        for p in 0..n * c {
            let src = &self.data[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    let (sy, sx) = match k {
                        1 => (x, w - 1 - y),
                        2 => (h - 1 - y, w - 1 - x),
                        _ => (h - 1 - x, y),
                    };
                    dst[y * ow + x] = src[sy * w + sx];
                }
            }
        }
        Ok(Self { shape: vec![n, c, oh, ow], data: out })
    }

    /// Mirrors every plane left-right.
    pub fn flip_horizontal(&self) -> Result<Self> {
        let (_, _, h, w) = self.dims4()?;
        let mut out = self.data.clone();
        for row in out.chunks_mut(w) {
            row.reverse();
        }
        debug_assert_eq!(out.len() % (h * w).max(1), 0);
        Ok(Self { shape: self.shape.clone(), data: out })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe() -> Tensor<f64> {
        Tensor::from_fn(&[1, 1, 2, 3], |i| i as f64)
    }

    #[test]
    fn rot90_quarter_turn_is_counter_clockwise() {
        // [[0,1,2],[3,4,5]] -> [[2,5],[1,4],[0,3]]
        let r = probe().rot90(1).unwrap();
        assert_eq!(r.shape(), &[1, 1, 3, 2]);
        assert_eq!(r.data(), &[2.0, 5.0, 1.0, 4.0, 0.0, 3.0]);
        assert_eq!(probe().rot90(4).unwrap(), probe());
        let back = r.rot90(3).unwrap();
        assert_eq!(back, probe());
    }

    #[test]
    fn flip_mirrors_rows() {
        let f = probe().flip_horizontal().unwrap();
        assert_eq!(f.data(), &[2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn gather_and_select() {
        let t = Tensor::<f64>::from_fn(&[3, 2, 1, 1], |i| i as f64);
        assert_eq!(t.gather_batch(&[2, 0]).unwrap().data(), &[4.0, 5.0, 0.0, 1.0]);
        assert_eq!(t.select_channels(&[1]).unwrap().data(), &[1.0, 3.0, 5.0]);
    }
}
