use crate::{Error, Result, Scalar};
use rayon::prelude::*;

/// Dense row-major tensor. Rank 0 (empty shape, one element) represents a
/// scalar; losses and gains use it.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} wants {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> Result<T> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::shape(
                "tensor",
                format!("expected scalar, found shape {:?}", self.shape),
            ))
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(
                "tensor",
                format!("expected rank 2, found shape {:?}", self.shape),
            )),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::shape(
                "tensor",
                format!("expected rank 3, found shape {:?}", self.shape),
            )),
        }
    }

    /// Leading dimensions flattened into rows over the last axis; scalars
    /// become 1x1. `[c]` is one row of `c` columns.
    pub fn as_rows(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.data.len() / cols.max(1), cols)
            }
        }
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} against {:?}", self.shape, other.shape),
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_in_place(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "tensor",
                format!("accumulate {:?} into {:?}", other.shape, self.shape),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(())
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }
}

/// `op(a) * op(b)` where `op` optionally transposes its rank-2 argument.
/// Rows of the output are computed independently (and in parallel for
/// large products), so results are bitwise deterministic.
pub fn matmul<T: Scalar>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) -> Result<Tensor<T>> {
    let (ar, ac) = a.dims2()?;
    let (br, bc) = b.dims2()?;
    let (m, ka) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    if ka != kb {
        return Err(Error::shape(
            "matmul",
            format!(
                "inner dimensions {ka} and {kb} (a {:?}{}, b {:?}{})",
                a.shape(),
                if ta { " transposed" } else { "" },
                b.shape(),
                if tb { " transposed" } else { "" },
            ),
        ));
    }
    let k = ka;
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![T::zero(); m * n];

    let row_job = |i: usize, row: &mut [T]| {
        if !ta && !tb {
            let arow = &ad[i * k..(i + 1) * k];
            for (kk, &aik) in arow.iter().enumerate() {
                let brow = &bd[kk * n..(kk + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow.iter()) {
                    *o += aik * bv;
                }
            }
        } else if !ta && tb {
            let arow = &ad[i * k..(i + 1) * k];
            for (j, o) in row.iter_mut().enumerate() {
                let brow = &bd[j * k..(j + 1) * k];
                let mut acc = T::zero();
                for (&av, &bv) in arow.iter().zip(brow.iter()) {
                    acc += av * bv;
                }
                *o = acc;
            }
        } else if ta && !tb {
            for kk in 0..k {
                let aik = ad[kk * m + i];
                let brow = &bd[kk * n..(kk + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow.iter()) {
                    *o += aik * bv;
                }
            }
        } else {
            for (j, o) in row.iter_mut().enumerate() {
                let mut acc = T::zero();
                for kk in 0..k {
                    acc += ad[kk * m + i] * bd[j * k + kk];
                }
                *o = acc;
            }
        }
    };

    if m * n * k > 65_536 && m > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| row_job(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            row_job(i, row);
        }
    }
    Tensor::from_vec(&[m, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_matches_hand_example() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let y = matmul(&a, false, &b, false).unwrap();
        assert_eq!(y.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transposed_variants_agree() {
        let a = t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 5.0, -6.0]);
        let b = t(&[3, 4], &(0..12).map(|i| i as f64 * 0.3 - 1.0).collect::<Vec<_>>());
        let base = matmul(&a, false, &b, false).unwrap();
        let at = t(&[3, 2], &[1.0, 0.5, -2.0, 5.0, 3.0, -6.0]);
        assert_eq!(matmul(&at, true, &b, false).unwrap(), base);
        let mut btd = vec![0.0; 12];
        for r in 0..3 {
            for c in 0..4 {
                btd[c * 3 + r] = b.data()[r * 4 + c];
            }
        }
        let bt = t(&[4, 3], &btd);
        assert_eq!(matmul(&a, false, &bt, true).unwrap(), base);
        assert_eq!(matmul(&at, true, &bt, true).unwrap(), base);
    }

    #[test]
    fn rejects_bad_inner_dims() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        assert!(matmul(&a, false, &b, false).is_err());
    }
}
