//! Dense row-major `f64` tensors and the kernels the network layers use.
//!
//! Public operations never mutate their operands and always return tensors
//! whose values are finite; a non-finite result is reported as
//! [`Error::NonFinite`] rather than propagated.

pub mod kernels;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use kernels::MatRef;

/// Largest rank in use: batch x channel x height x width.
pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(Error::Shape(format!(
                "rank must be in 1..={MAX_RANK}, got {dims:?}"
            )));
        }
        if dims.contains(&0) {
            return Err(Error::Shape(format!("zero extent in {dims:?}")));
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Prepends a leading (batch) extent.
    pub fn with_batch(&self, n: usize) -> Result<Shape> {
        let mut dims = Vec::with_capacity(self.rank() + 1);
        dims.push(n);
        dims.extend_from_slice(&self.0);
        Shape::new(dims)
    }
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = Error;

    fn try_from(dims: Vec<usize>) -> Result<Self> {
        Shape::new(dims)
    }
}

impl From<Shape> for Vec<usize> {
    fn from(s: Shape) -> Self {
        s.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

/// Winner positions recorded by [`Tensor::maxpool2x2`]: one flat input
/// index per output element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndex {
    pub input_shape: Shape,
    pub argmax: Vec<usize>,
}

impl PoolIndex {
    /// Routes an output gradient back to the input positions that won each
    /// window.
    pub fn scatter(&self, grad_out: &[f64]) -> Result<Tensor> {
        if grad_out.len() != self.argmax.len() {
            return Err(Error::dim(
                "maxpool backward",
                &[grad_out.len()],
                &[self.argmax.len()],
            ));
        }
        let mut data = vec![0.0; self.input_shape.numel()];
        for (&idx, &g) in self.argmax.iter().zip(grad_out) {
            data[idx] += g;
        }
        Tensor::new(self.input_shape.clone(), data)
    }
}

fn ensure_finite(data: &[f64], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::dim(
                "tensor construction",
                shape.dims(),
                &[data.len()],
            ));
        }
        ensure_finite(&data, "tensor construction")?;
        Ok(Tensor { shape, data })
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        Tensor::new(Shape::new(dims)?, data)
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.numel();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Row-major `[rows, cols]` tensor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Tensor::from_vec(&[rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::from_vec(&[n, n], data)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, index: &[usize]) -> Option<f64> {
        if index.len() != self.shape.rank() {
            return None;
        }
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(self.dims()) {
            if i >= d {
                return None;
            }
            flat = flat * d + i;
        }
        Some(self.data[flat])
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.data.len() {
            return Err(Error::dim("reshape", self.dims(), dims));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    fn map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        ensure_finite(&data, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (&[m, k], &[k2, n]) = (self.dims(), rhs.dims()) else {
            return Err(Error::dim("matmul", self.dims(), rhs.dims()));
        };
        if k != k2 {
            return Err(Error::dim("matmul", self.dims(), rhs.dims()));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            MatRef::new(&self.data, m, k),
            MatRef::new(&rhs.data, k, n),
            0.0,
            &mut out,
        );
        ensure_finite(&out, "matmul")?;
        Tensor::from_vec(&[m, n], out)
    }

    /// Stride-1 cross-correlation with "same" zero padding.
    /// `self` is `[N, C, H, W]`, `kernels` is `[F, C, kh, kw]` with odd
    /// `kh`/`kw`, `bias` is `[F]`; the result is `[N, F, H, W]`.
    pub fn conv2d_same(&self, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (&[n, c, h, w], &[f, kc, kh, kw]) = (self.dims(), kernels.dims()) else {
            return Err(Error::dim("conv2d", self.dims(), kernels.dims()));
        };
        if c != kc {
            return Err(Error::dim("conv2d channels", self.dims(), kernels.dims()));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Shape(format!(
                "same-padded convolution needs odd kernel extents, got {kh}x{kw}"
            )));
        }
        if bias.dims() != [f] {
            return Err(Error::dim("conv2d bias", bias.dims(), &[f]));
        }
        let hw = h * w;
        let ck = c * kh * kw;
        let mut cols = vec![0.0; ck * hw];
        let mut out = vec![0.0; n * f * hw];
        for (img, dst) in self
            .data
            .chunks_exact(c * hw)
            .zip(out.chunks_exact_mut(f * hw))
        {
            kernels::im2col_same(img, (c, h, w), (kh, kw), &mut cols);
            for (row, &b) in dst.chunks_exact_mut(hw).zip(&bias.data) {
                row.fill(b);
            }
            kernels::gemm(
                MatRef::new(&kernels.data, f, ck),
                MatRef::new(&cols, ck, hw),
                1.0,
                dst,
            );
        }
        ensure_finite(&out, "conv2d")?;
        Tensor::from_vec(&[n, f, h, w], out)
    }

    /// 2x2 stride-2 max pooling of a `[N, C, H, W]` tensor. Odd spatial
    /// extents are rejected.
    pub fn maxpool2x2(&self) -> Result<(Tensor, PoolIndex)> {
        let &[n, c, h, w] = self.dims() else {
            return Err(Error::Shape(format!(
                "maxpool expects [N, C, H, W], got {:?}",
                self.dims()
            )));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "maxpool over odd spatial extent {h}x{w}"
            )));
        }
        let len = n * c * (h / 2) * (w / 2);
        let mut out = vec![0.0; len];
        let mut argmax = vec![0; len];
        kernels::maxpool2x2(&self.data, n * c, h, w, &mut out, &mut argmax);
        Ok((
            Tensor::from_vec(&[n, c, h / 2, w / 2], out)?,
            PoolIndex {
                input_shape: self.shape.clone(),
                argmax,
            },
        ))
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.map("relu", |v| v.max(0.0))
    }

    /// Derivative of ReLU evaluated at `self` (0 at the kink).
    pub fn relu_grad(&self) -> Result<Tensor> {
        self.map("relu_grad", |v| if v > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.map("sigmoid", kernels::sigmoid)
    }

    /// Softmax over the last axis of a rank-2 tensor.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let &[_, cols] = self.dims() else {
            return Err(Error::Shape(format!(
                "softmax_rows expects rank 2, got {:?}",
                self.dims()
            )));
        };
        let mut data = self.data.clone();
        kernels::softmax_rows_in_place(&mut data, cols);
        ensure_finite(&data, "softmax")?;
        Tensor::new(self.shape.clone(), data)
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape != rhs.shape {
            return Err(Error::dim("add", self.dims(), rhs.dims()));
        }
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| a + b)
            .collect();
        ensure_finite(&data, "add")?;
        Tensor::new(self.shape.clone(), data)
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        self.map("scale", |v| v * factor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn random_tensor(rng: &mut Xoshiro256PlusPlus, dims: &[usize]) -> Tensor {
        let n = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn matmul_oracle(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.dims()[0], a.dims()[1], b.dims()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                }
            }
        }
        out
    }

    fn conv_oracle(x: &Tensor, k: &Tensor, b: &Tensor) -> Vec<f64> {
        let [n, c, h, w] = x.dims().try_into().unwrap();
        let [f, _, kh, kw] = k.dims().try_into().unwrap();
        let (ph, pw) = (kh as isize / 2, kw as isize / 2);
        let mut out = vec![0.0; n * f * h * w];
        for ni in 0..n {
            for fi in 0..f {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = b.data()[fi];
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let sy = y as isize + ky as isize - ph;
                                    let sx = xx as isize + kx as isize - pw;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    acc += x.get(&[ni, ci, sy as usize, sx as usize]).unwrap()
                                        * k.get(&[fi, ci, ky, kx]).unwrap();
                                }
                            }
                        }
                        out[((ni * f + fi) * h + y) * w + xx] = acc;
                    }
                }
            }
        }
        out
    }

    fn pool_oracle(x: &Tensor) -> (Vec<f64>, Vec<usize>) {
        let [n, c, h, w] = x.dims().try_into().unwrap();
        let mut vals = Vec::new();
        let mut idx = Vec::new();
        for p in 0..n * c {
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    let mut best = (f64::NEG_INFINITY, 0);
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = p * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                            if x.data()[i] > best.0 {
                                best = (x.data()[i], i);
                            }
                        }
                    }
                    vals.push(best.0);
                    idx.push(best.1);
                }
            }
        }
        (vals, idx)
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn shape_rules() {
        assert!(Shape::new(vec![]).is_err());
        assert!(Shape::new(vec![2, 0]).is_err());
        assert!(Shape::new(vec![1, 2, 3, 4, 5]).is_err());
        assert_eq!(Shape::new(vec![2, 3, 4]).unwrap().numel(), 24);
    }

    #[test]
    fn construction_rejects_bad_data() {
        assert!(Tensor::from_vec(&[2], vec![1.0]).is_err());
        assert!(matches!(
            Tensor::from_vec(&[1], vec![f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn matmul_examples() {
        let i = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(i.matmul(&b).unwrap(), b);
        let r = Tensor::from_rows(&[vec![1.0, 2.0]])
            .unwrap()
            .matmul(&Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap())
            .unwrap();
        assert_eq!(r.data(), &[11.0]);

        let mut rng = Xoshiro256PlusPlus::seed_from_u64(7);
        let a = random_tensor(&mut rng, &[4, 5]);
        let b = random_tensor(&mut rng, &[5, 3]);
        assert_close(a.matmul(&b).unwrap().data(), &matmul_oracle(&a, &b), 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(Shape::new(vec![2, 3]).unwrap());
        let err = a.matmul(&a).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn conv_examples() {
        let zeros = Tensor::zeros(Shape::new(vec![1, 1, 3, 3]).unwrap());
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        let k = random_tensor(&mut rng, &[2, 1, 3, 3]);
        let out = zeros
            .conv2d_same(&k, &Tensor::zeros(Shape::new(vec![2]).unwrap()))
            .unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.dims(), &[1, 2, 3, 3]);

        let x = random_tensor(&mut rng, &[1, 1, 5, 5]);
        let two = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let out = x
            .conv2d_same(&two, &Tensor::from_vec(&[1], vec![0.0]).unwrap())
            .unwrap();
        assert_eq!(out, x.scale(2.0).unwrap());

        let x = random_tensor(&mut rng, &[1, 2, 6, 6]);
        let k = random_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = random_tensor(&mut rng, &[3]);
        assert_close(
            x.conv2d_same(&k, &b).unwrap().data(),
            &conv_oracle(&x, &k, &b),
            1e-12,
        );
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::zeros(Shape::new(vec![1, 2, 4, 4]).unwrap());
        let k = Tensor::zeros(Shape::new(vec![1, 3, 3, 3]).unwrap());
        let b = Tensor::zeros(Shape::new(vec![1]).unwrap());
        assert!(matches!(
            x.conv2d_same(&k, &b),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn pool_examples() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (out, idx) = x.maxpool2x2().unwrap();
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(idx.argmax, vec![3]);

        let c = Tensor::from_vec(&[1, 1, 4, 4], vec![0.5; 16]).unwrap();
        let (out, idx) = c.maxpool2x2().unwrap();
        assert_eq!(out.data(), &[0.5; 4]);
        assert_eq!(idx.argmax, vec![0, 2, 8, 10]);

        let odd = Tensor::zeros(Shape::new(vec![1, 1, 3, 4]).unwrap());
        assert!(matches!(odd.maxpool2x2(), Err(Error::Shape(_))));
    }

    #[test]
    fn elementwise_examples() {
        let t = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(t.relu().unwrap().data(), &[0.0, 0.0, 2.0]);
        assert_eq!(t.relu_grad().unwrap().data(), &[0.0, 0.0, 1.0]);
        let z = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        assert_eq!(z.sigmoid().unwrap().data(), &[0.5]);
        let row = Tensor::from_vec(&[1, 10], vec![3.3; 10]).unwrap();
        assert_close(row.softmax_rows().unwrap().data(), &[0.1; 10], 1e-15);
        let big = Tensor::from_vec(&[2], vec![-800.0, 800.0])
            .unwrap()
            .sigmoid()
            .unwrap();
        assert_eq!(big.data(), &[0.0, 1.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(50))]

            #[test]
            fn conv_matches_loop_oracle(seed in any::<u64>(), c in 1usize..3, f in 1usize..4,
                                        h in 1usize..7, w in 1usize..7, kh in 0usize..3, kw in 0usize..3) {
                let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
                let x = random_tensor(&mut rng, &[2, c, h, w]);
                let k = random_tensor(&mut rng, &[f, c, 2 * kh + 1, 2 * kw + 1]);
                let b = random_tensor(&mut rng, &[f]);
                let got = x.conv2d_same(&k, &b).unwrap();
                let want = conv_oracle(&x, &k, &b);
                for (g, w) in got.data().iter().zip(&want) {
                    prop_assert!((g - w).abs() <= 1e-12);
                }
            }

            #[test]
            fn pool_matches_scan_oracle(seed in any::<u64>(), c in 1usize..3, h in 1usize..4, w in 1usize..4) {
                let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
                let x = random_tensor(&mut rng, &[2, c, 2 * h, 2 * w]);
                let (out, idx) = x.maxpool2x2().unwrap();
                let (vals, want_idx) = pool_oracle(&x);
                prop_assert_eq!(out.data(), &vals[..]);
                prop_assert_eq!(&idx.argmax, &want_idx);
                // scattering a ones-gradient marks exactly one winner per window
                let grad = idx.scatter(&vec![1.0; out.len()]).unwrap();
                let nonzero = grad.data().iter().filter(|&&v| v != 0.0).count();
                prop_assert_eq!(nonzero, out.len());
            }

            #[test]
            fn softmax_rows_are_distributions(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..12) {
                let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
                let x = random_tensor(&mut rng, &[rows, cols]).scale(20.0).unwrap();
                let s = x.softmax_rows().unwrap();
                for row in s.data().chunks(cols) {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                    prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
                    if cols > 1 {
                        prop_assert!(row.iter().all(|&p| p < 1.0));
                    }
                }
            }

            #[test]
            fn matmul_identity(seed in any::<u64>(), m in 1usize..8, n in 1usize..8) {
                let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
                let a = random_tensor(&mut rng, &[m, n]);
                prop_assert_eq!(a.matmul(&Tensor::identity(n).unwrap()).unwrap(), a.clone());
                let b = random_tensor(&mut rng, &[n, m]);
                let got = a.matmul(&b).unwrap();
                for (g, w) in got.data().iter().zip(&matmul_oracle(&a, &b)) {
                    prop_assert!((g - w).abs() <= 1e-12);
                }
            }
        }
    }
}
