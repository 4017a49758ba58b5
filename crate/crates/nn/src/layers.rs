//! Layer kernels on channel-last feature maps.
//!
//! Convolutions are "same"-padded, stride 1, with odd kernels; they run as
//! im2col over blocks of output voxels followed by one GEMM per block.

use crossseg_core::{Dims, Execution};

use crate::gemm::{gemm, Gemm};
use crate::tensor::Feature;

/// Floats of im2col scratch per block.
const BLOCK_ELEMS: usize = 1 << 16;
/// Fixed number of partial sums for weight gradients, so the reduction
/// order does not depend on the thread count.
const GRAD_GROUPS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub kernel: [usize; 3],
    pub cin: usize,
    pub cout: usize,
}

impl ConvShape {
    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn weight_len(&self) -> usize {
        self.taps() * self.cin * self.cout
    }

    fn offsets(&self) -> Vec<[isize; 3]> {
        let k = self.kernel.map(|v| v as isize);
        let c = k.map(|v| v / 2);
        let mut out = Vec::with_capacity(self.taps());
        for a in 0..k[0] {
            for b in 0..k[1] {
                for d in 0..k[2] {
                    out.push([a - c[0], b - c[1], d - c[2]]);
                }
            }
        }
        out
    }

    fn block_rows(&self) -> usize {
        (BLOCK_ELEMS / (self.taps() * self.cin).max(1)).clamp(64, 4096)
    }
}

fn im2col<T: Gemm>(x: &Feature<T>, offsets: &[[isize; 3]], r0: usize, rows: usize, cols: &mut [T]) {
    let [nx, ny, nz] = x.dims().map(|v| v as isize);
    let c = x.channels();
    let width = offsets.len() * c;
    let data = x.data();
    for r in 0..rows {
        let v = (r0 + r) as isize;
        let (px, py, pz) = (v / (ny * nz), (v / nz) % ny, v % nz);
        let row = &mut cols[r * width..(r + 1) * width];
        for (o, off) in offsets.iter().enumerate() {
            let (sx, sy, sz) = (px + off[0], py + off[1], pz + off[2]);
            let dst = &mut row[o * c..(o + 1) * c];
            if sx < 0 || sy < 0 || sz < 0 || sx >= nx || sy >= ny || sz >= nz {
                dst.fill(T::zero());
            } else {
                let s = (((sx * ny + sy) * nz + sz) as usize) * c;
                dst.copy_from_slice(&data[s..s + c]);
            }
        }
    }
}

/// `y = conv(x, w) + b`, optionally followed by ReLU. `w` is laid out
/// `[tap][cin][cout]`; an empty `b` means no bias.
pub fn conv_forward<T: Gemm>(
    x: &Feature<T>,
    w: &[T],
    b: &[T],
    shape: ConvShape,
    relu: bool,
    exec: Execution,
) -> Feature<T> {
    assert_eq!(x.channels(), shape.cin, "conv input channels");
    assert_eq!(w.len(), shape.weight_len(), "conv weight length");
    let offsets = shape.offsets();
    let width = shape.taps() * shape.cin;
    let rows_per = shape.block_rows();
    let n = x.voxels();
    let mut y = Feature::zeros(x.dims(), shape.cout);
    exec.for_each_chunk_mut(y.data_mut(), rows_per * shape.cout, |i, out| {
        let r0 = i * rows_per;
        let rows = out.len() / shape.cout;
        let mut cols = vec![T::zero(); rows * width];
        im2col(x, &offsets, r0, rows, &mut cols);
        gemm(rows, width, shape.cout, &cols, false, w, false, T::zero(), out);
        if !b.is_empty() {
            for row in out.chunks_mut(shape.cout) {
                for (v, &bias) in row.iter_mut().zip(b) {
                    *v = *v + bias;
                }
            }
        }
        if relu {
            for v in out.iter_mut() {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
        }
    });
    debug_assert_eq!(y.voxels(), n);
    y
}

/// Adds the weight and bias gradients of a convolution to `dw` and `db`.
pub fn conv_backward_params<T: Gemm>(
    x: &Feature<T>,
    dy: &Feature<T>,
    shape: ConvShape,
    dw: &mut [T],
    db: &mut [T],
    exec: Execution,
) {
    let offsets = shape.offsets();
    let width = shape.taps() * shape.cin;
    let rows_per = shape.block_rows();
    let n = x.voxels();
    let blocks = n.div_ceil(rows_per);
    let groups = GRAD_GROUPS.min(blocks);
    let per_group = blocks.div_ceil(groups.max(1));
    let partials = exec.map_range(groups, |g| {
        let mut acc = vec![T::zero(); width * shape.cout];
        let mut bias = vec![T::zero(); shape.cout];
        let mut cols = Vec::new();
        for blk in g * per_group..((g + 1) * per_group).min(blocks) {
            let r0 = blk * rows_per;
            let rows = rows_per.min(n - r0);
            cols.resize(rows * width, T::zero());
            im2col(x, &offsets, r0, rows, &mut cols);
            let g_out = &dy.data()[r0 * shape.cout..(r0 + rows) * shape.cout];
            gemm(width, rows, shape.cout, &cols, true, g_out, false, T::one(), &mut acc);
            for row in g_out.chunks(shape.cout) {
                for (s, &v) in bias.iter_mut().zip(row) {
                    *s = *s + v;
                }
            }
        }
        (acc, bias)
    });
    for (acc, bias) in partials {
        for (d, a) in dw.iter_mut().zip(acc) {
            *d = *d + a;
        }
        for (d, a) in db.iter_mut().zip(bias) {
            *d = *d + a;
        }
    }
}

/// Gradient with respect to the convolution input: the transposed
/// convolution, computed as a forward pass with the flipped kernel.
pub fn conv_backward_input<T: Gemm>(dy: &Feature<T>, w: &[T], shape: ConvShape, exec: Execution) -> Feature<T> {
    let taps = shape.taps();
    let mut flipped = vec![T::zero(); w.len()];
    for o in 0..taps {
        let src = taps - 1 - o;
        for ci in 0..shape.cin {
            for co in 0..shape.cout {
                flipped[(o * shape.cout + co) * shape.cin + ci] = w[(src * shape.cin + ci) * shape.cout + co];
            }
        }
    }
    let back = ConvShape {
        kernel: shape.kernel,
        cin: shape.cout,
        cout: shape.cin,
    };
    conv_forward(dy, &flipped, &[], back, false, exec)
}

/// Zeroes `dy` wherever the ReLU output `y` was not positive.
pub fn relu_backward<T: Gemm>(y: &Feature<T>, dy: &mut Feature<T>) {
    for (g, &v) in dy.data_mut().iter_mut().zip(y.data()) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
}

fn pooled_dims(d: Dims, p: [usize; 3]) -> Dims {
    [d[0] / p[0], d[1] / p[1], d[2] / p[2]]
}

/// Max pooling with window = stride = `p`. Returns the pooled map and, per
/// output element, the flat index of the chosen input element.
pub fn maxpool_forward<T: Gemm>(x: &Feature<T>, p: [usize; 3]) -> (Feature<T>, Vec<u32>) {
    let d = x.dims();
    let o = pooled_dims(d, p);
    let c = x.channels();
    let mut y = Feature::zeros(o, c);
    let mut arg = vec![0u32; y.data().len()];
    let data = x.data();
    for ox in 0..o[0] {
        for oy in 0..o[1] {
            for oz in 0..o[2] {
                let base = ((ox * o[1] + oy) * o[2] + oz) * c;
                for ch in 0..c {
                    let mut best = T::neg_infinity();
                    let mut at = 0;
                    for a in 0..p[0] {
                        for b in 0..p[1] {
                            for e in 0..p[2] {
                                let (ix, iy, iz) = (ox * p[0] + a, oy * p[1] + b, oz * p[2] + e);
                                let s = ((ix * d[1] + iy) * d[2] + iz) * c + ch;
                                if data[s] > best {
                                    best = data[s];
                                    at = s;
                                }
                            }
                        }
                    }
                    y.data_mut()[base + ch] = best;
                    arg[base + ch] = at as u32;
                }
            }
        }
    }
    (y, arg)
}

pub fn maxpool_backward<T: Gemm>(dy: &Feature<T>, arg: &[u32], in_dims: Dims) -> Feature<T> {
    let mut dx = Feature::zeros(in_dims, dy.channels());
    for (&g, &a) in dy.data().iter().zip(arg) {
        let v = &mut dx.data_mut()[a as usize];
        *v = *v + g;
    }
    dx
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpShape {
    pub factor: [usize; 3],
    pub cin: usize,
    pub cout: usize,
}

impl UpShape {
    pub fn positions(&self) -> usize {
        self.factor.iter().product()
    }

    /// `w` is a `cin × (position · cout)` matrix.
    pub fn weight_len(&self) -> usize {
        self.cin * self.positions() * self.cout
    }

    fn position_offsets(&self) -> Vec<[usize; 3]> {
        let f = self.factor;
        let mut out = Vec::new();
        for a in 0..f[0] {
            for b in 0..f[1] {
                for e in 0..f[2] {
                    out.push([a, b, e]);
                }
            }
        }
        out
    }
}

fn up_index(d: Dims, f: [usize; 3], v: usize, off: [usize; 3]) -> usize {
    let (x, y, z) = (v / (d[1] * d[2]), (v / d[2]) % d[1], v % d[2]);
    let o = [d[0] * f[0], d[1] * f[1], d[2] * f[2]];
    ((x * f[0] + off[0]) * o[1] + y * f[1] + off[1]) * o[2] + z * f[2] + off[2]
}

/// Transposed convolution with kernel = stride = `factor` (no overlap).
pub fn upconv_forward<T: Gemm>(x: &Feature<T>, w: &[T], b: &[T], shape: UpShape) -> Feature<T> {
    let d = x.dims();
    let n = x.voxels();
    let pc = shape.positions() * shape.cout;
    let mut tmp = vec![T::zero(); n * pc];
    gemm(n, shape.cin, pc, x.data(), false, w, false, T::zero(), &mut tmp);
    let f = shape.factor;
    let mut y = Feature::zeros([d[0] * f[0], d[1] * f[1], d[2] * f[2]], shape.cout);
    let offs = shape.position_offsets();
    let out = y.data_mut();
    for v in 0..n {
        for (p, &off) in offs.iter().enumerate() {
            let dst = up_index(d, f, v, off) * shape.cout;
            let src = v * pc + p * shape.cout;
            for co in 0..shape.cout {
                out[dst + co] = tmp[src + co] + b[co];
            }
        }
    }
    y
}

/// Returns the input gradient and accumulates weight and bias gradients.
pub fn upconv_backward<T: Gemm>(
    x: &Feature<T>,
    dy: &Feature<T>,
    w: &[T],
    shape: UpShape,
    dw: &mut [T],
    db: &mut [T],
) -> Feature<T> {
    let d = x.dims();
    let n = x.voxels();
    let pc = shape.positions() * shape.cout;
    let offs = shape.position_offsets();
    let mut g = vec![T::zero(); n * pc];
    let src = dy.data();
    for v in 0..n {
        for (p, &off) in offs.iter().enumerate() {
            let s = up_index(d, shape.factor, v, off) * shape.cout;
            let t = v * pc + p * shape.cout;
            g[t..t + shape.cout].copy_from_slice(&src[s..s + shape.cout]);
        }
    }
    for row in g.chunks(shape.cout) {
        for (acc, &v) in db.iter_mut().zip(row) {
            *acc = *acc + v;
        }
    }
    gemm(shape.cin, n, pc, x.data(), true, &g, false, T::one(), dw);
    let mut dx = Feature::zeros(d, shape.cin);
    gemm(n, pc, shape.cin, &g, false, w, true, T::zero(), dx.data_mut());
    dx
}

/// Channel concatenation `[a | b]`.
pub fn concat<T: Gemm>(a: &Feature<T>, b: &Feature<T>) -> Feature<T> {
    assert_eq!(a.dims(), b.dims(), "concat dims");
    let (ca, cb) = (a.channels(), b.channels());
    let mut data = Vec::with_capacity(a.data().len() + b.data().len());
    for (ra, rb) in a.data().chunks(ca).zip(b.data().chunks(cb)) {
        data.extend_from_slice(ra);
        data.extend_from_slice(rb);
    }
    Feature::from_vec(a.dims(), ca + cb, data).expect("sizes add up")
}

pub fn split<T: Gemm>(d: &Feature<T>, ca: usize) -> (Feature<T>, Feature<T>) {
    let c = d.channels();
    let cb = c - ca;
    let n = d.voxels();
    let mut a = Vec::with_capacity(n * ca);
    let mut b = Vec::with_capacity(n * cb);
    for row in d.data().chunks(c) {
        a.extend_from_slice(&row[..ca]);
        b.extend_from_slice(&row[ca..]);
    }
    (
        Feature::from_vec(d.dims(), ca, a).expect("sizes add up"),
        Feature::from_vec(d.dims(), cb, b).expect("sizes add up"),
    )
}

pub fn softmax<T: Gemm>(z: &mut Feature<T>) {
    let c = z.channels();
    for row in z.data_mut().chunks_mut(c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s = s + *v;
        }
        for v in row.iter_mut() {
            *v = *v / s;
        }
    }
}

/// Gradient with respect to the logits given probabilities `p` and `dp`.
pub fn softmax_backward<T: Gemm>(p: &Feature<T>, dp: &Feature<T>) -> Feature<T> {
    let c = p.channels();
    let mut dz = Feature::zeros(p.dims(), c);
    for ((out, pr), gr) in dz
        .data_mut()
        .chunks_mut(c)
        .zip(p.data().chunks(c))
        .zip(dp.data().chunks(c))
    {
        let dot: T = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for k in 0..c {
            out[k] = pr[k] * (gr[k] - dot);
        }
    }
    dz
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: Dims, c: usize, seed: u64) -> Feature<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product::<usize>() * c;
        Feature::from_vec(dims, c, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn at(f: &Feature<f64>, x: isize, y: isize, z: isize, c: usize) -> f64 {
        let d = f.dims().map(|v| v as isize);
        if x < 0 || y < 0 || z < 0 || x >= d[0] || y >= d[1] || z >= d[2] {
            return 0.0;
        }
        f.data()[(((x * d[1] + y) * d[2] + z) as usize) * f.channels() + c]
    }

    /// Direct six-loop convolution.
    fn naive_conv(x: &Feature<f64>, w: &[f64], b: &[f64], s: ConvShape) -> Feature<f64> {
        let d = x.dims();
        let k = s.kernel.map(|v| v as isize);
        let mut y = Feature::zeros(d, s.cout);
        for px in 0..d[0] {
            for py in 0..d[1] {
                for pz in 0..d[2] {
                    for co in 0..s.cout {
                        let mut acc = b[co];
                        let mut tap = 0;
                        for a in 0..k[0] {
                            for bb in 0..k[1] {
                                for e in 0..k[2] {
                                    for ci in 0..s.cin {
                                        let v = at(x, px as isize + a - k[0] / 2, py as isize + bb - k[1] / 2, pz as isize + e - k[2] / 2, ci);
                                        acc += v * w[(tap * s.cin + ci) * s.cout + co];
                                    }
                                    tap += 1;
                                }
                            }
                        }
                        y.data_mut()[((px * d[1] + py) * d[2] + pz) * s.cout + co] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loops_on_both_paths() {
        for kernel in [[3, 3, 3], [3, 3, 1], [1, 1, 1]] {
            let s = ConvShape { kernel, cin: 3, cout: 5 };
            let x = random([5, 4, 6], 3, 1);
            let w = random([s.weight_len(), 1, 1], 1, 2).into_data();
            let b = random([5, 1, 1], 1, 3).into_data();
            let want = naive_conv(&x, &w, &b, s);
            for exec in [Execution::Sequential, Execution::Parallel] {
                let got = conv_forward(&x, &w, &b, s, false, exec);
                for (g, v) in got.data().iter().zip(want.data()) {
                    assert!((g - v).abs() < 1e-12);
                }
            }
        }
    }

    /// The input and weight gradients satisfy the adjoint identity
    /// `<conv(x), g> = <x, dx> + ...` for a bias-free layer.
    #[test]
    fn conv_adjoints() {
        let s = ConvShape { kernel: [3, 3, 3], cin: 2, cout: 3 };
        let x = random([4, 5, 3], 2, 4);
        let w = random([s.weight_len(), 1, 1], 1, 5).into_data();
        let g = random([4, 5, 3], 3, 6);
        let y = conv_forward(&x, &w, &[], s, false, Execution::Sequential);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let dx = conv_backward_input(&g, &w, s, Execution::Sequential);
        let via_x: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; 3];
        conv_backward_params(&x, &g, s, &mut dw, &mut db, Execution::Parallel);
        let via_w: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
        let gsum: Vec<f64> = (0..3).map(|c| g.data().iter().skip(c).step_by(3).sum()).collect();
        for (a, b) in db.iter().zip(&gsum) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn upconv_adjoint() {
        let s = UpShape { factor: [2, 2, 1], cin: 3, cout: 2 };
        let x = random([2, 3, 2], 3, 7);
        let w = random([s.weight_len(), 1, 1], 1, 8).into_data();
        let y = upconv_forward(&x, &w, &[0.0; 2], s);
        assert_eq!(y.dims(), [4, 6, 2]);
        let g = random(y.dims(), 2, 9);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; 2];
        let dx = upconv_backward(&x, &g, &w, s, &mut dw, &mut db);
        let via_x: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        let via_w: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
    }

    #[test]
    fn pool_picks_window_maximum() {
        let x = random([4, 4, 2], 2, 10);
        let (y, arg) = maxpool_forward(&x, [2, 2, 1]);
        assert_eq!(y.dims(), [2, 2, 2]);
        for (v, &a) in y.data().iter().zip(&arg) {
            assert_eq!(*v, x.data()[a as usize]);
        }
        let (y3, _) = maxpool_forward(&x, [2, 2, 2]);
        let want = (0..2).flat_map(|a| (0..2).flat_map(move |b| (0..2).map(move |e| (a, b, e))))
            .map(|(a, b, e)| at(&x, a, b, e, 1))
            .fold(f64::MIN, f64::max);
        assert_eq!(y3.data()[1], want);
        let back = maxpool_backward(&y, &arg, x.dims());
        assert_eq!(back.data().iter().filter(|&&v| v != 0.0).count(), y.data().len());
    }

    #[test]
    fn concat_split_round_trip() {
        let a = random([2, 2, 2], 2, 11);
        let b = random([2, 2, 2], 3, 12);
        let (a2, b2) = split(&concat(&a, &b), 2);
        assert_eq!((a2, b2), (a, b));
    }

    #[test]
    fn softmax_normalizes() {
        let mut z = random([3, 3, 3], 4, 13);
        z.data_mut()[0] = 800.0;
        softmax(&mut z);
        for row in z.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
