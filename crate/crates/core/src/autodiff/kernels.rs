//! Raw compute kernels over channels-last buffers.
//!
//! Every spatial operator is lifted to three spatial axes by prepending unit
//! extents, so 1D, 2D and 3D share one code path. Sliding-window operators are
//! described by per-axis [`AxisMap`]s that list, for each output coordinate, the
//! `(tap, input coordinate)` pairs contributing to it. Convolution, its input
//! adjoint and transposed convolution are all the same gather over different
//! maps.
//!
//! Work is split into rows of the output; each output element is produced by a
//! fixed sequential loop, and reductions across rows use a chunking that only
//! depends on the shape. Results are therefore identical for any thread count.

use rayon::prelude::*;

use crate::tensor::{Element, TensorError};

/// Batch, three spatial extents and channels of a channels-last buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Geom {
    pub batch: usize,
    pub sp: [usize; 3],
    pub c: usize,
}

impl Geom {
    /// Interprets `[b, s1..sk, c]` for `k` in `1..=3`; returns the geometry
    /// and the spatial rank `k`.
    pub fn of(shape: &[usize]) -> Result<(Geom, usize), TensorError> {
        let rank = shape.len();
        if !(3..=5).contains(&rank) {
            return Err(TensorError::RankMismatch(format!(
                "expected [batch, spatial(1-3).., channels], got {shape:?}"
            )));
        }
        let k = rank - 2;
        let mut sp = [1usize; 3];
        sp[3 - k..].copy_from_slice(&shape[1..rank - 1]);
        Ok((
            Geom {
                batch: shape[0],
                sp,
                c: shape[rank - 1],
            },
            k,
        ))
    }

    pub fn voxels(&self) -> usize {
        self.sp[0] * self.sp[1] * self.sp[2]
    }

    pub fn rows(&self) -> usize {
        self.batch * self.sp[0] * self.sp[1]
    }

    pub fn row_len(&self) -> usize {
        self.sp[2] * self.c
    }

    pub fn len(&self) -> usize {
        self.batch * self.voxels() * self.c
    }

    /// Shape `[b, s.., c]` with spatial rank `k`.
    pub fn shape(&self, k: usize) -> Vec<usize> {
        let mut s = Vec::with_capacity(k + 2);
        s.push(self.batch);
        s.extend_from_slice(&self.sp[3 - k..]);
        s.push(self.c);
        s
    }

    #[inline]
    fn offset(&self, b: usize, z: usize, y: usize, x: usize) -> usize {
        (((b * self.sp[0] + z) * self.sp[1] + y) * self.sp[2] + x) * self.c
    }
}

/// Lifts kernel extents `[f1..fk]` to three axes.
pub(crate) fn lift3(extents: &[usize], fill: usize) -> [usize; 3] {
    let mut out = [fill; 3];
    let k = extents.len();
    out[3 - k..].copy_from_slice(extents);
    out
}

/// Contributions to each output coordinate along one axis.
#[derive(Debug, Clone)]
pub(crate) struct AxisMap {
    pub out_len: usize,
    pub entries: Vec<Vec<(usize, usize)>>,
}

impl AxisMap {
    /// Zero-padded "same" convolution: `out = ceil(n / stride)`, padding
    /// `max((out - 1) * stride + k - n, 0)` split with the extra on the high side.
    pub fn conv(n: usize, k: usize, stride: usize) -> AxisMap {
        let out_len = n.div_ceil(stride);
        let total = ((out_len - 1) * stride + k).saturating_sub(n);
        let lo = total / 2;
        let entries = (0..out_len)
            .map(|o| {
                (0..k)
                    .filter_map(|d| {
                        let i = (o * stride + d) as isize - lo as isize;
                        (i >= 0 && (i as usize) < n).then_some((d, i as usize))
                    })
                    .collect()
            })
            .collect();
        AxisMap { out_len, entries }
    }

    /// Transposed convolution with output `n * stride`; the adjoint of
    /// [`AxisMap::conv`] on an input of extent `n * stride`.
    pub fn conv_transpose(n: usize, k: usize, stride: usize) -> AxisMap {
        AxisMap::conv(n * stride, k, stride).invert(n * stride)
    }

    /// Swaps roles: for each input coordinate, the `(tap, output)` pairs.
    pub fn invert(&self, in_len: usize) -> AxisMap {
        let mut entries = vec![Vec::new(); in_len];
        for (o, list) in self.entries.iter().enumerate() {
            for &(d, i) in list {
                entries[i].push((d, o));
            }
        }
        for e in &mut entries {
            e.sort_unstable();
        }
        AxisMap {
            out_len: in_len,
            entries,
        }
    }

    /// Stride-1 window of `k` centered like "same" padding.
    pub fn window_same(n: usize, k: usize) -> AxisMap {
        AxisMap::conv(n, k, 1)
    }
}

/// How the kernel buffer `[tap, a, b]` is read by a gather.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum KernelRole {
    /// `out[b] += in[a] * k[tap, a, b]`
    Forward,
    /// `out[a] += in[b] * k[tap, a, b]`
    Adjoint,
}

/// `out[o, :] = bias + sum over (tap, i) in maps(o) of in[i, :] . K(tap)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gather<T: Element>(
    input: &[T],
    in_g: Geom,
    maps: &[AxisMap; 3],
    kernel: &[T],
    kdims: [usize; 3],
    role: KernelRole,
    out_c: usize,
    bias: Option<&[T]>,
) -> (Vec<T>, Geom) {
    let out_g = Geom {
        batch: in_g.batch,
        sp: [maps[0].out_len, maps[1].out_len, maps[2].out_len],
        c: out_c,
    };
    let in_c = in_g.c;
    let block = in_c * out_c;
    let mut out = vec![T::zero(); out_g.len()];
    out.par_chunks_mut(out_g.row_len())
        .enumerate()
        .for_each(|(row, out_row)| {
            let oy = row % out_g.sp[1];
            let oz = (row / out_g.sp[1]) % out_g.sp[0];
            let b = row / (out_g.sp[1] * out_g.sp[0]);
            for (ox, acc) in out_row.chunks_exact_mut(out_c).enumerate() {
                if let Some(bias) = bias {
                    acc.copy_from_slice(bias);
                }
                for &(dz, iz) in &maps[0].entries[oz] {
                    for &(dy, iy) in &maps[1].entries[oy] {
                        let tap_zy = (dz * kdims[1] + dy) * kdims[2];
                        for &(dx, ix) in &maps[2].entries[ox] {
                            let off = in_g.offset(b, iz, iy, ix);
                            let xin = &input[off..off + in_c];
                            let kt = &kernel[(tap_zy + dx) * block..(tap_zy + dx + 1) * block];
                            match role {
                                KernelRole::Forward => {
                                    for (ci, &xv) in xin.iter().enumerate() {
                                        let krow = &kt[ci * out_c..(ci + 1) * out_c];
                                        for (a, &kv) in acc.iter_mut().zip(krow) {
                                            *a = *a + xv * kv;
                                        }
                                    }
                                }
                                KernelRole::Adjoint => {
                                    for (a, krow) in acc.iter_mut().zip(kt.chunks_exact(in_c)) {
                                        let mut s = T::zero();
                                        for (&kv, &xv) in krow.iter().zip(xin) {
                                            s = s + kv * xv;
                                        }
                                        *a = *a + s;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    (out, out_g)
}

/// Fixed number of row-chunks used for reductions; depends only on shape.
fn reduction_chunks(rows: usize) -> usize {
    rows.div_ceil(64).max(1)
}

/// Kernel gradient: `dk[tap, a, b] = sum over o, (tap, i) in maps(o) of in[i, a] * g[o, b]`.
pub(crate) fn kernel_grad<T: Element>(
    input: &[T],
    in_g: Geom,
    grad_out: &[T],
    out_g: Geom,
    maps: &[AxisMap; 3],
    kdims: [usize; 3],
) -> Vec<T> {
    let a_c = in_g.c;
    let b_c = out_g.c;
    let block = a_c * b_c;
    let taps = kdims[0] * kdims[1] * kdims[2];
    let rows = out_g.rows();
    let chunk = reduction_chunks(rows);
    let partials: Vec<Vec<T>> = (0..rows)
        .collect::<Vec<_>>()
        .par_chunks(chunk)
        .map(|rows_chunk| {
            let mut dk = vec![T::zero(); taps * block];
            for &row in rows_chunk {
                let oy = row % out_g.sp[1];
                let oz = (row / out_g.sp[1]) % out_g.sp[0];
                let b = row / (out_g.sp[1] * out_g.sp[0]);
                for ox in 0..out_g.sp[2] {
                    let goff = out_g.offset(b, oz, oy, ox);
                    let g = &grad_out[goff..goff + b_c];
                    for &(dz, iz) in &maps[0].entries[oz] {
                        for &(dy, iy) in &maps[1].entries[oy] {
                            let tap_zy = (dz * kdims[1] + dy) * kdims[2];
                            for &(dx, ix) in &maps[2].entries[ox] {
                                let off = in_g.offset(b, iz, iy, ix);
                                let xin = &input[off..off + a_c];
                                let kt = &mut dk[(tap_zy + dx) * block..(tap_zy + dx + 1) * block];
                                for (krow, &xv) in kt.chunks_exact_mut(b_c).zip(xin) {
                                    for (kv, &gv) in krow.iter_mut().zip(g) {
                                        *kv = *kv + xv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            dk
        })
        .collect();
    sum_partials(partials, taps * block)
}

/// Per-channel sum over all positions.
pub(crate) fn channel_sum<T: Element>(grad_out: &[T], g: Geom) -> Vec<T> {
    let rows = g.rows();
    let row_len = g.row_len();
    let chunk = reduction_chunks(rows);
    let partials: Vec<Vec<T>> = grad_out
        .par_chunks(chunk * row_len)
        .map(|rows_data| {
            let mut acc = vec![T::zero(); g.c];
            for px in rows_data.chunks_exact(g.c) {
                for (a, &v) in acc.iter_mut().zip(px) {
                    *a = *a + v;
                }
            }
            acc
        })
        .collect();
    sum_partials(partials, g.c)
}

fn sum_partials<T: Element>(partials: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut total = vec![T::zero(); len];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t = *t + v;
        }
    }
    total
}

/// Non-overlapping pooling with window `w` per axis. Returns values and, in
/// max mode, the flat input index of each selected element.
pub(crate) fn pool<T: Element>(
    input: &[T],
    g: Geom,
    w: [usize; 3],
    max: bool,
) -> (Vec<T>, Geom, Vec<usize>) {
    let og = Geom {
        batch: g.batch,
        sp: [g.sp[0] / w[0], g.sp[1] / w[1], g.sp[2] / w[2]],
        c: g.c,
    };
    let n = og.len();
    let mut out = vec![T::zero(); n];
    let mut arg = if max { vec![0usize; n] } else { Vec::new() };
    let inv = T::one() / T::of((w[0] * w[1] * w[2]) as f64);
    for b in 0..og.batch {
        for oz in 0..og.sp[0] {
            for oy in 0..og.sp[1] {
                for ox in 0..og.sp[2] {
                    let ooff = og.offset(b, oz, oy, ox);
                    for c in 0..g.c {
                        let mut best = T::neg_infinity();
                        let mut best_i = 0usize;
                        let mut sum = T::zero();
                        // window traversal in increasing linear input index
                        for dz in 0..w[0] {
                            for dy in 0..w[1] {
                                for dx in 0..w[2] {
                                    let i = g.offset(b, oz * w[0] + dz, oy * w[1] + dy, ox * w[2] + dx) + c;
                                    let v = input[i];
                                    if max {
                                        if v > best {
                                            best = v;
                                            best_i = i;
                                        }
                                    } else {
                                        sum = sum + v;
                                    }
                                }
                            }
                        }
                        if max {
                            out[ooff + c] = best;
                            arg[ooff + c] = best_i;
                        } else {
                            out[ooff + c] = sum * inv;
                        }
                    }
                }
            }
        }
    }
    (out, og, arg)
}

pub(crate) fn avg_pool_backward<T: Element>(grad_out: &[T], og: Geom, g: Geom, w: [usize; 3]) -> Vec<T> {
    let mut dx = vec![T::zero(); g.len()];
    let inv = T::one() / T::of((w[0] * w[1] * w[2]) as f64);
    for b in 0..g.batch {
        for z in 0..g.sp[0] {
            for y in 0..g.sp[1] {
                for x in 0..g.sp[2] {
                    let i = g.offset(b, z, y, x);
                    let o = og.offset(b, z / w[0], y / w[1], x / w[2]);
                    for c in 0..g.c {
                        dx[i + c] = grad_out[o + c] * inv;
                    }
                }
            }
        }
    }
    dx
}

/// Stride-1 average over a "same" window; the divisor counts only in-volume
/// neighbours.
pub(crate) fn avg_pool_same<T: Element>(input: &[T], g: Geom, maps: &[AxisMap; 3]) -> Vec<T> {
    let mut out = vec![T::zero(); g.len()];
    out.par_chunks_mut(g.row_len()).enumerate().for_each(|(row, out_row)| {
        let oy = row % g.sp[1];
        let oz = (row / g.sp[1]) % g.sp[0];
        let b = row / (g.sp[1] * g.sp[0]);
        for (ox, acc) in out_row.chunks_exact_mut(g.c).enumerate() {
            let count = maps[0].entries[oz].len() * maps[1].entries[oy].len() * maps[2].entries[ox].len();
            for &(_, iz) in &maps[0].entries[oz] {
                for &(_, iy) in &maps[1].entries[oy] {
                    for &(_, ix) in &maps[2].entries[ox] {
                        let off = g.offset(b, iz, iy, ix);
                        for (a, &v) in acc.iter_mut().zip(&input[off..off + g.c]) {
                            *a = *a + v;
                        }
                    }
                }
            }
            let inv = T::one() / T::of(count as f64);
            for a in acc.iter_mut() {
                *a = *a * inv;
            }
        }
    });
    out
}

pub(crate) fn avg_pool_same_backward<T: Element>(grad_out: &[T], g: Geom, maps: &[AxisMap; 3]) -> Vec<T> {
    // adjoint: each output spreads grad / count over its window
    let inv_maps = [
        maps[0].invert(g.sp[0]),
        maps[1].invert(g.sp[1]),
        maps[2].invert(g.sp[2]),
    ];
    let count = |oz: usize, oy: usize, ox: usize| {
        maps[0].entries[oz].len() * maps[1].entries[oy].len() * maps[2].entries[ox].len()
    };
    let mut dx = vec![T::zero(); g.len()];
    dx.par_chunks_mut(g.row_len()).enumerate().for_each(|(row, dx_row)| {
        let iy = row % g.sp[1];
        let iz = (row / g.sp[1]) % g.sp[0];
        let b = row / (g.sp[1] * g.sp[0]);
        for (ix, acc) in dx_row.chunks_exact_mut(g.c).enumerate() {
            for &(_, oz) in &inv_maps[0].entries[iz] {
                for &(_, oy) in &inv_maps[1].entries[iy] {
                    for &(_, ox) in &inv_maps[2].entries[ix] {
                        let off = g.offset(b, oz, oy, ox);
                        let inv = T::one() / T::of(count(oz, oy, ox) as f64);
                        for (a, &v) in acc.iter_mut().zip(&grad_out[off..off + g.c]) {
                            *a = *a + v * inv;
                        }
                    }
                }
            }
        }
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_is_symmetric_for_odd_kernels() {
        let m = AxisMap::conv(4, 3, 1);
        assert_eq!(m.out_len, 4);
        assert_eq!(m.entries[0], vec![(1, 0), (2, 1)]);
        assert_eq!(m.entries[3], vec![(0, 2), (1, 3)]);
    }

    #[test]
    fn even_kernel_pads_high_side() {
        // k = 2: total pad 1, lo 0, so output o sees inputs o and o + 1
        let m = AxisMap::conv(3, 2, 1);
        assert_eq!(m.entries[0], vec![(0, 0), (1, 1)]);
        assert_eq!(m.entries[2], vec![(0, 2)]);
    }

    #[test]
    fn transpose_map_doubles() {
        let m = AxisMap::conv_transpose(4, 2, 2);
        assert_eq!(m.out_len, 8);
        assert_eq!(m.entries[5], vec![(1, 2)]);
    }

    #[test]
    fn geom_lifts_two_d() {
        let (g, k) = Geom::of(&[2, 5, 6, 3]).unwrap();
        assert_eq!(k, 2);
        assert_eq!(g.sp, [1, 5, 6]);
        assert_eq!(g.shape(2), vec![2, 5, 6, 3]);
        assert!(Geom::of(&[2, 3]).is_err());
    }
}
