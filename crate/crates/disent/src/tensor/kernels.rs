//! Dense compute kernels behind the tape ops: blocked matrix products and
//! im2col-based convolutions. Every output element is reduced in a fixed
//! sequential order, so results are bitwise identical for any thread count.

use crate::{kernel_pool, Real};
use rayon::prelude::*;

const PAR_FLOP_THRESHOLD: usize = 1 << 16;

fn axpy(out: &mut [Real], x: &[Real], a: Real) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Four-lane dot product; the accumulation order is fixed, so results are
/// deterministic (and it vectorizes, unlike a single-accumulator fold).
fn dot4(x: &[Real], y: &[Real]) -> Real {
    let chunks = x.len() / 4 * 4;
    let mut acc = [0.0; 4];
    let mut i = 0;
    while i < chunks {
        acc[0] += x[i] * y[i];
        acc[1] += x[i + 1] * y[i + 1];
        acc[2] += x[i + 2] * y[i + 2];
        acc[3] += x[i + 3] * y[i + 3];
        i += 4;
    }
    let mut tail = 0.0;
    while i < x.len() {
        tail += x[i] * y[i];
        i += 1;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// out[m,n] = a[m,k] * b[k,n]. `out` is overwritten.
pub fn matmul(a: &[Real], b: &[Real], m: usize, k: usize, n: usize, out: &mut [Real]) {
    out.fill(0.0);
    matmul_acc(a, b, m, k, n, out);
}

/// out[m,n] += a[m,k] * b[k,n].
pub fn matmul_acc(a: &[Real], b: &[Real], m: usize, k: usize, n: usize, out: &mut [Real]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, out_row: &mut [Real]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip != 0.0 {
                axpy(out_row, &b[p * n..p * n + n], aip);
            }
        }
    };
    if 2 * m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        kernel_pool().install(|| {
            out.par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, out_row)| row(i, out_row));
        });
    } else {
        for (i, out_row) in out.chunks_mut(n).enumerate() {
            row(i, out_row);
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T  (b given row-major as [n,k]).
pub fn matmul_abt_acc(a: &[Real], b: &[Real], m: usize, k: usize, n: usize, out: &mut [Real]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, out_row: &mut [Real]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            *o += dot4(a_row, &b[j * k..(j + 1) * k]);
        }
    };
    if 2 * m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        kernel_pool().install(|| {
            out.par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, out_row)| row(i, out_row));
        });
    } else {
        for (i, out_row) in out.chunks_mut(n).enumerate() {
            row(i, out_row);
        }
    }
}

/// out[k,n] = a[m,k]^T * b[m,n]  (a given row-major as [m,k]).
pub fn matmul_atb(a: &[Real], b: &[Real], m: usize, k: usize, n: usize, out: &mut [Real]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    out.fill(0.0);
    // Row r of `out` accumulates over the m rows of a/b in order.
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (r, &air) in a_row.iter().enumerate() {
            if air != 0.0 {
                axpy(&mut out[r * n..(r + 1) * n], b_row, air);
            }
        }
    }
}

/// Spatial geometry of one 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(
        c_in: usize,
        h_in: usize,
        w_in: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let h_out = (h_in + 2 * padding - kh) / stride + 1;
        let w_out = (w_in + 2 * padding - kw) / stride + 1;
        ConvGeom {
            c_in,
            h_in,
            w_in,
            kh,
            kw,
            stride,
            padding,
            h_out,
            w_out,
        }
    }

    pub fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn l(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfold one sample [C,H,W] into cols [K, L], K = C*kh*kw, L = Hout*Wout.
pub fn im2col(x: &[Real], g: &ConvGeom, cols: &mut [Real]) {
    debug_assert_eq!(x.len(), g.c_in * g.h_in * g.w_in);
    debug_assert_eq!(cols.len(), g.k() * g.l());
    cols.fill(0.0);
    let (s, p) = (g.stride as isize, g.padding as isize);
    for ci in 0..g.c_in {
        let x_c = &x[ci * g.h_in * g.w_in..(ci + 1) * g.h_in * g.w_in];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let r = (ci * g.kh + i) * g.kw + j;
                let row = &mut cols[r * g.l()..(r + 1) * g.l()];
                for ho in 0..g.h_out {
                    let ih = ho as isize * s - p + i as isize;
                    if ih < 0 || ih >= g.h_in as isize {
                        continue;
                    }
                    let x_row = &x_c[ih as usize * g.w_in..(ih as usize + 1) * g.w_in];
                    let out_row = &mut row[ho * g.w_out..(ho + 1) * g.w_out];
                    for (wo, o) in out_row.iter_mut().enumerate() {
                        let iw = wo as isize * s - p + j as isize;
                        if iw >= 0 && iw < g.w_in as isize {
                            *o = x_row[iw as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add a column matrix stored transposed as [L, K] back into one
/// sample [C,H,W]. Accumulation order per output pixel matches
/// [`col2im_acc`] (row-major over K, then L).
pub fn col2im_t_acc(cols_t: &[Real], g: &ConvGeom, x: &mut [Real]) {
    debug_assert_eq!(x.len(), g.c_in * g.h_in * g.w_in);
    debug_assert_eq!(cols_t.len(), g.k() * g.l());
    let (s, p) = (g.stride as isize, g.padding as isize);
    let k_total = g.k();
    for ci in 0..g.c_in {
        let x_c = &mut x[ci * g.h_in * g.w_in..(ci + 1) * g.h_in * g.w_in];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let r = (ci * g.kh + i) * g.kw + j;
                for ho in 0..g.h_out {
                    let ih = ho as isize * s - p + i as isize;
                    if ih < 0 || ih >= g.h_in as isize {
                        continue;
                    }
                    let x_row = &mut x_c[ih as usize * g.w_in..(ih as usize + 1) * g.w_in];
                    for wo in 0..g.w_out {
                        let iw = wo as isize * s - p + j as isize;
                        if iw >= 0 && iw < g.w_in as isize {
                            x_row[iw as usize] += cols_t[(ho * g.w_out + wo) * k_total + r];
                        }
                    }
                }
            }
        }
    }
}

/// cols_t[L, K] = dout^T[L, Cout] * w[Cout, K]: the cols gradient in
/// transposed layout, computed with long contiguous updates.
fn dcols_transposed(w: &[Real], dout: &[Real], c_out: usize, k: usize, l: usize, cols_t: &mut [Real]) {
    debug_assert_eq!(w.len(), c_out * k);
    debug_assert_eq!(dout.len(), c_out * l);
    debug_assert_eq!(cols_t.len(), l * k);
    cols_t.fill(0.0);
    for (row, out_row) in cols_t.chunks_mut(k).enumerate() {
        for co in 0..c_out {
            let d = dout[co * l + row];
            if d != 0.0 {
                axpy(out_row, &w[co * k..(co + 1) * k], d);
            }
        }
    }
}

/// Scatter-add cols [K, L] back into one sample [C,H,W] (inverse of im2col).
pub fn col2im_acc(cols: &[Real], g: &ConvGeom, x: &mut [Real]) {
    debug_assert_eq!(x.len(), g.c_in * g.h_in * g.w_in);
    debug_assert_eq!(cols.len(), g.k() * g.l());
    let (s, p) = (g.stride as isize, g.padding as isize);
    for ci in 0..g.c_in {
        let x_c = &mut x[ci * g.h_in * g.w_in..(ci + 1) * g.h_in * g.w_in];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let r = (ci * g.kh + i) * g.kw + j;
                let row = &cols[r * g.l()..(r + 1) * g.l()];
                for ho in 0..g.h_out {
                    let ih = ho as isize * s - p + i as isize;
                    if ih < 0 || ih >= g.h_in as isize {
                        continue;
                    }
                    let x_row = &mut x_c[ih as usize * g.w_in..(ih as usize + 1) * g.w_in];
                    let col_row = &row[ho * g.w_out..(ho + 1) * g.w_out];
                    for (wo, &v) in col_row.iter().enumerate() {
                        let iw = wo as isize * s - p + j as isize;
                        if iw >= 0 && iw < g.w_in as isize {
                            x_row[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution: x [N,Cin,H,W] * w [Cout,Cin,kh,kw] + b [Cout]
/// -> out [N,Cout,Hout,Wout].
pub fn conv2d_forward(
    x: &[Real],
    w: &[Real],
    b: &[Real],
    n: usize,
    c_out: usize,
    g: &ConvGeom,
    out: &mut [Real],
) {
    let (k, l) = (g.k(), g.l());
    let sample_in = g.c_in * g.h_in * g.w_in;
    let sample_out = c_out * l;
    let one = |xs: &[Real], os: &mut [Real]| {
        let mut cols = vec![0.0; k * l];
        im2col(xs, g, &mut cols);
        for (co, row) in os.chunks_mut(l).enumerate() {
            row.fill(b[co]);
        }
        matmul_acc(w, &cols, c_out, k, l, os);
    };
    if n > 1 && 2 * n * c_out * k * l >= PAR_FLOP_THRESHOLD {
        kernel_pool().install(|| {
            out.par_chunks_mut(sample_out)
                .zip(x.par_chunks(sample_in))
                .for_each(|(os, xs)| one(xs, os));
        });
    } else {
        for (os, xs) in out.chunks_mut(sample_out).zip(x.chunks(sample_in)) {
            one(xs, os);
        }
    }
}

/// Gradients of conv2d_forward. Any of the output slots may be None.
pub fn conv2d_backward(
    x: &[Real],
    w: &[Real],
    dout: &[Real],
    n: usize,
    c_out: usize,
    g: &ConvGeom,
    mut dx: Option<&mut [Real]>,
    mut dw: Option<&mut [Real]>,
    mut db: Option<&mut [Real]>,
) {
    let (k, l) = (g.k(), g.l());
    let sample_in = g.c_in * g.h_in * g.w_in;
    let sample_out = c_out * l;

    if let Some(db) = db.as_deref_mut() {
        for s in 0..n {
            let d = &dout[s * sample_out..(s + 1) * sample_out];
            for (co, row) in d.chunks(l).enumerate() {
                db[co] += row.iter().sum::<Real>();
            }
        }
    }

    if let Some(dw) = dw.as_deref_mut() {
        let cols_all = unfold_batch(x, n, g);
        weight_grad_rows(dout, &cols_all, n, c_out, k, l, dw);
    }

    if let Some(dx) = dx.as_deref_mut() {
        let one = |d: &[Real], dxs: &mut [Real]| input_grad_sample(w, d, c_out, g, dxs);
        if n > 1 && 2 * n * c_out * k * l >= PAR_FLOP_THRESHOLD {
            kernel_pool().install(|| {
                dx.par_chunks_mut(sample_in)
                    .zip(dout.par_chunks(sample_out))
                    .for_each(|(dxs, d)| one(d, dxs));
            });
        } else {
            for (dxs, d) in dx.chunks_mut(sample_in).zip(dout.chunks(sample_out)) {
                one(d, dxs);
            }
        }
    }
}

/// im2col for every sample of a batch, in parallel.
fn unfold_batch(x: &[Real], n: usize, g: &ConvGeom) -> Vec<Real> {
    let (k, l) = (g.k(), g.l());
    let sample_in = g.c_in * g.h_in * g.w_in;
    let mut cols_all = vec![0.0; n * k * l];
    if n > 1 && n * k * l >= PAR_FLOP_THRESHOLD / 4 {
        kernel_pool().install(|| {
            cols_all
                .par_chunks_mut(k * l)
                .zip(x.par_chunks(sample_in))
                .for_each(|(cols, xs)| im2col(xs, g, cols));
        });
    } else {
        for (cols, xs) in cols_all.chunks_mut(k * l).zip(x.chunks(sample_in)) {
            im2col(xs, g, cols);
        }
    }
    cols_all
}

/// dw[co, r] += sum over samples and spatial positions of
/// dout[s][co, :] . cols[s][r, :], parallel over co rows with a fixed
/// sample-major accumulation order per element.
fn weight_grad_rows(
    dout: &[Real],
    cols_all: &[Real],
    n: usize,
    c_out: usize,
    k: usize,
    l: usize,
    dw: &mut [Real],
) {
    let row = |co: usize, dw_row: &mut [Real]| {
        for s in 0..n {
            let d_row = &dout[(s * c_out + co) * l..(s * c_out + co + 1) * l];
            let cols = &cols_all[s * k * l..(s + 1) * k * l];
            for (r, out) in dw_row.iter_mut().enumerate() {
                *out += dot4(d_row, &cols[r * l..(r + 1) * l]);
            }
        }
    };
    if 2 * n * c_out * k * l >= PAR_FLOP_THRESHOLD && c_out > 1 {
        kernel_pool().install(|| {
            dw.par_chunks_mut(k)
                .enumerate()
                .for_each(|(co, dw_row)| row(co, dw_row));
        });
    } else {
        for (co, dw_row) in dw.chunks_mut(k).enumerate() {
            row(co, dw_row);
        }
    }
}

/// One sample of the convolution input gradient; picks the cols layout
/// whose inner loops run over the longer dimension.
fn input_grad_sample(w: &[Real], dout: &[Real], c_out: usize, g: &ConvGeom, dxs: &mut [Real]) {
    let (k, l) = (g.k(), g.l());
    if k >= l {
        let mut dcols_t = vec![0.0; k * l];
        dcols_transposed(w, dout, c_out, k, l, &mut dcols_t);
        col2im_t_acc(&dcols_t, g, dxs);
    } else {
        let mut dcols = vec![0.0; k * l];
        matmul_atb(w, dout, c_out, k, l, &mut dcols);
        col2im_acc(&dcols, g, dxs);
    }
}

/// Transposed convolution: u [N,Cu,Hu,Wu] * w [Cu,Cv,kh,kw] + b [Cv]
/// -> v [N,Cv,Hv,Wv], the adjoint of conv2d_forward with the same weight.
/// `g` describes the equivalent forward convolution v -> u.
pub fn conv_transpose2d_forward(
    u: &[Real],
    w: &[Real],
    b: &[Real],
    n: usize,
    c_u: usize,
    g: &ConvGeom,
    v: &mut [Real],
) {
    let (k, l) = (g.k(), g.l());
    let sample_u = c_u * l;
    let sample_v = g.c_in * g.h_in * g.w_in;
    let one = |us: &[Real], vs: &mut [Real]| {
        for (cv, plane) in vs.chunks_mut(g.h_in * g.w_in).enumerate() {
            plane.fill(b[cv]);
        }
        input_grad_sample(w, us, c_u, g, vs);
    };
    if n > 1 && 2 * n * c_u * k * l >= PAR_FLOP_THRESHOLD {
        kernel_pool().install(|| {
            v.par_chunks_mut(sample_v)
                .zip(u.par_chunks(sample_u))
                .for_each(|(vs, us)| one(us, vs));
        });
    } else {
        for (vs, us) in v.chunks_mut(sample_v).zip(u.chunks(sample_u)) {
            one(us, vs);
        }
    }
}

/// Gradients of conv_transpose2d_forward.
pub fn conv_transpose2d_backward(
    u: &[Real],
    w: &[Real],
    dv: &[Real],
    n: usize,
    c_u: usize,
    g: &ConvGeom,
    mut du: Option<&mut [Real]>,
    mut dw: Option<&mut [Real]>,
    mut db: Option<&mut [Real]>,
) {
    let (k, l) = (g.k(), g.l());
    let sample_u = c_u * l;
    let sample_v = g.c_in * g.h_in * g.w_in;

    if let Some(db) = db.as_deref_mut() {
        for s in 0..n {
            let d = &dv[s * sample_v..(s + 1) * sample_v];
            for (cv, plane) in d.chunks(g.h_in * g.w_in).enumerate() {
                db[cv] += plane.iter().sum::<Real>();
            }
        }
    }

    if du.is_some() || dw.is_some() {
        let cols_all = unfold_batch(dv, n, g);
        if let Some(du) = du.as_deref_mut() {
            let one = |cols: &[Real], dus: &mut [Real]| {
                matmul_acc(w, cols, c_u, k, l, dus);
            };
            if n > 1 && 2 * n * c_u * k * l >= PAR_FLOP_THRESHOLD {
                kernel_pool().install(|| {
                    du.par_chunks_mut(sample_u)
                        .zip(cols_all.par_chunks(k * l))
                        .for_each(|(dus, cols)| one(cols, dus));
                });
            } else {
                for (dus, cols) in du.chunks_mut(sample_u).zip(cols_all.chunks(k * l)) {
                    one(cols, dus);
                }
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            weight_grad_rows(u, &cols_all, n, c_u, k, l, dw);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn naive_matmul(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_naive() {
        let mut rng = Rng::seed_from(5);
        for &(m, k, n) in &[(2, 3, 4), (7, 5, 9), (16, 32, 24)] {
            let a: Vec<Real> = (0..m * k).map(|_| rng.normal() as Real).collect();
            let b: Vec<Real> = (0..k * n).map(|_| rng.normal() as Real).collect();
            let mut out = vec![0.0; m * n];
            matmul(&a, &b, m, k, n, &mut out);
            let expect = naive_matmul(&a, &b, m, k, n);
            for (x, y) in out.iter().zip(&expect) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn atb_and_abt_match_naive_transpositions() {
        let mut rng = Rng::seed_from(6);
        let (m, k, n) = (5, 7, 6);
        let a: Vec<Real> = (0..m * k).map(|_| rng.normal() as Real).collect();
        let b: Vec<Real> = (0..m * n).map(|_| rng.normal() as Real).collect();
        let mut out = vec![0.0; k * n];
        matmul_atb(&a, &b, m, k, n, &mut out);
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for j in 0..k {
                at[j * m + i] = a[i * k + j];
            }
        }
        let expect = naive_matmul(&at, &b, k, m, n);
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }

        let c: Vec<Real> = (0..n * k).map(|_| rng.normal() as Real).collect();
        let mut out2 = vec![0.0; m * n];
        matmul_abt_acc(&a, &c, m, k, n, &mut out2);
        let mut ct = vec![0.0; k * n];
        for i in 0..n {
            for j in 0..k {
                ct[j * n + i] = c[i * k + j];
            }
        }
        let expect2 = naive_matmul(&a, &ct, m, k, n);
        for (x, y) in out2.iter().zip(&expect2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn naive_conv(
        x: &[Real],
        w: &[Real],
        b: &[Real],
        n: usize,
        c_out: usize,
        g: &ConvGeom,
    ) -> Vec<Real> {
        let mut out = vec![0.0; n * c_out * g.l()];
        for s in 0..n {
            for co in 0..c_out {
                for ho in 0..g.h_out {
                    for wo in 0..g.w_out {
                        let mut acc = b[co];
                        for ci in 0..g.c_in {
                            for i in 0..g.kh {
                                for j in 0..g.kw {
                                    let ih = (ho * g.stride + i) as isize - g.padding as isize;
                                    let iw = (wo * g.stride + j) as isize - g.padding as isize;
                                    if ih < 0
                                        || iw < 0
                                        || ih >= g.h_in as isize
                                        || iw >= g.w_in as isize
                                    {
                                        continue;
                                    }
                                    let xv = x[((s * g.c_in + ci) * g.h_in + ih as usize)
                                        * g.w_in
                                        + iw as usize];
                                    let wv = w[((co * g.c_in + ci) * g.kh + i) * g.kw + j];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out[((s * c_out + co) * g.h_out + ho) * g.w_out + wo] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_forward_matches_naive() {
        let mut rng = Rng::seed_from(9);
        let g = ConvGeom::new(3, 9, 8, 5, 3, 2, 2);
        let (n, c_out) = (2, 4);
        let x: Vec<Real> = (0..n * 3 * 9 * 8).map(|_| rng.normal() as Real).collect();
        let w: Vec<Real> = (0..c_out * g.k()).map(|_| rng.normal() as Real).collect();
        let b: Vec<Real> = (0..c_out).map(|_| rng.normal() as Real).collect();
        let mut out = vec![0.0; n * c_out * g.l()];
        conv2d_forward(&x, &w, &b, n, c_out, &g, &mut out);
        let expect = naive_conv(&x, &w, &b, n, c_out, &g);
        for (a, e) in out.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn transpose_is_adjoint_of_forward() {
        // <conv(x), y> == <x, convT(y)> with zero biases.
        let mut rng = Rng::seed_from(11);
        let g = ConvGeom::new(2, 10, 10, 5, 5, 2, 2);
        let (n, c_out) = (2, 3);
        let x: Vec<Real> = (0..n * 2 * 10 * 10).map(|_| rng.normal() as Real).collect();
        let w: Vec<Real> = (0..c_out * g.k()).map(|_| rng.normal() as Real).collect();
        let y: Vec<Real> = (0..n * c_out * g.l()).map(|_| rng.normal() as Real).collect();
        let zero_out = vec![0.0; c_out];
        let zero_in = vec![0.0; g.c_in];

        let mut cx = vec![0.0; n * c_out * g.l()];
        conv2d_forward(&x, &w, &zero_out, n, c_out, &g, &mut cx);
        let lhs: Real = cx.iter().zip(&y).map(|(a, b)| a * b).sum();

        let mut ty = vec![0.0; n * 2 * 10 * 10];
        conv_transpose2d_forward(&y, &w, &zero_in, n, c_out, &g, &mut ty);
        let rhs: Real = ty.iter().zip(&x).map(|(a, b)| a * b).sum();

        assert!((lhs - rhs).abs() < 1e-10, "lhs {lhs} rhs {rhs}");
    }
}
