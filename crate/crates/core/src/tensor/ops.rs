//! Forward and backward kernels on rank-2 tensors.
//!
//! Every reduction runs in a fixed order, so results are bitwise reproducible.
//! `matmul(a, transpose(b))` and `matmul_nt(a, b)` accumulate in the same order
//! and therefore agree bit for bit.

use rayon::prelude::*;

use super::{is_deterministic, Element, Tensor};
use crate::error::{Error, Result};

const PAR_MIN_WORK: usize = 1 << 16;

fn rank2<F: Element>(op: &'static str, t: &Tensor<F>) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::dim(
            op,
            format!("expected rank 2, got {:?}", t.shape()),
        ));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn same_shape<F: Element>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Fill `out` (row-major, `cols` wide) row by row, in parallel when the work is
/// large and deterministic mode is off.
fn for_each_row<F: Element>(
    out: &mut [F],
    cols: usize,
    work: usize,
    f: impl Fn(usize, &mut [F]) + Sync + Send,
) {
    if cols == 0 {
        return;
    }
    if !is_deterministic() && work >= PAR_MIN_WORK && out.len() > cols {
        out.par_chunks_mut(cols)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    } else {
        out.chunks_mut(cols)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
}

/// `a[m,k] · b[k,n]`.
pub fn matmul<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = rank2("matmul", a)?;
    let (k2, n) = rank2("matmul", b)?;
    if k != k2 {
        return Err(Error::dim("matmul", format!("[{m},{k}] x [{k2},{n}]")));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let (ad, bd) = (a.data(), b.data());
    for_each_row(out.data_mut(), n, m * n * k, |i, row| {
        let arow = &ad[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &bd[p * n..(p + 1) * n];
            for (c, &bv) in row.iter_mut().zip(brow) {
                *c += av * bv;
            }
        }
    });
    out.ensure_finite("matmul")
}

/// `a[m,k] · b[n,k]ᵀ`, the shape of a linear layer `x · Wᵀ`.
pub fn matmul_nt<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = rank2("matmul_nt", a)?;
    let (n, k2) = rank2("matmul_nt", b)?;
    if k != k2 {
        return Err(Error::dim("matmul_nt", format!("[{m},{k}] x [{n},{k2}]ᵀ")));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let (ad, bd) = (a.data(), b.data());
    for_each_row(out.data_mut(), n, m * n * k, |i, row| {
        let arow = &ad[i * k..(i + 1) * k];
        for (j, c) in row.iter_mut().enumerate() {
            *c = dot(arow, &bd[j * k..(j + 1) * k]);
        }
    });
    out.ensure_finite("matmul_nt")
}

/// Dot product with eight fixed partial sums, so the loop vectorizes while
/// the reduction order stays independent of threading.
fn dot<F: Element>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = F::zero();
    for (&x, &y) in ar.iter().zip(br) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `a[k,m]ᵀ · b[k,n]`.
pub fn matmul_tn<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (k, m) = rank2("matmul_tn", a)?;
    let (k2, n) = rank2("matmul_tn", b)?;
    if k != k2 {
        return Err(Error::dim("matmul_tn", format!("[{k},{m}]ᵀ x [{k2},{n}]")));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let (ad, bd) = (a.data(), b.data());
    for_each_row(out.data_mut(), n, m * n * k, |i, row| {
        for p in 0..k {
            let av = ad[p * m + i];
            let brow = &bd[p * n..(p + 1) * n];
            for (c, &bv) in row.iter_mut().zip(brow) {
                *c += av * bv;
            }
        }
    });
    out.ensure_finite("matmul_tn")
}

pub fn transpose<F: Element>(a: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, n) = rank2("transpose", a)?;
    let mut out = Tensor::zeros(&[n, m]);
    let (src, dst) = (a.data(), out.data_mut());
    for i in 0..m {
        for j in 0..n {
            dst[j * m + i] = src[i * n + j];
        }
    }
    Ok(out)
}

fn zip_map<F: Element>(
    op: &'static str,
    a: &Tensor<F>,
    b: &Tensor<F>,
    f: impl Fn(F, F) -> F,
) -> Result<Tensor<F>> {
    same_shape(op, a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape(), data)?.ensure_finite(op)
}

pub fn add<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    zip_map("add", a, b, |x, y| x + y)
}

pub fn sub<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    zip_map("sub", a, b, |x, y| x - y)
}

pub fn mul<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    zip_map("mul", a, b, |x, y| x * y)
}

pub fn scale<F: Element>(a: &Tensor<F>, s: F) -> Result<Tensor<F>> {
    let data = a.data().iter().map(|&x| x * s).collect();
    Tensor::from_vec(a.shape(), data)?.ensure_finite("scale")
}

/// `acc += s · x` in place.
pub fn axpy<F: Element>(acc: &mut Tensor<F>, s: F, x: &Tensor<F>) -> Result<()> {
    same_shape("axpy", acc, x)?;
    for (a, &v) in acc.data_mut().iter_mut().zip(x.data()) {
        *a += s * v;
    }
    if acc.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op: "axpy" })
    }
}

/// Columns `start..start+len` of a rank-2 tensor.
pub fn slice_cols<F: Element>(a: &Tensor<F>, start: usize, len: usize) -> Result<Tensor<F>> {
    let (m, n) = rank2("slice_cols", a)?;
    if start + len > n {
        return Err(Error::dim(
            "slice_cols",
            format!("{start}..{} of {n} columns", start + len),
        ));
    }
    let mut data = Vec::with_capacity(m * len);
    for i in 0..m {
        data.extend_from_slice(&a.data()[i * n + start..i * n + start + len]);
    }
    Tensor::from_vec(&[m, len], data)
}

/// Horizontal concatenation; inverse of [`slice_cols`].
pub fn concat_cols<F: Element>(parts: &[&Tensor<F>]) -> Result<Tensor<F>> {
    let m = match parts.first() {
        Some(p) => rank2("concat_cols", p)?.0,
        None => return Err(Error::dim("concat_cols", "no inputs")),
    };
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (rows, cols) = rank2("concat_cols", p)?;
        if rows != m {
            return Err(Error::dim(
                "concat_cols",
                format!("row count {rows} vs {m}"),
            ));
        }
        widths.push(cols);
    }
    let n: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(m * n);
    for i in 0..m {
        for (p, &w) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
        }
    }
    Tensor::from_vec(&[m, n], data)
}

fn sigmoid<F: Element>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// `x · sigmoid(x)`.
pub fn silu<F: Element>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let data = x.data().iter().map(|&v| v * sigmoid(v)).collect();
    Tensor::from_vec(x.shape(), data)?.ensure_finite("silu")
}

pub fn silu_backward<F: Element>(x: &Tensor<F>, dy: &Tensor<F>) -> Result<Tensor<F>> {
    zip_map("silu_backward", x, dy, |v, g| {
        let s = sigmoid(v);
        g * s * (F::one() + v * (F::one() - s))
    })
}

/// Row-wise RMS normalisation with a per-column gain.
pub fn rmsnorm<F: Element>(x: &Tensor<F>, gain: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
    let (m, n) = rank2("rmsnorm", x)?;
    if gain.len() != n {
        return Err(Error::dim(
            "rmsnorm",
            format!("gain {} vs width {n}", gain.len()),
        ));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let nf = F::from_f64(n as f64);
    for (orow, xrow) in out.data_mut().chunks_mut(n).zip(x.data().chunks(n)) {
        let ms = xrow.iter().map(|&v| v * v).sum::<F>() / nf;
        let rinv = F::one() / (ms + eps).sqrt();
        for ((o, &v), &g) in orow.iter_mut().zip(xrow).zip(gain.data()) {
            *o = v * rinv * g;
        }
    }
    out.ensure_finite("rmsnorm")
}

/// Returns `(dx, dgain)`.
pub fn rmsnorm_backward<F: Element>(
    x: &Tensor<F>,
    gain: &Tensor<F>,
    eps: F,
    dy: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let (m, n) = rank2("rmsnorm_backward", x)?;
    same_shape("rmsnorm_backward", x, dy)?;
    if gain.len() != n {
        return Err(Error::dim("rmsnorm_backward", "gain width"));
    }
    let mut dx = Tensor::zeros(&[m, n]);
    let mut dgain = Tensor::zeros(gain.shape());
    let nf = F::from_f64(n as f64);
    for i in 0..m {
        let xrow = x.row(i);
        let dyrow = dy.row(i);
        let ms = xrow.iter().map(|&v| v * v).sum::<F>() / nf;
        let rinv = F::one() / (ms + eps).sqrt();
        let mut dot = F::zero();
        for j in 0..n {
            dot += gain.data()[j] * dyrow[j] * xrow[j];
        }
        let coef = rinv * rinv * rinv * dot / nf;
        let dxrow = &mut dx.data_mut()[i * n..(i + 1) * n];
        for j in 0..n {
            dxrow[j] = gain.data()[j] * dyrow[j] * rinv - xrow[j] * coef;
        }
        for (dg, (&g, &v)) in dgain.data_mut().iter_mut().zip(dyrow.iter().zip(xrow)) {
            *dg += g * v * rinv;
        }
    }
    Ok((dx.ensure_finite("rmsnorm_backward")?, dgain))
}

fn rope_rotate<F: Element>(x: &Tensor<F>, base: f64, sign: f64) -> Result<Tensor<F>> {
    let (t, d) = rank2("rope", x)?;
    if d % 2 != 0 {
        return Err(Error::dim("rope", format!("odd head width {d}")));
    }
    let mut out = Tensor::zeros(&[t, d]);
    let half = d / 2;
    for pos in 0..t {
        let src = x.row(pos);
        let dst = &mut out.data_mut()[pos * d..(pos + 1) * d];
        for j in 0..half {
            let freq = base.powf(-2.0 * j as f64 / d as f64);
            let angle = pos as f64 * freq;
            let (s, c) = (F::from_f64(sign * angle.sin()), F::from_f64(angle.cos()));
            let (x0, x1) = (src[2 * j], src[2 * j + 1]);
            dst[2 * j] = x0 * c - x1 * s;
            dst[2 * j + 1] = x0 * s + x1 * c;
        }
    }
    out.ensure_finite("rope")
}

/// Rotary position embedding over rows (positions `0..rows`), rotating
/// adjacent column pairs.
pub fn rope<F: Element>(x: &Tensor<F>, base: f64) -> Result<Tensor<F>> {
    rope_rotate(x, base, 1.0)
}

/// The rotation is orthogonal, so the gradient is the inverse rotation.
pub fn rope_backward<F: Element>(dy: &Tensor<F>, base: f64) -> Result<Tensor<F>> {
    rope_rotate(dy, base, -1.0)
}

/// Row softmax with a causal mask: entry `(i, j)` is zero for `j > i`.
pub fn causal_softmax<F: Element>(s: &Tensor<F>) -> Result<Tensor<F>> {
    let (t, t2) = rank2("causal_softmax", s)?;
    if t != t2 {
        return Err(Error::dim(
            "causal_softmax",
            format!("not square: [{t},{t2}]"),
        ));
    }
    let mut out = Tensor::zeros(&[t, t]);
    for i in 0..t {
        let src = &s.row(i)[..=i];
        let max = src.iter().copied().fold(F::neg_infinity(), F::max);
        let dst = &mut out.data_mut()[i * t..i * t + i + 1];
        let mut sum = F::zero();
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (v - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d = *d / sum;
        }
    }
    out.ensure_finite("causal_softmax")
}

/// Gradient of the scores given the softmax output `p` and `dp`.
pub fn causal_softmax_backward<F: Element>(p: &Tensor<F>, dp: &Tensor<F>) -> Result<Tensor<F>> {
    same_shape("causal_softmax_backward", p, dp)?;
    let (t, _) = rank2("causal_softmax_backward", p)?;
    let mut ds = Tensor::zeros(&[t, t]);
    for i in 0..t {
        let prow = &p.row(i)[..=i];
        let dprow = &dp.row(i)[..=i];
        let mut dot = F::zero();
        for (&a, &b) in prow.iter().zip(dprow) {
            dot += a * b;
        }
        let dst = &mut ds.data_mut()[i * t..i * t + i + 1];
        for ((d, &a), &b) in dst.iter_mut().zip(prow).zip(dprow) {
            *d = a * (b - dot);
        }
    }
    ds.ensure_finite("causal_softmax_backward")
}

fn check_targets(targets: &[usize], t: usize, v: usize) -> Result<()> {
    if targets.len() != t {
        return Err(Error::dim(
            "softmax_xent",
            format!("{} targets for {t} rows", targets.len()),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&c| c >= v) {
        return Err(Error::IndexOutOfRange {
            op: "softmax_xent",
            index: bad,
            bound: v,
        });
    }
    Ok(())
}

fn row_logsumexp<F: Element>(row: &[F]) -> F {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let sum: F = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Mean cross-entropy without the gradient.
pub fn xent_loss<F: Element>(logits: &Tensor<F>, targets: &[usize]) -> Result<F> {
    let (t, v) = rank2("softmax_xent", logits)?;
    check_targets(targets, t, v)?;
    let mut total = 0.0f64;
    for (i, &c) in targets.iter().enumerate() {
        let row = logits.row(i);
        total += (row_logsumexp(row) - row[c]).as_f64();
    }
    let loss = F::from_f64(total / t as f64);
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite { op: "softmax_xent" })
    }
}

/// Mean cross-entropy and its gradient `(softmax − onehot) / T`.
pub fn softmax_xent<F: Element>(logits: &Tensor<F>, targets: &[usize]) -> Result<(F, Tensor<F>)> {
    softmax_xent_in_place(logits.clone(), targets)
}

/// [`softmax_xent`] that overwrites `logits` with the gradient.
pub fn softmax_xent_in_place<F: Element>(
    mut logits: Tensor<F>,
    targets: &[usize],
) -> Result<(F, Tensor<F>)> {
    let (t, v) = rank2("softmax_xent", &logits)?;
    check_targets(targets, t, v)?;
    let inv_t = F::from_f64(1.0 / t as f64);
    let mut total = 0.0f64;
    for (i, &c) in targets.iter().enumerate() {
        let row = &mut logits.data_mut()[i * v..(i + 1) * v];
        let lse = row_logsumexp(row);
        total += (lse - row[c]).as_f64();
        for d in row.iter_mut() {
            *d = (*d - lse).exp() * inv_t;
        }
        row[c] = row[c] - inv_t;
    }
    let loss = F::from_f64(total / t as f64);
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "softmax_xent" });
    }
    Ok((loss, logits.ensure_finite("softmax_xent")?))
}

/// Gather rows of `table` for each id.
pub fn embedding<F: Element>(table: &Tensor<F>, ids: &[usize]) -> Result<Tensor<F>> {
    let (v, d) = rank2("embedding", table)?;
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(Error::IndexOutOfRange {
                op: "embedding",
                index: id,
                bound: v,
            });
        }
        data.extend_from_slice(table.row(id));
    }
    Tensor::from_vec(&[ids.len(), d], data)
}

/// Index of the largest entry in each row.
pub fn argmax_rows<F: Element>(a: &Tensor<F>) -> Vec<usize> {
    (0..a.rows())
        .map(|i| {
            let row = a.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{relative_error, Rng};

    fn t32(shape: &[usize], v: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = Rng::new(seed, 0);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.normal() as f64).collect()).unwrap()
    }

    /// Central differences of `Σ w ⊙ f(x)` with respect to `x`.
    fn fd_grad(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        f: impl Fn(&Tensor<f64>) -> Tensor<f64>,
    ) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        for i in 0..x.len() {
            let h = 1e-3 * x.data()[i].abs().max(1.0);
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let lp: f64 = f(&xp).data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
            let lm: f64 = f(&xm).data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
            g[i] = (lp - lm) / (2.0 * h);
        }
        g
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let eye = t32(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t32(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&eye, &m).unwrap(), m);
        let a = t32(&[1, 2], &[1.0, 2.0]);
        let b = t32(&[2, 1], &[3.0, 4.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        let a = random(&[8, 8], 1).cast::<f32>();
        let b = random(&[8, 8], 2).cast::<f32>();
        let c = matmul(&a, &b).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let mut acc = 0.0f32;
                for k in 0..8 {
                    acc += a.at(i, k) * b.at(k, j);
                }
                assert_eq!(c.at(i, j), acc);
            }
        }
    }

    #[test]
    fn matmul_variants_agree_bitwise() {
        let a = random(&[5, 7], 3).cast::<f32>();
        let b = random(&[6, 7], 4).cast::<f32>();
        let nt = matmul_nt(&a, &b).unwrap();
        let plain = matmul(&a, &transpose(&b).unwrap()).unwrap();
        assert!(nt.bitwise_eq(&plain));
        let tn = matmul_tn(&transpose(&a).unwrap(), &transpose(&b).unwrap()).unwrap();
        assert!(tn.bitwise_eq(&plain));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn parallel_rows_match_sequential() {
        let a = random(&[64, 96], 5).cast::<f32>();
        let b = random(&[96, 80], 6).cast::<f32>();
        // Above the parallel threshold; the result must not depend on threading.
        let par = matmul(&a, &b).unwrap();
        let mut seq = Tensor::<f32>::zeros(&[64, 80]);
        for i in 0..64 {
            for p in 0..96 {
                for j in 0..80 {
                    seq.data_mut()[i * 80 + j] += a.at(i, p) * b.at(p, j);
                }
            }
        }
        assert!(par.bitwise_eq(&seq));
    }

    #[test]
    fn xent_uniform_is_ln_v() {
        let logits = Tensor::<f32>::full(&[3, 4], 0.5);
        let (loss, _) = softmax_xent(&logits, &[0, 1, 3]).unwrap();
        assert!((loss - 4f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn xent_saturated_is_stable() {
        let logits = t32(&[1, 2], &[0.0, 1000.0]);
        let (loss, d) = softmax_xent(&logits, &[1]).unwrap();
        assert!(loss.abs() < 1e-6);
        assert!(d.all_finite());
    }

    #[test]
    fn xent_target_out_of_range() {
        let logits = Tensor::<f32>::zeros(&[1, 4]);
        assert!(matches!(
            softmax_xent(&logits, &[4]),
            Err(Error::IndexOutOfRange {
                index: 4,
                bound: 4,
                ..
            })
        ));
    }

    #[test]
    fn xent_gradient_matches_finite_differences() {
        let logits = random(&[4, 8], 11);
        let targets = [1usize, 7, 0, 3];
        let (_, d) = softmax_xent(&logits, &targets).unwrap();
        let mut fd = vec![0.0; logits.len()];
        for i in 0..logits.len() {
            let h = 1e-3 * logits.data()[i].abs().max(1.0);
            let mut p = logits.clone();
            p.data_mut()[i] += h;
            let mut m = logits.clone();
            m.data_mut()[i] -= h;
            fd[i] =
                (xent_loss(&p, &targets).unwrap() - xent_loss(&m, &targets).unwrap()) / (2.0 * h);
        }
        assert!(relative_error(d.data(), &fd) <= 1e-3);
    }

    #[test]
    fn silu_zero_and_gradient() {
        assert_eq!(silu(&t32(&[1], &[0.0])).unwrap().data(), &[0.0]);
        let x = random(&[4, 4], 21);
        let w = random(&[4, 4], 22);
        let analytic = silu_backward(&x, &w).unwrap();
        let fd = fd_grad(&x, &w, |x| silu(x).unwrap());
        assert!(relative_error(analytic.data(), &fd) <= 1e-3);
    }

    #[test]
    fn rmsnorm_constant_vector_is_sign() {
        let gain = Tensor::<f32>::full(&[4], 1.0);
        let x = t32(&[2, 4], &[3.0, 3.0, 3.0, 3.0, -0.5, -0.5, -0.5, -0.5]);
        let y = rmsnorm(&x, &gain, 1e-6).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            let expected = if i < 4 { 1.0 } else { -1.0 };
            assert!((v - expected).abs() < 1e-5, "{v}");
        }
    }

    #[test]
    fn rmsnorm_gradients_match_finite_differences() {
        let x = random(&[4, 4], 31);
        let gain = random(&[4], 32);
        let w = random(&[4, 4], 33);
        let (dx, dgain) = rmsnorm_backward(&x, &gain, 1e-5, &w).unwrap();
        let fd_x = fd_grad(&x, &w, |x| rmsnorm(x, &gain, 1e-5).unwrap());
        assert!(relative_error(dx.data(), &fd_x) <= 1e-3);
        let fd_g = fd_grad(&gain, &w, |g| rmsnorm(&x, g, 1e-5).unwrap());
        assert!(relative_error(dgain.data(), &fd_g) <= 1e-3);
    }

    #[test]
    fn rope_gradient_matches_finite_differences() {
        let x = random(&[4, 4], 41);
        let w = random(&[4, 4], 42);
        let analytic = rope_backward(&w, 10_000.0).unwrap();
        let fd = fd_grad(&x, &w, |x| rope(x, 10_000.0).unwrap());
        assert!(relative_error(analytic.data(), &fd) <= 1e-3);
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let x = random(&[1, 6], 43);
        assert!(rope(&x, 10_000.0).unwrap().bitwise_eq(&x));
    }

    #[test]
    fn causal_softmax_gradient_matches_finite_differences() {
        let s = random(&[4, 4], 51);
        let w = random(&[4, 4], 52);
        let p = causal_softmax(&s).unwrap();
        let analytic = causal_softmax_backward(&p, &w).unwrap();
        let fd = fd_grad(&s, &w, |s| causal_softmax(s).unwrap());
        assert!(relative_error(analytic.data(), &fd) <= 1e-3);
        // Masked entries are exactly zero.
        assert_eq!(p.at(0, 1), 0.0);
        assert!((p.row(2).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let a = random(&[4, 4], 61);
        let b = random(&[4, 4], 62);
        let w = random(&[4, 4], 63);
        // d/da Σ w ⊙ (a bᵀ) = w b ; d/db = wᵀ a
        let da = matmul(&w, &b).unwrap();
        let db = matmul_tn(&w, &a).unwrap();
        let fd_a = fd_grad(&a, &w, |a| matmul_nt(a, &b).unwrap());
        let fd_b = fd_grad(&b, &w, |b| matmul_nt(&a, b).unwrap());
        assert!(relative_error(da.data(), &fd_a) <= 1e-3);
        assert!(relative_error(db.data(), &fd_b) <= 1e-3);
    }

    #[test]
    fn elementwise_and_slicing() {
        let a = t32(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t32(&[2, 3], &[1.0; 6]);
        assert_eq!(add(&a, &b).unwrap().data(), &[2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        assert_eq!(mul(&a, &a).unwrap().data()[5], 36.0);
        assert_eq!(sub(&a, &b).unwrap().data()[0], 0.0);
        let left = slice_cols(&a, 0, 1).unwrap();
        let right = slice_cols(&a, 1, 2).unwrap();
        assert_eq!(right.data(), &[2.0, 3.0, 5.0, 6.0]);
        assert_eq!(concat_cols(&[&left, &right]).unwrap(), a);
        assert_eq!(transpose(&a).unwrap().shape(), &[3, 2]);
        assert!(add(&a, &transpose(&a).unwrap()).is_err());
    }

    #[test]
    fn embedding_gathers_rows() {
        let table = t32(&[3, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let out = embedding(&table, &[2, 0]).unwrap();
        assert_eq!(out.data(), &[4.0, 5.0, 0.0, 1.0]);
        assert!(embedding(&table, &[3]).is_err());
    }

    #[test]
    fn nan_is_surfaced() {
        let a = t32(&[1, 1], &[f32::INFINITY]);
        let b = t32(&[1, 1], &[0.0]);
        assert!(matches!(matmul(&a, &b), Err(Error::NonFinite { .. })));
    }
}
