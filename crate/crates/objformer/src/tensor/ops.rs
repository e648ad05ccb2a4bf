//! Forward operations and their backward rules.
//!
//! Shape conventions: feature maps are `[C, H, W]` (a leading batch axis is
//! accepted where noted), token matrices are `[N, C]`, scalars are `[1]`.
//! All kernels are plain sequential loops so results are bit-reproducible.

use std::sync::Arc;

use super::tape::{Tape, TensorId};
use super::Element;
use crate::error::{Error, Result};

/// Statistic used to fuse the pixels of one region into a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolFusion {
    Mean,
    Max,
    Min,
    MeanPlusMax,
}

impl PoolFusion {
    pub const ALL: [PoolFusion; 4] =
        [PoolFusion::Mean, PoolFusion::Max, PoolFusion::Min, PoolFusion::MeanPlusMax];

    pub fn name(self) -> &'static str {
        match self {
            PoolFusion::Mean => "mean",
            PoolFusion::Max => "max",
            PoolFusion::Min => "min",
            PoolFusion::MeanPlusMax => "mean+max",
        }
    }
}

impl std::str::FromStr for PoolFusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(PoolFusion::Mean),
            "max" => Ok(PoolFusion::Max),
            "min" => Ok(PoolFusion::Min),
            "mean+max" | "mean_plus_max" => Ok(PoolFusion::MeanPlusMax),
            other => Err(Error::Config(format!("unknown pooling statistic '{other}'"))),
        }
    }
}

/// Mean negative log-likelihood together with the number of pixels that
/// contributed. A count of zero signals that every pixel was ignored and the
/// loss was pinned to 0.
#[derive(Debug, Clone, Copy)]
pub struct MaskedLoss {
    pub loss: TensorId,
    pub pixels: usize,
}

// ── raw matmul kernels ─────────────────────────────────────────────────────

pub(crate) fn matmul_raw<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == E::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
    out
}

/// C[i,j] = sum_t A[i,t] * B[j,t]  (B used transposed).
fn matmul_nt<E: Element>(a: &[E], b: &[E], m: usize, t: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * t..(i + 1) * t];
        for j in 0..n {
            let brow = &b[j * t..(j + 1) * t];
            let mut s = E::zero();
            for p in 0..t {
                s = s + arow[p] * brow[p];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// C[i,j] = sum_t A[t,i] * B[t,j]  (A used transposed).
fn matmul_tn<E: Element>(a: &[E], b: &[E], m: usize, t: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    for p in 0..t {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == E::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
    out
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(op, format!("axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

/// Interpret a feature tensor as (batch, channels, height, width); a 3-D
/// tensor is treated as batch 1.
fn as_bchw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match shape.len() {
        3 => Ok((1, shape[0], shape[1], shape[2])),
        4 => Ok((shape[0], shape[1], shape[2], shape[3])),
        _ => Err(Error::shape(op, format!("expected [C,H,W] or [B,C,H,W], got {shape:?}"))),
    }
}

impl<E: Element> Tape<E> {
    // ── elementwise ────────────────────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_pointwise("add", a, b, |x, y| x + y, |_, _| (E::one(), E::one()))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_pointwise("sub", a, b, |x, y| x - y, |_, _| (E::one(), -E::one()))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_pointwise("mul", a, b, |x, y| x * y, |x, y| (y, x))
    }

    fn binary_pointwise(
        &mut self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(E, E) -> E,
        df: impl Fn(E, E) -> (E, E) + 'static,
    ) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("operand shapes differ: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<E> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let n = data.len();
        Ok(self.record(
            data,
            shape,
            &[a, b],
            Box::new(move |g, tape, grads| {
                let (xa, xb) = (tape.data(a), tape.data(b));
                grads.accum(a, n, |buf| {
                    for i in 0..n {
                        buf[i] = buf[i] + g[i] * df(xa[i], xb[i]).0;
                    }
                });
                grads.accum(b, n, |buf| {
                    for i in 0..n {
                        buf[i] = buf[i] + g[i] * df(xa[i], xb[i]).1;
                    }
                });
            }),
        ))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let cv = E::from_f64(c);
        let data: Vec<E> = self.data(x).iter().map(|&v| v * cv).collect();
        let shape = self.shape(x).to_vec();
        let n = data.len();
        Ok(self.record(
            data,
            shape,
            &[x],
            Box::new(move |g, _, grads| {
                grads.accum(x, n, |buf| {
                    for i in 0..n {
                        buf[i] = buf[i] + g[i] * cv;
                    }
                });
            }),
        ))
    }

    /// GELU with the tanh approximation (fixed so checkpoints reproduce
    /// across builds).
    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId> {
        let c = E::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let a3 = E::from_f64(0.044715);
        let half = E::from_f64(0.5);
        let data: Vec<E> = self
            .data(x)
            .iter()
            .map(|&v| half * v * (E::one() + (c * (v + a3 * v * v * v)).tanh()))
            .collect();
        let shape = self.shape(x).to_vec();
        let n = data.len();
        Ok(self.record(
            data,
            shape,
            &[x],
            Box::new(move |g, tape, grads| {
                let xs = tape.data(x);
                grads.accum(x, n, |buf| {
                    let three = E::from_f64(3.0);
                    for i in 0..n {
                        let v = xs[i];
                        let u = c * (v + a3 * v * v * v);
                        let t = u.tanh();
                        let sech2 = E::one() - t * t;
                        let du = c * (E::one() + three * a3 * v * v);
                        let d = half * (E::one() + t) + half * v * sech2 * du;
                        buf[i] = buf[i] + g[i] * d;
                    }
                });
            }),
        ))
    }

    // ── structure ──────────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: TensorId, new_shape: &[usize]) -> Result<TensorId> {
        let numel: usize = new_shape.iter().product();
        if numel != self.numel(x) {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {new_shape:?}", self.shape(x)),
            ));
        }
        let data = self.data(x).to_vec();
        let n = data.len();
        Ok(self.record(
            data,
            new_shape.to_vec(),
            &[x],
            Box::new(move |g, _, grads| {
                grads.accum(x, n, |buf| {
                    for i in 0..n {
                        buf[i] = buf[i] + g[i];
                    }
                });
            }),
        ))
    }

    pub fn transpose2(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x);
        if shape.len() != 2 {
            return Err(Error::shape("transpose2", format!("expected 2-D, got {shape:?}")));
        }
        let (r, c) = (shape[0], shape[1]);
        let xd = self.data(x);
        let mut data = vec![E::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xd[i * c + j];
            }
        }
        Ok(self.record(
            data,
            vec![c, r],
            &[x],
            Box::new(move |g, _, grads| {
                grads.accum(x, r * c, |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] = buf[i * c + j] + g[j * r + i];
                        }
                    }
                });
            }),
        ))
    }

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat of zero tensors".into()));
        }
        let base = self.shape(parts[0]).to_vec();
        check_axis("concat", &base, axis)?;
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter().enumerate().any(|(d, &v)| d != axis && v != base[d])
            {
                return Err(Error::shape(
                    "concat",
                    format!("incompatible shapes {:?} vs {:?} on axis {axis}", base, s),
                ));
            }
            axis_total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut data = vec![E::zero(); outer * axis_total * inner];
        let mut offsets = Vec::with_capacity(parts.len());
        let mut off = 0usize;
        for &p in parts {
            let plen = self.shape(p)[axis];
            offsets.push((p, off, plen));
            let pd = self.data(p);
            for o in 0..outer {
                let src = &pd[o * plen * inner..(o + 1) * plen * inner];
                let dst_base = o * axis_total * inner + off * inner;
                data[dst_base..dst_base + plen * inner].copy_from_slice(src);
            }
            off += plen;
        }
        let ids: Vec<TensorId> = parts.to_vec();
        Ok(self.record(
            data,
            out_shape,
            &ids,
            Box::new(move |g, tape, grads| {
                for &(p, off, plen) in &offsets {
                    let numel = tape.numel(p);
                    grads.accum(p, numel, |buf| {
                        for o in 0..outer {
                            let src_base = o * axis_total * inner + off * inner;
                            let dst = &mut buf[o * plen * inner..(o + 1) * plen * inner];
                            for (d, s) in dst.iter_mut().zip(&g[src_base..src_base + plen * inner])
                            {
                                *d = *d + *s;
                            }
                        }
                    });
                }
            }),
        ))
    }

    pub fn slice_axis(
        &mut self,
        x: TensorId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        check_axis("slice_axis", &shape, axis)?;
        if start + len > shape[axis] {
            return Err(Error::shape(
                "slice_axis",
                format!("range {start}..{} exceeds axis extent {}", start + len, shape[axis]),
            ));
        }
        let (outer, alen, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let mut data = vec![E::zero(); outer * len * inner];
        for o in 0..outer {
            let src_base = o * alen * inner + start * inner;
            data[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&xd[src_base..src_base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let numel_x = xd.len();
        Ok(self.record(
            data,
            out_shape,
            &[x],
            Box::new(move |g, _, grads| {
                grads.accum(x, numel_x, |buf| {
                    for o in 0..outer {
                        let dst_base = o * alen * inner + start * inner;
                        for i in 0..len * inner {
                            buf[dst_base + i] = buf[dst_base + i] + g[o * len * inner + i];
                        }
                    }
                });
            }),
        ))
    }

    /// Broadcast-add a 1-D bias along `axis`.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        check_axis("add_bias", &shape, axis)?;
        let bshape = self.shape(bias);
        if bshape.len() != 1 || bshape[0] != shape[axis] {
            return Err(Error::shape(
                "add_bias",
                format!("bias shape {bshape:?} does not match axis extent {}", shape[axis]),
            ));
        }
        let (outer, alen, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let bd = self.data(bias);
        let mut data = xd.to_vec();
        for o in 0..outer {
            for a in 0..alen {
                let base = (o * alen + a) * inner;
                let bv = bd[a];
                for i in 0..inner {
                    data[base + i] = data[base + i] + bv;
                }
            }
        }
        let numel = data.len();
        Ok(self.record(
            data,
            shape,
            &[x, bias],
            Box::new(move |g, _, grads| {
                grads.accum(x, numel, |buf| {
                    for i in 0..numel {
                        buf[i] = buf[i] + g[i];
                    }
                });
                grads.accum(bias, alen, |buf| {
                    for o in 0..outer {
                        for a in 0..alen {
                            let base = (o * alen + a) * inner;
                            let mut s = E::zero();
                            for i in 0..inner {
                                s = s + g[base + i];
                            }
                            buf[a] = buf[a] + s;
                        }
                    }
                });
            }),
        ))
    }

    // ── linear algebra ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("incompatible operands {sa:?} x {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.data(a), self.data(b), m, k, n);
        Ok(self.record(
            data,
            vec![m, n],
            &[a, b],
            Box::new(move |g, tape, grads| {
                // dA = G . B^T, dB = A^T . G
                let da = matmul_nt(g, tape.data(b), m, n, k);
                let db = matmul_tn(tape.data(a), g, k, m, n);
                grads.accum(a, m * k, |buf| {
                    for i in 0..m * k {
                        buf[i] = buf[i] + da[i];
                    }
                });
                grads.accum(b, k * n, |buf| {
                    for i in 0..k * n {
                        buf[i] = buf[i] + db[i];
                    }
                });
            }),
        ))
    }

    /// `x @ w (+ bias)` for token matrices `[N, C_in] x [C_in, C_out]`.
    pub fn linear(&mut self, x: TensorId, w: TensorId, bias: Option<TensorId>) -> Result<TensorId> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add_bias(y, b, 1),
            None => Ok(y),
        }
    }

    // ── convolutions ───────────────────────────────────────────────────────

    /// Cross-correlation with square kernel, `k` in {1, 3, 7}. Input is
    /// `[C,H,W]` or `[B,C,H,W]`; weights are `[O,C,k,k]`.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let x_shape = self.shape(x).to_vec();
        let (bsz, c, h, wdt) = as_bchw("conv2d", &x_shape)?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != c || ws[2] != ws[3] {
            return Err(Error::shape(
                "conv2d",
                format!("weights {ws:?} incompatible with input channels {c}"),
            ));
        }
        let (oc, k) = (ws[0], ws[2]);
        if !matches!(k, 1 | 3 | 7) {
            return Err(Error::Config(format!("conv2d kernel size {k} unsupported")));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        if (h + 2 * pad) < k || (wdt + 2 * pad) < k {
            return Err(Error::Config(format!(
                "conv2d output empty: input {h}x{wdt} too small for kernel {k} with pad {pad}"
            )));
        }
        // floor convention: trailing rows/columns that do not fill a full
        // stride step are dropped, as in the overlap patch embedding
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wdt + 2 * pad - k) / stride + 1;
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs != [oc] {
                return Err(Error::shape("conv2d", format!("bias shape {bs:?}, expected [{oc}]")));
            }
        }

        let data = conv2d_fwd(
            self.data(x),
            self.data(w),
            bias.map(|b| self.data(b).to_vec()),
            bsz,
            c,
            h,
            wdt,
            oc,
            k,
            stride,
            pad,
        );
        let mut out_shape = if x_shape.len() == 3 { vec![oc, ho, wo] } else { vec![bsz, oc, ho, wo] };
        out_shape.shrink_to_fit();
        let mut inputs = vec![x, w];
        if let Some(b) = bias {
            inputs.push(b);
        }
        Ok(self.record(
            data,
            out_shape,
            &inputs,
            Box::new(move |g, tape, grads| {
                let (dx, dw, db) =
                    conv2d_bwd(g, tape.data(x), tape.data(w), bsz, c, h, wdt, oc, k, stride, pad);
                grads.accum(x, dx.len(), |buf| {
                    for i in 0..dx.len() {
                        buf[i] = buf[i] + dx[i];
                    }
                });
                grads.accum(w, dw.len(), |buf| {
                    for i in 0..dw.len() {
                        buf[i] = buf[i] + dw[i];
                    }
                });
                if let Some(b) = bias {
                    grads.accum(b, oc, |buf| {
                        for i in 0..oc {
                            buf[i] = buf[i] + db[i];
                        }
                    });
                }
            }),
        ))
    }

    /// Depthwise 3x3 convolution, stride 1, pad 1. Weights are `[C,3,3]`.
    pub fn depthwise_conv3x3(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
    ) -> Result<TensorId> {
        let x_shape = self.shape(x).to_vec();
        let (bsz, c, h, wdt) = as_bchw("depthwise_conv3x3", &x_shape)?;
        let ws = self.shape(w);
        if ws != [c, 3, 3] {
            return Err(Error::shape(
                "depthwise_conv3x3",
                format!("weights {ws:?}, expected [{c},3,3]"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c] {
                return Err(Error::shape("depthwise_conv3x3", "bias must be [C]".to_string()));
            }
        }
        let xd = self.data(x);
        let wd = self.data(w);
        let bd = bias.map(|b| self.data(b).to_vec());
        let hw = h * wdt;
        let mut data = vec![E::zero(); bsz * c * hw];
        for b in 0..bsz {
            for ch in 0..c {
                let xp = &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                let wp = &wd[ch * 9..(ch + 1) * 9];
                let bias_v = bd.as_ref().map_or(E::zero(), |v| v[ch]);
                let op = &mut data[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                for y in 0..h {
                    for xcol in 0..wdt {
                        let mut s = bias_v;
                        for ky in 0..3 {
                            let iy = y + ky;
                            if iy < 1 || iy > h {
                                continue;
                            }
                            let iy = iy - 1;
                            for kx in 0..3 {
                                let ix = xcol + kx;
                                if ix < 1 || ix > wdt {
                                    continue;
                                }
                                s = s + xp[iy * wdt + (ix - 1)] * wp[ky * 3 + kx];
                            }
                        }
                        op[y * wdt + xcol] = s;
                    }
                }
            }
        }
        let mut inputs = vec![x, w];
        if let Some(b) = bias {
            inputs.push(b);
        }
        Ok(self.record(
            data,
            x_shape,
            &inputs,
            Box::new(move |g, tape, grads| {
                let xd = tape.data(x);
                let wd = tape.data(w);
                let mut dx = vec![E::zero(); bsz * c * hw];
                let mut dw = vec![E::zero(); c * 9];
                let mut db = vec![E::zero(); c];
                for b in 0..bsz {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        let xp = &xd[base..base + hw];
                        let wp = &wd[ch * 9..(ch + 1) * 9];
                        for y in 0..h {
                            for xcol in 0..wdt {
                                let gv = g[base + y * wdt + xcol];
                                if gv == E::zero() {
                                    continue;
                                }
                                db[ch] = db[ch] + gv;
                                for ky in 0..3 {
                                    let iy = y + ky;
                                    if iy < 1 || iy > h {
                                        continue;
                                    }
                                    let iy = iy - 1;
                                    for kx in 0..3 {
                                        let ix = xcol + kx;
                                        if ix < 1 || ix > wdt {
                                            continue;
                                        }
                                        let ix = ix - 1;
                                        dx[base + iy * wdt + ix] =
                                            dx[base + iy * wdt + ix] + gv * wp[ky * 3 + kx];
                                        dw[ch * 9 + ky * 3 + kx] =
                                            dw[ch * 9 + ky * 3 + kx] + gv * xp[iy * wdt + ix];
                                    }
                                }
                            }
                        }
                    }
                }
                grads.accum(x, dx.len(), |buf| {
                    for i in 0..dx.len() {
                        buf[i] = buf[i] + dx[i];
                    }
                });
                grads.accum(w, dw.len(), |buf| {
                    for i in 0..dw.len() {
                        buf[i] = buf[i] + dw[i];
                    }
                });
                if let Some(b) = bias {
                    grads.accum(b, c, |buf| {
                        for i in 0..c {
                            buf[i] = buf[i] + db[i];
                        }
                    });
                }
            }),
        ))
    }

    // ── normalization & activation over axes ───────────────────────────────

    /// Layer normalization along `axis`: zero mean, unit variance per
    /// position, then `gamma`/`beta` affine (both 1-D of the axis extent).
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
        axis: usize,
    ) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        check_axis("layer_norm", &shape, axis)?;
        if eps <= 0.0 {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let (outer, alen, inner) = split_axis(&shape, axis);
        if self.shape(gamma) != [alen] || self.shape(beta) != [alen] {
            return Err(Error::shape(
                "layer_norm",
                format!("gamma/beta must be [{alen}] for shape {shape:?} axis {axis}"),
            ));
        }
        let xd = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let epsv = E::from_f64(eps);
        let nf = E::from_f64(alen as f64);
        let mut data = vec![E::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * alen + a) * inner + i;
                let mut mean = E::zero();
                for a in 0..alen {
                    mean = mean + xd[at(a)];
                }
                mean = mean / nf;
                let mut var = E::zero();
                for a in 0..alen {
                    let d = xd[at(a)] - mean;
                    var = var + d * d;
                }
                var = var / nf;
                let inv_std = E::one() / (var + epsv).sqrt();
                for a in 0..alen {
                    let xhat = (xd[at(a)] - mean) * inv_std;
                    data[at(a)] = xhat * gd[a] + bd[a];
                }
            }
        }
        Ok(self.record(
            data,
            shape,
            &[x, gamma, beta],
            Box::new(move |g, tape, grads| {
                let xd = tape.data(x);
                let gd = tape.data(gamma);
                let mut dx = vec![E::zero(); xd.len()];
                let mut dgamma = vec![E::zero(); alen];
                let mut dbeta = vec![E::zero(); alen];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * alen + a) * inner + i;
                        let mut mean = E::zero();
                        for a in 0..alen {
                            mean = mean + xd[at(a)];
                        }
                        mean = mean / nf;
                        let mut var = E::zero();
                        for a in 0..alen {
                            let d = xd[at(a)] - mean;
                            var = var + d * d;
                        }
                        var = var / nf;
                        let inv_std = E::one() / (var + epsv).sqrt();
                        let mut sum_dxhat = E::zero();
                        let mut sum_dxhat_xhat = E::zero();
                        for a in 0..alen {
                            let xhat = (xd[at(a)] - mean) * inv_std;
                            let gv = g[at(a)];
                            dgamma[a] = dgamma[a] + gv * xhat;
                            dbeta[a] = dbeta[a] + gv;
                            let dxhat = gv * gd[a];
                            sum_dxhat = sum_dxhat + dxhat;
                            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                        }
                        for a in 0..alen {
                            let xhat = (xd[at(a)] - mean) * inv_std;
                            let dxhat = g[at(a)] * gd[a];
                            dx[at(a)] = inv_std / nf
                                * (nf * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                        }
                    }
                }
                grads.accum(x, dx.len(), |buf| {
                    for i in 0..dx.len() {
                        buf[i] = buf[i] + dx[i];
                    }
                });
                grads.accum(gamma, alen, |buf| {
                    for i in 0..alen {
                        buf[i] = buf[i] + dgamma[i];
                    }
                });
                grads.accum(beta, alen, |buf| {
                    for i in 0..alen {
                        buf[i] = buf[i] + dbeta[i];
                    }
                });
            }),
        ))
    }

    /// Softmax along `axis` with max subtraction for stability.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        check_axis("softmax", &shape, axis)?;
        let (outer, alen, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let mut data = vec![E::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * alen + a) * inner + i;
                let mut mx = xd[at(0)];
                for a in 1..alen {
                    if xd[at(a)] > mx {
                        mx = xd[at(a)];
                    }
                }
                let mut sum = E::zero();
                for a in 0..alen {
                    let e = (xd[at(a)] - mx).exp();
                    data[at(a)] = e;
                    sum = sum + e;
                }
                for a in 0..alen {
                    data[at(a)] = data[at(a)] / sum;
                }
            }
        }
        let out_id = self.record(
            data,
            shape,
            &[x],
            Box::new(move |_, _, _| {}),
        );
        // Softmax backward needs its own output; rebuild the node now that
        // the output id is known.
        self.replace_node(
            out_id,
            Box::new(move |g, tape, grads| {
                let sd = tape.data(out_id);
                grads.accum(x, sd.len(), |buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| (o * alen + a) * inner + i;
                            let mut dot = E::zero();
                            for a in 0..alen {
                                dot = dot + g[at(a)] * sd[at(a)];
                            }
                            for a in 0..alen {
                                buf[at(a)] = buf[at(a)] + sd[at(a)] * (g[at(a)] - dot);
                            }
                        }
                    }
                });
            }),
        );
        Ok(out_id)
    }

    // ── resampling ─────────────────────────────────────────────────────────

    /// Nearest-neighbor upsampling by an integer factor.
    pub fn nearest_upsample(&mut self, x: TensorId, factor: usize) -> Result<TensorId> {
        if factor == 0 {
            return Err(Error::Config("upsample factor must be positive".into()));
        }
        let x_shape = self.shape(x).to_vec();
        let (bsz, c, h, w) = as_bchw("nearest_upsample", &x_shape)?;
        let (ho, wo) = (h * factor, w * factor);
        let xd = self.data(x);
        let mut data = vec![E::zero(); bsz * c * ho * wo];
        for bc in 0..bsz * c {
            let src = &xd[bc * h * w..(bc + 1) * h * w];
            let dst = &mut data[bc * ho * wo..(bc + 1) * ho * wo];
            for y in 0..ho {
                let sy = y / factor;
                for xcol in 0..wo {
                    dst[y * wo + xcol] = src[sy * w + xcol / factor];
                }
            }
        }
        let mut out_shape = x_shape.clone();
        let dlen = out_shape.len();
        out_shape[dlen - 2] = ho;
        out_shape[dlen - 1] = wo;
        let numel_x = xd.len();
        Ok(self.record(
            data,
            out_shape,
            &[x],
            Box::new(move |g, _, grads| {
                grads.accum(x, numel_x, |buf| {
                    for bc in 0..bsz * c {
                        let gsl = &g[bc * ho * wo..(bc + 1) * ho * wo];
                        let dst = &mut buf[bc * h * w..(bc + 1) * h * w];
                        for y in 0..ho {
                            let sy = y / factor;
                            for xcol in 0..wo {
                                dst[sy * w + xcol / factor] =
                                    dst[sy * w + xcol / factor] + gsl[y * wo + xcol];
                            }
                        }
                    }
                });
            }),
        ))
    }

    /// Bilinear upsampling by an integer factor, half-pixel centers with
    /// clamped borders.
    pub fn bilinear_upsample(&mut self, x: TensorId, factor: usize) -> Result<TensorId> {
        if factor == 0 {
            return Err(Error::Config("upsample factor must be positive".into()));
        }
        let x_shape = self.shape(x).to_vec();
        let (bsz, c, h, w) = as_bchw("bilinear_upsample", &x_shape)?;
        let (ho, wo) = (h * factor, w * factor);
        let ytab = Arc::new(bilinear_taps(h, ho));
        let xtab = Arc::new(bilinear_taps(w, wo));
        let xd = self.data(x);
        let mut data = vec![E::zero(); bsz * c * ho * wo];
        for bc in 0..bsz * c {
            let src = &xd[bc * h * w..(bc + 1) * h * w];
            let dst = &mut data[bc * ho * wo..(bc + 1) * ho * wo];
            for y in 0..ho {
                let (y0, y1, wy) = ytab[y];
                let wy = E::from_f64(wy);
                for xcol in 0..wo {
                    let (x0, x1, wx) = xtab[xcol];
                    let wx = E::from_f64(wx);
                    let top = src[y0 * w + x0] * (E::one() - wx) + src[y0 * w + x1] * wx;
                    let bot = src[y1 * w + x0] * (E::one() - wx) + src[y1 * w + x1] * wx;
                    dst[y * wo + xcol] = top * (E::one() - wy) + bot * wy;
                }
            }
        }
        let mut out_shape = x_shape.clone();
        let dlen = out_shape.len();
        out_shape[dlen - 2] = ho;
        out_shape[dlen - 1] = wo;
        let numel_x = xd.len();
        let (yt, xt) = (ytab.clone(), xtab.clone());
        Ok(self.record(
            data,
            out_shape,
            &[x],
            Box::new(move |g, _, grads| {
                grads.accum(x, numel_x, |buf| {
                    for bc in 0..bsz * c {
                        let gsl = &g[bc * ho * wo..(bc + 1) * ho * wo];
                        let dst = &mut buf[bc * h * w..(bc + 1) * h * w];
                        for y in 0..ho {
                            let (y0, y1, wy) = yt[y];
                            let wy = E::from_f64(wy);
                            for xcol in 0..wo {
                                let (x0, x1, wx) = xt[xcol];
                                let wx = E::from_f64(wx);
                                let gv = gsl[y * wo + xcol];
                                dst[y0 * w + x0] =
                                    dst[y0 * w + x0] + gv * (E::one() - wy) * (E::one() - wx);
                                dst[y0 * w + x1] = dst[y0 * w + x1] + gv * (E::one() - wy) * wx;
                                dst[y1 * w + x0] = dst[y1 * w + x0] + gv * wy * (E::one() - wx);
                                dst[y1 * w + x1] = dst[y1 * w + x1] + gv * wy * wx;
                            }
                        }
                    }
                });
            }),
        ))
    }

    // ── reductions & losses ────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let mut s = E::zero();
        for &v in self.data(x) {
            s = s + v;
        }
        let numel = self.numel(x);
        Ok(self.record(
            vec![s],
            vec![1],
            &[x],
            Box::new(move |g, _, grads| {
                let gv = g[0];
                grads.accum(x, numel, |buf| {
                    for b in buf.iter_mut() {
                        *b = *b + gv;
                    }
                });
            }),
        ))
    }

    /// Mean cross-entropy over non-ignored pixels. `logits` is `[C,H,W]` or
    /// `[B,C,H,W]`; `targets` holds one label per pixel in batch-row-major
    /// order. Pixels labeled `ignore` contribute neither loss nor gradient.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[u8],
        ignore: u8,
    ) -> Result<MaskedLoss> {
        let shape = self.shape(logits).to_vec();
        let (bsz, c, h, w) = as_bchw("cross_entropy", &shape)?;
        if targets.len() != bsz * h * w {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {} pixels", targets.len(), bsz * h * w),
            ));
        }
        if targets.iter().any(|&t| t != ignore && (t as usize) >= c) {
            return Err(Error::Usage(format!("cross_entropy target out of range [0,{c})")));
        }
        let hw = h * w;
        let xd = self.data(logits);
        let mut count = 0usize;
        let mut loss = E::zero();
        for b in 0..bsz {
            for p in 0..hw {
                let t = targets[b * hw + p];
                if t == ignore {
                    continue;
                }
                let at = |ch: usize| (b * c + ch) * hw + p;
                let mut mx = xd[at(0)];
                for ch in 1..c {
                    if xd[at(ch)] > mx {
                        mx = xd[at(ch)];
                    }
                }
                let mut sum = E::zero();
                for ch in 0..c {
                    sum = sum + (xd[at(ch)] - mx).exp();
                }
                loss = loss + (sum.ln() + mx - xd[at(t as usize)]);
                count += 1;
            }
        }
        if count > 0 {
            loss = loss / E::from_f64(count as f64);
        } else {
            loss = E::zero();
        }
        let targets: Arc<Vec<u8>> = Arc::new(targets.to_vec());
        let numel = xd.len();
        let id = self.record(
            vec![loss],
            vec![1],
            &[logits],
            Box::new(move |g, tape, grads| {
                if count == 0 {
                    return;
                }
                let xd = tape.data(logits);
                let scale = g[0] / E::from_f64(count as f64);
                grads.accum(logits, numel, |buf| {
                    for b in 0..bsz {
                        for p in 0..hw {
                            let t = targets[b * hw + p];
                            if t == ignore {
                                continue;
                            }
                            let at = |ch: usize| (b * c + ch) * hw + p;
                            let mut mx = xd[at(0)];
                            for ch in 1..c {
                                if xd[at(ch)] > mx {
                                    mx = xd[at(ch)];
                                }
                            }
                            let mut sum = E::zero();
                            for ch in 0..c {
                                sum = sum + (xd[at(ch)] - mx).exp();
                            }
                            for ch in 0..c {
                                let sm = (xd[at(ch)] - mx).exp() / sum;
                                let ind = if ch == t as usize { E::one() } else { E::zero() };
                                buf[at(ch)] = buf[at(ch)] + scale * (sm - ind);
                            }
                        }
                    }
                });
            }),
        );
        Ok(MaskedLoss { loss: id, pixels: count })
    }

    /// Converse cross-entropy: on changed, non-background pixels, penalize
    /// probability assigned to the class the map data says the pixel was.
    /// `logits` is `[C_fg+1, H, W]` with channel 0 = background; the softmax
    /// runs over the foreground channels only. The probability is clamped to
    /// `1 - eps` before the log and clamped pixels get zero gradient.
    pub fn converse_cross_entropy(
        &mut self,
        logits: TensorId,
        y_osm: &[u8],
        y_bcd: &[u8],
        eps: f64,
    ) -> Result<MaskedLoss> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 3 || shape[0] < 2 {
            return Err(Error::shape(
                "converse_cross_entropy",
                format!("expected [C_fg+1,H,W] with C_fg >= 1, got {shape:?}"),
            ));
        }
        let (c1, h, w) = (shape[0], shape[1], shape[2]);
        let cf = c1 - 1;
        let hw = h * w;
        if y_osm.len() != hw || y_bcd.len() != hw {
            return Err(Error::shape(
                "converse_cross_entropy",
                format!("label length mismatch: {} / {} vs {hw} pixels", y_osm.len(), y_bcd.len()),
            ));
        }
        if y_osm.iter().any(|&t| (t as usize) > cf) {
            return Err(Error::Usage(format!("map label out of range [0,{cf}]")));
        }
        let epsv = E::from_f64(eps);
        let pmax = E::one() - epsv;
        let xd = self.data(logits);
        let mut loss = E::zero();
        let mut count = 0usize;
        for p in 0..hw {
            if y_bcd[p] != 1 || y_osm[p] == 0 {
                continue;
            }
            let k = (y_osm[p] - 1) as usize;
            let pk = fg_softmax_at(xd, cf, hw, p, k);
            let pk = if pk > pmax { pmax } else { pk };
            loss = loss - (E::one() - pk).ln();
            count += 1;
        }
        if count > 0 {
            loss = loss / E::from_f64(count as f64);
        } else {
            loss = E::zero();
        }
        let y_osm: Arc<Vec<u8>> = Arc::new(y_osm.to_vec());
        let y_bcd: Arc<Vec<u8>> = Arc::new(y_bcd.to_vec());
        let numel = xd.len();
        let id = self.record(
            vec![loss],
            vec![1],
            &[logits],
            Box::new(move |g, tape, grads| {
                if count == 0 {
                    return;
                }
                let xd = tape.data(logits);
                let scale = g[0] / E::from_f64(count as f64);
                grads.accum(logits, numel, |buf| {
                    for p in 0..hw {
                        if y_bcd[p] != 1 || y_osm[p] == 0 {
                            continue;
                        }
                        let k = (y_osm[p] - 1) as usize;
                        let (mx, sum) = fg_stats(xd, cf, hw, p);
                        let pk = (xd[(1 + k) * hw + p] - mx).exp() / sum;
                        if pk > pmax {
                            continue; // clamped: constant loss, zero gradient
                        }
                        let factor = pk / (E::one() - pk);
                        for j in 0..cf {
                            let pj = (xd[(1 + j) * hw + p] - mx).exp() / sum;
                            let ind = if j == k { E::one() } else { E::zero() };
                            let d = factor * (ind - pj);
                            buf[(1 + j) * hw + p] = buf[(1 + j) * hw + p] + scale * d;
                        }
                    }
                });
            }),
        );
        Ok(MaskedLoss { loss: id, pixels: count })
    }

    // ── region pooling ─────────────────────────────────────────────────────

    /// Fuse the pixels of each region of a `[C,H,W]` feature map into one
    /// token per region, giving `[N,C]`. Max/min route their gradient to the
    /// first extremal pixel in flat order.
    pub fn pool_regions(
        &mut self,
        feat: TensorId,
        labels: Arc<Vec<u32>>,
        n_regions: usize,
        fusion: PoolFusion,
    ) -> Result<TensorId> {
        let shape = self.shape(feat).to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("pool_regions", format!("expected [C,H,W], got {shape:?}")));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let hw = h * w;
        if labels.len() != hw {
            return Err(Error::shape(
                "pool_regions",
                format!("label map has {} pixels, feature map {hw}", labels.len()),
            ));
        }
        if n_regions == 0 {
            return Err(Error::Config("pool_regions: zero regions".into()));
        }
        debug_assert!(labels.iter().all(|&l| (l as usize) < n_regions));

        let xd = self.data(feat);
        let mut counts = vec![0u32; n_regions];
        for &l in labels.iter() {
            counts[l as usize] += 1;
        }
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::Usage("pool_regions: a region has no pixels".into()));
        }

        let mut mean = vec![E::zero(); n_regions * c];
        let mut ext = vec![E::zero(); n_regions * c];
        let mut arg = vec![0u32; n_regions * c];
        let need_mean = matches!(fusion, PoolFusion::Mean | PoolFusion::MeanPlusMax);
        let need_ext = !matches!(fusion, PoolFusion::Mean);
        if need_ext {
            let init = match fusion {
                PoolFusion::Min => E::infinity(),
                _ => E::neg_infinity(),
            };
            ext.iter_mut().for_each(|v| *v = init);
        }
        for ch in 0..c {
            let plane = &xd[ch * hw..(ch + 1) * hw];
            for (p, &l) in labels.iter().enumerate() {
                let t = l as usize * c + ch;
                let v = plane[p];
                if need_mean {
                    mean[t] = mean[t] + v;
                }
                if need_ext {
                    let better = match fusion {
                        PoolFusion::Min => v < ext[t],
                        _ => v > ext[t],
                    };
                    if better {
                        ext[t] = v;
                        arg[t] = p as u32;
                    }
                }
            }
        }
        if need_mean {
            for n in 0..n_regions {
                let cnt = E::from_f64(counts[n] as f64);
                for ch in 0..c {
                    mean[n * c + ch] = mean[n * c + ch] / cnt;
                }
            }
        }
        let data: Vec<E> = match fusion {
            PoolFusion::Mean => mean.clone(),
            PoolFusion::Max | PoolFusion::Min => ext.clone(),
            PoolFusion::MeanPlusMax => {
                mean.iter().zip(&ext).map(|(&m, &x)| m + x).collect()
            }
        };
        let labels_b = labels.clone();
        let arg = Arc::new(arg);
        let counts = Arc::new(counts);
        let numel_feat = xd.len();
        Ok(self.record(
            data,
            vec![n_regions, c],
            &[feat],
            Box::new(move |g, _, grads| {
                grads.accum(feat, numel_feat, |buf| {
                    let distribute_mean = matches!(fusion, PoolFusion::Mean | PoolFusion::MeanPlusMax);
                    let route_ext = !matches!(fusion, PoolFusion::Mean);
                    if distribute_mean {
                        for ch in 0..c {
                            for (p, &l) in labels_b.iter().enumerate() {
                                let t = l as usize * c + ch;
                                let share = g[t] / E::from_f64(counts[l as usize] as f64);
                                buf[ch * hw + p] = buf[ch * hw + p] + share;
                            }
                        }
                    }
                    if route_ext {
                        for n in 0..counts.len() {
                            for ch in 0..c {
                                let t = n * c + ch;
                                let p = arg[t] as usize;
                                buf[ch * hw + p] = buf[ch * hw + p] + g[t];
                            }
                        }
                    }
                });
            }),
        ))
    }

    /// Scatter tokens `[N,C]` back onto the raster grid: pixel `(y,x)` takes
    /// the token of its region label.
    pub fn reassign_regions(
        &mut self,
        tokens: TensorId,
        labels: Arc<Vec<u32>>,
        height: usize,
        width: usize,
    ) -> Result<TensorId> {
        let shape = self.shape(tokens).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("reassign_regions", format!("expected [N,C], got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let hw = height * width;
        if labels.len() != hw {
            return Err(Error::shape(
                "reassign_regions",
                format!("label map has {} pixels, target grid {hw}", labels.len()),
            ));
        }
        if let Some(&mx) = labels.iter().max() {
            if mx as usize >= n {
                return Err(Error::shape(
                    "reassign_regions",
                    format!("label {mx} exceeds token count {n}"),
                ));
            }
        }
        let td = self.data(tokens);
        let mut data = vec![E::zero(); c * hw];
        for ch in 0..c {
            let plane = &mut data[ch * hw..(ch + 1) * hw];
            for (p, &l) in labels.iter().enumerate() {
                plane[p] = td[l as usize * c + ch];
            }
        }
        let labels_b = labels.clone();
        Ok(self.record(
            data,
            vec![c, height, width],
            &[tokens],
            Box::new(move |g, _, grads| {
                grads.accum(tokens, n * c, |buf| {
                    for ch in 0..c {
                        let plane = &g[ch * hw..(ch + 1) * hw];
                        for (p, &l) in labels_b.iter().enumerate() {
                            let t = l as usize * c + ch;
                            buf[t] = buf[t] + plane[p];
                        }
                    }
                });
            }),
        ))
    }
}

fn fg_stats<E: Element>(xd: &[E], cf: usize, hw: usize, p: usize) -> (E, E) {
    let mut mx = xd[hw + p];
    for j in 1..cf {
        let v = xd[(1 + j) * hw + p];
        if v > mx {
            mx = v;
        }
    }
    let mut sum = E::zero();
    for j in 0..cf {
        sum = sum + (xd[(1 + j) * hw + p] - mx).exp();
    }
    (mx, sum)
}

fn fg_softmax_at<E: Element>(xd: &[E], cf: usize, hw: usize, p: usize, k: usize) -> E {
    let (mx, sum) = fg_stats(xd, cf, hw, p);
    (xd[(1 + k) * hw + p] - mx).exp() / sum
}

/// Source taps and weight for half-pixel bilinear interpolation.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let pos = (d as f64 + 0.5) * scale - 0.5;
            let pos = pos.max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - pos.floor())
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn conv2d_fwd<E: Element>(
    xd: &[E],
    wd: &[E],
    bd: Option<Vec<E>>,
    bsz: usize,
    c: usize,
    h: usize,
    w: usize,
    oc: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<E> {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let hw = h * w;
    let ohw = ho * wo;
    // pointwise fast path: a 1x1 stride-1 conv is a matmul over pixels
    if k == 1 && stride == 1 && pad == 0 {
        let mut out = vec![E::zero(); bsz * oc * ohw];
        for b in 0..bsz {
            let x_b = &xd[b * c * hw..(b + 1) * c * hw];
            let o_b = matmul_raw(wd, x_b, oc, c, hw);
            let dst = &mut out[b * oc * ohw..(b + 1) * oc * ohw];
            dst.copy_from_slice(&o_b);
            if let Some(bias) = &bd {
                for o in 0..oc {
                    let bv = bias[o];
                    for p in 0..ohw {
                        dst[o * ohw + p] = dst[o * ohw + p] + bv;
                    }
                }
            }
        }
        return out;
    }
    let mut out = vec![E::zero(); bsz * oc * ohw];
    for b in 0..bsz {
        for o in 0..oc {
            let bias_v = bd.as_ref().map_or(E::zero(), |v| v[o]);
            let dst = &mut out[(b * oc + o) * ohw..(b * oc + o + 1) * ohw];
            dst.iter_mut().for_each(|v| *v = bias_v);
            for ch in 0..c {
                let src = &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                let ker = &wd[(o * c + ch) * k * k..(o * c + ch + 1) * k * k];
                for oy in 0..ho {
                    let iy0 = oy * stride;
                    for ky in 0..k {
                        let iy = iy0 + ky;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        let iy = iy - pad;
                        let krow = &ker[ky * k..(ky + 1) * k];
                        let srow = &src[iy * w..(iy + 1) * w];
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        for ox in 0..wo {
                            let ix0 = ox * stride;
                            let mut s = E::zero();
                            for (kx, &kv) in krow.iter().enumerate() {
                                let ix = ix0 + kx;
                                if ix < pad || ix >= w + pad {
                                    continue;
                                }
                                s = s + srow[ix - pad] * kv;
                            }
                            drow[ox] = drow[ox] + s;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_bwd<E: Element>(
    g: &[E],
    xd: &[E],
    wd: &[E],
    bsz: usize,
    c: usize,
    h: usize,
    w: usize,
    oc: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let hw = h * w;
    let ohw = ho * wo;
    let mut dx = vec![E::zero(); bsz * c * hw];
    let mut dw = vec![E::zero(); oc * c * k * k];
    let mut db = vec![E::zero(); oc];
    if k == 1 && stride == 1 && pad == 0 {
        for b in 0..bsz {
            let g_b = &g[b * oc * ohw..(b + 1) * oc * ohw];
            let x_b = &xd[b * c * hw..(b + 1) * c * hw];
            // dW += G . X^T ; dX = W^T . G
            let dwp = matmul_nt(g_b, x_b, oc, ohw, c);
            for i in 0..oc * c {
                dw[i] = dw[i] + dwp[i];
            }
            let dxp = matmul_tn(wd, g_b, c, oc, hw);
            let dst = &mut dx[b * c * hw..(b + 1) * c * hw];
            for i in 0..c * hw {
                dst[i] = dst[i] + dxp[i];
            }
            for o in 0..oc {
                let mut s = E::zero();
                for p in 0..ohw {
                    s = s + g_b[o * ohw + p];
                }
                db[o] = db[o] + s;
            }
        }
        return (dx, dw, db);
    }
    for b in 0..bsz {
        for o in 0..oc {
            let gsl = &g[(b * oc + o) * ohw..(b * oc + o + 1) * ohw];
            for oy in 0..ho {
                for ox in 0..wo {
                    let gv = gsl[oy * wo + ox];
                    if gv == E::zero() {
                        continue;
                    }
                    db[o] = db[o] + gv;
                    for ch in 0..c {
                        let src = &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                        let dxs = &mut dx[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                        for ky in 0..k {
                            let iy = oy * stride + ky;
                            if iy < pad || iy >= h + pad {
                                continue;
                            }
                            let iy = iy - pad;
                            for kx in 0..k {
                                let ix = ox * stride + kx;
                                if ix < pad || ix >= w + pad {
                                    continue;
                                }
                                let ix = ix - pad;
                                let widx = ((o * c + ch) * k + ky) * k + kx;
                                dxs[iy * w + ix] = dxs[iy * w + ix] + gv * wd[widx];
                                dw[widx] = dw[widx] + gv * src[iy * w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}
