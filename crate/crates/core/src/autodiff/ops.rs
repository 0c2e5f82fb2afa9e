use rand::Rng;

use super::graph::{IndexMap, Op, Tensor};
use super::{axis_view, numel, Real};
use crate::error::{shape_err, Result};
use crate::par;

/// Right-aligned broadcast of two shapes.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; r - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// For each element of `out`, the flat index into a broadcast operand.
fn index_map(src: &[usize], out: &[usize]) -> IndexMap {
    if src == out {
        return None;
    }
    let r = out.len();
    let mut padded = vec![1; r - src.len()];
    padded.extend_from_slice(src);
    let mut strides = vec![0u32; r];
    let mut s = 1u32;
    for d in (0..r).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { s };
        s *= padded[d] as u32;
    }
    let n = numel(out);
    let mut map = Vec::with_capacity(n);
    let mut counter = vec![0usize; r];
    let mut cur = 0u32;
    for _ in 0..n {
        map.push(cur);
        for d in (0..r).rev() {
            counter[d] += 1;
            cur += strides[d];
            if counter[d] < out[d] {
                break;
            }
            cur -= strides[d] * out[d] as u32;
            counter[d] = 0;
        }
    }
    Some(map)
}

#[inline]
fn at(map: &IndexMap, i: usize) -> usize {
    match map {
        None => i,
        Some(m) => m[i] as usize,
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(shape_err(op, shape, &[axis]));
    }
    Ok(())
}

impl<'g> Tensor<'g> {
    fn binary(
        self,
        rhs: Tensor<'g>,
        name: &'static str,
        f: impl Fn(Real, Real) -> Real,
        mk: impl FnOnce(usize, usize, IndexMap, IndexMap) -> Op,
    ) -> Result<Tensor<'g>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        let out = broadcast_shape(&sa, &sb).ok_or_else(|| shape_err(name, &sa, &sb))?;
        let (ma, mb) = (index_map(&sa, &out), index_map(&sb, &out));
        let value = {
            let (va, vb) = (self.value_ref(), rhs.value_ref());
            (0..numel(&out)).map(|i| f(va[at(&ma, i)], vb[at(&mb, i)])).collect()
        };
        Ok(self.g.push(out, value, mk(self.id, rhs.id, ma, mb)))
    }

    pub fn add(self, rhs: Tensor<'g>) -> Result<Tensor<'g>> {
        self.binary(rhs, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, rhs: Tensor<'g>) -> Result<Tensor<'g>> {
        self.binary(rhs, "sub", |a, b| a - b, Op::Sub)
    }

    /// Elementwise product.
    pub fn mul(self, rhs: Tensor<'g>) -> Result<Tensor<'g>> {
        self.binary(rhs, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn div(self, rhs: Tensor<'g>) -> Result<Tensor<'g>> {
        self.binary(rhs, "div", |a, b| a / b, Op::Div)
    }

    pub fn scale(self, c: Real) -> Tensor<'g> {
        let v = self.value_ref().iter().map(|x| x * c).collect();
        self.g.push(self.shape(), v, Op::Scale(self.id, c))
    }

    pub fn neg(self) -> Tensor<'g> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: Real) -> Tensor<'g> {
        let v = self.value_ref().iter().map(|x| x + c).collect();
        self.g.push(self.shape(), v, Op::AddScalar(self.id))
    }

    /// `[..., K] x [K, N] -> [..., N]`.
    pub fn matmul(self, rhs: Tensor<'g>) -> Result<Tensor<'g>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let rows = numel(&sa) / k.max(1);
        let mut out = vec![0.0; rows * n];
        {
            let (ar, br) = (self.value_ref(), rhs.value_ref());
            let (a, b): (&[Real], &[Real]) = (&ar, &br);
            par::for_each_chunk_mut(&mut out, n, |r, row| {
                let ar = &a[r * k..(r + 1) * k];
                for (kk, &x) in ar.iter().enumerate() {
                    if x == 0.0 {
                        continue;
                    }
                    let br = &b[kk * n..(kk + 1) * n];
                    for (o, &y) in row.iter_mut().zip(br) {
                        *o += x * y;
                    }
                }
            });
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        Ok(self.g.push(shape, out, Op::MatMul(self.id, rhs.id)))
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(parts: &[Tensor<'g>], axis: usize) -> Result<Tensor<'g>> {
        let first = parts.first().ok_or_else(|| shape_err("concat", &[], &[]))?;
        let g = first.g;
        let s0 = first.shape();
        check_axis("concat", &s0, axis)?;
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape()).collect();
        for s in &shapes {
            if s.len() != s0.len()
                || s.iter().enumerate().any(|(d, &x)| d != axis && x != s0[d])
            {
                return Err(shape_err("concat", &s0, s));
            }
        }
        let total: usize = shapes.iter().map(|s| s[axis]).sum();
        let mut out_shape = s0.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_view(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        {
            let vals: Vec<_> = parts.iter().map(|p| p.value_ref()).collect();
            for o in 0..outer {
                for (v, s) in vals.iter().zip(&shapes) {
                    let w = s[axis] * inner;
                    out.extend_from_slice(&v[o * w..(o + 1) * w]);
                }
            }
        }
        Ok(g.push(
            out_shape,
            out,
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        ))
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Tensor<'g>> {
        let s = self.shape();
        check_axis("slice", &s, axis)?;
        if start + len > s[axis] {
            return Err(shape_err("slice", &s, &[start, len]));
        }
        let (outer, n, inner) = axis_view(&s, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let v = self.value_ref();
            for o in 0..outer {
                let base = o * n * inner + start * inner;
                out.extend_from_slice(&v[base..base + len * inner]);
            }
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.g.push(shape, out, Op::Slice { a: self.id, axis, start }))
    }

    /// Sum over `axis`, removing it.
    pub fn reduce_sum(self, axis: usize) -> Result<Tensor<'g>> {
        let s = self.shape();
        check_axis("reduce_sum", &s, axis)?;
        let (outer, n, inner) = axis_view(&s, axis);
        let mut out = vec![0.0; outer * inner];
        {
            let v = self.value_ref();
            for o in 0..outer {
                for k in 0..n {
                    let row = &v[(o * n + k) * inner..(o * n + k + 1) * inner];
                    for (acc, x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                        *acc += x;
                    }
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.g.push(shape, out, Op::ReduceSum { a: self.id, axis }))
    }

    pub fn reduce_mean(self, axis: usize) -> Result<Tensor<'g>> {
        let s = self.shape();
        check_axis("reduce_mean", &s, axis)?;
        Ok(self.reduce_sum(axis)?.scale(1.0 / s[axis] as Real))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum_all(self) -> Result<Tensor<'g>> {
        self.reshape(&[self.numel()])?.reduce_sum(0)
    }

    /// Max over `axis`, removing it. Ties go to the lowest index.
    pub fn reduce_max(self, axis: usize) -> Result<Tensor<'g>> {
        let s = self.shape();
        check_axis("reduce_max", &s, axis)?;
        let (outer, n, inner) = axis_view(&s, axis);
        if n == 0 {
            return Err(shape_err("reduce_max", &s, &[axis]));
        }
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0u32; outer * inner];
        {
            let v = self.value_ref();
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = v[o * n * inner + i];
                    let mut bk = 0;
                    for k in 1..n {
                        let x = v[(o * n + k) * inner + i];
                        if x > best {
                            best = x;
                            bk = k;
                        }
                    }
                    out[o * inner + i] = best;
                    argmax[o * inner + i] = bk as u32;
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.g.push(
            shape,
            out,
            Op::ReduceMax {
                a: self.id,
                axis,
                argmax,
            },
        ))
    }

    /// Softmax along `axis` (max-shifted).
    pub fn softmax(self, axis: usize) -> Result<Tensor<'g>> {
        let s = self.shape();
        check_axis("softmax", &s, axis)?;
        let (outer, n, inner) = axis_view(&s, axis);
        let mut out = vec![0.0; numel(&s)];
        {
            let v = self.value_ref();
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * n + k) * inner + i;
                    let m = (0..n).map(|k| v[idx(k)]).fold(Real::NEG_INFINITY, Real::max);
                    let mut sum = 0.0;
                    for k in 0..n {
                        let e = (v[idx(k)] - m).exp();
                        out[idx(k)] = e;
                        sum += e;
                    }
                    for k in 0..n {
                        out[idx(k)] /= sum;
                    }
                }
            }
        }
        Ok(self.g.push(s, out, Op::Softmax { a: self.id, axis }))
    }

    pub fn leaky_relu(self, slope: Real) -> Tensor<'g> {
        let v = self
            .value_ref()
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        self.g.push(self.shape(), v, Op::LeakyRelu(self.id, slope))
    }

    pub fn exp(self) -> Tensor<'g> {
        let v = self.value_ref().iter().map(|x| x.exp()).collect();
        self.g.push(self.shape(), v, Op::Exp(self.id))
    }

    pub fn log(self) -> Tensor<'g> {
        let v = self.value_ref().iter().map(|x| x.ln()).collect();
        self.g.push(self.shape(), v, Op::Log(self.id))
    }

    pub fn sqrt(self) -> Tensor<'g> {
        let v = self.value_ref().iter().map(|x| x.sqrt()).collect();
        self.g.push(self.shape(), v, Op::Sqrt(self.id))
    }

    pub fn abs(self) -> Tensor<'g> {
        let v = self.value_ref().iter().map(|x| x.abs()).collect();
        self.g.push(self.shape(), v, Op::Abs(self.id))
    }

    /// Expands size-1 (or missing leading) axes to `shape`.
    pub fn broadcast_to(self, shape: &[usize]) -> Result<Tensor<'g>> {
        if self.shape() == shape {
            return Ok(self);
        }
        let z = self.g.zeros(shape);
        let out = self.add(z)?;
        if out.shape() != shape {
            return Err(shape_err("broadcast_to", &self.shape(), shape));
        }
        Ok(out)
    }

    /// `max(x, c)`; the gradient is zero where the floor is active.
    pub fn clamp_min(self, c: Real) -> Tensor<'g> {
        let v = self.value_ref().iter().map(|x| x.max(c)).collect();
        self.g.push(self.shape(), v, Op::ClampMin(self.id, c))
    }

    pub fn square(self) -> Result<Tensor<'g>> {
        self.mul(self)
    }

    /// L1 norm along `axis`.
    pub fn norm_l1(self, axis: usize) -> Result<Tensor<'g>> {
        self.abs().reduce_sum(axis)
    }

    /// L2 norm along `axis`; the gradient at a zero vector is taken as zero.
    pub fn norm_l2(self, axis: usize) -> Result<Tensor<'g>> {
        let s = self.shape();
        check_axis("norm_l2", &s, axis)?;
        let (outer, n, inner) = axis_view(&s, axis);
        let mut out = vec![0.0; outer * inner];
        {
            let v = self.value_ref();
            for o in 0..outer {
                for i in 0..inner {
                    let ss: Real = (0..n).map(|k| v[(o * n + k) * inner + i].powi(2)).sum();
                    out[o * inner + i] = ss.sqrt();
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.g.push(shape, out, Op::NormL2 { a: self.id, axis }))
    }

    /// Rows `idx` of the leading axis.
    pub fn gather(self, idx: &[usize]) -> Result<Tensor<'g>> {
        let s = self.shape();
        let rows = s[0];
        let w = numel(&s[1..]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(shape_err("gather", &s, &[bad]));
        }
        let mut out = Vec::with_capacity(idx.len() * w);
        {
            let v = self.value_ref();
            for &i in idx {
                out.extend_from_slice(&v[i * w..(i + 1) * w]);
            }
        }
        let mut shape = s;
        shape[0] = idx.len();
        Ok(self.g.push(
            shape,
            out,
            Op::Gather {
                a: self.id,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Adds row `l` into output row `idx[l]`; output has `rows` rows.
    pub fn scatter_add(self, idx: &[usize], rows: usize) -> Result<Tensor<'g>> {
        let s = self.shape();
        if s[0] != idx.len() || idx.iter().any(|&i| i >= rows) {
            return Err(shape_err("scatter_add", &s, &[idx.len(), rows]));
        }
        let w = numel(&s[1..]);
        let mut out = vec![0.0; rows * w];
        {
            let v = self.value_ref();
            for (l, &i) in idx.iter().enumerate() {
                for (o, x) in out[i * w..(i + 1) * w].iter_mut().zip(&v[l * w..(l + 1) * w]) {
                    *o += x;
                }
            }
        }
        let mut shape = s;
        shape[0] = rows;
        Ok(self.g.push(
            shape,
            out,
            Op::ScatterAdd {
                a: self.id,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Same value, no gradient path back to `self`.
    pub fn detach(self) -> Tensor<'g> {
        self.g.constant(self.value(), &self.shape()).expect("shape matches value")
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Tensor<'g>> {
        let s = self.shape();
        if numel(&s) != numel(shape) {
            return Err(shape_err("reshape", &s, shape));
        }
        Ok(self.g.push(shape.to_vec(), self.value(), Op::Reshape(self.id)))
    }

    /// 3×3 convolution with replicate padding, stride 1.
    /// `self: [H, W, Cin]`, `w: [3, 3, Cin, Cout]` → `[H, W, Cout]`.
    pub fn conv2d(self, w: Tensor<'g>) -> Result<Tensor<'g>> {
        let (sx, sw) = (self.shape(), w.shape());
        if sx.len() != 3 || sw.len() != 4 || sw[0] != 3 || sw[1] != 3 || sw[2] != sx[2] {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        let (h, wd, cin, cout) = (sx[0], sx[1], sx[2], sw[3]);
        let mut out = vec![0.0; h * wd * cout];
        {
            let (xr, kr) = (self.value_ref(), w.value_ref());
            let (x, k): (&[Real], &[Real]) = (&xr, &kr);
            par::for_each_chunk_mut(&mut out, wd * cout, |y, row| {
                for xx in 0..wd {
                    let o = &mut row[xx * cout..(xx + 1) * cout];
                    for dy in 0..3 {
                        let iy = (y + dy).saturating_sub(1).min(h - 1);
                        for dx in 0..3 {
                            let ix = (xx + dx).saturating_sub(1).min(wd - 1);
                            let xin = &x[(iy * wd + ix) * cin..(iy * wd + ix + 1) * cin];
                            let kb = (dy * 3 + dx) * cin * cout;
                            for (ci, &xv) in xin.iter().enumerate() {
                                let kr = &k[kb + ci * cout..kb + (ci + 1) * cout];
                                for (ov, &kv) in o.iter_mut().zip(kr) {
                                    *ov += xv * kv;
                                }
                            }
                        }
                    }
                }
            });
        }
        Ok(self
            .g
            .push(vec![h, wd, cout], out, Op::Conv2d { x: self.id, w: w.id }))
    }

    /// Non-overlapping max pooling over `[H, W, C]` with window = stride.
    /// Trailing rows/columns that do not fill a window are dropped.
    pub fn max_pool2d(self, sh: usize, sw: usize) -> Result<Tensor<'g>> {
        let s = self.shape();
        if s.len() != 3 || sh == 0 || sw == 0 || s[0] < sh || s[1] < sw {
            return Err(shape_err("max_pool2d", &s, &[sh, sw]));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / sh, w / sw);
        let mut out = vec![0.0; oh * ow * c];
        let mut argmax = vec![0u32; oh * ow * c];
        {
            let v = self.value_ref();
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = Real::NEG_INFINITY;
                        let mut bi = 0usize;
                        for dy in 0..sh {
                            for dx in 0..sw {
                                let i = ((oy * sh + dy) * w + ox * sw + dx) * c + ch;
                                if v[i] > best {
                                    best = v[i];
                                    bi = i;
                                }
                            }
                        }
                        let o = (oy * ow + ox) * c + ch;
                        out[o] = best;
                        argmax[o] = bi as u32;
                    }
                }
            }
        }
        Ok(self
            .g
            .push(vec![oh, ow, c], out, Op::MaxPool2d { x: self.id, argmax }))
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1/(1-p)`.
    pub fn dropout(self, p: Real, rng: &mut impl Rng) -> Tensor<'g> {
        let keep = 1.0 - p;
        let mask: Vec<Real> = (0..self.numel())
            .map(|_| if (rng.gen::<f64>() as Real) < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let v = self.value_ref().iter().zip(&mask).map(|(x, m)| x * m).collect();
        self.g.push(self.shape(), v, Op::Dropout { a: self.id, mask })
    }

    /// Hamilton product of two `[4]` quaternions (w, x, y, z).
    pub fn quat_mul(self, rhs: Tensor<'g>) -> Result<Tensor<'g>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa != [4] || sb != [4] {
            return Err(shape_err("quat_mul", &sa, &sb));
        }
        let v = {
            let (a, b) = (self.value_ref(), rhs.value_ref());
            quat_mul_raw(&a, &b).to_vec()
        };
        Ok(self.g.push(vec![4], v, Op::QuatMul(self.id, rhs.id)))
    }

    /// Rotation matrix `[3, 3]` of a unit quaternion `[4]`.
    pub fn quat_to_rotmat(self) -> Result<Tensor<'g>> {
        let s = self.shape();
        if s != [4] {
            return Err(shape_err("quat_to_rotmat", &s, &[4]));
        }
        let v = rotmat_raw(&self.value_ref()).to_vec();
        Ok(self.g.push(vec![3, 3], v, Op::QuatToRotmat(self.id)))
    }

    /// Rotates row vectors `[N, 3]` by a unit quaternion and adds `t: [3]`.
    pub fn rigid_apply(self, q: Tensor<'g>, t: Tensor<'g>) -> Result<Tensor<'g>> {
        // p' = p Rᵀ + t
        let r = q.quat_to_rotmat()?;
        let rt = transpose3(r)?;
        self.matmul(rt)?.add(t)
    }

    /// Standardizes along `axis`: `(x - mean) / sqrt(var + eps)` with the
    /// population variance.
    pub fn standardize(self, axis: usize, eps: Real) -> Result<Tensor<'g>> {
        let mut keep = self.shape();
        check_axis("standardize", &keep, axis)?;
        let n = keep[axis] as Real;
        keep[axis] = 1;
        let mean = self.reduce_sum(axis)?.scale(1.0 / n).reshape(&keep)?;
        let centered = self.sub(mean)?;
        let var = centered.square()?.reduce_sum(axis)?.scale(1.0 / n).reshape(&keep)?;
        centered.div(var.add_scalar(eps).sqrt())
    }
}

fn transpose3<'g>(r: Tensor<'g>) -> Result<Tensor<'g>> {
    // [3,3] transpose as a gather over the flattened matrix.
    let flat = r.reshape(&[9, 1])?;
    flat.gather(&[0, 3, 6, 1, 4, 7, 2, 5, 8])?.reshape(&[3, 3])
}

pub(crate) fn quat_mul_raw(a: &[Real], b: &[Real]) -> [Real; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

pub(crate) fn rotmat_raw(q: &[Real]) -> [Real; 9] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ]
}
