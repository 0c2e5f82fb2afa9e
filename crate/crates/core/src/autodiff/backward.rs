use super::graph::{IndexMap, Node, Op};
use super::ops::quat_mul_raw;
use super::{axis_view, Real};

fn acc<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<Real>>],
    id: usize,
) -> Option<&'a mut Vec<Real>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]))
}

#[inline]
fn at(map: &IndexMap, i: usize) -> usize {
    match map {
        None => i,
        Some(m) => m[i] as usize,
    }
}

/// Accumulates the contributions of node `id` (with output gradient `g`) into
/// the gradients of its inputs.
pub(crate) fn backward_node(
    nodes: &[Node],
    id: usize,
    g: &[Real],
    grads: &mut [Option<Vec<Real>>],
) {
    let node = &nodes[id];
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b, ma, mb) | Op::Sub(a, b, ma, mb) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if let Some(ga) = acc(nodes, grads, *a) {
                for (i, gi) in g.iter().enumerate() {
                    ga[at(ma, i)] += gi;
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for (i, gi) in g.iter().enumerate() {
                    gb[at(mb, i)] += sign * gi;
                }
            }
        }
        Op::Mul(a, b, ma, mb) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            if let Some(ga) = acc(nodes, grads, *a) {
                for (i, gi) in g.iter().enumerate() {
                    ga[at(ma, i)] += gi * vb[at(mb, i)];
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for (i, gi) in g.iter().enumerate() {
                    gb[at(mb, i)] += gi * va[at(ma, i)];
                }
            }
        }
        Op::Div(a, b, ma, mb) => {
            let vb = &nodes[*b].value;
            if let Some(ga) = acc(nodes, grads, *a) {
                for (i, gi) in g.iter().enumerate() {
                    ga[at(ma, i)] += gi / vb[at(mb, i)];
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for (i, gi) in g.iter().enumerate() {
                    gb[at(mb, i)] -= gi * out[i] / vb[at(mb, i)];
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, gi)| *x += c * gi);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi);
            }
        }
        Op::MatMul(a, b) => {
            let sb = &nodes[*b].shape;
            let (k, n) = (sb[0], sb[1]);
            let rows = g.len() / n.max(1);
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            if let Some(ga) = acc(nodes, grads, *a) {
                crate::par::for_each_chunk_mut(ga, k, |r, row| {
                    let gr = &g[r * n..(r + 1) * n];
                    for (kk, o) in row.iter_mut().enumerate() {
                        let br = &vb[kk * n..(kk + 1) * n];
                        *o += gr.iter().zip(br).map(|(x, y)| x * y).sum::<Real>();
                    }
                });
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for r in 0..rows {
                    let gr = &g[r * n..(r + 1) * n];
                    for kk in 0..k {
                        let x = va[r * k + kk];
                        if x == 0.0 {
                            continue;
                        }
                        for (o, gi) in gb[kk * n..(kk + 1) * n].iter_mut().zip(gr) {
                            *o += x * gi;
                        }
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, _, inner) = axis_view(&node.shape, *axis);
            let total = node.shape[*axis] * inner;
            let mut offset = 0;
            for &inp in inputs {
                let w = nodes[inp].shape[*axis] * inner;
                if let Some(gi) = acc(nodes, grads, inp) {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + w];
                        for (x, s) in gi[o * w..(o + 1) * w].iter_mut().zip(src) {
                            *x += s;
                        }
                    }
                }
                offset += w;
            }
        }
        Op::Slice { a, axis, start } => {
            let (outer, n, inner) = axis_view(&nodes[*a].shape, *axis);
            let len = node.shape[*axis];
            if let Some(ga) = acc(nodes, grads, *a) {
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    for (x, s) in ga[dst..dst + len * inner].iter_mut().zip(src) {
                        *x += s;
                    }
                }
            }
        }
        Op::ReduceSum { a, axis } => {
            let (outer, n, inner) = axis_view(&nodes[*a].shape, *axis);
            if let Some(ga) = acc(nodes, grads, *a) {
                for o in 0..outer {
                    for k in 0..n {
                        let base = (o * n + k) * inner;
                        for i in 0..inner {
                            ga[base + i] += g[o * inner + i];
                        }
                    }
                }
            }
        }
        Op::ReduceMax { a, axis, argmax } => {
            let (outer, n, inner) = axis_view(&nodes[*a].shape, *axis);
            if let Some(ga) = acc(nodes, grads, *a) {
                for o in 0..outer {
                    for i in 0..inner {
                        let k = argmax[o * inner + i] as usize;
                        ga[(o * n + k) * inner + i] += g[o * inner + i];
                    }
                }
            }
        }
        Op::Softmax { a, axis } => {
            let (outer, n, inner) = axis_view(&node.shape, *axis);
            if let Some(ga) = acc(nodes, grads, *a) {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let dot: Real = (0..n).map(|k| g[idx(k)] * out[idx(k)]).sum();
                        for k in 0..n {
                            ga[idx(k)] += out[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
            }
        }
        Op::LeakyRelu(a, slope) => {
            let va = &nodes[*a].value;
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += if va[i] > 0.0 { g[i] } else { slope * g[i] };
                }
            }
        }
        Op::Exp(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * out[i];
                }
            }
        }
        Op::Log(a) => {
            let va = &nodes[*a].value;
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] / va[i];
                }
            }
        }
        Op::Sqrt(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    if out[i] > 0.0 {
                        ga[i] += g[i] / (2.0 * out[i]);
                    }
                }
            }
        }
        Op::ClampMin(a, c) => {
            let va = &nodes[*a].value;
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    if va[i] > *c {
                        ga[i] += g[i];
                    }
                }
            }
        }
        Op::Abs(a) => {
            let va = &nodes[*a].value;
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    let s = if va[i] > 0.0 {
                        1.0
                    } else if va[i] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    ga[i] += s * g[i];
                }
            }
        }
        Op::NormL2 { a, axis } => {
            let (outer, n, inner) = axis_view(&nodes[*a].shape, *axis);
            let va = &nodes[*a].value;
            if let Some(ga) = acc(nodes, grads, *a) {
                for o in 0..outer {
                    for i in 0..inner {
                        let nrm = out[o * inner + i];
                        if nrm == 0.0 {
                            continue;
                        }
                        let gi = g[o * inner + i];
                        for k in 0..n {
                            let j = (o * n + k) * inner + i;
                            ga[j] += gi * va[j] / nrm;
                        }
                    }
                }
            }
        }
        Op::Gather { a, idx } => {
            let w = g.len() / idx.len().max(1);
            if let Some(ga) = acc(nodes, grads, *a) {
                for (l, &r) in idx.iter().enumerate() {
                    for (x, s) in ga[r * w..(r + 1) * w].iter_mut().zip(&g[l * w..(l + 1) * w]) {
                        *x += s;
                    }
                }
            }
        }
        Op::ScatterAdd { a, idx } => {
            let w = nodes[*a].value.len() / idx.len().max(1);
            if let Some(ga) = acc(nodes, grads, *a) {
                for (l, &r) in idx.iter().enumerate() {
                    for (x, s) in ga[l * w..(l + 1) * w].iter_mut().zip(&g[r * w..(r + 1) * w]) {
                        *x += s;
                    }
                }
            }
        }
        Op::Conv2d { x, w } => conv2d_backward(nodes, *x, *w, g, grads),
        Op::MaxPool2d { x, argmax } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for (o, &i) in argmax.iter().enumerate() {
                    gx[i as usize] += g[o];
                }
            }
        }
        Op::Dropout { a, mask } => {
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * mask[i];
                }
            }
        }
        Op::QuatMul(a, b) => {
            let (va, vb) = (nodes[*a].value.clone(), nodes[*b].value.clone());
            let conj = |q: &[Real]| [q[0], -q[1], -q[2], -q[3]];
            if let Some(ga) = acc(nodes, grads, *a) {
                let d = quat_mul_raw(g, &conj(&vb));
                ga.iter_mut().zip(d).for_each(|(x, s)| *x += s);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                let d = quat_mul_raw(&conj(&va), g);
                gb.iter_mut().zip(d).for_each(|(x, s)| *x += s);
            }
        }
        Op::QuatToRotmat(a) => {
            let q = &nodes[*a].value;
            let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
            // Rows: dR_ij / d(w, x, y, z).
            let j: [[Real; 4]; 9] = [
                [0.0, 0.0, -4.0 * y, -4.0 * z],
                [-2.0 * z, 2.0 * y, 2.0 * x, -2.0 * w],
                [2.0 * y, 2.0 * z, 2.0 * w, 2.0 * x],
                [2.0 * z, 2.0 * y, 2.0 * x, 2.0 * w],
                [0.0, -4.0 * x, 0.0, -4.0 * z],
                [-2.0 * x, -2.0 * w, 2.0 * z, 2.0 * y],
                [-2.0 * y, 2.0 * z, -2.0 * w, 2.0 * x],
                [2.0 * x, 2.0 * w, 2.0 * z, 2.0 * y],
                [0.0, -4.0 * x, -4.0 * y, 0.0],
            ];
            if let Some(ga) = acc(nodes, grads, *a) {
                for (e, row) in j.iter().enumerate() {
                    for c in 0..4 {
                        ga[c] += g[e] * row[c];
                    }
                }
            }
        }
    }
}

fn conv2d_backward(
    nodes: &[Node],
    x: usize,
    w: usize,
    g: &[Real],
    grads: &mut [Option<Vec<Real>>],
) {
    let sx = &nodes[x].shape;
    let sw = &nodes[w].shape;
    let (h, wd, cin, cout) = (sx[0], sx[1], sx[2], sw[3]);
    let (vx, vw) = (&nodes[x].value, &nodes[w].value);
    let clamp = |y: usize, dy: usize, n: usize| (y + dy).saturating_sub(1).min(n - 1);
    if let Some(gw) = acc(nodes, grads, w) {
        for y in 0..h {
            for xx in 0..wd {
                let go = &g[(y * wd + xx) * cout..(y * wd + xx + 1) * cout];
                for dy in 0..3 {
                    let iy = clamp(y, dy, h);
                    for dx in 0..3 {
                        let ix = clamp(xx, dx, wd);
                        let xin = &vx[(iy * wd + ix) * cin..(iy * wd + ix + 1) * cin];
                        let kb = (dy * 3 + dx) * cin * cout;
                        for (ci, &xv) in xin.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let row = &mut gw[kb + ci * cout..kb + (ci + 1) * cout];
                            for (o, gi) in row.iter_mut().zip(go) {
                                *o += xv * gi;
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(gx) = acc(nodes, grads, x) {
        for y in 0..h {
            for xx in 0..wd {
                let go = &g[(y * wd + xx) * cout..(y * wd + xx + 1) * cout];
                for dy in 0..3 {
                    let iy = clamp(y, dy, h);
                    for dx in 0..3 {
                        let ix = clamp(xx, dx, wd);
                        let kb = (dy * 3 + dx) * cin * cout;
                        let dst = &mut gx[(iy * wd + ix) * cin..(iy * wd + ix + 1) * cin];
                        for (ci, d) in dst.iter_mut().enumerate() {
                            let kr = &vw[kb + ci * cout..kb + (ci + 1) * cout];
                            *d += kr.iter().zip(go).map(|(a, b)| a * b).sum::<Real>();
                        }
                    }
                }
            }
        }
    }
}
