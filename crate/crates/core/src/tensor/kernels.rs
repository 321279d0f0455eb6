use super::{Op, Result, TensorError};

fn mismatch(op: &Op, shapes: &[&[usize]]) -> TensorError {
    TensorError::ShapeMismatch {
        op: op.name(),
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

fn contract(op: &Op, detail: impl Into<String>) -> TensorError {
    TensorError::Contract {
        op: op.name(),
        detail: detail.into(),
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits a shape around `axis` into (outer, axis length, inner) strides.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn removed_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != axis)
        .map(|(_, d)| *d)
        .collect();
    if out.is_empty() {
        out.push(1);
    }
    out
}

#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    Row { cols: usize },
    Col { cols: usize },
}

fn broadcast_kind(op: &Op, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    if a.len() == 2 {
        let (m, n) = (a[0], a[1]);
        if (b.len() == 1 && b[0] == n) || (b.len() == 2 && b[0] == 1 && b[1] == n) {
            return Ok(Broadcast::Row { cols: n });
        }
        if b.len() == 2 && b[0] == m && b[1] == 1 {
            return Ok(Broadcast::Col { cols: n });
        }
    }
    Err(mismatch(op, &[a, b]))
}

fn broadcast_index(kind: Broadcast, i: usize) -> usize {
    match kind {
        Broadcast::Same => i,
        Broadcast::Row { cols } => i % cols,
        Broadcast::Col { cols } => i / cols,
    }
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (o, &bpj) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bpj;
            }
        }
    }
    out
}

/// `a^T b` for `a: [m, k]`, `b: [m, n]` -> `[k, n]`.
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (o, &bij) in out[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o += aip * bij;
            }
        }
    }
    out
}

/// `a b^T` for `a: [m, n]`, `b: [k, n]` -> `[m, k]`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = arow
                .iter()
                .zip(&b[p * n..(p + 1) * n])
                .map(|(x, y)| x * y)
                .sum();
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(super) fn forward(
    op: &Op,
    shapes: &[&[usize]],
    values: &[&[f64]],
) -> Result<(Vec<usize>, Vec<f64>)> {
    let arity = match op {
        Op::Leaf | Op::Constant | Op::OneHotMask { .. } => 0,
        Op::MatMul | Op::Add | Op::Sub | Op::Mul | Op::WeightedSum => 2,
        Op::Concat { .. } => shapes.len().max(1),
        _ => 1,
    };
    if shapes.len() != arity {
        return Err(contract(
            op,
            format!("expected {arity} inputs, got {}", shapes.len()),
        ));
    }
    match op {
        Op::Leaf | Op::Constant => unreachable!("inputs are not applied"),
        Op::MatMul => {
            let (a, b) = (shapes[0], shapes[1]);
            if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
                return Err(mismatch(op, shapes));
            }
            Ok((
                vec![a[0], b[1]],
                matmul(values[0], values[1], a[0], a[1], b[1]),
            ))
        }
        Op::Add | Op::Sub => {
            let kind = broadcast_kind(op, shapes[0], shapes[1])?;
            let sign = if matches!(op, Op::Add) { 1.0 } else { -1.0 };
            let (a, b) = (values[0], values[1]);
            let out = a
                .iter()
                .enumerate()
                .map(|(i, x)| x + sign * b[broadcast_index(kind, i)])
                .collect();
            Ok((shapes[0].to_vec(), out))
        }
        Op::Mul => {
            if shapes[0] != shapes[1] {
                return Err(mismatch(op, shapes));
            }
            Ok((
                shapes[0].to_vec(),
                values[0]
                    .iter()
                    .zip(values[1])
                    .map(|(a, b)| a * b)
                    .collect(),
            ))
        }
        Op::Scale(c) => Ok((
            shapes[0].to_vec(),
            values[0].iter().map(|x| x * c).collect(),
        )),
        Op::Shift(c) => Ok((
            shapes[0].to_vec(),
            values[0].iter().map(|x| x + c).collect(),
        )),
        Op::Tanh => Ok((
            shapes[0].to_vec(),
            values[0].iter().map(|x| x.tanh()).collect(),
        )),
        Op::Sigmoid => Ok((
            shapes[0].to_vec(),
            values[0].iter().map(|x| sigmoid(*x)).collect(),
        )),
        Op::Exp => Ok((
            shapes[0].to_vec(),
            values[0].iter().map(|x| x.exp()).collect(),
        )),
        Op::Log => {
            if values[0].iter().any(|x| *x <= 0.0) {
                return Err(contract(op, "log of a non-positive value"));
            }
            Ok((
                shapes[0].to_vec(),
                values[0].iter().map(|x| x.ln()).collect(),
            ))
        }
        Op::LogSumExp { axis } => {
            let s = shapes[0];
            if *axis >= s.len() {
                return Err(mismatch(op, shapes));
            }
            let (outer, len, inner) = split_axis(s, *axis);
            let x = values[0];
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| x[(o * len + j) * inner + i];
                    let m = (0..len).map(at).fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = (0..len).map(|j| (at(j) - m).exp()).sum();
                    out[o * inner + i] = m + sum.ln();
                }
            }
            Ok((removed_axis(s, *axis), out))
        }
        Op::Softmax { axis, alpha } => {
            let s = shapes[0];
            if *axis >= s.len() {
                return Err(mismatch(op, shapes));
            }
            if !alpha.is_finite() {
                return Err(contract(op, "inverse temperature must be finite"));
            }
            let (outer, len, inner) = split_axis(s, *axis);
            let x = values[0];
            let mut out = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let m = (0..len)
                        .map(|j| alpha * x[idx(j)])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for j in 0..len {
                        let e = (alpha * x[idx(j)] - m).exp();
                        out[idx(j)] = e;
                        z += e;
                    }
                    for j in 0..len {
                        out[idx(j)] /= z;
                    }
                }
            }
            Ok((s.to_vec(), out))
        }
        Op::SqDiffConst { centers } => {
            if centers.is_empty() || centers.iter().any(|c| !c.is_finite()) {
                return Err(contract(op, "centres must be non-empty and finite"));
            }
            let x = values[0];
            let mut out = Vec::with_capacity(centers.len() * x.len());
            for c in centers {
                out.extend(x.iter().map(|v| (v - c) * (v - c)));
            }
            Ok((vec![centers.len(), x.len()], out))
        }
        Op::Concat { axis } => {
            let first = shapes[0];
            if *axis >= first.len() {
                return Err(mismatch(op, shapes));
            }
            let mut total = 0;
            for s in shapes {
                if s.len() != first.len()
                    || s.iter()
                        .enumerate()
                        .any(|(i, d)| i != *axis && *d != first[i])
                {
                    return Err(mismatch(op, shapes));
                }
                total += s[*axis];
            }
            let (outer, _, inner) = split_axis(first, *axis);
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for (s, v) in shapes.iter().zip(values) {
                    let chunk = s[*axis] * inner;
                    out.extend_from_slice(&v[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = first.to_vec();
            shape[*axis] = total;
            Ok((shape, out))
        }
        Op::Slice { axis, start, len } => {
            let s = shapes[0];
            if *axis >= s.len() || *len == 0 || start + len > s[*axis] {
                return Err(mismatch(op, shapes));
            }
            let (outer, alen, inner) = split_axis(s, *axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * alen + start) * inner;
                out.extend_from_slice(&values[0][base..base + len * inner]);
            }
            let mut shape = s.to_vec();
            shape[*axis] = *len;
            Ok((shape, out))
        }
        Op::RowSelect { rows } => {
            let s = shapes[0];
            if rows.is_empty() {
                return Err(contract(op, "empty row list"));
            }
            if let Some(r) = rows.iter().find(|r| **r >= s[0]) {
                return Err(contract(
                    op,
                    format!("row {r} out of range for {} rows", s[0]),
                ));
            }
            let width = numel(&s[1..]);
            let mut out = Vec::with_capacity(rows.len() * width);
            for r in rows {
                out.extend_from_slice(&values[0][r * width..(r + 1) * width]);
            }
            let mut shape = s.to_vec();
            shape[0] = rows.len();
            Ok((shape, out))
        }
        Op::WeightedSum => {
            let (w, x) = (shapes[0], shapes[1]);
            if w.len() != 1 || x.len() < 2 || x[0] != w[0] {
                return Err(mismatch(op, shapes));
            }
            let width = numel(&x[1..]);
            let mut out = vec![0.0; width];
            for (i, wi) in values[0].iter().enumerate() {
                for (o, xv) in out.iter_mut().zip(&values[1][i * width..(i + 1) * width]) {
                    *o += wi * xv;
                }
            }
            Ok((x[1..].to_vec(), out))
        }
        Op::Sum => Ok((vec![1], vec![values[0].iter().sum()])),
        Op::Mean => Ok((
            vec![1],
            vec![values[0].iter().sum::<f64>() / values[0].len() as f64],
        )),
        Op::SumAxis { axis } => {
            let s = shapes[0];
            if *axis >= s.len() {
                return Err(mismatch(op, shapes));
            }
            let (outer, len, inner) = split_axis(s, *axis);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..len {
                    let src = &values[0][(o * len + j) * inner..(o * len + j + 1) * inner];
                    for (d, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
            Ok((removed_axis(s, *axis), out))
        }
        Op::Reshape { shape } => {
            if shape.is_empty() || shape.contains(&0) || numel(shape) != numel(shapes[0]) {
                return Err(mismatch(op, &[shapes[0], shape]));
            }
            Ok((shape.clone(), values[0].to_vec()))
        }
        Op::Transpose => {
            let s = shapes[0];
            if s.len() != 2 {
                return Err(mismatch(op, shapes));
            }
            let (m, n) = (s[0], s[1]);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = values[0][i * n + j];
                }
            }
            Ok((vec![n, m], out))
        }
        Op::Gather { indices } => {
            let n = values[0].len();
            if indices.is_empty() || indices.iter().any(|i| *i >= n) {
                return Err(contract(
                    op,
                    format!("indices {indices:?} invalid for {n} entries"),
                ));
            }
            Ok((
                vec![indices.len()],
                indices.iter().map(|i| values[0][*i]).collect(),
            ))
        }
        Op::OneHotMask { ids, depth } => {
            if ids.is_empty() || *depth == 0 {
                return Err(contract(op, "empty mask"));
            }
            let mut out = vec![0.0; ids.len() * depth];
            for (r, id) in ids.iter().enumerate() {
                if id < depth {
                    out[r * depth + id] = 1.0;
                }
            }
            Ok((vec![ids.len(), *depth], out))
        }
    }
}

/// Vector-Jacobian products. `g` is the gradient of the output; returns one
/// optional gradient per input (None where `needs` is false).
pub(super) fn backward(
    op: &Op,
    shapes: &[&[usize]],
    values: &[&[f64]],
    out: &[f64],
    g: &[f64],
    needs: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let unary = |f: &dyn Fn(usize) -> f64| vec![Some((0..g.len()).map(f).collect())];
    match op {
        Op::Leaf | Op::Constant | Op::OneHotMask { .. } => vec![None; shapes.len()],
        Op::MatMul => {
            let (a, b) = (shapes[0], shapes[1]);
            let (m, k, n) = (a[0], a[1], b[1]);
            let ga = needs[0].then(|| matmul_nt(g, values[1], m, n, k));
            let gb = needs[1].then(|| matmul_tn(values[0], g, m, k, n));
            vec![ga, gb]
        }
        Op::Add | Op::Sub => {
            let kind = broadcast_kind(op, shapes[0], shapes[1]).expect("checked in forward");
            let sign = if matches!(op, Op::Add) { 1.0 } else { -1.0 };
            let ga = needs[0].then(|| g.to_vec());
            let gb = needs[1].then(|| {
                let mut gb = vec![0.0; values[1].len()];
                for (i, gi) in g.iter().enumerate() {
                    gb[broadcast_index(kind, i)] += sign * gi;
                }
                gb
            });
            vec![ga, gb]
        }
        Op::Mul => {
            let ga = needs[0].then(|| g.iter().zip(values[1]).map(|(g, b)| g * b).collect());
            let gb = needs[1].then(|| g.iter().zip(values[0]).map(|(g, a)| g * a).collect());
            vec![ga, gb]
        }
        Op::Scale(c) => unary(&|i| g[i] * c),
        Op::Shift(_) => vec![Some(g.to_vec())],
        Op::Tanh => unary(&|i| g[i] * (1.0 - out[i] * out[i])),
        Op::Sigmoid => unary(&|i| g[i] * out[i] * (1.0 - out[i])),
        Op::Exp => unary(&|i| g[i] * out[i]),
        Op::Log => unary(&|i| g[i] / values[0][i]),
        Op::LogSumExp { axis } => {
            let (outer, len, inner) = split_axis(shapes[0], *axis);
            let x = values[0];
            let mut gx = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let (go, lse) = (g[o * inner + i], out[o * inner + i]);
                    for j in 0..len {
                        let idx = (o * len + j) * inner + i;
                        gx[idx] = go * (x[idx] - lse).exp();
                    }
                }
            }
            vec![Some(gx)]
        }
        Op::Softmax { axis, alpha } => {
            let (outer, len, inner) = split_axis(shapes[0], *axis);
            let mut gx = vec![0.0; out.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let dot: f64 = (0..len).map(|j| g[idx(j)] * out[idx(j)]).sum();
                    for j in 0..len {
                        gx[idx(j)] = alpha * out[idx(j)] * (g[idx(j)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }
        Op::SqDiffConst { centers } => {
            let x = values[0];
            let n = x.len();
            let mut gx = vec![0.0; n];
            for (k, c) in centers.iter().enumerate() {
                for j in 0..n {
                    gx[j] += g[k * n + j] * 2.0 * (x[j] - c);
                }
            }
            vec![Some(gx)]
        }
        Op::Concat { axis } => {
            let total: usize = shapes.iter().map(|s| s[*axis]).sum();
            let (outer, _, inner) = split_axis(shapes[0], *axis);
            let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(shapes.len());
            let mut offset = 0;
            for (s, need) in shapes.iter().zip(needs) {
                let chunk = s[*axis] * inner;
                if *need {
                    let mut gi = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        let base = o * total * inner + offset;
                        gi.extend_from_slice(&g[base..base + chunk]);
                    }
                    grads.push(Some(gi));
                } else {
                    grads.push(None);
                }
                offset += chunk;
            }
            grads
        }
        Op::Slice { axis, start, len } => {
            let (outer, alen, inner) = split_axis(shapes[0], *axis);
            let mut gx = vec![0.0; values[0].len()];
            for o in 0..outer {
                let base = (o * alen + start) * inner;
                gx[base..base + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }
        Op::RowSelect { rows } => {
            let width = numel(&shapes[0][1..]);
            let mut gx = vec![0.0; values[0].len()];
            for (k, r) in rows.iter().enumerate() {
                for (d, s) in gx[r * width..(r + 1) * width]
                    .iter_mut()
                    .zip(&g[k * width..(k + 1) * width])
                {
                    *d += s;
                }
            }
            vec![Some(gx)]
        }
        Op::WeightedSum => {
            let width = g.len();
            let (w, x) = (values[0], values[1]);
            let gw = needs[0].then(|| {
                (0..w.len())
                    .map(|i| {
                        x[i * width..(i + 1) * width]
                            .iter()
                            .zip(g)
                            .map(|(a, b)| a * b)
                            .sum()
                    })
                    .collect()
            });
            let gx = needs[1].then(|| {
                let mut gx = vec![0.0; x.len()];
                for (i, wi) in w.iter().enumerate() {
                    for (d, gj) in gx[i * width..(i + 1) * width].iter_mut().zip(g) {
                        *d = wi * gj;
                    }
                }
                gx
            });
            vec![gw, gx]
        }
        Op::Sum => vec![Some(vec![g[0]; values[0].len()])],
        Op::Mean => {
            let n = values[0].len();
            vec![Some(vec![g[0] / n as f64; n])]
        }
        Op::SumAxis { axis } => {
            let (outer, len, inner) = split_axis(shapes[0], *axis);
            let mut gx = vec![0.0; values[0].len()];
            for o in 0..outer {
                for j in 0..len {
                    let base = (o * len + j) * inner;
                    gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        }
        Op::Reshape { .. } => vec![Some(g.to_vec())],
        Op::Transpose => {
            let (m, n) = (shapes[0][0], shapes[0][1]);
            let mut gx = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    gx[i * n + j] = g[j * m + i];
                }
            }
            vec![Some(gx)]
        }
        Op::Gather { indices } => {
            let mut gx = vec![0.0; values[0].len()];
            for (k, i) in indices.iter().enumerate() {
                gx[*i] += g[k];
            }
            vec![Some(gx)]
        }
    }
}
