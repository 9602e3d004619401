//! Define-by-run reverse-mode differentiation.
//!
//! Every op is a method on [`Tape`]. A recording tape pushes one node per op
//! with a closure implementing the backward rule; `Tape::no_grad()` runs the
//! same code paths without recording. Tapes are rebuilt per forward pass,
//! which is what lets the chunked training step re-encode slices of a batch
//! while holding the rest constant.
//!
//! `backward` computes per-call gradients into a scratch map and then adds
//! them into each tensor's persistent `grad` buffer, so calling it twice
//! doubles the stored gradients.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};

use super::tensor::Tensor;

const GELU_COEF: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_CUBIC: f32 = 0.044_715;

type BackwardFn = Box<dyn Fn(&[f32], &mut GradMap)>;

struct Node {
    out_id: u64,
    backward: BackwardFn,
}

/// Per-backward-call gradient scratch space, keyed by tensor id.
#[derive(Default)]
pub(crate) struct GradMap {
    m: HashMap<u64, Vec<f32>>,
}

impl GradMap {
    fn buf(&mut self, id: u64, numel: usize) -> &mut [f32] {
        self.m.entry(id).or_insert_with(|| vec![0.0; numel])
    }

    fn get(&self, id: u64) -> Option<&Vec<f32>> {
        self.m.get(&id)
    }
}

pub struct Tape {
    recording: bool,
    nodes: RefCell<Vec<Node>>,
    out_ids: RefCell<HashSet<u64>>,
    tracked: RefCell<Vec<Tensor>>,
    tracked_ids: RefCell<HashSet<u64>>,
}

impl Tape {
    /// A recording tape: ops whose inputs carry gradients get nodes.
    pub fn new() -> Self {
        Tape {
            recording: true,
            nodes: RefCell::new(Vec::new()),
            out_ids: RefCell::new(HashSet::new()),
            tracked: RefCell::new(Vec::new()),
            tracked_ids: RefCell::new(HashSet::new()),
        }
    }

    /// A non-recording tape: same ops, no graph, outputs never require grad.
    pub fn no_grad() -> Self {
        let mut t = Tape::new();
        t.recording = false;
        t
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded nodes. One node holds one op's live activations,
    /// so this is the instrumentation the memory-bound tests assert on.
    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn wants_grad(&self, inputs: &[&Tensor]) -> bool {
        self.recording && inputs.iter().any(|t| t.requires_grad())
    }

    /// Allocate an op output, enforcing the everything-finite invariant.
    fn fresh(&self, op: &'static str, data: Vec<f32>, shape: Vec<usize>, inputs: &[&Tensor]) -> Result<Tensor> {
        let out = Tensor::build(data, shape, self.wants_grad(inputs));
        if !out.all_finite() {
            return Err(Error::NonFinite { op });
        }
        Ok(out)
    }

    fn record(&self, inputs: &[&Tensor], out: &Tensor, backward: BackwardFn) {
        let mut tracked = self.tracked.borrow_mut();
        let mut ids = self.tracked_ids.borrow_mut();
        for t in inputs.iter().filter(|t| t.requires_grad()).chain(std::iter::once(&out)) {
            if ids.insert(t.id()) {
                tracked.push((*t).clone());
            }
        }
        self.out_ids.borrow_mut().insert(out.id());
        self.nodes.borrow_mut().push(Node { out_id: out.id(), backward });
    }

    /// Reverse sweep from a scalar loss. Gradients ACCUMULATE into each
    /// reachable requires-grad tensor; zero them explicitly between steps.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got shape {:?}", loss.shape())));
        }
        if !self.out_ids.borrow().contains(&loss.id()) {
            return Err(Error::InvalidArgument("loss was not produced on this tape".into()));
        }
        let mut grads = GradMap::default();
        grads.buf(loss.id(), 1)[0] = 1.0;
        {
            let nodes = self.nodes.borrow();
            for node in nodes.iter().rev() {
                let d_out = match grads.get(node.out_id) {
                    Some(d) => d.clone(),
                    None => continue,
                };
                (node.backward)(&d_out, &mut grads);
            }
        }
        for t in self.tracked.borrow().iter() {
            if let Some(g) = grads.get(t.id()) {
                t.accumulate_grad(g);
            }
        }
        Ok(())
    }

    // ── Elementwise and shape ops ───────────────────────────────────────

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let data: Vec<f32> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
        let out = self.fresh("add", data, a.shape(), &[a, b])?;
        if out.requires_grad() {
            let (a2, b2) = (a.clone(), b.clone());
            self.record(&[a, b], &out, Box::new(move |d, g| {
                for t in [&a2, &b2] {
                    if t.requires_grad() {
                        let buf = g.buf(t.id(), d.len());
                        for (o, v) in buf.iter_mut().zip(d) {
                            *o += v;
                        }
                    }
                }
            }));
        }
        Ok(out)
    }

    pub fn scale(&self, x: &Tensor, factor: f32) -> Result<Tensor> {
        let data: Vec<f32> = x.data().iter().map(|v| v * factor).collect();
        let out = self.fresh("scale", data, x.shape(), &[x])?;
        if out.requires_grad() {
            let x2 = x.clone();
            self.record(&[x], &out, Box::new(move |d, g| {
                let buf = g.buf(x2.id(), d.len());
                for (o, v) in buf.iter_mut().zip(d) {
                    *o += v * factor;
                }
            }));
        }
        Ok(out)
    }

    pub fn exp(&self, x: &Tensor) -> Result<Tensor> {
        let data: Vec<f32> = x.data().iter().map(|v| v.exp()).collect();
        let out = self.fresh("exp", data, x.shape(), &[x])?;
        if out.requires_grad() {
            let (x2, o2) = (x.clone(), out.clone());
            self.record(&[x], &out, Box::new(move |d, g| {
                let ov = o2.data();
                let buf = g.buf(x2.id(), d.len());
                for i in 0..d.len() {
                    buf[i] += d[i] * ov[i];
                }
            }));
        }
        Ok(out)
    }

    pub fn gelu(&self, x: &Tensor) -> Result<Tensor> {
        let data: Vec<f32> = x.data().iter().map(|&v| gelu_val(v)).collect();
        let out = self.fresh("gelu", data, x.shape(), &[x])?;
        if out.requires_grad() {
            let x2 = x.clone();
            self.record(&[x], &out, Box::new(move |d, g| {
                let xv = x2.data();
                let buf = g.buf(x2.id(), d.len());
                for i in 0..d.len() {
                    buf[i] += d[i] * gelu_grad(xv[i]);
                }
            }));
        }
        Ok(out)
    }

    /// Same data, new shape. Element count must match.
    pub fn reshape(&self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", x.shape(), shape)));
        }
        let out = self.fresh("reshape", x.to_vec(), shape.to_vec(), &[x])?;
        if out.requires_grad() {
            let x2 = x.clone();
            self.record(&[x], &out, Box::new(move |d, g| {
                let buf = g.buf(x2.id(), d.len());
                for (o, v) in buf.iter_mut().zip(d) {
                    *o += v;
                }
            }));
        }
        Ok(out)
    }

    pub fn sum_all(&self, x: &Tensor) -> Result<Tensor> {
        let total: f32 = x.data().iter().sum();
        let out = self.fresh("sum_all", vec![total], vec![1], &[x])?;
        if out.requires_grad() {
            let x2 = x.clone();
            let n = x.numel();
            self.record(&[x], &out, Box::new(move |d, g| {
                let buf = g.buf(x2.id(), n);
                for o in buf.iter_mut() {
                    *o += d[0];
                }
            }));
        }
        Ok(out)
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    /// `a[m,k] · b[k,n] -> [m,n]`.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(&a.data(), &b.data(), m, k, n);
        let out = self.fresh("matmul", data, vec![m, n], &[a, b])?;
        if out.requires_grad() {
            let (a2, b2) = (a.clone(), b.clone());
            self.record(&[a, b], &out, Box::new(move |d, g| {
                if a2.requires_grad() {
                    // dA = dC · B^T
                    let bt = transpose_raw(&b2.data(), k, n);
                    let da = matmul_raw(d, &bt, m, n, k);
                    add_into(g.buf(a2.id(), m * k), &da);
                }
                if b2.requires_grad() {
                    // dB = A^T · dC
                    let at = transpose_raw(&a2.data(), m, k);
                    let db = matmul_raw(&at, d, k, m, n);
                    add_into(g.buf(b2.id(), k * n), &db);
                }
            }));
        }
        Ok(out)
    }

    pub fn transpose2d(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("expected 2-d, got {:?}", s)));
        }
        let (m, n) = (s[0], s[1]);
        let data = transpose_raw(&x.data(), m, n);
        let out = self.fresh("transpose", data, vec![n, m], &[x])?;
        if out.requires_grad() {
            let x2 = x.clone();
            self.record(&[x], &out, Box::new(move |d, g| {
                let dt = transpose_raw(d, n, m);
                add_into(g.buf(x2.id(), m * n), &dt);
            }));
        }
        Ok(out)
    }

    /// Batched `a[b,m,k] · c[b,k,n] -> [b,m,n]`.
    pub fn bmm(&self, a: &Tensor, c: &Tensor) -> Result<Tensor> {
        let (sa, sc) = (a.shape(), c.shape());
        if sa.len() != 3 || sc.len() != 3 || sa[0] != sc[0] || sa[2] != sc[1] {
            return Err(Error::shape("bmm", format!("{:?} x {:?}", sa, sc)));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sc[2]);
        let mut data = vec![0.0f32; bs * m * n];
        {
            let av = a.data();
            let cv = c.data();
            for i in 0..bs {
                let o = matmul_raw(&av[i * m * k..(i + 1) * m * k], &cv[i * k * n..(i + 1) * k * n], m, k, n);
                data[i * m * n..(i + 1) * m * n].copy_from_slice(&o);
            }
        }
        let out = self.fresh("bmm", data, vec![bs, m, n], &[a, c])?;
        if out.requires_grad() {
            let (a2, c2) = (a.clone(), c.clone());
            self.record(&[a, c], &out, Box::new(move |d, g| {
                if a2.requires_grad() {
                    let cv = c2.data();
                    let buf = g.buf(a2.id(), bs * m * k);
                    for i in 0..bs {
                        let ct = transpose_raw(&cv[i * k * n..(i + 1) * k * n], k, n);
                        let da = matmul_raw(&d[i * m * n..(i + 1) * m * n], &ct, m, n, k);
                        add_into(&mut buf[i * m * k..(i + 1) * m * k], &da);
                    }
                }
                if c2.requires_grad() {
                    let av = a2.data();
                    let buf = g.buf(c2.id(), bs * k * n);
                    for i in 0..bs {
                        let at = transpose_raw(&av[i * m * k..(i + 1) * m * k], m, k);
                        let dc = matmul_raw(&at, &d[i * m * n..(i + 1) * m * n], k, m, n);
                        add_into(&mut buf[i * k * n..(i + 1) * k * n], &dc);
                    }
                }
            }));
        }
        Ok(out)
    }

    /// Batched `a[b,m,k] · c[b,n,k]^T -> [b,m,n]` (attention scores).
    pub fn bmm_nt(&self, a: &Tensor, c: &Tensor) -> Result<Tensor> {
        let (sa, sc) = (a.shape(), c.shape());
        if sa.len() != 3 || sc.len() != 3 || sa[0] != sc[0] || sa[2] != sc[2] {
            return Err(Error::shape("bmm_nt", format!("{:?} x {:?}", sa, sc)));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sc[1]);
        let mut data = vec![0.0f32; bs * m * n];
        {
            let av = a.data();
            let cv = c.data();
            for i in 0..bs {
                let ct = transpose_raw(&cv[i * n * k..(i + 1) * n * k], n, k);
                let o = matmul_raw(&av[i * m * k..(i + 1) * m * k], &ct, m, k, n);
                data[i * m * n..(i + 1) * m * n].copy_from_slice(&o);
            }
        }
        let out = self.fresh("bmm_nt", data, vec![bs, m, n], &[a, c])?;
        if out.requires_grad() {
            let (a2, c2) = (a.clone(), c.clone());
            self.record(&[a, c], &out, Box::new(move |d, g| {
                if a2.requires_grad() {
                    // dA_i = dO_i · C_i
                    let cv = c2.data();
                    let buf = g.buf(a2.id(), bs * m * k);
                    for i in 0..bs {
                        let da = matmul_raw(&d[i * m * n..(i + 1) * m * n], &cv[i * n * k..(i + 1) * n * k], m, n, k);
                        add_into(&mut buf[i * m * k..(i + 1) * m * k], &da);
                    }
                }
                if c2.requires_grad() {
                    // dC_i = dO_i^T · A_i
                    let av = a2.data();
                    let buf = g.buf(c2.id(), bs * n * k);
                    for i in 0..bs {
                        let dt = transpose_raw(&d[i * m * n..(i + 1) * m * n], m, n);
                        let dc = matmul_raw(&dt, &av[i * m * k..(i + 1) * m * k], n, m, k);
                        add_into(&mut buf[i * n * k..(i + 1) * n * k], &dc);
                    }
                }
            }));
        }
        Ok(out)
    }

    // ── Broadcast helpers ───────────────────────────────────────────────

    /// Add `bias[n]` to every length-`n` row of `x[..., n]`.
    pub fn add_bias(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let sx = x.shape();
        let n = *sx.last().ok_or_else(|| Error::shape("add_bias", "0-d input"))?;
        if bias.shape() != vec![n] {
            return Err(Error::shape("add_bias", format!("bias {:?} vs rows of {:?}", bias.shape(), sx)));
        }
        let rows = x.numel() / n;
        let mut data = x.to_vec();
        {
            let bv = bias.data();
            for r in 0..rows {
                for j in 0..n {
                    data[r * n + j] += bv[j];
                }
            }
        }
        let out = self.fresh("add_bias", data, sx, &[x, bias])?;
        if out.requires_grad() {
            let (x2, b2) = (x.clone(), bias.clone());
            self.record(&[x, bias], &out, Box::new(move |d, g| {
                if x2.requires_grad() {
                    add_into(g.buf(x2.id(), d.len()), d);
                }
                if b2.requires_grad() {
                    let buf = g.buf(b2.id(), n);
                    for r in 0..rows {
                        for j in 0..n {
                            buf[j] += d[r * n + j];
                        }
                    }
                }
            }));
        }
        Ok(out)
    }

    /// Horizontal slice of the last axis: `x[..., offset..offset+len]`.
    pub fn slice_last(&self, x: &Tensor, offset: usize, len: usize) -> Result<Tensor> {
        let sx = x.shape();
        let n = *sx.last().ok_or_else(|| Error::shape("slice_last", "0-d input"))?;
        if offset + len > n {
            return Err(Error::shape("slice_last", format!("slice {}..{} out of {}", offset, offset + len, n)));
        }
        let rows = x.numel() / n;
        let mut data = Vec::with_capacity(rows * len);
        {
            let xv = x.data();
            for r in 0..rows {
                data.extend_from_slice(&xv[r * n + offset..r * n + offset + len]);
            }
        }
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = len;
        let out = self.fresh("slice_last", data, shape, &[x])?;
        if out.requires_grad() {
            let x2 = x.clone();
            self.record(&[x], &out, Box::new(move |d, g| {
                let buf = g.buf(x2.id(), rows * n);
                for r in 0..rows {
                    for j in 0..len {
                        buf[r * n + offset + j] += d[r * len + j];
                    }
                }
            }));
        }
        Ok(out)
    }

    /// Concatenate along the last axis; all parts share leading dimensions.
    pub fn concat_last(&self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::shape("concat_last", "no parts"));
        }
        let lead: Vec<usize> = {
            let s = parts[0].shape();
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat_last", format!("leading dims differ: {:?} vs {:?}", lead, s)));
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        {
            let views: Vec<_> = parts.iter().map(|p| p.to_vec()).collect();
            for r in 0..rows {
                for (p, w) in views.iter().zip(&widths) {
                    data.extend_from_slice(&p[r * w..(r + 1) * w]);
                }
            }
        }
        let mut shape = lead.clone();
        shape.push(total);
        let out = self.fresh("concat_last", data, shape, parts)?;
        if out.requires_grad() {
            let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
            let ws = widths.clone();
            self.record(parts, &out, Box::new(move |d, g| {
                for (idx, p) in owned.iter().enumerate() {
                    if !p.requires_grad() {
                        continue;
                    }
                    let w = ws[idx];
                    let before: usize = ws[..idx].iter().sum();
                    let buf = g.buf(p.id(), rows * w);
                    for r in 0..rows {
                        for j in 0..w {
                            buf[r * w + j] += d[r * total + before + j];
                        }
                    }
                }
            }));
        }
        Ok(out)
    }

    /// Copy `base[n,d]` and overwrite rows `offset..offset+c` with `live[c,d]`.
    /// Gradient flows to the live rows (and to the untouched rows of `base`
    /// when it carries gradients). This is the batch-splicing primitive of
    /// the chunked contrastive step.
    pub fn splice_rows(&self, base: &Tensor, live: &Tensor, offset: usize) -> Result<Tensor> {
        let (sb, sl) = (base.shape(), live.shape());
        if sb.len() != 2 || sl.len() != 2 || sb[1] != sl[1] || offset + sl[0] > sb[0] {
            return Err(Error::shape("splice_rows", format!("base {:?}, live {:?}, offset {}", sb, sl, offset)));
        }
        let (n, d, c) = (sb[0], sb[1], sl[0]);
        let mut data = base.to_vec();
        data[offset * d..(offset + c) * d].copy_from_slice(&live.data());
        let out = self.fresh("splice_rows", data, vec![n, d], &[base, live])?;
        if out.requires_grad() {
            let (b2, l2) = (base.clone(), live.clone());
            self.record(&[base, live], &out, Box::new(move |dv, g| {
                if l2.requires_grad() {
                    add_into(g.buf(l2.id(), c * d), &dv[offset * d..(offset + c) * d]);
                }
                if b2.requires_grad() {
                    let buf = g.buf(b2.id(), n * d);
                    for r in 0..n {
                        if r >= offset && r < offset + c {
                            continue;
                        }
                        add_into(&mut buf[r * d..(r + 1) * d], &dv[r * d..(r + 1) * d]);
                    }
                }
            }));
        }
        Ok(out)
    }

    /// Multiply every element by a scalar tensor (the learned logit scale).
    pub fn scale_by(&self, x: &Tensor, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(Error::shape("scale_by", format!("scale must be scalar, got {:?}", s.shape())));
        }
        let sv = s.data()[0];
        let data: Vec<f32> = x.data().iter().map(|v| v * sv).collect();
        let out = self.fresh("scale_by", data, x.shape(), &[x, s])?;
        if out.requires_grad() {
            let (x2, s2) = (x.clone(), s.clone());
            self.record(&[x, s], &out, Box::new(move |d, g| {
                if x2.requires_grad() {
                    let sv = s2.data()[0];
                    let buf = g.buf(x2.id(), d.len());
                    for (o, v) in buf.iter_mut().zip(d) {
                        *o += v * sv;
                    }
                }
                if s2.requires_grad() {
                    let xv = x2.data();
                    let mut acc = 0.0f64;
                    for i in 0..d.len() {
                        acc += d[i] as f64 * xv[i] as f64;
                    }
                    g.buf(s2.id(), 1)[0] += acc as f32;
                }
            }));
        }
        Ok(out)
    }

    // ── Normalization, pooling, softmax, loss ───────────────────────────

    /// Softmax over the last axis, max-subtracted for stability.
    pub fn softmax_rows(&self, x: &Tensor) -> Result<Tensor> {
        let sx = x.shape();
        let n = *sx.last().ok_or_else(|| Error::shape("softmax_rows", "0-d input"))?;
        let rows = x.numel() / n;
        let mut data = vec![0.0f32; rows * n];
        {
            let xv = x.data();
            for r in 0..rows {
                let row = &xv[r * n..(r + 1) * n];
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f32;
                for j in 0..n {
                    let e = (row[j] - max).exp();
                    data[r * n + j] = e;
                    sum += e;
                }
                for j in 0..n {
                    data[r * n + j] /= sum;
                }
            }
        }
        let out = self.fresh("softmax_rows", data, sx, &[x])?;
        if out.requires_grad() {
            let (x2, o2) = (x.clone(), out.clone());
            self.record(&[x], &out, Box::new(move |d, g| {
                let ov = o2.data();
                let buf = g.buf(x2.id(), rows * n);
                for r in 0..rows {
                    let base = r * n;
                    let mut dot = 0.0f32;
                    for j in 0..n {
                        dot += d[base + j] * ov[base + j];
                    }
                    for j in 0..n {
                        buf[base + j] += ov[base + j] * (d[base + j] - dot);
                    }
                }
            }));
        }
        Ok(out)
    }

    /// Per-last-axis layer normalization with affine gain and bias.
    pub fn layer_norm(&self, x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument("layer_norm eps must be > 0".into()));
        }
        let sx = x.shape();
        let d = *sx.last().ok_or_else(|| Error::shape("layer_norm", "0-d input"))?;
        if gain.shape() != vec![d] || bias.shape() != vec![d] {
            return Err(Error::shape("layer_norm", format!("gain/bias must be [{}]", d)));
        }
        let rows = x.numel() / d;
        let mut data = vec![0.0f32; rows * d];
        let mut norm_x = vec![0.0f32; rows * d];
        let mut inv_std = vec![0.0f32; rows];
        {
            let xv = x.data();
            let gv = gain.data();
            let bv = bias.data();
            for r in 0..rows {
                let row = &xv[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f32>() / d as f32;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
                let istd = 1.0 / (var + eps).sqrt();
                inv_std[r] = istd;
                for j in 0..d {
                    let y = (row[j] - mean) * istd;
                    norm_x[r * d + j] = y;
                    data[r * d + j] = gv[j] * y + bv[j];
                }
            }
        }
        let out = self.fresh("layer_norm", data, sx, &[x, gain, bias])?;
        if out.requires_grad() {
            let (x2, g2, b2) = (x.clone(), gain.clone(), bias.clone());
            self.record(&[x, gain, bias], &out, Box::new(move |dv, g| {
                let gv = g2.data();
                if x2.requires_grad() {
                    let buf = g.buf(x2.id(), rows * d);
                    for r in 0..rows {
                        let base = r * d;
                        let istd = inv_std[r];
                        let mut mean_dy = 0.0f32;
                        let mut mean_dyy = 0.0f32;
                        for j in 0..d {
                            let dy = dv[base + j] * gv[j];
                            mean_dy += dy;
                            mean_dyy += dy * norm_x[base + j];
                        }
                        mean_dy /= d as f32;
                        mean_dyy /= d as f32;
                        for j in 0..d {
                            let dy = dv[base + j] * gv[j];
                            buf[base + j] += istd * (dy - mean_dy - norm_x[base + j] * mean_dyy);
                        }
                    }
                }
                if g2.requires_grad() {
                    let buf = g.buf(g2.id(), d);
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += dv[r * d + j] * norm_x[r * d + j];
                        }
                    }
                }
                if b2.requires_grad() {
                    let buf = g.buf(b2.id(), d);
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += dv[r * d + j];
                        }
                    }
                }
            }));
        }
        Ok(out)
    }

    /// `out[i,:] = sum_t mask[i,t] * x[i,t,:]`. Mask entries must be 0/1 and
    /// every row needs at least one kept position.
    pub fn masked_sum(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (sx, sm) = (x.shape(), mask.shape());
        if sx.len() != 3 || sm.len() != 2 || sm[0] != sx[0] || sm[1] != sx[1] {
            return Err(Error::shape("masked_sum", format!("x {:?}, mask {:?}", sx, sm)));
        }
        let (b, t, d) = (sx[0], sx[1], sx[2]);
        let mv = mask.to_vec();
        for (i, v) in mv.iter().enumerate() {
            if *v != 0.0 && *v != 1.0 {
                return Err(Error::InvalidArgument(format!("masked_sum: mask[{}] = {} not in {{0,1}}", i, v)));
            }
        }
        for r in 0..b {
            if mv[r * t..(r + 1) * t].iter().all(|v| *v == 0.0) {
                return Err(Error::degenerate("masked_sum", format!("mask row {} is all zero", r)));
            }
        }
        let mut data = vec![0.0f32; b * d];
        {
            let xv = x.data();
            for i in 0..b {
                for tt in 0..t {
                    if mv[i * t + tt] == 0.0 {
                        continue;
                    }
                    let src = &xv[(i * t + tt) * d..(i * t + tt + 1) * d];
                    add_into(&mut data[i * d..(i + 1) * d], src);
                }
            }
        }
        let out = self.fresh("masked_sum", data, vec![b, d], &[x, mask])?;
        if out.requires_grad() {
            let x2 = x.clone();
            self.record(&[x, mask], &out, Box::new(move |dv, g| {
                if x2.requires_grad() {
                    let buf = g.buf(x2.id(), b * t * d);
                    for i in 0..b {
                        for tt in 0..t {
                            if mv[i * t + tt] == 0.0 {
                                continue;
                            }
                            add_into(&mut buf[(i * t + tt) * d..(i * t + tt + 1) * d], &dv[i * d..(i + 1) * d]);
                        }
                    }
                }
            }));
        }
        Ok(out)
    }

    /// Scale each last-axis row of `x` to unit Euclidean norm. Rows with norm
    /// below `eps` are rejected as degenerate rather than silently zeroed.
    pub fn l2_normalize(&self, x: &Tensor, eps: f32) -> Result<Tensor> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument("l2_normalize eps must be > 0".into()));
        }
        let sx = x.shape();
        let d = *sx.last().ok_or_else(|| Error::shape("l2_normalize", "0-d input"))?;
        let rows = x.numel() / d;
        let mut data = vec![0.0f32; rows * d];
        let mut norms = vec![0.0f32; rows];
        {
            let xv = x.data();
            for r in 0..rows {
                let row = &xv[r * d..(r + 1) * d];
                let norm = row.iter().map(|v| *v as f64 * *v as f64).sum::<f64>().sqrt() as f32;
                if norm < eps {
                    return Err(Error::degenerate("l2_normalize", format!("row {} has norm {:e}", r, norm)));
                }
                norms[r] = norm;
                for j in 0..d {
                    data[r * d + j] = row[j] / norm;
                }
            }
        }
        let out = self.fresh("l2_normalize", data, sx, &[x])?;
        if out.requires_grad() {
            let (x2, o2) = (x.clone(), out.clone());
            self.record(&[x], &out, Box::new(move |dv, g| {
                let ov = o2.data();
                let buf = g.buf(x2.id(), rows * d);
                for r in 0..rows {
                    let base = r * d;
                    let mut dot = 0.0f32;
                    for j in 0..d {
                        dot += dv[base + j] * ov[base + j];
                    }
                    for j in 0..d {
                        buf[base + j] += (dv[base + j] - ov[base + j] * dot) / norms[r];
                    }
                }
            }));
        }
        Ok(out)
    }

    /// Mean over rows of `-log softmax(logits)[i, targets[i]]`.
    pub fn cross_entropy_rows(&self, logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
        let s = logits.shape();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape(
                "cross_entropy_rows",
                format!("logits {:?} vs {} targets", s, targets.len()),
            ));
        }
        let (m, n) = (s[0], s[1]);
        for (i, t) in targets.iter().enumerate() {
            if *t >= n {
                return Err(Error::InvalidArgument(format!("cross_entropy_rows: target[{}]={} out of range {}", i, t, n)));
            }
        }
        // Log-sum-exp in f64 so near-zero losses keep their magnitude.
        let mut total = 0.0f64;
        {
            let lv = logits.data();
            for i in 0..m {
                let row = &lv[i * n..(i + 1) * n];
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                let lse: f64 = row.iter().map(|v| (*v as f64 - max).exp()).sum::<f64>().ln() + max;
                total += lse - row[targets[i]] as f64;
            }
        }
        let loss = (total / m as f64) as f32;
        let out = self.fresh("cross_entropy_rows", vec![loss], vec![1], &[logits])?;
        if out.requires_grad() {
            let l2 = logits.clone();
            let tg = targets.to_vec();
            self.record(&[logits], &out, Box::new(move |d, g| {
                let lv = l2.data();
                let buf = g.buf(l2.id(), m * n);
                let scale = d[0] / m as f32;
                for i in 0..m {
                    let row = &lv[i * n..(i + 1) * n];
                    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let sum: f32 = row.iter().map(|v| (v - max).exp()).sum();
                    for j in 0..n {
                        let p = (row[j] - max).exp() / sum;
                        let delta = if j == tg[i] { 1.0 } else { 0.0 };
                        buf[i * n + j] += (p - delta) * scale;
                    }
                }
            }));
        }
        Ok(out)
    }

    /// Token-id lookup into an embedding table: `out[i,:] = table[ids[i],:]`.
    pub fn embedding(&self, table: &Tensor, ids: &[u32]) -> Result<Tensor> {
        let s = table.shape();
        if s.len() != 2 {
            return Err(Error::shape("embedding", format!("table must be 2-d, got {:?}", s)));
        }
        let (v, d) = (s[0], s[1]);
        for (i, id) in ids.iter().enumerate() {
            if *id as usize >= v {
                return Err(Error::InvalidArgument(format!("embedding: ids[{}]={} out of vocab {}", i, id, v)));
            }
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        {
            let tv = table.data();
            for id in ids {
                let r = *id as usize;
                data.extend_from_slice(&tv[r * d..(r + 1) * d]);
            }
        }
        let out = self.fresh("embedding", data, vec![ids.len(), d], &[table])?;
        if out.requires_grad() {
            let t2 = table.clone();
            let ids2 = ids.to_vec();
            self.record(&[table], &out, Box::new(move |dv, g| {
                let buf = g.buf(t2.id(), v * d);
                for (i, id) in ids2.iter().enumerate() {
                    let r = *id as usize;
                    add_into(&mut buf[r * d..(r + 1) * d], &dv[i * d..(i + 1) * d]);
                }
            }));
        }
        Ok(out)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn add_into(acc: &mut [f32], delta: &[f32]) {
    debug_assert_eq!(acc.len(), delta.len());
    for (a, d) in acc.iter_mut().zip(delta) {
        *a += d;
    }
}

pub(crate) fn matmul_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

fn gelu_val(x: f32) -> f32 {
    let u = GELU_COEF * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_COEF * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_COEF * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
