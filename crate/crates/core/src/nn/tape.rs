use super::{ParamId, ParamStore, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<F> {
    Input,
    Param(ParamId),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        pad: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, F),
    LeakyRelu(usize, F),
    AddChannelBias {
        x: usize,
        bias: usize,
    },
    ConcatChannels(Vec<usize>),
    ConcatBatch(Vec<usize>),
    SliceBatch {
        x: usize,
        start: usize,
    },
    PixelShuffle {
        x: usize,
        r: usize,
    },
    AvgPool2(usize),
    Upsample2(usize),
    MeanAbsDiff(usize, usize),
    TemporalAttention(Box<AttentionCache<F>>),
}

#[derive(Debug)]
struct AttentionCache<F> {
    x: usize,
    pe_w: usize,
    pe_b: usize,
    key_w: usize,
    key_b: usize,
    query: usize,
    /// `T x d` encoding rows.
    pe: Vec<F>,
    d: usize,
    heads: usize,
    /// Projected encodings `P[h][t]`, `H x T x g`.
    projected: Vec<F>,
    /// Effective score vectors `u_h = W_k^T q_h / sqrt(d_k)`, `H x g`.
    score_dirs: Vec<F>,
    /// `H x T x HW` softmax weights.
    weights: Vec<F>,
}

struct Node<F> {
    value: Option<Tensor<F>>,
    op: Op<F>,
    needs_grad: bool,
}

/// Records a forward computation so it can be differentiated.
///
/// Parameters are read from the borrowed [`ParamStore`] and never copied.
pub struct Tape<'p, F: Real> {
    params: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
    param_vars: Vec<Option<Var>>,
}

/// Parameter gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F> Default for Gradients<F> {
    fn default() -> Self {
        Self { grads: Vec::new() }
    }
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` into `self`.
    pub fn accumulate(&mut self, other: &Gradients<F>) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.add_assign(t),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    /// Euclidean norm over all gradient entries.
    pub fn global_norm(&self) -> F {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|&v| v * v)
            .sum::<F>()
            .sqrt()
    }
}

fn accumulate<F: Real>(grads: &mut [Option<Tensor<F>>], idx: usize, g: Tensor<F>) {
    match &mut grads[idx] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Output size of a stride-1 convolution.
fn conv_out(size: usize, k: usize, pad: usize) -> usize {
    (size + 2 * pad + 1)
        .checked_sub(k)
        .filter(|&s| s > 0)
        .unwrap_or_else(|| panic!("kernel {k} with padding {pad} does not fit size {size}"))
}

#[allow(clippy::too_many_arguments)]
fn im2col<F: Real>(
    x: &[F],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [F],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let ox_lo = pad.saturating_sub(kx);
                let ox_hi = (w + pad).saturating_sub(kx).min(wo);
                for oy in 0..ho {
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h || ox_lo >= ox_hi {
                        line.fill(F::zero());
                        continue;
                    }
                    let iy = iy - pad;
                    line[..ox_lo].fill(F::zero());
                    line[ox_hi..].fill(F::zero());
                    let ix0 = ox_lo + kx - pad;
                    line[ox_lo..ox_hi]
                        .copy_from_slice(&xc[iy * w + ix0..iy * w + ix0 + (ox_hi - ox_lo)]);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<F: Real>(
    cols: &[F],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [F],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let dxc = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let ox_lo = pad.saturating_sub(kx);
                let ox_hi = (w + pad).saturating_sub(kx).min(wo);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in 0..ho {
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let iy = iy - pad;
                    let ix0 = ox_lo + kx - pad;
                    let d = &mut dxc[iy * w + ix0..iy * w + ix0 + (ox_hi - ox_lo)];
                    for (a, &b) in d.iter_mut().zip(&src[oy * wo + ox_lo..oy * wo + ox_hi]) {
                        *a += b;
                    }
                }
            }
        }
    }
}

impl<'p, F: Real> Tape<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, parents: &[usize]) -> Var {
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant.
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records (once) a learnable parameter.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn val(&self, idx: usize) -> &Tensor<F> {
        let node = &self.nodes[idx];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        self.val(v.0)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.val(v.0).shape()
    }

    /// Softmax weights (`heads x T x H x W`, flattened) recorded by a
    /// [`Tape::temporal_attention`] node.
    pub fn attention_weights(&self, v: Var) -> Option<&[F]> {
        match &self.nodes[v.0].op {
            Op::TemporalAttention(cache) => Some(&cache.weights),
            _ => None,
        }
    }

    /// Stride-1 2-D convolution. `x: [N, Ci, H, W]`, `w: [Co, Ci, k, k]`,
    /// `b: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Var {
        let (n, ci, h, wd) = self.val(x.0).dims4();
        let (co, wci, k, k2) = self.val(w.0).dims4();
        assert_eq!(ci, wci, "conv2d: input has {ci} channels, kernel expects {wci}");
        assert_eq!(k, k2, "conv2d: square kernels only");
        let ho = conv_out(h, k, pad);
        let wo = conv_out(wd, k, pad);
        let kk = ci * k * k;
        let plane = ho * wo;
        let mut out = Tensor::zeros(&[n, co, ho, wo]);
        {
            let xs = self.val(x.0).data();
            let ws = self.val(w.0).data();
            let bias = b.map(|b| self.val(b.0).data());
            let direct = k == 1 && pad == 0;
            let mut cols = if direct { Vec::new() } else { vec![F::zero(); kk * plane] };
            let od = out.data_mut();
            for img in 0..n {
                let xi = &xs[img * ci * h * wd..(img + 1) * ci * h * wd];
                let src: &[F] = if direct {
                    xi
                } else {
                    im2col(xi, ci, h, wd, k, pad, ho, wo, &mut cols);
                    &cols
                };
                let oi = &mut od[img * co * plane..(img + 1) * co * plane];
                if let Some(bias) = bias {
                    for (c, row) in oi.chunks_mut(plane).enumerate() {
                        row.fill(bias[c]);
                    }
                }
                let beta = if bias.is_some() { F::one() } else { F::zero() };
                F::gemm(
                    co,
                    kk,
                    plane,
                    ws,
                    (kk as isize, 1),
                    src,
                    (plane as isize, 1),
                    beta,
                    oi,
                    (plane as isize, 1),
                );
            }
        }
        let mut parents = vec![x.0, w.0];
        if let Some(b) = b {
            parents.push(b.0);
        }
        self.push(
            out,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                pad,
            },
            &parents,
        )
    }

    /// `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, fin) = match self.val(x.0).shape() {
            [n, f] => (*n, *f),
            s => panic!("linear: expected [N, in], got {s:?}"),
        };
        let (fout, win) = match self.val(w.0).shape() {
            [o, i] => (*o, *i),
            s => panic!("linear: expected [out, in] weights, got {s:?}"),
        };
        assert_eq!(fin, win, "linear: input width {fin} vs weight width {win}");
        let mut out = Tensor::zeros(&[n, fout]);
        if let Some(b) = b {
            let bd = self.val(b.0).data();
            for row in out.data_mut().chunks_mut(fout) {
                row.copy_from_slice(bd);
            }
        }
        let beta = if b.is_some() { F::one() } else { F::zero() };
        F::gemm(
            n,
            fin,
            fout,
            self.val(x.0).data(),
            (fin as isize, 1),
            self.val(w.0).data(),
            (1, fin as isize),
            beta,
            out.data_mut(),
            (fout as isize, 1),
        );
        let mut parents = vec![x.0, w.0];
        if let Some(b) = b {
            parents.push(b.0);
        }
        self.push(
            out,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
            },
            &parents,
        )
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Var {
        let (ta, tb) = (self.val(a.0), self.val(b.0));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(ta.shape(), data);
        self.push(out, op, &[a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let out = self.val(a.0).map(|v| v * s);
        self.push(out, Op::Scale(a.0, s), &[a.0])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: F) -> Var {
        let out = self
            .val(a.0)
            .map(|v| if v > F::zero() { v } else { v * slope });
        self.push(out, Op::LeakyRelu(a.0, slope), &[a.0])
    }

    /// Adds a per-(sample, channel) offset: `x: [N, C, H, W]`, `bias: [N, C]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let (n, c, h, w) = self.val(x.0).dims4();
        assert_eq!(self.val(bias.0).shape(), &[n, c], "channel bias shape");
        let mut out = self.val(x.0).clone();
        let bd = self.val(bias.0).data();
        for (i, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            let b = bd[i];
            plane.iter_mut().for_each(|v| *v += b);
        }
        self.push(out, Op::AddChannelBias { x: x.0, bias: bias.0 }, &[x.0, bias.0])
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (n, _, h, w) = self.val(parts[0].0).dims4();
        let mut total = 0;
        for p in parts {
            let (pn, pc, ph, pw) = self.val(p.0).dims4();
            assert_eq!((pn, ph, pw), (n, h, w), "concat_channels: shape mismatch");
            total += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for img in 0..n {
            for p in parts {
                let t = self.val(p.0);
                let pc = t.shape()[1];
                data.extend_from_slice(&t.data()[img * pc * plane..(img + 1) * pc * plane]);
            }
        }
        let out = Tensor::from_vec(&[n, total, h, w], data);
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(out, Op::ConcatChannels(idx.clone()), &idx)
    }

    pub fn concat_batch(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (_, c, h, w) = self.val(parts[0].0).dims4();
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            let t = self.val(p.0);
            let (pn, pc, ph, pw) = t.dims4();
            assert_eq!((pc, ph, pw), (c, h, w), "concat_batch: shape mismatch");
            data.extend_from_slice(t.data());
            n += pn;
        }
        let out = Tensor::from_vec(&[n, c, h, w], data);
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(out, Op::ConcatBatch(idx.clone()), &idx)
    }

    /// Batch entries `start..start + len`.
    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.val(x.0);
        let (n, c, h, w) = t.dims4();
        assert!(start + len <= n && len > 0, "slice_batch out of range");
        let per = c * h * w;
        let out = Tensor::from_vec(
            &[len, c, h, w],
            t.data()[start * per..(start + len) * per].to_vec(),
        );
        self.push(out, Op::SliceBatch { x: x.0, start }, &[x.0])
    }

    /// `[N, C r^2, H, W] -> [N, C, H r, W r]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Var {
        let t = self.val(x.0);
        let (n, cr, h, w) = t.dims4();
        assert_eq!(cr % (r * r), 0, "pixel_shuffle: channels not divisible by r^2");
        let c = cr / (r * r);
        let mut out = Tensor::zeros(&[n, c, h * r, w * r]);
        let (src, dst) = (t.data(), out.data_mut());
        for img in 0..n {
            for ch in 0..c {
                for i in 0..r {
                    for j in 0..r {
                        let sc = ch * r * r + i * r + j;
                        let sbase = (img * cr + sc) * h * w;
                        let dbase = (img * c + ch) * h * r * w * r;
                        for y in 0..h {
                            let drow = dbase + (y * r + i) * w * r + j;
                            for xx in 0..w {
                                dst[drow + xx * r] = src[sbase + y * w + xx];
                            }
                        }
                    }
                }
            }
        }
        self.push(out, Op::PixelShuffle { x: x.0, r }, &[x.0])
    }

    /// 2x2 mean pooling; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let t = self.val(x.0);
        let (n, c, h, w) = t.dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims, got {h}x{w}");
        let (ho, wo) = (h / 2, w / 2);
        let quarter = F::lit(0.25);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let (src, dst) = (t.data(), out.data_mut());
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut dst[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    let a = s[2 * y * w + 2 * xx] + s[2 * y * w + 2 * xx + 1];
                    let b = s[(2 * y + 1) * w + 2 * xx] + s[(2 * y + 1) * w + 2 * xx + 1];
                    d[y * wo + xx] = (a + b) * quarter;
                }
            }
        }
        self.push(out, Op::AvgPool2(x.0), &[x.0])
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let t = self.val(x.0);
        let (n, c, h, w) = t.dims4();
        let (ho, wo) = (h * 2, w * 2);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let (src, dst) = (t.data(), out.data_mut());
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut dst[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    d[y * wo + xx] = s[(y / 2) * w + xx / 2];
                }
            }
        }
        self.push(out, Op::Upsample2(x.0), &[x.0])
    }

    /// Scalar `mean(|a - b|)`.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.val(a.0), self.val(b.0));
        assert_eq!(ta.shape(), tb.shape(), "mean_abs_diff shape mismatch");
        let n = F::lit(ta.numel() as f64);
        let s: F = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| (x - y).abs())
            .sum();
        self.push(Tensor::scalar(s / n), Op::MeanAbsDiff(a.0, b.0), &[a.0, b.0])
    }

    /// Master-query temporal attention applied independently at every pixel.
    ///
    /// * `x`: `[T, C, H, W]` per-frame features, `C = heads * g`;
    /// * `pe`: `T x d` positional encoding rows (constant);
    /// * `pe_w: [heads, g, d]`, `pe_b: [heads, g]` project encodings to the
    ///   group width; the projection is added to each frame's channel group
    ///   before keys are formed;
    /// * `key_w: [heads, dk, g]`, `key_b: [heads, dk]`, `query: [heads, dk]`.
    ///
    /// For head `h`, frame `t` and pixel `p`:
    /// `score = q_h . (W_k (x_t[group h] + P_h(t)) + b_k) / sqrt(dk)`,
    /// `a = softmax_t(score)`, output group `h` = `sum_t a_t x_t[group h]`.
    /// Returns `[1, C, H, W]`.
    #[allow(clippy::too_many_arguments)]
    pub fn temporal_attention(
        &mut self,
        x: Var,
        pe: &[F],
        d: usize,
        pe_w: Var,
        pe_b: Var,
        key_w: Var,
        key_b: Var,
        query: Var,
    ) -> Var {
        let (t_len, c, h, w) = self.val(x.0).dims4();
        let heads = self.val(query.0).shape()[0];
        let dk = self.val(query.0).shape()[1];
        assert!(heads > 0 && c % heads == 0, "channels {c} not divisible by {heads} heads");
        let g = c / heads;
        assert_eq!(pe.len(), t_len * d, "encoding has wrong size");
        assert_eq!(self.val(pe_w.0).shape(), &[heads, g, d], "pe_w shape");
        assert_eq!(self.val(pe_b.0).shape(), &[heads, g], "pe_b shape");
        assert_eq!(self.val(key_w.0).shape(), &[heads, dk, g], "key_w shape");
        assert_eq!(self.val(key_b.0).shape(), &[heads, dk], "key_b shape");
        let hw = h * w;
        let inv_sqrt = F::one() / F::lit(dk as f64).sqrt();

        let xs = self.val(x.0).data();
        let pw = self.val(pe_w.0).data();
        let pb = self.val(pe_b.0).data();
        let kw = self.val(key_w.0).data();
        let kb = self.val(key_b.0).data();
        let q = self.val(query.0).data();

        // P[h][t][j] = pe_w[h] . pe[t] + pe_b[h]
        let mut projected = vec![F::zero(); heads * t_len * g];
        for hd in 0..heads {
            for t in 0..t_len {
                for j in 0..g {
                    let mut acc = pb[hd * g + j];
                    for i in 0..d {
                        acc += pw[(hd * g + j) * d + i] * pe[t * d + i];
                    }
                    projected[(hd * t_len + t) * g + j] = acc;
                }
            }
        }
        // u[h][j] = sum_i q[h][i] W_k[h][i][j] / sqrt(dk)
        let mut score_dirs = vec![F::zero(); heads * g];
        let mut score_offset = vec![F::zero(); heads];
        for hd in 0..heads {
            for i in 0..dk {
                let qi = q[hd * dk + i] * inv_sqrt;
                score_offset[hd] += qi * kb[hd * dk + i];
                for j in 0..g {
                    score_dirs[hd * g + j] += qi * kw[(hd * dk + i) * g + j];
                }
            }
        }

        let mut weights = vec![F::zero(); heads * t_len * hw];
        let mut out = Tensor::zeros(&[1, c, h, w]);
        let od = out.data_mut();
        let mut maxes = vec![F::zero(); hw];
        let mut sums = vec![F::zero(); hw];
        for hd in 0..heads {
            let u = &score_dirs[hd * g..(hd + 1) * g];
            let wh = &mut weights[hd * t_len * hw..(hd + 1) * t_len * hw];
            for t in 0..t_len {
                let p = &projected[(hd * t_len + t) * g..(hd * t_len + t + 1) * g];
                let bias = score_offset[hd]
                    + u.iter().zip(p).map(|(&a, &b)| a * b).sum::<F>();
                let s = &mut wh[t * hw..(t + 1) * hw];
                s.fill(bias);
                for j in 0..g {
                    let xr = &xs[(t * c + hd * g + j) * hw..(t * c + hd * g + j + 1) * hw];
                    let uj = u[j];
                    for (sv, &xv) in s.iter_mut().zip(xr) {
                        *sv += uj * xv;
                    }
                }
            }
            maxes.fill(F::neg_infinity());
            for t in 0..t_len {
                for (m, &s) in maxes.iter_mut().zip(&wh[t * hw..(t + 1) * hw]) {
                    if s > *m {
                        *m = s;
                    }
                }
            }
            sums.fill(F::zero());
            for t in 0..t_len {
                for ((s, &m), acc) in wh[t * hw..(t + 1) * hw]
                    .iter_mut()
                    .zip(&maxes)
                    .zip(sums.iter_mut())
                {
                    *s = (*s - m).exp();
                    *acc += *s;
                }
            }
            for t in 0..t_len {
                for (s, &z) in wh[t * hw..(t + 1) * hw].iter_mut().zip(&sums) {
                    *s /= z;
                }
            }
            for j in 0..g {
                let orow = &mut od[(hd * g + j) * hw..(hd * g + j + 1) * hw];
                for t in 0..t_len {
                    let xr = &xs[(t * c + hd * g + j) * hw..(t * c + hd * g + j + 1) * hw];
                    for ((o, &a), &xv) in orow.iter_mut().zip(&wh[t * hw..(t + 1) * hw]).zip(xr) {
                        *o += a * xv;
                    }
                }
            }
        }

        let cache = AttentionCache {
            x: x.0,
            pe_w: pe_w.0,
            pe_b: pe_b.0,
            key_w: key_w.0,
            key_b: key_b.0,
            query: query.0,
            pe: pe.to_vec(),
            d,
            heads,
            projected,
            score_dirs,
            weights,
        };
        self.push(
            out,
            Op::TemporalAttention(Box::new(cache)),
            &[x.0, pe_w.0, pe_b.0, key_w.0, key_b.0, query.0],
        )
    }

    /// Reverse sweep from a scalar `loss`; returns gradients of every
    /// parameter that influenced it.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(self.val(loss.0).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.val(loss.0).shape(), F::one()));
        let mut out: Vec<Option<Tensor<F>>> = vec![None; self.params.len()];

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let wants = |i: usize| self.nodes[i].needs_grad;
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out[id.0] = Some(gy),
                Op::Conv2d { x, w, b, pad } => {
                    self.conv2d_backward(&gy, *x, *w, *b, *pad, &mut grads);
                }
                Op::Linear { x, w, b } => {
                    let (n, fin) = (self.val(*x).shape()[0], self.val(*x).shape()[1]);
                    let fout = self.val(*w).shape()[0];
                    if wants(*x) {
                        let mut dx = Tensor::zeros(&[n, fin]);
                        F::gemm(
                            n,
                            fout,
                            fin,
                            gy.data(),
                            (fout as isize, 1),
                            self.val(*w).data(),
                            (fin as isize, 1),
                            F::zero(),
                            dx.data_mut(),
                            (fin as isize, 1),
                        );
                        accumulate(&mut grads, *x, dx);
                    }
                    if wants(*w) {
                        let mut dw = Tensor::zeros(&[fout, fin]);
                        F::gemm(
                            fout,
                            n,
                            fin,
                            gy.data(),
                            (1, fout as isize),
                            self.val(*x).data(),
                            (fin as isize, 1),
                            F::zero(),
                            dw.data_mut(),
                            (fin as isize, 1),
                        );
                        accumulate(&mut grads, *w, dw);
                    }
                    if let Some(b) = b.filter(|&b| wants(b)) {
                        let mut db = Tensor::zeros(&[fout]);
                        for row in gy.data().chunks(fout) {
                            for (a, &v) in db.data_mut().iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        accumulate(&mut grads, b, db);
                    }
                }
                Op::Add(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads, *a, gy.clone());
                    }
                    if wants(*b) {
                        accumulate(&mut grads, *b, gy);
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads, *a, gy.clone());
                    }
                    if wants(*b) {
                        accumulate(&mut grads, *b, gy.map(|v| -v));
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads, *a, gy.map(|v| v * s));
                }
                Op::LeakyRelu(a, slope) => {
                    let xa = self.val(*a);
                    let data = gy
                        .data()
                        .iter()
                        .zip(xa.data())
                        .map(|(&g, &x)| if x > F::zero() { g } else { g * *slope })
                        .collect();
                    accumulate(&mut grads, *a, Tensor::from_vec(gy.shape(), data));
                }
                Op::AddChannelBias { x, bias } => {
                    if wants(*bias) {
                        let (n, c, h, w) = gy.dims4();
                        let sums = gy.data().chunks(h * w).map(|p| p.iter().copied().sum()).collect();
                        accumulate(&mut grads, *bias, Tensor::from_vec(&[n, c], sums));
                    }
                    if wants(*x) {
                        accumulate(&mut grads, *x, gy);
                    }
                }
                Op::ConcatChannels(parts) => {
                    let (n, total, h, w) = gy.dims4();
                    let plane = h * w;
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.val(p).shape()[1];
                        if wants(p) {
                            let mut data = Vec::with_capacity(n * pc * plane);
                            for img in 0..n {
                                let base = (img * total + offset) * plane;
                                data.extend_from_slice(&gy.data()[base..base + pc * plane]);
                            }
                            accumulate(&mut grads, p, Tensor::from_vec(&[n, pc, h, w], data));
                        }
                        offset += pc;
                    }
                }
                Op::ConcatBatch(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.val(p).numel();
                        if wants(p) {
                            let data = gy.data()[offset..offset + len].to_vec();
                            accumulate(&mut grads, p, Tensor::from_vec(self.val(p).shape(), data));
                        }
                        offset += len;
                    }
                }
                Op::SliceBatch { x, start } => {
                    let mut dx = Tensor::zeros(self.val(*x).shape());
                    let per = gy.numel() / gy.shape()[0];
                    dx.data_mut()[start * per..start * per + gy.numel()].copy_from_slice(gy.data());
                    accumulate(&mut grads, *x, dx);
                }
                Op::PixelShuffle { x, r } => {
                    let r = *r;
                    let (n, cr, h, w) = self.val(*x).dims4();
                    let c = cr / (r * r);
                    let mut dx = Tensor::zeros(&[n, cr, h, w]);
                    let (src, dst) = (gy.data(), dx.data_mut());
                    for img in 0..n {
                        for ch in 0..c {
                            for i in 0..r {
                                for j in 0..r {
                                    let sc = ch * r * r + i * r + j;
                                    let dbase = (img * cr + sc) * h * w;
                                    let sbase = (img * c + ch) * h * r * w * r;
                                    for y in 0..h {
                                        let srow = sbase + (y * r + i) * w * r + j;
                                        for xx in 0..w {
                                            dst[dbase + y * w + xx] = src[srow + xx * r];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::AvgPool2(x) => {
                    let (n, c, h, w) = self.val(*x).dims4();
                    let (ho, wo) = (h / 2, w / 2);
                    let quarter = F::lit(0.25);
                    let mut dx = Tensor::zeros(&[n, c, h, w]);
                    let (src, dst) = (gy.data(), dx.data_mut());
                    for p in 0..n * c {
                        for y in 0..h {
                            for xx in 0..w {
                                dst[p * h * w + y * w + xx] =
                                    src[p * ho * wo + (y / 2) * wo + xx / 2] * quarter;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Upsample2(x) => {
                    let (n, c, h, w) = self.val(*x).dims4();
                    let (ho, wo) = (h * 2, w * 2);
                    let mut dx = Tensor::zeros(&[n, c, h, w]);
                    let (src, dst) = (gy.data(), dx.data_mut());
                    for p in 0..n * c {
                        for y in 0..ho {
                            for xx in 0..wo {
                                dst[p * h * w + (y / 2) * w + xx / 2] += src[p * ho * wo + y * wo + xx];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MeanAbsDiff(a, b) => {
                    let (ta, tb) = (self.val(*a), self.val(*b));
                    let scale = gy.data()[0] / F::lit(ta.numel() as f64);
                    let sign: Vec<F> = ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .map(|(&x, &y)| {
                            let d = x - y;
                            if d > F::zero() {
                                scale
                            } else if d < F::zero() {
                                -scale
                            } else {
                                F::zero()
                            }
                        })
                        .collect();
                    if wants(*b) {
                        let neg = sign.iter().map(|&v| -v).collect();
                        accumulate(&mut grads, *b, Tensor::from_vec(ta.shape(), neg));
                    }
                    if wants(*a) {
                        accumulate(&mut grads, *a, Tensor::from_vec(ta.shape(), sign));
                    }
                }
                Op::TemporalAttention(cache) => {
                    self.attention_backward(&gy, cache, &mut grads);
                }
            }
        }
        Gradients { grads: out }
    }

    fn conv2d_backward(
        &self,
        gy: &Tensor<F>,
        x: usize,
        w: usize,
        b: Option<usize>,
        pad: usize,
        grads: &mut [Option<Tensor<F>>],
    ) {
        let wants = |i: usize| self.nodes[i].needs_grad;
        let (n, ci, h, wd) = self.val(x).dims4();
        let (co, _, k, _) = self.val(w).dims4();
        let (_, _, ho, wo) = gy.dims4();
        let plane = ho * wo;
        let kk = ci * k * k;
        let direct = k == 1 && pad == 0;
        let need_x = wants(x);
        let need_w = wants(w);

        if let Some(b) = b.filter(|&b| wants(b)) {
            let mut db = Tensor::zeros(&[co]);
            for img in 0..n {
                for (c, row) in gy.data()[img * co * plane..(img + 1) * co * plane]
                    .chunks(plane)
                    .enumerate()
                {
                    db.data_mut()[c] += row.iter().copied().sum::<F>();
                }
            }
            accumulate(grads, b, db);
        }
        if !need_x && !need_w {
            return;
        }
        let xs = self.val(x).data();
        let ws = self.val(w).data();
        let mut dw = need_w.then(|| Tensor::zeros(&[co, ci, k, k]));
        let mut dx = need_x.then(|| Tensor::zeros(&[n, ci, h, wd]));
        let mut cols = if direct { Vec::new() } else { vec![F::zero(); kk * plane] };
        let mut dcols = if direct || !need_x { Vec::new() } else { vec![F::zero(); kk * plane] };
        for img in 0..n {
            let gi = &gy.data()[img * co * plane..(img + 1) * co * plane];
            let xi = &xs[img * ci * h * wd..(img + 1) * ci * h * wd];
            if let Some(dw) = dw.as_mut() {
                let src: &[F] = if direct {
                    xi
                } else {
                    im2col(xi, ci, h, wd, k, pad, ho, wo, &mut cols);
                    &cols
                };
                F::gemm(
                    co,
                    plane,
                    kk,
                    gi,
                    (plane as isize, 1),
                    src,
                    (1, plane as isize),
                    F::one(),
                    dw.data_mut(),
                    (kk as isize, 1),
                );
            }
            if let Some(dx) = dx.as_mut() {
                let dxi = &mut dx.data_mut()[img * ci * h * wd..(img + 1) * ci * h * wd];
                if direct {
                    F::gemm(
                        kk,
                        co,
                        plane,
                        ws,
                        (1, kk as isize),
                        gi,
                        (plane as isize, 1),
                        F::zero(),
                        dxi,
                        (plane as isize, 1),
                    );
                } else {
                    F::gemm(
                        kk,
                        co,
                        plane,
                        ws,
                        (1, kk as isize),
                        gi,
                        (plane as isize, 1),
                        F::zero(),
                        &mut dcols,
                        (plane as isize, 1),
                    );
                    col2im(&dcols, ci, h, wd, k, pad, ho, wo, dxi);
                }
            }
        }
        if let Some(dw) = dw {
            accumulate(grads, w, dw);
        }
        if let Some(dx) = dx {
            accumulate(grads, x, dx);
        }
    }

    fn attention_backward(
        &self,
        gy: &Tensor<F>,
        cache: &AttentionCache<F>,
        grads: &mut [Option<Tensor<F>>],
    ) {
        let wants = |i: usize| self.nodes[i].needs_grad;
        let xt = self.val(cache.x);
        let (t_len, c, h, w) = xt.dims4();
        let heads = cache.heads;
        let g = c / heads;
        let d = cache.d;
        let dk = self.val(cache.query).shape()[1];
        let hw = h * w;
        let inv_sqrt = F::one() / F::lit(dk as f64).sqrt();
        let xs = xt.data();
        let gd = gy.data();

        let mut dx = wants(cache.x).then(|| Tensor::<F>::zeros(&[t_len, c, h, w]));
        let mut du = vec![F::zero(); heads * g];
        let mut d_offset = vec![F::zero(); heads];
        let mut dproj = vec![F::zero(); heads * t_len * g];
        let mut ds = vec![F::zero(); t_len * hw];
        let mut mean = vec![F::zero(); hw];

        for hd in 0..heads {
            let wh = &cache.weights[hd * t_len * hw..(hd + 1) * t_len * hw];
            let u = &cache.score_dirs[hd * g..(hd + 1) * g];
            // ds_t = a_t (<gy, x_t> - sum_s a_s <gy, x_s>)
            ds.fill(F::zero());
            for t in 0..t_len {
                let dst = &mut ds[t * hw..(t + 1) * hw];
                for j in 0..g {
                    let gr = &gd[(hd * g + j) * hw..(hd * g + j + 1) * hw];
                    let xr = &xs[(t * c + hd * g + j) * hw..(t * c + hd * g + j + 1) * hw];
                    for ((v, &a), &b) in dst.iter_mut().zip(gr).zip(xr) {
                        *v += a * b;
                    }
                }
            }
            mean.fill(F::zero());
            for t in 0..t_len {
                for ((m, &a), &v) in mean
                    .iter_mut()
                    .zip(&wh[t * hw..(t + 1) * hw])
                    .zip(&ds[t * hw..(t + 1) * hw])
                {
                    *m += a * v;
                }
            }
            for t in 0..t_len {
                for ((v, &a), &m) in ds[t * hw..(t + 1) * hw]
                    .iter_mut()
                    .zip(&wh[t * hw..(t + 1) * hw])
                    .zip(&mean)
                {
                    *v = a * (*v - m);
                }
            }
            for t in 0..t_len {
                let dst = &ds[t * hw..(t + 1) * hw];
                let sum_ds: F = dst.iter().copied().sum();
                d_offset[hd] += sum_ds;
                let p = &cache.projected[(hd * t_len + t) * g..(hd * t_len + t + 1) * g];
                for j in 0..g {
                    let xr = &xs[(t * c + hd * g + j) * hw..(t * c + hd * g + j + 1) * hw];
                    let dot: F = dst.iter().zip(xr).map(|(&a, &b)| a * b).sum();
                    du[hd * g + j] += dot + sum_ds * p[j];
                    dproj[(hd * t_len + t) * g + j] += sum_ds * u[j];
                }
                if let Some(dx) = dx.as_mut() {
                    let dxd = dx.data_mut();
                    let at = &wh[t * hw..(t + 1) * hw];
                    for j in 0..g {
                        let ch = t * c + hd * g + j;
                        let gr = &gd[(hd * g + j) * hw..(hd * g + j + 1) * hw];
                        let uj = u[j];
                        for (((v, &a), &gg), &s) in dxd[ch * hw..(ch + 1) * hw]
                            .iter_mut()
                            .zip(at)
                            .zip(gr)
                            .zip(dst)
                        {
                            *v += a * gg + s * uj;
                        }
                    }
                }
            }
        }

        if let Some(dx) = dx {
            accumulate(grads, cache.x, dx);
        }
        let q = self.val(cache.query).data();
        let kw = self.val(cache.key_w).data();
        let kb = self.val(cache.key_b).data();
        if wants(cache.key_w) {
            let mut dkw = Tensor::zeros(&[heads, dk, g]);
            let dd = dkw.data_mut();
            for hd in 0..heads {
                for i in 0..dk {
                    for j in 0..g {
                        dd[(hd * dk + i) * g + j] = q[hd * dk + i] * du[hd * g + j] * inv_sqrt;
                    }
                }
            }
            accumulate(grads, cache.key_w, dkw);
        }
        if wants(cache.key_b) {
            let mut dkb = Tensor::zeros(&[heads, dk]);
            for hd in 0..heads {
                for i in 0..dk {
                    dkb.data_mut()[hd * dk + i] = q[hd * dk + i] * inv_sqrt * d_offset[hd];
                }
            }
            accumulate(grads, cache.key_b, dkb);
        }
        if wants(cache.query) {
            let mut dq = Tensor::zeros(&[heads, dk]);
            let dd = dq.data_mut();
            for hd in 0..heads {
                for i in 0..dk {
                    let mut acc = kb[hd * dk + i] * d_offset[hd];
                    for j in 0..g {
                        acc += kw[(hd * dk + i) * g + j] * du[hd * g + j];
                    }
                    dd[hd * dk + i] = acc * inv_sqrt;
                }
            }
            accumulate(grads, cache.query, dq);
        }
        if wants(cache.pe_w) {
            let mut dpw = Tensor::zeros(&[heads, g, d]);
            let dd = dpw.data_mut();
            for hd in 0..heads {
                for t in 0..t_len {
                    for j in 0..g {
                        let gp = dproj[(hd * t_len + t) * g + j];
                        for i in 0..d {
                            dd[(hd * g + j) * d + i] += gp * cache.pe[t * d + i];
                        }
                    }
                }
            }
            accumulate(grads, cache.pe_w, dpw);
        }
        if wants(cache.pe_b) {
            let mut dpb = Tensor::zeros(&[heads, g]);
            for hd in 0..heads {
                for t in 0..t_len {
                    for j in 0..g {
                        dpb.data_mut()[hd * g + j] += dproj[(hd * t_len + t) * g + j];
                    }
                }
            }
            accumulate(grads, cache.pe_b, dpb);
        }
    }
}
