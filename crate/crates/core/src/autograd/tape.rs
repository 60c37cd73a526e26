use crate::autograd::kernels::{conv_backward, conv_forward, ConvGeom};
use crate::error::{shape_err, FicoError, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Reshape {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    Relu {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        inv_std: Vec<T>,
        xhat: Vec<T>,
    },
    FixedNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2 {
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    CosineLocation {
        a: Var,
        b: Var,
    },
    CosineFlat {
        a: Var,
        b: Var,
    },
    Mse {
        a: Var,
        b: Var,
    },
    WeightedSum {
        terms: Vec<(Var, T)>,
    },
    DotConst {
        x: Var,
        c: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Guard added to every cosine denominator: `cos = a.b / max(|a||b|, EPS)`.
pub const COSINE_EPS: f64 = 1e-8;

/// Wengert list recording a forward computation for reverse-mode differentiation.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// 2-D convolution with zero padding. `w` is `[cout, cin, k, k]` or a per-sample
    /// `[batch, cout, cin, k, k]`; `b` is `[cout]` or `[batch, cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (batch, cin, h, wd) = self.value(x).dims4()?;
        let ws = self.shape(w).to_vec();
        let (per_sample, cout, wcin, k, k2) = match ws[..] {
            [co, ci, k, k2] => (false, co, ci, k, k2),
            [bb, co, ci, k, k2] if bb == batch => (true, co, ci, k, k2),
            _ => {
                return Err(shape_err!(
                    "conv2d: weight {:?} for input {:?}",
                    ws,
                    self.shape(x)
                ))
            }
        };
        if wcin != cin || k != k2 {
            return Err(shape_err!(
                "conv2d: weight {:?} for input {:?}",
                ws,
                self.shape(x)
            ));
        }
        let geom = ConvGeom::new(cin, h, wd, cout, k, stride, pad)
            .ok_or_else(|| shape_err!("conv2d: kernel {} too large for {}x{}", k, h, wd))?;
        let bias_layout = match b {
            None => None,
            Some(bv) => {
                let bs = self.shape(bv);
                let per = match bs {
                    [c] if *c == cout => false,
                    [bb, c] if *bb == batch && *c == cout => true,
                    _ => return Err(shape_err!("conv2d: bias {:?} for {} outputs", bs, cout)),
                };
                Some((bv, per))
            }
        };
        let out = conv_forward(
            self.value(x).data(),
            batch,
            &geom,
            self.value(w).data(),
            per_sample,
            bias_layout.map(|(bv, per)| (self.value(bv).data(), per)),
        );
        let value = Tensor::from_vec(&[batch, cout, geom.ho, geom.wo], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, &parents))
    }

    /// `x [B, in] -> x w^T + b` with `w [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (bsz, fin) = dims2(self.shape(x))?;
        let (fout, win) = dims2(self.shape(w))?;
        if win != fin {
            return Err(shape_err!(
                "linear: weight {:?} for input {:?}",
                self.shape(w),
                self.shape(x)
            ));
        }
        let mut out = vec![T::zero(); bsz * fout];
        let beta = if let Some(bv) = b {
            if self.shape(bv) != [fout] {
                return Err(shape_err!(
                    "linear: bias {:?} for {} outputs",
                    self.shape(bv),
                    fout
                ));
            }
            let bias = self.value(bv).data();
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bias);
            }
            T::one()
        } else {
            T::zero()
        };
        T::gemm(
            bsz,
            fin,
            fout,
            T::one(),
            self.value(x).data(),
            (fin as isize, 1),
            self.value(w).data(),
            (1, fin as isize),
            beta,
            &mut out,
            (fout as isize, 1),
        );
        let value = Tensor::from_vec(&[bsz, fout], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &parents))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a))?;
        let (k2, n) = dims2(self.shape(b))?;
        if k != k2 {
            return Err(shape_err!(
                "matmul: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let value = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(value, Op::Sub { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale { x, s }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu { x }, &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let value = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { v * slope });
        self.push(value, Op::LeakyRelu { x, slope }, &[x])
    }

    /// Per-sample, per-channel normalization over the spatial extent (no affine terms).
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let n = h * w;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        let mut inv_std = Vec::with_capacity(b * c);
        let nf = T::of(n as f64);
        for (g, (xs, ys)) in src.chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let mean = xs.iter().copied().sum::<T>() / nf;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            for (y, &v) in ys.iter_mut().zip(xs) {
                *y = (v - mean) * is;
            }
            inv_std.push(is);
            debug_assert_eq!(inv_std.len(), g + 1);
        }
        let value = Tensor::from_vec(&[b, c, h, w], out)?;
        Ok(self.push(value, Op::InstanceNorm { x, inv_std }, &[x]))
    }

    /// Batch normalization using the statistics of the current batch.
    /// Returns the output together with the batch mean and biased variance per channel.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (b, c, h, w) = self.value(x).dims4()?;
        self.check_channel_param("batch_norm", gamma, c)?;
        self.check_channel_param("batch_norm", beta, c)?;
        let hw = h * w;
        let nf = T::of((b * hw) as f64);
        let src = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for bi in 0..b {
                let off = (bi * c + ch) * hw;
                s = s + src[off..off + hw].iter().copied().sum::<T>();
            }
            mean[ch] = s / nf;
            let mut v = T::zero();
            for bi in 0..b {
                let off = (bi * c + ch) * hw;
                v = v + src[off..off + hw]
                    .iter()
                    .map(|&x| (x - mean[ch]) * (x - mean[ch]))
                    .sum::<T>();
            }
            var[ch] = v / nf;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                for i in off..off + hw {
                    xhat[i] = (src[i] - mean[ch]) * inv_std[ch];
                    out[i] = xhat[i] * g[ch] + be[ch];
                }
            }
        }
        let value = Tensor::from_vec(&[b, c, h, w], out)?;
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                inv_std,
                xhat,
            },
            &[x, gamma, beta],
        );
        Ok((v, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn fixed_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        self.check_channel_param("fixed_norm", gamma, c)?;
        self.check_channel_param("fixed_norm", beta, c)?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err!(
                "fixed_norm: statistics for {} channels",
                mean.len()
            ));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let hw = h * w;
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                for i in off..off + hw {
                    out[i] = (src[i] - mean[ch]) * inv_std[ch] * g[ch] + be[ch];
                }
            }
        }
        let value = Tensor::from_vec(&[b, c, h, w], out)?;
        Ok(self.push(
            value,
            Op::FixedNorm {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// 2x2 max pooling with stride 2. Ties resolve to the first element in raster order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("max_pool2: odd spatial size {}x{}", h, w));
        }
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut argmax = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::from_vec(&[b, c, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, &[x]))
    }

    /// Nearest-neighbour upsampling by a factor of two.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); b * c * 4 * h * w];
        for plane in 0..b * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(plane * 2 * h + y) * 2 * w + xx] = src[(plane * h + y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::from_vec(&[b, c, 2 * h, 2 * w], out)?;
        Ok(self.push(value, Op::Upsample2 { x }, &[x]))
    }

    /// Concatenates 4-D tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let (b, _, h, w) = self.value(*first).dims4()?;
        let mut chans = Vec::with_capacity(xs.len());
        for &v in xs {
            let (bb, c, hh, ww) = self.value(v).dims4()?;
            if (bb, hh, ww) != (b, h, w) {
                return Err(shape_err!(
                    "concat: {:?} vs {:?}",
                    self.shape(v),
                    self.shape(*first)
                ));
            }
            chans.push(c);
        }
        let ctot: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(b * ctot * hw);
        for bi in 0..b {
            for (&v, &c) in xs.iter().zip(&chans) {
                out.extend_from_slice(&self.value(v).data()[bi * c * hw..(bi + 1) * c * hw]);
            }
        }
        let value = Tensor::from_vec(&[b, ctot, h, w], out)?;
        Ok(self.push(value, Op::Concat { xs: xs.to_vec() }, xs))
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let n = T::of((h * w) as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() / n)
            .collect();
        let value = Tensor::from_vec(&[b, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool { x }, &[x]))
    }

    /// Row-wise softmax of a `[B, P]` matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, p) = dims2(self.shape(x))?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(p) {
            softmax_in_place(row);
        }
        let value = Tensor::from_vec(self.shape(x), out)?;
        Ok(self.push(value, Op::Softmax { x }, &[x]))
    }

    /// Mean softmax cross-entropy of `[B, classes]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = dims2(self.shape(logits))?;
        if labels.len() != b || labels.iter().any(|&l| l >= k) {
            return Err(shape_err!(
                "cross_entropy: {} labels for {} rows of {} classes",
                labels.len(),
                b,
                k
            ));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (row, &l) in probs.chunks_mut(k).zip(labels) {
            softmax_in_place(row);
            loss = loss - row[l].max(T::min_positive_value()).ln();
        }
        let value = Tensor::scalar(loss / T::of(b as f64));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    /// Mean over samples and spatial locations of `1 - cos` between channel vectors.
    pub fn cosine_location(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_location", a, b)?;
        let (bsz, c, h, w) = self.value(a).dims4()?;
        let stats = location_stats(self.value(a).data(), self.value(b).data(), bsz, c, h * w);
        let total: f64 = stats.iter().map(PairStats::distance).sum();
        let value = Tensor::scalar(T::of(total / stats.len() as f64));
        Ok(self.push(value, Op::CosineLocation { a, b }, &[a, b]))
    }

    /// Mean over samples of `1 - cos` between whole flattened samples.
    pub fn cosine_flat(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_flat", a, b)?;
        let bsz = self.shape(a).first().copied().unwrap_or(1).max(1);
        let n = self.value(a).numel() / bsz;
        let stats = location_stats(self.value(a).data(), self.value(b).data(), bsz, n, 1);
        let total: f64 = stats.iter().map(PairStats::distance).sum();
        let value = Tensor::scalar(T::of(total / bsz as f64));
        Ok(self.push(value, Op::CosineFlat { a, b }, &[a, b]))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).numel().max(1);
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| {
                let d = x.f64() - y.f64();
                d * d
            })
            .sum();
        let value = Tensor::scalar(T::of(s / n as f64));
        Ok(self.push(value, Op::Mse { a, b }, &[a, b]))
    }

    /// `sum_i w_i * x_i` over scalar values.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc = T::zero();
        let mut typed = Vec::with_capacity(terms.len());
        for &(v, w) in terms {
            if self.value(v).numel() != 1 {
                return Err(shape_err!(
                    "weighted_sum: non-scalar term {:?}",
                    self.shape(v)
                ));
            }
            let w = T::of(w);
            acc = acc + self.value(v).item() * w;
            typed.push((v, w));
        }
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(
            Tensor::scalar(acc),
            Op::WeightedSum { terms: typed },
            &parents,
        ))
    }

    /// `sum(x * c)` against a constant tensor of the same shape.
    pub fn dot_const(&mut self, x: Var, c: Tensor<T>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(shape_err!(
                "dot_const: {:?} vs {:?}",
                self.shape(x),
                c.shape()
            ));
        }
        let s: T = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(&a, &b)| a * b)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::DotConst { x, c }, &[x]))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{}: {:?} vs {:?}",
                op,
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn check_channel_param(&self, op: &str, p: Var, c: usize) -> Result<()> {
        if self.shape(p) != [c] {
            return Err(shape_err!(
                "{}: parameter {:?} for {} channels",
                op,
                self.shape(p),
                c
            ));
        }
        Ok(())
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err!(
                "backward from non-scalar {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !g.all_finite() {
                return Err(FicoError::NonFinite(format!("gradient of tape node {}", i)));
            }
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let batch = xv.shape()[0];
                let per_sample = wv.ndim() == 5;
                let mut dx = self.wants(*x).then(|| vec![T::zero(); xv.numel()]);
                let mut dw = self.wants(*w).then(|| vec![T::zero(); wv.numel()]);
                let bias = b.filter(|bv| self.wants(*bv));
                let mut db = bias.map(|bv| vec![T::zero(); self.value(bv).numel()]);
                let per_sample_bias = bias.map(|bv| self.value(bv).ndim() == 2).unwrap_or(false);
                conv_backward(
                    xv.data(),
                    batch,
                    geom,
                    wv.data(),
                    per_sample,
                    gd,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut().map(|d| (d, per_sample_bias)),
                );
                if let Some(d) = dx {
                    self.accumulate(grads, *x, tensor_like(xv, d));
                }
                if let Some(d) = dw {
                    self.accumulate(grads, *w, tensor_like(wv, d));
                }
                if let (Some(bv), Some(d)) = (bias, db) {
                    self.accumulate(grads, bv, tensor_like(self.value(bv), d));
                }
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (bsz, fin) = (xv.shape()[0], xv.shape()[1]);
                let fout = wv.shape()[0];
                if self.wants(*x) {
                    let mut d = vec![T::zero(); xv.numel()];
                    T::gemm(
                        bsz,
                        fout,
                        fin,
                        T::one(),
                        gd,
                        (fout as isize, 1),
                        wv.data(),
                        (fin as isize, 1),
                        T::zero(),
                        &mut d,
                        (fin as isize, 1),
                    );
                    self.accumulate(grads, *x, tensor_like(xv, d));
                }
                if self.wants(*w) {
                    let mut d = vec![T::zero(); wv.numel()];
                    T::gemm(
                        fout,
                        bsz,
                        fin,
                        T::one(),
                        gd,
                        (1, fout as isize),
                        xv.data(),
                        (fin as isize, 1),
                        T::zero(),
                        &mut d,
                        (fin as isize, 1),
                    );
                    self.accumulate(grads, *w, tensor_like(wv, d));
                }
                if let Some(bv) = b {
                    if self.wants(*bv) {
                        let mut d = vec![T::zero(); fout];
                        for row in gd.chunks(fout) {
                            for (a, &r) in d.iter_mut().zip(row) {
                                *a = *a + r;
                            }
                        }
                        self.accumulate(grads, *bv, tensor_like(self.value(*bv), d));
                    }
                }
            }
            Op::MatMul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.wants(*a) {
                    let mut d = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        gd,
                        (n as isize, 1),
                        bv.data(),
                        (1, n as isize),
                        T::zero(),
                        &mut d,
                        (k as isize, 1),
                    );
                    self.accumulate(grads, *a, tensor_like(av, d));
                }
                if self.wants(*b) {
                    let mut d = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        av.data(),
                        (1, k as isize),
                        gd,
                        (n as isize, 1),
                        T::zero(),
                        &mut d,
                        (n as isize, 1),
                    );
                    self.accumulate(grads, *b, tensor_like(bv, d));
                }
            }
            Op::Reshape { x } => {
                let d = gd.to_vec();
                self.accumulate(grads, *x, tensor_like(self.value(*x), d));
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Scale { x, s } => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gg)| if v > T::zero() { gg } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, tensor_like(xv, d));
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gg)| if v > T::zero() { gg } else { gg * *slope })
                    .collect();
                self.accumulate(grads, *x, tensor_like(xv, d));
            }
            Op::InstanceNorm { x, inv_std } => {
                let xv = self.value(*x);
                let (_, _, h, w) = xv.dims4().expect("4-D");
                let n = h * w;
                let nf = T::of(n as f64);
                let xhat = node.value.data();
                let mut d = vec![T::zero(); xv.numel()];
                for (gi, is) in inv_std.iter().enumerate() {
                    let r = gi * n..(gi + 1) * n;
                    let dy = &gd[r.clone()];
                    let xh = &xhat[r.clone()];
                    let sum_dy: T = dy.iter().copied().sum();
                    let sum_dy_xh: T = dy.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                    for ((o, &dyv), &xhv) in d[r].iter_mut().zip(dy).zip(xh) {
                        *o = *is / nf * (nf * dyv - sum_dy - xhv * sum_dy_xh);
                    }
                }
                self.accumulate(grads, *x, tensor_like(xv, d));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                inv_std,
                xhat,
            } => {
                let xv = self.value(*x);
                let (b, c, h, w) = xv.dims4().expect("4-D");
                let hw = h * w;
                let nf = T::of((b * hw) as f64);
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xh = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * hw;
                        for i in off..off + hw {
                            sum_dy[ch] = sum_dy[ch] + gd[i];
                            sum_dy_xh[ch] = sum_dy_xh[ch] + gd[i] * xhat[i];
                        }
                    }
                }
                if self.wants(*x) {
                    let gv = self.value(*gamma).data();
                    let mut d = vec![T::zero(); xv.numel()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let off = (bi * c + ch) * hw;
                            let k = gv[ch] * inv_std[ch] / nf;
                            for i in off..off + hw {
                                d[i] = k * (nf * gd[i] - sum_dy[ch] - xhat[i] * sum_dy_xh[ch]);
                            }
                        }
                    }
                    self.accumulate(grads, *x, tensor_like(xv, d));
                }
                self.accumulate(grads, *gamma, tensor_like(self.value(*gamma), sum_dy_xh));
                self.accumulate(grads, *beta, tensor_like(self.value(*beta), sum_dy));
            }
            Op::FixedNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let xv = self.value(*x);
                let (b, c, h, w) = xv.dims4().expect("4-D");
                let hw = h * w;
                let gv = self.value(*gamma).data();
                let mut dx = vec![T::zero(); xv.numel()];
                let mut dg = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * hw;
                        for i in off..off + hw {
                            dx[i] = gd[i] * gv[ch] * inv_std[ch];
                            dg[ch] = dg[ch] + gd[i] * (xv.data()[i] - mean[ch]) * inv_std[ch];
                            dbeta[ch] = dbeta[ch] + gd[i];
                        }
                    }
                }
                self.accumulate(grads, *x, tensor_like(xv, dx));
                self.accumulate(grads, *gamma, tensor_like(self.value(*gamma), dg));
                self.accumulate(grads, *beta, tensor_like(self.value(*beta), dbeta));
            }
            Op::MaxPool2 { x, argmax } => {
                let xv = self.value(*x);
                let mut d = vec![T::zero(); xv.numel()];
                for (&src, &gg) in argmax.iter().zip(gd) {
                    d[src] = d[src] + gg;
                }
                self.accumulate(grads, *x, tensor_like(xv, d));
            }
            Op::Upsample2 { x } => {
                let xv = self.value(*x);
                let (b, c, h, w) = xv.dims4().expect("4-D");
                let mut d = vec![T::zero(); xv.numel()];
                for plane in 0..b * c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            let dst = (plane * h + y / 2) * w + xx / 2;
                            d[dst] = d[dst] + gd[(plane * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, tensor_like(xv, d));
            }
            Op::Concat { xs } => {
                let (b, ctot, h, w) = node.value.dims4().expect("4-D");
                let hw = h * w;
                let mut coff = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    if self.wants(v) {
                        let mut d = Vec::with_capacity(b * c * hw);
                        for bi in 0..b {
                            let start = (bi * ctot + coff) * hw;
                            d.extend_from_slice(&gd[start..start + c * hw]);
                        }
                        self.accumulate(grads, v, tensor_like(self.value(v), d));
                    }
                    coff += c;
                }
            }
            Op::GlobalAvgPool { x } => {
                let xv = self.value(*x);
                let (_, _, h, w) = xv.dims4().expect("4-D");
                let n = h * w;
                let inv = T::one() / T::of(n as f64);
                let mut d = vec![T::zero(); xv.numel()];
                for (plane, &gg) in gd.iter().enumerate() {
                    d[plane * n..(plane + 1) * n].fill(gg * inv);
                }
                self.accumulate(grads, *x, tensor_like(xv, d));
            }
            Op::Softmax { x } => {
                let p = node.value.shape()[1];
                let y = node.value.data();
                let mut d = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in d.chunks_mut(p).zip(y.chunks(p)).zip(gd.chunks(p)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, tensor_like(self.value(*x), d));
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let k = self.shape(*logits)[1];
                let scale = gd[0] / T::of(labels.len() as f64);
                let mut d = probs.clone();
                for (row, &l) in d.chunks_mut(k).zip(labels) {
                    row[l] = row[l] - T::one();
                    for v in row.iter_mut() {
                        *v = *v * scale;
                    }
                }
                self.accumulate(grads, *logits, tensor_like(self.value(*logits), d));
            }
            Op::CosineLocation { a, b } => {
                let av = self.value(*a);
                let (bsz, c, h, w) = av.dims4().expect("4-D");
                self.cosine_backward(*a, *b, bsz, c, h * w, gd[0], grads);
            }
            Op::CosineFlat { a, b } => {
                let av = self.value(*a);
                let bsz = av.shape().first().copied().unwrap_or(1).max(1);
                let n = av.numel() / bsz;
                self.cosine_backward(*a, *b, bsz, n, 1, gd[0], grads);
            }
            Op::Mse { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let k = T::of(2.0) * gd[0] / T::of(av.numel().max(1) as f64);
                let d: Vec<T> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&x, &y)| (x - y) * k)
                    .collect();
                if self.wants(*b) {
                    self.accumulate(grads, *b, tensor_like(bv, d.iter().map(|&v| -v).collect()));
                }
                self.accumulate(grads, *a, tensor_like(av, d));
            }
            Op::DotConst { x, c } => {
                let g0 = gd[0];
                self.accumulate(grads, *x, c.map(|v| v * g0));
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, Tensor::full(self.shape(v), gd[0] * w));
                }
            }
        }
    }

    /// Shared backward for the cosine distances. Vectors are `c` long with stride `hw`.
    #[allow(clippy::too_many_arguments)]
    fn cosine_backward(
        &self,
        a: Var,
        b: Var,
        bsz: usize,
        c: usize,
        hw: usize,
        g: T,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let stats = location_stats(av, bv, bsz, c, hw);
        let count = T::of(stats.len() as f64);
        let mut da = vec![T::zero(); av.len()];
        let mut db = vec![T::zero(); bv.len()];
        for bi in 0..bsz {
            for p in 0..hw {
                let s = &stats[bi * hw + p];
                let cos = T::of(s.cos());
                let denom = T::of(s.denom());
                let guarded = s.guarded();
                let inv_a2 = if guarded {
                    T::zero()
                } else {
                    T::of(1.0 / s.na2)
                };
                let inv_b2 = if guarded {
                    T::zero()
                } else {
                    T::of(1.0 / s.nb2)
                };
                let k = -g / count;
                for ch in 0..c {
                    let i = (bi * c + ch) * hw + p;
                    let x = av[i];
                    let y = bv[i];
                    da[i] = k * (y / denom - cos * x * inv_a2);
                    db[i] = k * (x / denom - cos * y * inv_b2);
                }
            }
        }
        let (ta, tb) = (self.value(a), self.value(b));
        self.accumulate(grads, a, tensor_like(ta, da));
        self.accumulate(grads, b, tensor_like(tb, db));
    }
}

#[derive(Clone, Copy, Debug)]
struct PairStats {
    dot: f64,
    na2: f64,
    nb2: f64,
}

impl PairStats {
    fn denom(&self) -> f64 {
        (self.na2 * self.nb2).sqrt().max(COSINE_EPS)
    }

    fn guarded(&self) -> bool {
        (self.na2 * self.nb2).sqrt() <= COSINE_EPS
    }

    fn cos(&self) -> f64 {
        self.dot / self.denom()
    }

    /// `1 - cos`, with the cosine clamped to `[-1, 1]` against rounding.
    fn distance(&self) -> f64 {
        1.0 - self.cos().clamp(-1.0, 1.0)
    }
}

/// Dot products and squared norms of the `c`-long vectors (stride `hw`) at each location.
fn location_stats<T: Scalar>(a: &[T], b: &[T], bsz: usize, c: usize, hw: usize) -> Vec<PairStats> {
    let mut stats = vec![
        PairStats {
            dot: 0.0,
            na2: 0.0,
            nb2: 0.0
        };
        bsz * hw
    ];
    for bi in 0..bsz {
        for ch in 0..c {
            let off = (bi * c + ch) * hw;
            for p in 0..hw {
                let x = a[off + p].f64();
                let y = b[off + p].f64();
                let s = &mut stats[bi * hw + p];
                s.dot += x * y;
                s.na2 += x * x;
                s.nb2 += y * y;
            }
        }
    }
    stats
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
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

fn dims2(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [a, b] => Ok((*a, *b)),
        _ => Err(shape_err!("expected a matrix, got {:?}", shape)),
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

fn tensor_like<T: Scalar>(like: &Tensor<T>, data: Vec<T>) -> Tensor<T> {
    Tensor::from_vec(like.shape(), data).expect("gradient shape")
}
