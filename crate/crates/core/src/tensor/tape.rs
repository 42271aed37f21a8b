//! Operation tape for reverse-mode differentiation.
//!
//! A `Tape` records every forward op in topological order; `backward`
//! replays the recorded ops in reverse, accumulating vector-Jacobian
//! products. A tape is confined to a single forward/backward pass on one
//! thread; parallelism lives inside the op kernels.

use super::conv::{self, BnSaved, Dims};
use super::{Scalar, Tensor, TensorError, VolumeDims};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub enum Op<T: Scalar> {
    Leaf,
    Conv3d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        din: Dims,
        dout: Dims,
        kdims: [usize; 5],
    },
    ConvTranspose3d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        din: Dims,
        dout: Dims,
        kdims: [usize; 5],
    },
    MaxPool3d {
        input: Var,
        argmax: Vec<usize>,
        din: Dims,
        dout: Dims,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        dims: Dims,
        eps: T,
        saved: BnSaved<T>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        dims: Dims,
        eps: T,
        running_mean: Vec<T>,
        running_var: Vec<T>,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Tanh {
        input: Var,
    },
    ConcatChannels {
        a: Var,
        b: Var,
        a_channels: usize,
        b_channels: usize,
        dims_out: Dims,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    /// Elementwise product where `param` is repeated along the leading
    /// batch axis of `input`.
    MulBcast {
        input: Var,
        param: Var,
    },
    SelectBatch {
        input: Var,
        index: usize,
    },
    SumAll {
        input: Var,
    },
    AbsSum {
        input: Var,
    },
    AddScalar {
        input: Var,
        value: T,
    },
    Scale {
        input: Var,
        value: T,
    },
    Neg {
        input: Var,
    },
    DivScalars {
        num: Var,
        den: Var,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by tape variable.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads[var.0].as_ref()
    }

    /// Gradient for a parameter leaf; zeros if no gradient flowed to it.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor<T> {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

#[derive(Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

#[inline]
fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
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

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// Record an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn dims_of(&self, var: Var, context: &'static str) -> Result<(Dims, bool), TensorError> {
        let v = self.value(var).volume_dims(context)?;
        Ok((
            Dims {
                n: v.batch,
                c: v.channels,
                x: v.x,
                y: v.y,
                z: v.z,
            },
            v.batched,
        ))
    }

    fn check_kernel(
        &self,
        kernel: Var,
        context: &'static str,
    ) -> Result<[usize; 5], TensorError> {
        let ks = self.value(kernel).shape();
        if ks.len() != 5 {
            return Err(TensorError::BadRank {
                context,
                shape: ks.to_vec(),
            });
        }
        Ok([ks[0], ks[1], ks[2], ks[3], ks[4]])
    }

    /// 3D convolution with zero padding `(k-1)/2` per axis. Stride 1
    /// preserves spatial extents and requires odd kernel extents.
    pub fn conv3d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var, TensorError> {
        const CTX: &str = "conv3d";
        if stride == 0 {
            return Err(TensorError::BadStride { context: CTX });
        }
        let (din, batched) = self.dims_of(input, CTX)?;
        let kdims = self.check_kernel(kernel, CTX)?;
        if din.c != kdims[1] {
            return Err(TensorError::AxisMismatch {
                context: CTX,
                axis: "channel",
                expected: kdims[1],
                got: din.c,
            });
        }
        if stride == 1 {
            for (axis, ke) in [("x", kdims[2]), ("y", kdims[3]), ("z", kdims[4])] {
                if ke % 2 == 0 {
                    return Err(TensorError::EvenKernel { axis, extent: ke });
                }
            }
        }
        if let Some(b) = bias {
            let blen = self.value(b).numel();
            if blen != kdims[0] {
                return Err(TensorError::AxisMismatch {
                    context: CTX,
                    axis: "channel",
                    expected: kdims[0],
                    got: blen,
                });
            }
        }
        let bias_data = bias.map(|b| self.value(b).data().to_vec());
        let (out, dout) = conv::conv3d_forward(
            self.value(input).data(),
            din,
            self.value(kernel).data(),
            kdims,
            bias_data.as_deref(),
            stride,
        );
        let shape = out_shape(dout, batched);
        let needs = self.needs(input)
            || self.needs(kernel)
            || bias.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(
            Tensor::new(shape, out).expect("conv output shape"),
            Op::Conv3d {
                input,
                kernel,
                bias,
                stride,
                din,
                dout,
                kdims,
            },
            needs,
        ))
    }

    /// Transpose convolution: the exact adjoint of [`Tape::conv3d`] with
    /// the same kernel and stride. Input channels match the kernel's first
    /// axis; output channels its second; bias (if any) has one entry per
    /// output channel.
    pub fn conv_transpose3d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var, TensorError> {
        const CTX: &str = "conv_transpose3d";
        if stride == 0 {
            return Err(TensorError::BadStride { context: CTX });
        }
        let (din, batched) = self.dims_of(input, CTX)?;
        let kdims = self.check_kernel(kernel, CTX)?;
        if din.c != kdims[0] {
            return Err(TensorError::AxisMismatch {
                context: CTX,
                axis: "channel",
                expected: kdims[0],
                got: din.c,
            });
        }
        if let Some(b) = bias {
            let blen = self.value(b).numel();
            if blen != kdims[1] {
                return Err(TensorError::AxisMismatch {
                    context: CTX,
                    axis: "channel",
                    expected: kdims[1],
                    got: blen,
                });
            }
        }
        let bias_data = bias.map(|b| self.value(b).data().to_vec());
        let (out, dout) = conv::conv_transpose3d_forward(
            self.value(input).data(),
            din,
            self.value(kernel).data(),
            kdims,
            bias_data.as_deref(),
            stride,
        );
        let shape = out_shape(dout, batched);
        let needs = self.needs(input)
            || self.needs(kernel)
            || bias.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(
            Tensor::new(shape, out).expect("transpose conv output shape"),
            Op::ConvTranspose3d {
                input,
                kernel,
                bias,
                stride,
                din,
                dout,
                kdims,
            },
            needs,
        ))
    }

    /// Max pooling over non-overlapping windows; gradient routes to the
    /// argmax voxel (first index on ties).
    pub fn max_pool3d(
        &mut self,
        input: Var,
        window: usize,
        stride: usize,
    ) -> Result<Var, TensorError> {
        const CTX: &str = "max_pool3d";
        if stride == 0 || window == 0 {
            return Err(TensorError::BadStride { context: CTX });
        }
        let (din, batched) = self.dims_of(input, CTX)?;
        for (axis, e) in [("x", din.x), ("y", din.y), ("z", din.z)] {
            if e < window || (e - window) % stride != 0 {
                return Err(TensorError::PoolIndivisible {
                    axis,
                    extent: e,
                    stride,
                });
            }
        }
        let (out, argmax, dout) = conv::max_pool3d_forward(self.value(input).data(), din, window, stride);
        let shape = out_shape(dout, batched);
        let needs = self.needs(input);
        Ok(self.push(
            Tensor::new(shape, out).expect("pool output shape"),
            Op::MaxPool3d {
                input,
                argmax,
                din,
                dout,
            },
            needs,
        ))
    }

    /// Training-mode batch norm. Also returns the per-channel batch mean
    /// and biased variance so the caller can update running statistics.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>), TensorError> {
        const CTX: &str = "batch_norm3d";
        let (dims, _) = self.dims_of(input, CTX)?;
        self.check_bn_params(gamma, beta, dims.c)?;
        let (out, saved) = conv::batch_norm_train(
            self.value(input).data(),
            dims,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let mean = saved.mean.clone();
        let var = saved.var.clone();
        let shape = self.value(input).shape().to_vec();
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let v = self.push(
            Tensor::new(shape, out).expect("bn output shape"),
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                dims,
                eps,
                saved,
            },
            needs,
        );
        Ok((v, mean, var))
    }

    /// Eval-mode batch norm with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var, TensorError> {
        const CTX: &str = "batch_norm3d";
        let (dims, _) = self.dims_of(input, CTX)?;
        self.check_bn_params(gamma, beta, dims.c)?;
        if running_mean.len() != dims.c || running_var.len() != dims.c {
            return Err(TensorError::AxisMismatch {
                context: CTX,
                axis: "channel",
                expected: dims.c,
                got: running_mean.len().min(running_var.len()),
            });
        }
        let out = conv::batch_norm_eval(
            self.value(input).data(),
            dims,
            self.value(gamma).data(),
            self.value(beta).data(),
            running_mean,
            running_var,
            eps,
        );
        let shape = self.value(input).shape().to_vec();
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(shape, out).expect("bn output shape"),
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                dims,
                eps,
                running_mean: running_mean.to_vec(),
                running_var: running_var.to_vec(),
            },
            needs,
        ))
    }

    fn check_bn_params(&self, gamma: Var, beta: Var, channels: usize) -> Result<(), TensorError> {
        for v in [gamma, beta] {
            let n = self.value(v).numel();
            if n != channels {
                return Err(TensorError::AxisMismatch {
                    context: "batch_norm3d",
                    axis: "channel",
                    expected: channels,
                    got: n,
                });
            }
        }
        Ok(())
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self
            .value(input)
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let shape = self.value(input).shape().to_vec();
        let needs = self.needs(input);
        self.push(
            Tensor::new(shape, out).expect("relu shape"),
            Op::Relu { input },
            needs,
        )
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = self
            .value(input)
            .data()
            .iter()
            .map(|&v| stable_sigmoid(v))
            .collect();
        let shape = self.value(input).shape().to_vec();
        let needs = self.needs(input);
        self.push(
            Tensor::new(shape, out).expect("sigmoid shape"),
            Op::Sigmoid { input },
            needs,
        )
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        let out = self.value(input).data().iter().map(|&v| v.tanh()).collect();
        let shape = self.value(input).shape().to_vec();
        let needs = self.needs(input);
        self.push(
            Tensor::new(shape, out).expect("tanh shape"),
            Op::Tanh { input },
            needs,
        )
    }

    /// Concatenate along the channel axis. A zero-channel side passes the
    /// other side through unchanged.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        const CTX: &str = "concat_channels";
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        let ca = channel_count(&sa, CTX)?;
        let cb = channel_count(&sb, CTX)?;
        if cb == 0 {
            return Ok(self.alias(a));
        }
        if ca == 0 {
            return Ok(self.alias(b));
        }
        let (da, batched_a) = self.dims_of(a, CTX)?;
        let (db, _) = self.dims_of(b, CTX)?;
        for (axis, ea, eb) in [
            ("batch", da.n, db.n),
            ("x", da.x, db.x),
            ("y", da.y, db.y),
            ("z", da.z, db.z),
        ] {
            if ea != eb {
                return Err(TensorError::AxisMismatch {
                    context: CTX,
                    axis,
                    expected: ea,
                    got: eb,
                });
            }
        }
        let dims_out = Dims {
            n: da.n,
            c: da.c + db.c,
            x: da.x,
            y: da.y,
            z: da.z,
        };
        let spatial = dims_out.x * dims_out.y * dims_out.z;
        let mut out = vec![T::zero(); dims_out.numel()];
        let adata = self.value(a).data();
        let bdata = self.value(b).data();
        for n in 0..dims_out.n {
            let dst = &mut out[n * dims_out.c * spatial..(n + 1) * dims_out.c * spatial];
            dst[..da.c * spatial]
                .copy_from_slice(&adata[n * da.c * spatial..(n + 1) * da.c * spatial]);
            dst[da.c * spatial..]
                .copy_from_slice(&bdata[n * db.c * spatial..(n + 1) * db.c * spatial]);
        }
        let shape = out_shape(dims_out, batched_a);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(shape, out).expect("concat shape"),
            Op::ConcatChannels {
                a,
                b,
                a_channels: da.c,
                b_channels: db.c,
                dims_out,
            },
            needs,
        ))
    }

    /// Identity node (used by concat with a zero-channel side).
    fn alias(&mut self, input: Var) -> Var {
        let value = self.value(input).clone();
        let needs = self.needs(input);
        self.push(
            value,
            Op::Scale {
                input,
                value: T::one(),
            },
            needs,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_op(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_op(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    fn zip_op(
        &mut self,
        a: Var,
        b: Var,
        context: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(TensorError::AxisMismatch {
                context,
                axis: "shape",
                expected: self.value(a).numel(),
                got: self.value(b).numel(),
            });
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = sa.to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out).expect("zip shape"), op, needs))
    }

    /// `input ∘ param` where `param` matches the trailing axes of `input`
    /// and is repeated along the leading batch axis.
    pub fn mul_bcast(&mut self, input: Var, param: Var) -> Result<Var, TensorError> {
        const CTX: &str = "mul_bcast";
        let si = self.value(input).shape().to_vec();
        let sp = self.value(param).shape().to_vec();
        if si == sp {
            return self.mul(input, param);
        }
        if si.len() != sp.len() + 1 || si[1..] != sp[..] {
            return Err(TensorError::AxisMismatch {
                context: CTX,
                axis: "shape",
                expected: self.value(input).numel(),
                got: self.value(param).numel(),
            });
        }
        let pn = self.value(param).numel();
        let out: Vec<T> = self
            .value(input)
            .data()
            .chunks(pn)
            .flat_map(|chunk| {
                chunk
                    .iter()
                    .zip(self.value(param).data())
                    .map(|(&x, &p)| x * p)
                    .collect::<Vec<_>>()
            })
            .collect();
        let needs = self.needs(input) || self.needs(param);
        Ok(self.push(
            Tensor::new(si, out).expect("mul_bcast shape"),
            Op::MulBcast { input, param },
            needs,
        ))
    }

    /// Select one batch element of a rank-5 tensor as a rank-4 tensor.
    pub fn select_batch(&mut self, input: Var, index: usize) -> Result<Var, TensorError> {
        const CTX: &str = "select_batch";
        let d = self.value(input).volume_dims(CTX)?;
        if !d.batched || index >= d.batch {
            return Err(TensorError::AxisMismatch {
                context: CTX,
                axis: "batch",
                expected: d.batch,
                got: index,
            });
        }
        let per = d.channels * d.spatial_numel();
        let out = self.value(input).data()[index * per..(index + 1) * per].to_vec();
        let shape = vec![d.channels, d.x, d.y, d.z];
        let needs = self.needs(input);
        Ok(self.push(
            Tensor::new(shape, out).expect("select shape"),
            Op::SelectBatch { input, index },
            needs,
        ))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum_all(&mut self, input: Var) -> Var {
        let total: T = self.value(input).data().iter().copied().sum();
        let needs = self.needs(input);
        self.push(Tensor::scalar(total), Op::SumAll { input }, needs)
    }

    /// Sum of absolute values, as a scalar node. Subgradient 0 at 0.
    pub fn abs_sum(&mut self, input: Var) -> Var {
        let total: T = self.value(input).data().iter().map(|v| v.abs()).sum();
        let needs = self.needs(input);
        self.push(Tensor::scalar(total), Op::AbsSum { input }, needs)
    }

    pub fn add_scalar(&mut self, input: Var, value: T) -> Var {
        let out = self.value(input).data().iter().map(|&v| v + value).collect();
        let shape = self.value(input).shape().to_vec();
        let needs = self.needs(input);
        self.push(
            Tensor::new(shape, out).expect("add_scalar shape"),
            Op::AddScalar { input, value },
            needs,
        )
    }

    pub fn scale(&mut self, input: Var, value: T) -> Var {
        let out = self.value(input).data().iter().map(|&v| v * value).collect();
        let shape = self.value(input).shape().to_vec();
        let needs = self.needs(input);
        self.push(
            Tensor::new(shape, out).expect("scale shape"),
            Op::Scale { input, value },
            needs,
        )
    }

    pub fn neg(&mut self, input: Var) -> Var {
        self.scale(input, -T::one())
    }

    /// Scalar division `num / den` of two single-element nodes.
    pub fn div_scalars(&mut self, num: Var, den: Var) -> Result<Var, TensorError> {
        for v in [num, den] {
            if self.value(v).numel() != 1 {
                return Err(TensorError::NonScalarLoss {
                    shape: self.value(v).shape().to_vec(),
                });
            }
        }
        let out = self.value(num).item() / self.value(den).item();
        let needs = self.needs(num) || self.needs(den);
        Ok(self.push(Tensor::scalar(out), Op::DivScalars { num, den }, needs))
    }

    /// Reverse sweep from a scalar loss node. Returns one gradient per
    /// node that requires it; each recorded op is visited exactly once.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..self.nodes.len()).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.backward_op(idx, &g, &mut grads);
            // Keep the gradient for leaves and for the loss itself.
            if matches!(self.nodes[idx].op, Op::Leaf) || idx == loss.0 {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], var: Var, delta_data: Vec<T>) {
        if !self.nodes[var.0].needs_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(&delta_data) {
                    *e = *e + *d;
                }
            }
            None => {
                let shape = self.value(var).shape().to_vec();
                grads[var.0] = Some(Tensor::new(shape, delta_data).expect("grad shape"));
            }
        }
    }

    fn backward_op(&self, idx: usize, g: &Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv3d {
                input,
                kernel,
                bias,
                stride,
                din,
                dout,
                kdims,
            } => {
                if self.needs(*input) {
                    let d_in = conv::conv3d_backward_input(
                        g.data(),
                        *dout,
                        self.value(*kernel).data(),
                        *kdims,
                        *din,
                        *stride,
                    );
                    self.accumulate(grads, *input, d_in);
                }
                if self.needs(*kernel) {
                    let d_k = conv::conv3d_backward_kernel(
                        g.data(),
                        *dout,
                        self.value(*input).data(),
                        *din,
                        *kdims,
                        *stride,
                    );
                    self.accumulate(grads, *kernel, d_k);
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        self.accumulate(grads, *b, conv::sum_per_channel(g.data(), *dout));
                    }
                }
            }
            Op::ConvTranspose3d {
                input,
                kernel,
                bias,
                stride,
                din,
                dout,
                kdims,
            } => {
                if self.needs(*input) {
                    let d_in = conv::conv_transpose3d_backward_input(
                        g.data(),
                        *dout,
                        self.value(*kernel).data(),
                        *kdims,
                        *din,
                        *stride,
                    );
                    self.accumulate(grads, *input, d_in);
                }
                if self.needs(*kernel) {
                    let d_k = conv::conv_transpose3d_backward_kernel(
                        g.data(),
                        *dout,
                        self.value(*input).data(),
                        *din,
                        *kdims,
                        *stride,
                    );
                    self.accumulate(grads, *kernel, d_k);
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        self.accumulate(grads, *b, conv::sum_per_channel(g.data(), *dout));
                    }
                }
            }
            Op::MaxPool3d {
                input,
                argmax,
                din,
                dout,
            } => {
                let d_in = conv::max_pool3d_backward(g.data(), *dout, argmax, *din);
                self.accumulate(grads, *input, d_in);
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                dims,
                eps,
                saved,
            } => {
                let (d_in, d_gamma, d_beta) = conv::batch_norm_train_backward(
                    g.data(),
                    *dims,
                    self.value(*gamma).data(),
                    saved,
                    *eps,
                );
                self.accumulate(grads, *input, d_in);
                self.accumulate(grads, *gamma, d_gamma);
                self.accumulate(grads, *beta, d_beta);
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                dims,
                eps,
                running_mean,
                running_var,
            } => {
                let (d_in, d_gamma, d_beta) = conv::batch_norm_eval_backward(
                    g.data(),
                    *dims,
                    self.value(*input).data(),
                    self.value(*gamma).data(),
                    running_mean,
                    running_var,
                    *eps,
                );
                self.accumulate(grads, *input, d_in);
                self.accumulate(grads, *gamma, d_gamma);
                self.accumulate(grads, *beta, d_beta);
            }
            Op::Relu { input } => {
                let d_in = self
                    .value(*input)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gi)| if x > T::zero() { gi } else { T::zero() })
                    .collect();
                self.accumulate(grads, *input, d_in);
            }
            Op::Sigmoid { input } => {
                let d_in = self.nodes[idx]
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&o, &gi)| gi * o * (T::one() - o))
                    .collect();
                self.accumulate(grads, *input, d_in);
            }
            Op::Tanh { input } => {
                let d_in = self.nodes[idx]
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&o, &gi)| gi * (T::one() - o * o))
                    .collect();
                self.accumulate(grads, *input, d_in);
            }
            Op::ConcatChannels {
                a,
                b,
                a_channels,
                b_channels,
                dims_out,
            } => {
                let spatial = dims_out.x * dims_out.y * dims_out.z;
                let mut d_a = vec![T::zero(); dims_out.n * a_channels * spatial];
                let mut d_b = vec![T::zero(); dims_out.n * b_channels * spatial];
                for n in 0..dims_out.n {
                    let src = &g.data()[n * dims_out.c * spatial..(n + 1) * dims_out.c * spatial];
                    d_a[n * a_channels * spatial..(n + 1) * a_channels * spatial]
                        .copy_from_slice(&src[..a_channels * spatial]);
                    d_b[n * b_channels * spatial..(n + 1) * b_channels * spatial]
                        .copy_from_slice(&src[a_channels * spatial..]);
                }
                self.accumulate(grads, *a, d_a);
                self.accumulate(grads, *b, d_b);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.data().to_vec());
                self.accumulate(grads, *b, g.data().to_vec());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.data().to_vec());
                self.accumulate(grads, *b, g.data().iter().map(|&v| -v).collect());
            }
            Op::Mul { a, b } => {
                let d_a = g
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(&gi, &y)| gi * y)
                    .collect();
                let d_b = g
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&gi, &x)| gi * x)
                    .collect();
                self.accumulate(grads, *a, d_a);
                self.accumulate(grads, *b, d_b);
            }
            Op::MulBcast { input, param } => {
                let pn = self.value(*param).numel();
                let pdata = self.value(*param).data();
                let d_in: Vec<T> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * pdata[i % pn])
                    .collect();
                self.accumulate(grads, *input, d_in);
                if self.needs(*param) {
                    let xdata = self.value(*input).data();
                    let mut d_p = vec![T::zero(); pn];
                    for (i, &gi) in g.data().iter().enumerate() {
                        d_p[i % pn] = d_p[i % pn] + gi * xdata[i];
                    }
                    self.accumulate(grads, *param, d_p);
                }
            }
            Op::SelectBatch { input, index } => {
                let numel = self.value(*input).numel();
                let per = g.numel();
                let mut d_in = vec![T::zero(); numel];
                d_in[index * per..(index + 1) * per].copy_from_slice(g.data());
                self.accumulate(grads, *input, d_in);
            }
            Op::SumAll { input } => {
                let gi = g.item();
                let d_in = vec![gi; self.value(*input).numel()];
                self.accumulate(grads, *input, d_in);
            }
            Op::AbsSum { input } => {
                let gi = g.item();
                let d_in = self
                    .value(*input)
                    .data()
                    .iter()
                    .map(|&x| {
                        if x > T::zero() {
                            gi
                        } else if x < T::zero() {
                            -gi
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, *input, d_in);
            }
            Op::AddScalar { input, .. } => {
                self.accumulate(grads, *input, g.data().to_vec());
            }
            Op::Scale { input, value } => {
                let d_in = g.data().iter().map(|&gi| gi * *value).collect();
                self.accumulate(grads, *input, d_in);
            }
            Op::Neg { input } => {
                self.accumulate(grads, *input, g.data().iter().map(|&v| -v).collect());
            }
            Op::DivScalars { num, den } => {
                let gi = g.item();
                let n = self.value(*num).item();
                let d = self.value(*den).item();
                self.accumulate(grads, *num, vec![gi / d]);
                self.accumulate(grads, *den, vec![-gi * n / (d * d)]);
            }
        }
    }
}

fn out_shape(d: Dims, batched: bool) -> Vec<usize> {
    if batched {
        vec![d.n, d.c, d.x, d.y, d.z]
    } else {
        vec![d.c, d.x, d.y, d.z]
    }
}

fn channel_count(shape: &[usize], context: &'static str) -> Result<usize, TensorError> {
    match shape.len() {
        4 => Ok(shape[0]),
        5 => Ok(shape[1]),
        _ => Err(TensorError::BadRank {
            context,
            shape: shape.to_vec(),
        }),
    }
}
