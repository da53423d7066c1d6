//! Raw numeric kernels shared by the forward and backward passes.
//!
//! All image tensors are NCHW. Convolution weights are `[C_out, C_in, k, k]`;
//! transpose-convolution weights reuse the same array as the adjoint conv,
//! i.e. `[C_in_t, C_out_t, k, k]` with `C_in_t` the conv's output channels.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Output indices `o` in `[0, out_len)` for which `o*stride + k_off - pad`
/// lands inside `[0, in_len)`.
#[inline]
fn valid_range(k_off: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k_off {
        (pad - k_off).div_ceil(stride)
    } else {
        0
    };
    let hi_num = in_len as isize - 1 + pad as isize - k_off as isize;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = ((hi_num as usize) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Cross-correlation `out[b,co] = bias[co] + sum_ci w[co,ci] * in[b,ci]`.
pub(crate) fn conv_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let plane_in = g.h_in * g.w_in;
    let plane_out = g.h_out * g.w_out;
    let mut out = vec![0.0; g.batch * g.c_out * plane_out];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let o_off = (b * g.c_out + co) * plane_out;
            let o_plane = &mut out[o_off..o_off + plane_out];
            if let Some(bias) = bias {
                o_plane.iter_mut().for_each(|v| *v = bias[co]);
            }
            for ci in 0..g.c_in {
                let i_plane = &input[(b * g.c_in + ci) * plane_in..][..plane_in];
                let w_base = (co * g.c_in + ci) * g.k * g.k;
                for kh in 0..g.k {
                    let (oh0, oh1) = valid_range(kh, g.pad, g.stride, g.h_in, g.h_out);
                    for kw in 0..g.k {
                        let w = weight[w_base + kh * g.k + kw];
                        if w == 0.0 {
                            continue;
                        }
                        let (ow0, ow1) = valid_range(kw, g.pad, g.stride, g.w_in, g.w_out);
                        for oh in oh0..oh1 {
                            let ih = oh * g.stride + kh - g.pad;
                            let row_in = &i_plane[ih * g.w_in..(ih + 1) * g.w_in];
                            let row_out = &mut o_plane[oh * g.w_out..(oh + 1) * g.w_out];
                            for ow in ow0..ow1 {
                                row_out[ow] += w * row_in[ow * g.stride + kw - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of `conv_forward` with respect to its input (also the forward
/// pass of the transpose convolution).
pub(crate) fn conv_grad_input(g: &ConvGeom, grad_out: &[f64], weight: &[f64]) -> Vec<f64> {
    let plane_in = g.h_in * g.w_in;
    let plane_out = g.h_out * g.w_out;
    let mut grad_in = vec![0.0; g.batch * g.c_in * plane_in];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let go_plane = &grad_out[(b * g.c_out + co) * plane_out..][..plane_out];
            for ci in 0..g.c_in {
                let gi_off = (b * g.c_in + ci) * plane_in;
                let gi_plane = &mut grad_in[gi_off..gi_off + plane_in];
                let w_base = (co * g.c_in + ci) * g.k * g.k;
                for kh in 0..g.k {
                    let (oh0, oh1) = valid_range(kh, g.pad, g.stride, g.h_in, g.h_out);
                    for kw in 0..g.k {
                        let w = weight[w_base + kh * g.k + kw];
                        if w == 0.0 {
                            continue;
                        }
                        let (ow0, ow1) = valid_range(kw, g.pad, g.stride, g.w_in, g.w_out);
                        for oh in oh0..oh1 {
                            let ih = oh * g.stride + kh - g.pad;
                            let row_go = &go_plane[oh * g.w_out..(oh + 1) * g.w_out];
                            let row_gi = &mut gi_plane[ih * g.w_in..(ih + 1) * g.w_in];
                            for ow in ow0..ow1 {
                                row_gi[ow * g.stride + kw - g.pad] += w * row_go[ow];
                            }
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// Gradient of `conv_forward` with respect to the weight.
pub(crate) fn conv_grad_weight(g: &ConvGeom, input: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let plane_in = g.h_in * g.w_in;
    let plane_out = g.h_out * g.w_out;
    let mut grad_w = vec![0.0; g.c_out * g.c_in * g.k * g.k];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let go_plane = &grad_out[(b * g.c_out + co) * plane_out..][..plane_out];
            for ci in 0..g.c_in {
                let i_plane = &input[(b * g.c_in + ci) * plane_in..][..plane_in];
                let w_base = (co * g.c_in + ci) * g.k * g.k;
                for kh in 0..g.k {
                    let (oh0, oh1) = valid_range(kh, g.pad, g.stride, g.h_in, g.h_out);
                    for kw in 0..g.k {
                        let (ow0, ow1) = valid_range(kw, g.pad, g.stride, g.w_in, g.w_out);
                        let mut acc = 0.0;
                        for oh in oh0..oh1 {
                            let ih = oh * g.stride + kh - g.pad;
                            let row_go = &go_plane[oh * g.w_out..(oh + 1) * g.w_out];
                            let row_in = &i_plane[ih * g.w_in..(ih + 1) * g.w_in];
                            for ow in ow0..ow1 {
                                acc += row_go[ow] * row_in[ow * g.stride + kw - g.pad];
                            }
                        }
                        grad_w[w_base + kh * g.k + kw] += acc;
                    }
                }
            }
        }
    }
    grad_w
}

/// Per-channel sum over batch and spatial positions.
pub(crate) fn channel_sums(x: &[f64], batch: usize, channels: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; channels];
    for b in 0..batch {
        for (c, acc) in out.iter_mut().enumerate() {
            *acc += x[(b * channels + c) * plane..][..plane].iter().sum::<f64>();
        }
    }
    out
}

/// Divisive normalization. Returns the output and the per-element
/// normalizer `beta_i + sum_j gamma_ij x_j^2`.
pub(crate) fn gdn_forward(
    x: &[f64],
    batch: usize,
    channels: usize,
    plane: usize,
    beta: &[f64],
    gamma: &[f64],
    inverse: bool,
) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; x.len()];
    let mut norm = vec![0.0; x.len()];
    let mut sq = vec![0.0; channels];
    for b in 0..batch {
        let base = b * channels * plane;
        for p in 0..plane {
            for (j, s) in sq.iter_mut().enumerate() {
                let v = x[base + j * plane + p];
                *s = v * v;
            }
            for i in 0..channels {
                let row = &gamma[i * channels..(i + 1) * channels];
                let n = beta[i] + row.iter().zip(&sq).map(|(g, s)| g * s).sum::<f64>();
                let idx = base + i * plane + p;
                norm[idx] = n;
                out[idx] = if inverse { x[idx] * n.sqrt() } else { x[idx] / n.sqrt() };
            }
        }
    }
    (out, norm)
}

/// Backward pass of `gdn_forward`: returns (grad_x, grad_beta, grad_gamma).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gdn_backward(
    x: &[f64],
    norm: &[f64],
    grad_out: &[f64],
    batch: usize,
    channels: usize,
    plane: usize,
    gamma: &[f64],
    inverse: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let e = if inverse { 0.5 } else { -0.5 };
    let mut gx = vec![0.0; x.len()];
    let mut gbeta = vec![0.0; channels];
    let mut ggamma = vec![0.0; channels * channels];
    // t_i = g_i * e * x_i * norm_i^(e-1) is dL/dnorm_i
    let mut t = vec![0.0; channels];
    for b in 0..batch {
        let base = b * channels * plane;
        for p in 0..plane {
            for (i, ti) in t.iter_mut().enumerate() {
                let idx = base + i * plane + p;
                let n = norm[idx];
                *ti = grad_out[idx] * e * x[idx] * n.powf(e - 1.0);
                gx[idx] += grad_out[idx] * n.powf(e);
                gbeta[i] += *ti;
            }
            for i in 0..channels {
                for j in 0..channels {
                    let xj = x[base + j * plane + p];
                    ggamma[i * channels + j] += t[i] * xj * xj;
                    gx[base + j * plane + p] += t[i] * 2.0 * gamma[i * channels + j] * xj;
                }
            }
        }
    }
    (gx, gbeta, ggamma)
}
