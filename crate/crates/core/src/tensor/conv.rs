//! 3D convolution over channels-last `[batch, depth, height, width, channels]`
//! volumes with `[kd, kh, kw, c_in, c_out]` kernels.
//!
//! The graph uses the unrolled path (`im2col` + one matrix product); the
//! direct loop version is kept alongside as the reference it is tested against.

use serde::{Deserialize, Serialize};

use super::gemm::gemm;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv3dSpec {
    pub padding: [usize; 3],
    pub stride: [usize; 3],
}

impl Default for Conv3dSpec {
    fn default() -> Self {
        Conv3dSpec {
            padding: [1, 1, 1],
            stride: [1, 1, 1],
        }
    }
}

impl Conv3dSpec {
    /// Stride 1 with `k/2` padding, which preserves extents for odd kernels.
    pub fn same(kernel: [usize; 3]) -> Self {
        Conv3dSpec {
            padding: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2],
            stride: [1, 1, 1],
        }
    }
}

pub fn conv_output_extent(input: usize, kernel: usize, padding: usize, stride: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub input: [usize; 3],
    pub c_in: usize,
    pub kernel: [usize; 3],
    pub c_out: usize,
    pub output: [usize; 3],
    pub spec: Conv3dSpec,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], spec: Conv3dSpec) -> Result<Self> {
        if input.len() != 5 {
            return Err(Error::shape(
                "conv3d",
                format!("input must be [B,D,H,W,C], got {input:?}"),
            ));
        }
        if kernel.len() != 5 {
            return Err(Error::shape(
                "conv3d",
                format!("kernel must be [kd,kh,kw,Cin,Cout], got {kernel:?}"),
            ));
        }
        if input[4] != kernel[3] {
            return Err(Error::shape(
                "conv3d",
                format!(
                    "input has {} channels but kernel expects {}",
                    input[4], kernel[3]
                ),
            ));
        }
        let mut output = [0; 3];
        for axis in 0..3 {
            output[axis] = conv_output_extent(
                input[axis + 1],
                kernel[axis],
                spec.padding[axis],
                spec.stride[axis],
            )
            .ok_or_else(|| {
                Error::shape(
                    "conv3d",
                    format!(
                        "kernel extent {} does not fit input extent {} with padding {} and stride {} on axis {axis}",
                        kernel[axis], input[axis + 1], spec.padding[axis], spec.stride[axis]
                    ),
                )
            })?;
        }
        Ok(ConvGeometry {
            batch: input[0],
            input: [input[1], input[2], input[3]],
            c_in: input[4],
            kernel: [kernel[0], kernel[1], kernel[2]],
            c_out: kernel[4],
            output,
            spec,
        })
    }

    pub fn rows(&self) -> usize {
        self.batch * self.output.iter().product::<usize>()
    }

    pub fn patch(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.c_in
    }

    pub fn output_dims(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.output[0],
            self.output[1],
            self.output[2],
            self.c_out,
        ]
    }

    /// Visits every (row, patch column block, input offset) triple where the
    /// kernel tap lands inside the unpadded input.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [id, ih, iw] = self.input;
        let [kd, kh, kw] = self.kernel;
        let [od, oh, ow] = self.output;
        let [pd, ph, pw] = self.spec.padding.map(|p| p as isize);
        let [sd, sh, sw] = self.spec.stride;
        let c = self.c_in;
        let mut row = 0;
        for b in 0..self.batch {
            for z in 0..od {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut tap = 0;
                        for a in 0..kd {
                            let zi = (z * sd + a) as isize - pd;
                            for bb in 0..kh {
                                let yi = (y * sh + bb) as isize - ph;
                                for cc in 0..kw {
                                    let xi = (x * sw + cc) as isize - pw;
                                    if zi >= 0
                                        && yi >= 0
                                        && xi >= 0
                                        && (zi as usize) < id
                                        && (yi as usize) < ih
                                        && (xi as usize) < iw
                                    {
                                        let src = (((b * id + zi as usize) * ih + yi as usize) * iw
                                            + xi as usize)
                                            * c;
                                        f(row, tap * c, src);
                                    }
                                    tap += 1;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    pub fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let patch = self.patch();
        let c = self.c_in;
        let mut cols = vec![0.0; self.rows() * patch];
        self.for_each_tap(|row, col, src| {
            let dst = row * patch + col;
            cols[dst..dst + c].copy_from_slice(&input[src..src + c]);
        });
        cols
    }

    pub fn col2im(&self, cols: &[f64], input_grad: &mut [f64]) {
        let patch = self.patch();
        let c = self.c_in;
        self.for_each_tap(|row, col, src| {
            let from = row * patch + col;
            for (g, &v) in input_grad[src..src + c].iter_mut().zip(&cols[from..from + c]) {
                *g += v;
            }
        });
    }
}

/// Unrolled forward pass. Returns the output and the patch matrix for reuse
/// in the backward pass.
pub(crate) fn conv3d_unrolled(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    geom: &ConvGeometry,
) -> (Tensor, Vec<f64>) {
    let cols = geom.im2col(input.data());
    let rows = geom.rows();
    let mut out = vec![0.0; rows * geom.c_out];
    gemm(
        rows,
        geom.patch(),
        geom.c_out,
        &cols,
        false,
        kernel.data(),
        false,
        &mut out,
        false,
    );
    if let Some(bias) = bias {
        for row in out.chunks_exact_mut(geom.c_out) {
            for (o, &b) in row.iter_mut().zip(bias.data()) {
                *o += b;
            }
        }
    }
    let shape = super::Shape::from_dims_unchecked(geom.output_dims());
    (Tensor::from_parts(shape, out), cols)
}

fn check_bias(bias: Option<&Tensor>, c_out: usize) -> Result<()> {
    if let Some(bias) = bias {
        if bias.dims() != [c_out] {
            return Err(Error::shape(
                "conv3d",
                format!("bias must have shape ({c_out}), got {}", bias.shape()),
            ));
        }
    }
    Ok(())
}

pub(crate) fn geometry(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    spec: Conv3dSpec,
) -> Result<ConvGeometry> {
    let geom = ConvGeometry::new(input.dims(), kernel.dims(), spec)?;
    check_bias(bias, geom.c_out)?;
    Ok(geom)
}

/// Direct seven-loop convolution, no unrolling. Slow; used to cross-check the
/// unrolled path.
pub fn conv3d_direct(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    spec: Conv3dSpec,
) -> Result<Tensor> {
    let g = geometry(input, kernel, bias, spec)?;
    let mut out = Tensor::zeros(g.output_dims())?;
    let [id, ih, iw] = g.input;
    for b in 0..g.batch {
        for z in 0..g.output[0] {
            for y in 0..g.output[1] {
                for x in 0..g.output[2] {
                    for co in 0..g.c_out {
                        let mut acc = bias.map_or(0.0, |t| t.data()[co]);
                        for a in 0..g.kernel[0] {
                            for bb in 0..g.kernel[1] {
                                for cc in 0..g.kernel[2] {
                                    let zi = (z * spec.stride[0] + a) as isize - spec.padding[0] as isize;
                                    let yi = (y * spec.stride[1] + bb) as isize - spec.padding[1] as isize;
                                    let xi = (x * spec.stride[2] + cc) as isize - spec.padding[2] as isize;
                                    if zi < 0 || yi < 0 || xi < 0 {
                                        continue;
                                    }
                                    let (zi, yi, xi) = (zi as usize, yi as usize, xi as usize);
                                    if zi >= id || yi >= ih || xi >= iw {
                                        continue;
                                    }
                                    for ci in 0..g.c_in {
                                        acc += input.at(&[b, zi, yi, xi, ci])
                                            * kernel.at(&[a, bb, cc, ci, co]);
                                    }
                                }
                            }
                        }
                        let off = out.offset(&[b, z, y, x, co]);
                        out.data_mut()[off] = acc;
                    }
                }
            }
        }
    }
    Ok(out)
}
