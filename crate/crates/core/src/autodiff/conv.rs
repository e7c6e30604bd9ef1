use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, ConvGeometry, Tensor};

impl Tape {
    /// 2-D cross-correlation of `x: [N, C, H, W]` with `kernel: [F, C, kh, kw]`
    /// using zero padding. Lowered to one GEMM per image via im2col.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        let dims_err = || Error::Dimension {
            op: "conv2d",
            lhs: tx.shape().to_vec(),
            rhs: tk.shape().to_vec(),
        };
        let (&[n, c, h, w], &[f, kc, kh, kw]) = (tx.shape(), tk.shape()) else {
            return Err(dims_err());
        };
        if kc != c || kh > h + 2 * pad || kw > w + 2 * pad || kh == 0 || kw == 0 {
            return Err(dims_err());
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be at least 1"));
        }
        let geom = ConvGeometry {
            channels: c,
            height: h,
            width: w,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            pad,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let spatial = oh * ow;
        let patch = geom.patch_len();
        let image_len = c * h * w;

        let mut cols = vec![0.0; n * patch * spatial];
        let mut out = vec![0.0; n * f * spatial];
        for i in 0..n {
            let col = &mut cols[i * patch * spatial..(i + 1) * patch * spatial];
            geom.im2col(&tx.data()[i * image_len..(i + 1) * image_len], col);
            gemm(
                f,
                patch,
                spatial,
                tk.data(),
                false,
                col,
                false,
                &mut out[i * f * spatial..(i + 1) * f * spatial],
                0.0,
            );
        }
        let t = Tensor::new(vec![n, f, oh, ow], out)?;
        let op = Op::Conv2d {
            x,
            kernel,
            geom,
            cols,
        };
        self.push(t, op, &[x, kernel], "conv2d")
    }

    pub(super) fn conv2d_backward(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let Op::Conv2d {
            x,
            kernel,
            geom,
            cols,
        } = &self.nodes[id].op
        else {
            unreachable!()
        };
        let tk = self.value(*kernel);
        let f = tk.shape()[0];
        let patch = geom.patch_len();
        let spatial = geom.out_h() * geom.out_w();
        let n = g.len() / (f * spatial);
        let image_len = geom.channels * geom.height * geom.width;

        self.accumulate(grads, *kernel, |dk| {
            for i in 0..n {
                let gi = &g[i * f * spatial..(i + 1) * f * spatial];
                let col = &cols[i * patch * spatial..(i + 1) * patch * spatial];
                gemm(f, spatial, patch, gi, false, col, true, dk, 1.0);
            }
        });
        self.accumulate(grads, *x, |dx| {
            let mut dcol = vec![0.0; patch * spatial];
            for i in 0..n {
                let gi = &g[i * f * spatial..(i + 1) * f * spatial];
                gemm(patch, f, spatial, tk.data(), true, gi, false, &mut dcol, 0.0);
                geom.col2im(&dcol, &mut dx[i * image_len..(i + 1) * image_len]);
            }
        });
    }
}
