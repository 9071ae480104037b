use crate::error::{Error, Result};
use crate::fxp::FixedTensor;

use super::{gemm_raw, AccMode, IntMatrix};

/// Square-agnostic 2-D convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(kernel_h: usize, kernel_w: usize, stride: usize, pad: usize) -> Result<Self> {
        if kernel_h == 0 || kernel_w == 0 || stride == 0 {
            return Err(Error::Shape("kernel and stride must be positive".into()));
        }
        Ok(ConvGeometry {
            kernel_h,
            kernel_w,
            stride,
            pad,
        })
    }

    /// Output height and width for an `h x w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ph, pw) = (h + 2 * self.pad, w + 2 * self.pad);
        if ph < self.kernel_h || pw < self.kernel_w {
            return Err(Error::Shape(format!(
                "{}x{} kernel does not fit a padded {ph}x{pw} input",
                self.kernel_h, self.kernel_w
            )));
        }
        Ok((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }
}

/// Unfolds a `[C, H, W]` tensor into `[C*kh*kw, Hout*Wout]`; padding is zero.
pub fn im2col(x: &FixedTensor, geom: ConvGeometry) -> Result<FixedTensor> {
    let (c, h, w) = match *x.shape() {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::Shape(format!(
                "im2col expects [C, H, W], got {:?}",
                x.shape()
            )))
        }
    };
    let (ho, wo) = geom.output_size(h, w)?;
    let (kh, kw) = (geom.kernel_h, geom.kernel_w);
    let rows = c * kh * kw;
    let cols = ho * wo;
    let src = x.values();
    let mut out = vec![0i32; rows * cols];
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[row * cols + oy * wo + ox] =
                            src[(ch * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    FixedTensor::new(vec![rows, cols], out, *x.scheme())
}

/// Convolves `x: [C, H, W]` with `w: [Cout, C, kh, kw]`.
///
/// Returns a `Cout x (Hout*Wout)` matrix.
pub fn conv2d(x: &FixedTensor, w: &FixedTensor, geom: ConvGeometry, mode: AccMode) -> Result<IntMatrix> {
    let (cout, cin, kh, kw) = match *w.shape() {
        [a, b, c, d] => (a, b, c, d),
        _ => {
            return Err(Error::Shape(format!(
                "conv weights must be [Cout, C, kh, kw], got {:?}",
                w.shape()
            )))
        }
    };
    if (kh, kw) != (geom.kernel_h, geom.kernel_w) {
        return Err(Error::Shape("weight kernel size differs from geometry".into()));
    }
    if x.shape().first() != Some(&cin) {
        return Err(Error::Shape(format!(
            "input has {:?} channels, weights expect {cin}",
            x.shape().first()
        )));
    }
    let cols = im2col(x, geom)?;
    let (k, p) = (cols.shape()[0], cols.shape()[1]);
    // patches^T (P x K) times w^T (K x Cout)
    let mut patches = vec![0i32; p * k];
    for r in 0..k {
        for c in 0..p {
            patches[c * k + r] = cols.values()[r * p + c];
        }
    }
    let mut wt = vec![0i32; k * cout];
    for o in 0..cout {
        for r in 0..k {
            wt[r * cout + o] = w.values()[o * k + r];
        }
    }
    Ok(gemm_raw(&patches, &wt, p, k, cout, mode)?.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fxp::QuantScheme;

    fn t(shape: Vec<usize>, v: Vec<i32>) -> FixedTensor {
        FixedTensor::new(shape, v, QuantScheme::uniform(1.0, 8, true).unwrap()).unwrap()
    }

    #[test]
    fn im2col_4x4_3x3() {
        let x = t(vec![1, 4, 4], (0..16).collect());
        let g = ConvGeometry::new(3, 3, 1, 1).unwrap();
        let cols = im2col(&x, g).unwrap();
        assert_eq!(cols.shape(), &[9, 16]);
        // centre tap reproduces the input
        assert_eq!(&cols.values()[4 * 16..5 * 16], &(0..16).collect::<Vec<_>>()[..]);
        // top-left tap at output (0,0) is padding
        assert_eq!(cols.values()[0], 0);
        // top-left tap at output (1,1) is x[0,0]
        assert_eq!(cols.values()[5], 0);
        assert_eq!(cols.values()[6], 1);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(vec![1, 3, 3], (1..=9).collect());
        let mut w = vec![0; 9];
        w[4] = 1;
        let w = t(vec![1, 1, 3, 3], w);
        let g = ConvGeometry::new(3, 3, 1, 1).unwrap();
        let r = conv2d(&x, &w, g, AccMode::Exact32).unwrap();
        assert_eq!(r.rows, 1);
        assert_eq!(r.data, (1..=9).collect::<Vec<i64>>());
    }

    #[test]
    fn kernel_larger_than_input() {
        let x = t(vec![1, 2, 2], vec![0; 4]);
        let g = ConvGeometry::new(5, 5, 1, 0).unwrap();
        assert!(matches!(im2col(&x, g), Err(Error::Shape(_))));
    }
}
