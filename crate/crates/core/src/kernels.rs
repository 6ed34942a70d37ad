//! Dense loops behind the graph primitives.

/// `out (m x n) = a (m x k) * b (k x n)`; `out` must be zeroed.
pub(crate) fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            row.iter_mut()
                .zip(&b[p * n..(p + 1) * n])
                .for_each(|(o, &bv)| *o += av * bv);
        }
    }
}

/// `out (m x k) = g (m x n) * b^T` where `b` is `k x n`.
pub(crate) fn matmul_a_bt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let br = &b[p * n..(p + 1) * n];
            out[i * k + p] += gr.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out (k x n) = a^T * g` where `a` is `m x k` and `g` is `m x n`.
pub(crate) fn matmul_at_b(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            out[p * n..(p + 1) * n]
                .iter_mut()
                .zip(gr)
                .for_each(|(o, &gv)| *o += av * gv);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], pad: usize) -> Result<Self, String> {
        if x.len() != 4 || w.len() != 4 {
            return Err(format!("input {x:?} and weight {w:?} must both be rank 4"));
        }
        if x[1] != w[1] {
            return Err(format!(
                "input has {} channels but weight expects {}",
                x[1], w[1]
            ));
        }
        let (h, wd) = (x[2] + 2 * pad, x[3] + 2 * pad);
        if w[2] > h || w[3] > wd {
            return Err(format!("kernel {}x{} larger than padded input {h}x{wd}", w[2], w[3]));
        }
        Ok(Self {
            n: x[0],
            c_in: x[1],
            h: x[2],
            w: x[3],
            c_out: w[0],
            kh: w[2],
            kw: w[3],
            pad,
            oh: h - w[2] + 1,
            ow: wd - w[3] + 1,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.c_out, self.oh, self.ow]
    }
}

// The convolutions work on "wide" planes: the input is zero-padded to
// `hp x wp` and outputs are laid out with row stride `wp`. A kernel tap then
// becomes a single shifted axpy (or dot product) over one long contiguous
// run, with a few junk columns per row that are dropped afterwards.

impl ConvGeom {
    fn hp(&self) -> usize {
        self.h + 2 * self.pad
    }

    fn wp(&self) -> usize {
        self.w + 2 * self.pad
    }

    /// Length of the contiguous run covering every valid output position.
    fn run(&self) -> usize {
        (self.oh - 1) * self.wp() + self.ow
    }

    fn tap_offset(&self, ky: usize, kx: usize) -> usize {
        ky * self.wp() + kx
    }
}

fn pad_planes(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
    let (hp, wp) = (g.hp(), g.wp());
    let planes = g.n * g.c_in;
    let mut out = vec![0.0; planes * hp * wp];
    for p in 0..planes {
        for r in 0..g.h {
            let src = &x[(p * g.h + r) * g.w..][..g.w];
            out[(p * hp + r + g.pad) * wp + g.pad..][..g.w].copy_from_slice(src);
        }
    }
    out
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, &x)| *y += a * x);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (hp, wp, run) = (g.hp(), g.wp(), g.run());
    let xp = pad_planes(g, x);
    let out_plane = g.oh * g.ow;
    let mut out = vec![0.0; g.n * g.c_out * out_plane];
    let mut wide = vec![0.0; run];
    for n in 0..g.n {
        for co in 0..g.c_out {
            wide.iter_mut().for_each(|v| *v = 0.0);
            for ci in 0..g.c_in {
                let src = &xp[(n * g.c_in + ci) * hp * wp..][..hp * wp];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = w[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                        if wv != 0.0 {
                            axpy(wv, &src[g.tap_offset(ky, kx)..][..run], &mut wide);
                        }
                    }
                }
            }
            let b = bias.map_or(0.0, |b| b[co]);
            let dst = &mut out[(n * g.c_out + co) * out_plane..][..out_plane];
            for oy in 0..g.oh {
                let row = &wide[oy * wp..oy * wp + g.ow];
                dst[oy * g.ow..(oy + 1) * g.ow]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(d, &v)| *d = v + b);
            }
        }
    }
    out
}

/// Copies `(oh, ow)` planes into wide layout with zeroed junk columns.
fn widen(g: &ConvGeom, plane: &[f64], wide: &mut [f64]) {
    let wp = g.wp();
    wide.iter_mut().for_each(|v| *v = 0.0);
    for oy in 0..g.oh {
        wide[oy * wp..oy * wp + g.ow].copy_from_slice(&plane[oy * g.ow..(oy + 1) * g.ow]);
    }
}

pub(crate) fn conv2d_grad_input(g: &ConvGeom, gout: &[f64], w: &[f64]) -> Vec<f64> {
    let (hp, wp, run) = (g.hp(), g.wp(), g.run());
    let out_plane = g.oh * g.ow;
    let mut gx = vec![0.0; g.n * g.c_in * g.h * g.w];
    let mut wide = vec![0.0; run];
    let mut acc = vec![0.0; hp * wp];
    for n in 0..g.n {
        for ci in 0..g.c_in {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for co in 0..g.c_out {
                widen(g, &gout[(n * g.c_out + co) * out_plane..][..out_plane], &mut wide);
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = w[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                        if wv != 0.0 {
                            axpy(wv, &wide, &mut acc[g.tap_offset(ky, kx)..][..run]);
                        }
                    }
                }
            }
            let dst = &mut gx[(n * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
            for r in 0..g.h {
                dst[r * g.w..(r + 1) * g.w]
                    .copy_from_slice(&acc[(r + g.pad) * wp + g.pad..][..g.w]);
            }
        }
    }
    gx
}

pub(crate) fn conv2d_grad_weight(g: &ConvGeom, gout: &[f64], x: &[f64]) -> Vec<f64> {
    let (hp, wp, run) = (g.hp(), g.wp(), g.run());
    let xp = pad_planes(g, x);
    let out_plane = g.oh * g.ow;
    let mut gw = vec![0.0; g.c_out * g.c_in * g.kh * g.kw];
    let mut wide = vec![0.0; run];
    for n in 0..g.n {
        for co in 0..g.c_out {
            widen(g, &gout[(n * g.c_out + co) * out_plane..][..out_plane], &mut wide);
            for ci in 0..g.c_in {
                let src = &xp[(n * g.c_in + ci) * hp * wp..][..hp * wp];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        gw[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx] +=
                            dot(&wide, &src[g.tap_offset(ky, kx)..][..run]);
                    }
                }
            }
        }
    }
    gw
}

pub(crate) fn conv2d_grad_bias(g: &ConvGeom, gout: &[f64]) -> Vec<f64> {
    let out_plane = g.oh * g.ow;
    let mut gb = vec![0.0; g.c_out];
    for n in 0..g.n {
        for (co, b) in gb.iter_mut().enumerate() {
            *b += gout[(n * g.c_out + co) * out_plane..][..out_plane]
                .iter()
                .sum::<f64>();
        }
    }
    gb
}

#[cfg(test)]
mod tests {
    use super::*;

    // Direct definition of zero-padded cross-correlation, used as an oracle.
    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.n * g.c_out * g.oh * g.ow];
        for n in 0..g.n {
            for co in 0..g.c_out {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut s = 0.0;
                        for ci in 0..g.c_in {
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    let iy = oy as isize + ky as isize - g.pad as isize;
                                    let ix = ox as isize + kx as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    s += w[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx]
                                        * x[((n * g.c_in + ci) * g.h + iy as usize) * g.w
                                            + ix as usize];
                                }
                            }
                        }
                        out[((n * g.c_out + co) * g.oh + oy) * g.ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_definition() {
        for (pad, k) in [(0, 3), (1, 3), (2, 3), (1, 1), (2, 5)] {
            let g = ConvGeom::new(&[2, 3, 7, 6], &[4, 3, k, k], pad).unwrap();
            let x: Vec<f64> = (0..2 * 3 * 42).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
            let w: Vec<f64> = (0..4 * 3 * k * k).map(|i| ((i * 31) % 5) as f64 - 2.0).collect();
            assert_eq!(conv2d_forward(&g, &x, &w, None), naive_conv(&g, &x, &w));
        }
    }

    fn pseudo(n: usize, salt: usize) -> Vec<f64> {
        (0..n).map(|i| (((i + salt) * 7919) % 11) as f64 - 5.0).collect()
    }

    // <conv(x, w), gy> = <x, grad_input(gy, w)> = <w, grad_weight(gy, x)>;
    // integer data keeps every sum exact.
    #[test]
    fn conv_gradients_are_adjoints() {
        for (pad, k) in [(0, 3), (1, 3), (2, 3), (1, 1), (2, 5)] {
            let g = ConvGeom::new(&[2, 3, 7, 6], &[4, 3, k, k], pad).unwrap();
            let x = pseudo(2 * 3 * 42, 1);
            let w = pseudo(4 * 3 * k * k, 2);
            let gy = pseudo(g.n * g.c_out * g.oh * g.ow, 3);
            let y = naive_conv(&g, &x, &w);
            let lhs: f64 = y.iter().zip(&gy).map(|(a, b)| a * b).sum();
            let gx = conv2d_grad_input(&g, &gy, &w);
            let gw = conv2d_grad_weight(&g, &gy, &x);
            assert_eq!(lhs, x.iter().zip(&gx).map(|(a, b)| a * b).sum::<f64>());
            assert_eq!(lhs, w.iter().zip(&gw).map(|(a, b)| a * b).sum::<f64>());
        }
    }

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut out = [0.0; 4];
        matmul(&a, &b, &mut out, 2, 3, 2);
        assert_eq!(out, [58.0, 64.0, 139.0, 154.0]);
    }
}
