//! Raw numeric kernels shared by the autodiff tape and the non-differentiable
//! image utilities (degradation, resizing).

/// `c = alpha * a·b + beta * c` for row-major `c` of shape `m × n`.
/// `a` is `m × k` and `b` is `k × n`, each given by explicit strides so that
/// transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k > 0 {
        assert!(a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
        assert!(b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    }
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(a.len(), b.len(), "broadcast rank mismatch {a:?} vs {b:?}");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => x,
            (1, _) => y,
            (_, 1) => x,
            _ => panic!("shapes {a:?} and {b:?} do not broadcast"),
        })
        .collect()
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast
/// output, in row-major output order.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out.iter().product();
    if sa == out && sb == out {
        for i in 0..total {
            f(i, i, i);
        }
        return;
    }
    let r = out.len();
    let st_a = broadcast_strides(sa, out);
    let st_b = broadcast_strides(sb, out);
    let inner = out[r - 1];
    let (ia, ib) = (st_a[r - 1], st_b[r - 1]);
    let outer = total / inner.max(1);
    let mut idx = vec![0usize; r - 1];
    let (mut base_a, mut base_b) = (0usize, 0usize);
    for o in 0..outer {
        for j in 0..inner {
            f(o * inner + j, base_a + j * ia, base_b + j * ib);
        }
        for d in (0..r - 1).rev() {
            idx[d] += 1;
            base_a += st_a[d];
            base_b += st_b[d];
            if idx[d] < out[d] {
                break;
            }
            base_a -= st_a[d] * out[d];
            base_b -= st_b[d] * out[d];
            idx[d] = 0;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], weight: &[usize], stride: usize, pad: usize) -> Self {
        assert_eq!(x.len(), 4, "conv input must be NCHW, got {x:?}");
        assert_eq!(weight.len(), 4, "conv weight must be OCkk, got {weight:?}");
        assert_eq!(x[1], weight[1], "conv channel mismatch {x:?} vs {weight:?}");
        assert_eq!(weight[2], weight[3], "only square kernels");
        let k = weight[2];
        assert!(x[2] + 2 * pad >= k && x[3] + 2 * pad >= k, "kernel larger than input");
        let ho = (x[2] + 2 * pad - k) / stride + 1;
        let wo = (x[3] + 2 * pad - k) / stride + 1;
        Self {
            n: x[0],
            c: x[1],
            h: x[2],
            w: x[3],
            o: weight[0],
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let hw_out = g.ho * g.wo;
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let hw_out = g.ho * g.wo;
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], weight: &[f64], g: &ConvGeom) -> Vec<f64> {
    let in_sz = g.c * g.h * g.w;
    let out_sz = g.o * g.ho * g.wo;
    let hw_out = g.ho * g.wo;
    let rows = g.col_rows();
    let mut out = vec![0.0; g.n * out_sz];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; rows * hw_out]
    };
    for b in 0..g.n {
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        let src: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        gemm(
            g.o,
            rows,
            hw_out,
            1.0,
            weight,
            (rows, 1),
            src,
            (hw_out, 1),
            0.0,
            &mut out[b * out_sz..(b + 1) * out_sz],
        );
    }
    out
}

pub(crate) fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    dout: &[f64],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let in_sz = g.c * g.h * g.w;
    let out_sz = g.o * g.ho * g.wo;
    let hw_out = g.ho * g.wo;
    let rows = g.col_rows();
    let mut dx = need_dx.then(|| vec![0.0; g.n * in_sz]);
    let mut dw = need_dw.then(|| vec![0.0; weight.len()]);
    let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { rows * hw_out }];
    let mut dcols = vec![0.0; if need_dx && !g.is_pointwise() { rows * hw_out } else { 0 }];
    for b in 0..g.n {
        let db = &dout[b * out_sz..(b + 1) * out_sz];
        if let Some(dw) = dw.as_mut() {
            let xb = &x[b * in_sz..(b + 1) * in_sz];
            let src: &[f64] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, g, &mut cols);
                &cols
            };
            // dW[o, r] += sum_p dout[o, p] * cols[r, p]
            gemm(g.o, hw_out, rows, 1.0, db, (hw_out, 1), src, (1, hw_out), 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_sz..(b + 1) * in_sz];
            if g.is_pointwise() {
                gemm(g.c, g.o, hw_out, 1.0, weight, (1, rows), db, (hw_out, 1), 1.0, dxb);
            } else {
                gemm(rows, g.o, hw_out, 1.0, weight, (1, rows), db, (hw_out, 1), 0.0, &mut dcols);
                col2im(&dcols, g, dxb);
            }
        }
    }
    (dx, dw)
}

pub(crate) fn upsample2x_forward(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * h2 * w2];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward(dout: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &dout[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
            }
        }
    }
    dx
}

pub(crate) fn avgpool2_forward(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * h2 * w2];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for y in 0..h2 {
            for xx in 0..w2 {
                let s = src[2 * y * w + 2 * xx]
                    + src[2 * y * w + 2 * xx + 1]
                    + src[(2 * y + 1) * w + 2 * xx]
                    + src[(2 * y + 1) * w + 2 * xx + 1];
                out[p * h2 * w2 + y * w2 + xx] = 0.25 * s;
            }
        }
    }
    out
}

pub(crate) fn avgpool2_backward(dout: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for y in 0..h2 {
            for xx in 0..w2 {
                let g = 0.25 * dout[p * h2 * w2 + y * w2 + xx];
                let base = p * h * w;
                dx[base + 2 * y * w + 2 * xx] += g;
                dx[base + 2 * y * w + 2 * xx + 1] += g;
                dx[base + (2 * y + 1) * w + 2 * xx] += g;
                dx[base + (2 * y + 1) * w + 2 * xx + 1] += g;
            }
        }
    }
    dx
}

/// Maps a normalized coordinate in `[-1, 1]` onto pixel space
/// (corner-aligned), clamping to the border. Returns the pixel coordinate
/// and whether it lies inside (so the coordinate gradient is live).
fn unnormalize(coord: f64, size: usize) -> (f64, bool) {
    let scale = (size as f64 - 1.0) / 2.0;
    let mut p = (coord + 1.0) * scale;
    let inside = p >= 0.0 && p <= size as f64 - 1.0;
    p = p.clamp(0.0, size as f64 - 1.0);
    // Snap round-off so identity grids reproduce their input exactly.
    let r = p.round();
    if (p - r).abs() < 1e-9 {
        p = r;
    }
    (p, inside)
}

struct Tap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    wx: f64,
    wy: f64,
    live_x: bool,
    live_y: bool,
}

fn tap(gx: f64, gy: f64, h: usize, w: usize) -> Tap {
    let (px, live_x) = unnormalize(gx, w);
    let (py, live_y) = unnormalize(gy, h);
    let x0 = px.floor() as usize;
    let y0 = py.floor() as usize;
    Tap {
        x0,
        y0,
        x1: (x0 + 1).min(w - 1),
        y1: (y0 + 1).min(h - 1),
        wx: px - x0 as f64,
        wy: py - y0 as f64,
        live_x,
        live_y,
    }
}

/// Bilinear sampling of `x` (`[n, c, h, w]`) at `grid` (`[n, ho, wo, 2]`,
/// normalized `(x, y)` pairs) with border replication.
pub(crate) fn grid_sample_forward(
    x: &[f64],
    dims: [usize; 4],
    grid: &[f64],
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let [n, c, h, w] = dims;
    let mut out = vec![0.0; n * c * ho * wo];
    for b in 0..n {
        for p in 0..ho * wo {
            let gi = (b * ho * wo + p) * 2;
            let t = tap(grid[gi], grid[gi + 1], h, w);
            for ch in 0..c {
                let plane = &x[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                let top = (1.0 - t.wx) * plane[t.y0 * w + t.x0] + t.wx * plane[t.y0 * w + t.x1];
                let bot = (1.0 - t.wx) * plane[t.y1 * w + t.x0] + t.wx * plane[t.y1 * w + t.x1];
                out[(b * c + ch) * ho * wo + p] = (1.0 - t.wy) * top + t.wy * bot;
            }
        }
    }
    out
}

pub(crate) fn grid_sample_backward(
    x: &[f64],
    dims: [usize; 4],
    grid: &[f64],
    ho: usize,
    wo: usize,
    dout: &[f64],
    need_dx: bool,
    need_dgrid: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let [n, c, h, w] = dims;
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    let mut dgrid = need_dgrid.then(|| vec![0.0; grid.len()]);
    let sx = (w as f64 - 1.0) / 2.0;
    let sy = (h as f64 - 1.0) / 2.0;
    for b in 0..n {
        for p in 0..ho * wo {
            let gi = (b * ho * wo + p) * 2;
            let t = tap(grid[gi], grid[gi + 1], h, w);
            let (mut dpx, mut dpy) = (0.0, 0.0);
            for ch in 0..c {
                let g = dout[(b * c + ch) * ho * wo + p];
                if g == 0.0 {
                    continue;
                }
                let base = (b * c + ch) * h * w;
                if let Some(dx) = dx.as_mut() {
                    dx[base + t.y0 * w + t.x0] += g * (1.0 - t.wx) * (1.0 - t.wy);
                    dx[base + t.y0 * w + t.x1] += g * t.wx * (1.0 - t.wy);
                    dx[base + t.y1 * w + t.x0] += g * (1.0 - t.wx) * t.wy;
                    dx[base + t.y1 * w + t.x1] += g * t.wx * t.wy;
                }
                if dgrid.is_some() {
                    let v00 = x[base + t.y0 * w + t.x0];
                    let v01 = x[base + t.y0 * w + t.x1];
                    let v10 = x[base + t.y1 * w + t.x0];
                    let v11 = x[base + t.y1 * w + t.x1];
                    dpx += g * ((1.0 - t.wy) * (v01 - v00) + t.wy * (v11 - v10));
                    dpy += g * ((1.0 - t.wx) * (v10 - v00) + t.wx * (v11 - v01));
                }
            }
            if let Some(dg) = dgrid.as_mut() {
                if t.live_x {
                    dg[gi] += dpx * sx;
                }
                if t.live_y {
                    dg[gi + 1] += dpy * sy;
                }
            }
        }
    }
    (dx, dgrid)
}

/// Normalized corner-aligned coordinate of pixel `i` along an axis of `size`.
pub(crate) fn base_coord(i: usize, size: usize) -> f64 {
    if size <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (size as f64 - 1.0)
    }
}

/// Sampling grid `[n, h, w, 2]` for 2×3 affine matrices `theta` (`[n, 2, 3]`).
pub(crate) fn affine_grid_forward(theta: &[f64], n: usize, h: usize, w: usize) -> Vec<f64> {
    let mut grid = vec![0.0; n * h * w * 2];
    for b in 0..n {
        let t = &theta[b * 6..b * 6 + 6];
        for i in 0..h {
            let yn = base_coord(i, h);
            for j in 0..w {
                let xn = base_coord(j, w);
                let gi = ((b * h + i) * w + j) * 2;
                grid[gi] = t[0] * xn + t[1] * yn + t[2];
                grid[gi + 1] = t[3] * xn + t[4] * yn + t[5];
            }
        }
    }
    grid
}

pub(crate) fn affine_grid_backward(dgrid: &[f64], n: usize, h: usize, w: usize) -> Vec<f64> {
    let mut dtheta = vec![0.0; n * 6];
    for b in 0..n {
        let dt = &mut dtheta[b * 6..b * 6 + 6];
        for i in 0..h {
            let yn = base_coord(i, h);
            for j in 0..w {
                let xn = base_coord(j, w);
                let gi = ((b * h + i) * w + j) * 2;
                let (gx, gy) = (dgrid[gi], dgrid[gi + 1]);
                dt[0] += gx * xn;
                dt[1] += gx * yn;
                dt[2] += gx;
                dt[3] += gy * xn;
                dt[4] += gy * yn;
                dt[5] += gy;
            }
        }
    }
    dtheta
}
