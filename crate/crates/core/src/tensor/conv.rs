use std::borrow::Cow;

use super::{pad, pad_adjoint, BoundaryMode, Field, Kernel};
use crate::error::{invalid, shape, Result};

#[inline]
fn row_accumulate(out: &mut [f64], inp: &[f64], taps: &[f64], stride: usize) {
    let n = out.len();
    if stride == 1 {
        if let [w0, w1, w2] = *taps {
            let (a, b, c) = (&inp[..n], &inp[1..n + 1], &inp[2..n + 2]);
            for x in 0..n {
                out[x] += w0 * a[x] + w1 * b[x] + w2 * c[x];
            }
            return;
        }
        for (kx, &w) in taps.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (o, i) in out.iter_mut().zip(&inp[kx..kx + n]) {
                *o += w * i;
            }
        }
    } else {
        for (kx, &w) in taps.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (x, o) in out.iter_mut().enumerate() {
                *o += w * inp[x * stride + kx];
            }
        }
    }
}

/// Defines `fn $name` with a body that is compiled twice: once for the
/// baseline target and once with AVX2 enabled, picked at run time. The
/// operations and their order are identical, so results are bitwise equal.
macro_rules! wide_dispatch {
    ($(#[$m:meta])* fn $name:ident($($arg:ident: $ty:ty),* $(,)?) $(-> $ret:ty)? $body:block) => {
        $(#[$m])*
        #[inline]
        fn $name($($arg: $ty),*) $(-> $ret)? {
            #[cfg(target_arch = "x86_64")]
            {
                if std::is_x86_feature_detected!("avx2") {
                    #[target_feature(enable = "avx2")]
                    unsafe fn wide($($arg: $ty),*) $(-> $ret)? $body
                    // SAFETY: AVX2 support was just detected.
                    return unsafe { wide($($arg),*) };
                }
            }
            $body
        }
    };
}

wide_dispatch! {
/// All nine taps of a stride-1 3×3 correlation in one pass per output row.
fn corr3x3_accumulate(dst: &mut [f64], src: &[f64], taps: &[f64], ow: usize, w: usize) {
    let t: [f64; 9] = taps.try_into().expect("3x3 taps");
    for (y, orow) in dst.chunks_exact_mut(ow).enumerate() {
        let r0 = &src[y * w..y * w + ow + 2];
        let r1 = &src[(y + 1) * w..(y + 1) * w + ow + 2];
        let r2 = &src[(y + 2) * w..(y + 2) * w + ow + 2];
        for x in 0..ow {
            orow[x] += t[0] * r0[x] + t[1] * r0[x + 1] + t[2] * r0[x + 2]
                + t[3] * r1[x] + t[4] * r1[x + 1] + t[5] * r1[x + 2]
                + t[6] * r2[x] + t[7] * r2[x + 1] + t[8] * r2[x + 2];
        }
    }
}
}

/// Reorders each row as `[even columns | odd columns]` so stride-2 taps
/// become contiguous slices.
fn split_cols(plane: &[f64], w: usize) -> Vec<f64> {
    let we = w.div_ceil(2);
    let mut out = vec![0.0; plane.len()];
    for (src, dst) in plane.chunks_exact(w).zip(out.chunks_exact_mut(w)) {
        for (x, v) in src.iter().enumerate() {
            dst[if x % 2 == 0 { x / 2 } else { we + x / 2 }] = *v;
        }
    }
    out
}

fn merge_cols(split: &[f64], w: usize, dst: &mut [f64]) {
    let we = w.div_ceil(2);
    for (src, out) in split.chunks_exact(w).zip(dst.chunks_exact_mut(w)) {
        for (x, v) in out.iter_mut().enumerate() {
            *v = src[if x % 2 == 0 { x / 2 } else { we + x / 2 }];
        }
    }
}

/// Offset of column tap `c` inside a split row.
#[inline]
fn split_offset(c: usize, w: usize) -> usize {
    if c % 2 == 0 {
        c / 2
    } else {
        w.div_ceil(2) + c / 2
    }
}

wide_dispatch! {
fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}
}

wide_dispatch! {
/// `Σ_{y,x} g[y][x]·f[y+r][x+c]` for all nine `(r, c)` in one sweep,
/// with two-lane partial sums per tap.
fn kernel_grad3x3(g: &[f64], f: &[f64], oh: usize, ow: usize, w: usize) -> [f64; 9] {
    let mut acc = [[0.0f64; 2]; 9];
    let pairs = ow / 2;
    let mut tail = [0.0f64; 9];
    for y in 0..oh {
        let gr = &g[y * ow..(y + 1) * ow];
        let rows = [&f[y * w..y * w + ow + 2], &f[(y + 1) * w..(y + 1) * w + ow + 2], &f[(y + 2) * w..(y + 2) * w + ow + 2]];
        for p in 0..pairs {
            let x = 2 * p;
            let (g0, g1) = (gr[x], gr[x + 1]);
            for (r, row) in rows.iter().enumerate() {
                for c in 0..3 {
                    let a = &mut acc[3 * r + c];
                    a[0] += g0 * row[x + c];
                    a[1] += g1 * row[x + c + 1];
                }
            }
        }
        if ow % 2 == 1 {
            let x = ow - 1;
            for (r, row) in rows.iter().enumerate() {
                for c in 0..3 {
                    tail[3 * r + c] += gr[x] * row[x + c];
                }
            }
        }
    }
    let mut out = [0.0; 9];
    for t in 0..9 {
        out[t] = acc[t][0] + acc[t][1] + tail[t];
    }
    out
}
}

wide_dispatch! {
/// Dot product with four partial sums, so it vectorizes.
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
}

/// Surrounds every plane with `ph` rows and `pw` columns of zeros.
fn zero_surround(g: &Field, ph: usize, pw: usize) -> Field {
    let (c, h, w) = g.dims();
    let (nh, nw) = (h + 2 * ph, w + 2 * pw);
    let mut out = Field::zeros(c, nh, nw);
    for ch in 0..c {
        let src = g.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..h {
            dst[(y + ph) * nw + pw..(y + ph) * nw + pw + w].copy_from_slice(&src[y * w..(y + 1) * w]);
        }
    }
    out
}

/// Channel-transposed, spatially flipped kernel: stride-1 valid correlation
/// with it on a zero-surrounded field is the adjoint of correlation with `k`.
fn adjoint_kernel(k: &Kernel) -> Kernel {
    let (cout, cin, kh, kw) = k.dims();
    let mut out = Kernel::zeros(cin, cout, kh, kw);
    for o in 0..cout {
        for i in 0..cin {
            for r in 0..kh {
                for c in 0..kw {
                    out.set(i, o, kh - 1 - r, kw - 1 - c, k.get(o, i, r, c));
                }
            }
        }
    }
    out
}

fn valid_size(n: usize, k: usize, stride: usize) -> Result<usize> {
    if n < k {
        return Err(shape(format!("input extent {n} smaller than kernel extent {k}")));
    }
    Ok((n - k) / stride + 1)
}

fn check_stride(stride: usize) -> Result<()> {
    if stride == 1 || stride == 2 {
        Ok(())
    } else {
        Err(invalid(format!("stride must be 1 or 2, got {stride}")))
    }
}

/// Unpadded ("valid") multi-channel cross-correlation:
/// `out[o][y][x] = Σ_i Σ_{r,c} k[o][i][r][c] · f[i][s·y + r][s·x + c]`.
pub fn corr_valid(f: &Field, k: &Kernel, stride: usize) -> Result<Field> {
    check_stride(stride)?;
    if k.in_channels() != f.channels() {
        return Err(shape(format!("kernel expects {} input channels, field has {}", k.in_channels(), f.channels())));
    }
    let (cin, h, w) = f.dims();
    let (cout, _, kh, kw) = k.dims();
    let oh = valid_size(h, kh, stride)?;
    let ow = valid_size(w, kw, stride)?;
    let mut out = Field::zeros(cout, oh, ow);
    let splits: Vec<Vec<f64>> =
        if stride == 2 { (0..cin).map(|i| split_cols(f.plane(i), w)).collect() } else { Vec::new() };
    for o in 0..cout {
        let dst = out.plane_mut(o);
        for i in 0..cin {
            let taps = k.taps(o, i);
            let src = f.plane(i);
            if stride == 1 && kh == 3 && kw == 3 {
                corr3x3_accumulate(dst, src, taps, ow, w);
                continue;
            }
            if stride == 2 {
                let split = &splits[i];
                for (y, orow) in dst.chunks_exact_mut(ow).enumerate() {
                    for r in 0..kh {
                        let row = &split[(2 * y + r) * w..(2 * y + r + 1) * w];
                        for c in 0..kw {
                            let t = taps[r * kw + c];
                            if t != 0.0 {
                                let off = split_offset(c, w);
                                axpy(orow, t, &row[off..off + ow]);
                            }
                        }
                    }
                }
                continue;
            }
            for y in 0..oh {
                let orow = &mut dst[y * ow..(y + 1) * ow];
                for r in 0..kh {
                    let sy = y * stride + r;
                    row_accumulate(orow, &src[sy * w..(sy + 1) * w], &taps[r * kw..(r + 1) * kw], stride);
                }
            }
        }
    }
    Ok(out)
}

/// Transpose of [`corr_valid`] with respect to its input: scatters `g`
/// back onto an `in_h × in_w` grid.
pub fn corr_valid_adjoint(g: &Field, k: &Kernel, stride: usize, in_h: usize, in_w: usize) -> Result<Field> {
    check_stride(stride)?;
    let (cout, cin, kh, kw) = k.dims();
    if g.channels() != cout {
        return Err(shape(format!("gradient has {} channels, kernel outputs {cout}", g.channels())));
    }
    let (oh, ow) = (g.height(), g.width());
    if valid_size(in_h, kh, stride)? != oh || valid_size(in_w, kw, stride)? != ow {
        return Err(shape(format!("{in_h}x{in_w} input does not produce {oh}x{ow} output at stride {stride}")));
    }
    if stride == 1 {
        return corr_valid(&zero_surround(g, kh - 1, kw - 1), &adjoint_kernel(k), 1);
    }
    let mut out = Field::zeros(cin, in_h, in_w);
    let mut split = vec![0.0; in_h * in_w];
    for i in 0..cin {
        split.iter_mut().for_each(|v| *v = 0.0);
        for o in 0..cout {
            let taps = k.taps(o, i);
            for (y, grow) in g.plane(o).chunks_exact(ow).enumerate() {
                for r in 0..kh {
                    let row = &mut split[(2 * y + r) * in_w..(2 * y + r + 1) * in_w];
                    for c in 0..kw {
                        let t = taps[r * kw + c];
                        if t != 0.0 {
                            let off = split_offset(c, in_w);
                            axpy(&mut row[off..off + ow], t, grow);
                        }
                    }
                }
            }
        }
        merge_cols(&split, in_w, out.plane_mut(i));
    }
    Ok(out)
}

/// Gradient of `⟨corr_valid(f, k, stride), g⟩` with respect to `k`.
pub fn corr_valid_kernel_grad(f: &Field, g: &Field, stride: usize, kh: usize, kw: usize) -> Result<Kernel> {
    check_stride(stride)?;
    let (cin, h, w) = f.dims();
    let (cout, oh, ow) = g.dims();
    if valid_size(h, kh, stride)? != oh || valid_size(w, kw, stride)? != ow {
        return Err(shape("kernel gradient: input and output extents disagree"));
    }
    let mut dk = Kernel::zeros(cout, cin, kh, kw);
    let splits: Vec<Vec<f64>> =
        if stride == 2 { (0..cin).map(|i| split_cols(f.plane(i), w)).collect() } else { Vec::new() };
    for o in 0..cout {
        let grad = g.plane(o);
        for i in 0..cin {
            let src = if stride == 2 { &splits[i][..] } else { f.plane(i) };
            if stride == 1 && kh == 3 && kw == 3 {
                let acc = kernel_grad3x3(grad, src, oh, ow, w);
                for (t, v) in acc.iter().enumerate() {
                    dk.set(o, i, t / 3, t % 3, *v);
                }
                continue;
            }
            for r in 0..kh {
                for c in 0..kw {
                    let mut acc = 0.0;
                    for y in 0..oh {
                        let grow = &grad[y * ow..(y + 1) * ow];
                        let srow = &src[(y * stride + r) * w..];
                        if stride == 1 {
                            acc += dot4(grow, &srow[c..c + ow]);
                        } else {
                            let off = split_offset(c, w);
                            acc += dot4(grow, &srow[off..off + ow]);
                        }
                    }
                    dk.set(o, i, r, c, acc);
                }
            }
        }
    }
    Ok(dk)
}

fn check_conv(f: &Field, k: &Kernel, mode: BoundaryMode, stride: usize) -> Result<()> {
    check_stride(stride)?;
    if k.in_channels() != f.channels() {
        return Err(shape(format!("kernel expects {} input channels, field has {}", k.in_channels(), f.channels())));
    }
    if stride == 2 {
        let (h, w) = (f.height(), f.width());
        if mode.is_padded() {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(shape(format!("padded stride-2 convolution needs even size, got {h}x{w}")));
            }
        } else if h < k.kh() || w < k.kw() || (h - k.kh()) % 2 != 0 || (w - k.kw()) % 2 != 0 {
            return Err(shape(format!(
                "unpadded stride-2 convolution of {h}x{w} with {}x{} kernel does not tile",
                k.kh(),
                k.kw()
            )));
        }
    }
    Ok(())
}

fn padded(f: &Field, mode: BoundaryMode) -> Result<Cow<'_, Field>> {
    Ok(if mode.is_padded() { Cow::Owned(pad(f, mode)?) } else { Cow::Borrowed(f) })
}

/// Padded multi-channel cross-correlation. Output extent is
/// `floor((d + 2p − k) / stride) + 1` with `p` the pad width of `mode`.
pub fn conv2d(f: &Field, k: &Kernel, mode: BoundaryMode, stride: usize) -> Result<Field> {
    check_conv(f, k, mode, stride)?;
    let p = padded(f, mode)?;
    corr_valid(&p, k, stride)
}

/// Input gradient of [`conv2d`]; `in_h × in_w` is the unpadded input size.
pub fn conv2d_grad_input(
    g: &Field,
    k: &Kernel,
    mode: BoundaryMode,
    stride: usize,
    in_h: usize,
    in_w: usize,
) -> Result<Field> {
    let p = mode.pad_width();
    let gp = corr_valid_adjoint(g, k, stride, in_h + 2 * p, in_w + 2 * p)?;
    if mode.is_padded() {
        pad_adjoint(&gp, mode)
    } else {
        Ok(gp)
    }
}

/// Kernel gradient of [`conv2d`].
pub fn conv2d_grad_kernel(
    f: &Field,
    g: &Field,
    mode: BoundaryMode,
    stride: usize,
    kh: usize,
    kw: usize,
) -> Result<Kernel> {
    let p = padded(f, mode)?;
    corr_valid_kernel_grad(&p, g, stride, kh, kw)
}

/// Anchors `f` at the top-left of an `h × w` grid, cropping or zero-extending.
fn fit(f: &Field, h: usize, w: usize) -> Field {
    if f.height() == h && f.width() == w {
        return f.clone();
    }
    Field::from_fn(f.channels(), h, w, |c, y, x| if y < f.height() && x < f.width() { f.get(c, y, x) } else { 0.0 })
}

fn raw_extent(coarse: usize, k: usize) -> usize {
    (coarse - 1) * 2 + k
}

/// Target grid the raw transposed-convolution output is laid on.
fn prolong_target(
    mode: BoundaryMode,
    out_h: usize,
    out_w: usize,
    raw_h: usize,
    raw_w: usize,
) -> Result<(usize, usize)> {
    let p = mode.pad_width();
    let (th, tw) = (out_h + 2 * p, out_w + 2 * p);
    if mode.is_padded() && (raw_h > th || raw_w > tw) {
        return Err(shape(format!("transposed convolution output {raw_h}x{raw_w} exceeds padded target {th}x{tw}")));
    }
    Ok((th, tw))
}

/// Stride-2 transposed convolution that is the exact adjoint of a stride-2
/// [`conv2d`] with the same padding `mode` on an `out_h × out_w` grid.
///
/// `k` is indexed `[fine][coarse][r][c]`: coarse sample `(y, x)` stamps its
/// taps onto padded positions `(2y + r, 2x + c)`. The stamped result is then
/// folded back with [`pad_adjoint`] (cropped for `DirichletZero`, wrapped for
/// `PeriodicCircular`, mirrored for `NeumannReflect`). Under `NoPad` the
/// stamps land on the unpadded grid and anything past its extent is dropped.
pub fn prolong(c: &Field, k: &Kernel, mode: BoundaryMode, out_h: usize, out_w: usize) -> Result<Field> {
    if k.in_channels() != c.channels() {
        return Err(shape(format!(
            "prolongation kernel expects {} coarse channels, field has {}",
            k.in_channels(),
            c.channels()
        )));
    }
    let (raw_h, raw_w) = (raw_extent(c.height(), k.kh()), raw_extent(c.width(), k.kw()));
    let (th, tw) = prolong_target(mode, out_h, out_w, raw_h, raw_w)?;
    if mode == BoundaryMode::PeriodicCircular && out_h == 2 * c.height() && out_w == 2 * c.width() {
        return Ok(prolong_periodic(c, k, out_h, out_w));
    }
    let raw = corr_valid_adjoint(c, &k.swap_channels(), 2, raw_h, raw_w)?;
    let placed = fit(&raw, th, tw);
    if mode.is_padded() {
        pad_adjoint(&placed, mode)
    } else {
        Ok(placed)
    }
}

/// Periodic [`prolong`] as a gather: every fine sample sums its taps in the
/// same order, so the result commutes exactly with even circular shifts.
fn prolong_periodic(c: &Field, k: &Kernel, out_h: usize, out_w: usize) -> Field {
    let (ch, cw) = (c.height() as isize, c.width() as isize);
    let mut out = Field::zeros(k.out_channels(), out_h, out_w);
    for o in 0..k.out_channels() {
        for y in 0..out_h {
            for x in 0..out_w {
                let mut acc = 0.0;
                for i in 0..k.in_channels() {
                    let plane = c.plane(i);
                    for r in 0..k.kh() {
                        let py = y as isize + 1 - r as isize;
                        if py.rem_euclid(2) != 0 {
                            continue;
                        }
                        let cy = py.div_euclid(2).rem_euclid(ch) as usize;
                        for col in 0..k.kw() {
                            let px = x as isize + 1 - col as isize;
                            if px.rem_euclid(2) != 0 {
                                continue;
                            }
                            let cx = px.div_euclid(2).rem_euclid(cw) as usize;
                            acc += k.get(o, i, r, col) * plane[cy * cw as usize + cx];
                        }
                    }
                }
                out.set(o, y, x, acc);
            }
        }
    }
    out
}

/// Coarse-side gradient of [`prolong`].
pub fn prolong_grad_input(
    g: &Field,
    k: &Kernel,
    mode: BoundaryMode,
    coarse_h: usize,
    coarse_w: usize,
) -> Result<Field> {
    let graw = prolong_raw_grad(g, (k.kh(), k.kw()), mode, coarse_h, coarse_w)?;
    corr_valid(&graw, &k.swap_channels(), 2)
}

/// Kernel gradient of [`prolong`], in the `[fine][coarse]` layout.
pub fn prolong_grad_kernel(c: &Field, g: &Field, k_dims: (usize, usize), mode: BoundaryMode) -> Result<Kernel> {
    let (kh, kw) = k_dims;
    let graw = prolong_raw_grad(g, k_dims, mode, c.height(), c.width())?;
    Ok(corr_valid_kernel_grad(&graw, c, 2, kh, kw)?.swap_channels())
}

fn prolong_raw_grad(
    g: &Field,
    (kh, kw): (usize, usize),
    mode: BoundaryMode,
    coarse_h: usize,
    coarse_w: usize,
) -> Result<Field> {
    let (raw_h, raw_w) = (raw_extent(coarse_h, kh), raw_extent(coarse_w, kw));
    prolong_target(mode, g.height(), g.width(), raw_h, raw_w)?;
    let placed = if mode.is_padded() { pad(g, mode)? } else { g.clone() };
    Ok(fit(&placed, raw_h, raw_w))
}

/// 4×4 stride-2 transposed convolution with the outer ring of the
/// `2d + 2` raw output trimmed, giving exactly `2d × 2d`.
pub fn conv_transpose2d(f: &Field, k: &Kernel) -> Result<Field> {
    if k.kh() != 4 || k.kw() != 4 {
        return Err(invalid(format!("transposed convolution expects a 4x4 kernel, got {}x{}", k.kh(), k.kw())));
    }
    prolong(f, k, BoundaryMode::DirichletZero, 2 * f.height(), 2 * f.width())
}
