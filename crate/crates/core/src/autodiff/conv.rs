//! Convolution kernels (im2col + GEMM) and the fused broadcast convolution
//! used as the first decoder layer.

use crate::scalar::Scalar;

/// Padding mode for 2-D convolutions. `Same` zero-pads symmetrically; when the
/// excess is odd the extra row/column goes to the bottom/right.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Resolved geometry of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        (channels, height, width): (usize, usize, usize),
        (kernel_h, kernel_w): (usize, usize),
        stride: usize,
        padding: Padding,
    ) -> Option<Self> {
        if stride == 0 {
            return None;
        }
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Same => {
                let oh = height.div_ceil(stride);
                let ow = width.div_ceil(stride);
                let ph = ((oh - 1) * stride + kernel_h).saturating_sub(height);
                let pw = ((ow - 1) * stride + kernel_w).saturating_sub(width);
                (oh, ow, ph / 2, pw / 2)
            }
            Padding::Valid => {
                if kernel_h > height || kernel_w > width {
                    return None;
                }
                ((height - kernel_h) / stride + 1, (width - kernel_w) / stride + 1, 0, 0)
            }
        };
        Some(Self {
            channels,
            height,
            width,
            kernel_h,
            kernel_w,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate read by output row `o` at kernel row `k`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        let v = (o * self.stride + k) as isize - pad as isize;
        (v >= 0 && (v as usize) < extent).then_some(v as usize)
    }
}

/// Unfolds one `[C, H, W]` image into `[C*KH*KW, OH*OW]` columns.
pub fn im2col<S: Scalar>(g: &ConvGeometry, image: &[S], cols: &mut [S]) {
    let p = g.out_pixels();
    let kk = g.kernel_h * g.kernel_w;
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = c * kk + ky * g.kernel_w + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    match g.src(oy, ky, g.pad_top, g.height) {
                        None => line.fill(S::zero()),
                        Some(iy) => {
                            let src = &plane[iy * g.width..(iy + 1) * g.width];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match g.src(ox, kx, g.pad_left, g.width) {
                                    Some(ix) => src[ix],
                                    None => S::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Folds column gradients back onto a `[C, H, W]` image gradient (accumulating).
pub fn col2im<S: Scalar>(g: &ConvGeometry, cols: &[S], image: &mut [S]) {
    let p = g.out_pixels();
    let kk = g.kernel_h * g.kernel_w;
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = c * kk + ky * g.kernel_w + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let Some(iy) = g.src(oy, ky, g.pad_top, g.height) else {
                        continue;
                    };
                    for ox in 0..g.out_w {
                        if let Some(ix) = g.src(ox, kx, g.pad_left, g.width) {
                            plane[iy * g.width + ix] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[n] = W · im2col(x[n]) + b` for a batch of `n` images.
pub fn conv2d_forward<S: Scalar>(
    g: &ConvGeometry,
    batch: usize,
    x: &[S],
    w: &[S],
    out_channels: usize,
    b: Option<&[S]>,
) -> Vec<S> {
    let p = g.out_pixels();
    let rows = g.col_rows();
    let in_len = g.channels * g.height * g.width;
    let mut cols = vec![S::zero(); rows * p];
    let mut out = vec![S::zero(); batch * out_channels * p];
    for n in 0..batch {
        im2col(g, &x[n * in_len..(n + 1) * in_len], &mut cols);
        let dst = &mut out[n * out_channels * p..(n + 1) * out_channels * p];
        if let Some(b) = b {
            for (o, chunk) in dst.chunks_exact_mut(p).enumerate() {
                chunk.fill(b[o]);
            }
        }
        let beta = if b.is_some() { S::one() } else { S::zero() };
        S::gemm(
            out_channels,
            rows,
            p,
            S::one(),
            w,
            (rows, 1),
            &cols,
            (p, 1),
            beta,
            dst,
            (p, 1),
        );
    }
    out
}

/// Gradients of a batched convolution. Each requested output is accumulated
/// into the provided buffer.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<S: Scalar>(
    g: &ConvGeometry,
    batch: usize,
    x: &[S],
    w: &[S],
    out_channels: usize,
    grad_out: &[S],
    mut gx: Option<&mut [S]>,
    mut gw: Option<&mut [S]>,
    mut gb: Option<&mut [S]>,
) {
    let p = g.out_pixels();
    let rows = g.col_rows();
    let in_len = g.channels * g.height * g.width;
    let mut cols = vec![S::zero(); rows * p];
    let mut gcols = vec![S::zero(); rows * p];
    for n in 0..batch {
        let go = &grad_out[n * out_channels * p..(n + 1) * out_channels * p];
        if let Some(gb) = gb.as_deref_mut() {
            for (o, chunk) in go.chunks_exact(p).enumerate() {
                gb[o] += chunk.iter().copied().sum::<S>();
            }
        }
        if let Some(gw) = gw.as_deref_mut() {
            im2col(g, &x[n * in_len..(n + 1) * in_len], &mut cols);
            // gW += G[O, P] · cols^T[P, rows]
            S::gemm(
                out_channels,
                p,
                rows,
                S::one(),
                go,
                (p, 1),
                &cols,
                (1, p),
                S::one(),
                gw,
                (rows, 1),
            );
        }
        if let Some(gx) = gx.as_deref_mut() {
            // gcols = W^T[rows, O] · G[O, P]
            S::gemm(
                rows,
                out_channels,
                p,
                S::one(),
                w,
                (1, rows),
                go,
                (p, 1),
                S::zero(),
                &mut gcols,
                (p, 1),
            );
            col2im(g, &gcols, &mut gx[n * in_len..(n + 1) * in_len]);
        }
    }
}

/// Linear ramp from -1 to 1 over `n` samples.
pub fn ramp<S: Scalar>(i: usize, n: usize) -> S {
    if n <= 1 {
        S::zero()
    } else {
        S::lit(-1.0 + 2.0 * i as f64 / (n - 1) as f64)
    }
}

/// Coordinate planes `[2, H, W]`: horizontal ramp then vertical ramp, both
/// -1 at the top-left corner.
pub fn coordinate_planes<S: Scalar>(height: usize, width: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(2 * height * width);
    for _ in 0..height {
        for x in 0..width {
            out.push(ramp(x, width));
        }
    }
    for y in 0..height {
        for _ in 0..width {
            out.push(ramp(y, height));
        }
    }
    out
}

/// Shape information for the fused "broadcast latent + coordinates, then
/// same-padded stride-1 convolution" layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BroadcastConvGeometry {
    pub slots: usize,
    pub latent: usize,
    pub out_channels: usize,
    pub conv: ConvGeometry,
}

impl BroadcastConvGeometry {
    fn kk(&self) -> usize {
        self.conv.kernel_h * self.conv.kernel_w
    }

    /// Kernel offsets `ky*KW+kx` whose tap lands inside the image at (y, x).
    fn valid_taps(&self, y: usize, x: usize, taps: &mut Vec<usize>) {
        let g = &self.conv;
        taps.clear();
        for ky in 0..g.kernel_h {
            if g.src(y, ky, g.pad_top, g.height).is_none() {
                continue;
            }
            for kx in 0..g.kernel_w {
                if g.src(x, kx, g.pad_left, g.width).is_some() {
                    taps.push(ky * g.kernel_w + kx);
                }
            }
        }
    }
}

/// Forward pass of the fused layer. `w` is `[O, M+2, KH, KW]`, `z` is `[K, M]`.
pub fn broadcast_conv_forward<S: Scalar>(
    bg: &BroadcastConvGeometry,
    z: &[S],
    w: &[S],
    b: Option<&[S]>,
) -> Vec<S> {
    let g = &bg.conv;
    let (k_slots, m, o_ch) = (bg.slots, bg.latent, bg.out_channels);
    let kk = bg.kk();
    let cin = m + 2;
    let p = g.height * g.width;
    // Per-slot latent contribution of every kernel tap: A[k, o, tap].
    let mut taps_val = vec![S::zero(); k_slots * o_ch * kk];
    for k in 0..k_slots {
        let zk = &z[k * m..(k + 1) * m];
        for o in 0..o_ch {
            for t in 0..kk {
                let mut acc = S::zero();
                for (j, &zv) in zk.iter().enumerate() {
                    acc += w[(o * cin + j) * kk + t] * zv;
                }
                taps_val[(k * o_ch + o) * kk + t] = acc;
            }
        }
    }
    // Slot-independent part: bias plus the coordinate channels.
    let coords = coordinate_planes::<S>(g.height, g.width);
    let mut wc = Vec::with_capacity(o_ch * 2 * kk);
    for o in 0..o_ch {
        wc.extend_from_slice(&w[(o * cin + m) * kk..(o * cin + m + 2) * kk]);
    }
    let coord_geom = ConvGeometry { channels: 2, ..*g };
    let shared = conv2d_forward(&coord_geom, 1, &coords, &wc, o_ch, b);
    let mut out = vec![S::zero(); k_slots * o_ch * p];
    let mut taps = Vec::with_capacity(kk);
    for y in 0..g.height {
        for x in 0..g.width {
            bg.valid_taps(y, x, &mut taps);
            let pix = y * g.width + x;
            for k in 0..k_slots {
                for o in 0..o_ch {
                    let a = &taps_val[(k * o_ch + o) * kk..(k * o_ch + o + 1) * kk];
                    let mut acc = shared[o * p + pix];
                    for &t in &taps {
                        acc += a[t];
                    }
                    out[(k * o_ch + o) * p + pix] = acc;
                }
            }
        }
    }
    out
}

/// Backward pass of the fused layer; accumulates into the provided buffers.
pub fn broadcast_conv_backward<S: Scalar>(
    bg: &BroadcastConvGeometry,
    z: &[S],
    w: &[S],
    grad_out: &[S],
    gz: Option<&mut [S]>,
    gw: Option<&mut [S]>,
    gb: Option<&mut [S]>,
) {
    let g = &bg.conv;
    let (k_slots, m, o_ch) = (bg.slots, bg.latent, bg.out_channels);
    let kk = bg.kk();
    let cin = m + 2;
    let p = g.height * g.width;
    // Per tap sums of the output gradient over the pixels where it is valid.
    let mut tap_grad = vec![S::zero(); k_slots * o_ch * kk];
    let mut taps = Vec::with_capacity(kk);
    for y in 0..g.height {
        for x in 0..g.width {
            bg.valid_taps(y, x, &mut taps);
            let pix = y * g.width + x;
            for ko in 0..k_slots * o_ch {
                let gv = grad_out[ko * p + pix];
                let dst = &mut tap_grad[ko * kk..(ko + 1) * kk];
                for &t in &taps {
                    dst[t] += gv;
                }
            }
        }
    }
    if let Some(gz) = gz {
        for k in 0..k_slots {
            for j in 0..m {
                let mut acc = S::zero();
                for o in 0..o_ch {
                    let wr = &w[(o * cin + j) * kk..(o * cin + j + 1) * kk];
                    let tg = &tap_grad[(k * o_ch + o) * kk..(k * o_ch + o + 1) * kk];
                    for t in 0..kk {
                        acc += wr[t] * tg[t];
                    }
                }
                gz[k * m + j] += acc;
            }
        }
    }
    // Slot-summed output gradient drives the shared (coordinate + bias) part.
    let needs_shared = gw.is_some() || gb.is_some();
    let mut summed = vec![S::zero(); if needs_shared { o_ch * p } else { 0 }];
    if needs_shared {
        for k in 0..k_slots {
            for (d, s) in summed
                .iter_mut()
                .zip(&grad_out[k * o_ch * p..(k + 1) * o_ch * p])
            {
                *d += *s;
            }
        }
    }
    if let Some(gw) = gw {
        for o in 0..o_ch {
            for j in 0..m {
                for t in 0..kk {
                    let mut acc = S::zero();
                    for k in 0..k_slots {
                        acc += z[k * m + j] * tap_grad[(k * o_ch + o) * kk + t];
                    }
                    gw[(o * cin + j) * kk + t] += acc;
                }
            }
        }
        let coords = coordinate_planes::<S>(g.height, g.width);
        let coord_geom = ConvGeometry { channels: 2, ..*g };
        let mut gwc = vec![S::zero(); o_ch * 2 * kk];
        let wc = vec![S::zero(); o_ch * 2 * kk];
        conv2d_backward(
            &coord_geom,
            1,
            &coords,
            &wc,
            o_ch,
            &summed,
            None,
            Some(&mut gwc),
            None,
        );
        for o in 0..o_ch {
            for (d, s) in gw[(o * cin + m) * kk..(o * cin + m + 2) * kk]
                .iter_mut()
                .zip(&gwc[o * 2 * kk..(o + 1) * 2 * kk])
            {
                *d += *s;
            }
        }
    }
    if let Some(gb) = gb {
        for o in 0..o_ch {
            gb[o] += summed[o * p..(o + 1) * p].iter().copied().sum::<S>();
        }
    }
}
