//! Convolution kernels shared by the tape and the finite-difference oracles.
//!
//! All 3x3 kernels use zero padding of one pixel (1x1 needs none) and a
//! fixed accumulation contract: each output element starts from its bias
//! and accumulates contributions in `(dy, dx, cin)` order with fused
//! multiply-adds. A naive per-element loop with the same order reproduces
//! the results bit for bit. Output channels are processed in register
//! blocks, which changes nothing about the per-element order; no result
//! ever depends on thread count.

/// Output side length for a 3x3 convolution with padding 1.
pub fn conv_output_side(side: usize, stride: usize) -> usize {
    (side - 1) / stride + 1
}

/// acc[k] += s * w[k] for all k, fused.
#[inline]
fn axpy(acc: &mut [f32], s: f32, w: &[f32]) {
    for (a, &b) in acc.iter_mut().zip(w) {
        *a = s.mul_add(b, *a);
    }
}

/// One block of output channels `[ob, ob + B)` across all positions;
/// the accumulator stays in registers for the whole tap loop.
#[allow(clippy::too_many_arguments)]
fn conv3x3_block<const B: usize>(
    inp: &[f32],
    h: usize,
    w: usize,
    cin: usize,
    wgt: &[f32],
    bias: &[f32],
    cout: usize,
    stride: usize,
    out: &mut [f32],
    ob: usize,
) {
    let (ho, wo) = (conv_output_side(h, stride), conv_output_side(w, stride));
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = [0.0f32; B];
            acc.copy_from_slice(&bias[ob..ob + B]);
            for dy in 0..3usize {
                let yy = (y * stride + dy) as isize - 1;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in 0..3usize {
                    let xx = (x * stride + dx) as isize - 1;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let px = &inp[(yy as usize * w + xx as usize) * cin..][..cin];
                    let wrow = &wgt[(dy * 3 + dx) * cin * cout..][..cin * cout];
                    for (i, &s) in px.iter().enumerate() {
                        let wr = &wrow[i * cout + ob..][..B];
                        for l in 0..B {
                            acc[l] = s.mul_add(wr[l], acc[l]);
                        }
                    }
                }
            }
            out[(y * wo + x) * cout + ob..][..B].copy_from_slice(&acc);
        }
    }
}

/// Remaining output channels one at a time.
#[allow(clippy::too_many_arguments)]
fn conv3x3_tail(
    inp: &[f32],
    h: usize,
    w: usize,
    cin: usize,
    wgt: &[f32],
    bias: &[f32],
    cout: usize,
    stride: usize,
    out: &mut [f32],
    ob: usize,
) {
    let (ho, wo) = (conv_output_side(h, stride), conv_output_side(w, stride));
    for y in 0..ho {
        for x in 0..wo {
            for o in ob..cout {
                let mut acc = bias[o];
                for dy in 0..3usize {
                    let yy = (y * stride + dy) as isize - 1;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for dx in 0..3usize {
                        let xx = (x * stride + dx) as isize - 1;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let at = (yy as usize * w + xx as usize) * cin;
                        let wrow = (dy * 3 + dx) * cin * cout;
                        for i in 0..cin {
                            acc = inp[at + i].mul_add(wgt[wrow + i * cout + o], acc);
                        }
                    }
                }
                out[(y * wo + x) * cout + o] = acc;
            }
        }
    }
}

/// 3x3 convolution, zero padded.
///
/// `inp` is `[h, w, cin]`, `wgt` is `[3, 3, cin, cout]`, `bias` is
/// `[cout]`; returns `[h_out, w_out, cout]` data.
pub fn conv3x3_forward(
    inp: &[f32],
    h: usize,
    w: usize,
    cin: usize,
    wgt: &[f32],
    bias: &[f32],
    cout: usize,
    stride: usize,
) -> Vec<f32> {
    let (ho, wo) = (conv_output_side(h, stride), conv_output_side(w, stride));
    let mut out = vec![0.0f32; ho * wo * cout];
    let mut ob = 0;
    while cout - ob >= 128 {
        conv3x3_block::<128>(inp, h, w, cin, wgt, bias, cout, stride, &mut out, ob);
        ob += 128;
    }
    while cout - ob >= 32 {
        conv3x3_block::<32>(inp, h, w, cin, wgt, bias, cout, stride, &mut out, ob);
        ob += 32;
    }
    while cout - ob >= 16 {
        conv3x3_block::<16>(inp, h, w, cin, wgt, bias, cout, stride, &mut out, ob);
        ob += 16;
    }
    if ob < cout {
        conv3x3_tail(inp, h, w, cin, wgt, bias, cout, stride, &mut out, ob);
    }
    out
}

fn conv1x1_block<const B: usize>(
    inp: &[f32],
    positions: usize,
    cin: usize,
    wgt: &[f32],
    bias: &[f32],
    cout: usize,
    out: &mut [f32],
    ob: usize,
) {
    for p in 0..positions {
        let mut acc = [0.0f32; B];
        acc.copy_from_slice(&bias[ob..ob + B]);
        let px = &inp[p * cin..][..cin];
        for (i, &s) in px.iter().enumerate() {
            let wr = &wgt[i * cout + ob..][..B];
            for l in 0..B {
                acc[l] = s.mul_add(wr[l], acc[l]);
            }
        }
        out[p * cout + ob..][..B].copy_from_slice(&acc);
    }
}

/// 1x1 convolution: an independent `cin -> cout` map at every position.
pub fn conv1x1_forward(
    inp: &[f32],
    positions: usize,
    cin: usize,
    wgt: &[f32],
    bias: &[f32],
    cout: usize,
) -> Vec<f32> {
    let mut out = vec![0.0f32; positions * cout];
    let mut ob = 0;
    while cout - ob >= 128 {
        conv1x1_block::<128>(inp, positions, cin, wgt, bias, cout, &mut out, ob);
        ob += 128;
    }
    while cout - ob >= 16 {
        conv1x1_block::<16>(inp, positions, cin, wgt, bias, cout, &mut out, ob);
        ob += 16;
    }
    for p in 0..positions {
        for o in ob..cout {
            let mut acc = bias[o];
            for i in 0..cin {
                acc = inp[p * cin + i].mul_add(wgt[i * cout + o], acc);
            }
            out[p * cout + o] = acc;
        }
    }
    out
}

pub struct ConvGrads {
    pub d_input: Option<Vec<f32>>,
    pub d_weight: Vec<f32>,
    pub d_bias: Vec<f32>,
}

/// One weight-gradient block: for a fixed tap and input channel the
/// accumulator covers output channels `[ob, ob + B)` and stays in
/// registers while streaming over all positions in row-major order.
fn conv3x3_dw_block<const B: usize>(
    inp: &[f32],
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    d_out: &[f32],
    d_weight: &mut [f32],
    ob: usize,
) {
    for dy in 0..3usize {
        let (ylo, yhi) = (usize::from(dy == 0), h - usize::from(dy == 2));
        for dx in 0..3usize {
            let (xlo, xhi) = (usize::from(dx == 0), w - usize::from(dx == 2));
            for i in 0..cin {
                let mut acc = [0.0f32; B];
                for y in ylo..yhi {
                    for x in xlo..xhi {
                        let s = inp[((y + dy - 1) * w + (x + dx - 1)) * cin + i];
                        let go = &d_out[(y * w + x) * cout + ob..][..B];
                        for l in 0..B {
                            acc[l] = s.mul_add(go[l], acc[l]);
                        }
                    }
                }
                d_weight[((dy * 3 + dx) * cin + i) * cout + ob..][..B].copy_from_slice(&acc);
            }
        }
    }
}

/// Backward pass of [`conv3x3_forward`].
///
/// `d_out` is the upstream gradient in output layout. `d_input` is only
/// produced when requested (seeds and other constants skip it). For
/// stride 1 the input gradient is itself a 3x3 convolution of `d_out`
/// with the kernel transposed and spatially flipped.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward(
    inp: &[f32],
    h: usize,
    w: usize,
    cin: usize,
    wgt: &[f32],
    cout: usize,
    stride: usize,
    d_out: &[f32],
    want_d_input: bool,
) -> ConvGrads {
    let (ho, wo) = (conv_output_side(h, stride), conv_output_side(w, stride));
    let mut d_weight = vec![0.0f32; 9 * cin * cout];
    let mut d_bias = vec![0.0f32; cout];

    for p in 0..ho * wo {
        let go = &d_out[p * cout..][..cout];
        for (b, &g) in d_bias.iter_mut().zip(go) {
            *b += g;
        }
    }

    if stride == 1 {
        let mut ob = 0;
        while cout - ob >= 128 {
            conv3x3_dw_block::<128>(inp, h, w, cin, cout, d_out, &mut d_weight, ob);
            ob += 128;
        }
        while cout - ob >= 16 {
            conv3x3_dw_block::<16>(inp, h, w, cin, cout, d_out, &mut d_weight, ob);
            ob += 16;
        }
        if ob < cout {
            for dy in 0..3usize {
                let (ylo, yhi) = (usize::from(dy == 0), h - usize::from(dy == 2));
                for dx in 0..3usize {
                    let (xlo, xhi) = (usize::from(dx == 0), w - usize::from(dx == 2));
                    for i in 0..cin {
                        for o in ob..cout {
                            let mut acc = 0.0f32;
                            for y in ylo..yhi {
                                for x in xlo..xhi {
                                    let s = inp[((y + dy - 1) * w + (x + dx - 1)) * cin + i];
                                    acc = s.mul_add(d_out[(y * w + x) * cout + o], acc);
                                }
                            }
                            d_weight[((dy * 3 + dx) * cin + i) * cout + o] = acc;
                        }
                    }
                }
            }
        }
    } else {
        for y in 0..ho {
            for x in 0..wo {
                let go = &d_out[(y * wo + x) * cout..][..cout];
                for dy in 0..3usize {
                    let yy = (y * stride + dy) as isize - 1;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for dx in 0..3usize {
                        let xx = (x * stride + dx) as isize - 1;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let px = &inp[(yy as usize * w + xx as usize) * cin..][..cin];
                        let dw = &mut d_weight[(dy * 3 + dx) * cin * cout..][..cin * cout];
                        for (i, &s) in px.iter().enumerate() {
                            axpy(&mut dw[i * cout..][..cout], s, go);
                        }
                    }
                }
            }
        }
    }

    let d_input = if !want_d_input {
        None
    } else if stride == 1 {
        // Transpose to [3, 3, cout, cin] and flip the taps.
        let mut wt = vec![0.0f32; 9 * cin * cout];
        for tap in 0..9 {
            let flipped = 8 - tap;
            for i in 0..cin {
                for o in 0..cout {
                    wt[(flipped * cout + o) * cin + i] = wgt[(tap * cin + i) * cout + o];
                }
            }
        }
        let zero_bias = vec![0.0f32; cin];
        Some(conv3x3_forward(
            d_out, ho, wo, cout, &wt, &zero_bias, cin, 1,
        ))
    } else {
        // Strided scatter; only the small discriminator stages take it.
        let mut wt = vec![0.0f32; 9 * cin * cout];
        for tap in 0..9 {
            for i in 0..cin {
                for o in 0..cout {
                    wt[(tap * cout + o) * cin + i] = wgt[(tap * cin + i) * cout + o];
                }
            }
        }
        let mut di = vec![0.0f32; h * w * cin];
        for y in 0..ho {
            for x in 0..wo {
                let go = &d_out[(y * wo + x) * cout..][..cout];
                for dy in 0..3usize {
                    let yy = (y * stride + dy) as isize - 1;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for dx in 0..3usize {
                        let xx = (x * stride + dx) as isize - 1;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let di_px =
                            &mut di[(yy as usize * w + xx as usize) * cin..][..cin];
                        let wtap = &wt[(dy * 3 + dx) * cout * cin..][..cout * cin];
                        for (o, &g) in go.iter().enumerate() {
                            axpy(di_px, g, &wtap[o * cin..][..cin]);
                        }
                    }
                }
            }
        }
        Some(di)
    };

    ConvGrads {
        d_input,
        d_weight,
        d_bias,
    }
}

/// Backward pass of [`conv1x1_forward`].
pub fn conv1x1_backward(
    inp: &[f32],
    positions: usize,
    cin: usize,
    wgt: &[f32],
    cout: usize,
    d_out: &[f32],
    want_d_input: bool,
) -> ConvGrads {
    let mut d_weight = vec![0.0f32; cin * cout];
    let mut d_bias = vec![0.0f32; cout];

    for p in 0..positions {
        let go = &d_out[p * cout..][..cout];
        for (b, &g) in d_bias.iter_mut().zip(go) {
            *b += g;
        }
        let px = &inp[p * cin..][..cin];
        for (i, &s) in px.iter().enumerate() {
            axpy(&mut d_weight[i * cout..][..cout], s, go);
        }
    }

    let d_input = want_d_input.then(|| {
        let mut wt = vec![0.0f32; cin * cout];
        for i in 0..cin {
            for o in 0..cout {
                wt[o * cin + i] = wgt[i * cout + o];
            }
        }
        let zero_bias = vec![0.0f32; cin];
        conv1x1_forward(d_out, positions, cout, &wt, &zero_bias, cin)
    });

    ConvGrads {
        d_input,
        d_weight,
        d_bias,
    }
}
