use super::{BnState, ModelParams, SoftmaxMap, BN_EPS, HIDDEN, IN_CHANNELS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How batch normalisation treats its statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalise by batch statistics and update the running statistics.
    TrainStats,
    /// Normalise by running statistics, leave them untouched.
    Frozen,
    /// As `Frozen`, without keeping a cache for backward.
    Eval,
}

/// Activations kept by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    mode: BnMode,
    params: ModelParams,
    batch: usize,
    height: usize,
    width: usize,
    input: Vec<f64>,
    xhat: [Vec<f64>; 2],
    invstd: [Vec<f64>; 2],
    act: [Vec<f64>; 2],
    probs: Vec<f64>,
}

impl ForwardCache {
    pub fn mode(&self) -> BnMode {
        self.mode
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

#[derive(Debug)]
pub struct ForwardOutput {
    pub maps: Vec<SoftmaxMap>,
    pub cache: Option<ForwardCache>,
}

fn shift_range(k: usize, n: usize) -> (usize, usize, usize) {
    // output index range [lo, hi) and source start for tap offset k - 1
    match k {
        0 => (1, n, 0),
        1 => (0, n, 0),
        _ => (0, n - 1, 1),
    }
}

/// Unfolds a zero-padded `cin×h×w` input into a `(cin·9)×(h·w)` patch matrix
/// whose row order matches the `[co][ci][ky][kx]` weight layout.
fn im2col(input: &[f64], cin: usize, h: usize, w: usize, cols: &mut [f64]) {
    let n = h * w;
    cols.fill(0.0);
    for ci in 0..cin {
        let inp = &input[ci * n..(ci + 1) * n];
        for ky in 0..3 {
            let (y0, y1, sy0) = shift_range(ky, h);
            for kx in 0..3 {
                let (x0, x1, sx0) = shift_range(kx, w);
                let len = x1 - x0;
                let row = &mut cols[((ci * 3 + ky) * 3 + kx) * n..][..n];
                for (j, y) in (y0..y1).enumerate() {
                    let sy = sy0 + j;
                    row[y * w + x0..y * w + x1]
                        .copy_from_slice(&inp[sy * w + sx0..sy * w + sx0 + len]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
fn col2im(cols: &[f64], cin: usize, h: usize, w: usize, dinput: &mut [f64]) {
    let n = h * w;
    for ci in 0..cin {
        let din = &mut dinput[ci * n..(ci + 1) * n];
        for ky in 0..3 {
            let (y0, y1, sy0) = shift_range(ky, h);
            for kx in 0..3 {
                let (x0, x1, sx0) = shift_range(kx, w);
                let len = x1 - x0;
                let row = &cols[((ci * 3 + ky) * 3 + kx) * n..][..n];
                for (j, y) in (y0..y1).enumerate() {
                    let sy = sy0 + j;
                    for (d, &g) in din[sy * w + sx0..sy * w + sx0 + len]
                        .iter_mut()
                        .zip(&row[y * w + x0..y * w + x1])
                    {
                        *d += g;
                    }
                }
            }
        }
    }
}

/// Row-major `c (m×n) = alpha·a·b + beta·c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    assert!(a.len() >= m * k && b.len() >= k * n);
    // SAFETY: the asserts above bound every index reachable through the
    // given strides, which describe dense row- or column-major views.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3x3(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
    out: &mut [f64],
    cols: &mut Vec<f64>,
) {
    let n = h * w;
    let k = cin * 9;
    cols.resize(k * n, 0.0);
    im2col(input, cin, h, w, cols);
    for co in 0..cout {
        out[co * n..(co + 1) * n].fill(bias[co]);
    }
    gemm(
        cout,
        k,
        n,
        weight,
        (k as isize, 1),
        cols,
        (n as isize, 1),
        1.0,
        out,
    );
}

/// Accumulates weight, bias and (optionally) input gradients of a 3×3 conv.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
    dout: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    dinput: Option<&mut [f64]>,
    cols: &mut Vec<f64>,
) {
    let n = h * w;
    let k = cin * 9;
    for co in 0..cout {
        dbias[co] += dout[co * n..(co + 1) * n].iter().sum::<f64>();
    }
    cols.resize(k * n, 0.0);
    im2col(input, cin, h, w, cols);
    // dW += dout · colsᵀ
    gemm(
        cout,
        n,
        k,
        dout,
        (n as isize, 1),
        cols,
        (1, n as isize),
        1.0,
        dweight,
    );
    if let Some(din) = dinput {
        // dcols = Wᵀ · dout
        let mut dcols = vec![0.0; k * n];
        gemm(
            k,
            cout,
            n,
            weight,
            (1, k as isize),
            dout,
            (n as isize, 1),
            0.0,
            &mut dcols,
        );
        col2im(&dcols, cin, h, w, din);
    }
}

fn check_finite(values: &[f64], layer: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(layer))
    }
}

struct BnLayer<'a> {
    index: usize,
    scale: &'a [f64],
    shift: &'a [f64],
}

/// Normalises `z` (B×C×n) in place into `xhat`, writes the post-ReLU
/// activation into `z`, and returns the per-channel inverse std.
fn batch_norm_relu(
    z: &mut [f64],
    xhat: &mut [f64],
    batch: usize,
    n: usize,
    layer: BnLayer<'_>,
    bn: &mut BnState,
    mode: BnMode,
) -> Vec<f64> {
    let c_count = HIDDEN;
    let (mean, invstd) = match mode {
        BnMode::TrainStats => {
            let count = (batch * n) as f64;
            let mut mean = vec![0.0; c_count];
            let mut var = vec![0.0; c_count];
            for c in 0..c_count {
                let mut s = 0.0;
                for b in 0..batch {
                    let off = (b * c_count + c) * n;
                    s += z[off..off + n].iter().sum::<f64>();
                }
                let m = s / count;
                let mut ss = 0.0;
                for b in 0..batch {
                    let off = (b * c_count + c) * n;
                    ss += z[off..off + n].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                }
                mean[c] = m;
                var[c] = ss / count;
            }
            let u = bn.update_momentum;
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let rm = &mut bn.running_mean[layer.index];
            let rv = &mut bn.running_var[layer.index];
            for c in 0..c_count {
                rm[c] = (1.0 - u) * rm[c] + u * mean[c];
                rv[c] = (1.0 - u) * rv[c] + u * var[c] * unbias;
            }
            let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            (mean, invstd)
        }
        BnMode::Frozen | BnMode::Eval => (
            bn.running_mean[layer.index].clone(),
            bn.running_var[layer.index]
                .iter()
                .map(|v| 1.0 / (v + BN_EPS).sqrt())
                .collect(),
        ),
    };
    for b in 0..batch {
        for c in 0..c_count {
            let off = (b * c_count + c) * n;
            let (m, is, g, s) = (mean[c], invstd[c], layer.scale[c], layer.shift[c]);
            for (zv, xv) in z[off..off + n].iter_mut().zip(&mut xhat[off..off + n]) {
                let x = (*zv - m) * is;
                *xv = x;
                *zv = (g * x + s).max(0.0);
            }
        }
    }
    invstd
}

fn forward_impl(
    params: &ModelParams,
    bn: &mut BnState,
    batch: &Tensor,
    mode: BnMode,
) -> Result<ForwardOutput> {
    let dims = batch.dims();
    if dims.len() != 4 || dims[1] != IN_CHANNELS {
        return Err(Error::Shape(format!("expected B×3×h×w batch, got {dims:?}")));
    }
    let (bsz, h, w) = (dims[0], dims[2], dims[3]);
    let n = h * w;
    let k = params.num_classes();
    let input = batch.data();

    let mut cols = Vec::new();
    let mut act1 = vec![0.0; bsz * HIDDEN * n];
    for b in 0..bsz {
        conv3x3(
            &input[b * IN_CHANNELS * n..(b + 1) * IN_CHANNELS * n],
            IN_CHANNELS,
            h,
            w,
            params.slice("conv1.weight"),
            params.slice("conv1.bias"),
            HIDDEN,
            &mut act1[b * HIDDEN * n..(b + 1) * HIDDEN * n],
            &mut cols,
        );
    }
    check_finite(&act1, "conv1")?;
    let mut xhat1 = vec![0.0; act1.len()];
    let invstd1 = batch_norm_relu(
        &mut act1,
        &mut xhat1,
        bsz,
        n,
        BnLayer {
            index: 0,
            scale: params.slice("bn1.scale"),
            shift: params.slice("bn1.shift"),
        },
        bn,
        mode,
    );
    check_finite(&act1, "bn1")?;

    let mut act2 = vec![0.0; bsz * HIDDEN * n];
    for b in 0..bsz {
        conv3x3(
            &act1[b * HIDDEN * n..(b + 1) * HIDDEN * n],
            HIDDEN,
            h,
            w,
            params.slice("conv2.weight"),
            params.slice("conv2.bias"),
            HIDDEN,
            &mut act2[b * HIDDEN * n..(b + 1) * HIDDEN * n],
            &mut cols,
        );
    }
    check_finite(&act2, "conv2")?;
    let mut xhat2 = vec![0.0; act2.len()];
    let invstd2 = batch_norm_relu(
        &mut act2,
        &mut xhat2,
        bsz,
        n,
        BnLayer {
            index: 1,
            scale: params.slice("bn2.scale"),
            shift: params.slice("bn2.shift"),
        },
        bn,
        mode,
    );
    check_finite(&act2, "bn2")?;

    let w3 = params.slice("conv3.weight");
    let b3 = params.slice("conv3.bias");
    let mut probs = vec![0.0; bsz * k * n];
    for b in 0..bsz {
        let a = &act2[b * HIDDEN * n..(b + 1) * HIDDEN * n];
        let out = &mut probs[b * k * n..(b + 1) * k * n];
        for cls in 0..k {
            out[cls * n..(cls + 1) * n].fill(b3[cls]);
        }
        gemm(k, HIDDEN, n, w3, (HIDDEN as isize, 1), a, (n as isize, 1), 1.0, out);
        check_finite(out, "conv3")?;
        // softmax over the class axis
        for i in 0..n {
            let mut max = f64::NEG_INFINITY;
            for cls in 0..k {
                max = max.max(out[cls * n + i]);
            }
            let mut sum = 0.0;
            for cls in 0..k {
                let e = (out[cls * n + i] - max).exp();
                out[cls * n + i] = e;
                sum += e;
            }
            for cls in 0..k {
                out[cls * n + i] /= sum;
            }
        }
    }

    let maps = probs
        .chunks(k * n)
        .map(|chunk| {
            SoftmaxMap::from_tensor_unchecked(
                Tensor::new(vec![k, h, w], chunk.to_vec()).expect("consistent dims"),
            )
        })
        .collect();

    let cache = (mode != BnMode::Eval).then(|| ForwardCache {
        mode,
        params: params.clone(),
        batch: bsz,
        height: h,
        width: w,
        input: input.to_vec(),
        xhat: [xhat1, xhat2],
        invstd: [invstd1, invstd2],
        act: [act1, act2],
        probs,
    });
    Ok(ForwardOutput { maps, cache })
}

/// Runs the network on a `B×3×h×w` batch. Only `TrainStats` mutates `bn`.
pub fn forward(
    params: &ModelParams,
    bn: &mut BnState,
    batch: &Tensor,
    mode: BnMode,
) -> Result<ForwardOutput> {
    forward_impl(params, bn, batch, mode)
}

/// Eval-mode forward; a pure function of its arguments.
pub fn predict(params: &ModelParams, bn: &BnState, batch: &Tensor) -> Result<Vec<SoftmaxMap>> {
    let mut scratch = bn.clone();
    Ok(forward_impl(params, &mut scratch, batch, BnMode::Eval)?.maps)
}

/// Backward through BN (in the cache's mode) and the preceding ReLU.
/// `grad` holds dL/d(post-ReLU) on entry and dL/d(pre-BN) on exit.
fn batch_norm_relu_backward(
    grad: &mut [f64],
    cache: &ForwardCache,
    layer: usize,
    dscale: &mut [f64],
    dshift: &mut [f64],
) {
    let n = cache.height * cache.width;
    let bsz = cache.batch;
    let act = &cache.act[layer];
    let xhat = &cache.xhat[layer];
    let invstd = &cache.invstd[layer];
    let scale = cache
        .params
        .slice(if layer == 0 { "bn1.scale" } else { "bn2.scale" });

    for (g, &a) in grad.iter_mut().zip(act) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
    for c in 0..HIDDEN {
        let mut sum_dy = 0.0;
        let mut sum_dy_x = 0.0;
        for b in 0..bsz {
            let off = (b * HIDDEN + c) * n;
            for (g, x) in grad[off..off + n].iter().zip(&xhat[off..off + n]) {
                sum_dy += g;
                sum_dy_x += g * x;
            }
        }
        dscale[c] += sum_dy_x;
        dshift[c] += sum_dy;
        let g = scale[c];
        let is = invstd[c];
        match cache.mode {
            BnMode::TrainStats => {
                let count = (bsz * n) as f64;
                let mean_dy = sum_dy / count;
                let mean_dy_x = sum_dy_x / count;
                for b in 0..bsz {
                    let off = (b * HIDDEN + c) * n;
                    for (d, &x) in grad[off..off + n].iter_mut().zip(&xhat[off..off + n]) {
                        *d = g * is * (*d - mean_dy - x * mean_dy_x);
                    }
                }
            }
            BnMode::Frozen | BnMode::Eval => {
                for b in 0..bsz {
                    let off = (b * HIDDEN + c) * n;
                    for d in &mut grad[off..off + n] {
                        *d *= g * is;
                    }
                }
            }
        }
    }
}

/// Gradient of a scalar loss w.r.t. every parameter, given dL/dlogits as a
/// `B×K×h×w` tensor.
pub fn backward(cache: &ForwardCache, dlogits: &Tensor) -> Result<Vec<f64>> {
    let params = &cache.params;
    let k = params.num_classes();
    let (bsz, h, w) = (cache.batch, cache.height, cache.width);
    let n = h * w;
    if dlogits.dims() != [bsz, k, h, w] {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} does not match cached forward [{bsz}, {k}, {h}, {w}]",
            dlogits.dims()
        )));
    }
    if cache.mode == BnMode::Eval {
        return Err(Error::InvalidArgument("eval-mode forward has no backward".into()));
    }
    let layout = params.layout();
    let mut grad = vec![0.0; params.len()];
    let dl = dlogits.data();

    // conv3 (1×1)
    let mut dact2 = vec![0.0; bsz * HIDDEN * n];
    {
        let w3 = params.slice("conv3.weight");
        let rw = layout.range("conv3.weight");
        let rb = layout.range("conv3.bias");
        for b in 0..bsz {
            let a = &cache.act[1][b * HIDDEN * n..(b + 1) * HIDDEN * n];
            let d = &dl[b * k * n..(b + 1) * k * n];
            let da = &mut dact2[b * HIDDEN * n..(b + 1) * HIDDEN * n];
            for cls in 0..k {
                grad[rb.start + cls] += d[cls * n..(cls + 1) * n].iter().sum::<f64>();
            }
            gemm(
                k,
                n,
                HIDDEN,
                d,
                (n as isize, 1),
                a,
                (1, n as isize),
                1.0,
                &mut grad[rw.clone()],
            );
            gemm(
                HIDDEN,
                k,
                n,
                w3,
                (1, HIDDEN as isize),
                d,
                (n as isize, 1),
                1.0,
                da,
            );
        }
    }

    let mut dscale = vec![0.0; HIDDEN];
    let mut dshift = vec![0.0; HIDDEN];
    batch_norm_relu_backward(&mut dact2, cache, 1, &mut dscale, &mut dshift);
    grad[layout.range("bn2.scale")].copy_from_slice(&dscale);
    grad[layout.range("bn2.shift")].copy_from_slice(&dshift);

    // conv2
    let mut cols = Vec::new();
    let mut dact1 = vec![0.0; bsz * HIDDEN * n];
    {
        let mut dw = vec![0.0; HIDDEN * HIDDEN * 9];
        let mut db = vec![0.0; HIDDEN];
        for b in 0..bsz {
            let span = b * HIDDEN * n..(b + 1) * HIDDEN * n;
            conv3x3_backward(
                &cache.act[0][span.clone()],
                HIDDEN,
                h,
                w,
                params.slice("conv2.weight"),
                HIDDEN,
                &dact2[span.clone()],
                &mut dw,
                &mut db,
                Some(&mut dact1[span]),
                &mut cols,
            );
        }
        grad[layout.range("conv2.weight")].copy_from_slice(&dw);
        grad[layout.range("conv2.bias")].copy_from_slice(&db);
    }

    dscale.fill(0.0);
    dshift.fill(0.0);
    batch_norm_relu_backward(&mut dact1, cache, 0, &mut dscale, &mut dshift);
    grad[layout.range("bn1.scale")].copy_from_slice(&dscale);
    grad[layout.range("bn1.shift")].copy_from_slice(&dshift);

    // conv1, no input gradient needed
    {
        let mut dw = vec![0.0; HIDDEN * IN_CHANNELS * 9];
        let mut db = vec![0.0; HIDDEN];
        for b in 0..bsz {
            conv3x3_backward(
                &cache.input[b * IN_CHANNELS * n..(b + 1) * IN_CHANNELS * n],
                IN_CHANNELS,
                h,
                w,
                params.slice("conv1.weight"),
                HIDDEN,
                &dact1[b * HIDDEN * n..(b + 1) * HIDDEN * n],
                &mut dw,
                &mut db,
                None,
                &mut cols,
            );
        }
        grad[layout.range("conv1.weight")].copy_from_slice(&dw);
        grad[layout.range("conv1.bias")].copy_from_slice(&db);
    }
    Ok(grad)
}

impl ForwardCache {
    /// Softmax output of sample `b`, flat `K×h×w`.
    pub fn probs(&self, b: usize) -> &[f64] {
        let len = self.params.num_classes() * self.height * self.width;
        &self.probs[b * len..(b + 1) * len]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn random_batch(b: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut s = RngStream::root(seed);
        let data = (0..b * 3 * h * w).map(|_| s.uniform(0.0, 1.0)).collect();
        Tensor::new(vec![b, 3, h, w], data).unwrap()
    }

    fn random_params(k: usize, seed: u64) -> ModelParams {
        let mut s = RngStream::root(seed);
        let mut p = ModelParams::init(k, &mut s);
        // non-trivial BN affine and biases so every path carries signal
        for name in ["bn1.scale", "bn2.scale"] {
            for v in p.slice_mut(name) {
                *v = 0.5 + s.uniform(0.0, 1.0);
            }
        }
        for name in ["bn1.shift", "bn2.shift", "conv1.bias", "conv2.bias", "conv3.bias"] {
            for v in p.slice_mut(name) {
                *v = s.uniform(-0.3, 0.3);
            }
        }
        p
    }

    #[test]
    fn outputs_are_distributions() {
        let p = random_params(5, 1);
        let mut bn = BnState::new(0.1);
        let out = forward(&p, &mut bn, &random_batch(2, 7, 9, 2), BnMode::TrainStats).unwrap();
        assert_eq!(out.maps.len(), 2);
        for m in &out.maps {
            SoftmaxMap::new(m.tensor().clone()).unwrap();
        }
    }

    #[test]
    fn zero_classifier_gives_uniform() {
        let mut p = random_params(4, 3);
        p.slice_mut("conv3.weight").fill(0.0);
        p.slice_mut("conv3.bias").fill(0.0);
        let maps = predict(&p, &BnState::new(0.1), &random_batch(1, 5, 5, 4)).unwrap();
        assert!(maps[0].tensor().data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn identical_images_identical_outputs() {
        let p = random_params(3, 5);
        let single = random_batch(1, 6, 6, 6);
        let mut data = single.data().to_vec();
        data.extend_from_slice(single.data());
        let pair = Tensor::new(vec![2, 3, 6, 6], data).unwrap();
        let mut bn = BnState::new(0.1);
        let out = forward(&p, &mut bn, &pair, BnMode::TrainStats).unwrap();
        assert_eq!(out.maps[0], out.maps[1]);
    }

    #[test]
    fn only_train_mode_changes_running_stats() {
        let p = random_params(3, 7);
        let batch = random_batch(2, 6, 6, 8);
        let mut bn = BnState::new(0.1);
        let before = bn.clone();
        forward(&p, &mut bn, &batch, BnMode::Frozen).unwrap();
        forward(&p, &mut bn, &batch, BnMode::Eval).unwrap();
        assert_eq!(bn, before);
        forward(&p, &mut bn, &batch, BnMode::TrainStats).unwrap();
        assert_ne!(bn, before);
        assert!(bn.running_var.iter().flatten().all(|&v| v > 0.0));
    }

    #[test]
    fn eval_is_pure() {
        let p = random_params(3, 9);
        let batch = random_batch(1, 6, 6, 10);
        let bn = BnState::new(0.1);
        assert_eq!(predict(&p, &bn, &batch).unwrap(), predict(&p, &bn, &batch).unwrap());
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let p = random_params(3, 11);
        let mut bn = BnState::new(0.1);
        let out = forward(&p, &mut bn, &random_batch(2, 5, 5, 12), BnMode::TrainStats).unwrap();
        let g = backward(out.cache.as_ref().unwrap(), &Tensor::zeros(vec![2, 3, 5, 5])).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_mismatched_gradient() {
        let p = random_params(3, 13);
        let mut bn = BnState::new(0.1);
        let out = forward(&p, &mut bn, &random_batch(1, 5, 5, 14), BnMode::Frozen).unwrap();
        assert!(backward(out.cache.as_ref().unwrap(), &Tensor::zeros(vec![1, 4, 5, 5])).is_err());
        let eval = forward(&p, &mut bn, &random_batch(1, 5, 5, 14), BnMode::Eval).unwrap();
        assert!(eval.cache.is_none());
    }

    #[test]
    fn non_finite_input_names_layer() {
        let p = random_params(3, 15);
        let mut data = random_batch(1, 4, 4, 16).into_data();
        data[0] = 1e308;
        data[1] = 1e308;
        let mut big = p.clone();
        for v in big.slice_mut("conv1.weight") {
            *v = 1e308;
        }
        let batch = Tensor::new(vec![1, 3, 4, 4], data).unwrap();
        let err = forward(&big, &mut BnState::new(0.1), &batch, BnMode::Frozen).unwrap_err();
        assert!(err.to_string().contains("conv1"), "{err}");
    }
}
