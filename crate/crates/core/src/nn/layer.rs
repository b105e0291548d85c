use rand::Rng;

use crate::tensor::Tensor;

/// Fully connected layer: `y = x · W + b` with `W` of shape `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// 2-d convolution over `(C, H, W)` samples with an odd square kernel and
/// symmetric zero padding. Weight layout is `(out, in, k, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    Relu,
    /// Non-overlapping average pooling with window = stride = `kernel`.
    AvgPool2d { kernel: usize },
    Flatten,
    /// Row-wise Euclidean normalization; zero rows map to zero.
    L2Norm,
    /// Nearest-neighbour spatial upsampling by an integer factor.
    Upsample { factor: usize },
    /// Reshapes flat rows into the given per-sample shape.
    Reshape { shape: Vec<usize> },
}

/// Weight bound for fan-in scaled uniform (He) initialization.
fn he_bound(fan_in: usize) -> f32 {
    (6.0 / fan_in as f32).sqrt()
}

fn uniform_tensor(shape: &[usize], bound: f32, rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..=bound);
    }
    t
}

impl Dense {
    pub fn init(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: uniform_tensor(&[inputs, outputs], he_bound(inputs), rng),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Self {
        Self { weight, bias }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl Conv2d {
    /// Padding is `kernel / 2`, so stride 1 preserves spatial extent.
    pub fn init(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: uniform_tensor(
                &[out_channels, in_channels, kernel, kernel],
                he_bound(fan_in),
                rng,
            ),
            bias: Tensor::zeros(&[out_channels]),
            stride,
            padding: kernel / 2,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    fn out_extent(&self, n: usize) -> usize {
        (n + 2 * self.padding - self.kernel()) / self.stride + 1
    }

    /// Range of output columns whose tap `k` lands inside `[0, n)`.
    fn valid_range(&self, k: usize, n: usize, out: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.padding as isize);
        let k = k as isize;
        // need 0 <= o*s + k - p < n
        let lo = (p - k).max(0);
        let lo = (lo + s - 1) / s;
        let hi = (n as isize - 1 + p - k).div_euclid(s) + 1;
        let hi = hi.clamp(0, out as isize);
        (lo.min(hi) as usize, hi as usize)
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let (b, c_in, h, w) = dims4(x);
        let (c_out, k) = (self.out_channels(), self.kernel());
        let (ho, wo) = (self.out_extent(h), self.out_extent(w));
        let mut out = Tensor::zeros(&[b, c_out, ho, wo]);
        let (xd, wd, bd) = (x.data(), self.weight.data(), self.bias.data());
        let od = out.data_mut();
        let s = self.stride;
        for n in 0..b {
            for co in 0..c_out {
                let plane = &mut od[((n * c_out) + co) * ho * wo..][..ho * wo];
                plane.fill(bd[co]);
                for ci in 0..c_in {
                    let xin = &xd[((n * c_in) + ci) * h * w..][..h * w];
                    for ky in 0..k {
                        let (oy0, oy1) = self.valid_range(ky, h, ho);
                        for kx in 0..k {
                            let wv = wd[((co * c_in + ci) * k + ky) * k + kx];
                            let (ox0, ox1) = self.valid_range(kx, w, wo);
                            for oy in oy0..oy1 {
                                let iy = oy * s + ky - self.padding;
                                let xrow = &xin[iy * w..][..w];
                                let orow = &mut plane[oy * wo..][..wo];
                                for ox in ox0..ox1 {
                                    orow[ox] += wv * xrow[ox * s + kx - self.padding];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn backward(&self, x: &Tensor, grad: &Tensor) -> (Tensor, Tensor, Tensor) {
        let (b, c_in, h, w) = dims4(x);
        let (c_out, k) = (self.out_channels(), self.kernel());
        let (ho, wo) = (grad.shape()[2], grad.shape()[3]);
        let mut gx = Tensor::zeros(x.shape());
        let mut gw = Tensor::zeros(self.weight.shape());
        let mut gb = Tensor::zeros(self.bias.shape());
        let (xd, wd, gd) = (x.data(), self.weight.data(), grad.data());
        let s = self.stride;
        for n in 0..b {
            for co in 0..c_out {
                let gplane = &gd[((n * c_out) + co) * ho * wo..][..ho * wo];
                gb.data_mut()[co] += gplane.iter().sum::<f32>();
                for ci in 0..c_in {
                    let xin = &xd[((n * c_in) + ci) * h * w..][..h * w];
                    let gxin = &mut gx.data_mut()[((n * c_in) + ci) * h * w..][..h * w];
                    for ky in 0..k {
                        let (oy0, oy1) = self.valid_range(ky, h, ho);
                        for kx in 0..k {
                            let widx = ((co * c_in + ci) * k + ky) * k + kx;
                            let wv = wd[widx];
                            let (ox0, ox1) = self.valid_range(kx, w, wo);
                            let mut acc = 0.0f32;
                            for oy in oy0..oy1 {
                                let iy = oy * s + ky - self.padding;
                                let grow = &gplane[oy * wo..][..wo];
                                let xrow = &xin[iy * w..][..w];
                                let gxrow = &mut gxin[iy * w..][..w];
                                for ox in ox0..ox1 {
                                    let ix = ox * s + kx - self.padding;
                                    acc += xrow[ix] * grow[ox];
                                    gxrow[ix] += wv * grow[ox];
                                }
                            }
                            gw.data_mut()[widx] += acc;
                        }
                    }
                }
            }
        }
        (gx, gw, gb)
    }
}

fn dims4(x: &Tensor) -> (usize, usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2], s[3])
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::Relu => "relu",
            Layer::AvgPool2d { .. } => "avgpool2d",
            Layer::Flatten => "flatten",
            Layer::L2Norm => "l2norm",
            Layer::Upsample { .. } => "upsample",
            Layer::Reshape { .. } => "reshape",
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        match self {
            Layer::Dense(d) => {
                if input != [d.inputs()] {
                    return Err(format!("dense expects [{}], got {input:?}", d.inputs()));
                }
                Ok(vec![d.outputs()])
            }
            Layer::Conv2d(c) => {
                let &[ch, h, w] = input else {
                    return Err(format!("conv2d expects (C, H, W), got {input:?}"));
                };
                if ch != c.in_channels() {
                    return Err(format!(
                        "conv2d expects {} input channels, got {ch}",
                        c.in_channels()
                    ));
                }
                if h + 2 * c.padding < c.kernel() || w + 2 * c.padding < c.kernel() {
                    return Err(format!("input {h}x{w} smaller than kernel {}", c.kernel()));
                }
                Ok(vec![c.out_channels(), c.out_extent(h), c.out_extent(w)])
            }
            Layer::Relu | Layer::L2Norm => {
                if matches!(self, Layer::L2Norm) && input.len() != 1 {
                    return Err(format!("l2norm expects flat rows, got {input:?}"));
                }
                Ok(input.to_vec())
            }
            Layer::AvgPool2d { kernel } => {
                let &[ch, h, w] = input else {
                    return Err(format!("avgpool2d expects (C, H, W), got {input:?}"));
                };
                if h < *kernel || w < *kernel {
                    return Err(format!("input {h}x{w} smaller than pool window {kernel}"));
                }
                Ok(vec![ch, h / kernel, w / kernel])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Upsample { factor } => {
                let &[ch, h, w] = input else {
                    return Err(format!("upsample expects (C, H, W), got {input:?}"));
                };
                Ok(vec![ch, h * factor, w * factor])
            }
            Layer::Reshape { shape } => {
                let n: usize = input.iter().product();
                if n != shape.iter().product::<usize>() {
                    return Err(format!("cannot reshape {input:?} into {shape:?}"));
                }
                Ok(shape.clone())
            }
        }
    }

    /// Forward pass over a batch whose sample shape has already been validated.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        match self {
            Layer::Dense(d) => {
                let (rows, nin, nout) = (x.rows(), d.inputs(), d.outputs());
                let mut out = Tensor::zeros(&[rows, nout]);
                let wd = d.weight.data();
                for r in 0..rows {
                    let xr = x.row(r);
                    let orow = out.row_mut(r);
                    orow.copy_from_slice(d.bias.data());
                    for (i, &xi) in xr.iter().enumerate().take(nin) {
                        if xi == 0.0 {
                            continue;
                        }
                        let wrow = &wd[i * nout..][..nout];
                        for (o, wv) in orow.iter_mut().zip(wrow) {
                            *o += xi * wv;
                        }
                    }
                }
                out
            }
            Layer::Conv2d(c) => c.forward(x),
            Layer::Relu => x.map(|v| v.max(0.0)),
            Layer::AvgPool2d { kernel } => {
                let (b, ch, h, w) = dims4(x);
                let k = *kernel;
                let (ho, wo) = (h / k, w / k);
                let mut out = Tensor::zeros(&[b, ch, ho, wo]);
                let scale = 1.0 / (k * k) as f32;
                let xd = x.data();
                let od = out.data_mut();
                for p in 0..b * ch {
                    let xin = &xd[p * h * w..][..h * w];
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut acc = 0.0;
                            for dy in 0..k {
                                for dx in 0..k {
                                    acc += xin[(oy * k + dy) * w + ox * k + dx];
                                }
                            }
                            od[p * ho * wo + oy * wo + ox] = acc * scale;
                        }
                    }
                }
                out
            }
            Layer::Flatten => {
                let rows = x.rows();
                let width = x.row_len();
                x.clone().reshape(&[rows, width]).expect("flatten preserves size")
            }
            Layer::L2Norm => {
                let mut out = x.clone();
                for r in 0..out.rows() {
                    let row = out.row_mut(r);
                    let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
                    if norm > 0.0 {
                        row.iter_mut().for_each(|v| *v /= norm);
                    }
                }
                out
            }
            Layer::Upsample { factor } => {
                let (b, ch, h, w) = dims4(x);
                let f = *factor;
                let (ho, wo) = (h * f, w * f);
                let mut out = Tensor::zeros(&[b, ch, ho, wo]);
                let xd = x.data();
                let od = out.data_mut();
                for p in 0..b * ch {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            od[p * ho * wo + oy * wo + ox] = xd[p * h * w + (oy / f) * w + ox / f];
                        }
                    }
                }
                out
            }
            Layer::Reshape { shape } => {
                let mut full = vec![x.rows()];
                full.extend_from_slice(shape);
                x.clone().reshape(&full).expect("reshape validated")
            }
        }
    }

    /// Returns the gradient w.r.t. the input and the parameter gradients
    /// (in `params()` order) given the cached input/output of this layer.
    pub fn backward(&self, input: &Tensor, output: &Tensor, grad: &Tensor) -> (Tensor, Vec<Tensor>) {
        match self {
            Layer::Dense(d) => {
                let (rows, nin, nout) = (input.rows(), d.inputs(), d.outputs());
                let mut gx = Tensor::zeros(input.shape());
                let mut gw = Tensor::zeros(d.weight.shape());
                let mut gb = Tensor::zeros(d.bias.shape());
                let wd = d.weight.data();
                for r in 0..rows {
                    let g = grad.row(r);
                    let xr = input.row(r);
                    for (acc, gv) in gb.data_mut().iter_mut().zip(g) {
                        *acc += gv;
                    }
                    let gxr = gx.row_mut(r);
                    for i in 0..nin {
                        let wrow = &wd[i * nout..][..nout];
                        gxr[i] = Tensor::dot(wrow, g);
                        let xi = xr[i];
                        if xi != 0.0 {
                            let gwrow = &mut gw.data_mut()[i * nout..][..nout];
                            for (a, gv) in gwrow.iter_mut().zip(g) {
                                *a += xi * gv;
                            }
                        }
                    }
                }
                (gx, vec![gw, gb])
            }
            Layer::Conv2d(c) => {
                let (gx, gw, gb) = c.backward(input, grad);
                (gx, vec![gw, gb])
            }
            Layer::Relu => {
                let mut gx = grad.clone();
                for (g, &x) in gx.data_mut().iter_mut().zip(input.data()) {
                    if x <= 0.0 {
                        *g = 0.0;
                    }
                }
                (gx, vec![])
            }
            Layer::AvgPool2d { kernel } => {
                let (b, ch, h, w) = dims4(input);
                let k = *kernel;
                let (ho, wo) = (h / k, w / k);
                let scale = 1.0 / (k * k) as f32;
                let mut gx = Tensor::zeros(input.shape());
                let gd = grad.data();
                let gxd = gx.data_mut();
                for p in 0..b * ch {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let g = gd[p * ho * wo + oy * wo + ox] * scale;
                            for dy in 0..k {
                                for dx in 0..k {
                                    gxd[p * h * w + (oy * k + dy) * w + ox * k + dx] += g;
                                }
                            }
                        }
                    }
                }
                (gx, vec![])
            }
            Layer::Flatten | Layer::Reshape { .. } => (
                grad.clone().reshape(input.shape()).expect("same element count"),
                vec![],
            ),
            Layer::L2Norm => {
                let mut gx = Tensor::zeros(input.shape());
                for r in 0..input.rows() {
                    let x = input.row(r);
                    let norm = x.iter().map(|v| v * v).sum::<f32>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let y = output.row(r);
                    let g = grad.row(r);
                    let proj = Tensor::dot(y, g);
                    for ((o, &gv), &yv) in gx.row_mut(r).iter_mut().zip(g).zip(y) {
                        *o = (gv - yv * proj) / norm;
                    }
                }
                (gx, vec![])
            }
            Layer::Upsample { factor } => {
                let (b, ch, h, w) = dims4(input);
                let f = *factor;
                let (ho, wo) = (h * f, w * f);
                let mut gx = Tensor::zeros(input.shape());
                let gd = grad.data();
                let gxd = gx.data_mut();
                for p in 0..b * ch {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            gxd[p * h * w + (oy / f) * w + ox / f] += gd[p * ho * wo + oy * wo + ox];
                        }
                    }
                }
                (gx, vec![])
            }
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            Layer::Conv2d(c) => vec![&c.weight, &c.bias],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            Layer::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
            _ => vec![],
        }
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            Layer::Dense(_) | Layer::Conv2d(_) => &["weight", "bias"],
            _ => &[],
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}
