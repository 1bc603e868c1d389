//! One-dimensional ConvNeXt v2 signal tower.
//!
//! Activations are kept channels-last (`[B, T, C]`) so that pointwise layers
//! are plain matrix products. The depthwise convolution is a sum of shifted
//! slices and the stride-2 downsampling is a reshape followed by a linear
//! map, which keeps every op differentiable with the tensor backend.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::data_model::EcgRecord;
use crate::error::{Error, Result};
use crate::nn::{gelu, l2_normalize, softmax_last, Init, LayerNorm, Linear, NORM_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Tiny,
    Base,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvNeXt1DConfig {
    pub in_leads: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub depths: [usize; 4],
    pub widths: [usize; 4],
    pub dw_kernel: usize,
    pub mlp_ratio: f64,
    pub embed_dim: usize,
    pub variant: Variant,
}

impl ConvNeXt1DConfig {
    pub fn tiny() -> Self {
        Self {
            in_leads: 12,
            stem_kernel: 4,
            stem_stride: 4,
            depths: [3, 3, 9, 3],
            widths: [96, 192, 384, 768],
            dw_kernel: 7,
            mlp_ratio: 4.0,
            embed_dim: 256,
            variant: Variant::Tiny,
        }
    }

    pub fn base() -> Self {
        Self {
            depths: [3, 3, 27, 3],
            widths: [128, 256, 512, 1024],
            variant: Variant::Base,
            ..Self::tiny()
        }
    }

    /// Desk-scale tiny-style tower for CPU experiments.
    pub fn micro() -> Self {
        Self {
            depths: [1, 1, 1, 1],
            widths: [16, 32, 64, 128],
            embed_dim: 64,
            ..Self::tiny()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.in_leads == 0 || self.stem_kernel == 0 || self.stem_stride == 0 || self.embed_dim == 0 {
            return bad("signal encoder sizes must be positive".into());
        }
        if self.depths.contains(&0) || self.widths.contains(&0) {
            return bad(format!("depths {:?} and widths {:?} must be positive", self.depths, self.widths));
        }
        if self.dw_kernel % 2 == 0 {
            return bad(format!("dw_kernel must be odd, got {}", self.dw_kernel));
        }
        if !(self.mlp_ratio > 0.0) || self.hidden(self.widths[0]) == 0 {
            return bad(format!("mlp_ratio must be positive, got {}", self.mlp_ratio));
        }
        Ok(())
    }

    pub fn hidden(&self, width: usize) -> usize {
        (width as f64 * self.mlp_ratio).round() as usize
    }

    pub fn min_samples(&self) -> usize {
        (self.stem_stride * 8).max(self.stem_kernel)
    }

    /// Token count after the stem and the three stride-2 transitions.
    pub fn token_len(&self, n_samples: usize) -> usize {
        if n_samples < self.stem_kernel {
            return 0;
        }
        let mut t = (n_samples - self.stem_kernel) / self.stem_stride + 1;
        for _ in 0..3 {
            t /= 2;
        }
        t
    }

    pub fn out_width(&self) -> usize {
        self.widths[3]
    }

    pub fn scaled(&self, factor: usize) -> Self {
        Self {
            widths: self.widths.map(|w| w * factor),
            ..self.clone()
        }
    }
}

/// Exact trainable parameter count of the signal tower.
pub fn count_params(c: &ConvNeXt1DConfig) -> usize {
    let ln = |w: usize| 2 * w;
    let mut n = c.in_leads * c.widths[0] * c.stem_kernel + c.widths[0] + ln(c.widths[0]);
    for stage in 0..4 {
        let w = c.widths[stage];
        if stage > 0 {
            let prev = c.widths[stage - 1];
            n += ln(prev) + prev * w * 2 + w;
        }
        let h = c.hidden(w);
        let block = w * c.dw_kernel + w + ln(w) + w * h + h + 2 * h + h * w + w;
        n += c.depths[stage] * block;
    }
    let w = c.out_width();
    n + ln(w) + w + 2 * w * w + c.embed_dim * w
}

#[derive(Clone, Debug)]
pub struct SignalEncoding {
    /// `[B, T', width_4]`
    pub tokens: Tensor,
    /// `[B, d]`, unit-norm rows.
    pub pooled: Tensor,
}

#[derive(Clone, Debug)]
struct Grn {
    gamma: Tensor,
    beta: Tensor,
}

impl Grn {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let gx = (x.sqr()?.sum_keepdim(1)? + NORM_EPS)?.sqrt()?;
        let nx = gx.broadcast_div(&(gx.mean_keepdim(D::Minus1)? + NORM_EPS)?)?;
        let y = x.broadcast_mul(&nx)?.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?;
        Ok((y + x)?)
    }
}

#[derive(Clone, Debug)]
struct Block {
    dw_weight: Tensor,
    dw_bias: Tensor,
    norm: LayerNorm,
    fc1: Linear,
    grn: Grn,
    fc2: Linear,
}

impl Block {
    fn new(init: &mut Init, width: usize, hidden: usize, kernel: usize) -> Result<Self> {
        let mut dw = init.push("dw");
        let dw_weight = dw.weight("weight", &[width, kernel])?;
        let dw_bias = dw.zeros("bias", &[width])?;
        let norm = LayerNorm::new(init, "norm", width)?;
        let fc1 = Linear::new(init, "fc1", width, hidden, true)?;
        let mut g = init.push("grn");
        let grn = Grn {
            gamma: g.zeros("gamma", &[hidden])?,
            beta: g.zeros("beta", &[hidden])?,
        };
        let fc2 = Linear::new(init, "fc2", hidden, width, true)?;
        Ok(Self {
            dw_weight,
            dw_bias,
            norm,
            fc1,
            grn,
            fc2,
        })
    }

    fn depthwise(&self, x: &Tensor) -> Result<Tensor> {
        let (_, t, _) = x.dims3()?;
        let k = self.dw_weight.dim(1)?;
        let pad = k / 2;
        let xp = x.pad_with_zeros(1, pad, pad)?;
        let wt = self.dw_weight.t()?.contiguous()?;
        let mut acc = xp.narrow(1, 0, t)?.broadcast_mul(&wt.get(0)?)?;
        for j in 1..k {
            acc = (acc + xp.narrow(1, j, t)?.broadcast_mul(&wt.get(j)?)?)?;
        }
        Ok(acc.broadcast_add(&self.dw_bias)?)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm.forward(&self.depthwise(x)?)?;
        let h = gelu(&self.fc1.forward(&h)?)?;
        let h = self.fc2.forward(&self.grn.forward(&h)?)?;
        Ok((x + h)?)
    }
}

/// LayerNorm then a kernel-2, stride-2 convolution.
#[derive(Clone, Debug)]
struct Downsample {
    norm: LayerNorm,
    weight: Tensor,
    bias: Tensor,
}

impl Downsample {
    fn new(init: &mut Init, in_w: usize, out_w: usize) -> Result<Self> {
        let norm = LayerNorm::new(init, "norm", in_w)?;
        let mut c = init.push("conv");
        Ok(Self {
            norm,
            weight: c.weight("weight", &[out_w, in_w, 2])?,
            bias: c.zeros("bias", &[out_w])?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.norm.forward(x)?;
        let (b, t, c) = x.dims3()?;
        let t2 = t / 2;
        let x = x.narrow(1, 0, t2 * 2)?.reshape((b * t2, 2 * c))?;
        let out_w = self.weight.dim(0)?;
        let w = self.weight.permute((0, 2, 1))?.reshape((out_w, 2 * c))?;
        let y = x.matmul(&w.t()?)?.broadcast_add(&self.bias)?;
        Ok(y.reshape((b, t2, out_w))?)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    down: Option<Downsample>,
    blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
pub struct SignalEncoder {
    config: ConvNeXt1DConfig,
    stem_weight: Tensor,
    stem_bias: Tensor,
    stem_norm: LayerNorm,
    stages: Vec<Stage>,
    final_norm: LayerNorm,
    pool_query: Tensor,
    pool_key: Linear,
    pool_value: Linear,
    proj: Linear,
}

impl SignalEncoder {
    pub fn new(config: &ConvNeXt1DConfig, init: &mut Init) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut stem = init.push("stem");
        let stem_weight = stem.weight("weight", &[c.widths[0], c.in_leads, c.stem_kernel])?;
        let stem_bias = stem.zeros("bias", &[c.widths[0]])?;
        let stem_norm = LayerNorm::new(init, "stem_norm", c.widths[0])?;
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let mut si = init.push(&format!("stages.{s}"));
            let down = if s > 0 {
                Some(Downsample::new(&mut si.push("down"), c.widths[s - 1], c.widths[s])?)
            } else {
                None
            };
            let blocks = (0..c.depths[s])
                .map(|b| Block::new(&mut si.push(&format!("blocks.{b}")), c.widths[s], c.hidden(c.widths[s]), c.dw_kernel))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { down, blocks });
        }
        let w = c.out_width();
        let final_norm = LayerNorm::new(init, "final_norm", w)?;
        let mut pool = init.push("pool");
        let pool_query = pool.weight("query", &[w])?;
        let pool_key = Linear::new(&mut pool, "key", w, w, false)?;
        let pool_value = Linear::new(&mut pool, "value", w, w, false)?;
        let proj = Linear::new(init, "proj", w, c.embed_dim, false)?;
        Ok(Self {
            config: c.clone(),
            stem_weight,
            stem_bias,
            stem_norm,
            stages,
            final_norm,
            pool_query,
            pool_key,
            pool_value,
            proj,
        })
    }

    pub fn config(&self) -> &ConvNeXt1DConfig {
        &self.config
    }

    fn stem(&self, x: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let (b, leads, t) = x.dims3()?;
        let w0 = c.widths[0];
        let y = if c.stem_kernel == c.stem_stride {
            let tp = t / c.stem_stride;
            let patches = x
                .narrow(2, 0, tp * c.stem_stride)?
                .reshape((b, leads, tp, c.stem_stride))?
                .permute((0, 2, 1, 3))?
                .reshape((b * tp, leads * c.stem_stride))?;
            let w = self.stem_weight.reshape((w0, leads * c.stem_kernel))?;
            patches.matmul(&w.t()?)?.reshape((b, tp, w0))?
        } else {
            x.conv1d(&self.stem_weight, 0, c.stem_stride, 1, 1)?.transpose(1, 2)?.contiguous()?
        };
        Ok(y.broadcast_add(&self.stem_bias)?)
    }

    /// Final token sequence before pooling, `[B, T', width_4]`.
    pub fn tokens(&self, batch: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let (_, leads, n) = batch
            .dims3()
            .map_err(|_| Error::Shape(format!("expected [B, leads, samples], got {:?}", batch.dims())))?;
        if leads != c.in_leads {
            return Err(Error::Shape(format!("expected {} leads, got {leads}", c.in_leads)));
        }
        if n < c.min_samples() {
            return Err(Error::Shape(format!("need at least {} samples, got {n}", c.min_samples())));
        }
        if !crate::nn::scalar(&batch.abs()?.sum_all()?)?.is_finite() {
            return Err(Error::Numeric("non-finite values in signal batch".into()));
        }
        let mut x = self.stem_norm.forward(&self.stem(batch)?)?;
        for stage in &self.stages {
            if let Some(d) = &stage.down {
                x = d.forward(&x)?;
            }
            for block in &stage.blocks {
                x = block.forward(&x)?;
            }
        }
        self.final_norm.forward(&x)
    }

    /// Single-query attention pooling, projection and L2 normalization.
    pub fn pool(&self, tokens: &Tensor) -> Result<Tensor> {
        let w = self.config.out_width();
        let keys = self.pool_key.forward(tokens)?;
        let scores = keys.broadcast_mul(&self.pool_query)?.sum(D::Minus1)? / (w as f64).sqrt();
        let attn = softmax_last(&scores?)?.unsqueeze(2)?;
        let values = self.pool_value.forward(tokens)?;
        let pooled = values.broadcast_mul(&attn)?.sum(1)?;
        l2_normalize(&self.proj.forward(&pooled)?)
    }

    pub fn encode(&self, batch: &Tensor) -> Result<SignalEncoding> {
        let tokens = self.tokens(batch)?;
        let pooled = self.pool(&tokens)?;
        Ok(SignalEncoding { tokens, pooled })
    }
}

/// Stacks records into a `[B, leads, samples]` tensor.
pub fn records_to_tensor(records: &[&EcgRecord], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = records
        .first()
        .ok_or_else(|| Error::Argument("empty record batch".into()))?;
    let (leads, n) = (first.signal.n_leads(), first.signal.n_samples());
    let mut data = Vec::with_capacity(records.len() * leads * n);
    for r in records {
        if r.signal.n_leads() != leads || r.signal.n_samples() != n {
            return Err(Error::Shape(format!(
                "record {} is {}x{}, batch expects {leads}x{n}",
                r.record_id, r.signal.n_leads(), r.signal.n_samples()
            )));
        }
        data.extend_from_slice(r.signal.as_slice());
    }
    Ok(Tensor::from_vec(data, (records.len(), leads, n), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_rng, ParamGroup, ParamStore};

    fn tower(config: &ConvNeXt1DConfig, dtype: DType) -> (ParamStore, SignalEncoder) {
        let mut store = ParamStore::new(dtype, Device::Cpu);
        let mut rng = init_rng(7);
        let enc = SignalEncoder::new(config, &mut Init::new(&mut store, &mut rng, ParamGroup::Signal)).unwrap();
        (store, enc)
    }

    fn random_batch(b: usize, leads: usize, n: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = init_rng(seed);
        let v: Vec<f32> = (0..b * leads * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, (b, leads, n), &Device::Cpu).unwrap()
    }

    #[test]
    fn token_length_follows_floor_chain() {
        let c = ConvNeXt1DConfig::tiny();
        let mut t = 5000 / 4;
        for _ in 0..3 {
            t /= 2;
        }
        assert_eq!(t, 156);
        assert_eq!(c.token_len(5000), t);
        let (_, enc) = tower(&ConvNeXt1DConfig::micro(), DType::F32);
        let out = enc.encode(&random_batch(2, 12, 5000, 0)).unwrap();
        assert_eq!(out.tokens.dims(), &[2, 156, 128]);
    }

    #[test]
    fn store_size_matches_count_params() {
        for c in [ConvNeXt1DConfig::micro(), ConvNeXt1DConfig::micro().scaled(2)] {
            let (store, _) = tower(&c, DType::F32);
            assert_eq!(store.num_params(), count_params(&c));
        }
        let mut c = ConvNeXt1DConfig::micro();
        c.stem_kernel = 7;
        c.stem_stride = 3;
        let (store, _) = tower(&c, DType::F32);
        assert_eq!(store.num_params(), count_params(&c));
    }

    #[test]
    fn pooled_rows_are_unit_norm_and_batch_independent() {
        let (_, enc) = tower(&ConvNeXt1DConfig::micro(), DType::F32);
        let batch = random_batch(8, 12, 500, 3);
        let all = enc.encode(&batch).unwrap().pooled.to_vec2::<f32>().unwrap();
        for row in &all {
            let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
        let alone = enc.encode(&batch.narrow(0, 5, 1).unwrap()).unwrap().pooled.to_vec2::<f32>().unwrap();
        for (a, b) in alone[0].iter().zip(&all[5]) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn wrong_lead_count_is_shape_error() {
        let (_, enc) = tower(&ConvNeXt1DConfig::micro(), DType::F32);
        assert!(matches!(enc.encode(&random_batch(1, 8, 500, 0)), Err(Error::Shape(_))));
        assert!(matches!(enc.encode(&random_batch(1, 12, 16, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_stem_matches_patchify_stem() {
        let (_, enc) = tower(&ConvNeXt1DConfig::micro(), DType::F64);
        let x = random_batch(2, 12, 64, 1).to_dtype(DType::F64).unwrap();
        let patch = enc.stem(&x).unwrap();
        let conv = x
            .conv1d(&enc.stem_weight, 0, 4, 1, 1)
            .unwrap()
            .transpose(1, 2)
            .unwrap()
            .broadcast_add(&enc.stem_bias)
            .unwrap();
        let d = (patch - conv).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-12);
    }

    #[test]
    fn depthwise_matches_direct_convolution() {
        let (_, enc) = tower(&ConvNeXt1DConfig::micro(), DType::F64);
        let block = &enc.stages[0].blocks[0];
        let x = random_batch(1, 10, 16, 2).to_dtype(DType::F64).unwrap();
        let y = block.depthwise(&x).unwrap().to_vec3::<f64>().unwrap();
        let xv = x.to_vec3::<f64>().unwrap();
        let w = block.dw_weight.to_vec2::<f64>().unwrap();
        for t in 0..10 {
            for c in 0..16 {
                let mut acc = 0.0;
                for j in 0..7 {
                    let src = t as isize + j as isize - 3;
                    if (0..10).contains(&src) {
                        acc += xv[0][src as usize][c] * w[c][j];
                    }
                }
                assert!((acc - y[0][t][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_seed_same_outputs() {
        let (_, a) = tower(&ConvNeXt1DConfig::micro(), DType::F32);
        let (_, b) = tower(&ConvNeXt1DConfig::micro(), DType::F32);
        let x = random_batch(2, 12, 500, 9);
        let pa = a.encode(&x).unwrap().pooled.to_vec2::<f32>().unwrap();
        let pb = b.encode(&x).unwrap().pooled.to_vec2::<f32>().unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn doubling_widths_roughly_quadruples_params() {
        let c = ConvNeXt1DConfig::tiny();
        let ratio = count_params(&c.scaled(2)) as f64 / count_params(&c) as f64;
        assert!(ratio > 3.5 && ratio < 4.5, "{ratio}");
    }
}
