//! The trainable network Φ = (Φ_b, Φ_d, Φ_f) and the Stage-2 detector Ψ.
//!
//! Desk-scale architecture: a shared 4-layer convolutional backbone with one
//! stride-2 downsampling (input 64×64 → output grid 32×32) and tanh
//! activations; the detector head maps features to a single confidence map,
//! the descriptor head to a per-location L2-normalized d-channel map, and the
//! optional Stage-2 head to K heatmap channels. Everything is f64 so analytic
//! gradients check against central finite differences exactly.

pub mod conv;
pub mod heatmap;
pub mod loss;
pub mod optim;

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::rng::rng_for;
use conv::{conv_backward, conv_forward, ConvGrad, ConvLayer, ConvSpec, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"KTL1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Heatmaps are plain tensors: 1×H_o×W_o for the detector, K×H_o×W_o for Ψ.
pub type Heatmap = Tensor;

const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub input_h: usize,
    pub input_w: usize,
    pub output_h: usize,
    pub output_w: usize,
    pub hidden: usize,
    pub descriptor_dim: usize,
    pub landmark_count: usize,
}

impl Dims {
    pub fn new(input: usize, hidden: usize, descriptor_dim: usize, landmark_count: usize) -> Self {
        Self {
            input_h: input,
            input_w: input,
            output_h: input / 2,
            output_w: input / 2,
            hidden,
            descriptor_dim,
            landmark_count,
        }
    }

    /// Default desk-scale dims: 64×64 in, 32×32 out, width 32, d = 32.
    pub fn default_desk(landmark_count: usize) -> Self {
        Self::new(64, 32, 32, landmark_count)
    }

    /// Tiny dims for gradient checks.
    pub fn tiny() -> Self {
        Self::new(8, 4, 4, 2)
    }

    pub fn stride(&self) -> usize {
        self.input_h / self.output_h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    Backbone,
    DetectorHead,
    DescriptorHead,
    Stage2Head,
}

pub const ALL_SECTIONS: [Section; 4] = [
    Section::Backbone,
    Section::DetectorHead,
    Section::DescriptorHead,
    Section::Stage2Head,
];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: Dims,
    pub backbone: Vec<ConvLayer>,
    pub detector_head: Vec<ConvLayer>,
    pub descriptor_head: Vec<ConvLayer>,
    pub stage2_head: Option<Vec<ConvLayer>>,
}

fn backbone_specs(dims: &Dims) -> Vec<ConvSpec> {
    let h = dims.hidden;
    vec![
        ConvSpec { in_c: 1, out_c: h, kernel: 3, stride: 2, activated: true },
        ConvSpec { in_c: h, out_c: h, kernel: 3, stride: 1, activated: true },
        ConvSpec { in_c: h, out_c: h, kernel: 3, stride: 1, activated: true },
        ConvSpec { in_c: h, out_c: h, kernel: 3, stride: 1, activated: true },
    ]
}

fn head_specs(dims: &Dims, out_c: usize) -> Vec<ConvSpec> {
    let h = dims.hidden;
    vec![
        ConvSpec { in_c: h, out_c: h, kernel: 3, stride: 1, activated: true },
        ConvSpec { in_c: h, out_c, kernel: 1, stride: 1, activated: false },
    ]
}

impl ModelParams {
    pub fn init(dims: Dims, seed: u64) -> Self {
        let mut idx = 0u64;
        let mut mk = |spec: ConvSpec| {
            let mut rng = rng_for(seed, "model_init", idx);
            idx += 1;
            ConvLayer::init(spec, &mut rng)
        };
        let backbone = backbone_specs(&dims).into_iter().map(&mut mk).collect();
        let detector_head = head_specs(&dims, 1).into_iter().map(&mut mk).collect();
        let descriptor_head = head_specs(&dims, dims.descriptor_dim)
            .into_iter()
            .map(&mut mk)
            .collect();
        Self {
            dims,
            backbone,
            detector_head,
            descriptor_head,
            stage2_head: None,
        }
    }

    /// Initializes Ψ from Φ: the Stage-2 head copies the detector head's
    /// hidden layer and draws its final K-channel layer from scratch.
    pub fn init_stage2_from_detector(&mut self, seed: u64) {
        let mut rng = rng_for(seed, "stage2_init", 0);
        let specs = head_specs(&self.dims, self.dims.landmark_count);
        let hidden = self.detector_head[0].clone();
        let last = ConvLayer::init(specs[1], &mut rng);
        self.stage2_head = Some(vec![hidden, last]);
    }

    pub fn section(&self, s: Section) -> &[ConvLayer] {
        match s {
            Section::Backbone => &self.backbone,
            Section::DetectorHead => &self.detector_head,
            Section::DescriptorHead => &self.descriptor_head,
            Section::Stage2Head => self.stage2_head.as_deref().unwrap_or(&[]),
        }
    }

    pub(crate) fn section_mut(&mut self, s: Section) -> &mut [ConvLayer] {
        match s {
            Section::Backbone => &mut self.backbone,
            Section::DetectorHead => &mut self.detector_head,
            Section::DescriptorHead => &mut self.descriptor_head,
            Section::Stage2Head => match &mut self.stage2_head {
                Some(v) => v,
                None => &mut [],
            },
        }
    }

    pub fn num_params(&self) -> usize {
        ALL_SECTIONS
            .iter()
            .flat_map(|&s| self.section(s))
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for &s in &ALL_SECTIONS {
            for layer in self.section(s) {
                out.extend_from_slice(&layer.weight);
                out.extend_from_slice(&layer.bias);
            }
        }
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for &s in &ALL_SECTIONS {
            for layer in self.section_mut(s) {
                let wl = layer.weight.len();
                layer.weight.copy_from_slice(&flat[off..off + wl]);
                off += wl;
                let bl = layer.bias.len();
                layer.bias.copy_from_slice(&flat[off..off + bl]);
                off += bl;
            }
        }
        assert_eq!(off, flat.len());
    }

    /// Rounds every parameter through f32, matching checkpoint precision so
    /// an in-memory state equals its on-disk image exactly.
    pub fn quantize_f32(&mut self) {
        for &s in &ALL_SECTIONS {
            for layer in self.section_mut(s) {
                for v in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                    *v = *v as f32 as f64;
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        ALL_SECTIONS.iter().flat_map(|&s| self.section(s)).all(|l| {
            l.weight.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite())
        })
    }
}

/// Gradient buffers mirroring `ModelParams`.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub backbone: Vec<ConvGrad>,
    pub detector_head: Vec<ConvGrad>,
    pub descriptor_head: Vec<ConvGrad>,
    pub stage2_head: Option<Vec<ConvGrad>>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let z = |ls: &[ConvLayer]| ls.iter().map(ConvGrad::zeros_like).collect::<Vec<_>>();
        Self {
            backbone: z(&params.backbone),
            detector_head: z(&params.detector_head),
            descriptor_head: z(&params.descriptor_head),
            stage2_head: params.stage2_head.as_deref().map(z),
        }
    }

    pub fn section(&self, s: Section) -> &[ConvGrad] {
        match s {
            Section::Backbone => &self.backbone,
            Section::DetectorHead => &self.detector_head,
            Section::DescriptorHead => &self.descriptor_head,
            Section::Stage2Head => self.stage2_head.as_deref().unwrap_or(&[]),
        }
    }

    pub fn section_mut(&mut self, s: Section) -> &mut [ConvGrad] {
        match s {
            Section::Backbone => &mut self.backbone,
            Section::DetectorHead => &mut self.detector_head,
            Section::DescriptorHead => &mut self.descriptor_head,
            Section::Stage2Head => match &mut self.stage2_head {
                Some(v) => v,
                None => &mut [],
            },
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        let add = |dst: &mut Vec<ConvGrad>, src: &Vec<ConvGrad>| {
            for (a, b) in dst.iter_mut().zip(src) {
                a.add_assign(b);
            }
        };
        add(&mut self.backbone, &other.backbone);
        add(&mut self.detector_head, &other.detector_head);
        add(&mut self.descriptor_head, &other.descriptor_head);
        if let (Some(a), Some(b)) = (&mut self.stage2_head, &other.stage2_head) {
            for (x, y) in a.iter_mut().zip(b) {
                x.add_assign(y);
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for &s in &ALL_SECTIONS {
            for g in self.section_mut(s) {
                g.scale(c);
            }
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for &s in &ALL_SECTIONS {
            for g in self.section(s) {
                out.extend_from_slice(&g.weight);
                out.extend_from_slice(&g.bias);
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        ALL_SECTIONS.iter().flat_map(|&s| self.section(s)).all(|g| {
            g.weight.iter().all(|v| v.is_finite()) && g.bias.iter().all(|v| v.is_finite())
        })
    }
}

/// Which outputs (and traces) a forward pass should produce.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOpts {
    pub detector: bool,
    pub descriptor: bool,
    pub stage2: bool,
}

impl ForwardOpts {
    pub fn detector_descriptor() -> Self {
        Self { detector: true, descriptor: true, stage2: false }
    }
    pub fn descriptor_only() -> Self {
        Self { detector: false, descriptor: true, stage2: false }
    }
    pub fn stage2_only() -> Self {
        Self { detector: false, descriptor: false, stage2: true }
    }
}

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    backbone_acts: Vec<Tensor>, // [input, act1, ..., actN]
    det_acts: Vec<Tensor>,
    desc_acts: Vec<Tensor>,
    stage2_acts: Vec<Tensor>,
    /// Single-channel detector confidence map.
    pub detector: Option<Heatmap>,
    /// Per-location L2-normalized dense feature map (d×H_o×W_o).
    pub features: Option<Tensor>,
    /// K-channel Stage-2 heatmaps.
    pub stage2: Option<Heatmap>,
}

fn raster_to_tensor(raster: &Raster) -> Tensor {
    Tensor {
        c: 1,
        h: raster.height(),
        w: raster.width(),
        data: raster.data().to_vec(),
    }
}

fn run_stack(layers: &[ConvLayer], input: &Tensor) -> Vec<Tensor> {
    let mut acts: Vec<Tensor> = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let src = if i == 0 { input } else { &acts[i - 1] };
        let next = conv_forward(src, layer);
        acts.push(next);
    }
    acts
}

/// Per-location L2 normalization of a d×H×W map.
fn normalize_locations(prenorm: &Tensor) -> Tensor {
    let mut out = prenorm.clone();
    let plane = prenorm.h * prenorm.w;
    for p in 0..plane {
        let mut sq = NORM_EPS;
        for c in 0..prenorm.c {
            let v = prenorm.data[c * plane + p];
            sq += v * v;
        }
        let inv = 1.0 / sq.sqrt();
        for c in 0..prenorm.c {
            out.data[c * plane + p] *= inv;
        }
    }
    out
}

/// Backward through the per-location normalization.
fn normalize_backward(prenorm: &Tensor, d_post: &Tensor) -> Tensor {
    let mut d_pre = Tensor::zeros(prenorm.c, prenorm.h, prenorm.w);
    let plane = prenorm.h * prenorm.w;
    for p in 0..plane {
        let mut sq = NORM_EPS;
        let mut dot = 0.0;
        for c in 0..prenorm.c {
            let v = prenorm.data[c * plane + p];
            sq += v * v;
            dot += v * d_post.data[c * plane + p];
        }
        let n = sq.sqrt();
        let n3 = n * n * n;
        for c in 0..prenorm.c {
            let v = prenorm.data[c * plane + p];
            d_pre.data[c * plane + p] = d_post.data[c * plane + p] / n - v * dot / n3;
        }
    }
    d_pre
}

/// Runs the network on one raster, keeping traces for `backward`.
pub fn forward_pass(
    params: &ModelParams,
    raster: &Raster,
    opts: ForwardOpts,
) -> Result<ForwardPass> {
    if raster.height() != params.dims.input_h || raster.width() != params.dims.input_w {
        return Err(Error::DimMismatch(format!(
            "raster {}x{} vs model input {}x{}",
            raster.width(),
            raster.height(),
            params.dims.input_w,
            params.dims.input_h
        )));
    }
    if opts.stage2 && params.stage2_head.is_none() {
        return Err(Error::Config("stage2 head not initialized".into()));
    }
    let input = raster_to_tensor(raster);
    let mut backbone_acts = vec![input];
    backbone_acts.extend(run_stack(&params.backbone, &backbone_acts[0]));
    let feat = backbone_acts.last().unwrap().clone();

    let (mut det_acts, mut detector) = (Vec::new(), None);
    if opts.detector {
        det_acts = run_stack(&params.detector_head, &feat);
        detector = Some(det_acts.last().unwrap().clone());
    }
    let (mut desc_acts, mut features) = (Vec::new(), None);
    if opts.descriptor {
        desc_acts = run_stack(&params.descriptor_head, &feat);
        features = Some(normalize_locations(desc_acts.last().unwrap()));
    }
    let (mut stage2_acts, mut stage2) = (Vec::new(), None);
    if opts.stage2 {
        stage2_acts = run_stack(params.stage2_head.as_ref().unwrap(), &feat);
        stage2 = Some(stage2_acts.last().unwrap().clone());
    }
    Ok(ForwardPass {
        backbone_acts,
        det_acts,
        desc_acts,
        stage2_acts,
        detector,
        features,
        stage2,
    })
}

/// Deterministic inference: single-channel confidence map plus the
/// L2-normalized dense feature map.
pub fn forward(params: &ModelParams, raster: &Raster) -> Result<(Heatmap, Tensor)> {
    let pass = forward_pass(params, raster, ForwardOpts::detector_descriptor())?;
    Ok((pass.detector.unwrap(), pass.features.unwrap()))
}

fn stack_backward(
    layers: &[ConvLayer],
    input: &Tensor,
    acts: &[Tensor],
    mut d_out: Tensor,
    grads: &mut [ConvGrad],
    need_d_input: bool,
) -> Option<Tensor> {
    for i in (0..layers.len()).rev() {
        let layer_input = if i == 0 { input } else { &acts[i - 1] };
        let d_in = conv_backward(
            layer_input,
            &layers[i],
            &acts[i],
            &mut d_out,
            &mut grads[i],
            i > 0 || need_d_input,
        );
        match d_in {
            Some(t) => d_out = t,
            None => return None,
        }
    }
    Some(d_out)
}

fn add_tensors(a: &mut Tensor, b: &Tensor) {
    for (x, y) in a.data.iter_mut().zip(&b.data) {
        *x += y;
    }
}

/// Reverse-mode pass accumulating parameter gradients into `grads`.
///
/// `d_detector`, `d_features` (w.r.t. the normalized feature map), and
/// `d_stage2` are the loss gradients for whichever outputs were produced.
pub fn backward(
    params: &ModelParams,
    pass: &ForwardPass,
    d_detector: Option<Tensor>,
    d_features: Option<Tensor>,
    d_stage2: Option<Tensor>,
    grads: &mut Gradients,
) {
    let feat = pass.backbone_acts.last().unwrap();
    let mut d_feat: Option<Tensor> = None;
    fn push(d: Option<Tensor>, acc: &mut Option<Tensor>) {
        if let Some(t) = d {
            match acc {
                Some(a) => add_tensors(a, &t),
                None => *acc = Some(t),
            }
        }
    }

    if let Some(d) = d_detector {
        let d_in = stack_backward(
            &params.detector_head,
            feat,
            &pass.det_acts,
            d,
            &mut grads.detector_head,
            true,
        );
        push(d_in, &mut d_feat);
    }
    if let Some(d) = d_features {
        let prenorm = pass.desc_acts.last().unwrap();
        let d_pre = normalize_backward(prenorm, &d);
        let d_in = stack_backward(
            &params.descriptor_head,
            feat,
            &pass.desc_acts,
            d_pre,
            &mut grads.descriptor_head,
            true,
        );
        push(d_in, &mut d_feat);
    }
    if let Some(d) = d_stage2 {
        let d_in = stack_backward(
            params.stage2_head.as_deref().unwrap(),
            feat,
            &pass.stage2_acts,
            d,
            grads.stage2_head.as_deref_mut().unwrap(),
            true,
        );
        push(d_in, &mut d_feat);
    }
    if let Some(d) = d_feat {
        stack_backward(
            &params.backbone,
            &pass.backbone_acts[0],
            &pass.backbone_acts[1..],
            d,
            &mut grads.backbone,
            false,
        );
    }
}

// ---------------------------------------------------------------------------
// Checkpoint: magic "KTL1", version, dims header, then tensors as LE f32 in
// declaration order; optimizer state and the round counter ride along.
// ---------------------------------------------------------------------------

pub struct Checkpoint {
    pub params: ModelParams,
    pub opt_state: Option<optim::RmsPropState>,
    pub round: u32,
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f32_slice(buf: &mut Vec<u8>, vals: &[f64]) {
    for &v in vals {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    off: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn u32(&mut self) -> Result<u32> {
        if self.off + 4 > self.bytes.len() {
            return Err(Error::Checkpoint(format!("{}: truncated", self.path)));
        }
        let v = u32::from_le_bytes(self.bytes[self.off..self.off + 4].try_into().unwrap());
        self.off += 4;
        Ok(v)
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        if self.off + 4 * n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("{}: truncated tensor", self.path)));
        }
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let s = self.off + 4 * i;
            out.push(f32::from_le_bytes(self.bytes[s..s + 4].try_into().unwrap()) as f64);
        }
        self.off += 4 * n;
        Ok(out)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let p = &ckpt.params;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    push_u32(&mut buf, CHECKPOINT_VERSION);
    for v in [
        p.dims.input_h,
        p.dims.input_w,
        p.dims.output_h,
        p.dims.output_w,
        p.dims.hidden,
        p.dims.descriptor_dim,
        p.dims.landmark_count,
    ] {
        push_u32(&mut buf, v as u32);
    }
    push_u32(&mut buf, ckpt.round);
    push_u32(&mut buf, u32::from(p.stage2_head.is_some()));
    push_u32(&mut buf, u32::from(ckpt.opt_state.is_some()));
    for &s in &ALL_SECTIONS {
        for layer in p.section(s) {
            push_f32_slice(&mut buf, &layer.weight);
            push_f32_slice(&mut buf, &layer.bias);
        }
    }
    if let Some(state) = &ckpt.opt_state {
        for &s in &ALL_SECTIONS {
            for pair in state.section(s) {
                push_f32_slice(&mut buf, &pair.weight);
                push_f32_slice(&mut buf, &pair.bias);
            }
        }
    }
    let mut f =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 8 || &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let mut r = Reader {
        bytes: &bytes,
        off: 4,
        path: path.display().to_string(),
    };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let dims = Dims {
        input_h: r.u32()? as usize,
        input_w: r.u32()? as usize,
        output_h: r.u32()? as usize,
        output_w: r.u32()? as usize,
        hidden: r.u32()? as usize,
        descriptor_dim: r.u32()? as usize,
        landmark_count: r.u32()? as usize,
    };
    let round = r.u32()?;
    let has_stage2 = r.u32()? != 0;
    let has_opt = r.u32()? != 0;

    let mut params = ModelParams::init(dims, 0);
    if has_stage2 {
        params.init_stage2_from_detector(0);
    }
    for &s in &ALL_SECTIONS {
        let n = params.section(s).len();
        for i in 0..n {
            let (wl, bl) = {
                let layer = &params.section(s)[i];
                (layer.weight.len(), layer.bias.len())
            };
            let w = r.f32_vec(wl)?;
            let b = r.f32_vec(bl)?;
            let layer = &mut params.section_mut(s)[i];
            layer.weight = w;
            layer.bias = b;
        }
    }
    let opt_state = if has_opt {
        let mut state = optim::RmsPropState::zeros_like(&params);
        for &s in &ALL_SECTIONS {
            let n = state.section(s).len();
            for i in 0..n {
                let (wl, bl) = {
                    let g = &state.section(s)[i];
                    (g.weight.len(), g.bias.len())
                };
                let w = r.f32_vec(wl)?;
                let b = r.f32_vec(bl)?;
                let g = &mut state.section_mut(s)[i];
                g.weight = w;
                g.bias = b;
            }
        }
        Some(state)
    } else {
        None
    };
    if r.off != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - r.off
        )));
    }
    Ok(Checkpoint {
        params,
        opt_state,
        round,
    })
}
