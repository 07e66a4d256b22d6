//! Five-stage residual backbone with a declarative freeze policy.
//!
//! The structure mirrors the 50-layer residual family: a 7x7 stem at
//! stride 2 (block1), a valid 3x3 max pool, then four bottleneck stages
//! (block2..block5) with [3, 4, 6, 3] sub-blocks and a two-way
//! global-average-pool head. `width_scale` shrinks every channel count for
//! desk-scale runs; only the full-width configuration corresponds to the
//! published model.
//!
//! Freezing is exact: a frozen sub-block receives no parameter updates and
//! its batch-norm statistics stay in inference mode, so a checkpoint diff
//! over frozen units is bitwise zero. The backward pass stops below the
//! earliest trainable unit, which is what makes the restricted fine-tuning
//! regimes cheap.

use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, ArrayView4, ArrayViewD, ArrayViewMutD, Axis};
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::ExpertKind;
use crate::ingestion::ImageTensor;
use crate::nn::{
    softmax_rows, BatchNorm2d, Conv2d, GlobalAvgPool, Linear, MaxPool2d, Relu, Scalar,
};

pub const STAGE_BLOCKS: [usize; 5] = [1, 3, 4, 6, 3];
const STAGE_BASE_WIDTHS: [usize; 4] = [64, 128, 256, 512];
const EXPANSION: usize = 4;
const STEM_WIDTH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub input_size: usize,
    /// Sub-block counts per stage, stem first: `[1, 3, 4, 6, 3]`.
    pub stage_blocks: [usize; 5],
    /// Channel multiplier in (0, 1]; 1.0 is the full published model.
    pub width_scale: f64,
    pub pretrained: bool,
    pub num_outputs: usize,
    /// Seed for the randomly initialized parameters (always the head; the
    /// whole body too when `pretrained` is false).
    pub init_seed: u64,
    /// Weight container to load when `pretrained` is true.
    pub pretrained_weights: Option<PathBuf>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_size: 224,
            stage_blocks: STAGE_BLOCKS,
            width_scale: 1.0,
            pretrained: false,
            num_outputs: 2,
            init_seed: 0,
            pretrained_weights: None,
        }
    }
}

impl BackboneConfig {
    /// Desk-scale constructor: random init at a reduced width.
    pub fn desk(width_scale: f64, init_seed: u64) -> Self {
        BackboneConfig {
            width_scale,
            init_seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        if !(self.width_scale > 0.0 && self.width_scale <= 1.0) {
            return Err(BackboneError::InvalidConfig(format!(
                "width_scale must be in (0, 1], got {}",
                self.width_scale
            )));
        }
        if self.width_scale < 1.0 && self.pretrained {
            return Err(BackboneError::InvalidConfig(
                "width_scale < 1.0 cannot load full-width pretrained weights".into(),
            ));
        }
        if self.pretrained && self.stage_blocks != STAGE_BLOCKS {
            return Err(BackboneError::InvalidConfig(format!(
                "pretrained weights require stage_blocks {STAGE_BLOCKS:?}, got {:?}",
                self.stage_blocks
            )));
        }
        if self.stage_blocks[0] != 1 {
            return Err(BackboneError::InvalidConfig(
                "stage_blocks[0] is the stem and must be 1".into(),
            ));
        }
        if self.stage_blocks[1..].iter().any(|&b| b == 0 || b > 6) {
            return Err(BackboneError::InvalidConfig(
                "per-stage sub-block counts must be in 1..=6".into(),
            ));
        }
        if self.input_size < 32 {
            return Err(BackboneError::InvalidConfig(format!(
                "input_size must be >= 32, got {}",
                self.input_size
            )));
        }
        if self.num_outputs != 2 {
            return Err(BackboneError::InvalidConfig(
                "the expert head is strictly two-way".into(),
            ));
        }
        Ok(())
    }

    fn scaled(&self, full: usize) -> usize {
        ((full as f64 * self.width_scale).ceil() as usize).max(1)
    }

    fn stem_width(&self) -> usize {
        self.scaled(STEM_WIDTH)
    }

    fn stage_width(&self, stage: usize) -> usize {
        self.scaled(STAGE_BASE_WIDTHS[stage - 2])
    }

    /// All valid freeze-policy unit names for this configuration.
    pub fn unit_names(&self) -> Vec<String> {
        let mut names = vec!["block1".to_string()];
        for stage in 2..=5usize {
            names.push(format!("block{stage}"));
            for b in 0..self.stage_blocks[stage - 1] {
                names.push(format!("block{stage}{}", sub_block_letter(b)));
            }
        }
        names.push("head".to_string());
        names
    }
}

fn sub_block_letter(i: usize) -> char {
    (b'a' + i as u8) as char
}

/// Declared per-stage spatial sizes for the configured input: the stem
/// convolution halves, the valid max pool takes stage 2 to 55 (for 224),
/// and each later stage halves again down to 7.
pub fn feature_shapes(config: &BackboneConfig) -> Vec<(usize, usize)> {
    let s1 = crate::nn::out_size(config.input_size, 7, 2, 3);
    let pooled = crate::nn::out_size(s1, 3, 2, 0);
    let mut shapes = vec![(1, s1), (2, pooled)];
    let mut cur = pooled;
    for stage in 3..=5 {
        cur = crate::nn::out_size(cur, 3, 2, 1);
        shapes.push((stage, cur));
    }
    shapes
}

/// Which units receive gradient updates. The classification head is new
/// and therefore always trainable; every other unit defaults to frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub trainable_units: BTreeSet<String>,
}

impl FreezePolicy {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(units: I) -> Self {
        FreezePolicy {
            trainable_units: units.into_iter().map(Into::into).collect(),
        }
    }

    /// The standard fine-tuning regime: stages 3 and 5 plus the head.
    pub fn standard() -> Self {
        Self::new(["block3", "block5", "head"])
    }

    /// The small-dataset regime: only the last sub-block of stage 5.
    pub fn small_data() -> Self {
        Self::new(["block5c", "head"])
    }

    /// Everything trainable (gradient-check and full fine-tune runs).
    pub fn all(config: &BackboneConfig) -> Self {
        Self::new(config.unit_names())
    }

    pub fn validate(&self, config: &BackboneConfig) -> Result<(), BackboneError> {
        if !self.trainable_units.contains("head") {
            return Err(BackboneError::HeadMustBeTrainable);
        }
        let known: BTreeSet<String> = config.unit_names().into_iter().collect();
        for unit in &self.trainable_units {
            if !known.contains(unit) {
                return Err(BackboneError::UnknownUnit(unit.clone()));
            }
        }
        Ok(())
    }

    fn block_trainable(&self, stage: usize, block: usize) -> bool {
        self.trainable_units.contains(&format!("block{stage}"))
            || self
                .trainable_units
                .contains(&format!("block{stage}{}", sub_block_letter(block)))
    }

    fn stem_trainable(&self) -> bool {
        self.trainable_units.contains("block1")
    }
}

impl Default for FreezePolicy {
    fn default() -> Self {
        Self::standard()
    }
}

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("invalid backbone config: {0}")]
    InvalidConfig(String),
    #[error("freeze policy must keep \"head\" trainable")]
    HeadMustBeTrainable,
    #[error("unknown unit {0:?}")]
    UnknownUnit(String),
    #[error("pretrained weights unavailable: {0}")]
    PretrainedUnavailable(String),
    #[error("input batch shape mismatch: expected {expected}x{expected}x3, sample {index} (id {id:?}) is {got_h}x{got_w}x{got_c}")]
    ShapeMismatch {
        expected: usize,
        index: usize,
        id: String,
        got_h: usize,
        got_w: usize,
        got_c: usize,
    },
    #[error("parameter load failure: {0}")]
    ParamLoad(String),
}

struct Stem<F> {
    conv: Conv2d<F>,
    bn: BatchNorm2d<F>,
    relu: Relu,
    pool: MaxPool2d,
    trainable: bool,
}

struct Bottleneck<F> {
    conv1: Conv2d<F>,
    bn1: BatchNorm2d<F>,
    relu1: Relu,
    conv2: Conv2d<F>,
    bn2: BatchNorm2d<F>,
    relu2: Relu,
    conv3: Conv2d<F>,
    bn3: BatchNorm2d<F>,
    down: Option<(Conv2d<F>, BatchNorm2d<F>)>,
    relu_out: Relu,
    trainable: bool,
}

struct Head<F> {
    gap: GlobalAvgPool,
    fc: Linear<F>,
}

pub(crate) struct Backbone<F> {
    stem: Stem<F>,
    stages: Vec<Vec<Bottleneck<F>>>,
    head: Head<F>,
    /// Entity index (0 = stem, 1.. = blocks in forward order) of the first
    /// trainable unit; the backward pass stops there.
    first_trainable: usize,
}

struct Builder {
    rng: ChaCha8Rng,
}

impl Builder {
    fn conv<F: Scalar>(
        &mut self,
        name: String,
        c_out: usize,
        c_in: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Conv2d<F> {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let weight =
            Array4::from_shape_simple_fn((c_out, c_in, k, k), || F::from_f64(normal.sample(&mut self.rng)));
        Conv2d::new(name, weight, stride, pad)
    }

    fn linear<F: Scalar>(&mut self, name: String, out: usize, input: usize) -> Linear<F> {
        let std = 1.0 / (input as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let weight = Array2::from_shape_simple_fn((out, input), || F::from_f64(normal.sample(&mut self.rng)));
        Linear::new(name, weight, Array1::zeros(out))
    }
}

impl<F: Scalar> Bottleneck<F> {
    fn build(
        builder: &mut Builder,
        name: String,
        c_in: usize,
        width: usize,
        stride: usize,
    ) -> Self {
        let c_out = width * EXPANSION;
        let down = (stride != 1 || c_in != c_out).then(|| {
            (
                builder.conv(format!("{name}.down.conv"), c_out, c_in, 1, stride, 0),
                BatchNorm2d::new(format!("{name}.down.bn"), c_out),
            )
        });
        Bottleneck {
            conv1: builder.conv(format!("{name}.conv1"), width, c_in, 1, 1, 0),
            bn1: BatchNorm2d::new(format!("{name}.bn1"), width),
            relu1: Relu::new(),
            conv2: builder.conv(format!("{name}.conv2"), width, width, 3, stride, 1),
            bn2: BatchNorm2d::new(format!("{name}.bn2"), width),
            relu2: Relu::new(),
            conv3: builder.conv(format!("{name}.conv3"), c_out, width, 1, 1, 0),
            bn3: BatchNorm2d::new(format!("{name}.bn3"), c_out),
            down,
            relu_out: Relu::new(),
            trainable: true,
        }
    }

    fn set_trainable(&mut self, t: bool) {
        self.trainable = t;
        self.conv1.trainable = t;
        self.bn1.trainable = t;
        self.conv2.trainable = t;
        self.bn2.trainable = t;
        self.conv3.trainable = t;
        self.bn3.trainable = t;
        if let Some((conv, bn)) = self.down.as_mut() {
            conv.trainable = t;
            bn.trainable = t;
        }
    }

    fn forward(&self, x: &ArrayView4<F>) -> Array4<F> {
        let mut main = self.conv1.forward(x);
        main = self.bn1.forward(&main.view());
        main = self.relu1.forward(&main.view());
        main = self.conv2.forward(&main.view());
        main = self.bn2.forward(&main.view());
        main = self.relu2.forward(&main.view());
        main = self.conv3.forward(&main.view());
        main = self.bn3.forward(&main.view());
        match &self.down {
            Some((conv, bn)) => {
                let short = bn.forward(&conv.forward(x).view());
                main += &short;
            }
            None => main += x,
        }
        self.relu_out.forward(&main.view())
    }

    /// Training forward; when `cache` is false this is the pure inference
    /// path (only reachable for frozen blocks below the backward cutoff).
    fn forward_train(&mut self, x: &ArrayView4<F>, cache: bool) -> Array4<F> {
        if !cache {
            return self.forward(x);
        }
        let mut main = self.conv1.forward_train(x);
        main = self.bn1.forward_train(&main.view());
        main = self.relu1.forward_train(&main.view());
        main = self.conv2.forward_train(&main.view());
        main = self.bn2.forward_train(&main.view());
        main = self.relu2.forward_train(&main.view());
        main = self.conv3.forward_train(&main.view());
        main = self.bn3.forward_train(&main.view());
        match self.down.as_mut() {
            Some((conv, bn)) => {
                let short = bn.forward_train(&conv.forward_train(x).view());
                main += &short;
            }
            None => main += x,
        }
        self.relu_out.forward_train(&main.view())
    }

    fn backward(&mut self, dy: &ArrayView4<F>, need_dx: bool) -> Option<Array4<F>> {
        let mut d = dy.to_owned();
        self.relu_out.backward(&mut d);

        let mut dm = self.bn3.backward(&d.view());
        dm = self.conv3.backward(&dm.view(), true).expect("inner dx");
        self.relu2.backward(&mut dm);
        dm = self.bn2.backward(&dm.view());
        dm = self.conv2.backward(&dm.view(), true).expect("inner dx");
        self.relu1.backward(&mut dm);
        dm = self.bn1.backward(&dm.view());
        let d_main = self.conv1.backward(&dm.view(), need_dx);

        if !need_dx {
            if let Some((conv, bn)) = self.down.as_mut() {
                let ds = bn.backward(&d.view());
                conv.backward(&ds.view(), false);
            }
            return None;
        }
        let mut dx = d_main.expect("dx requested");
        match self.down.as_mut() {
            Some((conv, bn)) => {
                let ds = bn.backward(&d.view());
                let ds = conv.backward(&ds.view(), true).expect("dx requested");
                dx += &ds;
            }
            None => dx += &d,
        }
        Some(dx)
    }
}

impl<F: Scalar> Backbone<F> {
    fn build(config: &BackboneConfig) -> Self {
        let mut builder = Builder {
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
        };
        let stem_width = config.stem_width();
        let stem = Stem {
            conv: builder.conv("block1.conv".into(), stem_width, 3, 7, 2, 3),
            bn: BatchNorm2d::new("block1.bn".into(), stem_width),
            relu: Relu::new(),
            pool: MaxPool2d::new(3, 2),
            trainable: true,
        };

        let mut stages = Vec::new();
        let mut c_in = stem_width;
        for stage in 2..=5usize {
            let width = config.stage_width(stage);
            let stride = if stage == 2 { 1 } else { 2 };
            let mut blocks = Vec::new();
            for b in 0..config.stage_blocks[stage - 1] {
                let name = format!("block{stage}{}", sub_block_letter(b));
                let s = if b == 0 { stride } else { 1 };
                blocks.push(Bottleneck::build(&mut builder, name, c_in, width, s));
                c_in = width * EXPANSION;
            }
            stages.push(blocks);
        }

        let head = Head {
            gap: GlobalAvgPool::new(),
            fc: builder.linear("head.fc".into(), config.num_outputs, c_in),
        };

        Backbone {
            stem,
            stages,
            head,
            first_trainable: 0,
        }
    }

    fn entity_count(&self) -> usize {
        1 + self.stages.iter().map(Vec::len).sum::<usize>()
    }

    fn apply_policy(&mut self, policy: &FreezePolicy) {
        self.stem.trainable = policy.stem_trainable();
        self.stem.conv.trainable = self.stem.trainable;
        self.stem.bn.trainable = self.stem.trainable;
        let mut first = self.entity_count() + 1; // head entity when nothing else
        if self.stem.trainable {
            first = 0;
        }
        let mut idx = 1;
        for (si, blocks) in self.stages.iter_mut().enumerate() {
            let stage = si + 2;
            for (bi, block) in blocks.iter_mut().enumerate() {
                let t = policy.block_trainable(stage, bi);
                block.set_trainable(t);
                if t && idx < first {
                    first = idx;
                }
                idx += 1;
            }
        }
        self.first_trainable = first;
    }

    /// Inference logits.
    pub fn forward(&self, x: &ArrayView4<F>) -> Array2<F> {
        let mut cur = self.stem.conv.forward(x);
        cur = self.stem.bn.forward(&cur.view());
        cur = self.stem.relu.forward(&cur.view());
        cur = self.stem.pool.forward(&cur.view());
        for blocks in &self.stages {
            for block in blocks {
                cur = block.forward(&cur.view());
            }
        }
        let pooled = self.head.gap.forward(&cur.view());
        self.head.fc.forward(&pooled.view())
    }

    /// Training logits; frozen entities below the backward cutoff run the
    /// pure inference path and cache nothing.
    pub fn forward_train(&mut self, x: &ArrayView4<F>) -> Array2<F> {
        let cutoff = self.first_trainable;
        let mut cur;
        if cutoff == 0 {
            cur = self.stem.conv.forward_train(x);
            cur = self.stem.bn.forward_train(&cur.view());
            cur = self.stem.relu.forward_train(&cur.view());
            cur = self.stem.pool.forward_train(&cur.view());
        } else {
            cur = self.stem.conv.forward(x);
            cur = self.stem.bn.forward(&cur.view());
            cur = self.stem.relu.forward(&cur.view());
            cur = self.stem.pool.forward(&cur.view());
        }
        let mut idx = 1;
        for blocks in self.stages.iter_mut() {
            for block in blocks.iter_mut() {
                cur = block.forward_train(&cur.view(), idx >= cutoff);
                idx += 1;
            }
        }
        let pooled = self.head.gap.forward_train(&cur.view());
        self.head.fc.forward_train(&pooled.view())
    }

    /// Backpropagates the logit gradient, stopping below the earliest
    /// trainable entity.
    pub fn backward(&mut self, dlogits: &Array2<F>) {
        let cutoff = self.first_trainable;
        let head_entity = self.entity_count();
        let d_pool = self
            .head
            .fc
            .backward(&dlogits.view(), cutoff < head_entity);
        let Some(d_pool) = d_pool else {
            return;
        };
        let mut d = self.head.gap.backward(&d_pool);

        let mut idx = head_entity - 1; // last block entity index
        for blocks in self.stages.iter_mut().rev() {
            for block in blocks.iter_mut().rev() {
                if idx < cutoff {
                    return;
                }
                match block.backward(&d.view(), idx > cutoff) {
                    Some(dx) => d = dx,
                    None => return,
                }
                idx -= 1;
            }
        }
        if cutoff == 0 {
            let mut d = self.stem.pool.backward(&d.view());
            self.stem.relu.backward(&mut d);
            let d = self.stem.bn.backward(&d.view());
            self.stem.conv.backward(&d.view(), false);
        }
    }

    /// Read-only walk over every learnable parameter in construction order.
    pub fn for_each_param(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>, bool)) {
        let stem = &self.stem;
        f(
            &format!("{}.weight", stem.conv.name),
            stem.conv.weight.view().into_dyn(),
            stem.conv.trainable,
        );
        f(&format!("{}.gamma", stem.bn.name), stem.bn.gamma.view().into_dyn(), stem.bn.trainable);
        f(&format!("{}.beta", stem.bn.name), stem.bn.beta.view().into_dyn(), stem.bn.trainable);
        for blocks in &self.stages {
            for b in blocks {
                for (conv, bn) in [(&b.conv1, &b.bn1), (&b.conv2, &b.bn2), (&b.conv3, &b.bn3)] {
                    f(&format!("{}.weight", conv.name), conv.weight.view().into_dyn(), conv.trainable);
                    f(&format!("{}.gamma", bn.name), bn.gamma.view().into_dyn(), bn.trainable);
                    f(&format!("{}.beta", bn.name), bn.beta.view().into_dyn(), bn.trainable);
                }
                if let Some((conv, bn)) = &b.down {
                    f(&format!("{}.weight", conv.name), conv.weight.view().into_dyn(), conv.trainable);
                    f(&format!("{}.gamma", bn.name), bn.gamma.view().into_dyn(), bn.trainable);
                    f(&format!("{}.beta", bn.name), bn.beta.view().into_dyn(), bn.trainable);
                }
            }
        }
        let fc = &self.head.fc;
        f(&format!("{}.weight", fc.name), fc.weight.view().into_dyn(), true);
        f(&format!("{}.bias", fc.name), fc.bias.view().into_dyn(), true);
    }

    /// Mutable walk over every learnable parameter in construction order.
    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        let stem = &mut self.stem;
        f(
            &format!("{}.weight", stem.conv.name),
            stem.conv.weight.view_mut().into_dyn(),
        );
        let bn_name = stem.bn.name.clone();
        f(&format!("{bn_name}.gamma"), stem.bn.gamma.view_mut().into_dyn());
        f(&format!("{bn_name}.beta"), stem.bn.beta.view_mut().into_dyn());
        for blocks in self.stages.iter_mut() {
            for b in blocks.iter_mut() {
                for conv in [&mut b.conv1, &mut b.conv2, &mut b.conv3] {
                    f(&format!("{}.weight", conv.name), conv.weight.view_mut().into_dyn());
                }
                for bn in [&mut b.bn1, &mut b.bn2, &mut b.bn3] {
                    let name = bn.name.clone();
                    f(&format!("{name}.gamma"), bn.gamma.view_mut().into_dyn());
                    f(&format!("{name}.beta"), bn.beta.view_mut().into_dyn());
                }
                if let Some((conv, bn)) = b.down.as_mut() {
                    f(&format!("{}.weight", conv.name), conv.weight.view_mut().into_dyn());
                    let name = bn.name.clone();
                    f(&format!("{name}.gamma"), bn.gamma.view_mut().into_dyn());
                    f(&format!("{name}.beta"), bn.beta.view_mut().into_dyn());
                }
            }
        }
        let fc = &mut self.head.fc;
        let name = fc.name.clone();
        f(&format!("{name}.weight"), fc.weight.view_mut().into_dyn());
        f(&format!("{name}.bias"), fc.bias.view_mut().into_dyn());
    }

    /// Batch-norm running statistics (saved state, never trained).
    pub fn for_each_state(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        let visit_bn = |bn: &BatchNorm2d<F>, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)| {
            f(&format!("{}.running_mean", bn.name), bn.running_mean.view().into_dyn());
            f(&format!("{}.running_var", bn.name), bn.running_var.view().into_dyn());
        };
        visit_bn(&self.stem.bn, f);
        for blocks in &self.stages {
            for b in blocks {
                visit_bn(&b.bn1, f);
                visit_bn(&b.bn2, f);
                visit_bn(&b.bn3, f);
                if let Some((_, bn)) = &b.down {
                    visit_bn(bn, f);
                }
            }
        }
    }

    /// Visits every trainable parameter whose gradient is populated,
    /// consuming the gradient. Deterministic construction order.
    pub fn apply_update(
        &mut self,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>, ArrayD<F>),
    ) {
        fn conv_update<F: Scalar>(
            conv: &mut Conv2d<F>,
            f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>, ArrayD<F>),
        ) {
            if let Some(g) = conv.grad_weight.take() {
                f(
                    &format!("{}.weight", conv.name),
                    conv.weight.view_mut().into_dyn(),
                    g.into_dyn(),
                );
            }
        }
        fn bn_update<F: Scalar>(
            bn: &mut BatchNorm2d<F>,
            f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>, ArrayD<F>),
        ) {
            let name = bn.name.clone();
            if let Some(g) = bn.grad_gamma.take() {
                f(&format!("{name}.gamma"), bn.gamma.view_mut().into_dyn(), g.into_dyn());
            }
            if let Some(g) = bn.grad_beta.take() {
                f(&format!("{name}.beta"), bn.beta.view_mut().into_dyn(), g.into_dyn());
            }
        }

        conv_update(&mut self.stem.conv, f);
        bn_update(&mut self.stem.bn, f);
        for blocks in self.stages.iter_mut() {
            for b in blocks.iter_mut() {
                conv_update(&mut b.conv1, f);
                bn_update(&mut b.bn1, f);
                conv_update(&mut b.conv2, f);
                bn_update(&mut b.bn2, f);
                conv_update(&mut b.conv3, f);
                bn_update(&mut b.bn3, f);
                if let Some((conv, bn)) = b.down.as_mut() {
                    conv_update(conv, f);
                    bn_update(bn, f);
                }
            }
        }
        let fc = &mut self.head.fc;
        let name = fc.name.clone();
        if let Some(g) = fc.grad_weight.take() {
            f(&format!("{name}.weight"), fc.weight.view_mut().into_dyn(), g.into_dyn());
        }
        if let Some(g) = fc.grad_bias.take() {
            f(&format!("{name}.bias"), fc.bias.view_mut().into_dyn(), g.into_dyn());
        }
    }

    /// Assigns parameters and state by name. `require_all` demands that
    /// every parameter of the model be present in the map.
    pub fn assign_named(
        &mut self,
        map: &HashMap<String, ArrayD<F>>,
        require_all: bool,
        skip_head: bool,
    ) -> Result<(), BackboneError> {
        fn assign_into<F: Scalar>(
            target: &mut ArrayViewMutD<'_, F>,
            name: &str,
            map: &HashMap<String, ArrayD<F>>,
            require_all: bool,
        ) -> Result<(), BackboneError> {
            match map.get(name) {
                Some(src) => {
                    if src.shape() != target.shape() {
                        return Err(BackboneError::ParamLoad(format!(
                            "shape mismatch for {name}: checkpoint {:?} vs model {:?}",
                            src.shape(),
                            target.shape()
                        )));
                    }
                    target.assign(src);
                    Ok(())
                }
                None if require_all => {
                    Err(BackboneError::ParamLoad(format!("missing parameter {name}")))
                }
                None => Ok(()),
            }
        }

        let mut result = Ok(());
        let assign_bn = |bn: &mut BatchNorm2d<F>| -> Result<(), BackboneError> {
            let name = bn.name.clone();
            assign_into(&mut bn.gamma.view_mut().into_dyn(), &format!("{name}.gamma"), map, require_all)?;
            assign_into(&mut bn.beta.view_mut().into_dyn(), &format!("{name}.beta"), map, require_all)?;
            assign_into(
                &mut bn.running_mean.view_mut().into_dyn(),
                &format!("{name}.running_mean"),
                map,
                require_all,
            )?;
            assign_into(
                &mut bn.running_var.view_mut().into_dyn(),
                &format!("{name}.running_var"),
                map,
                require_all,
            )
        };

        let stem_name = format!("{}.weight", self.stem.conv.name);
        if let Err(e) = assign_into(&mut self.stem.conv.weight.view_mut().into_dyn(), &stem_name, map, require_all) {
            return Err(e);
        }
        if let Err(e) = assign_bn(&mut self.stem.bn) {
            return Err(e);
        }
        for blocks in self.stages.iter_mut() {
            for b in blocks.iter_mut() {
                for conv in [&mut b.conv1, &mut b.conv2, &mut b.conv3] {
                    let name = format!("{}.weight", conv.name);
                    if let Err(e) =
                        assign_into(&mut conv.weight.view_mut().into_dyn(), &name, map, require_all)
                    {
                        return Err(e);
                    }
                }
                for bn in [&mut b.bn1, &mut b.bn2, &mut b.bn3] {
                    if let Err(e) = assign_bn(bn) {
                        return Err(e);
                    }
                }
                if let Some((conv, bn)) = b.down.as_mut() {
                    let name = format!("{}.weight", conv.name);
                    if let Err(e) =
                        assign_into(&mut conv.weight.view_mut().into_dyn(), &name, map, require_all)
                    {
                        return Err(e);
                    }
                    if let Err(e) = assign_bn(bn) {
                        return Err(e);
                    }
                }
            }
        }
        if !skip_head {
            let fc = &mut self.head.fc;
            let name = fc.name.clone();
            result = result
                .and(assign_into(&mut fc.weight.view_mut().into_dyn(), &format!("{name}.weight"), map, require_all))
                .and(assign_into(&mut fc.bias.view_mut().into_dyn(), &format!("{name}.bias"), map, require_all));
        }
        result
    }

    /// All activation unit ids, in forward order.
    fn activation_units(&self) -> Vec<String> {
        let mut units = vec!["block1.conv".to_string(), "block1".to_string()];
        for (si, blocks) in self.stages.iter().enumerate() {
            let stage = si + 2;
            for (bi, _) in blocks.iter().enumerate() {
                units.push(format!("block{stage}{}", sub_block_letter(bi)));
            }
            units.push(format!("block{stage}"));
        }
        units
    }

    /// Runs inference on a single image capturing the requested
    /// post-activation maps, returned in request order.
    fn extract(&self, x: &ArrayView4<F>, unit_ids: &[String]) -> Result<Vec<(String, Array3<F>)>, BackboneError> {
        let known = self.activation_units();
        for unit in unit_ids {
            if !known.contains(unit) {
                return Err(BackboneError::UnknownUnit(unit.clone()));
            }
        }
        let mut captured: HashMap<String, Array3<F>> = HashMap::new();
        let grab = |arr: &Array4<F>| arr.index_axis(Axis(0), 0).to_owned();

        let mut cur = self.stem.conv.forward(x);
        cur = self.stem.bn.forward(&cur.view());
        cur = self.stem.relu.forward(&cur.view());
        if unit_ids.contains(&"block1.conv".to_string()) {
            captured.insert("block1.conv".into(), grab(&cur));
        }
        cur = self.stem.pool.forward(&cur.view());
        if unit_ids.contains(&"block1".to_string()) {
            captured.insert("block1".into(), grab(&cur));
        }
        for (si, blocks) in self.stages.iter().enumerate() {
            let stage = si + 2;
            for (bi, block) in blocks.iter().enumerate() {
                cur = block.forward(&cur.view());
                let sub = format!("block{stage}{}", sub_block_letter(bi));
                if unit_ids.contains(&sub) {
                    captured.insert(sub, grab(&cur));
                }
            }
            let stage_name = format!("block{stage}");
            if unit_ids.contains(&stage_name) {
                captured.insert(stage_name, grab(&cur));
            }
        }
        Ok(unit_ids
            .iter()
            .map(|u| (u.clone(), captured.remove(u).expect("captured above")))
            .collect())
    }

    pub fn clear_caches(&mut self) {
        self.stem.conv.clear_cache();
        self.stem.bn.clear_cache();
        self.stem.relu.clear_cache();
        self.stem.pool.clear_cache();
        for blocks in self.stages.iter_mut() {
            for b in blocks.iter_mut() {
                b.conv1.clear_cache();
                b.bn1.clear_cache();
                b.relu1.clear_cache();
                b.conv2.clear_cache();
                b.bn2.clear_cache();
                b.conv3.clear_cache();
                b.bn3.clear_cache();
                b.relu2.clear_cache();
                b.relu_out.clear_cache();
                if let Some((conv, bn)) = b.down.as_mut() {
                    conv.clear_cache();
                    bn.clear_cache();
                }
            }
        }
        self.head.fc.clear_cache();
    }
}

/// One trained (or in-training) binary expert: a configured backbone, a
/// freeze policy, and the expert role that fixes its relabeling map.
pub struct ExpertModel<F: Scalar = f32> {
    pub kind: ExpertKind,
    pub config: BackboneConfig,
    pub policy: FreezePolicy,
    pub(crate) net: Backbone<F>,
}

/// Builds a five-stage backbone for the given expert. With `pretrained`
/// the body is loaded from the configured weight container and only the
/// head is seeded randomly; otherwise everything is seeded from
/// `init_seed`. The initial freeze policy marks every unit trainable;
/// training applies the configured policy via [`ExpertModel::apply_freeze`].
pub fn build_backbone<F: Scalar>(
    config: &BackboneConfig,
    kind: ExpertKind,
) -> Result<ExpertModel<F>, BackboneError> {
    config.validate()?;
    let mut net = Backbone::build(config);
    if config.pretrained {
        let path = config.pretrained_weights.as_ref().ok_or_else(|| {
            BackboneError::PretrainedUnavailable(
                "config.pretrained_weights is not set".into(),
            )
        })?;
        let map = crate::checkpoint::read_tensor_map::<F>(path).map_err(|e| {
            BackboneError::PretrainedUnavailable(format!("{}: {e}", path.display()))
        })?;
        net.assign_named(&map, true, true)?;
    }
    let policy = FreezePolicy::all(config);
    net.apply_policy(&policy);
    Ok(ExpertModel {
        kind,
        config: config.clone(),
        policy,
        net,
    })
}

impl<F: Scalar> ExpertModel<F> {
    /// Marks exactly the policy's units trainable; everything else frozen.
    pub fn apply_freeze(&mut self, policy: &FreezePolicy) -> Result<(), BackboneError> {
        policy.validate(&self.config)?;
        self.net.apply_policy(policy);
        self.policy = policy.clone();
        Ok(())
    }

    /// Whether a named parameter currently receives gradient updates;
    /// `None` for unknown names.
    pub fn is_trainable(&self, param_name: &str) -> Option<bool> {
        let mut found = None;
        self.net.for_each_param(&mut |name, _, trainable| {
            if name == param_name {
                found = Some(trainable);
            }
        });
        found
    }

    /// All parameter names with their trainable flags.
    pub fn param_flags(&self) -> Vec<(String, bool)> {
        let mut out = Vec::new();
        self.net
            .for_each_param(&mut |name, _, t| out.push((name.to_string(), t)));
        out
    }

    /// Converts an image batch to the NCHW array the network consumes,
    /// enforcing the configured input size.
    pub fn batch_to_array(&self, batch: &[ImageTensor]) -> Result<Array4<F>, BackboneError> {
        let size = self.config.input_size;
        let mut x = Array4::<F>::zeros((batch.len(), 3, size, size));
        for (i, t) in batch.iter().enumerate() {
            let (h, w, c) = t.data.dim();
            if h != size || w != size || c != 3 {
                return Err(BackboneError::ShapeMismatch {
                    expected: size,
                    index: i,
                    id: t.source_id.clone(),
                    got_h: h,
                    got_w: w,
                    got_c: c,
                });
            }
            for y in 0..size {
                for xx in 0..size {
                    for ch in 0..3 {
                        x[(i, ch, y, xx)] = F::from_f64(t.data[(y, xx, ch)] as f64);
                    }
                }
            }
        }
        Ok(x)
    }

    /// Inference probabilities for a batch of prepared images. One
    /// `[p_negative, p_positive]` pair per input, each summing to one.
    pub fn predict_probs(&self, batch: &[ImageTensor]) -> Result<Vec<[F; 2]>, BackboneError> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.batch_to_array(batch)?;
        Ok(self.forward_probs_array(&x.view()))
    }

    /// Inference probabilities from a prepared NCHW batch.
    pub fn forward_probs_array(&self, x: &ArrayView4<F>) -> Vec<[F; 2]> {
        let logits = self.net.forward(x);
        let probs = softmax_rows(&logits.view());
        probs
            .axis_iter(Axis(0))
            .map(|row| [row[0], row[1]])
            .collect()
    }

    /// Post-activation feature maps for the requested units, in request
    /// order, channel-first.
    pub fn extract_activations(
        &self,
        image: &ImageTensor,
        unit_ids: &[String],
    ) -> Result<Vec<(String, Array3<F>)>, BackboneError> {
        let x = self.batch_to_array(std::slice::from_ref(image))?;
        self.net.extract(&x.view(), unit_ids)
    }

    /// All valid activation unit ids in forward order.
    pub fn activation_units(&self) -> Vec<String> {
        self.net.activation_units()
    }

    /// Training-mode loss of a labeled batch: forward with batch-stat
    /// normalization in trainable units, mean two-class cross-entropy.
    /// Updates running statistics in trainable batch norms (they do not
    /// feed back into this loss). Used by gradient verification.
    pub fn loss_on_batch(
        &mut self,
        batch: &[ImageTensor],
        targets: &[usize],
    ) -> Result<F, BackboneError> {
        let x = self.batch_to_array(batch)?;
        let logits = self.net.forward_train(&x.view());
        self.net.clear_caches();
        let (loss, _) = crate::nn::cross_entropy_with_grad(&logits.view(), targets);
        Ok(loss)
    }

    /// Analytic parameter gradients of the batch loss, keyed by parameter
    /// name. Parameters themselves are left untouched.
    pub fn gradients_on_batch(
        &mut self,
        batch: &[ImageTensor],
        targets: &[usize],
    ) -> Result<HashMap<String, ArrayD<F>>, BackboneError> {
        let x = self.batch_to_array(batch)?;
        let logits = self.net.forward_train(&x.view());
        let (_, dlogits) = crate::nn::cross_entropy_with_grad(&logits.view(), targets);
        self.net.backward(&dlogits);
        let mut grads = HashMap::new();
        self.net.apply_update(&mut |name, _param, grad| {
            grads.insert(name.to_string(), grad);
        });
        Ok(grads)
    }

    /// Applies `f` to the named parameter; `false` when the name is
    /// unknown.
    pub fn modify_param(&mut self, name: &str, f: impl FnOnce(ArrayViewMutD<'_, F>)) -> bool {
        let mut f = Some(f);
        let mut hit = false;
        self.net.for_each_param_mut(&mut |param_name, view| {
            if param_name == name {
                if let Some(f) = f.take() {
                    f(view);
                    hit = true;
                }
            }
        });
        hit
    }

    /// Snapshot of every parameter and state array as f64-independent
    /// owned arrays, keyed by name. Used by checkpoints and tests.
    pub fn snapshot(&self) -> HashMap<String, ArrayD<F>> {
        let mut map = HashMap::new();
        self.net.for_each_param(&mut |name, view, _| {
            map.insert(name.to_string(), view.to_owned());
        });
        self.net.for_each_state(&mut |name, view| {
            map.insert(name.to_string(), view.to_owned());
        });
        map
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingestion::ImageTensor;
    use ndarray::Array3;
    use rand::Rng;

    fn small_config(width: f64, input: usize, seed: u64) -> BackboneConfig {
        BackboneConfig {
            input_size: input,
            width_scale: width,
            init_seed: seed,
            ..Default::default()
        }
    }

    fn random_image(size: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor {
            data: Array3::from_shape_simple_fn((size, size, 3), || rng.gen_range(-2.0..2.0f32)),
            source_id: format!("rand{seed}"),
        }
    }

    #[test]
    fn feature_shapes_full_config() {
        let shapes = feature_shapes(&BackboneConfig::default());
        assert_eq!(shapes[0], (1, 112));
        assert!(shapes[1] == (2, 55) || shapes[1] == (2, 56));
        assert_eq!(shapes[2], (3, 28));
        assert_eq!(shapes[3], (4, 14));
        assert_eq!(shapes[4], (5, 7));
    }

    #[test]
    fn feature_shapes_input_112_ends_at_4() {
        let cfg = BackboneConfig {
            input_size: 112,
            ..Default::default()
        };
        assert_eq!(feature_shapes(&cfg).last().unwrap().1, 4);
    }

    #[test]
    fn feature_shapes_strictly_decreasing() {
        for input in (32..=224).step_by(8) {
            let cfg = BackboneConfig {
                input_size: input,
                ..Default::default()
            };
            let shapes = feature_shapes(&cfg);
            for pair in shapes.windows(2) {
                assert!(pair[0].1 > pair[1].1, "not decreasing at input {input}: {shapes:?}");
            }
            assert!(shapes.last().unwrap().1 >= 1);
        }
    }

    #[test]
    fn width_scale_rounds_channels_up() {
        let cfg = small_config(0.25, 64, 0);
        assert_eq!(cfg.stem_width(), 16);
        assert_eq!(cfg.stage_width(2), 16);
        assert_eq!(cfg.stage_width(5), 128);
        let cfg = small_config(0.01, 64, 0);
        assert_eq!(cfg.stem_width(), 1);
    }

    #[test]
    fn scaled_pretrained_is_rejected() {
        let cfg = BackboneConfig {
            width_scale: 0.25,
            pretrained: true,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(BackboneError::InvalidConfig(_))));
    }

    #[test]
    fn pretrained_without_weights_file_errors() {
        let cfg = BackboneConfig {
            pretrained: true,
            ..Default::default()
        };
        let err = match build_backbone::<f32>(&cfg, ExpertKind::TexturedDetector) {
            Err(e) => e,
            Ok(_) => panic!("expected an error"),
        };
        assert!(matches!(err, BackboneError::PretrainedUnavailable(_)));
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let cfg = small_config(0.125, 64, 42);
        let a = build_backbone::<f32>(&cfg, ExpertKind::TexturedDetector).unwrap();
        let b = build_backbone::<f32>(&cfg, ExpertKind::TexturedDetector).unwrap();
        let sa = a.snapshot();
        let sb = b.snapshot();
        assert_eq!(sa.len(), sb.len());
        for (name, arr) in &sa {
            assert_eq!(arr, &sb[name], "parameter {name} differs");
        }
    }

    #[test]
    fn forward_probs_sum_to_one_and_duplicates_match() {
        let cfg = small_config(0.125, 64, 7);
        let model = build_backbone::<f32>(&cfg, ExpertKind::TexturedDetector).unwrap();
        let img = random_image(64, 1);
        let probs = model
            .predict_probs(&[img.clone(), img.clone(), random_image(64, 2)])
            .unwrap();
        assert_eq!(probs.len(), 3);
        for p in &probs {
            assert!((p[0] + p[1] - 1.0).abs() < 1e-6);
            assert!(p[0] >= 0.0 && p[0] <= 1.0 && p[1] >= 0.0 && p[1] <= 1.0);
            assert!(p[0].is_finite() && p[1].is_finite());
        }
        assert_eq!(probs[0], probs[1]);
        let empty = model.predict_probs(&[]).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let cfg = small_config(0.125, 64, 7);
        let model = build_backbone::<f32>(&cfg, ExpertKind::TexturedDetector).unwrap();
        let err = model.predict_probs(&[random_image(32, 1)]).unwrap_err();
        assert!(matches!(err, BackboneError::ShapeMismatch { .. }));
    }

    #[test]
    fn freeze_policy_standard_marks_expected_units() {
        let cfg = small_config(0.125, 64, 7);
        let mut model = build_backbone::<f32>(&cfg, ExpertKind::TexturedDetector).unwrap();
        model.apply_freeze(&FreezePolicy::standard()).unwrap();
        for (name, trainable) in model.param_flags() {
            let expected = name.starts_with("block3")
                || name.starts_with("block5")
                || name.starts_with("head");
            assert_eq!(trainable, expected, "{name}");
        }
    }

    #[test]
    fn freeze_policy_small_data_marks_only_block5c() {
        let cfg = small_config(0.125, 64, 7);
        let mut model = build_backbone::<f32>(&cfg, ExpertKind::LensDetector).unwrap();
        model.apply_freeze(&FreezePolicy::small_data()).unwrap();
        for (name, trainable) in model.param_flags() {
            let expected = name.starts_with("block5c") || name.starts_with("head");
            assert_eq!(trainable, expected, "{name}");
        }
    }

    #[test]
    fn empty_policy_is_rejected_for_missing_head() {
        let cfg = small_config(0.125, 64, 7);
        let mut model = build_backbone::<f32>(&cfg, ExpertKind::LensDetector).unwrap();
        let err = model.apply_freeze(&FreezePolicy::new(Vec::<String>::new())).unwrap_err();
        assert!(matches!(err, BackboneError::HeadMustBeTrainable));
        let err = model
            .apply_freeze(&FreezePolicy::new(["head", "block9"]))
            .unwrap_err();
        assert!(matches!(err, BackboneError::UnknownUnit(u) if u == "block9"));
    }

    #[test]
    fn activations_match_declared_shapes_and_order() {
        let cfg = small_config(0.25, 224, 7);
        let model = build_backbone::<f32>(&cfg, ExpertKind::TexturedDetector).unwrap();
        let img = random_image(224, 5);
        let units = vec!["block5".to_string(), "block1.conv".to_string()];
        let acts = model.extract_activations(&img, &units).unwrap();
        assert_eq!(acts.len(), 2);
        assert_eq!(acts[0].0, "block5");
        assert_eq!(acts[0].1.dim().1, 7);
        assert_eq!(acts[1].0, "block1.conv");
        assert_eq!(acts[1].1.dim().1, 112);

        let err = model
            .extract_activations(&img, &["block7x".to_string()])
            .unwrap_err();
        assert!(matches!(err, BackboneError::UnknownUnit(_)));
    }
}
