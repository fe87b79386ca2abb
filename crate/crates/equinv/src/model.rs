//! The shared feature extractor and its three heads: classifier (single
//! affine map), transform predictor, and invariant projector (one-hidden-
//! layer MLPs). One backbone pass feeds all heads.

use crate::arena::{ParamArena, ParamId};
use crate::error::{Error, Result};
use crate::layers::*;
use crate::rng::{self, domain};
use crate::scalar::Real;
use ndarray::{Array2, Array4, ArrayD, Axis, IxDyn};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backbone {
    Conv4Tiny,
    Conv4,
    Resnet12Lite,
}

impl Backbone {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "conv4-tiny" => Ok(Backbone::Conv4Tiny),
            "conv4" => Ok(Backbone::Conv4),
            "resnet12-lite" => Ok(Backbone::Resnet12Lite),
            _ => Err(Error::config(format!(
                "unknown backbone '{name}' (expected conv4-tiny, conv4, or resnet12-lite)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Backbone::Conv4Tiny => "conv4-tiny",
            Backbone::Conv4 => "conv4",
            Backbone::Resnet12Lite => "resnet12-lite",
        }
    }

    fn residual(&self) -> bool {
        matches!(self, Backbone::Resnet12Lite)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub num_transforms: usize,
    pub invariant_dim: usize,
    pub head_hidden: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.embed_dim,
            self.num_classes,
            self.num_transforms,
            self.invariant_dim,
            self.head_hidden,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::config("all model dimensions must be at least 1"));
        }
        Ok(())
    }

    fn stage_channels(&self) -> [usize; 4] {
        match self.backbone {
            Backbone::Conv4Tiny => [16, 32, 32, self.embed_dim],
            Backbone::Conv4 => [64, 64, 64, self.embed_dim],
            Backbone::Resnet12Lite => [32, 64, 128, self.embed_dim],
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct BnIds {
    gamma: ParamId,
    beta: ParamId,
    run_mean: ParamId,
    run_var: ParamId,
}

#[derive(Debug, Clone)]
struct Block {
    conv1: ParamId,
    bn1: BnIds,
    conv2: Option<ParamId>,
    bn2: Option<BnIds>,
    skip: Option<ParamId>,
}

#[derive(Debug, Clone)]
struct Heads {
    cls_w: ParamId,
    cls_b: ParamId,
    eq_w1: ParamId,
    eq_b1: ParamId,
    eq_w2: ParamId,
    eq_b2: ParamId,
    inv_w1: ParamId,
    inv_b1: ParamId,
    inv_w2: ParamId,
    inv_b2: ParamId,
}

#[derive(Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamArena<T>,
    pub buffers: ParamArena<T>,
    blocks: Vec<Block>,
    heads: Heads,
    backbone_passes: AtomicU64,
}

impl<T: Real> Clone for Model<T> {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            params: self.params.clone(),
            buffers: self.buffers.clone(),
            blocks: self.blocks.clone(),
            heads: self.heads.clone(),
            backbone_passes: AtomicU64::new(0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelOutputs<T> {
    pub z: Array2<T>,
    pub class_logits: Array2<T>,
    pub transform_logits: Array2<T>,
    pub v: Array2<T>,
}

pub struct OutputGrads<T> {
    pub d_class: Array2<T>,
    pub d_transform: Array2<T>,
    pub d_v: Array2<T>,
}

struct BlockTrace<T> {
    conv1: ConvCache<T>,
    bn1: BnCache<T>,
    pre1: Array4<T>,
    conv2: Option<ConvCache<T>>,
    bn2: Option<BnCache<T>>,
    skip: Option<ConvCache<T>>,
    sum_pre_relu: Option<Array4<T>>,
    pool: Option<PoolCache>,
    out_dim: (usize, usize, usize, usize),
}

struct HeadTrace<T> {
    h1: Array2<T>,
    ha: Array2<T>,
    g1: Array2<T>,
    ga: Array2<T>,
    norm: NormCache<T>,
}

/// Everything backward needs, plus the batch statistics the trainer folds
/// into the running estimates after the step.
pub struct Trace<T> {
    blocks: Vec<BlockTrace<T>>,
    z: Array2<T>,
    head: HeadTrace<T>,
    bn_stats: Vec<(BnIds, BnStats<T>)>,
}

fn kaiming<T: Real, R: rand::Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> ArrayD<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
    ArrayD::from_shape_fn(IxDyn(shape), |_| T::from_f64(normal.sample(rng)))
}

fn accum<T: Real>(dst: &mut ArrayD<T>, src: &ArrayD<T>) {
    dst.zip_mut_with(src, |a, &b| *a = *a + b);
}

pub fn init_model<T: Real>(config: &ModelConfig) -> Result<Model<T>> {
    config.validate()?;
    let mut rng = rng::derive_rng(config.seed, &[domain::MODEL_INIT]);
    let mut params = ParamArena::new();
    let mut buffers = ParamArena::new();
    let bn = |params: &mut ParamArena<T>, buffers: &mut ParamArena<T>, name: &str, c: usize| {
        BnIds {
            gamma: params.push(format!("{name}.gamma"), ArrayD::from_elem(IxDyn(&[c]), T::one())),
            beta: params.push(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[c]))),
            run_mean: buffers.push(format!("{name}.running_mean"), ArrayD::zeros(IxDyn(&[c]))),
            run_var: buffers
                .push(format!("{name}.running_var"), ArrayD::from_elem(IxDyn(&[c]), T::one())),
        }
    };
    let mut blocks = Vec::new();
    let mut cin = 3usize;
    for (i, cout) in config.stage_channels().into_iter().enumerate() {
        let base = format!("backbone.block{i}");
        let conv1 = params.push(
            format!("{base}.conv1.weight"),
            kaiming::<T, _>(&mut rng, &[cout, cin, 3, 3], cin * 9),
        );
        let bn1 = bn(&mut params, &mut buffers, &format!("{base}.bn1"), cout);
        let (conv2, bn2, skip) = if config.backbone.residual() {
            let conv2 = params.push(
                format!("{base}.conv2.weight"),
                kaiming::<T, _>(&mut rng, &[cout, cout, 3, 3], cout * 9),
            );
            let bn2 = bn(&mut params, &mut buffers, &format!("{base}.bn2"), cout);
            let skip = params.push(
                format!("{base}.skip.weight"),
                kaiming::<T, _>(&mut rng, &[cout, cin, 1, 1], cin),
            );
            (Some(conv2), Some(bn2), Some(skip))
        } else {
            (None, None, None)
        };
        blocks.push(Block { conv1, bn1, conv2, bn2, skip });
        cin = cout;
    }
    let d = config.embed_dim;
    let hh = config.head_hidden;
    // uniform(+-1/sqrt(fan_in)) keeps head logits in the near-uniform regime
    // at init; the kaiming gain above is for relu-followed convolutions
    let lin = |params: &mut ParamArena<T>,
                   rng: &mut rand_chacha::ChaCha8Rng,
                   name: &str,
                   out: usize,
                   inp: usize| {
        let bound = 1.0 / (inp as f64).sqrt();
        let w = params.push(
            format!("{name}.weight"),
            ArrayD::from_shape_fn(IxDyn(&[out, inp]), |_| {
                T::from_f64(rng.random_range(-bound..bound))
            }),
        );
        let b = params.push(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out])));
        (w, b)
    };
    let (cls_w, cls_b) = lin(&mut params, &mut rng, "head.class", config.num_classes, d);
    let (eq_w1, eq_b1) = lin(&mut params, &mut rng, "head.eq.fc1", hh, d);
    let (eq_w2, eq_b2) = lin(&mut params, &mut rng, "head.eq.fc2", config.num_transforms, hh);
    let (inv_w1, inv_b1) = lin(&mut params, &mut rng, "head.inv.fc1", hh, d);
    let (inv_w2, inv_b2) = lin(&mut params, &mut rng, "head.inv.fc2", config.invariant_dim, hh);
    Ok(Model {
        config: config.clone(),
        params,
        buffers,
        blocks,
        heads: Heads {
            cls_w,
            cls_b,
            eq_w1,
            eq_b1,
            eq_w2,
            eq_b2,
            inv_w1,
            inv_b1,
            inv_w2,
            inv_b2,
        },
        backbone_passes: AtomicU64::new(0),
    })
}

fn nhwc_to_nchw<T: Real>(images: &Array4<T>) -> Array4<T> {
    images
        .view()
        .permuted_axes([0, 3, 1, 2])
        .as_standard_layout()
        .to_owned()
}

impl<T: Real> Model<T> {
    pub fn param_count(&self) -> usize {
        self.params.total_elems()
    }

    pub fn backbone_passes(&self) -> u64 {
        self.backbone_passes.load(Ordering::Relaxed)
    }

    fn check_input(&self, images: &Array4<T>) -> Result<()> {
        let (_, h, w, c) = images.dim();
        if c != 3 {
            return Err(Error::argument(format!("backbone expects 3 channels, got {c}")));
        }
        if h < 2 || w < 2 {
            return Err(Error::argument("images must be at least 2x2"));
        }
        Ok(())
    }

    // One backbone pass in training mode (batch statistics), with trace.
    fn backbone_train(&self, nchw: Array4<T>) -> (Array2<T>, Vec<BlockTrace<T>>, Vec<(BnIds, BnStats<T>)>) {
        self.backbone_passes.fetch_add(nchw.dim().0 as u64, Ordering::Relaxed);
        let mut x = nchw;
        let mut traces = Vec::with_capacity(self.blocks.len());
        let mut stats = Vec::new();
        for block in &self.blocks {
            let (c1, conv1_cache) = conv2d(&x, self.params.get(block.conv1), 1, 1);
            let (b1, bn1_cache, st1) = batchnorm_train(
                &c1,
                self.params.get(block.bn1.gamma),
                self.params.get(block.bn1.beta),
            );
            stats.push((block.bn1, st1));
            let a1 = relu4(&b1);
            let (pre_pool, conv2_cache, bn2_cache, skip_cache, sum_pre_relu) =
                if let (Some(conv2), Some(bn2), Some(skip)) = (block.conv2, block.bn2, block.skip)
                {
                    let (c2, conv2_cache) = conv2d(&a1, self.params.get(conv2), 1, 1);
                    let (b2, bn2_cache, st2) = batchnorm_train(
                        &c2,
                        self.params.get(bn2.gamma),
                        self.params.get(bn2.beta),
                    );
                    stats.push((bn2, st2));
                    let (s, skip_cache) = conv2d(&x, self.params.get(skip), 1, 0);
                    let sum = &b2 + &s;
                    let out = relu4(&sum);
                    (out, Some(conv2_cache), Some(bn2_cache), Some(skip_cache), Some(sum))
                } else {
                    (a1, None, None, None, None)
                };
            let (h, w) = (pre_pool.dim().2, pre_pool.dim().3);
            let (out, pool) = if h >= 2 && w >= 2 {
                let (p, cache) = maxpool2(&pre_pool);
                (p, Some(cache))
            } else {
                (pre_pool, None)
            };
            traces.push(BlockTrace {
                conv1: conv1_cache,
                bn1: bn1_cache,
                pre1: b1,
                conv2: conv2_cache,
                bn2: bn2_cache,
                skip: skip_cache,
                sum_pre_relu,
                pool,
                out_dim: out.dim(),
            });
            x = out;
        }
        let z = gap(&x);
        (z, traces, stats)
    }

    // Inference-mode backbone pass with running statistics, no trace.
    fn backbone_eval(&self, nchw: Array4<T>) -> Array2<T> {
        self.backbone_passes.fetch_add(nchw.dim().0 as u64, Ordering::Relaxed);
        let mut x = nchw;
        for block in &self.blocks {
            let (c1, _) = conv2d(&x, self.params.get(block.conv1), 1, 1);
            let b1 = batchnorm_eval(
                &c1,
                self.params.get(block.bn1.gamma),
                self.params.get(block.bn1.beta),
                self.buffers.get(block.bn1.run_mean),
                self.buffers.get(block.bn1.run_var),
            );
            let a1 = relu4(&b1);
            let pre_pool = if let (Some(conv2), Some(bn2), Some(skip)) =
                (block.conv2, block.bn2, block.skip)
            {
                let (c2, _) = conv2d(&a1, self.params.get(conv2), 1, 1);
                let b2 = batchnorm_eval(
                    &c2,
                    self.params.get(bn2.gamma),
                    self.params.get(bn2.beta),
                    self.buffers.get(bn2.run_mean),
                    self.buffers.get(bn2.run_var),
                );
                let (s, _) = conv2d(&x, self.params.get(skip), 1, 0);
                relu4(&(&b2 + &s))
            } else {
                a1
            };
            let (h, w) = (pre_pool.dim().2, pre_pool.dim().3);
            x = if h >= 2 && w >= 2 { maxpool2(&pre_pool).0 } else { pre_pool };
        }
        gap(&x)
    }

    fn heads_forward(&self, z: &Array2<T>) -> (Array2<T>, Array2<T>, Array2<T>, HeadTrace<T>) {
        let p = &self.params;
        let class_logits = linear(z, p.get(self.heads.cls_w), p.get(self.heads.cls_b));
        let h1 = linear(z, p.get(self.heads.eq_w1), p.get(self.heads.eq_b1));
        let ha = relu2(&h1);
        let transform_logits = linear(&ha, p.get(self.heads.eq_w2), p.get(self.heads.eq_b2));
        let g1 = linear(z, p.get(self.heads.inv_w1), p.get(self.heads.inv_b1));
        let ga = relu2(&g1);
        let pre_v = linear(&ga, p.get(self.heads.inv_w2), p.get(self.heads.inv_b2));
        let (v, norm) = l2norm_rows(&pre_v);
        (class_logits, transform_logits, v, HeadTrace { h1, ha, g1, ga, norm })
    }

    /// Training-mode forward on NHWC images; returns outputs plus the trace
    /// backward and the running-stat update need.
    pub fn forward_train(&self, images: &Array4<T>) -> Result<(ModelOutputs<T>, Trace<T>)> {
        self.check_input(images)?;
        let (z, blocks, bn_stats) = self.backbone_train(nhwc_to_nchw(images));
        let (class_logits, transform_logits, v, head) = self.heads_forward(&z);
        let outputs = ModelOutputs { z: z.clone(), class_logits, transform_logits, v };
        Ok((outputs, Trace { blocks, z, head, bn_stats }))
    }

    /// Inference-mode forward (running statistics, no trace).
    pub fn forward_eval(&self, images: &Array4<T>) -> Result<ModelOutputs<T>> {
        self.check_input(images)?;
        let z = self.backbone_eval(nhwc_to_nchw(images));
        let (class_logits, transform_logits, v, _) = self.heads_forward(&z);
        Ok(ModelOutputs { z: z.clone(), class_logits, transform_logits, v })
    }

    /// Backbone-only inference embeddings.
    pub fn embed(&self, images: &Array4<T>) -> Result<Array2<T>> {
        if images.dim().0 == 0 {
            return Ok(Array2::zeros((0, self.config.embed_dim)));
        }
        self.check_input(images)?;
        Ok(self.backbone_eval(nhwc_to_nchw(images)))
    }

    /// Folds the batch statistics from a training forward into the running
    /// estimates (momentum 0.1, unbiased variance).
    pub fn update_running_stats(&mut self, trace: &Trace<T>) {
        let mom = T::from_f64(0.1);
        let keep = T::one() - mom;
        for (ids, st) in &trace.bn_stats {
            let unbias = if st.count > 1 {
                T::from_f64(st.count as f64 / (st.count as f64 - 1.0))
            } else {
                T::one()
            };
            let rm = self.buffers.get_mut(ids.run_mean);
            for (r, &m) in rm.iter_mut().zip(st.mean.iter()) {
                *r = keep * *r + mom * m;
            }
            let rv = self.buffers.get_mut(ids.run_var);
            for (r, &v) in rv.iter_mut().zip(st.var_biased.iter()) {
                *r = keep * *r + mom * v * unbias;
            }
        }
    }

    /// Gradients of a scalar loss w.r.t. every parameter, given the loss
    /// gradients at the three head outputs.
    pub fn backward(&self, trace: &Trace<T>, g: &OutputGrads<T>) -> ParamArena<T> {
        let mut grads = self.params.zeros_like();
        let p = &self.params;
        let h = &self.heads;

        // classifier head
        let (dz_cls, dw, db) = linear_backward(&trace.z, p.get(h.cls_w), &g.d_class);
        accum(grads.get_mut(h.cls_w), &dw);
        accum(grads.get_mut(h.cls_b), &db);

        // transform head
        let (d_ha, dw, db) = linear_backward(&trace.head.ha, p.get(h.eq_w2), &g.d_transform);
        accum(grads.get_mut(h.eq_w2), &dw);
        accum(grads.get_mut(h.eq_b2), &db);
        let d_h1 = relu2_backward(&d_ha, &trace.head.h1);
        let (dz_eq, dw, db) = linear_backward(&trace.z, p.get(h.eq_w1), &d_h1);
        accum(grads.get_mut(h.eq_w1), &dw);
        accum(grads.get_mut(h.eq_b1), &db);

        // invariant head
        let d_pre_v = l2norm_rows_backward(&g.d_v, &trace.head.norm);
        let (d_ga, dw, db) = linear_backward(&trace.head.ga, p.get(h.inv_w2), &d_pre_v);
        accum(grads.get_mut(h.inv_w2), &dw);
        accum(grads.get_mut(h.inv_b2), &db);
        let d_g1 = relu2_backward(&d_ga, &trace.head.g1);
        let (dz_inv, dw, db) = linear_backward(&trace.z, p.get(h.inv_w1), &d_g1);
        accum(grads.get_mut(h.inv_w1), &dw);
        accum(grads.get_mut(h.inv_b1), &db);

        let dz = &(&dz_cls + &dz_eq) + &dz_inv;
        let last_dim = trace.blocks.last().unwrap().out_dim;
        let mut dx = gap_backward(&dz, last_dim);

        for (block, bt) in self.blocks.iter().zip(&trace.blocks).rev() {
            let d_after = match &bt.pool {
                Some(cache) => maxpool2_backward(&dx, cache),
                None => dx,
            };
            if let (Some(conv2), Some(bn2), Some(skip), Some(sum), Some(c2cache), Some(b2cache), Some(skcache)) = (
                block.conv2,
                block.bn2,
                block.skip,
                bt.sum_pre_relu.as_ref(),
                bt.conv2.as_ref(),
                bt.bn2.as_ref(),
                bt.skip.as_ref(),
            ) {
                let d_sum = relu4_backward(&d_after, sum);
                let (d_c2, dg2, db2) = batchnorm_backward(&d_sum, p.get(bn2.gamma), b2cache);
                accum(grads.get_mut(bn2.gamma), &dg2);
                accum(grads.get_mut(bn2.beta), &db2);
                let (d_a1, dw2) = conv2d_backward(&d_c2, p.get(conv2), c2cache, 1, 1);
                accum(grads.get_mut(conv2), &dw2);
                let d_pre1 = relu4_backward(&d_a1, &bt.pre1);
                let (d_c1, dg1, db1) =
                    batchnorm_backward(&d_pre1, p.get(block.bn1.gamma), &bt.bn1);
                accum(grads.get_mut(block.bn1.gamma), &dg1);
                accum(grads.get_mut(block.bn1.beta), &db1);
                let (dx_main, dw1) = conv2d_backward(&d_c1, p.get(block.conv1), &bt.conv1, 1, 1);
                accum(grads.get_mut(block.conv1), &dw1);
                let (dx_skip, dwsk) = conv2d_backward(&d_sum, p.get(skip), skcache, 1, 0);
                accum(grads.get_mut(skip), &dwsk);
                dx = &dx_main + &dx_skip;
            } else {
                let d_pre1 = relu4_backward(&d_after, &bt.pre1);
                let (d_c1, dg1, db1) =
                    batchnorm_backward(&d_pre1, p.get(block.bn1.gamma), &bt.bn1);
                accum(grads.get_mut(block.bn1.gamma), &dg1);
                accum(grads.get_mut(block.bn1.beta), &db1);
                let (dxp, dw1) = conv2d_backward(&d_c1, p.get(block.conv1), &bt.conv1, 1, 1);
                accum(grads.get_mut(block.conv1), &dw1);
                dx = dxp;
            }
        }
        grads
    }

    /// Same parameters re-instantiated at another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            buffers: self.buffers.cast(),
            blocks: self.blocks.clone(),
            heads: self.heads.clone(),
            backbone_passes: AtomicU64::new(0),
        }
    }
}

/// NHWC f32 batch promoted to the model precision.
pub fn images_to<T: Real>(images: &Array4<f32>) -> Array4<T> {
    images.mapv(|v| T::from_f64(f64::from(v)))
}

/// Stack a slice of NHWC images into one batch tensor.
pub fn stack_images<T: Real>(images: &[ndarray::Array3<f32>]) -> Array4<T> {
    if images.is_empty() {
        return Array4::zeros((0, 1, 1, 3));
    }
    let (h, w, c) = images[0].dim();
    let mut out = Array4::zeros((images.len(), h, w, c));
    for (i, img) in images.iter().enumerate() {
        out.index_axis_mut(Axis(0), i)
            .assign(&img.mapv(|v| T::from_f64(f64::from(v))));
    }
    out
}
