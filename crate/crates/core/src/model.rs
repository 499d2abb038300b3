//! Model assembly: the N-stage pipeline of backbone blocks bracketed by
//! adapter interactions, freeze policies, exact parameter accounting, and
//! the canonical parameter layout shared with checkpoint I/O.

use crate::config::{FreezePolicy, ModelConfig};
use crate::error::{Error, Result};
use crate::gba::{self, GbaVars};
use crate::graph::{Graph, Mode, Var};
use crate::init;
use crate::lsa::{self, ConvBnVars, LsaHeadStats, LsaHeadVars, MhcaVars, CONV_KERNEL, PYRAMID_CHANNELS, STEM_CHANNELS};
use crate::tensor::{Scalar, Tensor};
use crate::vit::{self, BlockVars};
use serde::{Deserialize, Serialize};

/// Parameter group, the unit of freeze policies and partial checkpoint
/// loading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Backbone,
    Gba,
    Lsa,
    Head,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    TruncNormal(f64),
    HeNormal { fan_in: usize },
    Zeros,
    Ones,
    Const(f64),
}

/// Shape/type/trainability of one named parameter, derived from config
/// alone (no tensor data). Used for counting, building and checkpoint
/// validation.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    pub trainable: bool,
    init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Non-learnable state tensor (batch-norm running statistics).
#[derive(Debug, Clone)]
pub struct BufferSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fill: f64,
}

#[derive(Debug, Clone, Copy)]
struct BlockIdx {
    ln1_gamma: usize,
    ln1_beta: usize,
    qkv_w: usize,
    qkv_b: usize,
    proj_w: usize,
    proj_b: usize,
    ln2_gamma: usize,
    ln2_beta: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

#[derive(Debug, Clone, Copy)]
struct GbaIdx {
    down_w: usize,
    down_b: usize,
    up_w: usize,
    up_b: usize,
    sc: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvBnIdx {
    w: usize,
    b: usize,
    gamma: usize,
    beta: usize,
    /// Index of the (mean, var) buffer pair.
    stats: usize,
}

#[derive(Debug, Clone, Copy)]
struct LsaHeadIdx {
    stem: [ConvBnIdx; 3],
    conv1: ConvBnIdx,
    conv2: ConvBnIdx,
    conv3: ConvBnIdx,
    proj_w: [usize; 3],
    proj_b: [usize; 3],
}

#[derive(Debug, Clone, Copy)]
struct MhcaIdx {
    ln_q_gamma: usize,
    ln_q_beta: usize,
    ln_kv_gamma: usize,
    ln_kv_beta: usize,
    q_w: usize,
    q_b: usize,
    k_w: usize,
    k_b: usize,
    v_w: usize,
    v_b: usize,
    out_w: usize,
    out_b: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    patch_w: usize,
    patch_b: usize,
    pos: usize,
    blocks: Vec<BlockIdx>,
    gba: Vec<GbaIdx>,
    lsa_head: Option<LsaHeadIdx>,
    /// One (inject, extract) pair per stage.
    mhca: Vec<(MhcaIdx, MhcaIdx)>,
    head_w: usize,
    head_b: usize,
}

struct Plan {
    specs: Vec<ParamSpec>,
    buffers: Vec<BufferSpec>,
    layout: Layout,
}

fn trainable_for(group: Group, policy: FreezePolicy, block0_mhsa: bool) -> bool {
    match policy {
        FreezePolicy::AdapterOnly => group != Group::Backbone,
        FreezePolicy::AdapterPlusBlock1Mhsa => group != Group::Backbone || block0_mhsa,
        FreezePolicy::LinearProbe => group == Group::Head,
        FreezePolicy::FullTuning => true,
    }
}

fn build_plan(cfg: &ModelConfig) -> Result<Plan> {
    cfg.validate()?;
    let policy = cfg.freeze_policy;
    let (d, mlp, l) = (cfg.width, cfg.mlp_dim, cfg.blocks);
    let k_tokens = cfg.num_patches();
    let mut specs: Vec<ParamSpec> = Vec::new();
    let mut buffers: Vec<BufferSpec> = Vec::new();

    let push = |specs: &mut Vec<ParamSpec>,
                    name: String,
                    group: Group,
                    shape: Vec<usize>,
                    init: Init,
                    block0_mhsa: bool|
     -> usize {
        specs.push(ParamSpec {
            name,
            group,
            shape,
            trainable: trainable_for(group, policy, block0_mhsa),
            init,
        });
        specs.len() - 1
    };

    let tn = Init::TruncNormal(0.02);
    let bb = Group::Backbone;

    let patch_w = push(
        &mut specs,
        "vit/patch_embed/w".into(),
        bb,
        vec![d, cfg.channels, cfg.patch, cfg.patch],
        tn,
        false,
    );
    let patch_b = push(&mut specs, "vit/patch_embed/b".into(), bb, vec![d], Init::Zeros, false);
    let pos = push(&mut specs, "vit/pos_embed".into(), bb, vec![k_tokens, d], tn, false);

    let mut blocks = Vec::with_capacity(l);
    for i in 0..l {
        let b0 = i == 0;
        let n = |s: &str| format!("vit/block{}/{}", i, s);
        blocks.push(BlockIdx {
            ln1_gamma: push(&mut specs, n("ln1/gamma"), bb, vec![d], Init::Ones, false),
            ln1_beta: push(&mut specs, n("ln1/beta"), bb, vec![d], Init::Zeros, false),
            qkv_w: push(&mut specs, n("attn/qkv_w"), bb, vec![3 * d, d], tn, b0),
            qkv_b: push(&mut specs, n("attn/qkv_b"), bb, vec![3 * d], Init::Zeros, b0),
            proj_w: push(&mut specs, n("attn/proj_w"), bb, vec![d, d], tn, b0),
            proj_b: push(&mut specs, n("attn/proj_b"), bb, vec![d], Init::Zeros, b0),
            ln2_gamma: push(&mut specs, n("ln2/gamma"), bb, vec![d], Init::Ones, false),
            ln2_beta: push(&mut specs, n("ln2/beta"), bb, vec![d], Init::Zeros, false),
            fc1_w: push(&mut specs, n("mlp/fc1_w"), bb, vec![mlp, d], tn, false),
            fc1_b: push(&mut specs, n("mlp/fc1_b"), bb, vec![mlp], Init::Zeros, false),
            fc2_w: push(&mut specs, n("mlp/fc2_w"), bb, vec![d, mlp], tn, false),
            fc2_b: push(&mut specs, n("mlp/fc2_b"), bb, vec![d], Init::Zeros, false),
        });
    }

    let mut gba_idx = Vec::new();
    if cfg.use_gba {
        for i in 0..l {
            let n = |s: &str| format!("gba/block{}/{}", i, s);
            gba_idx.push(GbaIdx {
                down_w: push(&mut specs, n("down_w"), Group::Gba, vec![cfg.gba_dim, d], tn, false),
                down_b: push(&mut specs, n("down_b"), Group::Gba, vec![cfg.gba_dim], Init::Zeros, false),
                // Zero up-projection: the adapter starts as an exact no-op.
                up_w: push(&mut specs, n("up_w"), Group::Gba, vec![d, cfg.gba_dim], Init::Zeros, false),
                up_b: push(&mut specs, n("up_b"), Group::Gba, vec![d], Init::Zeros, false),
                sc: push(&mut specs, n("sc"), Group::Gba, vec![1], Init::Const(1.0), false),
            });
        }
    }

    let mut lsa_head = None;
    let mut mhca = Vec::new();
    if cfg.use_lsa {
        let lg = Group::Lsa;
        let conv_bn = |specs: &mut Vec<ParamSpec>,
                           buffers: &mut Vec<BufferSpec>,
                           name: &str,
                           cin: usize,
                           cout: usize,
                           k: usize|
         -> ConvBnIdx {
            let w = push(
                specs,
                format!("lsa/head/{}/w", name),
                lg,
                vec![cout, cin, k, k],
                Init::HeNormal { fan_in: cin * k * k },
                false,
            );
            let b = push(specs, format!("lsa/head/{}/b", name), lg, vec![cout], Init::Zeros, false);
            let gamma = push(specs, format!("lsa/head/{}/bn_gamma", name), lg, vec![cout], Init::Ones, false);
            let beta = push(specs, format!("lsa/head/{}/bn_beta", name), lg, vec![cout], Init::Zeros, false);
            let stats = buffers.len() / 2;
            buffers.push(BufferSpec {
                name: format!("lsa/head/{}/bn_mean", name),
                shape: vec![cout],
                fill: 0.0,
            });
            buffers.push(BufferSpec {
                name: format!("lsa/head/{}/bn_var", name),
                shape: vec![cout],
                fill: 1.0,
            });
            ConvBnIdx { w, b, gamma, beta, stats }
        };

        let stem = [
            conv_bn(&mut specs, &mut buffers, "conv0_1", cfg.channels, STEM_CHANNELS, CONV_KERNEL),
            conv_bn(&mut specs, &mut buffers, "conv0_2", STEM_CHANNELS, STEM_CHANNELS, CONV_KERNEL),
            conv_bn(&mut specs, &mut buffers, "conv0_3", STEM_CHANNELS, STEM_CHANNELS, CONV_KERNEL),
        ];
        let conv1 = conv_bn(&mut specs, &mut buffers, "conv1", STEM_CHANNELS, PYRAMID_CHANNELS[0], CONV_KERNEL);
        let conv2 = conv_bn(&mut specs, &mut buffers, "conv2", PYRAMID_CHANNELS[0], PYRAMID_CHANNELS[1], CONV_KERNEL);
        let conv3 = conv_bn(&mut specs, &mut buffers, "conv3", PYRAMID_CHANNELS[1], PYRAMID_CHANNELS[2], CONV_KERNEL);
        let mut proj_w = [0usize; 3];
        let mut proj_b = [0usize; 3];
        for (i, &cin) in PYRAMID_CHANNELS.iter().enumerate() {
            proj_w[i] = push(
                &mut specs,
                format!("lsa/head/proj{}/w", i + 1),
                lg,
                vec![d, cin, 1, 1],
                tn,
                false,
            );
            proj_b[i] = push(&mut specs, format!("lsa/head/proj{}/b", i + 1), lg, vec![d], Init::Zeros, false);
        }
        lsa_head = Some(LsaHeadIdx { stem, conv1, conv2, conv3, proj_w, proj_b });

        for s in 0..cfg.stages {
            let mut mk = |role: &str| -> MhcaIdx {
                let n = |p: &str| format!("lsa/stage{}/{}/{}", s, role, p);
                MhcaIdx {
                    ln_q_gamma: push(&mut specs, n("ln_q/gamma"), lg, vec![d], Init::Ones, false),
                    ln_q_beta: push(&mut specs, n("ln_q/beta"), lg, vec![d], Init::Zeros, false),
                    ln_kv_gamma: push(&mut specs, n("ln_kv/gamma"), lg, vec![d], Init::Ones, false),
                    ln_kv_beta: push(&mut specs, n("ln_kv/beta"), lg, vec![d], Init::Zeros, false),
                    q_w: push(&mut specs, n("q_w"), lg, vec![d, d], tn, false),
                    q_b: push(&mut specs, n("q_b"), lg, vec![d], Init::Zeros, false),
                    k_w: push(&mut specs, n("k_w"), lg, vec![d, d], tn, false),
                    k_b: push(&mut specs, n("k_b"), lg, vec![d], Init::Zeros, false),
                    v_w: push(&mut specs, n("v_w"), lg, vec![d, d], tn, false),
                    v_b: push(&mut specs, n("v_b"), lg, vec![d], Init::Zeros, false),
                    // Zero output projection preserves the pretrained
                    // stream at step 0.
                    out_w: push(&mut specs, n("out_w"), lg, vec![d, d], Init::Zeros, false),
                    out_b: push(&mut specs, n("out_b"), lg, vec![d], Init::Zeros, false),
                }
            };
            let inject = mk("inject");
            let extract = mk("extract");
            mhca.push((inject, extract));
        }
    }

    let head_w = push(&mut specs, "head/w".into(), Group::Head, vec![cfg.num_classes, d], tn, false);
    let head_b = push(&mut specs, "head/b".into(), Group::Head, vec![cfg.num_classes], Init::Zeros, false);

    Ok(Plan {
        specs,
        buffers,
        layout: Layout {
            patch_w,
            patch_b,
            pos,
            blocks,
            gba: gba_idx,
            lsa_head,
            mhca,
            head_w,
            head_b,
        },
    })
}

/// Named parameter specs for a config, without allocating any tensor data.
pub fn param_schema(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    Ok(build_plan(cfg)?.specs)
}

/// Buffer specs (running statistics) for a config.
pub fn buffer_schema(cfg: &ModelConfig) -> Result<Vec<BufferSpec>> {
    Ok(build_plan(cfg)?.buffers)
}

/// Per-group and per-policy parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub backbone: usize,
    pub gba: usize,
    pub lsa: usize,
    pub head: usize,
    pub trainable_total: usize,
    pub total: usize,
}

/// Exact counts for a configuration (running statistics are state, not
/// parameters, and are excluded).
pub fn count_params(cfg: &ModelConfig) -> Result<ParamCounts> {
    let specs = param_schema(cfg)?;
    let mut c = ParamCounts { backbone: 0, gba: 0, lsa: 0, head: 0, trainable_total: 0, total: 0 };
    for s in &specs {
        let n = s.numel();
        match s.group {
            Group::Backbone => c.backbone += n,
            Group::Gba => c.gba += n,
            Group::Lsa => c.lsa += n,
            Group::Head => c.head += n,
        }
        if s.trainable {
            c.trainable_total += n;
        }
        c.total += n;
    }
    Ok(c)
}

/// A named weight tensor with its group and trainability flag.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub group: Group,
    pub trainable: bool,
    pub value: Tensor<T>,
}

/// Non-learnable state tensor (running statistics).
#[derive(Debug, Clone)]
pub struct StateBuffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Assembled model: config, parameters in canonical order, and state.
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: Vec<Param<T>>,
    pub buffers: Vec<StateBuffer<T>>,
    layout: Layout,
}

/// Options for one recorded forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOpts {
    /// Bind trainable parameters as gradient sinks.
    pub record_grads: bool,
    /// Retain the gradient of the deepest pyramid activation (saliency).
    pub retain_pyramid_grad: bool,
}

/// Handles into the recorded graph of one forward pass.
pub struct ForwardRun<T: Scalar> {
    pub graph: Graph<T>,
    pub logits: Var,
    /// The classifier's pooled input, one D-vector per sample.
    pub pooled: Var,
    /// Final backbone token stream.
    pub vit_tokens: Var,
    /// Final spatial token stream (when the spatial adapter is enabled).
    pub spa_tokens: Option<Var>,
    /// Deepest pyramid activation (when requested and available).
    pub pyramid_tap: Option<Var>,
    /// Leaf var of every parameter, indexed like `Model::params`.
    pub param_vars: Vec<Var>,
    /// Batch-norm nodes paired with their (mean, var) buffer indices.
    pub bn_updates: Vec<(usize, usize, Var)>,
}

impl<T: Scalar> Model<T> {
    /// Build a model with freshly initialized weights.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let plan = build_plan(cfg)?;
        let mut rng = init::rng(seed);
        let params = plan
            .specs
            .iter()
            .map(|s| {
                let value = match s.init {
                    Init::TruncNormal(std) => init::trunc_normal(&mut rng, &s.shape, std),
                    Init::HeNormal { fan_in } => init::he_normal(&mut rng, &s.shape, fan_in),
                    Init::Zeros => Tensor::zeros(&s.shape),
                    Init::Ones => Tensor::filled(&s.shape, T::ONE),
                    Init::Const(c) => Tensor::filled(&s.shape, T::from_f64(c)),
                };
                Param { name: s.name.clone(), group: s.group, trainable: s.trainable, value }
            })
            .collect();
        let buffers = plan
            .buffers
            .iter()
            .map(|b| StateBuffer { name: b.name.clone(), value: Tensor::filled(&b.shape, T::from_f64(b.fill)) })
            .collect();
        Ok(Self { config: cfg.clone(), params, buffers, layout: plan.layout })
    }

    pub fn counts(&self) -> ParamCounts {
        count_params(&self.config).expect("config was validated at build time")
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Re-randomize zero-initialized projection weights. The gradient
    /// checker uses this so no parameter sits in a gradient shadow (a zero
    /// up- or output-projection would zero the gradients of everything
    /// behind it).
    pub fn randomize_zero_inits(&mut self, seed: u64, std: f64) {
        let mut rng = init::rng(seed);
        for p in &mut self.params {
            let zeroed = p.value.data().iter().all(|v| *v == T::ZERO);
            let is_weight = p.value.rank() >= 2;
            if zeroed && is_weight {
                p.value = init::trunc_normal(&mut rng, &p.value.shape().to_vec(), std);
            }
        }
    }

    fn block_vars(&self, vars: &[Var], idx: &BlockIdx) -> BlockVars {
        BlockVars {
            ln1_gamma: vars[idx.ln1_gamma],
            ln1_beta: vars[idx.ln1_beta],
            qkv_w: vars[idx.qkv_w],
            qkv_b: vars[idx.qkv_b],
            proj_w: vars[idx.proj_w],
            proj_b: vars[idx.proj_b],
            ln2_gamma: vars[idx.ln2_gamma],
            ln2_beta: vars[idx.ln2_beta],
            fc1_w: vars[idx.fc1_w],
            fc1_b: vars[idx.fc1_b],
            fc2_w: vars[idx.fc2_w],
            fc2_b: vars[idx.fc2_b],
        }
    }

    fn mhca_vars(&self, vars: &[Var], idx: &MhcaIdx) -> MhcaVars {
        MhcaVars {
            ln_q_gamma: vars[idx.ln_q_gamma],
            ln_q_beta: vars[idx.ln_q_beta],
            ln_kv_gamma: vars[idx.ln_kv_gamma],
            ln_kv_beta: vars[idx.ln_kv_beta],
            q_w: vars[idx.q_w],
            q_b: vars[idx.q_b],
            k_w: vars[idx.k_w],
            k_b: vars[idx.k_b],
            v_w: vars[idx.v_w],
            v_b: vars[idx.v_b],
            out_w: vars[idx.out_w],
            out_b: vars[idx.out_b],
        }
    }

    /// Record one forward pass over a batch of images.
    pub fn forward(&self, images: &Tensor<T>, mode: Mode, opts: ForwardOpts) -> Result<ForwardRun<T>> {
        let cfg = &self.config;
        let s = images.shape();
        if s.len() != 4 || s[1] != cfg.channels || s[2] != cfg.image.0 || s[3] != cfg.image.1 {
            return Err(Error::Shape(format!(
                "forward: images {:?} do not match configured {}x{}x{}",
                s, cfg.channels, cfg.image.0, cfg.image.1
            )));
        }
        let mut g = Graph::new(mode);
        let param_vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), opts.record_grads && p.trainable))
            .collect();
        let image = g.constant(images.clone());
        let lt = &self.layout;

        let mut bn_updates = Vec::new();
        let mut pyramid_tap = None;
        let mut f_spa = None;
        if let Some(head) = &lt.lsa_head {
            let cb = |i: &ConvBnIdx| ConvBnVars {
                w: param_vars[i.w],
                b: param_vars[i.b],
                gamma: param_vars[i.gamma],
                beta: param_vars[i.beta],
            };
            let head_vars = LsaHeadVars {
                stem: [cb(&head.stem[0]), cb(&head.stem[1]), cb(&head.stem[2])],
                conv1: cb(&head.conv1),
                conv2: cb(&head.conv2),
                conv3: cb(&head.conv3),
                proj1_w: param_vars[head.proj_w[0]],
                proj1_b: param_vars[head.proj_b[0]],
                proj2_w: param_vars[head.proj_w[1]],
                proj2_b: param_vars[head.proj_b[1]],
                proj3_w: param_vars[head.proj_w[2]],
                proj3_b: param_vars[head.proj_b[2]],
            };
            let order = [&head.stem[0], &head.stem[1], &head.stem[2], &head.conv1, &head.conv2, &head.conv3];
            let stats = LsaHeadStats {
                mean: [
                    self.buffers[order[0].stats * 2].value.data(),
                    self.buffers[order[1].stats * 2].value.data(),
                    self.buffers[order[2].stats * 2].value.data(),
                    self.buffers[order[3].stats * 2].value.data(),
                    self.buffers[order[4].stats * 2].value.data(),
                    self.buffers[order[5].stats * 2].value.data(),
                ],
                var: [
                    self.buffers[order[0].stats * 2 + 1].value.data(),
                    self.buffers[order[1].stats * 2 + 1].value.data(),
                    self.buffers[order[2].stats * 2 + 1].value.data(),
                    self.buffers[order[3].stats * 2 + 1].value.data(),
                    self.buffers[order[4].stats * 2 + 1].value.data(),
                    self.buffers[order[5].stats * 2 + 1].value.data(),
                ],
            };
            let out = lsa::lsa_head(&mut g, image, &head_vars, &stats)?;
            if opts.retain_pyramid_grad {
                g.retain_grad(out.last_activation);
                pyramid_tap = Some(out.last_activation);
            }
            for (i, bn) in out.bn_nodes.iter().enumerate() {
                let stats_idx = order[i].stats;
                bn_updates.push((stats_idx * 2, stats_idx * 2 + 1, *bn));
            }
            f_spa = Some(out.tokens);
        }

        let mut f_vit = vit::patch_embed(
            &mut g,
            image,
            param_vars[lt.patch_w],
            param_vars[lt.patch_b],
            param_vars[lt.pos],
            cfg.patch,
        )?;

        let stages = vit::partition_stages(cfg.blocks, cfg.stages)?;
        for (si, range) in stages.iter().enumerate() {
            if let (Some(spa), Some((inject, _))) = (f_spa, lt.mhca.get(si)) {
                let iv = self.mhca_vars(&param_vars, inject);
                f_vit = lsa::lsa_inject(&mut g, f_vit, spa, &iv, cfg.lsa_heads)?;
            }
            for bi in range.clone() {
                let bv = self.block_vars(&param_vars, &lt.blocks[bi]);
                let f_prime = vit::mhsa_block(&mut g, f_vit, &bv, cfg.heads)?;
                let delta = if cfg.use_gba {
                    let gv = GbaVars {
                        down_w: param_vars[lt.gba[bi].down_w],
                        down_b: param_vars[lt.gba[bi].down_b],
                        up_w: param_vars[lt.gba[bi].up_w],
                        up_b: param_vars[lt.gba[bi].up_b],
                        sc: param_vars[lt.gba[bi].sc],
                    };
                    Some(gba::gba_forward(&mut g, f_prime, &gv)?)
                } else {
                    None
                };
                f_vit = vit::mlp_block(&mut g, f_prime, &bv, delta)?;
            }
            if let (Some(spa), Some((_, extract))) = (f_spa, lt.mhca.get(si)) {
                let ev = self.mhca_vars(&param_vars, extract);
                f_spa = Some(lsa::lsa_extract(&mut g, spa, f_vit, &ev, cfg.lsa_heads)?);
            }
        }

        let class_input = f_spa.unwrap_or(f_vit);
        let pooled = g.mean_pool_tokens(class_input)?;
        let bsz = images.shape()[0];
        let as_tokens = g.reshape(pooled, &[bsz, 1, cfg.width])?;
        let logits3 = g.linear(as_tokens, param_vars[lt.head_w], param_vars[lt.head_b])?;
        let logits = g.reshape(logits3, &[bsz, cfg.num_classes])?;

        Ok(ForwardRun {
            graph: g,
            logits,
            pooled,
            vit_tokens: f_vit,
            spa_tokens: f_spa,
            pyramid_tap,
            param_vars,
            bn_updates,
        })
    }

    /// Eval-mode logits as a plain tensor.
    pub fn forward_logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let run = self.forward(images, Mode::Eval, ForwardOpts::default())?;
        Ok(run.graph.value(run.logits).clone())
    }

    /// The adapter-free frozen backbone forward: patch embedding and all
    /// blocks only. Used by the init-identity check.
    pub fn plain_vit_forward(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let cfg = &self.config;
        let mut g = Graph::new(Mode::Eval);
        let param_vars: Vec<Var> = self.params.iter().map(|p| g.constant(p.value.clone())).collect();
        let image = g.constant(images.clone());
        let lt = &self.layout;
        let mut f_vit = vit::patch_embed(
            &mut g,
            image,
            param_vars[lt.patch_w],
            param_vars[lt.patch_b],
            param_vars[lt.pos],
            cfg.patch,
        )?;
        for idx in &lt.blocks {
            let bv = self.block_vars(&param_vars, idx);
            let f_prime = vit::mhsa_block(&mut g, f_vit, &bv, cfg.heads)?;
            f_vit = vit::mlp_block(&mut g, f_prime, &bv, None)?;
        }
        Ok(g.value(f_vit).clone())
    }

    /// Fold train-mode batch statistics into the running buffers
    /// (exponential moving average, unbiased variance).
    pub fn update_bn_stats(&mut self, run: &ForwardRun<T>, momentum: f64) {
        for &(mean_idx, var_idx, bn) in &run.bn_updates {
            if let Some((batch_mean, batch_var)) = run.graph.bn_batch_stats(bn) {
                let batch_mean = batch_mean.to_vec();
                let batch_var = batch_var.to_vec();
                let shape = run.graph.shape(bn);
                let n = (shape[0] * shape[2] * shape[3]) as f64;
                let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let m = T::from_f64(momentum);
                let one_m = T::from_f64(1.0 - momentum);
                let rm = self.buffers[mean_idx].value.data_mut();
                for (r, &b) in rm.iter_mut().zip(&batch_mean) {
                    *r = one_m * *r + m * b;
                }
                let ub = T::from_f64(unbias);
                let rv = self.buffers[var_idx].value.data_mut();
                for (r, &b) in rv.iter_mut().zip(&batch_var) {
                    *r = one_m * *r + m * (b * ub);
                }
            }
        }
    }
}
