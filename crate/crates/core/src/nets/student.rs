use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{trunc_normal, Bound, Params};
use crate::error::{Error, Result};
use crate::kv;
use crate::tensor::{Element, Graph, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// Number of non-patch tokens (class + distillation).
pub const SPECIAL_TOKENS: usize = 2;

/// Vision transformer with class and distillation tokens and pre-norm blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct VitConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            in_channels: 1,
            patch_size: 4,
            embed_dim: 64,
            num_heads: 4,
            num_layers: 4,
            mlp_ratio: 4,
            num_classes: 10,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.image_size,
            self.in_channels,
            self.patch_size,
            self.embed_dim,
            self.num_heads,
            self.num_layers,
            self.mlp_ratio,
            self.num_classes,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("student dimensions must all be positive".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    /// Side of the patch grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn num_tokens(&self) -> usize {
        self.num_patches() + SPECIAL_TOKENS
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    pub fn init_params<T: Element>(&self, seed: u64) -> Result<Params<T>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.embed_dim;
        let hidden = d * self.mlp_ratio;
        let c = self.num_classes;
        let mut p = Params::new();
        let pd = self.patch_dim();
        p.insert("patch_embed.weight", trunc_normal(&mut rng, &[pd, d], 0.02));
        p.insert("patch_embed.bias", Tensor::zeros(&[d]));
        p.insert("cls_token", trunc_normal(&mut rng, &[1, d], 0.02));
        p.insert("dist_token", trunc_normal(&mut rng, &[1, d], 0.02));
        p.insert("pos_embed", trunc_normal(&mut rng, &[self.num_tokens(), d], 0.02));
        for l in 0..self.num_layers {
            let b = format!("blocks.{l}");
            p.insert(format!("{b}.ln1.weight"), Tensor::full(&[d], T::one()));
            p.insert(format!("{b}.ln1.bias"), Tensor::zeros(&[d]));
            p.insert(format!("{b}.attn.qkv.weight"), trunc_normal(&mut rng, &[d, 3 * d], 0.02));
            p.insert(format!("{b}.attn.qkv.bias"), Tensor::zeros(&[3 * d]));
            p.insert(format!("{b}.attn.proj.weight"), trunc_normal(&mut rng, &[d, d], 0.02));
            p.insert(format!("{b}.attn.proj.bias"), Tensor::zeros(&[d]));
            p.insert(format!("{b}.ln2.weight"), Tensor::full(&[d], T::one()));
            p.insert(format!("{b}.ln2.bias"), Tensor::zeros(&[d]));
            p.insert(format!("{b}.mlp.fc1.weight"), trunc_normal(&mut rng, &[d, hidden], 0.02));
            p.insert(format!("{b}.mlp.fc1.bias"), Tensor::zeros(&[hidden]));
            p.insert(format!("{b}.mlp.fc2.weight"), trunc_normal(&mut rng, &[hidden, d], 0.02));
            p.insert(format!("{b}.mlp.fc2.bias"), Tensor::zeros(&[d]));
        }
        p.insert("norm.weight", Tensor::full(&[d], T::one()));
        p.insert("norm.bias", Tensor::zeros(&[d]));
        p.insert("head.weight", trunc_normal(&mut rng, &[d, c], 0.02));
        p.insert("head.bias", Tensor::zeros(&[c]));
        p.insert("head_dist.weight", trunc_normal(&mut rng, &[d, c], 0.02));
        p.insert("head_dist.bias", Tensor::zeros(&[c]));
        Ok(p)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "model=student\nimage_size={}\nin_channels={}\npatch_size={}\nembed_dim={}\nnum_heads={}\nnum_layers={}\nmlp_ratio={}\nnum_classes={}\n",
            self.image_size,
            self.in_channels,
            self.patch_size,
            self.embed_dim,
            self.num_heads,
            self.num_layers,
            self.mlp_ratio,
            self.num_classes
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let e = kv::parse(text)?;
        if kv::require(&e, "model")?.value != "student" {
            return Err(Error::Config("checkpoint does not hold a student".into()));
        }
        let cfg = Self {
            image_size: kv::value(kv::require(&e, "image_size")?)?,
            in_channels: kv::value(kv::require(&e, "in_channels")?)?,
            patch_size: kv::value(kv::require(&e, "patch_size")?)?,
            embed_dim: kv::value(kv::require(&e, "embed_dim")?)?,
            num_heads: kv::value(kv::require(&e, "num_heads")?)?,
            num_layers: kv::value(kv::require(&e, "num_layers")?)?,
            mlp_ratio: kv::value(kv::require(&e, "mlp_ratio")?)?,
            num_classes: kv::value(kv::require(&e, "num_classes")?)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub struct StudentForward {
    pub class_logits: Var,
    pub distill_logits: Var,
    /// `[b, g, g, classes]`.
    pub patch_logits: Var,
    /// Per layer, attention probabilities `[b * heads, tokens, tokens]`.
    pub attention: Vec<Var>,
}

/// Materialized student predictions.
#[derive(Clone, Debug)]
pub struct StudentOutputs<T> {
    pub class_logits: Tensor<T>,
    pub distill_logits: Tensor<T>,
    pub patch_logits: Tensor<T>,
    /// Per layer, `[b, heads, tokens, tokens]`.
    pub attention: Vec<Tensor<T>>,
}

impl StudentForward {
    pub fn outputs<T: Element>(&self, g: &Graph<T>, cfg: &VitConfig) -> Result<StudentOutputs<T>> {
        let b = g.shape(self.class_logits)[0];
        let t = cfg.num_tokens();
        let attention = self
            .attention
            .iter()
            .map(|&a| g.value(a).reshape(&[b, cfg.num_heads, t, t]))
            .collect::<Result<_>>()?;
        Ok(StudentOutputs {
            class_logits: g.value(self.class_logits).clone(),
            distill_logits: g.value(self.distill_logits).clone(),
            patch_logits: g.value(self.patch_logits).clone(),
            attention,
        })
    }
}

fn attention_block<T: Element>(
    g: &mut Graph<T>,
    cfg: &VitConfig,
    bound: &Bound,
    prefix: &str,
    x: Var,
    b: usize,
) -> Result<(Var, Var)> {
    let (t, d, h, hd) = (cfg.num_tokens(), cfg.embed_dim, cfg.num_heads, cfg.head_dim());
    let qkv = g.linear(
        x,
        bound.var(&format!("{prefix}.qkv.weight"))?,
        bound.var(&format!("{prefix}.qkv.bias"))?,
    )?;
    let qkv = g.reshape(qkv, &[b, t, 3, h, hd])?;
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
    let qkv = g.reshape(qkv, &[3, b * h, t, hd])?;
    let q = g.narrow(qkv, 0, 0, 1)?;
    let q = g.reshape(q, &[b * h, t, hd])?;
    let k = g.narrow(qkv, 0, 1, 1)?;
    let k = g.reshape(k, &[b * h, t, hd])?;
    let v = g.narrow(qkv, 0, 2, 1)?;
    let v = g.reshape(v, &[b * h, t, hd])?;
    let kt = g.permute(k, &[0, 2, 1])?;
    let scores = g.bmm(q, kt)?;
    let scores = g.scale(scores, 1.0 / (hd as f64).sqrt())?;
    let attn = g.softmax(scores)?;
    let ctx = g.bmm(attn, v)?;
    let ctx = g.reshape(ctx, &[b, h, t, hd])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, t, d])?;
    let out = g.linear(
        ctx,
        bound.var(&format!("{prefix}.proj.weight"))?,
        bound.var(&format!("{prefix}.proj.bias"))?,
    )?;
    Ok((out, attn))
}

fn layer_norm<T: Element>(g: &mut Graph<T>, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = bound.var(&format!("{prefix}.weight"))?;
    let b = bound.var(&format!("{prefix}.bias"))?;
    g.layer_norm(x, w, b, LN_EPS)
}

pub fn student_forward<T: Element>(
    g: &mut Graph<T>,
    cfg: &VitConfig,
    bound: &Bound,
    images: Var,
) -> Result<StudentForward> {
    cfg.validate()?;
    let shape = g.shape(images).to_vec();
    let expect = [cfg.in_channels, cfg.image_size, cfg.image_size];
    if shape.len() != 4 || shape[1..] != expect {
        return Err(Error::Config(format!(
            "student expects images [b, {}, {}, {}], got {shape:?}",
            expect[0], expect[1], expect[2]
        )));
    }
    let b = shape[0];
    let (p, gs, d) = (cfg.patch_size, cfg.grid(), cfg.embed_dim);

    // Patchify: [b,k,g,p,g,p] -> [b,g,g,k,p,p] -> [b,n,k*p*p].
    let x = g.reshape(images, &[b, cfg.in_channels, gs, p, gs, p])?;
    let x = g.permute(x, &[0, 2, 4, 1, 3, 5])?;
    let x = g.reshape(x, &[b, cfg.num_patches(), cfg.patch_dim()])?;
    let patches = g.linear(x, bound.var("patch_embed.weight")?, bound.var("patch_embed.bias")?)?;

    let cls = g.repeat_batch(bound.var("cls_token")?, b)?;
    let dist = g.repeat_batch(bound.var("dist_token")?, b)?;
    let mut x = g.concat(&[cls, dist, patches], 1)?;
    x = g.add_broadcast(x, bound.var("pos_embed")?)?;

    let mut attention = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let prefix = format!("blocks.{l}");
        let h = layer_norm(g, bound, &format!("{prefix}.ln1"), x)?;
        let (a, attn) = attention_block(g, cfg, bound, &format!("{prefix}.attn"), h, b)?;
        attention.push(attn);
        x = g.add(x, a)?;
        let h = layer_norm(g, bound, &format!("{prefix}.ln2"), x)?;
        let h = g.linear(
            h,
            bound.var(&format!("{prefix}.mlp.fc1.weight"))?,
            bound.var(&format!("{prefix}.mlp.fc1.bias"))?,
        )?;
        let h = g.gelu(h)?;
        let h = g.linear(
            h,
            bound.var(&format!("{prefix}.mlp.fc2.weight"))?,
            bound.var(&format!("{prefix}.mlp.fc2.bias"))?,
        )?;
        x = g.add(x, h)?;
    }
    let x = layer_norm(g, bound, "norm", x)?;

    let (w_head, b_head) = (bound.var("head.weight")?, bound.var("head.bias")?);
    let cls_feat = g.narrow(x, 1, 0, 1)?;
    let cls_feat = g.reshape(cls_feat, &[b, d])?;
    let class_logits = g.linear(cls_feat, w_head, b_head)?;

    let dist_feat = g.narrow(x, 1, 1, 1)?;
    let dist_feat = g.reshape(dist_feat, &[b, d])?;
    let distill_logits = g.linear(dist_feat, bound.var("head_dist.weight")?, bound.var("head_dist.bias")?)?;

    let patch_feat = g.narrow(x, 1, SPECIAL_TOKENS, cfg.num_patches())?;
    let patch_logits = g.linear(patch_feat, w_head, b_head)?;
    let patch_logits = g.reshape(patch_logits, &[b, gs, gs, cfg.num_classes])?;

    Ok(StudentForward {
        class_logits,
        distill_logits,
        patch_logits,
        attention,
    })
}

/// Inference without gradient tracking.
pub fn student_infer<T: Element>(
    cfg: &VitConfig,
    params: &Params<T>,
    images: &Tensor<T>,
) -> Result<StudentOutputs<T>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(images.clone());
    let fwd = student_forward(&mut g, cfg, &bound, x)?;
    fwd.outputs(&g, cfg)
}
