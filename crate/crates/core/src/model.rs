//! Network assembly: stem, shared trunk, per-AU branches and heads.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use ac2d_tensor::{Conv2dSpec, Float, Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_regression_loss, average_attention, channel_regression_loss, BlockConfig, Emsa2Block};
use crate::causal::{BankPolicy, CausalMode, InterventionHead, PrototypeBank};
use crate::error::{Error, Result};
use crate::landmarks::Scheme;
use crate::metrics::{au_detection_loss, total_loss, LabelStats, DEFAULT_LAMBDA_A};
use crate::nn::{to_map, to_tokens, Builder, Conv, LayerNorm, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    B,
    Av,
    Ae,
    Ac2d,
    AvCes,
    AvCsd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Constraint {
    None,
    Average,
    EveryChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Intervention {
    None,
    PerAu(BankPolicy),
    Shared(BankPolicy),
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::B,
        Variant::Av,
        Variant::Ae,
        Variant::Ac2d,
        Variant::AvCes,
        Variant::AvCsd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::B => "B",
            Variant::Av => "Av",
            Variant::Ae => "Ae",
            Variant::Ac2d => "AC2D",
            Variant::AvCes => "AvCes",
            Variant::AvCsd => "AvCsd",
        }
    }

    pub fn constraint(self) -> Constraint {
        match self {
            Variant::B => Constraint::None,
            Variant::Ae => Constraint::EveryChannel,
            _ => Constraint::Average,
        }
    }

    pub fn intervention(self) -> Intervention {
        match self {
            Variant::B | Variant::Av | Variant::Ae => Intervention::None,
            Variant::Ac2d => Intervention::PerAu(BankPolicy::Dynamic),
            Variant::AvCes => Intervention::PerAu(BankPolicy::Static),
            Variant::AvCsd => Intervention::Shared(BankPolicy::Dynamic),
        }
    }

    pub fn bank_policy(self) -> Option<BankPolicy> {
        match self.intervention() {
            Intervention::None => None,
            Intervention::PerAu(p) | Intervention::Shared(p) => Some(p),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_alphanumeric() || *c == '²' || *c == 'ᵛ' || *c == 'ᵉ' || *c == 'ˢ' || *c == 'ᵈ')
            .collect::<String>()
            .replace('²', "2")
            .replace('ᵛ', "v")
            .replace('ᵉ', "e")
            .replace('ˢ', "s")
            .replace('ᵈ', "d")
            .to_ascii_lowercase();
        let key = key.strip_suffix("net").unwrap_or(&key);
        Ok(match key {
            "b" => Variant::B,
            "av" => Variant::Av,
            "ae" => Variant::Ae,
            "ac2d" => Variant::Ac2d,
            "avces" => Variant::AvCes,
            "avcsd" => Variant::AvCsd,
            _ => return Err(Error::Usage(format!("unknown variant {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    Desk,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            _ => Err(Error::Usage(format!("unknown profile {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Branch width.
    pub c: usize,
    /// Branch heads.
    pub k: usize,
    /// Crop side.
    pub l: usize,
    /// Blocks per stage.
    pub n: [usize; 3],
    /// Prior standard deviation in grid cells.
    pub delta: f64,
    pub lambda_a: f64,
    pub aus: Vec<u32>,
    pub scheme: Scheme,
    /// Width of the stem and the two shared stages.
    pub trunk_width: usize,
    pub trunk_heads: [usize; 2],
    pub reductions: [usize; 2],
    pub mlp_ratio: usize,
    pub variant: Variant,
    pub causal_mode: CausalMode,
    pub seed: u64,
}

impl ModelConfig {
    pub fn profile(profile: Profile, aus: Vec<u32>) -> Self {
        match profile {
            Profile::Paper => Self {
                c: 64,
                k: 4,
                l: 176,
                n: [1, 6, 3],
                delta: 3.0,
                lambda_a: DEFAULT_LAMBDA_A,
                aus,
                scheme: Scheme::P49,
                trunk_width: 32,
                trunk_heads: [1, 2],
                reductions: [2, 2],
                mlp_ratio: 4,
                variant: Variant::Ac2d,
                causal_mode: CausalMode::Literal,
                seed: 0,
            },
            Profile::Desk => Self {
                c: 32,
                k: 4,
                l: 48,
                n: [1, 2, 2],
                delta: 1.0,
                trunk_width: 16,
                mlp_ratio: 2,
                ..Self::profile(Profile::Paper, aus)
            },
        }
    }

    pub fn m(&self) -> usize {
        self.aus.len()
    }

    /// Side of the stage-3 token grid.
    pub fn grid(&self) -> usize {
        self.l / 8
    }

    /// Index of the constrained stage-3 block.
    pub fn constrained_block(&self) -> usize {
        self.n[2] - 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if self.l == 0 || self.l % 8 != 0 {
            return bad("l", format!("{} is not a positive multiple of 8", self.l));
        }
        if self.k == 0 || self.c % self.k != 0 {
            return bad("c", format!("{} is not divisible by k = {}", self.c, self.k));
        }
        if self.n[2] < 2 {
            return bad("n3", format!("{} leaves no block before the last", self.n[2]));
        }
        if self.aus.is_empty() {
            return bad("aus", "no AUs configured".into());
        }
        if !(self.delta > 0.0) {
            return bad("delta", format!("{} is not positive", self.delta));
        }
        if !(self.lambda_a >= 0.0) {
            return bad("lambda_a", format!("{} is negative", self.lambda_a));
        }
        for (i, &h) in self.trunk_heads.iter().enumerate() {
            if h == 0 || self.trunk_width % h != 0 {
                return bad("trunk_heads", format!("stage {} width {} is not divisible by {h}", i + 1, self.trunk_width));
            }
        }
        for (i, &r) in self.reductions.iter().enumerate() {
            let side = self.l >> (i + 2);
            if r == 0 || side % r != 0 {
                return bad("reductions", format!("stage {} grid {side} is not divisible by {r}", i + 1));
            }
        }
        if let CausalMode::Dictionary { entries: 0 } = self.causal_mode {
            return bad("causal_mode", "dictionary needs at least one entry".into());
        }
        Ok(())
    }
}

/// Returns `config` with the flags of the named ablation variant.
pub fn select_variant(config: &ModelConfig, name: &str) -> Result<ModelConfig> {
    Ok(ModelConfig {
        variant: name.parse()?,
        ..config.clone()
    })
}

#[derive(Debug, Clone)]
struct Stage {
    embed: Conv,
    norm: LayerNorm,
    blocks: Vec<Emsa2Block>,
}

#[derive(Debug, Clone)]
struct Branch {
    embed: Conv,
    norm: LayerNorm,
    blocks: Vec<Emsa2Block>,
    final_norm: LayerNorm,
    head: Option<InterventionHead>,
}

pub struct Model<T: Float> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub banks: Vec<PrototypeBank>,
    stem: Conv,
    stem_norm: LayerNorm,
    stages: Vec<Stage>,
    branches: Vec<Branch>,
    shared_head: Option<InterventionHead>,
}

/// Per-forward results. Per-AU vectors are in configuration order.
pub struct ForwardOutput<'g, T: Float> {
    /// Row-major `B × m`.
    pub probs: Vec<Vec<f64>>,
    /// Probability tensors `[B, m_i]` whose columns concatenate to the AU list.
    pub prob_vars: Vec<Var<'g, T>>,
    /// `[B, n]` per AU.
    pub avg_attention: Vec<Var<'g, T>>,
    /// `[B, k, n, n]` per AU.
    pub attention: Vec<Var<'g, T>>,
    /// Inputs to the prediction heads, one per bank.
    pub features: Vec<Var<'g, T>>,
    pub alphas: Vec<Var<'g, T>>,
    pub loss_u: Option<Var<'g, T>>,
    pub loss_a: Option<Var<'g, T>>,
    pub loss: Option<Var<'g, T>>,
}

impl<T: Float> Model<T> {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::default();
        let mut b = Builder::new(&mut params, &mut rng);
        let w = config.trunk_width;
        let stem = Conv::new(&mut b, "stem.conv", w, 3, 3, Conv2dSpec::new(2, 1));
        let stem_norm = LayerNorm::new(&mut b, "stem.norm", w);
        let mut stages = Vec::new();
        for s in 0..2 {
            let cfg = BlockConfig {
                dim: w,
                heads: config.trunk_heads[s],
                reduction: config.reductions[s],
                mlp_ratio: config.mlp_ratio,
            };
            let stage = b.scoped(&format!("stage{}", s + 1), |b| -> Result<Stage> {
                Ok(Stage {
                    embed: Conv::new(b, "embed", w, w, 3, Conv2dSpec::new(2, 1)),
                    norm: LayerNorm::new(b, "embed_norm", w),
                    blocks: (0..config.n[s])
                        .map(|i| Emsa2Block::new(b, &format!("block{i}"), cfg))
                        .collect::<Result<_>>()?,
                })
            })?;
            stages.push(stage);
        }
        let cfg3 = BlockConfig {
            dim: config.c,
            heads: config.k,
            reduction: 1,
            mlp_ratio: config.mlp_ratio,
        };
        let per_au = matches!(config.variant.intervention(), Intervention::PerAu(_));
        let mut branches = Vec::new();
        for &au in &config.aus {
            let branch = b.scoped(&format!("au{au}"), |b| -> Result<Branch> {
                Ok(Branch {
                    embed: Conv::new(b, "embed", config.c, w, 3, Conv2dSpec::new(1, 1)),
                    norm: LayerNorm::new(b, "embed_norm", config.c),
                    blocks: (0..config.n[2])
                        .map(|i| Emsa2Block::new(b, &format!("block{i}"), cfg3))
                        .collect::<Result<_>>()?,
                    final_norm: LayerNorm::new(b, "final_norm", config.c),
                    head: match config.variant.intervention() {
                        Intervention::Shared(_) => None,
                        _ => Some(InterventionHead::new(b, "head", config.c, 1, per_au)),
                    },
                })
            })?;
            branches.push(branch);
        }
        let shared_head = match config.variant.intervention() {
            Intervention::Shared(_) => Some(InterventionHead::new(&mut b, "shared_head", w, config.m(), true)),
            _ => None,
        };
        let banks = match config.variant.intervention() {
            Intervention::None => Vec::new(),
            Intervention::PerAu(_) => config.aus.iter().map(|&au| PrototypeBank::new(au, 0, config.c)).collect(),
            Intervention::Shared(_) => vec![PrototypeBank::new(0, 0, w)],
        };
        Ok(Self {
            config: config.clone(),
            params,
            banks,
            stem,
            stem_norm,
            stages,
            branches,
            shared_head,
        })
    }

    /// Resets every bank to `slots` empty slots.
    pub fn init_banks(&mut self, slots: usize) {
        for bank in &mut self.banks {
            *bank = PrototypeBank::new(bank.au, slots, bank.dim());
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Forward pass over `images` `[B, 3, l, l]`. Losses are produced when
    /// labels are given; the attention term additionally needs priors.
    pub fn forward<'g>(
        &self,
        p: &[Var<'g, T>],
        images: Var<'g, T>,
        priors: Option<&[Tensor<T>]>,
        labels: Option<(&Tensor<T>, &LabelStats)>,
    ) -> Result<ForwardOutput<'g, T>> {
        let cfg = &self.config;
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != cfg.l || s[3] != cfg.l {
            return Err(Error::Config(format!(
                "expected images [B, 3, {l}, {l}], got {s:?}",
                l = cfg.l
            )));
        }
        if let Some(pr) = priors {
            if pr.len() != cfg.m() {
                return Err(Error::Config(format!("{} prior maps for {} AUs", pr.len(), cfg.m())));
            }
        }
        let batch = s[0];
        let graph = images.graph();

        let mut side = cfg.l / 2;
        let mut x = self.stem_norm.forward(p, to_tokens(self.stem.forward(p, images)?.gelu())?)?;
        for stage in &self.stages {
            let m = stage.embed.forward(p, to_map(x, side, side)?)?;
            side /= 2;
            x = stage.norm.forward(p, to_tokens(m)?)?;
            for blk in &stage.blocks {
                x = blk.forward(p, x, side, side)?.0;
            }
        }
        let rich = x;
        let g = cfg.grid();
        debug_assert_eq!(side, g);

        let shared = self.shared_head.is_some();
        let mut out = ForwardOutput {
            probs: vec![Vec::with_capacity(cfg.m()); batch],
            prob_vars: Vec::new(),
            avg_attention: Vec::new(),
            attention: Vec::new(),
            features: Vec::new(),
            alphas: Vec::new(),
            loss_u: None,
            loss_a: None,
            loss: None,
        };
        let rich_map = to_map(rich, g, g)?;
        for (j, br) in self.branches.iter().enumerate() {
            let mut t = br.norm.forward(p, to_tokens(br.embed.forward(p, rich_map)?)?)?;
            let last = if shared { cfg.constrained_block() + 1 } else { br.blocks.len() };
            for (i, blk) in br.blocks[..last].iter().enumerate() {
                let (y, a) = blk.forward(p, t, g, g)?;
                if i == cfg.constrained_block() {
                    out.avg_attention.push(average_attention(a)?);
                    out.attention.push(a);
                }
                t = y;
            }
            if let Some(head) = &br.head {
                let f = br.final_norm.forward(p, t)?.mean_dim(1)?;
                let entries = match head.intervenes() {
                    true => Some(graph.constant(self.banks[j].entries()?)),
                    false => None,
                };
                let h = head.forward(p, f, entries)?;
                out.features.push(f);
                out.alphas.extend(h.alpha);
                out.prob_vars.push(h.logits.sigmoid());
            }
        }
        if let Some(head) = &self.shared_head {
            let f = rich.mean_dim(1)?;
            let h = head.forward(p, f, Some(graph.constant(self.banks[0].entries()?)))?;
            out.features.push(f);
            out.alphas.extend(h.alpha);
            out.prob_vars.push(h.logits.sigmoid());
        }
        for pv in &out.prob_vars {
            let v = pv.value();
            let cols = v.shape()[1];
            for (b, row) in out.probs.iter_mut().enumerate() {
                row.extend(v.data()[b * cols..(b + 1) * cols].iter().map(|x| x.as_f64()));
            }
        }

        if let (Some(pr), Constraint::Average) = (priors, cfg.variant.constraint()) {
            out.loss_a = Some(attention_regression_loss(&out.avg_attention, pr)?);
        } else if let (Some(pr), Constraint::EveryChannel) = (priors, cfg.variant.constraint()) {
            out.loss_a = Some(channel_regression_loss(&out.attention, pr)?);
        }
        if let Some((y, stats)) = labels {
            if y.shape() != [batch, cfg.m()] || stats.w.len() != cfg.m() {
                return Err(Error::Config(format!(
                    "labels {:?} and {} weights for {} AUs",
                    y.shape(),
                    stats.w.len(),
                    cfg.m()
                )));
            }
            let mut col = 0;
            let mut lu: Option<Var<'g, T>> = None;
            for pv in &out.prob_vars {
                let cols = pv.shape()[1];
                let yj = Tensor::from_fn(&[batch, cols], |i| y.data()[(i / cols) * cfg.m() + col + i % cols]);
                let term = au_detection_loss(*pv, &yj, &stats.w[col..col + cols], &stats.v[col..col + cols])?;
                lu = Some(match lu {
                    Some(acc) => acc.add(term)?,
                    None => term,
                });
                col += cols;
            }
            let lu = lu.expect("at least one AU");
            out.loss = Some(total_loss(lu, out.loss_a, cfg.lambda_a)?);
            out.loss_u = Some(lu);
        }
        Ok(out)
    }

    /// Convenience forward without gradients.
    pub fn predict(&self, images: Tensor<T>, priors: Option<&[Tensor<T>]>) -> Result<Prediction> {
        let g = Graph::new();
        let p: Vec<Var<T>> = self.params.values().iter().map(|v| g.constant(v.clone())).collect();
        let out = self.forward(&p, g.constant(images), priors, None)?;
        Ok(Prediction {
            avg_attention: out.avg_attention.iter().map(|a| a.value().to_f64_vec()).collect(),
            attention: out.attention.iter().map(|a| a.value().to_f64_vec()).collect(),
            features: out.features.iter().map(|f| f.value().to_f64_vec()).collect(),
            loss_a: out.loss_a.map(|l| l.item().as_f64()),
            probs: out.probs,
        })
    }
}

/// Detached forward results.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub probs: Vec<Vec<f64>>,
    /// Per AU, row-major `[B, n]`.
    pub avg_attention: Vec<Vec<f64>>,
    pub attention: Vec<Vec<f64>>,
    pub features: Vec<Vec<f64>>,
    pub loss_a: Option<f64>,
}

const CKPT_MAGIC: &[u8; 8] = b"AC2DCKPT";
const CKPT_VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f32s(w: &mut impl Write, vs: impl IntoIterator<Item = f32>) -> std::io::Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::Data(format!("checkpoint: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn get_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut b = vec![0u8; n * 4];
    r.read_exact(&mut b).map_err(|e| Error::Data(format!("checkpoint: {e}")))?;
    Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

fn get_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(|e| Error::Data(format!("checkpoint: {e}")))?;
    Ok(b)
}

impl<T: Float> Model<T> {
    pub fn write_checkpoint(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CKPT_MAGIC)?;
        put_u32(w, CKPT_VERSION)?;
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        put_u32(w, json.len() as u32)?;
        w.write_all(&json)?;
        put_u32(w, self.params.len() as u32)?;
        for (name, t) in self.params.names().iter().zip(self.params.values()) {
            put_u32(w, name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            put_u32(w, t.ndim() as u32)?;
            for &d in t.shape() {
                put_u32(w, d as u32)?;
            }
            put_f32s(w, t.data().iter().map(|v| v.as_f64() as f32))?;
        }
        put_u32(w, self.banks.len() as u32)?;
        for bank in &self.banks {
            put_u32(w, bank.au)?;
            put_u32(w, bank.dim() as u32)?;
            put_u32(w, bank.capacity() as u32)?;
            for slot in bank.slots() {
                match slot {
                    Some(v) => {
                        w.write_all(&[1])?;
                        put_f32s(w, v.iter().copied())?;
                    }
                    None => w.write_all(&[0])?,
                }
            }
            put_u32(w, bank.snapshot().len() as u32)?;
            for e in bank.snapshot() {
                put_f32s(w, e.iter().copied())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self> {
        if get_bytes(r, 8)? != CKPT_MAGIC {
            return Err(Error::Data("not a checkpoint file".into()));
        }
        let version = get_u32(r)?;
        if version != CKPT_VERSION {
            return Err(Error::Version(format!("checkpoint version {version}, expected {CKPT_VERSION}")));
        }
        let len = get_u32(r)? as usize;
        let config: ModelConfig = serde_json::from_slice(&get_bytes(r, len)?)
            .map_err(|e| Error::Version(format!("checkpoint config: {e}")))?;
        let mut model = Self::build(&config)?;
        let count = get_u32(r)? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = get_u32(r)? as usize;
            let name = String::from_utf8(get_bytes(r, len)?).map_err(|_| Error::Data("bad tensor name".into()))?;
            let ndim = get_u32(r)? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| get_u32(r).map(|d| d as usize)).collect::<Result<_>>()?;
            let data = get_f32s(r, shape.iter().product())?;
            let data: Vec<f64> = data.into_iter().map(f64::from).collect();
            entries.push((name, Tensor::from_f64(&shape, &data)?));
        }
        model.params.load_named(entries)?;
        let nbanks = get_u32(r)? as usize;
        if nbanks != model.banks.len() {
            return Err(Error::Version(format!(
                "checkpoint has {nbanks} banks, variant {} expects {}",
                config.variant,
                model.banks.len()
            )));
        }
        for bank in &mut model.banks {
            let au = get_u32(r)?;
            let dim = get_u32(r)? as usize;
            let slots = get_u32(r)? as usize;
            if au != bank.au || dim != bank.dim() {
                return Err(Error::Version("bank layout mismatch".into()));
            }
            let mut fresh = PrototypeBank::new(au, slots, dim);
            for id in 0..slots {
                if get_bytes(r, 1)?[0] == 1 {
                    fresh.update(id, &get_f32s(r, dim)?)?;
                }
            }
            let n = get_u32(r)? as usize;
            let snap = (0..n).map(|_| get_f32s(r, dim)).collect::<Result<Vec<_>>>()?;
            fresh.set_snapshot(snap)?;
            *bank = fresh;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(&mut std::io::BufReader::new(file))
    }
}
