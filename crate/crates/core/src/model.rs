//! Parameter layout and the end-to-end forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{self, ExpertCounter, ExpertParams, MaskPrediction, TrunkParams};
use crate::numerics::{Graph, ParamId, ParamStore, Real, SparseSoftmaxGrad, Tensor, Var};
use crate::router::{self, RouteVars, RoutingDecision};
use crate::shape_encoder::{self, Conv, DistributionVars, Linear, Mlp, ShapeDistribution, ShapeEncoderParams};
use crate::synth_data::{sample_seed, Mask, SceneRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Input side length; must be a multiple of 4.
    pub side: usize,
    /// `K`.
    pub experts: usize,
    /// `k`.
    pub topk: usize,
    /// Latent dimension `d`.
    pub latent_dim: usize,
    /// Mask embedding width `d_e`.
    pub embed_dim: usize,
    pub mask_channels: usize,
    pub trunk_channels: usize,
    /// Channels of `F`.
    pub feature_channels: usize,
    pub mlp_hidden: usize,
    pub expert_hidden: usize,
    pub gate_grad: SparseSoftmaxGrad,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            side: 64,
            experts: 4,
            topk: 1,
            latent_dim: 16,
            embed_dim: 64,
            mask_channels: 32,
            trunk_channels: 32,
            feature_channels: 64,
            mlp_hidden: 32,
            expert_hidden: 8,
            gate_grad: SparseSoftmaxGrad::DenseSurrogate,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.side < 4 || !self.side.is_multiple_of(4) {
            return Err(Error::config(format!("side {} is not a positive multiple of 4", self.side)));
        }
        if self.experts == 0 {
            return Err(Error::config("need at least one expert"));
        }
        if self.topk == 0 || self.topk > self.experts {
            return Err(Error::config(format!(
                "top-k {} must lie in 1..={} (number of experts)",
                self.topk, self.experts
            )));
        }
        let widths = [
            self.latent_dim,
            self.embed_dim,
            self.mask_channels,
            self.trunk_channels,
            self.feature_channels,
            self.mlp_hidden,
            self.expert_hidden,
        ];
        if widths.contains(&0) {
            return Err(Error::config("layer widths must be positive"));
        }
        Ok(())
    }
}

/// Parameter ids grouped by block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelParams {
    pub trunk: TrunkParams,
    pub shape: ShapeEncoderParams,
    /// `W`, `K×d`.
    pub router: ParamId,
    pub experts: Vec<ExpertParams>,
}

struct LayoutBuilder<'s, T: Real, F> {
    store: &'s mut ParamStore<T>,
    init: F,
}

impl<T: Real, F: FnMut(&[usize], usize) -> Tensor<T>> LayoutBuilder<'_, T, F> {
    fn push(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> ParamId {
        let t = (self.init)(&shape, fan_in);
        self.store.push(name, t)
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> Conv {
        Conv {
            kernels: self.push(format!("{name}.weight"), vec![cout, cin, 3, 3], cin * 9),
            bias: self.push(format!("{name}.bias"), vec![cout], 0),
            stride,
        }
    }

    fn linear(&mut self, name: &str, input: usize, out: usize) -> Linear {
        Linear {
            weight: self.push(format!("{name}.weight"), vec![out, input], input),
            bias: self.push(format!("{name}.bias"), vec![out], 0),
        }
    }

    fn mlp(&mut self, name: &str, input: usize, hidden: usize, out: usize) -> Mlp {
        Mlp {
            hidden: self.linear(&format!("{name}.fc1"), input, hidden),
            out: self.linear(&format!("{name}.fc2"), hidden, out),
        }
    }
}

/// Builds the layout, pushing one tensor per parameter into `store`.
/// `init(shape, fan_in)` produces each initial tensor; biases have fan-in 0.
fn build_layout<T: Real>(
    cfg: &ModelConfig,
    store: &mut ParamStore<T>,
    init: impl FnMut(&[usize], usize) -> Tensor<T>,
) -> ModelParams {
    let mut b = LayoutBuilder { store, init };
    let trunk = TrunkParams {
        encoder: [
            b.conv("trunk.enc1", 2, cfg.trunk_channels, 2),
            b.conv("trunk.enc2", cfg.trunk_channels, cfg.feature_channels, 2),
        ],
        refiner: [
            b.conv("trunk.ref1", cfg.feature_channels, cfg.feature_channels, 1),
            b.conv("trunk.ref2", cfg.feature_channels, cfg.feature_channels, 1),
        ],
    };
    let embed = [
        b.conv("mask.conv1", 1, cfg.mask_channels, 2),
        b.conv("mask.conv2", cfg.mask_channels, cfg.embed_dim, 2),
    ];
    let mu = b.mlp("mu", cfg.embed_dim, cfg.mlp_hidden, cfg.latent_dim);
    let sigma = b.mlp("sigma", cfg.embed_dim, cfg.mlp_hidden, cfg.latent_dim);
    let router = b.push("router.weight".into(), vec![cfg.experts, cfg.latent_dim], cfg.latent_dim);
    let query = cfg.embed_dim + cfg.feature_channels;
    let experts = (0..cfg.experts)
        .map(|j| ExpertParams {
            hyper: b.mlp(&format!("expert{j}"), query, cfg.expert_hidden, cfg.feature_channels),
            bias: b.push(format!("expert{j}.bias"), vec![1], 0),
        })
        .collect();
    ModelParams {
        trunk,
        shape: ShapeEncoderParams { embed, mu, sigma },
        router,
        experts,
    }
}

const INIT_STREAM: u64 = 0x1417_0001;

/// Model configuration, parameter layout and values.
#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub store: ParamStore<T>,
}

impl Model<f32> {
    /// He fan-in normal weights, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, INIT_STREAM));
        let mut store = ParamStore::new();
        let params = build_layout(&config, &mut store, |shape, fan_in| {
            let n: usize = shape.iter().product();
            if fan_in == 0 {
                return Tensor::zeros(shape.to_vec());
            }
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let data = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
            Tensor::new(shape.to_vec(), data).expect("shape")
        });
        Ok(Self { config, params, store })
    }
}

impl<T: Real> Model<T> {
    /// All-zero model with the layout for `config`.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let params = build_layout(&config, &mut store, |shape, _| Tensor::zeros(shape.to_vec()));
        Ok(Self { config, params, store })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.clone(),
            store: self.store.cast(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn block_param_count(&self, prefix: &str) -> usize {
        self.store
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn trunk_param_count(&self) -> usize {
        self.block_param_count("trunk.")
    }

    pub fn expert_bank_param_count(&self) -> usize {
        self.block_param_count("expert")
    }

    /// Forward pass for one record.
    pub fn predict(&self, record: &SceneRecord, eta: Option<&[T]>, counter: Option<&ExpertCounter>) -> Result<Prediction> {
        let (input, mask) = scene_tensors::<T>(record, self.config.side)?;
        let mut g = Graph::new(&self.store);
        let out = forward_sample(&mut g, &self.config, &self.params, input, mask, eta, counter)?;
        let logits = g.value(out.logits).data().iter().map(|v| v.as_f64() as f32).collect();
        let to32 = |v: Var| g.value(v).data().iter().map(|x| x.as_f64() as f32).collect::<Vec<f32>>();
        let decision = out.route.decision(&g);
        Ok(Prediction {
            mask: MaskPrediction {
                height: record.height(),
                width: record.width(),
                logits,
            },
            decision: RoutingDecision {
                scores: decision.scores.iter().map(|v| v.as_f64() as f32).collect(),
                gate: decision.gate.iter().map(|v| v.as_f64() as f32).collect(),
                selected: decision.selected,
            },
            distribution: ShapeDistribution {
                mu: to32(out.dist.mu),
                sigma_raw: to32(out.dist.sigma_raw),
            },
        })
    }
}

/// Inference output for one record.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub mask: MaskPrediction,
    pub decision: RoutingDecision<f32>,
    pub distribution: ShapeDistribution<f32>,
}

/// Loads `tensors` (name, tensor) into a zero model for `config`. Every
/// layout entry must be supplied exactly once with the expected shape.
pub fn model_from_tensors<T: Real>(config: ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Model<T>> {
    let mut model = Model::<T>::zeros(config)?;
    let mut seen = vec![false; model.store.len()];
    for (name, t) in tensors {
        let id = model
            .store
            .id(&name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
        if model.store.get(id).shape() != t.shape() {
            return Err(Error::config(format!(
                "parameter {name}: shape {:?}, expected {:?}",
                t.shape(),
                model.store.get(id).shape()
            )));
        }
        *model.store.get_mut(id) = t;
        seen[id.0] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::config(format!("missing parameter {}", model.store.name(ParamId(i)))));
    }
    Ok(model)
}

/// Trunk input `[image, visible]` (2×H×W) and the visible mask (1×H×W).
pub fn scene_tensors<T: Real>(record: &SceneRecord, side: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, w) = (record.height(), record.width());
    if h != side || w != side {
        return Err(Error::ConfigMismatch(format!("scene is {h}×{w}, model expects {side}×{side}")));
    }
    if record.image.len() != h * w {
        return Err(Error::dim("image length does not match mask size"));
    }
    let mask = record.visible.to_tensor::<T>();
    let mut input = Vec::with_capacity(2 * h * w);
    input.extend(record.image.iter().map(|&v| T::lit(v as f64)));
    input.extend_from_slice(mask.data());
    Ok((Tensor::new([2, h, w], input)?, mask))
}

/// Graph nodes produced by [`forward_sample`].
#[derive(Clone, Debug)]
pub struct SampleVars {
    pub logits: Var,
    pub route: RouteVars,
    pub dist: DistributionVars,
    pub latent: Var,
}

/// One sample through trunk, shape encoder, router and the selected
/// experts. `eta = None` routes on `μ`. Unselected experts are not
/// evaluated.
pub fn forward_sample<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    p: &ModelParams,
    input: Tensor<T>,
    visible: Tensor<T>,
    eta: Option<&[T]>,
    counter: Option<&ExpertCounter>,
) -> Result<SampleVars> {
    let input = g.constant(input);
    let visible = g.constant(visible);
    let features = experts::trunk_forward(g, &p.trunk, input)?;
    let e_m = shape_encoder::embed_mask(g, &p.shape, visible)?;
    let dist = shape_encoder::encode_distribution(g, &p.shape, e_m)?;
    let latent = shape_encoder::latent_var(g, dist, eta)?;
    let route = router::route_var(g, p.router, latent, cfg.topk, cfg.gate_grad)?;
    let query = experts::expert_query(g, e_m, features)?;
    let mut outs = Vec::with_capacity(route.selected.len());
    for &j in &route.selected {
        if let Some(c) = counter {
            c.record(j);
        }
        outs.push((j, experts::expert_forward(g, &p.experts[j], query, features, 4)?));
    }
    let logits = experts::predict_amodal(g, route.gate, &outs)?;
    Ok(SampleVars {
        logits,
        route,
        dist,
        latent,
    })
}

/// Graph nodes of the batch objective.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub ce: Var,
    pub cv2: Var,
}

/// `L = mean_b BCE(logits_b, M_a,b) + balance_weight · CV²(Σ_b π_b)`. With
/// `balance_weight = 0` the total is the cross-entropy node itself.
pub fn total_loss<T: Real>(
    g: &mut Graph<'_, T>,
    logits: &[Var],
    targets: &[&Mask],
    gates: &[Var],
    balance_weight: f64,
) -> Result<LossVars> {
    if logits.is_empty() || logits.len() != targets.len() {
        return Err(Error::dim("loss needs one target per prediction"));
    }
    let mut ce = None;
    for (&l, m) in logits.iter().zip(targets) {
        let term = g.bce_with_logits(l, m.to_tensor())?;
        ce = Some(match ce {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    let ce = ce.expect("nonempty");
    let ce = if logits.len() > 1 {
        g.scale(ce, T::lit(1.0 / logits.len() as f64))?
    } else {
        ce
    };
    let cv2 = router::cv2_loss_var(g, gates)?;
    let total = if balance_weight == 0.0 {
        ce
    } else {
        let weighted = g.scale(cv2, T::lit(balance_weight))?;
        g.add(ce, weighted)?
    };
    Ok(LossVars { total, ce, cv2 })
}
