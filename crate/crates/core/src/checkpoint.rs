//! Binary checkpoints for guidance modules and policies, and composition of
//! independently trained modules into a hybrid agent.
//!
//! Layout (little-endian): magic, format version, module kind, dims, seed,
//! training step, kind-specific hyperparameters, sub-network shapes, then the
//! flat parameter payload of every sub-network in declared order, and a
//! trailing SHA-256 of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{sha256_hex, ByteReader, ByteWriter};
use crate::envs::ActionBox;
use crate::error::{Error, Result};
use crate::guidance::{DoubleQ, GuidanceHandle, GuidanceModel, IqlGuidance};
use crate::nn::{Activation, AdamConfig, Mlp};
use crate::policy::{Algorithm, DiffusionPolicy, QGradPath, SamplerMode};
use crate::schedule::NoiseSchedule;

pub const MAGIC: &[u8; 8] = b"MODDIFCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModuleKind {
    GuidanceDoubleQ,
    GuidanceIql,
    PolicyDql,
    PolicyIdql,
    PolicyEdp,
}

impl ModuleKind {
    fn tag(self) -> u8 {
        match self {
            ModuleKind::GuidanceDoubleQ => 0,
            ModuleKind::GuidanceIql => 1,
            ModuleKind::PolicyDql => 2,
            ModuleKind::PolicyIdql => 3,
            ModuleKind::PolicyEdp => 4,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => ModuleKind::GuidanceDoubleQ,
            1 => ModuleKind::GuidanceIql,
            2 => ModuleKind::PolicyDql,
            3 => ModuleKind::PolicyIdql,
            4 => ModuleKind::PolicyEdp,
            other => return Err(Error::Format(format!("unknown module kind tag {other}"))),
        })
    }

    pub fn is_guidance(self) -> bool {
        matches!(self, ModuleKind::GuidanceDoubleQ | ModuleKind::GuidanceIql)
    }

    fn for_algorithm(alg: Algorithm) -> Self {
        match alg {
            Algorithm::Dql => ModuleKind::PolicyDql,
            Algorithm::Idql => ModuleKind::PolicyIdql,
            Algorithm::Edp => ModuleKind::PolicyEdp,
        }
    }

    fn algorithm(self) -> Option<Algorithm> {
        match self {
            ModuleKind::PolicyDql => Some(Algorithm::Dql),
            ModuleKind::PolicyIdql => Some(Algorithm::Idql),
            ModuleKind::PolicyEdp => Some(Algorithm::Edp),
            _ => None,
        }
    }
}

/// Anything that can be checkpointed.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Module {
    Guidance(GuidanceHandle),
    Policy(DiffusionPolicy),
}

impl From<GuidanceHandle> for Module {
    fn from(g: GuidanceHandle) -> Self {
        Module::Guidance(g)
    }
}

impl From<DiffusionPolicy> for Module {
    fn from(p: DiffusionPolicy) -> Self {
        Module::Policy(p)
    }
}

fn sampler_tag(m: SamplerMode) -> u8 {
    match m {
        SamplerMode::FullReverse => 0,
        SamplerMode::OneStepEdp => 1,
    }
}

fn sampler_from_tag(t: u8) -> Result<SamplerMode> {
    match t {
        0 => Ok(SamplerMode::FullReverse),
        1 => Ok(SamplerMode::OneStepEdp),
        other => Err(Error::Format(format!("unknown sampler tag {other}"))),
    }
}

fn grad_path_tag(p: QGradPath) -> u8 {
    match p {
        QGradPath::FullChain => 0,
        QGradPath::LastStep => 1,
    }
}

fn grad_path_from_tag(t: u8) -> Result<QGradPath> {
    match t {
        0 => Ok(QGradPath::FullChain),
        1 => Ok(QGradPath::LastStep),
        other => Err(Error::Format(format!("unknown gradient-path tag {other}"))),
    }
}

impl Module {
    pub fn kind(&self) -> ModuleKind {
        match self {
            Module::Guidance(g) => match g.model() {
                GuidanceModel::DoubleQ(_) => ModuleKind::GuidanceDoubleQ,
                GuidanceModel::Iql(_) => ModuleKind::GuidanceIql,
            },
            Module::Policy(p) => ModuleKind::for_algorithm(p.algorithm()),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Module::Guidance(g) => g.state_dim(),
            Module::Policy(p) => p.state_dim(),
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            Module::Guidance(g) => g.action_dim(),
            Module::Policy(p) => p.action_dim(),
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Module::Guidance(g) => g.seed(),
            Module::Policy(p) => p.seed(),
        }
    }

    pub fn training_step(&self) -> u64 {
        match self {
            Module::Guidance(g) => g.training_steps(),
            Module::Policy(p) => p.training_steps(),
        }
    }

    /// Sub-networks in payload order.
    pub fn networks(&self) -> Vec<&Mlp> {
        match self {
            Module::Guidance(g) => match g.model() {
                GuidanceModel::DoubleQ(dq) => vec![&dq.q1, &dq.q2, &dq.q1_target, &dq.q2_target],
                GuidanceModel::Iql(iql) => vec![&iql.q, &iql.v],
            },
            Module::Policy(p) => vec![p.eps_net()],
        }
    }

    /// Every parameter of every sub-network, in payload order.
    pub fn payload(&self) -> Vec<f64> {
        self.networks().into_iter().flat_map(|n| n.params_flat()).collect()
    }

    /// Little-endian payload bytes; equal exactly when parameters are bit-identical.
    pub fn payload_bytes(&self) -> Vec<u8> {
        self.payload().iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn as_guidance(&self) -> Result<&GuidanceHandle> {
        match self {
            Module::Guidance(g) => Ok(g),
            Module::Policy(_) => Err(Error::invalid_input("checkpoint holds a policy, not a guidance module")),
        }
    }

    pub fn as_policy(&self) -> Result<&DiffusionPolicy> {
        match self {
            Module::Policy(p) => Ok(p),
            Module::Guidance(_) => Err(Error::invalid_input("checkpoint holds a guidance module, not a policy")),
        }
    }

    pub fn into_guidance(self) -> Result<GuidanceHandle> {
        match self {
            Module::Guidance(g) => Ok(g),
            Module::Policy(_) => Err(Error::invalid_input("checkpoint holds a policy, not a guidance module")),
        }
    }

    pub fn into_policy(self) -> Result<DiffusionPolicy> {
        match self {
            Module::Policy(p) => Ok(p),
            Module::Guidance(_) => Err(Error::invalid_input("checkpoint holds a guidance module, not a policy")),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(FORMAT_VERSION);
        w.u8(self.kind().tag());
        w.u32(self.state_dim() as u32);
        w.u32(self.action_dim() as u32);
        w.u64(self.seed());
        w.u64(self.training_step());
        match self {
            Module::Guidance(g) => {
                w.u8(g.is_frozen() as u8);
                match g.model() {
                    GuidanceModel::DoubleQ(dq) => {
                        w.f64(dq.tau_ema);
                        w.f64(dq.gamma);
                        w.f64(dq.learning_rate());
                    }
                    GuidanceModel::Iql(iql) => {
                        w.f64(iql.expectile);
                        w.f64(iql.beta_weight);
                        w.f64(iql.w_max);
                        w.f64(iql.gamma);
                        w.f64(iql.learning_rate());
                    }
                }
            }
            Module::Policy(p) => {
                let betas = p.schedule().betas();
                w.u32(betas.len() as u32);
                w.f64s(betas);
                w.u32(p.time_embed_dim() as u32);
                w.u8(sampler_tag(p.sampler()));
                w.u8(grad_path_tag(p.q_grad_path()));
                w.u32(p.one_step_k() as u32);
                w.f64s(&p.action_box().low);
                w.f64s(&p.action_box().high);
                w.f64(p.learning_rate());
            }
        }
        let nets = self.networks();
        w.u32(nets.len() as u32);
        for net in &nets {
            w.u32(net.layer_dims().len() as u32);
            for &d in net.layer_dims() {
                w.u32(d as u32);
            }
            w.u8(net.hidden_activation().to_tag());
            w.u8(net.output_activation().to_tag());
        }
        for net in &nets {
            w.f64s(&net.params_flat());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::verified(bytes)?;
        if r.bytes(8)? != MAGIC {
            return Err(Error::Magic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version(version));
        }
        let kind = ModuleKind::from_tag(r.u8()?)?;
        let state_dim = r.u32()? as usize;
        let action_dim = r.u32()? as usize;
        let seed = r.u64()?;
        let step = r.u64()?;

        enum Header {
            DoubleQ { frozen: bool, tau: f64, gamma: f64, lr: f64 },
            Iql { frozen: bool, expectile: f64, beta: f64, w_max: f64, gamma: f64, lr: f64 },
            Policy {
                betas: Vec<f64>,
                temb: usize,
                sampler: SamplerMode,
                grad_path: QGradPath,
                one_step_k: usize,
                bounds: ActionBox,
                lr: f64,
            },
        }
        let header = match kind {
            ModuleKind::GuidanceDoubleQ => Header::DoubleQ {
                frozen: r.u8()? != 0,
                tau: r.f64()?,
                gamma: r.f64()?,
                lr: r.f64()?,
            },
            ModuleKind::GuidanceIql => Header::Iql {
                frozen: r.u8()? != 0,
                expectile: r.f64()?,
                beta: r.f64()?,
                w_max: r.f64()?,
                gamma: r.f64()?,
                lr: r.f64()?,
            },
            _ => {
                let k = r.u32()? as usize;
                let betas = r.f64s(k)?;
                let temb = r.u32()? as usize;
                let sampler = sampler_from_tag(r.u8()?)?;
                let grad_path = grad_path_from_tag(r.u8()?)?;
                let one_step_k = r.u32()? as usize;
                let low = r.f64s(action_dim)?;
                let high = r.f64s(action_dim)?;
                Header::Policy {
                    betas,
                    temb,
                    sampler,
                    grad_path,
                    one_step_k,
                    bounds: ActionBox { low, high },
                    lr: r.f64()?,
                }
            }
        };

        let n_nets = r.u32()? as usize;
        let expected_nets = match kind {
            ModuleKind::GuidanceDoubleQ => 4,
            ModuleKind::GuidanceIql => 2,
            _ => 1,
        };
        if n_nets != expected_nets {
            return Err(Error::Format(format!("{kind:?} needs {expected_nets} sub-networks, file has {n_nets}")));
        }
        let mut shapes = Vec::with_capacity(n_nets);
        for _ in 0..n_nets {
            let n_dims = r.u32()? as usize;
            if !(2..=64).contains(&n_dims) {
                return Err(Error::Format(format!("implausible layer count {n_dims}")));
            }
            let dims = (0..n_dims).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let hidden = Activation::from_tag(r.u8()?)?;
            let output = Activation::from_tag(r.u8()?)?;
            shapes.push((dims, hidden, output));
        }
        let mut nets = Vec::with_capacity(n_nets);
        for (dims, hidden, output) in shapes {
            let mut weights = Vec::with_capacity(dims.len() - 1);
            let mut biases = Vec::with_capacity(dims.len() - 1);
            for pair in dims.windows(2) {
                weights.push(r.f64s(pair[0] * pair[1])?);
                biases.push(r.f64s(pair[1])?);
            }
            nets.push(Mlp::from_parts(&dims, weights, biases, hidden, output).map_err(|e| Error::Format(e.to_string()))?);
        }
        r.expect_end()?;

        let module = match header {
            Header::DoubleQ { frozen, tau, gamma, lr } => {
                let nets: [Mlp; 4] = nets.try_into().expect("count checked");
                let dq = DoubleQ::from_networks(nets, state_dim, tau, gamma, AdamConfig::with_lr(lr))?;
                let mut h = GuidanceHandle::from_model(GuidanceModel::DoubleQ(dq), seed, step);
                if frozen {
                    h.freeze();
                }
                Module::Guidance(h)
            }
            Header::Iql { frozen, expectile, beta, w_max, gamma, lr } => {
                let [q, v]: [Mlp; 2] = nets.try_into().expect("count checked");
                let iql = IqlGuidance::from_networks(q, v, expectile, beta, w_max, gamma, AdamConfig::with_lr(lr))?;
                let mut h = GuidanceHandle::from_model(GuidanceModel::Iql(iql), seed, step);
                if frozen {
                    h.freeze();
                }
                Module::Guidance(h)
            }
            Header::Policy {
                betas,
                temb,
                sampler,
                grad_path,
                one_step_k,
                bounds,
                lr,
            } => {
                let eps_net = nets.into_iter().next().expect("count checked");
                let p = DiffusionPolicy::from_parts(
                    kind.algorithm().expect("policy kind"),
                    state_dim,
                    eps_net,
                    NoiseSchedule::from_betas(betas)?,
                    temb,
                    sampler,
                    grad_path,
                    one_step_k,
                    bounds,
                    seed,
                    step,
                    AdamConfig::with_lr(lr),
                )?;
                Module::Policy(p)
            }
        };
        if module.state_dim() != state_dim || module.action_dim() != action_dim {
            return Err(Error::Format("header dims disagree with network shapes".into()));
        }
        Ok(module)
    }

    pub fn content_hash(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

pub fn save_checkpoint(module: &Module, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, module.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Module> {
    Module::from_bytes(&std::fs::read(path)?)
}

/// A policy paired with guidance modules from anywhere, ready to evaluate.
#[derive(Debug, Clone)]
pub struct HybridAgent {
    pub policy: DiffusionPolicy,
    pub training_guidance: Option<GuidanceHandle>,
    pub inference_guidance: Option<GuidanceHandle>,
    pub lambda: f64,
    pub alpha: f64,
}

impl HybridAgent {
    pub fn new(policy: DiffusionPolicy, inference_guidance: Option<GuidanceHandle>, lambda: f64) -> Result<Self> {
        if !lambda.is_finite() {
            return Err(Error::invalid_input("lambda must be finite"));
        }
        let mut inference_guidance = inference_guidance;
        if let Some(g) = &mut inference_guidance {
            check_dims(g, &policy)?;
            g.freeze();
        }
        Ok(Self {
            policy,
            training_guidance: None,
            inference_guidance,
            lambda,
            alpha: 0.0,
        })
    }

    pub fn with_training_guidance(mut self, g: Option<GuidanceHandle>) -> Self {
        self.training_guidance = g.map(|mut g| {
            g.freeze();
            g
        });
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }
}

fn check_dims(g: &GuidanceHandle, p: &DiffusionPolicy) -> Result<()> {
    if g.state_dim() != p.state_dim() || g.action_dim() != p.action_dim() {
        return Err(Error::CompositionIncompatible {
            guidance_state: g.state_dim(),
            guidance_action: g.action_dim(),
            policy_state: p.state_dim(),
            policy_action: p.action_dim(),
        });
    }
    Ok(())
}

/// Pairs a guidance checkpoint with a policy checkpoint. Only the state and
/// action widths decide legality; the algorithms that produced them do not.
pub fn compose_modules(guidance: &Module, policy: &Module, lambda: f64) -> Result<HybridAgent> {
    let g = guidance.as_guidance()?;
    let p = policy.as_policy()?;
    check_dims(g, p)?;
    HybridAgent::new(p.clone(), Some(g.clone()), lambda)
}

/// On-disk description of a composed agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridManifest {
    pub guidance: String,
    pub policy: String,
    pub lambda: f64,
    pub guidance_hash: String,
    pub policy_hash: String,
}

impl HybridManifest {
    pub fn load_agent(&self, base: &Path) -> Result<HybridAgent> {
        let g = load_checkpoint(base.join(&self.guidance))?;
        let p = load_checkpoint(base.join(&self.policy))?;
        if g.content_hash() != self.guidance_hash || p.content_hash() != self.policy_hash {
            return Err(Error::Checksum);
        }
        compose_modules(&g, &p, self.lambda)
    }
}
