//! First-order optimizers: SGD with momentum, Adam, AdamW and RMSprop.
//!
//! All updates are elementwise and keyed by parameter name, so the order in
//! which parameters are presented does not affect the result.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::net::Registry;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Sgd,
    Adam,
    AdamW,
    RmsProp,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 4] = [
        OptimizerKind::Sgd,
        OptimizerKind::Adam,
        OptimizerKind::AdamW,
        OptimizerKind::RmsProp,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::RmsProp => "rmsprop",
        }
    }

    fn uses_velocity(&self) -> bool {
        matches!(self, OptimizerKind::Sgd | OptimizerKind::RmsProp)
    }

    fn uses_first_moment(&self) -> bool {
        matches!(self, OptimizerKind::Adam | OptimizerKind::AdamW)
    }

    fn uses_second_moment(&self) -> bool {
        !matches!(self, OptimizerKind::Sgd)
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            "adamw" => Ok(OptimizerKind::AdamW),
            "rmsprop" => Ok(OptimizerKind::RmsProp),
            other => Err(Error::config(
                "optimizer",
                format!("unknown optimizer `{other}` (expected sgd | adam | adamw | rmsprop)"),
            )),
        }
    }
}

/// Optimizer and loop hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainHyper {
    pub lr0: f32,
    /// SGD velocity and RMSprop momentum-buffer coefficient.
    pub momentum: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    /// RMSprop squared-gradient smoothing.
    pub alpha: f32,
    pub eps: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainHyper {
    pub fn for_kind(kind: OptimizerKind) -> Self {
        TrainHyper {
            lr0: 0.001,
            momentum: 0.97,
            weight_decay: default_weight_decay(kind),
            beta1: 0.9,
            beta2: 0.999,
            alpha: 0.99,
            eps: 1e-8,
            epochs: 500,
            batch_size: 16,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, why: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(field, why))
            }
        };
        check(self.lr0 > 0.0 && self.lr0.is_finite(), "lr0", "must be > 0")?;
        check((0.0..1.0).contains(&self.momentum), "momentum", "must be in [0, 1)")?;
        check(self.weight_decay >= 0.0, "weight_decay", "must be >= 0")?;
        check((0.0..1.0).contains(&self.beta1), "beta1", "must be in [0, 1)")?;
        check((0.0..1.0).contains(&self.beta2), "beta2", "must be in [0, 1)")?;
        check((0.0..1.0).contains(&self.alpha), "alpha", "must be in [0, 1)")?;
        check(self.eps > 0.0, "eps", "must be > 0")?;
        check(self.batch_size >= 1, "batch_size", "must be >= 1")
    }
}

pub fn default_weight_decay(kind: OptimizerKind) -> f32 {
    match kind {
        OptimizerKind::Sgd => 5e-4,
        OptimizerKind::AdamW => 0.01,
        OptimizerKind::Adam | OptimizerKind::RmsProp => 0.0,
    }
}

/// Per-parameter buffers, keyed like the parameter registry.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    /// Number of completed steps.
    pub t: u64,
    pub velocity: Registry,
    pub first_moment: Registry,
    pub second_moment: Registry,
}

/// Zero-initialized state for `kind` over the given parameters.
pub fn make_optimizer<'a>(
    kind: OptimizerKind,
    params: impl IntoIterator<Item = (&'a str, &'a [usize])>,
) -> OptimizerState {
    let mut state = OptimizerState {
        kind,
        t: 0,
        velocity: Registry::new(),
        first_moment: Registry::new(),
        second_moment: Registry::new(),
    };
    for (name, shape) in params {
        if kind.uses_velocity() {
            state.velocity.insert(name.to_string(), Tensor::zeros(shape));
        }
        if kind.uses_first_moment() {
            state.first_moment.insert(name.to_string(), Tensor::zeros(shape));
        }
        if kind.uses_second_moment() {
            state.second_moment.insert(name.to_string(), Tensor::zeros(shape));
        }
    }
    state
}

impl OptimizerState {
    pub fn for_params(kind: OptimizerKind, params: &[(String, &Tensor)]) -> Self {
        make_optimizer(kind, params.iter().map(|(n, t)| (n.as_str(), t.shape())))
    }

    /// Buffers as `(prefix, registry)` pairs, in a fixed order.
    pub fn buffers(&self) -> [(&'static str, &Registry); 3] {
        [
            ("velocity", &self.velocity),
            ("first_moment", &self.first_moment),
            ("second_moment", &self.second_moment),
        ]
    }

    pub fn buffers_mut(&mut self) -> [(&'static str, &mut Registry); 3] {
        [
            ("velocity", &mut self.velocity),
            ("first_moment", &mut self.first_moment),
            ("second_moment", &mut self.second_moment),
        ]
    }

    /// Applies one update of this state's optimizer kind.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor)],
        grads: &Registry,
        h: &TrainHyper,
    ) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd => sgd_step(params, grads, self, h),
            OptimizerKind::Adam => adam_step(params, grads, self, h),
            OptimizerKind::AdamW => adamw_step(params, grads, self, h),
            OptimizerKind::RmsProp => rmsprop_step(params, grads, self, h),
        }
    }

    fn check(
        &self,
        expected: OptimizerKind,
        params: &[(String, &mut Tensor)],
        grads: &Registry,
    ) -> Result<()> {
        if self.kind != expected {
            return Err(Error::InvalidArgument(format!(
                "{expected} step on {} state",
                self.kind
            )));
        }
        if params.len() != grads.len() {
            return Err(Error::KeyMismatch(format!(
                "{} parameters, {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (name, w) in params {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::KeyMismatch(format!("no gradient for {name}")))?;
            if g.shape() != w.shape() {
                return Err(Error::Shape(format!(
                    "{name}: gradient {:?} vs parameter {:?}",
                    g.shape(),
                    w.shape()
                )));
            }
            for (label, reg) in self.buffers() {
                let used = match label {
                    "velocity" => self.kind.uses_velocity(),
                    "first_moment" => self.kind.uses_first_moment(),
                    _ => self.kind.uses_second_moment(),
                };
                if !used {
                    continue;
                }
                match reg.get(name) {
                    Some(b) if b.shape() == w.shape() => {}
                    Some(_) => {
                        return Err(Error::Shape(format!("{label} buffer for {name} has wrong shape")))
                    }
                    None => return Err(Error::KeyMismatch(format!("no {label} buffer for {name}"))),
                }
            }
        }
        Ok(())
    }
}

fn buffer<'a>(reg: &'a mut Registry, name: &str) -> &'a mut [f32] {
    reg.get_mut(name).expect("checked above").data_mut()
}

/// `g' = g + wd*w; v = momentum*v + g'; w -= lr*v` (no dampening, no Nesterov).
pub fn sgd_step(
    params: &mut [(String, &mut Tensor)],
    grads: &Registry,
    state: &mut OptimizerState,
    h: &TrainHyper,
) -> Result<()> {
    state.check(OptimizerKind::Sgd, params, grads)?;
    for (name, w) in params.iter_mut() {
        let g = grads[name.as_str()].data();
        let v = buffer(&mut state.velocity, name);
        for ((w, &g), v) in w.data_mut().iter_mut().zip(g).zip(v) {
            let g = if h.weight_decay != 0.0 { g + h.weight_decay * *w } else { g };
            *v = h.momentum * *v + g;
            *w -= h.lr0 * *v;
        }
    }
    state.t += 1;
    Ok(())
}

fn adam_family(
    params: &mut [(String, &mut Tensor)],
    grads: &Registry,
    state: &mut OptimizerState,
    h: &TrainHyper,
    decoupled: bool,
) -> Result<()> {
    let t = state.t + 1;
    let bc1 = 1.0 - h.beta1.powi(t as i32);
    let bc2 = 1.0 - h.beta2.powi(t as i32);
    let OptimizerState {
        first_moment,
        second_moment,
        ..
    } = state;
    for (name, w) in params.iter_mut() {
        let g = grads[name.as_str()].data();
        let m = buffer(first_moment, name);
        let s = buffer(second_moment, name);
        for (((w, &g), m), s) in w.data_mut().iter_mut().zip(g).zip(m).zip(s) {
            let g = if !decoupled && h.weight_decay != 0.0 {
                g + h.weight_decay * *w
            } else {
                g
            };
            if decoupled && h.weight_decay != 0.0 {
                *w -= h.lr0 * h.weight_decay * *w;
            }
            *m = h.beta1 * *m + (1.0 - h.beta1) * g;
            *s = h.beta2 * *s + (1.0 - h.beta2) * g * g;
            let m_hat = *m / bc1;
            let s_hat = *s / bc2;
            *w -= h.lr0 * m_hat / (s_hat.sqrt() + h.eps);
        }
    }
    state.t = t;
    Ok(())
}

/// Bias-corrected Adam; weight decay, when set, is added to the gradient.
pub fn adam_step(
    params: &mut [(String, &mut Tensor)],
    grads: &Registry,
    state: &mut OptimizerState,
    h: &TrainHyper,
) -> Result<()> {
    state.check(OptimizerKind::Adam, params, grads)?;
    adam_family(params, grads, state, h, false)
}

/// Adam with decoupled weight decay `w -= lr*wd*w`, applied before the
/// adaptive update and never folded into the gradient.
pub fn adamw_step(
    params: &mut [(String, &mut Tensor)],
    grads: &Registry,
    state: &mut OptimizerState,
    h: &TrainHyper,
) -> Result<()> {
    state.check(OptimizerKind::AdamW, params, grads)?;
    adam_family(params, grads, state, h, true)
}

/// Uncentered RMSprop with optional momentum:
/// `s = alpha*s + (1-alpha)*g^2; u = lr*g/(sqrt(s)+eps); v = momentum*v + u; w -= v`.
pub fn rmsprop_step(
    params: &mut [(String, &mut Tensor)],
    grads: &Registry,
    state: &mut OptimizerState,
    h: &TrainHyper,
) -> Result<()> {
    state.check(OptimizerKind::RmsProp, params, grads)?;
    let OptimizerState {
        velocity,
        second_moment,
        ..
    } = state;
    for (name, w) in params.iter_mut() {
        let g = grads[name.as_str()].data();
        let s = buffer(second_moment, name);
        let v = buffer(velocity, name);
        for (((w, &g), s), v) in w.data_mut().iter_mut().zip(g).zip(s).zip(v) {
            let g = if h.weight_decay != 0.0 { g + h.weight_decay * *w } else { g };
            *s = h.alpha * *s + (1.0 - h.alpha) * g * g;
            let u = h.lr0 * g / (s.sqrt() + h.eps);
            if h.momentum > 0.0 {
                *v = h.momentum * *v + u;
                *w -= *v;
            } else {
                *w -= u;
            }
        }
    }
    state.t += 1;
    Ok(())
}
