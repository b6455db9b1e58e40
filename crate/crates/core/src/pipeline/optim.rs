use crate::tensor::Buffer;

use super::Model;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    /// Adam with the usual `β1 = 0.9, β2 = 0.999, ε = 1e-8`.
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(format!("unknown optimizer {other:?} (expected sgd or adam)")),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Optimizer state across steps. Moment buffers are metered like any other
/// tensor payload.
#[derive(Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: i32,
    moments: Vec<Option<(Buffer, Buffer)>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Applies and clears the accumulated gradients. A parameter moves only
    /// if its gradient has a nonzero entry; returns whether any moved.
    pub fn step(&mut self, model: &mut Model) -> bool {
        match self.kind {
            OptimizerKind::Sgd => model.sgd_step(self.lr),
            OptimizerKind::Adam => self.adam(model),
        }
    }

    fn adam(&mut self, model: &mut Model) -> bool {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        let mut params = model.params_mut();
        self.moments.resize_with(params.len(), || None);
        let mut moved = false;
        for ((_, p), state) in params.iter_mut().zip(&mut self.moments) {
            let Some(g) = p.take_grad() else { continue };
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            let (m, v) = state.get_or_insert_with(|| (Buffer::zeros(g.len()), Buffer::zeros(g.len())));
            for (((w, g), m), v) in p.value_mut().iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let next = *w - self.lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
                moved |= next != *w;
                *w = next;
            }
        }
        moved
    }
}
