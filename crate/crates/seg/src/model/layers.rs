use revhrnet_core::{BatchStats, Exec, NormMode, Scalar};

use super::params::{ParamId, ParamKind, ParamStore};
use crate::error::Result;

pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in running-statistic updates.
pub const BN_MOMENTUM: f64 = 0.1;

/// How batch normalisation behaves during a pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// A pending running-statistics update produced by a train-mode pass.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub(crate) mean: ParamId,
    pub(crate) var: ParamId,
    pub(crate) stats: BatchStats<T>,
}

impl<T: Scalar> BnUpdate<T> {
    pub(crate) fn apply(&self, store: &mut ParamStore<T>, momentum: T) {
        for (id, batch) in [(self.mean, &self.stats.mean), (self.var, &self.stats.var)] {
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            for (r, &b) in p.value.data_mut().iter_mut().zip(batch) {
                *r = (T::one() - momentum) * *r + momentum * b;
            }
        }
    }
}

/// Execution context threaded through one forward pass.
pub struct Pass<'e, T, E> {
    pub exec: &'e mut E,
    pub phase: Phase,
    pub updates: Vec<BnUpdate<T>>,
}

impl<'e, T: Scalar, E: Exec<T>> Pass<'e, T, E> {
    pub fn new(exec: &'e mut E, phase: Phase) -> Self {
        Self {
            exec,
            phase,
            updates: Vec::new(),
        }
    }

    pub(crate) fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> E::Value {
        let p = store.get(id);
        self.exec.param(&p.name, &p.value, p.trainable())
    }
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let weight = store.he_weight(format!("{name}.weight"), [cout, cin, kernel, kernel]);
        let bias = bias.then(|| store.constant(format!("{name}.bias"), cout, 0.0, ParamKind::Weight));
        Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn forward<T: Scalar, E: Exec<T>>(
        &self,
        pass: &mut Pass<'_, T, E>,
        store: &ParamStore<T>,
        x: &E::Value,
    ) -> Result<E::Value> {
        let w = pass.param(store, self.weight);
        let b = self.bias.map(|b| pass.param(store, b));
        Ok(pass.exec.conv2d(x, &w, b.as_ref(), self.stride, self.padding)?)
    }
}

#[derive(Clone, Debug)]
pub struct NormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl NormLayer {
    pub(crate) fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.constant(format!("{name}.gamma"), channels, 1.0, ParamKind::Weight),
            beta: store.constant(format!("{name}.beta"), channels, 0.0, ParamKind::Weight),
            running_mean: store.constant(format!("{name}.running_mean"), channels, 0.0, ParamKind::Buffer),
            running_var: store.constant(format!("{name}.running_var"), channels, 1.0, ParamKind::Buffer),
        }
    }

    pub fn forward<T: Scalar, E: Exec<T>>(
        &self,
        pass: &mut Pass<'_, T, E>,
        store: &ParamStore<T>,
        x: &E::Value,
    ) -> Result<E::Value> {
        let gamma = pass.param(store, self.gamma);
        let beta = pass.param(store, self.beta);
        let eps = T::lit(BN_EPS);
        match pass.phase {
            Phase::Train => {
                let (y, stats) = pass.exec.batch_norm(x, &gamma, &beta, NormMode::Train, eps)?;
                if let Some(stats) = stats {
                    pass.updates.push(BnUpdate {
                        mean: self.running_mean,
                        var: self.running_var,
                        stats,
                    });
                }
                Ok(y)
            }
            Phase::Eval => {
                let mode = NormMode::Eval {
                    running_mean: &store.get(self.running_mean).value,
                    running_var: &store.get(self.running_var).value,
                };
                Ok(pass.exec.batch_norm(x, &gamma, &beta, mode, eps)?.0)
            }
        }
    }
}

/// Convolution, batch norm and an optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: ConvLayer,
    pub norm: NormLayer,
    pub relu: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
    ) -> Self {
        Self {
            conv: ConvLayer::new(store, &format!("{name}.conv"), cin, cout, kernel, stride, false),
            norm: NormLayer::new(store, &format!("{name}.bn"), cout),
            relu,
        }
    }

    pub fn forward<T: Scalar, E: Exec<T>>(
        &self,
        pass: &mut Pass<'_, T, E>,
        store: &ParamStore<T>,
        x: &E::Value,
    ) -> Result<E::Value> {
        let y = self.conv.forward(pass, store, x)?;
        let y = self.norm.forward(pass, store, &y)?;
        if self.relu {
            Ok(pass.exec.relu(&y)?)
        } else {
            Ok(y)
        }
    }
}

/// Residual unit: either two 3x3 convolutions or a 1x1/3x3/1x1 bottleneck,
/// with a projected shortcut whenever stride or width changes.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub body: Vec<ConvBn>,
    pub shortcut: Option<ConvBn>,
}

impl ResidualBlock {
    pub(crate) fn basic<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        Self {
            body: vec![
                ConvBn::new(store, &format!("{name}.a"), cin, cout, 3, stride, true),
                ConvBn::new(store, &format!("{name}.b"), cout, cout, 3, 1, false),
            ],
            shortcut: Self::projection(store, name, cin, cout, stride),
        }
    }

    pub(crate) fn bottleneck<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        let mid = cout / 4;
        Self {
            body: vec![
                ConvBn::new(store, &format!("{name}.a"), cin, mid, 1, 1, true),
                ConvBn::new(store, &format!("{name}.b"), mid, mid, 3, stride, true),
                ConvBn::new(store, &format!("{name}.c"), mid, cout, 1, 1, false),
            ],
            shortcut: Self::projection(store, name, cin, cout, stride),
        }
    }

    fn projection<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Option<ConvBn> {
        (stride != 1 || cin != cout)
            .then(|| ConvBn::new(store, &format!("{name}.proj"), cin, cout, 1, stride, false))
    }

    pub fn forward<T: Scalar, E: Exec<T>>(
        &self,
        pass: &mut Pass<'_, T, E>,
        store: &ParamStore<T>,
        x: &E::Value,
    ) -> Result<E::Value> {
        let mut y = x.clone();
        for layer in &self.body {
            y = layer.forward(pass, store, &y)?;
        }
        let skip = match &self.shortcut {
            Some(p) => p.forward(pass, store, x)?,
            None => x.clone(),
        };
        let sum = pass.exec.add(&y, &skip)?;
        Ok(pass.exec.relu(&sum)?)
    }
}
