use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    column_moments, Activation, BlockNorm, Matrix, ParamId, ParameterStore, Rng, Tape, Var,
};

/// Running-statistics momentum for batch normalisation.
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Batch statistics and active dropout.
    Train,
    /// Active dropout, but batch norm uses its running statistics.
    TrainFrozenStats,
    /// Deterministic: running statistics, no dropout.
    Eval,
}

impl Mode {
    fn dropout_active(self) -> bool {
        !matches!(self, Mode::Eval)
    }

    fn batch_stats(self) -> bool {
        matches!(self, Mode::Train)
    }
}

/// Per-call forward state: the mode, the dropout stream, and the running
/// statistic updates that training-mode batch norm produced.
pub struct ForwardCtx<'a> {
    pub mode: Mode,
    rng: Option<&'a mut Rng>,
    pending: Vec<(ParamId, Matrix)>,
}

impl<'a> ForwardCtx<'a> {
    pub fn train(rng: &'a mut Rng) -> Self {
        ForwardCtx {
            mode: Mode::Train,
            rng: Some(rng),
            pending: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        ForwardCtx {
            mode: Mode::Eval,
            rng: None,
            pending: Vec::new(),
        }
    }

    pub fn new(mode: Mode, rng: Option<&'a mut Rng>) -> Self {
        ForwardCtx {
            mode,
            rng,
            pending: Vec::new(),
        }
    }

    /// Writes the accumulated running-statistic updates into `store`.
    pub fn commit(self, store: &mut ParameterStore) -> Result<()> {
        for (id, value) in self.pending {
            store.set_value(id, value)?;
        }
        Ok(())
    }

    fn rng(&mut self) -> Result<&mut Rng> {
        self.rng
            .as_deref_mut()
            .ok_or_else(|| Error::usage("dropout in training mode needs an rng"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenLayer {
    pub width: usize,
    pub batch_norm: bool,
    pub dropout: f64,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input: usize,
    pub hidden: Vec<HiddenLayer>,
    pub output: usize,
    pub output_activation: Option<Activation>,
}

impl MlpConfig {
    /// Every hidden layer gets the same batch-norm/dropout/LeakyReLU stack.
    pub fn uniform(
        input: usize,
        widths: &[usize],
        output: usize,
        batch_norm: bool,
        dropout: f64,
        output_activation: Option<Activation>,
    ) -> Self {
        MlpConfig {
            input,
            hidden: widths
                .iter()
                .map(|&width| HiddenLayer {
                    width,
                    batch_norm,
                    dropout,
                    activation: Activation::LeakyRelu,
                })
                .collect(),
            output,
            output_activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.output == 0 {
            return Err(Error::precondition("layer widths must be positive"));
        }
        for (i, layer) in self.hidden.iter().enumerate() {
            if layer.width == 0 {
                return Err(Error::precondition(format!("hidden layer {i} has width 0")));
            }
            if !(0.0..1.0).contains(&layer.dropout) {
                return Err(Error::precondition(format!(
                    "hidden layer {i}: dropout {} outside [0, 1)",
                    layer.dropout
                )));
            }
        }
        Ok(())
    }

    /// Widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input];
        w.extend(self.hidden.iter().map(|h| h.width));
        w.push(self.output);
        w
    }

    pub fn uses_batch_norm(&self) -> bool {
        self.hidden.iter().any(|h| h.batch_norm)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `out × in`; absent when the weight is supplied from outside.
    pub weight: Option<ParamId>,
    /// `1 × out`
    pub bias: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNormLayer {
    fn new(prefix: &str, width: usize, store: &mut ParameterStore) -> Self {
        BatchNormLayer {
            gamma: store.add(format!("{prefix}.gamma"), Matrix::filled(1, width, 1.0)),
            beta: store.add(format!("{prefix}.beta"), Matrix::zeros(1, width)),
            running_mean: store
                .add_buffer(format!("{prefix}.running_mean"), Matrix::zeros(1, width)),
            running_var: store.add_buffer(
                format!("{prefix}.running_var"),
                Matrix::filled(1, width, 1.0),
            ),
        }
    }

    pub fn forward(
        &self,
        store: &ParameterStore,
        tape: &mut Tape,
        x: Var,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        if !ctx.mode.batch_stats() {
            return tape.batch_norm_eval(
                x,
                gamma,
                beta,
                store.value(self.running_mean).as_slice(),
                store.value(self.running_var).as_slice(),
                BN_EPS,
            );
        }
        let n = tape.value(x).rows();
        if n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        let (out, stats) = tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
        self.record_running(store, &stats.mean, &stats.var, n, ctx);
        Ok(out)
    }

    /// Queues the momentum update of the running statistics.
    fn record_running(
        &self,
        store: &ParameterStore,
        mean: &[f64],
        var: &[f64],
        n: usize,
        ctx: &mut ForwardCtx<'_>,
    ) {
        let unbias = n as f64 / (n as f64 - 1.0);
        let blend = |old: &Matrix, new: &[f64], scale: f64| {
            Matrix::from_fn(1, new.len(), |_, j| {
                (1.0 - BN_MOMENTUM) * old.as_slice()[j] + BN_MOMENTUM * new[j] * scale
            })
        };
        let mean = blend(store.value(self.running_mean), mean, 1.0);
        let var = blend(store.value(self.running_var), var, unbias);
        ctx.pending.push((self.running_mean, mean));
        ctx.pending.push((self.running_var, var));
    }

    /// Batch norm followed by dropout (rate `dropout`, when given) and
    /// `activation`, recorded as one fused node.
    pub fn forward_block(
        &self,
        store: &ParameterStore,
        tape: &mut Tape,
        x: Var,
        dropout: Option<f64>,
        activation: Activation,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        let batch_stats = ctx.mode.batch_stats();
        let (mean, var) = if batch_stats {
            let n = tape.value(x).rows();
            if n < 2 {
                return Err(Error::BatchTooSmall(n));
            }
            let (mean, var) = column_moments(tape.value(x));
            self.record_running(store, &mean, &var, n, ctx);
            (mean, var)
        } else {
            (
                store.value(self.running_mean).as_slice().to_vec(),
                store.value(self.running_var).as_slice().to_vec(),
            )
        };
        let norm = BlockNorm {
            mean: &mean,
            var: &var,
            eps: BN_EPS,
            batch_stats,
        };
        let dropout = match dropout {
            Some(p) => Some((p, ctx.rng()?)),
            None => None,
        };
        tape.hidden_block(x, gamma, beta, norm, dropout, activation)
    }
}

/// Feed-forward network: per hidden layer linear → batch norm → dropout →
/// activation, then a linear output layer and optional output activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    cfg: MlpConfig,
    linears: Vec<Linear>,
    norms: Vec<Option<BatchNormLayer>>,
}

impl Mlp {
    /// Registers parameters under `prefix` in `store`. Linear layers use the
    /// uniform `±1/√fan_in` initialisation for weights and biases, drawn in
    /// layer order (weight before bias).
    pub fn new(
        cfg: MlpConfig,
        prefix: &str,
        store: &mut ParameterStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        Self::build(cfg, prefix, store, rng, true)
    }

    /// Like [`Mlp::new`] but without a first-layer weight matrix; the
    /// caller supplies the first-layer product to [`Mlp::forward_from_product`].
    pub fn without_first_weight(
        cfg: MlpConfig,
        prefix: &str,
        store: &mut ParameterStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        Self::build(cfg, prefix, store, rng, false)
    }

    fn build(
        cfg: MlpConfig,
        prefix: &str,
        store: &mut ParameterStore,
        rng: &mut Rng,
        first_weight: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let widths = cfg.widths();
        let mut linears = Vec::with_capacity(widths.len() - 1);
        for (l, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weight = if l > 0 || first_weight {
                let w = Matrix::from_fn(fan_out, fan_in, |_, _| rng.uniform_range(-bound, bound));
                Some(store.add(format!("{prefix}.linear{l}.weight"), w))
            } else {
                None
            };
            let b = Matrix::from_fn(1, fan_out, |_, _| rng.uniform_range(-bound, bound));
            let bias = store.add(format!("{prefix}.linear{l}.bias"), b);
            linears.push(Linear { weight, bias });
        }
        let norms = cfg
            .hidden
            .iter()
            .enumerate()
            .map(|(l, h)| {
                h.batch_norm
                    .then(|| BatchNormLayer::new(&format!("{prefix}.bn{l}"), h.width, store))
            })
            .collect();
        Ok(Mlp {
            cfg,
            linears,
            norms,
        })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.cfg
    }

    pub fn linears(&self) -> &[Linear] {
        &self.linears
    }

    pub fn norms(&self) -> &[Option<BatchNormLayer>] {
        &self.norms
    }

    pub fn first_weight(&self) -> Option<ParamId> {
        self.linears[0].weight
    }

    pub fn forward(
        &self,
        store: &ParameterStore,
        tape: &mut Tape,
        x: Var,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let w = self
            .first_weight()
            .ok_or_else(|| Error::usage("network has no first-layer weight"))?;
        let width = tape.value(x).cols();
        if width != self.cfg.input {
            return Err(Error::Shape {
                op: "mlp input",
                left: tape.value(x).shape(),
                right: (
                    self.cfg.hidden.first().map_or(self.cfg.output, |h| h.width),
                    self.cfg.input,
                ),
            });
        }
        let wv = tape.param(store, w);
        let z = tape.matmul_nt(x, wv)?;
        self.forward_from_product(store, tape, z, ctx)
    }

    /// Continues the forward pass from `x · W₁ᵀ` (first-layer product
    /// without bias).
    pub fn forward_from_product(
        &self,
        store: &ParameterStore,
        tape: &mut Tape,
        product: Var,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let bias = tape.param(store, self.linears[0].bias);
        let mut z = tape.add_row(product, bias)?;
        for (l, layer) in self.cfg.hidden.iter().enumerate() {
            let dropout =
                (layer.dropout > 0.0 && ctx.mode.dropout_active()).then_some(layer.dropout);
            if let Some(bn) = &self.norms[l] {
                z = bn.forward_block(store, tape, z, dropout, layer.activation, ctx)?;
            } else {
                if let Some(p) = dropout {
                    z = tape.dropout(z, p, ctx.rng()?)?;
                }
                z = tape.activation(z, layer.activation)?;
            }

            let next = &self.linears[l + 1];
            let w = next.weight.expect("only the first layer may lack a weight");
            let wv = tape.param(store, w);
            let bv = tape.param(store, next.bias);
            z = tape.affine(z, wv, bv)?;
        }
        match self.cfg.output_activation {
            Some(kind) => tape.activation(z, kind),
            None => Ok(z),
        }
    }

    /// Learnable scalars registered by this network.
    pub fn parameter_count(&self, store: &ParameterStore) -> usize {
        let mut ids: Vec<ParamId> = Vec::new();
        for lin in &self.linears {
            ids.extend(lin.weight);
            ids.push(lin.bias);
        }
        for bn in self.norms.iter().flatten() {
            ids.push(bn.gamma);
            ids.push(bn.beta);
        }
        ids.iter().map(|&id| store.value(id).len()).sum()
    }
}

/// Convenience wrapper: evaluates `mlp` on a matrix in the given mode.
pub fn mlp_forward(
    mlp: &Mlp,
    store: &ParameterStore,
    x: &Matrix,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Matrix> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let out = mlp.forward(store, &mut tape, xv, ctx)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = Rng::new(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.normal() * 3.0 + 1.5)
    }

    #[test]
    fn identity_linear_passes_input_through() {
        let mut store = ParameterStore::new();
        let mut rng = Rng::new(0);
        let cfg = MlpConfig::uniform(3, &[], 3, false, 0.0, None);
        let mlp = Mlp::new(cfg, "m", &mut store, &mut rng).unwrap();
        store
            .set_value(mlp.first_weight().unwrap(), Matrix::identity(3))
            .unwrap();
        store
            .set_value(mlp.linears()[0].bias, Matrix::zeros(1, 3))
            .unwrap();
        let x = random_batch(4, 3, 1);
        let y = mlp_forward(&mlp, &store, &x, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn batch_norm_train_output_is_standardised() {
        let mut store = ParameterStore::new();
        let bn = BatchNormLayer::new("bn", 4, &mut store);
        let x = random_batch(32, 4, 2);
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let mut rng = Rng::new(0);
        let mut ctx = ForwardCtx::train(&mut rng);
        let y = bn.forward(&store, &mut tape, xv, &mut ctx).unwrap();
        let y = tape.value(y);
        for j in 0..4 {
            let xc = x.column(j);
            let mu = xc.iter().sum::<f64>() / 32.0;
            let var = xc.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 32.0;
            let yc = y.column(j);
            let mean = yc.iter().sum::<f64>() / 32.0;
            let out_var = yc.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-8, "{mean}");
            // unit variance up to the eps term in the denominator
            assert!(
                (out_var * (var + BN_EPS) / var - 1.0).abs() < 1e-8,
                "{out_var}"
            );
            for i in 0..32 {
                let expected = (xc[i] - mu) / (var + BN_EPS).sqrt();
                assert!((yc[i] - expected).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn running_stats_move_by_momentum() {
        let mut store = ParameterStore::new();
        let bn = BatchNormLayer::new("bn", 1, &mut store);
        let x = Matrix::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.input(x);
        let mut rng = Rng::new(0);
        let mut ctx = ForwardCtx::train(&mut rng);
        bn.forward(&store, &mut tape, xv, &mut ctx).unwrap();
        ctx.commit(&mut store).unwrap();
        assert!((store.value(bn.running_mean).as_slice()[0] - 0.2).abs() < 1e-15);
        // unbiased variance of [1, 3] is 2
        assert!((store.value(bn.running_var).as_slice()[0] - (0.9 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn single_sample_batch_is_signalled() {
        let mut store = ParameterStore::new();
        let mut rng = Rng::new(0);
        let cfg = MlpConfig::uniform(2, &[4], 2, true, 0.0, Some(Activation::SoftmaxRows));
        let mlp = Mlp::new(cfg, "m", &mut store, &mut rng).unwrap();
        let x = Matrix::zeros(1, 2);
        let mut drop_rng = Rng::new(1);
        let err = mlp_forward(&mlp, &store, &x, &mut ForwardCtx::train(&mut drop_rng)).unwrap_err();
        assert!(matches!(err, Error::BatchTooSmall(1)));
        assert!(mlp_forward(&mlp, &store, &x, &mut ForwardCtx::eval()).is_ok());
    }

    #[test]
    fn no_dropout_train_equals_eval_with_frozen_stats() {
        let mut store = ParameterStore::new();
        let mut rng = Rng::new(3);
        let cfg = MlpConfig::uniform(5, &[8, 6], 3, true, 0.0, Some(Activation::SoftmaxRows));
        let mlp = Mlp::new(cfg, "m", &mut store, &mut rng).unwrap();
        let x = random_batch(6, 5, 4);
        let mut drop_rng = Rng::new(9);
        let frozen = mlp_forward(
            &mlp,
            &store,
            &x,
            &mut ForwardCtx::new(Mode::TrainFrozenStats, Some(&mut drop_rng)),
        )
        .unwrap();
        let eval = mlp_forward(&mlp, &store, &x, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(frozen, eval);
    }

    #[test]
    fn dropout_zeroes_and_rescales() {
        let mut rng = Rng::new(1);
        let mut tape = Tape::new();
        let x = tape.input(Matrix::filled(3, 200, 1.0));
        let y = tape.dropout(x, 0.5, &mut rng).unwrap();
        let mask = tape.value(y);
        let dropped = mask.as_slice().iter().filter(|&&m| m == 0.0).count();
        assert!(mask.as_slice().iter().all(|&m| m == 0.0 || m == 2.0));
        assert!(dropped > 200 && dropped < 400, "{dropped}");
    }

    #[test]
    fn eval_is_deterministic() {
        let mut store = ParameterStore::new();
        let mut rng = Rng::new(3);
        let cfg = MlpConfig::uniform(5, &[8], 2, true, 0.2, Some(Activation::SoftmaxRows));
        let mlp = Mlp::new(cfg, "m", &mut store, &mut rng).unwrap();
        let x = random_batch(4, 5, 4);
        let a = mlp_forward(&mlp, &store, &x, &mut ForwardCtx::eval()).unwrap();
        let b = mlp_forward(&mlp, &store, &x, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn invalid_dropout_rejected() {
        let cfg = MlpConfig::uniform(2, &[3], 1, false, 1.0, None);
        assert!(cfg.validate().is_err());
    }
}
