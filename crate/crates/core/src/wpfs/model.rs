use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::network::{ClassWeights, ForwardCtx, Mlp, MlpConfig, Mode};
use crate::numerics::{Activation, Matrix, ParamId, ParameterStore, Rng, Tape, Var};

/// Which model a run trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Wpfs,
    Mlp,
    #[serde(rename = "wpfs-nospn")]
    WpfsNoSpn,
    #[serde(rename = "wpfs-nowpn")]
    WpfsNoWpn,
    /// Both auxiliary networks off: a directly learned first layer, which
    /// must train exactly like the baseline.
    #[serde(rename = "wpfs-nowpn-nospn")]
    WpfsNoWpnNoSpn,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Wpfs,
        Method::Mlp,
        Method::WpfsNoSpn,
        Method::WpfsNoWpn,
        Method::WpfsNoWpnNoSpn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Wpfs => "wpfs",
            Method::Mlp => "mlp",
            Method::WpfsNoSpn => "wpfs-nospn",
            Method::WpfsNoWpn => "wpfs-nowpn",
            Method::WpfsNoWpnNoSpn => "wpfs-nowpn-nospn",
        }
    }

    /// `(use_wpn, use_spn)` for the WPFS variants; `None` for the baseline.
    pub fn flags(self) -> Option<(bool, bool)> {
        match self {
            Method::Wpfs => Some((true, true)),
            Method::WpfsNoSpn => Some((true, false)),
            Method::WpfsNoWpn => Some((false, true)),
            Method::WpfsNoWpnNoSpn => Some((false, false)),
            Method::Mlp => None,
        }
    }

    pub fn needs_embedding(self) -> bool {
        !matches!(self, Method::Mlp)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::precondition(format!(
                    "unknown method '{s}'; valid methods: {}",
                    valid.join(", ")
                ))
            })
    }
}

/// Architecture shared by the classifier and the two auxiliary networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// Classifier hidden widths; the first one is K, the height of W¹.
    pub classifier_hidden: Vec<usize>,
    /// Hidden widths of the weight predictor and sparsity networks
    /// (their output heads come on top).
    pub aux_hidden: Vec<usize>,
    pub dropout: f64,
    pub batch_norm: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            classifier_hidden: vec![100, 100, 10],
            aux_hidden: vec![100, 100, 100],
            dropout: 0.2,
            batch_norm: true,
        }
    }
}

impl Architecture {
    /// Width K of the first hidden layer.
    pub fn first_width(&self) -> Result<usize> {
        self.classifier_hidden
            .first()
            .copied()
            .ok_or_else(|| Error::precondition("classifier needs at least one hidden layer"))
    }

    pub fn classifier_config(&self, features: usize, classes: usize) -> MlpConfig {
        MlpConfig::uniform(
            features,
            &self.classifier_hidden,
            classes,
            self.batch_norm,
            self.dropout,
            Some(Activation::SoftmaxRows),
        )
    }

    pub fn wpn_config(&self, embedding_size: usize) -> Result<MlpConfig> {
        Ok(MlpConfig::uniform(
            embedding_size,
            &self.aux_hidden,
            self.first_width()?,
            self.batch_norm,
            self.dropout,
            Some(Activation::Tanh),
        ))
    }

    pub fn spn_config(&self, embedding_size: usize) -> MlpConfig {
        MlpConfig::uniform(
            embedding_size,
            &self.aux_hidden,
            1,
            self.batch_norm,
            self.dropout,
            Some(Activation::Sigmoid),
        )
    }
}

/// Output of a forward pass: class probabilities and, when the sparsity
/// network is active, the `D × 1` importance scores.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub probs: Var,
    pub scores: Option<Var>,
}

/// First-layer weights as recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub enum FirstLayerWeight {
    /// `D × K`: row `j` is the (scaled) predicted weight vector of feature `j`.
    Predicted(Var),
    /// `K × D`: a directly learned matrix, columns scaled if scores exist.
    Direct(Var),
}

/// The network structure of a WPFS model; parameters live in a separate
/// [`ParameterStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WpfsNet {
    pub architecture: Architecture,
    pub features: usize,
    pub classes: usize,
    pub use_wpn: bool,
    pub use_spn: bool,
    pub embedding: EmbeddingMatrix,
    wpn: Option<Mlp>,
    spn: Option<Mlp>,
    classifier: Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WpfsModel {
    pub net: WpfsNet,
    pub params: ParameterStore,
}

impl WpfsModel {
    /// Initialises a model; draws happen in the order weight predictor,
    /// sparsity network, classifier.
    pub fn new(
        architecture: Architecture,
        embedding: EmbeddingMatrix,
        classes: usize,
        use_wpn: bool,
        use_spn: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if !embedding.matrix.is_finite() {
            return Err(Error::precondition("embeddings must be finite"));
        }
        let features = embedding.features();
        let m = embedding.size();
        let mut params = ParameterStore::new();
        let wpn = if use_wpn {
            Some(Mlp::new(
                architecture.wpn_config(m)?,
                "wpn",
                &mut params,
                rng,
            )?)
        } else {
            None
        };
        let spn = if use_spn {
            Some(Mlp::new(
                architecture.spn_config(m),
                "spn",
                &mut params,
                rng,
            )?)
        } else {
            None
        };
        let cfg = architecture.classifier_config(features, classes);
        let classifier = if use_wpn {
            Mlp::without_first_weight(cfg, "classifier", &mut params, rng)?
        } else {
            Mlp::new(cfg, "classifier", &mut params, rng)?
        };
        Ok(WpfsModel {
            net: WpfsNet {
                architecture,
                features,
                classes,
                use_wpn,
                use_spn,
                embedding,
                wpn,
                spn,
                classifier,
            },
            params,
        })
    }
}

impl WpfsNet {
    pub fn classifier(&self) -> &Mlp {
        &self.classifier
    }

    pub fn wpn(&self) -> Option<&Mlp> {
        self.wpn.as_ref()
    }

    pub fn spn(&self) -> Option<&Mlp> {
        self.spn.as_ref()
    }

    /// The directly learned `K × D` matrix when the weight predictor is off.
    pub fn direct_weight(&self) -> Option<ParamId> {
        self.classifier.first_weight()
    }

    /// Runs the auxiliary networks over all `D` embeddings as one batch.
    ///
    /// Returns the unscaled predicted (or direct) weights, and the scores.
    pub fn auxiliary(
        &self,
        store: &ParameterStore,
        tape: &mut Tape,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<(FirstLayerWeight, Option<Var>)> {
        let weight = match (&self.wpn, self.direct_weight()) {
            (Some(wpn), _) => {
                let e = tape.input(self.embedding.matrix.clone());
                FirstLayerWeight::Predicted(wpn.forward(store, tape, e, ctx)?)
            }
            (None, Some(id)) => FirstLayerWeight::Direct(tape.param(store, id)),
            (None, None) => return Err(Error::usage("model has no first-layer weights")),
        };
        let scores = match &self.spn {
            Some(spn) => {
                let e = tape.input(self.embedding.matrix.clone());
                Some(spn.forward(store, tape, e, ctx)?)
            }
            None => None,
        };
        Ok((weight, scores))
    }

    /// First-layer weights with each feature's column scaled by its score.
    pub fn first_layer(
        &self,
        store: &ParameterStore,
        tape: &mut Tape,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<(FirstLayerWeight, Option<Var>)> {
        let (weight, scores) = self.auxiliary(store, tape, ctx)?;
        let weight = match (weight, scores) {
            (FirstLayerWeight::Predicted(g), Some(s)) => {
                FirstLayerWeight::Predicted(tape.scale_rows(g, s)?)
            }
            (FirstLayerWeight::Direct(w), Some(s)) => {
                FirstLayerWeight::Direct(tape.scale_cols(w, s)?)
            }
            (w, None) => w,
        };
        Ok((weight, scores))
    }

    pub fn forward(
        &self,
        store: &ParameterStore,
        tape: &mut Tape,
        x: Var,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<ForwardOutput> {
        let xs = tape.value(x).shape();
        if xs.1 != self.features {
            return Err(Error::Shape {
                op: "wpfs input",
                left: xs,
                right: (xs.0, self.features),
            });
        }
        let (weight, scores) = self.first_layer(store, tape, ctx)?;
        let product = match weight {
            FirstLayerWeight::Predicted(g) => tape.matmul(x, g)?,
            FirstLayerWeight::Direct(w) => tape.matmul_nt(x, w)?,
        };
        let probs = self
            .classifier
            .forward_from_product(store, tape, product, ctx)?;
        Ok(ForwardOutput { probs, scores })
    }

    /// Learnable scalars in each part of the model.
    pub fn parameter_breakdown(&self, store: &ParameterStore) -> ParameterBreakdown {
        ParameterBreakdown {
            classifier: self.classifier.parameter_count(store),
            wpn: self.wpn.as_ref().map_or(0, |n| n.parameter_count(store)),
            spn: self.spn.as_ref().map_or(0, |n| n.parameter_count(store)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterBreakdown {
    /// Includes the first-layer bias, and W¹ itself when learned directly.
    pub classifier: usize,
    pub wpn: usize,
    pub spn: usize,
}

/// The plain feed-forward baseline with a directly learned first layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpBaseline {
    pub net: Mlp,
    pub params: ParameterStore,
}

impl MlpBaseline {
    pub fn new(
        architecture: &Architecture,
        features: usize,
        classes: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut params = ParameterStore::new();
        let net = Mlp::new(
            architecture.classifier_config(features, classes),
            "classifier",
            &mut params,
            rng,
        )?;
        Ok(MlpBaseline { net, params })
    }
}

/// Any model the training loop can drive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Model {
    Wpfs(WpfsModel),
    Mlp(MlpBaseline),
}

impl Model {
    /// Builds the model for `method`. The embedding is required for every
    /// WPFS variant (the weight predictor and the sparsity network both read it).
    pub fn build(
        method: Method,
        architecture: Architecture,
        features: usize,
        classes: usize,
        embedding: Option<EmbeddingMatrix>,
        rng: &mut Rng,
    ) -> Result<Self> {
        match method.flags() {
            None => Ok(Model::Mlp(MlpBaseline::new(
                &architecture,
                features,
                classes,
                rng,
            )?)),
            Some((use_wpn, use_spn)) => {
                let embedding = embedding.ok_or_else(|| {
                    Error::usage(format!("method {method} needs feature embeddings"))
                })?;
                if embedding.features() != features {
                    return Err(Error::Shape {
                        op: "embedding rows",
                        left: embedding.matrix.shape(),
                        right: (features, embedding.size()),
                    });
                }
                Ok(Model::Wpfs(WpfsModel::new(
                    architecture,
                    embedding,
                    classes,
                    use_wpn,
                    use_spn,
                    rng,
                )?))
            }
        }
    }

    pub fn params(&self) -> &ParameterStore {
        match self {
            Model::Wpfs(m) => &m.params,
            Model::Mlp(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        match self {
            Model::Wpfs(m) => &mut m.params,
            Model::Mlp(m) => &mut m.params,
        }
    }

    pub fn features(&self) -> usize {
        match self {
            Model::Wpfs(m) => m.net.features,
            Model::Mlp(m) => m.net.config().input,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Model::Wpfs(m) => m.net.classes,
            Model::Mlp(m) => m.net.config().output,
        }
    }

    pub fn uses_batch_norm(&self) -> bool {
        match self {
            Model::Wpfs(m) => m.net.architecture.batch_norm,
            Model::Mlp(m) => m.net.config().uses_batch_norm(),
        }
    }

    pub fn forward_with(
        &self,
        store: &ParameterStore,
        tape: &mut Tape,
        x: Var,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<ForwardOutput> {
        match self {
            Model::Wpfs(m) => m.net.forward(store, tape, x, ctx),
            Model::Mlp(m) => Ok(ForwardOutput {
                probs: m.net.forward(store, tape, x, ctx)?,
                scores: None,
            }),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<ForwardOutput> {
        self.forward_with(self.params(), tape, x, ctx)
    }

    /// Class probabilities in evaluation mode.
    pub fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let out = self.forward(&mut tape, xv, &mut ForwardCtx::eval())?;
        Ok(tape.value(out.probs).clone())
    }

    /// Arg-max class per row in evaluation mode; ties go to the lowest index.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.predict_proba(x)?))
    }
}

pub fn argmax_rows(probs: &Matrix) -> Vec<usize> {
    (0..probs.rows())
        .map(|i| {
            let row = probs.row(i);
            let mut best = 0;
            for (c, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Weighted cross-entropy plus `λ · Σ s_j`, recorded on the tape.
///
/// Without scores (sparsity network off) the penalty term is absent.
pub fn total_loss(
    tape: &mut Tape,
    probs: Var,
    labels: &[usize],
    weights: &ClassWeights,
    scores: Option<Var>,
    lambda: f64,
) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::precondition(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    let ce = tape.weighted_cross_entropy(probs, labels, weights.as_slice())?;
    match scores {
        Some(s) if lambda > 0.0 => {
            let total = tape.sum(s);
            let penalty = tape.scale(total, lambda);
            tape.add(ce, penalty)
        }
        _ => Ok(ce),
    }
}

/// Plain-value form of the objective.
pub fn total_loss_value(cross_entropy: f64, scores: &[f64], lambda: f64) -> f64 {
    if lambda == 0.0 {
        return cross_entropy;
    }
    cross_entropy + lambda * scores.iter().sum::<f64>()
}

/// `W¹` as a `K × D` matrix and the scores `s` (all ones without a
/// sparsity network), computed in the given mode.
pub fn assemble_first_layer(
    model: &WpfsModel,
    mode: Mode,
    rng: Option<&mut Rng>,
) -> Result<(Matrix, Vec<f64>)> {
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::new(mode, rng);
    let (weight, scores) = model.net.first_layer(&model.params, &mut tape, &mut ctx)?;
    let w1 = match weight {
        FirstLayerWeight::Predicted(g) => tape.value(g).transpose(),
        FirstLayerWeight::Direct(w) => tape.value(w).clone(),
    };
    let s = match scores {
        Some(s) => tape.value(s).as_slice().to_vec(),
        None => vec![1.0; model.net.features],
    };
    Ok((w1, s))
}
