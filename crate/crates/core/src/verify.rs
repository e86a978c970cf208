//! Registry of finite-difference gradient checks: every differentiable
//! primitive plus small composite graphs from the models. Shared by the
//! `gradcheck` command and the test suites.

use serde::Serialize;

use crate::autodiff::{check_gradients_with, AutogradError, Graph, GradcheckReport, ParamId, ParamSet, Var, DEFAULT_STEP};
use crate::nn::Ctx;
use crate::rng::{self, Rng};
use crate::taco::{attention::Attention, TacoConfig, Tacotron, TextBatch};
use crate::tensor::Tensor;
use crate::vocoder::{WaveGlow, WaveGlowConfig};

/// A check passes when its max relative error is below this.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

type Build = Box<dyn Fn(&Graph, &[Var]) -> Result<Var, AutogradError>>;

/// A scalar function of some inputs, ready for checking.
pub struct Case {
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

pub struct GradcheckCase {
    pub name: &'static str,
    /// `"autodiff"`, `"taco"` or `"vocoder"`.
    pub module: &'static str,
    make: fn(&mut Rng) -> Case,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub module: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub passed: bool,
    pub error: Option<String>,
}

fn randn(r: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng::normal(r, 1.0))
}

/// Contracts `x` with a fixed random tensor so every output entry gets a
/// distinct weight in the scalar loss.
fn project(g: &Graph, x: Var, seed: u64) -> Result<Var, AutogradError> {
    let shape = g.shape(x);
    let mut r = rng::seeded(seed);
    let w = g.constant(randn(&mut r, &shape));
    g.sum(g.mul(x, w)?)
}

fn unary(r: &mut Rng, f: fn(&Graph, Var) -> Result<Var, AutogradError>) -> Case {
    Case { inputs: vec![randn(r, &[3, 4])], build: Box::new(move |g, v| project(g, f(g, v[0])?, 1)) }
}

fn case(inputs: Vec<Tensor>, build: impl Fn(&Graph, &[Var]) -> Result<Var, AutogradError> + 'static) -> Case {
    Case { inputs, build: Box::new(build) }
}

/// Checks a model's composite with respect to selected parameters: the
/// parameter tensors become inputs and are routed in with `Graph::bind`.
fn param_case(params: &ParamSet, ids: Vec<ParamId>, extra: Vec<Tensor>, f: impl Fn(&Graph, &[Var]) -> Result<Var, AutogradError> + 'static) -> Case {
    let n = ids.len();
    let mut inputs: Vec<Tensor> = ids.iter().map(|&id| params.value(id).clone()).collect();
    inputs.extend(extra);
    case(inputs, move |g, v| {
        for (&id, &var) in ids.iter().zip(&v[..n]) {
            g.bind(id, var);
        }
        f(g, &v[n..])
    })
}

fn to_autograd(e: impl std::fmt::Display) -> AutogradError {
    AutogradError::InvalidArgument { op: "composite", detail: e.to_string() }
}

fn tiny_taco_config() -> TacoConfig {
    TacoConfig {
        n_symbols: 8,
        n_mels: 3,
        embedding_dim: 4,
        encoder_conv_channels: 4,
        encoder_conv_layers: 1,
        encoder_conv_width: 3,
        encoder_lstm_units: 3,
        prenet_units: 4,
        prenet_layers: 1,
        attention_lstm_units: 4,
        decoder_lstm_units: 4,
        attention_dim: 4,
        location_filters: 2,
        location_kernel: 3,
        postnet_channels: 4,
        postnet_layers: 2,
        postnet_width: 3,
        ..TacoConfig::full(8)
    }
}

fn encoder_slice(r: &mut Rng) -> Case {
    let seed = rand::Rng::random(r);
    let model = Tacotron::new(tiny_taco_config(), seed).expect("valid tiny config");
    let ids: Vec<ParamId> = model.params.iter().filter(|(_, p)| p.trainable() && p.name().starts_with("encoder.")).map(|(id, _)| id).collect();
    let params = model.params.clone();
    param_case(&params, ids, vec![], move |g, _| {
        let text = TextBatch::new(&[&[1, 5, 2, 7], &[3, 6]]).map_err(to_autograd)?;
        // fixed dropout masks so every evaluation sees the same function
        let mut dr = rng::seeded(seed ^ 0x5eed);
        let mut ctx = Ctx::new(true, &mut dr);
        let h = model.encode(g, &text, &mut ctx).map_err(to_autograd)?;
        project(g, h, 2)
    })
}

fn attention_step(r: &mut Rng) -> Case {
    let mut params = ParamSet::new();
    let att = Attention::new(&mut params, "att", 4, 6, 5, Some((3, 3)), r);
    let ids: Vec<ParamId> = params.ids().collect();
    let (s, h) = (randn(r, &[2, 4]), randn(r, &[2, 5, 6]));
    let cum = Tensor::from_fn(&[2, 5], |_| rng::uniform(r, 0.0, 1.0));
    let p = params.clone();
    param_case(&params, ids, vec![s, h, cum], move |g, v| {
        let mask = vec![true, true, true, true, true, true, true, true, true, false];
        let mem = att.prepare(g, &p, v[1], mask)?;
        let e = att.energies(g, &p, &mem, v[0], v[2])?;
        let (alpha, ctx) = att.attend(g, &mem, e)?;
        g.add(project(g, alpha, 3)?, project(g, ctx, 4)?)
    })
}

fn vocoder_nll(r: &mut Rng) -> Case {
    let cfg = WaveGlowConfig { n_flows: 2, n_mels: 3, hop: 16, wn_layers: 2, wn_channels: 4, wn_kernel: 3, log_s_clamp: 7.0 };
    let mut model = WaveGlow::new(cfg, rand::Rng::random(r)).expect("valid config");
    for id in model.end_params() {
        let shape = model.params.value(id).shape().to_vec();
        model.params.set_value(id, Tensor::from_fn(&shape, |_| rng::normal(r, 0.3)));
    }
    let ids: Vec<ParamId> = model.params.ids().collect();
    // 64 samples = 4 frames of 16
    let z = Tensor::from_fn(&[1, 8, 8], |_| rng::uniform(r, -0.5, 0.5));
    let mel = randn(r, &[1, 3, 4]);
    let params = model.params.clone();
    param_case(&params, ids, vec![z, mel], move |g, v| {
        let cond = model.conditioning_graph(g, v[1]).map_err(to_autograd)?;
        Ok(model.nll_squeezed(g, v[0], cond).map_err(to_autograd)?.loss)
    })
}

pub fn registry() -> Vec<GradcheckCase> {
    fn c(name: &'static str, make: fn(&mut Rng) -> Case) -> GradcheckCase {
        GradcheckCase { name, module: "autodiff", make }
    }
    vec![
        c("add", |r| case(vec![randn(r, &[3, 4]), randn(r, &[4])], |g, v| project(g, g.add(v[0], v[1])?, 1))),
        c("sub", |r| case(vec![randn(r, &[2, 3, 4]), randn(r, &[3, 1])], |g, v| project(g, g.sub(v[0], v[1])?, 1))),
        c("mul", |r| case(vec![randn(r, &[3, 4]), randn(r, &[1, 4])], |g, v| project(g, g.mul(v[0], v[1])?, 1))),
        c("scale", |r| unary(r, |g, x| g.scale(x, -1.7))),
        c("add_scalar", |r| unary(r, |g, x| g.add_scalar(x, 0.3))),
        c("relu", |r| unary(r, |g, x| g.relu(x))),
        c("tanh", |r| unary(r, |g, x| g.tanh(x))),
        c("sigmoid", |r| unary(r, |g, x| g.sigmoid(x))),
        c("exp", |r| unary(r, |g, x| g.exp(x))),
        c("clamp", |r| unary(r, |g, x| g.clamp(x, -0.5, 0.5))),
        c("sum", |r| case(vec![randn(r, &[3, 4])], |g, v| g.scale(g.sum(g.mul(v[0], v[0])?)?, 0.5))),
        c("mean", |r| case(vec![randn(r, &[3, 4])], |g, v| g.mean(g.mul(v[0], v[0])?))),
        c("mean_axis", |r| case(vec![randn(r, &[2, 3, 4])], |g, v| project(g, g.mean_axis(v[0], 1)?, 1))),
        c("reshape", |r| case(vec![randn(r, &[2, 6])], |g, v| project(g, g.reshape(v[0], &[3, 4])?, 1))),
        c("transpose", |r| case(vec![randn(r, &[2, 3, 4])], |g, v| project(g, g.transpose(v[0], 0, 2)?, 1))),
        c("concat", |r| case(vec![randn(r, &[2, 3]), randn(r, &[2, 2])], |g, v| project(g, g.concat(&[v[0], v[1]], 1)?, 1))),
        c("slice", |r| case(vec![randn(r, &[2, 5, 3])], |g, v| project(g, g.slice(v[0], 1, 1, 3)?, 1))),
        c("matmul", |r| case(vec![randn(r, &[2, 3, 4]), randn(r, &[2, 4, 5])], |g, v| project(g, g.matmul(v[0], v[1])?, 1))),
        c("matmul_shared", |r| case(vec![randn(r, &[2, 3, 4]), randn(r, &[4, 5])], |g, v| project(g, g.matmul(v[0], v[1])?, 1))),
        c("linear", |r| {
            case(vec![randn(r, &[2, 3, 4]), randn(r, &[5, 4]), randn(r, &[5])], |g, v| project(g, g.linear(v[0], v[1], Some(v[2]))?, 1))
        }),
        c("conv1d", |r| {
            case(vec![randn(r, &[2, 3, 7]), randn(r, &[4, 3, 3]), randn(r, &[4])], |g, v| project(g, g.conv1d(v[0], v[1], Some(v[2]), 2)?, 1))
        }),
        c("conv_transpose1d", |r| {
            case(vec![randn(r, &[2, 3, 4]), randn(r, &[3, 2, 6]), randn(r, &[2])], |g, v| {
                project(g, g.conv_transpose1d(v[0], v[1], Some(v[2]), 3)?, 1)
            })
        }),
        c("embedding", |r| case(vec![randn(r, &[6, 4])], |g, v| project(g, g.embedding(&[0, 3, 3, 5, 1, 0], &[2, 3], v[0])?, 1))),
        c("batch_norm", |r| {
            case(vec![randn(r, &[3, 2, 4]), randn(r, &[2]), randn(r, &[2])], |g, v| project(g, g.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0, 1))
        }),
        c("batch_norm_eval", |r| {
            case(vec![randn(r, &[3, 2, 4]), randn(r, &[2]), randn(r, &[2])], |g, v| {
                project(g, g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0], 1e-5)?, 1)
            })
        }),
        c("softmax", |r| case(vec![randn(r, &[3, 5])], |g, v| project(g, g.softmax(v[0], 1, None)?, 1))),
        c("softmax_masked", |r| {
            case(vec![randn(r, &[2, 4])], |g, v| project(g, g.softmax(v[0], 1, Some(&[true, true, false, true, true, true, true, false]))?, 1))
        }),
        c("dropout", |r| {
            case(vec![randn(r, &[3, 4])], |g, v| {
                let mut dr = rng::seeded(9);
                project(g, g.dropout(v[0], 0.5, &mut dr)?, 1)
            })
        }),
        c("lstm_cell", |r| case(vec![randn(r, &[2, 12]), randn(r, &[2, 3])], |g, v| project(g, g.lstm_pointwise(v[0], v[1])?, 1))),
        c("mse_loss", |r| {
            let target = randn(r, &[2, 3]);
            case(vec![randn(r, &[2, 3]), target], |g, v| {
                let mask = Tensor::new(&[2, 3], vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0]);
                g.mse_loss(v[0], v[1], Some(&mask))
            })
        }),
        c("bce_with_logits_loss", |r| {
            case(vec![randn(r, &[2, 4])], |g, v| {
                let targets = Tensor::new(&[2, 4], vec![0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0]);
                let mask = Tensor::new(&[2, 4], vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
                g.bce_with_logits_loss(v[0], &targets, Some(&mask), 2.5)
            })
        }),
        c("log_abs_det", |r| {
            let mut m = randn(r, &[4, 4]);
            for i in 0..4 {
                m.data_mut()[i * 5] += 3.0;
            }
            case(vec![m], |g, v| g.log_abs_det(v[0]))
        }),
        GradcheckCase { name: "encoder_slice", module: "taco", make: encoder_slice },
        GradcheckCase { name: "attention_step", module: "taco", make: attention_step },
        GradcheckCase { name: "vocoder_nll_2flow", module: "vocoder", make: vocoder_nll },
    ]
}

/// Runs the registered checks whose module matches `module` (all when
/// `None`). Inputs for each case derive from `seed` and the case index, so a
/// report is reproducible. `fault` corrupts the backward rule of the named
/// graph op in every recording graph.
pub fn run_gradchecks(module: Option<&str>, seed: u64, fault: Option<&str>) -> Vec<CaseResult> {
    registry()
        .into_iter()
        .enumerate()
        .filter(|(_, c)| module.is_none_or(|m| m == c.module))
        .map(|(i, c)| {
            let mut r = rng::derive(seed, i as u64);
            let Case { inputs, build } = (c.make)(&mut r);
            let make_graph = || match fault {
                Some(op) => Graph::new().with_fault(op),
                None => Graph::new(),
            };
            let res: Result<GradcheckReport, _> = check_gradients_with(build, &inputs, DEFAULT_STEP, make_graph);
            match res {
                Ok(rep) => CaseResult {
                    name: c.name.into(),
                    module: c.module.into(),
                    max_rel_error: rep.max_rel_error,
                    max_abs_error: rep.max_abs_error,
                    checked: rep.checked,
                    passed: rep.passes(GRADCHECK_TOLERANCE),
                    error: None,
                },
                Err(e) => CaseResult {
                    name: c.name.into(),
                    module: c.module.into(),
                    max_rel_error: f64::INFINITY,
                    max_abs_error: f64::INFINITY,
                    checked: 0,
                    passed: false,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

/// Names of the modules that have registered checks.
pub fn modules() -> Vec<&'static str> {
    let mut m: Vec<&'static str> = registry().iter().map(|c| c.module).collect();
    m.dedup();
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes() {
        let results = run_gradchecks(None, 7, None);
        assert_eq!(results.len(), registry().len());
        for r in &results {
            assert!(r.passed, "{} failed: {:?} rel {:e}", r.name, r.error, r.max_rel_error);
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn corrupted_rule_is_caught() {
        let results = run_gradchecks(Some("autodiff"), 7, Some("tanh"));
        let bad: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
        assert_eq!(bad, vec!["tanh"]);
    }

    #[test]
    fn reports_are_reproducible() {
        assert_eq!(run_gradchecks(Some("vocoder"), 3, None), run_gradchecks(Some("vocoder"), 3, None));
    }
}
