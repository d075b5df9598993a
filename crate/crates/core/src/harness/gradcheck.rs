//! Finite-difference checks of every tape primitive and of the full model
//! loss, run in `f64`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::codec::LatentBlock;
use crate::error::Result;
use crate::model::{GivTransformer, ModelConfig};
use crate::tensor::{grad_check, grad_check_params, Tape, Tensor, Var};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-3;
pub const MODEL_TOLERANCE: f64 = 1e-2;
const STEP: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckResult {
    pub name: String,
    pub seed: u64,
    pub error: f64,
    pub tolerance: f64,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

struct Gen(ChaCha8Rng);

impl Gen {
    fn values(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(&mut self.0)).collect()
    }

    fn tensor(&mut self, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), self.values(n)).expect("valid shape")
    }
}

/// `Σ w·y` with fixed random weights, so that every output element reaches
/// the scalar with a distinct sensitivity.
fn project(tape: &mut Tape<f64>, y: Var, weights: &[f64]) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = tape.constant(Tensor::new(shape, weights[..n].to_vec())?);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

type Check = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>;

/// Checks every primitive at `seed`; binary operations are checked in each
/// argument separately.
pub fn primitive_checks(seed: u64) -> Result<Vec<GradCheckResult>> {
    let mut g = Gen(ChaCha8Rng::seed_from_u64(seed));
    let w = g.values(512);
    let mut cases: Vec<(&str, Tensor<f64>, Check)> = Vec::new();
    macro_rules! case {
        ($name:expr, $point:expr, |$t:ident, $x:ident| $body:expr) => {{
            let w = w.clone();
            let f: Check = Box::new(move |$t: &mut Tape<f64>, $x: Var| {
                let y = $body?;
                project($t, y, &w)
            });
            cases.push(($name, $point, f));
        }};
    }

    let other = g.tensor(&[3, 4]);
    let rhs = g.tensor(&[4, 5]);
    let lhs = g.tensor(&[2, 3]);
    let brhs = g.tensor(&[2, 4, 5]);
    let brhs_t = g.tensor(&[2, 5, 4]);
    let blhs = g.tensor(&[2, 3, 4]);
    let row = g.tensor(&[4]);
    let base = g.tensor(&[3, 4]);
    let kv = (g.tensor(&[6, 4]), g.tensor(&[6, 4]));
    let q = g.tensor(&[5, 4]);
    let gain = g.tensor(&[4]);
    let bias = g.tensor(&[4]);
    let target = g.values(12);
    let parts = (g.tensor(&[2, 4]), g.tensor(&[1, 4]));

    let c = other.clone();
    case!("add/lhs", g.tensor(&[3, 4]), |t, x| {
        let b = t.constant(c.clone());
        t.add(x, b)
    });
    let c = other.clone();
    case!("add/rhs", g.tensor(&[3, 4]), |t, x| {
        let a = t.constant(c.clone());
        t.add(a, x)
    });
    let c = other.clone();
    case!("sub/lhs", g.tensor(&[3, 4]), |t, x| {
        let b = t.constant(c.clone());
        t.sub(x, b)
    });
    let c = other.clone();
    case!("sub/rhs", g.tensor(&[3, 4]), |t, x| {
        let a = t.constant(c.clone());
        t.sub(a, x)
    });
    let c = other.clone();
    case!("mul/lhs", g.tensor(&[3, 4]), |t, x| {
        let b = t.constant(c.clone());
        t.mul(x, b)
    });
    case!("mul/self", g.tensor(&[3, 4]), |t, x| t.mul(x, x));
    case!("scale", g.tensor(&[3, 4]), |t, x| Ok::<_, crate::Error>(
        t.scale(x, -1.7)
    ));
    let c = rhs.clone();
    case!("matmul/lhs", g.tensor(&[3, 4]), |t, x| {
        let b = t.constant(c.clone());
        t.matmul(x, b)
    });
    let c = lhs.clone();
    case!("matmul/rhs", g.tensor(&[3, 4]), |t, x| {
        let a = t.constant(c.clone());
        t.matmul(a, x)
    });
    let c = brhs.clone();
    case!("batch_matmul/lhs", g.tensor(&[2, 3, 4]), |t, x| {
        let b = t.constant(c.clone());
        t.batch_matmul(x, b, false)
    });
    let c = blhs.clone();
    case!("batch_matmul/rhs", g.tensor(&[2, 4, 5]), |t, x| {
        let a = t.constant(c.clone());
        t.batch_matmul(a, x, false)
    });
    let c = blhs.clone();
    case!("batch_matmul/rhs_transposed", brhs_t.clone(), |t, x| {
        let a = t.constant(c.clone());
        t.batch_matmul(a, x, true)
    });
    let c = row.clone();
    case!("add_row/input", g.tensor(&[3, 4]), |t, x| {
        let r = t.constant(c.clone());
        t.add_row(x, r)
    });
    let c = base.clone();
    case!("add_row/row", g.tensor(&[4]), |t, x| {
        let b = t.constant(c.clone());
        t.add_row(b, x)
    });
    case!("gelu", g.tensor(&[3, 4]), |t, x| Ok::<_, crate::Error>(t.gelu(x)));
    case!("silu", g.tensor(&[3, 4]), |t, x| Ok::<_, crate::Error>(t.silu(x)));
    case!("softmax/rows", g.tensor(&[3, 4]), |t, x| t.softmax(x, 1));
    case!("softmax/columns", g.tensor(&[3, 4]), |t, x| t.softmax(x, 0));
    for (name, which) in [("attention/query", 0), ("attention/key", 1), ("attention/value", 2)] {
        let (q, k, v) = (q.clone(), kv.0.clone(), kv.1.clone());
        let point = [&q, &k, &v][which].clone();
        case!(name, point, |t, x| {
            let mut vars = [None, None, None];
            for (i, val) in [&q, &k, &v].into_iter().enumerate() {
                vars[i] = Some(if i == which { x } else { t.constant(val.clone()) });
            }
            t.attention(vars[0].unwrap(), vars[1].unwrap(), vars[2].unwrap(), 2)
        });
    }
    let (gn, bs) = (gain.clone(), bias.clone());
    case!("layer_norm/input", g.tensor(&[3, 4]), |t, x| {
        let (a, b) = (t.constant(gn.clone()), t.constant(bs.clone()));
        t.layer_norm(x, a, b, 1e-5)
    });
    let (xs, bs) = (base.clone(), bias.clone());
    case!("layer_norm/gain", gain.clone(), |t, x| {
        let (a, b) = (t.constant(xs.clone()), t.constant(bs.clone()));
        t.layer_norm(a, x, b, 1e-5)
    });
    let (xs, gn) = (base.clone(), gain.clone());
    case!("layer_norm/bias", bias.clone(), |t, x| {
        let (a, b) = (t.constant(xs.clone()), t.constant(gn.clone()));
        t.layer_norm(a, b, x, 1e-5)
    });
    case!("reshape", g.tensor(&[3, 4]), |t, x| t.reshape(x, vec![2, 6]));
    case!("slice_cols", g.tensor(&[3, 4]), |t, x| t.slice_cols(x, 1, 2));
    case!("slice_rows", g.tensor(&[3, 4]), |t, x| t.slice_rows(x, 1, 3));
    let p = parts.clone();
    case!("concat_rows", g.tensor(&[3, 4]), |t, x| {
        let (a, b) = (t.constant(p.0.clone()), t.constant(p.1.clone()));
        t.concat_rows(&[a, x, b, x])
    });
    case!("embedding", g.tensor(&[5, 4]), |t, x| t.embedding(x, &[3, 0, 3, 4, 1]));

    let mut results = Vec::new();
    for (name, point, f) in cases {
        results.push(GradCheckResult {
            name: name.to_string(),
            seed,
            error: grad_check(f, &point, STEP)?,
            tolerance: PRIMITIVE_TOLERANCE,
        });
    }
    // Reductions are the scalar themselves.
    let reductions: [(&str, Check); 3] = [
        ("sum", Box::new(|t, x| Ok(t.sum(x)))),
        ("mean", Box::new(|t, x| Ok(t.mean(x)))),
        ("mse", Box::new(move |t, x| t.mse(x, &target))),
    ];
    for (name, f) in reductions {
        results.push(GradCheckResult {
            name: name.to_string(),
            seed,
            error: grad_check(f, &g.tensor(&[3, 4]), STEP)?,
            tolerance: PRIMITIVE_TOLERANCE,
        });
    }
    Ok(results)
}

/// The depth-1, width-8 configuration used for the whole-model check.
pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        channels: 3,
        depth: 1,
        width: 8,
        heads: 2,
        max_prompt_tokens: 4,
        vocab_size: 16,
        patch: 1,
        max_frames: 4,
        latent_height: 2,
        latent_width: 2,
        mlp_ratio: 2,
        time_dim: 4,
        positional: true,
    }
}

/// Gradient check of the denoising loss with respect to every parameter.
/// All parameters, including the zero-initialized ones, are first set to
/// random values so that no path is trivially inactive.
pub fn model_check(seed: u64) -> Result<GradCheckResult> {
    let cfg = small_model_config();
    let mut model = GivTransformer::<f64>::new(cfg, seed)?;
    let mut g = Gen(ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9));
    let flat: Vec<f64> = g.values(model.param_count()).iter().map(|v| 0.3 * v).collect();
    model.params_mut().assign_flat(&flat);
    let (n, f, c) = (1, 2, cfg.channels);
    let input = LatentBlock::new(
        n + f,
        2 * c,
        2,
        2,
        g.values((n + f) * 2 * c * 4).iter().map(|&v| v as f32).collect(),
    )?;
    let eps = LatentBlock::new(f, c, 2, 2, g.values(f * c * 4).iter().map(|&v| v as f32).collect())?;
    let tokens = [3usize, 7, 1];
    let error = grad_check_params(
        |tape, params| {
            let mut m = model.clone();
            *m.params_mut() = params.clone();
            m.loss(tape, &input, n, 17, &tokens, &eps)
        },
        model.params(),
        STEP,
    )?;
    Ok(GradCheckResult {
        name: "model/depth1-width8".into(),
        seed,
        error,
        tolerance: MODEL_TOLERANCE,
    })
}

/// Every primitive check and the model check for each seed.
pub fn grad_check_suite(seeds: &[u64]) -> Result<Vec<GradCheckResult>> {
    let mut out = Vec::new();
    for &s in seeds {
        out.extend(primitive_checks(s)?);
        out.push(model_check(s)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass_at_one_seed() {
        for r in primitive_checks(0).unwrap() {
            assert!(r.passed(), "{} error {}", r.name, r.error);
        }
    }

    #[test]
    fn model_passes_at_one_seed() {
        let r = model_check(0).unwrap();
        assert!(r.passed(), "error {}", r.error);
    }
}
