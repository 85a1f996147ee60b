//! Central finite-difference checks of the tape's backward rules.
//!
//! Each check evaluates a function of a few input tensors twice per input
//! coordinate (at `x ± h`) using forward passes only, and compares the result
//! with the gradient the tape produces. Non-scalar outputs are reduced with a
//! fixed random projection so every output coordinate contributes.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::fusion::{FusionConfig, GcaBlock};
use crate::nn::{Graph, ParamStore};
use crate::seed::rng;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Gradient norms below this are compared absolutely. Some true gradients
/// are exactly zero (a key bias cannot move a softmax), and there both sides
/// are pure rounding noise.
pub const NORM_FLOOR: f64 = 1e-5;

/// Relative error `|a − n| / max(|a|, |n|, NORM_FLOOR)` over whole gradient tensors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(NORM_FLOOR)
}

fn reduce(tape: &mut Tape, out: Var, proj: &Tensor) -> Result<Var> {
    if tape.value(out).numel() == 1 {
        return Ok(out);
    }
    let w = tape.constant(proj.clone().reshape(tape.value(out).shape().to_vec())?);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

/// Worst relative error over the inputs flagged in `check`.
pub fn check_gradients<F>(inputs: &[Tensor], check: &[bool], f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    // Fixed projection: sized lazily from one forward pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let proj = Tensor::randn([tape.value(out).numel()], 1.0, &mut rng(0x9e37_79b9));
    let loss = reduce(&mut tape, out, &proj)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).map_or_else(|| vec![0.0; t.numel()], |g| g.data().to_vec()))
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let loss = reduce(&mut tape, out, &proj)?;
        Ok(tape.value(loss).item())
    };

    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for (i, flag) in check.iter().enumerate() {
        if !flag {
            continue;
        }
        let mut numeric = vec![0.0; xs[i].numel()];
        for j in 0..numeric.len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic[i], &numeric));
    }
    Ok(worst)
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub op: &'static str,
    pub trials: usize,
    pub max_rel_err: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < REL_TOL
    }
}

type OpCase = (&'static str, fn(&mut rand_chacha::ChaCha8Rng) -> Result<f64>);

fn randn(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

fn all(n: usize) -> Vec<bool> {
    vec![true; n]
}

/// The fixed list of checked operations.
fn cases() -> Vec<OpCase> {
    vec![
        ("matmul", |r| {
            let xs = [randn(r, &[3, 4]), randn(r, &[4, 2])];
            check_gradients(&xs, &all(2), |t, v| t.matmul(v[0], v[1]))
        }),
        ("add", |r| {
            let xs = [randn(r, &[3, 2]), randn(r, &[3, 2])];
            check_gradients(&xs, &all(2), |t, v| t.add(v[0], v[1]))
        }),
        ("sub", |r| {
            let xs = [randn(r, &[3, 2]), randn(r, &[3, 2])];
            check_gradients(&xs, &all(2), |t, v| t.sub(v[0], v[1]))
        }),
        ("mul", |r| {
            let xs = [randn(r, &[3, 2]), randn(r, &[3, 2])];
            check_gradients(&xs, &all(2), |t, v| t.mul(v[0], v[1]))
        }),
        ("add_row", |r| {
            let xs = [randn(r, &[3, 4]), randn(r, &[4])];
            check_gradients(&xs, &all(2), |t, v| t.add_row(v[0], v[1]))
        }),
        ("scale_by", |r| {
            let xs = [randn(r, &[3, 4]), randn(r, &[])];
            check_gradients(&xs, &all(2), |t, v| t.scale_by(v[0], v[1]))
        }),
        ("mul_rows", |r| {
            let xs = [randn(r, &[3, 4]), randn(r, &[3])];
            check_gradients(&xs, &all(2), |t, v| t.mul_rows(v[0], v[1]))
        }),
        ("tanh", |r| {
            let xs = [randn(r, &[5])];
            check_gradients(&xs, &all(1), |t, v| Ok(t.tanh(v[0])))
        }),
        ("gelu", |r| {
            let xs = [randn(r, &[6])];
            check_gradients(&xs, &all(1), |t, v| Ok(t.gelu(v[0])))
        }),
        ("layer_norm", |r| {
            let xs = [randn(r, &[3, 5]), randn(r, &[5]), randn(r, &[5])];
            check_gradients(&xs, &all(3), |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))
        }),
        ("softmax", |r| {
            let xs = [randn(r, &[2, 3, 4])];
            check_gradients(&xs, &all(1), |t, v| t.softmax(v[0], 1))
        }),
        ("cosine_similarity", |r| {
            let xs = [randn(r, &[4, 3]), randn(r, &[4, 3])];
            check_gradients(&xs, &all(2), |t, v| t.cosine_similarity(v[0], v[1]))
        }),
        ("mse_loss", |r| {
            let xs = [randn(r, &[3, 3]), randn(r, &[3, 3])];
            check_gradients(&xs, &all(2), |t, v| t.mse_loss(v[0], v[1]))
        }),
        ("cross_entropy", |r| {
            let xs = [randn(r, &[4, 5])];
            let targets: Vec<usize> = (0..4).map(|_| r.gen_range(1..5)).collect();
            let mut targets_with_pad = targets;
            targets_with_pad[2] = 0;
            check_gradients(&xs, &all(1), move |t, v| t.cross_entropy(v[0], &targets_with_pad, 0))
        }),
        ("mean", |r| {
            let xs = [randn(r, &[3, 2])];
            check_gradients(&xs, &all(1), |t, v| Ok(t.mean(v[0])))
        }),
        ("gather_rows", |r| {
            let xs = [randn(r, &[4, 3])];
            check_gradients(&xs, &all(1), |t, v| t.gather_rows(v[0], &[2, 0, 2]))
        }),
        ("select_rows", |r| {
            let xs = [randn(r, &[3, 2]), randn(r, &[3, 2])];
            check_gradients(&xs, &all(2), |t, v| t.select_rows(v[0], v[1], &[true, false, true]))
        }),
        ("concat", |r| {
            let xs = [randn(r, &[3, 2]), randn(r, &[3, 4])];
            check_gradients(&xs, &all(2), |t, v| {
                let c = t.concat_cols(v[0], v[1])?;
                let d = t.transpose(c)?;
                let e = t.transpose(d)?;
                t.concat_rows(e, c)
            })
        }),
        ("normalize_rows", |r| {
            let xs = [randn(r, &[3, 4])];
            check_gradients(&xs, &all(1), |t, v| t.normalize_rows(v[0], 1e-8))
        }),
        ("attention", |r| {
            let xs = [randn(r, &[3, 4]), randn(r, &[5, 4]), randn(r, &[5, 4])];
            check_gradients(&xs, &all(3), |t, v| t.attention(v[0], v[1], v[2], 2, false))
        }),
        ("causal_attention", |r| {
            let xs = [randn(r, &[4, 4]), randn(r, &[4, 4]), randn(r, &[4, 4])];
            check_gradients(&xs, &all(3), |t, v| t.attention(v[0], v[1], v[2], 2, true))
        }),
        ("gca_block", check_gca_block),
    ]
}

/// Full gated cross-attention block, every parameter plus its three inputs.
fn check_gca_block(r: &mut rand_chacha::ChaCha8Rng) -> Result<f64> {
    let cfg = FusionConfig { d_model: 8, heads: 2, ffn_hidden: 12, ..FusionConfig::default() };
    let mut store = ParamStore::new();
    let block = GcaBlock::new(&mut store, "gca", &cfg, r);
    // Nonzero gates so both branches carry gradient.
    let ids: Vec<_> = store.ids().collect();
    for id in &ids {
        if store.get(*id).numel() == 1 {
            *store.get_mut(*id) = Tensor::scalar(r.gen_range(0.3..0.9));
        } else if store.name(*id).ends_with(".b") || store.name(*id).ends_with(".bias") {
            *store.get_mut(*id) = Tensor::randn(store.get(*id).shape().to_vec(), 0.3, r);
        }
    }
    let n = 3;
    let t = 5;
    let mut inputs = vec![
        randn(r, &[n, cfg.d_model]),
        randn(r, &[t, cfg.d_model]),
        Tensor::new([n], (0..n).map(|_| r.gen_range(0.05..0.95)).collect())?,
    ];
    inputs.extend(store.tensors().iter().cloned());
    let store_ref = &store;
    check_gradients(&inputs, &all(inputs.len()), |tape, v| {
        let mut g = Graph::frozen(store_ref);
        g.tape = std::mem::take(tape);
        for (k, id) in store_ref.ids().enumerate() {
            g.bind(id, v[3 + k]);
        }
        let out = block.forward(&mut g, v[0], v[1], v[2]);
        *tape = std::mem::take(&mut g.tape);
        out
    })
}

/// Runs every case for `trials` seeded trials.
pub fn run_suite(seed: u64, trials: usize) -> Result<Vec<CheckReport>> {
    cases()
        .into_iter()
        .enumerate()
        .map(|(i, (op, case))| {
            let mut worst: f64 = 0.0;
            for trial in 0..trials {
                let mut r = rng(seed ^ ((i as u64) << 32) ^ trial as u64);
                worst = worst.max(case(&mut r)?);
            }
            Ok(CheckReport { op, trials, max_rel_err: worst })
        })
        .collect()
}
