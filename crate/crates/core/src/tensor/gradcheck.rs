//! Central finite-difference verification of analytic gradients (64-bit only).

use super::array::Result;
use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const REL_ERR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares backward-pass gradients of the scalar built by `f` against
/// `(f(w + h) - f(w - h)) / 2h` for every element of every trainable parameter.
pub fn check_gradients<F>(store: &mut ParamStore<f64>, h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        Ok(g.value(loss).item())
    };

    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: None };
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some(Mismatch { param: store.name(id).to_string(), index: i, analytic: a, numeric });
            }
        }
    }
    Ok(report)
}

fn random_param<R: rand::Rng>(store: &mut ParamStore<f64>, rng: &mut R, name: &str, shape: &[usize]) -> ParamId {
    store.normal(name, shape, 1.0, rng)
}

fn random_const<R: rand::Rng>(rng: &mut R, shape: &[usize]) -> super::Tensor<f64> {
    super::Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Reduces `y[m x n]` to the scalar `l^T y r` with fixed random `l`, `r`.
fn project(g: &mut Graph<'_, f64>, y: Var, left: &super::Tensor<f64>, right: &super::Tensor<f64>) -> Result<Var> {
    let l = g.constant(left.clone())?;
    let r = g.constant(right.clone())?;
    let ly = g.matmul(l, y)?;
    let s = g.matmul(ly, r)?;
    g.sum(s)
}

/// Runs a finite-difference check of every differentiable primitive on inputs drawn from `seed`.
pub fn primitive_suite(seed: u64, h: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    use super::graph::AttnMask;
    use rand::SeedableRng;

    type Case = (&'static str, Box<dyn Fn(&mut ParamStore<f64>, &mut rand_chacha::ChaCha8Rng) -> Box<dyn Fn(&mut Graph<'_, f64>) -> Result<Var>>>);

    // Each case registers its parameters then returns the scalar-valued closure to check.
    let cases: Vec<Case> = vec![
        ("matmul", Box::new(|s, rng| {
            let (a, b) = (random_param(s, rng, "a", &[3, 4]), random_param(s, rng, "b", &[4, 2]));
            let (l, r) = (random_const(rng, &[1, 3]), random_const(rng, &[2, 1]));
            Box::new(move |g| { let (a, b) = (g.param(a), g.param(b)); let y = g.matmul(a, b)?; project(g, y, &l, &r) })
        })),
        ("matmul_nt", Box::new(|s, rng| {
            let (a, b) = (random_param(s, rng, "a", &[3, 4]), random_param(s, rng, "b", &[2, 4]));
            let (l, r) = (random_const(rng, &[1, 3]), random_const(rng, &[2, 1]));
            Box::new(move |g| { let (a, b) = (g.param(a), g.param(b)); let y = g.matmul_nt(a, b)?; project(g, y, &l, &r) })
        })),
        ("transpose", Box::new(|s, rng| {
            let a = random_param(s, rng, "a", &[3, 2]);
            let (l, r) = (random_const(rng, &[1, 2]), random_const(rng, &[3, 1]));
            Box::new(move |g| { let a = g.param(a); let y = g.transpose(a)?; project(g, y, &l, &r) })
        })),
        ("add", Box::new(|s, rng| {
            let (a, b) = (random_param(s, rng, "a", &[2, 3]), random_param(s, rng, "b", &[2, 3]));
            let (l, r) = (random_const(rng, &[1, 2]), random_const(rng, &[3, 1]));
            Box::new(move |g| { let (a, b) = (g.param(a), g.param(b)); let y = g.add(a, b)?; let y = g.gelu(y)?; project(g, y, &l, &r) })
        })),
        ("add_row", Box::new(|s, rng| {
            let (a, b) = (random_param(s, rng, "a", &[3, 4]), random_param(s, rng, "b", &[4]));
            let (l, r) = (random_const(rng, &[1, 3]), random_const(rng, &[4, 1]));
            Box::new(move |g| { let (a, b) = (g.param(a), g.param(b)); let y = g.add_row(a, b)?; let y = g.gelu(y)?; project(g, y, &l, &r) })
        })),
        ("scale", Box::new(|s, rng| {
            let a = random_param(s, rng, "a", &[2, 3]);
            let (l, r) = (random_const(rng, &[1, 2]), random_const(rng, &[3, 1]));
            Box::new(move |g| { let a = g.param(a); let y = g.scale(a, -1.7)?; project(g, y, &l, &r) })
        })),
        ("gelu", Box::new(|s, rng| {
            let a = random_param(s, rng, "a", &[3, 3]);
            let (l, r) = (random_const(rng, &[1, 3]), random_const(rng, &[3, 1]));
            Box::new(move |g| { let a = g.param(a); let y = g.gelu(a)?; project(g, y, &l, &r) })
        })),
        ("softmax_rows", Box::new(|s, rng| {
            let a = random_param(s, rng, "a", &[3, 4]);
            let (l, r) = (random_const(rng, &[1, 3]), random_const(rng, &[4, 1]));
            Box::new(move |g| { let a = g.param(a); let y = g.softmax(a, 1)?; project(g, y, &l, &r) })
        })),
        ("softmax_cols", Box::new(|s, rng| {
            let a = random_param(s, rng, "a", &[4, 3]);
            let (l, r) = (random_const(rng, &[1, 4]), random_const(rng, &[3, 1]));
            Box::new(move |g| { let a = g.param(a); let y = g.softmax(a, 0)?; project(g, y, &l, &r) })
        })),
        ("layer_norm", Box::new(|s, rng| {
            let x = random_param(s, rng, "x", &[3, 5]);
            let (gain, bias) = (random_param(s, rng, "gain", &[5]), random_param(s, rng, "bias", &[5]));
            let (l, r) = (random_const(rng, &[1, 3]), random_const(rng, &[5, 1]));
            Box::new(move |g| {
                let (x, gain, bias) = (g.param(x), g.param(gain), g.param(bias));
                let y = g.layer_norm(x, gain, bias, super::nn::LN_EPS)?;
                project(g, y, &l, &r)
            })
        })),
        ("embedding", Box::new(|s, rng| {
            let table = random_param(s, rng, "table", &[5, 3]);
            let (l, r) = (random_const(rng, &[1, 4]), random_const(rng, &[3, 1]));
            Box::new(move |g| { let t = g.param(table); let y = g.embedding(t, &[4, 1, 4, 0])?; project(g, y, &l, &r) })
        })),
        ("concat_rows", Box::new(|s, rng| {
            let (a, b) = (random_param(s, rng, "a", &[2, 3]), random_param(s, rng, "b", &[1, 3]));
            let (l, r) = (random_const(rng, &[1, 3]), random_const(rng, &[3, 1]));
            Box::new(move |g| { let (a, b) = (g.param(a), g.param(b)); let y = g.concat_rows(&[a, b])?; let y = g.gelu(y)?; project(g, y, &l, &r) })
        })),
        ("concat_cols", Box::new(|s, rng| {
            let (a, b) = (random_param(s, rng, "a", &[2, 3]), random_param(s, rng, "b", &[2, 2]));
            let (l, r) = (random_const(rng, &[1, 2]), random_const(rng, &[5, 1]));
            Box::new(move |g| { let (a, b) = (g.param(a), g.param(b)); let y = g.concat_cols(&[a, b])?; let y = g.gelu(y)?; project(g, y, &l, &r) })
        })),
        ("slice_rows", Box::new(|s, rng| {
            let a = random_param(s, rng, "a", &[4, 3]);
            let (l, r) = (random_const(rng, &[1, 2]), random_const(rng, &[3, 1]));
            Box::new(move |g| { let a = g.param(a); let y = g.slice_rows(a, 1, 2)?; let y = g.gelu(y)?; project(g, y, &l, &r) })
        })),
        ("slice_cols", Box::new(|s, rng| {
            let a = random_param(s, rng, "a", &[3, 4]);
            let (l, r) = (random_const(rng, &[1, 3]), random_const(rng, &[2, 1]));
            Box::new(move |g| { let a = g.param(a); let y = g.slice_cols(a, 2, 2)?; let y = g.gelu(y)?; project(g, y, &l, &r) })
        })),
        ("interleave_rows", Box::new(|s, rng| {
            let (a, b, c) = (random_param(s, rng, "a", &[2, 3]), random_param(s, rng, "b", &[2, 3]), random_param(s, rng, "c", &[2, 3]));
            let (l, r) = (random_const(rng, &[1, 6]), random_const(rng, &[3, 1]));
            Box::new(move |g| {
                let (a, b, c) = (g.param(a), g.param(b), g.param(c));
                let y = g.interleave_rows(&[a, b, c])?;
                let y = g.gelu(y)?;
                project(g, y, &l, &r)
            })
        })),
        ("strided_rows", Box::new(|s, rng| {
            let a = random_param(s, rng, "a", &[7, 2]);
            let (l, r) = (random_const(rng, &[1, 2]), random_const(rng, &[2, 1]));
            Box::new(move |g| { let a = g.param(a); let y = g.strided_rows(a, 1, 3)?; let y = g.gelu(y)?; project(g, y, &l, &r) })
        })),
        ("causal_mask_fill", Box::new(|s, rng| {
            let a = random_param(s, rng, "a", &[4, 4]);
            let (l, r) = (random_const(rng, &[1, 4]), random_const(rng, &[4, 1]));
            Box::new(move |g| { let a = g.param(a); let y = g.causal_mask_fill(a)?; let y = g.softmax(y, 1)?; project(g, y, &l, &r) })
        })),
        ("block_mask_fill", Box::new(|s, rng| {
            let a = random_param(s, rng, "a", &[6, 6]);
            let (l, r) = (random_const(rng, &[1, 6]), random_const(rng, &[6, 1]));
            Box::new(move |g| {
                let a = g.param(a);
                let y = g.mask_fill(a, AttnMask::BlockCausal(3))?;
                let y = g.softmax(y, 1)?;
                project(g, y, &l, &r)
            })
        })),
        ("cross_entropy", Box::new(|s, rng| {
            let a = random_param(s, rng, "logits", &[4, 5]);
            Box::new(move |g| { let a = g.param(a); g.cross_entropy(a, &[0, 4, 2, 2]) })
        })),
        ("sum", Box::new(|s, rng| {
            let a = random_param(s, rng, "a", &[2, 3]);
            Box::new(move |g| { let a = g.param(a); let y = g.gelu(a)?; g.sum(y) })
        })),
        ("transformer_block", Box::new(|s, rng| {
            let block = super::nn::Block::new(s, rng, "blk", 4, 2);
            let x = random_param(s, rng, "x", &[3, 4]);
            let (l, r) = (random_const(rng, &[1, 3]), random_const(rng, &[4, 1]));
            Box::new(move |g| {
                let x = g.param(x);
                let y = block.forward(g, x, Some(AttnMask::Causal))?;
                project(g, y, &l, &r)
            })
        })),
    ];

    let mut out = Vec::with_capacity(cases.len());
    for (i, (name, build)) in cases.iter().enumerate() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
        let mut store = ParamStore::new();
        let f = build(&mut store, &mut rng);
        out.push((*name, check_gradients(&mut store, h, |g| f(g))?));
    }
    Ok(out)
}
