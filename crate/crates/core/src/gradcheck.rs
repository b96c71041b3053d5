//! Central finite-difference gradient checking.
//!
//! The numeric side only ever reads forward values, so it stays independent
//! of every backward rule it is used to check.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{Tape, Var};
use crate::model::{DecoderParams, DecoderWeights};
use crate::tensor::{Tensor, TensorError};
use crate::TokenId;

/// Default finite-difference step.
pub const STEP: f64 = 1e-4;

/// Gradient norms below this are compared absolutely. Some gradients are
/// identically zero (a key bias shifts a whole score row, which softmax
/// ignores) and their numeric estimate is pure rounding noise.
pub const NORM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, NORM_FLOOR)` per
    /// input, over the checked coordinates.
    pub relative_errors: Vec<f64>,
    pub coordinates_checked: usize,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares backprop gradients of the scalar built by `loss` against
/// central differences with step `step`. When `max_coords` is given, only
/// that many coordinates per input are perturbed, sampled with `seed`.
pub fn check<F>(
    inputs: &[Tensor],
    step: f64,
    max_coords: Option<usize>,
    seed: u64,
    loss: F,
) -> Result<GradCheckReport, TensorError>
where
    F: for<'a> Fn(&mut Tape<'a>, &[Var]) -> Result<Var, TensorError>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf_ref(t, true)).collect();
        let out = loss(&mut tape, &vars)?;
        tape.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
            .collect()
    };

    let eval = |perturbed: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf_ref(t, false)).collect();
        let out = loss(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut relative_errors = Vec::with_capacity(inputs.len());
    let mut coordinates_checked = 0;
    for (i, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < input.len() => sample(&mut rng, input.len(), k).into_vec(),
            _ => (0..input.len()).collect(),
        };
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for &j in &coords {
            let original = input.data()[j];
            work[i].data_mut()[j] = original + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = original - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[i][j];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        coordinates_checked += coords.len();
        let denom = a2.sqrt().max(n2.sqrt()).max(NORM_FLOOR);
        relative_errors.push(diff2.sqrt() / denom);
    }
    Ok(GradCheckReport {
        relative_errors,
        coordinates_checked,
    })
}

/// Reduces an arbitrary tensor to a scalar through fixed random weights,
/// so every output element carries a distinct upstream gradient.
pub fn project<'a>(tape: &mut Tape<'a>, x: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let shape = tape.value(x).shape().to_vec();
    let weights = tape.leaf(Tensor::randn(&shape, 1.0, &mut rng), false);
    let prod = tape.mul(x, weights)?;
    Ok(tape.sum(prod))
}

type LossFn = Box<dyn for<'a> Fn(&mut Tape<'a>, &[Var]) -> Result<Var, TensorError> + Send + Sync>;

/// One differentiable operation wired into a scalar loss, with inputs.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub loss: LossFn,
}

impl OpCase {
    pub fn run(&self, step: f64) -> Result<GradCheckReport, TensorError> {
        check(&self.inputs, step, None, 0, &*self.loss)
    }
}

/// Randomized checks for every differentiable tape operation. Shapes,
/// values, targets and masks all vary with `seed`.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    use rand::Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dim = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    let (m, k, n) = (dim(1, 4), dim(1, 4), dim(2, 5));
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(7));
    let mut randn = |shape: &[usize]| Tensor::randn(shape, 1.0, &mut rng);

    let mut cases: Vec<OpCase> = Vec::new();
    let mut add = |name, inputs, loss: LossFn| cases.push(OpCase { name, inputs, loss });

    add("matmul", vec![randn(&[m, k]), randn(&[k, n])], Box::new(move |t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y, seed)
    }));
    add("matmul_nt", vec![randn(&[m, k]), randn(&[n, k])], Box::new(move |t, v| {
        let y = t.matmul_nt(v[0], v[1])?;
        project(t, y, seed)
    }));
    add("add", vec![randn(&[m, n]), randn(&[m, n])], Box::new(move |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, seed)
    }));
    add("mul", vec![randn(&[m, n]), randn(&[m, n])], Box::new(move |t, v| {
        let y = t.mul(v[0], v[1])?;
        project(t, y, seed)
    }));
    add("add_bias", vec![randn(&[m, n]), randn(&[n])], Box::new(move |t, v| {
        let y = t.add_bias(v[0], v[1])?;
        project(t, y, seed)
    }));
    add("scale", vec![randn(&[m, n])], Box::new(move |t, v| {
        let y = t.scale(v[0], -1.7);
        project(t, y, seed)
    }));
    add("sum", vec![randn(&[m, n])], Box::new(|t, v| Ok(t.sum(v[0]))));
    add("gelu", vec![randn(&[m, n])], Box::new(move |t, v| {
        let y = t.gelu(v[0]);
        project(t, y, seed)
    }));
    add("softmax_rows", vec![randn(&[m, n])], Box::new(move |t, v| {
        let y = t.softmax_rows(v[0])?;
        project(t, y, seed)
    }));
    add("causal_softmax_rows", vec![randn(&[n, n])], Box::new(move |t, v| {
        let y = t.causal_softmax_rows(v[0])?;
        project(t, y, seed)
    }));
    add("layer_norm", vec![randn(&[m, n]), randn(&[n]), randn(&[n])], Box::new(move |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        project(t, y, seed)
    }));
    add("cross_entropy_masked", vec![randn(&[m + 1, n])], Box::new(move |t, v| {
        let (targets, mask) = targets_and_mask(seed, m + 1, n);
        t.cross_entropy_masked(v[0], &targets, &mask)
    }));
    add("gather_rows", vec![randn(&[n, k])], Box::new(move |t, v| {
        let ids: Vec<usize> = (0..m + 2).map(|i| (i * 7 + seed as usize) % n).collect();
        let y = t.gather_rows(v[0], &ids)?;
        project(t, y, seed)
    }));
    add("slice_cols", vec![randn(&[m, n])], Box::new(move |t, v| {
        let y = t.slice_cols(v[0], 1, n - 1)?;
        project(t, y, seed)
    }));
    add("concat_cols", vec![randn(&[m, k]), randn(&[m, n]), randn(&[m, 1])], Box::new(move |t, v| {
        let y = t.concat_cols(v)?;
        project(t, y, seed)
    }));
    add("concat_rows", vec![randn(&[m, n]), randn(&[k, n])], Box::new(move |t, v| {
        let y = t.concat_rows(v)?;
        project(t, y, seed)
    }));
    add("dropout", vec![randn(&[m, n])], Box::new(move |t, v| {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(seed);
        let y = t.dropout(v[0], 0.3, &mut mask_rng);
        project(t, y, seed)
    }));
    add("matmul_softmax_cross_entropy", vec![randn(&[m + 1, k]), randn(&[k, n])], Box::new(move |t, v| {
        let h = t.matmul(v[0], v[1])?;
        let p = t.softmax_rows(h)?;
        let logits = t.scale(p, 3.0);
        let (targets, mask) = targets_and_mask(seed, m + 1, n);
        t.cross_entropy_masked(logits, &targets, &mask)
    }));
    cases
}

fn targets_and_mask(seed: u64, rows: usize, vocab: usize) -> (Vec<usize>, Vec<bool>) {
    use rand::Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let targets = (0..rows).map(|_| rng.random_range(0..vocab)).collect();
    let mut mask: Vec<bool> = (0..rows).map(|_| rng.random_bool(0.6)).collect();
    mask[rows - 1] = true;
    (targets, mask)
}

/// Checks the decoder's next-token loss over `tokens` against central
/// differences with respect to every parameter tensor (or `max_coords`
/// sampled coordinates of each).
pub fn check_decoder(
    weights: &DecoderWeights,
    tokens: &[TokenId],
    loss_mask: &[bool],
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport, TensorError> {
    if tokens.len() < 2 || loss_mask.len() != tokens.len() - 1 {
        return Err(TensorError::Invalid("need ≥ 2 tokens and one mask entry per target".into()));
    }
    let inputs: Vec<Tensor> = weights.params().values().into_iter().cloned().collect();
    let n_layers = weights.config().n_layers;
    let targets: Vec<usize> = tokens[1..].iter().map(|&t| t as usize).collect();
    let context = &tokens[..tokens.len() - 1];
    check(&inputs, STEP, max_coords, seed, |tape, vars| {
        let mut it = vars.iter().copied();
        let params = DecoderParams::try_build::<()>(n_layers, |_| Ok(it.next().expect("one var per tensor")))
            .expect("infallible");
        let logits = weights
            .forward_on_tape(tape, &params, context, None)
            .map_err(|e| TensorError::Invalid(e.to_string()))?;
        tape.cross_entropy_masked(logits, &targets, loss_mask)
    })
}
