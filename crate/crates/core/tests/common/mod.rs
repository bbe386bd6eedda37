#![allow(dead_code)]

use blrhac::nn::{encode_history, Example, Family, HistoryWindow, Model, ModelSpec};
use blrhac::EnvironmentSpec;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FAMILIES: [Family; 4] = [
    Family::ShallowLinear,
    Family::DeepLinear,
    Family::Mlp,
    Family::CausalTransformer,
];

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-3;
// Below this magnitude both gradients count as zero.
const FD_FLOOR: f64 = 1e-6;

/// A tiny model with every weight randomized (heads included, since zero
/// heads would block gradient flow) plus a few random examples.
pub fn tiny_instance(family: Family, with_prior: bool, seed: u64) -> (Model, Vec<Example>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let env = EnvironmentSpec::custom(rng.gen_range(2..=4), rng.gen_range(2..=4)).unwrap();
    let mut spec = ModelSpec::new(family, env, with_prior).with_dims(4, rng.gen_range(1..=2));
    spec.num_heads = 2;
    spec.history_len = rng.gen_range(1..=3);
    let mut model = Model::new(spec.clone(), seed).unwrap();
    for t in model.params_mut().tensors_mut() {
        t.mapv_inplace(|_| rng.gen_range(-0.8..0.8));
    }
    let (o, l) = (env.num_objects, env.num_locations);
    let examples = (0..2)
        .map(|_| {
            let n = rng.gen_range(0..=spec.history_len);
            let entries = (0..n)
                .map(|_| {
                    [
                        rng.gen_range(0..o),
                        rng.gen_range(0..l),
                        rng.gen_range(0..l),
                    ]
                })
                .collect();
            let window = HistoryWindow {
                k: spec.history_len,
                entries,
                current_pick: rng.gen_range(0..o),
            };
            let mut locs: Vec<usize> = (0..l).collect();
            locs.shuffle(&mut rng);
            let vacant: Vec<usize> = locs[..rng.gen_range(1..=l)].to_vec();
            Example {
                tokens: encode_history(&window, &env).unwrap(),
                a_h: window.current_pick,
                label: vacant[rng.gen_range(0..vacant.len())],
                vacant,
            }
        })
        .collect();
    (model, examples)
}

fn mean_loss(model: &Model, examples: &[Example]) -> f64 {
    examples.iter().map(|e| model.loss(e).unwrap()).sum::<f64>() / examples.len() as f64
}

/// Worst relative gap between the tape gradient and central differences,
/// over every scalar parameter.
pub fn worst_gradient_error(mut model: Model, examples: &[Example]) -> f64 {
    let refs: Vec<&Example> = examples.iter().collect();
    let (_, grads) = model.batch_gradients(&refs).unwrap();
    let analytic: Vec<Vec<f64>> = grads.iter().map(|g| g.iter().copied().collect()).collect();
    let mut worst = 0.0f64;
    for (ti, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let nudge = |m: &mut Model, delta: f64| {
                let t = m.params_mut().tensors_mut().nth(ti).unwrap();
                let v = t.as_slice_mut().unwrap();
                v[j] += delta;
            };
            nudge(&mut model, FD_STEP);
            let up = mean_loss(&model, examples);
            nudge(&mut model, -2.0 * FD_STEP);
            let down = mean_loss(&model, examples);
            nudge(&mut model, FD_STEP);
            let numeric = (up - down) / (2.0 * FD_STEP);
            let scale = a.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max((a - numeric).abs() / scale);
        }
    }
    worst
}
