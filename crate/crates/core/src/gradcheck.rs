//! Central finite differences and a per-primitive gradient check suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{NodeId, OpKind, Tape};
use crate::tensor::Tensor;
use crate::unet::{UNetConfig, UNetModel};

/// Step used by the check suite.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Magnitude below which errors are measured absolutely instead of relatively.
pub const ABS_FLOOR: f64 = 1e-6;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element `i` of `x`.
pub fn finite_difference_grad<F>(mut f: F, x: &Tensor, h: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Largest elementwise `|a - n| / max(|a|, |n|, ABS_FLOOR)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(ABS_FLOOR))
        .fold(0.0, f64::max)
}

/// Outcome of checking one primitive (or composite network).
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub elements: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Builds a graph from leaf inputs and returns its output node.
type Builder = dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>;

/// Compares `backward` against finite differences for every input of the
/// graph built by `build`. The output is contracted with fixed random
/// weights so that every output element contributes to the scalar.
fn check_graph(
    name: &str,
    inputs: &[Tensor],
    build: &Builder,
    fault: Option<OpKind>,
    rng: &mut ChaCha8Rng,
) -> Result<CheckReport> {
    let probe_shape = {
        let mut tape = Tape::new();
        let ids: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &ids)?;
        tape.value(out)?.shape().to_vec()
    };
    let weights = random_tensor(rng, &probe_shape);

    let eval = |vals: &[Tensor]| -> Result<(Tape, Vec<NodeId>, NodeId)> {
        let mut tape = Tape::new();
        let ids: Vec<_> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &ids)?;
        let w = tape.leaf(weights.clone());
        let prod = tape.mul(out, w)?;
        let s = tape.sum(prod)?;
        Ok((tape, ids, s))
    };

    let (mut tape, ids, s) = eval(inputs)?;
    if let Some(kind) = fault {
        tape.inject_backward_fault(kind);
    }
    let grads = tape.backward(s, &ids)?;

    let mut worst = 0.0f64;
    let mut elements = 0;
    for (k, input) in inputs.iter().enumerate() {
        let numeric = finite_difference_grad(
            |x| {
                let mut vals = inputs.to_vec();
                vals[k] = x.clone();
                let (tape, _, s) = eval(&vals).expect("graph rebuilds with same shapes");
                tape.value(s).expect("live node").data()[0]
            },
            input,
            DEFAULT_STEP,
        );
        worst = worst.max(max_relative_error(grads[&ids[k]].data(), numeric.data()));
        elements += input.len();
    }
    Ok(CheckReport {
        name: name.to_string(),
        max_rel_error: worst,
        elements,
    })
}

/// Runs the gradient check over every recorded primitive and a depth-2
/// U-Net on a 16x16 input. `fault` injects a broken backward for one
/// primitive kind (negative control).
pub fn run_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let mut r = |shape: &[usize]| random_tensor(&mut rng, shape);

    let cases: Vec<(&str, Vec<Tensor>, Box<Builder>)> = vec![
        (
            "conv2d",
            vec![r(&[2, 2, 5, 5]), r(&[3, 2, 3, 3]), r(&[3])],
            Box::new(|t, x| t.conv2d(x[0], x[1], x[2], 1, 1)),
        ),
        (
            "conv2d_strided",
            vec![r(&[1, 2, 6, 5]), r(&[2, 2, 3, 2]), r(&[2])],
            Box::new(|t, x| t.conv2d(x[0], x[1], x[2], 0, 2)),
        ),
        ("relu", vec![r(&[1, 2, 4, 4])], Box::new(|t, x| t.relu(x[0]))),
        (
            "maxpool2d",
            vec![r(&[1, 2, 4, 6])],
            Box::new(|t, x| t.maxpool2d(x[0], 2)),
        ),
        (
            "upsample_bilinear",
            vec![r(&[1, 2, 3, 4])],
            Box::new(|t, x| t.upsample_bilinear(x[0], 7, 9)),
        ),
        (
            "upsample_nearest",
            vec![r(&[1, 2, 3, 3])],
            Box::new(|t, x| t.upsample_nearest(x[0], 2)),
        ),
        (
            "add",
            vec![r(&[2, 3]), r(&[2, 3])],
            Box::new(|t, x| t.add(x[0], x[1])),
        ),
        (
            "mul",
            vec![r(&[2, 3]), r(&[2, 3])],
            Box::new(|t, x| t.mul(x[0], x[1])),
        ),
        ("scale", vec![r(&[4])], Box::new(|t, x| t.scale(x[0], -1.75))),
        (
            "concat_channels",
            vec![r(&[1, 1, 3, 3]), r(&[1, 2, 3, 3])],
            Box::new(|t, x| t.concat_channels(&[x[0], x[1]])),
        ),
        (
            "sum_at",
            vec![r(&[1, 2, 3, 3])],
            Box::new(|t, x| t.sum_at(x[0], vec![0, 4, 4, 9, 17])),
        ),
        ("sum", vec![r(&[3, 2])], Box::new(|t, x| t.sum(x[0]))),
        (
            "global_avg_pool",
            vec![r(&[1, 3, 3, 4])],
            Box::new(|t, x| t.global_avg_pool(x[0])),
        ),
        (
            "softmax_channels",
            vec![r(&[1, 3, 2, 2])],
            Box::new(|t, x| t.softmax_channels(x[0])),
        ),
        (
            "cross_entropy",
            vec![r(&[1, 3, 2, 3])],
            Box::new(|t, x| t.cross_entropy(x[0], &[0, 1, 2, 2, 1, 0])),
        ),
    ];
    for (name, inputs, build) in &cases {
        reports.push(check_graph(name, inputs, build.as_ref(), fault, &mut rng)?);
    }
    reports.push(check_unet(seed, fault)?);
    Ok(reports)
}

/// Full depth-2 U-Net on a 16x16 input: gradient with respect to the image
/// and every parameter tensor.
fn check_unet(seed: u64, fault: Option<OpKind>) -> Result<CheckReport> {
    let config = UNetConfig {
        depth: 2,
        channels: vec![6, 4],
        in_channels: 1,
        num_classes: 2,
        seed,
    };
    let model = UNetModel::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let image = Tensor::from_fn(&[1, 1, 16, 16], |_| rng.random_range(-1.0..1.0));
    let weights = random_tensor(&mut rng, &[1, 2, 16, 16]);

    let objective = |model: &UNetModel, image: &Tensor, fault: Option<OpKind>| -> Result<_> {
        let mut pass = model.forward(image)?;
        if let Some(kind) = fault {
            pass.tape.inject_backward_fault(kind);
        }
        let w = pass.tape.leaf(weights.clone());
        let prod = pass.tape.mul(pass.logits, w)?;
        let s = pass.tape.sum(prod)?;
        Ok((pass, s))
    };

    let (pass, s) = objective(&model, &image, fault)?;
    let mut wanted = vec![pass.input];
    wanted.extend(pass.params.iter().map(|(_, id)| *id));
    let grads = pass.tape.backward(s, &wanted)?;

    let value = |m: &UNetModel, img: &Tensor| -> f64 {
        let (pass, s) = objective(m, img, None).expect("valid forward");
        pass.tape.value(s).expect("live node").data()[0]
    };

    let mut worst = max_relative_error(
        grads[&pass.input].data(),
        finite_difference_grad(|x| value(&model, x), &image, DEFAULT_STEP).data(),
    );
    let mut elements = image.len();
    for (name, id) in &pass.params {
        let original = model.param(name).expect("parameter exists").clone();
        let numeric = finite_difference_grad(
            |p| {
                let mut m = model.clone();
                *m.param_mut(name).expect("parameter exists") = p.clone();
                value(&m, &image)
            },
            &original,
            DEFAULT_STEP,
        );
        worst = worst.max(max_relative_error(grads[id].data(), numeric.data()));
        elements += original.len();
    }
    Ok(CheckReport {
        name: "unet_depth2_16x16".to_string(),
        max_rel_error: worst,
        elements,
    })
}
