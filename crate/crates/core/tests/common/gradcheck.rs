//! Central finite-difference checks for every graph op and a whole network.

use advood::model::{Architecture, ModelCheckpoint, SmallConvNet};
use advood::{Graph, Result, Tensor, Var};
use rand::Rng;

use super::{finite_diff, random_tensor, rel_err, rng};

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub op: OpFn,
}

pub fn op_cases() -> Vec<OpCase> {
    let case = |name, shapes: &[&[usize]], op: OpFn| OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        op,
    };
    vec![
        case("conv2d", &[&[2, 2, 5, 5], &[3, 2, 3, 3], &[3]], Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 1, 1))),
        case(
            "conv2d_stride2",
            &[&[2, 2, 7, 7], &[2, 2, 3, 3], &[2]],
            Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 2, 0)),
        ),
        case("relu", &[&[2, 3, 4]], Box::new(|g, v| Ok(g.relu(v[0])))),
        case("avgpool2d", &[&[2, 2, 4, 4]], Box::new(|g, v| g.avgpool2d(v[0], 2))),
        case("global_avg_pool", &[&[2, 3, 4, 4]], Box::new(|g, v| g.global_avg_pool(v[0]))),
        case("linear", &[&[3, 4], &[2, 4], &[2]], Box::new(|g, v| g.linear(v[0], v[1], v[2]))),
        case(
            "channel_affine",
            &[&[2, 3, 2, 2]],
            Box::new(|g, v| g.channel_affine(v[0], &[2.0, -0.5, 1.5], &[0.1, 0.2, -0.3])),
        ),
        case("add", &[&[2, 3], &[2, 3]], Box::new(|g, v| g.add(v[0], v[1]))),
        case("sub", &[&[2, 3], &[2, 3]], Box::new(|g, v| g.sub(v[0], v[1]))),
        case("mul", &[&[2, 3], &[2, 3]], Box::new(|g, v| g.mul(v[0], v[1]))),
        case("scale", &[&[2, 3]], Box::new(|g, v| Ok(g.scale(v[0], -1.7)))),
        case("sum", &[&[2, 3]], Box::new(|g, v| Ok(g.sum(v[0])))),
        case("mean", &[&[2, 3]], Box::new(|g, v| Ok(g.mean(v[0])))),
        case("gather", &[&[3, 4]], Box::new(|g, v| g.gather(v[0], &[1, 0, 3]))),
        case("reshape", &[&[2, 6]], Box::new(|g, v| g.reshape(v[0], vec![3, 4]))),
        case("softmax", &[&[3, 4]], Box::new(|g, v| g.softmax(v[0]))),
        case("logsumexp", &[&[3, 4]], Box::new(|g, v| g.logsumexp(v[0]))),
        case("cross_entropy", &[&[3, 4]], Box::new(|g, v| g.cross_entropy(v[0], &[2, 0, 3]))),
    ]
}

/// `sum(op(inputs) * r)` for fixed weights `r`, so every output element counts.
fn weighted_loss(case: &OpCase, inputs: &[Tensor], r: &Tensor, track: bool) -> Result<(Graph, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), track)).collect();
    let out = (case.op)(&mut g, &vars)?;
    let rv = g.constant(r.clone());
    let prod = g.mul(out, rv)?;
    let loss = g.sum(prod);
    Ok((g, vars, loss))
}

/// Worst relative error over the op's inputs for one seed.
pub fn check_op(case: &OpCase, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let inputs: Vec<Tensor> = case.shapes.iter().map(|s| random_tensor(&mut rng, s, -1.0, 1.0)).collect();
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = (case.op)(&mut g, &vars).unwrap();
        g.value(out).shape().to_vec()
    };
    let r = if out_shape.is_empty() {
        Tensor::scalar(rng.gen_range(0.5..1.5))
    } else {
        random_tensor(&mut rng, &out_shape, 0.5, 1.5)
    };
    let (mut g2, vars2, loss2) = weighted_loss(case, &inputs, &r, true).unwrap();
    g2.backward(loss2).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars2.iter().enumerate() {
        let analytic = g2.grad(*v).unwrap().data().to_vec();
        let mut f = |x: &Tensor| {
            let mut ins = inputs.clone();
            ins[k] = x.clone();
            let (g, _, loss) = weighted_loss(case, &ins, &r, false).unwrap();
            g.value(loss).item().unwrap()
        };
        let coords: Vec<usize> = (0..inputs[k].numel()).collect();
        let numeric = finite_diff(&mut f, &inputs[k], &coords, 1e-6);
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

pub fn tiny_arch() -> Architecture {
    Architecture { widths: vec![3, 4, 5], num_classes: 3, input_shape: [3, 8, 8] }
}

fn net_loss(ck: &ModelCheckpoint, x: &Tensor, labels: &[usize]) -> f64 {
    let net = ck.network().unwrap();
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let nv = net.forward(&mut g, xv, false).unwrap();
    let ce = g.cross_entropy(nv.logits, labels).unwrap();
    g.value(ce).item().unwrap()
}

/// Worst relative error over the input and every parameter tensor, checked
/// on a random subset of coordinates.
pub fn check_network(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let arch = tiny_arch();
    let mut ck = ModelCheckpoint::init(arch.clone(), seed).unwrap();
    // nonzero biases so their gradients are exercised off the init point
    for name in SmallConvNet::param_names(&arch) {
        if name.ends_with(".bias") {
            let shape = ck.weights[&name].shape().to_vec();
            ck.weights.insert(name, random_tensor(&mut rng, &shape, -0.1, 0.1));
        }
    }
    let x = random_tensor(&mut rng, &[2, 3, 8, 8], 0.0, 1.0);
    let labels: Vec<usize> = (0..2).map(|_| rng.gen_range(0..3)).collect();

    let net = ck.network().unwrap();
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let nv = net.forward(&mut g, xv, true).unwrap();
    let ce = g.cross_entropy(nv.logits, &labels).unwrap();
    g.backward(ce).unwrap();

    let pick = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<usize> {
        if n <= 12 {
            (0..n).collect()
        } else {
            (0..12).map(|_| rng.gen_range(0..n)).collect()
        }
    };
    let mut worst: f64 = 0.0;
    let coords = pick(&mut rng, x.numel());
    let analytic: Vec<f64> = coords.iter().map(|&i| g.grad(xv).unwrap().data()[i]).collect();
    let numeric = finite_diff(&mut |t: &Tensor| net_loss(&ck, t, &labels), &x, &coords, 1e-6);
    worst = worst.max(rel_err(&analytic, &numeric));

    for (name, var) in SmallConvNet::param_names(&arch).iter().zip(&nv.params) {
        let w = ck.weights[name].clone();
        let coords = pick(&mut rng, w.numel());
        let analytic: Vec<f64> = coords.iter().map(|&i| g.grad(*var).unwrap().data()[i]).collect();
        let numeric = finite_diff(
            &mut |t: &Tensor| {
                let mut c = ck.clone();
                c.weights.insert(name.clone(), t.clone());
                net_loss(&c, &x, &labels)
            },
            &w,
            &coords,
            1e-6,
        );
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}
