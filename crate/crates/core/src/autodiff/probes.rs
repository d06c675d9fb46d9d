//! Small random graphs exercising one primitive each, for gradient checks.

use rand::Rng;

use super::{Graph, NodeId, Primitive, PrimitiveKind, Tensor};

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    t
}

/// Sums the output against fixed random weights so every output element
/// contributes a distinct coefficient to the scalar loss.
fn contract(g: &mut Graph, out: NodeId, rng: &mut impl Rng) -> NodeId {
    if g.value(out).len() == 1 {
        return out;
    }
    let w = g.constant(random(g.shape(out), rng));
    let prod = g.apply(Primitive::Multiply, &[out, w]).expect("same shape");
    g.apply(Primitive::ReduceSum, &[prod]).expect("reduce")
}

/// Builds `loss = <w, primitive(params...)>` on random small shapes.
pub fn probe_graph(kind: PrimitiveKind, rng: &mut impl Rng) -> (Graph, NodeId) {
    let mut g = Graph::new();
    let param = |g: &mut Graph, name: &str, shape: &[usize], rng: &mut dyn rand::RngCore| {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        g.parameter(name, t)
    };
    let n = rng.random_range(1..=3usize);
    let d = rng.random_range(2..=4usize);
    let out = match kind {
        PrimitiveKind::Add | PrimitiveKind::Multiply => {
            let a = param(&mut g, "a", &[n, 2, 3], rng);
            let b = param(&mut g, "b", &[2, 1], rng);
            let p = if kind == PrimitiveKind::Add { Primitive::Add } else { Primitive::Multiply };
            g.apply(p, &[a, b]).unwrap()
        }
        PrimitiveKind::Scale => {
            let a = param(&mut g, "a", &[n, d], rng);
            g.apply(Primitive::Scale(rng.random_range(-3.0..3.0)), &[a]).unwrap()
        }
        PrimitiveKind::MatMul => {
            let a = param(&mut g, "a", &[n, d], rng);
            let b = param(&mut g, "b", &[d, 3], rng);
            g.apply(Primitive::MatMul, &[a, b]).unwrap()
        }
        PrimitiveKind::Conv2d => {
            let stride = rng.random_range(1..=2);
            let dilation = rng.random_range(1..=2);
            let padding = rng.random_range(0..=1);
            let x = param(&mut g, "x", &[n, 2, 6, 5], rng);
            let k = param(&mut g, "k", &[3, 2, 2, 3], rng);
            g.apply(Primitive::Conv2d { stride, padding, dilation }, &[x, k]).unwrap()
        }
        PrimitiveKind::MaxPool2d => {
            let x = param(&mut g, "x", &[n, 2, 4, 6], rng);
            g.apply(Primitive::MaxPool2d { kernel: 2, stride: 2 }, &[x]).unwrap()
        }
        PrimitiveKind::Relu => {
            let x = param(&mut g, "x", &[n, d], rng);
            g.apply(Primitive::Relu, &[x]).unwrap()
        }
        PrimitiveKind::Abs => {
            let x = param(&mut g, "x", &[n, d], rng);
            g.apply(Primitive::Abs, &[x]).unwrap()
        }
        PrimitiveKind::L2Normalize => {
            let x = param(&mut g, "x", &[n, d], rng);
            g.apply(Primitive::L2Normalize, &[x]).unwrap()
        }
        PrimitiveKind::CosineDistance => {
            let u = param(&mut g, "u", &[n, d], rng);
            let v = param(&mut g, "v", &[n, d], rng);
            g.apply(Primitive::CosineDistance, &[u, v]).unwrap()
        }
        PrimitiveKind::SoftmaxCrossEntropy => {
            let (k, h) = (rng.random_range(2..=5), 2);
            let x = param(&mut g, "logits", &[n, k, h, 1], rng);
            let targets = (0..n * h).map(|_| rng.random_range(0..k)).collect();
            g.apply(Primitive::SoftmaxCrossEntropy { targets }, &[x]).unwrap()
        }
        PrimitiveKind::SigmoidCrossEntropy => {
            let x = param(&mut g, "logits", &[n, d], rng);
            let targets = (0..n * d).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
            g.apply(Primitive::SigmoidCrossEntropy { targets }, &[x]).unwrap()
        }
        PrimitiveKind::ReverseHuber => {
            let x = param(&mut g, "x", &[n, d], rng);
            g.apply(Primitive::ReverseHuber { threshold: None }, &[x]).unwrap()
        }
        PrimitiveKind::ReduceMean => {
            let x = param(&mut g, "x", &[n, d], rng);
            g.apply(Primitive::ReduceMean, &[x]).unwrap()
        }
        PrimitiveKind::ReduceSum => {
            let x = param(&mut g, "x", &[n, d], rng);
            g.apply(Primitive::ReduceSum, &[x]).unwrap()
        }
        PrimitiveKind::Concat => {
            let a = param(&mut g, "a", &[n, 2, 3], rng);
            let b = param(&mut g, "b", &[n, 1, 3], rng);
            g.apply(Primitive::Concat { axis: 1 }, &[a, b]).unwrap()
        }
        PrimitiveKind::Flatten => {
            let x = param(&mut g, "x", &[n, 2, 3], rng);
            g.apply(Primitive::Flatten, &[x]).unwrap()
        }
        PrimitiveKind::Reshape => {
            let x = param(&mut g, "x", &[n, 6], rng);
            g.apply(Primitive::Reshape { shape: vec![3, 2 * n] }, &[x]).unwrap()
        }
        PrimitiveKind::SliceRows => {
            let x = param(&mut g, "x", &[n + 2, d], rng);
            g.apply(Primitive::SliceRows { start: 1, end: n + 2 }, &[x]).unwrap()
        }
    };
    let loss = contract(&mut g, out, rng);
    (g, loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradients, grad_check};
    use crate::rng::stream;

    #[test]
    fn every_primitive_passes_on_twenty_random_inputs() {
        for kind in PrimitiveKind::ALL {
            for trial in 0..20 {
                let mut rng = stream(11, kind.name(), &[trial]);
                let (mut g, loss) = probe_graph(kind, &mut rng);
                let report = grad_check(&mut g, loss, 1e-6, 1e-5).unwrap();
                assert!(report.pass, "{kind} trial {trial}: {report:?}");
            }
        }
    }

    #[test]
    fn corrupted_gradient_fails() {
        let mut rng = stream(3, "corrupt", &[]);
        let (mut g, loss) = probe_graph(PrimitiveKind::MatMul, &mut rng);
        let mut grads = g.backward(loss).unwrap();
        let (id, _, _) = grads.iter().next().unwrap();
        grads.get_mut(id).unwrap().data_mut()[0] += 0.5;
        let report = check_gradients(&mut g, loss, &grads, 1e-6, 1e-5).unwrap();
        assert!(!report.pass);
    }

    #[test]
    fn empty_graph_passes_vacuously() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(2.0));
        let report = grad_check(&mut g, c, 1e-6, 1e-5).unwrap();
        assert!(report.pass);
        assert!(report.per_parameter.is_empty());
    }

    #[test]
    fn normalize_then_dot_matches_central_differences() {
        let mut g = Graph::new();
        let x = g.parameter("x", Tensor::from_vec(vec![0.3, -1.1, 2.0]));
        let y = g.apply(Primitive::L2Normalize, &[x]).unwrap();
        let c = g.constant(Tensor::from_vec(vec![1.5, 0.2, -0.7]));
        let prod = g.apply(Primitive::Multiply, &[y, c]).unwrap();
        let loss = g.apply(Primitive::ReduceSum, &[prod]).unwrap();
        let report = grad_check(&mut g, loss, 1e-6, 1e-6).unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn single_precision_refuses_grad_check() {
        let mut g = Graph::with_precision(crate::autodiff::Precision::Single);
        let x = g.parameter("x", Tensor::scalar(1.0));
        assert!(grad_check(&mut g, x, 1e-6, 1e-5).is_err());
    }
}
