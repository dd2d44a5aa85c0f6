use proptest::prelude::*;

use riemod::graph::{Activation, Module, Network};
use riemod::linalg::{DenseMatrix, DiagonalMatrix};
use riemod::loss::LossKind;
use riemod::metric::LayerMetric;
use riemod::optimizer::{batch_loss, train, Method, OptimizerConfig, Sample, UpdateOrder};
use riemod::rng::SplitMix64;

fn teacher_data(rng: &mut SplitMix64, n: usize) -> Vec<Sample> {
    (0..n)
        .map(|_| {
            let x = rng.normal_vec(3);
            let y = vec![(0.8 * x[0] - 0.5 * x[1]).sin() + 0.2 * x[2]];
            Sample::new(x, y)
        })
        .collect()
}

#[test]
fn parsed_architecture_trains_with_every_method_and_order() {
    let module: Module = "mlp(tanh, 3, 8, 1)".parse().unwrap();
    assert_eq!(module, Module::mlp(&[3, 8, 1], Activation::Tanh).unwrap());
    let net = Network::new(module).unwrap();
    let mut rng = SplitMix64::new(17);
    let data = teacher_data(&mut rng, 64);
    let init = net.init_params(&mut rng);
    let start = batch_loss(&net, &init, &data, LossKind::MeanSquaredError).unwrap();
    for (method, order) in [
        (Method::Riemannian, UpdateOrder::Simultaneous),
        (Method::Riemannian, UpdateOrder::Sequential),
        (Method::Sgd, UpdateOrder::Simultaneous),
    ] {
        let cfg = OptimizerConfig {
            learning_rate: 0.3,
            max_steps: 150,
            update_order: order,
            ..Default::default()
        };
        let out = train(&net, init.clone(), &data, &cfg, method, Some(16)).unwrap();
        assert!(out.error.is_none());
        assert_eq!(out.records.len(), 150);
        let end = batch_loss(&net, &out.params, &data, cfg.loss).unwrap();
        assert!(end < 0.5 * start, "{method:?} {order:?}: {start} -> {end}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// `G · (G⁻¹v) = v` with `G` applied as `Dx + Kᵀ(Kx)`.
    #[test]
    fn woodbury_inverse_solves_the_metric_system(seed in any::<u64>(), n in 1usize..60, r in 1usize..8) {
        let mut rng = SplitMix64::new(seed);
        let d: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.2, 3.0)).collect();
        let k = DenseMatrix::new(r, n, rng.normal_vec(r * n)).unwrap();
        let v = rng.normal_vec(n);
        let m = LayerMetric::new(0, DiagonalMatrix::new(d.clone()).unwrap(), k.clone()).unwrap();
        let x = m.woodbury_apply_inverse(&v).unwrap();
        let kx = k.matvec(&x).unwrap();
        let ktkx = k.tr_matvec(&kx).unwrap();
        let resid: f64 = (0..n).map(|i| (d[i] * x[i] + ktkx[i] - v[i]).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        prop_assert!(resid <= 1e-10 * scale.max(1.0), "residual {resid}");
    }
}
