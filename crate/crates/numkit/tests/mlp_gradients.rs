use numkit::{GradCheck, ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mlp_params(seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    p.insert("w1", Tensor::randn([5, 8], 0.5, &mut rng));
    p.insert("b1", Tensor::randn([8], 0.1, &mut rng));
    p.insert("w2", Tensor::randn([8, 3], 0.5, &mut rng));
    p.insert("b2", Tensor::randn([3], 0.1, &mut rng));
    p
}

#[test]
fn two_layer_mlp_matches_central_differences() {
    for seed in 0..3u64 {
        let params = mlp_params(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = Tensor::<f64>::randn([6, 5], 1.0, &mut rng);
        let y = Tensor::<f64>::randn([6, 3], 1.0, &mut rng);
        let mask = Tensor::<f64>::ones([6, 3]);
        let report = GradCheck::default()
            .run(&params, |t: &mut Tape<f64>, p| {
                let xv = t.input(x.clone());
                let w1 = t.param("w1", p.get("w1").unwrap());
                let b1 = t.param("b1", p.get("b1").unwrap());
                let w2 = t.param("w2", p.get("w2").unwrap());
                let b2 = t.param("b2", p.get("b2").unwrap());
                let h = t.matmul(xv, w1)?;
                let h = t.add_row(h, b1)?;
                let h = t.gelu(h);
                let o = t.matmul(h, w2)?;
                let o = t.add_row(o, b2)?;
                t.mse(o, &y, &mask)
            })
            .unwrap();
        assert_eq!(report.checked, 5 * 8 + 8 + 8 * 3 + 3);
        assert!(report.max_rel_err < 1e-4, "seed {seed}: {report:?}");
    }
}

#[test]
fn op_suite_covers_losses_and_passes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let reports = numkit::gradcheck::op_suite(&mut rng).unwrap();
    let names: Vec<_> = reports.iter().map(|(n, _)| *n).collect();
    for required in ["poisson_nll", "mse", "cosine_alignment", "layer_norm", "rotary", "softmax_rows"] {
        assert!(names.contains(&required), "missing {required}");
    }
    for (name, rep) in &reports {
        assert!(rep.max_rel_err < 1e-4, "{name}: {rep:?}");
    }
}

#[test]
fn f32_and_f64_forward_agree() {
    let p64 = mlp_params(4);
    let p32 = p64.cast::<f32>();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::<f64>::randn([4, 5], 1.0, &mut rng);
    let y64 = x.matmul(p64.get("w1").unwrap()).unwrap();
    let y32 = x.cast::<f32>().matmul(p32.get("w1").unwrap()).unwrap();
    assert!(y64.max_abs_diff(&y32.cast()) < 1e-5);
}
