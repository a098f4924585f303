use augsearch::autodiff::{Tape, Tensor, Var};
use augsearch::estimators::{
    enumerated_categorical_gradient, gumbel_softmax_st, relax_gradient, reinforce_gradient, softmax,
    Critic, GumbelSoftmaxST, RelaxConfig, Surrogate,
};
use augsearch::rng::RandomStream;
use augsearch::Result;

fn linear<'t>(t: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    Ok(x.mul(t.constant(Tensor::vector(&[1.0, -1.0, 0.5]))).sum())
}

fn objective<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    f
}

fn moments(samples: &[Vec<f64>]) -> Vec<(f64, f64, f64)> {
    samples
        .iter()
        .map(|xs| {
            let n = xs.len() as f64;
            let m = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
            (m, var, (var / n).sqrt())
        })
        .collect()
}

#[test]
fn relax_is_unbiased_on_linear_toy() {
    let w = [0.0, 0.0, 0.0];
    let n = 100_000;
    let exact = enumerated_categorical_gradient(linear, &w).unwrap();
    let mut rng = RandomStream::new(2024, 1);
    let mut relax = vec![Vec::with_capacity(n); 3];
    for _ in 0..n {
        let s = relax_gradient(linear, &w, GumbelSoftmaxST::default(), &RelaxConfig::default(), None, &mut rng)
            .unwrap();
        for i in 0..3 {
            relax[i].push(s.gradient[i]);
        }
    }
    for (i, (m, _, se)) in moments(&relax).into_iter().enumerate() {
        assert!((m - exact[i]).abs() < 3.0 * se, "coordinate {i}: {m} vs {}", exact[i]);
    }
}

#[test]
fn critic_relax_has_lower_total_variance_than_reinforce() {
    let w = [0.0, 0.0, 0.0];
    let cfg = RelaxConfig {
        surrogate: Surrogate::Critic,
        ..RelaxConfig::default()
    };
    let mut rng = RandomStream::new(2025, 1);
    let mut critic = Critic::new(3, cfg.critic_width, cfg.critic_lr, &mut rng);
    for _ in 0..20_000 {
        relax_gradient(linear, &w, GumbelSoftmaxST::default(), &cfg, Some(&mut critic), &mut rng).unwrap();
    }
    let n = 100_000;
    let exact = enumerated_categorical_gradient(linear, &w).unwrap();
    let mut relax = vec![Vec::with_capacity(n); 3];
    let mut reinforce = vec![Vec::with_capacity(n); 3];
    for _ in 0..n {
        let s = relax_gradient(linear, &w, GumbelSoftmaxST::default(), &cfg, Some(&mut critic), &mut rng).unwrap();
        let r = reinforce_gradient(linear, &w, &mut rng).unwrap();
        for i in 0..3 {
            relax[i].push(s.gradient[i]);
            reinforce[i].push(r.gradient[i]);
        }
    }
    let mr = moments(&relax);
    let mf = moments(&reinforce);
    for i in 0..3 {
        assert!((mr[i].0 - exact[i]).abs() < 3.0 * mr[i].2, "coordinate {i}");
    }
    let total_relax: f64 = mr.iter().map(|m| m.1).sum();
    let total_reinforce: f64 = mf.iter().map(|m| m.1).sum();
    assert!(total_relax <= total_reinforce, "{total_relax} > {total_reinforce}");
}

#[test]
fn relax_is_unbiased_on_random_toys() {
    let mut meta = RandomStream::new(99, 0);
    for toy in 0..4 {
        let n_o = 2 + toy;
        let f = meta.normals(n_o);
        let w = meta.normals(n_o);
        let fc = f.clone();
        let obj = objective(move |t, x| {
            // Nonlinear in the relaxed point so the control variate is imperfect.
            let v = x.mul(t.constant(Tensor::vector(&fc))).sum();
            Ok(v.add(v.square()))
        });
        let exact = enumerated_categorical_gradient(&obj, &w).unwrap();
        let mut rng = RandomStream::new(7, toy as u64);
        let n = 20_000;
        let mut samples = vec![Vec::with_capacity(n); n_o];
        for _ in 0..n {
            let s = relax_gradient(&obj, &w, GumbelSoftmaxST::default(), &RelaxConfig::default(), None, &mut rng)
                .unwrap();
            for i in 0..n_o {
                samples[i].push(s.gradient[i]);
            }
        }
        for (i, (m, _, se)) in moments(&samples).into_iter().enumerate() {
            assert!((m - exact[i]).abs() < 3.0 * se + 1e-12, "toy {toy} coord {i}: {m} vs {}", exact[i]);
        }
    }
}

#[test]
fn gumbel_frequencies_pass_chi_square_on_most_seeds() {
    // 0.99 quantile of chi-square with 3 degrees of freedom.
    const CRIT: f64 = 11.345;
    let w = [0.5, -0.3, 0.1, 0.0];
    let p = softmax(&w);
    let draws = 2000;
    let seeds = 100;
    let mut passed = 0;
    for seed in 0..seeds {
        let mut rng = RandomStream::new(seed, 42);
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            let tape = Tape::new();
            let wl = tape.leaf(Tensor::vector(&w));
            let g: Vec<f64> = (0..4).map(|_| rng.gumbel()).collect();
            let (_, k) = gumbel_softmax_st(wl, &g, 0.5).unwrap();
            counts[k] += 1;
        }
        let chi: f64 = counts
            .iter()
            .zip(&p)
            .map(|(&c, &pi)| {
                let e = pi * draws as f64;
                (c as f64 - e).powi(2) / e
            })
            .sum();
        if chi < CRIT {
            passed += 1;
        }
    }
    assert!(passed >= 95, "{passed} of {seeds} seeds passed");
}
