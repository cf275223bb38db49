// Scratch run: accuracy trajectories of the three algorithms on defaults.
// Env vars: ROUNDS, MU_DEG, SPREAD_DEG (env-3 angle law), EXT_DIMS, SEEDS.

use risfl::environments::{
    default_environments, generate_dataset, AngleLaw, ConfigClassSet,
};
use risfl::federated::training::{
    final_window_mean, run_training, DataConfig, RunSetup, SPLIT_IN_DIST, SPLIT_OOD, SPLIT_TRAIN,
};
use risfl::federated::{Algorithm, TrainerConfig};

fn envf(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|s| s.parse().ok()).unwrap_or(default)
}

// Centralized plain-SGD upper bound on the geo features: pooled data, one
// model, same step rule as the trainers.
fn solo_geo_baseline(setup: &RunSetup, rounds: usize) {
    use risfl::environments::{apply_scaler, featurize_geo, fit_scaler, ScalerKind};
    use risfl::federated::AgentState;
    use risfl::nn::{backward, cross_entropy, forward, forward_logits, init_params, sgd_step};

    let classes = &setup.classes;
    let train: Vec<_> = setup
        .train_envs
        .iter()
        .map(|env| generate_dataset(env, classes, 1500, 1).unwrap())
        .collect();
    let eval_in: Vec<_> = setup
        .train_envs
        .iter()
        .map(|env| generate_dataset(env, classes, 500, 2).unwrap())
        .collect();
    let ood = generate_dataset(&setup.ood_env, classes, 1000, 3).unwrap();

    let matrix = |sets: &[risfl::environments::Dataset]| {
        let rows: Vec<Vec<f64>> = sets
            .iter()
            .flat_map(|d| d.samples.iter().map(featurize_geo))
            .collect();
        ndarray::Array2::from_shape_fn((rows.len(), 6), |(i, j)| rows[i][j])
    };
    let labels = |sets: &[risfl::environments::Dataset]| -> Vec<usize> {
        sets.iter().flat_map(|d| d.samples.iter().map(|s| s.label)).collect()
    };
    let raw_train = matrix(&train);
    let scaler = fit_scaler(ScalerKind::MinMax, raw_train.view()).unwrap();
    let x_train = apply_scaler(&scaler, raw_train.view()).unwrap();
    let y_train = labels(&train);
    let x_in = apply_scaler(&scaler, matrix(&eval_in).view()).unwrap();
    let y_in = labels(&eval_in);
    let x_ood = apply_scaler(&scaler, matrix(std::slice::from_ref(&ood)).view()).unwrap();
    let y_ood = labels(std::slice::from_ref(&ood));

    let mut model = init_params(&setup.arch.f_predictor_spec(classes.len()), 9);
    let mut agent = AgentState::new(0, 0, x_train.clone(), y_train.clone(), model.clone(), 9).unwrap();
    let acc = |model: &risfl::nn::MlpParams, x: &ndarray::Array2<f64>, y: &[usize]| {
        let logits = forward_logits(model, x.view()).unwrap();
        let mut ok = 0;
        for (row, &label) in logits.rows().into_iter().zip(y) {
            let pred = if row[1] > row[0] { 1 } else { 0 };
            if pred == label {
                ok += 1;
            }
        }
        ok as f64 / y.len() as f64
    };
    for round in 1..=rounds {
        let (batch, yb) = agent.next_minibatch(32);
        let (logits, cache) = forward(&model, batch.view()).unwrap();
        let (_, dl) = cross_entropy(&logits, &yb).unwrap();
        let g = backward(&model, &cache, &dl).unwrap();
        sgd_step(&mut model, &g, 2e-3 * batch.nrows() as f64).unwrap();
        if round % (rounds / 10).max(1) == 0 {
            println!(
                "  solo-geo round {:5} train {:.3} in {:.3} ood {:.3}",
                round,
                acc(&model, &x_train, &y_train),
                acc(&model, &x_in, &y_in),
                acc(&model, &x_ood, &y_ood)
            );
        }
    }
}

fn main() {
    let rounds = envf("ROUNDS", 400.0) as usize;
    let mu = envf("MU_DEG", 45.0).to_radians();
    let spread = envf("SPREAD_DEG", 15.0).to_radians();
    let seeds = envf("SEEDS", 1.0) as u64;
    let trace = std::env::var("TRACE").is_ok();

    let mut setup = RunSetup::default_with(DataConfig::new(vec![1500, 1500]));
    setup.ood_env.rx_distribution.angle_law = AngleLaw::Concentrated { center: mu, spread };
    if let Ok(dims) = std::env::var("EXT_DIMS") {
        setup.arch.extractor_dims = dims.split(',').map(|d| d.parse().unwrap()).collect();
    }
    if let Ok(dims) = std::env::var("F_DIMS") {
        setup.arch.f_hidden = dims.split(',').map(|d| d.parse().unwrap()).collect();
    }

    let classes = ConfigClassSet::two_class(setup.ood_env.geometry.num_elements());
    let ds = generate_dataset(&setup.ood_env, &classes, 1000, 5).unwrap();
    let ones = ds.samples.iter().filter(|s| s.label == 1).count();
    println!(
        "env3 mu={:.0}deg spread={:.0}deg label-1 fraction: {:.3}",
        mu.to_degrees(),
        spread.to_degrees(),
        ones as f64 / 1000.0
    );

    if std::env::var("SOLO").is_ok() {
        solo_geo_baseline(&setup, rounds);
    }

    let only: Option<String> = std::env::var("ONLY").ok();
    for algorithm in Algorithm::all() {
        if let Some(name) = &only {
            if algorithm.name() != name {
                continue;
            }
        }
        let start = std::time::Instant::now();
        let mut finals = Vec::new();
        for seed in 1..=seeds {
            let mut cfg = TrainerConfig::new(algorithm, rounds, seed);
            cfg.eta_w = envf("ETA_W", cfg.eta_w);
            cfg.eta_phi = envf("ETA_PHI", cfg.eta_phi);
            cfg.eval_every = 10;
            let out = run_training(&setup, &cfg).unwrap();
            if trace && seed == 1 {
                for m in out.metrics.iter().step_by((rounds / 10 / 10).max(1)) {
                    println!(
                        "  round {:5} train {:.3} in {:.3} ood {:.3}",
                        m.round,
                        m.split(SPLIT_TRAIN).unwrap().accuracy,
                        m.split(SPLIT_IN_DIST).unwrap().accuracy,
                        m.split(SPLIT_OOD).unwrap().accuracy,
                    );
                }
            }
            let acc_in = final_window_mean(&out.metrics, SPLIT_IN_DIST, 50, |s| s.accuracy).unwrap();
            let acc_ood = final_window_mean(&out.metrics, SPLIT_OOD, 50, |s| s.accuracy).unwrap();
            let acc_train = final_window_mean(&out.metrics, SPLIT_TRAIN, 50, |s| s.accuracy).unwrap();
            let se_ratio = final_window_mean(&out.metrics, SPLIT_OOD, 50, |s| s.se_pred).unwrap()
                / final_window_mean(&out.metrics, SPLIT_OOD, 50, |s| s.se_best).unwrap();
            finals.push((acc_train, acc_in, acc_ood, se_ratio));
        }
        let mean = |f: fn(&(f64, f64, f64, f64)) -> f64| {
            finals.iter().map(f).sum::<f64>() / finals.len() as f64
        };
        let ood_vals: Vec<f64> = finals.iter().map(|t| t.2).collect();
        let ood_mean = mean(|t| t.2);
        let ood_std = (ood_vals.iter().map(|v| (v - ood_mean).powi(2)).sum::<f64>()
            / ood_vals.len() as f64)
            .sqrt();
        println!(
            "{:10} train {:.3} in {:.3} ood {:.3}+-{:.3} se_ratio {:.3}  ({:.1}s)",
            algorithm.name(),
            mean(|t| t.0),
            mean(|t| t.1),
            ood_mean,
            ood_std,
            mean(|t| t.3),
            start.elapsed().as_secs_f64()
        );
    }
}
