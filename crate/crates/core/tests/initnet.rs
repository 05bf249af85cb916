use wmplanlab::encoder::Encoder;
use wmplanlab::envs::{generate_dataset, EnvSpec, Policy};
use wmplanlab::initnet::{train_initnet, InitNetConfig};
use wmplanlab::worldmodel::LatentDataset;

fn data(n: usize, seed: u64, enc: &Encoder) -> LatentDataset {
    let raw = generate_dataset(&EnvSpec::wall2d(), n, 31, Policy::default(), seed).unwrap();
    LatentDataset::from_raw(&raw, enc).unwrap()
}

#[test]
fn held_out_actions_beat_the_mean_predictor() {
    let enc = Encoder::random_fourier(2, 16, 4.0, 0).unwrap();
    let h = 10;
    let cfg = InitNetConfig {
        hidden: vec![64, 64],
        epochs: 5,
        ..InitNetConfig::new(h)
    };
    let (net, _) = train_initnet(&data(300, 0, &enc), &cfg).unwrap();

    let held = data(40, 1, &enc);
    let mut targets = Vec::new();
    let mut predictions = Vec::new();
    for t in &held.trajectories {
        for s in (0..t.actions.len() + 1 - h).step_by(5) {
            targets.extend(t.actions[s..s + h].iter().flatten().copied());
            predictions.extend(net.init_actions(&t.latents[s], &t.latents[s + h]).unwrap().into_iter().flatten());
        }
    }
    // Variance around the per-coordinate mean action.
    let n = targets.len() as f64;
    let mean: Vec<f64> = (0..2).map(|d| targets.iter().skip(d).step_by(2).sum::<f64>() / (n / 2.0)).collect();
    let variance = targets.iter().enumerate().map(|(i, a)| (a - mean[i % 2]).powi(2)).sum::<f64>() / n;
    let mse = targets.iter().zip(&predictions).map(|(a, p)| (a - p) * (a - p)).sum::<f64>() / n;
    assert!(mse < variance, "mse {mse:.4} vs variance {variance:.4}");
}
