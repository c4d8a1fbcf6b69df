use talknet::models::ModelKind;
use talknet::pipeline::infer::checkpoint_file;
use talknet::pipeline::train::metrics_path;
use talknet::pipeline::*;

const WINDOW: usize = 20;
/// Float noise once the duration loss has reached zero.
const SLACK: f64 = 1e-12;

fn moving_average(xs: &[f64]) -> Vec<f64> {
    xs.windows(WINDOW).map(|w| w.iter().sum::<f64>() / WINDOW as f64).collect()
}

#[test]
fn fixture_loss_falls_under_a_moving_average() {
    let dir = tempfile::tempdir().unwrap();
    let fx = generate_fixtures(dir.path().join("fx")).unwrap();
    prepare_training_set(&fx.manifest, &fx.lattice_dir, dir.path().join("prep"), &PrepareOptions::default()).unwrap();
    let data = PreparedDataset::load(dir.path().join("prep")).unwrap();
    for kind in ModelKind::ALL {
        let out = checkpoint_file(dir.path(), kind);
        let summary = train(kind, &TrainConfig::fixture(), &data, &out).unwrap();
        let losses: Vec<f64> = std::fs::read_to_string(metrics_path(&out))
            .unwrap()
            .lines()
            .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap().get("loss").and_then(|v| v.as_f64()))
            .collect();
        assert_eq!(losses.len() as u64, summary.steps);
        let ma = moving_average(&losses);
        for (i, pair) in ma.windows(2).enumerate() {
            assert!(pair[1] <= pair[0] + SLACK, "{kind}: moving average rises at step {}: {} -> {}", i + WINDOW, pair[0], pair[1]);
        }
    }
}
