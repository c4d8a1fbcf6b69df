use talknet::models::{DurationModel, MelModel, ModelConfig, PitchModel};

/// Graphemes of a typical English corpus plus the blank.
const VOCAB: usize = 40;

fn counts() -> (usize, usize, usize) {
    let d = DurationModel::<f32>::build(&ModelConfig::duration(), VOCAB, 0).unwrap().count_params();
    let p = PitchModel::<f32>::build(&ModelConfig::pitch(), VOCAB, 0).unwrap().count_params();
    let m = MelModel::<f32>::build(&ModelConfig::mel(), VOCAB, 0).unwrap().count_params();
    (d, p, m)
}

#[test]
fn full_scale_counts_near_published_sizes() {
    let (d, p, m) = counts();
    println!("duration={d} pitch={p} mel={m} total={}", d + p + m);
    assert!((1_960_000..=2_650_000).contains(&d), "duration {d}");
    assert!((7_200_000..=9_800_000).contains(&m), "mel {m}");
    let total = (d + p + m) as f64;
    assert!((total - 13.2e6).abs() <= 0.15 * 13.2e6, "total {total}");
}

#[test]
fn classifier_head_stays_in_range() {
    let d = DurationModel::<f32>::build(&ModelConfig::duration_classifier(), VOCAB, 0).unwrap().count_params();
    assert!((1_960_000..=2_650_000).contains(&d), "duration classifier {d}");
}

#[test]
fn running_statistics_are_not_counted() {
    let m = DurationModel::<f32>::build(&ModelConfig::duration().scaled(0.25), VOCAB, 0).unwrap();
    let all: usize = m.net.store.entries().iter().map(|e| e.value.len()).sum();
    let buffers: usize = m.net.store.entries().iter().filter(|e| !e.trainable()).map(|e| e.value.len()).sum();
    assert!(buffers > 0);
    assert_eq!(m.count_params(), all - buffers);
}
