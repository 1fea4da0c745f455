//! With the image carrying no label information, fusion should add nothing
//! over text alone. Slow (two full training runs), so ignored by default:
//! `cargo test -p fakeit-core --test ablation -- --ignored`.

use fakeit::data::{generate_synthetic, load_corpus, GeneratorSpec};
use fakeit::eval::compare_baselines;
use fakeit::experiment::ExperimentConfig;
use fakeit::model::Mode;

#[test]
#[ignore = "trains three models on a 2000-sample corpus"]
fn uninformative_image_gives_no_fusion_gain() {
    let base = GeneratorSpec::default();
    let spec = GeneratorSpec {
        p_match: 1.0 / base.n_topics as f64,
        mu_fake: 0.5,
        mu_genuine: 0.5,
        ..base
    };
    let tmp = tempfile::tempdir().unwrap();
    generate_synthetic(&spec, tmp.path()).unwrap();
    let corpus = load_corpus(tmp.path()).unwrap();
    let mut exp = ExperimentConfig::default();
    exp.train.seed = 7;
    let runs = compare_baselines(&corpus, &exp, |_, _| {}).unwrap();
    let acc = |mode: Mode| runs.iter().find(|r| r.training.mode == mode).unwrap().metrics.accuracy;
    let (fused, text, image) = (acc(Mode::Fused), acc(Mode::TextOnly), acc(Mode::ImageOnly));
    println!("fused {fused:.4}  text_only {text:.4}  image_only {image:.4}");
    assert!((fused - text).abs() <= 0.02, "fused {fused:.4} vs text_only {text:.4}");
}
