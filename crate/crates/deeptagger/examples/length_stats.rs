//! Print the generator's length statistics for calibration checks.

use deeptagger::corpus::{augment_with_titles, generate_synthetic_corpus, GeneratorConfig};
use deeptagger::tensor::Rng;

fn main() {
    let n: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(5_000);
    let config = GeneratorConfig {
        unlabeled: n,
        weak: 0,
        strong: 0,
        test: 0,
        ..GeneratorConfig::default()
    };
    let corpus = generate_synthetic_corpus(&config, &Rng::new(1)).unwrap();
    let n = corpus.unlabeled.len() as f64;
    let qmean = corpus.unlabeled.iter().map(|e| e.query.len() as f64).sum::<f64>() / n;
    let amean = corpus
        .unlabeled
        .iter()
        .map(|e| augment_with_titles(e, 3, 512).tokens.len() as f64)
        .sum::<f64>()
        / n;
    let ambiguous = deeptagger::corpus::domain_rules(&config).unwrap().ambiguous;
    let amb_frac = corpus
        .unlabeled
        .iter()
        .filter(|e| e.query.iter().any(|t| ambiguous.contains(t)))
        .count() as f64
        / n;
    println!("mean query length      {qmean:.3}");
    println!("mean augmented length  {amean:.3}");
    println!("ambiguous query share  {amb_frac:.3}");
}
