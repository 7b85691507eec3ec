// Step-size derivation for the masked gradient update: for each candidate
// eta, run auxiliary-set generation on the default corpus and report how
// many scenes reach the empty set within the iteration cap. This is the
// procedure behind the shipped default step size; scripts/eta_sweep.sh
// wraps it.

use aseg_core::mgu::{build_auxiliary_set, MguConfig, Termination};
use aseg_core::scenes::{generate_corpus, CorpusConfig};
use aseg_core::segmodel::{train_supervised, SegModel};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let etas: Vec<f64> = if args.is_empty() {
        vec![0.05, 0.1, 0.2, 0.3, 0.5, 0.8]
    } else {
        args.iter().map(|a| a.parse().expect("eta must be a float")).collect()
    };

    let seed = 11u64;
    let mut cfg = CorpusConfig::grid_layout(12, seed);
    cfg.train_scenes = 200;
    cfg.test_scenes = 0;
    let corpus = generate_corpus(&cfg).unwrap();
    let model = SegModel::init(12, 3, 1, vec![32, 32], seed.wrapping_add(1));
    let (model, _) =
        train_supervised(&model, &corpus.train, 4, 0.2, 128, seed.wrapping_add(2)).unwrap();

    println!("eta,scenes,empty_set,empty_frac,median_iters,max_iters_used,seconds");
    for &eta in &etas {
        let t = std::time::Instant::now();
        let mgu_cfg = MguConfig {
            step_size: eta,
            per_class_budget: 10,
            seed: seed.wrapping_add(3),
            ..MguConfig::default()
        };
        let (aux, _) = build_auxiliary_set(&model, &corpus.train, &mgu_cfg).unwrap();
        let empty = aux.iter().filter(|a| a.trace.termination == Termination::EmptySet).count();
        let mut iters: Vec<usize> = aux.iter().map(|a| a.trace.iterations).collect();
        iters.sort_unstable();
        println!(
            "{eta},{},{empty},{:.3},{},{},{:.1}",
            aux.len(),
            empty as f64 / aux.len() as f64,
            iters[iters.len() / 2],
            iters.last().unwrap(),
            t.elapsed().as_secs_f64()
        );
    }
}
