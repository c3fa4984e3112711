//! Runs the noisy-label boosting experiment for the seeds given on the
//! command line and prints per-iteration test metrics.

use std::time::Instant;

use cmadet::eval::fp_counts;
use cmadet::pipeline::{detect_all, experiment_config, run_experiment};
use cmadet::Tensor;

fn main() -> Result<(), cmadet::Error> {
    let mut seeds: Vec<u64> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    if seeds.is_empty() {
        seeds.push(0);
    }
    for seed in seeds {
        let mut cfg = experiment_config(seed);
        if let Ok(e) = std::env::var("EPOCHS") {
            cfg.train.epochs = e.parse().unwrap();
        }
        if let Ok(e) = std::env::var("WARM_EPOCHS") {
            cfg.train.warm_epochs = e.parse().unwrap();
        }
        let t = Instant::now();
        let out = run_experiment(&cfg)?;
        let r = &out.report;
        println!("seed {seed}: {:.1}s noise {:?}", t.elapsed().as_secs_f64(), r.noise);
        for m in &r.iterations {
            println!(
                "  {:>2} {:?} E={:.3} a={:.3} val={:.3} test={:.3} fp={:?}",
                m.iteration, m.stage, m.error_rate, m.alpha, m.val_map, m.test_map, m.test_fp
            );
        }
        if let Some(e) = &r.ensemble {
            println!(
                "  ensemble {:?} lambda={:.3?} val={:.3} test={:.3} fp={:?}",
                e.members, e.lambda, e.val_map, e.test_map, e.test_fp
            );
        }
        if let Some(clean) = r.clean_iteration {
            let test: Vec<Tensor> = out.splits.test.images.iter().map(|i| i.to_tensor()).collect();
            let gts = &out.splits.test.annotations;
            let first = detect_all(&out.records[0].params, &test, &cfg.decode)?;
            let cleaned = detect_all(&out.records[clean - 1].params, &test, &cfg.decode)?;
            for thr in [0.05, 0.1, 0.2, 0.3, 0.5] {
                let (a, b) = (fp_counts(&first, gts, cfg.net.num_classes, thr), fp_counts(&cleaned, gts, cfg.net.num_classes, thr));
                println!("  fp@{thr}: first {a:?} clean {b:?}");
            }
        }
        println!(
            "  clean={:?} best_nlcma={:?} best_single={} checks={:?}",
            r.clean_iteration, r.best_nlcma_iteration, r.best_single_iteration, r.checks
        );
    }
    Ok(())
}
