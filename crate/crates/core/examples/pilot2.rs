//! Multi-seed pilot for the ablation band plus subset / rounds / leakage
//! shapes. Slower than `pilot`; prints one block per experiment.

use ipl_core::config::RunConfig;
use ipl_core::corpus::synth_dataset;
use ipl_core::decoder::Lexicon;
use ipl_core::eval::{harness_lm_corpora, harness_rounds, harness_subset, train_task_lm};
use ipl_core::ipl::{run_ipl, IplResources};

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "ablation".into());
    let cfg = RunConfig::default();
    let bundle = synth_dataset(&cfg.synth, cfg.seeds.data).unwrap();
    let lexicon = Lexicon::from_vocabulary(&bundle.dataset.vocabulary);
    let lm = train_task_lm(&cfg, cfg.lm.order).unwrap();
    let total = cfg.ipl.bootstrap_epochs + cfg.ipl.rounds * cfg.ipl.epochs_per_round;
    let t0 = std::time::Instant::now();

    match which.as_str() {
        "ablation" => {
            let mut means = std::collections::BTreeMap::<&str, Vec<f64>>::new();
            for &seed in &cfg.harness.ablation_seeds {
                for (name, lm_on, aug_on, rounds, boot) in [
                    ("baseline", false, false, 0usize, total),
                    ("neither", false, false, cfg.ipl.rounds, cfg.ipl.bootstrap_epochs),
                    ("augment", false, true, cfg.ipl.rounds, cfg.ipl.bootstrap_epochs),
                    ("lm", true, false, cfg.ipl.rounds, cfg.ipl.bootstrap_epochs),
                    ("full", true, true, cfg.ipl.rounds, cfg.ipl.bootstrap_epochs),
                ] {
                    let mut c = cfg.clone();
                    c.seeds.run = seed;
                    c.ipl.use_lm_decoding = lm_on;
                    c.ipl.use_augmentation = aug_on;
                    c.ipl.rounds = rounds;
                    c.ipl.bootstrap_epochs = boot;
                    let res = IplResources {
                        lexicon: &lexicon,
                        lm: lm_on.then_some(&lm),
                        rescore_lm: None,
                    };
                    let (_, _, r) = run_ipl(&bundle.dataset, &c, res, None).unwrap();
                    println!(
                        "seed {seed} {name:9} final={:.4}  [{:.0}s]",
                        r.final_dev_wer_greedy,
                        t0.elapsed().as_secs_f64()
                    );
                    means.entry(name).or_default().push(r.final_dev_wer_greedy);
                }
            }
            println!("\nmeans:");
            let m = |k: &str| {
                let v = &means[k];
                v.iter().sum::<f64>() / v.len() as f64
            };
            for k in ["baseline", "neither", "augment", "lm", "full"] {
                println!("  {k:9} {:.4}  (runs {:?})", m(k), means[k]);
            }
            println!("  baseline-neither = {:.4}", m("baseline") - m("neither"));
            println!("  full<aug: {}  full<lm: {}", m("full") < m("augment"), m("full") < m("lm"));
            println!(
                "  rel improvement = {:.1}%",
                100.0 * (m("baseline") - m("full")) / m("baseline")
            );
        }
        "subset" => {
            for run_seed in [2u64, 11, 12, 13] {
                let mut c = cfg.clone();
                c.seeds.run = run_seed;
                c.harness.subset_fractions = vec![0.1, 0.25, 1.0];
                let csv = harness_subset(&bundle.dataset, &c).unwrap();
                let mut finals = std::collections::BTreeMap::<String, f64>::new();
                for row in &csv.rows {
                    let f: Vec<&str> = row.split(',').collect();
                    finals.insert(f[0].to_string(), f[3].parse().unwrap());
                }
                println!(
                    "seed {run_seed}: {finals:?} gap25={:.4}  [{:.0}s]",
                    finals["0.25"] - finals["1"],
                    t0.elapsed().as_secs_f64()
                );
            }
        }
        "rounds" => {
            let csv = harness_rounds(&bundle.dataset, &cfg).unwrap();
            for row in &csv.rows {
                println!("{row}");
            }
            println!("[{:.0}s]", t0.elapsed().as_secs_f64());
        }
        "leak" => {
            let csv = harness_lm_corpora(&bundle.dataset, &bundle.hidden_refs, &cfg).unwrap();
            for row in &csv.rows {
                println!("{row}");
            }
            println!("[{:.0}s]", t0.elapsed().as_secs_f64());
        }
        "trace" => {
            // Full IPL run with per-phase dev WER and pseudo-label quality.
            let mut c = cfg.clone();
            if let Some(seed) = std::env::args().nth(2).and_then(|s| s.parse::<u64>().ok()) {
                c.seeds.run = seed;
            }
            if let Some(f) = std::env::args().nth(3).and_then(|s| s.parse::<f64>().ok()) {
                c.ipl.subset_fraction = f;
            }
            let res = IplResources {
                lexicon: &lexicon,
                lm: Some(&lm),
                rescore_lm: None,
            };
            let (_, _, mut r) = run_ipl(&bundle.dataset, &c, res, None).unwrap();
            ipl_core::eval::annotate_pl_quality(&mut r, &bundle.hidden_refs).unwrap();
            for (phase, _) in &r.phase_fingerprints {
                let last = r.curve.iter().filter(|p| &p.phase == phase).next_back().unwrap();
                println!("{phase:14} dev_wer={:.4}", last.dev_wer_greedy);
            }
            println!("pl_wer per round: {:?}", r.pl_wer_per_round);
            println!("tuned: {:?}", r.tuned_params);
            c.ipl.rounds = 0;
            println!("[{:.0}s]", t0.elapsed().as_secs_f64());
        }
        "curve" => {
            let mut c = cfg.clone();
            c.ipl.rounds = 0;
            c.ipl.bootstrap_epochs = 160;
            c.ipl.use_lm_decoding = false;
            let res = IplResources {
                lexicon: &lexicon,
                lm: None,
                rescore_lm: None,
            };
            let (_, _, r) = run_ipl(&bundle.dataset, &c, res, None).unwrap();
            for p in r.curve.iter().step_by(5) {
                println!("epoch {:3}  dev_wer {:.4}", p.epoch, p.dev_wer_greedy);
            }
            println!("[{:.0}s]", t0.elapsed().as_secs_f64());
        }
        other => panic!("unknown pilot `{other}`"),
    }
}
