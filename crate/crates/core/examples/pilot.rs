//! Quick pilot: prints the headline numbers behind the harness experiments
//! for the current default config. Handy when re-tuning task sizes.

use ipl_core::config::RunConfig;
use ipl_core::corpus::synth_dataset;
use ipl_core::decoder::Lexicon;
use ipl_core::eval::train_task_lm;
use ipl_core::ipl::{run_ipl, IplResources};

fn main() {
    let cfg = RunConfig::default();
    let bundle = synth_dataset(&cfg.synth, cfg.seeds.data).unwrap();
    let lexicon = Lexicon::from_vocabulary(&bundle.dataset.vocabulary);
    let lm = train_task_lm(&cfg, cfg.lm.order).unwrap();
    let total = cfg.ipl.bootstrap_epochs + cfg.ipl.rounds * cfg.ipl.epochs_per_round;

    let t0 = std::time::Instant::now();
    let mut run = |name: &str, lm_on: bool, aug_on: bool, rounds: usize, boot: usize| {
        let mut c = cfg.clone();
        c.ipl.use_lm_decoding = lm_on;
        c.ipl.use_augmentation = aug_on;
        c.ipl.rounds = rounds;
        c.ipl.bootstrap_epochs = boot;
        let res = IplResources {
            lexicon: &lexicon,
            lm: lm_on.then_some(&lm),
            rescore_lm: None,
        };
        let (_, _, record) = run_ipl(&bundle.dataset, &c, res, None).unwrap();
        let boot_wer = record
            .curve
            .iter()
            .filter(|p| p.phase == "bootstrap")
            .next_back()
            .map(|p| p.dev_wer_greedy)
            .unwrap_or(f64::NAN);
        println!(
            "{name:16} boot_wer={boot_wer:.4} final_wer={:.4} pl_sizes={:?} empties={:?} infeasible={:?} [{:.1}s]",
            record.final_dev_wer_greedy,
            record
                .pseudo_label_sets
                .iter()
                .map(|s| s.entries.len())
                .collect::<Vec<_>>(),
            record
                .pseudo_label_sets
                .iter()
                .map(|s| s.empty_count)
                .collect::<Vec<_>>(),
            record
                .pseudo_label_sets
                .iter()
                .map(|s| s.infeasible_count)
                .collect::<Vec<_>>(),
            t0.elapsed().as_secs_f64(),
        );
        record.final_dev_wer_greedy
    };

    let baseline = run("baseline", false, false, 0, total);
    let neither = run("ipl_neither", false, false, cfg.ipl.rounds, cfg.ipl.bootstrap_epochs);
    let aug = run("ipl_augment", false, true, cfg.ipl.rounds, cfg.ipl.bootstrap_epochs);
    let lm_only = run("ipl_lm", true, false, cfg.ipl.rounds, cfg.ipl.bootstrap_epochs);
    let full = run("ipl_lm_augment", true, true, cfg.ipl.rounds, cfg.ipl.bootstrap_epochs);

    println!("\norderings:");
    println!("  full < aug?        {}", full < aug);
    println!("  full < lm_only?    {}", full < lm_only);
    println!("  |neither-baseline| = {:.4}", (neither - baseline).abs());
    println!(
        "  full relative improvement vs baseline = {:.1}%",
        100.0 * (baseline - full) / baseline
    );
}
