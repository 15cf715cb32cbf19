// scratch harness for calibrating the trainer; removed before release
use std::time::Instant;
use veinseg::data::generate_benchmark_dataset;
use veinseg::metrics::{evaluate_model, mean, PostprocessConfig};
use veinseg::network::NetConfig;
use veinseg::trainer::{train_supervised, TrainConfig, TrainSets};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let divisor: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(8);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);

    let entries = generate_benchmark_dataset(42, 4, 8, 4).unwrap();
    let sets = TrainSets::from_entries(&entries).unwrap();
    println!(
        "labeled {} unlabeled {} val {}",
        sets.labeled.len(),
        sets.unlabeled.len(),
        sets.validation.len()
    );

    let cfg = TrainConfig {
        seed: 7,
        net: NetConfig {
            width_divisor: divisor,
            cardinality: if divisor >= 8 { 16 } else { 32 },
            batchnorm: true,
        },
        stage1_max_epochs: epochs,
        stage2_max_epochs: epochs,
        patience: 1000,
        ..Default::default()
    };

    let t0 = Instant::now();
    let out = train_supervised(&sets, &cfg).unwrap();
    println!("trained in {:.1}s, best val dsc {:.4}", t0.elapsed().as_secs_f64(), out.best_val_dsc);
    for row in out.log.rows().iter() {
        if let Some(v) = row.val_dsc {
            println!(
                "iter {:4} phase {:5} loss {:.5} val_dsc {:.4}",
                row.iter, row.phase, row.loss_total, v
            );
        }
    }

    let evals = evaluate_model(&out.model, &sets.validation_entries(), &PostprocessConfig::default()).unwrap();
    println!("final mean dsc {:.4}", mean(evals.iter().map(|e| e.dsc)));
    println!(
        "failures {} / {}",
        evals.iter().filter(|e| e.failed).count(),
        evals.len()
    );

    // Foreground probability statistics on the first validation image.
    let entry = &sets.validation_entries()[0];
    let (img64, mask64) = veinseg::augment::apply_spatial(
        &entry.image,
        entry.mask.as_ref(),
        &veinseg::augment::SpatialAug::identity(),
    )
    .unwrap();
    let probs = veinseg::network::forward_probs(&out.model, &img64.to_input_tensor::<f32>()).unwrap();
    let fg: Vec<f32> = probs.data()[4096..8192].to_vec();
    let fg_mean = fg.iter().sum::<f32>() / 4096.0;
    let fg_max = fg.iter().cloned().fold(0.0f32, f32::max);
    let gt_fg = mask64.unwrap().foreground_count();
    println!("fg prob mean {fg_mean:.4} max {fg_max:.4}; gt foreground {gt_fg} px");
}
