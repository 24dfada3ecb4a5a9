//! Training-loop integration: overfit sanity, determinism, and an ignored
//! long-form benchmark used to eyeball synthetic-dataset performance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fsdet_core::data::QueryResize;
use fsdet_core::episode::{aggregate, evaluate_episode, sample_episodes, EvalPreprocess};
use fsdet_core::model::{DetectOptions, FewShotDetector, ModelConfig};
use fsdet_core::synth::{generate_synthetic_dataset, SynthSpec};
use fsdet_core::train::{
    run_training, sample_triplet, training_step, Sgd, StepConfig, TrainConfig, TrainSchedule, TripletConfig,
};

fn desk_spec() -> SynthSpec {
    SynthSpec { ..Default::default() }
}

fn desk_triplet_config() -> TripletConfig {
    TripletConfig {
        shots: 1,
        support_size: 64,
        query_resize: QueryResize { short_side: 96.0, long_cap: 160.0 },
    }
}

fn desk_schedule(iterations: usize) -> TrainSchedule {
    TrainSchedule {
        base_lr: 0.002,
        decay_step: (iterations * 9) / 10,
        decay_factor: 0.1,
        iterations,
        batch_size: 1,
        momentum: 0.9,
        weight_decay: 1e-4,
    }
}

#[test]
fn overfit_single_triplet_loss_decreases() {
    let spec = SynthSpec { train_images: 12, test_images: 4, image_size: 64, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let (train, _) = generate_synthetic_dataset(&spec, &mut rng).unwrap();
    let cfg = TripletConfig {
        shots: 1,
        support_size: 32,
        query_resize: QueryResize { short_side: 64.0, long_cap: 64.0 },
    };
    let mut srng = ChaCha8Rng::seed_from_u64(101);
    let triplet = sample_triplet(&train.manifest, &train.images, &cfg, &mut srng).unwrap();

    let mut model_rng = ChaCha8Rng::seed_from_u64(102);
    let mut model = FewShotDetector::new(&ModelConfig::toy(), &mut model_rng);
    let schedule = desk_schedule(200);
    let mut opt = Sgd::new(schedule.momentum, schedule.weight_decay);
    let mut step_rng = ChaCha8Rng::seed_from_u64(103);

    let mut first = None;
    let mut last = None;
    for it in 0..200 {
        let out = training_step(
            &mut model,
            &triplet,
            &StepConfig::default(),
            &schedule,
            &mut opt,
            it,
            &mut step_rng,
        )
        .unwrap();
        if it == 0 {
            first = Some(out.losses.total());
        }
        last = Some(out.losses.total());
    }
    let (first, last) = (first.unwrap(), last.unwrap());
    assert!(
        last < first * 0.5,
        "loss should shrink while overfitting one triplet: first {first}, last {last}"
    );
}

#[test]
fn training_trace_is_bitwise_deterministic() {
    let spec = SynthSpec { train_images: 24, test_images: 6, image_size: 64, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let (train, _) = generate_synthetic_dataset(&spec, &mut rng).unwrap();

    let config = TrainConfig {
        schedule: desk_schedule(10),
        step: StepConfig::default(),
        triplet: TripletConfig {
            shots: 1,
            support_size: 32,
            query_resize: QueryResize { short_side: 64.0, long_cap: 64.0 },
        },
        seed: 4242,
    };

    let run = || {
        let mut model_rng = ChaCha8Rng::seed_from_u64(7);
        let mut model = FewShotDetector::new(&ModelConfig::toy(), &mut model_rng);
        let mut opt = Sgd::new(config.schedule.momentum, config.schedule.weight_decay);
        let trace = run_training(
            &mut model,
            &train.manifest,
            &train.images,
            &config,
            &mut opt,
            0,
            |_, _| {},
        )
        .unwrap();
        (trace, model.named_tensors())
    };
    let (trace_a, weights_a) = run();
    let (trace_b, weights_b) = run();
    assert_eq!(trace_a, trace_b, "loss traces must be bitwise identical");
    assert_eq!(weights_a, weights_b, "final weights must be bitwise identical");
}

/// Long-form benchmark for hand-tuning; run with
/// `cargo test -p fsdet-core --test end_to_end manual -- --ignored --nocapture`.
#[test]
#[ignore]
fn manual_benchmark() {
    let t0 = std::time::Instant::now();
    let spec = desk_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (train, test) = generate_synthetic_dataset(&spec, &mut rng).unwrap();
    println!(
        "data: {} train imgs / {} test imgs in {:?}",
        train.manifest.records.len(),
        test.manifest.records.len(),
        t0.elapsed()
    );

    let iters: usize = std::env::var("FSDET_ITERS").ok().and_then(|v| v.parse().ok()).unwrap_or(2000);
    let lr: f64 = std::env::var("FSDET_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(0.01);
    let heads = std::env::var("FSDET_HEADS").unwrap_or_else(|_| "glp".to_string());
    let config = TrainConfig {
        schedule: TrainSchedule { base_lr: lr, ..desk_schedule(iters) },
        step: StepConfig::default(),
        triplet: desk_triplet_config(),
        seed: 11,
    };
    let mut model_rng = ChaCha8Rng::seed_from_u64(21);
    let mut model_cfg = ModelConfig::toy();
    model_cfg.heads = fsdet_core::detector::HeadToggles {
        global: heads.contains('g'),
        local: heads.contains('l'),
        patch: heads.contains('p'),
    };
    println!("heads: {heads}, lr {lr}, iters {iters}");
    let mut model = FewShotDetector::new(&model_cfg, &mut model_rng);
    let mut opt = Sgd::new(config.schedule.momentum, config.schedule.weight_decay);
    let t1 = std::time::Instant::now();
    run_training(&mut model, &train.manifest, &train.images, &config, &mut opt, 0, |row, out| {
        if row.iteration % 100 == 0 {
            println!(
                "iter {:4}  rpn {:.4}  match {:.4}  box {:.4}  total {:.4}  pairs {:?} scores fg {:.3} bg {:.3} neg {:.3} range [{:.3},{:.3}]",
                row.iteration,
                row.rpn,
                row.matching,
                row.box_refine,
                row.total,
                out.pair_counts,
                out.score_means.0,
                out.score_means.1,
                out.score_means.2,
                out.score_range.0,
                out.score_range.1
            );
        }
    })
    .unwrap();
    println!("training {:?}", t1.elapsed());

    let prep = EvalPreprocess {
        support_size: 64,
        query_resize: QueryResize { short_side: 96.0, long_cap: 160.0 },
    };
    let opts = DetectOptions { score_threshold: 0.05, nms_threshold: 0.5, soft_nms: None };

    for (name, manifest, images) in
        [("novel", &test.manifest, &test.images), ("train-cats", &train.manifest, &train.images)]
    {
        let t2 = std::time::Instant::now();
        let ways = manifest.categories.len().min(5);
        let mut ep_rng = ChaCha8Rng::seed_from_u64(31);
        let episodes = sample_episodes(manifest, ways, 1, 10, &mut ep_rng).unwrap();
        let mut per_ep = Vec::new();
        let mut per_ep_base = Vec::new();
        let mut baseline = model.clone();
        baseline.attention_enabled = false;
        for ep in &episodes {
            per_ep.push(evaluate_episode(&model, manifest, images, ep, &prep, &opts).unwrap());
            per_ep_base.push(evaluate_episode(&baseline, manifest, images, ep, &prep, &opts).unwrap());
        }
        let report = aggregate(&per_ep, 31).unwrap();
        let base = aggregate(&per_ep_base, 31).unwrap();
        println!(
            "{name} eval {:?}: AP50 {:.4} AP75 {:.4} AP {:.4} | attn recall {:.4} ABO {:.4} | ones-kernel recall {:.4} ABO {:.4}",
            t2.elapsed(),
            report.mean.ap50,
            report.mean.ap75,
            report.mean.ap,
            report.mean.recall100,
            report.mean.abo,
            base.mean.recall100,
            base.mean.abo
        );
    }
    println!("total {:?}", t0.elapsed());
}
